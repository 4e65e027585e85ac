//! Raster file I/O: float GeoTIFF images, 8-bit masks and probability maps.
//!
//! Geo-referencing tags found on an input are carried in [`GeoTags`] and
//! written back unchanged.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use tiff::decoder::{Decoder, DecodingResult};
use tiff::encoder::colortype::{self, ColorType};
use tiff::encoder::TiffEncoder;
use tiff::tags::{PhotometricInterpretation, SampleFormat, Tag};

use crate::error::{Error, Result};

const MODEL_PIXEL_SCALE: u16 = 33550;
const MODEL_TIEPOINT: u16 = 33922;
const MODEL_TRANSFORMATION: u16 = 34264;
const GEO_KEY_DIRECTORY: u16 = 34735;
const GEO_DOUBLE_PARAMS: u16 = 34736;
const GEO_ASCII_PARAMS: u16 = 34737;

#[derive(Debug, Clone, PartialEq)]
pub enum GeoTagValue {
    Shorts(Vec<u16>),
    Doubles(Vec<f64>),
    Ascii(String),
}

/// GeoTIFF tags copied verbatim from an input raster.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GeoTags(pub Vec<(u16, GeoTagValue)>);

impl GeoTags {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

struct Gray32FloatPair;

impl ColorType for Gray32FloatPair {
    type Inner = f32;
    const TIFF_VALUE: PhotometricInterpretation = PhotometricInterpretation::BlackIsZero;
    const BITS_PER_SAMPLE: &'static [u16] = &[32, 32];
    const SAMPLE_FORMAT: &'static [SampleFormat] = &[SampleFormat::IEEEFP, SampleFormat::IEEEFP];

    fn horizontal_predict(_: &[f32], _: &mut Vec<f32>) {
        unreachable!("no predictor is configured")
    }
}

fn raster_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Raster { path: path.display().to_string(), message: e.to_string() }
}

fn read_geo_tags<R: std::io::Read + std::io::Seek>(dec: &mut Decoder<R>, path: &Path) -> Result<GeoTags> {
    let mut tags = Vec::new();
    for id in [MODEL_PIXEL_SCALE, MODEL_TIEPOINT, MODEL_TRANSFORMATION, GEO_KEY_DIRECTORY, GEO_DOUBLE_PARAMS, GEO_ASCII_PARAMS] {
        let Some(v) = dec.find_tag(Tag::Unknown(id)).map_err(|e| raster_err(path, e))? else {
            continue;
        };
        let v = match id {
            GEO_KEY_DIRECTORY => GeoTagValue::Shorts(v.into_u16_vec().map_err(|e| raster_err(path, e))?),
            GEO_ASCII_PARAMS => GeoTagValue::Ascii(v.into_string().map_err(|e| raster_err(path, e))?),
            _ => GeoTagValue::Doubles(v.into_f64_vec().map_err(|e| raster_err(path, e))?),
        };
        tags.push((id, v));
    }
    Ok(GeoTags(tags))
}

fn to_f32(data: DecodingResult, path: &Path) -> Result<Vec<f32>> {
    Ok(match data {
        DecodingResult::F32(v) => v,
        DecodingResult::F64(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::U8(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::I16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U32(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::I32(v) => v.into_iter().map(|x| x as f32).collect(),
        _ => return Err(raster_err(path, "unsupported sample type")),
    })
}

/// Read a single- or multi-band TIFF as `[H, W, C]` plus its geo tags.
pub fn read_raster(path: &Path) -> Result<(Array3<f32>, GeoTags)> {
    let file = File::open(path).map_err(|e| raster_err(path, e))?;
    let mut dec = Decoder::new(BufReader::new(file)).map_err(|e| raster_err(path, e))?;
    let (w, h) = dec.dimensions().map_err(|e| raster_err(path, e))?;
    let geo = read_geo_tags(&mut dec, path)?;
    let data = to_f32(dec.read_image().map_err(|e| raster_err(path, e))?, path)?;
    let (h, w) = (h as usize, w as usize);
    if data.is_empty() || data.len() % (h * w) != 0 {
        return Err(raster_err(path, format!("{} samples do not fill a {h}x{w} grid", data.len())));
    }
    let c = data.len() / (h * w);
    let arr = Array3::from_shape_vec((h, w, c), data).map_err(|e| raster_err(path, e))?;
    Ok((arr, geo))
}

fn write_geo<W: std::io::Write + std::io::Seek, K: tiff::encoder::TiffKind>(
    enc: &mut tiff::encoder::DirectoryEncoder<'_, W, K>,
    geo: Option<&GeoTags>,
) -> tiff::TiffResult<()> {
    for (id, v) in geo.map(|g| g.0.as_slice()).unwrap_or_default() {
        match v {
            GeoTagValue::Shorts(s) => enc.write_tag(Tag::Unknown(*id), s.as_slice())?,
            GeoTagValue::Doubles(d) => enc.write_tag(Tag::Unknown(*id), d.as_slice())?,
            GeoTagValue::Ascii(s) => enc.write_tag(Tag::Unknown(*id), s.as_str())?,
        }
    }
    Ok(())
}

fn create(path: &Path) -> Result<TiffEncoder<BufWriter<File>>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let file = File::create(path).map_err(|e| raster_err(path, e))?;
    TiffEncoder::new(BufWriter::new(file)).map_err(|e| raster_err(path, e))
}

/// Write a one- or two-band `[H, W, C]` float image as a 32-bit float TIFF.
pub fn write_raster(path: &Path, img: ArrayView3<'_, f32>, geo: Option<&GeoTags>) -> Result<()> {
    let (h, w, c) = img.dim();
    let data: Vec<f32> = img.iter().copied().collect();
    let mut enc = create(path)?;
    let res = match c {
        1 => enc.new_image::<colortype::Gray32Float>(w as u32, h as u32).and_then(|mut im| {
            write_geo(im.encoder(), geo)?;
            im.write_data(&data)
        }),
        2 => enc.new_image::<Gray32FloatPair>(w as u32, h as u32).and_then(|mut im| {
            im.encoder().write_tag(Tag::ExtraSamples, &[0u16][..])?;
            write_geo(im.encoder(), geo)?;
            im.write_data(&data)
        }),
        _ => return Err(raster_err(path, format!("cannot write {c} bands (1 or 2 supported)"))),
    };
    res.map_err(|e| raster_err(path, e))
}

/// Write a 32-bit float single-band probability raster.
pub fn write_probability(path: &Path, probs: ArrayView2<'_, f32>, geo: Option<&GeoTags>) -> Result<()> {
    write_raster(path, probs.insert_axis(ndarray::Axis(2)), geo)
}

fn is_tiff(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(), Some("tif" | "tiff"))
}

/// Write a binary mask as 0/255 bytes: a TIFF (keeping geo tags) for
/// `.tif`/`.tiff` paths, otherwise a plain image chosen by extension.
pub fn write_mask(path: &Path, mask: ArrayView2<'_, u8>, geo: Option<&GeoTags>) -> Result<()> {
    let (h, w) = mask.dim();
    let data: Vec<u8> = mask.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    if is_tiff(path) {
        let mut enc = create(path)?;
        return enc
            .new_image::<colortype::Gray8>(w as u32, h as u32)
            .and_then(|mut im| {
                write_geo(im.encoder(), geo)?;
                im.write_data(&data)
            })
            .map_err(|e| raster_err(path, e));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let img = image::GrayImage::from_raw(w as u32, h as u32, data).expect("buffer matches dimensions");
    img.save(path).map_err(|e| raster_err(path, e))
}

/// Read a mask; any non-zero value becomes 1.
pub fn read_mask(path: &Path) -> Result<Array2<u8>> {
    if is_tiff(path) {
        let (a, _) = read_raster(path)?;
        let (h, w, c) = a.dim();
        if c != 1 {
            return Err(raster_err(path, format!("mask has {c} bands")));
        }
        return Ok(a.into_shape_with_order((h, w)).expect("single band").mapv(|v| u8::from(v != 0.0)));
    }
    let img = image::open(path).map_err(|e| raster_err(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    let v: Vec<u8> = img.into_raw().into_iter().map(|p| u8::from(p != 0)).collect();
    Ok(Array2::from_shape_vec((h as usize, w as usize), v).expect("buffer matches dimensions"))
}
