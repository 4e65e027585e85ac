//! Non-overlapping dataset tiling and its inverse.
//!
//! Right and bottom remainders that do not fill a whole tile are dropped.

use ndarray::{s, Array2, Array3};

use crate::data::MultiTemporalPair;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    /// Top-left `(row, col)` of the tile in the scene.
    pub origin: (usize, usize),
    pub pair: MultiTemporalPair,
}

/// Tile origins of an `h x w` scene, row-major.
pub fn tile_origins(h: usize, w: usize, size: usize) -> Result<Vec<(usize, usize)>> {
    if size == 0 {
        return Err(Error::Config("tile size must be positive".into()));
    }
    if h < size || w < size {
        return Err(Error::Data(format!("scene {h}x{w} is smaller than one {size}x{size} tile")));
    }
    let mut out = Vec::new();
    for r in 0..h / size {
        for c in 0..w / size {
            out.push((r * size, c * size));
        }
    }
    Ok(out)
}

pub fn tile(pair: &MultiTemporalPair, size: usize) -> Result<Vec<Tile>> {
    let (h, w, _) = pair.dim();
    tile_origins(h, w, size)?
        .into_iter()
        .map(|(r, c)| {
            let win = s![r..r + size, c..c + size, ..];
            let label = pair.label.as_ref().map(|l| l.slice(s![r..r + size, c..c + size]).to_owned());
            Ok(Tile {
                origin: (r, c),
                pair: MultiTemporalPair::new(pair.pre.slice(win).to_owned(), pair.post.slice(win).to_owned(), label)?,
            })
        })
        .collect()
}

/// Reassemble tiles into an `h x w` scene. Uncovered pixels are zero.
pub fn mosaic(tiles: &[Tile], h: usize, w: usize) -> Result<MultiTemporalPair> {
    let first = tiles.first().ok_or_else(|| Error::Data("no tiles to mosaic".into()))?;
    let c = first.pair.channels();
    let mut pre = Array3::<f32>::zeros((h, w, c));
    let mut post = Array3::<f32>::zeros((h, w, c));
    let mut label = first.pair.label.as_ref().map(|_| Array2::<u8>::zeros((h, w)));
    for t in tiles {
        let (r, col) = t.origin;
        let (th, tw, tc) = t.pair.dim();
        if r + th > h || col + tw > w || tc != c {
            return Err(Error::Shape(format!("tile at {:?} of size {:?} does not fit {h}x{w}x{c}", t.origin, t.pair.dim())));
        }
        pre.slice_mut(s![r..r + th, col..col + tw, ..]).assign(&t.pair.pre);
        post.slice_mut(s![r..r + th, col..col + tw, ..]).assign(&t.pair.post);
        match (&mut label, &t.pair.label) {
            (Some(dst), Some(src)) => dst.slice_mut(s![r..r + th, col..col + tw]).assign(src),
            (None, None) => {}
            _ => return Err(Error::Data("tiles mix labelled and unlabelled pairs".into())),
        }
    }
    MultiTemporalPair::new(pre, post, label)
}
