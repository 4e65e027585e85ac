//! Scalar-loop reference implementations of every network block, written
//! independently of the tensor code and used as test oracles.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use damnet::backbone::{CrossTemporalAttention, MultiHeadAttention, ParallelConv, Tace, Twfe};
use damnet::fusion::TemporalDifferentialFusion;
use damnet::nn::{BatchNorm2d, Conv2d, ConvTranspose2d, LayerNorm, Linear, Mlp, ParamStore};
use damnet::nn::Mode;
use damnet::tokens::{FeatureMap, TokenSequence};
use damnet::{DamNet, ModelConfig};
use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn arr(t: &Tensor) -> ArrayD<f64> {
    let v = t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    ArrayD::from_shape_vec(IxDyn(t.dims()), v).unwrap()
}

pub fn a1(t: &Tensor) -> Array1<f64> {
    arr(t).into_dimensionality().unwrap()
}

pub fn a2(t: &Tensor) -> Array2<f64> {
    arr(t).into_dimensionality().unwrap()
}

pub fn a3(t: &Tensor) -> Array3<f64> {
    arr(t).into_dimensionality().unwrap()
}

pub fn a4(t: &Tensor) -> Array4<f64> {
    arr(t).into_dimensionality().unwrap()
}

pub fn tensor<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> Tensor {
    let v: Vec<f64> = a.iter().copied().collect();
    Tensor::from_vec(v, a.shape(), &Device::Cpu).unwrap()
}

/// Stack per-sample arrays along a new leading axis.
pub fn stack<D: ndarray::Dimension>(items: &[ndarray::Array<f64, D>]) -> Tensor {
    let views: Vec<_> = items.iter().map(|a| a.view()).collect();
    tensor(&ndarray::stack(Axis(0), &views).unwrap())
}

pub fn max_abs_diff<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>, b: &ndarray::Array<f64, D>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn random_array<D: ndarray::Dimension, Sh: ndarray::ShapeBuilder<Dim = D>>(shape: Sh, scale: f64, rng: &mut ChaCha8Rng) -> ndarray::Array<f64, D> {
    ndarray::Array::from_shape_simple_fn(shape, || rng.random_range(-scale..scale))
}

/// Give biases, normalization affines and running statistics non-trivial
/// values; freshly initialized models have them at 0 or 1.
pub fn randomize(store: &ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let is_norm = |n: &str| n.contains("norm") || n.contains(".bn");
    for (name, var) in store.trainable().into_iter().chain(store.buffers()) {
        let n = var.elem_count();
        let vals: Option<Vec<f64>> = if name.ends_with("running_var") {
            Some((0..n).map(|_| rng.random_range(0.5..1.5)).collect())
        } else if name.ends_with("running_mean") || name.ends_with(".bias") {
            Some((0..n).map(|_| rng.random_range(-0.2..0.2)).collect())
        } else if name.ends_with(".weight") && is_norm(&name) {
            Some((0..n).map(|_| 1.0 + rng.random_range(-0.2..0.2)).collect())
        } else if name.ends_with("class_token") {
            Some((0..n).map(|_| rng.random_range(-0.5..0.5)).collect())
        } else {
            None
        };
        if let Some(v) = vals {
            let t = Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap().to_dtype(var.dtype()).unwrap();
            var.set(&t).unwrap();
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_row(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// `[C, H, W]` grid to `[H*W, C]` tokens, row-major over the grid.
pub fn tokens_of(map: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = map.dim();
    let mut t = Array2::zeros((h * w, c));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                t[[y * w + x, ch]] = map[[ch, y, x]];
            }
        }
    }
    t
}

pub fn map_of(tokens: &Array2<f64>, (h, w): (usize, usize)) -> Array3<f64> {
    let c = tokens.dim().1;
    let mut m = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                m[[ch, y, x]] = tokens[[y * w + x, ch]];
            }
        }
    }
    m
}

pub struct Lin {
    pub w: Array2<f64>,
    pub b: Option<Array1<f64>>,
}

impl Lin {
    pub fn of(l: &Linear) -> Self {
        Self { w: a2(l.weight()), b: l.bias().map(a1) }
    }

    pub fn row(&self, x: &[f64]) -> Vec<f64> {
        let (o, i) = self.w.dim();
        assert_eq!(x.len(), i);
        (0..o)
            .map(|r| {
                let mut s = self.b.as_ref().map_or(0.0, |b| b[r]);
                for c in 0..i {
                    s += self.w[[r, c]] * x[c];
                }
                s
            })
            .collect()
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let o = self.w.dim().0;
        let mut out = Array2::zeros((x.dim().0, o));
        for (n, row) in x.outer_iter().enumerate() {
            let y = self.row(row.as_slice().unwrap());
            for r in 0..o {
                out[[n, r]] = y[r];
            }
        }
        out
    }
}

pub struct Ln {
    g: Array1<f64>,
    b: Array1<f64>,
    eps: f64,
}

impl Ln {
    pub fn of(l: &LayerNorm) -> Self {
        Self { g: a1(l.gamma()), b: a1(l.beta()), eps: l.eps() }
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        let d = x.dim().1 as f64;
        for mut row in out.outer_iter_mut() {
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + self.eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * self.g[j] + self.b[j];
            }
        }
        out
    }
}

pub struct MlpO {
    norm: Ln,
    fc1: Lin,
    fc2: Lin,
}

impl MlpO {
    pub fn of(m: &Mlp) -> Self {
        Self { norm: Ln::of(&m.norm), fc1: Lin::of(&m.fc1), fc2: Lin::of(&m.fc2) }
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let h = self.fc1.apply(&self.norm.apply(x)).mapv(gelu);
        self.fc2.apply(&h)
    }
}

pub struct Mha {
    norm_q: Ln,
    norm_kv: Option<Ln>,
    q: Lin,
    k: Lin,
    v: Lin,
    proj: Lin,
    heads: usize,
}

impl Mha {
    pub fn of(m: &MultiHeadAttention) -> Self {
        Self {
            norm_q: Ln::of(&m.norm_q),
            norm_kv: m.norm_kv.as_ref().map(Ln::of),
            q: Lin::of(&m.q),
            k: Lin::of(&m.k),
            v: Lin::of(&m.v),
            proj: Lin::of(&m.proj),
            heads: m.heads,
        }
    }

    pub fn apply(&self, query: &Array2<f64>, context: Option<&Array2<f64>>) -> Array2<f64> {
        let qn = self.norm_q.apply(query);
        let kv = match (&self.norm_kv, context) {
            (Some(n), Some(c)) => n.apply(c),
            (None, None) => qn.clone(),
            _ => panic!("context / norm mismatch"),
        };
        let (q, k, v) = (self.q.apply(&qn), self.k.apply(&kv), self.v.apply(&kv));
        let (nq, d) = q.dim();
        let nk = k.dim().0;
        let hd = d / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = Array2::zeros((nq, d));
        for h in 0..self.heads {
            let cols = h * hd..(h + 1) * hd;
            for i in 0..nq {
                let mut row: Vec<f64> = (0..nk)
                    .map(|j| cols.clone().map(|c| q[[i, c]] * k[[j, c]]).sum::<f64>() * scale)
                    .collect();
                softmax_row(&mut row);
                for c in cols.clone() {
                    out[[i, c]] = (0..nk).map(|j| row[j] * v[[j, c]]).sum();
                }
            }
        }
        self.proj.apply(&out)
    }
}

pub struct Conv {
    w: Array4<f64>,
    b: Option<Array1<f64>>,
    stride: usize,
    pad: usize,
    dil: usize,
}

impl Conv {
    pub fn of(c: &Conv2d) -> Self {
        let s = c.spec();
        Self { w: a4(c.weight()), b: c.bias().map(a1), stride: s.stride, pad: s.padding, dil: s.dilation }
    }

    pub fn apply(&self, x: &Array3<f64>) -> Array3<f64> {
        let (co, ci, kh, kw) = self.w.dim();
        let (c, h, w) = x.dim();
        assert_eq!(c, ci);
        let oh = (h + 2 * self.pad - self.dil * (kh - 1) - 1) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.dil * (kw - 1) - 1) / self.stride + 1;
        let mut out = Array3::zeros((co, oh, ow));
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = self.b.as_ref().map_or(0.0, |b| b[o]);
                    for i in 0..ci {
                        for ky in 0..kh {
                            let iy = (y * self.stride + ky * self.dil) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (xx * self.stride + kx * self.dil) as isize - self.pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                s += self.w[[o, i, ky, kx]] * x[[i, iy as usize, ix as usize]];
                            }
                        }
                    }
                    out[[o, y, xx]] = s;
                }
            }
        }
        out
    }
}

pub struct ConvT {
    w: Array4<f64>,
    b: Array1<f64>,
    stride: usize,
    pad: usize,
}

impl ConvT {
    pub fn of(c: &ConvTranspose2d) -> Self {
        let s = c.spec();
        Self { w: a4(c.weight()), b: a1(c.bias()), stride: s.stride, pad: s.padding }
    }

    /// Scatter form: every input pixel adds a weighted kernel footprint.
    pub fn apply(&self, x: &Array3<f64>) -> Array3<f64> {
        let (ci, co, k, _) = self.w.dim();
        let (c, h, w) = x.dim();
        assert_eq!(c, ci);
        let oh = (h - 1) * self.stride + k - 2 * self.pad;
        let ow = (w - 1) * self.stride + k - 2 * self.pad;
        let mut out = Array3::zeros((co, oh, ow));
        for o in 0..co {
            out.index_axis_mut(Axis(0), o).fill(self.b[o]);
        }
        for i in 0..ci {
            for iy in 0..h {
                for ix in 0..w {
                    for ky in 0..k {
                        let y = (iy * self.stride + ky) as isize - self.pad as isize;
                        if y < 0 || y >= oh as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let xx = (ix * self.stride + kx) as isize - self.pad as isize;
                            if xx < 0 || xx >= ow as isize {
                                continue;
                            }
                            for o in 0..co {
                                out[[o, y as usize, xx as usize]] += x[[i, iy, ix]] * self.w[[i, o, ky, kx]];
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

pub struct Bn {
    g: Array1<f64>,
    b: Array1<f64>,
    rm: Array1<f64>,
    rv: Array1<f64>,
    eps: f64,
}

impl Bn {
    pub fn of(bn: &BatchNorm2d) -> Self {
        Self { g: a1(bn.gamma()), b: a1(bn.beta()), rm: a1(bn.running_mean()), rv: a1(bn.running_var()), eps: bn.eps() }
    }

    /// Batch statistics (biased variance) in training mode, running
    /// statistics otherwise.
    pub fn apply(&self, batch: &[Array3<f64>], train: bool) -> Vec<Array3<f64>> {
        let c = batch[0].dim().0;
        let mut out: Vec<Array3<f64>> = batch.to_vec();
        for ch in 0..c {
            let (mean, var) = if train {
                let vals: Vec<f64> = batch.iter().flat_map(|x| x.index_axis(Axis(0), ch).iter().copied().collect::<Vec<_>>()).collect();
                let n = vals.len() as f64;
                let m = vals.iter().sum::<f64>() / n;
                (m, vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n)
            } else {
                (self.rm[ch], self.rv[ch])
            };
            let inv = 1.0 / (var + self.eps).sqrt();
            for x in out.iter_mut() {
                x.index_axis_mut(Axis(0), ch).mapv_inplace(|v| (v - mean) * inv * self.g[ch] + self.b[ch]);
            }
        }
        out
    }
}

pub struct Pcm {
    c1: Conv,
    bn1: Bn,
    c2: Conv,
    bn2: Bn,
    c3: Conv,
}

impl Pcm {
    pub fn of(p: &ParallelConv) -> Self {
        Self {
            c1: Conv::of(&p.conv1),
            bn1: Bn::of(&p.bn1),
            c2: Conv::of(&p.conv2),
            bn2: Bn::of(&p.bn2),
            c3: Conv::of(&p.conv3),
        }
    }

    pub fn apply(&self, batch: &[Array3<f64>], train: bool) -> Vec<Array3<f64>> {
        let h: Vec<_> = batch.iter().map(|x| self.c1.apply(x)).collect();
        let h: Vec<_> = self.bn1.apply(&h, train).into_iter().map(|x| x.mapv(silu)).collect();
        let h: Vec<_> = h.iter().map(|x| self.c2.apply(x)).collect();
        let h: Vec<_> = self.bn2.apply(&h, train).into_iter().map(|x| x.mapv(silu)).collect();
        h.iter().map(|x| self.c3.apply(x)).collect()
    }
}

pub struct Ctca {
    wq: Lin,
    wk: Lin,
    wv: Lin,
    mlp: MlpO,
    eps: f64,
}

impl Ctca {
    pub fn of(c: &CrossTemporalAttention) -> Self {
        Self { wq: Lin::of(&c.w_q), wk: Lin::of(&c.w_k), wv: Lin::of(&c.w_v), mlp: MlpO::of(&c.mlp), eps: c.eps }
    }

    fn change(&self, q_src: &Array2<f64>, kv_src: &Array2<f64>) -> Array2<f64> {
        let (q, k, v) = (self.wq.apply(q_src), self.wk.apply(kv_src), self.wv.apply(kv_src));
        let (n, d) = q.dim();
        let norm = |m: &Array2<f64>, i: usize| (0..d).map(|c| m[[i, c]] * m[[i, c]]).sum::<f64>().sqrt() + self.eps;
        let mut ca = q.clone();
        for i in 0..n {
            let qi = norm(&q, i);
            let mut row: Vec<f64> =
                (0..k.dim().0).map(|j| (0..d).map(|c| q[[i, c]] * k[[j, c]]).sum::<f64>() / (qi * norm(&k, j))).collect();
            softmax_row(&mut row);
            for c in 0..d {
                ca[[i, c]] -= (0..row.len()).map(|j| row[j] * v[[j, c]]).sum::<f64>();
            }
        }
        ca
    }

    pub fn apply(&self, r_pre: &Array2<f64>, r_post: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let a = self.change(r_pre, r_post);
        let b = self.change(r_post, r_pre);
        (self.mlp.apply(&a) + &a, self.mlp.apply(&b) + &b)
    }
}

pub struct TaceO {
    mha: Mha,
    pcm: Pcm,
    ffn: MlpO,
}

impl TaceO {
    pub fn of(t: &Tace) -> Self {
        Self { mha: Mha::of(&t.mha), pcm: Pcm::of(&t.pcm), ffn: MlpO::of(&t.ffn) }
    }

    /// Per-sample token matrices `[N, D]` on `grid`; returns the enhanced
    /// maps and, with a class token, the semantic token of each sample.
    pub fn apply(
        &self,
        r: &[Array2<f64>],
        f: &[Array2<f64>],
        grid: (usize, usize),
        cls: Option<&Array1<f64>>,
        train: bool,
    ) -> (Vec<Array3<f64>>, Option<Vec<Array1<f64>>>) {
        let maps: Vec<_> = r.iter().map(|t| map_of(t, grid)).collect();
        let local = self.pcm.apply(&maps, train);
        let mut outs = Vec::new();
        let mut sems = Vec::new();
        for ((ri, fi), li) in r.iter().zip(f).zip(&local) {
            let spatial_res = tokens_of(li) + ri;
            let (query, residual) = match cls {
                Some(c) => {
                    let row = c.view().insert_axis(Axis(0));
                    (
                        ndarray::concatenate(Axis(0), &[row, ri.view()]).unwrap(),
                        ndarray::concatenate(Axis(0), &[row, spatial_res.view()]).unwrap(),
                    )
                }
                None => (ri.clone(), spatial_res),
            };
            let t = self.mha.apply(&query, Some(fi)) + &residual;
            let out = self.ffn.apply(&t) + &t;
            match cls {
                Some(_) => {
                    sems.push(out.row(0).to_owned());
                    outs.push(map_of(&out.slice(ndarray::s![1.., ..]).to_owned(), grid));
                }
                None => outs.push(map_of(&out, grid)),
            }
        }
        (outs, cls.map(|_| sems))
    }
}

pub struct TwfeO {
    oel: Conv,
    prm: Vec<Conv>,
    mha: Mha,
    pcm: Pcm,
    ffn: MlpO,
}

impl TwfeO {
    pub fn of(t: &Twfe) -> Self {
        Self {
            oel: Conv::of(&t.oel.conv),
            prm: t.prm.branches.iter().map(Conv::of).collect(),
            mha: Mha::of(&t.mha),
            pcm: Pcm::of(&t.pcm),
            ffn: MlpO::of(&t.ffn),
        }
    }

    /// Per-sample `[C, H, W]` inputs to `[N, D]` tokens and their grid.
    pub fn apply(&self, batch: &[Array3<f64>], train: bool) -> (Vec<Array2<f64>>, (usize, usize)) {
        let local = self.pcm.apply(batch, train);
        let mut out = Vec::new();
        let mut grid = (0, 0);
        for (x, l) in batch.iter().zip(&local) {
            let e = self.oel.apply(x);
            let parts: Vec<_> = self.prm.iter().map(|c| c.apply(&e)).collect();
            let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
            let ms = ndarray::concatenate(Axis(0), &views).unwrap().mapv(gelu);
            grid = (ms.dim().1, ms.dim().2);
            assert_eq!(l.dim(), ms.dim(), "local and multiscale grids differ");
            let ms_t = tokens_of(&ms);
            let t = self.mha.apply(&ms_t, None) + tokens_of(l) + &ms_t;
            out.push(self.ffn.apply(&t) + &t);
        }
        (out, grid)
    }
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn bilinear(x: &Array3<f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        (i0, (i0 + 1).min(n_in - 1), src - i0 as f64)
    };
    let mut out = Array3::zeros((c, oh, ow));
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, h, oh);
        for xx in 0..ow {
            let (x0, x1, fx) = coord(xx, w, ow);
            for ch in 0..c {
                let top = x[[ch, y0, x0]] * (1.0 - fx) + x[[ch, y0, x1]] * fx;
                let bot = x[[ch, y1, x0]] * (1.0 - fx) + x[[ch, y1, x1]] * fx;
                out[[ch, y, xx]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub struct TdfO {
    diff: Vec<Conv>,
    fuse: Conv,
    gate: Option<(Lin, Lin)>,
    up1: ConvT,
    up2: ConvT,
}

pub struct TdfOut {
    pub fused: Array3<f64>,
    pub enhanced: Array3<f64>,
    pub probs: Array2<f64>,
}

impl TdfO {
    pub fn of(t: &TemporalDifferentialFusion) -> Self {
        Self {
            diff: t.diff_convs.iter().map(Conv::of).collect(),
            fuse: Conv::of(&t.fuse),
            gate: t.gate.as_ref().map(|g| (Lin::of(&g.fc1), Lin::of(&g.fc2))),
            up1: ConvT::of(&t.up1),
            up2: ConvT::of(&t.up2),
        }
    }

    /// One sample: four stage features per branch plus the optional token.
    pub fn apply(&self, pre: &[Array3<f64>], post: &[Array3<f64>], sem: Option<&Array1<f64>>) -> TdfOut {
        let (_, h, w) = pre[0].dim();
        let parts: Vec<Array3<f64>> = (0..4)
            .map(|i| {
                let d = (&pre[i] - &post[i]).mapv(f64::abs);
                bilinear(&self.diff[i].apply(&d), h, w)
            })
            .collect();
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let fused = ndarray::concatenate(Axis(0), &views).unwrap();
        let mut enhanced = self.fuse.apply(&fused);
        if let (Some((fc1, fc2)), Some(t)) = (&self.gate, sem) {
            let hidden: Vec<f64> = fc1.row(t.as_slice().unwrap()).into_iter().map(gelu).collect();
            let g: Vec<f64> = fc2.row(&hidden).into_iter().map(logistic).collect();
            for (ch, gv) in g.iter().enumerate() {
                enhanced.index_axis_mut(Axis(0), ch).mapv_inplace(|v| v * gv);
            }
        }
        let h1 = self.up1.apply(&enhanced).mapv(|v| v.max(0.0));
        let logits = self.up2.apply(&h1);
        let probs = logits.index_axis(Axis(0), 0).mapv(logistic);
        TdfOut { fused, enhanced, probs }
    }
}

/// Per-stage features of both branches and the semantic tokens.
pub struct BackboneRef {
    pub pre: Vec<Vec<Array3<f64>>>,
    pub post: Vec<Vec<Array3<f64>>>,
    pub semantic: Option<Vec<Array1<f64>>>,
}

/// Whole backbone on per-sample `[C, H, W]` inputs. Both branches form one
/// batch, so training-mode batch statistics cover pre and post together.
pub fn backbone_ref(model: &DamNet, pre: &[Array3<f64>], post: &[Array3<f64>], train: bool) -> BackboneRef {
    let b = pre.len();
    let cls = model.backbone.class_token.as_ref().map(|v| a1(v.as_tensor()));
    let mut x: Vec<Array3<f64>> = pre.iter().chain(post).cloned().collect();
    let mut out = BackboneRef { pre: Vec::new(), post: Vec::new(), semantic: None };
    for (si, stage) in model.backbone.stages.iter().enumerate() {
        let (mut r, grid) = TwfeO::of(&stage.twfe).apply(&x, train);
        let mut maps: Vec<Array3<f64>> = r.iter().map(|t| map_of(t, grid)).collect();
        let last = stage.blocks.len().saturating_sub(1);
        for (bi, block) in stage.blocks.iter().enumerate() {
            let ctca = Ctca::of(&block.ctca);
            let mut f = vec![Array2::zeros((0, 0)); 2 * b];
            for i in 0..b {
                let (fp, fq) = ctca.apply(&r[i], &r[i + b]);
                f[i] = fp;
                f[i + b] = fq;
            }
            let token = if si == 3 && bi == last { cls.as_ref() } else { None };
            let (fe, sem) = TaceO::of(&block.tace).apply(&r, &f, grid, token, train);
            if let Some(s) = sem {
                out.semantic = Some(s[..b].to_vec());
            }
            r = fe.iter().map(tokens_of).collect();
            maps = fe;
        }
        out.pre.push(maps[..b].to_vec());
        out.post.push(maps[b..].to_vec());
        x = maps;
    }
    out
}

/// Per-sample `[C, H, W]` images of a `[B, C, H, W]` tensor.
pub fn samples(t: &Tensor) -> Vec<Array3<f64>> {
    a4(t).outer_iter().map(|s| s.to_owned()).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_images(b: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let v: Vec<f64> = (0..b * c * h * w).map(|_| r.random::<f64>()).collect();
    Tensor::from_vec(v, (b, c, h, w), &Device::Cpu).unwrap()
}

fn token_batch(b: usize, n: usize, d: usize, grid: (usize, usize), r: &mut ChaCha8Rng) -> (TokenSequence, Vec<Array2<f64>>) {
    let items: Vec<Array2<f64>> = (0..b).map(|_| random_array((n, d), 1.0, r)).collect();
    (TokenSequence::new(stack(&items), grid).unwrap(), items)
}

/// Largest deviation of the change attention from the reference on one
/// randomized instance.
pub fn ctca_instance_error(inst: u64) -> f64 {
    let mut r = rng(100 + inst);
    let dim = [4, 6, 8][inst as usize % 3];
    let hidden = r.random_range(2..10);
    let store = ParamStore::new(DType::F64, &Device::Cpu, inst);
    let ctca = CrossTemporalAttention::new(&store.root().pp("ctca"), dim, hidden, 1e-8, 1e-5).unwrap();
    randomize(&store, inst);
    let grid = (r.random_range(1..4), r.random_range(1..4));
    let b = r.random_range(1..3);
    let (pre, pre_a) = token_batch(b, grid.0 * grid.1, dim, grid, &mut r);
    let (post, post_a) = token_batch(b, grid.0 * grid.1, dim, grid, &mut r);
    let (fp, fq) = ctca.forward(&pre, &post).unwrap();
    let oracle = Ctca::of(&ctca);
    let mut err = 0.0f64;
    for i in 0..b {
        let (ep, eq) = oracle.apply(&pre_a[i], &post_a[i]);
        err = err.max(max_abs_diff(&a2(&fp.tokens.get(i).unwrap()), &ep));
        err = err.max(max_abs_diff(&a2(&fq.tokens.get(i).unwrap()), &eq));
    }
    err
}

/// Same for the enhancement block in training mode; instances 6..10 run
/// stage 4 with a class token.
pub fn tace_instance_error(inst: u64) -> f64 {
    let cfg = ModelConfig::tiny();
    let mut r = rng(200 + inst);
    let with_token = inst >= 6;
    let stage = if with_token { 4 } else { 1 + inst as usize % 4 };
    let sc = cfg.stage(stage);
    let store = ParamStore::new(DType::F64, &Device::Cpu, inst);
    let tace = Tace::new(&store.root().pp("tace"), &sc, 1e-5, 1e-5, 0.1).unwrap();
    randomize(&store, 50 + inst);
    let grid = (r.random_range(1..5), r.random_range(1..5));
    let b = r.random_range(1..4);
    let n = grid.0 * grid.1;
    let (rt, ra) = token_batch(b, n, sc.dim, grid, &mut r);
    let (ft, fa) = token_batch(b, n, sc.dim, grid, &mut r);
    let cls: Option<Array1<f64>> = with_token.then(|| random_array(sc.dim, 0.5, &mut r));
    let cls_t = cls.as_ref().map(tensor);
    let (map, sem) = tace.forward(&rt, &ft, cls_t.as_ref(), Mode::Train).unwrap();
    let (emap, esem) = TaceO::of(&tace).apply(&ra, &fa, grid, cls.as_ref(), true);
    let got = samples(map.tensor());
    let mut err = (0..b).map(|i| max_abs_diff(&got[i], &emap[i])).fold(0.0, f64::max);
    match (sem, esem) {
        (Some(s), Some(e)) => {
            let s = a2(&s);
            for i in 0..b {
                err = err.max(max_abs_diff(&s.row(i).to_owned(), &e[i]));
            }
        }
        (None, None) => {}
        _ => return f64::INFINITY,
    }
    err
}

/// Same for the differential fusion; every third instance has no gate.
pub fn tdf_instance_error(inst: u64) -> f64 {
    let mut r = rng(400 + inst);
    let mut cfg = ModelConfig::tiny();
    cfg.use_semantic_token = inst % 3 != 0;
    cfg.use_ctca_tace = cfg.use_semantic_token;
    cfg.init_seed = inst;
    let model = DamNet::new(&cfg, DType::F64, &Device::Cpu).unwrap();
    randomize(model.store(), 90 + inst);
    let b = r.random_range(1..3);
    let (h4, w4) = (8 * r.random_range(1..3), 8 * r.random_range(1..3));
    let mut pre = Vec::new();
    let mut post = Vec::new();
    for i in 0..4 {
        let (h, w) = (h4 >> i, w4 >> i);
        pre.push((0..b).map(|_| random_array((cfg.dims[i], h, w), 1.0, &mut r)).collect::<Vec<Array3<f64>>>());
        post.push((0..b).map(|_| random_array((cfg.dims[i], h, w), 1.0, &mut r)).collect::<Vec<Array3<f64>>>());
    }
    let sem: Option<Vec<Array1<f64>>> =
        cfg.use_semantic_token.then(|| (0..b).map(|_| random_array(cfg.dims[3], 1.0, &mut r)).collect());
    let maps = |v: &Vec<Vec<Array3<f64>>>| v.iter().map(|s| FeatureMap(stack(s))).collect::<Vec<_>>();
    let sem_t = sem.as_ref().map(|s| stack(s));
    let out = model.fusion.forward(&maps(&pre), &maps(&post), sem_t.as_ref()).unwrap();
    let oracle = TdfO::of(&model.fusion);
    let (fused, enhanced, probs) = (samples(&out.fused), samples(&out.enhanced), samples(&out.probs));
    let mut err = 0.0f64;
    for i in 0..b {
        let per: Vec<Array3<f64>> = pre.iter().map(|s| s[i].clone()).collect();
        let per_post: Vec<Array3<f64>> = post.iter().map(|s| s[i].clone()).collect();
        let e = oracle.apply(&per, &per_post, sem.as_ref().map(|s| &s[i]));
        err = err.max(max_abs_diff(&fused[i], &e.fused));
        err = err.max(max_abs_diff(&enhanced[i], &e.enhanced));
        err = err.max(max_abs_diff(&probs[i].index_axis(Axis(0), 0).to_owned(), &e.probs));
    }
    err
}

/// Confusion counts `[tp, tn, fp, fn]` by a double loop over the grid.
pub fn loop_counts(pred: &Array2<u8>, label: &Array2<u8>) -> [u64; 4] {
    let mut c = [0u64; 4];
    for r in 0..pred.nrows() {
        for col in 0..pred.ncols() {
            let k = match (pred[[r, col]], label[[r, col]]) {
                (1, 1) => 0,
                (0, 0) => 1,
                (1, 0) => 2,
                _ => 3,
            };
            c[k] += 1;
        }
    }
    c
}
