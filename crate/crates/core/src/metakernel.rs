//! Meta-Kernel convolution on range images.
//!
//! For every pixel `p0` and grid offset `pn`, a two-layer MLP turns the
//! geometric relation between `p0` and `p0 + pn` into a weight vector of
//! width `c_in`, which multiplies the neighbor's features element-wise. The
//! per-offset products are then aggregated: concatenated in grid order and
//! passed through an affine layer (the default), or reduced by channel-wise
//! max or sum.
//!
//! A neighbor is invalid when it falls outside the image, when it is an
//! empty pixel, or when the center pixel itself is empty. Invalid neighbors
//! contribute a zero product.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Reduce, Tape, Tensor, Var};
use crate::num::Real;
use crate::rimg::{Channel, RangeImage};

/// Ordered `(row, col)` offsets visited around each pixel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingGrid {
    offsets: Vec<(isize, isize)>,
}

impl Default for SamplingGrid {
    /// The 3x3 dilation-1 grid in row-major order.
    fn default() -> Self {
        Self::square(1, 1)
    }
}

impl SamplingGrid {
    pub fn new(offsets: Vec<(isize, isize)>) -> Result<Self> {
        if offsets.is_empty() {
            return Err(Error::contract("sampling grid needs at least one offset"));
        }
        for (i, a) in offsets.iter().enumerate() {
            if offsets[..i].contains(a) {
                return Err(Error::contract(format!("duplicate grid offset {a:?}")));
            }
        }
        Ok(Self { offsets })
    }

    /// `(2·radius + 1)²` offsets with the given dilation, row-major.
    pub fn square(radius: isize, dilation: isize) -> Self {
        let mut offsets = Vec::new();
        for dr in -radius..=radius {
            for dc in -radius..=radius {
                offsets.push((dr * dilation, dc * dilation));
            }
        }
        Self { offsets }
    }

    pub fn offsets(&self) -> &[(isize, isize)] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

/// Which geometric relation feeds the weight-generating MLP. Subscript `i`
/// is the neighbor, `j` the center pixel; `u` is the column and `v` the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MetaInput {
    /// `(x_i − x_j, y_i − y_j, z_i − z_j)`
    RelXyz,
    /// `(x_i, y_i, z_i)`
    AbsXyzNeighbor,
    /// `(u_i − u_j, v_i − v_j)`
    RelPix,
    /// `(x_i, y_i, z_i, x_j, y_j, z_j)`
    AbsXyzBoth,
    /// `(r_i − r_j)`
    RelRange,
    /// relative xyz followed by relative range
    RelXyzRange,
    /// relative xyz followed by relative pixel offset
    RelXyzPix,
}

impl MetaInput {
    pub const ALL: [MetaInput; 7] = [
        MetaInput::RelXyz,
        MetaInput::AbsXyzNeighbor,
        MetaInput::RelPix,
        MetaInput::AbsXyzBoth,
        MetaInput::RelRange,
        MetaInput::RelXyzRange,
        MetaInput::RelXyzPix,
    ];

    pub fn dim(self) -> usize {
        match self {
            MetaInput::RelXyz | MetaInput::AbsXyzNeighbor => 3,
            MetaInput::RelPix => 2,
            MetaInput::AbsXyzBoth => 6,
            MetaInput::RelRange => 1,
            MetaInput::RelXyzRange => 4,
            MetaInput::RelXyzPix => 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Aggregation {
    #[default]
    ConcatFc,
    MaxPool,
    Sum,
}

/// Meta vector for one `(p0, pn)` pair, zeroed when the neighbor is invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaSample<T> {
    pub values: Vec<T>,
    pub valid: bool,
}

/// Neighbor pixel of `p0` at offset `pn`, if it is usable.
fn neighbor<T: Real>(
    img: &RangeImage<T>,
    p0: (usize, usize),
    pn: (isize, isize),
) -> Option<(usize, usize)> {
    let r = p0.0 as isize + pn.0;
    let c = p0.1 as isize + pn.1;
    if r < 0 || c < 0 || r >= img.height() as isize || c >= img.width() as isize {
        return None;
    }
    let (r, c) = (r as usize, c as usize);
    if img.is_empty_pixel(r, c) || img.is_empty_pixel(p0.0, p0.1) {
        return None;
    }
    Some((r, c))
}

pub fn build_meta<T: Real>(
    img: &RangeImage<T>,
    p0: (usize, usize),
    pn: (isize, isize),
    meta: MetaInput,
) -> MetaSample<T> {
    let Some(nb) = neighbor(img, p0, pn) else {
        return MetaSample {
            values: vec![T::zero(); meta.dim()],
            valid: false,
        };
    };
    let pi = img.point(nb.0, nb.1);
    let pj = img.point(p0.0, p0.1);
    let rel = [pi.x - pj.x, pi.y - pj.y, pi.z - pj.z];
    let pix = [T::lit(pn.1 as f64), T::lit(pn.0 as f64)];
    let dr = img.get(Channel::Range, nb.0, nb.1) - img.get(Channel::Range, p0.0, p0.1);
    let values = match meta {
        MetaInput::RelXyz => rel.to_vec(),
        MetaInput::AbsXyzNeighbor => vec![pi.x, pi.y, pi.z],
        MetaInput::RelPix => pix.to_vec(),
        MetaInput::AbsXyzBoth => vec![pi.x, pi.y, pi.z, pj.x, pj.y, pj.z],
        MetaInput::RelRange => vec![dr],
        MetaInput::RelXyzRange => vec![rel[0], rel[1], rel[2], dr],
        MetaInput::RelXyzPix => vec![rel[0], rel[1], rel[2], pix[0], pix[1]],
    };
    MetaSample {
        values,
        valid: true,
    }
}

/// Per-image inputs of the layer that do not depend on parameters: the meta
/// matrix `[H·W·G, dim]` and the neighbor row index of every `(p0, pn)`.
#[derive(Debug, Clone)]
pub struct MetaGeometry<T> {
    pub height: usize,
    pub width: usize,
    pub grid_len: usize,
    pub meta: Tensor<T>,
    pub rows: Vec<Option<usize>>,
}

impl<T: Real> MetaGeometry<T> {
    pub fn new(img: &RangeImage<T>, grid: &SamplingGrid, meta: MetaInput) -> Self {
        let (h, w, g) = (img.height(), img.width(), grid.len());
        let dim = meta.dim();
        let mut data = Vec::with_capacity(h * w * g * dim);
        let mut rows = Vec::with_capacity(h * w * g);
        for r in 0..h {
            for c in 0..w {
                for &pn in grid.offsets() {
                    let s = build_meta(img, (r, c), pn, meta);
                    data.extend_from_slice(&s.values);
                    rows.push(neighbor(img, (r, c), pn).map(|(nr, nc)| nr * w + nc));
                }
            }
        }
        Self {
            height: h,
            width: w,
            grid_len: g,
            meta: Tensor::new(vec![h * w * g, dim], data).expect("meta shape"),
            rows,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaKernelConfig {
    pub c_in: usize,
    pub c_out: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    pub meta: MetaInput,
    pub agg: Aggregation,
    /// Apply ReLU to the generated weights as well.
    #[serde(default)]
    pub relu_weights: bool,
}

fn default_hidden() -> usize {
    64
}

impl MetaKernelConfig {
    pub fn new(c_in: usize, c_out: usize, meta: MetaInput, agg: Aggregation) -> Self {
        Self {
            c_in,
            c_out,
            hidden: default_hidden(),
            meta,
            agg,
            relu_weights: false,
        }
    }
}

/// Layer parameters. `agg_w: [G·c_in, c_out]` and `agg_b: [c_out]` exist only
/// for concatenation aggregation; the reducing modes output `c_in` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaKernelLayer<T> {
    pub config: MetaKernelConfig,
    pub grid: SamplingGrid,
    pub mlp_w1: Tensor<T>,
    pub mlp_b1: Tensor<T>,
    pub mlp_w2: Tensor<T>,
    pub mlp_b2: Tensor<T>,
    pub agg_w: Option<Tensor<T>>,
    pub agg_b: Option<Tensor<T>>,
}

/// The layer's parameters registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundMetaKernel {
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
    pub agg_w: Option<Var>,
    pub agg_b: Option<Var>,
}

impl BoundMetaKernel {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2];
        v.extend(self.agg_w);
        v.extend(self.agg_b);
        v
    }
}

fn glorot<T: Real, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::lit(rng.gen_range(-a..a)))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("glorot shape")
}

impl<T: Real> MetaKernelLayer<T> {
    fn check_config(config: &MetaKernelConfig) -> Result<()> {
        if config.c_in == 0 || config.c_out == 0 || config.hidden == 0 {
            return Err(Error::contract("layer widths must be positive"));
        }
        if config.agg != Aggregation::ConcatFc && config.c_out != config.c_in {
            return Err(Error::shape(
                "metakernel reducing aggregation",
                &[config.c_in],
                &[config.c_out],
            ));
        }
        Ok(())
    }

    /// All-zero parameters.
    pub fn zeros(config: MetaKernelConfig, grid: SamplingGrid) -> Result<Self> {
        Self::check_config(&config)?;
        let dim = config.meta.dim();
        let concat = config.agg == Aggregation::ConcatFc;
        Ok(Self {
            mlp_w1: Tensor::zeros(&[dim, config.hidden]),
            mlp_b1: Tensor::zeros(&[config.hidden]),
            mlp_w2: Tensor::zeros(&[config.hidden, config.c_in]),
            mlp_b2: Tensor::zeros(&[config.c_in]),
            agg_w: concat.then(|| Tensor::zeros(&[grid.len() * config.c_in, config.c_out])),
            agg_b: concat.then(|| Tensor::zeros(&[config.c_out])),
            config,
            grid,
        })
    }

    /// Glorot-uniform weights and zero biases.
    pub fn random<R: Rng>(config: MetaKernelConfig, grid: SamplingGrid, rng: &mut R) -> Result<Self> {
        let mut layer = Self::zeros(config, grid)?;
        let dim = config.meta.dim();
        layer.mlp_w1 = glorot(rng, dim, config.hidden);
        layer.mlp_w2 = glorot(rng, config.hidden, config.c_in);
        if layer.agg_w.is_some() {
            layer.agg_w = Some(glorot(rng, layer.grid.len() * config.c_in, config.c_out));
        }
        Ok(layer)
    }

    pub fn output_channels(&self) -> usize {
        match self.config.agg {
            Aggregation::ConcatFc => self.config.c_out,
            _ => self.config.c_in,
        }
    }

    /// Parameters with stable names, in a fixed order.
    pub fn named_params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut v = vec![
            ("mlp_w1", &self.mlp_w1),
            ("mlp_b1", &self.mlp_b1),
            ("mlp_w2", &self.mlp_w2),
            ("mlp_b2", &self.mlp_b2),
        ];
        if let (Some(w), Some(b)) = (&self.agg_w, &self.agg_b) {
            v.push(("agg_w", w));
            v.push(("agg_b", b));
        }
        v
    }

    pub fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut v = vec![
            ("mlp_w1", &mut self.mlp_w1),
            ("mlp_b1", &mut self.mlp_b1),
            ("mlp_w2", &mut self.mlp_w2),
            ("mlp_b2", &mut self.mlp_b2),
        ];
        if let (Some(w), Some(b)) = (&mut self.agg_w, &mut self.agg_b) {
            v.push(("agg_w", w));
            v.push(("agg_b", b));
        }
        v
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundMetaKernel {
        BoundMetaKernel {
            mlp_w1: tape.param(self.mlp_w1.clone()),
            mlp_b1: tape.param(self.mlp_b1.clone()),
            mlp_w2: tape.param(self.mlp_w2.clone()),
            mlp_b2: tape.param(self.mlp_b2.clone()),
            agg_w: self.agg_w.clone().map(|t| tape.param(t)),
            agg_b: self.agg_b.clone().map(|t| tape.param(t)),
        }
    }

    pub fn geometry(&self, img: &RangeImage<T>) -> MetaGeometry<T> {
        MetaGeometry::new(img, &self.grid, self.config.meta)
    }

    /// Differentiable forward. `features` is `[H·W, c_in]` in row-major pixel
    /// order; the result is `[H·W, output_channels()]`.
    pub fn forward_on(
        &self,
        tape: &mut Tape<T>,
        params: &BoundMetaKernel,
        features: Var,
        geo: &MetaGeometry<T>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let fshape = tape.shape(features).to_vec();
        if fshape != [geo.height * geo.width, cfg.c_in] {
            return Err(Error::shape(
                "metakernel features",
                &fshape,
                &[geo.height * geo.width, cfg.c_in],
            ));
        }
        if geo.grid_len != self.grid.len() || geo.meta.shape()[1] != cfg.meta.dim() {
            return Err(Error::shape(
                "metakernel geometry",
                geo.meta.shape(),
                &[geo.height * geo.width * self.grid.len(), cfg.meta.dim()],
            ));
        }
        let meta = tape.constant(geo.meta.clone());
        let hidden = tape.affine(meta, params.mlp_w1, Some(params.mlp_b1))?;
        let hidden = tape.relu(hidden);
        let mut weights = tape.affine(hidden, params.mlp_w2, Some(params.mlp_b2))?;
        if cfg.relu_weights {
            weights = tape.relu(weights);
        }
        let sampled = tape.gather(features, geo.rows.clone())?;
        let products = tape.mul(weights, sampled)?;
        let g = self.grid.len();
        let n = geo.height * geo.width;
        match cfg.agg {
            Aggregation::ConcatFc => {
                let stacked = tape.reshape(products, &[n, g * cfg.c_in])?;
                let (w, b) = match (params.agg_w, params.agg_b) {
                    (Some(w), Some(b)) => (w, b),
                    _ => return Err(Error::contract("concat aggregation needs agg parameters")),
                };
                tape.affine(stacked, w, Some(b))
            }
            Aggregation::MaxPool => tape.group_reduce(products, g, Reduce::Max),
            Aggregation::Sum => tape.group_reduce(products, g, Reduce::Sum),
        }
    }

    /// Non-differentiable forward on `[H, W, c_in]` (or `[H·W, c_in]`)
    /// features; returns `[H, W, output_channels()]`.
    pub fn forward(&self, features: &Tensor<T>, img: &RangeImage<T>) -> Result<Tensor<T>> {
        let (h, w) = (img.height(), img.width());
        let flat = flatten_hw(features, h, w, self.config.c_in)?;
        let geo = self.geometry(img);
        let mut tape = Tape::new();
        let params = self.bind(&mut tape);
        let f = tape.constant(flat);
        let out = self.forward_on(&mut tape, &params, f, &geo)?;
        let data = tape.value(out).data().to_vec();
        Tensor::new(vec![h, w, self.output_channels()], data)
    }
}

fn flatten_hw<T: Real>(features: &Tensor<T>, h: usize, w: usize, c: usize) -> Result<Tensor<T>> {
    let s = features.shape();
    if s != [h, w, c] && s != [h * w, c] {
        return Err(Error::shape("feature map", s, &[h, w, c]));
    }
    Tensor::new(vec![h * w, c], features.data().to_vec())
}

/// Neighbor rows for a plain zero-padded convolution (bounds only).
pub fn conv_rows(height: usize, width: usize, grid: &SamplingGrid) -> Vec<Option<usize>> {
    let mut rows = Vec::with_capacity(height * width * grid.len());
    for r in 0..height as isize {
        for c in 0..width as isize {
            for &(dr, dc) in grid.offsets() {
                let (nr, nc) = (r + dr, c + dc);
                let inside = nr >= 0 && nc >= 0 && nr < height as isize && nc < width as isize;
                rows.push(inside.then(|| nr as usize * width + nc as usize));
            }
        }
    }
    rows
}

/// Differentiable 3x3 convolution, zero padding, stride 1. `features` is
/// `[H·W, c_in]`, `kernel` `[9·c_in, c_out]` laid out as `[3, 3, c_in, c_out]`.
pub fn conv3x3_on<T: Real>(
    tape: &mut Tape<T>,
    features: Var,
    height: usize,
    width: usize,
    kernel: Var,
    bias: Var,
) -> Result<Var> {
    let grid = SamplingGrid::default();
    let fshape = tape.shape(features).to_vec();
    if fshape.len() != 2 || fshape[0] != height * width {
        return Err(Error::shape("conv3x3 features", &fshape, &[height * width]));
    }
    let c_in = fshape[1];
    let kshape = tape.shape(kernel).to_vec();
    if kshape.len() != 2 || kshape[0] != grid.len() * c_in {
        return Err(Error::shape("conv3x3 kernel", &kshape, &[grid.len() * c_in]));
    }
    let sampled = tape.gather(features, conv_rows(height, width, &grid))?;
    let stacked = tape.reshape(sampled, &[height * width, grid.len() * c_in])?;
    tape.affine(stacked, kernel, Some(bias))
}

/// Value-level 3x3 convolution of `[H, W, c_in]` features with a
/// `[3, 3, c_in, c_out]` kernel; returns `[H, W, c_out]`.
pub fn conv3x3_baseline<T: Real>(
    features: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = features.shape();
    if s.len() != 3 {
        return Err(Error::shape("conv3x3 features", s, &[0, 0, 0]));
    }
    let (h, w, c_in) = (s[0], s[1], s[2]);
    let ks = kernel.shape();
    if ks.len() != 4 || ks[0] != 3 || ks[1] != 3 || ks[2] != c_in {
        return Err(Error::shape("conv3x3 kernel", ks, &[3, 3, c_in]));
    }
    let c_out = ks[3];
    if bias.shape() != [c_out] {
        return Err(Error::shape("conv3x3 bias", bias.shape(), &[c_out]));
    }
    let mut tape = Tape::new();
    let f = tape.constant(Tensor::new(vec![h * w, c_in], features.data().to_vec())?);
    let k = tape.constant(Tensor::new(vec![9 * c_in, c_out], kernel.data().to_vec())?);
    let b = tape.constant(bias.clone());
    let out = conv3x3_on(&mut tape, f, h, w, k, b)?;
    Tensor::new(vec![h, w, c_out], tape.value(out).data().to_vec())
}
