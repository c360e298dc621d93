//! Projection heads: `Linear -> BatchNorm1D -> ReLU -> Linear`, followed by
//! row-wise l2 normalization, with a hand-written backward pass.
//!
//! Parameters are held as `f64` but are always exactly representable as
//! `f32`: every mutation goes through [`ProjectionHead::round_to_f32`], so the
//! UPC1 checkpoint (which stores `f32`) roundtrips bit-exactly.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const UPC_MAGIC: [u8; 4] = *b"UPC1";
pub const UPC_VERSION: u32 = 1;

/// Field order of the UPC1 payload.
const FIELDS: [&str; 8] = [
    "w1",
    "b1",
    "bn_gamma",
    "bn_beta",
    "bn_running_mean",
    "bn_running_var",
    "w2",
    "b2",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadShape {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
}

impl HeadShape {
    pub const fn new(in_dim: usize, hidden_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            hidden_dim,
            out_dim,
        }
    }

    /// 512 -> 1024 -> 512, the image/English-text head.
    pub const CLIP_DEFAULT: HeadShape = HeadShape::new(512, 1024, 512);
    /// 768 -> 1536 -> 512, the multilingual head.
    pub const MULTILINGUAL_DEFAULT: HeadShape = HeadShape::new(768, 1536, 512);

    /// Hidden width twice the input, output in the shared space.
    pub fn widened(in_dim: usize, out_dim: usize) -> Self {
        Self::new(in_dim, 2 * in_dim, out_dim)
    }

    pub fn param_count(&self) -> usize {
        let h = self.hidden_dim;
        self.in_dim * h + h + 2 * h + h * self.out_dim + self.out_dim
    }
}

impl std::fmt::Display for HeadShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}->{}->{}", self.in_dim, self.hidden_dim, self.out_dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Training,
    Inference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub shape: HeadShape,
    /// hidden x in
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub bn_gamma: Array1<f64>,
    pub bn_beta: Array1<f64>,
    pub bn_running_mean: Array1<f64>,
    pub bn_running_var: Array1<f64>,
    /// out x hidden
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub mode: Mode,
    /// Free-form tag stored in checkpoints, e.g. "clip" or "multilingual".
    pub role: Option<String>,
}

/// Gradients for the six trainable tensors, same shapes as the head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub bn_gamma: Array1<f64>,
    pub bn_beta: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl HeadGradients {
    pub fn zeros(shape: HeadShape) -> Self {
        let HeadShape {
            in_dim,
            hidden_dim,
            out_dim,
        } = shape;
        Self {
            w1: Array2::zeros((hidden_dim, in_dim)),
            b1: Array1::zeros(hidden_dim),
            bn_gamma: Array1::zeros(hidden_dim),
            bn_beta: Array1::zeros(hidden_dim),
            w2: Array2::zeros((out_dim, hidden_dim)),
            b2: Array1::zeros(out_dim),
        }
    }

    pub fn accumulate(&mut self, other: &HeadGradients) {
        self.w1 += &other.w1;
        self.b1 += &other.b1;
        self.bn_gamma += &other.bn_gamma;
        self.bn_beta += &other.bn_beta;
        self.w2 += &other.w2;
        self.b2 += &other.b2;
    }

    /// Flat views in parameter order: w1, b1, gamma, beta, w2, b2.
    pub fn slices(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.bn_gamma.as_slice().unwrap(),
            self.bn_beta.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Activations kept from a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    mode: Mode,
    input: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    /// post-BN, pre-ReLU
    pre_relu: Array2<f64>,
    act: Array2<f64>,
    /// row norms of the second linear layer's output
    out_norm: Array1<f64>,
    output: Array2<f64>,
}

impl ForwardCache {
    pub fn pre_relu(&self) -> &Array2<f64> {
        &self.pre_relu
    }
}

fn round_f32(v: f64) -> f64 {
    f64::from(v as f32)
}

impl ProjectionHead {
    /// Uniform `±1/sqrt(fan_in)` weights, zero biases, identity batch norm.
    pub fn init(shape: HeadShape, rng: &mut Rng) -> Result<Self> {
        if shape.in_dim == 0 || shape.hidden_dim == 0 || shape.out_dim == 0 {
            return Err(Error::invalid(format!("head dims must be >= 1, got {shape}")));
        }
        let mut uniform = |rows: usize, cols: usize| {
            let bound = 1.0 / (cols as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || {
                round_f32(rng.uniform_range(-bound, bound))
            })
        };
        let w1 = uniform(shape.hidden_dim, shape.in_dim);
        let w2 = uniform(shape.out_dim, shape.hidden_dim);
        let h = shape.hidden_dim;
        Ok(Self {
            shape,
            w1,
            b1: Array1::zeros(h),
            bn_gamma: Array1::ones(h),
            bn_beta: Array1::zeros(h),
            bn_running_mean: Array1::zeros(h),
            bn_running_var: Array1::ones(h),
            w2,
            b2: Array1::zeros(shape.out_dim),
            mode: Mode::Training,
            role: None,
        })
    }

    pub fn param_count(&self) -> usize {
        self.shape.param_count()
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn with_role(mut self, role: &str) -> Self {
        self.role = Some(role.into());
        self
    }

    /// Mutable flat views in the same order as [`HeadGradients::slices`].
    pub fn params_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.bn_gamma.as_slice_mut().unwrap(),
            self.bn_beta.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
        ]
    }

    /// Snaps every stored value (parameters and running statistics) to f32.
    pub fn round_to_f32(&mut self) {
        for s in self.params_mut() {
            s.iter_mut().for_each(|v| *v = round_f32(*v));
        }
        self.bn_running_mean.mapv_inplace(round_f32);
        self.bn_running_var.mapv_inplace(round_f32);
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.nrows() == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if x.ncols() != self.shape.in_dim {
            return Err(Error::dim("projection head input", self.shape.in_dim, x.ncols()));
        }
        Ok(())
    }

    /// Runs the head in its current mode. Training mode uses batch statistics
    /// and updates the running estimates; it needs at least two rows.
    pub fn forward(&mut self, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&x)?;
        let h = x.dot(&self.w1.t()) + &self.b1;
        let (mean, var) = match self.mode {
            Mode::Training => {
                if x.nrows() < 2 {
                    return Err(Error::invalid(
                        "training-mode batch normalization needs a batch of at least 2 rows",
                    ));
                }
                let mean = h.mean_axis(Axis(0)).unwrap();
                let var = (&h - &mean).mapv(|d| d * d).mean_axis(Axis(0)).unwrap();
                self.bn_running_mean = &self.bn_running_mean * (1.0 - BN_MOMENTUM) + &mean * BN_MOMENTUM;
                self.bn_running_var = &self.bn_running_var * (1.0 - BN_MOMENTUM) + &var * BN_MOMENTUM;
                self.bn_running_mean.mapv_inplace(round_f32);
                self.bn_running_var.mapv_inplace(round_f32);
                (mean, var)
            }
            Mode::Inference => (self.bn_running_mean.clone(), self.bn_running_var.clone()),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let xhat = (&h - &mean) * &inv_std;
        let pre_relu = &xhat * &self.bn_gamma + &self.bn_beta;
        let act = pre_relu.mapv(|v| v.max(0.0));
        let mut output = act.dot(&self.w2.t()) + &self.b2;
        let out_norm = Array1::from_iter(output.rows().into_iter().map(|r| {
            r.dot(&r).sqrt().max(1e-12)
        }));
        for (mut row, &n) in output.rows_mut().into_iter().zip(out_norm.iter()) {
            row /= n;
        }
        let cache = ForwardCache {
            mode: self.mode,
            input: x.to_owned(),
            xhat,
            inv_std,
            pre_relu,
            act,
            out_norm,
            output: output.clone(),
        };
        Ok((output, cache))
    }

    /// Inference-mode projection. Pure: uses running statistics whatever
    /// the current mode is and never mutates the head.
    pub fn project(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut frozen = self.clone();
        frozen.mode = Mode::Inference;
        Ok(frozen.forward(x)?.0)
    }

    /// Exact gradients of a cached training-mode forward pass.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<f64>,
    ) -> Result<(HeadGradients, Array2<f64>)> {
        if cache.mode != Mode::Training {
            return Err(Error::invalid("backward needs a training-mode forward cache"));
        }
        if upstream.dim() != cache.output.dim() {
            return Err(Error::dim(
                "upstream gradient rows",
                cache.output.nrows(),
                upstream.nrows(),
            ));
        }
        let b = cache.input.nrows() as f64;

        // d/dy of y/|y|: (g - o <o, g>) / |y|
        let mut d_y = upstream.to_owned();
        for ((mut g, o), &n) in d_y
            .rows_mut()
            .into_iter()
            .zip(cache.output.rows())
            .zip(cache.out_norm.iter())
        {
            let og = o.dot(&g);
            g.scaled_add(-og, &o);
            g /= n;
        }

        let w2 = d_y.t().dot(&cache.act);
        let b2 = d_y.sum_axis(Axis(0));
        let mut d_z = d_y.dot(&self.w2);
        d_z.zip_mut_with(&cache.pre_relu, |d, &z| {
            if z <= 0.0 {
                *d = 0.0;
            }
        });

        let bn_gamma = (&d_z * &cache.xhat).sum_axis(Axis(0));
        let bn_beta = d_z.sum_axis(Axis(0));
        let d_xhat = &d_z * &self.bn_gamma;
        let sum_dxhat = d_xhat.sum_axis(Axis(0));
        let sum_dxhat_xhat = (&d_xhat * &cache.xhat).sum_axis(Axis(0));
        let d_h = (&d_xhat * b - &sum_dxhat - &cache.xhat * &sum_dxhat_xhat) * &(&cache.inv_std / b);

        let w1 = d_h.t().dot(&cache.input);
        let b1 = d_h.sum_axis(Axis(0));
        let input_grad = d_h.dot(&self.w1);
        Ok((
            HeadGradients {
                w1,
                b1,
                bn_gamma,
                bn_beta,
                w2,
                b2,
            },
            input_grad,
        ))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct UpcHeader {
    version: u32,
    in_dim: usize,
    hidden_dim: usize,
    out_dim: usize,
    mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    role: Option<String>,
    fields: Vec<String>,
}

/// UPC1 bytes: magic, `u32` header length, JSON header, then every field of
/// [`FIELDS`] as little-endian f32 in row-major order.
pub fn encode_head(head: &ProjectionHead) -> Vec<u8> {
    let header = UpcHeader {
        version: UPC_VERSION,
        in_dim: head.shape.in_dim,
        hidden_dim: head.shape.hidden_dim,
        out_dim: head.shape.out_dim,
        mode: head.mode,
        role: head.role.clone(),
        fields: FIELDS.iter().map(|s| s.to_string()).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + head.param_count() * 4 + head.shape.hidden_dim * 8);
    out.extend_from_slice(&UPC_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let blobs: [&[f64]; 8] = [
        head.w1.as_slice().unwrap(),
        head.b1.as_slice().unwrap(),
        head.bn_gamma.as_slice().unwrap(),
        head.bn_beta.as_slice().unwrap(),
        head.bn_running_mean.as_slice().unwrap(),
        head.bn_running_var.as_slice().unwrap(),
        head.w2.as_slice().unwrap(),
        head.b2.as_slice().unwrap(),
    ];
    for blob in blobs {
        for &v in blob {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_head(bytes: &[u8], origin: &Path) -> Result<ProjectionHead> {
    let bad = |reason: String| Error::format(origin, reason);
    if bytes.len() < 8 || bytes[0..4] != UPC_MAGIC {
        return Err(bad("not a UPC1 checkpoint".into()));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if hlen > body.len() {
        return Err(bad("corrupt checkpoint: truncated header".into()));
    }
    let header: UpcHeader = serde_json::from_slice(&body[..hlen])
        .map_err(|e| bad(format!("corrupt checkpoint header: {e}")))?;
    if header.version != UPC_VERSION {
        return Err(bad(format!("unsupported version {}", header.version)));
    }
    if header.fields != FIELDS {
        return Err(bad(format!("unexpected field list {:?}", header.fields)));
    }
    let shape = HeadShape::new(header.in_dim, header.hidden_dim, header.out_dim);
    if shape.in_dim == 0 || shape.hidden_dim == 0 || shape.out_dim == 0 {
        return Err(bad(format!("corrupt checkpoint: shape {shape}")));
    }
    let h = shape.hidden_dim;
    let sizes = [
        h.checked_mul(shape.in_dim),
        Some(h),
        Some(h),
        Some(h),
        Some(h),
        Some(h),
        shape.out_dim.checked_mul(h),
        Some(shape.out_dim),
    ];
    let total = sizes
        .iter()
        .try_fold(0usize, |acc, s| s.and_then(|s| acc.checked_add(s)))
        .and_then(|n| n.checked_mul(4));
    let payload = &body[hlen..];
    if total != Some(payload.len()) {
        return Err(bad(format!(
            "corrupt checkpoint: shape {shape} needs {:?} payload bytes, found {}",
            total,
            payload.len()
        )));
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())));
    if payload
        .chunks_exact(4)
        .any(|c| !f32::from_le_bytes(c.try_into().unwrap()).is_finite())
    {
        return Err(bad("corrupt checkpoint: non-finite parameter".into()));
    }
    let mut take1 = |n: usize| Array1::from_iter(values.by_ref().take(n));
    let w1 = take1(h * shape.in_dim).into_shape_with_order((h, shape.in_dim)).unwrap();
    let b1 = take1(h);
    let bn_gamma = take1(h);
    let bn_beta = take1(h);
    let bn_running_mean = take1(h);
    let bn_running_var = take1(h);
    let w2 = take1(shape.out_dim * h).into_shape_with_order((shape.out_dim, h)).unwrap();
    let b2 = take1(shape.out_dim);
    if bn_running_var.iter().any(|&v| v < 0.0) {
        return Err(bad("corrupt checkpoint: negative running variance".into()));
    }
    Ok(ProjectionHead {
        shape,
        w1,
        b1,
        bn_gamma,
        bn_beta,
        bn_running_mean,
        bn_running_var,
        w2,
        b2,
        mode: header.mode,
        role: header.role,
    })
}

/// Writes a checkpoint via a temporary file and rename.
pub fn save_head(head: &ProjectionHead, path: &Path) -> Result<()> {
    let tmp = crate::bank::sidecar_path(path, ".tmp");
    crate::bank::write_file(&tmp, &encode_head(head))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_head(path: &Path) -> Result<ProjectionHead> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_head(&bytes, path)
}

/// Loads a checkpoint and checks it has the expected shape.
pub fn load_head_expecting(path: &Path, expected: HeadShape) -> Result<ProjectionHead> {
    let head = load_head(path)?;
    if head.shape != expected {
        return Err(Error::format(
            path,
            format!("shape mismatch: expected {expected}, found {}", head.shape),
        ));
    }
    Ok(head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn random_batch(rng: &mut Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.standard_normal())
    }

    #[test]
    fn table_s1_parameter_counts() {
        assert_eq!(HeadShape::CLIP_DEFAULT.param_count(), 1_052_160);
        assert_eq!(HeadShape::MULTILINGUAL_DEFAULT.param_count(), 1_971_200);
        let head = ProjectionHead::init(HeadShape::new(5, 7, 3), &mut Rng::new(0)).unwrap();
        let mut copy = head.clone();
        let stored: usize = copy.params_mut().iter().map(|s| s.len()).sum();
        assert_eq!(stored, head.param_count());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let shape = HeadShape::new(16, 32, 8);
        let a = ProjectionHead::init(shape, &mut Rng::new(9)).unwrap();
        let b = ProjectionHead::init(shape, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.w1.iter().all(|v| v.abs() <= 0.25));
        assert!(a.w2.iter().all(|v| v.abs() <= 1.0 / 32f64.sqrt()));
        assert!(a.b1.iter().all(|&v| v == 0.0));
        assert!(a.bn_gamma.iter().all(|&v| v == 1.0));
        assert!(a.bn_running_var.iter().all(|&v| v == 1.0));
        assert_eq!(a.mode, Mode::Training);
    }

    #[test]
    fn identity_path_in_inference() {
        let shape = HeadShape::new(3, 4, 3);
        let mut head = ProjectionHead::init(shape, &mut Rng::new(0)).unwrap();
        head.w1 = Array2::eye(4).slice(ndarray::s![.., ..3]).to_owned();
        head.w2 = Array2::eye(4).slice(ndarray::s![..3, ..]).to_owned();
        head.set_mode(Mode::Inference);
        let x = array![[3.0, -1.0, 4.0]];
        let out = head.project(x.view()).unwrap();
        let s = (1.0 / (1.0 + BN_EPS)).sqrt();
        let expect = [3.0 * s, 0.0, 4.0 * s];
        let n = (expect[0] * expect[0] + expect[2] * expect[2]).sqrt();
        for (o, e) in out.row(0).iter().zip(expect) {
            assert!((o - e / n).abs() < 1e-12);
        }
    }

    #[test]
    fn training_bn_standardizes_and_outputs_are_unit() {
        let mut rng = Rng::new(4);
        let mut head = ProjectionHead::init(HeadShape::new(16, 32, 8), &mut rng).unwrap();
        let x = random_batch(&mut rng, 12, 16) * 3.0 + 1.0;
        let (out, cache) = head.forward(x.view()).unwrap();
        let z = cache.pre_relu();
        for col in z.columns() {
            let mean = col.mean().unwrap();
            let var = col.mapv(|v| (v - mean).powi(2)).mean().unwrap();
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
        for row in out.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn running_stats_move_only_in_training() {
        let mut rng = Rng::new(5);
        let mut head = ProjectionHead::init(HeadShape::new(4, 6, 3), &mut rng).unwrap();
        let x = random_batch(&mut rng, 5, 4);
        let before = head.clone();
        head.set_mode(Mode::Inference);
        head.forward(x.view()).unwrap();
        assert_eq!(head.bn_running_mean, before.bn_running_mean);
        assert_eq!(head.bn_running_var, before.bn_running_var);
        let first = head.project(x.view()).unwrap();
        assert_eq!(first, head.project(x.view()).unwrap());
        head.set_mode(Mode::Training);
        head.forward(x.view()).unwrap();
        assert_ne!(head.bn_running_mean, before.bn_running_mean);
        assert!(head.bn_running_var.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn training_needs_two_rows() {
        let mut head = ProjectionHead::init(HeadShape::new(4, 6, 3), &mut Rng::new(0)).unwrap();
        assert!(head.forward(Array2::zeros((1, 4)).view()).is_err());
        assert!(head.forward(Array2::zeros((3, 5)).view()).is_err());
    }

    #[test]
    fn backward_rejects_inference_cache() {
        let mut head = ProjectionHead::init(HeadShape::new(4, 6, 3), &mut Rng::new(0)).unwrap();
        head.set_mode(Mode::Inference);
        let x = random_batch(&mut Rng::new(1), 3, 4);
        let (out, cache) = head.forward(x.view()).unwrap();
        assert!(head.backward(&cache, out.view()).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = Rng::new(6);
        let mut head = ProjectionHead::init(HeadShape::new(16, 32, 8), &mut rng).unwrap();
        let x = random_batch(&mut rng, 8, 16);
        let (_, cache) = head.forward(x.view()).unwrap();
        let (g, dx) = head.backward(&cache, Array2::zeros((8, 8)).view()).unwrap();
        assert_eq!(g, HeadGradients::zeros(head.shape));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_rows_double_linear_grads() {
        // Duplicating the whole batch leaves batch statistics unchanged, so
        // every sum over rows doubles.
        let mut rng = Rng::new(8);
        let mut head = ProjectionHead::init(HeadShape::new(6, 10, 4), &mut rng).unwrap();
        let x = random_batch(&mut rng, 5, 6);
        let g = random_batch(&mut rng, 5, 4);
        let x2 = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        let g2 = ndarray::concatenate(Axis(0), &[g.view(), g.view()]).unwrap();
        let (_, c1) = head.clone().forward(x.view()).unwrap();
        let (_, c2) = head.forward(x2.view()).unwrap();
        let (g1, _) = head.backward(&c1, g.view()).unwrap();
        let (gd, _) = head.backward(&c2, g2.view()).unwrap();
        for (a, b) in [(&g1.w1, &gd.w1), (&g1.w2, &gd.w2)] {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((2.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{x} {y}");
            }
        }
        for (x, y) in g1.b2.iter().zip(gd.b2.iter()) {
            assert!((2.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f_c.upc");
        let mut rng = Rng::new(11);
        let mut head = ProjectionHead::init(HeadShape::new(8, 16, 4), &mut rng)
            .unwrap()
            .with_role("clip");
        head.forward(random_batch(&mut rng, 4, 8).view()).unwrap();
        head.set_mode(Mode::Inference);
        save_head(&head, &p).unwrap();
        assert_eq!(load_head(&p).unwrap(), head);

        let msg = load_head_expecting(&p, HeadShape::new(12, 24, 4))
            .unwrap_err()
            .to_string();
        assert!(msg.contains("expected 12->24->4") && msg.contains("found 8->16->4"), "{msg}");

        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = b'X';
        fs::write(&p, &bytes).unwrap();
        assert!(load_head(&p).unwrap_err().to_string().contains("not a UPC1"));
    }
}
