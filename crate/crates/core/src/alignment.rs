//! Training-step math: soft retrieval from the memory banks, perturbation
//! onto the unit sphere, and the contrastive/attractive losses with their
//! gradients with respect to the projected embeddings.

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::EmbeddingBank;
use crate::error::{Error, Result};
use crate::numerics::{self, Rng};

/// Loss hyperparameters and the ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Soft-retrieval temperature.
    pub tau_retrieval: f64,
    /// InfoNCE temperature.
    pub tau_nce: f64,
    /// Perturbation standard deviation (square root of the noise variance).
    pub sigma: f64,
    pub lambda_intra: f64,
    pub use_text: bool,
    pub use_pseudo: bool,
    pub use_intra: bool,
    pub use_perturbation: bool,
}

pub const DEFAULT_TAU: f64 = 0.01;
pub const DEFAULT_SIGMA2: f64 = 0.004;

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau_retrieval: DEFAULT_TAU,
            tau_nce: DEFAULT_TAU,
            sigma: DEFAULT_SIGMA2.sqrt(),
            lambda_intra: 1.0,
            use_text: true,
            use_pseudo: true,
            use_intra: true,
            use_perturbation: true,
        }
    }
}

impl LossConfig {
    pub fn with_sigma2(mut self, sigma2: f64) -> Self {
        self.sigma = sigma2.sqrt();
        self
    }

    fn any_nce(&self) -> bool {
        self.use_text || self.use_pseudo
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_retrieval > 0.0 && self.tau_nce > 0.0) {
            return Err(Error::invalid("temperatures must be positive"));
        }
        if !(self.sigma >= 0.0 && self.lambda_intra >= 0.0) {
            return Err(Error::invalid("sigma and lambda must be non-negative"));
        }
        Ok(())
    }
}

/// One batch of quadruples, row `i` holding
/// (English text in CLIP space, English text in multilingual space,
///  retrieved image, retrieved multilingual text).
///
/// The same container carries the raw, perturbed, and projected stages of a
/// step, and the gradients with respect to the projected stage.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadBatch {
    pub e_c: Array2<f64>,
    pub e_m: Array2<f64>,
    pub v_c: Array2<f64>,
    pub m_m: Array2<f64>,
}

impl QuadBatch {
    pub fn rows(&self) -> usize {
        self.e_c.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            e_c: Array2::zeros(self.e_c.dim()),
            e_m: Array2::zeros(self.e_m.dim()),
            v_c: Array2::zeros(self.v_c.dim()),
            m_m: Array2::zeros(self.m_m.dim()),
        }
    }

    fn check_projected(&self) -> Result<(usize, usize)> {
        let (b, d) = self.e_c.dim();
        for (name, m) in [("e_m", &self.e_m), ("v_c", &self.v_c), ("m_m", &self.m_m)] {
            if m.nrows() != b {
                return Err(Error::dim(format!("{name} batch rows"), b, m.nrows()));
            }
            if m.ncols() != d {
                return Err(Error::dim(format!("{name} width"), d, m.ncols()));
            }
        }
        if b == 0 {
            return Err(Error::invalid("empty batch"));
        }
        Ok((b, d))
    }
}

/// A memory bank prepared for cosine retrieval: raw rows (averaged) and
/// their unit-normalized copies (scored).
#[derive(Debug, Clone)]
pub struct MemoryBank {
    raw: Array2<f64>,
    unit: Array2<f64>,
}

impl MemoryBank {
    pub fn new(bank: &EmbeddingBank) -> Result<Self> {
        Self::from_array(bank.to_array())
    }

    pub fn from_array(raw: Array2<f64>) -> Result<Self> {
        if raw.nrows() == 0 {
            return Err(Error::invalid("empty memory bank"));
        }
        let mut unit = raw.clone();
        for (i, mut row) in unit.rows_mut().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if n <= 1e-12 {
                return Err(Error::ZeroNorm(i));
            }
            row /= n;
        }
        Ok(Self { raw, unit })
    }

    pub fn rows(&self) -> usize {
        self.raw.nrows()
    }

    pub fn dim(&self) -> usize {
        self.raw.ncols()
    }

    pub fn raw(&self) -> &Array2<f64> {
        &self.raw
    }

    /// Largest row norm; retrieved vectors never exceed it.
    pub fn max_row_norm(&self) -> f64 {
        self.raw
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .fold(0.0, f64::max)
    }
}

/// Softmax weights of one query over all bank rows.
pub fn retrieval_weights(query: &[f64], bank: &MemoryBank, tau: f64) -> Result<Vec<f64>> {
    if query.len() != bank.dim() {
        return Err(Error::dim("soft retrieval query", bank.dim(), query.len()));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("retrieval temperature must be positive"));
    }
    let qn = numerics::norm(query);
    if qn <= 1e-12 {
        return Err(Error::invalid("zero-norm retrieval query"));
    }
    let mut logits: Vec<f64> = bank
        .unit
        .rows()
        .into_iter()
        .map(|r| numerics::dot(query, r.as_slice().unwrap()) / qn / tau)
        .collect();
    numerics::softmax_in_place(&mut logits);
    Ok(logits)
}

/// Softmax-weighted average of bank rows, scored by cosine similarity to
/// `query` at temperature `tau`.
pub fn soft_retrieve(query: &[f64], bank: &MemoryBank, tau: f64) -> Result<Vec<f64>> {
    let w = retrieval_weights(query, bank, tau)?;
    let mut out = vec![0.0; bank.dim()];
    for (wk, row) in w.iter().zip(bank.raw.rows()) {
        for (o, &v) in out.iter_mut().zip(row.iter()) {
            *o += wk * v;
        }
    }
    Ok(out)
}

/// Batched [`soft_retrieve`]. Queries are processed in fixed-size chunks, so
/// the result does not depend on the worker count.
pub fn soft_retrieve_batch(queries: ArrayView2<f64>, bank: &MemoryBank, tau: f64) -> Result<Array2<f64>> {
    if queries.ncols() != bank.dim() {
        return Err(Error::dim("soft retrieval queries", bank.dim(), queries.ncols()));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("retrieval temperature must be positive"));
    }
    // bound the logits block to ~16M entries
    let chunk = (16_777_216 / bank.rows()).clamp(1, 256);
    let mut out = Array2::zeros((queries.nrows(), bank.dim()));
    let blocks: Vec<_> = queries
        .axis_chunks_iter(Axis(0), chunk)
        .zip(out.axis_chunks_iter_mut(Axis(0), chunk))
        .collect();
    blocks
        .into_par_iter()
        .try_for_each(|(q, mut o)| -> Result<()> {
            let mut qn = q.to_owned();
            for (i, mut row) in qn.rows_mut().into_iter().enumerate() {
                let n = row.dot(&row).sqrt();
                if n <= 1e-12 {
                    return Err(Error::invalid(format!("zero-norm retrieval query (chunk row {i})")));
                }
                row /= n * tau;
            }
            let mut logits = qn.dot(&bank.unit.t());
            for mut row in logits.rows_mut() {
                numerics::softmax_in_place(row.as_slice_mut().unwrap());
            }
            o.assign(&logits.dot(&bank.raw));
            Ok(())
        })?;
    Ok(out)
}

/// `Norm(v + eps)` with `eps ~ N(0, sigma^2 I)`.
pub fn perturb(v: &[f64], sigma: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    const RETRIES: usize = 3;
    for _ in 0..=RETRIES {
        let mut out = numerics::gaussian(rng, v.len(), sigma);
        out.iter_mut().zip(v).for_each(|(o, &x)| *o += x);
        if numerics::normalize(&mut out).is_ok() {
            return Ok(out);
        }
    }
    Err(Error::invalid(format!(
        "perturbed vector had zero norm {} times in a row",
        RETRIES + 1
    )))
}

/// Row-wise [`perturb`], drawing noise in row order.
pub fn perturb_rows(m: ArrayView2<f64>, sigma: f64, rng: &mut Rng) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(m.dim());
    for (src, mut dst) in m.rows().into_iter().zip(out.rows_mut()) {
        let p = perturb(src.as_slice().expect("standard layout"), sigma, rng)?;
        dst.assign(&ndarray::ArrayView1::from(&p[..]));
    }
    Ok(out)
}

/// Unit-normalizes every row (the noiseless case of [`perturb_rows`]).
pub fn normalize_rows(m: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut out = m.to_owned();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        numerics::normalize(row.as_slice_mut().expect("owned rows are contiguous")).map_err(|_| Error::ZeroNorm(i))?;
    }
    Ok(out)
}

fn check_pair(q: &ArrayView2<f64>, k: &ArrayView2<f64>) -> Result<()> {
    if q.nrows() != k.nrows() {
        return Err(Error::dim("InfoNCE key rows", q.nrows(), k.nrows()));
    }
    if q.ncols() != k.ncols() {
        return Err(Error::dim("InfoNCE width", q.ncols(), k.ncols()));
    }
    if q.nrows() == 0 {
        return Err(Error::invalid("InfoNCE needs at least one row"));
    }
    Ok(())
}

fn check_unit(m: &ArrayView2<f64>, what: &str) -> Result<()> {
    for (i, row) in m.rows().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if (n - 1.0).abs() > 1e-4 {
            return Err(Error::invalid(format!("{what} row {i} has norm {n}, expected unit")));
        }
    }
    Ok(())
}

/// InfoNCE of `q` against `k` with matching rows as positives, plus its
/// gradients with respect to both inputs. Similarity is the dot product; the
/// caller supplies unit rows.
fn nce_with_grad(q: ArrayView2<f64>, k: ArrayView2<f64>, tau: f64) -> (f64, Array2<f64>, Array2<f64>) {
    let b = q.nrows() as f64;
    let mut p = q.dot(&k.t()) / tau;
    let mut loss = 0.0;
    for (i, mut row) in p.rows_mut().into_iter().enumerate() {
        let s = row.as_slice_mut().unwrap();
        loss += numerics::log_sum_exp(s) - s[i];
        numerics::softmax_in_place(s);
    }
    // p now holds the softmax; turn it into dLoss/dLogits
    for i in 0..p.nrows() {
        p[[i, i]] -= 1.0;
    }
    p /= b;
    let dq = p.dot(&k) / tau;
    let dk = p.t().dot(&q) / tau;
    (loss / b, dq, dk)
}

/// Mean InfoNCE loss of queries `q` against keys `k`; row `i` of each is
/// the positive pair, the other rows of `k` the negatives.
pub fn info_nce(q: ArrayView2<f64>, k: ArrayView2<f64>, tau: f64) -> Result<f64> {
    check_pair(&q, &k)?;
    check_unit(&q, "query")?;
    check_unit(&k, "key")?;
    Ok(nce_with_grad(q, k, tau).0)
}

/// `(info_nce(a, b) + info_nce(b, a)) / 2`.
pub fn symmetric_nce(a: ArrayView2<f64>, b: ArrayView2<f64>, tau: f64) -> Result<f64> {
    Ok(0.5 * (info_nce(a, b, tau)? + info_nce(b, a, tau)?))
}

fn symmetric_nce_with_grad(a: ArrayView2<f64>, b: ArrayView2<f64>, tau: f64) -> (f64, Array2<f64>, Array2<f64>) {
    let (l_ab, da1, db1) = nce_with_grad(a, b, tau);
    let (l_ba, db2, da2) = nce_with_grad(b, a, tau);
    (0.5 * (l_ab + l_ba), (da1 + da2) * 0.5, (db1 + db2) * 0.5)
}

fn sq_dist_sum(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Attractive-only loss: half the mean squared distance of (ê_c, v̂_c) and
/// (ê_m, m̂_m) pairs.
pub fn intra_loss(
    e_c: ArrayView2<f64>,
    v_c: ArrayView2<f64>,
    e_m: ArrayView2<f64>,
    m_m: ArrayView2<f64>,
) -> Result<f64> {
    let q = QuadBatch {
        e_c: e_c.to_owned(),
        e_m: e_m.to_owned(),
        v_c: v_c.to_owned(),
        m_m: m_m.to_owned(),
    };
    let (b, _) = q.check_projected()?;
    Ok((sq_dist_sum(&q.e_c, &q.v_c) + sq_dist_sum(&q.e_m, &q.m_m)) / (2.0 * b as f64))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub text: f64,
    pub pseudo: f64,
    pub intra: f64,
}

/// `[text]·L_text + [pseudo]·L_pseudo + λ·[intra]·L_intra` over projected
/// quads, and the gradient with respect to each projected stream.
///
/// All three components are evaluated for logging even when switched off;
/// only enabled terms contribute to `total` and the gradients.
pub fn total_loss(quads: &QuadBatch, cfg: &LossConfig) -> Result<(LossBreakdown, QuadBatch)> {
    let (b, _) = quads.check_projected()?;
    if b < 2 && cfg.any_nce() {
        return Err(Error::invalid(
            "contrastive terms need a batch of at least 2 rows",
        ));
    }
    let mut grads = quads.zeros_like();
    let mut out = LossBreakdown::default();

    let (text, d_ec, d_em) = symmetric_nce_with_grad(quads.e_c.view(), quads.e_m.view(), cfg.tau_nce);
    out.text = text;
    if cfg.use_text {
        out.total += text;
        grads.e_c += &d_ec;
        grads.e_m += &d_em;
    }

    let (pseudo, d_vc, d_mm) = symmetric_nce_with_grad(quads.v_c.view(), quads.m_m.view(), cfg.tau_nce);
    out.pseudo = pseudo;
    if cfg.use_pseudo {
        out.total += pseudo;
        grads.v_c += &d_vc;
        grads.m_m += &d_mm;
    }

    let bf = b as f64;
    out.intra = (sq_dist_sum(&quads.e_c, &quads.v_c) + sq_dist_sum(&quads.e_m, &quads.m_m)) / (2.0 * bf);
    if cfg.use_intra {
        out.total += cfg.lambda_intra * out.intra;
        let scale = cfg.lambda_intra / bf;
        let diff_c = (&quads.e_c - &quads.v_c) * scale;
        let diff_m = (&quads.e_m - &quads.m_m) * scale;
        grads.e_c += &diff_c;
        grads.v_c -= &diff_c;
        grads.e_m += &diff_m;
        grads.m_m -= &diff_m;
    }
    Ok((out, grads))
}
