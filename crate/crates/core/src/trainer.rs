//! Training loop: shuffled mini-batches, soft retrieval, perturbation, both
//! heads forward and backward, AdamW with per-step linear decay.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::alignment::{self, LossBreakdown, LossConfig, MemoryBank, QuadBatch};
use crate::bank::EmbeddingBank;
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::projector::{save_head, HeadGradients, HeadShape, Mode, ProjectionHead};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub epochs: usize,
    /// Clamped to the number of queries when larger.
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Zeroes wall-clock fields in the log so equal seeds give equal bytes.
    pub deterministic: bool,
    /// Shared output width; defaults to the CLIP-space input width.
    pub out_dim: Option<usize>,
    /// Where to write both heads if training aborts on a non-finite loss.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dump_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            epochs: 5,
            batch_size: 2048,
            lr: 1e-3,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            deterministic: false,
            out_dim: None,
            dump_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be >= 2"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        self.loss.validate()
    }
}

/// AdamW moments for one head, one entry per trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn for_head(head: &mut ProjectionHead) -> Self {
        let sizes: Vec<usize> = head.params_mut().iter().map(|s| s.len()).collect();
        Self::new(&sizes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamW {
    fn from(c: &TrainConfig) -> Self {
        Self {
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// Linear decay from `base_lr` at step 0 towards zero at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("total_steps must be positive"));
    }
    if step >= total_steps {
        return Err(Error::invalid(format!("step {step} out of range 0..{total_steps}")));
    }
    Ok(base_lr * (1.0 - step as f64 / total_steps as f64))
}

/// One decoupled-weight-decay Adam update over a set of tensors.
pub fn adamw_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut OptimizerState,
    lr: f64,
    hp: &AdamW,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim("optimizer tensor count", state.m.len(), params.len()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::dim(format!("optimizer tensor {i}"), state.m[i].len(), g.len()));
        }
    }
    if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!("gradient at optimizer step {}", state.t + 1)));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((theta, &g), m), v) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
            *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *theta -= lr * (m_hat / (v_hat.sqrt() + hp.eps) + hp.weight_decay * *theta);
        }
    }
    Ok(())
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub l_text: f64,
    pub l_pseudo: f64,
    pub l_intra: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub f_c: ProjectionHead,
    pub f_m: ProjectionHead,
    pub log: Vec<StepRecord>,
}

impl TrainOutcome {
    pub fn trainable_params(&self) -> usize {
        self.f_c.param_count() + self.f_m.param_count()
    }

    /// Mean loss of each epoch, in order.
    pub fn epoch_means(&self) -> Vec<f64> {
        let epochs = self.log.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
        (0..epochs)
            .map(|e| {
                let xs: Vec<f64> = self.log.iter().filter(|r| r.epoch == e).map(|r| r.loss).collect();
                xs.iter().sum::<f64>() / xs.len() as f64
            })
            .collect()
    }
}

pub fn write_log(log: &[StepRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for rec in log {
        serde_json::to_writer(&mut buf, rec).expect("record serializes");
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Head shapes implied by the input widths: hidden twice the input, output
/// `out_dim` (CLIP width by default).
pub fn head_shapes(clip_dim: usize, multi_dim: usize, out_dim: Option<usize>) -> (HeadShape, HeadShape) {
    let out = out_dim.unwrap_or(clip_dim);
    (HeadShape::widened(clip_dim, out), HeadShape::widened(multi_dim, out))
}

/// Freshly initialized heads for a config: f_C from child stream 0, f_M
/// from child stream 1 of the seed.
pub fn init_heads(cfg: &TrainConfig, clip_dim: usize, multi_dim: usize) -> Result<(ProjectionHead, ProjectionHead)> {
    let root = Rng::new(cfg.seed);
    let (sc, sm) = head_shapes(clip_dim, multi_dim, cfg.out_dim);
    let f_c = ProjectionHead::init(sc, &mut root.child(0))?.with_role("clip");
    let f_m = ProjectionHead::init(sm, &mut root.child(1))?.with_role("multilingual");
    Ok((f_c, f_m))
}

/// Number of optimizer steps per epoch: full batches plus a trailing
/// partial batch when it has at least two rows.
pub fn steps_per_epoch(rows: usize, batch: usize) -> usize {
    let b = batch.min(rows);
    rows / b + usize::from(rows % b >= 2)
}

struct Prepared {
    e_c: Array2<f64>,
    e_m: Array2<f64>,
    v_c: Array2<f64>,
    m_m: Array2<f64>,
}

fn prepare(
    queries_c: &EmbeddingBank,
    queries_m: &EmbeddingBank,
    image_bank: &EmbeddingBank,
    multi_bank: &EmbeddingBank,
    cfg: &TrainConfig,
) -> Result<Prepared> {
    if queries_c.rows() != queries_m.rows() {
        return Err(Error::dim("query rows (multilingual vs CLIP)", queries_c.rows(), queries_m.rows()));
    }
    if queries_c.rows() < 2 {
        return Err(Error::invalid("training needs at least two queries"));
    }
    if image_bank.dim() != queries_c.dim() {
        return Err(Error::dim("image bank width", queries_c.dim(), image_bank.dim()));
    }
    if multi_bank.dim() != queries_m.dim() {
        return Err(Error::dim("multilingual bank width", queries_m.dim(), multi_bank.dim()));
    }
    let e_c = alignment::normalize_rows(queries_c.to_array().view())?;
    let e_m = alignment::normalize_rows(queries_m.to_array().view())?;
    let tau = cfg.loss.tau_retrieval;
    // The banks are fixed, so each query's retrieval is the same in every
    // epoch; compute it once against the full banks.
    let v_c = alignment::soft_retrieve_batch(e_c.view(), &MemoryBank::new(image_bank)?, tau)?;
    let m_m = alignment::soft_retrieve_batch(e_m.view(), &MemoryBank::new(multi_bank)?, tau)?;
    Ok(Prepared { e_c, e_m, v_c, m_m })
}

/// Trains freshly initialized heads. See [`train_heads`].
pub fn train(
    queries_c: &EmbeddingBank,
    queries_m: &EmbeddingBank,
    image_bank: &EmbeddingBank,
    multi_bank: &EmbeddingBank,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (f_c, f_m) = init_heads(cfg, queries_c.dim(), queries_m.dim())?;
    train_heads(f_c, f_m, queries_c, queries_m, image_bank, multi_bank, cfg)
}

/// Runs `epochs * steps_per_epoch` optimizer steps on the given heads.
///
/// Row `i` of `queries_c` and `queries_m` must be the same English sentence
/// in the two encoder spaces; nothing else is paired. The returned heads are
/// in inference mode.
pub fn train_heads(
    mut f_c: ProjectionHead,
    mut f_m: ProjectionHead,
    queries_c: &EmbeddingBank,
    queries_m: &EmbeddingBank,
    image_bank: &EmbeddingBank,
    multi_bank: &EmbeddingBank,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if f_c.shape.in_dim != queries_c.dim() {
        return Err(Error::dim("f_C input width", f_c.shape.in_dim, queries_c.dim()));
    }
    if f_m.shape.in_dim != queries_m.dim() {
        return Err(Error::dim("f_M input width", f_m.shape.in_dim, queries_m.dim()));
    }
    if f_c.shape.out_dim != f_m.shape.out_dim {
        return Err(Error::dim("shared output width", f_c.shape.out_dim, f_m.shape.out_dim));
    }
    let data = prepare(queries_c, queries_m, image_bank, multi_bank, cfg)?;
    f_c.set_mode(Mode::Training);
    f_m.set_mode(Mode::Training);

    let rows = data.e_c.nrows();
    let batch = cfg.batch_size.min(rows);
    let per_epoch = steps_per_epoch(rows, batch);
    let total_steps = cfg.epochs * per_epoch;
    let hp = AdamW::from(cfg);
    let mut opt_c = OptimizerState::for_head(&mut f_c);
    let mut opt_m = OptimizerState::for_head(&mut f_m);

    let root = Rng::new(cfg.seed);
    let mut order_rng = root.child(2);
    let mut noise_rng = root.child(3);
    let mut order: Vec<usize> = (0..rows).collect();
    let mut log = Vec::with_capacity(total_steps);
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order_rng.shuffle(&mut order);
        for idx in order.chunks(batch).take(per_epoch) {
            let started = Instant::now();
            let raw = QuadBatch {
                e_c: data.e_c.select(Axis(0), idx),
                e_m: data.e_m.select(Axis(0), idx),
                v_c: data.v_c.select(Axis(0), idx),
                m_m: data.m_m.select(Axis(0), idx),
            };
            let noisy = perturb_quads(&raw, &cfg.loss, &mut noise_rng)?;

            let (ec_hat, ec_cache) = f_c.forward(noisy.e_c.view())?;
            let (vc_hat, vc_cache) = f_c.forward(noisy.v_c.view())?;
            let (em_hat, em_cache) = f_m.forward(noisy.e_m.view())?;
            let (mm_hat, mm_cache) = f_m.forward(noisy.m_m.view())?;
            let projected = QuadBatch {
                e_c: ec_hat,
                e_m: em_hat,
                v_c: vc_hat,
                m_m: mm_hat,
            };
            let (losses, grads): (LossBreakdown, QuadBatch) = alignment::total_loss(&projected, &cfg.loss)?;
            if !losses.total.is_finite() {
                dump_on_abort(cfg, &f_c, &f_m);
                return Err(Error::NonFinite(format!("loss at step {step}")));
            }

            let mut g_c = HeadGradients::zeros(f_c.shape);
            g_c.accumulate(&f_c.backward(&ec_cache, grads.e_c.view())?.0);
            g_c.accumulate(&f_c.backward(&vc_cache, grads.v_c.view())?.0);
            let mut g_m = HeadGradients::zeros(f_m.shape);
            g_m.accumulate(&f_m.backward(&em_cache, grads.e_m.view())?.0);
            g_m.accumulate(&f_m.backward(&mm_cache, grads.m_m.view())?.0);

            let lr = lr_at(step, total_steps, cfg.lr)?;
            let updated = adamw_step(&mut f_c.params_mut(), &g_c.slices(), &mut opt_c, lr, &hp)
                .and_then(|_| adamw_step(&mut f_m.params_mut(), &g_m.slices(), &mut opt_m, lr, &hp));
            if let Err(e) = updated {
                dump_on_abort(cfg, &f_c, &f_m);
                return Err(e);
            }
            f_c.round_to_f32();
            f_m.round_to_f32();

            log.push(StepRecord {
                step,
                epoch,
                lr,
                loss: losses.total,
                l_text: losses.text,
                l_pseudo: losses.pseudo,
                l_intra: losses.intra,
                wall_ms: if cfg.deterministic {
                    0.0
                } else {
                    started.elapsed().as_secs_f64() * 1e3
                },
            });
            step += 1;
        }
    }

    f_c.set_mode(Mode::Inference);
    f_m.set_mode(Mode::Inference);
    Ok(TrainOutcome { f_c, f_m, log })
}

/// Applies the per-embedding noise (or plain normalization when
/// perturbation is off). Noise is drawn stream by stream in a fixed order.
fn perturb_quads(raw: &QuadBatch, cfg: &LossConfig, rng: &mut Rng) -> Result<QuadBatch> {
    let f = |m: &Array2<f64>, rng: &mut Rng| {
        if cfg.use_perturbation {
            alignment::perturb_rows(m.view(), cfg.sigma, rng)
        } else {
            alignment::normalize_rows(m.view())
        }
    };
    Ok(QuadBatch {
        e_c: f(&raw.e_c, rng)?,
        e_m: f(&raw.e_m, rng)?,
        v_c: f(&raw.v_c, rng)?,
        m_m: f(&raw.m_m, rng)?,
    })
}

fn dump_on_abort(cfg: &TrainConfig, f_c: &ProjectionHead, f_m: &ProjectionHead) {
    if let Some(dir) = &cfg.dump_dir {
        if std::fs::create_dir_all(dir).is_ok() {
            let _ = save_head(f_c, &dir.join("f_c.abort.upc"));
            let _ = save_head(f_m, &dir.join("f_m.abort.upc"));
        }
    }
}
