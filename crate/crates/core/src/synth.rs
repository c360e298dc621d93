//! Synthetic paired embedding spaces with known correspondence.
//!
//! Each concept is a unit latent `z`. The CLIP-like space observes
//! `Norm(A z + noise)` and the multilingual space `Norm(B z + noise)`, with
//! `A`, `B` fixed random full-rank maps.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::bank::{write_labeled_bank, EmbeddingBank, LabeledBank};
use crate::error::{Error, Result};
use crate::numerics::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub latent_dim: usize,
    pub clip_dim: usize,
    pub multi_dim: usize,
    pub n_concepts: usize,
    pub samples_per_concept: usize,
    /// Per-coordinate observation noise std, before normalization.
    pub map_noise: f64,
    pub heldout_pairs: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            clip_dim: 64,
            multi_dim: 96,
            n_concepts: 100,
            samples_per_concept: 60,
            map_noise: 0.05,
            heldout_pairs: 500,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 2 {
            return Err(Error::invalid("latent_dim must be >= 2"));
        }
        if self.latent_dim > self.clip_dim.min(self.multi_dim) {
            return Err(Error::invalid(format!(
                "latent_dim {} exceeds min(clip_dim, multi_dim) = {}",
                self.latent_dim,
                self.clip_dim.min(self.multi_dim)
            )));
        }
        if self.n_concepts < 2 {
            return Err(Error::invalid("n_concepts must be >= 2"));
        }
        if self.samples_per_concept < 1 {
            return Err(Error::invalid("samples_per_concept must be >= 1"));
        }
        if self.heldout_pairs < 1 {
            return Err(Error::invalid("heldout_pairs must be >= 1"));
        }
        if !(self.map_noise >= 0.0 && self.map_noise.is_finite()) {
            return Err(Error::invalid("map_noise must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn rows_per_space(&self) -> usize {
        self.n_concepts * self.samples_per_concept
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub config: SynthConfig,
    /// `n_concepts x latent_dim`, unit rows.
    pub latents: Array2<f64>,
    /// `clip_dim x latent_dim`
    pub map_clip: Array2<f64>,
    /// `multi_dim x latent_dim`
    pub map_multi: Array2<f64>,
    /// English queries in the CLIP space; labels are concept ids.
    pub queries_c: LabeledBank,
    /// The same queries in the multilingual space.
    pub queries_m: LabeledBank,
    pub image_bank: LabeledBank,
    pub multi_bank: LabeledBank,
    /// Held-out images labeled by pair id.
    pub heldout_images: LabeledBank,
    /// Held-out captions labeled by pair id; caption `p` describes image `p`.
    pub heldout_captions: LabeledBank,
    /// Concept id of each held-out pair.
    pub heldout_concepts: Vec<usize>,
    /// One noiseless multilingual prototype per concept, row = concept id.
    pub class_bank: LabeledBank,
}

/// Returns a `rows x cols` Gaussian matrix scaled so `|M z| ~ 1` for unit
/// `z`, redrawn until its columns are linearly independent.
fn full_rank_map(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    let sigma = 1.0 / (rows as f64).sqrt();
    loop {
        let m = Array2::from_shape_vec((rows, cols), numerics::gaussian(rng, rows * cols, sigma))
            .expect("shape matches");
        if min_residual(&m) > 1e-6 {
            return m;
        }
    }
}

/// Smallest Gram–Schmidt residual norm over the columns.
fn min_residual(m: &Array2<f64>) -> f64 {
    let mut basis: Vec<Array1<f64>> = Vec::new();
    let mut worst = f64::INFINITY;
    for col in m.columns() {
        let mut r = col.to_owned();
        for q in &basis {
            let c = r.dot(q);
            r.scaled_add(-c, q);
        }
        let n = r.dot(&r).sqrt();
        worst = worst.min(n);
        if n > 0.0 {
            basis.push(r / n);
        }
    }
    worst
}

fn observe(map: &Array2<f64>, z: &Array1<f64>, noise: f64, rng: &mut Rng) -> Vec<f32> {
    let mut v = map.dot(z).to_vec();
    let eps = numerics::gaussian(rng, v.len(), noise);
    v.iter_mut().zip(eps).for_each(|(x, e)| *x += e);
    let n = numerics::norm(&v);
    v.iter().map(|x| (x / n) as f32).collect()
}

fn labeled(rows: Vec<Vec<f32>>, labels: Vec<usize>, space: &str, modality: &str, name: &str) -> Result<LabeledBank> {
    let bank = EmbeddingBank::from_rows(&rows, space)?
        .with_meta("modality", modality)
        .with_meta("source", "synthetic")
        .with_meta("name", name);
    LabeledBank::new(bank, labels)
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let mut rng = root.child(0);

    let mut latents = Array2::zeros((cfg.n_concepts, cfg.latent_dim));
    for mut row in latents.rows_mut() {
        let mut z = numerics::gaussian(&mut rng, cfg.latent_dim, 1.0);
        numerics::normalize(&mut z)?;
        row.assign(&Array1::from(z));
    }
    let map_clip = full_rank_map(cfg.clip_dim, cfg.latent_dim, &mut rng);
    let map_multi = full_rank_map(cfg.multi_dim, cfg.latent_dim, &mut rng);
    let z = |c: usize| latents.row(c).to_owned();

    let n = cfg.rows_per_space();
    let concept_of = |i: usize| i / cfg.samples_per_concept;
    let noise = cfg.map_noise;

    // Queries: one latent seen through both maps with independent noise.
    let mut qrng = root.child(1);
    let (mut qc, mut qm) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let zc = z(concept_of(i));
        qc.push(observe(&map_clip, &zc, noise, &mut qrng));
        qm.push(observe(&map_multi, &zc, noise, &mut qrng));
    }
    let labels: Vec<usize> = (0..n).map(concept_of).collect();

    let mut irng = root.child(2);
    let images: Vec<_> = (0..n).map(|i| observe(&map_clip, &z(concept_of(i)), noise, &mut irng)).collect();
    let mut mrng = root.child(3);
    let multis: Vec<_> = (0..n).map(|i| observe(&map_multi, &z(concept_of(i)), noise, &mut mrng)).collect();

    let mut hrng = root.child(4);
    let heldout_concepts: Vec<usize> = (0..cfg.heldout_pairs).map(|p| p % cfg.n_concepts).collect();
    let (mut hi, mut hc) = (Vec::new(), Vec::new());
    for &c in &heldout_concepts {
        hi.push(observe(&map_clip, &z(c), noise, &mut hrng));
        hc.push(observe(&map_multi, &z(c), noise, &mut hrng));
    }
    let pair_ids: Vec<usize> = (0..cfg.heldout_pairs).collect();

    let mut silent = Rng::new(0);
    let classes: Vec<_> = (0..cfg.n_concepts)
        .map(|c| observe(&map_multi, &z(c), 0.0, &mut silent))
        .collect();

    Ok(SynthData {
        queries_c: labeled(qc, labels.clone(), "clip", "text", "queries_clip")?,
        queries_m: labeled(qm, labels.clone(), "multilingual", "text", "queries_multi")?,
        image_bank: labeled(images, labels.clone(), "clip", "image", "image_bank")?,
        multi_bank: labeled(multis, labels, "multilingual", "text", "multi_bank")?,
        heldout_images: labeled(hi, pair_ids.clone(), "clip", "image", "heldout_images")?,
        heldout_captions: labeled(hc, pair_ids, "multilingual", "text", "heldout_captions")?,
        heldout_concepts,
        class_bank: labeled(classes, (0..cfg.n_concepts).collect(), "multilingual", "text", "class_bank")?,
        config: cfg.clone(),
        latents,
        map_clip,
        map_multi,
    })
}

/// File names inside a generated dataset directory.
pub mod files {
    pub const QUERIES_CLIP: &str = "queries_clip.ueb";
    pub const QUERIES_MULTI: &str = "queries_multi.ueb";
    pub const IMAGE_BANK: &str = "image_bank.ueb";
    pub const MULTI_BANK: &str = "multi_bank.ueb";
    pub const HELDOUT_IMAGES: &str = "heldout_images.ueb";
    pub const HELDOUT_CAPTIONS: &str = "heldout_captions.ueb";
    pub const HELDOUT_CONCEPTS: &str = "heldout_concepts.labels";
    pub const CLASS_BANK: &str = "class_bank.ueb";
}

impl SynthData {
    /// Writes every bank (with meta and labels sidecars) into `dir` and
    /// returns the paths written, bank files first, then sidecars.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        let banks = [
            (files::QUERIES_CLIP, &self.queries_c),
            (files::QUERIES_MULTI, &self.queries_m),
            (files::IMAGE_BANK, &self.image_bank),
            (files::MULTI_BANK, &self.multi_bank),
            (files::HELDOUT_IMAGES, &self.heldout_images),
            (files::HELDOUT_CAPTIONS, &self.heldout_captions),
            (files::CLASS_BANK, &self.class_bank),
        ];
        for (name, lb) in banks {
            let p = dir.join(name);
            write_labeled_bank(lb, &p)?;
            written.push(p.clone());
            written.push(crate::bank::meta_path(&p));
            written.push(crate::bank::labels_path(&p));
        }
        let p = dir.join(files::HELDOUT_CONCEPTS);
        crate::bank::write_labels(&self.heldout_concepts, &p)?;
        written.push(p);
        Ok(written)
    }
}
