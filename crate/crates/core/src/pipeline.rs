//! Checkpoint directories and routing banks to the right head.

use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::bank::EmbeddingBank;
use crate::error::{Error, Result};
use crate::eval::project_bank;
use crate::projector::{load_head, save_head, ProjectionHead};

pub const CLIP_HEAD_FILE: &str = "f_c.upc";
pub const MULTI_HEAD_FILE: &str = "f_m.upc";
pub const LOG_FILE: &str = "train_log.jsonl";

/// The two heads of a trained model.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub f_c: ProjectionHead,
    pub f_m: ProjectionHead,
}

impl Checkpoint {
    pub fn paths(dir: &Path) -> [PathBuf; 2] {
        [dir.join(CLIP_HEAD_FILE), dir.join(MULTI_HEAD_FILE)]
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let [c, m] = Self::paths(dir);
        let ckpt = Self {
            f_c: load_head(&c)?,
            f_m: load_head(&m)?,
        };
        if ckpt.f_c.shape.out_dim != ckpt.f_m.shape.out_dim {
            return Err(Error::format(
                dir,
                format!(
                    "heads disagree on output width ({} vs {})",
                    ckpt.f_c.shape.out_dim, ckpt.f_m.shape.out_dim
                ),
            ));
        }
        Ok(ckpt)
    }

    pub fn save(&self, dir: &Path) -> Result<[PathBuf; 2]> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let [c, m] = Self::paths(dir);
        save_head(&self.f_c, &c)?;
        save_head(&self.f_m, &m)?;
        Ok([c, m])
    }

    pub fn trainable_params(&self) -> usize {
        self.f_c.param_count() + self.f_m.param_count()
    }

    /// Picks the head for a bank from its `space` meta entry, falling back
    /// to the unique head whose input width matches.
    pub fn head_for(&self, bank: &EmbeddingBank) -> Result<&ProjectionHead> {
        let head = match bank.space() {
            "clip" => &self.f_c,
            "multilingual" => &self.f_m,
            other => {
                let c = self.f_c.shape.in_dim == bank.dim();
                let m = self.f_m.shape.in_dim == bank.dim();
                match (c, m) {
                    (true, false) => &self.f_c,
                    (false, true) => &self.f_m,
                    _ => {
                        return Err(Error::invalid(format!(
                            "cannot route a bank with space {other:?} and width {} to a head",
                            bank.dim()
                        )))
                    }
                }
            }
        };
        if head.shape.in_dim != bank.dim() {
            return Err(Error::dim(
                format!("{} head input width", bank.space()),
                head.shape.in_dim,
                bank.dim(),
            ));
        }
        Ok(head)
    }

    /// Projects a bank into the shared space with its head.
    pub fn project(&self, bank: &EmbeddingBank) -> Result<Array2<f64>> {
        project_bank(self.head_for(bank)?, bank)
    }
}
