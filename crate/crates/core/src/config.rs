//! Run configuration: one flat JSON object, validated before any work.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::MaskMode;
use crate::error::{Error, Result};
use crate::graph_data::{DegreeSource, SplitRatios};
use crate::kernel_features::FeatureMapKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    /// Graph + encoding cache; defaults to `<dataset>.mgf`.
    pub cache: Option<PathBuf>,
    pub out_dir: PathBuf,

    /// Embedding size; token width is `2 d` with structural encodings.
    pub d: usize,
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Evaluations without validation improvement before stopping.
    pub patience: usize,
    pub eval_every: usize,

    pub split_seed: u64,
    pub init_seed: u64,
    pub simrf_seed: u64,
    pub svd_seed: u64,

    pub mask_mode: MaskMode,
    pub feature_map: FeatureMapKind,
    pub focus_power: f64,
    pub degree_source: DegreeSource,
    pub split_ratios: [f64; 3],
    pub k: usize,
    pub val_k: usize,
    pub popularity_quantiles: [f64; 2],

    pub degree_buckets: usize,
    pub degree_dim: usize,
    pub svd_oversample: usize,
    pub svd_power_iters: usize,

    pub structural_encodings: bool,
    pub normalize: bool,
    pub residual: bool,
    /// Recompute the global key summaries every this many steps.
    pub summary_refresh: usize,
    pub self_loops: bool,
    /// Adds wall-clock seconds to the training log (makes it non-reproducible).
    pub log_timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data/interactions.tsv"),
            cache: None,
            out_dir: PathBuf::from("runs/default"),
            d: 32,
            lambda: 1.0,
            lr: 1e-3,
            batch_size: 256,
            epochs: 100,
            patience: 10,
            eval_every: 1,
            split_seed: 42,
            init_seed: 42,
            simrf_seed: 42,
            svd_seed: 42,
            mask_mode: MaskMode::SineDegree,
            feature_map: FeatureMapKind::SimRf,
            focus_power: 3.0,
            degree_source: DegreeSource::Train,
            split_ratios: [0.8, 0.1, 0.1],
            k: 20,
            val_k: 20,
            popularity_quantiles: [1.0 / 3.0, 2.0 / 3.0],
            degree_buckets: 32,
            degree_dim: 8,
            svd_oversample: 8,
            svd_power_iters: 2,
            structural_encodings: true,
            normalize: true,
            residual: false,
            summary_refresh: 1,
            self_loops: true,
            log_timing: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = crate::io_util::read_file(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::invalid(format!("{}: not UTF-8", path.display())))?;
        Self::from_json(&text)
    }

    pub fn cache_path(&self) -> PathBuf {
        self.cache.clone().unwrap_or_else(|| {
            let mut s = self.dataset.clone().into_os_string();
            s.push(".mgf");
            PathBuf::from(s)
        })
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join("model.mgc")
    }

    pub fn log_path(&self) -> PathBuf {
        self.out_dir.join("train_log.jsonl")
    }

    pub fn ratios(&self) -> SplitRatios {
        let [train, valid, test] = self.split_ratios;
        SplitRatios::new(train, valid, test)
    }

    /// Width of a token: embedding plus (optionally) structural encoding.
    pub fn token_dim(&self) -> usize {
        if self.structural_encodings {
            2 * self.d
        } else {
            self.d
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidArgument(msg));
        if self.d == 0 {
            return fail("d must be positive".into());
        }
        if self.token_dim() < 2 {
            return fail("token width must be at least 2".into());
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return fail(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2".into());
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("eval_every", self.eval_every),
            ("k", self.k),
            ("val_k", self.val_k),
            ("degree_buckets", self.degree_buckets),
            ("degree_dim", self.degree_dim),
            ("summary_refresh", self.summary_refresh),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if !(self.focus_power.is_finite() && self.focus_power >= 1.0) {
            return fail(format!(
                "focus_power must be >= 1, got {}",
                self.focus_power
            ));
        }
        self.ratios().validate()?;
        let [q1, q2] = self.popularity_quantiles;
        if !(0.0 < q1 && q1 < q2 && q2 < 1.0) {
            return fail(format!(
                "popularity_quantiles must satisfy 0 < q1 < q2 < 1, got [{q1}, {q2}]"
            ));
        }
        Ok(())
    }
}
