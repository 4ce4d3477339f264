//! Pipeline configuration: one TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use cortexmorph::loss::LossConfig;
use cortexmorph::optim::IterativeConfig;
use cortexmorph::regressor::{TrainConfig, UnetSpec};
use cortexmorph::thickness::GwiThresholds;
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Default directory for outputs when a subcommand gets no `--out`.
    pub output_dir: PathBuf,
    /// Default cohort manifest for cohort-level commands.
    pub manifest: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("."),
            manifest: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IterativeSection {
    pub max_iters: usize,
    pub lr: f64,
    pub tolerance: f64,
    pub smoothing_sigma: f64,
    pub input_sigma: f64,
}

impl Default for IterativeSection {
    fn default() -> Self {
        let d = IterativeConfig::default();
        Self {
            max_iters: d.max_iters,
            lr: d.lr,
            tolerance: d.tolerance,
            smoothing_sigma: d.smoothing_sigma,
            input_sigma: d.input_sigma,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub model: UnetSpec,
    pub patch_size: [usize; 3],
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            model: d.model,
            patch_size: d.patch_size,
            batch_size: d.batch_size,
            lr: d.lr,
            weight_decay: d.weight_decay,
            epochs: d.epochs,
            checkpoint_every: d.checkpoint_every,
        }
    }
}

/// Everything a subcommand may need. The loss is shared by registration and
/// training; so is the seed.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker thread count; 0 leaves the choice to the runtime.
    pub threads: usize,
    pub paths: Paths,
    pub loss: LossConfig,
    pub thresholds: GwiThresholds,
    pub iterative: IterativeSection,
    pub train: TrainSection,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub lambda: Option<f64>,
    pub max_iters: Option<usize>,
    pub epochs: Option<usize>,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.message().trim().to_string()))
    }

    pub fn load(path: Option<&Path>, overrides: Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::from_io(p, e))?;
                Self::parse(&text).map_err(|e| match e {
                    CliError::Config(m) => CliError::Config(format!("{}: {m}", p.display())),
                    other => other,
                })?
            }
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.threads {
            self.threads = v;
        }
        if let Some(v) = o.lambda {
            self.loss.lambda = v;
        }
        if let Some(v) = o.max_iters {
            self.iterative.max_iters = v;
        }
        if let Some(v) = o.epochs {
            self.train.epochs = v;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |e: cortexmorph::Error| CliError::Config(e.to_string());
        self.thresholds.validate().map_err(invalid)?;
        self.iterative().validate().map_err(invalid)?;
        self.training().validate().map_err(invalid)?;
        Ok(())
    }

    pub fn iterative(&self) -> IterativeConfig {
        let s = self.iterative;
        IterativeConfig {
            max_iters: s.max_iters,
            lr: s.lr,
            loss: self.loss,
            tolerance: s.tolerance,
            smoothing_sigma: s.smoothing_sigma,
            input_sigma: s.input_sigma,
        }
    }

    pub fn training(&self) -> TrainConfig {
        let s = self.train;
        TrainConfig {
            model: s.model,
            patch_size: s.patch_size,
            batch_size: s.batch_size,
            lr: s.lr,
            weight_decay: s.weight_decay,
            loss: self.loss,
            epochs: s.epochs,
            checkpoint_every: s.checkpoint_every,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_library_defaults() {
        let cfg = PipelineConfig::parse("").unwrap();
        assert_eq!(cfg.iterative(), IterativeConfig::default());
        assert_eq!(cfg.training(), TrainConfig::default());
    }

    #[test]
    fn sections_fill_both_configs() {
        let cfg = PipelineConfig::parse(
            r#"
            seed = 9
            [loss]
            similarity = "l1"
            lambda = 0.01
            [iterative]
            max_iters = 40
            [train]
            epochs = 3
            patch_size = [16, 16, 16]
            [train.model]
            pooling_steps = 1
            "#,
        )
        .unwrap();
        assert_eq!(cfg.iterative().max_iters, 40);
        assert_eq!(cfg.iterative().loss.lambda, 0.01);
        let t = cfg.training();
        assert_eq!((t.seed, t.epochs, t.model.pooling_steps), (9, 3, 1));
        assert_eq!(t.loss, cfg.iterative().loss);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "sede = 1",
            "[iterative]\nloss = 1",
            "[train]\nseed = 2",
            "[loss]\nlamda = 0.1",
        ] {
            assert!(
                matches!(PipelineConfig::parse(text), Err(CliError::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn overrides_win_and_are_validated() {
        let mut cfg = PipelineConfig::parse("[iterative]\nmax_iters = 5").unwrap();
        cfg.apply(Overrides {
            max_iters: Some(7),
            lambda: Some(0.03),
            ..Default::default()
        });
        assert_eq!(cfg.iterative().max_iters, 7);
        assert_eq!(cfg.loss.lambda, 0.03);
        cfg.apply(Overrides {
            lambda: Some(-1.0),
            ..Default::default()
        });
        assert!(cfg.validate().is_err());
    }
}
