use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{gen_disjoint_pair, gen_scale_clash, DisjointPairParams, MultiTaskDataset, ScaleClashParams};
use crate::error::{Error, Result};
use crate::models::{EncoderConfig, TaskSpec};
use crate::pipeline::{SweepMode, TrainConfig};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "KDMTL_OUTPUT_ROOT";

/// One experiment, as read from a TOML document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    /// Tasks to train; every task of the dataset when empty.
    #[serde(default)]
    pub tasks: Vec<TaskEntry>,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Dataset file; `<out>/data/dataset.kdds` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorConfig>,
}

fn default_val_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorConfig {
    ScaleClash {
        n: usize,
        d: usize,
        seed: u64,
        #[serde(default = "sc::classes")]
        classes: usize,
        #[serde(default = "sc::label_noise")]
        label_noise: f64,
        #[serde(default = "sc::scale")]
        scale: f64,
        #[serde(default = "sc::offset")]
        offset: f64,
        #[serde(default = "sc::target_noise")]
        target_noise: f64,
    },
    DisjointPair {
        n1: usize,
        n2: usize,
        d: usize,
        k1: usize,
        k2: usize,
        seed: u64,
        #[serde(default = "dp_spread")]
        spread: f64,
    },
}

mod sc {
    use crate::data::ScaleClashParams;

    fn base() -> ScaleClashParams {
        ScaleClashParams::new(0, 0, 0)
    }
    pub fn classes() -> usize {
        base().classes
    }
    pub fn label_noise() -> f64 {
        base().label_noise
    }
    pub fn scale() -> f64 {
        base().scale
    }
    pub fn offset() -> f64 {
        base().offset
    }
    pub fn target_noise() -> f64 {
        base().target_noise
    }
}

fn dp_spread() -> f64 {
    DisjointPairParams::new(0, 0, 0, 0, 0, 0).spread
}

impl GeneratorConfig {
    pub fn set_seed(&mut self, s: u64) {
        match self {
            GeneratorConfig::ScaleClash { seed, .. } | GeneratorConfig::DisjointPair { seed, .. } => *seed = s,
        }
    }

    pub fn generate(&self) -> Result<MultiTaskDataset> {
        match *self {
            GeneratorConfig::ScaleClash {
                n,
                d,
                seed,
                classes,
                label_noise,
                scale,
                offset,
                target_noise,
            } => gen_scale_clash(&ScaleClashParams {
                n,
                d,
                seed,
                classes,
                label_noise,
                scale,
                offset,
                target_noise,
            }),
            GeneratorConfig::DisjointPair {
                n1,
                n2,
                d,
                k1,
                k2,
                seed,
                spread,
            } => gen_disjoint_pair(&DisjointPairParams {
                n1,
                n2,
                d,
                k1,
                k2,
                seed,
                spread,
            }),
        }
    }
}

/// Encoder layout; the input shape comes from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub widths: Vec<usize>,
    /// Distillation taps; the middle and last stage when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taps: Option<Vec<usize>>,
}

/// A dataset task with its weights. Loss and head width come from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub id: String,
    #[serde(default = "one")]
    pub w: f64,
    #[serde(default)]
    pub lambda: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub grid: Vec<f64>,
    #[serde(default)]
    pub mode: SweepMode,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Directory holding `stl-<task>/checkpoint.ckpt`; the output root when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teachers: Option<PathBuf>,
}

/// Root for runs without an explicit output directory.
pub fn default_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !crate::models::valid_ident(&self.name) {
            return Err(Error::Config(format!("name `{}` must be alphanumeric, `_` or `-`", self.name)));
        }
        if !(self.dataset.val_fraction > 0.0 && self.dataset.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "dataset.val_fraction must lie in (0, 1), got {}",
                self.dataset.val_fraction
            )));
        }
        for t in &self.tasks {
            if !(t.w >= 0.0 && t.w.is_finite() && t.lambda >= 0.0 && t.lambda.is_finite()) {
                return Err(Error::Config(format!("task `{}` needs finite w >= 0 and lambda >= 0", t.id)));
            }
        }
        self.train.validate()
    }

    /// Applies the `--seed` and `--out` overrides and fills every path, so
    /// the result can be rerun as is.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<PathBuf>, generator_seed: bool) -> Self {
        if let Some(s) = seed {
            match (&mut self.dataset.generator, generator_seed) {
                (Some(g), true) => g.set_seed(s),
                _ => self.train.seed = s,
            }
        }
        let root = out
            .or_else(|| self.output.dir.clone())
            .unwrap_or_else(|| default_root().join(&self.name));
        if self.dataset.path.is_none() {
            self.dataset.path = Some(root.join("data").join("dataset.kdds"));
        }
        if self.output.teachers.is_none() {
            self.output.teachers = Some(root.clone());
        }
        self.output.dir = Some(root);
        self
    }

    pub fn out_dir(&self) -> PathBuf {
        self.output.dir.clone().unwrap_or_else(|| default_root().join(&self.name))
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset.path.clone().unwrap_or_else(|| self.out_dir().join("data").join("dataset.kdds"))
    }

    pub fn teachers_dir(&self) -> PathBuf {
        self.output.teachers.clone().unwrap_or_else(|| self.out_dir())
    }

    /// Specs of the configured tasks, with losses and widths from `ds`.
    pub fn task_specs(&self, ds: &MultiTaskDataset) -> Result<Vec<TaskSpec>> {
        if self.tasks.is_empty() {
            return Ok(ds.task_specs());
        }
        self.tasks
            .iter()
            .map(|t| {
                let info = ds.manifest().task(&t.id).map_err(|_| {
                    let known: Vec<&str> = ds.manifest().tasks.iter().map(|t| t.id.as_str()).collect();
                    Error::Config(format!("task `{}` is not in the dataset (known: {})", t.id, known.join(", ")))
                })?;
                Ok(info.to_spec().with_weights(t.w, t.lambda))
            })
            .collect()
    }

    /// Writes the explicit task list back so the snapshot lists every task.
    pub fn pin_tasks(&mut self, specs: &[TaskSpec]) {
        self.tasks = specs
            .iter()
            .map(|s| TaskEntry {
                id: s.id.clone(),
                w: s.w,
                lambda: s.lambda,
            })
            .collect();
    }

    pub fn encoder(&self, ds: &MultiTaskDataset) -> Result<EncoderConfig> {
        let [c, h, w] = ds.manifest().input_shape;
        let mut enc = EncoderConfig::new(c, self.model.widths.clone()).with_spatial(h, w);
        if let Some(taps) = &self.model.taps {
            enc = enc.with_taps(taps.clone());
        }
        enc.validate().map_err(|e| Error::Config(format!("model: {e}")))?;
        Ok(enc)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(SNAPSHOT), self.to_toml()?)?;
        Ok(())
    }
}

/// File name of the resolved-config snapshot in every output directory.
pub const SNAPSHOT: &str = "resolved_config.toml";
