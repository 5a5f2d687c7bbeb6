//! Two-phase training: single-task teachers first, then the multi-task
//! student under distillation or one of the balancing baselines. Also
//! learning-rate schedules, evaluation, metrics records and the lambda sweep.

mod record;
mod sweep;
mod train;

pub use record::{read_metrics, write_metrics, RecordRow, RunRecord, RunSummary, TaskSummary};
pub use sweep::{lambda_sweep, SweepMode, SweepOutcome, SweepTrial, SWEEP_VAL_FRACTION};
pub use train::{train_multitask, train_single_task, StepEvent};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::MultiTaskDataset;
use crate::error::{Error, Result};
use crate::models::{AdamConfig, AdaptorKind, LossKind, ModelBundle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Stl,
    Uniform,
    Dwa,
    Uncert,
    Gradnorm,
    Mgda,
    Kd,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Stl => "stl",
            Method::Uniform => "uniform",
            Method::Dwa => "dwa",
            Method::Uncert => "uncert",
            Method::Gradnorm => "gradnorm",
            Method::Mgda => "mgda",
            Method::Kd => "kd",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Method::Stl,
            Method::Uniform,
            Method::Dwa,
            Method::Uncert,
            Method::Gradnorm,
            Method::Mgda,
            Method::Kd,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
        .ok_or_else(|| Error::Format(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Multiply by `gamma` every `every` epochs.
    StepDecay { gamma: f64, every: usize },
    /// Halve from `epoch` on.
    HalveAt { epoch: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalancerConfig {
    pub dwa_temperature: f64,
    pub gradnorm_alpha: f64,
    pub gradnorm_lr: f64,
    /// Learning rate of the uncertainty log-variances; the model rate when unset.
    pub uncert_lr: Option<f64>,
    pub mgda_max_iter: usize,
    pub mgda_tol: f64,
}

impl Default for BalancerConfig {
    fn default() -> Self {
        Self {
            dwa_temperature: 2.0,
            gradnorm_alpha: 1.5,
            gradnorm_lr: 0.025,
            uncert_lr: None,
            mgda_max_iter: 250,
            mgda_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "default_adaptor_lr")]
    pub adaptor_lr: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub seed: u64,
    pub method: Method,
    /// Adaptor used by the `kd` student; other methods train without adaptors.
    #[serde(default = "default_adaptor")]
    pub adaptor: AdaptorKind,
    #[serde(default)]
    pub balancer: BalancerConfig,
}

fn default_adaptor_lr() -> f64 {
    0.01
}

fn default_adaptor() -> AdaptorKind {
    AdaptorKind::Linear
}

impl TrainConfig {
    pub fn new(method: Method, epochs: usize, lr: f64, batch_size: usize, seed: u64) -> Self {
        Self {
            epochs,
            lr,
            adaptor_lr: default_adaptor_lr(),
            schedule: LrSchedule::Constant,
            batch_size,
            adam: AdamConfig::default(),
            seed,
            method,
            adaptor: default_adaptor(),
            balancer: BalancerConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("train.epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        for (name, v) in [("lr", self.lr), ("adaptor_lr", self.adaptor_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("train.{name} must be positive, got {v}"));
            }
        }
        match self.schedule {
            LrSchedule::StepDecay { gamma, every } if !(gamma > 0.0 && gamma <= 1.0) || every == 0 => {
                bad(format!("step_decay needs 0 < gamma <= 1 and every >= 1 (got {gamma}, {every})"))
            }
            _ => Ok(()),
        }
    }
}

/// `(model_lr, adaptor_lr)` for `epoch`.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> (f64, f64) {
    let factor = match cfg.schedule {
        LrSchedule::Constant => 1.0,
        LrSchedule::StepDecay { gamma, every } => gamma.powi((epoch / every) as i32),
        LrSchedule::HalveAt { epoch: at } => {
            if epoch >= at {
                0.5
            } else {
                1.0
            }
        }
    };
    (cfg.lr * factor, cfg.adaptor_lr * factor)
}

/// Accuracy for classification; higher is better for it only.
pub fn higher_is_better(loss: LossKind) -> bool {
    loss == LossKind::CrossEntropy
}

/// Metric relative to the single-task reference, oriented so that larger is
/// better and 1 means parity: `acc / acc_stl` or `err_stl / err`.
pub fn normalized_metric(loss: LossKind, metric: f64, stl: f64) -> f64 {
    if higher_is_better(loss) {
        metric / stl
    } else {
        stl / metric
    }
}

/// Per-task validation metrics: accuracy (cross-entropy tasks), mean
/// absolute error (L1) or mean `1 - cos` per sample (cosine). Tasks without
/// labeled samples in `ds` are left out.
pub fn evaluate(bundle: &ModelBundle, ds: &MultiTaskDataset) -> Result<BTreeMap<String, f64>> {
    const CHUNK: usize = 1024;
    let mut out = BTreeMap::new();
    for spec in bundle.tasks() {
        let all = ds.indices_for(&spec.id);
        if all.is_empty() {
            continue;
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for idx in all.chunks(CHUNK) {
            let x = ds.inputs(idx)?;
            let feat = bundle.encode_last(&x)?;
            let pred = bundle.predictor_forward(&spec.id, &feat)?;
            let shape = pred.shape().to_vec();
            let (n, k) = (shape[0], shape[1]);
            let spatial = shape[2] * shape[3];
            let p = pred.values();
            match spec.loss {
                LossKind::CrossEntropy => {
                    let labels = ds.class_targets(&spec.id, idx)?;
                    for s in 0..n {
                        for pos in 0..spatial {
                            let at = |c: usize| p[(s * k + c) * spatial + pos];
                            let mut best = 0;
                            for c in 1..k {
                                if at(c) > at(best) {
                                    best = c;
                                }
                            }
                            total += f64::from(u8::from(best == labels[s * spatial + pos]));
                            count += 1;
                        }
                    }
                }
                LossKind::L1 => {
                    let t = ds.dense_targets(&spec.id, idx)?;
                    total += p.iter().zip(t.values()).map(|(a, b)| (a - b).abs()).sum::<f64>();
                    count += p.len();
                }
                LossKind::Cosine => {
                    let t = ds.dense_targets(&spec.id, idx)?;
                    let per = k * spatial;
                    for s in 0..n {
                        let a = &p[s * per..(s + 1) * per];
                        let b = &t.values()[s * per..(s + 1) * per];
                        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                        total += 1.0 - dot / (na * nb).max(crate::tensor::EPS_NORM);
                        count += 1;
                    }
                }
            }
        }
        out.insert(spec.id.clone(), total / count as f64);
    }
    Ok(out)
}
