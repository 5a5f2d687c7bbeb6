//! Synthetic multi-task datasets, their file container, splitting and
//! batch planning. Every random choice flows through [`Prng`].

mod batching;
mod format;
mod generators;
mod prng;

pub use batching::{make_batches, Batch, BatchPlan};
pub use format::{decode_dataset, encode_dataset, load_dataset, save_dataset};
pub use generators::{gen_disjoint_pair, gen_scale_clash, regenerate, DisjointPairParams, ScaleClashParams};
pub use prng::{fnv1a64, splitmix64, Prng};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{LossKind, TaskSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Every sample is labeled for every task.
    MultiLabel,
    /// Every sample is labeled for exactly one task.
    DisjointLabel,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::MultiLabel => "multi_label",
            Regime::DisjointLabel => "disjoint_label",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi_label" => Ok(Regime::MultiLabel),
            "disjoint_label" => Ok(Regime::DisjointLabel),
            other => Err(Error::Format(format!("unknown regime `{other}`"))),
        }
    }
}

/// Task as described by a dataset: id, loss and head width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub id: String,
    pub loss: LossKind,
    pub output_dim: usize,
}

impl TaskInfo {
    /// Stored values per labeled sample: one class index per spatial
    /// position, or `output_dim` values per position for dense targets.
    pub fn target_len(&self, spatial: usize) -> usize {
        match self.loss {
            LossKind::CrossEntropy => spatial,
            LossKind::L1 | LossKind::Cosine => self.output_dim * spatial,
        }
    }

    /// Task spec with `w = 1` and distillation disabled.
    pub fn to_spec(&self) -> TaskSpec {
        TaskSpec::new(&self.id, self.loss, self.output_dim)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub generator: String,
    pub seed: u64,
    /// Generator parameters, rendered as text.
    pub params: BTreeMap<String, String>,
    pub input_shape: [usize; 3],
    pub regime: Regime,
    pub tasks: Vec<TaskInfo>,
}

impl Manifest {
    pub fn spatial(&self) -> usize {
        self.input_shape[1] * self.input_shape[2]
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn task(&self, id: &str) -> Result<&TaskInfo> {
        self.tasks
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| Error::UnknownTask(id.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    /// Task id to target values (see [`TaskInfo::target_len`]).
    pub labels: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskDataset {
    manifest: Manifest,
    samples: Vec<Sample>,
}

impl MultiTaskDataset {
    pub fn new(manifest: Manifest, samples: Vec<Sample>) -> Result<Self> {
        let ds = Self { manifest, samples };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        let spatial = m.spatial();
        for (i, s) in self.samples.iter().enumerate() {
            if s.x.len() != m.input_len() {
                return Err(Error::Format(format!("sample {i}: input of length {}", s.x.len())));
            }
            if s.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("sample {i} input")));
            }
            for (id, y) in &s.labels {
                let task = m.task(id)?;
                if y.len() != task.target_len(spatial) {
                    return Err(Error::Format(format!("sample {i}: target for `{id}` has wrong length")));
                }
                if task.loss == LossKind::CrossEntropy
                    && y.iter().any(|&c| c < 0.0 || c.fract() != 0.0 || c >= task.output_dim as f64)
                {
                    return Err(Error::Format(format!("sample {i}: invalid class for `{id}`")));
                }
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("sample {i} target")));
                }
            }
            let ok = match m.regime {
                Regime::MultiLabel => s.labels.len() == m.tasks.len(),
                Regime::DisjointLabel => s.labels.len() == 1,
            };
            if !ok {
                return Err(Error::Format(format!(
                    "sample {i} carries {} labels, not allowed in {} regime",
                    s.labels.len(),
                    m.regime
                )));
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn regime(&self) -> Regime {
        self.manifest.regime
    }

    pub fn task_specs(&self) -> Vec<TaskSpec> {
        self.manifest.tasks.iter().map(TaskInfo::to_spec).collect()
    }

    /// Indices of samples labeled for `task`, in dataset order.
    pub fn indices_for(&self, task: &str) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.labels.contains_key(task))
            .map(|(i, _)| i)
            .collect()
    }

    /// A new dataset holding the given samples (same manifest).
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            manifest: self.manifest.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// The samples labeled for `task`, as a one-task multi-label dataset.
    pub fn single_task(&self, task: &str) -> Result<Self> {
        let info = self.manifest.task(task)?.clone();
        let samples = self
            .samples
            .iter()
            .filter_map(|s| {
                s.labels.get(task).map(|y| Sample {
                    x: s.x.clone(),
                    labels: BTreeMap::from([(task.to_string(), y.clone())]),
                })
            })
            .collect();
        Self::new(
            Manifest {
                tasks: vec![info],
                regime: Regime::MultiLabel,
                ..self.manifest.clone()
            },
            samples,
        )
    }

    /// Inputs as an `[N, C, H, W]` tensor.
    pub fn inputs(&self, indices: &[usize]) -> Result<Tensor> {
        let [c, h, w] = self.manifest.input_shape;
        let mut values = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            values.extend_from_slice(&self.samples[i].x);
        }
        Tensor::new(vec![indices.len(), c, h, w], values, false)
    }

    fn target_rows(&self, task: &str, indices: &[usize]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for &i in indices {
            let y = self.samples[i].labels.get(task).ok_or_else(|| {
                Error::InvalidArgument(format!("sample {i} has no label for task `{task}`"))
            })?;
            out.extend_from_slice(y);
        }
        Ok(out)
    }

    /// Class labels in `(sample, position)` order.
    pub fn class_targets(&self, task: &str, indices: &[usize]) -> Result<Vec<usize>> {
        Ok(self.target_rows(task, indices)?.into_iter().map(|c| c as usize).collect())
    }

    /// Dense targets as `[N, output_dim, H, W]`.
    pub fn dense_targets(&self, task: &str, indices: &[usize]) -> Result<Tensor> {
        let info = self.manifest.task(task)?;
        let [_, h, w] = self.manifest.input_shape;
        Tensor::new(
            vec![indices.len(), info.output_dim, h, w],
            self.target_rows(task, indices)?,
            false,
        )
    }

    /// SHA-256 over the encoded container, hex.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(encode_dataset(self));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Splits off a validation part of `fraction` of the samples; per-task
/// stratified in the disjoint regime. Both parts keep dataset order.
pub fn split_train_val(
    ds: &MultiTaskDataset,
    fraction: f64,
    seed: u64,
) -> Result<(MultiTaskDataset, MultiTaskDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("split fraction {fraction} outside (0, 1)")));
    }
    let pools: Vec<(String, Vec<usize>)> = match ds.regime() {
        Regime::MultiLabel => vec![("all".to_string(), (0..ds.len()).collect())],
        Regime::DisjointLabel => ds
            .manifest
            .tasks
            .iter()
            .map(|t| (t.id.clone(), ds.indices_for(&t.id)))
            .collect(),
    };
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (name, mut pool) in pools {
        let n_val = (fraction * pool.len() as f64).round() as usize;
        if n_val == 0 || n_val >= pool.len() {
            return Err(Error::InvalidArgument(format!(
                "split of {} `{name}` samples at fraction {fraction} leaves an empty side",
                pool.len()
            )));
        }
        Prng::new(seed, &format!("split/{name}")).shuffle(&mut pool);
        val.extend_from_slice(&pool[..n_val]);
        train.extend_from_slice(&pool[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&val)))
}
