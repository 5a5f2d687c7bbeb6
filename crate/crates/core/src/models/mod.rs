//! Hard-parameter-sharing networks: a shared encoder with tap points,
//! one predictor head per task, and per-task per-tap feature adaptors.
//!
//! Parameters are stored by name:
//!
//! | name | shape |
//! |------|-------|
//! | `encoder.stage{i}.weight` / `.bias` | `[w_i, w_{i-1}]` / `[w_i]` |
//! | `head.{task}.weight` / `.bias` | `[out, w_last]` / `[out]` |
//! | `adaptor.{task}.tap{j}.weight` / `.bias` (linear) | `[C, C]` / `[C]` |
//! | `adaptor.{task}.tap{j}.weight1` / `.bias1` / `.weight2` / `.bias2` (nonlinear) | `[2C, C]` / `[2C]` / `[C, 2C]` / `[C]` |

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use optim::{Adam, AdamConfig};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Prng;
use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    L1,
    Cosine,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::L1 => "l1",
            LossKind::Cosine => "cosine",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" => Ok(LossKind::CrossEntropy),
            "l1" => Ok(LossKind::L1),
            "cosine" => Ok(LossKind::Cosine),
            other => Err(Error::Format(format!("unknown loss kind `{other}`"))),
        }
    }
}

/// One task: its loss, head width, task-loss weight `w` and distillation
/// weight `lambda` (0 disables distillation for the task).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub loss: LossKind,
    pub output_dim: usize,
    pub w: f64,
    pub lambda: f64,
}

pub(crate) fn valid_ident(s: &str) -> bool {
    !s.is_empty()
        && s
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl TaskSpec {
    pub fn new(id: &str, loss: LossKind, output_dim: usize) -> Self {
        Self {
            id: id.to_string(),
            loss,
            output_dim,
            w: 1.0,
            lambda: 0.0,
        }
    }

    pub fn with_weights(mut self, w: f64, lambda: f64) -> Self {
        self.w = w;
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !valid_ident(&self.id) {
            return Err(Error::InvalidArgument(format!(
                "task id `{}` must be non-empty [A-Za-z0-9_-]",
                self.id
            )));
        }
        if self.output_dim == 0 {
            return Err(Error::InvalidArgument(format!("task `{}` has output_dim 0", self.id)));
        }
        if !(self.w > 0.0 && self.w.is_finite()) {
            return Err(Error::InvalidArgument(format!("task `{}`: w must be > 0", self.id)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("task `{}`: lambda must be >= 0", self.id)));
        }
        if self.loss == LossKind::CrossEntropy && self.output_dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "classification task `{}` needs at least 2 classes",
                self.id
            )));
        }
        Ok(())
    }
}

/// Shared encoder layout: channelwise-linear stages over a fixed `H x W`
/// grid. Every stage except the last is followed by a ReLU.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_channels: usize,
    #[serde(default = "one")]
    pub height: usize,
    #[serde(default = "one")]
    pub width: usize,
    pub widths: Vec<usize>,
    pub tap_points: Vec<usize>,
}

fn one() -> usize {
    1
}

impl EncoderConfig {
    /// Stages of the given widths with taps at the middle and last stage.
    pub fn new(input_channels: usize, widths: Vec<usize>) -> Self {
        let last = widths.len().saturating_sub(1);
        let mut tap_points = vec![last / 2, last];
        tap_points.dedup();
        Self {
            input_channels,
            height: 1,
            width: 1,
            widths,
            tap_points,
        }
    }

    pub fn with_taps(mut self, taps: Vec<usize>) -> Self {
        self.tap_points = taps;
        self
    }

    pub fn with_spatial(mut self, height: usize, width: usize) -> Self {
        self.height = height;
        self.width = width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.input_channels == 0 || self.height == 0 || self.width == 0 {
            return bad("encoder input dimensions must be positive".into());
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad(format!("encoder widths {:?} must be non-empty and positive", self.widths));
        }
        if self.tap_points.is_empty() {
            return bad("at least one tap point is required".into());
        }
        if !self.tap_points.windows(2).all(|w| w[0] < w[1]) {
            return bad(format!("tap points {:?} must be strictly increasing", self.tap_points));
        }
        if self.tap_points.iter().any(|&t| t >= self.widths.len()) {
            return bad(format!(
                "tap points {:?} exceed {} stages",
                self.tap_points,
                self.widths.len()
            ));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.input_channels, self.height, self.width]
    }

    pub fn last_stage(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn channels_at(&self, stage: usize) -> usize {
        self.widths[stage]
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptorKind {
    Linear,
    Nonlinear,
    None,
}

impl AdaptorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AdaptorKind::Linear => "linear",
            AdaptorKind::Nonlinear => "nonlinear",
            AdaptorKind::None => "none",
        }
    }

    /// Parameters of one adaptor acting on `c` channels.
    pub fn params_per_adaptor(self, c: usize) -> usize {
        match self {
            AdaptorKind::Linear => c * c + c,
            AdaptorKind::Nonlinear => c * 2 * c + 2 * c + 2 * c * c + c,
            AdaptorKind::None => 0,
        }
    }
}

impl FromStr for AdaptorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(AdaptorKind::Linear),
            "nonlinear" => Ok(AdaptorKind::Nonlinear),
            "none" => Ok(AdaptorKind::None),
            other => Err(Error::Format(format!("unknown adaptor kind `{other}`"))),
        }
    }
}

/// Closed-form parameter count for a bundle layout.
pub fn expected_param_count(config: &EncoderConfig, tasks: &[TaskSpec], kind: AdaptorKind) -> usize {
    let mut prev = config.input_channels;
    let mut total = 0;
    for &w in &config.widths {
        total += w * prev + w;
        prev = w;
    }
    for t in tasks {
        total += t.output_dim * prev + t.output_dim;
    }
    let per_task: usize = config
        .tap_points
        .iter()
        .map(|&j| kind.params_per_adaptor(config.widths[j]))
        .sum();
    total + tasks.len() * per_task
}

/// Parameters of a shared-encoder network. A frozen bundle is a teacher:
/// forward passes work, updates are rejected and no gradients are tracked.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    encoder: EncoderConfig,
    tasks: Vec<TaskSpec>,
    adaptor_kind: AdaptorKind,
    params: BTreeMap<String, Tensor>,
    frozen: bool,
}

fn stage_weight(i: usize) -> String {
    format!("encoder.stage{i}.weight")
}
fn stage_bias(i: usize) -> String {
    format!("encoder.stage{i}.bias")
}
fn head_name(task: &str, part: &str) -> String {
    format!("head.{task}.{part}")
}
fn adaptor_name(task: &str, tap: usize, part: &str) -> String {
    format!("adaptor.{task}.tap{tap}.{part}")
}

fn uniform_init(name: &str, shape: Vec<usize>, bound: f64, seed: u64) -> Tensor {
    let mut rng = Prng::new(seed, &format!("init/{name}"));
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.uniform_in(-bound, bound)).collect();
    Tensor::new(shape, values, true).expect("finite init")
}

fn noisy_init(name: &str, shape: Vec<usize>, base: Vec<f64>, seed: u64) -> Tensor {
    const ADAPTOR_NOISE: f64 = 1e-2;
    let mut rng = Prng::new(seed, &format!("init/{name}"));
    let values = base.into_iter().map(|b| b + ADAPTOR_NOISE * rng.normal()).collect();
    Tensor::new(shape, values, true).expect("finite init")
}

fn identity(c: usize) -> Vec<f64> {
    let mut m = vec![0.0; c * c];
    for i in 0..c {
        m[i * c + i] = 1.0;
    }
    m
}

impl ModelBundle {
    /// Deterministic initialization. Each parameter draws from its own named
    /// random stream, so adding or removing adaptors never changes the
    /// encoder or head initialization for the same seed.
    pub fn init(
        config: &EncoderConfig,
        tasks: &[TaskSpec],
        adaptor_kind: AdaptorKind,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if tasks.is_empty() {
            return Err(Error::InvalidArgument("a bundle needs at least one task".into()));
        }
        for (i, t) in tasks.iter().enumerate() {
            t.validate()?;
            if tasks[..i].iter().any(|o| o.id == t.id) {
                return Err(Error::InvalidArgument(format!("duplicate task id `{}`", t.id)));
            }
        }
        let mut params = BTreeMap::new();
        let mut prev = config.input_channels;
        for (i, &w) in config.widths.iter().enumerate() {
            // He-uniform in front of a ReLU, LeCun-uniform on the linear last stage.
            let gain = if i + 1 < config.widths.len() { 6.0 } else { 3.0 };
            let bound = (gain / prev as f64).sqrt();
            params.insert(stage_weight(i), uniform_init(&stage_weight(i), vec![w, prev], bound, seed));
            params.insert(stage_bias(i), Tensor::zeros(vec![w], true));
            prev = w;
        }
        for t in tasks {
            let name = head_name(&t.id, "weight");
            let bound = (3.0 / prev as f64).sqrt();
            params.insert(name.clone(), uniform_init(&name, vec![t.output_dim, prev], bound, seed));
            params.insert(head_name(&t.id, "bias"), Tensor::zeros(vec![t.output_dim], true));
            for &j in &config.tap_points {
                let c = config.widths[j];
                match adaptor_kind {
                    AdaptorKind::None => {}
                    AdaptorKind::Linear => {
                        let n = adaptor_name(&t.id, j, "weight");
                        params.insert(n.clone(), noisy_init(&n, vec![c, c], identity(c), seed));
                        params.insert(adaptor_name(&t.id, j, "bias"), Tensor::zeros(vec![c], true));
                    }
                    AdaptorKind::Nonlinear => {
                        // [I; -I] then [I, -I] reproduces the input through the ReLU.
                        let mut up = vec![0.0; 2 * c * c];
                        let mut down = vec![0.0; 2 * c * c];
                        for i in 0..c {
                            up[i * c + i] = 1.0;
                            up[(c + i) * c + i] = -1.0;
                            down[i * 2 * c + i] = 1.0;
                            down[i * 2 * c + c + i] = -1.0;
                        }
                        let n1 = adaptor_name(&t.id, j, "weight1");
                        let n2 = adaptor_name(&t.id, j, "weight2");
                        params.insert(n1.clone(), noisy_init(&n1, vec![2 * c, c], up, seed));
                        params.insert(adaptor_name(&t.id, j, "bias1"), Tensor::zeros(vec![2 * c], true));
                        params.insert(n2.clone(), noisy_init(&n2, vec![c, 2 * c], down, seed));
                        params.insert(adaptor_name(&t.id, j, "bias2"), Tensor::zeros(vec![c], true));
                    }
                }
            }
        }
        Ok(Self {
            encoder: config.clone(),
            tasks: tasks.to_vec(),
            adaptor_kind,
            params,
            frozen: false,
        })
    }

    pub(crate) fn from_parts(
        encoder: EncoderConfig,
        tasks: Vec<TaskSpec>,
        adaptor_kind: AdaptorKind,
        params: BTreeMap<String, Tensor>,
        frozen: bool,
    ) -> Result<Self> {
        let template = ModelBundle::init(&encoder, &tasks, adaptor_kind, 0)?;
        if template.params.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (name, t) in &template.params {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Format(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Format(format!("missing parameter {name}"))),
            }
        }
        let mut bundle = Self {
            encoder,
            tasks,
            adaptor_kind,
            params,
            frozen: false,
        };
        for p in bundle.params.values_mut() {
            p.set_requires_grad(true);
        }
        if frozen {
            bundle = bundle.freeze();
        }
        Ok(bundle)
    }

    pub fn encoder_config(&self) -> &EncoderConfig {
        &self.encoder
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn task(&self, id: &str) -> Result<&TaskSpec> {
        self.tasks
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| Error::UnknownTask(id.to_string()))
    }

    pub fn adaptor_kind(&self) -> AdaptorKind {
        self.adaptor_kind
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Replaces task-level hyperparameters (w, lambda) without touching
    /// parameters; ids and shapes must match.
    pub fn set_task_weights(&mut self, tasks: &[TaskSpec]) -> Result<()> {
        for t in tasks {
            let own = self
                .tasks
                .iter_mut()
                .find(|o| o.id == t.id)
                .ok_or_else(|| Error::UnknownTask(t.id.clone()))?;
            own.w = t.w;
            own.lambda = t.lambda;
        }
        Ok(())
    }

    /// Returns the same parameters with updates and gradient tracking disabled.
    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        for p in self.params.values_mut() {
            p.set_requires_grad(false);
        }
        self
    }

    /// Adds named gradients into the parameters' grad slots.
    pub fn accumulate_grads(&mut self, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        for (name, g) in grads {
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))?;
            p.accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    pub(crate) fn params_mut(&mut self) -> Result<&mut BTreeMap<String, Tensor>> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        Ok(&mut self.params)
    }

    /// Copies every parameter onto `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel<'_> {
        let vars = self
            .params
            .iter()
            .map(|(n, t)| (n.clone(), tape.leaf(t)))
            .collect();
        BoundModel { bundle: self, vars }
    }

    /// Like [`ModelBundle::bind`] but with one parameter replaced by an
    /// existing node (used for gradient checks of whole objectives).
    pub fn bind_with(&self, tape: &mut Tape, name: &str, var: Var) -> Result<BoundModel<'_>> {
        if !self.params.contains_key(name) {
            return Err(Error::InvalidArgument(format!("no parameter named {name}")));
        }
        let mut bound = self.bind(tape);
        bound.vars.insert(name.to_string(), var);
        Ok(bound)
    }

    fn batch_input(&self, x: &Tensor) -> Result<(Tensor, bool)> {
        let want = self.encoder.input_shape();
        match x.shape() {
            s if s == want => Ok((
                Tensor::new([&[1], &want[..]].concat(), x.values().to_vec(), false)?,
                true,
            )),
            s if s.len() == 4 && s[1..] == want => Ok((x.clone(), false)),
            s => Err(Error::Shape(format!("encoder input {s:?}, expected {want:?} or [N, ..]"))),
        }
    }

    fn unbatch(t: Tensor, single: bool) -> Tensor {
        if single {
            let shape = t.shape()[1..].to_vec();
            Tensor::new(shape, t.into_values(), false).expect("same length")
        } else {
            t
        }
    }

    /// Encoder outputs at every tap point, for `[C, H, W]` or `[N, C, H, W]` input.
    pub fn encoder_forward(&self, x: &Tensor) -> Result<BTreeMap<usize, Tensor>> {
        let (xb, single) = self.batch_input(x)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xv = tape.leaf(&xb);
        let feats = bound.encode(&mut tape, xv)?;
        Ok(feats
            .taps
            .iter()
            .map(|(&j, &v)| (j, Self::unbatch(tape.to_tensor(v), single)))
            .collect())
    }

    /// Output of the last encoder stage.
    pub fn encode_last(&self, x: &Tensor) -> Result<Tensor> {
        let (xb, single) = self.batch_input(x)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xv = tape.leaf(&xb);
        let feats = bound.encode(&mut tape, xv)?;
        Ok(Self::unbatch(tape.to_tensor(feats.last), single))
    }

    pub fn predictor_forward(&self, task_id: &str, feat: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let f = tape.leaf(feat);
        let y = bound.predict(&mut tape, task_id, f)?;
        Ok(tape.to_tensor(y))
    }

    pub fn adaptor_apply(&self, task_id: &str, tap: usize, feat: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let f = tape.leaf(feat);
        let y = bound.adapt(&mut tape, task_id, tap, f)?;
        Ok(tape.to_tensor(y))
    }
}

/// Encoder outputs on a tape.
#[derive(Debug, Clone)]
pub struct Features {
    pub taps: BTreeMap<usize, Var>,
    pub last: Var,
}

/// A bundle whose parameters have been placed on a tape.
#[derive(Debug)]
pub struct BoundModel<'a> {
    bundle: &'a ModelBundle,
    vars: BTreeMap<String, Var>,
}

impl BoundModel<'_> {
    pub fn bundle(&self) -> &ModelBundle {
        self.bundle
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))
    }

    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<Features> {
        let cfg = &self.bundle.encoder;
        let mut h = x;
        let mut taps = BTreeMap::new();
        for i in 0..cfg.widths.len() {
            h = tape.channelwise_linear(h, self.var(&stage_weight(i))?, self.var(&stage_bias(i))?)?;
            if i + 1 < cfg.widths.len() {
                h = tape.relu(h);
            }
            if cfg.tap_points.contains(&i) {
                taps.insert(i, h);
            }
        }
        Ok(Features { taps, last: h })
    }

    pub fn predict(&self, tape: &mut Tape, task_id: &str, feat: Var) -> Result<Var> {
        self.bundle.task(task_id)?;
        let w = self.var(&head_name(task_id, "weight"))?;
        let b = self.var(&head_name(task_id, "bias"))?;
        tape.channelwise_linear(feat, w, b)
    }

    pub fn adapt(&self, tape: &mut Tape, task_id: &str, tap: usize, feat: Var) -> Result<Var> {
        self.bundle.task(task_id)?;
        if !self.bundle.encoder.tap_points.contains(&tap) {
            return Err(Error::InvalidArgument(format!("stage {tap} is not a tap point")));
        }
        match self.bundle.adaptor_kind {
            AdaptorKind::None => Err(Error::NoAdaptor),
            AdaptorKind::Linear => {
                let w = self.var(&adaptor_name(task_id, tap, "weight"))?;
                let b = self.var(&adaptor_name(task_id, tap, "bias"))?;
                tape.channelwise_linear(feat, w, b)
            }
            AdaptorKind::Nonlinear => {
                let w1 = self.var(&adaptor_name(task_id, tap, "weight1"))?;
                let b1 = self.var(&adaptor_name(task_id, tap, "bias1"))?;
                let w2 = self.var(&adaptor_name(task_id, tap, "weight2"))?;
                let b2 = self.var(&adaptor_name(task_id, tap, "bias2"))?;
                let h = tape.channelwise_linear(feat, w1, b1)?;
                let h = tape.relu(h);
                tape.channelwise_linear(h, w2, b2)
            }
        }
    }

    /// Named gradients for every tracked parameter reached by the sweep.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
        self.vars
            .iter()
            .filter_map(|(n, v)| grads.get(*v).map(|g| (n.clone(), g.to_vec())))
            .collect()
    }
}
