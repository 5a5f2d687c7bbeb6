use super::{check_finite, numel, Tensor, EPS_NORM};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    ChannelLinear {
        x: Var,
        w: Var,
        b: Var,
        batch: usize,
        spatial: usize,
    },
    Relu(Var),
    Normalize {
        x: Var,
        groups: usize,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        classes: usize,
        spatial: usize,
        probs: Vec<f64>,
    },
    L1 {
        a: Var,
        b: Var,
    },
    Cosine {
        a: Var,
        b: Var,
        groups: usize,
        // (dot, |a|, |b|) per group
        stats: Vec<(f64, f64, f64)>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    Stack(Vec<Var>),
    Index(Var, usize),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation so that [`Tape::backward`] can replay it.
///
/// Feature maps are `[C, H, W]` for a single sample or `[N, C, H, W]` for a
/// batch. Apart from the bias add inside [`Tape::channelwise_linear`] no op
/// broadcasts; mismatched shapes are errors.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every tracked leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any) into the tensor's grad slot.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

fn grouped(shape: &[usize]) -> usize {
    if shape.len() == 4 {
        shape[0]
    } else {
        1
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).needs_grad)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// Value of a single-element node, rejecting NaN/Inf.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = self.node(v);
        if n.value.len() != 1 {
            return Err(Error::Shape(format!("expected a scalar, got shape {:?}", n.shape)));
        }
        check_finite(&n.value, "scalar output")?;
        Ok(n.value[0])
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone(), false)
            .unwrap_or_else(|_| panic!("non-finite value at node {}", v.0))
    }

    /// Copies a tensor onto the tape; gradients are tracked iff the tensor
    /// requires them.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        if numel(&shape) != values.len() {
            return Err(Error::Shape(format!(
                "constant of shape {shape:?} given {} values",
                values.len()
            )));
        }
        check_finite(&values, "constant")?;
        Ok(self.push(shape, values, Op::Leaf, false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                for j in 0..n {
                    out[i * n + j] += aip * bv[p * n + j];
                }
            }
        }
        let g = self.any_grad(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b }, g))
    }

    /// Applies `weight · x[.., :, h, w] + bias` at every spatial position,
    /// i.e. a 1×1 convolution. `weight` is `[C_out, C_in]`, `bias` is `[C_out]`.
    pub fn channelwise_linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (sw, sb) = (self.shape(weight), self.shape(bias));
        let (batch, ch, rest) = match sx.len() {
            3 => (1, sx[0], &sx[1..]),
            4 => (sx[0], sx[1], &sx[2..]),
            _ => return Err(Error::Shape(format!("feature map must be rank 3 or 4, got {sx:?}"))),
        };
        if sw.len() != 2 || sw[1] != ch {
            return Err(Error::Shape(format!("weight {sw:?} does not accept {ch} channels")));
        }
        let c_out = sw[0];
        if sb != [c_out] {
            return Err(Error::Shape(format!("bias {sb:?} for {c_out} output channels")));
        }
        let spatial = numel(rest);
        let (xv, wv, bv) = (self.value(x), self.value(weight), self.value(bias));
        let mut out = vec![0.0; batch * c_out * spatial];
        for n in 0..batch {
            let xs = &xv[n * ch * spatial..(n + 1) * ch * spatial];
            let ys = &mut out[n * c_out * spatial..(n + 1) * c_out * spatial];
            for o in 0..c_out {
                let yrow = &mut ys[o * spatial..(o + 1) * spatial];
                yrow.iter_mut().for_each(|y| *y = bv[o]);
                for c in 0..ch {
                    let w = wv[o * ch + c];
                    let xrow = &xs[c * spatial..(c + 1) * spatial];
                    for (y, xv) in yrow.iter_mut().zip(xrow) {
                        *y += w * xv;
                    }
                }
            }
        }
        let mut shape = sx.clone();
        shape[sx.len() - 3] = c_out;
        let g = self.any_grad(&[x, weight, bias]);
        Ok(self.push(
            shape,
            out,
            Op::ChannelLinear {
                x,
                w: weight,
                b: bias,
                batch,
                spatial,
            },
            g,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let g = self.any_grad(&[x]);
        self.push(shape, out, Op::Relu(x), g)
    }

    fn normalize_groups(&mut self, x: Var, groups: usize) -> Result<Var> {
        let xv = self.value(x);
        let len = xv.len() / groups;
        let mut out = Vec::with_capacity(xv.len());
        let mut norms = Vec::with_capacity(groups);
        for chunk in xv.chunks(len) {
            let norm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > EPS_NORM) {
                return Err(Error::DegenerateNorm { norm, eps: EPS_NORM });
            }
            out.extend(chunk.iter().map(|v| v / norm));
            norms.push(norm);
        }
        let shape = self.shape(x).to_vec();
        let g = self.any_grad(&[x]);
        Ok(self.push(shape, out, Op::Normalize { x, groups, norms }, g))
    }

    /// Divides by the L2 norm of the whole flattened tensor.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        self.normalize_groups(x, 1)
    }

    /// Normalizes each sample of an `[N, C, H, W]` batch on its own; a
    /// single `[C, H, W]` map is one sample.
    pub fn l2_normalize_each(&mut self, x: Var) -> Result<Var> {
        let groups = grouped(self.shape(x));
        self.normalize_groups(x, groups)
    }

    /// Mean cross-entropy. `logits` is `[K]` (one label) or `[N, K, ...]`
    /// with one label per sample and trailing position, in row-major order.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let (batch, classes, spatial) = match shape.len() {
            1 => (1, shape[0], 1),
            0 => return Err(Error::Shape("cross-entropy on a scalar".into())),
            _ => (shape[0], shape[1], numel(&shape[2..])),
        };
        if labels.len() != batch * spatial {
            return Err(Error::Shape(format!(
                "{} labels for logits {shape:?}",
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let zv = self.value(logits);
        let mut probs = vec![0.0; zv.len()];
        let mut total = 0.0;
        for n in 0..batch {
            for s in 0..spatial {
                let at = |k: usize| n * classes * spatial + k * spatial + s;
                let max = (0..classes).map(|k| zv[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = (0..classes).map(|k| (zv[at(k)] - max).exp()).sum();
                let lse = max + sum.ln();
                for k in 0..classes {
                    probs[at(k)] = (zv[at(k)] - lse).exp();
                }
                total += lse - zv[at(labels[n * spatial + s])];
            }
        }
        let loss = total / (batch * spatial) as f64;
        let g = self.any_grad(&[logits]);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                classes,
                spatial,
                probs,
            },
            g,
        ))
    }

    /// `-log softmax(logits)[label]` for a single logit vector.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        if self.shape(logits).len() != 1 {
            return Err(Error::Shape(format!(
                "expected a logit vector, got {:?}",
                self.shape(logits)
            )));
        }
        self.cross_entropy(logits, &[label])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "l1 loss")?;
        let (av, bv) = (self.value(a), self.value(b));
        let loss = av.iter().zip(bv).map(|(x, y)| (x - y).abs()).sum::<f64>() / av.len() as f64;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(vec![], vec![loss], Op::L1 { a, b }, g))
    }

    fn cosine_groups(&mut self, a: Var, b: Var, groups: usize) -> Result<Var> {
        self.same_shape(a, b, "cosine loss")?;
        let (av, bv) = (self.value(a), self.value(b));
        let len = av.len() / groups;
        let mut stats = Vec::with_capacity(groups);
        let mut total = 0.0;
        for (ca, cb) in av.chunks(len).zip(bv.chunks(len)) {
            let dot: f64 = ca.iter().zip(cb).map(|(x, y)| x * y).sum();
            let na = ca.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = cb.iter().map(|v| v * v).sum::<f64>().sqrt();
            for norm in [na, nb] {
                if !(norm > EPS_NORM) {
                    return Err(Error::DegenerateNorm { norm, eps: EPS_NORM });
                }
            }
            total += 1.0 - dot / (na * nb);
            stats.push((dot, na, nb));
        }
        let loss = total / groups as f64;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(vec![], vec![loss], Op::Cosine { a, b, groups, stats }, g))
    }

    /// `1 - cos(a, b)` over the whole flattened tensors.
    pub fn cosine_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.cosine_groups(a, b, 1)
    }

    /// Mean over samples of the per-sample cosine loss.
    pub fn cosine_loss_each(&mut self, a: Var, b: Var) -> Result<Var> {
        let groups = grouped(self.shape(a));
        self.cosine_groups(a, b, groups)
    }

    fn zip_op(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, "elementwise op")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        let g = self.any_grad(&[a, b]);
        Ok(self.push(shape, out, op, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let g = self.any_grad(&[x]);
        self.push(shape, out, Op::Scale(x, c), g)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        let g = self.any_grad(&[x]);
        self.push(shape, out, Op::Exp(x), g)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let g = self.any_grad(&[x]);
        self.push(vec![], vec![s], Op::Sum(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let g = self.any_grad(&[x]);
        self.push(vec![], vec![m], Op::Mean(x), g)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|v| v * v).sum();
        let g = self.any_grad(&[x]);
        self.push(vec![], vec![s], Op::SumSquares(x), g)
    }

    /// Stacks single-element nodes into a vector.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            let v = self.value(x);
            if v.len() != 1 {
                return Err(Error::Shape(format!("stack expects scalars, got {:?}", self.shape(x))));
            }
            out.push(v[0]);
        }
        let g = self.any_grad(xs);
        Ok(self.push(vec![xs.len()], out, Op::Stack(xs.to_vec()), g))
    }

    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let v = self.value(x);
        let value = *v
            .get(i)
            .ok_or_else(|| Error::Shape(format!("index {i} out of {} elements", v.len())))?;
        let g = self.any_grad(&[x]);
        Ok(self.push(vec![], vec![value], Op::Index(x, i), g))
    }

    /// Sums two scalars (convenience over [`Tape::add`] for mixed `[]`/`[1]` shapes).
    pub fn add_scalars(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.stack(&[a, b])?;
        Ok(self.sum(s))
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.node(output);
        if out.value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape
            )));
        }
        check_finite(&out.value, "backward output")?;

        let mut grads: Vec<Option<Vec<f64>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut send = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match grads[v.0].as_mut() {
                Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                None => grads[v.0] = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            let gij = g[i * n + j];
                            acc += gij * bv[p * n + j];
                            db[p * n + j] += av[i * k + p] * gij;
                        }
                        da[i * k + p] = acc;
                    }
                }
                send(*a, da);
                send(*b, db);
            }
            Op::ChannelLinear {
                x,
                w,
                b,
                batch,
                spatial,
            } => {
                let (batch, spatial) = (*batch, *spatial);
                let (xv, wv) = (self.value(*x), self.value(*w));
                let c_out = self.shape(*w)[0];
                let ch = self.shape(*w)[1];
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                let mut db = vec![0.0; c_out];
                for n in 0..batch {
                    let xs = &xv[n * ch * spatial..(n + 1) * ch * spatial];
                    let gs = &g[n * c_out * spatial..(n + 1) * c_out * spatial];
                    let dxs = &mut dx[n * ch * spatial..(n + 1) * ch * spatial];
                    for o in 0..c_out {
                        let grow = &gs[o * spatial..(o + 1) * spatial];
                        db[o] += grow.iter().sum::<f64>();
                        for c in 0..ch {
                            let xrow = &xs[c * spatial..(c + 1) * spatial];
                            let wv_oc = wv[o * ch + c];
                            let mut acc = 0.0;
                            let dxrow = &mut dxs[c * spatial..(c + 1) * spatial];
                            for s in 0..spatial {
                                acc += grow[s] * xrow[s];
                                dxrow[s] += wv_oc * grow[s];
                            }
                            dw[o * ch + c] += acc;
                        }
                    }
                }
                send(*x, dx);
                send(*w, dw);
                send(*b, db);
            }
            Op::Relu(x) => {
                let dx = self
                    .value(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 })
                    .collect();
                send(*x, dx);
            }
            Op::Normalize { x, groups, norms } => {
                let y = &node.value;
                let len = y.len() / groups;
                let mut dx = Vec::with_capacity(y.len());
                for ((yc, gc), norm) in y.chunks(len).zip(g.chunks(len)).zip(norms) {
                    let proj: f64 = yc.iter().zip(gc).map(|(a, b)| a * b).sum();
                    dx.extend(yc.iter().zip(gc).map(|(yi, gi)| (gi - yi * proj) / norm));
                }
                send(*x, dx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                classes,
                spatial,
                probs,
            } => {
                let count = labels.len() as f64;
                let mut dz: Vec<f64> = probs.iter().map(|p| p * g[0] / count).collect();
                for (i, &label) in labels.iter().enumerate() {
                    let (n, s) = (i / spatial, i % spatial);
                    dz[n * classes * spatial + label * spatial + s] -= g[0] / count;
                }
                send(*logits, dz);
            }
            Op::L1 { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let scale = g[0] / av.len() as f64;
                let da: Vec<f64> = av
                    .iter()
                    .zip(bv)
                    .map(|(x, y)| {
                        let d = x - y;
                        if d > 0.0 {
                            scale
                        } else if d < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let db = da.iter().map(|v| -v).collect();
                send(*a, da);
                send(*b, db);
            }
            Op::Cosine { a, b, groups, stats } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let len = av.len() / groups;
                let scale = -g[0] / *groups as f64;
                let mut da = Vec::with_capacity(av.len());
                let mut db = Vec::with_capacity(av.len());
                for ((ca, cb), &(dot, na, nb)) in av.chunks(len).zip(bv.chunks(len)).zip(stats) {
                    let cos = dot / (na * nb);
                    for (x, y) in ca.iter().zip(cb) {
                        da.push(scale * (y / (na * nb) - cos * x / (na * na)));
                        db.push(scale * (x / (na * nb) - cos * y / (nb * nb)));
                    }
                }
                send(*a, da);
                send(*b, db);
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                send(*a, g.iter().zip(bv).map(|(gi, y)| gi * y).collect());
                send(*b, g.iter().zip(av).map(|(gi, x)| gi * x).collect());
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|v| v * c).collect()),
            Op::Exp(x) => send(*x, g.iter().zip(&node.value).map(|(gi, y)| gi * y).collect()),
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                send(*x, vec![g[0] / n as f64; n]);
            }
            Op::SumSquares(x) => send(*x, self.value(*x).iter().map(|v| 2.0 * v * g[0]).collect()),
            Op::Stack(xs) => {
                for (x, gi) in xs.iter().zip(g) {
                    send(*x, vec![*gi]);
                }
            }
            Op::Index(x, i) => {
                let mut d = vec![0.0; self.value(*x).len()];
                d[*i] = g[0];
                send(*x, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, v: Vec<f64>) -> Tensor {
        Tensor::new(shape, v, true).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::new();
        let i2 = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let z = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p), &[1.0, 2.0, 3.0, 4.0]);
        let q = tape.matmul(m, z).unwrap();
        assert_eq!(tape.value(q), &[0.0; 4]);
        let bad = tape.constant(vec![3, 1], vec![0.0; 3]).unwrap();
        assert!(matches!(tape.matmul(m, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn channelwise_identity_and_bias_only() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let eye = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zb = tape.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let y = tape.channelwise_linear(x, eye, zb).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let zw = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let b = tape.constant(vec![2], vec![5.0, -1.0]).unwrap();
        let y = tape.channelwise_linear(x, zw, b).unwrap();
        assert_eq!(tape.value(y), &[5.0, 5.0, -1.0, -1.0]);

        let w3 = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        assert!(tape.channelwise_linear(x, w3, b).is_err());
    }

    #[test]
    fn relu_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![3], vec![-1.0, 2.0, 0.0]).unwrap();
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0.0, 2.0, 0.0]);
    }

    #[test]
    fn normalize_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![3], vec![1.0, 0.0, 0.0]).unwrap();
        let y = tape.l2_normalize(x).unwrap();
        assert_eq!(tape.value(y), &[1.0, 0.0, 0.0]);
        let x = tape.constant(vec![2], vec![3.0, 4.0]).unwrap();
        let y = tape.l2_normalize(x).unwrap();
        assert!((tape.value(y)[0] - 0.6).abs() < 1e-15);
        assert!((tape.value(y)[1] - 0.8).abs() < 1e-15);
        let z = tape.constant(vec![2], vec![0.0, 1e-13]).unwrap();
        assert!(matches!(tape.l2_normalize(z), Err(Error::DegenerateNorm { .. })));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(vec![5], vec![0.3; 5]).unwrap();
        let l = tape.softmax_cross_entropy(z, 2).unwrap();
        assert!((tape.scalar(l).unwrap() - 5f64.ln()).abs() < 1e-14);

        let z = tape.constant(vec![3], vec![0.0, 1000.0, 0.0]).unwrap();
        let l = tape.softmax_cross_entropy(z, 1).unwrap();
        let v = tape.scalar(l).unwrap();
        assert!(v.is_finite() && v.abs() < 1e-12);

        assert!(matches!(
            tape.softmax_cross_entropy(z, 3),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn l1_and_cosine_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let b = tape.constant(vec![3], vec![1.5, -1.5, 1.0]).unwrap();
        let l = tape.l1_loss(a, a).unwrap();
        assert_eq!(tape.scalar(l).unwrap(), 0.0);
        let l = tape.l1_loss(b, a).unwrap();
        assert!((tape.scalar(l).unwrap() - 0.5).abs() < 1e-15);

        let c = tape.cosine_loss(a, a).unwrap();
        assert!(tape.scalar(c).unwrap().abs() < 1e-15);
        let na = tape.scale(a, -1.0);
        let c = tape.cosine_loss(a, na).unwrap();
        assert!((tape.scalar(c).unwrap() - 2.0).abs() < 1e-15);
        let e1 = tape.constant(vec![2], vec![1.0, 0.0]).unwrap();
        let e2 = tape.constant(vec![2], vec![0.0, 3.0]).unwrap();
        let c = tape.cosine_loss(e1, e2).unwrap();
        assert_eq!(tape.scalar(c).unwrap(), 1.0);

        let z = tape.constant(vec![2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(tape.cosine_loss(e1, z), Err(Error::DegenerateNorm { .. })));
        assert!(matches!(tape.l1_loss(e1, a), Err(Error::Shape(_))));
    }

    #[test]
    fn l1_subgradient_zero_at_ties() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(vec![2], vec![1.0, 2.0]));
        let b = tape.constant(vec![2], vec![1.0, 3.0]).unwrap();
        let l = tape.l1_loss(a, b).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap(), &[0.0, -0.5]);
    }

    #[test]
    fn backward_sum_and_accumulation() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![3], vec![1.0, -2.0, 3.0]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 3]);

        let s1 = tape.sum(x);
        let s2 = tape.sum(x);
        let s = tape.add_scalars(s1, s2).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![3], vec![1.0, 2.0, 3.0]));
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![2], vec![1.0, 2.0]));
        let c = tape.constant(vec![2], vec![3.0, 4.0]).unwrap();
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn stack_index_exp() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![2], vec![0.0, 1.0]));
        let e = tape.exp(x);
        let i = tape.index(e, 1).unwrap();
        let g = tape.backward(i).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 1f64.exp()]);
    }
}
