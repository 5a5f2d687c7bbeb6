//! Loss-balancing baselines: uniform, dynamic weight average, homoscedastic
//! uncertainty, GradNorm and MGDA (Frank-Wolfe min-norm).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Uniform,
    Dwa,
    Uncert,
    GradNorm,
    Mgda,
}

/// Per-run balancer state. Weights are in task order.
#[derive(Debug, Clone, PartialEq)]
pub struct BalancerState {
    pub strategy: Strategy,
    pub weights: Vec<f64>,
    /// Weights in effect at the end of every finished epoch.
    pub history: Vec<Vec<f64>>,
    /// Epoch-mean task losses, oldest first (DWA reads the last two).
    pub epoch_losses: Vec<Vec<f64>>,
    /// Log-variances `s` for uncertainty weighting.
    pub log_vars: Vec<f64>,
    /// Task losses on the first GradNorm step.
    pub initial_losses: Option<Vec<f64>>,
}

impl BalancerState {
    pub fn new(strategy: Strategy, tasks: usize) -> Self {
        Self {
            strategy,
            weights: weights_uniform(tasks),
            history: Vec::new(),
            epoch_losses: Vec::new(),
            log_vars: vec![0.0; tasks],
            initial_losses: None,
        }
    }

    /// Closes an epoch: stores its mean losses and the weights used.
    pub fn end_epoch(&mut self, mean_losses: Vec<f64>) {
        self.epoch_losses.push(mean_losses);
        self.history.push(self.weights.clone());
    }
}

pub fn weights_uniform(tasks: usize) -> Vec<f64> {
    vec![1.0; tasks]
}

/// `w_k = T * softmax(r / temperature)_k` with `r_k = L_k(t-1) / L_k(t-2)`.
pub fn dwa_weights(prev: &[f64], prev2: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("DWA temperature {temperature} must be positive")));
    }
    if prev.len() != prev2.len() || prev.is_empty() {
        return Err(Error::InvalidArgument("DWA loss histories differ in length".into()));
    }
    if prev2.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::InvalidArgument("DWA needs positive epoch losses".into()));
    }
    let ratios: Vec<f64> = prev.iter().zip(prev2).map(|(a, b)| a / b).collect();
    let top = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = ratios.iter().map(|r| ((r - top) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    let t = prev.len() as f64;
    Ok(e.iter().map(|v| t * v / z).collect())
}

/// DWA weights for `epoch`; uniform until two epochs of losses exist.
pub fn weights_dwa(state: &BalancerState, epoch: usize, temperature: f64) -> Result<Vec<f64>> {
    let tasks = state.weights.len();
    let n = state.epoch_losses.len();
    if epoch < 2 || n < 2 {
        return Ok(weights_uniform(tasks));
    }
    dwa_weights(&state.epoch_losses[n - 1], &state.epoch_losses[n - 2], temperature)
}

/// `sum_t exp(-s_t) * loss_t + s_t`.
pub fn uncert_combine(tape: &mut Tape, losses: &[Var], log_vars: &[Var]) -> Result<Var> {
    if losses.len() != log_vars.len() || losses.is_empty() {
        return Err(Error::InvalidArgument("one log-variance per task loss required".into()));
    }
    let mut terms = Vec::with_capacity(losses.len());
    for (&l, &s) in losses.iter().zip(log_vars) {
        let neg = tape.scale(s, -1.0);
        let precision = tape.exp(neg);
        let weighted = tape.mul(precision, l)?;
        terms.push(tape.add(weighted, s)?);
    }
    let stacked = tape.stack(&terms)?;
    Ok(tape.sum(stacked))
}

/// One GradNorm descent step on `sum_t |w_t * n_t - G_bar * r_t^alpha|`, where
/// `n_t` is the norm of the unweighted task gradient at the shared layer and
/// the targets are held constant. Weights are clamped at zero and rescaled
/// to sum to `T`.
pub fn gradnorm_step(
    weights: &[f64],
    grad_norms: &[f64],
    losses_now: &[f64],
    losses_init: &[f64],
    alpha: f64,
    lr: f64,
) -> Result<Vec<f64>> {
    let t = weights.len();
    if t == 0 || grad_norms.len() != t || losses_now.len() != t || losses_init.len() != t {
        return Err(Error::InvalidArgument("GradNorm inputs differ in length".into()));
    }
    if losses_init.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::InvalidArgument("GradNorm needs positive initial losses".into()));
    }
    if !(alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!("GradNorm alpha {alpha} must be >= 0")));
    }
    let g: Vec<f64> = weights.iter().zip(grad_norms).map(|(w, n)| w * n).collect();
    let g_bar = g.iter().sum::<f64>() / t as f64;
    let rates: Vec<f64> = losses_now.iter().zip(losses_init).map(|(a, b)| a / b).collect();
    let mean_rate = rates.iter().sum::<f64>() / t as f64;
    let mut next: Vec<f64> = (0..t)
        .map(|i| {
            let target = g_bar * (rates[i] / mean_rate).powf(alpha);
            let diff = g[i] - target;
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            (weights[i] - lr * sign * grad_norms[i]).max(0.0)
        })
        .collect();
    let sum: f64 = next.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Ok(weights_uniform(t));
    }
    next.iter_mut().for_each(|w| *w *= t as f64 / sum);
    Ok(next)
}

/// Minimum-norm point of the segment `[g1, g2]`: `gamma * g1 + (1 - gamma) * g2`.
pub fn min_norm_2task(g1: &[f64], g2: &[f64]) -> Result<(f64, Vec<f64>)> {
    if g1.len() != g2.len() {
        return Err(Error::Shape(format!("gradients of length {} and {}", g1.len(), g2.len())));
    }
    let denom: f64 = g1.iter().zip(g2).map(|(a, b)| (a - b) * (a - b)).sum();
    let gamma = if denom == 0.0 {
        0.5
    } else {
        let num: f64 = g1.iter().zip(g2).map(|(a, b)| (b - a) * b).sum();
        (num / denom).clamp(0.0, 1.0)
    };
    let combined = g1.iter().zip(g2).map(|(a, b)| gamma * a + (1.0 - gamma) * b).collect();
    Ok((gamma, combined))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinNormSolution {
    /// Simplex weights, one per gradient.
    pub weights: Vec<f64>,
    /// `|| sum_t alpha_t g_t ||^2` after initialization and every iteration.
    pub objective: Vec<f64>,
}

impl MinNormSolution {
    pub fn combined(&self, grads: &[Vec<f64>]) -> Vec<f64> {
        let mut out = vec![0.0; grads.first().map_or(0, Vec::len)];
        for (a, g) in self.weights.iter().zip(grads) {
            out.iter_mut().zip(g).for_each(|(o, v)| *o += a * v);
        }
        out
    }
}

/// Frank-Wolfe over the simplex with away steps, working on the Gram
/// matrix of `grads`. Each iteration picks the vertex minimizing
/// `g_t . (G^T alpha)` (lowest index on ties) and line-searches exactly;
/// when moving away from the worst active vertex gains more, it does that
/// instead. Stops once the duality gap drops below `tol`.
pub fn frank_wolfe_min_norm(grads: &[Vec<f64>], max_iter: usize, tol: f64) -> Result<MinNormSolution> {
    let t = grads.len();
    if t == 0 {
        return Err(Error::InvalidArgument("no gradients".into()));
    }
    let dim = grads[0].len();
    if grads.iter().any(|g| g.len() != dim) {
        return Err(Error::Shape("gradients differ in length".into()));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let gram: Vec<Vec<f64>> = (0..t).map(|i| (0..t).map(|j| dot(&grads[i], &grads[j])).collect()).collect();
    let times = |a: &[f64]| -> Vec<f64> { (0..t).map(|i| (0..t).map(|j| gram[i][j] * a[j]).sum()).collect() };
    let quad = |a: &[f64]| -> f64 { dot(a, &times(a)) };

    let mut alpha = vec![1.0 / t as f64; t];
    let mut objective = vec![quad(&alpha)];
    for _ in 0..max_iter {
        let m_alpha = times(&alpha);
        let current = dot(&alpha, &m_alpha);
        let mut fw = 0;
        for i in 1..t {
            if m_alpha[i] < m_alpha[fw] {
                fw = i;
            }
        }
        let mut away: Option<usize> = None;
        for i in 0..t {
            if alpha[i] > 0.0 && away.map_or(true, |a| m_alpha[i] > m_alpha[a]) {
                away = Some(i);
            }
        }
        let gap_fw = current - m_alpha[fw];
        let gap_away = away.map_or(0.0, |v| m_alpha[v] - current);
        if 2.0 * gap_fw < tol {
            break;
        }
        let mut next = alpha.clone();
        if gap_fw >= gap_away {
            // Toward vertex `fw`: alpha + step * (e_fw - alpha).
            let curv = current - 2.0 * m_alpha[fw] + gram[fw][fw];
            let step = if curv > 0.0 { (gap_fw / curv).min(1.0) } else { 1.0 };
            next.iter_mut().for_each(|a| *a *= 1.0 - step);
            next[fw] += step;
        } else {
            // Away from vertex `v`: alpha + step * (alpha - e_v).
            let v = away.expect("active vertex");
            let max_step = alpha[v] / (1.0 - alpha[v]);
            let curv = current - 2.0 * m_alpha[v] + gram[v][v];
            let step = if curv > 0.0 { (gap_away / curv).min(max_step) } else { max_step };
            next.iter_mut().for_each(|a| *a *= 1.0 + step);
            next[v] -= step;
            if step == max_step {
                next[v] = 0.0;
            }
        }
        next.iter_mut().for_each(|a| *a = a.max(0.0));
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|a| *a /= total);
        let value = quad(&next);
        if value > current {
            break;
        }
        alpha = next;
        objective.push(value);
    }
    Ok(MinNormSolution { weights: alpha, objective })
}


#[cfg(test)]
mod props {
    use super::{dwa_weights, frank_wolfe_min_norm, gradnorm_step, min_norm_2task};
    use proptest::prelude::*;

    fn grads(t: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), t)
    }

    fn norm2(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum()
    }

    proptest! {
        #[test]
        fn two_task_norm_bounded(g in grads(2, 4)) {
            let (_, c) = min_norm_2task(&g[0], &g[1]).unwrap();
            let bound = norm2(&g[0]).sqrt().min(norm2(&g[1]).sqrt());
            prop_assert!(norm2(&c).sqrt() <= bound + 1e-12);
        }

        #[test]
        fn fw_two_task_agrees_with_closed_form(g in grads(2, 5)) {
            let (_, c) = min_norm_2task(&g[0], &g[1]).unwrap();
            let sol = frank_wolfe_min_norm(&g, 500, 1e-15).unwrap();
            // The min-norm point of a convex hull is unique.
            for (a, b) in sol.combined(&g).iter().zip(&c) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn fw_common_descent_and_monotone(g in (3usize..6).prop_flat_map(|t| grads(t, 5))) {
            let sol = frank_wolfe_min_norm(&g, 2000, 1e-15).unwrap();
            prop_assert!(sol.objective.windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(sol.weights.iter().all(|&a| a >= 0.0));
            prop_assert!((sol.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let d = sol.combined(&g);
            let dd = norm2(&d);
            for gt in &g {
                let dg: f64 = d.iter().zip(gt).map(|(a, b)| a * b).sum();
                prop_assert!(dg >= dd - 1e-3);
            }
        }

        #[test]
        fn fw_scale_invariant(g in grads(3, 4), c in 0.1f64..10.0) {
            let a = frank_wolfe_min_norm(&g, 2000, 1e-15).unwrap();
            let scaled: Vec<Vec<f64>> = g.iter().map(|v| v.iter().map(|x| c * x).collect()).collect();
            let b = frank_wolfe_min_norm(&scaled, 2000, 1e-15).unwrap();
            let (da, db) = (a.combined(&g), b.combined(&g));
            prop_assert!((norm2(&da) - norm2(&db)).abs() < 1e-4 * (1.0 + norm2(&da)));
        }

        #[test]
        fn dwa_sums_to_t_and_scale_invariant(
            l in prop::collection::vec((0.01f64..10.0, 0.01f64..10.0), 1..6),
            c in 0.01f64..100.0,
        ) {
            let (prev, prev2): (Vec<f64>, Vec<f64>) = l.into_iter().unzip();
            let w = dwa_weights(&prev, &prev2, 2.0).unwrap();
            prop_assert!((w.iter().sum::<f64>() - prev.len() as f64).abs() < 1e-12);
            prop_assert!(w.iter().all(|v| v.is_finite() && *v >= 0.0));
            let sp: Vec<f64> = prev.iter().map(|v| v * c).collect();
            let sp2: Vec<f64> = prev2.iter().map(|v| v * c).collect();
            let ws = dwa_weights(&sp, &sp2, 2.0).unwrap();
            for (a, b) in w.iter().zip(&ws) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn gradnorm_sums_to_t(
            rows in prop::collection::vec((0.1f64..3.0, 0.0f64..5.0, 0.01f64..3.0, 0.01f64..3.0), 1..6),
            lr in 0.0f64..1.0,
        ) {
            let w: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let n: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let now: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let init: Vec<f64> = rows.iter().map(|r| r.3).collect();
            let out = gradnorm_step(&w, &n, &now, &init, 1.5, lr).unwrap();
            prop_assert!(out.iter().all(|v| v.is_finite() && *v >= 0.0));
            prop_assert!((out.iter().sum::<f64>() - w.len() as f64).abs() < 1e-12);
        }
    }
}
