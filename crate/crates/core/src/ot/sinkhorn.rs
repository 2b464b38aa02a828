//! Entropic and unbalanced Sinkhorn iterations.
//!
//! Both solvers use the product measure `a ⊗ b` as entropic reference, so the
//! plan is parameterised as `pi_ij = a_i b_j exp((f_i + g_j - C_ij) / eps)`.
//! The unbalanced solver damps each potential update by `tau / (tau + eps)`.

use ndarray::Array2;

use super::{compensated_sum, generalized_kl, l1_violation, CostMatrix, DiscreteMeasure, SolverConfig, TransportPlan};
use crate::{Error, Result};

fn validate(cost: &CostMatrix, cfg: &SolverConfig) -> Result<()> {
    cfg.validate()?;
    if !(cfg.epsilon > 0.0) || !cfg.epsilon.is_finite() {
        return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {}", cfg.epsilon)));
    }
    if let Some(v) = cost.values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("cost entry {v}")));
    }
    Ok(())
}

fn ln_weights(w: &[f64]) -> Vec<f64> {
    w.iter().map(|&x| if x > 0.0 { x.ln() } else { f64::NEG_INFINITY }).collect()
}

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Potentials -> coupling.
fn coupling_from_potentials(la: &[f64], lb: &[f64], f: &[f64], g: &[f64], cost: &Array2<f64>, eps: f64) -> Array2<f64> {
    Array2::from_shape_fn(cost.dim(), |(i, j)| (la[i] + lb[j] + (f[i] + g[j] - cost[[i, j]]) / eps).exp())
}

/// `g_j <- -scale * eps * log sum_i a_i exp((f_i - C_ij)/eps)`.
fn update_cols(la: &[f64], f: &[f64], cost: &Array2<f64>, eps: f64, scale: f64, g: &mut [f64]) {
    for (j, gj) in g.iter_mut().enumerate() {
        let lse = logsumexp((0..la.len()).map(|i| la[i] + (f[i] - cost[[i, j]]) / eps));
        *gj = -scale * eps * lse;
    }
}

/// `f_i <- -scale * eps * log sum_j b_j exp((g_j - C_ij)/eps)`.
fn update_rows(lb: &[f64], g: &[f64], cost: &Array2<f64>, eps: f64, scale: f64, f: &mut [f64]) {
    for (i, fi) in f.iter_mut().enumerate() {
        let lse = logsumexp((0..lb.len()).map(|j| lb[j] + (g[j] - cost[[i, j]]) / eps));
        *fi = -scale * eps * lse;
    }
}

fn entropic_kl(coupling: &Array2<f64>, a: &[f64], b: &[f64]) -> Result<f64> {
    let reference: Vec<f64> = (0..a.len()).flat_map(|i| b.iter().map(move |&bj| a[i] * bj)).collect();
    generalized_kl(coupling.as_slice().expect("standard layout"), &reference)
}

fn finish(coupling: Array2<f64>, cost: &CostMatrix) -> TransportPlan {
    let objective = compensated_sum(coupling.iter().zip(cost.values.iter()).map(|(p, c)| p * c));
    TransportPlan {
        coupling,
        objective_value: objective,
        regularized_objective: objective,
        iterations: 0,
        converged: false,
        marginal_violation: 0.0,
    }
}

/// Balanced entropic OT, `min <pi, C> + eps KL(pi | a ⊗ b)` over couplings.
///
/// Each iteration updates the column potential then the row potential, so the
/// returned plan has exact row marginals; `marginal_violation` is the L1
/// column error and `converged` is set once it drops below `cfg.tolerance`.
pub fn sinkhorn(
    a: &DiscreteMeasure,
    b: &DiscreteMeasure,
    cost: &CostMatrix,
    cfg: &SolverConfig,
) -> Result<TransportPlan> {
    cost.check_shape(a, b)?;
    a.ensure_probability("source")?;
    b.ensure_probability("target")?;
    validate(cost, cfg)?;
    let (coupling, iterations, converged, violation) = if cfg.log_domain {
        sinkhorn_log(&a.weights, &b.weights, &cost.values, cfg, |_| {})?
    } else {
        sinkhorn_scaling(&a.weights, &b.weights, &cost.values, cfg)?
    };
    let mut plan = finish(coupling, cost);
    plan.iterations = iterations;
    plan.converged = converged;
    plan.marginal_violation = violation;
    plan.regularized_objective =
        plan.objective_value + cfg.epsilon * entropic_kl(&plan.coupling, &a.weights, &b.weights)?;
    Ok(plan)
}

type SolveOutput = (Array2<f64>, usize, bool, f64);

fn sinkhorn_log(
    a: &[f64],
    b: &[f64],
    cost: &Array2<f64>,
    cfg: &SolverConfig,
    mut on_iter: impl FnMut(f64),
) -> Result<SolveOutput> {
    let eps = cfg.epsilon;
    let (la, lb) = (ln_weights(a), ln_weights(b));
    let mut f = vec![0.0; a.len()];
    let mut g = vec![0.0; b.len()];
    let mut violation = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iterations {
        update_cols(&la, &f, cost, eps, 1.0, &mut g);
        update_rows(&lb, &g, cost, eps, 1.0, &mut f);
        iterations += 1;
        if f.iter().chain(&g).any(|v| v.is_nan()) {
            return Err(Error::Diverged(format!("non-finite potential at iteration {iterations}")));
        }
        // Column sums: b_j * exp(g_j/eps) * sum_i a_i exp((f_i - C_ij)/eps).
        let cols: Vec<f64> = (0..b.len())
            .map(|j| {
                if b[j] == 0.0 {
                    0.0
                } else {
                    (lb[j] + g[j] / eps + logsumexp((0..a.len()).map(|i| la[i] + (f[i] - cost[[i, j]]) / eps))).exp()
                }
            })
            .collect();
        violation = l1_violation(&cols, b);
        on_iter(dual_value(a, b, &f, &g, cost, eps));
        if violation < cfg.tolerance {
            converged = true;
            break;
        }
    }
    Ok((coupling_from_potentials(&la, &lb, &f, &g, cost, eps), iterations, converged, violation))
}

/// Dual objective `<a,f> + <b,g> - eps <a⊗b, exp((f+g-C)/eps) - 1>`.
fn dual_value(a: &[f64], b: &[f64], f: &[f64], g: &[f64], cost: &Array2<f64>, eps: f64) -> f64 {
    let linear: f64 = a.iter().zip(f).filter(|(w, _)| **w > 0.0).map(|(w, v)| w * v).sum::<f64>()
        + b.iter().zip(g).filter(|(w, _)| **w > 0.0).map(|(w, v)| w * v).sum::<f64>();
    let mut mass = 0.0;
    for i in 0..a.len() {
        for j in 0..b.len() {
            mass += a[i] * b[j] * (((f[i] + g[j] - cost[[i, j]]) / eps).exp() - 1.0);
        }
    }
    linear - eps * mass
}

/// Dual objective after every iteration; used to check monotone ascent.
#[cfg(test)]
pub(crate) fn sinkhorn_dual_trace(a: &[f64], b: &[f64], cost: &Array2<f64>, cfg: &SolverConfig) -> Vec<f64> {
    let mut trace = Vec::new();
    sinkhorn_log(a, b, cost, cfg, |d| trace.push(d)).unwrap();
    trace
}

fn sinkhorn_scaling(a: &[f64], b: &[f64], cost: &Array2<f64>, cfg: &SolverConfig) -> Result<SolveOutput> {
    // kernel_ij = a_i b_j exp(-C_ij / eps); pi = diag(u) kernel diag(v)
    let kernel = Array2::from_shape_fn(cost.dim(), |(i, j)| a[i] * b[j] * (-cost[[i, j]] / cfg.epsilon).exp());
    let mut u = vec![1.0; a.len()];
    let mut v = vec![1.0; b.len()];
    let mut violation = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iterations {
        for j in 0..b.len() {
            let s: f64 = (0..a.len()).map(|i| kernel[[i, j]] * u[i]).sum();
            v[j] = if b[j] > 0.0 { b[j] / s } else { 0.0 };
        }
        for i in 0..a.len() {
            let s: f64 = (0..b.len()).map(|j| kernel[[i, j]] * v[j]).sum();
            u[i] = if a[i] > 0.0 { a[i] / s } else { 0.0 };
        }
        iterations += 1;
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::Diverged(format!(
                "scaling vectors overflowed at iteration {iterations}; use the log-domain solver"
            )));
        }
        let cols: Vec<f64> =
            (0..b.len()).map(|j| (0..a.len()).map(|i| u[i] * kernel[[i, j]]).sum::<f64>() * v[j]).collect();
        violation = l1_violation(&cols, b);
        if violation < cfg.tolerance {
            converged = true;
            break;
        }
    }
    let coupling = Array2::from_shape_fn(cost.dim(), |(i, j)| u[i] * kernel[[i, j]] * v[j]);
    Ok((coupling, iterations, converged, violation))
}

/// Unbalanced entropic OT,
/// `min <pi,C> + eps KL(pi | a⊗b) + tau (KL(pi 1 | a) + KL(pi^T 1 | b))`.
///
/// Iterates the generalized Sinkhorn fixed point until the L∞ change of the
/// log-scalings `f/eps`, `g/eps` falls below `cfg.tolerance`.
pub fn unbalanced_sinkhorn(
    a: &DiscreteMeasure,
    b: &DiscreteMeasure,
    cost: &CostMatrix,
    cfg: &SolverConfig,
) -> Result<TransportPlan> {
    cost.check_shape(a, b)?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidMeasure("empty measure".into()));
    }
    validate(cost, cfg)?;
    if !(cfg.tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be > 0, got {}", cfg.tau)));
    }
    let (aw, bw) = (&a.weights, &b.weights);
    let eps = cfg.epsilon;
    let damping = cfg.tau / (cfg.tau + eps);

    let (coupling, iterations, converged) = if cfg.log_domain {
        let (la, lb) = (ln_weights(aw), ln_weights(bw));
        let mut f = vec![0.0; aw.len()];
        let mut g = vec![0.0; bw.len()];
        let (mut prev_f, mut prev_g) = (f.clone(), g.clone());
        let mut iterations = 0;
        let mut converged = false;
        while iterations < cfg.max_iterations {
            update_rows(&lb, &g, &cost.values, eps, damping, &mut f);
            update_cols(&la, &f, &cost.values, eps, damping, &mut g);
            iterations += 1;
            if f.iter().chain(&g).any(|v| !v.is_finite()) {
                return Err(Error::Diverged(format!("non-finite dual potential at iteration {iterations}")));
            }
            let change = f
                .iter()
                .zip(&prev_f)
                .chain(g.iter().zip(&prev_g))
                .map(|(x, y)| ((x - y) / eps).abs())
                .fold(0.0, f64::max);
            prev_f.copy_from_slice(&f);
            prev_g.copy_from_slice(&g);
            if change < cfg.tolerance {
                converged = true;
                break;
            }
        }
        (coupling_from_potentials(&la, &lb, &f, &g, &cost.values, eps), iterations, converged)
    } else {
        let kernel =
            Array2::from_shape_fn(cost.values.dim(), |(i, j)| aw[i] * bw[j] * (-cost.values[[i, j]] / eps).exp());
        let mut u = vec![1.0; aw.len()];
        let mut v = vec![1.0; bw.len()];
        let mut iterations = 0;
        let mut converged = false;
        while iterations < cfg.max_iterations {
            let (old_u, old_v) = (u.clone(), v.clone());
            // (a_i / (K v)_i)^damping where (K v)_i carries the a_i factor.
            for i in 0..aw.len() {
                let s: f64 = (0..bw.len()).map(|j| kernel[[i, j]] * v[j]).sum();
                u[i] = if aw[i] > 0.0 { (aw[i] / s).powf(damping) } else { 0.0 };
            }
            for j in 0..bw.len() {
                let s: f64 = (0..aw.len()).map(|i| kernel[[i, j]] * u[i]).sum();
                v[j] = if bw[j] > 0.0 { (bw[j] / s).powf(damping) } else { 0.0 };
            }
            iterations += 1;
            if u.iter().chain(&v).any(|x| !x.is_finite()) {
                return Err(Error::Diverged(format!("non-finite scaling at iteration {iterations}")));
            }
            let change = u
                .iter()
                .zip(&old_u)
                .chain(v.iter().zip(&old_v))
                .filter(|(x, _)| **x > 0.0)
                .map(|(x, y)| (x.ln() - y.ln()).abs())
                .fold(0.0, f64::max);
            if change < cfg.tolerance {
                converged = true;
                break;
            }
        }
        let coupling = Array2::from_shape_fn(cost.values.dim(), |(i, j)| u[i] * kernel[[i, j]] * v[j]);
        (coupling, iterations, converged)
    };

    let mut plan = finish(coupling, cost);
    plan.iterations = iterations;
    plan.converged = converged;
    let (rows, cols) = (plan.row_sums(), plan.col_sums());
    plan.marginal_violation = l1_violation(&rows, aw) + l1_violation(&cols, bw);
    plan.regularized_objective = plan.objective_value
        + eps * entropic_kl(&plan.coupling, aw, bw)?
        + cfg.tau * (generalized_kl(&rows, aw)? + generalized_kl(&cols, bw)?);
    Ok(plan)
}
