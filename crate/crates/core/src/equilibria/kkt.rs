//! KKT multipliers of each principal's problem and the normalized
//! equilibrium test.
//!
//! Principal `j` decides `x^j = (c^j, a^j)`. Its constraints are the shared
//! IR constraints `g~_i = g_i(a) - sum_j c_i^j <= 0`, the shared positivity
//! constraints `h~_{i,k} = -(c_i^k + f^k(a_i^k, mu(a))) <= 0` for every pair
//! (those with `k != j` reach `x^j` through `mu`) and `a^j >= 0`. Stationarity
//! is solved by minimum-norm least squares over the active set.

use serde::{Deserialize, Serialize};

use super::{Snapshot, Stencil};
use crate::error::{Error, Result};
use crate::market::{cost_unchecked, feasibility_unchecked, ContractParams, MarketModel, Matrix};
use crate::{par, stage2};

/// Slack at or below which a constraint counts as active.
pub const DEFAULT_ACTIVE_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrincipalMultipliers {
    /// IR multipliers, zero for inactive constraints.
    pub lambda: Vec<f64>,
    /// Positivity multipliers `nu[(k, i)]` for every pair.
    pub nu: Matrix,
    /// Multipliers of `a_i^j >= 0`.
    pub slope_floor: Vec<f64>,
    pub residual: f64,
    pub rank_deficient: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KktResult {
    /// Mean of the per-principal IR multipliers.
    pub lambda: Vec<f64>,
    /// Per pair, the per-principal positivity multiplier of largest magnitude.
    pub nu: Matrix,
    /// Euclidean norm of the stacked stationarity residuals.
    pub stationarity_residual: f64,
    pub per_principal_lambda: Vec<Vec<f64>>,
    pub per_principal: Vec<PrincipalMultipliers>,
    /// Some principal's active-constraint Jacobian was rank deficient; its
    /// multipliers are the minimum-norm solution.
    pub degenerate: bool,
    pub active_ir: Vec<bool>,
    /// `(principal, agent)` pairs with active positivity.
    pub active_positivity: Vec<(usize, usize)>,
}

impl KktResult {
    pub fn dual_feasible(&self, tol: f64) -> bool {
        self.per_principal.iter().all(|p| {
            p.lambda.iter().all(|&l| l >= -tol)
                && p.nu.iter().all(|&v| v >= -tol)
                && p.slope_floor.iter().all(|&v| v >= -tol)
        })
    }

    pub fn max_abs_nu(&self) -> f64 {
        self.nu.amax()
    }
}

/// Derivatives of every snapshot quantity in principal `j`'s own slopes.
struct SlopeDerivatives {
    /// `d cost_j / d a_k^j` at fixed transfers.
    cost: Vec<f64>,
    /// `g[i][k] = d g_i / d a_k^j`
    g: Vec<Vec<f64>>,
    /// `kernel[(l, i)][k] = d f^l(a_i^l, mu) / d a_k^j`
    kernel: Vec<Vec<f64>>,
}

fn slope_derivatives(model: &MarketModel, a: &Matrix, j: usize) -> Result<SlopeDerivatives> {
    let (m, n) = (model.n_principals(), model.n_agents());
    let stencils: Vec<Stencil> = (0..n)
        .map(|k| Stencil::new(model, a, j, k))
        .collect::<Result<_>>()?;
    let cost = stencils
        .iter()
        .map(|s| s.apply(|x| x.slope_cost(j)))
        .collect();
    let g = (0..n)
        .map(|i| stencils.iter().map(|s| s.apply(|x| x.g[i])).collect())
        .collect();
    let kernel = (0..m * n)
        .map(|t| {
            let (l, i) = (t / n, t % n);
            stencils
                .iter()
                .map(|s| s.apply(|x| x.kernel[(l, i)]))
                .collect()
        })
        .collect();
    Ok(SlopeDerivatives { cost, g, kernel })
}

enum Unknown {
    Ir(usize),
    Positivity(usize, usize),
    SlopeFloor(usize),
}

fn principal_system(
    model: &MarketModel,
    params: &ContractParams,
    j: usize,
    active_ir: &[bool],
    active_pos: &[(usize, usize)],
) -> Result<PrincipalMultipliers> {
    let (m, n) = (model.n_principals(), model.n_agents());
    let d = slope_derivatives(model, &params.a, j)?;

    let mut unknowns: Vec<Unknown> = (0..n).filter(|&i| active_ir[i]).map(Unknown::Ir).collect();
    unknowns.extend(active_pos.iter().map(|&(l, i)| Unknown::Positivity(l, i)));
    unknowns.extend(
        (0..n)
            .filter(|&k| params.a[(j, k)] <= DEFAULT_ACTIVE_TOL)
            .map(Unknown::SlopeFloor),
    );

    // Rows 0..n: transfer block; rows n..2n: slope block.
    let rows = 2 * n;
    let mut jac = Matrix::zeros(rows, unknowns.len());
    for (col, u) in unknowns.iter().enumerate() {
        match *u {
            Unknown::Ir(i) => {
                jac[(i, col)] = -1.0;
                for k in 0..n {
                    jac[(n + k, col)] = d.g[i][k];
                }
            }
            Unknown::Positivity(l, i) => {
                if l == j {
                    jac[(i, col)] = -1.0;
                }
                for k in 0..n {
                    jac[(n + k, col)] = -d.kernel[l * n + i][k];
                }
            }
            Unknown::SlopeFloor(k) => jac[(n + k, col)] = -1.0,
        }
    }
    let mut grad = nalgebra::DVector::zeros(rows);
    for i in 0..n {
        grad[i] = 1.0;
        grad[n + i] = d.cost[i];
    }

    let mut lambda = vec![0.0; n];
    let mut nu = Matrix::zeros(m, n);
    let mut slope_floor = vec![0.0; n];
    let mut rank_deficient = false;
    let residual = if unknowns.is_empty() {
        grad.norm()
    } else {
        let svd = jac.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let eps = 1e-10 * smax.max(1.0);
        rank_deficient = svd.singular_values.iter().filter(|&&s| s > eps).count() < unknowns.len();
        let x = svd
            .solve(&(-&grad), eps)
            .map_err(|e| Error::Structure(format!("KKT least squares failed: {e}")))?;
        for (col, u) in unknowns.iter().enumerate() {
            match *u {
                Unknown::Ir(i) => lambda[i] = x[col],
                Unknown::Positivity(l, i) => nu[(l, i)] = x[col],
                Unknown::SlopeFloor(k) => slope_floor[k] = x[col],
            }
        }
        (&jac * &x + &grad).norm()
    };
    Ok(PrincipalMultipliers {
        lambda,
        nu,
        slope_floor,
        residual,
        rank_deficient,
    })
}

/// Multipliers of every principal's problem at `params`.
pub fn solve_kkt(
    model: &MarketModel,
    params: &ContractParams,
    active_tol: f64,
) -> Result<KktResult> {
    model.check_contract(params)?;
    if !(active_tol >= 0.0) {
        return Err(Error::Domain(format!(
            "active_tol must be >= 0, got {active_tol}"
        )));
    }
    let (m, n) = (model.n_principals(), model.n_agents());
    let mu = stage2::mu(model, &params.a)?;
    let rep = feasibility_unchecked(model, params, &mu, active_tol);
    if !rep.feasible() {
        return Err(Error::Domain(
            "KKT multipliers requested at an infeasible point".into(),
        ));
    }
    let active_ir: Vec<bool> = rep.ir_slack.iter().map(|&s| s <= active_tol).collect();
    let active_positivity: Vec<(usize, usize)> = (0..m)
        .flat_map(|l| (0..n).map(move |i| (l, i)))
        .filter(|&(l, i)| rep.payment_slack[(l, i)] <= active_tol)
        .collect();

    let per_principal = par::try_map_range(m, |j| {
        principal_system(model, params, j, &active_ir, &active_positivity)
    })?;

    let lambda = (0..n)
        .map(|i| per_principal.iter().map(|p| p.lambda[i]).sum::<f64>() / m as f64)
        .collect();
    let nu = Matrix::from_fn(m, n, |l, i| {
        per_principal
            .iter()
            .map(|p| p.nu[(l, i)])
            .fold(0.0, |acc: f64, v| if v.abs() > acc.abs() { v } else { acc })
    });
    let stationarity_residual = per_principal
        .iter()
        .map(|p| p.residual * p.residual)
        .sum::<f64>()
        .sqrt();
    Ok(KktResult {
        lambda,
        nu,
        stationarity_residual,
        per_principal_lambda: per_principal.iter().map(|p| p.lambda.clone()).collect(),
        degenerate: per_principal.iter().any(|p| p.rank_deficient),
        per_principal,
        active_ir,
        active_positivity,
    })
}

/// True iff `gamma_j lambda^j == gamma_k lambda^k` within `tol` for all
/// principals, using multipliers from [`solve_kkt`] at [`DEFAULT_ACTIVE_TOL`].
pub fn check_noe(
    model: &MarketModel,
    params: &ContractParams,
    gamma: &[f64],
    tol: f64,
) -> Result<bool> {
    if gamma.len() != model.n_principals() {
        return Err(Error::Domain(format!(
            "gamma has length {}, expected {}",
            gamma.len(),
            model.n_principals()
        )));
    }
    if gamma.iter().any(|&g| !(g > 0.0 && g.is_finite())) {
        return Err(Error::Domain("gamma must be positive".into()));
    }
    let kkt = solve_kkt(model, params, DEFAULT_ACTIVE_TOL)?;
    let scaled: Vec<Vec<f64>> = kkt
        .per_principal_lambda
        .iter()
        .zip(gamma)
        .map(|(l, &g)| l.iter().map(|x| g * x).collect())
        .collect();
    Ok(scaled
        .iter()
        .all(|v| v.iter().zip(&scaled[0]).all(|(x, y)| (x - y).abs() <= tol)))
}

/// Largest deviation between the analytic transfer-block gradients (`+1`
/// for the own cost, `-1` for the matching IR and positivity constraints,
/// `0` elsewhere) and central differences of the functions themselves.
pub fn check_c_block_gradients(
    model: &MarketModel,
    params: &ContractParams,
    step: f64,
) -> Result<f64> {
    model.check_contract(params)?;
    let (m, n) = (model.n_principals(), model.n_agents());
    let mu = stage2::mu(model, &params.a)?;
    let snap = Snapshot::with_efforts(model, &params.a, mu.clone());
    let ir = |p: &ContractParams, i: usize| snap.g[i] - p.c.column(i).sum();
    let pos = |p: &ContractParams, l: usize, i: usize| -(p.c[(l, i)] + snap.kernel[(l, i)]);
    let mut worst: f64 = 0.0;
    for j in 0..m {
        for k in 0..n {
            let mut up = params.clone();
            let mut dn = params.clone();
            let h = step * (1.0 + params.c[(j, k)].abs());
            up.c[(j, k)] += h;
            dn.c[(j, k)] -= h;
            let width = up.c[(j, k)] - dn.c[(j, k)];
            let d_cost =
                (cost_unchecked(model, &up, &mu, j) - cost_unchecked(model, &dn, &mu, j)) / width;
            worst = worst.max((d_cost - 1.0).abs());
            for i in 0..n {
                let d_ir = (ir(&up, i) - ir(&dn, i)) / width;
                let want = if i == k { -1.0 } else { 0.0 };
                worst = worst.max((d_ir - want).abs());
                for l in 0..m {
                    let d_pos = (pos(&up, l, i) - pos(&dn, l, i)) / width;
                    let want = if i == k && l == j { -1.0 } else { 0.0 };
                    worst = worst.max((d_pos - want).abs());
                }
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::super::gne::{solve_gne, GneOptions};
    use super::super::simplex::{sample_simplex, simplex_from_slopes};
    use super::super::testing::market;
    use super::*;

    fn equilibrium(n: usize, m: usize, zeta: f64, init: f64) -> (MarketModel, Matrix) {
        let model = market(n, m, zeta);
        let opts = GneOptions {
            deviations: 64,
            ..GneOptions::default()
        };
        let cand = solve_gne(&model, &Matrix::from_element(m, n, init), &opts).unwrap();
        assert!(cand.converged);
        (model, cand.params.a)
    }

    #[test]
    fn interior_points_have_unit_multipliers() {
        let (model, a) = equilibrium(4, 2, 0.1, 0.5);
        let desc = simplex_from_slopes(&model, &a).unwrap();
        for c in sample_simplex(&desc, 10, 2).unwrap() {
            let p = ContractParams { c, a: a.clone() };
            let kkt = solve_kkt(&model, &p, DEFAULT_ACTIVE_TOL).unwrap();
            assert!(kkt.active_positivity.is_empty());
            for l in &kkt.per_principal_lambda {
                for &x in l {
                    assert!((x - 1.0).abs() < 1e-6, "{x}");
                }
            }
            assert!(
                kkt.stationarity_residual < 1e-8,
                "{}",
                kkt.stationarity_residual
            );
            assert_eq!(kkt.max_abs_nu(), 0.0);
            assert!(kkt.dual_feasible(1e-9));
            assert!(check_noe(&model, &p, &[1.0, 1.0], 1e-6).unwrap());
            assert!(!check_noe(&model, &p, &[1.0, 2.0], 1e-6).unwrap());
        }
    }

    #[test]
    fn vertex_keeps_c_block_stationary() {
        let (model, a) = equilibrium(3, 2, 0.0, 1.0);
        let desc = simplex_from_slopes(&model, &a).unwrap();
        let mut c = desc.centroid();
        // Agent 0 on the vertex where principal 1 pays exactly its floor.
        let v = desc.vertices_for_agent(0);
        c[(0, 0)] = v[0][0];
        c[(1, 0)] = v[0][1];
        let p = ContractParams { c, a };
        let kkt = solve_kkt(&model, &p, DEFAULT_ACTIVE_TOL).unwrap();
        assert_eq!(kkt.active_positivity, vec![(1, 0)]);
        for (j, pm) in kkt.per_principal.iter().enumerate() {
            // Transfer block: 1 - lambda_i - nu_{(j, i)} = 0 row by row.
            for i in 0..3 {
                let r = 1.0 - pm.lambda[i] - pm.nu[(j, i)];
                assert!(r.abs() < 1e-8, "{r}");
            }
        }
        assert!(kkt.stationarity_residual < 1e-8);
    }

    #[test]
    fn single_principal_point() {
        let (model, a) = equilibrium(3, 1, 0.0, 2.0);
        let desc = simplex_from_slopes(&model, &a).unwrap();
        let p = ContractParams {
            c: desc.centroid(),
            a,
        };
        let kkt = solve_kkt(&model, &p, DEFAULT_ACTIVE_TOL).unwrap();
        for &x in &kkt.lambda {
            assert!((x - 1.0).abs() < 1e-6);
        }
        assert!(check_noe(&model, &p, &[3.0], 1e-9).unwrap());
    }

    #[test]
    fn gradients_match_differences() {
        let (model, a) = equilibrium(3, 2, 0.0, 1.0);
        let p = ContractParams {
            c: simplex_from_slopes(&model, &a).unwrap().centroid(),
            a,
        };
        assert!(check_c_block_gradients(&model, &p, 1e-6).unwrap() < 1e-6);
    }

    #[test]
    fn bad_inputs() {
        let (model, a) = equilibrium(3, 2, 0.0, 1.0);
        let p = ContractParams {
            c: simplex_from_slopes(&model, &a).unwrap().centroid(),
            a,
        };
        assert!(check_noe(&model, &p, &[1.0], 1e-6).is_err());
        assert!(check_noe(&model, &p, &[1.0, 0.0], 1e-6).is_err());
        let mut q = p.clone();
        q.c[(0, 0)] -= 1.0;
        assert!(solve_kkt(&model, &q, DEFAULT_ACTIVE_TOL).is_err());
    }
}
