//! Generalized Nash equilibria of the first stage.
//!
//! The slopes are found by best-response iteration on the reduced game:
//! with IR binding, principal `j`'s cost in its own slopes is the reduced
//! cost plus a constant, so each best response is a bound-constrained
//! minimization over `a^j >= 0`. Transfers are then picked on the polytope
//! of equilibria for those slopes and the pair is certified by sampling
//! unilateral deviations in `(c^j, a^j)` jointly.
//!
//! The certificate is sampled, not global: it reports the largest cost
//! improvement any sampled feasible deviation achieved.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::simplex::simplex_from_slopes;
use super::{reduced_cost_gradient, Snapshot};
use crate::error::{Error, Result};
use crate::market::{ContractParams, EffortProfile, MarketModel, Matrix};
use crate::{par, rng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BestResponseMode {
    /// Principals update in index order, each seeing the latest slopes.
    #[default]
    GaussSeidel,
    /// All principals respond to the previous sweep simultaneously.
    Jacobi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GneOptions {
    /// Outer stop: max slope change over one sweep.
    pub tol: f64,
    pub max_iters: usize,
    /// Inner stop: sup-norm of the projected gradient.
    pub inner_tol: f64,
    pub inner_max_iters: usize,
    pub mode: BestResponseMode,
    /// Sampled deviations per principal in the certificate.
    pub deviations: usize,
    /// Largest relative slope perturbation tried by the certificate.
    pub deviation_radius: f64,
    pub verify_tol: f64,
    pub feasibility_tol: f64,
    pub seed: u64,
}

impl Default for GneOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iters: 500,
            inner_tol: 1e-10,
            inner_max_iters: 5000,
            mode: BestResponseMode::GaussSeidel,
            deviations: 2048,
            deviation_radius: 1.0,
            verify_tol: 1e-6,
            feasibility_tol: 1e-9,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationCertificate {
    /// Largest `cost(current) - cost(deviation)` over feasible samples.
    pub max_improvement: f64,
    pub worst_principal: Option<usize>,
    pub sampled: usize,
    pub feasible: usize,
}

impl DeviationCertificate {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_improvement <= tol
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GneCandidate {
    pub params: ContractParams,
    pub e_star: EffortProfile,
    pub converged: bool,
    pub br_iterations: usize,
    /// `certificate.max_improvement`, or `+inf` when no certificate was run.
    pub deviation_certificate: f64,
    pub certificate: Option<DeviationCertificate>,
}

const STALL_LIMIT: usize = 50;

/// Projected gradient with backtracking on `a^j >= 0`, warm-started from
/// the current row. Steps follow Barzilai-Borwein lengths.
fn best_response(model: &MarketModel, a: &Matrix, j: usize, opts: &GneOptions) -> Result<Vec<f64>> {
    let n = model.n_agents();
    let zero = Matrix::zeros(a.nrows(), a.ncols());
    let mut work = a.clone();
    let cost = |w: &Matrix| -> Result<f64> { Ok(Snapshot::at(model, w)?.reduced_cost(&zero, j)) };
    let projected = |x: &[f64], g: &[f64]| -> f64 {
        x.iter()
            .zip(g)
            .map(|(&xi, &gi)| ((xi - gi).max(0.0) - xi).abs())
            .fold(0.0, f64::max)
    };

    let mut x: Vec<f64> = a.row(j).iter().copied().collect();
    let mut f = cost(&work)?;
    let mut grad = reduced_cost_gradient(model, &work, j)?;
    let mut step = 1.0;
    // The difference gradient has a noise floor; once neither the iterate
    // nor the best projected gradient moves, further steps only chase it.
    let mut best_pg = f64::INFINITY;
    let mut stalled = 0;
    for _ in 0..opts.inner_max_iters {
        let pg = projected(&x, &grad);
        if pg < opts.inner_tol {
            break;
        }
        if pg < 0.9 * best_pg {
            best_pg = pg;
            stalled = 0;
        } else {
            stalled += 1;
            if stalled >= STALL_LIMIT {
                break;
            }
        }
        let mut t = step;
        let mut accepted = None;
        while t > 1e-20 {
            let trial: Vec<f64> = x
                .iter()
                .zip(&grad)
                .map(|(&xi, &gi)| (xi - t * gi).max(0.0))
                .collect();
            for (k, &v) in trial.iter().enumerate() {
                work[(j, k)] = v;
            }
            let f_trial = cost(&work)?;
            let decrease: f64 = x
                .iter()
                .zip(&trial)
                .zip(&grad)
                .map(|((&xi, &ti), &gi)| gi * (xi - ti))
                .sum();
            if f_trial <= f - 1e-4 * decrease {
                accepted = Some((trial, f_trial, reduced_cost_gradient(model, &work, j)?));
                break;
            }
            // Below the rounding level of the cost only the gradient can tell
            // progress apart from noise.
            if f_trial <= f + 4.0 * f64::EPSILON * (1.0 + f.abs()) {
                let g_trial = reduced_cost_gradient(model, &work, j)?;
                if projected(&trial, &g_trial) < pg {
                    accepted = Some((trial, f_trial, g_trial));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            break;
        };
        let moved = x_new
            .iter()
            .zip(&x)
            .any(|(&p, &q)| (p - q).abs() > 4.0 * f64::EPSILON * (1.0 + q.abs()));
        if !moved {
            break;
        }
        let (mut ss, mut sy) = (0.0, 0.0);
        for k in 0..n {
            let s = x_new[k] - x[k];
            ss += s * s;
            sy += s * (g_new[k] - grad[k]);
        }
        step = if sy > 0.0 {
            (ss / sy).clamp(1e-10, 1e10)
        } else {
            (2.0 * t).min(1e10)
        };
        x = x_new;
        f = f_new;
        grad = g_new;
    }
    Ok(x)
}

/// Slopes that no longer look like they will settle.
fn diverged(a: &Matrix) -> bool {
    a.iter().any(|x| !x.is_finite() || *x > 1e12)
}

pub fn solve_gne(model: &MarketModel, init_a: &Matrix, opts: &GneOptions) -> Result<GneCandidate> {
    model.check_slopes(init_a)?;
    let m = model.n_principals();
    let mut a = init_a.clone();
    let mut converged = false;
    let mut iterations = 0;
    for iter in 1..=opts.max_iters {
        iterations = iter;
        let prev = a.clone();
        match opts.mode {
            BestResponseMode::GaussSeidel => {
                for j in 0..m {
                    let row = best_response(model, &a, j, opts)?;
                    for (k, v) in row.into_iter().enumerate() {
                        a[(j, k)] = v;
                    }
                }
            }
            BestResponseMode::Jacobi => {
                let rows = par::try_map_range(m, |j| best_response(model, &prev, j, opts))?;
                for (j, row) in rows.into_iter().enumerate() {
                    for (k, v) in row.into_iter().enumerate() {
                        a[(j, k)] = v;
                    }
                }
            }
        }
        let change = (&a - &prev).amax();
        if change < opts.tol {
            converged = true;
            break;
        }
        if diverged(&a) {
            break;
        }
    }

    let e_star = EffortProfile(crate::stage2::mu(model, &a)?);
    if !converged {
        // Partial result: keep the slopes, transfers at the centroid if the
        // polytope happens to be nonempty.
        let c = simplex_from_slopes(model, &a)
            .map(|s| s.centroid())
            .unwrap_or_else(|_| Matrix::zeros(a.nrows(), a.ncols()));
        return Ok(GneCandidate {
            params: ContractParams { c, a },
            e_star,
            converged: false,
            br_iterations: iterations,
            deviation_certificate: f64::INFINITY,
            certificate: None,
        });
    }

    let simplex = simplex_from_slopes(model, &a)?;
    let params = ContractParams {
        c: simplex.centroid(),
        a,
    };
    let certificate = verify_gne(model, &params, opts)?;
    Ok(GneCandidate {
        params,
        e_star,
        converged: true,
        br_iterations: iterations,
        deviation_certificate: certificate.max_improvement,
        certificate: Some(certificate),
    })
}

/// Runs [`solve_gne`] from every start and keeps the distinct converged
/// fixed points (slopes within `1e-6`), plus every non-converged run.
/// Nothing is claimed about fixed points no start reached.
pub fn solve_gne_multistart(
    model: &MarketModel,
    inits: &[Matrix],
    opts: &GneOptions,
) -> Result<Vec<GneCandidate>> {
    let mut found: Vec<GneCandidate> = Vec::new();
    for init in inits {
        let cand = solve_gne(model, init, opts)?;
        let duplicate = cand.converged
            && found
                .iter()
                .any(|f| f.converged && (&f.params.a - &cand.params.a).amax() < 1e-6);
        if !duplicate {
            found.push(cand);
        }
    }
    Ok(found)
}

const RADII: [f64; 4] = [1e-4, 1e-2, 1e-1, 1.0];

/// Sampled unilateral-deviation certificate for `params`.
///
/// For each principal, deviations mix: transfer-only moves; slope moves at
/// several radii with the cheapest transfers that keep IR and positivity;
/// and the same with the transfers jittered up or in both directions.
/// Deviations leaving the feasible set are discarded.
pub fn verify_gne(
    model: &MarketModel,
    params: &ContractParams,
    opts: &GneOptions,
) -> Result<DeviationCertificate> {
    model.check_contract(params)?;
    let (m, n) = (model.n_principals(), model.n_agents());
    let base = Snapshot::at(model, &params.a)?;
    let base_cost: Vec<f64> = (0..m).map(|j| base.cost(&params.c, j)).collect();
    let per_principal = opts.deviations.max(1);
    let tol = opts.feasibility_tol;

    let outcomes = par::try_map_range(m * per_principal, |t| -> Result<Option<(usize, f64)>> {
        let (j, s) = (t / per_principal, t % per_principal);
        let mut rng = rng::substream(opts.seed, rng::stream_id(j, s));
        let mut dev = params.clone();
        let kind = s % 4;
        if kind != 0 {
            let radius = opts.deviation_radius * RADII[rng.random_range(0..RADII.len())];
            let mut moved = false;
            for k in 0..n {
                if rng.random::<bool>() || (k == n - 1 && !moved) {
                    let x = params.a[(j, k)];
                    dev.a[(j, k)] = (x + radius * (1.0 + x) * rng.random_range(-1.0..1.0)).max(0.0);
                    moved = true;
                }
            }
        }
        let moved_snap;
        let snap = if kind == 0 {
            &base
        } else {
            moved_snap = Snapshot::at(model, &dev.a)?;
            &moved_snap
        };
        let scale = opts.deviation_radius * RADII[rng.random_range(0..RADII.len())];
        for i in 0..n {
            let others: f64 = (0..m).filter(|&k| k != j).map(|k| params.c[(k, i)]).sum();
            let cheapest = (snap.g[i] - others).max(-snap.kernel[(j, i)]);
            let jitter = scale * (1.0 + cheapest.abs());
            dev.c[(j, i)] = match kind {
                0 => params.c[(j, i)] + jitter * rng.random_range(-1.0..1.0),
                1 => cheapest,
                2 => cheapest + jitter * rng.random::<f64>(),
                _ => cheapest + jitter * rng.random_range(-1.0..1.0),
            };
        }
        if !snap.feasible(&dev.c, tol) {
            return Ok(None);
        }
        Ok(Some((j, base_cost[j] - snap.cost(&dev.c, j))))
    })?;

    let mut cert = DeviationCertificate {
        max_improvement: f64::NEG_INFINITY,
        worst_principal: None,
        sampled: m * per_principal,
        feasible: 0,
    };
    for (j, gain) in outcomes.into_iter().flatten() {
        cert.feasible += 1;
        if gain > cert.max_improvement {
            cert.max_improvement = gain;
            cert.worst_principal = Some(j);
        }
    }
    if cert.feasible == 0 {
        return Err(Error::Structure(
            "no sampled deviation was feasible; certificate is vacuous".into(),
        ));
    }
    Ok(cert)
}
