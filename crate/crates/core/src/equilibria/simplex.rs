//! The polytope of transfers extending a slope matrix to equilibria.
//!
//! Per agent `i` it is `{c_i : sum_j c_i^j = g_i(a), c_i^j >= -f^j(a_i^j, mu(a))}`,
//! an `(M-1)`-simplex; the full polytope is the product over agents. The
//! floor uses the expected kernel, i.e. ex-ante positivity.

use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use super::gne::GneCandidate;
use super::Snapshot;
use crate::error::{Error, Result};
use crate::market::{utility_unchecked, ContractParams, MarketModel, Matrix};
use crate::{par, rng, stage2};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplexDescription {
    pub g: Vec<f64>,
    /// `lower_bounds[(j, i)] = -f^j(a_i^j, mu(a))`
    pub lower_bounds: Matrix,
    pub a_ref: Matrix,
}

impl SimplexDescription {
    /// `g_i - sum_j lower_i^j`; negative means agent `i`'s simplex is empty.
    pub fn slack(&self) -> Vec<f64> {
        self.g
            .iter()
            .enumerate()
            .map(|(i, &g)| g - self.lower_bounds.column(i).iter().sum::<f64>())
            .collect()
    }

    pub fn is_feasible(&self) -> bool {
        self.slack().iter().all(|&s| s >= 0.0)
    }

    fn check_feasible(&self) -> Result<()> {
        let slack = self.slack();
        let bad: Vec<usize> = (0..slack.len()).filter(|&i| slack[i] < 0.0).collect();
        if bad.is_empty() {
            return Ok(());
        }
        Err(Error::Infeasible {
            message: format!(
                "transfer polytope is empty for agents {bad:?}: the positivity floors exceed g"
            ),
            slack,
        })
    }

    pub fn n_principals(&self) -> usize {
        self.lower_bounds.nrows()
    }

    pub fn n_agents(&self) -> usize {
        self.lower_bounds.ncols()
    }

    /// Floors plus an equal share of each agent's slack.
    pub fn centroid(&self) -> Matrix {
        let m = self.n_principals();
        let slack = self.slack();
        let mut c = Matrix::from_fn(m, self.n_agents(), |j, i| {
            self.lower_bounds[(j, i)] + slack[i] / m as f64
        });
        if m == 1 {
            c.row_mut(0).copy_from_slice(&self.g);
        }
        c
    }

    /// Vertices of agent `i`'s simplex: all slack on one principal.
    pub fn vertices_for_agent(&self, i: usize) -> Vec<Vec<f64>> {
        let m = self.n_principals();
        let s = self.slack()[i];
        (0..m)
            .map(|v| {
                (0..m)
                    .map(|j| self.lower_bounds[(j, i)] + if j == v { s } else { 0.0 })
                    .collect()
            })
            .collect()
    }

    /// Largest violation of the row-sum equalities and the floors.
    pub fn violation(&self, c: &Matrix) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n_agents() {
            worst = worst.max((c.column(i).sum() - self.g[i]).abs());
            for j in 0..self.n_principals() {
                worst = worst.max(self.lower_bounds[(j, i)] - c[(j, i)]);
            }
        }
        worst
    }
}

/// The transfer polytope for slopes `a`; errors if it is empty.
pub fn simplex_from_slopes(model: &MarketModel, a: &Matrix) -> Result<SimplexDescription> {
    let snap = Snapshot::at(model, a)?;
    let desc = SimplexDescription {
        g: snap.g,
        lower_bounds: -snap.kernel,
        a_ref: a.clone(),
    };
    desc.check_feasible()?;
    Ok(desc)
}

pub fn simplex_of_gne(model: &MarketModel, gne: &GneCandidate) -> Result<SimplexDescription> {
    if !gne.converged {
        return Err(Error::Domain(
            "simplex of equilibria requested for a non-converged candidate".into(),
        ));
    }
    simplex_from_slopes(model, &gne.params.a)
}

/// `k` transfer matrices, uniform on each agent's simplex (normalized
/// exponential spacings). Sample `t` draws from stream `t` of `seed`.
pub fn sample_simplex(desc: &SimplexDescription, k: usize, seed: u64) -> Result<Vec<Matrix>> {
    desc.check_feasible()?;
    if k == 0 {
        return Err(Error::Domain("sample count must be >= 1".into()));
    }
    let (m, n) = (desc.n_principals(), desc.n_agents());
    let slack = desc.slack();
    Ok(par::map_range(k, |t| {
        let mut rng = rng::substream(seed, t as u64);
        let mut c = Matrix::zeros(m, n);
        for i in 0..n {
            if m == 1 {
                c[(0, i)] = desc.g[i];
                continue;
            }
            let spacings: Vec<f64> = (0..m).map(|_| Exp1.sample(&mut rng)).collect();
            let total: f64 = spacings.iter().sum();
            for j in 0..m {
                c[(j, i)] = desc.lower_bounds[(j, i)] + slack[i] * spacings[j] / total;
            }
        }
        c
    }))
}

/// True iff every agent's expected utility at `mu(a)` is within `tol` of zero.
pub fn check_ir_binding(model: &MarketModel, params: &ContractParams, tol: f64) -> Result<bool> {
    model.check_contract(params)?;
    let mu = stage2::mu(model, &params.a)?;
    Ok((0..model.n_agents()).all(|i| utility_unchecked(model, params, &mu, i).abs() <= tol))
}
