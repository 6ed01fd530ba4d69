//! First-stage analysis: reduced principal costs, generalized Nash
//! equilibria in the slopes, the polytope of transfers that extends a slope
//! matrix to equilibria, and the variational / normalized refinements.
//!
//! At any equilibrium the individual rationality constraints bind, so the
//! transfers received by agent `i` sum to
//! `g_i(a) = mu(a)_i - sum_j f^j(a_i^j, mu(a))`. Substituting that back
//! leaves each principal's cost depending on its own transfers only through
//! a constant, which is what the solver exploits.

mod gne;
mod kkt;
mod simplex;
mod variational;

pub use gne::{
    solve_gne, solve_gne_multistart, verify_gne, BestResponseMode, DeviationCertificate,
    GneCandidate, GneOptions,
};
pub use kkt::{
    check_c_block_gradients, check_noe, solve_kkt, KktResult, PrincipalMultipliers,
    DEFAULT_ACTIVE_TOL,
};
pub use simplex::{
    check_ir_binding, sample_simplex, simplex_from_slopes, simplex_of_gne, SimplexDescription,
};
pub use variational::{check_ve_on_simplex, pseudo_gradient, ve_inner_product};

use crate::error::Result;
use crate::market::{MarketModel, Matrix};
use crate::stage2;

/// Relative finite-difference step for derivatives with respect to a slope.
pub const SLOPE_FD_STEP: f64 = 1e-5;

/// Quantities of the induced second stage at one slope matrix.
#[derive(Clone, Debug)]
pub(crate) struct Snapshot {
    pub mu: Vec<f64>,
    /// `kernel[(j, i)] = f^j(a_i^j, mu(a))`
    pub kernel: Matrix,
    /// `value[j] = v^j(mu(a))`
    pub value: Vec<f64>,
    pub g: Vec<f64>,
}

impl Snapshot {
    pub fn at(model: &MarketModel, a: &Matrix) -> Result<Self> {
        let mu = stage2::mu(model, a)?;
        Ok(Self::with_efforts(model, a, mu))
    }

    pub fn with_efforts(model: &MarketModel, a: &Matrix, mu: Vec<f64>) -> Self {
        let kernel = model.kernel_matrix(a, &mu);
        let value = (0..model.n_principals())
            .map(|j| model.value(j, &mu))
            .collect();
        let g = (0..model.n_agents())
            .map(|i| mu[i] - kernel.column(i).iter().sum::<f64>())
            .collect();
        Self {
            mu,
            kernel,
            value,
            g,
        }
    }

    /// Principal `j`'s cost with its own transfers set to bind IR, given the
    /// others' transfers `c` (row `j` ignored).
    pub fn reduced_cost(&self, c: &Matrix, j: usize) -> f64 {
        let n = self.g.len();
        let mut total = 0.0;
        for i in 0..n {
            let others: f64 = (0..c.nrows()).filter(|&k| k != j).map(|k| c[(k, i)]).sum();
            total += self.g[i] - others + self.kernel[(j, i)];
        }
        total - self.value[j]
    }

    /// Principal `j`'s expected cost under transfers `c` at these efforts.
    pub fn cost(&self, c: &Matrix, j: usize) -> f64 {
        (0..self.g.len())
            .map(|i| c[(j, i)] + self.kernel[(j, i)])
            .sum::<f64>()
            - self.value[j]
    }

    /// IR and positivity at these efforts, each within `tol`.
    pub fn feasible(&self, c: &Matrix, tol: f64) -> bool {
        let pay = c + &self.kernel;
        pay.iter().all(|&p| p >= -tol)
            && (0..self.g.len()).all(|i| pay.column(i).sum() - self.mu[i] >= -tol)
    }

    /// `sum_i f^j(a_i^j, mu) - v^j(mu)`: the slope-dependent part of
    /// principal `j`'s cost at fixed transfers.
    pub fn slope_cost(&self, j: usize) -> f64 {
        self.kernel.row(j).iter().sum::<f64>() - self.value[j]
    }
}

/// Finite-difference stencil for `d/da_k^j` of anything computed from a
/// [`Snapshot`]. Central with step `1e-5 (1 + a)`; second-order forward
/// near the `a >= 0` boundary, where the central point would be negative.
pub(crate) struct Stencil {
    terms: Vec<(f64, Snapshot)>,
}

impl Stencil {
    pub fn new(model: &MarketModel, a: &Matrix, j: usize, k: usize) -> Result<Self> {
        let x = a[(j, k)];
        let h = SLOPE_FD_STEP * (1.0 + x.abs());
        let at = |t: f64| -> Result<Snapshot> {
            let mut shifted = a.clone();
            shifted[(j, k)] = t;
            Snapshot::at(model, &shifted)
        };
        let terms = if x - h >= 0.0 {
            vec![(0.5 / h, at(x + h)?), (-0.5 / h, at(x - h)?)]
        } else {
            vec![
                (-1.5 / h, at(x)?),
                (2.0 / h, at(x + h)?),
                (-0.5 / h, at(x + 2.0 * h)?),
            ]
        };
        Ok(Self { terms })
    }

    pub fn apply(&self, q: impl Fn(&Snapshot) -> f64) -> f64 {
        self.terms.iter().map(|(w, s)| w * q(s)).sum()
    }
}

/// `g_i(a) = mu(a)_i - sum_j f^j(a_i^j, mu(a))`.
pub fn compute_g(model: &MarketModel, a: &Matrix) -> Result<Vec<f64>> {
    Ok(Snapshot::at(model, a)?.g)
}

/// Principal `j`'s expected cost after substituting binding IR:
/// `sum_i (g_i(a) - sum_{k != j} c_i^k + f^j(a_i^j, mu(a))) - v^j(mu(a))`.
/// Only the rows `k != j` of `others_c` are read.
pub fn reduced_principal_cost(
    model: &MarketModel,
    a: &Matrix,
    others_c: &Matrix,
    j: usize,
) -> Result<f64> {
    model.check_principal(j)?;
    if others_c.shape() != a.shape() {
        return Err(crate::Error::Domain(format!(
            "transfer matrix is {:?}, slopes are {:?}",
            others_c.shape(),
            a.shape()
        )));
    }
    Ok(Snapshot::at(model, a)?.reduced_cost(others_c, j))
}

/// Gradient of [`reduced_principal_cost`] in principal `j`'s own slopes.
pub(crate) fn reduced_cost_gradient(model: &MarketModel, a: &Matrix, j: usize) -> Result<Vec<f64>> {
    let zero = Matrix::zeros(a.nrows(), a.ncols());
    (0..model.n_agents())
        .map(|k| Ok(Stencil::new(model, a, j, k)?.apply(|s| s.reduced_cost(&zero, j))))
        .collect()
}

#[cfg(test)]
pub(crate) mod testing {
    use crate::datamarket::{bind_model, DataMarketSpec};
    use crate::market::MarketModel;

    pub fn market(n: usize, m: usize, zeta: f64) -> MarketModel {
        let z = (0..m)
            .map(|j| (0..m).map(|k| if j == k { 0.0 } else { zeta }).collect())
            .collect();
        bind_model(&DataMarketSpec::new(n, m).with_zeta(z)).unwrap()
    }
}
