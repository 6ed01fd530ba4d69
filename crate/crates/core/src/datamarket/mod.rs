//! Data market with effort-averse sources.
//!
//! Agent `i` reports `y_i = phi + eps_i` with zero-mean noise of variance
//! `sigma^2(e_i)`. Principals pay `c_i^j - a_i^j (y_i - phi_{-i})^2`, where
//! `phi_{-i}` is the leave-one-out mean of the other reports, and each one
//! estimates `phi` by the mean of all reports. All sources sample the same
//! location, so the expected squared leave-one-out error is exactly
//! `sigma^2(e_i) + tau_i(e_{-i})` with `tau_i = sum_{k != i} sigma^2(e_k) / (N-1)^2`.

mod simulate;

pub use simulate::{
    payment_means, simulate_market, AnalyticExpectations, McEstimate, SimulationReport,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{
    EffortProfile, EffortRule, MarketModel, DEFAULT_EFFORT_CEILING, DEFAULT_EFFORT_FLOOR,
};

/// Effort-to-variance map of a data source.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum VarianceModel {
    /// `1 / e`
    #[default]
    Inverse,
    /// `e^-exponent`
    InversePower { exponent: f64 },
    /// `exp(-rate e)`
    Exponential { rate: f64 },
}

impl VarianceModel {
    #[inline]
    pub fn variance(&self, effort: f64) -> f64 {
        match *self {
            VarianceModel::Inverse => 1.0 / effort,
            VarianceModel::InversePower { exponent } => effort.powf(-exponent),
            VarianceModel::Exponential { rate } => (-rate * effort).exp(),
        }
    }

    fn check(&self) -> Result<()> {
        match *self {
            VarianceModel::Inverse => Ok(()),
            VarianceModel::InversePower { exponent: p } if p > 0.0 && p.is_finite() => Ok(()),
            VarianceModel::Exponential { rate: r } if r > 0.0 && r.is_finite() => Ok(()),
            other => Err(Error::Config(format!(
                "variance model {other:?} needs a positive finite parameter"
            ))),
        }
    }
}

/// Zero-mean noise family; draws are scaled to the requested variance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseFamily {
    #[default]
    Gaussian,
    Uniform,
}

fn default_phi() -> f64 {
    1.0
}

fn default_floor() -> f64 {
    DEFAULT_EFFORT_FLOOR
}

fn default_ceiling() -> f64 {
    DEFAULT_EFFORT_CEILING
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataMarketSpec {
    pub n_agents: usize,
    pub n_principals: usize,
    #[serde(default)]
    pub variance: VarianceModel,
    /// True value at the evaluation point.
    #[serde(default = "default_phi")]
    pub phi: f64,
    /// `zeta[j][k]`: weight principal `j` puts on competitor `k`'s estimation
    /// loss. Empty means all zeros.
    #[serde(default)]
    pub zeta: Vec<Vec<f64>>,
    #[serde(default)]
    pub noise: NoiseFamily,
    #[serde(default = "default_floor")]
    pub effort_floor: f64,
    #[serde(default = "default_ceiling")]
    pub effort_ceiling: f64,
}

impl DataMarketSpec {
    pub fn new(n_agents: usize, n_principals: usize) -> Self {
        Self {
            n_agents,
            n_principals,
            variance: VarianceModel::Inverse,
            phi: 1.0,
            zeta: Vec::new(),
            noise: NoiseFamily::Gaussian,
            effort_floor: DEFAULT_EFFORT_FLOOR,
            effort_ceiling: DEFAULT_EFFORT_CEILING,
        }
    }

    pub fn with_zeta(mut self, zeta: Vec<Vec<f64>>) -> Self {
        self.zeta = zeta;
        self
    }

    pub fn with_variance(mut self, variance: VarianceModel) -> Self {
        self.variance = variance;
        self
    }

    /// `zeta_k^j`, the weight of competitor `k` in principal `j`'s value.
    pub fn zeta(&self, j: usize, k: usize) -> f64 {
        self.zeta
            .get(j)
            .and_then(|row| row.get(k))
            .copied()
            .unwrap_or(0.0)
    }

    /// `sum_{k != j} zeta_k^j`.
    pub fn competitor_weight(&self, j: usize) -> f64 {
        (0..self.n_principals)
            .filter(|&k| k != j)
            .map(|k| self.zeta(j, k))
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 || self.n_principals == 0 {
            return Err(Error::Config(
                "market.n_agents and market.n_principals must be >= 1".into(),
            ));
        }
        if !self.phi.is_finite() {
            return Err(Error::Config("market.phi must be finite".into()));
        }
        if !(self.effort_floor > 0.0 && self.effort_ceiling > self.effort_floor)
            || !self.effort_ceiling.is_finite()
        {
            return Err(Error::Config(format!(
                "market effort box [{}, {}] must satisfy 0 < floor < ceiling < inf",
                self.effort_floor, self.effort_ceiling
            )));
        }
        if !self.zeta.is_empty() {
            if self.zeta.len() != self.n_principals
                || self.zeta.iter().any(|r| r.len() != self.n_principals)
            {
                return Err(Error::Config(format!(
                    "market.zeta must be {0}x{0}",
                    self.n_principals
                )));
            }
            for (j, row) in self.zeta.iter().enumerate() {
                for (k, &z) in row.iter().enumerate() {
                    if !z.is_finite() || z < 0.0 {
                        return Err(Error::Config(format!(
                            "market.zeta[{j}][{k}] = {z} must be finite and nonnegative"
                        )));
                    }
                    if j == k && z != 0.0 {
                        return Err(Error::Config(format!(
                            "market.zeta[{j}][{j}] = {z}: diagonal must be zero"
                        )));
                    }
                }
            }
        }
        self.variance.check()?;
        self.check_variance_shape()
    }

    /// Strictly decreasing and convex on sampled points of the effort box.
    fn check_variance_shape(&self) -> Result<()> {
        let lo = self.effort_floor.max(1e-3);
        let hi = self.effort_ceiling.min(1e3).max(lo * 1.01);
        let pts = 40;
        let xs: Vec<f64> = (0..pts)
            .map(|p| lo * (hi / lo).powf(p as f64 / (pts - 1) as f64))
            .collect();
        for w in xs.windows(3) {
            let (v0, v1, v2) = (
                self.variance.variance(w[0]),
                self.variance.variance(w[1]),
                self.variance.variance(w[2]),
            );
            if !(v1 < v0 || (v1 == 0.0 && v0 == 0.0)) {
                return Err(Error::Config(format!(
                    "variance model must be strictly decreasing, fails near e = {}",
                    w[1]
                )));
            }
            // Convexity through the secant on uneven spacing.
            let t = (w[1] - w[0]) / (w[2] - w[0]);
            if v1 > (1.0 - t) * v0 + t * v2 + 1e-12 * v0.abs() {
                return Err(Error::Config(format!(
                    "variance model must be convex, fails near e = {}",
                    w[1]
                )));
            }
        }
        Ok(())
    }

    fn check_efforts(&self, e: &[f64]) -> Result<()> {
        if e.len() != self.n_agents {
            return Err(Error::Domain(format!(
                "effort profile has length {}, expected {}",
                e.len(),
                self.n_agents
            )));
        }
        if let Some((i, x)) = e
            .iter()
            .enumerate()
            .find(|(_, &x)| !(x >= self.effort_floor && x <= self.effort_ceiling))
        {
            return Err(Error::Domain(format!(
                "effort e[{i}] = {x} outside [{}, {}]",
                self.effort_floor, self.effort_ceiling
            )));
        }
        Ok(())
    }
}

/// Mean of every report except agent `i`'s.
pub fn loo_estimator(y: &[f64], i: usize) -> Result<f64> {
    if y.len() < 2 {
        return Err(Error::Structure(
            "leave-one-out estimator needs at least two reports".into(),
        ));
    }
    if i >= y.len() {
        return Err(Error::index("agent", i, y.len()));
    }
    Ok(loo_unchecked(y, i))
}

#[inline]
pub(crate) fn loo_unchecked(y: &[f64], i: usize) -> f64 {
    let total: f64 = y
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != i)
        .map(|(_, v)| v)
        .sum();
    total / (y.len() - 1) as f64
}

/// Variance of the leave-one-out estimate for agent `i`, which only depends
/// on the other agents' efforts.
pub(crate) fn loo_variance(variance: &VarianceModel, e: &[f64], i: usize) -> f64 {
    let n = e.len();
    let total: f64 = e
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != i)
        .map(|(_, &x)| variance.variance(x))
        .sum();
    total / ((n - 1) * (n - 1)) as f64
}

/// Expected squared error of the full-mean estimator, `sum_i sigma^2(e_i) / N^2`.
pub(crate) fn mean_estimator_loss(variance: &VarianceModel, e: &[f64]) -> f64 {
    let n = e.len() as f64;
    e.iter().map(|&x| variance.variance(x)).sum::<f64>() / (n * n)
}

/// `-a_ij (sigma^2(e_i) + tau_i(e_{-i}))`.
pub fn analytic_payment_kernel(
    spec: &DataMarketSpec,
    a_ij: f64,
    e: &EffortProfile,
    i: usize,
) -> Result<f64> {
    if spec.n_agents < 2 {
        return Err(Error::Structure(
            "leave-one-out payments need at least two agents".into(),
        ));
    }
    if !(a_ij >= 0.0 && a_ij.is_finite()) {
        return Err(Error::Domain(format!(
            "slope {a_ij} must be finite and nonnegative"
        )));
    }
    if i >= spec.n_agents {
        return Err(Error::index("agent", i, spec.n_agents));
    }
    spec.check_efforts(e)?;
    Ok(-a_ij * (spec.variance.variance(e[i]) + loo_variance(&spec.variance, e, i)))
}

/// `-(1 - sum_{k != j} zeta_k^j) sum_i sigma^2(e_i) / N^2`: every principal
/// runs the same estimator on the same data, so own and competitor losses
/// share one expectation.
pub fn analytic_value(spec: &DataMarketSpec, e: &EffortProfile, j: usize) -> Result<f64> {
    if j >= spec.n_principals {
        return Err(Error::index("principal", j, spec.n_principals));
    }
    spec.check_efforts(e)?;
    let loss = mean_estimator_loss(&spec.variance, e);
    Ok(-loss + spec.competitor_weight(j) * loss)
}

/// Adapts the closed forms to [`MarketModel`]. The inverse variance model
/// gets the `sqrt(sum_j a_i^j)` effort rule.
pub fn bind_model(spec: &DataMarketSpec) -> Result<MarketModel> {
    spec.validate()?;
    if spec.n_agents < 2 {
        return Err(Error::Structure(
            "leave-one-out payments need at least two agents".into(),
        ));
    }
    let variance = spec.variance;
    let weights: Vec<f64> = (0..spec.n_principals)
        .map(|j| spec.competitor_weight(j))
        .collect();
    let rule = match variance {
        VarianceModel::Inverse => EffortRule::SqrtRowSum,
        VarianceModel::InversePower { exponent } => EffortRule::PowerLaw { exponent },
        VarianceModel::Exponential { rate } => EffortRule::Exponential { rate },
    };
    let model = MarketModel::new(spec.n_agents, spec.n_principals)?
        .with_effort_box(spec.effort_floor, spec.effort_ceiling)?
        .with_kernel(move |_j: usize, i: usize, a: f64, e: &[f64]| {
            -a * (variance.variance(e[i]) + loo_variance(&variance, e, i))
        })
        .with_value(move |j: usize, e: &[f64]| {
            -(1.0 - weights[j]) * mean_estimator_loss(&variance, e)
        })
        .with_effort_rule(rule);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::Matrix;
    use crate::stage2;
    use approx::assert_relative_eq;

    #[test]
    fn loo_examples() {
        assert_eq!(loo_estimator(&[3.0, 3.0, 3.0], 0).unwrap(), 3.0);
        assert_eq!(loo_estimator(&[1.0, 5.0], 0).unwrap(), 5.0);
        assert_eq!(loo_estimator(&[2.0, 4.0, 9.0], 2).unwrap(), 3.0);
        assert!(matches!(loo_estimator(&[1.0], 0), Err(Error::Structure(_))));
        assert!(matches!(
            loo_estimator(&[1.0, 2.0], 2),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn kernel_examples() {
        let spec = DataMarketSpec::new(2, 2);
        let e = EffortProfile(vec![2.0, 2.0]);
        assert_eq!(analytic_payment_kernel(&spec, 0.0, &e, 0).unwrap(), 0.0);
        assert_relative_eq!(analytic_payment_kernel(&spec, 2.0, &e, 0).unwrap(), -2.0);
        let spec = DataMarketSpec::new(3, 1);
        let e = EffortProfile(vec![1.0; 3]);
        assert_relative_eq!(analytic_payment_kernel(&spec, 1.0, &e, 1).unwrap(), -1.5);
        assert!(analytic_payment_kernel(&spec, -1.0, &e, 1).is_err());
        assert!(matches!(
            analytic_payment_kernel(
                &DataMarketSpec::new(1, 1),
                1.0,
                &EffortProfile(vec![1.0]),
                0
            ),
            Err(Error::Structure(_))
        ));
    }

    #[test]
    fn value_examples() {
        let spec = DataMarketSpec::new(2, 2);
        let e = EffortProfile(vec![2.0, 2.0]);
        assert_relative_eq!(analytic_value(&spec, &e, 0).unwrap(), -0.25);

        let spec = DataMarketSpec::new(2, 2).with_zeta(vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(analytic_value(&spec, &e, 1).unwrap(), 0.0);

        let spec = DataMarketSpec::new(1, 1);
        assert_relative_eq!(
            analytic_value(&spec, &EffortProfile(vec![4.0]), 0).unwrap(),
            -0.25
        );
    }

    #[test]
    fn value_nondecreasing_in_zeta() {
        let e = EffortProfile(vec![0.5, 1.0, 3.0]);
        let mut prev = f64::NEG_INFINITY;
        for step in 0..10 {
            let z = 0.2 * step as f64;
            let spec = DataMarketSpec::new(3, 3).with_zeta(vec![
                vec![0.0, z, 0.1],
                vec![0.3, 0.0, 0.0],
                vec![0.0, 0.0, 0.0],
            ]);
            let v = analytic_value(&spec, &e, 0).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn validation() {
        assert!(DataMarketSpec::new(3, 2).validate().is_ok());
        let bad = DataMarketSpec::new(2, 2).with_zeta(vec![vec![0.5, 0.0], vec![0.0, 0.0]]);
        assert!(bad.validate().is_err());
        let bad = DataMarketSpec::new(2, 2).with_zeta(vec![vec![0.0, -1.0], vec![0.0, 0.0]]);
        assert!(bad.validate().is_err());
        let bad = DataMarketSpec::new(2, 2).with_zeta(vec![vec![0.0]]);
        assert!(bad.validate().is_err());
        let bad =
            DataMarketSpec::new(2, 2).with_variance(VarianceModel::Exponential { rate: -1.0 });
        assert!(bad.validate().is_err());
        assert!(bind_model(&DataMarketSpec::new(1, 1)).is_err());
    }

    #[test]
    fn bound_model_efforts() {
        let model = bind_model(&DataMarketSpec::new(2, 2)).unwrap();
        assert_eq!(model.effort_rule(), EffortRule::SqrtRowSum);
        let sol = stage2::solve_efforts(&model, &Matrix::from_element(2, 2, 2.0)).unwrap();
        assert_eq!(sol.e_star.0, vec![2.0, 2.0]);

        let spec =
            DataMarketSpec::new(3, 2).with_variance(VarianceModel::Exponential { rate: 1.0 });
        let model = bind_model(&spec).unwrap();
        assert_eq!(model.effort_rule(), EffortRule::Exponential { rate: 1.0 });
        let a = Matrix::from_row_slice(2, 3, &[2.0, 1.0, 0.2, 3.0, 0.5, 0.1]);
        // A exp(-x) = 1 -> x = ln A, floor when A <= 1; the generic solver
        // must land on the same profile.
        let numeric = model.clone().with_effort_rule(EffortRule::Numeric);
        for m in [&model, &numeric] {
            let sol = stage2::solve_efforts(m, &a).unwrap();
            assert!((sol.e_star[0] - 5f64.ln()).abs() < 1e-7);
            assert!((sol.e_star[1] - 1.5f64.ln()).abs() < 1e-7);
            assert_eq!(sol.e_star[2], m.effort_floor());
            assert!(stage2::verify_dominance(m, &a, &sol, 300, 9).unwrap());
        }

        let spec =
            DataMarketSpec::new(2, 1).with_variance(VarianceModel::InversePower { exponent: 2.0 });
        let model = bind_model(&spec).unwrap();
        let numeric = model.clone().with_effort_rule(EffortRule::Numeric);
        let a = Matrix::from_row_slice(1, 2, &[4.0, 0.3]);
        let closed = stage2::mu(&model, &a).unwrap();
        let generic = stage2::mu(&numeric, &a).unwrap();
        // 2 A x^-3 = 1 -> x = (2 A)^(1/3)
        assert_relative_eq!(closed[0], 2.0, max_relative = 1e-14);
        for i in 0..2 {
            assert!((closed[i] - generic[i]).abs() < 1e-7);
        }

        // zeta = 0: value is the plain own-estimation loss.
        let model = bind_model(&DataMarketSpec::new(2, 2)).unwrap();
        assert_relative_eq!(model.value(0, &[2.0, 2.0]), -0.25);
    }
}
