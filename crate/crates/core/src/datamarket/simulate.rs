//! Monte-Carlo oracle for the data market's expectations.
//!
//! Samples are processed in fixed-size chunks; chunk `k` draws from ChaCha
//! stream `k` of the master seed and the per-chunk sums are merged in chunk
//! order, so a report depends only on `(seed, n_samples)`. Sums are taken
//! relative to the first sample's realization, which makes constant
//! quantities come back exact with zero standard error.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{loo_variance, mean_estimator_loss, DataMarketSpec, NoiseFamily};
use crate::error::{Error, Result};
use crate::market::{ContractParams, EffortProfile, Matrix};
use crate::{par, rng};

const CHUNK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

impl McEstimate {
    /// `|mean - expected|` in standard errors (0 when both are exact).
    pub fn z_score(&self, expected: f64) -> f64 {
        let diff = (self.mean - expected).abs();
        if self.std_error > 0.0 {
            diff / self.std_error
        } else if diff <= 1e-12 * (1.0 + expected.abs()) {
            0.0
        } else {
            f64::INFINITY
        }
    }

    pub fn agrees(&self, expected: f64, n_se: f64) -> bool {
        self.z_score(expected) <= n_se
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub n_samples: usize,
    pub seed: u64,
    /// `payments[j][i]`: realized `c_i^j - a_i^j (y_i - phi_{-i})^2`.
    pub payments: Vec<Vec<McEstimate>>,
    pub costs: Vec<McEstimate>,
    pub utilities: Vec<McEstimate>,
    /// `(phi - phi^j)^2` per principal; all principals share one draw.
    pub estimation_losses: Vec<McEstimate>,
    /// `(y_i - phi_{-i})^2` per agent.
    pub loo_sq_errors: Vec<McEstimate>,
    /// `eps_i (phi_{-i} - phi)`, zero in expectation.
    pub loo_cross: Vec<McEstimate>,
}

/// Analytic expectations laid out like [`SimulationReport`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticExpectations {
    pub payments: Vec<Vec<f64>>,
    pub costs: Vec<f64>,
    pub utilities: Vec<f64>,
    pub estimation_losses: Vec<f64>,
    pub loo_sq_errors: Vec<f64>,
    pub loo_cross: Vec<f64>,
}

impl AnalyticExpectations {
    pub fn compute(
        spec: &DataMarketSpec,
        params: &ContractParams,
        e: &EffortProfile,
    ) -> Result<Self> {
        check_inputs(spec, params, e)?;
        let (m, n) = (spec.n_principals, spec.n_agents);
        let v = &spec.variance;
        let loo_sq: Vec<f64> = (0..n)
            .map(|i| v.variance(e[i]) + loo_variance(v, e, i))
            .collect();
        let payments: Vec<Vec<f64>> = (0..m)
            .map(|j| {
                (0..n)
                    .map(|i| params.c[(j, i)] - params.a[(j, i)] * loo_sq[i])
                    .collect()
            })
            .collect();
        let loss = mean_estimator_loss(v, e);
        let costs = (0..m)
            .map(|j| payments[j].iter().sum::<f64>() + loss - spec.competitor_weight(j) * loss)
            .collect();
        let utilities = (0..n)
            .map(|i| (0..m).map(|j| payments[j][i]).sum::<f64>() - e[i])
            .collect();
        Ok(Self {
            payments,
            costs,
            utilities,
            estimation_losses: vec![loss; m],
            loo_sq_errors: loo_sq,
            loo_cross: vec![0.0; n],
        })
    }
}

fn check_inputs(spec: &DataMarketSpec, params: &ContractParams, e: &EffortProfile) -> Result<()> {
    spec.validate()?;
    if spec.n_agents < 2 {
        return Err(Error::Structure(
            "leave-one-out payments need at least two agents".into(),
        ));
    }
    let shape = (spec.n_principals, spec.n_agents);
    if params.c.shape() != shape || params.a.shape() != shape {
        return Err(Error::Domain(format!(
            "contract matrices must be {}x{}",
            shape.0, shape.1
        )));
    }
    if params.a.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
        return Err(Error::Domain(
            "slopes must be finite and nonnegative".into(),
        ));
    }
    spec.check_efforts(e)
}

/// Flat layout of the per-sample quantities.
struct Layout {
    m: usize,
    n: usize,
}

impl Layout {
    fn len(&self) -> usize {
        self.m * self.n + 2 * self.m + 3 * self.n
    }
    fn payment(&self, j: usize, i: usize) -> usize {
        j * self.n + i
    }
    fn cost(&self, j: usize) -> usize {
        self.m * self.n + j
    }
    fn loss(&self, j: usize) -> usize {
        self.m * self.n + self.m + j
    }
    fn utility(&self, i: usize) -> usize {
        self.m * self.n + 2 * self.m + i
    }
    fn loo_sq(&self, i: usize) -> usize {
        self.m * self.n + 2 * self.m + self.n + i
    }
    fn cross(&self, i: usize) -> usize {
        self.m * self.n + 2 * self.m + 2 * self.n + i
    }
}

struct Sampler<'a> {
    spec: &'a DataMarketSpec,
    params: &'a ContractParams,
    efforts: &'a [f64],
    sigma: Vec<f64>,
    weights: Vec<f64>,
    layout: Layout,
}

impl Sampler<'_> {
    fn standard_noise<R: Rng>(&self, rng: &mut R) -> f64 {
        match self.spec.noise {
            NoiseFamily::Gaussian => rng.sample(StandardNormal),
            NoiseFamily::Uniform => 3f64.sqrt() * rng.random_range(-1.0..1.0),
        }
    }

    /// One market realization written into `out`.
    fn draw<R: Rng>(&self, rng: &mut R, eps: &mut [f64], out: &mut [f64]) {
        let (m, n) = (self.layout.m, self.layout.n);
        let phi = self.spec.phi;
        for (i, slot) in eps.iter_mut().enumerate() {
            *slot = self.sigma[i] * self.standard_noise(rng);
        }
        let total: f64 = eps.iter().map(|x| phi + x).sum();
        let estimate = total / n as f64;
        let loss = (phi - estimate) * (phi - estimate);
        for i in 0..n {
            let y = phi + eps[i];
            let loo = (total - y) / (n - 1) as f64;
            let sq = (y - loo) * (y - loo);
            out[self.layout.loo_sq(i)] = sq;
            out[self.layout.cross(i)] = eps[i] * (loo - phi);
            let mut paid = 0.0;
            for j in 0..m {
                let p = self.params.c[(j, i)] - self.params.a[(j, i)] * sq;
                out[self.layout.payment(j, i)] = p;
                paid += p;
            }
            out[self.layout.utility(i)] = paid - self.efforts[i];
        }
        for j in 0..m {
            let paid: f64 = (0..n).map(|i| out[self.layout.payment(j, i)]).sum();
            let value = -loss + self.weights[j] * loss;
            out[self.layout.cost(j)] = paid - value;
            out[self.layout.loss(j)] = loss;
        }
    }
}

pub fn simulate_market(
    spec: &DataMarketSpec,
    params: &ContractParams,
    e: &EffortProfile,
    n_samples: usize,
    seed: u64,
) -> Result<SimulationReport> {
    check_inputs(spec, params, e)?;
    if n_samples < 2 {
        return Err(Error::Domain(format!(
            "n_samples must be >= 2, got {n_samples}"
        )));
    }
    let (m, n) = (spec.n_principals, spec.n_agents);
    let sampler = Sampler {
        spec,
        params,
        efforts: e.as_slice(),
        sigma: e
            .iter()
            .map(|&x| spec.variance.variance(x).sqrt())
            .collect(),
        weights: (0..m).map(|j| spec.competitor_weight(j)).collect(),
        layout: Layout { m, n },
    };
    let q = sampler.layout.len();

    let mut shift = vec![0.0; q];
    sampler.draw(&mut rng::substream(seed, 0), &mut vec![0.0; n], &mut shift);

    let n_chunks = n_samples.div_ceil(CHUNK);
    let partials: Vec<(Vec<f64>, Vec<f64>)> = par::map_range(n_chunks, |k| {
        let mut rng = rng::substream(seed, k as u64);
        let count = CHUNK.min(n_samples - k * CHUNK);
        let mut eps = vec![0.0; n];
        let mut buf = vec![0.0; q];
        let mut sum = vec![0.0; q];
        let mut sum_sq = vec![0.0; q];
        for _ in 0..count {
            sampler.draw(&mut rng, &mut eps, &mut buf);
            for (t, &x) in buf.iter().enumerate() {
                let d = x - shift[t];
                sum[t] += d;
                sum_sq[t] += d * d;
            }
        }
        (sum, sum_sq)
    });

    let mut sum = vec![0.0; q];
    let mut sum_sq = vec![0.0; q];
    for (s, s2) in &partials {
        for t in 0..q {
            sum[t] += s[t];
            sum_sq[t] += s2[t];
        }
    }
    let count = n_samples as f64;
    let estimate = |t: usize| {
        let mean_d = sum[t] / count;
        let var = ((sum_sq[t] - sum[t] * mean_d) / (count - 1.0)).max(0.0);
        McEstimate {
            mean: shift[t] + mean_d,
            std_error: (var / count).sqrt(),
            n_samples,
        }
    };
    let l = &sampler.layout;
    Ok(SimulationReport {
        n_samples,
        seed,
        payments: (0..m)
            .map(|j| (0..n).map(|i| estimate(l.payment(j, i))).collect())
            .collect(),
        costs: (0..m).map(|j| estimate(l.cost(j))).collect(),
        utilities: (0..n).map(|i| estimate(l.utility(i))).collect(),
        estimation_losses: (0..m).map(|j| estimate(l.loss(j))).collect(),
        loo_sq_errors: (0..n).map(|i| estimate(l.loo_sq(i))).collect(),
        loo_cross: (0..n).map(|i| estimate(l.cross(i))).collect(),
    })
}

impl SimulationReport {
    /// Largest z-score of any estimate against its analytic counterpart.
    pub fn max_z_score(&self, exact: &AnalyticExpectations) -> f64 {
        let mut worst: f64 = 0.0;
        let mut see = |est: &McEstimate, want: f64| worst = worst.max(est.z_score(want));
        for (row, want) in self.payments.iter().zip(&exact.payments) {
            for (est, &w) in row.iter().zip(want) {
                see(est, w);
            }
        }
        for (est, &w) in self.costs.iter().zip(&exact.costs) {
            see(est, w);
        }
        for (est, &w) in self.utilities.iter().zip(&exact.utilities) {
            see(est, w);
        }
        for (est, &w) in self.estimation_losses.iter().zip(&exact.estimation_losses) {
            see(est, w);
        }
        for (est, &w) in self.loo_sq_errors.iter().zip(&exact.loo_sq_errors) {
            see(est, w);
        }
        for (est, &w) in self.loo_cross.iter().zip(&exact.loo_cross) {
            see(est, w);
        }
        worst
    }
}

/// Convenience for tables: payment means as a principals x agents matrix.
pub fn payment_means(report: &SimulationReport) -> Matrix {
    let m = report.payments.len();
    let n = report.payments.first().map_or(0, Vec::len);
    Matrix::from_fn(m, n, |j, i| report.payments[j][i].mean)
}
