//! Second stage: the agents' dominant-strategy efforts `mu(a)`.
//!
//! Agent `i` maximizes `sum_j f^j(a_i^j, e) - e_i` over its own effort. The
//! constant transfers `c` shift every agent's utility by a constant and never
//! enter here; [`solve_efforts`] only takes the slope matrix.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{EffortProfile, EffortRule, MarketModel, Matrix};
use crate::{par, rng};

/// Bracket width at which the scalar search stops, in effort units.
pub const EFFORT_TOL: f64 = 1e-10;

const GOLDEN: f64 = 0.618_033_988_749_894_8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    Interior,
    Floor,
    Ceiling,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Solution {
    pub e_star: EffortProfile,
    /// `|d/de_i sum_j f^j - 1|` at the solution; zero at a box boundary where
    /// the derivative points out of the box.
    pub per_agent_residual: Vec<f64>,
    pub boundary_flags: Vec<Boundary>,
}

impl Stage2Solution {
    pub fn max_residual(&self) -> f64 {
        self.per_agent_residual.iter().fold(0.0, |m, &r| m.max(r))
    }
}

/// The own-effort objective of one agent with the others held at `reference`.
struct AgentObjective<'a> {
    model: &'a MarketModel,
    slopes: Vec<f64>,
    agent: usize,
    reference: Vec<f64>,
}

impl AgentObjective<'_> {
    fn payments(&self, e: &[f64]) -> f64 {
        self.slopes
            .iter()
            .enumerate()
            .map(|(j, &s)| self.model.kernel(j, self.agent, s, e))
            .sum()
    }

    fn eval(&self, x: f64) -> f64 {
        let mut e = self.reference.clone();
        e[self.agent] = x;
        self.payments(&e) - x
    }

    fn step(&self, x: f64) -> f64 {
        (1e-6 * x.max(1e-3)).min(0.5 * x)
    }

    fn derivative(&self, x: f64) -> f64 {
        let h = self.step(x);
        (self.eval(x + h) - self.eval(x - h)) / (2.0 * h)
    }

    fn forward_derivative(&self, x: f64) -> f64 {
        let h = self.step(x);
        (self.eval(x + h) - self.eval(x)) / h
    }

    fn backward_derivative(&self, x: f64) -> f64 {
        let h = self.step(x);
        (self.eval(x) - self.eval(x - h)) / h
    }

    /// Golden-section search down to a coarse bracket, then bisection on the
    /// sign of the first-order condition.
    fn maximize(&self, lo: f64, hi: f64) -> (f64, Boundary) {
        if self.forward_derivative(lo) <= 0.0 {
            return (lo, Boundary::Floor);
        }
        if self.backward_derivative(hi) >= 0.0 {
            return (hi, Boundary::Ceiling);
        }
        let (mut a, mut b) = (lo, hi);
        let mut x1 = b - GOLDEN * (b - a);
        let mut x2 = a + GOLDEN * (b - a);
        let (mut f1, mut f2) = (self.eval(x1), self.eval(x2));
        while b - a > 1e-5 * (1.0 + 0.5 * (a + b)) {
            if f1 < f2 {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + GOLDEN * (b - a);
                f2 = self.eval(x2);
            } else {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - GOLDEN * (b - a);
                f1 = self.eval(x1);
            }
        }
        // The golden bracket may have collapsed onto a flat or noisy region;
        // widen it until the derivative changes sign across it.
        let mut width = b - a;
        while self.derivative(a) < 0.0 && a > lo {
            width *= 2.0;
            a = (a - width).max(lo);
        }
        while self.derivative(b) > 0.0 && b < hi {
            width *= 2.0;
            b = (b + width).min(hi);
        }
        for _ in 0..200 {
            if b - a <= EFFORT_TOL {
                break;
            }
            let mid = 0.5 * (a + b);
            if self.derivative(mid) > 0.0 {
                a = mid;
            } else {
                b = mid;
            }
        }
        (0.5 * (a + b), Boundary::Interior)
    }
}

fn reference_profile(model: &MarketModel, scale: f64) -> Vec<f64> {
    let (lo, hi) = (model.effort_floor(), model.effort_ceiling());
    (0..model.n_agents())
        .map(|k| (scale * (1.0 + 0.25 * k as f64)).clamp(lo, hi))
        .collect()
}

fn objective<'a>(
    model: &'a MarketModel,
    a: &Matrix,
    agent: usize,
    reference: Vec<f64>,
) -> AgentObjective<'a> {
    AgentObjective {
        model,
        slopes: a.column(agent).iter().copied().collect(),
        agent,
        reference,
    }
}

/// Numeric certificate that every agent has a unique dominant strategy:
/// the summed own payment is separable from the other efforts and the own
/// objective is concave.
fn certify_structure(model: &MarketModel, a: &Matrix) -> Result<()> {
    let n = model.n_agents();
    let (lo, hi) = (model.effort_floor(), model.effort_ceiling());
    let grid_lo = lo.max(1e-3);
    let grid_hi = hi.min(1e3).max(grid_lo);
    let points = 13;
    for i in 0..n {
        let obj = objective(model, a, i, reference_profile(model, 1.0));
        for p in 0..points {
            let t = p as f64 / (points - 1) as f64;
            let x = grid_lo * (grid_hi / grid_lo).powf(t);
            let h = 1e-3 * x;
            if x - h < lo || x + h > hi {
                continue;
            }
            let fx = obj.eval(x);
            let d2 = (obj.eval(x + h) - 2.0 * fx + obj.eval(x - h)) / (h * h);
            if d2 > 1e-6 + 1e-8 * (1.0 + fx.abs()) / (h * h) {
                return Err(Error::Structure(format!(
                    "no unique dominant strategy guaranteed: own-effort objective of agent {i} \
                     is convex near e = {x} (second difference {d2:.3e})"
                )));
            }
        }
        for scale in [1.0, 3.7] {
            let base = reference_profile(model, scale);
            for k in (0..n).filter(|&k| k != i) {
                let (hi_, hk) = (1e-3 * base[i], 1e-3 * base[k]);
                let eval = |si: f64, sk: f64| {
                    let mut e = base.clone();
                    e[i] += si * hi_;
                    e[k] += sk * hk;
                    obj.payments(&e)
                };
                let s0 = obj.payments(&base);
                let cross = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0))
                    / (4.0 * hi_ * hk);
                if cross.abs() > 1e-6 + 1e-8 * (1.0 + s0.abs()) / (hi_ * hk) {
                    return Err(Error::Structure(format!(
                        "no unique dominant strategy guaranteed: payments to agent {i} \
                         couple its effort with agent {k}'s (cross partial {cross:.3e})"
                    )));
                }
            }
        }
    }
    Ok(())
}

fn residual_at(obj: &AgentObjective<'_>, x: f64, flag: Boundary) -> f64 {
    match flag {
        Boundary::Interior => obj.derivative(x).abs(),
        Boundary::Floor => obj.forward_derivative(x).max(0.0),
        Boundary::Ceiling => (-obj.backward_derivative(x)).max(0.0),
    }
}

fn clipped_closed_form(model: &MarketModel, a: &Matrix, i: usize) -> (f64, Boundary) {
    let (lo, hi) = (model.effort_floor(), model.effort_ceiling());
    let total: f64 = a.column(i).iter().sum();
    let x = model.effort_rule().closed_form(total).unwrap_or(f64::NAN);
    // ln(0) and friends land on the floor.
    if !(x > lo) {
        (lo, Boundary::Floor)
    } else if x >= hi {
        (hi, Boundary::Ceiling)
    } else {
        (x, Boundary::Interior)
    }
}

/// Dominant-strategy effort profile `mu(a)`.
pub fn solve_efforts(model: &MarketModel, a: &Matrix) -> Result<Stage2Solution> {
    model.check_slopes(a)?;
    let (lo, hi) = (model.effort_floor(), model.effort_ceiling());
    let n = model.n_agents();
    let rule = model.effort_rule();
    let per_agent: Vec<(f64, Boundary, f64)> = match rule {
        EffortRule::SqrtRowSum | EffortRule::PowerLaw { .. } | EffortRule::Exponential { .. } => (0
            ..n)
            .map(|i| {
                let (x, flag) = clipped_closed_form(model, a, i);
                let obj = objective(model, a, i, reference_profile(model, 1.0));
                (x, flag, residual_at(&obj, x, flag))
            })
            .collect(),
        EffortRule::Numeric => {
            certify_structure(model, a)?;
            par::map_range(n, |i| {
                let obj = objective(model, a, i, reference_profile(model, 1.0));
                let (x, flag) = obj.maximize(lo, hi);
                (x, flag, residual_at(&obj, x, flag))
            })
        }
    };
    Ok(Stage2Solution {
        e_star: EffortProfile(per_agent.iter().map(|p| p.0).collect()),
        boundary_flags: per_agent.iter().map(|p| p.1).collect(),
        per_agent_residual: per_agent.iter().map(|p| p.2).collect(),
    })
}

/// Only the effort vector of [`solve_efforts`].
pub fn mu(model: &MarketModel, a: &Matrix) -> Result<Vec<f64>> {
    if model.effort_rule() == EffortRule::Numeric {
        return Ok(solve_efforts(model, a)?.e_star.0);
    }
    model.check_slopes(a)?;
    Ok((0..model.n_agents())
        .map(|i| clipped_closed_form(model, a, i).0)
        .collect())
}

/// Randomized check of the dominant-strategy inequality
/// `E[u_i(e*_i, e_-i)] >= E[u_i(e_i, e_-i)]`. Each trial redraws every
/// agent's opponents and a deviation, half of them local to `e*_i`.
pub fn verify_dominance(
    model: &MarketModel,
    a: &Matrix,
    sol: &Stage2Solution,
    trials: usize,
    seed: u64,
) -> Result<bool> {
    model.check_slopes(a)?;
    model.check_efforts(&sol.e_star)?;
    if trials == 0 {
        return Err(Error::Domain("trials must be >= 1".into()));
    }
    let (lo, hi) = (model.effort_floor(), model.effort_ceiling());
    let n = model.n_agents();
    let star = sol.e_star.as_slice();
    let utility = |i: usize, e: &[f64]| -> f64 {
        (0..model.n_principals())
            .map(|j| model.kernel(j, i, a[(j, i)], e))
            .sum::<f64>()
            - e[i]
    };
    let passed = par::map_range(trials, |t| {
        let mut rng = rng::substream(seed, t as u64);
        (0..n).all(|i| {
            let mut e: Vec<f64> = (0..n).map(|_| rng::log_uniform(&mut rng, lo, hi)).collect();
            let dev = if rng.random::<bool>() {
                (star[i] * rng.random_range(-0.7..0.7f64).exp()).clamp(lo, hi)
            } else {
                rng::log_uniform(&mut rng, lo, hi)
            };
            if dev == star[i] {
                return true;
            }
            e[i] = star[i];
            let at_star = utility(i, &e);
            e[i] = dev;
            let at_dev = utility(i, &e);
            at_star >= at_dev - 1e-9 * (1.0 + at_star.abs())
        })
    });
    Ok(passed.into_iter().all(|ok| ok))
}

/// True iff the induced efforts for `(c1, a)` and `(c2, a)` agree bit for bit.
pub fn c_independence_check(
    model: &MarketModel,
    a: &Matrix,
    c1: &Matrix,
    c2: &Matrix,
) -> Result<bool> {
    let p1 = crate::market::ContractParams::new(c1.clone(), a.clone())?;
    let p2 = crate::market::ContractParams::new(c2.clone(), a.clone())?;
    let s1 = solve_efforts(model, &p1.a)?;
    let s2 = solve_efforts(model, &p2.a)?;
    Ok(s1
        .e_star
        .iter()
        .zip(s2.e_star.iter())
        .all(|(x, y)| x.to_bits() == y.to_bits()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inverse_variance_model(n: usize, m: usize, rule: EffortRule) -> MarketModel {
        MarketModel::new(n, m)
            .unwrap()
            .with_kernel(move |_j: usize, i: usize, s: f64, e: &[f64]| {
                let tau: f64 = (0..e.len())
                    .filter(|&k| k != i)
                    .map(|k| 1.0 / e[k])
                    .sum::<f64>()
                    / ((n - 1).max(1).pow(2)) as f64;
                -s * (1.0 / e[i] + tau)
            })
            .with_effort_rule(rule)
    }

    /// Brute-force maximizer of -A/x - x on [1e-3, 10] at step 1e-4.
    fn grid_argmax(total: f64) -> f64 {
        let mut best = (f64::NEG_INFINITY, 0.0);
        let mut k = 0u64;
        loop {
            let x = 1e-3 + k as f64 * 1e-4;
            if x > 10.0 {
                break;
            }
            let u = -total / x - x;
            if u > best.0 {
                best = (u, x);
            }
            k += 1;
        }
        best.1
    }

    #[test]
    fn grid_oracle_values() {
        // Frozen from the brute-force grid.
        assert!((grid_argmax(4.0) - 2.0).abs() <= 1e-4);
        assert!((grid_argmax(9.0) - 3.0).abs() <= 1e-4);
    }

    #[test]
    fn closed_form_examples() {
        for rule in [EffortRule::SqrtRowSum, EffortRule::Numeric] {
            let model = inverse_variance_model(2, 2, rule);
            let sol = solve_efforts(&model, &Matrix::from_element(2, 2, 2.0)).unwrap();
            for &x in sol.e_star.iter() {
                assert!((x - 2.0).abs() < 1e-8, "{rule:?}: {x}");
            }
            assert!(sol.boundary_flags.iter().all(|&b| b == Boundary::Interior));
            assert!(sol.max_residual() < 1e-6);

            let model = inverse_variance_model(1, 1, rule);
            let sol = solve_efforts(&model, &Matrix::from_element(1, 1, 9.0)).unwrap();
            assert!((sol.e_star[0] - 3.0).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_slopes_give_floor() {
        for rule in [EffortRule::SqrtRowSum, EffortRule::Numeric] {
            let model = inverse_variance_model(3, 2, rule);
            let sol = solve_efforts(&model, &Matrix::zeros(2, 3)).unwrap();
            assert!(sol.e_star.iter().all(|&x| x == model.effort_floor()));
            assert!(sol.boundary_flags.iter().all(|&b| b == Boundary::Floor));
            assert!(sol.per_agent_residual.iter().all(|&r| r == 0.0));
        }
    }

    #[test]
    fn ceiling_is_reported() {
        let model = inverse_variance_model(1, 1, EffortRule::Numeric)
            .with_effort_box(1e-3, 2.0)
            .unwrap();
        let sol = solve_efforts(&model, &Matrix::from_element(1, 1, 9.0)).unwrap();
        assert_eq!(sol.e_star[0], 2.0);
        assert_eq!(sol.boundary_flags[0], Boundary::Ceiling);
    }

    #[test]
    fn exponential_variance_numeric() {
        // f = -s exp(-r e_i): optimum where A r exp(-r x) = 1.
        let r = 0.8;
        let model = MarketModel::new(2, 2)
            .unwrap()
            .with_kernel(move |_j: usize, i: usize, s: f64, e: &[f64]| -s * (-r * e[i]).exp());
        let a = Matrix::from_row_slice(2, 2, &[2.0, 0.5, 1.5, 0.5]);
        let sol = solve_efforts(&model, &a).unwrap();
        let want0 = (3.5f64 * r).ln() / r;
        assert!((sol.e_star[0] - want0).abs() < 1e-7);
        // A r = 0.8 < 1: the agent shirks.
        assert_eq!(sol.e_star[1], model.effort_floor());
        assert!(verify_dominance(&model, &a, &sol, 500, 3).unwrap());
    }

    #[test]
    fn rejects_negative_slopes() {
        let model = inverse_variance_model(2, 1, EffortRule::SqrtRowSum);
        let a = Matrix::from_row_slice(1, 2, &[1.0, -0.5]);
        assert!(matches!(solve_efforts(&model, &a), Err(Error::Domain(_))));
    }

    #[test]
    fn rejects_convex_objective() {
        let model = MarketModel::new(1, 1)
            .unwrap()
            .with_kernel(|_j: usize, _i: usize, s: f64, e: &[f64]| s * e[0] * e[0]);
        let err = solve_efforts(&model, &Matrix::from_element(1, 1, 1.0)).unwrap_err();
        assert!(matches!(err, Error::Structure(_)), "{err}");
    }

    #[test]
    fn rejects_coupled_kernel() {
        let model = MarketModel::new(2, 1).unwrap().with_kernel(
            |_j: usize, i: usize, s: f64, e: &[f64]| -s / e[i] + s * e[0] * e[1] * 0.1,
        );
        let err = solve_efforts(&model, &Matrix::from_element(1, 2, 1.0)).unwrap_err();
        assert!(matches!(err, Error::Structure(_)), "{err}");
    }

    #[test]
    fn dominance_examples() {
        let model = inverse_variance_model(3, 2, EffortRule::SqrtRowSum);
        let a = Matrix::from_element(2, 3, 2.0);
        let sol = solve_efforts(&model, &a).unwrap();
        assert!(verify_dominance(&model, &a, &sol, 1000, 11).unwrap());

        let mut bad = sol.clone();
        bad.e_star.0[1] += 0.5;
        assert!(!verify_dominance(&model, &a, &bad, 1000, 11).unwrap());

        let zero = Matrix::zeros(2, 3);
        let sol = solve_efforts(&model, &zero).unwrap();
        assert!(verify_dominance(&model, &zero, &sol, 100, 1).unwrap());
    }

    #[test]
    fn transfers_do_not_move_efforts() {
        let model = inverse_variance_model(2, 2, EffortRule::Numeric);
        let a = Matrix::from_element(2, 2, 2.0);
        let c1 = Matrix::zeros(2, 2);
        let c2 = Matrix::from_row_slice(2, 2, &[3.0, -1.0, 100.0, 0.25]);
        assert!(c_independence_check(&model, &a, &c1, &c2).unwrap());
        let zero = Matrix::zeros(2, 2);
        assert!(c_independence_check(&model, &zero, &c1, &c2).unwrap());
    }
}
