//! Market instances and expected payoffs.
//!
//! Everything here is ex-ante: payments, utilities and costs are expectations
//! over the randomness of the observed good. Realized quantities live in
//! [`crate::datamarket`].
//!
//! Matrices indexed by (principal, agent) are `M x N`: row `j` is principal
//! `j`'s offer to every agent.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;

pub const DEFAULT_EFFORT_FLOOR: f64 = 1e-6;
pub const DEFAULT_EFFORT_CEILING: f64 = 1e6;
pub const DEFAULT_FEASIBILITY_TOL: f64 = 1e-9;

/// Expected effort-dependent part of a payment, `E[f^j(a_i^j, e)]`.
pub trait PaymentKernel: Send + Sync {
    fn eval(&self, principal: usize, agent: usize, slope: f64, efforts: &[f64]) -> f64;
}

impl<F> PaymentKernel for F
where
    F: Fn(usize, usize, f64, &[f64]) -> f64 + Send + Sync,
{
    fn eval(&self, principal: usize, agent: usize, slope: f64, efforts: &[f64]) -> f64 {
        self(principal, agent, slope, efforts)
    }
}

/// Expected value `E[v^j(e)]` a principal derives from the produced good.
pub trait ValueFunction: Send + Sync {
    fn eval(&self, principal: usize, efforts: &[f64]) -> f64;
}

impl<F> ValueFunction for F
where
    F: Fn(usize, &[f64]) -> f64 + Send + Sync,
{
    fn eval(&self, principal: usize, efforts: &[f64]) -> f64 {
        self(principal, efforts)
    }
}

/// How the second stage computes the agents' dominant strategies.
///
/// The closed forms solve the first-order condition `A s'(e) + 1 = 0` for
/// kernels `-a (s(e_i) + t(e_{-i}))`, with `A = sum_j a_i^j`, and clip the
/// root to the effort box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum EffortRule {
    /// Bracketed scalar maximization per agent.
    Numeric,
    /// `s(e) = 1/e`: `e_i = sqrt(A)`.
    SqrtRowSum,
    /// `s(e) = e^-p`: `e_i = (p A)^(1/(1+p))`.
    PowerLaw { exponent: f64 },
    /// `s(e) = exp(-r e)`: `e_i = ln(r A) / r`.
    Exponential { rate: f64 },
}

impl EffortRule {
    /// Unclipped closed-form root, or `None` for [`EffortRule::Numeric`].
    pub fn closed_form(&self, row_sum: f64) -> Option<f64> {
        match *self {
            EffortRule::Numeric => None,
            EffortRule::SqrtRowSum => Some(row_sum.sqrt()),
            EffortRule::PowerLaw { exponent: p } => Some((p * row_sum).powf(1.0 / (1.0 + p))),
            EffortRule::Exponential { rate: r } => Some((r * row_sum).ln() / r),
        }
    }
}

/// A two-stage market instance: `M` principals, `N` agents, expected payment
/// kernel and value function.
#[derive(Clone)]
pub struct MarketModel {
    n_agents: usize,
    n_principals: usize,
    effort_floor: f64,
    effort_ceiling: f64,
    kernel: Arc<dyn PaymentKernel>,
    value: Arc<dyn ValueFunction>,
    effort_rule: EffortRule,
}

impl fmt::Debug for MarketModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MarketModel")
            .field("n_agents", &self.n_agents)
            .field("n_principals", &self.n_principals)
            .field("effort_floor", &self.effort_floor)
            .field("effort_ceiling", &self.effort_ceiling)
            .field("effort_rule", &self.effort_rule)
            .finish_non_exhaustive()
    }
}

impl MarketModel {
    /// A model with zero kernel and zero value on the default effort box.
    pub fn new(n_agents: usize, n_principals: usize) -> Result<Self> {
        if n_agents == 0 || n_principals == 0 {
            return Err(Error::Domain(format!(
                "need at least one agent and one principal, got N={n_agents}, M={n_principals}"
            )));
        }
        Ok(Self {
            n_agents,
            n_principals,
            effort_floor: DEFAULT_EFFORT_FLOOR,
            effort_ceiling: DEFAULT_EFFORT_CEILING,
            kernel: Arc::new(|_: usize, _: usize, _: f64, _: &[f64]| 0.0),
            value: Arc::new(|_: usize, _: &[f64]| 0.0),
            effort_rule: EffortRule::Numeric,
        })
    }

    pub fn with_kernel(mut self, kernel: impl PaymentKernel + 'static) -> Self {
        self.kernel = Arc::new(kernel);
        self
    }

    pub fn with_value(mut self, value: impl ValueFunction + 'static) -> Self {
        self.value = Arc::new(value);
        self
    }

    pub fn with_effort_rule(mut self, rule: EffortRule) -> Self {
        self.effort_rule = rule;
        self
    }

    pub fn with_effort_box(mut self, floor: f64, ceiling: f64) -> Result<Self> {
        if !(floor > 0.0 && floor.is_finite() && ceiling.is_finite() && ceiling > floor) {
            return Err(Error::Domain(format!(
                "effort box needs 0 < floor < ceiling < inf, got [{floor}, {ceiling}]"
            )));
        }
        self.effort_floor = floor;
        self.effort_ceiling = ceiling;
        Ok(self)
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn n_principals(&self) -> usize {
        self.n_principals
    }

    pub fn effort_floor(&self) -> f64 {
        self.effort_floor
    }

    pub fn effort_ceiling(&self) -> f64 {
        self.effort_ceiling
    }

    pub fn effort_rule(&self) -> EffortRule {
        self.effort_rule
    }

    #[inline]
    pub fn kernel(&self, principal: usize, agent: usize, slope: f64, efforts: &[f64]) -> f64 {
        self.kernel.eval(principal, agent, slope, efforts)
    }

    #[inline]
    pub fn value(&self, principal: usize, efforts: &[f64]) -> f64 {
        self.value.eval(principal, efforts)
    }

    pub fn check_agent(&self, i: usize) -> Result<()> {
        if i >= self.n_agents {
            return Err(Error::index("agent", i, self.n_agents));
        }
        Ok(())
    }

    pub fn check_principal(&self, j: usize) -> Result<()> {
        if j >= self.n_principals {
            return Err(Error::index("principal", j, self.n_principals));
        }
        Ok(())
    }

    pub fn check_efforts(&self, e: &[f64]) -> Result<()> {
        if e.len() != self.n_agents {
            return Err(Error::Domain(format!(
                "effort profile has length {}, expected {}",
                e.len(),
                self.n_agents
            )));
        }
        for (i, &x) in e.iter().enumerate() {
            if !(x >= self.effort_floor && x <= self.effort_ceiling) {
                return Err(Error::Domain(format!(
                    "effort e[{i}] = {x} outside [{}, {}]",
                    self.effort_floor, self.effort_ceiling
                )));
            }
        }
        Ok(())
    }

    /// Shape, finiteness and nonnegativity of a slope matrix.
    pub fn check_slopes(&self, a: &Matrix) -> Result<()> {
        self.check_shape("a", a)?;
        for j in 0..a.nrows() {
            for i in 0..a.ncols() {
                let x = a[(j, i)];
                if !x.is_finite() || x < 0.0 {
                    return Err(Error::Domain(format!(
                        "slope a[{j}][{i}] = {x} must be finite and nonnegative"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn check_contract(&self, params: &ContractParams) -> Result<()> {
        self.check_shape("c", &params.c)?;
        if params.c.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("c has non-finite entries".into()));
        }
        self.check_slopes(&params.a)
    }

    fn check_shape(&self, name: &str, m: &Matrix) -> Result<()> {
        if m.nrows() != self.n_principals || m.ncols() != self.n_agents {
            return Err(Error::Domain(format!(
                "{name} is {}x{}, expected {}x{} (principals x agents)",
                m.nrows(),
                m.ncols(),
                self.n_principals,
                self.n_agents
            )));
        }
        Ok(())
    }

    /// `F[(j, i)] = f^j(a_i^j, e)` for every pair, without validation.
    pub(crate) fn kernel_matrix(&self, a: &Matrix, e: &[f64]) -> Matrix {
        Matrix::from_fn(self.n_principals, self.n_agents, |j, i| {
            self.kernel(j, i, a[(j, i)], e)
        })
    }
}

/// First-stage decision: constant transfers `c` and slopes `a`, both `M x N`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContractParams {
    pub c: Matrix,
    pub a: Matrix,
}

impl ContractParams {
    pub fn new(c: Matrix, a: Matrix) -> Result<Self> {
        if c.shape() != a.shape() {
            return Err(Error::Domain(format!(
                "c is {:?} but a is {:?}",
                c.shape(),
                a.shape()
            )));
        }
        if c.iter().chain(a.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Domain("contract parameters must be finite".into()));
        }
        if let Some(x) = a.iter().find(|&&x| x < 0.0) {
            return Err(Error::Domain(format!("slope {x} is negative")));
        }
        Ok(Self { c, a })
    }

    pub fn zeros(n_principals: usize, n_agents: usize) -> Self {
        Self {
            c: Matrix::zeros(n_principals, n_agents),
            a: Matrix::zeros(n_principals, n_agents),
        }
    }
}

/// Agents' effort vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EffortProfile(pub Vec<f64>);

impl EffortProfile {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Deref for EffortProfile {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for EffortProfile {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeasibilityReport {
    /// Expected utility of each agent.
    pub ir_slack: Vec<f64>,
    /// Expected payment of each (principal, agent) pair.
    pub payment_slack: Matrix,
    pub ir_ok: bool,
    pub positivity_ok: bool,
}

impl FeasibilityReport {
    pub fn feasible(&self) -> bool {
        self.ir_ok && self.positivity_ok
    }
}

fn checked(model: &MarketModel, params: &ContractParams, e: &[f64]) -> Result<()> {
    model.check_contract(params)?;
    model.check_efforts(e)
}

/// `c_i^j + f^j(a_i^j, e)`.
pub fn expected_payment(
    model: &MarketModel,
    params: &ContractParams,
    e: &EffortProfile,
    i: usize,
    j: usize,
) -> Result<f64> {
    model.check_agent(i)?;
    model.check_principal(j)?;
    checked(model, params, e)?;
    Ok(payment_unchecked(model, params, e, i, j))
}

#[inline]
fn payment_unchecked(
    model: &MarketModel,
    params: &ContractParams,
    e: &[f64],
    i: usize,
    j: usize,
) -> f64 {
    params.c[(j, i)] + model.kernel(j, i, params.a[(j, i)], e)
}

/// `sum_j (c_i^j + f^j(a_i^j, e)) - e_i`.
pub fn agent_expected_utility(
    model: &MarketModel,
    params: &ContractParams,
    e: &EffortProfile,
    i: usize,
) -> Result<f64> {
    model.check_agent(i)?;
    checked(model, params, e)?;
    Ok(utility_unchecked(model, params, e, i))
}

#[inline]
pub(crate) fn utility_unchecked(
    model: &MarketModel,
    params: &ContractParams,
    e: &[f64],
    i: usize,
) -> f64 {
    let paid: f64 = (0..model.n_principals())
        .map(|j| payment_unchecked(model, params, e, i, j))
        .sum();
    paid - e[i]
}

/// `sum_i (c_i^j + f^j(a_i^j, e)) - v^j(e)`.
pub fn principal_expected_cost(
    model: &MarketModel,
    params: &ContractParams,
    e: &EffortProfile,
    j: usize,
) -> Result<f64> {
    model.check_principal(j)?;
    checked(model, params, e)?;
    Ok(cost_unchecked(model, params, e, j))
}

#[inline]
pub(crate) fn cost_unchecked(
    model: &MarketModel,
    params: &ContractParams,
    e: &[f64],
    j: usize,
) -> f64 {
    let paid: f64 = (0..model.n_agents())
        .map(|i| payment_unchecked(model, params, e, i, j))
        .sum();
    paid - model.value(j, e)
}

pub fn check_feasibility(
    model: &MarketModel,
    params: &ContractParams,
    e: &EffortProfile,
    tol: f64,
) -> Result<FeasibilityReport> {
    if !(tol >= 0.0) {
        return Err(Error::Domain(format!("tolerance must be >= 0, got {tol}")));
    }
    checked(model, params, e)?;
    Ok(feasibility_unchecked(model, params, e, tol))
}

pub(crate) fn feasibility_unchecked(
    model: &MarketModel,
    params: &ContractParams,
    e: &[f64],
    tol: f64,
) -> FeasibilityReport {
    let (m, n) = (model.n_principals(), model.n_agents());
    let payment_slack = Matrix::from_fn(m, n, |j, i| payment_unchecked(model, params, e, i, j));
    let ir_slack: Vec<f64> = (0..n)
        .map(|i| payment_slack.column(i).iter().sum::<f64>() - e[i])
        .collect();
    let ir_ok = ir_slack.iter().all(|&s| s >= -tol);
    let positivity_ok = payment_slack.iter().all(|&s| s >= -tol);
    FeasibilityReport {
        ir_slack,
        payment_slack,
        ir_ok,
        positivity_ok,
    }
}
