//! Experiment configuration, read from TOML.
//!
//! ```toml
//! seed = 7
//! samples = 50
//! mc_samples = 100000
//!
//! [market]
//! n_agents = 3
//! n_principals = 2
//! zeta = [[0.0, 0.1], [0.1, 0.0]]
//!
//! [solver]
//! tol = 1e-9
//!
//! [start]
//! a = [[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]]
//! extra = 2
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datamarket::DataMarketSpec;
use crate::equilibria::{GneOptions, DEFAULT_ACTIVE_TOL};
use crate::error::{Error, Result};
use crate::market::Matrix;

use super::output::from_rows;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every random stream of a run derives from it.
    pub seed: u64,
    /// Simplex points sampled per run.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub market: DataMarketSpec,
    #[serde(default)]
    pub solver: GneOptions,
    #[serde(default)]
    pub start: StartConfig,
    /// Fixed contract for `stage2`, `simplex` and `simulate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contract: Option<ContractConfig>,
    #[serde(default)]
    pub checks: CheckConfig,
}

fn default_samples() -> usize {
    50
}

fn default_mc_samples() -> usize {
    100_000
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StartConfig {
    /// Initial slopes, one row per principal; all ones when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<Vec<f64>>>,
    /// Additional log-uniform random starts on `[0.01, 10]`.
    pub extra: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractConfig {
    pub a: Vec<Vec<f64>>,
    /// Transfers; the simplex centroid for `a` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<Vec<Vec<f64>>>,
    /// Efforts for `simulate`; `mu(a)` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub efforts: Option<Vec<f64>>,
}

/// Tolerances of the reported checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckConfig {
    /// `|E[u_i]|` bound for binding IR and the row-sum equalities.
    pub ir_tol: f64,
    /// Lower bound slack on expected payments.
    pub positivity_tol: f64,
    pub ve_tol: f64,
    pub lambda_tol: f64,
    pub stationarity_tol: f64,
    pub active_tol: f64,
    pub noe_tol: f64,
    /// Standard errors allowed between simulation and closed forms.
    pub mc_z: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            ir_tol: 1e-8,
            positivity_tol: 1e-9,
            ve_tol: 1e-8,
            lambda_tol: 1e-6,
            stationarity_tol: 1e-8,
            active_tol: DEFAULT_ACTIVE_TOL,
            noe_tol: 1e-6,
            mc_z: 4.0,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub samples: Option<usize>,
    pub mc_samples: Option<usize>,
    pub tol: Option<f64>,
}

impl ExperimentConfig {
    /// Defaults throughout, seed 0.
    pub fn for_market(market: DataMarketSpec) -> Self {
        Self {
            seed: 0,
            samples: default_samples(),
            mc_samples: default_mc_samples(),
            out: None,
            market,
            solver: GneOptions::default(),
            start: StartConfig::default(),
            contract: None,
            checks: CheckConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(k) = o.samples {
            self.samples = k;
        }
        if let Some(n) = o.mc_samples {
            self.mc_samples = n;
        }
        if let Some(t) = o.tol {
            self.solver.tol = t;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.market.validate()?;
        if self.samples == 0 {
            return Err(Error::Config("samples must be >= 1".into()));
        }
        if self.mc_samples < 2 {
            return Err(Error::Config("mc_samples must be >= 2".into()));
        }
        let s = &self.solver;
        positive("solver.tol", s.tol)?;
        positive("solver.inner_tol", s.inner_tol)?;
        positive("solver.verify_tol", s.verify_tol)?;
        positive("solver.feasibility_tol", s.feasibility_tol)?;
        positive("solver.deviation_radius", s.deviation_radius)?;
        if s.max_iters == 0 || s.inner_max_iters == 0 {
            return Err(Error::Config(
                "solver.max_iters and solver.inner_max_iters must be >= 1".into(),
            ));
        }
        if s.deviations == 0 {
            return Err(Error::Config("solver.deviations must be >= 1".into()));
        }
        let c = &self.checks;
        for (name, v) in [
            ("checks.ir_tol", c.ir_tol),
            ("checks.positivity_tol", c.positivity_tol),
            ("checks.ve_tol", c.ve_tol),
            ("checks.lambda_tol", c.lambda_tol),
            ("checks.stationarity_tol", c.stationarity_tol),
            ("checks.active_tol", c.active_tol),
            ("checks.noe_tol", c.noe_tol),
            ("checks.mc_z", c.mc_z),
        ] {
            positive(name, v)?;
        }
        if let Some(a) = &self.start.a {
            self.slopes("start.a", a)?;
        }
        if let Some(k) = &self.contract {
            self.slopes("contract.a", &k.a)?;
            if let Some(c) = &k.c {
                self.matrix("contract.c", c)?;
            }
            if let Some(e) = &k.efforts {
                if e.len() != self.market.n_agents {
                    return Err(Error::Config(format!(
                        "contract.efforts has {} entries, expected {}",
                        e.len(),
                        self.market.n_agents
                    )));
                }
                for (i, &x) in e.iter().enumerate() {
                    if !(x >= self.market.effort_floor && x <= self.market.effort_ceiling) {
                        return Err(Error::Config(format!(
                            "contract.efforts[{i}] = {x} is outside the effort box"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn matrix(&self, field: &str, r: &[Vec<f64>]) -> Result<Matrix> {
        let (m, n) = (self.market.n_principals, self.market.n_agents);
        if r.len() != m || r.iter().any(|row| row.len() != n) {
            return Err(Error::Config(format!(
                "{field} must have {m} rows of {n} entries (one row per principal)"
            )));
        }
        for (j, row) in r.iter().enumerate() {
            for (i, &x) in row.iter().enumerate() {
                if !x.is_finite() {
                    return Err(Error::Config(format!(
                        "{field}[{j}][{i}] = {x} must be finite"
                    )));
                }
            }
        }
        Ok(from_rows(r).expect("shape checked"))
    }

    fn slopes(&self, field: &str, r: &[Vec<f64>]) -> Result<Matrix> {
        let a = self.matrix(field, r)?;
        for (j, row) in r.iter().enumerate() {
            for (i, &x) in row.iter().enumerate() {
                if x < 0.0 {
                    return Err(Error::Config(format!(
                        "{field}[{j}][{i}] = {x}: slopes must be nonnegative"
                    )));
                }
            }
        }
        Ok(a)
    }

    /// Initial slopes of the main start.
    pub fn start_slopes(&self) -> Matrix {
        match &self.start.a {
            Some(r) => from_rows(r).expect("validated"),
            None => Matrix::from_element(self.market.n_principals, self.market.n_agents, 1.0),
        }
    }

    pub fn contract_slopes(&self) -> Option<Matrix> {
        self.contract
            .as_ref()
            .map(|k| from_rows(&k.a).expect("validated"))
    }

    pub fn contract_transfers(&self) -> Option<Matrix> {
        self.contract
            .as_ref()
            .and_then(|k| k.c.as_ref())
            .map(|c| from_rows(c).expect("validated"))
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {v} must be positive")))
    }
}
