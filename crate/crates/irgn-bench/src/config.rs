//! Experiment configuration: flat TOML, human-editable reproduction recipes.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

/// Which shipped problem to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Diagonal,
    Elliptic,
}

/// Source-condition form for the initial guess.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SourceFormKind {
    #[default]
    Power,
    Range,
}

/// Stopping rule selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    #[default]
    Posterior,
    Discrepancy,
    Apriori,
}

impl RuleKind {
    pub fn label(self) -> &'static str {
        match self {
            RuleKind::Posterior => "posterior",
            RuleKind::Discrepancy => "discrepancy",
            RuleKind::Apriori => "apriori",
        }
    }
}

/// Right-hand side selector for the elliptic problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EllipticRhs {
    /// `f(t) = pi^2 sin(pi t) + 10`.
    #[default]
    Default,
    /// `f(t) = pi^2 sin(pi t)` (the analytic-solution fixture at c = 0).
    Sine,
}

/// True-coefficient selector for the elliptic problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EllipticCoefficient {
    /// `c(t) = 1 + t(1 - t)`.
    #[default]
    Default,
    /// Constant coefficient `elliptic_c_value`.
    Constant,
}

/// One experiment: problem, source, schedule, rule, and the noise sweep.
///
/// `deltas` are relative to `||y||` and must be strictly decreasing; they are
/// converted to absolute levels internally.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemKind,
    pub n: usize,

    /// Diagonal problem: curvature of the nonlinearity.
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
    /// Diagonal problem: singular-value decay exponent.
    #[serde(default = "defaults::sigma_p")]
    pub sigma_p: f64,

    /// Elliptic problem: right-hand side and coefficient selectors.
    #[serde(default)]
    pub elliptic_f: EllipticRhs,
    #[serde(default)]
    pub elliptic_c: EllipticCoefficient,
    #[serde(default = "defaults::elliptic_c_value")]
    pub elliptic_c_value: f64,

    /// Ball radius override; defaults to the problem's own choice.
    #[serde(default)]
    pub rho: Option<f64>,

    #[serde(default)]
    pub source_form: SourceFormKind,
    #[serde(default = "defaults::nu")]
    pub nu: f64,
    /// `||x0 - x_true|| = initial_error_over_rho * rho`.
    #[serde(default = "defaults::initial_error_over_rho")]
    pub initial_error_over_rho: f64,
    /// When set, prescribes `||omega||` (power form) or `||v||` (range form)
    /// directly instead of targeting an initial error.
    #[serde(default)]
    pub source_norm: Option<f64>,
    #[serde(default = "defaults::source_seed")]
    pub source_seed: u64,

    /// Schedule start; defaults to the problem's scaling level.
    #[serde(default)]
    pub alpha0: Option<f64>,
    #[serde(default = "defaults::ratio_r")]
    pub ratio_r: f64,

    #[serde(default)]
    pub rule: RuleKind,
    #[serde(default = "defaults::tau")]
    pub tau: f64,
    #[serde(default = "defaults::c0")]
    pub c0: f64,
    #[serde(default = "defaults::k_max")]
    pub k_max: usize,

    pub deltas: Vec<f64>,
    pub seeds: Vec<u64>,

    #[serde(default = "defaults::cg_rel_tolerance")]
    pub cg_rel_tolerance: f64,
    /// Defaults to 10 * n.
    #[serde(default)]
    pub cg_max_iterations: Option<usize>,
}

mod defaults {
    pub fn gamma() -> f64 {
        0.05
    }
    pub fn sigma_p() -> f64 {
        1.6
    }
    pub fn nu() -> f64 {
        1.0
    }
    pub fn initial_error_over_rho() -> f64 {
        0.125
    }
    pub fn source_seed() -> u64 {
        7
    }
    pub fn ratio_r() -> f64 {
        2.0
    }
    pub fn tau() -> f64 {
        2.5
    }
    pub fn c0() -> f64 {
        0.25
    }
    pub fn k_max() -> usize {
        60
    }
    pub fn cg_rel_tolerance() -> f64 {
        1e-12
    }
    pub fn elliptic_c_value() -> f64 {
        1.0
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: Self = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            bail!("n must be at least 2, got {}", self.n);
        }
        if self.deltas.len() < 2 {
            bail!("need at least 2 noise levels for a rate fit, got {}", self.deltas.len());
        }
        for pair in self.deltas.windows(2) {
            if !(pair[1] < pair[0]) {
                bail!("deltas must be strictly decreasing: {:?}", self.deltas);
            }
        }
        if self.deltas.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
            bail!("deltas must be positive and finite: {:?}", self.deltas);
        }
        if self.seeds.is_empty() {
            bail!("seeds must not be empty");
        }
        if !(self.nu > 0.0 && self.nu <= 2.0) {
            bail!("nu must lie in (0, 2], got {}", self.nu);
        }
        if !(self.initial_error_over_rho > 0.0 && self.initial_error_over_rho <= 0.25) {
            bail!(
                "initial_error_over_rho must lie in (0, 0.25] (ball condition), got {}",
                self.initial_error_over_rho
            );
        }
        if !(self.tau > 2.0) {
            bail!("tau must exceed 2, got {}", self.tau);
        }
        if !(self.c0 > 0.0 && self.c0 < self.tau - 2.0) {
            bail!("c0 must lie in (0, tau - 2), got {}", self.c0);
        }
        if !(self.ratio_r > 1.0) {
            bail!("ratio_r must exceed 1, got {}", self.ratio_r);
        }
        if self.k_max == 0 {
            bail!("k_max must be >= 1");
        }
        if !(self.cg_rel_tolerance > 0.0 && self.cg_rel_tolerance < 1.0) {
            bail!("cg_rel_tolerance must lie in (0, 1), got {}", self.cg_rel_tolerance);
        }
        if let Some(a0) = self.alpha0 {
            if !(a0 > 0.0) {
                bail!("alpha0 must be positive, got {a0}");
            }
        }
        if let Some(rho) = self.rho {
            if !(rho > 0.0) {
                bail!("rho must be positive, got {rho}");
            }
        }
        if let Some(norm) = self.source_norm {
            if !(norm > 0.0) {
                bail!("source_norm must be positive, got {norm}");
            }
        }
        if !(self.elliptic_c_value >= 0.0) {
            bail!("elliptic_c_value must be nonnegative, got {}", self.elliptic_c_value);
        }
        if self.problem == ProblemKind::Diagonal {
            if !(self.sigma_p > 0.0) {
                bail!("sigma_p must be positive, got {}", self.sigma_p);
            }
            if !(self.gamma >= 0.0) {
                bail!("gamma must be nonnegative, got {}", self.gamma);
            }
        }
        Ok(())
    }

    pub fn problem_label(&self) -> &'static str {
        match self.problem {
            ProblemKind::Diagonal => "diagonal",
            ProblemKind::Elliptic => "elliptic",
        }
    }

    pub fn source_label(&self) -> &'static str {
        match self.source_form {
            SourceFormKind::Power => "power",
            SourceFormKind::Range => "range",
        }
    }

    /// The rate exponent the theory predicts for this configuration:
    /// `nu/(1+nu)` for power-form sources, `1/2` for range form.
    pub fn theory_exponent(&self) -> f64 {
        match self.source_form {
            SourceFormKind::Power => self.nu / (1.0 + self.nu),
            SourceFormKind::Range => 0.5,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_toml() -> String {
        r#"
            problem = "diagonal"
            n = 16
            deltas = [1e-2, 1e-3]
            seeds = [1, 2]
        "#
        .to_string()
    }

    #[test]
    fn parses_minimal_config_with_defaults() {
        let cfg: ExperimentConfig = toml::from_str(&base_toml()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.tau, 2.5);
        assert_eq!(cfg.c0, 0.25);
        assert_eq!(cfg.k_max, 60);
        assert_eq!(cfg.source_form, SourceFormKind::Power);
        assert_eq!(cfg.rule, RuleKind::Posterior);
        assert_eq!(cfg.theory_exponent(), 0.5);
    }

    #[test]
    fn rejects_nondecreasing_deltas() {
        let toml_text = base_toml().replace("[1e-2, 1e-3]", "[1e-3, 1e-2]");
        let cfg: ExperimentConfig = toml::from_str(&toml_text).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_empty_seeds() {
        let toml_text = base_toml().replace("[1, 2]", "[]");
        let cfg: ExperimentConfig = toml::from_str(&toml_text).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_unknown_keys() {
        let toml_text = format!("{}\nbogus = 3\n", base_toml());
        assert!(toml::from_str::<ExperimentConfig>(&toml_text).is_err());
    }

    #[test]
    fn range_form_theory_exponent_is_half() {
        let toml_text = format!("{}\nsource_form = \"range\"\nnu = 2.0\n", base_toml());
        let cfg: ExperimentConfig = toml::from_str(&toml_text).unwrap();
        assert_eq!(cfg.theory_exponent(), 0.5);
    }
}
