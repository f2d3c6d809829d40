use std::path::{Path, PathBuf};

use fallball::flow::FlowConfig;
use fallball::lyapunov::{EstimatorConfig, CONVERGENCE_ABS, CONVERGENCE_REL};
use fallball::MassProfile;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Simulate,
    Lyapunov,
    Cone,
    Neutral,
    Sweep,
    DegenerateDemo,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Simulate => "simulate",
            Mode::Lyapunov => "lyapunov",
            Mode::Cone => "cone",
            Mode::Neutral => "neutral",
            Mode::Sweep => "sweep",
            Mode::DegenerateDemo => "degenerate-demo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EventFormat {
    #[default]
    Csv,
    Jsonl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialState {
    pub q: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetConfig {
    pub max_events: Option<usize>,
    pub max_time: Option<f64>,
    pub n_returns: usize,
    pub qr_stride: usize,
    /// Events per orbit for cone and neutral runs.
    pub horizon: usize,
    /// Sampled points for cone and neutral runs.
    pub samples: usize,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            max_events: Some(10_000),
            max_time: None,
            n_returns: 100_000,
            qr_stride: 1,
            horizon: 500,
            samples: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub tol_tie: f64,
    pub burst_limit: usize,
    pub burst_window: f64,
    pub convergence_rel: f64,
    pub convergence_abs: f64,
    /// Zero-exponent threshold as a multiple of the equal-mass calibration.
    pub zero_factor: f64,
    pub max_restarts: usize,
    pub restart_perturbation: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        let flow = FlowConfig::default();
        let est = EstimatorConfig::default();
        Self {
            tol_tie: flow.tol_tie,
            burst_limit: flow.burst_limit,
            burst_window: flow.burst_window,
            convergence_rel: CONVERGENCE_REL,
            convergence_abs: CONVERGENCE_ABS,
            zero_factor: 3.0,
            max_restarts: est.max_restarts,
            restart_perturbation: est.restart_perturbation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub format: EventFormat,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            format: EventFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub n: usize,
    /// Geometric profiles `m_i = r^(n-i)`; `r < 1` gives increasing masses.
    pub ratios: Vec<f64>,
    /// Explicit mass profiles appended after the ratio grid.
    pub profiles: Vec<Vec<f64>>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            n: 3,
            ratios: vec![1.0, 1.25, 1.5, 2.0, 3.0],
            profiles: Vec::new(),
        }
    }
}

impl SweepConfig {
    pub fn grid(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = self
            .ratios
            .iter()
            .map(|&r| (0..self.n).map(|i| r.powi((self.n - 1 - i) as i32)).collect())
            .collect();
        out.extend(self.profiles.iter().cloned());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub mode: Option<Mode>,
    pub masses: Vec<f64>,
    pub h0: f64,
    pub seed: u64,
    pub initial: Option<InitialState>,
    pub budget: BudgetConfig,
    pub tolerances: Tolerances,
    pub output: OutputConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: None,
            masses: Vec::new(),
            h0: 1.0,
            seed: 0,
            initial: None,
            budget: BudgetConfig::default(),
            tolerances: Tolerances::default(),
            output: OutputConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Command-line values that replace config-file fields when present.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Mass profile, comma separated (e.g. 3,2,1)
    #[arg(long, value_delimiter = ',', global = true)]
    pub masses: Option<Vec<f64>>,
    #[arg(long, global = true)]
    pub h0: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub max_events: Option<usize>,
    #[arg(long, global = true)]
    pub max_time: Option<f64>,
    #[arg(long, global = true)]
    pub n_returns: Option<usize>,
    #[arg(long, global = true)]
    pub qr_stride: Option<usize>,
    #[arg(long, global = true)]
    pub horizon: Option<usize>,
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, global = true)]
    pub format: Option<EventFormat>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config parse error: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(m) = &o.masses {
            self.masses = m.clone();
        }
        if let Some(x) = o.h0 {
            self.h0 = x;
        }
        if let Some(x) = o.seed {
            self.seed = x;
        }
        if let Some(x) = o.max_events {
            self.budget.max_events = Some(x);
        }
        if let Some(x) = o.max_time {
            self.budget.max_time = Some(x);
        }
        if let Some(x) = o.n_returns {
            self.budget.n_returns = x;
        }
        if let Some(x) = o.qr_stride {
            self.budget.qr_stride = x;
        }
        if let Some(x) = o.horizon {
            self.budget.horizon = x;
        }
        if let Some(x) = o.samples {
            self.budget.samples = x;
        }
        if let Some(x) = &o.out {
            self.output.dir = x.clone();
        }
        if let Some(x) = o.format {
            self.output.format = x;
        }
    }

    /// Checks the fields the selected mode relies on.
    pub fn validate(&self, mode: Mode) -> Result<(), CliError> {
        let bad = |field: &str, why: &str| Err(CliError::Config(format!("field `{field}`: {why}")));
        if !(self.h0 > 0.0 && self.h0.is_finite()) {
            return bad("h0", "must be a positive number");
        }
        let t = &self.tolerances;
        for (name, value) in [
            ("tolerances.tol_tie", t.tol_tie),
            ("tolerances.burst_window", t.burst_window),
            ("tolerances.convergence_rel", t.convergence_rel),
            ("tolerances.convergence_abs", t.convergence_abs),
            ("tolerances.zero_factor", t.zero_factor),
            ("tolerances.restart_perturbation", t.restart_perturbation),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return bad(name, "must be positive");
            }
        }
        if t.burst_limit == 0 {
            return bad("tolerances.burst_limit", "must be positive");
        }
        if let Some(x) = self.budget.max_time {
            if !(x >= 0.0 && x.is_finite()) {
                return bad("budget.max_time", "must be nonnegative");
            }
        }
        if self.budget.qr_stride == 0 {
            return bad("budget.qr_stride", "must be positive");
        }
        match mode {
            Mode::Sweep => {
                if self.sweep.n < 2 {
                    return bad("sweep.n", "needs at least two particles");
                }
                for (k, m) in self.sweep.grid().into_iter().enumerate() {
                    MassProfile::new(m).map_err(|e| CliError::Config(format!("sweep grid point {k}: {e}")))?;
                }
            }
            _ => {
                self.mass_profile()?;
            }
        }
        if matches!(mode, Mode::Lyapunov | Mode::Sweep) && self.budget.n_returns == 0 {
            return bad("budget.n_returns", "must be positive");
        }
        if matches!(mode, Mode::Cone | Mode::Neutral) && self.budget.samples == 0 {
            return bad("budget.samples", "must be positive");
        }
        if matches!(mode, Mode::DegenerateDemo) && self.initial.is_none() {
            return bad("initial", "degenerate-demo needs an explicit initial state");
        }
        if let Some(init) = &self.initial {
            if init.q.len() != self.masses.len() || init.v.len() != self.masses.len() {
                return bad("initial", "q and v need one entry per mass");
            }
        }
        Ok(())
    }

    pub fn mass_profile(&self) -> Result<MassProfile, CliError> {
        MassProfile::new(self.masses.clone()).map_err(|e| CliError::Config(format!("field `masses`: {e}")))
    }

    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            tol_tie: self.tolerances.tol_tie,
            burst_limit: self.tolerances.burst_limit,
            burst_window: self.tolerances.burst_window,
        }
    }

    pub fn estimator(&self, seed: u64) -> EstimatorConfig {
        EstimatorConfig {
            n_returns: self.budget.n_returns,
            qr_stride: self.budget.qr_stride,
            seed,
            max_restarts: self.tolerances.max_restarts,
            history_every: 100,
            restart_perturbation: self.tolerances.restart_perturbation,
        }
    }
}

/// Independent per-point seed derived from the master seed (SplitMix64 step).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_config() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            mode = "lyapunov"
            masses = [3.0, 2.0, 1.0]
            seed = 7
            [budget]
            n_returns = 2000
            [tolerances]
            burst_limit = 500
            [output]
            dir = "runs/a"
            format = "jsonl"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.mode, Some(Mode::Lyapunov));
        assert_eq!(cfg.budget.n_returns, 2000);
        assert_eq!(cfg.budget.qr_stride, 1);
        assert_eq!(cfg.tolerances.burst_limit, 500);
        assert_eq!(cfg.tolerances.tol_tie, 1e-12);
        assert_eq!(cfg.output.format, EventFormat::Jsonl);
        cfg.validate(Mode::Lyapunov).unwrap();
    }

    #[test]
    fn parse_errors_name_the_location() {
        let err = ExperimentConfig::from_toml("masses = [1.0, 2.0\nseed = 3").unwrap_err();
        assert!(err.to_string().contains("line"), "{err}");
        let err = ExperimentConfig::from_toml("masess = [1.0]").unwrap_err();
        assert!(err.to_string().contains("masess"), "{err}");
    }

    #[test]
    fn validation_names_the_field() {
        let mut cfg = ExperimentConfig { masses: vec![1.0], ..Default::default() };
        assert!(cfg.validate(Mode::Simulate).unwrap_err().to_string().contains("masses"));
        cfg.masses = vec![1.0, 1.0];
        cfg.tolerances.tol_tie = -1.0;
        assert!(cfg.validate(Mode::Simulate).unwrap_err().to_string().contains("tol_tie"));
        cfg.tolerances.tol_tie = 1e-12;
        assert!(cfg.validate(Mode::DegenerateDemo).is_err());
    }

    #[test]
    fn overrides_win() {
        let mut cfg = ExperimentConfig { masses: vec![1.0, 1.0], ..Default::default() };
        cfg.apply(&Overrides {
            masses: Some(vec![2.0, 1.0]),
            seed: Some(5),
            max_events: Some(0),
            ..Default::default()
        });
        assert_eq!(cfg.masses, vec![2.0, 1.0]);
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.budget.max_events, Some(0));
    }

    #[test]
    fn sweep_grid_and_seeds() {
        let s = SweepConfig { n: 3, ratios: vec![1.0, 2.0, 0.5], profiles: vec![vec![3.0, 2.0, 1.0]] };
        let g = s.grid();
        assert_eq!(g[1], vec![4.0, 2.0, 1.0]);
        assert_eq!(g[2], vec![0.25, 0.5, 1.0]);
        assert_eq!(g.len(), 4);
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_eq!(derive_seed(9, 4), derive_seed(9, 4));
    }
}
