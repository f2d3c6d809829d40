//! Collision-to-collision return map and its Lyapunov spectrum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{CollisionEvent, Flow, FlowConfig};
use crate::state::{normalize_to_shell, MassProfile, PhaseState};
use crate::tangent::{self, orthonormalize, random_section_frame, restore_section, TangentVector};

/// A state right after a collision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionPoint {
    pub state: PhaseState,
    pub last_sigma: usize,
    pub t_abs: f64,
}

impl SectionPoint {
    pub fn from_event(e: &CollisionEvent, energy_target: f64) -> Self {
        Self {
            state: e.state_post(energy_target),
            last_sigma: e.sigma(),
            t_abs: e.t,
        }
    }

    /// Whether the last collision is separating, as it must be right after it.
    pub fn is_outgoing(&self) -> bool {
        let v = self.state.v();
        match self.last_sigma {
            0 => v[0] > 0.0,
            i => v[i - 1] < v[i],
        }
    }
}

/// Upper bound on the time between consecutive collisions on the shell `H = energy`.
///
/// The lowest particle reaches the floor within `2 sqrt(2H/m_1)` of any instant.
pub fn return_time_cap(mp: &MassProfile, energy: f64) -> f64 {
    2.0 * (2.0 * energy / mp.masses()[0]).sqrt()
}

/// Moves from the first collision strictly after `state` onto the section.
pub fn enter_section(mp: &MassProfile, state: &PhaseState, cfg: &FlowConfig) -> Result<SectionPoint> {
    let mut flow = Flow::new(mp, state.clone(), 0.0, *cfg)?;
    let e = flow.step()?;
    Ok(SectionPoint::from_event(&e, state.energy_target()))
}

fn check_return(mp: &MassProfile, sp: &SectionPoint, dt: f64) -> Result<()> {
    let cap = return_time_cap(mp, sp.state.energy_target());
    if !(dt > 0.0) || dt > cap * (1.0 + 1e-12) {
        return Err(Error::InternalConsistency(format!(
            "return time {dt} outside (0, {cap}]"
        )));
    }
    Ok(())
}

/// One application of the return map. Also yields the collision that was crossed.
pub fn poincare_step(mp: &MassProfile, sp: &SectionPoint, cfg: &FlowConfig) -> Result<(SectionPoint, f64, CollisionEvent)> {
    let mut flow = Flow::new(mp, sp.state.clone(), sp.t_abs, *cfg)?;
    let e = flow.step()?;
    let dt = e.t - sp.t_abs;
    check_return(mp, sp, dt)?;
    Ok((SectionPoint::from_event(&e, sp.state.energy_target()), dt, e))
}

/// Carries `frame` across one return: identity in flight, then the collision jump.
pub fn cocycle_step(
    mp: &MassProfile,
    sp: &SectionPoint,
    frame: &[TangentVector],
    cfg: &FlowConfig,
) -> Result<(SectionPoint, Vec<TangentVector>, f64)> {
    let (next, dt, e) = poincare_step(mp, sp, cfg)?;
    let frame = jump_frame(mp, &e, frame)?;
    Ok((next, frame, dt))
}

fn jump_frame(mp: &MassProfile, e: &CollisionEvent, frame: &[TangentVector]) -> Result<Vec<TangentVector>> {
    let pre = e.state_pre(0.0);
    frame
        .iter()
        .map(|c| tangent::jump(mp, &pre, e.kind, c))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub n_returns: usize,
    pub qr_stride: usize,
    pub seed: u64,
    pub max_restarts: usize,
    /// Returns between recorded history rows.
    pub history_every: usize,
    /// Relative velocity perturbation used to restart off a singular orbit.
    pub restart_perturbation: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            n_returns: 100_000,
            qr_stride: 1,
            seed: 0,
            max_restarts: 10,
            history_every: 100,
            restart_perturbation: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub returns: usize,
    pub t: f64,
    /// Running map exponents in frame order (unsorted).
    pub map_exponents: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovEstimate {
    /// `2n - 2` exponents per return, descending.
    pub map_exponents: Vec<f64>,
    /// Map exponents divided by the mean return time.
    pub flow_exponents: Vec<f64>,
    pub mean_return_time: f64,
    pub history: Vec<HistoryRow>,
    pub n_returns: usize,
    pub restarts: usize,
    /// `max_k |λ_k + λ_{2n-1-k}|` over the map exponents.
    pub pairing_defect: f64,
}

impl LyapunovEstimate {
    pub fn max_abs_flow(&self) -> f64 {
        self.flow_exponents.iter().map(|x| x.abs()).fold(0.0, f64::max)
    }

    pub fn min_abs_flow(&self) -> f64 {
        self.flow_exponents
            .iter()
            .map(|x| x.abs())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs_map(&self) -> f64 {
        self.map_exponents.iter().map(|x| x.abs()).fold(0.0, f64::max)
    }

    /// Largest spread of each running exponent over the second half of the
    /// history, in flow units.
    pub fn oscillation(&self) -> Vec<f64> {
        let k = self.flow_exponents.len();
        let half = &self.history[self.history.len() / 2..];
        (0..k)
            .map(|j| {
                let mut vals = half.iter().map(|row| {
                    let mut sorted = row.map_exponents.clone();
                    sort_desc(&mut sorted);
                    sorted[j] * row.returns as f64 / row.t
                });
                let first = vals.next().unwrap_or(0.0);
                let (lo, hi) = vals.fold((first, first), |(lo, hi), x| (lo.min(x), hi.max(x)));
                hi - lo
            })
            .collect()
    }

    /// Whether every exponent's late-history spread is within `rel` of its
    /// value or below `abs_floor`.
    pub fn converged(&self, rel: f64, abs_floor: f64) -> bool {
        if self.history.len() < 4 {
            return false;
        }
        self.oscillation()
            .iter()
            .zip(&self.flow_exponents)
            .all(|(osc, lam)| *osc <= (rel * lam.abs()).max(abs_floor))
    }
}

fn sort_desc(x: &mut [f64]) {
    x.sort_by(|a, b| b.total_cmp(a));
}

pub fn pairing_defect(sorted_desc: &[f64]) -> f64 {
    let k = sorted_desc.len();
    (0..k / 2)
        .map(|j| (sorted_desc[j] + sorted_desc[k - 1 - j]).abs())
        .fold(0.0, f64::max)
}

struct Attempt {
    log_sums: Vec<f64>,
    elapsed: f64,
    history: Vec<HistoryRow>,
}

fn run_attempt(
    mp: &MassProfile,
    initial: &PhaseState,
    est: &EstimatorConfig,
    cfg: &FlowConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Attempt> {
    let n = mp.n();
    let mut frame = random_section_frame(n, rng);
    let mut flow = Flow::new(mp, initial.clone(), 0.0, *cfg)?;
    let first = flow.step()?;
    let t_start = first.t;
    let mut sp = SectionPoint::from_event(&first, initial.energy_target());
    let mut log_sums = vec![0.0; 2 * n - 2];
    let mut history = Vec::new();
    let stride = est.qr_stride.max(1);
    for r in 1..=est.n_returns {
        let e = flow.step()?;
        check_return(mp, &sp, e.t - sp.t_abs)?;
        frame = jump_frame(mp, &e, &frame)?;
        sp = SectionPoint::from_event(&e, initial.energy_target());
        if r % stride == 0 || r == est.n_returns {
            frame = frame.iter().map(restore_section).collect();
            for (s, d) in log_sums.iter_mut().zip(orthonormalize(&mut frame)) {
                *s += d.ln();
            }
        }
        if est.history_every > 0 && r % est.history_every == 0 {
            history.push(HistoryRow {
                returns: r,
                t: e.t - t_start,
                map_exponents: log_sums.iter().map(|s| s / r as f64).collect(),
            });
        }
    }
    Ok(Attempt {
        log_sums,
        elapsed: sp.t_abs - t_start,
        history,
    })
}

/// Benettin-style estimate of the return-map spectrum along the orbit of `initial`.
///
/// A singular orbit is abandoned and the estimate restarted from `initial`
/// with velocities perturbed by `restart_perturbation` and rescaled to the shell.
pub fn estimate_spectrum(
    mp: &MassProfile,
    initial: &PhaseState,
    est: &EstimatorConfig,
    cfg: &FlowConfig,
) -> Result<LyapunovEstimate> {
    if est.n_returns == 0 {
        return Err(Error::InvalidConfiguration("n_returns must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(est.seed);
    let mut start = initial.clone();
    let mut restarts = 0;
    let attempt = loop {
        match run_attempt(mp, &start, est, cfg, &mut rng) {
            Ok(a) => break a,
            Err(Error::Singularity { .. }) if restarts < est.max_restarts => {
                restarts += 1;
                let v: Vec<f64> = initial
                    .v()
                    .iter()
                    .map(|v| {
                        let z: f64 = rng.sample(StandardNormal);
                        v + est.restart_perturbation * z * v.abs().max(1.0)
                    })
                    .collect();
                start = normalize_to_shell(mp, initial.q(), &v, initial.energy_target())?;
            }
            Err(e) => return Err(e),
        }
    };
    let nr = est.n_returns as f64;
    let mut map_exponents: Vec<f64> = attempt.log_sums.iter().map(|s| s / nr).collect();
    sort_desc(&mut map_exponents);
    let mean_return_time = attempt.elapsed / nr;
    let flow_exponents = map_exponents.iter().map(|l| l / mean_return_time).collect();
    Ok(LyapunovEstimate {
        pairing_defect: pairing_defect(&map_exponents),
        map_exponents,
        flow_exponents,
        mean_return_time,
        history: attempt.history,
        n_returns: est.n_returns,
        restarts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum ThresholdRule {
    Absolute { threshold: f64 },
    /// `factor` times the largest `|λ|` of an equal-mass calibration run.
    Calibration { calibration_max: f64, factor: f64 },
}

impl ThresholdRule {
    pub fn calibrated(calibration_max: f64) -> Self {
        Self::Calibration {
            calibration_max,
            factor: 3.0,
        }
    }

    pub fn threshold(&self) -> f64 {
        match *self {
            Self::Absolute { threshold } => threshold,
            Self::Calibration {
                calibration_max,
                factor,
            } => factor * calibration_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "count")]
pub enum ZeroCount {
    Count(usize),
    Inconclusive,
}

/// Default convergence rule: late-history spread within 10 % of each exponent,
/// or below an absolute floor for exponents that are themselves near zero.
pub const CONVERGENCE_REL: f64 = 0.1;
pub const CONVERGENCE_ABS: f64 = 1e-3;

/// Number of flow exponents with `|λ|` below the rule's threshold.
pub fn zero_exponent_count(est: &LyapunovEstimate, rule: &ThresholdRule) -> ZeroCount {
    zero_exponent_count_with(est, rule, CONVERGENCE_REL, CONVERGENCE_ABS)
}

/// As [`zero_exponent_count`] with an explicit convergence rule.
pub fn zero_exponent_count_with(est: &LyapunovEstimate, rule: &ThresholdRule, rel: f64, abs_floor: f64) -> ZeroCount {
    if !est.converged(rel, abs_floor) {
        return ZeroCount::Inconclusive;
    }
    let thr = rule.threshold();
    ZeroCount::Count(est.flow_exponents.iter().filter(|l| l.abs() < thr).count())
}
