//! Exact event-driven evolution.
//!
//! Between collisions every particle follows `q(t) = q + v t - t²/2`, so all
//! gaps `q_{i+1} - q_i` are linear in time and the floor height `q_1` is a
//! parabola. The next event is therefore found in closed form and the
//! trajectory is advanced collision by collision without any time stepping.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::{is_degenerate, MassProfile, PhaseState};

/// Tolerance used when checking that a collision is applied at contact.
pub const CONTACT_TOL: f64 = 1e-9;

/// Number of trailing events kept for the burst diagnostic.
pub const BURST_TAIL: usize = 100;

/// Collision type: `Floor` is `σ = 0`, `Pair(i)` is `σ = i` for the bond `(i, i+1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Collision {
    Floor,
    Pair(usize),
}

impl Collision {
    pub fn sigma(self) -> usize {
        match self {
            Collision::Floor => 0,
            Collision::Pair(i) => i,
        }
    }

    pub fn from_sigma(sigma: usize, n: usize) -> Result<Self> {
        match sigma {
            0 => Ok(Collision::Floor),
            i if i < n => Ok(Collision::Pair(i)),
            i => Err(Error::Index { index: i, max: n - 1 }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Relative separation below which two candidate events count as simultaneous.
    pub tol_tie: f64,
    /// Maximum number of events tolerated inside one burst window.
    pub burst_limit: usize,
    pub burst_window: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            tol_tie: 1e-12,
            burst_limit: 10_000,
            burst_window: 1.0,
        }
    }
}

/// One collision. `q` holds the positions at contact, after snapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionEvent {
    pub t: f64,
    pub kind: Collision,
    pub q: Vec<f64>,
    pub v_pre: Vec<f64>,
    pub v_post: Vec<f64>,
}

impl CollisionEvent {
    pub fn sigma(&self) -> usize {
        self.kind.sigma()
    }

    /// The state at contact just before the velocity map.
    pub fn state_pre(&self, energy_target: f64) -> PhaseState {
        PhaseState::from_parts(self.q.clone(), self.v_pre.clone(), energy_target)
    }

    pub fn state_post(&self, energy_target: f64) -> PhaseState {
        PhaseState::from_parts(self.q.clone(), self.v_post.clone(), energy_target)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SymbolicSequence {
    pub sigmas: Vec<usize>,
    pub times: Vec<f64>,
}

impl SymbolicSequence {
    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }

    pub fn push(&mut self, sigma: usize, t: f64) -> Result<()> {
        if let Some(&last) = self.times.last() {
            if t <= last {
                return Err(Error::InternalConsistency(format!(
                    "event time {t} does not follow {last}"
                )));
            }
        }
        self.sigmas.push(sigma);
        self.times.push(t);
        Ok(())
    }

    pub fn from_events(events: &[CollisionEvent]) -> Self {
        Self {
            sigmas: events.iter().map(|e| e.sigma()).collect(),
            times: events.iter().map(|e| e.t).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NextEvent {
    pub dt: f64,
    pub kind: Collision,
}

/// Time until the lowest particle reaches the floor: the positive root of
/// `q_1 + v_1 t - t²/2 = 0`, written without cancellation for `v_1 < 0`.
pub fn floor_time(q1: f64, v1: f64) -> f64 {
    let disc = (v1 * v1 + 2.0 * q1.max(0.0)).sqrt();
    if v1 >= 0.0 {
        v1 + disc
    } else if disc - v1 > 0.0 {
        2.0 * q1.max(0.0) / (disc - v1)
    } else {
        0.0
    }
}

/// All collisions that would happen if each were the only one: the floor and
/// every approaching pair.
pub fn candidate_times(state: &PhaseState) -> Vec<(f64, Collision)> {
    let (q, v) = (state.q(), state.v());
    let mut out = Vec::with_capacity(q.len());
    out.push((floor_time(q[0], v[0]), Collision::Floor));
    for i in 1..q.len() {
        let w = v[i - 1] - v[i];
        if w > 0.0 {
            let gap = (q[i] - q[i - 1]).max(0.0);
            out.push((gap / w, Collision::Pair(i)));
        }
    }
    out
}

/// The next collision of a nondegenerate state.
///
/// Fails with [`Error::Singularity`] when the two earliest candidates are closer
/// than `tol_tie` relative to the earlier one, and with [`Error::Degenerate`]
/// when particles rest on the floor.
pub fn next_event(state: &PhaseState, cfg: &FlowConfig) -> Result<NextEvent> {
    let deg = is_degenerate(state);
    if deg.degenerate {
        return Err(Error::Degenerate { k: deg.k });
    }
    let cands = candidate_times(state);
    let mut first = cands[0];
    let mut second: Option<(f64, Collision)> = None;
    for &c in &cands[1..] {
        if c.0 < first.0 {
            second = Some(first);
            first = c;
        } else if second.is_none_or(|s| c.0 < s.0) {
            second = Some(c);
        }
    }
    if let Some(s) = second {
        let separation = s.0 - first.0;
        if separation <= cfg.tol_tie * first.0 {
            return Err(Error::Singularity {
                t: first.0,
                first: first.1.sigma(),
                second: s.1.sigma(),
                separation,
            });
        }
    }
    Ok(NextEvent {
        dt: first.0,
        kind: first.1,
    })
}

pub(crate) fn fly(state: &PhaseState, dt: f64) -> PhaseState {
    let q = state
        .q()
        .iter()
        .zip(state.v())
        .map(|(q, v)| q + dt * (v - 0.5 * dt))
        .collect();
    let v = state.v().iter().map(|v| v - dt).collect();
    PhaseState::from_parts(q, v, state.energy_target())
}

/// Closed-form flight over `dt`. Refuses to cross the next collision.
pub fn free_flight(state: &PhaseState, dt: f64) -> Result<PhaseState> {
    if !(dt >= 0.0 && dt.is_finite()) {
        return Err(Error::Contract(format!("flight time {dt} must be nonnegative")));
    }
    if dt == 0.0 {
        return Ok(state.clone());
    }
    let limit = candidate_times(state)
        .into_iter()
        .map(|c| c.0)
        .fold(f64::INFINITY, f64::min);
    if dt > limit * (1.0 + 1e-12) {
        return Err(Error::Contract(format!(
            "flight of {dt} crosses the next collision at {limit}"
        )));
    }
    Ok(fly(state, dt))
}

/// Elastic collision of bond `i`, `v_i⁺ = γ v_i⁻ + (1-γ) v_{i+1}⁻`,
/// `v_{i+1}⁺ = (1+γ) v_i⁻ - γ v_{i+1}⁻`. Snaps `q_i := q_{i+1}`.
pub fn apply_pair_collision(mp: &MassProfile, state: &PhaseState, i: usize) -> Result<PhaseState> {
    let g = mp.gamma(i)?;
    let (a, b) = (i - 1, i);
    let (q, v) = (state.q(), state.v());
    if (q[b] - q[a]).abs() > CONTACT_TOL * (1.0 + q[b].abs()) {
        return Err(Error::Contract(format!(
            "pair {i} is not in contact: gap {}",
            q[b] - q[a]
        )));
    }
    if !(v[a] > v[b]) {
        return Err(Error::Contract(format!(
            "pair {i} is not approaching: v = ({}, {})",
            v[a], v[b]
        )));
    }
    let mut out = state.clone();
    out.q_mut()[a] = q[b];
    let (va, vb) = (v[a], v[b]);
    let nv = out.v_mut();
    nv[a] = g * va + (1.0 - g) * vb;
    nv[b] = (1.0 + g) * va - g * vb;
    if !(nv[a] < nv[b]) {
        return Err(Error::InternalConsistency(format!(
            "pair {i} failed to separate: v⁺ = ({}, {})",
            nv[a], nv[b]
        )));
    }
    Ok(out)
}

/// Floor reflection `v_1⁺ = -v_1⁻`. Snaps `q_1 := 0`.
pub fn apply_floor_collision(state: &PhaseState) -> Result<PhaseState> {
    let (q1, v1) = (state.q()[0], state.v()[0]);
    if q1.abs() > CONTACT_TOL {
        return Err(Error::Contract(format!("floor collision at height {q1}")));
    }
    if !(v1 < 0.0) {
        return Err(Error::Contract(format!(
            "floor collision with upward velocity {v1}"
        )));
    }
    let mut out = state.clone();
    out.q_mut()[0] = 0.0;
    out.v_mut()[0] = -v1;
    Ok(out)
}

pub fn apply_collision(mp: &MassProfile, state: &PhaseState, kind: Collision) -> Result<PhaseState> {
    match kind {
        Collision::Floor => apply_floor_collision(state),
        Collision::Pair(i) => apply_pair_collision(mp, state, i),
    }
}

/// Diagnostics attached to an accumulation-guard trigger.
///
/// `oscillation[j]` is `sup - inf` of particle `j`'s post-collision velocity over
/// the last [`BURST_TAIL`] events; the two halves split that tail in time order.
/// Particles `1..=participants` are those touched by a collision in the tail.
/// `tail_profile[k]` is the largest oscillation among them over tail events
/// `k..`, the Cauchy-type quantity that must shrink if velocities converge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurstReport {
    pub t: f64,
    pub events_in_window: usize,
    pub window: f64,
    pub limit: usize,
    pub total_events: usize,
    pub oscillation: Vec<f64>,
    pub oscillation_first_half: Vec<f64>,
    pub oscillation_second_half: Vec<f64>,
    pub participants: usize,
    pub tail_profile: Vec<f64>,
    pub tail_times: Vec<f64>,
    pub tail_sigmas: Vec<usize>,
    pub tail_velocities: Vec<Vec<f64>>,
}

fn oscillation(rows: &[&Vec<f64>], n: usize) -> Vec<f64> {
    (0..n)
        .map(|j| {
            let (lo, hi) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                (lo.min(r[j]), hi.max(r[j]))
            });
            if rows.is_empty() {
                0.0
            } else {
                hi - lo
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
struct BurstGuard {
    window: VecDeque<f64>,
    tail: VecDeque<(f64, usize, Vec<f64>)>,
    max_in_window: usize,
}

impl BurstGuard {
    fn new() -> Self {
        Self {
            window: VecDeque::new(),
            tail: VecDeque::with_capacity(BURST_TAIL + 1),
            max_in_window: 0,
        }
    }

    fn record(&mut self, ev: &CollisionEvent, cfg: &FlowConfig, total: usize) -> Result<()> {
        self.window.push_back(ev.t);
        while let Some(&front) = self.window.front() {
            if ev.t - front > cfg.burst_window {
                self.window.pop_front();
            } else {
                break;
            }
        }
        self.tail.push_back((ev.t, ev.sigma(), ev.v_post.clone()));
        if self.tail.len() > BURST_TAIL {
            self.tail.pop_front();
        }
        self.max_in_window = self.max_in_window.max(self.window.len());
        if self.window.len() > cfg.burst_limit {
            return Err(Error::AccumulationGuard(Box::new(self.report(ev.t, cfg, total))));
        }
        Ok(())
    }

    fn report(&self, t: f64, cfg: &FlowConfig, total: usize) -> BurstReport {
        let n = self.tail.front().map_or(0, |r| r.2.len());
        let rows: Vec<&Vec<f64>> = self.tail.iter().map(|r| &r.2).collect();
        let half = rows.len() / 2;
        let participants = self.tail.iter().map(|r| r.1 + 1).max().unwrap_or(0).min(n);
        let mut tail_profile = vec![0.0; rows.len()];
        let (mut lo, mut hi) = (vec![f64::INFINITY; participants], vec![f64::NEG_INFINITY; participants]);
        for k in (0..rows.len()).rev() {
            for j in 0..participants {
                lo[j] = lo[j].min(rows[k][j]);
                hi[j] = hi[j].max(rows[k][j]);
            }
            tail_profile[k] = (0..participants).map(|j| hi[j] - lo[j]).fold(0.0, f64::max);
        }
        BurstReport {
            t,
            events_in_window: self.window.len(),
            window: cfg.burst_window,
            limit: cfg.burst_limit,
            total_events: total,
            oscillation: oscillation(&rows, n),
            oscillation_first_half: oscillation(&rows[..half], n),
            oscillation_second_half: oscillation(&rows[half..], n),
            participants,
            tail_profile,
            tail_times: self.tail.iter().map(|r| r.0).collect(),
            tail_sigmas: self.tail.iter().map(|r| r.1).collect(),
            tail_velocities: self.tail.iter().map(|r| r.2.clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowDiagnostics {
    pub events: usize,
    pub elapsed: f64,
    /// Events per unit time over the whole run.
    pub event_rate: f64,
    /// Largest number of events seen inside one burst window.
    pub max_burst: usize,
    /// `max |H - H0|` sampled after every collision.
    pub max_energy_drift: f64,
}

/// Stateful trajectory stepping one collision at a time.
#[derive(Debug, Clone)]
pub struct Flow<'a> {
    mp: &'a MassProfile,
    state: PhaseState,
    t: f64,
    cfg: FlowConfig,
    guard: BurstGuard,
    events: usize,
    max_energy_drift: f64,
    t_start: f64,
    last_kind: Option<Collision>,
}

impl<'a> Flow<'a> {
    /// Starts at absolute time `t0`. Degenerate states are refused.
    pub fn new(mp: &'a MassProfile, state: PhaseState, t0: f64, cfg: FlowConfig) -> Result<Self> {
        if state.n() != mp.n() {
            return Err(Error::Dimension {
                expected: mp.n(),
                got: state.n(),
            });
        }
        let deg = is_degenerate(&state);
        if deg.degenerate {
            return Err(Error::Degenerate { k: deg.k });
        }
        Ok(Self {
            mp,
            state,
            t: t0,
            cfg,
            guard: BurstGuard::new(),
            events: 0,
            max_energy_drift: 0.0,
            t_start: t0,
            last_kind: None,
        })
    }

    pub fn state(&self) -> &PhaseState {
        &self.state
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn mass_profile(&self) -> &MassProfile {
        self.mp
    }

    pub fn peek(&self) -> Result<NextEvent> {
        next_event(&self.state, &self.cfg)
    }

    /// Flies to the next collision and applies it.
    pub fn step(&mut self) -> Result<CollisionEvent> {
        let next = self.peek()?;
        self.collide_after(next)
    }

    fn collide_after(&mut self, next: NextEvent) -> Result<CollisionEvent> {
        // a collision coinciding with the previous one, e.g. a pair contact at the floor
        if let Some(last) = self.last_kind {
            if next.dt <= self.cfg.tol_tie * self.t.abs() || next.dt == 0.0 {
                return Err(Error::Singularity {
                    t: self.t,
                    first: last.sigma(),
                    second: next.kind.sigma(),
                    separation: next.dt,
                });
            }
        }
        let mut pre = fly(&self.state, next.dt);
        match next.kind {
            Collision::Floor => pre.q_mut()[0] = 0.0,
            Collision::Pair(i) => {
                let top = pre.q()[i];
                pre.q_mut()[i - 1] = top;
            }
        }
        check_ordering(&pre)?;
        let post = apply_collision(self.mp, &pre, next.kind)?;
        self.t += next.dt;
        let ev = CollisionEvent {
            t: self.t,
            kind: next.kind,
            q: post.q().to_vec(),
            v_pre: pre.v().to_vec(),
            v_post: post.v().to_vec(),
        };
        self.state = post;
        self.events += 1;
        self.last_kind = Some(next.kind);
        let drift = (self.state.energy(self.mp) - self.state.energy_target()).abs();
        self.max_energy_drift = self.max_energy_drift.max(drift);
        self.guard.record(&ev, &self.cfg, self.events)?;
        Ok(ev)
    }

    /// Steps through every collision before `t_end`, then flies to `t_end`.
    pub fn run_until(&mut self, t_end: f64, mut sink: impl FnMut(&CollisionEvent)) -> Result<()> {
        loop {
            let next = self.peek()?;
            if self.t + next.dt >= t_end {
                let dt = (t_end - self.t).max(0.0);
                self.state = fly(&self.state, dt);
                check_ordering(&self.state)?;
                self.t = t_end;
                return Ok(());
            }
            let ev = self.collide_after(next)?;
            sink(&ev);
        }
    }

    pub fn diagnostics(&self) -> FlowDiagnostics {
        let elapsed = self.t - self.t_start;
        FlowDiagnostics {
            events: self.events,
            elapsed,
            event_rate: if elapsed > 0.0 {
                self.events as f64 / elapsed
            } else {
                0.0
            },
            max_burst: self.guard.max_in_window,
            max_energy_drift: self.max_energy_drift,
        }
    }
}

fn check_ordering(state: &PhaseState) -> Result<()> {
    let q = state.q();
    if q[0] < 0.0 {
        return Err(Error::InternalConsistency(format!(
            "particle 1 below the floor at {}",
            q[0]
        )));
    }
    if let Some(i) = q.windows(2).position(|w| w[0] > w[1]) {
        return Err(Error::InternalConsistency(format!(
            "particles {} and {} out of order by {:e}",
            i + 1,
            i + 2,
            q[i] - q[i + 1]
        )));
    }
    Ok(())
}

/// Stopping rule for [`advance`]; whichever limit is reached first applies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub max_events: Option<usize>,
    pub max_time: Option<f64>,
}

impl Budget {
    pub fn events(n: usize) -> Self {
        Self {
            max_events: Some(n),
            max_time: None,
        }
    }

    pub fn time(t: f64) -> Self {
        Self {
            max_events: None,
            max_time: Some(t),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Advance {
    pub state: PhaseState,
    /// Elapsed time; equals `max_time` when the time budget was the binding one.
    pub t: f64,
    pub events: Vec<CollisionEvent>,
    pub sequence: SymbolicSequence,
    pub diagnostics: FlowDiagnostics,
}

/// Evolves `state` until the budget is exhausted, recording every collision.
pub fn advance(
    mp: &MassProfile,
    state: &PhaseState,
    budget: Budget,
    cfg: &FlowConfig,
) -> Result<Advance> {
    if budget.max_events.is_none() && budget.max_time.is_none() {
        return Err(Error::InvalidConfiguration(
            "budget needs max_events or max_time".into(),
        ));
    }
    let mut flow = Flow::new(mp, state.clone(), 0.0, *cfg)?;
    let mut events = Vec::new();
    let mut sequence = SymbolicSequence::default();
    let max_events = budget.max_events.unwrap_or(usize::MAX);
    let max_time = budget.max_time.unwrap_or(f64::INFINITY);
    while events.len() < max_events {
        let next = flow.peek()?;
        if flow.time() + next.dt >= max_time {
            flow.run_until(max_time, |_| {})?;
            break;
        }
        let ev = flow.collide_after(next)?;
        sequence.push(ev.sigma(), ev.t)?;
        events.push(ev);
    }
    Ok(Advance {
        state: flow.state().clone(),
        t: flow.time(),
        diagnostics: flow.diagnostics(),
        events,
        sequence,
    })
}

/// Evolves a degenerate state with its `k` resting particles frozen.
///
/// The frozen stack acts as the floor for particle `k+1`; such bounces are
/// recorded as collisions of type `k`. Nondegenerate states go through
/// [`advance`] unchanged.
pub fn advance_degenerate(
    mp: &MassProfile,
    state: &PhaseState,
    budget: Budget,
    cfg: &FlowConfig,
) -> Result<Advance> {
    let k = is_degenerate(state).k;
    if k == 0 {
        return advance(mp, state, budget, cfg);
    }
    let sub_mp = mp.upper_subsystem(k)?;
    let sub = PhaseState::from_parts(
        state.q()[k..].to_vec(),
        state.v()[k..].to_vec(),
        state.energy_target(),
    );
    let out = advance(&sub_mp, &sub, budget, cfg)?;
    let pad = |x: &[f64]| -> Vec<f64> {
        let mut full = vec![0.0; k];
        full.extend_from_slice(x);
        full
    };
    let events: Vec<CollisionEvent> = out
        .events
        .iter()
        .map(|e| CollisionEvent {
            t: e.t,
            kind: Collision::Pair(e.kind.sigma() + k),
            q: pad(&e.q),
            v_pre: pad(&e.v_pre),
            v_post: pad(&e.v_post),
        })
        .collect();
    let (q, v, h0) = out.state.into_parts();
    Ok(Advance {
        state: PhaseState::from_parts(pad(&q), pad(&v), h0),
        t: out.t,
        sequence: SymbolicSequence::from_events(&events),
        events,
        diagnostics: out.diagnostics,
    })
}
