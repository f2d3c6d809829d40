//! The quadratic form `Q = <δh, δv>`, its cone, and neutral subspaces of orbit segments.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::flow::{advance, Budget, Collision, CollisionEvent, FlowConfig, SymbolicSequence};
use crate::state::{MassProfile, PhaseState};
use crate::tangent::{self, TangentVector};

/// Relative band around `Q = 0` treated as the cone boundary.
pub const BOUNDARY_BAND: f64 = 1e-12;

/// A vector counts as strictly inside the cone once `Q > STRICT_BAND ‖tv‖²`.
pub const STRICT_BAND: f64 = 1e-10;

/// Singular values below this fraction of the largest count as zero.
pub const RANK_TOL: f64 = 1e-10;

pub fn q_form(tv: &TangentVector) -> f64 {
    tv.dh.iter().zip(&tv.dv).map(|(a, b)| a * b).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConeClass {
    Interior,
    Boundary,
    Outside,
}

pub fn in_cone(tv: &TangentVector) -> ConeClass {
    let q = q_form(tv);
    if q.abs() <= BOUNDARY_BAND * tv.norm_sq() {
        ConeClass::Boundary
    } else if q > 0.0 {
        ConeClass::Interior
    } else {
        ConeClass::Outside
    }
}

/// `ΔQ = γ_i c_i w (δv_{i+1} - δv_i)²` across a collision of bond `i`.
pub fn q_jump_pair_delta(mp: &MassProfile, i: usize, w: f64, tv_pre: &TangentVector) -> Result<f64> {
    let (g, c) = (mp.gamma(i)?, mp.c(i)?);
    check_len(mp.n(), tv_pre.n())?;
    if !(w > 0.0) {
        return Err(Error::Contract(format!("approach speed w = {w} must be positive")));
    }
    let gap = tv_pre.dv[i] - tv_pre.dv[i - 1];
    Ok(g * c * w * gap * gap)
}

/// `ΔQ = -2 δh_1² / (m_1 v_1)` across a floor bounce; nonnegative since `v_1 < 0`.
pub fn q_jump_floor_delta(mp: &MassProfile, v1_pre: f64, tv_pre: &TangentVector) -> Result<f64> {
    check_len(mp.n(), tv_pre.n())?;
    if !(v1_pre < 0.0) {
        return Err(Error::Contract(format!("floor bounce needs v_1 < 0, got {v1_pre}")));
    }
    let dh1 = tv_pre.dh[0];
    Ok(-2.0 * dh1 * dh1 / (mp.masses()[0] * v1_pre))
}

fn closed_form_delta(mp: &MassProfile, e: &CollisionEvent, tv: &TangentVector) -> Result<f64> {
    match e.kind {
        Collision::Floor => q_jump_floor_delta(mp, e.v_pre[0], tv),
        Collision::Pair(i) => q_jump_pair_delta(mp, i, e.v_pre[i - 1] - e.v_pre[i], tv),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventDelta {
    pub event: usize,
    pub sigma: usize,
    /// `Q` after the jump minus `Q` before it.
    pub delta_q: f64,
    pub closed_form: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeReport {
    pub q_initial: f64,
    pub q_final: f64,
    pub per_event_deltas: Vec<EventDelta>,
    /// First event index after which the tracked vector stays strictly inside;
    /// `Some(0)` also when it starts strictly inside.
    pub strict_entry_event: Option<usize>,
    /// Whether the vector was rescaled to unit norm before every event.
    pub renormalized: bool,
}

impl ConeReport {
    pub fn min_delta(&self) -> f64 {
        self.per_event_deltas
            .iter()
            .map(|d| d.delta_q)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_closed_form_mismatch(&self) -> f64 {
        self.per_event_deltas
            .iter()
            .map(|d| (d.delta_q - d.closed_form).abs())
            .fold(0.0, f64::max)
    }
}

/// Carries `tv` through the tangent jumps of `events` and records every `ΔQ`.
///
/// With `renormalize` the vector is scaled to unit norm before each event, so
/// the deltas stay comparable along exponentially growing orbits while their
/// signs are unaffected. `q_final` then refers to the rescaled vector.
pub fn track_q(
    mp: &MassProfile,
    events: &[CollisionEvent],
    tv: &TangentVector,
    renormalize: bool,
) -> Result<ConeReport> {
    check_len(mp.n(), tv.n())?;
    let q_initial = q_form(tv);
    let mut cur = tv.clone();
    let mut deltas = Vec::with_capacity(events.len());
    // positions: 0 is the start, k + 1 is right after event k
    let mut last_bad = (q_initial <= STRICT_BAND * cur.norm_sq()).then_some(0);
    for (k, e) in events.iter().enumerate() {
        if renormalize {
            let norm = cur.norm();
            if norm > 0.0 {
                cur = cur.scaled(1.0 / norm);
            }
        }
        let pre = e.state_pre(0.0);
        let before = q_form(&cur);
        let closed_form = closed_form_delta(mp, e, &cur)?;
        cur = tangent::jump(mp, &pre, e.kind, &cur)?;
        let after = q_form(&cur);
        deltas.push(EventDelta {
            event: k,
            sigma: e.sigma(),
            delta_q: after - before,
            closed_form,
        });
        if after <= STRICT_BAND * cur.norm_sq() {
            last_bad = Some(k + 1);
        }
    }
    let strict_entry_event = match last_bad {
        None => Some(0),
        Some(p) if p < events.len() => Some(p),
        Some(_) => None,
    };
    Ok(ConeReport {
        q_initial,
        q_final: q_form(&cur),
        per_event_deltas: deltas,
        strict_entry_event,
        renormalized: renormalize,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `(δh; 0)`
    PureH,
    /// `(0; δv)`
    PureV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub direction: Direction,
    pub index: usize,
    pub initial: TangentVector,
    pub report: ConeReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrictScan {
    pub horizon: usize,
    pub directions: Vec<DirectionReport>,
    /// Event after which every tracked direction is strictly inside, if any.
    pub strict_entry_event: Option<usize>,
}

impl StrictScan {
    pub fn entered(&self, direction: Direction) -> bool {
        self.directions
            .iter()
            .filter(|d| d.direction == direction)
            .all(|d| d.report.strict_entry_event.is_some())
    }
}

/// Orthonormal basis of `{x ∈ R^n : Σ x_i = 0}`.
pub fn sum_zero_basis(n: usize) -> Vec<Vec<f64>> {
    (1..n)
        .map(|k| {
            // Helmert contrasts
            let s = ((k * (k + 1)) as f64).sqrt();
            let mut x = vec![0.0; n];
            x[..k].iter_mut().for_each(|e| *e = 1.0 / s);
            x[k] = -(k as f64) / s;
            x
        })
        .collect()
}

/// Tracks the pure-`δh` and pure-`δv` boundary directions over `horizon` events.
pub fn strict_invariance_scan(
    mp: &MassProfile,
    state: &PhaseState,
    horizon: usize,
    cfg: &FlowConfig,
) -> Result<StrictScan> {
    let run = advance(mp, state, Budget::events(horizon), cfg)?;
    let n = mp.n();
    let mut directions = Vec::with_capacity(2 * n - 2);
    for direction in [Direction::PureH, Direction::PureV] {
        for (index, b) in sum_zero_basis(n).into_iter().enumerate() {
            let initial = match direction {
                Direction::PureH => TangentVector { dh: b, dv: vec![0.0; n] },
                Direction::PureV => TangentVector { dh: vec![0.0; n], dv: b },
            };
            let report = track_q(mp, &run.events, &initial, true)?;
            directions.push(DirectionReport {
                direction,
                index,
                initial,
                report,
            });
        }
    }
    let strict_entry_event = directions
        .iter()
        .map(|d| d.report.strict_entry_event)
        .try_fold(0usize, |acc, e| e.map(|e| acc.max(e)));
    Ok(StrictScan {
        horizon,
        directions,
        strict_entry_event,
    })
}

/// Linear constraints on `R^n` kept in compressed form.
///
/// Stored rows are `σ_k v_kᵀ` of the stacked constraint matrix, which keeps
/// its singular values and row space while holding at most `n` rows.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    n: usize,
    rows: DMatrix<f64>,
}

impl ConstraintSet {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            rows: DMatrix::zeros(0, n),
        }
    }

    /// Adds `row / ‖row‖`; zero rows are ignored.
    pub fn add(&mut self, row: &[f64]) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return;
        }
        let k = self.rows.nrows();
        let mut m = self.rows.clone().resize_vertically(k + 1, 0.0);
        for (j, x) in row.iter().enumerate() {
            m[(k, j)] = x / norm;
        }
        if m.nrows() > self.n {
            let svd = m.svd(false, true);
            let vt = svd.v_t.expect("requested");
            let s = svd.singular_values;
            m = DMatrix::from_fn(s.len(), self.n, |r, c| s[r] * vt[(r, c)]);
        }
        self.rows = m;
    }

    fn padded_svd(&self) -> (DVector<f64>, DMatrix<f64>) {
        let k = self.rows.nrows();
        let m = self.rows.clone().resize_vertically(k.max(self.n), 0.0);
        let svd = m.svd(false, true);
        (svd.singular_values, svd.v_t.expect("requested"))
    }

    pub fn rank(&self) -> usize {
        if self.rows.nrows() == 0 {
            return 0;
        }
        let (s, _) = self.padded_svd();
        let max = s.max();
        s.iter().filter(|&&x| x > RANK_TOL * max).count()
    }

    /// Orthonormal basis of the common kernel of all rows.
    pub fn null_basis(&self) -> Vec<Vec<f64>> {
        if self.rows.nrows() == 0 {
            return (0..self.n)
                .map(|i| {
                    let mut e = vec![0.0; self.n];
                    e[i] = 1.0;
                    e
                })
                .collect();
        }
        let (s, vt) = self.padded_svd();
        let max = s.max();
        (0..s.len())
            .filter(|&r| s[r] <= RANK_TOL * max)
            .map(|r| vt.row(r).iter().copied().collect())
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.n - self.rank()
    }
}

/// Incremental neutral-space constraints along a symbolic sequence.
#[derive(Debug, Clone)]
pub struct NeutralTracker {
    n: usize,
    gammas: Vec<f64>,
    h_map: DMatrix<f64>,
    h_constraints: ConstraintSet,
    v_perm: Vec<usize>,
    v_constraints: ConstraintSet,
    rs: Vec<DMatrix<f64>>,
}

impl NeutralTracker {
    pub fn new(mp: &MassProfile) -> Self {
        let n = mp.n();
        let ones = vec![1.0; n];
        let mut h_constraints = ConstraintSet::new(n);
        h_constraints.add(&ones);
        let mut v_constraints = ConstraintSet::new(n);
        v_constraints.add(&ones);
        let rs = (1..n)
            .map(|i| tangent::r_matrix(mp, i).expect("bond in range").transpose())
            .collect();
        Self {
            n,
            gammas: mp.gammas().to_vec(),
            h_map: DMatrix::identity(n, n),
            h_constraints,
            v_perm: (0..n).collect(),
            v_constraints,
            rs,
        }
    }

    pub fn push(&mut self, sigma: usize) -> Result<()> {
        let kind = Collision::from_sigma(sigma, self.n)?;
        match kind {
            Collision::Floor => {
                let row: Vec<f64> = self.h_map.row(0).iter().copied().collect();
                self.h_constraints.add(&row);
            }
            Collision::Pair(i) => {
                self.h_map = &self.rs[i - 1] * &self.h_map;
                let (a, b) = (i - 1, i);
                if self.gammas[i - 1] == 0.0 {
                    self.v_perm.swap(a, b);
                } else {
                    // current δv_j is initial δv_{perm[j]}
                    let mut row = vec![0.0; self.n];
                    row[self.v_perm[a]] += 1.0;
                    row[self.v_perm[b]] -= 1.0;
                    self.v_constraints.add(&row);
                }
            }
        }
        Ok(())
    }

    pub fn dim_h(&self) -> usize {
        self.h_constraints.dim()
    }

    pub fn dim_v(&self) -> usize {
        self.v_constraints.dim()
    }

    pub fn basis_h(&self) -> Vec<Vec<f64>> {
        self.h_constraints.null_basis()
    }

    pub fn basis_v(&self) -> Vec<Vec<f64>> {
        self.v_constraints.null_basis()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeutralSpaceCertificate {
    pub segment: SymbolicSequence,
    pub basis_h: Vec<Vec<f64>>,
    pub basis_v: Vec<Vec<f64>>,
    pub dim_h: usize,
    pub dim_v: usize,
}

/// Initial `δh` (with `Σ δh = 0`) whose `(δh; 0)` stays `Q`-neutral along `sigmas`.
pub fn neutral_space_h(mp: &MassProfile, sigmas: &[usize]) -> Result<Vec<Vec<f64>>> {
    let mut tr = NeutralTracker::new(mp);
    for &s in sigmas {
        tr.push(s)?;
    }
    Ok(tr.basis_h())
}

/// Initial `δv` (with `Σ δv = 0`) whose `(0; δv)` keeps `Q = 0` along `sigmas`.
pub fn neutral_space_v(mp: &MassProfile, sigmas: &[usize]) -> Result<Vec<Vec<f64>>> {
    let mut tr = NeutralTracker::new(mp);
    for &s in sigmas {
        tr.push(s)?;
    }
    Ok(tr.basis_v())
}

pub fn certificate(mp: &MassProfile, segment: &SymbolicSequence) -> Result<NeutralSpaceCertificate> {
    let mut tr = NeutralTracker::new(mp);
    for &s in &segment.sigmas {
        tr.push(s)?;
    }
    let (basis_h, basis_v) = (tr.basis_h(), tr.basis_v());
    Ok(NeutralSpaceCertificate {
        segment: segment.clone(),
        dim_h: basis_h.len(),
        dim_v: basis_v.len(),
        basis_h,
        basis_v,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimensionPoint {
    pub length: usize,
    pub dim_h: usize,
    pub dim_v: usize,
}

/// Neutral dimensions after every prefix of `sigmas`, starting with the empty one.
pub fn dimension_curve(mp: &MassProfile, sigmas: &[usize]) -> Result<Vec<DimensionPoint>> {
    let mut tr = NeutralTracker::new(mp);
    let mut out = Vec::with_capacity(sigmas.len() + 1);
    let mut point = DimensionPoint {
        length: 0,
        dim_h: tr.dim_h(),
        dim_v: tr.dim_v(),
    };
    out.push(point);
    for (k, &s) in sigmas.iter().enumerate() {
        tr.push(s)?;
        point.length = k + 1;
        if point.dim_h > 0 {
            point.dim_h = tr.dim_h();
        }
        if point.dim_v > 0 {
            point.dim_v = tr.dim_v();
        }
        out.push(point);
    }
    Ok(out)
}

/// An orbit piece with the states needed to evaluate the neutral invariants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub initial: PhaseState,
    pub t0: f64,
    pub events: Vec<CollisionEvent>,
}

impl Segment {
    pub fn record(mp: &MassProfile, state: &PhaseState, n_events: usize, cfg: &FlowConfig) -> Result<Self> {
        let run = advance(mp, state, Budget::events(n_events), cfg)?;
        Ok(Self {
            initial: state.clone(),
            t0: 0.0,
            events: run.events,
        })
    }

    /// The events strictly before the first floor bounce.
    pub fn before_first_floor(&self) -> Self {
        let end = self
            .events
            .iter()
            .position(|e| e.kind == Collision::Floor)
            .unwrap_or(self.events.len());
        Self {
            initial: self.initial.clone(),
            t0: self.t0,
            events: self.events[..end].to_vec(),
        }
    }

    pub fn sequence(&self) -> SymbolicSequence {
        SymbolicSequence::from_events(&self.events)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorChecks {
    /// `max |Σ δh_i v_i|` over the start and all events.
    pub max_dh_dot_v: f64,
    /// Largest residual of a least-squares line through `w(t) = Σ q_i δh_i`.
    pub fit_residual: f64,
    /// Spread of `Σ δh_i² / m_i`.
    pub weighted_norm_spread: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantReport {
    pub vectors: Vec<VectorChecks>,
    pub passed: bool,
}

pub const DH_DOT_V_TOL: f64 = 1e-10;
pub const FIT_TOL: f64 = 1e-9;
pub const WEIGHTED_NORM_TOL: f64 = 1e-12;

/// Propagates each `(δh; 0)` in `basis_h` along `segment` and checks the
/// neutral-vector invariants: `Σ δh_i v_i = 0`, `w(t) = Σ q_i δh_i` linear in
/// `t`, and `Σ δh_i² / m_i` constant.
pub fn neutral_invariant_checks(
    mp: &MassProfile,
    segment: &Segment,
    basis_h: &[Vec<f64>],
) -> Result<InvariantReport> {
    let mut vectors = Vec::with_capacity(basis_h.len());
    let inv_m: Vec<f64> = mp.masses().iter().map(|m| 1.0 / m).collect();
    for b in basis_h {
        check_len(mp.n(), b.len())?;
        let mut tv = TangentVector {
            dh: b.clone(),
            dv: vec![0.0; mp.n()],
        };
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
        let weighted = |dh: &[f64]| dh.iter().zip(&inv_m).map(|(x, w)| w * x * x).sum::<f64>();

        let mut ts = vec![segment.t0];
        let mut ws = vec![dot(segment.initial.q(), &tv.dh)];
        let mut max_dot = dot(segment.initial.v(), &tv.dh).abs();
        let e0 = weighted(&tv.dh);
        let mut spread: f64 = 0.0;
        for e in &segment.events {
            tv = tangent::jump(mp, &e.state_pre(0.0), e.kind, &tv)?;
            ts.push(e.t);
            ws.push(dot(&e.q, &tv.dh));
            max_dot = max_dot.max(dot(&e.v_post, &tv.dh).abs());
            spread = spread.max((weighted(&tv.dh) - e0).abs());
        }
        let fit_residual = linear_fit_residual(&ts, &ws);
        let passed = max_dot <= DH_DOT_V_TOL && fit_residual <= FIT_TOL && spread <= WEIGHTED_NORM_TOL;
        vectors.push(VectorChecks {
            max_dh_dot_v: max_dot,
            fit_residual,
            weighted_norm_spread: spread,
            passed,
        });
    }
    let passed = vectors.iter().all(|v| v.passed);
    Ok(InvariantReport { vectors, passed })
}

/// Restricts a neutral basis to vectors with `Σ δh_i v_i = 0` at the segment start.
///
/// Truly neutral vectors satisfy this for all time; a finite segment without
/// floor bounces does not impose it by itself.
pub fn restrict_to_velocity_orthogonal(basis: &[Vec<f64>], v: &[f64]) -> Vec<Vec<f64>> {
    if basis.is_empty() {
        return Vec::new();
    }
    let n = v.len();
    let b = DMatrix::from_fn(n, basis.len(), |r, c| basis[c][r]);
    let coeffs = DMatrix::from_row_slice(1, n, v) * &b;
    let mut cs = ConstraintSet::new(basis.len());
    cs.add(coeffs.row(0).iter().copied().collect::<Vec<_>>().as_slice());
    cs.null_basis()
        .into_iter()
        .map(|c| (&b * DVector::from_vec(c)).iter().copied().collect())
        .collect()
}

fn linear_fit_residual(ts: &[f64], ws: &[f64]) -> f64 {
    let k = ts.len() as f64;
    if ts.len() < 3 {
        return 0.0;
    }
    let tm = ts.iter().sum::<f64>() / k;
    let wm = ws.iter().sum::<f64>() / k;
    let stt: f64 = ts.iter().map(|t| (t - tm).powi(2)).sum();
    let stw: f64 = ts.iter().zip(ws).map(|(t, w)| (t - tm) * (w - wm)).sum();
    let slope = if stt > 0.0 { stw / stt } else { 0.0 };
    ts.iter()
        .zip(ws)
        .map(|(t, w)| (w - wm - slope * (t - tm)).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::sample_state;
    use approx::assert_abs_diff_eq;

    fn mp(m: &[f64]) -> MassProfile {
        MassProfile::new(m.to_vec()).unwrap()
    }

    fn tv(dh: &[f64], dv: &[f64]) -> TangentVector {
        TangentVector::new(dh.to_vec(), dv.to_vec()).unwrap()
    }

    #[test]
    fn q_form_and_cone_examples() {
        assert_eq!(q_form(&tv(&[0.3, -0.3], &[0.0, 0.0])), 0.0);
        let a = 0.5f64.sqrt();
        assert_abs_diff_eq!(q_form(&tv(&[a, -a], &[a, -a])), 1.0, epsilon = 1e-15);
        assert_eq!(in_cone(&TangentVector::zeros(3)), ConeClass::Boundary);
        assert_eq!(in_cone(&tv(&[0.3, -0.3], &[0.0, 0.0])), ConeClass::Boundary);
        assert_eq!(in_cone(&tv(&[0.3, -0.3], &[0.3, -0.3])), ConeClass::Interior);
        assert_eq!(in_cone(&tv(&[0.3, -0.3], &[-0.3, 0.3])), ConeClass::Outside);
        let u = tv(&[0.2, -0.2], &[0.7, 0.1]);
        assert_abs_diff_eq!(q_form(&tangent::project_to_section(&u)), q_form(&u), epsilon = 1e-15);
    }

    #[test]
    fn pair_delta_examples() {
        let p = mp(&[3.0, 1.0]);
        let d = q_jump_pair_delta(&p, 1, 2.0, &tv(&[0.0, 0.0], &[0.1, -0.1])).unwrap();
        assert_abs_diff_eq!(d, 0.06, epsilon = 1e-15);
        assert_eq!(q_jump_pair_delta(&p, 1, 2.0, &tv(&[0.5, -0.5], &[0.2, 0.2])).unwrap(), 0.0);
        let eq = mp(&[1.0, 1.0]);
        assert_eq!(q_jump_pair_delta(&eq, 1, 2.0, &tv(&[0.0, 0.0], &[0.1, -0.1])).unwrap(), 0.0);
        assert!(q_jump_pair_delta(&p, 1, -1.0, &tv(&[0.0, 0.0], &[0.1, -0.1])).is_err());

        let s = PhaseState::new(&p, vec![0.2, 0.2], vec![0.5, -1.5], 2.3).unwrap();
        let u = tv(&[0.3, -0.3], &[0.1, -0.1]);
        let w = s.v()[0] - s.v()[1];
        let jumped = tangent::jump_pair(&p, &s, 1, &u).unwrap();
        assert_abs_diff_eq!(
            q_form(&jumped) - q_form(&u),
            q_jump_pair_delta(&p, 1, w, &u).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn floor_delta_examples() {
        let p = mp(&[1.0, 1.0]);
        assert_eq!(q_jump_floor_delta(&p, -2.0, &tv(&[0.0, 0.0], &[0.3, -0.3])).unwrap(), 0.0);
        let u = tv(&[0.4, -0.4], &[0.0, 0.0]);
        assert_abs_diff_eq!(q_jump_floor_delta(&p, -2.0, &u).unwrap(), 0.16, epsilon = 1e-15);
        assert!(q_jump_floor_delta(&p, 1.0, &u).is_err());
        let s = PhaseState::new(&p, vec![0.0, 0.3], vec![-2.0, 0.0], 2.3).unwrap();
        let jumped = tangent::jump_floor(&p, &s, &u).unwrap();
        assert_abs_diff_eq!(q_form(&jumped) - q_form(&u), 0.16, epsilon = 1e-12);
    }

    #[test]
    fn tracked_q_is_monotone_and_decomposes() {
        let p = mp(&[3.0, 2.0, 1.0]);
        let s = sample_state(&p, 1.0, 4).unwrap();
        let run = advance(&p, &s, Budget::events(40), &FlowConfig::default()).unwrap();
        let u = tv(&[0.3, 0.1, -0.4], &[-0.2, 0.5, -0.3]);
        let rep = track_q(&p, &run.events, &u, false).unwrap();
        assert!(rep.min_delta() >= -1e-12);
        let total: f64 = rep.per_event_deltas.iter().map(|d| d.delta_q).sum();
        assert_abs_diff_eq!(rep.q_final - rep.q_initial, total, epsilon = 1e-10 * rep.q_final.abs().max(1.0));
        assert!(rep.max_closed_form_mismatch() <= 1e-10 * rep.q_final.abs().max(1.0));
    }

    #[test]
    fn unordered_masses_report_negative_deltas() {
        let p = mp(&[1.0, 2.0]);
        let mut seen = false;
        for seed in 0..20 {
            let s = sample_state(&p, 1.0, seed).unwrap();
            let run = advance(&p, &s, Budget::events(200), &FlowConfig::default()).unwrap();
            let rep = track_q(&p, &run.events, &tv(&[0.5, -0.5], &[0.3, -0.3]), true).unwrap();
            seen |= rep.min_delta() < 0.0;
        }
        assert!(seen);
    }

    #[test]
    fn strict_entry_examples() {
        let cfg = FlowConfig::default();
        let eq = mp(&[1.0, 1.0, 1.0]);
        let s = sample_state(&eq, 1.0, 3).unwrap();
        let scan = strict_invariance_scan(&eq, &s, 300, &cfg).unwrap();
        assert!(!scan.entered(Direction::PureV));
        assert_eq!(scan.strict_entry_event, None);

        let p = mp(&[2.0, 1.0]);
        let s = sample_state(&p, 1.0, 3).unwrap();
        let scan = strict_invariance_scan(&p, &s, 300, &cfg).unwrap();
        assert!(scan.strict_entry_event.is_some());
    }

    #[test]
    fn pure_h_enters_at_first_floor_bounce() {
        let p = mp(&[2.0, 1.0]);
        let s = PhaseState::new(&p, vec![0.1, 0.6], vec![-0.5, 0.0], 0.2 + 0.25 + 0.6).unwrap();
        let run = advance(&p, &s, Budget::events(1), &FlowConfig::default()).unwrap();
        assert_eq!(run.events[0].kind, Collision::Floor);
        let rep = track_q(&p, &run.events, &tv(&[0.5, -0.5], &[0.0, 0.0]), false).unwrap();
        assert_eq!(rep.q_initial, 0.0);
        assert!(rep.q_final > 0.0);
        assert_eq!(rep.strict_entry_event, Some(0));
    }

    #[test]
    fn neutral_h_examples() {
        let p = mp(&[2.0, 1.0]);
        assert!(neutral_space_h(&p, &[0]).unwrap().is_empty());
        assert_eq!(neutral_space_h(&p, &[]).unwrap().len(), 1);
        let p3 = mp(&[3.0, 2.0, 1.0]);
        let b = neutral_space_h(&p3, &[1, 2, 1, 2]).unwrap();
        assert_eq!(b.len(), 2);
        for v in &b {
            assert!(v.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn neutral_v_examples() {
        let eq = mp(&[1.0, 1.0, 1.0]);
        assert_eq!(neutral_space_v(&eq, &[0, 1, 2, 0, 1, 1, 2]).unwrap().len(), 2);
        let p = mp(&[2.0, 1.0]);
        assert!(neutral_space_v(&p, &[1]).unwrap().is_empty());
        assert_eq!(neutral_space_v(&p, &[0, 0]).unwrap().len(), 1);
    }

    #[test]
    fn dimension_curve_collapses_and_is_monotone() {
        let p = mp(&[3.0, 2.0, 1.0]);
        let s = sample_state(&p, 1.0, 17).unwrap();
        let run = advance(&p, &s, Budget::events(200), &FlowConfig::default()).unwrap();
        let curve = dimension_curve(&p, &run.sequence.sigmas).unwrap();
        assert_eq!((curve[0].dim_h, curve[0].dim_v), (2, 2));
        for w in curve.windows(2) {
            assert!(w[1].dim_h <= w[0].dim_h && w[1].dim_v <= w[0].dim_v);
        }
        let last = curve.last().unwrap();
        assert_eq!((last.dim_h, last.dim_v), (0, 0));
        let cert = certificate(&p, &run.sequence).unwrap();
        assert_eq!((cert.dim_h, cert.dim_v), (0, 0));
    }

    #[test]
    fn constraint_set_compresses() {
        let mut cs = ConstraintSet::new(3);
        for _ in 0..10 {
            cs.add(&[1.0, -1.0, 0.0]);
        }
        assert_eq!(cs.rank(), 1);
        cs.add(&[0.0, 0.0, 0.0]);
        assert_eq!(cs.dim(), 2);
        cs.add(&[0.0, 1.0, -1.0]);
        assert_eq!(cs.null_basis().len(), 1);
    }

    #[test]
    fn invariants_hold_before_first_floor() {
        let p = mp(&[3.0, 2.0, 1.0]);
        let cfg = FlowConfig::default();
        let mut checked = 0;
        for seed in 0..40 {
            let s = sample_state(&p, 1.0, seed).unwrap();
            let seg = Segment::record(&p, &s, 50, &cfg).unwrap().before_first_floor();
            if seg.events.is_empty() {
                continue;
            }
            let basis = neutral_space_h(&p, &seg.sequence().sigmas).unwrap();
            assert_eq!(basis.len(), 2);
            let basis = restrict_to_velocity_orthogonal(&basis, s.v());
            assert_eq!(basis.len(), 1);
            let rep = neutral_invariant_checks(&p, &seg, &basis).unwrap();
            assert!(rep.passed, "{rep:?}");

            let mut off = basis[0].clone();
            let fix: f64 = s.v().iter().sum::<f64>() / 3.0;
            let perturb: Vec<f64> = s.v().iter().map(|v| v - fix).collect();
            off.iter_mut().zip(&perturb).for_each(|(x, d)| *x += 1e-3 * d);
            let bad = neutral_invariant_checks(&p, &seg, &[off]).unwrap();
            assert!(bad.vectors[0].max_dh_dot_v > DH_DOT_V_TOL);
            checked += 1;
        }
        assert!(checked > 5);
    }

    #[test]
    fn empty_basis_passes_vacuously() {
        let p = mp(&[2.0, 1.0]);
        let s = sample_state(&p, 1.0, 1).unwrap();
        let seg = Segment::record(&p, &s, 10, &FlowConfig::default()).unwrap();
        assert!(neutral_invariant_checks(&p, &seg, &[]).unwrap().passed);
    }
}
