//! Linearized dynamics in `(δh, δv)` coordinates.
//!
//! With `δh_i = m_i δq_i + v_i δp_i` and `δv_i = δp_i / m_i` free flight acts
//! as the identity on tangent vectors, so the whole linearization is carried by
//! the collision jumps. Vectors are kept in the section `Σ δh = Σ δv = 0`:
//! the first sum is tangency to the energy shell, the second picks the
//! representative modulo the flow direction `(0; -1, ..., -1)`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::flow::{Collision, CONTACT_TOL};
use crate::state::{MassProfile, PhaseState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TangentVector {
    pub dh: Vec<f64>,
    pub dv: Vec<f64>,
}

impl TangentVector {
    pub fn new(dh: Vec<f64>, dv: Vec<f64>) -> Result<Self> {
        check_len(dh.len(), dv.len())?;
        Ok(Self { dh, dv })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            dh: vec![0.0; n],
            dv: vec![0.0; n],
        }
    }

    pub fn n(&self) -> usize {
        self.dh.len()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dh.iter().chain(&self.dv).map(|x| x * x).sum()
    }

    /// Euclidean norm `Σ (δh_i² + δv_i²)`, compatible with `ω`.
    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.dh
            .iter()
            .zip(&other.dh)
            .chain(self.dv.iter().zip(&other.dv))
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            dh: self.dh.iter().map(|x| s * x).collect(),
            dv: self.dv.iter().map(|x| s * x).collect(),
        }
    }

    pub fn add_scaled(&mut self, s: f64, other: &Self) {
        for (a, b) in self.dh.iter_mut().zip(&other.dh) {
            *a += s * b;
        }
        for (a, b) in self.dv.iter_mut().zip(&other.dv) {
            *a += s * b;
        }
    }

    /// `[δh_1..δh_n, δv_1..δv_n]`
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.dh.clone();
        out.extend_from_slice(&self.dv);
        out
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        let n = flat.len() / 2;
        Self {
            dh: flat[..n].to_vec(),
            dv: flat[n..2 * n].to_vec(),
        }
    }
}

/// The symplectic pairing `ω(u, w) = Σ (u.δh_i w.δv_i - u.δv_i w.δh_i)`.
pub fn omega(u: &TangentVector, w: &TangentVector) -> f64 {
    (0..u.n())
        .map(|i| u.dh[i] * w.dv[i] - u.dv[i] * w.dh[i])
        .sum()
}

/// Frame of section vectors attached to a phase point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TangentFrame {
    pub columns: Vec<TangentVector>,
    pub attached_state: PhaseState,
}

impl TangentFrame {
    /// Columns as a `2n × k` matrix.
    pub fn matrix(&self) -> DMatrix<f64> {
        frame_matrix(&self.columns)
    }

    pub fn min_singular_value(&self) -> f64 {
        self.matrix()
            .singular_values()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

pub(crate) fn frame_matrix(columns: &[TangentVector]) -> DMatrix<f64> {
    let rows = columns.first().map_or(0, |c| 2 * c.n());
    DMatrix::from_fn(rows, columns.len(), |r, c| {
        let col = &columns[c];
        let n = col.n();
        if r < n {
            col.dh[r]
        } else {
            col.dv[r - n]
        }
    })
}

pub(crate) fn raw_from_qp(mp: &MassProfile, v: &[f64], dq: &[f64], dp: &[f64]) -> TangentVector {
    let m = mp.masses();
    TangentVector {
        dh: (0..m.len()).map(|i| m[i] * dq[i] + v[i] * dp[i]).collect(),
        dv: (0..m.len()).map(|i| dp[i] / m[i]).collect(),
    }
}

/// Converts a `(δq, δp)` variation at `state` and projects it to the section.
pub fn from_qp(mp: &MassProfile, state: &PhaseState, dq: &[f64], dp: &[f64]) -> Result<TangentVector> {
    check_len(mp.n(), state.n())?;
    check_len(mp.n(), dq.len())?;
    check_len(mp.n(), dp.len())?;
    let tv = raw_from_qp(mp, state.v(), dq, dp);
    let scale = dq.iter().chain(dp).map(|x| x.abs()).fold(1.0, f64::max);
    let dh_sum: f64 = tv.dh.iter().sum();
    if dh_sum.abs() > 1e-10 * scale {
        return Err(Error::Contract(format!(
            "variation leaves the energy shell: Σ δh = {dh_sum:e}"
        )));
    }
    Ok(project_to_section(&tv))
}

/// Inverse coordinate change, `δp_i = m_i δv_i`, `δq_i = δh_i / m_i - v_i δv_i`.
pub fn to_qp(mp: &MassProfile, state: &PhaseState, tv: &TangentVector) -> (Vec<f64>, Vec<f64>) {
    let (m, v) = (mp.masses(), state.v());
    let dq = (0..m.len()).map(|i| tv.dh[i] / m[i] - v[i] * tv.dv[i]).collect();
    let dp = (0..m.len()).map(|i| m[i] * tv.dv[i]).collect();
    (dq, dp)
}

/// Free flight leaves `(δh, δv)` unchanged.
pub fn transport_flight(tv: &TangentVector, _dt: f64) -> TangentVector {
    tv.clone()
}

/// Removes the flow-direction component: `δv <- δv - mean(δv)`.
///
/// For `Σ δh = 0` this leaves both `Q` and `ω` unchanged.
pub fn project_to_section(tv: &TangentVector) -> TangentVector {
    let n = tv.n() as f64;
    let mean = tv.dv.iter().sum::<f64>() / n;
    TangentVector {
        dh: tv.dh.clone(),
        dv: tv.dv.iter().map(|x| x - mean).collect(),
    }
}

/// Removes roundoff drift out of the section by subtracting the means of
/// both `δh` and `δv`.
///
/// Long products of jumps amplify any `Σ δh` component along the neutral
/// energy direction, which would otherwise swamp contracting directions.
pub fn restore_section(tv: &TangentVector) -> TangentVector {
    let n = tv.n() as f64;
    let mh = tv.dh.iter().sum::<f64>() / n;
    let mv = tv.dv.iter().sum::<f64>() / n;
    TangentVector {
        dh: tv.dh.iter().map(|x| x - mh).collect(),
        dv: tv.dv.iter().map(|x| x - mv).collect(),
    }
}

/// The velocity map of bond `i`: identity except `[[γ, 1-γ], [1+γ, -γ]]` on rows/columns `i, i+1`.
pub fn r_matrix(mp: &MassProfile, i: usize) -> Result<DMatrix<f64>> {
    let g = mp.gamma(i)?;
    let mut r = DMatrix::identity(mp.n(), mp.n());
    let (a, b) = (i - 1, i);
    r[(a, a)] = g;
    r[(a, b)] = 1.0 - g;
    r[(b, a)] = 1.0 + g;
    r[(b, b)] = -g;
    Ok(r)
}

/// Tangent map across a collision of bond `i` at `state_pre`.
///
/// `δv⁺ = R δv⁻` and `δh⁺ = Rᵀ δh⁻ + γ c w Δ (e_i - e_{i+1})` with
/// `w = v_i - v_{i+1} > 0` and `Δ = δv_{i+1}⁻ - δv_i⁻`.
pub fn jump_pair(mp: &MassProfile, state_pre: &PhaseState, i: usize, tv: &TangentVector) -> Result<TangentVector> {
    let g = mp.gamma(i)?;
    let c = mp.c(i)?;
    check_len(mp.n(), tv.n())?;
    let (a, b) = (i - 1, i);
    let (q, v) = (state_pre.q(), state_pre.v());
    if (q[b] - q[a]).abs() > CONTACT_TOL * (1.0 + q[b].abs()) {
        return Err(Error::Contract(format!("pair {i} is not in contact")));
    }
    let w = v[a] - v[b];
    if !(w > 0.0) {
        return Err(Error::Contract(format!("pair {i} is not approaching (w = {w})")));
    }
    Ok(project_to_section(&pair_map(g, c, w, a, tv)))
}

pub(crate) fn pair_map(g: f64, c: f64, w: f64, a: usize, tv: &TangentVector) -> TangentVector {
    let b = a + 1;
    let mut out = tv.clone();
    let (x, y) = (tv.dh[a], tv.dh[b]);
    let (s, t) = (tv.dv[a], tv.dv[b]);
    let extra = g * c * w * (t - s);
    out.dv[a] = g * s + (1.0 - g) * t;
    out.dv[b] = (1.0 + g) * s - g * t;
    out.dh[a] = g * x + (1.0 + g) * y + extra;
    out.dh[b] = (1.0 - g) * x - g * y - extra;
    out
}

/// Tangent map across a floor bounce: `δh` unchanged, `δv_1 += -2 δh_1 / (m_1 v_1⁻)`.
pub fn jump_floor(mp: &MassProfile, state_pre: &PhaseState, tv: &TangentVector) -> Result<TangentVector> {
    check_len(mp.n(), tv.n())?;
    let (q1, v1) = (state_pre.q()[0], state_pre.v()[0]);
    if q1.abs() > CONTACT_TOL {
        return Err(Error::Contract(format!("floor jump at height {q1}")));
    }
    if !(v1 < 0.0) {
        return Err(Error::Contract(format!("floor jump with v_1 = {v1}")));
    }
    Ok(project_to_section(&floor_map(mp.masses()[0], v1, tv)))
}

pub(crate) fn floor_map(m1: f64, v1: f64, tv: &TangentVector) -> TangentVector {
    let mut out = tv.clone();
    out.dv[0] -= 2.0 * tv.dh[0] / (m1 * v1);
    out
}

pub fn jump(mp: &MassProfile, state_pre: &PhaseState, kind: Collision, tv: &TangentVector) -> Result<TangentVector> {
    match kind {
        Collision::Floor => jump_floor(mp, state_pre, tv),
        Collision::Pair(i) => jump_pair(mp, state_pre, i, tv),
    }
}

/// `K` with `1/K <= ‖(δh, δv)‖ / ‖(δq, δp)‖ <= K` on the shell `H = energy`.
///
/// Per particle the coordinate change is `[[m, v], [0, 1/m]]` with unit
/// determinant, so both singular-value bounds follow from its Frobenius norm
/// with `v² <= 2H/m`.
pub fn norm_equivalence_constant(mp: &MassProfile, energy: f64) -> f64 {
    mp.masses()
        .iter()
        .map(|&m| (m * m + 2.0 * energy / m + 1.0 / (m * m)).sqrt())
        .fold(1.0, f64::max)
}

/// Orthonormal frame of `2n - 2` random vectors spanning the section.
pub fn random_section_frame<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<TangentVector> {
    loop {
        let mut cols: Vec<TangentVector> = (0..2 * n - 2)
            .map(|_| {
                let mut dh: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                let mean = dh.iter().sum::<f64>() / n as f64;
                dh.iter_mut().for_each(|x| *x -= mean);
                let dv = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                project_to_section(&TangentVector { dh, dv })
            })
            .collect();
        if orthonormalize(&mut cols).iter().all(|r| *r > 1e-8) {
            return cols;
        }
    }
}

/// Modified Gram-Schmidt with one reorthogonalization pass; returns the
/// diagonal of the triangular factor.
pub fn orthonormalize(cols: &mut [TangentVector]) -> Vec<f64> {
    let mut diag = Vec::with_capacity(cols.len());
    for k in 0..cols.len() {
        let (done, rest) = cols.split_at_mut(k);
        let col = &mut rest[0];
        let mut norm_before = col.norm();
        for _ in 0..2 {
            for prev in done.iter() {
                let p = prev.dot(col);
                col.add_scaled(-p, prev);
            }
            let norm_after = col.norm();
            if norm_after > 0.5 * norm_before {
                break;
            }
            norm_before = norm_after;
        }
        let r = col.norm();
        if r > 0.0 {
            *col = col.scaled(1.0 / r);
        }
        diag.push(r);
    }
    diag
}

pub mod oracle {
    //! Central finite differences of the exact flow, used to check the analytic jumps.

    use super::*;
    use crate::flow::{advance, Budget, FlowConfig, SymbolicSequence};

    /// Base step relative to the state scale.
    pub const H_FD: f64 = 1e-6;

    /// Tolerance of the Richardson self-check (ten times the comparison tolerance).
    pub const RICHARDSON_TOL: f64 = 1e-4;

    fn perturbed(
        mp: &MassProfile,
        state: &PhaseState,
        dq: &[f64],
        dv: &[f64],
        h: f64,
        t: f64,
        cfg: &FlowConfig,
    ) -> Result<(PhaseState, SymbolicSequence)> {
        let q: Vec<f64> = state.q().iter().zip(dq).map(|(x, d)| x + h * d).collect();
        let v: Vec<f64> = state.v().iter().zip(dv).map(|(x, d)| x + h * d).collect();
        if q[0] < 0.0 || q.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::OracleUnreliable(
                "perturbation leaves the configuration space".into(),
            ));
        }
        let energy = crate::state::total_energy(mp, &q, &v)?;
        let s = PhaseState::from_parts(q, v, energy);
        let out = advance(mp, &s, Budget::time(t), cfg)?;
        Ok((out.state, out.sequence))
    }

    fn central(
        mp: &MassProfile,
        state: &PhaseState,
        dq: &[f64],
        dv: &[f64],
        h: f64,
        t: f64,
        base: &[usize],
        cfg: &FlowConfig,
    ) -> Result<TangentVector> {
        let (plus, sp) = perturbed(mp, state, dq, dv, h, t, cfg)?;
        let (minus, sm) = perturbed(mp, state, dq, dv, -h, t, cfg)?;
        if sp.sigmas != base || sm.sigmas != base {
            return Err(Error::OracleUnreliable(format!(
                "collision sequence changes under a perturbation of size {h:e}"
            )));
        }
        let n = mp.n();
        let dq_t: Vec<f64> = (0..n).map(|i| (plus.q()[i] - minus.q()[i]) / (2.0 * h)).collect();
        let dv_t: Vec<f64> = (0..n).map(|i| (plus.v()[i] - minus.v()[i]) / (2.0 * h)).collect();
        Ok((dq_t, dv_t).into_tangent(mp))
    }

    trait IntoTangent {
        fn into_tangent(self, mp: &MassProfile) -> TangentVector;
    }

    impl IntoTangent for (Vec<f64>, Vec<f64>) {
        fn into_tangent(self, _mp: &MassProfile) -> TangentVector {
            TangentVector { dh: self.0, dv: self.1 }
        }
    }

    /// `D ψ^T (tv)` by central differences of the time-`T` flow in `(q, v)`.
    ///
    /// The perturbed orbits must share the base orbit's collision sequence, and
    /// halving the step must change the result by less than [`RICHARDSON_TOL`]
    /// relative; otherwise the oracle reports itself unreliable. Returns the
    /// Richardson-extrapolated difference, projected to the section.
    pub fn fd_oracle(
        mp: &MassProfile,
        state: &PhaseState,
        tv: &TangentVector,
        t: f64,
        cfg: &FlowConfig,
    ) -> Result<TangentVector> {
        check_len(mp.n(), tv.n())?;
        let (dq, dp) = to_qp(mp, state, tv);
        let dv: Vec<f64> = dp.iter().zip(mp.masses()).map(|(p, m)| p / m).collect();
        let base = advance(mp, state, Budget::time(t), cfg)?;
        let scale = state
            .q()
            .iter()
            .chain(state.v())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(1.0);
        let size = dq.iter().chain(&dv).map(|x| x * x).sum::<f64>().sqrt();
        if size == 0.0 {
            return Ok(TangentVector::zeros(mp.n()));
        }
        let h = H_FD * scale / size;
        let coarse = central(mp, state, &dq, &dv, h, t, &base.sequence.sigmas, cfg)?;
        let fine = central(mp, state, &dq, &dv, 0.5 * h, t, &base.sequence.sigmas, cfg)?;
        let to_hv = |x: &TangentVector| {
            let dp: Vec<f64> = x.dv.iter().zip(mp.masses()).map(|(v, m)| v * m).collect();
            project_to_section(&raw_from_qp(mp, base.state.v(), &x.dh, &dp))
        };
        let (coarse, fine) = (to_hv(&coarse), to_hv(&fine));
        let mut diff = fine.clone();
        diff.add_scaled(-1.0, &coarse);
        if diff.norm() > RICHARDSON_TOL * fine.norm().max(f64::MIN_POSITIVE) {
            return Err(Error::OracleUnreliable(format!(
                "step halving changed the derivative by {:e} (relative)",
                diff.norm() / fine.norm()
            )));
        }
        let mut extrapolated = fine.scaled(4.0 / 3.0);
        extrapolated.add_scaled(-1.0 / 3.0, &coarse);
        Ok(extrapolated)
    }
}
