//! Masses, phase states and energy bookkeeping.
//!
//! Particles are stored bottom to top, `q[0] <= q[1] <= ... <= q[n-1]`, all
//! falling with unit acceleration toward the floor at `q = 0`. Pair bonds are
//! numbered `1..n` as collision types: bond `i` joins particles `i-1` and `i`
//! in zero-based storage.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Absolute tolerance on `|H - energy_target|` accepted by [`PhaseState::new`].
pub const ENERGY_TOL: f64 = 1e-9;

/// Exact-zero band used by [`is_degenerate`].
pub const DEGENERACY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderingClass {
    /// `m_1 > m_2 >= ... >= m_n`
    StrictTop,
    /// `m_1 >= m_2 >= ... >= m_n` without a strictly heaviest bottom particle.
    Nonincreasing,
    Unordered,
}

impl OrderingClass {
    fn classify(m: &[f64]) -> Self {
        let nonincreasing = m.windows(2).all(|w| w[0] >= w[1]);
        if !nonincreasing {
            OrderingClass::Unordered
        } else if m.len() >= 2 && m[0] > m[1] {
            OrderingClass::StrictTop
        } else {
            OrderingClass::Nonincreasing
        }
    }

    /// True for every profile with `m_1 >= ... >= m_n`, where the cone field is invariant.
    pub fn is_nonincreasing(self) -> bool {
        !matches!(self, OrderingClass::Unordered)
    }
}

/// Masses with the derived collision parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MassProfile {
    m: Vec<f64>,
    gamma: Vec<f64>,
    c: Vec<f64>,
    ordering: OrderingClass,
}

impl MassProfile {
    pub fn new(m: Vec<f64>) -> Result<Self> {
        if m.len() < 2 {
            return Err(Error::InvalidMass(format!(
                "need at least two particles, got {}",
                m.len()
            )));
        }
        Self::build(m)
    }

    fn build(m: Vec<f64>) -> Result<Self> {
        if let Some(bad) = m.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
            return Err(Error::InvalidMass(format!("mass {bad} is not positive")));
        }
        let gamma = m.windows(2).map(|w| (w[0] - w[1]) / (w[0] + w[1])).collect();
        let c = m
            .windows(2)
            .map(|w| 2.0 * w[0] * w[1] / (w[0] + w[1]))
            .collect();
        let ordering = OrderingClass::classify(&m);
        Ok(Self { m, gamma, c, ordering })
    }

    /// The particles above the `k` lowest ones. May hold a single particle.
    pub(crate) fn upper_subsystem(&self, k: usize) -> Result<Self> {
        if k >= self.n() {
            return Err(Error::DegenerateInput(format!(
                "cannot drop {k} of {} particles",
                self.n()
            )));
        }
        Self::build(self.m[k..].to_vec())
    }

    pub fn n(&self) -> usize {
        self.m.len()
    }

    pub fn masses(&self) -> &[f64] {
        &self.m
    }

    pub fn ordering(&self) -> OrderingClass {
        self.ordering
    }

    /// All collision parameters, `gammas()[i-1]` belonging to bond `i`.
    pub fn gammas(&self) -> &[f64] {
        &self.gamma
    }

    pub fn reduced_factors(&self) -> &[f64] {
        &self.c
    }

    fn bond(&self, i: usize) -> Result<usize> {
        if i == 0 || i >= self.n() {
            Err(Error::Index {
                index: i,
                max: self.n() - 1,
            })
        } else {
            Ok(i - 1)
        }
    }

    /// `γ_i = (m_i - m_{i+1}) / (m_i + m_{i+1})` for bond `i` in `1..n`.
    pub fn gamma(&self, i: usize) -> Result<f64> {
        Ok(self.gamma[self.bond(i)?])
    }

    /// `c_i = 2 m_i m_{i+1} / (m_i + m_{i+1})` for bond `i` in `1..n`.
    pub fn c(&self, i: usize) -> Result<f64> {
        Ok(self.c[self.bond(i)?])
    }
}

/// Positions and velocities on a fixed energy shell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    q: Vec<f64>,
    v: Vec<f64>,
    energy_target: f64,
}

impl PhaseState {
    /// Validated constructor: ordered nonnegative heights and energy within [`ENERGY_TOL`].
    pub fn new(mp: &MassProfile, q: Vec<f64>, v: Vec<f64>, energy_target: f64) -> Result<Self> {
        check_len(mp.n(), q.len())?;
        check_len(mp.n(), v.len())?;
        if !(energy_target.is_finite() && energy_target > 0.0) {
            return Err(Error::InvalidConfiguration(format!(
                "energy target {energy_target} must be positive"
            )));
        }
        if q.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidConfiguration("non-finite coordinate".into()));
        }
        if q[0] < 0.0 {
            return Err(Error::InvalidConfiguration(format!(
                "q_1 = {} is below the floor",
                q[0]
            )));
        }
        if let Some(i) = q.windows(2).position(|w| w[0] > w[1]) {
            return Err(Error::InvalidConfiguration(format!(
                "heights out of order at particles {} and {}",
                i + 1,
                i + 2
            )));
        }
        let h = total_energy(mp, &q, &v)?;
        if (h - energy_target).abs() > ENERGY_TOL {
            return Err(Error::InvalidConfiguration(format!(
                "energy {h} differs from target {energy_target}"
            )));
        }
        Ok(Self { q, v, energy_target })
    }

    pub(crate) fn from_parts(q: Vec<f64>, v: Vec<f64>, energy_target: f64) -> Self {
        Self { q, v, energy_target }
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn energy_target(&self) -> f64 {
        self.energy_target
    }

    pub fn momenta(&self, mp: &MassProfile) -> Vec<f64> {
        mp.masses().iter().zip(&self.v).map(|(m, v)| m * v).collect()
    }

    pub fn energy(&self, mp: &MassProfile) -> f64 {
        energy_unchecked(mp.masses(), &self.q, &self.v)
    }

    pub(crate) fn q_mut(&mut self) -> &mut [f64] {
        &mut self.q
    }

    pub(crate) fn v_mut(&mut self) -> &mut [f64] {
        &mut self.v
    }

    pub(crate) fn into_parts(self) -> (Vec<f64>, Vec<f64>, f64) {
        (self.q, self.v, self.energy_target)
    }
}

fn energy_unchecked(m: &[f64], q: &[f64], v: &[f64]) -> f64 {
    m.iter()
        .zip(q)
        .zip(v)
        .map(|((m, q), v)| m * q + 0.5 * m * v * v)
        .sum()
}

/// `H = Σ (m_i q_i + ½ m_i v_i²)`.
pub fn total_energy(mp: &MassProfile, q: &[f64], v: &[f64]) -> Result<f64> {
    check_len(mp.n(), q.len())?;
    check_len(mp.n(), v.len())?;
    Ok(energy_unchecked(mp.masses(), q, v))
}

/// Individual energies `h_i = m_i q_i + ½ m_i v_i²`.
pub fn particle_energies(mp: &MassProfile, q: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check_len(mp.n(), q.len())?;
    check_len(mp.n(), v.len())?;
    Ok(mp
        .masses()
        .iter()
        .zip(q)
        .zip(v)
        .map(|((m, q), v)| m * q + 0.5 * m * v * v)
        .collect())
}

/// Rescales `(q, v) -> (s² q, s v)` with `s = sqrt(H0 / H)`, using `H(s²q, sv) = s² H(q, v)`.
pub fn normalize_to_shell(mp: &MassProfile, q: &[f64], v: &[f64], h0: f64) -> Result<PhaseState> {
    let h = total_energy(mp, q, v)?;
    if !(h0.is_finite() && h0 > 0.0) {
        return Err(Error::InvalidConfiguration(format!(
            "target energy {h0} must be positive"
        )));
    }
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::DegenerateInput(format!(
            "cannot rescale a state of energy {h}"
        )));
    }
    if (h - h0).abs() <= 1e-15 * h0 {
        return PhaseState::new(mp, q.to_vec(), v.to_vec(), h0);
    }
    let s = (h0 / h).sqrt();
    let s2 = h0 / h;
    let q = q.iter().map(|x| s2 * x).collect();
    let v = v.iter().map(|x| s * x).collect();
    PhaseState::new(mp, q, v, h0)
}

fn rod_offset(i: usize, r: f64) -> f64 {
    (2 * i + 1) as f64 * r
}

/// Maps hard rods of half-length `r` (centers `q_rods`) to point particles,
/// `q_i -> q_i - (2i-1) r`, `H0 -> H0 - r Σ (2i-1) m_i`.
pub fn rods_to_points(
    r: f64,
    mp: &MassProfile,
    q_rods: &[f64],
    v: &[f64],
    h0: f64,
) -> Result<(PhaseState, f64)> {
    check_len(mp.n(), q_rods.len())?;
    check_len(mp.n(), v.len())?;
    if !(r.is_finite() && r >= 0.0) {
        return Err(Error::InvalidConfiguration(format!(
            "rod half-length {r} must be nonnegative"
        )));
    }
    if q_rods[0] < r {
        return Err(Error::InvalidConfiguration(format!(
            "lowest rod at {} penetrates the floor",
            q_rods[0]
        )));
    }
    if let Some(i) = q_rods.windows(2).position(|w| w[1] - w[0] < 2.0 * r) {
        return Err(Error::InvalidConfiguration(format!(
            "rods {} and {} overlap",
            i + 1,
            i + 2
        )));
    }
    let h_rods = total_energy(mp, q_rods, v)?;
    if (h_rods - h0).abs() > ENERGY_TOL {
        return Err(Error::InvalidConfiguration(format!(
            "rod energy {h_rods} differs from stated level {h0}"
        )));
    }
    let shift: f64 = mp
        .masses()
        .iter()
        .enumerate()
        .map(|(i, m)| rod_offset(i, r) * m)
        .sum();
    let new_h0 = h0 - shift;
    let q = q_rods
        .iter()
        .enumerate()
        .map(|(i, x)| x - rod_offset(i, r))
        .collect();
    Ok((PhaseState::new(mp, q, v.to_vec(), new_h0)?, new_h0))
}

/// Inverse of [`rods_to_points`]: rod centers and the rod-system energy level.
pub fn points_to_rods(r: f64, mp: &MassProfile, state: &PhaseState) -> Result<(Vec<f64>, f64)> {
    check_len(mp.n(), state.n())?;
    let shift: f64 = mp
        .masses()
        .iter()
        .enumerate()
        .map(|(i, m)| rod_offset(i, r) * m)
        .sum();
    let q = state
        .q()
        .iter()
        .enumerate()
        .map(|(i, x)| x + rod_offset(i, r))
        .collect();
    Ok((q, state.energy_target() + shift))
}

/// Result of [`is_degenerate`]: `k` is the number of particles resting on the floor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Degeneracy {
    pub degenerate: bool,
    pub k: usize,
}

/// Detects `q_1 = ... = q_k = 0`, `v_1 = ... = v_k = 0` within [`DEGENERACY_TOL`].
pub fn is_degenerate(state: &PhaseState) -> Degeneracy {
    let k = state
        .q()
        .iter()
        .zip(state.v())
        .take_while(|(q, v)| q.abs() <= DEGENERACY_TOL && v.abs() <= DEGENERACY_TOL)
        .count();
    Degeneracy {
        degenerate: k > 0,
        k,
    }
}

/// Draws a generic state on the shell `H = h0`.
///
/// Heights are i.i.d. uniform on `(0, 1)` and sorted, velocities standard normal,
/// and the pair is then rescaled onto the shell. Draws with ties, a particle
/// on the floor or a degenerate bottom are rejected and redrawn.
pub fn sample_state(mp: &MassProfile, h0: f64, seed: u64) -> Result<PhaseState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_state_with(mp, h0, &mut rng)
}

pub fn sample_state_with<R: Rng + ?Sized>(
    mp: &MassProfile,
    h0: f64,
    rng: &mut R,
) -> Result<PhaseState> {
    let n = mp.n();
    loop {
        let mut q: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        q.sort_by(f64::total_cmp);
        let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let strictly_ordered = q[0] > 0.0 && q.windows(2).all(|w| w[0] < w[1]);
        if !strictly_ordered {
            continue;
        }
        let state = normalize_to_shell(mp, &q, &v, h0)?;
        let still_ordered = state.q()[0] > 0.0 && state.q().windows(2).all(|w| w[0] < w[1]);
        if still_ordered && !is_degenerate(&state).degenerate {
            return Ok(state);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn mp(m: &[f64]) -> MassProfile {
        MassProfile::new(m.to_vec()).unwrap()
    }

    #[test]
    fn energy_examples() {
        assert_eq!(total_energy(&mp(&[1.0, 1.0]), &[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(total_energy(&mp(&[1.0, 1.0]), &[1.0, 2.0], &[0.0, 0.0]).unwrap(), 3.0);
        assert_eq!(total_energy(&mp(&[3.0, 1.0]), &[0.0, 1.0], &[-1.0, 1.0]).unwrap(), 3.0);
        assert!(matches!(
            total_energy(&mp(&[1.0, 1.0]), &[0.0], &[0.0, 0.0]),
            Err(Error::Dimension { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn particle_energy_examples() {
        assert_eq!(
            particle_energies(&mp(&[2.0, 1.0]), &[0.0, 0.0], &[1.0, -1.0]).unwrap(),
            vec![1.0, 0.5]
        );
        assert_eq!(
            particle_energies(&mp(&[1.0, 1.0]), &[1.0, 1.0], &[0.0, 0.0]).unwrap(),
            vec![1.0, 1.0]
        );
    }

    #[test]
    fn mass_profile_parameters() {
        let p = mp(&[3.0, 1.0]);
        assert_eq!(p.gamma(1).unwrap(), 0.5);
        assert_eq!(p.c(1).unwrap(), 1.5);
        assert!(p.gamma(0).is_err());
        assert!(p.gamma(2).is_err());
        assert_eq!(p.ordering(), OrderingClass::StrictTop);
        assert_eq!(mp(&[1.0, 1.0, 1.0]).ordering(), OrderingClass::Nonincreasing);
        assert_eq!(mp(&[2.0, 2.0, 1.0]).ordering(), OrderingClass::Nonincreasing);
        assert_eq!(mp(&[1.0, 2.0]).ordering(), OrderingClass::Unordered);
        assert!(MassProfile::new(vec![1.0]).is_err());
        assert!(MassProfile::new(vec![1.0, 0.0]).is_err());
        assert!(MassProfile::new(vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn state_validation() {
        let p = mp(&[1.0, 1.0]);
        assert!(PhaseState::new(&p, vec![0.5, 0.5], vec![0.0, 0.0], 1.0).is_ok());
        assert!(PhaseState::new(&p, vec![0.6, 0.4], vec![0.0, 0.0], 1.0).is_err());
        assert!(PhaseState::new(&p, vec![-0.1, 1.1], vec![0.0, 0.0], 1.0).is_err());
        assert!(PhaseState::new(&p, vec![0.5, 0.5], vec![0.0, 0.1], 1.0).is_err());
    }

    #[test]
    fn normalize_examples() {
        let p = mp(&[1.0, 1.0]);
        // H = 4
        let s = normalize_to_shell(&p, &[1.0, 3.0], &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(s.q(), &[0.25, 0.75]);
        let s = normalize_to_shell(&p, &[0.0, 2.0], &[2.0, 0.0], 1.0).unwrap();
        assert_eq!(s.q(), &[0.0, 0.5]);
        assert_eq!(s.v(), &[1.0, 0.0]);
        let s = normalize_to_shell(&p, &[0.25, 0.75], &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(s.q(), &[0.25, 0.75]);
        assert!(matches!(
            normalize_to_shell(&p, &[0.0, 0.0], &[0.0, 0.0], 1.0),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn rods_examples() {
        let p = mp(&[1.0, 1.0]);
        let (s, h) = rods_to_points(0.0, &p, &[0.25, 0.75], &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(s.q(), &[0.25, 0.75]);
        assert_eq!(h, 1.0);

        // q_rods = (0.5, 2.5) has energy 3; points land at (0, 1).
        let (s, h) = rods_to_points(0.5, &p, &[0.5, 2.5], &[0.0, 0.0], 3.0).unwrap();
        assert_eq!(s.q(), &[0.0, 1.0]);
        assert_eq!(h, 1.0);

        // H0 = 5 with r = 0.5 shifts to 5 - 0.5 (1 + 3) = 3.
        let (_, h) = rods_to_points(0.5, &p, &[1.0, 3.0], &[0.0, 2.0_f64.sqrt()], 5.0).unwrap();
        assert_abs_diff_eq!(h, 3.0, epsilon = 1e-15);

        assert!(rods_to_points(0.5, &p, &[0.5, 1.2], &[0.0, 0.0], 1.7).is_err());
        assert!(rods_to_points(0.5, &p, &[0.4, 2.5], &[0.0, 0.0], 2.9).is_err());
    }

    #[test]
    fn degeneracy_examples() {
        let p = mp(&[1.0, 1.0]);
        let s = PhaseState::new(&p, vec![0.0, 1.0], vec![0.0, 0.0], 1.0).unwrap();
        assert_eq!(is_degenerate(&s), Degeneracy { degenerate: true, k: 1 });
        let s = PhaseState::from_parts(vec![0.0, 1.0], vec![-0.1, 1.0], 1.0);
        assert!(!is_degenerate(&s).degenerate);
        let p3 = mp(&[1.0, 1.0, 1.0]);
        let s = PhaseState::new(&p3, vec![0.0, 0.0, 0.5], vec![0.0, 0.0, -1.0], 1.0).unwrap();
        assert_eq!(is_degenerate(&s), Degeneracy { degenerate: true, k: 2 });
    }

    #[test]
    fn sampler_is_deterministic_and_valid() {
        let p = mp(&[3.0, 2.0, 1.0]);
        assert_eq!(sample_state(&p, 1.0, 42).unwrap(), sample_state(&p, 1.0, 42).unwrap());
        assert_ne!(sample_state(&p, 1.0, 42).unwrap(), sample_state(&p, 1.0, 43).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let s = sample_state_with(&p, 1.0, &mut rng).unwrap();
            assert!(PhaseState::new(&p, s.q().to_vec(), s.v().to_vec(), 1.0).is_ok());
            assert!((s.energy(&p) - 1.0).abs() <= 1e-14);
            assert!(s.q()[0] > 0.0 && s.q().windows(2).all(|w| w[0] < w[1]));
            assert!(!is_degenerate(&s).degenerate);
        }
    }

    proptest! {
        #[test]
        fn derived_parameters_match_closed_forms(m in proptest::collection::vec(0.01f64..100.0, 2..6)) {
            let p = MassProfile::new(m.clone()).unwrap();
            for i in 1..m.len() {
                let (a, b) = (m[i - 1], m[i]);
                let g = p.gamma(i).unwrap();
                prop_assert!((g - (a - b) / (a + b)).abs() <= 1e-15);
                prop_assert!((p.c(i).unwrap() - 2.0 * a * b / (a + b)).abs() <= 1e-15 * (1.0 + a.max(b)));
                prop_assert!(g > -1.0 && g < 1.0);
                prop_assert_eq!(g >= 0.0, a >= b);
            }
        }

        #[test]
        fn energies_sum_to_total(seed in any::<u64>()) {
            let p = MassProfile::new(vec![2.0, 1.5, 0.5]).unwrap();
            let s = sample_state(&p, 1.0, seed).unwrap();
            let parts: f64 = particle_energies(&p, s.q(), s.v()).unwrap().iter().sum();
            prop_assert!((parts - total_energy(&p, s.q(), s.v()).unwrap()).abs() <= 1e-12);
        }

        #[test]
        fn normalization_is_idempotent(seed in any::<u64>(), h0 in 0.1f64..10.0) {
            let p = MassProfile::new(vec![1.0, 3.0, 0.5]).unwrap();
            let s = sample_state(&p, h0, seed).unwrap();
            prop_assert!((s.energy(&p) - h0).abs() <= 1e-14 * h0.max(1.0));
            let again = normalize_to_shell(&p, s.q(), s.v(), h0).unwrap();
            prop_assert_eq!(again, s);
        }

        #[test]
        fn rods_round_trip(seed in any::<u64>(), r in 0.0f64..0.05) {
            let p = MassProfile::new(vec![2.0, 1.0, 1.0]).unwrap();
            let s = sample_state(&p, 1.0, seed).unwrap();
            let (rods, h_rods) = points_to_rods(r, &p, &s).unwrap();
            let (back, h) = rods_to_points(r, &p, &rods, s.v(), h_rods).unwrap();
            prop_assert!((h - 1.0).abs() <= 1e-15);
            for (a, b) in back.q().iter().zip(s.q()) {
                prop_assert!((a - b).abs() <= 1e-15);
            }
        }
    }
}
