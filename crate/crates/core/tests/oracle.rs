use fallball::flow::{advance, Budget, Collision, FlowConfig};
use fallball::state::{sample_state, MassProfile};
use fallball::tangent::{jump, oracle::fd_oracle, random_section_frame};
use fallball::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Worst relative gap between analytic jumps and finite differences over
/// `count` segments whose single collision satisfies `want`.
fn worst_gap(masses: &[f64], count: usize, want: impl Fn(Collision) -> bool) -> f64 {
    let mp = MassProfile::new(masses.to_vec()).unwrap();
    let cfg = FlowConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut done, mut worst) = (0, 0.0f64);
    for seed in 0.. {
        if done == count {
            break;
        }
        let s = sample_state(&mp, 1.0, seed).unwrap();
        let run = advance(&mp, &s, Budget::events(2), &cfg).unwrap();
        let first = &run.events[0];
        if !want(first.kind) {
            continue;
        }
        let t = 0.5 * (first.t + run.events[1].t);
        let tv = random_section_frame(mp.n(), &mut rng).swap_remove(0);
        let fd = match fd_oracle(&mp, &s, &tv, t, &cfg) {
            Ok(fd) => fd,
            Err(Error::OracleUnreliable(_)) => continue,
            Err(e) => panic!("{e}"),
        };
        let mut diff = jump(&mp, &first.state_pre(1.0), first.kind, &tv).unwrap();
        let scale = diff.norm();
        diff.add_scaled(-1.0, &fd);
        worst = worst.max(diff.norm() / scale);
        done += 1;
    }
    worst
}

#[test]
fn pair_jump_with_unequal_masses_matches_finite_differences() {
    let w = worst_gap(&[3.0, 2.0, 1.0], 100, |k| matches!(k, Collision::Pair(_)));
    assert!(w <= 1e-5, "{w}");
}

#[test]
fn pair_jump_with_equal_masses_matches_finite_differences() {
    let w = worst_gap(&[1.0, 1.0, 1.0], 100, |k| matches!(k, Collision::Pair(_)));
    assert!(w <= 1e-5, "{w}");
}

#[test]
fn floor_jump_matches_finite_differences() {
    let w = worst_gap(&[2.0, 1.0, 0.5], 100, |k| k == Collision::Floor);
    assert!(w <= 1e-5, "{w}");
}
