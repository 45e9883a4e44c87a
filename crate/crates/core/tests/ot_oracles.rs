mod common;

use common::{entropic_ot_oracle, entropic_partial_ot_oracle, max_abs_diff, rng, uniform_matrix};
use otmatch::ot::{partial_sinkhorn, sinkhorn, CostMatrix, SinkhornConfig};
use rand::Rng;

#[test]
fn sinkhorn_matches_primal_oracle_on_5x5() {
    let mut r = rng(2024);
    let c = uniform_matrix(&mut r, 5, 5, 0.0, 1.0);
    let oracle = entropic_ot_oracle(&c, 0.1);
    let plan = sinkhorn(&CostMatrix::new(c).unwrap(), &SinkhornConfig::with_epsilon(0.1).unwrap()).unwrap();
    let err = max_abs_diff(&plan.values().to_owned(), &oracle);
    assert!(err < 1e-5, "entrywise error {err:e}");
}

#[test]
fn sinkhorn_matches_oracle_across_sizes() {
    let mut r = rng(7);
    for _ in 0..30 {
        let b = r.random_range(2..=6);
        let eps = [0.05, 0.1, 0.5][r.random_range(0..3)];
        let c = uniform_matrix(&mut r, b, b, 0.0, 1.0);
        let oracle = entropic_ot_oracle(&c, eps);
        let plan = sinkhorn(&CostMatrix::new(c).unwrap(), &SinkhornConfig::with_epsilon(eps).unwrap()).unwrap();
        let err = max_abs_diff(&plan.values().to_owned(), &oracle);
        assert!(err < 1e-4, "b={b} eps={eps}: {err:e}");
    }
}

#[test]
fn partial_matches_active_set_oracle_on_4x4() {
    let mut r = rng(99);
    let c = uniform_matrix(&mut r, 4, 4, 0.0, 1.0);
    let oracle = entropic_partial_ot_oracle(&c, 0.1, 0.75);
    let plan = partial_sinkhorn(&CostMatrix::new(c).unwrap(), 0.75, &SinkhornConfig::with_epsilon(0.1).unwrap()).unwrap();
    let err = max_abs_diff(&plan.values().to_owned(), &oracle);
    assert!(err < 1e-4, "entrywise error {err:e}");
    assert!((plan.total_mass() - 0.75).abs() < 1e-9);
}

#[test]
fn partial_matches_oracle_across_masses() {
    let mut r = rng(13);
    for _ in 0..12 {
        let b = r.random_range(2..=6);
        let eps = [0.05, 0.1, 0.5][r.random_range(0..3)];
        let s = [0.25, 0.5, 0.75][r.random_range(0..3)];
        let c = uniform_matrix(&mut r, b, b, 0.0, 1.0);
        let oracle = entropic_partial_ot_oracle(&c, eps, s);
        let plan = partial_sinkhorn(&CostMatrix::new(c).unwrap(), s, &SinkhornConfig::with_epsilon(eps).unwrap()).unwrap();
        let err = max_abs_diff(&plan.values().to_owned(), &oracle);
        assert!(err < 1e-4, "b={b} eps={eps} s={s}: {err:e}");
    }
}
