use nalgebra::DMatrix;
use nucdiff_core::proxops::{nuclear_norm, nuclear_subgradient, soft_threshold, svt, DEFAULT_RANK_TOL};
use nucdiff_core::{normal_matrix, seeded_rng};
use proptest::prelude::*;

fn prox_objective(z: &DMatrix<f64>, m: &DMatrix<f64>, t: f64) -> f64 {
    0.5 * (z - m).norm_squared() + t * nuclear_norm(z).unwrap()
}

#[test]
fn svt_beats_every_perturbation() {
    let mut rng = seeded_rng(11);
    let m = normal_matrix(&mut rng, 8, 5);
    let t = 0.3;
    let z = svt(&m, t).unwrap();
    let best = prox_objective(&z, &m, t);
    for k in 0..1000 {
        let scale = 10f64.powi(-(k % 6) as i32);
        let dz = normal_matrix(&mut rng, 8, 5) * scale;
        let other = prox_objective(&(&z + dz), &m, t);
        assert!(other >= best - 1e-12, "perturbation {k} lowered the objective: {other} < {best}");
    }
}

#[test]
fn subgradient_is_the_gradient_away_from_rank_deficiency() {
    let mut rng = seeded_rng(12);
    let m = normal_matrix(&mut rng, 5, 5);
    let g = nuclear_subgradient(&m, DEFAULT_RANK_TOL).unwrap();
    let h = 1e-6;
    for _ in 0..20 {
        let d = normal_matrix(&mut rng, 5, 5);
        let d = &d / d.norm();
        let fd = (nuclear_norm(&(&m + &d * h)).unwrap() - nuclear_norm(&(&m - &d * h)).unwrap()) / (2.0 * h);
        let analytic = g.dot(&d);
        assert!((fd - analytic).abs() <= 1e-4, "fd {fd} vs {analytic}");
    }
}

#[test]
fn soft_threshold_matches_definition_elementwise() {
    let m = normal_matrix(&mut seeded_rng(13), 5, 5) * 2.0;
    let out = soft_threshold(&m, 0.7).unwrap();
    for (a, b) in m.iter().zip(out.iter()) {
        let want = if *a > 0.7 {
            a - 0.7
        } else if *a < -0.7 {
            a + 0.7
        } else {
            0.0
        };
        assert_eq!(*b, want);
    }
}

fn matrix(seed: u64, rows: usize, cols: usize) -> DMatrix<f64> {
    normal_matrix(&mut seeded_rng(seed), rows, cols)
}

proptest! {
    #[test]
    fn prox_operators_commute_with_positive_scaling(seed in any::<u64>(), c in 0.1f64..10.0, t in 0.0f64..2.0) {
        let m = matrix(seed, 6, 4);
        let st = soft_threshold(&(&m * c), c * t).unwrap() - soft_threshold(&m, t).unwrap() * c;
        prop_assert!(st.amax() <= 1e-12 * c.max(1.0) * (1.0 + m.amax()));
        let sv = svt(&(&m * c), c * t).unwrap() - svt(&m, t).unwrap() * c;
        prop_assert!(sv.amax() <= 1e-10 * c.max(1.0) * (1.0 + m.amax()));
    }

    #[test]
    fn nuclear_norm_is_a_norm(s1 in any::<u64>(), s2 in any::<u64>(), c in -5.0f64..5.0) {
        let (a, b) = (matrix(s1, 5, 3), matrix(s2, 5, 3));
        let (na, nb) = (nuclear_norm(&a).unwrap(), nuclear_norm(&b).unwrap());
        prop_assert!(nuclear_norm(&(&a + &b)).unwrap() <= na + nb + 1e-10);
        prop_assert!((nuclear_norm(&(&a * c)).unwrap() - c.abs() * na).abs() <= 1e-10 * (1.0 + na));
        prop_assert!(na + 1e-10 >= a.norm());
    }
}
