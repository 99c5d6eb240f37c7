use nalgebra::DMatrix;
use nucdiff_core::rpca::{rpca_objective, rpca_solve, RpcaConfig};
use nucdiff_core::{normal_matrix, seeded_rng, CasoratiMatrix};
use rand::Rng;

/// Rank-2 background plus 5% gross corruptions.
fn planted(seed: u64, n: usize, p: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut rng = seeded_rng(seed);
    let l0 = normal_matrix(&mut rng, n, 2) * normal_matrix(&mut rng, 2, p);
    let x0 = DMatrix::from_fn(n, p, |_, _| {
        if rng.random_bool(0.05) {
            rng.random_range(-5.0..5.0)
        } else {
            0.0
        }
    });
    (l0, x0)
}

#[test]
fn planted_low_rank_is_recovered_on_ten_seeds() {
    let (n, p) = (400, 50);
    for seed in 0..10 {
        let (l0, x0) = planted(seed, n, p);
        let y = CasoratiMatrix::new(&l0 + &x0, n, 1).unwrap();
        let mut cfg = RpcaConfig::for_shape(n, p);
        cfg.max_iters = 5000;
        let d = rpca_solve(&y, &cfg).unwrap();
        assert!(d.converged, "seed {seed}: not converged after {} iterations", d.iterations);
        let err = (d.l.values() - &l0).norm() / l0.norm();
        assert!(err <= 1e-2, "seed {seed}: relative error {err}");
        for (k, w) in d.objective_trace.windows(2).enumerate() {
            assert!(w[1] <= w[0] + 1e-9, "seed {seed}: objective rose at iteration {k}");
        }
    }
}

#[test]
fn trace_endpoint_is_the_objective_of_the_output() {
    let (l0, x0) = planted(99, 60, 12);
    let y = CasoratiMatrix::new(&l0 + &x0, 60, 1).unwrap();
    let cfg = RpcaConfig::for_shape(60, 12);
    let d = rpca_solve(&y, &cfg).unwrap();
    let last = *d.objective_trace.last().unwrap();
    let direct = rpca_objective(&y, &d.l, &d.x, &cfg).unwrap();
    assert!((last - direct).abs() <= 1e-9 * direct.max(1.0));
    assert_eq!(d.objective_trace.len(), d.iterations + 1);
}
