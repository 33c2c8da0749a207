use cdlf::numerics::gru::{gru_forward, GruParams};
use cdlf::numerics::matrix::{norm_inf, Matrix};
use cdlf::numerics::rng::RngStream;
use cdlf::numerics::spectral::spectral_norm_default;
use cdlf::oracle::{build_oracle, simulate, Coupling, OracleParams};
use cdlf::stability::{gru_bound_lx, gru_bound_rho, measure_empirical, DEFAULT_FD_STEP};
use proptest::prelude::*;

/// Largest singular value by one-sided Jacobi rotations.
fn jacobi_top_singular(a: &Matrix<f64>) -> f64 {
    let (m, n) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a[(i, j)]).collect()).collect();
    for _ in 0..60 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = cols[p].iter().map(|v| v * v).sum();
                let beta: f64 = cols[q].iter().map(|v| v * v).sum();
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let (x, y) = (cols[p][i], cols[q][i]);
                    cols[p][i] = c * x - s * y;
                    cols[q][i] = s * x + c * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max)
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.gaussian())
}

#[test]
fn spectral_norm_matches_jacobi_svd() {
    let mut rng = RngStream::new(21);
    for (r, c) in [(3, 3), (5, 2), (2, 7), (8, 8), (16, 9)] {
        let a = gaussian_matrix(r, c, &mut rng);
        let want = jacobi_top_singular(&a);
        let got = spectral_norm_default(&a);
        assert!((got - want).abs() <= 1e-8 * want, "{r}x{c}: {got} vs {want}");
    }
}

#[test]
fn spectral_norm_of_diagonal_and_rank_one() {
    let d = Matrix::<f64>::from_diag(&[0.5, -3.0, 2.0]);
    assert!((spectral_norm_default(&d) - 3.0).abs() < 1e-10);
    let u = [1.0, 2.0, 2.0];
    let v = [3.0, 4.0];
    let r1 = Matrix::<f64>::from_fn(3, 2, |i, j| u[i] * v[j]);
    assert!((spectral_norm_default(&r1) - 15.0).abs() < 1e-9);
}

#[test]
fn closed_form_w1_matches_sorted_sample_coupling() {
    let sys = build_oracle(OracleParams { eps_gen: 0.3, ..Default::default() }).unwrap();
    let e0 = 0.7;
    let st = simulate(&sys, 1, 4, e0, None, Coupling::Common, 1).unwrap();
    // step-1 laws: N(0, 1) and N(C h_hat_0 + b_mis, 1) with h_hat_0 = e0 * dir
    let mut shift = sys.b_mis[0];
    for (k, d) in sys.e0_dir.iter().enumerate() {
        shift += sys.c[(0, k)] * d * e0;
    }
    let n = 200_000;
    let mut rng = RngStream::new(77);
    let mut a: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
    let mut b: Vec<f64> = (0..n).map(|_| shift + rng.gaussian::<f64>()).collect();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let w1 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64;
    assert!((st.delta_hat[0] - shift.abs()).abs() < 1e-12);
    assert!((w1 - st.delta_hat[0]).abs() < 0.01, "sorted {w1} vs closed {}", st.delta_hat[0]);
}

#[test]
fn latent_error_recursion_holds_stepwise() {
    for (geometry, eps_f) in [(cdlf::oracle::Geometry::Aligned, 0.0), (cdlf::oracle::Geometry::Random, 0.05)] {
        let p = OracleParams { latent_dim: 3, obs_dim: 2, eps_f, geometry, seed: 4, ..Default::default() };
        let sys = build_oracle(p).unwrap();
        let e0 = 0.5;
        let st = simulate(&sys, 30, 2000, e0, None, Coupling::Common, 8).unwrap();
        let mut prev = e0;
        for t in 0..30 {
            let rhs = p.rho * prev + p.lx * st.gap_hat[t] + eps_f;
            assert!(st.e_hat[t] <= rhs + 1e-12, "t = {}: {} > {rhs}", t + 1, st.e_hat[t]);
            prev = st.e_hat[t];
        }
    }
}

fn random_cell(hidden: usize, input: usize, scale: f64, rng: &mut RngStream) -> GruParams<f64> {
    let mut p = GruParams::random(hidden, input, rng);
    for m in [&mut p.w_z, &mut p.w_r, &mut p.w_h, &mut p.u_z, &mut p.u_r, &mut p.u_h] {
        m.scale_in_place(scale);
    }
    for b in [&mut p.b_z, &mut p.b_r, &mut p.b_h] {
        b.iter_mut().for_each(|v| *v = rng.gaussian::<f64>() * scale);
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spectral_norm_is_submultiplicative(seed in 0u64..10_000, n in 1usize..7, k in 1usize..7, m in 1usize..7) {
        let mut rng = RngStream::new(seed);
        let a = gaussian_matrix(n, k, &mut rng);
        let b = gaussian_matrix(k, m, &mut rng);
        let ab = a.matmul(&b).unwrap();
        let lhs = spectral_norm_default(&ab);
        let rhs = spectral_norm_default(&a) * spectral_norm_default(&b);
        prop_assert!(lhs <= rhs * (1.0 + 1e-9));
    }

    #[test]
    fn gru_state_stays_in_unit_box(seed in 0u64..10_000, hidden in 1usize..8, input in 1usize..4, scale in 0.1f64..5.0) {
        let mut rng = RngStream::new(seed);
        let p = random_cell(hidden, input, scale, &mut rng);
        let mut h: Vec<f64> = (0..hidden).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        for _ in 0..20 {
            let x: Vec<f64> = (0..input).map(|_| 10.0 * rng.gaussian::<f64>()).collect();
            let prev = norm_inf(&h);
            h = gru_forward(&h, &x, &p).unwrap().h_new;
            prop_assert!(norm_inf(&h) <= prev.max(1.0) + 1e-15);
        }
    }

    #[test]
    fn jacobian_bounds_dominate_measurements(seed in 0u64..10_000, hidden in 1usize..6, input in 1usize..3, scale in 0.2f64..3.0) {
        let mut rng = RngStream::new(seed);
        let p = random_cell(hidden, input, scale, &mut rng);
        let states: Vec<(Vec<f64>, Vec<f64>)> = (0..20)
            .map(|_| {
                let h = (0..hidden).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
                let x = rng.gaussian_vec(input);
                (h, x)
            })
            .collect();
        let emp = measure_empirical(&p, &states, DEFAULT_FD_STEP).unwrap();
        prop_assert!(gru_bound_rho(&p, &emp.gates).unwrap() >= emp.rho_hat);
        prop_assert!(gru_bound_lx(&p, &emp.gates).unwrap() >= emp.lx_hat);
    }
}
