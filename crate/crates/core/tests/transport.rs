use otcr::isp::{fit_projector, reconstruction_residual};
use otcr::matstat::{orthonormalize_columns, pairwise_sq_dist, svd_thin, Matrix, SeededRng};
use otcr::ot_entropic::{sinkhorn, SinkhornConfig};
use otcr::ot_exact::{brute_force_assignment, solve_exact_ot, solve_transport, solve_transport_warm, MassVector};
use otcr::ot_fgw::{fgw_objective, fgw_solve, gw_cost, gw_cost_naive, gw_grad, FgwProblem};
use proptest::prelude::*;

fn masses(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| 0.1 + rng.uniform()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

/// North-west corner plan after permuting rows and columns.
fn corner_plan(a: &[f64], b: &[f64], rows: &[usize], cols: &[usize]) -> Matrix {
    let mut plan = Matrix::zeros(a.len(), b.len());
    let (mut ra, mut cb) = (a.to_vec(), b.to_vec());
    let (mut i, mut j) = (0, 0);
    while i < rows.len() && j < cols.len() {
        let (r, c) = (rows[i], cols[j]);
        let q = ra[r].min(cb[c]);
        plan[(r, c)] += q;
        ra[r] -= q;
        cb[c] -= q;
        if ra[r] <= cb[c] {
            i += 1;
        } else {
            j += 1;
        }
    }
    plan
}

fn sym_dist(rng: &mut SeededRng, n: usize) -> Matrix {
    let pts = rng.normal_matrix(n, 2);
    pairwise_sq_dist(&pts, &pts).unwrap()
}

#[test]
fn exact_beats_every_corner_plan() {
    let mut rng = SeededRng::new(1);
    for _ in 0..40 {
        let (n, m) = (2 + rng.below(6), 2 + rng.below(6));
        let cost = rng.uniform_matrix(n, m);
        let (a, b) = (masses(&mut rng, n), masses(&mut rng, m));
        let plan = solve_transport(&cost, &a, &b).unwrap();
        assert!(plan.marginal_violation(&a, &b) < 1e-9);
        assert!(plan.nonzeros() <= n + m - 1);
        assert!((plan.cost - plan.plan.frobenius_dot(&cost)).abs() < 1e-12);
        for _ in 0..50 {
            let mut rows: Vec<usize> = (0..n).collect();
            let mut cols: Vec<usize> = (0..m).collect();
            rng.shuffle(&mut rows);
            rng.shuffle(&mut cols);
            let alt = corner_plan(&a, &b, &rows, &cols);
            assert!(plan.cost <= alt.frobenius_dot(&cost) + 1e-12);
        }
    }
}

#[test]
fn uniform_square_matches_assignment() {
    let mut rng = SeededRng::new(2);
    for _ in 0..60 {
        let n = 1 + rng.below(6);
        let cost = rng.uniform_matrix(n, n);
        let u = MassVector::uniform(n);
        let plan = solve_exact_ot(&cost, &u, &u).unwrap();
        let best = brute_force_assignment(&cost).unwrap();
        assert!((plan.cost - best.cost / n as f64).abs() < 1e-10);
    }
}

#[test]
fn warm_start_reaches_the_same_optimum() {
    let mut rng = SeededRng::new(3);
    for _ in 0..30 {
        let (n, m) = (3 + rng.below(20), 3 + rng.below(20));
        let (a, b) = (masses(&mut rng, n), masses(&mut rng, m));
        let c1 = rng.uniform_matrix(n, m);
        let (_, basis) = solve_transport_warm(&c1, &a, &b, None).unwrap();
        let c2 = rng.uniform_matrix(n, m);
        let (warm, _) = solve_transport_warm(&c2, &a, &b, basis.as_ref()).unwrap();
        let cold = solve_transport(&c2, &a, &b).unwrap();
        assert!((warm.cost - cold.cost).abs() < 1e-10);
        assert!(warm.marginal_violation(&a, &b) < 1e-9);
    }
}

#[test]
fn sinkhorn_cost_decreases_along_epsilon_ladder() {
    let mut rng = SeededRng::new(4);
    for _ in 0..10 {
        let cost = rng.uniform_matrix(5, 5);
        let u = MassVector::uniform(5);
        let exact = solve_exact_ot(&cost, &u, &u).unwrap().cost;
        let mut prev = f64::INFINITY;
        for r in [1.0, 0.3, 0.1, 0.03, 0.01] {
            let cfg = SinkhornConfig::new(r * cost.mean(), 10_000, 1e-9).unwrap();
            let p = sinkhorn(&cost, &u, &u, &cfg).unwrap();
            assert!(p.plan.as_slice().iter().all(|&x| x > 0.0));
            assert!(p.cost <= prev + 1e-9);
            if p.converged {
                assert!(p.cost >= exact - 1e-9);
            }
            prev = p.cost;
        }
    }
}

#[test]
fn decomposed_gw_matches_naive_contraction() {
    let mut rng = SeededRng::new(5);
    for _ in 0..20 {
        let (n, m) = (1 + rng.below(6), 1 + rng.below(6));
        let (c0, c1) = (sym_dist(&mut rng, n), sym_dist(&mut rng, m));
        let plan = rng.uniform_matrix(n, m).scaled(1.0 / (n * m) as f64);
        let naive = gw_cost_naive(&c0, &c1, &plan).unwrap();
        assert!((gw_cost(&c0, &c1, &plan).unwrap() - naive).abs() < 1e-10 * (1.0 + naive));
        // Entrywise derivative of the quartic sum, taken directly.
        let g = gw_grad(&c0, &c1, &plan).unwrap();
        for i in 0..n {
            for j in 0..m {
                let mut d = 0.0;
                for k in 0..n {
                    for l in 0..m {
                        d += 2.0 * (c0[(i, k)] - c1[(j, l)]).powi(2) * plan[(k, l)];
                    }
                }
                assert!((g[(i, j)] - d).abs() < 1e-10 * (1.0 + d.abs()));
            }
        }
    }
}

#[test]
fn frank_wolfe_descends_and_stays_feasible() {
    let mut rng = SeededRng::new(6);
    for case in 0..24 {
        let (n, m) = (2 + rng.below(8), 2 + rng.below(8));
        let kappa = [0.0, 0.3, 0.7, 1.0][case % 4];
        let (x0, x1) = (rng.normal_matrix(n, 3), rng.normal_matrix(m, 3));
        let prob = FgwProblem::new(
            pairwise_sq_dist(&x0, &x1).unwrap(),
            pairwise_sq_dist(&x0, &x0).unwrap(),
            pairwise_sq_dist(&x1, &x1).unwrap(),
            MassVector::uniform(n),
            MassVector::uniform(m),
            kappa,
        )
        .unwrap();
        let res = fgw_solve(&prob, 100, 1e-7).unwrap();
        assert!(res.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-10));
        let (a, b) = (MassVector::uniform(n), MassVector::uniform(m));
        assert!(res.plan.marginal_violation(a.values(), b.values()) <= 1e-6);
        assert!((fgw_objective(&prob, &res.plan.plan) - res.objective).abs() < 1e-10);
        if kappa == 1.0 {
            let exact = solve_exact_ot(&prob.cross, &a, &b).unwrap();
            assert!((res.objective - exact.cost).abs() < 1e-8);
        }
    }
}

#[test]
fn projector_beats_random_bases() {
    let mut rng = SeededRng::new(7);
    for _ in 0..5 {
        let r = rng.normal_matrix(25, 6);
        let p = fit_projector(&r, 0.5, false).unwrap();
        let s = svd_thin(&r).unwrap().s;
        let tail: f64 = s[3..].iter().map(|x| x * x).sum();
        assert!((p.residual - tail).abs() < 1e-8);
        for _ in 0..50 {
            let u = orthonormalize_columns(&rng.normal_matrix(6, 3));
            assert!(p.residual <= reconstruction_residual(&r, &u).unwrap() + 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn exact_plans_are_feasible(seed in 0u64..10_000, n in 1usize..12, m in 1usize..12) {
        let mut rng = SeededRng::new(seed);
        let cost = rng.uniform_matrix(n, m);
        let (a, b) = (masses(&mut rng, n), masses(&mut rng, m));
        let plan = solve_transport(&cost, &a, &b).unwrap();
        prop_assert!(plan.plan.as_slice().iter().all(|&x| x >= 0.0));
        prop_assert!(plan.marginal_violation(&a, &b) < 1e-9);
    }

    #[test]
    fn translated_costs_shift_by_constant(seed in 0u64..10_000, c in -3.0f64..3.0) {
        let mut rng = SeededRng::new(seed);
        let cost = rng.uniform_matrix(4, 5);
        let (a, b) = (masses(&mut rng, 4), masses(&mut rng, 5));
        let base = solve_transport(&cost, &a, &b).unwrap().cost;
        let moved = solve_transport(&cost.add_scalar(c), &a, &b).unwrap().cost;
        prop_assert!((moved - base - c).abs() < 1e-9);
    }
}
