use otcr::estimator::{EmpiricalBatch, FrozenTransport, PcrConfig, PcrModel};
use otcr::matstat::{Matrix, SeededRng};
use otcr::neural::{Activation, Mlp};

const H: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn batch(rng: &mut SeededRng, n: usize, d: usize) -> EmpiricalBatch {
    let x = rng.normal_matrix(n, d);
    let t: Vec<u8> = (0..n).map(|i| (i % 3 == 0) as u8).collect();
    let y: Vec<f64> = (0..n).map(|i| x[(i, 0)] + t[i] as f64 + 0.1 * rng.normal()).collect();
    EmpiricalBatch::new(x, t, y).unwrap()
}

#[derive(Clone, Copy)]
enum Block {
    Psi,
    Phi0,
    Phi1,
}

fn net(m: &mut PcrModel, b: Block) -> &mut Mlp {
    match b {
        Block::Psi => &mut m.psi,
        Block::Phi0 => &mut m.phi0,
        Block::Phi1 => &mut m.phi1,
    }
}

/// Central difference of `loss` along parameter `k` of block `b`.
fn central(model: &PcrModel, b: Block, k: usize, loss: &dyn Fn(&PcrModel) -> f64) -> f64 {
    let mut plus = model.clone();
    net(&mut plus, b).params_mut()[k] += H;
    let mut minus = model.clone();
    net(&mut minus, b).params_mut()[k] -= H;
    (loss(&plus) - loss(&minus)) / (2.0 * H)
}

fn sampled(rng: &mut SeededRng, model: &PcrModel, per_block: usize) -> Vec<(Block, usize)> {
    let mut out = Vec::new();
    for b in [Block::Psi, Block::Phi0, Block::Phi1] {
        let len = net(&mut model.clone(), b).params().len();
        for _ in 0..per_block {
            out.push((b, rng.below(len)));
        }
    }
    out
}

#[test]
fn mlp_gradients_match_central_differences() {
    for (seed, act) in [(1, Activation::Elu), (2, Activation::Relu)] {
        let mut rng = SeededRng::new(seed);
        let net = Mlp::new(&[4, 6, 5, 2], act, true, &mut rng).unwrap();
        let x = rng.normal_matrix(7, 4);
        let w = rng.normal_matrix(7, 2);
        let loss = |m: &Mlp| m.predict(&x).unwrap().frobenius_dot(&w);
        let (_, tape) = net.forward(&x).unwrap();
        let (g, dx) = net.backward(&tape, &w).unwrap();
        for k in 0..net.params().len() {
            let mut p = net.clone();
            p.params_mut()[k] += H;
            let mut m = net.clone();
            m.params_mut()[k] -= H;
            let fd = (loss(&p) - loss(&m)) / (2.0 * H);
            assert!(rel_err(g[k], fd) < 1e-5, "param {k}: {} vs {fd}", g[k]);
        }
        for i in 0..7 {
            for j in 0..4 {
                let mut xp = x.clone();
                xp[(i, j)] += H;
                let mut xm = x.clone();
                xm[(i, j)] -= H;
                let fd = (net.predict(&xp).unwrap().frobenius_dot(&w) - net.predict(&xm).unwrap().frobenius_dot(&w)) / (2.0 * H);
                assert!(rel_err(dx[(i, j)], fd) < 1e-5);
            }
        }
    }
}

#[test]
fn factual_path_gradients() {
    for seed in 0..10 {
        let mut rng = SeededRng::new(100 + seed);
        let cfg = PcrConfig { seed, lambda: 0.0, ..PcrConfig::default() };
        let model = PcrModel::new(&cfg, 5).unwrap();
        let b = batch(&mut rng, 12, 5);
        let (_, grads, _) = model.factual_loss(&b).unwrap();
        let loss = |m: &PcrModel| m.factual_loss(&b).unwrap().0;
        for (blk, k) in sampled(&mut rng, &model, 8) {
            let g = match blk {
                Block::Psi => grads.psi[k],
                Block::Phi0 => grads.phi0[k],
                Block::Phi1 => grads.phi1[k],
            };
            let fd = central(&model, blk, k, &loss);
            assert!(rel_err(g, fd) < 1e-4, "seed {seed}: {g} vs {fd}");
        }
    }
}

#[test]
fn full_loss_gradients_with_frozen_transport() {
    for (seed, kappa, proportion) in [(0, 0.5, 0.5), (1, 0.0, 1.0), (2, 1.0, 0.5), (3, 0.3, 0.75)] {
        let mut rng = SeededRng::new(200 + seed);
        let cfg = PcrConfig { seed, lambda: 2.0, kappa, proportion, ..PcrConfig::default() };
        let model = PcrModel::new(&cfg, 4).unwrap();
        let b = batch(&mut rng, 15, 4);
        let e = model.evaluate_batch(&b, None).unwrap();
        let frozen: FrozenTransport = e.transport.clone().unwrap();
        let loss = |m: &PcrModel| m.evaluate_batch(&b, Some(&frozen)).unwrap().loss.total;
        assert!((loss(&model) - e.loss.total).abs() < 1e-12);
        for (blk, k) in sampled(&mut rng, &model, 8) {
            let g = match blk {
                Block::Psi => e.grads.psi[k],
                Block::Phi0 => e.grads.phi0[k],
                Block::Phi1 => e.grads.phi1[k],
            };
            let fd = central(&model, blk, k, &loss);
            assert!(rel_err(g, fd) < 1e-3, "seed {seed}: {g} vs {fd}");
        }
    }
}

#[test]
fn discrepancy_gradient_is_scaled_by_lambda() {
    let mut rng = SeededRng::new(300);
    let b = batch(&mut rng, 12, 3);
    let base = PcrConfig { lambda: 1.0, ..PcrConfig::default() };
    let m1 = PcrModel::new(&base, 3).unwrap();
    let frozen = m1.evaluate_batch(&b, None).unwrap().transport.unwrap();
    let m0 = PcrModel { config: PcrConfig { lambda: 0.0, ..base.clone() }, ..m1.clone() };
    let m3 = PcrModel { config: PcrConfig { lambda: 3.0, ..base }, ..m1.clone() };
    let g0 = m0.evaluate_batch(&b, Some(&frozen)).unwrap().grads.psi;
    let g1 = m1.evaluate_batch(&b, Some(&frozen)).unwrap().grads.psi;
    let g3 = m3.evaluate_batch(&b, Some(&frozen)).unwrap().grads.psi;
    for k in 0..g0.len() {
        let unit = g1[k] - g0[k];
        assert!((g3[k] - g0[k] - 3.0 * unit).abs() < 1e-9 * (1.0 + unit.abs()));
    }
}

#[test]
fn input_width_is_checked() {
    let model = PcrModel::new(&PcrConfig::default(), 3).unwrap();
    let b = EmpiricalBatch::new(Matrix::zeros(4, 2), vec![0, 1, 0, 1], vec![0.0; 4]).unwrap();
    assert!(model.evaluate_batch(&b, None).is_err());
}
