use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scb_core::cae::{self, ArchDescriptor, CaeParams, Mode, Role, TrainConfig};
use scb_core::dsp::Label;

fn batch(b: usize, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((b, 12, 250), |(_, c, t)| {
        (t as f64 * 0.07 * (c + 1) as f64).sin() + rng.random_range(-1.0..1.0)
    })
}

fn labels(b: usize) -> Vec<Label> {
    (0..b).map(|i| if i % 2 == 0 { Label::Rest } else { Label::Move }).collect()
}

fn objective(p: &CaeParams, x: &Array3<f64>, y: &[Label], cfg: &TrainConfig) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = cae::forward(p, x.view(), Mode::Train { dropout: 0.0 }, &mut rng).unwrap();
    let l = cae::loss(out.recon.view(), x.view(), out.logits.view(), y, cfg.lambda);
    let penalty: f64 = p
        .slots()
        .iter()
        .zip(p.tensors())
        .filter(|(s, _)| s.role == Role::Weight)
        .map(|(_, t)| t.iter().map(|w| w * w).sum::<f64>())
        .sum();
    l.total + 0.5 * cfg.weight_decay * penalty
}

fn no_dropout() -> TrainConfig {
    TrainConfig { dropout: 0.0, weight_decay: 1e-3, ..TrainConfig::default() }
}

#[test]
fn finite_difference_gate() {
    let p = CaeParams::init(&ArchDescriptor::default(), 7).unwrap();
    let x = batch(4, 1);
    let y = labels(4);
    let cfg = no_dropout();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g = cae::grad(&p, x.view(), &y, &cfg, &mut rng).unwrap().grads;

    let slots = p.slots();
    let trainable: Vec<usize> = (0..slots.len()).filter(|&i| slots[i].role.trainable()).collect();
    let mut pick = ChaCha8Rng::seed_from_u64(99);
    let eps = 1e-4;
    let base = cae::activation_pattern(&p, x.view()).unwrap();
    let mut worst = 0.0f64;
    let mut skipped = 0;
    let mut n = 0;
    while n < 25 {
        // cycle over tensors so every layer type is probed
        let ti = trainable[n % trainable.len()];
        let len = p.tensors()[ti].len();
        let j = pick.random_range(0..len);
        let analytic = g.tensors()[ti][j];
        let mut plus = p.clone();
        plus.tensors_mut()[ti][j] += eps;
        let mut minus = p.clone();
        minus.tensors_mut()[ti][j] -= eps;
        // A central difference across a ReLU or pooling kink measures the
        // kink, not the derivative; draw another coordinate instead.
        if cae::activation_pattern(&plus, x.view()).unwrap() != base
            || cae::activation_pattern(&minus, x.view()).unwrap() != base
        {
            skipped += 1;
            assert!(skipped < 25, "too many kink crossings");
            continue;
        }
        n += 1;
        let numeric = (objective(&plus, &x, &y, &cfg) - objective(&minus, &x, &y, &cfg)) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
        assert!(
            rel < 1e-4 || (analytic - numeric).abs() < 1e-9,
            "{}[{j}]: analytic {analytic:e} numeric {numeric:e} rel {rel:e}",
            slots[ti].name
        );
    }
    eprintln!("worst relative error {worst:e}, {skipped} kink draws skipped");
}

#[test]
fn zero_lambda_leaves_only_decay_on_head() {
    let p = CaeParams::init(&ArchDescriptor::default(), 3).unwrap();
    let x = batch(3, 2);
    let cfg = TrainConfig { lambda: 0.0, ..no_dropout() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g = cae::grad(&p, x.view(), &labels(3), &cfg, &mut rng).unwrap().grads;
    for (layer, grad) in p.aux.iter().zip(&g.aux) {
        for (w, gw) in layer.w.iter().zip(&grad.w) {
            assert_eq!(*gw, cfg.weight_decay * w);
        }
        assert!(grad.b.iter().all(|v| *v == 0.0));
    }
}

#[test]
fn duplicated_batch_has_same_gradient() {
    let p = CaeParams::init(&ArchDescriptor::default(), 5).unwrap();
    let x = batch(3, 4);
    let y = labels(3);
    let doubled = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
    let yy: Vec<Label> = y.iter().chain(&y).copied().collect();
    let cfg = TrainConfig { weight_decay: 0.0, ..no_dropout() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = cae::grad(&p, x.view(), &y, &cfg, &mut rng).unwrap();
    let b = cae::grad(&p, doubled.view(), &yy, &cfg, &mut rng).unwrap();
    assert!((a.loss.total - b.loss.total).abs() < 1e-10);
    for (ga, gb) in a.grads.tensors().iter().zip(b.grads.tensors()) {
        for (u, v) in ga.iter().zip(gb) {
            assert!((u - v).abs() < 1e-10, "{u} vs {v}");
        }
    }
}

#[test]
fn loss_closed_forms() {
    let zeros = Array3::<f64>::zeros((1, 12, 250));
    let ones = Array3::<f64>::ones((1, 12, 250));
    let logits = Array2::from_shape_vec((1, 2), vec![0.3, -0.2]).unwrap();
    let l = cae::loss(ones.view(), zeros.view(), logits.view(), &[Label::Rest], 0.0);
    assert_eq!(l.recon_mse, 1.0);
    assert_eq!(l.total, l.recon_mse);

    let confident = Array2::from_shape_vec((2, 2), vec![20.0, -20.0, -20.0, 20.0]).unwrap();
    let x = batch(2, 0);
    let l = cae::loss(x.view(), x.view(), confident.view(), &[Label::Rest, Label::Move], 1.0);
    assert_eq!(l.recon_mse, 0.0);
    // log(1 + e^-40) is below f64 resolution next to 1
    assert!(l.class_ce >= 0.0 && l.class_ce <= 1e-15);
    assert!(l.total >= 0.0 && l.total < 1e-15);
}

#[test]
fn forward_shapes_and_modes() {
    let p = CaeParams::init(&ArchDescriptor::default(), 1).unwrap();
    let x = batch(5, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = cae::forward(&p, x.view(), Mode::Infer, &mut rng).unwrap();
    let b = cae::forward(&p, x.view(), Mode::Infer, &mut rng).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.latent.dim(), (5, 64));
    assert_eq!(a.recon.dim(), (5, 12, 250));
    assert_eq!(a.logits.dim(), (5, 2));
    let single = x.slice(ndarray::s![..1, .., ..]).to_owned();
    assert!(cae::forward(&p, single.view(), Mode::Train { dropout: 0.1 }, &mut rng).is_err());
    let t = cae::forward(&p, x.view(), Mode::Train { dropout: 0.25 }, &mut rng).unwrap();
    assert_eq!(t.recon.dim(), (5, 12, 250));
}

#[test]
fn encode_matches_batch_of_one() {
    let p = CaeParams::init(&ArchDescriptor::default(), 2).unwrap();
    let x = batch(1, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let f = cae::forward(&p, x.view(), Mode::Infer, &mut rng).unwrap();
    let z = cae::encode(&p, x.index_axis(Axis(0), 0)).unwrap();
    assert_eq!(z.as_slice().unwrap(), f.latent.row(0).to_vec().as_slice());

    let zero = Array2::<f64>::zeros((12, 250));
    let z0 = cae::encode(&p, zero.view()).unwrap();
    assert!(z0.iter().all(|v| v.is_finite()));
    assert_eq!(z0, cae::encode(&p, zero.view()).unwrap());
}

#[test]
fn encode_throughput() {
    let p = CaeParams::init(&ArchDescriptor::default(), 2).unwrap();
    let x = batch(20, 8);
    let start = std::time::Instant::now();
    let n = 1000;
    for i in 0..n {
        cae::encode(&p, x.index_axis(Axis(0), i % 20)).unwrap();
    }
    let per = start.elapsed().as_secs_f64() * 1e3 / n as f64;
    assert!(per < 10.0, "mean encode {per:.3} ms");
}

