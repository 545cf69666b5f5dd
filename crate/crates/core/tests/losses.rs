use mitunet_core::losses::{
    cross_entropy, dice_loss, focal_loss, loss, lovasz_from_probs, lovasz_softmax, tversky_loss, LossKind, LossSpec,
    SoftConfusion,
};
use mitunet_core::tensor::gradcheck::{analytic_gradient, numeric_gradient, relative_error};
use mitunet_core::tensor::{Graph, NodeId, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-6;

fn random_pair(seed: u64, shape: [usize; 3]) -> (Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [n, h, w] = shape;
    let logits = Tensor::uniform(&[n, 2, h, w], -3.0, 3.0, &mut rng).unwrap();
    let target = Tensor::new(&[n, h, w], (0..n * h * w).map(|_| rng.random_range(0..2) as f64).collect()).unwrap();
    (logits, target)
}

/// Logits whose softmax is exactly one-hot in f64 (or `p` for fg = ln(p/(1-p))).
fn hard_logits(pred: &[bool], shape: [usize; 3]) -> Tensor<f64> {
    let [n, h, w] = shape;
    let hw = h * w;
    let mut d = vec![0.0; n * 2 * hw];
    for b in 0..n {
        for i in 0..hw {
            let fg = if pred[b * hw + i] { 50.0 } else { -50.0 };
            d[(b * 2 + 1) * hw + i] = fg;
            d[b * 2 * hw + i] = -fg;
        }
    }
    Tensor::new(&[n, 2, h, w], d).unwrap()
}

fn eval(logits: &Tensor<f64>, f: impl Fn(&mut Graph<f64>, NodeId) -> mitunet_core::Result<NodeId>) -> f64 {
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let l = f(&mut g, x).unwrap();
    g.value(l).item().unwrap()
}

fn bits(v: usize, n: usize) -> Vec<bool> {
    (0..n).map(|i| v >> i & 1 == 1).collect()
}

fn to_target(b: &[bool], shape: [usize; 3]) -> Tensor<f64> {
    Tensor::new(&shape, b.iter().map(|&x| x as u8 as f64).collect()).unwrap()
}

// ------------------------------------------------------------- tversky

#[test]
fn tversky_spot_value() {
    let c = SoftConfusion { tp: 8.0, fp: 2.0, fn_: 4.0 };
    let loss = 1.0 - c.tversky_index(0.6, 0.4, 0.0);
    assert!((loss - 0.259259).abs() < 5e-7, "{loss}");
    assert!((loss - (1.0 - 8.0 / 10.8)).abs() < 1e-15);

    // the same counts realised as hard pixels on the graph
    let mut pred = vec![true; 10];
    pred.extend([false; 4]);
    pred.extend([false; 6]);
    let mut gt = vec![true; 8];
    gt.extend([false; 2]);
    gt.extend([true; 4]);
    gt.extend([false; 6]);
    let shape = [1, 4, 5];
    let l = eval(&hard_logits(&pred, shape), |g, x| tversky_loss(g, x, &to_target(&gt, shape), 0.6, 0.4, EPS));
    assert!((l - 0.259259).abs() < 5e-7, "{l}");
}

#[test]
fn tversky_perfect_is_zero() {
    let (_, t) = random_pair(1, [2, 4, 4]);
    let pred: Vec<bool> = t.data().iter().map(|&v| v == 1.0).collect();
    let l = eval(&hard_logits(&pred, [2, 4, 4]), |g, x| tversky_loss(g, x, &t, 0.7, 0.3, EPS));
    assert!(l.abs() < 1e-12, "{l}");
}

#[test]
fn tversky_half_half_is_dice_on_100_pairs() {
    for seed in 0..100 {
        let (lg, t) = random_pair(seed, [2, 4, 4]);
        let a = eval(&lg, |g, x| tversky_loss(g, x, &t, 0.5, 0.5, EPS));
        let b = eval(&lg, |g, x| dice_loss(g, x, &t, EPS));
        assert!((a - b).abs() <= 1e-6, "seed {seed}: {a} vs {b}");
    }
}

#[test]
fn tversky_is_monotone_in_each_weight() {
    let (lg, t) = random_pair(7, [2, 4, 4]);
    let grid = [0.1, 0.3, 0.5, 0.7, 0.9, 1.5];
    for &b in &grid {
        let row: Vec<f64> = grid.iter().map(|&a| eval(&lg, |g, x| tversky_loss(g, x, &t, a, b, EPS))).collect();
        assert!(row.windows(2).all(|w| w[1] > w[0]), "alpha sweep at beta {b}: {row:?}");
    }
    for &a in &grid {
        let col: Vec<f64> = grid.iter().map(|&b| eval(&lg, |g, x| tversky_loss(g, x, &t, a, b, EPS))).collect();
        assert!(col.windows(2).all(|w| w[1] > w[0]), "beta sweep at alpha {a}: {col:?}");
    }
}

#[test]
fn tversky_rejects_nonpositive_weights() {
    let (lg, t) = random_pair(2, [1, 2, 2]);
    let mut g = Graph::new();
    let x = g.constant(lg);
    assert!(tversky_loss(&mut g, x, &t, 0.0, 0.5, EPS).is_err());
    assert!(tversky_loss(&mut g, x, &t, 0.5, -1.0, EPS).is_err());
    assert!(LossSpec::tversky(0.0, 1.0).validate().is_err());
}

// ---------------------------------------------------------------- dice

#[test]
fn dice_spot_value_and_perfect() {
    let shape = [1, 2, 2];
    let lg = Tensor::zeros(&[1, 2, 2, 2]).unwrap();
    let t = to_target(&[true, true, false, false], shape);
    // tp = 1, fp = 1, fn = 1  ->  1 − 2/(2 + 1 + 1)
    let l = eval(&lg, |g, x| dice_loss(g, x, &t, EPS));
    assert!((l - 0.5).abs() < 1e-6, "{l}");
    let perfect = hard_logits(&[true, true, false, false], shape);
    assert!(eval(&perfect, |g, x| dice_loss(g, x, &t, EPS)).abs() < 1e-12);
}

// ------------------------------------------------------ cross entropy

#[test]
fn cross_entropy_values() {
    let (_, t) = random_pair(3, [2, 3, 3]);
    let uniform = Tensor::zeros(&[2, 2, 3, 3]).unwrap();
    let l = eval(&uniform, |g, x| cross_entropy(g, x, &t));
    assert!((l - std::f64::consts::LN_2).abs() < 1e-12);

    let t1 = to_target(&[true], [1, 1, 1]);
    let confident = Tensor::from_f64(&[1, 2, 1, 1], &[0.0, 10.0]).unwrap();
    let l = eval(&confident, |g, x| cross_entropy(g, x, &t1));
    // softplus(−10)
    assert!((l - (1.0 + (-10f64).exp()).ln()).abs() < 1e-15);
    assert!((l - 4.54e-5).abs() < 1e-7);

    let (lg, t) = random_pair(4, [2, 3, 3]);
    let shifted = lg.map(|v| v + 123.0);
    let (a, b) = (eval(&lg, |g, x| cross_entropy(g, x, &t)), eval(&shifted, |g, x| cross_entropy(g, x, &t)));
    assert!((a - b).abs() < 1e-12);
}

// --------------------------------------------------------------- focal

#[test]
fn focal_with_zero_gamma_is_cross_entropy() {
    for seed in 0..20 {
        let (lg, t) = random_pair(100 + seed, [2, 4, 4]);
        let a = eval(&lg, |g, x| focal_loss(g, x, &t, 0.0));
        let b = eval(&lg, |g, x| cross_entropy(g, x, &t));
        assert!((a - b).abs() <= 1e-7);
    }
}

#[test]
fn focal_spot_value_and_monotonicity() {
    let t1 = to_target(&[true], [1, 1, 1]);
    let at = |pt: f64| {
        let lg = Tensor::from_f64(&[1, 2, 1, 1], &[0.0, (pt / (1.0 - pt)).ln()]).unwrap();
        eval(&lg, |g, x| focal_loss(g, x, &t1, 2.0))
    };
    assert!((at(0.9) - 0.01 * -(0.9f64).ln()).abs() < 1e-12);
    assert!((at(0.9) - 0.0010536).abs() < 1e-7);
    let curve: Vec<f64> = [0.1, 0.3, 0.5, 0.7, 0.9, 0.99].iter().map(|&p| at(p)).collect();
    assert!(curve.windows(2).all(|w| w[1] < w[0]), "{curve:?}");
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 1, 1]).unwrap());
    assert!(focal_loss(&mut g, x, &t1, -0.5).is_err());
}

// -------------------------------------------------------------- lovasz

fn brute_jaccard_loss(pred: &[bool], gt: &[bool]) -> f64 {
    let inter = pred.iter().zip(gt).filter(|(p, g)| **p && **g).count();
    let union = pred.iter().zip(gt).filter(|(p, g)| **p || **g).count();
    if union == 0 {
        0.0
    } else {
        1.0 - inter as f64 / union as f64
    }
}

fn exhaustive_vertex_check(n: usize) {
    let shape = [1, 1, n];
    for gbits in 0..1usize << n {
        let gt = bits(gbits, n);
        let target = to_target(&gt, shape);
        for pbits in 0..1usize << n {
            let pred = bits(pbits, n);
            let probs = Tensor::new(&shape, pred.iter().map(|&b| b as u8 as f64).collect()).unwrap();
            let mut g = Graph::new();
            let p = g.constant(probs);
            let l = lovasz_from_probs(&mut g, p, &target).unwrap();
            let got = g.value(l).item().unwrap();
            let want = brute_jaccard_loss(&pred, &gt);
            assert!((got - want).abs() < 1e-12, "gt {gt:?} pred {pred:?}: {got} vs {want}");
        }
    }
}

#[test]
fn lovasz_equals_jaccard_loss_on_every_vertex() {
    exhaustive_vertex_check(6);
    exhaustive_vertex_check(8);
}

#[test]
fn lovasz_logit_route_cases() {
    let shape = [1, 2, 3];
    let gt = [true, false, true, true, false, false];
    let t = to_target(&gt, shape);
    assert!(eval(&hard_logits(&gt, shape), |g, x| lovasz_softmax(g, x, &t)).abs() < 1e-12);
    let pred = [true, true, false, true, false, true];
    let l = eval(&hard_logits(&pred, shape), |g, x| lovasz_softmax(g, x, &t));
    assert!((l - brute_jaccard_loss(&pred, &gt)).abs() < 1e-12);

    let all = to_target(&[true; 6], shape);
    let half = Tensor::zeros(&[1, 2, 2, 3]).unwrap();
    assert!((eval(&half, |g, x| lovasz_softmax(g, x, &all)) - 0.5).abs() < 1e-12);
}

// ------------------------------------------------ shared properties

fn all_specs() -> Vec<LossSpec> {
    let mut v: Vec<LossSpec> = [LossKind::Ce, LossKind::Dice, LossKind::Focal, LossKind::Lovasz]
        .into_iter()
        .map(LossSpec::of)
        .collect();
    v.push(LossSpec::tversky(0.7, 0.3));
    v
}

#[test]
fn every_loss_gradient_matches_finite_differences() {
    for spec in all_specs() {
        for seed in 0..3 {
            let (lg, t) = random_pair(200 + seed, [2, 4, 4]);
            let build = |g: &mut Graph<f64>, ids: &[NodeId]| loss(g, ids[0], &t, &spec);
            let a = analytic_gradient(&build, std::slice::from_ref(&lg)).unwrap();
            let coords: Vec<_> = (0..lg.numel()).map(|j| (0, j)).collect();
            let n = numeric_gradient(&build, std::slice::from_ref(&lg), &coords, 1e-6).unwrap();
            for (j, nv) in n.iter().enumerate() {
                let e = relative_error(a[0].data()[j], *nv);
                assert!(e <= 1e-3, "{spec} seed {seed} coord {j}: {e:.2e}");
            }
        }
    }
}

#[test]
fn perfect_hard_prediction_zeroes_every_overlap_loss() {
    let (_, t) = random_pair(9, [2, 3, 3]);
    let pred: Vec<bool> = t.data().iter().map(|&v| v == 1.0).collect();
    let lg = hard_logits(&pred, [2, 3, 3]);
    for spec in all_specs() {
        let l = eval(&lg, |g, x| loss(g, x, &t, &spec));
        assert!(l.abs() < 1e-12, "{spec}: {l}");
    }
}

#[test]
fn malformed_targets_are_rejected() {
    let (lg, _) = random_pair(10, [1, 2, 2]);
    let mut g = Graph::new();
    let x = g.constant(lg);
    let bad = Tensor::from_f64(&[1, 2, 2], &[0.0, 0.5, 1.0, 0.0]).unwrap();
    assert!(cross_entropy(&mut g, x, &bad).is_err());
    let wrong = Tensor::<f64>::zeros(&[1, 3, 2]).unwrap();
    assert!(dice_loss(&mut g, x, &wrong, EPS).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn losses_are_nonnegative(seed in 0u64..10_000) {
        let (lg, t) = random_pair(seed, [2, 3, 3]);
        for spec in all_specs() {
            let l = eval(&lg, |g, x| loss(g, x, &t, &spec));
            prop_assert!(l >= -1e-12, "{} gave {}", spec, l);
        }
    }

    #[test]
    fn soft_confusion_marginals(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
        let g: Vec<f64> = (0..20).map(|_| rng.random_range(0..2) as f64).collect();
        let c = SoftConfusion::from_probs(&p, &g);
        prop_assert!((c.tp + c.fn_ - g.iter().sum::<f64>()).abs() < 1e-12);
        prop_assert!((c.tp + c.fp - p.iter().sum::<f64>()).abs() < 1e-12);
        prop_assert!(c.tp >= 0.0 && c.fp >= 0.0 && c.fn_ >= 0.0);
    }
}
