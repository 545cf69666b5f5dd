//! Operator values against independent oracles, plus reverse-pass properties.

use mitunet_core::tensor::gradcheck::{self, analytic_gradient, numeric_gradient, relative_error};
use mitunet_core::tensor::{Graph, NodeId, Precision, Tensor};
use mitunet_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng).unwrap()
}

/// Direct nested-loop convolution (groups = 1).
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let [n, c, h, wd] = x.shape().try_into().unwrap();
    let [o, _, kh, kw] = w.shape().try_into().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[oi];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as i64 - pad as i64;
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                    continue;
                                }
                                acc += w.data()[((oi * c + ci) * kh + ky) * kw + kx]
                                    * x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_identity_kernel() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(rand_tensor(&[1, 1, 3, 3], 1));
    let w = g.constant(Tensor::from_f64(&[1, 1, 1, 1], &[1.0]).unwrap());
    let y = g.conv2d(x, w, None, (1, 1), (0, 0), 1).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn conv_channel_sum() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::ones(&[1, 2, 2, 2]).unwrap());
    let w = g.constant(Tensor::from_f64(&[1, 2, 1, 1], &[1.0, 1.0]).unwrap());
    let y = g.conv2d(x, w, None, (1, 1), (0, 0), 1).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
    assert!(g.value(y).data().iter().all(|&v| v == 2.0));
}

#[test]
fn strided_conv_matches_direct_loops() {
    let xt = rand_tensor(&[1, 3, 8, 8], 11);
    let wt = rand_tensor(&[4, 3, 3, 3], 12);
    let bt = rand_tensor(&[4], 13);
    let mut g = Graph::<f64>::new();
    let (x, w, b) = (g.constant(xt.clone()), g.constant(wt.clone()), g.constant(bt.clone()));
    let y = g.conv2d(x, w, Some(b), (2, 2), (1, 1), 1).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 4, 4, 4]);
    let expect = conv_oracle(&xt, &wt, bt.data(), 2, 1);
    for (a, e) in g.value(y).data().iter().zip(&expect) {
        assert!((a - e).abs() < 1e-12, "{a} vs {e}");
    }
}

#[test]
fn depthwise_conv_matches_per_channel_oracle() {
    let xt = rand_tensor(&[2, 3, 5, 5], 21);
    let wt = rand_tensor(&[3, 1, 3, 3], 22);
    let mut g = Graph::<f64>::new();
    let (x, w) = (g.constant(xt.clone()), g.constant(wt.clone()));
    let y = g.conv2d(x, w, None, (1, 1), (1, 1), 3).unwrap();
    for ci in 0..3 {
        let xc = Tensor::<f64>::new(
            &[2, 1, 5, 5],
            (0..2).flat_map(|n| xt.data()[(n * 3 + ci) * 25..][..25].to_vec()).collect(),
        )
        .unwrap();
        let wc = Tensor::<f64>::new(&[1, 1, 3, 3], wt.data()[ci * 9..][..9].to_vec()).unwrap();
        let expect = conv_oracle(&xc, &wc, &[0.0], 1, 1);
        for n in 0..2 {
            for p in 0..25 {
                let got = g.value(y).data()[(n * 3 + ci) * 25 + p];
                assert!((got - expect[n * 25 + p]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn conv_shape_errors_name_the_dimension() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]).unwrap());
    let w = g.constant(Tensor::zeros(&[2, 2, 3, 3]).unwrap());
    let err = g.conv2d(x, w, None, (1, 1), (1, 1), 1).unwrap_err();
    assert!(matches!(err, Error::Shape(ref m) if m.contains("dim 1 of weight")), "{err}");
    let err = g.conv2d(x, w, None, (1, 1), (1, 1), 2).unwrap_err();
    assert!(err.to_string().contains("groups"), "{err}");
}

fn attention_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Vec<f64> {
    let [n, h, l, d] = q.shape().try_into().unwrap();
    let m = k.shape()[2];
    let mut out = vec![0.0; n * h * l * d];
    for b in 0..n * h {
        for i in 0..l {
            let scores: Vec<f64> = (0..m)
                .map(|j| {
                    (0..d).map(|t| q.data()[(b * l + i) * d + t] * k.data()[(b * m + j) * d + t]).sum::<f64>()
                        / (d as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            for t in 0..d {
                out[(b * l + i) * d + t] = (0..m)
                    .map(|j| (scores[j] - mx).exp() / z * v.data()[(b * m + j) * d + t])
                    .sum();
            }
        }
    }
    out
}

#[test]
fn attention_single_key_returns_value() {
    let mut g = Graph::<f64>::new();
    let q = g.constant(rand_tensor(&[1, 2, 3, 4], 1));
    let k = g.constant(rand_tensor(&[1, 2, 1, 4], 2));
    let vt = rand_tensor(&[1, 2, 1, 4], 3);
    let v = g.constant(vt.clone());
    let y = g.attention(q, k, v).unwrap();
    for h in 0..2 {
        for i in 0..3 {
            for t in 0..4 {
                let got = g.value(y).data()[(h * 3 + i) * 4 + t];
                assert!((got - vt.data()[h * 4 + t]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn attention_zero_query_averages_values() {
    let mut g = Graph::<f64>::new();
    let q = g.constant(Tensor::zeros(&[1, 1, 2, 3]).unwrap());
    let k = g.constant(rand_tensor(&[1, 1, 5, 3], 4));
    let vt = rand_tensor(&[1, 1, 5, 3], 5);
    let v = g.constant(vt.clone());
    let y = g.attention(q, k, v).unwrap();
    for i in 0..2 {
        for t in 0..3 {
            let mean: f64 = (0..5).map(|j| vt.data()[j * 3 + t]).sum::<f64>() / 5.0;
            assert!((g.value(y).data()[i * 3 + t] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_matches_loop_oracle_and_rows_sum_to_one() {
    let (qt, kt, vt) = (rand_tensor(&[1, 2, 4, 8], 6), rand_tensor(&[1, 2, 4, 8], 7), rand_tensor(&[1, 2, 4, 8], 8));
    let mut g = Graph::<f64>::new();
    let (q, k, v) = (g.constant(qt.clone()), g.constant(kt.clone()), g.constant(vt.clone()));
    let y = g.attention(q, k, v).unwrap();
    for (a, e) in g.value(y).data().iter().zip(attention_oracle(&qt, &kt, &vt)) {
        assert!((a - e).abs() <= 1e-6 * e.abs().max(1e-12), "{a} vs {e}");
    }
    for row in g.attention_probs(y).unwrap().chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn attention_rejects_non_finite() {
    let mut g = Graph::<f64>::new();
    let mut bad = rand_tensor(&[1, 1, 2, 2], 1);
    bad.data_mut()[0] = f64::NAN;
    let q = g.constant(bad);
    let k = g.constant(rand_tensor(&[1, 1, 2, 2], 2));
    let v = g.constant(rand_tensor(&[1, 1, 2, 2], 3));
    assert!(matches!(g.attention(q, k, v), Err(Error::NonFinite(_))));
}

#[test]
fn layer_norm_cases() {
    let mut g = Graph::<f64>::new();
    let gain = g.constant(Tensor::ones(&[2]).unwrap());
    let off = g.constant(Tensor::zeros(&[2]).unwrap());
    let c = g.constant(Tensor::full(&[3, 2], 4.2).unwrap());
    let y = g.layer_norm(c, 2, gain, off, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v.abs() < 1e-12));

    let two = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 3.0]).unwrap());
    let y = g.layer_norm(two, 2, gain, off, 1e-12).unwrap();
    let d = g.value(y).data();
    assert!((d[0] + 1.0).abs() < 1e-9 && (d[1] - 1.0).abs() < 1e-9);

    assert!(matches!(g.layer_norm(two, 2, gain, off, 0.0), Err(Error::InvalidArgument(_))));
}

#[test]
fn layer_norm_matches_formula() {
    let xt = rand_tensor(&[2, 5], 31);
    let gt = rand_tensor(&[5], 32);
    let bt = rand_tensor(&[5], 33);
    let eps = 1e-5;
    let mut g = Graph::<f64>::new();
    let (x, gn, b) = (g.constant(xt.clone()), g.constant(gt.clone()), g.constant(bt.clone()));
    let y = g.layer_norm(x, 5, gn, b, eps).unwrap();
    for r in 0..2 {
        let row = &xt.data()[r * 5..][..5];
        let mu = row.iter().sum::<f64>() / 5.0;
        let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 5.0;
        for i in 0..5 {
            let e = (row[i] - mu) / (var + eps).sqrt() * gt.data()[i] + bt.data()[i];
            assert!((g.value(y).data()[r * 5 + i] - e).abs() < 1e-12);
        }
    }
}

#[test]
fn upsample_cases() {
    let mut g = Graph::<f64>::new();
    let c = g.constant(Tensor::full(&[1, 2, 3, 3], -0.7).unwrap());
    let y = g.bilinear_upsample(c, 2).unwrap();
    assert!(g.value(y).data().iter().all(|&v| (v + 0.7).abs() < 1e-15));

    let r = g.constant(Tensor::from_f64(&[1, 1, 1, 2], &[0.0, 1.0]).unwrap());
    let y = g.bilinear_upsample(r, 2).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 2, 4]);
    for row in g.value(y).data().chunks(4) {
        assert_eq!(row, &[0.0, 0.25, 0.75, 1.0]);
    }

    // a 1/32 map doubled lines up with the 1/16 map of the same input
    let f4 = g.constant(Tensor::zeros(&[1, 4, 2, 2]).unwrap());
    let up = g.bilinear_upsample(f4, 2).unwrap();
    assert_eq!(&g.shape(up)[2..], &[4, 4]);

    assert!(g.bilinear_upsample(r, 1).is_err());
}

#[test]
fn pointwise_values() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::zeros(&[1]).unwrap());
    let s = g.sigmoid(z);
    assert_eq!(g.value(s).data(), &[0.5]);
    let c = g.constant(Tensor::full(&[2, 3, 4, 5], 1.25).unwrap());
    let p = g.global_avg_pool(c).unwrap();
    assert_eq!(g.value(p).shape(), &[2, 3]);
    assert!(g.value(p).data().iter().all(|&v| (v - 1.25).abs() < 1e-15));
}

#[test]
fn gelu_gradient_matches_finite_differences() {
    for seed in 0..3 {
        let x = rand_tensor(&[16], 40 + seed).map(|v| 3.0 * v);
        let build = |g: &mut Graph<f64>, ids: &[NodeId]| {
            let y = g.gelu(ids[0]);
            Ok(g.sum(y))
        };
        let a = analytic_gradient(&build, std::slice::from_ref(&x)).unwrap();
        let coords: Vec<_> = (0..16).map(|j| (0, j)).collect();
        let n = numeric_gradient(&build, &[x], &coords, 1e-4).unwrap();
        for j in 0..16 {
            assert!(relative_error(a[0].data()[j], n[j]) <= 1e-4);
        }
    }
}

#[test]
fn backward_simple_roots() {
    let xt = rand_tensor(&[3, 2], 50);
    let mut g = Graph::<f64>::new();
    let x = g.param(xt.clone());
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::<f64>::new();
    let x = g.param(xt.clone());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    for (gv, xv) in g.grad(x).unwrap().data().iter().zip(xt.data()) {
        assert!((gv - 2.0 * xv).abs() < 1e-15);
    }

    assert!(matches!(g.backward(sq), Err(Error::Shape(_))));
}

#[test]
fn conv_relu_sum_matches_finite_differences() {
    let inputs = vec![rand_tensor(&[1, 2, 5, 5], 60), rand_tensor(&[3, 2, 3, 3], 61), rand_tensor(&[3], 62)];
    let build = |g: &mut Graph<f64>, ids: &[NodeId]| {
        let y = g.conv2d(ids[0], ids[1], Some(ids[2]), (1, 1), (1, 1), 1)?;
        let r = g.relu(y);
        Ok(g.sum(r))
    };
    let a = analytic_gradient(&build, &inputs).unwrap();
    let mut coords = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        coords.extend((0..t.numel()).map(|j| (i, j)));
    }
    let n = numeric_gradient(&build, &inputs, &coords, 1e-6).unwrap();
    for (&(i, j), nv) in coords.iter().zip(&n) {
        let err = relative_error(a[i].data()[j], *nv);
        assert!(err <= 1e-4, "input {i} coord {j}: {err}");
    }
}

#[test]
fn fan_out_accumulates_branch_gradients() {
    let xt = rand_tensor(&[4], 70);
    // branch 1: sum(exp(x)); branch 2: sum(3x)
    let single = |branch: u8| {
        let mut g = Graph::<f64>::new();
        let x = g.param(xt.clone());
        let y = if branch == 1 { g.exp(x) } else { g.mul_scalar(x, 3.0) };
        let s = g.sum(y);
        g.backward(s).unwrap();
        g.grad(x).unwrap().clone()
    };
    let mut g = Graph::<f64>::new();
    let x = g.param(xt.clone());
    let a = g.exp(x);
    let b = g.mul_scalar(x, 3.0);
    let sa = g.sum(a);
    let sb = g.sum(b);
    let s = g.add(sa, sb).unwrap();
    g.backward(s).unwrap();
    let (g1, g2) = (single(1), single(2));
    for i in 0..4 {
        assert!((g.grad(x).unwrap().data()[i] - g1.data()[i] - g2.data()[i]).abs() < 1e-14);
    }
}

#[test]
fn repeated_backward_is_deterministic() {
    let run = || {
        let inputs = vec![rand_tensor(&[1, 2, 4, 4], 80), rand_tensor(&[2, 2, 3, 3], 81)];
        let build = |g: &mut Graph<f32>, ids: &[NodeId]| {
            let y = g.conv2d(ids[0], ids[1], None, (2, 2), (1, 1), 1)?;
            let y = g.gelu(y);
            Ok(g.mean(y))
        };
        let cast: Vec<Tensor<f32>> = inputs.iter().map(|t| t.cast()).collect();
        analytic_gradient(&build, &cast).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn graph_records_are_topological() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::ones(&[2, 3]).unwrap());
    let w = g.param(Tensor::ones(&[4, 3]).unwrap());
    let y = g.linear(x, w, None).unwrap();
    let z = g.relu(y);
    let _ = g.sum(z);
    let recs = g.records();
    assert_eq!(recs.iter().map(|r| r.name).collect::<Vec<_>>(), vec!["linear", "relu", "sum"]);
    for r in &recs {
        assert!(r.inputs.iter().all(|i| i < &r.output));
    }
}

#[test]
fn softmax_of_empty_axis_cannot_be_built() {
    // zero extents are refused at construction time
    assert!(Tensor::<f64>::zeros(&[3, 0]).is_err());
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[3]).unwrap());
    assert!(g.softmax(x, 1).is_err());
}

#[test]
fn every_registered_op_passes_in_both_precisions() {
    for (precision, tol) in [(Precision::F32, 1e-3), (Precision::F64, 1e-5)] {
        let reports = gradcheck::sweep(precision, tol, &[1, 2, 3]).unwrap();
        for r in &reports {
            assert!(r.pass, "{} {} seed {}: {:.3e}", r.op, r.precision, r.seed, r.max_rel_err);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attention_rows_are_distributions(seed in 0u64..1000, l in 1usize..6, m in 1usize..6) {
        let mut g = Graph::<f32>::new();
        let q = g.constant(rand_tensor(&[2, l, 4], seed).map(|v| 4.0 * v).cast());
        let k = g.constant(rand_tensor(&[2, m, 4], seed + 1).map(|v| 4.0 * v).cast());
        let v = g.constant(rand_tensor(&[2, m, 4], seed + 2).cast());
        let y = g.attention(q, k, v).unwrap();
        for row in g.attention_probs(y).unwrap().chunks(m) {
            prop_assert!((row.iter().map(|&p| p as f64).sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn permute_then_inverse_is_identity(seed in 0u64..1000) {
        let t = rand_tensor(&[2, 3, 4, 5], seed);
        let mut g = Graph::<f64>::new();
        let x = g.constant(t.clone());
        let p = g.permute(x, &[3, 1, 0, 2]).unwrap();
        let back = g.permute(p, &[2, 1, 3, 0]).unwrap();
        prop_assert_eq!(g.value(back), &t);
    }
}
