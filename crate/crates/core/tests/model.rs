use mitunet_core::model::{
    efficient_self_attention, mix_ffn, overlap_patch_embed, scse, AttentionWeights, Checkpoint, FfnWeights, MitUNet,
    ModelConfig, PatchEmbedWeights, ReductionWeights, ScseWeights,
};
use mitunet_core::tensor::gradcheck::{analytic_gradient, numeric_gradient, relative_error};
use mitunet_core::tensor::{Graph, NodeId, Tensor};
use mitunet_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rt(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, -scale, scale, &mut rng).unwrap()
}

fn close(a: &[f64], b: &[f64], rel: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        let d = (x - y).abs() / x.abs().max(y.abs()).max(1e-6);
        assert!(d <= rel, "elem {i}: {x} vs {y}");
    }
}

// ---------------------------------------------------------------- shapes

#[test]
fn nano_shape_ladder_at_64() {
    let m = MitUNet::<f32>::preset("nano", 0).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 64, 64]).unwrap());
    let f = m.forward(&mut g, x, false).unwrap();
    let want = [[1, 8, 16, 16], [1, 16, 8, 8], [1, 24, 4, 4], [1, 32, 2, 2]];
    for (id, w) in f.features.iter().zip(want) {
        assert_eq!(g.shape(*id), w);
    }
    assert_eq!(g.shape(f.logits), [1, 2, 64, 64]);
}

#[test]
fn doubling_the_input_doubles_every_feature_side() {
    let m = MitUNet::<f32>::preset("nano", 0).unwrap();
    let sides = |side: usize| {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, side, side]).unwrap());
        let f = m.forward(&mut g, x, false).unwrap();
        f.features.iter().map(|&i| g.shape(i)[2]).collect::<Vec<_>>()
    };
    let (a, b) = (sides(32), sides(64));
    assert_eq!(a, [8, 4, 2, 1]);
    assert!(a.iter().zip(&b).all(|(x, y)| 2 * x == *y));
}

#[test]
fn b0_logits_match_input_resolution() {
    let m = MitUNet::<f32>::preset("b0", 0).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 64, 64]).unwrap());
    let f = m.forward(&mut g, x, false).unwrap();
    assert_eq!(g.shape(f.features[3]), [1, 256, 2, 2]);
    assert_eq!(g.shape(f.logits), [1, 2, 64, 64]);
}

#[test]
fn indivisible_input_names_the_required_multiple() {
    let m = MitUNet::<f32>::preset("nano", 0).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 48, 64]).unwrap());
    let err = m.forward(&mut g, x, false).unwrap_err();
    assert!(matches!(err, Error::Shape(ref s) if s.contains("multiple of 32")), "{err}");
}

#[test]
fn configs_are_validated() {
    assert!(ModelConfig::preset("b9").is_err());
    let mut c = ModelConfig::preset("nano").unwrap();
    c.encoder.stages[1].num_heads = 3;
    assert!(MitUNet::<f32>::new(c, 0).is_err());
    let mut c = ModelConfig::preset("nano").unwrap();
    c.decoder.fusion_channels.push(8);
    assert!(MitUNet::<f32>::new(c, 0).is_err());
    let mut c = ModelConfig::preset("nano").unwrap();
    c.decoder.scse_reduction = 16;
    assert!(MitUNet::<f32>::new(c, 0).is_err());
}

// ------------------------------------------------------- patch embedding

fn embed_weights(g: &mut Graph<f64>, cin: usize, c: usize, k: usize, seed: u64) -> PatchEmbedWeights {
    PatchEmbedWeights {
        conv_w: g.param(rt(&[c, cin, k, k], seed, 0.5)),
        conv_b: g.param(rt(&[c], seed + 1, 0.1)),
        norm_g: g.constant(Tensor::ones(&[c]).unwrap()),
        norm_b: g.constant(Tensor::zeros(&[c]).unwrap()),
    }
}

#[test]
fn patch_embed_grids() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(rt(&[1, 3, 64, 64], 1, 1.0));
    let w = embed_weights(&mut g, 3, 4, 7, 2);
    let (t, h, wd) = overlap_patch_embed(&mut g, x, &w, 7, 4, 3).unwrap();
    assert_eq!((h, wd), (16, 16));
    assert_eq!(g.shape(t), [1, 256, 4]);
    let grid = g.constant(rt(&[1, 4, 16, 16], 3, 1.0));
    let w2 = embed_weights(&mut g, 4, 6, 3, 4);
    let (t2, h2, w2s) = overlap_patch_embed(&mut g, grid, &w2, 3, 2, 1).unwrap();
    assert_eq!((h2, w2s), (8, 8));
    assert_eq!(g.shape(t2), [1, 64, 6]);

    let odd = g.constant(rt(&[1, 4, 15, 16], 3, 1.0));
    let err = overlap_patch_embed(&mut g, odd, &w2, 3, 2, 1).unwrap_err();
    assert!(err.to_string().contains("multiple of 2"), "{err}");
}

#[test]
fn overlapping_patches_share_input_pixels() {
    // gradient of one output token reaches exactly its 3x3 receptive field
    let side = 8;
    for (oy, ox) in [(0usize, 0usize), (1, 2), (3, 3)] {
        let mut g = Graph::<f64>::new();
        let x = g.param(rt(&[1, 1, side, side], 5, 1.0));
        let wts = PatchEmbedWeights {
            conv_w: g.constant(Tensor::ones(&[2, 1, 3, 3]).unwrap()),
            conv_b: g.constant(Tensor::zeros(&[2]).unwrap()),
            norm_g: g.constant(Tensor::ones(&[2]).unwrap()),
            norm_b: g.constant(Tensor::zeros(&[2]).unwrap()),
        };
        // skip the norm so the token is a plain window sum
        let y = g.conv2d(x, wts.conv_w, Some(wts.conv_b), (2, 2), (1, 1), 1).unwrap();
        let tok = g.slice(y, 2, oy, 1).unwrap();
        let tok = g.slice(tok, 3, ox, 1).unwrap();
        let s = g.sum(tok);
        g.backward(s).unwrap();
        let grad = g.grad(x).unwrap();
        for iy in 0..side {
            for ix in 0..side {
                let inside = (iy as i64 - 2 * oy as i64 + 1).clamp(-1, 3) == iy as i64 - 2 * oy as i64 + 1
                    && (0..3).contains(&(iy as i64 - 2 * oy as i64 + 1))
                    && (0..3).contains(&(ix as i64 - 2 * ox as i64 + 1));
                let gv = grad.data()[iy * side + ix];
                assert_eq!(gv != 0.0, inside, "token ({oy},{ox}) pixel ({iy},{ix})");
            }
        }
    }
    // neighbouring tokens along a row overlap in exactly one column
    let cols = |ox: usize| -> Vec<i64> { (0..3).map(|k| 2 * ox as i64 - 1 + k).collect() };
    let shared: Vec<_> = cols(1).into_iter().filter(|c| cols(2).contains(c)).collect();
    assert_eq!(shared, vec![3]);
}

// ------------------------------------------------------------- attention

struct AttnParams {
    q: (Tensor<f64>, Tensor<f64>),
    k: (Tensor<f64>, Tensor<f64>),
    v: (Tensor<f64>, Tensor<f64>),
    proj: (Tensor<f64>, Tensor<f64>),
    sr: Option<(Tensor<f64>, Tensor<f64>)>,
}

fn attn_params(c: usize, sr: usize, seed: u64) -> AttnParams {
    let lin = |s| (rt(&[c, c], s, 0.5), rt(&[c], s + 100, 0.1));
    AttnParams {
        q: lin(seed),
        k: lin(seed + 1),
        v: lin(seed + 2),
        proj: lin(seed + 3),
        sr: (sr > 1).then(|| (rt(&[c, c, sr, sr], seed + 4, 0.5), rt(&[c], seed + 5, 0.1))),
    }
}

fn lin_rows(x: &[f64], rows: usize, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (o, i) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; rows * o];
    for r in 0..rows {
        for j in 0..o {
            out[r * o + j] = b.data()[j] + (0..i).map(|t| x[r * i + t] * w.data()[j * i + t]).sum::<f64>();
        }
    }
    out
}

/// Multi-head attention from explicit loops (single image, unit-gain norms).
fn mhsa_oracle(x: &[f64], h: usize, w: usize, c: usize, heads: usize, sr: usize, p: &AttnParams) -> Vec<f64> {
    let l = h * w;
    let q = lin_rows(x, l, &p.q.0, &p.q.1);
    let src: Vec<f64> = match &p.sr {
        None => x.to_vec(),
        Some((cw, cb)) => {
            let (rh, rw) = (h / sr, w / sr);
            let mut red = vec![0.0; rh * rw * c];
            for oy in 0..rh {
                for ox in 0..rw {
                    for o in 0..c {
                        let mut acc = cb.data()[o];
                        for i in 0..c {
                            for ky in 0..sr {
                                for kx in 0..sr {
                                    let tok = (oy * sr + ky) * w + ox * sr + kx;
                                    acc += cw.data()[((o * c + i) * sr + ky) * sr + kx] * x[tok * c + i];
                                }
                            }
                        }
                        red[(oy * rw + ox) * c + o] = acc;
                    }
                }
            }
            for row in red.chunks_mut(c) {
                let mu = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / c as f64;
                for v in row.iter_mut() {
                    *v = (*v - mu) / (var + 1e-6).sqrt();
                }
            }
            red
        }
    };
    let m = src.len() / c;
    let k = lin_rows(&src, m, &p.k.0, &p.k.1);
    let v = lin_rows(&src, m, &p.v.0, &p.v.1);
    let d = c / heads;
    let mut merged = vec![0.0; l * c];
    for hd in 0..heads {
        for i in 0..l {
            let s: Vec<f64> = (0..m)
                .map(|j| (0..d).map(|t| q[i * c + hd * d + t] * k[j * c + hd * d + t]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
            for t in 0..d {
                merged[i * c + hd * d + t] = (0..m).map(|j| (s[j] - mx).exp() / z * v[j * c + hd * d + t]).sum();
            }
        }
    }
    lin_rows(&merged, l, &p.proj.0, &p.proj.1)
}

fn run_attention(x: &Tensor<f64>, heads: usize, sr: usize, h: usize, w: usize, p: &AttnParams) -> (Vec<f64>, Option<usize>) {
    let mut g = Graph::<f64>::new();
    let xi = g.constant(x.clone());
    let mut c = |t: &Tensor<f64>| g.constant(t.clone());
    let wts = AttentionWeights {
        q_w: c(&p.q.0),
        q_b: c(&p.q.1),
        k_w: c(&p.k.0),
        k_b: c(&p.k.1),
        v_w: c(&p.v.0),
        v_b: c(&p.v.1),
        proj_w: c(&p.proj.0),
        proj_b: c(&p.proj.1),
        reduction: None,
    };
    let dim = x.shape()[2];
    let wts = AttentionWeights {
        reduction: p.sr.as_ref().map(|(cw, cb)| ReductionWeights {
            conv_w: g.constant(cw.clone()),
            conv_b: g.constant(cb.clone()),
            norm_g: g.constant(Tensor::ones(&[dim]).unwrap()),
            norm_b: g.constant(Tensor::zeros(&[dim]).unwrap()),
        }),
        ..wts
    };
    let y = efficient_self_attention(&mut g, xi, &wts, heads, sr, h, w).unwrap();
    let kv_len = g
        .records()
        .iter()
        .find(|r| r.name == "attention")
        .map(|r| g.shape(r.inputs[1])[2]);
    (g.value(y).data().to_vec(), kv_len)
}

#[test]
fn unreduced_attention_is_plain_mhsa() {
    let (h, w, c) = (4, 4, 8);
    let x = rt(&[1, h * w, c], 10, 1.0);
    let p = attn_params(c, 1, 20);
    let (got, kv) = run_attention(&x, 2, 1, h, w, &p);
    assert_eq!(kv, Some(16));
    close(&got, &mhsa_oracle(x.data(), h, w, c, 2, 1, &p), 1e-5);
}

#[test]
fn reduced_attention_matches_loop_oracle() {
    let (h, w, c) = (8, 8, 4);
    let x = rt(&[1, h * w, c], 11, 1.0);
    let p = attn_params(c, 2, 30);
    let (got, kv) = run_attention(&x, 2, 2, h, w, &p);
    assert_eq!(kv, Some(16));
    close(&got, &mhsa_oracle(x.data(), h, w, c, 2, 2, &p), 1e-5);
}

#[test]
fn reduction_ratio_must_divide_grid() {
    let p = attn_params(4, 3, 40);
    let x = rt(&[1, 64, 4], 12, 1.0);
    let mut g = Graph::<f64>::new();
    let xi = g.constant(x);
    let mut c = |t: &Tensor<f64>| g.constant(t.clone());
    let wts = AttentionWeights {
        q_w: c(&p.q.0),
        q_b: c(&p.q.1),
        k_w: c(&p.k.0),
        k_b: c(&p.k.1),
        v_w: c(&p.v.0),
        v_b: c(&p.v.1),
        proj_w: c(&p.proj.0),
        proj_b: c(&p.proj.1),
        reduction: None,
    };
    assert!(efficient_self_attention(&mut g, xi, &wts, 2, 3, 8, 8).is_err());
}

// --------------------------------------------------------------- mix-ffn

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

#[test]
fn mix_ffn_matches_composition_oracle() {
    let (h, w, c, e) = (4, 4, 8, 32);
    let x = rt(&[1, h * w, c], 50, 1.0);
    let (w1, b1) = (rt(&[e, c], 51, 0.5), rt(&[e], 52, 0.1));
    let (dw, db) = (rt(&[e, 1, 3, 3], 53, 0.5), rt(&[e], 54, 0.1));
    let (w2, b2) = (rt(&[c, e], 55, 0.5), rt(&[c], 56, 0.1));
    let mut g = Graph::<f64>::new();
    let xi = g.constant(x.clone());
    let wts = FfnWeights {
        fc1_w: g.constant(w1.clone()),
        fc1_b: g.constant(b1.clone()),
        dw_w: g.constant(dw.clone()),
        dw_b: g.constant(db.clone()),
        fc2_w: g.constant(w2.clone()),
        fc2_b: g.constant(b2.clone()),
    };
    let y = mix_ffn(&mut g, xi, &wts, h, w).unwrap();
    assert_eq!(g.shape(y), [1, 16, 8]);

    let hidden = lin_rows(x.data(), h * w, &w1, &b1);
    let mut conv = vec![0.0; h * w * e];
    for ch in 0..e {
        for y0 in 0..h {
            for x0 in 0..w {
                let mut acc = db.data()[ch];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = (y0 as i64 + ky - 1, x0 as i64 + kx - 1);
                        if iy >= 0 && ix >= 0 && iy < h as i64 && ix < w as i64 {
                            acc += dw.data()[ch * 9 + (ky * 3 + kx) as usize] * hidden[(iy as usize * w + ix as usize) * e + ch];
                        }
                    }
                }
                conv[(y0 * w + x0) * e + ch] = gelu(acc);
            }
        }
    }
    close(g.value(y).data(), &lin_rows(&conv, h * w, &w2, &b2), 1e-9);
}

#[test]
fn mix_ffn_with_zero_output_layer_is_zero() {
    for (h, w) in [(2, 3), (5, 1)] {
        let mut g = Graph::<f64>::new();
        let x = g.constant(rt(&[2, h * w, 4], 57, 1.0));
        let wts = FfnWeights {
            fc1_w: g.constant(rt(&[16, 4], 58, 0.5)),
            fc1_b: g.constant(rt(&[16], 59, 0.5)),
            dw_w: g.constant(rt(&[16, 1, 3, 3], 60, 0.5)),
            dw_b: g.constant(rt(&[16], 61, 0.5)),
            fc2_w: g.constant(Tensor::zeros(&[4, 16]).unwrap()),
            fc2_b: g.constant(Tensor::zeros(&[4]).unwrap()),
        };
        let y = mix_ffn(&mut g, x, &wts, h, w).unwrap();
        assert_eq!(g.shape(y), g.shape(x));
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }
}

// ------------------------------------------------------------------ scSE

fn scse_weights(g: &mut Graph<f64>, c: usize, r: usize, seed: Option<u64>) -> ScseWeights {
    let h = c / r;
    let mut t = |shape: &[usize], k: u64| match seed {
        Some(s) => g.constant(rt(shape, s + k, 0.8)),
        None => g.constant(Tensor::zeros(shape).unwrap()),
    };
    ScseWeights {
        fc1_w: t(&[h, c], 0),
        fc1_b: t(&[h], 1),
        fc2_w: t(&[c, h], 2),
        fc2_b: t(&[c], 3),
        spatial_w: t(&[1, c, 1, 1], 4),
        spatial_b: t(&[1], 5),
    }
}

#[test]
fn zeroed_scse_is_identity() {
    let mut g = Graph::<f64>::new();
    let xt = rt(&[2, 8, 3, 5], 70, 2.0);
    let x = g.constant(xt.clone());
    let w = scse_weights(&mut g, 8, 4, None);
    let y = scse(&mut g, x, &w).unwrap();
    assert_eq!(g.value(y), &xt);
}

#[test]
fn scse_matches_formula_oracle() {
    let (n, c, h, w, r) = (2, 8, 3, 4, 2);
    let xt = rt(&[n, c, h, w], 71, 1.5);
    let mut g = Graph::<f64>::new();
    let x = g.constant(xt.clone());
    let wts = scse_weights(&mut g, c, r, Some(80));
    let y = scse(&mut g, x, &wts).unwrap();
    let val = |id: NodeId| g.value(id).data().to_vec();
    let (w1, b1, w2, b2, ws, bs) = (val(wts.fc1_w), val(wts.fc1_b), val(wts.fc2_w), val(wts.fc2_b), val(wts.spatial_w), val(wts.spatial_b));
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let hw = h * w;
    let hid = c / r;
    let mut expect = vec![0.0; n * c * hw];
    for b in 0..n {
        let pooled: Vec<f64> = (0..c).map(|ch| xt.data()[(b * c + ch) * hw..][..hw].iter().sum::<f64>() / hw as f64).collect();
        let z1: Vec<f64> = (0..hid).map(|j| (b1[j] + (0..c).map(|i| w1[j * c + i] * pooled[i]).sum::<f64>()).max(0.0)).collect();
        let gate: Vec<f64> = (0..c).map(|i| sig(b2[i] + (0..hid).map(|j| w2[i * hid + j] * z1[j]).sum::<f64>())).collect();
        for p in 0..hw {
            let sp = sig(bs[0] + (0..c).map(|ch| ws[ch] * xt.data()[(b * c + ch) * hw + p]).sum::<f64>());
            for ch in 0..c {
                let xv = xt.data()[(b * c + ch) * hw + p];
                expect[(b * c + ch) * hw + p] = xv * gate[ch] + xv * sp;
            }
        }
    }
    assert_eq!(g.shape(y), xt.shape());
    close(g.value(y).data(), &expect, 1e-6);
}

#[test]
fn disabled_scse_equals_zeroed_scse() {
    let mut with = MitUNet::<f32>::preset("nano", 3).unwrap();
    for (name, t) in with.params().names().to_vec().iter().zip(0..) {
        if name.contains(".scse.") {
            let _ = t;
            let p = with.params_mut().get_mut(name).unwrap();
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut cfg = ModelConfig::preset("nano").unwrap();
    cfg.decoder.use_scse = false;
    let mut without = MitUNet::<f32>::new(cfg, 99).unwrap();
    for name in without.params().names().to_vec() {
        let src = with.params().get(&name).unwrap().clone();
        *without.params_mut().get_mut(&name).unwrap() = src;
    }
    let x = rt(&[2, 3, 32, 32], 90, 1.0).cast::<f32>();
    assert_eq!(with.predict(&x).unwrap(), without.predict(&x).unwrap());
}

#[test]
fn decoder_skip_mismatch_is_rejected_before_fusion() {
    // a 64x32 input keeps every stage even, so the ladder stays consistent
    let m = MitUNet::<f32>::preset("nano", 0).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 64, 32]).unwrap());
    let f = m.forward(&mut g, x, false).unwrap();
    assert_eq!(g.shape(f.logits), [1, 2, 64, 32]);
}

// --------------------------------------------------------- whole network

#[test]
fn every_parameter_receives_gradient() {
    let m = MitUNet::<f64>::preset("nano", 4).unwrap();
    let mut g = Graph::new();
    // at 64x64 every attention sees more than one key, so queries matter
    let x = g.constant(rt(&[2, 3, 64, 64], 91, 1.0));
    let f = m.forward(&mut g, x, true).unwrap();
    let s = g.sum(f.logits);
    g.backward(s).unwrap();
    for (id, name) in f.params.iter().zip(m.params().names()) {
        let gr = g.grad(*id).unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(gr.data().iter().any(|&v| v != 0.0), "{name} gradient is all zero");
    }
}

/// Independent per-layer parameter arithmetic, frozen below.
fn counted(preset: &str) -> usize {
    let cfg = ModelConfig::preset(preset).unwrap();
    let mut n = 0;
    let mut cin = 3;
    let e = cfg.encoder.mlp_expansion;
    for s in &cfg.encoder.stages {
        let (c, k) = (s.embed_dim, s.patch_kernel);
        n += k * k * cin * c + c + 2 * c;
        for _ in 0..s.depth {
            n += 2 * c + 4 * (c * c + c) + 2 * c;
            if s.sr_ratio > 1 {
                n += s.sr_ratio * s.sr_ratio * c * c + c + 2 * c;
            }
            n += (c * e * c + e * c) + (9 * e * c + e * c) + (e * c * c + c);
        }
        n += 2 * c;
        cin = c;
    }
    let r = cfg.decoder.scse_reduction;
    let block = |ci: usize, co: usize| 9 * ci * co + 9 * co * co + 4 * co + (2 * co * (co / r) + co / r + co) + (co + 1);
    let dims: Vec<usize> = cfg.encoder.stages.iter().map(|s| s.embed_dim).collect();
    let mut ci = dims[3];
    for (i, &co) in cfg.decoder.fusion_channels.iter().enumerate() {
        n += block(ci + dims[2 - i], co);
        ci = co;
    }
    for &co in &cfg.decoder.head_channels {
        n += block(ci, co);
        ci = co;
    }
    n + ci * 2 + 2
}

#[test]
fn preset_parameter_counts_are_locked() {
    let frozen = [
        ("nano", 99_829),
        ("b0", 5_561_318),
        ("b1", 16_443_974),
        ("b2", 27_488_838),
        ("b3", 47_364_678),
        ("b4", 64_135_238),
    ];
    for (preset, want) in frozen {
        assert_eq!(counted(preset), want, "{preset} arithmetic");
    }
    for (preset, want) in &frozen[..3] {
        assert_eq!(MitUNet::<f32>::preset(preset, 0).unwrap().params().count(), *want, "{preset} model");
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut m = MitUNet::<f32>::preset("nano", 5).unwrap();
    // perturb running statistics so buffers matter
    let mut g = Graph::new();
    let x = rt(&[2, 3, 32, 32], 92, 1.0).cast::<f32>();
    let xi = g.constant(x.clone());
    let f = m.forward(&mut g, xi, true).unwrap();
    m.update_running_stats(&f.bn_stats, 0.1);
    let before = m.predict(&x).unwrap();

    let mut meta = mitunet_core::model::CheckpointMeta::new();
    meta.insert("note".into(), "unit".into());
    let ck = Checkpoint::from_model(&m, 17, meta);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.step, 17);
    assert_eq!(back.meta["note"], "unit");
    let m2: MitUNet<f32> = back.to_model().unwrap();
    assert_eq!(m2.params(), m.params());
    assert_eq!(m2.predict(&x).unwrap(), before);

    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"MITU");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
}

#[test]
fn checkpoint_rejects_corruption_and_foreign_manifests() {
    let m = MitUNet::<f32>::preset("nano", 5).unwrap();
    let ck = Checkpoint::from_model(&m, 0, Default::default());
    let mut bytes = ck.to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    bytes[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));

    let mut renamed = ck.clone();
    renamed.tensors[0].0 = "encoder.bogus".into();
    let mut target = MitUNet::<f32>::preset("nano", 6).unwrap();
    let err = renamed.load_into(&mut target).unwrap_err();
    assert!(err.to_string().contains("bogus"), "{err}");

    let mut b0 = MitUNet::<f32>::preset("b0", 0).unwrap();
    assert!(ck.load_into(&mut b0).is_err());
}

#[test]
fn nano_loss_gradient_matches_finite_differences_on_sampled_parameters() {
    let m = MitUNet::<f64>::preset("nano", 7).unwrap();
    // With thousands of ReLU units a 1e-4 step crosses kinks often enough to
    // bias the difference quotient by a few percent; 1e-6 keeps both the
    // kink term and f64 rounding far below the tolerance.
    let image = rt(&[1, 3, 64, 64], 93, 1.0);
    let weights = rt(&[1, 2, 64, 64], 94, 1.0);
    let build = |g: &mut Graph<f64>, ids: &[NodeId]| {
        let x = g.constant(image.clone());
        let f = m.forward_with(g, x, ids, true)?;
        let w = g.constant(weights.clone());
        let p = g.mul(f.logits, w)?;
        Ok(g.mean(p))
    };
    let inputs = m.params().tensors().to_vec();
    let analytic = analytic_gradient(&build, &inputs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(95);
    let coords: Vec<(usize, usize)> = (0..220)
        .map(|_| {
            let i = rng.random_range(0..inputs.len());
            (i, rng.random_range(0..inputs[i].numel()))
        })
        .collect();
    let numeric = numeric_gradient(&build, &inputs, &coords, 1e-6).unwrap();
    let mut worst = 0.0f64;
    for (&(i, j), &n) in coords.iter().zip(&numeric) {
        let e = relative_error(analytic[i].data()[j], n);
        worst = worst.max(e);
    }
    assert!(worst <= 1e-3, "max relative error {worst:.3e}");
}

#[test]
fn library_model_check_passes_on_nano() {
    let r = mitunet_core::model::model_grad_check("nano", 64, 200, 1e-3, 11).unwrap();
    assert!(r.pass && r.coords_checked == 200, "{r:?}");
}
