//! Finite-difference and direct-formula checks of the autodiff graph.

use std::sync::Arc;

use ayce_core::graph::{ConvGeom, Graph, Var};
use ayce_core::seed::stream;
use ayce_core::{Metric, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Compares analytic gradients of `sum(out ⊙ R)` with central differences
/// for every entry of every input.
fn check_grads(inputs: &[Tensor<f64>], build: impl Fn(&Graph<f64>, &[Var]) -> Var) {
    let mut rng = stream(77, &[inputs.len() as u64]);
    let weights = {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&g, &vars);
        let shape = g.shape(out);
        random(&mut rng, &shape, -1.0, 1.0)
    };
    let eval = |inputs: &[Tensor<f64>]| -> (f64, Vec<Vec<f64>>) {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf_shared(Arc::new(t.clone()))).collect();
        let out = build(&g, &vars);
        let w = g.constant(weights.clone());
        let loss = g.sum_all(g.mul(out, w));
        let value = g.value(loss).item();
        let grads = g.backward(loss);
        let gs = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.get(v).map_or(vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();
        (value, gs)
    };
    let (_, analytic) = eval(inputs);
    let h = 1e-6;
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            let a = analytic[k][i];
            assert!(
                (a - numeric).abs() <= 1e-6 * (a.abs() + numeric.abs()) + 1e-8,
                "input {k} entry {i}: analytic {a}, numeric {numeric}"
            );
        }
    }
}

#[test]
fn elementwise_ops() {
    let mut rng = stream(1, &[]);
    let a = random(&mut rng, &[3, 4], -1.0, 1.0);
    let b = random(&mut rng, &[3, 4], -1.0, 1.0);
    check_grads(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check_grads(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check_grads(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    check_grads(&[a.clone()], |g, v| g.scale(v[0], -2.5));
    check_grads(&[a.clone()], |g, v| g.add_scalar(v[0], 0.3));
    check_grads(&[a.clone()], |g, v| g.tanh(v[0]));
}

#[test]
fn relu_away_from_kink() {
    let mut rng = stream(2, &[]);
    let mut x = random(&mut rng, &[4, 5], 0.1, 1.0);
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        if i % 2 == 0 {
            *v = -*v;
        }
    }
    check_grads(&[x], |g, v| g.relu(v[0]));
}

#[test]
fn linear_algebra() {
    let mut rng = stream(3, &[]);
    let x = random(&mut rng, &[3, 4], -1.0, 1.0);
    let w = random(&mut rng, &[4, 5], -1.0, 1.0);
    let b = random(&mut rng, &[5], -1.0, 1.0);
    check_grads(&[x.clone(), w.clone()], |g, v| g.matmul(v[0], v[1]));
    check_grads(&[x.clone(), w.clone(), b.clone()], |g, v| g.affine(v[0], v[1], v[2]));
    let r = random(&mut rng, &[4], -1.0, 1.0);
    check_grads(&[x, r], |g, v| g.add_row(v[0], v[1]));
}

#[test]
fn matmul_matches_naive_product() {
    let mut rng = stream(4, &[]);
    let x = random(&mut rng, &[5, 7], -1.0, 1.0);
    let w = random(&mut rng, &[7, 3], -1.0, 1.0);
    let g = Graph::new();
    let out = g.matmul(g.constant(x.clone()), g.constant(w.clone()));
    let got = g.value(out);
    for i in 0..5 {
        for j in 0..3 {
            let mut s = 0.0;
            for k in 0..7 {
                s += x.row(i)[k] * w.row(k)[j];
            }
            assert!((got.row(i)[j] - s).abs() < 1e-12);
        }
    }
}

#[test]
fn layer_norm_grads_and_values() {
    let mut rng = stream(5, &[]);
    let x = random(&mut rng, &[3, 6], -2.0, 2.0);
    let gamma = random(&mut rng, &[6], 0.5, 1.5);
    let beta = random(&mut rng, &[6], -0.5, 0.5);
    check_grads(&[x.clone(), gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));

    let g = Graph::new();
    let ones = g.constant(Tensor::filled(&[6], 1.0));
    let zeros = g.constant(Tensor::zeros(&[6]));
    let y = g.value(g.layer_norm(g.constant(x), ones, zeros, 1e-5));
    for r in 0..3 {
        let row = y.row(r);
        let mean: f64 = row.iter().sum::<f64>() / 6.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn attention_grads_with_mask() {
    let mut rng = stream(6, &[]);
    let (batch, lq, lk, d) = (2, 3, 4, 6);
    let q = random(&mut rng, &[batch * lq, d], -1.0, 1.0);
    let k = random(&mut rng, &[batch * lk, d], -1.0, 1.0);
    let v = random(&mut rng, &[batch * lk, d], -1.0, 1.0);
    let mask = vec![true, true, false, true, true, false, false, true];
    check_grads(&[q, k, v], |g, x| g.attention(x[0], x[1], x[2], batch, 2, &mask));
}

#[test]
fn attention_weights_ignore_masked_keys() {
    let mut rng = stream(7, &[]);
    let (batch, lq, lk, d, heads) = (2, 3, 5, 8, 2);
    let q = random(&mut rng, &[batch * lq, d], -1.0, 1.0);
    let k = random(&mut rng, &[batch * lk, d], -1.0, 1.0);
    let v = random(&mut rng, &[batch * lk, d], -1.0, 1.0);
    let mask = vec![true, false, true, false, true, false, true, true, true, false];
    let g = Graph::new();
    let a = g.attention(g.constant(q), g.constant(k), g.constant(v), batch, heads, &mask);
    let probs = g.attention_probs(a).unwrap();
    assert_eq!(probs.len(), batch * heads * lq * lk);
    for (r, row) in probs.chunks(lk).enumerate() {
        let b = r / (heads * lq);
        let mut total = 0.0;
        for (j, &p) in row.iter().enumerate() {
            if mask[b * lk + j] {
                total += p;
            } else {
                assert_eq!(p, 0.0);
            }
        }
        assert!((total - 1.0).abs() < 1e-6);
    }
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, geom: ConvGeom) -> Vec<f64> {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let mut out = Vec::new();
    for n in 0..geom.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..geom.out_c {
                    let mut s = b.data()[co];
                    for ky in 0..geom.kernel {
                        for kx in 0..geom.kernel {
                            let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                            let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                            if iy < 0 || ix < 0 || iy >= geom.in_h as isize || ix >= geom.in_w as isize {
                                continue;
                            }
                            for c in 0..geom.in_c {
                                let xi = ((n * geom.in_h + iy as usize) * geom.in_w + ix as usize) * geom.in_c + c;
                                let wi = ((ky * geom.kernel + kx) * geom.in_c + c) * geom.out_c + co;
                                s += x.data()[xi] * w.data()[wi];
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_direct_loop_and_differentiates() {
    let mut rng = stream(8, &[]);
    let geom = ConvGeom {
        batch: 2,
        in_h: 5,
        in_w: 4,
        in_c: 2,
        out_c: 3,
        kernel: 3,
        stride: 2,
        pad: 1,
    };
    let x = random(&mut rng, &[2, 5, 4, 2], -1.0, 1.0);
    let w = random(&mut rng, &[geom.patch(), 3], -1.0, 1.0);
    let b = random(&mut rng, &[3], -1.0, 1.0);
    let g = Graph::new();
    let out = g.conv2d(g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()), geom);
    assert_eq!(g.shape(out), vec![2, geom.out_h(), geom.out_w(), 3]);
    let want = naive_conv(&x, &w, &b, geom);
    for (a, e) in g.value(out).data().iter().zip(&want) {
        assert!((a - e).abs() < 1e-12);
    }
    check_grads(&[x, w, b], |g, v| g.conv2d(v[0], v[1], v[2], geom));
}

#[test]
fn shape_ops() {
    let mut rng = stream(9, &[]);
    let a = random(&mut rng, &[3, 4], -1.0, 1.0);
    let b = random(&mut rng, &[2, 4], -1.0, 1.0);
    let c = random(&mut rng, &[3, 2], -1.0, 1.0);
    check_grads(&[a.clone()], |g, v| g.gather_rows(v[0], &[2, 0, 2, 1, 2]));
    check_grads(&[a.clone(), b.clone()], |g, v| g.concat_rows(&[v[0], v[1]]));
    check_grads(&[a.clone(), c], |g, v| g.concat_cols(v[0], v[1]));
    check_grads(&[a.clone()], |g, v| g.reshape(v[0], &[2, 6]));
    let keep = vec![true, false, true, true, false, true, true, true, false, true, true, false];
    check_grads(&[a], |g, v| g.dropout_with_mask(v[0], &keep, 0.25));
}

#[test]
fn masked_mean_matches_explicit_sum() {
    let mut rng = stream(10, &[]);
    let x = random(&mut rng, &[6, 3], -1.0, 1.0);
    let mask = vec![true, false, true, true, true, false];
    let g = Graph::new();
    let out = g.value(g.masked_mean(g.constant(x.clone()), 2, &mask));
    assert_eq!(out.shape(), &[2, 3]);
    for grp in 0..2 {
        for c in 0..3 {
            let (mut s, mut n) = (0.0, 0.0);
            for r in 0..3 {
                if mask[grp * 3 + r] {
                    s += x.row(grp * 3 + r)[c];
                    n += 1.0;
                }
            }
            assert!((out.row(grp)[c] - s / n).abs() < 1e-12);
        }
    }
    check_grads(&[x], |g, v| g.masked_mean(v[0], 2, &mask));
}

#[test]
fn distances_and_reductions() {
    let mut rng = stream(11, &[]);
    let a = random(&mut rng, &[3, 5], -1.0, 1.0);
    let b = random(&mut rng, &[2, 5], -1.0, 1.0);
    for metric in [Metric::Euclidean, Metric::CosineMetric] {
        check_grads(&[a.clone(), b.clone()], |g, v| g.pair_dist(v[0], v[1], metric).unwrap());
        let g = Graph::new();
        let d = g.value(g.pair_dist(g.constant(a.clone()), g.constant(b.clone()), metric).unwrap());
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(d.row(i)[j], metric.eval(a.row(i), b.row(j)).unwrap());
            }
        }
    }
    check_grads(&[a.clone()], |g, v| g.mean_all(v[0]));
    check_grads(&[a.clone()], |g, v| g.sum_all(v[0]));
    // Distinct entries keep the minimum away from ties.
    check_grads(&[a], |g, v| g.min_all(v[0]));
}
