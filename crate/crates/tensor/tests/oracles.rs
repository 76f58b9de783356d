//! Forward kernels against naive loop references.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokenfill_tensor::{AttentionOptions, Tensor, TensorError};

fn naive_conv(x: &Tensor, w: &Tensor, b: &[f32], stride: usize, pad: usize) -> Vec<f32> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0f32; n * co * ho * wo];
    for bi in 0..n {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[o] as f64;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((bi * c + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((o * c + ci) * kh + ky) * kw + kx];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((bi * co + o) * ho + oy) * wo + ox] = acc as f32;
                }
            }
        }
    }
    out
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn conv_all_ones_center_is_nine() {
    let x = Tensor::ones(&[1, 1, 3, 3]);
    let w = Tensor::ones(&[1, 1, 3, 3]);
    let y = x.conv2d(&w, Some(&Tensor::zeros(&[1])), 1, 1).unwrap();
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    assert_eq!(y.data()[4], 9.0);
}

#[test]
fn conv_zero_weight_outputs_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn(&[2, 3, 6, 5], 1.0, &mut rng);
    let w = Tensor::zeros(&[4, 3, 3, 3]);
    let b = Tensor::full(&[4], 0.75);
    let y = x.conv2d(&w, Some(&b), 1, 1).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.75));
}

#[test]
fn conv_matches_naive_loops_randomized() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut rng);
    let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
    let b = Tensor::randn(&[3], 1.0, &mut rng);
    let y = x.conv2d(&w, Some(&b), 1, 1).unwrap();
    assert!(max_abs_diff(y.data(), &naive_conv(&x, &w, b.data(), 1, 1)) < 1e-5);

    for trial in 0..120 {
        let n = rng.random_range(1..3);
        let c = rng.random_range(1..4);
        let co = rng.random_range(1..4);
        let k = [1, 3, 5][trial % 3];
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..=k / 2);
        let h = rng.random_range(k..9);
        let wd = rng.random_range(k..9);
        let x = Tensor::randn(&[n, c, h, wd], 1.0, &mut rng);
        let w = Tensor::randn(&[co, c, k, k], 1.0, &mut rng);
        let b = Tensor::randn(&[co], 1.0, &mut rng);
        let y = x.conv2d(&w, Some(&b), stride, pad).unwrap();
        let reference = naive_conv(&x, &w, b.data(), stride, pad);
        assert!(max_abs_diff(y.data(), &reference) < 1e-5, "trial {trial}");
    }
}

#[test]
fn conv_rejects_channel_mismatch_naming_axis() {
    let x = Tensor::zeros(&[1, 2, 4, 4]);
    let w = Tensor::zeros(&[1, 3, 3, 3]);
    match x.conv2d(&w, None, 1, 1) {
        Err(TensorError::AxisMismatch { axis, left, right, .. }) => assert_eq!((axis, left, right), (1, 2, 3)),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn matmul_hand_values_and_identity() {
    let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
    let b = Tensor::new(vec![5.0, 6.0], &[2, 1]).unwrap();
    assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
    let eye = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
    assert_eq!(eye.matmul(&a).unwrap().data(), a.data());
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..110 {
        let (m, k, n) = if trial == 0 {
            (4, 7, 3)
        } else {
            (rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..9))
        };
        let a = Tensor::randn(&[m, k], 1.0, &mut rng);
        let b = Tensor::randn(&[k, n], 1.0, &mut rng);
        let mut reference = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for p in 0..k {
                    acc += a.data()[i * k + p] as f64 * b.data()[p * n + j] as f64;
                }
                reference[i * n + j] = acc as f32;
            }
        }
        assert!(max_abs_diff(a.matmul(&b).unwrap().data(), &reference) < 1e-5);
    }
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[4, 2]);
    assert!(matches!(a.matmul(&b), Err(TensorError::AxisMismatch { .. })));
}

#[test]
fn softmax_reference_values() {
    let z = Tensor::new(vec![2.0, 0.0], &[2]).unwrap();
    let p = z.softmax(1.0).unwrap();
    let e2 = 2f64.exp();
    assert!((p.data()[0] as f64 - e2 / (e2 + 1.0)).abs() < 1e-6);
    assert!((p.data()[1] as f64 - 1.0 / (e2 + 1.0)).abs() < 1e-6);
    assert!((p.data()[0] - 0.8808).abs() < 1e-4);

    // Divide convention: t = 0.1 multiplies the logit gap by 10.
    let sharp = z.softmax(0.1).unwrap();
    let expected = 20f64.exp() / (20f64.exp() + 1.0);
    assert!((sharp.data()[0] as f64 - expected).abs() < 1e-6);
    assert!(sharp.data()[0] > 0.999);

    let flat = Tensor::full(&[3, 5], 2.5).softmax(0.37).unwrap();
    assert!(flat.data().iter().all(|&v| (v - 0.2).abs() < 1e-7));
}

#[test]
fn softmax_rejects_nonpositive_temperature() {
    let z = Tensor::zeros(&[3]);
    assert!(z.softmax(0.0).is_err());
    assert!(z.softmax(-1.0).is_err());
}

#[test]
fn softmax_rows_normalized_and_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let rows = rng.random_range(1..5);
        let k = rng.random_range(1..9);
        let t = rng.random_range(0.05..4.0);
        let z = Tensor::randn(&[rows, k], 3.0, &mut rng);
        let p = z.softmax(t).unwrap();
        for row in p.data().chunks(k) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        let shifted = z.add_scalar(rng.random_range(-20.0..20.0)).softmax(t).unwrap();
        assert!(max_abs_diff(p.data(), shifted.data()) < 1e-6);
    }
}

#[test]
fn layernorm_closed_forms() {
    let c = Tensor::full(&[2, 4], 3.0).layernorm(1e-5).unwrap();
    assert!(c.data().iter().all(|&v| v == 0.0));
    let eps = 1e-5f32;
    let y = Tensor::new(vec![1.0, 3.0], &[2]).unwrap().layernorm(eps).unwrap();
    let s = 1.0 / (1.0f64 + eps as f64).sqrt();
    assert!((y.data()[0] as f64 + s).abs() < 1e-6);
    assert!((y.data()[1] as f64 - s).abs() < 1e-6);
}

fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Vec<f32> {
    let (n, h, l, d) = (q.shape()[0], q.shape()[1], q.shape()[2], q.shape()[3]);
    let lk = k.shape()[2];
    let dv = v.shape()[3];
    let mut out = vec![0.0f32; n * h * l * dv];
    for bh in 0..n * h {
        for i in 0..l {
            let mut scores = vec![0.0f64; lk];
            for (j, s) in scores.iter_mut().enumerate() {
                for p in 0..d {
                    *s += q.data()[(bh * l + i) * d + p] as f64 * k.data()[(bh * lk + j) * d + p] as f64;
                }
                *s /= (d as f64).sqrt();
            }
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for j in 0..lk {
                let w = (scores[j] - m).exp() / z;
                for p in 0..dv {
                    out[(bh * l + i) * dv + p] += (w * v.data()[(bh * lk + j) * dv + p] as f64) as f32;
                }
            }
        }
    }
    out
}

#[test]
fn attention_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let n = rng.random_range(1..3);
        let h = rng.random_range(1..4);
        let l = rng.random_range(1..7);
        let d = rng.random_range(1..6);
        let q = Tensor::randn(&[n, h, l, d], 1.0, &mut rng);
        let k = Tensor::randn(&[n, h, l, d], 1.0, &mut rng);
        let v = Tensor::randn(&[n, h, l, d], 1.0, &mut rng);
        let y = Tensor::attention(&q, &k, &v).unwrap();
        assert!(max_abs_diff(y.data(), &naive_attention(&q, &k, &v)) < 1e-5);
    }
}

#[test]
fn attention_degenerate_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = Tensor::randn(&[1, 2, 1, 4], 1.0, &mut rng);
    let k = Tensor::randn(&[1, 2, 1, 4], 1.0, &mut rng);
    let v = Tensor::randn(&[1, 2, 1, 4], 1.0, &mut rng);
    assert_eq!(Tensor::attention(&q, &k, &v).unwrap().data(), v.data());

    // Zero queries give equal scores, hence the mean of the value rows.
    let q = Tensor::zeros(&[1, 1, 3, 2]);
    let k = Tensor::randn(&[1, 1, 4, 2], 1.0, &mut rng);
    let v = Tensor::randn(&[1, 1, 4, 2], 1.0, &mut rng);
    let y = Tensor::attention(&q, &k, &v).unwrap();
    for i in 0..3 {
        for p in 0..2 {
            let mean: f32 = (0..4).map(|j| v.data()[j * 2 + p]).sum::<f32>() / 4.0;
            assert!((y.data()[i * 2 + p] - mean).abs() < 1e-6);
        }
    }
}

#[test]
fn attention_key_mask_and_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let q = Tensor::randn(&[1, 1, 3, 2], 1.0, &mut rng);
    let k = Tensor::randn(&[1, 1, 3, 2], 1.0, &mut rng);
    let v = Tensor::randn(&[1, 1, 3, 2], 1.0, &mut rng);
    let only_first = AttentionOptions {
        key_mask: Some(vec![true, false, false]),
        ..Default::default()
    };
    let y = Tensor::attention_with(&q, &k, &v, &only_first).unwrap();
    for i in 0..3 {
        assert!(max_abs_diff(&y.data()[i * 2..i * 2 + 2], &v.data()[0..2]) < 1e-6);
    }
    let causal = AttentionOptions { causal: true, ..Default::default() };
    let y = Tensor::attention_with(&q, &k, &v, &causal).unwrap();
    assert!(max_abs_diff(&y.data()[0..2], &v.data()[0..2]) < 1e-6);
}

#[test]
fn attention_rejects_extent_mismatch() {
    let q = Tensor::zeros(&[1, 2, 3, 4]);
    let k = Tensor::zeros(&[1, 2, 3, 5]);
    assert!(Tensor::attention(&q, &k, &q).is_err());
}

#[test]
fn cross_entropy_uniform_is_ln_k() {
    let logits = Tensor::zeros(&[5, 64]);
    let loss = logits.cross_entropy(&[0, 3, 63, 7, 9], &[1.0; 5]).unwrap();
    assert!((loss.item() as f64 - 64f64.ln()).abs() < 1e-6);
    let none = logits.cross_entropy(&[0; 5], &[0.0; 5]).unwrap();
    assert_eq!(none.item(), 0.0);
}

#[test]
fn embedding_and_pooling_shapes() {
    let table = Tensor::new((0..6).map(|v| v as f32).collect(), &[3, 2]).unwrap();
    let e = Tensor::embedding(&table, &[2, 0, 2]).unwrap();
    assert_eq!(e.data(), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
    assert!(Tensor::embedding(&table, &[3]).is_err());

    let x = Tensor::new((0..16).map(|v| v as f32).collect(), &[1, 1, 4, 4]).unwrap();
    let p = x.avg_pool2d(2).unwrap();
    assert_eq!(p.data(), &[2.5, 4.5, 10.5, 12.5]);
    let u = p.upsample_nearest(2).unwrap();
    assert_eq!(u.shape(), &[1, 1, 4, 4]);
    assert_eq!(u.data()[5], 2.5);
}

#[test]
fn concat_values_and_rejection() {
    let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
    let b = Tensor::new(vec![5.0, 6.0], &[2, 1]).unwrap();
    let c = Tensor::concat(&[&a, &b], 1).unwrap();
    assert_eq!(c.shape(), &[2, 3]);
    assert_eq!(c.to_vec(), vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
    let r = Tensor::concat(&[&a, &b.reshape(&[1, 2]).unwrap()], 0).unwrap();
    assert_eq!(r.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    assert!(Tensor::concat(&[&a, &b], 0).is_err());
}

#[test]
fn broadcast_matches_index_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let pairs: [(&[usize], &[usize]); 6] = [
        (&[2, 3, 4, 5], &[1, 3, 1, 1]),
        (&[2, 1, 4, 1], &[1, 3, 1, 5]),
        (&[2, 3, 4, 5], &[5]),
        (&[2, 3, 4, 5], &[2, 1, 4, 5]),
        (&[3, 1], &[1, 4]),
        (&[2, 3, 4], &[]),
    ];
    for (sa, sb) in pairs {
        let a = Tensor::randn(sa, 1.0, &mut rng).to_param();
        let b = Tensor::randn(sb, 1.0, &mut rng).to_param();
        let y = a.mul(&b).unwrap();
        let rank = sa.len().max(sb.len());
        let pad = |s: &[usize]| {
            let mut p = vec![1; rank - s.len()];
            p.extend_from_slice(s);
            p
        };
        let (pa, pb) = (pad(sa), pad(sb));
        let out: Vec<usize> = (0..rank).map(|i| pa[i].max(pb[i])).collect();
        assert_eq!(y.shape(), out.as_slice());
        let flat = |s: &[usize], idx: &[usize]| idx.iter().zip(s).fold(0, |acc, (&i, &d)| acc * d + if d == 1 { 0 } else { i });
        let n: usize = out.iter().product();
        let mut ga = vec![0.0f32; a.numel()];
        let mut gb = vec![0.0f32; b.numel()];
        for f in 0..n {
            let mut idx = vec![0; rank];
            let mut r = f;
            for ax in (0..rank).rev() {
                idx[ax] = r % out[ax];
                r /= out[ax];
            }
            let (ia, ib) = (flat(&pa, &idx), flat(&pb, &idx));
            assert_eq!(y.data()[f], a.data()[ia] * b.data()[ib]);
            ga[ia] += b.data()[ib];
            gb[ib] += a.data()[ia];
        }
        y.sum().backward().unwrap();
        assert!(max_abs_diff(&a.grad().unwrap(), &ga) < 1e-4);
        assert!(max_abs_diff(&b.grad().unwrap(), &gb) < 1e-4);
    }
}
