use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokenfill_core::dataset::{make_dataset, DatasetKind};
use tokenfill_core::vq::{lookup_batch, quantize_batch, straight_through};
use tokenfill_core::{encode_full, lookup, quantize, train_vq, Codebook, TokenGrid, VqConfig, VqModel};
use tokenfill_tensor::{grad, Checkpoint, Tensor};

fn book(rows: &[[f32; 2]]) -> Codebook {
    Codebook::from_tensor(Tensor::new(rows.concat(), &[rows.len(), 2]).unwrap()).unwrap()
}

fn brute_nearest(cb: &Codebook, v: &[f32]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for k in 0..cb.k() {
        let mut d = 0.0f64;
        for (c, &x) in v.iter().enumerate() {
            let e = cb.embeddings.data()[k * cb.n_z() + c] as f64;
            d += (x as f64 - e) * (x as f64 - e);
        }
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

#[test]
fn quantize_examples() {
    let cb = book(&[[0.0, 0.0], [1.0, 1.0]]);
    let f = Tensor::new(vec![0.9, 0.8], &[2, 1, 1]).unwrap();
    assert_eq!(quantize(&f, &cb).unwrap().labels(), &[1]);
    let exact = Tensor::new(vec![0.0, 0.0], &[2, 1, 1]).unwrap();
    assert_eq!(quantize(&exact, &cb).unwrap().labels(), &[0]);
    // equidistant: lowest label wins
    let tie = Tensor::new(vec![0.5, 0.5], &[2, 1, 1]).unwrap();
    assert_eq!(quantize(&tie, &cb).unwrap().labels(), &[0]);
    let wrong = Tensor::zeros(&[3, 1, 1]);
    assert!(quantize(&wrong, &cb).is_err());
}

#[test]
fn quantize_is_exhaustive_nearest() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let k = rng.random_range(2..12);
        let cb = Codebook::from_tensor(Tensor::randn(&[k, 5], 1.0, &mut rng)).unwrap();
        let f = Tensor::randn(&[5, 4, 4], 1.0, &mut rng);
        let g = quantize(&f, &cb).unwrap();
        for i in 0..16 {
            let v: Vec<f32> = (0..5).map(|c| f.data()[c * 16 + i]).collect();
            assert_eq!(g.get(i), brute_nearest(&cb, &v));
            let d = |l: usize| -> f64 {
                v.iter().zip(cb.row(l)).map(|(a, b)| ((a - b) as f64).powi(2)).sum()
            };
            for other in 0..k {
                assert!(d(g.get(i)) <= d(other));
            }
        }
        // the projection onto the codebook is a fixed point of quantisation
        let z = lookup(&g, &cb).unwrap();
        assert_eq!(quantize(&z, &cb).unwrap(), g);
    }
}

#[test]
fn lookup_rows_and_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cb = Codebook::from_tensor(Tensor::randn(&[6, 3], 1.0, &mut rng)).unwrap();
    let labels: Vec<usize> = (0..12).map(|i| i % 6).collect();
    let g = TokenGrid::new(3, 4, 6, labels).unwrap();
    let z = lookup(&g, &cb).unwrap();
    assert_eq!(z.shape(), &[3, 3, 4]);
    for i in 0..12 {
        for c in 0..3 {
            assert_eq!(z.data()[c * 12 + i], cb.row(g.get(i))[c]);
        }
    }
    assert_eq!(quantize(&z, &cb).unwrap(), g);

    let constant = TokenGrid::new(2, 2, 6, vec![4; 4]).unwrap();
    let zc = lookup(&constant, &cb).unwrap();
    for c in 0..3 {
        assert!(zc.data()[c * 4..c * 4 + 4].iter().all(|&v| v == cb.row(4)[c]));
    }
}

#[test]
fn lookup_rejects_mask_without_embedding() {
    let cb = book(&[[0.0, 0.0], [1.0, 1.0]]);
    let g = TokenGrid::new(1, 2, 2, vec![0, 2]).unwrap();
    assert!(lookup(&g, &cb).is_err());
    let m = Tensor::new(vec![7.0, 8.0], &[2]).unwrap();
    let z = lookup_batch(&[&g], &cb, Some(&m)).unwrap();
    assert_eq!(z.to_vec(), vec![0.0, 7.0, 0.0, 8.0]);
}

#[test]
fn lookup_grad_counts_occurrences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cb = Codebook::from_tensor(Tensor::randn(&[4, 3], 1.0, &mut rng).to_param()).unwrap();
    let labels = vec![0, 2, 2, 3, 2, 0];
    let g = TokenGrid::new(2, 3, 4, labels.clone()).unwrap();
    let z = lookup(&g, &cb).unwrap();
    z.sum().backward().unwrap();
    let analytic = cb.embeddings.grad().unwrap();
    // central differences of sum(Z) in each embedding entry
    for k in 0..4 {
        for c in 0..3 {
            let f = |delta: f32| {
                let mut e = cb.embeddings.to_vec();
                e[k * 3 + c] += delta;
                let cbp = Codebook::from_tensor(Tensor::new(e, &[4, 3]).unwrap()).unwrap();
                lookup(&g, &cbp).unwrap().data().iter().map(|&v| v as f64).sum::<f64>()
            };
            let numeric = (f(1e-2) - f(-1e-2)) / 2e-2;
            let count = labels.iter().filter(|&&l| l == k).count() as f64;
            assert!((numeric - count).abs() < 1e-3);
            assert!((analytic[k * 3 + c] as f64 - count).abs() < 1e-6);
        }
    }
}

#[test]
fn token_grid_sets_and_text() {
    let g = TokenGrid::new(2, 3, 64, vec![5, 64, 0, 63, 64, 7]).unwrap();
    assert_eq!(g.visible(), vec![0, 2, 3, 5]);
    assert_eq!(g.missing(), vec![1, 4]);
    let mut all: Vec<usize> = g.visible().into_iter().chain(g.missing()).collect();
    all.sort();
    assert_eq!(all, (0..6).collect::<Vec<_>>());
    let text = g.to_text();
    assert_eq!(text, "2 3\n5 M 0\n63 M 7\n");
    assert_eq!(TokenGrid::from_text(&text, 64).unwrap(), g);
    assert!(TokenGrid::from_text("1 2\n64 0\n", 64).is_err());
    assert!(TokenGrid::from_text("2 2\n1 2 3\n", 64).is_err());
    assert!(TokenGrid::new(1, 1, 4, vec![5]).is_err());
}

fn tiny_config(seed: u64) -> VqConfig {
    VqConfig {
        k: 16,
        n_z: 8,
        widths: vec![4, 8, 8, 8],
        steps: 60,
        batch: 4,
        lr: 2e-3,
        commitment: 0.25,
        seed,
    }
}

fn tiny_images(n: usize) -> Vec<tokenfill_core::Image> {
    make_dataset(DatasetKind::Mixed, n, 16, 9).unwrap().into_iter().map(|s| s.image).collect()
}

#[test]
fn straight_through_passes_gradient_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = VqModel::new(&tiny_config(0), &mut rng).unwrap();
    let images = tiny_images(2);
    let x = tokenfill_core::Image::batch(&images.iter().collect::<Vec<_>>()).unwrap();
    let z_e = model.features(&x).unwrap();
    let grids = quantize_batch(&z_e, &model.codebook).unwrap();
    let z_q = lookup_batch(&grids.iter().collect::<Vec<_>>(), &model.codebook, None).unwrap().detach();
    let st = straight_through(&z_e, &z_q).unwrap();
    assert_eq!(st.to_vec(), z_q.to_vec());
    let target = Tensor::randn(&[2, 3, 16, 16], 0.5, &mut rng);
    let loss_st = model.decode(&st).unwrap().sub(&target).unwrap().square().mean();
    let g_st = grad(&loss_st, &[&z_e]).unwrap().remove(0);
    // identity bypass: the same decoder fed the quantised codes directly
    let bypass = z_q.to_param();
    let loss_id = model.decode(&bypass).unwrap().sub(&target).unwrap().square().mean();
    let g_id = grad(&loss_id, &[&bypass]).unwrap().remove(0);
    // same values up to summation order in the backward pass
    for (a, b) in g_st.iter().zip(&g_id) {
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-3), "{a} vs {b}");
    }
}

#[test]
fn training_reduces_error_and_is_reproducible() {
    let images = tiny_images(24);
    let (m1, r1) = train_vq(&images, &tiny_config(5)).unwrap();
    let (m2, r2) = train_vq(&images, &tiny_config(5)).unwrap();
    assert_eq!(r1.mse, r2.mse);
    let w = r1.window_means(20);
    assert!(w.last().unwrap() < w.first().unwrap(), "{w:?}");
    assert!(r1.usage > 0.0 && r1.usage <= 1.0);

    let g1 = encode_full(&images[0], &m1).unwrap();
    assert_eq!(g1, encode_full(&images[0], &m1).unwrap());
    assert_eq!(g1, encode_full(&images[0], &m2).unwrap());
    assert_eq!((g1.height(), g1.width()), (2, 2));
    assert_eq!(g1.missing_count(), 0);
    let x = images[0].to_tensor();
    let feats = m1.features(&x).unwrap();
    assert_eq!(quantize_batch(&feats, &m1.codebook).unwrap()[0], g1);
}

#[test]
fn degenerate_dataset_rejected() {
    assert!(train_vq(&tiny_images(3), &tiny_config(0)).is_err());
}

#[test]
fn checkpoint_preserves_embeddings() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = VqModel::new(&tiny_config(0), &mut rng).unwrap();
    let mut ck = Checkpoint::new();
    ck.insert_module("vq", &model);
    let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    let mut other = VqModel::new(&tiny_config(0), &mut rng).unwrap();
    back.load_module("vq", &mut other).unwrap();
    let (a, b) = (model.codebook.embeddings.data(), other.codebook.embeddings.data());
    assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
}
