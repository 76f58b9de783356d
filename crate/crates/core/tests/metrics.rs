use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokenfill_core::dataset::{make_dataset, DatasetKind};
use tokenfill_core::metrics::{diversity, fid_proxy, frechet_distance, mean_std};
use tokenfill_core::vq::VqConfig;
use tokenfill_core::{Image, MaskGrid, VqModel};
use tokenfill_tensor::no_grad;

fn normal_rows(n: usize, d: usize, scale: &[f64], shift: &[f64], rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..d)
                .map(|j| {
                    let u: f64 = rng.random_range(-1.0..1.0);
                    u * scale[j] + shift[j]
                })
                .collect()
        })
        .collect()
}

#[test]
fn frechet_self_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = normal_rows(200, 6, &[1.0, 0.5, 2.0, 0.1, 1.0, 3.0], &[0.0; 6], &mut rng);
    assert!(frechet_distance(&a, &a).unwrap() < 1e-6);
}

#[test]
fn frechet_one_dimensional_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = normal_rows(300, 1, &[1.0], &[0.5], &mut rng);
    let b = normal_rows(300, 1, &[2.5], &[-1.0], &mut rng);
    let stats = |rows: &[Vec<f64>]| {
        let n = rows.len() as f64;
        let m = rows.iter().map(|r| r[0]).sum::<f64>() / n;
        let v = rows.iter().map(|r| (r[0] - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v.sqrt())
    };
    let ((ma, sa), (mb, sb)) = (stats(&a), stats(&b));
    let expected = (ma - mb).powi(2) + (sa - sb).powi(2);
    assert!((frechet_distance(&a, &b).unwrap() - expected).abs() < 1e-9);
}

#[test]
fn frechet_pure_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = normal_rows(100, 4, &[1.0, 2.0, 0.5, 1.0], &[0.0; 4], &mut rng);
    let shift = [1.0, -2.0, 0.5, 0.0];
    let b: Vec<Vec<f64>> = a.iter().map(|r| r.iter().zip(&shift).map(|(x, s)| x + s).collect()).collect();
    let expected: f64 = shift.iter().map(|s| s * s).sum();
    assert!((frechet_distance(&a, &b).unwrap() - expected).abs() < 1e-6);
    assert!(frechet_distance(&a, &[]).is_err());
}

fn vq() -> VqModel {
    let cfg = VqConfig {
        k: 8,
        n_z: 4,
        widths: vec![4, 4, 4],
        steps: 0,
        batch: 1,
        lr: 1e-3,
        commitment: 0.25,
        seed: 0,
    };
    VqModel::new(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
}

fn images(n: usize) -> Vec<Image> {
    make_dataset(DatasetKind::Mixed, n, 16, 9).unwrap().into_iter().map(|s| s.image).collect()
}

#[test]
fn fid_proxy_of_identical_sets() {
    let (v, imgs) = (vq(), images(12));
    assert!(fid_proxy(&v, &imgs, &imgs).unwrap() < 1e-6);
}

#[test]
fn diversity_cases() {
    let (v, imgs) = (vq(), images(3));
    let hidden = MaskGrid::new(4, 4, (0..16).map(|i| (i % 3 != 0) as u8).collect()).unwrap();
    let same = vec![imgs[0].clone(), imgs[0].clone(), imgs[0].clone()];
    assert_eq!(diversity(&v, &same, &hidden).unwrap(), 0.0);
    assert!(diversity(&v, &imgs[..1], &hidden).is_err());
    assert_eq!(diversity(&v, &imgs, &MaskGrid::ones(4, 4)).unwrap(), 0.0);

    // oracle: RMS feature difference over hidden cells, averaged over pairs
    let got = diversity(&v, &imgs, &hidden).unwrap();
    let feats: Vec<Vec<f32>> = imgs.iter().map(|im| no_grad(|| v.features(&im.to_tensor())).unwrap().to_vec()).collect();
    let cells: Vec<usize> = (0..16).filter(|&i| hidden.values()[i] == 0).collect();
    let mut total = 0.0;
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let mut sq = 0.0f64;
        for ch in 0..4 {
            for &c in &cells {
                sq += (feats[i][ch * 16 + c] as f64 - feats[j][ch * 16 + c] as f64).powi(2);
            }
        }
        total += (sq / (4 * cells.len()) as f64).sqrt();
    }
    assert!((got - total / 3.0).abs() < 1e-9);
    assert!(got > 0.0);
}

#[test]
fn mean_and_std() {
    let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(m, 2.5);
    assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert_eq!(mean_std(&[]), (0.0, 0.0));
}
