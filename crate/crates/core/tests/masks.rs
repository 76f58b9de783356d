mod common;

use common::{downsample_oracle, masked_conv_oracle, max_abs_diff, random_mask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokenfill_core::masks::{partial_conv, restrictive_conv, window_stats};
use tokenfill_core::{build_pyramid, downsample_mask, generate_mask, Error, MaskGrid, MaskKind};
use tokenfill_tensor::Tensor;

fn t(data: Vec<f32>, shape: &[usize]) -> Tensor {
    Tensor::new(data, shape).unwrap()
}

fn grid(rows: &[&[u8]]) -> MaskGrid {
    MaskGrid::new(rows.len(), rows[0].len(), rows.concat()).unwrap()
}

#[test]
fn all_ones_mask_is_scaled_standard_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn(&[1, 2, 6, 7], 1.0, &mut rng);
    let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
    let b = Tensor::randn(&[3], 1.0, &mut rng);
    let ones = [MaskGrid::ones(6, 7)];
    let (p, updated) = partial_conv(&x, &ones, &w, Some(&b), 1, 1).unwrap();
    let r = restrictive_conv(&x, &ones, &w, Some(&b), 0.5).unwrap();
    assert_eq!(updated[0], ones[0]);
    let plain = x.conv2d(&w, None, 1, 1).unwrap();
    let stats = window_stats(&ones[0], 3, 1, 1).unwrap();
    // interior windows hold 9 pixels, edges 6, corners 4
    assert_eq!(stats.total[0], 4);
    assert_eq!(stats.total[1], 6);
    assert_eq!(stats.total[8], 9);
    let expected: Vec<f32> = plain
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v / stats.total[i % 42] as f32 + b.data()[i / 42])
        .collect();
    assert!(max_abs_diff(p.data(), &expected) < 1e-5);
    assert!(max_abs_diff(r.data(), &expected) < 1e-5);
}

#[test]
fn one_window_by_hand() {
    // 3×3 input 1..9, all visible, weights all ones: centre = 45 / 9
    let x = t((1..=9).map(|v| v as f32).collect(), &[1, 1, 3, 3]);
    let w = Tensor::ones(&[1, 1, 3, 3]);
    let (y, _) = partial_conv(&x, &[MaskGrid::ones(3, 3)], &w, None, 1, 1).unwrap();
    assert!((y.data()[4] - 5.0).abs() < 1e-6);
    // top-left window sees 1,2,4,5
    assert!((y.data()[0] - 3.0).abs() < 1e-6);
}

#[test]
fn all_zero_mask_gives_zeros() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut rng);
    let w = Tensor::randn(&[2, 2, 3, 3], 1.0, &mut rng);
    let b = Tensor::full(&[2], 3.0);
    let zeros = [MaskGrid::zeros(5, 5)];
    let (y, m) = partial_conv(&x, &zeros, &w, Some(&b), 1, 1).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
    assert_eq!(m[0], zeros[0]);
    let r = restrictive_conv(&x, &zeros, &w, Some(&b), 0.25).unwrap();
    assert!(r.data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_visible_pixel_keeps_its_value() {
    let mut data = vec![9.0f32; 9];
    data[4] = 2.5;
    let x = t(data, &[1, 1, 3, 3]);
    let mut m = MaskGrid::zeros(3, 3);
    m.set(1, 1, true);
    let (y, _) = partial_conv(&x, &[m], &Tensor::ones(&[1, 1, 3, 3]), None, 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert!((y.item() - 2.5).abs() < 1e-6);
}

#[test]
fn restrictive_threshold_arithmetic() {
    let x = Tensor::ones(&[1, 1, 3, 3]);
    let w = Tensor::ones(&[1, 1, 3, 3]);
    let five = grid(&[&[1, 1, 1], &[1, 1, 0], &[0, 0, 0]]);
    let four = grid(&[&[1, 1, 1], &[1, 0, 0], &[0, 0, 0]]);
    let centre = |m: MaskGrid| restrictive_conv(&x, &[m], &w, None, 0.5).unwrap().data()[4];
    assert!((centre(five) - 1.0).abs() < 1e-6);
    assert_eq!(centre(four), 0.0);
}

#[test]
fn masked_convs_match_window_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..150 {
        let (h, w) = (rng.random_range(3..=8), rng.random_range(3..=8));
        let (c, co) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let k = if trial % 3 == 0 { 1 } else { 3 };
        let mask = random_mask(h, w, &mut rng);
        let x = Tensor::randn(&[1, c, h, w], 1.0, &mut rng);
        let wt = Tensor::randn(&[co, c, k, k], 1.0, &mut rng);
        let b = Tensor::randn(&[co], 1.0, &mut rng);
        let alpha = [0.25, 0.5, 0.75, 1.0][trial % 4];

        let r = restrictive_conv(&x, std::slice::from_ref(&mask), &wt, Some(&b), alpha).unwrap();
        let (want, on, _, _) = masked_conv_oracle(x.data(), c, &mask, wt.data(), co, k, b.data(), 1, k / 2, Some(alpha));
        assert!(max_abs_diff(r.data(), &want) < 1e-5, "trial {trial}");
        // support: exactly the passing windows (bias is nonzero almost surely)
        for o in 0..co {
            for (i, &pass) in on.iter().enumerate() {
                assert_eq!(r.data()[o * h * w + i] != 0.0, pass);
            }
        }

        let stride = rng.random_range(1..=2);
        let (p, updated) = partial_conv(&x, std::slice::from_ref(&mask), &wt, Some(&b), stride, k / 2).unwrap();
        let (want, on, oh, ow) = masked_conv_oracle(x.data(), c, &mask, wt.data(), co, k, b.data(), stride, k / 2, None);
        assert_eq!(p.shape(), &[1, co, oh, ow]);
        assert!(max_abs_diff(p.data(), &want) < 1e-5);
        assert_eq!(updated[0].values(), on.iter().map(|&v| v as u8).collect::<Vec<_>>().as_slice());
    }
}

#[test]
fn partial_update_grows_visible_set() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let mask = random_mask(8, 8, &mut rng);
        let x = Tensor::ones(&[1, 1, 8, 8]);
        let (_, up) = partial_conv(&x, std::slice::from_ref(&mask), &Tensor::ones(&[1, 1, 3, 3]), None, 1, 1).unwrap();
        for y in 0..8 {
            for xx in 0..8 {
                if mask.get(y, xx) {
                    assert!(up[0].get(y, xx));
                }
            }
        }
    }
}

#[test]
fn restrictive_output_ignores_hole_contents() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..30 {
        let mask = random_mask(10, 10, &mut rng);
        let x = Tensor::randn(&[1, 2, 10, 10], 1.0, &mut rng);
        let wt = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let mut poked = x.to_vec();
        for (i, v) in poked.iter_mut().enumerate() {
            if !mask.get((i / 10) % 10, i % 10) {
                *v = rng.random_range(-50.0..50.0);
            }
        }
        let poked = t(poked, &[1, 2, 10, 10]);
        let a = restrictive_conv(&x, std::slice::from_ref(&mask), &wt, None, 0.5).unwrap();
        let b = restrictive_conv(&poked, std::slice::from_ref(&mask), &wt, None, 0.5).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn rejections() {
    let x = Tensor::ones(&[1, 1, 4, 4]);
    let w = Tensor::ones(&[1, 1, 3, 3]);
    assert!(matches!(
        restrictive_conv(&x, &[MaskGrid::ones(4, 5)], &w, None, 0.5),
        Err(Error::MaskExtent { .. })
    ));
    assert!(partial_conv(&x, &[MaskGrid::ones(5, 4)], &w, None, 1, 1).is_err());
    for bad in [0.0, -0.1, 1.5, f64::NAN] {
        assert!(restrictive_conv(&x, &[MaskGrid::ones(4, 4)], &w, None, bad).is_err());
        assert!(downsample_mask(&MaskGrid::ones(4, 4), bad, 2).is_err());
    }
    assert!(restrictive_conv(&x, &[MaskGrid::ones(4, 4)], &w, None, 1.0).is_ok());
    assert!(downsample_mask(&MaskGrid::ones(5, 4), 0.5, 2).is_err());
    assert!(build_pyramid(&MaskGrid::ones(12, 12), 0.5, 3).is_err());
    assert!(MaskGrid::new(1, 2, vec![0, 2]).is_err());
}

#[test]
fn downsample_examples() {
    let three = grid(&[&[1, 1], &[1, 0]]);
    let one = grid(&[&[1, 0], &[0, 0]]);
    assert!(downsample_mask(&three, 0.5, 2).unwrap().get(0, 0));
    assert!(!downsample_mask(&one, 0.5, 2).unwrap().get(0, 0));
}

#[test]
fn downsample_matches_oracle_and_is_antitone() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let m = random_mask(16, 16, &mut rng);
        for a in [0.25, 0.5, 0.75, 1.0] {
            assert_eq!(downsample_mask(&m, a, 2).unwrap(), downsample_oracle(&m, a));
        }
        let lo = downsample_mask(&m, 0.25, 2).unwrap();
        let hi = downsample_mask(&m, 0.75, 2).unwrap();
        assert!(lo.visible_count() >= hi.visible_count());
        for (a, b) in lo.values().iter().zip(hi.values()) {
            assert!(a >= b);
        }
    }
}

#[test]
fn pyramid_levels_and_trivial_masks() {
    for visible in [true, false] {
        let p = build_pyramid(&MaskGrid::filled(64, 64, visible), 0.5, 3).unwrap();
        assert_eq!(p.levels.len(), 4);
        for (l, level) in p.levels.iter().enumerate() {
            assert_eq!(level.extents(), (64 >> l, 64 >> l));
            assert_eq!(level.visible_count(), if visible { level.values().len() } else { 0 });
        }
    }
}

#[test]
fn pyramid_of_box80_by_stages() {
    let m = generate_mask(MaskKind::Box80, (64, 64), 0);
    let p = build_pyramid(&m, 0.5, 3).unwrap();
    let mut cur = m.clone();
    for level in &p.levels[1..] {
        cur = downsample_oracle(&cur, 0.5);
        assert_eq!(level, &cur);
    }
    // masked rows/cols 6..57 → 32-level cells 3..28 → 16-level 2..13 → 8-level 1..6:
    // visible cells form a one-cell ring
    let tm = p.token_mask();
    for y in 0..8 {
        for x in 0..8 {
            let ring = y == 0 || x == 0 || y == 7 || x == 7;
            assert_eq!(tm.get(y, x), ring, "cell {y},{x}");
        }
    }
}

#[test]
fn one_masked_pixel_leaves_token_grid_visible() {
    let mut m = MaskGrid::ones(64, 64);
    m.set(31, 17, false);
    let p = build_pyramid(&m, 0.5, 3).unwrap();
    assert_eq!(p.token_mask().visible_count(), 64);
}

#[test]
fn lower_alpha_marks_more_cells() {
    let mut lo_total = 0;
    let mut hi_total = 0;
    for seed in 0..40 {
        let m = generate_mask(MaskKind::LargeRandom, (64, 64), seed);
        let lo = build_pyramid(&m, 0.25, 3).unwrap().token_mask().visible_count();
        let hi = build_pyramid(&m, 0.75, 3).unwrap().token_mask().visible_count();
        assert!(lo >= hi);
        lo_total += lo;
        hi_total += hi;
    }
    assert!(lo_total > hi_total);
}

#[test]
fn box_masks() {
    let m = generate_mask(MaskKind::Box80, (64, 64), 7);
    assert_eq!(64 * 64 - m.visible_count(), 2601);
    for y in 0..64 {
        for x in 0..64 {
            let inside = (6..57).contains(&y) && (6..57).contains(&x);
            assert_eq!(m.get(y, x), !inside);
        }
    }
    let half = generate_mask(MaskKind::CustomBox(0.5), (32, 32), 0);
    assert_eq!(half.visible_count(), 32 * 32 - 256);
    assert_eq!("custom-box:0.5".parse::<MaskKind>().unwrap(), MaskKind::CustomBox(0.5));
    assert!("custom-box:2".parse::<MaskKind>().is_err());
    assert!("nope".parse::<MaskKind>().is_err());
}

#[test]
fn random_masks_are_seeded_and_hit_their_targets() {
    assert_eq!(
        generate_mask(MaskKind::SmallRandom, (64, 64), 11),
        generate_mask(MaskKind::SmallRandom, (64, 64), 11)
    );
    assert_ne!(
        generate_mask(MaskKind::LargeRandom, (64, 64), 11),
        generate_mask(MaskKind::LargeRandom, (64, 64), 12)
    );
    for kind in [MaskKind::LargeRandom, MaskKind::SmallRandom] {
        let (lo, hi) = kind.target_range().unwrap();
        let fracs: Vec<f64> = (0..1000).map(|s| generate_mask(kind, (64, 64), s).masked_fraction()).collect();
        let mean = fracs.iter().sum::<f64>() / fracs.len() as f64;
        assert!(mean >= lo && mean <= hi, "{kind}: mean {mean}");
        assert!(fracs.iter().all(|&f| f <= hi));
    }
}

#[test]
fn pgm_round_trip() {
    let m = generate_mask(MaskKind::LargeRandom, (24, 40), 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pgm");
    m.write_pgm(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert!(bytes.starts_with(b"P5\n40 24\n255\n"));
    assert!(bytes[13..].iter().all(|&b| b == 0 || b == 255));
    assert_eq!(MaskGrid::read_pgm(&path).unwrap(), m);
}
