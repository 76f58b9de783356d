use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokenfill_core::transformer::{
    evaluate_transformer, train_transformer, training_mask, transformer_loss, BidirectionalTransformer, Masking,
    TransformerConfig,
};
use tokenfill_core::{build_pyramid, generate_mask, Codebook, MaskKind, TokenGrid};
use tokenfill_tensor::{Checkpoint, Tensor};

fn config(k: usize, grid: (usize, usize)) -> TransformerConfig {
    TransformerConfig {
        k,
        grid,
        d: 32,
        layers: 2,
        heads: 4,
        dropout: 0.1,
        steps: 0,
        batch: 8,
        lr: 3e-3,
        mask_ratio: (0.15, 0.75),
        masking: Masking::Uniform,
        fixed_masks: false,
        seed: 1,
    }
}

fn codebook(k: usize, rng: &mut impl Rng) -> Codebook {
    Codebook::new(k, 8, rng)
}

/// Structured grids: each is a shifted ramp, so cells are predictable from
/// their neighbours.
fn ramp_grids(n: usize, side: usize, k: usize) -> Vec<TokenGrid> {
    (0..n)
        .map(|i| {
            let labels = (0..side * side).map(|c| (c / side + c % side + 3 * i) % k).collect();
            TokenGrid::new(side, side, k, labels).unwrap()
        })
        .collect()
}

fn hide(grid: &TokenGrid, cells: &[usize]) -> TokenGrid {
    let mut g = grid.clone();
    for &c in cells {
        g.set(c, g.mask_label());
    }
    g
}

#[test]
fn untrained_model_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = config(64, (8, 8));
    let model = BidirectionalTransformer::new(&cfg, &codebook(64, &mut rng), &mut rng).unwrap();
    let grid = hide(&ramp_grids(1, 8, 64)[0], &(0..30).collect::<Vec<_>>());
    let logits = model.predict(&grid).unwrap();
    assert_eq!(logits.shape(), &[64, 64]);
    assert!(logits.data().iter().all(|&v| v == 0.0));
    let target = &ramp_grids(1, 8, 64)[0];
    let loss = evaluate_transformer(&model, &[target], &[&grid]).unwrap();
    assert!((loss as f64 - 64f64.ln()).abs() < 1e-6, "{loss}");
}

#[test]
fn loss_reads_only_mask_cells() {
    let k = 8;
    let target = &ramp_grids(1, 2, k)[0];
    let input = hide(target, &[1, 2]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let base: Vec<f32> = (0..4 * k).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut changed = base.clone();
    for c in [0, 3] {
        for j in 0..k {
            changed[c * k + j] = rng.random_range(-9.0..9.0);
        }
    }
    let la = transformer_loss(&Tensor::new(base.clone(), &[1, 4, k]).unwrap(), &[target], &[&input]).unwrap();
    let lb = transformer_loss(&Tensor::new(changed, &[1, 4, k]).unwrap(), &[target], &[&input]).unwrap();
    assert_eq!(la.item(), lb.item());
    let nll = |c: usize| {
        let row: Vec<f64> = base[c * k..(c + 1) * k].iter().map(|&v| v as f64).collect();
        row.iter().map(|v| v.exp()).sum::<f64>().ln() - row[target.get(c)]
    };
    assert!((la.item() as f64 - (nll(1) + nll(2)) / 2.0).abs() < 1e-5);

    let mut perfect = vec![-1e4f32; 4 * k];
    for c in 0..4 {
        perfect[c * k + target.get(c)] = 1e4;
    }
    let perfect = Tensor::new(perfect, &[1, 4, k]).unwrap();
    assert_eq!(transformer_loss(&perfect, &[target], &[&input]).unwrap().item(), 0.0);
    // nothing hidden: no supervision
    assert_eq!(transformer_loss(&perfect, &[target], &[target]).unwrap().item(), 0.0);
}

#[test]
fn encoder_and_transformer_sets_partition_the_grid() {
    for seed in 0..50 {
        let mask = generate_mask(MaskKind::LargeRandom, (64, 64), seed);
        let tm = build_pyramid(&mask, 0.5, 3).unwrap().token_mask().clone();
        let full = &ramp_grids(1, 8, 16)[0];
        let input = full.masked_by(&tm).unwrap();
        for i in 0..64 {
            let enc = tm.values()[i] == 1;
            let tr = input.is_masked(i);
            assert!(enc ^ tr);
        }
    }
}

#[test]
fn inference_is_deterministic_and_extent_checked() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = config(16, (4, 4));
    let mut model = BidirectionalTransformer::new(&cfg, &codebook(16, &mut rng), &mut rng).unwrap();
    model.head.weight = Tensor::randn(&[32, 16], 0.5, &mut rng).to_param();
    let grid = hide(&ramp_grids(1, 4, 16)[0], &[0, 5]);
    let a = model.predict(&grid).unwrap();
    let b = model.predict(&grid).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    // shape is independent of the visible/missing split
    let other = hide(&ramp_grids(1, 4, 16)[0], &(0..16).collect::<Vec<_>>());
    assert_eq!(model.predict(&other).unwrap().shape(), a.shape());
    let wrong = TokenGrid::all_masked(8, 8, 16);
    assert!(model.predict(&wrong).is_err());
    let wrong_k = TokenGrid::all_masked(4, 4, 8);
    assert!(model.predict(&wrong_k).is_err());
}

#[test]
fn mask_ratio_distribution() {
    let cfg = config(64, (8, 8));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut sum = 0.0;
    let trials = 10_000;
    for _ in 0..trials {
        let hidden = training_mask(64, 8, &cfg, &mut rng);
        let r = hidden.iter().filter(|&&h| h).count() as f64 / 64.0;
        assert!((0.15..=0.75).contains(&r), "{r}");
        sum += r;
    }
    let mean = sum / trials as f64;
    // E⌈64r⌉/64 for r ~ U[0.15, 0.75] is 0.45 plus about half a cell
    assert!((mean - 0.4578).abs() < 0.005, "{mean}");

    let block = TransformerConfig {
        masking: Masking::Block,
        ..cfg
    };
    for _ in 0..200 {
        let hidden = training_mask(64, 8, &block, &mut rng);
        let cells: Vec<usize> = (0..64).filter(|&i| hidden[i]).collect();
        let (ys, xs): (Vec<usize>, Vec<usize>) = cells.iter().map(|&c| (c / 8, c % 8)).unzip();
        let area = (ys.iter().max().unwrap() - ys.iter().min().unwrap() + 1) * (xs.iter().max().unwrap() - xs.iter().min().unwrap() + 1);
        assert_eq!(area, cells.len(), "block masks are rectangles");
    }
}

fn overfit_config() -> TransformerConfig {
    TransformerConfig {
        steps: 300,
        fixed_masks: true,
        dropout: 0.0,
        ..config(16, (4, 4))
    }
}

#[test]
fn overfits_fixed_grids_and_is_bidirectional() {
    let grids = ramp_grids(8, 4, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cb = codebook(16, &mut rng);
    let cfg = overfit_config();
    let (mut model, report) = train_transformer(&grids, &cb, &cfg).unwrap();
    let last = *report.loss.last().unwrap();
    assert!(last < 0.1, "final {last}, first {}", report.loss[0]);
    assert!((report.loss[0] as f64 - 16f64.ln()).abs() < 1e-5);

    // position sensitivity: swapping two visible labels changes predictions
    let probe = hide(&grids[0], &[5, 6, 9, 10]);
    let mut swapped = probe.clone();
    swapped.set(0, probe.get(15));
    swapped.set(15, probe.get(0));
    assert_ne!(probe.get(0), probe.get(15));
    assert_ne!(model.predict(&probe).unwrap().to_vec(), model.predict(&swapped).unwrap().to_vec());

    // a causal view of the same weights is a different model
    let targets: Vec<&TokenGrid> = grids.iter().collect();
    let inputs: Vec<TokenGrid> = grids.iter().map(|g| hide(g, &[1, 6, 11])).collect();
    let inputs: Vec<&TokenGrid> = inputs.iter().collect();
    let full = evaluate_transformer(&model, &targets, &inputs).unwrap();
    model.causal = true;
    let causal = evaluate_transformer(&model, &targets, &inputs).unwrap();
    assert_ne!(full, causal);
}

#[test]
fn training_reproducible_and_checkpointed() {
    let grids = ramp_grids(12, 4, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cb = codebook(16, &mut rng);
    let cfg = TransformerConfig {
        steps: 15,
        batch: 4,
        ..config(16, (4, 4))
    };
    let (a, ra) = train_transformer(&grids, &cb, &cfg).unwrap();
    let (_, rb) = train_transformer(&grids, &cb, &cfg).unwrap();
    assert_eq!(ra.loss, rb.loss);
    let mut ck = Checkpoint::new();
    ck.insert_module("transformer", &a);
    let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    let mut b = BidirectionalTransformer::new(&cfg, &cb, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    back.load_module("transformer", &mut b).unwrap();
    let g = hide(&grids[0], &[3, 4]);
    assert_eq!(a.predict(&g).unwrap().to_vec(), b.predict(&g).unwrap().to_vec());
}
