//! Central finite-difference checks of reverse-mode gradients.
//!
//! Only the forward pass of the function under test is used to build the
//! numerical estimate.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{no_grad, Tensor};

/// Outcome for one input of the checked function.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub analytic: Vec<f32>,
    pub numeric: Vec<f64>,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-6)`.
    pub rel_err: f64,
}

fn projected(y: &Tensor, proj: &[f32]) -> f64 {
    y.data().iter().zip(proj).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Compares autodiff gradients of `sum(r ⊙ f(inputs))` for a random `r`
/// against central differences with step `h`, for every input that
/// requires a gradient.
pub fn check<F>(f: F, inputs: &[Tensor], h: f32, rng: &mut impl Rng) -> Result<Vec<GradReport>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves: Vec<Tensor> = inputs.iter().map(|t| if t.requires_grad() { t.to_param() } else { t.detach() }).collect();
    let y = f(&leaves)?;
    let proj: Vec<f32> = (0..y.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = y.mul(&Tensor::new(proj.clone(), y.shape())?)?.sum();
    loss.backward()?;

    let mut reports = Vec::new();
    for (slot, leaf) in leaves.iter().enumerate() {
        if !leaf.requires_grad() {
            continue;
        }
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let mut numeric = Vec::with_capacity(leaf.numel());
        for i in 0..leaf.numel() {
            let x = leaf.data()[i];
            let (xp, xm) = (x + h, x - h);
            let eval = |value: f32| -> Result<f64> {
                let mut data = leaf.to_vec();
                data[i] = value;
                let mut probe: Vec<Tensor> = leaves.iter().map(Tensor::detach).collect();
                probe[slot] = Tensor::new(data, leaf.shape())?;
                let y = no_grad(|| f(&probe))?;
                Ok(projected(&y, &proj))
            };
            numeric.push((eval(xp)? - eval(xm)?) / (xp as f64 - xm as f64));
        }
        reports.push(GradReport {
            rel_err: relative_error(&analytic, &numeric),
            analytic,
            numeric,
        });
    }
    Ok(reports)
}

pub fn relative_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(&a, &n)| (a as f64 - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-6)
}

/// Worst relative error across all checked inputs.
pub fn max_rel_err(reports: &[GradReport]) -> f64 {
    reports.iter().map(|r| r.rel_err).fold(0.0, f64::max)
}

/// One named case of [`op_suite`].
#[derive(Debug, Clone)]
pub struct CaseResult {
    pub op: &'static str,
    pub rel_err: f64,
}

fn away_from_kink(t: &Tensor) -> Tensor {
    let data = t
        .data()
        .iter()
        .map(|&v| if v >= 0.0 { v + 0.05 } else { v - 0.05 })
        .collect();
    Tensor::new(data, t.shape()).expect("same shape")
}

fn positive(t: &Tensor) -> Tensor {
    Tensor::new(t.data().iter().map(|v| 0.5 + v.abs()).collect(), t.shape()).expect("same shape")
}

type SuiteFn = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;

/// Finite-difference checks over every differentiable operation with random
/// extents of at most 8 per axis. Runs `rounds` passes over the operation list.
pub fn op_suite(rounds: usize, h: f32, rng: &mut impl Rng) -> Result<Vec<CaseResult>> {
    let mut results = Vec::new();
    for _ in 0..rounds {
        let mut dim = |lo: usize, hi: usize| rng.random_range(lo..=hi);
        let (a, b, c) = (dim(1, 4), dim(1, 5), dim(1, 4));
        // Below three elements the normalised output is ±1 up to eps and its
        // gradient sits under the f32 finite-difference noise floor.
        let (ln_rows, ln_n) = (dim(1, 4), dim(3, 6));
        let (ci, co, hh, ww) = (dim(1, 3), dim(1, 3), dim(3, 7), dim(3, 7));
        let (heads, l, d) = (dim(1, 2), dim(1, 5), dim(1, 4));
        let k = dim(2, 6);
        let stride = dim(1, 2);
        let temp = rng.random_range(0.3..2.0f32);
        let slope = rng.random_range(0.01..0.3f32);

        let x = Tensor::randn(&[a, b, c], 1.0, rng).to_param();
        let y = Tensor::randn(&[a, b, c], 1.0, rng).to_param();
        let row = Tensor::randn(&[c], 1.0, rng).to_param();
        let col = Tensor::randn(&[a, 1, 1], 1.0, rng).to_param();
        let kinked = away_from_kink(&x).to_param();
        let pos = positive(&x).to_param();
        let denom = positive(&y).to_param();

        let mut cases: Vec<(&'static str, SuiteFn, Vec<Tensor>)> = vec![
            ("add", Box::new(|t| t[0].add(&t[1])), vec![x.clone(), y.clone()]),
            ("add_broadcast", Box::new(|t| t[0].add(&t[1])?.add(&t[2])), vec![x.clone(), row.clone(), col.clone()]),
            ("sub_broadcast", Box::new(|t| t[1].sub(&t[0])), vec![x.clone(), col.clone()]),
            ("mul_broadcast", Box::new(|t| t[0].mul(&t[1])?.mul(&t[2])), vec![x.clone(), row.clone(), col.clone()]),
            ("div", Box::new(|t| t[0].div(&t[1])), vec![x.clone(), denom.clone()]),
            ("scale_shift", Box::new(|t| Ok(t[0].scale(-1.7).add_scalar(0.3))), vec![x.clone()]),
            ("square", Box::new(|t| Ok(t[0].square())), vec![x.clone()]),
            ("abs", Box::new(|t| Ok(t[0].abs())), vec![kinked.clone()]),
            ("exp", Box::new(|t| Ok(t[0].exp())), vec![x.clone()]),
            ("ln", Box::new(|t| Ok(t[0].ln())), vec![pos.clone()]),
            ("relu", Box::new(|t| Ok(t[0].relu())), vec![kinked.clone()]),
            ("leaky_relu", Box::new(move |t| Ok(t[0].leaky_relu(slope))), vec![kinked.clone()]),
            ("sigmoid", Box::new(|t| Ok(t[0].sigmoid())), vec![x.clone()]),
            ("tanh", Box::new(|t| Ok(t[0].tanh())), vec![x.clone()]),
            ("silu", Box::new(|t| Ok(t[0].silu())), vec![x.clone()]),
            ("gelu", Box::new(|t| Ok(t[0].gelu())), vec![x.clone()]),
            ("softplus", Box::new(|t| Ok(t[0].softplus())), vec![x.clone()]),
            ("sum", Box::new(|t| Ok(t[0].sum())), vec![x.clone()]),
            ("mean", Box::new(|t| Ok(t[0].mean())), vec![x.clone()]),
            ("sum_axis", Box::new(|t| t[0].sum_axis(1)), vec![x.clone()]),
            ("reshape_permute", Box::new(move |t| t[0].reshape(&[c, a * b])?.permute(&[1, 0])), vec![x.clone()]),
            ("softmax", Box::new(move |t| t[0].softmax(temp)), vec![x.clone()]),
            ("concat", Box::new(|t| Tensor::concat(&[&t[0], &t[1]], 1)), vec![x.clone(), y.clone()]),
        ];
        let ln_last = Tensor::randn(&[ln_rows, ln_n], 1.0, rng).to_param();
        let ln_mid = Tensor::randn(&[ln_rows, ln_n, c], 1.0, rng).to_param();
        cases.push(("layernorm_last", Box::new(|t| t[0].layernorm(1e-5)), vec![ln_last]));
        cases.push(("layernorm_axis1", Box::new(|t| t[0].layernorm_axis(1, 1e-5)), vec![ln_mid]));

        let m1 = Tensor::randn(&[a, k], 1.0, rng).to_param();
        let m2 = Tensor::randn(&[k, b], 1.0, rng).to_param();
        let bias = Tensor::randn(&[b], 1.0, rng).to_param();
        cases.push(("matmul", Box::new(|t| t[0].matmul(&t[1])), vec![m1.clone(), m2.clone()]));
        cases.push(("linear", Box::new(|t| t[0].linear(&t[1], Some(&t[2]))), vec![m1, m2, bias]));

        let img = Tensor::randn(&[a.min(2), ci, hh, ww], 1.0, rng).to_param();
        let kern = if hh.min(ww) >= 5 && rng.random_bool(0.3) { 5 } else { 3 };
        let wgt = Tensor::randn(&[co, ci, kern, kern], 0.5, rng).to_param();
        let cb = Tensor::randn(&[co], 0.5, rng).to_param();
        let pad = kern / 2;
        cases.push((
            "conv2d",
            Box::new(move |t| t[0].conv2d(&t[1], Some(&t[2]), stride, pad)),
            vec![img.clone(), wgt, cb],
        ));
        let pw = Tensor::randn(&[co, ci, 1, 1], 0.5, rng).to_param();
        cases.push(("conv2d_1x1", Box::new(|t| t[0].conv2d(&t[1], None, 1, 0)), vec![img.clone(), pw]));
        cases.push(("upsample", Box::new(|t| t[0].upsample_nearest(2)), vec![img.clone()]));
        let even = Tensor::randn(&[1, ci, 2 * (hh / 2).max(1), 2 * (ww / 2).max(1)], 1.0, rng).to_param();
        cases.push(("avg_pool2d", Box::new(|t| t[0].avg_pool2d(2)), vec![even]));

        let q = Tensor::randn(&[1, heads, l, d], 0.5, rng).to_param();
        let kk = Tensor::randn(&[1, heads, l, d], 0.5, rng).to_param();
        let v = Tensor::randn(&[1, heads, l, d], 1.0, rng).to_param();
        cases.push(("attention", Box::new(|t| Tensor::attention(&t[0], &t[1], &t[2])), vec![q.clone(), kk.clone(), v.clone()]));
        let mut key_mask: Vec<bool> = (0..l).map(|_| rng.random_bool(0.7)).collect();
        key_mask[0] = true;
        let drop = crate::ops::nn::dropout_mask(heads * l * l, 0.2, rng);
        let opts = crate::ops::nn::AttentionOptions {
            key_mask: Some(key_mask),
            causal: rng.random_bool(0.5),
            dropout: Some(drop),
        };
        cases.push((
            "attention_masked",
            Box::new(move |t| Tensor::attention_with(&t[0], &t[1], &t[2], &opts)),
            vec![q, kk, v],
        ));

        let rows = rng.random_range(1..=8usize);
        let logits = Tensor::randn(&[rows, k], 1.5, rng).to_param();
        let targets: Vec<usize> = (0..rows).map(|_| rng.random_range(0..k)).collect();
        let mut weights: Vec<f32> = (0..rows).map(|_| if rng.random_bool(0.7) { 1.0 } else { 0.0 }).collect();
        weights[0] = 1.0;
        cases.push(("cross_entropy", Box::new(move |t| t[0].cross_entropy(&targets, &weights)), vec![logits]));
        let table = Tensor::randn(&[k, d], 1.0, rng).to_param();
        let idx: Vec<usize> = (0..l + 2).map(|_| rng.random_range(0..k)).collect();
        cases.push(("embedding", Box::new(move |t| Tensor::embedding(&t[0], &idx)), vec![table]));

        for (op, f, inputs) in cases {
            let reports = check(|t| f(t), &inputs, h, rng)?;
            results.push(CaseResult { op, rel_err: max_rel_err(&reports) });
        }
    }
    Ok(results)
}
