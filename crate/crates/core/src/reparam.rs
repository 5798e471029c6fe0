//! Folding trained adapters into the backbone, and checks that the fold is exact.
//!
//! With `W_A = I + Σᵢ Sᵢ ⊗ (DᵢUᵢ)` for a site, an adapter in front of a projection
//! becomes `W ← W_A·W`, and one behind a projection becomes `W ← W·W_A`, `b ← b·W_A`.

use serde::Serialize;
use std::time::Instant;

use crate::alore::{compose_delta, AloreBank, Site};
use crate::backbone::{vit_forward, Adapters, ViTModel};
use crate::error::{Error, Result};
use crate::linalg::{matmul, Matrix, Real, Rng};

/// One weight rewritten by [`merge`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MergeEntry {
    pub layer: usize,
    pub site: Site,
    pub tensor: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeReport {
    pub max_abs_logit_diff: f64,
    pub inputs_tested: usize,
    pub merged_param_count: usize,
    pub site_merge_log: Vec<MergeEntry>,
    pub tol: f64,
    pub passed: bool,
}

fn left_fold<T: Real>(w_a: &Matrix<T>, w: &mut Matrix<T>) -> Result<()> {
    *w = matmul(w_a, w)?;
    Ok(())
}

fn right_fold<T: Real>(w: &mut Matrix<T>, w_a: &Matrix<T>) -> Result<()> {
    *w = matmul(w, w_a)?;
    Ok(())
}

/// Plain model computing the same eval-mode function as `model` with `bank` (full mask).
///
/// Sites whose update is exactly zero are skipped, so fresh adapters leave every
/// tensor bit-identical.
pub fn merge<T: Real>(model: &ViTModel<T>, bank: &AloreBank<T>) -> Result<ViTModel<T>> {
    merge_with_log(model, bank).map(|(m, _)| m)
}

/// [`merge`] plus the list of rewritten tensors.
pub fn merge_with_log<T: Real>(model: &ViTModel<T>, bank: &AloreBank<T>) -> Result<(ViTModel<T>, Vec<MergeEntry>)> {
    let c = bank.config();
    if c.d != model.config.d {
        return Err(Error::Config(format!(
            "adapter width {} != model width {}",
            c.d, model.config.d
        )));
    }
    if c.layers_adapted > model.layers.len() {
        return Err(Error::Config(format!(
            "bank adapts {} layers, model has {}",
            c.layers_adapted,
            model.layers.len()
        )));
    }
    let mut out = model.clone();
    let mut log = Vec::new();
    for module in bank.modules() {
        let (layer, site) = (module.layer, module.site);
        let delta = compose_delta(bank, layer, site)?;
        if delta.data().iter().all(|&v| v == T::zero()) {
            continue;
        }
        let mut w_a = delta;
        for i in 0..c.d {
            w_a[(i, i)] += T::one();
        }
        let w = &mut out.layers[layer];
        let mut note = |name: &str| {
            log.push(MergeEntry {
                layer,
                site,
                tensor: format!("blocks.{layer}.{name}"),
            })
        };
        match site {
            Site::PreMhsa => {
                left_fold(&w_a, &mut w.wq)?;
                left_fold(&w_a, &mut w.wk)?;
                left_fold(&w_a, &mut w.wv)?;
                ["attn.wq", "attn.wk", "attn.wv"].into_iter().for_each(&mut note);
            }
            Site::PostMhsa => {
                right_fold(&mut w.wo, &w_a)?;
                right_fold(&mut w.bo, &w_a)?;
                ["attn.wo", "attn.bo"].into_iter().for_each(&mut note);
            }
            Site::PreFfn => {
                left_fold(&w_a, &mut w.w1)?;
                note("ffn.w1");
            }
            Site::PostFfn => {
                right_fold(&mut w.w2, &w_a)?;
                right_fold(&mut w.b2, &w_a)?;
                ["ffn.w2", "ffn.b2"].into_iter().for_each(&mut note);
            }
        }
    }
    Ok((out, log))
}

/// A model, optionally evaluated with adapters.
#[derive(Debug, Clone, Copy)]
pub struct Evaluated<'a, T> {
    pub model: &'a ViTModel<T>,
    pub adapters: Option<Adapters<'a, T>>,
}

impl<'a, T> From<&'a ViTModel<T>> for Evaluated<'a, T> {
    fn from(model: &'a ViTModel<T>) -> Self {
        Self { model, adapters: None }
    }
}

/// Images per random batch in [`verify_equivalence`].
pub const VERIFY_BATCH: usize = 4;

/// Compares eval-mode logits of `a` and `b` on `num_inputs` random batches of
/// uniform `[0, 1)` images.
pub fn verify_equivalence<T: Real>(
    a: Evaluated<'_, T>,
    b: Evaluated<'_, T>,
    num_inputs: usize,
    seed: u64,
    tol: f64,
) -> Result<MergeReport> {
    if a.model.config != b.model.config {
        return Err(Error::Config("models have different configurations".into()));
    }
    let len = a.model.config.image_len();
    let root = Rng::new(seed);
    let mut max_diff = 0.0f64;
    for i in 0..num_inputs {
        let mut rng = root.fork(i as u64);
        let data = (0..VERIFY_BATCH * len).map(|_| T::of(rng.uniform())).collect();
        let images = Matrix::from_vec(VERIFY_BATCH, len, data)?;
        let la = vit_forward(a.model, &images, a.adapters, false, &mut Rng::new(0))?;
        let lb = vit_forward(b.model, &images, b.adapters, false, &mut Rng::new(0))?;
        let diff = la.max_abs_diff(&lb).to_f64().unwrap_or(f64::INFINITY);
        max_diff = if diff.is_nan() {
            f64::INFINITY
        } else {
            max_diff.max(diff)
        };
    }
    Ok(MergeReport {
        max_abs_logit_diff: max_diff,
        inputs_tested: num_inputs,
        merged_param_count: b.model.param_count(),
        site_merge_log: Vec::new(),
        tol,
        passed: max_diff <= tol,
    })
}

fn bench_images<T: Real>(model: &ViTModel<T>, batch: usize) -> Result<Matrix<T>> {
    let len = model.config.image_len();
    let mut rng = Rng::new(0x5EED);
    Matrix::from_vec(batch, len, (0..batch * len).map(|_| T::of(rng.uniform())).collect())
}

/// Single-stream eval throughput in images per second, timed after `warmup_iters`.
pub fn bench_throughput<T: Real>(
    model: &ViTModel<T>,
    adapters: Option<Adapters<'_, T>>,
    batch: usize,
    warmup_iters: usize,
    timed_iters: usize,
) -> Result<f64> {
    bench_throughput_threads(model, adapters, batch, warmup_iters, timed_iters, 1)
}

/// Aggregate throughput of `threads` concurrent streams, each running `timed_iters` batches.
pub fn bench_throughput_threads<T: Real>(
    model: &ViTModel<T>,
    adapters: Option<Adapters<'_, T>>,
    batch: usize,
    warmup_iters: usize,
    timed_iters: usize,
    threads: usize,
) -> Result<f64> {
    if timed_iters == 0 || batch == 0 || threads == 0 {
        return Err(Error::Config("batch, timed_iters and threads must be positive".into()));
    }
    let images = bench_images(model, batch)?;
    let run = |iters: usize| -> Result<()> {
        for _ in 0..iters {
            std::hint::black_box(vit_forward(model, &images, adapters, false, &mut Rng::new(0))?);
        }
        Ok(())
    };
    run(warmup_iters)?;
    let start = Instant::now();
    if threads == 1 {
        run(timed_iters)?;
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads).map(|_| s.spawn(|| run(timed_iters))).collect();
            handles
                .into_iter()
                .try_for_each(|h| h.join().expect("benchmark thread panicked"))
        })?;
    }
    let secs = start.elapsed().as_secs_f64().max(1e-9);
    Ok((batch * timed_iters * threads) as f64 / secs)
}

/// Median of `values` (upper median for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}
