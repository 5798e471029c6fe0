use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde_json::json;

use alore_core::accounting::{fine_tune_params, inference_extra_params, millions, AccountingInputs, Method};
use alore_core::alore::{
    count_alore_params, init_alore, make_expert_mask, stacked_param_count, AloreBank, ExpertMask, MaskMode,
};
use alore_core::backbone::{grad_check, worst, Adapters, Regime, ViTModel};
use alore_core::checkpoint::{
    dataset_from_checkpoint, dataset_to_checkpoint, model_from_checkpoint, model_to_checkpoint, Checkpoint,
};
use alore_core::config::{ExperimentConfig, TaskSide};
use alore_core::data::{gen_task, make_transfer_pair, Split};
use alore_core::reparam::{bench_throughput, bench_throughput_threads, merge_with_log, verify_equivalence, Evaluated};
use alore_core::train::{evaluate, grid_search, train_loop, write_metrics};
use alore_core::{Error, Precision, Real, Result, Rng};

use crate::Status;

fn print_json(value: &serde_json::Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("json value serializes")
    );
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Prefixes I/O errors with the file they concern.
fn at_path<V>(path: &Path, r: Result<V>) -> Result<V> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    at_path(path, Checkpoint::load(path))
}

/// Precision of the backbone tensors in a model checkpoint.
fn precision_of(ck: &Checkpoint) -> Result<Precision> {
    Ok(ck.require("patch.w")?.data.precision())
}

pub fn train(config: &Path, out: &Path, grid: bool) -> Result<Status> {
    let cfg = at_path(config, ExperimentConfig::load(config))?;
    fs::create_dir_all(out)?;
    match cfg.precision {
        Precision::F32 => train_as::<f32>(&cfg, out, grid),
        Precision::F64 => train_as::<f64>(&cfg, out, grid),
    }
}

fn train_as<T: Real>(cfg: &ExperimentConfig, out: &Path, grid: bool) -> Result<Status> {
    let (source, target) = make_transfer_pair(&cfg.data, cfg.seed)?;
    let dataset = match cfg.task {
        TaskSide::Source => source,
        TaskSide::Target => target,
    };
    let rng = Rng::new(cfg.seed);
    let mut model = match &cfg.init {
        Some(path) => {
            let (mut m, _) = model_from_checkpoint::<T>(&load_ckpt(path)?)?;
            m.reset_head(cfg.model.classes);
            if m.config != cfg.model {
                return Err(Error::Config(format!(
                    "{} does not match the model section",
                    path.display()
                )));
            }
            m
        }
        None => ViTModel::init(&cfg.model, &mut rng.fork(0))?,
    };
    let mut bank = match cfg.regime {
        Regime::Alore => Some(init_alore::<T>(&cfg.alore_config(), cfg.model.depth, &mut rng.fork(1))?),
        Regime::Full | Regime::LinearProbe => None,
    };
    let tc = cfg.train_config();

    let (outcome, selected) = if grid {
        let g = grid_search(&model, bank.as_ref(), &dataset, &tc)?;
        write_json(&out.join("trials.json"), &json!(g.trials))?;
        model = g.model;
        bank = g.bank;
        (g.outcome, g.best)
    } else {
        (train_loop(&mut model, bank.as_mut(), &dataset, &tc)?, tc)
    };

    model_to_checkpoint(&model, bank.as_ref())?.save(out.join("model.ckpt"))?;
    dataset_to_checkpoint(&dataset)?.save(out.join("data.ckpt"))?;
    write_metrics(
        &outcome.history,
        BufWriter::new(fs::File::create(out.join("metrics.jsonl"))?),
    )?;
    let summary = json!({
        "regime": cfg.regime,
        "lr": selected.lr,
        "weight_decay": selected.weight_decay,
        "dropout_p": selected.dropout_p,
        "initial_val_loss": outcome.initial_val_loss,
        "best_epoch": outcome.best_epoch,
        "best_val_top1": outcome.best_val_top1,
        "test_top1": outcome.test_top1,
    });
    write_json(&out.join("summary.json"), &summary)?;
    print_json(&summary);
    Ok(Status::Ok)
}

pub fn merge(ckpt: &Path, out: &Path) -> Result<Status> {
    let ck = load_ckpt(ckpt)?;
    match precision_of(&ck)? {
        Precision::F32 => merge_as::<f32>(&ck, out),
        Precision::F64 => merge_as::<f64>(&ck, out),
    }
}

fn merge_as<T: Real>(ck: &Checkpoint, out: &Path) -> Result<Status> {
    let (model, bank) = model_from_checkpoint::<T>(ck)?;
    let (merged, log) = match &bank {
        Some(b) => merge_with_log(&model, b)?,
        None => (model, Vec::new()),
    };
    model_to_checkpoint(&merged, None)?.save(out)?;
    print_json(&json!({
        "merged_param_count": merged.param_count(),
        "site_merge_log": log,
    }));
    Ok(Status::Ok)
}

pub fn verify(a: &Path, b: &Path, inputs: usize, tol: f64, seed: u64) -> Result<Status> {
    let (ca, cb) = (load_ckpt(a)?, load_ckpt(b)?);
    match (precision_of(&ca)?, precision_of(&cb)?) {
        (Precision::F32, Precision::F32) => verify_as::<f32>(&ca, &cb, inputs, tol, seed),
        (Precision::F64, Precision::F64) => verify_as::<f64>(&ca, &cb, inputs, tol, seed),
        _ => Err(Error::Config("checkpoints have different precisions".into())),
    }
}

fn verify_as<T: Real>(a: &Checkpoint, b: &Checkpoint, inputs: usize, tol: f64, seed: u64) -> Result<Status> {
    let (ma, ba) = model_from_checkpoint::<T>(a)?;
    let (mb, bb) = model_from_checkpoint::<T>(b)?;
    let mask_a = ba.as_ref().map(|x| ExpertMask::full(x.config().n));
    let mask_b = bb.as_ref().map(|x| ExpertMask::full(x.config().n));
    let ea = Evaluated {
        model: &ma,
        adapters: attach(ba.as_ref(), mask_a.as_ref())?,
    };
    let eb = Evaluated {
        model: &mb,
        adapters: attach(bb.as_ref(), mask_b.as_ref())?,
    };
    let report = verify_equivalence(ea, eb, inputs, seed, tol)?;
    print_json(&json!(report));
    Ok(if report.passed { Status::Ok } else { Status::Failed })
}

fn attach<'a, T: Real>(
    bank: Option<&'a AloreBank<T>>,
    mask: Option<&'a ExpertMask>,
) -> Result<Option<Adapters<'a, T>>> {
    match (bank, mask) {
        (Some(b), Some(m)) => Ok(Some(Adapters::new(b, m)?)),
        _ => Ok(None),
    }
}

/// Worker threads for the all-stream benchmark: `ALORE_THREADS` if set, else the core count.
fn bench_threads() -> Result<usize> {
    match std::env::var("ALORE_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("ALORE_THREADS must be a positive integer, got {v:?}"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub fn bench(ckpt: &Path, batch: usize, iters: usize, warmup: usize, plain: bool) -> Result<Status> {
    let ck = load_ckpt(ckpt)?;
    match precision_of(&ck)? {
        Precision::F32 => bench_as::<f32>(&ck, batch, iters, warmup, plain),
        Precision::F64 => bench_as::<f64>(&ck, batch, iters, warmup, plain),
    }
}

fn bench_as<T: Real>(ck: &Checkpoint, batch: usize, iters: usize, warmup: usize, plain: bool) -> Result<Status> {
    let (model, bank) = model_from_checkpoint::<T>(ck)?;
    let bank = if plain { None } else { bank };
    let mask = bank.as_ref().map(|b| ExpertMask::full(b.config().n));
    let adapters = attach(bank.as_ref(), mask.as_ref())?;
    let threads = bench_threads()?;
    let single = bench_throughput(&model, adapters, batch, warmup, iters)?;
    let all = bench_throughput_threads(&model, adapters, batch, warmup, iters, threads)?;
    print_json(&json!({
        "adapters": adapters.is_some(),
        "batch": batch,
        "iters": iters,
        "single_stream_images_per_sec": single,
        "threads": threads,
        "all_stream_images_per_sec": all,
    }));
    Ok(Status::Ok)
}

/// Prints the count table. `sites` and `stacked` only affect `alore`: fewer
/// adapted sites per layer, or the stacked-linear baseline with that many branches.
pub fn params(inp: AccountingInputs, sites: usize, stacked: Option<usize>) -> Result<Status> {
    let method = inp.method.ok_or_else(|| Error::Config("no method given".into()))?;
    let custom = sites != 2 || stacked.is_some();
    if custom && method != Method::Alore {
        return Err(Error::Config("--sites and --stacked apply to alore only".into()));
    }
    let (label, fine, infer) = match stacked {
        _ if !custom => (
            method.name().to_string(),
            fine_tune_params(&inp)?,
            inference_extra_params(&inp)?,
        ),
        Some(k) => (
            format!("stacked-{k}"),
            stacked_param_count(inp.d as usize, inp.r as usize, k, sites, inp.layers as usize),
            0,
        ),
        None => (
            format!("alore-{sites}site"),
            count_alore_params(
                inp.d as usize,
                inp.r as usize,
                inp.n as usize,
                sites,
                inp.layers as usize,
            ),
            0,
        ),
    };
    println!(
        "{:<14} {:>12} {:>12} {:>12}",
        "method", "fine_tune", "inference", "fine_tune_M"
    );
    println!("{:<14} {:>12} {:>12} {:>12.2}", label, fine, infer, millions(fine));
    Ok(Status::Ok)
}

pub fn gradcheck(config: &Path, eps: f64, tol: f64) -> Result<Status> {
    let cfg = at_path(config, ExperimentConfig::load(config))?;
    let mut rng = Rng::new(cfg.seed);
    let model = ViTModel::<f64>::random(&cfg.model, 0.3, &mut rng)?;
    let bank = AloreBank::<f64>::random(&cfg.alore_config(), cfg.model.depth, 0.3, &mut rng)?;
    let data = gen_task(&cfg.data, cfg.seed)?;
    let take: Vec<usize> = data.train.iter().copied().take(4).collect();
    let (images, labels) = data.gather_indices(&take)?;
    let checks = grad_check(
        &model,
        Some(&bank),
        &images.cast::<f64>(),
        &labels,
        cfg.regime,
        eps,
        cfg.seed,
    )?;
    for c in &checks {
        println!(
            "{:<32} {:>8} {:>12.3e} {:>12.3e}",
            c.name, c.entries, c.max_rel_err, c.norm_rel_err
        );
    }
    let w = worst(&checks);
    println!("max relative error {w:.3e} (tolerance {tol:e})");
    Ok(if w <= tol { Status::Ok } else { Status::Failed })
}

pub fn mask_eval(ckpt: &Path, data: &Path, mode: MaskMode, index: usize) -> Result<Status> {
    let ck = load_ckpt(ckpt)?;
    let dataset = dataset_from_checkpoint(&load_ckpt(data)?)?;
    match precision_of(&ck)? {
        Precision::F32 => mask_eval_as::<f32>(&ck, &dataset, mode, index),
        Precision::F64 => mask_eval_as::<f64>(&ck, &dataset, mode, index),
    }
}

fn mask_eval_as<T: Real>(
    ck: &Checkpoint,
    dataset: &alore_core::data::Dataset,
    mode: MaskMode,
    index: usize,
) -> Result<Status> {
    let (model, bank) = model_from_checkpoint::<T>(ck)?;
    let bank = bank.ok_or_else(|| Error::Config("checkpoint has no adapters".into()))?;
    let n = bank.config().n;
    let mask = make_expert_mask(mode, index, n)?;
    let full = ExpertMask::full(n);
    let (loss, top1) = evaluate(&model, Some(Adapters::new(&bank, &mask)?), dataset, Split::Test)?;
    let (full_loss, full_top1) = evaluate(&model, Some(Adapters::new(&bank, &full)?), dataset, Split::Test)?;
    print_json(&json!({
        "mode": mode,
        "index": index,
        "mask": mask.active(),
        "test_loss": loss,
        "test_top1": top1,
        "full_test_loss": full_loss,
        "full_test_top1": full_top1,
    }));
    Ok(Status::Ok)
}
