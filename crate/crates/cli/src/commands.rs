//! Implementations behind the CLI subcommands. Each returns a provenance
//! value that the binary prints to stdout on success.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde_json::{json, Value};

use sfnn_core::data::{gen_digits, gen_synthetic, save_csv, save_idx, DigitsConfig, SyntheticConfig};
use sfnn_core::network::{error_rate, predict_nll, ForwardMode};
use sfnn_core::training::{
    select_learning_rate, train, EpochRecord, TrainConfig, TrainMode,
};
use sfnn_core::transfer::{
    simple_transform, transform_theorem1, transform_theorem3, SimpleTransformKind,
};
use sfnn_core::verify::{
    check_theorem1_bound, gamma_sweep, grad_check, mc_bias_test, sample_dnn, CheckReport,
    GradCheckMode,
};
use sfnn_core::{Error, Matrix, Params, Result, RngStream, SquashKind};

use crate::checkpoint::{self, Checkpoint, ModelKind, Provenance, TrainingMeta};
use crate::config::{hash_of, load_config};
use crate::dataref::DataRef;

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

pub fn gen_data_synthetic(
    n: usize,
    n_test: usize,
    noise: f64,
    seed: u64,
    out: &Path,
    out_test: Option<&Path>,
) -> Result<Value> {
    let cfg = SyntheticConfig {
        n_train: n,
        n_test,
        noise,
        seed,
    };
    let (train_ds, test_ds) = gen_synthetic(&cfg);
    save_csv(&train_ds, out)?;
    if let Some(p) = out_test {
        save_csv(&test_ds, p)?;
    }
    let hash = hash_of(&json!({"n": n, "n_test": n_test, "noise": noise, "seed": seed}));
    Ok(json!({
        "provenance": Provenance::new(hash, seed),
        "rows": n,
        "out": out.display().to_string(),
    }))
}

pub fn gen_data_digits(
    n: usize,
    seed: u64,
    out_images: &Path,
    out_labels: &Path,
) -> Result<Value> {
    let ds = gen_digits(&DigitsConfig { n, seed });
    save_idx(&ds, out_images, out_labels)?;
    let hash = hash_of(&json!({"n": n, "seed": seed}));
    Ok(json!({
        "provenance": Provenance::new(hash, seed),
        "rows": n,
        "out_images": out_images.display().to_string(),
        "out_labels": out_labels.display().to_string(),
    }))
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn write_metrics(
    path: &Path,
    provenance: &Provenance,
    records: &[EpochRecord],
    extra: Option<Value>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let head = json!({ "provenance": provenance });
    writeln!(w, "{head}")?;
    for r in records {
        let line =
            serde_json::to_string(r).map_err(|e| Error::Data(format!("serialize metrics: {e}")))?;
        writeln!(w, "{line}")?;
    }
    if let Some(v) = extra {
        writeln!(w, "{v}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn train_cmd(
    config_path: &Path,
    data: &DataRef,
    out: &Path,
    metrics: Option<&Path>,
) -> Result<Value> {
    let cfg = load_config(config_path)?;
    let spec = cfg.network_spec();
    let ds = data.load()?;
    ds.validate_for(&spec)?;
    let (train_ds, val_ds) = if cfg.n_val > 0 {
        let (t, v) = sfnn_core::data::train_val_split(&ds, cfg.n_val)?;
        (t, Some(v))
    } else {
        (ds, None)
    };

    let init = Params::glorot(&spec, RngStream::new(cfg.train.seed));
    let base_lr = match cfg.train.base_lr {
        Some(lr) => lr,
        None => {
            let val = val_ds.as_ref().ok_or_else(|| {
                Error::Data("learning-rate selection needs a validation split (set n_val)".into())
            })?;
            select_learning_rate(
                &spec,
                &init,
                &train_ds,
                val,
                &cfg.train_config(1e-3),
                TrainMode::Dnn,
                3,
            )?
        }
    };
    let train_cfg = cfg.train_config(base_lr);
    let outcome = train(&spec, init, &train_ds, val_ds.as_ref(), &train_cfg, TrainMode::Dnn)?;

    let hash = hash_of(&cfg);
    let provenance = Provenance::new(hash.clone(), cfg.train.seed);
    let ck = Checkpoint {
        format_version: checkpoint::FORMAT_VERSION,
        kind: ModelKind::Dnn,
        spec,
        params: outcome.best_params,
        transfer: None,
        training: Some(TrainingMeta {
            seed: cfg.train.seed,
            epochs: cfg.train.epochs,
            config_hash: hash,
        }),
        provenance: provenance.clone(),
    };
    checkpoint::save(&ck, out)?;
    if let Some(m) = metrics {
        write_metrics(m, &provenance, &outcome.records, None)?;
    }
    let final_train_loss = outcome
        .records
        .iter()
        .rev()
        .find(|r| r.split == "train")
        .map(|r| r.loss);
    Ok(json!({
        "provenance": provenance,
        "base_lr": base_lr,
        "final_train_loss": final_train_loss,
        "out": out.display().to_string(),
    }))
}

// ---------------------------------------------------------------------------
// transfer
// ---------------------------------------------------------------------------

pub fn transfer_cmd(
    model: &Path,
    data: &DataRef,
    mode: &str,
    gamma: f64,
    layers: &[usize],
    gamma_floor: bool,
    out: &Path,
) -> Result<Value> {
    let ck = checkpoint::load(model)?;
    if ck.kind != ModelKind::Dnn {
        return Err(Error::Data(
            "transfer starts from a trained deterministic checkpoint".into(),
        ));
    }
    let ds = data.load()?;
    ds.validate_for(&ck.spec)?;
    let inputs = &ds.inputs;

    let layer_list: Vec<usize> = if layers.is_empty() { vec![0] } else { layers.to_vec() };
    let gammas = vec![gamma; layer_list.len()];
    let (transferred, kind) = match mode {
        "simple-sigmoid" => (
            simple_transform(&ck.spec, &ck.params, SimpleTransformKind::Sigmoid, inputs)?,
            ModelKind::Sfnn,
        ),
        "simple-relu" => (
            simple_transform(&ck.spec, &ck.params, SimpleTransformKind::Relu, inputs)?,
            ModelKind::Sfnn,
        ),
        "thm1" => (
            transform_theorem1(
                &ck.spec,
                &ck.params,
                &layer_list,
                &gammas,
                SquashKind::Sigmoid,
                inputs,
                gamma_floor,
            )?,
            ModelKind::SimplifiedSfnn,
        ),
        "thm3" => (
            transform_theorem3(
                &ck.spec,
                &ck.params,
                &layer_list,
                &gammas,
                SquashKind::Sigmoid,
                inputs,
                gamma_floor,
            )?,
            ModelKind::SimplifiedSfnn,
        ),
        other => {
            return Err(Error::Data(format!(
                "unknown transfer mode '{other}' (simple-sigmoid, simple-relu, thm1, thm3)"
            )))
        }
    };

    let hash = hash_of(&json!({
        "source": ck.provenance.config_hash,
        "mode": mode, "gamma": gamma, "layers": layer_list, "gamma_floor": gamma_floor,
    }));
    let provenance = Provenance::new(hash, ck.provenance.seed);
    let report = transferred.report.clone();
    let new_ck = Checkpoint {
        format_version: checkpoint::FORMAT_VERSION,
        kind,
        spec: transferred.spec,
        params: transferred.params,
        transfer: Some(transferred.report),
        training: ck.training.clone(),
        provenance: provenance.clone(),
    };
    checkpoint::save(&new_ck, out)?;
    Ok(json!({
        "provenance": provenance,
        "mode": mode,
        "report": report,
        "out": out.display().to_string(),
    }))
}

// ---------------------------------------------------------------------------
// finetune
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
pub fn finetune_cmd(
    model: &Path,
    data: &DataRef,
    samples: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
    n_val: usize,
    out: &Path,
    metrics: Option<&Path>,
) -> Result<Value> {
    let ck = checkpoint::load(model)?;
    if ck.kind != ModelKind::SimplifiedSfnn {
        return Err(Error::Data(
            "fine-tuning needs a theorem-transferred simplified-SFNN checkpoint".into(),
        ));
    }
    let ds = data.load()?;
    ds.validate_for(&ck.spec)?;
    let (train_ds, val_ds) = if n_val > 0 {
        let (t, v) = sfnn_core::data::train_val_split(&ds, n_val)?;
        (t, Some(v))
    } else {
        (ds, None)
    };
    let cfg = TrainConfig {
        epochs,
        batch_size: 128,
        m_train: samples,
        m_eval: 500,
        base_lr: lr,
        lr_decay: 0.98,
        seed,
    };
    let outcome = train(
        &ck.spec,
        ck.params.clone(),
        &train_ds,
        val_ds.as_ref(),
        &cfg,
        TrainMode::SimplifiedMc { samples },
    )?;

    let hash = hash_of(&json!({
        "source": ck.provenance.config_hash,
        "samples": samples, "epochs": epochs, "lr": lr, "seed": seed, "n_val": n_val,
    }));
    let provenance = Provenance::new(hash.clone(), seed);
    let new_ck = Checkpoint {
        format_version: checkpoint::FORMAT_VERSION,
        kind: ModelKind::SimplifiedSfnn,
        spec: ck.spec,
        params: outcome.best_params,
        transfer: ck.transfer,
        training: Some(TrainingMeta {
            seed,
            epochs,
            config_hash: hash,
        }),
        provenance: provenance.clone(),
    };
    checkpoint::save(&new_ck, out)?;
    if let Some(m) = metrics {
        write_metrics(m, &provenance, &outcome.records, None)?;
    }
    Ok(json!({
        "provenance": provenance,
        "epochs": epochs,
        "out": out.display().to_string(),
    }))
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

pub fn eval_cmd(
    model: &Path,
    data: &DataRef,
    mode: &str,
    samples: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<Value> {
    let ck = checkpoint::load(model)?;
    let ds = data.load()?;
    ds.validate_for(&ck.spec)?;
    let stream = RngStream::new(seed);
    let fmode = match mode {
        "dnn" => ForwardMode::Dnn,
        "dnn-star" => ForwardMode::DnnStar,
        "simplified-mc" => ForwardMode::SimplifiedMc { samples, stream },
        "sfnn" => ForwardMode::SfnnPropagate { samples, stream },
        other => {
            return Err(Error::Data(format!(
                "unknown eval mode '{other}' (dnn, dnn-star, simplified-mc, sfnn)"
            )))
        }
    };
    ck.spec.check_mode(&fmode)?;

    let nll = predict_nll(&ck.spec, &ck.params, &ds.inputs, ds.targets_ref(), &fmode)?;
    let mean_nll = nll.iter().sum::<f64>() / nll.len() as f64;
    let err = ds
        .labels()
        .map(|l| error_rate(&ck.spec, &ck.params, &ds.inputs, l, &fmode))
        .transpose()?;

    let hash = hash_of(&json!({
        "source": ck.provenance.config_hash,
        "mode": mode, "samples": samples, "seed": seed,
    }));
    let provenance = Provenance::new(hash, seed);
    let mut record = json!({
        "split": "test",
        "mode": mode,
        "samples": samples,
        "n": ds.len(),
        "nll": mean_nll,
    });
    if let Some(e) = err {
        record["error_rate"] = json!(e);
    }
    if mode == "sfnn" {
        // multi-modal gains concentrate in the tail of the per-example NLLs
        let mut sorted = nll.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        record["nll_quantiles"] = json!({
            "p10": quantile(&sorted, 0.10),
            "p25": quantile(&sorted, 0.25),
            "p50": quantile(&sorted, 0.50),
            "p75": quantile(&sorted, 0.75),
            "p90": quantile(&sorted, 0.90),
        });
    }
    if let Some(path) = out {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{}", json!({ "provenance": provenance }))?;
        writeln!(w, "{record}")?;
        w.flush()?;
    }
    let mut summary = json!({ "provenance": provenance });
    summary["metrics"] = record;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

pub enum VerifyWhat {
    Theorem1,
    GammaSweep,
    GradCheck,
    McBias,
}

pub fn verify_cmd(
    what: VerifyWhat,
    n_seeds: usize,
    gamma: f64,
    base_seed: u64,
    out: Option<&Path>,
) -> Result<(Value, bool)> {
    let mut reports: Vec<CheckReport> = Vec::new();
    match what {
        VerifyWhat::Theorem1 => {
            reports.push(check_theorem1_bound(n_seeds, gamma, base_seed)?);
        }
        VerifyWhat::GammaSweep => {
            for k in 0..n_seeds {
                let seed = base_seed + k as u64;
                let (spec, params, inputs) = sample_dnn(seed, 6, &[8, 5], 48);
                match gamma_sweep(
                    &spec,
                    &params,
                    &inputs,
                    &[2.0, 10.0, 50.0, 250.0],
                    false,
                    seed,
                ) {
                    Ok(r) => reports.push(r),
                    Err(Error::DegenerateGamma { .. }) => continue,
                    Err(e) => return Err(e),
                }
            }
        }
        VerifyWhat::GradCheck => {
            for k in 0..n_seeds {
                let seed = base_seed + k as u64;
                let (spec, params, inputs) = sample_dnn(seed, 5, &[6, 4], 4);
                let y = Matrix::from_vec(4, 1, vec![0.1, -0.2, 0.3, 0.0]).unwrap();
                reports.push(grad_check(
                    &spec,
                    &params,
                    &inputs,
                    sfnn_core::network::TargetsRef::Values(&y),
                    GradCheckMode::Dnn,
                    100,
                    seed,
                    1e-5,
                )?);
                let t = match transform_theorem1(
                    &spec,
                    &params,
                    &[0],
                    &[gamma],
                    SquashKind::Sigmoid,
                    &inputs,
                    false,
                ) {
                    Ok(t) => t,
                    Err(Error::DegenerateGamma { .. }) => continue,
                    Err(e) => return Err(e),
                };
                // evaluate away from the clamp boundary that the
                // gamma-defining inputs sit on
                let fresh = Matrix::from_vec(
                    4,
                    5,
                    (0..20).map(|i| ((seed as f64 + i as f64) * 0.37).sin() * 0.8).collect(),
                )
                .unwrap();
                reports.push(grad_check(
                    &t.spec,
                    &t.params,
                    &fresh,
                    sfnn_core::network::TargetsRef::Values(&y),
                    GradCheckMode::ExactEnum,
                    60,
                    seed,
                    1e-4,
                )?);
            }
        }
        VerifyWhat::McBias => {
            for k in 0..n_seeds {
                let seed = base_seed + k as u64;
                let (spec, params, inputs) = sample_dnn(seed, 4, &[8, 4], 2);
                let t = match transform_theorem1(
                    &spec,
                    &params,
                    &[0],
                    &[gamma],
                    SquashKind::Sigmoid,
                    &inputs,
                    false,
                ) {
                    Ok(t) => t,
                    Err(Error::DegenerateGamma { .. }) => continue,
                    Err(e) => return Err(e),
                };
                let x = inputs.slice_rows(0, 1);
                reports.push(mc_bias_test(&t.spec, &t.params, &x, 100, 200, seed)?);
            }
        }
    }

    let pass = reports.iter().all(|r| r.pass);
    if let Some(path) = out {
        let mut w = BufWriter::new(File::create(path)?);
        for r in &reports {
            let line = serde_json::to_string(r)
                .map_err(|e| Error::Data(format!("serialize report: {e}")))?;
            writeln!(w, "{line}")?;
        }
        w.flush()?;
    }
    let hash = hash_of(&json!({"seeds": n_seeds, "gamma": gamma, "base_seed": base_seed}));
    let summary = json!({
        "provenance": Provenance::new(hash, base_seed),
        "checks": reports.len(),
        "passed": reports.iter().filter(|r| r.pass).count(),
        "reports": reports,
    });
    Ok((summary, pass))
}
