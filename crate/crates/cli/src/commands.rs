//! The three subcommands: `train`, `attack`, and `sweep`.

use std::path::Path;

use sbfm_core::attack::{attack_sweep, AttackReport};
use sbfm_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, LoadedCheckpoint};
use sbfm_core::model::FusedModel;

use crate::config::RunConfig;
use crate::experiment::{
    attack_view, load_data, prepare_normalizer, split_train, train_one_seed, DataBundle,
};
use crate::report::{
    mean_std, write_attack_csv, write_sweep_csv, write_train_metrics, write_train_summary,
    SummaryRow, SweepRow, SweepStatus,
};
use crate::svg::accuracy_curves;
use crate::CliError;

/// Adversarial evaluation point used by the sweep grid (Tables at ε = 8/255).
pub const SWEEP_EPSILON: f64 = 8.0 / 255.0;

/// Trains one model per seed; emits per-seed metrics, checkpoints, the
/// normalization sidecar, and an aggregate summary.
pub fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.seeds.is_empty() {
        return Err(CliError::config("seed list must be nonempty"));
    }
    // load and validate inputs before creating any output
    let bundle = load_data(cfg)?;
    let model_cfg = cfg.model_config();
    model_cfg.validate()?;
    let (train_v, val_v) = split_train(cfg, &bundle)?;
    let norm = prepare_normalizer(&cfg.out_dir, &train_v)?;
    let test_v = bundle.test.view();

    let mut rows = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let run = train_one_seed(cfg, &model_cfg, &train_v, &val_v, &test_v, &norm, seed)?;
        write_train_metrics(
            &cfg.out_dir.join(format!("train_metrics_seed{seed}.csv")),
            seed,
            &run.report,
        )?;
        save_checkpoint(
            &run.model,
            &CheckpointMeta {
                epoch: run.report.best_epoch,
                seed,
            },
            None,
            &cfg.out_dir.join(format!("model_seed{seed}.ckpt")),
        )?;
        println!(
            "seed {seed}: train acc {:.4}, val acc {:.4}, test acc {:.4}",
            run.train_acc(),
            run.report.best_val_acc,
            run.test_acc
        );
        rows.push(SummaryRow {
            seed,
            train_acc: run.train_acc(),
            test_acc: run.test_acc,
            time_per_epoch: run.time_per_epoch(),
        });
    }
    write_train_summary(&cfg.out_dir.join("train_summary.csv"), &rows)?;
    let (te_mean, te_std) = mean_std(&rows.iter().map(|r| r.test_acc).collect::<Vec<_>>());
    println!(
        "{} seeds done: test acc {:.4} +/- {:.4}",
        rows.len(),
        te_mean,
        te_std
    );
    Ok(())
}

fn checkpoint_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn load_for_attack(cfg: &RunConfig, path: &Path) -> Result<LoadedCheckpoint, CliError> {
    let loaded = load_checkpoint(path).map_err(|e| CliError::checkpoint(e.to_string()))?;
    let backbone = &loaded.model.config().backbone;
    if backbone.input_shape != cfg.input_shape() || backbone.classes != cfg.classes {
        return Err(CliError::checkpoint(format!(
            "checkpoint {} was trained for input {:?} with {} classes, dataset provides {:?} with {}",
            path.display(),
            backbone.input_shape,
            backbone.classes,
            cfg.input_shape(),
            cfg.classes,
        )));
    }
    Ok(loaded)
}

/// Evaluates checkpoints under FGSM at every configured ε; emits the attack
/// CSV and the accuracy-vs-ε SVG.
pub fn cmd_attack(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.checkpoints.is_empty() {
        return Err(CliError::config(
            "attack needs checkpoints: set `checkpoints = ...` in the config or pass --checkpoint",
        ));
    }
    let bundle = load_data(cfg)?;
    let (train_v, _) = split_train(cfg, &bundle)?;
    let norm = prepare_normalizer(&cfg.out_dir, &train_v)?;
    let test_v = attack_view(cfg, &bundle);

    let mut merged = AttackReport::default();
    let mut series = Vec::new();
    for path in &cfg.checkpoints {
        let loaded = load_for_attack(cfg, path)?;
        let id = checkpoint_id(path);
        let report = attack_sweep(
            &loaded.model,
            &id,
            &norm,
            &test_v,
            &cfg.epsilons,
            cfg.batch_size,
        )?;
        let curve: Vec<(f64, f64)> = report
            .records
            .iter()
            .map(|r| (r.epsilon, r.accuracy))
            .collect();
        for rec in &report.records {
            println!(
                "{}: eps {:.6} -> accuracy {:.4} ({} samples)",
                rec.model_id, rec.epsilon, rec.accuracy, rec.samples
            );
        }
        series.push((id, curve));
        merged.records.extend(report.records);
    }
    write_attack_csv(&cfg.out_dir.join("attack.csv"), &merged)?;
    crate::report::write_atomic(
        &cfg.out_dir.join("attack_curves.svg"),
        accuracy_curves(&series).as_bytes(),
    )?;
    Ok(())
}

/// Adversarial accuracy of one trained model at [`SWEEP_EPSILON`].
fn cell_adv_accuracy(
    cfg: &RunConfig,
    model: &FusedModel,
    norm: &sbfm_core::data::Normalizer,
    bundle: &DataBundle,
) -> Result<f64, CliError> {
    let test_v = attack_view(cfg, bundle);
    let report = attack_sweep(
        model,
        "cell",
        norm,
        &test_v,
        &[SWEEP_EPSILON],
        cfg.batch_size,
    )?;
    Ok(report.records[0].accuracy)
}

/// Trains one fused model per (l, t) cell per seed and emits the grid CSV.
/// Cell failures are recorded and skipped; any failure makes the final exit
/// status nonzero.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.sweep_l.is_empty() || cfg.sweep_t.is_empty() {
        return Err(CliError::config("sweep grid must be nonempty"));
    }
    if cfg.sweep_t.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(CliError::config("sweep t values must lie in [0,1]"));
    }
    let bundle = load_data(cfg)?;
    let (train_v, val_v) = split_train(cfg, &bundle)?;
    let norm = prepare_normalizer(&cfg.out_dir, &train_v)?;
    let test_v = bundle.test.view();

    let mut rows = Vec::new();
    let mut failures = 0usize;
    for &l in &cfg.sweep_l {
        for &t in &cfg.sweep_t {
            let cell = (|| -> Result<SweepStatus, CliError> {
                let model_cfg = cfg.model_config_for(Some((l, t)));
                model_cfg.validate()?;
                let mut adv = Vec::new();
                let mut tr = Vec::new();
                let mut te = Vec::new();
                let mut tpe = Vec::new();
                for &seed in &cfg.seeds {
                    let run =
                        train_one_seed(cfg, &model_cfg, &train_v, &val_v, &test_v, &norm, seed)?;
                    adv.push(cell_adv_accuracy(cfg, &run.model, &norm, &bundle)?);
                    tr.push(run.train_acc());
                    te.push(run.test_acc);
                    tpe.push(run.time_per_epoch());
                }
                Ok(SweepStatus::Ok {
                    adv_acc: mean_std(&adv).0,
                    train_acc: mean_std(&tr).0,
                    test_acc: mean_std(&te).0,
                    time_per_epoch: mean_std(&tpe).0,
                })
            })();
            let status = match cell {
                Ok(status) => {
                    if let SweepStatus::Ok { adv_acc, .. } = &status {
                        println!("cell l={l} t={t}: adversarial accuracy {adv_acc:.4}");
                    }
                    status
                }
                Err(e) => {
                    failures += 1;
                    eprintln!("cell l={l} t={t} FAILED: {}", e.message);
                    SweepStatus::Failed(e.message)
                }
            };
            rows.push(SweepRow { l, t, status });
        }
    }
    write_sweep_csv(&cfg.out_dir.join("sweep.csv"), &rows)?;
    if failures > 0 {
        return Err(CliError::run(format!("{failures} sweep cell(s) failed")));
    }
    Ok(())
}
