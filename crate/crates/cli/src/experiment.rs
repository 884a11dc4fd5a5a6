//! Shared experiment machinery: data preparation, normalization caching, and
//! the per-seed train/evaluate unit that `train` and `sweep` both run (so a
//! 1x1 sweep reproduces `train` + `attack` results bitwise).

use std::path::Path;

use sbfm_core::data::{
    load_cifar10, stratified_split, synthetic_edges, DatasetView, LabeledDataset, Normalizer,
    SplitSpec,
};
use sbfm_core::model::{build_model, evaluate, train, FusedModel, ModelConfig, TrainReport};

use crate::config::{DatasetKind, RunConfig};
use crate::CliError;

pub const NORMALIZER_SIDECAR: &str = "normalization.json";

/// Owned train/test pools for one run.
pub struct DataBundle {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

/// Loads the dataset named by the config. Synthetic corpora derive their
/// test pool from `synthetic_seed + 1` so it never overlaps the train pool.
pub fn load_data(cfg: &RunConfig) -> Result<DataBundle, CliError> {
    let bundle = match cfg.dataset {
        DatasetKind::Synthetic => {
            let train =
                synthetic_edges(cfg.synthetic_count, cfg.synthetic_size, cfg.synthetic_seed)?;
            let test = synthetic_edges(
                cfg.synthetic_test_count.max(1),
                cfg.synthetic_size,
                cfg.synthetic_seed + 1,
            )?;
            DataBundle { train, test }
        }
        DatasetKind::Cifar10 => {
            let (train, test) = load_cifar10(&cfg.data_dir)?;
            DataBundle { train, test }
        }
    };
    if bundle.train.classes() != cfg.classes {
        return Err(CliError::config(format!(
            "config says {} classes but the dataset has {}",
            cfg.classes,
            bundle.train.classes()
        )));
    }
    Ok(bundle)
}

/// Applies the per-class cap and the stratified validation split.
pub fn split_train<'a>(
    cfg: &RunConfig,
    bundle: &'a DataBundle,
) -> Result<(DatasetView<'a>, DatasetView<'a>), CliError> {
    let capped = bundle.train.cap_per_class(cfg.subset_per_class);
    let (train_v, val_v) = stratified_split(
        &capped,
        &SplitSpec {
            val_fraction: cfg.val_fraction,
            seed: cfg.split_seed,
            stratified: true,
        },
    )?;
    Ok((train_v, val_v))
}

/// The test subset used for attack sweeps (`attack_subset` cap).
pub fn attack_view<'a>(cfg: &RunConfig, bundle: &'a DataBundle) -> DatasetView<'a> {
    bundle.test.view().take(cfg.attack_subset)
}

/// Normalization constants: loaded from the sidecar next to the outputs when
/// present, otherwise fitted on the training split and cached there.
pub fn prepare_normalizer(
    out_dir: &Path,
    train_view: &DatasetView<'_>,
) -> Result<Normalizer, CliError> {
    let sidecar = out_dir.join(NORMALIZER_SIDECAR);
    if sidecar.is_file() {
        return Ok(Normalizer::load(&sidecar)?);
    }
    let norm = Normalizer::fit(train_view)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::run(format!("cannot create {}: {e}", out_dir.display())))?;
    norm.save(&sidecar)?;
    Ok(norm)
}

/// One trained model and its headline numbers.
pub struct SeedRun {
    pub seed: u64,
    pub model: FusedModel,
    pub report: TrainReport,
    pub test_acc: f64,
}

impl SeedRun {
    /// Final-epoch training accuracy (the Tr.Acc. role).
    pub fn train_acc(&self) -> f64 {
        self.report.epoch_stats.last().map_or(0.0, |e| e.train_acc)
    }

    /// Mean wall-clock seconds per epoch (the TimePE role).
    pub fn time_per_epoch(&self) -> f64 {
        let n = self.report.epoch_stats.len().max(1) as f64;
        self.report
            .epoch_stats
            .iter()
            .map(|e| e.seconds)
            .sum::<f64>()
            / n
    }
}

/// Builds, trains, and test-evaluates one model.
pub fn train_one_seed(
    cfg: &RunConfig,
    model_cfg: &ModelConfig,
    train_v: &DatasetView<'_>,
    val_v: &DatasetView<'_>,
    test_v: &DatasetView<'_>,
    norm: &Normalizer,
    seed: u64,
) -> Result<SeedRun, CliError> {
    let mut model = build_model(model_cfg, seed)?;
    let mut report = train(&mut model, train_v, val_v, norm, &cfg.train_config(seed))?;
    let test_acc = evaluate(&model, test_v, norm, cfg.batch_size)?;
    report.final_test_acc = Some(test_acc);
    Ok(SeedRun {
        seed,
        model,
        report,
        test_acc,
    })
}
