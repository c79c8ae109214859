//! File-level pipelines behind each CLI command.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::adapters::{AdapterKind, InitVariant, LinearAdapter, MaskSchedule};
use crate::analysis::{self, EvalReport, SpectrumReport};
use crate::checkpoint::{self, Checkpoint, ModelMeta};
use crate::config::ExperimentConfig;
use crate::diffusion::{self, derive_seed, Condition, Denoiser, FinetuneReport, ToyDataset};
use crate::error::{Error, Result};
use crate::gradnet::{self, Activation, GradCheckReport, Layer, Linear, Mlp};
use crate::linalg::{self, Matrix};

const TAG_INIT: u64 = 10;
const TAG_PRETRAIN: u64 = 11;
const TAG_DATASET: u64 = 12;
const TAG_FINETUNE: u64 = 13;

/// `dir/stem.<suffix>.csv` next to `path`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}.csv"))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn dataset_for(cfg: &ExperimentConfig) -> Result<(ToyDataset, u64)> {
    let seed = derive_seed(cfg.seed, TAG_DATASET);
    Ok((ToyDataset::new(cfg.dataset.clone(), seed)?, seed))
}

pub fn dataset_from_meta(meta: &ModelMeta) -> Result<ToyDataset> {
    ToyDataset::new(meta.dataset.clone(), meta.dataset_seed)
}

fn meta_for(cfg: &ExperimentConfig, stage: &str, dataset_seed: u64) -> ModelMeta {
    ModelMeta {
        stage: stage.into(),
        seed: cfg.seed,
        contexts: cfg.dataset.modes,
        denoiser: cfg.denoiser.clone(),
        schedule: cfg.schedule.clone(),
        dataset: cfg.dataset.clone(),
        dataset_seed,
        adapters: Vec::new(),
    }
}

pub struct PretrainOutcome {
    pub denoiser: Denoiser,
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
    pub loss_csv: PathBuf,
}

/// Trains a base model in memory.
pub fn pretrain_model(cfg: &ExperimentConfig) -> Result<(Denoiser, Vec<f64>, ModelMeta)> {
    cfg.validate()?;
    let (dataset, dataset_seed) = dataset_for(cfg)?;
    let mut denoiser = Denoiser::new(
        cfg.denoiser.clone(),
        cfg.schedule.build()?,
        cfg.dataset.modes,
        derive_seed(cfg.seed, TAG_INIT),
    )?;
    let losses = diffusion::pretrain(
        &mut denoiser,
        &dataset,
        &cfg.pretrain,
        derive_seed(cfg.seed, TAG_PRETRAIN),
    )?;
    Ok((denoiser, losses, meta_for(cfg, "pretrain", dataset_seed)))
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

/// Pretrains and writes the checkpoint plus a `step,loss` CSV.
pub fn run_pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let (denoiser, losses, meta) = pretrain_model(cfg)?;
    let checkpoint = checkpoint::from_denoiser(&denoiser, meta)?;
    checkpoint.save(out)?;
    let loss_csv = cfg
        .output
        .loss_csv
        .as_ref()
        .map(PathBuf::from)
        .unwrap_or_else(|| sibling(out, "loss"));
    let mut w = csv::Writer::from_writer(create(&loss_csv)?);
    for (i, &loss) in losses.iter().enumerate() {
        w.serialize(LossRow { step: i + 1, loss })?;
    }
    w.flush()?;
    Ok(PretrainOutcome {
        denoiser,
        checkpoint,
        losses,
        loss_csv,
    })
}

pub struct FinetuneOutcome {
    pub denoiser: Denoiser,
    pub checkpoint: Checkpoint,
    pub report: FinetuneReport,
    pub dataset: ToyDataset,
    pub metrics_csv: PathBuf,
    pub trace_csv: PathBuf,
}

fn check_base_matches(cfg: &ExperimentConfig, meta: &ModelMeta) -> Result<()> {
    if meta.denoiser != cfg.denoiser {
        return Err(Error::config("denoiser", "differs from the base checkpoint"));
    }
    if meta.schedule != cfg.schedule {
        return Err(Error::config("schedule", "differs from the base checkpoint"));
    }
    if meta.contexts != cfg.dataset.modes {
        return Err(Error::config("dataset.modes", "differs from the base checkpoint"));
    }
    if !meta.adapters.is_empty() {
        return Err(Error::domain("base checkpoint already carries adapters"));
    }
    Ok(())
}

/// Fine-tunes a base model in memory on the concept set defined by `cfg`.
pub fn finetune_model(base: &Denoiser, cfg: &ExperimentConfig) -> Result<(Denoiser, FinetuneReport, ToyDataset, u64)> {
    cfg.validate()?;
    let (dataset, dataset_seed) = dataset_for(cfg)?;
    let mut denoiser = base.clone();
    let report = diffusion::finetune(
        &mut denoiser,
        &dataset,
        &cfg.finetune_config(),
        derive_seed(cfg.seed, TAG_FINETUNE),
    )?;
    Ok((denoiser, report, dataset, dataset_seed))
}

#[derive(Serialize)]
struct MetricsRow {
    step: usize,
    loss: f64,
    #[serde(rename = "err_A")]
    err_a: f64,
    #[serde(rename = "err_B")]
    err_b: f64,
    #[serde(rename = "eff_rank_B")]
    eff_rank_b: usize,
    rank_t: usize,
}

/// Per-step metrics rows: orthogonality errors are the maximum over layers
/// and the effective rank of `B` is the minimum over layers.
pub fn write_metrics_csv<W: std::io::Write>(out: W, report: &FinetuneReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for rec in &report.steps {
        let rows = report.trace.iter().filter(|r| r.step == rec.step);
        let (err_a, err_b, rank) = rows.fold((0.0f64, 0.0f64, usize::MAX), |(a, b, k), r| {
            (a.max(r.err_a), b.max(r.err_b), k.min(r.eff_rank_b))
        });
        w.serialize(MetricsRow {
            step: rec.step,
            loss: rec.loss,
            err_a,
            err_b,
            eff_rank_b: if rank == usize::MAX { 0 } else { rank },
            rank_t: rec.rank_t,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Fine-tunes the checkpoint at `base` and writes the adapted checkpoint,
/// the metrics CSV and the orthogonality trace CSV.
pub fn run_finetune(base: &Path, cfg: &ExperimentConfig, out: &Path) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let base_ckpt = Checkpoint::load(base)?;
    check_base_matches(cfg, &checkpoint::model_meta(&base_ckpt)?)?;
    let base_model = checkpoint::to_denoiser(&base_ckpt)?;
    let (denoiser, report, dataset, dataset_seed) = finetune_model(&base_model, cfg)?;
    let checkpoint = checkpoint::from_denoiser(&denoiser, meta_for(cfg, "finetune", dataset_seed))?;
    checkpoint.save(out)?;
    let metrics_csv = cfg
        .output
        .metrics_csv
        .as_ref()
        .map(PathBuf::from)
        .unwrap_or_else(|| sibling(out, "metrics"));
    let trace_csv = cfg
        .output
        .trace_csv
        .as_ref()
        .map(PathBuf::from)
        .unwrap_or_else(|| sibling(out, "trace"));
    write_metrics_csv(create(&metrics_csv)?, &report)?;
    analysis::write_trace_csv(create(&trace_csv)?, &report.trace)?;
    Ok(FinetuneOutcome {
        denoiser,
        checkpoint,
        report,
        dataset,
        metrics_csv,
        trace_csv,
    })
}

/// Samples `n` points per condition and writes `x,y,condition_token` rows.
pub fn run_sample(
    ckpt: &Path,
    conds: &[Condition],
    n: usize,
    seed: u64,
    mask_timestep: Option<usize>,
    out: &Path,
) -> Result<Vec<diffusion::Point>> {
    let denoiser = checkpoint::to_denoiser(&Checkpoint::load(ckpt)?)?;
    let all: Vec<Condition> = conds.iter().flat_map(|&c| std::iter::repeat_n(c, n)).collect();
    let points = diffusion::sample_batch(&denoiser, &all, seed, mask_timestep)?;
    analysis::write_samples_csv(create(out)?, &points, &all)?;
    Ok(points)
}

/// Writes the per-layer `B` spectra and effective ranks.
pub fn run_analyze(ckpt: &Path, with_a: bool, out: &Path, ranks_out: &Path) -> Result<Vec<SpectrumReport>> {
    let denoiser = checkpoint::to_denoiser(&Checkpoint::load(ckpt)?)?;
    let reports = analysis::denoiser_spectra(&denoiser, with_a)?;
    analysis::write_spectrum_csv(create(out)?, &reports)?;
    analysis::write_rank_csv(create(ranks_out)?, &reports)?;
    Ok(reports)
}

pub fn run_evaluate(ckpt: &Path, n: usize, seed: u64, out: &Path) -> Result<EvalReport> {
    let ck = Checkpoint::load(ckpt)?;
    let dataset = dataset_from_meta(&checkpoint::model_meta(&ck)?)?;
    let denoiser = checkpoint::to_denoiser(&ck)?;
    let report = analysis::evaluate(&denoiser, &dataset, n, seed)?;
    analysis::write_eval_csv(create(out)?, &report)?;
    Ok(report)
}

/// Gradient-check fixture: a three-layer network whose middle layer is an
/// adapter of `kind`, with masks evaluated per column.
pub fn gradcheck_fixture(
    kind: AdapterKind,
    variant: Option<InitVariant>,
    seed: u64,
) -> Result<(Mlp, Matrix, Vec<usize>, Matrix)> {
    let (d_in, width, d_out, batch, r, horizon) = (5, 6, 3, 4, 4, 100);
    let w = |n, m, tag| linalg::random_gaussian(n, m, 1.0 / m as f64, derive_seed(seed, tag));
    let schedule = kind.is_masked().then(|| MaskSchedule::new(r, 1, horizon)).transpose()?;
    let mut adapter = LinearAdapter::build(w(width, width, 1)?, kind, r, schedule, variant, derive_seed(seed, 2))?;
    let nudge = |m: &mut Matrix, tag| -> Result<()> {
        m.axpy(
            1.0,
            &linalg::random_gaussian(m.rows(), m.cols(), 0.04, derive_seed(seed, tag))?,
        );
        Ok(())
    };
    nudge(&mut adapter.a.value, 3)?;
    nudge(&mut adapter.b.value, 4)?;
    if let Some(s) = adapter.s.as_mut() {
        nudge(&mut s.value, 5)?;
    }
    let mut net = Mlp::new(vec![
        Layer {
            name: "l0".into(),
            linear: Linear::dense(
                w(width, d_in, 6)?,
                linalg::random_gaussian(width, 1, 0.01, derive_seed(seed, 7))?,
            ),
            activation: Activation::Silu,
        },
        Layer {
            name: "l1".into(),
            linear: Linear::Adapted {
                adapter: Box::new(adapter),
                bias: gradnet::Param::trainable(linalg::random_gaussian(width, 1, 0.01, derive_seed(seed, 8))?),
            },
            activation: Activation::Silu,
        },
        Layer {
            name: "l2".into(),
            linear: Linear::dense(w(d_out, width, 9)?, Matrix::zeros(d_out, 1)),
            activation: Activation::Identity,
        },
    ]);
    net.set_trainable(true);
    let x = linalg::random_gaussian(d_in, batch, 1.0, derive_seed(seed, 10))?;
    let target = linalg::random_gaussian(d_out, batch, 1.0, derive_seed(seed, 11))?;
    let ts = vec![0, 37, 71, horizon];
    Ok((net, x, ts, target))
}

#[derive(Clone, Debug)]
pub struct GradCheckRun {
    pub kind: AdapterKind,
    pub lambda_reg: f64,
    pub report: GradCheckReport,
}

/// Finite-difference check of every parameter for each requested kind.
pub fn run_gradcheck(kinds: &[AdapterKind], lambda_reg: f64, seed: u64) -> Result<Vec<GradCheckRun>> {
    kinds
        .iter()
        .map(|&kind| {
            let (net, x, ts, target) = gradcheck_fixture(kind, None, seed)?;
            let report = gradnet::gradient_check(&net, &x, &ts, &target, lambda_reg, 1e-5)?;
            Ok(GradCheckRun {
                kind,
                lambda_reg,
                report,
            })
        })
        .collect()
}
