//! Adapter spectra, orthogonality traces and toy evaluation metrics.

use std::io::Write;

use serde::Serialize;

use crate::adapters::LinearAdapter;
use crate::diffusion::{self, Condition, Denoiser, Point, ToyDataset, TraceRow, CONCEPT_CONTEXT};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// Threshold used for every reported effective rank.
pub const RANK_FRACTION: f64 = 0.95;

/// Smallest sample count per condition accepted by [`evaluate`].
pub const MIN_SAMPLES: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumReport {
    pub layer: String,
    /// Singular values of `B`, descending.
    pub singular_values: Vec<f64>,
    pub singular_values_a: Option<Vec<f64>>,
    pub effective_rank: usize,
    pub rank: usize,
}

/// Singular spectrum of the trainable `B` and its effective rank.
/// An all-zero `B` yields [`Error::UndefinedRank`].
pub fn spectrum(layer: &str, adapter: &LinearAdapter, with_a: bool) -> Result<SpectrumReport> {
    let mut report = spectrum_or_zero_rank(layer, adapter, with_a)?;
    report.effective_rank = linalg::effective_rank(&report.singular_values, RANK_FRACTION)?;
    Ok(report)
}

/// Like [`spectrum`], but an all-zero `B` is reported as rank 0.
pub fn spectrum_or_zero_rank(layer: &str, adapter: &LinearAdapter, with_a: bool) -> Result<SpectrumReport> {
    let s = linalg::svd(&adapter.b.value)?.s;
    let effective_rank = match linalg::effective_rank(&s, RANK_FRACTION) {
        Ok(k) => k,
        Err(Error::UndefinedRank) => 0,
        Err(e) => return Err(e),
    };
    let singular_values_a = if with_a {
        Some(linalg::svd(&adapter.a.value)?.s)
    } else {
        None
    };
    Ok(SpectrumReport {
        layer: layer.to_string(),
        singular_values: s,
        singular_values_a,
        effective_rank,
        rank: adapter.rank(),
    })
}

/// Spectra of every adapted layer of `denoiser`, zero `B` reported as rank 0.
pub fn denoiser_spectra(denoiser: &Denoiser, with_a: bool) -> Result<Vec<SpectrumReport>> {
    denoiser
        .adapters()
        .into_iter()
        .map(|(name, ad)| spectrum_or_zero_rank(name, ad, with_a))
        .collect()
}

/// Anything that can draw samples for a batch of conditions, chain `i`
/// seeded by stream `i`.
pub trait ConditionalSampler {
    fn sample_conditions(&self, conds: &[Condition], seed: u64) -> Result<Vec<Point>>;
}

impl ConditionalSampler for Denoiser {
    fn sample_conditions(&self, conds: &[Condition], seed: u64) -> Result<Vec<Point>> {
        diffusion::sample_batch(self, conds, seed, None)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextAlignment {
    pub context: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `‖Σ̂ − Σ_concept‖_F` for samples of `V* + c₀`.
    pub concept_fidelity: f64,
    /// Mean over `k ≥ 1` of `‖mean(V* + c_k samples) − μ_k‖`.
    pub context_alignment: f64,
    pub per_context: Vec<ContextAlignment>,
    pub n_per_condition: usize,
}

/// Unbiased 2 × 2 sample covariance.
pub fn sample_covariance(points: &[Point]) -> Result<Matrix> {
    if points.len() < 2 {
        return Err(Error::domain("covariance needs at least two points"));
    }
    let mean = sample_mean(points);
    let mut c = Matrix::zeros(2, 2);
    for p in points {
        let d = [p[0] - mean[0], p[1] - mean[1]];
        for i in 0..2 {
            for j in 0..2 {
                c.set(i, j, c.get(i, j) + d[i] * d[j]);
            }
        }
    }
    Ok(c.scale(1.0 / (points.len() - 1) as f64))
}

pub fn sample_mean(points: &[Point]) -> Point {
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(x, y), p| (x + p[0], y + p[1]));
    [sx / n, sy / n]
}

/// Concept fidelity and context alignment from `n` samples per condition
/// `V* + c_k`, `k = 0..K`.
pub fn evaluate<S: ConditionalSampler + ?Sized>(
    sampler: &S,
    dataset: &ToyDataset,
    n: usize,
    seed: u64,
) -> Result<EvalReport> {
    if n < MIN_SAMPLES {
        return Err(Error::domain(format!(
            "evaluation needs at least {MIN_SAMPLES} samples per condition, got {n}"
        )));
    }
    let modes = dataset.config.modes;
    let conds: Vec<Condition> = (0..modes)
        .flat_map(|k| std::iter::repeat_n(Condition::concept(k), n))
        .collect();
    let points = sampler.sample_conditions(&conds, seed)?;
    if points.len() != conds.len() {
        return Err(Error::domain("sampler returned the wrong number of points"));
    }
    let cloud = |k: usize| &points[k * n..(k + 1) * n];
    let cov = sample_covariance(cloud(CONCEPT_CONTEXT))?;
    let concept_fidelity = cov.sub(&dataset.concept_covariance()).frobenius_norm();
    let per_context: Vec<ContextAlignment> = (0..modes)
        .filter(|&k| k != CONCEPT_CONTEXT)
        .map(|k| {
            let m = sample_mean(cloud(k));
            let mu = dataset.mode_mean(k);
            ContextAlignment {
                context: k,
                distance: ((m[0] - mu[0]).powi(2) + (m[1] - mu[1]).powi(2)).sqrt(),
            }
        })
        .collect();
    let context_alignment = if per_context.is_empty() {
        0.0
    } else {
        per_context.iter().map(|c| c.distance).sum::<f64>() / per_context.len() as f64
    };
    Ok(EvalReport {
        concept_fidelity,
        context_alignment,
        per_context,
        n_per_condition: n,
    })
}

#[derive(Serialize)]
struct SpectrumRow<'a> {
    layer: &'a str,
    index: usize,
    sigma: f64,
}

pub fn write_spectrum_csv<W: Write>(out: W, reports: &[SpectrumReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        for (index, &sigma) in r.singular_values.iter().enumerate() {
            w.serialize(SpectrumRow {
                layer: &r.layer,
                index,
                sigma,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct RankRow<'a> {
    layer: &'a str,
    effective_rank: usize,
    rank: usize,
}

pub fn write_rank_csv<W: Write>(out: W, reports: &[SpectrumReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(RankRow {
            layer: &r.layer,
            effective_rank: r.effective_rank,
            rank: r.rank,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct TraceCsvRow<'a> {
    step: usize,
    layer: &'a str,
    #[serde(rename = "err_A")]
    err_a: f64,
    #[serde(rename = "err_B")]
    err_b: f64,
}

pub fn write_trace_csv<W: Write>(out: W, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(TraceCsvRow {
            step: r.step,
            layer: &r.layer,
            err_a: r.err_a,
            err_b: r.err_b,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct EvalRow<'a> {
    metric: &'a str,
    condition: String,
    value: f64,
}

pub fn write_eval_csv<W: Write>(out: W, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.serialize(EvalRow {
        metric: "concept_fidelity",
        condition: Condition::concept(CONCEPT_CONTEXT).label(),
        value: report.concept_fidelity,
    })?;
    w.serialize(EvalRow {
        metric: "context_alignment",
        condition: "mean".into(),
        value: report.context_alignment,
    })?;
    for c in &report.per_context {
        w.serialize(EvalRow {
            metric: "context_distance",
            condition: Condition::concept(c.context).label(),
            value: c.distance,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SampleRow {
    x: f64,
    y: f64,
    condition_token: String,
}

pub fn write_samples_csv<W: Write>(out: W, points: &[Point], conds: &[Condition]) -> Result<()> {
    if points.len() != conds.len() {
        return Err(Error::domain("one condition per sample required"));
    }
    let mut w = csv::Writer::from_writer(out);
    for (p, c) in points.iter().zip(conds) {
        w.serialize(SampleRow {
            x: p[0],
            y: p[1],
            condition_token: c.label(),
        })?;
    }
    w.flush()?;
    Ok(())
}
