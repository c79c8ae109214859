//! Experiment configuration: one strict JSON document, validated up front.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterKind, InitVariant};
use crate::diffusion::{
    AdapterSpec, DatasetConfig, DenoiserConfig, FinetuneConfig, NoiseSchedule, PretrainConfig, TimestepSampler,
};
use crate::error::{Error, Result};
use crate::gradnet::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub horizon: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            horizon: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.horizon, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankScheduleConfig {
    pub r_min: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub kind: AdapterKind,
    pub r: usize,
    #[serde(default)]
    pub schedule: Option<RankScheduleConfig>,
    #[serde(default)]
    pub init: Option<InitVariant>,
    #[serde(default)]
    pub lambda_reg: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            kind: AdapterKind::TLora,
            r: 32,
            schedule: Some(RankScheduleConfig { r_min: 16 }),
            init: None,
            lambda_reg: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneBlock {
    /// Defaults to 800 for orthogonal kinds and 500 otherwise.
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for FinetuneBlock {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            steps: None,
            batch_size: 1,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_per_condition: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_per_condition: 256 }
    }
}

/// Optional overrides for side outputs; by default they sit next to `--out`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub loss_csv: Option<String>,
    pub metrics_csv: Option<String>,
    pub trace_csv: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub pretrain: PretrainConfig,
    pub adapter: AdapterConfig,
    pub sampler: TimestepSampler,
    pub finetune: FinetuneBlock,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetConfig::default(),
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserConfig::default(),
            pretrain: PretrainConfig::default(),
            adapter: AdapterConfig::default(),
            sampler: TimestepSampler::Uniform,
            finetune: FinetuneBlock::default(),
            eval: EvalConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

fn require(ok: bool, field: &str, message: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(field, message))
    }
}

fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Checks every block and returns warnings for settings that are
    /// accepted but have no effect.
    pub fn validate(&self) -> Result<Vec<String>> {
        let d = &self.dataset;
        require(d.modes >= 2, "dataset.modes", "need at least two modes")?;
        require(positive(d.mode_std), "dataset.mode_std", "must be positive")?;
        require(
            d.concept_cov.iter().all(|&v| positive(v)),
            "dataset.concept_cov",
            "entries must be positive",
        )?;
        require(
            (1..=8).contains(&d.concept_size),
            "dataset.concept_size",
            format!("must lie in 1..=8, got {}", d.concept_size),
        )?;

        let s = &self.schedule;
        require(s.horizon >= 1, "schedule.horizon", "must be positive")?;
        require(
            positive(s.beta_start) && s.beta_start <= s.beta_end && s.beta_end < 1.0,
            "schedule.beta_start",
            format!(
                "need 0 < beta_start <= beta_end < 1, got [{}, {}]",
                s.beta_start, s.beta_end
            ),
        )?;

        let n = &self.denoiser;
        require(n.hidden_width >= 1, "denoiser.hidden_width", "must be positive")?;
        require(n.hidden_layers >= 1, "denoiser.hidden_layers", "must be positive")?;
        require(
            n.time_dim >= 2 && n.time_dim.is_multiple_of(2),
            "denoiser.time_dim",
            "must be a positive even number",
        )?;
        require(n.cond_dim >= 1, "denoiser.cond_dim", "must be positive")?;
        require(positive(n.data_scale), "denoiser.data_scale", "must be positive")?;
        require(positive(n.concept_std), "denoiser.concept_std", "must be positive")?;

        let p = &self.pretrain;
        require(p.batch_size >= 1, "pretrain.batch_size", "must be positive")?;
        require(positive(p.lr), "pretrain.lr", "must be positive")?;
        require(
            (0.0..=1.0).contains(&p.distractor_prob),
            "pretrain.distractor_prob",
            "must lie in [0, 1]",
        )?;
        require(
            p.distractor_std >= 0.0 && p.distractor_std.is_finite(),
            "pretrain.distractor_std",
            "must be non-negative",
        )?;

        let a = &self.adapter;
        let mut warnings = Vec::new();
        require(
            a.r >= 1 && a.r <= n.hidden_width,
            "adapter.r",
            format!("must lie in 1..={}, got {}", n.hidden_width, a.r),
        )?;
        if a.kind.is_masked() {
            let sched = a.schedule.ok_or_else(|| {
                Error::config(
                    "adapter.schedule",
                    format!("{} requires a schedule block", a.kind.as_str()),
                )
            })?;
            require(
                sched.r_min >= 1 && sched.r_min <= a.r,
                "adapter.schedule.r_min",
                format!("must lie in 1..=r (r = {}), got {}", a.r, sched.r_min),
            )?;
        } else if a.schedule.is_some() {
            warnings.push(format!("adapter.schedule is ignored for kind {}", a.kind.as_str()));
        }
        if a.init.is_some() && !a.kind.is_orthogonal() {
            warnings.push(format!("adapter.init is ignored for kind {}", a.kind.as_str()));
        }
        require(
            a.lambda_reg >= 0.0 && a.lambda_reg.is_finite(),
            "adapter.lambda_reg",
            "must be non-negative",
        )?;

        if let TimestepSampler::Interval { lo, hi } = self.sampler {
            require(
                lo < hi && hi <= s.horizon,
                "sampler",
                format!("interval needs 0 <= lo < hi <= {}, got [{lo}, {hi}]", s.horizon),
            )?;
        }

        let f = &self.finetune;
        require(f.batch_size >= 1, "finetune.batch_size", "must be positive")?;
        require(positive(f.lr), "finetune.lr", "must be positive")?;
        require((0.0..1.0).contains(&f.beta1), "finetune.beta1", "must lie in [0, 1)")?;
        require((0.0..1.0).contains(&f.beta2), "finetune.beta2", "must lie in [0, 1)")?;
        require(positive(f.eps), "finetune.eps", "must be positive")?;
        require(
            f.weight_decay >= 0.0 && f.weight_decay.is_finite(),
            "finetune.weight_decay",
            "must be non-negative",
        )?;

        require(
            self.eval.n_per_condition >= crate::analysis::MIN_SAMPLES,
            "eval.n_per_condition",
            format!("must be at least {}", crate::analysis::MIN_SAMPLES),
        )?;
        Ok(warnings)
    }

    pub fn adapter_spec(&self) -> AdapterSpec {
        let a = &self.adapter;
        AdapterSpec {
            kind: a.kind,
            r: a.r,
            r_min: if a.kind.is_masked() {
                a.schedule.map(|s| s.r_min)
            } else {
                None
            },
            variant: if a.kind.is_orthogonal() { a.init } else { None },
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        let spec = self.adapter_spec();
        let mut cfg = FinetuneConfig::for_kind(spec.kind, spec.r, spec.r_min);
        cfg.adapter = spec;
        if let Some(steps) = self.finetune.steps {
            cfg.steps = steps;
        }
        let f = &self.finetune;
        cfg.batch_size = f.batch_size;
        cfg.adam = AdamConfig {
            lr: f.lr,
            beta1: f.beta1,
            beta2: f.beta2,
            eps: f.eps,
            weight_decay: f.weight_decay,
        };
        cfg.sampler = self.sampler;
        cfg.lambda_reg = self.adapter.lambda_reg;
        cfg.record_trace = true;
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field_of(err: Error) -> String {
        match err {
            Error::Config { field, .. } => field,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_document_is_the_default() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert!(cfg.validate().unwrap().is_empty());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"sede": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"adapter": {"kind": "t_lora", "r": 4, "rmin": 2}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"sampler": {"mode": "interval", "lo": 1, "hi": 2, "x": 0}}"#).is_err());
    }

    #[test]
    fn r_min_above_r_names_the_field() {
        let cfg = ExperimentConfig::from_json(r#"{"adapter": {"kind": "t_lora", "r": 8, "schedule": {"r_min": 9}}}"#)
            .unwrap();
        assert_eq!(field_of(cfg.validate().unwrap_err()), "adapter.schedule.r_min");
    }

    #[test]
    fn masked_kind_without_schedule() {
        let cfg = ExperimentConfig::from_json(r#"{"adapter": {"kind": "vanilla_t_lora", "r": 8}}"#).unwrap();
        assert_eq!(field_of(cfg.validate().unwrap_err()), "adapter.schedule");
    }

    #[test]
    fn plain_lora_schedule_is_ignored_with_warning() {
        let cfg =
            ExperimentConfig::from_json(r#"{"adapter": {"kind": "plain_lora", "r": 8, "schedule": {"r_min": 2}}}"#)
                .unwrap();
        let warnings = cfg.validate().unwrap();
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("adapter.schedule"));
        assert_eq!(cfg.adapter_spec().r_min, None);
    }

    #[test]
    fn interval_and_sizes_are_checked() {
        let bad = [
            (r#"{"sampler": {"mode": "interval", "lo": 900, "hi": 800}}"#, "sampler"),
            (r#"{"sampler": {"mode": "interval", "lo": 0, "hi": 1001}}"#, "sampler"),
            (
                r#"{"dataset": {"modes": 8, "mode_std": 0.05, "concept_cov": [0.01, 0.0004], "concept_size": 9}}"#,
                "dataset.concept_size",
            ),
            (r#"{"adapter": {"kind": "plain_lora", "r": 65}}"#, "adapter.r"),
            (r#"{"eval": {"n_per_condition": 10}}"#, "eval.n_per_condition"),
            (r#"{"finetune": {"lr": 0.0}}"#, "finetune.lr"),
        ];
        for (json, field) in bad {
            let cfg = ExperimentConfig::from_json(json).unwrap();
            assert_eq!(field_of(cfg.validate().unwrap_err()), field, "{json}");
        }
    }

    #[test]
    fn finetune_steps_follow_kind() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.finetune_config().steps, 800);
        cfg.adapter = AdapterConfig {
            kind: AdapterKind::PlainLora,
            r: 32,
            schedule: None,
            init: None,
            lambda_reg: 0.0,
        };
        assert_eq!(cfg.finetune_config().steps, 500);
        cfg.finetune.steps = Some(7);
        assert_eq!(cfg.finetune_config().steps, 7);
    }
}
