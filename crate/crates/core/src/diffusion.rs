//! Toy conditional DDPM on 2-D points.
//!
//! The prior is a ring of isotropic Gaussian modes, one per context token.
//! A handful of concept points drawn from an elongated Gaussian next to mode
//! `c₀` play the role of the personalization images; they are bound to a
//! fresh token `V*` whose embedding is added to the context embedding.
//!
//! The denoiser is an MLP over `[z_t; time embedding; condition embedding]`
//! whose three hidden `width × width` layers are wrapped in
//! [`LinearAdapter`]s for fine-tuning. Sampling is DDPM ancestral sampling in
//! which adapter masks follow the sampler's current timestep.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterKind, InitVariant, LinearAdapter, MaskSchedule};
use crate::error::{Error, Result};
use crate::gradnet::{Activation, AdamConfig, AdamState, Layer, Linear, Mlp, Param};
use crate::linalg::{self, Matrix};

pub type Point = [f64; 2];

/// Linear-beta DDPM noise schedule over timesteps `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(horizon: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::domain("noise schedule needs at least one timestep"));
        }
        let valid = |b: f64| b > 0.0 && b < 1.0;
        if !valid(beta_start) || !valid(beta_end) || beta_end < beta_start {
            return Err(Error::domain(format!(
                "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = (0..horizon)
            .map(|i| {
                if horizon == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (horizon - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(horizon + 1);
        alpha_bar.push(1.0);
        for b in &betas {
            let prev = *alpha_bar.last().expect("non-empty");
            alpha_bar.push(prev * (1.0 - b));
        }
        Ok(Self { betas, alpha_bar })
    }

    /// Horizon `T`.
    pub fn horizon(&self) -> usize {
        self.betas.len()
    }

    /// `β_t` for `t ∈ 1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t` for `t ∈ 0..=T`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.horizon() {
            return Err(Error::domain(format!(
                "diffusion timestep {t} outside 1..={}",
                self.horizon()
            )));
        }
        Ok(())
    }

    /// `√ᾱ_t·z0 + √(1−ᾱ_t)·ε`
    pub fn forward_diffuse(&self, z0: Point, t: usize, eps: Point) -> Result<Point> {
        self.check_t(t)?;
        let ab = self.alpha_bar(t);
        Ok(diffuse_with(ab, z0, eps))
    }

    /// Variance of `q(z_{t−1} | z_t, z_0)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }
}

/// Closed-form forward diffusion at a given `ᾱ`.
pub fn diffuse_with(alpha_bar: f64, z0: Point, eps: Point) -> Point {
    let a = alpha_bar.sqrt();
    let s = (1.0 - alpha_bar).sqrt();
    [a * z0[0] + s * eps[0], a * z0[1] + s * eps[1]]
}

/// Sinusoidal embedding of `t/T` with `dim/2` frequencies spaced
/// geometrically from 1 to 1000.
pub fn time_embedding(t: usize, horizon: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let x = t as f64 / horizon as f64;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = if half == 1 {
            1.0
        } else {
            1000f64.powf(i as f64 / (half - 1) as f64)
        };
        out[i] = (freq * x).sin();
        out[half + i] = (freq * x).cos();
    }
    out
}

/// A context token, optionally combined with the concept token `V*`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Condition {
    pub context: usize,
    pub concept: bool,
}

impl Condition {
    pub fn context(k: usize) -> Self {
        Self {
            context: k,
            concept: false,
        }
    }

    pub fn concept(k: usize) -> Self {
        Self {
            context: k,
            concept: true,
        }
    }

    /// `c3` or `V*+c3`.
    pub fn label(&self) -> String {
        if self.concept {
            format!("V*+c{}", self.context)
        } else {
            format!("c{}", self.context)
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let (concept, rest) = match s.strip_prefix("V*+") {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        let k = rest
            .strip_prefix('c')
            .and_then(|k| k.parse::<usize>().ok())
            .ok_or_else(|| Error::domain(format!("cannot parse condition token '{s}'")))?;
        Ok(Self { context: k, concept })
    }
}

/// Frozen table of token embeddings: rows `0..K` are contexts, row `K` is `V*`.
/// Context rows are standard Gaussian; the concept row is scaled by
/// `concept_std`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionEmbedding {
    table: Matrix,
}

impl ConditionEmbedding {
    pub fn new(contexts: usize, dim: usize, concept_std: f64, seed: u64) -> Result<Self> {
        if !(concept_std > 0.0 && concept_std.is_finite()) {
            return Err(Error::domain("concept embedding std must be positive"));
        }
        let mut table = linalg::random_gaussian(contexts + 1, dim, 1.0, seed)?;
        table.row_mut(contexts).iter_mut().for_each(|v| *v *= concept_std);
        Ok(Self { table })
    }

    pub fn from_table(table: Matrix) -> Result<Self> {
        if table.rows() < 2 {
            return Err(Error::domain("embedding table needs a context and a concept row"));
        }
        Ok(Self { table })
    }

    pub fn table(&self) -> &Matrix {
        &self.table
    }

    pub fn contexts(&self) -> usize {
        self.table.rows() - 1
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn embed(&self, cond: Condition) -> Result<Vec<f64>> {
        if cond.context >= self.contexts() {
            return Err(Error::domain(format!(
                "context c{} outside c0..c{}",
                cond.context,
                self.contexts() - 1
            )));
        }
        let mut v = self.table.row(cond.context).to_vec();
        if cond.concept {
            let concept = self.table.row(self.contexts());
            for (x, c) in v.iter_mut().zip(concept) {
                *x += c;
            }
        }
        Ok(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Number of prior modes (and context tokens).
    pub modes: usize,
    /// Isotropic standard deviation of each prior mode.
    pub mode_std: f64,
    /// Diagonal of the concept covariance.
    pub concept_cov: [f64; 2],
    /// Number of concept points `N`.
    pub concept_size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            modes: 8,
            mode_std: 0.05,
            concept_cov: [0.01, 0.0004],
            concept_size: 8,
        }
    }
}

/// Ring-of-Gaussians prior plus a small concept set around mode `c₀`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub config: DatasetConfig,
    concept: Vec<Point>,
}

/// Context the concept set is observed in.
pub const CONCEPT_CONTEXT: usize = 0;

impl ToyDataset {
    pub fn new(config: DatasetConfig, seed: u64) -> Result<Self> {
        if config.modes == 0 {
            return Err(Error::domain("dataset needs at least one mode"));
        }
        if config.concept_size == 0 {
            return Err(Error::domain("concept set must not be empty"));
        }
        let mut rng = linalg::seeded_rng(seed);
        let center = mode_mean(CONCEPT_CONTEXT, config.modes);
        let sd = [config.concept_cov[0].sqrt(), config.concept_cov[1].sqrt()];
        let concept = (0..config.concept_size)
            .map(|_| {
                let e = normal2(&mut rng);
                [center[0] + sd[0] * e[0], center[1] + sd[1] * e[1]]
            })
            .collect();
        Ok(Self { config, concept })
    }

    pub fn mode_mean(&self, k: usize) -> Point {
        mode_mean(k, self.config.modes)
    }

    pub fn concept_points(&self) -> &[Point] {
        &self.concept
    }

    pub fn concept_covariance(&self) -> Matrix {
        Matrix::from_diag(&self.config.concept_cov)
    }

    /// One draw from the prior together with its context token.
    pub fn sample_prior(&self, rng: &mut ChaCha8Rng) -> (Point, usize) {
        let k = rng.random_range(0..self.config.modes);
        let mean = self.mode_mean(k);
        let e = normal2(rng);
        (
            [
                mean[0] + self.config.mode_std * e[0],
                mean[1] + self.config.mode_std * e[1],
            ],
            k,
        )
    }
}

/// Mean of mode `k`: the unit-circle point at angle `2πk/K`.
pub fn mode_mean(k: usize, modes: usize) -> Point {
    let angle = 2.0 * std::f64::consts::PI * k as f64 / modes as f64;
    [angle.cos(), angle.sin()]
}

pub(crate) fn normal2(rng: &mut ChaCha8Rng) -> Point {
    [StandardNormal.sample(rng), StandardNormal.sample(rng)]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimestepSampler {
    Uniform,
    Interval { lo: usize, hi: usize },
}

impl TimestepSampler {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        if let TimestepSampler::Interval { lo, hi } = *self {
            if lo >= hi || hi > horizon {
                return Err(Error::config(
                    "sampler",
                    format!("interval needs 0 <= lo < hi <= {horizon}, got [{lo}, {hi}]"),
                ));
            }
        }
        Ok(())
    }

    /// Draws a training timestep. Diffusion needs `t ≥ 1`, so an interval
    /// starting at 0 emits values in `1..=hi`.
    pub fn sample(&self, rng: &mut ChaCha8Rng, horizon: usize) -> usize {
        match *self {
            TimestepSampler::Uniform => rng.random_range(1..=horizon),
            TimestepSampler::Interval { lo, hi } => rng.random_range(lo.max(1)..=hi),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    /// Factor mapping data points to diffusion space, `z₀ = data_scale·x`.
    pub data_scale: f64,
    /// Standard deviation of the `V*` embedding entries.
    pub concept_std: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            hidden_width: 64,
            hidden_layers: 3,
            time_dim: 16,
            cond_dim: 8,
            data_scale: 30.0,
            concept_std: 0.3,
        }
    }
}

impl DenoiserConfig {
    pub fn input_dim(&self) -> usize {
        2 + self.time_dim + self.cond_dim
    }
}

/// Names of the network layers: `in`, `hidden0..`, `out`.
pub fn hidden_layer_name(i: usize) -> String {
    format!("hidden{i}")
}

/// `ε_θ(t, z_t, p)`.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub net: Mlp,
    pub embedding: ConditionEmbedding,
    pub schedule: NoiseSchedule,
}

impl Denoiser {
    /// Fresh network with `N(0, 1/fan_in)` weights and zero biases.
    pub fn new(config: DenoiserConfig, schedule: NoiseSchedule, contexts: usize, seed: u64) -> Result<Self> {
        if config.hidden_width == 0 || config.time_dim < 2 || !config.time_dim.is_multiple_of(2) || config.cond_dim == 0
        {
            return Err(Error::domain("denoiser dimensions must be positive and time_dim even"));
        }
        if !(config.data_scale > 0.0 && config.data_scale.is_finite()) {
            return Err(Error::domain("data_scale must be positive"));
        }
        let width = config.hidden_width;
        let dense = |name: String, n: usize, m: usize, tag: u64, act: Activation| -> Result<Layer> {
            Ok(Layer {
                name,
                linear: Linear::dense(
                    linalg::random_gaussian(n, m, 1.0 / m as f64, derive_seed(seed, tag))?,
                    Matrix::zeros(n, 1),
                ),
                activation: act,
            })
        };
        let mut layers = vec![dense("in".into(), width, config.input_dim(), 0, Activation::Silu)?];
        for i in 0..config.hidden_layers {
            layers.push(dense(
                hidden_layer_name(i),
                width,
                width,
                1 + i as u64,
                Activation::Silu,
            )?);
        }
        layers.push(dense("out".into(), 2, width, 100, Activation::Identity)?);
        let embedding =
            ConditionEmbedding::new(contexts, config.cond_dim, config.concept_std, derive_seed(seed, 1000))?;
        Ok(Self {
            config,
            net: Mlp::new(layers),
            embedding,
            schedule,
        })
    }

    pub fn horizon(&self) -> usize {
        self.schedule.horizon()
    }

    pub fn to_latent(&self, x: Point) -> Point {
        x.map(|v| v * self.config.data_scale)
    }

    pub fn from_latent(&self, z: Point) -> Point {
        z.map(|v| v / self.config.data_scale)
    }

    /// Preconditioning of `z_t` toward unit variance for a unit-circle prior.
    fn input_scale(&self, t: usize) -> f64 {
        let ab = self.schedule.alpha_bar(t);
        let var = 0.5 * self.config.data_scale * self.config.data_scale;
        1.0 / (var * ab + (1.0 - ab)).sqrt()
    }

    /// Condition embeddings as columns, `cond_dim × batch`.
    pub fn condition_matrix(&self, conds: &[Condition]) -> Result<Matrix> {
        let mut cm = Matrix::zeros(self.config.cond_dim, conds.len());
        for (c, &cond) in conds.iter().enumerate() {
            for (i, v) in self.embedding.embed(cond)?.into_iter().enumerate() {
                cm.set(i, c, v);
            }
        }
        Ok(cm)
    }

    /// Concatenates `[c_in·z_t; time embedding; condition embedding]` per column.
    pub fn assemble_input(&self, z: &[Point], timesteps: &[usize], conds: &[Condition]) -> Result<Matrix> {
        if conds.len() != z.len() {
            return Err(Error::domain("points, timesteps and conditions must have equal length"));
        }
        let cm = self.condition_matrix(conds)?;
        self.assemble_with(z, timesteps, &cm)
    }

    fn assemble_with(&self, z: &[Point], timesteps: &[usize], cm: &Matrix) -> Result<Matrix> {
        let batch = z.len();
        if timesteps.len() != batch || cm.cols() != batch {
            return Err(Error::domain("points, timesteps and conditions must have equal length"));
        }
        let horizon = self.horizon();
        let mut zm = Matrix::zeros(2, batch);
        let mut tm = Matrix::zeros(self.config.time_dim, batch);
        for (c, (p, &t)) in z.iter().zip(timesteps).enumerate() {
            if t > horizon {
                return Err(Error::domain(format!("timestep {t} beyond horizon {horizon}")));
            }
            let scale = self.input_scale(t);
            zm.set(0, c, p[0] * scale);
            zm.set(1, c, p[1] * scale);
            for (i, v) in time_embedding(t, horizon, self.config.time_dim).into_iter().enumerate() {
                tm.set(i, c, v);
            }
        }
        Matrix::vstack(&[&zm, &tm, cm])
    }

    /// Predicted noise, `2 × batch`.
    pub fn predict(&self, z: &[Point], timesteps: &[usize], conds: &[Condition]) -> Result<Matrix> {
        let x = self.assemble_input(z, timesteps, conds)?;
        self.net.forward(&x, timesteps)
    }

    /// Indices into `net.layers` of the hidden layers.
    pub fn hidden_indices(&self) -> std::ops::Range<usize> {
        1..1 + self.config.hidden_layers
    }

    pub fn has_adapters(&self) -> bool {
        self.net.layers.iter().any(|l| l.linear.adapter().is_some())
    }

    /// `(layer name, adapter)` for every adapted layer.
    pub fn adapters(&self) -> Vec<(&str, &LinearAdapter)> {
        self.net
            .layers
            .iter()
            .filter_map(|l| l.linear.adapter().map(|a| (l.name.as_str(), a)))
            .collect()
    }

    /// Wraps every hidden layer in an adapter over its current weight and
    /// freezes everything except the adapter factors.
    pub fn attach_adapters(&mut self, spec: &AdapterSpec, seed: u64) -> Result<()> {
        if self.has_adapters() {
            return Err(Error::domain("denoiser already carries adapters"));
        }
        let horizon = self.horizon();
        let schedule = spec.schedule(horizon)?;
        let hidden = self.hidden_indices();
        let mut replaced = Vec::new();
        for (i, idx) in hidden.clone().enumerate() {
            let layer = &self.net.layers[idx];
            let (w, b) = match &layer.linear {
                Linear::Dense { weight, bias } => (weight.value.clone(), bias.value.clone()),
                Linear::Adapted { .. } => unreachable!("checked above"),
            };
            let adapter = LinearAdapter::build(
                w,
                spec.kind,
                spec.r,
                schedule,
                spec.variant,
                derive_seed(seed, i as u64),
            )?;
            replaced.push((idx, adapter, b));
        }
        self.net.set_trainable(false);
        for (idx, adapter, b) in replaced {
            self.net.layers[idx].linear = Linear::Adapted {
                adapter: Box::new(adapter),
                bias: Param::frozen(b),
            };
        }
        Ok(())
    }

    /// Mean noise-prediction loss on a fixed probe batch drawn from the prior.
    pub fn probe_loss(&self, dataset: &ToyDataset, batch: usize, seed: u64) -> Result<f64> {
        let mut rng = linalg::seeded_rng(seed);
        let items = draw_prior_batch(self, dataset, batch, &TimestepSampler::Uniform, &mut rng);
        let x = self.assemble_input(&items.z, &items.t, &items.conds)?;
        self.net.loss(&x, &items.t, &items.eps, 0.0)
    }
}

/// Adapter settings applied to every hidden layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    pub kind: AdapterKind,
    pub r: usize,
    #[serde(default)]
    pub r_min: Option<usize>,
    #[serde(default)]
    pub variant: Option<InitVariant>,
}

impl AdapterSpec {
    /// Mask schedule for masked kinds; `None` otherwise.
    pub fn schedule(&self, horizon: usize) -> Result<Option<MaskSchedule>> {
        if !self.kind.is_masked() {
            return Ok(None);
        }
        let r_min = self.r_min.ok_or_else(|| {
            Error::config(
                "adapter.schedule",
                format!("{} requires a mask schedule", self.kind.as_str()),
            )
        })?;
        if r_min == 0 || r_min > self.r {
            return Err(Error::config(
                "adapter.schedule.r_min",
                format!("r_min = {r_min} must lie in 1..=r (r = {})", self.r),
            ));
        }
        MaskSchedule::new(self.r, r_min, horizon).map(Some)
    }
}

/// SplitMix64 finalizer over `seed ⊕ tag`, used to derive per-component seeds.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed
        ^ tag
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Batch {
    z: Vec<Point>,
    t: Vec<usize>,
    conds: Vec<Condition>,
    eps: Matrix,
}

fn draw_prior_batch(
    denoiser: &Denoiser,
    dataset: &ToyDataset,
    batch: usize,
    sampler: &TimestepSampler,
    rng: &mut ChaCha8Rng,
) -> Batch {
    let horizon = denoiser.horizon();
    let mut out = Batch {
        z: Vec::with_capacity(batch),
        t: Vec::with_capacity(batch),
        conds: Vec::with_capacity(batch),
        eps: Matrix::zeros(2, batch),
    };
    for c in 0..batch {
        let (x0, k) = dataset.sample_prior(rng);
        let t = sampler.sample(rng, horizon);
        let e = normal2(rng);
        out.z
            .push(diffuse_with(denoiser.schedule.alpha_bar(t), denoiser.to_latent(x0), e));
        out.t.push(t);
        out.conds.push(Condition::context(k));
        out.eps.set(0, c, e[0]);
        out.eps.set(1, c, e[1]);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability that a training pair carries an extra random token
    /// embedding on top of its context, standing in for the open vocabulary
    /// a pretrained text encoder would expose.
    pub distractor_prob: f64,
    pub distractor_std: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 32,
            lr: 1e-3,
            distractor_prob: 0.5,
            distractor_std: 0.6,
        }
    }
}

/// Trains the raw network on the prior with the noise-prediction loss.
/// Returns the per-step loss trace.
pub fn pretrain(denoiser: &mut Denoiser, dataset: &ToyDataset, config: &PretrainConfig, seed: u64) -> Result<Vec<f64>> {
    if denoiser.has_adapters() {
        return Err(Error::domain("pretraining expects a denoiser without adapters"));
    }
    if config.batch_size == 0 {
        return Err(Error::config("pretrain.batch_size", "must be positive"));
    }
    let mut rng = linalg::seeded_rng(seed);
    let mut adam = AdamState::new(AdamConfig {
        lr: config.lr,
        weight_decay: 0.0,
        ..AdamConfig::default()
    });
    let mut trace = Vec::with_capacity(config.steps);
    if !(0.0..=1.0).contains(&config.distractor_prob) {
        return Err(Error::config("pretrain.distractor_prob", "must lie in [0, 1]"));
    }
    let dim = denoiser.config.cond_dim;
    for _ in 0..config.steps {
        let items = draw_prior_batch(
            denoiser,
            dataset,
            config.batch_size,
            &TimestepSampler::Uniform,
            &mut rng,
        );
        let mut cm = denoiser.condition_matrix(&items.conds)?;
        for c in 0..config.batch_size {
            if rng.random::<f64>() < config.distractor_prob {
                for i in 0..dim {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    cm.set(i, c, cm.get(i, c) + config.distractor_std * g);
                }
            }
        }
        let x = denoiser.assemble_with(&items.z, &items.t, &cm)?;
        let loss = denoiser.net.forward_backward(&x, &items.t, &items.eps)?;
        adam.step(&mut denoiser.net.params_mut());
        trace.push(loss);
    }
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub adapter: AdapterSpec,
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub sampler: TimestepSampler,
    pub lambda_reg: f64,
    /// Record per-step orthogonality errors and the effective rank of each `B`.
    pub record_trace: bool,
}

impl FinetuneConfig {
    /// Fine-tuning defaults for `kind`: 500 steps for the non-orthogonal
    /// kinds, 800 for the orthogonal ones, batch size 1.
    pub fn for_kind(kind: AdapterKind, r: usize, r_min: Option<usize>) -> Self {
        let steps = if kind.is_orthogonal() { 800 } else { 500 };
        Self {
            adapter: AdapterSpec {
                kind,
                r,
                r_min,
                variant: kind.is_orthogonal().then_some(InitVariant::RANDOM_LAST),
            },
            steps,
            batch_size: 1,
            adam: AdamConfig::default(),
            sampler: TimestepSampler::Uniform,
            lambda_reg: 0.0,
            record_trace: false,
        }
    }
}

/// Per-layer orthogonality error at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub layer: String,
    pub err_a: f64,
    pub err_b: f64,
    /// Effective rank of `B` at the 0.95 threshold; 0 for an all-zero `B`.
    pub eff_rank_b: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub t: usize,
    /// Active adapter rank at `t` (the full rank for unmasked kinds).
    pub rank_t: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FinetuneReport {
    pub steps: Vec<StepRecord>,
    /// Rows for step 0 (initialization) and every step after, when recording.
    pub trace: Vec<TraceRow>,
}

/// Attaches adapters to a pretrained denoiser and trains only the adapter
/// factors on the concept set, conditioned on `V* + c₀`.
pub fn finetune(
    denoiser: &mut Denoiser,
    dataset: &ToyDataset,
    config: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneReport> {
    let horizon = denoiser.horizon();
    config.sampler.validate(horizon)?;
    if config.batch_size == 0 {
        return Err(Error::config("finetune.batch_size", "must be positive"));
    }
    if config.lambda_reg.is_nan() || config.lambda_reg < 0.0 {
        return Err(Error::config("adapter.lambda_reg", "must be non-negative"));
    }
    denoiser.attach_adapters(&config.adapter, derive_seed(seed, 1))?;

    let mut rng = linalg::seeded_rng(derive_seed(seed, 2));
    let mut adam = AdamState::new(config.adam);
    let mut report = FinetuneReport::default();
    if config.record_trace {
        record_trace(denoiser, 0, &mut report.trace);
    }
    let concept = dataset.concept_points();
    let cond = Condition::concept(CONCEPT_CONTEXT);
    for step in 1..=config.steps {
        let mut z = Vec::with_capacity(config.batch_size);
        let mut ts = Vec::with_capacity(config.batch_size);
        let mut eps = Matrix::zeros(2, config.batch_size);
        for c in 0..config.batch_size {
            let x0 = concept[rng.random_range(0..concept.len())];
            let t = config.sampler.sample(&mut rng, horizon);
            let e = normal2(&mut rng);
            z.push(diffuse_with(denoiser.schedule.alpha_bar(t), denoiser.to_latent(x0), e));
            ts.push(t);
            eps.set(0, c, e[0]);
            eps.set(1, c, e[1]);
        }
        let conds = vec![cond; config.batch_size];
        let x = denoiser.assemble_input(&z, &ts, &conds)?;
        let loss = denoiser.net.forward_backward_reg(&x, &ts, &eps, config.lambda_reg)?;
        adam.step(&mut denoiser.net.params_mut());
        let (_, first) = denoiser.adapters()[0];
        report.steps.push(StepRecord {
            step,
            loss,
            t: ts[0],
            rank_t: first.active_rank(ts[0])?,
        });
        if config.record_trace {
            record_trace(denoiser, step, &mut report.trace);
        }
    }
    Ok(report)
}

fn record_trace(denoiser: &Denoiser, step: usize, out: &mut Vec<TraceRow>) {
    for (name, adapter) in denoiser.adapters() {
        let (err_a, err_b) = adapter.orthogonality_errors();
        let eff_rank_b = linalg::svd(&adapter.b.value)
            .ok()
            .and_then(|f| linalg::effective_rank(&f.s, 0.95).ok())
            .unwrap_or(0);
        out.push(TraceRow {
            step,
            layer: name.to_string(),
            err_a,
            err_b,
            eff_rank_b,
        });
    }
}

/// DDPM ancestral sampling of one chain per entry of `conds`.
///
/// Chain `i` draws all of its noise from stream `i` of `seed`, so results do
/// not depend on how chains are batched. Adapter masks are evaluated at each
/// step's own timestep, or at `mask_timestep` for every step when given.
pub fn sample_batch(
    denoiser: &Denoiser,
    conds: &[Condition],
    seed: u64,
    mask_timestep: Option<usize>,
) -> Result<Vec<Point>> {
    let horizon = denoiser.horizon();
    if let Some(tm) = mask_timestep {
        if tm > horizon {
            return Err(Error::domain(format!("mask timestep {tm} beyond horizon {horizon}")));
        }
    }
    for c in conds {
        denoiser.embedding.embed(*c)?;
    }
    let n = conds.len();
    let mut rngs: Vec<ChaCha8Rng> = (0..n as u64).map(|i| linalg::stream_rng(seed, i)).collect();
    let mut z: Vec<Point> = rngs.iter_mut().map(normal2).collect();
    let mut merged = MergedWeights::new(denoiser);
    let sched = &denoiser.schedule;
    for t in (1..=horizon).rev() {
        merged.update(denoiser, mask_timestep.unwrap_or(t))?;
        let x = denoiser.assemble_input(&z, &vec![t; n], conds)?;
        let eps = merged.forward(denoiser, &x);
        let alpha = 1.0 - sched.beta(t);
        let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
        let sigma = if t > 1 { sched.posterior_variance(t).sqrt() } else { 0.0 };
        for (c, (p, rng)) in z.iter_mut().zip(rngs.iter_mut()).enumerate() {
            for (d, v) in p.iter_mut().enumerate() {
                *v = (*v - coef * eps.get(d, c)) / alpha.sqrt();
            }
            if t > 1 {
                let e = normal2(rng);
                p[0] += sigma * e[0];
                p[1] += sigma * e[1];
            }
        }
    }
    if z.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::Numerical("sampler produced non-finite points".into()));
    }
    Ok(z.into_iter().map(|p| denoiser.from_latent(p)).collect())
}

/// `n` samples for a single condition.
pub fn sample(
    denoiser: &Denoiser,
    cond: Condition,
    n: usize,
    seed: u64,
    mask_timestep: Option<usize>,
) -> Result<Vec<Point>> {
    sample_batch(denoiser, &vec![cond; n], seed, mask_timestep)
}

/// Dense per-layer weights for inference, rebuilt only when an adapter's
/// active rank changes.
struct MergedWeights {
    weights: Vec<Option<Matrix>>,
    ranks: Vec<Option<usize>>,
}

impl MergedWeights {
    fn new(denoiser: &Denoiser) -> Self {
        let n = denoiser.net.layers.len();
        Self {
            weights: vec![None; n],
            ranks: vec![None; n],
        }
    }

    fn update(&mut self, denoiser: &Denoiser, t: usize) -> Result<()> {
        for (i, layer) in denoiser.net.layers.iter().enumerate() {
            if let Some(adapter) = layer.linear.adapter() {
                let k = adapter.active_rank(t)?;
                if self.ranks[i] != Some(k) {
                    self.weights[i] = Some(adapter.base().add(&adapter.dense_delta(k)));
                    self.ranks[i] = Some(k);
                }
            }
        }
        Ok(())
    }

    fn forward(&self, denoiser: &Denoiser, x: &Matrix) -> Matrix {
        let mut h = x.clone();
        for (i, layer) in denoiser.net.layers.iter().enumerate() {
            let w = self.weights[i].as_ref().unwrap_or_else(|| layer.linear.base_weight());
            let mut z = w.matmul(&h);
            let b = &layer.linear.bias().value;
            for r in 0..z.rows() {
                let bias = b.get(r, 0);
                z.row_mut(r).iter_mut().for_each(|v| *v += bias);
            }
            if layer.activation == Activation::Silu {
                z = z.map(|v| v / (1.0 + (-v).exp()));
            }
            h = z;
        }
        h
    }
}
