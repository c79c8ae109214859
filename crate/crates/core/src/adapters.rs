//! Low-rank adapters over a frozen linear weight.
//!
//! Five parametrizations share one struct, [`LinearAdapter`]:
//!
//! ```text
//! PlainLora     W + B A
//! VanillaTLora  W + B M_t A
//! OrthoLora     W − B0 S0 A0 + B S A
//! TLora         W − B0 S0 M_t A0 + B S M_t A
//! AdaLoraSvd    W + B S A
//! ```
//!
//! `M_t` is the prefix mask of [`MaskSchedule`]: it keeps the leading
//! `rank_at(t)` components and zeroes the rest. The frozen copies `A0, B0, S0`
//! cancel the trainable factors exactly at construction, so every kind starts
//! from the base weight no matter how the factors were initialized.
//!
//! Evaluation is factored: the adapter path costs `O((n + m)·r)` per column
//! and never forms the dense `n × m` update, except in
//! [`LinearAdapter::effective_weight`] which exists to produce it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradnet::Param;
use crate::linalg::{self, orthogonality_error, random_gaussian, Matrix, OrthoMode};

/// Linear rank schedule `r(t) = ⌊(r − r_min)(T − t)/T⌋ + r_min` over `t ∈ 0..=T`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSchedule {
    rank: usize,
    min_rank: usize,
    horizon: usize,
}

impl MaskSchedule {
    pub fn new(rank: usize, min_rank: usize, horizon: usize) -> Result<Self> {
        if min_rank == 0 || min_rank > rank {
            return Err(Error::domain(format!(
                "mask schedule needs 1 <= r_min <= r, got r = {rank}, r_min = {min_rank}"
            )));
        }
        if horizon == 0 {
            return Err(Error::domain("mask schedule horizon must be positive"));
        }
        Ok(Self {
            rank,
            min_rank,
            horizon,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn min_rank(&self) -> usize {
        self.min_rank
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn rank_at(&self, t: usize) -> Result<usize> {
        if t > self.horizon {
            return Err(Error::domain(format!("timestep {t} outside 0..={}", self.horizon)));
        }
        Ok((self.rank - self.min_rank) * (self.horizon - t) / self.horizon + self.min_rank)
    }

    /// `r × r` diagonal 0/1 matrix with `rank_at(t)` leading ones.
    pub fn mask(&self, t: usize) -> Result<Matrix> {
        let k = self.rank_at(t)?;
        let diag: Vec<f64> = (0..self.rank).map(|i| if i < k { 1.0 } else { 0.0 }).collect();
        Ok(Matrix::from_diag(&diag))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    PlainLora,
    VanillaTLora,
    OrthoLora,
    TLora,
    AdaLoraSvd,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 5] = [
        AdapterKind::PlainLora,
        AdapterKind::VanillaTLora,
        AdapterKind::OrthoLora,
        AdapterKind::TLora,
        AdapterKind::AdaLoraSvd,
    ];

    /// Kinds whose adapter path is masked by `M_t`.
    pub fn is_masked(self) -> bool {
        matches!(self, AdapterKind::VanillaTLora | AdapterKind::TLora)
    }

    /// Kinds with a trainable singular-value vector `S`.
    pub fn has_scale(self) -> bool {
        matches!(
            self,
            AdapterKind::OrthoLora | AdapterKind::TLora | AdapterKind::AdaLoraSvd
        )
    }

    /// Kinds initialized from SVD factors and rebased by their frozen copies.
    pub fn is_orthogonal(self) -> bool {
        matches!(self, AdapterKind::OrthoLora | AdapterKind::TLora)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AdapterKind::PlainLora => "plain_lora",
            AdapterKind::VanillaTLora => "vanilla_t_lora",
            AdapterKind::OrthoLora => "ortho_lora",
            AdapterKind::TLora => "t_lora",
            AdapterKind::AdaLoraSvd => "ada_lora_svd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        AdapterKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::domain(format!("unknown adapter kind '{s}'")))
    }
}

/// Matrix whose SVD seeds an orthogonal adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitSource {
    /// The frozen base weight `W`.
    Weight,
    /// A fresh `R ~ N(0, 1/r)` of the same shape as `W`.
    Random,
}

/// Window of `r` consecutive singular triplets taken from the sorted spectrum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    Top,
    Middle,
    Last,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitVariant {
    pub source: InitSource,
    pub band: Band,
}

impl InitVariant {
    pub const fn new(source: InitSource, band: Band) -> Self {
        Self { source, band }
    }

    /// Last components of a random matrix, the default for orthogonal adapters.
    pub const RANDOM_LAST: InitVariant = InitVariant::new(InitSource::Random, Band::Last);

    pub fn all() -> [InitVariant; 6] {
        let mut out = [InitVariant::RANDOM_LAST; 6];
        let mut i = 0;
        for source in [InitSource::Weight, InitSource::Random] {
            for band in [Band::Top, Band::Middle, Band::Last] {
                out[i] = InitVariant::new(source, band);
                i += 1;
            }
        }
        out
    }

    /// First index of the selected window in a spectrum of length `k`.
    pub fn band_start(&self, k: usize, r: usize) -> usize {
        debug_assert!(r <= k);
        match self.band {
            Band::Top => 0,
            Band::Middle => (k - r) / 2,
            Band::Last => k - r,
        }
    }
}

/// Frozen copy of an orthogonal adapter's initial factors.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenInit {
    pub a0: Matrix,
    pub b0: Matrix,
    pub s0: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LinearAdapter {
    base: Matrix,
    /// `r × m`
    pub a: Param,
    /// `n × r`
    pub b: Param,
    /// `1 × r`, present for kinds with [`AdapterKind::has_scale`].
    pub s: Option<Param>,
    init: Option<FrozenInit>,
    kind: AdapterKind,
    schedule: Option<MaskSchedule>,
    variant: Option<InitVariant>,
    seed: u64,
}

fn check_rank(w: &Matrix, r: usize) -> Result<()> {
    let k = w.rows().min(w.cols());
    if r == 0 || r > k {
        return Err(Error::domain(format!(
            "adapter rank {r} outside 1..={k} for a {}x{} weight",
            w.rows(),
            w.cols()
        )));
    }
    Ok(())
}

/// Plain LoRA: `A ~ N(0, 1/r)`, `B = 0`.
pub fn init_plain_lora(w: Matrix, r: usize, seed: u64) -> Result<LinearAdapter> {
    check_rank(&w, r)?;
    let a = random_gaussian(r, w.cols(), 1.0 / r as f64, seed)?;
    let b = Matrix::zeros(w.rows(), r);
    Ok(LinearAdapter {
        base: w,
        a: Param::trainable(a),
        b: Param::trainable(b),
        s: None,
        init: None,
        kind: AdapterKind::PlainLora,
        schedule: None,
        variant: None,
        seed,
    })
}

/// Orthogonal init: `A = Vtᵣ`, `B = Uᵣ`, `S = Sᵣ` for the chosen band of the
/// SVD of `W` or of a random `R ~ N(0, 1/r)` drawn from `seed`.
pub fn init_ortho(w: Matrix, r: usize, variant: InitVariant, seed: u64) -> Result<LinearAdapter> {
    check_rank(&w, r)?;
    let factors = match variant.source {
        InitSource::Weight => linalg::svd(&w)?,
        InitSource::Random => {
            let rmat = random_gaussian(w.rows(), w.cols(), 1.0 / r as f64, seed)?;
            linalg::svd(&rmat)?
        }
    };
    let k = factors.s.len();
    let start = variant.band_start(k, r);
    let a = factors.vt.select_rows(start..start + r);
    let b = factors.u.select_cols(start..start + r);
    let s = factors.s[start..start + r].to_vec();
    let init = FrozenInit {
        a0: a.clone(),
        b0: b.clone(),
        s0: s.clone(),
    };
    Ok(LinearAdapter {
        base: w,
        a: Param::trainable(a),
        b: Param::trainable(b),
        s: Some(Param::trainable(Matrix::from_vec(1, r, s)?)),
        init: Some(init),
        kind: AdapterKind::OrthoLora,
        schedule: None,
        variant: Some(variant),
        seed,
    })
}

/// SVD-shaped adapter with Gaussian `A`, `B` (variance `1/r`) and `S = 0`.
pub fn init_adalora_svd(w: Matrix, r: usize, seed: u64) -> Result<LinearAdapter> {
    check_rank(&w, r)?;
    let std = (1.0 / r as f64).sqrt();
    let a = linalg::gaussian_from(&mut linalg::stream_rng(seed, 0), r, w.cols(), std);
    let b = linalg::gaussian_from(&mut linalg::stream_rng(seed, 1), w.rows(), r, std);
    Ok(LinearAdapter {
        base: w,
        a: Param::trainable(a),
        b: Param::trainable(b),
        s: Some(Param::trainable(Matrix::zeros(1, r))),
        init: None,
        kind: AdapterKind::AdaLoraSvd,
        schedule: None,
        variant: None,
        seed,
    })
}

impl LinearAdapter {
    /// Builds any kind. Masked kinds require `schedule`; orthogonal kinds use
    /// `variant` (defaulting to the last components of a random matrix).
    pub fn build(
        w: Matrix,
        kind: AdapterKind,
        r: usize,
        schedule: Option<MaskSchedule>,
        variant: Option<InitVariant>,
        seed: u64,
    ) -> Result<Self> {
        let variant = variant.unwrap_or(InitVariant::RANDOM_LAST);
        let adapter = match kind {
            AdapterKind::PlainLora | AdapterKind::VanillaTLora => init_plain_lora(w, r, seed)?,
            AdapterKind::OrthoLora | AdapterKind::TLora => init_ortho(w, r, variant, seed)?,
            AdapterKind::AdaLoraSvd => init_adalora_svd(w, r, seed)?,
        };
        if kind.is_masked() {
            let schedule = schedule.ok_or_else(|| {
                Error::config(
                    "adapter.schedule",
                    format!("{} requires a mask schedule", kind.as_str()),
                )
            })?;
            adapter.with_schedule(schedule)
        } else {
            Ok(adapter)
        }
    }

    /// Attaches a mask schedule, turning `PlainLora` into `VanillaTLora` and
    /// `OrthoLora` into `TLora`.
    pub fn with_schedule(mut self, schedule: MaskSchedule) -> Result<Self> {
        if schedule.rank() != self.rank() {
            return Err(Error::domain(format!(
                "schedule rank {} does not match adapter rank {}",
                schedule.rank(),
                self.rank()
            )));
        }
        self.kind = match self.kind {
            AdapterKind::PlainLora | AdapterKind::VanillaTLora => AdapterKind::VanillaTLora,
            AdapterKind::OrthoLora | AdapterKind::TLora => AdapterKind::TLora,
            AdapterKind::AdaLoraSvd => {
                return Err(Error::domain("ada_lora_svd adapters are not masked"));
            }
        };
        self.schedule = Some(schedule);
        Ok(self)
    }

    /// Reassembles an adapter from stored tensors, validating every shape.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        base: Matrix,
        a: Matrix,
        b: Matrix,
        s: Option<Vec<f64>>,
        init: Option<FrozenInit>,
        kind: AdapterKind,
        schedule: Option<MaskSchedule>,
        variant: Option<InitVariant>,
        seed: u64,
    ) -> Result<Self> {
        let (n, m) = base.shape();
        let r = a.rows();
        check_rank(&base, r)?;
        if a.cols() != m || b.shape() != (n, r) {
            return Err(Error::domain(format!(
                "factor shapes A {:?}, B {:?} do not fit W {n}x{m} at rank {r}",
                a.shape(),
                b.shape()
            )));
        }
        if kind.has_scale() != s.is_some() {
            return Err(Error::domain(format!(
                "{} {} a singular-value vector",
                kind.as_str(),
                if kind.has_scale() { "requires" } else { "does not take" }
            )));
        }
        if s.as_ref().is_some_and(|s| s.len() != r) {
            return Err(Error::domain("singular-value vector length differs from rank"));
        }
        if kind.is_orthogonal() != init.is_some() {
            return Err(Error::domain(format!(
                "{} frozen init copies are {}",
                kind.as_str(),
                if kind.is_orthogonal() {
                    "required"
                } else {
                    "not allowed"
                }
            )));
        }
        if let Some(init) = &init {
            if init.a0.shape() != a.shape() || init.b0.shape() != b.shape() || init.s0.len() != r {
                return Err(Error::domain("frozen init shapes do not match trainable factors"));
            }
        }
        if kind.is_masked() != schedule.is_some() {
            return Err(Error::config(
                "adapter.schedule",
                format!(
                    "{} {} a mask schedule",
                    kind.as_str(),
                    if kind.is_masked() { "requires" } else { "does not take" }
                ),
            ));
        }
        if schedule.is_some_and(|sc| sc.rank() != r) {
            return Err(Error::domain("schedule rank differs from adapter rank"));
        }
        Ok(Self {
            base,
            a: Param::trainable(a),
            b: Param::trainable(b),
            s: s.map(|s| Matrix::from_vec(1, r, s).map(Param::trainable)).transpose()?,
            init,
            kind,
            schedule,
            variant,
            seed,
        })
    }

    pub fn kind(&self) -> AdapterKind {
        self.kind
    }

    pub fn rank(&self) -> usize {
        self.a.value.rows()
    }

    pub fn base(&self) -> &Matrix {
        &self.base
    }

    pub fn frozen_init(&self) -> Option<&FrozenInit> {
        self.init.as_ref()
    }

    pub fn schedule(&self) -> Option<&MaskSchedule> {
        self.schedule.as_ref()
    }

    pub fn variant(&self) -> Option<InitVariant> {
        self.variant
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Output and input widths `(n, m)`.
    pub fn shape(&self) -> (usize, usize) {
        self.base.shape()
    }

    pub fn scale_values(&self) -> Option<&[f64]> {
        self.s.as_ref().map(|p| p.value.data())
    }

    /// Number of unmasked components at timestep `t`.
    pub fn active_rank(&self, t: usize) -> Result<usize> {
        if self.kind.is_masked() {
            let schedule = self.schedule.as_ref().ok_or_else(|| {
                Error::config(
                    "adapter.schedule",
                    format!("{} requires a mask schedule", self.kind.as_str()),
                )
            })?;
            schedule.rank_at(t)
        } else {
            Ok(self.rank())
        }
    }

    /// Dense `W_t` for timestep `t` (ignored by unmasked kinds).
    pub fn effective_weight(&self, t: usize) -> Result<Matrix> {
        let k = self.active_rank(t)?;
        Ok(self.base.add(&self.dense_delta(k)))
    }

    /// `B diag(S) M A − B0 diag(S0) M A0` with `k` active components.
    pub(crate) fn dense_delta(&self, k: usize) -> Matrix {
        let r = self.rank();
        let mut coeff = vec![0.0; r];
        for (i, c) in coeff.iter_mut().enumerate().take(k) {
            *c = self.scale_values().map_or(1.0, |s| s[i]);
        }
        let mut delta = self.b.value.scale_cols(&coeff).matmul(&self.a.value);
        if let Some(init) = &self.init {
            let mut coeff0 = vec![0.0; r];
            coeff0[..k].copy_from_slice(&init.s0[..k]);
            let frozen = init.b0.scale_cols(&coeff0).matmul(&init.a0);
            delta = delta.sub(&frozen);
        }
        delta
    }

    /// `W_t · x` for a batch `x` of shape `m × batch`, evaluated in factored form.
    pub fn forward(&self, x: &Matrix, t: usize) -> Result<Matrix> {
        self.check_input(x)?;
        let k = self.active_rank(t)?;
        Ok(self.forward_ranks(x, &vec![k; x.cols()]))
    }

    pub(crate) fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.rows() != self.base.cols() {
            return Err(Error::domain(format!(
                "adapter input has {} rows, weight expects {}",
                x.rows(),
                self.base.cols()
            )));
        }
        Ok(())
    }

    /// Factored forward with a per-column active rank.
    pub(crate) fn forward_ranks(&self, x: &Matrix, ranks: &[usize]) -> Matrix {
        let h = self.a.value.matmul(x);
        let hs = masked_scale(&h, self.scale_values(), ranks);
        let mut delta = self.b.value.matmul(&hs);
        if let Some(init) = &self.init {
            let h0 = init.a0.matmul(x);
            let h0s = masked_scale(&h0, Some(&init.s0), ranks);
            delta = delta.sub(&init.b0.matmul(&h0s));
        }
        self.base.matmul(x).add(&delta)
    }

    /// Accumulates `∂L/∂{A, B, S}` for upstream gradient `dy` (`n × batch`)
    /// and returns `∂L/∂x` when `need_input_grad` is set.
    ///
    /// Masked components are skipped outright, so their gradients are exact zeros.
    pub(crate) fn backward_ranks(
        &mut self,
        x: &Matrix,
        dy: &Matrix,
        ranks: &[usize],
        need_input_grad: bool,
    ) -> Option<Matrix> {
        let h = self.a.value.matmul(x);
        let g = self.b.value.t_matmul(dy);
        let scale = self.s.as_ref().map(|p| p.value.data().to_vec());

        if self.b.trainable {
            let hs = masked_scale(&h, scale.as_deref(), ranks);
            self.b.accumulate(&dy.matmul_t(&hs));
        }
        if let Some(s) = self.s.as_mut() {
            if s.trainable {
                let mut ds = Matrix::zeros(1, h.rows());
                for (col, &k) in ranks.iter().enumerate() {
                    for i in 0..k {
                        ds.data_mut()[i] += g.get(i, col) * h.get(i, col);
                    }
                }
                s.accumulate(&ds);
            }
        }
        let dh = masked_scale(&g, scale.as_deref(), ranks);
        if self.a.trainable {
            self.a.accumulate(&dh.matmul_t(x));
        }
        if !need_input_grad {
            return None;
        }
        let mut dx = self.base.t_matmul(dy).add(&self.a.value.t_matmul(&dh));
        if let Some(init) = &self.init {
            let g0 = init.b0.t_matmul(dy);
            let dh0 = masked_scale(&g0, Some(&init.s0), ranks);
            dx = dx.sub(&init.a0.t_matmul(&dh0));
        }
        Some(dx)
    }

    /// Adds `λ·∇` of the orthogonality penalty to the factor gradients and returns its value.
    pub(crate) fn accumulate_penalty(&mut self, lambda_reg: f64) -> f64 {
        if lambda_reg == 0.0 {
            return 0.0;
        }
        let (value, ga, gb) = adalora_penalty_grad(&self.a.value, &self.b.value, lambda_reg);
        self.a.accumulate(&ga);
        self.b.accumulate(&gb);
        value
    }

    pub fn orthogonality_errors(&self) -> (f64, f64) {
        (
            orthogonality_error(&self.a.value, OrthoMode::Rows),
            orthogonality_error(&self.b.value, OrthoMode::Cols),
        )
    }

    pub(crate) fn params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        let mut out: Vec<(&'static str, &mut Param)> = vec![("A", &mut self.a), ("B", &mut self.b)];
        if let Some(s) = self.s.as_mut() {
            out.push(("S", s));
        }
        out
    }

    pub(crate) fn params(&self) -> Vec<(&'static str, &Param)> {
        let mut out: Vec<(&'static str, &Param)> = vec![("A", &self.a), ("B", &self.b)];
        if let Some(s) = self.s.as_ref() {
            out.push(("S", s));
        }
        out
    }
}

/// `out[i, c] = scale[i] · h[i, c]` for `i < ranks[c]`, zero otherwise.
fn masked_scale(h: &Matrix, scale: Option<&[f64]>, ranks: &[usize]) -> Matrix {
    let (r, batch) = h.shape();
    debug_assert_eq!(ranks.len(), batch);
    let mut out = Matrix::zeros(r, batch);
    for i in 0..r {
        let si = scale.map_or(1.0, |s| s[i]);
        let src = h.row(i);
        let dst = out.row_mut(i);
        for c in 0..batch {
            if i < ranks[c] {
                dst[c] = si * src[c];
            }
        }
    }
    out
}

/// `λ·(‖AAᵀ − I‖²_F + ‖BᵀB − I‖²_F)`
pub fn adalora_penalty(a: &Matrix, b: &Matrix, lambda_reg: f64) -> f64 {
    lambda_reg * (orthogonality_error(a, OrthoMode::Rows) + orthogonality_error(b, OrthoMode::Cols))
}

/// Penalty value with its gradients: `4λ(AAᵀ − I)A` and `4λB(BᵀB − I)`.
pub fn adalora_penalty_grad(a: &Matrix, b: &Matrix, lambda_reg: f64) -> (f64, Matrix, Matrix) {
    let ra = a.rows();
    let rb = b.cols();
    let ea = a.matmul_t(a).sub(&Matrix::identity(ra));
    let eb = b.t_matmul(b).sub(&Matrix::identity(rb));
    let value = lambda_reg * (ea.frobenius_norm_sq() + eb.frobenius_norm_sq());
    let ga = ea.matmul(a).scale(4.0 * lambda_reg);
    let gb = b.matmul(&eb).scale(4.0 * lambda_reg);
    (value, ga, gb)
}
