//! Acceptance suite: runs every criterion in order, prints one PASS/FAIL line
//! each and exits nonzero if any criterion fails.

use std::path::Path;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};
use tlora::adapters::{AdapterKind, InitVariant, LinearAdapter, MaskSchedule};
use tlora::analysis::{self, EvalReport};
use tlora::checkpoint::{self, Checkpoint};
use tlora::config::ExperimentConfig;
use tlora::diffusion::{self, Condition, Denoiser, FinetuneConfig, FinetuneReport, TimestepSampler, ToyDataset};
use tlora::linalg::{self, orthogonality_error, Matrix, OrthoMode};
use tlora::runner;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

// ---------------------------------------------------------------- oracles

/// `⌊(r − r_min)(T − t)/T⌋ + r_min` by counting multiples of `T`.
fn rank_oracle(r: usize, r_min: usize, horizon: usize, t: usize) -> usize {
    let num = (r - r_min) * (horizon - t);
    let mut q = 0;
    while (q + 1) * horizon <= num {
        q += 1;
    }
    q + r_min
}

fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0;
            for k in 0..a.cols() {
                acc += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, acc);
        }
    }
    out
}

/// Dense `W_t` assembled entry by entry from the public factors.
fn dense_oracle(ad: &LinearAdapter, t: usize) -> Matrix {
    let k = match ad.schedule() {
        Some(s) => rank_oracle(s.rank(), s.min_rank(), s.horizon(), t),
        None => ad.rank(),
    };
    let (n, m) = ad.shape();
    let s = ad.scale_values().map(|s| s.to_vec());
    let mut w = ad.base().clone();
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for c in 0..k {
                let sc = s.as_ref().map_or(1.0, |s| s[c]);
                acc += ad.b.value.get(i, c) * sc * ad.a.value.get(c, j);
                if let Some(init) = ad.frozen_init() {
                    acc -= init.b0.get(i, c) * init.s0[c] * init.a0.get(c, j);
                }
            }
            w.set(i, j, w.get(i, j) + acc);
        }
    }
    w
}

fn sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn file_hash(path: &Path) -> String {
    sha256(&std::fs::read(path).expect("readable output"))
}

fn build(w: Matrix, kind: AdapterKind, r: usize, variant: InitVariant, seed: u64) -> LinearAdapter {
    let schedule = kind
        .is_masked()
        .then(|| MaskSchedule::new(r, (r / 2).max(1), 1000).unwrap());
    LinearAdapter::build(w, kind, r, schedule, Some(variant), seed).unwrap()
}

// ---------------------------------------------------------------- criteria

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let horizon = 1000;
    let mut checked = 0;
    let mut mismatches = Vec::new();
    for r in [4usize, 8, 16, 32, 64] {
        let mut mins = vec![1, r / 4, r / 2, r];
        mins.dedup();
        for r_min in mins {
            let s = MaskSchedule::new(r, r_min, horizon).unwrap();
            for t in 0..=horizon {
                checked += 1;
                if s.rank_at(t).unwrap() != rank_oracle(r, r_min, horizon, t) {
                    mismatches.push((r, r_min, t));
                }
            }
            if s.rank_at(0).unwrap() != r || s.rank_at(horizon).unwrap() != r_min {
                mismatches.push((r, r_min, usize::MAX));
            }
        }
    }
    let el = start.elapsed();
    verdict(
        mismatches.is_empty() && within(el, 1.0),
        format!(
            "{checked} (r, r_min, t) triples, {} mismatches, {el:.2?} (< 1 s)",
            mismatches.len()
        ),
    )
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for (shape, seed) in [((64, 64), 1u64), ((128, 96), 2)] {
        let w = linalg::random_gaussian(shape.0, shape.1, 1.0, seed).unwrap();
        let wn = w.frobenius_norm();
        for kind in AdapterKind::ALL {
            for variant in InitVariant::all() {
                let ad = build(w.clone(), kind, 32, variant, seed + 10);
                for t in [0, 250, 500, 750, 1000] {
                    let rel = ad.effective_weight(t).unwrap().sub(&w).frobenius_norm() / wn;
                    worst = worst.max(rel);
                    cases += 1;
                }
            }
        }
    }
    let el = start.elapsed();
    verdict(
        worst <= 1e-9 && within(el, 10.0),
        format!("{cases} cases, max ‖W_t − W‖/‖W‖ = {worst:.2e} (≤ 1e-9), {el:.2?} (< 10 s)"),
    )
}

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for (shape, seed) in [((64, 64), 3u64), ((128, 96), 4)] {
        let w = linalg::random_gaussian(shape.0, shape.1, 1.0, seed).unwrap();
        for variant in InitVariant::all() {
            let ad = tlora::adapters::init_ortho(w.clone(), 32, variant, seed).unwrap();
            worst = worst
                .max(orthogonality_error(&ad.a.value, OrthoMode::Rows))
                .max(orthogonality_error(&ad.b.value, OrthoMode::Cols));
        }
    }
    let gaussian = linalg::random_gaussian(32, 64, 1.0 / 32.0, 5).unwrap();
    let contrast = orthogonality_error(&gaussian, OrthoMode::Rows);
    let el = start.elapsed();
    verdict(
        worst <= 1e-12 && contrast > 1e-2 && within(el, 5.0),
        format!("max ortho error {worst:.2e} (≤ 1e-12); Gaussian A error {contrast:.2} (> 1e-2); {el:.2?} (< 5 s)"),
    )
}

fn criterion_4() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for kind in AdapterKind::ALL {
        let variants: Vec<Option<InitVariant>> = if kind.is_orthogonal() {
            InitVariant::all().into_iter().map(Some).collect()
        } else {
            vec![None]
        };
        for variant in variants {
            for lambda in [0.0, 0.3] {
                let (net, x, ts, target) = runner::gradcheck_fixture(kind, variant, 7).unwrap();
                let rep = tlora::gradnet::gradient_check(&net, &x, &ts, &target, lambda, 1e-5).unwrap();
                worst = worst.max(rep.max_rel_error());
                checks += 1;
            }
        }
    }
    // Masked components must receive exactly zero gradient from a t = T batch.
    let mut nonzero = 0;
    for kind in [AdapterKind::VanillaTLora, AdapterKind::TLora] {
        let (mut net, x, ts, target) = runner::gradcheck_fixture(kind, None, 8).unwrap();
        let horizon = *ts.iter().max().unwrap();
        let ts_t = vec![horizon; ts.len()];
        net.zero_grad();
        net.forward_backward(&x, &ts_t, &target).unwrap();
        let ad = net.layers[1].linear.adapter().unwrap();
        let k = ad.active_rank(horizon).unwrap();
        for i in k..ad.rank() {
            nonzero += ad.a.grad.row(i).iter().filter(|&&g| g != 0.0).count();
            nonzero += ad.b.grad.col(i).iter().filter(|&&g| g != 0.0).count();
            if let Some(s) = &ad.s {
                nonzero += usize::from(s.grad.get(0, i) != 0.0);
            }
        }
    }
    let el = start.elapsed();
    verdict(
        worst <= 1e-6 && nonzero == 0 && within(el, 30.0),
        format!("{checks} network checks, max relative error {worst:.2e} (≤ 1e-6); {nonzero} nonzero masked gradient entries; {el:.2?} (< 30 s)"),
    )
}

fn criterion_5() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut rng_seed = 100u64;
    for kind in AdapterKind::ALL {
        for case in 0..100u64 {
            rng_seed += 1;
            let n = 4 + (case as usize * 7) % 29;
            let m = 4 + (case as usize * 11) % 23;
            let r = 1 + (case as usize) % n.min(m);
            let w = linalg::random_gaussian(n, m, 1.0, rng_seed).unwrap();
            let variant = InitVariant::all()[(case % 6) as usize];
            let mut ad = build(w, kind, r, variant, rng_seed);
            let noise = |rows, cols, tag| linalg::random_gaussian(rows, cols, 0.1, rng_seed * 7 + tag).unwrap();
            ad.a.value.axpy(1.0, &noise(r, m, 1));
            ad.b.value.axpy(1.0, &noise(n, r, 2));
            if let Some(s) = ad.s.as_mut() {
                s.value.axpy(1.0, &noise(1, r, 3));
            }
            let t = ((case * 97) % 1001) as usize;
            let x = noise(m, 5, 4);
            let fast = ad.forward(&x, t).unwrap();
            let dense = naive_matmul(&dense_oracle(&ad, t), &x);
            worst = worst.max(fast.sub(&dense).frobenius_norm() / dense.frobenius_norm());
        }
    }
    let el = start.elapsed();
    verdict(
        worst <= 1e-10 && within(el, 5.0),
        format!("500 cases, max relative error {worst:.2e} (≤ 1e-10), {el:.2?} (< 5 s)"),
    )
}

struct Toy {
    base: Denoiser,
    dataset: ToyDataset,
    pretrain_time: Duration,
}

fn pretrained_toy() -> Toy {
    let start = Instant::now();
    let cfg = ExperimentConfig::default();
    let (base, _, _) = runner::pretrain_model(&cfg).unwrap();
    let (dataset, _) = runner::dataset_for(&cfg).unwrap();
    Toy {
        base,
        dataset,
        pretrain_time: start.elapsed(),
    }
}

fn run_finetune(
    toy: &Toy,
    kind: AdapterKind,
    steps: usize,
    sampler: TimestepSampler,
    lambda_reg: f64,
    seed: u64,
) -> (Denoiser, FinetuneReport) {
    let r_min = kind.is_masked().then_some(16);
    let mut cfg = FinetuneConfig::for_kind(kind, 32, r_min);
    cfg.steps = steps;
    cfg.sampler = sampler;
    cfg.lambda_reg = lambda_reg;
    cfg.record_trace = true;
    let mut d = toy.base.clone();
    let report = diffusion::finetune(&mut d, &toy.dataset, &cfg, seed).unwrap();
    (d, report)
}

fn fmt_spectrum(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ")
}

fn criterion_6(toy: &Toy) -> Verdict {
    let start = Instant::now();
    let r = 32;
    let mut plain_ranks = Vec::new();
    let mut ortho_ranks = Vec::new();
    for kind in [AdapterKind::PlainLora, AdapterKind::OrthoLora, AdapterKind::TLora] {
        let (d, _) = run_finetune(toy, kind, 800, TimestepSampler::Uniform, 0.0, 0);
        for rep in analysis::denoiser_spectra(&d, false).unwrap() {
            println!(
                "    spectrum {:<15} {} eff_rank={} σ: {}",
                kind.as_str(),
                rep.layer,
                rep.effective_rank,
                fmt_spectrum(&rep.singular_values)
            );
            if kind == AdapterKind::PlainLora {
                plain_ranks.push(rep.effective_rank);
            } else {
                ortho_ranks.push(rep.effective_rank);
            }
        }
    }
    let el = start.elapsed() + toy.pretrain_time;
    let plain_ok = plain_ranks.iter().all(|&k| k as f64 <= 0.8 * r as f64);
    let ortho_ok = ortho_ranks.iter().all(|&k| k == r);
    // At threshold 0.95 the top r − 1 values of any length-r spectrum already
    // hold at least (r − 1)/r of its sum, which caps the effective rank here.
    let cap = (1..=r).find(|&k| k as f64 / r as f64 >= 0.95).unwrap();
    verdict(
        plain_ok && ortho_ok && within(el, 120.0),
        format!(
            "PlainLoRA eff ranks {plain_ranks:?} (≤ {:.1}: {}); Ortho/TLoRA eff ranks {ortho_ranks:?} (= {r}: {}; \
             upper bound for any length-{r} spectrum at 0.95 is {cap}); {el:.2?} incl. pretraining (< 2 min)",
            0.8 * r as f64,
            if plain_ok { "ok" } else { "no" },
            if ortho_ok { "ok" } else { "no" },
        ),
    )
}

fn criterion_7(toy: &Toy) -> Verdict {
    let start = Instant::now();
    let (_, ada) = run_finetune(toy, AdapterKind::AdaLoraSvd, 800, TimestepSampler::Uniform, 0.1, 0);
    let layers: Vec<String> = ada
        .trace
        .iter()
        .filter(|r| r.step == 0)
        .map(|r| r.layer.clone())
        .collect();
    let mut ratios = Vec::new();
    for layer in &layers {
        let err = |step: usize| {
            let row = ada.trace.iter().find(|r| r.step == step && &r.layer == layer).unwrap();
            row.err_a + row.err_b
        };
        ratios.push(err(800) / err(0));
    }
    let (_, ortho) = run_finetune(toy, AdapterKind::OrthoLora, 800, TimestepSampler::Uniform, 0.0, 0);
    let (worst_step, worst) = ortho
        .trace
        .iter()
        .map(|r| (r.step, r.err_a.max(r.err_b)))
        .fold((0, 0.0f64), |acc, x| if x.1 > acc.1 { x } else { acc });
    let first_breach = ortho.trace.iter().find(|r| r.err_a.max(r.err_b) > 1e-6).map(|r| r.step);
    let el = start.elapsed();
    let ada_ok = ratios.iter().all(|&q| q > 0.1);
    let ortho_ok = worst <= 1e-6;
    verdict(
        ada_ok && ortho_ok && within(el, 120.0),
        format!(
            "AdaLoRA err(800)/err(0) per layer {:?} (> 0.1: {}); OrthoLoRA max err {worst:.2e} at step {worst_step}, \
             first step above 1e-6: {first_breach:?} (≤ 1e-6 throughout: {}); {el:.2?} (< 2 min)",
            ratios.iter().map(|q| format!("{q:.3}")).collect::<Vec<_>>(),
            if ada_ok { "ok" } else { "no" },
            if ortho_ok { "ok" } else { "no" },
        ),
    )
}

fn mean_eval(toy: &Toy, kind: AdapterKind, steps: usize, sampler: TimestepSampler) -> (f64, f64) {
    let reports: Vec<EvalReport> = (0..3u64)
        .map(|seed| {
            let (d, _) = run_finetune(toy, kind, steps, sampler, 0.0, seed);
            analysis::evaluate(&d, &toy.dataset, 256, 1000 + seed).unwrap()
        })
        .collect();
    let fid = reports.iter().map(|r| r.concept_fidelity).sum::<f64>() / 3.0;
    let align = reports.iter().map(|r| r.context_alignment).sum::<f64>() / 3.0;
    (fid, align)
}

fn criterion_8(toy: &Toy) -> Verdict {
    let start = Instant::now();
    let high = TimestepSampler::Interval { lo: 800, hi: 1000 };
    let low = TimestepSampler::Interval { lo: 0, hi: 500 };
    let (fid_hi, align_hi) = mean_eval(toy, AdapterKind::PlainLora, 500, high);
    let (fid_lo, align_lo) = mean_eval(toy, AdapterKind::PlainLora, 500, low);
    let el = start.elapsed();
    let a_ok = align_hi > align_lo;
    let f_ok = fid_lo > fid_hi;
    verdict(
        a_ok && f_ok && within(el, 300.0),
        format!(
            "alignment [800,1000] {align_hi:.4} vs [0,500] {align_lo:.4} (high worse: {}); \
             fidelity [0,500] {fid_lo:.5} vs [800,1000] {fid_hi:.5} (low worse: {}); {el:.2?} (< 5 min)",
            if a_ok { "ok" } else { "no" },
            if f_ok { "ok" } else { "no" },
        ),
    )
}

fn criterion_9(toy: &Toy) -> Verdict {
    let start = Instant::now();
    let (fid_p, align_p) = mean_eval(toy, AdapterKind::PlainLora, 500, TimestepSampler::Uniform);
    let (fid_t, align_t) = mean_eval(toy, AdapterKind::TLora, 800, TimestepSampler::Uniform);
    let el = start.elapsed();
    let a_ok = align_t < align_p;
    let f_ok = fid_t <= 1.25 * fid_p;
    verdict(
        a_ok && f_ok && within(el, 300.0),
        format!(
            "alignment TLoRA {align_t:.4} vs PlainLoRA {align_p:.4} (TLoRA lower: {}); \
             fidelity TLoRA {fid_t:.5} vs PlainLoRA {fid_p:.5} (≤ 1.25×: {}); {el:.2?} (< 5 min)",
            if a_ok { "ok" } else { "no" },
            if f_ok { "ok" } else { "no" },
        ),
    )
}

fn criterion_10() -> Verdict {
    let start = Instant::now();
    let root = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_json(
        r#"{"seed": 5, "pretrain": {"steps": 300},
            "adapter": {"kind": "t_lora", "r": 32, "schedule": {"r_min": 16}},
            "finetune": {"steps": 100}}"#,
    )
    .unwrap();
    let run = |dir: &Path| -> Vec<(String, String)> {
        std::fs::create_dir_all(dir).unwrap();
        let base = dir.join("base.tlra");
        let ft = dir.join("ft.tlra");
        runner::run_pretrain(&cfg, &base).unwrap();
        runner::run_finetune(&base, &cfg, &ft).unwrap();
        let conds = [Condition::concept(0), Condition::concept(3)];
        runner::run_sample(&ft, &conds, 64, 1, None, &dir.join("samples.csv")).unwrap();
        runner::run_analyze(&ft, true, &dir.join("spectrum.csv"), &dir.join("ranks.csv")).unwrap();
        runner::run_evaluate(&ft, 256, 2, &dir.join("eval.csv")).unwrap();
        let mut names: Vec<String> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        names.into_iter().map(|n| (file_hash(&dir.join(&n)), n)).collect()
    };
    let a = run(&root.path().join("a"));
    let b = run(&root.path().join("b"));
    let mut roundtrip_ok = true;
    for name in ["base.tlra", "ft.tlra"] {
        let path = root.path().join("a").join(name);
        let bytes = std::fs::read(&path).unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        let model = checkpoint::to_denoiser(&back).unwrap();
        let meta = checkpoint::model_meta(&back).unwrap();
        let again = checkpoint::from_denoiser(&model, meta).unwrap().to_bytes().unwrap();
        roundtrip_ok &= sha256(&back.to_bytes().unwrap()) == sha256(&bytes) && sha256(&again) == sha256(&bytes);
    }
    let el = start.elapsed();
    verdict(
        a == b && a.len() == 9 && roundtrip_ok && within(el, 60.0),
        format!(
            "{} artifacts hashed across two runs, identical: {}; checkpoint round-trip hash equality: {roundtrip_ok}; {el:.2?} (< 1 min)",
            a.len(),
            a == b
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut report = |n: usize, name: &'static str, v: Verdict| {
        println!(
            "{} criterion {n} ({name}): {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        results.push((n, name, v));
    };
    report(1, "rank schedule exactness", criterion_1());
    report(2, "init identity", criterion_2());
    report(3, "orthogonality at init", criterion_3());
    report(4, "gradient correctness", criterion_4());
    report(5, "factored forward equivalence", criterion_5());
    let toy = pretrained_toy();
    println!("    (pretrained toy denoiser in {:.2?})", toy.pretrain_time);
    report(6, "effective-rank collapse", criterion_6(&toy));
    report(7, "slow orthogonalization", criterion_7(&toy));
    report(8, "interval overfitting", criterion_8(&toy));
    report(9, "LoRA vs T-LoRA trade-off", criterion_9(&toy));
    report(10, "engineering determinism", criterion_10());

    let failed: Vec<String> = results
        .iter()
        .filter(|(_, _, v)| !v.pass)
        .map(|(n, name, _)| format!("{n} ({name})"))
        .collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
