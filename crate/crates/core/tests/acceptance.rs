//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion to
//! the real stderr (bypassing test output capture) and fails if any
//! criterion fails.

mod common;

use std::io::Write;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teca_core::config::TrainConfig;
use teca_core::entropy::{teca_of, token_entropy};
use teca_core::grpo::{self, group_advantages, kl_penalty, Aggregation, DegeneracyPolicy, Recorder};
use teca_core::reward::{self, Answer, RewardMode};
use teca_core::telemetry::{self, delta_length_pct, epoch_mean};
use teca_core::traces::{self, AnalyzeOptions};
use teca_core::warmstart::initial_policy;

struct Outcome {
    id: usize,
    passed: bool,
    detail: String,
}

fn say(line: &str) {
    let mut err = std::io::stderr();
    let _ = writeln!(err, "{line}");
    let _ = err.flush();
}

fn run(id: usize, name: &str, limit: Option<Duration>, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let start = Instant::now();
    let (ok, mut detail) = f();
    let took = start.elapsed();
    let in_time = limit.is_none_or(|l| took <= l);
    if !in_time {
        detail.push_str(&format!("; exceeded {:.0}s limit", limit.unwrap().as_secs_f64()));
    }
    let passed = ok && in_time;
    say(&format!(
        "[{}] criterion {id}: {name} ({:.2}s) {detail}",
        if passed { "PASS" } else { "FAIL" },
        took.as_secs_f64()
    ));
    Outcome { id, passed, detail }
}

fn entropy_identities() -> (bool, String) {
    let mut worst: f64 = 0.0;
    for v in [2usize, 4, 64, 1024] {
        let h = token_entropy(&vec![0.37; v], 1.0).unwrap();
        worst = worst.max((h - (v as f64).ln()).abs());
    }
    let uniform = worst;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut invariance: f64 = 0.0;
    for _ in 0..10_000 {
        let v = rng.gen_range(2..64);
        let t = rng.gen_range(0.3..3.0);
        let z: Vec<f64> = (0..v).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let h = token_entropy(&z, t).unwrap();
        let c = rng.gen_range(-50.0..50.0);
        let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
        let mut perm = z.clone();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        invariance = invariance
            .max((token_entropy(&shifted, t).unwrap() - h).abs())
            .max((token_entropy(&perm, t).unwrap() - h).abs());
    }
    (
        uniform <= 1e-9 && invariance <= 1e-9,
        format!("uniform err {uniform:.1e}, shift/permutation err {invariance:.1e}"),
    )
}

fn compensated_prefix_means(values: &[f64]) -> Vec<f64> {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let t = sum + v;
            if sum.abs() >= v.abs() {
                comp += (sum - t) + v;
            } else {
                comp += (v - t) + sum;
            }
            sum = t;
            (sum + comp) / (i + 1) as f64
        })
        .collect()
}

fn teca_exactness() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let len = if i == 0 { 100_000 } else { rng.gen_range(1..=100_000) };
        let scale = rng.gen_range(0.1..5.0);
        let h: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..scale)).collect();
        let got = teca_of(&h).unwrap();
        let want = compensated_prefix_means(&h);
        for (a, b) in got.values().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    (worst <= 1e-12, format!("max abs err {worst:.1e}"))
}

fn reward_law() -> (bool, String) {
    let exact = reward::teca_reward(0.0).unwrap() == 2.0 && reward::teca_reward(2f64.ln()).unwrap() == 1.5;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut min_correct, mut max_incorrect) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..100_000 {
        let truth = rng.gen_range(0..10);
        let prediction = match rng.gen_range(0..3) {
            0 => Answer::Absent,
            1 => Answer::Value(truth),
            _ => Answer::Value(rng.gen_range(0..10)),
        };
        let teca = if rng.gen_bool(0.1) { rng.gen_range(0.0..1e3) } else { rng.gen_range(0.0..4.0) };
        let truncated = rng.gen_bool(0.1);
        let b = reward::score(RewardMode::Cer, prediction, truth, Some(teca), truncated).unwrap();
        if b.accuracy == 1.0 {
            min_correct = min_correct.min(b.combined);
        } else {
            max_incorrect = max_incorrect.max(b.combined);
        }
    }
    (
        exact && min_correct > max_incorrect,
        format!("exact anchors {exact}, min correct {min_correct:.4} > max incorrect {max_incorrect:.4}"),
    )
}

fn advantage_normalization() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut mean_err, mut std_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..10_000 {
        let rewards: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..2.0)).collect();
        let (a, degenerate) = group_advantages(&rewards, DegeneracyPolicy::Zero);
        assert!(!degenerate);
        let m = a.iter().sum::<f64>() / 8.0;
        let s = (a.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 8.0).sqrt();
        mean_err = mean_err.max(m.abs());
        std_err = std_err.max((s - 1.0).abs());
    }
    let mut equal_ok = true;
    for _ in 0..1000 {
        let r = rng.gen_range(0.0..2.0);
        let (a, degenerate) = group_advantages(&[r; 8], DegeneracyPolicy::Zero);
        equal_ok &= degenerate && a.iter().all(|&x| x == 0.0);
    }
    (
        mean_err <= 1e-9 && std_err <= 1e-9 && equal_ok,
        format!("mean err {mean_err:.1e}, std err {std_err:.1e}, equal groups zero {equal_ok}"),
    )
}

fn kl_estimator() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut nonneg = true;
    let mut zero_iff = true;
    for _ in 0..100_000 {
        let a = rng.gen_range(-20.0..0.0);
        let b = if rng.gen_bool(0.1) { a } else { rng.gen_range(-20.0..0.0) };
        let k = kl_penalty(a, b);
        nonneg &= k >= 0.0;
        zero_iff &= if a == b { k.abs() <= 1e-12 } else { (a - b).abs() < 1e-5 || k > 1e-12 };
    }
    let rho2 = kl_penalty(-3.0, -3.0 + 2f64.ln());
    let rho_err = (rho2 - (2.0 - 2f64.ln() - 1.0)).abs();
    (
        nonneg && zero_iff && rho_err <= 1e-12,
        format!("nonnegative {nonneg}, zero iff equal {zero_iff}, rho=2 err {rho_err:.1e}"),
    )
}

fn gradient_gate() -> (bool, String) {
    let mut worst: f64 = 0.0;
    for i in 0..20u64 {
        let beta = if i % 2 == 0 { 0.0 } else { 0.001 };
        let regime = if (i / 2) % 2 == 0 { common::Regime::Unclipped } else { common::Regime::Clipped };
        let inst = common::small_instance(500 + i, beta, regime, Aggregation::TokenMean);
        worst = worst.max(common::gradient_error(&inst));
    }
    (worst <= 1e-4, format!("max relative err {worst:.2e} over 20 instances"))
}

fn desk_config() -> TrainConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.cfg");
    TrainConfig::load(&path).unwrap()
}

struct Arm {
    report: telemetry::EvalReport,
    records: Vec<telemetry::TelemetryRecord>,
    traces: Vec<traces::TraceRecord>,
}

fn train_arm(cfg: &TrainConfig, initial: &teca_core::model::PolicyParams, name: &str) -> Arm {
    let start = Instant::now();
    let mut rec = Recorder::default();
    let out = grpo::train(cfg, initial, &mut rec).unwrap_or_else(|e| panic!("{name} arm: {e}"));
    let problems = grpo::evaluation_problems(cfg);
    let eval = telemetry::evaluate(&out.params, &problems, cfg.max_response_length, name).unwrap();
    say(&format!(
        "    {name}: {} iterations in {:.0}s, eval accuracy {:.3}, mean length {:.2}",
        out.iterations,
        start.elapsed().as_secs_f64(),
        eval.report.accuracy,
        eval.report.mean_length
    ));
    Arm {
        report: eval.report,
        records: rec.records,
        traces: eval.traces,
    }
}

fn correct_curve(arm: &Arm) -> Option<traces::CurveStats> {
    let lines: Vec<String> = arm.traces.iter().map(|t| serde_json::to_string(t).unwrap()).collect();
    let opts = AnalyzeOptions {
        correct_only: true,
        ..AnalyzeOptions::default()
    };
    traces::analyze_lines(lines, &opts).ok()?.stats.curves.into_iter().next()
}

#[test]
fn acceptance() {
    let secs = Duration::from_secs;
    let mut results = vec![
        run(1, "entropy identities", Some(secs(5)), entropy_identities),
        run(2, "TECA exactness", Some(secs(10)), teca_exactness),
        run(3, "reward law", Some(secs(5)), reward_law),
        run(4, "advantage normalization", Some(secs(5)), advantage_normalization),
        run(5, "KL estimator", None, kl_estimator),
        run(6, "gradient gate", Some(secs(60)), gradient_gate),
    ];

    let start = Instant::now();
    let cer_cfg = desk_config();
    let base_cfg = TrainConfig {
        reward_mode: RewardMode::AccuracyOnly,
        ..cer_cfg.clone()
    };
    let initial = initial_policy(&cer_cfg).unwrap();
    say(&format!("    warm start finished in {:.0}s", start.elapsed().as_secs_f64()));
    let cer = train_arm(&cer_cfg, &initial, "cer");
    let base = train_arm(&base_cfg, &initial, "accuracy");
    let total = start.elapsed();

    results.push(run(7, "desk-scale training reproduction", None, || {
        let delta = delta_length_pct(base.report.mean_length, cer.report.mean_length);
        let acc_gap = 100.0 * (cer.report.accuracy - base.report.accuracy).abs();
        let last = cer.records.iter().map(|r| r.epoch).max().unwrap_or(0);
        let field = |f: &str| (epoch_mean(&cer.records, 0, f).unwrap(), epoch_mean(&cer.records, last, f).unwrap());
        let (clip0, clip1) = field("clip_ratio");
        let (len0, len1) = field("mean_length");
        let ok = total <= secs(20 * 60)
            && delta >= 20.0 && acc_gap <= 5.0 && clip1 < clip0 && len1 < len0;
        (
            ok,
            format!(
                "total {:.0}s; ΔLEN {delta:.2}% (ACC cer {:.3} vs base {:.3}, gap {acc_gap:.2} pts); \
                 clip_ratio epoch 0 {clip0:.4} -> epoch {last} {clip1:.4}; mean_length {len0:.2} -> {len1:.2}",
                total.as_secs_f64(),
                cer.report.accuracy,
                base.report.accuracy
            ),
        )
    }));

    results.push(run(8, "TECA-curve shape", None, || match (correct_curve(&cer), correct_curve(&base)) {
        (Some(c), Some(b)) => (
            c.traces >= 500 && c.tail_drop > 0.0 && c.tail_to_peak < b.tail_to_peak,
            format!(
                "cer: {} traces, tail_drop {:.4}, tail/peak {:.4}; baseline: {} traces, tail_drop {:.4}, tail/peak {:.4}",
                c.traces, c.tail_drop, c.tail_to_peak, b.traces, b.tail_drop, b.tail_to_peak
            ),
        ),
        _ => (false, "no correct evaluation traces".into()),
    }));

    results.push(run(9, "adaptivity", None, || {
        let k_min = cer_cfg.task.min_difficulty;
        let k_max = cer_cfg.task.max_difficulty;
        let delta_at = |k: usize| {
            let b = base.report.difficulty(k)?;
            let c = cer.report.difficulty(k)?;
            Some(delta_length_pct(b.mean_length, c.mean_length))
        };
        match (delta_at(k_min), delta_at(k_max)) {
            (Some(easy), Some(hard)) => (
                easy > hard,
                format!("ΔLEN k={k_min} {easy:.2}% vs k={k_max} {hard:.2}%"),
            ),
            _ => (false, "missing difficulty buckets".into()),
        }
    }));

    let failed: Vec<&Outcome> = results.iter().filter(|o| !o.passed).collect();
    say(&format!("acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len()));
    assert!(
        failed.is_empty(),
        "failed criteria: {}",
        failed.iter().map(|o| format!("{} ({})", o.id, o.detail)).collect::<Vec<_>>().join("; ")
    );
}
