use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teca_core::traces::{self, AnalyzeOptions, TraceRecord};

fn synthetic(n: usize, seed: u64) -> Vec<TraceRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.gen_range(2..60);
            let correct = Some(rng.gen_bool(0.6));
            if i % 5 == 0 {
                TraceRecord {
                    id: Some(format!("t{i}")),
                    correct,
                    logits: Some((0..len).map(|_| (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect()),
                    temperature: Some(1.3),
                    ..TraceRecord::default()
                }
            } else {
                // rises then decays, with noise
                let peak = rng.gen_range(0.2..0.8);
                let h = (0..len)
                    .map(|t| {
                        let x = t as f64 / len as f64;
                        let base = if x < peak { x / peak } else { (1.0 - x) / (1.0 - peak) };
                        (2.0 * base + rng.gen_range(0.0..0.3)).max(0.0)
                    })
                    .collect();
                TraceRecord {
                    id: Some(format!("t{i}")),
                    correct,
                    entropies: Some(h),
                    ..TraceRecord::default()
                }
            }
        })
        .collect()
}

fn entropies_of(r: &TraceRecord) -> Vec<f64> {
    if let Some(h) = &r.entropies {
        return h.clone();
    }
    let t = r.temperature.unwrap();
    r.logits
        .as_ref()
        .unwrap()
        .iter()
        .map(|z| {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = z.iter().map(|v| ((v - m) / t).exp()).collect();
            let s: f64 = w.iter().sum();
            -w.iter().map(|x| x / s * (x / s).ln()).sum::<f64>()
        })
        .collect()
}

struct Reference {
    curve: Vec<f64>,
    tail_drop: f64,
    forking: usize,
    mean_length: f64,
}

fn reference(records: &[&TraceRecord], points: usize, tail_fraction: f64, quantile: f64) -> Reference {
    let mut sums = vec![0.0; points];
    let mut forking = 0;
    let mut steps = 0;
    for r in records {
        let h = entropies_of(r);
        let mut acc = 0.0;
        let teca: Vec<f64> = h
            .iter()
            .enumerate()
            .map(|(i, v)| {
                acc += v;
                acc / (i + 1) as f64
            })
            .collect();
        let l = teca.len();
        for (j, s) in sums.iter_mut().enumerate() {
            let x = j as f64 * (l - 1) as f64 / (points - 1) as f64;
            let lo = (x.floor() as usize).min(l - 1);
            let hi = (lo + 1).min(l - 1);
            *s += teca[lo] + (x - lo as f64) * (teca[hi] - teca[lo]);
        }
        let mut sorted = h.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let k = ((quantile * l as f64).ceil() as usize).max(1);
        forking += h.iter().filter(|&&v| v >= sorted[k - 1]).count();
        steps += l;
    }
    let curve: Vec<f64> = sums.iter().map(|s| s / records.len() as f64).collect();
    let window = (tail_fraction * points as f64).ceil() as usize;
    let peak = curve.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tail = curve[points - window..].iter().sum::<f64>() / window as f64;
    Reference {
        curve,
        tail_drop: peak - tail,
        forking,
        mean_length: steps as f64 / records.len() as f64,
    }
}

fn lines(records: &[TraceRecord]) -> Vec<String> {
    records.iter().map(|r| serde_json::to_string(r).unwrap()).collect()
}

#[test]
fn analysis_matches_reference_implementation() {
    let records = synthetic(100, 1);
    let opts = AnalyzeOptions::default();
    let got = traces::analyze_lines(lines(&records), &opts).unwrap();
    let all: Vec<&TraceRecord> = records.iter().collect();
    let want = reference(&all, 100, 0.1, 0.2);
    let (label, curve) = &got.curves[0];
    assert_eq!(label, "all");
    for (a, b) in curve.points().iter().zip(&want.curve) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    let s = &got.stats.curves[0];
    assert_eq!(s.traces, 100);
    assert!((s.tail_drop - want.tail_drop).abs() < 1e-12);
    assert_eq!(s.forking_steps_total, want.forking);
    assert!((s.mean_length - want.mean_length).abs() < 1e-12);
}

#[test]
fn split_and_filter_match_reference() {
    let records = synthetic(100, 2);
    let opts = AnalyzeOptions {
        split_by_correct: true,
        points: 50,
        ..AnalyzeOptions::default()
    };
    let got = traces::analyze_lines(lines(&records), &opts).unwrap();
    for (label, flag) in [("correct", true), ("incorrect", false)] {
        let subset: Vec<&TraceRecord> = records.iter().filter(|r| r.correct == Some(flag)).collect();
        let want = reference(&subset, 50, 0.1, 0.2);
        let (_, curve) = got.curves.iter().find(|(l, _)| l == label).unwrap();
        for (a, b) in curve.points().iter().zip(&want.curve) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    let only = AnalyzeOptions {
        correct_only: true,
        ..AnalyzeOptions::default()
    };
    let got = traces::analyze_lines(lines(&records), &only).unwrap();
    assert_eq!(got.curves.len(), 1);
    assert_eq!(got.stats.curves[0].traces, records.iter().filter(|r| r.correct == Some(true)).count());
}

#[test]
fn file_round_trip_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("traces.jsonl");
    let records = synthetic(30, 3);
    traces::write_traces(&path, &records).unwrap();
    let opts = AnalyzeOptions::default();
    let a = traces::analyze_file(&path, &opts).unwrap();
    let b = traces::analyze_lines(lines(&records), &opts).unwrap();
    assert_eq!(a.curves[0].1.points(), b.curves[0].1.points());

    let out = dir.path().join("analysis");
    traces::write_analysis(&out, &a).unwrap();
    assert!(out.join("curve.csv").exists() && out.join("stats.json").exists());
    assert!(traces::is_analysis_output(&out));
    assert!(traces::is_analysis_output(&out.join("curve.csv")));
    assert!(!traces::is_analysis_output(&path));
    let csv = std::fs::read_to_string(out.join("curve.csv")).unwrap();
    assert_eq!(csv.lines().count(), 101);
    assert!(csv.starts_with("step_fraction,value\n"));
}

#[test]
fn malformed_records_are_counted_or_fatal() {
    let mut l = lines(&synthetic(5, 4));
    l.insert(2, "{not json".into());
    l.push(r#"{"entropies":[0.5]}"#.into());
    let got = traces::analyze_lines(&l, &AnalyzeOptions::default()).unwrap();
    assert_eq!(got.stats.skipped.malformed, 1);
    assert_eq!(got.stats.skipped.too_short, 1);
    assert_eq!(got.stats.curves[0].traces, 5);
    let strict = AnalyzeOptions {
        strict: true,
        ..AnalyzeOptions::default()
    };
    match traces::analyze_lines(&l, &strict) {
        Err(teca_core::Error::Record { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a record error, got {other:?}"),
    }
}
