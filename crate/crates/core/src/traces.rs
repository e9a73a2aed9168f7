//! Line-delimited trace records and the TECA curve analysis over them.
//!
//! Each record describes one response with either `"entropies"` (per-step
//! entropies in nats) or `"logits"` (per-step logit arrays) plus
//! `"temperature"`. Optional fields: `"correct"`, `"id"`, `"difficulty"`.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::entropy::{
    average_curves, entropy_series, forking_steps, normalize_curve, peak_and_tail_mean, tail_drop, teca_of,
    EntropySeries, LogitTrace, NormalizedCurve,
};
use crate::error::{Error, Result};

/// Name of the marker file that identifies an analysis output directory.
pub const OUTPUT_MARKER: &str = ".teca-analysis";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropies: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
}

impl TraceRecord {
    /// Entropy series of the record. `temperature` overrides the record's
    /// own temperature for logit records and is ignored for entropy records.
    pub fn series(&self, temperature: Option<f64>) -> Result<EntropySeries> {
        match (&self.entropies, &self.logits) {
            (Some(h), None) => EntropySeries::new(h.clone()),
            (None, Some(z)) => {
                let t = temperature
                    .or(self.temperature)
                    .ok_or_else(|| Error::invalid("logit record lacks \"temperature\""))?;
                Ok(entropy_series(&LogitTrace::new(z.clone(), t)?))
            }
            (Some(_), Some(_)) => Err(Error::invalid("record holds both \"entropies\" and \"logits\"")),
            (None, None) => Err(Error::invalid("record holds neither \"entropies\" nor \"logits\"")),
        }
    }
}

pub fn write_traces(path: &Path, records: &[TraceRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("trace serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeOptions {
    pub points: usize,
    pub correct_only: bool,
    pub split_by_correct: bool,
    pub tail_fraction: f64,
    pub forking_quantile: f64,
    pub temperature: Option<f64>,
    pub strict: bool,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            points: 100,
            correct_only: false,
            split_by_correct: false,
            tail_fraction: 0.1,
            forking_quantile: 0.2,
            temperature: None,
            strict: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SkipTally {
    /// Unparseable or invalid records.
    pub malformed: usize,
    /// Records with fewer than two steps.
    pub too_short: usize,
    /// Records without `"correct"` when correctness filtering was requested.
    pub missing_correct: usize,
}

impl SkipTally {
    pub fn total(&self) -> usize {
        self.malformed + self.too_short + self.missing_correct
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveStats {
    pub label: String,
    pub traces: usize,
    pub tail_drop: f64,
    pub peak: f64,
    pub tail_mean: f64,
    /// `tail_mean / peak`, or 0 when the peak is 0.
    pub tail_to_peak: f64,
    pub forking_steps_total: usize,
    pub forking_steps_mean: f64,
    pub mean_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisStats {
    pub records: usize,
    pub skipped: SkipTally,
    pub options: AnalyzeOptions,
    pub curves: Vec<CurveStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub curves: Vec<(String, NormalizedCurve)>,
    pub stats: AnalysisStats,
}

struct Bucket {
    label: &'static str,
    curves: Vec<NormalizedCurve>,
    forking: usize,
    steps: usize,
}

impl Bucket {
    fn new(label: &'static str) -> Self {
        Self {
            label,
            curves: Vec::new(),
            forking: 0,
            steps: 0,
        }
    }
}

fn validate_options(opts: &AnalyzeOptions) -> Result<()> {
    if opts.points < 2 {
        return Err(Error::invalid(format!("points must be >= 2, got {}", opts.points)));
    }
    if !(opts.tail_fraction > 0.0 && opts.tail_fraction < 1.0) {
        return Err(Error::invalid(format!("tail fraction must lie in (0, 1), got {}", opts.tail_fraction)));
    }
    if !(opts.forking_quantile > 0.0 && opts.forking_quantile < 1.0) {
        return Err(Error::invalid(format!(
            "forking quantile must lie in (0, 1), got {}",
            opts.forking_quantile
        )));
    }
    if let Some(t) = opts.temperature {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::invalid(format!("temperature must be positive, got {t}")));
        }
    }
    Ok(())
}

/// Runs the analysis over raw record lines. Malformed records are counted,
/// or abort the run with their line number under `strict`.
pub fn analyze_lines<I, S>(lines: I, opts: &AnalyzeOptions) -> Result<Analysis>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    validate_options(opts)?;
    let split = opts.split_by_correct && !opts.correct_only;
    let mut buckets = if split {
        vec![Bucket::new("correct"), Bucket::new("incorrect")]
    } else if opts.correct_only {
        vec![Bucket::new("correct")]
    } else {
        vec![Bucket::new("all")]
    };
    let mut skipped = SkipTally::default();
    let mut records = 0;
    for (i, line) in lines.into_iter().enumerate() {
        let line = line.as_ref().trim();
        if line.is_empty() {
            continue;
        }
        records += 1;
        let parsed = serde_json::from_str::<TraceRecord>(line)
            .map_err(|e| Error::invalid(e.to_string()))
            .and_then(|r| r.series(opts.temperature).map(|s| (r, s)));
        let (record, series) = match parsed {
            Ok(v) => v,
            Err(e) if opts.strict => {
                return Err(Error::Record {
                    line: i + 1,
                    message: e.to_string(),
                })
            }
            Err(_) => {
                skipped.malformed += 1;
                continue;
            }
        };
        let bucket = match (opts.correct_only, split, record.correct) {
            (true, _, Some(true)) => 0,
            (true, _, Some(false)) => continue,
            (false, true, Some(c)) => usize::from(!c),
            (true, _, None) | (false, true, None) => {
                skipped.missing_correct += 1;
                continue;
            }
            (false, false, _) => 0,
        };
        if series.len() < 2 {
            skipped.too_short += 1;
            continue;
        }
        let curve = teca_of(series.values())?;
        let b = &mut buckets[bucket];
        b.curves.push(normalize_curve(curve.values(), opts.points)?);
        b.forking += forking_steps(&series, opts.forking_quantile)?.len();
        b.steps += series.len();
    }
    let mut curves = Vec::new();
    let mut stats = Vec::new();
    for b in buckets {
        if b.curves.is_empty() {
            continue;
        }
        let avg = average_curves(&b.curves)?;
        let (peak, tail_mean) = peak_and_tail_mean(avg.points(), opts.tail_fraction);
        let n = b.curves.len();
        stats.push(CurveStats {
            label: b.label.to_string(),
            traces: n,
            tail_drop: tail_drop(avg.points(), opts.tail_fraction)?,
            peak,
            tail_mean,
            tail_to_peak: if peak > 0.0 { tail_mean / peak } else { 0.0 },
            forking_steps_total: b.forking,
            forking_steps_mean: b.forking as f64 / n as f64,
            mean_length: b.steps as f64 / n as f64,
        });
        curves.push((b.label.to_string(), avg));
    }
    Ok(Analysis {
        curves,
        stats: AnalysisStats {
            records,
            skipped,
            options: *opts,
            curves: stats,
        },
    })
}

pub fn analyze_file(path: &Path, opts: &AnalyzeOptions) -> Result<Analysis> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> = std::io::BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    analyze_lines(lines, opts)
}

/// CSV with header `step_fraction,value`.
pub fn curve_csv(curve: &NormalizedCurve) -> String {
    let mut out = String::from("step_fraction,value\n");
    for (x, y) in curve.with_fractions() {
        out.push_str(&format!("{x},{y}\n"));
    }
    out
}

/// Whether `path` is, or lies directly inside, an analysis output directory.
pub fn is_analysis_output(path: &Path) -> bool {
    let dir: PathBuf = if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    };
    let dir = if dir.as_os_str().is_empty() { PathBuf::from(".") } else { dir };
    dir.join(OUTPUT_MARKER).exists()
}

/// Writes `curve.csv` (first curve), one `curve_<label>.csv` per curve when
/// several exist, `stats.json`, and the output marker.
pub fn write_analysis(dir: &Path, analysis: &Analysis) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: String, body: &[u8]| -> Result<()> {
        let p = dir.join(name);
        crate::checkpoint::write_atomic(&p, body)?;
        written.push(p);
        Ok(())
    };
    put(OUTPUT_MARKER.to_string(), b"analysis output\n")?;
    if let Some((_, first)) = analysis.curves.first() {
        put("curve.csv".into(), curve_csv(first).as_bytes())?;
    }
    if analysis.curves.len() > 1 {
        for (label, c) in &analysis.curves {
            put(format!("curve_{label}.csv"), curve_csv(c).as_bytes())?;
        }
    }
    let stats = serde_json::to_string_pretty(&analysis.stats).expect("stats serialize");
    put("stats.json".into(), stats.as_bytes())?;
    Ok(written)
}
