//! Token entropy, TECA (token entropy cumulative average) and the curve
//! operations used to compare reasoning traces of different lengths.
//!
//! All entropies are in nats. Every function here is pure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-step logit vectors for one generated response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitTrace {
    steps: Vec<Vec<f64>>,
    vocab_size: usize,
    temperature: f64,
}

impl LogitTrace {
    pub fn new(steps: Vec<Vec<f64>>, temperature: f64) -> Result<Self> {
        let first = steps
            .first()
            .ok_or_else(|| Error::invalid("logit trace needs at least one step"))?;
        let vocab_size = first.len();
        if vocab_size == 0 {
            return Err(Error::invalid("logit vectors must be non-empty"));
        }
        check_temperature(temperature)?;
        for (step, logits) in steps.iter().enumerate() {
            if logits.len() != vocab_size {
                return Err(Error::AtStep {
                    step,
                    source: Box::new(Error::invalid(format!(
                        "expected {vocab_size} logits, found {}",
                        logits.len()
                    ))),
                });
            }
            if let Some(bad) = logits.iter().find(|z| !z.is_finite()) {
                return Err(Error::AtStep {
                    step,
                    source: Box::new(Error::invalid(format!("non-finite logit {bad}"))),
                });
            }
        }
        Ok(Self {
            steps,
            vocab_size,
            temperature,
        })
    }

    pub fn steps(&self) -> &[Vec<f64>] {
        &self.steps
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// The same logits read at a different temperature.
    pub fn with_temperature(&self, temperature: f64) -> Result<Self> {
        check_temperature(temperature)?;
        Ok(Self {
            temperature,
            ..self.clone()
        })
    }
}

/// Per-step token entropies `H_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntropySeries(Vec<f64>);

impl EntropySeries {
    /// Wraps precomputed entropies. Values must be finite and non-negative.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((step, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::AtStep {
                step,
                source: Box::new(Error::invalid(format!("entropy {v} is not a finite non-negative value"))),
            });
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Running mean of token entropy, `TECA_t = (H_1 + ... + H_t) / t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TecaCurve {
    values: Vec<f64>,
}

impl TecaCurve {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// TECA at the final generated step.
    pub fn last(&self) -> f64 {
        // construction guarantees at least one value
        self.values[self.values.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// A curve resampled onto a fixed number of evenly spaced points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedCurve {
    points: Vec<f64>,
    source_length: usize,
}

impl NormalizedCurve {
    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn source_length(&self) -> usize {
        self.source_length
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `(step_fraction, value)` pairs with the fraction running over `[0, 1]`.
    pub fn with_fractions(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let denom = (self.points.len().max(2) - 1) as f64;
        self.points
            .iter()
            .enumerate()
            .map(move |(i, v)| (i as f64 / denom, *v))
    }
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::invalid(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    Ok(())
}

/// Shannon entropy (nats) of `softmax(logits / temperature)`.
///
/// Uses max-subtraction, so any finite logits are safe. The result is clamped
/// into `[0, ln V]` to absorb last-bit rounding.
pub fn token_entropy(logits: &[f64], temperature: f64) -> Result<f64> {
    check_temperature(temperature)?;
    if logits.is_empty() {
        return Err(Error::invalid("logit vector is empty"));
    }
    if let Some(bad) = logits.iter().find(|z| !z.is_finite()) {
        return Err(Error::invalid(format!("non-finite logit {bad}")));
    }
    Ok(entropy_unchecked(logits, temperature))
}

/// Entropy without input validation; callers guarantee finite logits and
/// a positive temperature.
pub(crate) fn entropy_unchecked(logits: &[f64], temperature: f64) -> f64 {
    let inv_t = 1.0 / temperature;
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z)) * inv_t;
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for &z in logits {
        let s = z * inv_t - max;
        let e = s.exp();
        sum += e;
        weighted += e * s;
    }
    // H = ln S - (1/S) * sum_j e_j * s_j
    let h = sum.ln() - weighted / sum;
    h.clamp(0.0, (logits.len() as f64).ln())
}

pub fn entropy_series(trace: &LogitTrace) -> EntropySeries {
    EntropySeries(
        trace
            .steps
            .iter()
            .map(|z| entropy_unchecked(z, trace.temperature))
            .collect(),
    )
}

pub fn teca(series: &EntropySeries) -> Result<TecaCurve> {
    teca_of(series.values())
}

/// TECA over raw values; the incremental-mean recurrence keeps the running
/// value within rounding of the direct prefix mean at any length.
pub fn teca_of(values: &[f64]) -> Result<TecaCurve> {
    if values.is_empty() {
        return Err(Error::invalid("TECA of an empty entropy series"));
    }
    let mut out = Vec::with_capacity(values.len());
    let mut mean = 0.0;
    for (i, &h) in values.iter().enumerate() {
        mean += (h - mean) / (i + 1) as f64;
        out.push(mean);
    }
    Ok(TecaCurve { values: out })
}

/// Linear-interpolation resampling of `curve` onto `n` points spread
/// uniformly over source positions `[0, L-1]`. Endpoints are copied exactly.
pub fn normalize_curve(curve: &[f64], n: usize) -> Result<NormalizedCurve> {
    let len = curve.len();
    if len < 2 {
        return Err(Error::invalid(format!(
            "cannot interpolate a curve of length {len}; need at least 2 points"
        )));
    }
    if n < 2 {
        return Err(Error::invalid(format!("normalized length must be >= 2, got {n}")));
    }
    let span = (len - 1) as f64;
    let denom = (n - 1) as f64;
    let mut points = Vec::with_capacity(n);
    for i in 0..n {
        if i == n - 1 {
            points.push(curve[len - 1]);
            continue;
        }
        // i * (L - 1) is an exact integer product
        let x = (i * (len - 1)) as f64 / denom;
        let x = x.min(span);
        let lo = x.floor() as usize;
        let frac = x - lo as f64;
        let v = if lo + 1 >= len || frac == 0.0 {
            curve[lo]
        } else {
            curve[lo] + frac * (curve[lo + 1] - curve[lo])
        };
        points.push(v);
    }
    Ok(NormalizedCurve {
        points,
        source_length: len,
    })
}

/// Pointwise mean of equally sized normalized curves.
pub fn average_curves(curves: &[NormalizedCurve]) -> Result<NormalizedCurve> {
    let first = curves
        .first()
        .ok_or_else(|| Error::invalid("cannot average an empty list of curves"))?;
    let n = first.points.len();
    let mut sums = vec![0.0; n];
    let mut total_source = 0usize;
    for (idx, c) in curves.iter().enumerate() {
        if c.points.len() != n {
            return Err(Error::invalid(format!(
                "curve {idx} has {} points, expected {n}",
                c.points.len()
            )));
        }
        for (s, p) in sums.iter_mut().zip(&c.points) {
            *s += p;
        }
        total_source += c.source_length;
    }
    let k = curves.len() as f64;
    Ok(NormalizedCurve {
        points: sums.into_iter().map(|s| s / k).collect(),
        source_length: (total_source as f64 / k).round() as usize,
    })
}

/// Indices of high-entropy ("forking") steps: every step whose entropy is at
/// least the value ranked `ceil(quantile * L)` from the top. All values tied
/// with the cut are included, so a constant series returns every index.
pub fn forking_steps(series: &EntropySeries, quantile: f64) -> Result<Vec<usize>> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::invalid(format!("quantile must lie in (0, 1), got {quantile}")));
    }
    let values = series.values();
    if values.is_empty() {
        return Err(Error::invalid("forking steps of an empty series"));
    }
    let k = ((quantile * values.len() as f64 - 1e-9).ceil() as usize).clamp(1, values.len());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let cut = sorted[k - 1];
    Ok(values
        .iter()
        .enumerate()
        .filter(|(_, v)| **v >= cut)
        .map(|(i, _)| i)
        .collect())
}

/// Peak of the curve minus the mean over its final `ceil(tail_fraction * L)`
/// points. Positive when the curve falls back from its peak at the end.
pub fn tail_drop(values: &[f64], tail_fraction: f64) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::invalid("tail drop needs a curve of length >= 2"));
    }
    if !(tail_fraction > 0.0 && tail_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "tail fraction must lie in (0, 1), got {tail_fraction}"
        )));
    }
    let (peak, tail) = peak_and_tail_mean(values, tail_fraction);
    Ok(peak - tail)
}

/// `(max, mean of final window)` for a curve; shared by [`tail_drop`] and
/// reporting code.
pub fn peak_and_tail_mean(values: &[f64], tail_fraction: f64) -> (f64, f64) {
    let len = values.len();
    let window = ((tail_fraction * len as f64 - 1e-9).ceil() as usize).clamp(1, len);
    let peak = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tail = &values[len - window..];
    let (lo, hi) = tail
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    // The mean of a window lies within its range; clamping removes rounding
    // drift so a constant window has exactly its value as mean.
    let mean = (tail.iter().sum::<f64>() / window as f64).clamp(lo, hi);
    (peak, mean)
}
