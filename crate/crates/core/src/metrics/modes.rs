//! Sample-quality metrics over the modes of a known mixture.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::synthdata::{dist, GaussianMixtureSpec, Point};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub recovered: usize,
    /// High-quality samples landing on each mode.
    pub histogram: Vec<usize>,
    pub hq_fraction: f64,
    /// `KL(model || data)` over modes; infinite when no sample is high quality.
    pub reverse_kl: f64,
}

/// Index of the nearest mean; ties go to the lower index.
pub fn nearest_mode(x: &Point, spec: &GaussianMixtureSpec) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, m) in spec.means.iter().enumerate() {
        let d = dist(x, m);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

pub fn mode_report(
    samples: &[Point],
    spec: &GaussianMixtureSpec,
    hq_radius_sigmas: f64,
    hq_threshold_count: usize,
) -> Result<ModeReport> {
    if samples.is_empty() {
        return Err(invalid("samples", "mode report needs at least one sample"));
    }
    let radius = hq_radius_sigmas * spec.sigma;
    let mut histogram = vec![0usize; spec.k()];
    let mut hq = 0usize;
    for x in samples {
        let (m, d) = nearest_mode(x, spec);
        if d <= radius {
            histogram[m] += 1;
            hq += 1;
        }
    }
    let recovered = histogram.iter().filter(|&&c| c >= hq_threshold_count.max(1)).count();
    let counts: Vec<f64> = histogram.iter().map(|&c| c as f64).collect();
    let reverse_kl = reverse_kl(&counts, &spec.weights).unwrap_or(f64::INFINITY);
    Ok(ModeReport {
        recovered,
        histogram,
        hq_fraction: hq as f64 / samples.len() as f64,
        reverse_kl,
    })
}

/// `KL(p_model || p_data)` where `p_model` is the normalized histogram.
pub fn reverse_kl(model_hist: &[f64], data_probs: &[f64]) -> Result<f64> {
    if model_hist.len() != data_probs.len() {
        return Err(invalid("model_hist", "length must match data_probs"));
    }
    if model_hist.iter().any(|&c| !(c >= 0.0)) {
        return Err(invalid("model_hist", "counts must be nonnegative"));
    }
    if data_probs.iter().any(|&p| !(p > 0.0)) {
        return Err(invalid("data_probs", "must be strictly positive"));
    }
    let total: f64 = model_hist.iter().sum();
    if total <= 0.0 {
        return Err(invalid("model_hist", "total count is zero"));
    }
    let kl: f64 = model_hist
        .iter()
        .zip(data_probs)
        .filter(|(&c, _)| c > 0.0)
        .map(|(&c, &q)| {
            let p = c / total;
            p * (p / q).ln()
        })
        .sum();
    Ok(kl.max(0.0))
}

fn entropy_of_counts<'a>(counts: impl Iterator<Item = &'a usize>, n: f64) -> f64 {
    counts
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information `MI / sqrt(H(a) H(b))`.
///
/// When both labelings are constant the partitions coincide and the
/// result is 1; when exactly one is constant it is 0.
pub fn nmi(a: &[i64], b: &[i64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid("labels", "labelings must have equal length"));
    }
    if a.is_empty() {
        return Err(invalid("labels", "empty labelings"));
    }
    let n = a.len() as f64;
    let mut joint: BTreeMap<(i64, i64), usize> = BTreeMap::new();
    let mut ca: BTreeMap<i64, usize> = BTreeMap::new();
    let mut cb: BTreeMap<i64, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
    }
    let ha = entropy_of_counts(ca.values(), n);
    let hb = entropy_of_counts(cb.values(), n);
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &c)| {
            let pxy = c as f64 / n;
            let px = ca[&x] as f64 / n;
            let py = cb[&y] as f64 / n;
            pxy * (pxy / (px * py)).ln()
        })
        .sum();
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

/// Half the L1 distance between two normalized histograms.
pub fn marginal_tv(hist_a: &[f64], hist_b: &[f64]) -> Result<f64> {
    if hist_a.len() != hist_b.len() {
        return Err(invalid("hist", "histograms must share the index set"));
    }
    let sa: f64 = hist_a.iter().sum();
    let sb: f64 = hist_b.iter().sum();
    if hist_a.is_empty() || !(sa > 0.0) || !(sb > 0.0) {
        return Err(invalid("hist", "histograms must have positive mass"));
    }
    if hist_a.iter().chain(hist_b).any(|&x| x < 0.0) {
        return Err(invalid("hist", "histogram entries must be nonnegative"));
    }
    let tv = 0.5
        * hist_a
            .iter()
            .zip(hist_b)
            .map(|(&a, &b)| (a / sa - b / sb).abs())
            .sum::<f64>();
    Ok(tv.min(1.0))
}
