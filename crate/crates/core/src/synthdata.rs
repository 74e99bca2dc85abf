//! Toy benchmarks: isotropic Gaussian mixtures on a square lattice or a
//! ring, plus jittered views for contrastive pretraining.

use std::io::{BufRead, Write};

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io::fmt17;
use crate::numcore::{stage_rng, Matrix};

pub type Point = [f64; 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureSpec {
    pub means: Vec<Point>,
    pub sigma: f64,
    pub weights: Vec<f64>,
}

/// A 2D point with its ground-truth mode, or -1 when unlabeled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledSample {
    pub x: Point,
    pub mode_id: i64,
}

impl GaussianMixtureSpec {
    pub fn new(means: Vec<Point>, sigma: f64, weights: Option<Vec<f64>>) -> Result<Self> {
        let k = means.len();
        if k == 0 {
            return Err(invalid("means", "at least one component required"));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(invalid("sigma", format!("must be positive, got {sigma}")));
        }
        let weights = weights.unwrap_or_else(|| vec![1.0 / k as f64; k]);
        if weights.len() != k {
            return Err(invalid("weights", "length must match means"));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(invalid("weights", "entries must be nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid("weights", format!("must sum to 1, got {total}")));
        }
        for i in 0..k {
            for j in (i + 1)..k {
                if means[i] == means[j] {
                    return Err(invalid("means", format!("components {i} and {j} coincide")));
                }
            }
        }
        Ok(Self { means, sigma, weights })
    }

    pub fn k(&self) -> usize {
        self.means.len()
    }

    pub fn min_mean_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (i, a) in self.means.iter().enumerate() {
            for b in &self.means[i + 1..] {
                best = best.min(dist(a, b));
            }
        }
        best
    }

    /// Axis-aligned box around the means, padded by `pad` sigmas.
    pub fn bounding_box(&self, pad: f64) -> [f64; 4] {
        let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for m in &self.means {
            b[0] = b[0].min(m[0]);
            b[1] = b[1].min(m[1]);
            b[2] = b[2].max(m[0]);
            b[3] = b[3].max(m[1]);
        }
        let p = pad * self.sigma;
        [b[0] - p, b[1] - p, b[2] + p, b[3] + p]
    }
}

pub fn dist(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// `side x side` lattice centered at the origin.
pub fn grid_spec(side: usize, spacing: f64, sigma: f64) -> Result<GaussianMixtureSpec> {
    if side == 0 {
        return Err(invalid("side", "must be at least 1"));
    }
    if !(spacing > 0.0) {
        return Err(invalid("spacing", format!("must be positive, got {spacing}")));
    }
    let c = (side as f64 - 1.0) / 2.0;
    let means = (0..side)
        .flat_map(|i| (0..side).map(move |j| [(i as f64 - c) * spacing, (j as f64 - c) * spacing]))
        .collect();
    GaussianMixtureSpec::new(means, sigma, None)
}

/// `k` components equally spaced on a circle, the first at `(radius, 0)`.
pub fn ring_spec(k: usize, radius: f64, sigma: f64) -> Result<GaussianMixtureSpec> {
    if k == 0 {
        return Err(invalid("k", "must be at least 1"));
    }
    if !(radius > 0.0) {
        return Err(invalid("radius", format!("must be positive, got {radius}")));
    }
    let means = (0..k)
        .map(|i| {
            let t = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
            [radius * t.cos(), radius * t.sin()]
        })
        .collect();
    GaussianMixtureSpec::new(means, sigma, None)
}

pub fn sample(spec: &GaussianMixtureSpec, n: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    if n == 0 {
        return Err(invalid("n", "must be at least 1"));
    }
    let mut rng = stage_rng(seed, 0);
    let pick = WeightedIndex::new(&spec.weights).map_err(|e| invalid("weights", e.to_string()))?;
    Ok((0..n)
        .map(|_| {
            let c = pick.sample(&mut rng);
            let m = spec.means[c];
            let e0: f64 = rng.sample(StandardNormal);
            let e1: f64 = rng.sample(StandardNormal);
            LabeledSample {
                x: [m[0] + spec.sigma * e0, m[1] + spec.sigma * e1],
                mode_id: c as i64,
            }
        })
        .collect())
}

pub fn jitter<R: Rng + ?Sized>(x: Point, sigma_aug: f64, rng: &mut R) -> Point {
    let e0: f64 = rng.sample(StandardNormal);
    let e1: f64 = rng.sample(StandardNormal);
    [x[0] + sigma_aug * e0, x[1] + sigma_aug * e1]
}

/// Seeded single-point jitter.
pub fn augment_jitter(x: Point, sigma_aug: f64, seed: u64) -> Point {
    let mut rng = stage_rng(seed, 1);
    jitter(x, sigma_aug, &mut rng)
}

pub fn points_matrix(samples: &[LabeledSample]) -> Matrix {
    Matrix::from_shape_fn((samples.len(), 2), |(i, j)| samples[i].x[j])
}

pub fn write_csv<W: Write>(mut w: W, samples: &[LabeledSample]) -> Result<()> {
    writeln!(w, "x0,x1,mode_id")?;
    for s in samples {
        writeln!(w, "{},{},{}", fmt17(s.x[0]), fmt17(s.x[1]), s.mode_id)?;
    }
    Ok(())
}

pub fn read_csv<R: BufRead>(r: R) -> Result<Vec<LabeledSample>> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| Error::Data("empty dataset file".into()))??;
    if header.trim() != "x0,x1,mode_id" {
        return Err(Error::Data(format!("unexpected header `{header}`")));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Data(format!("line {}: malformed record `{line}`", n + 2));
        let mut it = line.split(',');
        let x0: f64 = it.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
        let x1: f64 = it.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
        let mode_id: i64 = it.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
        if it.next().is_some() || mode_id < -1 {
            return Err(bad());
        }
        out.push(LabeledSample { x: [x0, x1], mode_id });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shapes() {
        assert_eq!(grid_spec(5, 2.0, 0.05).unwrap().k(), 25);
        assert_eq!(grid_spec(1, 2.0, 0.05).unwrap().means, vec![[0.0, 0.0]]);
        let g2 = grid_spec(2, 2.0, 0.05).unwrap();
        let mut m = g2.means.clone();
        m.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(m, vec![[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]]);
        assert!(grid_spec(5, 0.0, 0.05).is_err());
        assert!(grid_spec(5, 2.0, -1.0).is_err());
    }

    #[test]
    fn default_grid_is_well_separated() {
        let g = grid_spec(5, 2.0, 0.05).unwrap();
        assert!(g.min_mean_distance() >= 20.0 * g.sigma);
    }

    #[test]
    fn ring_geometry() {
        let r = ring_spec(8, 1.0, 0.01).unwrap();
        let expect = 2.0 * (std::f64::consts::PI / 8.0).sin();
        assert!((r.min_mean_distance() - expect).abs() < 1e-12);
        assert_eq!(ring_spec(1, 1.0, 0.01).unwrap().means, vec![[1.0, 0.0]]);
        let r4 = ring_spec(4, 1.0, 0.01).unwrap();
        let want = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];
        for (m, w) in r4.means.iter().zip(want) {
            assert!(dist(m, &w) < 1e-15);
        }
        assert!(ring_spec(8, 0.0, 0.01).is_err());
    }

    #[test]
    fn tiny_sigma_samples_sit_on_means() {
        let spec = GaussianMixtureSpec::new(vec![[1.0, 2.0], [-3.0, 0.5]], 1e-300, None).unwrap();
        for s in sample(&spec, 100, 3).unwrap() {
            assert_eq!(s.x, spec.means[s.mode_id as usize]);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = grid_spec(5, 2.0, 0.05).unwrap();
        assert_eq!(sample(&spec, 500, 9).unwrap(), sample(&spec, 500, 9).unwrap());
        assert_ne!(sample(&spec, 500, 9).unwrap(), sample(&spec, 500, 10).unwrap());
        assert!(sample(&spec, 0, 9).is_err());
    }

    #[test]
    fn jitter_zero_is_identity_and_seeded() {
        assert_eq!(augment_jitter([0.3, -0.7], 0.0, 5), [0.3, -0.7]);
        assert_eq!(
            augment_jitter([0.3, -0.7], 0.05, 5),
            augment_jitter([0.3, -0.7], 0.05, 5)
        );
    }

    #[test]
    fn invalid_weights_rejected() {
        assert!(GaussianMixtureSpec::new(vec![[0.0, 0.0], [1.0, 0.0]], 0.1, Some(vec![0.5, 0.6])).is_err());
        assert!(GaussianMixtureSpec::new(vec![[0.0, 0.0], [0.0, 0.0]], 0.1, None).is_err());
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let spec = ring_spec(8, 1.0, 0.01).unwrap();
        let s = sample(&spec, 50, 1).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &s).unwrap();
        assert_eq!(read_csv(buf.as_slice()).unwrap(), s);
        assert!(read_csv("a,b,c\n".as_bytes()).is_err());
        assert!(read_csv("x0,x1,mode_id\n1,2\n".as_bytes()).is_err());
    }
}
