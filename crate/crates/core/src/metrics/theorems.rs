//! Analytic verifiers: the total-variation lower bound for Lipschitz
//! generators on disjoint manifolds, and the JSD decomposition over a
//! partition.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::normal::{normal_cdf, normal_cdf_inv};
use crate::error::{invalid, Error, Result};

/// Manifold probabilities `pis`, per-manifold separations `ds` (distance
/// to the nearest other manifold) and generator Lipschitz constant `c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremOneInstance {
    pub pis: Vec<f64>,
    pub ds: Vec<f64>,
    pub c: f64,
}

impl TheoremOneInstance {
    pub fn new(pis: Vec<f64>, ds: Vec<f64>, c: f64) -> Result<Self> {
        if pis.is_empty() {
            return Err(invalid("pi", "at least one probability required"));
        }
        if pis.len() != ds.len() {
            return Err(invalid("d", "needs one separation per probability"));
        }
        if pis.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(invalid("pi", "entries must lie in [0, 1]"));
        }
        let total: f64 = pis.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid("pi", format!("must sum to 1, got {total}")));
        }
        if ds.iter().any(|&d| !(d >= 0.0)) {
            return Err(invalid("d", "separations must be nonnegative"));
        }
        if !(c > 0.0) {
            return Err(invalid("c", format!("must be positive, got {c}")));
        }
        Ok(Self { pis, ds, c })
    }
}

/// `max_i { p* - Phi(Phi^-1(p*) - d_i / c) }` with `p* = min(pi, 1 - pi)`.
pub fn delta_bound(inst: &TheoremOneInstance) -> f64 {
    inst.pis
        .iter()
        .zip(&inst.ds)
        .map(|(&pi, &d)| {
            let p = pi.min(1.0 - pi);
            if p <= 0.0 {
                return 0.0;
            }
            // p* <= 1/2 so the quantile exists
            let q = normal_cdf_inv(p).expect("0 < p* <= 1/2");
            (p - normal_cdf(q - d / inst.c)).max(0.0)
        })
        .fold(0.0, f64::max)
}

/// One block of a partitioned pair of discrete distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionBlock {
    /// Atom identifiers; must not appear in any other block.
    pub support: Vec<u64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionCase {
    pub pis: Vec<f64>,
    pub blocks: Vec<PartitionBlock>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecompositionResult {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
}

fn kl_term(a: f64, b: f64) -> f64 {
    if a > 0.0 {
        a * (a / b).ln()
    } else {
        0.0
    }
}

/// Jensen-Shannon divergence (nats) between two aligned probability vectors.
pub fn jsd(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            0.5 * kl_term(a, m) + 0.5 * kl_term(b, m)
        })
        .sum()
}

fn check_probs(field: &str, v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(invalid(field, "length must match the block support"));
    }
    if v.iter().any(|&x| !(x >= 0.0)) {
        return Err(invalid(field, "entries must be nonnegative"));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(invalid(field, format!("must sum to 1, got {s}")));
    }
    Ok(())
}

/// Compares `JSD(sum pi p_i || sum pi q_i)` against `sum pi JSD(p_i || q_i)`.
pub fn jsd_decomposition_check(case: &DecompositionCase) -> Result<DecompositionResult> {
    if case.pis.len() != case.blocks.len() {
        return Err(invalid("pis", "need one weight per block"));
    }
    check_probs("pis", &case.pis, case.blocks.len())?;
    let mut seen = BTreeSet::new();
    for (i, b) in case.blocks.iter().enumerate() {
        check_probs(&format!("blocks[{i}].p"), &b.p, b.support.len())?;
        check_probs(&format!("blocks[{i}].q"), &b.q, b.support.len())?;
        for &a in &b.support {
            if !seen.insert(a) {
                return Err(Error::Hypothesis(format!(
                    "atom {a} appears in more than one partition block"
                )));
            }
        }
    }

    let mut mixed: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
    for (pi, b) in case.pis.iter().zip(&case.blocks) {
        for ((&a, &p), &q) in b.support.iter().zip(&b.p).zip(&b.q) {
            let e = mixed.entry(a).or_insert((0.0, 0.0));
            e.0 += pi * p;
            e.1 += pi * q;
        }
    }
    let (pm, qm): (Vec<f64>, Vec<f64>) = mixed.values().copied().unzip();
    let lhs = jsd(&pm, &qm);
    let rhs = case
        .pis
        .iter()
        .zip(&case.blocks)
        .map(|(pi, b)| pi * jsd(&b.p, &b.q))
        .sum::<f64>();
    Ok(DecompositionResult {
        lhs,
        rhs,
        gap: (lhs - rhs).abs(),
    })
}
