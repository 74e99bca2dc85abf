use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numcore::Matrix;

/// Directed k-nearest-neighbour graph; `neighbors[i]` is sorted by
/// increasing distance, ties by lower index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborGraph {
    pub k: usize,
    pub neighbors: Vec<Vec<usize>>,
}

impl NeighborGraph {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, ns)| ns.iter().map(move |&j| (i, j)))
    }

    /// Fraction of edges joining two samples with the same label.
    pub fn purity(&self, labels: &[i64]) -> f64 {
        let (mut same, mut total) = (0usize, 0usize);
        for (i, j) in self.edges() {
            total += 1;
            same += (labels[i] == labels[j]) as usize;
        }
        if total == 0 {
            1.0
        } else {
            same as f64 / total as f64
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "src,dst")?;
        for (i, j) in self.edges() {
            writeln!(w, "{i},{j}")?;
        }
        Ok(())
    }
}

#[derive(PartialEq)]
struct Cand(f64, usize);

impl Eq for Cand {}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

fn sq_dist(x: &Matrix, i: usize, j: usize) -> f64 {
    x.row(i)
        .iter()
        .zip(x.row(j).iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

/// Euclidean kNN over the rows of `x`.
pub fn knn_graph(x: &Matrix, k: usize) -> Result<NeighborGraph> {
    let n = x.nrows();
    if k == 0 {
        return Err(invalid("embed.knn_k", "must be at least 1"));
    }
    if k >= n {
        return Err(invalid(
            "embed.knn_k",
            format!("k = {k} must be below the sample count {n}"),
        ));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(invalid("embeddings", "non-finite coordinate"));
    }
    let mut neighbors = Vec::with_capacity(n);
    for i in 0..n {
        let mut heap: BinaryHeap<Cand> = BinaryHeap::with_capacity(k + 1);
        for j in 0..n {
            if j == i {
                continue;
            }
            let c = Cand(sq_dist(x, i, j), j);
            if heap.len() < k {
                heap.push(c);
            } else if c < *heap.peek().expect("heap holds k items") {
                heap.pop();
                heap.push(c);
            }
        }
        neighbors.push(heap.into_sorted_vec().into_iter().map(|c| c.1).collect());
    }
    Ok(NeighborGraph { k, neighbors })
}
