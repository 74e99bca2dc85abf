//! Guide field `R_i(x) = sum_c (f_c(x) - f_i(x))_+` over partitioner
//! logits, its gradient, guided rejection sampling and the verifiers for
//! descent-to-zero, gradient floor and partition connectivity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numcore::{stage_rng, Graph, Matrix, Var};
use crate::partitioner::{PartitionerBinds, PartitionerModel};
use crate::synthdata::Point;

/// Convergence threshold for descent.
pub const DESCENT_TOL: f64 = 1e-6;
const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

/// `[xmin, ymin, xmax, ymax]`.
pub type BBox = [f64; 4];

pub fn scale_box(b: BBox, factor: f64) -> BBox {
    let cx = 0.5 * (b[0] + b[2]);
    let cy = 0.5 * (b[1] + b[3]);
    let hx = 0.5 * (b[2] - b[0]) * factor;
    let hy = 0.5 * (b[3] - b[1]) * factor;
    [cx - hx, cy - hy, cx + hx, cy + hy]
}

pub fn points_box(x: &Matrix) -> BBox {
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for r in x.rows() {
        b[0] = b[0].min(r[0]);
        b[1] = b[1].min(r[1]);
        b[2] = b[2].max(r[0]);
        b[3] = b[3].max(r[1]);
    }
    b
}

fn check_box(b: &BBox) -> Result<()> {
    if !(b[2] > b[0] && b[3] > b[1]) || b.iter().any(|v| !v.is_finite()) {
        return Err(invalid("bounding_box", format!("degenerate box {b:?}")));
    }
    Ok(())
}

pub fn uniform_in_box<R: Rng + ?Sized>(b: &BBox, rng: &mut R) -> Point {
    [rng.gen_range(b[0]..b[2]), rng.gen_range(b[1]..b[3])]
}

/// `R_i` for one logit vector.
pub fn guide_from_logits(f: &[f64], i: usize) -> f64 {
    let fi = f[i];
    f.iter().map(|&fc| (fc - fi).max(0.0)).sum()
}

/// Per-row guide values as an (n x 1) node. The hinge has zero slope at
/// exact ties, so the gradient vanishes on the closed set `A_i`.
pub fn guide_rows_graph(g: &mut Graph, f: Var, i: usize) -> Var {
    let fi = g.column(f, i);
    let d = g.sub_col(f, fi);
    let h = g.relu(d);
    g.sum_cols(h)
}

/// Per-row guide values where row `r` targets partition `idx[r]`.
pub fn guide_rows_multi_graph(g: &mut Graph, f: Var, idx: &[usize]) -> Var {
    let (n, k) = g.shape(f);
    let mut mask = Matrix::zeros((n, k));
    for (r, &i) in idx.iter().enumerate() {
        mask[[r, i]] = 1.0;
    }
    let mask = g.constant(mask);
    let sel = g.mul(f, mask);
    let fi = g.sum_cols(sel);
    let d = g.sub_col(f, fi);
    let h = g.relu(d);
    g.sum_cols(h)
}

fn point_matrix(x: &Point) -> Matrix {
    Matrix::from_shape_vec((1, 2), x.to_vec()).expect("1x2")
}

/// Guide field of one partition of a frozen partitioner.
#[derive(Clone, Copy)]
pub struct GuideField<'a> {
    pub model: &'a PartitionerModel,
    pub i: usize,
}

impl<'a> GuideField<'a> {
    pub fn new(model: &'a PartitionerModel, i: usize) -> Result<Self> {
        if i >= model.k {
            return Err(invalid(
                "partition",
                format!("index {i} out of range for k = {}", model.k),
            ));
        }
        Ok(Self { model, i })
    }

    pub fn value(&self, x: &Point) -> f64 {
        guide_from_logits(&self.model.logits_point(x), self.i)
    }

    pub fn values(&self, x: &Matrix) -> Vec<f64> {
        self.model
            .logits(x)
            .rows()
            .into_iter()
            .map(|r| guide_from_logits(r.as_slice().expect("row-major"), self.i))
            .collect()
    }

    /// Argmax form of the zero test: `f_i >= f_c` for all `c`.
    pub fn accepts(&self, x: &Point) -> bool {
        let f = self.model.logits_point(x);
        f.iter().all(|&fc| fc <= f[self.i])
    }

    /// `(R_i(x), grad R_i(x))`.
    pub fn value_grad(&self, x: &Point) -> (f64, Point) {
        let mut g = Graph::new();
        let p: PartitionerBinds = self.model.bind(&mut g, false);
        let xv = g.param(point_matrix(x));
        let f = self.model.logits_graph(&mut g, &p, xv);
        let r = guide_rows_graph(&mut g, f, self.i);
        let r = g.sum(r);
        let val = g.scalar_value(r);
        g.backward(r).expect("scalar root");
        let gr = g.grad(xv);
        (val, [gr[[0, 0]], gr[[0, 1]]])
    }

    pub fn grad(&self, x: &Point) -> Point {
        self.value_grad(x).1
    }

    /// `v(x) = sum_{c : f_c > f_i} (w_c - w_i)` in feature space.
    pub fn active_direction(&self, x: &Point) -> Vec<f64> {
        let f = self.model.logits_point(x);
        let w = self.model.logit_weight();
        let mut v = vec![0.0; w.ncols()];
        for (c, &fc) in f.iter().enumerate() {
            if fc > f[self.i] {
                for (j, vj) in v.iter_mut().enumerate() {
                    *vj += w[[c, j]] - w[[self.i, j]];
                }
            }
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescentReport {
    pub start: Point,
    pub end: Point,
    pub steps: usize,
    pub final_r: f64,
    pub reached_zero: bool,
    pub path_length: f64,
}

/// Rivals whose logit gap to `f_i` is within this band count as tied
/// when the descent direction is chosen.
const TIE_BAND: f64 = 1e-3;
const QP_ITERS: usize = 200;

impl GuideField<'_> {
    /// Gradients of `f_c - f_i` at `x`, one per entry of `rivals`.
    fn gap_grads(&self, x: &Point, rivals: &[usize]) -> Vec<Point> {
        let mut g = Graph::new();
        let p = self.model.bind(&mut g, false);
        let xv = g.param(point_matrix(x));
        let f = self.model.logits_graph(&mut g, &p, xv);
        let fi = g.column(f, self.i);
        let roots: Vec<Var> = rivals
            .iter()
            .map(|&c| {
                let fc = g.column(f, c);
                let d = g.sub(fc, fi);
                g.sum(d)
            })
            .collect();
        roots
            .into_iter()
            .map(|r| {
                g.zero_grad();
                g.backward(r).expect("scalar root");
                let gr = g.grad(xv);
                [gr[[0, 0]], gr[[0, 1]]]
            })
            .collect()
    }

    /// `(R_i(x), g)` where `g` is the minimum-norm element of
    /// `sum_{active} h_c + sum_{tied} theta_c h_c`, `theta in [0, 1]`,
    /// with `h_c = grad(f_c - f_i)`. Equals the gradient when no rival
    /// is tied.
    pub fn descent_direction(&self, x: &Point) -> (f64, Point) {
        let f = self.model.logits_point(x);
        let fi = f[self.i];
        let r = guide_from_logits(&f, self.i);
        let mut active = Vec::new();
        let mut tied = Vec::new();
        for (c, &fc) in f.iter().enumerate() {
            if c == self.i {
                continue;
            }
            if fc - fi > TIE_BAND {
                active.push(c);
            } else if fc - fi >= -TIE_BAND {
                tied.push(c);
            }
        }
        if tied.is_empty() {
            return self.value_grad(x);
        }
        let rivals: Vec<usize> = active.iter().chain(&tied).copied().collect();
        let h = self.gap_grads(x, &rivals);
        let (ha, ht) = h.split_at(active.len());
        let g0 = ha.iter().fold([0.0, 0.0], |a, v| [a[0] + v[0], a[1] + v[1]]);
        let lip: f64 = ht.iter().map(|v| v[0] * v[0] + v[1] * v[1]).sum();
        let mut theta = vec![0.5; ht.len()];
        let combine = |theta: &[f64]| {
            ht.iter()
                .zip(theta)
                .fold(g0, |a, (v, &t)| [a[0] + t * v[0], a[1] + t * v[1]])
        };
        if lip > 0.0 {
            for _ in 0..QP_ITERS {
                let gv = combine(&theta);
                for (t, v) in theta.iter_mut().zip(ht) {
                    *t = (*t - (gv[0] * v[0] + gv[1] * v[1]) / lip).clamp(0.0, 1.0);
                }
            }
        }
        (r, combine(&theta))
    }
}

fn armijo_step(field: &GuideField, x: &Point, r: f64, g: &Point, steps: usize) -> Result<Option<Point>> {
    let gn2 = g[0] * g[0] + g[1] * g[1];
    if !(gn2 > 0.0) {
        return Ok(None);
    }
    let mut t = 2.0 * r / gn2;
    for _ in 0..MAX_HALVINGS {
        let y = [x[0] - t * g[0], x[1] - t * g[1]];
        if !(y[0].is_finite() && y[1].is_finite()) {
            return Err(invalid("iterate", format!("non-finite iterate at step {steps}")));
        }
        if field.value(&y) <= r - ARMIJO_C * t * gn2 {
            return Ok(Some(y));
        }
        t *= 0.5;
    }
    Ok(None)
}

/// Steepest descent on `R_i` with backtracking. The direction is the
/// minimum-norm subgradient over rivals tied with `f_i` (the plain
/// gradient away from ties); the first trial step is twice the Polyak
/// step `R / |g|^2`, halved until the Armijo condition holds. If that
/// fails the plain gradient is tried.
pub fn descend_to_partition(field: &GuideField, x0: Point, max_steps: usize) -> Result<DescentReport> {
    if max_steps == 0 {
        return Err(invalid("max_steps", "must be at least 1"));
    }
    let mut x = x0;
    let mut r = field.value(&x);
    let mut steps = 0;
    let mut path = 0.0;
    while r > DESCENT_TOL && steps < max_steps {
        let (_, d) = field.descent_direction(&x);
        let mut next = armijo_step(field, &x, r, &d, steps)?;
        if next.is_none() {
            let (_, g) = field.value_grad(&x);
            if g != d {
                next = armijo_step(field, &x, r, &g, steps)?;
            }
        }
        let Some(y) = next else { break };
        path += ((y[0] - x[0]).powi(2) + (y[1] - x[1]).powi(2)).sqrt();
        x = y;
        r = field.value(&x);
        steps += 1;
    }
    Ok(DescentReport {
        start: x0,
        end: x,
        steps,
        final_r: r,
        reached_zero: r <= DESCENT_TOL,
        path_length: path,
    })
}

/// Partition label of every cell center of a `res x res` raster,
/// row-major with `y` as the slow index.
pub fn raster_assign(model: &PartitionerModel, res: usize, b: &BBox) -> Result<Vec<usize>> {
    check_box(b)?;
    if res < 32 {
        return Err(invalid("grid_resolution", format!("must be at least 32, got {res}")));
    }
    let dx = (b[2] - b[0]) / res as f64;
    let dy = (b[3] - b[1]) / res as f64;
    let pts = Matrix::from_shape_fn((res * res, 2), |(k, j)| {
        let (r, c) = (k / res, k % res);
        if j == 0 {
            b[0] + (c as f64 + 0.5) * dx
        } else {
            b[1] + (r as f64 + 0.5) * dy
        }
    });
    Ok(model.assign_batch(&pts))
}

/// 4-connected components of cells labeled `i`.
pub fn count_components(labels: &[usize], res: usize, i: usize) -> usize {
    let mut seen = vec![false; labels.len()];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..labels.len() {
        if labels[start] != i || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(k) = stack.pop() {
            let (r, c) = (k / res, k % res);
            let mut nb = [None; 4];
            if r > 0 {
                nb[0] = Some(k - res);
            }
            if r + 1 < res {
                nb[1] = Some(k + res);
            }
            if c > 0 {
                nb[2] = Some(k - 1);
            }
            if c + 1 < res {
                nb[3] = Some(k + 1);
            }
            for n in nb.into_iter().flatten() {
                if labels[n] == i && !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            }
        }
    }
    count
}

pub fn partition_components(model: &PartitionerModel, i: usize, res: usize, b: &BBox) -> Result<usize> {
    Ok(count_components(&raster_assign(model, res, b)?, res, i))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectionOutcome {
    pub x: Point,
    pub tries: usize,
    pub truncated: bool,
    pub r: f64,
}

/// Draws from `draw` until the point lies in `A_i`; after `max_tries`
/// failures the draw with smallest `R_i` is returned, flagged.
pub fn rejection_sample<F: FnMut() -> Point>(mut draw: F, field: &GuideField, max_tries: usize) -> RejectionOutcome {
    let max_tries = max_tries.max(1);
    let mut best = (f64::INFINITY, [0.0, 0.0]);
    for t in 1..=max_tries {
        let x = draw();
        if field.accepts(&x) {
            return RejectionOutcome {
                x,
                tries: t,
                truncated: false,
                r: 0.0,
            };
        }
        let r = field.value(&x);
        if r < best.0 {
            best = (r, x);
        }
    }
    RejectionOutcome {
        x: best.1,
        tries: max_tries,
        truncated: true,
        r: best.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    pub descent_starts: usize,
    pub max_descent_steps: usize,
    pub grad_floor_points: usize,
    pub grid_resolution: usize,
    pub max_tries: usize,
    /// Multiplier applied to the data bounding box.
    pub box_scale: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            descent_starts: 200,
            max_descent_steps: 10_000,
            grad_floor_points: 1000,
            grid_resolution: 256,
            max_tries: 100,
            box_scale: 2.0,
        }
    }
}

impl VerifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.descent_starts == 0 {
            return Err(invalid("verify.descent_starts", "must be at least 1"));
        }
        if self.max_descent_steps == 0 {
            return Err(invalid("verify.max_descent_steps", "must be at least 1"));
        }
        if self.grid_resolution < 32 {
            return Err(invalid("verify.grid_resolution", "must be at least 32"));
        }
        if self.max_tries == 0 {
            return Err(invalid("verify.max_tries", "must be at least 1"));
        }
        if !(self.box_scale >= 1.0 && self.box_scale.is_finite()) {
            return Err(invalid("verify.box_scale", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescentSummary {
    pub starts: usize,
    pub successes: usize,
    pub max_steps_used: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionVerification {
    pub partition: usize,
    pub descent: DescentSummary,
    /// Smallest `|grad R_i| / |v|` over sampled points outside `A_i`;
    /// `None` when the partition is empty or no such point was found.
    pub grad_floor: Option<f64>,
    pub grad_floor_points: usize,
    pub components: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub trunk_c0_lower: f64,
    pub grad_floor_bound: f64,
    pub bounding_box: BBox,
    pub partitions: Vec<PartitionVerification>,
}

impl VerificationReport {
    pub fn all_pass(&self) -> bool {
        self.partitions.iter().all(|p| {
            p.components <= 1
                && p.descent.successes == p.descent.starts
                && p.grad_floor.is_none_or(|f| f >= self.grad_floor_bound)
        })
    }
}

/// Runs every verifier on one partition; `labels` is the raster from
/// [`raster_assign`] over `b`.
pub fn verify_partition(
    model: &PartitionerModel,
    i: usize,
    cfg: &VerifyConfig,
    b: &BBox,
    labels: &[usize],
    seed: u64,
) -> Result<PartitionVerification> {
    let field = GuideField::new(model, i)?;
    let components = count_components(labels, cfg.grid_resolution, i);
    let mut rng = stage_rng(seed, 100 + i as u64);
    let mut descent = DescentSummary {
        starts: 0,
        successes: 0,
        max_steps_used: 0,
    };
    if components > 0 {
        for _ in 0..cfg.descent_starts {
            let x0 = uniform_in_box(b, &mut rng);
            let rep = descend_to_partition(&field, x0, cfg.max_descent_steps)?;
            descent.starts += 1;
            descent.successes += rep.reached_zero as usize;
            descent.max_steps_used = descent.max_steps_used.max(rep.steps);
        }
    }
    let mut floor: Option<f64> = None;
    let mut found = 0;
    if components > 0 {
        let mut attempts = 0;
        while found < cfg.grad_floor_points && attempts < 50 * cfg.grad_floor_points {
            attempts += 1;
            let x = uniform_in_box(b, &mut rng);
            if field.accepts(&x) {
                continue;
            }
            let v = field.active_direction(&x);
            let vn = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if !(vn > 0.0) {
                continue;
            }
            let gr = field.grad(&x);
            let ratio = (gr[0] * gr[0] + gr[1] * gr[1]).sqrt() / vn;
            floor = Some(floor.map_or(ratio, |f: f64| f.min(ratio)));
            found += 1;
        }
    }
    Ok(PartitionVerification {
        partition: i,
        descent,
        grad_floor: floor,
        grad_floor_points: found,
        components,
    })
}

/// Full verification over every partition. Fails early when the trunk
/// does not satisfy the Lipschitz certificate.
pub fn verify_model(
    model: &PartitionerModel,
    data_box: BBox,
    cfg: &VerifyConfig,
    seed: u64,
) -> Result<VerificationReport> {
    cfg.validate()?;
    let cert = model.lipschitz_certificate()?;
    verify_model_uncertified(model, data_box, cfg, seed, cert.trunk_c0_lower)
}

/// Verification without the certificate precondition, used for control
/// models; `c0` sets the reported gradient-floor bound.
pub fn verify_model_uncertified(
    model: &PartitionerModel,
    data_box: BBox,
    cfg: &VerifyConfig,
    seed: u64,
    c0: f64,
) -> Result<VerificationReport> {
    cfg.validate()?;
    if model.input_dim() != 2 {
        return Err(Error::Shape("verifiers rasterize a 2D input space".into()));
    }
    let b = scale_box(data_box, cfg.box_scale);
    let labels = raster_assign(model, cfg.grid_resolution, &b)?;
    let partitions = (0..model.k)
        .map(|i| verify_partition(model, i, cfg, &b, &labels, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(VerificationReport {
        trunk_c0_lower: c0,
        grad_floor_bound: c0 / 2.0,
        bounding_box: b,
        partitions,
    })
}
