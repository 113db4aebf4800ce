//! Surrogate models.
//!
//! [`GprModel`] is a zero-mean Gaussian process with a squared-exponential
//! kernel, fitted in log-transformed target space, exposing analytic input
//! gradients of its posterior mean. [`ForestModel`] is a small bagged ensemble
//! of regression trees; it has no gradient and is transferred with CMA-ES.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::warp::Bounds;

/// Smallest argument the log transform accepts before flooring.
const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    LogShift,
    Identity,
}

/// `t = ln(y − shift + 1)` (log-shift) or `t = y` (identity).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueTransform {
    pub kind: TransformKind,
    pub shift: f64,
}

impl ValueTransform {
    pub fn identity() -> Self {
        Self {
            kind: TransformKind::Identity,
            shift: 0.0,
        }
    }

    /// Values below `shift − 1` are floored rather than rejected.
    pub fn forward(&self, y: f64) -> f64 {
        match self.kind {
            TransformKind::Identity => y,
            TransformKind::LogShift => (y - self.shift + 1.0).max(LOG_FLOOR).ln(),
        }
    }

    pub fn inverse(&self, t: f64) -> f64 {
        match self.kind {
            TransformKind::Identity => t,
            TransformKind::LogShift => t.exp() - 1.0 + self.shift,
        }
    }

    /// `d inverse / dt`.
    pub fn inverse_derivative(&self, t: f64) -> f64 {
        match self.kind {
            TransformKind::Identity => 1.0,
            TransformKind::LogShift => t.exp(),
        }
    }
}

/// Log-shift transform anchored at the smallest target.
pub fn fit_value_transform(y: &[f64]) -> Result<ValueTransform> {
    if y.is_empty() {
        return Err(Error::Empty("targets"));
    }
    let shift = y.iter().copied().fold(f64::INFINITY, f64::min);
    if !shift.is_finite() {
        return Err(Error::Domain("targets must be finite".into()));
    }
    Ok(ValueTransform {
        kind: TransformKind::LogShift,
        shift,
    })
}

/// Input rows with paired responses and the box they live in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    rows: Vec<Vec<f64>>,
    y: Vec<f64>,
    bounds: Bounds,
}

impl Dataset {
    pub fn new(rows: Vec<Vec<f64>>, y: Vec<f64>, bounds: Bounds) -> Result<Self> {
        check_dim(rows.len(), y.len())?;
        let d = bounds.dim();
        for (i, r) in rows.iter().enumerate() {
            check_dim(d, r.len())?;
            if r.iter().any(|v| !v.is_finite()) || !y[i].is_finite() {
                return Err(Error::Domain(format!("row {i} has a non-finite value")));
            }
            bounds
                .normalize(r)
                .map_err(|_| Error::Domain(format!("row {i} lies outside the dataset bounds")))?;
        }
        Ok(Self { rows, y, bounds })
    }

    /// Infers the box as per-column min/max. Constant columns are padded by ½
    /// on each side so the box stays non-degenerate.
    pub fn with_inferred_bounds(rows: Vec<Vec<f64>>, y: Vec<f64>) -> Result<Self> {
        let first = rows.first().ok_or(Error::Empty("dataset"))?;
        let d = first.len();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for r in &rows {
            check_dim(d, r.len())?;
            for j in 0..d {
                lo[j] = lo[j].min(r[j]);
                hi[j] = hi[j].max(r[j]);
            }
        }
        for j in 0..d {
            if lo[j] == hi[j] {
                lo[j] -= 0.5;
                hi[j] += 0.5;
            }
        }
        let bounds = Bounds::new(lo, hi)?;
        Self::new(rows, y, bounds)
    }

    pub fn empty(bounds: Bounds) -> Self {
        Self {
            rows: Vec::new(),
            y: Vec::new(),
            bounds,
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn targets(&self) -> &[f64] {
        &self.y
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            bounds: self.bounds.clone(),
        }
    }

    /// Rows for which `keep` holds, in their original order.
    pub fn filter(&self, mut keep: impl FnMut(&[f64], f64) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(&self.rows[i], self.y[i])).collect();
        self.subset(&idx)
    }

    /// Same rows and targets in a different (larger or equal) box.
    pub fn with_bounds(&self, bounds: Bounds) -> Result<Self> {
        Self::new(self.rows.clone(), self.y.clone(), bounds)
    }
}

/// A fitted regression model over a fixed input dimension.
pub trait Surrogate: Send + Sync {
    fn dim(&self) -> usize;

    fn transform(&self) -> &ValueTransform;

    /// Prediction in transformed (log) space.
    fn predict_transformed(&self, x: &[f64]) -> f64;

    /// Prediction in original target space.
    fn predict(&self, x: &[f64]) -> f64 {
        self.transform().inverse(self.predict_transformed(x))
    }
}

/// A surrogate whose transformed-space mean has an analytic input gradient.
pub trait DifferentiableSurrogate: Surrogate {
    /// `(μ(x), ∇μ(x))`.
    fn value_and_gradient(&self, x: &[f64]) -> (f64, Vec<f64>);

    fn input_gradient(&self, x: &[f64]) -> Vec<f64> {
        self.value_and_gradient(x).1
    }
}

// ---------------------------------------------------------------------------
// Gaussian process

/// Kernel hyperparameters: `k(x, x′) = s²·exp(−‖x − x′‖² / (2ℓ²))` plus noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GprHyper {
    pub lengthscale: f64,
    pub signal_var: f64,
    pub noise_var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GprConfig {
    /// Lengthscale range as multiples of the box diameter.
    pub lengthscale_range: (f64, f64),
    /// Signal variance range as multiples of the transformed-target variance.
    pub signal_range: (f64, f64),
    /// Noise variance range as multiples of the transformed-target variance.
    pub noise_range: (f64, f64),
    pub restarts: usize,
    /// Nelder–Mead iterations per start.
    pub max_iter: usize,
    /// Hyperparameters are searched on at most this many rows.
    pub hyper_subset: usize,
}

impl Default for GprConfig {
    fn default() -> Self {
        Self {
            lengthscale_range: (1e-2, 10.0),
            signal_range: (1e-4, 1e4),
            noise_range: (1e-8, 1e-1),
            restarts: 5,
            max_iter: 150,
            hyper_subset: 300,
        }
    }
}

/// Fitted Gaussian process regressor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GprModel {
    dim: usize,
    /// Row-major n×d training inputs.
    inputs: Vec<f64>,
    alpha: Vec<f64>,
    lengthscale: f64,
    signal_var: f64,
    noise_var: f64,
    transform: ValueTransform,
    bounds: Bounds,
}

/// Log marginal likelihoods seen during the hyperparameter search.
#[derive(Debug, Clone, PartialEq)]
pub struct GprFitTrace {
    /// `(start point, LML at the start)` for every multi-start.
    pub starts: Vec<(GprHyper, f64)>,
    pub best: (GprHyper, f64),
}

const JITTER_LADDER: [f64; 7] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5];
const JITTER_MAX: f64 = 1e-4;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn gram(rows: &[&[f64]], hyper: &GprHyper, extra_diag: f64) -> DMatrix<f64> {
    let n = rows.len();
    let inv = -0.5 / (hyper.lengthscale * hyper.lengthscale);
    let mut k = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = hyper.signal_var + hyper.noise_var + extra_diag;
        for j in 0..i {
            let v = hyper.signal_var * (inv * sq_dist(rows[i], rows[j])).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky with jitter escalation; returns the factor and the jitter used.
fn cholesky_with_jitter(rows: &[&[f64]], hyper: &GprHyper) -> Result<(nalgebra::Cholesky<f64, nalgebra::Dyn>, f64)> {
    for &j in JITTER_LADDER.iter().chain(std::iter::once(&JITTER_MAX)) {
        let jitter = j * hyper.signal_var;
        if let Some(ch) = gram(rows, hyper, jitter).cholesky() {
            return Ok((ch, jitter));
        }
    }
    Err(Error::IllConditioned(format!(
        "Gram matrix not positive definite with jitter up to {JITTER_MAX:e}"
    )))
}

/// Log marginal likelihood of transformed targets `t` under a zero-mean GP.
pub fn gpr_log_marginal_likelihood(rows: &[&[f64]], t: &[f64], hyper: &GprHyper) -> f64 {
    let Ok((ch, _)) = cholesky_with_jitter(rows, hyper) else {
        return f64::NEG_INFINITY;
    };
    let tv = DVector::from_column_slice(t);
    let alpha = ch.solve(&tv);
    let log_det: f64 = ch.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
    let n = t.len() as f64;
    -0.5 * tv.dot(&alpha) - log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}

fn variance(t: &[f64]) -> f64 {
    let n = t.len() as f64;
    let mean = t.iter().sum::<f64>() / n;
    t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Fits a GP by maximizing the log marginal likelihood over log-hyperparameters.
pub fn fit_gpr<R: Rng + ?Sized>(train: &Dataset, config: &GprConfig, rng: &mut R) -> Result<GprModel> {
    fit_gpr_traced(train, config, rng).map(|(m, _)| m)
}

pub fn fit_gpr_traced<R: Rng + ?Sized>(
    train: &Dataset,
    config: &GprConfig,
    rng: &mut R,
) -> Result<(GprModel, GprFitTrace)> {
    if train.len() < 2 {
        return Err(Error::Config("a GP needs at least two training rows".into()));
    }
    if config.restarts == 0 {
        return Err(Error::Config("GP fitting needs at least one restart".into()));
    }
    let transform = fit_value_transform(train.targets())?;
    let t: Vec<f64> = train.targets().iter().map(|&y| transform.forward(y)).collect();
    let diam = train.bounds().diameter();
    let var_ref = variance(&t);
    let all_rows: Vec<&[f64]> = train.rows().iter().map(|r| r.as_slice()).collect();

    let (best, trace) = if var_ref < 1e-300 {
        // Constant targets: every hyperparameter setting gives the same fit.
        let h = GprHyper {
            lengthscale: 0.25 * diam,
            signal_var: 1.0,
            noise_var: 1e-6,
        };
        let lml = gpr_log_marginal_likelihood(&all_rows, &t, &h);
        (
            h,
            GprFitTrace {
                starts: vec![(h, lml)],
                best: (h, lml),
            },
        )
    } else {
        search_hyper(train, &t, diam, var_ref, config, rng)
    };

    let (ch, jitter) = cholesky_with_jitter(&all_rows, &best)?;
    let alpha = ch.solve(&DVector::from_column_slice(&t));
    let model = GprModel {
        dim: train.dim(),
        inputs: train.rows().iter().flatten().copied().collect(),
        alpha: alpha.as_slice().to_vec(),
        lengthscale: best.lengthscale,
        signal_var: best.signal_var,
        noise_var: (best.noise_var + jitter).max(1e-10),
        transform,
        bounds: train.bounds().clone(),
    };
    Ok((model, trace))
}

fn search_hyper<R: Rng + ?Sized>(
    train: &Dataset,
    t: &[f64],
    diam: f64,
    var_ref: f64,
    config: &GprConfig,
    rng: &mut R,
) -> (GprHyper, GprFitTrace) {
    let n = train.len();
    let idx: Vec<usize> = if n > config.hyper_subset {
        let mut v = sample(rng, n, config.hyper_subset).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..n).collect()
    };
    let rows: Vec<&[f64]> = idx.iter().map(|&i| train.row(i)).collect();
    let ts: Vec<f64> = idx.iter().map(|&i| t[i]).collect();

    let lo = [
        (config.lengthscale_range.0 * diam).ln(),
        (config.signal_range.0 * var_ref).ln(),
        (config.noise_range.0 * var_ref).ln(),
    ];
    let hi = [
        (config.lengthscale_range.1 * diam).ln(),
        (config.signal_range.1 * var_ref).ln(),
        (config.noise_range.1 * var_ref).ln(),
    ];
    let decode = |p: &[f64; 3]| GprHyper {
        lengthscale: p[0].exp(),
        signal_var: p[1].exp(),
        noise_var: p[2].exp(),
    };
    let objective = |p: &[f64; 3]| {
        let v = -gpr_log_marginal_likelihood(&rows, &ts, &decode(p));
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };

    let mut starts = Vec::with_capacity(config.restarts);
    let mut best: Option<([f64; 3], f64)> = None;
    for r in 0..config.restarts {
        let start = if r == 0 {
            // Mid-range lengthscale, unit-ish signal, small noise.
            [
                (0.2 * diam).ln().clamp(lo[0], hi[0]),
                (var_ref + mean_sq(&ts)).ln().clamp(lo[1], hi[1]),
                (1e-4 * var_ref).ln().clamp(lo[2], hi[2]),
            ]
        } else {
            [
                rng.random_range(lo[0]..=hi[0]),
                rng.random_range(lo[1]..=hi[1]),
                rng.random_range(lo[2]..=hi[2]),
            ]
        };
        let f0 = objective(&start);
        starts.push((decode(&start), -f0));
        let (p, f) = nelder_mead_box(&objective, start, f0, &lo, &hi, config.max_iter);
        if best.is_none_or(|(_, bf)| f < bf) {
            best = Some((p, f));
        }
    }
    let (p, f) = best.expect("at least one restart");
    let h = decode(&p);
    (h, GprFitTrace { starts, best: (h, -f) })
}

fn mean_sq(t: &[f64]) -> f64 {
    t.iter().map(|v| v * v).sum::<f64>() / t.len() as f64
}

/// Nelder–Mead on a box; candidate points are projected onto the box.
/// Never returns a point worse than `start`.
fn nelder_mead_box(
    f: &dyn Fn(&[f64; 3]) -> f64,
    start: [f64; 3],
    f_start: f64,
    lo: &[f64; 3],
    hi: &[f64; 3],
    max_iter: usize,
) -> ([f64; 3], f64) {
    let clamp = |mut p: [f64; 3]| {
        for k in 0..3 {
            p[k] = p[k].clamp(lo[k], hi[k]);
        }
        p
    };
    let mut simplex: Vec<([f64; 3], f64)> = vec![(start, f_start)];
    for k in 0..3 {
        let mut p = start;
        let step = 0.1 * (hi[k] - lo[k]);
        p[k] = if p[k] + step <= hi[k] { p[k] + step } else { p[k] - step };
        let p = clamp(p);
        simplex.push((p, f(&p)));
    }
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best_f, worst_f) = (simplex[0].1, simplex[3].1);
        if worst_f.is_finite() && (worst_f - best_f).abs() <= 1e-9 * (1.0 + best_f.abs()) {
            break;
        }
        let mut centroid = [0.0; 3];
        for (p, _) in &simplex[..3] {
            for k in 0..3 {
                centroid[k] += p[k] / 3.0;
            }
        }
        let toward = |coef: f64| {
            let w = simplex[3].0;
            clamp([
                centroid[0] + coef * (w[0] - centroid[0]),
                centroid[1] + coef * (w[1] - centroid[1]),
                centroid[2] + coef * (w[2] - centroid[2]),
            ])
        };
        let xr = toward(-1.0);
        let fr = f(&xr);
        if fr < simplex[0].1 {
            let xe = toward(-2.0);
            let fe = f(&xe);
            simplex[3] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[2].1 {
            simplex[3] = (xr, fr);
        } else {
            let xc = if fr < simplex[3].1 { toward(-0.5) } else { toward(0.5) };
            let fc = f(&xc);
            if fc < simplex[3].1.min(fr) {
                simplex[3] = (xc, fc);
            } else {
                let b = simplex[0].0;
                for item in simplex.iter_mut().skip(1) {
                    let p = clamp([
                        b[0] + 0.5 * (item.0[0] - b[0]),
                        b[1] + 0.5 * (item.0[1] - b[1]),
                        b[2] + 0.5 * (item.0[2] - b[2]),
                    ]);
                    *item = (p, f(&p));
                }
            }
        }
    }
    simplex
        .into_iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .filter(|(_, v)| *v <= f_start)
        .unwrap_or((start, f_start))
}

impl GprModel {
    pub fn hyper(&self) -> GprHyper {
        GprHyper {
            lengthscale: self.lengthscale,
            signal_var: self.signal_var,
            noise_var: self.noise_var,
        }
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn n_train(&self) -> usize {
        self.alpha.len()
    }

    pub fn training_row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    /// `‖(K + σ_n² I)·α − t‖_∞` for the given transformed targets.
    pub fn solve_residual(&self, t: &[f64]) -> f64 {
        let rows: Vec<&[f64]> = (0..self.n_train()).map(|i| self.training_row(i)).collect();
        let k = gram(&rows, &self.hyper(), 0.0);
        let r = k * DVector::from_column_slice(&self.alpha) - DVector::from_column_slice(t);
        r.amax()
    }
}

impl Surrogate for GprModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn transform(&self) -> &ValueTransform {
        &self.transform
    }

    fn predict_transformed(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        let inv = -0.5 / (self.lengthscale * self.lengthscale);
        self.inputs
            .chunks_exact(self.dim)
            .zip(&self.alpha)
            .map(|(row, a)| a * (inv * sq_dist(row, x)).exp())
            .sum::<f64>()
            * self.signal_var
    }
}

impl DifferentiableSurrogate for GprModel {
    /// `∂μ/∂x_j = Σ_i α_i k(x, X_i) (X_ij − x_j) / ℓ²`.
    fn value_and_gradient(&self, x: &[f64]) -> (f64, Vec<f64>) {
        debug_assert_eq!(x.len(), self.dim);
        let l2 = self.lengthscale * self.lengthscale;
        let inv = -0.5 / l2;
        let mut value = 0.0;
        let mut grad = vec![0.0; self.dim];
        for (row, a) in self.inputs.chunks_exact(self.dim).zip(&self.alpha) {
            let w = a * self.signal_var * (inv * sq_dist(row, x)).exp();
            value += w;
            for j in 0..self.dim {
                grad[j] += w * (row[j] - x[j]);
            }
        }
        for g in &mut grad {
            *g /= l2;
        }
        (value, grad)
    }
}

// ---------------------------------------------------------------------------
// Bagged regression trees

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 50,
            max_depth: 6,
            min_leaf: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "lowercase")]
enum Node {
    Leaf {
        value: f64,
        count: usize,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value, .. } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

struct TreeBuilder<'a> {
    rows: &'a [Vec<f64>],
    t: &'a [f64],
    config: &'a ForestConfig,
    nodes: Vec<Node>,
}

impl TreeBuilder<'_> {
    fn build(&mut self, idx: &mut [usize], depth: usize) -> usize {
        let n = idx.len();
        let mean = idx.iter().map(|&i| self.t[i]).sum::<f64>() / n as f64;
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { value: mean, count: n });
        if depth >= self.config.max_depth || n < 2 * self.config.min_leaf {
            return id;
        }
        let Some((feature, threshold)) = self.best_split(idx) else {
            return id;
        };
        idx.sort_by(|&a, &b| self.rows[a][feature].total_cmp(&self.rows[b][feature]));
        let cut = idx.partition_point(|&i| self.rows[i][feature] <= threshold);
        let (l, r) = idx.split_at_mut(cut);
        let left = self.build(l, depth + 1);
        let right = self.build(r, depth + 1);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }

    /// Split minimizing the summed squared error of both children.
    fn best_split(&self, idx: &[usize]) -> Option<(usize, f64)> {
        let n = idx.len();
        let min_leaf = self.config.min_leaf;
        let total: f64 = idx.iter().map(|&i| self.t[i]).sum();
        let total_sq: f64 = idx.iter().map(|&i| self.t[i] * self.t[i]).sum();
        let parent_sse = total_sq - total * total / n as f64;
        if parent_sse <= 1e-14 * total_sq.max(1.0) {
            return None;
        }
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order = idx.to_vec();
        for feature in 0..self.rows[idx[0]].len() {
            order.sort_by(|&a, &b| self.rows[a][feature].total_cmp(&self.rows[b][feature]));
            let (mut s, mut sq) = (0.0, 0.0);
            for k in 0..n - 1 {
                let v = self.t[order[k]];
                s += v;
                sq += v * v;
                let nl = k + 1;
                let nr = n - nl;
                let xa = self.rows[order[k]][feature];
                let xb = self.rows[order[k + 1]][feature];
                if nl < min_leaf || nr < min_leaf || xa == xb {
                    continue;
                }
                let sse = (sq - s * s / nl as f64) + ((total_sq - sq) - (total - s).powi(2) / nr as f64);
                if best.is_none_or(|(b, _, _)| sse < b) {
                    best = Some((sse, feature, 0.5 * (xa + xb)));
                }
            }
        }
        best.filter(|(sse, _, _)| *sse < parent_sse).map(|(_, f, thr)| (f, thr))
    }
}

/// Bagged ensemble of depth-limited regression trees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    dim: usize,
    trees: Vec<Tree>,
    transform: ValueTransform,
    bounds: Bounds,
}

/// Fits the forest on bootstrap resamples. A single tree is fitted on the
/// full training set instead.
pub fn fit_forest<R: Rng + ?Sized>(train: &Dataset, config: &ForestConfig, rng: &mut R) -> Result<ForestModel> {
    if config.n_trees == 0 || config.min_leaf == 0 {
        return Err(Error::Config("forest needs n_trees ≥ 1 and min_leaf ≥ 1".into()));
    }
    if train.is_empty() || train.len() < config.min_leaf {
        return Err(Error::Config(format!(
            "forest needs at least min_leaf = {} rows, got {}",
            config.min_leaf,
            train.len()
        )));
    }
    let transform = fit_value_transform(train.targets())?;
    let t: Vec<f64> = train.targets().iter().map(|&y| transform.forward(y)).collect();
    let n = train.len();
    let mut trees = Vec::with_capacity(config.n_trees);
    for _ in 0..config.n_trees {
        let mut idx: Vec<usize> = if config.n_trees == 1 {
            (0..n).collect()
        } else {
            (0..n).map(|_| rng.random_range(0..n)).collect()
        };
        let mut builder = TreeBuilder {
            rows: train.rows(),
            t: &t,
            config,
            nodes: Vec::new(),
        };
        builder.build(&mut idx, 0);
        trees.push(Tree { nodes: builder.nodes });
    }
    Ok(ForestModel {
        dim: train.dim(),
        trees,
        transform,
        bounds: train.bounds().clone(),
    })
}

impl ForestModel {
    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }
}

impl Surrogate for ForestModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn transform(&self) -> &ValueTransform {
        &self.transform
    }

    fn predict_transformed(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }
}

// ---------------------------------------------------------------------------
// Serialization

pub const MODEL_FORMAT: &str = "warpfit-surrogate";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SurrogateModel {
    Gpr(GprModel),
    Forest(ForestModel),
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    model: SurrogateModel,
}

impl SurrogateModel {
    pub fn as_surrogate(&self) -> &dyn Surrogate {
        match self {
            SurrogateModel::Gpr(m) => m,
            SurrogateModel::Forest(m) => m,
        }
    }

    pub fn bounds(&self) -> &Bounds {
        match self {
            SurrogateModel::Gpr(m) => m.bounds(),
            SurrogateModel::Forest(m) => m.bounds(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_FORMAT_VERSION,
            model: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format != MODEL_FORMAT || file.version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!("{} v{}", file.format, file.version)));
        }
        Ok(file.model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn uniform_dataset(n: usize, bounds: &Bounds, f: impl Fn(&[f64]) -> f64, seed: u64) -> Dataset {
        let mut rng = seeded_rng(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..bounds.dim())
                    .map(|j| rng.random_range(bounds.lo()[j]..bounds.hi()[j]))
                    .collect()
            })
            .collect();
        let y = rows.iter().map(|r| f(r)).collect();
        Dataset::new(rows, y, bounds.clone()).unwrap()
    }

    fn sphere(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    #[test]
    fn value_transform_arithmetic() {
        let t = fit_value_transform(&[3.0, 3.0, 3.0]).unwrap();
        assert_eq!(t.forward(3.0), 0.0);
        let t = fit_value_transform(&[1.0, std::f64::consts::E]).unwrap();
        assert_eq!(t.shift, 1.0);
        assert_eq!(t.forward(1.0), 0.0);
        assert!((t.forward(std::f64::consts::E) - (std::f64::consts::E).ln()).abs() < 1e-15);
        assert!(fit_value_transform(&[]).is_err());
    }

    proptest! {
        #[test]
        fn value_transform_round_trip(ys in proptest::collection::vec(-1e3f64..1e3, 1..20)) {
            let t = fit_value_transform(&ys).unwrap();
            for &y in &ys {
                let back = t.inverse(t.forward(y));
                prop_assert!((back - y).abs() <= 1e-12 * y.abs().max(1.0));
                prop_assert!(t.forward(y) >= 0.0);
            }
        }
    }

    #[test]
    fn constant_targets_predict_constant() {
        let bounds = Bounds::cube(2, -5.0, 5.0).unwrap();
        let data = uniform_dataset(30, &bounds, |_| 7.5, 1);
        let m = fit_gpr(&data, &GprConfig::default(), &mut seeded_rng(2)).unwrap();
        for x in [[0.0, 0.0], [4.0, -3.0], [40.0, 40.0]] {
            assert!((m.predict(&x) - 7.5).abs() < 1e-6);
        }
    }

    #[test]
    fn gp_interpolates_sphere_sample() {
        let bounds = Bounds::cube(2, -5.0, 5.0).unwrap();
        let data = uniform_dataset(50, &bounds, sphere, 3);
        let m = fit_gpr(&data, &GprConfig::default(), &mut seeded_rng(4)).unwrap();
        let range = data.targets().iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - data.targets().iter().copied().fold(f64::INFINITY, f64::min);
        for (x, y) in data.rows().iter().zip(data.targets()) {
            assert!((m.predict(x) - y).abs() < 0.01 * range, "{} vs {y}", m.predict(x));
        }
        let t: Vec<f64> = data.targets().iter().map(|&y| m.transform().forward(y)).collect();
        let tmax = t.iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(m.solve_residual(&t) < 1e-6 * tmax);
    }

    #[test]
    fn gp_fits_1d_parabola() {
        let bounds = Bounds::cube(1, -5.0, 5.0).unwrap();
        let train = uniform_dataset(100, &bounds, sphere, 5);
        let test = uniform_dataset(100, &bounds, sphere, 6);
        let m = fit_gpr(&train, &GprConfig::default(), &mut seeded_rng(7)).unwrap();
        let smape: f64 = test
            .rows()
            .iter()
            .zip(test.targets())
            .map(|(x, &a)| {
                let p = m.predict(x);
                if p.abs() + a.abs() == 0.0 {
                    0.0
                } else {
                    (p - a).abs() / ((p.abs() + a.abs()) / 2.0)
                }
            })
            .sum::<f64>()
            / test.len() as f64;
        assert!(smape < 0.05, "SMAPE {smape}");
    }

    #[test]
    fn hyper_search_never_worse_than_starts() {
        let bounds = Bounds::cube(2, -5.0, 5.0).unwrap();
        let data = uniform_dataset(40, &bounds, |x| (x[0]).sin() * 10.0 + x[1] * x[1], 8);
        let (_, trace) = fit_gpr_traced(&data, &GprConfig::default(), &mut seeded_rng(9)).unwrap();
        assert_eq!(trace.starts.len(), 5);
        for (_, lml) in &trace.starts {
            assert!(trace.best.1 >= *lml);
        }
    }

    #[test]
    fn far_field_mean_decays_and_predictions_repeat() {
        let bounds = Bounds::cube(2, -5.0, 5.0).unwrap();
        let data = uniform_dataset(30, &bounds, sphere, 10);
        let m = fit_gpr(&data, &GprConfig::default(), &mut seeded_rng(11)).unwrap();
        let far = [1e4, -1e4];
        assert!(m.predict_transformed(&far).abs() < 1e-12);
        let x = [1.234, -2.5];
        assert_eq!(m.predict(&x).to_bits(), m.predict(&x).to_bits());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let bounds = Bounds::cube(2, -5.0, 5.0).unwrap();
        let data = uniform_dataset(60, &bounds, |x| sphere(x) + 3.0 * x[0], 12);
        let m = fit_gpr(&data, &GprConfig::default(), &mut seeded_rng(13)).unwrap();
        let mut rng = seeded_rng(14);
        let h = 1e-5;
        for _ in 0..100 {
            let x = [rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)];
            let g = m.input_gradient(&x);
            for j in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[j] += h;
                xm[j] -= h;
                let fd = (m.predict_transformed(&xp) - m.predict_transformed(&xm)) / (2.0 * h);
                assert!((g[j] - fd).abs() <= 1e-5 * fd.abs().max(1e-3), "{} vs {fd}", g[j]);
            }
        }
    }

    #[test]
    fn single_point_gradient_points_at_it() {
        let bounds = Bounds::cube(2, -5.0, 5.0).unwrap();
        let x0 = [1.0, 2.0];
        let m = GprModel {
            dim: 2,
            inputs: x0.to_vec(),
            alpha: vec![1.0],
            lengthscale: 1.5,
            signal_var: 1.0,
            noise_var: 1e-6,
            transform: ValueTransform::identity(),
            bounds,
        };
        let y = [-0.5, 0.7];
        let g = m.input_gradient(&y);
        let dir = [x0[0] - y[0], x0[1] - y[1]];
        assert!((g[0] * dir[1] - g[1] * dir[0]).abs() < 1e-14);
        assert!(g[0] * dir[0] + g[1] * dir[1] > 0.0);
    }

    #[test]
    fn gradient_vanishes_at_grid_extremum() {
        let bounds = Bounds::cube(2, -5.0, 5.0).unwrap();
        let data = uniform_dataset(40, &bounds, sphere, 15);
        let m = fit_gpr(&data, &GprConfig::default(), &mut seeded_rng(16)).unwrap();
        // Coarse grid then successively finer local grids around the minimum.
        let mut center = [0.0, 0.0];
        let mut span = 5.0;
        for _ in 0..12 {
            let mut best = (f64::INFINITY, center);
            for i in 0..=40 {
                for j in 0..=40 {
                    let x = [
                        center[0] + span * (i as f64 / 20.0 - 1.0),
                        center[1] + span * (j as f64 / 20.0 - 1.0),
                    ];
                    let v = m.predict_transformed(&x);
                    if v < best.0 {
                        best = (v, x);
                    }
                }
            }
            center = best.1;
            span /= 10.0;
        }
        let g = m.input_gradient(&center);
        assert!((g[0] * g[0] + g[1] * g[1]).sqrt() < 1e-4);
    }

    #[test]
    fn forest_depth_zero_predicts_mean() {
        let bounds = Bounds::cube(2, -5.0, 5.0).unwrap();
        let data = uniform_dataset(25, &bounds, sphere, 17);
        let cfg = ForestConfig {
            n_trees: 1,
            max_depth: 0,
            min_leaf: 1,
        };
        let m = fit_forest(&data, &cfg, &mut seeded_rng(18)).unwrap();
        let mean = data.targets().iter().map(|&y| m.transform().forward(y)).sum::<f64>() / 25.0;
        for x in [[0.0, 0.0], [3.0, -4.0]] {
            assert!((m.predict_transformed(&x) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn forest_fits_axis_aligned_steps() {
        let bounds = Bounds::cube(2, 0.0, 1.0).unwrap();
        let step = |x: &[f64]| {
            if x[0] < 0.5 {
                1.0
            } else if x[1] < 0.3 {
                5.0
            } else {
                9.0
            }
        };
        let data = uniform_dataset(200, &bounds, step, 19);
        let cfg = ForestConfig {
            n_trees: 1,
            max_depth: 4,
            min_leaf: 1,
        };
        let m = fit_forest(&data, &cfg, &mut seeded_rng(20)).unwrap();
        for (x, y) in data.rows().iter().zip(data.targets()) {
            assert!((m.predict(x) - y).abs() < 1e-12);
        }
        let x = [0.7, 0.9];
        assert_eq!(m.predict(&x).to_bits(), m.predict(&x).to_bits());
    }

    #[test]
    fn forest_rejects_degenerate_config() {
        let bounds = Bounds::cube(1, 0.0, 1.0).unwrap();
        let data = uniform_dataset(3, &bounds, sphere, 21);
        let mut rng = seeded_rng(22);
        assert!(fit_forest(
            &data,
            &ForestConfig {
                n_trees: 0,
                ..Default::default()
            },
            &mut rng
        )
        .is_err());
        assert!(fit_forest(
            &data,
            &ForestConfig {
                min_leaf: 5,
                ..Default::default()
            },
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn model_json_round_trip_is_exact() {
        let bounds = Bounds::cube(2, -5.0, 5.0).unwrap();
        let data = uniform_dataset(20, &bounds, sphere, 23);
        let gp = SurrogateModel::Gpr(fit_gpr(&data, &GprConfig::default(), &mut seeded_rng(24)).unwrap());
        let forest = SurrogateModel::Forest(
            fit_forest(
                &data,
                &ForestConfig {
                    n_trees: 3,
                    ..Default::default()
                },
                &mut seeded_rng(25),
            )
            .unwrap(),
        );
        for m in [gp, forest] {
            let back = SurrogateModel::from_json(&m.to_json().unwrap()).unwrap();
            assert_eq!(back, m);
        }
        assert!(SurrogateModel::from_json(r#"{"format":"other","version":1,"model":{"kind":"gpr"}}"#).is_err());
    }

    #[test]
    fn dataset_validation() {
        let bounds = Bounds::cube(2, 0.0, 1.0).unwrap();
        assert!(Dataset::new(vec![vec![0.5, 0.5]], vec![], bounds.clone()).is_err());
        assert!(Dataset::new(vec![vec![0.5, 2.0]], vec![1.0], bounds.clone()).is_err());
        assert!(Dataset::new(vec![vec![0.5, f64::NAN]], vec![1.0], bounds).is_err());
        let d = Dataset::with_inferred_bounds(vec![vec![1.0, 2.0], vec![3.0, 2.0]], vec![0.0, 1.0]).unwrap();
        assert_eq!(d.bounds().lo(), &[1.0, 1.5]);
        assert_eq!(d.bounds().hi(), &[3.0, 2.5]);
    }
}
