//! A subset of the BBOB functions in their base form (no rotations, optimum
//! at the origin unless the definition forces otherwise), synthetic targets
//! built by composing a source with a transfer map, and uniform sampling.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rotation::random_rotation;
use crate::surrogate::{Dataset, SurrogateModel};
use crate::transfer::{apply_transform, TransferParams};
use crate::warp::{sample_warp_params, Bounds, WarpPrior};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchId {
    Sphere,
    Ellipsoid,
    Rastrigin,
    LinearSlope,
    AttractiveSector,
    StepEllipsoid,
    Rosenbrock,
    SharpRidge,
    DifferentPowers,
    Schaffers,
}

impl BenchId {
    pub const ALL: [BenchId; 10] = [
        BenchId::Sphere,
        BenchId::Ellipsoid,
        BenchId::Rastrigin,
        BenchId::LinearSlope,
        BenchId::AttractiveSector,
        BenchId::StepEllipsoid,
        BenchId::Rosenbrock,
        BenchId::SharpRidge,
        BenchId::DifferentPowers,
        BenchId::Schaffers,
    ];

    /// BBOB function number.
    pub fn number(self) -> u8 {
        match self {
            BenchId::Sphere => 1,
            BenchId::Ellipsoid => 2,
            BenchId::Rastrigin => 3,
            BenchId::LinearSlope => 5,
            BenchId::AttractiveSector => 6,
            BenchId::StepEllipsoid => 7,
            BenchId::Rosenbrock => 8,
            BenchId::SharpRidge => 13,
            BenchId::DifferentPowers => 14,
            BenchId::Schaffers => 17,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BenchId::Sphere => "sphere",
            BenchId::Ellipsoid => "ellipsoid",
            BenchId::Rastrigin => "rastrigin",
            BenchId::LinearSlope => "linear-slope",
            BenchId::AttractiveSector => "attractive-sector",
            BenchId::StepEllipsoid => "step-ellipsoid",
            BenchId::Rosenbrock => "rosenbrock",
            BenchId::SharpRidge => "sharp-ridge",
            BenchId::DifferentPowers => "different-powers",
            BenchId::Schaffers => "schaffers",
        }
    }

    pub fn min_dim(self) -> usize {
        match self {
            BenchId::Schaffers => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for BenchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Accepts names (`sphere`) and numbers (`f1`, `F1`).
impl FromStr for BenchId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        BenchId::ALL
            .into_iter()
            .find(|b| b.name() == lower || format!("f{}", b.number()) == lower)
            .ok_or_else(|| Error::Config(format!("unknown benchmark function `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchFn {
    pub id: BenchId,
    pub d: usize,
}

impl BenchFn {
    pub fn new(id: BenchId, d: usize) -> Result<Self> {
        if d < id.min_dim() {
            return Err(Error::Config(format!("{id} needs d ≥ {}", id.min_dim())));
        }
        Ok(Self { id, d })
    }
}

/// Anything that can be evaluated pointwise.
pub trait Objective: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64]) -> Result<f64>;
}

impl Objective for BenchFn {
    fn dim(&self) -> usize {
        self.d
    }

    fn eval(&self, x: &[f64]) -> Result<f64> {
        eval_bench(self, x)
    }
}

/// `(i − 1)/(d − 1)` with zero-based `i`; zero in one dimension.
fn ladder(i: usize, d: usize) -> f64 {
    if d > 1 {
        i as f64 / (d - 1) as f64
    } else {
        0.0
    }
}

fn t_osz(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let xh = x.abs().ln();
    let (c1, c2) = if x > 0.0 { (10.0, 7.9) } else { (5.5, 3.1) };
    x.signum() * (xh + 0.049 * ((c1 * xh).sin() + (c2 * xh).sin())).exp()
}

fn t_asy(x: &[f64], beta: f64) -> Vec<f64> {
    let d = x.len();
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            if v > 0.0 {
                v.powf(1.0 + beta * ladder(i, d) * v.sqrt())
            } else {
                v
            }
        })
        .collect()
}

/// Applies `Λ^α` in place.
fn lambda(z: &mut [f64], alpha: f64) {
    let d = z.len();
    for (i, v) in z.iter_mut().enumerate() {
        *v *= alpha.powf(0.5 * ladder(i, d));
    }
}

fn f_pen(x: &[f64]) -> f64 {
    x.iter().map(|v| (v.abs() - 5.0).max(0.0).powi(2)).sum()
}

pub fn eval_bench(f: &BenchFn, x: &[f64]) -> Result<f64> {
    check_dim(f.d, x.len())?;
    let d = f.d;
    let value = match f.id {
        BenchId::Sphere => x.iter().map(|v| v * v).sum(),
        BenchId::Ellipsoid => x
            .iter()
            .enumerate()
            .map(|(i, &v)| 10f64.powf(6.0 * ladder(i, d)) * t_osz(v).powi(2))
            .sum(),
        BenchId::Rastrigin => {
            let osz: Vec<f64> = x.iter().map(|&v| t_osz(v)).collect();
            let mut z = t_asy(&osz, 0.2);
            lambda(&mut z, 10.0);
            let cos: f64 = z.iter().map(|v| (2.0 * std::f64::consts::PI * v).cos()).sum();
            10.0 * (d as f64 - cos) + z.iter().map(|v| v * v).sum::<f64>()
        }
        BenchId::LinearSlope => x
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let s = 10f64.powf(ladder(i, d));
                let z = if 5.0 * v < 25.0 { v } else { 5.0 };
                5.0 * s - s * z
            })
            .sum(),
        BenchId::AttractiveSector => {
            let mut z = x.to_vec();
            lambda(&mut z, 10.0);
            let inner: f64 = z
                .iter()
                .map(|&v| {
                    let s = if v > 0.0 { 100.0 } else { 1.0 };
                    (s * v).powi(2)
                })
                .sum();
            t_osz(inner).powf(0.9)
        }
        BenchId::StepEllipsoid => {
            let mut zh = x.to_vec();
            lambda(&mut zh, 10.0);
            let sum: f64 = zh
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let zt = if v.abs() > 0.5 {
                        (0.5 + v).floor()
                    } else {
                        (0.5 + 10.0 * v).floor() / 10.0
                    };
                    10f64.powf(2.0 * ladder(i, d)) * zt * zt
                })
                .sum();
            0.1 * (zh[0].abs() / 1e4).max(sum) + f_pen(x)
        }
        BenchId::Rosenbrock => x
            .windows(2)
            .map(|w| 100.0 * (w[0] * w[0] - w[1]).powi(2) + (w[0] - 1.0).powi(2))
            .sum(),
        BenchId::SharpRidge => {
            let mut z = x.to_vec();
            lambda(&mut z, 10.0);
            z[0] * z[0] + 100.0 * z[1..].iter().map(|v| v * v).sum::<f64>().sqrt()
        }
        BenchId::DifferentPowers => x
            .iter()
            .enumerate()
            .map(|(i, v)| v.abs().powf(2.0 + 4.0 * ladder(i, d)))
            .sum::<f64>()
            .sqrt(),
        BenchId::Schaffers => {
            if d < 2 {
                return Err(Error::Config("schaffers needs d ≥ 2".into()));
            }
            let mut z = t_asy(x, 0.5);
            lambda(&mut z, 10.0);
            let mean: f64 = z
                .windows(2)
                .map(|w| {
                    let s = (w[0] * w[0] + w[1] * w[1]).sqrt();
                    s.sqrt() + s.sqrt() * (50.0 * s.powf(0.2)).sin().powi(2)
                })
                .sum::<f64>()
                / (d - 1) as f64;
            mean * mean + 10.0 * f_pen(x)
        }
    };
    Ok(value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TargetSource {
    Bench(BenchFn),
    Surrogate(SurrogateModel),
}

impl TargetSource {
    fn dim(&self) -> usize {
        match self {
            TargetSource::Bench(b) => b.d,
            TargetSource::Surrogate(m) => m.as_surrogate().dim(),
        }
    }

    fn eval(&self, y: &[f64]) -> Result<f64> {
        match self {
            TargetSource::Bench(b) => eval_bench(b, y),
            TargetSource::Surrogate(m) => Ok(m.as_surrogate().predict(y)),
        }
    }
}

/// `target(x) = source(g(x))` for the generating map `g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetFn {
    pub source: TargetSource,
    pub gen: TransferParams,
}

pub fn make_target(source: TargetSource, gen: TransferParams) -> Result<TargetFn> {
    check_dim(source.dim(), gen.dim())?;
    Ok(TargetFn { source, gen })
}

impl Objective for TargetFn {
    fn dim(&self) -> usize {
        self.gen.dim()
    }

    fn eval(&self, x: &[f64]) -> Result<f64> {
        self.source.eval(&apply_transform(&self.gen, x)?)
    }
}

/// Random generating map: shapes from `prior`, a Haar rotation and a
/// translation uniform in ±10% of the box width.
pub fn sample_instance<R: Rng + ?Sized>(
    prior: &WarpPrior,
    d: usize,
    bounds: &Bounds,
    rng: &mut R,
) -> Result<TransferParams> {
    check_dim(d, bounds.dim())?;
    let theta = sample_warp_params(prior, d, rng)?;
    let w = random_rotation(d, rng);
    let v = (0..d)
        .map(|j| rng.random_range(-1.0..=1.0) * 0.1 * bounds.width(j))
        .collect();
    TransferParams::new(w, v, theta, bounds.clone())
}

/// `n` rows uniform in `bounds`, labelled by `f`.
pub fn sample_dataset<R: Rng + ?Sized>(f: &dyn Objective, n: usize, bounds: &Bounds, rng: &mut R) -> Result<Dataset> {
    check_dim(f.dim(), bounds.dim())?;
    if n == 0 {
        return Err(Error::Empty("sample"));
    }
    let mut rows = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..bounds.dim())
            .map(|j| rng.random_range(bounds.lo()[j]..=bounds.hi()[j]))
            .collect();
        y.push(f.eval(&x)?);
        rows.push(x);
    }
    Dataset::new(rows, y, bounds.clone())
}
