//! Per-coordinate beta-CDF input warping.
//!
//! Each coordinate is normalized against a [`Bounds`] box, passed through the
//! regularized incomplete beta function `I_u(α_i, β_i)` and mapped back into the
//! same box, so the warp is a monotone bijection of the box onto itself.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::specfun::{digamma, log_weighted_inc_beta, reg_inc_beta, QuadratureSpec};

/// Slack for points that drift outside the box by rounding.
pub const CLAMP_TOLERANCE: f64 = 1e-9;

/// Axis-aligned box `[lo_i, hi_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBounds")]
pub struct Bounds {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

#[derive(Deserialize)]
struct RawBounds {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl TryFrom<RawBounds> for Bounds {
    type Error = Error;
    fn try_from(raw: RawBounds) -> Result<Self> {
        Bounds::new(raw.lo, raw.hi)
    }
}

impl Bounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        check_dim(lo.len(), hi.len())?;
        if lo.is_empty() {
            return Err(Error::Empty("bounds"));
        }
        for (i, (&l, &h)) in lo.iter().zip(&hi).enumerate() {
            if !(l.is_finite() && h.is_finite() && l < h) {
                return Err(Error::Domain(format!(
                    "bounds must satisfy lo < hi, coordinate {i} has [{l}, {h}]"
                )));
            }
        }
        Ok(Self { lo, hi })
    }

    /// The cube `[lo, hi]^d`.
    pub fn cube(d: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; d], vec![hi; d])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn width(&self, i: usize) -> f64 {
        self.hi[i] - self.lo[i]
    }

    pub fn widths(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.width(i)).collect()
    }

    /// Length of the main diagonal.
    pub fn diameter(&self) -> f64 {
        (0..self.dim()).map(|i| self.width(i).powi(2)).sum::<f64>().sqrt()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(&v, (&l, &h))| v >= l && v <= h)
    }

    /// Maps `x` to `[0, 1]^d`, clamping excursions up to [`CLAMP_TOLERANCE`].
    pub fn normalize(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        x.iter()
            .enumerate()
            .map(|(i, &v)| {
                let (l, h) = (self.lo[i], self.hi[i]);
                if !v.is_finite() || v < l - CLAMP_TOLERANCE || v > h + CLAMP_TOLERANCE {
                    return Err(Error::Domain(format!("coordinate {i} = {v} lies outside [{l}, {h}]")));
                }
                Ok(((v - l) / (h - l)).clamp(0.0, 1.0))
            })
            .collect()
    }
}

/// Beta shape parameters `(α_i, β_i)` per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWarp")]
pub struct WarpParams {
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

#[derive(Deserialize)]
struct RawWarp {
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl TryFrom<RawWarp> for WarpParams {
    type Error = Error;
    fn try_from(raw: RawWarp) -> Result<Self> {
        WarpParams::new(raw.alpha, raw.beta)
    }
}

impl WarpParams {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        check_dim(alpha.len(), beta.len())?;
        if alpha.is_empty() {
            return Err(Error::Empty("warp parameters"));
        }
        if let Some(bad) = alpha.iter().chain(&beta).find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Domain(format!(
                "shape parameters must be positive and finite, got {bad}"
            )));
        }
        Ok(Self { alpha, beta })
    }

    /// α = β = 1 in every coordinate.
    pub fn identity(d: usize) -> Self {
        Self {
            alpha: vec![1.0; d],
            beta: vec![1.0; d],
        }
    }

    /// Builds shapes from their logarithms; positivity holds by construction.
    pub fn from_logs(log_alpha: &[f64], log_beta: &[f64]) -> Result<Self> {
        Self::new(
            log_alpha.iter().map(|v| v.exp()).collect(),
            log_beta.iter().map(|v| v.exp()).collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }
}

/// The four warp geometries of the synthetic benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarpShape {
    Linear,
    Exponential,
    Logarithmic,
    Sigmoidal,
}

impl WarpShape {
    pub const ALL: [WarpShape; 4] = [
        WarpShape::Linear,
        WarpShape::Exponential,
        WarpShape::Logarithmic,
        WarpShape::Sigmoidal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WarpShape::Linear => "linear",
            WarpShape::Exponential => "exponential",
            WarpShape::Logarithmic => "logarithmic",
            WarpShape::Sigmoidal => "sigmoidal",
        }
    }
}

impl std::str::FromStr for WarpShape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        WarpShape::ALL
            .into_iter()
            .find(|w| w.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown warp shape '{s}'")))
    }
}

impl std::fmt::Display for WarpShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Log-normal prior on the shape parameters: `ln α_i ~ N(mu_alpha, sigma_alpha)`,
/// `ln β_i ~ N(mu_beta, sigma_beta)`, i.i.d. over coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarpPrior {
    pub mu_alpha: f64,
    pub sigma_alpha: f64,
    pub mu_beta: f64,
    pub sigma_beta: f64,
    pub shape: WarpShape,
}

impl WarpPrior {
    pub fn preset(shape: WarpShape) -> Self {
        let (mu_alpha, sigma_alpha, mu_beta, sigma_beta) = match shape {
            WarpShape::Linear => (0.0, 0.5, 0.0, 0.5),
            WarpShape::Exponential => (0.0, 0.25, 1.0, 1.0),
            WarpShape::Logarithmic => (1.0, 1.0, 0.0, 0.25),
            WarpShape::Sigmoidal => (2.0, 0.5, 2.0, 0.5),
        };
        Self {
            mu_alpha,
            sigma_alpha,
            mu_beta,
            sigma_beta,
            shape,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.mu_alpha, self.sigma_alpha, self.mu_beta, self.sigma_beta]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.sigma_alpha < 0.0 || self.sigma_beta < 0.0 {
            return Err(Error::Config(
                "warp prior needs finite means and non-negative spreads".into(),
            ));
        }
        Ok(())
    }
}

/// Warped point together with its shape derivatives, all in box units.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpJet {
    pub value: Vec<f64>,
    pub d_alpha: Vec<f64>,
    pub d_beta: Vec<f64>,
}

fn check_warp_dims(x: &[f64], theta: &WarpParams, bounds: &Bounds) -> Result<()> {
    check_dim(bounds.dim(), theta.dim())?;
    check_dim(bounds.dim(), x.len())
}

/// `lo + (hi − lo) ⊙ I_u(α, β)` with `u = (x − lo) / (hi − lo)`.
pub fn warp_forward(x: &[f64], theta: &WarpParams, bounds: &Bounds) -> Result<Vec<f64>> {
    check_warp_dims(x, theta, bounds)?;
    let u = bounds.normalize(x)?;
    u.iter()
        .enumerate()
        .map(|(i, &ui)| {
            if theta.alpha[i] == 1.0 && theta.beta[i] == 1.0 {
                // Exact identity, free of the normalize/denormalize round trip.
                return Ok(x[i].clamp(bounds.lo[i], bounds.hi[i]));
            }
            let phi = reg_inc_beta(ui, theta.alpha[i], theta.beta[i])?;
            Ok(bounds.lo[i] + bounds.width(i) * phi)
        })
        .collect()
}

/// `(∂φ/∂α, ∂φ/∂β)` per coordinate, scaled to box units.
pub fn warp_shape_gradients(
    x: &[f64],
    theta: &WarpParams,
    bounds: &Bounds,
    quad: &QuadratureSpec,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let jet = warp_jet(x, theta, bounds, quad)?;
    Ok((jet.d_alpha, jet.d_beta))
}

/// Value and shape derivatives in one pass.
///
/// `∂I/∂α = A − I·(ψ(α) − ψ(α+β))` and `∂I/∂β = B − I·(ψ(β) − ψ(α+β))`.
pub fn warp_jet(x: &[f64], theta: &WarpParams, bounds: &Bounds, quad: &QuadratureSpec) -> Result<WarpJet> {
    check_warp_dims(x, theta, bounds)?;
    let u = bounds.normalize(x)?;
    let d = u.len();
    let mut jet = WarpJet {
        value: Vec::with_capacity(d),
        d_alpha: Vec::with_capacity(d),
        d_beta: Vec::with_capacity(d),
    };
    for (i, &ui) in u.iter().enumerate() {
        let (a, b) = (theta.alpha[i], theta.beta[i]);
        let width = bounds.width(i);
        let phi = reg_inc_beta(ui, a, b)?;
        if a == 1.0 && b == 1.0 {
            jet.value.push(x[i].clamp(bounds.lo[i], bounds.hi[i]));
        } else {
            jet.value.push(bounds.lo[i] + width * phi);
        }
        if ui == 0.0 || ui == 1.0 {
            jet.d_alpha.push(0.0);
            jet.d_beta.push(0.0);
            continue;
        }
        let psi_ab = digamma(a + b)?;
        let delta_a = digamma(a)? - psi_ab;
        let delta_b = digamma(b)? - psi_ab;
        let (da, db) = if ui <= 0.5 {
            let (int_a, int_b) = log_weighted_inc_beta(ui, a, b, quad)?;
            (int_a - phi * delta_a, int_b - phi * delta_b)
        } else {
            // Near u = 1 both A and I·Δ approach Δ; work with the upper tails
            // instead. Reflecting t ↦ 1 − t swaps the roles of the two integrals.
            let (tail_b, tail_a) = log_weighted_inc_beta(1.0 - ui, b, a, quad)?;
            let upper = reg_inc_beta(1.0 - ui, b, a)?;
            (upper * delta_a - tail_a, upper * delta_b - tail_b)
        };
        jet.d_alpha.push(width * da);
        jet.d_beta.push(width * db);
    }
    Ok(jet)
}

/// Draws shape parameters from a log-normal prior.
pub fn sample_warp_params<R: Rng + ?Sized>(prior: &WarpPrior, d: usize, rng: &mut R) -> Result<WarpParams> {
    prior.validate()?;
    if d == 0 {
        return Err(Error::Config("dimension must be at least 1".into()));
    }
    let na = Normal::new(prior.mu_alpha, prior.sigma_alpha).map_err(|e| Error::Config(e.to_string()))?;
    let nb = Normal::new(prior.mu_beta, prior.sigma_beta).map_err(|e| Error::Config(e.to_string()))?;
    let mut alpha = Vec::with_capacity(d);
    let mut beta = Vec::with_capacity(d);
    for _ in 0..d {
        alpha.push(na.sample(rng).exp());
        beta.push(nb.sample(rng).exp());
    }
    WarpParams::new(alpha, beta)
}
