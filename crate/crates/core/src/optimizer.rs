//! CMA-ES and the learning-rate schedule for gradient descent.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeded_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmaConfig {
    /// Offspring per generation; `None` uses `4 + ⌊3 ln n⌋`.
    pub population: Option<usize>,
    pub sigma0: f64,
    /// Maximum objective evaluations, including the one at `x0`.
    pub budget: usize,
    /// Stop once recent generation values span less than this.
    pub tol_fun: f64,
    pub seed: u64,
}

impl Default for CmaConfig {
    fn default() -> Self {
        Self {
            population: None,
            sigma0: 0.5,
            budget: 6000,
            tol_fun: 1e-14,
            seed: 0,
        }
    }
}

impl CmaConfig {
    pub fn population_for(&self, n: usize) -> usize {
        self.population
            .unwrap_or_else(|| 4 + (3.0 * (n.max(1) as f64).ln()).floor() as usize)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let lambda = self.population_for(n);
        if lambda < 2 {
            return Err(Error::Config("CMA-ES population must be at least 2".into()));
        }
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(Error::Config("CMA-ES sigma0 must be positive".into()));
        }
        if self.budget < lambda {
            return Err(Error::Config(format!(
                "CMA-ES budget {} is below the population {lambda}",
                self.budget
            )));
        }
        if !(self.tol_fun >= 0.0) {
            return Err(Error::Config("CMA-ES tol_fun must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmaResult {
    pub x_best: Vec<f64>,
    pub f_best: f64,
    pub evaluations: usize,
    /// Best-so-far value after each generation.
    pub history: Vec<f64>,
}

fn penalized(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

/// (μ/μ_w, λ)-CMA-ES with cumulative step-size adaptation and rank-one plus
/// rank-μ covariance updates. Non-finite objective values count as +∞.
pub fn cma_minimize(mut objective: impl FnMut(&[f64]) -> f64, x0: &[f64], config: &CmaConfig) -> Result<CmaResult> {
    let n = x0.len();
    config.validate(n)?;
    let mut evaluations = 1;
    let mut best = (x0.to_vec(), penalized(objective(x0)));
    let mut history = Vec::new();
    if n == 0 {
        return Ok(CmaResult {
            x_best: best.0,
            f_best: best.1,
            evaluations,
            history,
        });
    }

    let nf = n as f64;
    let lambda = config.population_for(n);
    let mu = lambda / 2;
    let raw: Vec<f64> = (0..mu)
        .map(|i| ((lambda as f64 + 1.0) / 2.0).ln() - ((i + 1) as f64).ln())
        .collect();
    let wsum: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / wsum).collect();
    let mueff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();

    let cc = (4.0 + mueff / nf) / (nf + 4.0 + 2.0 * mueff / nf);
    let cs = (mueff + 2.0) / (nf + mueff + 5.0);
    let c1 = 2.0 / ((nf + 1.3).powi(2) + mueff);
    let cmu = (1.0 - c1).min(2.0 * (mueff - 2.0 + 1.0 / mueff) / ((nf + 2.0).powi(2) + mueff));
    let damps = 1.0 + 2.0 * (0.0f64).max(((mueff - 1.0) / (nf + 1.0)).sqrt() - 1.0) + cs;
    let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));

    let mut rng = seeded_rng(config.seed);
    let mut mean = DVector::from_column_slice(x0);
    let mut sigma = config.sigma0;
    let mut c = DMatrix::<f64>::identity(n, n);
    let mut b = DMatrix::<f64>::identity(n, n);
    let mut dvec = DVector::<f64>::from_element(n, 1.0);
    let mut pc = DVector::<f64>::zeros(n);
    let mut ps = DVector::<f64>::zeros(n);
    let stall_window = 10 + (30.0 * nf / lambda as f64).ceil() as usize;
    let mut recent: Vec<f64> = Vec::new();
    let mut generation = 0usize;

    while evaluations + lambda <= config.budget {
        generation += 1;
        let mut offspring: Vec<(DVector<f64>, DVector<f64>, f64)> = Vec::with_capacity(lambda);
        for _ in 0..lambda {
            let z = DVector::<f64>::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            let y = &b * z.component_mul(&dvec);
            let x = &mean + sigma * &y;
            let f = penalized(objective(x.as_slice()));
            evaluations += 1;
            if f < best.1 {
                best = (x.as_slice().to_vec(), f);
            }
            offspring.push((x, y, f));
        }
        offspring.sort_by(|a, b| a.2.total_cmp(&b.2));
        history.push(best.1);

        let old_mean = mean.clone();
        let mut y_w = DVector::<f64>::zeros(n);
        for (w, (_, y, _)) in weights.iter().zip(&offspring) {
            y_w += *w * y;
        }
        mean = &old_mean + sigma * &y_w;

        // C^{-1/2} y_w = B D^{-1} Bᵀ y_w
        let inv_sqrt_y = &b * (b.transpose() * &y_w).component_div(&dvec);
        ps = (1.0 - cs) * &ps + (cs * (2.0 - cs) * mueff).sqrt() * inv_sqrt_y;
        let ps_norm = ps.norm();
        let hsig = ps_norm / (1.0 - (1.0 - cs).powi(2 * generation as i32)).sqrt() / chi_n < 1.4 + 2.0 / (nf + 1.0);
        let hsig_f = if hsig { 1.0 } else { 0.0 };
        pc = (1.0 - cc) * &pc + hsig_f * (cc * (2.0 - cc) * mueff).sqrt() * &y_w;

        let mut rank_mu = DMatrix::<f64>::zeros(n, n);
        for (w, (_, y, _)) in weights.iter().zip(&offspring) {
            rank_mu += *w * y * y.transpose();
        }
        let delta = (1.0 - hsig_f) * cc * (2.0 - cc);
        c = (1.0 - c1 - cmu) * &c + c1 * (&pc * pc.transpose() + delta * &c) + cmu * rank_mu;
        c = 0.5 * (&c + c.transpose());

        sigma *= ((cs / damps) * (ps_norm / chi_n - 1.0)).min(1.0).exp();

        let eig = SymmetricEigen::new(c.clone());
        let floor = 1e-14 * c.trace().max(f64::MIN_POSITIVE);
        let vals = eig.eigenvalues.map(|v| v.max(floor));
        b = eig.eigenvectors;
        dvec = vals.map(f64::sqrt);
        c = &b * DMatrix::from_diagonal(&vals) * b.transpose();

        recent.push(offspring[0].2);
        if recent.len() > stall_window {
            recent.remove(0);
        }
        if recent.len() == stall_window {
            let lo = recent
                .iter()
                .chain(offspring.iter().map(|o| &o.2))
                .copied()
                .fold(f64::INFINITY, f64::min);
            let hi = recent
                .iter()
                .chain(offspring.iter().map(|o| &o.2))
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            if hi - lo < config.tol_fun {
                break;
            }
        }
        if !sigma.is_finite() || sigma * dvec.max() < 1e-300 {
            break;
        }
    }
    Ok(CmaResult {
        x_best: best.0,
        f_best: best.1,
        evaluations,
        history,
    })
}

/// Mini-batch schedule for the gradient-descent transfer fitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdSchedule {
    pub lr0: f64,
    pub decay: f64,
    pub epochs: usize,
    pub batch_fraction: f64,
    pub restarts: usize,
    /// Learning-rate multipliers for the translation, log-shape and rotation
    /// blocks. Translation steps default to 20× the shared rate: with equal
    /// rates the shape parameters mimic a shift long before `v` catches up.
    pub block_scales: [f64; 3],
}

impl Default for GdSchedule {
    fn default() -> Self {
        Self {
            lr0: 0.1,
            decay: 0.05,
            epochs: 80,
            batch_fraction: 0.15,
            restarts: 5,
            block_scales: [20.0, 1.0, 1.0],
        }
    }
}

impl GdSchedule {
    /// Checks the tuning ranges.
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("GdSchedule {what} out of range")));
        if !(1e-3..=1.0).contains(&self.lr0) {
            return bad("lr0");
        }
        if !(5e-3..=0.3).contains(&self.decay) {
            return bad("decay");
        }
        if !(60..=100).contains(&self.epochs) {
            return bad("epochs");
        }
        if !(0.1..=0.2).contains(&self.batch_fraction) {
            return bad("batch_fraction");
        }
        if self.restarts == 0 {
            return bad("restarts");
        }
        if self.block_scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return bad("block_scales");
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.epochs {
            return Err(Error::Domain(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.epochs
            )));
        }
        Ok(self.lr0 * (-self.decay * epoch as f64).exp())
    }

    pub fn batch_size(&self, n: usize) -> usize {
        ((self.batch_fraction * n as f64).ceil() as usize).max(4).min(n.max(1))
    }
}
