//! Fitting the map `g(x) = W·φ(x; θ) + v` that carries a source surrogate
//! onto a target task, by Riemannian mini-batch gradient descent or CMA-ES.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::optimizer::{cma_minimize, CmaConfig, GdSchedule};
use crate::rotation::{
    geodesic_step, log_rotation, matrix_exp_skew, project_to_tangent, random_rotation, reorthonormalize,
    skew_from_vector, skew_len, Rotation, SkewVector, REORTHONORMALIZE_EVERY,
};
use crate::specfun::QuadratureSpec;
use crate::surrogate::{Dataset, DifferentiableSurrogate, Surrogate};
use crate::warp::{warp_forward, warp_jet, Bounds, WarpParams};

/// Log-shape parameters are kept inside this interval during descent.
const LOG_SHAPE_LIMIT: f64 = 4.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams")]
pub struct TransferParams {
    pub w: Rotation,
    pub v: Vec<f64>,
    pub theta: WarpParams,
    pub bounds: Bounds,
}

#[derive(Deserialize)]
struct RawParams {
    w: Rotation,
    v: Vec<f64>,
    theta: WarpParams,
    bounds: Bounds,
}

impl TryFrom<RawParams> for TransferParams {
    type Error = Error;

    fn try_from(r: RawParams) -> Result<Self> {
        Self::new(r.w, r.v, r.theta, r.bounds)
    }
}

pub const PARAMS_FORMAT: &str = "warpfit-transfer";
pub const PARAMS_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamsFile {
    format: String,
    version: u32,
    params: TransferParams,
}

impl TransferParams {
    pub fn new(w: Rotation, v: Vec<f64>, theta: WarpParams, bounds: Bounds) -> Result<Self> {
        let d = bounds.dim();
        check_dim(d, w.dim())?;
        check_dim(d, v.len())?;
        check_dim(d, theta.dim())?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("translation must be finite".into()));
        }
        Ok(Self { w, v, theta, bounds })
    }

    pub fn identity(bounds: Bounds) -> Self {
        let d = bounds.dim();
        Self {
            w: Rotation::identity(d),
            v: vec![0.0; d],
            theta: WarpParams::identity(d),
            bounds,
        }
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    /// Flattens to `(v, z, ln α, ln β)` with `W = Exp(skew(z))`.
    pub fn encode(&self) -> Result<Vec<f64>> {
        let z = log_rotation(&self.w)?;
        let mut out = self.v.clone();
        out.extend_from_slice(z.as_slice());
        out.extend(self.theta.alpha().iter().map(|a| a.ln()));
        out.extend(self.theta.beta().iter().map(|b| b.ln()));
        Ok(out)
    }

    pub fn decode(x: &[f64], bounds: &Bounds) -> Result<Self> {
        let d = bounds.dim();
        let k = skew_len(d);
        check_dim(encoded_len(d), x.len())?;
        let w = matrix_exp_skew(&skew_from_vector(&SkewVector::new(x[d..d + k].to_vec(), d)?))?;
        let theta = WarpParams::from_logs(&x[d + k..2 * d + k], &x[2 * d + k..])?;
        Self::new(w, x[..d].to_vec(), theta, bounds.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ParamsFile {
            format: PARAMS_FORMAT.into(),
            version: PARAMS_FORMAT_VERSION,
            params: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ParamsFile = serde_json::from_str(text)?;
        if file.format != PARAMS_FORMAT || file.version != PARAMS_FORMAT_VERSION {
            return Err(Error::Format(format!("{} v{}", file.format, file.version)));
        }
        Ok(file.params)
    }
}

/// Length of the CMA-ES search vector in dimension `d`.
pub fn encoded_len(d: usize) -> usize {
    d + skew_len(d) + 2 * d
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferReport {
    pub best_params: TransferParams,
    pub best_loss: f64,
    /// Best-so-far loss per epoch (entry 0 is the initialization) per restart.
    pub loss_traces: Vec<Vec<f64>>,
    pub restart_index: usize,
    pub evaluations: usize,
    /// Restarts dropped because the loss or a gradient became non-finite.
    pub abandoned: Vec<usize>,
}

/// `y = W·φ(x; θ) + v`.
pub fn apply_transform(params: &TransferParams, x: &[f64]) -> Result<Vec<f64>> {
    let phi = warp_forward(x, &params.theta, &params.bounds)?;
    let mut y = params.w.apply(&phi);
    for (yi, vi) in y.iter_mut().zip(&params.v) {
        *yi += vi;
    }
    Ok(y)
}

fn check_task(params: &TransferParams, surrogate_dim: usize, data: &Dataset) -> Result<()> {
    check_dim(params.dim(), surrogate_dim)?;
    check_dim(params.dim(), data.dim())?;
    if data.is_empty() {
        return Err(Error::Empty("transfer dataset"));
    }
    Ok(())
}

/// Mean squared error in the surrogate's transformed space.
pub fn transfer_loss(params: &TransferParams, surrogate: &dyn Surrogate, data: &Dataset) -> Result<f64> {
    check_task(params, surrogate.dim(), data)?;
    let tf = surrogate.transform();
    let mut sum = 0.0;
    for (x, &y) in data.rows().iter().zip(data.targets()) {
        let r = surrogate.predict_transformed(&apply_transform(params, x)?) - tf.forward(y);
        sum += r * r;
    }
    Ok(sum / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferGradients {
    pub dv: Vec<f64>,
    /// Euclidean gradient with respect to the entries of `W`.
    pub dw: DMatrix<f64>,
    pub dalpha: Vec<f64>,
    pub dbeta: Vec<f64>,
    /// Loss over the same rows.
    pub loss: f64,
}

/// Analytic gradients of the mean squared loss over `batch`.
pub fn transfer_gradients(
    params: &TransferParams,
    surrogate: &dyn DifferentiableSurrogate,
    batch: &Dataset,
) -> Result<TransferGradients> {
    check_task(params, surrogate.dim(), batch)?;
    let idx: Vec<usize> = (0..batch.len()).collect();
    gradients_on(params, surrogate, batch, &idx, &QuadratureSpec::default())
}

fn gradients_on(
    params: &TransferParams,
    surrogate: &dyn DifferentiableSurrogate,
    data: &Dataset,
    idx: &[usize],
    quad: &QuadratureSpec,
) -> Result<TransferGradients> {
    let d = params.dim();
    let tf = surrogate.transform();
    let wm = params.w.matrix();
    let mut dv = DVector::<f64>::zeros(d);
    let mut dw = DMatrix::<f64>::zeros(d, d);
    let mut dalpha = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let mut loss = 0.0;
    for &i in idx {
        let jet = warp_jet(data.row(i), &params.theta, &params.bounds, quad)?;
        let phi = DVector::from_column_slice(&jet.value);
        let y = wm * &phi + DVector::from_column_slice(&params.v);
        let (pred, grad) = surrogate.value_and_gradient(y.as_slice());
        let r = pred - tf.forward(data.targets()[i]);
        loss += r * r;
        let g = DVector::from_vec(grad);
        let wt_g = wm.transpose() * &g;
        dv += r * &g;
        dw += r * &g * phi.transpose();
        for j in 0..d {
            dalpha[j] += r * wt_g[j] * jet.d_alpha[j];
            dbeta[j] += r * wt_g[j] * jet.d_beta[j];
        }
    }
    let scale = 2.0 / idx.len() as f64;
    Ok(TransferGradients {
        dv: (dv * scale).as_slice().to_vec(),
        dw: dw * scale,
        dalpha: dalpha.iter().map(|v| v * scale).collect(),
        dbeta: dbeta.iter().map(|v| v * scale).collect(),
        loss: loss / idx.len() as f64,
    })
}

/// Original-scale prediction of the surrogate at `g(x)`.
pub fn transferred_predict(surrogate: &dyn Surrogate, params: &TransferParams, x: &[f64]) -> Result<f64> {
    check_dim(params.dim(), surrogate.dim())?;
    Ok(surrogate.predict(&apply_transform(params, x)?))
}

struct GdState {
    w: Rotation,
    v: Vec<f64>,
    log_alpha: Vec<f64>,
    log_beta: Vec<f64>,
}

impl GdState {
    fn params(&self, bounds: &Bounds) -> Result<TransferParams> {
        let theta = WarpParams::from_logs(&self.log_alpha, &self.log_beta)?;
        TransferParams::new(self.w.clone(), self.v.clone(), theta, bounds.clone())
    }
}

fn initial_state<R: Rng + ?Sized>(restart: usize, bounds: &Bounds, rng: &mut R) -> GdState {
    let d = bounds.dim();
    if restart == 0 {
        return GdState {
            w: Rotation::identity(d),
            v: vec![0.0; d],
            log_alpha: vec![0.0; d],
            log_beta: vec![0.0; d],
        };
    }
    let normal = Normal::new(0.0, 0.25).expect("valid normal");
    GdState {
        w: random_rotation(d, rng),
        v: (0..d).map(|j| rng.random_range(-0.5..0.5) * bounds.width(j)).collect(),
        log_alpha: (0..d).map(|_| normal.sample(rng)).collect(),
        log_beta: (0..d).map(|_| normal.sample(rng)).collect(),
    }
}

enum RestartOutcome {
    Finished { best: TransferParams, trace: Vec<f64> },
    Abandoned { trace: Vec<f64> },
}

fn run_gd_restart(
    surrogate: &dyn DifferentiableSurrogate,
    data: &Dataset,
    schedule: &GdSchedule,
    mut state: GdState,
    rng: &mut crate::Rng,
    evaluations: &mut usize,
) -> Result<RestartOutcome> {
    let bounds = data.bounds();
    let quad = QuadratureSpec::default();
    let batch = schedule.batch_size(data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();

    let mut best_params = state.params(bounds)?;
    let mut best_loss = transfer_loss(&best_params, surrogate, data)?;
    *evaluations += 1;
    let mut trace = vec![best_loss];
    if !best_loss.is_finite() {
        return Ok(RestartOutcome::Abandoned { trace });
    }
    let mut steps = 0usize;
    for epoch in 0..schedule.epochs {
        let lr = schedule.lr_at(epoch)?;
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            let params = state.params(bounds)?;
            let Ok(g) = gradients_on(&params, surrogate, data, chunk, &quad) else {
                return Ok(RestartOutcome::Abandoned { trace });
            };
            *evaluations += 1;
            let finite =
                g.dv.iter()
                    .chain(&g.dalpha)
                    .chain(&g.dbeta)
                    .chain(g.dw.iter())
                    .all(|x| x.is_finite());
            if !finite {
                return Ok(RestartOutcome::Abandoned { trace });
            }
            let [lr_v, lr_s, lr_w] = schedule.block_scales.map(|s| s * lr);
            for j in 0..state.v.len() {
                state.v[j] -= lr_v * g.dv[j];
                let a = params.theta.alpha()[j];
                let b = params.theta.beta()[j];
                state.log_alpha[j] =
                    (state.log_alpha[j] - lr_s * a * g.dalpha[j]).clamp(-LOG_SHAPE_LIMIT, LOG_SHAPE_LIMIT);
                state.log_beta[j] =
                    (state.log_beta[j] - lr_s * b * g.dbeta[j]).clamp(-LOG_SHAPE_LIMIT, LOG_SHAPE_LIMIT);
            }
            let tangent = project_to_tangent(&state.w, &g.dw)?;
            state.w = geodesic_step(&state.w, &tangent, -lr_w)?;
            steps += 1;
            if steps.is_multiple_of(REORTHONORMALIZE_EVERY) {
                state.w = reorthonormalize(state.w.matrix())?;
            }
        }
        let params = state.params(bounds)?;
        let loss = transfer_loss(&params, surrogate, data)?;
        *evaluations += 1;
        if !loss.is_finite() {
            return Ok(RestartOutcome::Abandoned { trace });
        }
        if loss < best_loss {
            best_loss = loss;
            best_params = params;
        }
        trace.push(best_loss);
    }
    Ok(RestartOutcome::Finished {
        best: best_params,
        trace,
    })
}

/// Multi-restart mini-batch descent: Euclidean steps on `v` and the log-shapes,
/// geodesic steps on `W`. The first restart starts at the identity map.
pub fn fit_transfer_gd<R: Rng + ?Sized>(
    surrogate: &dyn DifferentiableSurrogate,
    data: &Dataset,
    schedule: &GdSchedule,
    rng: &mut R,
) -> Result<TransferReport> {
    check_dim(surrogate.dim(), data.dim())?;
    if data.len() < 2 {
        return Err(Error::Config("transfer needs at least two rows".into()));
    }
    if schedule.restarts == 0 {
        return Err(Error::Config("at least one restart is required".into()));
    }
    let seeds: Vec<u64> = (0..schedule.restarts).map(|_| rng.random()).collect();
    let mut evaluations = 0;
    let mut traces = Vec::with_capacity(schedule.restarts);
    let mut abandoned = Vec::new();
    let mut best: Option<(TransferParams, f64, usize)> = None;
    for (r, seed) in seeds.into_iter().enumerate() {
        let mut local = crate::Rng::seed_from_u64(seed);
        let init = initial_state(r, data.bounds(), &mut local);
        match run_gd_restart(surrogate, data, schedule, init, &mut local, &mut evaluations)? {
            RestartOutcome::Finished { best: p, trace } => {
                let loss = *trace.last().expect("trace starts non-empty");
                if best.as_ref().is_none_or(|(_, l, _)| loss < *l) {
                    best = Some((p, loss, r));
                }
                traces.push(trace);
            }
            RestartOutcome::Abandoned { trace } => {
                abandoned.push(r);
                traces.push(trace);
            }
        }
    }
    let (best_params, best_loss, restart_index) =
        best.ok_or_else(|| Error::IllConditioned("every restart diverged".into()))?;
    Ok(TransferReport {
        best_params,
        best_loss,
        loss_traces: traces,
        restart_index,
        evaluations,
        abandoned,
    })
}

/// CMA-ES over `(v, z, ln α, ln β)` starting from the identity encoding.
pub fn fit_transfer_cmaes(surrogate: &dyn Surrogate, data: &Dataset, config: &CmaConfig) -> Result<TransferReport> {
    check_dim(surrogate.dim(), data.dim())?;
    if data.len() < 2 {
        return Err(Error::Config("transfer needs at least two rows".into()));
    }
    let bounds = data.bounds();
    let objective = |x: &[f64]| {
        TransferParams::decode(x, bounds)
            .and_then(|p| transfer_loss(&p, surrogate, data))
            .unwrap_or(f64::INFINITY)
    };
    let x0 = vec![0.0; encoded_len(data.dim())];
    let result = cma_minimize(objective, &x0, config)?;
    let best_params = TransferParams::decode(&result.x_best, bounds)?;
    Ok(TransferReport {
        best_params,
        best_loss: result.f_best,
        loss_traces: vec![result.history],
        restart_index: 0,
        evaluations: result.evaluations,
        abandoned: Vec::new(),
    })
}
