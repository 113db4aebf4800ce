//! Rotation-group machinery on SO(d): tangent projection, geodesic steps via
//! the matrix exponential, the 𝔰𝔬(d) ↔ ℝ^{d(d−1)/2} codec, Haar sampling and
//! drift repair.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Frobenius tolerance for `WᵀW = I` and `det W = 1`.
pub const ROTATION_TOLERANCE: f64 = 1e-8;
/// Antisymmetry tolerance accepted by the codec and the exponential.
pub const SKEW_TOLERANCE: f64 = 1e-10;
/// Geodesic steps between reorthonormalizations in the gradient fitter.
pub const REORTHONORMALIZE_EVERY: usize = 50;

/// A d×d rotation matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Rotation(DMatrix<f64>);

impl TryFrom<Vec<Vec<f64>>> for Rotation {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let d = rows.len();
        for r in &rows {
            check_dim(d, r.len())?;
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Rotation::from_matrix(DMatrix::from_row_slice(d, d, &flat))
    }
}

impl From<Rotation> for Vec<Vec<f64>> {
    fn from(r: Rotation) -> Self {
        r.0.row_iter().map(|row| row.iter().copied().collect()).collect()
    }
}

impl Rotation {
    pub fn identity(d: usize) -> Self {
        Self(DMatrix::identity(d, d))
    }

    /// Wraps a matrix after checking the group invariants.
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch {
                expected: m.nrows(),
                got: m.ncols(),
            });
        }
        let err = orthogonality_error(&m);
        let det = if m.nrows() == 0 { 1.0 } else { m.determinant() };
        if !(err < ROTATION_TOLERANCE) || !((det - 1.0).abs() < ROTATION_TOLERANCE) {
            return Err(Error::TooFarFromGroup(err.max((det - 1.0).abs())));
        }
        Ok(Self(m))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    /// `‖WᵀW − I‖_F`.
    pub fn orthogonality_error(&self) -> f64 {
        orthogonality_error(&self.0)
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d).map(|i| (0..d).map(|j| self.0[(i, j)] * x[j]).sum()).collect()
    }
}

fn orthogonality_error(m: &DMatrix<f64>) -> f64 {
    let d = m.nrows();
    (m.transpose() * m - DMatrix::<f64>::identity(d, d)).norm()
}

fn skew_deviation(a: &DMatrix<f64>) -> f64 {
    (a + a.transpose()).norm()
}

/// Flattened upper triangle of an antisymmetric matrix, filled row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewVector {
    z: Vec<f64>,
    d: usize,
}

impl SkewVector {
    pub fn new(z: Vec<f64>, d: usize) -> Result<Self> {
        check_dim(skew_len(d), z.len())?;
        Ok(Self { z, d })
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            z: vec![0.0; skew_len(d)],
            d,
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.z
    }
}

/// `d(d−1)/2`.
pub fn skew_len(d: usize) -> usize {
    d * d.saturating_sub(1) / 2
}

/// `P(M) = W (WᵀM − MᵀW) / 2`.
pub fn project_to_tangent(w: &Rotation, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim(w.dim(), m.nrows())?;
    check_dim(w.dim(), m.ncols())?;
    let wt_m = w.0.transpose() * m;
    let skew = (&wt_m - wt_m.transpose()) * 0.5;
    Ok(&w.0 * skew)
}

/// `W · Exp(σ WᵀG)`; `G` must lie in the tangent space at `W`.
pub fn geodesic_step(w: &Rotation, g: &DMatrix<f64>, sigma: f64) -> Result<Rotation> {
    check_dim(w.dim(), g.nrows())?;
    check_dim(w.dim(), g.ncols())?;
    let wt_g = w.0.transpose() * g;
    let dev = skew_deviation(&wt_g);
    if !(dev <= ROTATION_TOLERANCE * g.norm().max(1.0)) {
        return Err(Error::TangentViolation(dev));
    }
    if sigma == 0.0 {
        return Ok(w.clone());
    }
    // Drop the rounding-level symmetric residue before exponentiating.
    let a = (&wt_g - wt_g.transpose()) * (0.5 * sigma);
    let step = exp_skew_unchecked(&a);
    Ok(Rotation(&w.0 * step))
}

pub fn skew_from_vector(z: &SkewVector) -> DMatrix<f64> {
    let d = z.d;
    let mut a = DMatrix::zeros(d, d);
    let mut k = 0;
    for i in 0..d {
        for j in (i + 1)..d {
            a[(i, j)] = z.z[k];
            a[(j, i)] = -z.z[k];
            k += 1;
        }
    }
    a
}

pub fn vector_from_skew(a: &DMatrix<f64>) -> Result<SkewVector> {
    check_dim(a.nrows(), a.ncols())?;
    let dev = skew_deviation(a);
    if dev > SKEW_TOLERANCE {
        return Err(Error::NotAntisymmetric(dev));
    }
    let d = a.nrows();
    let mut z = Vec::with_capacity(skew_len(d));
    for i in 0..d {
        for j in (i + 1)..d {
            z.push(a[(i, j)]);
        }
    }
    Ok(SkewVector { z, d })
}

/// Matrix exponential of an antisymmetric matrix.
pub fn matrix_exp_skew(a: &DMatrix<f64>) -> Result<Rotation> {
    check_dim(a.nrows(), a.ncols())?;
    let dev = skew_deviation(a);
    if dev > SKEW_TOLERANCE * a.norm().max(1.0) {
        return Err(Error::NotAntisymmetric(dev));
    }
    Ok(Rotation(exp_skew_unchecked(a)))
}

fn exp_skew_unchecked(a: &DMatrix<f64>) -> DMatrix<f64> {
    let d = a.nrows();
    if d == 2 {
        let t = 0.5 * (a[(1, 0)] - a[(0, 1)]);
        let (s, c) = t.sin_cos();
        return DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
    }
    expm_scaling_squaring(a)
}

/// Scaling and squaring with a Taylor series on the scaled matrix.
pub(crate) fn expm_scaling_squaring(a: &DMatrix<f64>) -> DMatrix<f64> {
    let d = a.nrows();
    let norm1 = (0..d)
        .map(|j| a.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm1 > 0.25 {
        (norm1 / 0.25).log2().ceil() as i32
    } else {
        0
    };
    let scaled = a / 2f64.powi(squarings);
    let mut result = DMatrix::<f64>::identity(d, d);
    let mut term = DMatrix::<f64>::identity(d, d);
    for k in 1..=30 {
        term = &term * &scaled / k as f64;
        result += &term;
        if term.norm() < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// Principal logarithm of a rotation, as a skew vector.
///
/// Fails for rotations with an eigenvalue at −1, where the logarithm is not
/// unique.
pub fn log_rotation(w: &Rotation) -> Result<SkewVector> {
    let d = w.dim();
    if d == 2 {
        let t = w.0[(1, 0)].atan2(w.0[(0, 0)]);
        return SkewVector::new(vec![-t], 2);
    }
    // Repeated square roots (Denman–Beavers) until close to I, then the
    // series of log(I + X).
    let id = DMatrix::<f64>::identity(d, d);
    let mut root = w.0.clone();
    let mut halvings = 0;
    while (&root - &id).norm() > 0.25 {
        if halvings == 40 {
            return Err(Error::Domain("rotation has no principal logarithm".into()));
        }
        let mut y = root.clone();
        let mut z = id.clone();
        for _ in 0..60 {
            let (Some(yi), Some(zi)) = (y.clone().try_inverse(), z.clone().try_inverse()) else {
                return Err(Error::Domain("rotation has no principal logarithm".into()));
            };
            let y_next = (&y + zi) * 0.5;
            z = (&z + yi) * 0.5;
            let done = (&y_next - &y).norm() < 1e-15 * y_next.norm();
            y = y_next;
            if done {
                break;
            }
        }
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("rotation has no principal logarithm".into()));
        }
        root = y;
        halvings += 1;
    }
    let x = &root - &id;
    let mut log = DMatrix::<f64>::zeros(d, d);
    let mut power = id.clone();
    for k in 1..=60 {
        power = &power * &x;
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        log += &power * (sign / k as f64);
        if power.norm() < 1e-18 {
            break;
        }
    }
    log *= 2f64.powi(halvings);
    let log = (&log - log.transpose()) * 0.5;
    vector_from_skew(&log)
}

/// Haar-distributed rotation: QR of a Gaussian matrix with sign correction.
pub fn random_rotation<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Rotation {
    if d <= 1 {
        return Rotation::identity(d);
    }
    let g = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if q.determinant() < 0.0 {
        q.column_mut(0).neg_mut();
    }
    Rotation(q)
}

/// Nearest rotation by polar decomposition.
pub fn reorthonormalize(w: &DMatrix<f64>) -> Result<Rotation> {
    check_dim(w.nrows(), w.ncols())?;
    let err = orthogonality_error(w);
    if !(err < 0.1) {
        return Err(Error::TooFarFromGroup(err));
    }
    let d = w.nrows();
    if d == 0 {
        return Ok(Rotation::identity(0));
    }
    let svd = w.clone().svd(true, true);
    let mut u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let mut r = &u * &v_t;
    if r.determinant() < 0.0 {
        let smallest = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        u.column_mut(smallest).neg_mut();
        r = &u * &v_t;
    }
    Ok(Rotation(r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::PI;

    fn random_matrix(d: usize, rng: &mut crate::Rng) -> DMatrix<f64> {
        DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_skew(d: usize, scale: f64, rng: &mut crate::Rng) -> DMatrix<f64> {
        let m = random_matrix(d, rng);
        (&m - m.transpose()) * (0.5 * scale)
    }

    #[test]
    fn log_inverts_exp() {
        let mut rng = seeded_rng(77);
        for d in 2..=6 {
            for _ in 0..20 {
                let a = random_skew(d, 1.5, &mut rng);
                let w = matrix_exp_skew(&a).unwrap();
                let z = log_rotation(&w).unwrap();
                let back = matrix_exp_skew(&skew_from_vector(&z)).unwrap();
                assert!((back.matrix() - w.matrix()).norm() < 1e-10);
            }
        }
    }

    fn assert_rotation(r: &Rotation) {
        assert!(r.orthogonality_error() < ROTATION_TOLERANCE);
        assert!((r.matrix().determinant() - 1.0).abs() < ROTATION_TOLERANCE);
    }

    #[test]
    fn projection_at_identity_is_skew_part() {
        let mut rng = seeded_rng(1);
        let m = random_matrix(4, &mut rng);
        let p = project_to_tangent(&Rotation::identity(4), &m).unwrap();
        let expect = (&m - m.transpose()) * 0.5;
        assert!((p - expect).norm() < 1e-15);
    }

    #[test]
    fn projection_is_idempotent_and_tangent() {
        let mut rng = seeded_rng(2);
        for k in 0..50 {
            let d = 2 + k % 5;
            let w = random_rotation(d, &mut rng);
            let m = random_matrix(d, &mut rng);
            let p = project_to_tangent(&w, &m).unwrap();
            let pp = project_to_tangent(&w, &p).unwrap();
            assert!((&pp - &p).norm() < 1e-12);
            let wtp = w.matrix().transpose() * &p;
            assert!((&wtp + wtp.transpose()).norm() < 1e-12);
        }
    }

    #[test]
    fn geodesic_zero_step_and_planar_closed_form() {
        let mut rng = seeded_rng(3);
        let w = random_rotation(3, &mut rng);
        let g = project_to_tangent(&w, &random_matrix(3, &mut rng)).unwrap();
        assert_eq!(geodesic_step(&w, &g, 0.0).unwrap(), w);

        let t = 0.7;
        let g = DMatrix::from_row_slice(2, 2, &[0.0, -t, t, 0.0]);
        let r = geodesic_step(&Rotation::identity(2), &g, 1.0).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[t.cos(), -t.sin(), t.sin(), t.cos()]);
        assert!((r.matrix() - expect).norm() < 1e-15);
    }

    #[test]
    fn geodesic_rejects_non_tangent_direction() {
        let g = DMatrix::<f64>::identity(3, 3);
        assert!(matches!(
            geodesic_step(&Rotation::identity(3), &g, 0.1),
            Err(Error::TangentViolation(_))
        ));
    }

    #[test]
    fn chained_steps_stay_on_group() {
        let mut rng = seeded_rng(4);
        let mut w = random_rotation(5, &mut rng);
        for _ in 0..100 {
            let g = project_to_tangent(&w, &random_matrix(5, &mut rng)).unwrap();
            w = geodesic_step(&w, &g, rng.random_range(-1.0..1.0)).unwrap();
        }
        assert_rotation(&w);
    }

    #[test]
    fn riemannian_step_decreases_smooth_objective() {
        // f(W) = ½‖W − M‖²_F, Euclidean gradient W − M.
        let mut rng = seeded_rng(5);
        for _ in 0..10 {
            let w = random_rotation(4, &mut rng);
            let m = random_matrix(4, &mut rng) * 3.0;
            let f = |r: &Rotation| 0.5 * (r.matrix() - &m).norm_squared();
            let grad = project_to_tangent(&w, &(w.matrix() - &m)).unwrap();
            if grad.norm() < 1e-9 {
                continue;
            }
            let mut sigma = 1.0;
            let mut decreased = false;
            for _ in 0..30 {
                let next = geodesic_step(&w, &grad, -sigma).unwrap();
                if f(&next) < f(&w) {
                    decreased = true;
                    break;
                }
                sigma *= 0.5;
            }
            assert!(decreased);
        }
    }

    #[test]
    fn codec_fill_order() {
        let z = SkewVector::new(vec![1.0, 2.0, 3.0], 3).unwrap();
        let a = skew_from_vector(&z);
        let expect = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 2.0, -1.0, 0.0, 3.0, -2.0, -3.0, 0.0]);
        assert_eq!(a, expect);
        assert!(SkewVector::new(vec![1.0, 2.0], 3).is_err());
        assert!(vector_from_skew(&DMatrix::identity(3, 3)).is_err());
        let zero = skew_from_vector(&SkewVector::zeros(4));
        assert_eq!(matrix_exp_skew(&zero).unwrap(), Rotation::identity(4));
    }

    #[test]
    fn exp_closed_forms_and_inverse() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -PI / 2.0, PI / 2.0, 0.0]);
        let r = matrix_exp_skew(&a).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        assert!((r.matrix() - expect).norm() < 1e-15);

        let mut rng = seeded_rng(6);
        for _ in 0..20 {
            let a2 = random_skew(2, 6.0, &mut rng);
            let fast = matrix_exp_skew(&a2).unwrap();
            assert!((fast.matrix() - expm_scaling_squaring(&a2)).norm() < 1e-12);

            let a4 = random_skew(4, 4.0, &mut rng);
            let e = matrix_exp_skew(&a4).unwrap();
            let inv = matrix_exp_skew(&(-&a4)).unwrap();
            assert!((e.matrix() * inv.matrix() - DMatrix::<f64>::identity(4, 4)).norm() < 1e-10);
            assert_rotation(&e);
        }
    }

    #[test]
    fn exp_matches_series_for_small_generators() {
        // For ‖A‖ small the plain Taylor series is an independent reference.
        let mut rng = seeded_rng(7);
        let a = random_skew(5, 0.01, &mut rng);
        let mut series = DMatrix::<f64>::identity(5, 5);
        let mut term = DMatrix::<f64>::identity(5, 5);
        for k in 1..20 {
            term = &term * &a / k as f64;
            series += &term;
        }
        assert!((matrix_exp_skew(&a).unwrap().matrix() - series).norm() < 1e-15);
    }

    #[test]
    fn random_rotation_is_valid_and_deterministic() {
        for d in 1..=8 {
            let a = random_rotation(d, &mut seeded_rng(9));
            let b = random_rotation(d, &mut seeded_rng(9));
            assert_rotation(&a);
            assert_eq!(a.matrix().as_slice(), b.matrix().as_slice());
        }
    }

    #[test]
    fn planar_haar_angle_is_uniform() {
        let mut rng = seeded_rng(10);
        let n = 10_000;
        let mut angles: Vec<f64> = (0..n)
            .map(|_| {
                let r = random_rotation(2, &mut rng);
                r.matrix()[(1, 0)].atan2(r.matrix()[(0, 0)])
            })
            .collect();
        angles.sort_by(f64::total_cmp);
        let ks = angles
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let cdf = (a + PI) / (2.0 * PI);
                (cdf - i as f64 / n as f64)
                    .abs()
                    .max(((i + 1) as f64 / n as f64 - cdf).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.02, "KS statistic {ks}");
    }

    #[test]
    fn reorthonormalize_repairs_drift() {
        let mut rng = seeded_rng(11);
        let w = random_rotation(4, &mut rng);
        let same = reorthonormalize(w.matrix()).unwrap();
        assert!((same.matrix() - w.matrix()).norm() < 1e-12);

        let s = random_matrix(4, &mut rng);
        let sym = (&s + s.transpose()) * 0.5;
        let near = DMatrix::<f64>::identity(4, 4) + sym * 1e-6;
        let fixed = reorthonormalize(&near).unwrap();
        assert!((fixed.matrix() - DMatrix::<f64>::identity(4, 4)).norm() < 2e-6);
        assert!(fixed.orthogonality_error() < 1e-12);
        assert!((fixed.matrix().determinant() - 1.0).abs() < 1e-12);

        assert!(reorthonormalize(&(DMatrix::<f64>::identity(3, 3) * 2.0)).is_err());
    }

    #[test]
    fn serde_validates_invariants() {
        let r = random_rotation(3, &mut seeded_rng(12));
        let json = serde_json::to_string(&r).unwrap();
        let back: Rotation = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        assert!(serde_json::from_str::<Rotation>("[[1.0,0.0],[0.0,2.0]]").is_err());
    }

    proptest! {
        #[test]
        fn codec_round_trip(d in 2usize..=8, seed in any::<u64>()) {
            let mut rng = seeded_rng(seed);
            let z: Vec<f64> = (0..skew_len(d)).map(|_| rng.random_range(-3.0..3.0)).collect();
            let v = SkewVector::new(z, d).unwrap();
            let back = vector_from_skew(&skew_from_vector(&v)).unwrap();
            prop_assert_eq!(back, v);
        }
    }
}
