//! Scalar and small-matrix probability kernels: standard-normal CDF, PDF and
//! quantile, the multivariate normal log-density, softmax and logistic helpers,
//! plus the compensated summation used by every likelihood reduction.

use nalgebra::DMatrix;
use libm::erfc;

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Smallest probability a log term is allowed to take before it is floored.
pub const PROB_FLOOR: f64 = 1e-300;

/// Standard normal CDF, Φ(x).
#[inline]
pub fn std_normal_cdf(x: f64) -> f64 {
    if x == f64::INFINITY {
        return 1.0;
    }
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    0.5 * erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Standard normal density, φ(x). Zero at ±∞.
#[inline]
pub fn std_normal_pdf(x: f64) -> f64 {
    if x.is_infinite() {
        return 0.0;
    }
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Probability mass Φ(upper) − Φ(lower) for lower ≤ upper, computed on the
/// tail that avoids cancellation when both bounds are far into the right tail.
#[inline]
pub fn std_normal_interval(lower: f64, upper: f64) -> f64 {
    if lower > 0.0 {
        std_normal_cdf(-lower) - std_normal_cdf(-upper)
    } else {
        std_normal_cdf(upper) - std_normal_cdf(lower)
    }
}

// Acklam's rational approximation, refined by one Halley step.
const A: [f64; 6] = [
    -3.969_683_028_665_376e1,
    2.209_460_984_245_205e2,
    -2.759_285_104_469_687e2,
    1.383_577_518_672_69e2,
    -3.066_479_806_614_716e1,
    2.506_628_277_459_239,
];
const B: [f64; 5] = [
    -5.447_609_879_822_406e1,
    1.615_858_368_580_409e2,
    -1.556_989_798_598_866e2,
    6.680_131_188_771_972e1,
    -1.328_068_155_288_572e1,
];
const C: [f64; 6] = [
    -7.784_894_002_430_293e-3,
    -3.223_964_580_411_365e-1,
    -2.400_758_277_161_838,
    -2.549_732_539_343_734,
    4.374_664_141_464_968,
    2.938_163_982_698_783,
];
const D: [f64; 4] = [
    7.784_695_709_041_462e-3,
    3.224_671_290_700_398e-1,
    2.445_134_137_142_996,
    3.754_408_661_907_416,
];

/// Standard normal quantile, Φ⁻¹(p) for p in the open unit interval.
pub fn std_normal_inv_cdf(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "normal quantile requires p in (0, 1), got {p}"
        )));
    }
    Ok(inv_cdf_unchecked(p))
}

pub(crate) fn inv_cdf_unchecked(p: f64) -> f64 {
    const P_LOW: f64 = 0.024_25;
    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    // Work on the smaller tail so the residual keeps its relative precision.
    let e = if x > 0.0 {
        (1.0 - p) - std_normal_cdf(-x)
    } else {
        std_normal_cdf(x) - p
    };
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// A symmetric positive-definite covariance matrix with its lower Cholesky
/// factor. Diagonal matrices keep the flag so callers can take the cheap path.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariance {
    matrix: DMatrix<f64>,
    chol: DMatrix<f64>,
    diagonal: bool,
}

impl Covariance {
    pub fn identity(dim: usize) -> Self {
        Covariance {
            matrix: DMatrix::identity(dim, dim),
            chol: DMatrix::identity(dim, dim),
            diagonal: true,
        }
    }

    pub fn diagonal(variances: &[f64]) -> Result<Self> {
        if let Some(v) = variances.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::NotPositiveDefinite(format!(
                "diagonal variance {v} must be positive and finite"
            )));
        }
        let g = variances.len();
        let matrix = DMatrix::from_fn(g, g, |i, j| if i == j { variances[i] } else { 0.0 });
        let chol = DMatrix::from_fn(g, g, |i, j| if i == j { variances[i].sqrt() } else { 0.0 });
        Ok(Covariance {
            matrix,
            chol,
            diagonal: true,
        })
    }

    pub fn full(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::NotPositiveDefinite("matrix is not square".into()));
        }
        let g = matrix.nrows();
        for i in 0..g {
            for j in 0..i {
                if (matrix[(i, j)] - matrix[(j, i)]).abs() > 1e-12 {
                    return Err(Error::NotPositiveDefinite(format!(
                        "asymmetric entries ({i},{j}): {} vs {}",
                        matrix[(i, j)],
                        matrix[(j, i)]
                    )));
                }
            }
        }
        let chol = nalgebra::Cholesky::new(matrix.clone())
            .ok_or_else(|| Error::NotPositiveDefinite("Cholesky factorization failed".into()))?
            .l();
        Ok(Covariance {
            matrix,
            chol,
            diagonal: false,
        })
    }

    /// Builds Ψ = L·Lᵀ from a lower-triangular factor with a positive diagonal.
    pub fn from_cholesky(lower: DMatrix<f64>) -> Result<Self> {
        let g = lower.nrows();
        if lower.ncols() != g {
            return Err(Error::NotPositiveDefinite("factor is not square".into()));
        }
        for i in 0..g {
            if !(lower[(i, i)] > 0.0) {
                return Err(Error::NotPositiveDefinite(format!(
                    "factor diagonal {} at {i} must be positive",
                    lower[(i, i)]
                )));
            }
        }
        let lower = lower.lower_triangle();
        let matrix = &lower * lower.transpose();
        Ok(Covariance {
            matrix,
            chol: lower,
            diagonal: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_diagonal(&self) -> bool {
        self.diagonal
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn cholesky(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn variance(&self, g: usize) -> f64 {
        self.matrix[(g, g)]
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim()).map(|i| self.chol[(i, i)].ln()).sum::<f64>()
    }

    /// (x−μ)ᵀΨ⁻¹(x−μ) by forward substitution on the Cholesky factor.
    pub fn mahalanobis(&self, diff: &[f64]) -> f64 {
        let g = self.dim();
        let mut y = vec![0.0; g];
        for i in 0..g {
            let mut s = diff[i];
            for (j, yj) in y.iter().enumerate().take(i) {
                s -= self.chol[(i, j)] * yj;
            }
            y[i] = s / self.chol[(i, i)];
        }
        y.iter().map(|v| v * v).sum()
    }
}

/// Multivariate normal log-density.
pub fn mvn_logpdf(x: &[f64], mean: &[f64], cov: &Covariance) -> Result<f64> {
    let g = cov.dim();
    if x.len() != g {
        return Err(Error::dimension("mvn point", g, x.len()));
    }
    if mean.len() != g {
        return Err(Error::dimension("mvn mean", g, mean.len()));
    }
    let diff: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    Ok(-0.5 * g as f64 * LN_2PI - 0.5 * cov.log_det() - 0.5 * cov.mahalanobis(&diff))
}

/// ln Σ exp(v), −∞ for an empty slice.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    if max == f64::INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(v);
    v.iter().map(|x| x - lse).collect()
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln σ(x) without overflow in either tail.
#[inline]
pub fn log_logistic(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Neumaier-compensated running sum. Summation order is the caller's order, so
/// results are reproducible whenever inputs arrive in a fixed sequence.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut acc = CompensatedSum::new();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn cdf_reference_values() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
        assert_abs_diff_eq!(std_normal_cdf(1.96), 0.975_002_1, epsilon = 1e-7);
        assert_abs_diff_eq!(std_normal_cdf(-1.96), 0.024_997_9, epsilon = 1e-7);
    }

    #[test]
    fn quantile_reference_values() {
        assert_eq!(std_normal_inv_cdf(0.5).unwrap(), 0.0);
        assert_abs_diff_eq!(std_normal_inv_cdf(0.975).unwrap(), 1.959_964, epsilon = 1e-6);
        assert_abs_diff_eq!(std_normal_inv_cdf(0.024_997_9).unwrap(), -1.96, epsilon = 1e-5);
        assert!(std_normal_inv_cdf(0.0).is_err());
        assert!(std_normal_inv_cdf(1.0).is_err());
        assert!(std_normal_inv_cdf(f64::NAN).is_err());
    }

    #[test]
    fn quantile_round_trips_through_cdf() {
        let mut p = 1e-12;
        while p < 1.0 - 1e-12 {
            let x = std_normal_inv_cdf(p).unwrap();
            assert!((std_normal_cdf(x) - p).abs() <= 1e-9 * p.max(1e-3), "p={p}");
            p *= 1.37;
            if p > 0.5 {
                p = 1.0 - (1.0 - p) / 1.9;
                if 1.0 - p < 1e-12 {
                    break;
                }
            }
        }
        for i in 1..1000 {
            let p = i as f64 / 1000.0;
            let x = std_normal_inv_cdf(p).unwrap();
            assert!((std_normal_cdf(x) - p).abs() <= 1e-12, "p={p}");
        }
    }

    #[test]
    fn mvn_examples() {
        let i1 = Covariance::identity(1);
        assert_abs_diff_eq!(
            mvn_logpdf(&[0.0], &[0.0], &i1).unwrap(),
            0.398_942_28_f64.ln(),
            epsilon = 1e-8
        );
        let i2 = Covariance::identity(2);
        assert_abs_diff_eq!(
            mvn_logpdf(&[0.0, 0.0], &[0.0, 0.0], &i2).unwrap(),
            -1.837_877_1,
            epsilon = 1e-7
        );
        let d = Covariance::diagonal(&[4.0, 1.0]).unwrap();
        let expected = -0.918_938_533_2 - 0.5 * 4f64.ln() - 0.125 - 0.918_938_533_2;
        assert_abs_diff_eq!(
            mvn_logpdf(&[1.0, 0.0], &[0.0, 0.0], &d).unwrap(),
            expected,
            epsilon = 1e-9
        );
        assert_abs_diff_eq!(expected, -2.656, epsilon = 1e-3);
    }

    #[test]
    fn full_covariance_matches_diagonal_when_diagonal() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]);
        let full = Covariance::full(m).unwrap();
        let diag = Covariance::diagonal(&[4.0, 1.0]).unwrap();
        let x = [0.3, -1.2];
        assert_abs_diff_eq!(
            mvn_logpdf(&x, &[0.0, 0.0], &full).unwrap(),
            mvn_logpdf(&x, &[0.0, 0.0], &diag).unwrap(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn non_pd_covariance_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(Covariance::full(m).is_err());
        assert!(Covariance::diagonal(&[1.0, 0.0]).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.2, 1.0]);
        assert!(Covariance::full(asym).is_err());
    }

    #[test]
    fn mvn_dimension_mismatch() {
        let c = Covariance::identity(2);
        assert!(mvn_logpdf(&[0.0], &[0.0, 0.0], &c).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let p = softmax(&[1.0, 0.0]);
        assert_abs_diff_eq!(p[0], 0.731_058_6, epsilon = 1e-7);
        assert_abs_diff_eq!(p[1], 0.268_941_4, epsilon = 1e-7);
        let p = softmax(&[1000.0, 0.0]);
        assert_eq!(p[0], 1.0);
        assert_eq!(p[1], 0.0);
    }

    #[test]
    fn interval_is_stable_in_right_tail() {
        let p = std_normal_interval(8.0, 9.0);
        assert!(p > 0.0);
        // Φ(-8) - Φ(-9) from tabulated tail values
        let expected = 6.220_960_574_271_785e-16 - 1.128_588_405_953_841e-19;
        assert!((p - expected).abs() <= 1e-9 * expected);
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let values = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(values), 2.0);
    }

    proptest! {
        #[test]
        fn cdf_symmetry(x in -40.0f64..40.0) {
            prop_assert!((std_normal_cdf(x) + std_normal_cdf(-x) - 1.0).abs() <= 1e-15);
        }

        #[test]
        fn softmax_shift_invariance(v in prop::collection::vec(-50.0f64..50.0, 1..8), c in -100.0f64..100.0) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let a = softmax(&v);
            let b = softmax(&shifted);
            let argmax = |p: &[f64]| p.iter().enumerate().fold(0, |best, (i, x)| if *x > p[best] { i } else { best });
            prop_assert_eq!(argmax(&v), argmax(&shifted));
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn log_logistic_matches_direct(x in -30.0f64..30.0) {
            prop_assert!((log_logistic(x) - logistic(x).ln()).abs() <= 1e-12);
        }
    }
}
