use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};

/// Name of the feature function recorded in every report.
pub const PCA_FEATURES: &str = "pca64-pixels";
pub const DEFAULT_FEATURE_DIM: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct FidStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub count: usize,
}

impl FidStats {
    /// Sample mean and unbiased covariance of a feature set.
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::Argument(format!("fid needs at least 2 samples, got {n}")));
        }
        let d = features[0].len();
        if d == 0 || features.iter().any(|f| f.len() != d) {
            return Err(Error::dim("feature vectors must share a nonzero length"));
        }
        let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
        let mut centred = x;
        for mut row in centred.row_iter_mut() {
            row -= mean.transpose();
        }
        let mut covariance = centred.transpose() * &centred / (n - 1) as f64;
        symmetrize(&mut covariance);
        Ok(FidStats { mean, covariance, count: n })
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

fn eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    SymmetricEigen::try_new(m, 1e-14, 10_000).ok_or_else(|| Error::numeric("eigendecomposition did not converge"))
}

/// Clamps eigenvalues in `(-1e-6 * scale, 0)` to zero; anything more negative
/// means the input was not positive semi-definite.
fn clamp_psd(values: &mut DVector<f64>) -> Result<()> {
    let scale = values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for v in values.iter_mut() {
        if *v < -1e-6 * scale {
            return Err(Error::numeric(format!("matrix square root of an indefinite matrix (eigenvalue {v})")));
        }
        *v = v.max(0.0);
    }
    Ok(())
}

fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut e = eigen(m.clone())?;
    clamp_psd(&mut e.eigenvalues)?;
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(f64::sqrt));
    Ok(&e.eigenvectors * d * e.eigenvectors.transpose())
}

/// `Tr((A B)^{1/2})` through the symmetric product `A^{1/2} B A^{1/2}`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let s = sqrt_psd(a)?;
    let mut m = &s * b * &s;
    symmetrize(&mut m);
    let mut e = eigen(m)?;
    clamp_psd(&mut e.eigenvalues)?;
    Ok(e.eigenvalues.iter().map(|v| v.sqrt()).sum())
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})`.
pub fn frechet_distance(a: &FidStats, b: &FidStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::dim(format!("feature dimensions {} and {} differ", a.mean.len(), b.mean.len())));
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let cross = trace_sqrt_product(&a.covariance, &b.covariance)?;
    let d = mean_term + a.covariance.trace() + b.covariance.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Principal axes of raw pixel vectors, fitted on one sample set.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelPca {
    pub mean: DVector<f64>,
    /// `[k, D]`, one unit axis per row, by decreasing variance.
    pub axes: DMatrix<f64>,
}

impl PixelPca {
    pub fn fit(samples: &[Vec<f64>], k: usize) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::Argument("pca needs at least 2 samples".into()));
        }
        let d = samples[0].len();
        if samples.iter().any(|s| s.len() != d) {
            return Err(Error::dim("pca samples differ in length"));
        }
        let x = DMatrix::from_fn(n, d, |i, j| samples[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
        let mut centred = x;
        for mut row in centred.row_iter_mut() {
            row -= mean.transpose();
        }
        // Axes from whichever of X^T X and X X^T is smaller.
        let (values, vectors) = if n < d {
            let e = eigen(&centred * centred.transpose())?;
            let mut axes = centred.transpose() * &e.eigenvectors;
            for (mut col, &v) in axes.column_iter_mut().zip(e.eigenvalues.iter()) {
                let norm = col.norm();
                if v > 0.0 && norm > 0.0 {
                    col /= norm;
                } else {
                    col.fill(0.0);
                }
            }
            (e.eigenvalues, axes)
        } else {
            let e = eigen(centred.transpose() * &centred)?;
            (e.eigenvalues, e.eigenvectors)
        };
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
        let top = values[order[0]].max(0.0);
        let rank = order.iter().take_while(|&&i| values[i] > 1e-12 * top).count();
        let k = k.min(rank).max(1);
        let mut axes = DMatrix::zeros(k, d);
        for (r, &c) in order[..k].iter().enumerate() {
            let mut v = vectors.column(c).clone_owned();
            // sign: largest-magnitude entry positive
            let imax = v.iamax();
            if v[imax] < 0.0 {
                v = -v;
            }
            axes.set_row(r, &v.transpose());
        }
        Ok(PixelPca { mean, axes })
    }

    pub fn dim(&self) -> usize {
        self.axes.nrows()
    }

    pub fn project(&self, sample: &[f64]) -> Result<Vec<f64>> {
        if sample.len() != self.mean.len() {
            return Err(Error::dim(format!("pca expects {} values, got {}", self.mean.len(), sample.len())));
        }
        let x = DVector::from_column_slice(sample) - &self.mean;
        Ok((&self.axes * x).iter().copied().collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FidReport {
    pub fid: f64,
    pub feature_function: String,
    pub feature_dim: usize,
    pub real_count: usize,
    pub generated_count: usize,
    pub warnings: Vec<String>,
}

/// FID between two image sets (flattened pixel vectors) under a PCA
/// projection fitted on `real`.
pub fn fid(real: &[Vec<f64>], generated: &[Vec<f64>], feature_dim: usize) -> Result<FidReport> {
    if real.len() < 2 || generated.len() < 2 {
        return Err(Error::Argument("fid needs at least 2 samples per side".into()));
    }
    let pca = PixelPca::fit(real, feature_dim)?;
    let fr: Vec<Vec<f64>> = real.iter().map(|s| pca.project(s)).collect::<Result<_>>()?;
    let fg: Vec<Vec<f64>> = generated.iter().map(|s| pca.project(s)).collect::<Result<_>>()?;
    let mut warnings = vec![format!(
        "features are a {}-d PCA projection of raw pixels, not Inception activations; values are not comparable to published FID",
        pca.dim()
    )];
    if pca.dim() < feature_dim {
        warnings.push(format!("real set supports only {} of {feature_dim} requested feature dimensions", pca.dim()));
    }
    for (side, n) in [("real", real.len()), ("generated", generated.len())] {
        if n < pca.dim() {
            warnings.push(format!("{side} set has {n} samples for {} feature dimensions", pca.dim()));
        }
    }
    let value = frechet_distance(&FidStats::from_features(&fr)?, &FidStats::from_features(&fg)?)?;
    Ok(FidReport {
        fid: value,
        feature_function: PCA_FEATURES.into(),
        feature_dim: pca.dim(),
        real_count: real.len(),
        generated_count: generated.len(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use proptest::prelude::*;

    fn gaussian(rng: &mut RngStream, n: usize, mu: f64, sigma: f64) -> Vec<Vec<f64>> {
        (0..n).map(|_| vec![mu + sigma * rng.normal()]).collect()
    }

    #[test]
    fn one_dimensional_closed_form() {
        let mut rng = RngStream::new(11);
        let a = gaussian(&mut rng, 100_000, 0.5, 1.0);
        let b = gaussian(&mut rng, 100_000, -0.7, 2.0);
        let want = (0.5f64 + 0.7).powi(2) + (1.0f64 - 2.0).powi(2);
        let got = frechet_distance(&FidStats::from_features(&a).unwrap(), &FidStats::from_features(&b).unwrap()).unwrap();
        assert!((got - want).abs() < 0.05 * want, "{got} vs {want}");
    }

    #[test]
    fn identical_sets_score_zero() {
        let mut rng = RngStream::new(12);
        let a: Vec<Vec<f64>> = (0..200).map(|_| (0..300).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect();
        let r = fid(&a, &a, DEFAULT_FEATURE_DIM).unwrap();
        assert!(r.fid < 1e-6, "{}", r.fid);
        assert_eq!(r.feature_dim, 64);
        assert_eq!(r.feature_function, PCA_FEATURES);
    }

    #[test]
    fn pca_axes_are_orthonormal_both_ways() {
        let mut rng = RngStream::new(13);
        for (n, d) in [(20, 50), (80, 10)] {
            let a: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
            let p = PixelPca::fit(&a, 8).unwrap();
            let g = &p.axes * p.axes.transpose();
            assert!((g - DMatrix::identity(8, 8)).amax() < 1e-9);
        }
    }

    #[test]
    fn small_sets_carry_a_warning() {
        let mut rng = RngStream::new(14);
        let a: Vec<Vec<f64>> = (0..10).map(|_| (0..100).map(|_| rng.normal()).collect()).collect();
        let r = fid(&a, &a[..3], 64).unwrap();
        assert_eq!(r.feature_dim, 9);
        assert_eq!(r.warnings.len(), 3);
        assert!(fid(&a[..1], &a, 64).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn symmetric_and_self_zero(seed in 0u64..1000, shift in -2.0f64..2.0) {
            let mut rng = RngStream::new(seed);
            let a: Vec<Vec<f64>> = (0..40).map(|_| (0..5).map(|_| rng.normal()).collect()).collect();
            let b: Vec<Vec<f64>> =
                (0..30).map(|_| (0..5).map(|j| shift + (1.0 + j as f64) * rng.normal()).collect()).collect();
            let sa = FidStats::from_features(&a).unwrap();
            let sb = FidStats::from_features(&b).unwrap();
            prop_assert!(frechet_distance(&sa, &sa).unwrap() < 1e-6);
            let ab = frechet_distance(&sa, &sb).unwrap();
            let ba = frechet_distance(&sb, &sa).unwrap();
            prop_assert!((ab - ba).abs() < 1e-6, "{} {}", ab, ba);
            prop_assert!((&sa.covariance - sa.covariance.transpose()).amax() < 1e-8);
        }
    }
}
