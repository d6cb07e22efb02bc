//! Statistical shape model over 5-point facial landmarks.
//!
//! Shapes are similarity-aligned (generalised Procrustes, then projected into
//! the tangent space of the mean) before PCA. The first coefficient of a
//! shape is its continuous pose code.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::archive::{decode_f64, encode_f64, Archive};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const NUM_LANDMARKS: usize = 5;
pub const SHAPE_DIM: usize = 2 * NUM_LANDMARKS;
/// Translation (2), rotation (1) and scale (1) are removed by alignment.
pub const MAX_COMPONENTS: usize = SHAPE_DIM - 4;
pub const MIN_FIT_SHAPES: usize = SHAPE_DIM + 1;
/// Flat index of the nose-tip x coordinate.
const NOSE_X: usize = 4;

type ShapeVec = [f64; SHAPE_DIM];

/// Left eye, right eye, nose tip, left mouth corner, right mouth corner,
/// in image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LandmarkShape {
    points: [[f64; 2]; NUM_LANDMARKS],
}

impl LandmarkShape {
    pub fn new(points: [[f64; 2]; NUM_LANDMARKS]) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Argument("landmark coordinates must be finite".into()));
        }
        Ok(LandmarkShape { points })
    }

    /// From `x1,y1,...,x5,y5`.
    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() != SHAPE_DIM {
            return Err(Error::dim(format!("landmark shape needs {SHAPE_DIM} values, got {}", values.len())));
        }
        let mut points = [[0.0; 2]; NUM_LANDMARKS];
        for (i, p) in points.iter_mut().enumerate() {
            *p = [values[2 * i], values[2 * i + 1]];
        }
        Self::new(points)
    }

    pub fn points(&self) -> &[[f64; 2]; NUM_LANDMARKS] {
        &self.points
    }

    pub fn to_flat(&self) -> ShapeVec {
        let mut v = [0.0; SHAPE_DIM];
        for (i, p) in self.points.iter().enumerate() {
            v[2 * i] = p[0];
            v[2 * i + 1] = p[1];
        }
        v
    }

    /// Applies `p -> scale * R(angle) * p + (tx, ty)`.
    pub fn transformed(&self, scale: f64, angle: f64, tx: f64, ty: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let mut points = self.points;
        for p in points.iter_mut() {
            let (x, y) = (p[0], p[1]);
            *p = [scale * (c * x - s * y) + tx, scale * (s * x + c * y) + ty];
        }
        LandmarkShape { points }
    }

    /// Mirror about the vertical line `x = axis`; left/right labels swap.
    pub fn mirrored(&self, axis: f64) -> Self {
        let m = |p: [f64; 2]| [2.0 * axis - p[0], p[1]];
        let p = self.points;
        LandmarkShape { points: [m(p[1]), m(p[0]), m(p[2]), m(p[4]), m(p[3])] }
    }
}

/// Scalar pose code; 0 is frontal.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct PoseCode(pub f64);

impl PoseCode {
    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeModel {
    /// Mean of the aligned training shapes.
    pub mean: ShapeVec,
    /// Unit-norm, centred Procrustes reference that shapes are aligned to.
    pub reference: ShapeVec,
    /// Orthonormal eigenvectors, ordered by decreasing eigenvalue.
    pub eigenvectors: Vec<ShapeVec>,
    pub eigenvalues: Vec<f64>,
    /// Multiplier applied to every projection coefficient.
    pub code_scale: f64,
    /// Whether the solver's first eigenvector was negated to satisfy the
    /// nose-moves-right convention.
    pub sign_flipped: bool,
}

fn centred(v: &ShapeVec) -> ShapeVec {
    let (mut mx, mut my) = (0.0, 0.0);
    for i in 0..NUM_LANDMARKS {
        mx += v[2 * i];
        my += v[2 * i + 1];
    }
    mx /= NUM_LANDMARKS as f64;
    my /= NUM_LANDMARKS as f64;
    let mut out = *v;
    for i in 0..NUM_LANDMARKS {
        out[2 * i] -= mx;
        out[2 * i + 1] -= my;
    }
    out
}

fn dot(a: &ShapeVec, b: &ShapeVec) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &ShapeVec) -> f64 {
    dot(a, a).sqrt()
}

fn scaled(a: &ShapeVec, s: f64) -> ShapeVec {
    a.map(|x| x * s)
}

/// Complex coefficients `(re, im)` of the least-squares similarity taking
/// centred `x` onto centred `target`.
fn similarity(x: &ShapeVec, target: &ShapeVec) -> Result<(f64, f64)> {
    let ss = dot(x, x);
    if ss < 1e-20 {
        return Err(Error::Alignment("shape has zero scale".into()));
    }
    let (mut re, mut im) = (0.0, 0.0);
    for i in 0..NUM_LANDMARKS {
        let (xr, xi) = (x[2 * i], x[2 * i + 1]);
        let (tr, ti) = (target[2 * i], target[2 * i + 1]);
        // conj(x) * t
        re += xr * tr + xi * ti;
        im += xr * ti - xi * tr;
    }
    Ok((re / ss, im / ss))
}

fn apply_similarity(x: &ShapeVec, (a, b): (f64, f64)) -> ShapeVec {
    let mut out = [0.0; SHAPE_DIM];
    for i in 0..NUM_LANDMARKS {
        let (xr, xi) = (x[2 * i], x[2 * i + 1]);
        out[2 * i] = a * xr - b * xi;
        out[2 * i + 1] = b * xr + a * xi;
    }
    out
}

/// Similarity-align onto a unit-norm `reference`, then scale into its
/// tangent space so that `aligned . reference == 1`.
fn align_to(shape: &ShapeVec, reference: &ShapeVec) -> Result<ShapeVec> {
    let x = centred(shape);
    let aligned = apply_similarity(&x, similarity(&x, reference)?);
    let proj = dot(&aligned, reference);
    if proj.abs() < 1e-12 {
        return Err(Error::Alignment("shape is orthogonal to the reference".into()));
    }
    Ok(scaled(&aligned, 1.0 / proj))
}

/// Rotation-only alignment of a unit-norm shape onto `target`.
fn rotate_onto(x: &ShapeVec, target: &ShapeVec) -> Result<ShapeVec> {
    let (a, b) = similarity(x, target)?;
    let m = (a * a + b * b).sqrt();
    if m < 1e-15 {
        return Ok(*x);
    }
    Ok(apply_similarity(x, (a / m, b / m)))
}

fn normalised(x: &ShapeVec) -> Result<ShapeVec> {
    let n = norm(x);
    if n < 1e-12 {
        return Err(Error::Fit("mean shape collapsed to a point".into()));
    }
    Ok(scaled(x, 1.0 / n))
}

impl ShapeModel {
    /// Generalised Procrustes alignment followed by PCA.
    pub fn fit(shapes: &[LandmarkShape]) -> Result<Self> {
        if shapes.len() < MIN_FIT_SHAPES {
            return Err(Error::Fit(format!(
                "need at least {MIN_FIT_SHAPES} shapes, got {}",
                shapes.len()
            )));
        }
        let raw: Vec<ShapeVec> = shapes.iter().map(|s| s.to_flat()).collect();
        if raw.iter().all(|s| s == &raw[0]) {
            return Err(Error::Fit("all shapes are identical (zero covariance)".into()));
        }

        // Upright starting reference: mean of centred, unit-scale shapes.
        let mut start = [0.0; SHAPE_DIM];
        for s in &raw {
            let c = centred(s);
            let n = norm(&c);
            if n < 1e-10 {
                return Err(Error::Alignment("training shape has zero scale".into()));
            }
            for (acc, v) in start.iter_mut().zip(c) {
                *acc += v / n;
            }
        }
        let start = match normalised(&start) {
            Ok(s) => s,
            Err(_) => normalised(&centred(&raw[0]))?,
        };

        let mut reference = start;
        for _ in 0..500 {
            let aligned: Vec<ShapeVec> = raw.iter().map(|s| align_to(s, &reference)).collect::<Result<_>>()?;
            let mean = mean_of(&aligned);
            let next = rotate_onto(&normalised(&centred(&mean))?, &start)?;
            let delta = norm(&std::array::from_fn(|i| next[i] - reference[i]));
            reference = next;
            if delta < 1e-15 {
                break;
            }
        }
        let aligned: Vec<ShapeVec> = raw.iter().map(|s| align_to(s, &reference)).collect::<Result<_>>()?;
        let mean = mean_of(&aligned);

        let n = aligned.len();
        let mut cov = DMatrix::<f64>::zeros(SHAPE_DIM, SHAPE_DIM);
        for s in &aligned {
            for i in 0..SHAPE_DIM {
                let di = s[i] - mean[i];
                for j in 0..SHAPE_DIM {
                    cov[(i, j)] += di * (s[j] - mean[j]);
                }
            }
        }
        cov /= (n - 1) as f64;
        let cov = (&cov + cov.transpose()) * 0.5;
        let eig = SymmetricEigen::new(cov);

        let mut order: Vec<usize> = (0..SHAPE_DIM).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap().then(a.cmp(&b))
        });
        let mut eigenvectors = Vec::with_capacity(MAX_COMPONENTS);
        let mut eigenvalues = Vec::with_capacity(MAX_COMPONENTS);
        let mut sign_flipped = false;
        for (rank, &k) in order.iter().take(MAX_COMPONENTS).enumerate() {
            let mut v: ShapeVec = std::array::from_fn(|i| eig.eigenvectors[(i, k)]);
            let flip = if rank == 0 && v[NOSE_X].abs() > 1e-12 {
                v[NOSE_X] < 0.0
            } else {
                let pivot = (0..SHAPE_DIM)
                    .max_by(|&a, &b| v[a].abs().partial_cmp(&v[b].abs()).unwrap().then(b.cmp(&a)))
                    .unwrap();
                v[pivot] < 0.0
            };
            if flip {
                v = scaled(&v, -1.0);
            }
            if rank == 0 {
                sign_flipped = flip;
            }
            eigenvectors.push(v);
            eigenvalues.push(eig.eigenvalues[k].max(0.0));
        }

        Ok(ShapeModel { mean, reference, eigenvectors, eigenvalues, code_scale: 1.0, sign_flipped })
    }

    pub fn num_components(&self) -> usize {
        self.eigenvectors.len()
    }

    /// Shape in the model's aligned frame.
    pub fn align(&self, shape: &LandmarkShape) -> Result<ShapeVec> {
        align_to(&shape.to_flat(), &self.reference)
    }

    /// All projection coefficients, scaled by `code_scale`.
    pub fn coefficients(&self, shape: &LandmarkShape) -> Result<Vec<f64>> {
        let a = self.align(shape)?;
        let d: ShapeVec = std::array::from_fn(|i| a[i] - self.mean[i]);
        Ok(self.eigenvectors.iter().map(|e| self.code_scale * dot(&d, e)).collect())
    }

    pub fn pose_code(&self, shape: &LandmarkShape) -> Result<PoseCode> {
        let a = self.align(shape)?;
        let d: ShapeVec = std::array::from_fn(|i| a[i] - self.mean[i]);
        Ok(PoseCode(self.code_scale * dot(&d, &self.eigenvectors[0])))
    }

    /// `mean + sum_i c_i e_i` in the aligned frame.
    pub fn reconstruct(&self, coefficients: &[f64]) -> Result<LandmarkShape> {
        if coefficients.len() > self.eigenvectors.len() {
            return Err(Error::dim(format!(
                "{} coefficients for a model with {} components",
                coefficients.len(),
                self.eigenvectors.len()
            )));
        }
        let mut s = self.mean;
        for (c, e) in coefficients.iter().zip(&self.eigenvectors) {
            for (v, ev) in s.iter_mut().zip(e) {
                *v += c / self.code_scale * ev;
            }
        }
        LandmarkShape::from_flat(&s)
    }

    /// Rescales codes so that the largest `|pose code|` over `shapes` equals
    /// `extent`.
    pub fn calibrate_extent(&mut self, shapes: &[LandmarkShape], extent: f64) -> Result<()> {
        if !(extent > 0.0) {
            return Err(Error::Argument(format!("code extent must be positive, got {extent}")));
        }
        self.code_scale = 1.0;
        let mut max = 0.0f64;
        for s in shapes {
            max = max.max(self.pose_code(s)?.0.abs());
        }
        if max < 1e-12 {
            return Err(Error::Fit("pose codes have no spread to calibrate against".into()));
        }
        self.code_scale = extent / max;
        Ok(())
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        let f = |v: &[f64]| Tensor::new(&[v.len() * 4], encode_f64(v)).unwrap();
        a.push("shape/mean", f(&self.mean));
        a.push("shape/reference", f(&self.reference));
        let flat: Vec<f64> = self.eigenvectors.iter().flatten().copied().collect();
        a.push("shape/eigenvectors", f(&flat));
        a.push("shape/eigenvalues", f(&self.eigenvalues));
        a.push("shape/code_scale", f(&[self.code_scale]));
        a.push("shape/sign_flipped", Tensor::scalar(if self.sign_flipped { 1.0 } else { 0.0 }));
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let get = |name: &str| decode_f64(a.get(name)?.data());
        let arr = |v: Vec<f64>, name: &str| -> Result<ShapeVec> {
            v.try_into().map_err(|_| Error::Checkpoint(format!("{name} must have {SHAPE_DIM} values")))
        };
        let mean = arr(get("shape/mean")?, "shape/mean")?;
        let reference = arr(get("shape/reference")?, "shape/reference")?;
        let flat = get("shape/eigenvectors")?;
        let eigenvalues = get("shape/eigenvalues")?;
        if flat.len() != eigenvalues.len() * SHAPE_DIM || eigenvalues.is_empty() {
            return Err(Error::Checkpoint("eigenvector/eigenvalue count mismatch".into()));
        }
        let eigenvectors = flat.chunks(SHAPE_DIM).map(|c| c.try_into().unwrap()).collect();
        let code_scale = *get("shape/code_scale")?.first().ok_or_else(|| Error::Checkpoint("empty code scale".into()))?;
        let sign_flipped = a.get("shape/sign_flipped")?.item() != 0.0;
        Ok(ShapeModel { mean, reference, eigenvectors, eigenvalues, code_scale, sign_flipped })
    }
}

fn mean_of(shapes: &[ShapeVec]) -> ShapeVec {
    let mut m = [0.0; SHAPE_DIM];
    for s in shapes {
        for (acc, v) in m.iter_mut().zip(s) {
            *acc += v;
        }
    }
    scaled(&m, 1.0 / shapes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn base() -> LandmarkShape {
        LandmarkShape::new([[12.0, 14.0], [24.0, 14.0], [18.0, 20.0], [13.5, 26.0], [22.5, 26.0]]).unwrap()
    }

    /// Shapes varying along `direction` (plus small noise), placed under random similarities.
    fn one_factor_family(direction: &ShapeVec, n: usize, seed: u64) -> Vec<LandmarkShape> {
        let mut rng = RngStream::new(seed);
        let b = base().to_flat();
        (0..n)
            .map(|_| {
                let t = rng.uniform(-2.0, 2.0);
                let v: Vec<f64> = (0..SHAPE_DIM).map(|i| b[i] + t * direction[i] + 1e-3 * rng.normal()).collect();
                LandmarkShape::from_flat(&v).unwrap().transformed(
                    rng.uniform(0.7, 1.4),
                    rng.uniform(-0.3, 0.3),
                    rng.uniform(-5.0, 5.0),
                    rng.uniform(-5.0, 5.0),
                )
            })
            .collect()
    }

    /// Nose moves right while everything else is fixed.
    fn nose_direction() -> ShapeVec {
        let mut d = [0.0; SHAPE_DIM];
        d[NOSE_X] = 1.0;
        d
    }

    #[test]
    fn too_few_or_identical_shapes_fail() {
        assert!(matches!(ShapeModel::fit(&vec![base(); 5]), Err(Error::Fit(_))));
        assert!(matches!(ShapeModel::fit(&vec![base(); 20]), Err(Error::Fit(_))));
    }

    #[test]
    fn similarity_family_has_no_shape_variance() {
        let mut rng = RngStream::new(8);
        let shapes: Vec<_> = (0..30)
            .map(|_| {
                base().transformed(rng.uniform(0.5, 2.0), rng.uniform(-1.0, 1.0), rng.uniform(-9.0, 9.0), rng.normal())
            })
            .collect();
        let m = ShapeModel::fit(&shapes).unwrap();
        assert!(m.eigenvalues.iter().all(|&l| l < 1e-10), "{:?}", m.eigenvalues);
    }

    #[test]
    fn first_eigenvector_follows_the_varying_direction() {
        let shapes = one_factor_family(&nose_direction(), 60, 3);
        let m = ShapeModel::fit(&shapes).unwrap();
        // express the generating direction in the aligned frame
        let lo = m.align(&LandmarkShape::from_flat(&base().to_flat()).unwrap()).unwrap();
        let mut shifted = base().to_flat();
        shifted[NOSE_X] += 0.05;
        let hi = m.align(&LandmarkShape::from_flat(&shifted).unwrap()).unwrap();
        let d: ShapeVec = std::array::from_fn(|i| hi[i] - lo[i]);
        let cos = dot(&d, &m.eigenvectors[0]) / norm(&d);
        assert!(cos.abs() > 0.999, "cosine {cos}");
        // sign convention: moving the nose right raises the code
        assert!(cos > 0.0);
        assert!(m.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn eigenvectors_are_orthonormal_and_mean_is_centre_of_aligned_set() {
        let shapes = one_factor_family(&nose_direction(), 40, 9);
        let m = ShapeModel::fit(&shapes).unwrap();
        for (i, a) in m.eigenvectors.iter().enumerate() {
            for (j, b) in m.eigenvectors.iter().enumerate() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot(a, b) - expect).abs() < 1e-8);
            }
        }
        let aligned: Vec<ShapeVec> = shapes.iter().map(|s| m.align(s).unwrap()).collect();
        let mean = mean_of(&aligned);
        for (a, b) in mean.iter().zip(&m.mean) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn mean_shape_has_zero_code() {
        let shapes = one_factor_family(&nose_direction(), 40, 10);
        let m = ShapeModel::fit(&shapes).unwrap();
        let mean_shape = LandmarkShape::from_flat(&m.mean).unwrap();
        assert!(m.pose_code(&mean_shape).unwrap().0.abs() < 1e-8);
    }

    #[test]
    fn reconstruct_rules() {
        let shapes = one_factor_family(&nose_direction(), 40, 12);
        let mut m = ShapeModel::fit(&shapes).unwrap();
        m.code_scale = 3.0;
        assert_eq!(m.reconstruct(&[]).unwrap().to_flat(), m.mean);
        assert!(m.reconstruct(&[0.0; MAX_COMPONENTS + 1]).is_err());

        let a = [0.4, -0.2, 0.1];
        let b = [-0.1, 0.3, 0.05];
        let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let ra = m.reconstruct(&a).unwrap().to_flat();
        let rb = m.reconstruct(&b).unwrap().to_flat();
        let rab = m.reconstruct(&ab).unwrap().to_flat();
        for i in 0..SHAPE_DIM {
            assert!((rab[i] - (ra[i] + rb[i] - m.mean[i])).abs() < 1e-12);
        }

        // full-basis round trip on a training shape
        let c = m.coefficients(&shapes[7]).unwrap();
        let back = m.reconstruct(&c).unwrap().to_flat();
        let aligned = m.align(&shapes[7]).unwrap();
        for i in 0..SHAPE_DIM {
            assert!((back[i] - aligned[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn archive_round_trip_is_exact() {
        let shapes = one_factor_family(&nose_direction(), 30, 13);
        let mut m = ShapeModel::fit(&shapes).unwrap();
        m.calibrate_extent(&shapes, 17.0).unwrap();
        let back = ShapeModel::from_archive(&Archive::from_bytes(&m.to_archive().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, m);
        let max = shapes.iter().map(|s| m.pose_code(s).unwrap().0.abs()).fold(0.0, f64::max);
        assert!((max - 17.0).abs() < 1e-9);
    }

    proptest::proptest! {
        #[test]
        fn pose_code_ignores_similarity_transforms(
            seed in 0u64..1000,
            scale in 0.2f64..5.0,
            angle in -3.1f64..3.1,
            tx in -50.0f64..50.0,
            ty in -50.0f64..50.0,
        ) {
            let shapes = one_factor_family(&nose_direction(), 30, 20);
            let m = ShapeModel::fit(&shapes).unwrap();
            let s = &one_factor_family(&nose_direction(), 1, seed)[0];
            let a = m.coefficients(s).unwrap();
            let b = m.coefficients(&s.transformed(scale, angle, tx, ty)).unwrap();
            for (x, y) in a.iter().zip(&b) {
                proptest::prop_assert!((x - y).abs() < 1e-6, "{x} vs {y}");
            }
        }

        #[test]
        fn full_basis_round_trip(seed in 0u64..1000) {
            let shapes = one_factor_family(&nose_direction(), 30, 21);
            let m = ShapeModel::fit(&shapes).unwrap();
            let mut rng = RngStream::new(seed);
            let v: Vec<f64> = base().to_flat().iter().map(|x| x + rng.normal()).collect();
            let s = LandmarkShape::from_flat(&v).unwrap();
            let back = m.reconstruct(&m.coefficients(&s).unwrap()).unwrap().to_flat();
            let aligned = m.align(&s).unwrap();
            for i in 0..SHAPE_DIM {
                proptest::prop_assert!((back[i] - aligned[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn degenerate_shape_is_an_alignment_error() {
        let shapes = one_factor_family(&nose_direction(), 30, 14);
        let m = ShapeModel::fit(&shapes).unwrap();
        let point = LandmarkShape::new([[3.0, 3.0]; 5]).unwrap();
        assert!(matches!(m.pose_code(&point), Err(Error::Alignment(_))));
    }
}
