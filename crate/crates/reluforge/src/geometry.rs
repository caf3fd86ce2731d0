//! Hyperplanes, hyperrectangles, affine maps, and the companion-bundle
//! construction that the compilers build on.
//!
//! A hyperplane `{normal, offset}` evaluates to `normal·x + offset`; the
//! positive side is where a ReLU wired with those coefficients fires. A
//! companion bundle is a set of `n` pairwise non-parallel hyperplanes that
//! classify a given finite point set identically, so their stacked normals
//! form an invertible matrix and the bundle's ReLU layer transmits the
//! all-positive region as an exact affine image.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default absolute tolerance for "point is on a hyperplane" rejection.
pub const DEFAULT_TOL: f64 = 1e-9;

/// Relative floor under which a stacked-normal matrix counts as singular:
/// |det| must exceed `SINGULAR_REL_FLOOR` times the product of row norms.
pub const SINGULAR_REL_FLOOR: f64 = 1e-9;

/// Smallest admissible normal component magnitude.
pub const ZERO_NORMAL_FLOOR: f64 = 1e-12;

/// Which side of a hyperplane a point falls on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// `normal·x + offset > tol`: the ReLU fires.
    Positive,
    /// `normal·x + offset < -tol`: the ReLU is clamped to zero.
    ZeroSide,
}

/// Oriented linear separator `normal·x + offset = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperplane {
    pub normal: Vec<f64>,
    pub offset: f64,
}

impl Hyperplane {
    pub fn new(normal: Vec<f64>, offset: f64) -> Self {
        Self { normal, offset }
    }

    pub fn dim(&self) -> usize {
        self.normal.len()
    }

    /// `normal·x + offset`, accumulated left to right.
    pub fn eval(&self, x: &[f64]) -> f64 {
        dot(&self.normal, x) + self.offset
    }

    pub fn norm(&self) -> f64 {
        dot(&self.normal, &self.normal).sqrt()
    }

    /// Normalized distance from `x` to the hyperplane.
    pub fn distance(&self, x: &[f64]) -> f64 {
        self.eval(x).abs() / self.norm()
    }

    pub fn validate(&self) -> Result<()> {
        if self.normal.iter().any(|c| c.abs() > ZERO_NORMAL_FLOOR) {
            Ok(())
        } else {
            Err(Error::ZeroNormal(ZERO_NORMAL_FLOOR))
        }
    }

    pub fn negated(&self) -> Self {
        Self {
            normal: self.normal.iter().map(|c| -c).collect(),
            offset: -self.offset,
        }
    }

    /// Side of the hyperplane `x` falls on. Points within `tol` of the
    /// plane are rejected rather than assigned a side.
    pub fn side(&self, x: &[f64], tol: f64) -> Result<Side> {
        assert!(tol > 0.0, "tolerance must be positive");
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let v = self.eval(x);
        if v > tol {
            Ok(Side::Positive)
        } else if v < -tol {
            Ok(Side::ZeroSide)
        } else {
            Err(Error::OnHyperplane { value: v, tol })
        }
    }
}

/// Axis-aligned box with nonempty interior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperrectangle {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Hyperrectangle {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let r = Self { lower, upper };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() {
            return Err(Error::DimensionMismatch {
                expected: self.lower.len(),
                got: self.upper.len(),
            });
        }
        for i in 0..self.lower.len() {
            if !(self.lower[i] < self.upper[i]) {
                return Err(Error::InvariantViolation(format!(
                    "hyperrectangle needs lower[{i}] < upper[{i}], got [{}, {}]",
                    self.lower[i], self.upper[i]
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn side_lengths(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| u - l)
            .collect()
    }

    pub fn volume(&self) -> f64 {
        self.side_lengths().iter().product()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *v >= *l && *v <= *u)
    }

    /// Sup-norm distance from `x` to the box (zero inside).
    pub fn sup_distance(&self, x: &[f64]) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..self.dim() {
            let below = self.lower[i] - x[i];
            let above = x[i] - self.upper[i];
            d = d.max(below.max(above));
        }
        d.max(0.0)
    }

    /// Box shrunk by `margin` on every side. Errors if the interior vanishes.
    pub fn inset(&self, margin: f64) -> Result<Self> {
        Self::new(
            self.lower.iter().map(|l| l + margin).collect(),
            self.upper.iter().map(|u| u - margin).collect(),
        )
    }

    pub fn inflate(&self, margin: f64) -> Self {
        Self {
            lower: self.lower.iter().map(|l| l - margin).collect(),
            upper: self.upper.iter().map(|u| u + margin).collect(),
        }
    }

    /// All `2^n` corner points, in lexicographic bit order.
    pub fn vertices(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        let mut out = Vec::with_capacity(1 << n);
        for mask in 0u64..(1u64 << n) {
            let v = (0..n)
                .map(|i| {
                    if mask >> i & 1 == 1 {
                        self.upper[i]
                    } else {
                        self.lower[i]
                    }
                })
                .collect();
            out.push(v);
        }
        out
    }

    /// Smallest box containing both.
    pub fn hull(&self, other: &Self) -> Self {
        Self {
            lower: self
                .lower
                .iter()
                .zip(&other.lower)
                .map(|(a, b)| a.min(*b))
                .collect(),
            upper: self
                .upper
                .iter()
                .zip(&other.upper)
                .map(|(a, b)| a.max(*b))
                .collect(),
        }
    }

    /// True when the open interiors intersect.
    pub fn interiors_overlap(&self, other: &Self) -> bool {
        (0..self.dim()).all(|i| self.lower[i] < other.upper[i] && other.lower[i] < self.upper[i])
    }

    /// Sup-norm gap between two boxes; zero for touching or overlapping boxes.
    pub fn gap(&self, other: &Self) -> f64 {
        let mut g: f64 = 0.0;
        for i in 0..self.dim() {
            let a = other.lower[i] - self.upper[i];
            let b = self.lower[i] - other.upper[i];
            g = g.max(a.max(b));
        }
        g.max(0.0)
    }
}

/// `x ↦ matrix·x + shift`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub matrix: Vec<Vec<f64>>,
    pub shift: Vec<f64>,
}

impl AffineMap {
    pub fn identity(n: usize) -> Self {
        let mut matrix = vec![vec![0.0; n]; n];
        for (i, row) in matrix.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self {
            matrix,
            shift: vec![0.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matrix
            .iter()
            .zip(&self.shift)
            .map(|(row, b)| dot(row, x) + b)
            .collect()
    }

    pub fn det(&self) -> f64 {
        to_dmatrix(&self.matrix).determinant()
    }

    /// Checks the nonsingularity floor used throughout: |det| relative to
    /// the product of row norms.
    pub fn check_nonsingular(&self) -> Result<f64> {
        check_rows_nonsingular(&self.matrix)
    }

    pub fn inverse(&self) -> Result<Self> {
        self.check_nonsingular()?;
        let n = self.dim();
        let m = to_dmatrix(&self.matrix);
        let inv = m.try_inverse().ok_or(Error::SingularBundle {
            det: 0.0,
            floor: SINGULAR_REL_FLOOR,
        })?;
        let matrix: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| inv[(i, j)]).collect())
            .collect();
        let shift: Vec<f64> = matrix.iter().map(|row| -dot(row, &self.shift)).collect();
        Ok(Self { matrix, shift })
    }
}

/// Finite calibration set: points with binary labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoints {
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

impl LabeledPoints {
    pub fn new(points: Vec<Vec<f64>>, labels: Vec<u8>) -> Result<Self> {
        let lp = Self { points, labels };
        lp.validate()?;
        Ok(lp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() != self.labels.len() {
            return Err(Error::DimensionMismatch {
                expected: self.points.len(),
                got: self.labels.len(),
            });
        }
        if let Some(l) = self.labels.iter().find(|l| **l > 1) {
            return Err(Error::InvariantViolation(format!(
                "labels must be 0 or 1, got {l}"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Axis-aligned bounding box, inflated by `factor` of the largest extent.
    pub fn bounding_box(&self, factor: f64) -> Option<Hyperrectangle> {
        let first = self.points.first()?;
        let mut lower = first.clone();
        let mut upper = first.clone();
        for p in &self.points {
            for i in 0..p.len() {
                lower[i] = lower[i].min(p[i]);
                upper[i] = upper[i].max(p[i]);
            }
        }
        let extent = lower
            .iter()
            .zip(&upper)
            .map(|(l, u)| u - l)
            .fold(0.0f64, f64::max)
            .max(1.0);
        let pad = factor * extent;
        Some(Hyperrectangle {
            lower: lower.iter().map(|l| l - pad).collect(),
            upper: upper.iter().map(|u| u + pad).collect(),
        })
    }
}

/// Sequential left-to-right dot product. All forward evaluation and all
/// exactness assertions in this crate go through this one accumulation
/// order, so "equal" means bit-equal across runs.
#[inline]
pub fn dot(w: &[f64], x: &[f64]) -> f64 {
    debug_assert_eq!(w.len(), x.len());
    let mut s = 0.0;
    for i in 0..w.len() {
        s += w[i] * x[i];
    }
    s
}

fn to_dmatrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, m, |i, j| rows[i][j])
}

/// |det| must exceed the floor relative to the product of row norms.
pub fn check_rows_nonsingular(rows: &[Vec<f64>]) -> Result<f64> {
    let det = to_dmatrix(rows).determinant();
    let norm_product: f64 = rows.iter().map(|r| dot(r, r).sqrt()).product();
    let floor = SINGULAR_REL_FLOOR * norm_product;
    if det.abs() > floor {
        Ok(det)
    } else {
        Err(Error::SingularBundle {
            det,
            floor,
        })
    }
}

/// Companion bundle for `h` calibrated on `data`: `n` hyperplanes that all
/// classify every data point the way `h` does, with an invertible stacked
/// normal matrix. `bundle[0]` is `h` itself; the rest perturb the normal by
/// `eps` along distinct coordinate axes, skipping the dominant coordinate of
/// `h.normal` so the stack always has full rank. `eps = gamma / (2 R_max)`
/// caps the perturbation of any data-point evaluation at half the smallest
/// margin `gamma`, which preserves every sign.
pub fn companion_bundle(h: &Hyperplane, data: &LabeledPoints) -> Result<Vec<Hyperplane>> {
    companion_bundle_with_tol(h, data, DEFAULT_TOL)
}

pub fn companion_bundle_with_tol(
    h: &Hyperplane,
    data: &LabeledPoints,
    tol: f64,
) -> Result<Vec<Hyperplane>> {
    h.validate()?;
    data.validate()?;
    let n = h.dim();

    let mut gamma = f64::INFINITY;
    let mut r_max: f64 = 0.0;
    for (index, p) in data.points.iter().enumerate() {
        if p.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: p.len(),
            });
        }
        let v = h.eval(p);
        if v.abs() <= tol {
            return Err(Error::DegenerateData { index });
        }
        gamma = gamma.min(v.abs());
        r_max = r_max.max(p.iter().fold(0.0f64, |m, c| m.max(c.abs())));
    }
    if data.is_empty() {
        gamma = 1.0;
    }
    // All data at the origin: every evaluation reduces to the offset, so any
    // perturbation scale preserves signs.
    let eps = if r_max == 0.0 { 1.0 } else { gamma / (2.0 * r_max) };

    let dominant = h
        .normal
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i)
        .unwrap();

    let mut bundle = Vec::with_capacity(n);
    bundle.push(h.clone());
    for j in (0..n).filter(|j| *j != dominant) {
        let mut normal = h.normal.clone();
        normal[j] += eps;
        bundle.push(Hyperplane::new(normal, h.offset));
    }

    // Exhaustive postcondition checks: side preservation and full rank.
    for (index, p) in data.points.iter().enumerate() {
        let seed_side = h.eval(p) > 0.0;
        for c in &bundle {
            if (c.eval(p) > 0.0) != seed_side {
                return Err(Error::BundleFailure(format!(
                    "companion flipped the side of data point {index}"
                )));
            }
        }
    }
    let rows: Vec<Vec<f64>> = bundle.iter().map(|b| b.normal.clone()).collect();
    check_rows_nonsingular(&rows)?;
    Ok(bundle)
}

/// The affine eval map of a bundle: rows are the normals, shift the offsets.
pub fn bundle_map(bundle: &[Hyperplane]) -> AffineMap {
    AffineMap {
        matrix: bundle.iter().map(|h| h.normal.clone()).collect(),
        shift: bundle.iter().map(|h| h.offset).collect(),
    }
}

/// Layer realizing a bundle: stacked normals as weights, offsets as biases,
/// ReLU activation. On the all-positive region of the bundle the layer output
/// equals `Wx + b` exactly, because ReLU is the identity on positive values
/// computed by the very same dot products.
pub fn transmit_layer(bundle: &[Hyperplane]) -> Result<crate::net::Layer> {
    let rows: Vec<Vec<f64>> = bundle.iter().map(|h| h.normal.clone()).collect();
    check_rows_nonsingular(&rows)?;
    Ok(crate::net::Layer::new(
        rows,
        bundle.iter().map(|h| h.offset).collect(),
        crate::net::Activation::Relu,
    ))
}

/// Pull `h` back through the affine map `a`: the result satisfies
/// `h'(a(x)) = h(x)` for every `x`.
pub fn map_hyperplane(h: &Hyperplane, a: &AffineMap) -> Result<Hyperplane> {
    if h.dim() != a.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: h.dim(),
        });
    }
    let inv = a.inverse()?;
    // normal' = normal · A^-1  (row vector times matrix)
    let n = h.dim();
    let normal: Vec<f64> = (0..n)
        .map(|j| {
            let col: Vec<f64> = (0..n).map(|i| inv.matrix[i][j]).collect();
            dot(&h.normal, &col)
        })
        .collect();
    let minus_ainv_c: Vec<f64> = inv.shift.clone();
    let offset = h.offset + dot(&h.normal, &minus_ainv_c);
    Ok(Hyperplane::new(normal, offset))
}
