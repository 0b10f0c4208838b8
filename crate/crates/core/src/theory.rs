//! Operator-level checks: whether a discretized forward operator induces a
//! representation on its range (visibility), operators of convolution form
//! `(𝒜x)(r, φ) = ∫ a(r − u·φ⃗) x(u) du`, and the kernel constraints that
//! make such operators equivariant.

use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;

use crate::actions::{
    act_x_inv, act_y_inv, jacobian_det_y, multiplier_y, AnalyticSignal, GeneralizedDomainTransform,
    PointX, PointY, Space,
};
use crate::error::{usage, Result};
use crate::group::{uniform, GroupElement, GroupId, Mat2, Vec2};
use crate::tomo::{linspace, GridLayout, RasterImage, SensorSet};

/// A linear map from raster images on `domain()` to values at `sensors()`.
pub trait LinearOperator {
    fn domain(&self) -> GridLayout;
    fn sensors(&self) -> &SensorSet;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
}

#[derive(Clone, Debug)]
pub struct DenseOperator {
    pub matrix: DMatrix<f64>,
    pub domain_grid: GridLayout,
    pub range_sensors: SensorSet,
}

impl DenseOperator {
    pub fn new(
        matrix: DMatrix<f64>,
        domain_grid: GridLayout,
        range_sensors: SensorSet,
    ) -> Result<Self> {
        if matrix.nrows() != range_sensors.len() || matrix.ncols() != domain_grid.len() {
            return usage(format!(
                "operator is {}x{} but sensors/grid need {}x{}",
                matrix.nrows(),
                matrix.ncols(),
                range_sensors.len(),
                domain_grid.len()
            ));
        }
        Ok(DenseOperator {
            matrix,
            domain_grid,
            range_sensors,
        })
    }
}

impl LinearOperator for DenseOperator {
    fn domain(&self) -> GridLayout {
        self.domain_grid
    }

    fn sensors(&self) -> &SensorSet {
        &self.range_sensors
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.matrix.ncols();
        (0..self.matrix.nrows())
            .map(|i| (0..n).map(|j| self.matrix[(i, j)] * x[j]).sum())
            .collect()
    }
}

/// Rows are the Joseph projector weights used by [`crate::tomo::radon_raster`].
pub fn discretize_radon(grid: GridLayout, sensors: &SensorSet) -> DenseOperator {
    let mut m = DMatrix::zeros(sensors.len(), grid.len());
    let mut w = Vec::new();
    for (i, &v) in sensors.points.iter().enumerate() {
        grid.joseph_weights(v, &mut w);
        for &(j, wt) in &w {
            m[(i, j)] += wt;
        }
    }
    DenseOperator {
        matrix: m,
        domain_grid: grid,
        range_sensors: sensors.clone(),
    }
}

/// `𝒫_X[g]` on the grid: each output pixel bilinearly samples the input at
/// `π_X[g]⁻¹` of its centre.
pub fn discretize_rep(g: &GroupElement, grid: GridLayout) -> DMatrix<f64> {
    let n = grid.len();
    let mut m = DMatrix::zeros(n, n);
    for iy in 0..grid.height {
        for ix in 0..grid.width {
            let row = iy * grid.width + ix;
            let src = act_x_inv(g, PointX(grid.center(ix, iy)));
            grid.bilinear_weights(src.0, |j, w| m[(row, j)] += w);
        }
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VisibilityReport {
    pub holds: bool,
    /// Largest principal angle between `Ker(A)` and `Ker(AP)`; `π/2` when the
    /// dimensions differ.
    pub mismatch_angle: f64,
    pub kernel_dim: usize,
    pub transformed_kernel_dim: usize,
}

/// Orthonormal basis (as columns) of the numerical nullspace, cut at
/// `σ ≤ tol·σ_max`.
pub fn nullspace(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let n = m.ncols();
    // thin SVD only yields min(rows, cols) right vectors
    let padded = if m.nrows() < n {
        let mut p = DMatrix::zeros(n, n);
        p.view_mut((0, 0), (m.nrows(), n)).copy_from(m);
        p
    } else {
        m.clone()
    };
    let svd = padded.svd(false, true);
    let vt = svd.v_t.expect("right singular vectors requested");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cut = tol * smax;
    let cols: Vec<_> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s <= cut)
        .map(|(k, _)| vt.row(k).transpose())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Largest principal angle between the column spans of two orthonormal bases
/// of equal dimension.
pub fn largest_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    if a.ncols() == 0 && b.ncols() == 0 {
        return 0.0;
    }
    if a.ncols() != b.ncols() {
        return PI / 2.0;
    }
    let residual = b - a * (a.transpose() * b);
    let s = residual
        .singular_values()
        .iter()
        .cloned()
        .fold(0.0, f64::max);
    s.min(1.0).asin()
}

/// Compares `Ker(A)` with `Ker(A·P)`.
pub fn check_visibility(
    a: &DenseOperator,
    p: &DMatrix<f64>,
    tol: f64,
    tol_angle: f64,
) -> Result<VisibilityReport> {
    let n = a.matrix.ncols();
    if p.nrows() != n || p.ncols() != n {
        return usage(format!(
            "representation must be {n}x{n}, got {}x{}",
            p.nrows(),
            p.ncols()
        ));
    }
    let k1 = nullspace(&a.matrix, tol);
    let k2 = nullspace(&(&a.matrix * p), tol);
    let angle = largest_principal_angle(&k1, &k2);
    Ok(VisibilityReport {
        holds: k1.ncols() == k2.ncols() && angle <= tol_angle,
        mismatch_angle: angle,
        kernel_dim: k1.ncols(),
        transformed_kernel_dim: k2.ncols(),
    })
}

/// A profile `r ↦ a(r)` vanishing for `|r| > support`.
#[derive(Clone)]
pub struct Kernel1D {
    f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub support: f64,
}

impl Kernel1D {
    pub fn new(support: f64, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Kernel1D {
            f: Arc::new(f),
            support,
        }
    }

    pub fn zero() -> Self {
        Kernel1D::new(0.0, |_| 0.0)
    }

    /// Unit-mass Gaussian truncated at five standard deviations.
    pub fn gaussian(sigma: f64) -> Self {
        let norm = 1.0 / (sigma * TAU.sqrt());
        let support = 5.0 * sigma;
        Kernel1D::new(support, move |r| {
            if r.abs() > support {
                0.0
            } else {
                norm * (-0.5 * r * r / (sigma * sigma)).exp()
            }
        })
    }

    pub fn eval(&self, r: f64) -> f64 {
        if r.abs() > self.support {
            0.0
        } else {
            (self.f)(r)
        }
    }

    pub fn sum(&self, other: &Kernel1D) -> Kernel1D {
        let (a, b) = (self.clone(), other.clone());
        Kernel1D::new(self.support.max(other.support), move |r| {
            a.eval(r) + b.eval(r)
        })
    }
}

/// Dense convolution-form operator with midpoint quadrature over pixels.
pub fn build_equivariant_op(a: &Kernel1D, grid: GridLayout, sensors: &SensorSet) -> DenseOperator {
    let area = grid.pixel_area();
    let centres = pixel_centres(grid);
    let mut m = DMatrix::zeros(sensors.len(), grid.len());
    for (i, v) in sensors.points.iter().enumerate() {
        let n = v.normal();
        for (j, c) in centres.iter().enumerate() {
            m[(i, j)] = a.eval(v.r - c.dot(&n)) * area;
        }
    }
    DenseOperator {
        matrix: m,
        domain_grid: grid,
        range_sensors: sensors.clone(),
    }
}

fn pixel_centres(grid: GridLayout) -> Vec<Vec2> {
    let mut out = Vec::with_capacity(grid.len());
    for iy in 0..grid.height {
        for ix in 0..grid.width {
            out.push(grid.center(ix, iy));
        }
    }
    out
}

/// The operator of [`build_equivariant_op`] applied without storing the
/// matrix, for grids where the dense form does not fit in memory.
#[derive(Clone)]
pub struct KernelOperator {
    kernel: Kernel1D,
    grid: GridLayout,
    sensors: SensorSet,
    centres: Vec<Vec2>,
}

impl KernelOperator {
    pub fn new(kernel: Kernel1D, grid: GridLayout, sensors: &SensorSet) -> Self {
        KernelOperator {
            kernel,
            grid,
            sensors: sensors.clone(),
            centres: pixel_centres(grid),
        }
    }

    pub fn to_dense(&self) -> DenseOperator {
        build_equivariant_op(&self.kernel, self.grid, &self.sensors)
    }
}

impl LinearOperator for KernelOperator {
    fn domain(&self) -> GridLayout {
        self.grid
    }

    fn sensors(&self) -> &SensorSet {
        &self.sensors
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let area = self.grid.pixel_area();
        let reach = self.kernel.support;
        let mut out = vec![0.0; self.sensors.len()];
        let mut proj: Vec<(f64, f64)> = Vec::new();
        let mut i = 0;
        while i < self.sensors.len() {
            // consecutive sensors sharing an angle reuse one sorted projection
            let phi = self.sensors.points[i].phi;
            let mut end = i + 1;
            while end < self.sensors.len() && self.sensors.points[end].phi == phi {
                end += 1;
            }
            let n = self.sensors.points[i].normal();
            proj.clear();
            proj.extend(
                self.centres
                    .iter()
                    .zip(x)
                    .filter(|(_, &v)| v != 0.0)
                    .map(|(c, &v)| (c.dot(&n), v)),
            );
            proj.sort_by(|a, b| a.0.total_cmp(&b.0));
            for k in i..end {
                let r = self.sensors.points[k].r;
                let lo = proj.partition_point(|p| p.0 < r - reach);
                let mut acc = 0.0;
                for &(t, v) in &proj[lo..] {
                    if t > r + reach {
                        break;
                    }
                    acc += self.kernel.eval(r - t) * v;
                }
                out[k] = acc * area;
            }
            i = end;
        }
        out
    }
}

/// Regular sinogram lattice: `n_angles` angles `2πk/n` and sorted offsets,
/// sensors angle-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SinogramGrid {
    pub n_angles: usize,
    pub offsets: Vec<f64>,
}

impl SinogramGrid {
    pub fn new(n_angles: usize, n_offsets: usize, half_width: f64) -> Result<Self> {
        if n_angles == 0 || n_offsets < 2 {
            return usage("sinogram grid needs at least one angle and two offsets");
        }
        Ok(SinogramGrid {
            n_angles,
            offsets: linspace(-half_width, half_width, n_offsets),
        })
    }

    pub fn sensors(&self) -> SensorSet {
        let mut points = Vec::with_capacity(self.n_angles * self.offsets.len());
        for k in 0..self.n_angles {
            let phi = TAU * k as f64 / self.n_angles as f64;
            for &r in &self.offsets {
                points.push(PointY::new(r, phi));
            }
        }
        SensorSet { points }
    }

    /// Bilinear in `r`, periodic linear in `φ`, zero outside the offset range.
    pub fn interpolate(&self, values: &[f64], v: PointY) -> f64 {
        let n_off = self.offsets.len();
        let lo = self.offsets[0];
        let step = self.offsets[1] - lo;
        let last = (n_off - 1) as f64;
        let mut fr = (v.r - lo) / step;
        if fr < -1e-9 || fr > last + 1e-9 {
            return 0.0;
        }
        fr = fr.clamp(0.0, last);
        let r0 = (fr.floor() as usize).min(n_off - 2);
        let tr = fr - r0 as f64;
        let fa = v.phi / TAU * self.n_angles as f64;
        let a0f = fa.floor();
        let ta = fa - a0f;
        let a0 = (a0f as usize) % self.n_angles;
        let a1 = (a0 + 1) % self.n_angles;
        let at = |a: usize, r: usize| values[a * n_off + r];
        let row = |a: usize| (1.0 - tr) * at(a, r0) + tr * at(a, r0 + 1);
        (1.0 - ta) * row(a0) + ta * row(a1)
    }
}

/// Smooth compactly supported test image `(1 − |u − c|²/R²)³₊`.
pub fn polynomial_bump(center: Vec2, radius: f64) -> AnalyticSignal<PointX> {
    AnalyticSignal::new(center.norm() + radius, move |u: PointX| {
        let q = (u.0 - center).norm_squared() / (radius * radius);
        if q >= 1.0 {
            0.0
        } else {
            (1.0 - q).powi(3)
        }
    })
}

/// Sup-norm residual of `𝒫_Y[g]𝒜x = 𝒜𝒫_X[g]x`, relative to `sup |𝒜x|`, maximised
/// over the test images. The operator's sensors must be `grid.sensors()`;
/// `𝒫_Y[g]` is evaluated by interpolating `𝒜x` on that lattice.
pub fn check_equivariance(
    op: &dyn LinearOperator,
    g: &GroupElement,
    images: &[AnalyticSignal<PointX>],
    grid: &SinogramGrid,
) -> Result<f64> {
    let sensors = grid.sensors();
    if op.sensors() != &sensors {
        return usage("operator sensors must match the sinogram lattice");
    }
    let layout = op.domain();
    let tx = GeneralizedDomainTransform::new(g.id(), Space::X);
    let mut worst: f64 = 0.0;
    for x in images {
        let plain = RasterImage::rasterize(layout, 1, |u| x.eval(PointX(u)));
        let moved_sig = tx.transform_signal(g, x)?;
        let moved = RasterImage::rasterize(layout, 1, |u| moved_sig.eval(PointX(u)));
        let y = op.apply(&plain.values);
        let lhs = op.apply(&moved.values);
        let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            continue;
        }
        let mut err: f64 = 0.0;
        for (v, l) in sensors.points.iter().zip(&lhs) {
            let rhs = multiplier_y(g, *v) * grid.interpolate(&y, act_y_inv(g, *v));
            err = err.max((l - rhs).abs());
        }
        worst = worst.max(err / scale);
    }
    Ok(worst)
}

/// Residual of the kernel constraint for an operator Ω_X → Ω_Y with kernel `a`
/// on Ω_Y:
/// `p_Y[g_u n](v)·a(π_Y[g_u n]⁻¹v) = p_Y[g_u](v)·a(π_Y[g_u]⁻¹v)·|det Dπ_X[n](0)|`
/// for stabilizer elements `n` of the image origin. Returns the max absolute
/// difference over all probes.
pub fn check_kernel_constraint(
    kernel: &dyn Fn(PointY) -> f64,
    stabilizer: &[GroupElement],
    probes_u: &[Vec2],
    probes_v: &[PointY],
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for n in stabilizer {
        if n.translation() != Vec2::zeros() {
            return usage("stabilizer elements of the image origin have zero translation");
        }
        let id = n.id();
        for &u in probes_u {
            let gu = crate::group::coset_rep_x(u, id);
            let gun = gu.compose(n)?;
            for &v in probes_v {
                let lhs = multiplier_y(&gun, v) * kernel(act_y_inv(&gun, v));
                let rhs = multiplier_y(&gu, v) * kernel(act_y_inv(&gu, v)) * n.det().abs();
                worst = worst.max((lhs - rhs).abs());
            }
        }
    }
    Ok(worst)
}

/// The sinogram origin `(r, φ) = (0, 0)`.
pub const SINOGRAM_ORIGIN: PointY = PointY { r: 0.0, phi: 0.0 };

/// Random elements fixing the sinogram origin: `((0, t), 0)` for SE(2);
/// `((0, t), [[a, 0], [c, d]])` with `a, d > 0` for Aff⁺(2).
pub fn sample_stabilizer_y<R: Rng + ?Sized>(
    id: GroupId,
    n: usize,
    rng: &mut R,
) -> Vec<GroupElement> {
    (0..n)
        .map(|_| {
            let t = uniform(rng, (-1.0, 1.0));
            match id {
                GroupId::SE2 => GroupElement::se2(Vec2::new(0.0, t), 0.0),
                GroupId::AffPlus2 => GroupElement::Aff {
                    s: Vec2::new(0.0, t),
                    a: Mat2::new(
                        uniform(rng, (0.5, 1.5)),
                        0.0,
                        uniform(rng, (-0.5, 0.5)),
                        uniform(rng, (0.5, 1.5)),
                    ),
                },
            }
        })
        .collect()
}

/// Residual of the constraint on a kernel `a` over G for layers Ω_Y → G:
/// `a(n⁻¹h) = a(h)·p_Y[n](v₀)·|det Dπ_Y[n](v₀)|` for `n` fixing the sinogram
/// origin `v₀`.
pub fn check_lifting_constraint(
    kernel: &dyn Fn(&GroupElement) -> f64,
    stabilizer: &[GroupElement],
    probes: &[GroupElement],
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for n in stabilizer {
        let fixed = act_y_inv(n, SINOGRAM_ORIGIN);
        if fixed.r.abs() > 1e-12 || crate::group::angle_dist(fixed.phi, 0.0) > 1e-12 {
            return usage("stabilizer element does not fix the sinogram origin");
        }
        let factor = multiplier_y(n, SINOGRAM_ORIGIN) * jacobian_det_y(n, SINOGRAM_ORIGIN).abs();
        let n_inv = n.inverse();
        for h in probes {
            let lhs = kernel(&n_inv.compose(h)?);
            let rhs = kernel(h) * factor;
            worst = worst.max((lhs - rhs).abs());
        }
    }
    Ok(worst)
}
