//! Forward measurements: closed-form line integrals of ellipse phantoms, a
//! Joseph-style projector for raster images, fan-beam sampling patterns and
//! measurement noise.

use std::f64::consts::FRAC_PI_2;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::actions::PointY;
use crate::error::{usage, Error, Result};
use crate::group::{inverse2, reduce_angle, rotation, sym_eig2, GroupElement, Mat2, Vec2};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: Vec2,
    pub a: f64,
    pub b: f64,
    /// Orientation of the `a` axis.
    pub psi: f64,
    pub density: f64,
}

impl Ellipse {
    pub fn new(center: Vec2, a: f64, b: f64, psi: f64, density: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0) {
            return usage(format!(
                "ellipse semi-axes must be positive, got ({a}, {b})"
            ));
        }
        Ok(Ellipse {
            center,
            a,
            b,
            psi: reduce_angle(psi),
            density,
        })
    }

    pub fn disc(center: Vec2, radius: f64, density: f64) -> Result<Self> {
        Ellipse::new(center, radius, radius, 0.0, density)
    }

    /// `M = R(ψ)·diag(a⁻², b⁻²)·R(ψ)ᵀ`, so the ellipse is `(u − c)ᵀM(u − c) ≤ 1`.
    pub fn shape_matrix(&self) -> Mat2 {
        let r = rotation(self.psi);
        r * Mat2::new(1.0 / (self.a * self.a), 0.0, 0.0, 1.0 / (self.b * self.b)) * r.transpose()
    }

    pub fn contains(&self, u: Vec2) -> bool {
        let d = u - self.center;
        d.dot(&(self.shape_matrix() * d)) <= 1.0
    }

    pub fn radius_bound(&self) -> f64 {
        self.center.norm() + self.a.max(self.b)
    }
}

/// Closed-form Radon transform of a uniform-density ellipse.
pub fn radon_ellipse(e: &Ellipse, v: PointY) -> f64 {
    let n = v.normal();
    let rp = v.r - e.center.dot(&n);
    let (sn, cs) = (v.phi - e.psi).sin_cos();
    let s2 = e.a * e.a * cs * cs + e.b * e.b * sn * sn;
    let d = s2 - rp * rp;
    if d <= 0.0 {
        0.0
    } else {
        e.density * 2.0 * e.a * e.b / s2 * d.sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phantom {
    components: Vec<Ellipse>,
}

impl Phantom {
    pub fn new(components: Vec<Ellipse>) -> Result<Self> {
        if components.is_empty() {
            return usage("a phantom needs at least one ellipse");
        }
        Ok(Phantom { components })
    }

    /// Outer ellipse with density `+w`, inner with `−w`.
    pub fn ring(outer: Ellipse, inner: Ellipse) -> Self {
        Phantom {
            components: vec![outer, inner],
        }
    }

    pub fn components(&self) -> &[Ellipse] {
        &self.components
    }

    pub fn support_radius(&self) -> f64 {
        self.components
            .iter()
            .map(Ellipse::radius_bound)
            .fold(0.0, f64::max)
    }

    pub fn union(&self, other: &Phantom) -> Phantom {
        let mut components = self.components.clone();
        components.extend_from_slice(&other.components);
        Phantom { components }
    }

    pub fn density_at(&self, u: Vec2) -> f64 {
        self.components
            .iter()
            .filter(|e| e.contains(u))
            .map(|e| e.density)
            .sum()
    }
}

pub fn radon_phantom(p: &Phantom, v: PointY) -> f64 {
    p.components.iter().map(|e| radon_ellipse(e, v)).sum()
}

/// Image of a phantom under `x ↦ x ∘ π_X[g]⁻¹`. Centers move by the affine map
/// and shape matrices transform as `A⁻ᵀMA⁻¹`; densities are unchanged.
pub fn transform_phantom(g: &GroupElement, p: &Phantom) -> Phantom {
    if *g == GroupElement::identity(g.id()) {
        return p.clone();
    }
    let a = g.linear();
    let s = g.translation();
    let inv = inverse2(&a);
    let components = p
        .components
        .iter()
        .map(|e| {
            let m = inv.transpose() * e.shape_matrix() * inv;
            let q = 0.5 * (m[(0, 1)] + m[(1, 0)]);
            let (lo, hi, psi) = sym_eig2(m[(0, 0)], q, m[(1, 1)]);
            Ellipse {
                center: a * e.center + s,
                a: 1.0 / lo.sqrt(),
                b: 1.0 / hi.sqrt(),
                psi: reduce_angle(psi),
                density: e.density,
            }
        })
        .collect();
    Phantom { components }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeometryKind {
    Parallel,
    Fan,
}

/// Acquisition pattern. For parallel beams `detector_offsets` are signed
/// distances `r`; for fan beams they are fan angles and the source sits at
/// `−D·(cos β, sin β)` for projection angle `β`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub kind: GeometryKind,
    pub angles: Vec<f64>,
    pub detector_offsets: Vec<f64>,
    #[serde(default = "default_source_distance")]
    pub source_distance: f64,
}

fn default_source_distance() -> f64 {
    4.0
}

impl Geometry {
    pub fn parallel(angles: Vec<f64>, detector_offsets: Vec<f64>) -> Result<Self> {
        let g = Geometry {
            kind: GeometryKind::Parallel,
            angles,
            detector_offsets,
            source_distance: default_source_distance(),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn fan(angles: Vec<f64>, fan_angles: Vec<f64>, source_distance: f64) -> Result<Self> {
        let g = Geometry {
            kind: GeometryKind::Fan,
            angles,
            detector_offsets: fan_angles,
            source_distance,
        };
        g.validate()?;
        Ok(g)
    }

    /// `n` angles equally spaced on `[0, 2π)` and `n_offsets` offsets on `[−half_width, half_width]`.
    pub fn uniform_parallel(n_angles: usize, n_offsets: usize, half_width: f64) -> Result<Self> {
        let angles = (0..n_angles)
            .map(|i| std::f64::consts::TAU * i as f64 / n_angles as f64)
            .collect();
        Geometry::parallel(angles, linspace(-half_width, half_width, n_offsets))
    }

    /// Fan beam at the given projection angles covering `|r| ≤ half_width`.
    pub fn fan_covering(
        angles: Vec<f64>,
        n_rays: usize,
        half_width: f64,
        source_distance: f64,
    ) -> Result<Self> {
        if half_width >= source_distance {
            return usage("fan must not cover the source position");
        }
        let max_fan = (half_width / source_distance).asin();
        Geometry::fan(angles, linspace(-max_fan, max_fan, n_rays), source_distance)
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .angles
            .iter()
            .any(|a| !(0.0..std::f64::consts::TAU).contains(a))
        {
            return usage("geometry angles must lie in [0, 2π)");
        }
        if self.detector_offsets.windows(2).any(|w| !(w[1] > w[0])) {
            return usage("detector offsets must be strictly increasing");
        }
        if self.kind == GeometryKind::Fan {
            if !(self.source_distance > 0.0) {
                return usage("fan geometry needs a positive source distance");
            }
            if self.detector_offsets.iter().any(|f| f.abs() >= FRAC_PI_2) {
                return usage("fan angles must lie in (−π/2, π/2)");
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.angles.len() * self.detector_offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Parallel coordinates of the fan ray at `fan_angle` for projection angle `beta`:
/// `r = D·sin(fan_angle)`, `φ = β + fan_angle + π/2`.
pub fn fan_to_parallel(beta: f64, fan_angle: f64, source_distance: f64) -> PointY {
    PointY::new(
        source_distance * fan_angle.sin(),
        beta + fan_angle + FRAC_PI_2,
    )
}

/// Measurement points, all in parallel `(r, φ)` coordinates, angle-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorSet {
    pub points: Vec<PointY>,
}

impl SensorSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn build_sensors(geom: &Geometry) -> SensorSet {
    let mut points = Vec::with_capacity(geom.len());
    for &beta in &geom.angles {
        for &off in &geom.detector_offsets {
            points.push(match geom.kind {
                GeometryKind::Parallel => PointY::new(off, beta),
                GeometryKind::Fan => fan_to_parallel(beta, off, geom.source_distance),
            });
        }
    }
    SensorSet { points }
}

pub fn measure(p: &Phantom, sensors: &SensorSet) -> Vec<f64> {
    sensors
        .points
        .iter()
        .map(|&v| radon_phantom(p, v))
        .collect()
}

/// Adds `N(0, σ²)` noise with `σ = level · RMS(y)`.
pub fn add_noise<R: Rng + ?Sized>(y: &[f64], level: f64, rng: &mut R) -> Result<Vec<f64>> {
    if level == 0.0 || y.is_empty() {
        return Ok(y.to_vec());
    }
    if !(level > 0.0) {
        return usage(format!("noise level must be non-negative, got {level}"));
    }
    let rms = (y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64).sqrt();
    if rms == 0.0 {
        return Ok(y.to_vec());
    }
    let normal = Normal::new(0.0, level * rms).map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(y.iter().map(|v| v + normal.sample(rng)).collect())
}

/// Pixel grid centred on the origin; row 0 is the top row (largest y).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridLayout {
    pub width: usize,
    pub height: usize,
    pub pixel_size: f64,
}

impl GridLayout {
    pub fn new(width: usize, height: usize, pixel_size: f64) -> Result<Self> {
        if width == 0 || height == 0 || !(pixel_size > 0.0) {
            return usage("grid needs positive width, height and pixel size");
        }
        Ok(GridLayout {
            width,
            height,
            pixel_size,
        })
    }

    /// Square grid of `n × n` pixels covering `[−half_width, half_width]²`.
    pub fn square(n: usize, half_width: f64) -> Result<Self> {
        GridLayout::new(n, n, 2.0 * half_width / n as f64)
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn center(&self, ix: usize, iy: usize) -> Vec2 {
        let cx = 0.5 * (self.width as f64 - 1.0);
        let cy = 0.5 * (self.height as f64 - 1.0);
        Vec2::new(
            (ix as f64 - cx) * self.pixel_size,
            (cy - iy as f64) * self.pixel_size,
        )
    }

    pub fn pixel_area(&self) -> f64 {
        self.pixel_size * self.pixel_size
    }

    /// Bilinear sample of row-major `values` at `u`, zero outside the grid.
    pub fn bilinear(&self, values: &[f64], u: Vec2) -> f64 {
        let mut acc = 0.0;
        self.bilinear_weights(u, |idx, w| acc += w * values[idx]);
        acc
    }

    pub(crate) fn bilinear_weights(&self, u: Vec2, mut visit: impl FnMut(usize, f64)) {
        let cx = 0.5 * (self.width as f64 - 1.0);
        let cy = 0.5 * (self.height as f64 - 1.0);
        let fx = snap(u.x / self.pixel_size + cx);
        let fy = snap(cy - u.y / self.pixel_size);
        let x0 = fx.floor();
        let y0 = fy.floor();
        let tx = fx - x0;
        let ty = fy - y0;
        for (dy, wy) in [(0.0, 1.0 - ty), (1.0, ty)] {
            for (dx, wx) in [(0.0, 1.0 - tx), (1.0, tx)] {
                let w = wx * wy;
                let ix = x0 + dx;
                let iy = y0 + dy;
                if w != 0.0
                    && ix >= 0.0
                    && iy >= 0.0
                    && (ix as usize) < self.width
                    && (iy as usize) < self.height
                {
                    visit(iy as usize * self.width + ix as usize, w);
                }
            }
        }
    }

    /// Joseph-style line integral weights: one sample per pixel row (or column)
    /// along the dominant axis, linear interpolation across it, each sample
    /// weighted by the path length through that row.
    pub(crate) fn joseph_weights(&self, v: PointY, out: &mut Vec<(usize, f64)>) {
        out.clear();
        let (sn, cs) = v.phi.sin_cos();
        let h = self.pixel_size;
        let cx = 0.5 * (self.width as f64 - 1.0);
        let cy = 0.5 * (self.height as f64 - 1.0);
        let mut push = |idx: Option<usize>, w: f64| {
            if let Some(i) = idx {
                if w != 0.0 {
                    out.push((i, w));
                }
            }
        };
        if cs.abs() >= sn.abs() {
            let step = h / cs.abs();
            for iy in 0..self.height {
                let y = (cy - iy as f64) * h;
                let fx = (v.r - y * sn) / cs / h + cx;
                let x0 = fx.floor();
                let t = fx - x0;
                let col = |x: f64| {
                    (x >= 0.0 && x < self.width as f64).then(|| iy * self.width + x as usize)
                };
                push(col(x0), step * (1.0 - t));
                push(col(x0 + 1.0), step * t);
            }
        } else {
            let step = h / sn.abs();
            for ix in 0..self.width {
                let x = (ix as f64 - cx) * h;
                let fy = cy - (v.r - x * cs) / sn / h;
                let y0 = fy.floor();
                let t = fy - y0;
                let row = |y: f64| {
                    (y >= 0.0 && y < self.height as f64).then(|| y as usize * self.width + ix)
                };
                push(row(y0), step * (1.0 - t));
                push(row(y0 + 1.0), step * t);
            }
        }
    }
}

// Pulls grid-aligned positions that carry round-off back onto the grid.
fn snap(f: f64) -> f64 {
    let n = f.round();
    if (f - n).abs() < 1e-9 {
        n
    } else {
        f
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    pub layout: GridLayout,
    pub values: Vec<f64>,
}

impl RasterImage {
    pub fn new(layout: GridLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return usage(format!(
                "raster of {}x{} needs {} values, got {}",
                layout.width,
                layout.height,
                layout.len(),
                values.len()
            ));
        }
        Ok(RasterImage { layout, values })
    }

    pub fn zeros(layout: GridLayout) -> Self {
        RasterImage {
            layout,
            values: vec![0.0; layout.len()],
        }
    }

    /// Pixel values as the mean of `f` over `supersample²` points per pixel.
    pub fn rasterize(layout: GridLayout, supersample: usize, f: impl Fn(Vec2) -> f64) -> Self {
        let n = supersample.max(1);
        let h = layout.pixel_size;
        let mut values = Vec::with_capacity(layout.len());
        for iy in 0..layout.height {
            for ix in 0..layout.width {
                let c = layout.center(ix, iy);
                let mut acc = 0.0;
                for sy in 0..n {
                    for sx in 0..n {
                        let ox = ((sx as f64 + 0.5) / n as f64 - 0.5) * h;
                        let oy = ((sy as f64 + 0.5) / n as f64 - 0.5) * h;
                        acc += f(c + Vec2::new(ox, oy));
                    }
                }
                values.push(acc / (n * n) as f64);
            }
        }
        RasterImage { layout, values }
    }

    pub fn from_phantom(layout: GridLayout, supersample: usize, p: &Phantom) -> Self {
        RasterImage::rasterize(layout, supersample, |u| p.density_at(u))
    }
}

pub fn radon_raster(img: &RasterImage, v: PointY) -> f64 {
    let mut w = Vec::new();
    img.layout.joseph_weights(v, &mut w);
    w.iter().map(|&(i, wt)| wt * img.values[i]).sum()
}

pub fn measure_raster(img: &RasterImage, sensors: &SensorSet) -> Vec<f64> {
    let mut w = Vec::new();
    sensors
        .points
        .iter()
        .map(|&v| {
            img.layout.joseph_weights(v, &mut w);
            w.iter().map(|&(i, wt)| wt * img.values[i]).sum()
        })
        .collect()
}

/// CSV with header `r,phi,value`.
pub fn write_sinogram_csv<W: Write>(out: W, sensors: &SensorSet, values: &[f64]) -> Result<()> {
    if sensors.len() != values.len() {
        return usage("sensor count and value count differ");
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["r", "phi", "value"]).map_err(csv_err)?;
    for (p, v) in sensors.points.iter().zip(values) {
        w.write_record([p.r.to_string(), p.phi.to_string(), v.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actions::{act_y_inv, multiplier_y};
    use crate::group::{sample_group, GroupId, SamplingRanges};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{PI, TAU};

    fn unit_disc() -> Ellipse {
        Ellipse::disc(Vec2::zeros(), 1.0, 1.0).unwrap()
    }

    fn ring() -> Phantom {
        Phantom::ring(
            unit_disc(),
            Ellipse::disc(Vec2::zeros(), 0.5, -1.0).unwrap(),
        )
    }

    #[test]
    fn ellipse_radon_examples() {
        for phi in [0.0, 1.0, 4.0] {
            assert!((radon_ellipse(&unit_disc(), PointY::new(0.0, phi)) - 2.0).abs() < 1e-15);
            assert_eq!(radon_ellipse(&unit_disc(), PointY::new(1.0, phi)), 0.0);
        }
        let e = Ellipse::new(Vec2::zeros(), 2.0, 1.0, 0.0, 1.0).unwrap();
        // φ = 0 integrates along the vertical line x = 0, a chord of length 2b
        assert!((radon_ellipse(&e, PointY::new(0.0, 0.0)) - 2.0).abs() < 1e-15);
        assert!((radon_ellipse(&e, PointY::new(0.0, FRAC_PI_2)) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn ring_and_additivity() {
        assert!((radon_phantom(&ring(), PointY::new(0.0, 0.3)) - 1.0).abs() < 1e-15);
        assert_eq!(radon_phantom(&ring(), PointY::new(5.0, 0.3)), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p1 = ring();
        let p2 = Phantom::new(vec![
            Ellipse::new(Vec2::new(0.2, -0.1), 0.4, 0.2, 1.0, 0.7).unwrap()
        ])
        .unwrap();
        let both = p1.union(&p2);
        for _ in 0..500 {
            let v = PointY::new(rng.random_range(-1.2..1.2), rng.random_range(0.0..TAU));
            let d = radon_phantom(&both, v) - radon_phantom(&p1, v) - radon_phantom(&p2, v);
            assert!(d.abs() < 1e-14);
        }
    }

    #[test]
    fn empty_phantom_rejected() {
        assert!(Phantom::new(vec![]).is_err());
        assert!(Ellipse::new(Vec2::zeros(), 0.0, 1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn fan_examples() {
        let v = fan_to_parallel(0.7, 0.0, 3.0);
        assert_eq!(v.r, 0.0);
        let v = fan_to_parallel(0.0, PI / 6.0, 2.0);
        assert!((v.r - 1.0).abs() < 1e-15);
        assert!((v.phi - 2.0 * PI / 3.0).abs() < 1e-15);
        let rs: Vec<f64> = linspace(-1.5, 1.5, 50)
            .into_iter()
            .map(|a| fan_to_parallel(0.3, a, 2.0).r)
            .collect();
        assert!(rs.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn fan_rays_pass_through_source() {
        let d = 3.0;
        let beta: f64 = 0.8;
        let source = -d * Vec2::new(beta.cos(), beta.sin());
        for a in linspace(-0.4, 0.4, 9) {
            let v = fan_to_parallel(beta, a, d);
            assert!((source.dot(&v.normal()) - v.r).abs() < 1e-14);
        }
    }

    #[test]
    fn sensor_construction() {
        let g = Geometry::parallel(vec![0.0, FRAC_PI_2], vec![-1.0, 0.0, 1.0]).unwrap();
        let s = build_sensors(&g);
        assert_eq!(s.len(), 6);
        assert_eq!(s.points[0], PointY::new(-1.0, 0.0));
        assert_eq!(s.points[3], PointY::new(-1.0, FRAC_PI_2));
        let fan = Geometry::fan(vec![0.0, 1.0, 2.0], vec![0.0], 4.0).unwrap();
        assert!(build_sensors(&fan).points.iter().all(|p| p.r == 0.0));
        assert!(Geometry::parallel(vec![0.0], vec![1.0, 0.0]).is_err());
        assert!(Geometry::parallel(vec![7.0], vec![0.0]).is_err());
    }

    #[test]
    fn measure_is_pointwise_and_order_preserving() {
        let g = Geometry::parallel(vec![0.0, 1.4], linspace(-1.2, 1.2, 64)).unwrap();
        let s = build_sensors(&g);
        let y = measure(&ring(), &s);
        assert_eq!(y.len(), 128);
        for (v, yi) in s.points.iter().zip(&y) {
            assert_eq!(*yi, radon_phantom(&ring(), *v));
        }
        let mut rev = s.clone();
        rev.points.reverse();
        let mut yr = measure(&ring(), &rev);
        yr.reverse();
        assert_eq!(y, yr);
        let single = SensorSet {
            points: vec![PointY::new(0.1, 0.2)],
        };
        assert_eq!(measure(&ring(), &single).len(), 1);
    }

    #[test]
    fn noise_contract() {
        let y: Vec<f64> = (0..200).map(|i| (i as f64 * 0.1).sin() + 0.5).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(add_noise(&y, 0.0, &mut rng).unwrap(), y);
        let a = add_noise(&y, 0.05, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = add_noise(&y, 0.05, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let rms = (y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64).sqrt();
        let target = (0.05 * rms).powi(2);
        let mut acc = 0.0;
        let draws = 10_000;
        for _ in 0..draws {
            let n = add_noise(&y, 0.05, &mut rng).unwrap();
            acc += n.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64;
        }
        let mean = acc / draws as f64;
        assert!((mean / target - 1.0).abs() < 0.05, "{mean} vs {target}");
    }

    #[test]
    fn transform_phantom_examples() {
        let e = Ellipse::new(Vec2::new(0.1, 0.2), 0.8, 0.3, 0.4, 1.0).unwrap();
        let p = Phantom::new(vec![e]).unwrap();
        let same = transform_phantom(&GroupElement::identity(GroupId::SE2), &p);
        let t = same.components()[0];
        assert!((t.a - e.a).abs() < 1e-14 && (t.b - e.b).abs() < 1e-14);
        assert!((t.psi - e.psi).abs() < 1e-14 || (t.psi - e.psi - PI).abs() < 1e-14);

        let axis = Phantom::new(vec![
            Ellipse::new(Vec2::zeros(), 0.8, 0.3, 0.0, 1.0).unwrap()
        ])
        .unwrap();
        let rot = transform_phantom(&GroupElement::se2(Vec2::zeros(), 0.6), &axis).components()[0];
        assert!((rot.psi - 0.6).abs() < 1e-14 || (rot.psi - 0.6 - PI).abs() < 1e-14);

        let d = GroupElement::aff(Vec2::zeros(), Mat2::new(2.0, 0.0, 0.0, 1.0)).unwrap();
        let disc = Phantom::new(vec![unit_disc()]).unwrap();
        let st = transform_phantom(&d, &disc).components()[0];
        assert!((st.a - 2.0).abs() < 1e-14 && (st.b - 1.0).abs() < 1e-14);
    }

    #[test]
    fn intertwining_both_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Phantom::ring(
            Ellipse::new(Vec2::new(0.1, -0.05), 0.9, 0.6, 0.3, 1.0).unwrap(),
            Ellipse::new(Vec2::new(0.1, -0.05), 0.5, 0.4, 1.9, -1.0).unwrap(),
        );
        for id in [GroupId::SE2, GroupId::AffPlus2] {
            for _ in 0..100 {
                let g = sample_group(id, &SamplingRanges::default(), &mut rng);
                let gp = transform_phantom(&g, &p);
                for _ in 0..20 {
                    let v = PointY::new(rng.random_range(-1.5..1.5), rng.random_range(0.0..TAU));
                    let lhs = radon_phantom(&gp, v);
                    let rhs = multiplier_y(&g, v) * radon_phantom(&p, act_y_inv(&g, v));
                    assert!((lhs - rhs).abs() < 1e-10, "{id:?}: {lhs} vs {rhs}");
                }
            }
        }
    }

    #[test]
    fn mass_is_angle_independent() {
        let p = ring().union(
            &Phantom::new(vec![
                Ellipse::new(Vec2::new(0.3, 0.1), 0.3, 0.1, 0.5, 2.0).unwrap()
            ])
            .unwrap(),
        );
        let rs = linspace(-2.0, 2.0, 200_001);
        let dr = rs[1] - rs[0];
        let mass = |phi: f64| {
            let vals: Vec<f64> = rs
                .iter()
                .map(|&r| radon_phantom(&p, PointY::new(r, phi)))
                .collect();
            dr * (vals.iter().sum::<f64>() - 0.5 * (vals[0] + vals[vals.len() - 1]))
        };
        let m0 = mass(0.0);
        for phi in [0.4, 1.3, 2.9, 5.0] {
            assert!((mass(phi) / m0 - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn raster_radon_zero_and_constant() {
        let layout = GridLayout::square(64, 1.0).unwrap();
        let zero = RasterImage::zeros(layout);
        assert_eq!(radon_raster(&zero, PointY::new(0.2, 1.0)), 0.0);
        let ones = RasterImage::new(layout, vec![1.0; layout.len()]).unwrap();
        let chord = radon_raster(&ones, PointY::new(0.0, 0.0));
        let side = 2.0;
        assert!(((chord - side) / side).abs() < 2.0 / 64.0, "{chord}");
        // misses the image entirely
        assert_eq!(radon_raster(&ones, PointY::new(3.0, 0.3)), 0.0);
    }

    #[test]
    fn raster_disc_matches_analytic() {
        let layout = GridLayout::square(256, 1.25).unwrap();
        let disc = Phantom::new(vec![unit_disc()]).unwrap();
        let img = RasterImage::from_phantom(layout, 4, &disc);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            // stay away from grazing rays where the chord length has unbounded slope
            let v = PointY::new(rng.random_range(-0.9..0.9), rng.random_range(0.0..TAU));
            worst = worst.max((radon_raster(&img, v) - radon_phantom(&disc, v)).abs());
        }
        assert!(worst < 3.0 * layout.pixel_size, "worst {worst}");
    }

    #[test]
    fn sinogram_csv_header() {
        let s = SensorSet {
            points: vec![PointY::new(0.5, 0.25)],
        };
        let mut buf = Vec::new();
        write_sinogram_csv(&mut buf, &s, &[2.0]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "r,phi,value\n0.5,0.25,2\n");
    }
}
