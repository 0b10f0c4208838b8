//! The two transformation groups used throughout the crate.
//!
//! `SE(2) = T(2) ⋊ SO(2)` is stored as a translation plus an angle in `[0, 2π)`;
//! `Aff⁺(2) = T(2) ⋊ GL⁺(2)` as a translation plus a 2×2 matrix with positive
//! determinant. Both compose as `(s₁, L₁)·(s₂, L₂) = (s₁ + L₁s₂, L₁L₂)`.
//!
//! A global logarithmic chart feeds kernel networks and defines the
//! left-invariant distance used for neighbourhoods on the group.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix2, Vector2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Mat2 = Matrix2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroupId {
    SE2,
    AffPlus2,
}

impl GroupId {
    /// Dimension of the log chart.
    pub fn dim(self) -> usize {
        match self {
            GroupId::SE2 => 3,
            GroupId::AffPlus2 => 6,
        }
    }
}

/// Reduce an angle to `[0, 2π)`.
pub fn reduce_angle(x: f64) -> f64 {
    let r = x.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Reduce an angle to `(−π, π]`.
pub fn wrap_pi(x: f64) -> f64 {
    let r = reduce_angle(x);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Shortest angular distance, in `[0, π]`.
pub fn angle_dist(a: f64, b: f64) -> f64 {
    wrap_pi(a - b).abs()
}

pub fn rotation(gamma: f64) -> Mat2 {
    let (s, c) = gamma.sin_cos();
    Mat2::new(c, -s, s, c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GroupElement {
    Se2 { s: Vec2, gamma: f64 },
    Aff { s: Vec2, a: Mat2 },
}

impl GroupElement {
    pub fn se2(s: Vec2, gamma: f64) -> Self {
        GroupElement::Se2 {
            s,
            gamma: reduce_angle(gamma),
        }
    }

    pub fn aff(s: Vec2, a: Mat2) -> Result<Self> {
        let det = a.determinant();
        if !(det > 0.0) || !a.iter().all(|x| x.is_finite()) {
            return usage(format!("Aff+(2) element needs det(A) > 0, got {det}"));
        }
        Ok(GroupElement::Aff { s, a })
    }

    pub fn identity(id: GroupId) -> Self {
        match id {
            GroupId::SE2 => GroupElement::se2(Vec2::zeros(), 0.0),
            GroupId::AffPlus2 => GroupElement::Aff {
                s: Vec2::zeros(),
                a: Mat2::identity(),
            },
        }
    }

    pub fn id(&self) -> GroupId {
        match self {
            GroupElement::Se2 { .. } => GroupId::SE2,
            GroupElement::Aff { .. } => GroupId::AffPlus2,
        }
    }

    pub fn translation(&self) -> Vec2 {
        match *self {
            GroupElement::Se2 { s, .. } | GroupElement::Aff { s, .. } => s,
        }
    }

    /// The linear part: `R(γ)` for SE(2), `A` for Aff⁺(2).
    pub fn linear(&self) -> Mat2 {
        match *self {
            GroupElement::Se2 { gamma, .. } => rotation(gamma),
            GroupElement::Aff { a, .. } => a,
        }
    }

    pub fn det(&self) -> f64 {
        match self {
            GroupElement::Se2 { .. } => 1.0,
            GroupElement::Aff { a, .. } => a.determinant(),
        }
    }

    /// Embed into Aff⁺(2) via `(s, γ) ↦ (s, R(γ))`.
    pub fn to_affine(&self) -> Self {
        GroupElement::Aff {
            s: self.translation(),
            a: self.linear(),
        }
    }

    pub fn compose(&self, other: &GroupElement) -> Result<GroupElement> {
        match (*self, *other) {
            (GroupElement::Se2 { s: s1, gamma: g1 }, GroupElement::Se2 { s: s2, gamma: g2 }) => {
                Ok(GroupElement::se2(s1 + rotation(g1) * s2, g1 + g2))
            }
            (GroupElement::Aff { s: s1, a: a1 }, GroupElement::Aff { s: s2, a: a2 }) => {
                Ok(GroupElement::Aff {
                    s: s1 + a1 * s2,
                    a: a1 * a2,
                })
            }
            _ => usage("cannot compose elements of different groups"),
        }
    }

    pub fn inverse(&self) -> GroupElement {
        match *self {
            GroupElement::Se2 { s, gamma } => GroupElement::se2(-(rotation(-gamma) * s), -gamma),
            GroupElement::Aff { s, a } => {
                let inv = inverse2(&a);
                GroupElement::Aff {
                    s: -(inv * s),
                    a: inv,
                }
            }
        }
    }

    /// `self⁻¹ · other`, the relative element used by group convolutions.
    pub fn between(&self, other: &GroupElement) -> Result<GroupElement> {
        self.inverse().compose(other)
    }
}

pub(crate) fn inverse2(a: &Mat2) -> Mat2 {
    let det = a.determinant();
    Mat2::new(a[(1, 1)], -a[(0, 1)], -a[(1, 0)], a[(0, 0)]) / det
}

/// Fixed-capacity coordinate vector for the log chart (3 for SE(2), 6 for Aff⁺(2)).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogCoords {
    v: [f64; 6],
    dim: usize,
}

impl LogCoords {
    pub fn new(values: &[f64]) -> Result<Self> {
        if values.len() != 3 && values.len() != 6 {
            return usage(format!(
                "log coordinates have 3 or 6 entries, got {}",
                values.len()
            ));
        }
        let mut v = [0.0; 6];
        v[..values.len()].copy_from_slice(values);
        Ok(LogCoords {
            v,
            dim: values.len(),
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.v[..self.dim]
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

// sin θ / θ and (1 − cos θ) / θ, with series near zero.
fn se2_v_coeffs(theta: f64) -> (f64, f64) {
    if theta.abs() < 1e-3 {
        let t2 = theta * theta;
        let a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0;
        let b = theta * (0.5 - t2 / 24.0 + t2 * t2 / 720.0 - t2 * t2 * t2 / 40320.0);
        (a, b)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta)
    }
}

/// Eigen-decomposition of a symmetric 2×2 matrix `[[p, q], [q, r]]`:
/// returns `(λ_small, λ_large, angle of the λ_small eigenvector)`.
pub(crate) fn sym_eig2(p: f64, q: f64, r: f64) -> (f64, f64, f64) {
    let mean = 0.5 * (p + r);
    let half = 0.5 * (p - r);
    let rad = half.hypot(q);
    let lo = mean - rad;
    let hi = mean + rad;
    // eigenvector of lo: angle ψ with tan 2ψ = 2q/(p − r), shifted by π/2
    let psi = if rad == 0.0 {
        0.0
    } else {
        0.5 * (2.0 * q).atan2(p - r) + 0.5 * PI
    };
    (lo, hi, psi)
}

/// Apply a scalar function to a symmetric 2×2 matrix via the divided-difference
/// form `f(S) = f(λ₂)I + [f(λ₁) − f(λ₂)]/(λ₁ − λ₂)·(S − λ₂I)`.
fn sym_fn2(s: &Mat2, f: impl Fn(f64) -> f64, divided: impl Fn(f64, f64) -> f64) -> Mat2 {
    let p = s[(0, 0)];
    let q = 0.5 * (s[(0, 1)] + s[(1, 0)]);
    let r = s[(1, 1)];
    let (l1, l2, _) = sym_eig2(p, q, r);
    let dd = divided(l1, l2);
    let sym = Mat2::new(p, q, q, r);
    Mat2::identity() * f(l2) + (sym - Mat2::identity() * l2) * dd
}

fn log_divided(l1: f64, l2: f64) -> f64 {
    // (ln l1 − ln l2)/(l1 − l2) with l1 = l2(1 + x)
    let x = (l1 - l2) / l2;
    if x.abs() < 1e-8 {
        (1.0 - 0.5 * x + x * x / 3.0) / l2
    } else {
        x.ln_1p() / (l1 - l2)
    }
}

fn exp_divided(m1: f64, m2: f64) -> f64 {
    let d = m1 - m2;
    if d.abs() < 1e-8 {
        m2.exp() * (1.0 + 0.5 * d + d * d / 6.0)
    } else {
        m2.exp() * d.exp_m1() / d
    }
}

const SQRT2: f64 = std::f64::consts::SQRT_2;

/// Global chart. SE(2): `(V(θ)⁻¹s, θ)` with `θ ∈ (−π, π]` (the closed-form se(2)
/// logarithm; `V(π)` is still invertible so the branch at `θ = π` is well defined).
/// Aff⁺(2): polar decomposition `A = R(θ)S`, coordinates `(s, θ, L₁₁, √2·L₁₂, L₂₂)`
/// with `L = log S`; the √2 makes the Euclidean norm the Frobenius norm of `L`.
pub fn log_coords(g: &GroupElement) -> LogCoords {
    match *g {
        GroupElement::Se2 { s, gamma } => {
            let theta = wrap_pi(gamma);
            let (a, b) = se2_v_coeffs(theta);
            let n = a * a + b * b;
            let rho = Vec2::new(a * s.x + b * s.y, -b * s.x + a * s.y) / n;
            LogCoords {
                v: [rho.x, rho.y, theta, 0.0, 0.0, 0.0],
                dim: 3,
            }
        }
        GroupElement::Aff { s, a } => {
            let theta = (a[(1, 0)] - a[(0, 1)]).atan2(a[(0, 0)] + a[(1, 1)]);
            let sym = rotation(-theta) * a;
            let l = sym_fn2(&sym, f64::ln, log_divided);
            LogCoords {
                v: [
                    s.x,
                    s.y,
                    theta,
                    l[(0, 0)],
                    SQRT2 * 0.5 * (l[(0, 1)] + l[(1, 0)]),
                    l[(1, 1)],
                ],
                dim: 6,
            }
        }
    }
}

pub fn from_log(v: &LogCoords, id: GroupId) -> Result<GroupElement> {
    if v.dim() != id.dim() {
        return usage(format!(
            "{id:?} log chart has dimension {}, got {}",
            id.dim(),
            v.dim()
        ));
    }
    let x = v.as_slice();
    match id {
        GroupId::SE2 => {
            let theta = x[2];
            let (a, b) = se2_v_coeffs(theta);
            let s = Vec2::new(a * x[0] - b * x[1], b * x[0] + a * x[1]);
            Ok(GroupElement::se2(s, theta))
        }
        GroupId::AffPlus2 => {
            let off = x[4] / SQRT2;
            let l = Mat2::new(x[3], off, off, x[5]);
            let sym = sym_fn2(&l, f64::exp, exp_divided);
            GroupElement::aff(Vec2::new(x[0], x[1]), rotation(x[2]) * sym)
        }
    }
}

/// Diagonal weights of the group distance: one for translation coordinates,
/// one for angular and log-scale coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceWeights {
    pub translation: f64,
    pub angular: f64,
}

impl Default for DistanceWeights {
    fn default() -> Self {
        DistanceWeights {
            translation: 1.0,
            angular: 1.0,
        }
    }
}

impl DistanceWeights {
    /// `‖W · v‖₂` for a log-coordinate vector.
    pub fn weighted_norm(&self, v: &LogCoords) -> f64 {
        let x = v.as_slice();
        let mut acc = 0.0;
        for (i, xi) in x.iter().enumerate() {
            let w = if i < 2 {
                self.translation
            } else {
                self.angular
            };
            acc += (w * xi) * (w * xi);
        }
        acc.sqrt()
    }
}

/// Left-invariant distance `‖W · log(g⁻¹h)‖₂`.
pub fn dist_g(g: &GroupElement, h: &GroupElement, w: &DistanceWeights) -> Result<f64> {
    if g == h {
        return Ok(0.0);
    }
    let rel = g.between(h)?;
    Ok(w.weighted_norm(&log_coords(&rel)))
}

/// Coset representative `g_u` mapping the origin of Ω_X to `u`, with unit linear part.
pub fn coset_rep_x(u: Vec2, id: GroupId) -> GroupElement {
    match id {
        GroupId::SE2 => GroupElement::se2(u, 0.0),
        GroupId::AffPlus2 => GroupElement::Aff {
            s: u,
            a: Mat2::identity(),
        },
    }
}

/// Ranges for random group elements. The linear part of Aff⁺(2) is
/// `R(γ)·diag(σ₁, σ₂)·[[1, τ], [0, 1]]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingRanges {
    /// Each translation coordinate is drawn from this interval.
    pub translation: (f64, f64),
    pub angle: (f64, f64),
    pub scale: (f64, f64),
    pub shear: (f64, f64),
}

impl Default for SamplingRanges {
    fn default() -> Self {
        SamplingRanges {
            translation: (-0.3, 0.3),
            angle: (0.0, TAU),
            scale: (0.75, 1.25),
            shear: (-0.5, 0.5),
        }
    }
}

impl SamplingRanges {
    pub fn linear_only(self) -> Self {
        SamplingRanges {
            translation: (0.0, 0.0),
            ..self
        }
    }
}

pub(crate) fn uniform<R: Rng + ?Sized>(rng: &mut R, range: (f64, f64)) -> f64 {
    let (lo, hi) = range;
    if hi <= lo {
        lo
    } else {
        lo + (hi - lo) * rng.random::<f64>()
    }
}

fn sample_linear<R: Rng + ?Sized>(rng: &mut R, ranges: &SamplingRanges) -> Mat2 {
    let gamma = uniform(rng, ranges.angle);
    let s1 = uniform(rng, ranges.scale);
    let s2 = uniform(rng, ranges.scale);
    let tau = uniform(rng, ranges.shear);
    rotation(gamma) * Mat2::new(s1, 0.0, 0.0, s2) * Mat2::new(1.0, tau, 0.0, 1.0)
}

pub fn sample_group<R: Rng + ?Sized>(
    id: GroupId,
    ranges: &SamplingRanges,
    rng: &mut R,
) -> GroupElement {
    let s = Vec2::new(
        uniform(rng, ranges.translation),
        uniform(rng, ranges.translation),
    );
    match id {
        GroupId::SE2 => GroupElement::se2(s, uniform(rng, ranges.angle)),
        GroupId::AffPlus2 => {
            let a = sample_linear(rng, ranges);
            GroupElement::Aff { s, a }
        }
    }
}

/// Random elements of the stabilizer of the origin of Ω_X: pure rotations for
/// SE(2), `(0, A)` with `A` drawn as in [`sample_group`] for Aff⁺(2).
pub fn sample_stabilizer<R: Rng + ?Sized>(id: GroupId, n: usize, rng: &mut R) -> Vec<GroupElement> {
    let ranges = SamplingRanges::default().linear_only();
    (0..n).map(|_| sample_group(id, &ranges, rng)).collect()
}

impl TryFrom<&[f64]> for LogCoords {
    type Error = Error;
    fn try_from(v: &[f64]) -> Result<Self> {
        LogCoords::new(v)
    }
}
