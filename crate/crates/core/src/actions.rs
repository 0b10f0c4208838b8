//! Group actions on the image plane Ω_X = ℝ² and on sinogram space
//! Ω_Y = ℝ × [0, 2π), together with the range multipliers and Jacobians that
//! turn them into generalized domain transforms
//! `(𝒫[g]f)(v) = p[g](v)·f(π[g]⁻¹(v))`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{usage, Result};
use crate::group::{inverse2, reduce_angle, GroupElement, GroupId, Mat2, Vec2};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointX(pub Vec2);

impl PointX {
    pub fn new(x: f64, y: f64) -> Self {
        PointX(Vec2::new(x, y))
    }
}

/// A line `{u : u·(cos φ, sin φ) = r}`; `phi` is kept in `[0, 2π)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointY {
    pub r: f64,
    pub phi: f64,
}

impl PointY {
    pub fn new(r: f64, phi: f64) -> Self {
        PointY {
            r,
            phi: reduce_angle(phi),
        }
    }

    pub fn normal(&self) -> Vec2 {
        let (s, c) = self.phi.sin_cos();
        Vec2::new(c, s)
    }
}

pub fn act_x(g: &GroupElement, u: PointX) -> PointX {
    PointX(g.linear() * u.0 + g.translation())
}

pub fn act_x_inv(g: &GroupElement, u: PointX) -> PointX {
    match *g {
        GroupElement::Se2 { s, gamma } => PointX(crate::group::rotation(-gamma) * (u.0 - s)),
        GroupElement::Aff { s, a } => PointX(inverse2(&a) * (u.0 - s)),
    }
}

/// `det Dπ_X[g](u)`; constant in `u` for both groups.
pub fn jacobian_det_x(g: &GroupElement, _u: PointX) -> f64 {
    g.det()
}

/// `α(A, φ) = ‖Aᵀφ⃗‖₂` and the angle of `Aᵀφ⃗`, recovered on the full circle.
pub fn alpha_theta(a: &Mat2, phi: f64) -> (f64, f64) {
    let (s, c) = phi.sin_cos();
    let wx = a[(0, 0)] * c + a[(1, 0)] * s;
    let wy = a[(0, 1)] * c + a[(1, 1)] * s;
    (wx.hypot(wy), reduce_angle(wy.atan2(wx)))
}

pub fn act_y(g: &GroupElement, v: PointY) -> PointY {
    match *g {
        GroupElement::Se2 { s, gamma } => {
            let phi = v.phi + gamma;
            let (sn, cs) = phi.sin_cos();
            PointY::new(v.r + s.x * cs + s.y * sn, phi)
        }
        GroupElement::Aff { s, a } => {
            let inv = inverse2(&a);
            let (alpha, theta) = alpha_theta(&inv, v.phi);
            // sᵀA⁻ᵀφ⃗ = (A⁻¹s)·φ⃗
            let shift = (inv * s).dot(&v.normal());
            PointY::new((v.r + shift) / alpha, theta)
        }
    }
}

pub fn act_y_inv(g: &GroupElement, v: PointY) -> PointY {
    match *g {
        GroupElement::Se2 { s, gamma } => PointY::new(v.r - s.dot(&v.normal()), v.phi - gamma),
        GroupElement::Aff { s, a } => {
            let (alpha, theta) = alpha_theta(&a, v.phi);
            PointY::new((v.r - s.dot(&v.normal())) / alpha, theta)
        }
    }
}

/// `p_Y[g](r, φ)`: 1 for SE(2), `det(A)/α(A, φ)` for Aff⁺(2).
pub fn multiplier_y(g: &GroupElement, v: PointY) -> f64 {
    match *g {
        GroupElement::Se2 { .. } => 1.0,
        GroupElement::Aff { a, .. } => a.determinant() / alpha_theta(&a, v.phi).0,
    }
}

/// `det Dπ_Y[g](v)`: 1 for SE(2), `det(A⁻¹)/α(A⁻¹, φ)³` for Aff⁺(2).
pub fn jacobian_det_y(g: &GroupElement, v: PointY) -> f64 {
    match *g {
        GroupElement::Se2 { .. } => 1.0,
        GroupElement::Aff { a, .. } => {
            let inv = inverse2(&a);
            let alpha = alpha_theta(&inv, v.phi).0;
            inv.determinant() / (alpha * alpha * alpha)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Space {
    X,
    Y,
}

/// A point type on which both groups act, with its multiplier and Jacobian.
pub trait DomainPoint: Copy + Send + Sync + 'static {
    const SPACE: Space;
    fn act(g: &GroupElement, p: Self) -> Self;
    fn act_inv(g: &GroupElement, p: Self) -> Self;
    fn multiplier(g: &GroupElement, p: Self) -> f64;
    fn jacobian_det(g: &GroupElement, p: Self) -> f64;
}

impl DomainPoint for PointX {
    const SPACE: Space = Space::X;
    fn act(g: &GroupElement, p: Self) -> Self {
        act_x(g, p)
    }
    fn act_inv(g: &GroupElement, p: Self) -> Self {
        act_x_inv(g, p)
    }
    fn multiplier(_g: &GroupElement, _p: Self) -> f64 {
        1.0
    }
    fn jacobian_det(g: &GroupElement, p: Self) -> f64 {
        jacobian_det_x(g, p)
    }
}

impl DomainPoint for PointY {
    const SPACE: Space = Space::Y;
    fn act(g: &GroupElement, p: Self) -> Self {
        act_y(g, p)
    }
    fn act_inv(g: &GroupElement, p: Self) -> Self {
        act_y_inv(g, p)
    }
    fn multiplier(g: &GroupElement, p: Self) -> f64 {
        multiplier_y(g, p)
    }
    fn jacobian_det(g: &GroupElement, p: Self) -> f64 {
        jacobian_det_y(g, p)
    }
}

/// A closed-form signal on Ω_X or Ω_Y. `support_radius` bounds `|u|` on Ω_X and
/// `|r|` on Ω_Y outside of which the signal vanishes.
#[derive(Clone)]
pub struct AnalyticSignal<P> {
    f: Arc<dyn Fn(P) -> f64 + Send + Sync>,
    pub support_radius: f64,
}

impl<P: DomainPoint> AnalyticSignal<P> {
    pub fn new(support_radius: f64, f: impl Fn(P) -> f64 + Send + Sync + 'static) -> Self {
        AnalyticSignal {
            f: Arc::new(f),
            support_radius,
        }
    }

    pub fn eval(&self, p: P) -> f64 {
        (self.f)(p)
    }
}

/// The pair (π, p) for one group acting on one space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeneralizedDomainTransform {
    pub group: GroupId,
    pub space: Space,
}

impl GeneralizedDomainTransform {
    pub fn new(group: GroupId, space: Space) -> Self {
        GeneralizedDomainTransform { group, space }
    }

    fn check<P: DomainPoint>(&self, g: &GroupElement) -> Result<()> {
        if g.id() != self.group {
            return usage(format!(
                "transform over {:?} given a {:?} element",
                self.group,
                g.id()
            ));
        }
        if P::SPACE != self.space {
            return usage(format!(
                "transform on {:?} applied to a {:?} signal",
                self.space,
                P::SPACE
            ));
        }
        Ok(())
    }

    pub fn act<P: DomainPoint>(&self, g: &GroupElement, p: P) -> Result<P> {
        self.check::<P>(g)?;
        Ok(P::act(g, p))
    }

    pub fn act_inv<P: DomainPoint>(&self, g: &GroupElement, p: P) -> Result<P> {
        self.check::<P>(g)?;
        Ok(P::act_inv(g, p))
    }

    pub fn multiplier<P: DomainPoint>(&self, g: &GroupElement, p: P) -> Result<f64> {
        self.check::<P>(g)?;
        Ok(P::multiplier(g, p))
    }

    pub fn jacobian_det<P: DomainPoint>(&self, g: &GroupElement, p: P) -> Result<f64> {
        self.check::<P>(g)?;
        Ok(P::jacobian_det(g, p))
    }

    /// `v ↦ p[g](v)·f(π[g]⁻¹(v))`.
    pub fn transform_signal<P: DomainPoint>(
        &self,
        g: &GroupElement,
        f: &AnalyticSignal<P>,
    ) -> Result<AnalyticSignal<P>> {
        self.check::<P>(g)?;
        let inner = f.clone();
        let g = *g;
        let norm = g.linear().norm(); // Frobenius bounds the spectral norm
        let radius = g.translation().norm() + norm * f.support_radius;
        Ok(AnalyticSignal::new(radius, move |v: P| {
            P::multiplier(&g, v) * inner.eval(P::act_inv(&g, v))
        }))
    }
}

/// Free-function form of [`GeneralizedDomainTransform::transform_signal`].
pub fn transform_signal<P: DomainPoint>(
    t: &GeneralizedDomainTransform,
    g: &GroupElement,
    f: &AnalyticSignal<P>,
) -> Result<AnalyticSignal<P>> {
    t.transform_signal(g, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{angle_dist, sample_group, SamplingRanges};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI, TAU};

    fn ranges() -> SamplingRanges {
        SamplingRanges {
            translation: (-1.0, 1.0),
            ..SamplingRanges::default()
        }
    }

    fn random_y(rng: &mut ChaCha8Rng) -> PointY {
        PointY::new(rng.random_range(-1.5..1.5), rng.random_range(0.0..TAU))
    }

    fn y_close(a: PointY, b: PointY, tol: f64) -> bool {
        (a.r - b.r).abs() <= tol && angle_dist(a.phi, b.phi) <= tol
    }

    #[test]
    fn act_x_examples() {
        let g = GroupElement::se2(Vec2::new(1.0, 0.0), FRAC_PI_2);
        let u = act_x(&g, PointX::new(1.0, 0.0));
        assert!((u.0 - Vec2::new(1.0, 1.0)).norm() < 1e-15);
        let e = GroupElement::identity(GroupId::SE2);
        assert_eq!(act_x(&e, PointX::new(0.3, 0.4)), PointX::new(0.3, 0.4));
        let a = GroupElement::aff(Vec2::zeros(), Mat2::new(2.0, 0.0, 0.0, 1.0)).unwrap();
        assert_eq!(act_x(&a, PointX::new(1.0, 1.0)), PointX::new(2.0, 1.0));
    }

    #[test]
    fn act_x_inverse_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for id in [GroupId::SE2, GroupId::AffPlus2] {
            for _ in 0..200 {
                let g = sample_group(id, &ranges(), &mut rng);
                let u = PointX::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
                let back = act_x_inv(&g, act_x(&g, u));
                assert!((back.0 - u.0).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn jacobian_x_examples_and_chain_rule() {
        let g = GroupElement::se2(Vec2::new(1.0, 2.0), 0.7);
        assert_eq!(jacobian_det_x(&g, PointX::new(0.1, 0.1)), 1.0);
        let a = GroupElement::aff(Vec2::zeros(), Mat2::new(2.0, 0.0, 0.0, 3.0)).unwrap();
        assert_eq!(jacobian_det_x(&a, PointX::new(0.0, 0.0)), 6.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let g = sample_group(GroupId::AffPlus2, &ranges(), &mut rng);
            let h = sample_group(GroupId::AffPlus2, &ranges(), &mut rng);
            let u = PointX::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let lhs = jacobian_det_x(&g.compose(&h).unwrap(), u);
            let rhs = jacobian_det_x(&g, act_x(&h, u)) * jacobian_det_x(&h, u);
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn act_y_examples() {
        let g = GroupElement::se2(Vec2::new(1.0, 0.0), 0.0);
        assert!(y_close(
            act_y(&g, PointY::new(0.0, 0.0)),
            PointY::new(1.0, 0.0),
            1e-15
        ));
        let rot = GroupElement::se2(Vec2::zeros(), 0.9);
        assert!(y_close(
            act_y(&rot, PointY::new(0.4, 2.0)),
            PointY::new(0.4, 2.9),
            1e-15
        ));
        let a = GroupElement::aff(Vec2::zeros(), Mat2::new(2.0, 0.0, 0.0, 1.0)).unwrap();
        assert!(y_close(
            act_y_inv(&a, PointY::new(1.0, 0.0)),
            PointY::new(0.5, 0.0),
            1e-15
        ));
    }

    #[test]
    fn alpha_theta_examples() {
        let (al, th) = alpha_theta(&Mat2::identity(), 1.3);
        assert!((al - 1.0).abs() < 1e-15 && (th - 1.3).abs() < 1e-15);
        let d = Mat2::new(2.0, 0.0, 0.0, 1.0);
        assert_eq!(alpha_theta(&d, 0.0), (2.0, 0.0));
        let (al, th) = alpha_theta(&d, FRAC_PI_2);
        assert!((al - 1.0).abs() < 1e-15 && (th - FRAC_PI_2).abs() < 1e-15);
        // lower half plane: arccos alone would give the mirrored angle
        let (_, th) = alpha_theta(&d, 1.5 * PI);
        assert!((th - 1.5 * PI).abs() < 1e-12);
    }

    #[test]
    fn multiplier_examples() {
        let g = GroupElement::se2(Vec2::new(0.2, 0.1), 1.0);
        assert_eq!(multiplier_y(&g, PointY::new(0.3, 0.2)), 1.0);
        let a = GroupElement::aff(Vec2::zeros(), Mat2::new(2.0, 0.0, 0.0, 1.0)).unwrap();
        assert!((multiplier_y(&a, PointY::new(0.0, 0.0)) - 1.0).abs() < 1e-15);
        assert!((multiplier_y(&a, PointY::new(0.0, FRAC_PI_2)) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn y_actions_are_left_actions_with_cocycle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for id in [GroupId::SE2, GroupId::AffPlus2] {
            for _ in 0..200 {
                let g = sample_group(id, &ranges(), &mut rng);
                let h = sample_group(id, &ranges(), &mut rng);
                let v = random_y(&mut rng);
                let gh = g.compose(&h).unwrap();
                assert!(y_close(act_y(&gh, v), act_y(&g, act_y(&h, v)), 1e-10));
                assert!(y_close(act_y_inv(&g, act_y(&g, v)), v, 1e-10));
                assert!(y_close(act_y(&g, act_y_inv(&g, v)), v, 1e-10));
                let lhs = multiplier_y(&gh, v);
                let rhs = multiplier_y(&g, v) * multiplier_y(&h, act_y_inv(&g, v));
                assert!((lhs - rhs).abs() < 1e-10);
                assert!(multiplier_y(&g, v) > 0.0);
            }
            let e = GroupElement::identity(id);
            assert_eq!(multiplier_y(&e, PointY::new(0.2, 1.0)), 1.0);
        }
    }

    #[test]
    fn jacobian_y_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = 1e-6;
        for _ in 0..50 {
            let g = sample_group(GroupId::AffPlus2, &ranges(), &mut rng);
            let v = random_y(&mut rng);
            let f = |r: f64, p: f64| act_y(&g, PointY { r, phi: p });
            let dr_plus = f(v.r + h, v.phi);
            let dr_minus = f(v.r - h, v.phi);
            let dp_plus = f(v.r, v.phi + h);
            let dp_minus = f(v.r, v.phi - h);
            let j11 = (dr_plus.r - dr_minus.r) / (2.0 * h);
            let j21 = crate::group::wrap_pi(dr_plus.phi - dr_minus.phi) / (2.0 * h);
            let j12 = (dp_plus.r - dp_minus.r) / (2.0 * h);
            let j22 = crate::group::wrap_pi(dp_plus.phi - dp_minus.phi) / (2.0 * h);
            let det = j11 * j22 - j12 * j21;
            let exact = jacobian_det_y(&g, v);
            assert!(
                (det - exact).abs() < 1e-6 * exact.abs().max(1.0),
                "{det} vs {exact}"
            );
        }
    }

    #[test]
    fn se2_is_embedded_in_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..200 {
            let g = sample_group(GroupId::SE2, &ranges(), &mut rng);
            let a = g.to_affine();
            let u = PointX::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            assert!((act_x(&g, u).0 - act_x(&a, u).0).norm() < 1e-12);
            let v = random_y(&mut rng);
            assert!(y_close(act_y(&g, v), act_y(&a, v), 1e-12));
            assert!(y_close(act_y_inv(&g, v), act_y_inv(&a, v), 1e-12));
            assert!((multiplier_y(&a, v) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn signal_representation_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let fy = AnalyticSignal::new(3.0, |v: PointY| {
            (-v.r * v.r).exp() * (1.2 + 0.5 * v.phi.cos() + 0.2 * (2.0 * v.phi).sin())
        });
        let fx = AnalyticSignal::new(3.0, |u: PointX| {
            (-(u.0.x - 0.2).powi(2) - 2.0 * u.0.y.powi(2)).exp()
        });
        for id in [GroupId::SE2, GroupId::AffPlus2] {
            let ty = GeneralizedDomainTransform::new(id, Space::Y);
            let tx = GeneralizedDomainTransform::new(id, Space::X);
            let e = GroupElement::identity(id);
            let same = ty.transform_signal(&e, &fy).unwrap();
            for _ in 0..100 {
                let v = random_y(&mut rng);
                assert!((same.eval(v) - fy.eval(v)).abs() < 1e-14);
            }
            for _ in 0..100 {
                let g = sample_group(id, &ranges(), &mut rng);
                let h = sample_group(id, &ranges(), &mut rng);
                let gh = g.compose(&h).unwrap();
                let v = random_y(&mut rng);
                let lhs = ty.transform_signal(&gh, &fy).unwrap().eval(v);
                let rhs = ty
                    .transform_signal(&g, &ty.transform_signal(&h, &fy).unwrap())
                    .unwrap()
                    .eval(v);
                assert!((lhs - rhs).abs() < 1e-10, "{lhs} {rhs}");
                let round = ty
                    .transform_signal(&g, &ty.transform_signal(&g.inverse(), &fy).unwrap())
                    .unwrap()
                    .eval(v);
                assert!((round - fy.eval(v)).abs() < 1e-10);

                let u = PointX::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let lhs = tx.transform_signal(&gh, &fx).unwrap().eval(u);
                let rhs = tx
                    .transform_signal(&g, &tx.transform_signal(&h, &fx).unwrap())
                    .unwrap()
                    .eval(u);
                assert!((lhs - rhs).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn transform_rejects_wrong_space_or_group() {
        let fy = AnalyticSignal::new(1.0, |v: PointY| v.r);
        let tx = GeneralizedDomainTransform::new(GroupId::SE2, Space::X);
        assert!(tx
            .transform_signal(&GroupElement::identity(GroupId::SE2), &fy)
            .is_err());
        let ty = GeneralizedDomainTransform::new(GroupId::SE2, Space::Y);
        assert!(ty
            .transform_signal(&GroupElement::identity(GroupId::AffPlus2), &fy)
            .is_err());
    }
}
