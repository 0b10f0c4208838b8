use std::sync::Arc;

use rand::Rng;

use super::{
    collocation_volume, envelope, knn, randn, Ctx, KernelNet, Locations, PointCloudFeature,
};
use crate::actions::{act_y_inv, jacobian_det_y, multiplier_y, PointY};
use crate::error::{usage, Result};
use crate::group::{angle_dist, dist_g, log_coords, DistanceWeights, GroupElement, GroupId};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Geometry of the lifting layer for one batch: neighbours, kernel-network
/// inputs and the fixed per-pair factors.
#[derive(Clone, Debug)]
pub struct LiftPlan {
    pub idx: Arc<Vec<usize>>,
    pub inputs: Tensor,
    pub factor: Arc<Vec<f64>>,
    pub outputs: usize,
}

pub const LIFT_INPUTS: usize = 3;

/// Everything the lifting layer needs about the pair `(g, v)`, all computed
/// from `ṽ = π_Y[g]⁻¹(v)`: the distance used for neighbour selection and the
/// envelope, the kernel-network input, and the factor
/// `envelope · p_Y[g](v)⁻¹ · |det Dπ_Y[g⁻¹](v)|`.
pub(crate) fn lift_pair(
    g: &GroupElement,
    v: PointY,
    radius: f64,
    angular_scale: f64,
) -> (f64, [f64; 3], f64) {
    let vt = act_y_inv(g, v);
    let da = angle_dist(vt.phi, 0.0);
    let d = (vt.r * vt.r + angular_scale * angular_scale * da * da).sqrt();
    let input = [vt.r / radius, vt.phi.cos(), vt.phi.sin()];
    let factor = envelope(d, radius) / multiplier_y(g, v) * jacobian_det_y(&g.inverse(), v).abs();
    (d, input, factor)
}

impl LiftPlan {
    pub fn build(
        sensors: &[PointY],
        points: &[GroupElement],
        k: usize,
        radius: f64,
        angular_scale: f64,
    ) -> Result<Self> {
        let idx = knn(points, sensors, k, |g, v| {
            lift_pair(g, *v, radius, angular_scale).0
        })?;
        let mut inputs = Vec::with_capacity(idx.len() * LIFT_INPUTS);
        let mut factor = Vec::with_capacity(idx.len());
        for (j, g) in points.iter().enumerate() {
            for &i in &idx[j * k..(j + 1) * k] {
                let (_, inp, f) = lift_pair(g, sensors[i], radius, angular_scale);
                inputs.extend_from_slice(&inp);
                factor.push(f);
            }
        }
        Ok(LiftPlan {
            inputs: Tensor::new(vec![idx.len(), LIFT_INPUTS], inputs)?,
            idx: Arc::new(idx),
            factor: Arc::new(factor),
            outputs: points.len(),
        })
    }
}

/// Kernel-network input for a relative element `h`: translation over the
/// envelope radius and the rotation angle as a point on the circle, plus the
/// symmetric log part for Aff⁺(2).
pub(crate) fn group_input(h: &GroupElement, radius: f64, out: &mut Vec<f64>) {
    let lc = log_coords(h);
    let v = lc.as_slice();
    let s = h.translation();
    out.push(s.x / radius);
    out.push(s.y / radius);
    out.push(v[2].cos());
    out.push(v[2].sin());
    if h.id() == GroupId::AffPlus2 {
        out.extend_from_slice(&v[3..6]);
    }
}

pub fn group_input_dim(id: GroupId) -> usize {
    match id {
        GroupId::SE2 => 4,
        GroupId::AffPlus2 => 7,
    }
}

#[derive(Clone, Debug)]
pub struct GroupPlan {
    pub idx: Arc<Vec<usize>>,
    pub inputs: Tensor,
    pub factor: Arc<Vec<f64>>,
    pub outputs: usize,
}

impl GroupPlan {
    /// Neighbours of each output among `inputs` by the left-invariant group
    /// distance; kernels see `h = gᵢ⁻¹g'`.
    pub fn build(
        inputs: &[GroupElement],
        outputs: &[GroupElement],
        k: usize,
        radius: f64,
        weights: &DistanceWeights,
    ) -> Result<Self> {
        let id = match inputs.first().or(outputs.first()) {
            Some(g) => g.id(),
            None => return usage("group plan needs points"),
        };
        let idx = knn(outputs, inputs, k, |go, gi| {
            dist_g(gi, go, weights).unwrap_or(f64::INFINITY)
        })?;
        let d_in = group_input_dim(id);
        let mut feats = Vec::with_capacity(idx.len() * d_in);
        let mut factor = Vec::with_capacity(idx.len());
        for (j, go) in outputs.iter().enumerate() {
            for &i in &idx[j * k..(j + 1) * k] {
                let h = inputs[i].between(go)?;
                group_input(&h, radius, &mut feats);
                factor.push(envelope(weights.weighted_norm(&log_coords(&h)), radius));
            }
        }
        Ok(GroupPlan {
            inputs: Tensor::new(vec![idx.len(), d_in], feats)?,
            idx: Arc::new(idx),
            factor: Arc::new(factor),
            outputs: outputs.len(),
        })
    }
}

fn mixing<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    c_out: usize,
    c_in: usize,
    basis: usize,
    k: usize,
    rng: &mut R,
) -> ParamId {
    let std = (2.0 / (c_in * basis * k) as f64).sqrt();
    store.add(
        format!("{name}.mix"),
        Tensor::new(
            vec![c_out, c_in * basis],
            randn(rng, c_out * c_in * basis, std),
        )
        .unwrap(),
    )
}

fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Ω_Y → G. Quadrature weights over the sensors are learned through a
/// softplus and start at `1/|V|`.
#[derive(Clone, Debug)]
pub struct LiftingConv {
    pub net: KernelNet,
    pub mix: ParamId,
    pub quad_raw: ParamId,
    pub channels: usize,
}

impl LiftingConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        n_sensors: usize,
        channels: usize,
        hidden: usize,
        basis: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        let net = KernelNet::new(
            store,
            &format!("{name}.kernel"),
            LIFT_INPUTS,
            hidden,
            basis,
            rng,
        );
        let mix = mixing(store, name, channels, 1, basis, 1, rng);
        let init = softplus_inverse(1.0 / n_sensors as f64);
        let quad_raw = store.add(format!("{name}.quad"), Tensor::full(&[n_sensors], init));
        let _ = k;
        LiftingConv {
            net,
            mix,
            quad_raw,
            channels,
        }
    }

    /// `y` holds one scalar per sensor and sample; output lives on `points`
    /// with Monte-Carlo weights `|Ω|/M`.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        y: &PointCloudFeature,
        plan: &LiftPlan,
        points: &[GroupElement],
        support_radius: f64,
    ) -> Result<PointCloudFeature> {
        if plan.outputs != points.len() {
            return usage("lifting plan was built for a different point set");
        }
        let inputs = ctx.tape.constant(plan.inputs.clone());
        let basis = self.net.forward(ctx, inputs)?;
        let basis = ctx.tape.scale_rows(basis, plan.factor.clone())?;
        let raw = ctx.param(self.quad_raw);
        let q = ctx.tape.softplus(raw);
        let w = ctx.param(self.mix);
        let feats = ctx.tape.point_conv(
            basis,
            y.feats,
            q,
            w,
            plan.idx.clone(),
            points.len(),
            y.samples,
        )?;
        let m = points.len();
        let quad = ctx.tape.constant(Tensor::full(
            &[m],
            collocation_volume(support_radius) / m as f64,
        ));
        Ok(PointCloudFeature {
            locations: Locations::Group(points.to_vec()),
            feats,
            quad,
            samples: y.samples,
        })
    }

    /// Weight the layer gives to the sample at `v` when producing channel
    /// values at `g`, excluding the quadrature weight of `v`. Evaluated with
    /// running batch statistics.
    pub fn pair_weight(
        &self,
        store: &ParamStore,
        g: &GroupElement,
        v: PointY,
        radius: f64,
        angular_scale: f64,
    ) -> Result<Vec<f64>> {
        let (_, input, factor) = lift_pair(g, v, radius, angular_scale);
        let mut ctx = Ctx::new(store, false);
        let x = ctx
            .tape
            .constant(Tensor::new(vec![1, LIFT_INPUTS], input.to_vec())?);
        let basis = self.net.forward(&mut ctx, x)?;
        let b = ctx.tape.value(basis).data().to_vec();
        let w = store.get(self.mix);
        let nb = b.len();
        Ok((0..self.channels)
            .map(|c| factor * (0..nb).map(|k| w.data()[c * nb + k] * b[k]).sum::<f64>())
            .collect())
    }
}

/// G → G with the canonical left-translation transform; no constraint on the
/// kernel remains.
#[derive(Clone, Debug)]
pub struct GroupConv {
    pub net: KernelNet,
    pub mix: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl GroupConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        id: GroupId,
        c_in: usize,
        c_out: usize,
        hidden: usize,
        basis: usize,
        rng: &mut R,
    ) -> Self {
        GroupConv {
            net: KernelNet::new(
                store,
                &format!("{name}.kernel"),
                group_input_dim(id),
                hidden,
                basis,
                rng,
            ),
            mix: mixing(store, name, c_out, c_in, basis, 1, rng),
            c_in,
            c_out,
        }
    }

    pub fn forward(
        &self,
        ctx: &mut Ctx,
        z: &PointCloudFeature,
        plan: &GroupPlan,
        out_points: &[GroupElement],
        support_radius: f64,
    ) -> Result<PointCloudFeature> {
        if plan.outputs != out_points.len() {
            return usage("group plan was built for a different point set");
        }
        let inputs = ctx.tape.constant(plan.inputs.clone());
        let basis = self.net.forward(ctx, inputs)?;
        let basis = ctx.tape.scale_rows(basis, plan.factor.clone())?;
        let w = ctx.param(self.mix);
        let feats = ctx.tape.point_conv(
            basis,
            z.feats,
            z.quad,
            w,
            plan.idx.clone(),
            out_points.len(),
            z.samples,
        )?;
        let m = out_points.len();
        let quad = ctx.tape.constant(Tensor::full(
            &[m],
            collocation_volume(support_radius) / m as f64,
        ));
        Ok(PointCloudFeature {
            locations: Locations::Group(out_points.to_vec()),
            feats,
            quad,
            samples: z.samples,
        })
    }
}
