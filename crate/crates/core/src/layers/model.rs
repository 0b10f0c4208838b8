use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    downsample_indices, global_pool, sample_orbit_points, select_points, BatchNorm, Ctx, GroupConv,
    GroupPlan, LiftPlan, LiftingConv, Linear, Locations, PointCloudFeature,
};
use crate::actions::PointY;
use crate::error::{usage, Error, Result};
use crate::group::{DistanceWeights, GroupElement, GroupId};
use crate::tensor::{ParamId, ParamStore, Tensor, Var};
use crate::tomo::{measure, transform_phantom, Phantom, SensorSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Equivariant,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Regression,
    Classification,
}

/// Architecture description, serialised next to every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub kind: ModelKind,
    pub group: GroupId,
    /// Channels after lifting; each block after the first doubles them.
    pub channels: usize,
    pub k: usize,
    pub lift_k: usize,
    pub basis: usize,
    pub hidden: usize,
    pub lift_points: usize,
    /// When above 1, collocation points come in orbits of this many copies
    /// rotated about the origin by multiples of `2π/rotation_orbits`, and
    /// downsampling keeps or drops whole orbits. `lift_points` must be a
    /// multiple of it.
    pub rotation_orbits: usize,
    /// Collocation draws averaged per prediction in eval mode.
    pub eval_draws: usize,
    pub lift_radius: f64,
    /// Envelope radius of each residual block.
    pub radii: Vec<f64>,
    pub angular_scale: f64,
    pub support_radius: f64,
    pub distance: DistanceWeights,
    /// Also feed every measurement at its mirrored coordinates `(−r, φ+π)`,
    /// which describe the same line.
    pub mirror_sensors: bool,
    pub head: HeadKind,
    pub outputs: usize,
    /// Hidden width of the fully-connected baseline; 0 picks the width whose
    /// parameter count is closest to the equivariant model's.
    pub mlp_hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            kind: ModelKind::Equivariant,
            group: GroupId::SE2,
            channels: 8,
            k: 27,
            lift_k: 27,
            basis: 16,
            hidden: 32,
            lift_points: 512,
            rotation_orbits: 1,
            eval_draws: 1,
            lift_radius: 1.0,
            radii: vec![1.0, 1.4, 2.0],
            angular_scale: 1.0,
            support_radius: 1.2,
            distance: DistanceWeights::default(),
            mirror_sensors: true,
            head: HeadKind::Regression,
            outputs: 2,
            mlp_hidden: 0,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.channels == 0 || self.basis == 0 || self.hidden == 0 || self.outputs == 0 {
            return bad("channels, basis, hidden and outputs must be positive");
        }
        if self.radii.len() != 3 {
            return bad("radii needs one entry per residual block (3)");
        }
        if self.k == 0 || self.lift_k == 0 || self.eval_draws == 0 {
            return bad("neighbour counts and eval_draws must be positive");
        }
        if self.rotation_orbits == 0 || !self.lift_points.is_multiple_of(self.rotation_orbits) {
            return bad("lift_points must be a positive multiple of rotation_orbits");
        }
        if self.k > self.block_points()[2] {
            return bad("k exceeds the point count of the last block");
        }
        if [self.lift_radius, self.angular_scale, self.support_radius]
            .iter()
            .chain(&self.radii)
            .any(|r| !(*r > 0.0))
        {
            return bad("radii and scales must be positive");
        }
        Ok(())
    }

    pub fn block_channels(&self) -> [usize; 3] {
        [self.channels, 2 * self.channels, 4 * self.channels]
    }

    /// Collocation points seen by each residual block.
    pub fn block_points(&self) -> [usize; 3] {
        let j = self.rotation_orbits.max(1);
        let b0 = self.lift_points / j;
        let b1 = b0.div_ceil(2);
        [b0 * j, b1 * j, b1.div_ceil(2) * j]
    }
}

/// Common surface of the equivariant network and the dense baseline. Outputs
/// are in normalised target units; [`Model::denormalize`] maps them back.
pub trait Model {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn arch(&self) -> &ArchConfig;
    fn sensors(&self) -> &SensorSet;
    /// `inputs: [S, |V|]` measurements; returns `[S, outputs]`.
    fn forward(&self, ctx: &mut Ctx, inputs: &Tensor, rng: &mut dyn RngCore) -> Result<Var>;
    fn target_stats(&self) -> (ParamId, ParamId);

    fn set_target_stats(&mut self, mean: &[f64], std: &[f64]) -> Result<()> {
        let (m, s) = self.target_stats();
        if mean.len() != self.arch().outputs
            || std.len() != mean.len()
            || std.iter().any(|v| !(*v > 0.0))
        {
            return usage("target statistics must match the outputs and have positive spread");
        }
        self.store_mut().get_mut(m).data_mut().copy_from_slice(mean);
        self.store_mut().get_mut(s).data_mut().copy_from_slice(std);
        Ok(())
    }

    fn normalize(&self, targets: &[f64]) -> Vec<f64> {
        let (m, s) = self.target_stats();
        let (m, s) = (self.store().get(m).data(), self.store().get(s).data());
        let o = m.len();
        targets
            .iter()
            .enumerate()
            .map(|(i, t)| (t - m[i % o]) / s[i % o])
            .collect()
    }

    fn denormalize(&self, outputs: &[f64]) -> Vec<f64> {
        let (m, s) = self.target_stats();
        let (m, s) = (self.store().get(m).data(), self.store().get(s).data());
        let o = m.len();
        outputs
            .iter()
            .enumerate()
            .map(|(i, t)| t * s[i % o] + m[i % o])
            .collect()
    }

    /// Eval-mode prediction in target units.
    fn predict(&self, inputs: &Tensor, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let mut ctx = Ctx::new(self.store(), false);
        let out = self.forward(&mut ctx, inputs, rng)?;
        Ok(self.denormalize(ctx.tape.value(out).data()))
    }
}

fn target_buffers(store: &mut ParamStore, outputs: usize) -> (ParamId, ParamId) {
    (
        store.add_buffer("target.mean", Tensor::zeros(&[outputs])),
        store.add_buffer("target.std", Tensor::full(&[outputs], 1.0)),
    )
}

fn check_inputs(inputs: &Tensor, n: usize) -> Result<usize> {
    let (s, v) = inputs.dims2()?;
    if v != n || s == 0 {
        return usage(format!(
            "expected [S, {n}] measurements, got {:?}",
            inputs.shape()
        ));
    }
    Ok(s)
}

/// Three group convolutions with batch norm and ReLU on one point set, plus
/// a skip connection that is linear when the channel count changes.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub convs: [GroupConv; 3],
    pub norms: [BatchNorm; 3],
    pub skip: Option<Linear>,
}

impl ResidualBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        arch: &ArchConfig,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        let conv = |store: &mut ParamStore, i: usize, ci: usize, rng: &mut R| {
            GroupConv::new(
                store,
                &format!("{name}.conv{i}"),
                arch.group,
                ci,
                c_out,
                arch.hidden,
                arch.basis,
                rng,
            )
        };
        let c0 = conv(store, 0, c_in, rng);
        let c1 = conv(store, 1, c_out, rng);
        let c2 = conv(store, 2, c_out, rng);
        let norms = [0, 1, 2].map(|i| BatchNorm::new(store, &format!("{name}.bn{i}"), c_out));
        let skip =
            (c_in != c_out).then(|| Linear::new(store, &format!("{name}.skip"), c_in, c_out, rng));
        ResidualBlock {
            convs: [c0, c1, c2],
            norms,
            skip,
        }
    }

    pub fn forward(
        &self,
        ctx: &mut Ctx,
        z: &PointCloudFeature,
        plan: &GroupPlan,
        support_radius: f64,
    ) -> Result<PointCloudFeature> {
        let Locations::Group(points) = &z.locations else {
            return usage("residual blocks act on features over the group");
        };
        let mut h = z.clone();
        for (conv, bn) in self.convs.iter().zip(&self.norms) {
            let mut next = conv.forward(ctx, &h, plan, points, support_radius)?;
            next.feats = bn.forward(ctx, next.feats)?;
            next.feats = ctx.tape.relu(next.feats);
            h = next;
        }
        let skip = match &self.skip {
            Some(lin) => lin.forward(ctx, z.feats)?,
            None => z.feats,
        };
        h.feats = ctx.tape.add(h.feats, skip)?;
        Ok(h)
    }
}

/// Lifting convolution, three residual blocks separated by halving
/// downsampling steps, global pooling and a linear head.
#[derive(Clone, Debug)]
pub struct EquivariantModel {
    pub arch: ArchConfig,
    pub store: ParamStore,
    pub sensors: SensorSet,
    inputs: Vec<PointY>,
    pub lift: LiftingConv,
    pub lift_bn: BatchNorm,
    pub blocks: Vec<ResidualBlock>,
    pub head: Linear,
    target: (ParamId, ParamId),
}

impl EquivariantModel {
    pub fn new(arch: &ArchConfig, sensors: &SensorSet, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut inputs = sensors.points.clone();
        if arch.mirror_sensors {
            inputs.extend(
                sensors
                    .points
                    .iter()
                    .map(|v| PointY::new(-v.r, v.phi + std::f64::consts::PI)),
            );
        }
        if arch.lift_k > inputs.len() {
            return Err(Error::Config(format!(
                "lift_k = {} exceeds the {} sensor points",
                arch.lift_k,
                inputs.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ch = arch.block_channels();
        let lift = LiftingConv::new(
            &mut store,
            "lift",
            inputs.len(),
            ch[0],
            arch.hidden,
            arch.basis,
            arch.lift_k,
            &mut rng,
        );
        let lift_bn = BatchNorm::new(&mut store, "lift.bn", ch[0]);
        let blocks = vec![
            ResidualBlock::new(&mut store, "block0", arch, ch[0], ch[0], &mut rng),
            ResidualBlock::new(&mut store, "block1", arch, ch[0], ch[1], &mut rng),
            ResidualBlock::new(&mut store, "block2", arch, ch[1], ch[2], &mut rng),
        ];
        let head = Linear::new(&mut store, "head", ch[2], arch.outputs, &mut rng);
        let target = target_buffers(&mut store, arch.outputs);
        Ok(EquivariantModel {
            arch: arch.clone(),
            store,
            sensors: sensors.clone(),
            inputs,
            lift,
            lift_bn,
            blocks,
            head,
            target,
        })
    }

    /// Sensor coordinates seen by the lifting layer, mirrored copies included.
    pub fn input_points(&self) -> &[PointY] {
        &self.inputs
    }

    fn expand(&self, inputs: &Tensor) -> Result<Tensor> {
        let s = check_inputs(inputs, self.sensors.len())?;
        let n = self.sensors.len();
        let mut out = Vec::with_capacity(s * self.inputs.len());
        for row in inputs.data().chunks(n) {
            out.extend_from_slice(row);
            if self.arch.mirror_sensors {
                out.extend_from_slice(row);
            }
        }
        Tensor::new(vec![s * self.inputs.len(), 1], out)
    }

    /// Pooled invariant features `[S, C]` before the head.
    pub fn features(&self, ctx: &mut Ctx, inputs: &Tensor, rng: &mut dyn RngCore) -> Result<Var> {
        let a = &self.arch;
        let s = inputs.dims2()?.0;
        let y = ctx.tape.constant(self.expand(inputs)?);
        let quad = ctx.tape.constant(Tensor::full(&[self.inputs.len()], 1.0));
        let y = PointCloudFeature {
            locations: Locations::Sensors(self.inputs.clone()),
            feats: y,
            quad,
            samples: s,
        };
        let j = a.rotation_orbits.max(1);
        let points = sample_orbit_points(a.group, a.lift_points / j, j, a.support_radius, rng)?;
        let plan = LiftPlan::build(
            &self.inputs,
            &points,
            a.lift_k,
            a.lift_radius,
            a.angular_scale,
        )?;
        let mut z = self
            .lift
            .forward(ctx, &y, &plan, &points, a.support_radius)?;
        z.feats = self.lift_bn.forward(ctx, z.feats)?;
        z.feats = ctx.tape.relu(z.feats);
        for (b, block) in self.blocks.iter().enumerate() {
            if b > 0 {
                let orbits = downsample_indices(z.locations.len() / j, 2, rng);
                let sel: Vec<usize> = orbits.iter().flat_map(|o| o * j..(o + 1) * j).collect();
                z = select_points(&mut ctx.tape, &z, &sel)?;
            }
            let Locations::Group(pts) = &z.locations else {
                unreachable!()
            };
            let plan = GroupPlan::build(pts, pts, a.k, a.radii[b], &a.distance)?;
            z = block.forward(ctx, &z, &plan, a.support_radius)?;
        }
        global_pool(&mut ctx.tape, &z)
    }
}

impl Model for EquivariantModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn arch(&self) -> &ArchConfig {
        &self.arch
    }
    fn sensors(&self) -> &SensorSet {
        &self.sensors
    }
    fn target_stats(&self) -> (ParamId, ParamId) {
        self.target
    }

    fn forward(&self, ctx: &mut Ctx, inputs: &Tensor, rng: &mut dyn RngCore) -> Result<Var> {
        let pooled = self.features(ctx, inputs, rng)?;
        self.head.forward(ctx, pooled)
    }
}

/// Fully-connected network on the raw measurement vector, with the same
/// normalisation and head conventions as [`EquivariantModel`].
#[derive(Clone, Debug)]
pub struct BaselineMlp {
    pub arch: ArchConfig,
    pub store: ParamStore,
    pub sensors: SensorSet,
    pub layers: Vec<Linear>,
    pub hidden: usize,
    target: (ParamId, ParamId),
}

fn mlp_params(n_in: usize, h: usize, out: usize) -> usize {
    n_in * h + h + h * h + h + h * out + out
}

impl BaselineMlp {
    pub fn new(arch: &ArchConfig, sensors: &SensorSet, seed: u64) -> Result<Self> {
        let n = sensors.len();
        if n == 0 || arch.outputs == 0 {
            return Err(Error::Config(
                "the baseline needs sensors and outputs".into(),
            ));
        }
        let hidden = match arch.mlp_hidden {
            0 => {
                let eq = EquivariantModel::new(
                    &ArchConfig {
                        kind: ModelKind::Equivariant,
                        ..arch.clone()
                    },
                    sensors,
                    seed,
                )?;
                let target = eq.store.trainable_count();
                (1..=4096)
                    .min_by_key(|&h| mlp_params(n, h, arch.outputs).abs_diff(target))
                    .unwrap()
            }
            h => h,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layers = vec![
            Linear::new(&mut store, "mlp.l0", n, hidden, &mut rng),
            Linear::new(&mut store, "mlp.l1", hidden, hidden, &mut rng),
            Linear::new(&mut store, "mlp.l2", hidden, arch.outputs, &mut rng),
        ];
        let target = target_buffers(&mut store, arch.outputs);
        Ok(BaselineMlp {
            arch: ArchConfig {
                kind: ModelKind::Mlp,
                mlp_hidden: hidden,
                ..arch.clone()
            },
            store,
            sensors: sensors.clone(),
            layers,
            hidden,
            target,
        })
    }
}

impl Model for BaselineMlp {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn arch(&self) -> &ArchConfig {
        &self.arch
    }
    fn sensors(&self) -> &SensorSet {
        &self.sensors
    }
    fn target_stats(&self) -> (ParamId, ParamId) {
        self.target
    }

    fn forward(&self, ctx: &mut Ctx, inputs: &Tensor, _rng: &mut dyn RngCore) -> Result<Var> {
        check_inputs(inputs, self.sensors.len())?;
        let mut h = ctx.tape.constant(inputs.clone());
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(ctx, h)?;
            if i + 1 < self.layers.len() {
                h = ctx.tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// Builds the model an [`ArchConfig`] describes.
pub fn build_model(arch: &ArchConfig, sensors: &SensorSet, seed: u64) -> Result<Box<dyn Model>> {
    Ok(match arch.kind {
        ModelKind::Equivariant => Box::new(EquivariantModel::new(arch, sensors, seed)?),
        ModelKind::Mlp => Box::new(BaselineMlp::new(arch, sensors, seed)?),
    })
}

/// `‖f(y) − f(y_g)‖ / ‖f(y)‖` where `y` and `y_g` measure `phantom` and its
/// image under `g` on the model's sensors. Both passes use running batch
/// statistics and the same collocation draw from `seed`.
pub fn model_equivariance_residual(
    model: &dyn Model,
    phantom: &Phantom,
    g: &GroupElement,
    seed: u64,
) -> Result<f64> {
    let sensors = model.sensors();
    let mut y = measure(phantom, sensors);
    y.extend(measure(&transform_phantom(g, phantom), sensors));
    let inputs = Tensor::new(vec![2, sensors.len()], y)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ctx = Ctx::new(model.store(), false);
    let out = model.forward(&mut ctx, &inputs, &mut rng)?;
    let v = ctx.tape.value(out).data();
    let o = v.len() / 2;
    let (a, b) = v.split_at(o);
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(if diff == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok(diff / norm)
}

/// One optimisation-free pass in training mode whose batch statistics replace
/// the running ones, e.g. to calibrate an untrained model.
pub fn calibrate_batch_stats(
    model: &mut dyn Model,
    inputs: &Tensor,
    rng: &mut dyn RngCore,
) -> Result<()> {
    let updates = {
        let mut ctx = Ctx::new(model.store(), true);
        model.forward(&mut ctx, inputs, rng)?;
        ctx.take_updates()
    };
    let store = model.store_mut();
    for (mean_id, var_id, st) in updates {
        store.get_mut(mean_id).data_mut().copy_from_slice(&st.mean);
        store.get_mut(var_id).data_mut().copy_from_slice(&st.var);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{sample_group, SamplingRanges, Vec2};
    use crate::layers::{layer_grad_check, randn, sample_group_points};
    use crate::tensor::Var;
    use crate::tomo::{build_sensors, Ellipse, Geometry};
    use std::sync::Arc;

    fn small_arch() -> ArchConfig {
        ArchConfig {
            channels: 2,
            k: 4,
            lift_k: 5,
            basis: 3,
            hidden: 4,
            lift_points: 16,
            ..ArchConfig::default()
        }
    }

    fn ring() -> Phantom {
        let outer = Ellipse::new(Vec2::new(0.05, -0.02), 0.9, 0.6, 0.3, 1.0).unwrap();
        let inner = Ellipse::new(Vec2::new(0.05, -0.02), 0.5, 0.3, 1.1, -1.0).unwrap();
        Phantom::ring(outer, inner)
    }

    #[test]
    fn config_round_trip_and_validation() {
        let a = ArchConfig::default();
        let text = serde_json::to_string(&a).unwrap();
        assert_eq!(serde_json::from_str::<ArchConfig>(&text).unwrap(), a);
        assert!(serde_json::from_str::<ArchConfig>(r#"{"bogus": 1}"#).is_err());
        let partial: ArchConfig = serde_json::from_str(r#"{"channels": 22}"#).unwrap();
        assert_eq!(partial.block_channels(), [22, 44, 88]);
        assert_eq!(a.block_channels(), [8, 16, 32]);
        assert!(ArchConfig {
            radii: vec![1.0],
            ..a.clone()
        }
        .validate()
        .is_err());
        assert!(ArchConfig {
            k: 200,
            lift_points: 64,
            ..a
        }
        .validate()
        .is_err());
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let sensors = build_sensors(&Geometry::uniform_parallel(4, 7, 1.2).unwrap());
        let arch = small_arch();
        let model = EquivariantModel::new(&arch, &sensors, 3).unwrap();
        assert_eq!(model.input_points().len(), 2 * sensors.len());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::new(
            vec![3, sensors.len()],
            randn(&mut rng, 3 * sensors.len(), 1.0),
        )
        .unwrap();
        let run = |seed| {
            let mut ctx = Ctx::new(&model.store, true);
            let out = model
                .forward(&mut ctx, &x, &mut ChaCha8Rng::seed_from_u64(seed))
                .unwrap();
            ctx.tape.value(out).clone()
        };
        let a = run(9);
        assert_eq!(a.shape(), &[3, 2]);
        assert_eq!(a, run(9));
        assert_ne!(a, run(10));
        let bad = Tensor::zeros(&[1, sensors.len() + 1]);
        let mut ctx = Ctx::new(&model.store, false);
        assert!(model.forward(&mut ctx, &bad, &mut rng).is_err());
    }

    #[test]
    fn identity_residual_is_zero() {
        let sensors = build_sensors(&Geometry::uniform_parallel(6, 9, 1.2).unwrap());
        let model = EquivariantModel::new(&small_arch(), &sensors, 1).unwrap();
        let e = GroupElement::identity(GroupId::SE2);
        assert_eq!(
            model_equivariance_residual(&model, &ring(), &e, 4).unwrap(),
            0.0
        );
        let g = sample_group(
            GroupId::SE2,
            &SamplingRanges::default(),
            &mut ChaCha8Rng::seed_from_u64(2),
        );
        let r = model_equivariance_residual(&model, &ring(), &g, 4).unwrap();
        assert!(r.is_finite() && r > 0.0);
    }

    #[test]
    fn orbit_collocation_is_exact_for_lattice_rotations() {
        let sensors = build_sensors(&Geometry::uniform_parallel(6, 9, 1.2).unwrap());
        // neighbourhoods wide enough that no distance tie is cut
        let arch = ArchConfig {
            lift_points: 24,
            rotation_orbits: 12,
            k: 12,
            lift_k: 27,
            ..small_arch()
        };
        assert_eq!(arch.block_points(), [24, 12, 12]);
        let model = EquivariantModel::new(&arch, &sensors, 1).unwrap();
        let g = GroupElement::se2(Vec2::zeros(), std::f64::consts::PI / 3.0);
        let r = model_equivariance_residual(&model, &ring(), &g, 4).unwrap();
        assert!(r < 1e-10, "{r}");
        let off = GroupElement::se2(Vec2::zeros(), 0.3);
        assert!(model_equivariance_residual(&model, &ring(), &off, 4).unwrap() > 1e-6);
        assert!(ArchConfig {
            rotation_orbits: 5,
            ..arch
        }
        .validate()
        .is_err());
    }

    #[test]
    fn baseline_matches_parameter_budget() {
        let sensors = build_sensors(&Geometry::uniform_parallel(2, 33, 1.2).unwrap());
        let arch = ArchConfig::default();
        let eq = EquivariantModel::new(&arch, &sensors, 0).unwrap();
        let mlp = BaselineMlp::new(&arch, &sensors, 0).unwrap();
        let (a, b) = (
            eq.store.trainable_count() as f64,
            mlp.store.trainable_count() as f64,
        );
        assert!((a - b).abs() / a < 0.05, "{a} vs {b}");
        assert_eq!(mlp.arch().kind, ModelKind::Mlp);
        let fixed = BaselineMlp::new(
            &ArchConfig {
                mlp_hidden: 5,
                ..arch
            },
            &sensors,
            0,
        )
        .unwrap();
        assert_eq!(fixed.hidden, 5);
    }

    #[test]
    fn zero_final_conv_leaves_skip_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let arch = small_arch();
        let mut store = ParamStore::new();
        let block = ResidualBlock::new(&mut store, "b", &arch, 2, 2, &mut rng);
        for bn in &block.norms[2..] {
            store.get_mut(bn.gamma).data_mut().fill(0.0);
        }
        let pts = sample_group_points(GroupId::SE2, 12, 1.0, &mut rng);
        let plan = GroupPlan::build(&pts, &pts, 4, 1.0, &arch.distance).unwrap();
        let x = randn(&mut rng, 24, 1.0);
        let mut ctx = Ctx::new(&store, false);
        let feats = ctx
            .tape
            .constant(Tensor::new(vec![12, 2], x.clone()).unwrap());
        let quad = ctx.tape.constant(Tensor::full(&[12], 0.2));
        let z = PointCloudFeature {
            locations: Locations::Group(pts.clone()),
            feats,
            quad,
            samples: 1,
        };
        let out = block.forward(&mut ctx, &z, &plan, 1.0).unwrap();
        assert_eq!(ctx.tape.value(out.feats).data(), &x[..]);
    }

    #[test]
    fn model_gradients() {
        let sensors = build_sensors(&Geometry::uniform_parallel(3, 5, 1.2).unwrap());
        let arch = ArchConfig {
            channels: 1,
            k: 3,
            lift_k: 4,
            basis: 2,
            hidden: 3,
            lift_points: 12,
            ..ArchConfig::default()
        };
        for kind in [ModelKind::Equivariant, ModelKind::Mlp] {
            let arch = ArchConfig {
                kind,
                mlp_hidden: 4,
                ..arch.clone()
            };
            let model = build_model(&arch, &sensors, 5).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let x = Tensor::new(
                vec![3, sensors.len()],
                randn(&mut rng, 3 * sensors.len(), 1.0),
            )
            .unwrap();
            let target = Arc::new(Tensor::new(vec![3, 2], randn(&mut rng, 6, 1.0)).unwrap());
            let f = |ctx: &mut Ctx, _: &[Var]| -> Result<Var> {
                let out = model.forward(ctx, &x, &mut ChaCha8Rng::seed_from_u64(11))?;
                ctx.tape.mse(out, target.clone())
            };
            let check = layer_grad_check(model.store(), &[], f, 1e-6).unwrap();

            assert!(check.max_rel_err < 1e-5, "{kind:?}: {:?}", check.per_input);
        }
    }

    #[test]
    #[ignore]
    fn desk_step_timing() {
        let geom = Geometry::fan_covering(vec![0.0, 85f64.to_radians()], 64, 1.3, 4.0).unwrap();
        let sensors = build_sensors(&geom);
        let arch = ArchConfig {
            lift_points: 128,
            ..ArchConfig::default()
        };
        let model = EquivariantModel::new(&arch, &sensors, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::new(
            vec![8, sensors.len()],
            randn(&mut rng, 8 * sensors.len(), 1.0),
        )
        .unwrap();
        let target = Arc::new(Tensor::zeros(&[8, 2]));
        let t = std::time::Instant::now();
        for _ in 0..5 {
            let mut ctx = Ctx::new(&model.store, true);
            let out = model.forward(&mut ctx, &x, &mut rng).unwrap();
            let loss = ctx.tape.mse(out, target.clone()).unwrap();
            ctx.tape.backward(loss).unwrap();
        }
        eprintln!(
            "params {} step {:?}",
            model.store.trainable_count(),
            t.elapsed() / 5
        );
    }
}
