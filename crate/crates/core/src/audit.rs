//! Audits run from the command line and the acceptance suite: finite-difference
//! checks of every differentiable op and layer, the invariance of models under
//! transformed phantoms across sensor geometries, and visibility of discretized
//! Radon operators.

use std::f64::consts::{PI, TAU};
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{build_dataset, gen_ring, sample_rng, RingParams};
use crate::error::{Error, Result};
use crate::group::{sample_group, DistanceWeights, GroupElement, GroupId, SamplingRanges, Vec2};
use crate::layers::{
    build_model, calibrate_batch_stats, global_pool, layer_grad_check, model_equivariance_residual,
    sample_group_points, select_points, ArchConfig, BatchNorm, Ctx, GroupConv, GroupPlan,
    KernelNet, LiftPlan, LiftingConv, Linear, Locations, Model, ModelKind, PointCloudFeature,
    ResidualBlock,
};
use crate::tensor::{grad_check, GradCheck, NormMode, ParamStore, Tape, Tensor, Var};
use crate::theory::{check_visibility, discretize_radon, discretize_rep};
use crate::tomo::{build_sensors, csv_err, linspace, measure, Geometry, GridLayout, SensorSet};
use crate::train::{Samples, TrainConfig, Trainer};

/// Largest norm-wise relative error a gradient may show.
pub const GRAD_TOL: f64 = 1e-5;
const FD_STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn report(name: &str, check: GradCheck) -> GradReport {
    GradReport {
        name: name.to_string(),
        max_rel_err: check.max_rel_err,
        passed: check.max_rel_err < GRAD_TOL,
    }
}

/// Fixed, non-symmetric weights turn any tensor into a scalar whose gradient
/// touches every entry differently.
fn probe(tape: &mut Tape, v: Var) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let n = tape.value(v).len();
    let w = (0..n).map(|i| (1.3 * i as f64 + 0.7).sin() + 0.1).collect();
    let w = tape.constant(Tensor::new(shape, w)?);
    let m = tape.mul(v, w)?;
    Ok(tape.sum(m))
}

/// Normal draws pushed at least 0.2 away from zero, clear of the ReLU kink.
fn away<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
            z.signum() * (0.2 + 0.8 * z.abs())
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, OpFn, Vec<Tensor>)> {
    let m34 = |rng: &mut ChaCha8Rng| away(rng, &[3, 4]);
    let mut cases: Vec<(&'static str, OpFn, Vec<Tensor>)> = Vec::new();
    cases.push((
        "add",
        Box::new(|t, x| {
            let y = t.add(x[0], x[1])?;
            probe(t, y)
        }),
        vec![m34(rng), m34(rng)],
    ));
    cases.push((
        "sub",
        Box::new(|t, x| {
            let y = t.sub(x[0], x[1])?;
            probe(t, y)
        }),
        vec![m34(rng), m34(rng)],
    ));
    cases.push((
        "mul",
        Box::new(|t, x| {
            let y = t.mul(x[0], x[1])?;
            probe(t, y)
        }),
        vec![m34(rng), m34(rng)],
    ));
    cases.push((
        "scale",
        Box::new(|t, x| {
            let y = t.scale(x[0], -1.7);
            probe(t, y)
        }),
        vec![m34(rng)],
    ));
    cases.push((
        "relu",
        Box::new(|t, x| {
            let y = t.relu(x[0]);
            probe(t, y)
        }),
        vec![m34(rng)],
    ));
    cases.push((
        "swish",
        Box::new(|t, x| {
            let y = t.swish(x[0]);
            probe(t, y)
        }),
        vec![m34(rng)],
    ));
    cases.push((
        "exp",
        Box::new(|t, x| {
            let y = t.exp(x[0]);
            probe(t, y)
        }),
        vec![m34(rng)],
    ));
    cases.push((
        "square",
        Box::new(|t, x| {
            let y = t.square(x[0]);
            probe(t, y)
        }),
        vec![m34(rng)],
    ));
    cases.push((
        "softplus",
        Box::new(|t, x| {
            let y = t.softplus(x[0]);
            probe(t, y)
        }),
        vec![m34(rng)],
    ));
    cases.push((
        "matmul",
        Box::new(|t, x| {
            let y = t.matmul(x[0], x[1])?;
            probe(t, y)
        }),
        vec![m34(rng), away(rng, &[4, 2])],
    ));
    cases.push((
        "add_bias",
        Box::new(|t, x| {
            let y = t.add_bias(x[0], x[1])?;
            probe(t, y)
        }),
        vec![m34(rng), away(rng, &[4])],
    ));
    let rows = Arc::new(vec![0.5, -1.2, 2.0]);
    cases.push((
        "scale_rows",
        Box::new(move |t, x| {
            let y = t.scale_rows(x[0], rows.clone())?;
            probe(t, y)
        }),
        vec![m34(rng)],
    ));
    let idx = Arc::new(vec![2, 0, 2, 1]);
    cases.push((
        "gather",
        Box::new(move |t, x| {
            let y = t.gather(x[0], idx.clone())?;
            probe(t, y)
        }),
        vec![m34(rng)],
    ));
    let idx = Arc::new(vec![1, 0, 1, 2]);
    cases.push((
        "scatter_sum",
        Box::new(move |t, x| {
            let y = t.scatter_sum(x[0], idx.clone(), 3)?;
            probe(t, y)
        }),
        vec![away(rng, &[4, 2])],
    ));
    let idx = Arc::new(vec![0, 3, 1, 2, 2, 0]);
    cases.push((
        "point_conv",
        Box::new(move |t, x| {
            let y = t.point_conv(x[0], x[1], x[2], x[3], idx.clone(), 2, 2)?;
            probe(t, y)
        }),
        vec![
            away(rng, &[6, 2]),
            away(rng, &[8, 2]),
            away(rng, &[4]),
            away(rng, &[3, 4]),
        ],
    ));
    cases.push((
        "batchnorm_train",
        Box::new(|t, x| {
            let (y, _) = t.batchnorm(x[0], x[1], x[2], NormMode::Train)?;
            probe(t, y)
        }),
        vec![away(rng, &[6, 3]), away(rng, &[3]), away(rng, &[3])],
    ));
    let (mean, var) = (
        Tensor::vector(vec![0.1, -0.3, 0.2]),
        Tensor::vector(vec![0.5, 1.5, 2.0]),
    );
    cases.push((
        "batchnorm_eval",
        Box::new(move |t, x| {
            let (y, _) = t.batchnorm(
                x[0],
                x[1],
                x[2],
                NormMode::Eval {
                    mean: &mean,
                    var: &var,
                },
            )?;
            probe(t, y)
        }),
        vec![away(rng, &[6, 3]), away(rng, &[3]), away(rng, &[3])],
    ));
    let w = Arc::new(vec![0.2, 0.5, 0.3]);
    cases.push((
        "group_mean",
        Box::new(move |t, x| {
            let y = t.group_mean(x[0], w.clone())?;
            probe(t, y)
        }),
        vec![away(rng, &[6, 2])],
    ));
    let target = Arc::new(away(rng, &[3, 2]));
    cases.push((
        "mse",
        Box::new(move |t, x| t.mse(x[0], target.clone())),
        vec![away(rng, &[3, 2])],
    ));
    let labels = Arc::new(vec![1, 3, 0]);
    cases.push((
        "softmax_cross_entropy",
        Box::new(move |t, x| t.softmax_cross_entropy(x[0], labels.clone())),
        vec![m34(rng)],
    ));
    cases.push((
        "sum",
        Box::new(|t, x| {
            let y = t.square(x[0]);
            Ok(t.sum(y))
        }),
        vec![m34(rng)],
    ));
    cases.push((
        "mean",
        Box::new(|t, x| {
            let y = t.square(x[0]);
            Ok(t.mean(y))
        }),
        vec![m34(rng)],
    ));
    cases
}

fn group_cloud(
    ctx: &mut Ctx,
    points: &[GroupElement],
    feats: Var,
    samples: usize,
) -> PointCloudFeature {
    let quad = ctx
        .tape
        .constant(Tensor::full(&[points.len()], 1.0 / points.len() as f64));
    PointCloudFeature {
        locations: Locations::Group(points.to_vec()),
        feats,
        quad,
        samples,
    }
}

fn sensor_cloud(
    ctx: &mut Ctx,
    sensors: &SensorSet,
    feats: Var,
    samples: usize,
) -> PointCloudFeature {
    let quad = ctx.tape.constant(Tensor::full(&[sensors.len()], 1.0));
    PointCloudFeature {
        locations: Locations::Sensors(sensors.points.clone()),
        feats,
        quad,
        samples,
    }
}

fn layer_reports(rng: &mut ChaCha8Rng) -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    let sensors = build_sensors(&Geometry::uniform_parallel(4, 5, 1.0)?);
    let v = sensors.len();

    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 3, 2, rng);
    let check = layer_grad_check(
        &store,
        &[away(rng, &[4, 3])],
        |ctx, x| {
            let y = lin.forward(ctx, x[0])?;
            probe(&mut ctx.tape, y)
        },
        FD_STEP,
    )?;
    out.push(report("linear", check));

    let mut store = ParamStore::new();
    let bn = BatchNorm::new(&mut store, "bn", 3);
    let check = layer_grad_check(
        &store,
        &[away(rng, &[5, 3])],
        |ctx, x| {
            let y = bn.forward(ctx, x[0])?;
            probe(&mut ctx.tape, y)
        },
        FD_STEP,
    )?;
    out.push(report("batch_norm", check));

    let mut store = ParamStore::new();
    let net = KernelNet::new(&mut store, "kernel", 3, 5, 4, rng);
    let check = layer_grad_check(
        &store,
        &[away(rng, &[6, 3])],
        |ctx, x| {
            let y = net.forward(ctx, x[0])?;
            probe(&mut ctx.tape, y)
        },
        FD_STEP,
    )?;
    out.push(report("kernel_net", check));

    let mut store = ParamStore::new();
    let lift = LiftingConv::new(&mut store, "lift", v, 2, 5, 3, 4, rng);
    let pts = sample_group_points(GroupId::SE2, 6, 1.0, rng);
    let lplan = LiftPlan::build(&sensors.points, &pts, 4, 0.8, 1.0)?;
    let check = layer_grad_check(
        &store,
        &[away(rng, &[2 * v, 1])],
        |ctx, x| {
            let y = sensor_cloud(ctx, &sensors, x[0], 2);
            let z = lift.forward(ctx, &y, &lplan, &pts, 1.0)?;
            probe(&mut ctx.tape, z.feats)
        },
        FD_STEP,
    )?;
    out.push(report("lifting_conv", check));

    for (name, id) in [
        ("group_conv_se2", GroupId::SE2),
        ("group_conv_aff", GroupId::AffPlus2),
    ] {
        let mut store = ParamStore::new();
        let conv = GroupConv::new(&mut store, "conv", id, 2, 3, 5, 3, rng);
        let pts = sample_group_points(id, 7, 1.0, rng);
        let plan = GroupPlan::build(&pts, &pts, 3, 1.0, &DistanceWeights::default())?;
        let check = layer_grad_check(
            &store,
            &[away(rng, &[14, 2])],
            |ctx, x| {
                let z = group_cloud(ctx, &pts, x[0], 2);
                let y = conv.forward(ctx, &z, &plan, &pts, 1.0)?;
                probe(&mut ctx.tape, y.feats)
            },
            FD_STEP,
        )?;
        out.push(report(name, check));
    }

    let arch = ArchConfig {
        hidden: 4,
        basis: 2,
        ..ArchConfig::default()
    };
    let mut store = ParamStore::new();
    let block = ResidualBlock::new(&mut store, "block", &arch, 2, 3, rng);
    let pts = sample_group_points(GroupId::SE2, 8, 1.0, rng);
    let plan = GroupPlan::build(&pts, &pts, 3, 1.0, &DistanceWeights::default())?;
    let check = layer_grad_check(
        &store,
        &[away(rng, &[16, 2])],
        |ctx, x| {
            let z = group_cloud(ctx, &pts, x[0], 2);
            let y = block.forward(ctx, &z, &plan, 1.0)?;
            probe(&mut ctx.tape, y.feats)
        },
        FD_STEP,
    )?;
    out.push(report("residual_block", check));

    let store = ParamStore::new();
    let pts = sample_group_points(GroupId::SE2, 5, 1.0, rng);
    let check = layer_grad_check(
        &store,
        &[away(rng, &[10, 3])],
        |ctx, x| {
            let z = group_cloud(ctx, &pts, x[0], 2);
            let y = global_pool(&mut ctx.tape, &z)?;
            probe(&mut ctx.tape, y)
        },
        FD_STEP,
    )?;
    out.push(report("global_pool", check));

    let check = layer_grad_check(
        &store,
        &[away(rng, &[10, 3])],
        |ctx, x| {
            let z = group_cloud(ctx, &pts, x[0], 2);
            let y = select_points(&mut ctx.tape, &z, &[4, 1, 2])?;
            probe(&mut ctx.tape, y.feats)
        },
        FD_STEP,
    )?;
    out.push(report("downsample", check));

    let arch = ArchConfig {
        channels: 1,
        k: 3,
        lift_k: 4,
        basis: 2,
        hidden: 3,
        lift_points: 12,
        mlp_hidden: 4,
        ..ArchConfig::default()
    };
    let sensors = build_sensors(&Geometry::uniform_parallel(3, 5, 1.2)?);
    for (name, kind) in [
        ("equivariant_model", ModelKind::Equivariant),
        ("baseline_mlp", ModelKind::Mlp),
    ] {
        let model = build_model(
            &ArchConfig {
                kind,
                ..arch.clone()
            },
            &sensors,
            rng.random(),
        )?;
        let x = away(rng, &[3, sensors.len()]);
        let target = Arc::new(away(rng, &[3, 2]));
        let seed: u64 = rng.random();
        let check = layer_grad_check(
            model.store(),
            &[],
            |ctx, _| {
                let out = model.forward(ctx, &x, &mut ChaCha8Rng::seed_from_u64(seed))?;
                ctx.tape.mse(out, target.clone())
            },
            FD_STEP,
        )?;
        out.push(report(name, check));
    }
    Ok(out)
}

/// Central-difference check of every differentiable op and layer at fixed
/// seeds. With `inject_fault` an extra case whose backward rule negates the
/// gradient is appended; it must fail.
pub fn gradient_suite(seed: u64, inject_fault: bool) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, f, inputs) in op_cases(&mut rng) {
        out.push(report(name, grad_check(f, &inputs, FD_STEP)?));
    }
    out.extend(layer_reports(&mut rng)?);
    if inject_fault {
        out.push(sign_flip_case(&mut rng)?);
    }
    Ok(out)
}

/// A chain through the deliberately wrong `flipped_identity` backward rule.
pub fn sign_flip_case(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let check = grad_check(
        |t, x| {
            let y = t.square(x[0]);
            let y = t.flipped_identity(y);
            probe(t, y)
        },
        &[away(rng, &[3, 4])],
        FD_STEP,
    )?;
    Ok(report("flipped_identity", check))
}

pub fn write_csv<W: Write, T: Serialize>(w: W, rows: &[T]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// How probe elements are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementKind {
    Identity,
    /// Rotations about the origin.
    Rotation,
    /// Random elements of the model's group with translation coordinates in
    /// `[-max_shift, max_shift]`.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EquivarianceAuditConfig {
    /// Parallel geometries with this many angles spread over `[0, π)`.
    pub angle_counts: Vec<usize>,
    pub offsets: usize,
    pub half_width: f64,
    pub elements: usize,
    pub element_kind: ElementKind,
    pub max_shift: f64,
    pub arch: ArchConfig,
    pub rings: RingParams,
    /// Phantoms whose batch statistics calibrate an untrained model.
    pub calibration_samples: usize,
    /// When positive, each model is also trained this many epochs on rings
    /// measured with its own geometry and audited again.
    pub train_epochs: usize,
    pub train_samples: usize,
    pub train: TrainConfig,
}

impl Default for EquivarianceAuditConfig {
    fn default() -> Self {
        EquivarianceAuditConfig {
            angle_counts: vec![2, 8, 32],
            offsets: 33,
            half_width: 1.3,
            elements: 20,
            element_kind: ElementKind::Rotation,
            max_shift: 0.3,
            arch: ArchConfig {
                lift_points: 512,
                rotation_orbits: 64,
                ..ArchConfig::default()
            },
            rings: RingParams::default(),
            calibration_samples: 32,
            train_epochs: 0,
            train_samples: 64,
            train: TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivarianceRow {
    pub angles: usize,
    pub trained: bool,
    pub element: usize,
    pub angle_deg: f64,
    pub shift_x: f64,
    pub shift_y: f64,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivarianceMedian {
    pub angles: usize,
    pub trained: bool,
    pub median: f64,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Parallel geometry with `n` angles `kπ/n` and symmetric offsets.
pub fn parallel_geometry(n: usize, offsets: usize, half_width: f64) -> Result<Geometry> {
    let angles = (0..n).map(|k| PI * k as f64 / n as f64).collect();
    Geometry::parallel(angles, linspace(-half_width, half_width, offsets))
}

fn probe_elements(cfg: &EquivarianceAuditConfig, seed: u64) -> Vec<GroupElement> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e1e7);
    (0..cfg.elements)
        .map(|_| match cfg.element_kind {
            ElementKind::Identity => GroupElement::identity(cfg.arch.group),
            ElementKind::Rotation => GroupElement::se2(Vec2::zeros(), rng.random_range(0.0..TAU)),
            ElementKind::Random => {
                let ranges = SamplingRanges {
                    translation: (-cfg.max_shift, cfg.max_shift),
                    ..SamplingRanges::default()
                };
                sample_group(cfg.arch.group, &ranges, &mut rng)
            }
        })
        .collect()
}

fn audit_rows(
    model: &dyn Model,
    angles: usize,
    trained: bool,
    phantoms: &[crate::tomo::Phantom],
    elements: &[GroupElement],
    seed: u64,
) -> Result<Vec<EquivarianceRow>> {
    let mut rows = Vec::with_capacity(elements.len());
    for (i, (p, g)) in phantoms.iter().zip(elements).enumerate() {
        let l = g.linear();
        rows.push(EquivarianceRow {
            angles,
            trained,
            element: i,
            angle_deg: l[(1, 0)].atan2(l[(0, 0)]).to_degrees(),
            shift_x: g.translation().x,
            shift_y: g.translation().y,
            residual: model_equivariance_residual(model, p, g, seed)?,
        });
    }
    Ok(rows)
}

fn audit_geometry(
    cfg: &EquivarianceAuditConfig,
    seed: u64,
    n: usize,
    phantoms: &[crate::tomo::Phantom],
    elements: &[GroupElement],
) -> Result<(Vec<EquivarianceRow>, Vec<EquivarianceMedian>)> {
    let geom = parallel_geometry(n, cfg.offsets, cfg.half_width)?;
    let sensors = build_sensors(&geom);
    let mut model = build_model(&cfg.arch, &sensors, seed)?;
    if cfg.calibration_samples > 0 {
        let mut y = Vec::with_capacity(cfg.calibration_samples * sensors.len());
        for i in 0..cfg.calibration_samples {
            let ring = gen_ring(&mut sample_rng(seed ^ 0xca1b, i), &cfg.rings)?;
            y.extend(measure(&ring.phantom(), &sensors));
        }
        let x = Tensor::new(vec![cfg.calibration_samples, sensors.len()], y)?;
        calibrate_batch_stats(model.as_mut(), &x, &mut ChaCha8Rng::seed_from_u64(seed))?;
    }
    let mut rows = audit_rows(model.as_ref(), n, false, phantoms, elements, seed)?;
    let mut medians = vec![EquivarianceMedian {
        angles: n,
        trained: false,
        median: median(&rows.iter().map(|r| r.residual).collect::<Vec<_>>()),
    }];

    if cfg.train_epochs > 0 {
        let data = build_dataset(cfg.train_samples, &geom, 0.0, &cfg.rings, seed ^ 0x7a11)?;
        let samples = Samples::from_dataset(&data);
        let tcfg = TrainConfig {
            epochs: cfg.train_epochs,
            seed,
            arch: cfg.arch.clone(),
            ..cfg.train.clone()
        };
        let mut trainer = Trainer::new(tcfg, build_model(&cfg.arch, &sensors, seed)?)?;
        trainer.fit_targets(&samples)?;
        trainer.run(&samples, None, None)?;
        let r = audit_rows(trainer.model.as_ref(), n, true, phantoms, elements, seed)?;
        medians.push(EquivarianceMedian {
            angles: n,
            trained: true,
            median: median(&r.iter().map(|r| r.residual).collect::<Vec<_>>()),
        });
        rows.extend(r);
    }
    Ok((rows, medians))
}

/// Maps `f` over `items` on up to `threads` scoped threads; results keep the
/// order of `items`.
pub fn par_map<T: Sync, U: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> U + Sync,
) -> Vec<U> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let f = &f;
    let mut tagged: Vec<(usize, U)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                scope.spawn(move || {
                    (t..items.len())
                        .step_by(threads)
                        .map(|i| (i, f(&items[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("audit worker panicked"))
            .collect()
    });
    tagged.sort_by_key(|(i, _)| *i);
    tagged.into_iter().map(|(_, u)| u).collect()
}

/// Builds one model per geometry from the same seed and measures how far its
/// predictions move when the phantom is transformed. Returns per-element rows
/// and per-geometry medians. Geometries run on up to `threads` threads; the
/// result does not depend on the thread count.
pub fn equivariance_audit(
    cfg: &EquivarianceAuditConfig,
    seed: u64,
    threads: usize,
) -> Result<(Vec<EquivarianceRow>, Vec<EquivarianceMedian>)> {
    if cfg.angle_counts.is_empty() || cfg.elements == 0 {
        return Err(Error::Config(
            "need at least one geometry and one element".into(),
        ));
    }
    let elements = probe_elements(cfg, seed);
    let phantoms = (0..cfg.elements)
        .map(|i| gen_ring(&mut sample_rng(seed, i), &cfg.rings).map(|r| r.phantom()))
        .collect::<Result<Vec<_>>>()?;
    let parts = par_map(&cfg.angle_counts, threads, |&n| {
        audit_geometry(cfg, seed, n, &phantoms, &elements)
    });
    let mut rows = Vec::new();
    let mut medians = Vec::new();
    for part in parts {
        let (r, m) = part?;
        rows.extend(r);
        medians.extend(m);
    }
    Ok((rows, medians))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AngleSet {
    pub name: String,
    pub angles_deg: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisibilityAuditConfig {
    pub grid: usize,
    pub grid_half_width: f64,
    pub offsets: usize,
    pub offset_half_width: f64,
    pub angle_sets: Vec<AngleSet>,
    pub rotations_deg: Vec<f64>,
    /// Additional random SE(2) elements per angle set.
    pub random_elements: usize,
    pub max_shift: f64,
    /// Relative singular-value cut-off for kernels.
    pub tol: f64,
    /// Largest principal angle (radians) accepted as equal kernels.
    pub tol_angle: f64,
}

impl Default for VisibilityAuditConfig {
    fn default() -> Self {
        VisibilityAuditConfig {
            grid: 16,
            grid_half_width: 1.0,
            offsets: 33,
            offset_half_width: 1.5,
            angle_sets: vec![
                AngleSet {
                    name: "dense".into(),
                    angles_deg: (0..24).map(|k| 7.5 * k as f64).collect(),
                },
                AngleSet {
                    name: "two".into(),
                    angles_deg: vec![0.0, 85.0],
                },
            ],
            rotations_deg: vec![90.0],
            random_elements: 0,
            max_shift: 0.3,
            tol: 1e-10,
            tol_angle: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VisibilityRow {
    pub geometry: String,
    pub angles: usize,
    pub angle_deg: f64,
    pub shift_x: f64,
    pub shift_y: f64,
    pub holds: bool,
    pub mismatch_angle: f64,
    pub kernel_dim: usize,
    pub transformed_kernel_dim: usize,
}

/// Builds the discretized Radon operator of every angle set and checks the
/// visibility condition for each configured element.
pub fn visibility_audit(cfg: &VisibilityAuditConfig, seed: u64) -> Result<Vec<VisibilityRow>> {
    let layout = GridLayout::square(cfg.grid, cfg.grid_half_width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut elements: Vec<GroupElement> = cfg
        .rotations_deg
        .iter()
        .map(|d| GroupElement::se2(Vec2::zeros(), d.to_radians()))
        .collect();
    let ranges = SamplingRanges {
        translation: (-cfg.max_shift, cfg.max_shift),
        ..SamplingRanges::default()
    };
    for _ in 0..cfg.random_elements {
        elements.push(sample_group(GroupId::SE2, &ranges, &mut rng));
    }
    let mut rows = Vec::new();
    for set in &cfg.angle_sets {
        let geom = Geometry::parallel(
            set.angles_deg.iter().map(|d| d.to_radians()).collect(),
            linspace(-cfg.offset_half_width, cfg.offset_half_width, cfg.offsets),
        )?;
        let a = discretize_radon(layout, &build_sensors(&geom));
        for g in &elements {
            let rep = check_visibility(&a, &discretize_rep(g, layout), cfg.tol, cfg.tol_angle)?;
            let l = g.linear();
            rows.push(VisibilityRow {
                geometry: set.name.clone(),
                angles: set.angles_deg.len(),
                angle_deg: l[(1, 0)].atan2(l[(0, 0)]).to_degrees(),
                shift_x: g.translation().x,
                shift_y: g.translation().y,
                holds: rep.holds,
                mismatch_angle: rep.mismatch_angle,
                kernel_dim: rep.kernel_dim,
                transformed_kernel_dim: rep.transformed_kernel_dim,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_suite_passes_and_catches_a_flipped_rule() {
        let reports = gradient_suite(3, true).unwrap();
        let (fault, clean) = reports.split_last().unwrap();
        for r in clean {
            assert!(r.passed, "{} {:e}", r.name, r.max_rel_err);
        }
        assert!(clean.len() >= 30);
        assert!(!fault.passed && fault.max_rel_err > 1.0, "{fault:?}");
    }

    #[test]
    fn identity_elements_give_zero_residuals() {
        let cfg = EquivarianceAuditConfig {
            angle_counts: vec![2, 4],
            offsets: 9,
            elements: 3,
            element_kind: ElementKind::Identity,
            calibration_samples: 4,
            arch: ArchConfig {
                channels: 2,
                k: 4,
                lift_k: 5,
                basis: 3,
                hidden: 4,
                lift_points: 16,
                ..ArchConfig::default()
            },
            ..EquivarianceAuditConfig::default()
        };
        let (rows, medians) = equivariance_audit(&cfg, 1, 2).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(medians.len(), 2);
        assert!(rows.iter().all(|r| r.residual == 0.0));
    }

    #[test]
    fn visibility_defaults() {
        let rows = visibility_audit(&VisibilityAuditConfig::default(), 0).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(
            rows[0].holds && rows[0].mismatch_angle < 1e-6,
            "{:?}",
            rows[0]
        );
        assert!(
            !rows[1].holds && rows[1].mismatch_angle > 0.1,
            "{:?}",
            rows[1]
        );
    }

    #[test]
    fn par_map_keeps_order() {
        let items: Vec<usize> = (0..7).collect();
        for threads in [1, 3, 16] {
            assert_eq!(
                par_map(&items, threads, |i| i * i),
                vec![0, 1, 4, 9, 16, 25, 36]
            );
        }
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
