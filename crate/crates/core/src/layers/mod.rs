//! Equivariant layers on point clouds: a lifting convolution from sinogram
//! samples to the group, group convolutions, residual blocks and an invariant
//! pooling head. Neighbourhoods, kernel-network inputs and envelopes depend
//! only on point locations, so they are computed once per batch in a plan and
//! shared by every sample.

mod conv;
mod kernel;
mod model;

pub use conv::{group_input_dim, GroupConv, GroupPlan, LiftPlan, LiftingConv, LIFT_INPUTS};
pub use kernel::KernelNet;
pub use model::{
    build_model, calibrate_batch_stats, model_equivariance_residual, ArchConfig, BaselineMlp,
    EquivariantModel, HeadKind, Model, ModelKind, ResidualBlock,
};

use std::collections::HashMap;
use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use rand::Rng;

use crate::actions::PointY;
use crate::error::{usage, Result};
use crate::group::{sample_group, GroupElement, GroupId, SamplingRanges, Vec2};
use crate::tensor::{
    relative_error, BatchStats, GradCheck, NormMode, ParamId, ParamStore, Tape, Tensor, Var,
    GRAD_FLOOR,
};

/// Where the rows of a feature tensor live.
#[derive(Clone, Debug, PartialEq)]
pub enum Locations {
    Sensors(Vec<PointY>),
    Group(Vec<GroupElement>),
}

impl Locations {
    pub fn len(&self) -> usize {
        match self {
            Locations::Sensors(v) => v.len(),
            Locations::Group(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Features of `samples` signals over one shared point set: `feats` is
/// `[samples·M, C]`, sample-major; `quad` holds the `M` quadrature weights.
#[derive(Clone, Debug)]
pub struct PointCloudFeature {
    pub locations: Locations,
    pub feats: Var,
    pub quad: Var,
    pub samples: usize,
}

/// Forward-pass state: the tape, read access to parameters, the norm mode and
/// the batch statistics to fold into running averages afterwards.
pub struct Ctx<'a> {
    pub tape: Tape,
    pub store: &'a ParamStore,
    pub train: bool,
    params: HashMap<ParamId, Var>,
    updates: Vec<(ParamId, ParamId, BatchStats)>,
}

pub const BN_MOMENTUM: f64 = 0.9;

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, train: bool) -> Self {
        Ctx {
            tape: Tape::new(),
            store,
            train,
            params: HashMap::new(),
            updates: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.tape.param(self.store, id);
        self.params.insert(id, v);
        v
    }

    /// Batch statistics gathered in training mode, as `(mean id, var id, stats)`.
    pub fn take_updates(&mut self) -> Vec<(ParamId, ParamId, BatchStats)> {
        std::mem::take(&mut self.updates)
    }
}

/// `running ← momentum·running + (1 − momentum)·batch`.
pub fn apply_running_stats(store: &mut ParamStore, updates: &[(ParamId, ParamId, BatchStats)]) {
    for (mean_id, var_id, st) in updates {
        for (r, b) in store.get_mut(*mean_id).data_mut().iter_mut().zip(&st.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, b) in store.get_mut(*var_id).data_mut().iter_mut().zip(&st.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
    }
}

/// Normal draws scaled by `std`, used for weight initialisation.
pub(crate) fn randn<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / d_in as f64).sqrt();
        let w = store.add(
            format!("{name}.w"),
            Tensor::new(vec![d_in, d_out], randn(rng, d_in * d_out, std)).unwrap(),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[d_out]));
        Linear { w, b }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(self.w);
        let b = ctx.param(self.b);
        let y = ctx.tape.matmul(x, w)?;
        ctx.tape.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            var: store.add_buffer(
                format!("{name}.running_var"),
                Tensor::full(&[channels], 1.0),
            ),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        if ctx.train {
            let (y, stats) = ctx.tape.batchnorm(x, gamma, beta, NormMode::Train)?;
            ctx.updates.push((
                self.mean,
                self.var,
                stats.expect("training mode returns stats"),
            ));
            Ok(y)
        } else {
            let store = ctx.store;
            let mode = NormMode::Eval {
                mean: store.get(self.mean),
                var: store.get(self.var),
            };
            Ok(ctx.tape.batchnorm(x, gamma, beta, mode)?.0)
        }
    }
}

/// Indices of the `k` nearest `bases` for every query, nearest first; equal
/// distances go to the lower index. Returned flat, `k` per query.
pub fn knn<Q, B>(
    queries: &[Q],
    bases: &[B],
    k: usize,
    metric: impl Fn(&Q, &B) -> f64,
) -> Result<Vec<usize>> {
    if k > bases.len() {
        return usage(format!(
            "k = {k} exceeds the {} available points",
            bases.len()
        ));
    }
    let mut out = Vec::with_capacity(queries.len() * k);
    let mut d: Vec<(f64, usize)> = Vec::with_capacity(bases.len());
    for q in queries {
        d.clear();
        d.extend(bases.iter().enumerate().map(|(i, b)| (metric(q, b), i)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < d.len() && k > 0 {
            d.select_nth_unstable_by(k - 1, cmp);
        }
        d[..k].sort_by(cmp);
        out.extend(d[..k].iter().map(|p| p.1));
    }
    Ok(out)
}

/// Locality factor `exp(−d²/r²)`.
pub fn envelope(d: f64, r: f64) -> f64 {
    (-(d * d) / (r * r)).exp()
}

/// `m` fresh collocation points: translations uniform on the disc of radius
/// `support_radius`, rotation uniform on `[0, 2π)`, and for Aff⁺(2) the
/// default scale and shear ranges.
pub fn sample_group_points<R: Rng + ?Sized>(
    id: GroupId,
    m: usize,
    support_radius: f64,
    rng: &mut R,
) -> Vec<GroupElement> {
    let ranges = SamplingRanges::default().linear_only();
    (0..m)
        .map(|_| {
            let rad = support_radius * rng.random::<f64>().sqrt();
            let ang = TAU * rng.random::<f64>();
            let s = Vec2::new(rad * ang.cos(), rad * ang.sin());
            let lin = sample_group(id, &ranges, rng);
            match lin {
                GroupElement::Se2 { gamma, .. } => GroupElement::se2(s, gamma),
                GroupElement::Aff { a, .. } => GroupElement::Aff { s, a },
            }
        })
        .collect()
}

/// `bases` points from [`sample_group_points`], each followed by its images
/// under left multiplication with the rotations `2πj/copies`, `j = 1..copies`.
pub fn sample_orbit_points<R: Rng + ?Sized>(
    id: GroupId,
    bases: usize,
    copies: usize,
    support_radius: f64,
    rng: &mut R,
) -> Result<Vec<GroupElement>> {
    let base = sample_group_points(id, bases, support_radius, rng);
    let mut out = Vec::with_capacity(bases * copies);
    for b in &base {
        for j in 0..copies {
            let r = GroupElement::se2(Vec2::zeros(), TAU * j as f64 / copies as f64);
            let r = match id {
                GroupId::SE2 => r,
                GroupId::AffPlus2 => GroupElement::Aff {
                    s: Vec2::zeros(),
                    a: r.linear(),
                },
            };
            out.push(if j == 0 { *b } else { r.compose(b)? });
        }
    }
    Ok(out)
}

/// Volume of the collocation region in chart coordinates, used for the
/// Monte-Carlo quadrature weights `|Ω|/M`.
pub fn collocation_volume(support_radius: f64) -> f64 {
    PI * support_radius * support_radius * TAU
}

/// Sorted random subset of `⌈m/factor⌉` of `0..m`.
pub fn downsample_indices<R: Rng + ?Sized>(m: usize, factor: usize, rng: &mut R) -> Vec<usize> {
    let keep = m.div_ceil(factor.max(1));
    let mut sel = rand::seq::index::sample(rng, m, keep).into_vec();
    sel.sort_unstable();
    sel
}

/// Keeps a random `⌈M/factor⌉` of the points for every sample; quadrature
/// weights grow by `M/⌈M/factor⌉` so the total mass is unchanged.
pub fn downsample<R: Rng + ?Sized>(
    tape: &mut Tape,
    z: &PointCloudFeature,
    factor: usize,
    rng: &mut R,
) -> Result<(PointCloudFeature, Vec<usize>)> {
    let Locations::Group(points) = &z.locations else {
        return usage("downsampling applies to features on the group");
    };
    let m = points.len();
    let sel = downsample_indices(m, factor, rng);
    let out = select_points(tape, z, &sel)?;
    Ok((out, sel))
}

pub(crate) fn select_points(
    tape: &mut Tape,
    z: &PointCloudFeature,
    sel: &[usize],
) -> Result<PointCloudFeature> {
    let Locations::Group(points) = &z.locations else {
        return usage("downsampling applies to features on the group");
    };
    let m = points.len();
    let rows: Vec<usize> = (0..z.samples)
        .flat_map(|s| sel.iter().map(move |&i| s * m + i))
        .collect();
    let feats = tape.gather(z.feats, Arc::new(rows))?;
    let scale = m as f64 / sel.len() as f64;
    let q: Vec<f64> = sel
        .iter()
        .map(|&i| tape.value(z.quad).data()[i] * scale)
        .collect();
    let quad = tape.constant(Tensor::vector(q));
    Ok(PointCloudFeature {
        locations: Locations::Group(sel.iter().map(|&i| points[i]).collect()),
        feats,
        quad,
        samples: z.samples,
    })
}

/// Quadrature-weighted mean over locations: `[S·M, C] → [S, C]`. Points are
/// summed in a canonical order of their locations, so reordering the cloud
/// leaves the result bit-identical.
pub fn global_pool(tape: &mut Tape, z: &PointCloudFeature) -> Result<Var> {
    let m = z.locations.len();
    let c = tape.value(z.feats).dims2()?.1;
    let quad = tape.value(z.quad).data().to_vec();
    let feats = tape.value(z.feats).data();
    let key = |i: usize| -> Vec<f64> {
        let mut k = match &z.locations {
            Locations::Sensors(v) => vec![v[i].r, v[i].phi],
            Locations::Group(g) => {
                let s = g[i].translation();
                let l = g[i].linear();
                vec![s.x, s.y, l[(0, 0)], l[(0, 1)], l[(1, 0)], l[(1, 1)]]
            }
        };
        k.push(quad[i]);
        for s in 0..z.samples {
            k.extend_from_slice(&feats[(s * m + i) * c..(s * m + i + 1) * c]);
        }
        k
    };
    let keys: Vec<Vec<f64>> = (0..m).map(key).collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        keys[a]
            .iter()
            .zip(&keys[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let rows: Vec<usize> = (0..z.samples)
        .flat_map(|s| order.iter().map(move |&i| s * m + i))
        .collect();
    let sorted = tape.gather(z.feats, Arc::new(rows))?;
    let w = Arc::new(order.iter().map(|&i| quad[i]).collect());
    tape.group_mean(sorted, w)
}

/// Central-difference check of a layer's gradients with respect to every
/// trainable parameter in `store` and every input tensor. `f` builds a scalar
/// on a fresh training-mode context; it must be deterministic.
pub fn layer_grad_check<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    f: F,
    eps: f64,
) -> Result<GradCheck>
where
    F: Fn(&mut Ctx, &[Var]) -> Result<Var>,
{
    let eval = |st: &ParamStore, xs: &[Tensor]| -> Result<f64> {
        let mut ctx = Ctx::new(st, true);
        let vars: Vec<Var> = xs.iter().map(|x| ctx.tape.leaf(x.clone())).collect();
        let out = f(&mut ctx, &vars)?;
        Ok(ctx.tape.value(out).item())
    };
    let (param_grads, input_grads) = {
        let mut ctx = Ctx::new(store, true);
        let vars: Vec<Var> = inputs.iter().map(|x| ctx.tape.leaf(x.clone())).collect();
        let out = f(&mut ctx, &vars)?;
        let grads = ctx.tape.backward(out)?;
        let ig: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(v, x)| {
                grads
                    .wrt(*v)
                    .map(|g| g.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; x.len()])
            })
            .collect();
        (grads.params(), ig)
    };
    let mut pairs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut work = store.clone();
    for (id, p) in store.iter().filter(|(_, p)| p.trainable) {
        let analytic = param_grads
            .iter()
            .find(|(pid, _)| *pid == id)
            .map(|(_, g)| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; p.value.len()]);
        let mut numeric = Vec::with_capacity(p.value.len());
        for i in 0..p.value.len() {
            let x0 = p.value.data()[i];
            work.get_mut(id).data_mut()[i] = x0 + eps;
            let up = eval(&work, inputs)?;
            work.get_mut(id).data_mut()[i] = x0 - eps;
            let down = eval(&work, inputs)?;
            work.get_mut(id).data_mut()[i] = x0;
            numeric.push((up - down) / (2.0 * eps));
        }
        pairs.push((analytic, numeric));
    }
    let mut xs = inputs.to_vec();
    for (n, x) in inputs.iter().enumerate() {
        let mut numeric = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            let x0 = x.data()[i];
            xs[n].data_mut()[i] = x0 + eps;
            let up = eval(store, &xs)?;
            xs[n].data_mut()[i] = x0 - eps;
            let down = eval(store, &xs)?;
            xs[n].data_mut()[i] = x0;
            numeric.push((up - down) / (2.0 * eps));
        }
        pairs.push((input_grads[n].clone(), numeric));
    }
    let total = pairs
        .iter()
        .flat_map(|p| &p.0)
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt();
    let per_input: Vec<f64> = pairs
        .iter()
        .map(|(a, n)| relative_error(a, n, total * GRAD_FLOOR))
        .collect();
    let max_rel_err = per_input.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheck {
        per_input,
        max_rel_err,
    })
}
