//! Deep multi-task network for joint group profiling and group
//! recommendation.
//!
//! Per member-item pair the network embeds the user and the item, weights
//! the item embedding with a softmax attention vector, and maps the combined
//! embedding through a shared layer to `z`. A group is represented by the
//! mean of its members' `z` vectors; a profiling head produces class logits
//! and a recommendation head turns those logits plus the item embedding into
//! a rating.

mod batch;

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::FeatureMatrix;
use crate::error::{Error, Result};
use crate::evalrank::rank_by_score;
use crate::numerics::{
    affine, cross_entropy_loss, dot, hadamard, init_param, matvec, relu, softmax, Adam, AdamConfig, GradTape, Matrix,
    ParamShape, Var, Vector,
};

/// Layer widths and training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmtlConfig {
    /// Embedding width.
    pub h1: usize,
    pub h_attn: usize,
    /// Shared-layer width.
    pub h2: usize,
    /// Number of profiling classes; equals the number of groups.
    pub classes: usize,
    /// Weight of the profiling loss.
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DmtlConfig {
    fn default() -> Self {
        Self {
            h1: 64,
            h_attn: 32,
            h2: 64,
            classes: 20,
            lambda: 0.5,
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 128,
            seed: 42,
        }
    }
}

impl DmtlConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("h1", self.h1),
            ("h_attn", self.h_attn),
            ("h2", self.h2),
            ("classes", self.classes),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("dmtl: {name} must be ≥ 1")));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("dmtl: lambda must be a finite value ≥ 0, got {}", self.lambda)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("dmtl: learning rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// All weights and biases of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmtlParams {
    pub w_u: Matrix,
    pub b_u: Vector,
    pub w_i: Matrix,
    pub b_i: Vector,
    pub w_concat: Matrix,
    pub b_concat: Vector,
    pub w_attn: Matrix,
    pub b_attn: Vector,
    pub w_score: Matrix,
    pub b_score: Vector,
    pub w_shared: Matrix,
    pub b_shared: Vector,
    pub w_profile: Matrix,
    pub b_profile: Vector,
    pub w_rec: Vector,
    pub w_item: Vector,
    pub b_rec: f64,
}

/// Tensor names in checkpoint and iteration order.
pub const TENSOR_NAMES: [&str; 17] = [
    "W_u", "b_u", "W_i", "b_i", "W_concat", "b_concat", "W_attn", "b_attn", "W_score", "b_score", "W_shared",
    "b_shared", "W_profile", "b_profile", "W_rec", "W_item", "b_rec",
];

impl DmtlParams {
    /// He-normal weights and zero biases for inputs of width `d_u` / `d_i`.
    pub fn init(d_u: usize, d_i: usize, config: &DmtlConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let DmtlConfig { h1, h_attn, h2, classes, .. } = *config;
        let mut weight = |rows, cols| -> Result<Matrix> {
            Ok(init_param(ParamShape::Weight { rows, cols }, rng)?.into_matrix().expect("weight"))
        };
        let w_u = weight(h1, d_u)?;
        let w_i = weight(h1, d_i)?;
        let w_concat = weight(h1, h1)?;
        let w_attn = weight(h_attn, h1)?;
        let w_score = weight(h1, h_attn)?;
        let w_shared = weight(h2, h1)?;
        let w_profile = weight(classes, h2)?;
        let w_rec = weight(1, classes)?.into_vec().into();
        let w_item = weight(1, h1)?.into_vec().into();
        Ok(Self {
            w_u,
            b_u: Vector::zeros(h1),
            w_i,
            b_i: Vector::zeros(h1),
            w_concat,
            b_concat: Vector::zeros(h1),
            w_attn,
            b_attn: Vector::zeros(h_attn),
            w_score,
            b_score: Vector::zeros(h1),
            w_shared,
            b_shared: Vector::zeros(h2),
            w_profile,
            b_profile: Vector::zeros(classes),
            w_rec,
            w_item,
            b_rec: 0.0,
        })
    }

    /// A zero-filled tensor set with the same shapes (used for gradients).
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        out
    }

    pub fn input_dims(&self) -> (usize, usize) {
        (self.w_u.cols(), self.w_i.cols())
    }

    pub fn classes(&self) -> usize {
        self.w_profile.rows()
    }

    /// Shapes in [`TENSOR_NAMES`] order; vectors have a single dimension.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let m = |w: &Matrix| vec![w.rows(), w.cols()];
        let v = |b: &Vector| vec![b.dim()];
        vec![
            m(&self.w_u),
            v(&self.b_u),
            m(&self.w_i),
            v(&self.b_i),
            m(&self.w_concat),
            v(&self.b_concat),
            m(&self.w_attn),
            v(&self.b_attn),
            m(&self.w_score),
            v(&self.b_score),
            m(&self.w_shared),
            v(&self.b_shared),
            m(&self.w_profile),
            v(&self.b_profile),
            v(&self.w_rec),
            v(&self.w_item),
            vec![],
        ]
    }

    pub fn tensors(&self) -> [&[f64]; 17] {
        [
            self.w_u.as_slice(),
            &self.b_u,
            self.w_i.as_slice(),
            &self.b_i,
            self.w_concat.as_slice(),
            &self.b_concat,
            self.w_attn.as_slice(),
            &self.b_attn,
            self.w_score.as_slice(),
            &self.b_score,
            self.w_shared.as_slice(),
            &self.b_shared,
            self.w_profile.as_slice(),
            &self.b_profile,
            &self.w_rec,
            &self.w_item,
            std::slice::from_ref(&self.b_rec),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 17] {
        [
            self.w_u.as_mut_slice(),
            &mut self.b_u,
            self.w_i.as_mut_slice(),
            &mut self.b_i,
            self.w_concat.as_mut_slice(),
            &mut self.b_concat,
            self.w_attn.as_mut_slice(),
            &mut self.b_attn,
            self.w_score.as_mut_slice(),
            &mut self.b_score,
            self.w_shared.as_mut_slice(),
            &mut self.b_shared,
            self.w_profile.as_mut_slice(),
            &mut self.b_profile,
            &mut self.w_rec,
            &mut self.w_item,
            std::slice::from_mut(&mut self.b_rec),
        ]
    }

    fn check(&self) -> Result<()> {
        let (h1, h_attn, h2, c) = (self.w_u.rows(), self.w_attn.rows(), self.w_shared.rows(), self.classes());
        let expected: [(&str, usize, usize); 7] = [
            ("W_i", self.w_i.rows(), h1),
            ("W_concat", self.w_concat.rows() * self.w_concat.cols(), h1 * h1),
            ("W_attn", self.w_attn.cols(), h1),
            ("W_score", self.w_score.rows() * self.w_score.cols(), h1 * h_attn),
            ("W_shared", self.w_shared.cols(), h1),
            ("W_profile", self.w_profile.cols(), h2),
            ("W_item", self.w_item.dim(), h1),
        ];
        for (name, got, want) in expected {
            if got != want {
                return Err(Error::shape("DmtlParams", format!("{name} size {got}"), format!("{want}")));
            }
        }
        let biases = [
            ("b_u", self.b_u.dim(), h1),
            ("b_i", self.b_i.dim(), h1),
            ("b_concat", self.b_concat.dim(), h1),
            ("b_attn", self.b_attn.dim(), h_attn),
            ("b_score", self.b_score.dim(), h1),
            ("b_shared", self.b_shared.dim(), h2),
            ("b_profile", self.b_profile.dim(), c),
            ("W_rec", self.w_rec.dim(), c),
        ];
        for (name, got, want) in biases {
            if got != want {
                return Err(Error::shape("DmtlParams", format!("{name} dim {got}"), format!("{want}")));
            }
        }
        if !self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite())) {
            return Err(Error::Domain("DmtlParams contain non-finite entries".into()));
        }
        Ok(())
    }
}

/// Every intermediate of one member-item forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub h_u: Vector,
    pub h_i: Vector,
    pub h_concat: Vector,
    pub h_attn: Vector,
    pub alpha: Vector,
    pub h_attn_item: Vector,
    pub h_combined: Vector,
    pub z: Vector,
    /// Profiling logits.
    pub logits: Vector,
    pub rating: f64,
}

/// Head outputs for a whole group on one item.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupOutput {
    pub logits: Vector,
    pub rating: f64,
}

fn add(a: &[f64], b: &[f64]) -> Vector {
    a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>().into()
}

fn heads(params: &DmtlParams, z: &[f64], h_i: &[f64]) -> Result<GroupOutput> {
    let logits = affine(&params.w_profile, z, &params.b_profile)?;
    let rating = dot(&params.w_rec, &logits) + dot(&params.w_item, h_i) + params.b_rec;
    Ok(GroupOutput { logits, rating })
}

/// Pair-level layers given the memoizable per-user and per-item terms
/// `c_u = W_concat·h_u` and `c_i = W_concat·h_i + b_concat`.
struct PairTrace {
    h_concat: Vector,
    h_attn: Vector,
    alpha: Vector,
    h_attn_item: Vector,
    h_combined: Vector,
    z: Vector,
}

fn pair_forward(params: &DmtlParams, h_u: &[f64], c_u: &[f64], h_i: &[f64], c_i: &[f64]) -> Result<PairTrace> {
    let h_concat = add(c_u, c_i);
    let h_attn = relu(&affine(&params.w_attn, &h_concat, &params.b_attn)?);
    let alpha = softmax(&affine(&params.w_score, &h_attn, &params.b_score)?);
    let h_attn_item = hadamard(&alpha, h_i)?;
    let h_combined = add(h_u, &h_attn_item);
    let z = relu(&affine(&params.w_shared, &h_combined, &params.b_shared)?);
    Ok(PairTrace {
        h_concat,
        h_attn,
        alpha,
        h_attn_item,
        h_combined,
        z,
    })
}

fn user_terms(params: &DmtlParams, x_u: &[f64]) -> Result<(Vector, Vector)> {
    let h_u = relu(&affine(&params.w_u, x_u, &params.b_u)?);
    let c_u = matvec(&params.w_concat, &h_u)?;
    Ok((h_u, c_u))
}

fn item_terms(params: &DmtlParams, x_i: &[f64]) -> Result<(Vector, Vector)> {
    let h_i = relu(&affine(&params.w_i, x_i, &params.b_i)?);
    let c_i = affine(&params.w_concat, &h_i, &params.b_concat)?;
    Ok((h_i, c_i))
}

/// One member-item forward pass through both heads.
pub fn forward(params: &DmtlParams, x_u: &[f64], x_i: &[f64]) -> Result<ForwardTrace> {
    params.check()?;
    let (h_u, c_u) = user_terms(params, x_u)?;
    let (h_i, c_i) = item_terms(params, x_i)?;
    let pair = pair_forward(params, &h_u, &c_u, &h_i, &c_i)?;
    let out = heads(params, &pair.z, &h_i)?;
    Ok(ForwardTrace {
        h_u,
        h_i,
        h_concat: pair.h_concat,
        h_attn: pair.h_attn,
        alpha: pair.alpha,
        h_attn_item: pair.h_attn_item,
        h_combined: pair.h_combined,
        z: pair.z,
        logits: out.logits,
        rating: out.rating,
    })
}

fn mean_of<'v>(vectors: impl Iterator<Item = &'v [f64]>, dim: usize) -> Vector {
    let mut out = vec![0.0; dim];
    let mut n = 0usize;
    for v in vectors {
        out.iter_mut().zip(v).for_each(|(o, x)| *o += x);
        n += 1;
    }
    out.iter_mut().for_each(|o| *o /= n as f64);
    out.into()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

/// Mean-pools member `z` vectors and applies both heads once. Checks that
/// the result equals the average of the per-member head outputs.
pub fn aggregate_group(params: &DmtlParams, traces: &[ForwardTrace]) -> Result<GroupOutput> {
    let Some(first) = traces.first() else {
        return Err(Error::Domain("aggregate_group: empty group".into()));
    };
    if traces.iter().any(|t| t.h_i != first.h_i) {
        return Err(Error::Domain("aggregate_group: member traces refer to different items".into()));
    }
    let z = mean_of(traces.iter().map(|t| &t.z[..]), first.z.dim());
    let pooled = heads(params, &z, &first.h_i)?;

    let mean_logits = mean_of(traces.iter().map(|t| &t.logits[..]), first.logits.dim());
    let mean_rating = traces.iter().map(|t| t.rating).sum::<f64>() / traces.len() as f64;
    let agrees =
        close(pooled.rating, mean_rating) && pooled.logits.iter().zip(mean_logits.iter()).all(|(a, b)| close(*a, *b));
    if !agrees {
        return Err(Error::Invariant(format!(
            "pooled heads disagree with member averages (rating {} vs {})",
            pooled.rating, mean_rating
        )));
    }
    Ok(pooled)
}

/// One group-level training or evaluation example.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSample {
    pub group: usize,
    pub item: usize,
    pub rating: f64,
}

/// Feature matrices and group membership the samples refer to.
#[derive(Clone, Copy, Debug)]
pub struct GroupData<'a> {
    pub users: &'a FeatureMatrix,
    pub items: &'a FeatureMatrix,
    /// Member user indices per group; the group index is its class label.
    pub members: &'a [Vec<usize>],
}

impl GroupData<'_> {
    fn check(&self, params: &DmtlParams, samples: &[GroupSample]) -> Result<()> {
        let (d_u, d_i) = params.input_dims();
        if self.users.dim() != d_u || self.items.dim() != d_i {
            return Err(Error::shape(
                "GroupData",
                format!("features {}/{}", self.users.dim(), self.items.dim()),
                format!("params {d_u}/{d_i}"),
            ));
        }
        for s in samples {
            if s.group >= params.classes() {
                return Err(Error::Index {
                    what: "profiling classes",
                    index: s.group,
                    len: params.classes(),
                });
            }
            let members = self.members.get(s.group).ok_or(Error::Index {
                what: "groups",
                index: s.group,
                len: self.members.len(),
            })?;
            if members.is_empty() {
                return Err(Error::Domain(format!("group {} has no members", s.group)));
            }
            if let Some(&u) = members.iter().find(|&&u| u >= self.users.entity_count()) {
                return Err(Error::Index {
                    what: "users",
                    index: u,
                    len: self.users.entity_count(),
                });
            }
            if s.item >= self.items.entity_count() {
                return Err(Error::Index {
                    what: "items",
                    index: s.item,
                    len: self.items.entity_count(),
                });
            }
        }
        Ok(())
    }
}

/// Loss value split into its two terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub rec: f64,
    pub profile: f64,
}

/// `L = L_rec + λ·L_profile` over a batch, computed without a tape.
pub fn loss(params: &DmtlParams, data: GroupData<'_>, batch: &[GroupSample], lambda: f64) -> Result<LossParts> {
    params.check()?;
    check_loss_inputs(params, data, batch, lambda)?;
    let mut rec = 0.0;
    let mut profile = 0.0;
    for s in batch {
        let traces = data.members[s.group]
            .iter()
            .map(|&u| forward(params, data.users.row(u), data.items.row(s.item)))
            .collect::<Result<Vec<_>>>()?;
        let out = aggregate_group(params, &traces)?;
        rec += (s.rating - out.rating).powi(2);
        profile += cross_entropy_loss(&out.logits, s.group)?;
    }
    let n = batch.len() as f64;
    let (rec, profile) = (rec / n, profile / n);
    Ok(LossParts {
        total: rec + lambda * profile,
        rec,
        profile,
    })
}

fn check_loss_inputs(params: &DmtlParams, data: GroupData<'_>, batch: &[GroupSample], lambda: f64) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Domain("loss of an empty batch".into()));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be ≥ 0, got {lambda}")));
    }
    data.check(params, batch)
}

struct ParamVars {
    vars: [Var; 17],
}

impl ParamVars {
    fn record<'a>(tape: &mut GradTape<'a>, p: &'a DmtlParams) -> Self {
        let vars = [
            tape.param_matrix(&p.w_u),
            tape.param_vector(&p.b_u),
            tape.param_matrix(&p.w_i),
            tape.param_vector(&p.b_i),
            tape.param_matrix(&p.w_concat),
            tape.param_vector(&p.b_concat),
            tape.param_matrix(&p.w_attn),
            tape.param_vector(&p.b_attn),
            tape.param_matrix(&p.w_score),
            tape.param_vector(&p.b_score),
            tape.param_matrix(&p.w_shared),
            tape.param_vector(&p.b_shared),
            tape.param_matrix(&p.w_profile),
            tape.param_vector(&p.b_profile),
            tape.param_vector(&p.w_rec),
            tape.param_vector(&p.w_item),
            tape.param_vector(std::slice::from_ref(&p.b_rec)),
        ];
        Self { vars }
    }
}

/// Loss and its gradient with respect to every parameter tensor, returned
/// in a parameter-shaped container. Runs each layer as one matrix product
/// over all member-item pairs of the batch.
pub fn loss_and_gradients(
    params: &DmtlParams,
    data: GroupData<'_>,
    batch: &[GroupSample],
    lambda: f64,
) -> Result<(LossParts, DmtlParams)> {
    params.check()?;
    check_loss_inputs(params, data, batch, lambda)?;
    Ok(batch::loss_and_gradients(params, data, batch, lambda))
}

/// Same quantities as [`loss_and_gradients`], recorded pair by pair on a
/// [`GradTape`]. Much slower; kept as a reference implementation.
pub fn tape_loss_and_gradients(
    params: &DmtlParams,
    data: GroupData<'_>,
    batch: &[GroupSample],
    lambda: f64,
) -> Result<(LossParts, DmtlParams)> {
    params.check()?;
    check_loss_inputs(params, data, batch, lambda)?;
    let mut tape = GradTape::new();
    let pv = ParamVars::record(&mut tape, params);
    let [w_u, b_u, w_i, b_i, w_concat, b_concat, w_attn, b_attn, w_score, b_score, w_shared, b_shared, w_profile, b_profile, w_rec, w_item, b_rec] =
        pv.vars;

    // user and item embeddings are shared by every pair in the batch
    let mut users: HashMap<usize, (Var, Var)> = HashMap::new();
    let mut items: HashMap<usize, (Var, Var)> = HashMap::new();
    let mut preds = Vec::with_capacity(batch.len());
    let mut ces = Vec::with_capacity(batch.len());
    for s in batch {
        let (h_i, c_i) = match items.get(&s.item) {
            Some(&t) => t,
            None => {
                let x = tape.input(data.items.row(s.item));
                let pre = tape.affine(w_i, x, Some(b_i))?;
                let h = tape.relu(pre)?;
                let c = tape.affine(w_concat, h, Some(b_concat))?;
                items.insert(s.item, (h, c));
                (h, c)
            }
        };
        let mut zs = Vec::with_capacity(data.members[s.group].len());
        for &u in &data.members[s.group] {
            let (h_u, c_u) = match users.get(&u) {
                Some(&t) => t,
                None => {
                    let x = tape.input(data.users.row(u));
                    let pre = tape.affine(w_u, x, Some(b_u))?;
                    let h = tape.relu(pre)?;
                    let c = tape.affine(w_concat, h, None)?;
                    users.insert(u, (h, c));
                    (h, c)
                }
            };
            let h_concat = tape.add(c_u, c_i)?;
            let pre = tape.affine(w_attn, h_concat, Some(b_attn))?;
            let h_attn = tape.relu(pre)?;
            let scores = tape.affine(w_score, h_attn, Some(b_score))?;
            let alpha = tape.softmax(scores)?;
            let h_attn_item = tape.mul(alpha, h_i)?;
            let h_combined = tape.add(h_u, h_attn_item)?;
            let pre = tape.affine(w_shared, h_combined, Some(b_shared))?;
            zs.push(tape.relu(pre)?);
        }
        let z = tape.mean(&zs)?;
        let logits = tape.affine(w_profile, z, Some(b_profile))?;
        let from_profile = tape.dot(w_rec, logits)?;
        let from_item = tape.dot(w_item, h_i)?;
        let r = tape.add(from_profile, from_item)?;
        preds.push(tape.add(r, b_rec)?);
        ces.push(tape.cross_entropy(logits, s.group)?);
    }
    let preds = tape.stack(&preds)?;
    let targets: Vec<f64> = batch.iter().map(|s| s.rating).collect();
    let rec = tape.mse(preds, &targets)?;
    let profile = tape.mean(&ces)?;
    let weighted = tape.scale(profile, lambda)?;
    let total = tape.add(rec, weighted)?;

    let parts = LossParts {
        total: tape.value(total)[0],
        rec: tape.value(rec)[0],
        profile: tape.value(profile)[0],
    };
    let grads = tape.backward(total)?;
    let mut out = params.zeros_like();
    for (dst, var) in out.tensors_mut().into_iter().zip(pv.vars) {
        dst.copy_from_slice(grads.wrt(var).expect("parameter gradient"));
    }
    Ok((parts, out))
}

/// Mean losses over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub rec: f64,
    pub profile: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: DmtlParams,
    pub log: Vec<EpochLog>,
}

pub fn train(config: &DmtlConfig, data: GroupData<'_>, samples: &[GroupSample]) -> Result<TrainOutcome> {
    train_with(config, data, samples, |_| {})
}

/// Adam on shuffled minibatches; `on_epoch` sees each epoch's log entry.
pub fn train_with(
    config: &DmtlConfig,
    data: GroupData<'_>,
    samples: &[GroupSample],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Domain("train: no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = DmtlParams::init(data.users.dim(), data.items.dim(), config, &mut rng)?;
    data.check(&params, samples)?;
    let lens: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
        &lens,
    );

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut batch = Vec::with_capacity(config.batch_size);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut rec, mut profile) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&k| samples[k]));
            let (parts, grads) = loss_and_gradients(&params, data, &batch, config.lambda)?;
            if !parts.total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    lr: config.learning_rate,
                    loss: parts.total,
                });
            }
            let n = batch.len() as f64;
            total += parts.total * n;
            rec += parts.rec * n;
            profile += parts.profile * n;
            let mut targets = params.tensors_mut();
            adam.step(&mut targets, &grads.tensors())?;
        }
        if !params.tensors().iter().all(|t| t.iter().all(|v| v.is_finite())) {
            return Err(Error::Divergence {
                epoch,
                lr: config.learning_rate,
                loss: f64::NAN,
            });
        }
        let n = samples.len() as f64;
        let entry = EpochLog {
            epoch,
            loss: total / n,
            rec: rec / n,
            profile: profile / n,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        if log.len() >= 2 && last.loss >= first.loss {
            return Err(Error::Invariant(format!(
                "training loss did not decrease: first epoch {}, last epoch {}",
                first.loss, last.loss
            )));
        }
    }
    Ok(TrainOutcome { params, log })
}

/// Inference with per-user and per-item embeddings computed once.
pub struct Predictor<'a> {
    params: &'a DmtlParams,
    features: (&'a FeatureMatrix, &'a FeatureMatrix),
    users: Vec<(Vector, Vector)>,
    items: Vec<(Vector, Vector)>,
}

impl<'a> Predictor<'a> {
    pub fn new(params: &'a DmtlParams, users: &'a FeatureMatrix, items: &'a FeatureMatrix) -> Result<Self> {
        params.check()?;
        let features = (users, items);
        let users = (0..users.entity_count())
            .map(|u| user_terms(params, users.row(u)))
            .collect::<Result<Vec<_>>>()?;
        let items = (0..items.entity_count())
            .map(|i| item_terms(params, items.row(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            params,
            features,
            users,
            items,
        })
    }

    pub fn params(&self) -> &DmtlParams {
        self.params
    }

    fn check_ids(&self, members: &[usize], item: usize) -> Result<()> {
        if item >= self.items.len() {
            return Err(Error::Index {
                what: "items",
                index: item,
                len: self.items.len(),
            });
        }
        if let Some(&u) = members.iter().find(|&&u| u >= self.users.len()) {
            return Err(Error::Index {
                what: "users",
                index: u,
                len: self.users.len(),
            });
        }
        Ok(())
    }

    /// Shared-layer output for one member-item pair.
    pub fn member_z(&self, user: usize, item: usize) -> Result<Vector> {
        self.check_ids(&[user], item)?;
        let (h_u, c_u) = &self.users[user];
        let (h_i, c_i) = &self.items[item];
        Ok(pair_forward(self.params, h_u, c_u, h_i, c_i)?.z)
    }

    /// Head outputs for a single member on an item.
    pub fn member_output(&self, user: usize, item: usize) -> Result<GroupOutput> {
        let z = self.member_z(user, item)?;
        heads(self.params, &z, &self.items[item].0)
    }

    /// Mean-pooled group representation through both heads.
    pub fn group_output(&self, members: &[usize], item: usize) -> Result<GroupOutput> {
        if members.is_empty() {
            return Err(Error::Domain("group_output: empty group".into()));
        }
        self.check_ids(members, item)?;
        let zs = members.iter().map(|&u| self.member_z(u, item)).collect::<Result<Vec<_>>>()?;
        let z = mean_of(zs.iter().map(|z| &z[..]), self.params.w_shared.rows());
        heads(self.params, &z, &self.items[item].0)
    }

    /// Unclipped group rating prediction.
    pub fn predict_group(&self, members: &[usize], item: usize) -> Result<f64> {
        Ok(self.group_output(members, item)?.rating)
    }

    /// Unclipped group ratings for many `(members, item)` queries, batched
    /// like training. Agrees with [`Self::predict_group`] up to rounding.
    pub fn predict_groups(&self, queries: &[(&[usize], usize)]) -> Result<Vec<f64>> {
        for (members, item) in queries {
            if members.is_empty() {
                return Err(Error::Domain("predict_groups: empty group".into()));
            }
            self.check_ids(members, *item)?;
        }
        let mut out = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(256) {
            let outputs = batch::group_outputs(self.params, self.features.0, self.features.1, chunk.iter().copied());
            out.extend(outputs.into_iter().map(|(_, r)| r));
        }
        Ok(out)
    }

    /// Candidates ordered by predicted group rating, highest first, ties by
    /// lower item index; at most `k` entries.
    pub fn recommend_top_k(&self, members: &[usize], candidates: &[usize], k: usize) -> Result<Vec<usize>> {
        let scored = candidates
            .iter()
            .map(|&i| Ok((i, self.predict_group(members, i)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(rank_by_score(&scored, k))
    }
}

/// One named tensor in a checkpoint; `shape` is empty for the scalar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// JSON checkpoint: the configuration plus every tensor, row-major, in
/// [`TENSOR_NAMES`] order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: DmtlConfig,
    pub tensors: Vec<NamedTensor>,
}

const CHECKPOINT_FORMAT: &str = "grouprec-dmtl";

impl Checkpoint {
    pub fn new(config: &DmtlConfig, params: &DmtlParams) -> Self {
        let tensors = TENSOR_NAMES
            .iter()
            .zip(params.shapes())
            .zip(params.tensors())
            .map(|((name, shape), data)| NamedTensor {
                name: name.to_string(),
                shape,
                data: data.to_vec(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            config: config.clone(),
            tensors,
        }
    }

    pub fn into_params(self) -> Result<(DmtlConfig, DmtlParams)> {
        if self.format != CHECKPOINT_FORMAT || self.version != 1 {
            return Err(Error::Schema(format!("unsupported checkpoint {} v{}", self.format, self.version)));
        }
        if self.tensors.len() != TENSOR_NAMES.len() {
            return Err(Error::Schema(format!("checkpoint has {} tensors, expected {}", self.tensors.len(), 17)));
        }
        let mut by_name: HashMap<&str, &NamedTensor> = HashMap::new();
        for t in &self.tensors {
            let expected: usize = t.shape.iter().product();
            if t.data.len() != expected {
                return Err(Error::Schema(format!("tensor {} has {} values for shape {:?}", t.name, t.data.len(), t.shape)));
            }
            by_name.insert(&t.name, t);
        }
        let get = |name: &str| -> Result<&NamedTensor> {
            by_name.get(name).copied().ok_or_else(|| Error::Schema(format!("checkpoint lacks tensor {name}")))
        };
        let matrix = |name: &str| -> Result<Matrix> {
            let t = get(name)?;
            match t.shape[..] {
                [r, c] => Matrix::from_vec(r, c, t.data.clone()),
                _ => Err(Error::Schema(format!("tensor {name} should be 2-D, got {:?}", t.shape))),
            }
        };
        let vector = |name: &str| -> Result<Vector> {
            let t = get(name)?;
            match t.shape[..] {
                [_] => Ok(t.data.clone().into()),
                _ => Err(Error::Schema(format!("tensor {name} should be 1-D, got {:?}", t.shape))),
            }
        };
        let b_rec = get("b_rec")?;
        if !b_rec.shape.is_empty() {
            return Err(Error::Schema("tensor b_rec should be a scalar".into()));
        }
        let params = DmtlParams {
            w_u: matrix("W_u")?,
            b_u: vector("b_u")?,
            w_i: matrix("W_i")?,
            b_i: vector("b_i")?,
            w_concat: matrix("W_concat")?,
            b_concat: vector("b_concat")?,
            w_attn: matrix("W_attn")?,
            b_attn: vector("b_attn")?,
            w_score: matrix("W_score")?,
            b_score: vector("b_score")?,
            w_shared: matrix("W_shared")?,
            b_shared: vector("b_shared")?,
            w_profile: matrix("W_profile")?,
            b_profile: vector("b_profile")?,
            w_rec: vector("W_rec")?,
            w_item: vector("W_item")?,
            b_rec: b_rec.data[0],
        };
        params.check().map_err(|e| Error::Schema(format!("inconsistent checkpoint: {e}")))?;
        Ok((self.config, params))
    }

    pub fn write(&self, out: impl Write) -> Result<()> {
        serde_json::to_writer(out, self)?;
        Ok(())
    }

    pub fn read(input: impl Read) -> Result<Self> {
        Ok(serde_json::from_reader(input)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_config(classes: usize) -> DmtlConfig {
        DmtlConfig {
            h1: 4,
            h_attn: 3,
            h2: 5,
            classes,
            ..DmtlConfig::default()
        }
    }

    fn random_params(seed: u64, d_u: usize, d_i: usize, config: &DmtlConfig) -> DmtlParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = DmtlParams::init(d_u, d_i, config, &mut rng).unwrap();
        // non-zero biases exercise every path
        for t in p.tensors_mut() {
            for v in t.iter_mut() {
                if *v == 0.0 {
                    *v = rng.random_range(-0.3..0.3);
                }
            }
        }
        p
    }

    fn random_features(rng: &mut ChaCha8Rng, n: usize, d: usize) -> FeatureMatrix {
        let data = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureMatrix::new(Matrix::from_vec(n, d, data).unwrap()).unwrap()
    }

    fn identity_params() -> DmtlParams {
        let eye = Matrix::identity(2);
        DmtlParams {
            w_u: eye.clone(),
            b_u: Vector::zeros(2),
            w_i: eye.clone(),
            b_i: Vector::zeros(2),
            w_concat: eye.clone(),
            b_concat: Vector::zeros(2),
            w_attn: eye.clone(),
            b_attn: Vector::zeros(2),
            w_score: eye.clone(),
            b_score: Vector::zeros(2),
            w_shared: eye.clone(),
            b_shared: Vector::zeros(2),
            w_profile: eye,
            b_profile: Vector::zeros(2),
            w_rec: vec![1.0, 1.0].into(),
            w_item: vec![1.0, 1.0].into(),
            b_rec: 0.0,
        }
    }

    #[test]
    fn identity_forward_trace() {
        let t = forward(&identity_params(), &[1.0, -1.0], &[2.0, 0.0]).unwrap();
        assert_eq!(&t.h_u[..], &[1.0, 0.0]);
        assert_eq!(&t.h_i[..], &[2.0, 0.0]);
        assert_eq!(&t.h_concat[..], &[3.0, 0.0]);
        let a0 = 1.0 / (1.0 + (-3.0f64).exp());
        assert_abs_diff_eq!(t.alpha[0], a0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.alpha[0], 0.9526, epsilon = 1e-4);
        assert_abs_diff_eq!(t.alpha[1], 0.0474, epsilon = 1e-4);
        assert_abs_diff_eq!(t.h_attn_item[0], 2.0 * a0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.h_attn_item[0], 1.9052, epsilon = 1e-4);
        assert_eq!(t.h_attn_item[1], 0.0);
        assert_abs_diff_eq!(t.h_combined[0], 1.0 + 2.0 * a0, epsilon = 1e-12);
        assert_eq!(t.h_combined[1], 0.0);
    }

    #[test]
    fn zero_item_features_pass_user_embedding_through() {
        let config = small_config(3);
        let mut p = random_params(1, 5, 6, &config);
        p.b_i.iter_mut().for_each(|b| *b = -0.1);
        let t = forward(&p, &[0.2, -0.3, 0.5, 0.1, 0.0], &[0.0; 6]).unwrap();
        assert!(t.h_i.iter().all(|&v| v == 0.0));
        assert!(t.h_attn_item.iter().all(|&v| v == 0.0));
        assert_eq!(t.h_combined, t.h_u);
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let p = random_params(2, 5, 6, &small_config(3));
        assert!(matches!(forward(&p, &[0.0; 4], &[0.0; 6]), Err(Error::Shape { .. })));
        assert!(matches!(forward(&p, &[0.0; 5], &[0.0; 7]), Err(Error::Shape { .. })));
    }

    #[test]
    fn aggregate_singleton_and_twins() {
        let p = random_params(3, 4, 4, &small_config(3));
        let t = forward(&p, &[0.1, 0.2, -0.3, 0.4], &[0.5, -0.1, 0.2, 0.3]).unwrap();
        let one = aggregate_group(&p, std::slice::from_ref(&t)).unwrap();
        assert_eq!(one.logits, t.logits);
        assert_abs_diff_eq!(one.rating, t.rating, epsilon = 1e-15);
        let two = aggregate_group(&p, &[t.clone(), t.clone()]).unwrap();
        assert_abs_diff_eq!(two.rating, t.rating, epsilon = 1e-12);
        assert!(matches!(aggregate_group(&p, &[]), Err(Error::Domain(_))));
        let other = forward(&p, &[0.1, 0.2, -0.3, 0.4], &[0.9, 0.1, 0.2, 0.3]).unwrap();
        assert!(aggregate_group(&p, &[t, other]).is_err());
    }

    #[test]
    fn single_example_loss_with_uniform_logits() {
        // zero profile head gives uniform logits; rating head reads only b_rec
        let config = small_config(20);
        let mut p = random_params(4, 3, 3, &config);
        p.w_profile.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        p.b_profile.iter_mut().for_each(|v| *v = 0.0);
        p.w_item.iter_mut().for_each(|v| *v = 0.0);
        p.b_rec = 3.0;
        let users = FeatureMatrix::new(Matrix::from_rows(&[vec![0.1, 0.2, 0.3]]).unwrap()).unwrap();
        let items = users.clone();
        let mut members = vec![Vec::new(); 20];
        members[7] = vec![0];
        let data = GroupData {
            users: &users,
            items: &items,
            members: &members,
        };
        let batch = [GroupSample {
            group: 7,
            item: 0,
            rating: 4.0,
        }];
        let l = loss(&p, data, &batch, 1.0).unwrap();
        assert_abs_diff_eq!(l.total, 1.0 + 20f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(l.total, 3.9957, epsilon = 1e-4);
        let l0 = loss(&p, data, &batch, 0.0).unwrap();
        assert_eq!(l0.total, l0.rec);
        let bad = [GroupSample { group: 20, ..batch[0] }];
        assert!(matches!(loss(&p, data, &bad, 1.0), Err(Error::Index { .. })));
    }

    struct Fixture {
        users: FeatureMatrix,
        items: FeatureMatrix,
        members: Vec<Vec<usize>>,
        samples: Vec<GroupSample>,
    }

    impl Fixture {
        fn new(seed: u64, d_u: usize, d_i: usize, classes: usize) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n_users = 3 * classes;
            let users = random_features(&mut rng, n_users, d_u);
            let items = random_features(&mut rng, 5, d_i);
            let members = (0..classes).map(|g| (0..n_users).filter(|u| u % classes == g).collect()).collect();
            let samples = (0..classes)
                .flat_map(|g| (0..5).map(move |i| (g, i)))
                .map(|(group, item)| GroupSample {
                    group,
                    item,
                    rating: rng.random_range(1.0..5.0),
                })
                .collect();
            Self {
                users,
                items,
                members,
                samples,
            }
        }

        fn data(&self) -> GroupData<'_> {
            GroupData {
                users: &self.users,
                items: &self.items,
                members: &self.members,
            }
        }
    }

    #[test]
    fn tape_loss_matches_plain_loss() {
        let f = Fixture::new(5, 6, 7, 3);
        let p = random_params(5, 6, 7, &small_config(3));
        let plain = loss(&p, f.data(), &f.samples, 0.7).unwrap();
        let (taped, _) = loss_and_gradients(&p, f.data(), &f.samples, 0.7).unwrap();
        assert_abs_diff_eq!(plain.total, taped.total, epsilon = 1e-12);
        assert_abs_diff_eq!(plain.rec, taped.rec, epsilon = 1e-12);
        assert_abs_diff_eq!(plain.profile, taped.profile, epsilon = 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let f = Fixture::new(seed, 6, 5, 3);
            let mut p = random_params(seed, 6, 5, &small_config(3));
            let (_, grads) = loss_and_gradients(&p, f.data(), &f.samples, 0.5).unwrap();
            let grads: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
            let h = 1e-5;
            for (t, g) in grads.iter().enumerate() {
                for k in 0..g.len() {
                    let orig = p.tensors()[t][k];
                    p.tensors_mut()[t][k] = orig + h;
                    let up = loss(&p, f.data(), &f.samples, 0.5).unwrap().total;
                    p.tensors_mut()[t][k] = orig - h;
                    let down = loss(&p, f.data(), &f.samples, 0.5).unwrap().total;
                    p.tensors_mut()[t][k] = orig;
                    let numeric = (up - down) / (2.0 * h);
                    let rel = (numeric - g[k]).abs() / numeric.abs().max(g[k].abs()).max(1e-6);
                    assert!(rel < 1e-4, "{} [{k}]: {} vs {numeric}", TENSOR_NAMES[t], g[k]);
                }
            }
        }
    }

    #[test]
    fn batched_gradients_match_tape() {
        for seed in 0..4 {
            let mut f = Fixture::new(seed, 6, 5, 3);
            // overlapping memberships and a repeated sample
            f.members[1].push(0);
            f.members[2].extend([0, 1]);
            f.samples.push(f.samples[0]);
            let p = random_params(seed, 6, 5, &small_config(3));
            let (a, ga) = loss_and_gradients(&p, f.data(), &f.samples, 0.3).unwrap();
            let (b, gb) = tape_loss_and_gradients(&p, f.data(), &f.samples, 0.3).unwrap();
            assert_abs_diff_eq!(a.total, b.total, epsilon = 1e-12);
            assert_abs_diff_eq!(a.rec, b.rec, epsilon = 1e-12);
            assert_abs_diff_eq!(a.profile, b.profile, epsilon = 1e-12);
            for (t, (x, y)) in ga.tensors().iter().zip(gb.tensors()).enumerate() {
                for (k, (u, v)) in x.iter().zip(y.iter()).enumerate() {
                    assert!((u - v).abs() <= 1e-12 * (1.0 + v.abs()), "{} [{k}]: {u} vs {v}", TENSOR_NAMES[t]);
                }
            }
        }
    }

    #[test]
    fn batched_group_predictions_match_predictor() {
        let f = Fixture::new(11, 6, 5, 3);
        let p = random_params(11, 6, 5, &small_config(3));
        let pred = Predictor::new(&p, &f.users, &f.items).unwrap();
        let queries: Vec<(&[usize], usize)> = f.samples.iter().map(|s| (&f.members[s.group][..], s.item)).collect();
        let batched = pred.predict_groups(&queries).unwrap();
        for ((members, item), b) in queries.iter().zip(batched) {
            let one = pred.predict_group(members, *item).unwrap();
            assert!((one - b).abs() <= 1e-12 * (1.0 + one.abs()));
        }
        assert!(pred.predict_groups(&[(&[], 0)]).is_err());
        assert!(pred.predict_groups(&[(&[0], 99)]).is_err());
    }

    #[test]
    fn lambda_changes_profile_gradients_not_initial_rec_loss() {
        let f = Fixture::new(6, 4, 4, 3);
        let p = random_params(6, 4, 4, &small_config(3));
        let (a, ga) = loss_and_gradients(&p, f.data(), &f.samples, 0.0).unwrap();
        let (b, gb) = loss_and_gradients(&p, f.data(), &f.samples, 1.0).unwrap();
        assert_eq!(a.rec, b.rec);
        assert_ne!(ga.b_profile, gb.b_profile);
    }

    #[test]
    fn linearity_bridge_on_random_groups() {
        let config = small_config(4);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_params(seed, 5, 6, &config);
            let users = random_features(&mut rng, 3, 5);
            let item = random_features(&mut rng, 1, 6);
            let traces: Vec<_> = (0..3).map(|u| forward(&p, users.row(u), item.row(0)).unwrap()).collect();
            let pooled = aggregate_group(&p, &traces).unwrap();
            let mean_rating = traces.iter().map(|t| t.rating).sum::<f64>() / 3.0;
            assert_abs_diff_eq!(pooled.rating, mean_rating, epsilon = 1e-9);
        }
    }

    #[test]
    fn predictor_matches_forward() {
        let f = Fixture::new(7, 5, 5, 2);
        let p = random_params(7, 5, 5, &small_config(2));
        let pred = Predictor::new(&p, &f.users, &f.items).unwrap();
        let t = forward(&p, f.users.row(1), f.items.row(2)).unwrap();
        assert_eq!(pred.member_z(1, 2).unwrap(), t.z);
        assert_abs_diff_eq!(pred.member_output(1, 2).unwrap().rating, t.rating, epsilon = 1e-12);
        let traces: Vec<_> = f.members[0].iter().map(|&u| forward(&p, f.users.row(u), f.items.row(3)).unwrap()).collect();
        let agg = aggregate_group(&p, &traces).unwrap();
        assert_abs_diff_eq!(pred.predict_group(&f.members[0], 3).unwrap(), agg.rating, epsilon = 1e-12);
    }

    #[test]
    fn recommend_orders_by_score_with_index_ties() {
        let f = Fixture::new(8, 4, 4, 2);
        let p = random_params(8, 4, 4, &small_config(2));
        let pred = Predictor::new(&p, &f.users, &f.items).unwrap();
        let members = &f.members[1];
        let all: Vec<usize> = (0..5).collect();
        let mut oracle: Vec<(usize, f64)> = all.iter().map(|&i| (i, pred.predict_group(members, i).unwrap())).collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let ranked = pred.recommend_top_k(members, &all, 10).unwrap();
        assert_eq!(ranked, oracle.iter().map(|x| x.0).collect::<Vec<_>>());
        assert_eq!(pred.recommend_top_k(members, &all, 2).unwrap(), ranked[..2]);
        // duplicated candidate with equal scores keeps the lower index first
        let mut q = p.clone();
        q.w_rec.iter_mut().for_each(|v| *v = 0.0);
        q.w_item.iter_mut().for_each(|v| *v = 0.0);
        let flat = Predictor::new(&q, &f.users, &f.items).unwrap();
        assert_eq!(flat.recommend_top_k(members, &[3, 1, 4, 0], 3).unwrap(), vec![0, 1, 3]);
    }

    #[test]
    fn planted_linear_model_is_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let items = random_features(&mut rng, 50, 6);
        let users = random_features(&mut rng, 4, 5);
        let members = vec![vec![0, 1], vec![2, 3]];
        let w: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let samples: Vec<GroupSample> = (0..50)
            .map(|i| GroupSample {
                group: i % 2,
                item: i,
                rating: 3.0 + dot(&w, items.row(i)),
            })
            .collect();
        let config = DmtlConfig {
            h1: 8,
            h_attn: 4,
            h2: 8,
            classes: 2,
            lambda: 0.1,
            learning_rate: 1e-2,
            epochs: 200,
            batch_size: 16,
            seed: 1,
        };
        let data = GroupData {
            users: &users,
            items: &items,
            members: &members,
        };
        let out = train(&config, data, &samples).unwrap();
        let first = out.log[0].rec;
        let last = out.log.last().unwrap().rec;
        assert!(last < 0.1 * first, "{first} -> {last}");
        let again = train(&config, data, &samples).unwrap();
        assert_eq!(out.params, again.params);
    }

    #[test]
    fn lambda_zero_leaves_profiling_at_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let items = random_features(&mut rng, 60, 6);
        let users = random_features(&mut rng, 8, 5);
        let members: Vec<Vec<usize>> = (0..4).map(|g| vec![2 * g, 2 * g + 1]).collect();
        // labels unrelated to the rating signal
        let samples: Vec<GroupSample> = (0..240)
            .map(|k| GroupSample {
                group: k % 4,
                item: k % 60,
                rating: 3.0 + items.row(k % 60)[0],
            })
            .collect();
        let config = DmtlConfig {
            h1: 8,
            h_attn: 4,
            h2: 8,
            classes: 4,
            lambda: 0.0,
            learning_rate: 5e-3,
            epochs: 40,
            batch_size: 32,
            seed: 3,
        };
        let data = GroupData {
            users: &users,
            items: &items,
            members: &members,
        };
        let out = train(&config, data, &samples).unwrap();
        assert!(out.log.last().unwrap().rec < out.log[0].rec);
        let pred = Predictor::new(&out.params, &users, &items).unwrap();
        let hits = samples
            .iter()
            .filter(|s| {
                let logits = pred.group_output(&members[s.group], s.item).unwrap().logits;
                let arg = (0..4).max_by(|&a, &b| logits[a].total_cmp(&logits[b])).unwrap();
                arg == s.group
            })
            .count();
        let accuracy = hits as f64 / samples.len() as f64;
        assert!(accuracy < 0.6, "accuracy {accuracy}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let config = small_config(3);
        let p = random_params(11, 5, 4, &config);
        let mut buf = Vec::new();
        Checkpoint::new(&config, &p).write(&mut buf).unwrap();
        let (c2, p2) = Checkpoint::read(&buf[..]).unwrap().into_params().unwrap();
        assert_eq!(c2, config);
        assert_eq!(p2, p);
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let config = small_config(3);
        let p = random_params(12, 5, 4, &config);
        let mut cp = Checkpoint::new(&config, &p);
        cp.tensors[3].data.pop();
        assert!(matches!(cp.clone().into_params(), Err(Error::Schema(_))));
        let mut cp = Checkpoint::new(&config, &p);
        cp.tensors.retain(|t| t.name != "W_attn");
        assert!(matches!(cp.into_params(), Err(Error::Schema(_))));
    }

    #[test]
    fn divergence_is_reported() {
        let f = Fixture::new(13, 4, 4, 2);
        let config = DmtlConfig {
            learning_rate: 1e300,
            epochs: 3,
            ..small_config(2)
        };
        match train(&config, f.data(), &f.samples) {
            Err(Error::Divergence { lr, .. }) => assert_eq!(lr, 1e300),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn attention_is_a_distribution(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_params(seed, 4, 3, &small_config(2));
            let x_u: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
            let x_i: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
            let t = forward(&p, &x_u, &x_i).unwrap();
            prop_assert!(t.alpha.iter().all(|&a| a >= 0.0));
            prop_assert!((t.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn ranking_ignores_positive_affine_transforms(scores in proptest::collection::vec(-50i32..50, 1..12), shift in 0u32..6, b in -100i32..100) {
            // exact arithmetic: integer scores, power-of-two scale, integer offset
            let a = f64::from(1u32 << shift);
            let scored: Vec<(usize, f64)> = scores.iter().map(|&s| f64::from(s) / 4.0).enumerate().collect();
            let moved: Vec<(usize, f64)> = scored.iter().map(|&(i, s)| (i, a * s + f64::from(b))).collect();
            prop_assert_eq!(rank_by_score(&scored, 5), rank_by_score(&moved, 5));
        }
    }
}
