//! The iterative attack: gradient matching by double backpropagation.
//!
//! A guessed batch X̂ (and guessed label scores Ŷ) is pushed through the
//! model graph, the gradient the victim *would* have shared is built as
//! graph nodes, and the distance to the observed gradient becomes the
//! objective. Since that objective is itself made of gradient nodes, one
//! more `gradient` call yields d loss / d X̂ — the double backprop the
//! whole engine rests on. Updates are Adam steps; an optional regularizer
//! with a decaying weight λ steers batch reconstructions apart.
//!
//! `reconstruct` picks between three routes: a single MLP instance is
//! recovered in closed form (no iterations); a single CNN instance is
//! demixed in closed form and only the deconvolution — matching the
//! recovered conv output instead of the full gradient — is iterated; and
//! everything else runs full gradient matching.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::closed_form;
use crate::error::{Error, Result};
use crate::feasibility;
use crate::metrics;
use crate::models::{
    append_cnn_instance, append_conv_output, append_mlp_instance, lift_bias, param_constants,
    Arch, GradientBundle, ModelParams,
};
use crate::tensor::Tensor;

/// Distribution the initial guesses are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Prior {
    Uniform01,
    StandardNormal,
}

/// Penalty added to the gradient-matching loss (full-matching runs only).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regularizer {
    None,
    /// Sum of squared inner products over ordered pairs of instances.
    Orthogonality,
    /// Sum of squared instance norms.
    L2,
}

/// How a run ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TerminationReason {
    /// Answered analytically; no iterations were run.
    ClosedForm,
    /// Ran the full iteration budget.
    Completed,
    /// Loss left the finite range; the best iterate seen was returned.
    Diverged,
}

/// Which quantity the optimizer matches.
#[derive(Clone, Debug)]
pub enum MatchObjective {
    /// Match the full parameter gradient; optimizes X̂ and Ŷ ("all").
    FullBundle,
    /// Match a recovered conv output `[h, d', d']`; optimizes X̂ only
    /// ("partial") — the deconvolution half of the two-step CNN attack.
    ConvOutput(Tensor),
}

/// Boolean mask over a gradient bundle: 1.0 keeps a coordinate in the
/// matching objective, 0.0 removes it. Entries align with
/// `GradientBundle::grads`.
#[derive(Clone, Debug)]
pub struct GradientMask {
    pub keep: Vec<Tensor>,
}

impl GradientMask {
    /// Mask that keeps everything, shaped after `template`.
    pub fn all_ones(template: &GradientBundle) -> Self {
        GradientMask {
            keep: template.grads.iter().map(|g| Tensor::filled(g.shape(), 1.0)).collect(),
        }
    }

    /// Removes one gradient tensor (weight or bias) from the objective.
    pub fn without_tensor(mut self, idx: usize) -> Self {
        self.keep[idx] = Tensor::zeros(self.keep[idx].shape());
        self
    }

    /// Removes a whole layer (its weight and bias) from the objective.
    pub fn without_layer(self, layer: usize) -> Self {
        self.without_tensor(2 * layer).without_tensor(2 * layer + 1)
    }

    /// True when tensor `idx` is kept in full.
    pub fn keeps_tensor(&self, idx: usize) -> bool {
        self.keep.get(idx).is_some_and(|t| t.data().iter().all(|&v| v == 1.0))
    }

    fn validate_against(&self, target: &GradientBundle) -> Result<()> {
        if self.keep.len() != target.grads.len() {
            return Err(Error::Contract(format!(
                "mask has {} tensors, gradient has {}",
                self.keep.len(),
                target.grads.len()
            )));
        }
        for (m, g) in self.keep.iter().zip(&target.grads) {
            if m.shape() != g.shape() {
                return Err(Error::shape("gradient mask", m.shape(), g.shape()));
            }
            if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Contract("mask entries must be 0 or 1".into()));
            }
        }
        if self.keep.iter().all(|m| m.data().iter().all(|&v| v == 0.0)) {
            return Err(Error::Contract(
                "mask removes every gradient coordinate from the objective".into(),
            ));
        }
        Ok(())
    }

    /// Zeroes the masked-out coordinates of a bundle — the observable part.
    pub fn apply(&self, bundle: &GradientBundle) -> Result<GradientBundle> {
        self.validate_against(bundle)?;
        let grads = bundle
            .grads
            .iter()
            .zip(&self.keep)
            .map(|(g, m)| g.mul(m))
            .collect::<Result<_>>()?;
        Ok(GradientBundle {
            grads,
            batch_size: bundle.batch_size,
        })
    }
}

/// Everything one reconstruction run needs.
#[derive(Clone, Debug)]
pub struct ReconJob {
    /// The observed (averaged) gradient.
    pub target: GradientBundle,
    /// Model parameters at the observed round — known to the attacker.
    pub params: ModelParams,
    pub arch: Arch,
    /// Assumed batch size; must agree with `target.batch_size`.
    pub batch: usize,
    pub prior: Prior,
    pub iterations: usize,
    pub learning_rate: f64,
    pub regularizer: Regularizer,
    pub lambda0: f64,
    /// Decay λ every this many iterations (0 disables decay).
    pub decay_interval: usize,
    pub decay_factor: f64,
    pub seed: u64,
    /// Restricts the matching objective to the unmasked coordinates.
    pub mask: Option<GradientMask>,
    /// When set, a matched mean-L1 trajectory is recorded against these
    /// instances (evaluation only — never enters the objective).
    pub ground_truth: Option<Vec<Tensor>>,
}

impl ReconJob {
    pub fn new(target: GradientBundle, params: ModelParams, arch: Arch, batch: usize) -> Self {
        ReconJob {
            target,
            params,
            arch,
            batch,
            prior: Prior::Uniform01,
            iterations: 5000,
            learning_rate: 0.05,
            regularizer: Regularizer::None,
            lambda0: 0.0,
            decay_interval: 200,
            decay_factor: 0.9,
            seed: 0,
            mask: None,
            ground_truth: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.batch == 0 {
            return Err(Error::invalid("ReconJob", "batch must be at least 1"));
        }
        if self.batch != self.target.batch_size {
            return Err(Error::Contract(format!(
                "job assumes batch {}, but the gradient records batch {}",
                self.batch, self.target.batch_size
            )));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("ReconJob", "need at least one iteration"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("ReconJob", "learning rate must be positive"));
        }
        if !(self.lambda0 >= 0.0 && self.lambda0.is_finite()) {
            return Err(Error::invalid("ReconJob", "lambda0 must be non-negative"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::invalid("ReconJob", "decay factor must be in (0, 1]"));
        }
        if self.target.grads.len() != 2 * self.params.layers.len() {
            return Err(Error::Contract(format!(
                "gradient has {} tensors for {} parameter layers",
                self.target.grads.len(),
                self.params.layers.len()
            )));
        }
        for (i, layer) in self.params.layers.iter().enumerate() {
            if self.target.grads[2 * i].shape() != layer.weight.shape()
                || self.target.grads[2 * i + 1].shape() != layer.bias.shape()
            {
                return Err(Error::Contract(format!(
                    "gradient tensor shapes disagree with parameters at layer {i}"
                )));
            }
        }
        if let Some(mask) = &self.mask {
            mask.validate_against(&self.target)?;
        }
        if let Some(truth) = &self.ground_truth {
            if truth.len() != self.batch {
                return Err(Error::Contract(format!(
                    "{} ground-truth instances for batch {}",
                    truth.len(),
                    self.batch
                )));
            }
        }
        Ok(())
    }

    /// The (X̂₀, Ŷ₀) the run starts from: per instance, one input draw then
    /// one label-score draw, all from the job seed.
    pub fn initial_iterates(&self) -> (Vec<Tensor>, Vec<Tensor>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let input_shape = self.arch.graph_input_shape();
        let classes = self.arch.classes();
        let mut xs = Vec::with_capacity(self.batch);
        let mut ys = Vec::with_capacity(self.batch);
        for _ in 0..self.batch {
            let (x, y) = match self.prior {
                Prior::Uniform01 => (
                    Tensor::uniform(&input_shape, 0.0, 1.0, &mut rng),
                    Tensor::uniform(&[classes, 1], 0.0, 1.0, &mut rng),
                ),
                Prior::StandardNormal => (
                    Tensor::standard_normal(&input_shape, &mut rng),
                    Tensor::standard_normal(&[classes, 1], &mut rng),
                ),
            };
            xs.push(x);
            ys.push(y);
        }
        (xs, ys)
    }
}

/// What a reconstruction run produced.
#[derive(Clone, Debug)]
pub struct ReconResult {
    /// Reconstructed instances: `[d]` per MLP instance, `[C, d, d]` per CNN
    /// instance. Order is arbitrary — match before comparing.
    pub x_hat: Vec<Tensor>,
    /// Guessed label scores (logits) per instance, when labels were part of
    /// the objective.
    pub y_hat: Option<Vec<Tensor>>,
    /// Objective value per completed iteration.
    pub loss_trajectory: Vec<f64>,
    /// Matched mean L1 against `ground_truth` per completed iteration.
    pub l1_trajectory: Option<Vec<f64>>,
    pub iterations_run: usize,
    pub terminated: TerminationReason,
    pub warnings: Vec<String>,
}

/// λ in effect at 0-based iteration `i`: decays by `decay_factor` every
/// `decay_interval` iterations (the first `decay_interval` iterations run
/// at `lambda0`).
pub fn lambda_at(lambda0: f64, decay_interval: usize, decay_factor: f64, i: usize) -> f64 {
    if decay_interval == 0 {
        return lambda0;
    }
    lambda0 * decay_factor.powi((i / decay_interval) as i32)
}

/// Orthogonality penalty: Σ over ordered pairs k ≠ k′ of (x̂_k · x̂_k′)².
/// Zero for a single instance.
pub fn orth_regularizer(batch: &[Tensor]) -> f64 {
    let mut total = 0.0;
    for (k, a) in batch.iter().enumerate() {
        for (kp, b) in batch.iter().enumerate() {
            if k == kp {
                continue;
            }
            let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
            total += dot * dot;
        }
    }
    total
}

/// L2 penalty: Σ_k x̂_k · x̂_k.
pub fn l2_regularizer(batch: &[Tensor]) -> f64 {
    batch
        .iter()
        .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
        .sum()
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First/second-moment state for one list of tensors.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl AdamState {
    pub fn new(variables: &[Tensor]) -> Self {
        AdamState {
            m: variables.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: variables.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    /// One bias-corrected update of every variable, in place.
    pub fn step(&mut self, variables: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if variables.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract("adam: variable/gradient count mismatch".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t);
        for ((p, g), (m, v)) in variables
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.shape() != g.shape() {
                return Err(Error::shape("adam step", p.shape(), g.shape()));
            }
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..gd.len() {
                md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * gd[i];
                vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * gd[i] * gd[i];
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

/// Runs the attack appropriate for the job: closed form for one MLP
/// instance, demix-then-deconvolve for one CNN instance (when its dense
/// head's gradients are observable), full gradient matching otherwise.
///
/// An information-theoretically under-determined architecture only yields
/// a warning — the counting bounds are necessary conditions, not proofs
/// that a particular attempt fails.
pub fn reconstruct(job: &ReconJob) -> Result<ReconResult> {
    job.validate()?;
    let warnings = feasibility_warnings(job);

    let mask_keeps = |indices: &[usize]| {
        job.mask
            .as_ref()
            .map_or(true, |m| indices.iter().all(|&i| m.keeps_tensor(i)))
    };

    match &job.arch {
        Arch::Mlp(_) if job.batch == 1 && mask_keeps(&[0, 1]) => {
            let x = closed_form::recon_single_mlp(&job.target)?;
            Ok(ReconResult {
                x_hat: vec![x],
                y_hat: None,
                loss_trajectory: Vec::new(),
                l1_trajectory: job.ground_truth.as_ref().map(|_| Vec::new()),
                iterations_run: 0,
                terminated: TerminationReason::ClosedForm,
                warnings,
            })
        }
        Arch::Cnn(cfg) if job.batch == 1 && cfg.dense_units > 0 && mask_keeps(&[2, 3]) => {
            let demixed = closed_form::demix_cnn_single(&job.target, cfg)?;
            let dw = cfg.output_width()?;
            let z = demixed.h.reshape(&[cfg.kernel_count, dw, dw])?;
            let mut result = itr_rec(job, &MatchObjective::ConvOutput(z))?;
            let mut all = warnings;
            all.append(&mut result.warnings);
            result.warnings = all;
            Ok(result)
        }
        _ => {
            let mut result = itr_rec(job, &MatchObjective::FullBundle)?;
            let mut all = warnings;
            all.append(&mut result.warnings);
            result.warnings = all;
            Ok(result)
        }
    }
}

fn feasibility_warnings(job: &ReconJob) -> Vec<String> {
    let report = match &job.arch {
        Arch::Mlp(cfg) if cfg.layer_sizes.len() >= 3 => feasibility::check_mlp_batch(
            cfg.input_dim() as u64,
            cfg.layer_sizes[1] as u64,
            cfg.classes() as u64,
            job.batch as u64,
        ),
        Arch::Cnn(cfg) if cfg.dense_units > 0 => feasibility::check_cnn(cfg, job.batch as u64),
        Arch::Cnn(cfg) => feasibility::check_cnn_no_dense(cfg, job.batch as u64, cfg.classes as u64),
        _ => return Vec::new(),
    };
    match report {
        Ok(r) if !r.feasible => {
            let detail = if r.notes.is_empty() {
                format!("{} equations vs {} unknowns", r.equations, r.unknowns)
            } else {
                r.notes.join("; ")
            };
            vec![format!("architecture looks under-determined: {detail}")]
        }
        _ => Vec::new(),
    }
}

// ---------------------------------------------------------------------------
// The optimization loop
// ---------------------------------------------------------------------------

struct LossGraph {
    graph: Graph,
    x_leaves: Vec<NodeId>,
    y_leaves: Vec<NodeId>,
    lambda_leaf: Option<NodeId>,
    loss: NodeId,
    grads: Vec<NodeId>,
}

/// Algorithm core, exposed so callers can force an objective — e.g. running
/// full matching on a single CNN instance to compare against the two-step
/// route `reconstruct` would pick.
pub fn itr_rec(job: &ReconJob, objective: &MatchObjective) -> Result<ReconResult> {
    job.validate()?;
    let lg = match objective {
        MatchObjective::FullBundle => build_full_graph(job)?,
        MatchObjective::ConvOutput(z) => build_deconv_graph(job, z)?,
    };

    let (xs, ys) = job.initial_iterates();
    let mut variables = xs;
    let with_labels = !lg.y_leaves.is_empty();
    if with_labels {
        variables.extend(ys);
    }

    let mut adam = AdamState::new(&variables);
    let mut loss_trajectory = Vec::with_capacity(job.iterations);
    let mut l1_trajectory = job.ground_truth.as_ref().map(|_| Vec::with_capacity(job.iterations));
    let mut best_loss = f64::INFINITY;
    let mut best: Vec<Tensor> = variables.clone();
    let mut warnings = Vec::new();
    let mut diverged = false;

    let eval_targets: Vec<NodeId> =
        std::iter::once(lg.loss).chain(lg.grads.iter().copied()).collect();

    for i in 0..job.iterations {
        let mut leaves: HashMap<NodeId, Tensor> = HashMap::new();
        for (leaf, value) in lg.x_leaves.iter().zip(&variables) {
            leaves.insert(*leaf, value.clone());
        }
        if with_labels {
            for (leaf, value) in lg.y_leaves.iter().zip(&variables[lg.x_leaves.len()..]) {
                leaves.insert(*leaf, value.clone());
            }
        }
        if let Some(lam) = lg.lambda_leaf {
            let value = lambda_at(job.lambda0, job.decay_interval, job.decay_factor, i);
            leaves.insert(lam, Tensor::scalar(value));
        }

        let evaluated = match lg.graph.eval(&leaves, &eval_targets) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => {
                diverged = true;
                warnings.push(format!("loss left the finite range at iteration {i}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let loss = evaluated[0].item();
        if !loss.is_finite() || evaluated[1..].iter().any(|g| !g.all_finite()) {
            diverged = true;
            warnings.push(format!("loss left the finite range at iteration {i}"));
            break;
        }

        loss_trajectory.push(loss);
        if let (Some(traj), Some(truth)) = (l1_trajectory.as_mut(), job.ground_truth.as_ref()) {
            let report = metrics::match_batch(&variables[..lg.x_leaves.len()], truth)?;
            traj.push(report.mean_l1);
        }
        if loss < best_loss {
            best_loss = loss;
            best = variables.clone();
        }

        adam.step(&mut variables, &evaluated[1..], job.learning_rate)?;
    }

    let final_vars = if diverged { best } else { variables };
    let b = lg.x_leaves.len();
    let x_hat = final_vars[..b]
        .iter()
        .map(|x| match &job.arch {
            Arch::Mlp(_) => x.reshape(&[x.numel()]),
            Arch::Cnn(_) => Ok(x.clone()),
        })
        .collect::<Result<Vec<_>>>()?;
    let y_hat = if with_labels {
        Some(
            final_vars[b..]
                .iter()
                .map(|y| y.reshape(&[y.numel()]))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };

    let iterations_run = loss_trajectory.len();
    Ok(ReconResult {
        x_hat,
        y_hat,
        loss_trajectory,
        l1_trajectory,
        iterations_run,
        terminated: if diverged {
            TerminationReason::Diverged
        } else {
            TerminationReason::Completed
        },
        warnings,
    })
}

/// Evaluates the full-matching loss L = ‖v − v̂(X̂, Ŷ)‖² (+ λ₀R) and its
/// gradients with respect to X̂ and Ŷ at one explicit iterate, without
/// stepping. `xs` must be shape-congruent with the architecture input and
/// `ys` with `[classes]`; λ is held at `lambda0`.
pub fn matching_loss_and_grad(
    job: &ReconJob,
    xs: &[Tensor],
    ys: &[Tensor],
) -> Result<(f64, Vec<Tensor>, Vec<Tensor>)> {
    job.validate()?;
    if xs.len() != job.batch || ys.len() != job.batch {
        return Err(Error::Contract(format!(
            "{} inputs and {} label guesses for batch {}",
            xs.len(),
            ys.len(),
            job.batch
        )));
    }
    let lg = build_full_graph(job)?;
    let mut leaves: HashMap<NodeId, Tensor> = HashMap::new();
    let input_shape = job.arch.graph_input_shape();
    let classes = job.arch.classes();
    for (leaf, x) in lg.x_leaves.iter().zip(xs) {
        leaves.insert(*leaf, x.reshape(&input_shape)?);
    }
    for (leaf, y) in lg.y_leaves.iter().zip(ys) {
        leaves.insert(*leaf, y.reshape(&[classes, 1])?);
    }
    if let Some(lam) = lg.lambda_leaf {
        leaves.insert(lam, Tensor::scalar(job.lambda0));
    }
    let targets: Vec<NodeId> = std::iter::once(lg.loss).chain(lg.grads.iter().copied()).collect();
    let mut evaluated = lg.graph.eval(&leaves, &targets)?;
    let loss = evaluated.remove(0).item();
    let grad_y = evaluated.split_off(lg.x_leaves.len());
    Ok((loss, evaluated, grad_y))
}

/// Graph for flag "all": L = ‖v − v̂(X̂, Ŷ)‖² (+ λR), differentiated with
/// respect to X̂ and Ŷ.
fn build_full_graph(job: &ReconJob) -> Result<LossGraph> {
    let mut g = Graph::new();
    let arch = &job.arch;
    let param_nodes = param_constants(&mut g, arch, &job.params)?;
    let input_shape = arch.graph_input_shape();
    let classes = arch.classes();

    let mut x_leaves = Vec::with_capacity(job.batch);
    let mut y_leaves = Vec::with_capacity(job.batch);
    let mut total_loss: Option<NodeId> = None;
    for k in 0..job.batch {
        let x = g.leaf(&format!("x{k}"), &input_shape);
        let y = g.leaf(&format!("y{k}"), &[classes, 1]);
        let label = g.softmax(y)?;
        let inst = match arch {
            Arch::Mlp(cfg) => append_mlp_instance(&mut g, cfg, &param_nodes, x, label)?,
            Arch::Cnn(cfg) => append_cnn_instance(&mut g, cfg, &param_nodes, x, label)?,
        };
        total_loss = Some(match total_loss {
            None => inst.loss,
            Some(t) => g.add(t, inst.loss)?,
        });
        x_leaves.push(x);
        y_leaves.push(y);
    }
    let avg_loss = g.scale(total_loss.expect("batch >= 1"), 1.0 / job.batch as f64);

    let flat_params: Vec<NodeId> = param_nodes.iter().flat_map(|&(w, b)| [w, b]).collect();
    let vhat = g.gradient(avg_loss, &flat_params)?;

    let mut match_loss: Option<NodeId> = None;
    for (idx, (&vh, observed)) in vhat.iter().zip(&job.target.grads).enumerate() {
        // Odd indices are biases, stored flat but shaped [n, 1] in the graph.
        let graph_shaped = |t: &Tensor| {
            if idx % 2 == 1 {
                lift_bias(arch, idx / 2, t)
            } else {
                Ok(t.clone())
            }
        };
        let target = g.constant(graph_shaped(observed)?);
        let mut diff = g.sub(target, vh)?;
        if let Some(mask) = &job.mask {
            let mask_node = g.constant(graph_shaped(&mask.keep[idx])?);
            diff = g.mul(diff, mask_node)?;
        }
        let sq = g.mul(diff, diff)?;
        let term = g.sum_all(sq);
        match_loss = Some(match match_loss {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    let match_loss = match_loss.expect("at least one parameter tensor");

    let (loss, lambda_leaf) = match job.regularizer {
        Regularizer::None => (match_loss, None),
        reg => {
            let r = build_regularizer_node(&mut g, reg, &x_leaves)?;
            let lam = g.leaf("lambda", &[1]);
            let weighted = g.mul(lam, r)?;
            (g.add(match_loss, weighted)?, Some(lam))
        }
    };

    let wrt: Vec<NodeId> = x_leaves.iter().chain(y_leaves.iter()).copied().collect();
    let grads = g.gradient(loss, &wrt)?;
    Ok(LossGraph {
        graph: g,
        x_leaves,
        y_leaves,
        lambda_leaf,
        loss,
        grads,
    })
}

/// Graph for flag "partial": L = ‖ẑ − conv(X̂)‖² over the conv layer only.
/// Labels play no role, and neither does the regularizer — this objective
/// is a plain linear least-squares problem in the pixels.
fn build_deconv_graph(job: &ReconJob, z_target: &Tensor) -> Result<LossGraph> {
    let cfg = match &job.arch {
        Arch::Cnn(cfg) => cfg,
        Arch::Mlp(_) => {
            return Err(Error::invalid(
                "itr_rec",
                "conv-output matching needs a CNN architecture",
            ))
        }
    };
    if job.batch != 1 {
        return Err(Error::invalid(
            "itr_rec",
            "conv-output matching recovers a single instance",
        ));
    }
    let mut g = Graph::new();
    let kernels = g.constant(job.params.layers[0].weight.clone());
    let bias = g.constant(job.params.layers[0].bias.clone());
    let x = g.leaf("x0", &job.arch.graph_input_shape());
    let z = append_conv_output(&mut g, cfg, (kernels, bias), x)?;
    let target = g.constant(z_target.clone());
    let diff = g.sub(target, z)?;
    let sq = g.mul(diff, diff)?;
    let loss = g.sum_all(sq);
    let grads = g.gradient(loss, &[x])?;
    Ok(LossGraph {
        graph: g,
        x_leaves: vec![x],
        y_leaves: Vec::new(),
        lambda_leaf: None,
        loss,
        grads,
    })
}

fn build_regularizer_node(
    g: &mut Graph,
    reg: Regularizer,
    x_leaves: &[NodeId],
) -> Result<NodeId> {
    // Flatten instances to columns so inner products are 1x1 matmuls.
    let flat: Vec<NodeId> = x_leaves
        .iter()
        .map(|&x| {
            let numel: usize = g.shape(x).iter().product();
            g.reshape(x, &[numel, 1])
        })
        .collect::<Result<_>>()?;

    match reg {
        Regularizer::None => unreachable!("no regularizer node for Regularizer::None"),
        Regularizer::Orthogonality => {
            let mut total: Option<NodeId> = None;
            for (k, &a) in flat.iter().enumerate() {
                for (kp, &b) in flat.iter().enumerate() {
                    if k == kp {
                        continue;
                    }
                    let at = g.transpose(a)?;
                    let dot = g.matmul(at, b)?;
                    let sq = g.mul(dot, dot)?;
                    let sq = g.reshape(sq, &[1])?;
                    total = Some(match total {
                        None => sq,
                        Some(t) => g.add(t, sq)?,
                    });
                }
            }
            Ok(match total {
                Some(t) => t,
                // A single instance has no pairs; the penalty is zero.
                None => g.constant(Tensor::zeros(&[1])),
            })
        }
        Regularizer::L2 => {
            let mut total: Option<NodeId> = None;
            for &x in &flat {
                let sq = g.mul(x, x)?;
                let s = g.sum_all(sq);
                total = Some(match total {
                    None => s,
                    Some(t) => g.add(t, s)?,
                });
            }
            Ok(total.expect("batch >= 1"))
        }
    }
}
