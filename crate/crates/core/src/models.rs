//! Model definitions: sigmoid MLPs and a single-conv CNN with a dense head.
//!
//! Two independent gradient routes are provided on purpose. `batch_gradient`
//! drives the autodiff graph; `analytic_grads_mlp` / `analytic_grads_cnn`
//! spell out the same derivatives as explicit sums with no shared machinery.
//! Tests hold the two routes against each other (and against finite
//! differences), which is what makes the reconstruction results trustworthy.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::convolve::{self, conv_output_width};
use crate::error::{Error, Result};
use crate::tensor::{outer, Tensor};

/// Fully-connected architecture: `layer_sizes = [d, n_1, ..., n_L]` where
/// the last entry is the class count. Hidden layers use the logistic
/// sigmoid; the output layer is affine.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpConfig {
    pub layer_sizes: Vec<usize>,
    /// Whether each affine layer carries a bias (defaults to all true).
    pub biases: Vec<bool>,
}

impl MlpConfig {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        let biases = vec![true; layer_sizes.len().saturating_sub(1)];
        let cfg = MlpConfig {
            layer_sizes,
            biases,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_biases(mut self, biases: Vec<bool>) -> Result<Self> {
        self.biases = biases;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::invalid(
                "MlpConfig",
                "need at least an input and an output layer",
            ));
        }
        if self.layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::invalid("MlpConfig", "layer sizes must be positive"));
        }
        if self.biases.len() != self.layer_sizes.len() - 1 {
            return Err(Error::invalid(
                "MlpConfig",
                format!(
                    "{} bias flags for {} layers",
                    self.biases.len(),
                    self.layer_sizes.len() - 1
                ),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    fn layer_count(&self) -> usize {
        self.layer_sizes.len() - 1
    }
}

/// One convolutional layer (stride/padding, `kernel_count` kernels) feeding
/// a dense head. `dense_units == 0` wires the flattened conv output straight
/// into the affine output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CnnConfig {
    pub channels: usize,
    pub input_width: usize,
    pub kernel_size: usize,
    pub padding: usize,
    pub stride: usize,
    pub kernel_count: usize,
    pub dense_units: usize,
    pub classes: usize,
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.kernel_count == 0 || self.classes == 0 {
            return Err(Error::invalid(
                "CnnConfig",
                "channels, kernel_count and classes must be positive",
            ));
        }
        self.output_width().map(|_| ())
    }

    /// Spatial width after the conv layer.
    pub fn output_width(&self) -> Result<usize> {
        conv_output_width(self.input_width, self.kernel_size, self.padding, self.stride)
    }

    /// Length of the flattened conv output: `kernel_count * output_width^2`.
    pub fn flattened_size(&self) -> Result<usize> {
        let dw = self.output_width()?;
        Ok(self.kernel_count * dw * dw)
    }
}

/// Which architecture a set of parameters belongs to.
#[derive(Clone, Debug, PartialEq)]
pub enum Arch {
    Mlp(MlpConfig),
    Cnn(CnnConfig),
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        match self {
            Arch::Mlp(c) => c.validate(),
            Arch::Cnn(c) => c.validate(),
        }
    }

    /// Number of scalars in one model input.
    pub fn input_numel(&self) -> usize {
        match self {
            Arch::Mlp(c) => c.input_dim(),
            Arch::Cnn(c) => c.channels * c.input_width * c.input_width,
        }
    }

    /// Shape the graph builders expect for one input instance.
    pub fn graph_input_shape(&self) -> Vec<usize> {
        match self {
            Arch::Mlp(c) => vec![c.input_dim(), 1],
            Arch::Cnn(c) => vec![c.channels, c.input_width, c.input_width],
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Arch::Mlp(c) => c.classes(),
            Arch::Cnn(c) => c.classes,
        }
    }
}

/// Weight and bias of one layer. For the conv layer the "weight" is the
/// kernel stack `[h, C, k, k]` and the bias is per-kernel `[h]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// All trainable tensors of a model, in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
}

impl ModelParams {
    /// Seeded initialization: every tensor is drawn uniformly from
    /// `[-0.5/sqrt(fan_in), 0.5/sqrt(fan_in))`. The 1/sqrt(fan_in) scaling
    /// keeps pre-activations of wide layers in the sigmoid's responsive
    /// range; without it a 3072-pixel input saturates the hidden units and
    /// their gradients collapse toward zero.
    pub fn init(arch: &Arch, seed: u64) -> Result<ModelParams> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        match arch {
            Arch::Mlp(cfg) => {
                for l in 0..cfg.layer_count() {
                    let (fan_in, fan_out) = (cfg.layer_sizes[l], cfg.layer_sizes[l + 1]);
                    let limit = 0.5 / (fan_in as f64).sqrt();
                    let weight = Tensor::uniform(&[fan_out, fan_in], -limit, limit, &mut rng);
                    let bias = if cfg.biases[l] {
                        Tensor::uniform(&[fan_out], -limit, limit, &mut rng)
                    } else {
                        Tensor::zeros(&[fan_out])
                    };
                    layers.push(LayerParams { weight, bias });
                }
            }
            Arch::Cnn(cfg) => {
                let fan_in = cfg.channels * cfg.kernel_size * cfg.kernel_size;
                let limit = 0.5 / (fan_in as f64).sqrt();
                let kernels = Tensor::uniform(
                    &[cfg.kernel_count, cfg.channels, cfg.kernel_size, cfg.kernel_size],
                    -limit,
                    limit,
                    &mut rng,
                );
                let conv_bias = Tensor::uniform(&[cfg.kernel_count], -limit, limit, &mut rng);
                layers.push(LayerParams {
                    weight: kernels,
                    bias: conv_bias,
                });
                let n0 = cfg.flattened_size()?;
                let dense_sizes: Vec<usize> = if cfg.dense_units > 0 {
                    vec![n0, cfg.dense_units, cfg.classes]
                } else {
                    vec![n0, cfg.classes]
                };
                for w in dense_sizes.windows(2) {
                    let (fan_in, fan_out) = (w[0], w[1]);
                    let limit = 0.5 / (fan_in as f64).sqrt();
                    let weight = Tensor::uniform(&[fan_out, fan_in], -limit, limit, &mut rng);
                    let bias = Tensor::uniform(&[fan_out], -limit, limit, &mut rng);
                    layers.push(LayerParams { weight, bias });
                }
            }
        }
        Ok(ModelParams { layers })
    }
}

/// Per-parameter gradients, shape-congruent with [`ModelParams`], averaged
/// over `batch_size` instances.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub grads: Vec<Tensor>,
    pub batch_size: usize,
}

impl GradientBundle {
    /// One tensor per parameter tensor, ordered `weight, bias` per layer.
    pub fn zeros_like(params: &ModelParams, batch_size: usize) -> Self {
        let grads = params
            .layers
            .iter()
            .flat_map(|l| [Tensor::zeros(l.weight.shape()), Tensor::zeros(l.bias.shape())])
            .collect();
        GradientBundle { grads, batch_size }
    }

    pub fn add(&self, other: &GradientBundle) -> Result<GradientBundle> {
        if self.grads.len() != other.grads.len() {
            return Err(Error::Contract(format!(
                "bundle length mismatch: {} vs {}",
                self.grads.len(),
                other.grads.len()
            )));
        }
        let grads = self
            .grads
            .iter()
            .zip(&other.grads)
            .map(|(a, b)| a.add(b))
            .collect::<Result<_>>()?;
        Ok(GradientBundle {
            grads,
            batch_size: self.batch_size,
        })
    }

    pub fn scaled(&self, c: f64) -> GradientBundle {
        GradientBundle {
            grads: self.grads.iter().map(|g| g.scale(c)).collect(),
            batch_size: self.batch_size,
        }
    }

    /// Largest elementwise deviation from another bundle.
    pub fn max_abs_diff(&self, other: &GradientBundle) -> Result<f64> {
        if self.grads.len() != other.grads.len() {
            return Err(Error::Contract("bundle length mismatch".into()));
        }
        let mut worst = 0.0f64;
        for (a, b) in self.grads.iter().zip(&other.grads) {
            if a.shape() != b.shape() {
                return Err(Error::shape("max_abs_diff", a.shape(), b.shape()));
            }
            for (x, y) in a.data().iter().zip(b.data()) {
                worst = worst.max((x - y).abs());
            }
        }
        Ok(worst)
    }
}

/// One-hot label vector of length `classes`.
pub fn one_hot(class: usize, classes: usize) -> Result<Tensor> {
    if class >= classes {
        return Err(Error::invalid(
            "one_hot",
            format!("class {class} out of range for {classes} classes"),
        ));
    }
    let mut t = Tensor::zeros(&[classes]);
    t.data_mut()[class] = 1.0;
    Ok(t)
}

fn sigmoid_scalar(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Numerically shifted softmax of a vector.
pub fn softmax_stable(v: &Tensor) -> Tensor {
    let m = v.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.data().iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    Tensor::new(v.shape().to_vec(), exps.into_iter().map(|e| e / s).collect())
        .expect("softmax preserves shape")
}

/// Cross-entropy of softmax(logits) against a one-hot class.
pub fn cross_entropy(logits: &Tensor, class: usize) -> f64 {
    let m = logits.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.data().iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    lse - logits.data()[class]
}

/// Forward pass of an MLP; accepts any tensor with `d` elements.
pub fn mlp_forward(cfg: &MlpConfig, params: &ModelParams, input: &Tensor) -> Result<Tensor> {
    cfg.validate()?;
    check_layer_count(cfg.layer_count(), params)?;
    let mut a = input.reshape(&[cfg.input_dim()])?;
    for l in 0..cfg.layer_count() {
        let mut z = params.layers[l].weight.matvec(&a)?;
        if cfg.biases[l] {
            z = z.add(&params.layers[l].bias)?;
        }
        a = if l + 1 == cfg.layer_count() {
            z
        } else {
            z.map(sigmoid_scalar)
        };
    }
    Ok(a)
}

/// Conv-layer output (bias included): `[C,d,d] -> [h,d',d']`.
pub fn cnn_conv_output(cfg: &CnnConfig, params: &ModelParams, input: &Tensor) -> Result<Tensor> {
    cfg.validate()?;
    let raw = convolve::conv2d_forward(input, &params.layers[0].weight, cfg.stride, cfg.padding)?;
    let dw = cfg.output_width()?;
    let bias = &params.layers[0].bias;
    let mut out = raw;
    for m in 0..cfg.kernel_count {
        let b = bias.data()[m];
        for v in &mut out.data_mut()[m * dw * dw..(m + 1) * dw * dw] {
            *v += b;
        }
    }
    Ok(out)
}

/// Forward pass of the CNN: conv, flatten, dense head.
pub fn cnn_forward(cfg: &CnnConfig, params: &ModelParams, input: &Tensor) -> Result<Tensor> {
    let z = cnn_conv_output(cfg, params, input)?;
    let n0 = cfg.flattened_size()?;
    let expected_layers = if cfg.dense_units > 0 { 3 } else { 2 };
    check_layer_count(expected_layers, params)?;
    let h = z.reshape(&[n0])?;
    if cfg.dense_units > 0 {
        let hidden = params.layers[1]
            .weight
            .matvec(&h)?
            .add(&params.layers[1].bias)?
            .map(sigmoid_scalar);
        params.layers[2].weight.matvec(&hidden)?.add(&params.layers[2].bias)
    } else {
        params.layers[1].weight.matvec(&h)?.add(&params.layers[1].bias)
    }
}

fn check_layer_count(expected: usize, params: &ModelParams) -> Result<()> {
    if params.layers.len() != expected {
        return Err(Error::Contract(format!(
            "architecture expects {expected} parameter layers, got {}",
            params.layers.len()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Graph builders
// ---------------------------------------------------------------------------

/// Handles to one model instance inside a graph.
pub struct InstanceNodes {
    pub logits: NodeId,
    pub loss: NodeId,
    /// Conv output before flattening (CNN only).
    pub conv_out: Option<NodeId>,
}

/// Embeds model parameters as constants; returns `(weight, bias)` node pairs
/// per layer. Dense biases are lifted to column shape `[n, 1]`; the conv
/// bias stays rank-1.
pub fn param_constants(
    g: &mut Graph,
    arch: &Arch,
    params: &ModelParams,
) -> Result<Vec<(NodeId, NodeId)>> {
    let mut nodes = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate() {
        let w = g.constant(layer.weight.clone());
        let bias = lift_bias(arch, l, &layer.bias)?;
        let b = g.constant(bias);
        nodes.push((w, b));
    }
    Ok(nodes)
}

/// Reshapes a stored bias to the shape the graph uses for that layer.
pub fn lift_bias(arch: &Arch, layer: usize, bias: &Tensor) -> Result<Tensor> {
    if matches!(arch, Arch::Cnn(_)) && layer == 0 {
        Ok(bias.clone())
    } else {
        bias.reshape(&[bias.numel(), 1])
    }
}

/// Inverse of [`lift_bias`]: brings a graph-shaped bias gradient back to the
/// stored parameter shape.
pub fn lower_bias(arch: &Arch, layer: usize, grad: &Tensor) -> Result<Tensor> {
    if matches!(arch, Arch::Cnn(_)) && layer == 0 {
        Ok(grad.clone())
    } else {
        grad.reshape(&[grad.numel()])
    }
}

/// Appends one MLP forward pass plus its loss.
///
/// `input` must be a `[d, 1]` node; `label_vec` a `[classes, 1]` node whose
/// entries sum to 1 (a one-hot constant/leaf, or a softmax of guessed
/// scores).
pub fn append_mlp_instance(
    g: &mut Graph,
    cfg: &MlpConfig,
    param_nodes: &[(NodeId, NodeId)],
    input: NodeId,
    label_vec: NodeId,
) -> Result<InstanceNodes> {
    cfg.validate()?;
    if param_nodes.len() != cfg.layer_count() {
        return Err(Error::Contract(format!(
            "expected {} layer node pairs, got {}",
            cfg.layer_count(),
            param_nodes.len()
        )));
    }
    let mut a = input;
    for l in 0..cfg.layer_count() {
        let (w, b) = param_nodes[l];
        let mut z = g.matmul(w, a)?;
        if cfg.biases[l] {
            z = g.add(z, b)?;
        }
        a = if l + 1 == cfg.layer_count() {
            z
        } else {
            g.sigmoid(z)
        };
    }
    let loss = g.softmax_cross_entropy(a, label_vec)?;
    Ok(InstanceNodes {
        logits: a,
        loss,
        conv_out: None,
    })
}

/// Appends just the conv layer for an input node: `[C,d,d] -> [h,d',d']`.
pub fn append_conv_output(
    g: &mut Graph,
    cfg: &CnnConfig,
    conv_params: (NodeId, NodeId),
    input: NodeId,
) -> Result<NodeId> {
    g.conv2d(input, conv_params.0, conv_params.1, cfg.stride, cfg.padding)
}

/// Appends one CNN forward pass plus its loss.
pub fn append_cnn_instance(
    g: &mut Graph,
    cfg: &CnnConfig,
    param_nodes: &[(NodeId, NodeId)],
    input: NodeId,
    label_vec: NodeId,
) -> Result<InstanceNodes> {
    cfg.validate()?;
    let expected = if cfg.dense_units > 0 { 3 } else { 2 };
    if param_nodes.len() != expected {
        return Err(Error::Contract(format!(
            "expected {expected} layer node pairs, got {}",
            param_nodes.len()
        )));
    }
    let z = append_conv_output(g, cfg, param_nodes[0], input)?;
    let n0 = cfg.flattened_size()?;
    let flat = g.reshape(z, &[n0, 1])?;
    let logits = if cfg.dense_units > 0 {
        let (w1, b1) = param_nodes[1];
        let z1 = g.matmul(w1, flat)?;
        let z1 = g.add(z1, b1)?;
        let hidden = g.sigmoid(z1);
        let (w2, b2) = param_nodes[2];
        let z2 = g.matmul(w2, hidden)?;
        g.add(z2, b2)?
    } else {
        let (w1, b1) = param_nodes[1];
        let z1 = g.matmul(w1, flat)?;
        g.add(z1, b1)?
    };
    let loss = g.softmax_cross_entropy(logits, label_vec)?;
    Ok(InstanceNodes {
        logits,
        loss,
        conv_out: Some(z),
    })
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

/// Mean of per-instance loss gradients over a batch, computed by autodiff.
///
/// `instances` are model inputs (any shape with the right element count for
/// an MLP; `[C, d, d]` for a CNN); `classes` are the true labels.
pub fn batch_gradient(
    arch: &Arch,
    params: &ModelParams,
    instances: &[Tensor],
    classes: &[usize],
) -> Result<GradientBundle> {
    let labels = classes
        .iter()
        .map(|&c| one_hot(c, arch.classes()))
        .collect::<Result<Vec<_>>>()?;
    soft_batch_gradient(arch, params, instances, &labels)
}

/// [`batch_gradient`] with explicit label distributions instead of hard
/// class ids — the form an attacker's guessed labels take.
pub fn soft_batch_gradient(
    arch: &Arch,
    params: &ModelParams,
    instances: &[Tensor],
    labels: &[Tensor],
) -> Result<GradientBundle> {
    if instances.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if instances.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} instances but {} labels",
            instances.len(),
            labels.len()
        )));
    }
    arch.validate()?;

    let mut g = Graph::new();
    let param_nodes = param_constants(&mut g, arch, params)?;
    let input_shape = arch.graph_input_shape();
    let x = g.leaf("input", &input_shape);
    let y = g.leaf("label", &[arch.classes(), 1]);
    let instance = match arch {
        Arch::Mlp(cfg) => append_mlp_instance(&mut g, cfg, &param_nodes, x, y)?,
        Arch::Cnn(cfg) => append_cnn_instance(&mut g, cfg, &param_nodes, x, y)?,
    };
    let flat_params: Vec<NodeId> = param_nodes.iter().flat_map(|&(w, b)| [w, b]).collect();
    let grad_nodes = g.gradient(instance.loss, &flat_params)?;

    let mut sums: Vec<Tensor> = Vec::new();
    for (i, instance_input) in instances.iter().enumerate() {
        let shaped = instance_input.reshape(&input_shape).map_err(|_| {
            Error::shape("batch_gradient input", instance_input.shape(), &input_shape)
        })?;
        let label = labels[i].reshape(&[arch.classes(), 1]).map_err(|_| {
            Error::shape("batch_gradient label", labels[i].shape(), &[arch.classes(), 1])
        })?;
        let mut leaves = HashMap::new();
        leaves.insert(x, shaped);
        leaves.insert(y, label);
        let grads = g.eval(&leaves, &grad_nodes)?;
        if sums.is_empty() {
            sums = grads;
        } else {
            for (acc, grad) in sums.iter_mut().zip(&grads) {
                *acc = acc.add(grad)?;
            }
        }
    }

    let scale = 1.0 / instances.len() as f64;
    let mut out = Vec::with_capacity(sums.len());
    for (i, s) in sums.into_iter().enumerate() {
        let scaled = s.scale(scale);
        if i % 2 == 1 {
            out.push(lower_bias(arch, i / 2, &scaled)?);
        } else {
            out.push(scaled);
        }
    }
    Ok(GradientBundle {
        grads: out,
        batch_size: instances.len(),
    })
}

/// Single-instance MLP gradients written as explicit sums.
///
/// Output layer: `d loss/d b = p - y` and `d loss/d W = (p - y) a^T`;
/// earlier layers propagate `delta` through `W^T delta` damped by
/// `sigma' = a (1 - a)`. No autodiff is involved.
pub fn analytic_grads_mlp(
    cfg: &MlpConfig,
    params: &ModelParams,
    input: &Tensor,
    class: usize,
) -> Result<GradientBundle> {
    cfg.validate()?;
    check_layer_count(cfg.layer_count(), params)?;
    let x = input.reshape(&[cfg.input_dim()])?;

    // acts[l] is the input to layer l; the last entry is the logits.
    let mut acts: Vec<Tensor> = vec![x];
    for l in 0..cfg.layer_count() {
        let mut z = params.layers[l].weight.matvec(acts.last().unwrap())?;
        if cfg.biases[l] {
            z = z.add(&params.layers[l].bias)?;
        }
        let a = if l + 1 == cfg.layer_count() {
            z
        } else {
            z.map(sigmoid_scalar)
        };
        acts.push(a);
    }

    let p = softmax_stable(acts.last().unwrap());
    let y = one_hot(class, cfg.classes())?;
    let mut delta = p.sub(&y)?;

    let mut grads_rev: Vec<(Tensor, Tensor)> = Vec::with_capacity(cfg.layer_count());
    for l in (0..cfg.layer_count()).rev() {
        let dw = outer(&delta, &acts[l]);
        let db = if cfg.biases[l] {
            delta.clone()
        } else {
            Tensor::zeros(&[cfg.layer_sizes[l + 1]])
        };
        grads_rev.push((dw, db));
        if l > 0 {
            let back = params.layers[l].weight.matvec_t(&delta)?;
            let a = &acts[l]; // sigmoid output of layer l-1
            let damp = a.map(|v| v * (1.0 - v));
            delta = back.mul(&damp)?;
        }
    }

    let mut grads = Vec::with_capacity(2 * cfg.layer_count());
    for (dw, db) in grads_rev.into_iter().rev() {
        grads.push(dw);
        grads.push(db);
    }
    Ok(GradientBundle {
        grads,
        batch_size: 1,
    })
}

/// Single-instance CNN gradients written as explicit sums, including the
/// convolution itself — this path shares no code with the autodiff engine
/// or the `convolve` module, so it can serve as an independent check.
pub fn analytic_grads_cnn(
    cfg: &CnnConfig,
    params: &ModelParams,
    input: &Tensor,
    class: usize,
) -> Result<GradientBundle> {
    cfg.validate()?;
    let expected_layers = if cfg.dense_units > 0 { 3 } else { 2 };
    check_layer_count(expected_layers, params)?;
    if input.shape() != [cfg.channels, cfg.input_width, cfg.input_width] {
        return Err(Error::shape(
            "analytic_grads_cnn",
            input.shape(),
            &[cfg.channels, cfg.input_width, cfg.input_width],
        ));
    }

    let (c, d, k, s, p) = (
        cfg.channels,
        cfg.input_width,
        cfg.kernel_size,
        cfg.stride,
        cfg.padding,
    );
    let h = cfg.kernel_count;
    let dw_out = cfg.output_width()?;
    let kernels = params.layers[0].weight.data();
    let conv_bias = params.layers[0].bias.data();
    let x = input.data();

    // Conv forward, spelled out.
    let mut z = vec![0.0; h * dw_out * dw_out];
    for m in 0..h {
        for i in 0..dw_out {
            for j in 0..dw_out {
                let mut acc = conv_bias[m];
                for cc in 0..c {
                    for g in 0..k {
                        let a = (s * i + g) as isize - p as isize;
                        if a < 0 || a as usize >= d {
                            continue;
                        }
                        for n in 0..k {
                            let b = (s * j + n) as isize - p as isize;
                            if b < 0 || b as usize >= d {
                                continue;
                            }
                            acc += kernels[((m * c + cc) * k + g) * k + n]
                                * x[(cc * d + a as usize) * d + b as usize];
                        }
                    }
                }
                z[(m * dw_out + i) * dw_out + j] = acc;
            }
        }
    }

    // Dense head on the flattened conv output, reusing the MLP route.
    let n0 = cfg.flattened_size()?;
    let flat = Tensor::new(vec![n0], z)?;
    let head_sizes = if cfg.dense_units > 0 {
        vec![n0, cfg.dense_units, cfg.classes]
    } else {
        vec![n0, cfg.classes]
    };
    let head_cfg = MlpConfig::new(head_sizes)?;
    let head_params = ModelParams {
        layers: params.layers[1..].to_vec(),
    };
    let head = analytic_grads_mlp(&head_cfg, &head_params, &flat, class)?;

    // delta for the flattened conv output: W1^T delta1, where delta1 is the
    // first dense layer's bias gradient.
    let delta1 = &head.grads[1];
    let dflat = params.layers[1].weight.matvec_t(delta1)?;
    let dz = dflat.data();

    // Conv parameter gradients from the scattered sums.
    let mut dkernels = vec![0.0; h * c * k * k];
    let mut dbias = vec![0.0; h];
    for m in 0..h {
        for i in 0..dw_out {
            for j in 0..dw_out {
                let v = dz[(m * dw_out + i) * dw_out + j];
                dbias[m] += v;
                for cc in 0..c {
                    for g in 0..k {
                        let a = (s * i + g) as isize - p as isize;
                        if a < 0 || a as usize >= d {
                            continue;
                        }
                        for n in 0..k {
                            let b = (s * j + n) as isize - p as isize;
                            if b < 0 || b as usize >= d {
                                continue;
                            }
                            dkernels[((m * c + cc) * k + g) * k + n] +=
                                v * x[(cc * d + a as usize) * d + b as usize];
                        }
                    }
                }
            }
        }
    }

    let mut grads = vec![
        Tensor::new(vec![h, c, k, k], dkernels)?,
        Tensor::new(vec![h], dbias)?,
    ];
    grads.extend(head.grads);
    Ok(GradientBundle {
        grads,
        batch_size: 1,
    })
}
