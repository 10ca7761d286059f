use rand::seq::index;
use rand::Rng;

use super::arch::{ActShape, ArchitectureSpec, LayerSpec};
use super::layers::{self, Mode};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded_rng, stream};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Weights and biases indexed like the architecture's layer list; layers
/// without parameters hold `None`. Gradients use the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub seed: u64,
    pub layers: Vec<Option<LayerParams>>,
}

impl ModelParams {
    /// He-style uniform init, bound `sqrt(6 / fan_in)`, biases zero.
    pub fn init(arch: &ArchitectureSpec, seed: u64) -> Result<Self> {
        let shapes = arch.shapes()?;
        let layers = arch
            .layers
            .iter()
            .zip(&shapes)
            .enumerate()
            .map(|(i, (layer, shape))| {
                let (wshape, fan_in, units) = match (*layer, *shape) {
                    (LayerSpec::Conv { out_channels, kh, kw }, ActShape::Map { c, .. }) => {
                        (vec![out_channels, c, kh, kw], c * kh * kw, out_channels)
                    }
                    (LayerSpec::Fc { units }, s) => (vec![s.numel(), units], s.numel(), units),
                    _ => return None,
                };
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut rng = seeded_rng(derive_seed(seed, stream::MODEL_INIT, i as u64));
                Some(LayerParams {
                    weight: Tensor::from_fn(wshape, |_| rng.gen_range(-bound..bound)),
                    bias: Tensor::zeros(vec![units]),
                })
            })
            .collect();
        Ok(Self { seed, layers })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            seed: self.seed,
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.as_ref().map(|p| LayerParams {
                        weight: Tensor::zeros(p.weight.shape().to_vec()),
                        bias: Tensor::zeros(p.bias.shape().to_vec()),
                    })
                })
                .collect(),
        }
    }

    /// Every parameter tensor in layer order, weight before bias.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flatten().flat_map(|p| [&p.weight, &p.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flatten()
            .flat_map(|p| [&mut p.weight, &mut p.bias])
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().all(Tensor::all_finite)
    }
}

pub type Gradients = ModelParams;

struct LayerStep {
    input: Tensor,
    output: Option<Tensor>,
    argmax: Option<Vec<usize>>,
    mask: Option<Vec<f64>>,
}

/// Activations and caches from one forward pass.
pub struct Trace {
    /// `acts[i]` is the input of layer `i`; the last entry is the logits.
    acts: Vec<Tensor>,
    argmax: Vec<Option<Vec<usize>>>,
    masks: Vec<Option<Vec<f64>>>,
}

impl Trace {
    pub fn logits(&self) -> &Tensor {
        self.acts.last().expect("trace holds at least the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: ArchitectureSpec,
    pub params: ModelParams,
    shapes: Vec<ActShape>,
}

impl Model {
    pub fn new(arch: ArchitectureSpec, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&arch, seed)?;
        Self::from_parts(arch, params)
    }

    pub fn from_parts(arch: ArchitectureSpec, params: ModelParams) -> Result<Self> {
        let shapes = arch.shapes()?;
        let expected = ModelParams::init(&arch, params.seed)?;
        let matches = expected.layers.len() == params.layers.len()
            && expected.layers.iter().zip(&params.layers).all(|(e, p)| match (e, p) {
                (Some(e), Some(p)) => e.weight.shape() == p.weight.shape() && e.bias.shape() == p.bias.shape(),
                (None, None) => true,
                _ => false,
            });
        if !matches {
            return Err(Error::Architecture("parameter shapes do not match the architecture".into()));
        }
        Ok(Self { arch, params, shapes })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.arch.input
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let (n, c, h, w) = x.dims4()?;
        if [c, h, w] != self.arch.input {
            return Err(Error::Shape(format!(
                "batch images are {c}x{h}x{w}, model expects {:?}",
                self.arch.input
            )));
        }
        Ok(n)
    }

    /// Runs layer `i` on `cur`. Returns the layer input as cached for the
    /// backward pass (flattened for fc layers), its output, and the pool
    /// argmax or dropout mask when the layer has one.
    fn layer_forward(&self, i: usize, cur: Tensor, mode: Mode) -> Result<LayerStep> {
        let n = cur.shape()[0];
        let mut step = LayerStep { argmax: None, mask: None, input: cur, output: None };
        let x = &step.input;
        let out = match self.arch.layers[i] {
            LayerSpec::Conv { .. } => {
                let p = self.params.layers[i].as_ref().expect("conv has params");
                layers::conv2d(x, &p.weight, &p.bias)?
            }
            LayerSpec::Maxpool { ph, pw } => {
                let (y, idx) = layers::maxpool(x, ph, pw)?;
                step.argmax = Some(idx);
                y
            }
            LayerSpec::Relu => layers::relu(x),
            LayerSpec::Fc { .. } => {
                let p = self.params.layers[i].as_ref().expect("fc has params");
                let d = self.shapes[i].numel();
                step.input = std::mem::replace(&mut step.input, Tensor::zeros(vec![0])).reshape(vec![n, d])?;
                layers::fully_connected(&step.input, &p.weight, &p.bias)?
            }
            LayerSpec::Dropout { rate } => {
                let m = match mode {
                    Mode::Train { seed } => Mode::Train {
                        seed: derive_seed(seed, stream::DROPOUT, i as u64),
                    },
                    Mode::Infer => Mode::Infer,
                };
                let (y, mask) = layers::dropout(x, rate, m)?;
                step.mask = mask;
                y
            }
            LayerSpec::SoftmaxXent => return Ok(step),
        };
        step.output = Some(out);
        Ok(step)
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Trace> {
        self.check_input(x)?;
        let nl = self.arch.layers.len();
        let mut acts = Vec::with_capacity(nl);
        let mut argmax = vec![None; nl];
        let mut masks = vec![None; nl];
        let mut cur = x.clone();
        for i in 0..nl {
            let step = self.layer_forward(i, cur, mode)?;
            let Some(out) = step.output else {
                cur = step.input;
                break;
            };
            acts.push(step.input);
            argmax[i] = step.argmax;
            masks[i] = step.mask;
            cur = out;
        }
        acts.push(cur);
        Ok(Trace { acts, argmax, masks })
    }

    /// Loss from layer `start` on, given that layer's input, together with
    /// the ReLU sign pattern and pool argmax choices seen along the way.
    fn loss_from(&self, start: usize, input: Tensor, labels: &[usize], mode: Mode) -> Result<(f64, Vec<u64>)> {
        let mut pattern = Vec::new();
        let mut cur = input;
        for i in start..self.arch.layers.len() {
            let step = self.layer_forward(i, cur, mode)?;
            if let LayerSpec::Relu = self.arch.layers[i] {
                pattern.extend(step.input.data().chunks(64).map(|c| {
                    c.iter().enumerate().fold(0u64, |w, (b, &v)| w | (((v > 0.0) as u64) << b))
                }));
            }
            if let Some(idx) = &step.argmax {
                pattern.extend(idx.iter().map(|&j| j as u64));
            }
            match step.output {
                Some(out) => cur = out,
                None => {
                    cur = step.input;
                    break;
                }
            }
        }
        Ok((layers::softmax_cross_entropy(&cur, labels)?.0, pattern))
    }

    /// Gradients of the loss given `dlogits`, its gradient at the logits.
    pub fn backward(&self, trace: &Trace, dlogits: Tensor) -> Result<Gradients> {
        let mut grads = self.params.zeros_like();
        let mut d = dlogits;
        let n = d.shape()[0];
        for i in (0..trace.acts.len() - 1).rev() {
            let input = &trace.acts[i];
            d = match self.arch.layers[i] {
                LayerSpec::Conv { .. } => {
                    let p = self.params.layers[i].as_ref().expect("conv has params");
                    let (dx, dw, db) = layers::conv2d_backward(input, &p.weight, &d)?;
                    grads.layers[i] = Some(LayerParams { weight: dw, bias: db });
                    dx
                }
                LayerSpec::Maxpool { .. } => {
                    let idx = trace.argmax[i].as_ref().expect("pool caches argmax");
                    layers::maxpool_backward(input.shape(), idx, &d)?
                }
                LayerSpec::Relu => layers::relu_backward(input, &d),
                LayerSpec::Fc { .. } => {
                    let p = self.params.layers[i].as_ref().expect("fc has params");
                    let (dx, dw, db) = layers::fully_connected_backward(input, &p.weight, &d)?;
                    grads.layers[i] = Some(LayerParams { weight: dw, bias: db });
                    dx.reshape(self.shapes[i].batched(n))?
                }
                LayerSpec::Dropout { .. } => layers::dropout_backward(trace.masks[i].as_deref(), &d),
                LayerSpec::SoftmaxXent => unreachable!("softmax-xent is never cached"),
            };
        }
        Ok(grads)
    }

    /// Mean cross-entropy, softmax probabilities and parameter gradients.
    pub fn loss_and_grads(&self, x: &Tensor, labels: &[usize], mode: Mode) -> Result<(f64, Tensor, Gradients)> {
        let trace = self.forward(x, mode)?;
        let (loss, probs) = layers::softmax_cross_entropy(trace.logits(), labels)?;
        let dlogits = layers::softmax_cross_entropy_backward(&probs, labels)?;
        let grads = self.backward(&trace, dlogits)?;
        Ok((loss, probs, grads))
    }

    pub fn loss(&self, x: &Tensor, labels: &[usize], mode: Mode) -> Result<f64> {
        let trace = self.forward(x, mode)?;
        Ok(layers::softmax_cross_entropy(trace.logits(), labels)?.0)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x, Mode::Infer)?.acts.pop().expect("trace holds logits"))
    }

    /// `p <- p - lr * g` for every parameter.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Parameter(format!("learning rate must be finite and non-negative, got {lr}")));
        }
        for (p, g) in self.params.tensors_mut().zip(grads.tensors()) {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            p.data_mut().iter_mut().zip(g.data()).for_each(|(w, g)| *w -= lr * g);
        }
        Ok(())
    }
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub coords: usize,
    /// Coordinates whose probes changed a ReLU sign or pool argmax, where
    /// the loss is not differentiable across the probe interval.
    pub skipped: usize,
}

fn param_mut(m: &mut Model, layer: usize, which: usize, k: usize) -> &mut f64 {
    let p = m.params.layers[layer].as_mut().expect("gradient layout matches params");
    let t = if which == 0 { &mut p.weight } else { &mut p.bias };
    &mut t.data_mut()[k]
}

/// Tensors with at most this many entries are checked exhaustively.
const FULL_CHECK_MAX: usize = 500;
const SAMPLED_COORDS: usize = 200;

/// Central-difference check of every parameter gradient. Dropout runs in
/// inference mode; its training-time scaling can saturate the softmax at
/// initialization and push gradients below the difference quotient's
/// rounding floor. `seed` picks the sampled coordinates of large tensors.
pub fn gradient_check(model: &Model, x: &Tensor, labels: &[usize], epsilon: f64, seed: u64) -> Result<GradCheck> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Parameter(format!("epsilon must lie in [1e-7, 1e-3], got {epsilon}")));
    }
    let mode = Mode::Infer;
    let trace = model.forward(x, mode)?;
    let (_, probs) = layers::softmax_cross_entropy(trace.logits(), labels)?;
    let grads = model.backward(&trace, layers::softmax_cross_entropy_backward(&probs, labels)?)?;
    if !grads.all_finite() {
        return Err(Error::Numeric("non-finite analytic gradient".into()));
    }
    let mut probe = model.clone();
    let mut report = GradCheck { max_rel_error: 0.0, coords: 0, skipped: 0 };
    let mut tensor_id = 0;
    for (li, g) in grads.layers.iter().enumerate() {
        let Some(g) = g else { continue };
        let input = &trace.acts[li];
        let (_, base_pattern) = model.loss_from(li, input.clone(), labels, mode)?;
        for (which, gt) in [&g.weight, &g.bias].into_iter().enumerate() {
            let len = gt.len();
            let picks: Vec<usize> = if len <= FULL_CHECK_MAX {
                (0..len).collect()
            } else {
                let mut rng = seeded_rng(derive_seed(seed, stream::GRADCHECK, tensor_id));
                let mut v = index::sample(&mut rng, len, SAMPLED_COORDS).into_vec();
                v.sort_unstable();
                v
            };
            tensor_id += 1;
            for k in picks {
                let orig = *param_mut(&mut probe, li, which, k);
                let mut eval = |v: f64| {
                    *param_mut(&mut probe, li, which, k) = v;
                    probe.loss_from(li, input.clone(), labels, mode)
                };
                let (lp, pp) = eval(orig + epsilon)?;
                let (lm, pm) = eval(orig - epsilon)?;
                *param_mut(&mut probe, li, which, k) = orig;
                if !(lp.is_finite() && lm.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite loss probing layer {li} entry {k}")));
                }
                if pp != base_pattern || pm != base_pattern {
                    report.skipped += 1;
                    continue;
                }
                let num = (lp - lm) / (2.0 * epsilon);
                let a = gt.data()[k];
                let rel = (a - num).abs() / (a.abs() + num.abs()).max(1e-8);
                report.max_rel_error = report.max_rel_error.max(rel);
                report.coords += 1;
            }
        }
    }
    Ok(report)
}
