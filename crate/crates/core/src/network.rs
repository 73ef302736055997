//! Noisy dueling distributional network with exact backpropagation and Adam.
//!
//! The network is a fixed composition: an encoder of ReLU layers, then a
//! value stream (`n_atoms` outputs) and an advantage stream
//! (`n_actions × n_atoms` outputs) combined per atom as
//! `v + a − mean_a(a)`. A softmax over atoms turns each action's logits into
//! a return distribution. With `n_atoms == 1` the same head produces scalar
//! action values instead.
//!
//! Every linear layer can carry a noisy stream,
//! `y = (b + W x) + (b_σ ⊙ ε_b + (W_σ ⊙ ε_w) x)`, with factorised Gaussian
//! noise `ε_w = f(ε_out) f(ε_in)ᵀ`, `ε_b = f(ε_out)`, `f(x) = sign(x)√|x|`.
//! The noise sample is cached on the layer and only changes on
//! [`NetworkParams::resample_noise`].

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::distributional::softmax;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Shape of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub observation_dim: usize,
    pub n_actions: usize,
    /// Widths of the encoder's hidden ReLU layers.
    pub hidden: Vec<usize>,
    /// Width of the hidden layer inside each stream; 0 for a direct linear head.
    pub stream_hidden: usize,
    /// Atoms per action; 1 gives a scalar value head.
    pub n_atoms: usize,
    pub dueling: bool,
    pub noisy: bool,
    pub sigma0: f64,
}

impl Architecture {
    fn validate(&self) -> Result<()> {
        if self.observation_dim == 0 || self.n_actions == 0 || self.n_atoms == 0 {
            return Err(Error::Config(format!("degenerate architecture {self:?}")));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        if self.noisy && !(self.sigma0 > 0.0) {
            return Err(Error::Config(format!("sigma0 must be positive, got {}", self.sigma0)));
        }
        Ok(())
    }
}

/// Draws one factorised noise sample for a `fan_out × fan_in` layer.
pub fn factorised_noise(fan_in: usize, fan_out: usize, rng: &mut Rng) -> (Array2<f64>, Array1<f64>) {
    let f = |x: f64| x.signum() * x.abs().sqrt();
    let eps_in: Array1<f64> = (0..fan_in).map(|_| f(rng.sample(StandardNormal))).collect();
    let eps_out: Array1<f64> = (0..fan_out).map(|_| f(rng.sample(StandardNormal))).collect();
    let eps_w = outer(&eps_out, &eps_in);
    (eps_w, eps_out)
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

/// Noisy-stream parameters and the cached noise sample of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyStream {
    pub weight_sigma: Array2<f64>,
    pub bias_sigma: Array1<f64>,
    pub eps_w: Array2<f64>,
    pub eps_b: Array1<f64>,
}

/// Linear layer, optionally with a noisy stream.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyLinear {
    /// `fan_out × fan_in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub noise: Option<NoisyStream>,
}

impl NoisyLinear {
    /// Uniform `±1/√fan_in` weights and biases; noisy σ set to
    /// `σ0/√fan_in` with a zero noise cache.
    pub fn init(fan_in: usize, fan_out: usize, noisy: Option<f64>, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-bound..bound));
        let bias = Array1::from_shape_simple_fn(fan_out, || rng.random_range(-bound..bound));
        let noise = noisy.map(|sigma0| {
            let sigma = sigma0 / (fan_in as f64).sqrt();
            NoisyStream {
                weight_sigma: Array2::from_elem((fan_out, fan_in), sigma),
                bias_sigma: Array1::from_elem(fan_out, sigma),
                eps_w: Array2::zeros((fan_out, fan_in)),
                eps_b: Array1::zeros(fan_out),
            }
        });
        Self { weight, bias, noise }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn resample(&mut self, rng: &mut Rng) {
        let (fan_in, fan_out) = (self.fan_in(), self.fan_out());
        if let Some(noise) = &mut self.noise {
            let (eps_w, eps_b) = factorised_noise(fan_in, fan_out, rng);
            noise.eps_w = eps_w;
            noise.eps_b = eps_b;
        }
    }

    /// Weights and biases in effect for this forward pass.
    fn effective(&self, noise_on: bool) -> (Array2<f64>, Array1<f64>) {
        match (&self.noise, noise_on) {
            (Some(n), true) => (&self.weight + &(&n.weight_sigma * &n.eps_w), &self.bias + &(&n.bias_sigma * &n.eps_b)),
            _ => (self.weight.clone(), self.bias.clone()),
        }
    }

    /// Single-input forward pass, evaluated term by term.
    pub fn forward(&self, x: &[f64], noise_on: bool) -> Result<Vec<f64>> {
        if x.len() != self.fan_in() {
            return Err(Error::Dimension(format!("layer expects {} inputs, got {}", self.fan_in(), x.len())));
        }
        let x = ArrayView2::from_shape((x.len(), 1), x).expect("column view");
        let mut y = self.weight.dot(&x).column(0).to_owned() + &self.bias;
        if let (Some(n), true) = (&self.noise, noise_on) {
            let noisy = (&n.weight_sigma * &n.eps_w).dot(&x).column(0).to_owned() + &(&n.bias_sigma * &n.eps_b);
            y += &noisy;
        }
        Ok(y.to_vec())
    }

    fn forward_batch(&self, x: &Array2<f64>, noise_on: bool) -> (Array2<f64>, Array2<f64>) {
        let (w, b) = self.effective(noise_on);
        let y = x.dot(&w.t()) + &b;
        (y, w)
    }
}

/// Per-layer gradients, mirroring [`NoisyLinear`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub weight_sigma: Option<Array2<f64>>,
    pub bias_sigma: Option<Array1<f64>>,
}

impl LayerGrad {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = vec![slice(&self.weight), slice1(&self.bias)];
        if let (Some(w), Some(b)) = (&self.weight_sigma, &self.bias_sigma) {
            out.push(slice(w));
            out.push(slice1(b));
        }
        out
    }
}

/// Gradients of every learnable tensor, in [`NetworkParams::layers`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(LayerGrad::tensors).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|&g| g == 0.0))
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

/// A named parameter or noise tensor, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// All learnable parameters θ = {ξ, η, ψ}: encoder, value stream and
/// advantage stream.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub arch: Architecture,
    pub encoder: Vec<NoisyLinear>,
    /// Empty when the dueling head is disabled.
    pub value: Vec<NoisyLinear>,
    pub advantage: Vec<NoisyLinear>,
}

/// Intermediates of a batched forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// `(input, pre-activation, effective weight, followed by ReLU)` for every layer.
    records: Vec<(Array2<f64>, Array2<f64>, Array2<f64>, bool)>,
    /// Logits `[batch, action, atom]`.
    pub logits: Array3<f64>,
    noise_on: bool,
}

impl Tape {
    /// Which ReLU units were active, layer by layer.
    pub fn active_units(&self) -> Vec<bool> {
        self.records.iter().filter(|r| r.3).flat_map(|r| r.1.iter().map(|&z| z > 0.0)).collect()
    }
}

impl NetworkParams {
    pub fn init(arch: Architecture, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let noisy = arch.noisy.then_some(arch.sigma0);
        let mut encoder = Vec::new();
        let mut width = arch.observation_dim;
        for &h in &arch.hidden {
            encoder.push(NoisyLinear::init(width, h, noisy, rng));
            width = h;
        }
        let stream = |outputs: usize, rng: &mut Rng| {
            let mut layers = Vec::new();
            let mut w = width;
            if arch.stream_hidden > 0 {
                layers.push(NoisyLinear::init(w, arch.stream_hidden, noisy, rng));
                w = arch.stream_hidden;
            }
            layers.push(NoisyLinear::init(w, outputs, noisy, rng));
            layers
        };
        let value = if arch.dueling { stream(arch.n_atoms, rng) } else { Vec::new() };
        let advantage = stream(arch.n_actions * arch.n_atoms, rng);
        Ok(Self { arch, encoder, value, advantage })
    }

    /// Layers in canonical order with their names.
    pub fn layers(&self) -> impl Iterator<Item = (String, &NoisyLinear)> {
        let named = |prefix: &'static str, v: &'static str| move |(i, l)| (format!("{prefix}.{i}{v}"), l);
        self.encoder
            .iter()
            .enumerate()
            .map(named("encoder", ""))
            .chain(self.value.iter().enumerate().map(named("value", "")))
            .chain(self.advantage.iter().enumerate().map(named("advantage", "")))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut NoisyLinear> {
        self.encoder.iter_mut().chain(self.value.iter_mut()).chain(self.advantage.iter_mut())
    }

    /// Mutable learnable tensors, in the same order as [`Gradients::tensors`].
    pub fn learnable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in self.layers_mut() {
            out.push(layer.weight.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
            if let Some(n) = &mut layer.noise {
                out.push(n.weight_sigma.as_slice_mut().expect("standard layout"));
                out.push(n.bias_sigma.as_slice_mut().expect("standard layout"));
            }
        }
        out
    }

    pub fn learnable_len(&self) -> usize {
        self.layers()
            .map(|(_, l)| {
                let base = l.weight.len() + l.bias.len();
                if l.noise.is_some() {
                    2 * base
                } else {
                    base
                }
            })
            .sum()
    }

    /// Refreshes every noisy layer's cached ε, layer by layer in canonical order.
    pub fn resample_noise(&mut self, rng: &mut Rng) {
        for layer in self.layers_mut() {
            layer.resample(rng);
        }
    }

    /// Zeroes every cached noise sample.
    pub fn clear_noise(&mut self) {
        for layer in self.layers_mut() {
            if let Some(n) = &mut layer.noise {
                n.eps_w.fill(0.0);
                n.eps_b.fill(0.0);
            }
        }
    }

    /// Copies every parameter and noise cache of `online` into `self`.
    pub fn sync_from(&mut self, online: &NetworkParams) -> Result<()> {
        if self.arch != online.arch {
            return Err(Error::Dimension("target and online architectures differ".into()));
        }
        self.clone_from(online);
        Ok(())
    }

    pub fn forward_tape(&self, states: &Array2<f64>, noise_on: bool) -> Result<Tape> {
        if states.ncols() != self.arch.observation_dim {
            return Err(Error::Dimension(format!(
                "network expects observations of length {}, got {}",
                self.arch.observation_dim,
                states.ncols()
            )));
        }
        let batch = states.nrows();
        let (na, nk) = (self.arch.n_actions, self.arch.n_atoms);
        let mut records = Vec::with_capacity(self.encoder.len() + self.value.len() + self.advantage.len());
        let run = |layers: &[NoisyLinear], input: Array2<f64>, records: &mut Vec<_>| {
            let mut x = input;
            for (i, layer) in layers.iter().enumerate() {
                let (z, w) = layer.forward_batch(&x, noise_on);
                let relu = i + 1 < layers.len();
                let next = if relu { z.mapv(|v| v.max(0.0)) } else { z.clone() };
                records.push((x, z, w, relu));
                x = next;
            }
            x
        };
        let mut phi = states.to_owned();
        for layer in &self.encoder {
            let (z, w) = layer.forward_batch(&phi, noise_on);
            let h = z.mapv(|v| v.max(0.0));
            records.push((phi, z, w, true));
            phi = h;
        }
        let value = (!self.value.is_empty()).then(|| run(&self.value, phi.clone(), &mut records));
        let adv = run(&self.advantage, phi, &mut records);
        let adv =
            adv.as_standard_layout().into_owned().into_shape_with_order((batch, na, nk)).expect("advantage layout");
        let logits = match value {
            Some(v) => {
                let mean = adv.mean_axis(Axis(1)).expect("at least one action");
                let mut logits = adv;
                for a in 0..na {
                    let mut slab = logits.slice_mut(s![.., a, ..]);
                    slab += &v;
                    slab -= &mean;
                }
                logits
            }
            None => adv,
        };
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::Numerical("non-finite network output".into()));
        }
        Ok(Tape { records, logits, noise_on })
    }

    /// Logits `[action, atom]` for one state.
    pub fn logits(&self, state: &[f64], noise_on: bool) -> Result<Array2<f64>> {
        let states = ArrayView2::from_shape((1, state.len()), state).expect("row view").to_owned();
        let tape = self.forward_tape(&states, noise_on)?;
        Ok(tape.logits.index_axis_move(Axis(0), 0))
    }

    /// Per-action return distributions `[action, atom]`; softmax is taken
    /// independently for each action.
    pub fn forward(&self, state: &[f64], noise_on: bool) -> Result<Array2<f64>> {
        let mut logits = self.logits(state, noise_on)?;
        for mut row in logits.rows_mut() {
            let p = softmax(row.as_slice().expect("contiguous row"));
            row.assign(&Array1::from(p));
        }
        Ok(logits)
    }

    /// Reverse-mode pass for `dL/d logits` (shape `[batch, action, atom]`).
    pub fn backward(&self, tape: &Tape, dlogits: &Array3<f64>) -> Result<Gradients> {
        if dlogits.dim() != tape.logits.dim() {
            return Err(Error::Dimension(format!(
                "logit gradient has shape {:?}, expected {:?}",
                dlogits.dim(),
                tape.logits.dim()
            )));
        }
        let (batch, na, nk) = dlogits.dim();
        let (n_enc, n_val) = (self.encoder.len(), self.value.len());
        let mut grads: Vec<Option<LayerGrad>> = vec![None; tape.records.len()];

        let dadv_full = if self.value.is_empty() {
            dlogits.clone()
        } else {
            // logit = v + a − mean(a): the mean couples every action at an atom.
            let total = dlogits.sum_axis(Axis(1));
            let mut d = dlogits.clone();
            for a in 0..na {
                let mut slab = d.slice_mut(s![.., a, ..]);
                slab.scaled_add(-1.0 / na as f64, &total);
            }
            d
        };
        let dadv = dadv_full
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((batch, na * nk))
            .expect("advantage layout");

        let stream_back =
            |layers: &[NoisyLinear], offset: usize, dout: Array2<f64>, grads: &mut Vec<Option<LayerGrad>>| {
                let mut dy = dout;
                for i in (0..layers.len()).rev() {
                    let (x, z, w, _) = &tape.records[offset + i];
                    if i + 1 < layers.len() {
                        dy.zip_mut_with(z, |g, &zz| {
                            if zz <= 0.0 {
                                *g = 0.0
                            }
                        });
                    }
                    grads[offset + i] = Some(layer_grad(&layers[i], x, &dy, tape.noise_on));
                    dy = dy.dot(w);
                }
                dy
            };

        let mut dphi = stream_back(&self.advantage, n_enc + n_val, dadv, &mut grads);
        if !self.value.is_empty() {
            let dv = dlogits.sum_axis(Axis(1));
            dphi += &stream_back(&self.value, n_enc, dv, &mut grads);
        }
        let mut dy = dphi;
        for i in (0..n_enc).rev() {
            let (x, z, w, _) = &tape.records[i];
            dy.zip_mut_with(z, |g, &zz| {
                if zz <= 0.0 {
                    *g = 0.0
                }
            });
            grads[i] = Some(layer_grad(&self.encoder[i], x, &dy, tape.noise_on));
            if i > 0 {
                dy = dy.dot(w);
            }
        }
        Ok(Gradients { layers: grads.into_iter().map(|g| g.expect("every layer visited")).collect() })
    }

    /// Named tensors for checkpoints: parameters followed by noise caches.
    pub fn named_tensors(&self, prefix: &str) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (name, layer) in self.layers() {
            let mut push = |suffix: &str, shape: Vec<usize>, data: &[f64]| {
                out.push(NamedTensor { name: format!("{prefix}{name}.{suffix}"), shape, data: data.to_vec() });
            };
            let (o, i) = (layer.fan_out(), layer.fan_in());
            push("weight", vec![o, i], slice(&layer.weight));
            push("bias", vec![o], slice1(&layer.bias));
            if let Some(n) = &layer.noise {
                push("weight_sigma", vec![o, i], slice(&n.weight_sigma));
                push("bias_sigma", vec![o], slice1(&n.bias_sigma));
                push("eps_w", vec![o, i], slice(&n.eps_w));
                push("eps_b", vec![o], slice1(&n.eps_b));
            }
        }
        out
    }

    /// Overwrites every tensor from `lookup`, which must supply each name
    /// with exactly the expected shape.
    pub fn load_tensors<'a>(
        &mut self,
        prefix: &str,
        mut lookup: impl FnMut(&str) -> Option<&'a NamedTensor>,
    ) -> Result<()> {
        let expected = self.named_tensors(prefix);
        let mut loaded = Vec::with_capacity(expected.len());
        for want in &expected {
            let got = lookup(&want.name).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", want.name)))?;
            if got.shape != want.shape || got.data.len() != want.data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, architecture expects {:?}",
                    want.name, got.shape, want.shape
                )));
            }
            loaded.push(got.data.clone());
        }
        let mut it = loaded.into_iter();
        for layer in self.layers_mut() {
            let mut next = || it.next().expect("tensor count checked");
            copy_into(layer.weight.as_slice_mut().unwrap(), next());
            copy_into(layer.bias.as_slice_mut().unwrap(), next());
            if let Some(n) = &mut layer.noise {
                copy_into(n.weight_sigma.as_slice_mut().unwrap(), next());
                copy_into(n.bias_sigma.as_slice_mut().unwrap(), next());
                copy_into(n.eps_w.as_slice_mut().unwrap(), next());
                copy_into(n.eps_b.as_slice_mut().unwrap(), next());
            }
        }
        Ok(())
    }
}

fn copy_into(dst: &mut [f64], src: Vec<f64>) {
    dst.copy_from_slice(&src);
}

/// Gradients of one layer given its input `x` and `dL/dz` for its
/// pre-activation: `dW = dzᵀ x`, `dW_σ = dW ⊙ ε_w`, `db_σ = db ⊙ ε_b`.
fn layer_grad(layer: &NoisyLinear, x: &Array2<f64>, dz: &Array2<f64>, noise_on: bool) -> LayerGrad {
    let weight = dz.t().dot(x);
    let bias = dz.sum_axis(Axis(0));
    let (weight_sigma, bias_sigma) = match (&layer.noise, noise_on) {
        (Some(n), true) => (Some(&weight * &n.eps_w), Some(&bias * &n.eps_b)),
        (Some(n), false) => (Some(Array2::zeros(n.eps_w.dim())), Some(Array1::zeros(n.eps_b.len()))),
        (None, _) => (None, None),
    };
    LayerGrad { weight, bias, weight_sigma, bias_sigma }
}

/// Per-atom dueling aggregation `v^i + a^i(action) − mean_action a^i`.
pub fn dueling_logits(value: &[f64], advantage: &Array2<f64>) -> Result<Array2<f64>> {
    if advantage.ncols() != value.len() || advantage.nrows() == 0 {
        return Err(Error::Dimension(format!(
            "value stream has {} atoms, advantage stream is {:?}",
            value.len(),
            advantage.dim()
        )));
    }
    let mean = advantage.mean_axis(Axis(0)).expect("non-empty");
    let v = Array1::from(value.to_vec());
    Ok(advantage - &mean + &v)
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub epsilon: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;

impl AdamState {
    pub fn new(params: &mut NetworkParams, lr: f64, epsilon: f64) -> Self {
        let shapes: Vec<usize> = params.learnable_mut().iter().map(|t| t.len()).collect();
        Self {
            lr,
            epsilon,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update `θ ← θ − lr · m̂ / (√v̂ + ε)`. Non-finite gradients are
    /// refused before anything changes.
    pub fn step(&mut self, params: &mut NetworkParams, grads: &Gradients) -> Result<()> {
        let grads = grads.tensors();
        let mut tensors = params.learnable_mut();
        if grads.len() != tensors.len() || grads.iter().zip(&tensors).any(|(g, t)| g.len() != t.len()) {
            return Err(Error::Dimension("gradient shapes do not match parameters".into()));
        }
        if self.m.len() != tensors.len() || self.m.iter().zip(&tensors).any(|(m, t)| m.len() != t.len()) {
            return Err(Error::Dimension("optimizer state does not match parameters".into()));
        }
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::Numerical("non-finite gradient; update refused".into()));
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        for (k, (theta, g)) in tensors.iter_mut().zip(&grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..theta.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                theta[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use ndarray::array;

    fn arch(noisy: bool, dueling: bool) -> Architecture {
        Architecture {
            observation_dim: 4,
            n_actions: 3,
            hidden: vec![6, 5],
            stream_hidden: 0,
            n_atoms: 7,
            dueling,
            noisy,
            sigma0: 0.5,
        }
    }

    #[test]
    fn factorised_noise_is_rank_one() {
        let mut rng = stream(0, Stream::Noise);
        let (w, b) = factorised_noise(2, 3, &mut rng);
        assert_eq!(w.dim(), (3, 2));
        assert_eq!(b.len(), 3);
        // Every 2x2 minor of an outer product vanishes.
        let minor = w[[0, 0]] * w[[1, 1]] - w[[0, 1]] * w[[1, 0]];
        assert!(minor.abs() < 1e-12);
        for o in 0..3 {
            assert_eq!(w[[o, 0]] / w[[0, 0]], b[o] / b[0]);
        }
    }

    #[test]
    fn noise_mean_is_near_zero() {
        let mut rng = stream(3, Stream::Noise);
        let mut acc = Array2::<f64>::zeros((3, 2));
        let draws = 100_000;
        for _ in 0..draws {
            acc += &factorised_noise(2, 3, &mut rng).0;
        }
        acc /= draws as f64;
        assert!(acc.iter().all(|m| m.abs() < 0.02), "{acc:?}");
    }

    #[test]
    fn noisy_forward_cases() {
        let mut rng = stream(0, Stream::Params);
        let mut layer = NoisyLinear::init(2, 2, Some(0.5), &mut rng);
        layer.weight = Array2::eye(2);
        layer.bias.fill(0.0);
        assert_eq!(layer.forward(&[0.3, -2.0], false).unwrap(), vec![0.3, -2.0]);

        let mut layer = NoisyLinear::init(2, 3, Some(0.5), &mut rng);
        layer.weight.fill(0.0);
        layer.bias.fill(0.0);
        let n = layer.noise.as_mut().unwrap();
        n.weight_sigma.fill(1.0);
        n.eps_w.fill(1.0);
        n.bias_sigma = array![0.5, -1.0, 2.0];
        n.eps_b = array![2.0, 1.0, 0.25];
        let y = layer.forward(&[1.0, 1.0], true).unwrap();
        assert_eq!(y, vec![0.5 * 2.0 + 2.0, -1.0 + 2.0, 0.5 + 2.0]);

        assert!(matches!(layer.forward(&[1.0], true), Err(Error::Dimension(_))));
    }

    #[test]
    fn noise_stream_is_additive() {
        let mut rng = stream(4, Stream::Params);
        let mut layer = NoisyLinear::init(3, 2, Some(0.5), &mut rng);
        layer.resample(&mut rng);
        let x = [0.2, -0.7, 1.1];
        let on = layer.forward(&x, true).unwrap();
        let off = layer.forward(&x, false).unwrap();
        let n = layer.noise.as_ref().unwrap();
        let term = (&n.weight_sigma * &n.eps_w).dot(&array![0.2, -0.7, 1.1]) + &(&n.bias_sigma * &n.eps_b);
        for k in 0..2 {
            assert!((on[k] - off[k] - term[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_noise_matches_deterministic_stream() {
        let mut rng = stream(4, Stream::Params);
        let layer = NoisyLinear::init(3, 2, Some(0.5), &mut rng);
        let x = [0.2, -0.7, 1.1];
        assert_eq!(layer.forward(&x, true).unwrap(), layer.forward(&x, false).unwrap());
    }

    #[test]
    fn init_bounds_and_sigma() {
        let mut rng = stream(1, Stream::Params);
        let layer = NoisyLinear::init(4, 8, Some(0.5), &mut rng);
        assert!(layer.noise.as_ref().unwrap().weight_sigma.iter().all(|&s| s == 0.25));
        assert!(layer.weight.iter().all(|w| w.abs() <= 0.5));
        let a = NetworkParams::init(arch(true, true), &mut stream(2, Stream::Params)).unwrap();
        let b = NetworkParams::init(arch(true, true), &mut stream(2, Stream::Params)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resampling_is_deterministic_and_sticky() {
        let base = NetworkParams::init(arch(true, true), &mut stream(2, Stream::Params)).unwrap();
        let mut a = base.clone();
        let mut b = base.clone();
        a.resample_noise(&mut stream(5, Stream::Noise));
        b.resample_noise(&mut stream(5, Stream::Noise));
        assert_eq!(a, b);
        let s = [1.0, 0.0, 0.0, 0.0];
        assert_eq!(a.forward(&s, true).unwrap(), a.forward(&s, true).unwrap());
        let mut differ = 0;
        for seed in 0..100 {
            let mut c = base.clone();
            c.resample_noise(&mut stream(1000 + seed, Stream::Noise));
            if c != a {
                differ += 1;
            }
        }
        assert_eq!(differ, 100);
    }

    #[test]
    fn dueling_aggregation() {
        let adv = array![[3.0], [1.0]];
        assert_eq!(dueling_logits(&[1.0], &adv).unwrap(), array![[2.0], [0.0]]);
        let flat = array![[0.5, 1.0], [0.5, 1.0], [0.5, 1.0]];
        let l = dueling_logits(&[0.2, -0.1], &flat).unwrap();
        assert_eq!(l.row(0), l.row(1));
        let shifted = &flat + 4.0;
        assert_eq!(dueling_logits(&[0.2, -0.1], &shifted).unwrap(), l);
        assert!(matches!(dueling_logits(&[0.0; 3], &flat), Err(Error::Dimension(_))));
    }

    #[test]
    fn rows_are_distributions() {
        let mut net = NetworkParams::init(arch(true, true), &mut stream(7, Stream::Params)).unwrap();
        net.resample_noise(&mut stream(7, Stream::Noise));
        let p = net.forward(&[0.3, -1.0, 2.0, 0.5], true).unwrap();
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn zero_parameters_give_uniform_rows() {
        let mut net = NetworkParams::init(arch(false, true), &mut stream(7, Stream::Params)).unwrap();
        for t in net.learnable_mut() {
            t.fill(0.0);
        }
        let p = net.forward(&[1.0, 0.0, 0.0, 0.0], false).unwrap();
        assert!(p.iter().all(|&x| (x - 1.0 / 7.0).abs() < 1e-15));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let net = NetworkParams::init(arch(true, true), &mut stream(8, Stream::Params)).unwrap();
        let states = Array2::from_shape_vec((2, 4), vec![1.0, 0.0, 0.5, 0.0, 0.0, 1.0, 0.0, -1.0]).unwrap();
        let tape = net.forward_tape(&states, true).unwrap();
        let g = net.backward(&tape, &Array3::zeros(tape.logits.dim())).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn single_noisy_layer_gradient() {
        // A network with no hidden layers and a non-dueling head is one layer.
        let a = Architecture { hidden: vec![], dueling: false, n_actions: 2, n_atoms: 1, ..arch(true, false) };
        let mut net = NetworkParams::init(a, &mut stream(9, Stream::Params)).unwrap();
        net.resample_noise(&mut stream(9, Stream::Noise));
        let states = Array2::from_shape_vec((1, 4), vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let tape = net.forward_tape(&states, true).unwrap();
        let mut d = Array3::zeros((1, 2, 1));
        d[[0, 0, 0]] = 1.0;
        let g = net.backward(&tape, &d).unwrap();
        let layer = &g.layers[0];
        assert_eq!(layer.bias, array![1.0, 0.0]);
        let eps_b = &net.advantage[0].noise.as_ref().unwrap().eps_b;
        assert_eq!(layer.bias_sigma.as_ref().unwrap(), &array![eps_b[0], 0.0]);
        let eps_w = &net.advantage[0].noise.as_ref().unwrap().eps_w;
        for i in 0..4 {
            assert_eq!(layer.weight_sigma.as_ref().unwrap()[[0, i]], eps_w[[0, i]] * states[[0, i]]);
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut net = NetworkParams::init(arch(false, true), &mut stream(1, Stream::Params)).unwrap();
        let before = net.clone();
        let mut opt = AdamState::new(&mut net, 1e-3, 1.5e-4);
        opt.m[0][0] = 1.0;
        let states = Array2::zeros((1, 4));
        let tape = net.forward_tape(&states, false).unwrap();
        let zero = net.backward(&tape, &Array3::zeros(tape.logits.dim())).unwrap();
        // A stale first moment still moves parameters, so check with fresh moments.
        let mut fresh = AdamState::new(&mut net, 1e-3, 1.5e-4);
        fresh.step(&mut net, &zero).unwrap();
        assert_eq!(net, before);
        opt.step(&mut net, &zero).unwrap();
        assert_eq!(opt.m[0][0], 0.9);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let a = Architecture {
            hidden: vec![],
            dueling: false,
            n_actions: 1,
            n_atoms: 1,
            observation_dim: 1,
            ..arch(false, false)
        };
        let mut net = NetworkParams::init(a, &mut stream(1, Stream::Params)).unwrap();
        net.advantage[0].weight.fill(0.0);
        let mut opt = AdamState::new(&mut net, 0.1, 1e-12);
        let grads = Gradients {
            layers: vec![LayerGrad { weight: array![[1.0]], bias: array![0.0], weight_sigma: None, bias_sigma: None }],
        };
        opt.step(&mut net, &grads).unwrap();
        assert!((net.advantage[0].weight[[0, 0]] + 0.1).abs() < 1e-10);
        let bad = Gradients {
            layers: vec![LayerGrad {
                weight: array![[f64::NAN]],
                bias: array![0.0],
                weight_sigma: None,
                bias_sigma: None,
            }],
        };
        let snapshot = net.clone();
        assert!(matches!(opt.step(&mut net, &bad), Err(Error::Numerical(_))));
        assert_eq!(net, snapshot);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn sync_copies_and_detaches() {
        let mut online = NetworkParams::init(arch(true, true), &mut stream(1, Stream::Params)).unwrap();
        online.resample_noise(&mut stream(1, Stream::Noise));
        let mut target = NetworkParams::init(arch(true, true), &mut stream(2, Stream::Params)).unwrap();
        target.sync_from(&online).unwrap();
        assert_eq!(target, online);
        target.sync_from(&online).unwrap();
        assert_eq!(target, online);
        let snapshot = target.clone();
        online.learnable_mut()[0][0] += 1.0;
        assert_eq!(target, snapshot);
        let mut other = NetworkParams::init(arch(true, false), &mut stream(2, Stream::Params)).unwrap();
        assert!(matches!(other.sync_from(&online), Err(Error::Dimension(_))));
    }

    #[test]
    fn parameter_partition_covers_everything_once() {
        let mut net = NetworkParams::init(arch(true, true), &mut stream(1, Stream::Params)).unwrap();
        let counted: usize = net.learnable_mut().iter().map(|t| t.len()).sum();
        // encoder 4→6→5, value 5→7, advantage 5→21; each tensor doubled by σ.
        let expected = 2 * ((4 * 6 + 6) + (6 * 5 + 5) + (5 * 7 + 7) + (5 * 21 + 21));
        assert_eq!(counted, expected);
        assert_eq!(net.learnable_len(), expected);
    }
}
