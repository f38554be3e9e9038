//! Minimal dense-network numerics: forward pass, exact reverse-mode
//! gradients, and Adam updates for small multilayer perceptrons.
//!
//! Everything runs in `f64`. Parameters live in one flat buffer per network
//! (`[W0 row-major, b0, W1, b1, ...]`), which keeps optimizer state,
//! serialization, and byte-level freeze checks trivial. Hidden layers use
//! `tanh`, the output layer is linear.
//!
//! Shape mismatches are programmer errors and panic via `assert!`.

use rand::Rng;
use rand_distr::StandardNormal;

/// A fully connected network with tanh hidden layers and a linear output
/// layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    /// Flat parameter buffer: for each layer `l`, the weight matrix
    /// (`dims[l+1] x dims[l]`, row-major) followed by the bias vector.
    params: Vec<f64>,
}

/// Per-parameter gradients aligned 1:1 with an [`Mlp`]'s flat buffer, plus
/// the gradient with respect to the network input.
#[derive(Debug, Clone)]
pub struct GradientTape {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

/// Cached activations from a forward pass; `activations[0]` is the input,
/// `activations[l + 1]` the post-activation output of layer `l`.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    activations: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace has layers")
    }
}

fn param_count_for(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl Mlp {
    /// An all-zero network with the given layer dimensions
    /// (input, hidden..., output).
    pub fn zeros(dims: &[usize]) -> Mlp {
        assert!(dims.len() >= 2, "need at least input and output dims");
        assert!(dims.iter().all(|&d| d > 0), "layer dims must be positive");
        Mlp {
            dims: dims.to_vec(),
            params: vec![0.0; param_count_for(dims)],
        }
    }

    /// A randomly initialized network: weights drawn from
    /// `N(0, gain^2 / fan_in)` with gain `sqrt(2)` on hidden layers and
    /// `0.01` on the output layer, biases zero.
    ///
    /// The tiny output gain keeps a fresh policy's logits near zero, so the
    /// initial action distribution is near-uniform and a fresh module
    /// composes as an almost-neutral residual.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Mlp {
        let mut net = Mlp::zeros(dims);
        let layer_count = dims.len() - 1;
        let mut offset = 0;
        for l in 0..layer_count {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let gain = if l + 1 == layer_count {
                0.01
            } else {
                std::f64::consts::SQRT_2
            };
            let scale = gain / (fan_in as f64).sqrt();
            for w in &mut net.params[offset..offset + fan_out * fan_in] {
                let z: f64 = rng.sample(StandardNormal);
                *w = z * scale;
            }
            // biases stay zero
            offset += fan_out * fan_in + fan_out;
        }
        net
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Rebuilds a network from its flat parameter buffer.
    pub fn from_params(dims: &[usize], params: Vec<f64>) -> Mlp {
        assert_eq!(
            params.len(),
            param_count_for(dims),
            "parameter buffer does not match dims {dims:?}"
        );
        let mut net = Mlp::zeros(dims);
        net.params = params;
        net
    }

    /// The flat parameters as little-endian bytes; used for bit-exact
    /// freeze checks and serialization.
    pub fn param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.params.len() * 8);
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    /// Forward pass. Pure: repeated calls with the same input produce
    /// bit-identical outputs.
    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.trace(input).activations.pop().unwrap()
    }

    /// Forward pass that keeps every layer's activations for a later
    /// backward pass.
    pub fn trace(&self, input: &[f64]) -> MlpTrace {
        assert_eq!(
            input.len(),
            self.dims[0],
            "input len {} does not match input dim {}",
            input.len(),
            self.dims[0]
        );
        let layer_count = self.dims.len() - 1;
        let mut activations = Vec::with_capacity(self.dims.len());
        activations.push(input.to_vec());
        let mut offset = 0;
        for l in 0..layer_count {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let weights = &self.params[offset..offset + fan_out * fan_in];
            let biases = &self.params[offset + fan_out * fan_in..offset + fan_out * fan_in + fan_out];
            let x = &activations[l];
            let mut out = Vec::with_capacity(fan_out);
            for o in 0..fan_out {
                let row = &weights[o * fan_in..(o + 1) * fan_in];
                let mut sum = biases[o];
                for (w, xi) in row.iter().zip(x.iter()) {
                    sum = w.mul_add(*xi, sum);
                }
                if l + 1 < layer_count {
                    sum = sum.tanh();
                }
                out.push(sum);
            }
            activations.push(out);
            offset += fan_out * fan_in + fan_out;
        }
        MlpTrace { activations }
    }

    /// Reverse-mode gradients of `output . output_grad` with respect to every
    /// parameter and the input.
    pub fn backward(&self, input: &[f64], output_grad: &[f64]) -> GradientTape {
        let trace = self.trace(input);
        let mut tape = GradientTape::zeros(self);
        self.backward_from_trace(&trace, output_grad, &mut tape);
        tape
    }

    /// Accumulating backward pass from a cached trace: parameter and input
    /// gradients are added (`+=`) into `tape`, so minibatch gradients can be
    /// summed across samples.
    pub fn backward_from_trace(&self, trace: &MlpTrace, output_grad: &[f64], tape: &mut GradientTape) {
        assert_eq!(
            output_grad.len(),
            self.output_dim(),
            "output_grad len {} does not match output dim {}",
            output_grad.len(),
            self.output_dim()
        );
        assert_eq!(tape.params.len(), self.params.len(), "tape shape mismatch");
        assert_eq!(tape.input.len(), self.dims[0], "tape input shape mismatch");

        let layer_count = self.dims.len() - 1;
        // layer offsets into the flat buffer
        let mut offsets = Vec::with_capacity(layer_count);
        let mut offset = 0;
        for l in 0..layer_count {
            offsets.push(offset);
            offset += self.dims[l + 1] * self.dims[l] + self.dims[l + 1];
        }

        let mut upstream = output_grad.to_vec();
        for l in (0..layer_count).rev() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let off = offsets[l];
            let weights = &self.params[off..off + fan_out * fan_in];
            let inputs = &trace.activations[l];
            let outputs = &trace.activations[l + 1];

            // d(pre-activation): identity on the output layer, tanh' elsewhere
            let mut dz = upstream;
            if l + 1 < layer_count {
                for (d, h) in dz.iter_mut().zip(outputs.iter()) {
                    *d *= 1.0 - h * h;
                }
            }

            let mut downstream = vec![0.0; fan_in];
            let (w_grads, b_grads) =
                tape.params[off..off + fan_out * fan_in + fan_out].split_at_mut(fan_out * fan_in);
            for o in 0..fan_out {
                let d = dz[o];
                b_grads[o] += d;
                let row = &weights[o * fan_in..(o + 1) * fan_in];
                let g_row = &mut w_grads[o * fan_in..(o + 1) * fan_in];
                for i in 0..fan_in {
                    g_row[i] = d.mul_add(inputs[i], g_row[i]);
                    downstream[i] = row[i].mul_add(d, downstream[i]);
                }
            }
            upstream = downstream;
        }
        for (t, u) in tape.input.iter_mut().zip(upstream.iter()) {
            *t += u;
        }
    }
}

impl GradientTape {
    pub fn zeros(net: &Mlp) -> GradientTape {
        GradientTape {
            params: vec![0.0; net.param_count()],
            input: vec![0.0; net.input_dim()],
        }
    }

    pub fn zero(&mut self) {
        self.params.iter_mut().for_each(|g| *g = 0.0);
        self.input.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn scale(&mut self, factor: f64) {
        self.params.iter_mut().for_each(|g| *g *= factor);
        self.input.iter_mut().for_each(|g| *g *= factor);
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> AdamConfig {
        AdamConfig {
            learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Adam optimizer state for one flat parameter buffer.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(param_count: usize, config: AdamConfig) -> AdamState {
        AdamState {
            config,
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update with bias correction. `params` and `grads` must match
    /// the state's parameter count.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.first_moment.len(), "param shape mismatch");
        assert_eq!(grads.len(), self.first_moment.len(), "grad shape mismatch");
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            debug_assert!(g.is_finite(), "non-finite gradient at {i}");
            let m = beta1 * self.first_moment[i] + (1.0 - beta1) * g;
            let v = beta2 * self.second_moment[i] + (1.0 - beta2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            let m_hat = m / bias1;
            let v_hat = v / bias2;
            params[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
}
