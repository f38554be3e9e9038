//! The residual policy ensemble: an ordered stack of policy modules whose
//! logits are combined by a simplex weight vector and softmaxed into one
//! action distribution.
//!
//! Modules are combined in logit space, so a module with weight zero is
//! exactly neutral: appending one leaves the composed policy bit-identical
//! until its first optimizer step. Earlier modules freeze when a new one is
//! appended; training later phases never touches their parameters.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::masks::TaskMask;
use crate::nn::{GradientTape, Mlp, MlpTrace};
use crate::rng::rng_from;

/// One policy network inside the ensemble, with its position in the level
/// hierarchy and the mask it was trained under.
#[derive(Debug, Clone)]
pub struct PolicyModule {
    pub net: Mlp,
    pub level: u32,
    pub index: u32,
    pub mask: TaskMask,
    pub frozen: bool,
}

impl PolicyModule {
    /// Display label: `L0` for the root module, `L<level><index>` below it.
    pub fn label(&self) -> String {
        if self.level == 0 {
            "L0".to_string()
        } else {
            format!("L{}{}", self.level, self.index)
        }
    }
}

/// Non-negative per-module coefficients; the composed policy always uses the
/// L1-normalized view.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightVector {
    raw: Vec<f64>,
}

impl WeightVector {
    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn raw_mut(&mut self) -> &mut [f64] {
        &mut self.raw
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn raw_sum(&self) -> f64 {
        self.raw.iter().sum()
    }

    pub fn push_zero(&mut self) {
        self.raw.push(0.0);
    }

    pub fn set_raw(&mut self, raw: Vec<f64>) {
        self.raw = raw;
    }

    /// The simplex view; see [`normalize_weights`].
    pub fn normalized(&self) -> Vec<f64> {
        normalize_weights(&self.raw)
    }

    /// Projects every raw entry back into `[0, 1]`; called after each
    /// optimizer step.
    pub fn clamp_unit(&mut self) {
        for w in &mut self.raw {
            *w = w.clamp(0.0, 1.0);
        }
    }
}

/// `raw / sum(raw)`, or the uniform vector when the sum is zero (a fresh
/// single-module ensemble has raw weight 0 but composes with weight 1).
pub fn normalize_weights(raw: &[f64]) -> Vec<f64> {
    assert!(!raw.is_empty(), "cannot normalize an empty weight vector");
    let sum: f64 = raw.iter().sum();
    if sum == 0.0 {
        vec![1.0 / raw.len() as f64; raw.len()]
    } else {
        raw.iter().map(|w| w / sum).collect()
    }
}

/// Forward artifacts of one composition, kept around for the backward pass.
#[derive(Debug, Clone)]
pub struct ComposeTrace {
    /// Normalized weights used for the combination.
    pub weights: Vec<f64>,
    /// Each module's raw logits, in module order.
    pub module_logits: Vec<Vec<f64>>,
    /// The convex combination of module logits.
    pub combined: Vec<f64>,
    /// Softmax of `combined`.
    pub probs: Vec<f64>,
    raw_sum: f64,
    unfrozen_traces: Vec<Option<MlpTrace>>,
}

/// Gradients produced by backpropagating through a composition: per-module
/// parameter tapes (present only for unfrozen modules) and one gradient per
/// raw weight. Accumulates across samples.
#[derive(Debug, Clone)]
pub struct ComposedGradients {
    pub module_params: Vec<Option<GradientTape>>,
    pub raw_weights: Vec<f64>,
}

impl ComposedGradients {
    pub fn zeros(model: &PrrModel) -> ComposedGradients {
        ComposedGradients {
            module_params: model
                .modules
                .iter()
                .map(|m| (!m.frozen).then(|| GradientTape::zeros(&m.net)))
                .collect(),
            raw_weights: vec![0.0; model.weights.len()],
        }
    }

    pub fn zero(&mut self) {
        for tape in self.module_params.iter_mut().flatten() {
            tape.zero();
        }
        self.raw_weights.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn scale(&mut self, factor: f64) {
        for tape in self.module_params.iter_mut().flatten() {
            tape.scale(factor);
        }
        self.raw_weights.iter_mut().for_each(|g| *g *= factor);
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Pulls a gradient on softmax outputs back to the logits:
/// `dL/dz_j = p_j * (g_j - sum_k g_k p_k)`.
pub fn softmax_backward(probs: &[f64], dist_grad: &[f64]) -> Vec<f64> {
    assert_eq!(probs.len(), dist_grad.len(), "distribution grad shape mismatch");
    let inner: f64 = probs.iter().zip(dist_grad.iter()).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(dist_grad.iter())
        .map(|(p, g)| p * (g - inner))
        .collect()
}

/// The ensemble model: modules in training order, their weight vector, and
/// the task list they were trained against.
#[derive(Debug, Clone)]
pub struct PrrModel {
    modules: Vec<PolicyModule>,
    weights: WeightVector,
    task_names: Vec<String>,
    obs_dim: usize,
    action_dim: usize,
    hidden_dims: Vec<usize>,
}

impl PrrModel {
    /// An empty ensemble; modules appended later use
    /// `[obs_dim, hidden..., action_dim]` networks.
    pub fn new(
        obs_dim: usize,
        action_dim: usize,
        hidden_dims: Vec<usize>,
        task_names: Vec<String>,
    ) -> PrrModel {
        assert!(obs_dim > 0 && action_dim > 0, "dims must be positive");
        PrrModel {
            modules: Vec::new(),
            weights: WeightVector::default(),
            task_names,
            obs_dim,
            action_dim,
            hidden_dims,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn hidden_dims(&self) -> &[usize] {
        &self.hidden_dims
    }

    pub fn task_names(&self) -> &[String] {
        &self.task_names
    }

    /// Registers a task appended to the task list (reuse and weights-only
    /// transfer grow the list; existing module masks keep their historical
    /// length).
    pub fn push_task(&mut self, name: impl Into<String>) {
        self.task_names.push(name.into());
    }

    pub fn modules(&self) -> &[PolicyModule] {
        &self.modules
    }

    pub fn weights(&self) -> &WeightVector {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut WeightVector {
        &mut self.weights
    }

    pub fn normalized_weights(&self) -> Vec<f64> {
        self.weights.normalized()
    }

    pub fn module_labels(&self) -> Vec<String> {
        self.modules.iter().map(|m| m.label()).collect()
    }

    /// Indices of modules currently receiving parameter gradients.
    pub fn unfrozen_indices(&self) -> Vec<usize> {
        self.modules
            .iter()
            .enumerate()
            .filter_map(|(i, m)| (!m.frozen).then_some(i))
            .collect()
    }

    pub fn freeze_all(&mut self) {
        for m in &mut self.modules {
            m.frozen = true;
        }
    }

    pub fn set_frozen(&mut self, module: usize, frozen: bool) {
        self.modules[module].frozen = frozen;
    }

    pub(crate) fn module_net_mut(&mut self, module: usize) -> &mut Mlp {
        assert!(
            !self.modules[module].frozen,
            "attempted to mutate a frozen module"
        );
        &mut self.modules[module].net
    }

    /// Serialized parameter bytes of one module, for bit-exact freeze checks.
    pub fn module_param_bytes(&self, module: usize) -> Vec<u8> {
        self.modules[module].net.param_bytes()
    }

    fn net_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.obs_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.action_dim);
        dims
    }

    /// Appends a freshly initialized module trained under `mask` at the given
    /// level slot. All pre-existing modules freeze; the new raw weight starts
    /// at 0, so the composed policy is unchanged until the first update.
    pub fn append_module(&mut self, mask: TaskMask, level: u32, index: u32, seed: u64) {
        assert_eq!(
            mask.len(),
            self.task_names.len(),
            "mask length {} does not match task count {}",
            mask.len(),
            self.task_names.len()
        );
        // A raw vector summing to zero composes through the uniform fallback;
        // snap it to that view first, otherwise the incoming zero entry would
        // change the fallback and shift the policy.
        if !self.modules.is_empty() && self.weights.raw_sum() == 0.0 {
            let normalized = self.weights.normalized();
            self.weights.set_raw(normalized);
        }
        self.freeze_all();
        let net = Mlp::init(&self.net_dims(), &mut rng_from(seed));
        self.modules.push(PolicyModule {
            net,
            level,
            index,
            mask,
            frozen: false,
        });
        self.weights.push_zero();
    }

    /// The composed action distribution for one observation.
    pub fn compose(&self, obs: &[f64]) -> Vec<f64> {
        self.compose_trace(obs).probs
    }

    /// Greedy action: argmax of the composed distribution, lowest index on
    /// ties.
    pub fn greedy_action(&self, obs: &[f64]) -> usize {
        let probs = self.compose(obs);
        let mut best = 0;
        for (i, p) in probs.iter().enumerate() {
            if *p > probs[best] {
                best = i;
            }
        }
        best
    }

    /// Composition keeping everything the backward pass needs.
    pub fn compose_trace(&self, obs: &[f64]) -> ComposeTrace {
        self.compose_trace_with(obs, None)
    }

    /// Composition that reuses cached logits for frozen modules (their
    /// parameters cannot change within a training phase, so per-observation
    /// logits are loop invariants of the update epochs). Entries for unfrozen
    /// modules are ignored and recomputed.
    pub fn compose_trace_with(
        &self,
        obs: &[f64],
        frozen_logits: Option<&[Vec<f64>]>,
    ) -> ComposeTrace {
        assert_eq!(
            obs.len(),
            self.obs_dim,
            "observation dim {} does not match model {}",
            obs.len(),
            self.obs_dim
        );
        assert!(!self.modules.is_empty(), "cannot compose an empty model");
        if let Some(cache) = frozen_logits {
            assert_eq!(cache.len(), self.modules.len(), "logit cache shape mismatch");
        }

        let weights = self.weights.normalized();
        let mut module_logits = Vec::with_capacity(self.modules.len());
        let mut unfrozen_traces: Vec<Option<MlpTrace>> = Vec::with_capacity(self.modules.len());
        for (i, module) in self.modules.iter().enumerate() {
            if module.frozen {
                if let Some(cache) = frozen_logits {
                    module_logits.push(cache[i].clone());
                    unfrozen_traces.push(None);
                    continue;
                }
            }
            let trace = module.net.trace(obs);
            module_logits.push(trace.output().to_vec());
            unfrozen_traces.push((!module.frozen).then_some(trace));
        }

        let mut combined = vec![0.0; self.action_dim];
        for (w, logits) in weights.iter().zip(module_logits.iter()) {
            for (c, z) in combined.iter_mut().zip(logits.iter()) {
                *c = w.mul_add(*z, *c);
            }
        }
        let probs = softmax(&combined);
        ComposeTrace {
            weights,
            module_logits,
            combined,
            probs,
            raw_sum: self.weights.raw_sum(),
            unfrozen_traces,
        }
    }

    /// Gradients of a loss with respect to the trainable parameters, given
    /// the loss gradient on the composed action distribution.
    ///
    /// The gradient flows through the softmax, the convex combination, and
    /// the normalization quotient into every raw weight; parameter gradients
    /// flow only into unfrozen modules.
    pub fn backprop_composed(&self, obs: &[f64], dist_grad: &[f64]) -> ComposedGradients {
        let trace = self.compose_trace(obs);
        let logit_grad = softmax_backward(&trace.probs, dist_grad);
        let mut grads = ComposedGradients::zeros(self);
        self.backprop_from_trace(obs, &trace, &logit_grad, &mut grads);
        grads
    }

    /// Accumulating backward pass from a trace, taking the loss gradient on
    /// the combined logits. Adds into `grads` so minibatch gradients can be
    /// summed.
    pub fn backprop_from_trace(
        &self,
        obs: &[f64],
        trace: &ComposeTrace,
        logit_grad: &[f64],
        grads: &mut ComposedGradients,
    ) {
        assert_eq!(logit_grad.len(), self.action_dim, "logit grad shape mismatch");
        assert_eq!(grads.raw_weights.len(), self.weights.len(), "grads shape mismatch");

        // per-module sensitivity of the loss to its normalized weight
        let weight_sens: Vec<f64> = trace
            .module_logits
            .iter()
            .map(|logits| {
                logits
                    .iter()
                    .zip(logit_grad.iter())
                    .map(|(z, g)| z * g)
                    .sum()
            })
            .collect();

        // through the normalization quotient: d w_hat_i / d raw_k =
        // delta_ik / S - raw_i / S^2; no gradient at the uniform fallback
        if trace.raw_sum != 0.0 {
            let inner: f64 = weight_sens
                .iter()
                .zip(trace.weights.iter())
                .map(|(u, w)| u * w)
                .sum();
            for (g, u) in grads.raw_weights.iter_mut().zip(weight_sens.iter()) {
                *g += (u - inner) / trace.raw_sum;
            }
        }

        // parameter gradients for unfrozen modules
        for (i, module) in self.modules.iter().enumerate() {
            if module.frozen {
                continue;
            }
            let tape = grads.module_params[i]
                .as_mut()
                .expect("unfrozen module has a tape");
            let module_out_grad: Vec<f64> =
                logit_grad.iter().map(|g| trace.weights[i] * g).collect();
            match &trace.unfrozen_traces[i] {
                Some(mlp_trace) => {
                    module
                        .net
                        .backward_from_trace(mlp_trace, &module_out_grad, tape)
                }
                None => {
                    let mlp_trace = module.net.trace(obs);
                    module
                        .net
                        .backward_from_trace(&mlp_trace, &module_out_grad, tape)
                }
            }
        }
    }

    /// Writes the model in the versioned binary format; see the repository
    /// README for the field order. Round-trips are bit-exact.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| Error::io(path, e);

        w.write_all(MAGIC).map_err(io_err)?;
        write_u32(&mut w, FORMAT_VERSION).map_err(io_err)?;
        write_u32(&mut w, self.obs_dim as u32).map_err(io_err)?;
        write_u32(&mut w, self.action_dim as u32).map_err(io_err)?;
        write_u32(&mut w, self.hidden_dims.len() as u32).map_err(io_err)?;
        for &d in &self.hidden_dims {
            write_u32(&mut w, d as u32).map_err(io_err)?;
        }
        write_u32(&mut w, self.task_names.len() as u32).map_err(io_err)?;
        for name in &self.task_names {
            let bytes = name.as_bytes();
            write_u32(&mut w, bytes.len() as u32).map_err(io_err)?;
            w.write_all(bytes).map_err(io_err)?;
        }
        write_u32(&mut w, self.modules.len() as u32).map_err(io_err)?;
        for module in &self.modules {
            write_u32(&mut w, module.level).map_err(io_err)?;
            write_u32(&mut w, module.index).map_err(io_err)?;
            write_u32(&mut w, module.mask.len() as u32).map_err(io_err)?;
            for &bit in module.mask.bits() {
                w.write_all(&[u8::from(bit)]).map_err(io_err)?;
            }
            w.write_all(&[u8::from(module.frozen)]).map_err(io_err)?;
            write_u32(&mut w, module.net.dims().len() as u32).map_err(io_err)?;
            for &d in module.net.dims() {
                write_u32(&mut w, d as u32).map_err(io_err)?;
            }
            write_u64(&mut w, module.net.param_count() as u64).map_err(io_err)?;
            for p in module.net.params() {
                w.write_all(&p.to_le_bytes()).map_err(io_err)?;
            }
        }
        write_u32(&mut w, self.weights.len() as u32).map_err(io_err)?;
        for weight in self.weights.raw() {
            w.write_all(&weight.to_le_bytes()).map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    /// Reads a model written by [`PrrModel::save`]. Truncated, oversized, or
    /// mismatched files fail with a descriptive error and produce no partial
    /// model.
    pub fn load(path: impl AsRef<Path>) -> Result<PrrModel> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |msg: String| Error::ModelFormat(format!("{}: {msg}", path.display()));

        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic).map_err(bad)?;
        if &magic != MAGIC {
            return Err(bad("not a model file (bad magic)".into()));
        }
        let version = read_u32(&mut r).map_err(bad)?;
        if version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let obs_dim = read_u32(&mut r).map_err(bad)? as usize;
        let action_dim = read_u32(&mut r).map_err(bad)? as usize;
        if obs_dim == 0 || action_dim == 0 {
            return Err(bad("zero observation or action dimension".into()));
        }
        let hidden_count = read_u32(&mut r).map_err(bad)? as usize;
        if hidden_count > MAX_REASONABLE {
            return Err(bad(format!("implausible hidden layer count {hidden_count}")));
        }
        let mut hidden_dims = Vec::with_capacity(hidden_count);
        for _ in 0..hidden_count {
            hidden_dims.push(read_u32(&mut r).map_err(bad)? as usize);
        }
        let task_count = read_u32(&mut r).map_err(bad)? as usize;
        if task_count > MAX_REASONABLE {
            return Err(bad(format!("implausible task count {task_count}")));
        }
        let mut task_names = Vec::with_capacity(task_count);
        for _ in 0..task_count {
            let len = read_u32(&mut r).map_err(bad)? as usize;
            if len > MAX_REASONABLE {
                return Err(bad(format!("implausible task name length {len}")));
            }
            let mut buf = vec![0u8; len];
            read_exact(&mut r, &mut buf).map_err(bad)?;
            task_names
                .push(String::from_utf8(buf).map_err(|_| bad("task name is not utf-8".into()))?);
        }

        let module_count = read_u32(&mut r).map_err(bad)? as usize;
        if module_count > MAX_REASONABLE {
            return Err(bad(format!("implausible module count {module_count}")));
        }
        let mut modules = Vec::with_capacity(module_count);
        for m in 0..module_count {
            let level = read_u32(&mut r).map_err(bad)?;
            let index = read_u32(&mut r).map_err(bad)?;
            let mask_len = read_u32(&mut r).map_err(bad)? as usize;
            if mask_len == 0 || mask_len > MAX_REASONABLE {
                return Err(bad(format!("module {m}: bad mask length {mask_len}")));
            }
            let mut bits = vec![0u8; mask_len];
            read_exact(&mut r, &mut bits).map_err(bad)?;
            if bits.iter().any(|&b| b > 1) {
                return Err(bad(format!("module {m}: mask bits must be 0 or 1")));
            }
            if bits.iter().all(|&b| b == 0) {
                return Err(bad(format!("module {m}: empty mask")));
            }
            let mask = TaskMask::new(bits.iter().map(|&b| b == 1).collect());
            let mut frozen = [0u8; 1];
            read_exact(&mut r, &mut frozen).map_err(bad)?;
            let dim_count = read_u32(&mut r).map_err(bad)? as usize;
            if dim_count < 2 || dim_count > MAX_REASONABLE {
                return Err(bad(format!("module {m}: bad layer count {dim_count}")));
            }
            let mut dims = Vec::with_capacity(dim_count);
            for _ in 0..dim_count {
                let d = read_u32(&mut r).map_err(bad)? as usize;
                if d == 0 {
                    return Err(bad(format!("module {m}: zero layer dim")));
                }
                dims.push(d);
            }
            let param_count = read_u64(&mut r).map_err(bad)? as usize;
            let expected: usize = dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum();
            if param_count != expected {
                return Err(bad(format!(
                    "module {m}: parameter count {param_count} does not match dims {dims:?}"
                )));
            }
            let mut params = Vec::with_capacity(param_count);
            let mut buf = [0u8; 8];
            for p in 0..param_count {
                read_exact(&mut r, &mut buf).map_err(bad)?;
                let value = f64::from_le_bytes(buf);
                if !value.is_finite() {
                    return Err(bad(format!("module {m}: non-finite parameter {p}")));
                }
                params.push(value);
            }
            modules.push(PolicyModule {
                net: Mlp::from_params(&dims, params),
                level,
                index,
                mask,
                frozen: frozen[0] != 0,
            });
        }

        let weight_count = read_u32(&mut r).map_err(bad)? as usize;
        if weight_count != module_count {
            return Err(bad(format!(
                "weight count {weight_count} does not match module count {module_count}"
            )));
        }
        let mut raw = Vec::with_capacity(weight_count);
        let mut buf = [0u8; 8];
        for i in 0..weight_count {
            read_exact(&mut r, &mut buf).map_err(bad)?;
            let value = f64::from_le_bytes(buf);
            if !value.is_finite() {
                return Err(bad(format!("non-finite weight {i}")));
            }
            raw.push(value);
        }

        let mut trailing = [0u8; 1];
        match r.read(&mut trailing) {
            Ok(0) => {}
            Ok(_) => return Err(bad("trailing bytes after model".into())),
            Err(e) => return Err(bad(format!("read error: {e}"))),
        }

        let mut weights = WeightVector::default();
        weights.set_raw(raw);
        Ok(PrrModel {
            modules,
            weights,
            task_names,
            obs_dim,
            action_dim,
            hidden_dims,
        })
    }
}

const MAGIC: &[u8; 4] = b"PRRM";
const FORMAT_VERSION: u32 = 1;
const MAX_REASONABLE: usize = 1 << 20;

fn write_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> std::result::Result<(), String> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            "truncated file".to_string()
        } else {
            format!("read error: {e}")
        }
    })
}

fn read_u32<R: Read>(r: &mut R) -> std::result::Result<u32, String> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> std::result::Result<u64, String> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
