//! Clipped-surrogate proximal policy optimization with generalized advantage
//! estimation, operating on a composed ensemble policy (a single-module
//! ensemble is a plain MLP policy) and a per-phase critic.
//!
//! The update maximizes `min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)`
//! plus an entropy bonus, and minimizes squared value error. Only trainable
//! parameters move: unfrozen module networks, the raw weight vector (clamped
//! to `[0, 1]` after every step), and the critic.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::model::{ComposedGradients, PrrModel};
use crate::nn::{AdamConfig, AdamState, GradientTape, Mlp};
use crate::rng::rng_from;

/// PPO hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_ratio: f64,
    pub epochs: u32,
    pub minibatch_size: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub learning_rate: f64,
    pub episodes_per_update: u32,
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_ratio: 0.2,
            epochs: 4,
            minibatch_size: 64,
            entropy_coef: 0.01,
            value_coef: 0.5,
            learning_rate: 3e-4,
            episodes_per_update: 10,
            normalize_advantages: true,
        }
    }
}

/// One step of experience under the behavior policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub observation: Vec<f64>,
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    pub scaled_reward: f64,
    pub terminal: bool,
}

/// Bookkeeping for one collected episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSummary {
    pub task_id: usize,
    pub raw_return: f64,
    pub scaled_return: f64,
    pub steps: u32,
}

/// Transitions spanning one or more whole episodes, plus the advantages and
/// return targets computed by [`compute_gae`].
#[derive(Debug, Clone, Default)]
pub struct RolloutBatch {
    pub transitions: Vec<Transition>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub episodes: Vec<EpisodeSummary>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Concatenates another batch; advantages must be recomputed afterwards.
    pub fn append(&mut self, mut other: RolloutBatch) {
        self.transitions.append(&mut other.transitions);
        self.episodes.append(&mut other.episodes);
        self.advantages.clear();
        self.returns.clear();
    }
}

/// The per-phase value network.
pub struct Critic {
    net: Mlp,
    adam: AdamState,
}

impl Critic {
    pub fn new(obs_dim: usize, hidden: &[usize], learning_rate: f64, seed: u64) -> Critic {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(obs_dim);
        dims.extend_from_slice(hidden);
        dims.push(1);
        let net = Mlp::init(&dims, &mut rng_from(seed));
        let adam = AdamState::new(net.param_count(), AdamConfig::with_learning_rate(learning_rate));
        Critic { net, adam }
    }

    pub fn value(&self, obs: &[f64]) -> f64 {
        self.net.forward(obs)[0]
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }
}

/// Samples `episodes` whole episodes from `env` under the composed policy.
/// Deterministic given the model, the environment's seed state, and the
/// sampler RNG state.
pub fn collect_rollout(
    model: &PrrModel,
    critic: &Critic,
    env: &mut dyn Environment,
    episodes: u32,
    task_id: usize,
    rng: &mut ChaCha8Rng,
) -> RolloutBatch {
    let mut batch = RolloutBatch::default();
    for _ in 0..episodes {
        let mut obs = env.reset();
        let mut raw_return = 0.0;
        let mut steps = 0u32;
        loop {
            let probs = model.compose(&obs);
            let action = sample_action(&probs, rng);
            let log_prob = probs[action].ln();
            let value = critic.value(&obs);
            let result = env.step(action);
            raw_return += result.raw_reward;
            steps += 1;
            batch.transitions.push(Transition {
                observation: std::mem::take(&mut obs),
                action,
                log_prob,
                value,
                scaled_reward: result.scaled_reward,
                terminal: result.terminal,
            });
            obs = result.observation;
            if result.terminal {
                break;
            }
        }
        // scale the raw total rather than summing scaled steps: integer raw
        // totals then map exactly onto the target return
        batch.episodes.push(EpisodeSummary {
            task_id,
            raw_return,
            scaled_return: env.reward_scale().apply(raw_return),
            steps,
        });
    }
    batch
}

fn sample_action(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut cumulative = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cumulative += p;
        if u < cumulative {
            return i;
        }
    }
    probs.len() - 1
}

/// Runs `episodes` greedy (argmax) episodes and returns per-episode scaled
/// returns.
pub fn evaluate_greedy(model: &PrrModel, env: &mut dyn Environment, episodes: u32) -> Vec<f64> {
    let mut returns = Vec::with_capacity(episodes as usize);
    for _ in 0..episodes {
        let mut obs = env.reset();
        let mut raw = 0.0;
        loop {
            let action = model.greedy_action(&obs);
            let result = env.step(action);
            raw += result.raw_reward;
            obs = result.observation;
            if result.terminal {
                break;
            }
        }
        returns.push(env.reward_scale().apply(raw));
    }
    returns
}

/// Fills `batch.advantages` and `batch.returns`:
///
/// ```text
/// delta_t = r_t + gamma * V(s_{t+1}) * (1 - terminal_t) - V(s_t)
/// A_t     = delta_t + gamma * lambda * A_{t+1} * (1 - terminal_t)
/// target_t = A_t + V(s_t)
/// ```
///
/// Terminal flags isolate episodes; nothing leaks across boundaries. A batch
/// is expected to end at an episode boundary; a truncated trailing episode
/// bootstraps with value 0.
pub fn compute_gae(batch: &mut RolloutBatch, gamma: f64, lambda: f64) {
    let n = batch.transitions.len();
    let mut advantages = vec![0.0; n];
    let mut next_advantage = 0.0;
    for t in (0..n).rev() {
        let tr = &batch.transitions[t];
        let continuing = if tr.terminal { 0.0 } else { 1.0 };
        let next_value = if tr.terminal || t + 1 >= n {
            0.0
        } else {
            batch.transitions[t + 1].value
        };
        let delta = tr.scaled_reward + gamma * next_value * continuing - tr.value;
        next_advantage = delta + gamma * lambda * next_advantage * continuing;
        advantages[t] = next_advantage;
    }
    batch.returns = advantages
        .iter()
        .zip(batch.transitions.iter())
        .map(|(a, tr)| a + tr.value)
        .collect();
    batch.advantages = advantages;
}

/// Shifts and scales the batch advantages to mean 0, unit (population)
/// standard deviation. No-op for batches of size one.
pub fn normalize_advantages(batch: &mut RolloutBatch) {
    let n = batch.advantages.len();
    if n <= 1 {
        return;
    }
    let mean = batch.advantages.iter().sum::<f64>() / n as f64;
    let variance = batch
        .advantages
        .iter()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / n as f64;
    let std = variance.sqrt() + 1e-8;
    for a in &mut batch.advantages {
        *a = (*a - mean) / std;
    }
}

/// Diagnostics from one [`PpoTrainer::update`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateDiagnostics {
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

struct SampleGrad {
    /// dLoss/d(combined logits), loss = -(surrogate + entropy bonus).
    logit_grad: Vec<f64>,
    ratio: f64,
    clipped: bool,
    entropy: f64,
    policy_loss: f64,
}

/// The per-sample core of the update: clipped-surrogate and entropy
/// gradients pulled back to the combined logits.
fn policy_sample_grad(
    probs: &[f64],
    action: usize,
    old_log_prob: f64,
    advantage: f64,
    clip_ratio: f64,
    entropy_coef: f64,
) -> SampleGrad {
    let log_prob = probs[action].ln();
    let ratio = (log_prob - old_log_prob).exp();
    let unclipped = ratio * advantage;
    let clipped_obj = ratio.clamp(1.0 - clip_ratio, 1.0 + clip_ratio) * advantage;
    // when the clipped term is strictly the smaller one the ratio sits
    // outside the clip interval and contributes no gradient
    let surrogate_grad = if unclipped <= clipped_obj { ratio * advantage } else { 0.0 };

    let entropy: f64 = -probs
        .iter()
        .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
        .sum::<f64>();

    let logit_grad: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            let onehot = if j == action { 1.0 } else { 0.0 };
            let d_logp = onehot - p;
            let d_entropy = if p > 0.0 { -p * (p.ln() + entropy) } else { 0.0 };
            -(surrogate_grad * d_logp + entropy_coef * d_entropy)
        })
        .collect();

    SampleGrad {
        logit_grad,
        ratio,
        clipped: (ratio - 1.0).abs() > clip_ratio,
        entropy,
        policy_loss: -unclipped.min(clipped_obj),
    }
}

/// Per-observation logits of every frozen module; loop invariants of the
/// update epochs because frozen parameters cannot change.
fn frozen_logit_cache(model: &PrrModel, batch: &RolloutBatch) -> Vec<Vec<Vec<f64>>> {
    batch
        .transitions
        .iter()
        .map(|tr| {
            model
                .modules()
                .iter()
                .map(|m| {
                    if m.frozen {
                        m.net.forward(&tr.observation)
                    } else {
                        Vec::new()
                    }
                })
                .collect()
        })
        .collect()
}

struct MinibatchStats {
    ratio_sum: f64,
    clip_count: usize,
    entropy_sum: f64,
    policy_loss_sum: f64,
    value_loss_sum: f64,
    samples: usize,
}

/// Accumulates mean policy and value gradients for the given sample indices
/// into `grads` / `critic_tape`. This is the exact path `update` differentiates.
fn accumulate_minibatch(
    model: &PrrModel,
    critic: &Critic,
    batch: &RolloutBatch,
    indices: &[usize],
    cache: &[Vec<Vec<f64>>],
    config: &PpoConfig,
    grads: &mut ComposedGradients,
    critic_tape: &mut GradientTape,
) -> MinibatchStats {
    let m = indices.len() as f64;
    let mut stats = MinibatchStats {
        ratio_sum: 0.0,
        clip_count: 0,
        entropy_sum: 0.0,
        policy_loss_sum: 0.0,
        value_loss_sum: 0.0,
        samples: indices.len(),
    };
    for &t in indices {
        let tr = &batch.transitions[t];
        let trace = model.compose_trace_with(&tr.observation, Some(&cache[t]));
        let mut sample = policy_sample_grad(
            &trace.probs,
            tr.action,
            tr.log_prob,
            batch.advantages[t],
            config.clip_ratio,
            config.entropy_coef,
        );
        for g in &mut sample.logit_grad {
            *g /= m;
        }
        model.backprop_from_trace(&tr.observation, &trace, &sample.logit_grad, grads);

        let critic_trace = critic.net.trace(&tr.observation);
        let value = critic_trace.output()[0];
        let error = value - batch.returns[t];
        critic
            .net
            .backward_from_trace(&critic_trace, &[2.0 * config.value_coef * error / m], critic_tape);

        stats.ratio_sum += sample.ratio;
        stats.clip_count += usize::from(sample.clipped);
        stats.entropy_sum += sample.entropy;
        stats.policy_loss_sum += sample.policy_loss;
        stats.value_loss_sum += config.value_coef * error * error;
    }
    stats
}

/// The mean clipped-surrogate loss (policy part plus entropy bonus, value
/// term excluded) the update minimizes over a batch. Exposed for gradient
/// verification and diagnostics.
pub fn surrogate_loss(model: &PrrModel, batch: &RolloutBatch, config: &PpoConfig) -> f64 {
    assert_eq!(batch.advantages.len(), batch.len(), "advantages not computed");
    let mut total = 0.0;
    for (t, tr) in batch.transitions.iter().enumerate() {
        let probs = model.compose(&tr.observation);
        let sample = policy_sample_grad(
            &probs,
            tr.action,
            tr.log_prob,
            batch.advantages[t],
            config.clip_ratio,
            config.entropy_coef,
        );
        total += sample.policy_loss - config.entropy_coef * sample.entropy;
    }
    total / batch.len() as f64
}

/// The mean gradient of [`surrogate_loss`] with respect to the trainable
/// policy parameters, computed by the same accumulation path the update
/// uses.
pub fn surrogate_gradients(model: &PrrModel, batch: &RolloutBatch, config: &PpoConfig) -> ComposedGradients {
    assert_eq!(batch.advantages.len(), batch.len(), "advantages not computed");
    let cache = frozen_logit_cache(model, batch);
    let indices: Vec<usize> = (0..batch.len()).collect();
    let mut grads = ComposedGradients::zeros(model);
    // the critic is irrelevant to the policy surrogate; a zero critic keeps
    // the call shape uniform
    let critic = Critic::new(model.obs_dim(), &[], config.learning_rate, 0);
    let mut critic_tape = GradientTape::zeros(critic.net());
    accumulate_minibatch(
        model,
        &critic,
        batch,
        &indices,
        &cache,
        config,
        &mut grads,
        &mut critic_tape,
    );
    grads
}

/// Per-phase optimizer bundle: the critic plus Adam state for the unfrozen
/// module, the raw weights, and the critic.
pub struct PpoTrainer {
    pub config: PpoConfig,
    critic: Critic,
    module_adams: Vec<Option<AdamState>>,
    weights_adam: AdamState,
}

impl PpoTrainer {
    /// Builds optimizer state for the model's current trainable surface; the
    /// critic is fresh (one per training phase).
    pub fn for_phase(model: &PrrModel, config: PpoConfig, critic_seed: u64) -> PpoTrainer {
        let critic = Critic::new(
            model.obs_dim(),
            model.hidden_dims(),
            config.learning_rate,
            critic_seed,
        );
        let adam = AdamConfig::with_learning_rate(config.learning_rate);
        let module_adams = model
            .modules()
            .iter()
            .map(|m| (!m.frozen).then(|| AdamState::new(m.net.param_count(), adam)))
            .collect();
        let weights_adam = AdamState::new(model.weights().len(), adam);
        PpoTrainer {
            config,
            critic,
            module_adams,
            weights_adam,
        }
    }

    pub fn critic(&self) -> &Critic {
        &self.critic
    }

    /// One PPO update over a batch with computed advantages: `epochs` passes
    /// of shuffled minibatches, Adam steps on the unfrozen module, the raw
    /// weights (clamped to `[0, 1]` after every step), and the critic.
    ///
    /// A non-finite loss aborts with [`Error::NonFiniteLoss`] before the
    /// offending step is applied.
    pub fn update(
        &mut self,
        model: &mut PrrModel,
        batch: &mut RolloutBatch,
        rng: &mut ChaCha8Rng,
    ) -> Result<UpdateDiagnostics> {
        assert!(!batch.is_empty(), "cannot update from an empty batch");
        assert_eq!(batch.advantages.len(), batch.len(), "advantages not computed");
        assert_eq!(
            self.module_adams.len(),
            model.modules().len(),
            "trainer was built for a different model shape"
        );
        if self.config.normalize_advantages {
            normalize_advantages(batch);
        }
        let cache = frozen_logit_cache(model, batch);

        let mut grads = ComposedGradients::zeros(model);
        let mut critic_tape = GradientTape::zeros(self.critic.net());
        let mut indices: Vec<usize> = (0..batch.len()).collect();
        let mut totals = UpdateDiagnostics {
            mean_ratio: 0.0,
            clip_fraction: 0.0,
            policy_loss: 0.0,
            value_loss: 0.0,
            entropy: 0.0,
        };
        let mut sample_total = 0usize;

        for _ in 0..self.config.epochs {
            indices.shuffle(rng);
            for chunk in indices.chunks(self.config.minibatch_size.max(1)) {
                grads.zero();
                critic_tape.zero();
                let stats = accumulate_minibatch(
                    model,
                    &self.critic,
                    batch,
                    chunk,
                    &cache,
                    &self.config,
                    &mut grads,
                    &mut critic_tape,
                );
                let m = stats.samples as f64;
                if !(stats.policy_loss_sum / m).is_finite() || !(stats.value_loss_sum / m).is_finite()
                {
                    return Err(Error::NonFiniteLoss(format!(
                        "policy {} value {}",
                        stats.policy_loss_sum / m,
                        stats.value_loss_sum / m
                    )));
                }

                for (i, adam) in self.module_adams.iter_mut().enumerate() {
                    if let Some(adam) = adam {
                        let tape = grads.module_params[i].as_ref().expect("unfrozen tape");
                        adam.step(model.module_net_mut(i).params_mut(), &tape.params);
                    }
                }
                self.weights_adam
                    .step(model.weights_mut().raw_mut(), &grads.raw_weights);
                model.weights_mut().clamp_unit();
                self.critic
                    .adam
                    .step(self.critic.net.params_mut(), &critic_tape.params);

                totals.mean_ratio += stats.ratio_sum;
                totals.clip_fraction += stats.clip_count as f64;
                totals.policy_loss += stats.policy_loss_sum;
                totals.value_loss += stats.value_loss_sum;
                totals.entropy += stats.entropy_sum;
                sample_total += stats.samples;
            }
        }

        let n = sample_total as f64;
        Ok(UpdateDiagnostics {
            mean_ratio: totals.mean_ratio / n,
            clip_fraction: totals.clip_fraction / n,
            policy_loss: totals.policy_loss / n,
            value_loss: totals.value_loss / n,
            entropy: totals.entropy / n,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{FetchTheKeyConfig, FetchTheKeyEnv, RewardScale, StepResult};
    use crate::masks::TaskMask;
    use crate::rng::{derive_seed, rng_from};

    fn assert_close(a: f64, b: f64, abs_tol: f64, rel_tol: f64) {
        let diff = (a - b).abs();
        let scale = a.abs().max(b.abs());
        assert!(
            diff <= abs_tol || diff / scale <= rel_tol,
            "a={a} b={b} diff={diff}"
        );
    }

    /// A 2-armed bandit: constant observation, one step per episode, arm 0
    /// pays 1.
    struct BanditEnv;

    impl Environment for BanditEnv {
        fn obs_dim(&self) -> usize {
            1
        }
        fn num_actions(&self) -> usize {
            2
        }
        fn reset(&mut self) -> Vec<f64> {
            vec![0.5]
        }
        fn step(&mut self, action: usize) -> StepResult {
            let reward = if action == 0 { 1.0 } else { 0.0 };
            StepResult {
                observation: vec![0.5],
                raw_reward: reward,
                scaled_reward: reward,
                terminal: true,
            }
        }
        fn reward_scale(&self) -> RewardScale {
            RewardScale::identity()
        }
    }

    fn fresh_model(seed: u64, obs_dim: usize, action_dim: usize, hidden: Vec<usize>) -> PrrModel {
        let mut model = PrrModel::new(obs_dim, action_dim, hidden, vec!["t".into()]);
        model.append_module(TaskMask::all_ones(1), 0, 1, seed);
        model
    }

    #[test]
    fn rollouts_are_deterministic_for_fixed_seeds() {
        let model = fresh_model(1, 27, 4, vec![8]);
        let critic = Critic::new(27, &[8], 3e-4, 2);
        let config = FetchTheKeyConfig::new(1, 33).with_room_size(3).with_max_steps(60);
        let collect = || {
            let mut env = FetchTheKeyEnv::new(config);
            let mut rng = rng_from(9);
            collect_rollout(&model, &critic, &mut env, 3, 0, &mut rng)
        };
        let a = collect();
        let b = collect();
        assert_eq!(a.transitions, b.transitions);
        assert_eq!(a.episodes, b.episodes);
    }

    #[test]
    fn a_goal_reaching_episode_totals_raw_12_scaled_10() {
        // near-uniform fresh policy on the small single-key world; over
        // enough episodes some reach the goal, and their accounting is exact
        let model = fresh_model(3, 27, 4, vec![4]);
        let critic = Critic::new(27, &[4], 3e-4, 4);
        let mut env = FetchTheKeyEnv::new(FetchTheKeyConfig::new(1, 5).with_room_size(3));
        let mut rng = rng_from(6);
        let batch = collect_rollout(&model, &critic, &mut env, 120, 0, &mut rng);
        let full = batch
            .episodes
            .iter()
            .find(|e| e.raw_return == 12.0)
            .expect("no episode reached the goal; pick another seed");
        assert_eq!(full.scaled_return, 10.0);
        for episode in &batch.episodes {
            assert!((0.0..=10.0).contains(&episode.scaled_return));
        }
    }

    #[test]
    fn uniform_policy_action_frequencies_are_near_quarter() {
        // an all-zero module composes to the exactly uniform policy
        let mut model = PrrModel::new(27, 4, vec![4], vec!["t".into()]);
        model.append_module(TaskMask::all_ones(1), 0, 1, 7);
        for p in model.module_net_mut(0).params_mut() {
            *p = 0.0;
        }
        let critic = Critic::new(27, &[4], 3e-4, 8);
        let mut env = FetchTheKeyEnv::new(FetchTheKeyConfig::new(1, 11));
        let mut rng = rng_from(12);
        let batch = collect_rollout(&model, &critic, &mut env, 25, 0, &mut rng);
        assert!(batch.len() >= 10_000, "want 10k steps, got {}", batch.len());
        let mut counts = [0usize; 4];
        for tr in &batch.transitions {
            counts[tr.action] += 1;
        }
        for c in counts {
            let freq = c as f64 / batch.len() as f64;
            assert!((freq - 0.25).abs() < 0.02, "freq {freq}");
        }
    }

    fn batch_from(rewards: &[f64], values: &[f64], terminals: &[bool]) -> RolloutBatch {
        let transitions = rewards
            .iter()
            .zip(values.iter())
            .zip(terminals.iter())
            .map(|((&r, &v), &terminal)| Transition {
                observation: vec![0.0],
                action: 0,
                log_prob: -0.5,
                value: v,
                scaled_reward: r,
                terminal,
            })
            .collect();
        RolloutBatch {
            transitions,
            ..RolloutBatch::default()
        }
    }

    #[test]
    fn gae_hand_case_undiscounted() {
        let mut batch = batch_from(&[1.0, 1.0], &[0.0, 0.0], &[false, true]);
        compute_gae(&mut batch, 1.0, 1.0);
        assert_eq!(batch.advantages, vec![2.0, 1.0]);
        assert_eq!(batch.returns, vec![2.0, 1.0]);
    }

    #[test]
    fn gae_with_lambda_zero_is_the_td_residual() {
        let rewards = [0.3, -0.1, 0.8, 0.0];
        let values = [0.5, 0.2, -0.4, 0.1];
        let terminals = [false, false, false, true];
        let mut batch = batch_from(&rewards, &values, &terminals);
        compute_gae(&mut batch, 0.9, 0.0);
        for t in 0..4 {
            let next_value = if terminals[t] { 0.0 } else { values[t + 1] };
            let delta = rewards[t] + 0.9 * next_value - values[t];
            assert_close(batch.advantages[t], delta, 1e-15, 1e-12);
        }
    }

    /// Brute-force double-sum oracle: A_t = sum_l (gamma*lambda)^l delta_{t+l},
    /// truncated at the episode's terminal step.
    fn gae_double_sum(batch: &RolloutBatch, gamma: f64, lambda: f64) -> Vec<f64> {
        let n = batch.transitions.len();
        let mut out = vec![0.0; n];
        for t in 0..n {
            let mut acc = 0.0;
            let mut coef = 1.0;
            for l in t..n {
                let tr = &batch.transitions[l];
                let next_value = if tr.terminal || l + 1 >= n {
                    0.0
                } else {
                    batch.transitions[l + 1].value
                };
                let continuing = if tr.terminal { 0.0 } else { 1.0 };
                let delta = tr.scaled_reward + gamma * next_value * continuing - tr.value;
                acc += coef * delta;
                if tr.terminal {
                    break;
                }
                coef *= gamma * lambda;
            }
            out[t] = acc;
        }
        out
    }

    #[test]
    fn gae_matches_the_double_sum_oracle_on_random_batches() {
        let mut rng = rng_from(77);
        for case in 0..200 {
            let n = rng.gen_range(1..=50);
            let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut terminals: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.15)).collect();
            terminals[n - 1] = rng.gen_bool(0.7);
            let gamma = rng.gen_range(0.0..=1.0);
            let lambda = rng.gen_range(0.0..=1.0);
            let mut batch = batch_from(&rewards, &values, &terminals);
            compute_gae(&mut batch, gamma, lambda);
            let oracle = gae_double_sum(&batch, gamma, lambda);
            for t in 0..n {
                assert!(
                    (batch.advantages[t] - oracle[t]).abs() < 1e-10,
                    "case {case} t={t}: {} vs {}",
                    batch.advantages[t],
                    oracle[t]
                );
            }
        }
    }

    #[test]
    fn normalized_advantages_have_zero_mean_unit_std() {
        let mut rng = rng_from(5);
        let n = 64;
        let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut terminals = vec![false; n];
        terminals[n - 1] = true;
        let mut batch = batch_from(&rewards, &values, &terminals);
        compute_gae(&mut batch, 0.99, 0.95);
        normalize_advantages(&mut batch);
        let mean = batch.advantages.iter().sum::<f64>() / n as f64;
        let var = batch.advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 1e-9);
        assert!((var.sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn clipped_ratio_contributes_no_gradient() {
        // ratio 2 with clip 0.2 and positive advantage: objective pinned at
        // 1.2 * A, gradient through the ratio is zero
        let probs = vec![0.6, 0.4];
        let old_log_prob = (0.6f64 / 2.0).ln();
        let sample = policy_sample_grad(&probs, 0, old_log_prob, 1.5, 0.2, 0.0);
        assert_close(sample.ratio, 2.0, 1e-12, 1e-12);
        assert!(sample.clipped);
        assert_close(sample.policy_loss, -1.2 * 1.5, 1e-12, 1e-12);
        assert!(sample.logit_grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn at_ratio_one_the_surrogate_gradient_is_the_vanilla_policy_gradient() {
        let model = fresh_model(21, 3, 2, vec![5]);
        let mut rng = rng_from(23);
        let mut batch = RolloutBatch::default();
        for _ in 0..6 {
            let obs: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let probs = model.compose(&obs);
            let action = rng.gen_range(0..2);
            batch.transitions.push(Transition {
                observation: obs,
                action,
                log_prob: probs[action].ln(),
                value: 0.0,
                scaled_reward: rng.gen_range(-1.0..1.0),
                terminal: true,
            });
        }
        batch.advantages = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        batch.returns = vec![0.0; 6];
        let config = PpoConfig {
            entropy_coef: 0.0,
            ..PpoConfig::default()
        };
        let grads = surrogate_gradients(&model, &batch, &config);

        // vanilla policy gradient of -mean(A * log pi)
        let mut vanilla = ComposedGradients::zeros(&model);
        for (t, tr) in batch.transitions.iter().enumerate() {
            let trace = model.compose_trace(&tr.observation);
            let logit_grad: Vec<f64> = trace
                .probs
                .iter()
                .enumerate()
                .map(|(j, &p)| {
                    let onehot = if j == tr.action { 1.0 } else { 0.0 };
                    -batch.advantages[t] * (onehot - p) / 6.0
                })
                .collect();
            model.backprop_from_trace(&tr.observation, &trace, &logit_grad, &mut vanilla);
        }
        let tape = grads.module_params[0].as_ref().unwrap();
        let vanilla_tape = vanilla.module_params[0].as_ref().unwrap();
        for (a, b) in tape.params.iter().zip(vanilla_tape.params.iter()) {
            assert_close(*a, *b, 1e-12, 1e-9);
        }
    }

    #[test]
    fn surrogate_gradients_match_finite_differences() {
        let mut model = fresh_model(31, 4, 3, vec![6]);
        model.append_module(TaskMask::all_ones(1), 1, 1, 32);
        model.weights_mut().set_raw(vec![0.6, 0.3]);
        let mut rng = rng_from(33);
        let mut batch = RolloutBatch::default();
        for _ in 0..8 {
            let obs: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let probs = model.compose(&obs);
            let action = rng.gen_range(0..3);
            // offset old log-probs so ratios land away from the clip kinks
            let offset = rng.gen_range(-0.1..0.1);
            batch.transitions.push(Transition {
                observation: obs,
                action,
                log_prob: probs[action].ln() + offset,
                value: 0.0,
                scaled_reward: 0.0,
                terminal: true,
            });
        }
        batch.advantages = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        batch.returns = vec![0.0; 8];
        let config = PpoConfig::default();
        let grads = surrogate_gradients(&model, &batch, &config);

        let h = 1e-5;
        let mut probe = model.clone();
        for k in 0..probe.weights().len() {
            let orig = probe.weights().raw()[k];
            probe.weights_mut().raw_mut()[k] = orig + h;
            let up = surrogate_loss(&probe, &batch, &config);
            probe.weights_mut().raw_mut()[k] = orig - h;
            let down = surrogate_loss(&probe, &batch, &config);
            probe.weights_mut().raw_mut()[k] = orig;
            assert_close(grads.raw_weights[k], (up - down) / (2.0 * h), 1e-7, 1e-4);
        }
        let tape = grads.module_params[1].as_ref().unwrap();
        for p in 0..probe.modules()[1].net.param_count() {
            let orig = probe.modules()[1].net.params()[p];
            probe.module_net_mut(1).params_mut()[p] = orig + h;
            let up = surrogate_loss(&probe, &batch, &config);
            probe.module_net_mut(1).params_mut()[p] = orig - h;
            let down = surrogate_loss(&probe, &batch, &config);
            probe.module_net_mut(1).params_mut()[p] = orig;
            assert_close(tape.params[p], (up - down) / (2.0 * h), 1e-7, 1e-4);
        }
    }

    #[test]
    fn one_bandit_update_raises_the_advantaged_arm() {
        let mut model = fresh_model(41, 1, 2, vec![4]);
        let critic_seed = derive_seed(41, 1);
        let mut trainer = PpoTrainer::for_phase(&model, PpoConfig::default(), critic_seed);
        let mut env = BanditEnv;
        let mut rng = rng_from(42);
        let mut batch = collect_rollout(&model, trainer.critic(), &mut env, 8, 0, &mut rng);
        // force a positive advantage whenever arm 0 was pulled
        compute_gae(&mut batch, trainer.config.gamma, trainer.config.gae_lambda);
        for (t, tr) in batch.transitions.iter().enumerate() {
            batch.advantages[t] = if tr.action == 0 { 1.0 } else { -1.0 };
        }
        let p_before = model.compose(&[0.5])[0];
        let config_no_norm = PpoConfig {
            normalize_advantages: false,
            ..trainer.config.clone()
        };
        trainer.config = config_no_norm;
        trainer.update(&mut model, &mut batch, &mut rng).unwrap();
        let p_after = model.compose(&[0.5])[0];
        assert!(p_after > p_before, "{p_after} <= {p_before}");
    }

    #[test]
    fn update_never_touches_frozen_parameters() {
        let mut model = fresh_model(51, 4, 3, vec![6]);
        model.append_module(TaskMask::all_ones(1), 1, 1, 52);
        model.weights_mut().set_raw(vec![0.7, 0.2]);
        let frozen_before = model.module_param_bytes(0);
        let unfrozen_before = model.module_param_bytes(1);

        let mut trainer = PpoTrainer::for_phase(&model, PpoConfig::default(), 53);
        let mut rng = rng_from(54);
        let mut batch = RolloutBatch::default();
        for _ in 0..32 {
            let obs: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let probs = model.compose(&obs);
            let action = rng.gen_range(0..3);
            batch.transitions.push(Transition {
                observation: obs,
                action,
                log_prob: probs[action].ln(),
                value: 0.0,
                scaled_reward: rng.gen_range(-1.0..1.0),
                terminal: rng.gen_bool(0.2),
            });
        }
        compute_gae(&mut batch, 0.99, 0.95);
        trainer.update(&mut model, &mut batch, &mut rng).unwrap();
        assert_eq!(model.module_param_bytes(0), frozen_before);
        assert_ne!(model.module_param_bytes(1), unfrozen_before);
    }

    #[test]
    fn nan_advantage_aborts_the_update() {
        let mut model = fresh_model(61, 2, 2, vec![4]);
        let mut trainer = PpoTrainer::for_phase(&model, PpoConfig::default(), 62);
        let mut rng = rng_from(63);
        let mut batch = RolloutBatch::default();
        let probs = model.compose(&[0.1, 0.2]);
        batch.transitions.push(Transition {
            observation: vec![0.1, 0.2],
            action: 0,
            log_prob: probs[0].ln(),
            value: 0.0,
            scaled_reward: 0.0,
            terminal: true,
        });
        batch.advantages = vec![f64::NAN];
        batch.returns = vec![0.0];
        let err = trainer.update(&mut model, &mut batch, &mut rng).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss(_)));
    }
}
