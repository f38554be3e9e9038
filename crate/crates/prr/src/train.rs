//! Training orchestration: one masked phase per module, run top-down.
//!
//! A phase appends a fresh module (weight 0, everything older frozen), then
//! loops: sample a task uniformly from the mask's subset, collect one
//! episode with the composed policy, and run a PPO update every
//! `episodes_per_update` episodes (the final partial batch still updates).
//! Multi-phase acquisition walks a mask schedule; reuse appends a one-hot
//! module for a new task; weights-only transfer retrains just the weight
//! vector; the single-module baseline keeps fine-tuning its only network
//! instead of appending.

use rand_chacha::ChaCha8Rng;

use crate::env::{Task, TaskSet};
use crate::error::Result;
use crate::masks::{new_task_mask, MaskSchedule, TaskMask};
use crate::model::PrrModel;
use crate::ppo::{collect_rollout, compute_gae, PpoConfig, PpoTrainer, RolloutBatch};
use crate::rng::{derive_seed, rng_from};

/// One training phase: the mask, its episode budget, and where the module
/// sits in the hierarchy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseSpec {
    pub label: String,
    pub level: u32,
    pub index: u32,
    pub mask: TaskMask,
    pub budget: u32,
}

/// One episode's log line; `weights` is the normalized simplex snapshot at
/// collection time.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub episode: u32,
    pub task_id: usize,
    pub raw_return: f64,
    pub scaled_return: f64,
    pub weights: Vec<f64>,
}

/// Everything logged during one phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseLog {
    pub label: String,
    /// Module labels in training order, naming the entries of each weight
    /// snapshot.
    pub weight_labels: Vec<String>,
    pub records: Vec<EpisodeRecord>,
}

impl PhaseLog {
    /// Per-episode scaled returns, in episode order.
    pub fn scaled_returns(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.scaled_return).collect()
    }
}

/// The sample-collect-update loop over whatever is currently trainable in
/// the model.
fn run_phase(
    model: &mut PrrModel,
    tasks: &mut TaskSet,
    eligible: &[usize],
    label: &str,
    budget: u32,
    ppo: &PpoConfig,
    rng: &mut ChaCha8Rng,
    critic_seed: u64,
) -> Result<PhaseLog> {
    assert!(!eligible.is_empty(), "phase has no eligible tasks");
    assert!(budget > 0, "phase budget must be positive");
    use rand::Rng;

    let mut trainer = PpoTrainer::for_phase(model, ppo.clone(), critic_seed);
    let mut log = PhaseLog {
        label: label.to_string(),
        weight_labels: model.module_labels(),
        records: Vec::with_capacity(budget as usize),
    };
    let mut pending = RolloutBatch::default();
    for episode in 0..budget {
        let task_id = eligible[rng.gen_range(0..eligible.len())];
        let weights = model.normalized_weights();
        let batch = collect_rollout(
            model,
            trainer.critic(),
            tasks.task_mut(task_id).env.as_mut(),
            1,
            task_id,
            rng,
        );
        let summary = &batch.episodes[0];
        log.records.push(EpisodeRecord {
            episode,
            task_id,
            raw_return: summary.raw_return,
            scaled_return: summary.scaled_return,
            weights,
        });
        pending.append(batch);
        let flush = pending.episodes.len() as u32 >= ppo.episodes_per_update || episode + 1 == budget;
        if flush {
            compute_gae(&mut pending, ppo.gamma, ppo.gae_lambda);
            trainer.update(model, &mut pending, rng)?;
            pending = RolloutBatch::default();
        }
    }
    Ok(log)
}

/// Trains one residual module: append it under `phase.mask`, run the phase's
/// episode budget, freeze it again on return.
pub fn train_module(
    model: &mut PrrModel,
    tasks: &mut TaskSet,
    phase: &PhaseSpec,
    ppo: &PpoConfig,
    seed: u64,
) -> Result<PhaseLog> {
    assert_eq!(
        phase.mask.len(),
        tasks.len(),
        "mask covers {} tasks but the task set has {}",
        phase.mask.len(),
        tasks.len()
    );
    let module_seed = derive_seed(seed, 1);
    model.append_module(phase.mask.clone(), phase.level, phase.index, module_seed);
    let mut rng = rng_from(derive_seed(seed, 2));
    let log = run_phase(
        model,
        tasks,
        &phase.mask.selected(),
        &phase.label,
        phase.budget,
        ppo,
        &mut rng,
        derive_seed(seed, 3),
    )?;
    model.freeze_all();
    Ok(log)
}

/// Multi-phase experience acquisition: starting from an empty model, train
/// one module per schedule entry, top-down.
pub fn acquire(
    tasks: &mut TaskSet,
    schedule: &MaskSchedule,
    budgets: &[u32],
    hidden_dims: &[usize],
    ppo: &PpoConfig,
    seed: u64,
) -> Result<(PrrModel, Vec<PhaseLog>)> {
    assert!(!schedule.is_empty(), "schedule must not be empty");
    assert_eq!(
        budgets.len(),
        schedule.len(),
        "got {} budgets for {} schedule entries",
        budgets.len(),
        schedule.len()
    );
    let mut model = PrrModel::new(
        tasks.obs_dim(),
        tasks.num_actions(),
        hidden_dims.to_vec(),
        tasks.names(),
    );
    let mut logs = Vec::with_capacity(schedule.len());
    for (i, entry) in schedule.entries().iter().enumerate() {
        let phase = PhaseSpec {
            label: entry.label(),
            level: entry.level,
            index: entry.index,
            mask: entry.mask.clone(),
            budget: budgets[i],
        };
        logs.push(train_module(
            &mut model,
            tasks,
            &phase,
            ppo,
            derive_seed(seed, 100 + i as u64),
        )?);
    }
    Ok((model, logs))
}

/// Adapts a trained model to a new task by appending a module masked to that
/// task alone; the new module and the full weight vector train, everything
/// else stays frozen.
pub fn reuse(
    model: &mut PrrModel,
    tasks: &mut TaskSet,
    new_task: Task,
    budget: u32,
    ppo: &PpoConfig,
    seed: u64,
) -> Result<PhaseLog> {
    assert_eq!(
        new_task.env.obs_dim(),
        model.obs_dim(),
        "new task observation dim does not match the model"
    );
    assert_eq!(
        new_task.env.num_actions(),
        model.action_dim(),
        "new task action count does not match the model"
    );
    model.push_task(new_task.name.clone());
    tasks.push(new_task);
    let mask = new_task_mask(tasks.len());
    let level = model.modules().iter().map(|m| m.level).max().unwrap_or(0).max(1);
    let index = model.modules().iter().filter(|m| m.level == level).count() as u32 + 1;
    let phase = PhaseSpec {
        label: format!("L{level}{index}"),
        level,
        index,
        mask,
        budget,
    };
    train_module(model, tasks, &phase, ppo, derive_seed(seed, 200))
}

/// Weights-only transfer: no new module; every module parameter freezes and
/// only the weight vector (plus the phase critic) trains on the new task.
pub fn weights_only_transfer(
    model: &mut PrrModel,
    tasks: &mut TaskSet,
    new_task: Task,
    budget: u32,
    ppo: &PpoConfig,
    seed: u64,
) -> Result<PhaseLog> {
    assert!(!model.modules().is_empty(), "model has no modules to recombine");
    assert_eq!(
        new_task.env.obs_dim(),
        model.obs_dim(),
        "new task observation dim does not match the model"
    );
    model.push_task(new_task.name.clone());
    tasks.push(new_task);
    model.freeze_all();
    let mut rng = rng_from(derive_seed(seed, 300));
    run_phase(
        model,
        tasks,
        &[tasks.len() - 1],
        "weights-only",
        budget,
        ppo,
        &mut rng,
        derive_seed(seed, 301),
    )
}

/// The single-module baseline: train one network on all old tasks, then keep
/// fine-tuning that same network (no append) on the new task.
pub fn l0_only_baseline(
    tasks: &mut TaskSet,
    new_task: Task,
    l0_budget: u32,
    transfer_budget: u32,
    hidden_dims: &[usize],
    ppo: &PpoConfig,
    seed: u64,
) -> Result<(PrrModel, Vec<PhaseLog>)> {
    let mut model = PrrModel::new(
        tasks.obs_dim(),
        tasks.num_actions(),
        hidden_dims.to_vec(),
        tasks.names(),
    );
    let l0_phase = PhaseSpec {
        label: "L0".to_string(),
        level: 0,
        index: 1,
        mask: TaskMask::all_ones(tasks.len()),
        budget: l0_budget,
    };
    let first = train_module(&mut model, tasks, &l0_phase, ppo, derive_seed(seed, 400))?;

    model.push_task(new_task.name.clone());
    tasks.push(new_task);
    model.set_frozen(0, false);
    let mut rng = rng_from(derive_seed(seed, 401));
    let second = run_phase(
        &mut model,
        tasks,
        &[tasks.len() - 1],
        "L0-transfer",
        transfer_budget,
        ppo,
        &mut rng,
        derive_seed(seed, 402),
    )?;
    model.freeze_all();
    Ok((model, vec![first, second]))
}
