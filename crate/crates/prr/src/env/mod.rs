//! Environments: a uniform discrete-action interface, reward scaling, task
//! sets, and the FetchTheKey grid-world family.

mod fetch_the_key;
mod scripted;

pub use fetch_the_key::{
    build_layout, scale_factor, Action, Cell, FetchTheKeyConfig, FetchTheKeyEnv, GridState,
};
pub use scripted::scripted_optimal_actions;

/// The outcome of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub raw_reward: f64,
    pub scaled_reward: f64,
    pub terminal: bool,
}

/// Multiplicative reward scaling expressed as a ratio, so that scaling an
/// integer-valued raw total lands exactly on the target.
///
/// `apply` multiplies before dividing: a perfect FetchTheKey episode has raw
/// total `2k + 10`, and `(2k + 10) * 10 / (2k + 10)` is exact in `f64`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardScale {
    pub target: f64,
    pub total: f64,
}

impl RewardScale {
    pub fn identity() -> RewardScale {
        RewardScale {
            target: 1.0,
            total: 1.0,
        }
    }

    /// Scale a task whose maximum achievable raw return is `total` onto
    /// `target`.
    pub fn new(target: f64, total: f64) -> RewardScale {
        assert!(total > 0.0 && target > 0.0, "scales must be positive");
        RewardScale { target, total }
    }

    pub fn factor(&self) -> f64 {
        self.target / self.total
    }

    pub fn apply(&self, raw: f64) -> f64 {
        raw * self.target / self.total
    }
}

/// A seeded, resettable episodic environment with a discrete action set.
///
/// Implementations own their RNG; a given instance replays the same layout
/// and transition sequence for the same seed and action sequence.
pub trait Environment: Send {
    fn obs_dim(&self) -> usize;
    fn num_actions(&self) -> usize;

    /// Starts a new episode and returns the initial observation.
    fn reset(&mut self) -> Vec<f64>;

    /// Advances one step. Panics if the episode is already terminal.
    fn step(&mut self, action: usize) -> StepResult;

    /// The task's reward scaling; identity unless overridden.
    fn reward_scale(&self) -> RewardScale {
        RewardScale::identity()
    }
}

/// One named task: an environment plus its identity in the task list.
pub struct Task {
    pub name: String,
    pub env: Box<dyn Environment>,
}

impl Task {
    pub fn new(name: impl Into<String>, env: Box<dyn Environment>) -> Task {
        Task {
            name: name.into(),
            env,
        }
    }
}

/// An ordered list of tasks sharing observation and action dimensions.
#[derive(Default)]
pub struct TaskSet {
    tasks: Vec<Task>,
}

impl TaskSet {
    pub fn new() -> TaskSet {
        TaskSet { tasks: Vec::new() }
    }

    pub fn push(&mut self, task: Task) {
        if let Some(first) = self.tasks.first() {
            assert_eq!(
                first.env.obs_dim(),
                task.env.obs_dim(),
                "task '{}' observation dim differs from the task set",
                task.name
            );
            assert_eq!(
                first.env.num_actions(),
                task.env.num_actions(),
                "task '{}' action count differs from the task set",
                task.name
            );
        }
        self.tasks.push(task);
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.tasks.first().expect("task set is empty").env.obs_dim()
    }

    pub fn num_actions(&self) -> usize {
        self.tasks
            .first()
            .expect("task set is empty")
            .env
            .num_actions()
    }

    pub fn task(&self, index: usize) -> &Task {
        &self.tasks[index]
    }

    pub fn task_mut(&mut self, index: usize) -> &mut Task {
        &mut self.tasks[index]
    }

    pub fn names(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.name.clone()).collect()
    }
}
