//! The FetchTheKey grid world: a horizontal chain of rooms joined by locked
//! doors. The agent must collect keys in order (key `i` opens the door to
//! the room holding key `i + 1`) and reach the fixed goal in the last room.
//! Picking a key pays +2 raw reward, reaching the goal +10, nothing else
//! pays anything.
//!
//! Layout: `num_keys + 2` rooms in a row (start room, one room per key, goal
//! room), each `room_size x room_size` inside one-cell walls, with a single
//! 1x1 door centered on each shared wall. The door out of the start room
//! needs no key; the door into key-`i+1`'s room needs `i` keys; the goal
//! room needs all of them. The agent spawns uniformly in the start room and
//! each key uniformly in its own room; the goal sits at the center of the
//! goal room. Spawn positions re-randomize on every reset from the
//! environment's own seeded RNG stream.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Environment, RewardScale, StepResult};
use crate::rng::rng_from;

pub const KEY_REWARD: f64 = 2.0;
pub const GOAL_REWARD: f64 = 10.0;
pub const OBS_DIM: usize = 27;
const NEIGHBORHOOD_RADIUS: i64 = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FetchTheKeyConfig {
    pub num_keys: u32,
    pub room_size: usize,
    pub max_steps: u32,
    pub seed: u64,
}

impl FetchTheKeyConfig {
    pub fn new(num_keys: u32, seed: u64) -> FetchTheKeyConfig {
        FetchTheKeyConfig {
            num_keys,
            room_size: 5,
            max_steps: 500,
            seed,
        }
    }

    pub fn with_room_size(mut self, room_size: usize) -> Self {
        self.room_size = room_size;
        self
    }

    pub fn with_max_steps(mut self, max_steps: u32) -> Self {
        self.max_steps = max_steps;
        self
    }

    fn validate(&self) {
        assert!(self.num_keys >= 1, "need at least one key");
        assert!(self.room_size >= 3, "room must fit the agent plus walls");
        assert!(self.max_steps >= 1, "horizon must be positive");
    }

    fn room_count(&self) -> usize {
        self.num_keys as usize + 2
    }

    pub fn grid_width(&self) -> usize {
        self.room_count() * self.room_size + self.room_count() + 1
    }

    pub fn grid_height(&self) -> usize {
        self.room_size + 2
    }
}

/// `10 / (2 * num_keys + 10)`: the factor that maps the task's maximum raw
/// return onto 10.
pub fn scale_factor(config: &FetchTheKeyConfig) -> f64 {
    RewardScale::new(GOAL_REWARD, f64::from(2 * config.num_keys + GOAL_REWARD as u32)).factor()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Free,
    Wall,
    /// Passable once `keys_collected >= required`.
    Door { required: u32 },
    /// Key number `index` (1-based); collected in order.
    Key { index: u32 },
    Goal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn from_index(index: usize) -> Action {
        Action::ALL[index]
    }

    pub fn index(self) -> usize {
        match self {
            Action::Up => 0,
            Action::Down => 1,
            Action::Left => 2,
            Action::Right => 3,
        }
    }

    pub fn delta(self) -> (i64, i64) {
        match self {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
        }
    }
}

/// A live episode: static layout plus agent position, collected keys, and
/// the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct GridState {
    config: FetchTheKeyConfig,
    width: usize,
    height: usize,
    cells: Vec<Cell>,
    agent: (usize, usize),
    keys_collected: u32,
    steps: u32,
    done: bool,
}

/// Builds the first episode's layout for a config; a pure function of the
/// seed.
pub fn build_layout(config: &FetchTheKeyConfig) -> GridState {
    let mut rng = rng_from(config.seed);
    GridState::sample(config, &mut rng)
}

impl GridState {
    fn sample(config: &FetchTheKeyConfig, rng: &mut ChaCha8Rng) -> GridState {
        config.validate();
        let (width, height) = (config.grid_width(), config.grid_height());
        let mut cells = vec![Cell::Wall; width * height];
        let rs = config.room_size;
        let rooms = config.room_count();

        for room in 0..rooms {
            let col0 = room * (rs + 1) + 1;
            for row in 1..=rs {
                for col in col0..col0 + rs {
                    cells[row * width + col] = Cell::Free;
                }
            }
        }
        // one door centered on each shared wall; door r leads into room r+1
        let door_row = 1 + (rs - 1) / 2;
        for door in 0..rooms - 1 {
            let col = (door + 1) * (rs + 1);
            cells[door_row * width + col] = Cell::Door {
                required: door as u32,
            };
        }

        // sampling order is part of the determinism contract:
        // agent first, then keys 1..=num_keys
        let cell_in_room = |room: usize, rng: &mut ChaCha8Rng| -> (usize, usize) {
            let row = rng.gen_range(1..=rs);
            let col = room * (rs + 1) + 1 + rng.gen_range(0..rs);
            (row, col)
        };
        let agent = cell_in_room(0, rng);
        for key in 1..=config.num_keys {
            let (row, col) = cell_in_room(key as usize, rng);
            cells[row * width + col] = Cell::Key { index: key };
        }
        let goal_room = rooms - 1;
        let goal = (door_row, goal_room * (rs + 1) + 1 + (rs - 1) / 2);
        cells[goal.0 * width + goal.1] = Cell::Goal;

        GridState {
            config: *config,
            width,
            height,
            cells,
            agent,
            keys_collected: 0,
            steps: 0,
            done: false,
        }
    }

    pub fn config(&self) -> &FetchTheKeyConfig {
        &self.config
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cell(&self, row: usize, col: usize) -> Cell {
        self.cells[row * self.width + col]
    }

    pub fn agent_position(&self) -> (usize, usize) {
        self.agent
    }

    pub fn keys_collected(&self) -> u32 {
        self.keys_collected
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    pub fn is_terminal(&self) -> bool {
        self.done
    }

    /// Whether the agent with `keys` collected may stand on `cell`.
    pub fn passable(cell: Cell, keys: u32) -> bool {
        match cell {
            Cell::Free | Cell::Key { .. } | Cell::Goal => true,
            Cell::Wall => false,
            Cell::Door { required } => keys >= required,
        }
    }

    /// Advances one step. Panics if the episode already terminated.
    pub fn step(&mut self, action: Action) -> StepResult {
        assert!(!self.done, "step called on a terminal episode");
        let (dr, dc) = action.delta();
        let target = (
            (self.agent.0 as i64 + dr) as usize,
            (self.agent.1 as i64 + dc) as usize,
        );
        // outer border is all wall, so target stays in bounds
        let mut raw_reward = 0.0;
        match self.cell(target.0, target.1) {
            Cell::Wall => {}
            Cell::Door { required } => {
                if self.keys_collected >= required {
                    self.agent = target;
                }
            }
            Cell::Free => self.agent = target,
            Cell::Key { index } => {
                self.agent = target;
                if self.keys_collected == index - 1 {
                    self.cells[target.0 * self.width + target.1] = Cell::Free;
                    self.keys_collected += 1;
                    raw_reward = KEY_REWARD;
                }
            }
            Cell::Goal => {
                self.agent = target;
                raw_reward = GOAL_REWARD;
                self.done = true;
            }
        }
        self.steps += 1;
        if self.steps >= self.config.max_steps {
            self.done = true;
        }
        let scale = RewardScale::new(
            GOAL_REWARD,
            f64::from(2 * self.config.num_keys + GOAL_REWARD as u32),
        );
        StepResult {
            observation: self.observation(),
            raw_reward,
            scaled_reward: scale.apply(raw_reward),
            terminal: self.done,
        }
    }

    /// The 27-dimensional observation: normalized agent position (2), the
    /// fraction of keys collected (1), and the radius-2 neighborhood minus
    /// the center cell (24 scalar codes). Out-of-bounds cells read as wall.
    ///
    /// Cell codes: free 0.0, key 0.25, door 0.5 when currently passable and
    /// 0.75 when locked, goal 0.9, wall 1.0.
    pub fn observation(&self) -> Vec<f64> {
        let mut obs = Vec::with_capacity(OBS_DIM);
        obs.push(self.agent.0 as f64 / (self.height - 1) as f64);
        obs.push(self.agent.1 as f64 / (self.width - 1) as f64);
        obs.push(f64::from(self.keys_collected) / f64::from(self.config.num_keys));
        for dr in -NEIGHBORHOOD_RADIUS..=NEIGHBORHOOD_RADIUS {
            for dc in -NEIGHBORHOOD_RADIUS..=NEIGHBORHOOD_RADIUS {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let row = self.agent.0 as i64 + dr;
                let col = self.agent.1 as i64 + dc;
                let code = if row < 0 || col < 0 || row >= self.height as i64 || col >= self.width as i64
                {
                    1.0
                } else {
                    match self.cell(row as usize, col as usize) {
                        Cell::Free => 0.0,
                        Cell::Key { .. } => 0.25,
                        Cell::Door { required } => {
                            if self.keys_collected >= required {
                                0.5
                            } else {
                                0.75
                            }
                        }
                        Cell::Goal => 0.9,
                        Cell::Wall => 1.0,
                    }
                };
                obs.push(code);
            }
        }
        debug_assert_eq!(obs.len(), OBS_DIM);
        obs
    }

    /// One character per cell: `#` wall, `.` free, `d`/`D` open/locked door,
    /// `k` key, `G` goal, `A` agent.
    pub fn render(&self) -> String {
        let mut out = String::with_capacity((self.width + 1) * self.height);
        for row in 0..self.height {
            for col in 0..self.width {
                let ch = if (row, col) == self.agent {
                    'A'
                } else {
                    match self.cell(row, col) {
                        Cell::Free => '.',
                        Cell::Wall => '#',
                        Cell::Door { required } => {
                            if self.keys_collected >= required {
                                'd'
                            } else {
                                'D'
                            }
                        }
                        Cell::Key { .. } => 'k',
                        Cell::Goal => 'G',
                    }
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }
}

/// The resettable environment wrapper around [`GridState`]; each reset draws
/// a fresh layout from the environment's own RNG stream.
pub struct FetchTheKeyEnv {
    config: FetchTheKeyConfig,
    rng: ChaCha8Rng,
    state: GridState,
}

impl FetchTheKeyEnv {
    pub fn new(config: FetchTheKeyConfig) -> FetchTheKeyEnv {
        config.validate();
        let mut rng = rng_from(config.seed);
        let state = GridState::sample(&config, &mut rng);
        FetchTheKeyEnv { config, rng, state }
    }

    pub fn state(&self) -> &GridState {
        &self.state
    }

    pub fn config(&self) -> &FetchTheKeyConfig {
        &self.config
    }
}

impl Environment for FetchTheKeyEnv {
    fn obs_dim(&self) -> usize {
        OBS_DIM
    }

    fn num_actions(&self) -> usize {
        Action::ALL.len()
    }

    fn reset(&mut self) -> Vec<f64> {
        self.state = GridState::sample(&self.config, &mut self.rng);
        self.state.observation()
    }

    fn step(&mut self, action: usize) -> StepResult {
        self.state.step(Action::from_index(action))
    }

    fn reward_scale(&self) -> RewardScale {
        RewardScale::new(
            GOAL_REWARD,
            f64::from(2 * self.config.num_keys + GOAL_REWARD as u32),
        )
    }
}
