//! Deterministic gridworlds over a fixed union action catalog.
//!
//! Two families share the same grid and reward design:
//!
//! * `oriented`: the agent has a heading; turns rotate it and the translation
//!   actions move relative to it (forward, strafes, forward diagonals).
//! * `omni`: absolute moves in the eight compass directions plus `stay`.
//!
//! A task exposes only a subset of its family's catalog. Every action has the
//! same effect in every task where it is available, so tasks in a sequence
//! differ only in which actions the agent may use.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Oriented,
    Omni,
}

impl Family {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "oriented" => Ok(Family::Oriented),
            "omni" => Ok(Family::Omni),
            other => Err(Error::Config(format!("unknown action family `{other}`"))),
        }
    }

    pub fn catalog(self) -> ActionCatalog {
        ActionCatalog { family: self }
    }

    /// Nested active-set sizes used by the built-in sequences (small, medium, full).
    pub fn sizes(self) -> [usize; 3] {
        match self {
            Family::Oriented => [3, 5, 7],
            Family::Omni => [3, 5, 9],
        }
    }
}

const ORIENTED_ACTIONS: [&str; 7] = [
    "turn_left",
    "turn_right",
    "forward",
    "move_left",
    "move_right",
    "forward_left",
    "forward_right",
];

const OMNI_ACTIONS: [&str; 9] = [
    "stay",
    "up",
    "down",
    "left",
    "right",
    "up_left",
    "up_right",
    "down_left",
    "down_right",
];

/// Global ordered action list of a family; the index is the action identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionCatalog {
    pub family: Family,
}

impl ActionCatalog {
    pub fn names(&self) -> &'static [&'static str] {
        match self.family {
            Family::Oriented => &ORIENTED_ACTIONS,
            Family::Omni => &OMNI_ACTIONS,
        }
    }

    pub fn len(&self) -> usize {
        self.names().len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names().iter().position(|n| *n == name)
    }
}

/// Active subset of a catalog.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpace {
    pub catalog: ActionCatalog,
    pub mask: Vec<bool>,
}

impl ActionSpace {
    pub fn new(catalog: ActionCatalog, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != catalog.len() {
            return Err(Error::Config(format!(
                "action mask has {} entries but the catalog has {}",
                mask.len(),
                catalog.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Config("action space must contain at least one action".into()));
        }
        Ok(Self { catalog, mask })
    }

    /// The first `k` catalog actions.
    pub fn prefix(catalog: ActionCatalog, k: usize) -> Result<Self> {
        Self::new(catalog, (0..catalog.len()).map(|i| i < k).collect())
    }

    pub fn from_names(catalog: ActionCatalog, names: &[String]) -> Result<Self> {
        let mut mask = vec![false; catalog.len()];
        for n in names {
            let i = catalog
                .index_of(n)
                .ok_or_else(|| Error::Config(format!("unknown action `{n}` for {:?} family", catalog.family)))?;
            mask[i] = true;
        }
        Self::new(catalog, mask)
    }

    pub fn size(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn contains(&self, action: usize) -> bool {
        self.mask.get(action).copied().unwrap_or(false)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i)
    }

    pub fn is_strict_subset_of(&self, other: &ActionSpace) -> bool {
        self.mask.iter().zip(&other.mask).all(|(&a, &b)| !a || b) && self.size() < other.size()
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.indices().map(|i| self.catalog.names()[i]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalRule {
    /// Start at (0, 0) facing east, goal at the opposite corner.
    OppositeCorner,
    /// Seeded start cell (and heading); goal drawn uniformly from the cells the
    /// active actions can reach, excluding the start.
    RandomReachable,
}

impl GoalRule {
    pub fn default_for(family: Family) -> Self {
        match family {
            Family::Oriented => GoalRule::OppositeCorner,
            Family::Omni => GoalRule::RandomReachable,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridConfig {
    pub width: usize,
    pub height: usize,
    /// Episode horizon H.
    pub max_steps: u32,
    pub goal_rule: GoalRule,
}

impl GridConfig {
    /// Empty-room grid with the customary `4·W·H` horizon.
    pub fn new(width: usize, height: usize, family: Family) -> Self {
        Self {
            width,
            height,
            max_steps: (4 * width * height) as u32,
            goal_rule: GoalRule::default_for(family),
        }
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// 1-based position in the sequence.
    pub index: usize,
    pub family: Family,
    pub grid: GridConfig,
    pub space: ActionSpace,
    pub train_steps: u64,
}

impl TaskSpec {
    pub fn obs_len(&self) -> usize {
        obs_len(self.family, &self.grid)
    }

    pub fn catalog(&self) -> ActionCatalog {
        self.space.catalog
    }
}

pub fn obs_len(family: Family, grid: &GridConfig) -> usize {
    2 * grid.cells() + if family == Family::Oriented { 4 } else { 0 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Situation {
    Expansion,
    Contraction,
    ExpansionContraction,
    ContractionExpansion,
    Custom,
}

impl Situation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "expansion" => Ok(Situation::Expansion),
            "contraction" => Ok(Situation::Contraction),
            "expansion_contraction" => Ok(Situation::ExpansionContraction),
            "contraction_expansion" => Ok(Situation::ContractionExpansion),
            "custom" => Ok(Situation::Custom),
            other => Err(Error::Config(format!("unknown situation `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Situation::Expansion => "expansion",
            Situation::Contraction => "contraction",
            Situation::ExpansionContraction => "expansion_contraction",
            Situation::ContractionExpansion => "contraction_expansion",
            Situation::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub situation: Situation,
    pub tasks: Vec<TaskSpec>,
    pub seed: u64,
}

impl SequenceSpec {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Per-task training budgets, indexed by position (the last value repeats).
#[derive(Debug, Clone, PartialEq)]
pub struct Budgets(pub Vec<u64>);

impl Budgets {
    pub fn uniform(steps: u64) -> Self {
        Budgets(vec![steps])
    }

    fn get(&self, i: usize) -> u64 {
        self.0.get(i).or(self.0.last()).copied().unwrap_or(0)
    }
}

/// Builds the task list for a situation. `custom` takes explicit action-name
/// lists; the built-in situations ignore it.
pub fn build_sequence(
    situation: Situation,
    family: Family,
    grid: GridConfig,
    budgets: &Budgets,
    seed: u64,
    custom: Option<&[Vec<String>]>,
) -> Result<SequenceSpec> {
    let catalog = family.catalog();
    let [small, mid, full] = family.sizes();
    let spaces: Vec<ActionSpace> = match situation {
        Situation::Expansion => vec![small, mid, full],
        Situation::Contraction => vec![full, mid, small],
        Situation::ExpansionContraction => vec![small, full, mid],
        Situation::ContractionExpansion => vec![mid, small, full],
        Situation::Custom => {
            let lists = custom
                .filter(|l| !l.is_empty())
                .ok_or_else(|| Error::Config("custom situation needs explicit task action lists".into()))?;
            return finish(
                situation,
                family,
                grid,
                budgets,
                seed,
                lists
                    .iter()
                    .map(|names| ActionSpace::from_names(catalog, names))
                    .collect::<Result<_>>()?,
            );
        }
    }
    .into_iter()
    .map(|k| ActionSpace::prefix(catalog, k))
    .collect::<Result<_>>()?;
    finish(situation, family, grid, budgets, seed, spaces)
}

fn finish(
    situation: Situation,
    family: Family,
    grid: GridConfig,
    budgets: &Budgets,
    seed: u64,
    spaces: Vec<ActionSpace>,
) -> Result<SequenceSpec> {
    if grid.width == 0 || grid.height == 0 || grid.max_steps == 0 {
        return Err(Error::Config("grid dimensions and horizon must be positive".into()));
    }
    for pair in spaces.windows(2) {
        if pair[0] == pair[1] {
            return Err(Error::Config("consecutive tasks must have different action spaces".into()));
        }
    }
    let tasks = spaces
        .into_iter()
        .enumerate()
        .map(|(i, space)| TaskSpec {
            index: i + 1,
            family,
            grid,
            space,
            train_steps: budgets.get(i),
        })
        .collect();
    Ok(SequenceSpec { situation, tasks, seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dir {
    N,
    E,
    S,
    W,
}

impl Dir {
    pub const ALL: [Dir; 4] = [Dir::N, Dir::E, Dir::S, Dir::W];

    fn index(self) -> usize {
        self as usize
    }

    /// Unit step with y growing downwards.
    fn delta(self) -> (i32, i32) {
        match self {
            Dir::N => (0, -1),
            Dir::E => (1, 0),
            Dir::S => (0, 1),
            Dir::W => (-1, 0),
        }
    }

    fn right(self) -> Dir {
        Dir::ALL[(self.index() + 1) % 4]
    }

    fn left(self) -> Dir {
        Dir::ALL[(self.index() + 3) % 4]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridState {
    pub pos: (i32, i32),
    pub dir: Dir,
    pub goal: (i32, i32),
    pub t: u32,
    pub done: bool,
}

/// Pose after applying `action`, ignoring goal and time. Blocked moves leave
/// the pose unchanged.
fn apply_effect(family: Family, grid: &GridConfig, pos: (i32, i32), dir: Dir, action: usize) -> ((i32, i32), Dir) {
    let (fx, fy) = dir.delta();
    let (rx, ry) = dir.right().delta();
    let offset = match family {
        Family::Oriented => match action {
            0 => return (pos, dir.left()),
            1 => return (pos, dir.right()),
            2 => (fx, fy),
            3 => (-rx, -ry),
            4 => (rx, ry),
            5 => (fx - rx, fy - ry),
            6 => (fx + rx, fy + ry),
            _ => unreachable!("action index checked against catalog"),
        },
        Family::Omni => match action {
            0 => (0, 0),
            1 => (0, -1),
            2 => (0, 1),
            3 => (-1, 0),
            4 => (1, 0),
            5 => (-1, -1),
            6 => (1, -1),
            7 => (-1, 1),
            8 => (1, 1),
            _ => unreachable!("action index checked against catalog"),
        },
    };
    let next = (pos.0 + offset.0, pos.1 + offset.1);
    let inside = next.0 >= 0 && next.1 >= 0 && (next.0 as usize) < grid.width && (next.1 as usize) < grid.height;
    if inside {
        (next, dir)
    } else {
        (pos, dir)
    }
}

/// Cells reachable from `(pos, dir)` using only the active actions.
pub fn reachable_cells(task: &TaskSpec, pos: (i32, i32), dir: Dir) -> Vec<(i32, i32)> {
    let grid = &task.grid;
    let mut seen = vec![false; grid.cells() * 4];
    let key = |p: (i32, i32), d: Dir| (p.1 as usize * grid.width + p.0 as usize) * 4 + d.index();
    let mut queue = VecDeque::from([(pos, dir)]);
    seen[key(pos, dir)] = true;
    let mut cells = vec![false; grid.cells()];
    while let Some((p, d)) = queue.pop_front() {
        cells[p.1 as usize * grid.width + p.0 as usize] = true;
        for a in task.space.indices() {
            let (np, nd) = apply_effect(task.family, grid, p, d, a);
            let k = key(np, nd);
            if !seen[k] {
                seen[k] = true;
                queue.push_back((np, nd));
            }
        }
    }
    cells
        .iter()
        .enumerate()
        .filter(|(_, &c)| c)
        .map(|(i, _)| ((i % grid.width) as i32, (i / grid.width) as i32))
        .collect()
}

pub fn env_reset(task: &TaskSpec, episode_seed: u64) -> Result<(GridState, Vec<f64>)> {
    let grid = &task.grid;
    let (pos, dir, goal) = match grid.goal_rule {
        GoalRule::OppositeCorner => {
            let goal = (grid.width as i32 - 1, grid.height as i32 - 1);
            let (pos, dir) = ((0, 0), Dir::E);
            if goal == pos || !reachable_cells(task, pos, dir).contains(&goal) {
                return Err(Error::Config(format!(
                    "goal corner unreachable with actions {:?}",
                    task.space.names()
                )));
            }
            (pos, dir, goal)
        }
        GoalRule::RandomReachable => {
            let mut r = rng::substream(episode_seed, "reset", task.index as u64);
            let pos = (
                r.gen_range(0..grid.width) as i32,
                r.gen_range(0..grid.height) as i32,
            );
            let dir = match task.family {
                Family::Oriented => Dir::ALL[r.gen_range(0..4)],
                Family::Omni => Dir::N,
            };
            let candidates: Vec<_> = reachable_cells(task, pos, dir)
                .into_iter()
                .filter(|&c| c != pos)
                .collect();
            if candidates.is_empty() {
                return Err(Error::Config(format!(
                    "no reachable goal cell from {pos:?} with actions {:?}",
                    task.space.names()
                )));
            }
            (pos, dir, candidates[r.gen_range(0..candidates.len())])
        }
    };
    let state = GridState { pos, dir, goal, t: 0, done: false };
    let obs = encode_observation(&state, task);
    Ok((state, obs))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: GridState,
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

pub fn env_step(state: &GridState, action: usize, task: &TaskSpec) -> Result<StepOutcome> {
    if !task.space.contains(action) {
        return Err(Error::IllegalAction {
            action,
            reason: format!("not active in task {}", task.index),
        });
    }
    if state.done {
        return Err(Error::IllegalAction {
            action,
            reason: "episode already finished".into(),
        });
    }
    let (pos, dir) = apply_effect(task.family, &task.grid, state.pos, state.dir, action);
    let t = state.t + 1;
    let reached = pos == state.goal;
    let reward = if reached {
        1.0 - 0.9 * (t as f64 / task.grid.max_steps as f64)
    } else {
        0.0
    };
    let done = reached || t >= task.grid.max_steps;
    let next = GridState { pos, dir, goal: state.goal, t, done };
    Ok(StepOutcome {
        observation: encode_observation(&next, task),
        state: next,
        reward,
        done,
    })
}

/// `[one-hot agent cell | one-hot heading (oriented only) | one-hot goal cell]`.
pub fn encode_observation(state: &GridState, task: &TaskSpec) -> Vec<f64> {
    let grid = &task.grid;
    let cells = grid.cells();
    let mut v = vec![0.0; task.obs_len()];
    v[state.pos.1 as usize * grid.width + state.pos.0 as usize] = 1.0;
    let mut off = cells;
    if task.family == Family::Oriented {
        v[off + state.dir.index()] = 1.0;
        off += 4;
    }
    v[off + state.goal.1 as usize * grid.width + state.goal.0 as usize] = 1.0;
    v
}

/// Inverse of [`encode_observation`] for pose and goal; the step counter is
/// not observed and comes back as 0.
pub fn decode_observation(obs: &[f64], task: &TaskSpec) -> Result<GridState> {
    if obs.len() != task.obs_len() {
        return Err(Error::Shape(format!(
            "observation length {} but task expects {}",
            obs.len(),
            task.obs_len()
        )));
    }
    let grid = &task.grid;
    let cells = grid.cells();
    let hot = |slice: &[f64]| slice.iter().position(|&v| v == 1.0);
    let bad = || Error::Data("observation is not a valid one-hot encoding".into());
    let cell = |i: usize| ((i % grid.width) as i32, (i / grid.width) as i32);
    let pos = cell(hot(&obs[..cells]).ok_or_else(bad)?);
    let (dir, off) = if task.family == Family::Oriented {
        (Dir::ALL[hot(&obs[cells..cells + 4]).ok_or_else(bad)?], cells + 4)
    } else {
        (Dir::N, cells)
    };
    let goal = cell(hot(&obs[off..]).ok_or_else(bad)?);
    Ok(GridState { pos, dir, goal, t: 0, done: false })
}

/// Active actions whose effect turns observation `s` into `s_next`.
///
/// A transition's action is identifiable from `(s, s_next)` exactly when this
/// list has one element.
pub fn actions_explaining(task: &TaskSpec, s: &[f64], s_next: &[f64]) -> Result<Vec<usize>> {
    let from = decode_observation(s, task)?;
    let to = decode_observation(s_next, task)?;
    Ok(task
        .space
        .indices()
        .filter(|&a| {
            let (p, d) = apply_effect(task.family, &task.grid, from.pos, from.dir, a);
            p == to.pos && (task.family == Family::Omni || d == to.dir) && from.goal == to.goal
        })
        .collect())
}

/// Maps a raw episodic return onto `[0, 1]` given the reward design's range.
pub fn normalize_return(raw: f64, r_min: f64, r_max: f64) -> Result<f64> {
    if r_max == r_min {
        return Err(Error::Config("degenerate return range".into()));
    }
    Ok((raw - r_min) / (r_max - r_min))
}

/// Return range of the gridworld reward design.
pub const RETURN_RANGE: (f64, f64) = (0.0, 1.0);
