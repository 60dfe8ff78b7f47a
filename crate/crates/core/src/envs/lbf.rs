//! Level-based foraging on a square grid.
//!
//! Two agents and `foods` food items with integer levels. A group of agents
//! standing next to a food and choosing `LOAD` collects it when the sum of
//! their levels reaches the food level. Loaders split the food level in
//! proportion to their own levels; every reward is divided by the total food
//! level of the episode, so collecting everything pays exactly 1 in total.
//!
//! Observation layout (`7 + 4 * foods` values), coordinates scaled by
//! `size - 1`, agent levels by `max_agent_level`, food levels by
//! `2 * max_agent_level`:
//!
//! | slice   | len       | content                                   |
//! |---------|-----------|-------------------------------------------|
//! | `self`  | 3         | row, col, level                           |
//! | `other` | 4         | row, col, level, visible                  |
//! | `foods` | 4 * foods | per food: row, col, level, visible        |
//!
//! The controlled agent sees entities within `view_radius` cells (Chebyshev
//! distance); the modelled agent sees everything. Collected foods read as
//! zeros with visibility 0.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ActionSpace, EnvKind, EnvSpec, Environment, JointAction, ObsLayout, Observation, StepResult};
use crate::error::{Error, Result};

pub const NORTH: usize = 0;
pub const SOUTH: usize = 1;
pub const WEST: usize = 2;
pub const EAST: usize = 3;
pub const LOAD: usize = 4;
pub const N_ACTIONS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LbfConfig {
    pub size: usize,
    pub foods: usize,
    pub max_agent_level: u32,
    pub view_radius: usize,
    pub horizon: usize,
}

impl Default for LbfConfig {
    fn default() -> Self {
        LbfConfig { size: 20, foods: 4, max_agent_level: 3, view_radius: 4, horizon: 50 }
    }
}

impl LbfConfig {
    /// The reduced 8x8, 2-food variant.
    pub fn small() -> Self {
        LbfConfig { size: 8, foods: 2, ..LbfConfig::default() }
    }

    pub fn max_food_level(&self) -> u32 {
        2 * self.max_agent_level
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("lbf.horizon", "must be positive"));
        }
        if self.foods == 0 {
            return Err(Error::config("lbf.foods", "must be positive"));
        }
        if self.max_agent_level == 0 {
            return Err(Error::config("lbf.max_agent_level", "must be positive"));
        }
        // Foods sit off the border and never touch each other, so each one
        // claims a 2x2 block of the interior.
        let interior = self.size.saturating_sub(2);
        let blocks = interior.div_ceil(2).pow(2);
        if self.size < 4 || blocks < self.foods || self.size * self.size < self.foods + 2 + 8 {
            return Err(Error::config(
                "lbf.size",
                format!("a {0}x{0} grid cannot hold 2 agents and {1} foods", self.size, self.foods),
            ));
        }
        Ok(())
    }
}

pub fn layout(foods: usize) -> ObsLayout {
    ObsLayout::new(&[("self", 3), ("other", 4), ("foods", 4 * foods)])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub fn new(row: usize, col: usize) -> Self {
        Cell { row, col }
    }

    pub fn manhattan(self, other: Cell) -> usize {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col)
    }

    pub fn chebyshev(self, other: Cell) -> usize {
        self.row.abs_diff(other.row).max(self.col.abs_diff(other.col))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LbfEntity {
    pub cell: Cell,
    pub level: u32,
}

/// Rewards for one successful load: each loader receives
/// `food_level * own_level / sum(loader levels) / total_food_level`.
pub fn lbf_reward(loaders: &[(usize, u32)], food_level: u32, total_food_level: u32, n_agents: usize) -> Vec<f64> {
    let mut r = vec![0.0; n_agents];
    let sum: u32 = loaders.iter().map(|(_, l)| l).sum();
    if sum == 0 || total_food_level == 0 {
        return r;
    }
    for &(agent, level) in loaders {
        r[agent] += food_level as f64 * level as f64 / sum as f64 / total_food_level as f64;
    }
    r
}

/// Decoded view of an LBF observation.
#[derive(Clone, Debug, PartialEq)]
pub struct LbfView {
    pub me: LbfEntity,
    pub other: Option<LbfEntity>,
    /// Visible foods with their slot index.
    pub foods: Vec<(usize, LbfEntity)>,
}

impl LbfView {
    pub fn parse(cfg: &LbfConfig, obs: &[f64]) -> Result<Self> {
        let expect = 7 + 4 * cfg.foods;
        if obs.len() != expect {
            return Err(Error::dim("lbf_view", format!("observation has {} values, layout needs {}", obs.len(), expect)));
        }
        let scale = (cfg.size - 1) as f64;
        let cell = |r: f64, c: f64| Cell::new((r * scale).round() as usize, (c * scale).round() as usize);
        let me = LbfEntity {
            cell: cell(obs[0], obs[1]),
            level: (obs[2] * cfg.max_agent_level as f64).round() as u32,
        };
        let other = (obs[6] > 0.5).then(|| LbfEntity {
            cell: cell(obs[3], obs[4]),
            level: (obs[5] * cfg.max_agent_level as f64).round() as u32,
        });
        let foods = (0..cfg.foods)
            .filter_map(|k| {
                let o = &obs[7 + 4 * k..11 + 4 * k];
                (o[3] > 0.5).then(|| {
                    (k, LbfEntity {
                        cell: cell(o[0], o[1]),
                        level: (o[2] * cfg.max_food_level() as f64).round() as u32,
                    })
                })
            })
            .collect();
        Ok(LbfView { me, other, foods })
    }
}

#[derive(Clone, Debug)]
pub struct Foraging {
    cfg: LbfConfig,
    spec: EnvSpec,
    agents: [LbfEntity; 2],
    foods: Vec<Option<LbfEntity>>,
    total_food_level: u32,
    t: usize,
    done: bool,
}

impl Foraging {
    pub fn new(cfg: LbfConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = EnvSpec {
            kind: EnvKind::Lbf,
            n_agents: 2,
            action_spaces: vec![ActionSpace::single(N_ACTIONS); 2],
            obs_layouts: vec![layout(cfg.foods); 2],
            horizon: cfg.horizon,
        };
        let placeholder = LbfEntity { cell: Cell::new(0, 0), level: 1 };
        Ok(Foraging {
            foods: vec![None; cfg.foods],
            cfg,
            spec,
            agents: [placeholder; 2],
            total_food_level: 0,
            t: 0,
            done: true,
        })
    }

    pub fn config(&self) -> &LbfConfig {
        &self.cfg
    }

    pub fn agents(&self) -> &[LbfEntity; 2] {
        &self.agents
    }

    pub fn foods(&self) -> &[Option<LbfEntity>] {
        &self.foods
    }

    /// Replaces the episode state; the step counter restarts at 0.
    pub fn set_state(&mut self, agents: [LbfEntity; 2], foods: Vec<LbfEntity>) -> Result<Vec<Observation>> {
        if foods.len() != self.cfg.foods {
            return Err(Error::Usage(format!("expected {} foods, got {}", self.cfg.foods, foods.len())));
        }
        self.agents = agents;
        self.total_food_level = foods.iter().map(|f| f.level).sum();
        self.foods = foods.into_iter().map(Some).collect();
        self.t = 0;
        self.done = false;
        Ok(self.observations())
    }

    fn occupied_by_food(&self, cell: Cell) -> bool {
        self.foods.iter().flatten().any(|f| f.cell == cell)
    }

    fn observe(&self, i: usize) -> Observation {
        let c = &self.cfg;
        let scale = (c.size - 1) as f64;
        let radius = if i == 0 { c.view_radius } else { usize::MAX };
        let me = self.agents[i];
        let visible = |cell: Cell| me.cell.chebyshev(cell) <= radius;
        let mut o = Vec::with_capacity(7 + 4 * c.foods);
        o.extend([
            me.cell.row as f64 / scale,
            me.cell.col as f64 / scale,
            me.level as f64 / c.max_agent_level as f64,
        ]);
        let other = self.agents[1 - i];
        if visible(other.cell) {
            o.extend([
                other.cell.row as f64 / scale,
                other.cell.col as f64 / scale,
                other.level as f64 / c.max_agent_level as f64,
                1.0,
            ]);
        } else {
            o.extend([0.0; 4]);
        }
        for f in &self.foods {
            match f {
                Some(f) if visible(f.cell) => o.extend([
                    f.cell.row as f64 / scale,
                    f.cell.col as f64 / scale,
                    f.level as f64 / c.max_food_level() as f64,
                    1.0,
                ]),
                _ => o.extend([0.0; 4]),
            }
        }
        o
    }

    fn observations(&self) -> Vec<Observation> {
        (0..2).map(|i| self.observe(i)).collect()
    }

    fn target_cell(&self, agent: usize, action: usize) -> Cell {
        let cell = self.agents[agent].cell;
        let n = self.cfg.size;
        let next = match action {
            NORTH if cell.row > 0 => Cell::new(cell.row - 1, cell.col),
            SOUTH if cell.row + 1 < n => Cell::new(cell.row + 1, cell.col),
            WEST if cell.col > 0 => Cell::new(cell.row, cell.col - 1),
            EAST if cell.col + 1 < n => Cell::new(cell.row, cell.col + 1),
            _ => cell,
        };
        if self.occupied_by_food(next) {
            cell
        } else {
            next
        }
    }

    /// The food an agent at `cell` would load: lowest (row, col) among
    /// adjacent foods.
    fn adjacent_food(&self, cell: Cell) -> Option<usize> {
        self.foods
            .iter()
            .enumerate()
            .filter_map(|(k, f)| f.filter(|f| f.cell.manhattan(cell) == 1).map(|f| (k, f.cell)))
            .min_by_key(|(_, c)| (c.row, c.col))
            .map(|(k, _)| k)
    }
}

impl Environment for Foraging {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<Observation>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = self.cfg.clone();
        let mut levels = [0u32; 2];
        for l in &mut levels {
            *l = rng.random_range(1..=c.max_agent_level);
        }
        let max_food = levels.iter().sum::<u32>();
        let mut foods: Vec<LbfEntity> = Vec::with_capacity(c.foods);
        let mut tries = 0;
        while foods.len() < c.foods {
            tries += 1;
            if tries > 10_000 {
                return Err(Error::config("lbf.size", "could not place foods"));
            }
            let cell = Cell::new(rng.random_range(1..c.size - 1), rng.random_range(1..c.size - 1));
            if foods.iter().any(|f| f.cell.chebyshev(cell) <= 1) {
                continue;
            }
            foods.push(LbfEntity { cell, level: rng.random_range(1..=max_food) });
        }
        let mut agents: Vec<LbfEntity> = Vec::with_capacity(2);
        while agents.len() < 2 {
            tries += 1;
            if tries > 20_000 {
                return Err(Error::config("lbf.size", "could not place agents"));
            }
            let cell = Cell::new(rng.random_range(0..c.size), rng.random_range(0..c.size));
            if foods.iter().any(|f| f.cell == cell) || agents.iter().any(|a| a.cell == cell) {
                continue;
            }
            agents.push(LbfEntity { cell, level: levels[agents.len()] });
        }
        self.set_state([agents[0], agents[1]], foods)
    }

    fn step(&mut self, actions: &JointAction) -> Result<StepResult> {
        if self.done {
            return Err(Error::Usage("step called on a finished episode; reset first".into()));
        }
        self.spec.validate_actions(actions)?;
        let acts: Vec<usize> = actions.iter().map(|a| a[0]).collect();

        let targets: Vec<Cell> = (0..2).map(|i| self.target_cell(i, acts[i])).collect();
        for i in 0..2 {
            if targets.iter().filter(|c| **c == targets[i]).count() == 1 {
                self.agents[i].cell = targets[i];
            }
        }

        let mut rewards = vec![0.0; 2];
        let mut loaded = 0.0;
        let choices: Vec<Option<usize>> = (0..2)
            .map(|i| if acts[i] == LOAD { self.adjacent_food(self.agents[i].cell) } else { None })
            .collect();
        for k in 0..self.foods.len() {
            let Some(food) = self.foods[k] else { continue };
            let loaders: Vec<(usize, u32)> =
                (0..2).filter(|&i| choices[i] == Some(k)).map(|i| (i, self.agents[i].level)).collect();
            if loaders.is_empty() || loaders.iter().map(|l| l.1).sum::<u32>() < food.level {
                continue;
            }
            let r = lbf_reward(&loaders, food.level, self.total_food_level, 2);
            rewards.iter_mut().zip(&r).for_each(|(a, b)| *a += b);
            self.foods[k] = None;
            loaded += 1.0;
        }

        self.t += 1;
        let remaining = self.foods.iter().flatten().count();
        self.done = remaining == 0 || self.t >= self.cfg.horizon;
        let mut info = BTreeMap::new();
        info.insert("foods_loaded".into(), loaded);
        info.insert("foods_remaining".into(), remaining as f64);
        Ok(StepResult { observations: self.observations(), rewards, done: self.done, info })
    }

    fn t(&self) -> usize {
        self.t
    }
}
