//! Level-based foraging on a square grid.
//!
//! Agents and foods carry levels. A food is collected when the agents that are
//! orthogonally adjacent to it and choose `LOAD` have combined levels at least
//! the food's level. The team reward is the collected food's level divided by
//! the total level of all foods, so an episode returns at most 1.
//!
//! State layout: per agent `(row, col, level)`, then per food
//! `(row, col, level, alive)`, coordinates and levels scaled into `[0, 1]`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_actions, observe_all, EnvSpec, Environment, GlobalState, ObservationRow, Segment, SegmentKind, StateLayout, StepResult};
use crate::error::{Error, Result};

pub const NONE: usize = 0;
pub const NORTH: usize = 1;
pub const SOUTH: usize = 2;
pub const WEST: usize = 3;
pub const EAST: usize = 4;
pub const LOAD: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LbfConfig {
    pub grid: usize,
    pub agents: usize,
    pub foods: usize,
    pub sight: usize,
    pub max_agent_level: usize,
    pub horizon: usize,
}

impl Default for LbfConfig {
    fn default() -> Self {
        Self { grid: 8, agents: 3, foods: 2, sight: 2, max_agent_level: 3, horizon: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Agent {
    pub row: usize,
    pub col: usize,
    pub level: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Food {
    pub row: usize,
    pub col: usize,
    pub level: usize,
    pub alive: bool,
}

#[derive(Clone, Debug)]
pub struct Lbf {
    cfg: LbfConfig,
    spec: EnvSpec,
    agents: Vec<Agent>,
    foods: Vec<Food>,
    total_food_level: usize,
    t: usize,
    done: bool,
}

fn chebyshev(a: (usize, usize), b: (usize, usize)) -> usize {
    a.0.abs_diff(b.0).max(a.1.abs_diff(b.1))
}

fn adjacent(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0.abs_diff(b.0) + a.1.abs_diff(b.1) == 1
}

impl Lbf {
    pub fn new(cfg: LbfConfig) -> Result<Self> {
        if cfg.grid < 3 {
            return Err(Error::Config(format!("lbf.grid must be at least 3, got {}", cfg.grid)));
        }
        if cfg.agents == 0 || cfg.foods == 0 || cfg.max_agent_level == 0 || cfg.horizon == 0 {
            return Err(Error::Config("lbf agents, foods, max_agent_level and horizon must be positive".into()));
        }
        let interior = (cfg.grid - 2) * (cfg.grid - 2);
        // foods need pairwise non-adjacent interior cells; agents fill the rest
        if cfg.foods > interior.div_ceil(4).max(1) || cfg.agents + cfg.foods > cfg.grid * cfg.grid {
            return Err(Error::Config(format!(
                "lbf grid {} too small for {} agents and {} foods",
                cfg.grid, cfg.agents, cfg.foods
            )));
        }
        let spec = EnvSpec {
            n_agents: cfg.agents,
            n_actions: 6,
            obs_len: 3 * cfg.agents + 4 * cfg.foods,
            state_len: 3 * cfg.agents + 4 * cfg.foods,
            horizon: cfg.horizon,
        };
        Ok(Self { cfg, spec, agents: Vec::new(), foods: Vec::new(), total_food_level: 1, t: 0, done: true })
    }

    pub fn config(&self) -> &LbfConfig {
        &self.cfg
    }

    pub fn agents(&self) -> &[Agent] {
        &self.agents
    }

    pub fn foods(&self) -> &[Food] {
        &self.foods
    }

    fn max_food_level(&self) -> usize {
        self.cfg.max_agent_level * self.cfg.agents.min(3)
    }

    /// Installs an explicit board (test and probe helper).
    pub fn set_board(&mut self, agents: Vec<Agent>, foods: Vec<Food>) -> Result<StepResult> {
        if agents.len() != self.cfg.agents || foods.len() != self.cfg.foods {
            return Err(Error::Usage("board entity counts do not match the config".into()));
        }
        let g = self.cfg.grid;
        if agents.iter().any(|a| a.row >= g || a.col >= g || a.level == 0 || a.level > self.cfg.max_agent_level)
            || foods.iter().any(|f| f.row >= g || f.col >= g || f.level == 0 || f.level > self.max_food_level())
        {
            return Err(Error::Usage("board entity out of range".into()));
        }
        self.total_food_level = foods.iter().map(|f| f.level).sum();
        self.agents = agents;
        self.foods = foods;
        self.t = 0;
        self.done = false;
        self.result(0.0, false, false)
    }

    fn scale_coord(&self, c: usize) -> f32 {
        c as f32 / (self.cfg.grid - 1) as f32
    }

    fn unscale_coord(&self, v: f32) -> usize {
        let c = (v * (self.cfg.grid - 1) as f32).round();
        c.clamp(0.0, (self.cfg.grid - 1) as f32) as usize
    }

    fn agent_offset(&self, i: usize) -> usize {
        3 * i
    }

    fn food_offset(&self, f: usize) -> usize {
        3 * self.cfg.agents + 4 * f
    }

    fn encode(&self) -> GlobalState {
        let mut v = vec![0.0; self.spec.state_len];
        for (i, a) in self.agents.iter().enumerate() {
            let o = self.agent_offset(i);
            v[o] = self.scale_coord(a.row);
            v[o + 1] = self.scale_coord(a.col);
            v[o + 2] = a.level as f32 / self.cfg.max_agent_level as f32;
        }
        for (f, food) in self.foods.iter().enumerate() {
            let o = self.food_offset(f);
            v[o] = self.scale_coord(food.row);
            v[o + 1] = self.scale_coord(food.col);
            v[o + 2] = food.level as f32 / self.max_food_level() as f32;
            v[o + 3] = if food.alive { 1.0 } else { 0.0 };
        }
        GlobalState::real(v)
    }

    fn occupied(&self, cell: (usize, usize)) -> bool {
        self.agents.iter().any(|a| (a.row, a.col) == cell)
            || self.foods.iter().any(|f| f.alive && (f.row, f.col) == cell)
    }

    fn target(&self, a: &Agent, action: usize) -> Option<(usize, usize)> {
        let g = self.cfg.grid;
        match action {
            NORTH if a.row > 0 => Some((a.row - 1, a.col)),
            SOUTH if a.row + 1 < g => Some((a.row + 1, a.col)),
            WEST if a.col > 0 => Some((a.row, a.col - 1)),
            EAST if a.col + 1 < g => Some((a.row, a.col + 1)),
            _ => None,
        }
    }

    fn avail(&self) -> Vec<Vec<bool>> {
        self.agents
            .iter()
            .map(|a| {
                (0..6)
                    .map(|act| match act {
                        NONE => true,
                        LOAD => self.foods.iter().any(|f| f.alive && adjacent((a.row, a.col), (f.row, f.col))),
                        _ => self.target(a, act).is_some_and(|c| !self.occupied(c)),
                    })
                    .collect()
            })
            .collect()
    }

    fn result(&self, reward: f32, truncated: bool, success: bool) -> Result<StepResult> {
        let state = self.encode();
        Ok(StepResult {
            obs: observe_all(self, &state)?,
            state,
            reward,
            done: self.done,
            truncated,
            success,
            avail: self.avail(),
            t: self.t,
        })
    }

    /// Combined level of the loading agents adjacent to `food`.
    pub fn loading_level(agents: &[Agent], actions: &[usize], food: &Food) -> usize {
        agents
            .iter()
            .zip(actions)
            .filter(|(a, &act)| act == LOAD && adjacent((a.row, a.col), (food.row, food.col)))
            .map(|(a, _)| a.level)
            .sum()
    }
}

impl Environment for Lbf {
    fn name(&self) -> &str {
        "lbf"
    }

    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Result<StepResult> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = self.cfg.grid;
        let mut agents: Vec<Agent> = Vec::new();
        let mut foods: Vec<Food> = Vec::new();
        let levels: Vec<usize> = (0..self.cfg.agents).map(|_| rng.gen_range(1..=self.cfg.max_agent_level)).collect();
        let mut sorted = levels.clone();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        let max_food = sorted.iter().take(3).sum::<usize>().min(self.max_food_level());

        let mut interior: Vec<(usize, usize)> = (1..g - 1).flat_map(|r| (1..g - 1).map(move |c| (r, c))).collect();
        interior.shuffle(&mut rng);
        for cell in interior {
            if foods.len() == self.cfg.foods {
                break;
            }
            if foods.iter().any(|f| chebyshev((f.row, f.col), cell) <= 1) {
                continue;
            }
            foods.push(Food { row: cell.0, col: cell.1, level: rng.gen_range(1..=max_food), alive: true });
        }
        if foods.len() < self.cfg.foods {
            return Err(Error::Config(format!("could not place {} foods on a {g}x{g} grid", self.cfg.foods)));
        }
        let mut free: Vec<(usize, usize)> = (0..g)
            .flat_map(|r| (0..g).map(move |c| (r, c)))
            .filter(|&cell| !foods.iter().any(|f| (f.row, f.col) == cell))
            .collect();
        if free.len() < self.cfg.agents {
            return Err(Error::Config(format!("no room for {} agents on a {g}x{g} grid", self.cfg.agents)));
        }
        free.shuffle(&mut rng);
        for (i, &(row, col)) in free.iter().take(self.cfg.agents).enumerate() {
            agents.push(Agent { row, col, level: levels[i] });
        }
        self.total_food_level = foods.iter().map(|f| f.level).sum();
        self.agents = agents;
        self.foods = foods;
        self.t = 0;
        self.done = false;
        self.result(0.0, false, false)
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        check_actions(&self.spec, &self.avail(), self.done, actions)?;

        // loading happens from current positions
        let mut collected = 0;
        for fi in 0..self.foods.len() {
            if !self.foods[fi].alive {
                continue;
            }
            let level = Self::loading_level(&self.agents, actions, &self.foods[fi]);
            if level > 0 && level >= self.foods[fi].level {
                self.foods[fi].alive = false;
                collected += self.foods[fi].level;
            }
        }

        // moves into the same cell cancel each other
        let targets: Vec<Option<(usize, usize)>> =
            self.agents.iter().zip(actions).map(|(a, &act)| self.target(a, act)).collect();
        for i in 0..self.agents.len() {
            if let Some(cell) = targets[i] {
                let clash = targets.iter().enumerate().any(|(j, t)| j != i && *t == Some(cell));
                if !clash {
                    self.agents[i].row = cell.0;
                    self.agents[i].col = cell.1;
                }
            }
        }

        self.t += 1;
        let reward = collected as f32 / self.total_food_level as f32;
        let all = self.foods.iter().all(|f| !f.alive);
        if all {
            self.done = true;
            return self.result(reward, false, true);
        }
        if self.t >= self.spec.horizon {
            self.done = true;
            return self.result(reward, true, false);
        }
        self.result(reward, false, false)
    }

    fn observe(&self, state: &GlobalState, agent: usize) -> Result<ObservationRow> {
        let n = self.cfg.agents;
        if agent >= n {
            return Err(Error::Usage(format!("agent {agent} out of range")));
        }
        let s = &state.values;
        if s.len() != self.spec.state_len {
            return Err(Error::Input(format!("state length {} != {}", s.len(), self.spec.state_len)));
        }
        let pos = |o: usize| (self.unscale_coord(s[o]), self.unscale_coord(s[o + 1]));
        let me = pos(self.agent_offset(agent));
        let mut gather_row: Vec<usize> = (0..3).map(|k| self.agent_offset(agent) + k).collect();
        for j in (0..n).filter(|&j| j != agent) {
            let o = self.agent_offset(j);
            if chebyshev(me, pos(o)) <= self.cfg.sight {
                gather_row.extend(o..o + 3);
            }
        }
        for f in 0..self.cfg.foods {
            let o = self.food_offset(f);
            if s[o + 3] > 0.5 && chebyshev(me, pos(o)) <= self.cfg.sight {
                gather_row.extend(o..o + 4);
            }
        }
        let mut mask_row = vec![0u8; self.spec.state_len];
        let mut values = vec![0.0; self.spec.obs_len];
        for (k, &idx) in gather_row.iter().enumerate() {
            mask_row[idx] = 1;
            values[k] = s[idx];
        }
        Ok(ObservationRow { values, mask_row, gather_row })
    }

    fn state_layout(&self) -> StateLayout {
        let mut segments = Vec::new();
        for i in 0..self.cfg.agents {
            segments.push(Segment {
                name: format!("agent{i}"),
                start: self.agent_offset(i),
                len: 3,
                kind: SegmentKind::Scalars,
                agent: Some(i),
            });
        }
        for f in 0..self.cfg.foods {
            segments.push(Segment {
                name: format!("food{f}"),
                start: self.food_offset(f),
                len: 4,
                kind: SegmentKind::Scalars,
                agent: None,
            });
        }
        StateLayout { state_len: self.spec.state_len, segments }
    }

    fn liveness(&self, state: &GlobalState) -> Vec<f32> {
        let s = &state.values;
        let pos = |o: usize| (self.unscale_coord(s[o]), self.unscale_coord(s[o + 1]));
        (0..self.cfg.agents)
            .map(|i| {
                let me = pos(self.agent_offset(i));
                let nearest = (0..self.cfg.foods)
                    .filter(|&f| s[self.food_offset(f) + 3] > 0.5)
                    .map(|f| chebyshev(me, pos(self.food_offset(f))))
                    .min();
                match nearest {
                    Some(d) => 1.0 - d as f32 / (self.cfg.grid - 1) as f32,
                    None => 0.0,
                }
            })
            .collect()
    }

    fn describe(&self) -> String {
        let c = &self.cfg;
        format!("lbf(grid={},agents={},foods={},sight={},lvl={},h={})", c.grid, c.agents, c.foods, c.sight, c.max_agent_level, c.horizon)
    }
}
