//! Dec-POMDP environment kernel.
//!
//! Every environment exposes its true global state alongside the per-agent
//! observations, plus an observation operator (`observe`) that maps any state
//! vector to an agent's observation through an explicit gather map. The gather
//! map is what lets the masked reconstruction loss compare generated states
//! against real observations.

mod hallway;
mod lbf;
mod slice;

pub use hallway::{Hallway, HallwayConfig, AWAY_FROM_GOAL, STAY, TOWARD_GOAL, WIN_REWARD};
pub use lbf::{Lbf, LbfConfig};
pub use slice::SliceFixture;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub n_agents: usize,
    pub n_actions: usize,
    /// Observation length after zero padding.
    pub obs_len: usize,
    pub state_len: usize,
    pub horizon: usize,
}

/// Per-timestep observations, one zero-padded row per agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub values: Array2<f32>,
    pub raw_lengths: Vec<usize>,
}

impl ObservationSet {
    pub fn n_agents(&self) -> usize {
        self.values.nrows()
    }

    pub fn obs_len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalState {
    pub values: Vec<f32>,
    pub is_generated: bool,
}

impl GlobalState {
    pub fn real(values: Vec<f32>) -> Self {
        Self { values, is_generated: false }
    }

    pub fn generated(values: Vec<f32>) -> Self {
        Self { values, is_generated: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub obs: ObservationSet,
    pub state: GlobalState,
    /// Team reward for the transition that produced this result.
    pub reward: f32,
    pub done: bool,
    /// The episode ended because of the time limit, not an env terminal.
    pub truncated: bool,
    /// The env's success condition held when the episode ended.
    pub success: bool,
    /// `n_agents x n_actions` availability.
    pub avail: Vec<Vec<bool>>,
    pub t: usize,
}

/// Which state entries each agent sees, and where they land in its observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisibilityMask {
    /// `n x L`, 1 where the agent observes that state entry.
    pub mask: Array2<u8>,
    /// `gather[i][k]` is the state index feeding observation coordinate `k`.
    pub gather: Vec<Vec<usize>>,
}

impl VisibilityMask {
    /// Applies the gather maps to a state vector, producing padded rows.
    pub fn apply(&self, state: &[f32], obs_len: usize) -> Array2<f32> {
        let mut out = Array2::zeros((self.gather.len(), obs_len));
        for (i, row) in self.gather.iter().enumerate() {
            for (k, &s) in row.iter().enumerate() {
                out[[i, k]] = state[s];
            }
        }
        out
    }
}

/// One agent's view of a state under the observation operator.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationRow {
    pub values: Vec<f32>,
    pub mask_row: Vec<u8>,
    pub gather_row: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentKind {
    /// Exactly one entry is 1 in a real state.
    OneHot,
    /// Bounded scalar features.
    Scalars,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub start: usize,
    pub len: usize,
    pub kind: SegmentKind,
    /// Agent whose position this segment encodes, if any.
    pub agent: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateLayout {
    pub state_len: usize,
    pub segments: Vec<Segment>,
}

impl StateLayout {
    /// Segments are disjoint, ordered and cover `[0, state_len)`.
    pub fn is_partition(&self) -> bool {
        let mut next = 0;
        for s in &self.segments {
            if s.start != next || s.len == 0 {
                return false;
            }
            next += s.len;
        }
        next == self.state_len
    }
}

pub trait Environment {
    fn name(&self) -> &str;

    fn spec(&self) -> &EnvSpec;

    fn reset(&mut self, seed: u64) -> Result<StepResult>;

    fn step(&mut self, actions: &[usize]) -> Result<StepResult>;

    /// Observation operator: a pure function of `(state, agent)`.
    ///
    /// Visibility is decoded from `state` itself, so pass the true state when
    /// building masks for generated states.
    fn observe(&self, state: &GlobalState, agent: usize) -> Result<ObservationRow>;

    fn state_layout(&self) -> StateLayout;

    /// Per-agent progress scalar in `[0, 1]` used by trace plots.
    fn liveness(&self, state: &GlobalState) -> Vec<f32>;

    /// Canonical description of the env parameters; feeds the env hash.
    fn describe(&self) -> String;

    fn visibility(&self, state: &GlobalState) -> Result<VisibilityMask> {
        let spec = self.spec();
        let mut mask = Array2::zeros((spec.n_agents, spec.state_len));
        let mut gather = Vec::with_capacity(spec.n_agents);
        for i in 0..spec.n_agents {
            let row = self.observe(state, i)?;
            for (j, &m) in row.mask_row.iter().enumerate() {
                mask[[i, j]] = m;
            }
            gather.push(row.gather_row);
        }
        Ok(VisibilityMask { mask, gather })
    }

    /// Stable hash over the env description and spec.
    fn env_hash(&self) -> String {
        env_hash(&self.describe(), self.spec())
    }
}

pub fn env_hash(description: &str, spec: &EnvSpec) -> String {
    let mut h = Sha256::new();
    h.update(description.as_bytes());
    h.update(
        format!(
            "|n={}|a={}|l={}|L={}|h={}",
            spec.n_agents, spec.n_actions, spec.obs_len, spec.state_len, spec.horizon
        )
        .as_bytes(),
    );
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvName {
    Hallway,
    Lbf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub name: EnvName,
    pub hallway: HallwayConfig,
    pub lbf: LbfConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { name: EnvName::Hallway, hallway: HallwayConfig::default(), lbf: LbfConfig::default() }
    }
}

impl EnvConfig {
    pub fn build(&self) -> Result<Box<dyn Environment>> {
        Ok(match self.name {
            EnvName::Hallway => Box::new(Hallway::new(self.hallway.clone())?),
            EnvName::Lbf => Box::new(Lbf::new(self.lbf.clone())?),
        })
    }
}

pub(crate) fn check_actions(spec: &EnvSpec, avail: &[Vec<bool>], done: bool, actions: &[usize]) -> Result<()> {
    if done {
        return Err(Error::Usage("step called after the episode ended".into()));
    }
    if actions.len() != spec.n_agents {
        return Err(Error::Usage(format!("expected {} actions, got {}", spec.n_agents, actions.len())));
    }
    for (i, &a) in actions.iter().enumerate() {
        if a >= spec.n_actions || !avail[i][a] {
            return Err(Error::Usage(format!("action {a} is not available to agent {i}")));
        }
    }
    Ok(())
}

pub(crate) fn pad_rows(rows: Vec<ObservationRow>, obs_len: usize) -> ObservationSet {
    let mut values = Array2::zeros((rows.len(), obs_len));
    let mut raw_lengths = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        for (k, &v) in r.values.iter().enumerate() {
            values[[i, k]] = v;
        }
        raw_lengths.push(r.gather_row.len());
    }
    ObservationSet { values, raw_lengths }
}

/// Observation for every agent under the true state.
pub(crate) fn observe_all<E: Environment + ?Sized>(env: &E, state: &GlobalState) -> Result<ObservationSet> {
    let rows = (0..env.spec().n_agents).map(|i| env.observe(state, i)).collect::<Result<Vec<_>>>()?;
    Ok(pad_rows(rows, env.spec().obs_len))
}
