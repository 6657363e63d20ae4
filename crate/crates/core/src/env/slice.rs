//! Synthetic completion fixture: the state is a vector of i.i.d. uniform
//! values and each agent observes a fixed contiguous slice of it.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_actions, observe_all, EnvSpec, Environment, GlobalState, ObservationRow, Segment, SegmentKind, StateLayout, StepResult};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct SliceFixture {
    spec: EnvSpec,
    slices: Vec<(usize, usize)>,
    rng: ChaCha8Rng,
    state: Vec<f32>,
    t: usize,
    done: bool,
}

impl SliceFixture {
    /// `state_len` values split evenly across `n_agents` observers.
    pub fn new(state_len: usize, n_agents: usize, horizon: usize) -> Result<Self> {
        if n_agents == 0 || state_len % n_agents != 0 || horizon == 0 {
            return Err(Error::Config("state_len must split evenly across a positive agent count".into()));
        }
        let w = state_len / n_agents;
        let slices = (0..n_agents).map(|i| (i * w, (i + 1) * w)).collect();
        let spec = EnvSpec { n_agents, n_actions: 1, obs_len: w, state_len, horizon };
        Ok(Self { spec, slices, rng: ChaCha8Rng::seed_from_u64(0), state: vec![0.0; state_len], t: 0, done: true })
    }

    /// The 12-value, 2-agent fixture.
    pub fn standard() -> Self {
        Self::new(12, 2, 10).expect("valid fixture")
    }

    fn resample(&mut self) {
        for v in &mut self.state {
            *v = self.rng.gen_range(0.0..1.0);
        }
    }

    fn result(&self, done: bool, truncated: bool) -> Result<StepResult> {
        let state = GlobalState::real(self.state.clone());
        Ok(StepResult {
            obs: observe_all(self, &state)?,
            state,
            reward: 0.0,
            done,
            truncated,
            success: false,
            avail: vec![vec![true]; self.spec.n_agents],
            t: self.t,
        })
    }
}

impl Environment for SliceFixture {
    fn name(&self) -> &str {
        "slice"
    }

    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Result<StepResult> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.resample();
        self.t = 0;
        self.done = false;
        self.result(false, false)
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        check_actions(&self.spec, &vec![vec![true]; self.spec.n_agents], self.done, actions)?;
        self.resample();
        self.t += 1;
        self.done = self.t >= self.spec.horizon;
        self.result(self.done, self.done)
    }

    fn observe(&self, state: &GlobalState, agent: usize) -> Result<ObservationRow> {
        let &(a, b) = self.slices.get(agent).ok_or_else(|| Error::Usage(format!("agent {agent} out of range")))?;
        let gather_row: Vec<usize> = (a..b).collect();
        let mut mask_row = vec![0u8; self.spec.state_len];
        mask_row[a..b].iter_mut().for_each(|m| *m = 1);
        let values = state.values[a..b].to_vec();
        Ok(ObservationRow { values, mask_row, gather_row })
    }

    fn state_layout(&self) -> StateLayout {
        let segments = self
            .slices
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| Segment { name: format!("slice{i}"), start: a, len: b - a, kind: SegmentKind::Scalars, agent: Some(i) })
            .collect();
        StateLayout { state_len: self.spec.state_len, segments }
    }

    fn liveness(&self, _state: &GlobalState) -> Vec<f32> {
        vec![1.0; self.spec.n_agents]
    }

    fn describe(&self) -> String {
        format!("slice(L={},n={})", self.spec.state_len, self.spec.n_agents)
    }
}
