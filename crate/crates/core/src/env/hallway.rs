//! Hallway: agents on separate chains must step onto the shared goal `g` at
//! the same time. Each agent only sees its own position.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_actions, observe_all, EnvSpec, Environment, GlobalState, ObservationRow, Segment, SegmentKind, StateLayout, StepResult};
use crate::error::{Error, Result};

pub const TOWARD_GOAL: usize = 0;
pub const AWAY_FROM_GOAL: usize = 1;
pub const STAY: usize = 2;

pub const WIN_REWARD: f32 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HallwayConfig {
    pub lengths: Vec<usize>,
}

impl Default for HallwayConfig {
    fn default() -> Self {
        Self { lengths: vec![4, 6, 8, 10] }
    }
}

#[derive(Clone, Debug)]
pub struct Hallway {
    lengths: Vec<usize>,
    offsets: Vec<usize>,
    spec: EnvSpec,
    pos: Vec<usize>,
    t: usize,
    done: bool,
}

impl Hallway {
    pub fn new(config: HallwayConfig) -> Result<Self> {
        if config.lengths.is_empty() || config.lengths.iter().any(|&l| l == 0) {
            return Err(Error::Config("hallway.lengths must be a non-empty list of positive lengths".into()));
        }
        let lengths = config.lengths;
        let mut offsets = Vec::with_capacity(lengths.len());
        let mut acc = 0;
        for &l in &lengths {
            offsets.push(acc);
            acc += l + 1;
        }
        let max_len = *lengths.iter().max().expect("non-empty");
        let spec = EnvSpec {
            n_agents: lengths.len(),
            n_actions: 3,
            obs_len: max_len + 1,
            state_len: acc,
            horizon: max_len + 10,
        };
        let pos = lengths.clone();
        Ok(Self { lengths, offsets, spec, pos, t: 0, done: true })
    }

    pub fn positions(&self) -> &[usize] {
        &self.pos
    }

    /// Places agents at explicit chain positions (test and probe helper).
    pub fn set_positions(&mut self, pos: &[usize]) -> Result<StepResult> {
        if pos.len() != self.lengths.len() || pos.iter().zip(&self.lengths).any(|(&p, &l)| p == 0 || p > l) {
            return Err(Error::Usage(format!("positions {pos:?} outside chains {:?}", self.lengths)));
        }
        self.pos = pos.to_vec();
        self.t = 0;
        self.done = false;
        self.result(0.0, false, false)
    }

    fn encode(&self) -> GlobalState {
        let mut v = vec![0.0; self.spec.state_len];
        for (i, &p) in self.pos.iter().enumerate() {
            v[self.offsets[i] + p] = 1.0;
        }
        GlobalState::real(v)
    }

    fn avail(&self) -> Vec<Vec<bool>> {
        vec![vec![true; 3]; self.spec.n_agents]
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

    /// Decodes each agent's position as the argmax of its one-hot segment.
    pub fn decode_positions(&self, state: &[f32]) -> Vec<usize> {
        self.lengths
            .iter()
            .zip(&self.offsets)
            .map(|(&l, &off)| {
                let seg = &state[off..off + l + 1];
                seg.iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect()
    }
}

impl Environment for Hallway {
    fn name(&self) -> &str {
        "hallway"
    }

    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Result<StepResult> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.pos = self.lengths.iter().map(|&l| rng.gen_range(1..=l)).collect();
        self.t = 0;
        self.done = false;
        self.result(0.0, false, false)
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        check_actions(&self.spec, &self.avail(), self.done, actions)?;
        for ((p, &a), &l) in self.pos.iter_mut().zip(actions).zip(&self.lengths) {
            match a {
                TOWARD_GOAL => *p -= 1,
                AWAY_FROM_GOAL => *p = (*p + 1).min(l),
                _ => {}
            }
        }
        self.t += 1;
        let arrived = self.pos.iter().any(|&p| p == 0);
        let all = self.pos.iter().all(|&p| p == 0);
        if arrived {
            self.done = true;
            let reward = if all { WIN_REWARD } else { 0.0 };
            return self.result(reward, false, all);
        }
        if self.t >= self.spec.horizon {
            self.done = true;
            return self.result(0.0, true, false);
        }
        self.result(0.0, false, false)
    }

    fn observe(&self, state: &GlobalState, agent: usize) -> Result<ObservationRow> {
        if agent >= self.spec.n_agents {
            return Err(Error::Usage(format!("agent {agent} out of range")));
        }
        if state.values.len() != self.spec.state_len {
            return Err(Error::Input(format!("state length {} != {}", state.values.len(), self.spec.state_len)));
        }
        let off = self.offsets[agent];
        let len = self.lengths[agent] + 1;
        let gather_row: Vec<usize> = (off..off + len).collect();
        let mut mask_row = vec![0u8; self.spec.state_len];
        for &s in &gather_row {
            mask_row[s] = 1;
        }
        let mut values = vec![0.0; self.spec.obs_len];
        for (k, &s) in gather_row.iter().enumerate() {
            values[k] = state.values[s];
        }
        Ok(ObservationRow { values, mask_row, gather_row })
    }

    fn state_layout(&self) -> StateLayout {
        let segments = self
            .lengths
            .iter()
            .zip(&self.offsets)
            .enumerate()
            .map(|(i, (&l, &off))| Segment {
                name: format!("agent{i}.position"),
                start: off,
                len: l + 1,
                kind: SegmentKind::OneHot,
                agent: Some(i),
            })
            .collect();
        StateLayout { state_len: self.spec.state_len, segments }
    }

    fn liveness(&self, state: &GlobalState) -> Vec<f32> {
        self.decode_positions(&state.values)
            .iter()
            .zip(&self.lengths)
            .map(|(&p, &l)| 1.0 - p as f32 / l as f32)
            .collect()
    }

    fn describe(&self) -> String {
        format!("hallway{:?}", self.lengths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env() -> Hallway {
        Hallway::new(HallwayConfig::default()).unwrap()
    }

    #[test]
    fn spec_matches_chain_lengths() {
        let e = env();
        assert_eq!(e.spec().horizon, 20);
        assert_eq!(e.spec().state_len, 32);
        assert_eq!(e.spec().obs_len, 11);
        assert_eq!(e.spec().n_agents, 4);
    }

    #[test]
    fn reset_places_agents_on_their_chains() {
        let mut e = env();
        let r = e.reset(7).unwrap();
        assert_eq!(r.t, 0);
        assert!(!r.done);
        for (p, l) in e.positions().iter().zip([4, 6, 8, 10]) {
            assert!((1..=l).contains(p));
        }
        // own-position one-hot only
        for i in 0..4 {
            let row = r.obs.values.row(i);
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(row[e.positions()[i]], 1.0);
            assert_eq!(r.obs.raw_lengths[i], [5, 7, 9, 11][i]);
            for k in r.obs.raw_lengths[i]..11 {
                assert_eq!(row[k], 0.0);
            }
        }
        assert_eq!(e.reset(7).unwrap(), r);
    }

    #[test]
    fn simultaneous_arrival_wins() {
        let mut e = env();
        e.set_positions(&[1, 1, 1, 1]).unwrap();
        let r = e.step(&[TOWARD_GOAL; 4]).unwrap();
        assert_eq!(r.reward, 10.0);
        assert!(r.done && r.success && !r.truncated);
    }

    #[test]
    fn lone_arrival_ends_without_reward() {
        let mut e = env();
        e.set_positions(&[1, 3, 3, 3]).unwrap();
        let r = e.step(&[TOWARD_GOAL, STAY, STAY, STAY]).unwrap();
        assert_eq!(r.reward, 0.0);
        assert!(r.done && !r.success);
        assert!(matches!(e.step(&[STAY; 4]), Err(Error::Usage(_))));
    }

    #[test]
    fn moves_clamp_at_chain_end_and_horizon_truncates() {
        let mut e = env();
        e.set_positions(&[4, 6, 8, 10]).unwrap();
        let mut r = e.step(&[AWAY_FROM_GOAL; 4]).unwrap();
        assert_eq!(e.positions(), &[4, 6, 8, 10]);
        while !r.done {
            r = e.step(&[STAY; 4]).unwrap();
        }
        assert_eq!(r.t, 20);
        assert!(r.truncated);
    }

    #[test]
    fn layout_partitions_the_state() {
        let l = env().state_layout();
        assert!(l.is_partition());
        assert_eq!(l.segments.len(), 4);
        assert_eq!(l.segments.iter().map(|s| s.len).collect::<Vec<_>>(), vec![5, 7, 9, 11]);
    }
}
