//! Episode records, the FIFO replay buffer and JSON-lines datasets.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{GlobalState, ObservationSet, VisibilityMask};
use crate::error::{Error, Result};

/// One trajectory. Per-step vectors over observations cover `t = 0..=T`
/// (the last entry is the post-terminal view used for bootstrapping); action
/// and reward vectors cover `t = 0..T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub obs: Vec<ObservationSet>,
    pub states: Vec<GlobalState>,
    /// Observer gather map per step, decoded from the true state.
    pub gather: Vec<Vec<Vec<usize>>>,
    pub avail: Vec<Vec<Vec<bool>>>,
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<f32>,
    /// Mean communication weight per step.
    pub mean_w: Vec<f32>,
    /// True when the episode ended by reaching a terminal state rather than the horizon.
    pub terminated: bool,
    pub success: bool,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn episode_return(&self) -> f32 {
        self.rewards.iter().sum()
    }

    pub fn visibility(&self, t: usize) -> VisibilityMask {
        let state_len = self.states[t].values.len();
        let mut mask = ndarray::Array2::zeros((self.gather[t].len(), state_len));
        for (i, row) in self.gather[t].iter().enumerate() {
            for &s in row {
                mask[[i, s]] = 1;
            }
        }
        VisibilityMask { mask, gather: self.gather[t].clone() }
    }

    /// Structural consistency of the per-step vectors.
    pub fn validate(&self) -> Result<()> {
        let t = self.actions.len();
        let ok = self.obs.len() == t + 1
            && self.states.len() == t + 1
            && self.gather.len() == t + 1
            && self.avail.len() == t + 1
            && self.rewards.len() == t
            && self.mean_w.len() == t;
        if !ok {
            return Err(Error::Input(format!("episode record has inconsistent step counts (T={t})")));
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::Input("episode record has a non-finite reward".into()));
        }
        Ok(())
    }
}

/// Bounded FIFO of episodes.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Arc<EpisodeRecord>>,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("buffer_capacity must be positive".into()));
        }
        Ok(Self { capacity, episodes: VecDeque::with_capacity(capacity.min(1 << 16)), inserted: 0 })
    }

    pub fn push(&mut self, episode: EpisodeRecord) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(Arc::new(episode));
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total insertions since creation.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    /// Episodes from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &EpisodeRecord> {
        self.episodes.iter().map(|e| e.as_ref())
    }

    /// `k` distinct episodes chosen uniformly at random.
    pub fn sample<R: Rng>(&self, rng: &mut R, k: usize) -> Result<Vec<Arc<EpisodeRecord>>> {
        if k > self.episodes.len() {
            return Err(Error::Usage(format!("cannot sample {k} episodes from {}", self.episodes.len())));
        }
        Ok(sample(rng, self.episodes.len(), k).into_iter().map(|i| self.episodes[i].clone()).collect())
    }
}

pub fn write_dataset(path: &Path, episodes: &[EpisodeRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in episodes {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<EpisodeRecord>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: EpisodeRecord =
            serde_json::from_str(&line).map_err(|err| Error::Input(format!("{}:{}: {err}", path.display(), i + 1)))?;
        e.validate()?;
        out.push(e);
    }
    if out.is_empty() {
        return Err(Error::Input(format!("{} holds no episodes", path.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn dummy(tag: usize) -> EpisodeRecord {
        EpisodeRecord {
            obs: vec![ObservationSet { values: Array2::from_elem((1, 1), tag as f32), raw_lengths: vec![1] }; 2],
            states: vec![GlobalState::real(vec![tag as f32]); 2],
            gather: vec![vec![vec![0]]; 2],
            avail: vec![vec![vec![true]]; 2],
            actions: vec![vec![0]],
            rewards: vec![tag as f32],
            mean_w: vec![0.0],
            terminated: true,
            success: false,
        }
    }

    #[test]
    fn fifo_eviction() {
        let mut b = ReplayBuffer::new(5).unwrap();
        for i in 0..8 {
            b.push(dummy(i));
        }
        let tags: Vec<f32> = b.iter().map(|e| e.rewards[0]).collect();
        assert_eq!(tags, vec![3.0, 4.0, 5.0, 6.0, 7.0]);
        assert_eq!(b.inserted(), 8);
    }

    #[test]
    fn sampling_is_without_replacement() {
        let mut b = ReplayBuffer::new(10).unwrap();
        for i in 0..10 {
            b.push(dummy(i));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = b.sample(&mut rng, 10).unwrap();
        let mut tags: Vec<i32> = s.iter().map(|e| e.rewards[0] as i32).collect();
        tags.sort();
        assert_eq!(tags, (0..10).collect::<Vec<_>>());
        assert!(b.sample(&mut rng, 11).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let eps = vec![dummy(1), dummy(2)];
        write_dataset(&p, &eps).unwrap();
        assert_eq!(read_dataset(&p).unwrap(), eps);
    }
}
