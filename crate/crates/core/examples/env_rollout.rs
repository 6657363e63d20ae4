// Random rollouts in Hallway and LBF, checking the observation operator
// against the real observations at every step.

use pagnet::env::{EnvConfig, EnvName, Environment};
use pagnet::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct RolloutSummary {
    pub env: String,
    pub episodes: usize,
    pub steps: usize,
    pub wins: usize,
}

fn rollout(env: &mut dyn Environment, episodes: usize, seed: u64) -> Result<RolloutSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut steps, mut wins) = (0, 0);
    for ep in 0..episodes {
        let mut r = env.reset(seed + ep as u64)?;
        while !r.done {
            let actions: Vec<usize> = r
                .avail
                .iter()
                .map(|row| {
                    let ok: Vec<usize> = (0..row.len()).filter(|&a| row[a]).collect();
                    ok[rng.gen_range(0..ok.len())]
                })
                .collect();
            r = env.step(&actions)?;
            let vis = env.visibility(&r.state)?;
            assert_eq!(vis.apply(&r.state.values, env.spec().obs_len), r.obs.values);
            steps += 1;
        }
        wins += r.success as usize;
    }
    Ok(RolloutSummary { env: env.name().to_string(), episodes, steps, wins })
}

pub fn run_example() -> Result<Vec<RolloutSummary>> {
    let mut out = Vec::new();
    for name in [EnvName::Hallway, EnvName::Lbf] {
        let mut env = EnvConfig { name, ..EnvConfig::default() }.build()?;
        let s = env.spec().clone();
        println!(
            "{}: n={} actions={} l={} L={} horizon={} hash={}",
            env.name(),
            s.n_agents,
            s.n_actions,
            s.obs_len,
            s.state_len,
            s.horizon,
            env.env_hash()
        );
        let summary = rollout(env.as_mut(), 50, 7)?;
        println!("  {} random episodes, {} steps, {} wins", summary.episodes, summary.steps, summary.wins);
        out.push(summary);
    }
    Ok(out)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example().map(|_| ())
}
