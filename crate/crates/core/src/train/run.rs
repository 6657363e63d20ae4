use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{empty_record, epsilon_at, push_view, EpisodeRecord, GanStats, Learner, ReplayBuffer, StepRef};
use crate::autodiff::{tensor, Graph};
use crate::checkpoint::Checkpoint;
use crate::config::{Config, Mode};
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::eval::evaluate_learner;
use crate::infocomp::dense_targets;

pub const METRICS_HEADER: [&str; 13] = [
    "step",
    "episode",
    "mode",
    "seed",
    "epsilon",
    "td_loss",
    "d_loss",
    "g_loss",
    "mse_loss",
    "train_return",
    "test_return",
    "test_win_rate",
    "mean_W",
];

/// One evaluation pause. Loss and training columns average everything since
/// the previous row and are empty when nothing happened in between.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub episode: u64,
    pub mode: String,
    pub seed: u64,
    pub epsilon: f64,
    pub td_loss: Option<f64>,
    pub d_loss: Option<f64>,
    pub g_loss: Option<f64>,
    pub mse_loss: Option<f64>,
    pub train_return: Option<f64>,
    pub test_return: Option<f64>,
    pub test_win_rate: Option<f64>,
    #[serde(rename = "mean_W")]
    pub mean_w: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub env_steps: u64,
    pub episodes: u64,
    pub updates: u64,
    pub last_win_rate: f64,
    pub best_win_rate: f64,
    pub last_test_return: f64,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

#[derive(Default)]
struct Mean {
    sum: f64,
    n: u64,
}

impl Mean {
    fn add(&mut self, v: Option<f64>) {
        if let Some(v) = v {
            self.sum += v;
            self.n += 1;
        }
    }

    fn take(&mut self) -> Option<f64> {
        let out = (self.n > 0).then(|| self.sum / self.n as f64);
        *self = Mean::default();
        out
    }
}

/// Seed for the `k`-th evaluation pause of a run.
fn eval_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

pub fn train(cfg: &Config) -> Result<RunSummary> {
    train_with_progress(cfg, &mut |_| {})
}

/// The full loop: rollout, store, update once the buffer holds a batch,
/// checkpoint at each target sync, and evaluate every `eval_interval` env
/// steps. `progress` sees every metrics row as it is written.
pub fn train_with_progress(cfg: &Config, progress: &mut dyn FnMut(&MetricsRow)) -> Result<RunSummary> {
    cfg.validate()?;
    let mut env = cfg.env.build()?;
    let mut eval_env = cfg.env.build()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml())?;
    let metrics_path = cfg.out_dir.join("metrics.csv");
    let checkpoint_path = cfg.out_dir.join("checkpoint.pagn");
    let mut metrics = csv::Writer::from_path(&metrics_path)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let hash = env.env_hash();
    let mut learner = Learner::new(cfg, env.spec(), &hash, &mut rng)?;
    let mut buffer = ReplayBuffer::new(cfg.train.buffer_capacity)?;
    let interval = cfg.eval_interval();

    let (mut env_steps, mut episodes, mut evals) = (0u64, 0u64, 0u64);
    let (mut next_eval, mut last_eval_step) = (0u64, None);
    let (mut ret, mut w, mut td, mut dl, mut gl, mut ml) = (Mean::default(), Mean::default(), Mean::default(), Mean::default(), Mean::default(), Mean::default());
    let (mut last_win, mut best_win, mut last_return) = (0.0, 0.0, 0.0);
    let mut write_eval = |learner: &Learner, env_steps: u64, episodes: u64, evals: &mut u64, acc: [&mut Mean; 6]| -> Result<MetricsRow> {
        let report = evaluate_learner(learner, eval_env.as_mut(), cfg.train.eval_episodes, eval_seed(cfg.seed, *evals))?;
        *evals += 1;
        let [ret, w, td, dl, gl, ml] = acc;
        let row = MetricsRow {
            step: env_steps,
            episode: episodes,
            mode: cfg.mode.to_string(),
            seed: cfg.seed,
            epsilon: epsilon_at(env_steps, &cfg.train),
            td_loss: td.take(),
            d_loss: dl.take(),
            g_loss: gl.take(),
            mse_loss: ml.take(),
            train_return: ret.take(),
            test_return: Some(report.mean_return),
            test_win_rate: Some(report.win_rate),
            mean_w: w.take(),
        };
        metrics.serialize(&row)?;
        metrics.flush()?;
        Ok(row)
    };

    loop {
        if env_steps >= next_eval {
            let row = write_eval(&learner, env_steps, episodes, &mut evals, [&mut ret, &mut w, &mut td, &mut dl, &mut gl, &mut ml])?;
            last_win = row.test_win_rate.unwrap_or(0.0);
            best_win = f64::max(best_win, last_win);
            last_return = row.test_return.unwrap_or(0.0);
            progress(&row);
            last_eval_step = Some(env_steps);
            while next_eval <= env_steps {
                next_eval += interval;
            }
        }
        if env_steps >= cfg.train.total_env_steps {
            break;
        }
        let eps = epsilon_at(env_steps, &cfg.train);
        let seed = rng.gen();
        let rec = learner.run_episode(env.as_mut(), eps, seed, &mut rng, None)?;
        env_steps += rec.len() as u64;
        episodes += 1;
        ret.add(Some(rec.episode_return() as f64));
        w.add(Some(rec.mean_w.iter().map(|&v| v as f64).sum::<f64>() / rec.len().max(1) as f64));
        buffer.push(rec);
        if buffer.len() >= cfg.train.batch_size && episodes % cfg.train.episodes_per_update as u64 == 0 {
            let batch = buffer.sample(&mut rng, cfg.train.batch_size)?;
            let stats = learner.update(&batch, &mut rng)?;
            td.add(Some(stats.td_loss));
            dl.add(stats.d_loss);
            gl.add(stats.g_loss);
            ml.add(stats.mse_loss);
            if stats.synced {
                learner.to_checkpoint(env_steps).save(&checkpoint_path)?;
            }
        }
    }
    if last_eval_step != Some(env_steps) {
        let row = write_eval(&learner, env_steps, episodes, &mut evals, [&mut ret, &mut w, &mut td, &mut dl, &mut gl, &mut ml])?;
        last_win = row.test_win_rate.unwrap_or(0.0);
        best_win = f64::max(best_win, last_win);
        last_return = row.test_return.unwrap_or(0.0);
        progress(&row);
    }
    learner.to_checkpoint(env_steps).save(&checkpoint_path)?;
    Ok(RunSummary {
        mode: cfg.mode,
        seed: cfg.seed,
        env_steps,
        episodes,
        updates: learner.updates,
        last_win_rate: last_win,
        best_win_rate: best_win,
        last_test_return: last_return,
        metrics_path,
        checkpoint_path,
    })
}

/// Uniformly random actions among the available ones.
pub fn random_episode<R: Rng>(env: &mut dyn Environment, seed: u64, rng: &mut R) -> Result<EpisodeRecord> {
    let mut r = env.reset(seed)?;
    let mut rec = empty_record();
    push_view(&mut rec, env, &r)?;
    while !r.done {
        let actions = r
            .avail
            .iter()
            .map(|av| {
                let ok: Vec<usize> = (0..av.len()).filter(|&a| av[a]).collect();
                ok.choose(rng).copied().ok_or_else(|| Error::Usage("no available action".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        r = env.step(&actions)?;
        rec.actions.push(actions);
        rec.rewards.push(r.reward);
        rec.mean_w.push(0.0);
        push_view(&mut rec, env, &r)?;
    }
    rec.terminated = !r.truncated;
    rec.success = r.success;
    Ok(rec)
}

/// Random-policy episodes for offline pretraining.
pub fn collect(cfg: &Config, episodes: usize) -> Result<Vec<EpisodeRecord>> {
    let mut env = cfg.env.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..episodes).map(|_| {
        let seed = rng.gen();
        random_episode(env.as_mut(), seed, &mut rng)
    })
    .collect()
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub checkpoint: Checkpoint,
    /// `(update, held-out masked MSE)`, starting before the first update.
    pub heldout_mse: Vec<(usize, f64)>,
    pub train_samples: usize,
    pub heldout_samples: usize,
    /// Mean discriminator output on generated held-out states after training.
    pub heldout_d_fake: Option<f64>,
    pub last_update: Option<GanStats>,
}

/// Mean masked reconstruction error on fixed samples with fixed noise.
pub fn heldout_mse(learner: &Learner, steps: &[StepRef], noise_seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let (n, l, big_l) = (learner.spec.n_agents, learner.spec.obs_len, learner.spec.state_len);
    let mut total = 0.0;
    for chunk in steps.chunks(512) {
        let obs: Vec<f32> = chunk.iter().flat_map(|&(e, t)| e.obs[t].values.iter().copied()).collect();
        let inputs = learner.step_inputs(&tensor(&[chunk.len(), n, l], obs), true, &mut rng);
        let s_hat = inputs.s_hat.expect("generator modes produce states");
        for (k, &(e, t)) in chunk.iter().enumerate() {
            let (count, target) = dense_targets(&e.obs[t], &e.gather[t], big_l);
            total += (0..big_l).map(|s| count[s] as f64 * (s_hat[[k, s]] as f64 - target[s] as f64).powi(2)).sum::<f64>();
        }
    }
    total / steps.len().max(1) as f64
}

/// Mean discriminator output on the generated states for fixed samples.
pub fn heldout_d_fake(learner: &Learner, steps: &[StepRef], noise_seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let (n, l) = (learner.spec.n_agents, learner.spec.obs_len);
    let mut total = 0.0;
    for chunk in steps.chunks(512) {
        let obs: Vec<f32> = chunk.iter().flat_map(|&(e, t)| e.obs[t].values.iter().copied()).collect();
        let inputs = learner.step_inputs(&tensor(&[chunk.len(), n, l], obs), true, &mut rng);
        let s_hat = inputs.s_hat.expect("generator modes produce states");
        let g = Graph::<f32>::no_grad();
        let dp = learner.discriminator.store.bind(&g, false);
        let d = learner.discriminator.forward(&g, &dp, g.constant(s_hat.into_dyn()));
        total += g.value(d).iter().map(|&v| v as f64).sum::<f64>();
    }
    total / steps.len().max(1) as f64
}

/// Adversarial completion training on an offline dataset; no TD term.
pub fn pretrain(cfg: &Config, dataset: &[EpisodeRecord]) -> Result<PretrainReport> {
    let env = cfg.env.build()?;
    pretrain_on(env.as_ref(), cfg, dataset)
}

/// [`pretrain`] against an explicit environment (its spec and hash), ignoring
/// `cfg.env`.
pub fn pretrain_on(env: &dyn Environment, cfg: &Config, dataset: &[EpisodeRecord]) -> Result<PretrainReport> {
    let spec = env.spec().clone();
    for (i, e) in dataset.iter().enumerate() {
        e.validate()?;
        let o = &e.obs[0];
        if o.n_agents() != spec.n_agents || o.obs_len() != spec.obs_len || e.states[0].values.len() != spec.state_len {
            return Err(Error::Config(format!(
                "dataset episode {i} has observations {}x{} and state {}, environment expects {}x{} and {}",
                o.n_agents(),
                o.obs_len(),
                e.states[0].values.len(),
                spec.n_agents,
                spec.obs_len,
                spec.state_len
            )));
        }
    }
    let mut c = cfg.clone();
    c.mode = Mode::Pagnet;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut learner = Learner::new(&c, &spec, &env.env_hash(), &mut rng)?;
    let mut all: Vec<StepRef> = dataset.iter().flat_map(|e| (0..=e.len()).map(move |t| (e, t))).collect();
    all.shuffle(&mut rng);
    let n_held = if cfg.train.heldout_fraction > 0.0 { ((all.len() as f64 * cfg.train.heldout_fraction) as usize).max(1) } else { 0 };
    if n_held >= all.len() {
        return Err(Error::Input("dataset too small for a held-out split".into()));
    }
    let (held, train_set) = all.split_at(n_held);
    let noise_seed = cfg.seed ^ 0x6865_6C64;
    let mut curve = Vec::new();
    if !held.is_empty() {
        curve.push((0, heldout_mse(&learner, held, noise_seed)));
    }
    let every = (cfg.train.pretrain_updates / 100).max(1);
    let mut last_update = None;
    for u in 1..=cfg.train.pretrain_updates {
        let k = cfg.train.pretrain_batch.min(train_set.len());
        let idx = rand::seq::index::sample(&mut rng, train_set.len(), k);
        let batch: Vec<StepRef> = idx.into_iter().map(|i| train_set[i]).collect();
        last_update = Some(learner.gan_update(&batch, &mut rng)?);
        if !held.is_empty() && (u % every == 0 || u == cfg.train.pretrain_updates) {
            curve.push((u, heldout_mse(&learner, held, noise_seed)));
        }
    }
    let mut checkpoint = learner.to_checkpoint(0);
    checkpoint.meta.insert("pretrain_updates".into(), cfg.train.pretrain_updates.to_string());
    let heldout_d_fake = (!held.is_empty()).then(|| heldout_d_fake(&learner, held, noise_seed));
    Ok(PretrainReport {
        checkpoint,
        heldout_mse: curve,
        train_samples: train_set.len(),
        heldout_samples: held.len(),
        heldout_d_fake,
        last_update,
    })
}
