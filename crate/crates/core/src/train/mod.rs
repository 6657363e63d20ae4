//! Joint optimization of the weight network, the completion GAN and the
//! value-mixing policy, plus the episode loop around it.

mod replay;
mod run;

pub use replay::{read_dataset, write_dataset, EpisodeRecord, ReplayBuffer};
pub use run::{collect, heldout_d_fake, heldout_mse, pretrain, pretrain_on, random_episode, train, train_with_progress, MetricsRow, PretrainReport, RunSummary, METRICS_HEADER};

use std::sync::Arc;

use ndarray::{Array2, Axis, IxDyn};
use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{tensor, Graph, Tensor};
use crate::checkpoint::Checkpoint;
use crate::comm::{receiver_mix_graph, standard_normal, WeightNet};
use crate::config::{Config, ModelConfig, Mode, TrainConfig};
use crate::env::{EnvSpec, Environment, ObservationSet};
use crate::error::{Error, Result};
use crate::infocomp::{discriminator_loss, generator_adv_loss, masked_mse_graph, CompletionBatch, Discriminator, Generator};
use crate::nn::Adam;
use crate::policy::{select_action, td_loss, PolicyNet, TdBatch};

/// Linear schedule from `epsilon_start` to `epsilon_end`, flat afterwards.
pub fn epsilon_at(step: u64, cfg: &TrainConfig) -> f64 {
    if cfg.epsilon_anneal_steps == 0 || step >= cfg.epsilon_anneal_steps {
        return cfg.epsilon_end;
    }
    let frac = step as f64 / cfg.epsilon_anneal_steps as f64;
    cfg.epsilon_start + (cfg.epsilon_end - cfg.epsilon_start) * frac
}

/// Optimizer-side events, in the order they happen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Event {
    DStep,
    GStep,
    TdStep,
    TargetSync,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub td_loss: f64,
    pub d_loss: Option<f64>,
    pub g_loss: Option<f64>,
    pub mse_loss: Option<f64>,
    pub synced: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanStats {
    pub d_loss: f64,
    pub g_adv_loss: f64,
    pub mse_loss: f64,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
}

/// Network inputs for a flat list of timesteps, computed without gradients.
pub struct StepInputs {
    /// `[S * n, n, l]` decoder inputs, receiver-major within each sample.
    pub x: Tensor<f32>,
    /// `[S, n]` mean weight per receiver.
    pub w_mean: Array2<f32>,
    /// `[S, L]` generated states, when requested and the mode has a generator.
    pub s_hat: Option<Array2<f32>>,
}

/// A sampled timestep: `(episode, t)`.
pub type StepRef<'a> = (&'a EpisodeRecord, usize);

/// Everything the agents and the optimizer need, for one mode.
pub struct Learner {
    pub mode: Mode,
    pub spec: EnvSpec,
    pub env_hash: String,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub weight_net: WeightNet<f32>,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub policy: PolicyNet<f32>,
    pub target: PolicyNet<f32>,
    opt_w: Adam<f32>,
    opt_g: Adam<f32>,
    opt_d: Adam<f32>,
    opt_p: Adam<f32>,
    pub updates: u64,
    pub events: Vec<Event>,
}

impl Learner {
    pub fn new<R: Rng>(cfg: &Config, spec: &EnvSpec, env_hash: &str, rng: &mut R) -> Result<Self> {
        let m = &cfg.model;
        let (n, l, big_l) = (spec.n_agents, spec.obs_len, spec.state_len);
        let weight_net = WeightNet::new(n, l, &m.weight_net, rng)?;
        let generator = Generator::new(n, l, big_l, &m.generator, rng)?;
        let discriminator = Discriminator::new(big_l, &m.discriminator, rng)?;
        let policy = PolicyNet::new(n, l, spec.n_actions, big_l + n, &m.decoder, &m.mixer, rng)?;
        let (lr, clip) = (cfg.train.learning_rate, Some(cfg.train.grad_clip));
        let mut learner = Self {
            mode: cfg.mode,
            spec: spec.clone(),
            env_hash: env_hash.to_string(),
            train: cfg.train.clone(),
            model: m.clone(),
            opt_w: Adam::new(&weight_net.store, lr, clip),
            opt_g: Adam::new(&generator.store, lr, clip),
            opt_d: Adam::new(&discriminator.store, lr, clip),
            opt_p: Adam::new(&policy.store, lr, clip),
            target: policy.clone(),
            weight_net,
            generator,
            discriminator,
            policy,
            updates: 0,
            events: Vec::new(),
        };
        if cfg.mode == Mode::PagnetPt {
            let path = cfg.train.checkpoint_path.as_ref().ok_or_else(|| Error::Config("pagnet_pt needs train.checkpoint_path".into()))?;
            let ck = Checkpoint::load_for_env(path, env_hash)?;
            for prefix in ["weight_net.", "generator."] {
                if !ck.has_prefix(prefix) {
                    return Err(Error::checkpoint(prefix.trim_end_matches('.'), "pretrained checkpoint lacks these parameters"));
                }
            }
            ck.restore(&mut learner.weight_net.store)?;
            ck.restore(&mut learner.generator.store)?;
            if ck.has_prefix("discriminator.") {
                ck.restore(&mut learner.discriminator.store)?;
            }
        }
        Ok(learner)
    }

    /// Rebuilds a learner from a checkpoint, taking the architecture and mode
    /// recorded in it.
    pub fn from_checkpoint<R: Rng>(cfg: &Config, spec: &EnvSpec, env_hash: &str, ck: &Checkpoint, rng: &mut R) -> Result<Self> {
        if ck.env_hash() != env_hash {
            return Err(Error::checkpoint("env_hash", format!("checkpoint has {}, environment has {env_hash}", ck.env_hash())));
        }
        let mut c = cfg.clone();
        if let Some(model) = ck.meta.get("model") {
            c.model = serde_json::from_str(model).map_err(|e| Error::checkpoint("model", e.to_string()))?;
        }
        c.mode = ck.mode().parse().map_err(|_| Error::checkpoint("mode", format!("unknown mode {:?}", ck.mode())))?;
        if c.mode == Mode::PagnetPt {
            // parameters come from this checkpoint, not the pretrained one
            c.mode = Mode::Pagnet;
        }
        let mut learner = Self::new(&c, spec, env_hash, rng)?;
        learner.mode = ck.mode().parse()?;
        ck.restore(&mut learner.weight_net.store)?;
        ck.restore(&mut learner.generator.store)?;
        ck.restore(&mut learner.discriminator.store)?;
        ck.restore(&mut learner.policy.store)?;
        learner.target = learner.policy.clone();
        learner.updates = ck.meta.get("updates").and_then(|u| u.parse().ok()).unwrap_or(0);
        Ok(learner)
    }

    pub fn to_checkpoint(&self, step: u64) -> Checkpoint {
        let mut ck = Checkpoint::new(&self.env_hash, self.mode.as_str(), step);
        ck.meta.insert("model".into(), serde_json::to_string(&self.model).expect("model config serializes"));
        ck.meta.insert("updates".into(), self.updates.to_string());
        ck.add_store(&self.weight_net.store);
        ck.add_store(&self.generator.store);
        ck.add_store(&self.discriminator.store);
        ck.add_store(&self.policy.store);
        ck
    }

    /// Whether the adversarial update runs at all in this mode.
    pub fn gan_active(&self) -> bool {
        match self.mode {
            Mode::Pagnet | Mode::PagnetFc => true,
            Mode::PagnetPt => self.train.unfreeze_generator,
            Mode::Qmix => false,
        }
    }

    fn psi_trainable(&self) -> bool {
        self.mode == Mode::Pagnet
    }

    /// Decoder inputs, weight summaries and (optionally) generated states for
    /// `obs [S, n, l]`. Draws fresh mixing noise from `rng`.
    pub fn step_inputs<R: Rng>(&self, obs: &Tensor<f32>, want_state: bool, rng: &mut R) -> StepInputs {
        let s = obs.shape();
        let (ns, n, l) = (s[0], s[1], s[2]);
        if self.mode == Mode::Qmix {
            let mut x = Tensor::zeros(IxDyn(&[ns * n, n, l]));
            for b in 0..ns {
                for i in 0..n {
                    for k in 0..l {
                        x[[b * n + i, i, k]] = obs[[b, i, k]];
                    }
                }
            }
            // no messages reach the policy; a trace still shows what the
            // generator makes of the raw observations
            let s_hat = want_state.then(|| {
                let g = Graph::<f32>::no_grad();
                let gp = self.generator.store.bind(&g, false);
                let s = self.generator.forward(&g, &gp, g.constant(obs.clone()));
                g.value(s).as_ref().clone().into_dimensionality().expect("2d")
            });
            return StepInputs { x, w_mean: Array2::zeros((ns, n)), s_hat };
        }
        let g = Graph::<f32>::no_grad();
        let msgs = g.constant(obs.clone());
        let w = if self.mode.uses_weight_net() {
            let wp = self.weight_net.store.bind(&g, false);
            self.weight_net.forward(&g, &wp, msgs, None::<&mut R>).w_rows
        } else {
            g.constant(Tensor::zeros(IxDyn(&[ns, n, 1, l])))
        };
        let eps = g.constant(standard_normal(rng, &[ns, n, l]));
        let mixed = receiver_mix_graph(&g, msgs, w, eps);
        let x = g.value(g.reshape(mixed, &[ns * n, n, l])).as_ref().clone();
        let w_mean = g.value(g.mean_axis(w, 3)).as_ref().clone().into_shape_with_order((ns, n)).expect("shape");
        let s_hat = want_state.then(|| {
            let gp = self.generator.store.bind(&g, false);
            let agg = g.mean_axis(mixed, 1);
            let s = self.generator.forward(&g, &gp, agg);
            g.value(s).as_ref().clone().into_dimensionality().expect("2d")
        });
        StepInputs { x, w_mean, s_hat }
    }

    /// Runs one episode with epsilon-greedy actions. `generated` receives the
    /// completed state for every acting step when supplied.
    pub fn run_episode<R: Rng>(
        &self,
        env: &mut dyn Environment,
        epsilon: f64,
        seed: u64,
        rng: &mut R,
        mut generated: Option<&mut Vec<Vec<f32>>>,
    ) -> Result<EpisodeRecord> {
        let (n, l, d) = (self.spec.n_agents, self.spec.obs_len, self.policy.decoder.dim());
        let mut r = env.reset(seed)?;
        let mut rec = empty_record();
        push_view(&mut rec, env, &r)?;
        let mut h = Tensor::<f32>::zeros(IxDyn(&[n, d]));
        let ids: Vec<usize> = (0..n).collect();
        while !r.done {
            let obs = r.obs.values.clone().into_shape_with_order(IxDyn(&[1, n, l])).expect("shape");
            let inputs = self.step_inputs(&obs, generated.is_some(), rng);
            if let (Some(out), Some(s)) = (generated.as_deref_mut(), &inputs.s_hat) {
                out.push(s.row(0).to_vec());
            }
            let g = Graph::<f32>::no_grad();
            let p = self.policy.store.bind(&g, false);
            let (q, h_next) = self.policy.decoder.forward(&g, &p, g.constant(inputs.x), g.constant(h), &ids);
            h = g.value(h_next).as_ref().clone();
            let q = g.value(q);
            let mut actions = Vec::with_capacity(n);
            for i in 0..n {
                let qi: Vec<f32> = q.index_axis(Axis(0), i).iter().copied().collect();
                actions.push(select_action(&qi, &r.avail[i], epsilon, rng)?);
            }
            r = env.step(&actions)?;
            rec.actions.push(actions);
            rec.rewards.push(r.reward);
            rec.mean_w.push(inputs.w_mean.mean().unwrap_or(0.0));
            push_view(&mut rec, env, &r)?;
        }
        rec.terminated = !r.truncated;
        rec.success = r.success;
        Ok(rec)
    }

    /// One discriminator step followed by one generator (+ weight network)
    /// step on the given timesteps.
    pub fn gan_update<R: Rng>(&mut self, steps: &[StepRef], rng: &mut R) -> Result<GanStats> {
        let samples: Vec<_> = steps.iter().map(|&(e, t)| (&e.obs[t], &e.states[t], &e.gather[t][..])).collect();
        let batch = CompletionBatch::<f32>::from_samples(&samples);
        let (ns, n, l) = (batch.len(), self.spec.n_agents, self.spec.obs_len);
        let psi = self.psi_trainable();
        let g = Graph::<f32>::new();
        let wp = self.weight_net.store.bind(&g, psi);
        let gp = self.generator.store.bind(&g, true);
        let dp = self.discriminator.store.bind(&g, true);
        let msgs = g.constant(batch.obs.clone());
        let w = if self.mode.uses_weight_net() {
            self.weight_net.forward(&g, &wp, msgs, Some(&mut *rng)).w_rows
        } else {
            g.constant(Tensor::zeros(IxDyn(&[ns, n, 1, l])))
        };
        let eps = g.constant(standard_normal(rng, &[ns, n, l]));
        let s_hat = self.generator.complete(&g, &gp, msgs, w, eps);
        let real = g.constant(batch.states.clone());

        let dl = discriminator_loss(&g, &self.discriminator, &dp, real, s_hat);
        let d_loss = g.scalar(dl.d_loss) as f64;
        if !d_loss.is_finite() {
            return Err(Error::Training(format!("non-finite discriminator loss at update {}", self.updates)));
        }
        let grads = g.backward(dl.d_loss);
        let dg = self.discriminator.store.grads_of(&dp, &grads);
        self.opt_d.step(&mut self.discriminator.store, &dg);
        self.events.push(Event::DStep);

        let dp_new = self.discriminator.store.bind(&g, false);
        let adv = generator_adv_loss(&g, &self.discriminator, &dp_new, s_hat);
        let mse = masked_mse_graph(&g, s_hat, g.constant(batch.count.clone()), g.constant(batch.target.clone()));
        let combined = g.add(mse, g.scale(adv, self.train.alpha));
        let (adv_v, mse_v) = (g.scalar(adv) as f64, g.scalar(mse) as f64);
        if !adv_v.is_finite() || !mse_v.is_finite() {
            return Err(Error::Training(format!("non-finite generator loss at update {}", self.updates)));
        }
        let grads = g.backward(combined);
        let gg = self.generator.store.grads_of(&gp, &grads);
        self.opt_g.step(&mut self.generator.store, &gg);
        if psi {
            let wg = self.weight_net.store.grads_of(&wp, &grads);
            self.opt_w.step(&mut self.weight_net.store, &wg);
        }
        self.events.push(Event::GStep);
        Ok(GanStats { d_loss, g_adv_loss: adv_v, mse_loss: mse_v, d_real_mean: dl.d_real_mean, d_fake_mean: dl.d_fake_mean })
    }

    /// Assembles the TD batch: decoder inputs from the current weight network
    /// and mixer conditioning from the current generator (or the true state
    /// for the communication-free baseline).
    pub fn td_batch<R: Rng>(&self, episodes: &[Arc<EpisodeRecord>], rng: &mut R) -> TdBatch<f32> {
        let (b, n, l, big_l, a) = (episodes.len(), self.spec.n_agents, self.spec.obs_len, self.spec.state_len, self.spec.n_actions);
        let steps = episodes.iter().map(|e| e.len()).max().unwrap_or(0);
        let ns = b * (steps + 1);
        let mut obs = Vec::with_capacity(ns * n * l);
        for t in 0..=steps {
            for e in episodes {
                obs.extend(e.obs[t.min(e.len())].values.iter().copied());
            }
        }
        let obs = tensor(&[ns, n, l], obs);
        let inputs = self.step_inputs(&obs, self.mode.uses_generator(), rng);
        let cond_len = big_l + n;
        let mut x = Vec::with_capacity(steps + 1);
        let mut cond = Vec::with_capacity(steps + 1);
        let mut avail = Vec::with_capacity(steps + 1);
        let mut actions = Vec::with_capacity(steps);
        let flat = inputs.x.as_slice().expect("contiguous");
        let per_t = b * n * n * l;
        for t in 0..=steps {
            x.push(tensor(&[b * n, n, l], flat[t * per_t..(t + 1) * per_t].to_vec()));
            let mut c = Vec::with_capacity(b * cond_len);
            for (ei, e) in episodes.iter().enumerate() {
                let s = t * b + ei;
                let tt = t.min(e.len());
                match &inputs.s_hat {
                    Some(sh) => c.extend(sh.row(s).iter().copied()),
                    None => c.extend(e.states[tt].values.iter().copied()),
                }
                c.extend(inputs.w_mean.row(s).iter().copied());
            }
            cond.push(tensor(&[b, cond_len], c));
            avail.push(episodes.iter().flat_map(|e| e.avail[t.min(e.len())].iter().flatten().copied()).collect::<Vec<bool>>());
            if t < steps {
                actions.push(episodes.iter().flat_map(|e| if t < e.len() { e.actions[t].clone() } else { vec![0; n] }).collect());
            }
        }
        let mut rewards = Array2::zeros((b, steps));
        let mut terminated = Array2::zeros((b, steps));
        let mut mask = Array2::zeros((b, steps));
        for (ei, e) in episodes.iter().enumerate() {
            for t in 0..e.len() {
                rewards[[ei, t]] = e.rewards[t] as f64;
                mask[[ei, t]] = 1.0;
            }
            if e.terminated && !e.is_empty() {
                terminated[[ei, e.len() - 1]] = 1.0;
            }
        }
        debug_assert!(avail.iter().all(|v| v.len() == b * n * a));
        TdBatch { n_agents: n, n_actions: a, x, cond, avail, actions, rewards, terminated, mask }
    }

    /// One full iteration on a sampled episode batch: adversarial steps,
    /// TD step, then the periodic target sync.
    pub fn update<R: Rng>(&mut self, episodes: &[Arc<EpisodeRecord>], rng: &mut R) -> Result<UpdateStats> {
        let mut stats = UpdateStats::default();
        if self.gan_active() {
            let mut all: Vec<StepRef> = Vec::new();
            for e in episodes {
                all.extend((0..=e.len()).map(|t| (e.as_ref(), t)));
            }
            let k = self.train.gan_samples;
            let chosen: Vec<StepRef> =
                if k == 0 || k >= all.len() { all } else { sample(rng, all.len(), k).into_iter().map(|i| all[i]).collect() };
            let gs = self.gan_update(&chosen, rng)?;
            stats.d_loss = Some(gs.d_loss);
            stats.g_loss = Some(gs.g_adv_loss);
            stats.mse_loss = Some(gs.mse_loss);
        }
        let (td, synced) = self.td_update(episodes, rng)?;
        stats.td_loss = td;
        stats.synced = synced;
        Ok(stats)
    }

    /// TD step on the policy group, followed by the periodic target sync.
    /// Returns the loss and whether the target was synced.
    pub fn td_update<R: Rng>(&mut self, episodes: &[Arc<EpisodeRecord>], rng: &mut R) -> Result<(f64, bool)> {
        let batch = self.td_batch(episodes, rng);
        let g = Graph::<f32>::new();
        let p = self.policy.store.bind(&g, true);
        let tl = td_loss(&g, &p, &self.policy, &self.target, &batch, self.train.gamma)
            .map_err(|e| Error::Training(format!("update {}: {e}", self.updates)))?;
        let grads = g.backward(tl.loss);
        let pg = self.policy.store.grads_of(&p, &grads);
        self.opt_p.step(&mut self.policy.store, &pg);
        self.events.push(Event::TdStep);
        self.updates += 1;
        let synced = self.updates % self.train.target_sync_interval == 0;
        if synced {
            self.target = self.policy.clone();
            self.events.push(Event::TargetSync);
        }
        Ok((tl.value, synced))
    }
}

fn empty_record() -> EpisodeRecord {
    EpisodeRecord {
        obs: Vec::new(),
        states: Vec::new(),
        gather: Vec::new(),
        avail: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
        mean_w: Vec::new(),
        terminated: false,
        success: false,
    }
}

fn push_view(rec: &mut EpisodeRecord, env: &dyn Environment, r: &crate::env::StepResult) -> Result<()> {
    rec.gather.push(env.visibility(&r.state)?.gather);
    rec.obs.push(r.obs.clone());
    rec.states.push(r.state.clone());
    rec.avail.push(r.avail.clone());
    Ok(())
}

/// Flattens an observation set into a `[1, n, l]` tensor.
pub fn obs_tensor(obs: &ObservationSet) -> Tensor<f32> {
    let (n, l) = obs.values.dim();
    obs.values.clone().into_shape_with_order(IxDyn(&[1, n, l])).expect("shape")
}
