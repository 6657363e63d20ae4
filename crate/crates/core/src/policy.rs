//! Per-agent recurrent Q networks and the monotonic value mixer.
//!
//! Each receiver reads its mixed view of all senders as a short token
//! sequence (one token per sender plus a history token carrying `h_{t-1}`),
//! runs it through post-norm transformer blocks and emits Q-values and the
//! next hidden state. The mixer combines the chosen per-agent values through
//! hypernetwork weights that are forced non-negative.

use ndarray::{Array2, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{tensor, Graph, Scalar, Tensor, Var};
use crate::comm::positional_encoding_width;
use crate::error::{Error, Result};
use crate::nn::{Bound, LayerNorm, Linear, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { dim: 128, heads: 4, layers: 2, ffn_dim: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixerConfig {
    pub embed: usize,
    pub hyper_hidden: usize,
}

impl Default for MixerConfig {
    fn default() -> Self {
        Self { embed: 32, hyper_hidden: 64 }
    }
}

#[derive(Clone, Debug)]
struct Block {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    n_agents: usize,
    n_actions: usize,
    dim: usize,
    heads: usize,
    slot_embed: Linear,
    hist_embed: Linear,
    blocks: Vec<Block>,
    hidden_head: Linear,
    q_head: Linear,
}

impl Decoder {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        n_agents: usize,
        obs_len: usize,
        n_actions: usize,
        cfg: &DecoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.dim == 0 || cfg.heads == 0 || cfg.dim % cfg.heads != 0 || cfg.ffn_dim == 0 {
            return Err(Error::Config(format!("decoder dim must be a positive multiple of heads, got {cfg:?}")));
        }
        let d = cfg.dim;
        let slot_embed = Linear::new(store, "decoder.slot_embed", obs_len, d, rng);
        let hist_embed = Linear::new(store, "decoder.hist_embed", d, d, rng);
        let blocks = (0..cfg.layers)
            .map(|b| {
                let name = format!("decoder.block{b}");
                Block {
                    q: Linear::new(store, &format!("{name}.query"), d, d, rng),
                    k: Linear::new(store, &format!("{name}.key"), d, d, rng),
                    v: Linear::new(store, &format!("{name}.value"), d, d, rng),
                    o: Linear::new(store, &format!("{name}.out"), d, d, rng),
                    ln1: LayerNorm::new(store, &format!("{name}.norm1"), d),
                    ff1: Linear::new(store, &format!("{name}.ff1"), d, cfg.ffn_dim, rng),
                    ff2: Linear::new(store, &format!("{name}.ff2"), cfg.ffn_dim, d, rng),
                    ln2: LayerNorm::new(store, &format!("{name}.norm2"), d),
                }
            })
            .collect();
        let hidden_head = Linear::new(store, "decoder.hidden_head", 2 * d, d, rng);
        let q_head = Linear::new(store, "decoder.q_head", 2 * d, n_actions, rng);
        Ok(Self { n_agents, n_actions, dim: d, heads: cfg.heads, slot_embed, hist_embed, blocks, hidden_head, q_head })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn attention<T: Scalar>(&self, g: &Graph<T>, p: &Bound, blk: &Block, h: Var) -> Var {
        let s = g.shape(h);
        let (r, t, d) = (s[0], s[1], s[2]);
        let (nh, dh) = (self.heads, d / self.heads);
        let split = |x: Var| {
            let x = g.reshape(x, &[r, t, nh, dh]);
            let x = g.permute(x, &[0, 2, 1, 3]);
            g.reshape(x, &[r * nh, t, dh])
        };
        let q = split(blk.q.forward(g, p, h));
        let k = split(blk.k.forward(g, p, h));
        let v = split(blk.v.forward(g, p, h));
        let scores = g.scale(g.bmm(q, k, true), 1.0 / (dh as f64).sqrt());
        let a = g.softmax_last(scores);
        let ctx = g.bmm(a, v, false);
        let ctx = g.reshape(ctx, &[r, nh, t, dh]);
        let ctx = g.permute(ctx, &[0, 2, 1, 3]);
        let ctx = g.reshape(ctx, &[r, t, d]);
        blk.o.forward(g, p, ctx)
    }

    /// `x [R, n, l]`, `h [R, d]`, one receiver id per row. Returns
    /// `(q [R, A], h_next [R, d])`.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var, h: Var, receivers: &[usize]) -> (Var, Var) {
        let r = receivers.len();
        let (n, d) = (self.n_agents, self.dim);
        let pe = positional_encoding_width(2 * n, d);
        let slot_pe = tensor(&[n, d], pe.rows().into_iter().take(n).flatten().map(|&v| T::of(v)).collect());
        let hist_pe = tensor(&[r, 1, d], receivers.iter().flat_map(|&i| pe.row(n + i).to_vec()).map(T::of).collect());

        let slots = self.slot_embed.forward(g, p, x);
        let slots = g.add(slots, g.constant(slot_pe));
        let hist = self.hist_embed.forward(g, p, h);
        let hist = g.reshape(hist, &[r, 1, d]);
        let hist = g.add(hist, g.constant(hist_pe));
        let mut z = g.concat(&[hist, slots], 1);
        for blk in &self.blocks {
            let a = self.attention(g, p, blk, z);
            z = blk.ln1.forward(g, p, g.add(z, a));
            let f = g.relu(blk.ff1.forward(g, p, z));
            let f = blk.ff2.forward(g, p, f);
            z = blk.ln2.forward(g, p, g.add(z, f));
        }
        let z0 = g.reshape(g.narrow(z, 1, 0, 1), &[r, d]);
        let cat = g.concat(&[z0, h], 1);
        let q = self.q_head.forward(g, p, cat);
        let h_next = g.tanh(self.hidden_head.forward(g, p, cat));
        (q, h_next)
    }
}

#[derive(Clone, Debug)]
struct Hyper {
    hidden: Linear,
    out: Linear,
}

impl Hyper {
    fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, c: usize, hidden: usize, out: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), c, hidden, rng),
            out: Linear::new(store, &format!("{name}.out"), hidden, out, rng),
        }
    }

    fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, c: Var) -> Var {
        let h = g.mish(self.hidden.forward(g, p, c));
        self.out.forward(g, p, h)
    }
}

#[derive(Clone, Debug)]
pub struct Mixer {
    n_agents: usize,
    cond_len: usize,
    embed: usize,
    w1: Hyper,
    b1: Linear,
    w2: Hyper,
    v: Hyper,
}

impl Mixer {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, n_agents: usize, cond_len: usize, cfg: &MixerConfig, rng: &mut R) -> Result<Self> {
        if cfg.embed == 0 || cfg.hyper_hidden == 0 || cond_len == 0 {
            return Err(Error::Config(format!("mixer needs positive sizes, got {cfg:?}, conditioning {cond_len}")));
        }
        let (e, hh) = (cfg.embed, cfg.hyper_hidden);
        Ok(Self {
            n_agents,
            cond_len,
            embed: e,
            w1: Hyper::new(store, "mixer.hyper_w1", cond_len, hh, n_agents * e, rng),
            b1: Linear::new(store, "mixer.hyper_b1", cond_len, e, rng),
            w2: Hyper::new(store, "mixer.hyper_w2", cond_len, hh, e, rng),
            v: Hyper::new(store, "mixer.hyper_v", cond_len, hh, 1, rng),
        })
    }

    pub fn cond_len(&self) -> usize {
        self.cond_len
    }

    /// `q [B, n]`, `cond [B, C]` to `Q_tot [B]`.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, q: Var, cond: Var) -> Var {
        let b = g.shape(q)[0];
        let (n, e) = (self.n_agents, self.embed);
        let w1 = g.abs(self.w1.forward(g, p, cond));
        let w1 = g.reshape(w1, &[b, n, e]);
        let b1 = g.reshape(self.b1.forward(g, p, cond), &[b, 1, e]);
        let q = g.reshape(q, &[b, 1, n]);
        let hidden = g.elu(g.add(g.bmm(q, w1, false), b1));
        let w2 = g.abs(self.w2.forward(g, p, cond));
        let w2 = g.reshape(w2, &[b, e, 1]);
        let v = g.reshape(self.v.forward(g, p, cond), &[b, 1, 1]);
        let out = g.add(g.bmm(hidden, w2, false), v);
        g.reshape(out, &[b])
    }
}

/// Decoder and mixer sharing one parameter group.
#[derive(Clone, Debug)]
pub struct PolicyNet<T> {
    pub store: ParamStore<T>,
    pub decoder: Decoder,
    pub mixer: Mixer,
}

impl<T: Scalar> PolicyNet<T> {
    pub fn new<R: Rng>(
        n_agents: usize,
        obs_len: usize,
        n_actions: usize,
        cond_len: usize,
        dcfg: &DecoderConfig,
        mcfg: &MixerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let decoder = Decoder::new(&mut store, n_agents, obs_len, n_actions, dcfg, rng)?;
        let mixer = Mixer::new(&mut store, n_agents, cond_len, mcfg, rng)?;
        Ok(Self { store, decoder, mixer })
    }

    /// Zeroes the Q output head so every Q-value is exactly 0.
    pub fn zero_q_head(&mut self) {
        self.decoder.q_head.zero(&mut self.store);
    }

    /// Zeroes every mixer parameter, making `Q_tot` identically 0.
    pub fn zero_mixer(&mut self) {
        let names: Vec<String> = self.store.names().to_vec();
        for (name, t) in names.iter().zip(self.store.values_mut()) {
            if name.starts_with("mixer.") {
                t.fill(T::zero());
            }
        }
    }

    /// Single-receiver step outside any training graph.
    pub fn agent_q(&self, x_i: &Array2<f32>, h_prev: &[f32], receiver: usize) -> Result<(Vec<f32>, Vec<f32>)> {
        let (n, l) = x_i.dim();
        if n != self.decoder.n_agents || h_prev.len() != self.decoder.dim || receiver >= n {
            return Err(Error::Input("agent_q input does not match the decoder".into()));
        }
        let g = Graph::<T>::no_grad();
        let p = self.store.bind(&g, false);
        let x = g.constant(tensor(&[1, n, l], x_i.iter().map(|&v| T::of(v as f64)).collect()));
        let h = g.constant(tensor(&[1, h_prev.len()], h_prev.iter().map(|&v| T::of(v as f64)).collect()));
        let (q, h) = self.decoder.forward(&g, &p, x, h, &[receiver]);
        let f = |v: Var| g.value(v).iter().map(|x| x.as_f32()).collect();
        Ok((f(q), f(h)))
    }

    pub fn mix(&self, q_chosen: &[f32], conditioning: &[f32]) -> Result<f64> {
        if q_chosen.len() != self.decoder.n_agents || conditioning.len() != self.mixer.cond_len {
            return Err(Error::Input("mix input does not match the mixer".into()));
        }
        let g = Graph::<T>::no_grad();
        let p = self.store.bind(&g, false);
        let q = g.constant(tensor(&[1, q_chosen.len()], q_chosen.iter().map(|&v| T::of(v as f64)).collect()));
        let c = g.constant(tensor(&[1, conditioning.len()], conditioning.iter().map(|&v| T::of(v as f64)).collect()));
        let out = self.mixer.forward(&g, &p, q, c);
        Ok(g.value(out)[[0]].as_f64())
    }
}

/// Index of the largest available entry (first on ties).
pub fn greedy_action(q: &[f32], avail: &[bool]) -> Result<usize> {
    q.iter()
        .zip(avail)
        .enumerate()
        .filter(|(_, (_, &ok))| ok)
        .fold(None, |best: Option<(usize, f32)>, (i, (&v, _))| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Usage("no available action".into()))
}

/// Epsilon-greedy choice restricted to available actions.
pub fn select_action<R: Rng>(q: &[f32], avail: &[bool], epsilon: f64, rng: &mut R) -> Result<usize> {
    if q.len() != avail.len() {
        return Err(Error::Usage(format!("{} Q-values for {} availability flags", q.len(), avail.len())));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Usage(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let choices: Vec<usize> = (0..avail.len()).filter(|&a| avail[a]).collect();
    if choices.is_empty() {
        return Err(Error::Usage("no available action".into()));
    }
    if rng.gen_bool(epsilon) {
        return Ok(choices[rng.gen_range(0..choices.len())]);
    }
    greedy_action(q, avail)
}

/// Padded episode batch with every network input already materialized.
///
/// Step tensors run over `t = 0..=T`; the final entry only feeds the bootstrap.
/// Row `e * n + i` of `x[t]` is receiver `i` of episode `e`.
#[derive(Clone, Debug)]
pub struct TdBatch<T> {
    pub n_agents: usize,
    pub n_actions: usize,
    /// `[b * n, n, l]` decoder inputs per step.
    pub x: Vec<Tensor<T>>,
    /// `[b, C]` mixer conditioning per step.
    pub cond: Vec<Tensor<T>>,
    /// Flattened `[b * n * A]` availability per step.
    pub avail: Vec<Vec<bool>>,
    /// `[b * n]` taken actions for `t < T`.
    pub actions: Vec<Vec<usize>>,
    /// `[b, T]`
    pub rewards: Array2<f64>,
    /// `[b, T]`: 1 where the step ended the episode for real (no bootstrap).
    pub terminated: Array2<f64>,
    /// `[b, T]`: 1 for real steps, 0 for padding.
    pub mask: Array2<f64>,
}

impl<T> TdBatch<T> {
    pub fn episodes(&self) -> usize {
        self.rewards.nrows()
    }

    pub fn steps(&self) -> usize {
        self.rewards.ncols()
    }
}

pub struct TdLoss {
    pub loss: Var,
    pub value: f64,
    /// `[b, T]` bootstrap targets.
    pub targets: Array2<f64>,
    /// `[b, T]` online `Q_tot` of the taken actions.
    pub q_taken: Array2<f64>,
}

fn receivers(b: usize, n: usize) -> Vec<usize> {
    (0..b * n).map(|r| r % n).collect()
}

/// Per-step Q-values `[b * n, A]` from unrolling a decoder over a batch.
pub fn unroll_q<T: Scalar>(g: &Graph<T>, p: &Bound, net: &PolicyNet<T>, batch: &TdBatch<T>, steps: usize) -> Vec<Var> {
    let rows = batch.episodes() * batch.n_agents;
    let ids = receivers(batch.episodes(), batch.n_agents);
    let mut h = g.constant(Tensor::zeros(IxDyn(&[rows, net.decoder.dim])));
    let mut out = Vec::with_capacity(steps);
    for t in 0..steps {
        let x = g.constant(batch.x[t].clone());
        let (q, h_next) = net.decoder.forward(g, p, x, h, &ids);
        out.push(q);
        h = h_next;
    }
    out
}

/// Bootstrap targets `y = r + gamma (1 - terminated) Q'_tot(t+1)` from the
/// frozen network, using per-agent greedy actions over available ones.
pub fn td_targets<T: Scalar>(target: &PolicyNet<T>, batch: &TdBatch<T>, gamma: f64) -> Result<Array2<f64>> {
    let (b, steps, n, a) = (batch.episodes(), batch.steps(), batch.n_agents, batch.n_actions);
    let g = Graph::<T>::no_grad();
    let p = target.store.bind(&g, false);
    let qs = unroll_q(&g, &p, target, batch, steps + 1);
    let mut y = Array2::zeros((b, steps));
    for t in 0..steps {
        let q = g.value(qs[t + 1]);
        let q = q.as_slice().expect("contiguous");
        let mut chosen = Vec::with_capacity(b * n);
        for r in 0..b * n {
            let row: Vec<f32> = q[r * a..(r + 1) * a].iter().map(|v| v.as_f32()).collect();
            let av = &batch.avail[t + 1][r * a..(r + 1) * a];
            // padded and terminal rows may have no valid action; their value is unused
            let idx = greedy_action(&row, av).unwrap_or(0);
            chosen.push(q[r * a + idx]);
        }
        let qc = g.constant(tensor(&[b, n], chosen));
        let c = g.constant(batch.cond[t + 1].clone());
        let tot = target.mixer.forward(&g, &p, qc, c);
        let tot = g.value(tot);
        for e in 0..b {
            let boot = if batch.terminated[[e, t]] > 0.0 { 0.0 } else { gamma * tot[[e]].as_f64() };
            y[[e, t]] = batch.rewards[[e, t]] + boot;
        }
    }
    Ok(y)
}

/// Padding-masked mean squared TD error of the online network.
pub fn td_loss<T: Scalar>(g: &Graph<T>, p: &Bound, online: &PolicyNet<T>, target: &PolicyNet<T>, batch: &TdBatch<T>, gamma: f64) -> Result<TdLoss> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma must be in [0, 1), got {gamma}")));
    }
    if batch.rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::Input("non-finite reward in batch".into()));
    }
    let (b, steps, n, a) = (batch.episodes(), batch.steps(), batch.n_agents, batch.n_actions);
    let y = td_targets(target, batch, gamma)?;
    let qs = unroll_q(g, p, online, batch, steps);
    let mut tots = Vec::with_capacity(steps);
    for (t, &q) in qs.iter().enumerate() {
        let idx: Vec<usize> = batch.actions[t].iter().copied().map(|act| act.min(a - 1)).collect();
        let qc = g.gather_last(q, &idx);
        let qc = g.reshape(qc, &[b, n]);
        let c = g.constant(batch.cond[t].clone());
        let tot = online.mixer.forward(g, p, qc, c);
        tots.push(g.reshape(tot, &[b, 1]));
    }
    let q_tot = g.concat(&tots, 1);
    let q_vals = g.value(q_tot).mapv(|v| v.as_f64()).into_shape_with_order((b, steps)).expect("shape");
    for e in 0..b {
        for t in 0..steps {
            if batch.mask[[e, t]] > 0.0 && !(q_vals[[e, t]] - y[[e, t]]).is_finite() {
                return Err(Error::Training(format!("non-finite TD error in batch episode {e} at step {t}")));
            }
        }
    }
    let count = batch.mask.sum().max(1.0);
    let yv = g.constant(y.mapv(T::of).into_dyn());
    let m = g.constant(batch.mask.mapv(T::of).into_dyn());
    let d = g.square(g.sub(q_tot, yv));
    let loss = g.scale(g.sum_all(g.mul(d, m)), 1.0 / count);
    let value = g.scalar(loss).as_f64();
    if !value.is_finite() {
        return Err(Error::Training("non-finite TD loss".into()));
    }
    Ok(TdLoss { loss, value, targets: y, q_taken: q_vals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_net<T: Scalar>(n: usize, l: usize, a: usize, c: usize, seed: u64) -> PolicyNet<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PolicyNet::new(n, l, a, c, &DecoderConfig { dim: 8, heads: 2, layers: 1, ffn_dim: 8 }, &MixerConfig { embed: 4, hyper_hidden: 6 }, &mut rng)
            .unwrap()
    }

    #[test]
    fn agent_q_shapes_and_purity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = PolicyNet::<f32>::new(4, 11, 3, 36, &DecoderConfig::default(), &MixerConfig::default(), &mut rng).unwrap();
        let x = Array2::from_shape_fn((4, 11), |(i, k)| ((i * 11 + k) % 5) as f32 * 0.2);
        let h = vec![0.0; 128];
        let (q, h1) = net.agent_q(&x, &h, 2).unwrap();
        assert_eq!((q.len(), h1.len()), (3, 128));
        assert_eq!(net.agent_q(&x, &h, 2).unwrap(), (q, h1));
    }

    #[test]
    fn zero_head_gives_zero_q() {
        let mut net = small_net::<f64>(2, 3, 4, 5, 1);
        net.zero_q_head();
        let x = Array2::from_elem((2, 3), 0.7f32);
        let (q, _) = net.agent_q(&x, &[0.3; 8], 1).unwrap();
        assert_eq!(q, vec![0.0; 4]);
    }

    #[test]
    fn zero_mixer_gives_zero_total() {
        let mut net = small_net::<f64>(3, 2, 2, 5, 2);
        net.zero_mixer();
        assert_eq!(net.mix(&[1.0, -4.0, 9.0], &[0.5; 5]).unwrap(), 0.0);
    }

    #[test]
    fn action_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(select_action(&[1.0, 5.0, 3.0], &[true; 3], 0.0, &mut rng).unwrap(), 1);
        assert_eq!(select_action(&[9.0, 2.0], &[false, true], 0.0, &mut rng).unwrap(), 1);
        assert!(matches!(select_action(&[1.0], &[false], 0.5, &mut rng), Err(Error::Usage(_))));
        let draws = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            counts[select_action(&[0.0, 1.0, 2.0, 3.0], &[true, false, true, true], 1.0, &mut rng).unwrap()] += 1;
        }
        assert_eq!(counts[1], 0);
        let p = 1.0 / 3.0;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for &c in &[counts[0], counts[2], counts[3]] {
            assert!((c as f64 - draws as f64 * p).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn td_target_arithmetic() {
        // one agent, one step; a zero mixer plus a constant value head gives Q'_tot = 2
        let mut target = small_net::<f64>(1, 2, 2, 3, 4);
        target.zero_mixer();
        let v_bias = target.store.names().iter().position(|n| n == "mixer.hyper_v.out.bias").unwrap();
        target.store.values_mut().nth(v_bias).unwrap().fill(2.0);
        let batch = TdBatch {
            n_agents: 1,
            n_actions: 2,
            x: vec![tensor(&[1, 1, 2], vec![0.1, 0.2]); 2],
            cond: vec![tensor(&[1, 3], vec![0.0; 3]); 2],
            avail: vec![vec![true, true]; 2],
            actions: vec![vec![0]],
            rewards: Array2::zeros((1, 1)),
            terminated: Array2::zeros((1, 1)),
            mask: Array2::ones((1, 1)),
        };
        let y = td_targets(&target, &batch, 0.99).unwrap();
        assert!((y[[0, 0]] - 1.98).abs() < 1e-12);
        let mut online = target.clone();
        let v = online.store.values_mut().nth(v_bias).unwrap();
        v.fill(1.98);
        let g = Graph::new();
        let p = online.store.bind(&g, true);
        let l = td_loss(&g, &p, &online, &target, &batch, 0.99).unwrap();
        assert!(l.value.abs() < 1e-24);

        let mut term = batch.clone();
        term.rewards[[0, 0]] = 10.0;
        term.terminated[[0, 0]] = 1.0;
        assert_eq!(td_targets(&target, &term, 0.99).unwrap()[[0, 0]], 10.0);
        assert_eq!(td_targets(&target, &batch, 0.0).unwrap()[[0, 0]], 0.0);
    }

    fn toy_batch(seed: u64) -> TdBatch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let steps = 3;
        let mut u = |len: usize| (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        TdBatch {
            n_agents: 1,
            n_actions: 2,
            x: (0..=steps).map(|_| tensor(&[2, 1, 2], u(4))).collect(),
            cond: (0..=steps).map(|_| tensor(&[2, 3], u(6))).collect(),
            avail: vec![vec![true, true, true, false]; steps + 1],
            actions: vec![vec![0, 0], vec![1, 0], vec![1, 0]],
            rewards: Array2::from_shape_vec((2, steps), u(6)).unwrap(),
            terminated: Array2::from_shape_vec((2, steps), vec![0.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap(),
            mask: Array2::from_shape_vec((2, steps), vec![1.0, 1.0, 1.0, 1.0, 1.0, 0.0]).unwrap(),
        }
    }

    #[test]
    fn td_gradients_match_finite_differences() {
        let online = small_net::<f64>(1, 2, 2, 3, 7);
        let target = small_net::<f64>(1, 2, 2, 3, 8);
        let batch = toy_batch(9);
        let eval = |store: &ParamStore<f64>| {
            let mut net = online.clone();
            net.store = store.clone();
            let g = Graph::new();
            let p = net.store.bind(&g, true);
            let l = td_loss(&g, &p, &net, &target, &batch, 0.9).unwrap();
            let grads = g.backward(l.loss);
            (l.value, net.store.grads_of(&p, &grads))
        };
        let (_, grads) = eval(&online.store);
        let h = 1e-6;
        for (k, (name, t)) in online.store.iter().enumerate() {
            for idx in [0, t.len() - 1] {
                let mut plus = online.store.clone();
                let mut minus = online.store.clone();
                plus.values_mut().nth(k).unwrap().as_slice_mut().unwrap()[idx] += h;
                minus.values_mut().nth(k).unwrap().as_slice_mut().unwrap()[idx] -= h;
                let num = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let ana = grads[k].as_slice().unwrap()[idx];
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                assert!(rel <= 1e-4 || (num - ana).abs() < 1e-9, "{name}[{idx}]: {num} vs {ana}");
            }
        }
    }

    #[test]
    fn stepwise_calls_match_the_unrolled_loss_path() {
        let net = small_net::<f32>(2, 3, 2, 4, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let steps = 4;
        let xs: Vec<Tensor<f32>> =
            (0..steps).map(|_| tensor(&[2, 2, 3], (0..12).map(|_| rng.gen_range(-1.0f32..1.0)).collect())).collect();
        let batch = TdBatch {
            n_agents: 2,
            n_actions: 2,
            x: xs.clone(),
            cond: vec![],
            avail: vec![],
            actions: vec![],
            rewards: Array2::zeros((1, steps)),
            terminated: Array2::zeros((1, steps)),
            mask: Array2::zeros((1, steps)),
        };
        let g = Graph::new();
        let p = net.store.bind(&g, false);
        let qs = unroll_q(&g, &p, &net, &batch, steps);
        for i in 0..2 {
            let mut h = vec![0.0f32; 8];
            for t in 0..steps {
                let x = xs[t].index_axis(ndarray::Axis(0), i).to_owned().into_dimensionality().unwrap();
                let (q, h_next) = net.agent_q(&x, &h, i).unwrap();
                let batched = g.value(qs[t]);
                assert_eq!(q, batched.index_axis(ndarray::Axis(0), i).iter().copied().collect::<Vec<f32>>());
                h = h_next;
            }
        }
    }

    #[test]
    fn mixer_is_monotone_in_each_agent_value() {
        let net = small_net::<f64>(3, 2, 2, 5, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let q: Vec<f32> = (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let c: Vec<f32> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let base = net.mix(&q, &c).unwrap();
            for i in 0..3 {
                let mut up = q.clone();
                up[i] += 1.0;
                assert!(net.mix(&up, &c).unwrap() >= base - 1e-12);
            }
        }
    }
}
