//! Global-state completion from weighted local observations.
//!
//! The generator is a 1d U-Net over the (zero padded) observation axis with
//! one input channel per agent; the discriminator scores whole state vectors.
//! Training combines the masked reconstruction error on the coordinates the
//! agents actually observe with a non-saturating adversarial term.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, Array3, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{conv1d_out_len, conv_t1d_out_len, tensor, Graph, Scalar, Tensor, Var};
use crate::comm::{receiver_mix_graph, MixedInfo};
use crate::env::{GlobalState, ObservationSet, VisibilityMask};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv1d, ConvTranspose1d, Linear, ParamStore};

/// Clamp applied to discriminator outputs before taking logs.
pub const D_CLAMP: f64 = 1e-7;

/// Sender-wise mean over receivers: row `j` is the mean of `mixed[i, j, :]`.
pub fn aggregate_input(mixed: &MixedInfo) -> Array2<f32> {
    mixed.values.mean_axis(Axis(0)).expect("at least one receiver")
}

/// Squared Euclidean distance between the observed coordinates of a state and
/// the observations (summed over agents, not averaged).
pub fn masked_mse(generated: &GlobalState, obs: &ObservationSet, vis: &VisibilityMask) -> f64 {
    let mut total = 0.0;
    for (i, row) in vis.gather.iter().enumerate() {
        for (k, &s) in row.iter().enumerate() {
            let d = generated.values[s] as f64 - obs.values[[i, k]] as f64;
            total += d * d;
        }
    }
    total
}

/// Dense form of the observation operator for one sample: how many agents see
/// each state entry, and the observed value there.
pub fn dense_targets(obs: &ObservationSet, gather: &[Vec<usize>], state_len: usize) -> (Vec<f32>, Vec<f32>) {
    let mut count = vec![0.0f32; state_len];
    let mut target = vec![0.0f32; state_len];
    for (i, row) in gather.iter().enumerate() {
        for (k, &s) in row.iter().enumerate() {
            count[s] += 1.0;
            target[s] = obs.values[[i, k]];
        }
    }
    (count, target)
}

/// Batched masked MSE on the tape: `mean_b sum_s count[b,s] (s_hat - target)^2`.
pub fn masked_mse_graph<T: Scalar>(g: &Graph<T>, s_hat: Var, count: Var, target: Var) -> Var {
    let d = g.sub(s_hat, target);
    let d = g.square(d);
    let d = g.mul(d, count);
    let per = g.sum_axis(d, 1);
    g.mean_all(per)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Channel widths at full, half and quarter resolution.
    pub widths: [usize; 3],
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { widths: [32, 64, 128] }
    }
}

#[derive(Clone, Debug)]
struct ResPair {
    a: Conv1d,
    b: Conv1d,
}

impl ResPair {
    fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, c_in: usize, c: usize, rng: &mut R) -> Self {
        Self {
            a: Conv1d::new(store, &format!("{name}.conv0"), c_in, c, 5, 1, 2, rng),
            b: Conv1d::new(store, &format!("{name}.conv1"), c, c, 5, 1, 2, rng),
        }
    }
}

/// One row of the generator's layer ladder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    pub kernel: usize,
    pub stride: usize,
    pub len_in: usize,
    pub len_out: usize,
    pub c_out: usize,
}

pub struct Generator<T> {
    pub store: ParamStore<T>,
    n_agents: usize,
    obs_len: usize,
    padded_len: usize,
    state_len: usize,
    widths: [usize; 3],
    encoder: Linear,
    down: [ResPair; 3],
    down_sample: [Conv1d; 2],
    mid: ResPair,
    up: [ResPair; 3],
    up_sample: [ConvTranspose1d; 2],
    dec_conv: Conv1d,
    dec_point: Conv1d,
    dec_linear: Linear,
    calls: AtomicU64,
}

impl<T: Scalar> Clone for Generator<T> {
    fn clone(&self) -> Self {
        Self {
            store: self.store.clone(),
            n_agents: self.n_agents,
            obs_len: self.obs_len,
            padded_len: self.padded_len,
            state_len: self.state_len,
            widths: self.widths,
            encoder: self.encoder.clone(),
            down: self.down.clone(),
            down_sample: self.down_sample.clone(),
            mid: self.mid.clone(),
            up: self.up.clone(),
            up_sample: self.up_sample.clone(),
            dec_conv: self.dec_conv.clone(),
            dec_point: self.dec_point.clone(),
            dec_linear: self.dec_linear.clone(),
            calls: AtomicU64::new(self.calls.load(Ordering::Relaxed)),
        }
    }
}

/// Output channels of the pointwise decoder conv: enough that the final affine
/// sees at least `state_len` features.
pub fn head_channels(padded_len: usize, state_len: usize) -> usize {
    state_len.div_ceil(padded_len).max(1)
}

/// Observation length rounded up to a multiple of 4 (two stride-2 stages).
pub fn padded_len(obs_len: usize) -> usize {
    obs_len.div_ceil(4).max(1) * 4
}

impl<T: Scalar> Generator<T> {
    pub fn new<R: Rng>(n_agents: usize, obs_len: usize, state_len: usize, cfg: &GeneratorConfig, rng: &mut R) -> Result<Self> {
        if n_agents == 0 || obs_len == 0 || state_len == 0 || cfg.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!(
                "generator needs positive sizes: n={n_agents}, l={obs_len}, L={state_len}, widths={:?}",
                cfg.widths
            )));
        }
        let [c0, c1, c2] = cfg.widths;
        let lp = padded_len(obs_len);
        let mut s = ParamStore::new();
        let encoder = Linear::new(&mut s, "generator.encoder", n_agents, c0, rng);
        let down = [
            ResPair::new(&mut s, "generator.down0", c0, c0, rng),
            ResPair::new(&mut s, "generator.down1", c1, c1, rng),
            ResPair::new(&mut s, "generator.down2", c2, c2, rng),
        ];
        let down_sample = [
            Conv1d::new(&mut s, "generator.down0.sample", c0, c1, 3, 2, 1, rng),
            Conv1d::new(&mut s, "generator.down1.sample", c1, c2, 3, 2, 1, rng),
        ];
        let mid = ResPair::new(&mut s, "generator.mid", c2, c2, rng);
        let up = [
            ResPair::new(&mut s, "generator.up0", 2 * c2, c2, rng),
            ResPair::new(&mut s, "generator.up1", 2 * c1, c1, rng),
            ResPair::new(&mut s, "generator.up2", 2 * c0, c0, rng),
        ];
        let up_sample = [
            ConvTranspose1d::new(&mut s, "generator.up0.sample", c2, c1, 4, 2, 1, rng),
            ConvTranspose1d::new(&mut s, "generator.up1.sample", c1, c0, 4, 2, 1, rng),
        ];
        let dec_conv = Conv1d::new(&mut s, "generator.decoder.conv", c0, c0, 5, 1, 2, rng);
        let c_out = head_channels(lp, state_len);
        let dec_point = Conv1d::new(&mut s, "generator.decoder.point", c0, c_out, 1, 1, 0, rng);
        let dec_linear = Linear::new(&mut s, "generator.decoder.linear", lp * c_out, state_len, rng);
        Ok(Self {
            store: s,
            n_agents,
            obs_len,
            padded_len: lp,
            state_len,
            widths: cfg.widths,
            encoder,
            down,
            down_sample,
            mid,
            up,
            up_sample,
            dec_conv,
            dec_point,
            dec_linear,
            calls: AtomicU64::new(0),
        })
    }

    pub fn state_len(&self) -> usize {
        self.state_len
    }

    /// Number of forward passes evaluated so far.
    pub fn forward_calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    /// Layer ladder predicted by the convolution length formula.
    pub fn ladder(&self) -> Vec<LayerShape> {
        let [c0, c1, c2] = self.widths;
        let mut out = Vec::new();
        let mut len = self.padded_len;
        let mut push = |name: &str, k: usize, s: usize, p: usize, c_out: usize, transposed: bool, len: &mut usize| {
            let next = if transposed { conv_t1d_out_len(*len, k, s, p) } else { conv1d_out_len(*len, k, s, p) };
            out.push(LayerShape { name: name.into(), kernel: k, stride: s, len_in: *len, len_out: next, c_out });
            *len = next;
        };
        for (i, (c, c_next)) in [(c0, c1), (c1, c2)].into_iter().enumerate() {
            push(&format!("down{i}.conv0"), 5, 1, 2, c, false, &mut len);
            push(&format!("down{i}.conv1"), 5, 1, 2, c, false, &mut len);
            push(&format!("down{i}.sample"), 3, 2, 1, c_next, false, &mut len);
        }
        push("down2.conv0", 5, 1, 2, c2, false, &mut len);
        push("down2.conv1", 5, 1, 2, c2, false, &mut len);
        push("mid.conv0", 5, 1, 2, c2, false, &mut len);
        push("mid.conv1", 5, 1, 2, c2, false, &mut len);
        for (i, (c, c_next)) in [(c2, c1), (c1, c0)].into_iter().enumerate() {
            push(&format!("up{i}.conv0"), 5, 1, 2, c, false, &mut len);
            push(&format!("up{i}.conv1"), 5, 1, 2, c, false, &mut len);
            push(&format!("up{i}.sample"), 4, 2, 1, c_next, true, &mut len);
        }
        push("up2.conv0", 5, 1, 2, c0, false, &mut len);
        push("up2.conv1", 5, 1, 2, c0, false, &mut len);
        push("decoder.conv", 5, 1, 2, c0, false, &mut len);
        push("decoder.point", 1, 1, 0, head_channels(self.padded_len, self.state_len), false, &mut len);
        out
    }

    /// `x [B, n, l]` (aggregated mixed messages) to `s_hat [B, L]`.
    pub fn forward(&self, g: &Graph<T>, p: &Bound, x: Var) -> Var {
        self.forward_traced(g, p, x, &mut Vec::new())
    }

    /// As [`Self::forward`], recording `(layer, [B, len, channels])` after each convolution.
    pub fn forward_traced(&self, g: &Graph<T>, p: &Bound, x: Var, trace: &mut Vec<(String, Vec<usize>)>) -> Var {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let s = g.shape(x);
        let (b, n, l) = (s[0], s[1], s[2]);
        debug_assert_eq!((n, l), (self.n_agents, self.obs_len));
        let mut h = g.permute(x, &[0, 2, 1]);
        if self.padded_len > l {
            let pad = g.constant(Tensor::zeros(IxDyn(&[b, self.padded_len - l, n])));
            h = g.concat(&[h, pad], 1);
        }
        h = self.encoder.forward(g, p, h);

        let rec = |name: &str, v: Var, trace: &mut Vec<(String, Vec<usize>)>| trace.push((name.to_string(), g.shape(v)));
        let mut skips = Vec::with_capacity(3);
        for i in 0..3 {
            let pair = &self.down[i];
            let a = g.mish(pair.a.forward(g, p, h));
            rec(&format!("down{i}.conv0"), a, trace);
            let bb = g.mish(pair.b.forward(g, p, a));
            rec(&format!("down{i}.conv1"), bb, trace);
            h = g.add(a, bb);
            skips.push(h);
            if i < 2 {
                h = g.mish(self.down_sample[i].forward(g, p, h));
                rec(&format!("down{i}.sample"), h, trace);
            }
        }
        {
            let a = g.mish(self.mid.a.forward(g, p, h));
            rec("mid.conv0", a, trace);
            let bb = g.mish(self.mid.b.forward(g, p, a));
            rec("mid.conv1", bb, trace);
            h = g.add(a, bb);
        }
        for i in 0..3 {
            let skip = skips[2 - i];
            h = g.concat(&[h, skip], 2);
            let pair = &self.up[i];
            let a = g.mish(pair.a.forward(g, p, h));
            rec(&format!("up{i}.conv0"), a, trace);
            let bb = g.mish(pair.b.forward(g, p, a));
            rec(&format!("up{i}.conv1"), bb, trace);
            h = g.add(a, bb);
            if i < 2 {
                h = g.mish(self.up_sample[i].forward(g, p, h));
                rec(&format!("up{i}.sample"), h, trace);
            }
        }
        h = g.mish(self.dec_conv.forward(g, p, h));
        rec("decoder.conv", h, trace);
        h = g.mish(self.dec_point.forward(g, p, h));
        rec("decoder.point", h, trace);
        let flat = g.reshape(h, &[b, self.padded_len * head_channels(self.padded_len, self.state_len)]);
        self.dec_linear.forward(g, p, flat)
    }

    /// Builds the generator input from messages, weights and noise, then runs
    /// the network. `w` is `[B, n, 1|n, l]`.
    pub fn complete(&self, g: &Graph<T>, p: &Bound, msgs: Var, w: Var, eps: Var) -> Var {
        let x = receiver_mix_graph(g, msgs, w, eps);
        let agg = g.mean_axis(x, 1);
        self.forward(g, p, agg)
    }

    /// Single-sample convenience wrapper.
    pub fn generate_state(&self, obs: &ObservationSet, w: &crate::comm::WeightTensor, eps: &Array2<f32>) -> Result<GlobalState> {
        let (n, l) = (obs.n_agents(), obs.obs_len());
        if (n, l) != (self.n_agents, self.obs_len) || w.values.shape() != [n, n, l] || eps.shape() != [n, l] {
            return Err(Error::Input("generator input shapes do not match the env spec".into()));
        }
        let g = Graph::<T>::no_grad();
        let p = self.store.bind(&g, false);
        let to_t = |a: &Array2<f32>| a.mapv(|v| T::of(v as f64)).into_shape_with_order(IxDyn(&[1, n, l])).expect("shape");
        let msgs = g.constant(to_t(&obs.values));
        let wv = g.constant(w.values.mapv(|v| T::of(v as f64)).into_shape_with_order(IxDyn(&[1, n, n, l])).expect("shape"));
        let e = g.constant(to_t(eps));
        let s = self.complete(&g, &p, msgs, wv, e);
        Ok(GlobalState::generated(g.value(s).iter().map(|v| v.as_f32()).collect()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub embed: usize,
    pub channels: [usize; 4],
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { embed: 128, channels: [8, 16, 32, 64] }
    }
}

pub struct Discriminator<T> {
    pub store: ParamStore<T>,
    encoder: Linear,
    convs: [Conv1d; 4],
    head: Linear,
    flat: usize,
    calls: AtomicU64,
}

impl<T: Scalar> Clone for Discriminator<T> {
    fn clone(&self) -> Self {
        Self {
            store: self.store.clone(),
            encoder: self.encoder.clone(),
            convs: self.convs.clone(),
            head: self.head.clone(),
            flat: self.flat,
            calls: AtomicU64::new(self.calls.load(Ordering::Relaxed)),
        }
    }
}

impl<T: Scalar> Discriminator<T> {
    pub fn new<R: Rng>(state_len: usize, cfg: &DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        if state_len == 0 || cfg.embed == 0 || cfg.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config(format!("discriminator needs positive sizes, got L={state_len}, {cfg:?}")));
        }
        let mut s = ParamStore::new();
        let encoder = Linear::new(&mut s, "discriminator.encoder", state_len, cfg.embed, rng);
        let mut c_in = 1;
        let mut len = cfg.embed;
        let convs = std::array::from_fn(|i| {
            let c = Conv1d::new(&mut s, &format!("discriminator.conv{i}"), c_in, cfg.channels[i], 5, 2, 2, rng);
            c_in = cfg.channels[i];
            len = c.out_len(len);
            c
        });
        let flat = len * c_in;
        let head = Linear::new(&mut s, "discriminator.head", flat, 1, rng);
        Ok(Self { store: s, encoder, convs, head, flat, calls: AtomicU64::new(0) })
    }

    pub fn forward_calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    /// Zeroes the output layer so every input scores exactly 0.5.
    pub fn zero_head(&mut self) {
        self.head.zero(&mut self.store);
    }

    /// `s [B, L]` to probabilities `[B]`.
    pub fn forward(&self, g: &Graph<T>, p: &Bound, s: Var) -> Var {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let b = g.shape(s)[0];
        let e = self.encoder.forward(g, p, s);
        let embed = g.shape(e)[1];
        let mut h = g.reshape(e, &[b, embed, 1]);
        for c in &self.convs {
            h = g.mish(c.forward(g, p, h));
        }
        let flat = g.reshape(h, &[b, self.flat]);
        let logit = self.head.forward(g, p, flat);
        let prob = g.sigmoid(logit);
        g.reshape(prob, &[b])
    }

    pub fn discriminate(&self, state: &GlobalState) -> f64 {
        let g = Graph::<T>::no_grad();
        let p = self.store.bind(&g, false);
        let s = g.constant(tensor(&[1, state.values.len()], state.values.iter().map(|&v| T::of(v as f64)).collect()));
        let d = self.forward(&g, &p, s);
        g.scalar(g.reshape(d, &[1])).as_f64()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GanLossReport {
    pub d_loss: f64,
    pub g_adv_loss: f64,
    pub mse_loss: f64,
    pub combined_g_loss: f64,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
}

/// Tape handles for the discriminator half of an update.
pub struct DiscriminatorLoss {
    pub d_loss: Var,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
}

/// `-mean log D(real) - mean log(1 - D(detach(fake)))`.
pub fn discriminator_loss<T: Scalar>(g: &Graph<T>, disc: &Discriminator<T>, dp: &Bound, real: Var, fake: Var) -> DiscriminatorLoss {
    let fake = g.detach(fake);
    let d_real = disc.forward(g, dp, real);
    let d_fake = disc.forward(g, dp, fake);
    let d_real_mean = g.value(d_real).mean().unwrap_or(T::zero()).as_f64();
    let d_fake_mean = g.value(d_fake).mean().unwrap_or(T::zero()).as_f64();
    let r = g.clamp(d_real, D_CLAMP, 1.0 - D_CLAMP);
    let r = g.log(r);
    let r = g.mean_all(r);
    let f = g.clamp(d_fake, D_CLAMP, 1.0 - D_CLAMP);
    let f = g.neg(f);
    let f = g.add_scalar(f, 1.0);
    let f = g.log(f);
    let f = g.mean_all(f);
    let sum = g.add(r, f);
    DiscriminatorLoss { d_loss: g.neg(sum), d_real_mean, d_fake_mean }
}

/// Non-saturating generator loss `-mean log D(fake)`.
pub fn generator_adv_loss<T: Scalar>(g: &Graph<T>, disc: &Discriminator<T>, dp: &Bound, fake: Var) -> Var {
    let d = disc.forward(g, dp, fake);
    let d = g.clamp(d, D_CLAMP, 1.0 - D_CLAMP);
    let d = g.log(d);
    let d = g.mean_all(d);
    g.neg(d)
}

/// Tensors for one batch of completion training samples.
#[derive(Clone, Debug)]
pub struct CompletionBatch<T> {
    /// `[N, n, l]` raw messages (observations).
    pub obs: Tensor<T>,
    /// `[N, L]` true states.
    pub states: Tensor<T>,
    /// `[N, L]` observer multiplicity per state entry.
    pub count: Tensor<T>,
    /// `[N, L]` observed values per state entry.
    pub target: Tensor<T>,
}

impl<T: Scalar> CompletionBatch<T> {
    /// One sample per `(observations, true state, gather map)` triple.
    pub fn from_samples(samples: &[(&ObservationSet, &GlobalState, &[Vec<usize>])]) -> Self {
        let nb = samples.len();
        let (n, l) = (samples[0].0.n_agents(), samples[0].0.obs_len());
        let big_l = samples[0].1.values.len();
        let mut obs = Vec::with_capacity(nb * n * l);
        let mut states = Vec::with_capacity(nb * big_l);
        let mut count = Vec::with_capacity(nb * big_l);
        let mut target = Vec::with_capacity(nb * big_l);
        for (o, s, v) in samples {
            obs.extend(o.values.iter().map(|&x| T::of(x as f64)));
            states.extend(s.values.iter().map(|&x| T::of(x as f64)));
            let (c, t) = dense_targets(o, v, big_l);
            count.extend(c.into_iter().map(|x| T::of(x as f64)));
            target.extend(t.into_iter().map(|x| T::of(x as f64)));
        }
        Self {
            obs: tensor(&[nb, n, l], obs),
            states: tensor(&[nb, big_l], states),
            count: tensor(&[nb, big_l], count),
            target: tensor(&[nb, big_l], target),
        }
    }

    pub fn len(&self) -> usize {
        self.obs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Evaluates every adversarial loss for fixed weights `W [N, n, n, l]` and
/// noise `eps [N, n, l]`, without updating anything.
pub fn gan_step_losses<T: Scalar>(
    batch: &CompletionBatch<T>,
    w: &Tensor<T>,
    eps: &Tensor<T>,
    gen: &Generator<T>,
    disc: &Discriminator<T>,
    alpha: f64,
) -> Result<GanLossReport> {
    if alpha < 0.0 {
        return Err(Error::Config(format!("alpha must be non-negative, got {alpha}")));
    }
    let g = Graph::<T>::new();
    let gp = gen.store.bind(&g, true);
    let dp = disc.store.bind(&g, true);
    let msgs = g.constant(batch.obs.clone());
    let wv = g.constant(w.clone());
    let e = g.constant(eps.clone());
    let s_hat = gen.complete(&g, &gp, msgs, wv, e);
    let real = g.constant(batch.states.clone());
    let dl = discriminator_loss(&g, disc, &dp, real, s_hat);
    let adv = generator_adv_loss(&g, disc, &dp, s_hat);
    let (count, target) = (g.constant(batch.count.clone()), g.constant(batch.target.clone()));
    let mse = masked_mse_graph(&g, s_hat, count, target);
    let (d_loss, g_adv_loss, mse_loss) = (g.scalar(dl.d_loss).as_f64(), g.scalar(adv).as_f64(), g.scalar(mse).as_f64());
    let report = GanLossReport {
        d_loss,
        g_adv_loss,
        mse_loss,
        combined_g_loss: mse_loss + alpha * g_adv_loss,
        d_real_mean: dl.d_real_mean,
        d_fake_mean: dl.d_fake_mean,
    };
    if [report.d_loss, report.g_adv_loss, report.mse_loss].iter().any(|v| !v.is_finite()) {
        return Err(Error::Training(format!("non-finite adversarial losses: {report:?}")));
    }
    Ok(report)
}

/// Per-receiver mixed views expanded to a full `[n, n, l]` array.
pub fn expand_rows(rows: &Array2<f32>) -> Array3<f32> {
    let (n, l) = rows.dim();
    let mut out = Array3::zeros((n, n, l));
    for i in 0..n {
        for j in 0..n {
            out.index_axis_mut(Axis(0), i).row_mut(j).assign(&rows.row(i));
        }
    }
    out
}
