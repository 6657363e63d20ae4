//! Information-level communication weights.
//!
//! Every agent broadcasts its local observation. Receiver `i` scores the
//! message matrix with single-head scaled dot-product attention, using its own
//! observation as the query, and a sigmoid maps the attended features to
//! weights in `[0, 1]`. A weight of 1 replaces the corresponding message entry
//! with Gaussian noise; a weight of 0 passes it through unchanged.

use ndarray::{Array2, Array3, Axis, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{tensor, Graph, Scalar, Tensor, Var};
use crate::env::ObservationSet;
use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamStore};

/// Sinusoidal encoding: row `i`, columns `2j` / `2j+1` hold
/// `sin(i / 10000^(2j/d))` / `cos(i / 10000^(2j/d))`.
pub fn positional_encoding(n: usize, d: usize) -> Result<Array2<f64>> {
    if n == 0 || d < 2 || d % 2 != 0 {
        return Err(Error::Config(format!("positional encoding needs n >= 1 and an even d >= 2, got n={n}, d={d}")));
    }
    let mut p = Array2::zeros((n, d));
    for i in 0..n {
        for j in 0..d / 2 {
            let angle = i as f64 / 10000f64.powf(2.0 * j as f64 / d as f64);
            p[[i, 2 * j]] = angle.sin();
            p[[i, 2 * j + 1]] = angle.cos();
        }
    }
    Ok(p)
}

/// Encoding sized to an arbitrary width: computed at the next even width and
/// truncated.
pub fn positional_encoding_width(n: usize, width: usize) -> Array2<f64> {
    let even = width + width % 2;
    let p = positional_encoding(n, even.max(2)).expect("even width");
    p.slice(ndarray::s![.., ..width]).to_owned()
}

/// `W[i, j, k]`: weight receiver `i` puts on feature `k` of sender `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightTensor {
    pub values: Array3<f32>,
}

impl WeightTensor {
    pub fn zeros(n: usize, l: usize) -> Self {
        Self { values: Array3::zeros((n, n, l)) }
    }

    /// Mean weight per receiver.
    pub fn receiver_means(&self) -> Vec<f32> {
        self.values.outer_iter().map(|r| r.mean().unwrap_or(0.0)).collect()
    }

    pub fn mean(&self) -> f32 {
        self.values.mean().unwrap_or(0.0)
    }
}

/// Noise-mixed messages: `values[i, j, :]` is receiver `i`'s view of sender `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedInfo {
    pub values: Array3<f32>,
    pub noise: Array2<f32>,
}

/// `(1 - W) * M + W * eps`, elementwise.
pub fn mix_information(m: &Array2<f32>, w_row: &Array2<f32>, eps: &Array2<f32>) -> Result<Array2<f32>> {
    if m.shape() != w_row.shape() || m.shape() != eps.shape() {
        return Err(Error::Input(format!(
            "mix shapes disagree: M {:?}, W {:?}, eps {:?}",
            m.shape(),
            w_row.shape(),
            eps.shape()
        )));
    }
    let mut out = Array2::zeros(m.raw_dim());
    ndarray::Zip::from(&mut out).and(m).and(w_row).and(eps).for_each(|o, &m, &w, &e| {
        *o = (1.0 - w) * m + w * e;
    });
    Ok(out)
}

/// Applies [`mix_information`] for every receiver, sharing one noise sample.
pub fn receiver_mix(obs: &ObservationSet, w: &WeightTensor, eps: &Array2<f32>) -> Result<MixedInfo> {
    let (n, l) = (obs.n_agents(), obs.obs_len());
    if w.values.shape() != [n, n, l] {
        return Err(Error::Input(format!("weight tensor shape {:?} != [{n}, {n}, {l}]", w.values.shape())));
    }
    let mut values = Array3::zeros((n, n, l));
    for i in 0..n {
        let wi = w.values.index_axis(Axis(0), i).to_owned();
        let xi = mix_information(&obs.values, &wi, eps)?;
        values.index_axis_mut(Axis(0), i).assign(&xi);
    }
    Ok(MixedInfo { values, noise: eps.clone() })
}

/// Graph form of [`receiver_mix`] over a batch.
///
/// `msgs [B, n, l]`, `w [B, n, n, l]` or `w_rows [B, n, 1, l]` broadcast over
/// senders, `eps [B, n, l]`; returns `[B, n, n, l]`.
pub fn receiver_mix_graph<T: Scalar>(g: &Graph<T>, msgs: Var, w: Var, eps: Var) -> Var {
    let ms = g.shape(msgs);
    let (b, n, l) = (ms[0], ms[1], ms[2]);
    let m4 = g.reshape(msgs, &[b, 1, n, l]);
    let e4 = g.reshape(eps, &[b, 1, n, l]);
    let keep = g.neg(w);
    let keep = g.add_scalar(keep, 1.0);
    let a = g.mul(keep, m4);
    let c = g.mul(w, e4);
    let x = g.add(a, c);
    // broadcasting leaves [B, n, 1|n, l]; widen to senders explicitly
    if g.shape(x)[2] == n {
        x
    } else {
        let zeros = g.constant(Tensor::zeros(IxDyn(&[b, n, n, l])));
        g.add(x, zeros)
    }
}

pub fn standard_normal<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    tensor(shape, (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightNetConfig {
    /// Query/key/value width.
    pub dim: usize,
    pub dropout: f64,
}

impl Default for WeightNetConfig {
    fn default() -> Self {
        Self { dim: 64, dropout: 0.1 }
    }
}

/// Weight network parameters and structure.
#[derive(Clone, Debug)]
pub struct WeightNet<T> {
    pub store: ParamStore<T>,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    n_agents: usize,
    obs_len: usize,
    dim: usize,
    dropout: f64,
    pos: Tensor<T>,
}

/// Batched forward result.
pub struct WeightForward {
    /// `[B, n, 1, l]`: one weight row per receiver, shared across senders.
    pub w_rows: Var,
    /// `[B, n, n]` attention probabilities (before dropout).
    pub attn: Var,
}

impl<T: Scalar> WeightNet<T> {
    pub fn new<R: Rng>(n_agents: usize, obs_len: usize, cfg: &WeightNetConfig, rng: &mut R) -> Result<Self> {
        if cfg.dim == 0 || !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::Config(format!("weight net needs dim > 0 and dropout in [0, 1), got {cfg:?}")));
        }
        let mut store = ParamStore::new();
        let query = Linear::new(&mut store, "weight_net.query", obs_len, cfg.dim, rng);
        let key = Linear::new(&mut store, "weight_net.key", obs_len, cfg.dim, rng);
        let value = Linear::new(&mut store, "weight_net.value", obs_len, cfg.dim, rng);
        let out = Linear::new(&mut store, "weight_net.out", cfg.dim, obs_len, rng);
        let pos = positional_encoding_width(n_agents, obs_len).mapv(|v| T::of(v as f64)).into_dyn();
        Ok(Self { store, query, key, value, out, n_agents, obs_len, dim: cfg.dim, dropout: cfg.dropout, pos })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `obs [B, n, l]` on the tape. Dropout on attention probabilities only
    /// when `rng` is supplied (train mode).
    pub fn forward<R: Rng>(&self, g: &Graph<T>, p: &Bound, obs: Var, train_rng: Option<&mut R>) -> WeightForward {
        let s = g.shape(obs);
        let (b, n) = (s[0], s[1]);
        let pos = g.constant(self.pos.clone());
        let e = g.add(obs, pos);
        let q = self.query.forward(g, p, e);
        let k = self.key.forward(g, p, e);
        let v = self.value.forward(g, p, e);
        let scores = g.bmm(q, k, true);
        let scores = g.scale(scores, 1.0 / (self.dim as f64).sqrt());
        let attn = g.softmax_last(scores);
        let probs = match train_rng {
            Some(rng) if self.dropout > 0.0 => {
                let keep = 1.0 - self.dropout;
                let mask: Vec<T> = (0..b * n * n)
                    .map(|_| if rng.gen_bool(keep) { T::of(1.0 / keep) } else { T::zero() })
                    .collect();
                let m = g.constant(tensor(&[b, n, n], mask));
                g.mul(attn, m)
            }
            _ => attn,
        };
        let ctx = g.bmm(probs, v, false);
        let o = self.out.forward(g, p, ctx);
        let w = g.sigmoid(o);
        WeightForward { w_rows: g.reshape(w, &[b, n, 1, self.obs_len]), attn }
    }

    /// Weights for a single timestep.
    pub fn compute_weights<R: Rng>(&self, obs: &ObservationSet, train_rng: Option<&mut R>) -> Result<(WeightTensor, Array2<f32>)> {
        if !obs.is_finite() {
            return Err(Error::Input("non-finite observation".into()));
        }
        if obs.n_agents() != self.n_agents || obs.obs_len() != self.obs_len {
            return Err(Error::Input(format!(
                "observation shape {:?} does not match weight net [{}, {}]",
                obs.values.shape(),
                self.n_agents,
                self.obs_len
            )));
        }
        let (n, l) = (self.n_agents, self.obs_len);
        let g = Graph::<T>::no_grad();
        let p = self.store.bind(&g, false);
        let o = g.constant(obs.values.mapv(|v| T::of(v as f64)).into_shape_with_order(IxDyn(&[1, n, l])).expect("shape"));
        let fwd = self.forward(&g, &p, o, train_rng);
        let rows = g.value(fwd.w_rows);
        let mut values = Array3::zeros((n, n, l));
        for i in 0..n {
            for j in 0..n {
                for k in 0..l {
                    values[[i, j, k]] = rows[[0, i, 0, k]].as_f32();
                }
            }
        }
        let attn = g.value(fwd.attn).mapv(|v| v.as_f32());
        let attn = attn.into_shape_with_order((n, n)).expect("shape");
        Ok((WeightTensor { values }, attn))
    }
}
