//! Parameter storage, basic layers and the Adam optimizer.

use ndarray::IxDyn;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Grads, Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered collection of named parameter arrays owned by one network.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.values.iter_mut()
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Puts every parameter on the tape, trainable or constant.
    pub fn bind(&self, g: &Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| if trainable { g.param(v.clone()) } else { g.constant(v.clone()) })
            .collect();
        Bound { vars }
    }

    /// Collects the gradient of every parameter (zeros where none flowed).
    pub fn grads_of(&self, bound: &Bound, grads: &Grads<T>) -> Vec<Tensor<T>> {
        bound
            .vars
            .iter()
            .zip(&self.values)
            .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
            .collect()
    }

    /// Content hash over names, shapes and values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.iter() {
            h.update(name.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.iter() {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Replaces values by name; shapes must agree.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<(), String> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let idx = other
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| format!("missing parameter `{name}`"))?;
            let src = &other.values[idx];
            if src.shape() != value.shape() {
                return Err(format!("shape mismatch for `{name}`: {:?} vs {:?}", src.shape(), value.shape()));
            }
            value.assign(src);
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), values: self.values.iter().map(crate::autodiff::cast).collect() }
    }

    pub fn zero_all(&mut self) {
        for v in &mut self.values {
            v.fill(T::zero());
        }
    }
}

/// Tape handles for a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

fn uniform<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
    Tensor::from_shape_vec(IxDyn(shape), data).expect("shape")
}

/// Affine map over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.add(format!("{name}.weight"), uniform(rng, &[fan_in, fan_out], bound));
        let b = store.add(format!("{name}.bias"), uniform(rng, &[fan_out], bound));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Var {
        let y = g.matmul(x, p.var(self.w));
        g.add(y, p.var(self.b))
    }

    pub fn zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.get_mut(self.w).fill(T::zero());
        store.get_mut(self.b).fill(T::zero());
    }
}

/// Channels-last 1d convolution.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((c_in * kernel) as f64).sqrt();
        let w = store.add(format!("{name}.weight"), uniform(rng, &[kernel * c_in, c_out], bound));
        let b = store.add(format!("{name}.bias"), uniform(rng, &[c_out], bound));
        Self { w, b, kernel, stride, pad, c_in, c_out }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Var {
        g.conv1d(x, p.var(self.w), p.var(self.b), self.kernel, self.stride, self.pad)
    }

    pub fn out_len(&self, lin: usize) -> usize {
        crate::autodiff::conv1d_out_len(lin, self.kernel, self.stride, self.pad)
    }
}

/// Channels-last transposed 1d convolution.
#[derive(Clone, Debug)]
pub struct ConvTranspose1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvTranspose1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((c_out * kernel) as f64).sqrt();
        let w = store.add(format!("{name}.weight"), uniform(rng, &[c_in, kernel * c_out], bound));
        let b = store.add(format!("{name}.bias"), uniform(rng, &[c_out], bound));
        Self { w, b, kernel, stride, pad, c_in, c_out }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Var {
        g.conv_t1d(x, p.var(self.w), p.var(self.b), self.kernel, self.stride, self.pad)
    }

    pub fn out_len(&self, lin: usize) -> usize {
        crate::autodiff::conv_t1d_out_len(lin, self.kernel, self.stride, self.pad)
    }
}

/// Layer normalization over the last axis with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::from_elem(IxDyn(&[width]), T::one()));
        let shift = store.add(format!("{name}.shift"), Tensor::zeros(IxDyn(&[width])));
        Self { gain, shift }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Var {
        let y = g.layer_norm_last(x, 1e-5);
        let y = g.mul(y, p.var(self.gain));
        g.add(y, p.var(self.shift))
    }
}

/// Adam with optional global gradient-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, clip_norm: Option<f64>) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, v)| Tensor::zeros(v.raw_dim())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update; returns the pre-clipping gradient norm.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> f64 {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        let norm = grads.iter().flat_map(|g| g.iter()).map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / (norm + 1e-6),
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let sc = T::of(scale);
        let step_size = T::of(self.lr / bc1);
        let bc2_sqrt = T::of(bc2.sqrt());
        let eps = T::of(self.eps);
        for ((p, g), (m, v)) in store.values_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                let g = g * sc;
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p -= step_size * *m / ((*v).sqrt() / bc2_sqrt + eps);
            });
        }
        norm
    }
}
