use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::activation::{Activation, OutputActivation};
use crate::error::{check_dim, Error, Result};
use crate::scalar::Scalar;

static NEXT_NETWORK_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NETWORK_ID.fetch_add(1, Ordering::Relaxed)
}

/// Shape and nonlinearities of a fully-connected network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn new(
        layer_widths: Vec<usize>,
        activation: Activation,
        output_activation: OutputActivation,
    ) -> Result<Self> {
        let spec = Self {
            layer_widths,
            activation,
            output_activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Input width, hidden widths, output width.
    pub fn with_hidden(
        input: usize,
        hidden: &[usize],
        output: usize,
        activation: Activation,
        output_activation: OutputActivation,
    ) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(output);
        Self::new(widths, activation, output_activation)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "an MLP needs at least an input and an output layer, got {} widths",
                self.layer_widths.len()
            )));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::InvalidArgument(
                "MLP layer widths must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().expect("validated")
    }

    /// Number of affine layers.
    pub fn depth(&self) -> usize {
        self.layer_widths.len() - 1
    }
}

/// Per-layer weight and bias tensors. Weights are stored `fan_in x fan_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub weights: Vec<Array2<T>>,
    pub biases: Vec<Array1<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros(spec: &MlpSpec) -> Self {
        let weights = spec
            .layer_widths
            .windows(2)
            .map(|w| Array2::zeros((w[0], w[1])))
            .collect();
        let biases = spec.layer_widths[1..]
            .iter()
            .map(|&w| Array1::zeros(w))
            .collect();
        Self { weights, biases }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    pub fn max_abs(&self) -> T {
        let mut m = T::zero();
        for w in &self.weights {
            for &x in w {
                m = m.max(x.abs());
            }
        }
        for b in &self.biases {
            for &x in b {
                m = m.max(x.abs());
            }
        }
        m
    }

    /// Accumulates `other` into `self`.
    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            Zip::from(a).and(b).for_each(|a, &b| *a = *a + b);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            Zip::from(a).and(b).for_each(|a, &b| *a = *a + b);
        }
    }

    pub fn scale(&mut self, factor: T) {
        for w in &mut self.weights {
            w.mapv_inplace(|x| x * factor);
        }
        for b in &mut self.biases {
            b.mapv_inplace(|x| x * factor);
        }
    }

    pub fn len(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat view in layer order: weights (row-major) then bias, per layer.
    pub fn get(&self, index: usize) -> T {
        let (layer, slot) = locate(&self.weights, &self.biases, index);
        match slot {
            Slot::Weight(r, c) => self.weights[layer][[r, c]],
            Slot::Bias(j) => self.biases[layer][j],
        }
    }
}

enum Slot {
    Weight(usize, usize),
    Bias(usize),
}

fn locate<T>(weights: &[Array2<T>], biases: &[Array1<T>], mut index: usize) -> (usize, Slot) {
    for (layer, (w, b)) in weights.iter().zip(biases).enumerate() {
        if index < w.len() {
            let cols = w.ncols();
            return (layer, Slot::Weight(index / cols, index % cols));
        }
        index -= w.len();
        if index < b.len() {
            return (layer, Slot::Bias(index));
        }
        index -= b.len();
    }
    panic!("parameter index out of range");
}

/// Values retained by a forward pass for the matching backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    network_id: u64,
    version: u64,
    input: Array2<T>,
    /// Pre-activation of every affine layer.
    pub pre_activations: Vec<Array2<T>>,
    /// Post-activation of every affine layer; the last entry is the output.
    pub activations: Vec<Array2<T>>,
    /// Hidden-activation derivatives at each hidden pre-activation.
    slopes: Vec<Array2<T>>,
}

impl<T> ForwardCache<T> {
    pub fn layer_count(&self) -> usize {
        self.pre_activations.len()
    }

    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Parameters of an MLP together with its Adam state.
#[derive(Debug)]
pub struct Network<T> {
    spec: MlpSpec,
    weights: Vec<Array2<T>>,
    biases: Vec<Array1<T>>,
    adam_m: Gradients<T>,
    adam_v: Gradients<T>,
    step_count: u64,
    id: u64,
    version: u64,
}

impl<T: Scalar> Clone for Network<T> {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            weights: self.weights.clone(),
            biases: self.biases.clone(),
            adam_m: self.adam_m.clone(),
            adam_v: self.adam_v.clone(),
            step_count: self.step_count,
            id: fresh_id(),
            version: 0,
        }
    }
}

impl<T: Scalar> Network<T> {
    /// Uniform initialization in `±sqrt(1/fan_in)` for weights and biases.
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut weights = Vec::with_capacity(spec.depth());
        let mut biases = Vec::with_capacity(spec.depth());
        for w in spec.layer_widths.windows(2) {
            let bound = (1.0 / w[0] as f64).sqrt();
            weights.push(Array2::from_shape_fn((w[0], w[1]), |_| {
                T::lit(rng.random_range(-bound..bound))
            }));
            biases.push(Array1::from_shape_fn(w[1], |_| {
                T::lit(rng.random_range(-bound..bound))
            }));
        }
        Ok(Self::from_parts(spec, weights, biases))
    }

    /// All parameters zero.
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let g = Gradients::<T>::zeros(&spec);
        Ok(Self::from_parts(spec, g.weights, g.biases))
    }

    pub fn from_parts(spec: MlpSpec, weights: Vec<Array2<T>>, biases: Vec<Array1<T>>) -> Self {
        let adam_m = Gradients::zeros(&spec);
        let adam_v = Gradients::zeros(&spec);
        for (l, w) in spec.layer_widths.windows(2).enumerate() {
            assert_eq!(weights[l].dim(), (w[0], w[1]), "weight shape of layer {l}");
            assert_eq!(biases[l].len(), w[1], "bias shape of layer {l}");
        }
        Self {
            spec,
            weights,
            biases,
            adam_m,
            adam_v,
            step_count: 0,
            id: fresh_id(),
            version: 0,
        }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[Array2<T>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<T>] {
        &self.biases
    }

    pub fn adam_moments(&self) -> (&Gradients<T>, &Gradients<T>) {
        (&self.adam_m, &self.adam_v)
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Mutable weights; invalidates outstanding caches.
    pub fn weights_mut(&mut self) -> &mut [Array2<T>] {
        self.version += 1;
        &mut self.weights
    }

    /// Mutable biases; invalidates outstanding caches.
    pub fn biases_mut(&mut self) -> &mut [Array1<T>] {
        self.version += 1;
        &mut self.biases
    }

    pub(crate) fn restore_state(&mut self, m: Gradients<T>, v: Gradients<T>, step_count: u64) {
        self.adam_m = m;
        self.adam_v = v;
        self.step_count = step_count;
        self.version += 1;
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Flat parameter access, same ordering as [`Gradients::get`].
    pub fn param(&self, index: usize) -> T {
        let (layer, slot) = locate(&self.weights, &self.biases, index);
        match slot {
            Slot::Weight(r, c) => self.weights[layer][[r, c]],
            Slot::Bias(j) => self.biases[layer][j],
        }
    }

    pub fn set_param(&mut self, index: usize, value: T) {
        let (layer, slot) = locate(&self.weights, &self.biases, index);
        match slot {
            Slot::Weight(r, c) => self.weights[layer][[r, c]] = value,
            Slot::Bias(j) => self.biases[layer][j] = value,
        }
        self.version += 1;
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    fn check_input(&self, input: &ArrayView2<T>) -> Result<()> {
        check_dim("mlp input", self.spec.input_dim(), input.ncols())?;
        if input.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("mlp input"));
        }
        Ok(())
    }

    /// Forward pass over a batch of row vectors.
    pub fn forward_batch(&self, input: ArrayView2<T>) -> Result<(Array2<T>, ForwardCache<T>)> {
        self.check_input(&input)?;
        let depth = self.spec.depth();
        let mut pre_activations = Vec::with_capacity(depth);
        let mut activations: Vec<Array2<T>> = Vec::with_capacity(depth);
        let mut slopes = Vec::with_capacity(depth - 1);
        for l in 0..depth {
            let x = if l == 0 {
                input.view()
            } else {
                activations[l - 1].view()
            };
            let z = affine(x, &self.weights[l], &self.biases[l]);
            let a = if l + 1 == depth {
                let kind = self.spec.output_activation;
                z.mapv(|v| kind.eval(v))
            } else {
                let kind = self.spec.activation;
                let mut a = Array2::zeros(z.raw_dim());
                let mut d = Array2::zeros(z.raw_dim());
                Zip::from(&mut a).and(&mut d).and(&z).for_each(|a, d, &v| {
                    let (y, dy) = kind.eval_with_derivative(v);
                    *a = y;
                    *d = dy;
                });
                slopes.push(d);
                a
            };
            pre_activations.push(z);
            activations.push(a);
        }
        let output = activations.last().expect("depth >= 1").clone();
        Ok((
            output,
            ForwardCache {
                network_id: self.id,
                version: self.version,
                input: input.to_owned(),
                pre_activations,
                activations,
                slopes,
            },
        ))
    }

    /// Forward pass without retaining intermediates.
    pub fn predict_batch(&self, input: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_input(&input)?;
        let depth = self.spec.depth();
        let mut h = affine(input, &self.weights[0], &self.biases[0]);
        for l in 0..depth {
            if l > 0 {
                h = affine(h.view(), &self.weights[l], &self.biases[l]);
            }
            if l + 1 == depth {
                let kind = self.spec.output_activation;
                h.mapv_inplace(|v| kind.eval(v));
            } else {
                let kind = self.spec.activation;
                h.mapv_inplace(|v| kind.eval(v));
            }
        }
        Ok(h)
    }

    /// Single-vector forward pass.
    pub fn forward(&self, input: &[T]) -> Result<(Vec<T>, ForwardCache<T>)> {
        let view = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let (out, cache) = self.forward_batch(view)?;
        Ok((out.into_raw_vec_and_offset().0, cache))
    }

    pub fn predict(&self, input: &[T]) -> Result<Vec<T>> {
        let view = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(self.predict_batch(view)?.into_raw_vec_and_offset().0)
    }

    fn check_cache(&self, cache: &ForwardCache<T>, output_grad: &ArrayView2<T>) -> Result<()> {
        if cache.network_id != self.id
            || cache.version != self.version
            || cache.layer_count() != self.spec.depth()
        {
            return Err(Error::StaleCache);
        }
        check_dim("mlp output gradient rows", cache.batch_size(), output_grad.nrows())?;
        check_dim("mlp output gradient", self.spec.output_dim(), output_grad.ncols())
    }

    /// Gradient at the output layer's pre-activation.
    fn output_delta(&self, cache: &ForwardCache<T>, output_grad: ArrayView2<T>) -> Array2<T> {
        let kind = self.spec.output_activation;
        let mut delta = output_grad.to_owned();
        if kind != OutputActivation::Identity {
            Zip::from(&mut delta)
                .and(cache.activations.last().expect("depth >= 1"))
                .for_each(|d, &y| *d = *d * kind.derivative_from_output(y));
        }
        delta
    }

    fn hidden_delta(&self, upstream: Array2<T>, slope: &Array2<T>) -> Array2<T> {
        let mut delta = upstream;
        if self.spec.activation != Activation::Identity {
            Zip::from(&mut delta).and(slope).for_each(|d, &s| *d = *d * s);
        }
        delta
    }

    /// Gradients of `sum_rows <output_grad_row, output_row>` with respect to
    /// every parameter and the input.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache<T>,
        output_grad: ArrayView2<T>,
    ) -> Result<(Gradients<T>, Array2<T>)> {
        self.check_cache(cache, &output_grad)?;
        let depth = self.spec.depth();
        let mut grads_w = vec![Array2::zeros((0, 0)); depth];
        let mut grads_b = vec![Array1::zeros(0); depth];
        let mut delta = self.output_delta(cache, output_grad);
        for l in (0..depth).rev() {
            let x = if l == 0 {
                cache.input.view()
            } else {
                cache.activations[l - 1].view()
            };
            grads_w[l] = x.t().dot(&delta);
            grads_b[l] = delta.sum_axis(Axis(0));
            let upstream = delta.dot(&self.weights[l].t());
            delta = if l == 0 {
                upstream
            } else {
                self.hidden_delta(upstream, &cache.slopes[l - 1])
            };
        }
        Ok((
            Gradients {
                weights: grads_w,
                biases: grads_b,
            },
            delta,
        ))
    }

    /// Input gradient only; skips the weight-gradient products.
    pub fn backward_input_batch(
        &self,
        cache: &ForwardCache<T>,
        output_grad: ArrayView2<T>,
    ) -> Result<Array2<T>> {
        self.check_cache(cache, &output_grad)?;
        let depth = self.spec.depth();
        let mut delta = self.output_delta(cache, output_grad);
        for l in (0..depth).rev() {
            let upstream = delta.dot(&self.weights[l].t());
            delta = if l == 0 {
                upstream
            } else {
                self.hidden_delta(upstream, &cache.slopes[l - 1])
            };
        }
        Ok(delta)
    }

    pub fn backward(&self, cache: &ForwardCache<T>, output_grad: &[T]) -> Result<(Gradients<T>, Vec<T>)> {
        let view = ArrayView2::from_shape((1, output_grad.len()), output_grad)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let (g, dx) = self.backward_batch(cache, view)?;
        Ok((g, dx.into_raw_vec_and_offset().0))
    }

    /// One Adam update. Returns `false` (and leaves everything untouched)
    /// when the gradients contain non-finite values.
    pub fn adam_step(&mut self, grads: &Gradients<T>, cfg: &AdamConfig) -> Result<bool> {
        check_dim("adam gradient layers", self.spec.depth(), grads.weights.len())?;
        for l in 0..self.spec.depth() {
            if grads.weights[l].dim() != self.weights[l].dim() {
                return Err(Error::Dimension {
                    context: "adam weight gradient",
                    expected: self.weights[l].len(),
                    actual: grads.weights[l].len(),
                });
            }
            check_dim("adam bias gradient", self.biases[l].len(), grads.biases[l].len())?;
        }
        if !grads.is_finite() {
            return Ok(false);
        }
        self.step_count += 1;
        self.version += 1;
        let t = self.step_count as i32;
        let b1 = T::lit(cfg.beta1);
        let b2 = T::lit(cfg.beta2);
        let one = T::one();
        let lr = T::lit(cfg.lr);
        let eps = T::lit(cfg.eps);
        let corr1 = one - b1.powi(t);
        let corr2 = one - b2.powi(t);
        let update = |p: &mut T, m: &mut T, v: &mut T, g: T| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / corr1;
            let v_hat = *v / corr2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        };
        for l in 0..self.spec.depth() {
            Zip::from(&mut self.weights[l])
                .and(&mut self.adam_m.weights[l])
                .and(&mut self.adam_v.weights[l])
                .and(&grads.weights[l])
                .for_each(|p, m, v, &g| update(p, m, v, g));
            Zip::from(&mut self.biases[l])
                .and(&mut self.adam_m.biases[l])
                .and(&mut self.adam_v.biases[l])
                .and(&grads.biases[l])
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
        Ok(true)
    }

    /// `self <- rate * source + (1 - rate) * self`, elementwise.
    pub fn blend_from(&mut self, source: &Network<T>, rate: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "blend rate must lie in [0, 1], got {rate}"
            )));
        }
        if source.spec.layer_widths != self.spec.layer_widths {
            return Err(Error::InvalidArgument(
                "blend source and target have different shapes".into(),
            ));
        }
        self.version += 1;
        if rate == 1.0 {
            self.weights.clone_from(&source.weights);
            self.biases.clone_from(&source.biases);
            return Ok(());
        }
        if rate == 0.0 {
            return Ok(());
        }
        let r = T::lit(rate);
        let keep = T::one() - r;
        for (t, s) in self.weights.iter_mut().zip(&source.weights) {
            Zip::from(t).and(s).for_each(|t, &s| *t = r * s + keep * *t);
        }
        for (t, s) in self.biases.iter_mut().zip(&source.biases) {
            Zip::from(t).and(s).for_each(|t, &s| *t = r * s + keep * *t);
        }
        Ok(())
    }
}

/// `x · W + b` broadcast over rows.
fn affine<T: Scalar>(x: ArrayView2<T>, w: &Array2<T>, b: &Array1<T>) -> Array2<T> {
    let mut z = x.dot(w);
    for mut row in z.rows_mut() {
        Zip::from(&mut row).and(b).for_each(|z, &b| *z = *z + b);
    }
    z
}

/// Free-function form of [`Network::blend_from`].
pub fn ema_blend<T: Scalar>(target: &mut Network<T>, source: &Network<T>, rate: f64) -> Result<()> {
    target.blend_from(source, rate)
}
