//! Q-network engine: a 1-D convolutional encoder over surrounding vehicles,
//! max-pooled so the output does not depend on vehicle ordering, followed by
//! two fully connected layers and a dueling value/advantage head.
//!
//! Everything is written out by hand (forward, reverse-mode backward, Adam)
//! for one fixed topology. Layer widths live in [`Architecture`].

mod adam;
pub mod checkpoint;
mod loss;

use std::fmt;

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adam::AdamState;
pub use loss::huber_loss;

/// Floating point type a network can be instantiated with.
pub trait Scalar: Float + Default + Send + Sync + fmt::Debug + 'static {
    /// Tag byte used in checkpoints (the byte width of the type).
    const DTYPE: u8;

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one value from the first `DTYPE` bytes of `bytes`.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: u8 = 4;

    fn of(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: u8 = 8;

    fn of(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Layer widths. The topology itself is fixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub ego_inputs: usize,
    pub vehicle_inputs: usize,
    pub conv_filters: usize,
    pub hidden: usize,
    pub actions: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            ego_inputs: 3,
            vehicle_inputs: 4,
            conv_filters: 32,
            hidden: 64,
            actions: 10,
        }
    }
}

/// Parameter blocks in declaration (and serialization) order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv1Weights,
    Conv1Bias,
    Conv2Weights,
    Conv2Bias,
    Fc1Weights,
    Fc1Bias,
    Fc2Weights,
    Fc2Bias,
    ValueWeights,
    ValueBias,
    AdvantageWeights,
    AdvantageBias,
}

impl Layer {
    pub const ALL: [Layer; 12] = [
        Layer::Conv1Weights,
        Layer::Conv1Bias,
        Layer::Conv2Weights,
        Layer::Conv2Bias,
        Layer::Fc1Weights,
        Layer::Fc1Bias,
        Layer::Fc2Weights,
        Layer::Fc2Bias,
        Layer::ValueWeights,
        Layer::ValueBias,
        Layer::AdvantageWeights,
        Layer::AdvantageBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Layer::Conv1Weights => "conv1.weight",
            Layer::Conv1Bias => "conv1.bias",
            Layer::Conv2Weights => "conv2.weight",
            Layer::Conv2Bias => "conv2.bias",
            Layer::Fc1Weights => "fc1.weight",
            Layer::Fc1Bias => "fc1.bias",
            Layer::Fc2Weights => "fc2.weight",
            Layer::Fc2Bias => "fc2.bias",
            Layer::ValueWeights => "value.weight",
            Layer::ValueBias => "value.bias",
            Layer::AdvantageWeights => "advantage.weight",
            Layer::AdvantageBias => "advantage.bias",
        }
    }

    fn is_bias(self) -> bool {
        matches!(
            self,
            Layer::Conv1Bias
                | Layer::Conv2Bias
                | Layer::Fc1Bias
                | Layer::Fc2Bias
                | Layer::ValueBias
                | Layer::AdvantageBias
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpan {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl LayerSpan {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

impl Architecture {
    /// (rows, cols) of a parameter block; weights are row-major `[out][in]`.
    pub fn shape(&self, layer: Layer) -> (usize, usize) {
        let f = self.conv_filters;
        let h = self.hidden;
        match layer {
            Layer::Conv1Weights => (f, self.vehicle_inputs),
            Layer::Conv2Weights => (f, f),
            Layer::Conv1Bias | Layer::Conv2Bias => (f, 1),
            Layer::Fc1Weights => (h, self.ego_inputs + f),
            Layer::Fc2Weights => (h, h),
            Layer::Fc1Bias | Layer::Fc2Bias => (h, 1),
            Layer::ValueWeights => (1, h),
            Layer::ValueBias => (1, 1),
            Layer::AdvantageWeights => (self.actions, h),
            Layer::AdvantageBias => (self.actions, 1),
        }
    }

    pub fn layout(&self) -> [LayerSpan; 12] {
        let mut offset = 0;
        Layer::ALL.map(|layer| {
            let (rows, cols) = self.shape(layer);
            let span = LayerSpan { offset, rows, cols };
            offset += rows * cols;
            span
        })
    }

    pub fn parameter_count(&self) -> usize {
        Layer::ALL
            .iter()
            .map(|&l| {
                let (r, c) = self.shape(l);
                r * c
            })
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ego_inputs == 0
            || self.vehicle_inputs == 0
            || self.conv_filters == 0
            || self.hidden == 0
            || self.actions == 0
        {
            return Err(Error::Config(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }
}

/// Network input: `ego_inputs` ego features followed by one block of
/// `vehicle_inputs` features per sensed vehicle.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    data: Vec<f32>,
}

impl Observation {
    pub const EGO_LEN: usize = 3;
    pub const VEHICLE_LEN: usize = 4;

    /// Wraps a raw input vector after checking its length is `3 + 4·n`.
    pub fn from_raw(data: Vec<f32>) -> Result<Self> {
        if data.len() < Self::EGO_LEN || (data.len() - Self::EGO_LEN) % Self::VEHICLE_LEN != 0 {
            return Err(Error::InputShape(format!(
                "length {} is not {} + {}·n",
                data.len(),
                Self::EGO_LEN,
                Self::VEHICLE_LEN
            )));
        }
        Ok(Observation { data })
    }

    pub fn new(ego: [f32; 3], vehicles: &[[f32; 4]]) -> Self {
        let mut data = Vec::with_capacity(3 + 4 * vehicles.len());
        data.extend_from_slice(&ego);
        for v in vehicles {
            data.extend_from_slice(v);
        }
        Observation { data }
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn ego(&self) -> &[f32] {
        &self.data[..Self::EGO_LEN]
    }

    pub fn vehicle_count(&self) -> usize {
        (self.data.len() - Self::EGO_LEN) / Self::VEHICLE_LEN
    }

    pub fn vehicles(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data[Self::EGO_LEN..].chunks_exact(Self::VEHICLE_LEN)
    }

    pub fn into_raw(self) -> Vec<f32> {
        self.data
    }
}

/// One action value per discrete action.
#[derive(Clone, Debug, PartialEq)]
pub struct QVector<T = f32> {
    pub values: Vec<T>,
}

impl<T: Scalar> QVector<T> {
    /// Index of the largest value; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.values)
    }

    pub fn max(&self) -> T {
        self.values[self.argmax()]
    }
}

pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Flat parameter vector with a fixed layer layout.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T = f32> {
    arch: Architecture,
    layout: [LayerSpan; 12],
    data: Vec<T>,
}

/// Gradient buffer laid out like [`NetworkParams::as_slice`].
pub type Gradients<T> = Vec<T>;

impl<T: Scalar> NetworkParams<T> {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(NetworkParams {
            arch,
            layout: arch.layout(),
            data: vec![T::zero(); arch.parameter_count()],
        })
    }

    /// Uniform fan-in scaled initialization: `±sqrt(6/fan_in)` for the ReLU
    /// layers, `±sqrt(3/fan_in)` for the linear heads. Biases start at zero.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        let mut params = Self::zeros(arch)?;
        for layer in Layer::ALL {
            if layer.is_bias() {
                continue;
            }
            let bound = Self::init_bound(&arch, layer);
            for w in params.layer_mut(layer) {
                *w = T::of(rng.gen_range(-bound..=bound));
            }
        }
        Ok(params)
    }

    /// Largest magnitude [`NetworkParams::init`] can draw for a weight block.
    pub fn init_bound(arch: &Architecture, layer: Layer) -> f64 {
        let fan_in = arch.shape(layer).1 as f64;
        match layer {
            Layer::ValueWeights | Layer::AdvantageWeights => (3.0 / fan_in).sqrt(),
            _ => (6.0 / fan_in).sqrt(),
        }
    }

    pub fn from_raw(arch: Architecture, data: Vec<T>) -> Result<Self> {
        arch.validate()?;
        let expected = arch.parameter_count();
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                got: data.len(),
            });
        }
        Ok(NetworkParams {
            arch,
            layout: arch.layout(),
            data,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn span(&self, layer: Layer) -> LayerSpan {
        self.layout[layer as usize]
    }

    pub fn layer(&self, layer: Layer) -> &[T] {
        &self.data[self.span(layer).range()]
    }

    pub fn layer_mut(&mut self, layer: Layer) -> &mut [T] {
        let range = self.span(layer).range();
        &mut self.data[range]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Same weights converted to another precision.
    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        NetworkParams {
            arch: self.arch,
            layout: self.layout,
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn zero_gradients(&self) -> Gradients<T> {
        vec![T::zero(); self.data.len()]
    }

    fn check_observation(&self, obs: &Observation) -> Result<usize> {
        let raw = obs.as_slice();
        let ego = self.arch.ego_inputs;
        let per = self.arch.vehicle_inputs;
        if raw.len() < ego || (raw.len() - ego) % per != 0 {
            return Err(Error::InputShape(format!(
                "length {} does not fit {ego} ego inputs plus blocks of {per}",
                raw.len()
            )));
        }
        Ok((raw.len() - ego) / per)
    }

    pub fn forward(&self, obs: &Observation) -> Result<QVector<T>> {
        let mut cache = ForwardCache::default();
        self.forward_cached(obs, &mut cache)?;
        Ok(QVector { values: cache.q })
    }

    /// Forward pass that keeps every intermediate activation in `cache` for a
    /// later [`NetworkParams::backward`]. Returns the Q-values.
    pub fn forward_cached<'c>(
        &self,
        obs: &Observation,
        cache: &'c mut ForwardCache<T>,
    ) -> Result<&'c [T]> {
        let n_veh = self.check_observation(obs)?;
        let a = &self.arch;
        let f = a.conv_filters;
        let raw = obs.as_slice();

        cache.n_veh = n_veh;
        cache.conv1.clear();
        cache.conv1.resize(n_veh * f, T::zero());
        cache.conv2.clear();
        cache.conv2.resize(n_veh * f, T::zero());
        cache.argmax.clear();
        cache.argmax.resize(f, 0);
        cache.fc_in.clear();
        cache.fc_in.resize(a.ego_inputs + f, T::zero());

        let w1 = self.layer(Layer::Conv1Weights);
        let b1 = self.layer(Layer::Conv1Bias);
        let w2 = self.layer(Layer::Conv2Weights);
        let b2 = self.layer(Layer::Conv2Bias);
        let mut input = vec![T::zero(); a.vehicle_inputs];
        for n in 0..n_veh {
            let block = &raw[a.ego_inputs + n * a.vehicle_inputs..][..a.vehicle_inputs];
            for (dst, &src) in input.iter_mut().zip(block) {
                *dst = T::of(src as f64);
            }
            let c1 = &mut cache.conv1[n * f..(n + 1) * f];
            dense(w1, b1, &input, c1, true);
            let c2 = &mut cache.conv2[n * f..(n + 1) * f];
            dense(w2, b2, &cache.conv1[n * f..(n + 1) * f], c2, true);
        }

        // Global max-pool over vehicles; an empty road pools to zeros.
        for (i, &e) in raw[..a.ego_inputs].iter().enumerate() {
            cache.fc_in[i] = T::of(e as f64);
        }
        if n_veh > 0 {
            let pooled = &mut cache.fc_in[a.ego_inputs..];
            pooled.copy_from_slice(&cache.conv2[..f]);
            for n in 1..n_veh {
                let row = &cache.conv2[n * f..(n + 1) * f];
                for j in 0..f {
                    if row[j] > pooled[j] {
                        pooled[j] = row[j];
                        cache.argmax[j] = n;
                    }
                }
            }
        }

        cache.h1.resize(a.hidden, T::zero());
        cache.h2.resize(a.hidden, T::zero());
        cache.adv.resize(a.actions, T::zero());
        cache.q.resize(a.actions, T::zero());
        dense(
            self.layer(Layer::Fc1Weights),
            self.layer(Layer::Fc1Bias),
            &cache.fc_in,
            &mut cache.h1,
            true,
        );
        dense(
            self.layer(Layer::Fc2Weights),
            self.layer(Layer::Fc2Bias),
            &cache.h1,
            &mut cache.h2,
            true,
        );
        let mut value = [T::zero()];
        dense(
            self.layer(Layer::ValueWeights),
            self.layer(Layer::ValueBias),
            &cache.h2,
            &mut value,
            false,
        );
        cache.value = value[0];
        dense(
            self.layer(Layer::AdvantageWeights),
            self.layer(Layer::AdvantageBias),
            &cache.h2,
            &mut cache.adv,
            false,
        );
        let mean_adv = cache.adv.iter().fold(T::zero(), |s, &x| s + x) / T::of(a.actions as f64);
        for (q, &adv) in cache.q.iter_mut().zip(&cache.adv) {
            *q = cache.value + (adv - mean_adv);
        }
        Ok(&cache.q)
    }

    /// Accumulates into `grads` the gradient of `Σ_a dq[a]·Q(s,a)` with
    /// respect to every parameter. `cache` must come from
    /// [`NetworkParams::forward_cached`] on the same `obs` and parameters.
    pub fn backward(&self, cache: &ForwardCache<T>, obs: &Observation, dq: &[T], grads: &mut [T]) {
        let a = &self.arch;
        let f = a.conv_filters;
        let h = a.hidden;
        assert_eq!(dq.len(), a.actions, "upstream gradient length");
        assert_eq!(grads.len(), self.data.len(), "gradient buffer length");

        // Dueling combine: Q_a = V + A_a - mean(A).
        let dq_sum = dq.iter().fold(T::zero(), |s, &x| s + x);
        let d_value = dq_sum;
        let mean_share = dq_sum / T::of(a.actions as f64);
        let d_adv: Vec<T> = dq.iter().map(|&g| g - mean_share).collect();

        let mut d_h2 = vec![T::zero(); h];
        dense_backward(
            self.layer(Layer::ValueWeights),
            &cache.h2,
            &[d_value],
            &mut d_h2,
            grads,
            self.span(Layer::ValueWeights),
            self.span(Layer::ValueBias),
        );
        dense_backward(
            self.layer(Layer::AdvantageWeights),
            &cache.h2,
            &d_adv,
            &mut d_h2,
            grads,
            self.span(Layer::AdvantageWeights),
            self.span(Layer::AdvantageBias),
        );
        relu_mask(&mut d_h2, &cache.h2);

        let mut d_h1 = vec![T::zero(); h];
        dense_backward(
            self.layer(Layer::Fc2Weights),
            &cache.h1,
            &d_h2,
            &mut d_h1,
            grads,
            self.span(Layer::Fc2Weights),
            self.span(Layer::Fc2Bias),
        );
        relu_mask(&mut d_h1, &cache.h1);

        let mut d_fc_in = vec![T::zero(); a.ego_inputs + f];
        dense_backward(
            self.layer(Layer::Fc1Weights),
            &cache.fc_in,
            &d_h1,
            &mut d_fc_in,
            grads,
            self.span(Layer::Fc1Weights),
            self.span(Layer::Fc1Bias),
        );
        if cache.n_veh == 0 {
            return;
        }

        // Max-pool routes each filter's gradient to its argmax vehicle only.
        let d_pooled = &d_fc_in[a.ego_inputs..];
        let mut d_conv2 = vec![T::zero(); cache.n_veh * f];
        let mut touched = vec![false; cache.n_veh];
        for j in 0..f {
            let n = cache.argmax[j];
            if cache.conv2[n * f + j] > T::zero() && d_pooled[j] != T::zero() {
                d_conv2[n * f + j] = d_pooled[j];
                touched[n] = true;
            }
        }

        let raw = obs.as_slice();
        let mut d_conv1 = vec![T::zero(); f];
        let mut input = vec![T::zero(); a.vehicle_inputs];
        for n in (0..cache.n_veh).filter(|&n| touched[n]) {
            let c1 = &cache.conv1[n * f..(n + 1) * f];
            d_conv1.iter_mut().for_each(|x| *x = T::zero());
            dense_backward(
                self.layer(Layer::Conv2Weights),
                c1,
                &d_conv2[n * f..(n + 1) * f],
                &mut d_conv1,
                grads,
                self.span(Layer::Conv2Weights),
                self.span(Layer::Conv2Bias),
            );
            relu_mask(&mut d_conv1, c1);
            let block = &raw[a.ego_inputs + n * a.vehicle_inputs..][..a.vehicle_inputs];
            for (dst, &src) in input.iter_mut().zip(block) {
                *dst = T::of(src as f64);
            }
            dense_backward_no_input(
                &input,
                &d_conv1,
                grads,
                self.span(Layer::Conv1Weights),
                self.span(Layer::Conv1Bias),
            );
        }
    }

    /// Gradient of `upstream · Q(s, action)` for a single observation.
    pub fn backward_action(
        &self,
        obs: &Observation,
        action: usize,
        upstream: T,
    ) -> Result<Gradients<T>> {
        if action >= self.arch.actions {
            return Err(Error::Usage(format!(
                "action {action} out of range for {} actions",
                self.arch.actions
            )));
        }
        let mut cache = ForwardCache::default();
        self.forward_cached(obs, &mut cache)?;
        let mut dq = vec![T::zero(); self.arch.actions];
        dq[action] = upstream;
        let mut grads = self.zero_gradients();
        self.backward(&cache, obs, &dq, &mut grads);
        Ok(grads)
    }
}

/// Intermediate activations of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardCache<T> {
    n_veh: usize,
    conv1: Vec<T>,
    conv2: Vec<T>,
    argmax: Vec<usize>,
    fc_in: Vec<T>,
    h1: Vec<T>,
    h2: Vec<T>,
    value: T,
    adv: Vec<T>,
    q: Vec<T>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn q(&self) -> &[T] {
        &self.q
    }

    pub fn value(&self) -> T {
        self.value
    }

    /// Which vehicle won the max-pool for each filter.
    pub fn pool_winners(&self) -> &[usize] {
        if self.n_veh == 0 {
            &[]
        } else {
            &self.argmax
        }
    }

    /// ReLU on/off pattern of every hidden unit, used by tests to detect
    /// when a finite difference straddles a kink.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let f = |x: &T| *x > T::zero();
        self.conv1
            .iter()
            .map(f)
            .chain(self.conv2.iter().map(f))
            .chain(self.h1.iter().map(f))
            .chain(self.h2.iter().map(f))
            .collect()
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for k in 0..4 {
            acc[k] = acc[k] + a[c * 4 + k] * b[c * 4 + k];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 4..a.len() {
        tail = tail + a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn dense<T: Scalar>(w: &[T], b: &[T], x: &[T], out: &mut [T], relu: bool) {
    let cols = x.len();
    for (o, dst) in out.iter_mut().enumerate() {
        let z = b[o] + dot(&w[o * cols..(o + 1) * cols], x);
        *dst = if relu && z <= T::zero() { T::zero() } else { z };
    }
}

#[inline]
fn relu_mask<T: Scalar>(grad: &mut [T], activation: &[T]) {
    for (g, &act) in grad.iter_mut().zip(activation) {
        if act <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Backward through `y = W x + b`: accumulates dW, db into `grads` and
/// `Wᵀ dy` into `dx`.
#[inline]
fn dense_backward<T: Scalar>(
    w: &[T],
    x: &[T],
    dy: &[T],
    dx: &mut [T],
    grads: &mut [T],
    w_span: LayerSpan,
    b_span: LayerSpan,
) {
    let cols = x.len();
    for (o, &g) in dy.iter().enumerate() {
        if g == T::zero() {
            continue;
        }
        let gw = &mut grads[w_span.offset + o * cols..w_span.offset + (o + 1) * cols];
        for (dst, &xi) in gw.iter_mut().zip(x) {
            *dst = *dst + g * xi;
        }
        grads[b_span.offset + o] = grads[b_span.offset + o] + g;
        let row = &w[o * cols..(o + 1) * cols];
        for (dst, &wi) in dx.iter_mut().zip(row) {
            *dst = *dst + g * wi;
        }
    }
}

#[inline]
fn dense_backward_no_input<T: Scalar>(
    x: &[T],
    dy: &[T],
    grads: &mut [T],
    w_span: LayerSpan,
    b_span: LayerSpan,
) {
    let cols = x.len();
    for (o, &g) in dy.iter().enumerate() {
        if g == T::zero() {
            continue;
        }
        let gw = &mut grads[w_span.offset + o * cols..w_span.offset + (o + 1) * cols];
        for (dst, &xi) in gw.iter_mut().zip(x) {
            *dst = *dst + g * xi;
        }
        grads[b_span.offset + o] = grads[b_span.offset + o] + g;
    }
}
