//! Per-modality temporal encoder (dilated causal convolutions) and the MLP
//! prediction head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fusion::xavier_uniform;
use crate::numcore::{Bindings, Matrix, ParamId, ParamSet, Real, Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TcnConfig {
    pub levels: usize,
    pub kernel_size: usize,
    pub dilation_base: usize,
    /// Dropout on each level's convolution output while training.
    pub dropout: f64,
    pub bias: bool,
    /// Upper bound on the causal receptive field (left padding policy).
    pub max_receptive_field: usize,
    /// Apply ReLU after each residual sum, as in the usual TCN block.
    pub output_relu: bool,
}

impl Default for TcnConfig {
    fn default() -> Self {
        Self {
            levels: 2,
            kernel_size: 3,
            dilation_base: 2,
            dropout: 0.0,
            bias: true,
            max_receptive_field: 1024,
            output_relu: true,
        }
    }
}

impl TcnConfig {
    /// `1 + (k − 1) · Σ_i base^i` over all levels.
    pub fn receptive_field(&self) -> usize {
        let span: usize = (0..self.levels).map(|i| self.dilation_base.pow(i as u32)).sum();
        1 + (self.kernel_size.saturating_sub(1)) * span
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::config("TCN needs at least one level"));
        }
        if self.kernel_size < 2 {
            return Err(Error::config(format!("TCN kernel size must be at least 2, got {}", self.kernel_size)));
        }
        if self.dilation_base == 0 {
            return Err(Error::config("TCN dilation base must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("TCN dropout must be in [0, 1), got {}", self.dropout)));
        }
        let rf = self.receptive_field();
        if rf > self.max_receptive_field {
            return Err(Error::config(format!(
                "TCN receptive field {rf} exceeds the padding limit {}",
                self.max_receptive_field
            )));
        }
        Ok(())
    }
}

/// Inverted dropout with a seeded mask stream.
#[derive(Debug, Clone)]
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Self { rate, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Mask of `0` (dropped) and `1 / (1 − rate)` (kept) entries.
    pub fn mask<T: Real>(&mut self, rows: usize, cols: usize) -> Matrix<T> {
        let keep = T::from_f64(1.0 / (1.0 - self.rate));
        let rate = self.rate;
        let rng = &mut self.rng;
        Matrix::from_fn(rows, cols, |_, _| if rng.random::<f64>() < rate { T::zero() } else { keep })
    }

    /// Multiplies `x` by a fresh mask; a no-op when the rate is zero.
    pub fn apply<T: Real>(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        if self.rate == 0.0 {
            return Ok(x);
        }
        let (r, c) = tape.shape(x);
        let m = tape.constant(self.mask(r, c));
        Ok(tape.mul(x, m)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcnLevel {
    /// One `c × c` matrix per kernel tap; tap `k` sees the input delayed by
    /// `(kernel − 1 − k) · dilation` frames.
    pub taps: Vec<ParamId>,
    pub bias: Option<ParamId>,
    pub dilation: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcnLayout {
    pub config: TcnConfig,
    pub channels: usize,
    pub levels: Vec<TcnLevel>,
}

impl TcnLayout {
    pub fn init<T: Real, R: Rng + ?Sized>(
        config: &TcnConfig,
        channels: usize,
        params: &mut ParamSet<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let k = config.kernel_size;
        let bound = (6.0 / (channels + channels * k) as f64).sqrt();
        let mut levels = Vec::with_capacity(config.levels);
        for i in 0..config.levels {
            let taps = (0..k)
                .map(|t| {
                    let w = Matrix::from_fn(channels, channels, |_, _| T::from_f64(rng.random_range(-bound..=bound)));
                    params.add(format!("{prefix}level{i}.tap{t}"), w)
                })
                .collect();
            let bias = config.bias.then(|| params.add(format!("{prefix}level{i}.bias"), Matrix::zeros(channels, 1)));
            levels.push(TcnLevel { taps, bias, dilation: config.dilation_base.pow(i as u32) });
        }
        Ok(Self { config: config.clone(), channels, levels })
    }
}

/// Residual stack of causal dilated convolutions:
/// `x ← ReLU(x + ReLU(Σ_k W_k · shift(x, (K−1−k)·dilation) + b))` per level
/// (the outer ReLU is optional).
/// Output frame `i` depends only on input frames `≤ i`.
pub fn tcn_forward<T: Real>(
    tape: &mut Tape<T>,
    layout: &TcnLayout,
    bindings: &Bindings,
    x: Var,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let (c, l) = tape.shape(x);
    if c != layout.channels {
        return Err(Error::config(format!("TCN expects {} channels, got {c}", layout.channels)));
    }
    let k = layout.config.kernel_size;
    let mut h = x;
    for level in &layout.levels {
        let mut acc: Option<Var> = None;
        for (t, &tap) in level.taps.iter().enumerate() {
            let delay = (k - 1 - t) * level.dilation;
            let shifted = if delay == 0 { h } else { tape.shift_right(h, delay) };
            let term = tape.matmul(bindings.var(tap), shifted)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
        let mut acc = acc.expect("kernel size is at least 2");
        if let Some(b) = level.bias {
            let bb = tape.broadcast_col(bindings.var(b), l)?;
            acc = tape.add(acc, bb)?;
        }
        let mut y = tape.relu(acc);
        if let Some(d) = dropout.as_deref_mut() {
            y = d.apply(tape, y)?;
        }
        let sum = tape.add(h, y)?;
        h = if layout.config.output_relu { tape.relu(sum) } else { sum };
    }
    Ok(h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden: Vec<usize>,
    /// 1 for a single target, 2 for joint valence/arousal.
    pub outputs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadLayout {
    pub config: HeadConfig,
    pub inputs: usize,
    /// `(weight, bias)` per layer; weights are `out × in`, biases `out × 1`.
    pub layers: Vec<(ParamId, ParamId)>,
}

impl HeadLayout {
    pub fn init<T: Real, R: Rng + ?Sized>(
        config: &HeadConfig,
        inputs: usize,
        params: &mut ParamSet<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        if config.outputs == 0 || config.hidden.contains(&0) {
            return Err(Error::config("head layer sizes must be at least 1"));
        }
        let mut layers = Vec::new();
        let mut fan_in = inputs;
        for (i, &width) in config.hidden.iter().chain(std::iter::once(&config.outputs)).enumerate() {
            let w = params.add(format!("{prefix}layer{i}.weight"), xavier_uniform(width, fan_in, rng));
            let b = params.add(format!("{prefix}layer{i}.bias"), Matrix::zeros(width, 1));
            layers.push((w, b));
            fan_in = width;
        }
        Ok(Self { config: config.clone(), inputs, layers })
    }
}

/// Per-frame MLP: ReLU hidden layers, tanh output in `[-1, 1]`.
/// Returns an `outputs × L` matrix.
pub fn head_forward<T: Real>(tape: &mut Tape<T>, layout: &HeadLayout, bindings: &Bindings, fused: Var) -> Result<Var> {
    let l = tape.shape(fused).1;
    let mut h = fused;
    let last = layout.layers.len() - 1;
    for (i, &(w, b)) in layout.layers.iter().enumerate() {
        let z = tape.matmul(bindings.var(w), h)?;
        let bb = tape.broadcast_col(bindings.var(b), l)?;
        let z = tape.add(z, bb)?;
        h = if i == last { tape.tanh(z) } else { tape.relu(z) };
    }
    Ok(h)
}
