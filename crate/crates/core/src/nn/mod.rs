//! Convolutional binary classifier with hand-written backpropagation.
//!
//! A [`Network`] is one or more convolutional towers whose flattened outputs
//! are concatenated and fed to a dense head ending in a sigmoid. Everything is
//! generic over [`Real`] so the same code trains in `f32` and is gradient
//! checked in `f64`.

mod checkpoint;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{read_checkpoint, write_checkpoint, load_checkpoint, save_checkpoint};
pub use layers::{BatchNorm, Conv, Dense, Layer, SeqCache, Sequential, BN_MOMENTUM, BN_VAR_FLOOR, OUTPUT_EPS};

use crate::error::{Error, Result};

pub trait Real:
    num_traits::Float + std::ops::AddAssign + std::fmt::Debug + Default + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel_rows: usize, kernel_cols: usize },
    Relu,
    /// 2x2, stride 2; a trailing odd row or column is dropped.
    MaxPool,
    SpatialDropout { rate: f64 },
    BatchNorm,
    Flatten,
    Dense { out_units: usize },
    Sigmoid,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool => "maxpool",
            LayerSpec::SpatialDropout { .. } => "spatial_dropout",
            LayerSpec::BatchNorm => "batchnorm",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Sigmoid => "sigmoid",
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.is_empty() {
            return Err(Error::Config(format!("{} layer receives an empty input", self.kind())));
        }
        match *self {
            LayerSpec::Conv { out_channels, kernel_rows, kernel_cols } => {
                if out_channels == 0 || kernel_rows == 0 || kernel_cols == 0 {
                    return Err(Error::Config("conv needs at least one output channel and a 1x1 kernel".into()));
                }
                if kernel_rows > input.h || kernel_cols > input.w {
                    return Err(Error::Config(format!(
                        "{}x{} input is smaller than the {kernel_rows}x{kernel_cols} kernel",
                        input.h, input.w
                    )));
                }
                Ok(Shape::new(out_channels, input.h - kernel_rows + 1, input.w - kernel_cols + 1))
            }
            LayerSpec::MaxPool => {
                if input.h < 2 || input.w < 2 {
                    return Err(Error::Config(format!("{}x{} input is smaller than the 2x2 pool", input.h, input.w)));
                }
                Ok(Shape::new(input.c, input.h / 2, input.w / 2))
            }
            LayerSpec::SpatialDropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
                }
                Ok(input)
            }
            LayerSpec::Flatten => Ok(Shape::new(input.len(), 1, 1)),
            LayerSpec::Dense { out_units } => {
                if out_units == 0 {
                    return Err(Error::Config("dense layer needs at least one unit".into()));
                }
                Ok(Shape::new(out_units, 1, 1))
            }
            LayerSpec::Relu | LayerSpec::BatchNorm | LayerSpec::Sigmoid => Ok(input),
        }
    }
}

/// Sizes of the default architecture.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ArchConfig {
    pub conv_channels: usize,
    /// Kernel size of the first two convolutions.
    pub kernel_early: usize,
    /// Kernel size of the last two convolutions.
    pub kernel_late: usize,
    pub dense_hidden: usize,
    pub dropout_rate: f64,
}

impl ArchConfig {
    pub fn full_scale() -> Self {
        ArchConfig { conv_channels: 32, kernel_early: 12, kernel_late: 9, dense_hidden: 64, dropout_rate: 0.3 }
    }

    /// Sized for a 16x16 spectral input.
    pub fn desk() -> Self {
        ArchConfig { conv_channels: 8, kernel_early: 3, kernel_late: 3, dense_hidden: 16, dropout_rate: 0.3 }
    }

    /// Convolutional tower: two conv blocks, pool and dropout, two more conv
    /// blocks, dropout and flatten.
    pub fn tower(&self) -> Vec<LayerSpec> {
        let conv = |k| LayerSpec::Conv { out_channels: self.conv_channels, kernel_rows: k, kernel_cols: k };
        let drop = LayerSpec::SpatialDropout { rate: self.dropout_rate };
        vec![
            conv(self.kernel_early),
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            conv(self.kernel_early),
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            LayerSpec::MaxPool,
            drop.clone(),
            conv(self.kernel_late),
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            conv(self.kernel_late),
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            drop,
            LayerSpec::Flatten,
        ]
    }

    pub fn head(&self) -> Vec<LayerSpec> {
        vec![
            LayerSpec::Dense { out_units: self.dense_hidden },
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            LayerSpec::Dense { out_units: 1 },
            LayerSpec::Sigmoid,
        ]
    }
}

/// Gradients of every trainable tensor, in [`Network::tensors`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F>(pub Vec<Vec<F>>);

impl<F: Real> Gradients<F> {
    pub fn check_finite(&self) -> Result<()> {
        for (tensor, g) in self.0.iter().enumerate() {
            if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { tensor, index });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    pub towers: Vec<SeqCache<F>>,
    pub head: SeqCache<F>,
    pub n: usize,
    pub mode: Mode,
    generation: u64,
}

impl<F: Real> ForwardCache<F> {
    /// Per-sample probabilities `q`.
    pub fn output(&self) -> &[F] {
        self.head.output()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<F> {
    pub towers: Vec<Sequential<F>>,
    pub head: Sequential<F>,
    /// Completed training epochs.
    pub epoch: u32,
    generation: u64,
}

impl<F: Real> Network<F> {
    pub fn new(tower_inputs: &[Shape], tower: &[LayerSpec], head: &[LayerSpec], seed: u64) -> Result<Self> {
        if tower_inputs.is_empty() {
            return Err(Error::Config("network needs at least one input tower".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let towers = tower_inputs
            .iter()
            .map(|&s| Sequential::build(s, tower, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let joined = towers.iter().map(|t| t.output_shape().len()).sum();
        let head = Sequential::build(Shape::new(joined, 1, 1), head, &mut rng)?;
        Self::from_parts(towers, head, 0)
    }

    pub(crate) fn from_parts(towers: Vec<Sequential<F>>, head: Sequential<F>, epoch: u32) -> Result<Self> {
        if head.layers.last() != Some(&Layer::Sigmoid) || head.output_shape().len() != 1 {
            return Err(Error::Config("the head must end in a single sigmoid unit".into()));
        }
        let joined: usize = towers.iter().map(|t| t.output_shape().len()).sum();
        if head.input.len() != joined {
            return Err(Error::Config(format!("head expects {} inputs, towers give {joined}", head.input.len())));
        }
        Ok(Network { towers, head, epoch, generation: 0 })
    }

    /// Default architecture with one tower per entry of `channels`.
    pub fn build(channels: &[usize], rows: usize, cols: usize, arch: &ArchConfig, seed: u64) -> Result<Self> {
        let inputs: Vec<Shape> = channels.iter().map(|&c| Shape::new(c, rows, cols)).collect();
        Self::new(&inputs, &arch.tower(), &arch.head(), seed)
    }

    /// Single-tower default network on a 64x64 (full) or 16x16 (desk) spectral input.
    pub fn build_default(input_channels: usize, desk_scale: bool, seed: u64) -> Result<Self> {
        if input_channels != 2 && input_channels != 4 {
            return Err(Error::Config(format!("input channels must be 2 or 4, got {input_channels}")));
        }
        let (arch, side) = if desk_scale { (ArchConfig::desk(), 16) } else { (ArchConfig::full_scale(), 64) };
        Self::build(&[input_channels], side, side, &arch, seed)
    }

    pub fn input_shapes(&self) -> Vec<Shape> {
        self.towers.iter().map(|t| t.input).collect()
    }

    pub fn n_params(&self) -> usize {
        self.towers.iter().map(|t| t.n_params()).sum::<usize>() + self.head.n_params()
    }

    fn sequences(&self) -> impl Iterator<Item = &Sequential<F>> {
        self.towers.iter().chain(std::iter::once(&self.head))
    }

    pub fn tensors(&self) -> Vec<&Vec<F>> {
        self.sequences().flat_map(|s| s.layers.iter()).flat_map(|l| l.tensors()).collect()
    }

    /// Mutable trainable tensors. Invalidates outstanding forward caches.
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<F>> {
        self.generation += 1;
        self.towers
            .iter_mut()
            .chain(std::iter::once(&mut self.head))
            .flat_map(|s| s.layers.iter_mut())
            .flat_map(|l| l.tensors_mut())
            .collect()
    }

    pub fn cast<G: Real>(&self) -> Network<G> {
        Network {
            towers: self.towers.iter().map(|t| t.cast()).collect(),
            head: self.head.cast(),
            epoch: self.epoch,
            generation: 0,
        }
    }

    /// `inputs[k]` holds `n` samples for tower `k`, sample-major, each sample
    /// channel-major. Dropout masks in train mode derive from `seed`.
    pub fn forward(&self, inputs: &[Vec<F>], n: usize, mode: Mode, seed: u64) -> Result<ForwardCache<F>> {
        if inputs.len() != self.towers.len() {
            return Err(Error::Dimension(format!("{} inputs for {} towers", inputs.len(), self.towers.len())));
        }
        let mut offset = 0;
        let mut tower_caches = Vec::with_capacity(self.towers.len());
        for (k, (tower, x)) in self.towers.iter().zip(inputs).enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            tower_caches.push(tower.forward(x.clone(), n, mode, &mut rng, offset)?);
            offset += tower.layers.len();
        }
        let joined = self.join(&tower_caches, n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(self.towers.len() as u64);
        let head = self.head.forward(joined, n, mode, &mut rng, offset)?;
        Ok(ForwardCache { towers: tower_caches, head, n, mode, generation: self.generation })
    }

    fn join(&self, caches: &[SeqCache<F>], n: usize) -> Vec<F> {
        if caches.len() == 1 {
            return caches[0].output().to_vec();
        }
        let widths: Vec<usize> = self.towers.iter().map(|t| t.output_shape().len()).collect();
        let mut out = Vec::with_capacity(n * widths.iter().sum::<usize>());
        for s in 0..n {
            for (c, &w) in caches.iter().zip(&widths) {
                out.extend_from_slice(&c.output()[s * w..(s + 1) * w]);
            }
        }
        out
    }

    /// Eval-mode probabilities.
    pub fn predict(&self, inputs: &[Vec<F>], n: usize) -> Result<Vec<F>> {
        Ok(self.forward(inputs, n, Mode::Eval, 0)?.output().to_vec())
    }

    /// Binary cross-entropy of the cached outputs against `targets` and its
    /// gradient with respect to every trainable tensor.
    pub fn backward(&self, cache: &ForwardCache<F>, targets: &[F]) -> Result<(Gradients<F>, f64)> {
        if cache.generation != self.generation {
            return Err(Error::StaleCache("parameters changed since the forward pass".into()));
        }
        if targets.len() != cache.n || cache.towers.len() != self.towers.len() {
            return Err(Error::StaleCache(format!("{} targets for a cached batch of {}", targets.len(), cache.n)));
        }
        let q = cache.output();
        let n = cache.n as f64;
        let mut loss = 0.0;
        let mut dpre = Vec::with_capacity(cache.n);
        for (&qi, &zi) in q.iter().zip(targets) {
            let (qf, zf) = (qi.f64().clamp(OUTPUT_EPS, 1.0 - OUTPUT_EPS), zi.f64());
            loss -= zf * qf.ln() + (1.0 - zf) * (1.0 - qf).ln();
            // sigmoid and cross-entropy fused
            dpre.push(F::of((qi.f64() - zf) / n));
        }
        loss /= n;
        let end = self.head.layers.len() - 1;
        let (head_grads, djoined) = self.head.backward_through(&cache.head, dpre, end);
        let widths: Vec<usize> = self.towers.iter().map(|t| t.output_shape().len()).collect();
        let total: usize = widths.iter().sum();
        let mut grads = Vec::new();
        let mut start = 0;
        for ((tower, tc), &w) in self.towers.iter().zip(&cache.towers).zip(&widths) {
            let dout: Vec<F> = if widths.len() == 1 {
                djoined.clone()
            } else {
                (0..cache.n).flat_map(|s| djoined[s * total + start..s * total + start + w].iter().copied()).collect()
            };
            grads.extend(tower.backward(tc, dout).0);
            start += w;
        }
        grads.extend(head_grads);
        Ok((Gradients(grads), loss))
    }

    pub fn update_running_stats(&mut self, cache: &ForwardCache<F>) -> Result<()> {
        if cache.mode != Mode::Train {
            return Err(Error::StaleCache("running statistics need a train-mode forward pass".into()));
        }
        if cache.towers.len() != self.towers.len() {
            return Err(Error::StaleCache("cache belongs to a different network".into()));
        }
        for (tower, tc) in self.towers.iter_mut().zip(&cache.towers) {
            tower.update_running_stats(tc);
        }
        self.head.update_running_stats(&cache.head);
        Ok(())
    }
}
