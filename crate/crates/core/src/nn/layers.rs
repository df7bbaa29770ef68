//! Layer kernels and the sequential stack that chains them.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{LayerSpec, Mode, Real, Shape};
use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_VAR_FLOOR: f64 = 1e-5;
pub const OUTPUT_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<F> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_rows: usize,
    pub kernel_cols: usize,
    /// `[out][in][row][col]`
    pub weight: Vec<F>,
    pub bias: Vec<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<F> {
    pub gamma: Vec<F>,
    pub beta: Vec<F>,
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    pub n_in: usize,
    pub n_out: usize,
    /// `[out][in]`
    pub weight: Vec<F>,
    pub bias: Vec<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<F> {
    Conv(Conv<F>),
    Relu,
    MaxPool,
    SpatialDropout(f64),
    BatchNorm(BatchNorm<F>),
    Flatten,
    Dense(Dense<F>),
    Sigmoid,
}

fn glorot<F: Real>(rng: &mut ChaCha8Rng, n: usize, fan_in: usize, fan_out: usize) -> Vec<F> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| F::of(rng.random_range(-bound..=bound))).collect()
}

impl<F: Real> Layer<F> {
    /// Fresh layer with Glorot-uniform weights and zero biases.
    pub fn init(spec: &LayerSpec, input: Shape, rng: &mut ChaCha8Rng) -> Result<(Self, Shape)> {
        let out = spec.output_shape(input)?;
        let layer = match *spec {
            LayerSpec::Conv { out_channels, kernel_rows, kernel_cols } => {
                let k = kernel_rows * kernel_cols;
                Layer::Conv(Conv {
                    in_channels: input.c,
                    out_channels,
                    kernel_rows,
                    kernel_cols,
                    weight: glorot(rng, out_channels * input.c * k, input.c * k, out_channels * k),
                    bias: vec![F::zero(); out_channels],
                })
            }
            LayerSpec::Dense { out_units } => {
                let n_in = input.len();
                Layer::Dense(Dense {
                    n_in,
                    n_out: out_units,
                    weight: glorot(rng, out_units * n_in, n_in, out_units),
                    bias: vec![F::zero(); out_units],
                })
            }
            LayerSpec::BatchNorm => Layer::BatchNorm(BatchNorm {
                gamma: vec![F::one(); input.c],
                beta: vec![F::zero(); input.c],
                running_mean: vec![F::zero(); input.c],
                running_var: vec![F::one(); input.c],
            }),
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::MaxPool => Layer::MaxPool,
            LayerSpec::SpatialDropout { rate } => Layer::SpatialDropout(rate),
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::Sigmoid => Layer::Sigmoid,
        };
        Ok((layer, out))
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv(c) => LayerSpec::Conv {
                out_channels: c.out_channels,
                kernel_rows: c.kernel_rows,
                kernel_cols: c.kernel_cols,
            },
            Layer::Relu => LayerSpec::Relu,
            Layer::MaxPool => LayerSpec::MaxPool,
            Layer::SpatialDropout(rate) => LayerSpec::SpatialDropout { rate: *rate },
            Layer::BatchNorm(_) => LayerSpec::BatchNorm,
            Layer::Flatten => LayerSpec::Flatten,
            Layer::Dense(d) => LayerSpec::Dense { out_units: d.n_out },
            Layer::Sigmoid => LayerSpec::Sigmoid,
        }
    }

    /// Trainable tensors in declaration order.
    pub fn tensors(&self) -> Vec<&Vec<F>> {
        match self {
            Layer::Conv(c) => vec![&c.weight, &c.bias],
            Layer::BatchNorm(b) => vec![&b.gamma, &b.beta],
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            _ => vec![],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<F>> {
        match self {
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta],
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            _ => vec![],
        }
    }

    pub fn cast<G: Real>(&self) -> Layer<G> {
        let c = |v: &Vec<F>| v.iter().map(|x| G::of(x.f64())).collect::<Vec<G>>();
        match self {
            Layer::Conv(x) => Layer::Conv(Conv {
                in_channels: x.in_channels,
                out_channels: x.out_channels,
                kernel_rows: x.kernel_rows,
                kernel_cols: x.kernel_cols,
                weight: c(&x.weight),
                bias: c(&x.bias),
            }),
            Layer::BatchNorm(b) => Layer::BatchNorm(BatchNorm {
                gamma: c(&b.gamma),
                beta: c(&b.beta),
                running_mean: c(&b.running_mean),
                running_var: c(&b.running_var),
            }),
            Layer::Dense(d) => Layer::Dense(Dense {
                n_in: d.n_in,
                n_out: d.n_out,
                weight: c(&d.weight),
                bias: c(&d.bias),
            }),
            Layer::Relu => Layer::Relu,
            Layer::MaxPool => Layer::MaxPool,
            Layer::SpatialDropout(r) => Layer::SpatialDropout(*r),
            Layer::Flatten => Layer::Flatten,
            Layer::Sigmoid => Layer::Sigmoid,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct NormCache<F> {
    xhat: Vec<F>,
    inv_std: Vec<F>,
    pub(crate) mean: Vec<f64>,
    pub(crate) var: Vec<f64>,
    floored: Vec<bool>,
    train: bool,
}

#[derive(Debug, Clone)]
pub(crate) enum Aux<F> {
    None,
    Pool(Vec<u32>),
    Dropout(Vec<F>),
    Norm(NormCache<F>),
}

/// Activations and per-layer state recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct SeqCache<F> {
    /// `acts[0]` is the input, `acts[i + 1]` the output of layer `i`.
    pub acts: Vec<Vec<F>>,
    pub(crate) aux: Vec<Aux<F>>,
    pub n: usize,
    pub mode: Mode,
}

impl<F> SeqCache<F> {
    pub fn output(&self) -> &[F] {
        self.acts.last().expect("cache holds the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequential<F> {
    pub input: Shape,
    /// Output shape of each layer.
    pub shapes: Vec<Shape>,
    pub layers: Vec<Layer<F>>,
}

impl<F: Real> Sequential<F> {
    pub fn build(input: Shape, specs: &[LayerSpec], rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut shape = input;
        let mut layers = Vec::with_capacity(specs.len());
        let mut shapes = Vec::with_capacity(specs.len());
        for spec in specs {
            let (layer, out) = Layer::init(spec, shape, rng)?;
            layers.push(layer);
            shapes.push(out);
            shape = out;
        }
        Ok(Sequential { input, shapes, layers })
    }

    pub fn output_shape(&self) -> Shape {
        self.shapes.last().copied().unwrap_or(self.input)
    }

    fn shape_in(&self, i: usize) -> Shape {
        if i == 0 {
            self.input
        } else {
            self.shapes[i - 1]
        }
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().flat_map(|l| l.tensors()).map(|t| t.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> Sequential<G> {
        Sequential { input: self.input, shapes: self.shapes.clone(), layers: self.layers.iter().map(|l| l.cast()).collect() }
    }

    /// `x` is `n` samples of the input shape, sample-major. `layer_offset`
    /// only shifts layer indices reported in errors.
    pub fn forward(&self, x: Vec<F>, n: usize, mode: Mode, rng: &mut ChaCha8Rng, layer_offset: usize) -> Result<SeqCache<F>> {
        if n == 0 || x.len() != n * self.input.len() {
            return Err(Error::Dimension(format!(
                "{} input values for {n} samples of {}",
                x.len(),
                self.input.len()
            )));
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut aux = Vec::with_capacity(self.layers.len());
        acts.push(x);
        for (i, layer) in self.layers.iter().enumerate() {
            let inp = &acts[i];
            let (si, so) = (self.shape_in(i), self.shapes[i]);
            let (out, a) = match layer {
                Layer::Conv(c) => (conv_forward(c, inp, n, si, so), Aux::None),
                Layer::Relu => (inp.iter().map(|&v| v.max(F::zero())).collect(), Aux::None),
                Layer::MaxPool => {
                    let (o, idx) = pool_forward(inp, n, si, so);
                    (o, Aux::Pool(idx))
                }
                Layer::SpatialDropout(rate) => match mode {
                    Mode::Eval => (inp.clone(), Aux::None),
                    Mode::Train => {
                        let scale = F::of(1.0 / (1.0 - rate));
                        let mask: Vec<F> = (0..n * si.c)
                            .map(|_| if rng.random::<f64>() < *rate { F::zero() } else { scale })
                            .collect();
                        let hw = si.h * si.w;
                        let out = inp.iter().enumerate().map(|(j, &v)| v * mask[j / hw]).collect();
                        (out, Aux::Dropout(mask))
                    }
                },
                Layer::BatchNorm(b) => {
                    let (o, cache) = norm_forward(b, inp, n, si, mode);
                    (o, Aux::Norm(cache))
                }
                Layer::Flatten => (inp.clone(), Aux::None),
                Layer::Dense(d) => (dense_forward(d, inp, n), Aux::None),
                Layer::Sigmoid => {
                    let (lo, hi) = (F::of(OUTPUT_EPS), F::of(1.0 - OUTPUT_EPS));
                    let out = inp
                        .iter()
                        .map(|&v| (F::one() / (F::one() + (-v).exp())).max(lo).min(hi))
                        .collect();
                    (out, Aux::None)
                }
            };
            if out.iter().any(|v: &F| !v.is_finite()) {
                return Err(Error::NumericOverflow { layer: layer_offset + i, kind: layer.spec().kind() });
            }
            acts.push(out);
            aux.push(a);
        }
        Ok(SeqCache { acts, aux, n, mode })
    }

    /// Back-propagates `dout`, the gradient with respect to `acts[end]`,
    /// through layers `0..end`. Returns gradients of those layers' trainable
    /// tensors in declaration order and the gradient with respect to the input.
    pub fn backward_through(&self, cache: &SeqCache<F>, mut dout: Vec<F>, end: usize) -> (Vec<Vec<F>>, Vec<F>) {
        let n = cache.n;
        let mut per_layer: Vec<Vec<Vec<F>>> = vec![Vec::new(); end];
        for i in (0..end).rev() {
            let (si, so) = (self.shape_in(i), self.shapes[i]);
            let inp = &cache.acts[i];
            let out = &cache.acts[i + 1];
            dout = match (&self.layers[i], &cache.aux[i]) {
                (Layer::Conv(c), _) => {
                    let (dx, dw, db) = conv_backward(c, inp, &dout, n, si, so);
                    per_layer[i] = vec![dw, db];
                    dx
                }
                (Layer::Relu, _) => dout.iter().zip(out).map(|(&g, &y)| if y > F::zero() { g } else { F::zero() }).collect(),
                (Layer::MaxPool, Aux::Pool(idx)) => {
                    let mut dx = vec![F::zero(); inp.len()];
                    for (g, &j) in dout.iter().zip(idx) {
                        dx[j as usize] += *g;
                    }
                    dx
                }
                (Layer::SpatialDropout(_), Aux::Dropout(mask)) => {
                    let hw = si.h * si.w;
                    dout.iter().enumerate().map(|(j, &g)| g * mask[j / hw]).collect()
                }
                (Layer::SpatialDropout(_), _) | (Layer::Flatten, _) => dout,
                (Layer::BatchNorm(b), Aux::Norm(nc)) => {
                    let (dx, dg, dbeta) = norm_backward(b, nc, &dout, n, si);
                    per_layer[i] = vec![dg, dbeta];
                    dx
                }
                (Layer::Dense(d), _) => {
                    let (dx, dw, db) = dense_backward(d, inp, &dout, n);
                    per_layer[i] = vec![dw, db];
                    dx
                }
                (Layer::Sigmoid, _) => dout.iter().zip(out).map(|(&g, &q)| g * q * (F::one() - q)).collect(),
                (layer, _) => unreachable!("cache does not match layer {}", layer.spec().kind()),
            };
        }
        (per_layer.into_iter().flatten().collect(), dout)
    }

    pub fn backward(&self, cache: &SeqCache<F>, dout: Vec<F>) -> (Vec<Vec<F>>, Vec<F>) {
        self.backward_through(cache, dout, self.layers.len())
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, cache: &SeqCache<F>) {
        for (layer, aux) in self.layers.iter_mut().zip(&cache.aux) {
            if let (Layer::BatchNorm(b), Aux::Norm(nc)) = (layer, aux) {
                if !nc.train {
                    continue;
                }
                for c in 0..b.gamma.len() {
                    let rm = BN_MOMENTUM * b.running_mean[c].f64() + (1.0 - BN_MOMENTUM) * nc.mean[c];
                    let rv = BN_MOMENTUM * b.running_var[c].f64() + (1.0 - BN_MOMENTUM) * nc.var[c].max(BN_VAR_FLOOR);
                    b.running_mean[c] = F::of(rm);
                    b.running_var[c] = F::of(rv);
                }
            }
        }
    }
}

fn conv_forward<F: Real>(c: &Conv<F>, x: &[F], n: usize, si: Shape, so: Shape) -> Vec<F> {
    let (kr, kc) = (c.kernel_rows, c.kernel_cols);
    let (plane_in, plane_out) = (si.h * si.w, so.h * so.w);
    let mut out = vec![F::zero(); n * so.len()];
    for s in 0..n {
        let xs = &x[s * si.len()..(s + 1) * si.len()];
        let ys = &mut out[s * so.len()..(s + 1) * so.len()];
        for o in 0..c.out_channels {
            let yo = &mut ys[o * plane_out..(o + 1) * plane_out];
            yo.iter_mut().for_each(|v| *v = c.bias[o]);
            for i in 0..c.in_channels {
                let xi = &xs[i * plane_in..(i + 1) * plane_in];
                let wk = &c.weight[(o * c.in_channels + i) * kr * kc..][..kr * kc];
                for a in 0..kr {
                    for b in 0..kc {
                        let w = wk[a * kc + b];
                        for y in 0..so.h {
                            let src = &xi[(y + a) * si.w + b..][..so.w];
                            let dst = &mut yo[y * so.w..(y + 1) * so.w];
                            for (d, &v) in dst.iter_mut().zip(src) {
                                *d += w * v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward<F: Real>(c: &Conv<F>, x: &[F], dy: &[F], n: usize, si: Shape, so: Shape) -> (Vec<F>, Vec<F>, Vec<F>) {
    let (kr, kc) = (c.kernel_rows, c.kernel_cols);
    let (plane_in, plane_out) = (si.h * si.w, so.h * so.w);
    let mut dx = vec![F::zero(); x.len()];
    let mut dw = vec![F::zero(); c.weight.len()];
    let mut db = vec![F::zero(); c.bias.len()];
    for s in 0..n {
        let xs = &x[s * si.len()..(s + 1) * si.len()];
        let dys = &dy[s * so.len()..(s + 1) * so.len()];
        let dxs = &mut dx[s * si.len()..(s + 1) * si.len()];
        for o in 0..c.out_channels {
            let go = &dys[o * plane_out..(o + 1) * plane_out];
            db[o] += go.iter().fold(F::zero(), |acc, &g| acc + g);
            for i in 0..c.in_channels {
                let xi = &xs[i * plane_in..(i + 1) * plane_in];
                let dxi = &mut dxs[i * plane_in..(i + 1) * plane_in];
                let base = (o * c.in_channels + i) * kr * kc;
                for a in 0..kr {
                    for b in 0..kc {
                        let w = c.weight[base + a * kc + b];
                        let mut acc = F::zero();
                        for y in 0..so.h {
                            let g = &go[y * so.w..(y + 1) * so.w];
                            let off = (y + a) * si.w + b;
                            for ((&gv, &xv), d) in g.iter().zip(&xi[off..off + so.w]).zip(&mut dxi[off..off + so.w]) {
                                acc += gv * xv;
                                *d += w * gv;
                            }
                        }
                        dw[base + a * kc + b] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

fn pool_forward<F: Real>(x: &[F], n: usize, si: Shape, so: Shape) -> (Vec<F>, Vec<u32>) {
    let mut out = Vec::with_capacity(n * so.len());
    let mut idx = Vec::with_capacity(n * so.len());
    for s in 0..n {
        for c in 0..si.c {
            let base = (s * si.c + c) * si.h * si.w;
            for y in 0..so.h {
                for xo in 0..so.w {
                    let mut best = base + 2 * y * si.w + 2 * xo;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let j = base + (2 * y + dy) * si.w + 2 * xo + dx;
                        if x[j] > x[best] {
                            best = j;
                        }
                    }
                    out.push(x[best]);
                    idx.push(best as u32);
                }
            }
        }
    }
    (out, idx)
}

fn norm_forward<F: Real>(b: &BatchNorm<F>, x: &[F], n: usize, si: Shape, mode: Mode) -> (Vec<F>, NormCache<F>) {
    let ch = si.c;
    let hw = si.h * si.w;
    let m = (n * hw) as f64;
    let mut mean = vec![0.0f64; ch];
    let mut var = vec![0.0f64; ch];
    let train = mode == Mode::Train;
    if train {
        for s in 0..n {
            for c in 0..ch {
                mean[c] += x[(s * ch + c) * hw..][..hw].iter().map(|v| v.f64()).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for s in 0..n {
            for c in 0..ch {
                var[c] += x[(s * ch + c) * hw..][..hw].iter().map(|v| (v.f64() - mean[c]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
    } else {
        for c in 0..ch {
            mean[c] = b.running_mean[c].f64();
            var[c] = b.running_var[c].f64();
        }
    }
    let floored: Vec<bool> = var.iter().map(|&v| v < BN_VAR_FLOOR).collect();
    let inv_std: Vec<F> = var.iter().map(|&v| F::of(1.0 / v.max(BN_VAR_FLOOR).sqrt())).collect();
    let mut xhat = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    for s in 0..n {
        for c in 0..ch {
            let mu = F::of(mean[c]);
            for &v in &x[(s * ch + c) * hw..][..hw] {
                let h = (v - mu) * inv_std[c];
                xhat.push(h);
                out.push(b.gamma[c] * h + b.beta[c]);
            }
        }
    }
    (out, NormCache { xhat, inv_std, mean, var, floored, train })
}

fn norm_backward<F: Real>(b: &BatchNorm<F>, nc: &NormCache<F>, dy: &[F], n: usize, si: Shape) -> (Vec<F>, Vec<F>, Vec<F>) {
    let ch = si.c;
    let hw = si.h * si.w;
    let m = (n * hw) as f64;
    let mut dgamma = vec![0.0f64; ch];
    let mut dbeta = vec![0.0f64; ch];
    for s in 0..n {
        for c in 0..ch {
            let r = (s * ch + c) * hw..(s * ch + c + 1) * hw;
            for (g, h) in dy[r.clone()].iter().zip(&nc.xhat[r]) {
                dgamma[c] += g.f64() * h.f64();
                dbeta[c] += g.f64();
            }
        }
    }
    let mut dx = vec![F::zero(); dy.len()];
    for s in 0..n {
        for c in 0..ch {
            let gamma = b.gamma[c].f64();
            let inv = nc.inv_std[c].f64();
            // sums of dxhat and dxhat * xhat are gamma * dbeta and gamma * dgamma
            let (sum_d, sum_dh) = (gamma * dbeta[c], gamma * dgamma[c]);
            let r = (s * ch + c) * hw..(s * ch + c + 1) * hw;
            for ((d, g), h) in dx[r.clone()].iter_mut().zip(&dy[r.clone()]).zip(&nc.xhat[r]) {
                let dh = gamma * g.f64();
                *d = F::of(if !nc.train {
                    dh * inv
                } else if nc.floored[c] {
                    inv * (dh - sum_d / m)
                } else {
                    inv * (dh - sum_d / m - h.f64() * sum_dh / m)
                });
            }
        }
    }
    (dx, dgamma.into_iter().map(F::of).collect(), dbeta.into_iter().map(F::of).collect())
}

fn dense_forward<F: Real>(d: &Dense<F>, x: &[F], n: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(n * d.n_out);
    for s in 0..n {
        let xs = &x[s * d.n_in..(s + 1) * d.n_in];
        for o in 0..d.n_out {
            let w = &d.weight[o * d.n_in..(o + 1) * d.n_in];
            out.push(w.iter().zip(xs).fold(d.bias[o], |acc, (&a, &b)| acc + a * b));
        }
    }
    out
}

fn dense_backward<F: Real>(d: &Dense<F>, x: &[F], dy: &[F], n: usize) -> (Vec<F>, Vec<F>, Vec<F>) {
    let mut dx = vec![F::zero(); x.len()];
    let mut dw = vec![F::zero(); d.weight.len()];
    let mut db = vec![F::zero(); d.n_out];
    for s in 0..n {
        let xs = &x[s * d.n_in..(s + 1) * d.n_in];
        let dxs = &mut dx[s * d.n_in..(s + 1) * d.n_in];
        for o in 0..d.n_out {
            let g = dy[s * d.n_out + o];
            db[o] += g;
            let w = &d.weight[o * d.n_in..(o + 1) * d.n_in];
            let dwo = &mut dw[o * d.n_in..(o + 1) * d.n_in];
            for i in 0..d.n_in {
                dwo[i] += g * xs[i];
                dxs[i] += g * w[i];
            }
        }
    }
    (dx, dw, db)
}
