//! `HCNN` parameter checkpoints.
//!
//! ```text
//! "HCNN" | version u32 | epoch u32 | n_towers u32
//! per sequence (towers, then head):
//!     input c, h, w u32 | n_layers u32
//!     per layer: kind tag u8 | n_dims u32 | dims u32...
//! payload, f32 per sequence and layer in order:
//!     conv: weight, bias | batchnorm: gamma, beta, running mean, running var
//!     dense: weight, bias | spatial dropout: rate
//! optional optimizer section:
//!     "AMSG" | step u64 | lr, beta1, beta2, eps f64 | n_tensors u32
//!     per tensor: len u32 | m, v, v_max f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Layer, LayerSpec, Network, Real, Sequential, Shape};
use crate::archive::{read_f32s, write_f32s};
use crate::error::{Error, Result};
use crate::optim::{AmsGrad, AmsGradConfig};

const MAGIC: &[u8; 4] = b"HCNN";
const OPT_MAGIC: &[u8; 4] = b"AMSG";
const VERSION: u32 = 1;

fn tag(spec: &LayerSpec) -> u8 {
    match spec {
        LayerSpec::Conv { .. } => 1,
        LayerSpec::Relu => 2,
        LayerSpec::MaxPool => 3,
        LayerSpec::SpatialDropout { .. } => 4,
        LayerSpec::BatchNorm => 5,
        LayerSpec::Flatten => 6,
        LayerSpec::Dense { .. } => 7,
        LayerSpec::Sigmoid => 8,
    }
}

fn dims<F>(layer: &Layer<F>) -> Vec<u32> {
    match layer {
        Layer::Conv(c) => vec![c.out_channels, c.in_channels, c.kernel_rows, c.kernel_cols],
        Layer::MaxPool => vec![2, 2],
        Layer::BatchNorm(b) => vec![b.gamma.len()],
        Layer::Dense(d) => vec![d.n_out, d.n_in],
        _ => vec![],
    }
    .into_iter()
    .map(|v| v as u32)
    .collect()
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
    Ok(b)
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(get(r)?))
}

fn get_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_le_bytes(get(r)?))
}

fn payload<F: Real>(layer: &Layer<F>) -> Vec<Vec<f32>> {
    let c = |v: &Vec<F>| v.iter().map(|x| x.f64() as f32).collect::<Vec<f32>>();
    match layer {
        Layer::Conv(x) => vec![c(&x.weight), c(&x.bias)],
        Layer::BatchNorm(b) => vec![c(&b.gamma), c(&b.beta), c(&b.running_mean), c(&b.running_var)],
        Layer::Dense(d) => vec![c(&d.weight), c(&d.bias)],
        Layer::SpatialDropout(rate) => vec![vec![*rate as f32]],
        _ => vec![],
    }
}

pub fn write_checkpoint<F: Real, W: Write>(net: &Network<F>, opt: Option<&AmsGrad>, w: &mut W) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    put_u32(w, net.epoch)?;
    put_u32(w, net.towers.len() as u32)?;
    let seqs: Vec<&Sequential<F>> = net.sequences().collect();
    for s in &seqs {
        for v in [s.input.c, s.input.h, s.input.w, s.layers.len()] {
            put_u32(w, v as u32)?;
        }
        for layer in &s.layers {
            w.write_all(&[tag(&layer.spec())])?;
            let d = dims(layer);
            put_u32(w, d.len() as u32)?;
            for v in d {
                put_u32(w, v)?;
            }
        }
    }
    for s in &seqs {
        for layer in &s.layers {
            for t in payload(layer) {
                write_f32s(w, &t)?;
            }
        }
    }
    if let Some(opt) = opt {
        w.write_all(OPT_MAGIC)?;
        w.write_all(&opt.step.to_le_bytes())?;
        let c = &opt.config;
        for v in [c.learning_rate, c.beta1, c.beta2, c.epsilon] {
            w.write_all(&v.to_le_bytes())?;
        }
        put_u32(w, opt.m.len() as u32)?;
        for t in 0..opt.m.len() {
            put_u32(w, opt.m[t].len() as u32)?;
            for part in [&opt.m[t], &opt.v[t], &opt.v_max[t]] {
                let mut buf = Vec::with_capacity(part.len() * 8);
                for v in part.iter() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
        }
    }
    Ok(())
}

struct SeqHeader {
    input: Shape,
    layers: Vec<(u8, Vec<u32>)>,
}

fn spec_of(tag: u8, d: &[u32]) -> Result<LayerSpec> {
    let want = match tag {
        1 => 4,
        3 => 2,
        5 => 1,
        7 => 2,
        2 | 4 | 6 | 8 => 0,
        other => return Err(Error::Checkpoint(format!("unknown layer tag {other}"))),
    };
    if d.len() != want {
        return Err(Error::Checkpoint(format!("layer tag {tag} has {} dims, expected {want}", d.len())));
    }
    Ok(match tag {
        1 => LayerSpec::Conv { out_channels: d[0] as usize, kernel_rows: d[2] as usize, kernel_cols: d[3] as usize },
        2 => LayerSpec::Relu,
        3 => LayerSpec::MaxPool,
        // rate comes from the payload
        4 => LayerSpec::SpatialDropout { rate: 0.0 },
        5 => LayerSpec::BatchNorm,
        6 => LayerSpec::Flatten,
        7 => LayerSpec::Dense { out_units: d[0] as usize },
        _ => LayerSpec::Sigmoid,
    })
}

fn read_sequence<F: Real, R: Read>(h: &SeqHeader, r: &mut R) -> Result<Sequential<F>> {
    let specs = h.layers.iter().map(|(t, d)| spec_of(*t, d)).collect::<Result<Vec<_>>>()?;
    let mut seq = Sequential::build(h.input, &specs, &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| Error::Checkpoint(format!("inconsistent layer shapes: {e}")))?;
    for (layer, (_, d)) in seq.layers.iter_mut().zip(&h.layers) {
        if dims(layer) != *d {
            return Err(Error::Checkpoint(format!("layer dims {d:?} do not chain from the input shape")));
        }
        let mut take = |n: usize| -> Result<Vec<F>> {
            let v = read_f32s(r, n).map_err(|e| Error::Checkpoint(format!("truncated payload: {e}")))?;
            Ok(v.into_iter().map(|x| F::of(x as f64)).collect())
        };
        match layer {
            Layer::Conv(c) => {
                c.weight = take(c.weight.len())?;
                c.bias = take(c.bias.len())?;
            }
            Layer::BatchNorm(b) => {
                let n = b.gamma.len();
                b.gamma = take(n)?;
                b.beta = take(n)?;
                b.running_mean = take(n)?;
                b.running_var = take(n)?;
                if b.running_var.iter().any(|v| !(v.f64() > 0.0)) {
                    return Err(Error::Checkpoint("non-positive running variance".into()));
                }
            }
            Layer::Dense(dn) => {
                dn.weight = take(dn.weight.len())?;
                dn.bias = take(dn.bias.len())?;
            }
            Layer::SpatialDropout(rate) => {
                // shortest decimal form recovers the configured f64 rate
                let raw = read_f32s(r, 1).map_err(|e| Error::Checkpoint(format!("truncated payload: {e}")))?[0];
                let v: f64 = raw.to_string().parse().map_err(|_| Error::Checkpoint("bad dropout rate".into()))?;
                if !(0.0..1.0).contains(&v) {
                    return Err(Error::Checkpoint(format!("dropout rate {v} outside [0, 1)")));
                }
                *rate = v;
            }
            _ => {}
        }
    }
    Ok(seq)
}

pub fn read_checkpoint<F: Real, R: Read>(r: &mut R) -> Result<(Network<F>, Option<AmsGrad>)> {
    if &get::<_, 4>(r)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, expected HCNN".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let epoch = get_u32(r)?;
    let n_towers = get_u32(r)? as usize;
    if n_towers == 0 || n_towers > 64 {
        return Err(Error::Checkpoint(format!("implausible tower count {n_towers}")));
    }
    let mut headers = Vec::with_capacity(n_towers + 1);
    for _ in 0..=n_towers {
        let input = Shape::new(get_u32(r)? as usize, get_u32(r)? as usize, get_u32(r)? as usize);
        let n_layers = get_u32(r)? as usize;
        if n_layers > 4096 {
            return Err(Error::Checkpoint(format!("implausible layer count {n_layers}")));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let t = get::<_, 1>(r)?[0];
            let nd = get_u32(r)? as usize;
            if nd > 8 {
                return Err(Error::Checkpoint(format!("implausible dim count {nd}")));
            }
            let d = (0..nd).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
            layers.push((t, d));
        }
        headers.push(SeqHeader { input, layers });
    }
    let mut seqs = headers.iter().map(|h| read_sequence(h, r)).collect::<Result<Vec<Sequential<F>>>>()?;
    let head = seqs.pop().expect("head header read");
    let net = Network::from_parts(seqs, head, epoch).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let mut tag = [0u8; 4];
    let opt = match r.read_exact(&mut tag) {
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => None,
        Err(e) => return Err(e.into()),
        Ok(()) if &tag != OPT_MAGIC => return Err(Error::Checkpoint("unknown trailing section".into())),
        Ok(()) => {
            let step = u64::from_le_bytes(get(r)?);
            let config = AmsGradConfig {
                learning_rate: get_f64(r)?,
                beta1: get_f64(r)?,
                beta2: get_f64(r)?,
                epsilon: get_f64(r)?,
            };
            let n = get_u32(r)? as usize;
            let shapes: Vec<usize> = net.tensors().iter().map(|t| t.len()).collect();
            if n != 0 && n != shapes.len() {
                return Err(Error::Checkpoint(format!("optimizer holds {n} tensors, network {}", shapes.len())));
            }
            let mut opt = AmsGrad::new(config);
            opt.step = step;
            for &len in shapes.iter().take(n) {
                if get_u32(r)? as usize != len {
                    return Err(Error::Checkpoint("optimizer tensor shape differs from network".into()));
                }
                let mut part = || (0..len).map(|_| get_f64(r)).collect::<Result<Vec<f64>>>();
                opt.m.push(part()?);
                opt.v.push(part()?);
                opt.v_max.push(part()?);
            }
            Some(opt)
        }
    };
    Ok((net, opt))
}

pub fn save_checkpoint<F: Real>(net: &Network<F>, opt: Option<&AmsGrad>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(net, opt, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<(Network<F>, Option<AmsGrad>)> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
