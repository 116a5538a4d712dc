//! Little-endian binary formats for scorers (projection + ranking densities)
//! and network checkpoints.
//!
//! Scorer layout after the 4-byte magic `RPSC` and a `u32` version:
//! `d: u64, c: u64, lambda: f64, A: d·c f64 (row-major)`, then for each of
//! the `c` columns `lo: f64, hi: f64, bins: u64, fg: bins f64, bg: bins f64,
//! kl: f64`. Checkpoints (`RPCK`) store the input shape, class count and a
//! tagged record per layer; pool records embed an optional scorer.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Init, Layer, LayerSpec, Network, Scorer};
use crate::pooling::{PoolSpec, Strategy};
use crate::projection::Projection;
use crate::ranking::{ColumnDensity, HistogramDensity, RankingModel};
use crate::tensor::Matrix;

const SCORER_MAGIC: &[u8; 4] = b"RPSC";
const CHECKPOINT_MAGIC: &[u8; 4] = b"RPCK";
const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|&x| self.f64(x));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end =
            end.ok_or_else(|| Error::Format(format!("truncated artifact at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Format(format!("size {v} does not fit in memory")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(Error::Format(format!(
                "artifact claims {n} values past its end"
            )));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::Format(format!(
                "bad magic, expected {}",
                String::from_utf8_lossy(magic)
            )));
        }
        let v = self.u32()?;
        if v != VERSION {
            return Err(Error::Format(format!("unsupported version {v}")));
        }
        Ok(())
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn write_scorer_body(w: &mut Writer, s: &Scorer) {
    let a = &s.projection.a;
    w.u64(a.rows());
    w.u64(a.cols());
    w.f64(s.projection.lambda_reg);
    w.f64s(a.data());
    for col in &s.ranking.columns {
        w.f64(col.fg.lo);
        w.f64(col.fg.hi);
        w.u64(col.fg.bins());
        w.f64s(&col.fg.mass);
        w.f64s(&col.bg.mass);
        w.f64(col.kl);
    }
}

fn read_scorer_body(r: &mut Reader) -> Result<Scorer> {
    let d = r.u64()?;
    let c = r.u64()?;
    let lambda = r.f64()?;
    let len = d
        .checked_mul(c)
        .ok_or_else(|| Error::Format("projection size overflows".into()))?;
    let a = Matrix::new(d, c, r.f64s(len)?)?;
    let mut columns = Vec::with_capacity(c.min(1 << 16));
    for _ in 0..c {
        let lo = r.f64()?;
        let hi = r.f64()?;
        let bins = r.u64()?;
        let fg = r.f64s(bins)?;
        let bg = r.f64s(bins)?;
        let kl = r.f64()?;
        columns.push(ColumnDensity {
            fg: HistogramDensity { lo, hi, mass: fg },
            bg: HistogramDensity { lo, hi, mass: bg },
            kl,
        });
    }
    Ok(Scorer {
        projection: Projection::from_matrix(a, lambda),
        ranking: RankingModel { columns },
    })
}

pub fn encode_scorer(s: &Scorer) -> Vec<u8> {
    let mut w = Writer(SCORER_MAGIC.to_vec());
    w.u32(VERSION);
    write_scorer_body(&mut w, s);
    w.0
}

pub fn decode_scorer(bytes: &[u8]) -> Result<Scorer> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(SCORER_MAGIC)?;
    let s = read_scorer_body(&mut r)?;
    r.finish()?;
    Ok(s)
}

pub fn save_scorer(path: impl AsRef<Path>, s: &Scorer) -> Result<()> {
    Ok(fs::write(path, encode_scorer(s))?)
}

pub fn load_scorer(path: impl AsRef<Path>) -> Result<Scorer> {
    decode_scorer(&fs::read(path)?)
}

fn strategy_tag(s: Strategy) -> u32 {
    Strategy::ALL.iter().position(|&x| x == s).expect("listed") as u32
}

pub fn encode_checkpoint(net: &Network) -> Vec<u8> {
    let mut w = Writer(CHECKPOINT_MAGIC.to_vec());
    w.u32(VERSION);
    w.u64(net.input.0);
    w.u64(net.input.1);
    w.u64(net.input.2);
    w.u64(net.classes);
    w.u64(net.layers.len());
    let params = |w: &mut Writer, weights: &[f64], bias: &[f64]| {
        w.u64(weights.len());
        w.f64s(weights);
        w.f64s(bias);
    };
    for layer in &net.layers {
        match layer {
            Layer::Conv(c) => {
                w.u32(0);
                w.u64(c.kh);
                w.u64(c.kw);
                w.u64(c.cout);
                params(&mut w, &c.weights, &c.bias);
            }
            Layer::Relu => w.u32(1),
            Layer::Pool(p) => {
                w.u32(2);
                w.u64(p.spec.window.0);
                w.u64(p.spec.window.1);
                w.u64(p.spec.stride.0);
                w.u64(p.spec.stride.1);
                w.u32(strategy_tag(p.spec.strategy));
                match &p.scorer {
                    Some(s) => {
                        w.u32(1);
                        write_scorer_body(&mut w, s);
                    }
                    None => w.u32(0),
                }
            }
            Layer::Fc(f) => {
                w.u32(3);
                w.u64(f.outputs);
                params(&mut w, &f.weights, &f.bias);
            }
            Layer::SoftmaxLoss => w.u32(4),
        }
    }
    w.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(CHECKPOINT_MAGIC)?;
    let input = (r.u64()?, r.u64()?, r.u64()?);
    let classes = r.u64()?;
    let count = r.u64()?;
    let mut specs = Vec::new();
    let mut values = Vec::new();
    let mut scorers = Vec::new();
    let params = |r: &mut Reader, outputs: usize| -> Result<(Vec<f64>, Vec<f64>)> {
        let nw = r.u64()?;
        Ok((r.f64s(nw)?, r.f64s(outputs)?))
    };
    for i in 0..count {
        match r.u32()? {
            0 => {
                let (kh, kw, cout) = (r.u64()?, r.u64()?, r.u64()?);
                specs.push(LayerSpec::Conv {
                    kernel: (kh, kw),
                    out_channels: cout,
                });
                values.push((i, params(&mut r, cout)?));
            }
            1 => specs.push(LayerSpec::Relu),
            2 => {
                let window = (r.u64()?, r.u64()?);
                let stride = (r.u64()?, r.u64()?);
                let tag = r.u32()? as usize;
                let strategy = *Strategy::ALL
                    .get(tag)
                    .ok_or_else(|| Error::Format(format!("unknown strategy {tag}")))?;
                specs.push(LayerSpec::Pool(PoolSpec {
                    window,
                    stride,
                    strategy,
                }));
                if r.u32()? == 1 {
                    scorers.push((i, read_scorer_body(&mut r)?));
                }
            }
            3 => {
                let out = r.u64()?;
                specs.push(LayerSpec::Fc { out_units: out });
                values.push((i, params(&mut r, out)?));
            }
            4 => specs.push(LayerSpec::SoftmaxLoss),
            t => return Err(Error::Format(format!("unknown layer tag {t}"))),
        }
    }
    r.finish()?;
    let mut net = Network::new(input, classes, &specs, Init::Gaussian(0.0), 0)?;
    for (i, (w, b)) in values {
        let (weights, bias) = match &mut net.layers[i] {
            Layer::Conv(c) => (&mut c.weights, &mut c.bias),
            Layer::Fc(f) => (&mut f.weights, &mut f.bias),
            _ => unreachable!("only parameter layers carry values"),
        };
        if w.len() != weights.len() {
            return Err(Error::Format(format!(
                "layer {i} stores {} weights, shape needs {}",
                w.len(),
                weights.len()
            )));
        }
        *weights = w;
        *bias = b;
    }
    for (i, s) in scorers {
        net.set_scorer(i, s)?;
    }
    Ok(net)
}

pub fn save_checkpoint(path: impl AsRef<Path>, net: &Network) -> Result<()> {
    Ok(fs::write(path, encode_checkpoint(net))?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    decode_checkpoint(&fs::read(path)?)
}
