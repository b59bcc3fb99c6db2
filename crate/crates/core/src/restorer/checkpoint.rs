//! Versioned binary checkpoints: magic `SPNC`, the architecture
//! descriptor, bookkeeping scalars, then the parameter and Adam payloads
//! as little-endian f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::arch::{Arch, LayerOp};
use super::net::{NetParams, ParamBlock};
use super::train::{AdamState, TrainState};
use super::RestorerError;
use crate::scalar::Scalar;

pub const CKPT_MAGIC: [u8; 4] = *b"SPNC";
pub const CKPT_VERSION: u32 = 1;

/// A training state plus the run metadata evaluation needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar = f64> {
    pub state: TrainState<T>,
    pub lambda: f64,
    pub val_total: f64,
}

fn bad(msg: impl Into<String>) -> RestorerError {
    RestorerError::Checkpoint(msg.into())
}

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u8(&mut self, v: u8) -> std::io::Result<()> {
        self.0.write_all(&[v])
    }
    fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn slice<T: Scalar>(&mut self, vs: &[T]) -> std::io::Result<()> {
        let mut buf = Vec::with_capacity(vs.len() * 8);
        for v in vs {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        self.0.write_all(&buf)
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn u8(&mut self) -> std::io::Result<u8> {
        let mut b = [0u8; 1];
        self.0.read_exact(&mut b)?;
        Ok(b[0])
    }
    fn u32(&mut self) -> std::io::Result<u32> {
        let mut b = [0u8; 4];
        self.0.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn u64(&mut self) -> std::io::Result<u64> {
        let mut b = [0u8; 8];
        self.0.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
    fn f64(&mut self) -> std::io::Result<f64> {
        let mut b = [0u8; 8];
        self.0.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
    fn slice<T: Scalar>(&mut self, n: usize) -> std::io::Result<Vec<T>> {
        let mut buf = vec![0u8; n * 8];
        self.0.read_exact(&mut buf)?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| T::cast(f64::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }
}

pub fn write_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<(), RestorerError> {
    let mut w = Writer(BufWriter::new(File::create(path)?));
    let arch = ckpt.state.params.arch();
    w.0.write_all(&CKPT_MAGIC)?;
    w.u32(CKPT_VERSION)?;
    w.u32(arch.in_ch as u32)?;
    w.u8(arch.global_residual as u8)?;
    w.u32(arch.ops.len() as u32)?;
    for op in &arch.ops {
        match *op {
            LayerOp::Conv { in_ch, out_ch, kernel, stride, relu } => {
                w.u8(0)?;
                w.u32(in_ch as u32)?;
                w.u32(out_ch as u32)?;
                w.u8(kernel as u8)?;
                w.u8(stride as u8)?;
                w.u8(relu as u8)?;
            }
            LayerOp::Upsample2 => w.u8(1)?,
            LayerOp::SaveSkip { slot } => {
                w.u8(2)?;
                w.u32(slot as u32)?;
            }
            LayerOp::ConcatSkip { slot } => {
                w.u8(3)?;
                w.u32(slot as u32)?;
            }
        }
    }
    w.u64(ckpt.state.epochs_done as u64)?;
    w.u64(ckpt.state.adam.step)?;
    w.f64(ckpt.state.norm)?;
    w.f64(ckpt.lambda)?;
    w.f64(ckpt.val_total)?;
    for set in [&ckpt.state.params.blocks, &ckpt.state.adam.m, &ckpt.state.adam.v] {
        for blk in set.iter() {
            w.slice(&blk.w)?;
            w.slice(&blk.b)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>, RestorerError> {
    let mut r = Reader(BufReader::new(File::open(&path)?));
    let mut magic = [0u8; 4];
    r.0.read_exact(&mut magic)?;
    if magic != CKPT_MAGIC {
        return Err(bad(format!("bad checkpoint magic {magic:?}")));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let in_ch = r.u32()? as usize;
    let global_residual = r.u8()? != 0;
    let n_ops = r.u32()? as usize;
    if n_ops > 10_000 {
        return Err(bad(format!("implausible op count {n_ops}")));
    }
    let mut ops = Vec::with_capacity(n_ops);
    for _ in 0..n_ops {
        let op = match r.u8()? {
            0 => LayerOp::Conv {
                in_ch: r.u32()? as usize,
                out_ch: r.u32()? as usize,
                kernel: r.u8()? as usize,
                stride: r.u8()? as usize,
                relu: r.u8()? != 0,
            },
            1 => LayerOp::Upsample2,
            2 => LayerOp::SaveSkip { slot: r.u32()? as usize },
            3 => LayerOp::ConcatSkip { slot: r.u32()? as usize },
            t => return Err(bad(format!("unknown op tag {t}"))),
        };
        ops.push(op);
    }
    let arch = Arch { in_ch, ops, global_residual };
    arch.validate()?;

    let epochs_done = r.u64()? as usize;
    let step = r.u64()?;
    let norm = r.f64()?;
    let lambda = r.f64()?;
    let val_total = r.f64()?;

    let mut read_blocks = || -> Result<Vec<ParamBlock<T>>, RestorerError> {
        arch.conv_shapes()
            .iter()
            .map(|&(o, c, k)| {
                Ok(ParamBlock {
                    w: r.slice(o * c * k * k * k)?,
                    b: r.slice(o)?,
                })
            })
            .collect()
    };
    let blocks = read_blocks()?;
    let m = read_blocks()?;
    let v = read_blocks()?;
    let params = NetParams::new(arch, blocks)?;
    Ok(Checkpoint {
        state: TrainState {
            params,
            adam: AdamState { m, v, step },
            epochs_done,
            norm,
        },
        lambda,
        val_total,
    })
}
