//! Binary checkpoints for a model plus (optionally) its optimizer state.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "NBLC" | version u8 | step u64 | topology u16+utf8 | tensor_count u32
//! then per tensor: name u16+utf8 | rows u32 | cols u32 | rows*cols f64
//! ```
//!
//! The topology descriptor must match the restoring model exactly; a
//! checkpoint can never be loaded into a different architecture.

use std::fs;
use std::path::Path;

use super::adam::OptimizerState;
use super::model::ToyModel;
use super::ToygradError;
use crate::Matrix;

const MAGIC: &[u8; 4] = b"NBLC";
const VERSION: u8 = 1;

const PARAM_PREFIX: &str = "param.";
const MOMENT1_PREFIX: &str = "opt.m.";
const MOMENT2_PREFIX: &str = "opt.v.";
const OPT_STEP_NAME: &str = "opt.t";

/// A parsed checkpoint: named tensors plus bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub topology: String,
    pub step: u64,
    pub tensors: Vec<(String, Matrix)>,
}

fn bad(msg: impl Into<String>) -> ToygradError {
    ToygradError::BadCheckpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ToygradError> {
        if self.at + n > self.buf.len() {
            return Err(bad(format!(
                "truncated at byte {} (wanted {n} more of {})",
                self.at,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ToygradError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ToygradError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ToygradError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ToygradError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, ToygradError> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| bad("string is not valid utf-8"))
    }
}

impl Checkpoint {
    /// Snapshots every model parameter (frozen included, so a restored
    /// model is bit-identical) and, when given, the optimizer moments and
    /// step counter.
    pub fn capture(model: &ToyModel, opt: Option<&OptimizerState>, step: u64) -> Self {
        let mut tensors = Vec::new();
        for p in &model.params {
            tensors.push((format!("{PARAM_PREFIX}{}", p.name), p.value.clone()));
        }
        if let Some(o) = opt {
            for (p, m) in model.params.iter().zip(&o.m) {
                tensors.push((format!("{MOMENT1_PREFIX}{}", p.name), m.clone()));
            }
            for (p, v) in model.params.iter().zip(&o.v) {
                tensors.push((format!("{MOMENT2_PREFIX}{}", p.name), v.clone()));
            }
            let t = Matrix::from_fn(1, 1, |_, _| o.t as f64);
            tensors.push((OPT_STEP_NAME.to_string(), t));
        }
        Self { topology: model.topology_descriptor(), step, tensors }
    }

    fn find(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    fn take_named(&self, name: &str) -> Result<&Matrix, ToygradError> {
        self.find(name).ok_or_else(|| bad(format!("missing tensor {name:?}")))
    }

    fn copy_into(src: &Matrix, dst: &mut Matrix, name: &str) -> Result<(), ToygradError> {
        if (src.rows(), src.cols()) != (dst.rows(), dst.cols()) {
            return Err(bad(format!(
                "tensor {name:?} has shape {}x{}, expected {}x{}",
                src.rows(),
                src.cols(),
                dst.rows(),
                dst.cols()
            )));
        }
        dst.as_mut_slice().copy_from_slice(src.as_slice());
        Ok(())
    }

    /// Restores parameters (and optimizer state when requested) into a
    /// model of the identical topology. Returns the recorded step.
    pub fn restore(
        &self,
        model: &mut ToyModel,
        opt: Option<&mut OptimizerState>,
    ) -> Result<u64, ToygradError> {
        let expected = model.topology_descriptor();
        if self.topology != expected {
            return Err(ToygradError::TopologyMismatch {
                file: self.topology.clone(),
                model: expected,
            });
        }
        for p in &mut model.params {
            let src = self.take_named(&format!("{PARAM_PREFIX}{}", p.name))?;
            Self::copy_into(src, &mut p.value, &p.name)?;
        }
        if let Some(o) = opt {
            let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
            for (name, m) in names.iter().zip(o.m.iter_mut()) {
                let src = self.take_named(&format!("{MOMENT1_PREFIX}{name}"))?;
                Self::copy_into(src, m, name)?;
            }
            for (name, v) in names.iter().zip(o.v.iter_mut()) {
                let src = self.take_named(&format!("{MOMENT2_PREFIX}{name}"))?;
                Self::copy_into(src, v, name)?;
            }
            let t = self.take_named(OPT_STEP_NAME)?;
            o.t = t[(0, 0)] as u64;
        }
        Ok(self.step)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.step.to_le_bytes());
        let topo = self.topology.as_bytes();
        out.extend_from_slice(&(topo.len() as u16).to_le_bytes());
        out.extend_from_slice(topo);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, m) in &self.tensors {
            let nb = name.as_bytes();
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ToygradError> {
        let mut r = Reader { buf: bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("bad magic; not a checkpoint file"));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let step = r.u64()?;
        let topology = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| bad(format!("tensor {name:?} shape overflows")))?;
            let raw = r.take(n * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let m = Matrix::from_vec(rows, cols, data)
                .map_err(|e| bad(format!("tensor {name:?}: {e}")))?;
            tensors.push((name, m));
        }
        if r.at != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Self { topology, step, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), ToygradError> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, ToygradError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
