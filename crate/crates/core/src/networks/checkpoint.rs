//! Single-file training checkpoints.
//!
//! One archive holds every parameter group (networks, height predictor
//! with its scale parameter), per-group Adam moments, the iteration
//! counter, training phase, configuration hash, and the sampling RNG
//! state. The format is versioned, little-endian, and refuses to load
//! into a mismatched float width.

use std::path::Path;

use ndarray::ArrayD;

use crate::data::io::atomic_write;
use crate::nn::{Adam, Params, Scalar};
use crate::rng::RngState;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"DPADCKP1";
const VERSION: u32 = 1;

/// One named parameter group with its optimizer state.
pub struct SectionState<F> {
    pub name: String,
    pub params: Params<F>,
    pub adam_step: u64,
    pub adam_m: Vec<ArrayD<F>>,
    pub adam_v: Vec<ArrayD<F>>,
}

impl<F: Scalar> SectionState<F> {
    pub fn capture(name: impl Into<String>, params: &Params<F>, adam: &Adam<F>) -> Self {
        SectionState {
            name: name.into(),
            params: params.clone(),
            adam_step: adam.step_count,
            adam_m: adam.m.clone(),
            adam_v: adam.v.clone(),
        }
    }

    /// Rebuilds the optimizer over this section's parameters.
    pub fn restore_adam(&self, lr: f64) -> Adam<F> {
        let mut adam = Adam::new(&self.params, lr);
        adam.step_count = self.adam_step;
        adam.m = self.adam_m.clone();
        adam.v = self.adam_v.clone();
        adam
    }
}

/// Complete training state at some iteration.
pub struct Checkpoint<F> {
    pub config_hash: [u8; 32],
    pub phase: String,
    pub iteration: u64,
    pub rng: RngState,
    pub sections: Vec<SectionState<F>>,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn section(&self, name: &str) -> Option<&SectionState<F>> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(std::mem::size_of::<F>() as u8);
        buf.extend_from_slice(&self.config_hash);
        write_str(&mut buf, &self.phase);
        buf.extend_from_slice(&self.iteration.to_le_bytes());
        buf.extend_from_slice(&self.rng.seed.to_le_bytes());
        buf.extend_from_slice(&self.rng.stream.to_le_bytes());
        buf.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        buf.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            write_str(&mut buf, &s.name);
            buf.extend_from_slice(&(s.params.len() as u32).to_le_bytes());
            for e in s.params.entries() {
                write_str(&mut buf, &e.name);
                buf.push(e.value.ndim() as u8);
                for &d in e.value.shape() {
                    buf.extend_from_slice(&(d as u64).to_le_bytes());
                }
                write_values::<F>(&mut buf, &e.value);
            }
            buf.extend_from_slice(&s.adam_step.to_le_bytes());
            for arr in s.adam_m.iter().chain(&s.adam_v) {
                write_values::<F>(&mut buf, arr);
            }
        }
        atomic_write(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader {
            bytes: &bytes,
            pos: 0,
            path,
        };
        if r.take(8)? != MAGIC {
            return r.fail("not a checkpoint file (bad magic)");
        }
        let version = r.u32()?;
        if version != VERSION {
            return r.fail(&format!("unsupported checkpoint version {version}"));
        }
        let dtype = r.u8()?;
        if dtype as usize != std::mem::size_of::<F>() {
            return r.fail(&format!(
                "checkpoint stores {}-byte floats but {}-byte floats were requested",
                dtype,
                std::mem::size_of::<F>()
            ));
        }
        let mut config_hash = [0u8; 32];
        config_hash.copy_from_slice(r.take(32)?);
        let phase = r.string()?;
        let iteration = r.u64()?;
        let rng = RngState {
            seed: r.u64()?,
            stream: r.u64()?,
            word_pos: r.u128()?,
        };
        let n_sections = r.u32()? as usize;
        let mut sections = Vec::with_capacity(n_sections);
        for _ in 0..n_sections {
            let name = r.string()?;
            let n_params = r.u32()? as usize;
            let mut params = Params::new();
            let mut shapes = Vec::with_capacity(n_params);
            for _ in 0..n_params {
                let pname = r.string()?;
                let ndim = r.u8()? as usize;
                let mut shape = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    shape.push(r.u64()? as usize);
                }
                let value = r.values::<F>(&shape)?;
                shapes.push(shape);
                params.add(pname, value);
            }
            let adam_step = r.u64()?;
            let mut adam_m = Vec::with_capacity(n_params);
            for shape in &shapes {
                adam_m.push(r.values::<F>(shape)?);
            }
            let mut adam_v = Vec::with_capacity(n_params);
            for shape in &shapes {
                adam_v.push(r.values::<F>(shape)?);
            }
            sections.push(SectionState {
                name,
                params,
                adam_step,
                adam_m,
                adam_v,
            });
        }
        if r.pos != bytes.len() {
            return r.fail("trailing bytes after checkpoint payload");
        }
        Ok(Checkpoint {
            config_hash,
            phase,
            iteration,
            rng,
            sections,
        })
    }
}

/// Copies stored parameter values into a freshly built parameter set,
/// insisting that names and shapes line up exactly.
pub fn copy_params_into<F: Scalar>(src: &Params<F>, dst: &mut Params<F>) -> Result<()> {
    if src.len() != dst.len() {
        return Err(Error::Data(format!(
            "parameter group size mismatch: stored {}, built {}",
            src.len(),
            dst.len()
        )));
    }
    for (s, d) in src.entries().iter().zip(dst.entries_mut()) {
        if s.name != d.name {
            return Err(Error::Data(format!(
                "parameter name mismatch: stored {}, built {}",
                s.name, d.name
            )));
        }
        if s.value.shape() != d.value.shape() {
            return Err(Error::Data(format!(
                "parameter {} shape mismatch: stored {:?}, built {:?}",
                s.name,
                s.value.shape(),
                d.value.shape()
            )));
        }
        d.value = s.value.clone();
    }
    Ok(())
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    let b = s.as_bytes();
    assert!(b.len() <= u16::MAX as usize);
    buf.extend_from_slice(&(b.len() as u16).to_le_bytes());
    buf.extend_from_slice(b);
}

fn write_values<F: Scalar>(buf: &mut Vec<u8>, arr: &ArrayD<F>) {
    match std::mem::size_of::<F>() {
        4 => {
            for &v in arr {
                buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            }
        }
        8 => {
            for &v in arr {
                buf.extend_from_slice(&v.to_f64().to_le_bytes());
            }
        }
        other => unreachable!("unsupported float width {other}"),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, message: &str) -> Result<T> {
        Err(Error::Checkpoint {
            path: self.path.to_path_buf(),
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return self.fail("unexpected end of file");
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        let bytes = self.take(len)?;
        match std::str::from_utf8(bytes) {
            Ok(s) => Ok(s.to_string()),
            Err(_) => self.fail("invalid utf-8 in checkpoint string"),
        }
    }

    fn values<F: Scalar>(&mut self, shape: &[usize]) -> Result<ArrayD<F>> {
        let count: usize = shape.iter().product();
        let width = std::mem::size_of::<F>();
        let raw = self.take(count * width)?;
        let mut vals = Vec::with_capacity(count);
        match width {
            4 => {
                for c in raw.chunks_exact(4) {
                    vals.push(F::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64));
                }
            }
            8 => {
                for c in raw.chunks_exact(8) {
                    vals.push(F::from_f64(f64::from_le_bytes(c.try_into().unwrap())));
                }
            }
            other => unreachable!("unsupported float width {other}"),
        }
        ArrayD::from_shape_vec(shape.to_vec(), vals)
            .map_err(|_| Error::Checkpoint {
                path: self.path.to_path_buf(),
                message: "parameter shape does not match value count".into(),
            })
    }
}
