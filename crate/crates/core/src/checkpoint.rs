//! Binary checkpoint container: named parameter tensors, optimizer moments,
//! and enough loop state to resume training bitwise-identically.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::NamedParams;
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"MCNMTCK\0";
const VERSION: u32 = 1;

/// Training-loop position stored in a checkpoint. `epoch_loss_sum/count`
/// carry the partially accumulated epoch mean so a resumed run tracks the
/// best-loss checkpoint exactly like an uninterrupted one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainerSnapshot {
    /// Completed optimizer steps.
    pub step: u64,
    pub epoch: u64,
    /// Batches completed within `epoch`.
    pub batch_in_epoch: u64,
    pub epoch_loss_sum: f64,
    pub epoch_loss_count: u64,
    pub best_loss: f64,
}

impl TrainerSnapshot {
    pub fn fresh() -> Self {
        TrainerSnapshot {
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
            epoch_loss_sum: 0.0,
            epoch_loss_count: 0,
            best_loss: f64::INFINITY,
        }
    }
}

struct Sink<'a, W: Write> {
    w: W,
    path: &'a Path,
}

impl<'a, W: Write> Sink<'a, W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.w.write_all(b).map_err(|e| Error::io(self.path, e))
    }

    fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn str(&mut self, s: &str) -> Result<()> {
        self.u64(s.len() as u64)?;
        self.bytes(s.as_bytes())
    }

    fn table<S: Scalar, P: NamedParams<S>>(&mut self, p: &P) -> Result<()> {
        let entries = p.entries();
        self.u64(entries.len() as u64)?;
        for (name, t) in entries {
            self.str(&name)?;
            self.u64(t.shape().len() as u64)?;
            for &d in t.shape() {
                self.u64(d as u64)?;
            }
            for &v in t.data() {
                self.f64(v.to_f64())?;
            }
        }
        Ok(())
    }
}

struct Source<'a, R: Read> {
    r: R,
    path: &'a Path,
}

impl<'a, R: Read> Source<'a, R> {
    fn bytes(&mut self, buf: &mut [u8]) -> Result<()> {
        self.r.read_exact(buf).map_err(|e| Error::io(self.path, e))
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.bytes(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.bytes(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.bytes(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    fn str(&mut self) -> Result<String> {
        let len = self.u64()? as usize;
        if len > 1 << 20 {
            return Err(Error::Checkpoint(format!("implausible string length {len}")));
        }
        let mut buf = vec![0u8; len];
        self.bytes(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Checkpoint(format!("bad utf-8: {e}")))
    }

    /// Read one tensor table into `p`, requiring name and shape agreement.
    fn table<S: Scalar, P: NamedParams<S>>(&mut self, p: &mut P, section: &str) -> Result<()> {
        let mut entries = p.entries_mut();
        let count = self.u64()? as usize;
        if count != entries.len() {
            return Err(Error::Checkpoint(format!(
                "{section}: file has {count} tensors, model expects {}",
                entries.len()
            )));
        }
        for (name, t) in entries.iter_mut() {
            let file_name = self.str()?;
            if file_name != *name {
                return Err(Error::Checkpoint(format!(
                    "{section}: tensor {file_name} where {name} was expected"
                )));
            }
            let rank = self.u64()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(self.u64()? as usize);
            }
            if dims != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{section}: {name} has shape {dims:?} in the file, {:?} in the model",
                    t.shape()
                )));
            }
            for v in t.data_mut() {
                *v = S::from_f64(self.f64()?);
            }
        }
        Ok(())
    }
}

/// Write a checkpoint atomically (temp file + rename).
#[allow(clippy::too_many_arguments)]
pub fn save_checkpoint<S: Scalar, P: NamedParams<S>>(
    path: &Path,
    fingerprint: u64,
    snap: &TrainerSnapshot,
    vocab_refs: (&str, &str),
    params: &P,
    adam_m: &P,
    adam_v: &P,
) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut s = Sink { w: BufWriter::new(file), path: &tmp };
        s.bytes(MAGIC)?;
        s.u32(VERSION)?;
        s.u64(fingerprint)?;
        s.u64(snap.step)?;
        s.u64(snap.epoch)?;
        s.u64(snap.batch_in_epoch)?;
        s.f64(snap.epoch_loss_sum)?;
        s.u64(snap.epoch_loss_count)?;
        s.f64(snap.best_loss)?;
        s.str(vocab_refs.0)?;
        s.str(vocab_refs.1)?;
        s.table(params)?;
        s.table(adam_m)?;
        s.table(adam_v)?;
        s.w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Load a checkpoint into pre-shaped parameter and moment structs.
/// Returns the loop snapshot and the stored vocabulary references.
pub fn load_checkpoint<S: Scalar, P: NamedParams<S>>(
    path: &Path,
    expected_fingerprint: u64,
    params: &mut P,
    adam_m: &mut P,
    adam_v: &mut P,
) -> Result<(TrainerSnapshot, (String, String))> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut s = Source { r: BufReader::new(file), path };
    let mut magic = [0u8; 8];
    s.bytes(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint file", path.display())));
    }
    let version = s.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let fingerprint = s.u64()?;
    if fingerprint != expected_fingerprint {
        return Err(Error::Checkpoint(format!(
            "config fingerprint mismatch: checkpoint {fingerprint:#018x}, run {expected_fingerprint:#018x}"
        )));
    }
    let snap = TrainerSnapshot {
        step: s.u64()?,
        epoch: s.u64()?,
        batch_in_epoch: s.u64()?,
        epoch_loss_sum: s.f64()?,
        epoch_loss_count: s.u64()?,
        best_loss: s.f64()?,
    };
    let src_ref = s.str()?;
    let tgt_ref = s.str()?;
    s.table(params, "parameters")?;
    s.table(adam_m, "first moments")?;
    s.table(adam_v, "second moments")?;
    Ok((snap, (src_ref, tgt_ref)))
}

/// Read only the vocabulary references from a checkpoint header, so a
/// caller can size the model before loading the tensors.
pub fn peek_vocab_refs(path: &Path) -> Result<(String, String)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut s = Source { r: BufReader::new(file), path };
    let mut magic = [0u8; 8];
    s.bytes(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint file", path.display())));
    }
    let version = s.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    s.u64()?; // fingerprint, checked on the full load
    for _ in 0..3 {
        s.u64()?;
    }
    s.f64()?;
    s.u64()?;
    s.f64()?;
    Ok((s.str()?, s.str()?))
}
