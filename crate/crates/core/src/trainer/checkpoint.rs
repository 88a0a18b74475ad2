//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! "DUTC" | u64 header length | header JSON | u32 record count | records
//! record = u32 name length | name | u8 kind | payload
//! kind 0: tensor in the engine dump format (f32)
//! kind 1: u64 length | f64 values
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Nadam, TrainConfig, Trainer};
use crate::engine::io::{read_tensor, write_tensor};
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::graph::{ParamStore, RunningStats};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DUTC";

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    step: usize,
    optimizer_step: u64,
}

enum Payload<'a> {
    Tensor(&'a Tensor<f32>),
    Floats(&'a [f64]),
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("checkpoint stream", e)
}

pub fn write_checkpoint<W: Write>(t: &Trainer, mut w: W) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        config: t.config.clone(),
        step: t.step,
        optimizer_step: t.optimizer.step,
    })?;
    w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
    w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io_err)?;
    w.write_all(&header).map_err(io_err)?;

    let prog = &t.model.program;
    let mut records: Vec<(String, Payload)> = Vec::new();
    for (i, d) in prog.params.iter().enumerate() {
        records.push((format!("param/{}", d.name), Payload::Tensor(&t.params.values[i])));
        records.push((format!("m/{}", d.name), Payload::Tensor(&t.optimizer.first[i])));
        records.push((format!("v/{}", d.name), Payload::Tensor(&t.optimizer.second[i])));
    }
    for (bn, r) in prog.bns.iter().zip(&t.params.running) {
        records.push((format!("bn/{}/mean", bn.name), Payload::Floats(&r.mean)));
        records.push((format!("bn/{}/var", bn.name), Payload::Floats(&r.var)));
    }
    w.write_all(&(records.len() as u32).to_le_bytes()).map_err(io_err)?;
    for (name, payload) in records {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(name.as_bytes()).map_err(io_err)?;
        match payload {
            Payload::Tensor(t) => {
                w.write_all(&[0]).map_err(io_err)?;
                write_tensor(t, &mut w).map_err(io_err)?;
            }
            Payload::Floats(v) => {
                w.write_all(&[1]).map_err(io_err)?;
                w.write_all(&(v.len() as u64).to_le_bytes()).map_err(io_err)?;
                for x in v {
                    w.write_all(&x.to_le_bytes()).map_err(io_err)?;
                }
            }
        }
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Integrity(format!("truncated checkpoint while reading {what}")))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

/// Guards allocations driven by length fields of a corrupt file.
const MAX_FIELD: u64 = 1 << 32;

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Trainer> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Integrity("not a checkpoint (bad magic)".into()));
    }
    let len = read_u64(&mut r, "header length")?;
    if len > MAX_FIELD {
        return Err(Error::Integrity("implausible header length".into()));
    }
    let mut header = vec![0u8; len as usize];
    read_exact(&mut r, &mut header, "header")?;
    let header: Header =
        serde_json::from_slice(&header).map_err(|e| Error::Integrity(format!("corrupt checkpoint header: {e}")))?;

    let mut trainer = Trainer::new(header.config)?;
    let prog = trainer.model.program.clone();
    let count = read_u32(&mut r, "record count")? as usize;
    let mut tensors = std::collections::HashMap::new();
    let mut floats = std::collections::HashMap::new();
    for _ in 0..count {
        let n = read_u32(&mut r, "record name")? as u64;
        if n > MAX_FIELD {
            return Err(Error::Integrity("implausible record name length".into()));
        }
        let mut name = vec![0u8; n as usize];
        read_exact(&mut r, &mut name, "record name")?;
        let name = String::from_utf8(name).map_err(|_| Error::Integrity("record name is not UTF-8".into()))?;
        let mut kind = [0u8];
        read_exact(&mut r, &mut kind, "record kind")?;
        match kind[0] {
            0 => {
                tensors.insert(name, read_tensor::<f32, _>(&mut r)?);
            }
            1 => {
                let len = read_u64(&mut r, "float record")?;
                if len > MAX_FIELD {
                    return Err(Error::Integrity("implausible float record length".into()));
                }
                let mut v = Vec::with_capacity(len as usize);
                for _ in 0..len {
                    let mut b = [0u8; 8];
                    read_exact(&mut r, &mut b, &name)?;
                    v.push(f64::from_le_bytes(b));
                }
                floats.insert(name, v);
            }
            k => return Err(Error::Integrity(format!("unknown record kind {k}"))),
        }
    }
    let mut take = |key: String, like: &Tensor<f32>| -> Result<Tensor<f32>> {
        let t = tensors
            .remove(&key)
            .ok_or_else(|| Error::Integrity(format!("missing record {key}")))?;
        if t.shape() != like.shape() {
            return Err(Error::Integrity(format!("record {key} has shape {:?}, expected {:?}", t.shape(), like.shape())));
        }
        Ok(t)
    };
    let mut values = Vec::with_capacity(prog.params.len());
    let mut first = Vec::with_capacity(prog.params.len());
    let mut second = Vec::with_capacity(prog.params.len());
    for (i, d) in prog.params.iter().enumerate() {
        let like = &trainer.params.values[i];
        values.push(take(format!("param/{}", d.name), like)?);
        first.push(take(format!("m/{}", d.name), like)?);
        second.push(take(format!("v/{}", d.name), like)?);
    }
    let mut running = Vec::with_capacity(prog.bns.len());
    for bn in &prog.bns {
        let mut get = |suffix: &str| {
            let key = format!("bn/{}/{suffix}", bn.name);
            floats
                .remove(&key)
                .filter(|v| v.len() == bn.channels)
                .ok_or_else(|| Error::Integrity(format!("missing or malformed record {key}")))
        };
        running.push(RunningStats {
            mean: get("mean")?,
            var: get("var")?,
        });
    }
    if let Some(extra) = tensors.keys().chain(floats.keys()).next() {
        return Err(Error::Integrity(format!("unexpected record {extra}")));
    }
    trainer.params = ParamStore { values, running };
    trainer.optimizer = Nadam {
        config: trainer.config.optimizer,
        first,
        second,
        step: header.optimizer_step,
    };
    trainer.step = header.step;
    Ok(trainer)
}

pub fn save_checkpoint(t: &Trainer, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(t, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::super::tests::{tiny_config, tiny_data};
    use super::*;

    fn bytes(t: &Trainer) -> Vec<u8> {
        let mut b = Vec::new();
        write_checkpoint(t, &mut b).unwrap();
        b
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut t = Trainer::new(tiny_config()).unwrap();
        t.step_on(&tiny_data(3)).unwrap();
        let a = bytes(&t);
        assert_eq!(&a[..4], b"DUTC");
        let back = read_checkpoint(a.as_slice()).unwrap();
        assert_eq!(back.params, t.params);
        assert_eq!(back.optimizer, t.optimizer);
        assert_eq!(back.step, 1);
        assert_eq!(bytes(&back), a);
    }

    #[test]
    fn truncation_and_corruption_are_integrity_errors() {
        let t = Trainer::new(tiny_config()).unwrap();
        let a = bytes(&t);
        for cut in [0, 3, 10, a.len() / 2, a.len() - 1] {
            assert!(matches!(read_checkpoint(&a[..cut]), Err(Error::Integrity(_))), "cut at {cut}");
        }
        let mut bad = a.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(Error::Integrity(_))));
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let data = tiny_data(4);
        let mut straight = Trainer::new(tiny_config()).unwrap();
        for _ in 0..3 {
            straight.step_on(&data).unwrap();
        }
        let mut first = Trainer::new(tiny_config()).unwrap();
        first.step_on(&data).unwrap();
        let mut resumed = read_checkpoint(bytes(&first).as_slice()).unwrap();
        for _ in 0..2 {
            resumed.step_on(&data).unwrap();
        }
        assert_eq!(bytes(&resumed), bytes(&straight));
    }
}
