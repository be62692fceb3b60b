//! Trainable-parameter checkpoints.
//!
//! Layout: a UTF-8 header of newline-terminated lines
//!
//! ```text
//! MOEQ-CKPT v1
//! fingerprint <hex>
//! frozen <hex>
//! step <n>
//! rng <seed-hex> <word-pos> <stream>      (optional)
//! tensor <name> float32 <rows> <cols>     (one per trainable, in order)
//! end
//! ```
//!
//! followed by the tensors as little-endian `f32` in header order. Frozen
//! weights are not stored; they are rebuilt from the model config and
//! checked against the `frozen` digest on load.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use thiserror::Error;

use super::params::hex;
use super::MoePolicy;
use crate::autodiff::Mat;
use crate::seed::Rng;

const MAGIC: &str = "MOEQ-CKPT v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint was written for model {found}, this model is {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("frozen weights differ from the ones the checkpoint was trained on")]
    FrozenMismatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub step: u64,
    pub rng: Option<Rng>,
}

pub fn save(path: impl AsRef<Path>, policy: &MoePolicy, meta: &CheckpointMeta) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_to(&mut w, policy, meta)?;
    w.flush()?;
    Ok(())
}

pub fn write_to(w: &mut impl Write, policy: &MoePolicy, meta: &CheckpointMeta) -> Result<(), CheckpointError> {
    let ps = &policy.params;
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "fingerprint {}", policy.fingerprint())?;
    writeln!(w, "frozen {}", ps.frozen_checksum())?;
    writeln!(w, "step {}", meta.step)?;
    if let Some(rng) = &meta.rng {
        writeln!(w, "rng {} {} {}", hex(&rng.get_seed()), rng.get_word_pos(), rng.get_stream())?;
    }
    for id in ps.trainable_ids() {
        let p = ps.param(id);
        let (r, c) = p.value.dim();
        writeln!(w, "tensor {} float32 {r} {c}", p.name)?;
    }
    writeln!(w, "end")?;
    for id in ps.trainable_ids() {
        for &v in ps.get(id).iter() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load(path: impl AsRef<Path>, policy: &mut MoePolicy) -> Result<CheckpointMeta, CheckpointError> {
    read_from(&mut BufReader::new(File::open(path)?), policy)
}

fn parse_seed(s: &str) -> Result<[u8; 32], CheckpointError> {
    let bad = || CheckpointError::Format(format!("bad rng seed {s:?}"));
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

/// Replace the policy's trainables with the checkpoint's.
pub fn read_from(r: &mut impl BufRead, policy: &mut MoePolicy) -> Result<CheckpointMeta, CheckpointError> {
    let fmt = |m: String| CheckpointError::Format(m);
    let mut line = String::new();
    let mut next = |r: &mut dyn BufRead| -> Result<String, CheckpointError> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(fmt("unexpected end of header".into()));
        }
        Ok(line.trim_end_matches('\n').to_string())
    };
    if next(r)? != MAGIC {
        return Err(fmt("missing magic line".into()));
    }
    let mut meta = CheckpointMeta { step: 0, rng: None };
    let mut tensors = Vec::new();
    loop {
        let l = next(r)?;
        let parts: Vec<&str> = l.split_whitespace().collect();
        match parts.as_slice() {
            ["end"] => break,
            ["fingerprint", f] => {
                let expected = policy.fingerprint();
                if *f != expected {
                    return Err(CheckpointError::FingerprintMismatch {
                        expected,
                        found: f.to_string(),
                    });
                }
            }
            ["frozen", f] => {
                if *f != policy.params.frozen_checksum() {
                    return Err(CheckpointError::FrozenMismatch);
                }
            }
            ["step", n] => meta.step = n.parse().map_err(|_| fmt(format!("bad step {n}")))?,
            ["rng", seed, pos, stream] => {
                let mut rng = Rng::from_seed(parse_seed(seed)?);
                rng.set_stream(stream.parse().map_err(|_| fmt(format!("bad stream {stream}")))?);
                rng.set_word_pos(pos.parse().map_err(|_| fmt(format!("bad word position {pos}")))?);
                meta.rng = Some(rng);
            }
            ["tensor", name, "float32", rows, cols] => {
                let rows: usize = rows.parse().map_err(|_| fmt(format!("bad shape in {l:?}")))?;
                let cols: usize = cols.parse().map_err(|_| fmt(format!("bad shape in {l:?}")))?;
                tensors.push((name.to_string(), rows, cols));
            }
            _ => return Err(fmt(format!("unrecognized header line {l:?}"))),
        }
    }
    let trainable: Vec<_> = policy.params.trainable_ids().collect();
    if trainable.len() != tensors.len() {
        return Err(fmt(format!("expected {} tensors, found {}", trainable.len(), tensors.len())));
    }
    let mut values = Vec::with_capacity(tensors.len());
    for (id, (name, rows, cols)) in trainable.iter().zip(&tensors) {
        let p = policy.params.param(*id);
        if &p.name != name || p.value.dim() != (*rows, *cols) {
            return Err(fmt(format!("tensor {name} ({rows}x{cols}) does not match {}", p.name)));
        }
        let mut buf = vec![0u8; rows * cols * 4];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        values.push(Mat::from_shape_vec((*rows, *cols), data).expect("shape checked"));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(fmt("trailing bytes after payload".into()));
    }
    for (id, v) in trainable.into_iter().zip(values) {
        *policy.params.get_mut(id) = v;
    }
    Ok(meta)
}
