//! Checkpoint file format.
//!
//! ```text
//! ngram-checkpoint 1\n          magic line with format version
//! key = value\n ...             ModelConfig keys, then `meta.*` keys
//! end\n                         end of the text header
//! u64                           tensor count
//! repeated:
//!   u64 + utf-8 bytes           tensor name
//!   tensor                      numeric-core binary layout
//! ```
//!
//! Integers are little-endian and floats are written as `f64`, so identical
//! parameters always produce identical bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{read_u64, Tensor};

use super::config::ModelConfig;
use super::params::ModelParams;

pub const CHECKPOINT_MAGIC: &str = "ngram-checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub config: ModelConfig,
    pub params: ModelParams<S>,
    /// Free-form annotations (task settings, training step, ...).
    pub metadata: BTreeMap<String, String>,
}

pub fn write_checkpoint<S: Scalar, W: Write>(w: &mut W, ckpt: &Checkpoint<S>) -> Result<()> {
    ckpt.params.check_shapes(&ckpt.config)?;
    writeln!(w, "{CHECKPOINT_MAGIC}")?;
    for (k, v) in ckpt.config.to_kv() {
        writeln!(w, "{k} = {v}")?;
    }
    for (k, v) in &ckpt.metadata {
        if k.contains(['\n', '=']) || v.contains('\n') {
            return Err(Error::Format(format!(
                "metadata entry `{k}` is not single-line key = value"
            )));
        }
        writeln!(w, "meta.{} = {}", k.trim(), v.trim())?;
    }
    writeln!(w, "end")?;
    let names = ckpt.params.names();
    let tensors = ckpt.params.tensors();
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in names.iter().zip(tensors) {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        t.write_to(w)?;
    }
    Ok(())
}

pub fn read_checkpoint<S: Scalar, R: BufRead>(r: &mut R) -> Result<Checkpoint<S>> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad magic line `{}`",
            line.trim_end()
        )));
    }
    let mut kv = BTreeMap::new();
    let mut metadata = BTreeMap::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("header is not terminated by `end`".into()));
        }
        let l = line.trim_end();
        if l == "end" {
            break;
        }
        let (k, v) = l
            .split_once(" = ")
            .ok_or_else(|| Error::Format(format!("bad header line `{l}`")))?;
        match k.strip_prefix("meta.") {
            Some(m) => metadata.insert(m.to_string(), v.to_string()),
            None => kv.insert(k.to_string(), v.to_string()),
        };
    }
    let config = ModelConfig::from_kv(&kv)?;
    let mut params = ModelParams::<S>::init(&config, &mut SeededRng::new(0))?;
    let names = params.names();
    let count = read_u64(r)? as usize;
    if count != names.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} tensors, config implies {}",
            names.len()
        )));
    }
    for (expected, slot) in names.iter().zip(params.tensors_mut()) {
        let len = read_u64(r)? as usize;
        if len > 1024 {
            return Err(Error::Format(format!(
                "implausible tensor name length {len}"
            )));
        }
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        let name =
            String::from_utf8(buf).map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
        if &name != expected {
            return Err(Error::Format(format!(
                "expected tensor `{expected}`, found `{name}`"
            )));
        }
        let t = Tensor::read_from(r)?;
        if t.shape() != slot.shape() {
            return Err(Error::Format(format!(
                "tensor `{name}` has shape {:?}, config implies {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok(Checkpoint {
        config,
        params,
        metadata,
    })
}

/// Write to `path` via a temporary sibling file, so a failed save never
/// leaves a partial checkpoint behind.
pub fn save_checkpoint<S: Scalar>(path: &Path, ckpt: &Checkpoint<S>) -> Result<()> {
    let tmp = path.with_extension("partial");
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write_checkpoint(&mut w, ckpt)?;
        w.flush()?;
        Ok(())
    })();
    match result {
        Ok(()) => {
            std::fs::rename(&tmp, path)?;
            Ok(())
        }
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(e)
        }
    }
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::MaskSpec;

    fn sample() -> Checkpoint<f64> {
        let config = ModelConfig::tiny(MaskSpec::ngram(3).unwrap());
        let params = ModelParams::init_random(&config, &mut SeededRng::new(5)).unwrap();
        let mut metadata = BTreeMap::new();
        metadata.insert("task".to_string(), "copy".to_string());
        Checkpoint {
            config,
            params,
            metadata,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ckpt = sample();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &ckpt).unwrap();
        let back: Checkpoint<f64> = read_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, ckpt);
        let mut again = Vec::new();
        write_checkpoint(&mut again, &back).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn header_is_readable_text() {
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &sample()).unwrap();
        let text = String::from_utf8_lossy(&bytes[..200]);
        assert!(text.starts_with("ngram-checkpoint 1\nnum_layers = 2\n"));
        assert!(text.contains("mask = ngram:3\n"));
        assert!(text.contains("meta.task = copy\nend\n"));
    }

    #[test]
    fn truncated_file_rejected() {
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &sample()).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(read_checkpoint::<f64, _>(&mut bytes.as_slice()).is_err());
        assert!(read_checkpoint::<f64, _>(&mut b"nope\n".as_slice()).is_err());
    }
}
