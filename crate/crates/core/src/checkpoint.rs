//! Model checkpoints: a directory holding `manifest.txt` and `weights.bin`.
//!
//! The manifest is UTF-8, one `key=value` record per line:
//!
//! ```text
//! format=otce-checkpoint-1
//! dtype=f64
//! config={...json...}
//! tensor name=embed shape=11x8 offset=0 dtype=f64
//! ```
//!
//! `offset` is in bytes into the little-endian blob.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::blocks::{OtceConfig, OtceModel};
use crate::error::{Error, Result};
use crate::tensor::{DType, Real};

const FORMAT: &str = "otce-checkpoint-1";

pub fn save<T: Real>(model: &OtceModel<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = format!(
        "format={FORMAT}\ndtype={}\nconfig={}\n",
        T::DTYPE.name(),
        serde_json::to_string(&model.cfg)?
    );
    let mut blob = Vec::new();
    for id in model.store.ids() {
        let t = model.store.get(id);
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!(
            "tensor name={} shape={} offset={} dtype={}\n",
            model.store.name(id),
            shape.join("x"),
            blob.len(),
            T::DTYPE.name()
        ));
        for &x in t.data() {
            x.write_le(&mut blob);
        }
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    fs::write(dir.join("weights.bin"), blob)?;
    Ok(())
}

struct Entry {
    shape: Vec<usize>,
    offset: usize,
    dtype: DType,
}

fn fields(line: &str) -> HashMap<&str, &str> {
    line.split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .collect()
}

/// Reads the config only.
pub fn load_config(dir: &Path) -> Result<OtceConfig> {
    let text = fs::read_to_string(dir.join("manifest.txt"))?;
    let line = text
        .lines()
        .find_map(|l| l.strip_prefix("config="))
        .ok_or_else(|| Error::Format("manifest has no config".into()))?;
    Ok(serde_json::from_str(line)?)
}

/// Rebuilds the model from the stored config and fills every parameter,
/// checking names, shapes and blob bounds.
pub fn load<T: Real>(dir: &Path) -> Result<OtceModel<T>> {
    let text = fs::read_to_string(dir.join("manifest.txt"))?;
    let mut format = None;
    let mut entries = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        if let Some(f) = line.strip_prefix("format=") {
            format = Some(f);
        } else if let Some(rest) = line.strip_prefix("tensor ") {
            let f = fields(rest);
            let get = |k: &str| {
                f.get(k)
                    .copied()
                    .ok_or_else(|| Error::Format(format!("line {}: missing `{k}`", n + 1)))
            };
            let shape = get("shape")?
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Format(format!("line {}: bad shape", n + 1)))?;
            let offset = get("offset")?
                .parse()
                .map_err(|_| Error::Format(format!("line {}: bad offset", n + 1)))?;
            let dtype = get("dtype")?.parse()?;
            entries.insert(
                get("name")?.to_string(),
                Entry {
                    shape,
                    offset,
                    dtype,
                },
            );
        }
    }
    if format != Some(FORMAT) {
        return Err(Error::Format(format!(
            "unknown checkpoint format {format:?}"
        )));
    }
    let cfg = load_config(dir)?;
    let blob = fs::read(dir.join("weights.bin"))?;
    let mut model = OtceModel::<T>::build(&cfg, 0)?;
    if entries.len() != model.store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, config builds {}",
            entries.len(),
            model.store.len()
        )));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        let e = entries
            .get(&name)
            .ok_or_else(|| Error::Format(format!("tensor `{name}` missing from checkpoint")))?;
        let t = model.store.get_mut(id);
        if e.shape != t.shape() {
            return Err(Error::Format(format!(
                "tensor `{name}`: stored shape {:?}, config expects {:?}",
                e.shape,
                t.shape()
            )));
        }
        let w = e.dtype.size();
        let end = e.offset + w * t.numel();
        let bytes = blob
            .get(e.offset..end)
            .ok_or_else(|| Error::Format(format!("tensor `{name}` runs past the blob")))?;
        for (x, b) in t.data_mut().iter_mut().zip(bytes.chunks(w)) {
            *x = match e.dtype {
                DType::F32 => T::of(f32::read_le(b) as f64),
                DType::F64 => T::of(f64::read_le(b)),
            };
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_parameters_and_logits() {
        let cfg = OtceConfig::small("SMAE", 8, 11).unwrap();
        let m = OtceModel::<f64>::build(&cfg, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&m, dir.path()).unwrap();
        let back = load::<f64>(dir.path()).unwrap();
        assert_eq!(back.cfg, cfg);
        for id in m.store.ids() {
            assert_eq!(m.store.get(id), back.store.get(id));
        }
        let toks = [1, 5, 2, 9];
        assert_eq!(
            m.logits(&toks, 1, 4).unwrap(),
            back.logits(&toks, 1, 4).unwrap()
        );
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let cfg = OtceConfig::small("SMAM", 8, 11).unwrap();
        let m = OtceModel::<f32>::build(&cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&m, dir.path()).unwrap();
        let path = dir.path().join("manifest.txt");
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("name=embed shape=11x8", "name=embed shape=8x11x1");
        fs::write(&path, text).unwrap();
        assert!(matches!(load::<f32>(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let cfg = OtceConfig::small("SMAM", 8, 11).unwrap();
        let m = OtceModel::<f32>::build(&cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&m, dir.path()).unwrap();
        let blob = dir.path().join("weights.bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load::<f32>(dir.path()).is_err());
    }
}
