//! Checkpoints: one little-endian blob per parameter plus a text manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::params::ParamStore;

const MAGIC: &[u8; 4] = b"ALPB";
const FORMAT: u8 = 1;
const MANIFEST: &str = "manifest.txt";
const PARAM_DIR: &str = "params";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointManifest {
    /// Hash of the model-defining configuration.
    pub config_hash: String,
    pub stage: u8,
    pub step_count: usize,
    pub seed: u64,
    /// Free-form settings recorded by each stage, e.g. `stage1.lr`.
    pub settings: BTreeMap<String, String>,
}

impl CheckpointManifest {
    pub fn new(config_hash: impl Into<String>, stage: u8, step_count: usize, seed: u64) -> Self {
        Self { config_hash: config_hash.into(), stage, step_count, seed, settings: BTreeMap::new() }
    }

    fn render(&self, dtype: DType, names: &[String]) -> String {
        let mut out = format!(
            "format = {FORMAT}\nconfig_hash = {}\nstage = {}\nstep_count = {}\nseed = {}\ndtype = {}\n",
            self.config_hash,
            self.stage,
            self.step_count,
            self.seed,
            dtype.as_str()
        );
        for (k, v) in &self.settings {
            out.push_str(&format!("setting.{k} = {v}\n"));
        }
        for n in names {
            out.push_str(&format!("param = {n}\n"));
        }
        out
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptCheckpoint { path: path.to_path_buf(), reason: reason.into() }
}

fn encode_blob(t: &Tensor) -> Result<Vec<u8>> {
    let dims = t.dims();
    let mut out = Vec::with_capacity(8 + 8 * dims.len() + t.elem_count() * t.dtype().size_in_bytes());
    out.extend_from_slice(MAGIC);
    out.push(FORMAT);
    out.push(match t.dtype() {
        DType::F32 => 0,
        DType::F64 => 1,
        other => return Err(crate::error::invalid!("cannot checkpoint dtype {other:?}")),
    });
    out.push(dims.len() as u8);
    out.push(0);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    let flat = t.flatten_all()?;
    match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        _ => flat.to_vec1::<f64>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

fn decode_blob(path: &Path, bytes: &[u8], dev: &Device) -> Result<Tensor> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(corrupt(path, "bad header"));
    }
    if bytes[4] != FORMAT {
        return Err(corrupt(path, format!("unsupported blob format {}", bytes[4])));
    }
    let dtype = match bytes[5] {
        0 => DType::F32,
        1 => DType::F64,
        d => return Err(corrupt(path, format!("unknown dtype code {d}"))),
    };
    let rank = bytes[6] as usize;
    let body = 8 + 8 * rank;
    if bytes.len() < body {
        return Err(corrupt(path, "truncated shape"));
    }
    let dims: Vec<usize> = bytes[8..body]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let data = &bytes[body..];
    if data.len() != count * dtype.size_in_bytes() {
        return Err(corrupt(path, format!("expected {} data bytes, found {}", count * dtype.size_in_bytes(), data.len())));
    }
    let t = match dtype {
        DType::F32 => {
            let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            Tensor::from_vec(v, dims, dev)?
        }
        _ => {
            let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            Tensor::from_vec(v, dims, dev)?
        }
    };
    Ok(t)
}

/// Writes every parameter of `store` under `dir`.
pub fn save_checkpoint(dir: &Path, store: &ParamStore, manifest: &CheckpointManifest) -> Result<PathBuf> {
    let pdir = dir.join(PARAM_DIR);
    fs::create_dir_all(&pdir)?;
    let vars = store.vars();
    let names: Vec<String> = vars.iter().map(|(n, _)| n.clone()).collect();
    for (name, var) in &vars {
        fs::write(pdir.join(format!("{name}.bin")), encode_blob(var.as_tensor())?)?;
    }
    fs::write(dir.join(MANIFEST), manifest.render(store.dtype(), &names))?;
    Ok(dir.to_path_buf())
}

fn parse_manifest(path: &Path, text: &str) -> Result<(CheckpointManifest, DType, Vec<String>)> {
    let mut fields = BTreeMap::new();
    let mut settings = BTreeMap::new();
    let mut names = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| corrupt(path, format!("bad manifest line `{line}`")))?;
        let (k, v) = (k.trim(), v.trim().to_string());
        if k == "param" {
            names.push(v);
        } else if let Some(s) = k.strip_prefix("setting.") {
            settings.insert(s.to_string(), v);
        } else {
            fields.insert(k.to_string(), v);
        }
    }
    let get = |k: &str| fields.get(k).ok_or_else(|| corrupt(path, format!("manifest lacks `{k}`")));
    let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| corrupt(path, format!("bad `{k}`"))) };
    if num("format")? != FORMAT as u64 {
        return Err(corrupt(path, "unsupported manifest format"));
    }
    let dtype = match get("dtype")?.as_str() {
        "f32" => DType::F32,
        "f64" => DType::F64,
        d => return Err(corrupt(path, format!("unsupported dtype `{d}`"))),
    };
    let manifest = CheckpointManifest {
        config_hash: get("config_hash")?.clone(),
        stage: num("stage")? as u8,
        step_count: num("step_count")? as usize,
        seed: num("seed")?,
        settings,
    };
    Ok((manifest, dtype, names))
}

/// Reads only the manifest.
pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::CheckpointNotFound(dir.to_path_buf()));
    }
    Ok(parse_manifest(&path, &fs::read_to_string(&path)?)?.0)
}

/// Loads a checkpoint into a sealed store. A differing config hash is an
/// error unless `allow_hash_mismatch` is set.
pub fn load_checkpoint(
    dir: &Path,
    expected_hash: Option<&str>,
    allow_hash_mismatch: bool,
    dev: &Device,
) -> Result<(ParamStore, CheckpointManifest)> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::CheckpointNotFound(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&path)?;
    let (manifest, dtype, names) = parse_manifest(&path, &text)?;
    if let Some(expected) = expected_hash {
        if expected != manifest.config_hash && !allow_hash_mismatch {
            return Err(Error::HashMismatch { expected: expected.to_string(), found: manifest.config_hash });
        }
    }
    let store = ParamStore::new(manifest.seed, dtype, dev);
    for name in &names {
        let blob_path = dir.join(PARAM_DIR).join(format!("{name}.bin"));
        let bytes = fs::read(&blob_path).map_err(|e| corrupt(&blob_path, e.to_string()))?;
        let t = decode_blob(&blob_path, &bytes, dev)?;
        if t.dtype() != dtype {
            return Err(corrupt(&blob_path, "blob dtype differs from manifest"));
        }
        store.insert(name, &t)?;
    }
    store.seal();
    Ok((store, manifest))
}

/// Parameters whose shapes differ from, or are missing in, `reference`.
pub fn incompatible_tensors(store: &ParamStore, reference: &ParamStore) -> Vec<String> {
    let mut bad = Vec::new();
    for (name, var) in reference.vars() {
        match store.get(&name) {
            Some(v) if v.dims() == var.dims() => {}
            Some(v) => bad.push(format!("{name} (checkpoint {:?}, config {:?})", v.dims(), var.dims())),
            None => bad.push(format!("{name} (missing)")),
        }
    }
    bad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, TrainMask};

    fn random_store(dtype: DType) -> ParamStore {
        let store = ParamStore::new(3, dtype, &Device::Cpu);
        let mask = TrainMask::All;
        let root = store.root(&mask);
        root.pp("a").get((2, 3), "w", Init::Uniform(1.0)).unwrap();
        root.pp("b").get(4, "bias", Init::Uniform(0.5)).unwrap();
        root.get((1, 2, 1, 2), "k", Init::Uniform(2.0)).unwrap();
        store
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for dtype in [DType::F32, DType::F64] {
            let dir = tempfile::tempdir().unwrap();
            let store = random_store(dtype);
            let mut m = CheckpointManifest::new("abc", 2, 17, 9);
            m.settings.insert("stage1.lr".into(), "0.001".into());
            save_checkpoint(dir.path(), &store, &m).unwrap();
            let (back, bm) = load_checkpoint(dir.path(), Some("abc"), false, &Device::Cpu).unwrap();
            assert_eq!(bm, m);
            assert_eq!(back.snapshot().unwrap(), store.snapshot().unwrap());
            assert_eq!(back.dtype(), dtype);
        }
    }

    #[test]
    fn truncated_and_mismatched() {
        let dir = tempfile::tempdir().unwrap();
        let store = random_store(DType::F32);
        save_checkpoint(dir.path(), &store, &CheckpointManifest::new("abc", 1, 0, 0)).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path(), Some("xyz"), false, &Device::Cpu),
            Err(Error::HashMismatch { .. })
        ));
        assert!(load_checkpoint(dir.path(), Some("xyz"), true, &Device::Cpu).is_ok());

        let blob = dir.path().join(PARAM_DIR).join("a.w.bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path(), None, false, &Device::Cpu),
            Err(Error::CorruptCheckpoint { .. })
        ));
        fs::write(&blob, b"AL").unwrap();
        assert!(matches!(
            load_checkpoint(dir.path(), None, false, &Device::Cpu),
            Err(Error::CorruptCheckpoint { .. })
        ));
    }

    #[test]
    fn missing_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_checkpoint(&dir.path().join("nope"), None, false, &Device::Cpu),
            Err(Error::CheckpointNotFound(_))
        ));
    }
}
