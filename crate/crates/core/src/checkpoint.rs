//! Checkpoint directories: a text manifest plus one BTF file per parameter.
//!
//! ```text
//! # edgedoc checkpoint
//! format=1
//! config.stage_channels=16,32,64,128
//! ...
//! meta.epoch=7
//! param.cls_head.fc1.bias=cls_head.fc1.bias.btf
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{EdgeDoc, ModelConfig};
use crate::nn::ParamBundle;
use crate::tensor::Tensor;

pub const MANIFEST_NAME: &str = "checkpoint.txt";
const FORMAT_VERSION: &str = "1";

/// Free-form training metadata stored next to the weights.
pub type Metadata = BTreeMap<String, String>;

pub fn manifest_text(model: &EdgeDoc, meta: &Metadata) -> String {
    let mut s = String::from("# edgedoc checkpoint\n");
    s.push_str(&format!("format={FORMAT_VERSION}\n"));
    for (k, v) in model.config().to_pairs() {
        s.push_str(&format!("config.{k}={v}\n"));
    }
    for (k, v) in meta {
        s.push_str(&format!("meta.{k}={v}\n"));
    }
    for name in model.params().names() {
        s.push_str(&format!("param.{name}={name}.btf\n"));
    }
    s
}

/// Writes the checkpoint into a sibling temporary directory and renames it
/// over `dir`, so readers never observe a half-written checkpoint.
pub fn save(dir: impl AsRef<Path>, model: &EdgeDoc, meta: &Metadata) -> Result<()> {
    let dir = dir.as_ref();
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let staging = tempfile::Builder::new()
        .prefix(".checkpoint-")
        .tempdir_in(parent)
        .map_err(|e| Error::io(parent, e))?;
    for (name, t) in model.params().iter() {
        t.write_btf(staging.path().join(format!("{name}.btf")))?;
    }
    let manifest = staging.path().join(MANIFEST_NAME);
    fs::write(&manifest, manifest_text(model, meta)).map_err(|e| Error::io(&manifest, e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let staged = staging.keep();
    fs::rename(&staged, dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

pub fn load(dir: impl AsRef<Path>) -> Result<(EdgeDoc, Metadata)> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut config_pairs = Vec::new();
    let mut meta = Metadata::new();
    let mut files = Vec::new();
    let mut version = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::format("checkpoint manifest", format!("line {}: expected key=value", lineno + 1))
        })?;
        if k == "format" {
            version = Some(v.to_string());
        } else if let Some(k) = k.strip_prefix("config.") {
            config_pairs.push((k.to_string(), v.to_string()));
        } else if let Some(k) = k.strip_prefix("meta.") {
            meta.insert(k.to_string(), v.to_string());
        } else if let Some(k) = k.strip_prefix("param.") {
            files.push((k.to_string(), v.to_string()));
        } else {
            return Err(Error::format("checkpoint manifest", format!("line {}: unknown key {k}", lineno + 1)));
        }
    }
    if version.as_deref() != Some(FORMAT_VERSION) {
        return Err(Error::Checkpoint(format!("unsupported checkpoint format {version:?}")));
    }
    let mut config = ModelConfig::default();
    config.apply_pairs(config_pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    let mut params = ParamBundle::new();
    for (name, file) in files {
        if file.contains('/') || file.contains('\\') || file.starts_with('.') {
            return Err(Error::Checkpoint(format!("{name}: file {file:?} escapes the checkpoint directory")));
        }
        let t = Tensor::read_btf(dir.join(&file))?;
        params.insert(name, t)?;
    }
    let model = EdgeDoc::from_params(config, params)?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let model = EdgeDoc::build(ModelConfig::reduced(64), 3).unwrap();
        let mut meta = Metadata::new();
        meta.insert("epoch".into(), "4".into());
        meta.insert("val_loss".into(), format!("{}", 0.1234567f32));
        let dir = tmp.path().join("ckpt");
        save(&dir, &model, &meta).unwrap();
        let (back, meta_back) = load(&dir).unwrap();
        assert_eq!(back.config(), model.config());
        assert_eq!(back.params().checksum(), model.params().checksum());
        assert_eq!(meta_back, meta);
        // Overwriting in place leaves exactly one checkpoint behind.
        save(&dir, &back, &meta).unwrap();
        let entries: Vec<_> = fs::read_dir(tmp.path()).unwrap().collect();
        assert_eq!(entries.len(), 1);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let tmp = tempfile::tempdir().unwrap();
        let model = EdgeDoc::build(ModelConfig::reduced(64), 3).unwrap();
        let dir = tmp.path().join("ckpt");
        save(&dir, &model, &Metadata::new()).unwrap();
        Tensor::zeros([3]).write_btf(dir.join("mask_head.bias.btf")).unwrap();
        assert!(matches!(load(&dir), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn config_mismatch_is_reported() {
        let tmp = tempfile::tempdir().unwrap();
        let model = EdgeDoc::build(ModelConfig::reduced(64), 3).unwrap();
        let dir = tmp.path().join("ckpt");
        save(&dir, &model, &Metadata::new()).unwrap();
        let path = dir.join(MANIFEST_NAME);
        let text = fs::read_to_string(&path).unwrap().replace("config.stage_channels=8,16,16,32", "config.stage_channels=8,16,16,64");
        fs::write(&path, text).unwrap();
        assert!(matches!(load(&dir), Err(Error::Checkpoint(_))));
    }
}
