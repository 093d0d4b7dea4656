//! Checkpoint directories: one `.mmt` file per named parameter, a `manifest`
//! (format version, step, modalities) and a `config` snapshot.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::data::mmt::{read_f32, write_f32};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::{ParamStore, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub modalities: Vec<String>,
    pub step: u64,
    pub params: BTreeMap<String, Tensor<f32>>,
}

/// Writes every parameter of `store` to `dir`. The directory is assembled
/// beside the target and swapped in only once complete.
pub fn save(dir: &Path, config: &RunConfig, model: &Model, store: &ParamStore<f32>, step: u64) -> Result<()> {
    let mut staging = dir.as_os_str().to_owned();
    staging.push(".partial");
    let staging = std::path::PathBuf::from(staging);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    for (_, p) in store.iter() {
        write_f32(&staging.join(format!("{}.mmt", p.name)), &p.value)?;
    }
    let manifest = format!(
        "format_version = {FORMAT_VERSION}\nstep = {step}\nmodalities = {}\nparams = {}\n",
        model.modality_names().join(","),
        store.len()
    );
    let path = staging.join("manifest");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    let path = staging.join("config");
    fs::write(&path, config.to_string()).map_err(|e| Error::io(&path, e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
}

fn manifest_field<'a>(text: &'a str, key: &str, dir: &Path) -> Result<&'a str> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == key)
        .map(|(_, v)| v.trim())
        .ok_or_else(|| Error::Dataset(format!("{}: manifest lacks `{key}`", dir.display())))
}

fn bad_manifest(dir: &Path, key: &str, v: &str) -> Error {
    Error::Dataset(format!("{}: manifest `{key}` = `{v}` is invalid", dir.display()))
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join("manifest");
    let manifest = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let version = manifest_field(&manifest, "format_version", dir)?;
    if version.parse::<u32>().ok() != Some(FORMAT_VERSION) {
        return Err(Error::CheckpointMismatch(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let step_s = manifest_field(&manifest, "step", dir)?;
    let step = step_s.parse().map_err(|_| bad_manifest(dir, "step", step_s))?;
    let modalities: Vec<String> = manifest_field(&manifest, "modalities", dir)?
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    let config = RunConfig::read(&dir.join("config"))?;
    let mut params = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(param) = name.strip_suffix(".mmt") {
            params.insert(param.to_string(), read_f32(&entry.path())?);
        }
    }
    Ok(Checkpoint {
        config,
        modalities,
        step,
        params,
    })
}

impl Checkpoint {
    /// Rebuilds the model the checkpoint was saved from.
    pub fn instantiate(&self) -> Result<(Model, ParamStore<f32>)> {
        let (model, mut store) = Model::new(self.config.model.clone(), &self.modalities, self.config.optim.seed)?;
        self.restore(&model.cfg, &mut store)?;
        Ok((model, store))
    }

    /// Copies every parameter value into `store`, which must have been built
    /// from a config agreeing on classes, width and stage count.
    pub fn restore(&self, live: &ModelConfig, store: &mut ParamStore<f32>) -> Result<()> {
        let saved = &self.config.model;
        for (what, a, b) in [
            ("classes", saved.classes, live.classes),
            ("embed dim", saved.embed_dim, live.embed_dim),
            ("stages", saved.num_stages, live.num_stages),
        ] {
            if a != b {
                return Err(Error::CheckpointMismatch(format!("{what}: checkpoint {a}, live model {b}")));
            }
        }
        if self.params.len() != store.len() {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint has {} parameters, live model {}",
                self.params.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for id in &ids {
            let p = store.get(*id);
            let t = self
                .params
                .get(&p.name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing parameter `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "`{}` has shape {:?}, live model {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
        }
        for id in ids {
            let name = store.get(id).name.clone();
            store.get_mut(id).value = self.params[&name].clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (RunConfig, Model, ParamStore<f32>) {
        let mut cfg = RunConfig::desk("data");
        cfg.model.embed_dim = 16;
        cfg.model.num_stages = 2;
        cfg.model.heads = vec![1, 2];
        cfg.model.classes = 3;
        let mods = vec!["rgb".to_string(), "depth".to_string()];
        let (m, s) = Model::new(cfg.model.clone(), &mods, 7).unwrap();
        (cfg, m, s)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, model, store) = setup();
        save(dir.path(), &cfg, &model, &store, 12).unwrap();
        let ck = load(dir.path()).unwrap();
        assert_eq!(ck.step, 12);
        assert_eq!(ck.config, cfg);
        assert_eq!(ck.modalities, model.modality_names());
        let (m2, s2) = ck.instantiate().unwrap();
        assert_eq!(m2.modality_names(), model.modality_names());
        for (id, p) in store.iter() {
            let q = s2.get(id);
            assert_eq!(p.name, q.name);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&p.value), bits(&q.value));
        }
    }

    #[test]
    fn mismatches_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, model, store) = setup();
        save(dir.path(), &cfg, &model, &store, 0).unwrap();
        let ck = load(dir.path()).unwrap();
        for tweak in [
            |c: &mut ModelConfig| c.classes = 4,
            |c: &mut ModelConfig| c.embed_dim = 32,
            |c: &mut ModelConfig| {
                c.num_stages = 3;
                c.heads = vec![1, 2, 4];
            },
        ] {
            let mut live = cfg.model.clone();
            tweak(&mut live);
            let (_, mut s) = Model::new(live.clone(), &model.modality_names(), 0).unwrap();
            assert!(matches!(ck.restore(&live, &mut s), Err(Error::CheckpointMismatch(_))));
        }
        let (_, mut other) = Model::new(cfg.model.clone(), &["rgb".to_string()], 0).unwrap();
        assert!(matches!(ck.restore(&cfg.model, &mut other), Err(Error::CheckpointMismatch(_))));
    }

    #[test]
    fn missing_directory_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load(&dir.path().join("nope")), Err(Error::Io { .. })));
    }
}
