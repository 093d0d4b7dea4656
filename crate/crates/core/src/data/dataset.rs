use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use super::mmt::{read_f32, read_tensor};
use super::{LabelMap, ModalitySample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train = 0,
    Val = 1,
    Test = 2,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub(crate) fn sample_dir(root: &Path, split: Split, id: &str) -> PathBuf {
    root.join(split.name()).join(id)
}

/// Dataset summary stored as `key = value` lines in `root/manifest`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub modalities: Vec<String>,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        format!(
            "modalities = {}\nclasses = {}\nheight = {}\nwidth = {}\ncount = {}\nval_count = {}\ntest_count = {}\nseed = {}\n",
            self.modalities.join(","),
            self.classes,
            self.height,
            self.width,
            self.count,
            self.val_count,
            self.test_count,
            self.seed
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Dataset(format!("manifest line {}: expected key = value", n + 1)))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            kv.get(k)
                .ok_or_else(|| Error::Dataset(format!("manifest: missing `{k}`")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Dataset(format!("manifest: `{k}` is not a number")))
        };
        Ok(Self {
            modalities: get("modalities")?.split(',').map(|s| s.trim().to_string()).collect(),
            classes: num("classes")? as usize,
            height: num("height")? as usize,
            width: num("width")? as usize,
            count: num("count")? as usize,
            val_count: num("val_count")? as usize,
            test_count: num("test_count")? as usize,
            seed: num("seed")?,
        })
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join("manifest");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let path = root.join("manifest");
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))
    }

    pub fn split_count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.count,
            Split::Val => self.val_count,
            Split::Test => self.test_count,
        }
    }
}

/// Loads every sample of `split`, in id order, restricted to `modalities`
/// (all manifest modalities when `None`).
pub fn load_split(root: &Path, split: Split, modalities: Option<&[String]>) -> Result<(Manifest, Vec<ModalitySample>)> {
    let manifest = Manifest::read(root)?;
    let wanted: Vec<String> = match modalities {
        Some(m) => {
            if let Some(bad) = m.iter().find(|x| !manifest.modalities.contains(x)) {
                return Err(Error::UnknownModality(bad.clone()));
            }
            m.to_vec()
        }
        None => manifest.modalities.clone(),
    };
    let mut samples = Vec::with_capacity(manifest.split_count(split));
    for index in 0..manifest.split_count(split) {
        let id = format!("{index:06}");
        let dir = sample_dir(root, split, &id);
        let label_path = dir.join("label.mmt");
        let (shape, data) = read_tensor(&label_path)?.into_u8(&label_path)?;
        if shape != [manifest.height, manifest.width] {
            return Err(Error::Dataset(format!(
                "{}: shape {shape:?}, manifest says {}×{}",
                label_path.display(),
                manifest.height,
                manifest.width
            )));
        }
        let mut rasters = BTreeMap::new();
        for m in &wanted {
            rasters.insert(m.clone(), read_f32(&dir.join(format!("{m}.mmt")))?);
        }
        let sample = ModalitySample {
            id,
            rasters,
            label: LabelMap::new(manifest.height, manifest.width, data)?,
        };
        sample.validate(manifest.classes)?;
        samples.push(sample);
    }
    Ok((manifest, samples))
}
