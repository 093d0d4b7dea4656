//! Run configuration: a flat `key = value` file grouped under `[model]`,
//! `[data]` and `[optim]` headers.
//!
//! A `profile = desk|full` line before the first section selects the base
//! defaults; every later key overrides them. `#` starts a comment line.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fusion::TopK;
use crate::model::{InferenceHead, ModelConfig};
use crate::training::{OhemConfig, Schedule};

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub root: PathBuf,
    /// `None` trains on every modality in the dataset manifest.
    pub modalities: Option<Vec<String>>,
    pub height: usize,
    pub width: usize,
    pub augment: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub batch: usize,
    pub epochs: usize,
    pub warmup_epochs: f64,
    pub warmup_ratio: f64,
    pub poly_power: f64,
    pub seed: u64,
    /// Write `last/` every this many epochs; 0 writes only at the end.
    pub checkpoint_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 3e-4,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            batch: 4,
            epochs: 50,
            warmup_epochs: 10.0,
            warmup_ratio: 0.1,
            poly_power: 0.9,
            seed: 0,
            checkpoint_every: 1,
        }
    }
}

impl OptimConfig {
    pub fn schedule(&self) -> Schedule {
        Schedule {
            base_lr: self.base_lr,
            total_epochs: self.epochs as f64,
            warmup_epochs: self.warmup_epochs.min(self.epochs as f64),
            warmup_ratio: self.warmup_ratio,
            power: self.poly_power,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub w0: f64,
    pub w1: f64,
    pub prob_threshold: f64,
    pub data: DataConfig,
    pub optim: OptimConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Profile {
    #[default]
    Desk,
    Full,
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "desk" => Ok(Profile::Desk),
            "full" | "paper" => Ok(Profile::Full),
            other => Err(format!("unknown profile `{other}` (desk, full)")),
        }
    }
}

impl RunConfig {
    /// Small defaults: 64×64 images, batch 4, 50 epochs, LoRA rank 4.
    pub fn desk(root: impl Into<PathBuf>) -> Self {
        Self {
            model: ModelConfig {
                lora_rank: 4,
                ..ModelConfig::default()
            },
            w0: 1.0,
            w1: 1.0,
            prob_threshold: OhemConfig::default().prob_threshold,
            data: DataConfig {
                root: root.into(),
                modalities: None,
                height: 64,
                width: 64,
                augment: false,
            },
            optim: OptimConfig::default(),
        }
    }

    /// Full-scale recipe: 1024² inputs, batch 6, 100 epochs, LoRA rank 32.
    pub fn full(root: impl Into<PathBuf>) -> Self {
        let mut c = Self::desk(root);
        c.model.lora_rank = 32;
        c.data.height = 1024;
        c.data.width = 1024;
        c.optim.batch = 6;
        c.optim.epochs = 100;
        c
    }

    pub fn profile(p: Profile, root: impl Into<PathBuf>) -> Self {
        match p {
            Profile::Desk => Self::desk(root),
            Profile::Full => Self::full(root),
        }
    }

    pub fn ohem(&self) -> OhemConfig {
        OhemConfig {
            prob_threshold: self.prob_threshold,
            ..OhemConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let o = &self.optim;
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.w0 >= 0.0 && self.w1 >= 0.0 && self.w0 + self.w1 > 0.0) {
            return bad(format!("head weights w0 = {}, w1 = {}", self.w0, self.w1));
        }
        if !(self.prob_threshold > 0.0 && self.prob_threshold <= 1.0) {
            return bad(format!("p_th = {} outside (0, 1]", self.prob_threshold));
        }
        if self.data.height == 0 || self.data.width == 0 {
            return bad("data height and width must be positive".into());
        }
        if let Some(m) = &self.data.modalities {
            if m.is_empty() {
                return bad("data.modalities is empty".into());
            }
        }
        if o.batch == 0 {
            return bad("optim.batch must be positive".into());
        }
        if !(0.0..1.0).contains(&o.betas.0) || !(0.0..1.0).contains(&o.betas.1) || !(o.eps > 0.0) {
            return bad(format!("adam betas {:?} / eps {}", o.betas, o.eps));
        }
        if !(o.weight_decay >= 0.0) {
            return bad(format!("weight_decay {}", o.weight_decay));
        }
        o.schedule().validate()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }
}

fn parse_num<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("`{v}`: {e}"))
}

fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    v.split(',').map(|s| parse_num(s.trim())).collect()
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("`{v}` is not true/false")),
    }
}

fn parse_names(v: &str) -> std::result::Result<Vec<String>, String> {
    let names: Vec<String> = v.split(',').map(|s| s.trim().to_string()).collect();
    if names.iter().any(|n| n.is_empty()) {
        return Err(format!("`{v}` has an empty entry"));
    }
    Ok(names)
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    fn set(&mut self, section: &str, key: &str, v: &str, root_set: &mut bool) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let o = &mut self.optim;
        match (section, key) {
            ("model", "d") => m.embed_dim = parse_num(v)?,
            ("model", "stages") => m.num_stages = parse_num(v)?,
            ("model", "window") => m.window = parse_num(v)?,
            ("model", "heads") => m.heads = parse_list(v)?,
            ("model", "patch_stride") => m.patch_stride = parse_num(v)?,
            ("model", "r") => m.lora_rank = parse_num(v)?,
            ("model", "k") => {
                m.top_k = if v == "auto" { TopK::Auto } else { TopK::Fixed(parse_num(v)?) }
            }
            ("model", "renormalize_topk") => m.renormalize_topk = parse_bool(v)?,
            ("model", "dropout") => m.dropout = parse_num(v)?,
            ("model", "classes") => m.classes = parse_num(v)?,
            ("model", "inference_head") => m.inference_head = v.parse::<InferenceHead>()?,
            ("model", "topdown_levels") => {
                m.topdown_levels = if v == "all" { None } else { Some(parse_list(v)?) }
            }
            ("model", "neck_per_modality") => m.neck_per_modality = parse_bool(v)?,
            ("model", "freeze_neck") => m.freeze_neck = parse_bool(v)?,
            ("model", "w0") => self.w0 = parse_num(v)?,
            ("model", "w1") => self.w1 = parse_num(v)?,
            ("model", "p_th") => self.prob_threshold = parse_num(v)?,
            ("data", "root") => {
                if v.is_empty() {
                    return Err("empty data root".into());
                }
                self.data.root = PathBuf::from(v);
                *root_set = true;
            }
            ("data", "modalities") => {
                self.data.modalities = if v == "all" { None } else { Some(parse_names(v)?) }
            }
            ("data", "height") => self.data.height = parse_num(v)?,
            ("data", "width") => self.data.width = parse_num(v)?,
            ("data", "augment") => self.data.augment = parse_bool(v)?,
            ("optim", "base_lr") => o.base_lr = parse_num(v)?,
            ("optim", "weight_decay") => o.weight_decay = parse_num(v)?,
            ("optim", "betas") => match parse_list::<f64>(v)?.as_slice() {
                &[b1, b2] => o.betas = (b1, b2),
                _ => return Err(format!("betas needs two values, got `{v}`")),
            },
            ("optim", "eps") => o.eps = parse_num(v)?,
            ("optim", "batch") => o.batch = parse_num(v)?,
            ("optim", "epochs") => o.epochs = parse_num(v)?,
            ("optim", "warmup_epochs") => o.warmup_epochs = parse_num(v)?,
            ("optim", "warmup_ratio") => o.warmup_ratio = parse_num(v)?,
            ("optim", "poly_power") => o.poly_power = parse_num(v)?,
            ("optim", "seed") => o.seed = parse_num(v)?,
            ("optim", "checkpoint_every") => o.checkpoint_every = parse_num(v)?,
            _ => return Err(format!("unknown key `{key}` in [{section}]")),
        }
        Ok(())
    }
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::desk("");
        let mut section: Option<String> = None;
        let mut seen: Vec<(String, String)> = Vec::new();
        let mut root_set = false;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |msg: String| Error::ConfigLine { line: line_no, msg };
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("malformed section header `{line}`")))?
                    .trim();
                if !matches!(name, "model" | "data" | "optim") {
                    return Err(err(format!("unknown section `[{name}]`")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let sec = section.clone().unwrap_or_default();
            if seen.iter().any(|(s, k)| *s == sec && k == key) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            seen.push((sec.clone(), key.to_string()));
            match section.as_deref() {
                None if key == "profile" => {
                    if seen.len() > 1 {
                        return Err(err("`profile` must be the first setting".into()));
                    }
                    cfg = RunConfig::profile(value.parse().map_err(err)?, "");
                }
                None => return Err(err(format!("key `{key}` outside any section"))),
                Some(s) => cfg.set(s, key, value, &mut root_set).map_err(err)?,
            }
        }
        if !root_set {
            return Err(Error::Config("data.root is required".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Normal form: every key, fixed order, shortest round-trip number formatting.
impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = &self.model;
        let o = &self.optim;
        let d = &self.data;
        let mut s = String::new();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "d = {}", m.embed_dim);
        let _ = writeln!(s, "stages = {}", m.num_stages);
        let _ = writeln!(s, "window = {}", m.window);
        let _ = writeln!(s, "heads = {}", join(&m.heads));
        let _ = writeln!(s, "patch_stride = {}", m.patch_stride);
        let _ = writeln!(s, "r = {}", m.lora_rank);
        let _ = match m.top_k {
            TopK::Auto => writeln!(s, "k = auto"),
            TopK::Fixed(k) => writeln!(s, "k = {k}"),
        };
        let _ = writeln!(s, "renormalize_topk = {}", m.renormalize_topk);
        let _ = writeln!(s, "dropout = {}", m.dropout);
        let _ = writeln!(s, "classes = {}", m.classes);
        let _ = writeln!(s, "inference_head = {}", m.inference_head);
        let _ = match &m.topdown_levels {
            None => writeln!(s, "topdown_levels = all"),
            Some(l) => writeln!(s, "topdown_levels = {}", join(l)),
        };
        let _ = writeln!(s, "neck_per_modality = {}", m.neck_per_modality);
        let _ = writeln!(s, "freeze_neck = {}", m.freeze_neck);
        let _ = writeln!(s, "w0 = {}", self.w0);
        let _ = writeln!(s, "w1 = {}", self.w1);
        let _ = writeln!(s, "p_th = {}", self.prob_threshold);
        let _ = writeln!(s, "\n[data]");
        let _ = writeln!(s, "root = {}", d.root.display());
        let _ = match &d.modalities {
            None => writeln!(s, "modalities = all"),
            Some(l) => writeln!(s, "modalities = {}", join(l)),
        };
        let _ = writeln!(s, "height = {}", d.height);
        let _ = writeln!(s, "width = {}", d.width);
        let _ = writeln!(s, "augment = {}", d.augment);
        let _ = writeln!(s, "\n[optim]");
        let _ = writeln!(s, "base_lr = {}", o.base_lr);
        let _ = writeln!(s, "weight_decay = {}", o.weight_decay);
        let _ = writeln!(s, "betas = {}, {}", o.betas.0, o.betas.1);
        let _ = writeln!(s, "eps = {}", o.eps);
        let _ = writeln!(s, "batch = {}", o.batch);
        let _ = writeln!(s, "epochs = {}", o.epochs);
        let _ = writeln!(s, "warmup_epochs = {}", o.warmup_epochs);
        let _ = writeln!(s, "warmup_ratio = {}", o.warmup_ratio);
        let _ = writeln!(s, "poly_power = {}", o.poly_power);
        let _ = writeln!(s, "seed = {}", o.seed);
        let _ = writeln!(s, "checkpoint_every = {}", o.checkpoint_every);
        f.write_str(&s)
    }
}
