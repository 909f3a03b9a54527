//! Run configuration: fusion settings, class split, evaluation protocol and
//! the synthetic data spec, all in one flat `key=value` namespace.

use segproto::data::{ArtifactLevel, SyntheticSpec};
use segproto::fewshot::ClassSplit;
use segproto::fusion::FusionConfig;
use segproto::kv::{self, KeyValues};
use segproto::{Error, Result};

const DATA_PREFIX: &str = "data.";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub fusion: FusionConfig,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    /// Evaluation episodes `T`.
    pub episodes: usize,
    /// Shot counts evaluated by `eval`.
    pub shots: Vec<usize>,
    pub data: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            fusion: FusionConfig::default(),
            seen: vec![0, 2, 4, 6],
            unseen: vec![1, 3, 5],
            episodes: 100,
            shots: vec![5],
            data: SyntheticSpec::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, then `file` pairs, then `overrides` in order.
    pub fn resolve(file: Option<&KeyValues>, overrides: &[(String, String)]) -> Result<Self> {
        let mut merged = KeyValues::new();
        if let Some(f) = file {
            merged.extend(f.iter().map(|(k, v)| (k.clone(), v.clone())));
        }
        for (k, v) in overrides {
            merged.insert(k.clone(), v.clone());
        }
        Self::from_key_values(&merged)
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut data = KeyValues::new();
        let mut fusion = KeyValues::new();
        for (k, v) in kv {
            let v = v.as_str();
            match k.as_str() {
                "seen" => cfg.seen = kv::parse_list(k, v, kv::parse_usize)?,
                "unseen" => cfg.unseen = kv::parse_list(k, v, kv::parse_usize)?,
                "episodes" => cfg.episodes = kv::parse_usize(k, v)?,
                "shots" => cfg.shots = kv::parse_list(k, v, kv::parse_usize)?,
                _ => match k.strip_prefix(DATA_PREFIX) {
                    Some(rest) => {
                        data.insert(rest.to_string(), v.to_string());
                    }
                    None => {
                        fusion.insert(k.clone(), v.to_string());
                    }
                },
            }
        }
        if let Some(bad) = cfg.fusion.apply_key_values(&fusion)?.first() {
            return Err(Error::Config(format!("unknown key `{bad}`")));
        }
        cfg.data = resolve_data(&data)?;
        if !kv.contains_key("shots") {
            cfg.shots = vec![cfg.fusion.n];
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        self.data.validate()?;
        self.split()?;
        let classes = self.data.classes.len();
        if let Some(c) = self.seen.iter().chain(&self.unseen).find(|&&c| c >= classes) {
            return Err(Error::Config(format!(
                "class {c} in the split does not exist (data has {classes} classes)"
            )));
        }
        if self.data.side != self.fusion.encoder.side {
            return Err(Error::Config(format!(
                "data.side {} differs from network side {}",
                self.data.side, self.fusion.encoder.side
            )));
        }
        if self.episodes == 0 || self.shots.is_empty() || self.shots.contains(&0) {
            return Err(Error::Config("episodes and shots must be positive".into()));
        }
        Ok(())
    }

    /// Seen/unseen lists as a validated split.
    pub fn split(&self) -> Result<ClassSplit> {
        ClassSplit::new(self.seen.clone(), self.unseen.clone())
    }

    /// Every key, fully resolved.
    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = self.fusion.to_key_values();
        kv.insert("seen".into(), kv::join(&self.seen));
        kv.insert("unseen".into(), kv::join(&self.unseen));
        kv.insert("episodes".into(), self.episodes.to_string());
        kv.insert("shots".into(), kv::join(&self.shots));
        for (k, v) in self.data.to_key_values() {
            kv.insert(format!("{DATA_PREFIX}{k}"), v);
        }
        kv
    }
}

/// Builds the preset selected by `classes`, `samples_per_class`, `level` and
/// `seed`, then overlays every `data.*` key onto its full key set.
fn resolve_data(data: &KeyValues) -> Result<SyntheticSpec> {
    let base = SyntheticSpec::default();
    let get = |k: &str| data.get(k).map(String::as_str);
    let classes = get("classes").map_or(Ok(base.classes.len()), |v| kv::parse_usize("data.classes", v))?;
    let per_class = get("samples_per_class").map_or(Ok(base.samples_per_class), |v| {
        kv::parse_usize("data.samples_per_class", v)
    })?;
    let level: ArtifactLevel = get("level").map_or(Ok(ArtifactLevel::Moderate), str::parse)?;
    let seed = get("seed").map_or(Ok(base.seed), |v| kv::parse_u64("data.seed", v))?;
    let mut full = SyntheticSpec::preset(classes, per_class, level, seed).to_key_values();
    for (k, v) in data.iter().filter(|(k, _)| *k != "level") {
        if !full.contains_key(k) {
            return Err(Error::Config(format!("unknown key `{DATA_PREFIX}{k}`")));
        }
        full.insert(k.clone(), v.clone());
    }
    SyntheticSpec::from_key_values(&full)
}

/// Parses one `--set key=value` argument.
pub fn parse_override(arg: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = arg
        .split_once('=')
        .ok_or_else(|| format!("expected key=value, got `{arg}`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}
