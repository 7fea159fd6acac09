//! Resolution of run parameters from a config file, `--set` overrides and
//! command-line flags, in increasing order of precedence.

use std::fs;
use std::path::Path;

use replik::data::MatchKey;
use replik::kv::{self, KvConfig, KvMap};
use replik::nn::ModelConfig;
use replik::robust::TrainConfig;
use replik::synth::SynthConfig;
use replik::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Cmv,
    Cancer,
    Custom,
}

impl Profile {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "cmv" => Ok(Self::Cmv),
            "cancer" => Ok(Self::Cancer),
            "custom" => Ok(Self::Custom),
            _ => Err(Error::InvalidConfig(format!(
                "unknown profile `{s}` (expected cmv, cancer or custom)"
            ))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Cmv => "cmv",
            Self::Cancer => "cancer",
            Self::Custom => "custom",
        }
    }

    fn defaults(self) -> (ModelConfig, TrainConfig) {
        match self {
            Self::Cmv => (ModelConfig::cmv(), TrainConfig::cmv()),
            Self::Cancer => (ModelConfig::cancer(), TrainConfig::cancer()),
            Self::Custom => (ModelConfig::cmv(), TrainConfig::bench()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarKind {
    F32,
    F64,
}

impl ScalarKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            _ => Err(Error::InvalidConfig(format!("scalar must be f32 or f64, got `{s}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
        }
    }
}

pub fn parse_match_key(s: &str) -> Result<MatchKey> {
    match s {
        "cdr3" => Ok(MatchKey::Cdr3),
        "cdr3_v" => Ok(MatchKey::Cdr3AndV),
        _ => Err(Error::InvalidConfig(format!("match_key must be cdr3 or cdr3_v, got `{s}`"))),
    }
}

fn match_key_name(k: MatchKey) -> &'static str {
    match k {
        MatchKey::Cdr3 => "cdr3",
        MatchKey::Cdr3AndV => "cdr3_v",
    }
}

/// Reads the optional config file and layers `--set` overrides on top.
pub fn layered(file: Option<&Path>, sets: &[String]) -> Result<KvMap> {
    let mut map = match file {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| {
                Error::InvalidConfig(format!("cannot read config {}: {e}", p.display()))
            })?;
            kv::parse(&text)?
        }
        None => KvMap::new(),
    };
    for s in sets {
        let (k, v) = kv::parse_override(s)?;
        map.insert(k, v);
    }
    Ok(map)
}

/// Everything a training-type command needs.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub profile: Profile,
    pub scalar: ScalarKind,
    pub seed: Option<u64>,
    pub folds: usize,
    pub split_seed: u64,
    pub rotation: usize,
    /// Empty means every rotation.
    pub rotations: Vec<usize>,
    pub seeds: Vec<u64>,
    pub modes: Vec<String>,
    pub match_key: MatchKey,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse_list<T: std::str::FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::InvalidConfig(format!("`{key}`: cannot parse `{s}`")))
        })
        .collect()
}

fn parse_value<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::InvalidConfig(format!("`{key}`: cannot parse `{raw}`")))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn resolve(mut map: KvMap) -> Result<Self> {
        let profile = Profile::parse(map.remove("profile").as_deref().unwrap_or("cmv"))?;
        let (mut model, mut train) = profile.defaults();
        let mut cfg = Self {
            profile,
            scalar: ScalarKind::F32,
            seed: None,
            folds: 5,
            split_seed: 0,
            rotation: 0,
            rotations: Vec::new(),
            seeds: vec![0, 1, 2, 3, 4],
            modes: vec!["full".into(), "no_asa".into(), "no_cotrain".into(), "erm".into()],
            match_key: MatchKey::Cdr3,
            model: ModelConfig::cmv(),
            train: TrainConfig::cmv(),
        };
        if let Some(s) = map.remove("seed") {
            let seed = parse_value("seed", &s)?;
            train = train.with_seed(seed);
            cfg.seed = Some(seed);
        }
        let model_keys: Vec<String> = model.to_pairs().into_iter().map(|p| p.0).collect();
        let train_keys: Vec<String> = train.to_pairs().into_iter().map(|p| p.0).collect();
        for (k, v) in &map {
            match k.as_str() {
                "scalar" => cfg.scalar = ScalarKind::parse(v)?,
                "folds" => cfg.folds = parse_value(k, v)?,
                "split_seed" => cfg.split_seed = parse_value(k, v)?,
                "rotation" => cfg.rotation = parse_value(k, v)?,
                "rotations" => cfg.rotations = parse_list(k, v)?,
                "seeds" => cfg.seeds = parse_list(k, v)?,
                "modes" => cfg.modes = parse_list(k, v)?,
                "match_key" => cfg.match_key = parse_match_key(v)?,
                _ if model_keys.contains(k) => model.set(k, v)?,
                _ if train_keys.contains(k) => train.set(k, v)?,
                _ => return Err(Error::InvalidConfig(format!("unknown key `{k}`"))),
            }
        }
        model.validate()?;
        train.validate()?;
        cfg.model = model;
        cfg.train = train;
        Ok(cfg)
    }

    /// The full effective configuration; feeding it back through
    /// [`RunConfig::resolve`] reproduces `self`.
    pub fn render(&self) -> String {
        let mut pairs: Vec<(String, String)> = vec![
            ("profile".into(), self.profile.name().into()),
            ("scalar".into(), self.scalar.name().into()),
        ];
        if let Some(s) = self.seed {
            pairs.push(("seed".into(), s.to_string()));
        }
        pairs.extend([
            ("folds".into(), self.folds.to_string()),
            ("split_seed".into(), self.split_seed.to_string()),
            ("rotation".into(), self.rotation.to_string()),
            ("rotations".into(), join(&self.rotations)),
            ("seeds".into(), join(&self.seeds)),
            ("modes".into(), self.modes.join(",")),
            ("match_key".into(), match_key_name(self.match_key).into()),
        ]);
        pairs.extend(self.model.to_pairs());
        pairs.extend(self.train.to_pairs());
        kv::render(&pairs)
    }
}

/// Synthetic-data configuration; `preset = benchmark` selects uniform clone sizes.
pub fn resolve_synth(mut map: KvMap) -> Result<SynthConfig> {
    let mut cfg = match map.remove("preset").as_deref() {
        None | Some("default") => SynthConfig::default(),
        Some("benchmark") => SynthConfig::benchmark(),
        Some(other) => {
            return Err(Error::InvalidConfig(format!(
                "unknown preset `{other}` (expected default or benchmark)"
            )))
        }
    };
    cfg.apply(&map)?;
    cfg.validate()?;
    Ok(cfg)
}
