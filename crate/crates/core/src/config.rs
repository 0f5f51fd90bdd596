//! Training configuration and its INI-style file format.
//!
//! ```text
//! # global keys first
//! seed = 1
//! epochs = 15          # applies to every stage unless a section overrides it
//! [matcher]
//! episodes = 200
//! ```
//!
//! Precedence: command-line flag > stage section > top-level key >
//! built-in default. Unknown keys, duplicate keys and badly typed
//! values are errors that carry the line number.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::data::EpisodeSpec;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Backbone,
    Pe,
    Matcher,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Backbone, Stage::Pe, Stage::Matcher, Stage::Eval];

    pub fn section(self) -> &'static str {
        match self {
            Stage::Backbone => "backbone",
            Stage::Pe => "pe",
            Stage::Matcher => "matcher",
            Stage::Eval => "eval",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Binary cross-entropy over every query–category pair.
    Bce,
    /// Softmax cross-entropy over the K matcher logits of each query.
    SoftmaxCe,
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "bce" => Ok(LossKind::Bce),
            "softmax_ce" => Ok(LossKind::SoftmaxCe),
            _ => Err(format!("expected bce or softmax_ce, got `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AreaNorm {
    /// Mean over all z·l attention entries.
    Total,
    /// Sum divided by l only.
    Spatial,
}

impl FromStr for AreaNorm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "zl" | "total" => Ok(AreaNorm::Total),
            "l" | "spatial" => Ok(AreaNorm::Spatial),
            _ => Err(format!("expected zl or l, got `{s}`")),
        }
    }
}

/// Optimisation schedule of one stage.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_step: usize,
    pub lr_factor: f64,
    pub batch_size: usize,
    /// Training episodes per epoch (matcher) or evaluation episodes (eval).
    pub episodes: usize,
    /// Validation episodes run after each epoch.
    pub val_episodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub backbone: StageConfig,
    pub pe: StageConfig,
    pub matcher: StageConfig,
    pub eval: StageConfig,
    pub seed: u64,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    /// Pattern count z; `None` means one per selected PE category.
    pub slots: Option<usize>,
    pub pe_stride: usize,
    pub pe_cats: Option<Vec<String>>,
    pub lambda: f64,
    /// Explanation sign; only positive explanation (+1) is supported.
    pub e: f64,
    pub loss: LossKind,
    pub area_norm: AreaNorm,
    pub augment: bool,
    pub dim: usize,
    pub iterations: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            backbone: StageConfig {
                epochs: 50,
                lr: 1e-3,
                lr_step: 20,
                lr_factor: 10.0,
                batch_size: 32,
                episodes: 0,
                val_episodes: 2000,
            },
            pe: StageConfig {
                epochs: 60,
                lr: 1e-4,
                lr_step: 40,
                lr_factor: 10.0,
                batch_size: 32,
                episodes: 0,
                val_episodes: 0,
            },
            matcher: StageConfig {
                epochs: 20,
                lr: 1e-3,
                lr_step: 10,
                lr_factor: 10.0,
                batch_size: 1,
                episodes: 1000,
                val_episodes: 2000,
            },
            eval: StageConfig {
                epochs: 0,
                lr: 0.0,
                lr_step: 1,
                lr_factor: 10.0,
                batch_size: 1,
                episodes: 10_000,
                val_episodes: 0,
            },
            seed: 0,
            way: 5,
            shot: 1,
            query: 15,
            slots: None,
            pe_stride: 10,
            pe_cats: None,
            lambda: 1.0,
            e: 1.0,
            loss: LossKind::Bce,
            area_norm: AreaNorm::Total,
            augment: true,
            dim: 64,
            iterations: 3,
        }
    }
}

const STAGE_KEYS: [&str; 7] = ["epochs", "lr", "lr_step", "lr_factor", "batch_size", "episodes", "val_episodes"];

const GLOBAL_KEYS: [&str; 15] = [
    "seed", "way", "shot", "query", "slots", "pe_stride", "pe_cats", "lambda", "e", "loss", "area_norm", "augment",
    "dim", "iterations", "stage",
];

fn parse<T: FromStr>(value: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("invalid value `{value}`: {e}"))
}

fn positive(value: &str) -> Result<usize, String> {
    match parse::<usize>(value)? {
        0 => Err(format!("`{value}` must be at least 1")),
        v => Ok(v),
    }
}

fn parse_bool(value: &str) -> Result<bool, String> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("invalid boolean `{value}`")),
    }
}

impl TrainConfig {
    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::Backbone => &self.backbone,
            Stage::Pe => &self.pe,
            Stage::Matcher => &self.matcher,
            Stage::Eval => &self.eval,
        }
    }

    fn stage_mut(&mut self, stage: Stage) -> &mut StageConfig {
        match stage {
            Stage::Backbone => &mut self.backbone,
            Stage::Pe => &mut self.pe,
            Stage::Matcher => &mut self.matcher,
            Stage::Eval => &mut self.eval,
        }
    }

    pub fn episode_spec(&self) -> EpisodeSpec {
        EpisodeSpec::new(self.way, self.shot, self.query)
    }

    pub fn is_known_key(key: &str) -> bool {
        STAGE_KEYS.contains(&key) || GLOBAL_KEYS.contains(&key)
    }

    /// Assigns `key`. Stage keys go to `stages`; global keys ignore it.
    pub fn set(&mut self, stages: &[Stage], key: &str, value: &str) -> Result<(), String> {
        if STAGE_KEYS.contains(&key) {
            for &s in stages {
                let sc = self.stage_mut(s);
                match key {
                    "epochs" => sc.epochs = parse(value)?,
                    "lr" => {
                        let lr: f64 = parse(value)?;
                        if !(lr.is_finite() && lr >= 0.0) {
                            return Err(format!("learning rate `{value}` must be finite and ≥ 0"));
                        }
                        sc.lr = lr;
                    }
                    "lr_step" => sc.lr_step = positive(value)?,
                    "lr_factor" => {
                        let f: f64 = parse(value)?;
                        if !(f.is_finite() && f > 1.0) {
                            return Err(format!("lr_factor `{value}` must exceed 1"));
                        }
                        sc.lr_factor = f;
                    }
                    "batch_size" => sc.batch_size = positive(value)?,
                    "episodes" => sc.episodes = positive(value)?,
                    _ => sc.val_episodes = parse(value)?,
                }
            }
            return Ok(());
        }
        match key {
            "seed" => self.seed = parse(value)?,
            "way" => self.way = positive(value)?,
            "shot" => self.shot = positive(value)?,
            "query" => self.query = positive(value)?,
            "slots" => {
                self.slots = match value {
                    "auto" => None,
                    v => Some(positive(v)?),
                }
            }
            "pe_stride" => self.pe_stride = positive(value)?,
            "pe_cats" => {
                let cats: Vec<String> = value.split(',').map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect();
                if cats.is_empty() {
                    return Err("pe_cats needs at least one category".into());
                }
                self.pe_cats = Some(cats);
            }
            "lambda" => {
                let l: f64 = parse(value)?;
                if !(l.is_finite() && l >= 0.0) {
                    return Err(format!("lambda `{value}` must be finite and ≥ 0"));
                }
                self.lambda = l;
            }
            "e" => {
                if parse::<f64>(value)? != 1.0 {
                    return Err("only positive explanation (e = 1) is supported".into());
                }
                self.e = 1.0;
            }
            "loss" => self.loss = parse(value)?,
            "area_norm" => self.area_norm = parse(value)?,
            "augment" => self.augment = parse_bool(value)?,
            "dim" => self.dim = positive(value)?,
            "iterations" => self.iterations = positive(value)?,
            // recorded by manifests; the subcommand decides the stage
            "stage" => {
                if !["backbone", "pe", "matcher", "eval", "explain"].contains(&value) {
                    return Err(format!("unknown stage `{value}`"));
                }
            }
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses the INI-style text of a config file over the defaults.
    pub fn from_ini(text: &str) -> Result<TrainConfig> {
        Self::from_ini_over(TrainConfig::default(), text)
    }

    /// Parses config text on top of `base`.
    pub fn from_ini_over(base: TrainConfig, text: &str) -> Result<TrainConfig> {
        let mut top: Vec<(usize, String, String)> = Vec::new();
        let mut sectioned: Vec<(usize, Stage, String, String)> = Vec::new();
        let mut seen: BTreeMap<(Option<Stage>, String), usize> = BTreeMap::new();
        let mut section: Option<Stage> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |message: String| Error::Parse { line: line_no, message };
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                section = Some(
                    Stage::ALL
                        .into_iter()
                        .find(|s| s.section() == name)
                        .ok_or_else(|| err(format!("unknown section [{name}]")))?,
                );
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(err(format!("expected `key = value`, got `{line}`")));
            };
            let (key, value) = (key.trim().to_string(), value.trim().to_string());
            if !Self::is_known_key(&key) {
                return Err(err(format!("unknown key `{key}`")));
            }
            if section.is_some() && !STAGE_KEYS.contains(&key.as_str()) {
                return Err(err(format!("`{key}` is a global key and cannot appear in a section")));
            }
            if let Some(first) = seen.insert((section, key.clone()), line_no) {
                return Err(err(format!("duplicate key `{key}` (first set on line {first})")));
            }
            match section {
                None => top.push((line_no, key, value)),
                Some(s) => sectioned.push((line_no, s, key, value)),
            }
        }
        let mut cfg = base;
        for (line, key, value) in top {
            cfg.set(&Stage::ALL, &key, &value).map_err(|message| Error::Parse { line, message })?;
        }
        for (line, stage, key, value) in sectioned {
            cfg.set(&[stage], &key, &value).map_err(|message| Error::Parse { line, message })?;
        }
        Ok(cfg)
    }

    /// Flattened `key → value` view used by run manifests.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for stage in Stage::ALL {
            let s = self.stage(stage);
            let p = stage.section();
            out.insert(format!("{p}.epochs"), s.epochs.to_string());
            out.insert(format!("{p}.lr"), s.lr.to_string());
            out.insert(format!("{p}.lr_step"), s.lr_step.to_string());
            out.insert(format!("{p}.lr_factor"), s.lr_factor.to_string());
            out.insert(format!("{p}.batch_size"), s.batch_size.to_string());
            out.insert(format!("{p}.episodes"), s.episodes.to_string());
            out.insert(format!("{p}.val_episodes"), s.val_episodes.to_string());
        }
        out.insert("seed".into(), self.seed.to_string());
        out.insert("way".into(), self.way.to_string());
        out.insert("shot".into(), self.shot.to_string());
        out.insert("query".into(), self.query.to_string());
        out.insert("slots".into(), self.slots.map_or("auto".into(), |z| z.to_string()));
        out.insert("pe_stride".into(), self.pe_stride.to_string());
        out.insert("pe_cats".into(), self.pe_cats.as_ref().map_or(String::new(), |c| c.join(",")));
        out.insert("lambda".into(), self.lambda.to_string());
        out.insert("e".into(), self.e.to_string());
        out.insert("loss".into(), match self.loss {
            LossKind::Bce => "bce".into(),
            LossKind::SoftmaxCe => "softmax_ce".into(),
        });
        out.insert("area_norm".into(), match self.area_norm {
            AreaNorm::Total => "zl".into(),
            AreaNorm::Spatial => "l".into(),
        });
        out.insert("augment".into(), self.augment.to_string());
        out.insert("dim".into(), self.dim.to_string());
        out.insert("iterations".into(), self.iterations.to_string());
        out
    }
}

pub fn parse_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    TrainConfig::from_ini(&text)
}

/// `base_lr / factor^⌊epoch / step⌋`.
pub fn lr_schedule(epoch: usize, base_lr: f64, step: usize, factor: f64) -> f64 {
    base_lr / factor.powi((epoch / step.max(1)) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(TrainConfig::from_ini("").unwrap(), TrainConfig::default());
        assert_eq!(TrainConfig::from_ini("# only a comment\n\n").unwrap(), TrainConfig::default());
    }

    #[test]
    fn lambda_key() {
        assert_eq!(TrainConfig::from_ini("lambda = 1.0").unwrap().lambda, 1.0);
        assert_eq!(TrainConfig::from_ini("lambda = 0.25 # weaker").unwrap().lambda, 0.25);
    }

    #[test]
    fn type_errors_report_line() {
        let err = TrainConfig::from_ini("seed = 3\n\nepochs = abc\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_and_duplicate_keys() {
        assert!(matches!(TrainConfig::from_ini("lamda = 1"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(TrainConfig::from_ini("way = 5\nway = 5"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(TrainConfig::from_ini("[pe]\nseed = 1"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(TrainConfig::from_ini("[nope]"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn sections_override_top_level() {
        let cfg = TrainConfig::from_ini("[matcher]\nepochs = 5\n").unwrap();
        assert_eq!(cfg.matcher.epochs, 5);
        assert_eq!(cfg.backbone.epochs, 50);
        let cfg = TrainConfig::from_ini("epochs = 7\n[pe]\nepochs = 2\n").unwrap();
        assert_eq!((cfg.backbone.epochs, cfg.pe.epochs, cfg.matcher.epochs), (7, 2, 7));
    }

    #[test]
    fn defaults_follow_training_protocol() {
        let c = TrainConfig::default();
        assert_eq!((c.backbone.epochs, c.backbone.lr, c.backbone.lr_step), (50, 1e-3, 20));
        assert_eq!((c.pe.epochs, c.pe.lr, c.pe.lr_step), (60, 1e-4, 40));
        assert_eq!((c.matcher.epochs, c.matcher.episodes, c.matcher.lr_step), (20, 1000, 10));
        assert_eq!((c.lambda, c.e, c.dim, c.iterations), (1.0, 1.0, 64, 3));
    }

    #[test]
    fn negative_explanation_rejected() {
        assert!(TrainConfig::from_ini("e = -1").is_err());
    }

    #[test]
    fn schedule_values() {
        assert_eq!(lr_schedule(0, 1e-3, 20, 10.0), 1e-3);
        assert!((lr_schedule(20, 1e-3, 20, 10.0) - 1e-4).abs() < 1e-18);
        assert!((lr_schedule(59, 1e-4, 40, 10.0) - 1e-5).abs() < 1e-18);
        assert!((lr_schedule(39, 1e-4, 40, 10.0) - 1e-4).abs() < 1e-18);
    }
}
