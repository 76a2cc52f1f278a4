//! Run configuration: a line-oriented `section.key = value` file.
//!
//! ```text
//! # comments start with '#'
//! model.input_size = 64
//! model.blocks = 2x8, 2x16, 2x32
//! model.pools = 1, 1, 0
//! model.hidden = 64
//! train.max_epochs = 100
//! data.train = data/manifest.csv
//! threshold = 0.5
//! ```
//!
//! Relative paths are resolved against the config file's directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cabilstm::extractor::ExtractorConfig;
use cabilstm::model::Recurrence;
use cabilstm::train::TrainSchedule;
use cabilstm::{Error, ModelConfig, Result};

const KNOWN_KEYS: &[&str] = &[
    "model.input_size",
    "model.blocks",
    "model.pools",
    "model.dilation",
    "model.hidden",
    "model.recurrence",
    "model.class_order",
    "train.batch_size",
    "train.max_epochs",
    "train.learning_rate",
    "train.plateau_decay",
    "train.decay_patience",
    "train.early_stop_patience",
    "train.validation_fraction",
    "train.seed",
    "train.checkpoint",
    "train.log",
    "data.train",
    "data.test",
    "threshold",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub extractor: ExtractorConfig,
    pub hidden: usize,
    pub recurrence: Recurrence,
    /// Class names in time-step order; empty means manifest order.
    pub class_order: Vec<String>,
}

impl ModelSection {
    /// Binds the section to the manifest's classes.
    pub fn model_config(&self, classes: &[String]) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::new(self.extractor.clone(), self.hidden, classes.len());
        cfg.recurrence = self.recurrence;
        if !self.class_order.is_empty() {
            cfg.time_order = self
                .class_order
                .iter()
                .map(|name| {
                    classes
                        .iter()
                        .position(|c| c == name)
                        .ok_or_else(|| Error::Config(format!("model.class_order names unknown class '{name}'")))
                })
                .collect::<Result<_>>()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelSection,
    pub schedule: TrainSchedule,
    pub validation_fraction: f64,
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub threshold: f64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", i + 1)))?;
            let key = key.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(Error::Config(format!("line {}: unknown key '{key}'", i + 1)));
            }
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", i + 1)));
            }
        }
        let e = Entries(entries);
        let defaults = TrainSchedule::default();
        let input_size = e.num("model.input_size", 64)?;
        let blocks = match e.get("model.blocks") {
            Some(v) => parse_blocks(v)?,
            None => vec![(2, 8), (2, 16), (2, 32)],
        };
        let pools = match e.get("model.pools") {
            Some(v) => list(v)
                .map(|s| match s {
                    "1" | "true" | "yes" => Ok(true),
                    "0" | "false" | "no" => Ok(false),
                    other => Err(Error::Config(format!("model.pools: '{other}' is not 0/1"))),
                })
                .collect::<Result<Vec<_>>>()?,
            None => {
                let mut p = vec![true; blocks.len()];
                if let Some(last) = p.last_mut() {
                    *last = false;
                }
                p
            }
        };
        let mut extractor = ExtractorConfig::from_filters(&blocks, &pools, input_size);
        extractor.last_block_dilation = e.num("model.dilation", 2)?;
        let schedule = TrainSchedule {
            batch_size: e.num("train.batch_size", defaults.batch_size)?,
            max_epochs: e.num("train.max_epochs", defaults.max_epochs)?,
            learning_rate: e.num("train.learning_rate", defaults.learning_rate)?,
            plateau_decay: e.num("train.plateau_decay", defaults.plateau_decay)?,
            decay_patience: e.num("train.decay_patience", defaults.decay_patience)?,
            early_stop_patience: e.num("train.early_stop_patience", defaults.early_stop_patience)?,
            threshold: e.num("threshold", defaults.threshold)?,
        };
        schedule.validate()?;
        let validation_fraction = e.num("train.validation_fraction", 0.1)?;
        if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
            return Err(Error::Config("train.validation_fraction must lie in (0,1)".into()));
        }
        let path = |key: &str| e.get(key).map(|v| base.join(v));
        Ok(RunConfig {
            model: ModelSection {
                extractor,
                hidden: e.num("model.hidden", 64)?,
                recurrence: e.num("model.recurrence", Recurrence::Bidirectional)?,
                class_order: e
                    .get("model.class_order")
                    .map(|v| list(v).map(String::from).collect())
                    .unwrap_or_default(),
            },
            threshold: schedule.threshold,
            schedule,
            validation_fraction,
            seed: e.num("train.seed", 0)?,
            checkpoint: path("train.checkpoint").unwrap_or_else(|| base.join("model.ckpt")),
            log: path("train.log").unwrap_or_else(|| base.join("train_log.csv")),
            train_manifest: path("data.train"),
            test_manifest: path("data.test"),
        })
    }
}

struct Entries(BTreeMap<String, String>);

impl Entries {
    fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    fn num<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'"))),
        }
    }
}

fn list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

/// `2x8, 2x16` → `[(2, 8), (2, 16)]` (convs × filters).
fn parse_blocks(v: &str) -> Result<Vec<(usize, usize)>> {
    list(v)
        .map(|b| {
            let parsed = b
                .split_once('x')
                .and_then(|(c, f)| Some((c.trim().parse().ok()?, f.trim().parse().ok()?)));
            parsed.ok_or_else(|| Error::Config(format!("model.blocks: '{b}' is not CONVSxFILTERS")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::parse("", Path::new("/cfg")).unwrap();
        assert_eq!(c.model.extractor, ExtractorConfig::desk());
        assert_eq!(c.model.hidden, 64);
        assert_eq!(c.schedule, TrainSchedule::default());
        assert_eq!(c.threshold, 0.5);
        assert_eq!(c.checkpoint, Path::new("/cfg/model.ckpt"));
        assert_eq!(c.train_manifest, None);
    }

    #[test]
    fn full_file() {
        let text = "\
# quickstart
model.input_size = 32
model.blocks = 1x4, 1x8, 1x16   # three blocks
model.pools = 1,1,0
model.hidden = 8
model.recurrence = independent
model.class_order = b, a
train.learning_rate = 0.001
train.seed = 7
data.train = data/manifest.csv
threshold = 0.4
";
        let c = RunConfig::parse(text, Path::new("/x")).unwrap();
        assert_eq!(c.model.extractor.output_size(), 8);
        assert_eq!(c.model.recurrence, Recurrence::Independent);
        assert_eq!(c.schedule.learning_rate, 1e-3);
        assert_eq!(c.schedule.threshold, 0.4);
        assert_eq!(c.seed, 7);
        assert_eq!(c.train_manifest.as_deref(), Some(Path::new("/x/data/manifest.csv")));
        let classes = vec!["a".to_string(), "b".to_string()];
        assert_eq!(c.model.model_config(&classes).unwrap().time_order, vec![1, 0]);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "model.hidden 3",
            "model.width = 3",
            "model.hidden = three",
            "model.blocks = 2by8",
            "model.hidden = 3\nmodel.hidden = 4",
            "train.batch_size = 0",
            "train.validation_fraction = 1.5",
        ] {
            assert!(
                matches!(RunConfig::parse(text, Path::new(".")), Err(Error::Config(_))),
                "{text}"
            );
        }
        let c = RunConfig::parse("model.class_order = z", Path::new(".")).unwrap();
        assert!(c.model.model_config(&["a".into()]).is_err());
    }
}
