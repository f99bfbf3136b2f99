//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment, keys are dotted
//! (`loss.lambda = 1.0`). Every key is optional; unknown or repeated keys are
//! errors naming the key. Numbers accept fractions such as `8/255`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attack::AttackSpec;
use crate::augment::AugmentPolicy;
use crate::data::{cifar10_dir, load_cifar10, synthetic_split, DatasetSplit};
use crate::error::{Error, Result};
use crate::lp::Norm;
use crate::model::{CIFAR10_MEAN, CIFAR10_STD};
use crate::objective::attack_loss::AttackLossKind;
use crate::rng::RngState;
use crate::train::TrainConfig;

/// Environment variable overriding `data.root`.
pub const DATA_ENV: &str = "CONSISTENCY_AT_DATA";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Cifar10,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    pub root: PathBuf,
    /// Synthetic source only.
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Cifar10,
            root: PathBuf::from("data"),
            train_per_class: 100,
            test_per_class: 20,
            image_size: 32,
        }
    }
}

impl DataConfig {
    /// `data.root`, overridden by the environment when set.
    pub fn resolved_root(&self) -> PathBuf {
        match std::env::var_os(DATA_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.root.clone(),
        }
    }

    /// Inverse of [`DataConfig::identity`]; the root comes from `root`.
    pub fn from_identity(identity: &str, root: PathBuf) -> Result<Self> {
        let bad = || Error::config("data.source", format!("unrecognised dataset identity `{identity}`"));
        if identity == "cifar10" {
            return Ok(Self {
                root,
                ..Self::default()
            });
        }
        let rest = identity.strip_prefix("synthetic:").ok_or_else(bad)?;
        let (counts, size) = rest.split_once(':').ok_or_else(bad)?;
        let (tr, te) = counts.split_once('x').ok_or_else(bad)?;
        Ok(Self {
            source: DataSource::Synthetic,
            root,
            train_per_class: tr.parse().map_err(|_| bad())?,
            test_per_class: te.parse().map_err(|_| bad())?,
            image_size: size.parse().map_err(|_| bad())?,
        })
    }

    /// CIFAR-10-C directory under the resolved root.
    pub fn corruption_dir(&self) -> PathBuf {
        self.resolved_root().join("CIFAR-10-C")
    }

    /// Path-free description of the data, part of the config hash.
    pub fn identity(&self) -> String {
        match self.source {
            DataSource::Cifar10 => "cifar10".into(),
            DataSource::Synthetic => format!(
                "synthetic:{}x{}:{}",
                self.train_per_class, self.test_per_class, self.image_size
            ),
        }
    }

    pub fn load(&self, num_classes: usize, seed: u64) -> Result<DatasetSplit> {
        match self.source {
            DataSource::Cifar10 => load_cifar10(&cifar10_dir(&self.resolved_root())),
            DataSource::Synthetic => Ok(synthetic_split(
                num_classes,
                self.train_per_class,
                self.test_per_class,
                (3, self.image_size, self.image_size),
                RngState::new(seed).derive("synthetic", 0),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output_dir: PathBuf,
    /// Preset name the attack fields started from.
    pub attack_preset: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data: DataConfig::default(),
            output_dir: PathBuf::from("runs/default"),
            attack_preset: "pgd10_train".into(),
        }
    }
}

/// Parses `8/255`, `0.5`, `1e-3`.
pub fn parse_number(text: &str) -> Option<f64> {
    let t = text.trim();
    match t.split_once('/') {
        Some((a, b)) => {
            let (a, b) = (a.trim().parse::<f64>().ok()?, b.trim().parse::<f64>().ok()?);
            (b != 0.0).then_some(a / b)
        }
        None => t.parse().ok(),
    }
}

fn num(key: &str, v: &str) -> Result<f64> {
    parse_number(v)
        .filter(|x| x.is_finite())
        .ok_or_else(|| Error::config(key, format!("expected a number, got `{v}`")))
}

fn int<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::config(key, format!("expected a non-negative integer, got `{v}`")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{v}`"))),
    }
}

/// Splits a config document into `(key, value)` pairs, rejecting unknown
/// and repeated keys.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::config(
                format!("line {}", lineno + 1),
                format!("expected `key = value`, got `{line}`"),
            ));
        };
        let key = k.trim().to_string();
        if !KEYS.contains(&key.as_str()) {
            return Err(Error::config(key, "unknown key"));
        }
        if out.iter().any(|(k, _)| *k == key) {
            return Err(Error::config(key, "assigned more than once"));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

/// Every recognised key.
pub const KEYS: [&str; 36] = [
    "seed",
    "data.source",
    "data.root",
    "data.fraction",
    "data.train_per_class",
    "data.test_per_class",
    "data.image_size",
    "model.arch",
    "model.num_classes",
    "model.normalize",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.momentum",
    "train.weight_decay",
    "train.milestones",
    "train.lr_decay",
    "train.eval_limit",
    "attack.preset",
    "attack.norm",
    "attack.epsilon",
    "attack.steps",
    "attack.step_size",
    "attack.random_start",
    "attack.restarts",
    "attack.loss",
    "loss.method",
    "loss.regularizer",
    "loss.lambda",
    "loss.tau",
    "loss.beta",
    "loss.gamma",
    "loss.temper_ablation",
    "augment.policy",
    "augment.custom",
    "output.dir",
];

impl RunConfig {
    /// Parses and validates a config document.
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Builds a config from defaults plus `key = value` overrides.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let get = |k: &str| pairs.iter().rev().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
        for (k, _) in pairs {
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::config(k.clone(), "unknown key"));
            }
        }
        let mut c = RunConfig::default();
        let t = &mut c.train;

        if let Some(v) = get("seed") {
            t.seed = int("seed", v)?;
        }
        if let Some(v) = get("data.source") {
            c.data.source = match v {
                "cifar10" => DataSource::Cifar10,
                "synthetic" => DataSource::Synthetic,
                _ => return Err(Error::config("data.source", format!("expected cifar10 or synthetic, got `{v}`"))),
            };
        }
        if let Some(v) = get("data.root") {
            c.data.root = PathBuf::from(v);
        }
        if let Some(v) = get("data.fraction") {
            t.fraction = num("data.fraction", v)?;
        }
        if let Some(v) = get("data.train_per_class") {
            c.data.train_per_class = int("data.train_per_class", v)?;
        }
        if let Some(v) = get("data.test_per_class") {
            c.data.test_per_class = int("data.test_per_class", v)?;
        }
        if let Some(v) = get("data.image_size") {
            c.data.image_size = int("data.image_size", v)?;
        }

        if let Some(v) = get("model.arch") {
            t.model.arch = v.to_string();
        }
        if let Some(v) = get("model.num_classes") {
            t.model.num_classes = int("model.num_classes", v)?;
        }
        let normalize = match get("model.normalize") {
            Some(v) => boolean("model.normalize", v)?,
            None => true,
        };
        let size = match c.data.source {
            DataSource::Cifar10 => 32,
            DataSource::Synthetic => c.data.image_size,
        };
        t.model.input_shape = (3, size, size);
        t.model.normalization = normalize.then(|| (CIFAR10_MEAN.to_vec(), CIFAR10_STD.to_vec()));
        crate::model::architectures()
            .get(&t.model.arch)
            .map_err(|e| Error::config("model.arch", e.to_string()))?;

        if let Some(v) = get("train.epochs") {
            t.epochs = int("train.epochs", v)?;
        }
        if let Some(v) = get("train.batch_size") {
            t.batch_size = int("train.batch_size", v)?;
        }
        if let Some(v) = get("train.lr") {
            t.lr = num("train.lr", v)?;
        }
        if let Some(v) = get("train.momentum") {
            t.momentum = num("train.momentum", v)?;
        }
        if let Some(v) = get("train.weight_decay") {
            t.weight_decay = num("train.weight_decay", v)?;
        }
        if let Some(v) = get("train.milestones") {
            t.milestones = v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| num("train.milestones", s))
                .collect::<Result<_>>()?;
        }
        if let Some(v) = get("train.lr_decay") {
            t.lr_decay = num("train.lr_decay", v)?;
        }
        if let Some(v) = get("train.eval_limit") {
            t.eval_limit = match v {
                "none" | "all" => None,
                _ => Some(int("train.eval_limit", v)?),
            };
        }

        if let Some(v) = get("loss.method") {
            t.loss.method = v.to_string();
        }
        if let Some(v) = get("loss.regularizer") {
            t.loss.regularizer = v.to_string();
        }
        if let Some(v) = get("loss.lambda") {
            t.loss.lambda = num("loss.lambda", v)?;
        }
        if let Some(v) = get("loss.tau") {
            t.loss.tau = num("loss.tau", v)?;
        }
        if let Some(v) = get("loss.beta") {
            t.loss.beta = num("loss.beta", v)?;
        }
        if let Some(v) = get("loss.gamma") {
            t.loss.gamma = num("loss.gamma", v)?;
        }
        if let Some(v) = get("loss.temper_ablation") {
            t.loss.temper_ablation = boolean("loss.temper_ablation", v)?;
        }
        t.loss.validate()?;

        if let Some(v) = get("attack.preset") {
            c.attack_preset = v.to_string();
        }
        let mut a = AttackSpec::preset(&c.attack_preset).map_err(|e| Error::config("attack.preset", e.to_string()))?;
        if let Some(v) = get("attack.norm") {
            a.threat.norm = Norm::from_p(v).map_err(|e| Error::config("attack.norm", e.to_string()))?;
        }
        if let Some(v) = get("attack.epsilon") {
            a.threat.epsilon = num("attack.epsilon", v)?;
        }
        if let Some(v) = get("attack.steps") {
            a.threat.steps = int("attack.steps", v)?;
        }
        if let Some(v) = get("attack.step_size") {
            a.threat.step_size = num("attack.step_size", v)?;
        }
        if let Some(v) = get("attack.random_start") {
            a.threat.random_start = boolean("attack.random_start", v)?;
        }
        if let Some(v) = get("attack.restarts") {
            a.restarts = int("attack.restarts", v)?;
        }
        let method_loss = t.loss.attack_loss()?;
        a.loss_kind = match get("attack.loss") {
            Some(v) => AttackLossKind::from_str(v).map_err(|e| Error::config("attack.loss", e.to_string()))?,
            None => method_loss,
        };
        t.attack = a;
        let mut sel = a.with_loss(AttackLossKind::CrossEntropy);
        sel.threat.random_start = false;
        t.selection_attack = sel;

        if let Some(v) = get("augment.custom") {
            if get("augment.policy").is_some_and(|p| p != "custom") {
                return Err(Error::config("augment.custom", "requires augment.policy = custom"));
            }
            t.augment = AugmentPolicy::parse_custom(v).map_err(|e| Error::config("augment.custom", e.to_string()))?;
        } else if let Some(v) = get("augment.policy") {
            if v == "custom" {
                return Err(Error::config("augment.policy", "custom policy needs augment.custom"));
            }
            t.augment = AugmentPolicy::named(v).map_err(|e| Error::config("augment.policy", e.to_string()))?;
        }

        if let Some(v) = get("output.dir") {
            c.output_dir = PathBuf::from(v);
        }
        c.train.dataset = c.data.identity();
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.source == DataSource::Synthetic {
            if self.data.train_per_class == 0 || self.data.test_per_class == 0 {
                return Err(Error::config("data.train_per_class", "synthetic split needs at least one image per class"));
            }
            if self.data.image_size < 4 {
                return Err(Error::config("data.image_size", "must be >= 4"));
            }
        } else if self.train.model.num_classes != 10 {
            return Err(Error::config("model.num_classes", "CIFAR-10 has 10 classes"));
        }
        if self.train.model.num_classes < 2 {
            return Err(Error::config("model.num_classes", "must be >= 2"));
        }
        self.train.validate()
    }

    pub fn hash(&self) -> String {
        self.train.hash()
    }

    /// Canonical snapshot: every key with its resolved value.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let a = &t.attack;
        let mut s = String::new();
        let _ = writeln!(s, "# config_hash={}", self.hash());
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", t.seed.to_string());
        kv(
            "data.source",
            match self.data.source {
                DataSource::Cifar10 => "cifar10",
                DataSource::Synthetic => "synthetic",
            }
            .into(),
        );
        kv("data.root", self.data.root.display().to_string());
        kv("data.fraction", t.fraction.to_string());
        kv("data.train_per_class", self.data.train_per_class.to_string());
        kv("data.test_per_class", self.data.test_per_class.to_string());
        kv("data.image_size", self.data.image_size.to_string());
        kv("model.arch", t.model.arch.clone());
        kv("model.num_classes", t.model.num_classes.to_string());
        kv("model.normalize", t.model.normalization.is_some().to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.lr", t.lr.to_string());
        kv("train.momentum", t.momentum.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        kv(
            "train.milestones",
            t.milestones.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(","),
        );
        kv("train.lr_decay", t.lr_decay.to_string());
        kv("train.eval_limit", t.eval_limit.map_or("none".into(), |v| v.to_string()));
        kv("attack.preset", self.attack_preset.clone());
        kv("attack.norm", a.threat.norm.to_string());
        kv("attack.epsilon", a.threat.epsilon.to_string());
        kv("attack.steps", a.threat.steps.to_string());
        kv("attack.step_size", a.threat.step_size.to_string());
        kv("attack.random_start", a.threat.random_start.to_string());
        kv("attack.restarts", a.restarts.to_string());
        kv("attack.loss", a.loss_kind.to_string());
        kv("loss.method", t.loss.method.clone());
        kv("loss.regularizer", t.loss.regularizer.clone());
        kv("loss.lambda", t.loss.lambda.to_string());
        kv("loss.tau", t.loss.tau.to_string());
        kv("loss.beta", t.loss.beta.to_string());
        kv("loss.gamma", t.loss.gamma.to_string());
        kv("loss.temper_ablation", t.loss.temper_ablation.to_string());
        if t.augment.name == "custom" {
            kv("augment.policy", "custom".into());
            kv("augment.custom", t.augment.to_custom_string());
        } else {
            kv("augment.policy", t.augment.name.clone());
        }
        kv("output.dir", self.output_dir.display().to_string());
        s
    }
}
