//! Flat `section.key = value` configuration files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::codec::{BinSpec, CommandField, DimSpec};
use crate::env::{SpecFamily, TaskKind, TaskSpec};
use crate::model::lora::LoraInit;
use crate::model::ModelConfig;
use crate::train::{Objective, TrainConfig};

pub const SEED_ENV: &str = "MORE_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("key {key}: cannot parse {value:?}")]
    BadValue { key: String, value: String },
    #[error("unknown keys: {0}")]
    UnknownKeys(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Parsed key/value pairs. Values keep their raw text.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    map: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                msg: "expected key = value".into(),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    msg: format!("bad key {k:?}"),
                });
            }
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    msg: format!("duplicate key {k}"),
                });
            }
        }
        Ok(KeyValues { map })
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.map.insert(key.to_string(), value.into());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ConfigError::BadValue {
                key: key.into(),
                value: v.clone(),
            }),
        }
    }

    fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        self.map
            .get(key)
            .map(|v| {
                v.parse().map_err(|_| ConfigError::BadValue {
                    key: key.into(),
                    value: v.clone(),
                })
            })
            .transpose()
    }

    fn list(&self, key: &str) -> Option<Vec<String>> {
        self.map
            .get(key)
            .map(|v| v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub length: usize,
    pub horizon: usize,
    pub tasks: Vec<TaskKind>,
    pub n_objects: usize,
    /// Overrides the per-task default when set.
    pub n_distractors: Option<usize>,
}

impl EnvConfig {
    fn apply(&self, mut fam: SpecFamily) -> SpecFamily {
        for t in &mut fam.tasks {
            t.n_objects = self.n_objects;
            if let Some(n) = self.n_distractors {
                t.n_distractors = n;
            }
        }
        fam
    }

    pub fn train_family(&self) -> SpecFamily {
        self.apply(SpecFamily::train(&self.tasks, self.length, self.horizon))
    }

    pub fn eval_family(&self) -> SpecFamily {
        self.apply(SpecFamily::eval(&self.tasks, self.length, self.horizon))
    }

    pub fn family(&self, ood: bool) -> SpecFamily {
        if ood {
            self.eval_family()
        } else {
            self.train_family()
        }
    }

    /// Observation vocabulary size shared by every task of the family.
    pub fn obs_vocab(&self) -> usize {
        let spec = TaskSpec {
            n_objects: self.n_objects,
            ..TaskSpec::new(TaskKind::GoTo, self.length, self.horizon)
        };
        spec.vocab().size()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub n_expert: usize,
    pub n_subopt: usize,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seeds: usize,
    pub ood: bool,
}

/// Which ingredients a training run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Flags {
    pub use_rl: bool,
    pub use_moe: bool,
    pub use_subopt_data: bool,
}

impl Flags {
    pub const FULL: Flags = Flags {
        use_rl: true,
        use_moe: true,
        use_subopt_data: true,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub env: EnvConfig,
    pub data: DataConfig,
    pub bins: BinSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub flags: Flags,
}

const FIELDS: &[&str] = &[
    "seed",
    "env.length",
    "env.horizon",
    "env.tasks",
    "env.n_objects",
    "env.n_distractors",
    "data.n_expert",
    "data.n_subopt",
    "data.epsilon",
    "bins.fields",
    "model.layers",
    "model.hidden",
    "model.heads",
    "model.ffn",
    "model.experts",
    "model.top_k",
    "model.rank",
    "model.scaling",
    "model.attn_lora",
    "model.dense_rank",
    "model.head_scale",
    "model.lora_init_std",
    "train.gamma",
    "train.alpha",
    "train.beta",
    "train.lr",
    "train.target_sync",
    "train.batch_size",
    "train.steps",
    "train.alpha_anneal",
    "train.clip",
    "eval.episodes",
    "eval.seeds",
    "eval.ood",
    "flags.use_rl",
    "flags.use_moe",
    "flags.use_subopt_data",
];

fn known(key: &str) -> bool {
    if FIELDS.contains(&key) {
        return true;
    }
    // bins.<field>.{lo,hi,n}
    let parts: Vec<&str> = key.split('.').collect();
    parts.len() == 3 && parts[0] == "bins" && CommandField::from_name(parts[1]).is_some() && ["lo", "hi", "n"].contains(&parts[2])
}

impl ExperimentConfig {
    /// Read a file and apply the `MORE_SEED` override.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut kv = KeyValues::parse(&text)?;
        if let Ok(s) = std::env::var(SEED_ENV) {
            kv.set("seed", s);
        }
        Self::from_kv(&kv)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::from_kv(&KeyValues::parse(text)?)
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self, ConfigError> {
        let unknown: Vec<&str> = kv.keys().filter(|k| !known(k)).collect();
        if !unknown.is_empty() {
            return Err(ConfigError::UnknownKeys(unknown.join(", ")));
        }
        let invalid = |m: String| ConfigError::Invalid(m);

        let tasks = match kv.list("env.tasks") {
            None => TaskKind::ALL.to_vec(),
            Some(names) => names
                .iter()
                .map(|n| TaskKind::from_name(n).ok_or_else(|| invalid(format!("unknown task {n}"))))
                .collect::<Result<_, _>>()?,
        };
        let env = EnvConfig {
            length: kv.get("env.length", 20)?,
            horizon: kv.get("env.horizon", 60)?,
            tasks,
            n_objects: kv.get("env.n_objects", 4)?,
            n_distractors: kv.get_opt("env.n_distractors")?,
        };
        env.train_family().validate().map_err(|e| invalid(e.to_string()))?;
        env.eval_family().validate().map_err(|e| invalid(e.to_string()))?;

        let fields: Vec<CommandField> = match kv.list("bins.fields") {
            None => CommandField::ALL.to_vec(),
            Some(names) => names
                .iter()
                .map(|n| CommandField::from_name(n).ok_or_else(|| invalid(format!("unknown command field {n}"))))
                .collect::<Result<_, _>>()?,
        };
        let mut dims = Vec::with_capacity(fields.len());
        for f in fields {
            let (lo, hi, n) = f.default_range();
            let key = |s: &str| format!("bins.{}.{s}", f.name());
            dims.push(DimSpec::new(f, kv.get(&key("lo"), lo)?, kv.get(&key("hi"), hi)?, kv.get(&key("n"), n)?));
        }
        let bins = BinSpec::new(env.obs_vocab() as u32, dims).map_err(|e| invalid(e.to_string()))?;

        let md = ModelConfig::default();
        let hidden = kv.get("model.hidden", md.hidden)?;
        let model = ModelConfig {
            n_layers: kv.get("model.layers", md.n_layers)?,
            hidden,
            heads: kv.get("model.heads", md.heads)?,
            ffn: kv.get("model.ffn", 2 * hidden)?,
            n_experts: kv.get("model.experts", md.n_experts)?,
            top_k: kv.get("model.top_k", md.top_k)?,
            rank: kv.get("model.rank", md.rank)?,
            scaling: kv.get("model.scaling", md.scaling)?,
            attn_lora: kv.get("model.attn_lora", md.attn_lora)?,
            use_moe: true,
            dense_rank: kv.get_opt("model.dense_rank")?,
            max_len: crate::env::OBS_LEN + crate::env::INSTR_LEN + bins.n_dims(),
            head_scale: kv.get("model.head_scale", md.head_scale)?,
            backbone_seed: 0,
            init_seed: 0,
            lora_init: match kv.get_opt::<f64>("model.lora_init_std")? {
                Some(s) if s > 0.0 => LoraInit::RandomB(s),
                _ => LoraInit::ZeroB,
            },
        };
        model.validate().map_err(|e| invalid(e.to_string()))?;

        let td = TrainConfig::default();
        let train = TrainConfig {
            gamma: kv.get("train.gamma", td.gamma)?,
            alpha: kv.get("train.alpha", td.alpha)?,
            beta: kv.get("train.beta", td.beta)?,
            lr: kv.get("train.lr", td.lr)?,
            target_sync: kv.get("train.target_sync", td.target_sync)?,
            batch_size: kv.get("train.batch_size", td.batch_size)?,
            total_steps: kv.get("train.steps", td.total_steps)?,
            seed: 0,
            alpha_anneal: kv.get_opt("train.alpha_anneal")?,
            clip: match kv.get::<f64>("train.clip", 1.0)? {
                c if c > 0.0 => Some(c),
                _ => None,
            },
            objective: Objective::Conservative,
        };
        train.validate().map_err(|e| invalid(e.to_string()))?;

        let data = DataConfig {
            n_expert: kv.get("data.n_expert", 80)?,
            n_subopt: kv.get("data.n_subopt", 20)?,
            epsilon: kv.get("data.epsilon", 0.5)?,
        };
        if !(0.0..=1.0).contains(&data.epsilon) {
            return Err(invalid(format!("epsilon {} outside [0, 1]", data.epsilon)));
        }
        let eval = EvalConfig {
            episodes: kv.get("eval.episodes", 25)?,
            seeds: kv.get("eval.seeds", 5)?,
            ood: kv.get("eval.ood", true)?,
        };
        let flags = Flags {
            use_rl: kv.get("flags.use_rl", true)?,
            use_moe: kv.get("flags.use_moe", true)?,
            use_subopt_data: kv.get("flags.use_subopt_data", true)?,
        };
        Ok(ExperimentConfig {
            seed: kv.get("seed", 0)?,
            env,
            data,
            bins,
            model,
            train,
            eval,
            flags,
        })
    }
}
