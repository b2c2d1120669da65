//! Flat `key = value` configuration files. `#` starts a comment. Command
//! line flags are layered on top with `set`, so flags win.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::encoder::{EncoderConfig, WordHeadInput};
use crate::error::{Error, Result};
use crate::objectives::{LossWeights, TaskMask};
use crate::retrieval::{Gain, MetricOptions};
use crate::synthetic::SyntheticSpec;
use crate::tasks::TaskConfig;
use crate::trainer::{TeacherTrainConfig, TrainConfig};

pub const SEED_ENV: &str = "SSP_SEED";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlatConfig {
    entries: BTreeMap<String, String>,
}

impl FlatConfig {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: source.to_string(),
                line: i + 1,
                message: format!("expected `key = value`, found {line:?}"),
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line: i + 1,
                    message: "empty key".into(),
                });
            }
            if entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line: i + 1,
                    message: format!("key {k} given twice"),
                });
            }
        }
        Ok(FlatConfig { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let v = self.raw(key).ok_or_else(|| Error::MissingConfigKey(key.to_string()))?;
        v.parse()
            .map_err(|e: T::Err| Error::Config(format!("{key} = {v:?}: {e}")))
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        if self.contains(key) {
            self.require(key)
        } else {
            Ok(default)
        }
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Seed precedence: explicit flag, config file, `SSP_SEED`.
    pub fn resolve_seed(&self, flag: Option<u64>) -> Result<u64> {
        if let Some(s) = flag {
            return Ok(s);
        }
        if self.contains("seed") {
            return self.require("seed");
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an integer"))),
            Err(_) => Err(Error::MissingConfigKey("seed".into())),
        }
    }

    pub fn encoder_config(&self, vocab_size: usize) -> Result<EncoderConfig> {
        let d = EncoderConfig::new(vocab_size);
        let word_head_input = match self.raw("word_head_input").unwrap_or("cls") {
            "cls" => WordHeadInput::Cls,
            "last_sep" => WordHeadInput::LastSep,
            other => return Err(Error::Config(format!("word_head_input = {other:?}; expected cls or last_sep"))),
        };
        let cfg = EncoderConfig {
            hidden_size: self.get_or("hidden_size", d.hidden_size)?,
            layers: self.get_or("layers", d.layers)?,
            heads: self.get_or("heads", d.heads)?,
            ff_size: self.get_or("ff_size", d.ff_size)?,
            max_positions: self.get_or("max_positions", d.max_positions)?,
            dropout: self.get_or("dropout", d.dropout)?,
            word_head_input,
            vocab_size,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn task_config(&self) -> Result<TaskConfig> {
        let d = TaskConfig::default();
        Ok(TaskConfig {
            max_len: self.get_or("max_len", d.max_len)?,
            perturb_prob: self.get_or("perturb_prob", d.perturb_prob)?,
            min_noise_pool: self.get_or("min_noise_pool", d.min_noise_pool)?,
        })
    }

    /// Training settings. The optimization keys are required so a run
    /// never silently falls back to a default learning rate.
    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let grad_clip = match self.raw("grad_clip") {
            None | Some("none") | Some("") => None,
            Some(_) => Some(self.require("grad_clip")?),
        };
        let cfg = TrainConfig {
            learning_rate: self.require("learning_rate")?,
            batch_size: self.require("batch_size")?,
            post_train_epochs: self.require("post_train_epochs")?,
            fine_tune_epochs: self.require("fine_tune_epochs")?,
            seed,
            weights: LossWeights::new(self.require("alpha")?, self.require("beta")?, self.require("gamma")?)?,
            grad_clip,
            squared_norms: self.get_or("squared_norms", d.squared_norms)?,
            tasks: TaskMask {
                topic: self.get_or("task_topic", true)?,
                coref: self.get_or("task_coref", true)?,
                wr: self.get_or("task_wr", true)?,
                kd: self.get_or("task_kd", true)?,
            },
            adam_beta1: self.get_or("adam_beta1", d.adam_beta1)?,
            adam_beta2: self.get_or("adam_beta2", d.adam_beta2)?,
            adam_eps: self.get_or("adam_eps", d.adam_eps)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn teacher_config(&self, seed: u64) -> Result<TeacherTrainConfig> {
        let d = TeacherTrainConfig::default();
        Ok(TeacherTrainConfig {
            learning_rate: self.get_or("teacher_learning_rate", d.learning_rate)?,
            batch_size: self.get_or("teacher_batch_size", d.batch_size)?,
            epochs: self.get_or("teacher_epochs", d.epochs)?,
            temperature: self.get_or("teacher_temperature", d.temperature)?,
            seed,
        })
    }

    /// Generator settings under `synthetic_*` keys.
    pub fn synthetic_spec(&self, seed: u64) -> Result<SyntheticSpec> {
        let d = SyntheticSpec::default();
        let spec = SyntheticSpec {
            n_topics: self.get_or("synthetic_topics", d.n_topics)?,
            entities_per_topic: self.get_or("synthetic_entities_per_topic", d.entities_per_topic)?,
            n_conversations: self.get_or("synthetic_conversations", d.n_conversations)?,
            queries_per_conversation: self.get_or("synthetic_queries_per_conversation", d.queries_per_conversation)?,
            docs_per_entity: self.get_or("synthetic_docs_per_entity", d.docs_per_entity)?,
            omission_rate: self.get_or("synthetic_omission_rate", d.omission_rate)?,
            remention_rate: self.get_or("synthetic_remention_rate", d.remention_rate)?,
            attributes_per_topic: self.get_or("synthetic_attributes_per_topic", d.attributes_per_topic)?,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn metric_options(&self) -> Result<MetricOptions> {
        let d = MetricOptions::default();
        let gain = match self.raw("ndcg_gain").unwrap_or("exponential") {
            "exponential" => Gain::Exponential,
            "linear" => Gain::Linear,
            other => return Err(Error::Config(format!("ndcg_gain = {other:?}; expected exponential or linear"))),
        };
        Ok(MetricOptions {
            positive_threshold: self.get_or("positive_threshold", d.positive_threshold)?,
            gain,
            missing_as_zero: self.get_or("missing_as_zero", d.missing_as_zero)?,
        })
    }
}

/// Default configuration file written by `init-config`: the reference
/// hyperparameters for the full-size setting.
pub fn default_config_text() -> String {
    let t = TrainConfig::default();
    let e = EncoderConfig::new(0);
    let task = TaskConfig::default();
    let teacher = TeacherTrainConfig::default();
    let syn = SyntheticSpec::default();
    format!(
        "# optimization\n\
         learning_rate = {}\n\
         batch_size = {}\n\
         post_train_epochs = {}\n\
         fine_tune_epochs = {}\n\
         fine_tune_learning_rate = {}\n\
         alpha = {}\n\
         beta = {}\n\
         gamma = {}\n\
         grad_clip = none\n\
         squared_norms = false\n\
         seed = 0\n\
         \n# model\n\
         hidden_size = {}\n\
         layers = {}\n\
         heads = {}\n\
         ff_size = {}\n\
         max_positions = {}\n\
         dropout = {}\n\
         word_head_input = cls\n\
         student_init = teacher\n\
         \n# data\n\
         max_len = {}\n\
         perturb_prob = {}\n\
         min_vocab_freq = 1\n\
         \n# teacher\n\
         teacher_learning_rate = {}\n\
         teacher_batch_size = {}\n\
         teacher_epochs = {}\n\
         \n# evaluation\n\
         positive_threshold = 2\n\
         ndcg_gain = exponential\n\
         top_k = 100\n\
         \n# synthetic data\n\
         synthetic_topics = {}\n\
         synthetic_entities_per_topic = {}\n\
         synthetic_conversations = {}\n\
         synthetic_heldout = 100\n\
         synthetic_train = 100\n\
         synthetic_test = 100\n\
         synthetic_queries_per_conversation = {}\n\
         synthetic_docs_per_entity = {}\n\
         synthetic_omission_rate = {}\n\
         synthetic_remention_rate = {}\n\
         synthetic_attributes_per_topic = {}\n",
        t.learning_rate,
        t.batch_size,
        t.post_train_epochs,
        t.fine_tune_epochs,
        t.learning_rate,
        t.weights.alpha,
        t.weights.beta,
        t.weights.gamma,
        e.hidden_size,
        e.layers,
        e.heads,
        e.ff_size,
        e.max_positions,
        e.dropout,
        task.max_len,
        task.perturb_prob,
        teacher.learning_rate,
        teacher.batch_size,
        teacher.epochs,
        syn.n_topics,
        syn.entities_per_topic,
        syn.n_conversations,
        syn.queries_per_conversation,
        syn.docs_per_entity,
        syn.omission_rate,
        syn.remention_rate,
        syn.attributes_per_topic,
    )
}
