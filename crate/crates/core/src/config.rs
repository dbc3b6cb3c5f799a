//! Run configuration: plain key-value text with section headers.
//!
//! Grammar, one directive per line:
//!
//! ```text
//! [section]            # one of: model, data, train, experiment
//! key = value          # integers, reals, names, or space-separated lists
//! # comment            # full-line comments only
//! ```
//!
//! Unknown sections or keys are errors. Every key has a default (see
//! [`RunConfig::preset`]), so a config file only states overrides. The
//! canonical rendering embeds into checkpoints, making runs self-describing.

use crate::error::{Error, Result};
use crate::freezing::FreezeConfig;
use crate::model::{LanguageId, ModelConfig, Variant};
use crate::synth::DataConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // model
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub d_bottleneck: usize,
    pub max_len: usize,
    // data
    pub n_languages: usize,
    pub v_base: usize,
    pub grammar_seed: u64,
    pub data_seed: u64,
    pub pretrain_per_lang: usize,
    pub pretrain_heldout_per_lang: usize,
    pub task_train_per_lang: usize,
    pub task_dev_per_lang: usize,
    pub task_heldout_per_lang: usize,
    pub sweep_examples: usize,
    pub noise_density: f64,
    pub mean_span_len: f64,
    pub related_to: usize,
    pub relatedness: f64,
    // train
    pub lr: f64,
    pub warmup_steps: usize,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_every: usize,
    // experiment
    pub variant: Variant,
    pub freeze: String,
    pub source_languages: Vec<usize>,
    pub eval_languages: Vec<usize>,
}

impl RunConfig {
    /// The desk-scale default: four languages plus the reserved slice,
    /// sized to run the full experiment grid in minutes on one CPU core.
    pub fn preset() -> RunConfig {
        RunConfig {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 128,
            d_bottleneck: 32,
            max_len: 40,
            n_languages: 4,
            v_base: 64,
            grammar_seed: 7,
            data_seed: 101,
            pretrain_per_lang: 2000,
            pretrain_heldout_per_lang: 48,
            task_train_per_lang: 512,
            task_dev_per_lang: 48,
            task_heldout_per_lang: 96,
            sweep_examples: 96,
            noise_density: 0.15,
            mean_span_len: 3.0,
            related_to: 3,
            relatedness: 0.4,
            lr: 1e-3,
            warmup_steps: 50,
            pretrain_steps: 2000,
            finetune_steps: 300,
            batch_size: 8,
            seed: 1,
            eval_every: 200,
            variant: Variant::Modular,
            freeze: "s7".to_string(),
            source_languages: vec![0],
            eval_languages: vec![0, 1, 2, 3],
        }
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::preset();
        cfg.eval_languages.clear(); // re-derived unless stated
        let mut eval_explicit = false;
        let mut section: Option<String> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Config(format!("line {}: {msg}", lineno + 1));
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err("unterminated section header".into()))?;
                if !["model", "data", "train", "experiment"].contains(&name) {
                    return Err(err(format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected `key = value`".into()))?;
            let key = key.trim();
            let value = value.trim();
            let section = section
                .as_deref()
                .ok_or_else(|| err("key outside any [section]".into()))?;
            let parse_usize = || -> Result<usize> {
                value.parse().map_err(|_| err(format!("bad integer {value:?}")))
            };
            let parse_u64 = || -> Result<u64> {
                value.parse().map_err(|_| err(format!("bad integer {value:?}")))
            };
            let parse_f64 = || -> Result<f64> {
                value.parse().map_err(|_| err(format!("bad real {value:?}")))
            };
            let parse_list = || -> Result<Vec<usize>> {
                value
                    .split_whitespace()
                    .map(|v| v.parse().map_err(|_| err(format!("bad list entry {v:?}"))))
                    .collect()
            };
            match (section, key) {
                ("model", "d_model") => cfg.d_model = parse_usize()?,
                ("model", "n_heads") => cfg.n_heads = parse_usize()?,
                ("model", "n_enc_layers") => cfg.n_enc_layers = parse_usize()?,
                ("model", "n_dec_layers") => cfg.n_dec_layers = parse_usize()?,
                ("model", "d_ff") => cfg.d_ff = parse_usize()?,
                ("model", "d_bottleneck") => cfg.d_bottleneck = parse_usize()?,
                ("model", "max_len") => cfg.max_len = parse_usize()?,
                ("data", "n_languages") => cfg.n_languages = parse_usize()?,
                ("data", "v_base") => cfg.v_base = parse_usize()?,
                ("data", "grammar_seed") => cfg.grammar_seed = parse_u64()?,
                ("data", "data_seed") => cfg.data_seed = parse_u64()?,
                ("data", "pretrain_per_lang") => cfg.pretrain_per_lang = parse_usize()?,
                ("data", "pretrain_heldout_per_lang") => {
                    cfg.pretrain_heldout_per_lang = parse_usize()?
                }
                ("data", "task_train_per_lang") => cfg.task_train_per_lang = parse_usize()?,
                ("data", "task_dev_per_lang") => cfg.task_dev_per_lang = parse_usize()?,
                ("data", "task_heldout_per_lang") => cfg.task_heldout_per_lang = parse_usize()?,
                ("data", "sweep_examples") => cfg.sweep_examples = parse_usize()?,
                ("data", "noise_density") => cfg.noise_density = parse_f64()?,
                ("data", "mean_span_len") => cfg.mean_span_len = parse_f64()?,
                ("data", "related_to") => cfg.related_to = parse_usize()?,
                ("data", "relatedness") => cfg.relatedness = parse_f64()?,
                ("train", "lr") => cfg.lr = parse_f64()?,
                ("train", "warmup_steps") => cfg.warmup_steps = parse_usize()?,
                ("train", "pretrain_steps") => cfg.pretrain_steps = parse_usize()?,
                ("train", "finetune_steps") => cfg.finetune_steps = parse_usize()?,
                ("train", "batch_size") => cfg.batch_size = parse_usize()?,
                ("train", "seed") => cfg.seed = parse_u64()?,
                ("train", "eval_every") => cfg.eval_every = parse_usize()?,
                ("experiment", "variant") => {
                    cfg.variant = Variant::from_label(value)
                        .ok_or_else(|| err(format!("variant must be modular or dense, got {value:?}")))?
                }
                ("experiment", "freeze") => cfg.freeze = value.to_string(),
                ("experiment", "source_languages") => cfg.source_languages = parse_list()?,
                ("experiment", "eval_languages") => {
                    cfg.eval_languages = parse_list()?;
                    eval_explicit = true;
                }
                _ => return Err(err(format!("unknown key {key:?} in [{section}]"))),
            }
        }
        if !eval_explicit {
            cfg.eval_languages = (0..cfg.n_languages).collect();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical rendering; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        format!(
            "[model]\n\
             d_model = {}\n\
             n_heads = {}\n\
             n_enc_layers = {}\n\
             n_dec_layers = {}\n\
             d_ff = {}\n\
             d_bottleneck = {}\n\
             max_len = {}\n\
             \n[data]\n\
             n_languages = {}\n\
             v_base = {}\n\
             grammar_seed = {}\n\
             data_seed = {}\n\
             pretrain_per_lang = {}\n\
             pretrain_heldout_per_lang = {}\n\
             task_train_per_lang = {}\n\
             task_dev_per_lang = {}\n\
             task_heldout_per_lang = {}\n\
             sweep_examples = {}\n\
             noise_density = {}\n\
             mean_span_len = {}\n\
             related_to = {}\n\
             relatedness = {}\n\
             \n[train]\n\
             lr = {}\n\
             warmup_steps = {}\n\
             pretrain_steps = {}\n\
             finetune_steps = {}\n\
             batch_size = {}\n\
             seed = {}\n\
             eval_every = {}\n\
             \n[experiment]\n\
             variant = {}\n\
             freeze = {}\n\
             source_languages = {}\n\
             eval_languages = {}\n",
            self.d_model,
            self.n_heads,
            self.n_enc_layers,
            self.n_dec_layers,
            self.d_ff,
            self.d_bottleneck,
            self.max_len,
            self.n_languages,
            self.v_base,
            self.grammar_seed,
            self.data_seed,
            self.pretrain_per_lang,
            self.pretrain_heldout_per_lang,
            self.task_train_per_lang,
            self.task_dev_per_lang,
            self.task_heldout_per_lang,
            self.sweep_examples,
            self.noise_density,
            self.mean_span_len,
            self.related_to,
            self.relatedness,
            self.lr,
            self.warmup_steps,
            self.pretrain_steps,
            self.finetune_steps,
            self.batch_size,
            self.seed,
            self.eval_every,
            self.variant.label(),
            self.freeze,
            list(&self.source_languages),
            list(&self.eval_languages),
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.data_config().validate()?;
        FreezeConfig::from_name(&self.freeze)?;
        for &l in self.source_languages.iter().chain(&self.eval_languages) {
            if l >= self.n_languages {
                return Err(Error::Config(format!(
                    "language {l} out of range (n_languages = {})",
                    self.n_languages
                )));
            }
        }
        if self.source_languages.is_empty() {
            return Err(Error::Config("source_languages must be nonempty".into()));
        }
        Ok(())
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            n_languages: self.n_languages,
            v_base: self.v_base,
            grammar_seed: self.grammar_seed,
            data_seed: self.data_seed,
            max_len: self.max_len,
            pretrain_per_lang: self.pretrain_per_lang,
            pretrain_heldout_per_lang: self.pretrain_heldout_per_lang,
            task_train_per_lang: self.task_train_per_lang,
            task_dev_per_lang: self.task_dev_per_lang,
            task_heldout_per_lang: self.task_heldout_per_lang,
            sweep_examples: self.sweep_examples,
            noise_density: self.noise_density,
            mean_span_len: self.mean_span_len,
            related_to: Some(self.related_to),
            relatedness: self.relatedness,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_languages: self.n_languages,
            n_enc_layers: self.n_enc_layers,
            n_dec_layers: self.n_dec_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            d_bottleneck: self.d_bottleneck,
            vocab_size: self.data_config().layout().vocab_size(),
            max_len: self.max_len,
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            steps: self.pretrain_steps,
            batch_size: self.batch_size,
            seed: self.seed,
            eval_every: self.eval_every,
            languages: Vec::new(),
        }
    }

    pub fn finetune_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            steps: self.finetune_steps,
            batch_size: self.batch_size,
            seed: self.seed,
            eval_every: self.eval_every,
            languages: self.source_languages.iter().map(|&l| LanguageId(l)).collect(),
        }
    }

    pub fn eval_language_ids(&self) -> Vec<LanguageId> {
        self.eval_languages.iter().map(|&l| LanguageId(l)).collect()
    }

    pub fn source_language_ids(&self) -> Vec<LanguageId> {
        self.source_languages.iter().map(|&l| LanguageId(l)).collect()
    }
}
