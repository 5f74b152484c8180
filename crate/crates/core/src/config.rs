//! Run configuration: a flat INI dialect (`[section]` headers over
//! `key = value` lines) that, together with its single seed, fully
//! determines a run. Chosen over nested formats so experiment configs
//! diff cleanly in logs.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::corpus::{Condition, CorpusConfig, CorpusMeta};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::textproc::IdRegistry;
use crate::training::CurriculumConfig;
use crate::{Error, Result};

/// Evaluation and grid settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    /// Guidance weight used when synthesizing for evaluation.
    pub guidance_w: f64,
    /// Grid rows to train, each in 1..=4.
    pub rows: Vec<u32>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { guidance_w: 1.0, rows: vec![1, 2, 3, 4] }
    }
}

/// Everything a run needs, parsed from one config file. The run seed is the
/// only source of randomness: it is copied into the corpus and curriculum
/// sections when the file is parsed, so those sections carry no seed keys of
/// their own.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Run directory; relative paths may be re-rooted by the CLI.
    pub run_dir: PathBuf,
    /// Paired-data condition this run trains under.
    pub condition: Condition,
    pub seed: u64,
    pub corpus: CorpusConfig,
    /// Architecture knobs. Data-derived fields (feature/signal widths,
    /// embedding-table rows) are placeholders until `model_config` resolves
    /// them against a generated corpus.
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub curriculum: CurriculumConfig,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            run_dir: PathBuf::from("runs/desk"),
            condition: Condition::Zero,
            seed: 0,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            curriculum: CurriculumConfig::default(),
            eval: EvalSettings::default(),
        };
        cfg.apply_seed();
        cfg
    }
}

// ── parsing ─────────────────────────────────────────────────────────────

fn bad(section: &str, key: &str, value: &str, want: &str) -> Error {
    Error::Config(format!("[{section}] {key} = {value:?}: expected {want}"))
}

fn p_u64(section: &str, key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| bad(section, key, v, "a non-negative integer"))
}

fn p_usize(section: &str, key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| bad(section, key, v, "a non-negative integer"))
}

fn p_f64(section: &str, key: &str, v: &str) -> Result<f64> {
    let x: f64 = v.parse().map_err(|_| bad(section, key, v, "a number"))?;
    if !x.is_finite() {
        return Err(bad(section, key, v, "a finite number"));
    }
    Ok(x)
}

fn p_bool(section: &str, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(section, key, v, "true or false")),
    }
}

fn p_rows(section: &str, key: &str, v: &str) -> Result<Vec<u32>> {
    let mut rows = Vec::new();
    for part in v.split(',') {
        let r: u32 = part
            .trim()
            .parse()
            .map_err(|_| bad(section, key, v, "a comma-separated list of rows 1-4"))?;
        if !(1..=4).contains(&r) {
            return Err(bad(section, key, v, "rows in 1..=4"));
        }
        if !rows.contains(&r) {
            rows.push(r);
        }
    }
    if rows.is_empty() {
        return Err(bad(section, key, v, "at least one row"));
    }
    rows.sort_unstable();
    Ok(rows)
}

const SECTIONS: [&str; 6] = ["run", "corpus", "model", "losses", "curriculum", "eval"];

impl RunConfig {
    /// Parse a config file's text. Starts from the defaults, so a file only
    /// states what it changes. Unknown sections, unknown keys, duplicate
    /// keys, and malformed values are all errors that name the offender.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut section: Option<String> = None;
        let mut seen: BTreeSet<(String, String)> = BTreeSet::new();

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| {
                        Error::Config(format!("line {}: unterminated section header {line:?}", lineno + 1))
                    })?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(Error::Config(format!(
                        "unknown section [{name}]; expected one of [run], [corpus], [model], [losses], [curriculum], [eval]"
                    )));
                }
                section = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value` or a [section] header, got {line:?}",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            let Some(sec) = section.as_deref() else {
                return Err(Error::Config(format!(
                    "line {}: key {key:?} appears before any [section] header",
                    lineno + 1
                )));
            };
            if !seen.insert((sec.to_string(), key.to_string())) {
                return Err(Error::Config(format!("duplicate key {key:?} in [{sec}]")));
            }
            cfg.set(sec, key, value)?;
        }
        cfg.apply_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let s = section;
        match (section, key) {
            ("run", "dir") => self.run_dir = PathBuf::from(v),
            ("run", "condition") => self.condition = Condition::parse(v)?,
            ("run", "seed") => self.seed = p_u64(s, key, v)?,

            ("corpus", "n_group_a") => self.corpus.n_group_a = p_usize(s, key, v)?,
            ("corpus", "n_group_b") => self.corpus.n_group_b = p_usize(s, key, v)?,
            ("corpus", "speakers_per_lang") => self.corpus.speakers_per_lang = p_usize(s, key, v)?,
            ("corpus", "d_feat") => self.corpus.d_feat = p_usize(s, key, v)?,
            ("corpus", "d_sig") => self.corpus.d_sig = p_usize(s, key, v)?,
            ("corpus", "paired_per_lang") => self.corpus.paired_per_lang = p_usize(s, key, v)?,
            ("corpus", "speech_only_per_lang") => {
                self.corpus.speech_only_per_lang = p_usize(s, key, v)?
            }
            ("corpus", "text_only_per_lang") => {
                self.corpus.text_only_per_lang = p_usize(s, key, v)?
            }
            ("corpus", "test_per_lang") => self.corpus.test_per_lang = p_usize(s, key, v)?,
            ("corpus", "eval_asr_per_lang") => self.corpus.eval_asr_per_lang = p_usize(s, key, v)?,
            ("corpus", "paired_15m_per_lang") => {
                self.corpus.paired_15m_per_lang = p_usize(s, key, v)?
            }
            ("corpus", "noise_sd") => self.corpus.noise_sd = p_f64(s, key, v)?,
            ("corpus", "words_min") => self.corpus.words_min = p_usize(s, key, v)?,
            ("corpus", "words_max") => self.corpus.words_max = p_usize(s, key, v)?,
            ("corpus", "word_len_min") => self.corpus.word_len_min = p_usize(s, key, v)?,
            ("corpus", "word_len_max") => self.corpus.word_len_max = p_usize(s, key, v)?,

            ("model", "s2f_layers") => self.model.s2f_layers = p_usize(s, key, v)?,
            ("model", "shared_layers") => self.model.shared_layers = p_usize(s, key, v)?,
            ("model", "text_layers") => self.model.text_layers = p_usize(s, key, v)?,
            ("model", "decoder_layers") => self.model.decoder_layers = p_usize(s, key, v)?,
            ("model", "hidden_dim") => self.model.hidden_dim = p_usize(s, key, v)?,
            ("model", "vae_dim") => self.model.vae_dim = p_usize(s, key, v)?,
            ("model", "cfg_dropout_prob") => self.model.cfg_dropout_prob = p_f64(s, key, v)?,
            ("model", "refinements") => self.model.refinements = p_usize(s, key, v)?,
            ("model", "bestrq_codes") => self.model.bestrq_codes = p_usize(s, key, v)?,

            ("losses", "w_feature") => self.weights.w_feature = p_f64(s, key, v)?,
            ("losses", "w_kl_max") => self.weights.w_kl_max = p_f64(s, key, v)?,
            ("losses", "w_dur") => self.weights.w_dur = p_f64(s, key, v)?,
            ("losses", "w_rnnt") => self.weights.w_rnnt = p_f64(s, key, v)?,
            ("losses", "kl_start_step") => self.weights.kl_start_step = p_u64(s, key, v)?,
            ("losses", "kl_end_step") => self.weights.kl_end_step = p_u64(s, key, v)?,

            ("curriculum", "stage1_steps") => self.curriculum.stage1_steps = p_u64(s, key, v)?,
            ("curriculum", "stage2_steps") => self.curriculum.stage2_steps = p_u64(s, key, v)?,
            ("curriculum", "stage3_steps") => self.curriculum.stage3_steps = p_u64(s, key, v)?,
            ("curriculum", "eval_asr_steps") => self.curriculum.eval_asr_steps = p_u64(s, key, v)?,
            ("curriculum", "batch_size") => self.curriculum.batch_size = p_usize(s, key, v)?,
            ("curriculum", "w_paired") => self.curriculum.kind_weights.0 = p_f64(s, key, v)?,
            ("curriculum", "w_speech") => self.curriculum.kind_weights.1 = p_f64(s, key, v)?,
            ("curriculum", "w_text") => self.curriculum.kind_weights.2 = p_f64(s, key, v)?,
            ("curriculum", "lr") => self.curriculum.lr = p_f64(s, key, v)?,
            ("curriculum", "max_grad_norm") => self.curriculum.max_grad_norm = p_f64(s, key, v)?,
            ("curriculum", "text_mlm_pretrain") => {
                self.curriculum.text_mlm_pretrain = p_bool(s, key, v)?
            }
            ("curriculum", "mask_span") => self.curriculum.mask_span = p_usize(s, key, v)?,
            ("curriculum", "mask_ratio") => self.curriculum.mask_ratio = p_f64(s, key, v)?,
            ("curriculum", "sig_mask_span") => self.curriculum.sig_mask_span = p_usize(s, key, v)?,
            ("curriculum", "sig_mask_ratio") => {
                self.curriculum.sig_mask_ratio = p_f64(s, key, v)?
            }
            ("curriculum", "sig_noise_std") => self.curriculum.sig_noise_std = p_f64(s, key, v)?,
            ("curriculum", "snapshot_every") => self.curriculum.snapshot_every = p_u64(s, key, v)?,

            ("eval", "guidance_w") => self.eval.guidance_w = p_f64(s, key, v)?,
            ("eval", "rows") => self.eval.rows = p_rows(s, key, v)?,

            _ => {
                return Err(Error::Config(format!("unknown key {key:?} in [{section}]")));
            }
        }
        Ok(())
    }

    /// Copy the run seed into the sections that consume one.
    fn apply_seed(&mut self) {
        self.corpus.seed = self.seed;
        self.curriculum.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.curriculum.validate()?;
        self.weights.validate()?;
        if !self.eval.guidance_w.is_finite() {
            return Err(Error::Config(format!(
                "[eval] guidance_w must be finite, got {}",
                self.eval.guidance_w
            )));
        }
        if self.run_dir.as_os_str().is_empty() {
            return Err(Error::Config("[run] dir must not be empty".into()));
        }
        Ok(())
    }

    /// The run directory after the optional root override: a relative dir is
    /// re-rooted under `root_override`, an absolute dir is left alone.
    pub fn resolved_run_dir(&self, root_override: Option<&str>) -> PathBuf {
        match root_override {
            Some(root) if self.run_dir.is_relative() => Path::new(root).join(&self.run_dir),
            _ => self.run_dir.clone(),
        }
    }

    /// Materialize the architecture against a generated corpus: feature and
    /// signal widths come from the corpus, embedding rows from the registry.
    pub fn model_config(&self, meta: &CorpusMeta, registry: &IdRegistry) -> ModelConfig {
        ModelConfig {
            d_feat: meta.config.d_feat,
            d_sig: meta.config.d_sig,
            n_langs: registry.language_rows(),
            n_spks: registry.speaker_rows(),
            ..self.model.clone()
        }
    }

    /// Canonical text form: every key in a fixed order with its current
    /// value. `parse(to_text(x))` reproduces `x`.
    pub fn to_text(&self) -> String {
        let c = &self.corpus;
        let m = &self.model;
        let w = &self.weights;
        let cur = &self.curriculum;
        let mut out = String::new();
        out.push_str("[run]\n");
        out.push_str(&format!("dir = {}\n", self.run_dir.display()));
        out.push_str(&format!("condition = {}\n", self.condition.as_str()));
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str("\n[corpus]\n");
        out.push_str(&format!("n_group_a = {}\n", c.n_group_a));
        out.push_str(&format!("n_group_b = {}\n", c.n_group_b));
        out.push_str(&format!("speakers_per_lang = {}\n", c.speakers_per_lang));
        out.push_str(&format!("d_feat = {}\n", c.d_feat));
        out.push_str(&format!("d_sig = {}\n", c.d_sig));
        out.push_str(&format!("paired_per_lang = {}\n", c.paired_per_lang));
        out.push_str(&format!("speech_only_per_lang = {}\n", c.speech_only_per_lang));
        out.push_str(&format!("text_only_per_lang = {}\n", c.text_only_per_lang));
        out.push_str(&format!("test_per_lang = {}\n", c.test_per_lang));
        out.push_str(&format!("eval_asr_per_lang = {}\n", c.eval_asr_per_lang));
        out.push_str(&format!("paired_15m_per_lang = {}\n", c.paired_15m_per_lang));
        out.push_str(&format!("noise_sd = {}\n", c.noise_sd));
        out.push_str(&format!("words_min = {}\n", c.words_min));
        out.push_str(&format!("words_max = {}\n", c.words_max));
        out.push_str(&format!("word_len_min = {}\n", c.word_len_min));
        out.push_str(&format!("word_len_max = {}\n", c.word_len_max));
        out.push_str("\n[model]\n");
        out.push_str(&format!("s2f_layers = {}\n", m.s2f_layers));
        out.push_str(&format!("shared_layers = {}\n", m.shared_layers));
        out.push_str(&format!("text_layers = {}\n", m.text_layers));
        out.push_str(&format!("decoder_layers = {}\n", m.decoder_layers));
        out.push_str(&format!("hidden_dim = {}\n", m.hidden_dim));
        out.push_str(&format!("vae_dim = {}\n", m.vae_dim));
        out.push_str(&format!("cfg_dropout_prob = {}\n", m.cfg_dropout_prob));
        out.push_str(&format!("refinements = {}\n", m.refinements));
        out.push_str(&format!("bestrq_codes = {}\n", m.bestrq_codes));
        out.push_str("\n[losses]\n");
        out.push_str(&format!("w_feature = {}\n", w.w_feature));
        out.push_str(&format!("w_kl_max = {}\n", w.w_kl_max));
        out.push_str(&format!("w_dur = {}\n", w.w_dur));
        out.push_str(&format!("w_rnnt = {}\n", w.w_rnnt));
        out.push_str(&format!("kl_start_step = {}\n", w.kl_start_step));
        out.push_str(&format!("kl_end_step = {}\n", w.kl_end_step));
        out.push_str("\n[curriculum]\n");
        out.push_str(&format!("stage1_steps = {}\n", cur.stage1_steps));
        out.push_str(&format!("stage2_steps = {}\n", cur.stage2_steps));
        out.push_str(&format!("stage3_steps = {}\n", cur.stage3_steps));
        out.push_str(&format!("eval_asr_steps = {}\n", cur.eval_asr_steps));
        out.push_str(&format!("batch_size = {}\n", cur.batch_size));
        out.push_str(&format!("w_paired = {}\n", cur.kind_weights.0));
        out.push_str(&format!("w_speech = {}\n", cur.kind_weights.1));
        out.push_str(&format!("w_text = {}\n", cur.kind_weights.2));
        out.push_str(&format!("lr = {}\n", cur.lr));
        out.push_str(&format!("max_grad_norm = {}\n", cur.max_grad_norm));
        out.push_str(&format!("text_mlm_pretrain = {}\n", cur.text_mlm_pretrain));
        out.push_str(&format!("mask_span = {}\n", cur.mask_span));
        out.push_str(&format!("mask_ratio = {}\n", cur.mask_ratio));
        out.push_str(&format!("sig_mask_span = {}\n", cur.sig_mask_span));
        out.push_str(&format!("sig_mask_ratio = {}\n", cur.sig_mask_ratio));
        out.push_str(&format!("sig_noise_std = {}\n", cur.sig_noise_std));
        out.push_str(&format!("snapshot_every = {}\n", cur.snapshot_every));
        out.push_str("\n[eval]\n");
        out.push_str(&format!("guidance_w = {}\n", self.eval.guidance_w));
        let rows: Vec<String> = self.eval.rows.iter().map(|r| r.to_string()).collect();
        out.push_str(&format!("rows = {}\n", rows.join(",")));
        out
    }
}

// ── tests ───────────────────────────────────────────────────────────────
