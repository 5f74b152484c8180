//! Three-stage curriculum driver: masked pretraining, recognition
//! warm-start, then joint training over all three data kinds; with metrics
//! logging, periodic snapshots, and bit-exact resume from any snapshot.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::corpus::RecordKind;
use crate::losses::bestrq::RandomQuantizer;
use crate::losses::{LossWeights, TrainStepReport};
use crate::model::vocoder::{collect_vocoder_pairs, fit_pseudo_vocoder};
use crate::model::{Checkpoint, ModelConfig, ParamStore};
use crate::num::{AdamHyper, Tensor};
use crate::rng::{self, purpose};
use crate::textproc::IdRegistry;
use crate::training::data::TrainSet;
use crate::training::steps::{
    acoustic_features, asr_step, stage1_step, supervised_step, unspoken_text_step,
    untranscribed_speech_step, ExternalLabels, StepConfig, TRAIN_EVAL_ASR, TRAIN_STAGE2,
};
use crate::{Error, Result};

/// Dimensionality the masked-prediction quantizer projects signal frames to.
const BESTRQ_PROJ_DIM: usize = 4;

/// Extra tag so the evaluation recognizer initializes from a different
/// stream than the model under the same seed.
const EVAL_ASR_INIT_TAG: u64 = 0xEA;

/// Curriculum hyperparameters: stage lengths, batching, masking, and
/// snapshot cadence.
#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumConfig {
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    pub stage3_steps: u64,
    /// Steps for the separately trained evaluation recognizer.
    pub eval_asr_steps: u64,
    pub batch_size: usize,
    /// Joint-stage sampling weights over (paired, speech-only, text-only).
    pub kind_weights: (f64, f64, f64),
    pub seed: u64,
    pub lr: f64,
    pub max_grad_norm: f64,
    /// Whether pretraining also runs masked-token updates on text.
    pub text_mlm_pretrain: bool,
    pub mask_span: usize,
    pub mask_ratio: f64,
    pub sig_mask_span: usize,
    pub sig_mask_ratio: f64,
    pub sig_noise_std: f64,
    /// Snapshot every N steps; 0 disables periodic snapshots.
    pub snapshot_every: u64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            stage1_steps: 2000,
            stage2_steps: 2000,
            stage3_steps: 1500,
            eval_asr_steps: 2000,
            batch_size: 8,
            kind_weights: (1.0, 1.0, 1.0),
            seed: 0,
            lr: 1e-3,
            max_grad_norm: 5.0,
            text_mlm_pretrain: true,
            mask_span: 3,
            mask_ratio: 0.15,
            sig_mask_span: 4,
            sig_mask_ratio: 0.15,
            sig_noise_std: 0.5,
            snapshot_every: 500,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.max_grad_norm.is_finite() && self.max_grad_norm > 0.0) {
            return Err(Error::Config(format!(
                "max_grad_norm must be positive, got {}",
                self.max_grad_norm
            )));
        }
        let w = [self.kind_weights.0, self.kind_weights.1, self.kind_weights.2];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().all(|&x| x == 0.0) {
            return Err(Error::Config(format!(
                "kind_weights must be non-negative with at least one positive, got {w:?}"
            )));
        }
        for (name, span, ratio) in [
            ("mask", self.mask_span, self.mask_ratio),
            ("sig_mask", self.sig_mask_span, self.sig_mask_ratio),
        ] {
            if span == 0 {
                return Err(Error::Config(format!("{name}_span must be ≥ 1")));
            }
            if !(ratio > 0.0 && ratio <= 1.0) {
                return Err(Error::Config(format!(
                    "{name}_ratio must be in (0, 1], got {ratio}"
                )));
            }
        }
        if !(self.sig_noise_std.is_finite() && self.sig_noise_std >= 0.0) {
            return Err(Error::Config(format!(
                "sig_noise_std must be non-negative, got {}",
                self.sig_noise_std
            )));
        }
        Ok(())
    }
}

/// Append-only TSV metrics log: `step<TAB>kind<TAB>name=value,...`. Values
/// print in shortest-roundtrip form so logs compare exactly across runs.
pub struct MetricsLog {
    out: Option<BufWriter<File>>,
}

impl MetricsLog {
    pub fn to_file(path: &Path) -> Result<MetricsLog> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog { out: Some(BufWriter::new(file)) })
    }

    pub fn disabled() -> MetricsLog {
        MetricsLog { out: None }
    }

    pub fn record(&mut self, r: &TrainStepReport) -> Result<()> {
        let Some(out) = self.out.as_mut() else { return Ok(()) };
        let mut parts: Vec<String> =
            r.named_losses().iter().map(|(n, v)| format!("{n}={v}")).collect();
        if let Some(klw) = r.kl_weight_applied {
            parts.push(format!("kl_weight={klw}"));
        }
        parts.push(format!("items={}", r.items));
        parts.push(format!("skipped={}", r.items_skipped));
        writeln!(out, "{}\t{}\t{}", r.step, r.kind, parts.join(","))
            .and_then(|()| out.flush())
            .map_err(|e| Error::Format(format!("metrics log write failed: {e}")))
    }
}

/// Snapshot file name for a stage in progress.
pub fn partial_checkpoint_name(stage: u32) -> String {
    format!("stage{stage}.partial.ckpt")
}

/// Checkpoint file name for a finished stage.
pub fn final_checkpoint_name(stage: u32) -> String {
    format!("stage{stage}.ckpt")
}

/// File name of the finished evaluation recognizer.
pub const EVAL_ASR_CHECKPOINT: &str = "eval_asr.ckpt";

/// Drives one model through the curriculum.
pub struct Trainer {
    store: ParamStore,
    registry: IdRegistry,
    weights: LossWeights,
    cur: CurriculumConfig,
    quantizer: RandomQuantizer,
    external: Option<ExternalLabels>,
    forbidden_paired_langs: BTreeSet<String>,
    config_echo: String,
}

impl Trainer {
    /// Fresh model, parameters drawn from the curriculum seed.
    pub fn new(
        mc: &ModelConfig,
        weights: LossWeights,
        cur: CurriculumConfig,
        registry: IdRegistry,
    ) -> Result<Trainer> {
        cur.validate()?;
        weights.validate()?;
        let store = ParamStore::init(mc, cur.seed)?;
        let quantizer =
            RandomQuantizer::new(cur.seed, mc.d_sig, BESTRQ_PROJ_DIM, mc.bestrq_codes)?;
        Ok(Trainer {
            store,
            registry,
            weights,
            cur,
            quantizer,
            external: None,
            forbidden_paired_langs: BTreeSet::new(),
            config_echo: String::new(),
        })
    }

    /// Resume from a snapshot. The curriculum seed must be the one the
    /// snapshot was trained under for the continuation to be exact.
    pub fn from_checkpoint(
        ckpt: Checkpoint,
        weights: LossWeights,
        cur: CurriculumConfig,
    ) -> Result<Trainer> {
        cur.validate()?;
        weights.validate()?;
        let mc = ckpt.store.config.clone();
        let quantizer =
            RandomQuantizer::new(cur.seed, mc.d_sig, BESTRQ_PROJ_DIM, mc.bestrq_codes)?;
        Ok(Trainer {
            store: ckpt.store,
            registry: ckpt.registry,
            weights,
            cur,
            quantizer,
            external: None,
            forbidden_paired_langs: BTreeSet::new(),
            config_echo: ckpt.config_echo,
        })
    }

    pub fn with_external_labels(mut self, labels: Option<ExternalLabels>) -> Self {
        self.external = labels;
        self
    }

    /// Languages whose paired data is a contract violation if ever drawn
    /// into a supervised step (the zero-resource audit).
    pub fn with_forbidden_paired_langs(mut self, langs: BTreeSet<String>) -> Self {
        self.forbidden_paired_langs = langs;
        self
    }

    pub fn with_config_echo(mut self, echo: String) -> Self {
        self.config_echo = echo;
        self
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn registry(&self) -> &IdRegistry {
        &self.registry
    }

    pub fn into_store(self) -> ParamStore {
        self.store
    }

    pub fn checkpoint(&self, stage: u32, step: u64) -> Checkpoint {
        Checkpoint {
            stage,
            step,
            registry: self.registry.clone(),
            config_echo: self.config_echo.clone(),
            store: self.store.clone(),
        }
    }

    fn step_config(&self) -> StepConfig {
        StepConfig {
            mc: self.store.config.clone(),
            weights: self.weights.clone(),
            hyper: AdamHyper { lr: self.cur.lr, ..AdamHyper::default() },
            seed: self.cur.seed,
            max_grad_norm: self.cur.max_grad_norm,
            mask_span: self.cur.mask_span,
            mask_ratio: self.cur.mask_ratio,
            sig_mask_span: self.cur.sig_mask_span,
            sig_mask_ratio: self.cur.sig_mask_ratio,
            sig_noise_std: self.cur.sig_noise_std,
        }
    }

    /// All three stages from scratch.
    pub fn run(
        &mut self,
        set: &TrainSet,
        log: &mut MetricsLog,
        snapshot_dir: Option<&Path>,
    ) -> Result<Vec<TrainStepReport>> {
        self.run_from(set, 1, 0, log, snapshot_dir)
    }

    /// Run one stage from `from` completed steps to its end, without
    /// continuing into later stages. Lets a grid driver reuse the early
    /// stages across runs that only differ later in the curriculum, and a
    /// command front end train or resume one stage at a time.
    pub fn run_stage(
        &mut self,
        set: &TrainSet,
        stage: u32,
        from: u64,
        log: &mut MetricsLog,
        snapshot_dir: Option<&Path>,
    ) -> Result<Vec<TrainStepReport>> {
        let mut reports = Vec::new();
        match stage {
            1 => self.stage1(set, from, log, snapshot_dir, &mut reports)?,
            2 => self.stage2(set, from, log, snapshot_dir, &mut reports)?,
            3 => self.stage3(set, from, log, snapshot_dir, &mut reports)?,
            _ => return Err(Error::InvalidArg(format!("stage must be 1-3, got {stage}"))),
        }
        Ok(reports)
    }

    /// Resume mid-curriculum: finish `start_stage` from `start_step`
    /// completed steps, then run the stages after it.
    pub fn run_from(
        &mut self,
        set: &TrainSet,
        start_stage: u32,
        start_step: u64,
        log: &mut MetricsLog,
        snapshot_dir: Option<&Path>,
    ) -> Result<Vec<TrainStepReport>> {
        if !(1..=3).contains(&start_stage) {
            return Err(Error::InvalidArg(format!(
                "start stage must be 1-3, got {start_stage}"
            )));
        }
        let mut reports = Vec::new();
        for stage in start_stage..=3 {
            let from = if stage == start_stage { start_step } else { 0 };
            match stage {
                1 => self.stage1(set, from, log, snapshot_dir, &mut reports)?,
                2 => self.stage2(set, from, log, snapshot_dir, &mut reports)?,
                3 => self.stage3(set, from, log, snapshot_dir, &mut reports)?,
                _ => unreachable!(),
            }
        }
        Ok(reports)
    }

    /// Bookkeeping after each step: abort on non-finite losses, log, and
    /// snapshot on cadence and at the stage end.
    fn finish_step(
        &self,
        stage: u32,
        step: u64,
        total: u64,
        report: TrainStepReport,
        log: &mut MetricsLog,
        snapshot_dir: Option<&Path>,
        reports: &mut Vec<TrainStepReport>,
    ) -> Result<()> {
        if let Some((name, v)) =
            report.named_losses().iter().find(|(_, v)| !v.is_finite())
        {
            return Err(Error::Numeric(format!(
                "aborting: {name} became {v} at stage {stage} step {step}"
            )));
        }
        log.record(&report)?;
        reports.push(report);
        if let Some(dir) = snapshot_dir {
            let done = step + 1;
            if done == total {
                self.checkpoint(stage, done).save(&dir.join(final_checkpoint_name(stage)))?;
            } else if self.cur.snapshot_every > 0 && done % self.cur.snapshot_every == 0 {
                self.checkpoint(stage, done)
                    .save(&dir.join(partial_checkpoint_name(stage)))?;
            }
        }
        Ok(())
    }

    fn stage1(
        &mut self,
        set: &TrainSet,
        from: u64,
        log: &mut MetricsLog,
        snapshot_dir: Option<&Path>,
        reports: &mut Vec<TrainStepReport>,
    ) -> Result<()> {
        let total = self.cur.stage1_steps;
        if from >= total {
            return Ok(());
        }
        let cfg = self.step_config();
        let speech_mixer = set.mixer(rng::mix(self.cur.seed, &[purpose::BATCH, 1, 0]));
        let text_mixer = set.mixer(rng::mix(self.cur.seed, &[purpose::BATCH, 1, 1]));
        let use_text =
            self.cur.text_mlm_pretrain && set.len_of(RecordKind::TextOnly) > 0;
        for step in from..total {
            let (_, speech_items) =
                set.sample(&speech_mixer, (1.0, 1.0, 0.0), step, self.cur.batch_size)?;
            let text_items = if use_text {
                Some(set.sample(&text_mixer, (0.0, 0.0, 1.0), step, self.cur.batch_size)?.1)
            } else {
                None
            };
            let report = stage1_step(
                &mut self.store,
                &cfg,
                step,
                &speech_items,
                text_items.as_deref(),
                &self.quantizer,
            )?;
            self.finish_step(1, step, total, report, log, snapshot_dir, reports)?;
        }
        Ok(())
    }

    /// Fit the frozen feature→signal map once the speech encoder will no
    /// longer move. The fit set is every paired utterance of the first
    /// registry language that has paired data, in manifest order.
    fn ensure_vocoder_fitted(&mut self, set: &TrainSet) -> Result<()> {
        if self.store.group("vocoder")?.tensor("vocoder/fitted")?.data()[0] != 0.0 {
            return Ok(());
        }
        let paired = set.items_of(RecordKind::Paired);
        let lang = self
            .registry
            .known_languages()
            .iter()
            .find(|l| paired.iter().any(|it| &&it.lang == l))
            .cloned()
            .ok_or_else(|| Error::Data("no paired items to fit the vocoder on".into()))?;
        let mc = self.store.config.clone();
        let mut feat_rows: Vec<f64> = Vec::new();
        let mut pair_rows: Vec<f64> = Vec::new();
        let mut n = 0;
        for item in paired.iter().filter(|it| it.lang == lang) {
            let signal = item.signal.as_ref().ok_or_else(|| {
                Error::Contract(format!("paired item in {} has no signal", item.lang))
            })?;
            let z = acoustic_features(&self.store, &mc, signal)?;
            let (f, p) = collect_vocoder_pairs(signal, &z)?;
            n += f.dims2().0;
            feat_rows.extend_from_slice(f.data());
            pair_rows.extend_from_slice(p.data());
        }
        let feats = Tensor::new(vec![n, mc.d_feat], feat_rows)?;
        let pairs = Tensor::new(vec![n, 2 * mc.d_sig], pair_rows)?;
        fit_pseudo_vocoder(&mut self.store, &feats, &pairs)?;
        Ok(())
    }

    fn stage2(
        &mut self,
        set: &TrainSet,
        from: u64,
        log: &mut MetricsLog,
        snapshot_dir: Option<&Path>,
        reports: &mut Vec<TrainStepReport>,
    ) -> Result<()> {
        self.ensure_vocoder_fitted(set)?;
        let total = self.cur.stage2_steps;
        if from >= total {
            return Ok(());
        }
        let cfg = self.step_config();
        let mixer = set.mixer(rng::mix(self.cur.seed, &[purpose::BATCH, 2]));
        for step in from..total {
            let (_, items) = set.sample(&mixer, (1.0, 0.0, 0.0), step, self.cur.batch_size)?;
            let report = asr_step(&mut self.store, &cfg, step, &items, TRAIN_STAGE2)?;
            self.finish_step(2, step, total, report, log, snapshot_dir, reports)?;
        }
        Ok(())
    }

    fn stage3(
        &mut self,
        set: &TrainSet,
        from: u64,
        log: &mut MetricsLog,
        snapshot_dir: Option<&Path>,
        reports: &mut Vec<TrainStepReport>,
    ) -> Result<()> {
        self.ensure_vocoder_fitted(set)?;
        let total = self.cur.stage3_steps;
        if from >= total {
            return Ok(());
        }
        let cfg = self.step_config();
        let mixer = set.mixer(rng::mix(self.cur.seed, &[purpose::BATCH, 3]));
        let forbidden = if self.forbidden_paired_langs.is_empty() {
            None
        } else {
            Some(&self.forbidden_paired_langs)
        };
        for step in from..total {
            let (kind, items) =
                set.sample(&mixer, self.cur.kind_weights, step, self.cur.batch_size)?;
            let report = match kind {
                RecordKind::Paired => {
                    supervised_step(&mut self.store, &cfg, step, &items, forbidden)?
                }
                RecordKind::SpeechOnly => untranscribed_speech_step(
                    &mut self.store,
                    &cfg,
                    step,
                    &items,
                    self.external.as_ref(),
                )?,
                RecordKind::TextOnly => {
                    unspoken_text_step(&mut self.store, &cfg, step, &items)?
                }
            };
            self.finish_step(3, step, total, report, log, snapshot_dir, reports)?;
        }
        Ok(())
    }
}

/// Train the held-out evaluation recognizer: a fresh model (separate init
/// stream under the same seed) on recognition loss alone, acoustic path
/// end to end. Pass `resume` to continue from completed steps.
pub fn train_eval_asr(
    mc: &ModelConfig,
    weights: &LossWeights,
    cur: &CurriculumConfig,
    registry: IdRegistry,
    set: &TrainSet,
    resume: Option<(ParamStore, u64)>,
    log: &mut MetricsLog,
    snapshot_dir: Option<&Path>,
    config_echo: &str,
) -> Result<(ParamStore, Vec<TrainStepReport>)> {
    cur.validate()?;
    weights.validate()?;
    let (mut store, from) = match resume {
        Some((store, step)) => (store, step),
        None => (ParamStore::init(mc, rng::mix(cur.seed, &[EVAL_ASR_INIT_TAG]))?, 0),
    };
    let cfg = StepConfig {
        mc: store.config.clone(),
        weights: weights.clone(),
        hyper: AdamHyper { lr: cur.lr, ..AdamHyper::default() },
        seed: rng::mix(cur.seed, &[EVAL_ASR_INIT_TAG]),
        max_grad_norm: cur.max_grad_norm,
        mask_span: cur.mask_span,
        mask_ratio: cur.mask_ratio,
        sig_mask_span: cur.sig_mask_span,
        sig_mask_ratio: cur.sig_mask_ratio,
        sig_noise_std: cur.sig_noise_std,
    };
    let mixer = set.mixer(rng::mix(cur.seed, &[purpose::BATCH, 4]));
    let total = cur.eval_asr_steps;
    let mut reports = Vec::new();
    let snapshot = |store: &ParamStore, step: u64, name: &str| -> Result<()> {
        let Some(dir) = snapshot_dir else { return Ok(()) };
        Checkpoint {
            stage: 0,
            step,
            registry: registry.clone(),
            config_echo: config_echo.to_string(),
            store: store.clone(),
        }
        .save(&dir.join(name))
    };
    for step in from..total {
        let (_, items) = set.sample(&mixer, (1.0, 0.0, 0.0), step, cur.batch_size)?;
        let report = asr_step(&mut store, &cfg, step, &items, TRAIN_EVAL_ASR)?;
        if let Some((name, v)) = report.named_losses().iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "aborting: {name} became {v} at evaluation-recognizer step {step}"
            )));
        }
        log.record(&report)?;
        reports.push(report);
        let done = step + 1;
        if done == total {
            snapshot(&store, done, EVAL_ASR_CHECKPOINT)?;
        } else if cur.snapshot_every > 0 && done % cur.snapshot_every == 0 {
            snapshot(&store, done, "eval_asr.partial.ckpt")?;
        }
    }
    Ok((store, reports))
}

/// Snapshot path helper used by resume logic: the newest usable snapshot in
/// a run directory, preferring later stages and full checkpoints over
/// partials of the same stage.
pub fn latest_snapshot(dir: &Path) -> Option<(PathBuf, u32, bool)> {
    let mut best: Option<(PathBuf, u32, bool)> = None;
    for stage in 1..=3u32 {
        for (name, is_final) in [
            (final_checkpoint_name(stage), true),
            (partial_checkpoint_name(stage), false),
        ] {
            let p = dir.join(&name);
            if p.exists() {
                let better = match &best {
                    None => true,
                    Some((_, s, f)) => stage > *s || (stage == *s && is_final && !*f),
                };
                if better {
                    best = Some((p, stage, is_final));
                }
            }
        }
    }
    best
}

// ── tests ───────────────────────────────────────────────────────────────
