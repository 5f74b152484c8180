//! The five commands: corpus generation, curriculum training, synthesis,
//! evaluation, and the ablation grid. Every artifact lands under the run
//! directory named by the config.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use polyvox_core::config::RunConfig;
use polyvox_core::corpus::files::{read_manifest, write_signal};
use polyvox_core::corpus::{
    generate_corpus, train_manifest_name, Condition, CorpusMeta, LanguageGroup, RecordKind,
    EVAL_ASR_MANIFEST, META_FILE, TEST_MANIFEST,
};
use polyvox_core::eval::{
    cer_diff_histogram, eval_condition, run_ablation, synthesize, write_report, AblationConfig,
    DEFAULT_CER_THRESHOLDS,
};
use polyvox_core::model::Checkpoint;
use polyvox_core::rng::{purpose, rng_for};
use polyvox_core::textproc::IdRegistry;
use polyvox_core::training::{
    final_checkpoint_name, latest_snapshot, partial_checkpoint_name, registry_from_meta,
    train_eval_asr, MetricsLog, Trainer, TrainSet, EVAL_ASR_CHECKPOINT,
};
use polyvox_core::{Error, Result};

use crate::lock::RunLock;

/// Environment variable that re-roots relative run directories.
pub const RUN_ROOT_ENV: &str = "POLYVOX_RUN_ROOT";

const CONFIG_ECHO: &str = "config.echo.ini";
const CORPUS_SUBDIR: &str = "corpus";

/// Load the config and resolve the run directory against the environment
/// override.
pub fn load_run(config_path: &Path) -> Result<(RunConfig, PathBuf)> {
    let cfg = RunConfig::load(config_path)?;
    let root = std::env::var(RUN_ROOT_ENV).ok();
    let run_dir = cfg.resolved_run_dir(root.as_deref());
    Ok((cfg, run_dir))
}

fn lock_run(run_dir: &Path) -> Result<RunLock> {
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    RunLock::acquire(run_dir)
}

fn corpus_dir(run_dir: &Path) -> PathBuf {
    run_dir.join(CORPUS_SUBDIR)
}

/// The corpus metadata, or an actionable error when none was generated yet.
fn require_corpus(run_dir: &Path) -> Result<(PathBuf, CorpusMeta)> {
    let dir = corpus_dir(run_dir);
    let meta_path = dir.join(META_FILE);
    if !meta_path.exists() {
        return Err(Error::Contract(format!(
            "no corpus found under {}; run `polyvox gen-corpus --config <file>` first",
            dir.display()
        )));
    }
    let meta = CorpusMeta::load(&meta_path)?;
    Ok((dir, meta))
}

/// Training must run against the corpus the config describes; a drifted
/// [corpus] section silently trains on the wrong data otherwise.
fn check_corpus_matches(cfg: &RunConfig, meta: &CorpusMeta) -> Result<()> {
    if meta.config != cfg.corpus {
        return Err(Error::Contract(
            "the [corpus] section no longer matches the generated corpus; \
             regenerate with --force or revert the config"
                .into(),
        ));
    }
    Ok(())
}

fn group_b_names(meta: &CorpusMeta) -> BTreeSet<String> {
    meta.specs
        .iter()
        .filter(|s| s.group == LanguageGroup::B)
        .map(|s| s.name.clone())
        .collect()
}

fn echo_config(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let path = run_dir.join(CONFIG_ECHO);
    std::fs::write(&path, cfg.to_text()).map_err(|e| Error::io(&path, e))
}

// ── gen-corpus ──────────────────────────────────────────────────────────

pub fn cmd_gen_corpus(config_path: &Path, force: bool) -> Result<i32> {
    let (cfg, run_dir) = load_run(config_path)?;
    let _lock = lock_run(&run_dir)?;
    let dir = corpus_dir(&run_dir);

    let occupied = dir.join(META_FILE).exists();
    if occupied && !force {
        return Err(Error::Contract(format!(
            "a corpus already exists at {}; pass --force to regenerate it",
            dir.display()
        )));
    }
    if occupied {
        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    generate_corpus(&cfg.corpus, &dir)?;
    echo_config(&cfg, &run_dir)?;

    let meta = CorpusMeta::load(&dir.join(META_FILE))?;
    let n_a = meta.specs.iter().filter(|s| s.group == LanguageGroup::A).count();
    let n_b = meta.specs.len() - n_a;
    println!("corpus written to {}", dir.display());
    println!("languages: {n_a} full-resource (group A), {n_b} withheld (group B)");
    for condition in [Condition::Zero, Condition::FifteenMinutes, Condition::Supervised] {
        let records = read_manifest(&dir.join(train_manifest_name(condition)))?;
        let count = |k: RecordKind| records.iter().filter(|r| r.kind == k).count();
        println!(
            "train records ({}): paired {}, speech-only {}, text-only {}",
            condition.as_str(),
            count(RecordKind::Paired),
            count(RecordKind::SpeechOnly),
            count(RecordKind::TextOnly),
        );
    }
    let n_test = read_manifest(&dir.join(TEST_MANIFEST))?.len();
    let n_asr = read_manifest(&dir.join(EVAL_ASR_MANIFEST))?.len();
    println!("test records: {n_test}; recognizer-training records: {n_asr}");
    Ok(0)
}

// ── train ───────────────────────────────────────────────────────────────

pub enum TrainMode {
    Stage(u32),
    All,
    EvalAsr,
}

/// Build a trainer for this run's condition, with the zero-condition
/// paired-language guard installed.
fn build_trainer(
    cfg: &RunConfig,
    meta: &CorpusMeta,
    registry: &IdRegistry,
    resume: Option<Checkpoint>,
) -> Result<Trainer> {
    let mut trainer = match resume {
        Some(ckpt) => Trainer::from_checkpoint(ckpt, cfg.weights, cfg.curriculum.clone())?,
        None => {
            let mc = cfg.model_config(meta, registry);
            Trainer::new(&mc, cfg.weights, cfg.curriculum.clone(), registry.clone())?
                .with_config_echo(cfg.to_text())
        }
    };
    if cfg.condition == Condition::Zero {
        trainer = trainer.with_forbidden_paired_langs(group_b_names(meta));
    }
    Ok(trainer)
}

pub fn cmd_train(config_path: &Path, mode: TrainMode) -> Result<i32> {
    let (cfg, run_dir) = load_run(config_path)?;
    let _lock = lock_run(&run_dir)?;
    let (dir, meta) = require_corpus(&run_dir)?;
    check_corpus_matches(&cfg, &meta)?;
    echo_config(&cfg, &run_dir)?;
    let registry = registry_from_meta(&meta);

    if let TrainMode::EvalAsr = mode {
        return train_recognizer(&cfg, &run_dir, &dir, &meta, &registry);
    }

    let records = read_manifest(&dir.join(train_manifest_name(cfg.condition)))?;
    let set = TrainSet::load(records, &dir, &registry)?;

    match mode {
        TrainMode::All => {
            match latest_snapshot(&run_dir) {
                Some((_, 3, true)) => {
                    println!("all three stage checkpoints already present; nothing to train");
                }
                Some((path, stage, is_final)) => {
                    let ckpt = Checkpoint::load(&path)?;
                    let (from_stage, from_step) =
                        if is_final { (stage + 1, 0) } else { (stage, ckpt.step) };
                    println!(
                        "resuming from {} (stage {stage}, step {})",
                        path.display(),
                        ckpt.step
                    );
                    let mut trainer = build_trainer(&cfg, &meta, &registry, Some(ckpt))?;
                    let mut log = MetricsLog::to_file(&run_dir.join("metrics_all.tsv"))?;
                    trainer.run_from(&set, from_stage, from_step, &mut log, Some(&run_dir))?;
                }
                None => {
                    let mut trainer = build_trainer(&cfg, &meta, &registry, None)?;
                    let mut log = MetricsLog::to_file(&run_dir.join("metrics_all.tsv"))?;
                    trainer.run(&set, &mut log, Some(&run_dir))?;
                }
            }
            for stage in 1..=3 {
                println!(
                    "stage {stage} checkpoint: {}",
                    run_dir.join(final_checkpoint_name(stage)).display()
                );
            }
            if !run_dir.join(EVAL_ASR_CHECKPOINT).exists() {
                train_recognizer(&cfg, &run_dir, &dir, &meta, &registry)?;
            }
            Ok(0)
        }
        TrainMode::Stage(stage) => {
            let final_path = run_dir.join(final_checkpoint_name(stage));
            if final_path.exists() {
                println!(
                    "stage {stage} checkpoint already present at {}; nothing to do",
                    final_path.display()
                );
                return Ok(0);
            }
            let partial_path = run_dir.join(partial_checkpoint_name(stage));
            let (resume, from) = if partial_path.exists() {
                let ckpt = Checkpoint::load(&partial_path)?;
                println!("resuming stage {stage} from step {}", ckpt.step);
                let step = ckpt.step;
                (Some(ckpt), step)
            } else if stage == 1 {
                (None, 0)
            } else {
                let prev = run_dir.join(final_checkpoint_name(stage - 1));
                if !prev.exists() {
                    return Err(Error::Contract(format!(
                        "stage {stage} needs the stage {} checkpoint; run \
                         `polyvox train --config <file> --stage {}` first",
                        stage - 1,
                        stage - 1
                    )));
                }
                (Some(Checkpoint::load(&prev)?), 0)
            };
            let mut trainer = build_trainer(&cfg, &meta, &registry, resume)?;
            let mut log =
                MetricsLog::to_file(&run_dir.join(format!("metrics_stage{stage}.tsv")))?;
            trainer.run_stage(&set, stage, from, &mut log, Some(&run_dir))?;
            println!("stage {stage} checkpoint: {}", final_path.display());
            Ok(0)
        }
        TrainMode::EvalAsr => unreachable!("handled above"),
    }
}

/// The scoring recognizer, trained on its own held-out manifest.
fn train_recognizer(
    cfg: &RunConfig,
    run_dir: &Path,
    dir: &Path,
    meta: &CorpusMeta,
    registry: &IdRegistry,
) -> Result<i32> {
    let final_path = run_dir.join(EVAL_ASR_CHECKPOINT);
    if final_path.exists() {
        println!(
            "evaluation recognizer already present at {}; nothing to do",
            final_path.display()
        );
        return Ok(0);
    }
    let records = read_manifest(&dir.join(EVAL_ASR_MANIFEST))?;
    let set = TrainSet::load(records, dir, registry)?;
    let partial = run_dir.join("eval_asr.partial.ckpt");
    let resume = if partial.exists() {
        let ckpt = Checkpoint::load(&partial)?;
        println!("resuming evaluation recognizer from step {}", ckpt.step);
        Some((ckpt.store, ckpt.step))
    } else {
        None
    };
    let mc = cfg.model_config(meta, registry);
    let mut log = MetricsLog::to_file(&run_dir.join("metrics_eval_asr.tsv"))?;
    train_eval_asr(
        &mc,
        &cfg.weights,
        &cfg.curriculum,
        registry.clone(),
        &set,
        resume,
        &mut log,
        Some(run_dir),
        &cfg.to_text(),
    )?;
    println!("evaluation recognizer checkpoint: {}", final_path.display());
    Ok(0)
}

// ── synth ───────────────────────────────────────────────────────────────

pub struct SynthArgs {
    pub text: String,
    pub lang: String,
    pub spk: Option<String>,
    pub guidance: f64,
    pub out: PathBuf,
}

pub fn cmd_synth(config_path: &Path, args: &SynthArgs) -> Result<i32> {
    let (cfg, run_dir) = load_run(config_path)?;
    let _lock = lock_run(&run_dir)?;
    let ckpt_path = run_dir.join(final_checkpoint_name(3));
    if !ckpt_path.exists() {
        return Err(Error::Contract(format!(
            "no stage-3 checkpoint at {}; run `polyvox train --config <file> --all` first",
            ckpt_path.display()
        )));
    }
    let ckpt = Checkpoint::load(&ckpt_path)?;

    // A stream of its own, disjoint from the per-item evaluation streams
    // (whose extra tags are small indices).
    let mut rng = rng_for(cfg.seed, &[purpose::EVAL, u64::MAX]);
    let spk_name = args.spk.as_deref().unwrap_or("");
    let synth = synthesize(
        &ckpt.store,
        &ckpt.registry,
        &args.text,
        &args.lang,
        spk_name,
        args.guidance,
        &mut rng,
    )?;
    if synth.oov_lang() {
        eprintln!(
            "warning: language {:?} is not in the registry; using the out-of-vocabulary embedding",
            args.lang
        );
    }
    if args.spk.is_some() && synth.oov_spk() {
        eprintln!(
            "warning: speaker {:?} is not in the registry; using the out-of-vocabulary embedding",
            spk_name
        );
    }

    let out = if args.out.is_relative() { run_dir.join(&args.out) } else { args.out.clone() };
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_signal(&out, &synth.signal)?;

    let durs: Vec<String> = synth.durations.iter().map(|d| d.to_string()).collect();
    println!("durations: {}", durs.join(" "));
    println!(
        "feature frames: {}, signal samples: {}",
        synth.features.dims2().0,
        synth.signal.dims2().0
    );
    println!("wrote {}", out.display());
    Ok(0)
}

// ── eval ────────────────────────────────────────────────────────────────

pub fn cmd_eval(config_path: &Path) -> Result<i32> {
    let (cfg, run_dir) = load_run(config_path)?;
    let _lock = lock_run(&run_dir)?;
    let (dir, _meta) = require_corpus(&run_dir)?;

    let tts_path = run_dir.join(final_checkpoint_name(3));
    if !tts_path.exists() {
        return Err(Error::Contract(format!(
            "no stage-3 checkpoint at {}; run `polyvox train --config <file> --all` first",
            tts_path.display()
        )));
    }
    let asr_path = run_dir.join(EVAL_ASR_CHECKPOINT);
    if !asr_path.exists() {
        return Err(Error::Contract(format!(
            "no evaluation recognizer at {}; run `polyvox train --config <file> --eval-asr` first",
            asr_path.display()
        )));
    }
    let tts = Checkpoint::load(&tts_path)?;
    let asr = Checkpoint::load(&asr_path)?;

    let report = eval_condition(&tts, &asr, &dir, cfg.condition, cfg.seed, cfg.eval.guidance_w)?;
    let hist = cer_diff_histogram(&report, &DEFAULT_CER_THRESHOLDS)?;
    let tsv = run_dir.join("eval_report.tsv");
    let md = run_dir.join("eval_report.md");
    write_report(&report, &hist, &tsv, &md)?;

    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!("condition: {}, guidance: {}", cfg.condition.as_str(), cfg.eval.guidance_w);
    println!("mean groundtruth CER: {}", show(report.mean_cer_gt(None)));
    println!(
        "mean synthesized CER: group A {}, group B {}, all {}",
        show(report.mean_cer_synth(Some(LanguageGroup::A))),
        show(report.mean_cer_synth(Some(LanguageGroup::B))),
        show(report.mean_cer_synth(None)),
    );
    println!(
        "mean CER-diff: group A {}, group B {}",
        show(report.mean_cer_diff(Some(LanguageGroup::A))),
        show(report.mean_cer_diff(Some(LanguageGroup::B))),
    );
    for (t, n) in hist.thresholds.iter().zip(&hist.at_or_below) {
        println!("CER-diff <= {t}: {n}/{} languages", hist.total());
    }
    println!("reports: {}, {}", tsv.display(), md.display());
    Ok(0)
}

// ── ablate ──────────────────────────────────────────────────────────────

pub fn cmd_ablate(config_path: &Path, rows_override: Option<Vec<u32>>) -> Result<i32> {
    let (cfg, run_dir) = load_run(config_path)?;
    let _lock = lock_run(&run_dir)?;
    let (dir, meta) = require_corpus(&run_dir)?;
    check_corpus_matches(&cfg, &meta)?;
    let registry = registry_from_meta(&meta);

    let acfg = AblationConfig {
        mc: cfg.model_config(&meta, &registry),
        weights: cfg.weights,
        cur: cfg.curriculum.clone(),
        guidance_w: cfg.eval.guidance_w,
        rows: rows_override.unwrap_or_else(|| cfg.eval.rows.clone()),
        conditions: vec![Condition::Zero, Condition::FifteenMinutes],
    };
    let out_dir = run_dir.join("ablation");
    let grid = run_ablation(&dir, &out_dir, &acfg)?;

    print!("{}", polyvox_core::eval::grid_markdown(&grid));
    println!("\ngrid files: {}, {}", out_dir.join("grid.tsv").display(), out_dir.join("grid.md").display());
    if grid.checks.any_failed() {
        eprintln!("error: a directional check failed");
        return Ok(4);
    }
    Ok(0)
}
