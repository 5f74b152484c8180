//! Ablation grid runner: trains the curriculum under cumulative
//! unsupervised-injection configurations across data conditions, scores
//! every cell with the shared evaluation recognizer, and checks the
//! expected directional orderings on withheld-language CER.

use std::collections::BTreeMap;
use std::path::Path;

use crate::corpus::files::read_manifest;
use crate::corpus::{
    train_manifest_name, Condition, CorpusMeta, LanguageGroup, EVAL_ASR_MANIFEST, META_FILE,
};
use crate::eval::report::{
    cer_diff_histogram, eval_condition, write_report, DEFAULT_CER_THRESHOLDS,
};
use crate::losses::LossWeights;
use crate::model::{Checkpoint, ModelConfig};
use crate::textproc::IdRegistry;
use crate::training::{
    registry_from_meta, train_eval_asr, CurriculumConfig, MetricsLog, Trainer, TrainSet,
};
use crate::{Error, Result};

/// Which unsupervised ingredients a grid row enables. Rows are cumulative:
/// each keeps everything the previous row had.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationFlags {
    /// Masked-token text updates during stage-1 pretraining.
    pub text_mlm_pretrain: bool,
    /// Stage-3 steps on unspoken text (masked text through the TTS path).
    pub aligned_text_mlm: bool,
    /// Stage-3 steps on untranscribed speech (self-labeled supervision).
    pub pseudo_labeling: bool,
}

/// The cumulative flag scheme: (1) nothing, (2) text MLM pretraining,
/// (3) adds aligned text MLM, (4) adds pseudo-labeling.
pub fn row_flags(row: u32) -> Result<AblationFlags> {
    if !(1..=4).contains(&row) {
        return Err(Error::InvalidArg(format!("grid rows are 1-4, got {row}")));
    }
    Ok(AblationFlags {
        text_mlm_pretrain: row >= 2,
        aligned_text_mlm: row >= 3,
        pseudo_labeling: row >= 4,
    })
}

/// Human-readable row label, mirroring the cumulative scheme.
pub fn row_label(row: u32) -> &'static str {
    match row {
        1 => "(1) supervised only",
        2 => "(2) + text MLM pretraining",
        3 => "(3) + aligned text MLM",
        4 => "(4) + pseudo-labeling",
        _ => "(?)",
    }
}

/// Scores of one finished cell.
#[derive(Debug, Clone)]
pub struct CellMetrics {
    /// Mean synthesized CER over withheld-group languages — the headline
    /// number the directional checks compare.
    pub group_b_cer_synth: f64,
    pub group_b_cer_diff: f64,
    pub group_a_cer_synth: f64,
    /// Mean groundtruth CER over all languages (recognizer sanity floor).
    pub mean_cer_gt: f64,
    /// Content id of the trained snapshot behind the numbers.
    pub tts_id: String,
}

/// A cell either finished with metrics or failed with a reason; failures
/// leave the rest of the grid intact.
#[derive(Debug, Clone)]
pub enum CellOutcome {
    Done(CellMetrics),
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct AblationCell {
    pub row: u32,
    pub flags: AblationFlags,
    pub condition: Condition,
    pub outcome: CellOutcome,
}

/// The three expected orderings. A check is None when the cells it needs
/// were not requested or did not finish.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DirectionalChecks {
    /// Zero condition: full injection beats supervised-only.
    pub zero_row4_beats_row1: Option<bool>,
    /// 15m condition: full injection beats supervised-only.
    pub m15_row4_beats_row1: Option<bool>,
    /// Full injection: a little paired data beats none.
    pub m15_row4_beats_zero_row4: Option<bool>,
}

impl DirectionalChecks {
    /// True when every check ran and held.
    pub fn all_passed(&self) -> bool {
        [
            self.zero_row4_beats_row1,
            self.m15_row4_beats_row1,
            self.m15_row4_beats_zero_row4,
        ]
        .iter()
        .all(|c| *c == Some(true))
    }

    /// True when any check ran and failed.
    pub fn any_failed(&self) -> bool {
        [
            self.zero_row4_beats_row1,
            self.m15_row4_beats_row1,
            self.m15_row4_beats_zero_row4,
        ]
        .iter()
        .any(|c| *c == Some(false))
    }
}

/// The finished grid: every requested (row, condition) cell plus the
/// directional check results.
#[derive(Debug, Clone)]
pub struct AblationGrid {
    pub seed: u64,
    pub rows: Vec<u32>,
    pub conditions: Vec<Condition>,
    pub cells: Vec<AblationCell>,
    pub checks: DirectionalChecks,
}

impl AblationGrid {
    pub fn cell(&self, row: u32, condition: Condition) -> Option<&AblationCell> {
        self.cells
            .iter()
            .find(|c| c.row == row && c.condition == condition)
    }

    /// The headline metric of a finished cell.
    pub fn group_b_cer(&self, row: u32, condition: Condition) -> Option<f64> {
        match &self.cell(row, condition)?.outcome {
            CellOutcome::Done(m) => Some(m.group_b_cer_synth),
            CellOutcome::Failed(_) => None,
        }
    }
}

/// Compute the directional checks from whatever cells finished.
pub fn directional_checks(grid_cells: &[AblationCell]) -> DirectionalChecks {
    let get = |row: u32, cond: Condition| -> Option<f64> {
        grid_cells
            .iter()
            .find(|c| c.row == row && c.condition == cond)
            .and_then(|c| match &c.outcome {
                CellOutcome::Done(m) => Some(m.group_b_cer_synth),
                CellOutcome::Failed(_) => None,
            })
    };
    let lt = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(x), Some(y)) => Some(x < y),
        _ => None,
    };
    let zero = Condition::Zero;
    let m15 = Condition::FifteenMinutes;
    DirectionalChecks {
        zero_row4_beats_row1: lt(get(4, zero), get(1, zero)),
        m15_row4_beats_row1: lt(get(4, m15), get(1, m15)),
        m15_row4_beats_zero_row4: lt(get(4, m15), get(4, zero)),
    }
}

/// Everything `run_ablation` needs besides the corpus: the architecture,
/// loss weighting, base curriculum (per-row fields are overridden), which
/// rows and conditions to run, and the synthesis guidance weight.
#[derive(Debug, Clone)]
pub struct AblationConfig {
    pub mc: ModelConfig,
    pub weights: LossWeights,
    pub cur: CurriculumConfig,
    pub guidance_w: f64,
    pub rows: Vec<u32>,
    pub conditions: Vec<Condition>,
}

fn stage3_curriculum(base: &CurriculumConfig, flags: AblationFlags) -> CurriculumConfig {
    CurriculumConfig {
        text_mlm_pretrain: flags.text_mlm_pretrain,
        kind_weights: (
            1.0,
            if flags.pseudo_labeling { 1.0 } else { 0.0 },
            if flags.aligned_text_mlm { 1.0 } else { 0.0 },
        ),
        ..base.clone()
    }
}

/// Train and score the requested grid. Per-cell failures are recorded in
/// the grid rather than aborting it; only setup problems (corpus, evaluation
/// recognizer) are hard errors. Artifacts land under `out_dir`: checkpoints,
/// per-cell reports, metrics logs, and the grid files.
pub fn run_ablation(corpus_dir: &Path, out_dir: &Path, cfg: &AblationConfig) -> Result<AblationGrid> {
    if cfg.rows.is_empty() || cfg.conditions.is_empty() {
        return Err(Error::InvalidArg("need at least one row and one condition".into()));
    }
    let mut rows = cfg.rows.clone();
    rows.sort_unstable();
    rows.dedup();
    for &r in &rows {
        row_flags(r)?;
    }
    let mut conditions = Vec::new();
    for &c in &cfg.conditions {
        if c == Condition::Supervised {
            return Err(Error::InvalidArg(
                "the grid compares zero and 15m conditions; the supervised condition has no row structure".into(),
            ));
        }
        if !conditions.contains(&c) {
            conditions.push(c);
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let meta = CorpusMeta::load(&corpus_dir.join(META_FILE))?;
    let registry = registry_from_meta(&meta);
    let group_b: std::collections::BTreeSet<String> = meta
        .specs
        .iter()
        .filter(|s| s.group == LanguageGroup::B)
        .map(|s| s.name.clone())
        .collect();

    // One recognizer scores every cell; it never depends on the condition.
    let asr_records = read_manifest(&corpus_dir.join(EVAL_ASR_MANIFEST))?;
    let asr_set = TrainSet::load(asr_records, corpus_dir, &registry)?;
    let mut asr_log = MetricsLog::to_file(&out_dir.join("eval_asr.metrics.tsv"))?;
    let (asr_store, _) = train_eval_asr(
        &cfg.mc,
        &cfg.weights,
        &cfg.cur,
        registry.clone(),
        &asr_set,
        None,
        &mut asr_log,
        Some(out_dir),
        "grid evaluation recognizer",
    )?;
    let asr = Checkpoint {
        stage: 0,
        step: cfg.cur.eval_asr_steps,
        registry: registry.clone(),
        config_echo: "grid evaluation recognizer".into(),
        store: asr_store,
    };

    let mut cells = Vec::new();
    for &condition in &conditions {
        let cond_cells = run_condition(
            corpus_dir,
            out_dir,
            cfg,
            &rows,
            condition,
            &registry,
            &group_b,
            &asr,
        );
        match cond_cells {
            Ok(mut cs) => cells.append(&mut cs),
            Err(e) => {
                // The condition's training data could not even be loaded:
                // mark every requested cell rather than aborting the grid.
                for &row in &rows {
                    cells.push(AblationCell {
                        row,
                        flags: row_flags(row)?,
                        condition,
                        outcome: CellOutcome::Failed(e.to_string()),
                    });
                }
            }
        }
    }

    let checks = directional_checks(&cells);
    let grid = AblationGrid { seed: cfg.cur.seed, rows, conditions, cells, checks };
    std::fs::write(out_dir.join("grid.tsv"), grid_lines(&grid))
        .map_err(|e| Error::io(out_dir, e))?;
    std::fs::write(out_dir.join("grid.md"), grid_markdown(&grid))
        .map_err(|e| Error::io(out_dir, e))?;
    Ok(grid)
}

/// All requested rows of one condition, sharing the stage-1/2 chain per
/// pretraining flag.
#[allow(clippy::too_many_arguments)]
fn run_condition(
    corpus_dir: &Path,
    out_dir: &Path,
    cfg: &AblationConfig,
    rows: &[u32],
    condition: Condition,
    registry: &IdRegistry,
    group_b: &std::collections::BTreeSet<String>,
    asr: &Checkpoint,
) -> Result<Vec<AblationCell>> {
    let records = read_manifest(&corpus_dir.join(train_manifest_name(condition)))?;
    let set = TrainSet::load(records, corpus_dir, registry)?;
    let forbidden = if condition == Condition::Zero { Some(group_b) } else { None };
    let cond_name = condition.as_str();

    // Stage-1/2 chains per pretraining flag: rows with the same flag share
    // everything up to the joint stage.
    let mut chains: BTreeMap<bool, std::result::Result<Checkpoint, String>> = BTreeMap::new();
    for &row in rows {
        let mlm = row_flags(row)?.text_mlm_pretrain;
        if chains.contains_key(&mlm) {
            continue;
        }
        let outcome = (|| -> Result<Checkpoint> {
            let cur = CurriculumConfig {
                text_mlm_pretrain: mlm,
                ..cfg.cur.clone()
            };
            let mut trainer = Trainer::new(&cfg.mc, cfg.weights.clone(), cur, registry.clone())?
                .with_config_echo(format!("grid chain, condition {cond_name}, text mlm {mlm}"));
            if let Some(f) = forbidden {
                trainer = trainer.with_forbidden_paired_langs(f.clone());
            }
            let mut log = MetricsLog::to_file(
                &out_dir.join(format!("chain_{cond_name}_mlm{}.metrics.tsv", u8::from(mlm))),
            )?;
            trainer.run_stage(&set, 1, 0, &mut log, None)?;
            trainer.run_stage(&set, 2, 0, &mut log, None)?;
            let ckpt = trainer.checkpoint(2, cfg.cur.stage2_steps);
            ckpt.save(&out_dir.join(format!("chain_{cond_name}_mlm{}.ckpt", u8::from(mlm))))?;
            Ok(ckpt)
        })();
        chains.insert(mlm, outcome.map_err(|e| e.to_string()));
    }

    let mut cells = Vec::new();
    for &row in rows {
        let flags = row_flags(row)?;
        let chain = &chains[&flags.text_mlm_pretrain];
        let outcome = match chain {
            Err(e) => CellOutcome::Failed(format!("stage-1/2 chain failed: {e}")),
            Ok(ckpt2) => {
                match run_cell(corpus_dir, out_dir, cfg, &set, row, flags, condition, forbidden, ckpt2, asr)
                {
                    Ok(m) => CellOutcome::Done(m),
                    Err(e) => CellOutcome::Failed(e.to_string()),
                }
            }
        };
        cells.push(AblationCell { row, flags, condition, outcome });
    }
    Ok(cells)
}

/// Stage 3 plus evaluation for one cell.
#[allow(clippy::too_many_arguments)]
fn run_cell(
    corpus_dir: &Path,
    out_dir: &Path,
    cfg: &AblationConfig,
    set: &TrainSet,
    row: u32,
    flags: AblationFlags,
    condition: Condition,
    forbidden: Option<&std::collections::BTreeSet<String>>,
    ckpt2: &Checkpoint,
    asr: &Checkpoint,
) -> Result<CellMetrics> {
    let cond_name = condition.as_str();
    let cur = stage3_curriculum(&cfg.cur, flags);
    let mut trainer = Trainer::from_checkpoint(ckpt2.clone(), cfg.weights.clone(), cur)?
        .with_config_echo(format!("grid row {row}, condition {cond_name}"));
    if let Some(f) = forbidden {
        trainer = trainer.with_forbidden_paired_langs(f.clone());
    }
    let mut log =
        MetricsLog::to_file(&out_dir.join(format!("row{row}_{cond_name}.metrics.tsv")))?;
    trainer.run_stage(set, 3, 0, &mut log, None)?;
    let ckpt3 = trainer.checkpoint(3, cfg.cur.stage3_steps);
    ckpt3.save(&out_dir.join(format!("row{row}_{cond_name}.ckpt")))?;

    let report = eval_condition(&ckpt3, asr, corpus_dir, condition, cfg.cur.seed, cfg.guidance_w)?;
    let hist = cer_diff_histogram(&report, &DEFAULT_CER_THRESHOLDS)?;
    write_report(
        &report,
        &hist,
        &out_dir.join(format!("row{row}_{cond_name}.tsv")),
        &out_dir.join(format!("row{row}_{cond_name}.md")),
    )?;

    let need = |v: Option<f64>, what: &str| {
        v.ok_or_else(|| Error::Data(format!("report has no {what} languages")))
    };
    Ok(CellMetrics {
        group_b_cer_synth: need(report.mean_cer_synth(Some(LanguageGroup::B)), "withheld-group")?,
        group_b_cer_diff: need(report.mean_cer_diff(Some(LanguageGroup::B)), "withheld-group")?,
        group_a_cer_synth: need(report.mean_cer_synth(Some(LanguageGroup::A)), "full-resource")?,
        mean_cer_gt: need(report.mean_cer_gt(None), "any")?,
        tts_id: ckpt3.id(),
    })
}

fn fmt_check(c: Option<bool>) -> &'static str {
    match c {
        Some(true) => "pass",
        Some(false) => "FAIL",
        None => "not run",
    }
}

/// Machine-readable grid: one `row<TAB>condition<TAB>status<TAB>metrics`
/// line per cell, then the check lines.
pub fn grid_lines(grid: &AblationGrid) -> String {
    let mut out = String::new();
    for c in &grid.cells {
        match &c.outcome {
            CellOutcome::Done(m) => out.push_str(&format!(
                "{}\t{}\tdone\t{}\t{}\t{}\n",
                c.row, c.condition.as_str(), m.group_b_cer_synth, m.group_b_cer_diff, m.mean_cer_gt
            )),
            CellOutcome::Failed(e) => out.push_str(&format!(
                "{}\t{}\tfailed\t{}\n",
                c.row,
                c.condition.as_str(),
                e.replace(['\t', '\n'], " ")
            )),
        }
    }
    out.push_str(&format!(
        "check\tzero_row4_beats_row1\t{}\n",
        fmt_check(grid.checks.zero_row4_beats_row1)
    ));
    out.push_str(&format!(
        "check\t15m_row4_beats_row1\t{}\n",
        fmt_check(grid.checks.m15_row4_beats_row1)
    ));
    out.push_str(&format!(
        "check\t15m_row4_beats_zero_row4\t{}\n",
        fmt_check(grid.checks.m15_row4_beats_zero_row4)
    ));
    out
}

/// Human-readable grid: configuration rows against condition columns, the
/// cells holding withheld-group synthesized CER.
pub fn grid_markdown(grid: &AblationGrid) -> String {
    let mut md = String::new();
    md.push_str("# Unsupervised-injection grid\n\n");
    md.push_str(&format!("- seed: {}\n", grid.seed));
    md.push_str("- cells: mean synthesized CER over withheld-group languages (CER-diff in parentheses)\n\n");

    md.push_str("| configuration |");
    for c in &grid.conditions {
        md.push_str(&format!(" {} |", c.as_str()));
    }
    md.push_str("\n|---|");
    for _ in &grid.conditions {
        md.push_str("---|");
    }
    md.push('\n');
    for &row in &grid.rows {
        md.push_str(&format!("| {} |", row_label(row)));
        for &cond in &grid.conditions {
            match grid.cell(row, cond).map(|c| &c.outcome) {
                Some(CellOutcome::Done(m)) => md.push_str(&format!(
                    " {:.4} ({:+.4}) |",
                    m.group_b_cer_synth, m.group_b_cer_diff
                )),
                Some(CellOutcome::Failed(_)) => md.push_str(" failed |"),
                None => md.push_str(" — |"),
            }
        }
        md.push('\n');
    }

    md.push_str("\n**Directional checks**\n\n");
    md.push_str(&format!(
        "- zero condition, full injection beats supervised-only: {}\n",
        fmt_check(grid.checks.zero_row4_beats_row1)
    ));
    md.push_str(&format!(
        "- 15m condition, full injection beats supervised-only: {}\n",
        fmt_check(grid.checks.m15_row4_beats_row1)
    ));
    md.push_str(&format!(
        "- full injection, 15m beats zero: {}\n",
        fmt_check(grid.checks.m15_row4_beats_zero_row4)
    ));

    let failed: Vec<&AblationCell> = grid
        .cells
        .iter()
        .filter(|c| matches!(c.outcome, CellOutcome::Failed(_)))
        .collect();
    if !failed.is_empty() {
        md.push_str("\n**Failures**\n\n");
        for c in failed {
            if let CellOutcome::Failed(e) = &c.outcome {
                md.push_str(&format!("- row {} / {}: {}\n", c.row, c.condition.as_str(), e));
            }
        }
    }
    md
}

// ── tests ───────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};

    #[test]
    fn rows_accumulate_their_flags() {
        assert_eq!(
            row_flags(1).unwrap(),
            AblationFlags { text_mlm_pretrain: false, aligned_text_mlm: false, pseudo_labeling: false }
        );
        assert_eq!(
            row_flags(2).unwrap(),
            AblationFlags { text_mlm_pretrain: true, aligned_text_mlm: false, pseudo_labeling: false }
        );
        assert_eq!(
            row_flags(3).unwrap(),
            AblationFlags { text_mlm_pretrain: true, aligned_text_mlm: true, pseudo_labeling: false }
        );
        assert_eq!(
            row_flags(4).unwrap(),
            AblationFlags { text_mlm_pretrain: true, aligned_text_mlm: true, pseudo_labeling: true }
        );
        assert!(row_flags(0).is_err());
        assert!(row_flags(5).is_err());
    }

    fn done_cell(row: u32, condition: Condition, cer: f64) -> AblationCell {
        AblationCell {
            row,
            flags: row_flags(row).unwrap(),
            condition,
            outcome: CellOutcome::Done(CellMetrics {
                group_b_cer_synth: cer,
                group_b_cer_diff: cer - 0.05,
                group_a_cer_synth: 0.1,
                mean_cer_gt: 0.05,
                tts_id: "cafe".into(),
            }),
        }
    }

    #[test]
    fn directional_checks_read_only_finished_cells() {
        use Condition::{FifteenMinutes as M15, Zero};
        let cells = vec![
            done_cell(1, Zero, 0.9),
            done_cell(4, Zero, 0.5),
            done_cell(1, M15, 0.4),
            done_cell(4, M15, 0.2),
        ];
        let checks = directional_checks(&cells);
        assert_eq!(checks.zero_row4_beats_row1, Some(true));
        assert_eq!(checks.m15_row4_beats_row1, Some(true));
        assert_eq!(checks.m15_row4_beats_zero_row4, Some(true));
        assert!(checks.all_passed());
        assert!(!checks.any_failed());

        // A failed cell withdraws its checks instead of failing them.
        let mut with_failure = cells.clone();
        with_failure[1] = AblationCell {
            row: 4,
            flags: row_flags(4).unwrap(),
            condition: Zero,
            outcome: CellOutcome::Failed("boom".into()),
        };
        let checks = directional_checks(&with_failure);
        assert_eq!(checks.zero_row4_beats_row1, None);
        assert_eq!(checks.m15_row4_beats_zero_row4, None);
        assert_eq!(checks.m15_row4_beats_row1, Some(true));
        assert!(!checks.all_passed());
        assert!(!checks.any_failed());

        // A wrong ordering fails loudly.
        let inverted = vec![done_cell(1, Zero, 0.2), done_cell(4, Zero, 0.8)];
        let checks = directional_checks(&inverted);
        assert_eq!(checks.zero_row4_beats_row1, Some(false));
        assert!(checks.any_failed());
    }

    #[test]
    fn grid_renderings_mark_failures_and_mirror_the_row_structure() {
        use Condition::{FifteenMinutes as M15, Zero};
        let grid = AblationGrid {
            seed: 7,
            rows: vec![1, 4],
            conditions: vec![Zero, M15],
            cells: vec![
                done_cell(1, Zero, 0.9),
                done_cell(4, Zero, 0.5),
                done_cell(1, M15, 0.4),
                AblationCell {
                    row: 4,
                    flags: row_flags(4).unwrap(),
                    condition: M15,
                    outcome: CellOutcome::Failed("stage-3 diverged".into()),
                },
            ],
            checks: DirectionalChecks::default(),
        };
        let lines = grid_lines(&grid);
        assert!(lines.contains("1\tzero\tdone\t0.9\t"));
        assert!(lines.contains("4\t15m\tfailed\tstage-3 diverged\n"));
        assert!(lines.contains("check\tzero_row4_beats_row1\tnot run\n"));
        let md = grid_markdown(&grid);
        assert!(md.contains("| (1) supervised only |"));
        assert!(md.contains("| (4) + pseudo-labeling |"));
        assert!(md.contains(" failed |"));
        assert!(md.contains("row 4 / 15m: stage-3 diverged"));
        assert!(md.contains("| configuration | zero | 15m |"));
    }

    /// End-to-end smoke at miniature scale: one row, one condition, real
    /// training and scoring, artifacts on disk.
    #[test]
    fn miniature_grid_trains_scores_and_writes_artifacts() {
        let corpus = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig {
            seed: 29,
            n_group_a: 2,
            n_group_b: 2,
            speakers_per_lang: 2,
            paired_per_lang: 12,
            speech_only_per_lang: 3,
            text_only_per_lang: 3,
            test_per_lang: 1,
            eval_asr_per_lang: 3,
            paired_15m_per_lang: 2,
            ..CorpusConfig::default()
        };
        generate_corpus(&cfg, corpus.path()).unwrap();
        let meta = CorpusMeta::load(&corpus.path().join(META_FILE)).unwrap();
        let registry = registry_from_meta(&meta);

        let out = tempfile::tempdir().unwrap();
        let acfg = AblationConfig {
            mc: ModelConfig {
                hidden_dim: 24,
                s2f_layers: 1,
                shared_layers: 1,
                text_layers: 1,
                decoder_layers: 1,
                refinements: 2,
                n_langs: registry.language_rows(),
                n_spks: registry.speaker_rows(),
                ..ModelConfig::default()
            },
            weights: LossWeights::default(),
            cur: CurriculumConfig {
                stage1_steps: 2,
                stage2_steps: 2,
                stage3_steps: 2,
                eval_asr_steps: 2,
                batch_size: 2,
                snapshot_every: 0,
                seed: 31,
                mask_span: 2,
                mask_ratio: 0.3,
                ..CurriculumConfig::default()
            },
            guidance_w: 1.0,
            rows: vec![1],
            conditions: vec![Condition::Zero],
        };
        let grid = run_ablation(corpus.path(), out.path(), &acfg).unwrap();
        assert_eq!(grid.cells.len(), 1);
        match &grid.cells[0].outcome {
            CellOutcome::Done(m) => {
                assert!(m.group_b_cer_synth.is_finite());
                assert!(m.mean_cer_gt.is_finite());
            }
            CellOutcome::Failed(e) => panic!("cell failed: {e}"),
        }
        assert_eq!(grid.checks, DirectionalChecks::default());
        for name in [
            "grid.tsv",
            "grid.md",
            "eval_asr.ckpt",
            "chain_zero_mlm0.ckpt",
            "row1_zero.ckpt",
            "row1_zero.tsv",
            "row1_zero.md",
            "row1_zero.metrics.tsv",
        ] {
            assert!(out.path().join(name).exists(), "missing artifact {name}");
        }
    }
}
