//! Intelligibility reporting: decode groundtruth and synthesized test
//! signals with a separately trained recognizer, aggregate CER per language
//! and group, and render the machine- and human-readable report files.

use std::path::Path;

use crate::corpus::files::{read_manifest, read_signal, resolve_signal_path};
use crate::corpus::{
    Condition, CorpusMeta, LanguageGroup, Record, RecordKind, META_FILE, TEST_MANIFEST,
};
use crate::eval::decode::{greedy_decode, MAX_EMISSIONS_PER_FRAME};
use crate::eval::synth::synthesize_with_ids;
use crate::losses::rnnt_viterbi_durations;
use crate::model::forward::{
    decode_features, rnnt_logits, shared_forward, text_forward, upsample, vae_posterior,
};
use crate::model::{Checkpoint, ParamStore};
use crate::num::{Graph, Tensor};
use crate::rng::{self, purpose};
use crate::textproc::{cer, detokenize_lossy, tokenize, ByteSeq, UNKNOWN_ID};
use crate::training::acoustic_features;
use crate::{Error, Result};

/// CER-diff thresholds the histogram buckets on by default.
pub const DEFAULT_CER_THRESHOLDS: [f64; 4] = [0.01, 0.05, 0.10, 0.50];

/// Per-language evaluation outcome. CERs are means over the language's test
/// utterances.
#[derive(Debug, Clone)]
pub struct LangEval {
    pub lang: String,
    pub group: LanguageGroup,
    pub n_items: usize,
    pub cer_gt: f64,
    pub cer_synth: f64,
    /// Whether synthesis for this language ran with the unknown language id
    /// (forced in the zero condition for withheld languages, or fallback
    /// for names the registry has never seen).
    pub used_oov_lang: bool,
    /// Mean L1 between decoded features and groundtruth features under
    /// groundtruth-aligned durations; None when no utterance aligned.
    pub naturalness_l1: Option<f64>,
}

impl LangEval {
    /// Synthesized-minus-groundtruth CER.
    pub fn cer_diff(&self) -> f64 {
        self.cer_synth - self.cer_gt
    }
}

/// A full evaluation over one condition's test set.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub condition: Condition,
    pub seed: u64,
    pub guidance_w: f64,
    /// Content id of the model under test.
    pub tts_id: String,
    /// Content id of the recognizer scoring it.
    pub eval_asr_id: String,
    /// One row per language, in corpus order.
    pub langs: Vec<LangEval>,
}

impl EvalReport {
    fn mean_of(&self, group: Option<LanguageGroup>, get: impl Fn(&LangEval) -> f64) -> Option<f64> {
        let vals: Vec<f64> = self
            .langs
            .iter()
            .filter(|l| group.map_or(true, |g| l.group == g))
            .map(get)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// Mean groundtruth CER over a group's languages (None = all languages).
    pub fn mean_cer_gt(&self, group: Option<LanguageGroup>) -> Option<f64> {
        self.mean_of(group, |l| l.cer_gt)
    }

    /// Mean synthesized CER over a group's languages (None = all languages).
    pub fn mean_cer_synth(&self, group: Option<LanguageGroup>) -> Option<f64> {
        self.mean_of(group, |l| l.cer_synth)
    }

    /// Mean CER-diff over a group's languages (None = all languages).
    pub fn mean_cer_diff(&self, group: Option<LanguageGroup>) -> Option<f64> {
        self.mean_of(group, |l| l.cer_diff())
    }
}

/// Decode one signal with the recognizer and return the text, lossily: byte
/// fragments that are not UTF-8 become replacement characters.
fn recognize(asr: &ParamStore, signal: &Tensor) -> Result<String> {
    let z = acoustic_features(asr, &asr.config, signal)?;
    let (hyp, _) = greedy_decode(asr, &z, MAX_EMISSIONS_PER_FRAME)?;
    detokenize_lossy(&hyp)
}

/// Mean |Ẑ − Z| with groundtruth-aligned durations: extract the best
/// alignment of the reference tokens to the groundtruth features, decode
/// with exactly those durations and the posterior mean latent, and compare
/// frame by frame. Utterances whose alignment cannot give every token a
/// frame are skipped (None).
fn teacher_forced_l1(
    tts: &ParamStore,
    signal: &Tensor,
    tokens: &ByteSeq,
    lang_id: usize,
    spk_id: usize,
) -> Result<Option<f64>> {
    let mc = tts.config.clone();
    let z_gt = acoustic_features(tts, &mc, signal)?;

    let mut g = Graph::new();
    let b = tts.bind(&mut g, &[])?;
    let zc = g.constant(z_gt.clone());
    let h = shared_forward(&mut g, &b, &mc, zc)?;
    let logits = rnnt_logits(&mut g, &b, h, tokens.ids())?;
    let logits_t = g.value(logits).clone();
    let alignment = rnnt_viterbi_durations(&logits_t, tokens)?;
    let repaired = match alignment.repaired_min_one() {
        Ok(a) => a,
        Err(Error::Data(_)) => return Ok(None),
        Err(e) => return Err(e),
    };

    let mut g2 = Graph::new();
    let b2 = tts.bind(&mut g2, &[])?;
    let e = text_forward(&mut g2, &b2, &mc, tokens.ids(), lang_id, spk_id)?;
    let up = upsample(&mut g2, e, &repaired.durations)?;
    let zc2 = g2.constant(z_gt.clone());
    let (mu, _lv) = vae_posterior(&mut g2, &b2, zc2)?;
    let outs = decode_features(&mut g2, &b2, &mc, up, mu)?;
    let zhat = g2.value(*outs.last().unwrap());
    let n = z_gt.numel();
    let l1 = zhat
        .data()
        .iter()
        .zip(z_gt.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n as f64;
    Ok(Some(l1))
}

/// Score one model against one condition's test set. Every corpus language
/// must appear in the test manifest; the recognizer must be a genuinely
/// different snapshot from the model under test, trained compatibly.
pub fn eval_condition(
    tts: &Checkpoint,
    eval_asr: &Checkpoint,
    corpus_dir: &Path,
    condition: Condition,
    seed: u64,
    guidance_w: f64,
) -> Result<EvalReport> {
    if tts.id() == eval_asr.id() {
        return Err(Error::Contract(
            "the scoring recognizer and the model under test are the same snapshot".into(),
        ));
    }
    if tts.registry != eval_asr.registry {
        return Err(Error::Contract(
            "model and recognizer were trained against different id registries".into(),
        ));
    }
    if tts.store.config != eval_asr.store.config {
        return Err(Error::Contract(
            "model and recognizer disagree on architecture configuration".into(),
        ));
    }

    let meta = CorpusMeta::load(&corpus_dir.join(META_FILE))?;
    let records = read_manifest(&corpus_dir.join(TEST_MANIFEST))?;
    let registry = &tts.registry;

    let mut langs = Vec::with_capacity(meta.specs.len());
    for (lang_idx, spec) in meta.specs.iter().enumerate() {
        let items: Vec<&Record> = records.iter().filter(|r| r.lang == spec.name).collect();
        if items.is_empty() {
            return Err(Error::Data(format!(
                "language {} has no utterances in the test manifest",
                spec.name
            )));
        }
        let registry_lang = registry.language_id(&spec.name);
        let lang_id = if condition == Condition::Zero && spec.group == LanguageGroup::B {
            UNKNOWN_ID
        } else {
            registry_lang
        };

        let mut sum_gt = 0.0;
        let mut sum_synth = 0.0;
        let mut sum_l1 = 0.0;
        let mut n_l1 = 0usize;
        for (item_idx, rec) in items.iter().enumerate() {
            if rec.kind != RecordKind::Paired {
                return Err(Error::Contract(format!(
                    "test manifest rows must be paired; {} has a {:?} row",
                    spec.name, rec.kind
                )));
            }
            let text = rec.text.as_deref().ok_or_else(|| {
                Error::Contract(format!("paired test row in {} has no text", spec.name))
            })?;
            let rel = rec.signal_path.as_deref().ok_or_else(|| {
                Error::Contract(format!("paired test row in {} has no signal", spec.name))
            })?;
            let signal = read_signal(&resolve_signal_path(corpus_dir, rel))?;
            let tokens = tokenize(text)?;
            let spk_id = rec
                .speaker
                .as_deref()
                .map_or(UNKNOWN_ID, |s| registry.speaker_id(s));

            sum_gt += cer(text, &recognize(&eval_asr.store, &signal)?)?;

            let mut item_rng =
                rng::rng_for(seed, &[purpose::EVAL, lang_idx as u64, item_idx as u64]);
            let synth = synthesize_with_ids(
                &tts.store,
                &tokens,
                lang_id,
                spk_id,
                guidance_w,
                &mut item_rng,
            )?;
            sum_synth += cer(text, &recognize(&eval_asr.store, &synth.signal)?)?;

            if let Some(l1) = teacher_forced_l1(&tts.store, &signal, &tokens, lang_id, spk_id)? {
                sum_l1 += l1;
                n_l1 += 1;
            }
        }
        let n = items.len() as f64;
        langs.push(LangEval {
            lang: spec.name.clone(),
            group: spec.group,
            n_items: items.len(),
            cer_gt: sum_gt / n,
            cer_synth: sum_synth / n,
            used_oov_lang: lang_id == UNKNOWN_ID,
            naturalness_l1: if n_l1 == 0 { None } else { Some(sum_l1 / n_l1 as f64) },
        });
    }

    Ok(EvalReport {
        condition,
        seed,
        guidance_w,
        tts_id: tts.id(),
        eval_asr_id: eval_asr.id(),
        langs,
    })
}

/// Language counts at or below each CER-diff threshold (cumulative), plus
/// the remainder above the last threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct CerHistogram {
    pub thresholds: Vec<f64>,
    pub at_or_below: Vec<usize>,
    pub over: usize,
}

impl CerHistogram {
    /// Total languages described by the histogram.
    pub fn total(&self) -> usize {
        self.at_or_below.last().copied().unwrap_or(0) + self.over
    }
}

/// Bucket a report's per-language CER-diffs by threshold.
pub fn cer_diff_histogram(report: &EvalReport, thresholds: &[f64]) -> Result<CerHistogram> {
    if thresholds.is_empty() {
        return Err(Error::InvalidArg("histogram needs at least one threshold".into()));
    }
    if thresholds.windows(2).any(|w| !(w[0] < w[1])) || thresholds.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidArg(format!(
            "thresholds must be finite and strictly increasing, got {thresholds:?}"
        )));
    }
    let at_or_below: Vec<usize> = thresholds
        .iter()
        .map(|&t| report.langs.iter().filter(|l| l.cer_diff() <= t).count())
        .collect();
    let over = report
        .langs
        .iter()
        .filter(|l| l.cer_diff() > *thresholds.last().unwrap())
        .count();
    Ok(CerHistogram { thresholds: thresholds.to_vec(), at_or_below, over })
}

/// The machine-readable report: one `lang<TAB>cer_gt<TAB>cer_synth<TAB>
/// cer_diff` line per language, full precision.
pub fn report_lines(report: &EvalReport) -> String {
    let mut out = String::new();
    for l in &report.langs {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            l.lang,
            l.cer_gt,
            l.cer_synth,
            l.cer_diff()
        ));
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// The human-readable report: metadata, the per-language table, group
/// means, and the CER-diff histogram.
pub fn report_markdown(report: &EvalReport, hist: &CerHistogram) -> String {
    let mut md = String::new();
    md.push_str("# Intelligibility report\n\n");
    md.push_str(&format!("- condition: {}\n", report.condition.as_str()));
    md.push_str(&format!("- seed: {}\n", report.seed));
    md.push_str(&format!("- guidance weight: {}\n", report.guidance_w));
    md.push_str(&format!("- model snapshot: `{}`\n", report.tts_id));
    md.push_str(&format!("- recognizer snapshot: `{}`\n\n", report.eval_asr_id));

    md.push_str("| language | group | items | CER gt | CER synth | CER diff | OOV ids | feature L1 |\n");
    md.push_str("|---|---|---|---|---|---|---|---|\n");
    for l in &report.langs {
        md.push_str(&format!(
            "| {} | {:?} | {} | {:.4} | {:.4} | {:.4} | {} | {} |\n",
            l.lang,
            l.group,
            l.n_items,
            l.cer_gt,
            l.cer_synth,
            l.cer_diff(),
            if l.used_oov_lang { "yes" } else { "no" },
            fmt_opt(l.naturalness_l1),
        ));
    }

    md.push_str("\n**Means**\n\n| scope | CER gt | CER synth | CER diff |\n|---|---|---|---|\n");
    for (name, g) in [
        ("group A", Some(LanguageGroup::A)),
        ("group B", Some(LanguageGroup::B)),
        ("all", None),
    ] {
        md.push_str(&format!(
            "| {} | {} | {} | {} |\n",
            name,
            fmt_opt(report.mean_cer_gt(g)),
            fmt_opt(report.mean_cer_synth(g)),
            fmt_opt(report.mean_cer_diff(g)),
        ));
    }

    md.push_str("\n**CER-diff histogram** (languages at or below each threshold, cumulative)\n\n|");
    for t in &hist.thresholds {
        md.push_str(&format!(" ≤ {t} |"));
    }
    md.push_str(&format!(" > {} |\n|", hist.thresholds.last().unwrap()));
    for _ in 0..=hist.thresholds.len() {
        md.push_str("---|");
    }
    md.push('\n');
    md.push('|');
    for c in &hist.at_or_below {
        md.push_str(&format!(" {c} |"));
    }
    md.push_str(&format!(" {} |\n", hist.over));
    md
}

/// Write both report renderings.
pub fn write_report(
    report: &EvalReport,
    hist: &CerHistogram,
    tsv_path: &Path,
    md_path: &Path,
) -> Result<()> {
    for (path, body) in [
        (tsv_path, report_lines(report)),
        (md_path, report_markdown(report, hist)),
    ] {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, body).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

// ── tests ───────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::files::write_manifest;
    use crate::corpus::{generate_corpus, train_manifest_name, CorpusConfig};
    use crate::losses::LossWeights;
    use crate::model::ModelConfig;
    use crate::training::{registry_from_meta, train_eval_asr, CurriculumConfig, MetricsLog,
        Trainer, TrainSet};

    fn synthetic_report(diffs: &[(LanguageGroup, f64)]) -> EvalReport {
        EvalReport {
            condition: Condition::Zero,
            seed: 0,
            guidance_w: 1.0,
            tts_id: "aaaa".into(),
            eval_asr_id: "bbbb".into(),
            langs: diffs
                .iter()
                .enumerate()
                .map(|(i, &(group, diff))| LangEval {
                    lang: format!("l{i}"),
                    group,
                    n_items: 2,
                    cer_gt: 0.04,
                    cer_synth: 0.04 + diff,
                    used_oov_lang: false,
                    naturalness_l1: Some(0.5),
                })
                .collect(),
        }
    }

    #[test]
    fn histogram_is_cumulative_and_accounts_for_every_language() {
        use LanguageGroup::{A, B};
        let report = synthetic_report(&[
            (A, 0.005),
            (A, 0.03),
            (A, 0.08),
            (B, 0.30),
            (B, 0.80),
            (B, -0.01),
        ]);
        let h = cer_diff_histogram(&report, &DEFAULT_CER_THRESHOLDS).unwrap();
        assert_eq!(h.at_or_below, vec![2, 3, 4, 5]);
        assert_eq!(h.over, 1);
        assert_eq!(h.total(), report.langs.len());
        assert!(h.at_or_below.windows(2).all(|w| w[0] <= w[1]));

        // All perfect → every bucket holds every language.
        let perfect = synthetic_report(&[(A, 0.0), (B, 0.0)]);
        let hp = cer_diff_histogram(&perfect, &DEFAULT_CER_THRESHOLDS).unwrap();
        assert_eq!(hp.at_or_below, vec![2, 2, 2, 2]);
        assert_eq!(hp.over, 0);

        assert!(cer_diff_histogram(&report, &[]).is_err());
        assert!(cer_diff_histogram(&report, &[0.1, 0.1]).is_err());
        assert!(cer_diff_histogram(&report, &[0.2, 0.1]).is_err());
    }

    #[test]
    fn report_renderings_cover_every_language_and_the_means() {
        use LanguageGroup::{A, B};
        let report = synthetic_report(&[(A, 0.01), (B, 0.21)]);
        let lines = report_lines(&report);
        let expected: String = report
            .langs
            .iter()
            .map(|l| format!("{}\t{}\t{}\t{}\n", l.lang, l.cer_gt, l.cer_synth, l.cer_diff()))
            .collect();
        assert_eq!(lines, expected);
        assert!(lines.starts_with("l0\t0.04\t0.05\t"));
        assert_eq!(lines.lines().count(), 2);
        let hist = cer_diff_histogram(&report, &DEFAULT_CER_THRESHOLDS).unwrap();
        let md = report_markdown(&report, &hist);
        assert!(md.contains("| l0 | A | 2 |"));
        assert!(md.contains("| l1 | B | 2 |"));
        assert!(md.contains("| group B | 0.0400 | 0.2500 | 0.2100 |"));
        assert!(md.contains("≤ 0.5 |"));
        assert!(md.contains("- condition: zero"));
    }

    fn eval_corpus(dir: &Path) -> CorpusConfig {
        let cfg = CorpusConfig {
            seed: 23,
            n_group_a: 2,
            n_group_b: 2,
            speakers_per_lang: 2,
            paired_per_lang: 12,
            speech_only_per_lang: 3,
            text_only_per_lang: 3,
            test_per_lang: 2,
            eval_asr_per_lang: 3,
            paired_15m_per_lang: 2,
            ..CorpusConfig::default()
        };
        generate_corpus(&cfg, dir).unwrap();
        cfg
    }

    fn tiny_cur(seed: u64) -> CurriculumConfig {
        CurriculumConfig {
            stage1_steps: 2,
            stage2_steps: 2,
            stage3_steps: 2,
            eval_asr_steps: 2,
            batch_size: 2,
            snapshot_every: 0,
            seed,
            mask_span: 2,
            mask_ratio: 0.3,
            ..CurriculumConfig::default()
        }
    }

    /// One trained setup shared by the end-to-end assertions: report shape,
    /// id policies per condition, determinism, and the failure modes.
    #[test]
    fn condition_reports_cover_the_corpus_and_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        eval_corpus(dir.path());
        let meta = CorpusMeta::load(&dir.path().join(META_FILE)).unwrap();
        let registry = registry_from_meta(&meta);
        let mc = ModelConfig {
            hidden_dim: 24,
            s2f_layers: 1,
            shared_layers: 1,
            text_layers: 1,
            decoder_layers: 1,
            refinements: 2,
            n_langs: registry.language_rows(),
            n_spks: registry.speaker_rows(),
            ..ModelConfig::default()
        };
        let records =
            read_manifest(&dir.path().join(train_manifest_name(Condition::Zero))).unwrap();
        let set = TrainSet::load(records, dir.path(), &registry).unwrap();
        let mut trainer =
            Trainer::new(&mc, LossWeights::default(), tiny_cur(3), registry.clone()).unwrap();
        trainer.run(&set, &mut MetricsLog::disabled(), None).unwrap();
        let tts = trainer.checkpoint(3, 2);

        let asr_records = read_manifest(&dir.path().join(crate::corpus::EVAL_ASR_MANIFEST)).unwrap();
        let asr_set = TrainSet::load(asr_records, dir.path(), &registry).unwrap();
        let (asr_store, _) = train_eval_asr(
            &mc,
            &LossWeights::default(),
            &tiny_cur(3),
            registry.clone(),
            &asr_set,
            None,
            &mut MetricsLog::disabled(),
            None,
            "",
        )
        .unwrap();
        let asr = Checkpoint {
            stage: 0,
            step: 2,
            registry: registry.clone(),
            config_echo: String::new(),
            store: asr_store,
        };

        let report =
            eval_condition(&tts, &asr, dir.path(), Condition::Zero, 5, 1.0).unwrap();
        let names: Vec<&str> = report.langs.iter().map(|l| l.lang.as_str()).collect();
        assert_eq!(names, vec!["a00", "a01", "b00", "b01"]);
        for l in &report.langs {
            assert_eq!(l.n_items, 2);
            assert!(l.cer_gt.is_finite() && l.cer_gt >= 0.0);
            assert!(l.cer_synth.is_finite() && l.cer_synth >= 0.0);
            assert_eq!(l.used_oov_lang, l.group == LanguageGroup::B);
        }
        assert!(report.mean_cer_gt(None).is_some());

        // The withheld-language id policy is the only condition dependence.
        let report_15m =
            eval_condition(&tts, &asr, dir.path(), Condition::FifteenMinutes, 5, 1.0).unwrap();
        assert!(report_15m.langs.iter().all(|l| !l.used_oov_lang));

        // Bitwise-deterministic renderings.
        let again = eval_condition(&tts, &asr, dir.path(), Condition::Zero, 5, 1.0).unwrap();
        let hist = cer_diff_histogram(&report, &DEFAULT_CER_THRESHOLDS).unwrap();
        let hist2 = cer_diff_histogram(&again, &DEFAULT_CER_THRESHOLDS).unwrap();
        assert_eq!(report_lines(&report), report_lines(&again));
        assert_eq!(report_markdown(&report, &hist), report_markdown(&again, &hist2));
        assert_eq!(hist.total(), 4);

        // A model cannot score itself.
        let err = eval_condition(&tts, &tts, dir.path(), Condition::Zero, 5, 1.0);
        assert!(matches!(err, Err(Error::Contract(_))));

        // Every language must appear in the test manifest.
        let test_path = dir.path().join(TEST_MANIFEST);
        let kept: Vec<Record> = read_manifest(&test_path)
            .unwrap()
            .into_iter()
            .filter(|r| r.lang != "a00")
            .collect();
        write_manifest(&test_path, &kept).unwrap();
        let err = eval_condition(&tts, &asr, dir.path(), Condition::Zero, 5, 1.0);
        match err {
            Err(Error::Data(msg)) => assert!(msg.contains("a00"), "{msg}"),
            other => panic!("expected a data error, got {other:?}"),
        }
    }
}
