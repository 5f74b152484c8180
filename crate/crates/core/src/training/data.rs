//! Resolves manifest records into memory-resident training items: text
//! tokenized, conditioning ids looked up, signals loaded from disk.

use std::path::Path;

use crate::corpus::{files, BatchMixer, CorpusMeta, Record, RecordKind};
use crate::num::Tensor;
use crate::textproc::{tokenize, ByteSeq, IdRegistry, UNKNOWN_ID};
use crate::{Error, Result};

/// One training item. Which fields are populated follows the record kind:
/// paired items carry both tokens and signal, speech-only items only the
/// signal, text-only items only the tokens.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub lang: String,
    pub lang_id: usize,
    pub spk_id: usize,
    /// Signal path relative to the corpus dir; the key external
    /// pseudo-label files use.
    pub signal_rel: Option<String>,
    pub tokens: Option<ByteSeq>,
    pub signal: Option<Tensor>,
}

impl TrainItem {
    fn load(r: &Record, corpus_dir: &Path, registry: &IdRegistry) -> Result<TrainItem> {
        let needs_text =
            matches!(r.kind, RecordKind::Paired | RecordKind::TextOnly);
        let needs_signal =
            matches!(r.kind, RecordKind::Paired | RecordKind::SpeechOnly);
        if needs_text && r.text.is_none() {
            return Err(Error::Data(format!(
                "{:?} record in {} has no transcript",
                r.kind, r.lang
            )));
        }
        if needs_signal && r.signal_path.is_none() {
            return Err(Error::Data(format!(
                "{:?} record in {} has no signal path",
                r.kind, r.lang
            )));
        }
        let tokens = match (needs_text, &r.text) {
            (true, Some(t)) => Some(tokenize(t)?),
            _ => None,
        };
        let signal = match (needs_signal, &r.signal_path) {
            (true, Some(rel)) => {
                Some(files::read_signal(&files::resolve_signal_path(corpus_dir, rel))?)
            }
            _ => None,
        };
        Ok(TrainItem {
            lang: r.lang.clone(),
            lang_id: registry.language_id(&r.lang),
            spk_id: r.speaker.as_deref().map_or(UNKNOWN_ID, |s| registry.speaker_id(s)),
            signal_rel: if needs_signal { r.signal_path.clone() } else { None },
            tokens,
            signal,
        })
    }
}

/// One manifest fully loaded, grouped by record kind in manifest order (the
/// same order a mixer built over the same records lists its pools in).
pub struct TrainSet {
    records: Vec<Record>,
    paired: Vec<TrainItem>,
    speech: Vec<TrainItem>,
    text: Vec<TrainItem>,
}

impl TrainSet {
    pub fn load(
        records: Vec<Record>,
        corpus_dir: &Path,
        registry: &IdRegistry,
    ) -> Result<TrainSet> {
        let mut paired = Vec::new();
        let mut speech = Vec::new();
        let mut text = Vec::new();
        for r in &records {
            let item = TrainItem::load(r, corpus_dir, registry)?;
            match r.kind {
                RecordKind::Paired => paired.push(item),
                RecordKind::SpeechOnly => speech.push(item),
                RecordKind::TextOnly => text.push(item),
            }
        }
        Ok(TrainSet { records, paired, speech, text })
    }

    /// Build directly from preloaded items; for callers that synthesize
    /// batches without a manifest on disk.
    pub fn from_items(
        paired: Vec<TrainItem>,
        speech: Vec<TrainItem>,
        text: Vec<TrainItem>,
    ) -> TrainSet {
        fn record_of(kind: RecordKind, it: &TrainItem) -> Record {
            Record {
                kind,
                lang: it.lang.clone(),
                speaker: None,
                text: it.tokens.as_ref().map(|_| String::new()),
                signal_path: it.signal_rel.clone(),
            }
        }
        let mut records = Vec::new();
        records.extend(paired.iter().map(|it| record_of(RecordKind::Paired, it)));
        records.extend(speech.iter().map(|it| record_of(RecordKind::SpeechOnly, it)));
        records.extend(text.iter().map(|it| record_of(RecordKind::TextOnly, it)));
        TrainSet { records, paired, speech, text }
    }

    pub fn items_of(&self, kind: RecordKind) -> &[TrainItem] {
        match kind {
            RecordKind::Paired => &self.paired,
            RecordKind::SpeechOnly => &self.speech,
            RecordKind::TextOnly => &self.text,
        }
    }

    pub fn len_of(&self, kind: RecordKind) -> usize {
        self.items_of(kind).len()
    }

    /// A mixer over this set's records. Stage drivers build one per stream
    /// so each stream draws from an independent seeded sequence.
    pub fn mixer(&self, mixer_seed: u64) -> BatchMixer {
        BatchMixer::new(self.records.clone(), mixer_seed)
    }

    /// Draw a batch through `mixer` and resolve it to loaded items.
    pub fn sample<'a>(
        &'a self,
        mixer: &BatchMixer,
        weights: (f64, f64, f64),
        step: u64,
        batch_size: usize,
    ) -> Result<(RecordKind, Vec<&'a TrainItem>)> {
        let (kind, positions) = mixer.sample_batch_indices(weights, step, batch_size)?;
        let pool = self.items_of(kind);
        if positions.iter().any(|&p| p >= pool.len()) {
            return Err(Error::Contract(
                "mixer drew positions outside this set's pools; \
                 it was built over different records"
                    .into(),
            ));
        }
        Ok((kind, positions.into_iter().map(|p| &pool[p]).collect()))
    }
}

/// Registry over every language and speaker the corpus metadata declares,
/// so conditioning ids stay stable across manifests of the same corpus.
pub fn registry_from_meta(meta: &CorpusMeta) -> IdRegistry {
    let langs: Vec<String> = meta.specs.iter().map(|s| s.name.clone()).collect();
    let spks: Vec<String> = meta.speakers.iter().map(|s| s.name.clone()).collect();
    IdRegistry::build(&langs, &spks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, train_manifest_name, Condition, CorpusConfig, META_FILE};

    fn tiny_cfg() -> CorpusConfig {
        CorpusConfig {
            seed: 11,
            n_group_a: 2,
            n_group_b: 2,
            speakers_per_lang: 2,
            paired_per_lang: 4,
            speech_only_per_lang: 3,
            text_only_per_lang: 3,
            test_per_lang: 2,
            eval_asr_per_lang: 2,
            paired_15m_per_lang: 2,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn loads_a_generated_manifest_with_ids_resolved() {
        let dir = tempfile::tempdir().unwrap();
        generate_corpus(&tiny_cfg(), dir.path()).unwrap();
        let meta = CorpusMeta::load(&dir.path().join(META_FILE)).unwrap();
        let registry = registry_from_meta(&meta);
        let records = files::read_manifest(
            &dir.path().join(train_manifest_name(Condition::FifteenMinutes)),
        )
        .unwrap();
        let set = TrainSet::load(records, dir.path(), &registry).unwrap();

        assert!(set.len_of(RecordKind::Paired) > 0);
        assert!(set.len_of(RecordKind::SpeechOnly) > 0);
        assert!(set.len_of(RecordKind::TextOnly) > 0);
        for it in set.items_of(RecordKind::Paired) {
            assert!(it.tokens.is_some() && it.signal.is_some());
            assert!(it.lang_id != UNKNOWN_ID, "trained language must have a real id");
        }
        // Speaker labels are partial by construction: some paired items have
        // them, the rest fall back to the unknown id.
        assert!(set.items_of(RecordKind::Paired).iter().any(|it| it.spk_id != UNKNOWN_ID));
        assert!(set.items_of(RecordKind::Paired).iter().any(|it| it.spk_id == UNKNOWN_ID));
        for it in set.items_of(RecordKind::SpeechOnly) {
            assert!(it.tokens.is_none(), "speech-only transcripts must not leak");
            assert!(it.signal.is_some());
            assert_eq!(it.spk_id, UNKNOWN_ID, "speech-only speakers are unlabeled");
        }
        for it in set.items_of(RecordKind::TextOnly) {
            assert!(it.tokens.is_some() && it.signal.is_none());
        }
    }

    #[test]
    fn sampling_maps_mixer_positions_onto_items() {
        let dir = tempfile::tempdir().unwrap();
        generate_corpus(&tiny_cfg(), dir.path()).unwrap();
        let meta = CorpusMeta::load(&dir.path().join(META_FILE)).unwrap();
        let registry = registry_from_meta(&meta);
        let records = files::read_manifest(
            &dir.path().join(train_manifest_name(Condition::FifteenMinutes)),
        )
        .unwrap();
        let set = TrainSet::load(records.clone(), dir.path(), &registry).unwrap();
        let mixer = set.mixer(99);

        // Cross-check against the reference-returning mixer API.
        let direct = BatchMixer::new(records, 99);
        for step in 0..20 {
            let (k1, items) = set.sample(&mixer, (1.0, 1.0, 1.0), step, 4).unwrap();
            let (k2, recs) = direct.sample_batch((1.0, 1.0, 1.0), step, 4).unwrap();
            assert_eq!(k1, k2);
            for (it, r) in items.iter().zip(&recs) {
                assert_eq!(it.lang, r.lang);
                assert_eq!(it.signal_rel, r.signal_path);
            }
        }
    }
}
