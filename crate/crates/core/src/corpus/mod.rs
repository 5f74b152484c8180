//! Procedural micro-language corpus: language and speaker generation,
//! deterministic utterance synthesis, manifest construction for the three
//! data conditions, and the batch mixer that feeds training.
//!
//! Everything here is a pure function of (config, seed), so a corpus can be
//! regenerated byte-for-byte from its metadata file.

pub mod files;

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::num::{linalg, Tensor};
use crate::rng::{self, purpose};
use crate::{Error, Result};

/// The one character every language shares; the word separator.
pub const SPACE: char = ' ';

// ── language and speaker specs ──────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LanguageGroup {
    /// High-resource: paired data always available for training.
    A,
    /// Low-resource: paired data withheld or rationed depending on condition.
    B,
}

/// A generated micro-language: an alphabet with per-character durations,
/// per-character emission vectors, and a mixing transform that makes the
/// language's feature frames a full-rank recombination of its emissions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicroLanguageSpec {
    pub name: String,
    pub group: LanguageGroup,
    /// Unique characters; index 0 is always the shared space character.
    pub alphabet: Vec<char>,
    /// Nominal frames per character at tempo 1.0, same order as `alphabet`.
    pub base_durations: Vec<usize>,
    /// Per-character emission vectors, each `d_feat` long.
    pub emissions: Vec<Vec<f64>>,
    /// Row-major `d_feat x d_feat` mixing transform, well conditioned.
    pub transform: Vec<f64>,
    pub d_feat: usize,
}

impl MicroLanguageSpec {
    pub fn char_index(&self, c: char) -> Option<usize> {
        self.alphabet.iter().position(|&a| a == c)
    }

    /// The noise-free feature frame for one character: `transform * emission`.
    pub fn feature_frame(&self, char_idx: usize) -> Vec<f64> {
        let d = self.d_feat;
        let e = &self.emissions[char_idx];
        let mut out = vec![0.0; d];
        for (r, o) in out.iter_mut().enumerate() {
            for c in 0..d {
                *o += self.transform[r * d + c] * e[c];
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerSpec {
    pub name: String,
    pub home_language: String,
    /// Additive signal-space offset; lies in the range of the global signal
    /// map and has norm at most 1.
    pub offset: Vec<f64>,
    /// Duration multiplier in [0.8, 1.25].
    pub tempo: f64,
}

// ── records, utterances, manifests ──────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RecordKind {
    /// Transcribed speech: text and signal both present.
    Paired,
    /// Untranscribed speech: signal only.
    SpeechOnly,
    /// Unspoken text: text only.
    TextOnly,
}

/// One manifest line. Paths are relative to the corpus root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub kind: RecordKind,
    pub lang: String,
    pub speaker: Option<String>,
    pub text: Option<String>,
    pub signal_path: Option<String>,
}

/// A fully synthesized utterance as produced by [`synth_utterance`]. Fields
/// are optional so loaders can represent the redacted view a manifest row
/// actually grants access to.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub kind: RecordKind,
    pub lang: String,
    pub speaker: Option<String>,
    pub text: Option<String>,
    pub signal: Option<Tensor>,
    /// Ground-truth frames per character, pre-downsampling. Sums to the
    /// signal frame count.
    pub reference_durations: Option<Vec<usize>>,
}

impl Utterance {
    pub fn validate(&self) -> Result<()> {
        let need = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Contract(format!(
                    "{:?} utterance in {} is missing its {}",
                    self.kind, self.lang, what
                )))
            }
        };
        match self.kind {
            RecordKind::Paired => {
                need(self.text.is_some(), "text")?;
                need(self.signal.is_some(), "signal")
            }
            RecordKind::SpeechOnly => need(self.signal.is_some(), "signal"),
            RecordKind::TextOnly => need(self.text.is_some(), "text"),
        }
    }
}

/// Data-availability condition for the low-resource group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Condition {
    /// No paired data at all for group B.
    Zero,
    /// A small fixed budget of paired utterances per group-B language.
    FifteenMinutes,
    /// Full paired data everywhere.
    Supervised,
}

impl Condition {
    pub fn parse(s: &str) -> Result<Condition> {
        match s {
            "zero" => Ok(Condition::Zero),
            "15m" => Ok(Condition::FifteenMinutes),
            "supervised" => Ok(Condition::Supervised),
            other => Err(Error::InvalidArg(format!(
                "unknown condition {:?}; expected zero, 15m, or supervised",
                other
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::Zero => "zero",
            Condition::FifteenMinutes => "15m",
            Condition::Supervised => "supervised",
        }
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

// ── configuration ───────────────────────────────────────────────────────

/// Sizes and knobs for corpus generation. Defaults are the desk-scale setup
/// used throughout the tests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_group_a: usize,
    pub n_group_b: usize,
    pub speakers_per_lang: usize,
    pub d_feat: usize,
    pub d_sig: usize,
    pub paired_per_lang: usize,
    pub speech_only_per_lang: usize,
    pub text_only_per_lang: usize,
    pub test_per_lang: usize,
    pub eval_asr_per_lang: usize,
    /// Paired budget per group-B language under the 15m condition.
    pub paired_15m_per_lang: usize,
    pub noise_sd: f64,
    pub words_min: usize,
    pub words_max: usize,
    pub word_len_min: usize,
    pub word_len_max: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 0,
            n_group_a: 8,
            n_group_b: 4,
            speakers_per_lang: 4,
            d_feat: 8,
            d_sig: 16,
            paired_per_lang: 120,
            speech_only_per_lang: 80,
            text_only_per_lang: 120,
            test_per_lang: 50,
            eval_asr_per_lang: 60,
            paired_15m_per_lang: 20,
            noise_sd: 0.05,
            words_min: 2,
            words_max: 3,
            word_len_min: 2,
            word_len_max: 4,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let positive: &[(&str, usize)] = &[
            ("n_group_a", self.n_group_a),
            ("n_group_b", self.n_group_b),
            ("speakers_per_lang", self.speakers_per_lang),
            ("paired_per_lang", self.paired_per_lang),
            ("test_per_lang", self.test_per_lang),
            ("eval_asr_per_lang", self.eval_asr_per_lang),
            ("words_min", self.words_min),
            ("word_len_min", self.word_len_min),
        ];
        for &(name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_feat < 2 {
            return Err(Error::Config("d_feat must be at least 2".into()));
        }
        if self.d_sig < self.d_feat {
            return Err(Error::Config(format!(
                "d_sig ({}) must be at least d_feat ({})",
                self.d_sig, self.d_feat
            )));
        }
        if self.words_max < self.words_min || self.word_len_max < self.word_len_min {
            return Err(Error::Config("word count/length ranges are inverted".into()));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return Err(Error::Config("noise_sd must be finite and non-negative".into()));
        }
        Ok(())
    }
}

// ── language generation ─────────────────────────────────────────────────

/// Codepoint blocks the alphabets are drawn from, one block per language so
/// scripts never overlap. All blocks sit below U+0800, so every letter is one
/// or two UTF-8 bytes.
fn alphabet_blocks() -> &'static [(u32, u32)] {
    &[
        (0x0061, 26), // ascii lowercase
        (0x00E0, 23), // latin-1 supplement lowercase
        (0x0150, 24), // latin extended-a
        (0x03B1, 25), // greek lowercase
        (0x0430, 32), // cyrillic lowercase
        (0x0450, 32), // cyrillic extensions
        (0x0561, 31), // armenian lowercase
        (0x05D0, 27), // hebrew
        (0x0627, 20), // arabic
        (0x0712, 27), // syriac
        (0x0780, 29), // thaana
        (0x07CA, 30), // nko
    ]
}

fn min_pairwise_distance(vecs: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..vecs.len() {
        for j in i + 1..vecs.len() {
            let d2: f64 = vecs[i]
                .iter()
                .zip(&vecs[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            best = best.min(d2.sqrt());
        }
    }
    best
}

/// Generate `n_a` group-A and `n_b` group-B languages, deterministically from
/// the seed. Each language gets a disjoint script block (plus the shared
/// space), per-character durations, emission vectors with pairwise distance
/// above 0.5, and a well-conditioned mixing transform.
pub fn gen_languages(
    n_a: usize,
    n_b: usize,
    d_feat: usize,
    seed: u64,
) -> Result<Vec<MicroLanguageSpec>> {
    let blocks = alphabet_blocks();
    if n_a + n_b > blocks.len() {
        return Err(Error::InvalidArg(format!(
            "requested {} languages but only {} script blocks are available",
            n_a + n_b,
            blocks.len()
        )));
    }
    if n_a == 0 || n_b == 0 {
        return Err(Error::InvalidArg(
            "need at least one language in each group".into(),
        ));
    }
    if d_feat < 2 {
        return Err(Error::InvalidArg("d_feat must be at least 2".into()));
    }

    let mut specs = Vec::with_capacity(n_a + n_b);
    for i in 0..n_a + n_b {
        let (group, name) = if i < n_a {
            (LanguageGroup::A, format!("a{:02}", i))
        } else {
            (LanguageGroup::B, format!("b{:02}", i - n_a))
        };
        let mut rng = rng::rng_for(seed, &[purpose::LANGUAGE, i as u64]);
        let (start, count) = blocks[i];
        let one_byte = start < 0x80;

        let n_letters = rng.gen_range(9..=13usize);
        let mut offsets: Vec<u32> = (0..count).collect();
        for k in 0..n_letters {
            let j = rng.gen_range(k..offsets.len());
            offsets.swap(k, j);
        }
        let mut letters: Vec<char> = offsets[..n_letters]
            .iter()
            .map(|&o| char::from_u32(start + o).expect("codepoints below 0x800 are valid chars"))
            .collect();
        letters.sort_unstable();
        let mut alphabet = vec![SPACE];
        alphabet.extend(letters);

        let base_durations: Vec<usize> = alphabet
            .iter()
            .map(|&c| {
                if c == SPACE {
                    rng.gen_range(2..=3usize)
                } else if one_byte {
                    rng.gen_range(3..=6usize)
                } else {
                    rng.gen_range(4..=6usize)
                }
            })
            .collect();

        let mut emissions = None;
        for _ in 0..200 {
            let cand: Vec<Vec<f64>> = (0..alphabet.len())
                .map(|_| (0..d_feat).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
                .collect();
            if min_pairwise_distance(&cand) > 0.5 {
                emissions = Some(cand);
                break;
            }
        }
        let emissions = emissions.ok_or_else(|| {
            Error::Data(format!(
                "could not draw emission vectors separated by 0.5 for language {} \
                 after 200 attempts",
                name
            ))
        })?;

        // Orthonormal basis times a bounded diagonal: singular values equal the
        // diagonal, so the condition number stays at most 2, far under the 100
        // the rest of the system assumes.
        let q = linalg::random_orthonormal_cols(d_feat, d_feat, &mut rng)?;
        let scales: Vec<f64> = (0..d_feat).map(|_| 0.7 + 0.7 * rng.gen::<f64>()).collect();
        let mut transform = vec![0.0; d_feat * d_feat];
        for r in 0..d_feat {
            for c in 0..d_feat {
                transform[r * d_feat + c] = q.data()[r * d_feat + c] * scales[c];
            }
        }

        specs.push(MicroLanguageSpec {
            name,
            group,
            alphabet,
            base_durations,
            emissions,
            transform,
            d_feat,
        });
    }
    Ok(specs)
}

/// The fixed map from feature space to signal space, shared by every language
/// and speaker. Columns are orthonormal, so it is exactly invertible on the
/// frames it generates. Derived from the seed; never stored.
pub fn global_signal_map(seed: u64, d_sig: usize, d_feat: usize) -> Result<Tensor> {
    if d_sig < d_feat {
        return Err(Error::InvalidArg(format!(
            "signal dim {} must be at least feature dim {}",
            d_sig, d_feat
        )));
    }
    let mut rng = rng::rng_for(seed, &[purpose::SIGNAL_MAP]);
    linalg::random_orthonormal_cols(d_sig, d_feat, &mut rng)
}

fn matvec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    let (rows, cols) = m.dims2();
    debug_assert_eq!(cols, v.len());
    let mut out = vec![0.0; rows];
    for (r, o) in out.iter_mut().enumerate() {
        let row = &m.data()[r * cols..(r + 1) * cols];
        *o = row.iter().zip(v).map(|(a, b)| a * b).sum();
    }
    out
}

/// Generate `per_lang` speakers for every language. Offsets are built inside
/// the signal map's column space with norm in [0.2, 0.9], so speaker identity
/// never pushes frames off the generative manifold.
pub fn gen_speakers(
    specs: &[MicroLanguageSpec],
    per_lang: usize,
    signal_map: &Tensor,
    seed: u64,
) -> Result<Vec<SpeakerSpec>> {
    if per_lang == 0 {
        return Err(Error::InvalidArg("need at least one speaker per language".into()));
    }
    let (_, d_feat) = signal_map.dims2();
    let mut speakers = Vec::with_capacity(specs.len() * per_lang);
    for (li, spec) in specs.iter().enumerate() {
        for k in 0..per_lang {
            let mut rng = rng::rng_for(seed, &[purpose::SPEAKER, li as u64, k as u64]);
            let dir: Vec<f64> = (0..d_feat).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm: f64 = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let scale = (0.2 + 0.7 * rng.gen::<f64>()) / norm;
            let feat_dir: Vec<f64> = dir.iter().map(|x| x * scale).collect();
            let offset = matvec(signal_map, &feat_dir);
            let tempo = 0.8 + 0.45 * rng.gen::<f64>();
            speakers.push(SpeakerSpec {
                name: format!("spk_{}_{}", spec.name, k),
                home_language: spec.name.clone(),
                offset,
                tempo,
            });
        }
    }
    Ok(speakers)
}

/// Draw a short random text in the language: 2-3 words of letters joined by
/// the shared space (counts configurable).
pub fn gen_text(spec: &MicroLanguageSpec, cfg: &CorpusConfig, rng: &mut impl Rng) -> String {
    let letters = &spec.alphabet[1..];
    let n_words = rng.gen_range(cfg.words_min..=cfg.words_max);
    let mut out = String::new();
    for w in 0..n_words {
        if w > 0 {
            out.push(SPACE);
        }
        let len = rng.gen_range(cfg.word_len_min..=cfg.word_len_max);
        for _ in 0..len {
            out.push(letters[rng.gen_range(0..letters.len())]);
        }
    }
    out
}

/// Render text to a signal: each character becomes `round(base * tempo)`
/// (at least 1) copies of its transformed emission, mapped to signal space,
/// plus the speaker offset and i.i.d. Gaussian noise.
pub fn synth_utterance(
    text: &str,
    spec: &MicroLanguageSpec,
    speaker: &SpeakerSpec,
    signal_map: &Tensor,
    noise_sd: f64,
    seed: u64,
) -> Result<Utterance> {
    if text.is_empty() {
        return Err(Error::InvalidArg("cannot synthesize empty text".into()));
    }
    if !(noise_sd.is_finite() && noise_sd >= 0.0) {
        return Err(Error::InvalidArg("noise_sd must be finite and non-negative".into()));
    }
    let (d_sig, d_feat) = signal_map.dims2();
    if d_feat != spec.d_feat || speaker.offset.len() != d_sig {
        return Err(Error::Shape {
            op: "synth_utterance",
            detail: format!(
                "signal map {}x{}, language d_feat {}, speaker offset {}",
                d_sig,
                d_feat,
                spec.d_feat,
                speaker.offset.len()
            ),
        });
    }

    let mut rng = rng::rng_for(seed, &[purpose::UTTERANCE]);
    let mut durations = Vec::new();
    let mut frames: Vec<f64> = Vec::new();
    for c in text.chars() {
        let idx = spec.char_index(c).ok_or_else(|| {
            Error::Data(format!(
                "character {:?} is not in the alphabet of language {}",
                c, spec.name
            ))
        })?;
        let dur = ((spec.base_durations[idx] as f64 * speaker.tempo).round() as usize).max(1);
        let feat = spec.feature_frame(idx);
        let mut base = matvec(signal_map, &feat);
        for (b, o) in base.iter_mut().zip(&speaker.offset) {
            *b += o;
        }
        for _ in 0..dur {
            if noise_sd > 0.0 {
                frames.extend(
                    base.iter()
                        .map(|&b| b + noise_sd * rng.sample::<f64, _>(StandardNormal)),
                );
            } else {
                frames.extend_from_slice(&base);
            }
        }
        durations.push(dur);
    }
    let total: usize = durations.iter().sum();
    let signal = Tensor::new(vec![total, d_sig], frames)?;
    Ok(Utterance {
        kind: RecordKind::Paired,
        lang: spec.name.clone(),
        speaker: Some(speaker.name.clone()),
        text: Some(text.to_string()),
        signal: Some(signal),
        reference_durations: Some(durations),
    })
}

// ── pool generation and manifests ───────────────────────────────────────

/// The role an utterance was generated for. Roles partition the pool, so
/// train and test can never share an utterance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolRole {
    Paired,
    Speech,
    Text,
    Test,
    EvalAsr,
}

/// One generated utterance in the on-disk pool. Speech-role entries have
/// their transcript redacted at generation time: nothing downstream of the
/// pool file can read it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub id: String,
    pub lang: String,
    pub role: PoolRole,
    pub speaker: String,
    /// Whether manifests are allowed to reveal the speaker label.
    pub speaker_labeled: bool,
    pub text: Option<String>,
    pub signal_rel: Option<String>,
    pub reference_durations: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoolIndex {
    pub entries: Vec<PoolEntry>,
}

/// Corpus metadata: enough to regenerate or interpret everything. The global
/// signal map is not stored; it is re-derived from the seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub config: CorpusConfig,
    pub specs: Vec<MicroLanguageSpec>,
    pub speakers: Vec<SpeakerSpec>,
}

fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("{}: {}", path.display(), e)))?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&body).map_err(|e| Error::Format(format!("{}: {}", path.display(), e)))
}

impl CorpusMeta {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(self, path)
    }
    pub fn load(path: &Path) -> Result<Self> {
        load_json(path)
    }
}

impl PoolIndex {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(self, path)
    }
    pub fn load(path: &Path) -> Result<Self> {
        load_json(path)
    }
}

pub const META_FILE: &str = "corpus_meta.json";
pub const POOL_FILE: &str = "pool.json";
pub const TEST_MANIFEST: &str = "test.tsv";
pub const EVAL_ASR_MANIFEST: &str = "eval_asr.tsv";

pub fn train_manifest_name(condition: Condition) -> &'static str {
    match condition {
        Condition::Zero => "train_zero.tsv",
        Condition::FifteenMinutes => "train_15m.tsv",
        Condition::Supervised => "train_supervised.tsv",
    }
}

/// Synthesize the full utterance pool under `out_dir` and return its index.
/// Signals are written as files; text-role entries skip synthesis entirely.
pub fn generate_pool(
    cfg: &CorpusConfig,
    specs: &[MicroLanguageSpec],
    speakers: &[SpeakerSpec],
    signal_map: &Tensor,
    out_dir: &Path,
) -> Result<PoolIndex> {
    let roles: &[(PoolRole, usize)] = &[
        (PoolRole::Paired, cfg.paired_per_lang),
        (PoolRole::Speech, cfg.speech_only_per_lang),
        (PoolRole::Text, cfg.text_only_per_lang),
        (PoolRole::Test, cfg.test_per_lang),
        (PoolRole::EvalAsr, cfg.eval_asr_per_lang),
    ];
    let mut entries = Vec::new();
    for (li, spec) in specs.iter().enumerate() {
        let lang_speakers: Vec<&SpeakerSpec> = speakers
            .iter()
            .filter(|s| s.home_language == spec.name)
            .collect();
        if lang_speakers.is_empty() {
            return Err(Error::Data(format!("no speakers for language {}", spec.name)));
        }
        let mut seq: u64 = 0;
        for &(role, count) in roles {
            for j in 0..count {
                let mut text_rng =
                    rng::rng_for(cfg.seed, &[purpose::UTTERANCE, li as u64, seq, 0]);
                let text = gen_text(spec, cfg, &mut text_rng);
                let speaker = lang_speakers[seq as usize % lang_speakers.len()];
                let id = format!("{}_{:05}", spec.name, seq);
                let entry = if role == PoolRole::Text {
                    PoolEntry {
                        id,
                        lang: spec.name.clone(),
                        role,
                        speaker: speaker.name.clone(),
                        speaker_labeled: false,
                        text: Some(text),
                        signal_rel: None,
                        reference_durations: None,
                    }
                } else {
                    let utt_seed = rng::mix(cfg.seed, &[purpose::UTTERANCE, li as u64, seq, 1]);
                    let utt =
                        synth_utterance(&text, spec, speaker, signal_map, cfg.noise_sd, utt_seed)?;
                    let rel = format!("signals/{}/{}.sig", spec.name, entry_file_stem(&utt, seq));
                    files::write_signal(&out_dir.join(&rel), utt.signal.as_ref().unwrap())?;
                    let redact = role == PoolRole::Speech;
                    PoolEntry {
                        id,
                        lang: spec.name.clone(),
                        role,
                        speaker: speaker.name.clone(),
                        speaker_labeled: role == PoolRole::Paired
                            && spec.group == LanguageGroup::A
                            && j % 2 == 0,
                        text: if redact { None } else { Some(text) },
                        signal_rel: Some(rel),
                        reference_durations: if redact {
                            None
                        } else {
                            utt.reference_durations
                        },
                    }
                };
                entries.push(entry);
                seq += 1;
            }
        }
    }
    Ok(PoolIndex { entries })
}

fn entry_file_stem(utt: &Utterance, seq: u64) -> String {
    format!("{}_{:05}", utt.lang, seq)
}

/// The train/test/eval-ASR manifests for one condition. Test and eval-ASR
/// are condition-independent; only train varies.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestSet {
    pub train: Vec<Record>,
    pub test: Vec<Record>,
    pub eval_asr: Vec<Record>,
}

fn paired_record(e: &PoolEntry) -> Result<Record> {
    let text = e.text.clone().ok_or_else(|| {
        Error::Contract(format!("pool entry {} should carry text but does not", e.id))
    })?;
    let signal_path = e.signal_rel.clone().ok_or_else(|| {
        Error::Contract(format!("pool entry {} should carry a signal but does not", e.id))
    })?;
    Ok(Record {
        kind: RecordKind::Paired,
        lang: e.lang.clone(),
        speaker: if e.speaker_labeled {
            Some(e.speaker.clone())
        } else {
            None
        },
        text: Some(text),
        signal_path: Some(signal_path),
    })
}

/// Select manifest rows from the pool for one condition.
///
/// Group A contributes all of its paired, speech-only, and text-only pools.
/// Group B always contributes speech-only and text-only; its paired pool is
/// dropped (zero), rationed (15m budget, taken in pool order), or fully
/// included (supervised). Test and eval-ASR cover every language.
pub fn build_manifests(
    pool: &PoolIndex,
    specs: &[MicroLanguageSpec],
    condition: Condition,
    budget_15m: usize,
) -> Result<ManifestSet> {
    let groups: BTreeMap<&str, LanguageGroup> = specs
        .iter()
        .map(|s| (s.name.as_str(), s.group))
        .collect();

    if condition == Condition::FifteenMinutes {
        let mut avail: BTreeMap<&str, usize> = BTreeMap::new();
        for e in &pool.entries {
            if e.role == PoolRole::Paired && groups.get(e.lang.as_str()) == Some(&LanguageGroup::B)
            {
                *avail.entry(e.lang.as_str()).or_insert(0) += 1;
            }
        }
        for (lang, n) in &avail {
            if budget_15m > *n {
                return Err(Error::InvalidArg(format!(
                    "15m budget of {} exceeds the {} paired utterances pooled for language {}",
                    budget_15m, n, lang
                )));
            }
        }
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut eval_asr = Vec::new();
    let mut taken_15m: BTreeMap<&str, usize> = BTreeMap::new();

    for e in &pool.entries {
        let group = *groups.get(e.lang.as_str()).ok_or_else(|| {
            Error::Data(format!("pool entry {} names unknown language {}", e.id, e.lang))
        })?;
        match e.role {
            PoolRole::Paired => {
                let include = match (group, condition) {
                    (LanguageGroup::A, _) => true,
                    (LanguageGroup::B, Condition::Zero) => false,
                    (LanguageGroup::B, Condition::Supervised) => true,
                    (LanguageGroup::B, Condition::FifteenMinutes) => {
                        let taken = taken_15m.entry(e.lang.as_str()).or_insert(0);
                        if *taken < budget_15m {
                            *taken += 1;
                            true
                        } else {
                            false
                        }
                    }
                };
                if include {
                    train.push(paired_record(e)?);
                }
            }
            PoolRole::Speech => {
                let signal_path = e.signal_rel.clone().ok_or_else(|| {
                    Error::Contract(format!("speech pool entry {} has no signal", e.id))
                })?;
                train.push(Record {
                    kind: RecordKind::SpeechOnly,
                    lang: e.lang.clone(),
                    speaker: None,
                    text: None,
                    signal_path: Some(signal_path),
                });
            }
            PoolRole::Text => {
                let text = e.text.clone().ok_or_else(|| {
                    Error::Contract(format!("text pool entry {} has no text", e.id))
                })?;
                train.push(Record {
                    kind: RecordKind::TextOnly,
                    lang: e.lang.clone(),
                    speaker: None,
                    text: Some(text),
                    signal_path: None,
                });
            }
            PoolRole::Test => test.push(paired_record(e)?),
            PoolRole::EvalAsr => eval_asr.push(paired_record(e)?),
        }
    }
    Ok(ManifestSet { train, test, eval_asr })
}

/// Fail if a training manifest for the zero condition leaks paired group-B
/// data. Names the offending language.
pub fn audit_zero_purity(train: &[Record], specs: &[MicroLanguageSpec]) -> Result<()> {
    let b_langs: Vec<&str> = specs
        .iter()
        .filter(|s| s.group == LanguageGroup::B)
        .map(|s| s.name.as_str())
        .collect();
    for r in train {
        if r.kind == RecordKind::Paired && b_langs.contains(&r.lang.as_str()) {
            return Err(Error::Contract(format!(
                "zero-condition training data contains paired records for group-B \
                 language {}",
                r.lang
            )));
        }
    }
    Ok(())
}

/// Generate the whole corpus under `out_dir`: metadata, pool index, signal
/// files, the three condition train manifests, and the shared test and
/// eval-ASR manifests.
pub fn generate_corpus(cfg: &CorpusConfig, out_dir: &Path) -> Result<()> {
    cfg.validate()?;
    let specs = gen_languages(cfg.n_group_a, cfg.n_group_b, cfg.d_feat, cfg.seed)?;
    let signal_map = global_signal_map(cfg.seed, cfg.d_sig, cfg.d_feat)?;
    let speakers = gen_speakers(&specs, cfg.speakers_per_lang, &signal_map, cfg.seed)?;
    let pool = generate_pool(cfg, &specs, &speakers, &signal_map, out_dir)?;

    let meta = CorpusMeta {
        config: cfg.clone(),
        specs: specs.clone(),
        speakers,
    };
    meta.save(&out_dir.join(META_FILE))?;
    pool.save(&out_dir.join(POOL_FILE))?;

    for condition in [Condition::Zero, Condition::FifteenMinutes, Condition::Supervised] {
        let set = build_manifests(&pool, &specs, condition, cfg.paired_15m_per_lang)?;
        if condition == Condition::Zero {
            audit_zero_purity(&set.train, &specs)?;
            files::write_manifest(&out_dir.join(TEST_MANIFEST), &set.test)?;
            files::write_manifest(&out_dir.join(EVAL_ASR_MANIFEST), &set.eval_asr)?;
        }
        files::write_manifest(&out_dir.join(train_manifest_name(condition)), &set.train)?;
    }
    Ok(())
}

// ── batch mixing ────────────────────────────────────────────────────────

/// Draws homogeneous batches from a manifest: one record kind per batch,
/// kind chosen with probability proportional to its weight, records uniform
/// within the kind. Stateless; every draw is a function of (seed, step).
pub struct BatchMixer {
    records: Vec<Record>,
    paired: Vec<usize>,
    speech: Vec<usize>,
    text: Vec<usize>,
    seed: u64,
}

impl BatchMixer {
    pub fn new(records: Vec<Record>, seed: u64) -> Self {
        let mut paired = Vec::new();
        let mut speech = Vec::new();
        let mut text = Vec::new();
        for (i, r) in records.iter().enumerate() {
            match r.kind {
                RecordKind::Paired => paired.push(i),
                RecordKind::SpeechOnly => speech.push(i),
                RecordKind::TextOnly => text.push(i),
            }
        }
        BatchMixer { records, paired, speech, text, seed }
    }

    fn pool(&self, kind: RecordKind) -> &[usize] {
        match kind {
            RecordKind::Paired => &self.paired,
            RecordKind::SpeechOnly => &self.speech,
            RecordKind::TextOnly => &self.text,
        }
    }

    pub fn pool_len(&self, kind: RecordKind) -> usize {
        self.pool(kind).len()
    }

    pub fn records_of_kind(&self, kind: RecordKind) -> Vec<&Record> {
        self.pool(kind).iter().map(|&i| &self.records[i]).collect()
    }

    /// Draw one batch. `weights` orders as (paired, speech-only, text-only).
    /// Kinds with zero weight or an empty pool are skipped; if nothing is
    /// drawable the mixer errors rather than spinning.
    pub fn sample_batch(
        &self,
        weights: (f64, f64, f64),
        step: u64,
        batch_size: usize,
    ) -> Result<(RecordKind, Vec<&Record>)> {
        let (kind, positions) = self.sample_batch_indices(weights, step, batch_size)?;
        let pool = self.pool(kind);
        let items = positions.iter().map(|&p| &self.records[pool[p]]).collect();
        Ok((kind, items))
    }

    /// Like [`sample_batch`](Self::sample_batch) but returns positions within
    /// the drawn kind's pool (the order `records_of_kind` lists them in), so
    /// callers holding preprocessed per-kind arrays can index those directly.
    pub fn sample_batch_indices(
        &self,
        weights: (f64, f64, f64),
        step: u64,
        batch_size: usize,
    ) -> Result<(RecordKind, Vec<usize>)> {
        let w = [weights.0, weights.1, weights.2];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidArg(format!(
                "kind weights must be finite and non-negative, got {:?}",
                w
            )));
        }
        if batch_size == 0 {
            return Err(Error::InvalidArg("batch_size must be positive".into()));
        }
        let kinds = [RecordKind::Paired, RecordKind::SpeechOnly, RecordKind::TextOnly];
        let candidates: Vec<(RecordKind, f64)> = kinds
            .iter()
            .zip(w)
            .filter(|&(k, wt)| wt > 0.0 && !self.pool(*k).is_empty())
            .map(|(&k, wt)| (k, wt))
            .collect();
        if candidates.is_empty() {
            return Err(Error::Data(
                "no records available for any requested batch kind".into(),
            ));
        }
        let total: f64 = candidates.iter().map(|(_, wt)| wt).sum();
        let mut rng = rng::rng_for(self.seed, &[purpose::KIND_MIX, step]);
        let mut r = rng.gen::<f64>() * total;
        let mut kind = candidates[candidates.len() - 1].0;
        for &(k, wt) in &candidates {
            if r < wt {
                kind = k;
                break;
            }
            r -= wt;
        }
        let pool = self.pool(kind);
        let items = (0..batch_size).map(|_| rng.gen_range(0..pool.len())).collect();
        Ok((kind, items))
    }
}

// ── tests ───────────────────────────────────────────────────────────────
