//! Byte-level text processing: tokenization to UTF-8 bytes, span masking
//! for masked-prediction training, character error rate, and the id
//! registry mapping language/speaker names to dense embedding indices.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Token id range: 256 byte values, then one reserved mask id.
pub const BYTE_VOCAB: usize = 256;
/// Reserved id marking a masked-out position.
pub const MASK_ID: u16 = 256;
/// Total token vocabulary including the mask id.
pub const TOKEN_VOCAB: usize = 257;

/// A tokenized utterance: UTF-8 bytes as ids in [0, 255].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ByteSeq(pub Vec<u16>);

impl ByteSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[u16] {
        &self.0
    }
}

/// A byte sequence with some positions replaced by the mask id, plus the
/// original ids at those positions (the prediction targets).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedByteSeq {
    /// Sequence with `MASK_ID` at masked positions.
    pub masked: Vec<u16>,
    /// Indices into `masked` that were replaced.
    pub positions: Vec<usize>,
    /// Original byte ids at `positions`, in the same order.
    pub targets: Vec<u16>,
}

/// Convert text to byte ids. Empty text is an error: zero-length label
/// sequences are never valid training targets here.
pub fn tokenize(text: &str) -> Result<ByteSeq> {
    if text.is_empty() {
        return Err(Error::InvalidArg("tokenize: empty text".into()));
    }
    Ok(ByteSeq(text.bytes().map(u16::from).collect()))
}

/// Inverse of `tokenize`. Errors if any id is not a byte or the bytes are
/// not valid UTF-8.
pub fn detokenize(seq: &ByteSeq) -> Result<String> {
    let mut bytes = Vec::with_capacity(seq.len());
    for &id in seq.ids() {
        if id >= BYTE_VOCAB as u16 {
            return Err(Error::InvalidArg(format!(
                "detokenize: id {id} is not a byte (mask id in output?)"
            )));
        }
        bytes.push(id as u8);
    }
    String::from_utf8(bytes)
        .map_err(|e| Error::Format(format!("detokenize: invalid utf-8: {e}")))
}

/// `detokenize` for recognizer output: byte-level models can emit fragments
/// that are not valid UTF-8, and those decode to U+FFFD so they count as
/// plain substitution errors downstream instead of aborting a report.
pub fn detokenize_lossy(seq: &ByteSeq) -> Result<String> {
    let mut bytes = Vec::with_capacity(seq.len());
    for &id in seq.ids() {
        if id >= BYTE_VOCAB as u16 {
            return Err(Error::InvalidArg(format!(
                "detokenize_lossy: id {id} is not a byte (mask id in output?)"
            )));
        }
        bytes.push(id as u8);
    }
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

/// Span-mask selection over `n` positions, shared by text masking and
/// signal-frame masking. Span starts are drawn without replacement from a
/// seeded shuffle of all positions; each start masks `span_len` consecutive
/// positions (clipped at the end, overlaps merge). Starts are consumed until
/// the masked fraction first reaches `ratio`, so at least one full span is
/// always masked.
pub fn span_mask_flags(
    n: usize,
    span_len: usize,
    ratio: f64,
    rng: &mut impl Rng,
) -> Result<Vec<bool>> {
    if n == 0 {
        return Err(Error::InvalidArg("span_mask_flags: empty sequence".into()));
    }
    if span_len == 0 {
        return Err(Error::InvalidArg("span_mask_flags: span_len must be ≥ 1".into()));
    }
    if !(0.0..=1.0).contains(&ratio) || ratio == 0.0 {
        return Err(Error::InvalidArg(format!(
            "span_mask_flags: ratio must be in (0, 1], got {ratio}"
        )));
    }
    let mut starts: Vec<usize> = (0..n).collect();
    starts.shuffle(rng);
    let mut is_masked = vec![false; n];
    let mut masked_count = 0usize;
    for &s in &starts {
        if masked_count as f64 / n as f64 >= ratio {
            break;
        }
        for p in s..(s + span_len).min(n) {
            if !is_masked[p] {
                is_masked[p] = true;
                masked_count += 1;
            }
        }
    }
    Ok(is_masked)
}

/// Span masking of a byte sequence for masked-prediction training.
pub fn mask_spans(
    seq: &ByteSeq,
    span_len: usize,
    ratio: f64,
    rng: &mut impl Rng,
) -> Result<MaskedByteSeq> {
    let is_masked = span_mask_flags(seq.len(), span_len, ratio, rng)?;
    let masked_count = is_masked.iter().filter(|&&f| f).count();
    let mut masked = seq.ids().to_vec();
    let mut positions = Vec::with_capacity(masked_count);
    let mut targets = Vec::with_capacity(masked_count);
    for (p, &flag) in is_masked.iter().enumerate() {
        if flag {
            positions.push(p);
            targets.push(masked[p]);
            masked[p] = MASK_ID;
        }
    }
    Ok(MaskedByteSeq { masked, positions, targets })
}

/// Character error rate: Levenshtein distance over Unicode scalar values
/// divided by the reference length in characters. An empty reference is an
/// error (the rate would be undefined).
pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hypothesis.chars().collect();
    if r.is_empty() {
        return Err(Error::InvalidArg("cer: empty reference".into()));
    }
    Ok(levenshtein(&r, &h) as f64 / r.len() as f64)
}

/// Classic two-row dynamic program for edit distance.
fn levenshtein(a: &[char], b: &[char]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Maps language and speaker names to dense ids for embedding lookup.
/// Id 0 in both tables is reserved for "unknown"; names the registry has
/// never seen resolve to it instead of failing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdRegistry {
    languages: Vec<String>,
    speakers: Vec<String>,
}

/// Dense id for the unknown/unconditioned entry of both tables.
pub const UNKNOWN_ID: usize = 0;

impl IdRegistry {
    /// Build from the names present in training data. Order-preserving
    /// first-seen assignment; duplicates collapse.
    pub fn build(languages: &[String], speakers: &[String]) -> Self {
        fn dedup(names: &[String]) -> Vec<String> {
            let mut seen = Vec::new();
            for n in names {
                if !seen.contains(n) {
                    seen.push(n.clone());
                }
            }
            seen
        }
        IdRegistry { languages: dedup(languages), speakers: dedup(speakers) }
    }

    /// Number of language embedding rows (unknown + known).
    pub fn language_rows(&self) -> usize {
        self.languages.len() + 1
    }

    /// Number of speaker embedding rows (unknown + known).
    pub fn speaker_rows(&self) -> usize {
        self.speakers.len() + 1
    }

    /// Dense id for a language name; unseen names map to `UNKNOWN_ID`.
    pub fn language_id(&self, name: &str) -> usize {
        self.languages.iter().position(|n| n == name).map_or(UNKNOWN_ID, |i| i + 1)
    }

    /// Dense id for a speaker name; unseen names map to `UNKNOWN_ID`.
    pub fn speaker_id(&self, name: &str) -> usize {
        self.speakers.iter().position(|n| n == name).map_or(UNKNOWN_ID, |i| i + 1)
    }

    pub fn known_languages(&self) -> &[String] {
        &self.languages
    }

    pub fn known_speakers(&self) -> &[String] {
        &self.speakers
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use proptest::prelude::*;

    #[test]
    fn tokenize_is_utf8_bytes() {
        let seq = tokenize("hi✓").unwrap();
        // '✓' is U+2713 = e2 9c 93 in UTF-8.
        assert_eq!(seq.ids(), &[104, 105, 0xe2, 0x9c, 0x93]);
    }

    #[test]
    fn tokenize_rejects_empty_text() {
        assert!(tokenize("").is_err());
    }

    #[test]
    fn detokenize_rejects_mask_id_and_bad_utf8() {
        assert!(detokenize(&ByteSeq(vec![MASK_ID])).is_err());
        assert!(detokenize(&ByteSeq(vec![0xff, 0xfe])).is_err());
    }

    #[test]
    fn lossy_detokenize_replaces_bad_utf8_but_still_rejects_mask_ids() {
        assert!(detokenize_lossy(&ByteSeq(vec![MASK_ID])).is_err());
        let s = detokenize_lossy(&ByteSeq(vec![b'a' as u16, 0xff, b'b' as u16])).unwrap();
        assert_eq!(s, "a\u{fffd}b");
        let clean = tokenize("αβ γ").unwrap();
        assert_eq!(detokenize_lossy(&clean).unwrap(), "αβ γ");
    }

    #[test]
    fn mask_spans_masks_at_least_one_and_merges_overlaps() {
        let seq = tokenize("abcdefghij").unwrap();
        let mut rng = rng_for(1, &[0]);
        let m = mask_spans(&seq, 3, 0.05, &mut rng).unwrap();
        // Tiny ratio still masks a full first span (3 of 10 > 0.05).
        assert_eq!(m.positions.len(), 3);
        for (&p, &t) in m.positions.iter().zip(&m.targets) {
            assert_eq!(m.masked[p], MASK_ID);
            assert_eq!(t, seq.ids()[p]);
        }
        // Unmasked positions carry the original bytes.
        for (p, &id) in m.masked.iter().enumerate() {
            if !m.positions.contains(&p) {
                assert_eq!(id, seq.ids()[p]);
            }
        }
    }

    #[test]
    fn mask_spans_clips_spans_at_the_end() {
        // Length 4, span 20: whatever start is drawn, the span clips to
        // the sequence end and the whole sequence is ≤ 4 masked positions.
        let seq = tokenize("abcd").unwrap();
        let mut rng = rng_for(2, &[0]);
        let m = mask_spans(&seq, 20, 0.99, &mut rng).unwrap();
        assert!(m.positions.len() <= 4);
        assert!(!m.positions.is_empty());
    }

    #[test]
    fn mask_spans_validates_arguments() {
        let seq = tokenize("abc").unwrap();
        let mut rng = rng_for(3, &[0]);
        assert!(mask_spans(&seq, 0, 0.15, &mut rng).is_err());
        assert!(mask_spans(&seq, 3, 0.0, &mut rng).is_err());
        assert!(mask_spans(&seq, 3, 1.5, &mut rng).is_err());
        assert!(mask_spans(&ByteSeq(vec![]), 3, 0.15, &mut rng).is_err());
    }

    #[test]
    fn cer_known_values() {
        assert_eq!(cer("abc", "abc").unwrap(), 0.0);
        // one substitution out of three characters
        assert!((cer("abc", "axc").unwrap() - 1.0 / 3.0).abs() < 1e-15);
        // hypothesis empty → all deletions
        assert_eq!(cer("abc", "").unwrap(), 1.0);
        // insertions can push the rate above 1
        assert_eq!(cer("a", "xyz").unwrap(), 3.0);
        assert!(cer("", "abc").is_err());
    }

    #[test]
    fn cer_counts_characters_not_bytes() {
        // Multi-byte characters count once each.
        assert_eq!(cer("✓✓", "✓✓").unwrap(), 0.0);
        assert!((cer("✓✓", "✓x").unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn registry_assigns_dense_ids_and_reserves_unknown() {
        let reg = IdRegistry::build(
            &["la".into(), "lb".into(), "la".into()],
            &["s1".into()],
        );
        assert_eq!(reg.language_rows(), 3); // unknown + la + lb
        assert_eq!(reg.speaker_rows(), 2);
        assert_eq!(reg.language_id("la"), 1);
        assert_eq!(reg.language_id("lb"), 2);
        assert_eq!(reg.language_id("never-seen"), UNKNOWN_ID);
        assert_eq!(reg.speaker_id("s1"), 1);
        assert_eq!(reg.speaker_id("s2"), UNKNOWN_ID);
    }

    proptest! {
        /// Tokenize/detokenize is the identity on any non-empty string.
        #[test]
        fn roundtrip_any_text(s in ".{1,40}") {
            let seq = tokenize(&s).unwrap();
            prop_assert_eq!(detokenize(&seq).unwrap(), s);
        }

        /// Distance properties: symmetry, identity, and the triangle-free
        /// sanity bound dist ≤ max(len(a), len(b)) for same-alphabet text.
        #[test]
        fn edit_distance_is_symmetric(a in "[ab]{0,12}", b in "[ab]{0,12}") {
            let av: Vec<char> = a.chars().collect();
            let bv: Vec<char> = b.chars().collect();
            prop_assert_eq!(levenshtein(&av, &bv), levenshtein(&bv, &av));
            prop_assert_eq!(levenshtein(&av, &av), 0);
            prop_assert!(levenshtein(&av, &bv) <= av.len().max(bv.len()));
        }

        /// Masked fraction is at least the requested ratio (or the whole
        /// sequence), and targets always store the original bytes.
        #[test]
        fn masking_reaches_requested_ratio(s in "[a-z]{5,60}", seed in 0u64..50) {
            let seq = tokenize(&s).unwrap();
            let mut rng = rng_for(seed, &[7]);
            let m = mask_spans(&seq, 3, 0.15, &mut rng).unwrap();
            let frac = m.positions.len() as f64 / seq.len() as f64;
            prop_assert!(frac >= 0.15_f64.min(1.0) || m.positions.len() == seq.len());
            for (&p, &t) in m.positions.iter().zip(&m.targets) {
                prop_assert_eq!(t, seq.ids()[p]);
                prop_assert_eq!(m.masked[p], MASK_ID);
            }
        }
    }
}
