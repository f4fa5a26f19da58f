//! Minimal-pair corpus: data model, line-delimited manifest I/O, validation
//! and pair-grouped fold assignment.
//!
//! A manifest is a JSON Lines file. Each line is either a phenomenon
//! declaration (`"kind": "phenomenon"`) or a pair record (the default kind):
//!
//! ```text
//! {"kind":"phenomenon","id":"sv_agr","name":"Subject-verb agreement","level":"morphology","suite":"blimp"}
//! {"pair_id":"p1","phenomenon_id":"sv_agr","level":"morphology","suite":"blimp",
//!  "pos":{"utt_id":"p1+","text":"The hospital appreciates Claire."},
//!  "neg":{"utt_id":"p1-","text":"The hospitals appreciates Claire."},
//!  "critical_word":"hospital","critical_word_index":1}
//! ```
//!
//! A pair record that carries `level` and `suite` implicitly declares its
//! phenomenon. A pair record without them must reference a declared one.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::hashing::derive_seed;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinguisticLevel {
    Syntax,
    #[serde(alias = "syntax_semantics_interface", alias = "syn_sem")]
    SynSemInterface,
    Morphology,
    #[serde(alias = "conceptual")]
    Concept,
}

impl LinguisticLevel {
    pub const ALL: [LinguisticLevel; 4] = [
        LinguisticLevel::Syntax,
        LinguisticLevel::SynSemInterface,
        LinguisticLevel::Morphology,
        LinguisticLevel::Concept,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LinguisticLevel::Syntax => "syntax",
            LinguisticLevel::SynSemInterface => "syn_sem_interface",
            LinguisticLevel::Morphology => "morphology",
            LinguisticLevel::Concept => "concept",
        }
    }
}

impl fmt::Display for LinguisticLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LinguisticLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
            .map_err(|_| Error::Argument(format!("unknown linguistic level `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    #[serde(alias = "BLiMP", alias = "BLIMP")]
    Blimp,
    #[serde(alias = "COMPS")]
    Comps,
}

/// Number of grammatical phenomena in a complete corpus.
pub const FULL_BLIMP_PHENOMENA: usize = 67;
/// Number of conceptual phenomena in a complete corpus.
pub const FULL_COMPS_PHENOMENA: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phenomenon {
    pub id: String,
    pub name: String,
    pub level: LinguisticLevel,
    pub suite: Suite,
}

impl Phenomenon {
    /// COMPS phenomena are conceptual; BLiMP phenomena never are.
    pub fn suite_matches_level(&self) -> bool {
        match self.suite {
            Suite::Comps => self.level == LinguisticLevel::Concept,
            Suite::Blimp => self.level != LinguisticLevel::Concept,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub text: String,
    /// 1 = acceptable, 0 = unacceptable.
    pub label: u8,
    pub audio_ref: Option<String>,
    pub duration_ms: Option<u64>,
    /// Pairing key for the random-embedding control: utterances rendered
    /// from the same audio clip share it.
    pub base_audio_id: Option<String>,
    /// Surface form of the critical word in this member, when it differs
    /// from the pair-level form.
    pub critical_word: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinimalPair {
    pub id: String,
    pub pos: Utterance,
    pub neg: Utterance,
    pub phenomenon: String,
    pub critical_word: String,
    pub critical_word_index: usize,
}

impl MinimalPair {
    pub fn members(&self) -> [&Utterance; 2] {
        [&self.pos, &self.neg]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentSpan {
    pub onset_ms: u64,
    pub offset_ms: u64,
}

/// The resolved corpus. Construction checks referential integrity; the
/// softer invariants are reported by [`validate_corpus`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusManifest {
    phenomena: Vec<Phenomenon>,
    pairs: Vec<MinimalPair>,
    alignments: Option<BTreeMap<String, AlignmentSpan>>,
}

impl CorpusManifest {
    /// Builds a manifest, rejecting dangling phenomenon ids, duplicate pair
    /// or utterance ids and pairs whose members carry the wrong labels.
    pub fn new(phenomena: Vec<Phenomenon>, pairs: Vec<MinimalPair>) -> Result<Self> {
        let mut phen_ids = HashSet::new();
        for p in &phenomena {
            if !phen_ids.insert(p.id.as_str()) {
                return Err(Error::Integrity(format!("phenomenon `{}` declared twice", p.id)));
            }
        }
        let mut pair_ids = HashSet::new();
        let mut utt_ids = HashSet::new();
        for pair in &pairs {
            if !phen_ids.contains(pair.phenomenon.as_str()) {
                return Err(Error::Integrity(format!(
                    "pair `{}` references unknown phenomenon `{}`",
                    pair.id, pair.phenomenon
                )));
            }
            if !pair_ids.insert(pair.id.as_str()) {
                return Err(Error::Integrity(format!("duplicate pair id `{}`", pair.id)));
            }
            for u in pair.members() {
                if !utt_ids.insert(u.id.as_str()) {
                    return Err(Error::Integrity(format!("duplicate utterance id `{}`", u.id)));
                }
            }
            if pair.pos.label != 1 || pair.neg.label != 0 {
                return Err(Error::Validation(format!(
                    "pair `{}` must have one acceptable (z=1) and one unacceptable (z=0) member, got {} and {}",
                    pair.id, pair.pos.label, pair.neg.label
                )));
            }
        }
        Ok(Self {
            phenomena,
            pairs,
            alignments: None,
        })
    }

    pub fn with_alignments(mut self, alignments: BTreeMap<String, AlignmentSpan>) -> Self {
        self.alignments = Some(alignments);
        self
    }

    pub fn phenomena(&self) -> &[Phenomenon] {
        &self.phenomena
    }

    pub fn pairs(&self) -> &[MinimalPair] {
        &self.pairs
    }

    pub fn alignments(&self) -> Option<&BTreeMap<String, AlignmentSpan>> {
        self.alignments.as_ref()
    }

    pub fn alignment(&self, utterance_id: &str) -> Option<&AlignmentSpan> {
        self.alignments.as_ref()?.get(utterance_id)
    }

    pub fn phenomenon(&self, id: &str) -> Option<&Phenomenon> {
        self.phenomena.iter().find(|p| p.id == id)
    }

    pub fn pairs_for<'a>(&'a self, phenomenon: &'a str) -> impl Iterator<Item = &'a MinimalPair> + 'a {
        self.pairs.iter().filter(move |p| p.phenomenon == phenomenon)
    }

    pub fn pairs_for_level(&self, level: LinguisticLevel) -> impl Iterator<Item = &MinimalPair> + '_ {
        let ids: HashSet<&str> = self
            .phenomena
            .iter()
            .filter(|p| p.level == level)
            .map(|p| p.id.as_str())
            .collect();
        self.pairs.iter().filter(move |p| ids.contains(p.phenomenon.as_str()))
    }

    pub fn utterances(&self) -> impl Iterator<Item = &Utterance> + '_ {
        self.pairs.iter().flat_map(|p| p.members())
    }

    pub fn num_utterances(&self) -> usize {
        self.pairs.len() * 2
    }

    /// Count of (BLiMP, COMPS) phenomena.
    pub fn suite_counts(&self) -> (usize, usize) {
        let blimp = self.phenomena.iter().filter(|p| p.suite == Suite::Blimp).count();
        (blimp, self.phenomena.len() - blimp)
    }

    /// True for the complete 67 + 4 task inventory.
    pub fn is_full_inventory(&self) -> bool {
        self.suite_counts() == (FULL_BLIMP_PHENOMENA, FULL_COMPS_PHENOMENA)
    }
}

// ---------------------------------------------------------------------------
// Manifest records

#[derive(Debug, Serialize, Deserialize)]
struct PhenomenonRecord {
    kind: String,
    id: String,
    #[serde(default)]
    name: Option<String>,
    level: LinguisticLevel,
    suite: Suite,
}

#[derive(Debug, Serialize, Deserialize)]
struct MemberRecord {
    utt_id: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    audio_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    duration_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    base_audio_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    critical_word: Option<String>,
}

impl MemberRecord {
    fn into_utterance(self, default_label: u8) -> Utterance {
        Utterance {
            id: self.utt_id,
            text: self.text,
            label: self.label.unwrap_or(default_label),
            audio_ref: self.audio_ref,
            duration_ms: self.duration_ms,
            base_audio_id: self.base_audio_id,
            critical_word: self.critical_word,
        }
    }

    fn from_utterance(u: &Utterance) -> Self {
        Self {
            utt_id: u.id.clone(),
            text: u.text.clone(),
            label: Some(u.label),
            audio_ref: u.audio_ref.clone(),
            duration_ms: u.duration_ms,
            base_audio_id: u.base_audio_id.clone(),
            critical_word: u.critical_word.clone(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PairRecord {
    pair_id: String,
    phenomenon_id: String,
    #[serde(default)]
    level: Option<LinguisticLevel>,
    #[serde(default)]
    suite: Option<Suite>,
    pos: MemberRecord,
    neg: MemberRecord,
    critical_word: String,
    critical_word_index: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct AlignmentRecord {
    utterance_id: String,
    #[serde(default)]
    word: Option<String>,
    onset_ms: u64,
    offset_ms: u64,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn check_id(path: &Path, line: usize, id: &str) -> Result<()> {
    if id.is_empty() || id.chars().any(char::is_whitespace) {
        return Err(parse_err(path, line, format!("id `{id}` must be nonempty and contain no whitespace")));
    }
    Ok(())
}

/// Reads a manifest file and resolves it into a [`CorpusManifest`].
pub fn load_manifest(path: impl AsRef<Path>) -> Result<CorpusManifest> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);

    let mut declared: BTreeMap<String, Phenomenon> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut pending: Vec<(usize, PairRecord)> = Vec::new();

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(trimmed).map_err(|e| parse_err(path, lineno, e.to_string()))?;
        let kind = value.get("kind").and_then(|k| k.as_str()).unwrap_or("pair");
        match kind {
            "phenomenon" => {
                let rec: PhenomenonRecord =
                    serde_json::from_value(value).map_err(|e| parse_err(path, lineno, e.to_string()))?;
                check_id(path, lineno, &rec.id)?;
                if declared.contains_key(&rec.id) {
                    return Err(Error::Integrity(format!("phenomenon `{}` declared twice (line {lineno})", rec.id)));
                }
                order.push(rec.id.clone());
                declared.insert(
                    rec.id.clone(),
                    Phenomenon {
                        name: rec.name.unwrap_or_else(|| rec.id.clone()),
                        id: rec.id,
                        level: rec.level,
                        suite: rec.suite,
                    },
                );
            }
            "pair" => {
                let rec: PairRecord =
                    serde_json::from_value(value).map_err(|e| parse_err(path, lineno, e.to_string()))?;
                for id in [&rec.pair_id, &rec.phenomenon_id, &rec.pos.utt_id, &rec.neg.utt_id] {
                    check_id(path, lineno, id)?;
                }
                pending.push((lineno, rec));
            }
            other => return Err(parse_err(path, lineno, format!("unknown record kind `{other}`"))),
        }
    }

    // Implicit declarations from pair records, after explicit ones are known.
    for (lineno, rec) in &pending {
        match (declared.get(&rec.phenomenon_id), rec.level, rec.suite) {
            (Some(p), level, suite) => {
                if level.is_some_and(|l| l != p.level) || suite.is_some_and(|s| s != p.suite) {
                    return Err(Error::Integrity(format!(
                        "line {lineno}: pair `{}` disagrees with the declared level/suite of `{}`",
                        rec.pair_id, rec.phenomenon_id
                    )));
                }
            }
            (None, Some(level), Some(suite)) => {
                order.push(rec.phenomenon_id.clone());
                declared.insert(
                    rec.phenomenon_id.clone(),
                    Phenomenon {
                        id: rec.phenomenon_id.clone(),
                        name: rec.phenomenon_id.clone(),
                        level,
                        suite,
                    },
                );
            }
            (None, _, _) => {
                return Err(Error::Integrity(format!(
                    "line {lineno}: pair `{}` references unknown phenomenon `{}`",
                    rec.pair_id, rec.phenomenon_id
                )));
            }
        }
    }

    let pairs = pending
        .into_iter()
        .map(|(_, rec)| MinimalPair {
            id: rec.pair_id,
            phenomenon: rec.phenomenon_id,
            pos: rec.pos.into_utterance(1),
            neg: rec.neg.into_utterance(0),
            critical_word: rec.critical_word,
            critical_word_index: rec.critical_word_index,
        })
        .collect();
    let phenomena = order
        .into_iter()
        .map(|id| declared.remove(&id).expect("declared above"))
        .collect();
    CorpusManifest::new(phenomena, pairs)
}

/// Writes the manifest in the format read by [`load_manifest`].
pub fn save_manifest(manifest: &CorpusManifest, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for p in &manifest.phenomena {
        let rec = PhenomenonRecord {
            kind: "phenomenon".into(),
            id: p.id.clone(),
            name: Some(p.name.clone()),
            level: p.level,
            suite: p.suite,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    for pair in &manifest.pairs {
        let phen = manifest.phenomenon(&pair.phenomenon).expect("resolved at construction");
        let rec = PairRecord {
            pair_id: pair.id.clone(),
            phenomenon_id: pair.phenomenon.clone(),
            level: Some(phen.level),
            suite: Some(phen.suite),
            pos: MemberRecord::from_utterance(&pair.pos),
            neg: MemberRecord::from_utterance(&pair.neg),
            critical_word: pair.critical_word.clone(),
            critical_word_index: pair.critical_word_index,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads an alignment sidecar: one `{utterance_id, word, onset_ms, offset_ms}`
/// record per line.
pub fn load_alignments(path: impl AsRef<Path>) -> Result<BTreeMap<String, AlignmentSpan>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut spans = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let rec: AlignmentRecord =
            serde_json::from_str(trimmed).map_err(|e| parse_err(path, lineno, e.to_string()))?;
        check_id(path, lineno, &rec.utterance_id)?;
        if rec.offset_ms <= rec.onset_ms {
            return Err(parse_err(
                path,
                lineno,
                format!("offset_ms {} must exceed onset_ms {}", rec.offset_ms, rec.onset_ms),
            ));
        }
        let span = AlignmentSpan {
            onset_ms: rec.onset_ms,
            offset_ms: rec.offset_ms,
        };
        if spans.insert(rec.utterance_id.clone(), span).is_some() {
            return Err(Error::Integrity(format!(
                "line {lineno}: second alignment for utterance `{}`",
                rec.utterance_id
            )));
        }
    }
    Ok(spans)
}

/// Writes an alignment sidecar. `words` supplies the surface form per
/// utterance when known.
pub fn save_alignments(
    spans: &BTreeMap<String, AlignmentSpan>,
    words: &HashMap<String, String>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for (id, span) in spans {
        let rec = AlignmentRecord {
            utterance_id: id.clone(),
            word: words.get(id).cloned(),
            onset_ms: span.onset_ms,
            offset_ms: span.offset_ms,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Validation

/// Whitespace tokens, lowercased, with punctuation stripped. Tokens that are
/// pure punctuation disappear.
pub fn word_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric() || *c == '\'')
                .collect::<String>()
                .trim_matches('\'')
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Levenshtein distance over [`word_tokens`].
pub fn word_edit_distance(a: &str, b: &str) -> usize {
    let a = word_tokens(a);
    let b = word_tokens(b);
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, wa) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, wb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(wa != wb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Violation {
    EditDistance { pair_id: String, distance: usize },
    LabelMismatch { pair_id: String },
    EmptyText { utterance_id: String },
    CriticalIndexOutOfRange { pair_id: String, index: usize },
    SuiteLevelMismatch { phenomenon: String },
    EmptyPhenomenon { phenomenon: String },
    LabelImbalance { phenomenon: String, acceptable: usize, unacceptable: usize },
    MissingAlignment { utterance_id: String },
    AlignmentBeyondDuration { utterance_id: String, offset_ms: u64, duration_ms: u64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EditDistance { pair_id, distance } => {
                write!(f, "pair {pair_id}: word edit distance {distance}, expected 1")
            }
            Violation::LabelMismatch { pair_id } => {
                write!(f, "pair {pair_id}: members are not labelled (1, 0)")
            }
            Violation::EmptyText { utterance_id } => write!(f, "utterance {utterance_id}: empty text"),
            Violation::CriticalIndexOutOfRange { pair_id, index } => {
                write!(f, "pair {pair_id}: critical_word_index {index} outside the sentence")
            }
            Violation::SuiteLevelMismatch { phenomenon } => {
                write!(f, "phenomenon {phenomenon}: suite and level disagree")
            }
            Violation::EmptyPhenomenon { phenomenon } => write!(f, "phenomenon {phenomenon}: no pairs"),
            Violation::LabelImbalance {
                phenomenon,
                acceptable,
                unacceptable,
            } => write!(
                f,
                "phenomenon {phenomenon}: {acceptable} acceptable vs {unacceptable} unacceptable utterances"
            ),
            Violation::MissingAlignment { utterance_id } => {
                write!(f, "utterance {utterance_id}: no critical-word alignment")
            }
            Violation::AlignmentBeyondDuration {
                utterance_id,
                offset_ms,
                duration_ms,
            } => write!(
                f,
                "utterance {utterance_id}: alignment ends at {offset_ms} ms past duration {duration_ms} ms"
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ValidationOptions {
    /// Report utterances without an alignment span (temporal probing).
    pub require_alignments: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Reports every invariant violation in `m`. Violations are data; this
/// never fails.
pub fn validate_corpus(m: &CorpusManifest, opts: ValidationOptions) -> ValidationReport {
    let mut violations = Vec::new();
    let mut counts: BTreeMap<&str, (usize, usize)> =
        m.phenomena.iter().map(|p| (p.id.as_str(), (0, 0))).collect();

    for p in &m.phenomena {
        if !p.suite_matches_level() {
            violations.push(Violation::SuiteLevelMismatch {
                phenomenon: p.id.clone(),
            });
        }
    }

    for pair in &m.pairs {
        if pair.pos.label != 1 || pair.neg.label != 0 {
            violations.push(Violation::LabelMismatch {
                pair_id: pair.id.clone(),
            });
        }
        if let Some(c) = counts.get_mut(pair.phenomenon.as_str()) {
            for u in pair.members() {
                if u.label == 1 {
                    c.0 += 1;
                } else {
                    c.1 += 1;
                }
            }
        }
        let mut texts_ok = true;
        for u in pair.members() {
            if u.text.trim().is_empty() {
                texts_ok = false;
                violations.push(Violation::EmptyText {
                    utterance_id: u.id.clone(),
                });
            }
        }
        if texts_ok {
            let distance = word_edit_distance(&pair.pos.text, &pair.neg.text);
            if distance != 1 {
                violations.push(Violation::EditDistance {
                    pair_id: pair.id.clone(),
                    distance,
                });
            }
            let shortest = pair
                .members()
                .iter()
                .map(|u| u.text.split_whitespace().count())
                .min()
                .unwrap_or(0);
            if pair.critical_word_index >= shortest {
                violations.push(Violation::CriticalIndexOutOfRange {
                    pair_id: pair.id.clone(),
                    index: pair.critical_word_index,
                });
            }
        }
        for u in pair.members() {
            match m.alignment(&u.id) {
                None if opts.require_alignments => violations.push(Violation::MissingAlignment {
                    utterance_id: u.id.clone(),
                }),
                Some(span) => {
                    if let Some(duration_ms) = u.duration_ms {
                        if span.offset_ms > duration_ms {
                            violations.push(Violation::AlignmentBeyondDuration {
                                utterance_id: u.id.clone(),
                                offset_ms: span.offset_ms,
                                duration_ms,
                            });
                        }
                    }
                }
                None => {}
            }
        }
    }

    for (phen, (acceptable, unacceptable)) in counts {
        if acceptable + unacceptable == 0 {
            violations.push(Violation::EmptyPhenomenon {
                phenomenon: phen.to_string(),
            });
        } else if acceptable != unacceptable {
            violations.push(Violation::LabelImbalance {
                phenomenon: phen.to_string(),
                acceptable,
                unacceptable,
            });
        }
    }

    ValidationReport { violations }
}

// ---------------------------------------------------------------------------
// Folds

/// Pair-level k-fold assignment. Both members of a pair always share a fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    k: usize,
    map: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn fold_of(&self, pair_id: &str) -> Option<usize> {
        self.map.get(pair_id).copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> + '_ {
        self.map.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.map.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// Pair ids per fold, each list sorted.
    pub fn folds(&self) -> Vec<Vec<&str>> {
        let mut folds = vec![Vec::new(); self.k];
        for (id, &f) in &self.map {
            folds[f].push(id.as_str());
        }
        folds
    }
}

/// Assigns the pairs of one phenomenon to `k` folds.
pub fn assign_folds(m: &CorpusManifest, phenomenon: &str, k: usize, seed: u64) -> Result<FoldAssignment> {
    if m.phenomenon(phenomenon).is_none() {
        return Err(Error::Lookup(format!("phenomenon `{phenomenon}`")));
    }
    let ids: Vec<&str> = m.pairs_for(phenomenon).map(|p| p.id.as_str()).collect();
    assign_folds_for(&ids, phenomenon, k, seed)
}

/// Assigns an arbitrary set of pair ids to `k` folds. `key` names the task
/// and is mixed into the seed, so each task's split is reproducible on its
/// own. The result does not depend on the order of `pair_ids`.
pub fn assign_folds_for(pair_ids: &[&str], key: &str, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Argument(format!("k must be at least 2, got {k}")));
    }
    let unique: BTreeSet<&str> = pair_ids.iter().copied().collect();
    if unique.len() != pair_ids.len() {
        return Err(Error::Duplicate(format!("pair ids passed to fold assignment for `{key}`")));
    }
    if unique.len() < k {
        return Err(Error::InsufficientData(format!(
            "task `{key}` has {} pairs, fewer than k={k}",
            unique.len()
        )));
    }
    let mut ids: Vec<&str> = unique.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, key));
    ids.shuffle(&mut rng);
    let map = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.to_string(), i % k))
        .collect();
    Ok(FoldAssignment { k, map })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn utt(id: &str, text: &str, label: u8) -> Utterance {
        Utterance {
            id: id.into(),
            text: text.into(),
            label,
            audio_ref: None,
            duration_ms: None,
            base_audio_id: None,
            critical_word: None,
        }
    }

    fn pair(id: &str, phen: &str, pos: &str, neg: &str) -> MinimalPair {
        MinimalPair {
            id: id.into(),
            pos: utt(&format!("{id}+"), pos, 1),
            neg: utt(&format!("{id}-"), neg, 0),
            phenomenon: phen.into(),
            critical_word: "x".into(),
            critical_word_index: 1,
        }
    }

    fn phen(id: &str) -> Phenomenon {
        Phenomenon {
            id: id.into(),
            name: id.into(),
            level: LinguisticLevel::Morphology,
            suite: Suite::Blimp,
        }
    }

    fn manifest_with(n: usize) -> CorpusManifest {
        let pairs = (0..n)
            .map(|i| pair(&format!("p{i}"), "agr", "The hospital appreciates Claire.", "The hospitals appreciates Claire."))
            .collect();
        CorpusManifest::new(vec![phen("agr")], pairs).unwrap()
    }

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    const PAIR_1: &str = r#"{"pair_id":"p1","phenomenon_id":"agr","level":"morphology","suite":"blimp","pos":{"utt_id":"p1a","text":"The hospital appreciates Claire."},"neg":{"utt_id":"p1b","text":"The hospitals appreciates Claire."},"critical_word":"hospital","critical_word_index":1}"#;
    const PAIR_2: &str = r#"{"pair_id":"p2","phenomenon_id":"agr","pos":{"utt_id":"p2a","text":"The dog barks."},"neg":{"utt_id":"p2b","text":"The dog bark."},"critical_word":"barks","critical_word_index":2}"#;

    #[test]
    fn loads_two_pair_file() {
        let f = write_lines(&[PAIR_1, "", PAIR_2]);
        let m = load_manifest(f.path()).unwrap();
        assert_eq!(m.pairs().len(), 2);
        assert_eq!(m.utterances().count(), 4);
        assert_eq!(m.phenomena().len(), 1);
        assert_eq!(m.pairs()[1].pos.label, 1);
        assert_eq!(m.pairs()[1].neg.label, 0);
    }

    #[test]
    fn unknown_phenomenon_is_integrity_error() {
        let f = write_lines(&[PAIR_2]);
        assert!(matches!(load_manifest(f.path()), Err(Error::Integrity(_))));
    }

    #[test]
    fn two_acceptable_members_is_validation_error() {
        let bad = PAIR_1.replace(r#""utt_id":"p1b","#, r#""utt_id":"p1b","label":1,"#);
        let f = write_lines(&[&bad]);
        assert!(matches!(load_manifest(f.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn duplicate_utterance_is_integrity_error() {
        let dup = PAIR_2
            .replace("p2a", "p1a")
            .replace(r#""phenomenon_id":"agr","#, r#""phenomenon_id":"agr","level":"morphology","suite":"blimp","#);
        let f = write_lines(&[PAIR_1, &dup]);
        assert!(matches!(load_manifest(f.path()), Err(Error::Integrity(_))));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_lines(&[PAIR_1, "{not json"]);
        match load_manifest(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn whitespace_in_id_rejected() {
        let bad = PAIR_1.replace(r#""pair_id":"p1""#, r#""pair_id":"p 1""#);
        let f = write_lines(&[&bad]);
        assert!(matches!(load_manifest(f.path()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn conflicting_level_is_integrity_error() {
        let decl = r#"{"kind":"phenomenon","id":"agr","level":"syntax","suite":"blimp"}"#;
        let f = write_lines(&[decl, PAIR_1]);
        assert!(matches!(load_manifest(f.path()), Err(Error::Integrity(_))));
    }

    #[test]
    fn save_then_load_is_identity() {
        let mut m = manifest_with(3);
        m.pairs[0].pos.audio_ref = Some("a/b.wav".into());
        m.pairs[0].pos.duration_ms = Some(2100);
        m.pairs[1].neg.base_audio_id = Some("clip7".into());
        m.pairs[2].neg.critical_word = Some("hospitals".into());
        m.phenomena[0].name = "Subject-verb agreement".into();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_manifest(&m, f.path()).unwrap();
        assert_eq!(load_manifest(f.path()).unwrap(), m);
    }

    #[test]
    fn alignment_sidecar_round_trip_and_errors() {
        let f = write_lines(&[
            r#"{"utterance_id":"p1a","word":"hospital","onset_ms":120,"offset_ms":480}"#,
            r#"{"utterance_id":"p1b","onset_ms":130,"offset_ms":500}"#,
        ]);
        let spans = load_alignments(f.path()).unwrap();
        assert_eq!(spans["p1a"], AlignmentSpan { onset_ms: 120, offset_ms: 480 });
        let out = tempfile::NamedTempFile::new().unwrap();
        save_alignments(&spans, &HashMap::new(), out.path()).unwrap();
        assert_eq!(load_alignments(out.path()).unwrap(), spans);

        let bad = write_lines(&[r#"{"utterance_id":"u","onset_ms":500,"offset_ms":500}"#]);
        assert!(matches!(load_alignments(bad.path()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn hospital_example_is_valid() {
        let m = manifest_with(1);
        assert!(validate_corpus(&m, ValidationOptions::default()).is_valid());
    }

    #[test]
    fn two_word_difference_is_one_violation() {
        let m = CorpusManifest::new(
            vec![phen("agr")],
            vec![pair("p", "agr", "The hospital appreciates Claire.", "The hospitals appreciate Claire.")],
        )
        .unwrap();
        let r = validate_corpus(&m, ValidationOptions::default());
        assert_eq!(
            r.violations,
            vec![Violation::EditDistance {
                pair_id: "p".into(),
                distance: 2
            }]
        );
    }

    #[test]
    fn identical_texts_is_one_violation() {
        let m = CorpusManifest::new(vec![phen("agr")], vec![pair("p", "agr", "The dog barks.", "the dog barks")]).unwrap();
        let r = validate_corpus(&m, ValidationOptions::default());
        assert_eq!(
            r.violations,
            vec![Violation::EditDistance {
                pair_id: "p".into(),
                distance: 0
            }]
        );
    }

    #[test]
    fn published_examples_are_single_locus() {
        let cases = [
            ("Mark figured out that most governments appreciate Steve.", "Mark figured out who most governments appreciate Steve."),
            ("Even Suzanne has really joked around.", "Even Suzanne has ever joked around."),
            ("A kettle is used for boiling.", "A hammer is used for boiling."),
        ];
        for (a, b) in cases {
            assert_eq!(word_edit_distance(a, b), 1, "{a} / {b}");
        }
    }

    #[test]
    fn missing_alignment_reported_only_when_required() {
        let m = manifest_with(1);
        assert!(validate_corpus(&m, ValidationOptions::default()).is_valid());
        let r = validate_corpus(&m, ValidationOptions { require_alignments: true });
        assert_eq!(r.violations.len(), 2);
    }

    #[test]
    fn alignment_past_duration_reported() {
        let mut m = manifest_with(1);
        m.pairs[0].pos.duration_ms = Some(1000);
        let spans = BTreeMap::from([("p0+".to_string(), AlignmentSpan { onset_ms: 900, offset_ms: 1200 })]);
        let m = m.with_alignments(spans);
        let r = validate_corpus(&m, ValidationOptions::default());
        assert!(matches!(r.violations[..], [Violation::AlignmentBeyondDuration { .. }]));
    }

    #[test]
    fn empty_phenomenon_and_suite_mismatch() {
        let mut concept = phen("c");
        concept.suite = Suite::Blimp;
        concept.level = LinguisticLevel::Concept;
        let m = CorpusManifest::new(vec![concept], vec![]).unwrap();
        let r = validate_corpus(&m, ValidationOptions::default());
        assert_eq!(r.violations.len(), 2);
    }

    #[test]
    fn ten_pairs_five_folds_of_two() {
        let m = manifest_with(10);
        let folds = assign_folds(&m, "agr", 5, 42).unwrap();
        assert_eq!(folds.fold_sizes(), vec![2; 5]);
        assert_eq!(folds, assign_folds(&m, "agr", 5, 42).unwrap());
    }

    #[test]
    fn too_few_pairs_for_k() {
        let m = manifest_with(4);
        assert!(matches!(assign_folds(&m, "agr", 5, 0), Err(Error::InsufficientData(_))));
        assert!(matches!(assign_folds(&m, "agr", 1, 0), Err(Error::Argument(_))));
        assert!(matches!(assign_folds(&m, "nope", 2, 0), Err(Error::Lookup(_))));
    }

    #[test]
    fn folds_independent_of_input_order() {
        let a = assign_folds_for(&["a", "b", "c", "d", "e", "f"], "t", 3, 9).unwrap();
        let b = assign_folds_for(&["f", "e", "d", "c", "b", "a"], "t", 3, 9).unwrap();
        assert_eq!(a, b);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn folds_partition_and_balance(n in 2usize..120, k in 2usize..10, seed: u64) {
                prop_assume!(n >= k);
                let ids: Vec<String> = (0..n).map(|i| format!("pair{i}")).collect();
                let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
                let folds = assign_folds_for(&refs, "task", k, seed).unwrap();
                prop_assert_eq!(folds.len(), n);
                let sizes = folds.fold_sizes();
                let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
                prop_assert!(hi - lo <= 1);
                let union: BTreeSet<&str> = folds.folds().into_iter().flatten().collect();
                prop_assert_eq!(union.len(), n);
            }

            #[test]
            fn edit_distance_is_symmetric(a in "[a-c ]{0,12}", b in "[a-c ]{0,12}") {
                prop_assert_eq!(word_edit_distance(&a, &b), word_edit_distance(&b, &a));
            }
        }
    }
}
