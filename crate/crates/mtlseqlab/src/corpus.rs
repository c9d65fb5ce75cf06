//! Data ingestion: CoNLL-style files, BIO validation, tag sets, vocabularies,
//! OOV partitioning, and the synthetic desk-scale corpus generator.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::multitask::TaskId;
use crate::numerics::Rng;

/// One token sequence with up to two parallel gold tag streams.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub id: usize,
    pub tokens: Vec<String>,
    pub mer_tags: Option<Vec<String>>,
    pub men_tags: Option<Vec<String>>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The tag stream for one task, if present.
    pub fn tags(&self, task: TaskId) -> Option<&[String]> {
        match task {
            TaskId::Mer => self.mer_tags.as_deref(),
            TaskId::Men => self.men_tags.as_deref(),
        }
    }
}

/// Structural reading of one BIO tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TagKind<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

/// Parse a tag string; returns `None` for anything that is not `O`, `B-x`,
/// or `I-x` with a nonempty payload.
pub fn tag_kind(tag: &str) -> Option<TagKind<'_>> {
    if tag == "O" {
        return Some(TagKind::Outside);
    }
    match tag.split_once('-') {
        Some(("B", payload)) if !payload.is_empty() => Some(TagKind::Begin(payload)),
        Some(("I", payload)) if !payload.is_empty() => Some(TagKind::Inside(payload)),
        _ => None,
    }
}

/// Check the no-orphan-I rule: every `I-x` must directly follow `B-x` or
/// `I-x`. Reports the first offending token (1-based).
pub fn validate_bio<S: AsRef<str>>(tags: &[S]) -> Result<()> {
    let mut prev: Option<String> = None;
    for (i, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        match tag_kind(tag) {
            Some(TagKind::Inside(payload)) => {
                let legal = matches!(&prev, Some(p) if p == payload);
                if !legal {
                    return Err(Error::BioViolation {
                        token: i + 1,
                        msg: format!("orphan {tag} (no preceding B-{payload}/I-{payload})"),
                    });
                }
                prev = Some(payload.to_string());
            }
            Some(TagKind::Begin(payload)) => prev = Some(payload.to_string()),
            Some(TagKind::Outside) => prev = None,
            None => {
                return Err(Error::BioViolation {
                    token: i + 1,
                    msg: format!("malformed tag `{tag}`"),
                })
            }
        }
    }
    Ok(())
}

/// Rewrite orphan `I-x` tags to `B-x`, left to right, so the result passes
/// [`validate_bio`]. Malformed tags are left untouched.
pub fn repair_bio(tags: &mut [String]) {
    let mut prev: Option<String> = None;
    for tag in tags.iter_mut() {
        match tag_kind(tag) {
            Some(TagKind::Inside(payload)) => {
                let legal = matches!(&prev, Some(p) if p == payload);
                let payload = payload.to_string();
                if !legal {
                    *tag = format!("B-{payload}");
                }
                prev = Some(payload);
            }
            Some(TagKind::Begin(payload)) => prev = Some(payload.to_string()),
            _ => prev = None,
        }
    }
}

/// Closed label vocabulary of one task, with `O` fixed at index 0 and the
/// remaining labels sorted; every `B-x` is guaranteed a matching `I-x`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagSet {
    pub task: TaskId,
    labels: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl TagSet {
    pub fn from_labels<I, S>(task: TaskId, labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set = BTreeSet::new();
        for label in labels {
            let label = label.as_ref();
            match tag_kind(label) {
                Some(TagKind::Outside) => {}
                Some(_) => {
                    set.insert(label.to_string());
                }
                None => {
                    return Err(Error::TagNotInSet {
                        label: label.to_string(),
                        task: task.name().to_string(),
                    })
                }
            }
        }
        // close the set: every B-x gets its I-x (and vice versa, so spans of
        // any decoded length are expressible)
        for label in set.clone() {
            let (_, payload) = label.split_once('-').expect("validated above");
            set.insert(format!("B-{payload}"));
            set.insert(format!("I-{payload}"));
        }
        let mut labels = vec!["O".to_string()];
        labels.extend(set);
        let index = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        Ok(Self {
            task,
            labels,
            index,
        })
    }

    pub fn id(&self, label: &str) -> Result<usize> {
        self.index.get(label).copied().ok_or_else(|| Error::TagNotInSet {
            label: label.to_string(),
            task: self.task.name().to_string(),
        })
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn kind_of(&self, id: usize) -> TagKind<'_> {
        tag_kind(&self.labels[id]).expect("tag sets hold only well-formed labels")
    }

    /// Map a tag sequence to ids.
    pub fn encode<S: AsRef<str>>(&self, tags: &[S]) -> Result<Vec<usize>> {
        tags.iter().map(|t| self.id(t.as_ref())).collect()
    }
}

fn parse_err(source: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: source.to_string(),
        line,
        msg: msg.into(),
    }
}

/// Parse CoNLL-style text: one token per line with 1–3 tab-separated columns
/// (`token[\tMER tag][\tMEN tag]`), blank line between sentences, `#` comment
/// lines, LF or CRLF. With `repair` set, orphan `I-x` tags are rewritten to
/// `B-x` instead of being rejected.
pub fn parse_conll_str(text: &str, source: &str, repair: bool) -> Result<Vec<Sentence>> {
    let mut sentences = Vec::new();
    // (line number, columns) for the sentence being accumulated
    let mut rows: Vec<(usize, Vec<String>)> = Vec::new();

    let finish = |rows: &mut Vec<(usize, Vec<String>)>,
                      sentences: &mut Vec<Sentence>|
     -> Result<()> {
        if rows.is_empty() {
            return Ok(());
        }
        let width = rows[0].1.len();
        for (line, cols) in rows.iter() {
            if cols.len() != width {
                return Err(parse_err(
                    source,
                    *line,
                    format!("expected {width} columns as earlier in the sentence, got {}", cols.len()),
                ));
            }
        }
        let tokens: Vec<String> = rows.iter().map(|(_, c)| c[0].clone()).collect();
        let mut streams = Vec::new();
        for col in 1..width {
            let mut tags: Vec<String> = rows.iter().map(|(_, c)| c[col].clone()).collect();
            for ((line, _), tag) in rows.iter().zip(&tags) {
                if tag_kind(tag).is_none() {
                    return Err(parse_err(source, *line, format!("malformed tag `{tag}`")));
                }
            }
            if repair {
                repair_bio(&mut tags);
            } else if let Err(Error::BioViolation { token, msg }) = validate_bio(&tags) {
                return Err(parse_err(
                    source,
                    rows[token - 1].0,
                    format!("{msg} (token {token})"),
                ));
            }
            streams.push(tags);
        }
        let mut streams = streams.into_iter();
        sentences.push(Sentence {
            id: sentences.len(),
            tokens,
            mer_tags: streams.next(),
            men_tags: streams.next(),
        });
        rows.clear();
        Ok(())
    };

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.starts_with('#') {
            continue;
        }
        if line.trim().is_empty() {
            finish(&mut rows, &mut sentences)?;
            continue;
        }
        let cols: Vec<String> = line.split('\t').map(str::to_string).collect();
        if cols.len() > 3 {
            return Err(parse_err(
                source,
                line_no,
                format!("expected 1-3 tab-separated columns, got {}", cols.len()),
            ));
        }
        if cols[0].is_empty() {
            return Err(parse_err(source, line_no, "empty token"));
        }
        rows.push((line_no, cols));
    }
    finish(&mut rows, &mut sentences)?;
    Ok(sentences)
}

/// [`parse_conll_str`] over a file.
pub fn parse_conll(path: impl AsRef<Path>, repair: bool) -> Result<Vec<Sentence>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_conll_str(&text, &path.display().to_string(), repair)
}

/// Render sentences in the format accepted by [`parse_conll_str`] (LF only).
pub fn write_conll_string(sentences: &[Sentence]) -> String {
    let mut out = String::new();
    for (i, s) in sentences.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for t in 0..s.len() {
            out.push_str(&s.tokens[t]);
            for stream in [&s.mer_tags, &s.men_tags].into_iter().flatten() {
                let _ = write!(out, "\t{}", stream[t]);
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_conll(path: impl AsRef<Path>, sentences: &[Sentence]) -> Result<()> {
    fs::write(path, write_conll_string(sentences))?;
    Ok(())
}

/// Word vocabulary with reserved `PAD` (0) and `UNK` (1) rows. Lookup is
/// exact match, then lowercase, then `UNK`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordVocab {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

pub const PAD_TOKEN: &str = "<PAD>";
pub const UNK_TOKEN: &str = "<UNK>";

impl WordVocab {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;

    /// Build from an ordered token list (without the reserved entries).
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut words = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut index: BTreeMap<String, usize> = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        for t in tokens {
            let t = t.as_ref();
            if !index.contains_key(t) {
                index.insert(t.to_string(), words.len());
                words.push(t.to_string());
            }
        }
        Self { words, index }
    }

    pub fn id(&self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        if let Some(&i) = self.index.get(&token.to_lowercase()) {
            return i;
        }
        Self::UNK
    }

    pub fn contains_exact(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// The non-reserved tokens as a set (for OOV partitioning).
    pub fn word_set(&self) -> BTreeSet<String> {
        self.words[2..].iter().cloned().collect()
    }
}

/// Character vocabulary with reserved `PAD` (0) and `UNK` (1) entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharVocab {
    chars: Vec<char>,
    index: BTreeMap<char, usize>,
}

impl CharVocab {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;

    pub fn from_chars<I: IntoIterator<Item = char>>(chars: I) -> Self {
        // '\0' and '\x01' stand in for PAD and UNK; they never occur in text
        let mut list = vec!['\0', '\x01'];
        let mut index: BTreeMap<char, usize> =
            list.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        for c in chars {
            if !index.contains_key(&c) {
                index.insert(c, list.len());
                list.push(c);
            }
        }
        Self { chars: list, index }
    }

    pub fn id(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(Self::UNK)
    }

    /// Character ids of a token.
    pub fn word_ids(&self, token: &str) -> Vec<usize> {
        token.chars().map(|c| self.id(c)).collect()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }
}

/// Everything derived from the training split.
#[derive(Debug, Clone)]
pub struct Vocabularies {
    pub words: WordVocab,
    pub chars: CharVocab,
    pub mer_tags: TagSet,
    pub men_tags: TagSet,
}

impl Vocabularies {
    pub fn tags(&self, task: TaskId) -> &TagSet {
        match task {
            TaskId::Mer => &self.mer_tags,
            TaskId::Men => &self.men_tags,
        }
    }
}

fn by_freq_then_lex<T: Ord + Clone>(counts: &BTreeMap<T, usize>) -> Vec<T> {
    let mut items: Vec<(&T, usize)> = counts.iter().map(|(k, &v)| (k, v)).collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    items.into_iter().map(|(k, _)| k.clone()).collect()
}

/// Build word/char vocabularies (frequency-descending, then lexicographic)
/// and per-task tag sets from the training split. Words rarer than
/// `min_count` fold to `UNK`; characters are always kept.
pub fn build_vocabularies(train: &[Sentence], min_count: usize) -> Result<Vocabularies> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("build_vocabularies needs a nonempty training set"));
    }
    let mut word_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut char_counts: BTreeMap<char, usize> = BTreeMap::new();
    let mut mer_labels: BTreeSet<String> = BTreeSet::new();
    let mut men_labels: BTreeSet<String> = BTreeSet::new();
    for s in train {
        for t in &s.tokens {
            *word_counts.entry(t.clone()).or_insert(0) += 1;
            for c in t.chars() {
                *char_counts.entry(c).or_insert(0) += 1;
            }
        }
        if let Some(tags) = &s.mer_tags {
            mer_labels.extend(tags.iter().cloned());
        }
        if let Some(tags) = &s.men_tags {
            men_labels.extend(tags.iter().cloned());
        }
    }
    let kept = by_freq_then_lex(&word_counts)
        .into_iter()
        .filter(|w| word_counts[w] >= min_count.max(1));
    Ok(Vocabularies {
        words: WordVocab::from_tokens(kept),
        chars: CharVocab::from_chars(by_freq_then_lex(&char_counts)),
        mer_tags: TagSet::from_labels(TaskId::Mer, &mer_labels)?,
        men_tags: TagSet::from_labels(TaskId::Men, &men_labels)?,
    })
}

/// Word- or entity-level out-of-vocabulary class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum OovClass {
    /// In both the training and the embedding vocabulary.
    Iv,
    /// Out of the training vocabulary, in the embedding vocabulary.
    Ootv,
    /// In the training vocabulary, out of the embedding vocabulary.
    Ooev,
    /// Out of both vocabularies.
    Oobv,
}

impl OovClass {
    pub const ALL: [OovClass; 4] = [OovClass::Iv, OovClass::Ootv, OovClass::Ooev, OovClass::Oobv];

    pub fn name(self) -> &'static str {
        match self {
            OovClass::Iv => "IV",
            OovClass::Ootv => "OOTV",
            OovClass::Ooev => "OOEV",
            OovClass::Oobv => "OOBV",
        }
    }
}

/// Class of a single word given the two vocabularies (exact membership).
pub fn word_class(
    word: &str,
    train_words: &BTreeSet<String>,
    embedding_words: &BTreeSet<String>,
) -> OovClass {
    match (train_words.contains(word), embedding_words.contains(word)) {
        (true, true) => OovClass::Iv,
        (false, true) => OovClass::Ootv,
        (true, false) => OovClass::Ooev,
        (false, false) => OovClass::Oobv,
    }
}

/// Entity class: OOBV if at least one word is out of training *and* at least
/// one word is out of embedding (not necessarily the same word); else OOTV if
/// any word is out of training; else OOEV if any word is out of embedding;
/// else IV.
pub fn entity_class<S: AsRef<str>>(
    words: &[S],
    train_words: &BTreeSet<String>,
    embedding_words: &BTreeSet<String>,
) -> OovClass {
    let any_out_train = words.iter().any(|w| !train_words.contains(w.as_ref()));
    let any_out_emb = words.iter().any(|w| !embedding_words.contains(w.as_ref()));
    match (any_out_train, any_out_emb) {
        (true, true) => OovClass::Oobv,
        (true, false) => OovClass::Ootv,
        (false, true) => OovClass::Ooev,
        (false, false) => OovClass::Iv,
    }
}

/// Per-gold-entity OOV classes, keyed by (sentence id, start, end).
#[derive(Debug, Clone, Default)]
pub struct OovPartition {
    classes: BTreeMap<(usize, usize, usize), OovClass>,
}

impl OovPartition {
    pub fn class_of(&self, sentence: usize, start: usize, end: usize) -> Option<OovClass> {
        self.classes.get(&(sentence, start, end)).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize, usize), OovClass)> + '_ {
        self.classes.iter().map(|(&k, &v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Classify every gold entity of `task` in `sentences`. Sentence ids index
/// into the slice.
pub fn partition_oov(
    sentences: &[Sentence],
    task: TaskId,
    train_words: &BTreeSet<String>,
    embedding_words: &BTreeSet<String>,
) -> Result<OovPartition> {
    let mut classes = BTreeMap::new();
    for s in sentences {
        let Some(tags) = s.tags(task) else { continue };
        for (start, end, _) in crate::evaluation::decode_entity_runs(tags)? {
            let words = &s.tokens[start..end];
            classes.insert(
                (s.id, start, end),
                entity_class(words, train_words, embedding_words),
            );
        }
    }
    Ok(OovPartition { classes })
}

/// One mention surface form with its gold entity type and concept id.
#[derive(Debug, Clone)]
pub struct InventoryEntry {
    pub surface: Vec<String>,
    pub entity_type: String,
    pub concept: String,
    /// Excluded from training sentences so test splits contain unseen
    /// surface forms of known concepts.
    pub held_out: bool,
}

impl InventoryEntry {
    fn new(surface: &str, entity_type: &str, concept: &str, held_out: bool) -> Self {
        Self {
            surface: surface.split(' ').map(str::to_string).collect(),
            entity_type: entity_type.to_string(),
            concept: concept.to_string(),
            held_out,
        }
    }
}

/// Synonym-grouped mention inventory: several surface forms per concept,
/// most sharing character stems, so the normalization label is predictable
/// from the surface and the recognition type from the concept.
pub fn default_inventory() -> Vec<InventoryEntry> {
    let e = InventoryEntry::new;
    vec![
        e("migraine", "DISEASE", "D001", false),
        e("migraines", "DISEASE", "D001", false),
        e("migraine attack", "DISEASE", "D001", true),
        e("hypertension", "DISEASE", "D002", false),
        e("hypertension crisis", "DISEASE", "D002", true),
        e("hypertensive disease", "DISEASE", "D002", true),
        e("diabetes", "DISEASE", "D003", false),
        e("diabetes mellitus", "DISEASE", "D003", false),
        e("diabetes flare", "DISEASE", "D003", true),
        e("asthma", "DISEASE", "D004", false),
        e("asthma attack", "DISEASE", "D004", true),
        e("asthmatic condition", "DISEASE", "D004", true),
        e("zomig", "CHEMICAL", "C101", false),
        e("zolmitriptan", "CHEMICAL", "C101", false),
        e("zomigon", "CHEMICAL", "C101", true),
        e("metformin", "CHEMICAL", "C102", false),
        e("glucophage", "CHEMICAL", "C102", true),
        e("salbutamol", "CHEMICAL", "C103", false),
        e("albuterol", "CHEMICAL", "C103", false),
        e("ventolin", "CHEMICAL", "C103", true),
        e("valproate", "CHEMICAL", "C104", false),
        e("valproic acid", "CHEMICAL", "C104", false),
        e("depakote", "CHEMICAL", "C104", true),
    ]
}

/// Sizes, noise, and seed for [`gen_synthetic`].
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    /// Probability that a mention's MEN concept is replaced by a different
    /// one (MER stays correct).
    pub noise: f64,
    pub seed: u64,
}

enum Piece {
    Word(&'static str),
    Slot(&'static str),
}

fn templates() -> Vec<Vec<Piece>> {
    use Piece::{Slot, Word};
    fn t(spec: &'static str) -> Vec<Piece> {
        spec.split(' ')
            .map(|w| match w {
                "{C}" => Slot("CHEMICAL"),
                "{D}" => Slot("DISEASE"),
                other => Word(other),
            })
            .collect()
    }
    vec![
        t("{C} treats {D}"),
        t("{C} for {D}"),
        t("{D} after {C}"),
        t("{C} eased {D}"),
        t("{D} despite {C}"),
        t("{D} and {D}"),
        t("{C} then {C}"),
        t("{D} was noted"),
        t("took {C} today"),
        t("exam was normal"),
    ]
}

/// Deals inventory entries of one type in shuffled passes, so every surface
/// form's use count across a split stays within one of every other's.
struct SlotDealer<'a> {
    eligible: Vec<&'a InventoryEntry>,
    queue: Vec<&'a InventoryEntry>,
}

impl<'a> SlotDealer<'a> {
    fn new(eligible: Vec<&'a InventoryEntry>) -> Self {
        Self {
            eligible,
            queue: Vec::new(),
        }
    }

    fn deal(&mut self, rng: &mut Rng) -> &'a InventoryEntry {
        if self.queue.is_empty() {
            self.queue = self.eligible.clone();
            rng.shuffle(&mut self.queue);
        }
        self.queue.pop().expect("eligible pool is nonempty")
    }
}

fn gen_split(
    count: usize,
    inventory: &[InventoryEntry],
    training_split: bool,
    noise: f64,
    concepts: &[String],
    rng: &mut Rng,
) -> Result<Vec<Sentence>> {
    let templates = templates();
    let pool = |ty: &str| -> Result<SlotDealer<'_>> {
        let eligible: Vec<&InventoryEntry> = inventory
            .iter()
            .filter(|e| e.entity_type == ty && !(training_split && e.held_out))
            .collect();
        if eligible.is_empty() {
            return Err(Error::Config(format!(
                "inventory has no usable {ty} entries"
            )));
        }
        Ok(SlotDealer::new(eligible))
    };
    let mut by_type: BTreeMap<&str, SlotDealer<'_>> = BTreeMap::new();
    for ty in ["CHEMICAL", "DISEASE"] {
        by_type.insert(ty, pool(ty)?);
    }
    let mut sentences = Vec::with_capacity(count);
    for id in 0..count {
        let template = &templates[rng.below(templates.len())];
        let mut tokens = Vec::new();
        let mut mer = Vec::new();
        let mut men = Vec::new();
        for piece in template {
            match piece {
                Piece::Word(w) => {
                    tokens.push(w.to_string());
                    mer.push("O".to_string());
                    men.push("O".to_string());
                }
                Piece::Slot(ty) => {
                    let dealer = by_type.get_mut(ty).expect("slot types are prebuilt");
                    let entry = dealer.deal(rng);
                    let mut concept = entry.concept.clone();
                    if noise > 0.0 && rng.uniform() < noise {
                        let others: Vec<&String> =
                            concepts.iter().filter(|c| **c != entry.concept).collect();
                        if !others.is_empty() {
                            concept = others[rng.below(others.len())].clone();
                        }
                    }
                    for (j, w) in entry.surface.iter().enumerate() {
                        let prefix = if j == 0 { "B" } else { "I" };
                        tokens.push(w.clone());
                        mer.push(format!("{prefix}-{}", entry.entity_type));
                        men.push(format!("{prefix}-{concept}"));
                    }
                }
            }
        }
        sentences.push(Sentence {
            id,
            tokens,
            mer_tags: Some(mer),
            men_tags: Some(men),
        });
    }
    Ok(sentences)
}

/// Generate deterministic train/dev/test splits from the inventory. Training
/// sentences avoid held-out surface forms; dev/test may use any. Gold MEN
/// concepts are a deterministic function of the surface form except where
/// `noise` corrupts them.
pub fn gen_synthetic(
    spec: &SynthSpec,
    inventory: &[InventoryEntry],
) -> Result<(Vec<Sentence>, Vec<Sentence>, Vec<Sentence>)> {
    if inventory.is_empty() {
        return Err(Error::EmptyInventory);
    }
    if !(0.0..=1.0).contains(&spec.noise) {
        return Err(Error::Config(format!(
            "noise rate must be in [0, 1], got {}",
            spec.noise
        )));
    }
    let concepts: Vec<String> = inventory
        .iter()
        .map(|e| e.concept.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rng = Rng::new(spec.seed);
    let train = gen_split(spec.train, inventory, true, spec.noise, &concepts, &mut rng)?;
    let dev = gen_split(spec.dev, inventory, false, spec.noise, &concepts, &mut rng)?;
    let test = gen_split(spec.test, inventory, false, spec.noise, &concepts, &mut rng)?;
    Ok((train, dev, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_three_column_sentence() {
        let text = "head\tB-DIS\tB-D001\nache\tI-DIS\tI-D001\ntoday\tO\tO\n";
        let got = parse_conll_str(text, "mem", false).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].tokens, ["head", "ache", "today"]);
        assert_eq!(got[0].mer_tags.as_deref().unwrap().len(), 3);
        assert_eq!(got[0].men_tags.as_deref().unwrap().len(), 3);
    }

    #[test]
    fn blank_lines_split_sentences() {
        let text = "a\tO\n\nb\tO\nc\tO\n";
        let got = parse_conll_str(text, "mem", false).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].tokens, ["a"]);
        assert_eq!(got[1].tokens, ["b", "c"]);
        assert_eq!((got[0].id, got[1].id), (0, 1));
        assert!(got[0].men_tags.is_none());
    }

    #[test]
    fn orphan_inside_tag_is_rejected_with_line() {
        let text = "x\tO\ny\tI-DIS\n";
        let err = parse_conll_str(text, "mem", false).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("mem:2") && msg.contains("token 2"), "{msg}");
    }

    #[test]
    fn repair_rewrites_orphan_inside_to_begin() {
        let text = "x\tO\ny\tI-DIS\nz\tI-DIS\n";
        let got = parse_conll_str(text, "mem", true).unwrap();
        assert_eq!(
            got[0].mer_tags.as_deref().unwrap(),
            ["O", "B-DIS", "I-DIS"]
        );
    }

    #[test]
    fn payload_switch_is_an_orphan() {
        assert!(validate_bio(&["B-A", "I-B"]).is_err());
        let mut tags: Vec<String> = ["B-A", "I-B"].iter().map(|s| s.to_string()).collect();
        repair_bio(&mut tags);
        assert_eq!(tags, ["B-A", "B-B"]);
    }

    #[test]
    fn ragged_columns_rejected_with_line() {
        let text = "a\tO\nb\n";
        let err = parse_conll_str(text, "mem", false).unwrap_err();
        assert!(err.to_string().contains("mem:2"), "{err}");
    }

    #[test]
    fn comments_and_crlf_accepted() {
        let text = "# header\r\na\tO\r\n\r\nb\tO\r\n";
        let got = parse_conll_str(text, "mem", false).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].tokens, ["a"]);
    }

    #[test]
    fn malformed_tag_rejected() {
        for bad in ["B-", "I-", "X-DIS", "b-DIS", ""] {
            let text = format!("a\t{bad}\n");
            assert!(parse_conll_str(&text, "mem", false).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn write_then_parse_round_trips() {
        let text = "a\tB-D\tB-C1\nb\tI-D\tI-C1\n\nc\tO\tO\n";
        let first = parse_conll_str(text, "mem", false).unwrap();
        let written = write_conll_string(&first);
        let second = parse_conll_str(&written, "mem", false).unwrap();
        assert_eq!(first, second);
        let third = parse_conll_str(&write_conll_string(&second), "mem", false).unwrap();
        assert_eq!(second, third);
    }

    #[test]
    fn tagset_has_o_first_and_closes_inside_labels() {
        let ts = TagSet::from_labels(TaskId::Mer, ["B-DIS", "O", "B-CHEM", "I-CHEM"]).unwrap();
        assert_eq!(ts.label(0), "O");
        assert_eq!(ts.id("O").unwrap(), 0);
        // I-DIS added automatically
        assert!(ts.id("I-DIS").is_ok());
        assert_eq!(ts.len(), 5);
        // deterministic: labels sorted after O
        let rest: Vec<&str> = ts.labels()[1..].iter().map(String::as_str).collect();
        let sorted = {
            let mut s = rest.clone();
            s.sort();
            s
        };
        assert_eq!(rest, sorted);
    }

    #[test]
    fn tagset_rejects_unknown_labels_at_lookup() {
        let ts = TagSet::from_labels(TaskId::Men, ["B-D001"]).unwrap();
        let err = ts.id("B-D999").unwrap_err();
        assert!(err.to_string().contains("MEN"), "{err}");
    }

    #[test]
    fn vocab_orders_by_frequency_then_lexicographic() {
        let text = "b\tO\nb\tO\na\tO\nc\tO\na\tO\n";
        let sentences = parse_conll_str(text, "mem", false).unwrap();
        let v = build_vocabularies(&sentences, 0).unwrap();
        // a and b both appear twice → lexicographic; c once → last
        assert_eq!(v.words.words(), [PAD_TOKEN, UNK_TOKEN, "a", "b", "c"]);
    }

    #[test]
    fn min_count_folds_rare_words_to_unk() {
        let text = "common\tO\ncommon\tO\nrare\tO\n";
        let sentences = parse_conll_str(text, "mem", false).unwrap();
        let v = build_vocabularies(&sentences, 2).unwrap();
        assert_eq!(v.words.id("common"), 2);
        assert_eq!(v.words.id("rare"), WordVocab::UNK);
    }

    #[test]
    fn word_lookup_falls_back_to_lowercase_then_unk() {
        let v = WordVocab::from_tokens(["aspirin", "TNF"]);
        assert_eq!(v.id("aspirin"), 2);
        assert_eq!(v.id("Aspirin"), 2);
        assert_eq!(v.id("TNF"), 3);
        assert_eq!(v.id("unseen"), WordVocab::UNK);
    }

    #[test]
    fn char_vocab_maps_unknown_to_unk() {
        let v = CharVocab::from_chars("abc".chars());
        assert_eq!(v.word_ids("abz"), [2, 3, CharVocab::UNK]);
    }

    #[test]
    fn word_class_truth_table() {
        let train: BTreeSet<String> = ["in_t", "both"].iter().map(|s| s.to_string()).collect();
        let emb: BTreeSet<String> = ["in_e", "both"].iter().map(|s| s.to_string()).collect();
        assert_eq!(word_class("both", &train, &emb), OovClass::Iv);
        assert_eq!(word_class("in_e", &train, &emb), OovClass::Ootv);
        assert_eq!(word_class("in_t", &train, &emb), OovClass::Ooev);
        assert_eq!(word_class("neither", &train, &emb), OovClass::Oobv);
    }

    #[test]
    fn entity_class_covers_all_two_word_combinations() {
        let train: BTreeSet<String> = ["t", "tb"].iter().map(|s| s.to_string()).collect();
        let emb: BTreeSet<String> = ["e", "tb"].iter().map(|s| s.to_string()).collect();
        // word classes: tb=IV, e=OOTV, t=OOEV, x=OOBV
        let words = ["tb", "e", "t", "x"];
        for &w1 in &words {
            for &w2 in &words {
                let got = entity_class(&[w1, w2], &train, &emb);
                // independent truth-table evaluation
                let out_t = !train.contains(w1) || !train.contains(w2);
                let out_e = !emb.contains(w1) || !emb.contains(w2);
                let want = match (out_t, out_e) {
                    (true, true) => OovClass::Oobv,
                    (true, false) => OovClass::Ootv,
                    (false, true) => OovClass::Ooev,
                    (false, false) => OovClass::Iv,
                };
                assert_eq!(got, want, "{w1} {w2}");
            }
        }
        // the spec's cross-word case: w1 OOTV-word + w2 OOEV-word → OOBV entity
        assert_eq!(entity_class(&["e", "t"], &train, &emb), OovClass::Oobv);
    }

    #[test]
    fn partition_is_exhaustive_and_keyed_by_span() {
        let text = "zomig\tB-CHEM\tB-C1\nhelps\tO\tO\nmigraine\tB-DIS\tB-D1\n";
        let sentences = parse_conll_str(text, "mem", false).unwrap();
        let train: BTreeSet<String> = ["zomig", "helps"].iter().map(|s| s.to_string()).collect();
        let emb: BTreeSet<String> = ["migraine"].iter().map(|s| s.to_string()).collect();
        let p = partition_oov(&sentences, TaskId::Mer, &train, &emb).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.class_of(0, 0, 1), Some(OovClass::Ooev));
        assert_eq!(p.class_of(0, 2, 3), Some(OovClass::Ootv));
    }

    #[test]
    fn synthetic_counts_and_validity() {
        let spec = SynthSpec {
            train: 50,
            dev: 10,
            test: 10,
            noise: 0.0,
            seed: 7,
        };
        let (train, dev, test) = gen_synthetic(&spec, &default_inventory()).unwrap();
        assert_eq!((train.len(), dev.len(), test.len()), (50, 10, 10));
        for s in train.iter().chain(&dev).chain(&test) {
            validate_bio(s.mer_tags.as_deref().unwrap()).unwrap();
            validate_bio(s.men_tags.as_deref().unwrap()).unwrap();
            assert_eq!(s.mer_tags.as_deref().unwrap().len(), s.len());
        }
        // outputs re-parse identically
        let round = parse_conll_str(&write_conll_string(&train), "mem", false).unwrap();
        assert_eq!(round, train);
    }

    #[test]
    fn synthetic_is_deterministic_under_seed() {
        let spec = SynthSpec {
            train: 20,
            dev: 5,
            test: 5,
            noise: 0.3,
            seed: 99,
        };
        let a = gen_synthetic(&spec, &default_inventory()).unwrap();
        let b = gen_synthetic(&spec, &default_inventory()).unwrap();
        assert_eq!(write_conll_string(&a.0), write_conll_string(&b.0));
        assert_eq!(write_conll_string(&a.1), write_conll_string(&b.1));
        assert_eq!(write_conll_string(&a.2), write_conll_string(&b.2));
    }

    #[test]
    fn zero_noise_keeps_concepts_consistent_with_surfaces() {
        let inventory = default_inventory();
        let surface_to_concept: BTreeMap<String, &str> = inventory
            .iter()
            .map(|e| (e.surface.join(" "), e.concept.as_str()))
            .collect();
        let spec = SynthSpec {
            train: 80,
            dev: 0,
            test: 0,
            noise: 0.0,
            seed: 3,
        };
        let (train, _, _) = gen_synthetic(&spec, &inventory).unwrap();
        for s in &train {
            let mer = s.mer_tags.as_deref().unwrap();
            let men = s.men_tags.as_deref().unwrap();
            for (start, end, _) in crate::evaluation::decode_entity_runs(mer).unwrap() {
                let surface = s.tokens[start..end].join(" ");
                let concept = surface_to_concept[&surface];
                let men_payload = match tag_kind(&men[start]).unwrap() {
                    TagKind::Begin(p) => p,
                    other => panic!("expected B- tag, got {other:?}"),
                };
                assert_eq!(men_payload, concept, "surface {surface}");
            }
        }
    }

    #[test]
    fn training_split_avoids_held_out_surfaces() {
        let inventory = default_inventory();
        let held: BTreeSet<String> = inventory
            .iter()
            .filter(|e| e.held_out)
            .map(|e| e.surface.join(" "))
            .collect();
        let spec = SynthSpec {
            train: 200,
            dev: 0,
            test: 0,
            noise: 0.0,
            seed: 11,
        };
        let (train, _, _) = gen_synthetic(&spec, &inventory).unwrap();
        for s in &train {
            let mer = s.mer_tags.as_deref().unwrap();
            for (start, end, _) in crate::evaluation::decode_entity_runs(mer).unwrap() {
                let surface = s.tokens[start..end].join(" ");
                assert!(!held.contains(&surface), "held-out {surface} in train");
            }
        }
    }

    #[test]
    fn empty_inventory_rejected() {
        let spec = SynthSpec {
            train: 1,
            dev: 0,
            test: 0,
            noise: 0.0,
            seed: 1,
        };
        assert!(matches!(
            gen_synthetic(&spec, &[]),
            Err(Error::EmptyInventory)
        ));
    }
}
