//! The language stream at desk scale: tokenize a description, chunk candidate
//! attribute phrases with a rule-based shallow parser, embed them as
//! average-pooled word vectors, and assign each phrase to an attribute
//! category by cosine against per-category dictionary anchors.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{AttributeCategory, NUM_ATTRIBUTES};
use crate::vecops::{cosine_slice, ZeroNormPolicy};

/// Default assignment threshold: a phrase below this cosine against every
/// anchor is dropped.
pub const DEFAULT_THETA: f64 = 0.3;

const EMBEDDED_WORDVECS: &str = include_str!("../assets/wordvecs.txt");
const EMBEDDED_DICTIONARY: &str = include_str!("../assets/dictionary.txt");
const EMBEDDED_LEXICON: &str = include_str!("../assets/lexicon.txt");

/// Read-only token-to-vector table with a deterministic hash fallback for
/// out-of-vocabulary tokens.
#[derive(Debug, Clone)]
pub struct WordVectorStore {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl WordVectorStore {
    /// Parse the word-vector text format: first line `d_w <integer>`, then
    /// one `<token> <f1> ... <f_dw>` per line.
    pub fn from_reader<R: BufRead>(reader: R, source: &str) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let first = match lines.next() {
            Some((_, line)) => line?,
            None => {
                return Err(Error::DataFormat {
                    file: source.to_string(),
                    line: 1,
                    msg: "empty word-vector file".into(),
                })
            }
        };
        let dim = parse_header(&first).ok_or_else(|| Error::DataFormat {
            file: source.to_string(),
            line: 1,
            msg: format!("expected header 'd_w <integer>', got '{first}'"),
        })?;
        let mut vectors = HashMap::new();
        for (idx, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts.next().unwrap().to_lowercase();
            let values: std::result::Result<Vec<f64>, _> =
                parts.map(|p| p.parse::<f64>()).collect();
            let values = values.map_err(|e| Error::DataFormat {
                file: source.to_string(),
                line: idx + 1,
                msg: format!("bad float: {e}"),
            })?;
            if values.len() != dim {
                return Err(Error::DataFormat {
                    file: source.to_string(),
                    line: idx + 1,
                    msg: format!("expected {dim} values, got {}", values.len()),
                });
            }
            vectors.insert(token, values);
        }
        Ok(Self { dim, vectors })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(
            std::io::BufReader::new(file),
            &path.display().to_string(),
        )
    }

    /// The curated store shipped with the crate.
    pub fn embedded_default() -> Self {
        Self::from_reader(EMBEDDED_WORDVECS.as_bytes(), "embedded wordvecs")
            .expect("embedded word vectors are well-formed")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn contains(&self, token: &str) -> bool {
        self.vectors.contains_key(&token.to_lowercase())
    }

    /// Vector for a token; unknown tokens resolve to a deterministic
    /// hash-derived vector so repeated parses agree.
    pub fn lookup(&self, token: &str) -> Vec<f64> {
        let key = token.to_lowercase();
        if let Some(v) = self.vectors.get(&key) {
            return v.clone();
        }
        hash_fallback(&key, self.dim)
    }
}

fn parse_header(line: &str) -> Option<usize> {
    let mut parts = line.split_whitespace();
    if parts.next()? != "d_w" {
        return None;
    }
    let dim: usize = parts.next()?.parse().ok()?;
    if parts.next().is_some() || dim == 0 {
        return None;
    }
    Some(dim)
}

/// splitmix64 expansion of the token bytes into a fixed-norm vector.
fn hash_fallback(token: &str, dim: usize) -> Vec<f64> {
    let mut state: u64 = 0x9e37_79b9_7f4a_7c15;
    for b in token.as_bytes() {
        state = state.wrapping_add(*b as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        state ^= state >> 31;
    }
    let mut next = move || {
        state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    let mut v: Vec<f64> = (0..dim)
        .map(|_| (next() as f64 / u64::MAX as f64) * 2.0 - 1.0)
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x *= 0.5 / norm;
        }
    }
    v
}

/// Word classes used by the chunker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WordClass {
    Adjective,
    Noun,
    /// Verbs, stopwords and anything else that breaks a phrase run.
    Other,
}

/// Token classifier backed by a shipped word list; unknown tokens default to
/// noun-like since the clothing vocabulary is open-ended.
#[derive(Debug, Clone)]
pub struct Lexicon {
    classes: HashMap<String, WordClass>,
}

impl Lexicon {
    /// Parse lines of `<token> <adj|noun|verb|stop>`.
    pub fn from_reader<R: BufRead>(reader: R, source: &str) -> Result<Self> {
        let mut classes = HashMap::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut parts = trimmed.split_whitespace();
            let token = parts.next().unwrap().to_lowercase();
            let class = match parts.next() {
                Some("adj") => WordClass::Adjective,
                Some("noun") => WordClass::Noun,
                Some("verb") | Some("stop") => WordClass::Other,
                other => {
                    return Err(Error::DataFormat {
                        file: source.to_string(),
                        line: idx + 1,
                        msg: format!("expected adj|noun|verb|stop, got {other:?}"),
                    })
                }
            };
            classes.insert(token, class);
        }
        Ok(Self { classes })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(std::io::BufReader::new(file), &path.display().to_string())
    }

    pub fn embedded_default() -> Self {
        Self::from_reader(EMBEDDED_LEXICON.as_bytes(), "embedded lexicon")
            .expect("embedded lexicon is well-formed")
    }

    pub fn classify(&self, token: &str) -> WordClass {
        self.classes
            .get(token)
            .copied()
            .unwrap_or(WordClass::Noun)
    }
}

/// Per-category curated word lists plus their average-pooled anchor vectors.
#[derive(Debug, Clone)]
pub struct AttributeDictionary {
    words: [Vec<String>; NUM_ATTRIBUTES],
    anchors: [Vec<f64>; NUM_ATTRIBUTES],
}

impl AttributeDictionary {
    /// Parse the sectioned word-list format (`[head]`, `[upper]`, ...) and
    /// build anchors from the store.
    pub fn from_reader<R: BufRead>(reader: R, source: &str, store: &WordVectorStore) -> Result<Self> {
        let mut words: [Vec<String>; NUM_ATTRIBUTES] = Default::default();
        let mut current: Option<usize> = None;
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if let Some(section) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let cat = AttributeCategory::from_key(section).ok_or_else(|| Error::DataFormat {
                    file: source.to_string(),
                    line: idx + 1,
                    msg: format!("unknown section [{section}]"),
                })?;
                current = Some(cat.index());
            } else {
                let slot = current.ok_or_else(|| Error::DataFormat {
                    file: source.to_string(),
                    line: idx + 1,
                    msg: "word before any section header".into(),
                })?;
                words[slot].push(trimmed.to_lowercase());
            }
        }
        Self::from_words(words, store)
    }

    pub fn from_words(
        words: [Vec<String>; NUM_ATTRIBUTES],
        store: &WordVectorStore,
    ) -> Result<Self> {
        let mut anchors: [Vec<f64>; NUM_ATTRIBUTES] = Default::default();
        for cat in AttributeCategory::ALL {
            let list = &words[cat.index()];
            if list.is_empty() {
                return Err(Error::InvalidParameter(format!(
                    "dictionary category {cat} has no words"
                )));
            }
            let mut anchor = vec![0.0; store.dim()];
            for word in list {
                for (a, v) in anchor.iter_mut().zip(store.lookup(word)) {
                    *a += v;
                }
            }
            for a in &mut anchor {
                *a /= list.len() as f64;
            }
            anchors[cat.index()] = anchor;
        }
        Ok(Self { words, anchors })
    }

    pub fn from_path(path: &Path, store: &WordVectorStore) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(
            std::io::BufReader::new(file),
            &path.display().to_string(),
            store,
        )
    }

    pub fn embedded_default(store: &WordVectorStore) -> Self {
        Self::from_reader(EMBEDDED_DICTIONARY.as_bytes(), "embedded dictionary", store)
            .expect("embedded dictionary is well-formed")
    }

    pub fn anchor(&self, category: AttributeCategory) -> &[f64] {
        &self.anchors[category.index()]
    }

    pub fn words(&self, category: AttributeCategory) -> &[String] {
        &self.words[category.index()]
    }
}

/// A chunked phrase with its winning category (absent when every anchor
/// scored below the threshold).
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedPhrase {
    pub tokens: Vec<String>,
    pub category: Option<AttributeCategory>,
    pub score: f64,
}

/// Lowercased, punctuation-stripped, whitespace-split tokens in input order.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(|s| s.to_string())
        .collect()
}

/// Maximal contiguous runs matching (adjective)*(noun)+; runs without a
/// noun-like token are dropped, and any other word class breaks a run.
pub fn chunk_phrases(tokens: &[String], lexicon: &Lexicon) -> Vec<Vec<String>> {
    let classes: Vec<WordClass> = tokens.iter().map(|t| lexicon.classify(t)).collect();
    let mut phrases = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        match classes[i] {
            WordClass::Other => i += 1,
            _ => {
                let start = i;
                while i < tokens.len() && classes[i] == WordClass::Adjective {
                    i += 1;
                }
                let noun_start = i;
                while i < tokens.len() && classes[i] == WordClass::Noun {
                    i += 1;
                }
                if i > noun_start {
                    phrases.push(tokens[start..i].to_vec());
                } else {
                    // adjectives with no following noun: skip past them
                    i = noun_start.max(start + 1);
                }
            }
        }
    }
    phrases
}

/// Arithmetic mean of the member token vectors.
pub fn embed_phrase(phrase: &[String], store: &WordVectorStore) -> Result<Vec<f64>> {
    if phrase.is_empty() {
        return Err(Error::EmptyPhrase);
    }
    let mut mean = vec![0.0; store.dim()];
    for token in phrase {
        for (m, v) in mean.iter_mut().zip(store.lookup(token)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= phrase.len() as f64;
    }
    Ok(mean)
}

/// Argmax-cosine category for a phrase vector, or `None` when the best score
/// falls below `theta`. Ties break by canonical category order.
pub fn assign_category(
    phrase_vec: &[f64],
    dict: &AttributeDictionary,
    theta: f64,
) -> Option<(AttributeCategory, f64)> {
    let mut best: Option<(AttributeCategory, f64)> = None;
    for cat in AttributeCategory::ALL {
        let score = cosine_slice(phrase_vec, dict.anchor(cat), ZeroNormPolicy::Lenient)
            .expect("anchor and phrase dims match");
        let better = match best {
            None => true,
            Some((_, s)) => score > s,
        };
        if better {
            best = Some((cat, score));
        }
    }
    best.filter(|(_, score)| *score >= theta)
}

/// Full decomposition of a description.
#[derive(Debug, Clone, Default)]
pub struct ParseOutput {
    /// Tokens assigned to each category, concatenated in sentence order.
    pub categories: [Option<Vec<String>>; NUM_ATTRIBUTES],
    /// Every token of the sentence, for the global textual embedding.
    pub sentence_tokens: Vec<String>,
    /// All chunked phrases with their scores, for diagnostics.
    pub phrases: Vec<ParsedPhrase>,
}

impl ParseOutput {
    pub fn category_tokens(&self, cat: AttributeCategory) -> Option<&[String]> {
        self.categories[cat.index()].as_deref()
    }
}

/// tokenize -> chunk -> embed -> assign. Phrases mapping to the same category
/// concatenate in sentence order; unassigned phrases are dropped.
pub fn parse_description(
    text: &str,
    store: &WordVectorStore,
    dict: &AttributeDictionary,
    lexicon: &Lexicon,
    theta: f64,
) -> ParseOutput {
    let sentence_tokens = tokenize(text);
    let mut output = ParseOutput {
        sentence_tokens: sentence_tokens.clone(),
        ..Default::default()
    };
    for chunk in chunk_phrases(&sentence_tokens, lexicon) {
        let vec = embed_phrase(&chunk, store).expect("chunks are non-empty");
        let assigned = assign_category(&vec, dict, theta);
        let (category, score) = match assigned {
            Some((c, s)) => (Some(c), s),
            None => (None, 0.0),
        };
        if let Some(cat) = category {
            output.categories[cat.index()]
                .get_or_insert_with(Vec::new)
                .extend(chunk.iter().cloned());
        }
        output.phrases.push(ParsedPhrase {
            tokens: chunk,
            category,
            score,
        });
    }
    output
}

/// Everything needed to turn raw text into features: store, dictionary,
/// lexicon and the assignment threshold.
#[derive(Debug, Clone)]
pub struct TextPipeline {
    pub store: WordVectorStore,
    pub dict: AttributeDictionary,
    pub lexicon: Lexicon,
    pub theta: f64,
}

impl TextPipeline {
    pub fn embedded_default() -> Self {
        let store = WordVectorStore::embedded_default();
        let dict = AttributeDictionary::embedded_default(&store);
        Self {
            store,
            dict,
            lexicon: Lexicon::embedded_default(),
            theta: DEFAULT_THETA,
        }
    }

    pub fn with_theta(mut self, theta: f64) -> Self {
        self.theta = theta;
        self
    }

    pub fn parse(&self, text: &str) -> ParseOutput {
        parse_description(text, &self.store, &self.dict, &self.lexicon, self.theta)
    }
}
