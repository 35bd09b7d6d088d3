//! Documents, passages and the token vocabulary.
//!
//! Documents are split into disjoint fixed-width word windows ("passages"),
//! each carrying the parent title. The vocabulary maps whitespace-split,
//! lowercased words to dense ids after a fixed block of reserved markers.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const UNK: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const TITLE_MARK: TokenId = 4;
pub const CONTEXT_MARK: TokenId = 5;

/// Reserved tokens, in id order.
pub const RESERVED: [&str; 6] = ["<unk>", "<bos>", "<eos>", "<sep>", "title:", "context:"];

pub const DEFAULT_WINDOW: usize = 100;

/// Whitespace split + lowercase.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: Vec<String>,
    pub body: Vec<String>,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, title: &str, body: &str) -> Result<Self> {
        let doc_id = doc_id.into();
        let title = tokenize(title);
        if title.is_empty() {
            return Err(Error::EmptyTitle(doc_id));
        }
        Ok(Self {
            doc_id,
            title,
            body: tokenize(body),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub passage_id: u64,
    pub doc_id: String,
    pub title: Vec<String>,
    pub body: Vec<String>,
    pub ordinal: usize,
}

impl Passage {
    /// Title followed by body, the text the retriever embeds.
    pub fn retrieval_tokens(&self) -> impl Iterator<Item = &String> {
        self.title.iter().chain(self.body.iter())
    }
}

/// Splits `doc.body` into consecutive windows of at most `window` words.
/// Passage ids are assigned from `first_id` upwards.
pub fn chunk_document(doc: &Document, window: usize, first_id: u64) -> Vec<Passage> {
    assert!(window >= 1, "window must be at least one word");
    doc.body
        .chunks(window)
        .enumerate()
        .map(|(ordinal, words)| Passage {
            passage_id: first_id + ordinal as u64,
            doc_id: doc.doc_id.clone(),
            title: doc.title.clone(),
            body: words.to_vec(),
            ordinal,
        })
        .collect()
}

/// Chunks every document, numbering passages densely from zero in corpus order.
pub fn chunk_corpus(docs: &[Document], window: usize) -> Vec<Passage> {
    let mut out = Vec::new();
    for doc in docs {
        let next = out.len() as u64;
        out.extend(chunk_document(doc, window, next));
    }
    out
}

#[derive(Deserialize)]
struct RawDocument {
    doc_id: String,
    title: String,
    body: String,
}

/// Reads a JSON-lines corpus of `{doc_id, title, body}` records.
/// Blank lines are skipped; doc ids must be unique.
pub fn read_corpus(path: &Path) -> Result<Vec<Document>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut seen = HashSet::new();
    let mut docs = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            msg,
        };
        let raw: RawDocument = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if !seen.insert(raw.doc_id.clone()) {
            return Err(Error::DuplicateDoc(raw.doc_id));
        }
        let doc = Document::new(raw.doc_id, &raw.title, &raw.body)
            .map_err(|e| parse_err(e.to_string()))?;
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_corpus(path: &Path, docs: &[Document]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for doc in docs {
        let rec = serde_json::json!({
            "doc_id": doc.doc_id,
            "title": doc.title.join(" "),
            "body": doc.body.join(" "),
        });
        writeln!(w, "{rec}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_passages(path: &Path, passages: &[Passage]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in passages {
        let line = serde_json::to_string(p).expect("passage serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_passages(path: &Path) -> Result<Vec<Passage>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Passage = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        out.push(p);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(std::iter::empty::<String>())
    }
}

impl Vocabulary {
    /// Reserved block followed by `tokens` in order. Duplicates and reserved
    /// strings are skipped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(tokens.into_iter().map(Into::into))
        {
            if vocab.index.contains_key(&t) {
                continue;
            }
            vocab.index.insert(t.clone(), vocab.tokens.len() as TokenId);
            vocab.tokens.push(t);
        }
        vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// True when only the reserved block is present.
    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED.len()
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for t in &self.tokens {
            writeln!(w, "{t}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<String> = BufReader::new(file)
            .lines()
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(path, e))?;
        if lines.len() < RESERVED.len() || lines.iter().zip(RESERVED.iter()).any(|(a, b)| a != b) {
            return Err(Error::Format(format!(
                "{}: vocabulary does not start with the reserved block",
                path.display()
            )));
        }
        let vocab = Self::from_tokens(lines[RESERVED.len()..].iter().cloned());
        if vocab.len() != lines.len() {
            return Err(Error::Format(format!(
                "{}: duplicate tokens",
                path.display()
            )));
        }
        Ok(vocab)
    }
}

/// Counts tokens over document titles, bodies and the training sentences and
/// keeps every token seen at least `min_count` times. Ids are assigned by
/// descending frequency, ties lexicographic.
pub fn build_vocabulary<'a, D, S>(docs: D, sentences: S, min_count: usize) -> Vocabulary
where
    D: IntoIterator<Item = &'a Document>,
    S: IntoIterator<Item = &'a [String]>,
{
    assert!(min_count >= 1, "min_count must be at least 1");
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for doc in docs {
        for t in doc.title.iter().chain(doc.body.iter()) {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    for sentence in sentences {
        for t in sentence {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t.to_string()))
}

/// Builds `BOS query SEP title: title context: body EOS`, or `BOS query EOS`
/// without a passage. Over-long inputs lose passage body words from the tail,
/// then title words; the query is never cut. A passage whose three markers
/// cannot fit is dropped entirely.
pub fn format_fusion_input<S: AsRef<str>>(
    vocab: &Vocabulary,
    query: &[S],
    passage: Option<&Passage>,
    max_len: usize,
) -> Result<Vec<TokenId>> {
    let passages: Vec<&Passage> = passage.into_iter().collect();
    format_concat_input(vocab, query, &passages, max_len)
}

/// Like [`format_fusion_input`] but appends every passage, each with its own
/// title/context markers, after a single SEP. Truncation fills passages in
/// order, so material is dropped from the tail.
pub fn format_concat_input<S: AsRef<str>>(
    vocab: &Vocabulary,
    query: &[S],
    passages: &[&Passage],
    max_len: usize,
) -> Result<Vec<TokenId>> {
    if query.is_empty() {
        return Err(Error::EmptyQuery);
    }
    let needed = query.len() + 2;
    if needed > max_len {
        return Err(Error::QueryTooLong { needed, max_len });
    }
    let mut ids = Vec::with_capacity(max_len.min(needed + 128));
    ids.push(BOS);
    ids.extend(query.iter().map(|t| vocab.id(t.as_ref())));

    // budget left after BOS, query, EOS
    let mut budget = max_len - needed;
    let mut sep_written = false;
    for p in passages {
        let markers = if sep_written { 2 } else { 3 };
        if budget < markers {
            break;
        }
        budget -= markers;
        if !sep_written {
            ids.push(SEP);
            sep_written = true;
        }
        let title_keep = p.title.len().min(budget);
        budget -= title_keep;
        let body_keep = p.body.len().min(budget);
        budget -= body_keep;
        ids.push(TITLE_MARK);
        ids.extend(p.title[..title_keep].iter().map(|t| vocab.id(t)));
        ids.push(CONTEXT_MARK);
        ids.extend(p.body[..body_keep].iter().map(|t| vocab.id(t)));
    }
    ids.push(EOS);
    Ok(ids)
}

/// Support sentences are embedded in the passage-absent form.
pub fn format_sentence<S: AsRef<str>>(vocab: &Vocabulary, sentence: &[S]) -> Vec<TokenId> {
    let mut ids = Vec::with_capacity(sentence.len() + 2);
    ids.push(BOS);
    ids.extend(sentence.iter().map(|t| vocab.id(t.as_ref())));
    ids.push(EOS);
    ids
}
