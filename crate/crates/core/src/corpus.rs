//! Word-level vocabulary, tokenization and corpus ingestion.
//!
//! Ids 0, 1 and 2 are reserved for `<unk>`, `</s>` and `<sep>`; corpus
//! words are numbered from 3 in first-occurrence order.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const UNK: TokenId = 0;
pub const EOS: TokenId = 1;
pub const SEP: TokenId = 2;
pub const FIRST_WORD_ID: TokenId = 3;

const UNK_TEXT: &str = "<unk>";
const SEP_TEXT: &str = "<sep>";

/// Bijective word <-> id table.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from whitespace-delimited words, assigning ids in
    /// first-occurrence order across `texts`.
    pub fn build<S: AsRef<str>>(texts: &[S]) -> Result<Self> {
        let mut vocab = Vocab::default();
        for text in texts {
            for word in text.as_ref().split_whitespace() {
                vocab.insert(word);
            }
        }
        if vocab.words.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(vocab)
    }

    fn insert(&mut self, word: &str) -> TokenId {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = FIRST_WORD_ID + self.words.len() as TokenId;
        self.words.push(word.to_owned());
        self.index.insert(word.to_owned(), id);
        id
    }

    /// Number of ids, reserved ones included.
    pub fn size(&self) -> usize {
        self.words.len() + FIRST_WORD_ID as usize
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        match id {
            UNK => Some(UNK_TEXT),
            EOS => Some(""),
            SEP => Some(SEP_TEXT),
            _ => self
                .words
                .get((id - FIRST_WORD_ID) as usize)
                .map(String::as_str),
        }
    }

    /// Maps each whitespace-delimited word to its id; unknown words become
    /// [`UNK`]. No EOS is appended.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    /// Space-joins the words of `seq`. EOS renders as nothing.
    pub fn detokenize(&self, seq: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in seq {
            let word = self.word(id).ok_or(Error::UnknownTokenId(id))?;
            if word.is_empty() {
                continue;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(word);
        }
        Ok(out)
    }

    /// One word per line; the id of line `i` (0-based) is `i + 3`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for w in &self.words {
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut vocab = Vocab::default();
        for (line_no, line) in text.lines().enumerate() {
            if line.is_empty() || line.split_whitespace().count() != 1 || line.trim() != line {
                return Err(Error::InvalidArgument(format!(
                    "vocab line {} is not a single word",
                    line_no + 1
                )));
            }
            if vocab.index.contains_key(line) {
                return Err(Error::InvalidArgument(format!(
                    "vocab line {} repeats {line:?}",
                    line_no + 1
                )));
            }
            vocab.insert(line);
        }
        if vocab.words.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// How input files are split into documents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Segmentation {
    /// Each non-blank line is a document.
    LinePerDoc,
    /// Each file is a single document.
    #[default]
    FilePerDoc,
}

/// Tokenized documents, each terminated by EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub docs: Vec<Vec<TokenId>>,
    pub vocab: Vocab,
}

impl Corpus {
    /// Tokenizes each text against `vocab` and appends EOS. Blank texts are
    /// skipped.
    pub fn from_texts<S: AsRef<str>>(texts: &[S], vocab: Vocab) -> Self {
        let docs = texts
            .iter()
            .map(AsRef::as_ref)
            .filter(|t| !t.trim().is_empty())
            .map(|t| {
                let mut doc = vocab.tokenize(t);
                doc.push(EOS);
                doc
            })
            .collect();
        Corpus { docs, vocab }
    }

    pub fn token_count(&self) -> usize {
        self.docs.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

/// Reads documents from `paths` without tokenizing them.
pub fn read_documents<P: AsRef<Path>>(paths: &[P], segmentation: Segmentation) -> Result<Vec<String>> {
    let mut docs = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        match segmentation {
            Segmentation::LinePerDoc => docs.extend(
                text.lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(str::to_owned),
            ),
            Segmentation::FilePerDoc => {
                if !text.trim().is_empty() {
                    docs.push(text)
                }
            }
        }
    }
    Ok(docs)
}

/// Loads and tokenizes `paths`. When `vocab` is `None` one is built from the
/// loaded documents.
pub fn load_corpus<P: AsRef<Path>>(
    paths: &[P],
    segmentation: Segmentation,
    vocab: Option<Vocab>,
) -> Result<Corpus> {
    let texts = read_documents(paths, segmentation)?;
    let vocab = match vocab {
        Some(v) => v,
        None => Vocab::build(&texts)?,
    };
    Ok(Corpus::from_texts(&texts, vocab))
}
