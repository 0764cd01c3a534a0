//! Token-level suffix array over a large corpus.
//!
//! Documents are concatenated with a [`SEP`] after each one, so no retrieved
//! continuation ever runs from one document into the next.
//!
//! On-disk layout (version 1, little-endian):
//!
//! | field        | type              |
//! |--------------|-------------------|
//! | magic        | `b"HDSA"`         |
//! | version      | u32 (= 1)         |
//! | vocab_size   | u32               |
//! | n_tokens     | u64               |
//! | tokens       | u32 × n_tokens    |
//! | suffix array | u32 × n_tokens    |

use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use crate::binfmt::{Reader, Writer};
use crate::corpus::{Corpus, TokenId, SEP};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HDSA";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatsDb {
    vocab_size: u32,
    text: Vec<TokenId>,
    sa: Vec<u32>,
}

impl StatsDb {
    pub fn build(corpus: &Corpus) -> Result<Self> {
        if corpus.token_count() == 0 {
            return Err(Error::EmptyCorpus);
        }
        let mut text = Vec::with_capacity(corpus.token_count() + corpus.docs.len());
        for doc in &corpus.docs {
            text.extend_from_slice(doc);
            text.push(SEP);
        }
        Self::from_text(text, corpus.vocab.size())
    }

    /// Indexes an already concatenated token array.
    pub fn from_text(text: Vec<TokenId>, vocab_size: usize) -> Result<Self> {
        if text.len() > u32::MAX as usize {
            return Err(Error::CorpusTooLarge(text.len()));
        }
        if let Some(&t) = text.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::UnknownTokenId(t));
        }
        let sa = suffix_array(&text);
        Ok(StatsDb {
            vocab_size: vocab_size as u32,
            text,
            sa,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size as usize
    }

    pub fn text(&self) -> &[TokenId] {
        &self.text
    }

    pub fn suffix_array(&self) -> &[u32] {
        &self.sa
    }

    pub fn len(&self) -> usize {
        self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }

    fn head(&self, pos: u32, len: usize) -> &[TokenId] {
        let p = pos as usize;
        &self.text[p..(p + len).min(self.text.len())]
    }

    /// Range of suffix-array ranks whose suffixes start with `query`.
    pub fn find_range(&self, query: &[TokenId]) -> Range<usize> {
        if query.is_empty() {
            return 0..self.sa.len();
        }
        let lo = self.sa.partition_point(|&p| self.head(p, query.len()) < query);
        let hi = lo + self.sa[lo..].partition_point(|&p| self.head(p, query.len()) <= query);
        lo..hi
    }

    /// Number of occurrences of `query` in the indexed text.
    pub fn count(&self, query: &[TokenId]) -> usize {
        self.find_range(query).len()
    }

    /// Continuations of the longest suffix of `tail` that yields any.
    ///
    /// For each suffix length from `|tail|` down to 1, the up-to-`m` tokens
    /// after every occurrence are collected (cut at the first separator) and
    /// tallied. The first length that produces a non-empty continuation wins;
    /// its `want` most frequent continuations are returned, ties broken by
    /// token order.
    pub fn retrieve(&self, tail: &[TokenId], m: usize, want: usize) -> Vec<(Vec<TokenId>, u32)> {
        if want == 0 || m == 0 {
            return Vec::new();
        }
        for len in (1..=tail.len()).rev() {
            let query = &tail[tail.len() - len..];
            let mut tally: HashMap<&[TokenId], u32> = HashMap::new();
            for &p in &self.sa[self.find_range(query)] {
                let start = p as usize + len;
                let window = &self.text[start..(start + m).min(self.text.len())];
                let cont = match window.iter().position(|&t| t == SEP) {
                    Some(i) => &window[..i],
                    None => window,
                };
                if !cont.is_empty() {
                    *tally.entry(cont).or_insert(0) += 1;
                }
            }
            if tally.is_empty() {
                continue;
            }
            let mut ranked: Vec<(&[TokenId], u32)> = tally.into_iter().collect();
            ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
            ranked.truncate(want);
            return ranked.into_iter().map(|(c, n)| (c.to_vec(), n)).collect();
        }
        Vec::new()
    }

    /// Checks every adjacent pair of the suffix array.
    pub fn verify(&self) -> Result<()> {
        self.verify_pairs(1..self.sa.len())
    }

    /// Checks `samples` evenly spread adjacent pairs, for large indexes.
    pub fn verify_sampled(&self, samples: usize) -> Result<()> {
        let n = self.sa.len();
        if n < 2 || samples + 1 >= n {
            return self.verify();
        }
        let step = (n - 1) as f64 / samples as f64;
        self.verify_pairs((0..samples).map(|i| 1 + (i as f64 * step) as usize))
    }

    fn verify_pairs(&self, ranks: impl Iterator<Item = usize>) -> Result<()> {
        for r in ranks {
            let (a, b) = (self.sa[r - 1] as usize, self.sa[r] as usize);
            if self.text[a..] >= self.text[b..] {
                return Err(Error::UnsortedSuffixArray(r));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        w.u32(self.vocab_size);
        w.u64(self.text.len() as u64);
        w.u32s(&self.text);
        w.u32s(&self.sa);
        w.buf
    }

    /// Parses and validates a v1 file: header, exact length, token range and
    /// that the suffix array is a permutation. Sortedness is left to
    /// [`StatsDb::verify`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::UnsupportedStatsDb(msg.to_owned());
        let mut r = Reader::new(bytes);
        if r.take(4) != Some(MAGIC.as_slice()) {
            return Err(bad("bad magic"));
        }
        match r.u32() {
            Some(VERSION) => {}
            Some(v) => return Err(bad(&format!("unsupported version {v}"))),
            None => return Err(bad("truncated header")),
        }
        let vocab_size = r.u32().ok_or_else(|| bad("truncated header"))?;
        let n = r.u64().ok_or_else(|| bad("truncated header"))?;
        if n > u32::MAX as u64 {
            return Err(bad("token count exceeds format limit"));
        }
        let n = n as usize;
        if bytes.len() != HEADER_LEN + 8 * n {
            return Err(bad(&format!(
                "expected {} bytes for {n} tokens, found {}",
                HEADER_LEN + 8 * n,
                bytes.len()
            )));
        }
        let text = r.u32s(n).ok_or_else(|| bad("truncated tokens"))?;
        let sa = r.u32s(n).ok_or_else(|| bad("truncated suffix array"))?;
        if text.iter().any(|&t| t >= vocab_size) {
            return Err(bad("token id out of vocabulary range"));
        }
        let mut seen = vec![false; n];
        for &p in &sa {
            match seen.get_mut(p as usize) {
                Some(s) if !*s => *s = true,
                _ => return Err(bad("suffix array is not a permutation")),
            }
        }
        Ok(StatsDb {
            vocab_size,
            text,
            sa,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// [`StatsDb::load`] followed by a full sortedness check.
    pub fn load_verified(path: impl AsRef<Path>) -> Result<Self> {
        let db = Self::load(path)?;
        db.verify()?;
        Ok(db)
    }
}

/// Prefix-doubling construction, O(n log² n).
fn suffix_array(text: &[TokenId]) -> Vec<u32> {
    let n = text.len();
    let mut sa: Vec<u32> = (0..n as u32).collect();
    if n <= 1 {
        return sa;
    }
    let mut rank: Vec<u64> = text.iter().map(|&t| t as u64).collect();
    let mut next = vec![0u64; n];
    let mut k = 1;
    loop {
        // rank 0 marks "past the end", which sorts before every real token
        let key = |i: u32| {
            let i = i as usize;
            (rank[i], if i + k < n { rank[i + k] + 1 } else { 0 })
        };
        sa.sort_unstable_by_key(|&i| key(i));
        next[sa[0] as usize] = 0;
        for w in 1..n {
            let bump = (key(sa[w - 1]) != key(sa[w])) as u64;
            next[sa[w] as usize] = next[sa[w - 1] as usize] + bump;
        }
        std::mem::swap(&mut rank, &mut next);
        if rank[sa[n - 1] as usize] as usize == n - 1 {
            break;
        }
        k *= 2;
    }
    sa
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Vocab, EOS};

    fn db_of(text: &[TokenId]) -> StatsDb {
        StatsDb::from_text(text.to_vec(), 64).unwrap()
    }

    #[test]
    fn tiny_text_sorted() {
        let db = db_of(&[4, 3, 4, SEP]);
        db.verify().unwrap();
        assert_eq!(db.suffix_array(), &[3, 1, 2, 0]);
    }

    #[test]
    fn single_token_document() {
        let corpus = Corpus::from_texts(&["a"], Vocab::build(&["a"]).unwrap());
        let db = StatsDb::build(&corpus).unwrap();
        assert_eq!(db.text(), &[3, EOS, SEP]);
        assert_eq!(db.suffix_array(), &[1, 2, 0]);
    }

    #[test]
    fn find_range_edges() {
        let db = db_of(&[3, 4, 3, 4, 5, SEP]);
        assert!(db.find_range(&[9]).is_empty());
        assert_eq!(db.count(&[3, 4]), 2);
        assert_eq!(db.count(&[3, 4, 3, 4, 5, SEP]), 1);
        assert_eq!(db.count(&[4, 5, SEP, 0]), 0);
    }

    #[test]
    fn retrieve_single_occurrence() {
        let db = db_of(&[3, 4, 5, 6, 7, 8, SEP]);
        assert_eq!(db.retrieve(&[3, 4], 4, 7), vec![(vec![5, 6, 7, 8], 1)]);
        assert_eq!(db.retrieve(&[3, 4], 2, 7), vec![(vec![5, 6], 1)]);
    }

    #[test]
    fn retrieve_shrinks_prefix() {
        let db = db_of(&[3, 5, 6, SEP, 3, 7, SEP]);
        assert_eq!(db.retrieve(&[9, 3], 4, 7), vec![(vec![5, 6], 1), (vec![7], 1)]);
        assert!(db.retrieve(&[9], 4, 7).is_empty());
        // [6] is only followed by a separator, so no draft comes from it
        assert!(db.retrieve(&[6], 4, 7).is_empty());
    }

    #[test]
    fn retrieve_ranks_by_count() {
        let db = db_of(&[3, 5, SEP, 3, 4, SEP, 3, 5, SEP]);
        assert_eq!(db.retrieve(&[3], 2, 1), vec![(vec![5], 2)]);
        assert_eq!(db.retrieve(&[3], 2, 5), vec![(vec![5], 2), (vec![4], 1)]);
        assert!(db.retrieve(&[3], 2, 0).is_empty());
    }

    #[test]
    fn bytes_round_trip() {
        let db = db_of(&[3, 4, 3, 4, 5, SEP, 6, SEP]);
        let bytes = db.to_bytes();
        assert_eq!(&bytes[..4], b"HDSA");
        assert_eq!(bytes.len(), HEADER_LEN + 8 * 8);
        let back = StatsDb::from_bytes(&bytes).unwrap();
        assert_eq!(back, db);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = db_of(&[3, 4, 3, 4, 5, SEP]).to_bytes();
        let mut magic = bytes.clone();
        magic[1] = b'X';
        assert!(StatsDb::from_bytes(&magic).is_err());
        let mut version = bytes.clone();
        version[4] = 2;
        assert!(StatsDb::from_bytes(&version).is_err());
        assert!(StatsDb::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(StatsDb::from_bytes(&bytes[..10]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(StatsDb::from_bytes(&extra).is_err());
        let mut dup = bytes.clone();
        let sa_start = HEADER_LEN + 4 * 6;
        dup[sa_start..sa_start + 4].copy_from_slice(&bytes[sa_start + 4..sa_start + 8]);
        assert!(StatsDb::from_bytes(&dup).is_err());
    }

    #[test]
    fn flipped_token_caught_by_verify() {
        let db = db_of(&[3, 4, 3, 4, 5, SEP, 4, 3, SEP]);
        let mut bytes = db.to_bytes();
        // first token 3 -> 6; the permutation stays valid but order breaks
        bytes[HEADER_LEN] = 6;
        let loaded = StatsDb::from_bytes(&bytes).unwrap();
        assert!(matches!(loaded.verify(), Err(Error::UnsortedSuffixArray(_))));
    }

    #[test]
    fn out_of_range_token_rejected() {
        assert!(StatsDb::from_text(vec![3, 70], 64).is_err());
    }
}
