//! Static database of the most frequent `(1+m)`-grams in model generations.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TokenId};
use crate::error::{Error, Result};

pub const DEFAULT_TOP_K: usize = 100_000;

const MAGIC: &str = "HDMD";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelDb {
    value_len: usize,
    /// Per key: (value, count), sorted by count descending then value.
    table: BTreeMap<TokenId, Vec<(Vec<TokenId>, u64)>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    magic: String,
    version: u32,
    m: usize,
    keys: usize,
    sequences: usize,
}

#[derive(Serialize, Deserialize)]
struct Record {
    key: TokenId,
    values: Vec<Vec<TokenId>>,
    counts: Vec<u64>,
}

impl ModelDb {
    /// Counts every contiguous `(1+m)`-gram inside each document, keeps the
    /// `top_k` most frequent ones globally and files them under their first
    /// token. Each key keeps at most `max_values_per_key` values.
    pub fn build(generations: &Corpus, top_k: usize, m: usize, max_values_per_key: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidArgument("m must be >= 1".into()));
        }
        if max_values_per_key == 0 {
            return Err(Error::InvalidArgument("values per key must be >= 1".into()));
        }
        if generations.token_count() == 0 {
            return Err(Error::EmptyCorpus);
        }
        let mut counts: HashMap<&[TokenId], u64> = HashMap::new();
        for doc in &generations.docs {
            for gram in doc.windows(m + 1) {
                *counts.entry(gram).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&[TokenId], u64)> = counts.into_iter().collect();
        ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(top_k);

        let mut table: BTreeMap<TokenId, Vec<(Vec<TokenId>, u64)>> = BTreeMap::new();
        // `ranked` is already in (count desc, gram asc) order, which is the
        // per-key order as well since every gram of a key shares its first token.
        for (gram, count) in ranked {
            let values = table.entry(gram[0]).or_default();
            if values.len() < max_values_per_key {
                values.push((gram[1..].to_vec(), count));
            }
        }
        Ok(ModelDb { value_len: m, table })
    }

    pub fn value_len(&self) -> usize {
        self.value_len
    }

    pub fn key_count(&self) -> usize {
        self.table.len()
    }

    pub fn sequence_count(&self) -> usize {
        self.table.values().map(Vec::len).sum()
    }

    /// Stored values and counts for `key`.
    pub fn entries(&self, key: TokenId) -> &[(Vec<TokenId>, u64)] {
        self.table.get(&key).map_or(&[], Vec::as_slice)
    }

    pub fn lookup(&self, key: TokenId, want: usize) -> Vec<Vec<TokenId>> {
        self.entries(key)
            .iter()
            .take(want)
            .map(|(v, _)| v.clone())
            .collect()
    }

    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let header = Header {
            magic: MAGIC.into(),
            version: VERSION,
            m: self.value_len,
            keys: self.key_count(),
            sequences: self.sequence_count(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.push(b'\n');
        for (&key, entries) in &self.table {
            let rec = Record {
                key,
                values: entries.iter().map(|(v, _)| v.clone()).collect(),
                counts: entries.iter().map(|&(_, c)| c).collect(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::UnsupportedModelDb(msg);
        let mut lines = text.lines();
        let header: Header = lines
            .next()
            .and_then(|l| serde_json::from_str(l).ok())
            .ok_or_else(|| bad("missing header".into()))?;
        if header.magic != MAGIC || header.version != VERSION {
            return Err(bad(format!("magic {:?} version {}", header.magic, header.version)));
        }
        if header.m == 0 {
            return Err(bad("m must be >= 1".into()));
        }
        let mut table = BTreeMap::new();
        for (i, line) in lines.enumerate() {
            let rec: Record =
                serde_json::from_str(line).map_err(|e| bad(format!("record {}: {e}", i + 1)))?;
            if rec.values.len() != rec.counts.len() || rec.values.is_empty() {
                return Err(bad(format!("record {}: values/counts mismatch", i + 1)));
            }
            if rec.values.iter().any(|v| v.len() != header.m) {
                return Err(bad(format!("record {}: value length != m", i + 1)));
            }
            let entries: Vec<(Vec<TokenId>, u64)> = rec.values.into_iter().zip(rec.counts).collect();
            let sorted = entries
                .windows(2)
                .all(|w| w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
            if !sorted {
                return Err(bad(format!("record {}: values out of order", i + 1)));
            }
            if table.insert(rec.key, entries).is_some() {
                return Err(bad(format!("record {}: duplicate key {}", i + 1, rec.key)));
            }
        }
        let db = ModelDb {
            value_len: header.m,
            table,
        };
        if db.key_count() != header.keys || db.sequence_count() != header.sequences {
            return Err(bad("truncated: record totals differ from header".into()));
        }
        Ok(db)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_jsonl()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Vocab, EOS};
    use rand::{Rng, SeedableRng};

    fn corpus(docs: Vec<Vec<TokenId>>, vocab_words: usize) -> Corpus {
        let words: Vec<String> = (0..vocab_words).map(|i| format!("w{i}")).collect();
        Corpus {
            docs,
            vocab: Vocab::build(&[words.join(" ")]).unwrap(),
        }
    }

    #[test]
    fn single_window() {
        let c = corpus(vec![vec![3, 4, 5, 6, EOS]], 4);
        let db = ModelDb::build(&c, DEFAULT_TOP_K, 4, 7).unwrap();
        assert_eq!(db.entries(3), &[(vec![4, 5, 6, EOS], 1)]);
        assert_eq!(db.sequence_count(), 1);
    }

    #[test]
    fn top_k_keeps_most_frequent() {
        let mut docs = vec![vec![7, 8, 9, 9, 9]; 5];
        docs.push(vec![3, 4, 5, 6, 7, 8]);
        let c = corpus(docs, 10);
        let db = ModelDb::build(&c, 1, 4, 7).unwrap();
        assert_eq!(db.key_count(), 1);
        assert_eq!(db.lookup(7, 7), vec![vec![8, 9, 9, 9]]);
        assert!(db.lookup(3, 7).is_empty());
    }

    #[test]
    fn lookup_edges() {
        let c = corpus(vec![vec![3, 4, 5, 6, EOS]], 4);
        let db = ModelDb::build(&c, 10, 4, 7).unwrap();
        assert!(db.lookup(9, 3).is_empty());
        assert!(db.lookup(3, 0).is_empty());
        assert!(ModelDb::build(&corpus(vec![], 3), 10, 4, 7).is_err());
    }

    #[test]
    fn per_key_truncation() {
        let docs: Vec<Vec<TokenId>> = (0..5).map(|i| vec![3, 10 + i]).collect();
        let db = ModelDb::build(&corpus(docs, 20), 100, 1, 3).unwrap();
        assert_eq!(db.lookup(3, 10), vec![vec![10], vec![11], vec![12]]);
    }

    /// Counts grams with a nested-loop scan and ranks them independently.
    fn oracle_top(docs: &[Vec<TokenId>], k: usize, m: usize) -> Vec<(Vec<TokenId>, u64)> {
        let mut counts: BTreeMap<Vec<TokenId>, u64> = BTreeMap::new();
        for d in docs {
            if d.len() > m {
                for i in 0..=d.len() - (m + 1) {
                    *counts.entry(d[i..i + m + 1].to_vec()).or_default() += 1;
                }
            }
        }
        let mut v: Vec<_> = counts.into_iter().collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v.truncate(k);
        v
    }

    #[test]
    fn retained_set_matches_counting_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let docs: Vec<Vec<TokenId>> = (0..500)
            .map(|_| {
                let mut d: Vec<TokenId> = (0..99).map(|_| rng.random_range(3..9)).collect();
                d.push(EOS);
                d
            })
            .collect();
        let c = corpus(docs.clone(), 6);
        let top_k = 300;
        let db = ModelDb::build(&c, top_k, 3, usize::MAX).unwrap();
        let oracle = oracle_top(&docs, top_k, 3);
        let mut stored: Vec<(Vec<TokenId>, u64)> = Vec::new();
        for key in 0..20 {
            for (v, cnt) in db.entries(key) {
                let mut g = vec![key];
                g.extend(v);
                stored.push((g, *cnt));
            }
        }
        stored.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        assert_eq!(stored, oracle);
        // per-key order follows oracle counts
        for key in 3..9 {
            let from_oracle: Vec<Vec<TokenId>> = oracle
                .iter()
                .filter(|(g, _)| g[0] == key)
                .map(|(g, _)| g[1..].to_vec())
                .collect();
            assert_eq!(db.lookup(key, usize::MAX), from_oracle);
        }
    }

    #[test]
    fn jsonl_round_trip_and_fail_closed() {
        let c = corpus(vec![vec![3, 4, 5, 6, EOS], vec![3, 4, 5, 6, 4, EOS]], 4);
        let db = ModelDb::build(&c, 10, 4, 7).unwrap();
        let bytes = db.to_jsonl().unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with(r#"{"magic":"HDMD","version":1,"m":4"#));
        assert_eq!(ModelDb::from_jsonl(&text).unwrap(), db);

        let last_line = text.trim_end().rfind('\n').unwrap();
        assert!(ModelDb::from_jsonl(&text[..last_line + 1]).is_err());
        assert!(ModelDb::from_jsonl(&text[..text.len() - 5]).is_err());
        let wrong = text.replace("HDMD", "XXXX");
        let err = ModelDb::from_jsonl(&wrong).unwrap_err();
        assert!(err.to_string().starts_with("unsupported model-db file"));
        let v2 = text.replace(r#""version":1"#, r#""version":2"#);
        assert!(ModelDb::from_jsonl(&v2).is_err());
    }

    #[test]
    fn save_is_byte_stable() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let docs: Vec<Vec<TokenId>> = (0..2000)
            .map(|_| (0..60).map(|_| rng.random_range(3..400)).collect())
            .collect();
        let c = corpus(docs, 400);
        let db = ModelDb::build(&c, 100_000, 4, usize::MAX).unwrap();
        assert_eq!(db.sequence_count(), 100_000);
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        db.save(&a).unwrap();
        ModelDb::load(&a).unwrap().save(&b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        let again = ModelDb::build(&c, 100_000, 4, usize::MAX).unwrap();
        assert_eq!(again.to_jsonl().unwrap(), fs::read(&a).unwrap());
    }
}
