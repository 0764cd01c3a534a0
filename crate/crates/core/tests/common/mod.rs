#![allow(dead_code)]

use hierdraft::{
    autoregressive_decode, Corpus, DecodeConfig, KGramModel, ModelDb, StatsDb, TokenId, Vocab, EOS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Texts from a sparse second-order Markov source: every word pair has three
/// possible successors with weights 6:3:1.
pub fn markov_texts(seed: u64, vocab: u32, min_tokens: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let succ = |a: u32, b: u32, j: u32| -> u32 {
        let h = (a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (b as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F) ^ j as u64;
        (h.wrapping_mul(0xFF51_AFD7_ED55_8CCD) >> 33) as u32 % vocab
    };
    let mut texts = Vec::new();
    let mut total = 0;
    while total < min_tokens {
        let len = rng.random_range(80..200);
        let mut words = vec![rng.random_range(0..vocab), rng.random_range(0..vocab)];
        while words.len() < len {
            let r = rng.random_range(0..10);
            let j = if r < 6 { 0 } else if r < 9 { 1 } else { 2 };
            let n = words.len();
            words.push(succ(words[n - 2], words[n - 1], j));
        }
        total += len;
        texts.push(words.iter().map(|w| format!("w{w}")).collect::<Vec<_>>().join(" "));
    }
    texts
}

pub struct World {
    pub corpus: Corpus,
    pub model: KGramModel,
    pub model_db: ModelDb,
    pub stats_db: StatsDb,
    pub prompts: Vec<Vec<TokenId>>,
}

/// A k=3 model on a >= 50k token corpus, with a model DB built from its own
/// greedy generations and a statistics DB over the training corpus.
pub fn world(prompts: usize) -> World {
    let texts = markov_texts(11, 400, 50_000);
    let vocab = Vocab::build(&texts).unwrap();
    let corpus = Corpus::from_texts(&texts, vocab);
    assert!(corpus.token_count() >= 50_000);
    let model = KGramModel::fit(&corpus, 3, 0.1).unwrap();
    let stats_db = StatsDb::build(&corpus).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let sample_prompt = |rng: &mut ChaCha8Rng| loop {
        let doc = &corpus.docs[rng.random_range(0..corpus.docs.len())];
        let len = rng.random_range(3..12);
        if doc.len() <= len + 1 {
            continue;
        }
        let start = rng.random_range(0..doc.len() - len - 1);
        let p = doc[start..start + len].to_vec();
        if !p.contains(&EOS) {
            return p;
        }
    };
    let cfg = DecodeConfig {
        max_tokens: 64,
        ..Default::default()
    };
    let gens: Vec<Vec<TokenId>> = (0..60)
        .map(|_| {
            let p = sample_prompt(&mut rng);
            autoregressive_decode(&model, &p, &cfg).unwrap().tokens
        })
        .collect();
    let gen_corpus = Corpus {
        docs: gens,
        vocab: corpus.vocab.clone(),
    };
    let model_db = ModelDb::build(&gen_corpus, 100_000, 4, 7).unwrap();
    let prompts = (0..prompts).map(|_| sample_prompt(&mut rng)).collect();
    World {
        corpus,
        model,
        model_db,
        stats_db,
        prompts,
    }
}

/// Distinct words `p0 .. p{len-1}`.
pub fn passage(len: usize) -> String {
    (0..len).map(|i| format!("p{i}")).collect::<Vec<_>>().join(" ")
}

pub struct Fixture {
    pub vocab: Vocab,
    pub model: KGramModel,
    pub stats_db: StatsDb,
    pub prompt: Vec<TokenId>,
}

/// The repeated-passage fixture: prompt = passage ++ passage, the model is
/// fit on the passage repeated so it keeps cycling instead of stopping.
pub fn repeated_passage(len: usize) -> Fixture {
    let p = passage(len);
    let train = vec![[p.as_str(); 4].join(" ")];
    let vocab = Vocab::build(&train).unwrap();
    let corpus = Corpus::from_texts(&train, vocab.clone());
    let model = KGramModel::fit(&corpus, 3, 0.01).unwrap();
    let stats_db = StatsDb::build(&corpus).unwrap();
    let mut prompt = vocab.tokenize(&p);
    prompt.extend(vocab.tokenize(&p));
    Fixture {
        vocab,
        model,
        stats_db,
        prompt,
    }
}

/// A model over at most 10 token ids with skewed, history-dependent
/// next-token laws.
pub fn tiny_model() -> (KGramModel, Corpus, Vec<TokenId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let words = ["a", "b", "c", "d", "e", "f", "g"];
    let mut texts = Vec::new();
    for _ in 0..40 {
        let mut doc = Vec::new();
        let mut prev = 0usize;
        for _ in 0..30 {
            // mostly step forward, sometimes jump
            prev = if rng.random_bool(0.7) { (prev + 1) % 4 } else { rng.random_range(0..words.len()) };
            doc.push(words[prev]);
        }
        texts.push(doc.join(" "));
    }
    let vocab = Vocab::build(&texts).unwrap();
    assert!(vocab.size() <= 10);
    let corpus = Corpus::from_texts(&texts, vocab.clone());
    let model = KGramModel::fit(&corpus, 3, 0.005).unwrap();
    let prompt = vocab.tokenize("a b c d a b c d a b");
    (model, corpus, prompt)
}

pub fn tv(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0
}
