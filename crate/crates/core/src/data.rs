//! Synthetic corpus and BERT-style pre-training batches.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
/// First id available to content tokens.
pub const FIRST_CONTENT: usize = 5;

pub const MASK_RATE: f64 = 0.15;

/// Successor candidates per token in the generator's transition table.
const BRANCHING: usize = 4;
const SENTENCE_LEN: (usize, usize) = (4, 12);
const SENTENCES_PER_DOC: (usize, usize) = (3, 8);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub vocab: Vec<String>,
    /// Documents as lists of sentences.
    pub documents: Vec<Vec<Vec<usize>>>,
}

/// Markov chain over content tokens: each token has a few preferred
/// successors with skewed weights.
struct Chain {
    next: Vec<[(usize, f64); BRANCHING]>,
}

impl Chain {
    fn new(rng: &mut ChaCha8Rng, vocab_size: usize) -> Self {
        let content = vocab_size - FIRST_CONTENT;
        let weights = [0.55, 0.25, 0.12, 0.08];
        let next = (0..content)
            .map(|_| {
                let mut row = [(0, 0.0); BRANCHING];
                for (slot, w) in row.iter_mut().zip(weights) {
                    *slot = (FIRST_CONTENT + rng.gen_range(0..content), w);
                }
                row
            })
            .collect();
        Chain { next }
    }

    fn step(&self, rng: &mut ChaCha8Rng, token: usize) -> usize {
        let mut u: f64 = rng.gen();
        for &(t, w) in &self.next[token - FIRST_CONTENT] {
            if u < w {
                return t;
            }
            u -= w;
        }
        self.next[token - FIRST_CONTENT][BRANCHING - 1].0
    }
}

fn reserved_vocab(vocab_size: usize) -> Vec<String> {
    let mut vocab: Vec<String> = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    vocab.extend((FIRST_CONTENT..vocab_size).map(|i| format!("w{i}")));
    vocab
}

impl Corpus {
    /// Deterministic per `seed`. Sentences follow the chain, and each
    /// document's next sentence continues from the previous one's last token,
    /// so true next-sentence pairs are distinguishable from random ones.
    pub fn generate(seed: u64, vocab_size: usize, num_docs: usize) -> Result<Self> {
        if vocab_size < 16 {
            return Err(Error::Config(format!("vocab_size must be at least 16, got {vocab_size}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chain = Chain::new(&mut rng, vocab_size);
        let mut documents = Vec::with_capacity(num_docs);
        for _ in 0..num_docs {
            let n = rng.gen_range(SENTENCES_PER_DOC.0..=SENTENCES_PER_DOC.1);
            let mut token = rng.gen_range(FIRST_CONTENT..vocab_size);
            let doc = (0..n)
                .map(|_| {
                    let len = rng.gen_range(SENTENCE_LEN.0..=SENTENCE_LEN.1);
                    (0..len)
                        .map(|_| {
                            token = chain.step(&mut rng, token);
                            token
                        })
                        .collect()
                })
                .collect();
            documents.push(doc);
        }
        Ok(Corpus {
            vocab: reserved_vocab(vocab_size),
            documents,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn num_sentences(&self) -> usize {
        self.documents.iter().map(Vec::len).sum()
    }

    pub fn tokens(&self) -> impl Iterator<Item = usize> + '_ {
        self.documents.iter().flatten().flatten().copied()
    }

    /// Fraction of content tokens taken by the most frequent one.
    pub fn majority_baseline(&self) -> f64 {
        let mut counts = vec![0usize; self.vocab_size()];
        let mut total = 0;
        for t in self.tokens() {
            counts[t] += 1;
            total += 1;
        }
        counts.iter().copied().max().unwrap_or(0) as f64 / total.max(1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vocab_size();
        if let Some(bad) = self.tokens().find(|&t| t >= v) {
            return Err(Error::Data(format!("token id {bad} outside vocabulary of {v}")));
        }
        Ok(())
    }

    /// One line per sentence (space-separated ids), a blank line between
    /// documents; the vocabulary goes to a JSON sidecar.
    pub fn export(&self, text: impl AsRef<Path>, vocab: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(text)?);
        for (d, doc) in self.documents.iter().enumerate() {
            if d > 0 {
                writeln!(out)?;
            }
            for s in doc {
                let line: Vec<String> = s.iter().map(usize::to_string).collect();
                writeln!(out, "{}", line.join(" "))?;
            }
        }
        out.flush()?;
        fs::write(vocab, serde_json::to_string_pretty(&self.vocab)?)?;
        Ok(())
    }

    pub fn import(text: impl AsRef<Path>, vocab: impl AsRef<Path>) -> Result<Self> {
        let vocab: Vec<String> = serde_json::from_str(&fs::read_to_string(vocab)?)?;
        let mut documents = Vec::new();
        let mut doc = Vec::new();
        for (n, line) in BufReader::new(fs::File::open(text)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                if !doc.is_empty() {
                    documents.push(std::mem::take(&mut doc));
                }
                continue;
            }
            let sentence = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|_| Error::Data(format!("line {}: `{t}` is not a token id", n + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            doc.push(sentence);
        }
        if !doc.is_empty() {
            documents.push(doc);
        }
        let corpus = Corpus { vocab, documents };
        corpus.validate()?;
        Ok(corpus)
    }
}

/// How a selected position was corrupted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainBatch {
    pub batch: usize,
    pub len: usize,
    /// `[batch * len]`, row-major.
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    /// Non-padding positions.
    pub attention_mask: Vec<bool>,
    /// Flat indices into `token_ids` of the masked positions.
    pub mlm_positions: Vec<usize>,
    /// Original token at each masked position.
    pub mlm_labels: Vec<usize>,
    pub corruption: Vec<Corruption>,
    /// 1 when segment B really follows segment A.
    pub nsp_labels: Vec<usize>,
}

impl PretrainBatch {
    /// Masked positions that fall in sequence `b`.
    pub fn masked_in(&self, b: usize) -> usize {
        let range = b * self.len..(b + 1) * self.len;
        self.mlm_positions.iter().filter(|p| range.contains(p)).count()
    }

    pub fn valid_in(&self, b: usize) -> usize {
        self.attention_mask[b * self.len..(b + 1) * self.len].iter().filter(|&&m| m).count()
    }
}

/// `max(1, floor(0.15 * valid))`.
pub fn masked_count(valid: usize) -> usize {
    ((MASK_RATE * valid as f64).floor() as usize).max(1)
}

fn truncate_pair(a: &mut Vec<usize>, b: &mut Vec<usize>, budget: usize) {
    while a.len() + b.len() > budget {
        if a.len() > b.len() {
            a.pop();
        } else {
            b.pop();
        }
    }
}

/// Builds `[CLS] A [SEP] B [SEP]` pairs, half of them true continuations,
/// then masks content positions with the 80/10/10 scheme.
pub fn make_batch(corpus: &Corpus, batch: usize, len: usize, seed: u64) -> Result<PretrainBatch> {
    if len < 8 {
        return Err(Error::Config(format!("sequence length must be at least 8, got {len}")));
    }
    let sources: Vec<(usize, usize)> = corpus
        .documents
        .iter()
        .enumerate()
        .flat_map(|(d, doc)| (0..doc.len().saturating_sub(1)).map(move |s| (d, s)))
        .collect();
    if sources.len() < batch || corpus.num_sentences() < 2 {
        return Err(Error::Data(format!(
            "corpus has {} sentence pairs, need at least {batch}",
            sources.len()
        )));
    }
    let vocab = corpus.vocab_size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<&(usize, usize)> = sources.choose_multiple(&mut rng, batch).collect();

    let mut out = PretrainBatch {
        batch,
        len,
        token_ids: vec![PAD; batch * len],
        segment_ids: vec![0; batch * len],
        attention_mask: vec![false; batch * len],
        mlm_positions: Vec::new(),
        mlm_labels: Vec::new(),
        corruption: Vec::new(),
        nsp_labels: Vec::with_capacity(batch),
    };
    for (b, &&(d, s)) in picks.iter().enumerate() {
        let mut first = corpus.documents[d][s].clone();
        let is_next = rng.gen_bool(0.5);
        let mut second = if is_next {
            corpus.documents[d][s + 1].clone()
        } else {
            loop {
                let od = rng.gen_range(0..corpus.documents.len());
                let doc = &corpus.documents[od];
                let os = rng.gen_range(0..doc.len());
                if !(od == d && os == s + 1) {
                    break doc[os].clone();
                }
            }
        };
        out.nsp_labels.push(usize::from(is_next));
        truncate_pair(&mut first, &mut second, len - 3);

        let row = b * len;
        let mut seq = Vec::with_capacity(len);
        seq.push((CLS, 0));
        seq.extend(first.iter().map(|&t| (t, 0)));
        seq.push((SEP, 0));
        seq.extend(second.iter().map(|&t| (t, 1)));
        seq.push((SEP, 1));
        for (i, &(t, seg)) in seq.iter().enumerate() {
            out.token_ids[row + i] = t;
            out.segment_ids[row + i] = seg;
            out.attention_mask[row + i] = true;
        }

        let candidates: Vec<usize> = (0..seq.len()).filter(|&i| seq[i].0 >= FIRST_CONTENT).collect();
        let want = masked_count(seq.len()).min(candidates.len());
        let mut chosen: Vec<usize> = candidates.choose_multiple(&mut rng, want).copied().collect();
        chosen.sort_unstable();
        for i in chosen {
            let pos = row + i;
            out.mlm_positions.push(pos);
            out.mlm_labels.push(out.token_ids[pos]);
            let u: f64 = rng.gen();
            let kind = if u < 0.8 {
                out.token_ids[pos] = MASK;
                Corruption::Mask
            } else if u < 0.9 {
                out.token_ids[pos] = rng.gen_range(FIRST_CONTENT..vocab);
                Corruption::Random
            } else {
                Corruption::Keep
            };
            out.corruption.push(kind);
        }
    }
    Ok(out)
}
