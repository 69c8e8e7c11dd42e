//! Byte-level corpora, batching and a small synthetic text generator.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BYTE_VOCAB: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub vocab_size: usize,
    /// Hex SHA-256 of the source bytes.
    pub digest: String,
}

impl Corpus {
    /// Splits `bytes` into a training prefix and a contiguous validation
    /// tail of `round(len · val_fraction)` bytes.
    pub fn from_bytes(bytes: &[u8], val_fraction: f64) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::Input("corpus is empty".into()));
        }
        if !(val_fraction > 0.0 && val_fraction < 0.5) {
            return Err(Error::Config(format!("val_fraction {val_fraction} outside (0, 0.5)")));
        }
        let n_val = (bytes.len() as f64 * val_fraction).round() as usize;
        let split = bytes.len() - n_val;
        let ids: Vec<usize> = bytes.iter().map(|&b| b as usize).collect();
        Ok(Self {
            train: ids[..split].to_vec(),
            val: ids[split..].to_vec(),
            vocab_size: BYTE_VOCAB,
            digest: hex::encode(Sha256::digest(bytes)),
        })
    }
}

pub fn load_corpus(path: impl AsRef<Path>, val_fraction: f64) -> Result<Corpus> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    Corpus::from_bytes(&bytes, val_fraction)
}

/// A batch of `batch` windows of `seq_len` tokens, flattened row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub offsets: Vec<usize>,
    pub batch: usize,
    pub seq_len: usize,
}

/// Draws `batch` uniform window offsets; targets are the inputs shifted by
/// one position. Pure in the generator state: the advanced state is
/// returned alongside the batch.
pub fn sample_batch(
    tokens: &[usize],
    batch: usize,
    seq_len: usize,
    mut rng: ChaCha8Rng,
) -> Result<(Batch, ChaCha8Rng)> {
    if seq_len == 0 || batch == 0 {
        return Err(Error::Config("batch and sequence length must be positive".into()));
    }
    if tokens.len() < seq_len + 1 {
        return Err(Error::Input(format!(
            "{} tokens cannot fill a window of {}",
            tokens.len(),
            seq_len + 1
        )));
    }
    let max_offset = tokens.len() - seq_len - 1;
    let mut out = Batch {
        inputs: Vec::with_capacity(batch * seq_len),
        targets: Vec::with_capacity(batch * seq_len),
        offsets: Vec::with_capacity(batch),
        batch,
        seq_len,
    };
    for _ in 0..batch {
        let off = rng.random_range(0..=max_offset);
        out.offsets.push(off);
        out.inputs.extend_from_slice(&tokens[off..off + seq_len]);
        out.targets.extend_from_slice(&tokens[off + 1..off + seq_len + 1]);
    }
    Ok((out, rng))
}

const DETS: &[&str] = &["the", "a", "every", "this", "that", "one", "some", "our", "my", "no"];
const PREPS: &[&str] = &["near", "behind", "under", "beside", "across", "beyond", "inside", "above"];
const ADVS: &[&str] = &["slowly", "often", "never", "quietly", "always", "rarely", "gladly"];
const NAMES: &[&str] = &["Anna", "Tomas", "Mira", "Jonah", "Elise", "Ravi", "Sofia", "Karl"];
const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "br", "cl", "dr", "fl", "gr",
    "pl", "st", "tr", "sh", "ch", "th",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ea", "ou", "io"];
const CODAS: &[&str] = &["", "", "", "n", "r", "l", "m", "st", "nd", "ck"];

/// Fixed pseudo-word vocabulary shared by every seed, large enough that
/// memorizing its spellings taxes a small model.
struct Lexicon {
    nouns: Vec<String>,
    adjs: Vec<String>,
    verbs: Vec<String>,
}

const LEXICON_SEED: u64 = 0x1e71c0;

impl Lexicon {
    fn build() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(LEXICON_SEED);
        let mut seen = std::collections::HashSet::new();
        let mut words = |n: usize, rng: &mut ChaCha8Rng| {
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let syllables = rng.random_range(1..=3);
                let mut w = String::new();
                for _ in 0..syllables {
                    w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
                    w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
                }
                w.push_str(CODAS[rng.random_range(0..CODAS.len())]);
                if seen.insert(w.clone()) {
                    out.push(w);
                }
            }
            out
        };
        Self {
            nouns: words(600, &mut rng),
            adjs: words(300, &mut rng),
            verbs: words(200, &mut rng),
        }
    }
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T]) -> &'a T {
    // squared uniform skews choices toward the head of each list
    let u: f64 = rng.random();
    &items[((u * u) * items.len() as f64) as usize]
}

fn noun_phrase(rng: &mut ChaCha8Rng, lex: &Lexicon, out: &mut String) -> bool {
    let plural = rng.random_bool(0.3);
    if plural {
        out.push_str(if rng.random_bool(0.5) { "the" } else { "some" });
    } else {
        out.push_str(pick(rng, DETS));
    }
    out.push(' ');
    if rng.random_bool(0.5) {
        out.push_str(pick(rng, &lex.adjs));
        out.push(' ');
    }
    out.push_str(pick(rng, &lex.nouns));
    if plural {
        out.push('s');
    }
    plural
}

fn sentence(rng: &mut ChaCha8Rng, lex: &Lexicon, out: &mut String) {
    let start = out.len();
    if rng.random_bool(0.15) {
        out.push_str(pick(rng, NAMES));
        out.push_str(" says that ");
    }
    let plural = noun_phrase(rng, lex, out);
    out.push(' ');
    if rng.random_bool(0.25) {
        out.push_str(pick(rng, ADVS));
        out.push(' ');
    }
    out.push_str(pick(rng, &lex.verbs));
    if !plural {
        out.push('s');
    }
    out.push(' ');
    noun_phrase(rng, lex, out);
    if rng.random_bool(0.4) {
        out.push(' ');
        out.push_str(pick(rng, PREPS));
        out.push(' ');
        noun_phrase(rng, lex, out);
    }
    out.push('.');
    if let Some(first) = out[start..].chars().next() {
        let upper = first.to_ascii_uppercase();
        out.replace_range(start..start + 1, &upper.to_string());
    }
}

/// Deterministic English-like text of at least `min_bytes` bytes: a small
/// sentence grammar over a fixed lexicon of pseudo-words. Stand-in corpus
/// for desk-scale experiments.
pub fn synthetic_text(seed: u64, min_bytes: usize) -> String {
    let lex = Lexicon::build();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(min_bytes + 128);
    let mut in_paragraph = 0;
    while out.len() < min_bytes {
        sentence(&mut rng, &lex, &mut out);
        in_paragraph += 1;
        if in_paragraph >= 4 && rng.random_bool(0.3) {
            out.push('\n');
            in_paragraph = 0;
        } else {
            out.push(' ');
        }
    }
    out
}
