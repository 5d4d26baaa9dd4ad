//! Synthetic bilingual corpus: a random source-to-target lexicon, a
//! position-reordering grammar, length-bucketed batching and the novel
//! concept injection set.
//!
//! Vocabulary layout (one shared id space):
//!
//! | ids                              | meaning                      |
//! |----------------------------------|------------------------------|
//! | 0..4                             | PAD, BOS, EOS, UNK           |
//! | 4..4+C                           | source content tokens `s{i}` |
//! | 4+C..4+2C                        | target content tokens `t{i}` |
//! | 4+2C..4+2C+NOVEL_SLOTS           | novel source tokens `n{k}`   |

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const RESERVED: usize = 4;
pub const NOVEL_SLOTS: usize = 5;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("vocabulary of {content} content tokens cannot supply {requested} distinct sentences")]
    VocabTooSmall { content: usize, requested: usize },
    #[error("need {needed} unused token ids, only {available} available")]
    InsufficientIds { needed: usize, available: usize },
    #[error("invalid grammar: {0}")]
    Grammar(String),
    #[error("malformed corpus file {file}: line {line}")]
    Malformed { file: String, line: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Derives an independent seed for a named stream.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}/{stream}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    surfaces: Vec<String>,
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn surface(&self, id: usize) -> &str {
        self.surfaces.get(id).map(String::as_str).unwrap_or("<unk>")
    }

    /// Hex SHA-256 over the ordered surface strings.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.surfaces {
            h.update(s.as_bytes());
            h.update(b"\n");
        }
        hex_digest(h)
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        let mut out = String::new();
        for (i, s) in self.surfaces.iter().enumerate() {
            writeln!(out, "{i}\t{s}").expect("string write");
        }
        fs::write(path, out)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut surfaces = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            let (id, s) = line
                .split_once('\t')
                .ok_or_else(|| DataError::Malformed { file: path.display().to_string(), line: line_no + 1 })?;
            if id.parse::<usize>().ok() != Some(surfaces.len()) {
                return Err(DataError::Malformed { file: path.display().to_string(), line: line_no + 1 });
            }
            surfaces.push(s.to_string());
        }
        Ok(Self { surfaces })
    }
}

fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Random bijection between source and target content tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticLexicon {
    content: usize,
    forward: Vec<usize>,
    inverse: Vec<usize>,
}

impl SyntheticLexicon {
    pub fn new(content: usize, seed: u64) -> Self {
        let mut forward: Vec<usize> = (0..content).collect();
        forward.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "lexicon")));
        let mut inverse = vec![0; content];
        for (s, &t) in forward.iter().enumerate() {
            inverse[t] = s;
        }
        Self { content, forward, inverse }
    }

    pub fn content_size(&self) -> usize {
        self.content
    }

    pub fn vocab_size(&self) -> usize {
        RESERVED + 2 * self.content + NOVEL_SLOTS
    }

    pub fn source_id(&self, i: usize) -> usize {
        RESERVED + i
    }

    pub fn target_id(&self, i: usize) -> usize {
        RESERVED + self.content + i
    }

    pub fn novel_id(&self, k: usize) -> usize {
        RESERVED + 2 * self.content + k
    }

    pub fn is_source(&self, id: usize) -> bool {
        (RESERVED..RESERVED + self.content).contains(&id)
    }

    pub fn is_target(&self, id: usize) -> bool {
        (RESERVED + self.content..RESERVED + 2 * self.content).contains(&id)
    }

    /// Target token for a source content token.
    pub fn map(&self, source: usize) -> Option<usize> {
        self.is_source(source).then(|| self.target_id(self.forward[source - RESERVED]))
    }

    /// Source token for a target content token.
    pub fn unmap(&self, target: usize) -> Option<usize> {
        self.is_target(target).then(|| self.source_id(self.inverse[target - RESERVED - self.content]))
    }

    pub fn vocab(&self) -> Vocab {
        let mut surfaces: Vec<String> = ["<pad>", "<bos>", "<eos>", "<unk>"].iter().map(|s| s.to_string()).collect();
        surfaces.extend((0..self.content).map(|i| format!("s{i}")));
        surfaces.extend((0..self.content).map(|i| format!("t{i}")));
        surfaces.extend((0..NOVEL_SLOTS).map(|k| format!("n{k}")));
        Vocab { surfaces }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReorderRule {
    Identity,
    AdjacentSwap,
    BlockReverse,
}

/// Block size for [`ReorderRule::BlockReverse`].
pub const REVERSE_BLOCK: usize = 3;

impl ReorderRule {
    /// `perm[p]` is the source position that lands at target position `p`.
    pub fn permutation(self, len: usize) -> Vec<usize> {
        match self {
            ReorderRule::Identity => (0..len).collect(),
            ReorderRule::AdjacentSwap => (0..len)
                .map(|p| if p % 2 == 0 { if p + 1 < len { p + 1 } else { p } } else { p - 1 })
                .collect(),
            ReorderRule::BlockReverse => (0..len)
                .map(|p| {
                    let start = p / REVERSE_BLOCK * REVERSE_BLOCK;
                    let end = (start + REVERSE_BLOCK).min(len);
                    start + (end - 1 - p)
                })
                .collect(),
        }
    }

    /// `inv[i]` is the target position of source position `i`.
    pub fn inverse(self, len: usize) -> Vec<usize> {
        let perm = self.permutation(len);
        let mut inv = vec![0; len];
        for (p, &i) in perm.iter().enumerate() {
            inv[i] = p;
        }
        inv
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrammarSpec {
    pub rule: ReorderRule,
    pub min_len: usize,
    pub max_len: usize,
}

impl GrammarSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(DataError::Grammar(format!("length range [{}, {}]", self.min_len, self.max_len)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub src: Vec<usize>,
    /// `BOS`, mapped and reordered tokens, `EOS`.
    pub tgt: Vec<usize>,
}

impl Pair {
    /// Target content without the BOS/EOS wrapper.
    pub fn reference(&self) -> &[usize] {
        &self.tgt[1..self.tgt.len() - 1]
    }
}

/// Translates a source sentence; `novel` supplies targets for novel ids.
pub fn translate(lex: &SyntheticLexicon, rule: ReorderRule, src: &[usize], novel: &[(usize, usize)]) -> Vec<usize> {
    let mapped: Vec<usize> = src
        .iter()
        .map(|&s| lex.map(s).or_else(|| novel.iter().find(|(n, _)| *n == s).map(|(_, t)| *t)).unwrap_or(UNK))
        .collect();
    let mut tgt = Vec::with_capacity(src.len() + 2);
    tgt.push(BOS);
    tgt.extend(rule.permutation(src.len()).into_iter().map(|i| mapped[i]));
    tgt.push(EOS);
    tgt
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<Pair>,
    pub valid: Vec<Pair>,
    pub test: Vec<Pair>,
}

impl Corpus {
    /// Hex SHA-256 of a split's token content, used to confirm two BLEU
    /// measurements came from the same data.
    pub fn split_hash(pairs: &[Pair]) -> String {
        let mut h = Sha256::new();
        for p in pairs {
            for t in p.src.iter().chain(&p.tgt) {
                h.update((*t as u64).to_le_bytes());
            }
            h.update(b"|");
        }
        hex_digest(h)
    }
}

fn distinct_sentence_capacity(content: usize, grammar: &GrammarSpec) -> usize {
    let mut total: usize = 0;
    for len in grammar.min_len..=grammar.max_len {
        let n = (content as u128).checked_pow(len as u32).unwrap_or(u128::MAX);
        total = total.saturating_add(usize::try_from(n).unwrap_or(usize::MAX));
    }
    total
}

fn sample_sentence(rng: &mut ChaCha8Rng, lex: &SyntheticLexicon, grammar: &GrammarSpec) -> Vec<usize> {
    let len = rng.random_range(grammar.min_len..=grammar.max_len);
    (0..len).map(|_| lex.source_id(rng.random_range(0..lex.content))).collect()
}

/// Generates disjoint train/valid/test splits, each from its own seed
/// stream. No source sentence appears in more than one split.
pub fn gen_corpus(lex: &SyntheticLexicon, grammar: &GrammarSpec, sizes: CorpusSizes, seed: u64) -> Result<Corpus> {
    grammar.validate()?;
    let requested = sizes.train + sizes.valid + sizes.test;
    // Keep sampling well below saturation of the sentence space.
    if distinct_sentence_capacity(lex.content, grammar) / 2 < requested || lex.content == 0 {
        return Err(DataError::VocabTooSmall { content: lex.content, requested });
    }
    let mut seen: HashSet<Vec<usize>> = HashSet::with_capacity(requested);
    let mut split = |name: &str, count: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, name));
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let src = sample_sentence(&mut rng, lex, grammar);
            if seen.insert(src.clone()) {
                let tgt = translate(lex, grammar.rule, &src, &[]);
                out.push(Pair { src, tgt });
            }
        }
        out
    };
    let train = split("train", sizes.train);
    let valid = split("valid", sizes.valid);
    let test = split("test", sizes.test);
    Ok(Corpus { train, valid, test })
}

fn ids_to_text(ids: &[usize]) -> String {
    ids.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn write_pairs(path: &Path, pairs: &[Pair]) -> io::Result<()> {
    let mut out = String::new();
    for p in pairs {
        writeln!(out, "{}\t{}", ids_to_text(&p.src), ids_to_text(&p.tgt)).expect("string write");
    }
    fs::write(path, out)
}

pub fn read_pairs(path: &Path) -> Result<Vec<Pair>> {
    let text = fs::read_to_string(path)?;
    let malformed = |line| DataError::Malformed { file: path.display().to_string(), line };
    let parse = |s: &str, line| -> Result<Vec<usize>> {
        s.split_whitespace().map(|t| t.parse().map_err(|_| malformed(line))).collect()
    };
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let (s, t) = line.split_once('\t').ok_or_else(|| malformed(i + 1))?;
            let pair = Pair { src: parse(s, i + 1)?, tgt: parse(t, i + 1)? };
            if pair.tgt.len() < 2 {
                return Err(malformed(i + 1));
            }
            Ok(pair)
        })
        .collect()
}

/// Writes `train.tsv`, `valid.tsv`, `test.tsv` and `vocab.tsv` into `dir`.
pub fn write_corpus(dir: &Path, corpus: &Corpus, vocab: &Vocab) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    write_pairs(&dir.join("train.tsv"), &corpus.train)?;
    write_pairs(&dir.join("valid.tsv"), &corpus.valid)?;
    write_pairs(&dir.join("test.tsv"), &corpus.test)?;
    vocab.write(&dir.join("vocab.tsv"))
}

pub fn read_corpus(dir: &Path) -> Result<(Corpus, Vocab)> {
    let corpus = Corpus {
        train: read_pairs(&dir.join("train.tsv"))?,
        valid: read_pairs(&dir.join("valid.tsv"))?,
        test: read_pairs(&dir.join("test.tsv"))?,
    };
    Ok((corpus, Vocab::read(&dir.join("vocab.tsv"))?))
}

/// Pairs whose source length falls in `[band.0, band.1)`, cut into batches
/// of at most `token_budget` source tokens (a single over-long pair still
/// forms its own batch).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bucket {
    pub band: (usize, usize),
    pub members: Vec<usize>,
    pub batches: Vec<Vec<usize>>,
    pub token_budget: usize,
}

pub fn pair_tokens(p: &Pair) -> usize {
    p.src.len()
}

/// Groups pairs into source-length bands `[1 + k*width, 1 + (k+1)*width)`.
pub fn make_buckets(pairs: &[Pair], token_budget: usize, width: usize) -> Vec<Bucket> {
    let width = width.max(1);
    let mut bands: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        bands.entry(p.src.len().saturating_sub(1) / width).or_default().push(i);
    }
    bands
        .into_iter()
        .map(|(k, members)| {
            let mut batches = Vec::new();
            let mut current: Vec<usize> = Vec::new();
            let mut tokens = 0;
            for &i in &members {
                let t = pair_tokens(&pairs[i]);
                if !current.is_empty() && tokens + t > token_budget {
                    batches.push(std::mem::take(&mut current));
                    tokens = 0;
                }
                current.push(i);
                tokens += t;
            }
            if !current.is_empty() {
                batches.push(current);
            }
            Bucket { band: (1 + k * width, 1 + (k + 1) * width), members, batches, token_budget }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub source: usize,
    pub target: usize,
}

/// One held-out acquisition probe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalItem {
    pub pair: Pair,
    pub concept: usize,
    /// Where the concept's target must appear in the decoded output
    /// (0-based, BOS excluded).
    pub target_pos: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InjectionSet {
    pub concepts: Vec<Concept>,
    pub train: Vec<Pair>,
    pub eval: Vec<EvalItem>,
}

pub const CONCEPTS: usize = 5;
pub const TRAIN_PER_CONCEPT: usize = 5;

impl InjectionSet {
    pub fn novel_pairs(&self) -> Vec<(usize, usize)> {
        self.concepts.iter().map(|c| (c.source, c.target)).collect()
    }
}

/// Five novel source tokens mapped onto existing target tokens, five
/// training sentences per concept and `eval_per_concept` held-out sentences
/// per concept in fresh contexts.
pub fn make_injection_set(
    lex: &SyntheticLexicon,
    grammar: &GrammarSpec,
    eval_per_concept: usize,
    seed: u64,
) -> Result<InjectionSet> {
    grammar.validate()?;
    if NOVEL_SLOTS < CONCEPTS || lex.content < CONCEPTS {
        return Err(DataError::InsufficientIds { needed: CONCEPTS, available: NOVEL_SLOTS.min(lex.content) });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "injection"));
    let mut targets: Vec<usize> = (0..lex.content).collect();
    targets.shuffle(&mut rng);
    let concepts: Vec<Concept> =
        (0..CONCEPTS).map(|k| Concept { source: lex.novel_id(k), target: lex.target_id(targets[k]) }).collect();
    let novel: Vec<(usize, usize)> = concepts.iter().map(|c| (c.source, c.target)).collect();

    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut sample = |rng: &mut ChaCha8Rng, k: usize| loop {
        let mut src = sample_sentence(rng, lex, grammar);
        let pos = rng.random_range(0..src.len());
        src[pos] = concepts[k].source;
        if seen.insert(src.clone()) {
            let tgt = translate(lex, grammar.rule, &src, &novel);
            let target_pos = grammar.rule.inverse(src.len())[pos];
            return (Pair { src, tgt }, target_pos);
        }
    };
    let mut train = Vec::with_capacity(CONCEPTS * TRAIN_PER_CONCEPT);
    for k in 0..CONCEPTS {
        for _ in 0..TRAIN_PER_CONCEPT {
            train.push(sample(&mut rng, k).0);
        }
    }
    let mut eval = Vec::with_capacity(CONCEPTS * eval_per_concept);
    for k in 0..CONCEPTS {
        for _ in 0..eval_per_concept {
            let (pair, target_pos) = sample(&mut rng, k);
            eval.push(EvalItem { pair, concept: k, target_pos });
        }
    }
    Ok(InjectionSet { concepts, train, eval })
}
