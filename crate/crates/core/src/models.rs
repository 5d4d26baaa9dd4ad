//! Encoder-decoder models: the harmonic (GHC) encoder with a real decoder,
//! and the tied-embedding attention baseline. Also parameter accounting,
//! checkpoints and semantic-map transplant.

use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, CVar, ParamId, ParamStore, Tape, Var};
use crate::datagen::{Pair, BOS, EOS, PAD};
use crate::layers::{
    self, complex_rms_norm, normal, AttentionLayout, AttentionParams, BridgeParams, ComplexLinear, GlobalKernel,
    HarmonicEmbeddingTable, LayerError, LayerNormParams, Linear, ModReluParams, SeqLayout, SpectralGateParams,
    EMBEDDING_STD,
};
use crate::numerics::{NumericsError, RealTensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("sequence of length {len} exceeds the configured maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("vocabulary mismatch: expected {expected}, found {found}")]
    VocabMismatch { expected: String, found: String },
    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Baseline,
    Prism,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Baseline => "baseline",
            Arch::Prism => "prism",
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Hidden width multiplier of the real feed-forward sublayers.
    pub ffn_mult: usize,
    /// Hidden width multiplier of the complex feed-forward sublayers.
    pub complex_ffn_mult: usize,
    /// Longest source sequence.
    pub max_len: usize,
    /// GHC kernel length; a power of two at least `max_len`.
    pub l_pad: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.vocab == 0 || self.d == 0 || self.max_len == 0 {
            return bad("vocab, d and max_len must be positive".into());
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("d={} not divisible by heads={}", self.d, self.heads));
        }
        if self.ffn_mult == 0 || self.complex_ffn_mult == 0 {
            return bad("feed-forward multipliers must be positive".into());
        }
        if !self.l_pad.is_power_of_two() || self.l_pad < self.max_len {
            return bad(format!("l_pad={} must be a power of two >= max_len={}", self.l_pad, self.max_len));
        }
        Ok(())
    }
}

/// Sinusoidal position table `[len, d]`.
pub fn positional_encoding(len: usize, d: usize) -> RealTensor {
    let mut data = vec![0.0; len * d];
    for t in 0..len {
        for j in 0..d {
            let rate = 10000f64.powf(-((j / 2 * 2) as f64) / d as f64);
            let a = t as f64 * rate;
            data[t * d + j] = if j % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    RealTensor::new(&[len, d], data).expect("shape")
}

/// A padded, teacher-forced batch. Row `b * len + t` holds position `t` of
/// sequence `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: Vec<usize>,
    pub src_valid: Vec<usize>,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
    pub tgt_valid: Vec<usize>,
    pub weights: Vec<f64>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&Pair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let size = pairs.len();
        let src_len = pairs.iter().map(|p| p.src.len()).max().unwrap_or(0).max(1);
        let tgt_len = pairs.iter().map(|p| p.tgt.len() - 1).max().unwrap_or(0).max(1);
        let mut b = Batch {
            size,
            src_len,
            tgt_len,
            src: vec![PAD; size * src_len],
            src_valid: Vec::with_capacity(size),
            tgt_in: vec![PAD; size * tgt_len],
            tgt_out: vec![PAD; size * tgt_len],
            tgt_valid: Vec::with_capacity(size),
            weights: vec![0.0; size * tgt_len],
        };
        for (i, p) in pairs.iter().enumerate() {
            b.src[i * src_len..i * src_len + p.src.len()].copy_from_slice(&p.src);
            b.src_valid.push(p.src.len());
            let n = p.tgt.len() - 1;
            b.tgt_in[i * tgt_len..i * tgt_len + n].copy_from_slice(&p.tgt[..n]);
            b.tgt_out[i * tgt_len..i * tgt_len + n].copy_from_slice(&p.tgt[1..]);
            b.weights[i * tgt_len..i * tgt_len + n].fill(1.0);
            b.tgt_valid.push(n);
        }
        Ok(b)
    }

    pub fn target_tokens(&self) -> usize {
        self.tgt_valid.iter().sum()
    }
}

#[derive(Debug, Clone)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(store: &mut ParamStore, name: &str, d: usize, mult: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d, mult * d, true, rng),
            down: Linear::new(store, &format!("{name}.down"), mult * d, d, true, rng),
        }
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.apply(tape, store, x)?;
        let h = tape.relu(h);
        Ok(self.down.apply(tape, store, h)?)
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln_attn: LayerNormParams,
    attn: AttentionParams,
    ln_ffn: LayerNormParams,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln_self: LayerNormParams,
    self_attn: AttentionParams,
    ln_cross: LayerNormParams,
    cross_attn: AttentionParams,
    ln_ffn: LayerNormParams,
    ffn: FeedForward,
}

/// Pre-norm residual block: gate, global convolution, ModReLU, then a
/// complex feed-forward.
#[derive(Debug, Clone)]
struct GhcBlock {
    gate: SpectralGateParams,
    kernel: GlobalKernel,
    act: ModReluParams,
    ff_up: ComplexLinear,
    ff_act: ModReluParams,
    ff_down: ComplexLinear,
}

impl GhcBlock {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (d, h) = (cfg.d, cfg.d * cfg.complex_ffn_mult);
        Ok(Self {
            gate: SpectralGateParams::new(store, &format!("{name}.gate"), d, rng),
            kernel: GlobalKernel::new(store, &format!("{name}.ghc"), d, cfg.l_pad, rng)?,
            act: ModReluParams::new(store, &format!("{name}.modrelu"), d),
            ff_up: ComplexLinear::new(store, &format!("{name}.ffn.up"), d, h, rng),
            ff_act: ModReluParams::new(store, &format!("{name}.ffn.modrelu"), h),
            ff_down: ComplexLinear::new(store, &format!("{name}.ffn.down"), h, d, rng),
        })
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, z: CVar, layout: &SeqLayout) -> Result<CVar> {
        let n = complex_rms_norm(tape, z)?;
        let g = self.gate.apply(tape, store, n)?;
        let c = self.kernel.apply(tape, store, g, layout)?;
        let a = self.act.apply(tape, store, c)?;
        let z = cadd(tape, z, a)?;
        let n = complex_rms_norm(tape, z)?;
        let h = self.ff_up.apply(tape, store, n)?;
        let h = self.ff_act.apply(tape, store, h)?;
        let f = self.ff_down.apply(tape, store, h)?;
        cadd(tape, z, f)
    }
}

fn cadd(tape: &mut Tape, a: CVar, b: CVar) -> Result<CVar> {
    Ok(CVar { re: tape.add(a.re, b.re)?, im: tape.add(a.im, b.im)? })
}

fn attn_layer(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<AttentionParams> {
    Ok(AttentionParams::new(store, name, cfg.d, cfg.heads, rng)?)
}

/// Real Transformer decoder shared by both architectures. The output
/// projection is the transposed embedding table.
#[derive(Debug, Clone)]
struct Decoder {
    embed: ParamId,
    layers: Vec<DecoderLayer>,
    ln_final: LayerNormParams,
}

impl Decoder {
    fn new(store: &mut ParamStore, embed: ParamId, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(cfg.dec_layers);
        for i in 0..cfg.dec_layers {
            let name = format!("decoder.layer{i}");
            layers.push(DecoderLayer {
                ln_self: LayerNormParams::new(store, &format!("{name}.ln_self"), cfg.d),
                self_attn: attn_layer(store, &format!("{name}.self_attn"), cfg, rng)?,
                ln_cross: LayerNormParams::new(store, &format!("{name}.ln_cross"), cfg.d),
                cross_attn: attn_layer(store, &format!("{name}.cross_attn"), cfg, rng)?,
                ln_ffn: LayerNormParams::new(store, &format!("{name}.ln_ffn"), cfg.d),
                ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg.d, cfg.ffn_mult, rng),
            });
        }
        Ok(Self { embed, layers, ln_final: LayerNormParams::new(store, "decoder.ln_final", cfg.d) })
    }

    /// Final hidden states `[size * tgt_len, d]`.
    fn hidden(&self, tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, mem: &Memory, tgt_in: &[usize], tgt_len: usize) -> Result<Var> {
        let size = mem.src_valid.len();
        let mut x = embed_tokens(tape, store, self.embed, cfg, tgt_in, tgt_len)?;
        let tgt_valid = vec![tgt_len; size];
        let self_layout = AttentionLayout {
            batch: size,
            q_len: tgt_len,
            k_len: tgt_len,
            heads: cfg.heads,
            causal: true,
            key_valid: tgt_valid,
        };
        let cross_layout = AttentionLayout {
            batch: size,
            q_len: tgt_len,
            k_len: mem.src_len,
            heads: cfg.heads,
            causal: false,
            key_valid: mem.src_valid.clone(),
        };
        for l in &self.layers {
            let h = l.ln_self.apply(tape, store, x)?;
            let a = l.self_attn.apply(tape, store, h, h, &self_layout)?;
            x = tape.add(x, a)?;
            let h = l.ln_cross.apply(tape, store, x)?;
            let a = l.cross_attn.apply(tape, store, h, mem.states, &cross_layout)?;
            x = tape.add(x, a)?;
            let h = l.ln_ffn.apply(tape, store, x)?;
            let f = l.ffn.apply(tape, store, h)?;
            x = tape.add(x, f)?;
        }
        Ok(self.ln_final.apply(tape, store, x)?)
    }

    fn logits(&self, tape: &mut Tape, store: &ParamStore, hidden: Var) -> Result<Var> {
        let table = tape.param(store, self.embed);
        Ok(tape.matmul_bt(hidden, table)?)
    }
}

/// Scaled token embedding plus sinusoidal positions.
fn embed_tokens(tape: &mut Tape, store: &ParamStore, table: ParamId, cfg: &ModelConfig, ids: &[usize], len: usize) -> Result<Var> {
    let table = tape.param(store, table);
    let e = tape.gather(table, ids)?;
    let e = tape.scale(e, (cfg.d as f64).sqrt());
    let pe = positional_encoding(len, cfg.d);
    let rows = ids.len();
    let mut tiled = Vec::with_capacity(rows * cfg.d);
    for _ in 0..rows / len {
        tiled.extend_from_slice(pe.data());
    }
    let pe = tape.constant(RealTensor::new(&[rows, cfg.d], tiled)?);
    Ok(tape.add(e, pe)?)
}

/// Encoder output consumed by decoder cross-attention.
#[derive(Debug, Clone)]
struct Memory {
    states: Var,
    src_len: usize,
    src_valid: Vec<usize>,
}

/// Attention encoder-decoder with one embedding table shared by the encoder
/// input, decoder input and output projection.
#[derive(Debug, Clone)]
pub struct BaselineModel {
    pub embed: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_ln_final: LayerNormParams,
    decoder: Decoder,
}

/// Harmonic encoder (GHC blocks over complex embeddings), bridge and a real
/// decoder with its own embedding table.
#[derive(Debug, Clone)]
pub struct PrismModel {
    pub harmonic: HarmonicEmbeddingTable,
    pub dec_embed: ParamId,
    blocks: Vec<GhcBlock>,
    bridge: BridgeParams,
    decoder: Decoder,
}

#[derive(Debug, Clone)]
pub enum Network {
    Baseline(BaselineModel),
    Prism(PrismModel),
}

/// A network plus the parameter store it reads.
#[derive(Debug, Clone)]
pub struct Model {
    pub arch: Arch,
    pub config: ModelConfig,
    pub store: ParamStore,
    pub net: Network,
}

pub fn init_baseline(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let embed = store.add("embed.table", normal(&mut rng, &[cfg.vocab, cfg.d], EMBEDDING_STD), false);
    let mut encoder = Vec::with_capacity(cfg.enc_layers);
    for i in 0..cfg.enc_layers {
        let name = format!("encoder.layer{i}");
        encoder.push(EncoderLayer {
            ln_attn: LayerNormParams::new(&mut store, &format!("{name}.ln_attn"), cfg.d),
            attn: attn_layer(&mut store, &format!("{name}.attn"), cfg, &mut rng)?,
            ln_ffn: LayerNormParams::new(&mut store, &format!("{name}.ln_ffn"), cfg.d),
            ffn: FeedForward::new(&mut store, &format!("{name}.ffn"), cfg.d, cfg.ffn_mult, &mut rng),
        });
    }
    let enc_ln_final = LayerNormParams::new(&mut store, "encoder.ln_final", cfg.d);
    let decoder = Decoder::new(&mut store, embed, cfg, &mut rng)?;
    let net = Network::Baseline(BaselineModel { embed, encoder, enc_ln_final, decoder });
    Ok(Model { arch: Arch::Baseline, config: cfg.clone(), store, net })
}

pub fn init_prism(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let harmonic = HarmonicEmbeddingTable::new(&mut store, "embed.encoder", cfg.vocab, cfg.d, &mut rng);
    let dec_embed = store.add("embed.decoder.table", normal(&mut rng, &[cfg.vocab, cfg.d], EMBEDDING_STD), false);
    let mut blocks = Vec::with_capacity(cfg.enc_layers);
    for i in 0..cfg.enc_layers {
        blocks.push(GhcBlock::new(&mut store, &format!("encoder.block{i}"), cfg, &mut rng)?);
    }
    let bridge = BridgeParams::new(&mut store, "bridge", cfg.d, &mut rng);
    let decoder = Decoder::new(&mut store, dec_embed, cfg, &mut rng)?;
    let net = Network::Prism(PrismModel { harmonic, dec_embed, blocks, bridge, decoder });
    Ok(Model { arch: Arch::Prism, config: cfg.clone(), store, net })
}

pub fn init_model(arch: Arch, cfg: &ModelConfig, seed: u64) -> Result<Model> {
    match arch {
        Arch::Baseline => init_baseline(cfg, seed),
        Arch::Prism => init_prism(cfg, seed),
    }
}

impl Network {
    fn decoder(&self) -> &Decoder {
        match self {
            Network::Baseline(m) => &m.decoder,
            Network::Prism(m) => &m.decoder,
        }
    }

    fn encode(&self, tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, src: &[usize], src_len: usize, src_valid: &[usize]) -> Result<Memory> {
        if src_len > cfg.max_len {
            return Err(ModelError::TooLong { len: src_len, max: cfg.max_len });
        }
        let states = match self {
            Network::Baseline(m) => {
                let mut x = embed_tokens(tape, store, m.embed, cfg, src, src_len)?;
                let layout = AttentionLayout {
                    batch: src_valid.len(),
                    q_len: src_len,
                    k_len: src_len,
                    heads: cfg.heads,
                    causal: false,
                    key_valid: src_valid.to_vec(),
                };
                for l in &m.encoder {
                    let h = l.ln_attn.apply(tape, store, x)?;
                    let a = l.attn.apply(tape, store, h, h, &layout)?;
                    x = tape.add(x, a)?;
                    let h = l.ln_ffn.apply(tape, store, x)?;
                    let f = l.ffn.apply(tape, store, h)?;
                    x = tape.add(x, f)?;
                }
                m.enc_ln_final.apply(tape, store, x)?
            }
            Network::Prism(m) => {
                let layout = SeqLayout { batch: src_valid.len(), seq_len: src_len, valid: src_valid.to_vec() };
                let mut z = m.harmonic.apply(tape, store, src, src_len)?;
                for b in &m.blocks {
                    z = b.apply(tape, store, z, &layout)?;
                }
                let z = complex_rms_norm(tape, z)?;
                m.bridge.apply(tape, store, z)?
            }
        };
        Ok(Memory { states, src_len, src_valid: src_valid.to_vec() })
    }

    /// Teacher-forced mean cross-entropy over non-pad target tokens.
    pub fn forward_loss(&self, tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, batch: &Batch) -> Result<Var> {
        if batch.size == 0 || batch.target_tokens() == 0 {
            return Err(ModelError::EmptyBatch);
        }
        let mem = self.encode(tape, store, cfg, &batch.src, batch.src_len, &batch.src_valid)?;
        let dec = self.decoder();
        let h = dec.hidden(tape, store, cfg, &mem, &batch.tgt_in, batch.tgt_len)?;
        let logits = dec.logits(tape, store, h)?;
        Ok(tape.cross_entropy(logits, &batch.tgt_out, &batch.weights)?)
    }
}

impl Model {
    pub fn forward_loss(&self, tape: &mut Tape, batch: &Batch) -> Result<Var> {
        self.net.forward_loss(tape, &self.store, &self.config, batch)
    }

    /// Loss value without keeping the tape.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let l = self.forward_loss(&mut tape, batch)?;
        Ok(tape.scalar(l))
    }

    /// Greedy decoding of one source sentence. Output excludes BOS and the
    /// terminating EOS.
    pub fn greedy_decode(&self, src: &[usize], max_len: usize) -> Result<Vec<usize>> {
        Ok(self.greedy_decode_batch(&[src], max_len)?.pop().unwrap_or_default())
    }

    /// Greedy decoding of several sentences at once; every sentence is
    /// decoded independently of its batch mates.
    pub fn greedy_decode_batch(&self, srcs: &[&[usize]], max_len: usize) -> Result<Vec<Vec<usize>>> {
        if srcs.is_empty() {
            return Ok(Vec::new());
        }
        let cfg = &self.config;
        let size = srcs.len();
        let src_len = srcs.iter().map(|s| s.len()).max().unwrap_or(1).max(1);
        let mut src = vec![PAD; size * src_len];
        for (i, s) in srcs.iter().enumerate() {
            src[i * src_len..i * src_len + s.len()].copy_from_slice(s);
        }
        let src_valid: Vec<usize> = srcs.iter().map(|s| s.len()).collect();
        let mut enc_tape = Tape::new();
        let mem = self.net.encode(&mut enc_tape, &self.store, cfg, &src, src_len, &src_valid)?;
        let states = enc_tape.value(mem.states).clone();
        drop(enc_tape);

        let dec = self.net.decoder();
        let mut prefixes: Vec<Vec<usize>> = vec![vec![BOS]; size];
        let mut done = vec![false; size];
        for step in 0..max_len {
            let len = step + 1;
            let mut tape = Tape::new();
            let mem = Memory { states: tape.constant(states.clone()), src_len, src_valid: src_valid.clone() };
            let ids: Vec<usize> = prefixes.iter().flatten().copied().collect();
            let h = dec.hidden(&mut tape, &self.store, cfg, &mem, &ids, len)?;
            let last: Vec<usize> = (0..size).map(|b| b * len + step).collect();
            let h = tape.gather(h, &last)?;
            let logits = dec.logits(&mut tape, &self.store, h)?;
            let lv = tape.value(logits);
            for b in 0..size {
                let next = if done[b] { PAD } else { argmax(lv.row(b)) };
                if next == EOS {
                    done[b] = true;
                }
                prefixes[b].push(next);
            }
            if done.iter().all(|&x| x) {
                break;
            }
        }
        Ok(prefixes
            .into_iter()
            .map(|p| p.into_iter().skip(1).take_while(|&t| t != EOS && t != PAD).collect())
            .collect())
    }

    pub fn count_params(&self) -> ParamReport {
        count_params(&self.store)
    }

    /// The table a semantic map reads from or writes to.
    pub fn map_table(&self, source: MapSource) -> Result<ParamId> {
        match (&self.net, source) {
            (Network::Baseline(m), MapSource::Shared) => Ok(m.embed),
            (Network::Prism(m), MapSource::Amplitude) => Ok(m.harmonic.amplitudes),
            (Network::Prism(m), MapSource::DecoderEmbedding) => Ok(m.dec_embed),
            (_, s) => Err(ModelError::Config(format!("{} model has no {s:?} table", self.arch))),
        }
    }

    pub fn default_map_source(&self) -> MapSource {
        MapSource::default_for(self.arch)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub embeddings: usize,
    pub encoder: usize,
    pub decoder: usize,
    pub bridge: usize,
    pub total: usize,
}

/// Counts scalars by name prefix (`embed`, `encoder`, `decoder`, `bridge`).
/// Tied tables count once.
pub fn count_params(store: &ParamStore) -> ParamReport {
    let mut r = ParamReport { embeddings: 0, encoder: 0, decoder: 0, bridge: 0, total: 0 };
    for (_, p) in store.iter() {
        let n = p.value.len();
        let slot = match p.name.split('.').next() {
            Some("embed") => &mut r.embeddings,
            Some("encoder") => &mut r.encoder,
            Some("decoder") => &mut r.decoder,
            Some("bridge") => &mut r.bridge,
            _ => panic!("parameter {} outside every component", p.name),
        };
        *slot += n;
        r.total += n;
    }
    r
}

// ---------------------------------------------------------------------------
// Checkpoint container

const MAGIC: &str = "PRISMCKPT 1";

/// Metadata stored alongside parameter values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Header {
    pub kind: String,
    pub meta: Vec<(String, String)>,
}

impl Header {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

/// Writes named tensors: a text header (`param <name> <dims> <offset>`
/// lines terminated by `end`) followed by little-endian f64 data.
pub fn write_container(path: &Path, header: &Header, tensors: &[(&str, &RealTensor)]) -> Result<()> {
    let mut text = format!("{MAGIC}\nkind {}\n", header.kind);
    for (k, v) in &header.meta {
        if k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(ModelError::Checkpoint(format!("bad meta entry {k}")));
        }
        text.push_str(&format!("meta {k} {v}\n"));
    }
    let mut offset = 0;
    for (name, t) in tensors {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        text.push_str(&format!("param {name} {} {offset}\n", dims.join("x")));
        offset += t.len();
    }
    text.push_str("end\n");
    let mut out = io::BufWriter::new(fs::File::create(path)?);
    out.write_all(text.as_bytes())?;
    for (_, t) in tensors {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<(Header, Vec<(String, RealTensor)>)> {
    let bad = |m: &str| ModelError::Checkpoint(format!("{}: {m}", path.display()));
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<fs::File>| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("truncated header"));
        }
        Ok(line.trim_end_matches('\n').to_string())
    };
    if next_line(&mut r)? != MAGIC {
        return Err(bad("missing magic"));
    }
    let kind = next_line(&mut r)?.strip_prefix("kind ").ok_or_else(|| bad("missing kind"))?.to_string();
    let mut header = Header { kind, meta: Vec::new() };
    let mut entries: Vec<(String, Vec<usize>, usize)> = Vec::new();
    loop {
        let l = next_line(&mut r)?;
        if l == "end" {
            break;
        }
        if let Some(rest) = l.strip_prefix("meta ") {
            let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
            header.meta.push((k.to_string(), v.to_string()));
        } else if let Some(rest) = l.strip_prefix("param ") {
            let f: Vec<&str> = rest.split(' ').collect();
            if f.len() != 3 {
                return Err(bad("bad param line"));
            }
            let shape = f[1].split('x').map(|d| d.parse().map_err(|_| bad("bad shape"))).collect::<Result<Vec<usize>>>()?;
            let offset = f[2].parse().map_err(|_| bad("bad offset"))?;
            entries.push((f[0].to_string(), shape, offset));
        } else {
            return Err(bad("unknown header line"));
        }
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(bad("data not a multiple of 8 bytes"));
    }
    let data: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let mut tensors = Vec::with_capacity(entries.len());
    for (name, shape, offset) in entries {
        let n: usize = shape.iter().product();
        let slice = data.get(offset..offset + n).ok_or_else(|| bad("data out of range"))?;
        tensors.push((name, RealTensor::new(&shape, slice.to_vec())?));
    }
    Ok((header, tensors))
}

/// Saves every parameter of `model` plus its architecture and config.
pub fn save_checkpoint(model: &Model, path: &Path, extra: &[(String, String)]) -> Result<()> {
    let mut meta = vec![
        ("arch".to_string(), model.arch.as_str().to_string()),
        ("config".to_string(), serde_json::to_string(&model.config).expect("config serializes")),
    ];
    meta.extend(extra.iter().cloned());
    let header = Header { kind: "checkpoint".into(), meta };
    let tensors: Vec<(&str, &RealTensor)> = model.store.iter().map(|(_, p)| (p.name.as_str(), &p.value)).collect();
    write_container(path, &header, &tensors)
}

/// Rebuilds the model named in the header and overwrites every parameter.
pub fn load_checkpoint(path: &Path) -> Result<(Model, Header)> {
    let (header, tensors) = read_container(path)?;
    if header.kind != "checkpoint" {
        return Err(ModelError::Checkpoint(format!("expected checkpoint, found {}", header.kind)));
    }
    let arch = match header.get("arch") {
        Some("baseline") => Arch::Baseline,
        Some("prism") => Arch::Prism,
        other => return Err(ModelError::Checkpoint(format!("unknown arch {other:?}"))),
    };
    let cfg: ModelConfig = serde_json::from_str(header.get("config").ok_or_else(|| ModelError::Checkpoint("missing config".into()))?)
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut model = init_model(arch, &cfg, 0)?;
    if tensors.len() != model.store.len() {
        return Err(ModelError::Checkpoint(format!("{} tensors for {} parameters", tensors.len(), model.store.len())));
    }
    for (name, t) in tensors {
        let id = model.store.id(&name).ok_or_else(|| ModelError::Checkpoint(format!("unknown parameter {name}")))?;
        let p = model.store.get_mut(id);
        if p.value.shape() != t.shape() {
            return Err(ModelError::ShapeMismatch { name, expected: p.value.shape().to_vec(), found: t.shape().to_vec() });
        }
        p.value = t;
    }
    Ok((model, header))
}

// ---------------------------------------------------------------------------
// Semantic maps

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum MapSource {
    /// The baseline's tied table.
    Shared,
    /// The harmonic amplitude table.
    Amplitude,
    /// The harmonic model's decoder table.
    DecoderEmbedding,
}

impl MapSource {
    /// The table whose role matches the baseline's tied embedding.
    pub fn default_for(arch: Arch) -> Self {
        match arch {
            Arch::Baseline => MapSource::Shared,
            Arch::Prism => MapSource::DecoderEmbedding,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMap {
    pub matrix: RealTensor,
    pub vocab_hash: String,
    pub source: MapSource,
    pub source_step: usize,
    pub source_seed: u64,
}

pub fn extract_map(model: &Model, source: MapSource, vocab_hash: &str, step: usize, seed: u64) -> Result<SemanticMap> {
    let id = model.map_table(source)?;
    Ok(SemanticMap {
        matrix: model.store.get(id).value.clone(),
        vocab_hash: vocab_hash.to_string(),
        source,
        source_step: step,
        source_seed: seed,
    })
}

/// Installs `map` as the embedding table. With `reinit_reasoner`, every
/// other parameter is first drawn fresh from `seed`.
pub fn load_map(model: Model, map: &SemanticMap, vocab_hash: &str, reinit_reasoner: bool, seed: u64) -> Result<Model> {
    if map.vocab_hash != vocab_hash {
        return Err(ModelError::VocabMismatch { expected: vocab_hash.to_string(), found: map.vocab_hash.clone() });
    }
    let mut model = if reinit_reasoner { init_model(model.arch, &model.config, seed)? } else { model };
    let id = model.map_table(map.source)?;
    let p = model.store.get_mut(id);
    if p.value.shape() != map.matrix.shape() {
        return Err(ModelError::ShapeMismatch {
            name: p.name.clone(),
            expected: p.value.shape().to_vec(),
            found: map.matrix.shape().to_vec(),
        });
    }
    p.value = map.matrix.clone();
    Ok(model)
}

/// Uniform row permutation of the map.
pub fn shuffle_map(map: &SemanticMap, seed: u64) -> SemanticMap {
    let (rows, cols) = map.matrix.dims2();
    let mut perm: Vec<usize> = (0..rows).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let src = map.matrix.data();
    let mut data = Vec::with_capacity(rows * cols);
    for &r in &perm {
        data.extend_from_slice(&src[r * cols..(r + 1) * cols]);
    }
    SemanticMap { matrix: RealTensor::new(&[rows, cols], data).expect("shape"), ..map.clone() }
}

pub fn save_map(map: &SemanticMap, path: &Path) -> Result<()> {
    let source = serde_json::to_string(&map.source).expect("source serializes");
    let header = Header {
        kind: "semantic_map".into(),
        meta: vec![
            ("vocab_hash".into(), map.vocab_hash.clone()),
            ("source".into(), source),
            ("source_step".into(), map.source_step.to_string()),
            ("source_seed".into(), map.source_seed.to_string()),
        ],
    };
    write_container(path, &header, &[("matrix", &map.matrix)])
}

pub fn read_map(path: &Path) -> Result<SemanticMap> {
    let (header, mut tensors) = read_container(path)?;
    let bad = |m: &str| ModelError::Checkpoint(format!("{}: {m}", path.display()));
    if header.kind != "semantic_map" || tensors.len() != 1 {
        return Err(bad("not a semantic map"));
    }
    let field = |k: &str| header.get(k).ok_or_else(|| bad(&format!("missing {k}")));
    Ok(SemanticMap {
        matrix: tensors.pop().expect("one tensor").1,
        vocab_hash: field("vocab_hash")?.to_string(),
        source: serde_json::from_str(field("source")?).map_err(|_| bad("bad source"))?,
        source_step: field("source_step")?.parse().map_err(|_| bad("bad step"))?,
        source_seed: field("source_seed")?.parse().map_err(|_| bad("bad seed"))?,
    })
}

/// Gradient check of the full harmonic model's loss on a toy batch.
pub fn prism_end_to_end_check(seed: u64) -> std::result::Result<crate::autodiff::GradCheckReport, AutodiffError> {
    let cfg = ModelConfig { vocab: 11, d: 4, heads: 2, enc_layers: 1, dec_layers: 1, ffn_mult: 2, complex_ffn_mult: 1, max_len: 8, l_pad: 8 };
    let mut model = init_prism(&cfg, seed).map_err(|e| AutodiffError::NonFinite(e.to_string()))?;
    // Move parameters away from their structured init so every path is active.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (_, p) in model.store.iter_mut() {
        let noise = layers::normal(&mut rng, p.value.shape(), 0.3);
        p.value.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += n);
    }
    let pairs = [
        Pair { src: vec![4, 5, 6, 7, 8, 9], tgt: vec![BOS, 10, 9, 8, 7, EOS] },
        Pair { src: vec![9, 4, 5, 3], tgt: vec![BOS, 6, 5, EOS] },
    ];
    let refs: Vec<&Pair> = pairs.iter().collect();
    let batch = Batch::from_pairs(&refs).map_err(|e| AutodiffError::NonFinite(e.to_string()))?;
    let Model { config, mut store, net, .. } = model;
    crate::autodiff::grad_check(&mut store, 1e-5, 64, seed, |tape, store| {
        net.forward_loss(tape, store, &config, &batch).map_err(|e| match e {
            ModelError::Autodiff(a) => a,
            other => AutodiffError::NonFinite(other.to_string()),
        })
    })
}
