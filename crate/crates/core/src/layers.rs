//! Harmonic layers, the attention baseline layers, and the complex-to-real
//! bridge.
//!
//! Each layer comes in two forms. The free functions (`harmonic_embed`,
//! `modrelu`, `spectral_gate`, `ghc_forward`, `mhsa_forward`, `bridge`) take
//! plain tensors and are what inference checks and benchmarks call. The
//! parameter structs build the same computation on a [`Tape`] for training.
//! Both forms share the GHC and attention kernels below, so their outputs
//! agree bit for bit.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use thiserror::Error;

use crate::autodiff::{AutodiffError, CVar, ParamId, ParamStore, Primitive, Tape, Var};
use crate::numerics::{self, gemm, matmul, ComplexTensor, NumericsError, RealTensor};

#[derive(Debug, Error)]
pub enum LayerError {
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence length {len} exceeds kernel length {l_pad}")]
    SequenceTooLong { len: usize, l_pad: usize },
    #[error("{what}: shape mismatch {left:?} vs {right:?}")]
    Shape { what: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("model width {d} not divisible by {heads} heads")]
    Heads { d: usize, heads: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, LayerError>;

fn shape_err(what: &'static str, left: &[usize], right: &[usize]) -> LayerError {
    LayerError::Shape { what, left: left.to_vec(), right: right.to_vec() }
}

fn complex_dims(z: &ComplexTensor) -> (usize, usize) {
    match z.shape() {
        [c] => (1, *c),
        [r, c] => (*r, *c),
        s => {
            let c = *s.last().unwrap_or(&1);
            (z.len() / c.max(1), c)
        }
    }
}

// ---------------------------------------------------------------------------
// Initialization

/// Uniform bound for Kaiming-uniform initialization with negative slope `a`:
/// `sqrt(6 / ((1 + a^2) * fan_in))`. With `a = sqrt(5)` this is
/// `1 / sqrt(fan_in)`.
pub fn kaiming_uniform_bound(fan_in: usize, a: f64) -> f64 {
    (6.0 / ((1.0 + a * a) * fan_in as f64)).sqrt()
}

pub const KAIMING_SLOPE: f64 = 2.236_067_977_499_79; // sqrt(5)

pub fn kaiming_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> RealTensor {
    uniform(rng, shape, kaiming_uniform_bound(fan_in, KAIMING_SLOPE))
}

/// Complex Kaiming: each component uniform with the real bound scaled by
/// `1/sqrt(2)`, so `E|w|^2` matches the real initializer.
pub fn complex_kaiming_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> (RealTensor, RealTensor) {
    let bound = kaiming_uniform_bound(fan_in, KAIMING_SLOPE) / std::f64::consts::SQRT_2;
    (uniform(rng, shape, bound), uniform(rng, shape, bound))
}

pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> RealTensor {
    let n: usize = shape.iter().product();
    let data = if bound > 0.0 {
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        (0..n).map(|_| dist.sample(rng)).collect()
    } else {
        vec![0.0; n]
    };
    RealTensor::new(shape, data).expect("shape")
}

pub fn normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> RealTensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    RealTensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

pub const EMBEDDING_STD: f64 = 0.02;
pub const GATE_BIAS_INIT: f64 = 2.0;
pub const KERNEL_NOISE_STD: f64 = 0.02;

// ---------------------------------------------------------------------------
// Harmonic embedding

/// Geometric frequency ladder `omega_j = r^(j/(d-1))` with `r = 1e-4`,
/// running from 1.0 down to 1e-4 rad/position.
pub fn frequency_schedule(d: usize) -> Vec<f64> {
    const RATIO: f64 = 1e-4;
    if d == 1 {
        return vec![1.0];
    }
    (0..d).map(|j| RATIO.powf(j as f64 / (d - 1) as f64)).collect()
}

/// `H[t, j] = A[token_t, j] * exp(i * omega_j * t)`.
pub fn harmonic_embed(tokens: &[usize], amplitudes: &RealTensor, freqs: &[f64]) -> Result<ComplexTensor> {
    let (vocab, d) = amplitudes.dims2();
    if freqs.len() != d {
        return Err(shape_err("harmonic_embed", amplitudes.shape(), &[freqs.len()]));
    }
    let n = tokens.len();
    let mut out = ComplexTensor::zeros(&[n, d]);
    let (re, im) = out.parts_mut();
    for (t, &tok) in tokens.iter().enumerate() {
        if tok >= vocab {
            return Err(LayerError::TokenOutOfRange { id: tok, vocab });
        }
        let row = amplitudes.row(tok);
        for j in 0..d {
            let (s, c) = (freqs[j] * t as f64).sin_cos();
            re[t * d + j] = row[j] * c;
            im[t * d + j] = row[j] * s;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct HarmonicEmbeddingTable {
    pub amplitudes: ParamId,
    pub frequencies: Vec<f64>,
}

impl HarmonicEmbeddingTable {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, vocab: usize, d: usize, rng: &mut R) -> Self {
        let amplitudes = store.add(format!("{name}.amplitudes"), normal(rng, &[vocab, d], EMBEDDING_STD), false);
        Self { amplitudes, frequencies: frequency_schedule(d) }
    }

    /// Embeds a padded batch laid out as `[batch * seq_len, d]`; position
    /// `t` restarts at zero for every sequence.
    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize], seq_len: usize) -> Result<CVar> {
        let table = tape.param(store, self.amplitudes);
        let amp = tape.gather(table, ids)?;
        let d = self.frequencies.len();
        let rows = ids.len();
        let mut cos = vec![0.0; rows * d];
        let mut sin = vec![0.0; rows * d];
        for r in 0..rows {
            let t = (r % seq_len) as f64;
            for j in 0..d {
                let (s, c) = (self.frequencies[j] * t).sin_cos();
                cos[r * d + j] = c;
                sin[r * d + j] = s;
            }
        }
        let cos = tape.constant(RealTensor::new(&[rows, d], cos)?);
        let sin = tape.constant(RealTensor::new(&[rows, d], sin)?);
        Ok(CVar { re: tape.mul(amp, cos)?, im: tape.mul(amp, sin)? })
    }
}

// ---------------------------------------------------------------------------
// ModReLU

/// `ReLU(|z| + b) * z / |z|`, zero where `z = 0`. `bias` runs along the last
/// axis.
pub fn modrelu(z: &ComplexTensor, bias: &[f64]) -> Result<ComplexTensor> {
    let (rows, d) = complex_dims(z);
    if bias.len() != d {
        return Err(shape_err("modrelu", z.shape(), &[bias.len()]));
    }
    let mut out = z.clone();
    let (re, im) = out.parts_mut();
    for r in 0..rows {
        for j in 0..d {
            let i = r * d + j;
            let s = modrelu_scale(re[i].hypot(im[i]), bias[j]);
            re[i] *= s;
            im[i] *= s;
        }
    }
    Ok(out)
}

#[inline]
fn modrelu_scale(m: f64, b: f64) -> f64 {
    if m > 0.0 && m + b > 0.0 {
        (m + b) / m
    } else {
        0.0
    }
}

/// `s = ReLU(m + b) / m` per element; subgradient zero on the dead side and
/// at the kink.
#[derive(Debug)]
struct ModReluScale;

impl Primitive for ModReluScale {
    fn name(&self) -> &'static str {
        "modrelu_scale"
    }

    fn backward(&self, inputs: &[&RealTensor], _out: &RealTensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (m, b) = (inputs[0].data(), inputs[1].data());
        let d = b.len();
        let mut dm = vec![0.0; m.len()];
        let mut db = vec![0.0; d];
        for i in 0..m.len() {
            let bj = b[i % d];
            if m[i] > 0.0 && m[i] + bj > 0.0 {
                dm[i] = -g[i] * bj / (m[i] * m[i]);
                db[i % d] += g[i] / m[i];
            }
        }
        vec![Some(dm), Some(db)]
    }
}

#[derive(Debug, Clone)]
pub struct ModReluParams {
    pub bias: ParamId,
}

impl ModReluParams {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self { bias: store.add(format!("{name}.bias"), RealTensor::zeros(&[d]), false) }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, z: CVar) -> Result<CVar> {
        let b = tape.param(store, self.bias);
        let m = tape.modulus(z.re, z.im)?;
        let (mv, bv) = (tape.value(m), tape.value(b));
        let d = bv.len();
        if mv.dims2().1 != d {
            return Err(shape_err("modrelu", mv.shape(), bv.shape()));
        }
        let scale: Vec<f64> =
            mv.data().iter().enumerate().map(|(i, &mi)| modrelu_scale(mi, bv.data()[i % d])).collect();
        let scale = RealTensor::new(mv.shape(), scale)?;
        let s = tape.custom(Box::new(ModReluScale), &[m, b], scale);
        Ok(CVar { re: tape.mul(z.re, s)?, im: tape.mul(z.im, s)? })
    }
}

// ---------------------------------------------------------------------------
// Spectral gate

/// `z * sigmoid([Re z, Im z] W_gate + g)`; the gate is one real value per
/// (position, channel) scaling both components.
pub fn spectral_gate(z: &ComplexTensor, w_gate: &RealTensor, g: &[f64]) -> Result<ComplexTensor> {
    let (rows, d) = complex_dims(z);
    if w_gate.shape() != [2 * d, d] || g.len() != d {
        return Err(shape_err("spectral_gate", z.shape(), w_gate.shape()));
    }
    let mut cat = Vec::with_capacity(rows * 2 * d);
    for r in 0..rows {
        cat.extend_from_slice(&z.re()[r * d..(r + 1) * d]);
        cat.extend_from_slice(&z.im()[r * d..(r + 1) * d]);
    }
    let cat = RealTensor::new(&[rows, 2 * d], cat)?;
    let mut pre = matmul(&cat, w_gate)?;
    let mut out = z.clone();
    let (re, im) = out.parts_mut();
    for (i, p) in pre.data_mut().iter_mut().enumerate() {
        let gate = crate::autodiff::sigmoid(*p + g[i % d]);
        re[i] *= gate;
        im[i] *= gate;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SpectralGateParams {
    pub w_gate: ParamId,
    pub g: ParamId,
}

impl SpectralGateParams {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        let w_gate = store.add(format!("{name}.w_gate"), kaiming_uniform(rng, &[2 * d, d], 2 * d), true);
        let g = store.add(format!("{name}.g"), RealTensor::filled(&[d], GATE_BIAS_INIT), false);
        Self { w_gate, g }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, z: CVar) -> Result<CVar> {
        let w = tape.param(store, self.w_gate);
        let g = tape.param(store, self.g);
        let cat = tape.concat_cols(z.re, z.im)?;
        let pre = tape.matmul(cat, w)?;
        let pre = tape.add_row_bias(pre, g)?;
        let gate = tape.sigmoid(pre);
        Ok(CVar { re: tape.mul(z.re, gate)?, im: tape.mul(z.im, gate)? })
    }
}

// ---------------------------------------------------------------------------
// Gated harmonic convolution (frequency-domain global filter)

/// Layout of a padded batch stored as `[batch * seq_len, d]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqLayout {
    pub batch: usize,
    pub seq_len: usize,
    pub valid: Vec<usize>,
}

impl SeqLayout {
    pub fn single(len: usize) -> Self {
        Self { batch: 1, seq_len: len, valid: vec![len] }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq_len
    }
}

/// Per sequence and channel: mask rows at or beyond the valid length, pad to
/// `l_pad`, multiply the spectrum by the channel's kernel (conjugated when
/// `conj_kernel`), transform back and keep the first `seq_len` rows.
#[allow(clippy::too_many_arguments)]
fn ghc_kernel(
    x_re: &[f64],
    x_im: &[f64],
    k_re: &[f64],
    k_im: &[f64],
    layout: &SeqLayout,
    d: usize,
    l_pad: usize,
    conj_kernel: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let plan = numerics::plan(l_pad)?;
    let n = layout.seq_len;
    let rows = layout.rows();
    let mut y_re = vec![0.0; rows * d];
    let mut y_im = vec![0.0; rows * d];
    let mut buf_re = vec![0.0; l_pad];
    let mut buf_im = vec![0.0; l_pad];
    let sign = if conj_kernel { -1.0 } else { 1.0 };
    for b in 0..layout.batch {
        let valid = layout.valid[b].min(n);
        let base = b * n;
        for j in 0..d {
            buf_re.fill(0.0);
            buf_im.fill(0.0);
            for t in 0..valid {
                buf_re[t] = x_re[(base + t) * d + j];
                buf_im[t] = x_im[(base + t) * d + j];
            }
            plan.forward(&mut buf_re, &mut buf_im);
            let kr = &k_re[j * l_pad..(j + 1) * l_pad];
            let ki = &k_im[j * l_pad..(j + 1) * l_pad];
            for f in 0..l_pad {
                let (a, c) = (buf_re[f], buf_im[f]);
                let (p, q) = (kr[f], sign * ki[f]);
                buf_re[f] = a * p - c * q;
                buf_im[f] = a * q + c * p;
            }
            plan.inverse(&mut buf_re, &mut buf_im);
            for t in 0..n {
                y_re[(base + t) * d + j] = buf_re[t];
                y_im[(base + t) * d + j] = buf_im[t];
            }
        }
    }
    Ok((y_re, y_im))
}

/// `Y = IFFT(FFT(X_pad) * K)` per channel, truncated to the input length.
/// `x` is `[N, d]`, `kernel` is `[d, L_pad]`; rows at or past `valid_len`
/// are treated as zero.
pub fn ghc_forward(x: &ComplexTensor, kernel: &ComplexTensor, valid_len: usize) -> Result<ComplexTensor> {
    let (n, d) = complex_dims(x);
    let (kd, l_pad) = complex_dims(kernel);
    if kd != d {
        return Err(shape_err("ghc_forward", x.shape(), kernel.shape()));
    }
    if n > l_pad {
        return Err(LayerError::SequenceTooLong { len: n, l_pad });
    }
    let layout = SeqLayout { batch: 1, seq_len: n, valid: vec![valid_len] };
    let (re, im) = ghc_kernel(x.re(), x.im(), kernel.re(), kernel.im(), &layout, d, l_pad, false)?;
    Ok(ComplexTensor::new(&[n, d], re, im)?)
}

#[derive(Debug)]
struct GhcPrimitive {
    layout: SeqLayout,
    d: usize,
    l_pad: usize,
}

impl Primitive for GhcPrimitive {
    fn name(&self) -> &'static str {
        "ghc"
    }

    fn backward(&self, inputs: &[&RealTensor], _out: &RealTensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (x_re, x_im, k_re, k_im) = (inputs[0].data(), inputs[1].data(), inputs[2].data(), inputs[3].data());
        let (d, l, n) = (self.d, self.l_pad, self.layout.seq_len);
        let rows = self.layout.rows();
        let (g_re, g_im) = g.split_at(rows * d);
        // Adjoint wrt X: the same filter with the conjugate kernel, applied to
        // every output row, then masked like the input.
        let full = SeqLayout { valid: vec![n; self.layout.batch], ..self.layout.clone() };
        let (mut dx_re, mut dx_im) = ghc_kernel(g_re, g_im, k_re, k_im, &full, d, l, true).expect("plan exists");
        for b in 0..self.layout.batch {
            let valid = self.layout.valid[b].min(n);
            for t in valid..n {
                let r = b * n + t;
                dx_re[r * d..(r + 1) * d].fill(0.0);
                dx_im[r * d..(r + 1) * d].fill(0.0);
            }
        }
        // Adjoint wrt K: conj(FFT(x_pad)) * FFT(g_pad) / L, summed over batch.
        let plan = numerics::plan(l).expect("plan exists");
        let mut dk_re = vec![0.0; d * l];
        let mut dk_im = vec![0.0; d * l];
        let (mut xr, mut xi) = (vec![0.0; l], vec![0.0; l]);
        let (mut gr, mut gi) = (vec![0.0; l], vec![0.0; l]);
        let inv_l = 1.0 / l as f64;
        for b in 0..self.layout.batch {
            let valid = self.layout.valid[b].min(n);
            let base = b * n;
            for j in 0..d {
                xr.fill(0.0);
                xi.fill(0.0);
                gr.fill(0.0);
                gi.fill(0.0);
                for t in 0..valid {
                    xr[t] = x_re[(base + t) * d + j];
                    xi[t] = x_im[(base + t) * d + j];
                }
                for t in 0..n {
                    gr[t] = g_re[(base + t) * d + j];
                    gi[t] = g_im[(base + t) * d + j];
                }
                plan.forward(&mut xr, &mut xi);
                plan.forward(&mut gr, &mut gi);
                for f in 0..l {
                    // conj(x) * g
                    dk_re[j * l + f] += (xr[f] * gr[f] + xi[f] * gi[f]) * inv_l;
                    dk_im[j * l + f] += (xr[f] * gi[f] - xi[f] * gr[f]) * inv_l;
                }
            }
        }
        vec![Some(dx_re), Some(dx_im), Some(dk_re), Some(dk_im)]
    }
}

#[derive(Debug, Clone)]
pub struct GlobalKernel {
    pub k_re: ParamId,
    pub k_im: ParamId,
    pub l_pad: usize,
}

impl GlobalKernel {
    /// Kernel spectrum of a near-delta impulse response: 1 at lag 0 plus
    /// small Gaussian noise at every other lag, per channel.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, l_pad: usize, rng: &mut R) -> Result<Self> {
        if !l_pad.is_power_of_two() {
            return Err(NumericsError::NotPowerOfTwo(l_pad).into());
        }
        let plan = numerics::plan(l_pad)?;
        let noise = Normal::new(0.0, KERNEL_NOISE_STD).expect("std");
        let mut k_re = vec![0.0; d * l_pad];
        let mut k_im = vec![0.0; d * l_pad];
        for j in 0..d {
            let (hr, hi) = (&mut k_re[j * l_pad..(j + 1) * l_pad], &mut k_im[j * l_pad..(j + 1) * l_pad]);
            hr[0] = 1.0;
            for v in hr.iter_mut().skip(1) {
                *v = noise.sample(rng);
            }
            plan.forward(hr, hi);
        }
        let k_re = store.add(format!("{name}.kernel.re"), RealTensor::new(&[d, l_pad], k_re)?, false);
        let k_im = store.add(format!("{name}.kernel.im"), RealTensor::new(&[d, l_pad], k_im)?, false);
        Ok(Self { k_re, k_im, l_pad })
    }

    pub fn value(&self, store: &ParamStore) -> ComplexTensor {
        let (re, im) = (&store.get(self.k_re).value, &store.get(self.k_im).value);
        ComplexTensor::new(re.shape(), re.data().to_vec(), im.data().to_vec()).expect("kernel shape")
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: CVar, layout: &SeqLayout) -> Result<CVar> {
        let k = tape.cparam(store, self.k_re, self.k_im);
        let (rows, d) = tape.value(x.re).dims2();
        if rows != layout.rows() || layout.valid.len() != layout.batch {
            return Err(shape_err("ghc", &[rows, d], &[layout.rows(), d]));
        }
        if layout.seq_len > self.l_pad {
            return Err(LayerError::SequenceTooLong { len: layout.seq_len, l_pad: self.l_pad });
        }
        let (y_re, y_im) = ghc_kernel(
            tape.value(x.re).data(),
            tape.value(x.im).data(),
            tape.value(k.re).data(),
            tape.value(k.im).data(),
            layout,
            d,
            self.l_pad,
            false,
        )?;
        let mut stacked = y_re;
        stacked.extend_from_slice(&y_im);
        let value = RealTensor::new(&[2 * rows, d], stacked)?;
        let prim = GhcPrimitive { layout: layout.clone(), d, l_pad: self.l_pad };
        let out = tape.custom(Box::new(prim), &[x.re, x.im, k.re, k.im], value);
        Ok(tape.split_complex(out))
    }
}

// ---------------------------------------------------------------------------
// Attention

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub causal: bool,
    /// Valid key count per sequence; keys at or past it are masked.
    pub key_valid: Vec<usize>,
}

const QUERY_BLOCK: usize = 128;

/// Scaled dot-product attention over already-projected `q`, `k`, `v`.
/// Writes softmax weights into `probs` (`[batch, heads, q_len, k_len]`) when
/// provided.
fn attention_kernel(q: &[f64], k: &[f64], v: &[f64], d: usize, lay: &AttentionLayout, mut probs: Option<&mut [f64]>) -> Vec<f64> {
    let h = lay.heads;
    let dh = d / h;
    let (nq, nk) = (lay.q_len, lay.k_len);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; lay.batch * nq * d];
    let mut qh = vec![0.0; nq * dh];
    let mut kh = vec![0.0; nk * dh];
    let mut vh = vec![0.0; nk * dh];
    let mut scores = vec![0.0; QUERY_BLOCK.min(nq.max(1)) * nk];
    let mut oh = vec![0.0; QUERY_BLOCK.min(nq.max(1)) * dh];
    for b in 0..lay.batch {
        let kv = lay.key_valid[b].min(nk);
        for head in 0..h {
            let col = head * dh;
            for i in 0..nq {
                qh[i * dh..(i + 1) * dh].copy_from_slice(&q[(b * nq + i) * d + col..(b * nq + i) * d + col + dh]);
            }
            for j in 0..nk {
                kh[j * dh..(j + 1) * dh].copy_from_slice(&k[(b * nk + j) * d + col..(b * nk + j) * d + col + dh]);
                vh[j * dh..(j + 1) * dh].copy_from_slice(&v[(b * nk + j) * d + col..(b * nk + j) * d + col + dh]);
            }
            let mut start = 0;
            while start < nq {
                let rows = QUERY_BLOCK.min(nq - start);
                let s = &mut scores[..rows * nk];
                gemm(rows, dh, nk, &qh[start * dh..(start + rows) * dh], false, &kh, true, 0.0, s);
                for r in 0..rows {
                    let i = start + r;
                    let limit = if lay.causal { kv.min(i + 1) } else { kv };
                    let row = &mut s[r * nk..(r + 1) * nk];
                    let mut max = f64::NEG_INFINITY;
                    for x in row[..limit].iter_mut() {
                        *x *= scale;
                        max = max.max(*x);
                    }
                    let mut z = 0.0;
                    for x in row[..limit].iter_mut() {
                        *x = (*x - max).exp();
                        z += *x;
                    }
                    for x in row[..limit].iter_mut() {
                        *x /= z;
                    }
                    row[limit..].fill(0.0);
                }
                let o = &mut oh[..rows * dh];
                gemm(rows, nk, dh, s, false, &vh, false, 0.0, o);
                for r in 0..rows {
                    let i = start + r;
                    out[(b * nq + i) * d + col..(b * nq + i) * d + col + dh].copy_from_slice(&o[r * dh..(r + 1) * dh]);
                }
                if let Some(p) = probs.as_deref_mut() {
                    let off = ((b * h + head) * nq + start) * nk;
                    p[off..off + rows * nk].copy_from_slice(s);
                }
                start += rows;
            }
        }
    }
    out
}

#[derive(Debug)]
struct AttentionPrimitive {
    layout: AttentionLayout,
    d: usize,
    probs: Vec<f64>,
}

impl Primitive for AttentionPrimitive {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn backward(&self, inputs: &[&RealTensor], _out: &RealTensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (q, k, v) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let lay = &self.layout;
        let (d, h) = (self.d, lay.heads);
        let dh = d / h;
        let (nq, nk) = (lay.q_len, lay.k_len);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; q.len()];
        let mut dk = vec![0.0; k.len()];
        let mut dv = vec![0.0; v.len()];
        let mut qh = vec![0.0; nq * dh];
        let mut kh = vec![0.0; nk * dh];
        let mut vh = vec![0.0; nk * dh];
        let mut goh = vec![0.0; nq * dh];
        let mut dp = vec![0.0; nq * nk];
        let mut tmp_q = vec![0.0; nq * dh];
        let mut tmp_k = vec![0.0; nk * dh];
        for b in 0..lay.batch {
            for head in 0..h {
                let col = head * dh;
                for i in 0..nq {
                    let src = (b * nq + i) * d + col;
                    qh[i * dh..(i + 1) * dh].copy_from_slice(&q[src..src + dh]);
                    goh[i * dh..(i + 1) * dh].copy_from_slice(&g[src..src + dh]);
                }
                for j in 0..nk {
                    let src = (b * nk + j) * d + col;
                    kh[j * dh..(j + 1) * dh].copy_from_slice(&k[src..src + dh]);
                    vh[j * dh..(j + 1) * dh].copy_from_slice(&v[src..src + dh]);
                }
                let p = &self.probs[(b * h + head) * nq * nk..(b * h + head + 1) * nq * nk];
                // dV = P^T dO
                gemm(nk, nq, dh, p, true, &goh, false, 0.0, &mut tmp_k);
                for j in 0..nk {
                    let dst = (b * nk + j) * d + col;
                    for c in 0..dh {
                        dv[dst + c] += tmp_k[j * dh + c];
                    }
                }
                // dP = dO V^T, then softmax adjoint
                gemm(nq, dh, nk, &goh, false, &vh, true, 0.0, &mut dp);
                for i in 0..nq {
                    let prow = &p[i * nk..(i + 1) * nk];
                    let drow = &mut dp[i * nk..(i + 1) * nk];
                    let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                    for (x, &pi) in drow.iter_mut().zip(prow) {
                        *x = pi * (*x - dot) * scale;
                    }
                }
                // dQ = dS K, dK = dS^T Q
                gemm(nq, nk, dh, &dp, false, &kh, false, 0.0, &mut tmp_q);
                for i in 0..nq {
                    let dst = (b * nq + i) * d + col;
                    for c in 0..dh {
                        dq[dst + c] += tmp_q[i * dh + c];
                    }
                }
                gemm(nk, nq, dh, &dp, true, &qh, false, 0.0, &mut tmp_k);
                for j in 0..nk {
                    let dst = (b * nk + j) * d + col;
                    for c in 0..dh {
                        dk[dst + c] += tmp_k[j * dh + c];
                    }
                }
            }
        }
        vec![Some(dq), Some(dk), Some(dv)]
    }
}

/// Plain-tensor attention weights for inspection and benchmarking.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub wq: RealTensor,
    pub wk: RealTensor,
    pub wv: RealTensor,
    pub wo: RealTensor,
}

/// Multi-head self-attention: `softmax(Q K^T / sqrt(d/h)) V` per head,
/// heads concatenated and projected by `W_O`.
pub fn mhsa_forward(x: &RealTensor, w: &AttentionWeights, heads: usize, causal: bool) -> Result<RealTensor> {
    Ok(mhsa_with_probs(x, w, heads, causal, false)?.0)
}

/// Like [`mhsa_forward`], also returning the `[heads, N, N]` weights.
pub fn mhsa_with_probs(
    x: &RealTensor,
    w: &AttentionWeights,
    heads: usize,
    causal: bool,
    keep_probs: bool,
) -> Result<(RealTensor, Vec<f64>)> {
    let (n, d) = x.dims2();
    if heads == 0 || d % heads != 0 {
        return Err(LayerError::Heads { d, heads });
    }
    for m in [&w.wq, &w.wk, &w.wv, &w.wo] {
        if m.shape() != [d, d] {
            return Err(shape_err("mhsa", x.shape(), m.shape()));
        }
    }
    let q = matmul(x, &w.wq)?;
    let k = matmul(x, &w.wk)?;
    let v = matmul(x, &w.wv)?;
    let lay = AttentionLayout { batch: 1, q_len: n, k_len: n, heads, causal, key_valid: vec![n] };
    let mut probs = if keep_probs { vec![0.0; heads * n * n] } else { Vec::new() };
    let o = attention_kernel(q.data(), k.data(), v.data(), d, &lay, keep_probs.then_some(probs.as_mut_slice()));
    let o = RealTensor::new(&[n, d], o)?;
    Ok((matmul(&o, &w.wo)?, probs))
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(LayerError::Heads { d, heads });
        }
        let mut mk = |suffix: &str, rng: &mut R| store.add(format!("{name}.{suffix}"), kaiming_uniform(rng, &[d, d], d), true);
        let wq = mk("w_q", rng);
        let wk = mk("w_k", rng);
        let wv = mk("w_v", rng);
        let wo = mk("w_o", rng);
        Ok(Self { wq, wk, wv, wo, heads })
    }

    pub fn weights(&self, store: &ParamStore) -> AttentionWeights {
        AttentionWeights {
            wq: store.get(self.wq).value.clone(),
            wk: store.get(self.wk).value.clone(),
            wv: store.get(self.wv).value.clone(),
            wo: store.get(self.wo).value.clone(),
        }
    }

    /// Attention from `queries` over `keys_values` (the same node for
    /// self-attention).
    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, queries: Var, keys_values: Var, layout: &AttentionLayout) -> Result<Var> {
        let (wq, wk, wv, wo) = (
            tape.param(store, self.wq),
            tape.param(store, self.wk),
            tape.param(store, self.wv),
            tape.param(store, self.wo),
        );
        let q = tape.matmul(queries, wq)?;
        let k = tape.matmul(keys_values, wk)?;
        let v = tape.matmul(keys_values, wv)?;
        let d = tape.value(q).dims2().1;
        if tape.value(q).dims2().0 != layout.batch * layout.q_len || tape.value(k).dims2().0 != layout.batch * layout.k_len {
            return Err(shape_err("attention", tape.value(q).shape(), tape.value(k).shape()));
        }
        let mut probs = vec![0.0; layout.batch * layout.heads * layout.q_len * layout.k_len];
        let o = attention_kernel(tape.value(q).data(), tape.value(k).data(), tape.value(v).data(), d, layout, Some(&mut probs));
        let o = RealTensor::new(&[layout.batch * layout.q_len, d], o)?;
        let prim = AttentionPrimitive { layout: layout.clone(), d, probs };
        let o = tape.custom(Box::new(prim), &[q, k, v], o);
        Ok(tape.matmul(o, wo)?)
    }
}

// ---------------------------------------------------------------------------
// Generic real/complex building blocks

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), RealTensor::filled(&[d], 1.0), false),
            bias: store.add(format!("{name}.bias"), RealTensor::zeros(&[d]), false),
        }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        Ok(tape.layer_norm(x, g, b, LAYER_NORM_EPS)?)
    }
}

/// Real affine map `x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        let w = store.add(format!("{name}.w"), kaiming_uniform(rng, &[d_in, d_out], d_in), true);
        let b = bias.then(|| {
            let bound = 1.0 / (d_in as f64).sqrt();
            store.add(format!("{name}.b"), uniform(rng, &[d_out], bound), false)
        });
        Self { w, b }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                Ok(tape.add_row_bias(y, b)?)
            }
            None => Ok(y),
        }
    }
}

/// Complex linear map without bias: `(x_r + i x_i)(W_r + i W_i)`.
#[derive(Debug, Clone)]
pub struct ComplexLinear {
    pub w_re: ParamId,
    pub w_im: ParamId,
}

impl ComplexLinear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let (re, im) = complex_kaiming_uniform(rng, &[d_in, d_out], d_in);
        Self { w_re: store.add(format!("{name}.w.re"), re, true), w_im: store.add(format!("{name}.w.im"), im, true) }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: CVar) -> Result<CVar> {
        let w = tape.cparam(store, self.w_re, self.w_im);
        let rr = tape.matmul(x.re, w.re)?;
        let ii = tape.matmul(x.im, w.im)?;
        let ri = tape.matmul(x.re, w.im)?;
        let ir = tape.matmul(x.im, w.re)?;
        Ok(CVar { re: tape.sub(rr, ii)?, im: tape.add(ri, ir)? })
    }
}

pub const COMPLEX_NORM_EPS: f64 = 1e-6;

/// `1 / sqrt(mean_j |z_j|^2 + eps)` per row.
#[derive(Debug)]
struct InvRms;

fn inv_rms_rows(re: &[f64], im: &[f64], cols: usize, eps: f64) -> Vec<f64> {
    re.chunks(cols)
        .zip(im.chunks(cols))
        .map(|(r, i)| {
            let ms = r.iter().zip(i).map(|(a, b)| a * a + b * b).sum::<f64>() / cols as f64;
            1.0 / (ms + eps).sqrt()
        })
        .collect()
}

impl Primitive for InvRms {
    fn name(&self) -> &'static str {
        "inv_rms"
    }

    fn backward(&self, inputs: &[&RealTensor], out: &RealTensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (re, im) = (inputs[0], inputs[1]);
        let cols = re.dims2().1;
        let s = out.data();
        let mut dre = vec![0.0; re.len()];
        let mut dim = vec![0.0; im.len()];
        for (r, (&sr, &gr)) in s.iter().zip(g).enumerate() {
            // ds/dx = -s^3 x / cols
            let f = -gr * sr * sr * sr / cols as f64;
            for c in 0..cols {
                let i = r * cols + c;
                dre[i] = f * re.data()[i];
                dim[i] = f * im.data()[i];
            }
        }
        vec![Some(dre), Some(dim)]
    }
}

/// Phase-preserving RMS normalization of the modulus, per row.
pub fn complex_rms_norm(tape: &mut Tape, z: CVar) -> Result<CVar> {
    let (rows, cols) = tape.value(z.re).dims2();
    let s = inv_rms_rows(tape.value(z.re).data(), tape.value(z.im).data(), cols, COMPLEX_NORM_EPS);
    let s = tape.custom(Box::new(InvRms), &[z.re, z.im], RealTensor::new(&[rows], s)?);
    Ok(CVar { re: tape.mul_col_bcast(z.re, s)?, im: tape.mul_col_bcast(z.im, s)? })
}

// ---------------------------------------------------------------------------
// Bridge

/// `[Re Z, Im Z] W + b` with `W: [2d, d]`.
pub fn bridge(z: &ComplexTensor, w: &RealTensor, bias: Option<&[f64]>) -> Result<RealTensor> {
    let (rows, d) = complex_dims(z);
    let (w_in, w_out) = w.dims2();
    if w_in != 2 * d || bias.is_some_and(|b| b.len() != w_out) {
        return Err(shape_err("bridge", z.shape(), w.shape()));
    }
    let mut cat = Vec::with_capacity(rows * 2 * d);
    for r in 0..rows {
        cat.extend_from_slice(&z.re()[r * d..(r + 1) * d]);
        cat.extend_from_slice(&z.im()[r * d..(r + 1) * d]);
    }
    let mut out = matmul(&RealTensor::new(&[rows, 2 * d], cat)?, w)?;
    if let Some(b) = bias {
        for row in out.data_mut().chunks_mut(w_out) {
            row.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct BridgeParams {
    pub proj: Linear,
}

impl BridgeParams {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        Self { proj: Linear::new(store, name, 2 * d, d, true, rng) }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, z: CVar) -> Result<Var> {
        let cat = tape.concat_cols(z.re, z.im)?;
        self.proj.apply(tape, store, cat)
    }
}

pub mod checks;
