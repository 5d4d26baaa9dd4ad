//! Finite-difference checks of every tape-level layer against central
//! differences. Shared by the unit tests, the acceptance suite and the
//! `report` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check, GradCheckReport};

pub const CHECK_EPS: f64 = 1e-5;
pub const CHECK_COORDS: usize = 64;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> RealTensor {
    let n: usize = shape.iter().product();
    RealTensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape")
}

/// Nonlinear scalar probe of a complex activation so that every output
/// element contributes a distinct adjoint.
fn probe(tape: &mut Tape, z: CVar, seed: u64) -> crate::autodiff::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let shape = tape.value(z.re).shape().to_vec();
    let cr = tape.constant(random_tensor(&mut rng, &shape, 1.0));
    let ci = tape.constant(random_tensor(&mut rng, &shape, 1.0));
    let a = tape.mul(z.re, cr)?;
    let sq = tape.mul(z.im, z.im)?;
    let b = tape.mul(sq, ci)?;
    let s = tape.add(a, b)?;
    Ok(tape.sum(s))
}

fn probe_real(tape: &mut Tape, x: Var, seed: u64) -> crate::autodiff::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51f1);
    let shape = tape.value(x).shape().to_vec();
    let c = tape.constant(random_tensor(&mut rng, &shape, 1.0));
    let sq = tape.mul(x, x)?;
    let a = tape.mul(sq, c)?;
    let b = tape.add(a, x)?;
    Ok(tape.sum(b))
}

fn to_ad(e: LayerError) -> AutodiffError {
    match e {
        LayerError::Autodiff(a) => a,
        other => AutodiffError::NonFinite(other.to_string()),
    }
}

/// Random complex input registered as a trainable pair.
fn add_complex_input(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, rows: usize, d: usize) -> (ParamId, ParamId) {
    let re = random_tensor(rng, &[rows, d], 1.0);
    let im = random_tensor(rng, &[rows, d], 1.0);
    (store.add(format!("{name}.re"), re, true), store.add(format!("{name}.im"), im, true))
}

fn input(tape: &mut Tape, store: &ParamStore, ids: (ParamId, ParamId)) -> CVar {
    tape.cparam(store, ids.0, ids.1)
}

pub fn check_harmonic_embed(seed: u64) -> crate::autodiff::Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let table = HarmonicEmbeddingTable::new(&mut store, "emb", 7, 4, &mut rng);
    store.get_mut(table.amplitudes).value = random_tensor(&mut rng, &[7, 4], 1.0);
    let ids = [3, 1, 6, 3, 0, 2, 5, 5];
    grad_check(&mut store, CHECK_EPS, CHECK_COORDS, seed, |tape, s| {
        let z = table.apply(tape, s, &ids, 4).map_err(to_ad)?;
        probe(tape, z, seed)
    })
}

pub fn check_modrelu(seed: u64) -> crate::autodiff::Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, d) = (6, 4);
    let mut store = ParamStore::new();
    let z = add_complex_input(&mut store, &mut rng, "z", rows, d);
    let act = ModReluParams::new(&mut store, "act", d);
    // Bias mixes live and dead units; keep |z| + b clear of zero.
    let bias = [-0.3, 0.2, -0.9, 0.05];
    store.get_mut(act.bias).value = RealTensor::new(&[d], bias.to_vec()).expect("bias");
    for i in 0..rows * d {
        let (zr, zi) = (store.get(z.0).value.data()[i], store.get(z.1).value.data()[i]);
        if (zr.hypot(zi) + bias[i % d]).abs() < 1e-2 {
            store.get_mut(z.0).value.data_mut()[i] += 0.05;
        }
    }
    grad_check(&mut store, CHECK_EPS, CHECK_COORDS, seed, |tape, s| {
        let x = input(tape, s, z);
        let y = act.apply(tape, s, x).map_err(to_ad)?;
        probe(tape, y, seed)
    })
}

pub fn check_spectral_gate(seed: u64) -> crate::autodiff::Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, d) = (5, 4);
    let mut store = ParamStore::new();
    let z = add_complex_input(&mut store, &mut rng, "z", rows, d);
    let gate = SpectralGateParams::new(&mut store, "gate", d, &mut rng);
    store.get_mut(gate.g).value = random_tensor(&mut rng, &[d], 1.0);
    grad_check(&mut store, CHECK_EPS, CHECK_COORDS, seed, |tape, s| {
        let x = input(tape, s, z);
        let y = gate.apply(tape, s, x).map_err(to_ad)?;
        probe(tape, y, seed)
    })
}

pub fn check_ghc(seed: u64) -> crate::autodiff::Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, n, l_pad) = (4, 6, 8);
    let layout = SeqLayout { batch: 2, seq_len: n, valid: vec![6, 4] };
    let mut store = ParamStore::new();
    let x = add_complex_input(&mut store, &mut rng, "x", layout.rows(), d);
    let kernel = GlobalKernel::new(&mut store, "ghc", d, l_pad, &mut rng).map_err(to_ad)?;
    store.get_mut(kernel.k_re).value = random_tensor(&mut rng, &[d, l_pad], 1.0);
    store.get_mut(kernel.k_im).value = random_tensor(&mut rng, &[d, l_pad], 1.0);
    grad_check(&mut store, CHECK_EPS, CHECK_COORDS, seed, |tape, s| {
        let xv = input(tape, s, x);
        let y = kernel.apply(tape, s, xv, &layout).map_err(to_ad)?;
        probe(tape, y, seed)
    })
}

pub fn check_attention(seed: u64) -> crate::autodiff::Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, heads) = (4, 2);
    let self_layout = AttentionLayout { batch: 2, q_len: 5, k_len: 5, heads, causal: true, key_valid: vec![5, 3] };
    let cross_layout = AttentionLayout { batch: 2, q_len: 5, k_len: 3, heads, causal: false, key_valid: vec![3, 2] };
    let mut store = ParamStore::new();
    let xq = store.add("xq", random_tensor(&mut rng, &[10, d], 1.0), true);
    let mem = store.add("mem", random_tensor(&mut rng, &[6, d], 1.0), true);
    let self_attn = AttentionParams::new(&mut store, "self", d, heads, &mut rng).map_err(to_ad)?;
    let cross_attn = AttentionParams::new(&mut store, "cross", d, heads, &mut rng).map_err(to_ad)?;
    grad_check(&mut store, CHECK_EPS, CHECK_COORDS, seed, |tape, s| {
        let x = tape.param(s, xq);
        let m = tape.param(s, mem);
        let a = self_attn.apply(tape, s, x, x, &self_layout).map_err(to_ad)?;
        let c = cross_attn.apply(tape, s, a, m, &cross_layout).map_err(to_ad)?;
        probe_real(tape, c, seed)
    })
}

pub fn check_bridge(seed: u64) -> crate::autodiff::Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, d) = (5, 4);
    let mut store = ParamStore::new();
    let z = add_complex_input(&mut store, &mut rng, "z", rows, d);
    let br = BridgeParams::new(&mut store, "bridge", d, &mut rng);
    grad_check(&mut store, CHECK_EPS, CHECK_COORDS, seed, |tape, s| {
        let x = input(tape, s, z);
        let y = br.apply(tape, s, x).map_err(to_ad)?;
        probe_real(tape, y, seed)
    })
}

pub fn check_norms_and_linears(seed: u64) -> crate::autodiff::Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, d) = (5, 4);
    let mut store = ParamStore::new();
    let z = add_complex_input(&mut store, &mut rng, "z", rows, d);
    let x = store.add("x", random_tensor(&mut rng, &[rows, d], 1.0), true);
    let ln = LayerNormParams::new(&mut store, "ln", d);
    store.get_mut(ln.gain).value = random_tensor(&mut rng, &[d], 1.5);
    let lin = Linear::new(&mut store, "lin", d, 3, true, &mut rng);
    let clin = ComplexLinear::new(&mut store, "clin", d, 3, &mut rng);
    grad_check(&mut store, CHECK_EPS, CHECK_COORDS, seed, |tape, s| {
        let zv = input(tape, s, z);
        let zn = complex_rms_norm(tape, zv).map_err(to_ad)?;
        let zc = clin.apply(tape, s, zn).map_err(to_ad)?;
        let xv = tape.param(s, x);
        let xn = ln.apply(tape, s, xv).map_err(to_ad)?;
        let y = lin.apply(tape, s, xn).map_err(to_ad)?;
        let a = probe(tape, zc, seed)?;
        let b = probe_real(tape, y, seed)?;
        tape.add(a, b)
    })
}

/// One full harmonic block on random inputs: norm, gate, global
/// convolution, ModReLU and residual, then a complex feed-forward with its
/// own residual.
pub fn check_ghc_block(seed: u64) -> crate::autodiff::Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (8, 4);
    let layout = SeqLayout::single(n);
    let mut store = ParamStore::new();
    let z = add_complex_input(&mut store, &mut rng, "x", n, d);
    let gate = SpectralGateParams::new(&mut store, "gate", d, &mut rng);
    let kernel = GlobalKernel::new(&mut store, "ghc", d, n, &mut rng).map_err(to_ad)?;
    let act = ModReluParams::new(&mut store, "act", d);
    store.get_mut(act.bias).value = RealTensor::new(&[d], vec![0.1, -0.05, 0.2, 0.0]).expect("bias");
    let ff1 = ComplexLinear::new(&mut store, "ff1", d, d, &mut rng);
    let ff_act = ModReluParams::new(&mut store, "ff_act", d);
    store.get_mut(ff_act.bias).value = RealTensor::new(&[d], vec![0.3, 0.1, 0.2, 0.4]).expect("bias");
    let ff2 = ComplexLinear::new(&mut store, "ff2", d, d, &mut rng);
    grad_check(&mut store, CHECK_EPS, CHECK_COORDS, seed, |tape, s| {
        let x = input(tape, s, z);
        let h = complex_rms_norm(tape, x).map_err(to_ad)?;
        let h = gate.apply(tape, s, h).map_err(to_ad)?;
        let h = kernel.apply(tape, s, h, &layout).map_err(to_ad)?;
        let h = act.apply(tape, s, h).map_err(to_ad)?;
        let x = CVar { re: tape.add(x.re, h.re)?, im: tape.add(x.im, h.im)? };
        let f = complex_rms_norm(tape, x).map_err(to_ad)?;
        let f = ff1.apply(tape, s, f).map_err(to_ad)?;
        let f = ff_act.apply(tape, s, f).map_err(to_ad)?;
        let f = ff2.apply(tape, s, f).map_err(to_ad)?;
        let x = CVar { re: tape.add(x.re, f.re)?, im: tape.add(x.im, f.im)? };
        probe(tape, x, seed)
    })
}

/// Every layer-level check, labelled.
pub fn all_layer_checks(seed: u64) -> crate::autodiff::Result<Vec<(&'static str, GradCheckReport)>> {
    Ok(vec![
        ("harmonic_embed", check_harmonic_embed(seed)?),
        ("modrelu", check_modrelu(seed)?),
        ("spectral_gate", check_spectral_gate(seed)?),
        ("ghc", check_ghc(seed)?),
        ("attention", check_attention(seed)?),
        ("bridge", check_bridge(seed)?),
        ("norms_and_linears", check_norms_and_linears(seed)?),
        ("ghc_block", check_ghc_block(seed)?),
    ])
}
