//! Dense real/complex arrays and the FFT machinery under the harmonic layers.
//!
//! Complex arrays keep real and imaginary parts in separate flat buffers
//! (row-major), which is also how the autodiff tape sees them. The FFT is an
//! iterative radix-2 Cooley-Tukey transform with precomputed twiddles and
//! bit-reversal tables; plans are cached per thread and per length.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("FFT length {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("buffer of length {len} does not fill shape {shape:?}")]
    BadBuffer { len: usize, shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, NumericsError>;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Real-valued dense array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RealTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl RealTensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(NumericsError::BadBuffer { len: data.len(), shape: shape.to_vec() });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; numel(shape)] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; numel(shape)] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Rows and columns of a rank-2 tensor; rank-1 tensors are one row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            _ => {
                let c = *self.shape.last().unwrap_or(&1);
                (self.data.len() / c.max(1), c)
            }
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(NumericsError::BadBuffer { len: self.data.len(), shape: shape.to_vec() });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(NumericsError::NonFinite(i)),
            None => Ok(()),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.data[r * c..(r + 1) * c]
    }
}

/// Complex-valued dense array with split real/imaginary storage.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTensor {
    shape: Vec<usize>,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl ComplexTensor {
    pub fn new(shape: &[usize], re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        let n = numel(shape);
        if re.len() != n || im.len() != n {
            return Err(NumericsError::BadBuffer { len: re.len().max(im.len()), shape: shape.to_vec() });
        }
        Ok(Self { shape: shape.to_vec(), re, im })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = numel(shape);
        Self { shape: shape.to_vec(), re: vec![0.0; n], im: vec![0.0; n] }
    }

    pub fn from_complex(shape: &[usize], values: &[Complex64]) -> Result<Self> {
        let re = values.iter().map(|z| z.re).collect();
        let im = values.iter().map(|z| z.im).collect();
        Self::new(shape, re, im)
    }

    pub fn from_real(t: &RealTensor) -> Self {
        Self { shape: t.shape.clone(), re: t.data.clone(), im: vec![0.0; t.data.len()] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    pub fn re_mut(&mut self) -> &mut [f64] {
        &mut self.re
    }

    pub fn im_mut(&mut self) -> &mut [f64] {
        &mut self.im
    }

    pub fn parts_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.re, &mut self.im)
    }

    pub fn into_parts(self) -> (Vec<f64>, Vec<f64>) {
        (self.re, self.im)
    }

    pub fn get(&self, i: usize) -> Complex64 {
        Complex64::new(self.re[i], self.im[i])
    }

    pub fn set(&mut self, i: usize, z: Complex64) {
        self.re[i] = z.re;
        self.im[i] = z.im;
    }

    pub fn to_complex_vec(&self) -> Vec<Complex64> {
        self.re.iter().zip(&self.im).map(|(&r, &i)| Complex64::new(r, i)).collect()
    }

    pub fn real_part(&self) -> RealTensor {
        RealTensor { shape: self.shape.clone(), data: self.re.clone() }
    }

    pub fn imag_part(&self) -> RealTensor {
        RealTensor { shape: self.shape.clone(), data: self.im.clone() }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (i, (r, m)) in self.re.iter().zip(&self.im).enumerate() {
            if !r.is_finite() || !m.is_finite() {
                return Err(NumericsError::NonFinite(i));
            }
        }
        Ok(())
    }
}

/// Precomputed radix-2 plan for one transform length.
#[derive(Debug)]
pub struct FftPlan {
    n: usize,
    // Per-stage twiddles exp(-2*pi*i*j/size), j < size/2, for the stage
    // with half-width h stored at offset h - 1. `twiddle_im_inv` is negated.
    twiddle_re: Vec<f64>,
    twiddle_im: Vec<f64>,
    twiddle_im_inv: Vec<f64>,
    bitrev: Vec<usize>,
}

impl FftPlan {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(NumericsError::NotPowerOfTwo(n));
        }
        let log2n = n.trailing_zeros();
        let mut twiddle_re = Vec::with_capacity(n);
        let mut twiddle_im = Vec::with_capacity(n);
        let mut h = 1;
        while h < n {
            let stride = n / (2 * h);
            for j in 0..h {
                let angle = -2.0 * PI * (j * stride) as f64 / n as f64;
                twiddle_re.push(angle.cos());
                twiddle_im.push(angle.sin());
            }
            h *= 2;
        }
        let twiddle_im_inv = twiddle_im.iter().map(|v| -v).collect();
        let bitrev = (0..n)
            .map(|i| if log2n == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - log2n) })
            .collect();
        Ok(Self { n, twiddle_re, twiddle_im, twiddle_im_inv, bitrev })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    fn transform(&self, re: &mut [f64], im: &mut [f64], inverse: bool) {
        let n = self.n;
        assert!(re.len() == n && im.len() == n, "buffer length differs from plan length {n}");
        for i in 0..n {
            let j = self.bitrev[i];
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let tw_im = if inverse { &self.twiddle_im_inv } else { &self.twiddle_im };
        let mut half = 1;
        while half < n {
            let size = 2 * half;
            let (wr, wi) = (&self.twiddle_re[half - 1..size - 1], &tw_im[half - 1..size - 1]);
            for (cr, ci) in re.chunks_exact_mut(size).zip(im.chunks_exact_mut(size)) {
                let (ar, br) = cr.split_at_mut(half);
                let (ai, bi) = ci.split_at_mut(half);
                for j in 0..half {
                    let (w_r, w_i) = (wr[j], wi[j]);
                    let tr = br[j] * w_r - bi[j] * w_i;
                    let ti = br[j] * w_i + bi[j] * w_r;
                    br[j] = ar[j] - tr;
                    bi[j] = ai[j] - ti;
                    ar[j] += tr;
                    ai[j] += ti;
                }
            }
            half = size;
        }
        if inverse {
            let scale = 1.0 / n as f64;
            re.iter_mut().for_each(|v| *v *= scale);
            im.iter_mut().for_each(|v| *v *= scale);
        }
    }

    /// Unnormalized forward transform in place.
    pub fn forward(&self, re: &mut [f64], im: &mut [f64]) {
        self.transform(re, im, false);
    }

    /// Inverse transform in place, including the 1/N factor.
    pub fn inverse(&self, re: &mut [f64], im: &mut [f64]) {
        self.transform(re, im, true);
    }
}

thread_local! {
    static PLANS: RefCell<HashMap<usize, Rc<FftPlan>>> = RefCell::new(HashMap::new());
}

/// Cached plan for length `n` on the current thread.
pub fn plan(n: usize) -> Result<Rc<FftPlan>> {
    PLANS.with(|cache| {
        if let Some(p) = cache.borrow().get(&n) {
            return Ok(Rc::clone(p));
        }
        let p = Rc::new(FftPlan::new(n)?);
        cache.borrow_mut().insert(n, Rc::clone(&p));
        Ok(p)
    })
}

fn rank1_len(x: &ComplexTensor) -> Result<usize> {
    if x.shape.len() != 1 {
        return Err(NumericsError::Rank { expected: 1, shape: x.shape.clone() });
    }
    Ok(x.shape[0])
}

pub fn fft(x: &ComplexTensor) -> Result<ComplexTensor> {
    let n = rank1_len(x)?;
    x.check_finite()?;
    let p = plan(n)?;
    let mut out = x.clone();
    p.forward(&mut out.re, &mut out.im);
    Ok(out)
}

pub fn ifft(x: &ComplexTensor) -> Result<ComplexTensor> {
    let n = rank1_len(x)?;
    x.check_finite()?;
    let p = plan(n)?;
    let mut out = x.clone();
    p.inverse(&mut out.re, &mut out.im);
    Ok(out)
}

/// Pads a 1-D sequence with `value` up to the next power of two. Returns the
/// padded sequence and the original length.
pub fn pad_pow2(x: &ComplexTensor, value: Complex64) -> Result<(ComplexTensor, usize)> {
    let n = rank1_len(x)?;
    let n_pad = n.max(1).next_power_of_two();
    let mut re = x.re.clone();
    let mut im = x.im.clone();
    re.resize(n_pad, value.re);
    im.resize(n_pad, value.im);
    Ok((ComplexTensor { shape: vec![n_pad], re, im }, n))
}

/// O(N^2) circular convolution, `y[n] = sum_m x[m] k[(n - m) mod N]`.
pub fn circular_convolve_direct(x: &ComplexTensor, k: &ComplexTensor) -> Result<ComplexTensor> {
    let n = rank1_len(x)?;
    let nk = rank1_len(k)?;
    if n != nk {
        return Err(NumericsError::ShapeMismatch { left: x.shape.clone(), right: k.shape.clone() });
    }
    let mut out = ComplexTensor::zeros(&[n]);
    for i in 0..n {
        let mut acc = Complex64::new(0.0, 0.0);
        for m in 0..n {
            acc += x.get(m) * k.get((i + n - m) % n);
        }
        out.set(i, acc);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Mul,
    /// `a * conj(b)`
    ConjMul,
}

pub fn complex_elementwise(a: &ComplexTensor, b: &ComplexTensor, op: ElementwiseOp) -> Result<ComplexTensor> {
    if a.shape != b.shape {
        return Err(NumericsError::ShapeMismatch { left: a.shape.clone(), right: b.shape.clone() });
    }
    let mut out = ComplexTensor::zeros(&a.shape);
    for i in 0..a.len() {
        let (x, y) = (a.get(i), b.get(i));
        let z = match op {
            ElementwiseOp::Add => x + y,
            ElementwiseOp::Mul => x * y,
            ElementwiseOp::ConjMul => x * y.conj(),
        };
        out.set(i, z);
    }
    Ok(out)
}

/// Phase of `re + i*im` in (-pi, pi], with phase(0) = 0.
pub fn phase_of(re: f64, im: f64) -> f64 {
    if re == 0.0 && im == 0.0 {
        return 0.0;
    }
    let p = im.atan2(re);
    // atan2(+-0, negative) gives +-pi; fold -pi onto pi
    if p == -PI {
        PI
    } else {
        p
    }
}

/// Modulus and phase per element.
pub fn polar(z: &ComplexTensor) -> (RealTensor, RealTensor) {
    let modulus = z.re.iter().zip(&z.im).map(|(r, i)| r.hypot(*i)).collect();
    let phase = z.re.iter().zip(&z.im).map(|(r, i)| phase_of(*r, *i)).collect();
    (
        RealTensor { shape: z.shape.clone(), data: modulus },
        RealTensor { shape: z.shape.clone(), data: phase },
    )
}

/// `c = beta * c + op(a) * op(b)` for row-major operands, where `op(a)` is
/// `m x k` and `op(b)` is `k x n`. A transposed operand is stored as its
/// untransposed shape (`k x m` for `a`, `n x k` for `b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs buffer");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer");
    assert_eq!(c.len(), m * n, "gemm: output buffer");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths bound every index dgemm touches for the
    // given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain `a[m x k] * b[k x n]`.
pub fn matmul(a: &RealTensor, b: &RealTensor) -> Result<RealTensor> {
    let (m, k) = a.dims2();
    let (k2, n) = b.dims2();
    if k != k2 {
        return Err(NumericsError::ShapeMismatch { left: a.shape.clone(), right: b.shape.clone() });
    }
    let mut out = RealTensor::zeros(&[m, n]);
    gemm(m, k, n, &a.data, false, &b.data, false, 0.0, &mut out.data);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c1(vals: &[(f64, f64)]) -> ComplexTensor {
        ComplexTensor::new(
            &[vals.len()],
            vals.iter().map(|v| v.0).collect(),
            vals.iter().map(|v| v.1).collect(),
        )
        .unwrap()
    }

    fn random_c(rng: &mut ChaCha8Rng, n: usize) -> ComplexTensor {
        let re = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let im = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        ComplexTensor::new(&[n], re, im).unwrap()
    }

    // Direct O(N^2) DFT, independent of the radix-2 kernel.
    fn dft_oracle(x: &ComplexTensor) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                (0..n)
                    .map(|t| {
                        let ang = -2.0 * PI * (k * t) as f64 / n as f64;
                        x.get(t) * Complex64::new(ang.cos(), ang.sin())
                    })
                    .sum()
            })
            .collect()
    }

    fn max_abs_diff(a: &ComplexTensor, b: &ComplexTensor) -> f64 {
        (0..a.len()).map(|i| (a.get(i) - b.get(i)).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn fft_of_impulse_and_constant() {
        let y = fft(&c1(&[(1.0, 0.0), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0)])).unwrap();
        for i in 0..4 {
            assert!((y.get(i) - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        }
        let y = fft(&c1(&[(1.0, 0.0); 4])).unwrap();
        assert!((y.get(0) - Complex64::new(4.0, 0.0)).norm() < 1e-15);
        for i in 1..4 {
            assert!(y.get(i).norm() < 1e-15);
        }
        let x = ifft(&c1(&[(4.0, 0.0), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0)])).unwrap();
        for i in 0..4 {
            assert!((x.get(i) - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn fft_matches_direct_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [1, 2, 8, 64] {
            let x = random_c(&mut rng, n);
            let y = fft(&x).unwrap();
            let want = dft_oracle(&x);
            let err = (0..n).map(|i| (y.get(i) - want[i]).norm()).fold(0.0, f64::max);
            assert!(err < 1e-12, "n={n} err={err}");
        }
    }

    #[test]
    fn parseval_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_c(&mut rng, 128);
        let y = fft(&x).unwrap();
        let time: f64 = (0..128).map(|i| x.get(i).norm_sqr()).sum();
        let freq: f64 = (0..128).map(|i| y.get(i).norm_sqr()).sum::<f64>() / 128.0;
        assert!(((time - freq) / time).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_lengths_and_non_finite() {
        let x = c1(&[(1.0, 0.0); 6]);
        assert_eq!(fft(&x), Err(NumericsError::NotPowerOfTwo(6)));
        assert_eq!(ifft(&x), Err(NumericsError::NotPowerOfTwo(6)));
        let bad = c1(&[(1.0, 0.0), (f64::NAN, 0.0)]);
        assert!(matches!(fft(&bad), Err(NumericsError::NonFinite(1))));
    }

    #[test]
    fn pad_to_power_of_two() {
        let (p, n) = pad_pow2(&c1(&[(1.0, 1.0); 8]), Complex64::new(0.0, 0.0)).unwrap();
        assert_eq!((p.len(), n), (8, 8));
        assert_eq!(p, c1(&[(1.0, 1.0); 8]));
        let (p, n) = pad_pow2(&c1(&[(2.0, 0.0); 5]), Complex64::new(0.0, 0.0)).unwrap();
        assert_eq!((p.len(), n), (8, 5));
        assert!(p.re()[5..].iter().chain(&p.im()[5..]).all(|v| *v == 0.0));
        let (p, _) = pad_pow2(&c1(&[(0.0, 0.0); 33]), Complex64::new(0.0, 0.0)).unwrap();
        assert_eq!(p.len(), 64);
    }

    #[test]
    fn direct_convolution_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_c(&mut rng, 6);
        let mut delta = ComplexTensor::zeros(&[6]);
        delta.set(0, Complex64::new(1.0, 0.0));
        assert_eq!(circular_convolve_direct(&x, &delta).unwrap(), x);

        let y = circular_convolve_direct(&c1(&[(1.0, 0.0), (2.0, 0.0)]), &c1(&[(3.0, 0.0), (4.0, 0.0)])).unwrap();
        assert_eq!(y, c1(&[(11.0, 0.0), (10.0, 0.0)]));

        let k = random_c(&mut rng, 5);
        assert!(circular_convolve_direct(&x, &k).is_err());
    }

    #[test]
    fn convolution_theorem_n16() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_c(&mut rng, 16);
        let k = random_c(&mut rng, 16);
        let spectrum = complex_elementwise(&fft(&x).unwrap(), &fft(&k).unwrap(), ElementwiseOp::Mul).unwrap();
        let via_fft = ifft(&spectrum).unwrap();
        let direct = circular_convolve_direct(&x, &k).unwrap();
        assert!(max_abs_diff(&via_fft, &direct) < 1e-10);
    }

    #[test]
    fn elementwise_ops() {
        let a = c1(&[(1.0, 1.0)]);
        let b = c1(&[(1.0, -1.0)]);
        assert_eq!(complex_elementwise(&a, &b, ElementwiseOp::Mul).unwrap(), c1(&[(2.0, 0.0)]));
        let zero = ComplexTensor::zeros(&[1]);
        assert_eq!(complex_elementwise(&a, &zero, ElementwiseOp::Add).unwrap(), a);
        assert!(complex_elementwise(&a, &ComplexTensor::zeros(&[2]), ElementwiseOp::Add).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let (t, f) = (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
            let za = c1(&[(f64::cos(t), f64::sin(t))]);
            let zb = c1(&[(f64::cos(f), f64::sin(f))]);
            let z = complex_elementwise(&za, &zb, ElementwiseOp::ConjMul).unwrap();
            let (_, ph) = polar(&z);
            assert!((ph.data()[0] - (t - f)).abs() < 1e-12);
        }
    }

    #[test]
    fn polar_conventions() {
        let (m, p) = polar(&c1(&[(3.0, 4.0), (0.0, 0.0), (-1.0, 0.0), (-1.0, -0.0)]));
        assert_eq!(m.data()[0], 5.0);
        assert_eq!(p.data()[0], 4f64.atan2(3.0));
        assert_eq!((m.data()[1], p.data()[1]), (0.0, 0.0));
        assert_eq!((m.data()[2], p.data()[2]), (1.0, PI));
        assert_eq!(p.data()[3], PI);
    }

    proptest! {
        #[test]
        fn round_trip_and_linearity(
            log_n in 0u32..=10,
            seed in any::<u64>(),
            alpha in -2.0f64..2.0,
            beta in -2.0f64..2.0,
        ) {
            let n = 1usize << log_n;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_c(&mut rng, n);
            let y = random_c(&mut rng, n);
            let back = ifft(&fft(&x).unwrap()).unwrap();
            prop_assert!(max_abs_diff(&back, &x) < 1e-12);

            let mut comb = ComplexTensor::zeros(&[n]);
            for i in 0..n {
                comb.set(i, x.get(i) * alpha + y.get(i) * beta);
            }
            let (fx, fy, fc) = (fft(&x).unwrap(), fft(&y).unwrap(), fft(&comb).unwrap());
            for i in 0..n {
                let want = fx.get(i) * alpha + fy.get(i) * beta;
                prop_assert!((fc.get(i) - want).norm() < 1e-12);
            }
        }

        #[test]
        fn convolution_theorem(log_n in 0u32..=6, seed in any::<u64>()) {
            let n = 1usize << log_n;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_c(&mut rng, n);
            let k = random_c(&mut rng, n);
            let spectrum = complex_elementwise(&fft(&x).unwrap(), &fft(&k).unwrap(), ElementwiseOp::Mul).unwrap();
            let via_fft = ifft(&spectrum).unwrap();
            let direct = circular_convolve_direct(&x, &k).unwrap();
            prop_assert!(max_abs_diff(&via_fft, &direct) < 1e-10);
        }
    }
}
