//! Discrete Fourier transforms of real channel fibers.
//!
//! Forward transforms are unnormalized, `X[k] = sum_n f[n] exp(-2 pi i k n / N)`;
//! the inverse carries the `1/N`. Any length is supported: powers of two run an
//! iterative radix-2 kernel, composite lengths split off their smallest prime
//! factor, small primes use a direct DFT and larger primes go through
//! Bluestein's chirp-z reformulation on a power-of-two transform.
//!
//! Every kernel tallies the real floating-point operations it executes into a
//! per-thread counter (see [`reset_flop_counter`]). A complex multiply counts
//! 6, a complex add 2; sign flips and conjugations are free.

use std::cell::Cell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, OnceLock, RwLock};

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tensor::Fiber;

const CMUL: u64 = 6;
const CADD: u64 = 2;

/// Largest prime handled by a direct DFT; larger primes use Bluestein.
const DIRECT_PRIME_LIMIT: usize = 16;

/// Tolerance for the conjugate-symmetry check in [`ifft`], relative to the
/// largest bin magnitude.
pub const SYMMETRY_TOLERANCE: f64 = 1e-9;

thread_local! {
    static FLOPS: Cell<u64> = const { Cell::new(0) };
}

/// Zeroes this thread's FLOP counter.
pub fn reset_flop_counter() {
    FLOPS.with(|c| c.set(0));
}

/// Real FLOPs executed on this thread since the last reset.
pub fn flop_counter() -> u64 {
    FLOPS.with(Cell::get)
}

pub(crate) fn record_flops(n: u64) {
    FLOPS.with(|c| c.set(c.get() + n));
}

/// Spectrum of a length-`N` fiber.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum {
    bins: Vec<Complex64>,
}

impl ComplexSpectrum {
    pub fn new(bins: Vec<Complex64>) -> Self {
        Self { bins }
    }

    pub fn from_parts(re: &[f64], im: &[f64]) -> Result<Self> {
        if re.len() != im.len() {
            return Err(Error::shape(format!(
                "spectrum parts of length {} and {}",
                re.len(),
                im.len()
            )));
        }
        Ok(Self {
            bins: re.iter().zip(im).map(|(&r, &i)| Complex64::new(r, i)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn bins(&self) -> &[Complex64] {
        &self.bins
    }

    pub fn re(&self) -> Vec<f64> {
        self.bins.iter().map(|c| c.re).collect()
    }

    pub fn im(&self) -> Vec<f64> {
        self.bins.iter().map(|c| c.im).collect()
    }

    /// Largest deviation from `X[k] = conj(X[(N - k) mod N])`.
    pub fn symmetry_defect(&self) -> f64 {
        let n = self.bins.len();
        (0..n)
            .map(|k| (self.bins[k] - self.bins[(n - k) % n].conj()).norm())
            .fold(0.0, f64::max)
    }
}

/// Forward DFT of a real fiber.
pub fn fft(f: &[f64]) -> ComplexSpectrum {
    let n = f.len();
    let mut buf: Vec<Complex64> = f.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    if n > 0 {
        let mut flops = 0;
        plan(n).forward(&mut buf, &mut flops);
        record_flops(flops);
    }
    ComplexSpectrum { bins: buf }
}

/// Inverse DFT with `1/N` scaling. The spectrum must be conjugate-symmetric
/// (a real signal); the imaginary residue is discarded after the check.
pub fn ifft(s: &ComplexSpectrum) -> Result<Fiber> {
    let n = s.len();
    if n == 0 {
        return Ok(Fiber::new(Vec::new()));
    }
    let scale = s.bins.iter().map(|c| c.norm()).fold(1.0, f64::max);
    let defect = s.symmetry_defect();
    if defect > SYMMETRY_TOLERANCE * scale {
        return Err(Error::Contract(format!(
            "spectrum is not conjugate-symmetric (defect {defect:.3e})"
        )));
    }
    let mut buf = s.bins.clone();
    let mut flops = 0;
    plan(n).inverse_unnormalized(&mut buf, &mut flops);
    flops += n as u64;
    record_flops(flops);
    let inv = 1.0 / n as f64;
    Ok(Fiber::new(buf.iter().map(|c| c.re * inv).collect()))
}

/// Elementwise complex product.
pub fn hadamard(a: &ComplexSpectrum, b: &ComplexSpectrum) -> Result<ComplexSpectrum> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "hadamard of spectra with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    record_flops(CMUL * a.len() as u64);
    Ok(ComplexSpectrum {
        bins: a.bins.iter().zip(&b.bins).map(|(x, y)| x * y).collect(),
    })
}

/// Number of stored bins for the half spectrum of a real length-`n` signal.
pub fn half_len(n: usize) -> usize {
    n / 2 + 1
}

/// Writes bins `0..=N/2` of the DFT of real `input` into `out`.
///
/// Length 2 runs a real-only butterfly (2 FLOPs); length 1 is free.
pub(crate) fn forward_real_half(input: &[f64], out: &mut [Complex64], flops: &mut u64) {
    let n = input.len();
    debug_assert_eq!(out.len(), half_len(n));
    match n {
        1 => out[0] = Complex64::new(input[0], 0.0),
        2 => {
            out[0] = Complex64::new(input[0] + input[1], 0.0);
            out[1] = Complex64::new(input[0] - input[1], 0.0);
            *flops += 2;
        }
        _ => {
            let mut buf: Vec<Complex64> = input.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            plan(n).forward(&mut buf, flops);
            out.copy_from_slice(&buf[..out.len()]);
        }
    }
}

/// Inverse of [`forward_real_half`] without the `1/N` factor: rebuilds the
/// full spectrum by conjugate symmetry and keeps the real part.
pub(crate) fn inverse_real_half_unnormalized(half: &[Complex64], out: &mut [f64], flops: &mut u64) {
    let n = out.len();
    debug_assert_eq!(half.len(), half_len(n));
    match n {
        1 => out[0] = half[0].re,
        2 => {
            out[0] = half[0].re + half[1].re;
            out[1] = half[0].re - half[1].re;
            *flops += 2;
        }
        _ => {
            let mut buf = vec![Complex64::new(0.0, 0.0); n];
            buf[..half.len()].copy_from_slice(half);
            for k in half.len()..n {
                buf[k] = half[n - k].conj();
            }
            plan(n).inverse_unnormalized(&mut buf, flops);
            for (o, c) in out.iter_mut().zip(&buf) {
                *o = c.re;
            }
        }
    }
}

/// FLOPs of one [`forward_real_half`] (or inverse) call of length `n`, as
/// executed by this module.
pub fn real_transform_flops(n: usize) -> u64 {
    match n {
        0 | 1 => 0,
        2 => 2,
        _ => plan(n).flops(),
    }
}

/// Cached transform plan for length `n`.
pub fn plan(n: usize) -> Arc<FftPlan> {
    static CACHE: OnceLock<RwLock<HashMap<usize, Arc<FftPlan>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| RwLock::new(HashMap::new()));
    if let Some(p) = cache.read().expect("fft plan cache poisoned").get(&n) {
        return Arc::clone(p);
    }
    let built = Arc::new(FftPlan::build(n));
    let mut guard = cache.write().expect("fft plan cache poisoned");
    Arc::clone(guard.entry(n).or_insert(built))
}

#[derive(Debug)]
enum Algorithm {
    Identity,
    Radix2 {
        twiddles: Vec<Complex64>,
        bitrev: Vec<usize>,
    },
    MixedRadix {
        radix: usize,
        inner: Arc<FftPlan>,
        twiddles: Vec<Complex64>,
    },
    Direct {
        roots: Vec<Complex64>,
    },
    Bluestein {
        chirp: Vec<Complex64>,
        kernel: Vec<Complex64>,
        inner: Arc<FftPlan>,
    },
}

/// Precomputed tables for a forward DFT of one length.
#[derive(Debug)]
pub struct FftPlan {
    len: usize,
    algorithm: Algorithm,
    flops: u64,
}

fn root(n: usize, k: usize) -> Complex64 {
    Complex64::from_polar(1.0, -2.0 * PI * (k % n) as f64 / n as f64)
}

fn smallest_factor(n: usize) -> usize {
    let mut p = 2;
    while p * p <= n {
        if n.is_multiple_of(p) {
            return p;
        }
        p += 1;
    }
    n
}

impl FftPlan {
    fn build(n: usize) -> Self {
        let algorithm = if n <= 1 {
            Algorithm::Identity
        } else if n.is_power_of_two() {
            let bits = n.trailing_zeros();
            Algorithm::Radix2 {
                twiddles: (0..n / 2).map(|k| root(n, k)).collect(),
                bitrev: (0..n)
                    .map(|i| i.reverse_bits() >> (usize::BITS - bits))
                    .collect(),
            }
        } else {
            let p = smallest_factor(n);
            if p < n {
                Algorithm::MixedRadix {
                    radix: p,
                    inner: plan(n / p),
                    twiddles: (0..n).map(|k| root(n, k)).collect(),
                }
            } else if n <= DIRECT_PRIME_LIMIT {
                Algorithm::Direct {
                    roots: (0..n).map(|k| root(n, k)).collect(),
                }
            } else {
                let m = (2 * n - 1).next_power_of_two();
                // exp(-i pi k^2 / n), reducing k^2 mod 2n to keep the angle small
                let chirp: Vec<Complex64> = (0..n)
                    .map(|k| {
                        let e = (k * k) % (2 * n);
                        Complex64::from_polar(1.0, -PI * e as f64 / n as f64)
                    })
                    .collect();
                let inner = plan(m);
                let mut kernel = vec![Complex64::new(0.0, 0.0); m];
                kernel[0] = chirp[0].conj();
                for k in 1..n {
                    kernel[k] = chirp[k].conj();
                    kernel[m - k] = chirp[k].conj();
                }
                let mut scratch = 0;
                inner.forward(&mut kernel, &mut scratch);
                let inv = 1.0 / m as f64;
                for v in &mut kernel {
                    *v *= inv;
                }
                Algorithm::Bluestein {
                    chirp,
                    kernel,
                    inner,
                }
            }
        };
        let mut plan = Self {
            len: n,
            algorithm,
            flops: 0,
        };
        let mut probe = vec![Complex64::new(0.0, 0.0); n];
        let mut flops = 0;
        plan.forward(&mut probe, &mut flops);
        plan.flops = flops;
        plan
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Real FLOPs of one forward (or unnormalized inverse) transform.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    /// In-place forward transform, adding executed FLOPs to `flops`.
    pub fn forward(&self, buf: &mut [Complex64], flops: &mut u64) {
        debug_assert_eq!(buf.len(), self.len);
        match &self.algorithm {
            Algorithm::Identity => {}
            Algorithm::Radix2 { twiddles, bitrev } => radix2(buf, twiddles, bitrev, flops),
            Algorithm::MixedRadix {
                radix,
                inner,
                twiddles,
            } => mixed_radix(buf, *radix, inner, twiddles, flops),
            Algorithm::Direct { roots } => direct(buf, roots, flops),
            Algorithm::Bluestein {
                chirp,
                kernel,
                inner,
            } => bluestein(buf, chirp, kernel, inner, flops),
        }
    }

    /// In-place inverse transform without the `1/N` factor.
    pub fn inverse_unnormalized(&self, buf: &mut [Complex64], flops: &mut u64) {
        for v in buf.iter_mut() {
            *v = v.conj();
        }
        self.forward(buf, flops);
        for v in buf.iter_mut() {
            *v = v.conj();
        }
    }
}

fn radix2(buf: &mut [Complex64], twiddles: &[Complex64], bitrev: &[usize], flops: &mut u64) {
    let n = buf.len();
    for i in 0..n {
        let j = bitrev[i];
        if i < j {
            buf.swap(i, j);
        }
    }
    let mut size = 2;
    while size <= n {
        let half = size / 2;
        let step = n / size;
        for start in (0..n).step_by(size) {
            for k in 0..half {
                let t = buf[start + k + half] * twiddles[k * step];
                let u = buf[start + k];
                buf[start + k] = u + t;
                buf[start + k + half] = u - t;
            }
        }
        *flops += (n / 2) as u64 * (CMUL + 2 * CADD);
        size *= 2;
    }
}

fn mixed_radix(
    buf: &mut [Complex64],
    p: usize,
    inner: &FftPlan,
    twiddles: &[Complex64],
    flops: &mut u64,
) {
    let n = buf.len();
    let m = n / p;
    // decimate in time: sub-sequence j holds x[p * t + j]
    let mut subs: Vec<Vec<Complex64>> = (0..p)
        .map(|j| (0..m).map(|t| buf[p * t + j]).collect())
        .collect();
    for sub in &mut subs {
        inner.forward(sub, flops);
    }
    let mut terms = vec![Complex64::new(0.0, 0.0); p];
    for k1 in 0..m {
        terms[0] = subs[0][k1];
        for j in 1..p {
            terms[j] = subs[j][k1] * twiddles[j * k1];
        }
        *flops += (p - 1) as u64 * CMUL;
        for k2 in 0..p {
            let mut acc = terms[0];
            for (j, term) in terms.iter().enumerate().skip(1) {
                acc += term * twiddles[(j * k2 * m) % n];
            }
            buf[k1 + m * k2] = acc;
        }
        *flops += (p * (p - 1)) as u64 * (CMUL + CADD);
    }
}

fn direct(buf: &mut [Complex64], roots: &[Complex64], flops: &mut u64) {
    let n = buf.len();
    let input = buf.to_vec();
    for (k, out) in buf.iter_mut().enumerate() {
        let mut acc = Complex64::new(0.0, 0.0);
        for (t, x) in input.iter().enumerate() {
            acc += x * roots[(k * t) % n];
        }
        *out = acc;
    }
    *flops += (n * n) as u64 * CMUL + (n * (n - 1)) as u64 * CADD;
}

fn bluestein(
    buf: &mut [Complex64],
    chirp: &[Complex64],
    kernel: &[Complex64],
    inner: &FftPlan,
    flops: &mut u64,
) {
    let n = buf.len();
    let m = kernel.len();
    let mut work = vec![Complex64::new(0.0, 0.0); m];
    for k in 0..n {
        work[k] = buf[k] * chirp[k];
    }
    inner.forward(&mut work, flops);
    for (w, k) in work.iter_mut().zip(kernel) {
        *w *= k;
    }
    inner.inverse_unnormalized(&mut work, flops);
    for k in 0..n {
        buf[k] = work[k] * chirp[k];
    }
    *flops += (2 * n + m) as u64 * CMUL;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn direct_dft(f: &[f64]) -> Vec<Complex64> {
        let n = f.len();
        (0..n)
            .map(|k| {
                f.iter()
                    .enumerate()
                    .map(|(t, &x)| {
                        let ang = -2.0 * PI * ((k * t) as f64) / n as f64;
                        Complex64::new(x * ang.cos(), x * ang.sin())
                    })
                    .sum()
            })
            .collect()
    }

    fn random_fiber(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn delta_and_dc() {
        let s = fft(&[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(s.re(), vec![1.0; 4]);
        assert_eq!(s.im(), vec![0.0; 4]);
        let s = fft(&[2.5; 6]);
        assert!((s.bins()[0].re - 15.0).abs() < 1e-12);
        for b in &s.bins()[1..] {
            assert!(b.norm() < 1e-12);
        }
    }

    #[test]
    fn matches_direct_for_many_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in (1..=40).chain([64, 96, 97, 128, 384]) {
            let f = random_fiber(n, &mut rng);
            let got = fft(&f);
            let want = direct_dft(&f);
            let err = got
                .bins()
                .iter()
                .zip(&want)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            assert!(err < 1e-9, "n={n} err={err}");
        }
    }

    #[test]
    fn inverse_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for n in [1, 2, 3, 4, 8, 12, 16, 17, 31] {
            let f = random_fiber(n, &mut rng);
            let back = ifft(&fft(&f)).unwrap();
            for (a, b) in f.iter().zip(back.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        let zeros = ComplexSpectrum::new(vec![Complex64::new(0.0, 0.0); 5]);
        assert_eq!(&*ifft(&zeros).unwrap(), &[0.0; 5]);
    }

    #[test]
    fn ifft_rejects_asymmetric() {
        let s = ComplexSpectrum::from_parts(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap();
        assert!(matches!(ifft(&s), Err(Error::Contract(_))));
    }

    #[test]
    fn hadamard_checks() {
        let a = fft(&[1.0, 2.0, 3.0]);
        let ones = ComplexSpectrum::from_parts(&[1.0; 3], &[0.0; 3]).unwrap();
        assert_eq!(hadamard(&a, &ones).unwrap(), a);
        assert!(hadamard(&a, &fft(&[1.0])).is_err());
    }

    #[test]
    fn radix2_flops_match_convention() {
        for n in [4usize, 8, 16, 64] {
            let log = n.trailing_zeros() as u64;
            assert_eq!(plan(n).flops(), 5 * n as u64 * log);
        }
        assert_eq!(real_transform_flops(2), 2);
    }

    #[test]
    fn counter_is_per_call() {
        reset_flop_counter();
        let _ = fft(&[0.0; 8]);
        assert_eq!(flop_counter(), 120);
    }

    #[test]
    fn half_spectrum_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for n in [1, 2, 3, 4, 5, 8, 9] {
            let f = random_fiber(n, &mut rng);
            let mut half = vec![Complex64::new(0.0, 0.0); half_len(n)];
            let mut flops = 0;
            forward_real_half(&f, &mut half, &mut flops);
            let full = fft(&f);
            for (a, b) in half.iter().zip(full.bins()) {
                assert!((a - b).norm() < 1e-12);
            }
            let mut back = vec![0.0; n];
            inverse_real_half_unnormalized(&half, &mut back, &mut flops);
            for (a, b) in f.iter().zip(&back) {
                assert!((a * n as f64 - b).abs() < 1e-10);
            }
        }
    }
}
