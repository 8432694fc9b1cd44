//! Block-circulant kernel structure.
//!
//! A kernel with `C0` input and `C2` output channels is split into `R x S`
//! blocks of size `N x N` along the channel pair, where `R = ceil(C0 / N)` and
//! `S = ceil(C2 / N)`; channels are zero-padded up to `R * N` and `S * N`.
//! Every block is circulant and stored by its first row, so the whole kernel is
//! held in a base tensor of shape `(W1, H1, R * N, S)`:
//!
//! ```text
//! dense(w1, h1, r*N + a, s*N + b) = base(w1, h1, r*N + (b - a) mod N, s)
//! ```

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{frobenius_inner, Fiber, Matrix, Tensor4};

/// Partition of a layer's channel pair into `N x N` circulant blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionConfig {
    n: usize,
    c0: usize,
    c2: usize,
}

impl PartitionConfig {
    pub fn new(n: usize, c0: usize, c2: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("partition size must be positive".into()));
        }
        if c0 == 0 || c2 == 0 {
            return Err(Error::Config(format!(
                "channel counts must be positive, got C0={c0} C2={c2}"
            )));
        }
        Ok(Self { n, c0, c2 })
    }

    /// Partition size `N`.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Logical input channels.
    pub fn c0(&self) -> usize {
        self.c0
    }

    /// Logical output channels.
    pub fn c2(&self) -> usize {
        self.c2
    }

    /// Input channel blocks.
    pub fn r(&self) -> usize {
        self.c0.div_ceil(self.n)
    }

    /// Output channel blocks.
    pub fn s(&self) -> usize {
        self.c2.div_ceil(self.n)
    }

    pub fn padded_c0(&self) -> usize {
        self.r() * self.n
    }

    pub fn padded_c2(&self) -> usize {
        self.s() * self.n
    }

    pub fn is_padded(&self) -> bool {
        self.padded_c0() != self.c0 || self.padded_c2() != self.c2
    }

    /// Whether block `(r, s)` contains any padding rows or columns.
    pub fn block_is_padded(&self, r: usize, s: usize) -> bool {
        (r + 1) * self.n > self.c0 || (s + 1) * self.n > self.c2
    }
}

/// Free parameters of a block-circulant kernel, shape `(W1, H1, R * N, S)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CirculantBaseTensor {
    base: Tensor4,
    config: PartitionConfig,
}

impl CirculantBaseTensor {
    pub fn new(base: Tensor4, config: PartitionConfig) -> Result<Self> {
        let (_, _, rn, s) = base.dims();
        if rn != config.padded_c0() || s != config.s() {
            return Err(Error::shape(format!(
                "base tensor {:?} does not match partition (R*N={}, S={})",
                base.dims(),
                config.padded_c0(),
                config.s()
            )));
        }
        Ok(Self { base, config })
    }

    pub fn zeros(w1: usize, h1: usize, config: PartitionConfig) -> Self {
        Self {
            base: Tensor4::zeros((w1, h1, config.padded_c0(), config.s())),
            config,
        }
    }

    /// He initialisation with fan-in taken from the expanded dense layer
    /// (`W1 * H1 * C0`).
    pub fn random_he<R: Rng + ?Sized>(
        w1: usize,
        h1: usize,
        config: PartitionConfig,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (w1 * h1 * config.c0()) as f64).sqrt();
        let mut out = Self::zeros(w1, h1, config);
        for v in out.base.as_mut_slice() {
            *v = std * rng.sample::<f64, _>(StandardNormal);
        }
        out
    }

    pub fn config(&self) -> PartitionConfig {
        self.config
    }

    /// Kernel spatial extent `(W1, H1)`.
    pub fn kernel_size(&self) -> (usize, usize) {
        let (w1, h1, _, _) = self.base.dims();
        (w1, h1)
    }

    pub fn base(&self) -> &Tensor4 {
        &self.base
    }

    pub fn base_mut(&mut self) -> &mut Tensor4 {
        &mut self.base
    }

    pub fn into_base(self) -> Tensor4 {
        self.base
    }

    /// Number of free parameters, `W1 * H1 * R * N * S`.
    pub fn param_count(&self) -> usize {
        self.base.len()
    }

    /// First row of block `(r, s)` at tap `(w1, h1)`.
    pub fn first_row(&self, w1: usize, h1: usize, r: usize, s: usize) -> Vec<f64> {
        let n = self.config.n();
        (0..n).map(|k| self.base.get(w1, h1, r * n + k, s)).collect()
    }

    pub fn set_first_row(&mut self, w1: usize, h1: usize, r: usize, s: usize, row: &[f64]) {
        let n = self.config.n();
        debug_assert_eq!(row.len(), n);
        for (k, &v) in row.iter().enumerate() {
            self.base.set(w1, h1, r * n + k, s, v);
        }
    }
}

/// Dense kernel of dims `(W1, H1, R * N, S * N)` defined by `base`.
pub fn expand(base: &CirculantBaseTensor) -> Tensor4 {
    let cfg = base.config();
    let n = cfg.n();
    let (w1s, h1s) = base.kernel_size();
    let b = base.base();
    Tensor4::from_fn((w1s, h1s, cfg.padded_c0(), cfg.padded_c2()), |w1, h1, c0, c2| {
        let (r, a) = (c0 / n, c0 % n);
        let (s, col) = (c2 / n, c2 % n);
        b.get(w1, h1, r * n + (col + n - a) % n, s)
    })
}

/// Adjoint of [`expand`]: sums a dense-kernel gradient along each circulant
/// diagonal, giving the gradient with respect to the base tensor. `dense`
/// must carry the padded channel counts.
pub fn fold_dense_gradient(dense: &Tensor4, config: PartitionConfig) -> Result<CirculantBaseTensor> {
    let (w1s, h1s, c0, c2) = dense.dims();
    if c0 != config.padded_c0() || c2 != config.padded_c2() {
        return Err(Error::shape(format!(
            "dense gradient {:?} needs padded channels ({}, {})",
            dense.dims(),
            config.padded_c0(),
            config.padded_c2()
        )));
    }
    let n = config.n();
    let mut out = CirculantBaseTensor::zeros(w1s, h1s, config);
    for w1 in 0..w1s {
        for h1 in 0..h1s {
            for c0i in 0..c0 {
                for c2i in 0..c2 {
                    let (r, a) = (c0i / n, c0i % n);
                    let (s, b) = (c2i / n, c2i % n);
                    let p = r * n + (b + n - a) % n;
                    let v = out.base.get(w1, h1, p, s) + dense.get(w1, h1, c0i, c2i);
                    out.base.set(w1, h1, p, s, v);
                }
            }
        }
    }
    Ok(out)
}

/// Bit-exact check that every `N x N` channel block of `dense` is circulant.
pub fn is_block_circulant(dense: &Tensor4, n: usize) -> bool {
    let (w1s, h1s, c0, c2) = dense.dims();
    if n == 0 || c0 % n != 0 || c2 % n != 0 {
        return false;
    }
    for w1 in 0..w1s {
        for h1 in 0..h1s {
            for c0i in 0..c0 {
                for c2i in 0..c2 {
                    let (r, a) = (c0i / n, c0i % n);
                    let (s, b) = (c2i / n, c2i % n);
                    let next = dense.get(w1, h1, r * n + (a + 1) % n, s * n + (b + 1) % n);
                    if dense.get(w1, h1, c0i, c2i).to_bits() != next.to_bits() {
                        return false;
                    }
                }
            }
        }
    }
    true
}

/// `Z1^i`: ones at `(k, (k + i) mod N)`.
pub fn permutation_power(n: usize, i: usize) -> Matrix {
    Matrix::from_fn(n, n, |k, j| if j == (k + i) % n { 1.0 } else { 0.0 })
}

/// Circulant matrix with the given first row.
pub fn circulant_from_first_row(row: &[f64]) -> Matrix {
    let n = row.len();
    Matrix::from_fn(n, n, |a, b| row[(b + n - a) % n])
}

/// First row of the circulant matrix nearest to `m` in Frobenius norm: the
/// mean of each wrapped superdiagonal, `w_i = <m, Z1^i>_F / N`.
pub fn project_matrix(m: &Matrix) -> Result<Fiber> {
    if !m.is_square() {
        return Err(Error::shape(format!(
            "projection needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let n = m.rows();
    // mean taken as offsets from the first entry, so constant diagonals
    // (already-circulant input) come back bit-exact
    let row = (0..n)
        .map(|i| {
            let anchor = m.get(0, i);
            let spread: f64 = (1..n).map(|k| m.get(k, (k + i) % n) - anchor).sum();
            anchor + spread / n as f64
        })
        .collect();
    Ok(Fiber::new(row))
}

/// Same projection written literally as Frobenius products with `Z1^i`.
/// Quadratic in memory; kept for cross-checking.
pub fn project_matrix_via_permutations(m: &Matrix) -> Result<Fiber> {
    if !m.is_square() {
        return Err(Error::shape("projection needs a square matrix"));
    }
    let n = m.rows();
    (0..n)
        .map(|i| Ok(frobenius_inner(m, &permutation_power(n, i))? / n as f64))
        .collect::<Result<Vec<_>>>()
        .map(Fiber::new)
}

/// Result of converting a dense kernel to block-circulant form.
#[derive(Debug, Clone)]
pub struct Projection {
    pub base: CirculantBaseTensor,
    /// `sum ||block - circ(block)||_F^2` over every block, padding included.
    pub squared_error: f64,
    /// Squared Frobenius norm of the (padded) dense input, for relative error.
    pub squared_norm: f64,
    /// Blocks that straddle the zero-padding boundary. Their diagonal means
    /// average over all `N` entries, padding zeros included.
    pub partially_padded_blocks: usize,
}

impl Projection {
    pub fn relative_error(&self) -> f64 {
        if self.squared_norm == 0.0 {
            0.0
        } else {
            (self.squared_error / self.squared_norm).sqrt()
        }
    }
}

/// Projects every `(w1, h1, r, s)` block of `w` onto the circulant family.
/// `w` may carry either the logical or the padded channel counts.
pub fn project_tensor(w: &Tensor4, config: PartitionConfig) -> Result<Projection> {
    let (w1s, h1s, c0, c2) = w.dims();
    let ok0 = c0 == config.c0() || c0 == config.padded_c0();
    let ok2 = c2 == config.c2() || c2 == config.padded_c2();
    if !ok0 || !ok2 {
        return Err(Error::shape(format!(
            "kernel {:?} incompatible with partition N={} C0={} C2={}",
            w.dims(),
            config.n(),
            config.c0(),
            config.c2()
        )));
    }
    let n = config.n();
    let mut base = CirculantBaseTensor::zeros(w1s, h1s, config);
    let mut squared_error = 0.0;
    let mut squared_norm = 0.0;
    for w1 in 0..w1s {
        for h1 in 0..h1s {
            for r in 0..config.r() {
                for s in 0..config.s() {
                    let block = w.block(w1, h1, r * n, s * n, n);
                    let row = project_matrix(&block)?;
                    let approx = circulant_from_first_row(&row);
                    let diff = block.sub(&approx)?.frobenius_norm();
                    squared_error += diff * diff;
                    squared_norm += block.frobenius_norm().powi(2);
                    base.set_first_row(w1, h1, r, s, &row);
                }
            }
        }
    }
    let partially_padded_blocks = (0..config.r())
        .flat_map(|r| (0..config.s()).map(move |s| (r, s)))
        .filter(|&(r, s)| config.block_is_padded(r, s))
        .count()
        * w1s
        * h1s;
    Ok(Projection {
        base,
        squared_error,
        squared_norm,
        partially_padded_blocks,
    })
}

/// Circular reversal: `out[k] = f[(-k) mod N]`.
pub fn reverse_fiber(f: &[f64]) -> Fiber {
    let n = f.len();
    Fiber::new((0..n).map(|k| f[(n - k) % n]).collect())
}

/// Per-layer (or per-block) partition sizes, written `a-b-c-d-e`.
/// A ratio of 1 leaves the layer uncompressed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressionScheme {
    ratios: Vec<usize>,
}

impl CompressionScheme {
    pub fn new(ratios: Vec<usize>) -> Result<Self> {
        if ratios.is_empty() {
            return Err(Error::Config("compression scheme is empty".into()));
        }
        if ratios.contains(&0) {
            return Err(Error::Config("compression ratios must be positive".into()));
        }
        Ok(Self { ratios })
    }

    pub fn uniform(len: usize, ratio: usize) -> Result<Self> {
        Self::new(vec![ratio; len])
    }

    pub fn ratios(&self) -> &[usize] {
        &self.ratios
    }

    pub fn len(&self) -> usize {
        self.ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratios.is_empty()
    }
}

impl FromStr for CompressionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let ratios = s
            .trim()
            .split('-')
            .map(|part| {
                part.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::parse("scheme", format!("`{part}` is not a positive integer")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(ratios)
    }
}

impl fmt::Display for CompressionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.ratios.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join("-"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn partition_counts_and_padding() {
        let cfg = PartitionConfig::new(4, 6, 9).unwrap();
        assert_eq!((cfg.r(), cfg.s()), (2, 3));
        assert_eq!((cfg.padded_c0(), cfg.padded_c2()), (8, 12));
        assert!(cfg.is_padded());
        assert!(!cfg.block_is_padded(0, 0));
        assert!(cfg.block_is_padded(1, 0));
        assert!(cfg.block_is_padded(0, 2));
        assert!(PartitionConfig::new(0, 4, 4).is_err());
    }

    #[test]
    fn expand_n1_is_identity() {
        let cfg = PartitionConfig::new(1, 3, 5).unwrap();
        let raw = Tensor4::random((2, 2, 3, 5), &mut rng(1));
        let base = CirculantBaseTensor::new(raw.clone(), cfg).unwrap();
        assert_eq!(expand(&base), raw);
    }

    #[test]
    fn expand_two_by_two() {
        let cfg = PartitionConfig::new(2, 2, 2).unwrap();
        let base = CirculantBaseTensor::new(Tensor4::from_vec((1, 1, 2, 1), vec![5.0, 7.0]).unwrap(), cfg)
            .unwrap();
        let d = expand(&base);
        assert_eq!(d.as_slice(), &[5.0, 7.0, 7.0, 5.0]);
    }

    #[test]
    fn expand_blocks_are_circulant() {
        let cfg = PartitionConfig::new(4, 8, 12).unwrap();
        let base = CirculantBaseTensor::random_he(3, 2, cfg, &mut rng(2));
        let d = expand(&base);
        for w1 in 0..3 {
            for h1 in 0..2 {
                for r in 0..2 {
                    for s in 0..3 {
                        for a in 0..4 {
                            for b in 0..4 {
                                let here = d.get(w1, h1, r * 4 + a, s * 4 + b);
                                let shifted = d.get(w1, h1, r * 4 + (a + 1) % 4, s * 4 + (b + 1) % 4);
                                assert_eq!(here, shifted);
                            }
                        }
                    }
                }
            }
        }
        assert!(is_block_circulant(&d, 4));
        assert_eq!(base.param_count(), 3 * 2 * 2 * 4 * 3);
    }

    #[test]
    fn permutation_powers() {
        assert_eq!(permutation_power(3, 0), Matrix::identity(3));
        let z = permutation_power(3, 1);
        for (i, j) in [(0, 1), (1, 2), (2, 0)] {
            assert_eq!(z.get(i, j), 1.0);
        }
        assert_eq!(z.as_slice().iter().sum::<f64>(), 3.0);
        let z5 = permutation_power(5, 1);
        let cubed = z5.matmul(&z5).unwrap().matmul(&z5).unwrap();
        assert_eq!(permutation_power(5, 3), cubed);
    }

    #[test]
    fn projection_examples() {
        let c = circulant_from_first_row(&[3.0, 1.0, 2.0]);
        assert_eq!(&*project_matrix(&c).unwrap(), &[3.0, 1.0, 2.0]);
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(&*project_matrix(&m).unwrap(), &[0.5, 0.0]);
        assert!(project_matrix(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn projection_matches_permutation_form() {
        let m = Matrix::random(6, 6, &mut rng(4));
        let a = project_matrix(&m).unwrap();
        let b = project_matrix_via_permutations(&m).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn project_tensor_fixed_point_and_n1() {
        let cfg = PartitionConfig::new(3, 6, 3).unwrap();
        let base = CirculantBaseTensor::random_he(2, 2, cfg, &mut rng(6));
        let dense = expand(&base);
        let p = project_tensor(&dense, cfg).unwrap();
        assert_eq!(expand(&p.base), dense);
        assert!(p.squared_error < 1e-24);

        let cfg1 = PartitionConfig::new(1, 3, 4).unwrap();
        let w = Tensor4::random((3, 3, 3, 4), &mut rng(7));
        let p1 = project_tensor(&w, cfg1).unwrap();
        assert_eq!(p1.base.base(), &w);
        assert_eq!(p1.squared_error, 0.0);
    }

    #[test]
    fn project_tensor_flags_padding() {
        let cfg = PartitionConfig::new(4, 6, 4).unwrap();
        let w = Tensor4::random((1, 1, 6, 4), &mut rng(8));
        let p = project_tensor(&w, cfg).unwrap();
        assert_eq!(p.partially_padded_blocks, 1);
        assert!(project_tensor(&Tensor4::zeros((1, 1, 5, 4)), cfg).is_err());
    }

    #[test]
    fn reverse_examples() {
        assert_eq!(&*reverse_fiber(&[2.0]), &[2.0]);
        assert_eq!(&*reverse_fiber(&[1.0, 2.0, 3.0, 4.0]), &[1.0, 4.0, 3.0, 2.0]);
    }

    #[test]
    fn scheme_parse_and_display() {
        let s: CompressionScheme = "1-2-2-4-2".parse().unwrap();
        assert_eq!(s.ratios(), &[1, 2, 2, 4, 2]);
        assert_eq!(s.to_string(), "1-2-2-4-2");
        assert!("1-0-2".parse::<CompressionScheme>().is_err());
        assert!("1-x".parse::<CompressionScheme>().is_err());
    }
}
