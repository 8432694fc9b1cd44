//! Self-checks over the tensor, circulant, spectral and convolution layers,
//! reported one line per property. Used by the `verify` command.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::circulant::{
    circulant_from_first_row, expand, is_block_circulant, project_matrix, project_tensor, CirculantBaseTensor,
    PartitionConfig,
};
use crate::convops::{circ_backward_input, circ_backward_weight, circ_forward, conv_block, conv_naive, ConvGeometry};
use crate::spectral::{fft, ifft, real_transform_flops};
use crate::tensor::{scatter_channels, slice_channels, Matrix, Tensor3, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Random instances per property.
    pub instances: usize,
    /// Largest spatial extent of random convolution inputs.
    pub max_spatial: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 40,
            max_spatial: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyResult {
    pub property: String,
    pub passed: bool,
    pub cases: usize,
    /// Worst observed error against the property's tolerance.
    pub worst: f64,
    pub tolerance: f64,
}

impl PropertyResult {
    pub fn line(&self) -> String {
        format!(
            "{} {} cases={} worst={:.3e} tol={:.0e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.property,
            self.cases,
            self.worst,
            self.tolerance
        )
    }
}

struct Tracker {
    property: &'static str,
    tolerance: f64,
    worst: f64,
    cases: usize,
    failed: bool,
}

impl Tracker {
    fn new(property: &'static str, tolerance: f64) -> Self {
        Self {
            property,
            tolerance,
            worst: 0.0,
            cases: 0,
            failed: false,
        }
    }

    fn observe(&mut self, err: f64) {
        self.cases += 1;
        if err.is_nan() || err > self.tolerance {
            self.failed = true;
        }
        if err.is_nan() || err > self.worst {
            self.worst = err;
        }
    }

    fn fail(&mut self) {
        self.cases += 1;
        self.failed = true;
    }

    fn finish(self) -> PropertyResult {
        PropertyResult {
            property: self.property.into(),
            passed: !self.failed && self.cases > 0,
            cases: self.cases,
            worst: self.worst,
            tolerance: self.tolerance,
        }
    }
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect()
}

fn direct_dft(f: &[f64]) -> Vec<Complex64> {
    let n = f.len();
    (0..n)
        .map(|k| {
            f.iter()
                .enumerate()
                .map(|(j, &v)| v * Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * ((j * k) % n) as f64 / n as f64))
                .sum()
        })
        .collect()
}

struct Instance {
    x: Tensor3,
    base: CirculantBaseTensor,
    geometry: ConvGeometry,
}

fn random_instance(rng: &mut ChaCha8Rng, max_spatial: usize) -> Instance {
    let n = [1, 2, 3, 4, 8][rng.gen_range(0..5)];
    let (r, s) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    let c0 = rng.gen_range((r - 1) * n + 1..=r * n);
    let c2 = rng.gen_range((s - 1) * n + 1..=s * n);
    let k: usize = [1, 3, 5][rng.gen_range(0..3)];
    let pad = rng.gen_range(0..=k / 2);
    let lo = k.saturating_sub(2 * pad).max(1);
    let hi = max_spatial.max(lo);
    let (w, h) = (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
    let cfg = PartitionConfig::new(n, c0, c2).expect("positive sizes");
    Instance {
        x: Tensor3::random((w, h, c0), rng),
        base: CirculantBaseTensor::new(Tensor4::random((k, k, cfg.padded_c0(), cfg.s()), rng), cfg).expect("dims match"),
        geometry: ConvGeometry::padded(pad),
    }
}

/// Runs every property and returns one result per property, in a fixed order.
pub fn run_all(cfg: &VerifyConfig) -> Vec<PropertyResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();

    let mut t = Tracker::new("tensor.set_get_round_trip", 0.0);
    let mut s = Tracker::new("tensor.slice_scatter_round_trip", 0.0);
    for _ in 0..cfg.instances {
        let dims = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..7));
        let src = Tensor3::random(dims, &mut rng);
        let mut dst = Tensor3::zeros(dims.0, dims.1, dims.2);
        for w in 0..dims.0 {
            for h in 0..dims.1 {
                for c in 0..dims.2 {
                    dst.set(w, h, c, src.get(w, h, c));
                }
            }
        }
        t.observe(rel(dst.as_slice(), src.as_slice()));
        let mut rebuilt = Tensor3::zeros(dims.0, dims.1, dims.2);
        let len = rng.gen_range(1..=dims.2);
        let start = rng.gen_range(0..=dims.2 - len);
        let mut ok = true;
        for w in 0..dims.0 {
            for h in 0..dims.1 {
                for (from, to) in [(0, start), (start, start + len), (start + len, dims.2)] {
                    if to > from {
                        let fiber = slice_channels(&src, (w, h), (from, to - from));
                        ok &= fiber.and_then(|f| scatter_channels(&mut rebuilt, (w, h), from, &f)).is_ok();
                    }
                }
            }
        }
        if ok {
            s.observe(rel(rebuilt.as_slice(), src.as_slice()));
        } else {
            s.fail();
        }
    }
    out.push(t.finish());
    out.push(s.finish());

    let mut dft = Tracker::new("spectral.fft_matches_direct_sum", 1e-10);
    let mut inv = Tracker::new("spectral.ifft_inverts_fft", 1e-10);
    let mut parseval = Tracker::new("spectral.parseval", 1e-9);
    let mut conv = Tracker::new("spectral.convolution_theorem", 1e-9);
    for n in 1..=32 {
        let a = normal_vec(&mut rng, n);
        let b = normal_vec(&mut rng, n);
        let fa = fft(&a);
        let want = direct_dft(&a);
        let scale = want.iter().fold(1.0f64, |m, c| m.max(c.norm()));
        dft.observe(fa.bins().iter().zip(&want).fold(0.0f64, |m, (x, y)| m.max((x - y).norm())) / scale);
        match ifft(&fa) {
            Ok(back) => inv.observe(rel(&back, &a)),
            Err(_) => inv.fail(),
        }
        let time: f64 = a.iter().map(|v| v * v).sum();
        let freq: f64 = fa.bins().iter().map(|c| c.norm_sqr()).sum::<f64>() / n as f64;
        parseval.observe((time - freq).abs() / time.max(1e-300));
        let brute: Vec<f64> = (0..n).map(|k| (0..n).map(|j| a[j] * b[(n + k - j) % n]).sum()).collect();
        match crate::spectral::hadamard(&fa, &fft(&b)).and_then(|p| ifft(&p)) {
            Ok(c) => conv.observe(rel(&c, &brute)),
            Err(_) => conv.fail(),
        }
    }
    out.extend([dft.finish(), inv.finish(), parseval.finish(), conv.finish()]);

    let mut real2 = Tracker::new("spectral.two_point_transform_is_real_butterfly", 0.0);
    real2.observe((real_transform_flops(2) as f64 - 2.0).abs());
    let pair = fft(&[3.0, -1.25]);
    real2.observe(pair.im().iter().map(|v| v.abs()).sum::<f64>());
    real2.observe(rel(&pair.re(), &[1.75, 4.25]));
    out.push(real2.finish());

    let mut idem = Tracker::new("circulant.projection_idempotent", 1e-12);
    let mut linear = Tracker::new("circulant.projection_linear", 1e-12);
    let mut optimal = Tracker::new("circulant.two_point_projection_is_least_squares", 1e-12);
    let mut count = Tracker::new("circulant.param_count_divides_by_n", 0.0);
    let mut structure = Tracker::new("circulant.expansion_is_block_circulant", 0.0);
    for _ in 0..cfg.instances {
        let n = [2, 3, 4, 8][rng.gen_range(0..4)];
        let (c0, c2) = (rng.gen_range(1..=3 * n), rng.gen_range(1..=3 * n));
        let k = rng.gen_range(1..=3);
        let pc = PartitionConfig::new(n, c0, c2).expect("positive sizes");
        let w = Tensor4::random((k, k, c0, c2), &mut rng);
        let (once, twice) = match project_tensor(&w, pc)
            .and_then(|p| project_tensor(&expand(&p.base), pc).map(|q| (p.base, q.base)))
        {
            Ok(v) => v,
            Err(_) => {
                idem.fail();
                continue;
            }
        };
        idem.observe(rel(twice.base().as_slice(), once.base().as_slice()));
        structure.observe(if is_block_circulant(&expand(&once), n) { 0.0 } else { 1.0 });

        let a = Matrix::random(n, n, &mut rng);
        let b = Matrix::random(n, n, &mut rng);
        let (alpha, beta) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let mix = Matrix::from_fn(n, n, |i, j| alpha * a.get(i, j) + beta * b.get(i, j));
        match (project_matrix(&mix), project_matrix(&a), project_matrix(&b)) {
            (Ok(m), Ok(pa), Ok(pb)) => {
                let want: Vec<f64> = pa.iter().zip(pb.iter()).map(|(x, y)| alpha * x + beta * y).collect();
                linear.observe(rel(&m, &want));
            }
            _ => linear.fail(),
        }

        let d = (c0.div_ceil(n) * n, c2.div_ceil(n) * n);
        let dense = (k * k * d.0 * d.1) as f64;
        count.observe((dense / once.param_count() as f64 - n as f64).abs());

        let m = Matrix::random(2, 2, &mut rng);
        let (p, q) = ((m.get(0, 0) + m.get(1, 1)) / 2.0, (m.get(0, 1) + m.get(1, 0)) / 2.0);
        let best = (m.get(0, 0) - p).powi(2) + (m.get(1, 1) - p).powi(2) + (m.get(0, 1) - q).powi(2) + (m.get(1, 0) - q).powi(2);
        match project_matrix(&m).and_then(|row| m.sub(&circulant_from_first_row(&row))) {
            Ok(diff) => optimal.observe((diff.frobenius_norm().powi(2) - best).abs() / best.max(1.0)),
            Err(_) => optimal.fail(),
        }
    }
    out.extend([idem.finish(), linear.finish(), optimal.finish(), count.finish(), structure.finish()]);

    let mut oracle = Tracker::new("convops.fast_path_matches_dense_oracle", 1e-9);
    let mut blocks = Tracker::new("convops.block_form_matches_dense_oracle", 1e-9);
    let mut lin = Tracker::new("convops.forward_linear", 1e-10);
    let mut adjoint = Tracker::new("convops.adjoint_consistency", 1e-9);
    let mut fd = Tracker::new("convops.gradients_match_finite_differences", 1e-4);
    for _ in 0..cfg.instances {
        let inst = random_instance(&mut rng, cfg.max_spatial);
        let pc = inst.base.config();
        let dense = expand(&inst.base).with_channels(pc.c0(), pc.c2());
        let y = match circ_forward(&inst.x, &inst.base, inst.geometry) {
            Ok(y) => y,
            Err(_) => {
                oracle.fail();
                continue;
            }
        };
        match conv_naive(&inst.x, &dense, inst.geometry) {
            Ok(want) => oracle.observe(rel(y.as_slice(), want.as_slice())),
            Err(_) => oracle.fail(),
        }
        match conv_block(&inst.x, &expand(&inst.base), pc, inst.geometry) {
            Ok(b) => blocks.observe(rel(b.as_slice(), y.as_slice())),
            Err(_) => blocks.fail(),
        }

        let x2 = Tensor3::random(inst.x.dims(), &mut rng);
        let alpha = rng.gen_range(-2.0..2.0);
        let mixed = Tensor3::from_fn(inst.x.dims(), |w, h, c| inst.x.get(w, h, c) + alpha * x2.get(w, h, c));
        match (circ_forward(&mixed, &inst.base, inst.geometry), circ_forward(&x2, &inst.base, inst.geometry)) {
            (Ok(ym), Ok(y2)) => {
                let want: Vec<f64> = y.as_slice().iter().zip(y2.as_slice()).map(|(a, b)| a + alpha * b).collect();
                lin.observe(rel(ym.as_slice(), &want));
            }
            _ => lin.fail(),
        }

        let g = Tensor3::random(y.dims(), &mut rng);
        let (w0, h0, _) = inst.x.dims();
        match circ_backward_input(&g, &inst.base, (w0, h0), inst.geometry) {
            Ok(gx) => {
                let lhs = y.dot(&g).unwrap_or(f64::NAN);
                let rhs = inst.x.dot(&gx).unwrap_or(f64::NAN);
                adjoint.observe((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0));
            }
            Err(_) => adjoint.fail(),
        }

        // L = 0.5 * ||Y - T||^2
        let target = Tensor3::random(y.dims(), &mut rng);
        let loss = |x: &Tensor3, base: &CirculantBaseTensor| -> f64 {
            let y = circ_forward(x, base, inst.geometry).expect("checked above");
            0.5 * y.as_slice().iter().zip(target.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        };
        let resid = Tensor3::from_fn(y.dims(), |w, h, c| y.get(w, h, c) - target.get(w, h, c));
        let grads = circ_backward_weight(&inst.x, &resid, inst.base.kernel_size(), pc, inst.geometry)
            .and_then(|gw| circ_backward_input(&resid, &inst.base, (w0, h0), inst.geometry).map(|gx| (gw, gx)));
        let Ok((gw, gx)) = grads else {
            fd.fail();
            continue;
        };
        let step = 1e-5;
        let check = |an: f64, lp: f64, lm: f64| {
            let num = (lp - lm) / (2.0 * step);
            (num - an).abs() / num.abs().max(an.abs()).max(1e-2)
        };
        for _ in 0..4 {
            let i = rng.gen_range(0..inst.base.base().len());
            let mut plus = inst.base.clone();
            plus.base_mut().as_mut_slice()[i] += step;
            let mut minus = inst.base.clone();
            minus.base_mut().as_mut_slice()[i] -= step;
            fd.observe(check(gw.base().as_slice()[i], loss(&inst.x, &plus), loss(&inst.x, &minus)));

            let j = rng.gen_range(0..inst.x.len());
            let mut xp = inst.x.clone();
            xp.as_mut_slice()[j] += step;
            let mut xm = inst.x.clone();
            xm.as_mut_slice()[j] -= step;
            fd.observe(check(gx.as_slice()[j], loss(&xp, &inst.base), loss(&xm, &inst.base)));
        }
    }
    out.extend([oracle.finish(), blocks.finish(), lin.finish(), adjoint.finish(), fd.finish()]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_properties_pass_and_are_deterministic() {
        let cfg = VerifyConfig {
            seed: 7,
            instances: 12,
            max_spatial: 6,
        };
        let a = run_all(&cfg);
        for r in &a {
            assert!(r.passed, "{}", r.line());
        }
        let b = run_all(&cfg);
        assert_eq!(a, b);
    }
}
