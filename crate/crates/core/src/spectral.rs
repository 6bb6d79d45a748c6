//! Wave sets, discrete Fourier analysis, aliasing and continuity metrics,
//! and a finite-difference gradient checker.

use std::f64::consts::PI;
use std::fmt;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prng::Prng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveComponent {
    pub omega: Vec<f64>,
    pub amplitude: f64,
    pub phase: f64,
}

/// `Ψ(x) = Σ A·sin(⟨ω, x⟩ + φ)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WaveSet {
    pub components: Vec<WaveComponent>,
}

impl WaveSet {
    pub fn new(components: Vec<WaveComponent>) -> Self {
        Self { components }
    }

    /// Random 1D set on `[-1, 1)`: `count` distinct integer frequencies
    /// `k ∈ 1..=max_k` cycles per domain (angular frequency `πk`), amplitudes
    /// uniform in `[lo, hi)`, phases uniform in `[0, 2π)`.
    pub fn random_1d(count: usize, max_k: usize, amplitude: (f64, f64), rng: &mut Prng) -> Result<Self> {
        if count > max_k {
            return Err(Error::invalid(format!(
                "cannot draw {count} distinct frequencies from 1..={max_k}"
            )));
        }
        let mut ks: Vec<usize> = rng.sample_distinct(max_k, count).into_iter().map(|k| k + 1).collect();
        ks.sort_unstable();
        let components = ks
            .into_iter()
            .map(|k| WaveComponent {
                omega: vec![PI * k as f64],
                amplitude: rng.uniform_in(amplitude.0, amplitude.1),
                phase: rng.uniform_in(0.0, 2.0 * PI),
            })
            .collect();
        Ok(Self { components })
    }

    pub fn concat(&self, other: &WaveSet) -> WaveSet {
        let mut components = self.components.clone();
        components.extend(other.components.iter().cloned());
        WaveSet { components }
    }

    /// Integer cycles-per-domain index of each 1D component on `[-1, 1)`.
    pub fn bins_1d(&self) -> Vec<usize> {
        self.components
            .iter()
            .map(|c| (c.omega[0].abs() / PI).round() as usize)
            .collect()
    }

    pub fn max_bin_1d(&self) -> usize {
        self.bins_1d().into_iter().max().unwrap_or(0)
    }
}

/// Exact evaluation of a wave set at coordinates of shape `[q, C]`.
pub fn synth_wave(set: &WaveSet, coords: &Tensor) -> Result<Vec<f64>> {
    let (q, c) = coords.dims2("synth_wave")?;
    for comp in &set.components {
        if comp.omega.len() != c {
            return Err(Error::Shape {
                op: "synth_wave",
                left: coords.shape().to_vec(),
                right: vec![comp.omega.len()],
            });
        }
    }
    Ok((0..q)
        .map(|i| {
            let x = coords.row(i);
            set.components
                .iter()
                .map(|comp| {
                    let z: f64 = comp.omega.iter().zip(x).map(|(w, v)| w * v).sum();
                    comp.amplitude * (z + comp.phase).sin()
                })
                .sum()
        })
        .collect())
}

/// Forward DFT `X_k = Σ_t x_t·e^{-2πi·kt/n}` (no normalization, so
/// `Σ|x|² = Σ|X|²/n`).
pub fn dft(samples: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = samples.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    if !buf.is_empty() {
        FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    }
    buf
}

/// Inverse of [`dft`], including the `1/n` factor.
pub fn idft(bins: &[Complex64]) -> Vec<Complex64> {
    let mut buf = bins.to_vec();
    if !buf.is_empty() {
        FftPlanner::new().plan_fft_inverse(buf.len()).process(&mut buf);
    }
    let n = buf.len().max(1) as f64;
    buf.iter().map(|z| z / n).collect()
}

/// Folded frequency of bin `k` in an `n`-point transform.
pub fn folded_bin(k: usize, n: usize) -> usize {
    k.min(n - k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub magnitudes: Vec<f64>,
    pub in_band: f64,
    pub out_of_band: f64,
    pub total: f64,
    pub ratio: f64,
    pub cutoff: usize,
}

impl SpectrumReport {
    /// Energy split of `samples` into bins at `targets`, bins whose folded
    /// frequency exceeds `max(targets)`, and the total.
    pub fn from_samples(samples: &[f64], targets: &[usize]) -> Self {
        let n = samples.len();
        let bins = dft(samples);
        let cutoff = targets.iter().copied().max().unwrap_or(0);
        let energy: Vec<f64> = bins.iter().map(|z| z.norm_sqr()).collect();
        let total: f64 = energy.iter().sum();
        let mut in_band = 0.0;
        let mut out_of_band = 0.0;
        for (k, e) in energy.iter().enumerate() {
            let f = folded_bin(k, n);
            if f > cutoff {
                out_of_band += e;
            } else if targets.contains(&f) {
                in_band += e;
            }
        }
        Self {
            magnitudes: bins.iter().map(|z| z.norm()).collect(),
            in_band,
            out_of_band,
            total,
            ratio: if total > 0.0 { out_of_band / total } else { 0.0 },
            cutoff,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,magnitude\n");
        for (k, m) in self.magnitudes.iter().enumerate() {
            out.push_str(&format!("{k},{m:e}\n"));
        }
        out
    }
}

/// Evaluates a 1D model on the `factor`-times denser left-aligned grid over
/// `[-1, 1)` (same phase origin as the training grid) and reports its
/// energy above the highest target frequency.
pub fn aliased_energy<F>(model: F, trained_n: usize, factor: usize, target: &WaveSet) -> Result<SpectrumReport>
where
    F: FnOnce(&Tensor) -> Result<Vec<f64>>,
{
    if factor < 2 {
        return Err(Error::invalid("upsample factor must be >= 2"));
    }
    let grid = crate::sampling::make_grid(&crate::sampling::GridSpec::line(trained_n).upsampled(factor))?;
    let values = model(&grid)?;
    if values.len() != grid.shape()[0] {
        return Err(Error::invalid("model returned the wrong number of samples"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "aliased_energy" });
    }
    Ok(SpectrumReport::from_samples(&values, &target.bins_1d()))
}

/// Energy of `samples` outside the folded bin set `keep`, relative to the total.
pub fn relative_energy_outside(samples: &[f64], keep: &[usize]) -> f64 {
    let n = samples.len();
    let bins = dft(samples);
    let total: f64 = bins.iter().map(|z| z.norm_sqr()).sum();
    if total == 0.0 {
        return 0.0;
    }
    let outside: f64 = bins
        .iter()
        .enumerate()
        .filter(|(k, _)| !keep.contains(&folded_bin(*k, n)))
        .map(|(_, z)| z.norm_sqr())
        .sum();
    outside / total
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Continuity {
    pub max_jump: f64,
    pub total_variation: f64,
}

/// Largest adjacent jump and total variation of an ordered sample sequence.
pub fn continuity(values: &[f64]) -> Continuity {
    let mut max_jump: f64 = 0.0;
    let mut total_variation = 0.0;
    for w in values.windows(2) {
        let d = (w[1] - w[0]).abs();
        max_jump = max_jump.max(d);
        total_variation += d;
    }
    Continuity {
        max_jump,
        total_variation,
    }
}

/// Continuity of a 1D model on the `factor`-times denser version of `grid`.
pub fn continuity_metric<F>(model: F, grid: &crate::sampling::GridSpec, factor: usize) -> Result<Continuity>
where
    F: FnOnce(&Tensor) -> Result<Vec<f64>>,
{
    if grid.dim() != 1 {
        return Err(Error::invalid("continuity metric expects a 1D grid"));
    }
    let dense = crate::sampling::make_grid(&grid.upsampled(factor.max(1)))?;
    let values = model(&dense)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "continuity_metric" });
    }
    Ok(continuity(&values))
}

pub const GRADCHECK_STEP: f64 = 1e-6;
/// Smallest gradient magnitude used as the relative-error denominator.
/// Central differences at `h = 1e-6` resolve gradients only to about
/// `1e-10·|f|`; tensors whose true gradient vanishes (an attention key bias,
/// say) would otherwise divide rounding noise by itself.
pub const GRADCHECK_FLOOR: f64 = 1e-5;
/// Fraction of the largest gradient magnitude of the whole function that
/// also bounds the denominator from below.
pub const GLOBAL_SHARE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failing(&self) -> Vec<&ParamCheck> {
        self.params.iter().filter(|p| !(p.max_rel_err < self.tolerance)).collect()
    }

    pub fn passed(&self) -> bool {
        self.failing().is_empty()
    }

    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            return Ok(self);
        }
        let list: Vec<String> = self
            .failing()
            .iter()
            .map(|p| format!("{} ({:.3e})", p.name, p.max_rel_err))
            .collect();
        Err(Error::invalid(format!(
            "gradient check exceeded {:e}: {}",
            self.tolerance,
            list.join(", ")
        )))
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{:<32} rel {:.3e}  abs {:.3e}  ({} checked, {} at kinks)",
                p.name, p.max_rel_err, p.max_abs_err, p.checked, p.excluded
            )?;
        }
        Ok(())
    }
}

fn eval_loss<F>(f: &mut F, params: &[Tensor]) -> Result<(f64, u64)>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok((tape.value(loss).item()?, tape.kink_signature()))
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences, one parameter tensor at a time.
///
/// The relative error of a tensor is `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, s)` where
/// `s` is the larger of [`GRADCHECK_FLOOR`] and [`GLOBAL_SHARE`] times the
/// largest gradient entry over all tensors.
/// Coordinates whose `±h` evaluations change the tape's kink signature
/// (a relu sign, a clipped attention entry, a max argmax) are skipped.
pub fn gradcheck<F>(names: &[&str], params: &[Tensor], tolerance: f64, mut f: F) -> Result<GradcheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if names.len() != params.len() {
        return Err(Error::invalid("gradcheck needs one name per parameter"));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let base_sig = tape.kink_signature();
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();

    let mut work = params.to_vec();
    let mut raw = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let (mut num_max, mut ana_max, mut diff_max): (f64, f64, f64) = (0.0, 0.0, 0.0);
        let mut checked = 0;
        let mut excluded = 0;
        for k in 0..params[pi].numel() {
            let x0 = params[pi].data()[k];
            work[pi].data_mut()[k] = x0 + GRADCHECK_STEP;
            let (fp, sp) = eval_loss(&mut f, &work)?;
            work[pi].data_mut()[k] = x0 - GRADCHECK_STEP;
            let (fm, sm) = eval_loss(&mut f, &work)?;
            work[pi].data_mut()[k] = x0;
            if sp != base_sig || sm != base_sig {
                excluded += 1;
                continue;
            }
            checked += 1;
            let num = (fp - fm) / (2.0 * GRADCHECK_STEP);
            let ana = analytic[pi].data()[k];
            num_max = num_max.max(num.abs());
            ana_max = ana_max.max(ana.abs());
            diff_max = diff_max.max((num - ana).abs());
        }
        raw.push((num_max.max(ana_max), diff_max, checked, excluded));
    }
    let global = raw.iter().map(|r| r.0).fold(0.0, f64::max);
    let mut report = GradcheckReport {
        params: Vec::with_capacity(params.len()),
        tolerance,
    };
    for (name, (local, diff, checked, excluded)) in names.iter().zip(raw) {
        let scale = local.max(GLOBAL_SHARE * global).max(GRADCHECK_FLOOR);
        report.params.push(ParamCheck {
            name: name.to_string(),
            max_rel_err: diff / scale,
            max_abs_err: diff,
            checked,
            excluded,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft(x: &[f64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(t, &v)| Complex64::from_polar(v, -2.0 * PI * (k * t) as f64 / n as f64))
                    .sum()
            })
            .collect()
    }

    fn line(n: usize) -> Tensor {
        crate::sampling::make_grid(&crate::sampling::GridSpec::line(n)).unwrap()
    }

    #[test]
    fn matches_direct_sum_on_length_37() {
        let mut rng = Prng::new(11);
        let x: Vec<f64> = (0..37).map(|_| rng.normal()).collect();
        let fast = dft(&x);
        let slow = naive_dft(&x);
        let scale: f64 = slow.iter().map(|z| z.norm()).fold(0.0, f64::max);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).norm() / scale < 1e-9);
        }
    }

    #[test]
    fn round_trip() {
        let mut rng = Prng::new(2);
        for n in [1, 8, 37, 64] {
            let x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let back = idft(&dft(&x));
            for (a, b) in x.iter().zip(&back) {
                assert!((a - b.re).abs() < 1e-10 && b.im.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn constant_signal_lives_in_bin_zero() {
        let bins = dft(&[2.5; 16]);
        assert!((bins[0].re - 40.0).abs() < 1e-12);
        assert!(bins[1..].iter().all(|z| z.norm() < 1e-12));
    }

    #[test]
    fn pure_tone_lands_in_its_bin() {
        let set = WaveSet::new(vec![WaveComponent {
            omega: vec![PI * 5.0],
            amplitude: 1.0,
            phase: 0.3,
        }]);
        let x = synth_wave(&set, &line(64)).unwrap();
        assert!(relative_energy_outside(&x, &[5]) < 1e-20);
    }

    #[test]
    fn empty_set_is_zero_and_synthesis_is_linear() {
        let g = line(32);
        assert!(synth_wave(&WaveSet::default(), &g).unwrap().iter().all(|&v| v == 0.0));
        let mut rng = Prng::new(5);
        let a = WaveSet::random_1d(3, 10, (0.1, 1.0), &mut rng).unwrap();
        let b = WaveSet::random_1d(4, 10, (0.1, 1.0), &mut rng).unwrap();
        let sa = synth_wave(&a, &g).unwrap();
        let sb = synth_wave(&b, &g).unwrap();
        let sab = synth_wave(&a.concat(&b), &g).unwrap();
        for i in 0..32 {
            assert!((sa[i] + sb[i] - sab[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn random_sets_have_distinct_bins() {
        let set = WaveSet::random_1d(10, 20, (0.2, 1.0), &mut Prng::new(0)).unwrap();
        let mut bins = set.bins_1d();
        bins.dedup();
        assert_eq!(bins.len(), 10);
        assert!(set.max_bin_1d() <= 20);
        assert!(WaveSet::random_1d(11, 10, (0.2, 1.0), &mut Prng::new(0)).is_err());
    }

    #[test]
    fn exact_model_has_no_alias_energy() {
        let set = WaveSet::random_1d(10, 20, (0.2, 1.0), &mut Prng::new(3)).unwrap();
        let r = aliased_energy(|g| synth_wave(&set, g), 100, 4, &set).unwrap();
        assert!(r.ratio < 1e-9, "{}", r.ratio);
        assert!(((r.in_band - r.total) / r.total).abs() < 1e-9);
    }

    #[test]
    fn white_noise_ratio_matches_bin_share() {
        // flat expected spectrum: ratio ≈ fraction of bins with folded frequency above the cutoff
        let set = WaveSet::random_1d(10, 20, (0.2, 1.0), &mut Prng::new(3)).unwrap();
        let n = 400;
        let cutoff = set.max_bin_1d();
        let above = (0..n).filter(|&k| folded_bin(k, n) > cutoff).count() as f64 / n as f64;
        let mut ratios = Vec::new();
        for s in 0..20 {
            let mut rng = Prng::new(100 + s);
            let r = aliased_energy(|g| Ok((0..g.shape()[0]).map(|_| rng.normal()).collect()), 100, 4, &set).unwrap();
            ratios.push(r.ratio);
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!((mean - above).abs() < 0.01, "{mean} vs {above}");
    }

    #[test]
    fn upsample_factor_one_rejected() {
        assert!(aliased_energy(|g| Ok(vec![0.0; g.shape()[0]]), 10, 1, &WaveSet::default()).is_err());
    }

    #[test]
    fn continuity_examples() {
        let grid = crate::sampling::GridSpec::line(10);
        let c = continuity_metric(|g| Ok(vec![0.7; g.shape()[0]]), &grid, 4).unwrap();
        assert_eq!((c.max_jump, c.total_variation), (0.0, 0.0));
        let slope = 3.0;
        let c = continuity_metric(|g| Ok(g.data().iter().map(|x| slope * x).collect()), &grid, 4).unwrap();
        assert!((c.max_jump - slope * 2.0 / 40.0).abs() < 1e-12);
    }

    #[test]
    fn gradcheck_linear_layer() {
        let mut rng = Prng::new(1);
        let x = Tensor::from_fn(vec![5, 3], |_| rng.normal());
        let w = Tensor::from_fn(vec![4, 3], |_| rng.normal());
        let b = Tensor::from_fn(vec![4], |_| rng.normal());
        let r = gradcheck(&["w", "b"], &[w, b], 1e-6, |t, p| {
            let xv = t.constant(x.clone());
            let y = t.matmul_t(xv, p[0])?;
            let y = t.add_row(y, p[1])?;
            let s = t.sin(y)?;
            t.sum_all(s)
        })
        .unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn gradcheck_detects_a_wrong_backward_rule() {
        // forward is x², backward claims 3x
        let r = gradcheck(&["x"], &[Tensor::vector(vec![0.4, -1.2])], 1e-5, |t, p| {
            let v = t.value(p[0]).map(|a| a * a);
            let y = t.custom(
                &[p[0]],
                v,
                Box::new(|ins, _out, g| vec![Tensor::new(g.shape().to_vec(), ins[0].data().iter().zip(g.data()).map(|(x, g)| 3.0 * x * g).collect()).unwrap()]),
            )?;
            t.sum_all(y)
        })
        .unwrap();
        assert!(!r.passed());
        assert!(r.into_result().unwrap_err().to_string().contains("x ("));
    }

    #[test]
    fn gradcheck_skips_relu_kinks() {
        let r = gradcheck(&["x"], &[Tensor::vector(vec![0.0, 1.0, -2.0])], 1e-8, |t, p| {
            let y = t.relu(p[0])?;
            t.sum_all(y)
        })
        .unwrap();
        assert_eq!(r.params[0].excluded, 1);
        assert!(r.passed());
    }
}
