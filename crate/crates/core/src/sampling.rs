//! Coordinate grids and stochastic coordinate perturbation.
//!
//! Training on a fixed lattice lets a network with high-bandwidth inputs
//! place arbitrary energy between samples. Perturbing every coordinate by a
//! small Gaussian shift each step, `c_var = c + α·V` with `V ~ N(0, σ²)`,
//! constrains the function in the neighbourhood of each sample instead.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prng::Prng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alignment {
    /// Samples at cell centres: `lo + (i + 0.5)·spacing`.
    Center,
    /// Samples at cell starts: `lo + i·spacing`.
    Left,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub extents: Vec<usize>,
    pub bounds: Vec<(f64, f64)>,
    pub alignment: Alignment,
}

impl GridSpec {
    /// Pixel centres of an `h×w` image on `[0,1]²`, columns `(y, x)`.
    pub fn image(h: usize, w: usize) -> Self {
        Self {
            extents: vec![h, w],
            bounds: vec![(0.0, 1.0), (0.0, 1.0)],
            alignment: Alignment::Center,
        }
    }

    /// `n` left-aligned samples on `[-1, 1)` with spacing `2/n`.
    pub fn line(n: usize) -> Self {
        Self {
            extents: vec![n],
            bounds: vec![(-1.0, 1.0)],
            alignment: Alignment::Left,
        }
    }

    /// Same domain and alignment rule with every extent multiplied by `factor`.
    pub fn upsampled(&self, factor: usize) -> Self {
        Self {
            extents: self.extents.iter().map(|e| e * factor).collect(),
            ..self.clone()
        }
    }

    pub fn dim(&self) -> usize {
        self.extents.len()
    }

    pub fn count(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        let (lo, hi) = self.bounds[axis];
        (hi - lo) / self.extents[axis] as f64
    }

    fn axis_values(&self, axis: usize) -> Vec<f64> {
        let (lo, _) = self.bounds[axis];
        let h = self.spacing(axis);
        let off = match self.alignment {
            Alignment::Center => 0.5,
            Alignment::Left => 0.0,
        };
        (0..self.extents[axis]).map(|i| lo + (i as f64 + off) * h).collect()
    }
}

/// Row-major lattice of coordinates, shape `[count, dim]`, last axis fastest.
pub fn make_grid(spec: &GridSpec) -> Result<Tensor> {
    if spec.extents.is_empty() || spec.extents.contains(&0) {
        return Err(Error::invalid("grid extents must be >= 1"));
    }
    if spec.bounds.len() != spec.extents.len() {
        return Err(Error::invalid("grid needs one bound pair per axis"));
    }
    let axes: Vec<Vec<f64>> = (0..spec.dim()).map(|a| spec.axis_values(a)).collect();
    let n = spec.count();
    let c = spec.dim();
    let mut data = Vec::with_capacity(n * c);
    for flat in 0..n {
        let mut rem = flat;
        let mut idx = vec![0; c];
        for a in (0..c).rev() {
            idx[a] = rem % spec.extents[a];
            rem /= spec.extents[a];
        }
        data.extend(idx.iter().enumerate().map(|(a, &i)| axes[a][i]));
    }
    Tensor::new(vec![n, c], data)
}

/// Default sampler constants for an `h×w` training resolution:
/// `(alpha, v_dev, sigma) = (3/(20·max), 1/(2·max), 1)`.
pub fn default_constants(h: usize, w: usize) -> (f64, f64, f64) {
    let m = h.max(w).max(1) as f64;
    (3.0 / (20.0 * m), 1.0 / (2.0 * m), 1.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMode {
    #[default]
    Fixed,
    Variational,
}

/// What the `v_dev` bound applies to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClampTarget {
    /// Clamp the total shift `α·V` to `±v_dev`.
    #[default]
    AlphaV,
    /// Clamp the raw draw `V` to `±v_dev`, then scale by `α`.
    V,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalSampler {
    pub mode: SamplerMode,
    pub alpha: f64,
    pub sigma: f64,
    /// Maximum deviation; `f64::INFINITY` disables clamping.
    pub v_dev: f64,
    #[serde(default)]
    pub clamp: ClampTarget,
}

impl VariationalSampler {
    pub fn fixed() -> Self {
        Self {
            mode: SamplerMode::Fixed,
            alpha: 0.0,
            sigma: 1.0,
            v_dev: f64::INFINITY,
            clamp: ClampTarget::AlphaV,
        }
    }

    /// Variational sampler with the default constants for an `h×w` grid.
    pub fn for_image(h: usize, w: usize) -> Self {
        let (alpha, v_dev, sigma) = default_constants(h, w);
        Self {
            mode: SamplerMode::Variational,
            alpha,
            sigma,
            v_dev,
            clamp: ClampTarget::AlphaV,
        }
    }

    /// Unclamped Gaussian shifts of scale `1/(5n)` for an `n`-point line.
    pub fn for_line(n: usize) -> Self {
        Self {
            mode: SamplerMode::Variational,
            alpha: shift_scale_1d(n),
            sigma: 1.0,
            v_dev: f64::INFINITY,
            clamp: ClampTarget::AlphaV,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v_dev > 0.0) {
            return Err(Error::invalid("v_dev must be positive"));
        }
        if !(self.alpha >= 0.0) || !(self.sigma >= 0.0) {
            return Err(Error::invalid("alpha and sigma must be non-negative"));
        }
        Ok(())
    }

    fn shift(&self, rng: &mut Prng) -> f64 {
        let v = self.sigma * rng.normal();
        match self.clamp {
            ClampTarget::AlphaV => (self.alpha * v).clamp(-self.v_dev, self.v_dev),
            ClampTarget::V => self.alpha * v.clamp(-self.v_dev, self.v_dev),
        }
    }

    /// Perturbed copy of `grid` (fixed mode returns it unchanged and draws
    /// nothing).
    pub fn sample(&self, grid: &Tensor, rng: &mut Prng) -> Tensor {
        match self.mode {
            SamplerMode::Fixed => grid.clone(),
            SamplerMode::Variational => {
                let mut out = grid.clone();
                for c in out.data_mut() {
                    *c += self.shift(rng);
                }
                out
            }
        }
    }
}

/// Shift scale `1/(5n)` of the 1D anti-aliasing setup.
pub fn shift_scale_1d(n: usize) -> f64 {
    1.0 / (5.0 * n.max(1) as f64)
}

/// `n` unclamped shifts `s·N(0,1)` with `s = 1/(5n)`.
pub fn sample_1d_shift(n: usize, rng: &mut Prng) -> Vec<f64> {
    let s = shift_scale_1d(n);
    (0..n).map(|_| s * rng.normal()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_grid() {
        let g = make_grid(&GridSpec::line(4)).unwrap();
        assert_eq!(g.shape(), &[4, 1]);
        assert_eq!(g.data(), &[-1.0, -0.5, 0.0, 0.5]);
    }

    #[test]
    fn image_grid_uses_pixel_centres() {
        let g = make_grid(&GridSpec::image(2, 2)).unwrap();
        assert_eq!(g.data(), &[0.25, 0.25, 0.25, 0.75, 0.75, 0.25, 0.75, 0.75]);
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(make_grid(&GridSpec::line(0)).is_err());
        assert!(make_grid(&GridSpec::image(3, 0)).is_err());
    }

    #[test]
    fn grid_sorted_and_unique() {
        let g = make_grid(&GridSpec::line(37)).unwrap();
        assert!(g.data().windows(2).all(|w| w[0] < w[1]));
        let g = make_grid(&GridSpec::image(5, 7)).unwrap();
        let rows: Vec<(f64, f64)> = (0..35).map(|i| (g.at(i, 0), g.at(i, 1))).collect();
        assert!(rows.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn upsampled_line_contains_the_original() {
        let base = make_grid(&GridSpec::line(10)).unwrap();
        let dense = make_grid(&GridSpec::line(10).upsampled(4)).unwrap();
        for i in 0..10 {
            assert!((dense.data()[4 * i] - base.data()[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn default_constants_examples() {
        assert_eq!(default_constants(128, 128), (3.0 / 2560.0, 1.0 / 256.0, 1.0));
        let (a, v, _) = default_constants(256, 256);
        assert_eq!((a, v), (3.0 / 5120.0, 1.0 / 512.0));
        assert_eq!(default_constants(64, 128).1, 1.0 / 256.0);
    }

    #[test]
    fn zero_alpha_is_identity() {
        let grid = make_grid(&GridSpec::image(4, 4)).unwrap();
        let s = VariationalSampler {
            alpha: 0.0,
            ..VariationalSampler::for_image(4, 4)
        };
        assert_eq!(s.sample(&grid, &mut Prng::new(1)), grid);
    }

    #[test]
    fn fixed_mode_is_idempotent() {
        let grid = make_grid(&GridSpec::image(3, 3)).unwrap();
        let s = VariationalSampler::fixed();
        let mut rng = Prng::new(1);
        let a = s.sample(&grid, &mut rng);
        let b = s.sample(&a, &mut rng);
        assert_eq!(a, grid);
        assert_eq!(b, grid);
    }

    #[test]
    fn raw_clamp_target_saturates() {
        // clamping the raw draw at v_dev ≪ σ pins almost every shift to ±α·v_dev
        let grid = make_grid(&GridSpec::image(8, 8)).unwrap();
        let s = VariationalSampler {
            clamp: ClampTarget::V,
            ..VariationalSampler::for_image(8, 8)
        };
        let out = s.sample(&grid, &mut Prng::new(4));
        let cap = s.alpha * s.v_dev;
        for (a, b) in out.data().iter().zip(grid.data()) {
            assert!((a - b).abs() <= cap + 1e-15);
        }
    }

    #[test]
    fn shift_scale_for_100_points() {
        assert!((shift_scale_1d(100) - 0.002).abs() < 1e-18);
        let mut a = Prng::new(8);
        let mut b = Prng::new(8);
        assert_eq!(sample_1d_shift(100, &mut a), sample_1d_shift(100, &mut b));
    }
}
