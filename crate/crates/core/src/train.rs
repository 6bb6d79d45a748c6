//! Optimization: Adam, reconstruction losses, and the generic fitting loop.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypernet::{end_to_end_forward, HyperNet};
use crate::nn::{Bound, ParamId, ParamStore};
use crate::prng::Prng;
use crate::repr::{AnrModel, MlpInrModel};
use crate::sampling::VariationalSampler;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("Adam eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let zeros = || store.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Ok(Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update of every parameter. A non-finite gradient
    /// aborts before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} tensors, got {} gradients for {} parameters",
                self.m.len(),
                grads.len(),
                store.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if !g.is_finite() {
                return Err(Error::NanGradient(store.name(ParamId(i)).to_string()));
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (i, p) in store.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                *w -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Mean squared error over every element.
pub fn mse(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    if tape.shape(pred) != target.shape() {
        return Err(Error::Shape {
            op: "mse",
            left: tape.shape(pred).to_vec(),
            right: target.shape().to_vec(),
        });
    }
    let t = tape.constant(target.clone());
    let d = tape.sub(pred, t)?;
    let sq = tape.square(d)?;
    tape.mean_all(sq)
}

pub fn mse_value(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape {
            op: "mse",
            left: pred.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    let n = pred.numel().max(1) as f64;
    Ok(pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// Peak signal-to-noise ratio for signals in `[0, 1]`.
pub fn psnr(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Per-instance PSNR averaged over instances.
pub fn mean_psnr(preds: &[Tensor], targets: &[Tensor]) -> Result<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::invalid("mean_psnr needs matching, non-empty instance lists"));
    }
    let mut total = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        total += psnr(mse_value(p, t)?);
    }
    Ok(total / preds.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Loss of each step, evaluated before that step's update.
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    /// Loss after the last update, on the unperturbed grid.
    pub final_loss: f64,
    pub final_psnr: f64,
    pub wall_time_s: f64,
    pub seed: u64,
    #[serde(default)]
    pub config_hash: Option<String>,
}

impl FitReport {
    /// `step,loss,psnr` rows with round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,psnr\n");
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{},{:e},{:e}\n", i, l, psnr(*l)));
        }
        out
    }
}

/// Runs `steps` optimizer steps with every parameter in `store` bound as a
/// leaf. `loss_fn` builds the scalar loss on a fresh tape; it receives
/// `Some(step)` while training and `None` for the final evaluation.
pub fn fit<F>(store: &mut ParamStore, adam: &mut Adam, steps: usize, seed: u64, mut loss_fn: F) -> Result<FitReport>
where
    F: FnMut(&mut Tape, &Bound, Option<usize>) -> Result<Var>,
{
    let started = Instant::now();
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let loss = loss_fn(&mut tape, &bound, Some(step))?;
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        tape.backward(loss)?;
        let grads = bound.grads(&tape);
        adam.step(store, &grads)?;
        losses.push(value);
    }
    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let loss = loss_fn(&mut tape, &bound, None)?;
    let final_loss = tape.value(loss).item()?;
    if !final_loss.is_finite() {
        return Err(Error::Diverged { step: steps, loss: final_loss });
    }
    Ok(FitReport {
        initial_loss: losses.first().copied().unwrap_or(final_loss),
        losses,
        final_loss,
        final_psnr: psnr(final_loss),
        wall_time_s: started.elapsed().as_secs_f64(),
        seed,
        config_hash: None,
    })
}

/// A coordinate network fitted to one signal.
#[derive(Clone, Debug)]
pub enum InstanceModel {
    /// Attention-based representation with its own trainable tokens.
    Anr { model: AnrModel, tokens: ParamId },
    Mlp(MlpInrModel),
}

impl InstanceModel {
    pub fn kind(&self) -> &'static str {
        match self {
            InstanceModel::Anr { .. } => "anr",
            InstanceModel::Mlp(_) => "mlp-inr",
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, coords: &Tensor) -> Result<Var> {
        match self {
            InstanceModel::Anr { model, tokens } => model.forward(tape, p, p[*tokens], coords),
            InstanceModel::Mlp(m) => m.forward(tape, p, coords),
        }
    }

    /// Forward pass without gradient bookkeeping.
    pub fn eval(&self, store: &ParamStore, coords: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let y = self.forward(&mut tape, &p, coords)?;
        Ok(tape.value(y).clone())
    }

    /// Instance-specific parameter count.
    pub fn repr_param_count(&self) -> usize {
        match self {
            InstanceModel::Anr { model, .. } => model.repr_param_count(),
            InstanceModel::Mlp(m) => m.repr_param_count(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSetup {
    pub steps: usize,
    pub adam: AdamConfig,
    pub sampler: VariationalSampler,
    pub seed: u64,
}

/// Fits every parameter of `store` so that `model(grid) ≈ target`. In
/// variational mode the coordinates are redrawn around `grid` every step
/// while the targets stay those of the grid points.
pub fn fit_instance(
    store: &mut ParamStore,
    model: &InstanceModel,
    grid: &Tensor,
    target: &Tensor,
    setup: &FitSetup,
) -> Result<FitReport> {
    setup.sampler.validate()?;
    let (q, _) = grid.dims2("fit_instance")?;
    if target.rank() != 2 || target.shape()[0] != q {
        return Err(Error::Shape {
            op: "fit_instance",
            left: grid.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    let mut adam = Adam::new(setup.adam, store)?;
    let mut rng = Prng::stream(setup.seed, SAMPLER_STREAM);
    fit(store, &mut adam, setup.steps, setup.seed, |tape, p, step| {
        let coords = match step {
            Some(_) => setup.sampler.sample(grid, &mut rng),
            None => grid.clone(),
        };
        let y = model.forward(tape, p, &coords)?;
        mse(tape, y, target)
    })
}

/// PRNG stream reserved for coordinate perturbation.
pub const SAMPLER_STREAM: u64 = 1;
/// PRNG stream reserved for minibatch order.
pub const BATCH_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperTrainSetup {
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

/// Mean over `images` of the reconstruction MSE of hypernetwork + ANR.
pub fn hypernet_batch_loss(
    tape: &mut Tape,
    p: &Bound,
    hyper: &HyperNet,
    anr: &AnrModel,
    images: &[&Tensor],
    coords: &Tensor,
) -> Result<Var> {
    let mut losses = Vec::with_capacity(images.len());
    for img in images {
        let y = end_to_end_forward(tape, p, hyper, anr, img, coords)?;
        let l = mse(tape, y, img)?;
        losses.push(tape.reshape(l, &[1, 1])?);
    }
    let all = tape.concat_rows(&losses)?;
    tape.mean_all(all)
}

/// Joint end-to-end training of the hypernetwork and the shared
/// representation parameters. Each step draws `batch` distinct images; the
/// final loss is measured over the whole dataset.
pub fn train_hypernet(
    store: &mut ParamStore,
    hyper: &HyperNet,
    anr: &AnrModel,
    dataset: &[Tensor],
    coords: &Tensor,
    setup: &HyperTrainSetup,
) -> Result<FitReport> {
    if dataset.is_empty() || setup.batch == 0 || setup.batch > dataset.len() {
        return Err(Error::invalid(format!(
            "batch {} must be in 1..={}",
            setup.batch,
            dataset.len()
        )));
    }
    let mut adam = Adam::new(setup.adam, store)?;
    let mut rng = Prng::stream(setup.seed, BATCH_STREAM);
    fit(store, &mut adam, setup.steps, setup.seed, |tape, p, step| {
        let picked: Vec<&Tensor> = match step {
            Some(_) => rng.sample_distinct(dataset.len(), setup.batch).into_iter().map(|i| &dataset[i]).collect(),
            None => dataset.iter().collect(),
        };
        hypernet_batch_loss(tape, p, hyper, anr, &picked, coords)
    })
}

/// Reconstructions of `images` through hypernetwork + ANR.
pub fn hypernet_reconstruct(
    store: &ParamStore,
    hyper: &HyperNet,
    anr: &AnrModel,
    images: &[Tensor],
    coords: &Tensor,
) -> Result<Vec<Tensor>> {
    images
        .iter()
        .map(|img| {
            let mut tape = Tape::new();
            let p = store.bind_frozen(&mut tape);
            let y = end_to_end_forward(&mut tape, &p, hyper, anr, img, coords)?;
            Ok(tape.value(y).clone())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        assert!((psnr(1e-3) - 30.0).abs() < 1e-12);
        assert!((psnr(1.0)).abs() < 1e-12);
        assert_eq!(psnr(0.0), f64::INFINITY);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // with bias correction the first update is lr·sign(g)
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![1.0, -2.0, 0.5]));
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &store).unwrap();
        adam.step(&mut store, &[Tensor::vector(vec![3.0, -0.01, 0.0])]).unwrap();
        let w = store.tensors()[0].data();
        assert!((w[0] - 0.9).abs() < 1e-9);
        assert!((w[1] + 1.9).abs() < 1e-6);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::scalar(0.0));
        store.add("layer.weight", Tensor::scalar(0.0));
        let mut adam = Adam::new(AdamConfig::default(), &store).unwrap();
        let err = adam
            .step(&mut store, &[Tensor::scalar(1.0), Tensor::scalar(f64::NAN)])
            .unwrap_err();
        assert!(matches!(err, Error::NanGradient(ref n) if n == "layer.weight"));
        assert_eq!(store.tensors()[0].data(), &[0.0]);
    }

    #[test]
    fn fit_quadratic() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![3.0, -4.0]));
        let mut adam = Adam::new(AdamConfig::with_lr(0.05), &store).unwrap();
        let target = Tensor::vector(vec![1.0, 2.0]);
        let r = fit(&mut store, &mut adam, 500, 0, |tape, p, _| mse(tape, p[w], &target)).unwrap();
        assert!(r.final_loss < 1e-6, "{}", r.final_loss);
        assert_eq!(r.losses.len(), 500);
    }

    #[test]
    fn zero_steps_echo_initial_loss() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![0.0, 0.0]));
        let mut adam = Adam::new(AdamConfig::default(), &store).unwrap();
        let target = Tensor::vector(vec![0.1, 0.1]);
        let r = fit(&mut store, &mut adam, 0, 0, |tape, p, _| mse(tape, p[w], &target)).unwrap();
        assert!(r.losses.is_empty());
        assert!((r.initial_loss - 0.01).abs() < 1e-15);
        assert_eq!(r.initial_loss, r.final_loss);
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_decays_moments() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![1.0, 2.0]));
        let mut adam = Adam::new(AdamConfig::default(), &store).unwrap();
        adam.step(&mut store, &[Tensor::vector(vec![1.0, 1.0])]).unwrap();
        let before = store.tensors()[0].clone();
        let m0 = adam.m[0].clone();
        adam.step(&mut store, &[Tensor::zeros(vec![2])]).unwrap();
        assert!((adam.m[0].data()[0] - 0.9 * m0.data()[0]).abs() < 1e-15);
        // the decayed first moment still moves the weights; with fresh moments it would not
        let mut fresh = ParamStore::new();
        fresh.add("w", before.clone());
        let mut a2 = Adam::new(AdamConfig::default(), &fresh).unwrap();
        a2.step(&mut fresh, &[Tensor::zeros(vec![2])]).unwrap();
        assert_eq!(fresh.tensors()[0], before);
    }

    #[test]
    fn mse_matches_brute_force() {
        let mut rng = Prng::new(6);
        let a = Tensor::from_fn(vec![8, 8], |_| rng.normal());
        let b = Tensor::from_fn(vec![8, 8], |_| rng.normal());
        let mut brute = 0.0;
        for i in 0..8 {
            for j in 0..8 {
                brute += (a.at(i, j) - b.at(i, j)).powi(2);
            }
        }
        brute /= 64.0;
        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let l = mse(&mut tape, av, &b).unwrap();
        assert!((tape.value(l).item().unwrap() - brute).abs() < 1e-12);
        let shifted = b.map(|v| v + 0.1);
        assert!((mse_value(&shifted, &b).unwrap() - 0.01).abs() < 1e-12);
        assert!(mse_value(&a, &Tensor::zeros(vec![4, 16])).is_err());
    }

    #[test]
    fn csv_has_one_row_per_step() {
        let r = FitReport {
            losses: vec![0.5, 0.25],
            ..Default::default()
        };
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("step,loss,psnr\n0,5e-1,"));
    }

    #[test]
    fn bad_config_rejected() {
        assert!(AdamConfig::with_lr(-1e-3).validate().is_err());
        assert!(AdamConfig::with_lr(0.0).validate().is_ok());
        assert!(AdamConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
    }
}
