//! Named experiments, their configuration, and result bundles.
//!
//! A run writes `<out_dir>/<experiment>-<seed>/` containing `config.json`,
//! `metrics.csv`, `summary.json` and experiment-specific extras
//! (`spectrum.csv`, `*.ppm`). Every CSV number depends only on the config.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::attention::{HyperArch, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::hypernet::{HyperNet, HyperNetConfig};
use crate::image::{load_image, ImageBuffer};
use crate::nn::{Activation, MlpConfig, ParamStore};
use crate::prng::Prng;
use crate::repr::{AnrConfig, AnrModel, MlpInrConfig, MlpInrModel, RTokens};
use crate::sampling::{make_grid, shift_scale_1d, ClampTarget, GridSpec, SamplerMode, VariationalSampler};
use crate::spectral::{aliased_energy, synth_wave, SpectrumReport, WaveSet};
use crate::synthetic::{mean_image, synthetic_dataset, test_image};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::{
    fit_instance, hypernet_reconstruct, mean_psnr, train_hypernet, AdamConfig, FitReport, FitSetup, HyperTrainSetup,
    InstanceModel,
};

pub const BUNDLE_FORMAT: &str = "anrlab-bundle-1";

/// PRNG stream for model initialization.
pub const INIT_STREAM: u64 = 0;
/// PRNG stream for synthetic targets.
pub const TARGET_STREAM: u64 = 3;

/// Seed of the procedural test image; fixed so that seeds vary only the models.
pub const TEST_IMAGE_SEED: u64 = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Fit1d,
    FitImage,
    AblateThreshold,
    HypernetDemo,
    Gradcheck,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Fit1d => "fit1d",
            ExperimentKind::FitImage => "fit-image",
            ExperimentKind::AblateThreshold => "ablate-threshold",
            ExperimentKind::HypernetDemo => "hypernet-demo",
            ExperimentKind::Gradcheck => "gradcheck",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelChoice {
    Anr,
    MlpInr,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub steps: usize,
    pub out_dir: PathBuf,
    pub lr: f64,
    pub sampler: SamplerMode,
    pub clamp_target: ClampTarget,
    /// Perturbation scale; `None` uses the grid default.
    pub alpha: Option<f64>,
    /// Clamp bound; `None` uses the grid default.
    pub v_dev: Option<f64>,
    pub sigma: f64,
    pub m: f64,
    pub pe_sigma: f64,
    pub pe_features: usize,
    pub model: ModelChoice,
    pub tokens: usize,
    pub token_dim: usize,
    pub converter_depth: usize,
    pub converter_width: usize,
    pub mlp_depth: usize,
    /// Hidden width of the MLP baseline; 0 picks the widest network whose
    /// weight count does not exceed the ANR representation size.
    pub mlp_width: usize,
    pub points: usize,
    pub frequencies: usize,
    pub max_frequency: usize,
    pub upsample: usize,
    pub image: Option<PathBuf>,
    pub size: usize,
    pub sr: usize,
    pub seeds: usize,
    pub dataset: Option<PathBuf>,
    pub synthetic: usize,
    pub held_out: usize,
    pub batch: usize,
    pub arch: HyperArch,
    pub hyper_width: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ff_dim: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub patch_size: usize,
}

impl ExperimentConfig {
    pub fn defaults(kind: ExperimentKind) -> Self {
        let base = Self {
            experiment: kind,
            seed: 0,
            steps: 2000,
            out_dir: PathBuf::from("runs"),
            lr: 1e-3,
            sampler: SamplerMode::Fixed,
            clamp_target: ClampTarget::AlphaV,
            alpha: None,
            v_dev: None,
            sigma: 1.0,
            m: DEFAULT_THRESHOLD,
            pe_sigma: 8.0,
            pe_features: 64,
            model: ModelChoice::Both,
            tokens: 64,
            token_dim: 32,
            converter_depth: 3,
            converter_width: 64,
            mlp_depth: 3,
            mlp_width: 0,
            points: 100,
            frequencies: 10,
            max_frequency: 20,
            upsample: 4,
            image: None,
            size: 32,
            sr: 1,
            seeds: 1,
            dataset: None,
            synthetic: 64,
            held_out: 8,
            batch: 8,
            arch: HyperArch::EncoderDecoder,
            hyper_width: 64,
            heads: 4,
            head_dim: 16,
            ff_dim: 128,
            enc_depth: 2,
            dec_depth: 2,
            patch_size: 4,
        };
        match kind {
            ExperimentKind::Fit1d => Self {
                steps: 400,
                sampler: SamplerMode::Variational,
                pe_sigma: 30.0,
                pe_features: 128,
                model: ModelChoice::MlpInr,
                mlp_depth: 5,
                mlp_width: 256,
                ..base
            },
            ExperimentKind::FitImage => base,
            ExperimentKind::AblateThreshold => Self {
                model: ModelChoice::Anr,
                tokens: 256,
                seeds: 5,
                ..base
            },
            ExperimentKind::HypernetDemo => Self {
                model: ModelChoice::Anr,
                size: 16,
                tokens: 16,
                token_dim: 32,
                pe_features: 32,
                pe_sigma: 2.0,
                lr: 5e-4,
                ..base
            },
            ExperimentKind::Gradcheck => Self {
                steps: 0,
                model: ModelChoice::Anr,
                ..base
            },
        }
    }

    /// Defaults for `kind`, overlaid with a JSON config file, overlaid with
    /// explicit overrides (flag values keyed by config field name).
    pub fn resolve(kind: ExperimentKind, file: Option<&Path>, overrides: Map<String, Value>) -> Result<Self> {
        let mut value = serde_json::to_value(Self::defaults(kind))?;
        let obj = value.as_object_mut().expect("config serializes to an object");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            match serde_json::from_str::<Value>(&text)? {
                Value::Object(map) => {
                    if let Some(e) = map.get("experiment") {
                        if e != &json!(kind) {
                            return Err(Error::invalid(format!(
                                "config file is for experiment {e}, not {kind}"
                            )));
                        }
                    }
                    obj.extend(map)
                }
                _ => return Err(Error::invalid("config file must contain a JSON object")),
            }
        }
        obj.extend(overrides);
        let cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        AdamConfig::with_lr(self.lr).validate()?;
        if self.seeds == 0 {
            return Err(Error::invalid("seeds must be >= 1"));
        }
        if self.tokens == 0 && self.model != ModelChoice::MlpInr {
            return Err(Error::invalid("ANR needs at least one token (N >= 1)"));
        }
        if !(0.0..1.0).contains(&self.m) {
            return Err(Error::invalid(format!("threshold m={} outside [0, 1)", self.m)));
        }
        if self.sr == 0 || self.upsample == 0 {
            return Err(Error::invalid("upsampling factors must be >= 1"));
        }
        if self.experiment == ExperimentKind::Fit1d && 2 * self.max_frequency >= self.points {
            return Err(Error::invalid(format!(
                "target frequency {} is not below the Nyquist rate of {} points",
                self.max_frequency, self.points
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn bundle_dir(&self) -> PathBuf {
        self.out_dir.join(format!("{}-{}", self.experiment, self.seed))
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr)
    }

    /// Sampler for a grid whose defaults are `(alpha, v_dev)`.
    fn sampler_with(&self, mode: SamplerMode, alpha: f64, v_dev: f64) -> VariationalSampler {
        match mode {
            SamplerMode::Fixed => VariationalSampler::fixed(),
            SamplerMode::Variational => VariationalSampler {
                mode,
                alpha: self.alpha.unwrap_or(alpha),
                sigma: self.sigma,
                v_dev: self.v_dev.unwrap_or(v_dev),
                clamp: self.clamp_target,
            },
        }
    }

    fn image_sampler(&self, h: usize, w: usize) -> VariationalSampler {
        let d = VariationalSampler::for_image(h, w);
        self.sampler_with(self.sampler, d.alpha, d.v_dev)
    }

    pub fn anr_config(&self, coord_dim: usize, channels: usize) -> AnrConfig {
        AnrConfig {
            coord_dim,
            pe_features: self.pe_features,
            pe_sigma: self.pe_sigma,
            tokens: self.tokens,
            token_dim: self.token_dim,
            m: self.m,
            converter: MlpConfig {
                depth: self.converter_depth,
                width: self.converter_width,
                activation: Activation::Relu,
                output_dim: channels,
            },
        }
    }

    pub fn mlp_config(&self, coord_dim: usize, channels: usize) -> MlpInrConfig {
        let width = if self.mlp_width > 0 {
            self.mlp_width
        } else {
            matched_width(self.tokens * self.token_dim, self.pe_features, self.mlp_depth, channels)
        };
        MlpInrConfig {
            coord_dim,
            pe_features: self.pe_features,
            pe_sigma: self.pe_sigma,
            mlp: MlpConfig {
                depth: self.mlp_depth,
                width,
                activation: Activation::Relu,
                output_dim: channels,
            },
            modulation: None,
        }
    }
}

/// Weight count of an MLP with the given input, hidden and output sizes.
pub fn mlp_param_count(in_dim: usize, depth: usize, width: usize, out_dim: usize) -> usize {
    if depth == 0 {
        return in_dim * out_dim + out_dim;
    }
    in_dim * width + width + (depth - 1) * (width * width + width) + width * out_dim + out_dim
}

/// Widest hidden layer whose MLP has at most `budget` weights (at least 1).
pub fn matched_width(budget: usize, in_dim: usize, depth: usize, out_dim: usize) -> usize {
    let mut w = 1;
    while mlp_param_count(in_dim, depth, w + 1, out_dim) <= budget {
        w += 1;
    }
    w
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub checks: Vec<Check>,
    pub summary: Value,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

struct Bundle {
    dir: PathBuf,
}

impl Bundle {
    fn create(cfg: &ExperimentConfig) -> Result<Self> {
        let dir = cfg.bundle_dir();
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("config.json"), cfg.to_json())?;
        Ok(Self { dir })
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        std::fs::write(self.dir.join(name), contents)?;
        Ok(())
    }

    fn image(&self, name: &str, pixels: &Tensor, h: usize, w: usize) -> Result<()> {
        ImageBuffer::from_pixels(pixels, h, w)?.save(self.dir.join(name))
    }

    fn finish(self, cfg: &ExperimentConfig, checks: Vec<Check>, results: Value) -> Result<RunOutcome> {
        let summary = json!({
            "format_version": BUNDLE_FORMAT,
            "experiment": cfg.experiment,
            "seed": cfg.seed,
            "config_hash": cfg.hash(),
            "passed": checks.iter().all(|c| c.passed),
            "checks": checks,
            "results": results,
        });
        self.write("summary.json", serde_json::to_string_pretty(&summary)?)?;
        Ok(RunOutcome {
            dir: self.dir,
            checks,
            summary,
        })
    }
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    match cfg.experiment {
        ExperimentKind::Fit1d => run_fit1d(cfg),
        ExperimentKind::FitImage => run_fit_image(cfg),
        ExperimentKind::AblateThreshold => run_ablate(cfg),
        ExperimentKind::HypernetDemo => run_hypernet(cfg),
        ExperimentKind::Gradcheck => run_gradcheck(cfg),
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn with_report(mut r: FitReport, cfg: &ExperimentConfig) -> FitReport {
    r.config_hash = Some(cfg.hash());
    r
}

/// Random 1D target of the aliasing experiment.
pub fn line_targets(cfg: &ExperimentConfig) -> Result<WaveSet> {
    let mut rng = Prng::stream(cfg.seed, TARGET_STREAM);
    WaveSet::random_1d(cfg.frequencies, cfg.max_frequency, (0.2 / 3.0, 1.0 / 3.0), &mut rng)
}

/// A 1D coordinate MLP fitted to a wave set.
pub struct LineFit {
    pub store: ParamStore,
    pub model: InstanceModel,
    pub report: FitReport,
}

impl LineFit {
    pub fn eval(&self, coords: &Tensor) -> Result<Vec<f64>> {
        Ok(self.model.eval(&self.store, coords)?.into_data())
    }
}

/// Fits the 1D MLP of `cfg` to `targets` sampled on `cfg.points` points.
/// Initialization depends only on `cfg.seed`, so fixed and variational
/// twins start from identical weights.
pub fn fit_line(cfg: &ExperimentConfig, targets: &WaveSet, mode: SamplerMode) -> Result<LineFit> {
    let n = cfg.points;
    let grid = make_grid(&GridSpec::line(n))?;
    let y = Tensor::new(vec![n, 1], synth_wave(targets, &grid)?)?;
    let mut store = ParamStore::new();
    let mut rng = Prng::stream(cfg.seed, INIT_STREAM);
    let mlp_cfg = MlpInrConfig {
        coord_dim: 1,
        pe_features: cfg.pe_features,
        pe_sigma: cfg.pe_sigma,
        mlp: MlpConfig {
            depth: cfg.mlp_depth,
            width: cfg.mlp_width.max(1),
            activation: Activation::Relu,
            output_dim: 1,
        },
        modulation: None,
    };
    let model = InstanceModel::Mlp(MlpInrModel::new(&mut store, "inr", &mlp_cfg, &mut rng)?);
    let setup = FitSetup {
        steps: cfg.steps,
        adam: cfg.adam(),
        sampler: cfg.sampler_with(mode, shift_scale_1d(n), f64::INFINITY),
        seed: cfg.seed,
    };
    let report = with_report(fit_instance(&mut store, &model, &grid, &y, &setup)?, cfg);
    Ok(LineFit { store, model, report })
}

fn run_fit1d(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let bundle = Bundle::create(cfg)?;
    let targets = line_targets(cfg)?;
    let dense = make_grid(&GridSpec::line(cfg.points).upsampled(cfg.upsample))?;
    let truth = synth_wave(&targets, &dense)?;
    let mut metrics = String::from("run,step,loss,psnr\n");
    let mut spectrum = String::from("run,bin,magnitude\n");
    let mut recon: Vec<Vec<f64>> = Vec::new();
    let mut results = Map::new();
    let mut ratios = Vec::new();
    for (name, mode) in [("fixed", SamplerMode::Fixed), ("variational", SamplerMode::Variational)] {
        let fit = fit_line(cfg, &targets, mode)?;
        for line in fit.report.to_csv().lines().skip(1) {
            metrics.push_str(&format!("{name},{line}\n"));
        }
        let report: SpectrumReport = aliased_energy(|g| fit.eval(g), cfg.points, cfg.upsample.max(2), &targets)?;
        for line in report.to_csv().lines().skip(1) {
            spectrum.push_str(&format!("{name},{line}\n"));
        }
        recon.push(fit.eval(&dense)?);
        ratios.push(report.ratio);
        results.insert(
            name.to_string(),
            json!({
                "final_loss": fit.report.final_loss,
                "final_psnr": fit.report.final_psnr,
                "wall_time_s": fit.report.wall_time_s,
                "out_of_band_ratio": report.ratio,
                "in_band_energy": report.in_band,
                "out_of_band_energy": report.out_of_band,
                "total_energy": report.total,
            }),
        );
    }
    let mut rec = String::from("x,target,fixed,variational\n");
    for i in 0..truth.len() {
        rec.push_str(&format!("{:e},{:e},{:e},{:e}\n", dense.data()[i], truth[i], recon[0][i], recon[1][i]));
    }
    bundle.write("metrics.csv", metrics)?;
    bundle.write("spectrum.csv", spectrum)?;
    bundle.write("reconstruction.csv", rec)?;
    results.insert("target_bins".into(), json!(targets.bins_1d()));
    results.insert("suppression_factor".into(), json!(ratios[0] / ratios[1]));
    let checks = vec![Check::new(
        "variational_ratio_below_fixed",
        ratios[1] < ratios[0],
        format!("out-of-band ratio variational {:.4e} vs fixed {:.4e}", ratios[1], ratios[0]),
    )];
    bundle.finish(cfg, checks, Value::Object(results))
}

/// Image named by the config, or the procedural test image.
pub fn load_target_image(cfg: &ExperimentConfig) -> Result<ImageBuffer> {
    let img = match &cfg.image {
        Some(path) => load_image(path)?,
        None => return Ok(test_image(cfg.size, cfg.size, TEST_IMAGE_SEED)),
    };
    if cfg.size == 0 || (img.width <= cfg.size && img.height <= cfg.size) {
        return Ok(img);
    }
    let (h, w) = (img.height.min(cfg.size), img.width.min(cfg.size));
    let (y0, x0) = ((img.height - h) / 2, (img.width - w) / 2);
    let c = img.channels;
    let mut data = Vec::with_capacity(h * w * c);
    for y in y0..y0 + h {
        let start = (y * img.width + x0) * c;
        data.extend_from_slice(&img.data[start..start + w * c]);
    }
    ImageBuffer::new(w, h, c, data)
}

/// A model fitted to one image together with its parameters.
pub struct ImageFit {
    pub store: ParamStore,
    pub model: InstanceModel,
    pub report: FitReport,
    pub total_params: usize,
}

/// Fits an ANR (`anr = true`) or the MLP baseline to `image`, initialized
/// from `seed`.
pub fn fit_image(cfg: &ExperimentConfig, image: &ImageBuffer, anr: bool, m: f64, seed: u64) -> Result<ImageFit> {
    let (h, w, c) = (image.height, image.width, image.channels);
    let grid = make_grid(&GridSpec::image(h, w))?;
    let target = image.to_pixels();
    let mut store = ParamStore::new();
    let mut rng = Prng::stream(seed, INIT_STREAM);
    let model = if anr {
        let acfg = AnrConfig {
            m,
            ..cfg.anr_config(2, c)
        };
        let model = AnrModel::new(&mut store, "anr", &acfg, &mut rng)?;
        let tokens = store.add("tokens", RTokens::random(acfg.tokens, acfg.token_dim, &mut rng).tokens);
        InstanceModel::Anr { model, tokens }
    } else {
        InstanceModel::Mlp(MlpInrModel::new(&mut store, "inr", &cfg.mlp_config(2, c), &mut rng)?)
    };
    let setup = FitSetup {
        steps: cfg.steps,
        adam: cfg.adam(),
        sampler: cfg.image_sampler(h, w),
        seed,
    };
    let report = with_report(fit_instance(&mut store, &model, &grid, &target, &setup)?, cfg);
    let total_params = store.numel();
    Ok(ImageFit {
        store,
        model,
        report,
        total_params,
    })
}

/// Share of exactly-zero alignment weights of a fitted ANR on its grid.
pub fn clipped_fraction(fit: &ImageFit, coords: &Tensor) -> Result<f64> {
    let InstanceModel::Anr { model, tokens } = &fit.model else {
        return Ok(0.0);
    };
    let mut tape = Tape::new();
    let p = fit.store.bind_frozen(&mut tape);
    let trace = model.trace(&mut tape, &p, p[*tokens], coords)?;
    let w = tape.value(trace.weights);
    Ok(w.data().iter().filter(|&&v| v == 0.0).count() as f64 / w.numel().max(1) as f64)
}

fn run_fit_image(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let bundle = Bundle::create(cfg)?;
    let image = load_target_image(cfg)?;
    let (h, w) = (image.height, image.width);
    bundle.image("target.ppm", &image.to_pixels(), h, w)?;
    let kinds: Vec<bool> = match cfg.model {
        ModelChoice::Anr => vec![true],
        ModelChoice::MlpInr => vec![false],
        ModelChoice::Both => vec![true, false],
    };
    let grid = make_grid(&GridSpec::image(h, w))?;
    let sr_grid = make_grid(&GridSpec::image(h * cfg.sr, w * cfg.sr))?;
    let mut metrics = String::from("seed,model,step,loss,psnr\n");
    let mut runs = Vec::new();
    let mut psnrs: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for seed in cfg.seed..cfg.seed + cfg.seeds as u64 {
        for &anr in &kinds {
            let fit = fit_image(cfg, &image, anr, cfg.m, seed)?;
            let name = fit.model.kind();
            for line in fit.report.to_csv().lines().skip(1) {
                metrics.push_str(&format!("{seed},{name},{line}\n"));
            }
            bundle.image(&format!("recon_{name}_{seed}.ppm"), &fit.model.eval(&fit.store, &grid)?, h, w)?;
            if cfg.sr > 1 {
                let up = fit.model.eval(&fit.store, &sr_grid)?;
                bundle.image(&format!("recon_{name}_{seed}_sr{}.ppm", cfg.sr), &up, h * cfg.sr, w * cfg.sr)?;
            }
            psnrs[anr as usize].push(fit.report.final_psnr);
            runs.push(json!({
                "seed": seed,
                "model": name,
                "final_loss": fit.report.final_loss,
                "final_psnr": fit.report.final_psnr,
                "repr_params": fit.model.repr_param_count(),
                "total_params": fit.total_params,
                "wall_time_s": fit.report.wall_time_s,
            }));
        }
    }
    bundle.write("metrics.csv", metrics)?;
    let mut checks = Vec::new();
    let (anr_med, mlp_med) = (median(&psnrs[1]), median(&psnrs[0]));
    if cfg.model == ModelChoice::Both {
        checks.push(Check::new(
            "anr_psnr_at_least_mlp",
            anr_med >= mlp_med,
            format!("median PSNR anr {anr_med:.2} dB vs mlp-inr {mlp_med:.2} dB"),
        ));
    }
    let results = json!({
        "runs": runs,
        "median_psnr_anr": anr_med,
        "median_psnr_mlp_inr": mlp_med,
        "height": h,
        "width": w,
    });
    bundle.finish(cfg, checks, results)
}

fn run_ablate(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let bundle = Bundle::create(cfg)?;
    let image = load_target_image(cfg)?;
    let grid = make_grid(&GridSpec::image(image.height, image.width))?;
    let mut metrics = String::from("seed,m,final_loss,final_psnr,clipped_fraction\n");
    let mut with_t = Vec::new();
    let mut without = Vec::new();
    for seed in cfg.seed..cfg.seed + cfg.seeds as u64 {
        for m in [cfg.m, 0.0] {
            let fit = fit_image(cfg, &image, true, m, seed)?;
            let clipped = clipped_fraction(&fit, &grid)?;
            metrics.push_str(&format!(
                "{seed},{m:e},{:e},{:e},{clipped:e}\n",
                fit.report.final_loss, fit.report.final_psnr
            ));
            if m == 0.0 {
                without.push(fit.report.final_loss);
            } else {
                with_t.push(fit.report.final_loss);
            }
        }
    }
    bundle.write("metrics.csv", metrics)?;
    let (a, b) = (median(&with_t), median(&without));
    let checks = vec![Check::new(
        "median_thresholded_loss_at_most_unthresholded",
        a <= b,
        format!("median final loss m={} {a:.4e} vs m=0 {b:.4e}", cfg.m),
    )];
    let results = json!({
        "losses_thresholded": with_t,
        "losses_unthresholded": without,
        "median_thresholded": a,
        "median_unthresholded": b,
    });
    bundle.finish(cfg, checks, results)
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Vec<ImageBuffer>> {
    let Some(dir) = &cfg.dataset else {
        return Ok(synthetic_dataset(cfg.synthetic, cfg.size, cfg.seed));
    };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm")))
        .collect();
    paths.sort();
    let images = paths.iter().map(load_image).collect::<Result<Vec<_>>>()?;
    if let Some(first) = images.first() {
        if images
            .iter()
            .any(|i| (i.width, i.height, i.channels) != (first.width, first.height, first.channels))
        {
            return Err(Error::invalid("dataset images must share extent and channel count"));
        }
    }
    Ok(images)
}

pub fn hyper_config(cfg: &ExperimentConfig, h: usize, w: usize, channels: usize) -> HyperNetConfig {
    HyperNetConfig {
        height: h,
        width_px: w,
        channels,
        patch_size: cfg.patch_size,
        width: cfg.hyper_width,
        heads: cfg.heads,
        head_dim: cfg.head_dim,
        ff_dim: cfg.ff_dim,
        enc_depth: cfg.enc_depth,
        dec_depth: cfg.dec_depth,
        out_tokens: cfg.tokens,
        token_dim: cfg.token_dim,
        arch: cfg.arch,
    }
}

fn run_hypernet(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let bundle = Bundle::create(cfg)?;
    let images = load_dataset(cfg)?;
    if images.len() <= cfg.held_out || cfg.held_out == 0 {
        return Err(Error::invalid(format!(
            "dataset of {} images cannot hold out {}",
            images.len(),
            cfg.held_out
        )));
    }
    let (h, w, c) = (images[0].height, images[0].width, images[0].channels);
    let split = images.len() - cfg.held_out;
    let pixels: Vec<Tensor> = images.iter().map(ImageBuffer::to_pixels).collect();
    let (train, held) = pixels.split_at(split);
    let grid = make_grid(&GridSpec::image(h, w))?;

    let mut store = ParamStore::new();
    let mut rng = Prng::stream(cfg.seed, INIT_STREAM);
    let hyper = HyperNet::new(&mut store, "hyper", &hyper_config(cfg, h, w, c), &mut rng)?;
    let anr = AnrModel::new(&mut store, "anr", &cfg.anr_config(2, c), &mut rng)?;

    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    hyper.forward(&mut tape, &p, &train[0])?;
    let (counted, expected) = (tape.attention_elements(), hyper.attention_cost());

    let setup = HyperTrainSetup {
        steps: cfg.steps,
        batch: cfg.batch.min(train.len()),
        adam: cfg.adam(),
        seed: cfg.seed,
    };
    let report = with_report(train_hypernet(&mut store, &hyper, &anr, train, &grid, &setup)?, cfg);
    bundle.write("metrics.csv", report.to_csv())?;

    let recon = hypernet_reconstruct(&store, &hyper, &anr, held, &grid)?;
    let held_psnr = mean_psnr(&recon, held)?;
    let mean = mean_image(&images[..split])
        .ok_or_else(|| Error::invalid("empty training split"))?
        .to_pixels();
    let baseline: Vec<Tensor> = held.iter().map(|_| mean.clone()).collect();
    let base_psnr = mean_psnr(&baseline, held)?;
    for (i, (r, t)) in recon.iter().zip(held).enumerate().take(4) {
        bundle.image(&format!("heldout_{i}_recon.ppm"), r, h, w)?;
        bundle.image(&format!("heldout_{i}_target.ppm"), t, h, w)?;
    }
    bundle.image("mean_image.ppm", &mean, h, w)?;
    let checks = vec![
        Check::new(
            "attention_cost_matches",
            counted == expected,
            format!("counted {counted} attention-map elements, closed form {expected}"),
        ),
        Check::new(
            "heldout_beats_mean_image",
            held_psnr > base_psnr,
            format!("held-out PSNR {held_psnr:.2} dB vs mean image {base_psnr:.2} dB"),
        ),
    ];
    let results = json!({
        "train_images": split,
        "held_out": cfg.held_out,
        "final_train_loss": report.final_loss,
        "heldout_psnr": held_psnr,
        "mean_image_psnr": base_psnr,
        "attention_elements": counted,
        "attention_cost": expected,
        "params": store.numel(),
        "wall_time_s": report.wall_time_s,
    });
    bundle.finish(cfg, checks, results)
}

fn run_gradcheck(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let bundle = Bundle::create(cfg)?;
    let entries = crate::gradsuite::run_suite(cfg.seed)?;
    bundle.write("metrics.csv", crate::gradsuite::suite_csv(&entries))?;
    let failing: Vec<String> = entries
        .iter()
        .filter(|e| !e.passed())
        .map(|e| format!("{} ({:.3e})", e.op, e.report.max_rel_err()))
        .collect();
    let worst = entries.iter().map(|e| e.report.max_rel_err()).fold(0.0, f64::max);
    let checks = vec![Check::new(
        "all_gradients_match",
        failing.is_empty(),
        if failing.is_empty() {
            format!("{} checks, worst relative error {worst:.3e}", entries.len())
        } else {
            format!("failing: {}", failing.join(", "))
        },
    )];
    let per_op: Map<String, Value> = entries
        .iter()
        .map(|e| (e.op.clone(), json!(e.report.max_rel_err())))
        .collect();
    bundle.finish(cfg, checks, json!({ "max_rel_err": per_op }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matched_width_respects_budget() {
        let w = matched_width(2048, 64, 3, 3);
        assert!(mlp_param_count(64, 3, w, 3) <= 2048);
        assert!(mlp_param_count(64, 3, w + 1, 3) > 2048);
        assert_eq!(mlp_param_count(2, 0, 9, 3), 9);
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn overrides_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"steps": 12, "lr": 0.01}"#).unwrap();
        let mut flags = Map::new();
        flags.insert("steps".into(), json!(7));
        let cfg = ExperimentConfig::resolve(ExperimentKind::FitImage, Some(&path), flags).unwrap();
        assert_eq!(cfg.steps, 7);
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.tokens, 64);
    }

    #[test]
    fn unknown_keys_and_wrong_experiment_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"stepz": 12}"#).unwrap();
        assert!(ExperimentConfig::resolve(ExperimentKind::FitImage, Some(&path), Map::new()).is_err());
        std::fs::write(&path, r#"{"experiment": "fit1d"}"#).unwrap();
        assert!(ExperimentConfig::resolve(ExperimentKind::FitImage, Some(&path), Map::new()).is_err());
    }

    #[test]
    fn zero_tokens_rejected() {
        let mut flags = Map::new();
        flags.insert("tokens".into(), json!(0));
        flags.insert("model".into(), json!("anr"));
        assert!(ExperimentConfig::resolve(ExperimentKind::FitImage, None, flags).is_err());
    }

    #[test]
    fn fit1d_frequencies_stay_below_nyquist() {
        let mut flags = Map::new();
        flags.insert("max_frequency".into(), json!(50));
        assert!(ExperimentConfig::resolve(ExperimentKind::Fit1d, None, flags).is_err());
    }

    #[test]
    fn seed_changes_targets() {
        let mut a = ExperimentConfig::defaults(ExperimentKind::Fit1d);
        let t0 = line_targets(&a).unwrap();
        assert_eq!(t0, line_targets(&a).unwrap());
        a.seed = 1;
        assert_ne!(t0, line_targets(&a).unwrap());
        assert!(t0.max_bin_1d() < a.points / 2);
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::defaults(ExperimentKind::FitImage);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 9;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
