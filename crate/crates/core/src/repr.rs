//! Coordinate networks: Fourier positional embedding, representation tokens,
//! the attention-based localized representation, and the MLP baseline.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::attention::{lal_forward_traced, LalParams, LalTrace, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::nn::{Activation, Bound, Mlp, MlpConfig, ParamId, ParamStore};
use crate::prng::Prng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Frozen random Fourier features `γ(c) = sin(c·Ωᵀ + φ)`.
///
/// Rows of `Ω` are drawn from `N(0, (2π·sigma_pe)²)` and stored in
/// `(φ = 0, φ = π/2)` pairs, so the embedding holds `sin` and `cos` of each
/// random frequency.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEncoder {
    pub omega: Tensor,
    pub phi: Tensor,
    pub sigma_pe: f64,
}

impl PositionalEncoder {
    pub fn new(features: usize, coord_dim: usize, sigma_pe: f64, rng: &mut Prng) -> Result<Self> {
        if features == 0 || features % 2 != 0 {
            return Err(Error::invalid(format!(
                "positional features must be even and positive, got {features}"
            )));
        }
        if coord_dim == 0 {
            return Err(Error::invalid("coordinate dimension must be >= 1"));
        }
        let std = 2.0 * PI * sigma_pe;
        let mut omega = Vec::with_capacity(features * coord_dim);
        let mut phi = Vec::with_capacity(features);
        for _ in 0..features / 2 {
            let row: Vec<f64> = (0..coord_dim).map(|_| std * rng.normal()).collect();
            omega.extend_from_slice(&row);
            omega.extend_from_slice(&row);
            phi.push(0.0);
            phi.push(FRAC_PI_2);
        }
        Ok(Self {
            omega: Tensor::new(vec![features, coord_dim], omega)?,
            phi: Tensor::vector(phi),
            sigma_pe,
        })
    }

    /// Encoder with explicit spectrum and phases.
    pub fn from_parts(omega: Tensor, phi: Tensor, sigma_pe: f64) -> Result<Self> {
        let (p, _) = omega.dims2("positional encoder")?;
        if phi.shape() != [p] {
            return Err(Error::Shape {
                op: "positional encoder",
                left: omega.shape().to_vec(),
                right: phi.shape().to_vec(),
            });
        }
        Ok(Self { omega, phi, sigma_pe })
    }

    pub fn features(&self) -> usize {
        self.omega.shape()[0]
    }

    pub fn coord_dim(&self) -> usize {
        self.omega.shape()[1]
    }

    /// Largest Euclidean row norm of `Ω`: the Lipschitz constant of each
    /// embedding channel.
    pub fn max_row_norm(&self) -> f64 {
        (0..self.features())
            .map(|i| self.omega.row(i).iter().map(|w| w * w).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// `sin(c·Ωᵀ + φ)` for coordinates `c` of shape `[q, C]`.
    pub fn embed(&self, coords: &Tensor) -> Result<Tensor> {
        let (q, c) = coords.dims2("fourier_embed")?;
        if c != self.coord_dim() {
            return Err(Error::Shape {
                op: "fourier_embed",
                left: coords.shape().to_vec(),
                right: self.omega.shape().to_vec(),
            });
        }
        let p = self.features();
        let mut out = Vec::with_capacity(q * p);
        for i in 0..q {
            let ci = coords.row(i);
            for j in 0..p {
                let z: f64 = self.omega.row(j).iter().zip(ci).map(|(w, x)| w * x).sum();
                out.push((z + self.phi.data()[j]).sin());
            }
        }
        Tensor::new(vec![q, p], out)
    }
}

pub fn fourier_embed(enc: &PositionalEncoder, coords: &Tensor) -> Result<Tensor> {
    enc.embed(coords)
}

/// Per-instance representation: `N` tokens of dimension `d`, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct RTokens {
    pub tokens: Tensor,
}

impl RTokens {
    pub fn new(tokens: Tensor) -> Result<Self> {
        tokens.dims2("rtokens")?;
        if !tokens.is_finite() {
            return Err(Error::NonFinite { op: "rtokens" });
        }
        Ok(Self { tokens })
    }

    pub fn random(n: usize, d: usize, rng: &mut Prng) -> Self {
        Self {
            tokens: Tensor::from_fn(vec![n, d], |_| rng.normal()),
        }
    }

    pub fn count(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.tokens.numel()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnrConfig {
    pub coord_dim: usize,
    pub pe_features: usize,
    pub pe_sigma: f64,
    pub tokens: usize,
    pub token_dim: usize,
    pub m: f64,
    pub converter: MlpConfig,
}

impl AnrConfig {
    /// Image-scale defaults: 5 hidden converter layers.
    pub fn image(channels: usize) -> Self {
        Self {
            coord_dim: 2,
            pe_features: 64,
            pe_sigma: 8.0,
            tokens: 64,
            token_dim: 32,
            m: DEFAULT_THRESHOLD,
            converter: MlpConfig {
                depth: 5,
                width: 64,
                activation: Activation::Relu,
                output_dim: channels,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens == 0 {
            return Err(Error::invalid("ANR needs at least one token (N >= 1)"));
        }
        if self.token_dim == 0 {
            return Err(Error::invalid("token dimension must be >= 1"));
        }
        LalParams::new(self.m, self.token_dim)?;
        self.converter.validate()
    }

    pub fn repr_param_count(&self) -> usize {
        self.tokens * self.token_dim
    }
}

/// Instance-agnostic part of the attention-based representation.
///
/// `f(c, D) = MLP(LAL(γ(c)·W_qᵀ, D·W_kᵀ, D·W_vᵀ))`
#[derive(Clone, Debug)]
pub struct AnrModel {
    pub config: AnrConfig,
    pub encoder: PositionalEncoder,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub lal: LalParams,
    pub converter: Mlp,
}

impl AnrModel {
    pub fn new(store: &mut ParamStore, name: &str, config: &AnrConfig, rng: &mut Prng) -> Result<Self> {
        config.validate()?;
        let encoder = PositionalEncoder::new(config.pe_features, config.coord_dim, config.pe_sigma, rng)?;
        let (p, d) = (config.pe_features, config.token_dim);
        let mut uniform = |rows: usize, cols: usize| {
            let b = (1.0 / cols as f64).sqrt();
            Tensor::from_fn(vec![rows, cols], |_| rng.uniform_in(-b, b))
        };
        let w_q = store.add(format!("{name}.w_q"), uniform(d, p));
        let w_k = store.add(format!("{name}.w_k"), uniform(d, d));
        let w_v = store.add(format!("{name}.w_v"), uniform(d, d));
        let converter = Mlp::new(store, &format!("{name}.converter"), d, &config.converter, rng)?;
        Ok(Self {
            config: config.clone(),
            encoder,
            w_q,
            w_k,
            w_v,
            lal: LalParams::new(config.m, d)?,
            converter,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.config.converter.output_dim
    }

    /// Attention output before the converter, shape `[q, d]`.
    pub fn fused(&self, tape: &mut Tape, p: &Bound, tokens: Var, coords: &Tensor) -> Result<Var> {
        Ok(self.trace(tape, p, tokens, coords)?.output)
    }

    /// Intermediate values of the localized attention layer.
    pub fn trace(&self, tape: &mut Tape, p: &Bound, tokens: Var, coords: &Tensor) -> Result<LalTrace> {
        let ts = tape.shape(tokens).to_vec();
        if ts.len() != 2 || ts[1] != self.config.token_dim || ts[0] == 0 {
            return Err(Error::Shape {
                op: "anr_forward",
                left: ts,
                right: vec![self.config.tokens, self.config.token_dim],
            });
        }
        let gamma = tape.constant(self.encoder.embed(coords)?);
        let q = tape.matmul_t(gamma, p[self.w_q])?;
        let k = tape.matmul_t(tokens, p[self.w_k])?;
        let v = tape.matmul_t(tokens, p[self.w_v])?;
        lal_forward_traced(tape, q, k, v, self.lal.m)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, tokens: Var, coords: &Tensor) -> Result<Var> {
        let h = self.fused(tape, p, tokens, coords)?;
        self.converter.forward(tape, p, h)
    }

    /// Shared parameters only (projections and converter).
    pub fn shared_param_count(&self) -> usize {
        let (p, d) = (self.config.pe_features, self.config.token_dim);
        d * p + 2 * d * d + self.converter.param_count()
    }

    pub fn repr_param_count(&self) -> usize {
        self.config.repr_param_count()
    }
}

pub fn anr_forward(tape: &mut Tape, p: &Bound, model: &AnrModel, tokens: Var, coords: &Tensor) -> Result<Var> {
    model.forward(tape, p, tokens, coords)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpInrConfig {
    pub coord_dim: usize,
    pub pe_features: usize,
    pub pe_sigma: f64,
    pub mlp: MlpConfig,
    /// Instance-specific columns per weight matrix; `None` predicts every
    /// weight and bias.
    #[serde(default)]
    pub modulation: Option<usize>,
}

impl MlpInrConfig {
    pub fn validate(&self) -> Result<()> {
        self.mlp.validate()?;
        if let Some(k) = self.modulation {
            let widest = self.pe_features.max(self.mlp.width);
            if k == 0 || k > widest {
                return Err(Error::invalid(format!(
                    "modulated columns {k} must be in 1..={widest}"
                )));
            }
        }
        Ok(())
    }
}

/// Positional embedding followed by an MLP.
#[derive(Clone, Debug)]
pub struct MlpInrModel {
    pub config: MlpInrConfig,
    pub encoder: PositionalEncoder,
    pub mlp: Mlp,
}

impl MlpInrModel {
    pub fn new(store: &mut ParamStore, name: &str, config: &MlpInrConfig, rng: &mut Prng) -> Result<Self> {
        config.validate()?;
        let encoder = PositionalEncoder::new(config.pe_features, config.coord_dim, config.pe_sigma, rng)?;
        let mlp = Mlp::new(store, &format!("{name}.mlp"), config.pe_features, &config.mlp, rng)?;
        Ok(Self {
            config: config.clone(),
            encoder,
            mlp,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, coords: &Tensor) -> Result<Var> {
        let gamma = tape.constant(self.encoder.embed(coords)?);
        self.mlp.forward(tape, p, gamma)
    }

    pub fn output_dim(&self) -> usize {
        self.config.mlp.output_dim
    }

    /// Number of weights a hypernetwork would predict per instance.
    pub fn repr_param_count(&self) -> usize {
        match self.config.modulation {
            None => self.mlp.param_count(),
            Some(k) => self.mlp.layers.iter().map(|l| l.out_dim * k.min(l.in_dim)).sum(),
        }
    }
}

pub fn mlp_inr_forward(tape: &mut Tape, p: &Bound, model: &MlpInrModel, coords: &Tensor) -> Result<Var> {
    model.forward(tape, p, coords)
}
