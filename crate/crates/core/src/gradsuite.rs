//! The full finite-difference gradient check: every tape primitive, the
//! attention layers, the representation loss, hypernetwork blocks and the
//! end-to-end pipeline.

use serde::{Deserialize, Serialize};

use crate::attention::{l_softmax, lal_forward, mha_forward, AttentionHeads, HyperArch};
use crate::error::Result;
use crate::hypernet::{end_to_end_forward, DecoderBlock, EncoderBlock, HyperNet, HyperNetConfig};
use crate::nn::{Activation, Bound, LayerNormParams, LinearLayer, Mlp, MlpConfig, ParamStore, SineBound};
use crate::prng::Prng;
use crate::repr::{AnrConfig, AnrModel, MlpInrConfig, MlpInrModel, RTokens};
use crate::spectral::{gradcheck, GradcheckReport};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::mse;

/// Tolerance for single operations and blocks.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Tolerance for hypernetwork + representation end to end.
pub const PIPELINE_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub op: String,
    pub report: GradcheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

/// Random fixed weights for reducing an output to a scalar; the same shape
/// always gets the same weights so repeated evaluations agree.
pub fn probe(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut rng = Prng::new(0x5eed);
    let r = tape.constant(Tensor::from_fn(shape, |_| rng.normal()));
    let w = tape.mul(y, r)?;
    tape.sum_all(w)
}

/// Gradient check over every tensor in `store`.
pub fn check_store<F>(store: &ParamStore, tolerance: f64, mut f: F) -> Result<GradcheckReport>
where
    F: FnMut(&mut Tape, &Bound) -> Result<Var>,
{
    let names: Vec<&str> = store.iter().map(|(_, n, _)| n).collect();
    gradcheck(&names, store.tensors(), tolerance, |tape, vars| {
        f(tape, &Bound::from_vars(vars.to_vec()))
    })
}

fn randn(rng: &mut Prng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.normal())
}

type Primitive = (&'static str, Vec<Vec<usize>>, fn(&mut Tape, &[Var]) -> Result<Var>);

fn primitives() -> Vec<Primitive> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| t.matmul(v[0], v[1])),
        ("matmul_t", vec![vec![3, 4], vec![2, 4]], |t, v| t.matmul_t(v[0], v[1])),
        ("matmul_tt", vec![vec![4, 3], vec![2, 4]], |t, v| t.matmul_ex(v[0], true, v[1], true)),
        ("add", vec![vec![3, 4], vec![3, 4]], |t, v| t.add(v[0], v[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |t, v| t.mul(v[0], v[1])),
        ("add_row", vec![vec![3, 4], vec![4]], |t, v| t.add_row(v[0], v[1])),
        ("mul_row", vec![vec![3, 4], vec![4]], |t, v| t.mul_row(v[0], v[1])),
        ("add_scalar", vec![vec![3, 4]], |t, v| t.add_scalar(v[0], 0.7)),
        ("scale", vec![vec![3, 4]], |t, v| t.scale(v[0], -1.3)),
        ("relu", vec![vec![3, 4]], |t, v| t.relu(v[0])),
        ("sin", vec![vec![3, 4]], |t, v| t.sin(v[0])),
        ("exp", vec![vec![3, 4]], |t, v| t.exp(v[0])),
        ("square", vec![vec![3, 4]], |t, v| t.square(v[0])),
        ("poly", vec![vec![3, 4]], |t, v| t.poly(v[0], &[0.5, -1.0, 0.3, 0.2])),
        ("sum_axis0", vec![vec![3, 4]], |t, v| t.sum(v[0], 0)),
        ("sum_axis1", vec![vec![3, 4]], |t, v| t.sum(v[0], 1)),
        ("mean_axis0", vec![vec![3, 4]], |t, v| t.mean(v[0], 0)),
        ("mean_axis1", vec![vec![3, 4]], |t, v| t.mean(v[0], 1)),
        ("max_axis0", vec![vec![3, 4]], |t, v| t.max(v[0], 0)),
        ("max_axis1", vec![vec![3, 4]], |t, v| t.max(v[0], 1)),
        ("sum_all", vec![vec![3, 4]], |t, v| t.sum_all(v[0])),
        ("mean_all", vec![vec![3, 4]], |t, v| t.mean_all(v[0])),
        ("softmax", vec![vec![3, 5]], |t, v| t.softmax(v[0])),
        ("localize", vec![vec![3, 5]], |t, v| {
            // shift into [0, 1) so the input is a valid weight row
            let s = t.softmax(v[0])?;
            t.localize(s, 0.15)
        }),
        ("layernorm", vec![vec![3, 5]], |t, v| t.layernorm(v[0], 1e-5)),
        ("transpose", vec![vec![3, 4]], |t, v| t.transpose(v[0])),
        ("reshape", vec![vec![3, 4]], |t, v| t.reshape(v[0], &[2, 6])),
        ("concat_rows", vec![vec![2, 3], vec![4, 3]], |t, v| t.concat_rows(&[v[0], v[1]])),
        ("concat_cols", vec![vec![3, 2], vec![3, 4]], |t, v| t.concat_cols(&[v[0], v[1]])),
        ("slice_cols", vec![vec![3, 5]], |t, v| t.slice_cols(v[0], 1, 3)),
        ("gather_rows", vec![vec![3, 4]], |t, v| t.gather_rows(v[0], &[2, 0, 2])),
    ]
}

fn primitive_entries(rng: &mut Prng) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for (op, shapes, f) in primitives() {
        let params: Vec<Tensor> = shapes.iter().map(|s| randn(rng, s)).collect();
        let names: Vec<String> = (0..params.len()).map(|i| format!("{op}.in{i}")).collect();
        let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let report = gradcheck(&name_refs, &params, OP_TOLERANCE, |t, v| {
            let y = f(t, v)?;
            probe(t, y)
        })?;
        out.push(SuiteEntry {
            op: op.to_string(),
            report,
        });
    }
    Ok(out)
}

fn tiny_anr(store: &mut ParamStore, rng: &mut Prng, m: f64) -> Result<AnrModel> {
    let cfg = AnrConfig {
        coord_dim: 2,
        pe_features: 6,
        pe_sigma: 1.0,
        tokens: 5,
        token_dim: 4,
        m,
        converter: MlpConfig {
            depth: 1,
            width: 6,
            activation: Activation::Relu,
            output_dim: 3,
        },
    };
    AnrModel::new(store, "anr", &cfg, rng)
}

fn tiny_hyper_config(arch: HyperArch) -> HyperNetConfig {
    HyperNetConfig {
        patch_size: 2,
        width: 6,
        heads: 2,
        head_dim: 3,
        ff_dim: 7,
        enc_depth: 1,
        dec_depth: 1,
        arch,
        ..HyperNetConfig::small(4, 4, 3, 5, 4)
    }
}

fn composite_entries(rng: &mut Prng) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    let mut push = |op: &str, report: GradcheckReport| {
        out.push(SuiteEntry {
            op: op.to_string(),
            report,
        })
    };

    for (op, m) in [("l_softmax", 0.0015), ("l_softmax_clipped", 0.12)] {
        let x = randn(rng, &[4, 6]);
        push(
            op,
            gradcheck(&["logits"], &[x], OP_TOLERANCE, |t, v| {
                let y = l_softmax(t, v[0], m)?;
                probe(t, y)
            })?,
        );
    }

    for (op, m) in [("lal", 0.0015), ("lal_clipped", 0.12)] {
        let params = vec![randn(rng, &[4, 3]), randn(rng, &[6, 3]), randn(rng, &[6, 2])];
        push(
            op,
            gradcheck(&["q", "k", "v"], &params, OP_TOLERANCE, |t, v| {
                let y = lal_forward(t, v[0], v[1], v[2], m)?;
                probe(t, y)
            })?,
        );
    }

    let mut store = ParamStore::new();
    let layer = LinearLayer::new(&mut store, "linear", 4, 3, rng);
    store.get_mut(layer.bias).data_mut().iter_mut().for_each(|b| *b = rng.normal());
    let x = randn(rng, &[5, 4]);
    push(
        "linear",
        check_store(&store, OP_TOLERANCE, |t, p| {
            let xv = t.constant(x.clone());
            let y = layer.forward(t, p, xv)?;
            probe(t, y)
        })?,
    );

    for (op, activation) in [
        ("mlp_relu", Activation::Relu),
        ("mlp_sine", Activation::Sine { init: SineBound::Standard }),
    ] {
        let mut store = ParamStore::new();
        let cfg = MlpConfig {
            depth: 2,
            width: 5,
            activation,
            output_dim: 2,
        };
        let mlp = Mlp::new(&mut store, "mlp", 3, &cfg, rng)?;
        let x = randn(rng, &[4, 3]);
        push(
            op,
            check_store(&store, OP_TOLERANCE, |t, p| {
                let xv = t.constant(x.clone());
                let y = mlp.forward(t, p, xv)?;
                probe(t, y)
            })?,
        );
    }

    let mut store = ParamStore::new();
    let ln = LayerNormParams::new(&mut store, "ln", 5);
    store.get_mut(ln.gain).data_mut().iter_mut().for_each(|g| *g = 1.0 + 0.3 * rng.normal());
    let x = randn(rng, &[3, 5]);
    push(
        "layernorm_affine",
        check_store(&store, OP_TOLERANCE, |t, p| {
            let xv = t.constant(x.clone());
            let y = ln.forward(t, p, xv)?;
            probe(t, y)
        })?,
    );

    let mut store = ParamStore::new();
    let heads = AttentionHeads::new(&mut store, "mha", 4, 2, 3, rng)?;
    let (xq, xk) = (randn(rng, &[3, 4]), randn(rng, &[5, 4]));
    push(
        "multi_head_attention",
        check_store(&store, OP_TOLERANCE, |t, p| {
            let q = t.constant(xq.clone());
            let k = t.constant(xk.clone());
            let y = mha_forward(t, p, &heads, q, k, k)?;
            probe(t, y)
        })?,
    );

    let mut store = ParamStore::new();
    let anr = tiny_anr(&mut store, rng, 0.0015)?;
    let tokens = store.add("tokens", RTokens::random(5, 4, rng).tokens);
    let coords = Tensor::from_fn(vec![7, 2], |_| rng.uniform());
    let target = Tensor::from_fn(vec![7, 3], |_| rng.uniform());
    push(
        "anr_loss",
        check_store(&store, OP_TOLERANCE, |t, p| {
            let y = anr.forward(t, p, p[tokens], &coords)?;
            mse(t, y, &target)
        })?,
    );

    let mut store = ParamStore::new();
    let inr = MlpInrModel::new(
        &mut store,
        "inr",
        &MlpInrConfig {
            coord_dim: 2,
            pe_features: 6,
            pe_sigma: 1.0,
            mlp: MlpConfig {
                depth: 2,
                width: 5,
                activation: Activation::Relu,
                output_dim: 3,
            },
            modulation: None,
        },
        rng,
    )?;
    push(
        "mlp_inr_loss",
        check_store(&store, OP_TOLERANCE, |t, p| {
            let y = inr.forward(t, p, &coords)?;
            mse(t, y, &target)
        })?,
    );

    let cfg = tiny_hyper_config(HyperArch::EncoderDecoder);
    let mut store = ParamStore::new();
    let enc = EncoderBlock::new(&mut store, "enc", &cfg, rng)?;
    let x = randn(rng, &[4, cfg.width]);
    push(
        "encoder_block",
        check_store(&store, OP_TOLERANCE, |t, p| {
            let xv = t.constant(x.clone());
            let y = enc.forward(t, p, xv)?;
            probe(t, y)
        })?,
    );

    let mut store = ParamStore::new();
    let dec = DecoderBlock::new(&mut store, "dec", &cfg, rng)?;
    let (y0, mem) = (randn(rng, &[3, cfg.width]), randn(rng, &[4, cfg.width]));
    push(
        "decoder_block",
        check_store(&store, OP_TOLERANCE, |t, p| {
            let yv = t.constant(y0.clone());
            let mv = t.constant(mem.clone());
            let y = dec.forward(t, p, yv, mv)?;
            probe(t, y)
        })?,
    );

    for (op, arch) in [
        ("hypernet_anr_pipeline", HyperArch::EncoderDecoder),
        ("hypernet_anr_pipeline_encoder_only", HyperArch::EncoderOnly),
    ] {
        let mut store = ParamStore::new();
        let hyper = HyperNet::new(&mut store, "hyper", &tiny_hyper_config(arch), rng)?;
        let anr = tiny_anr(&mut store, rng, 0.0015)?;
        let image = Tensor::from_fn(vec![16, 3], |_| rng.uniform());
        let grid = crate::sampling::make_grid(&crate::sampling::GridSpec::image(4, 4))?;
        push(
            op,
            check_store(&store, PIPELINE_TOLERANCE, |t, p| {
                let y = end_to_end_forward(t, p, &hyper, &anr, &image, &grid)?;
                mse(t, y, &image)
            })?,
        );
    }
    Ok(out)
}

/// Runs every check with inputs drawn from `seed`.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = Prng::new(seed);
    let mut entries = primitive_entries(&mut rng)?;
    entries.extend(composite_entries(&mut rng)?);
    Ok(entries)
}

/// `op,max_rel_err,checked,excluded,tolerance,passed` rows.
pub fn suite_csv(entries: &[SuiteEntry]) -> String {
    let mut out = String::from("op,max_rel_err,checked,excluded,tolerance,passed\n");
    for e in entries {
        let checked: usize = e.report.params.iter().map(|p| p.checked).sum();
        let excluded: usize = e.report.params.iter().map(|p| p.excluded).sum();
        out.push_str(&format!(
            "{},{:e},{},{},{:e},{}\n",
            e.op,
            e.report.max_rel_err(),
            checked,
            excluded,
            e.report.tolerance,
            e.passed()
        ));
    }
    out
}
