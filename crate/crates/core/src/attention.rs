//! Scaled dot-product attention with localized (thresholded) alignment.
//!
//! `L-softmax_m(x) = Localize(softmax(x), m)` where `Localize` zeroes every
//! weight at or below `m` and renormalizes the survivors. The localized
//! attention layer is `L-softmax_m(Q·Kᵀ/√d_k)·V`.
//!
//! A weight clipped to zero contributes nothing forward, and the gradient
//! reaching that entry of the attention map is exactly zero, so value rows
//! whose weights are clipped in every query receive no gradient. The logits
//! behind a clipped entry still see a small gradient through the softmax
//! normalizer (it is proportional to `m`), which is the exact derivative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, LinearLayer, ParamStore};
use crate::prng::Prng;
use crate::tape::{Tape, Var};

/// Threshold that worked best in the reference ablation.
pub const DEFAULT_THRESHOLD: f64 = 0.0015;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LalParams {
    pub m: f64,
    pub d_k: usize,
}

impl LalParams {
    pub fn new(m: f64, d_k: usize) -> Result<Self> {
        let p = Self { m, d_k };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.m) {
            return Err(Error::invalid(format!("threshold m={} outside [0, 1)", self.m)));
        }
        if self.d_k == 0 {
            return Err(Error::invalid("d_k must be >= 1"));
        }
        Ok(())
    }
}

pub fn localize(tape: &mut Tape, x: Var, m: f64) -> Result<Var> {
    tape.localize(x, m)
}

pub fn l_softmax(tape: &mut Tape, logits: Var, m: f64) -> Result<Var> {
    let p = tape.softmax(logits)?;
    tape.localize(p, m)
}

/// `Q·Kᵀ/√d_k`, counted toward the tape's attention-map tally.
pub fn attention_scores(tape: &mut Tape, q: Var, k: Var) -> Result<Var> {
    let (qs, ks) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(Error::Shape {
            op: "attention_scores",
            left: qs,
            right: ks,
        });
    }
    tape.note_attention_map(qs[0], ks[0]);
    tape.matmul_scaled(q, false, k, true, 1.0 / (qs[1] as f64).sqrt())
}

/// Intermediate handles of one localized attention evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LalTrace {
    pub scores: Var,
    /// Softmax alignment before thresholding.
    pub probs: Var,
    /// Thresholded, renormalized alignment.
    pub weights: Var,
    pub output: Var,
}

pub fn lal_forward_traced(tape: &mut Tape, q: Var, k: Var, v: Var, m: f64) -> Result<LalTrace> {
    let (ks, vs) = (tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if vs.len() != 2 || ks[0] != vs[0] {
        return Err(Error::Shape {
            op: "lal_forward",
            left: ks,
            right: vs,
        });
    }
    let scores = attention_scores(tape, q, k)?;
    let probs = tape.softmax(scores)?;
    let weights = tape.localize(probs, m)?;
    let output = tape.matmul(weights, v)?;
    Ok(LalTrace {
        scores,
        probs,
        weights,
        output,
    })
}

/// `L-softmax_m(Q·Kᵀ/√d_k)·V` for `Q: [q, d_k]`, `K: [N, d_k]`, `V: [N, d_v]`.
pub fn lal_forward(tape: &mut Tape, q: Var, k: Var, v: Var, m: f64) -> Result<Var> {
    Ok(lal_forward_traced(tape, q, k, v, m)?.output)
}

/// Multi-head attention projections.
#[derive(Clone, Debug)]
pub struct AttentionHeads {
    pub heads: usize,
    pub head_dim: usize,
    pub w_q: LinearLayer,
    pub w_k: LinearLayer,
    pub w_v: LinearLayer,
    pub w_o: LinearLayer,
}

impl AttentionHeads {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        heads: usize,
        head_dim: usize,
        rng: &mut Prng,
    ) -> Result<Self> {
        if heads == 0 || head_dim == 0 {
            return Err(Error::invalid("attention needs heads >= 1 and head_dim >= 1"));
        }
        let width = heads * head_dim;
        Ok(Self {
            heads,
            head_dim,
            w_q: LinearLayer::new(store, &format!("{name}.q"), in_dim, width, rng),
            w_k: LinearLayer::new(store, &format!("{name}.k"), in_dim, width, rng),
            w_v: LinearLayer::new(store, &format!("{name}.v"), in_dim, width, rng),
            w_o: LinearLayer::new(store, &format!("{name}.o"), width, in_dim, rng),
        })
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Per-head softmax attention, heads concatenated, then the output projection.
pub fn mha_forward(tape: &mut Tape, p: &Bound, heads: &AttentionHeads, q_in: Var, k_in: Var, v_in: Var) -> Result<Var> {
    let width = heads.width();
    for x in [q_in, k_in, v_in] {
        let cols = tape.value(x).last_dim();
        if cols != heads.w_q.in_dim {
            return Err(Error::Shape {
                op: "mha_forward",
                left: tape.shape(x).to_vec(),
                right: vec![heads.heads, heads.head_dim],
            });
        }
    }
    let q = heads.w_q.forward(tape, p, q_in)?;
    let k = heads.w_k.forward(tape, p, k_in)?;
    let v = heads.w_v.forward(tape, p, v_in)?;
    let (q_len, k_len) = (tape.shape(q)[0], tape.shape(k)[0]);
    let mut outs = Vec::with_capacity(heads.heads);
    for h in 0..heads.heads {
        let start = h * heads.head_dim;
        let qh = tape.slice_cols(q, start, heads.head_dim)?;
        let kh = tape.slice_cols(k, start, heads.head_dim)?;
        let vh = tape.slice_cols(v, start, heads.head_dim)?;
        let s = tape.matmul_scaled(qh, false, kh, true, 1.0 / (heads.head_dim as f64).sqrt())?;
        let a = tape.softmax(s)?;
        outs.push(tape.matmul(a, vh)?);
    }
    // one attention map per call, whatever the head count
    tape.note_attention_map(q_len, k_len);
    let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    debug_assert_eq!(tape.value(cat).last_dim(), width);
    heads.w_o.forward(tape, p, cat)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HyperArch {
    /// Encoder over data tokens, decoder (self + cross attention) over
    /// representation queries.
    EncoderDecoder,
    /// One encoder over the concatenation of data and query tokens.
    EncoderOnly,
}

/// Attention-map elements of one hypernetwork forward.
///
/// Encoder-decoder: `depth_e·L_d² + depth_d·(L_r² + L_d·L_r)`, which is
/// `depth·(L_d² + L_r² + L_d·L_r)` at equal depths. Encoder-only:
/// `depth_e·(L_d + L_r)²`; `depth_d` is ignored.
pub fn attention_map_cost(arch: HyperArch, depth_e: usize, depth_d: usize, l_d: usize, l_r: usize) -> u64 {
    let (de, dd, ld, lr) = (depth_e as u64, depth_d as u64, l_d as u64, l_r as u64);
    match arch {
        HyperArch::EncoderDecoder => de * ld * ld + dd * (lr * lr + ld * lr),
        HyperArch::EncoderOnly => de * (ld * ld + lr * lr + 2 * ld * lr),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn row(tape: &mut Tape, v: &[f64]) -> Var {
        tape.constant(Tensor::from_rows(&[v.to_vec()]).unwrap())
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn localize_examples() {
        let mut tape = Tape::new();
        let x = row(&mut tape, &[0.5, 0.3, 0.2]);
        let y = localize(&mut tape, x, 0.25).unwrap();
        assert!(close(tape.value(y).data(), &[0.25 / 0.30, 0.05 / 0.30, 0.0], 1e-15));

        let y = localize(&mut tape, x, 0.0).unwrap();
        assert!(close(tape.value(y).data(), &[0.5, 0.3, 0.2], 1e-15));

        let x = row(&mut tape, &[0.4, 0.35, 0.25]);
        let y = localize(&mut tape, x, 0.5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.4, 0.35, 0.25]);
    }

    #[test]
    fn l_softmax_examples() {
        let mut tape = Tape::new();
        let x = row(&mut tape, &[0.0, 0.0, 0.0]);
        let y = l_softmax(&mut tape, x, 0.1).unwrap();
        assert!(close(tape.value(y).data(), &[1.0 / 3.0; 3], 1e-15));

        // side weights are 1/(e^10 + 2) ≈ 4.54e-5 < m
        let x = row(&mut tape, &[10.0, 0.0, 0.0]);
        let y = l_softmax(&mut tape, x, DEFAULT_THRESHOLD).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0, 0.0]);

        let x = row(&mut tape, &[0.7, -0.3, 1.9, 0.05]);
        let a = l_softmax(&mut tape, x, 0.0).unwrap();
        let b = tape.softmax(x).unwrap();
        assert!(tape.value(a).max_abs_diff(tape.value(b)).unwrap() < 1e-12);
    }

    #[test]
    fn single_key_returns_value_row() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap());
        let k = row(&mut tape, &[0.3, -0.1]);
        let v = row(&mut tape, &[4.0, 5.0, 6.0]);
        let out = lal_forward(&mut tape, q, k, v, DEFAULT_THRESHOLD).unwrap();
        assert_eq!(tape.value(out).data(), &[4.0, 5.0, 6.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn lal_shape_errors() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros(vec![2, 3]));
        let k = tape.constant(Tensor::zeros(vec![4, 2]));
        let v = tape.constant(Tensor::zeros(vec![4, 2]));
        assert!(lal_forward(&mut tape, q, k, v, 0.0).is_err());
        let k = tape.constant(Tensor::zeros(vec![4, 3]));
        let v = tape.constant(Tensor::zeros(vec![5, 2]));
        assert!(lal_forward(&mut tape, q, k, v, 0.0).is_err());
    }

    #[test]
    fn lal_params_validation() {
        assert!(LalParams::new(1.0, 4).is_err());
        assert!(LalParams::new(-0.1, 4).is_err());
        assert!(LalParams::new(0.0015, 0).is_err());
        assert!(LalParams::new(0.0015, 4).is_ok());
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let mut store = ParamStore::new();
        let heads = AttentionHeads::new(&mut store, "a", 4, 2, 2, &mut Prng::new(0)).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let q = tape.constant(Tensor::from_fn(vec![3, 4], |i| i as f64 * 0.1));
        let kv = tape.constant(Tensor::from_fn(vec![5, 4], |i| (i % 4) as f64));
        let out = mha_forward(&mut tape, &p, &heads, q, kv, kv).unwrap();
        // all keys equal, so every query sees the mean value row, which is
        // the same for every query
        let o = tape.value(out);
        for r in 1..3 {
            assert!(close(o.row(r), o.row(0), 1e-12));
        }
    }

    #[test]
    fn mha_rejects_wrong_width() {
        let mut store = ParamStore::new();
        let heads = AttentionHeads::new(&mut store, "a", 4, 2, 2, &mut Prng::new(0)).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let q = tape.constant(Tensor::zeros(vec![3, 5]));
        assert!(mha_forward(&mut tape, &p, &heads, q, q, q).is_err());
    }

    #[test]
    fn cost_table_examples() {
        assert_eq!(attention_map_cost(HyperArch::EncoderDecoder, 6, 6, 64, 16), 32_256);
        assert_eq!(attention_map_cost(HyperArch::EncoderOnly, 6, 6, 64, 16), 38_400);
        let l = 24;
        let d = 5;
        assert_eq!(
            attention_map_cost(HyperArch::EncoderOnly, d, d, l, l) - attention_map_cost(HyperArch::EncoderDecoder, d, d, l, l),
            (d * l * l) as u64
        );
    }
}
