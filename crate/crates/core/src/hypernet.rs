//! Transformer hypernetwork mapping an image to representation tokens.
//!
//! Images are cut into non-overlapping patches, projected, and given learned
//! positional embeddings. An encoder stack processes the data tokens; a
//! decoder stack (self-attention without a causal mask, then cross-attention
//! to the encoder output) turns `L_r` learned query tokens into the output.

use serde::{Deserialize, Serialize};

use crate::attention::{mha_forward, AttentionHeads, HyperArch};
use crate::error::{Error, Result};
use crate::nn::{Bound, LayerNormParams, LinearLayer, ParamId, ParamStore};
use crate::prng::Prng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperNetConfig {
    pub height: usize,
    pub width_px: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub width: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ff_dim: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    /// Number of output tokens `L_r`.
    pub out_tokens: usize,
    pub token_dim: usize,
    pub arch: HyperArch,
}

impl HyperNetConfig {
    /// Desk-scale defaults: width 64, 4 heads of 16, feed-forward 128,
    /// two encoder and two decoder blocks.
    pub fn small(height: usize, width_px: usize, channels: usize, out_tokens: usize, token_dim: usize) -> Self {
        Self {
            height,
            width_px,
            channels,
            patch_size: 4,
            width: 64,
            heads: 4,
            head_dim: 16,
            ff_dim: 128,
            enc_depth: 2,
            dec_depth: 2,
            out_tokens,
            token_dim,
            arch: HyperArch::EncoderDecoder,
        }
    }

    pub fn data_tokens(&self) -> usize {
        (self.height / self.patch_size.max(1)) * (self.width_px / self.patch_size.max(1))
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.height == 0 || self.width_px == 0 || self.height % p != 0 || self.width_px % p != 0 {
            return Err(Error::invalid(format!(
                "image {}x{} is not divisible into {p}x{p} patches",
                self.height, self.width_px
            )));
        }
        if self.channels == 0 || self.width == 0 || self.ff_dim == 0 || self.token_dim == 0 {
            return Err(Error::invalid("hypernetwork sizes must be >= 1"));
        }
        if self.heads == 0 || self.head_dim == 0 {
            return Err(Error::invalid("hypernetwork needs heads >= 1 and head_dim >= 1"));
        }
        if self.out_tokens == 0 {
            return Err(Error::invalid("hypernetwork must emit at least one token"));
        }
        Ok(())
    }
}

/// Rearranges `[h·w, c]` row-major pixels into `[L_d, p·p·c]` patches,
/// patches in row-major order, pixels row-major inside each patch.
pub fn patchify(pixels: &Tensor, h: usize, w: usize, p: usize) -> Result<Tensor> {
    let (n, c) = pixels.dims2("patchify")?;
    if p == 0 || h % p != 0 || w % p != 0 || n != h * w {
        return Err(Error::invalid(format!(
            "cannot cut {n} pixels as {h}x{w} into {p}x{p} patches"
        )));
    }
    let mut out = Vec::with_capacity(n * c);
    for py in 0..h / p {
        for px in 0..w / p {
            for dy in 0..p {
                for dx in 0..p {
                    out.extend_from_slice(pixels.row((py * p + dy) * w + px * p + dx));
                }
            }
        }
    }
    Tensor::new(vec![n / (p * p), p * p * c], out)
}

/// Inverse of [`patchify`].
pub fn depatchify(patches: &Tensor, h: usize, w: usize, p: usize) -> Result<Tensor> {
    let (l, pd) = patches.dims2("depatchify")?;
    if p == 0 || h % p != 0 || w % p != 0 || l != (h / p) * (w / p) || pd % (p * p) != 0 {
        return Err(Error::invalid("patch layout does not match the image extent"));
    }
    let c = pd / (p * p);
    let mut out = vec![0.0; h * w * c];
    for (i, patch) in patches.data().chunks(pd).enumerate() {
        let (py, px) = (i / (w / p), i % (w / p));
        for (j, pix) in patch.chunks(c).enumerate() {
            let (dy, dx) = (j / p, j % p);
            let at = ((py * p + dy) * w + px * p + dx) * c;
            out[at..at + c].copy_from_slice(pix);
        }
    }
    Tensor::new(vec![h * w, c], out)
}

#[derive(Clone, Debug)]
struct FeedForward {
    up: LinearLayer,
    down: LinearLayer,
}

impl FeedForward {
    fn new(store: &mut ParamStore, name: &str, width: usize, ff: usize, rng: &mut Prng) -> Self {
        Self {
            up: LinearLayer::new(store, &format!("{name}.up"), width, ff, rng),
            down: LinearLayer::new(store, &format!("{name}.down"), ff, width, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, p, x)?;
        let h = tape.relu(h)?;
        self.down.forward(tape, p, h)
    }
}

/// Pre-layernorm self-attention block.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    ln1: LayerNormParams,
    attn: AttentionHeads,
    ln2: LayerNormParams,
    ff: FeedForward,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &HyperNetConfig, rng: &mut Prng) -> Result<Self> {
        Ok(Self {
            ln1: LayerNormParams::new(store, &format!("{name}.ln1"), cfg.width),
            attn: AttentionHeads::new(store, &format!("{name}.attn"), cfg.width, cfg.heads, cfg.head_dim, rng)?,
            ln2: LayerNormParams::new(store, &format!("{name}.ln2"), cfg.width),
            ff: FeedForward::new(store, &format!("{name}.ff"), cfg.width, cfg.ff_dim, rng),
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.ln1.forward(tape, p, x)?;
        let a = mha_forward(tape, p, &self.attn, h, h, h)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, p, x)?;
        let f = self.ff.forward(tape, p, h)?;
        tape.add(x, f)
    }
}

/// Pre-layernorm decoder block: unmasked self-attention, cross-attention
/// over `memory`, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    ln1: LayerNormParams,
    self_attn: AttentionHeads,
    ln2: LayerNormParams,
    cross_attn: AttentionHeads,
    ln3: LayerNormParams,
    ff: FeedForward,
}

impl DecoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &HyperNetConfig, rng: &mut Prng) -> Result<Self> {
        let (w, h, hd) = (cfg.width, cfg.heads, cfg.head_dim);
        Ok(Self {
            ln1: LayerNormParams::new(store, &format!("{name}.ln1"), w),
            self_attn: AttentionHeads::new(store, &format!("{name}.self"), w, h, hd, rng)?,
            ln2: LayerNormParams::new(store, &format!("{name}.ln2"), w),
            cross_attn: AttentionHeads::new(store, &format!("{name}.cross"), w, h, hd, rng)?,
            ln3: LayerNormParams::new(store, &format!("{name}.ln3"), w),
            ff: FeedForward::new(store, &format!("{name}.ff"), w, cfg.ff_dim, rng),
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, y: Var, memory: Var) -> Result<Var> {
        let h = self.ln1.forward(tape, p, y)?;
        let a = mha_forward(tape, p, &self.self_attn, h, h, h)?;
        let y = tape.add(y, a)?;
        let h = self.ln2.forward(tape, p, y)?;
        let c = mha_forward(tape, p, &self.cross_attn, h, memory, memory)?;
        let y = tape.add(y, c)?;
        let h = self.ln3.forward(tape, p, y)?;
        let f = self.ff.forward(tape, p, h)?;
        tape.add(y, f)
    }
}

#[derive(Clone, Debug)]
pub struct HyperNet {
    pub config: HyperNetConfig,
    proj: LinearLayer,
    pos: ParamId,
    queries: ParamId,
    encoder: Vec<EncoderBlock>,
    enc_ln: LayerNormParams,
    decoder: Vec<DecoderBlock>,
    out_ln: LayerNormParams,
    head: LinearLayer,
}

impl HyperNet {
    pub fn new(store: &mut ParamStore, name: &str, config: &HyperNetConfig, rng: &mut Prng) -> Result<Self> {
        config.validate()?;
        let cfg = config;
        let proj = LinearLayer::new(store, &format!("{name}.patch"), cfg.patch_dim(), cfg.width, rng);
        let pos = store.add(
            format!("{name}.pos"),
            Tensor::from_fn(vec![cfg.data_tokens(), cfg.width], |_| 0.02 * rng.normal()),
        );
        let queries = store.add(
            format!("{name}.queries"),
            Tensor::from_fn(vec![cfg.out_tokens, cfg.width], |_| rng.normal()),
        );
        let encoder = (0..cfg.enc_depth)
            .map(|i| EncoderBlock::new(store, &format!("{name}.enc{i}"), cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let enc_ln = LayerNormParams::new(store, &format!("{name}.enc_ln"), cfg.width);
        let dec_depth = match cfg.arch {
            HyperArch::EncoderDecoder => cfg.dec_depth,
            HyperArch::EncoderOnly => 0,
        };
        let decoder = (0..dec_depth)
            .map(|i| DecoderBlock::new(store, &format!("{name}.dec{i}"), cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let out_ln = LayerNormParams::new(store, &format!("{name}.out_ln"), cfg.width);
        let head = LinearLayer::new(store, &format!("{name}.head"), cfg.width, cfg.token_dim, rng);
        Ok(Self {
            config: config.clone(),
            proj,
            pos,
            queries,
            encoder,
            enc_ln,
            decoder,
            out_ln,
            head,
        })
    }

    pub fn queries(&self) -> ParamId {
        self.queries
    }

    /// Projected patches plus positional embeddings, `[L_d, width]`.
    pub fn tokenize(&self, tape: &mut Tape, p: &Bound, pixels: &Tensor) -> Result<Var> {
        let c = &self.config;
        if pixels.shape() != [c.height * c.width_px, c.channels] {
            return Err(Error::Shape {
                op: "hypernet_tokenize",
                left: pixels.shape().to_vec(),
                right: vec![c.height * c.width_px, c.channels],
            });
        }
        let patches = tape.constant(patchify(pixels, c.height, c.width_px, c.patch_size)?);
        let x = self.proj.forward(tape, p, patches)?;
        tape.add(x, p[self.pos])
    }

    /// Runs the stacks on already-embedded data tokens and the given query
    /// tokens, returning `[L_r, token_dim]`.
    pub fn transform(&self, tape: &mut Tape, p: &Bound, data: Var, queries: Var) -> Result<Var> {
        let y = match self.config.arch {
            HyperArch::EncoderDecoder => {
                let mut x = data;
                for block in &self.encoder {
                    x = block.forward(tape, p, x)?;
                }
                let memory = self.enc_ln.forward(tape, p, x)?;
                let mut y = queries;
                for block in &self.decoder {
                    y = block.forward(tape, p, y, memory)?;
                }
                y
            }
            HyperArch::EncoderOnly => {
                let ld = tape.shape(data)[0];
                let lr = tape.shape(queries)[0];
                let mut x = tape.concat_rows(&[data, queries])?;
                for block in &self.encoder {
                    x = block.forward(tape, p, x)?;
                }
                let rows: Vec<usize> = (ld..ld + lr).collect();
                tape.gather_rows(x, &rows)?
            }
        };
        let y = self.out_ln.forward(tape, p, y)?;
        self.head.forward(tape, p, y)
    }

    /// `[h·w, c]` pixels to `[L_r, token_dim]` representation tokens.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, pixels: &Tensor) -> Result<Var> {
        let data = self.tokenize(tape, p, pixels)?;
        self.transform(tape, p, data, p[self.queries])
    }

    /// Attention-map elements of one forward according to the closed form.
    pub fn attention_cost(&self) -> u64 {
        let c = &self.config;
        crate::attention::attention_map_cost(c.arch, c.enc_depth, c.dec_depth, c.data_tokens(), c.out_tokens)
    }
}

pub fn hypernet_forward(tape: &mut Tape, p: &Bound, net: &HyperNet, pixels: &Tensor) -> Result<Var> {
    net.forward(tape, p, pixels)
}

/// Hypernetwork followed by the attention-based representation.
pub fn end_to_end_forward(
    tape: &mut Tape,
    p: &Bound,
    hyper: &HyperNet,
    anr: &crate::repr::AnrModel,
    pixels: &Tensor,
    coords: &Tensor,
) -> Result<Var> {
    if hyper.config.token_dim != anr.config.token_dim {
        return Err(Error::invalid(format!(
            "hypernetwork emits {}-dim tokens, representation expects {}",
            hyper.config.token_dim, anr.config.token_dim
        )));
    }
    let tokens = hyper.forward(tape, p, pixels)?;
    anr.forward(tape, p, tokens, coords)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(arch: HyperArch) -> HyperNetConfig {
        HyperNetConfig {
            width: 8,
            heads: 2,
            head_dim: 4,
            ff_dim: 12,
            arch,
            ..HyperNetConfig::small(8, 8, 3, 5, 6)
        }
    }

    fn image(seed: u64, n: usize) -> Tensor {
        let mut rng = Prng::new(seed);
        Tensor::from_fn(vec![n, 3], |_| rng.uniform())
    }

    #[test]
    fn sixteen_patches_for_16x16() {
        let img = image(0, 256);
        let p = patchify(&img, 16, 16, 4).unwrap();
        assert_eq!(p.shape(), &[16, 48]);
        assert_eq!(depatchify(&p, 16, 16, 4).unwrap(), img);
        assert!(patchify(&img, 16, 16, 5).is_err());
    }

    #[test]
    fn patch_order_is_row_major() {
        let img = Tensor::from_fn(vec![16, 1], |i| i as f64);
        let p = patchify(&img, 4, 4, 2).unwrap();
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(2), &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn zero_image_tokens_are_positional_embeddings() {
        let cfg = tiny(HyperArch::EncoderDecoder);
        let mut store = ParamStore::new();
        let net = HyperNet::new(&mut store, "h", &cfg, &mut Prng::new(1)).unwrap();
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let t = net.tokenize(&mut tape, &p, &Tensor::zeros(vec![64, 3])).unwrap();
        assert_eq!(tape.value(t), store.get(net.pos));
    }

    #[test]
    fn output_shape_and_cost_counter() {
        for arch in [HyperArch::EncoderDecoder, HyperArch::EncoderOnly] {
            let cfg = tiny(arch);
            let mut store = ParamStore::new();
            let net = HyperNet::new(&mut store, "h", &cfg, &mut Prng::new(1)).unwrap();
            let mut tape = Tape::new();
            let p = store.bind_frozen(&mut tape);
            let y = net.forward(&mut tape, &p, &image(2, 64)).unwrap();
            assert_eq!(tape.shape(y), &[5, 6]);
            assert_eq!(tape.attention_elements(), net.attention_cost());
        }
    }

    #[test]
    fn indivisible_extent_rejected() {
        let cfg = HyperNetConfig {
            patch_size: 3,
            ..tiny(HyperArch::EncoderDecoder)
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn identical_images_identical_tokens() {
        let cfg = tiny(HyperArch::EncoderDecoder);
        let mut store = ParamStore::new();
        let net = HyperNet::new(&mut store, "h", &cfg, &mut Prng::new(3)).unwrap();
        let img = image(4, 64);
        let run = || {
            let mut tape = Tape::new();
            let p = store.bind_frozen(&mut tape);
            let y = net.forward(&mut tape, &p, &img).unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run(), run());
    }
}
