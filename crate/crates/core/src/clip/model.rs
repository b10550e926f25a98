//! The dual encoder: a small vision transformer over 28x28 RGB images and
//! a causal text transformer over 8-token captions, each projected into a
//! shared embedding space and L2-normalized. Forward passes record every
//! activation needed for an exact manual backward pass.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clip::backend::Real;
use crate::clip::nn;
use crate::clip::params::{slice, slice_mut, Handle, ParamStore};
use crate::{vocab, Error, Result};

/// Initial value of the learnable logit scale, ln(1/0.07).
pub const LOGIT_SCALE_INIT: f64 = 2.659_260_036_932_778;
/// The effective scale exp(logit_scale) is clamped to at most this.
pub const LOGIT_SCALE_MAX: f64 = 100.0;
/// Standard deviation for weight initialization.
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub width: usize,
    pub image_heads: usize,
    pub text_heads: usize,
    pub patch_size: usize,
    pub context_length: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub image_size: usize,
    pub channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 6,
            width: 256,
            image_heads: 4,
            text_heads: 8,
            patch_size: 7,
            context_length: 8,
            vocab_size: 28,
            embed_dim: 64,
            image_size: 28,
            channels: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.layers == 0 {
            return bad("layers must be at least 1".into());
        }
        if self.width == 0 || self.width % self.image_heads != 0 {
            return bad(format!(
                "width {} not divisible by image_heads {}",
                self.width, self.image_heads
            ));
        }
        if self.width % self.text_heads != 0 {
            return bad(format!(
                "width {} not divisible by text_heads {}",
                self.width, self.text_heads
            ));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.embed_dim < 2 {
            return bad("embed_dim must be at least 2".into());
        }
        if self.vocab_size < 3 || self.context_length < 2 {
            return bad("vocabulary needs content plus markers; context at least 2".into());
        }
        Ok(())
    }

    /// Patches per image.
    pub fn n_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Image sequence length (patches + class token).
    pub fn image_seq(&self) -> usize {
        self.n_patches() + 1
    }

    /// Flattened patch dimension.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Bytes per raw image.
    pub fn image_bytes(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }
}

/// Handles for one transformer block.
#[derive(Debug, Clone, Copy)]
pub struct BlockParams {
    pub ln1_g: Handle,
    pub ln1_b: Handle,
    pub wqkv: Handle,
    pub bqkv: Handle,
    pub wo: Handle,
    pub bo: Handle,
    pub ln2_g: Handle,
    pub ln2_b: Handle,
    pub w1: Handle,
    pub b1: Handle,
    pub w2: Handle,
    pub b2: Handle,
}

/// Input-embedding handles, per modality.
#[derive(Debug, Clone, Copy)]
pub enum EmbedParams {
    Image {
        patch_w: Handle,
        patch_b: Handle,
        cls: Handle,
    },
    Text {
        tok: Handle,
    },
}

/// All handles for one encoder tower.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub embed: EmbedParams,
    pub pos: Handle,
    /// Layer norm before the blocks (vision tower only).
    pub ln_pre: Option<(Handle, Handle)>,
    pub blocks: Vec<BlockParams>,
    /// Layer norm on the pooled representation.
    pub ln_post_g: Handle,
    pub ln_post_b: Handle,
    pub proj: Handle,
    pub heads: usize,
    pub seq: usize,
    pub causal: bool,
}

fn add_block<T: Real>(store: &mut ParamStore<T>, prefix: &str, w: usize) -> BlockParams {
    BlockParams {
        ln1_g: store.add(&format!("{prefix}.ln1.gamma"), 1, w, false),
        ln1_b: store.add(&format!("{prefix}.ln1.beta"), 1, w, false),
        wqkv: store.add(&format!("{prefix}.attn.wqkv"), 3 * w, w, true),
        bqkv: store.add(&format!("{prefix}.attn.bqkv"), 1, 3 * w, false),
        wo: store.add(&format!("{prefix}.attn.wo"), w, w, true),
        bo: store.add(&format!("{prefix}.attn.bo"), 1, w, false),
        ln2_g: store.add(&format!("{prefix}.ln2.gamma"), 1, w, false),
        ln2_b: store.add(&format!("{prefix}.ln2.beta"), 1, w, false),
        w1: store.add(&format!("{prefix}.mlp.w1"), 4 * w, w, true),
        b1: store.add(&format!("{prefix}.mlp.b1"), 1, 4 * w, false),
        w2: store.add(&format!("{prefix}.mlp.w2"), w, 4 * w, true),
        b2: store.add(&format!("{prefix}.mlp.b2"), 1, w, false),
    }
}

/// Saved layer-norm activations.
#[derive(Debug, Clone, Default)]
pub struct LnCache<T> {
    pub y: Vec<T>,
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

impl<T: Real> LnCache<T> {
    fn ensure(&mut self, rows: usize, cols: usize) {
        self.y.resize(rows * cols, T::zero());
        self.mean.resize(rows, T::zero());
        self.rstd.resize(rows, T::zero());
    }
}

/// Saved activations of one block for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct BlockCache<T> {
    pub x_in: Vec<T>,
    pub ln1: LnCache<T>,
    pub qkv: Vec<T>,
    pub probs: Vec<T>,
    pub ctx: Vec<T>,
    pub x_mid: Vec<T>,
    pub ln2: LnCache<T>,
    pub h_pre: Vec<T>,
    pub h_act: Vec<T>,
}

impl<T: Real> BlockCache<T> {
    fn ensure(&mut self, m: usize, w: usize, b: usize, heads: usize, s: usize) {
        self.x_in.resize(m * w, T::zero());
        self.ln1.ensure(m, w);
        self.qkv.resize(m * 3 * w, T::zero());
        self.probs.resize(b * heads * s * s, T::zero());
        self.ctx.resize(m * w, T::zero());
        self.x_mid.resize(m * w, T::zero());
        self.ln2.ensure(m, w);
        self.h_pre.resize(m * 4 * w, T::zero());
        self.h_act.resize(m * 4 * w, T::zero());
    }
}

/// Reusable temporaries for forward and backward passes.
#[derive(Debug, Clone, Default)]
struct Scratch<T> {
    t_w: Vec<T>,
    d_4w_a: Vec<T>,
    d_4w_b: Vec<T>,
    d_qkv: Vec<T>,
    d_ctx: Vec<T>,
    d_y: Vec<T>,
    d_scores: Vec<T>,
    d_x: Vec<T>,
    d_x0: Vec<T>,
    d_rows: Vec<T>,
    d_pooled: Vec<T>,
    d_proj_out: Vec<T>,
}

/// Every activation recorded while encoding one batch, sized lazily for
/// the largest batch seen.
#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    /// Active batch size of the last forward pass.
    pub b: usize,
    /// Image tower: flattened patches, b*n_patches x patch_dim.
    pub patches: Vec<T>,
    /// Image tower: patch projections before sequence assembly.
    pub patch_tokens: Vec<T>,
    /// Text tower: the raw token ids, b x seq.
    pub tokens: Vec<u8>,
    /// Text tower: pooled position (first EOT) per sample.
    pub eot: Vec<usize>,
    /// Embedded input sequence (before ln_pre where present), m x w.
    pub x0: Vec<T>,
    pub ln_pre: LnCache<T>,
    pub blocks: Vec<BlockCache<T>>,
    /// Working residual stream, m x w; holds the final block output after
    /// a forward pass.
    pub x: Vec<T>,
    /// Pooled rows (class token / first EOT), b x w.
    pub pooled: Vec<T>,
    pub ln_post: LnCache<T>,
    /// Projection output before normalization, b x embed_dim.
    pub proj_out: Vec<T>,
    /// Final normalized embeddings, b x embed_dim.
    pub embeds: Vec<T>,
    pub norms: Vec<T>,
    scratch: Scratch<T>,
}

impl<T: Real> EncoderCache<T> {
    pub fn new(layers: usize) -> Self {
        EncoderCache {
            b: 0,
            patches: Vec::new(),
            patch_tokens: Vec::new(),
            tokens: Vec::new(),
            eot: Vec::new(),
            x0: Vec::new(),
            ln_pre: LnCache::default(),
            blocks: (0..layers).map(|_| BlockCache::default()).collect(),
            x: Vec::new(),
            pooled: Vec::new(),
            ln_post: LnCache::default(),
            proj_out: Vec::new(),
            embeds: Vec::new(),
            norms: Vec::new(),
            scratch: Scratch::default(),
        }
    }

    fn ensure(&mut self, cfg: &ModelConfig, enc: &EncoderParams, b: usize) {
        let (s, w, d) = (enc.seq, cfg.width, cfg.embed_dim);
        let m = b * s;
        self.b = b;
        self.x0.resize(m * w, T::zero());
        self.x.resize(m * w, T::zero());
        for blk in &mut self.blocks {
            blk.ensure(m, w, b, enc.heads, s);
        }
        if enc.ln_pre.is_some() {
            self.ln_pre.ensure(m, w);
        }
        self.pooled.resize(b * w, T::zero());
        self.ln_post.ensure(b, w);
        self.proj_out.resize(b * d, T::zero());
        self.embeds.resize(b * d, T::zero());
        self.norms.resize(b, T::zero());
        let sc = &mut self.scratch;
        sc.t_w.resize(m * w, T::zero());
        sc.d_4w_a.resize(m * 4 * w, T::zero());
        sc.d_4w_b.resize(m * 4 * w, T::zero());
        sc.d_qkv.resize(m * 3 * w, T::zero());
        sc.d_ctx.resize(m * w, T::zero());
        sc.d_y.resize(m * w.max(3 * w), T::zero());
        sc.d_scores.resize(s * s, T::zero());
        sc.d_x.resize(m * w, T::zero());
        sc.d_x0.resize(m * w, T::zero());
        sc.d_pooled.resize(b * w, T::zero());
        sc.d_proj_out.resize(b * d, T::zero());
    }

    /// The final embeddings as an n x d matrix of f64.
    pub fn embeddings_f64(&self, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((self.b, d), |(i, j)| self.embeds[i * d + j].to_f64())
    }
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    b: usize,
    s: usize,
    w: usize,
    heads: usize,
    causal: bool,
}

impl Dims {
    fn m(&self) -> usize {
        self.b * self.s
    }
}

/// One pre-norm transformer block, forward. `x` holds the block input on
/// entry and the block output on return.
fn block_forward<T: Real>(
    d: Dims,
    p: &BlockParams,
    vals: &[T],
    x: &mut [T],
    c: &mut BlockCache<T>,
    attn_out: &mut [T],
) {
    let (m, w, s, heads) = (d.m(), d.w, d.s, d.heads);
    let dh = w / heads;
    let att_scale = T::from_f64(1.0 / (dh as f64).sqrt());

    c.x_in[..m * w].copy_from_slice(&x[..m * w]);
    nn::layer_norm_forward(
        &x[..m * w],
        m,
        w,
        slice(vals, p.ln1_g),
        slice(vals, p.ln1_b),
        &mut c.ln1.y[..m * w],
        &mut c.ln1.mean[..m],
        &mut c.ln1.rstd[..m],
    );
    nn::linear_forward(
        &c.ln1.y[..m * w],
        m,
        w,
        3 * w,
        slice(vals, p.wqkv),
        Some(slice(vals, p.bqkv)),
        &mut c.qkv[..m * 3 * w],
    );
    for bi in 0..d.b {
        for h in 0..heads {
            let base = bi * s * 3 * w + h * dh;
            let (q_off, k_off, v_off) = (base, base + w, base + 2 * w);
            let probs = &mut c.probs[(bi * heads + h) * s * s..][..s * s];
            T::gemm(
                false, true, s, s, dh, att_scale,
                &c.qkv[q_off..], 3 * w,
                &c.qkv[k_off..], 3 * w,
                T::zero(), probs, s,
            );
            nn::softmax_rows(probs, s, s, d.causal);
            T::gemm(
                false, false, s, dh, s, T::one(),
                probs, s,
                &c.qkv[v_off..], 3 * w,
                T::zero(), &mut c.ctx[bi * s * w + h * dh..], w,
            );
        }
    }
    nn::linear_forward(
        &c.ctx[..m * w],
        m,
        w,
        w,
        slice(vals, p.wo),
        Some(slice(vals, p.bo)),
        &mut attn_out[..m * w],
    );
    for i in 0..m * w {
        x[i] = x[i] + attn_out[i];
    }
    c.x_mid[..m * w].copy_from_slice(&x[..m * w]);

    nn::layer_norm_forward(
        &x[..m * w],
        m,
        w,
        slice(vals, p.ln2_g),
        slice(vals, p.ln2_b),
        &mut c.ln2.y[..m * w],
        &mut c.ln2.mean[..m],
        &mut c.ln2.rstd[..m],
    );
    nn::linear_forward(
        &c.ln2.y[..m * w],
        m,
        w,
        4 * w,
        slice(vals, p.w1),
        Some(slice(vals, p.b1)),
        &mut c.h_pre[..m * 4 * w],
    );
    nn::gelu_forward(&c.h_pre[..m * 4 * w], &mut c.h_act[..m * 4 * w]);
    nn::linear_forward(
        &c.h_act[..m * 4 * w],
        m,
        4 * w,
        w,
        slice(vals, p.w2),
        Some(slice(vals, p.b2)),
        &mut attn_out[..m * w],
    );
    for i in 0..m * w {
        x[i] = x[i] + attn_out[i];
    }
}

/// Backward of [`block_forward`]. `dx` holds dL/d(block output) on entry
/// and dL/d(block input) on return. `fault_scale_dv` multiplies the
/// value-path gradient and is 1 except in the gradient-check sabotage
/// fixture.
#[allow(clippy::too_many_arguments)]
fn block_backward<T: Real>(
    d: Dims,
    p: &BlockParams,
    vals: &[T],
    grads: &mut [T],
    c: &BlockCache<T>,
    sc: &mut Scratch<T>,
    dx: &mut [T],
    fault_scale_dv: T,
) {
    let (m, w, s, heads) = (d.m(), d.w, d.s, d.heads);
    let dh = w / heads;
    let att_scale = T::from_f64(1.0 / (dh as f64).sqrt());

    // MLP branch: x_out = x_mid + w2(gelu(w1(ln2(x_mid)))).
    sc.d_4w_a[..m * 4 * w].fill(T::zero());
    {
        let (dw2, db2) = (p.w2, p.b2);
        T::gemm(
            false, false, m, 4 * w, w, T::one(),
            &dx[..m * w], w,
            slice(vals, dw2), 4 * w,
            T::one(), &mut sc.d_4w_a[..m * 4 * w], 4 * w,
        );
        T::gemm(
            true, false, w, 4 * w, m, T::one(),
            &dx[..m * w], w,
            &c.h_act[..m * 4 * w], 4 * w,
            T::one(), slice_mut(grads, dw2), 4 * w,
        );
        let db = slice_mut(grads, db2);
        for r in 0..m {
            let row = &dx[r * w..(r + 1) * w];
            for cidx in 0..w {
                db[cidx] = db[cidx] + row[cidx];
            }
        }
    }
    sc.d_4w_b[..m * 4 * w].fill(T::zero());
    nn::gelu_backward(
        &c.h_pre[..m * 4 * w],
        &sc.d_4w_a[..m * 4 * w],
        &mut sc.d_4w_b[..m * 4 * w],
    );
    sc.d_y[..m * w].fill(T::zero());
    {
        let (dw1, db1) = two_slices(grads, p.w1, p.b1);
        nn::linear_backward(
            &c.ln2.y[..m * w],
            &sc.d_4w_b[..m * 4 * w],
            m,
            w,
            4 * w,
            slice(vals, p.w1),
            Some(&mut sc.d_y[..m * w]),
            dw1,
            Some(db1),
        );
    }
    // dx currently holds d(x_out) which is also the residual part of
    // d(x_mid); add the layer-norm path to complete d(x_mid).
    {
        let (dg, db) = (p.ln2_g, p.ln2_b);
        // Split the two gradient slices out of the one buffer.
        let (gslice, bslice) = two_slices(grads, dg, db);
        nn::layer_norm_backward(
            &sc.d_y[..m * w],
            &c.x_mid[..m * w],
            m,
            w,
            slice(vals, p.ln2_g),
            &c.ln2.mean[..m],
            &c.ln2.rstd[..m],
            dx,
            gslice,
            bslice,
        );
    }

    // Attention branch: x_mid = x_in + wo(attention(ln1(x_in))).
    sc.d_ctx[..m * w].fill(T::zero());
    {
        let (dwo, dbo) = two_slices(grads, p.wo, p.bo);
        nn::linear_backward(
            &c.ctx[..m * w],
            &dx[..m * w],
            m,
            w,
            w,
            slice(vals, p.wo),
            Some(&mut sc.d_ctx[..m * w]),
            dwo,
            Some(dbo),
        );
    }
    sc.d_qkv[..m * 3 * w].fill(T::zero());
    for bi in 0..d.b {
        for h in 0..heads {
            let base = bi * s * 3 * w + h * dh;
            let (q_off, k_off, v_off) = (base, base + w, base + 2 * w);
            let probs = &c.probs[(bi * heads + h) * s * s..][..s * s];
            let dctx_off = bi * s * w + h * dh;
            // d(probs) = d(ctx) @ V^T
            T::gemm(
                false, true, s, s, dh, T::one(),
                &sc.d_ctx[dctx_off..], w,
                &c.qkv[v_off..], 3 * w,
                T::zero(), &mut sc.d_scores[..s * s], s,
            );
            // dV += probs^T @ d(ctx), scaled by the sabotage knob.
            T::gemm(
                true, false, s, dh, s, fault_scale_dv,
                probs, s,
                &sc.d_ctx[dctx_off..], w,
                T::one(), &mut sc.d_qkv[v_off..], 3 * w,
            );
            // d(scores) in place over d(probs).
            for r in 0..s {
                let prow = &probs[r * s..(r + 1) * s];
                let drow = &mut sc.d_scores[r * s..(r + 1) * s];
                let mut dot = T::zero();
                for cidx in 0..s {
                    dot = dot + prow[cidx] * drow[cidx];
                }
                for cidx in 0..s {
                    drow[cidx] = prow[cidx] * (drow[cidx] - dot);
                }
            }
            // dQ += d(scores) @ K * scale; dK += d(scores)^T @ Q * scale.
            T::gemm(
                false, false, s, dh, s, att_scale,
                &sc.d_scores[..s * s], s,
                &c.qkv[k_off..], 3 * w,
                T::one(), &mut sc.d_qkv[q_off..], 3 * w,
            );
            T::gemm(
                true, false, s, dh, s, att_scale,
                &sc.d_scores[..s * s], s,
                &c.qkv[q_off..], 3 * w,
                T::one(), &mut sc.d_qkv[k_off..], 3 * w,
            );
        }
    }
    sc.d_y[..m * w].fill(T::zero());
    {
        let (dwqkv, dbqkv) = two_slices(grads, p.wqkv, p.bqkv);
        nn::linear_backward(
            &c.ln1.y[..m * w],
            &sc.d_qkv[..m * 3 * w],
            m,
            w,
            3 * w,
            slice(vals, p.wqkv),
            Some(&mut sc.d_y[..m * w]),
            dwqkv,
            Some(dbqkv),
        );
    }
    // dx currently holds d(x_mid); add the ln1 path to finish d(x_in).
    {
        let (gslice, bslice) = two_slices(grads, p.ln1_g, p.ln1_b);
        nn::layer_norm_backward(
            &sc.d_y[..m * w],
            &c.x_in[..m * w],
            m,
            w,
            slice(vals, p.ln1_g),
            &c.ln1.mean[..m],
            &c.ln1.rstd[..m],
            dx,
            gslice,
            bslice,
        );
    }
}

/// Two disjoint mutable views into one buffer (panics on overlap).
fn two_slices<T>(buf: &mut [T], a: Handle, b: Handle) -> (&mut [T], &mut [T]) {
    assert!(a.off + a.len() <= b.off || b.off + b.len() <= a.off);
    if a.off < b.off {
        let (lo, hi) = buf.split_at_mut(b.off);
        (&mut lo[a.off..a.off + a.len()], &mut hi[..b.len()])
    } else {
        let (lo, hi) = buf.split_at_mut(a.off);
        let (bs, as_) = (&mut lo[b.off..b.off + b.len()], &mut hi[..a.len()]);
        (as_, bs)
    }
}

#[derive(Debug, Clone)]
pub struct DualEncoder<T: Real> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    pub img: EncoderParams,
    pub txt: EncoderParams,
    pub logit_scale: Handle,
    /// Gradient-check sabotage knob: multiplies the attention value-path
    /// gradient. 1.0 in all real use.
    pub fault_scale_dv: T,
}

impl<T: Real> DualEncoder<T> {
    /// Build a zero-initialized model (call [`DualEncoder::init`] before
    /// use).
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let mut store = ParamStore::new();

        let img = EncoderParams {
            embed: EmbedParams::Image {
                patch_w: store.add("img.patch.w", w, cfg.patch_dim(), true),
                patch_b: store.add("img.patch.b", 1, w, false),
                cls: store.add("img.cls", 1, w, true),
            },
            pos: store.add("img.pos", cfg.image_seq(), w, true),
            ln_pre: Some((
                store.add("img.ln_pre.gamma", 1, w, false),
                store.add("img.ln_pre.beta", 1, w, false),
            )),
            blocks: (0..cfg.layers)
                .map(|i| add_block(&mut store, &format!("img.b{i}"), w))
                .collect(),
            ln_post_g: store.add("img.ln_post.gamma", 1, w, false),
            ln_post_b: store.add("img.ln_post.beta", 1, w, false),
            proj: store.add("img.proj", cfg.embed_dim, w, true),
            heads: cfg.image_heads,
            seq: cfg.image_seq(),
            causal: false,
        };
        let txt = EncoderParams {
            embed: EmbedParams::Text {
                tok: store.add("txt.tok", cfg.vocab_size, w, true),
            },
            pos: store.add("txt.pos", cfg.context_length, w, true),
            ln_pre: None,
            blocks: (0..cfg.layers)
                .map(|i| add_block(&mut store, &format!("txt.b{i}"), w))
                .collect(),
            ln_post_g: store.add("txt.ln_final.gamma", 1, w, false),
            ln_post_b: store.add("txt.ln_final.beta", 1, w, false),
            proj: store.add("txt.proj", cfg.embed_dim, w, true),
            heads: cfg.text_heads,
            seq: cfg.context_length,
            causal: true,
        };
        let logit_scale = store.add("logit_scale", 1, 1, false);

        Ok(DualEncoder {
            cfg,
            params: store,
            img,
            txt,
            logit_scale,
            fault_scale_dv: T::one(),
        })
    }

    /// Randomize parameters: N(0, 0.02) for matrices and embeddings, ones
    /// for layer-norm gains, zeros for biases, ln(1/0.07) for the logit
    /// scale. Deterministic in `seed`.
    pub fn init(&mut self, seed: u64) {
        use rand::Rng as _;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::Normal::new(0.0f64, INIT_STD).expect("valid std");
        let metas: Vec<_> = self.params.blocks().to_vec();
        for meta in metas {
            let h = meta.handle;
            if meta.name == "logit_scale" {
                self.params.value_mut(h)[0] = T::from_f64(LOGIT_SCALE_INIT);
            } else if meta.name.ends_with(".gamma") {
                self.params.value_mut(h).fill(T::one());
            } else if meta.decay {
                for v in self.params.value_mut(h) {
                    *v = T::from_f64(rng.sample(normal));
                }
            } else {
                self.params.value_mut(h).fill(T::zero());
            }
        }
    }

    /// Effective similarity scale exp(logit_scale), clamped.
    pub fn scale(&self) -> f64 {
        self.params.value(self.logit_scale)[0]
            .to_f64()
            .exp()
            .min(LOGIT_SCALE_MAX)
    }

    /// Encode a batch of raw images (b x image_bytes, u8) into the cache.
    pub fn forward_images(&self, images: &[u8], b: usize, cache: &mut EncoderCache<T>) -> Result<()> {
        let cfg = &self.cfg;
        if b == 0 {
            return Err(Error::InvalidArgument("empty image batch".into()));
        }
        if images.len() != b * cfg.image_bytes() {
            return Err(Error::Shape(format!(
                "image batch is {} bytes, expected {} for {b} samples",
                images.len(),
                b * cfg.image_bytes()
            )));
        }
        cache.ensure(cfg, &self.img, b);
        let (n_patches, pd, w, s) = (cfg.n_patches(), cfg.patch_dim(), cfg.width, self.img.seq);
        let side = cfg.image_size / cfg.patch_size;
        let (ps, ch, isz) = (cfg.patch_size, cfg.channels, cfg.image_size);
        cache.patches.resize(b * n_patches * pd, T::zero());
        cache.patch_tokens.resize(b * n_patches * w, T::zero());
        let inv255 = T::from_f64(1.0 / 255.0);
        for bi in 0..b {
            let img = &images[bi * cfg.image_bytes()..];
            for py in 0..side {
                for px in 0..side {
                    let patch = &mut cache.patches
                        [(bi * n_patches + py * side + px) * pd..][..pd];
                    for y in 0..ps {
                        for x in 0..ps {
                            for c in 0..ch {
                                patch[(y * ps + x) * ch + c] = T::from_f64(
                                    img[((py * ps + y) * isz + (px * ps + x)) * ch + c] as f64,
                                ) * inv255;
                            }
                        }
                    }
                }
            }
        }
        let vals = &self.params.values;
        let EmbedParams::Image { patch_w, patch_b, cls } = self.img.embed else {
            unreachable!("image tower has image embeddings");
        };
        nn::linear_forward(
            &cache.patches[..b * n_patches * pd],
            b * n_patches,
            pd,
            w,
            slice(vals, patch_w),
            Some(slice(vals, patch_b)),
            &mut cache.patch_tokens[..b * n_patches * w],
        );
        let pos = slice(vals, self.img.pos);
        let cls_v = slice(vals, cls);
        for bi in 0..b {
            let x0 = &mut cache.x0[bi * s * w..];
            for c in 0..w {
                x0[c] = cls_v[c] + pos[c];
            }
            for p in 0..n_patches {
                let tok = &cache.patch_tokens[(bi * n_patches + p) * w..][..w];
                let row = &mut x0[(1 + p) * w..][..w];
                for c in 0..w {
                    row[c] = tok[c] + pos[(1 + p) * w + c];
                }
            }
        }
        self.run_tower(&self.img, b, cache, |bi, _| bi * s);
        Ok(())
    }

    /// Encode a batch of token sequences (b x context_length ids).
    pub fn forward_texts(&self, tokens: &[u8], b: usize, cache: &mut EncoderCache<T>) -> Result<()> {
        let cfg = &self.cfg;
        let s = cfg.context_length;
        if b == 0 {
            return Err(Error::InvalidArgument("empty text batch".into()));
        }
        if tokens.len() != b * s {
            return Err(Error::Shape(format!(
                "token batch is {} ids, expected {} for {b} samples",
                tokens.len(),
                b * s
            )));
        }
        cache.ensure(cfg, &self.txt, b);
        cache.tokens.resize(b * s, 0);
        cache.tokens.copy_from_slice(tokens);
        cache.eot.resize(b, 0);
        let w = cfg.width;
        let vals = &self.params.values;
        let EmbedParams::Text { tok } = self.txt.embed else {
            unreachable!("text tower has token embeddings");
        };
        let emb = slice(vals, tok);
        let pos = slice(vals, self.txt.pos);
        for bi in 0..b {
            let mut eot = None;
            for t in 0..s {
                let id = tokens[bi * s + t] as usize;
                if id >= cfg.vocab_size {
                    return Err(Error::InvalidArgument(format!(
                        "token id {id} out of vocabulary (size {})",
                        cfg.vocab_size
                    )));
                }
                if eot.is_none() && id == vocab::EOT as usize {
                    eot = Some(t);
                }
                let row = &mut cache.x0[(bi * s + t) * w..][..w];
                for c in 0..w {
                    row[c] = emb[id * w + c] + pos[t * w + c];
                }
            }
            cache.eot[bi] = eot.ok_or_else(|| {
                Error::InvalidArgument(format!("caption {bi} has no end-of-text token"))
            })?;
        }
        let eots = cache.eot.clone();
        self.run_tower(&self.txt, b, cache, move |bi, s| bi * s + eots[bi]);
        Ok(())
    }

    /// Shared tower body: optional ln_pre, blocks, pooling, ln_post,
    /// projection, normalization. `pool_row` maps a sample index to the
    /// row of the residual stream that gets pooled.
    fn run_tower(
        &self,
        enc: &EncoderParams,
        b: usize,
        cache: &mut EncoderCache<T>,
        pool_row: impl Fn(usize, usize) -> usize,
    ) {
        let (w, d, s) = (self.cfg.width, self.cfg.embed_dim, enc.seq);
        let m = b * s;
        let vals = &self.params.values;
        if let Some((g, bta)) = enc.ln_pre {
            nn::layer_norm_forward(
                &cache.x0[..m * w],
                m,
                w,
                slice(vals, g),
                slice(vals, bta),
                &mut cache.ln_pre.y[..m * w],
                &mut cache.ln_pre.mean[..m],
                &mut cache.ln_pre.rstd[..m],
            );
            cache.x[..m * w].copy_from_slice(&cache.ln_pre.y[..m * w]);
        } else {
            cache.x[..m * w].copy_from_slice(&cache.x0[..m * w]);
        }
        let dims = Dims {
            b,
            s,
            w,
            heads: enc.heads,
            causal: enc.causal,
        };
        for (p, c) in enc.blocks.iter().zip(cache.blocks.iter_mut()) {
            block_forward(dims, p, vals, &mut cache.x[..m * w], c, &mut cache.scratch.t_w);
        }
        for bi in 0..b {
            let row = pool_row(bi, s);
            cache.pooled[bi * w..(bi + 1) * w].copy_from_slice(&cache.x[row * w..(row + 1) * w]);
        }
        nn::layer_norm_forward(
            &cache.pooled[..b * w],
            b,
            w,
            slice(vals, enc.ln_post_g),
            slice(vals, enc.ln_post_b),
            &mut cache.ln_post.y[..b * w],
            &mut cache.ln_post.mean[..b],
            &mut cache.ln_post.rstd[..b],
        );
        nn::linear_forward(
            &cache.ln_post.y[..b * w],
            b,
            w,
            d,
            slice(vals, enc.proj),
            None,
            &mut cache.proj_out[..b * d],
        );
        cache.embeds[..b * d].copy_from_slice(&cache.proj_out[..b * d]);
        let norms = nn::normalize_rows_inplace(&mut cache.embeds[..b * d], b, d);
        for (dst, src) in cache.norms.iter_mut().zip(norms) {
            *dst = src;
        }
    }

    /// Accumulate parameter gradients for both towers given the loss
    /// gradients w.r.t. the normalized embeddings. Call
    /// `params.zero_grads()` first (the trainer owns gradient zeroing so
    /// the loss can also write the logit-scale gradient).
    pub fn backward(
        &mut self,
        img_cache: &mut EncoderCache<T>,
        txt_cache: &mut EncoderCache<T>,
        d_img: &[T],
        d_txt: &[T],
    ) {
        let DualEncoder {
            cfg,
            params,
            img,
            txt,
            fault_scale_dv,
            ..
        } = self;
        let ParamStore { values, grads, .. } = params;
        tower_backward(cfg, img, values, grads, img_cache, d_img, *fault_scale_dv);
        tower_backward(cfg, txt, values, grads, txt_cache, d_txt, *fault_scale_dv);
    }

    /// Encode raw images in chunks; returns n x embed_dim f64 embeddings.
    pub fn encode_images(&self, images: &[u8]) -> Result<Array2<f64>> {
        let bytes = self.cfg.image_bytes();
        if images.len() % bytes != 0 {
            return Err(Error::Shape(format!(
                "image buffer of {} bytes is not a multiple of {bytes}",
                images.len()
            )));
        }
        let n = images.len() / bytes;
        let d = self.cfg.embed_dim;
        let mut out = Array2::zeros((n, d));
        let mut cache = EncoderCache::new(self.cfg.layers);
        let chunk = 256usize;
        let mut row = 0;
        for start in (0..n).step_by(chunk) {
            let b = chunk.min(n - start);
            self.forward_images(&images[start * bytes..(start + b) * bytes], b, &mut cache)?;
            for i in 0..b {
                for j in 0..d {
                    out[(row + i, j)] = cache.embeds[i * d + j].to_f64();
                }
            }
            row += b;
        }
        Ok(out)
    }

    /// Encode token sequences in chunks; returns n x embed_dim f64.
    pub fn encode_texts(&self, tokens: &[u8]) -> Result<Array2<f64>> {
        let s = self.cfg.context_length;
        if tokens.len() % s != 0 {
            return Err(Error::Shape(format!(
                "token buffer of {} ids is not a multiple of {s}",
                tokens.len()
            )));
        }
        let n = tokens.len() / s;
        let d = self.cfg.embed_dim;
        let mut out = Array2::zeros((n, d));
        let mut cache = EncoderCache::new(self.cfg.layers);
        let chunk = 512usize;
        let mut row = 0;
        for start in (0..n).step_by(chunk) {
            let b = chunk.min(n - start);
            self.forward_texts(&tokens[start * s..(start + b) * s], b, &mut cache)?;
            for i in 0..b {
                for j in 0..d {
                    out[(row + i, j)] = cache.embeds[i * d + j].to_f64();
                }
            }
            row += b;
        }
        Ok(out)
    }
}

/// Backward through one tower, mirroring [`DualEncoder::run_tower`] and
/// the input embedding.
fn tower_backward<T: Real>(
    cfg: &ModelConfig,
    enc: &EncoderParams,
    vals: &[T],
    grads: &mut [T],
    cache: &mut EncoderCache<T>,
    d_embeds: &[T],
    fault_scale_dv: T,
) {
    let (b, w, d, s) = (cache.b, cfg.width, cfg.embed_dim, enc.seq);
    let m = b * s;
    // Split the temporaries off the cache so saved activations stay
    // borrowable; the residual gradient buffers become owned locals
    // because they are live across block_backward calls that also need
    // the scratch.
    let mut scratch = std::mem::take(&mut cache.scratch);
    let mut d_x = std::mem::take(&mut scratch.d_x);
    let mut d_x0_buf = std::mem::take(&mut scratch.d_x0);
    d_x.resize(m * w, T::zero());
    d_x.fill(T::zero());

    scratch.d_proj_out[..b * d].fill(T::zero());
    nn::normalize_rows_backward(
        &cache.embeds[..b * d],
        &cache.norms[..b],
        d_embeds,
        b,
        d,
        &mut scratch.d_proj_out[..b * d],
    );
    scratch.d_pooled[..b * w].fill(T::zero());
    // d(ln_post.y) via the projection; reuse t_w's head as the buffer.
    scratch.t_w[..b * w].fill(T::zero());
    nn::linear_backward(
        &cache.ln_post.y[..b * w],
        &scratch.d_proj_out[..b * d],
        b,
        w,
        d,
        slice(vals, enc.proj),
        Some(&mut scratch.t_w[..b * w]),
        slice_mut(grads, enc.proj),
        None,
    );
    {
        let (g, bta) = two_slices(grads, enc.ln_post_g, enc.ln_post_b);
        nn::layer_norm_backward(
            &scratch.t_w[..b * w],
            &cache.pooled[..b * w],
            b,
            w,
            slice(vals, enc.ln_post_g),
            &cache.ln_post.mean[..b],
            &cache.ln_post.rstd[..b],
            &mut scratch.d_pooled[..b * w],
            g,
            bta,
        );
    }
    for bi in 0..b {
        let row = if enc.causal {
            bi * s + cache.eot[bi]
        } else {
            bi * s
        };
        d_x[row * w..(row + 1) * w].copy_from_slice(&scratch.d_pooled[bi * w..(bi + 1) * w]);
    }
    let dims = Dims {
        b,
        s,
        w,
        heads: enc.heads,
        causal: enc.causal,
    };
    for (p, c) in enc.blocks.iter().zip(cache.blocks.iter()).rev() {
        block_backward(
            dims,
            p,
            vals,
            grads,
            c,
            &mut scratch,
            &mut d_x[..m * w],
            fault_scale_dv,
        );
    }
    let d_x0: &[T] = if let Some((g, beta)) = enc.ln_pre {
        d_x0_buf.resize(m * w, T::zero());
        d_x0_buf.fill(T::zero());
        let (gs, bs) = two_slices(grads, g, beta);
        nn::layer_norm_backward(
            &d_x[..m * w],
            &cache.x0[..m * w],
            m,
            w,
            slice(vals, g),
            &cache.ln_pre.mean[..m],
            &cache.ln_pre.rstd[..m],
            &mut d_x0_buf[..m * w],
            gs,
            bs,
        );
        &d_x0_buf[..m * w]
    } else {
        &d_x[..m * w]
    };

    match enc.embed {
        EmbedParams::Image { patch_w, patch_b, cls } => {
            let n_patches = cfg.n_patches();
            let pd = cfg.patch_dim();
            let dpos = slice_mut(grads, enc.pos);
            // d_rows doubles as the patch-token gradient buffer.
            scratch.d_rows.resize(b * n_patches * w, T::zero());
            scratch.d_rows.fill(T::zero());
            for bi in 0..b {
                for t in 0..s {
                    let row = &d_x0[(bi * s + t) * w..][..w];
                    for c in 0..w {
                        dpos[t * w + c] = dpos[t * w + c] + row[c];
                    }
                    if t > 0 {
                        let dst = &mut scratch.d_rows[(bi * n_patches + t - 1) * w..][..w];
                        for c in 0..w {
                            dst[c] = dst[c] + row[c];
                        }
                    }
                }
            }
            {
                let dcls = slice_mut(grads, cls);
                for bi in 0..b {
                    let row = &d_x0[bi * s * w..][..w];
                    for c in 0..w {
                        dcls[c] = dcls[c] + row[c];
                    }
                }
            }
            let (dw, db) = two_slices(grads, patch_w, patch_b);
            nn::linear_backward(
                &cache.patches[..b * n_patches * pd],
                &scratch.d_rows[..b * n_patches * w],
                b * n_patches,
                pd,
                w,
                slice(vals, patch_w),
                None,
                dw,
                Some(db),
            );
        }
        EmbedParams::Text { tok } => {
            let (dtok, dpos) = two_slices(grads, tok, enc.pos);
            for bi in 0..b {
                for t in 0..s {
                    let id = cache.tokens[bi * s + t] as usize;
                    let row = &d_x0[(bi * s + t) * w..][..w];
                    for c in 0..w {
                        dtok[id * w + c] = dtok[id * w + c] + row[c];
                        dpos[t * w + c] = dpos[t * w + c] + row[c];
                    }
                }
            }
        }
    }
    scratch.d_x = d_x;
    scratch.d_x0 = d_x0_buf;
    cache.scratch = scratch;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            width: 32,
            image_heads: 4,
            text_heads: 4,
            embed_dim: 8,
            ..ModelConfig::default()
        }
    }

    fn random_images(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * cfg.image_bytes()).map(|_| rng.random()).collect()
    }

    fn random_texts(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n * cfg.context_length);
        for _ in 0..n {
            let mut row = vec![vocab::EOT; cfg.context_length];
            row[0] = vocab::SOT;
            row[1] = rng.random_range(0..vocab::SOT);
            row[2] = rng.random_range(0..vocab::SOT);
            out.extend_from_slice(&row);
        }
        out
    }

    fn model(seed: u64) -> DualEncoder<f32> {
        let mut m = DualEncoder::new(small_cfg()).unwrap();
        m.init(seed);
        m
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let m = model(7);
        let imgs = m.encode_images(&random_images(&m.cfg, 9, 1)).unwrap();
        let txts = m.encode_texts(&random_texts(&m.cfg, 9, 2)).unwrap();
        for e in [imgs, txts] {
            for row in e.rows() {
                let norm = row.dot(&row).sqrt();
                assert!((norm - 1.0).abs() < 1e-5, "norm {norm}");
            }
        }
    }

    #[test]
    fn encoding_is_independent_of_batch_grouping() {
        let m = model(3);
        let images = random_images(&m.cfg, 7, 5);
        let whole = m.encode_images(&images).unwrap();
        let bytes = m.cfg.image_bytes();
        let front = m.encode_images(&images[..3 * bytes]).unwrap();
        let back = m.encode_images(&images[3 * bytes..]).unwrap();
        for i in 0..7 {
            let part = if i < 3 { front.row(i) } else { back.row(i - 3) };
            for j in 0..m.cfg.embed_dim {
                assert!(
                    (whole[(i, j)] - part[j]).abs() < 1e-5,
                    "sample {i} dim {j} differs across batch splits"
                );
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let (a, b, c) = (model(11), model(11), model(12));
        assert_eq!(a.params.values, b.params.values);
        assert_ne!(a.params.values, c.params.values);
        let images = random_images(&a.cfg, 3, 9);
        assert_eq!(
            a.encode_images(&images).unwrap(),
            b.encode_images(&images).unwrap()
        );
    }

    #[test]
    fn zero_images_encode_to_finite_unit_vectors() {
        let m = model(4);
        let images = vec![0u8; 2 * m.cfg.image_bytes()];
        let e = m.encode_images(&images).unwrap();
        for v in e.iter() {
            assert!(v.is_finite());
        }
        for row in e.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn text_pooling_reads_the_first_eot_row() {
        let m = model(15);
        let s = m.cfg.context_length;
        // Identical up to the first EOT at position 3; one padded with
        // EOT, the other with arbitrary content tokens. Causal attention
        // means rows after the pooled one cannot influence it.
        let mut a = vec![vocab::EOT; s];
        a[0] = vocab::SOT;
        a[1] = 4;
        a[2] = 17;
        let mut b = a.clone();
        b[4] = 9;
        b[5] = 21;
        b[6] = 2;
        let ea = m.encode_texts(&a).unwrap();
        let eb = m.encode_texts(&b).unwrap();
        assert_eq!(ea, eb);

        // Changing a token before the first EOT must change the embedding.
        let mut c = a.clone();
        c[1] = 5;
        let ec = m.encode_texts(&c).unwrap();
        assert_ne!(ea, ec);
    }

    #[test]
    fn invalid_token_streams_are_rejected() {
        let m = model(1);
        let s = m.cfg.context_length;
        let mut cache = EncoderCache::new(m.cfg.layers);

        let mut no_eot = vec![0u8; s];
        no_eot[0] = vocab::SOT;
        let err = m.forward_texts(&no_eot, 1, &mut cache).unwrap_err();
        assert!(err.to_string().contains("end-of-text"), "{err}");

        let mut out_of_vocab = vec![vocab::EOT; s];
        out_of_vocab[1] = 99;
        let err = m.forward_texts(&out_of_vocab, 1, &mut cache).unwrap_err();
        assert!(err.to_string().contains("out of vocabulary"), "{err}");

        let err = m.forward_texts(&vec![vocab::EOT; s], 0, &mut cache).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn image_batch_shape_is_checked() {
        let m = model(1);
        let mut cache = EncoderCache::new(m.cfg.layers);
        let err = m
            .forward_images(&vec![0u8; 10], 1, &mut cache)
            .unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn logit_scale_starts_at_inverse_temperature_and_clamps() {
        let mut m = model(2);
        // The parameter is stored in f32, so allow single-precision slack.
        assert!((m.scale() - 1.0 / 0.07).abs() < 1e-4);
        m.params.value_mut(m.logit_scale)[0] = 10.0;
        assert_eq!(m.scale(), 100.0);
    }

    #[test]
    fn default_config_matches_published_shape() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.image_seq(), 17);
        assert_eq!(cfg.patch_dim(), 147);
        assert_eq!(cfg.image_bytes(), 2352);
        // Text tower narrower heads, image tower wider: 256/4 and 256/8.
        assert_eq!(cfg.width / cfg.image_heads, 64);
        assert_eq!(cfg.width / cfg.text_heads, 32);
    }
}
