//! Finite-difference verification of the manual backward pass.
//!
//! A miniature model is run in f64 so central differences are meaningful,
//! and every parameter block is probed. The checker can also sabotage one
//! term of the backward pass (the attention value-path gradient) to prove
//! it would catch a real defect.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::clip::loss::{infonce_loss, infonce_with_grads};
use crate::clip::model::{DualEncoder, EncoderCache, ModelConfig};
use crate::vocab;
use crate::Result;

/// The smallest configuration that still exercises every code path:
/// one block per tower, two heads, a 4-dimensional embedding space.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        layers: 1,
        width: 16,
        image_heads: 2,
        text_heads: 2,
        embed_dim: 4,
        ..ModelConfig::default()
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error across all probed parameters.
    pub max_rel_err: f64,
    /// How many parameters were probed.
    pub n_checked: usize,
    /// Name of the block holding the worst parameter.
    pub worst_block: String,
}

/// Central-difference step. The loss is order-1 in any single parameter,
/// so 1e-5 balances truncation against cancellation in f64.
const H: f64 = 1e-5;

/// Compare analytic parameter gradients against central differences on a
/// small batch. Probes at least `min_params` parameters, spread over
/// every block. `broken` rescales one backward term by 5% to demonstrate
/// the check's sensitivity.
pub fn grad_check(seed: u64, min_params: usize, broken: bool) -> Result<GradCheckReport> {
    let cfg = micro_config();
    let mut model = DualEncoder::<f64>::new(cfg.clone())?;
    model.init(seed);
    if broken {
        model.fault_scale_dv = 1.05;
    }

    // A small batch of synthetic inputs; images include a zero sample so
    // degenerate pixels are covered.
    let b = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut images: Vec<u8> = (0..b * cfg.image_bytes()).map(|_| rng.random()).collect();
    images[..cfg.image_bytes()].fill(0);
    let mut captions = Vec::with_capacity(b * cfg.context_length);
    for _ in 0..b {
        let mut row = vec![vocab::EOT; cfg.context_length];
        row[0] = vocab::SOT;
        row[1] = rng.random_range(0..vocab::SOT);
        row[2] = rng.random_range(0..vocab::SOT);
        captions.extend_from_slice(&row);
    }

    let d = cfg.embed_dim;
    let ls_idx = model.logit_scale.range().start;
    let mut img_cache = EncoderCache::new(cfg.layers);
    let mut txt_cache = EncoderCache::new(cfg.layers);

    // Analytic gradients.
    model.params.zero_grads();
    model.forward_images(&images, b, &mut img_cache)?;
    model.forward_texts(&captions, b, &mut txt_cache)?;
    let ls = model.params.values[ls_idx];
    let mut d_img = vec![0.0; b * d];
    let mut d_txt = vec![0.0; b * d];
    let out = infonce_with_grads(
        &img_cache.embeds[..b * d],
        &txt_cache.embeds[..b * d],
        b,
        d,
        ls,
        &mut d_img,
        &mut d_txt,
    );
    model.params.grads[ls_idx] = out.d_logit_scale;
    model.backward(&mut img_cache, &mut txt_cache, &d_img, &d_txt);
    let analytic = model.params.grads.clone();

    // Forward-only loss at the current parameters.
    let loss_at = |model: &DualEncoder<f64>,
                       img_cache: &mut EncoderCache<f64>,
                       txt_cache: &mut EncoderCache<f64>|
     -> Result<f64> {
        model.forward_images(&images, b, img_cache)?;
        model.forward_texts(&captions, b, txt_cache)?;
        Ok(infonce_loss(
            &img_cache.embeds[..b * d],
            &txt_cache.embeds[..b * d],
            b,
            d,
            model.params.values[ls_idx],
        ))
    };

    // Pick probe indices: an even spread within each block, enough blocks
    // coverage to reach min_params overall.
    let blocks = model.params.blocks().to_vec();
    let per_block = min_params.div_ceil(blocks.len()).max(2);
    let mut probes: Vec<(usize, String)> = Vec::new();
    for meta in &blocks {
        let r = meta.handle.range();
        let len = r.len();
        let take = per_block.min(len);
        for j in 0..take {
            let idx = r.start + j * len / take;
            probes.push((idx, meta.name.clone()));
        }
    }

    let mut max_rel_err = 0.0f64;
    let mut worst_block = String::new();
    for (idx, name) in &probes {
        let keep = model.params.values[*idx];
        model.params.values[*idx] = keep + H;
        let up = loss_at(&model, &mut img_cache, &mut txt_cache)?;
        model.params.values[*idx] = keep - H;
        let down = loss_at(&model, &mut img_cache, &mut txt_cache)?;
        model.params.values[*idx] = keep;
        let numeric = (up - down) / (2.0 * H);
        let a = analytic[*idx];
        if a.abs() < 1e-8 && numeric.abs() < 1e-8 {
            continue;
        }
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_block = name.clone();
        }
    }

    Ok(GradCheckReport {
        max_rel_err,
        n_checked: probes.len(),
        worst_block,
    })
}
