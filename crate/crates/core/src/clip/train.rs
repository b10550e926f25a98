//! The training loop: shuffled mini-batches, symmetric contrastive loss,
//! AdamW with linear warmup and cosine annealing, and a clamp on the
//! learnable logit scale.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clip::backend::Real;
use crate::clip::loss::infonce_with_grads;
use crate::clip::model::{DualEncoder, EncoderCache, ModelConfig, LOGIT_SCALE_MAX};
use crate::clip::optim::{lr_at, AdamW};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs of linear learning-rate warmup before cosine annealing.
    pub warmup_epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            epochs: 200,
            warmup_epochs: 5,
            learning_rate: 5e-4,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch size and epochs must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup ({}) must be shorter than the run ({} epochs)",
                self.warmup_epochs, self.epochs
            ));
        }
        // A zero rate is allowed (it freezes the model, which is useful
        // for smoke tests); negative rates are not.
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning rate {} must be >= 0", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay {} must be >= 0", self.weight_decay));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps {} must be positive", self.eps));
        }
        Ok(())
    }
}

/// Per-epoch mean training loss.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
}

impl TrainLog {
    /// Loss of the final epoch.
    pub fn final_loss(&self) -> f64 {
        self.epoch_loss.last().copied().unwrap_or(f64::NAN)
    }
}

/// Train a fresh model on `n` image/caption pairs given as flat buffers
/// (`n * image_bytes` pixel bytes, `n * context_length` token ids).
///
/// Batches are drawn without replacement in a fresh shuffled order per
/// epoch; a trailing partial batch is dropped unless the whole set is
/// smaller than one batch.
pub fn train(
    images: &[u8],
    captions: &[u8],
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<(DualEncoder<f32>, TrainLog)> {
    mcfg.validate()?;
    tcfg.validate()?;
    let ib = mcfg.image_bytes();
    let s = mcfg.context_length;
    if images.len() % ib != 0 {
        return Err(Error::Shape(format!(
            "image buffer of {} bytes is not a multiple of {ib}",
            images.len()
        )));
    }
    let n = images.len() / ib;
    if n == 0 {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if captions.len() != n * s {
        return Err(Error::Shape(format!(
            "caption buffer holds {} ids, expected {} for {n} samples",
            captions.len(),
            n * s
        )));
    }

    let mut model = DualEncoder::<f32>::new(mcfg.clone())?;
    model.init(tcfg.seed);
    let mut opt = AdamW::new(
        model.params.len(),
        tcfg.beta1,
        tcfg.beta2,
        tcfg.eps,
        tcfg.weight_decay,
    );

    let batch = tcfg.batch_size.min(n);
    let steps_per_epoch = (n / batch).max(1);
    let total_steps = tcfg.epochs * steps_per_epoch;
    let warmup_steps = tcfg.warmup_epochs * steps_per_epoch;
    let d = mcfg.embed_dim;

    let mut img_cache = EncoderCache::new(mcfg.layers);
    let mut txt_cache = EncoderCache::new(mcfg.layers);
    let mut batch_images = vec![0u8; batch * ib];
    let mut batch_captions = vec![0u8; batch * s];
    let mut d_img = vec![0.0f32; batch * d];
    let mut d_txt = vec![0.0f32; batch * d];
    let mut order: Vec<usize> = (0..n).collect();
    let ls_range = model.logit_scale.range();
    let ls_max = LOGIT_SCALE_MAX.ln() as f32;

    let mut log = TrainLog::default();
    let mut global_step = 0usize;
    for epoch in 0..tcfg.epochs {
        // The shuffle stream is disjoint from per-sample generation
        // streams, and independent of batch size.
        let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
        rng.set_stream(1_000_000 + epoch as u64);
        shuffle(&mut order, &mut rng);

        let mut epoch_total = 0.0;
        for step in 0..steps_per_epoch {
            for (slot, &idx) in order[step * batch..(step + 1) * batch].iter().enumerate() {
                batch_images[slot * ib..(slot + 1) * ib]
                    .copy_from_slice(&images[idx * ib..(idx + 1) * ib]);
                batch_captions[slot * s..(slot + 1) * s]
                    .copy_from_slice(&captions[idx * s..(idx + 1) * s]);
            }
            model.params.zero_grads();
            model.forward_images(&batch_images, batch, &mut img_cache)?;
            model.forward_texts(&batch_captions, batch, &mut txt_cache)?;
            let ls = model.params.values[ls_range.start].to_f64();
            let out = infonce_with_grads(
                &img_cache.embeds[..batch * d],
                &txt_cache.embeds[..batch * d],
                batch,
                d,
                ls,
                &mut d_img,
                &mut d_txt,
            );
            if !out.loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became non-finite at epoch {epoch}, step {step}"
                )));
            }
            epoch_total += out.loss;
            model.params.grads[ls_range.start] = out.d_logit_scale;
            model.backward(&mut img_cache, &mut txt_cache, &d_img, &d_txt);
            let lr = lr_at(tcfg.learning_rate, global_step, warmup_steps, total_steps);
            opt.step(&mut model.params, lr);
            let v = &mut model.params.values[ls_range.start];
            if *v > ls_max {
                *v = ls_max;
            }
            global_step += 1;
        }
        log.epoch_loss.push(epoch_total / steps_per_epoch as f64);
    }
    Ok((model, log))
}

/// Fisher-Yates shuffle.
fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::Rng as _;
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
}
