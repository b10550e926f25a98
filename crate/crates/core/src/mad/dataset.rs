//! Dataset generation and on-disk layout.
//!
//! A dataset directory holds four files:
//!
//! * `meta.json` — config echo, sample counts, token table, format version
//! * `images.bin` — n x 28 x 28 x 3 bytes, RGB interleaved, row-major,
//!   train samples first then test samples
//! * `factors.jsonl` — one latent-factor record per sample, same order
//! * `captions.bin` — n x 8 token ids
//!
//! Every sample is generated from its own RNG stream keyed by
//! `(config.seed, sample index)`, so output is bit-identical no matter
//! how generation is scheduled, and any single sample can be regenerated
//! in isolation.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mad::digits::{DigitSource, Split};
use crate::mad::{caption, morph, LatentFactors, MadDatasetConfig, MadSample, IMG_BYTES};
use crate::{vocab, Error, Result};

/// On-disk format version written to and checked in `meta.json`.
pub const FORMAT_VERSION: u32 = 1;

/// Contents of `meta.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MadMeta {
    pub format_version: u32,
    pub n_train: usize,
    pub n_test: usize,
    pub config: MadDatasetConfig,
    pub token_table: Vec<String>,
}

/// A fully loaded dataset.
#[derive(Debug, Clone)]
pub struct MadDataset {
    pub meta: MadMeta,
    /// All images, train then test, `IMG_BYTES` bytes each.
    pub images: Vec<u8>,
    pub factors: Vec<LatentFactors>,
    pub captions: Vec<[u8; vocab::CONTEXT_LEN]>,
}

/// Borrowed view of one split.
#[derive(Debug, Clone, Copy)]
pub struct MadSplitView<'a> {
    pub images: &'a [u8],
    pub factors: &'a [LatentFactors],
    pub captions: &'a [[u8; vocab::CONTEXT_LEN]],
}

impl<'a> MadSplitView<'a> {
    pub fn n(&self) -> usize {
        self.factors.len()
    }

    /// RGB bytes of sample `i`.
    pub fn image(&self, i: usize) -> &'a [u8] {
        &self.images[i * IMG_BYTES..(i + 1) * IMG_BYTES]
    }
}

impl MadDataset {
    pub fn n(&self) -> usize {
        self.factors.len()
    }

    fn view(&self, start: usize, end: usize) -> MadSplitView<'_> {
        MadSplitView {
            images: &self.images[start * IMG_BYTES..end * IMG_BYTES],
            factors: &self.factors[start..end],
            captions: &self.captions[start..end],
        }
    }

    pub fn train(&self) -> MadSplitView<'_> {
        self.view(0, self.meta.n_train)
    }

    pub fn test(&self) -> MadSplitView<'_> {
        self.view(self.meta.n_train, self.n())
    }

    pub fn split(&self, split: Split) -> MadSplitView<'_> {
        match split {
            Split::Train => self.train(),
            Split::Test => self.test(),
        }
    }
}

/// The RNG stream for sample `index` (a global index: train samples
/// first, then test).
fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Generate the sample at global `index`. Draw order within the sample's
/// stream is fixed: latent factors, base digit image, image transforms,
/// caption.
pub fn generate_sample(
    source: &DigitSource,
    cfg: &MadDatasetConfig,
    index: usize,
) -> Result<MadSample> {
    let split = if index < cfg.n_train {
        Split::Train
    } else {
        Split::Test
    };
    let mut rng = sample_rng(cfg.seed, index as u64);
    let factors = LatentFactors::draw(&mut rng);
    let base = source.sample(factors.digit, split, &mut rng)?;
    let image = morph::render_image(&base, &factors, &mut rng)?;
    let caption = caption::compose_caption(&factors, &cfg.policy, &mut rng)?;
    Ok(MadSample {
        image,
        factors,
        caption,
    })
}

/// Generate a full dataset into `out_dir` (created if missing). Returns
/// the written metadata.
pub fn generate_dataset(cfg: &MadDatasetConfig, out_dir: &Path) -> Result<MadMeta> {
    cfg.validate()?;
    let source = DigitSource::open(&cfg.mnist_source)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let n = cfg.n_train + cfg.n_test;
    let mut images = Vec::with_capacity(n * IMG_BYTES);
    let mut factors_lines = String::new();
    let mut captions = Vec::with_capacity(n * vocab::CONTEXT_LEN);
    for i in 0..n {
        let sample = generate_sample(&source, cfg, i)?;
        images.extend_from_slice(&sample.image);
        factors_lines.push_str(&serde_json::to_string(&sample.factors).expect("serializable"));
        factors_lines.push('\n');
        captions.extend_from_slice(&sample.caption);
    }

    let meta = MadMeta {
        format_version: FORMAT_VERSION,
        n_train: cfg.n_train,
        n_test: cfg.n_test,
        config: cfg.clone(),
        token_table: vocab::WORDS.iter().map(|w| w.to_string()).collect(),
    };
    let meta_json = serde_json::to_string_pretty(&meta).expect("serializable");
    let write = |name: &str, bytes: &[u8]| -> Result<()> {
        let path = out_dir.join(name);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&path, e))
    };
    write("meta.json", format!("{meta_json}\n").as_bytes())?;
    write("images.bin", &images)?;
    write("factors.jsonl", factors_lines.as_bytes())?;
    write("captions.bin", &captions)?;
    Ok(meta)
}

/// Load a dataset directory written by [`generate_dataset`].
pub fn load_dataset(dir: &Path) -> Result<MadDataset> {
    let meta_path = dir.join("meta.json");
    let meta_bytes = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: MadMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::format(&meta_path, format!("bad metadata: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::format(
            &meta_path,
            format!(
                "format version {} unsupported (expected {FORMAT_VERSION})",
                meta.format_version
            ),
        ));
    }
    let n = meta.n_train + meta.n_test;

    let images_path = dir.join("images.bin");
    let images = fs::read(&images_path).map_err(|e| Error::io(&images_path, e))?;
    if images.len() != n * IMG_BYTES {
        return Err(Error::format(
            &images_path,
            format!(
                "payload size mismatch: {} bytes for {n} images of {IMG_BYTES}",
                images.len()
            ),
        ));
    }

    let factors_path = dir.join("factors.jsonl");
    let factors_text = fs::read_to_string(&factors_path).map_err(|e| Error::io(&factors_path, e))?;
    let factors: Vec<LatentFactors> = factors_text
        .lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line)
                .map_err(|e| Error::format(&factors_path, format!("line {}: {e}", i + 1)))
        })
        .collect::<Result<_>>()?;
    if factors.len() != n {
        return Err(Error::format(
            &factors_path,
            format!("{} factor records for {n} samples", factors.len()),
        ));
    }

    let captions_path = dir.join("captions.bin");
    let caption_bytes = fs::read(&captions_path).map_err(|e| Error::io(&captions_path, e))?;
    if caption_bytes.len() != n * vocab::CONTEXT_LEN {
        return Err(Error::format(
            &captions_path,
            format!(
                "payload size mismatch: {} bytes for {n} captions of {}",
                caption_bytes.len(),
                vocab::CONTEXT_LEN
            ),
        ));
    }
    let captions: Vec<[u8; vocab::CONTEXT_LEN]> = caption_bytes
        .chunks_exact(vocab::CONTEXT_LEN)
        .enumerate()
        .map(|(i, chunk)| {
            // Light sanity check: every caption detokenizes.
            vocab::detokenize(chunk)
                .map_err(|e| Error::format(&captions_path, format!("caption {i}: {e}")))?;
            Ok(chunk.try_into().expect("chunks_exact yields CONTEXT_LEN"))
        })
        .collect::<Result<_>>()?;

    Ok(MadDataset {
        meta,
        images,
        factors,
        captions,
    })
}

/// Write the first `count` samples of a split as PNG thumbnails named
/// `{split}_{index:05}.png`. Returns the paths written.
pub fn export_thumbnails(
    dataset: &MadDataset,
    split: Split,
    count: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let view = dataset.split(split);
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let mut paths = Vec::new();
    for i in 0..count.min(view.n()) {
        let img = image::RgbImage::from_raw(28, 28, view.image(i).to_vec())
            .expect("image buffer has exactly 28*28*3 bytes");
        let path = out_dir.join(format!("{prefix}_{i:05}.png"));
        img.save(&path)
            .map_err(|e| Error::format(&path, format!("PNG encode failed: {e}")))?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mad::{CaptionPolicy, ColorClass, Factor, ATTRIBUTE_FACTORS};

    fn quick_cfg(n_train: usize, n_test: usize, policy: CaptionPolicy, seed: u64) -> MadDatasetConfig {
        MadDatasetConfig {
            n_train,
            n_test,
            policy,
            seed,
            mnist_source: "builtin".into(),
        }
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let cfg = quick_cfg(12, 5, CaptionPolicy::InformationImbalance { k: 3 }, 7);
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        generate_dataset(&cfg, dir_a.path()).unwrap();
        generate_dataset(&cfg, dir_b.path()).unwrap();
        for name in ["meta.json", "images.bin", "factors.jsonl", "captions.bin"] {
            let a = fs::read(dir_a.path().join(name)).unwrap();
            let b = fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
        // A different seed must change the payload.
        let cfg2 = MadDatasetConfig { seed: 8, ..cfg };
        let dir_c = tempfile::tempdir().unwrap();
        generate_dataset(&cfg2, dir_c.path()).unwrap();
        assert_ne!(
            fs::read(dir_a.path().join("images.bin")).unwrap(),
            fs::read(dir_c.path().join("images.bin")).unwrap()
        );
    }

    #[test]
    fn samples_are_independent_of_batch_context() {
        // Regenerating one sample in isolation reproduces the batch
        // output exactly; this is what makes generation schedule-proof.
        let cfg = quick_cfg(8, 4, CaptionPolicy::InformationImbalance { k: 5 }, 3);
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&cfg, dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        let source = DigitSource::open("builtin").unwrap();
        for i in [0usize, 5, 9, 11] {
            let solo = generate_sample(&source, &cfg, i).unwrap();
            assert_eq!(solo.image, &ds.images[i * IMG_BYTES..(i + 1) * IMG_BYTES]);
            assert_eq!(solo.factors, ds.factors[i]);
            assert_eq!(solo.caption, ds.captions[i]);
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let cfg = quick_cfg(
            6,
            3,
            CaptionPolicy::PresenceBias {
                always_factor: Factor::Color,
            },
            11,
        );
        let dir = tempfile::tempdir().unwrap();
        let meta = generate_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(meta.n_train, 6);
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.n(), 9);
        assert_eq!(ds.train().n(), 6);
        assert_eq!(ds.test().n(), 3);
        assert_eq!(ds.meta.token_table, vocab::WORDS.to_vec());
        assert_eq!(ds.images.len(), 9 * IMG_BYTES);
        // Split views tile the dataset without overlap.
        assert_eq!(ds.test().image(0), &ds.images[6 * IMG_BYTES..7 * IMG_BYTES]);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let cfg = quick_cfg(4, 2, CaptionPolicy::InformationImbalance { k: 2 }, 0);
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&cfg, dir.path()).unwrap();

        // Truncated image payload.
        let images = dir.path().join("images.bin");
        let bytes = fs::read(&images).unwrap();
        fs::write(&images, &bytes[..bytes.len() - 1]).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("payload size mismatch"));
        fs::write(&images, &bytes).unwrap();

        // Unsupported format version.
        let meta_path = dir.path().join("meta.json");
        let mut meta: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&meta_path).unwrap()).unwrap();
        meta["format_version"] = serde_json::json!(99);
        fs::write(&meta_path, serde_json::to_string(&meta).unwrap()).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("format version"));
    }

    #[test]
    fn missing_digit_source_fails_generation() {
        let cfg = MadDatasetConfig {
            mnist_source: "/no/such/mnist".into(),
            ..quick_cfg(2, 1, CaptionPolicy::InformationImbalance { k: 0 }, 0)
        };
        assert!(generate_dataset(&cfg, tempfile::tempdir().unwrap().path()).is_err());
    }

    #[test]
    fn factor_marginals_are_uniform() {
        let n = 3000usize;
        let cfg = quick_cfg(n, 1, CaptionPolicy::InformationImbalance { k: 5 }, 42);
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&cfg, dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        let train = ds.train();
        for factor in crate::mad::ALL_FACTORS {
            let values = factor.values();
            let p = 1.0 / values.len() as f64;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            let mut counts = vec![0usize; values.len()];
            for f in train.factors {
                counts[factor.class_of(f)] += 1;
            }
            for (value, &c) in values.iter().zip(&counts) {
                assert!(
                    (c as f64 - n as f64 * p).abs() <= 3.0 * sigma,
                    "{}={value}: {c} vs expected {:.0} (sigma {sigma:.1})",
                    factor.name(),
                    n as f64 * p
                );
            }
        }
    }

    #[test]
    fn caption_statistics_match_the_imbalance_policy() {
        let n = 2400usize;
        let k = 2u8;
        let cfg = quick_cfg(n, 1, CaptionPolicy::InformationImbalance { k }, 5);
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&cfg, dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        let train = ds.train();

        let mut digit_mentions = 0usize;
        let mut attr_mentions = vec![0usize; ATTRIBUTE_FACTORS.len()];
        let mut digit_slot = vec![0usize; 1 + k as usize];
        for (f, cap) in train.factors.iter().zip(train.captions) {
            let words = vocab::detokenize(cap).unwrap();
            assert_eq!(words.len(), 1 + k as usize);
            let digit_word = Factor::Digit.word_of(f);
            if let Some(pos) = words.iter().position(|w| w == digit_word) {
                digit_mentions += 1;
                digit_slot[pos] += 1;
            }
            for (a, factor) in ATTRIBUTE_FACTORS.iter().enumerate() {
                if words.iter().any(|w| w == factor.word_of(f)) {
                    attr_mentions[a] += 1;
                }
            }
        }
        // The digit word appears in every caption under this policy.
        assert_eq!(digit_mentions, n);
        // Each attribute appears in k/5 of captions, within 3 sigma.
        let p = k as f64 / 5.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for (factor, &c) in ATTRIBUTE_FACTORS.iter().zip(&attr_mentions) {
            assert!(
                (c as f64 - n as f64 * p).abs() <= 3.0 * sigma,
                "{}: mentioned {c} times vs expected {:.0}",
                factor.name(),
                n as f64 * p
            );
        }
        // The digit's position is uniform over the content slots.
        let slot_p = 1.0 / digit_slot.len() as f64;
        let slot_sigma = (n as f64 * slot_p * (1.0 - slot_p)).sqrt();
        for (pos, &c) in digit_slot.iter().enumerate() {
            assert!(
                (c as f64 - n as f64 * slot_p).abs() <= 3.0 * slot_sigma,
                "digit in slot {pos}: {c} vs expected {:.0}",
                n as f64 * slot_p
            );
        }
    }

    #[test]
    fn presence_bias_always_factor_is_always_mentioned() {
        let n = 1500usize;
        let cfg = quick_cfg(
            n,
            1,
            CaptionPolicy::PresenceBias {
                always_factor: Factor::Color,
            },
            13,
        );
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&cfg, dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        let train = ds.train();

        let mut companions = std::collections::HashMap::new();
        for (f, cap) in train.factors.iter().zip(train.captions) {
            let words = vocab::detokenize(cap).unwrap();
            assert_eq!(words.len(), 2);
            let color_word = Factor::Color.word_of(f);
            assert!(words.iter().any(|w| w == color_word), "color word missing");
            let other = words.iter().find(|w| *w != color_word).unwrap();
            let factor = crate::mad::ALL_FACTORS
                .into_iter()
                .find(|fac| fac.word_of(f) == other.as_str())
                .unwrap();
            *companions.entry(factor.name()).or_insert(0usize) += 1;
        }
        // Companion factor uniform over the five non-color factors.
        let p = 1.0 / 5.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for name in ["digit", "thickness", "swelling", "fracture", "scale"] {
            let c = *companions.get(name).unwrap_or(&0);
            assert!(
                (c as f64 - n as f64 * p).abs() <= 3.0 * sigma,
                "companion {name}: {c}"
            );
        }
    }

    #[test]
    fn color_factor_controls_the_channels() {
        let cfg = quick_cfg(300, 1, CaptionPolicy::InformationImbalance { k: 5 }, 21);
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&cfg, dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        let train = ds.train();
        let mut reds = 0;
        for i in 0..train.n() {
            if train.factors[i].color == ColorClass::Red {
                reds += 1;
                for px in train.image(i).chunks(3) {
                    assert_eq!((px[1], px[2]), (0, 0), "red sample has G/B energy");
                }
                assert!(train.image(i).iter().any(|&b| b > 0), "red sample is blank");
            }
        }
        assert!(reds > 10, "seed produced implausibly few red samples");
    }

    #[test]
    fn thumbnails_are_valid_pngs() {
        let cfg = quick_cfg(4, 2, CaptionPolicy::InformationImbalance { k: 1 }, 2);
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&cfg, dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        let out = tempfile::tempdir().unwrap();
        let paths = export_thumbnails(&ds, Split::Test, 10, out.path()).unwrap();
        assert_eq!(paths.len(), 2, "capped at the split size");
        for p in &paths {
            let img = image::open(p).unwrap().to_rgb8();
            assert_eq!(img.dimensions(), (28, 28));
        }
        assert!(paths[0].file_name().unwrap().to_str().unwrap().starts_with("test_"));
    }
}
