//! MAD: a controllable synthetic image-caption dataset. Digit images are
//! transformed by five latent factors (stroke thickness, swelling,
//! fracture, scale, color) and paired with token captions that name the
//! digit and a configurable subset of the factors.
//!
//! Submodules: [`digits`] supplies base digit images (a procedural
//! built-in corpus or real MNIST IDX files), [`morph`] applies the factor
//! transforms, [`caption`] composes token captions, and [`dataset`]
//! generates/loads the on-disk dataset.

pub mod caption;
pub mod dataset;
pub mod digits;
pub mod morph;

pub use caption::compose_caption;
pub use dataset::{
    export_thumbnails, generate_dataset, load_dataset, MadDataset, MadMeta, MadSplitView,
};
pub use digits::DigitSource;

use serde::{Deserialize, Serialize};

use crate::store::{EmbeddingSet, GroupIndex};
use crate::{vocab, Error, Result};

/// Image side length in pixels.
pub const IMG_SIZE: usize = 28;
/// Bytes per RGB image.
pub const IMG_BYTES: usize = IMG_SIZE * IMG_SIZE * 3;

/// Stroke thickness factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Thickness {
    #[serde(rename = "thickening")]
    Thickening,
    #[serde(rename = "thinning")]
    Thinning,
    #[serde(rename = "no thickthinning")]
    NoThickthinning,
}

/// Local radial swelling factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Swelling {
    #[serde(rename = "swelling")]
    Swelling,
    #[serde(rename = "no swelling")]
    NoSwelling,
}

/// Stroke fracture factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fracture {
    #[serde(rename = "fracture")]
    Fracture,
    #[serde(rename = "no fracture")]
    NoFracture,
}

/// Content scale factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScaleClass {
    #[serde(rename = "large")]
    Large,
    #[serde(rename = "small")]
    Small,
}

/// Color factor (channel mask applied to the grayscale intensity).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorClass {
    Gray,
    Red,
    Green,
    Blue,
    Cyan,
    Magenta,
    Yellow,
}

/// The full latent description of one sample. Every factor is always set
/// and always affects the image, whether or not the caption mentions it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentFactors {
    pub digit: u8,
    pub thickness: Thickness,
    pub swelling: Swelling,
    pub fracture: Fracture,
    pub scale: ScaleClass,
    pub color: ColorClass,
}

/// One of the six caption-able factors, digit included.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Factor {
    Digit,
    Thickness,
    Swelling,
    Fracture,
    Scale,
    Color,
}

/// The five attribute factors (everything but the digit), in fixed order.
pub const ATTRIBUTE_FACTORS: [Factor; 5] = [
    Factor::Thickness,
    Factor::Swelling,
    Factor::Fracture,
    Factor::Scale,
    Factor::Color,
];

/// All six factors, digit first.
pub const ALL_FACTORS: [Factor; 6] = [
    Factor::Digit,
    Factor::Thickness,
    Factor::Swelling,
    Factor::Fracture,
    Factor::Scale,
    Factor::Color,
];

impl Factor {
    /// Factor name as used in configs and CLI flags.
    pub fn name(self) -> &'static str {
        match self {
            Factor::Digit => "digit",
            Factor::Thickness => "thickness",
            Factor::Swelling => "swelling",
            Factor::Fracture => "fracture",
            Factor::Scale => "scale",
            Factor::Color => "color",
        }
    }

    /// Parse a factor name.
    pub fn from_name(name: &str) -> Result<Factor> {
        ALL_FACTORS
            .into_iter()
            .find(|f| f.name() == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown factor {name:?}")))
    }

    /// This factor's value words, in canonical (class-index) order.
    pub fn values(self) -> &'static [&'static str] {
        match self {
            Factor::Digit => &vocab::WORDS[0..10],
            Factor::Thickness => &["thickening", "thinning", "no thickthinning"],
            Factor::Swelling => &["swelling", "no swelling"],
            Factor::Fracture => &["fracture", "no fracture"],
            Factor::Scale => &["large", "small"],
            Factor::Color => &["gray", "red", "green", "blue", "cyan", "magenta", "yellow"],
        }
    }

    /// The word this factor takes in `factors`.
    pub fn word_of(self, factors: &LatentFactors) -> &'static str {
        match self {
            Factor::Digit => vocab::WORDS[factors.digit as usize],
            Factor::Thickness => match factors.thickness {
                Thickness::Thickening => "thickening",
                Thickness::Thinning => "thinning",
                Thickness::NoThickthinning => "no thickthinning",
            },
            Factor::Swelling => match factors.swelling {
                Swelling::Swelling => "swelling",
                Swelling::NoSwelling => "no swelling",
            },
            Factor::Fracture => match factors.fracture {
                Fracture::Fracture => "fracture",
                Fracture::NoFracture => "no fracture",
            },
            Factor::Scale => match factors.scale {
                ScaleClass::Large => "large",
                ScaleClass::Small => "small",
            },
            Factor::Color => match factors.color {
                ColorClass::Gray => "gray",
                ColorClass::Red => "red",
                ColorClass::Green => "green",
                ColorClass::Blue => "blue",
                ColorClass::Cyan => "cyan",
                ColorClass::Magenta => "magenta",
                ColorClass::Yellow => "yellow",
            },
        }
    }

    /// Index of `factors`' value within [`Factor::values`].
    pub fn class_of(self, factors: &LatentFactors) -> usize {
        if self == Factor::Digit {
            return factors.digit as usize;
        }
        let word = self.word_of(factors);
        self.values()
            .iter()
            .position(|w| *w == word)
            .expect("factor words are drawn from the value table")
    }
}

impl LatentFactors {
    /// Draw one value per factor uniformly at random, digit first.
    pub fn draw(rng: &mut impl rand::Rng) -> LatentFactors {
        LatentFactors {
            digit: rng.random_range(0..10),
            thickness: [
                Thickness::Thickening,
                Thickness::Thinning,
                Thickness::NoThickthinning,
            ][rng.random_range(0..3)],
            swelling: [Swelling::Swelling, Swelling::NoSwelling][rng.random_range(0..2)],
            fracture: [Fracture::Fracture, Fracture::NoFracture][rng.random_range(0..2)],
            scale: [ScaleClass::Large, ScaleClass::Small][rng.random_range(0..2)],
            color: [
                ColorClass::Gray,
                ColorClass::Red,
                ColorClass::Green,
                ColorClass::Blue,
                ColorClass::Cyan,
                ColorClass::Magenta,
                ColorClass::Yellow,
            ][rng.random_range(0..7)],
        }
    }
}

/// What goes into a caption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CaptionPolicy {
    /// The digit word plus a uniformly random size-k subset of the five
    /// attribute words (the information-imbalance axis).
    InformationImbalance { k: u8 },
    /// One fixed factor word that is always present plus exactly one
    /// uniformly random other factor word (digit counts as a factor).
    PresenceBias { always_factor: Factor },
}

impl CaptionPolicy {
    pub fn validate(&self) -> Result<()> {
        if let CaptionPolicy::InformationImbalance { k } = self {
            if *k > 5 {
                return Err(Error::InvalidArgument(format!(
                    "k = {k} attribute words requested but only 5 exist"
                )));
            }
        }
        Ok(())
    }
}

/// One generated sample.
#[derive(Debug, Clone)]
pub struct MadSample {
    /// 28x28 RGB, row-major, channel-interleaved.
    pub image: Vec<u8>,
    pub factors: LatentFactors,
    pub caption: [u8; vocab::CONTEXT_LEN],
}

/// Everything [`generate_dataset`](dataset::generate_dataset) needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MadDatasetConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub policy: CaptionPolicy,
    pub seed: u64,
    /// `"builtin"` for the procedural digit corpus, otherwise a directory
    /// holding the four MNIST IDX files.
    pub mnist_source: String,
}

impl Default for MadDatasetConfig {
    fn default() -> Self {
        MadDatasetConfig {
            n_train: 10_000,
            n_test: 2_000,
            policy: CaptionPolicy::InformationImbalance { k: 5 },
            seed: 0,
            mnist_source: "builtin".into(),
        }
    }
}

impl MadDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::InvalidArgument(
                "n_train and n_test must be at least 1".into(),
            ));
        }
        self.policy.validate()
    }
}

/// Group an embedding set's rows by a factor's value, groups in canonical
/// value order, values with no rows skipped.
pub fn factor_groups(set: &EmbeddingSet, factor: Factor) -> Result<GroupIndex> {
    let labels = set.labels.as_ref().ok_or_else(|| {
        Error::InvalidArgument("embedding set carries no factor labels".into())
    })?;
    let parsed: Vec<LatentFactors> = labels
        .iter()
        .enumerate()
        .map(|(i, v)| {
            serde_json::from_value(v.clone()).map_err(|e| {
                Error::InvalidArgument(format!("label record {i} is not a factor record: {e}"))
            })
        })
        .collect::<Result<_>>()?;
    let values = factor.values();
    let mut groups: Vec<(String, Vec<usize>)> = values
        .iter()
        .map(|w| (w.to_string(), Vec::new()))
        .collect();
    for (i, f) in parsed.iter().enumerate() {
        groups[factor.class_of(f)].1.push(i);
    }
    groups.retain(|(_, idx)| !idx.is_empty());
    GroupIndex::new(groups, set.n())
}

/// Group rows by every attribute value pooled across the five attribute
/// factors (16 groups when all values occur). Groups overlap row-wise:
/// each row belongs to one group per factor.
pub fn pooled_attribute_groups(set: &EmbeddingSet) -> Result<GroupIndex> {
    let labels = set.labels.as_ref().ok_or_else(|| {
        Error::InvalidArgument("embedding set carries no factor labels".into())
    })?;
    let parsed: Vec<LatentFactors> = labels
        .iter()
        .enumerate()
        .map(|(i, v)| {
            serde_json::from_value(v.clone()).map_err(|e| {
                Error::InvalidArgument(format!("label record {i} is not a factor record: {e}"))
            })
        })
        .collect::<Result<_>>()?;
    let mut groups: Vec<(String, Vec<usize>)> = ATTRIBUTE_FACTORS
        .iter()
        .flat_map(|f| f.values().iter().map(|w| (w.to_string(), Vec::new())))
        .collect();
    for (i, f) in parsed.iter().enumerate() {
        for factor in ATTRIBUTE_FACTORS {
            let word = factor.word_of(f);
            let slot = groups
                .iter_mut()
                .find(|(label, _)| label == word)
                .expect("value table covers every word");
            slot.1.push(i);
        }
    }
    groups.retain(|(_, idx)| !idx.is_empty());
    GroupIndex::new(groups, set.n())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_words_match_the_vocabulary() {
        for factor in ALL_FACTORS {
            for word in factor.values() {
                assert!(
                    vocab::word_id(word).is_some(),
                    "{word:?} missing from vocab"
                );
            }
        }
        // 10 digits + 16 attribute values cover the 26 content words
        let total: usize = ALL_FACTORS.iter().map(|f| f.values().len()).sum();
        assert_eq!(total, 26);
    }

    #[test]
    fn latent_factors_round_trip_through_json() {
        let f = LatentFactors {
            digit: 3,
            thickness: Thickness::NoThickthinning,
            swelling: Swelling::Swelling,
            fracture: Fracture::NoFracture,
            scale: ScaleClass::Small,
            color: ColorClass::Cyan,
        };
        let json = serde_json::to_value(f).unwrap();
        assert_eq!(json["digit"], 3);
        assert_eq!(json["thickness"], "no thickthinning");
        assert_eq!(json["color"], "cyan");
        let back: LatentFactors = serde_json::from_value(json).unwrap();
        assert_eq!(back, f);

        assert_eq!(Factor::Thickness.word_of(&f), "no thickthinning");
        assert_eq!(Factor::Digit.word_of(&f), "3");
        assert_eq!(Factor::Color.class_of(&f), 4);
    }

    #[test]
    fn factor_names_parse_and_policies_validate() {
        assert_eq!(Factor::from_name("color").unwrap(), Factor::Color);
        assert!(Factor::from_name("size").is_err());
        assert!(CaptionPolicy::InformationImbalance { k: 5 }.validate().is_ok());
        assert!(CaptionPolicy::InformationImbalance { k: 6 }.validate().is_err());
        let cfg = MadDatasetConfig {
            n_test: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
