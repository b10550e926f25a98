//! Caption composition: select factor words per the caption policy,
//! shuffle them uniformly, and tokenize into the fixed-length context.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::mad::{CaptionPolicy, Factor, LatentFactors, ALL_FACTORS, ATTRIBUTE_FACTORS};
use crate::{vocab, Error, Result};

/// Compose one caption for `factors` under `policy`. RNG draws, in order:
/// the word-selection draws the policy needs, then one uniform shuffle of
/// the selected words. Returns the tokenized context
/// `[SOT, words..., EOT, EOT...]`.
pub fn compose_caption(
    factors: &LatentFactors,
    policy: &CaptionPolicy,
    rng: &mut impl Rng,
) -> Result<[u8; vocab::CONTEXT_LEN]> {
    policy.validate()?;
    let mut words: Vec<&'static str> = match *policy {
        CaptionPolicy::InformationImbalance { k } => {
            // Digit word always present, plus a uniform size-k subset of
            // the five attribute words (partial Fisher-Yates: k swaps).
            let mut pool = ATTRIBUTE_FACTORS;
            for i in 0..k as usize {
                let j = rng.random_range(i..pool.len());
                pool.swap(i, j);
            }
            let mut words = vec![Factor::Digit.word_of(factors)];
            words.extend(pool[..k as usize].iter().map(|f| f.word_of(factors)));
            words
        }
        CaptionPolicy::PresenceBias { always_factor } => {
            // The fixed factor plus exactly one uniformly random other
            // factor; the digit counts as an eligible factor here.
            let others: Vec<Factor> = ALL_FACTORS
                .into_iter()
                .filter(|f| *f != always_factor)
                .collect();
            let other = others[rng.random_range(0..others.len())];
            vec![always_factor.word_of(factors), other.word_of(factors)]
        }
    };
    if words.len() > vocab::MAX_CONTENT_WORDS {
        return Err(Error::InvalidArgument(format!(
            "caption selects {} words but the context fits {}",
            words.len(),
            vocab::MAX_CONTENT_WORDS
        )));
    }
    words.shuffle(rng);
    vocab::tokenize(&words)
}
