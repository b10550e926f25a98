//! Fixed 28-token vocabulary shared by the caption generator and the text
//! encoder.
//!
//! Token ids 0-9 are the digit words, 10-25 the attribute words (three
//! thickness values, two each for swelling and fracture, two scale values,
//! seven color values), 26 is start-of-text and 27 is end-of-text, which
//! doubles as padding.  Captions are always exactly [`CONTEXT_LEN`] ids:
//! `[SOT, content words..., EOT, EOT, ...]`.

use crate::{Error, Result};

/// Start-of-text marker.
pub const SOT: u8 = 26;
/// End-of-text marker; also used to pad to [`CONTEXT_LEN`].
pub const EOT: u8 = 27;
/// Number of distinct token ids.
pub const VOCAB_SIZE: usize = 28;
/// Fixed caption length in token ids.
pub const CONTEXT_LEN: usize = 8;
/// A caption holds at most this many content words
/// (SOT + words + at least one EOT must fit in [`CONTEXT_LEN`]).
pub const MAX_CONTENT_WORDS: usize = CONTEXT_LEN - 2;

/// The word spelled by each token id, in id order.
pub const WORDS: [&str; VOCAB_SIZE] = [
    "0",
    "1",
    "2",
    "3",
    "4",
    "5",
    "6",
    "7",
    "8",
    "9",
    "thickening",
    "thinning",
    "no thickthinning",
    "swelling",
    "no swelling",
    "fracture",
    "no fracture",
    "large",
    "small",
    "gray",
    "red",
    "green",
    "blue",
    "cyan",
    "magenta",
    "yellow",
    "<sot>",
    "<eot>",
];

/// Look up the token id for a word. Returns `None` for unknown words;
/// the marker tokens `<sot>`/`<eot>` are not considered words.
pub fn word_id(word: &str) -> Option<u8> {
    WORDS[..26].iter().position(|w| *w == word).map(|i| i as u8)
}

/// Encode a list of content words into a fixed-length caption:
/// `[SOT, ids..., EOT, EOT, ...]` padded with EOT to [`CONTEXT_LEN`].
///
/// Errors if a word is not in the vocabulary or if more than
/// [`MAX_CONTENT_WORDS`] words are given.
pub fn tokenize(words: &[&str]) -> Result<[u8; CONTEXT_LEN]> {
    if words.len() > MAX_CONTENT_WORDS {
        return Err(Error::InvalidArgument(format!(
            "caption has {} words but at most {} fit in a {}-token context",
            words.len(),
            MAX_CONTENT_WORDS,
            CONTEXT_LEN
        )));
    }
    let mut ids = [EOT; CONTEXT_LEN];
    ids[0] = SOT;
    for (slot, word) in ids[1..].iter_mut().zip(words) {
        *slot = word_id(word)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown word {word:?}")))?;
    }
    Ok(ids)
}

/// Decode a caption back into its content words: everything after the
/// leading SOT up to the first EOT.
///
/// Errors if the sequence does not start with SOT, contains no EOT, or
/// holds an out-of-range id.
pub fn detokenize(ids: &[u8]) -> Result<Vec<String>> {
    if ids.first() != Some(&SOT) {
        return Err(Error::InvalidArgument(
            "caption does not start with SOT".into(),
        ));
    }
    let mut words = Vec::new();
    for &id in &ids[1..] {
        if id == EOT {
            return Ok(words);
        }
        if id as usize >= VOCAB_SIZE || id == SOT {
            return Err(Error::InvalidArgument(format!(
                "invalid token id {id} in caption body"
            )));
        }
        words.push(WORDS[id as usize].to_string());
    }
    Err(Error::InvalidArgument("caption has no EOT".into()))
}
