//! Deterministic word-level tokenizer and token sequences.

use std::collections::HashMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
/// First id of the hashed out-of-vocabulary range.
pub const OOV_START: u32 = 2048;
pub const VOCAB_SIZE: u32 = 4096;
/// Longest token sequence the text encoder accepts, sentinels included.
pub const MAX_TOKENS: usize = 16;

const WORDS: &[&str] = &[
    "a", "an", "the", "of", "with", "and", "in", "on", "at", "to", "by", "for", "from", "photo",
    "picture", "painting", "drawing", "image", "sketch", "render", "style", "red", "green", "blue",
    "yellow", "orange", "purple", "pink", "brown", "black", "white", "gray", "grey", "gold",
    "silver", "dark", "light", "bright", "small", "large", "big", "tiny", "huge", "old", "young",
    "new", "wooden", "metal", "glass", "stone", "dog", "cat", "bird", "horse", "cow", "sheep",
    "tiger", "lion", "bear", "rabbit", "fox", "wolf", "deer", "duck", "fish", "monkey", "panda",
    "elephant", "giraffe", "zebra", "owl", "eagle", "penguin", "frog", "turtle", "snake", "person",
    "man", "woman", "child", "boy", "girl", "face", "hand", "statue", "robot", "car", "bus",
    "truck", "bicycle", "boat", "ship", "train", "plane", "house", "building", "tower", "bridge",
    "castle", "church", "window", "door", "wall", "roof", "road", "street", "tree", "flower",
    "rose", "grass", "bush", "forest", "mountain", "hill", "river", "lake", "sea", "ocean",
    "beach", "sand", "sky", "cloud", "sun", "moon", "star", "snow", "rain", "fire", "water",
    "rock", "field", "garden", "park", "city", "table", "chair", "sofa", "bed", "lamp", "vase",
    "cup", "bottle", "book", "clock", "hat", "shoe", "bag", "ball", "toy", "cake", "apple",
    "banana", "pizza", "bread", "teddy", "doll", "sign", "fence", "pot", "plant", "basket",
    "candle", "mirror", "painted", "sitting", "standing", "running", "flying", "sleeping",
    "cute", "beautiful", "realistic", "cartoon", "oil", "watercolor",
];

fn word_ids() -> &'static HashMap<&'static str, u32> {
    static MAP: OnceLock<HashMap<&'static str, u32>> = OnceLock::new();
    MAP.get_or_init(|| {
        WORDS
            .iter()
            .enumerate()
            .map(|(i, w)| (*w, i as u32 + 2))
            .collect()
    })
}

/// Number of ids actually assigned to built-in words (after the sentinels).
pub fn known_word_count() -> usize {
    word_ids().len()
}

/// Word for a built-in id, if any.
pub fn word_for(id: u32) -> Option<&'static str> {
    (id >= 2).then(|| WORDS.get((id - 2) as usize).copied()).flatten()
}

fn fnv1a(s: &str) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for b in s.bytes() {
        h ^= u32::from(b);
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

/// Id for a single lowercase word.
pub fn word_id(word: &str) -> u32 {
    match word_ids().get(word) {
        Some(id) => *id,
        None => OOV_START + fnv1a(word) % (VOCAB_SIZE - OOV_START),
    }
}

/// Ordered token ids, always framed by `BOS ... EOS`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    /// The null-text sequence `[BOS, EOS]`.
    pub fn null() -> Self {
        Self(vec![BOS, EOS])
    }

    /// Frames `body` with sentinels, truncating it to fit [`MAX_TOKENS`].
    pub fn framed(body: &[u32]) -> Result<Self> {
        if let Some(id) = body.iter().find(|id| **id >= VOCAB_SIZE) {
            return Err(Error::invalid(format!("token id {id} outside vocabulary")));
        }
        let keep = body.len().min(MAX_TOKENS - 2);
        let mut ids = Vec::with_capacity(keep + 2);
        ids.push(BOS);
        ids.extend_from_slice(&body[..keep]);
        ids.push(EOS);
        Ok(Self(ids))
    }

    pub fn from_ids(ids: Vec<u32>) -> Result<Self> {
        if ids.is_empty() || ids.len() > MAX_TOKENS {
            return Err(Error::invalid(format!(
                "token sequence length {} outside [1, {MAX_TOKENS}]",
                ids.len()
            )));
        }
        if let Some(id) = ids.iter().find(|id| **id >= VOCAB_SIZE) {
            return Err(Error::invalid(format!("token id {id} outside vocabulary")));
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_null(&self) -> bool {
        self.0 == [BOS, EOS]
    }

    /// Ids between the sentinels.
    pub fn body(&self) -> &[u32] {
        let ids = &self.0;
        let start = usize::from(ids.first() == Some(&BOS));
        let end = ids.len() - usize::from(ids.len() > start && ids.last() == Some(&EOS));
        &ids[start..end]
    }
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn words(text: &str) -> Vec<u32> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(word_id)
        .collect()
}

pub fn tokenize(text: &str) -> TokenSequence {
    TokenSequence::framed(&words(text)).expect("word ids are always in range")
}

/// `L x d` text features consumed by cross-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding(pub(crate) Tensor);

impl TextEmbedding {
    pub fn new(t: Tensor) -> Result<Self> {
        t.dims2()?;
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }
}
