//! Word-level vocabulary and tokenizer.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BOS_ID, EOS_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::prompt::{TemplateWords, TEMPLATE_WORDS};

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";

/// How out-of-vocabulary words are treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OovPolicy {
    /// Training captions must be fully covered.
    Reject,
    /// Evaluation captions map unknown words to PAD.
    Pad,
}

/// Bijective word/id map. Ids 0..=2 are PAD, BOS and EOS; words follow in sorted order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocabulary {
    word_to_id: BTreeMap<String, u32>,
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn split_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl Vocabulary {
    /// Builds from training captions; the prompt template words are always included.
    pub fn build<'a>(captions: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = captions.into_iter().flat_map(split_words).collect();
        words.extend(TEMPLATE_WORDS.iter().map(|w| w.to_string()));
        words.sort();
        words.dedup();
        let mut word_to_id = BTreeMap::new();
        word_to_id.insert(PAD_TOKEN.to_string(), PAD_ID);
        word_to_id.insert(BOS_TOKEN.to_string(), BOS_ID);
        word_to_id.insert(EOS_TOKEN.to_string(), EOS_ID);
        for (i, w) in words.into_iter().enumerate() {
            word_to_id.insert(w, EOS_ID + 1 + i as u32);
        }
        Self { word_to_id }
    }

    pub fn len(&self) -> usize {
        self.word_to_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.word_to_id.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.word_to_id.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.word_to_id
            .iter()
            .find(|(_, &v)| v == id)
            .map(|(k, _)| k.as_str())
    }

    pub fn template_words(&self) -> Result<TemplateWords> {
        let get = |w: &str| {
            self.id(w).ok_or_else(|| {
                Error::Config(format!("template word '{w}' missing from vocabulary"))
            })
        };
        Ok(TemplateWords {
            a: get("a")?,
            photo: get("photo")?,
            of: get("of")?,
            and: get("and")?,
            person: get("person")?,
        })
    }

    /// `BOS ids.. EOS`, truncated to `max_len` with EOS kept as the last token.
    pub fn tokenize(&self, caption: &str, max_len: usize, oov: OovPolicy) -> Result<Vec<u32>> {
        if max_len < 2 {
            return Err(Error::Config(format!(
                "max_len {max_len} cannot hold BOS and EOS"
            )));
        }
        let mut ids = vec![BOS_ID];
        for w in split_words(caption) {
            match (self.id(&w), oov) {
                (Some(id), _) => ids.push(id),
                (None, OovPolicy::Pad) => ids.push(PAD_ID),
                (None, OovPolicy::Reject) => {
                    return Err(Error::Data(format!("word '{w}' not in vocabulary")));
                }
            }
        }
        ids.truncate(max_len - 1);
        ids.push(EOS_ID);
        Ok(ids)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let vocab: Self = serde_json::from_str(&text)?;
        let mut ids: Vec<u32> = vocab.word_to_id.values().copied().collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Data(format!(
                "{}: vocabulary ids are not unique",
                path.display()
            )));
        }
        if vocab.id(PAD_TOKEN) != Some(PAD_ID)
            || vocab.id(BOS_TOKEN) != Some(BOS_ID)
            || vocab.id(EOS_TOKEN) != Some(EOS_ID)
        {
            return Err(Error::Data(format!(
                "{}: special tokens missing or renumbered",
                path.display()
            )));
        }
        Ok(vocab)
    }
}
