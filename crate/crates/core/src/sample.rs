//! Speech samples: ordered sentences, each with audio patches and text tokens.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal = 0,
    Depressed = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Normal),
            1 => Ok(Label::Depressed),
            _ => Err(Error::InvalidArgument(format!("label index {i}"))),
        }
    }
}

/// Layout of the audio patch grid over the time × mel plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn patches(&self) -> usize {
        self.rows * self.cols
    }
}

/// One sentence: audio patches (one row per patch) and text token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct SentencePair {
    pub audio: Tensor,
    pub tokens: Vec<usize>,
    pub index: usize,
    /// Start and end in milliseconds, when known.
    pub timestamps_ms: Option<(u64, u64)>,
}

impl SentencePair {
    pub fn patch_count(&self) -> usize {
        self.audio.rows()
    }

    pub fn validate(&self, vocab_size: usize, d_patch: usize) -> Result<()> {
        if self.audio.rank() != 2 || self.audio.rows() == 0 {
            return Err(Error::Empty("audio modality"));
        }
        if self.audio.cols() != d_patch {
            return Err(Error::Shape {
                op: "sentence audio",
                left: vec![self.audio.rows(), d_patch],
                right: self.audio.shape().to_vec(),
            });
        }
        if self.tokens.is_empty() {
            return Err(Error::Empty("text modality"));
        }
        if let Some(&t) = self.tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {t} outside vocabulary of {vocab_size}"
            )));
        }
        if !self.audio.is_finite() {
            return Err(Error::NonFinite { op: "sentence audio" });
        }
        Ok(())
    }
}

/// One participant's speech.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeechSample {
    pub participant_id: String,
    pub label: Label,
    pub patch_grid: PatchGrid,
    pub sentences: Vec<SentencePair>,
}

impl SpeechSample {
    /// Keeps only the first `max_sentences` sentences.
    pub fn truncated(&self, max_sentences: usize) -> SpeechSample {
        let mut s = self.clone();
        s.sentences.truncate(max_sentences);
        s
    }

    pub fn validate(&self, vocab_size: usize, d_patch: usize, max_sentences: usize) -> Result<()> {
        if self.sentences.is_empty() {
            return Err(Error::Empty("speech"));
        }
        if self.sentences.len() > max_sentences {
            return Err(Error::Capacity {
                len: self.sentences.len(),
                capacity: max_sentences,
            });
        }
        for s in &self.sentences {
            s.validate(vocab_size, d_patch)?;
            if s.patch_count() != self.patch_grid.patches() {
                return Err(Error::InvalidArgument(format!(
                    "sentence {} has {} patches, grid declares {}",
                    s.index,
                    s.patch_count(),
                    self.patch_grid.patches()
                )));
            }
        }
        Ok(())
    }
}
