//! Speech-level evaluation for the depressed class.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{majority_vote, Arch, Model, DEPRESSED};
use crate::sample::SpeechSample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Speech-level prediction from the hierarchical model.
    Proposed,
    /// Per-sentence baseline predictions combined by majority vote.
    BaselineVote,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Proposed => "proposed",
            EvalMode::BaselineVote => "baseline+vote",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub participant_id: String,
    pub label: usize,
    pub predicted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub predictions: Vec<SamplePrediction>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl EvalReport {
    pub fn from_predictions(mode: EvalMode, predictions: Vec<SamplePrediction>) -> Self {
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for p in &predictions {
            match (p.label == DEPRESSED, p.predicted == DEPRESSED) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (false, false) => tn += 1,
                (true, false) => fn_ += 1,
            }
        }
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            mode,
            precision,
            recall,
            f1,
            tp,
            fp,
            tn,
            fn_,
            predictions,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: precision={:.4} recall={:.4} f1={:.4} (tp={} fp={} tn={} fn={})",
            self.mode, self.precision, self.recall, self.f1, self.tp, self.fp, self.tn, self.fn_
        )
    }
}

pub fn evaluate(model: &Model, samples: &[SpeechSample], mode: EvalMode) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let want = match mode {
        EvalMode::Proposed => Arch::Proposed,
        EvalMode::BaselineVote => Arch::Baseline,
    };
    if model.arch != want {
        return Err(Error::InvalidArgument(format!(
            "{mode} evaluation needs a {want} model, got {}",
            model.arch
        )));
    }
    let predictions = samples
        .iter()
        .map(|s| {
            let predicted = match mode {
                EvalMode::Proposed => model
                    .predict_speech(&s.truncated(model.config.max_sentences))?
                    .prediction(),
                EvalMode::BaselineVote => {
                    let votes = s
                        .sentences
                        .iter()
                        .map(|p| model.predict_sentence(p).map(|l| l.prediction()))
                        .collect::<Result<Vec<_>>>()?;
                    majority_vote(&votes, None)?
                }
            };
            Ok(SamplePrediction {
                participant_id: s.participant_id.clone(),
                label: s.label.index(),
                predicted,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_predictions(mode, predictions))
}
