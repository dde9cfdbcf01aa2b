//! Synthetic bi-modal corpus with planted evidence, and the sample file format.
//!
//! Negative speeches draw tokens from a background vocabulary and patches
//! from a standard normal. Positive speeches are identical except that a
//! fraction of their sentences carry evidence: tokens from a reserved
//! vocabulary range and patches shifted by `signal_strength`. The
//! [`EvidenceKey`] records exactly where evidence was planted.
//!
//! Sample file layout:
//!
//! ```text
//! line 1: JSON header {participant_id, label, n_sentences, patch_grid, vocab_size, timestamps_ms}
//! then per sentence:
//!   u32 token count, u32 token ids
//!   patch tensor (u32 rank, u32 dims, f64 values; little-endian)
//! ```

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::io::{encode_tensor, ByteReader};
use crate::numerics::Tensor;
use crate::sample::{Label, PatchGrid, SentencePair, SpeechSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceModality {
    Both,
    Text,
    Audio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub sentences_min: usize,
    pub sentences_max: usize,
    pub vocab_size: usize,
    /// Size of the reserved evidence range at the top of the vocabulary.
    pub evidence_vocab: usize,
    pub tokens_min: usize,
    pub tokens_max: usize,
    pub patch_grid: PatchGrid,
    pub d_patch: usize,
    pub signal_fraction: f64,
    pub signal_strength: f64,
    pub evidence_tokens: usize,
    pub evidence_patches: usize,
    pub evidence_modality: EvidenceModality,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_test: 60,
            sentences_min: 5,
            sentences_max: 12,
            vocab_size: 64,
            evidence_vocab: 8,
            tokens_min: 6,
            tokens_max: 10,
            patch_grid: PatchGrid { rows: 8, cols: 4 },
            d_patch: 16,
            signal_fraction: 0.2,
            signal_strength: 1.0,
            evidence_tokens: 2,
            evidence_patches: 4,
            evidence_modality: EvidenceModality::Both,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_train == 0 || self.n_test == 0 {
            return fail("n_train and n_test must be positive");
        }
        if self.sentences_min == 0 || self.sentences_min > self.sentences_max {
            return fail("sentence range must satisfy 1 <= min <= max");
        }
        if self.tokens_min == 0 || self.tokens_min > self.tokens_max {
            return fail("token range must satisfy 1 <= min <= max");
        }
        if self.evidence_vocab == 0 || self.evidence_vocab >= self.vocab_size {
            return fail("vocabulary too small for the reserved evidence range");
        }
        if !(self.signal_fraction > 0.0 && self.signal_fraction <= 1.0) {
            return fail("signal_fraction must lie in (0, 1]");
        }
        if self.patch_grid.patches() == 0 || self.d_patch == 0 {
            return fail("patch grid and d_patch must be positive");
        }
        if self.evidence_tokens == 0 || self.evidence_tokens > self.tokens_min {
            return fail("evidence_tokens must lie in 1..=tokens_min");
        }
        if self.evidence_patches == 0 || self.evidence_patches > self.patch_grid.patches() {
            return fail("evidence_patches must lie in 1..=patches");
        }
        if !self.signal_strength.is_finite() {
            return fail("signal_strength must be finite");
        }
        Ok(())
    }

    /// Evidence sentences in a positive speech of `n` sentences.
    pub fn evidence_count(&self, n: usize) -> usize {
        ((self.signal_fraction * n as f64).round() as usize).clamp(1, n)
    }

    pub fn background_vocab(&self) -> usize {
        self.vocab_size - self.evidence_vocab
    }

    pub fn is_evidence_token(&self, token: usize) -> bool {
        token >= self.background_vocab() && token < self.vocab_size
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceEvidence {
    pub index: usize,
    pub token_positions: Vec<usize>,
    pub patch_indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEvidence {
    pub participant_id: String,
    /// Empty for negative samples.
    pub sentences: Vec<SentenceEvidence>,
}

impl SampleEvidence {
    pub fn sentence(&self, index: usize) -> Option<&SentenceEvidence> {
        self.sentences.iter().find(|s| s.index == index)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceKey {
    pub train: Vec<SampleEvidence>,
    pub test: Vec<SampleEvidence>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub train: Vec<SpeechSample>,
    pub test: Vec<SpeechSample>,
    pub key: EvidenceKey,
}

fn distinct(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut v = rand::seq::index::sample(rng, n, k).into_vec();
    v.sort_unstable();
    v
}

fn generate_split(
    cfg: &CorpusConfig,
    rng: &mut ChaCha8Rng,
    split: &str,
    n: usize,
) -> (Vec<SpeechSample>, Vec<SampleEvidence>) {
    let mut labels: Vec<Label> = (0..n)
        .map(|i| if i % 2 == 0 { Label::Depressed } else { Label::Normal })
        .collect();
    labels.shuffle(rng);
    let n_patches = cfg.patch_grid.patches();
    let plant_text = cfg.evidence_modality != EvidenceModality::Audio;
    let plant_audio = cfg.evidence_modality != EvidenceModality::Text;

    let mut samples = Vec::with_capacity(n);
    let mut key = Vec::with_capacity(n);
    for (i, &label) in labels.iter().enumerate() {
        let participant_id = format!("{split}-{i:04}");
        let n_sent = rng.gen_range(cfg.sentences_min..=cfg.sentences_max);
        let mut clock = 0u64;
        let mut sentences = Vec::with_capacity(n_sent);
        for j in 0..n_sent {
            let n_tok = rng.gen_range(cfg.tokens_min..=cfg.tokens_max);
            let tokens = (0..n_tok).map(|_| rng.gen_range(0..cfg.background_vocab())).collect();
            let audio: Vec<f64> = (0..n_patches * cfg.d_patch).map(|_| StandardNormal.sample(rng)).collect();
            let duration = 350 * n_tok as u64 + rng.gen_range(0..400);
            sentences.push(SentencePair {
                audio: Tensor::new(vec![n_patches, cfg.d_patch], audio).expect("patch shape"),
                tokens,
                index: j,
                timestamps_ms: Some((clock, clock + duration)),
            });
            clock += duration + rng.gen_range(100..600);
        }
        let mut evidence = Vec::new();
        if label == Label::Depressed {
            for j in distinct(rng, n_sent, cfg.evidence_count(n_sent)) {
                let s = &mut sentences[j];
                let mut token_positions = Vec::new();
                let mut patch_indices = Vec::new();
                if plant_text {
                    token_positions = distinct(rng, s.tokens.len(), cfg.evidence_tokens);
                    for &p in &token_positions {
                        s.tokens[p] = rng.gen_range(cfg.background_vocab()..cfg.vocab_size);
                    }
                }
                if plant_audio {
                    patch_indices = distinct(rng, n_patches, cfg.evidence_patches);
                    let d = cfg.d_patch;
                    for &p in &patch_indices {
                        for v in &mut s.audio.data_mut()[p * d..(p + 1) * d] {
                            *v += cfg.signal_strength;
                        }
                    }
                }
                evidence.push(SentenceEvidence {
                    index: j,
                    token_positions,
                    patch_indices,
                });
            }
        }
        key.push(SampleEvidence {
            participant_id: participant_id.clone(),
            sentences: evidence,
        });
        samples.push(SpeechSample {
            participant_id,
            label,
            patch_grid: cfg.patch_grid,
            sentences,
        });
    }
    (samples, key)
}

/// Deterministic in `config` (including its seed).
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (train, train_key) = generate_split(config, &mut rng, "train", config.n_train);
    let (test, test_key) = generate_split(config, &mut rng, "test", config.n_test);
    Ok(Corpus {
        config: config.clone(),
        train,
        test,
        key: EvidenceKey {
            train: train_key,
            test: test_key,
        },
    })
}

/// Flattens speeches into sentences that inherit their speech's label.
pub fn segment_labeled_view(samples: &[SpeechSample]) -> Vec<(SentencePair, Label)> {
    samples
        .iter()
        .flat_map(|s| s.sentences.iter().map(move |p| (p.clone(), s.label)))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleHeader {
    participant_id: String,
    label: Label,
    n_sentences: usize,
    patch_grid: PatchGrid,
    vocab_size: usize,
    #[serde(default)]
    timestamps_ms: Option<Vec<Option<(u64, u64)>>>,
}

pub fn encode_sample(sample: &SpeechSample, vocab_size: usize) -> Result<Vec<u8>> {
    let stamps: Vec<Option<(u64, u64)>> = sample.sentences.iter().map(|s| s.timestamps_ms).collect();
    let header = SampleHeader {
        participant_id: sample.participant_id.clone(),
        label: sample.label,
        n_sentences: sample.sentences.len(),
        patch_grid: sample.patch_grid,
        vocab_size,
        timestamps_ms: stamps.iter().any(Option::is_some).then_some(stamps),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for s in &sample.sentences {
        out.extend_from_slice(&(s.tokens.len() as u32).to_le_bytes());
        for &t in &s.tokens {
            out.extend_from_slice(&(t as u32).to_le_bytes());
        }
        encode_tensor(&s.audio, &mut out);
    }
    Ok(out)
}

pub fn decode_sample(bytes: &[u8]) -> Result<SpeechSample> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::parse("line 1", "missing header line"))?;
    let header: SampleHeader = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::parse(format!("line 1, column {}", e.column()), e.to_string()))?;
    if header.n_sentences == 0 {
        return Err(Error::parse("line 1", "n_sentences must be positive"));
    }
    if let Some(ts) = &header.timestamps_ms {
        if ts.len() != header.n_sentences {
            return Err(Error::parse("line 1", "timestamps_ms length differs from n_sentences"));
        }
    }
    let mut r = ByteReader::with_offset(bytes, "sample", newline + 1);
    let mut sentences = Vec::with_capacity(header.n_sentences);
    for j in 0..header.n_sentences {
        let n_tok = r.u32()? as usize;
        if n_tok == 0 {
            return Err(r.error(format!("sentence {j} has no tokens")));
        }
        let mut tokens = Vec::with_capacity(n_tok.min(4096));
        for _ in 0..n_tok {
            let t = r.u32()? as usize;
            if t >= header.vocab_size {
                return Err(r.error(format!("token id {t} outside vocabulary of {}", header.vocab_size)));
            }
            tokens.push(t);
        }
        let at = r.position();
        let audio = r.tensor()?;
        if audio.rank() != 2 || audio.rows() != header.patch_grid.patches() {
            return Err(Error::parse(
                format!("sample byte offset {at}"),
                format!(
                    "sentence {j}: patch tensor {:?} does not match declared {}×{} grid",
                    audio.shape(),
                    header.patch_grid.rows,
                    header.patch_grid.cols
                ),
            ));
        }
        sentences.push(SentencePair {
            audio,
            tokens,
            index: j,
            timestamps_ms: header.timestamps_ms.as_ref().and_then(|ts| ts[j]),
        });
    }
    if !r.is_at_end() {
        return Err(r.error("trailing bytes after last sentence"));
    }
    Ok(SpeechSample {
        participant_id: header.participant_id,
        label: header.label,
        patch_grid: header.patch_grid,
        sentences,
    })
}

pub fn save_sample(path: &Path, sample: &SpeechSample, vocab_size: usize) -> Result<()> {
    fs::write(path, encode_sample(sample, vocab_size)?)?;
    Ok(())
}

/// Reads one externally prepared sample file.
pub fn load_external(path: &Path) -> Result<SpeechSample> {
    decode_sample(&fs::read(path)?)
}

/// Writes `corpus.json`, `key.json`, and `train/`, `test/` sample files.
pub fn save_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("corpus.json"), serde_json::to_vec_pretty(&corpus.config)?)?;
    fs::write(dir.join("key.json"), serde_json::to_vec_pretty(&corpus.key)?)?;
    for (split, samples) in [("train", &corpus.train), ("test", &corpus.test)] {
        let sub = dir.join(split);
        fs::create_dir_all(&sub)?;
        for (i, s) in samples.iter().enumerate() {
            save_sample(&sub.join(format!("{i:05}.sample")), s, corpus.config.vocab_size)?;
        }
    }
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let config: CorpusConfig = serde_json::from_slice(&fs::read(dir.join("corpus.json"))?)?;
    let key: EvidenceKey = serde_json::from_slice(&fs::read(dir.join("key.json"))?)?;
    let load_split = |split: &str, n: usize| -> Result<Vec<SpeechSample>> {
        (0..n)
            .map(|i| load_external(&dir.join(split).join(format!("{i:05}.sample"))))
            .collect()
    };
    let train = load_split("train", key.train.len())?;
    let test = load_split("test", key.test.len())?;
    Ok(Corpus {
        config,
        train,
        test,
        key,
    })
}
