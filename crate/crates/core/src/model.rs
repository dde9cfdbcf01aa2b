//! The two-level classifier.
//!
//! Sentence level: an audio encoder over patch rows and a text encoder over
//! token ids, each with its own prepended `[cls]`, fused by a stack of
//! decoder-style blocks whose text `[cls]` output is the sentence embedding.
//! Speech level: sentence embeddings plus a speech `[cls]`, positional
//! embeddings, a self-attention encoder, and a linear head on the final
//! `[cls]` row. The baseline drops the speech level and applies the head to
//! each sentence embedding.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{
    add_positional_embeddings, decoder_fusion_block_forward, encoder_block_forward, AttnKind,
    BlockConfig, EncoderLayer, FusionBlock, Graph, Initializer, Linear, ParamId, ParamStore,
    Stage, TraceSink,
};
use crate::error::{Error, Result};
use crate::numerics::io::{encode_tensor, encoded_len, ByteReader};
use crate::numerics::{Tensor, Var};
use crate::sample::{SentencePair, SpeechSample};

/// Logit index of the depressed class.
pub const DEPRESSED: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Proposed,
    Baseline,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Proposed => "proposed",
            Arch::Baseline => "baseline",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub block: BlockConfig,
    pub audio_layers: usize,
    pub text_layers: usize,
    pub fusion_blocks: usize,
    pub speech_layers: usize,
    pub vocab_size: usize,
    pub d_patch: usize,
    pub max_patches: usize,
    pub max_tokens: usize,
    pub max_sentences: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            block: BlockConfig::default(),
            audio_layers: 2,
            text_layers: 2,
            fusion_blocks: 8,
            speech_layers: 6,
            vocab_size: 64,
            d_patch: 16,
            max_patches: 64,
            max_tokens: 32,
            max_sentences: 42,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if self.audio_layers > 4 || self.text_layers > 4 {
            return Err(Error::Config("encoder depth must be in 0..=4".into()));
        }
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_patch", self.d_patch),
            ("max_patches", self.max_patches),
            ("max_tokens", self.max_tokens),
            ("max_sentences", self.max_sentences),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Two class logits; index 1 is the depressed class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassLogits {
    pub logits: [f64; 2],
}

impl ClassLogits {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.data() {
            [a, b] if a.is_finite() && b.is_finite() => Ok(Self { logits: [*a, *b] }),
            [_, _] => Err(Error::NonFinite { op: "class logits" }),
            _ => Err(Error::Shape {
                op: "class logits",
                left: vec![2],
                right: t.shape().to_vec(),
            }),
        }
    }

    /// Argmax; ties go to class 0.
    pub fn prediction(&self) -> usize {
        usize::from(self.logits[1] > self.logits[0])
    }

    pub fn probabilities(&self) -> [f64; 2] {
        let m = self.logits[0].max(self.logits[1]);
        let e0 = (self.logits[0] - m).exp();
        let e1 = (self.logits[1] - m).exp();
        [e0 / (e0 + e1), e1 / (e0 + e1)]
    }
}

#[derive(Clone, Debug)]
pub struct SentenceBlock {
    pub audio_in: Linear,
    pub audio_cls: ParamId,
    pub audio_pos: ParamId,
    pub audio_layers: Vec<EncoderLayer>,
    pub token_embedding: ParamId,
    pub text_cls: ParamId,
    pub text_pos: ParamId,
    pub text_layers: Vec<EncoderLayer>,
    pub fusion: Vec<FusionBlock>,
}

#[derive(Clone, Debug)]
pub struct SpeechBlock {
    pub cls: ParamId,
    pub pos: ParamId,
    pub layers: Vec<EncoderLayer>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub arch: Arch,
    pub store: ParamStore,
    pub sentence: SentenceBlock,
    pub speech: Option<SpeechBlock>,
    pub head: Linear,
}

impl Model {
    pub fn new(config: ModelConfig, arch: Arch) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let mut init = Initializer::new(config.seed);
        let c = &config.block;
        let d = c.d_model;
        let sentence = SentenceBlock {
            audio_in: Linear::new(&mut store, &mut init, "sentence.audio.in", config.d_patch, d),
            audio_cls: store.add("sentence.audio.cls", init.normal(&[1, d], 1.0)),
            audio_pos: store.add("sentence.audio.pos", init.normal(&[config.max_patches + 1, d], 0.1)),
            audio_layers: (0..config.audio_layers)
                .map(|i| EncoderLayer::new(&mut store, &mut init, &format!("sentence.audio.layer{i}"), c))
                .collect(),
            token_embedding: store.add("sentence.text.embedding", init.normal(&[config.vocab_size, d], 1.0)),
            text_cls: store.add("sentence.text.cls", init.normal(&[1, d], 1.0)),
            text_pos: store.add("sentence.text.pos", init.normal(&[config.max_tokens + 1, d], 0.1)),
            text_layers: (0..config.text_layers)
                .map(|i| EncoderLayer::new(&mut store, &mut init, &format!("sentence.text.layer{i}"), c))
                .collect(),
            fusion: (0..config.fusion_blocks)
                .map(|i| FusionBlock::new(&mut store, &mut init, &format!("sentence.fusion.block{i}"), c))
                .collect(),
        };
        let speech = match arch {
            Arch::Proposed => Some(SpeechBlock {
                cls: store.add("speech.cls", init.normal(&[1, d], 1.0)),
                pos: store.add("speech.pos", init.normal(&[config.max_sentences + 1, d], 0.1)),
                layers: (0..config.speech_layers)
                    .map(|i| EncoderLayer::new(&mut store, &mut init, &format!("speech.layer{i}"), c))
                    .collect(),
            }),
            Arch::Baseline => None,
        };
        let head = Linear::new(&mut store, &mut init, "head", d, 2);
        // Cross-entropy updates the two class columns by exactly opposite
        // amounts, so an antisymmetric start keeps y_1 = -y_0 for good and
        // the depressed logit stays half the log-odds.
        let w = store.get_mut(head.w);
        for i in 0..d {
            let v = w.get(i, DEPRESSED);
            w.set(i, 1 - DEPRESSED, -v);
        }
        Ok(Self {
            config,
            arch,
            store,
            sentence,
            speech,
            head,
        })
    }

    /// Number of attention traces one sentence emits.
    pub fn traces_per_sentence(&self) -> usize {
        self.config.audio_layers + self.config.text_layers + 2 * self.config.fusion_blocks
    }

    /// Sentence-level encoders. Returns `(H_a, H_t)` with the `[cls]` rows first.
    pub fn encode_sentence(&self, g: &mut Graph, sink: &mut TraceSink, s: &SentencePair) -> Result<(Var, Var)> {
        s.validate(self.config.vocab_size, self.config.d_patch)?;
        let b = &self.sentence;
        let patches = g.tape.constant(s.audio.clone());
        let a = b.audio_in.forward(g, patches)?;
        let cls = g.param(b.audio_cls);
        let mut h_a = g.tape.concat_rows(&[cls, a])?;
        h_a = add_positional_embeddings(g, h_a, b.audio_pos)?;
        for (i, layer) in b.audio_layers.iter().enumerate() {
            h_a = encoder_block_forward(g, h_a, layer, sink, AttnKind::AudioSelf, Stage::AudioEncoder, i)?;
        }

        let table = g.param(b.token_embedding);
        let tokens = g.tape.gather_rows(table, &s.tokens)?;
        let cls = g.param(b.text_cls);
        let mut h_t = g.tape.concat_rows(&[cls, tokens])?;
        h_t = add_positional_embeddings(g, h_t, b.text_pos)?;
        for (i, layer) in b.text_layers.iter().enumerate() {
            h_t = encoder_block_forward(g, h_t, layer, sink, AttnKind::TextSelf, Stage::TextEncoder, i)?;
        }
        Ok((h_a, h_t))
    }

    /// Fusion stack; returns the text `[cls]` row as a `1×d` sentence embedding.
    pub fn fuse_cross_modal(&self, g: &mut Graph, sink: &mut TraceSink, h_t: Var, h_a: Var) -> Result<Var> {
        let mut x = h_t;
        for (i, block) in self.sentence.fusion.iter().enumerate() {
            x = decoder_fusion_block_forward(g, x, h_a, block, sink, i)?;
        }
        g.tape.slice_rows(x, 0, 1)
    }

    pub fn sentence_embedding(&self, g: &mut Graph, sink: &mut TraceSink, s: &SentencePair) -> Result<Var> {
        let (h_a, h_t) = self.encode_sentence(g, sink, s)?;
        self.fuse_cross_modal(g, sink, h_t, h_a)
    }

    /// Speech-level block over `1×d` sentence embeddings; returns `1×2` logits.
    pub fn speech_forward(&self, g: &mut Graph, sink: &mut TraceSink, embeddings: &[Var]) -> Result<Var> {
        let speech = self
            .speech
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("baseline model has no speech block".into()))?;
        if embeddings.is_empty() {
            return Err(Error::Empty("sentence embeddings"));
        }
        if embeddings.len() > self.config.max_sentences {
            return Err(Error::Capacity {
                len: embeddings.len(),
                capacity: self.config.max_sentences,
            });
        }
        sink.set_sentence(None);
        let cls = g.param(speech.cls);
        let mut rows = Vec::with_capacity(embeddings.len() + 1);
        rows.push(cls);
        rows.extend_from_slice(embeddings);
        let mut x = g.tape.concat_rows(&rows)?;
        x = add_positional_embeddings(g, x, speech.pos)?;
        for (i, layer) in speech.layers.iter().enumerate() {
            x = encoder_block_forward(g, x, layer, sink, AttnKind::SpeechSelf, Stage::Speech, i)?;
        }
        let r = g.tape.slice_rows(x, 0, 1)?;
        self.head.forward(g, r)
    }

    /// Full proposed model on one tape.
    pub fn proposed_forward(&self, g: &mut Graph, sink: &mut TraceSink, sample: &SpeechSample) -> Result<Var> {
        if sample.sentences.is_empty() {
            return Err(Error::Empty("speech"));
        }
        let mut embeddings = Vec::with_capacity(sample.sentences.len());
        for (j, s) in sample.sentences.iter().enumerate() {
            sink.set_sentence(Some(j));
            embeddings.push(self.sentence_embedding(g, sink, s)?);
        }
        self.speech_forward(g, sink, &embeddings)
    }

    /// Sentence-only model: head applied directly to the sentence embedding.
    pub fn baseline_forward(&self, g: &mut Graph, sink: &mut TraceSink, s: &SentencePair) -> Result<Var> {
        let e = self.sentence_embedding(g, sink, s)?;
        self.head.forward(g, e)
    }

    /// Inference logits for a whole speech (proposed architecture).
    pub fn predict_speech(&self, sample: &SpeechSample) -> Result<ClassLogits> {
        let mut g = Graph::new(&self.store);
        let mut sink = TraceSink::new();
        let y = self.proposed_forward(&mut g, &mut sink, sample)?;
        ClassLogits::from_tensor(g.tape.value(y))
    }

    /// Inference logits for one sentence (baseline architecture).
    pub fn predict_sentence(&self, s: &SentencePair) -> Result<ClassLogits> {
        let mut g = Graph::new(&self.store);
        let mut sink = TraceSink::new();
        let y = self.baseline_forward(&mut g, &mut sink, s)?;
        ClassLogits::from_tensor(g.tape.value(y))
    }

    /// Content hash of the architecture, config and parameters.
    pub fn checkpoint_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.arch.to_string().as_bytes());
        h.update(serde_json::to_vec(&self.config).unwrap_or_default());
        let mut buf = Vec::new();
        for (name, t) in self.store.iter() {
            h.update(name.as_bytes());
            buf.clear();
            encode_tensor(t, &mut buf);
            h.update(&buf);
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Writes `manifest.json` and `params.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.store.len());
        for (name, t) in self.store.iter() {
            entries.push(ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
                length: encoded_len(t) as u64,
            });
            encode_tensor(t, &mut payload);
        }
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            version: 1,
            arch: self.arch,
            checkpoint_id: self.checkpoint_id(),
            config: self.config.clone(),
            params: entries,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        fs::write(dir.join("params.bin"), payload)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if manifest.format != MANIFEST_FORMAT || manifest.version != 1 {
            return Err(Error::Checkpoint(format!(
                "unsupported format {} v{}",
                manifest.format, manifest.version
            )));
        }
        let payload = fs::read(dir.join("params.bin"))?;
        let mut model = Model::new(manifest.config, manifest.arch)?;
        if manifest.params.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "manifest lists {} parameters, architecture has {}",
                manifest.params.len(),
                model.store.len()
            )));
        }
        for entry in &manifest.params {
            let id = model
                .store
                .find(&entry.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", entry.name)))?;
            let offset = entry.offset as usize;
            if offset > payload.len() {
                return Err(Error::Checkpoint(format!("offset of {} beyond payload", entry.name)));
            }
            let mut reader = ByteReader::with_offset(&payload, "params.bin", offset);
            let t = reader.tensor()?;
            if t.shape() != entry.shape.as_slice() || t.shape() != model.store.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: shape {:?} does not match {:?}",
                    entry.name,
                    t.shape(),
                    model.store.get(id).shape()
                )));
            }
            *model.store.get_mut(id) = t;
        }
        Ok(model)
    }
}

const MANIFEST_FORMAT: &str = "hierattn-checkpoint";

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    arch: Arch,
    checkpoint_id: String,
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

/// Speech-level decision from per-sentence predictions: depressed iff
/// strictly more than `threshold` sentences are predicted depressed.
/// `threshold` defaults to `floor(n / 2)`.
pub fn majority_vote(sentence_preds: &[usize], threshold: Option<usize>) -> Result<usize> {
    if sentence_preds.is_empty() {
        return Err(Error::Empty("sentence predictions"));
    }
    let threshold = threshold.unwrap_or(sentence_preds.len() / 2);
    let positives = sentence_preds.iter().filter(|&&p| p == 1).count();
    Ok(usize::from(positives > threshold))
}
