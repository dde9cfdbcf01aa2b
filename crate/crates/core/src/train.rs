//! Adam training loops for the hierarchical model and the sentence baseline.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{Graph, TraceSink};
use crate::error::{Error, Result};
use crate::model::{Arch, Model};
use crate::numerics::Tensor;
use crate::sample::{Label, SentencePair, SpeechSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Speech samples per optimizer step for the proposed model.
    pub accumulation_steps: usize,
    /// Sentences per optimizer step for the baseline.
    pub batch_size: usize,
    pub max_sentences: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Optimizer steps over which the learning rate ramps linearly up to
    /// `learning_rate`; 0 disables the ramp.
    pub warmup_steps: u64,
    pub shuffle: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            epochs: 20,
            accumulation_steps: 72,
            batch_size: 128,
            max_sentences: 42,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_steps: 0,
            shuffle: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.learning_rate, self.adam_eps];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("learning_rate and adam_eps must be positive".into()));
        }
        if self.epochs == 0 || self.accumulation_steps == 0 || self.batch_size == 0 || self.max_sentences == 0 {
            return Err(Error::Config(
                "epochs, accumulation_steps, batch_size and max_sentences must be at least 1".into(),
            ));
        }
        for b in [self.beta1, self.beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("Adam beta {b} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    warmup: u64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            warmup: cfg.warmup_steps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let lr = if self.t < self.warmup {
            self.lr * self.t as f64 / self.warmup as f64
        } else {
            self.lr
        };
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: u64,
    /// Mean loss over the samples consumed by this step.
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<LogRecord>,
    /// Mean per-sample loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

fn add_into(acc: &mut [Tensor], grads: &[Tensor]) {
    for (a, g) in acc.iter_mut().zip(grads) {
        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
            *x += y;
        }
    }
}

fn zero(acc: &mut [Tensor]) {
    for a in acc {
        a.data_mut().fill(0.0);
    }
}

fn check_finite(loss: f64, grads: &[Tensor], epoch: usize, step: u64) -> Result<()> {
    if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence { epoch, step, loss });
    }
    Ok(())
}

/// Loss and parameter gradients for one speech.
pub fn speech_gradient(model: &Model, sample: &SpeechSample, dropout_seed: u64) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::training(&model.store, model.config.block.dropout, dropout_seed);
    let mut sink = TraceSink::new();
    let y = model.proposed_forward(&mut g, &mut sink, sample)?;
    let loss = g.tape.cross_entropy(y, sample.label.index())?;
    g.tape.backward(loss)?;
    Ok((g.tape.value(loss).data()[0], g.param_grads()))
}

/// Loss and parameter gradients for one labelled sentence.
pub fn sentence_gradient(model: &Model, s: &SentencePair, label: Label, dropout_seed: u64) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::training(&model.store, model.config.block.dropout, dropout_seed);
    let mut sink = TraceSink::new();
    let y = model.baseline_forward(&mut g, &mut sink, s)?;
    let loss = g.tape.cross_entropy(y, label.index())?;
    g.tape.backward(loss)?;
    Ok((g.tape.value(loss).data()[0], g.param_grads()))
}

/// Sum of per-sample gradients over `samples`, as held in the accumulation buffer.
pub fn accumulate_gradients(model: &Model, samples: &[SpeechSample], dropout_seed: u64) -> Result<(f64, Vec<Tensor>)> {
    let mut acc: Vec<Tensor> = model.store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut total = 0.0;
    for s in samples {
        let (loss, grads) = speech_gradient(model, s, dropout_seed)?;
        total += loss;
        add_into(&mut acc, &grads);
    }
    Ok((total, acc))
}

fn check_arch(model: &Model, want: Arch) -> Result<()> {
    if model.arch != want {
        return Err(Error::InvalidArgument(format!(
            "expected a {want} model, got {}",
            model.arch
        )));
    }
    Ok(())
}

/// Batch size 1 per forward; gradients summed over `accumulation_steps`
/// speeches, then one Adam step on their mean. A partial window at the end
/// of an epoch is flushed with its own sample count.
pub fn train_proposed(model: &mut Model, samples: &[SpeechSample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    check_arch(model, Arch::Proposed)?;
    if samples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let max = cfg.max_sentences.min(model.config.max_sentences);
    let samples: Vec<SpeechSample> = samples.iter().map(|s| s.truncated(max)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg, model.store.tensors());
    let mut acc: Vec<Tensor> = model.store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        for window in order.chunks(cfg.accumulation_steps) {
            let mut window_loss = 0.0;
            for &i in window {
                let (loss, grads) = speech_gradient(model, &samples[i], rng.gen())?;
                check_finite(loss, &grads, epoch, adam.steps())?;
                window_loss += loss;
                add_into(&mut acc, &grads);
            }
            let k = window.len() as f64;
            for a in &mut acc {
                *a = a.scale(1.0 / k);
            }
            adam.step(model.store.tensors_mut(), &acc);
            zero(&mut acc);
            epoch_loss += window_loss;
            let rec = LogRecord {
                epoch,
                step: adam.steps(),
                loss: window_loss / k,
            };
            log::debug!("{}", serde_json::to_string(&rec)?);
            report.steps.push(rec);
        }
        let mean = epoch_loss / samples.len() as f64;
        log::info!("epoch {epoch}: mean loss {mean:.6}");
        report.epoch_losses.push(mean);
    }
    Ok(report)
}

/// Minibatches of `batch_size` sentences, each a mean-gradient Adam step;
/// the last batch of an epoch may be smaller.
pub fn train_baseline(model: &mut Model, segments: &[(SentencePair, Label)], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    check_arch(model, Arch::Baseline)?;
    if segments.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg, model.store.tensors());
    let mut acc: Vec<Tensor> = model.store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..segments.len()).collect();

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut batch_loss = 0.0;
            for &i in batch {
                let (s, label) = &segments[i];
                let (loss, grads) = sentence_gradient(model, s, *label, rng.gen())?;
                check_finite(loss, &grads, epoch, adam.steps())?;
                batch_loss += loss;
                add_into(&mut acc, &grads);
            }
            let k = batch.len() as f64;
            for a in &mut acc {
                *a = a.scale(1.0 / k);
            }
            adam.step(model.store.tensors_mut(), &acc);
            zero(&mut acc);
            epoch_loss += batch_loss;
            let rec = LogRecord {
                epoch,
                step: adam.steps(),
                loss: batch_loss / k,
            };
            log::debug!("{}", serde_json::to_string(&rec)?);
            report.steps.push(rec);
        }
        let mean = epoch_loss / segments.len() as f64;
        log::info!("epoch {epoch}: mean loss {mean:.6}");
        report.epoch_losses.push(mean);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::BlockConfig;
    use crate::data::{generate_corpus, segment_labeled_view, CorpusConfig};
    use crate::model::ModelConfig;

    fn tiny_model(arch: Arch) -> Model {
        let config = ModelConfig {
            block: BlockConfig {
                d_model: 8,
                n_heads: 2,
                d_ff: 16,
                ..BlockConfig::default()
            },
            audio_layers: 1,
            text_layers: 1,
            fusion_blocks: 1,
            speech_layers: 1,
            d_patch: 4,
            max_patches: 4,
            max_tokens: 6,
            max_sentences: 6,
            vocab_size: 16,
            seed: 3,
        };
        Model::new(config, arch).unwrap()
    }

    fn tiny_corpus(n: usize) -> Vec<SpeechSample> {
        let cfg = CorpusConfig {
            n_train: n,
            n_test: 1,
            sentences_min: 2,
            sentences_max: 4,
            vocab_size: 16,
            evidence_vocab: 4,
            tokens_min: 3,
            tokens_max: 5,
            patch_grid: crate::sample::PatchGrid { rows: 2, cols: 2 },
            d_patch: 4,
            evidence_tokens: 1,
            evidence_patches: 1,
            signal_fraction: 0.5,
            seed: 5,
            ..CorpusConfig::default()
        };
        generate_corpus(&cfg).unwrap().train
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { accumulation_steps: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let cfg = TrainConfig { learning_rate: 0.1, ..Default::default() };
        let mut p = vec![Tensor::vector(vec![1.0, -2.0, 0.5])];
        let mut adam = Adam::new(&cfg, &p);
        adam.step(&mut p, &[Tensor::vector(vec![3.0, -0.01, 0.0])]);
        let d = p[0].data();
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] - (-1.9)).abs() < 1e-5);
        assert_eq!(d[2], 0.5);
    }

    #[test]
    fn warmup_scales_early_steps() {
        let cfg = TrainConfig { learning_rate: 0.1, warmup_steps: 4, ..Default::default() };
        let mut p = vec![Tensor::vector(vec![0.0])];
        let mut adam = Adam::new(&cfg, &p);
        adam.step(&mut p, &[Tensor::vector(vec![1.0])]);
        assert!((p[0].data()[0] + 0.025).abs() < 1e-8);
    }

    #[test]
    fn accumulated_buffer_equals_sum_of_individual_gradients() {
        let model = tiny_model(Arch::Proposed);
        let samples = tiny_corpus(4);
        let (_, acc) = accumulate_gradients(&model, &samples, 0).unwrap();
        let individual: Vec<Vec<Tensor>> = samples
            .iter()
            .map(|s| speech_gradient(&model, s, 0).unwrap().1)
            .collect();
        for (p, a) in acc.iter().enumerate() {
            for (i, &v) in a.data().iter().enumerate() {
                let oracle: f64 = individual.iter().map(|g| g[p].data()[i]).sum();
                assert!((v - oracle).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn unit_accumulation_equals_per_sample_stepping() {
        let samples = tiny_corpus(5);
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            epochs: 2,
            accumulation_steps: 1,
            shuffle: false,
            ..Default::default()
        };
        let mut trained = tiny_model(Arch::Proposed);
        let report = train_proposed(&mut trained, &samples, &cfg).unwrap();

        let mut manual = tiny_model(Arch::Proposed);
        let mut adam = Adam::new(&cfg, manual.store.tensors());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut losses = Vec::new();
        for _ in 0..cfg.epochs {
            for s in &samples {
                let (loss, grads) = speech_gradient(&manual, s, rng.gen()).unwrap();
                adam.step(manual.store.tensors_mut(), &grads);
                losses.push(loss);
            }
        }
        let logged: Vec<f64> = report.steps.iter().map(|r| r.loss).collect();
        assert_eq!(logged, losses);
        assert_eq!(trained.store.tensors(), manual.store.tensors());
    }

    #[test]
    fn partial_window_is_flushed() {
        let samples = tiny_corpus(5);
        let cfg = TrainConfig { epochs: 1, accumulation_steps: 2, ..Default::default() };
        let report = train_proposed(&mut tiny_model(Arch::Proposed), &samples, &cfg).unwrap();
        assert_eq!(report.steps.len(), 3);
    }

    #[test]
    fn proposed_loss_decreases_under_default_config() {
        let samples = tiny_corpus(20);
        let mut model = tiny_model(Arch::Proposed);
        let report = train_proposed(&mut model, &samples, &TrainConfig::default()).unwrap();
        let l = &report.epoch_losses;
        assert_eq!(l.len(), 20);
        assert!(l[19] < l[0], "{l:?}");
    }

    #[test]
    fn baseline_batches_and_remainder() {
        let segments = segment_labeled_view(&tiny_corpus(6));
        let n = segments.len();
        let cfg = TrainConfig { epochs: 1, batch_size: 4, ..Default::default() };
        let report = train_baseline(&mut tiny_model(Arch::Baseline), &segments, &cfg).unwrap();
        assert_eq!(report.steps.len(), n.div_ceil(4));
        let cfg = TrainConfig { epochs: 1, ..Default::default() };
        let report = train_baseline(&mut tiny_model(Arch::Baseline), &segments, &cfg).unwrap();
        assert_eq!(report.steps.len(), 1, "{n} segments fit one batch of 128");
    }

    #[test]
    fn baseline_loss_decreases_on_separable_data() {
        let samples = tiny_corpus(12);
        let segments = segment_labeled_view(&samples);
        let mut model = tiny_model(Arch::Baseline);
        let cfg = TrainConfig { learning_rate: 3e-3, batch_size: 8, ..Default::default() };
        let report = train_baseline(&mut model, &segments, &cfg).unwrap();
        let l = &report.epoch_losses;
        assert!(l[l.len() - 1] < l[0], "{l:?}");
    }

    #[test]
    fn wrong_architecture_and_divergence_are_reported() {
        let samples = tiny_corpus(2);
        let cfg = TrainConfig { epochs: 1, ..Default::default() };
        assert!(train_proposed(&mut tiny_model(Arch::Baseline), &samples, &cfg).is_err());

        let mut model = tiny_model(Arch::Proposed);
        model.store.tensors_mut()[0].data_mut()[0] = f64::NAN;
        let err = train_proposed(&mut model, &samples, &cfg).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. } | Error::NonFinite { .. }), "{err}");
    }

    #[test]
    fn training_is_deterministic() {
        let samples = tiny_corpus(4);
        let cfg = TrainConfig { epochs: 2, accumulation_steps: 2, learning_rate: 1e-3, ..Default::default() };
        let mut a = tiny_model(Arch::Proposed);
        let mut b = tiny_model(Arch::Proposed);
        let ra = train_proposed(&mut a, &samples, &cfg).unwrap();
        let rb = train_proposed(&mut b, &samples, &cfg).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.checkpoint_id(), b.checkpoint_id());
    }
}
