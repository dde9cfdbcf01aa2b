//! Hierarchical relevancy propagation over recorded attention.
//!
//! Each attention layer contributes a gradient-weighted map
//! `Ā = mean_h((∇A ⊙ A)⁺)`. Relevancy maps start as the identity (within a
//! sequence) or zeros (text-to-audio) and are updated layer by layer in
//! forward order:
//!
//! * self-attention: `R ← R + Ā·R` for `R^ss`, `R^tt`, `R^aa`, and also
//!   `R^ta ← R^ta + Ā·R^ta` on text self-attention layers;
//! * cross-attention: `R^ta ← R^ta + Ā·R̄^aa`, where `R̄^aa` is `R^aa` with
//!   its non-identity part row-normalized.
//!
//! The speech-level pass ranks sentences by the `[cls]` row of `R^ss`; the
//! sentence-level pass reads token scores from `R^tt` and patch scores from
//! `R^ta`.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionTrace, AttnKind, Graph, LayerId, Stage, TraceSink};
use crate::error::{Error, Result};
use crate::model::{Arch, ClassLogits, Model, DEPRESSED};
use crate::numerics::{clamp_nonneg, matmul, Tensor};
use crate::sample::{PatchGrid, SpeechSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    /// Speech `[cls]` and sentences.
    Ss,
    /// Text tokens.
    Tt,
    /// Audio patches.
    Aa,
    /// Text rows, audio columns.
    Ta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelevancyMap {
    pub kind: MapKind,
    pub matrix: Tensor,
    /// Layers applied so far, in order.
    pub history: Vec<LayerId>,
}

/// Head-averaged, zero-clamped `∇A ⊙ A` of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedAttentionMap {
    pub matrix: Tensor,
    pub source: LayerId,
}

pub fn weighted_attention(trace: &AttentionTrace) -> Result<WeightedAttentionMap> {
    let grad = trace
        .grad
        .as_ref()
        .ok_or_else(|| Error::Trace(format!("layer {:?} has no gradient", trace.layer)))?;
    trace.attn.same_shape("weighted_attention", grad)?;
    let (h, q, k) = (trace.heads(), trace.queries(), trace.keys());
    let product: Vec<f64> = trace.attn.data().iter().zip(grad.data()).map(|(a, g)| a * g).collect();
    let positive = clamp_nonneg(&Tensor::new(vec![h, q, k], product)?);
    let mut out = vec![0.0; q * k];
    for head in positive.data().chunks(q * k) {
        for (o, v) in out.iter_mut().zip(head) {
            *o += v;
        }
    }
    let matrix = Tensor::new(vec![q, k], out)?.scale(1.0 / h as f64);
    Ok(WeightedAttentionMap {
        matrix,
        source: trace.layer,
    })
}

/// Identity for `Ss`/`Tt`/`Aa`, zeros for `Ta`. `cols` is ignored for
/// square kinds.
pub fn init_relevancy(kind: MapKind, rows: usize, cols: usize) -> RelevancyMap {
    let matrix = match kind {
        MapKind::Ta => Tensor::zeros(&[rows, cols]),
        _ => Tensor::eye(rows),
    };
    RelevancyMap {
        kind,
        matrix,
        history: Vec::new(),
    }
}

fn check_square(abar: &WeightedAttentionMap, n: usize, op: &'static str) -> Result<()> {
    if abar.matrix.shape() != [n, n] {
        return Err(Error::Shape {
            op,
            left: vec![n, n],
            right: abar.matrix.shape().to_vec(),
        });
    }
    Ok(())
}

/// `R ← R + Ā·R` for a square map.
pub fn update_self(r: &mut RelevancyMap, abar: &WeightedAttentionMap) -> Result<()> {
    if r.kind == MapKind::Ta {
        return Err(Error::InvalidArgument("update_self applies to square maps".into()));
    }
    check_square(abar, r.matrix.rows(), "update_self")?;
    r.matrix = r.matrix.add(&matmul(&abar.matrix, &r.matrix)?)?;
    r.history.push(abar.source);
    Ok(())
}

/// `R^ta ← R^ta + Ā·R^ta` for a text self-attention layer.
pub fn update_cross_via_self(r_ta: &mut RelevancyMap, abar: &WeightedAttentionMap) -> Result<()> {
    if r_ta.kind != MapKind::Ta {
        return Err(Error::InvalidArgument("update_cross_via_self expects a ta map".into()));
    }
    check_square(abar, r_ta.matrix.rows(), "update_cross_via_self")?;
    r_ta.matrix = r_ta.matrix.add(&matmul(&abar.matrix, &r_ta.matrix)?)?;
    r_ta.history.push(abar.source);
    Ok(())
}

/// `R̄^aa = R̂^aa / rowsum(R̂^aa) + I` with `R̂^aa = R^aa − I`. Rows of `R̂^aa`
/// that sum to zero stay zero.
pub fn normalize_aa(r_aa: &RelevancyMap) -> Result<Tensor> {
    let (n, m) = r_aa.matrix.as_matrix("normalize_aa")?;
    if n != m {
        return Err(Error::Shape {
            op: "normalize_aa",
            left: vec![n, n],
            right: vec![n, m],
        });
    }
    let mut out = r_aa.matrix.clone();
    for i in 0..n {
        out.set(i, i, out.get(i, i) - 1.0);
    }
    for i in 0..n {
        let sum: f64 = out.row(i).iter().sum();
        if sum != 0.0 {
            for j in 0..n {
                out.set(i, j, out.get(i, j) / sum);
            }
        }
        out.set(i, i, out.get(i, i) + 1.0);
    }
    Ok(out)
}

/// `R^ta ← R^ta + Ā·R̄^aa` for a cross-attention layer.
pub fn update_cross(r_ta: &mut RelevancyMap, abar: &WeightedAttentionMap, rbar_aa: &Tensor) -> Result<()> {
    if r_ta.kind != MapKind::Ta {
        return Err(Error::InvalidArgument("update_cross expects a ta map".into()));
    }
    let (t, a) = (r_ta.matrix.rows(), r_ta.matrix.cols());
    if abar.matrix.shape() != [t, a] || rbar_aa.shape() != [a, a] {
        return Err(Error::Shape {
            op: "update_cross",
            left: vec![t, a],
            right: abar.matrix.shape().iter().chain(rbar_aa.shape()).copied().collect(),
        });
    }
    r_ta.matrix = r_ta.matrix.add(&matmul(&abar.matrix, rbar_aa)?)?;
    r_ta.history.push(abar.source);
    Ok(())
}

fn check_forward_order<'a>(traces: impl IntoIterator<Item = &'a AttentionTrace>) -> Result<()> {
    let mut last: Option<usize> = None;
    for t in traces {
        if last.is_some_and(|l| t.seq <= l) {
            return Err(Error::Trace(format!(
                "trace {:?} (seq {}) is out of forward order",
                t.layer, t.seq
            )));
        }
        last = Some(t.seq);
    }
    Ok(())
}

/// Sentence scores from the speech-level self-attention traces: row 0 of
/// `R^ss` without its `[cls]` column.
pub fn speech_level_interpret(traces: &[AttentionTrace], n_sentences: usize) -> Result<Vec<f64>> {
    check_forward_order(traces)?;
    let s = n_sentences + 1;
    let mut r = init_relevancy(MapKind::Ss, s, s);
    for (depth, t) in traces.iter().enumerate() {
        if t.layer.kind != AttnKind::SpeechSelf || t.layer.depth != depth {
            return Err(Error::Trace(format!(
                "expected speech layer {depth}, found {:?}",
                t.layer
            )));
        }
        update_self(&mut r, &weighted_attention(t)?)?;
    }
    Ok(r.matrix.row(0)[1..].to_vec())
}

/// Sequence lengths of one sentence, each including its `[cls]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SentenceDims {
    pub text: usize,
    pub audio: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentenceRelevancy {
    pub token_scores: Vec<f64>,
    pub patch_scores: Vec<f64>,
    pub audio_cls_score: f64,
    pub r_tt: RelevancyMap,
    pub r_aa: RelevancyMap,
    pub r_ta: RelevancyMap,
}

/// Checks that one sentence's traces follow the block structure: audio and
/// text encoder layers by increasing depth, then fusion blocks each
/// contributing a text self-attention layer immediately followed by its
/// cross-attention layer.
fn check_sentence_structure(traces: &[AttentionTrace]) -> Result<()> {
    check_forward_order(traces)?;
    let sentence = traces.first().and_then(|t| t.layer.sentence);
    let mut next_audio = 0;
    let mut next_text = 0;
    let mut next_fusion = 0;
    let mut pending_cross: Option<usize> = None;
    for t in traces {
        let l = t.layer;
        if l.sentence != sentence {
            return Err(Error::Trace(format!("trace {l:?} belongs to a different sentence")));
        }
        let ok = match (l.stage, l.kind) {
            (Stage::AudioEncoder, AttnKind::AudioSelf) => {
                let ok = l.depth == next_audio && next_fusion == 0 && pending_cross.is_none();
                next_audio += 1;
                ok
            }
            (Stage::TextEncoder, AttnKind::TextSelf) => {
                let ok = l.depth == next_text && next_fusion == 0 && pending_cross.is_none();
                next_text += 1;
                ok
            }
            (Stage::Fusion, AttnKind::TextSelf) => {
                let ok = l.depth == next_fusion && pending_cross.is_none();
                pending_cross = Some(l.depth);
                ok
            }
            (Stage::Fusion, AttnKind::Cross) => {
                let ok = pending_cross == Some(l.depth);
                pending_cross = None;
                next_fusion += 1;
                ok
            }
            _ => false,
        };
        if !ok {
            return Err(Error::Trace(format!("unexpected or misordered trace {l:?}")));
        }
    }
    if pending_cross.is_some() {
        return Err(Error::Trace("fusion block without its cross-attention trace".into()));
    }
    Ok(())
}

/// Token and patch relevancy for one sentence from its own traces.
pub fn sentence_level_interpret(traces: &[AttentionTrace], dims: SentenceDims) -> Result<SentenceRelevancy> {
    check_sentence_structure(traces)?;
    let mut r_tt = init_relevancy(MapKind::Tt, dims.text, dims.text);
    let mut r_aa = init_relevancy(MapKind::Aa, dims.audio, dims.audio);
    let mut r_ta = init_relevancy(MapKind::Ta, dims.text, dims.audio);
    for t in traces {
        let abar = weighted_attention(t)?;
        match t.layer.kind {
            AttnKind::AudioSelf => update_self(&mut r_aa, &abar)?,
            AttnKind::TextSelf => {
                update_self(&mut r_tt, &abar)?;
                update_cross_via_self(&mut r_ta, &abar)?;
            }
            AttnKind::Cross => {
                let rbar = normalize_aa(&r_aa)?;
                update_cross(&mut r_ta, &abar, &rbar)?;
            }
            AttnKind::SpeechSelf => unreachable!("rejected by structure check"),
        }
    }
    Ok(SentenceRelevancy {
        token_scores: r_tt.matrix.row(0)[1..].to_vec(),
        patch_scores: r_ta.matrix.row(0)[1..].to_vec(),
        audio_cls_score: r_ta.matrix.get(0, 0),
        r_tt,
        r_aa,
        r_ta,
    })
}

/// Indices by descending score; ties go to the lower index.
pub fn rank_sentences(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedSentence {
    pub index: usize,
    pub token_scores: Vec<f64>,
    pub patch_scores: Vec<f64>,
    pub audio_cls_score: f64,
    pub patch_grid: PatchGrid,
}

/// Speech-level scores plus token and patch scores for the top sentences.
/// Serializes to the interpretation dump format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpretationResult {
    pub sample_id: String,
    pub checkpoint_id: String,
    pub sentence_scores: Vec<f64>,
    /// Ordered by descending sentence score.
    pub selected: Vec<SelectedSentence>,
    pub class_probs: [f64; 2],
}

impl InterpretationResult {
    pub fn selection(&self) -> Vec<usize> {
        self.selected.iter().map(|s| s.index).collect()
    }
}

/// Interprets an already recorded forward/backward pass of the proposed model.
pub fn interpret_traces(
    traces: &[AttentionTrace],
    sample: &SpeechSample,
    top_k: usize,
) -> Result<(Vec<f64>, Vec<SelectedSentence>)> {
    let n = sample.sentences.len();
    if top_k == 0 || top_k > n {
        return Err(Error::InvalidArgument(format!("top_k {top_k} outside 1..={n}")));
    }
    let speech: Vec<AttentionTrace> = traces
        .iter()
        .filter(|t| t.layer.stage == Stage::Speech)
        .cloned()
        .collect();
    let scores = speech_level_interpret(&speech, n)?;
    let mut selected = Vec::with_capacity(top_k);
    for &j in rank_sentences(&scores).iter().take(top_k) {
        let own: Vec<AttentionTrace> = traces
            .iter()
            .filter(|t| t.layer.sentence == Some(j))
            .cloned()
            .collect();
        let s = &sample.sentences[j];
        let dims = SentenceDims {
            text: s.tokens.len() + 1,
            audio: s.patch_count() + 1,
        };
        let rel = sentence_level_interpret(&own, dims)?;
        selected.push(SelectedSentence {
            index: j,
            token_scores: rel.token_scores,
            patch_scores: rel.patch_scores,
            audio_cls_score: rel.audio_cls_score,
            patch_grid: sample.patch_grid,
        });
    }
    Ok((scores, selected))
}

/// One forward pass recording every attention layer, one backward pass from
/// the depressed-class logit, then the speech-level and sentence-level
/// passes over the recorded traces.
pub fn hierarchical_interpret(model: &Model, sample: &SpeechSample, top_k: usize) -> Result<InterpretationResult> {
    let (traces, logits) = record_traces(model, sample)?;
    let expected = sample.sentences.len() * model.traces_per_sentence() + model.config.speech_layers;
    if traces.len() != expected {
        return Err(Error::Trace(format!("expected {expected} traces, recorded {}", traces.len())));
    }
    let (sentence_scores, selected) = interpret_traces(&traces, sample, top_k)?;
    Ok(InterpretationResult {
        sample_id: sample.participant_id.clone(),
        checkpoint_id: model.checkpoint_id(),
        sentence_scores,
        selected,
        class_probs: logits.probabilities(),
    })
}

/// Forward + backward from the depressed logit; returns every trace with
/// gradients attached.
pub fn record_traces(model: &Model, sample: &SpeechSample) -> Result<(Vec<AttentionTrace>, ClassLogits)> {
    if model.arch != Arch::Proposed {
        return Err(Error::InvalidArgument("interpretation needs the proposed model".into()));
    }
    let mut g = Graph::new(&model.store);
    let mut sink = TraceSink::new();
    let y = model.proposed_forward(&mut g, &mut sink, sample)?;
    let logits = ClassLogits::from_tensor(g.tape.value(y))?;
    let yd = g.tape.pick(y, DEPRESSED)?;
    g.tape.backward(yd)?;
    Ok((sink.collect(&g.tape)?, logits))
}

/// Structural validation of an interpretation dump.
pub fn validate_interpretation_json(v: &serde_json::Value) -> Result<()> {
    let bad = |m: &str| Error::parse("interpretation json", m.to_string());
    let obj = v.as_object().ok_or_else(|| bad("top level must be an object"))?;
    obj.get("sample_id").and_then(|s| s.as_str()).ok_or_else(|| bad("sample_id must be a string"))?;
    let nonneg_array = |val: Option<&serde_json::Value>, name: &str| -> Result<usize> {
        let arr = val
            .and_then(|a| a.as_array())
            .ok_or_else(|| bad(&format!("{name} must be an array")))?;
        for x in arr {
            let f = x.as_f64().ok_or_else(|| bad(&format!("{name} entries must be numbers")))?;
            if !(f >= 0.0) {
                return Err(bad(&format!("{name} entries must be non-negative")));
            }
        }
        Ok(arr.len())
    };
    let n = nonneg_array(obj.get("sentence_scores"), "sentence_scores")?;
    if nonneg_array(obj.get("class_probs"), "class_probs")? != 2 {
        return Err(bad("class_probs must have two entries"));
    }
    let selected = obj
        .get("selected")
        .and_then(|s| s.as_array())
        .ok_or_else(|| bad("selected must be an array"))?;
    let mut seen = std::collections::HashSet::new();
    for s in selected {
        let s = s.as_object().ok_or_else(|| bad("selected entries must be objects"))?;
        let index = s
            .get("index")
            .and_then(|i| i.as_u64())
            .ok_or_else(|| bad("index must be a non-negative integer"))? as usize;
        if index >= n || !seen.insert(index) {
            return Err(bad("selected indices must be distinct and within sentence_scores"));
        }
        nonneg_array(s.get("token_scores"), "token_scores")?;
        let patches = nonneg_array(s.get("patch_scores"), "patch_scores")?;
        s.get("audio_cls_score")
            .and_then(|x| x.as_f64())
            .ok_or_else(|| bad("audio_cls_score must be a number"))?;
        let grid = s
            .get("patch_grid")
            .and_then(|g| g.as_object())
            .ok_or_else(|| bad("patch_grid must be an object"))?;
        let dim = |k: &str| grid.get(k).and_then(|x| x.as_u64()).ok_or_else(|| bad("patch_grid needs rows and cols"));
        if (dim("rows")? * dim("cols")?) as usize != patches {
            return Err(bad("patch_scores length must equal rows × cols"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layer(kind: AttnKind, stage: Stage, depth: usize) -> LayerId {
        LayerId {
            kind,
            stage,
            depth,
            sentence: if stage == Stage::Speech { None } else { Some(0) },
        }
    }

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random_nonneg(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn wmap(matrix: Tensor) -> WeightedAttentionMap {
        WeightedAttentionMap {
            matrix,
            source: layer(AttnKind::TextSelf, Stage::TextEncoder, 0),
        }
    }

    #[test]
    fn weighted_attention_cases() {
        let id = layer(AttnKind::SpeechSelf, Stage::Speech, 0);
        let a = [m(&[&[0.2, 0.8], &[0.5, 0.5]]), m(&[&[0.6, 0.4], &[0.1, 0.9]])];
        let ones = [Tensor::filled(&[2, 2], 1.0), Tensor::filled(&[2, 2], 1.0)];
        let t = AttentionTrace::from_heads(id, 0, &a, Some(&ones)).unwrap();
        let w = weighted_attention(&t).unwrap();
        let mean = a[0].add(&a[1]).unwrap().scale(0.5);
        assert!(w.matrix.max_abs_diff(&mean).unwrap() < 1e-15);

        let neg = [Tensor::filled(&[2, 2], -1.0), Tensor::filled(&[2, 2], -3.0)];
        let t = AttentionTrace::from_heads(id, 0, &a, Some(&neg)).unwrap();
        assert!(weighted_attention(&t).unwrap().matrix.data().iter().all(|&v| v == 0.0));

        let one = [m(&[&[1.0]]), m(&[&[1.0]])];
        let g = [m(&[&[2.0]]), m(&[&[-4.0]])];
        let t = AttentionTrace::from_heads(id, 0, &one, Some(&g)).unwrap();
        assert_eq!(weighted_attention(&t).unwrap().matrix.data(), &[1.0]);

        let t = AttentionTrace::from_heads(id, 0, &one, None).unwrap();
        assert!(matches!(weighted_attention(&t), Err(Error::Trace(_))));
    }

    #[test]
    fn init_kinds() {
        assert_eq!(init_relevancy(MapKind::Ss, 3, 3).matrix, Tensor::eye(3));
        assert_eq!(init_relevancy(MapKind::Ta, 2, 4).matrix, Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn update_self_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut r = init_relevancy(MapKind::Tt, 3, 3);
        update_self(&mut r, &wmap(Tensor::zeros(&[3, 3]))).unwrap();
        assert_eq!(r.matrix, Tensor::eye(3));

        let a1 = random_nonneg(&mut rng, 3, 3);
        let a2 = random_nonneg(&mut rng, 3, 3);
        let mut r = init_relevancy(MapKind::Tt, 3, 3);
        update_self(&mut r, &wmap(a1.clone())).unwrap();
        assert!(r.matrix.max_abs_diff(&Tensor::eye(3).add(&a1).unwrap()).unwrap() < 1e-15);
        update_self(&mut r, &wmap(a2.clone())).unwrap();
        let expected = matmul(&Tensor::eye(3).add(&a2).unwrap(), &Tensor::eye(3).add(&a1).unwrap()).unwrap();
        assert!(r.matrix.max_abs_diff(&expected).unwrap() < 1e-12);
        assert_eq!(r.history.len(), 2);

        assert!(update_self(&mut r, &wmap(Tensor::zeros(&[2, 2]))).is_err());
    }

    #[test]
    fn update_cross_via_self_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut r = init_relevancy(MapKind::Ta, 2, 3);
        update_cross_via_self(&mut r, &wmap(random_nonneg(&mut rng, 2, 2))).unwrap();
        assert_eq!(r.matrix, Tensor::zeros(&[2, 3]));

        let base = random_nonneg(&mut rng, 2, 3);
        r.matrix = base.clone();
        update_cross_via_self(&mut r, &wmap(Tensor::eye(2))).unwrap();
        assert!(r.matrix.max_abs_diff(&base.scale(2.0)).unwrap() < 1e-15);

        let a = random_nonneg(&mut rng, 2, 2);
        r.matrix = base.clone();
        update_cross_via_self(&mut r, &wmap(a.clone())).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let e = base.get(i, j) + a.get(i, 0) * base.get(0, j) + a.get(i, 1) * base.get(1, j);
                assert!((r.matrix.get(i, j) - e).abs() < 1e-12);
            }
        }
        assert!(update_cross_via_self(&mut r, &wmap(Tensor::zeros(&[3, 3]))).is_err());
    }

    #[test]
    fn normalize_aa_cases() {
        let r = init_relevancy(MapKind::Aa, 3, 3);
        assert_eq!(normalize_aa(&r).unwrap(), Tensor::eye(3));

        let mut r = init_relevancy(MapKind::Aa, 2, 2);
        r.matrix = m(&[&[2.0, 3.0], &[0.0, 1.0]]);
        let n = normalize_aa(&r).unwrap();
        assert_eq!(n, m(&[&[1.25, 0.75], &[0.0, 1.0]]));
    }

    #[test]
    fn update_cross_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_nonneg(&mut rng, 2, 3);
        let mut r = init_relevancy(MapKind::Ta, 2, 3);
        update_cross(&mut r, &wmap(a.clone()), &Tensor::eye(3)).unwrap();
        assert_eq!(r.matrix, a);
        let before = r.matrix.clone();
        update_cross(&mut r, &wmap(Tensor::zeros(&[2, 3])), &Tensor::eye(3)).unwrap();
        assert_eq!(r.matrix, before);

        // Hand-built 2×2 case: Ā = [[a, b], [c, d]], R̄ = [[1+p, q], [0, 1]].
        let (a_, b_, c_, d_, p, q) = (0.1, 0.4, 0.3, 0.2, 0.25, 0.75);
        let mut r = init_relevancy(MapKind::Ta, 2, 2);
        let rbar = m(&[&[1.0 + p, q], &[0.0, 1.0]]);
        update_cross(&mut r, &wmap(m(&[&[a_, b_], &[c_, d_]])), &rbar).unwrap();
        let expected = m(&[&[a_ * (1.0 + p), a_ * q + b_], &[c_ * (1.0 + p), c_ * q + d_]]);
        assert!(r.matrix.max_abs_diff(&expected).unwrap() < 1e-15);

        assert!(update_cross(&mut r, &wmap(Tensor::zeros(&[2, 3])), &Tensor::eye(2)).is_err());
    }

    fn speech_trace(depth: usize, a: Tensor, g: Tensor) -> AttentionTrace {
        AttentionTrace::from_heads(layer(AttnKind::SpeechSelf, Stage::Speech, depth), depth, &[a], Some(&[g])).unwrap()
    }

    #[test]
    fn speech_level_cases() {
        let a = m(&[&[0.1, 0.6, 0.3], &[0.3, 0.3, 0.4], &[0.2, 0.2, 0.6]]);
        let t = speech_trace(0, a.clone(), Tensor::filled(&[3, 3], 1.0));
        let s = speech_level_interpret(&[t], 2).unwrap();
        assert!((s[0] - 0.6).abs() < 1e-15 && (s[1] - 0.3).abs() < 1e-15);

        let zero: Vec<_> = (0..6).map(|d| speech_trace(d, a.clone(), Tensor::zeros(&[3, 3]))).collect();
        assert_eq!(speech_level_interpret(&zero, 2).unwrap(), vec![0.0, 0.0]);

        let mut swapped = zero.clone();
        swapped.swap(1, 2);
        assert!(speech_level_interpret(&swapped, 2).is_err());
    }

    #[test]
    fn ranking_breaks_ties_by_index() {
        assert_eq!(rank_sentences(&[0.2, 0.5, 0.2, 0.9]), vec![3, 1, 0, 2]);
    }

    fn sentence_traces(rng: &mut ChaCha8Rng, t: usize, a: usize, fusion: usize) -> Vec<AttentionTrace> {
        let mut seq = 0;
        let mut out = Vec::new();
        let mut push = |kind, stage, depth, q, k, rng: &mut ChaCha8Rng| {
            let attn = random_nonneg(rng, q, k);
            let grad = Tensor::new(vec![q, k], (0..q * k).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            out.push(AttentionTrace::from_heads(layer(kind, stage, depth), seq, &[attn], Some(&[grad])).unwrap());
            seq += 1;
        };
        push(AttnKind::AudioSelf, Stage::AudioEncoder, 0, a, a, rng);
        push(AttnKind::TextSelf, Stage::TextEncoder, 0, t, t, rng);
        for d in 0..fusion {
            push(AttnKind::TextSelf, Stage::Fusion, d, t, t, rng);
            push(AttnKind::Cross, Stage::Fusion, d, t, a, rng);
        }
        out
    }

    #[test]
    fn sentence_level_without_cross_layers_has_zero_patches() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let traces = sentence_traces(&mut rng, 3, 4, 0);
        let r = sentence_level_interpret(&traces, SentenceDims { text: 3, audio: 4 }).unwrap();
        assert_eq!(r.token_scores.len(), 2);
        assert_eq!(r.patch_scores, vec![0.0; 3]);
    }

    #[test]
    fn sentence_level_rejects_misordered_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dims = SentenceDims { text: 3, audio: 4 };
        let traces = sentence_traces(&mut rng, 3, 4, 2);
        assert!(sentence_level_interpret(&traces, dims).is_ok());

        let mut cross_first = traces.clone();
        cross_first.swap(2, 3);
        assert!(sentence_level_interpret(&cross_first, dims).is_err());

        let mut missing_cross = traces.clone();
        missing_cross.pop();
        assert!(sentence_level_interpret(&missing_cross, dims).is_err());

        let mut reseq = traces;
        reseq[4].seq = 1;
        assert!(sentence_level_interpret(&reseq, dims).is_err());
    }

    #[test]
    fn interpretation_json_validation() {
        let good = serde_json::json!({
            "sample_id": "s", "checkpoint_id": "c",
            "sentence_scores": [0.1, 0.2],
            "selected": [{"index": 1, "token_scores": [0.5], "patch_scores": [0.1, 0.0],
                           "audio_cls_score": 0.0, "patch_grid": {"rows": 1, "cols": 2}}],
            "class_probs": [0.3, 0.7]
        });
        validate_interpretation_json(&good).unwrap();
        let mut bad = good.clone();
        bad["selected"][0]["index"] = serde_json::json!(5);
        assert!(validate_interpretation_json(&bad).is_err());
        let mut bad = good.clone();
        bad["selected"][0]["patch_grid"]["rows"] = serde_json::json!(2);
        assert!(validate_interpretation_json(&bad).is_err());
        let mut bad = good;
        bad["sentence_scores"][0] = serde_json::json!(-1.0);
        assert!(validate_interpretation_json(&bad).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn maps_stay_nonnegative(seed in any::<u64>(), t in 2usize..5, a in 2usize..6, fusion in 0usize..4) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let traces = sentence_traces(&mut rng, t, a, fusion);
                let r = sentence_level_interpret(&traces, SentenceDims { text: t, audio: a }).unwrap();
                for map in [&r.r_tt, &r.r_aa, &r.r_ta] {
                    prop_assert!(map.matrix.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
                }
            }

            #[test]
            fn normalized_rows_sum_to_one(seed in any::<u64>(), n in 1usize..7) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut r = init_relevancy(MapKind::Aa, n, n);
                let mut hat = random_nonneg(&mut rng, n, n);
                if n > 1 {
                    for j in 0..n { hat.set(0, j, 0.0); }
                }
                r.matrix = Tensor::eye(n).add(&hat).unwrap();
                let norm = normalize_aa(&r).unwrap();
                for i in 0..n {
                    let s: f64 = (0..n).map(|j| norm.get(i, j) - if i == j { 1.0 } else { 0.0 }).sum();
                    if hat.row(i).iter().any(|&v| v != 0.0) {
                        prop_assert!((s - 1.0).abs() < 1e-12);
                    } else {
                        prop_assert_eq!(s, 0.0);
                    }
                }
            }
        }
    }
}
