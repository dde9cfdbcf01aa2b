//! SVG heatmaps for interpretation results.
//!
//! Per selected sentence: a token strip whose backgrounds brighten with
//! relevancy, and the patch grid drawn as grayscale patch energy with a red
//! highlight composited at alpha ∝ score / max. Per speech: a bar chart of
//! sentence scores from lowest (left) to highest (right).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::relevancy::{InterpretationResult, SelectedSentence};
use crate::sample::{SentencePair, SpeechSample};

/// Alpha used everywhere when all scores are zero.
pub const MIN_ALPHA: f64 = 0.05;

const TOKEN_W: f64 = 40.0;
const TOKEN_H: f64 = 24.0;
const CELL: f64 = 20.0;
const HIGHLIGHT: [f64; 3] = [230.0, 40.0, 30.0];

/// `score / max(score)`, clamped to `[0, 1]`; all-zero input yields
/// [`MIN_ALPHA`] everywhere and `true`.
pub fn intensities(scores: &[f64]) -> (Vec<f64>, bool) {
    let max = scores.iter().copied().filter(|s| s.is_finite()).fold(0.0, f64::max);
    if max <= 0.0 {
        return (vec![MIN_ALPHA; scores.len()], true);
    }
    let v = scores
        .iter()
        .map(|&s| if s.is_finite() { (s / max).clamp(0.0, 1.0) } else { 0.0 })
        .collect();
    (v, false)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn rgb(c: [f64; 3]) -> String {
    format!("rgb({},{},{})", c[0].round() as u8, c[1].round() as u8, c[2].round() as u8)
}

/// Mean squared value of each patch row, scaled so the largest is 1.
fn patch_energy(s: &SentencePair) -> Vec<f64> {
    let e: Vec<f64> = (0..s.audio.rows())
        .map(|p| {
            let row = s.audio.row(p);
            row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64
        })
        .collect();
    let max = e.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        e.iter().map(|v| v / max).collect()
    } else {
        e
    }
}

fn check_selection(sel: &SelectedSentence, s: &SentencePair) -> Result<()> {
    if sel.token_scores.len() != s.tokens.len() {
        return Err(Error::InvalidArgument(format!(
            "sentence {}: {} token scores for {} tokens",
            sel.index,
            sel.token_scores.len(),
            s.tokens.len()
        )));
    }
    if sel.patch_scores.len() != s.patch_count() || sel.patch_grid.patches() != s.patch_count() {
        return Err(Error::InvalidArgument(format!(
            "sentence {}: {} patch scores, {} patches, grid {}×{}",
            sel.index,
            sel.patch_scores.len(),
            s.patch_count(),
            sel.patch_grid.rows,
            sel.patch_grid.cols
        )));
    }
    Ok(())
}

/// Token strip plus patch overlay for one selected sentence.
pub fn sentence_svg(sel: &SelectedSentence, s: &SentencePair) -> Result<String> {
    check_selection(sel, s)?;
    let (tok_alpha, tok_zero) = intensities(&sel.token_scores);
    let (patch_alpha, patch_zero) = intensities(&sel.patch_scores);
    let energy = patch_energy(s);
    let grid = sel.patch_grid;

    let strip_w = TOKEN_W * s.tokens.len() as f64;
    let grid_top = TOKEN_H + 30.0;
    let width = strip_w.max(CELL * grid.cols as f64) + 20.0;
    let height = grid_top + CELL * grid.rows as f64 + 40.0;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(out, r#"<title>sentence {}</title>"#, sel.index);
    let _ = writeln!(out, r#"<g class="token-strip" transform="translate(10,10)">"#);
    for (i, (&tok, &a)) in s.tokens.iter().zip(&tok_alpha).enumerate() {
        let x = TOKEN_W * i as f64;
        let _ = writeln!(
            out,
            r#"<rect class="token-bg" x="{x}" y="0" width="{TOKEN_W}" height="{TOKEN_H}" fill="{}" fill-opacity="{a:.4}"/>"#,
            rgb(HIGHLIGHT)
        );
        let _ = writeln!(
            out,
            r#"<text class="token" x="{}" y="{}" text-anchor="middle" font-size="12">{tok}</text>"#,
            x + TOKEN_W / 2.0,
            TOKEN_H * 0.7
        );
    }
    out.push_str("</g>\n");

    let _ = writeln!(out, r#"<g class="patch-grid" transform="translate(10,{grid_top})">"#);
    for p in 0..grid.patches() {
        let (r, c) = (p / grid.cols, p % grid.cols);
        let gray = 255.0 * energy[p];
        let a = patch_alpha[p];
        let color = [0, 1, 2].map(|k| (1.0 - a) * gray + a * HIGHLIGHT[k]);
        let _ = writeln!(
            out,
            r#"<rect class="patch" x="{}" y="{}" width="{CELL}" height="{CELL}" fill="{}" data-alpha="{a:.4}"/>"#,
            CELL * c as f64,
            CELL * r as f64,
            rgb(color)
        );
    }
    out.push_str("</g>\n");

    let mut notes = Vec::new();
    if tok_zero {
        notes.push("all token scores are zero");
    }
    if patch_zero {
        notes.push("all patch scores are zero");
    }
    for (i, n) in notes.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text class="warning" x="10" y="{}" font-size="11" fill="rgb(180,0,0)">warning: {n}</text>"#,
            height - 22.0 + 12.0 * i as f64
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Bar chart of sentence scores ordered from lowest to highest.
pub fn speech_svg(sample_id: &str, scores: &[f64]) -> String {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)));
    let max = scores.iter().copied().fold(0.0, f64::max);
    let (bar_w, chart_h) = (24.0, 120.0);
    let width = bar_w * scores.len() as f64 + 20.0;
    let height = chart_h + 50.0;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(out, "<title>{}</title>", escape(sample_id));
    for (slot, &j) in order.iter().enumerate() {
        let h = if max > 0.0 { chart_h * scores[j] / max } else { 0.0 };
        let x = 10.0 + bar_w * slot as f64;
        let _ = writeln!(
            out,
            r#"<rect class="bar" data-sentence="{j}" x="{}" y="{}" width="{}" height="{h:.3}" fill="rgb(60,90,170)"/>"#,
            x + 2.0,
            10.0 + chart_h - h,
            bar_w - 4.0
        );
        let _ = writeln!(
            out,
            r#"<text class="bar-label" x="{}" y="{}" text-anchor="middle" font-size="10">{j}</text>"#,
            x + bar_w / 2.0,
            chart_h + 25.0
        );
    }
    if max <= 0.0 {
        let _ = writeln!(
            out,
            r#"<text class="warning" x="10" y="{}" font-size="11" fill="rgb(180,0,0)">warning: all sentence scores are zero</text>"#,
            height - 8.0
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Writes `speech.svg` and one `sentence_<index>.svg` per selected sentence.
pub fn render_heatmap(result: &InterpretationResult, sample: &SpeechSample, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if result.sentence_scores.len() != sample.sentences.len() {
        return Err(Error::InvalidArgument(format!(
            "{} sentence scores for {} sentences",
            result.sentence_scores.len(),
            sample.sentences.len()
        )));
    }
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::with_capacity(result.selected.len() + 1);
    let path = out_dir.join("speech.svg");
    fs::write(&path, speech_svg(&result.sample_id, &result.sentence_scores))?;
    written.push(path);
    for sel in &result.selected {
        let s = sample.sentences.get(sel.index).ok_or_else(|| {
            Error::InvalidArgument(format!("selected sentence {} out of range", sel.index))
        })?;
        let path = out_dir.join(format!("sentence_{}.svg", sel.index));
        fs::write(&path, sentence_svg(sel, s)?)?;
        written.push(path);
    }
    Ok(written)
}

/// Element counts used to check rendered output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SvgCensus {
    pub patches: usize,
    pub tokens: usize,
    pub bars: usize,
    pub warnings: usize,
}

pub fn svg_census(svg: &str) -> SvgCensus {
    SvgCensus {
        patches: svg.matches(r#"<rect class="patch""#).count(),
        tokens: svg.matches(r#"<text class="token""#).count(),
        bars: svg.matches(r#"<rect class="bar""#).count(),
        warnings: svg.matches(r#"<text class="warning""#).count(),
    }
}

/// Checks a sentence heatmap: a single `<svg>` root, one patch rect per
/// patch and one token text node per token.
pub fn check_sentence_svg(svg: &str, patches: usize, tokens: usize) -> Result<()> {
    let opens = svg.matches("<svg").count();
    let closes = svg.matches("</svg>").count();
    if opens != 1 || closes != 1 || !svg.trim_end().ends_with("</svg>") {
        return Err(Error::parse("svg", "expected exactly one <svg> root element"));
    }
    let c = svg_census(svg);
    if c.patches != patches || c.tokens != tokens {
        return Err(Error::parse(
            "svg",
            format!(
                "found {} patch rects and {} token nodes, expected {patches} and {tokens}",
                c.patches, c.tokens
            ),
        ));
    }
    Ok(())
}
