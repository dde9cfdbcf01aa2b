//! Command-line surface.
//!
//! Output directory layout:
//!
//! ```text
//! <out>/config.json              resolved experiment config
//! <out>/corpus/                  generated corpus
//! <out>/checkpoints/<arch>/      trained checkpoints
//! <out>/logs/train_<arch>.jsonl  {epoch, step, loss} per optimizer step
//! <out>/reports/<name>.json      evaluation reports
//! <out>/interpret/<sample>/      interpretation JSON and SVG heatmaps
//! ```

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{generate_corpus, load_corpus, load_external, save_corpus, segment_labeled_view, Corpus, CorpusConfig};
use crate::error::Error;
use crate::metrics::{evaluate, EvalMode, EvalReport};
use crate::model::{Arch, Model, ModelConfig};
use crate::relevancy::hierarchical_interpret;
use crate::render::render_heatmap;
use crate::sample::SpeechSample;
use crate::train::{train_baseline, train_proposed, TrainConfig, TrainReport};

/// Everything one experiment needs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// Accepts either a full experiment config or a bare corpus config.
    pub fn from_json(text: &str) -> crate::Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        let is_experiment = v
            .as_object()
            .is_some_and(|o| ["corpus", "model", "train"].iter().any(|k| o.contains_key(*k)));
        if is_experiment {
            Ok(serde_json::from_value(v)?)
        } else {
            Ok(Self {
                corpus: serde_json::from_value(v)?,
                ..Self::default()
            })
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.corpus.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> crate::Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let c = &self.corpus;
        let m = &self.model;
        if c.vocab_size > m.vocab_size || c.d_patch != m.d_patch {
            return Err(Error::Config("corpus vocabulary or d_patch does not fit the model".into()));
        }
        if c.patch_grid.patches() > m.max_patches || c.tokens_max > m.max_tokens {
            return Err(Error::Config("corpus sentences exceed the model's positional tables".into()));
        }
        Ok(())
    }
}

#[derive(Parser, Debug)]
#[command(name = "hierattn", version, about = "Hierarchical bi-modal attention classifier with relevancy interpretation")]
struct Cli {
    /// Overrides the corpus, model and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment or corpus config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ArchArg {
    Proposed,
    Baseline,
}

impl From<ArchArg> for Arch {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Proposed => Arch::Proposed,
            ArchArg::Baseline => Arch::Baseline,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus.
    Gen,
    /// Train one architecture on the generated corpus.
    Train {
        #[arg(long, value_enum)]
        arch: ArchArg,
    },
    /// Evaluate trained checkpoints on the test split.
    Eval {
        /// Defaults to every checkpoint present.
        #[arg(long, value_enum)]
        arch: Option<ArchArg>,
    },
    /// Interpret one sample with the proposed checkpoint.
    Interpret {
        /// Participant id or index into the test split.
        #[arg(long)]
        sample_id: Option<String>,
        /// Interpret an external sample file instead.
        #[arg(long, conflicts_with = "sample_id")]
        sample_file: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        top_k: usize,
    },
    /// Run the proposed-vs-baseline experiment end to end.
    Compare,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Runs the CLI; returns the process exit code (0 ok, 1 usage, 2 runtime).
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli, stdout) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let path = match &cli.config {
        Some(p) if !p.is_file() => {
            return Err(Failure::Usage(format!("config file {} not found", p.display())));
        }
        Some(p) => Some(p.clone()),
        None => Some(cli.out.join("config.json")).filter(|p| p.is_file()),
    };
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(&p)?;
            ExperimentConfig::from_json(&text)
                .map_err(|e| Failure::Usage(format!("invalid config {}: {e}", p.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value).map_err(Error::from)?)?;
    Ok(())
}

fn write_log(path: &Path, report: &TrainReport) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = String::new();
    for rec in &report.steps {
        text.push_str(&serde_json::to_string(rec).map_err(Error::from)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn corpus_dir(out: &Path) -> PathBuf {
    out.join("corpus")
}

fn checkpoint_dir(out: &Path, arch: Arch) -> PathBuf {
    out.join("checkpoints").join(arch.to_string())
}

fn existing_corpus(out: &Path) -> CliResult<Corpus> {
    let dir = corpus_dir(out);
    if !dir.join("corpus.json").is_file() {
        return Err(Failure::Usage(format!(
            "no corpus in {}; run `gen` first",
            dir.display()
        )));
    }
    Ok(load_corpus(&dir)?)
}

fn existing_model(out: &Path, arch: Arch) -> CliResult<Model> {
    let dir = checkpoint_dir(out, arch);
    if !dir.join("manifest.json").is_file() {
        return Err(Failure::Usage(format!(
            "no {arch} checkpoint in {}; run `train --arch {arch}` first",
            dir.display()
        )));
    }
    Ok(Model::load(&dir)?)
}

fn train_arch(cfg: &ExperimentConfig, corpus: &Corpus, arch: Arch) -> crate::Result<(Model, TrainReport)> {
    let mut model = Model::new(cfg.model.clone(), arch)?;
    let report = match arch {
        Arch::Proposed => train_proposed(&mut model, &corpus.train, &cfg.train)?,
        Arch::Baseline => train_baseline(&mut model, &segment_labeled_view(&corpus.train), &cfg.train)?,
    };
    Ok((model, report))
}

fn mode_for(arch: Arch) -> EvalMode {
    match arch {
        Arch::Proposed => EvalMode::Proposed,
        Arch::Baseline => EvalMode::BaselineVote,
    }
}

fn pick_sample(corpus: &Corpus, id: &str) -> CliResult<SpeechSample> {
    let all = || corpus.test.iter().chain(&corpus.train);
    if let Some(s) = all().find(|s| s.participant_id == id) {
        return Ok(s.clone());
    }
    match id.parse::<usize>() {
        Ok(i) if i < corpus.test.len() => Ok(corpus.test[i].clone()),
        _ => Err(Failure::Usage(format!("unknown sample id {id}"))),
    }
}

fn dispatch(cli: &Cli, stdout: &mut dyn Write) -> CliResult<()> {
    let out = &cli.out;
    match &cli.command {
        Command::Gen => {
            let cfg = load_config(cli)?;
            let corpus = generate_corpus(&cfg.corpus)?;
            save_corpus(&corpus_dir(out), &corpus)?;
            write_json(&out.join("config.json"), &cfg)?;
            writeln!(
                stdout,
                "generated {} train and {} test speeches in {}",
                corpus.train.len(),
                corpus.test.len(),
                corpus_dir(out).display()
            )?;
        }
        Command::Train { arch } => {
            let cfg = load_config(cli)?;
            let corpus = existing_corpus(out)?;
            let arch = Arch::from(*arch);
            let (model, report) = train_arch(&cfg, &corpus, arch)?;
            let dir = checkpoint_dir(out, arch);
            model.save(&dir)?;
            write_log(&out.join("logs").join(format!("train_{arch}.jsonl")), &report)?;
            let last = report.epoch_losses.last().copied().unwrap_or(f64::NAN);
            writeln!(
                stdout,
                "trained {arch} ({}) final epoch loss {last:.6}; checkpoint in {}",
                model.checkpoint_id(),
                dir.display()
            )?;
        }
        Command::Eval { arch } => {
            let corpus = existing_corpus(out)?;
            let archs: Vec<Arch> = match arch {
                Some(a) => vec![Arch::from(*a)],
                None => [Arch::Proposed, Arch::Baseline]
                    .into_iter()
                    .filter(|a| checkpoint_dir(out, *a).join("manifest.json").is_file())
                    .collect(),
            };
            if archs.is_empty() {
                return Err(Failure::Usage("no checkpoints to evaluate; run `train` first".into()));
            }
            for a in archs {
                let model = existing_model(out, a)?;
                let report = evaluate(&model, &corpus.test, mode_for(a))?;
                write_json(&out.join("reports").join(format!("{a}.json")), &report)?;
                writeln!(stdout, "{report}")?;
            }
        }
        Command::Interpret {
            sample_id,
            sample_file,
            top_k,
        } => {
            let model = existing_model(out, Arch::Proposed)?;
            let sample = match (sample_id, sample_file) {
                (_, Some(path)) => load_external(path)?,
                (Some(id), None) => pick_sample(&existing_corpus(out)?, id)?,
                (None, None) => return Err(Failure::Usage("pass --sample-id or --sample-file".into())),
            };
            let sample = sample.truncated(model.config.max_sentences);
            if *top_k == 0 || *top_k > sample.sentences.len() {
                return Err(Failure::Usage(format!(
                    "--top-k {top_k} outside 1..={}",
                    sample.sentences.len()
                )));
            }
            let result = hierarchical_interpret(&model, &sample, *top_k)?;
            let dir = out.join("interpret").join(&sample.participant_id);
            write_json(&dir.join("interpretation.json"), &result)?;
            let svgs = render_heatmap(&result, &sample, &dir)?;
            writeln!(
                stdout,
                "{}: p(depressed)={:.4} selected sentences {:?}; {} files in {}",
                result.sample_id,
                result.class_probs[1],
                result.selection(),
                svgs.len() + 1,
                dir.display()
            )?;
        }
        Command::Compare => {
            let cfg = load_config(cli)?;
            let reports = compare(&cfg)?;
            for r in &reports {
                writeln!(stdout, "{r}")?;
            }
            write_json(&out.join("reports").join("compare.json"), &reports)?;
        }
    }
    Ok(())
}

/// Generates the corpus, trains both architectures and evaluates them on
/// the test split. Returns the proposed report first.
pub fn compare(cfg: &ExperimentConfig) -> crate::Result<[EvalReport; 2]> {
    let corpus = generate_corpus(&cfg.corpus)?;
    let (proposed, _) = train_arch(cfg, &corpus, Arch::Proposed)?;
    let p = evaluate(&proposed, &corpus.test, EvalMode::Proposed)?;
    log::info!("{p}");
    let (baseline, _) = train_arch(cfg, &corpus, Arch::Baseline)?;
    let b = evaluate(&baseline, &corpus.test, EvalMode::BaselineVote)?;
    log::info!("{b}");
    Ok([p, b])
}
