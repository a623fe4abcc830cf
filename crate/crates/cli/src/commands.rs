//! The operator commands. Each returns its result instead of exiting so the
//! binary and the tests share one code path.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use glks::data::{
    read_jsonl, synth_corpus, write_jsonl, EncodedEpisode, Episode, Limits, SynthConfig,
    SynthManifest, Vocabulary,
};
use glks::eval::{
    evaluate_corpus, CorpusScores, EchoModel, FixedResponses, KSTrace, ModelGenerator, RefMode,
    ResponseGenerator,
};
use glks::model::Glks;
use glks::train::{checkpoint, fit_with, Checkpoint, TrainOutcome};
use glks::{GlksError, Result};

use crate::config::RunConfig;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train.log";
pub const VOCAB_FILE: &str = "vocab.txt";

/// Worker count from `GLKS_THREADS`; 1 when unset.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("GLKS_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(GlksError::Config(format!(
                "GLKS_THREADS must be a positive integer, got {v:?}"
            ))),
        },
        Err(_) => Ok(1),
    }
}

fn require_file(what: &str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(GlksError::Config(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

fn read_split(what: &str, path: &Path, limits: Limits) -> Result<Vec<Episode>> {
    require_file(what, path)?;
    let episodes = read_jsonl(path, limits)?;
    if episodes.is_empty() {
        return Err(GlksError::Config(format!(
            "{what} {} has no episodes",
            path.display()
        )));
    }
    Ok(episodes)
}

pub struct SynthArgs {
    pub config: SynthConfig,
    pub out: PathBuf,
}

/// Path of the manifest written next to a synthetic corpus.
pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<PathBuf> {
    let corpus = synth_corpus(&args.config)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_jsonl(&args.out, &corpus.episodes)?;
    let manifest = SynthManifest {
        config: corpus.config,
        gold_windows: corpus.gold_windows,
    };
    let path = manifest_path(&args.out);
    let mut w = BufWriter::new(File::create(&path)?);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(path)
}

/// The splits and vocabulary a training run needs.
pub struct Prepared {
    pub train: Vec<Episode>,
    pub valid: Vec<Episode>,
    pub vocab: Vocabulary,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let limits = cfg.limits();
    let train_path = cfg
        .train_path
        .as_deref()
        .ok_or_else(|| GlksError::Config("train_path is not set".into()))?;
    let valid_path = cfg
        .valid_path
        .as_deref()
        .ok_or_else(|| GlksError::Config("valid_path is not set".into()))?;
    if let Some(p) = &cfg.embeddings_path {
        require_file("embeddings_path", p)?;
    }
    let train = read_split("train_path", train_path, limits)?;
    let valid = read_split("valid_path", valid_path, limits)?;
    let vocab = match &cfg.vocab_path {
        Some(p) => {
            require_file("vocab_path", p)?;
            Vocabulary::load(p)?
        }
        None => Vocabulary::build(&train, cfg.vocab_cap)?,
    };
    Ok(Prepared {
        train,
        valid,
        vocab,
    })
}

/// Trains with `cfg`, writing the log to `log`.
pub fn train_model(cfg: &RunConfig, data: &Prepared, log: &mut dyn Write) -> Result<TrainOutcome> {
    let mut train_cfg = cfg.train.clone();
    train_cfg.eval_threads = threads_from_env()?;
    let model_cfg = cfg.model_config(data.vocab.len());
    let embeddings = cfg.embeddings_path.clone();
    fit_with(
        &model_cfg,
        &train_cfg,
        &data.vocab,
        &data.train,
        &data.valid,
        log,
        |model| {
            if let Some(path) = embeddings {
                let reader = BufReader::new(File::open(&path)?);
                model
                    .encoders
                    .load_embeddings(&mut model.params, &data.vocab, reader)?;
            }
            Ok(())
        },
    )
}

pub struct TrainArtifacts {
    pub best: PathBuf,
    pub last: PathBuf,
    pub log: PathBuf,
    pub vocab: PathBuf,
    pub outcome: TrainOutcome,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainArtifacts> {
    let data = prepare(cfg)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let log_path = cfg.out_dir.join(TRAIN_LOG);
    let mut log = BufWriter::new(File::create(&log_path)?);
    let outcome = train_model(cfg, &data, &mut log)?;
    log.flush()?;

    let vocab_path = cfg.out_dir.join(VOCAB_FILE);
    data.vocab.save(&vocab_path)?;
    let best_path = cfg.out_dir.join(BEST_CHECKPOINT);
    let last_path = cfg.out_dir.join(LAST_CHECKPOINT);
    let best_record = outcome
        .best_epoch
        .and_then(|e| outcome.history.iter().find(|r| r.epoch == e));
    checkpoint::save(
        &best_path,
        &outcome.best,
        &data.vocab,
        Some(&cfg.train),
        best_record,
    )?;
    checkpoint::save(
        &last_path,
        &outcome.last,
        &data.vocab,
        Some(&cfg.train),
        outcome.history.last(),
    )?;
    Ok(TrainArtifacts {
        best: best_path,
        last: last_path,
        log: log_path,
        vocab: vocab_path,
        outcome,
    })
}

/// Options shared by the commands that decode with a checkpoint.
#[derive(Clone, Debug)]
pub struct DecodeOptions {
    pub limits: Limits,
    pub max_len: usize,
    pub beam: usize,
    pub ds_temperature: f64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        let t = glks::train::TrainConfig::default();
        DecodeOptions {
            limits: Limits::default(),
            max_len: t.max_len,
            beam: t.beam,
            ds_temperature: t.ds_temperature,
        }
    }
}

impl DecodeOptions {
    fn validate(&self) -> Result<()> {
        if self.max_len == 0 || self.beam == 0 {
            return Err(GlksError::Config(
                "max_len and beam must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub fn load_checkpoint(path: &Path, vocab: Option<&Path>) -> Result<Checkpoint> {
    require_file("checkpoint", path)?;
    let ckpt = checkpoint::load(path)?;
    if let Some(vp) = vocab {
        require_file("vocabulary", vp)?;
        let given = Vocabulary::load(vp)?;
        if given.tokens() != ckpt.vocab.tokens() {
            return Err(GlksError::Config(format!(
                "vocabulary {} ({} entries) does not match the checkpoint's ({} entries)",
                vp.display(),
                given.len(),
                ckpt.vocab.len()
            )));
        }
    }
    Ok(ckpt)
}

/// Where eval responses come from.
pub enum Responder {
    Checkpoint {
        path: PathBuf,
        vocab: Option<PathBuf>,
    },
    /// One whitespace-tokenised response per line, in corpus order.
    Predictions(PathBuf),
    /// The gold response itself.
    Echo,
}

pub struct EvalArgs {
    pub responder: Responder,
    pub test: PathBuf,
    pub mode: RefMode,
    pub decode: DecodeOptions,
}

fn read_predictions(path: &Path) -> Result<Vec<Vec<String>>> {
    require_file("predictions", path)?;
    BufReader::new(File::open(path)?)
        .lines()
        .map(|l| Ok(glks::data::tokenize(&l?)))
        .collect()
}

pub fn cmd_eval(args: &EvalArgs) -> Result<CorpusScores> {
    args.decode.validate()?;
    let test = read_split("test file", &args.test, args.decode.limits)?;
    let threads = threads_from_env()?;
    match &args.responder {
        Responder::Echo => evaluate_corpus(&EchoModel, &test, args.mode, threads),
        Responder::Predictions(p) => {
            let preds = read_predictions(p)?;
            if preds.len() != test.len() {
                return Err(GlksError::Config(format!(
                    "{} has {} predictions for {} test episodes",
                    p.display(),
                    preds.len(),
                    test.len()
                )));
            }
            evaluate_corpus(&FixedResponses(preds), &test, args.mode, threads)
        }
        Responder::Checkpoint { path, vocab } => {
            let ckpt = load_checkpoint(path, vocab.as_deref())?;
            let gen = generator(&ckpt.model, &ckpt.vocab, &args.decode);
            evaluate_corpus(&gen, &test, args.mode, threads)
        }
    }
}

fn generator<'a>(
    model: &'a Glks<f32>,
    vocab: &'a Vocabulary,
    opts: &DecodeOptions,
) -> ModelGenerator<'a> {
    ModelGenerator {
        model,
        vocab,
        max_len: opts.max_len,
        beam: opts.beam,
        ds_temperature: opts.ds_temperature,
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// `{"rouge1": .., "rouge2": .., "rougeL": ..}` with F1 × 100 to two decimals;
/// `detailed` reports precision, recall and F1 for each metric.
pub fn format_scores(s: &CorpusScores, detailed: bool) -> String {
    let metrics = [
        ("rouge1", s.rouge1),
        ("rouge2", s.rouge2),
        ("rougeL", s.rouge_l),
    ];
    let body: Vec<String> = metrics
        .iter()
        .map(|(name, m)| {
            if detailed {
                format!(
                    "\"{name}\": {{\"p\": {}, \"r\": {}, \"f1\": {}}}",
                    pct(m.precision),
                    pct(m.recall),
                    pct(m.f1)
                )
            } else {
                format!("\"{name}\": {}", pct(m.f1))
            }
        })
        .collect();
    format!("{{{}}}", body.join(", "))
}

pub struct GenerateArgs {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub decode: DecodeOptions,
}

/// Decodes every episode of `input`, one response per line.
pub fn cmd_generate(args: &GenerateArgs, out: &mut dyn Write) -> Result<()> {
    args.decode.validate()?;
    let episodes = read_split("input", &args.input, args.decode.limits)?;
    let ckpt = load_checkpoint(&args.checkpoint, None)?;
    let gen = generator(&ckpt.model, &ckpt.vocab, &args.decode);
    for (i, ep) in episodes.iter().enumerate() {
        writeln!(out, "{}", gen.respond(i, ep)?.join(" "))?;
    }
    out.flush()?;
    Ok(())
}

pub struct TraceArgs {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub index: usize,
    pub out_dir: PathBuf,
    pub decode: DecodeOptions,
}

pub struct TraceOutput {
    pub csv: PathBuf,
    pub pgm: PathBuf,
    pub trace: KSTrace,
}

pub fn cmd_trace(args: &TraceArgs) -> Result<TraceOutput> {
    args.decode.validate()?;
    let episodes = read_split("input", &args.input, args.decode.limits)?;
    let ep = episodes.get(args.index).ok_or_else(|| {
        GlksError::Config(format!(
            "episode index {} out of range ({} episodes)",
            args.index,
            episodes.len()
        ))
    })?;
    let ckpt = load_checkpoint(&args.checkpoint, None)?;
    let m = ckpt.model.config.m;
    let enc = EncodedEpisode::new(ep, &ckpt.vocab, m, args.decode.ds_temperature)?;
    let gen = ckpt
        .model
        .generate(&enc, &ckpt.vocab, args.decode.max_len, args.decode.beam)?;
    let trace = KSTrace::from_generation(&ep.background, m, &gen, ep.gold_span);
    fs::create_dir_all(&args.out_dir)?;
    let (csv, pgm) = trace.export(&args.out_dir, &format!("episode_{}", args.index))?;
    Ok(TraceOutput { csv, pgm, trace })
}

/// Validation ROUGE-1 F1 per window size; a failed cell keeps its error.
pub fn cmd_sweep_m(cfg: &RunConfig, values: &[usize]) -> Result<Vec<(usize, Result<f64>)>> {
    if values.is_empty() {
        return Err(GlksError::Config("sweep needs at least one m value".into()));
    }
    if values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(GlksError::Config(
            "sweep m values must be strictly increasing".into(),
        ));
    }
    let data = prepare(cfg)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let threads = threads_from_env()?;
    let mut rows = Vec::with_capacity(values.len());
    for &m in values {
        let cell = (|| {
            let mut run = cfg.clone();
            run.m = m;
            run.validate()?;
            let mut log =
                BufWriter::new(File::create(cfg.out_dir.join(format!("sweep_m{m}.log")))?);
            let outcome = train_model(&run, &data, &mut log)?;
            log.flush()?;
            let opts = DecodeOptions {
                limits: run.limits(),
                max_len: run.train.max_len,
                beam: run.train.beam,
                ds_temperature: run.train.ds_temperature,
            };
            let gen = generator(&outcome.best, &data.vocab, &opts);
            Ok(
                evaluate_corpus(&gen, &data.valid, RefMode::Single, threads)?
                    .rouge1
                    .f1,
            )
        })();
        rows.push((m, cell));
    }
    Ok(rows)
}

/// Two-column text table, ROUGE-1 as a percentage.
pub fn format_sweep(rows: &[(usize, Result<f64>)]) -> String {
    let mut out = String::from("m\trouge1\n");
    for (m, cell) in rows {
        match cell {
            Ok(r) => out.push_str(&format!("{m}\t{}\n", pct(*r))),
            Err(e) => out.push_str(&format!("{m}\terror: {e}\n")),
        }
    }
    out
}
