//! Two-phase training: distant-supervision pretraining of the encoders and
//! global selector, then joint training of the whole model.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Batcher, EncodedEpisode, Episode, Vocabulary};
use crate::error::{GlksError, Result};
use crate::eval::{evaluate_corpus, ModelGenerator, RefMode};
use crate::gradcheck::Objective;
use crate::model::{Glks, ModelConfig};
use crate::param::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;
use crate::train::loss::{ds_loss, mce_loss, mle_loss, total_loss, LossBreakdown, LossConfig};
use crate::train::optim::{clip_gradients, Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    /// Epochs of distant-supervision-only training before joint training.
    pub pretrain_epochs: usize,
    /// Joint training epochs.
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub use_ds: bool,
    pub use_mce: bool,
    pub w_mle: f64,
    pub w_ds: f64,
    pub w_mce: f64,
    pub ds_temperature: f64,
    /// Validate every this many joint epochs (and after the last); 0 never.
    pub eval_every: usize,
    pub max_len: usize,
    pub beam: usize,
    /// Record wall-clock seconds in the epoch log. Off by default so logs
    /// are byte-reproducible.
    pub record_timing: bool,
    #[serde(skip, default = "one")]
    pub eval_threads: usize,
}

fn one() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            clip_norm: 2.0,
            pretrain_epochs: 10,
            epochs: 20,
            batch_size: 16,
            seed: 1,
            use_ds: true,
            use_mce: true,
            w_mle: 1.0,
            w_ds: 1.0,
            w_mce: 1.0,
            ds_temperature: 1.0,
            eval_every: 1,
            max_len: 60,
            beam: 1,
            record_timing: false,
            eval_threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("eps", self.eps),
            ("clip_norm", self.clip_norm),
            ("ds_temperature", self.ds_temperature),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(GlksError::Config(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(GlksError::Config(format!(
                    "{name} must be in [0, 1), got {v}"
                )));
            }
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_len", self.max_len),
            ("beam", self.beam),
        ] {
            if v == 0 {
                return Err(GlksError::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// Objective for the joint phase; the distant-supervision term needs the
    /// global selector.
    pub fn joint_loss(&self, use_gks: bool) -> LossConfig {
        LossConfig {
            use_mle: true,
            use_ds: self.use_ds && use_gks,
            use_mce: self.use_mce,
            w_mle: self.w_mle,
            w_ds: self.w_ds,
            w_mce: self.w_mce,
        }
    }

    pub fn pretrain_loss(&self) -> LossConfig {
        LossConfig {
            w_ds: self.w_ds,
            ..LossConfig::ds_only()
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mle: f64,
    pub ds: f64,
    pub mce: f64,
    pub total: f64,
    pub val_rouge_l: Option<f64>,
    pub seconds: f64,
}

#[derive(Serialize)]
struct LogHeader<'a> {
    seed: u64,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    train_episodes: usize,
    valid_episodes: usize,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters after the final epoch.
    pub last: Glks<f32>,
    /// Parameters of the epoch with the highest validation ROUGE-L (the
    /// earliest on ties), or the last epoch if nothing was validated.
    pub best: Glks<f32>,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
}

/// Whether a parameter is trained in the given phase.
pub fn trainable(name: &str, pretraining: bool) -> bool {
    !(pretraining && name.starts_with("dec."))
}

pub struct Trainer<'a> {
    pub model: Glks<f32>,
    pub config: TrainConfig,
    vocab: &'a Vocabulary,
    batcher: Batcher,
    adam: Adam,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: Glks<f32>,
        config: TrainConfig,
        vocab: &'a Vocabulary,
        train: &[Episode],
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(GlksError::Config("training split is empty".into()));
        }
        let batcher = Batcher::new(
            train,
            vocab,
            config.batch_size,
            model.config.m,
            config.ds_temperature,
        )?;
        let adam = Adam::new(config.adam(), &model.params);
        Ok(Trainer {
            model,
            config,
            vocab,
            batcher,
            adam,
        })
    }

    pub fn batcher(&self) -> &Batcher {
        &self.batcher
    }

    /// Whether the pretraining phase has anything to optimise.
    pub fn pretraining_enabled(&self) -> bool {
        self.config.use_ds && self.model.config.use_gks
    }

    /// Forward, backward, clip and update on one batch.
    pub fn step(&mut self, batch: &Batch, pretraining: bool) -> Result<LossBreakdown> {
        let loss_cfg = if pretraining {
            self.config.pretrain_loss()
        } else {
            self.config.joint_loss(self.model.config.use_gks)
        };
        let mut tape = Tape::new();
        let vars = batch_loss(&self.model, &self.model.params, &mut tape, batch, &loss_cfg)?;
        let br = vars.1;
        if !br.total.is_finite() {
            return Err(GlksError::NonFinite("loss".into()));
        }
        if br.mle < -1e-6 || br.ds < -1e-6 {
            return Err(GlksError::Contract(format!(
                "negative loss: mle {} ds {}",
                br.mle, br.ds
            )));
        }
        let params = &mut self.model.params;
        params.zero_grad();
        tape.backward(vars.0)?.accumulate(&tape, params)?;
        let select = |n: &str| trainable(n, pretraining);
        clip_gradients(params, self.config.clip_norm, select);
        self.adam.step(params, select)?;
        Ok(br)
    }

    /// One pass over a freshly shuffled training set; returns batch-mean losses.
    pub fn epoch(&mut self, rng: &mut ChaCha8Rng, pretraining: bool) -> Result<LossBreakdown> {
        let batches = self.batcher.epoch(rng)?;
        let mut sum = LossBreakdown::default();
        for b in &batches {
            let l = self.step(b, pretraining)?;
            sum.mle += l.mle;
            sum.ds += l.ds;
            sum.mce += l.mce;
            sum.total += l.total;
        }
        let n = batches.len() as f64;
        Ok(LossBreakdown {
            mle: sum.mle / n,
            ds: sum.ds / n,
            mce: sum.mce / n,
            total: sum.total / n,
        })
    }

    pub fn validate(&self, valid: &[Episode]) -> Result<f64> {
        let gen = ModelGenerator {
            model: &self.model,
            vocab: self.vocab,
            max_len: self.config.max_len,
            beam: self.config.beam,
            ds_temperature: self.config.ds_temperature,
        };
        Ok(
            evaluate_corpus(&gen, valid, RefMode::Single, self.config.eval_threads)?
                .rouge_l
                .f1,
        )
    }
}

/// Records the loss terms selected by `cfg` for `batch` using parameters
/// `store`, returning the total and the values.
pub fn batch_loss<T: Scalar>(
    model: &Glks<T>,
    store: &ParamStore<T>,
    tape: &mut Tape<T>,
    batch: &Batch,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let fwd = model.forward_with(tape, store, batch, cfg.needs_decoder())?;
    let mixed: Vec<Var> = fwd.steps.iter().map(|s| s.mixed).collect();
    let mle = if cfg.use_mle {
        Some(mle_loss(
            tape,
            &mixed,
            &batch.target,
            &batch.resp_mask,
            batch.size,
        )?)
    } else {
        None
    };
    let ds = match (cfg.use_ds, fwd.topic) {
        (true, Some(t)) => Some(ds_loss(tape, t.unit_dist, &batch.q)?),
        _ => None,
    };
    let mce = if cfg.use_mce {
        Some(mce_loss(
            tape,
            &mixed,
            batch.vocab_size,
            &batch.resp_mask,
            batch.size,
        )?)
    } else {
        None
    };
    let vars = total_loss(tape, cfg, mle, ds, mce)?;
    Ok((vars.total, vars.breakdown(tape)))
}

/// The total loss of one batch as a function of the parameters, for
/// gradient checking at any precision.
pub struct LossObjective<'a> {
    pub model: &'a Glks<f64>,
    pub batch: &'a Batch,
    pub loss: LossConfig,
}

impl Objective for LossObjective<'_> {
    fn eval<S: Scalar>(&self, params: &ParamStore<S>, tape: &mut Tape<S>) -> Result<Var> {
        let model = self.model.cast::<S>();
        Ok(batch_loss(&model, params, tape, self.batch, &self.loss)?.0)
    }
}

/// Teacher-forced negative log-likelihood per gold token over `episodes`.
pub fn token_nll(
    model: &Glks<f32>,
    vocab: &Vocabulary,
    episodes: &[Episode],
    ds_temperature: f64,
) -> Result<f64> {
    let enc = episodes
        .iter()
        .map(|e| EncodedEpisode::new(e, vocab, model.config.m, ds_temperature))
        .collect::<Result<Vec<_>>>()?;
    let mut nll = 0.0;
    let mut tokens = 0;
    let cfg = LossConfig {
        use_ds: false,
        use_mce: false,
        ..LossConfig::default()
    };
    for chunk in enc.chunks(16) {
        let pairs: Vec<(usize, &EncodedEpisode)> = chunk.iter().enumerate().collect();
        let batch = Batch::new(&pairs, model.config.m, model.config.vocab_size)?;
        let mut tape = Tape::new();
        let (_, br) = batch_loss(model, &model.params, &mut tape, &batch, &cfg)?;
        nll += br.mle * batch.size as f64;
        tokens += batch.target_tokens();
    }
    Ok(nll / tokens.max(1) as f64)
}

/// Trains a freshly initialised model. All randomness (initialisation and
/// shuffling) comes from one generator seeded with `config.seed`. A header
/// line and one JSON line per epoch are written to `log`.
pub fn fit(
    model_config: &ModelConfig,
    config: &TrainConfig,
    vocab: &Vocabulary,
    train: &[Episode],
    valid: &[Episode],
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    fit_with(model_config, config, vocab, train, valid, log, |_| Ok(()))
}

/// [`fit`] with a hook that may adjust the freshly initialised model, e.g. to
/// load pretrained embeddings.
pub fn fit_with(
    model_config: &ModelConfig,
    config: &TrainConfig,
    vocab: &Vocabulary,
    train: &[Episode],
    valid: &[Episode],
    log: &mut dyn Write,
    prepare: impl FnOnce(&mut Glks<f32>) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    model_config.validate()?;
    if train.is_empty() {
        return Err(GlksError::Config("training split is empty".into()));
    }
    if valid.is_empty() {
        return Err(GlksError::Config("validation split is empty".into()));
    }
    if vocab.len() != model_config.vocab_size {
        return Err(GlksError::Config(format!(
            "vocab_size {} does not match the vocabulary ({} entries)",
            model_config.vocab_size,
            vocab.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Glks::new(model_config.clone(), &mut rng)?;
    prepare(&mut model)?;
    let mut trainer = Trainer::new(model, config.clone(), vocab, train)?;

    serde_json::to_writer(
        &mut *log,
        &LogHeader {
            seed: config.seed,
            model: model_config,
            train: config,
            train_episodes: train.len(),
            valid_episodes: valid.len(),
        },
    )?;
    writeln!(log)?;

    let pretrain = if trainer.pretraining_enabled() {
        config.pretrain_epochs
    } else {
        0
    };
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    for epoch in 1..=pretrain + config.epochs {
        let started = Instant::now();
        let pretraining = epoch <= pretrain;
        let losses = trainer.epoch(&mut rng, pretraining)?;
        let joint_epoch = epoch.saturating_sub(pretrain);
        let validate = !pretraining
            && config.eval_every > 0
            && (joint_epoch % config.eval_every == 0 || joint_epoch == config.epochs);
        let val = if validate {
            Some(trainer.validate(valid)?)
        } else {
            None
        };
        if let Some(v) = val {
            if best.as_ref().is_none_or(|(b, _, _)| v > *b) {
                best = Some((v, epoch, trainer.model.params.clone()));
            }
        }
        let rec = EpochRecord {
            epoch,
            mle: losses.mle,
            ds: losses.ds,
            mce: losses.mce,
            total: losses.total,
            val_rouge_l: val,
            seconds: if config.record_timing {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        serde_json::to_writer(&mut *log, &rec)?;
        writeln!(log)?;
        history.push(rec);
    }
    log.flush()?;

    let last = trainer.model;
    let (best_model, best_epoch) = match best {
        Some((_, epoch, params)) => {
            let mut m = last.clone();
            m.params = params;
            (m, Some(epoch))
        }
        None => (last.clone(), None),
    };
    Ok(TrainOutcome {
        last,
        best: best_model,
        best_epoch,
        history,
    })
}
