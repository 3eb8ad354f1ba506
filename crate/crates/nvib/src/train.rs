//! The training loop: batched, data-parallel gradient computation with an
//! order-preserving reduction, periodic evaluation, metrics and checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nvib_core::model::Model;
use nvib_core::tokenizer::Vocab;
use nvib_core::training::{evaluate_example, mean_eval, ExampleEval, StepReport, TrainConfig, Trainer};
use nvib_core::Real;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::corpus::Corpus;
use crate::{Error, Result};

/// Validation metrics after `step` optimiser updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    #[serde(flatten)]
    pub eval: ExampleEval,
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub vocab: Vocab,
    pub evals: Vec<EvalRecord>,
    pub steps: Vec<StepReport>,
}

/// Scores `seqs` in eval mode; the mean is reduced in input order.
pub fn evaluate<T: Real>(model: &Model<T>, seqs: &[Vec<usize>], cfg: &TrainConfig) -> Result<ExampleEval> {
    let parts = seqs
        .par_iter()
        .enumerate()
        .map(|(i, s)| evaluate_example(model, i, s, cfg))
        .collect::<nvib_core::Result<Vec<_>>>()?;
    Ok(mean_eval(&parts))
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum LogLine<'a> {
    Step {
        #[serde(flatten)]
        report: &'a StepReport,
        optimizer: &'static str,
    },
    Eval(&'a EvalRecord),
}

struct Outputs {
    dir: PathBuf,
    metrics: BufWriter<File>,
}

impl Outputs {
    fn create(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join("config.toml");
        std::fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
        let path = dir.join("metrics.jsonl");
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: BufWriter::new(f),
        })
    }

    fn log(&mut self, line: &LogLine) -> Result<()> {
        let path = self.dir.join("metrics.jsonl");
        serde_json::to_writer(&mut self.metrics, line).map_err(|e| Error::io(&path, e.into()))?;
        self.metrics.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        self.metrics.flush().map_err(|e| Error::io(&path, e))
    }
}

/// Trains a fresh model on `corpus`. With `out`, writes the effective config,
/// `metrics.jsonl`, checkpoints every 10% of the run, `best.ckpt` (lowest
/// noisy validation CE) and `final.ckpt`.
pub fn train(
    cfg: &RunConfig,
    corpus: &Corpus,
    out: Option<&Path>,
    mut on_step: impl FnMut(&StepReport, Option<&EvalRecord>),
) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.model.vocab_size = corpus.vocab.len();
    cfg.validate()?;
    let tc = cfg.train.clone();
    let train: Vec<Vec<usize>> = corpus
        .encode(&corpus.train)
        .into_iter()
        .filter(|s| !s.is_empty() && s.len() <= tc.max_len)
        .collect();
    if train.is_empty() {
        return Err(nvib_core::Error::EmptyCorpus.into());
    }
    let valid: Vec<Vec<usize>> = corpus
        .encode(&corpus.valid)
        .into_iter()
        .filter(|s| !s.is_empty() && s.len() <= tc.max_len)
        .take(cfg.data.eval_size)
        .collect();

    let mut outputs = out.map(|d| Outputs::create(d, &cfg)).transpose()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let model = Model::<f32>::new(cfg.model.clone(), &mut init_rng)?;
    let mut trainer = Trainer::new(model, tc.clone())?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();

    let ckpt_every = (tc.steps / 10).max(1);
    let mut last_good: Option<PathBuf> = None;
    let mut best = f64::INFINITY;
    let mut evals = Vec::new();
    let mut steps = Vec::with_capacity(tc.steps);

    while trainer.step < tc.steps {
        let mut batch = Vec::with_capacity(tc.batch_size);
        while batch.len() < tc.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(train[order[cursor]].clone());
            cursor += 1;
        }
        let step = trainer.step;
        let diverged = |e: nvib_core::Error, last_good: &Option<PathBuf>| match e {
            nvib_core::Error::NonFiniteLoss { .. } => Error::Diverged {
                step,
                last_good: last_good.clone(),
            },
            e => e.into(),
        };
        let trainer_ref = &trainer;
        let examples = batch
            .par_iter()
            .enumerate()
            .map(|(i, s)| trainer_ref.example(i, s))
            .collect::<nvib_core::Result<Vec<_>>>()
            .map_err(|e| diverged(e, &last_good))?;
        let report = trainer.apply(examples).map_err(|e| diverged(e, &last_good))?;
        let done = trainer.step;

        let eval = if done % cfg.data.eval_every == 0 || done == tc.steps {
            let e = EvalRecord {
                step: done,
                eval: evaluate(&trainer.model, &valid, &tc)?,
            };
            Some(e)
        } else {
            None
        };
        if let Some(o) = outputs.as_mut() {
            o.log(&LogLine::Step {
                report: &report,
                optimizer: "radam",
            })?;
            if let Some(e) = &eval {
                o.log(&LogLine::Eval(e))?;
                if e.eval.noisy_ce < best {
                    best = e.eval.noisy_ce;
                    checkpoint::save(&o.dir.join("best.ckpt"), &trainer.model, &corpus.vocab, done)?;
                }
            }
            if done % ckpt_every == 0 || done == tc.steps {
                let p = o.dir.join(format!("step-{done:06}.ckpt"));
                checkpoint::save(&p, &trainer.model, &corpus.vocab, done)?;
                last_good = Some(p);
            }
        }
        on_step(&report, eval.as_ref());
        steps.push(report);
        if let Some(e) = eval {
            evals.push(e);
        }
    }
    if let Some(o) = outputs.as_ref() {
        checkpoint::save(&o.dir.join("final.ckpt"), &trainer.model, &corpus.vocab, trainer.step)?;
    }
    Ok(TrainOutcome {
        model: trainer.model,
        vocab: corpus.vocab.clone(),
        evals,
        steps,
    })
}
