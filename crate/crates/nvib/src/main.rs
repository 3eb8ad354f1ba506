use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use nvib::attention::{self, AttentionMap};
use nvib::checkpoint::{self, Checkpoint};
use nvib::config::RunConfig;
use nvib::core::analysis::mean_score;
use nvib::core::gradcheck;
use nvib::core::model::Model;
use nvib::core::tokenizer::Vocab;
use nvib::harness::{self, SegmentedLine};
use nvib::{corpus, plot, train, Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Character-level denoising autoencoders with nonparametric variational
/// information bottleneck self-attention.
#[derive(Parser)]
#[command(name = "nvib")]
struct Cli {
    /// TOML configuration shared by every subcommand. Defaults to the
    /// `config.toml` next to the checkpoint, if any.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration field, e.g. `--set train.lr=0.0005`.
    #[arg(long = "set", global = true, value_name = "SECTION.FIELD=VALUE")]
    set: Vec<String>,
    /// Seed for every random choice (overrides `train.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default `runs/<subcommand>`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 1 makes every artifact bitwise reproducible.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write checkpoints and metrics.
    Train {
        /// Training text, one sequence per line (overrides `data.corpus`).
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Train the standard Transformer: no NVIB layers.
        #[arg(long)]
        baseline: bool,
    },
    /// Validation CE, reconstruction accuracy and retention per layer.
    Evaluate {
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Segment text from attention maps and score against whitespace words.
    Segment {
        #[arg(long, required_unless_present = "maps")]
        checkpoint: Option<PathBuf>,
        /// Saved attention matrix files to segment instead of running a model.
        #[arg(long = "map", conflicts_with = "checkpoint")]
        maps: Vec<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Sentences to segment; the validation lines when none are given.
        text: Vec<String>,
    },
    /// Robustness table and plot over perturbation kinds and rates.
    Perturb {
        checkpoint: PathBuf,
        /// A second model (e.g. the baseline) evaluated on the same perturbations.
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Train probes on frozen encoder representations, one per layer and kind.
    Probe {
        checkpoint: PathBuf,
        /// `text<TAB>label` lines.
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Write attention matrices and heatmaps for the given sentences.
    ExportAttention {
        checkpoint: PathBuf,
        #[arg(required = true)]
        text: Vec<String>,
    },
    /// Certify the analytic gradients of the bottleneck against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
    },
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::Train { .. } => "train",
            Cmd::Evaluate { .. } => "evaluate",
            Cmd::Segment { .. } => "segment",
            Cmd::Perturb { .. } => "perturb",
            Cmd::Probe { .. } => "probe",
            Cmd::ExportAttention { .. } => "export-attention",
            Cmd::Gradcheck { .. } => "gradcheck",
        }
    }

    fn checkpoint(&self) -> Option<&Path> {
        match self {
            Cmd::Evaluate { checkpoint, .. }
            | Cmd::Perturb { checkpoint, .. }
            | Cmd::Probe { checkpoint, .. }
            | Cmd::ExportAttention { checkpoint, .. } => Some(checkpoint),
            Cmd::Segment { checkpoint, .. } => checkpoint.as_deref(),
            _ => None,
        }
    }
}

fn version() -> String {
    format!(
        "{} (checkpoint format {}, attention format {})",
        env!("CARGO_PKG_VERSION"),
        checkpoint::FORMAT_VERSION,
        attention::FORMAT_VERSION
    )
}

fn main() -> ExitCode {
    let cmd = Cli::command().version(&*Box::leak(version().into_boxed_str()));
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    /// Creates the output directory and records the effective configuration.
    fn output_dir(&self) -> Result<&Path> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        let p = self.out.join("config.toml");
        std::fs::write(&p, self.cfg.to_toml()).map_err(|e| Error::io(&p, e))?;
        Ok(&self.out)
    }

    fn write_json<S: Serialize>(&self, name: &str, value: &S) -> Result<()> {
        let p = self.out.join(name);
        let text = serde_json::to_string_pretty(value).expect("report serialises");
        std::fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))
    }

    /// Validation lines of the configured corpus.
    fn valid_lines(&self, corpus_override: &Option<PathBuf>, cap: usize) -> Result<Vec<String>> {
        let mut cfg = self.cfg.clone();
        if let Some(c) = corpus_override {
            cfg.data.corpus = Some(c.clone());
        }
        let mut lines = corpus::from_config(&cfg)?.valid;
        lines.truncate(cap);
        Ok(lines)
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Usage(e.to_string()))?;
    }
    let config_path = cli.config.clone().or_else(|| {
        let beside = cli.cmd.checkpoint()?.parent()?.join("config.toml");
        beside.exists().then_some(beside)
    });
    let mut cfg = match &config_path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&cli.set)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    let out = cli.out.clone().unwrap_or_else(|| Path::new("runs").join(cli.cmd.name()));
    let mut ctx = Ctx { cfg, out };

    match cli.cmd {
        Cmd::Train { corpus, baseline } => {
            if let Some(c) = corpus {
                ctx.cfg.data.corpus = Some(c);
            }
            if baseline {
                ctx.cfg = ctx.cfg.baseline();
            }
            ctx.cfg.validate()?;
            let corpus = corpus::from_config(&ctx.cfg)?;
            eprintln!(
                "training on {} sequences ({} held out), vocabulary {}",
                corpus.train.len(),
                corpus.valid.len(),
                corpus.vocab.len()
            );
            let every = (ctx.cfg.train.steps / 20).max(1);
            let outcome = train::train(&ctx.cfg, &corpus, Some(&ctx.out), |r, e| {
                if r.step % every == 0 {
                    eprintln!(
                        "step {:>6}  lr {:.2e}  ce {:.4}  total {:.4}  retention {:?}",
                        r.step,
                        r.lr,
                        r.loss.ce,
                        r.loss.total,
                        r.retention.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>()
                    );
                }
                if let Some(e) = e {
                    eprintln!(
                        "eval {:>6}  noisy ce {:.4}  accuracy {:.4}  retention {:?}",
                        e.step,
                        e.eval.noisy_ce,
                        e.eval.accuracy,
                        e.eval.retention.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>()
                    );
                }
            })?;
            if let Some(last) = outcome.evals.last() {
                ctx.write_json("final_eval.json", last)?;
            }
            println!("{}", ctx.out.join("final.ckpt").display());
        }
        Cmd::Evaluate { checkpoint, corpus } => {
            let ckpt = checkpoint::load::<f32>(&checkpoint)?;
            ctx.cfg.model = ckpt.header.model.clone();
            let lines = ctx.valid_lines(&corpus, ctx.cfg.data.eval_size)?;
            let seqs = encode_lines(&ckpt.vocab(), &lines, ctx.cfg.train.max_len);
            let eval = train::evaluate(&ckpt.model, &seqs, &ctx.cfg.train)?;
            ctx.output_dir()?;
            ctx.write_json("eval.json", &eval)?;
            println!("sequences        {}", seqs.len());
            println!("noisy ce         {:.4}", eval.noisy_ce);
            println!("clean ce         {:.4}", eval.clean_ce);
            println!("accuracy         {:.4}", eval.accuracy);
            println!("forced accuracy  {:.4}", eval.forced_accuracy);
            for (layer, r) in nvib_layers(&ckpt.model).zip(&eval.retention) {
                println!("retention[{layer}]     {r:.4}");
            }
        }
        Cmd::Segment {
            checkpoint,
            maps,
            corpus,
            text,
        } => {
            let segmented: Vec<SegmentedLine> = if maps.is_empty() {
                let path = checkpoint.expect("clap requires a checkpoint without maps");
                let ckpt = checkpoint::load::<f32>(&path)?;
                ctx.cfg.model = ckpt.header.model.clone();
                let lines = if text.is_empty() {
                    ctx.valid_lines(&corpus, ctx.cfg.analysis.max_sequences)?
                } else {
                    text
                };
                harness::segment_corpus(&ckpt.model, &ckpt.vocab(), &lines, ctx.cfg.analysis.segment_layer)?
            } else {
                maps.iter()
                    .map(|p| AttentionMap::read(p).and_then(|m| harness::segment_map(&m)))
                    .collect::<Result<_>>()?
            };
            ctx.output_dir()?;
            let records: Vec<_> = segmented.iter().enumerate().map(|(i, s)| s.record(i)).collect();
            harness::write_csv(&ctx.out.join("segments.csv"), &records)?;
            for s in &segmented {
                println!("{}", s.display());
            }
            let scores: Vec<_> = segmented.iter().map(|s| s.score.clone()).collect();
            let (p, r, f1) = mean_score(&scores);
            println!("precision {p:.4} recall {r:.4} f1 {f1:.4}");
        }
        Cmd::Perturb {
            checkpoint,
            compare,
            corpus,
        } => {
            let kinds = ctx.cfg.analysis.kinds.clone();
            let rates = ctx.cfg.analysis.rates.clone();
            let lines = ctx.valid_lines(&corpus, ctx.cfg.analysis.max_sequences)?;
            let mut series = Vec::new();
            for (name, path) in std::iter::once(("robustness", &checkpoint)).chain(compare.iter().map(|c| ("compare", c))) {
                let ckpt = checkpoint::load::<f32>(path)?;
                let vocab = ckpt.vocab();
                let seqs = encode_lines(&vocab, &lines, ctx.cfg.train.max_len);
                let rows = harness::robustness(&ckpt.model, &seqs, &kinds, &rates, vocab.data_ids(), ctx.cfg.train.seed)?;
                series.push((name, label(path), rows));
            }
            ctx.output_dir()?;
            for (name, label, rows) in &series {
                harness::write_csv(&ctx.out.join(format!("{name}.csv")), rows)?;
                println!("{label}");
                println!("  kind        rate  accuracy      ce");
                for r in rows {
                    println!("  {:<10} {:.2}    {:.4}  {:.4}", r.kind.name(), r.rate, r.accuracy, r.ce);
                }
            }
            if let [(_, la, a), (_, lb, b)] = &series[..] {
                for kind in &kinds {
                    let at_max = |rows: &[nvib::core::analysis::RobustnessRow]| {
                        rows.iter().filter(|r| r.kind == *kind).max_by(|x, y| x.rate.total_cmp(&y.rate)).map(|r| (r.rate, r.accuracy))
                    };
                    if let (Some((rate, x)), Some((_, y))) = (at_max(a), at_max(b)) {
                        println!("gap {} at rate {rate}: {la} - {lb} = {:+.4}", kind.name(), x - y);
                    }
                }
            }
            let plot_series: Vec<_> = series.into_iter().map(|(_, l, rows)| (l, rows)).collect();
            let svg = ctx.out.join("robustness.svg");
            std::fs::write(&svg, plot::robustness_svg(&plot_series)).map_err(|e| Error::io(&svg, e))?;
        }
        Cmd::Probe { checkpoint, dataset } => {
            let ckpt = checkpoint::load::<f32>(&checkpoint)?;
            ctx.cfg.model = ckpt.header.model.clone();
            let data = harness::load_labelled(&dataset)?;
            let vocab = ckpt.vocab();
            let (inputs, labels): (Vec<_>, Vec<_>) = data
                .texts
                .iter()
                .map(|t| vocab.encode(t))
                .zip(data.labels.iter().copied())
                .filter(|(x, _)| !x.is_empty())
                .unzip();
            let reports = harness::probe_layers(
                &ckpt.model,
                &inputs,
                &labels,
                data.classes.len(),
                &ctx.cfg.probe.kinds,
                &ctx.cfg.probe,
                ctx.cfg.train.seed,
            )?;
            ctx.output_dir()?;
            harness::write_csv(&ctx.out.join("probes.csv"), &reports)?;
            println!("layer  kind         best_epoch  val_acc  test_acc  test_f1");
            for r in &reports {
                println!(
                    "{:>5}  {:<11}  {:>10}  {:.4}   {:.4}    {:.4}",
                    r.layer,
                    format!("{:?}", r.kind).to_lowercase(),
                    r.best_epoch,
                    r.val_accuracy,
                    r.test_accuracy,
                    r.test_f1
                );
            }
        }
        Cmd::ExportAttention { checkpoint, text } => {
            let ckpt: Checkpoint<f32> = checkpoint::load(&checkpoint)?;
            ctx.cfg.model = ckpt.header.model.clone();
            ctx.output_dir()?;
            let vocab = ckpt.vocab();
            for (i, sentence) in text.iter().enumerate() {
                let tokens = vocab.encode(sentence);
                let traces = match ckpt.model.traces(&tokens) {
                    Ok(t) => t,
                    Err(e) if matches!(e.error, nvib::core::Error::FinalLayerPruned { .. }) => e.traces,
                    Err(e) => return Err(e.error.into()),
                };
                let dir = ctx.out.join(format!("sentence-{i:02}"));
                for p in attention::export(&traces, sentence, &dir, ctx.cfg.analysis.heatmap_cell)? {
                    println!("{}", p.display());
                }
            }
        }
        Cmd::Gradcheck { instances, samples } => {
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.train.seed);
            let reports = gradcheck::run_all(instances, samples, &mut rng);
            let mut ok = true;
            for r in &reports {
                ok &= r.passed;
                println!(
                    "{}  {:<36} instances {:>6}  worst {:.3e}  threshold {:.1e}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.instances,
                    r.worst,
                    r.threshold
                );
            }
            if !ok {
                eprintln!("error: gradient certification failed");
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn encode_lines(vocab: &Vocab, lines: &[String], max_len: usize) -> Vec<Vec<usize>> {
    lines
        .iter()
        .map(|l| vocab.encode(l))
        .filter(|s| !s.is_empty() && s.len() <= max_len)
        .collect()
}

fn nvib_layers(model: &Model<f32>) -> impl Iterator<Item = usize> + '_ {
    (0..model.config().n_enc_layers).filter(|&l| model.config().is_nvib_layer(l))
}

/// Series label for a checkpoint: its run directory name.
fn label(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}
