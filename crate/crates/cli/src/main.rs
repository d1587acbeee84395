//! Command-line front end: one verb per pipeline stage, plus the ablation,
//! graph-token sweep and baseline drivers.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lensgnn::alignment::AlignmentCheckpoint;
use lensgnn::checkpoint::Checkpoint;
use lensgnn::error::{Error, Result};
use lensgnn::eval::{
    build_base_lm, build_samples, evaluate_stage, extract_tokens, load_grid, prepare, run_ablation,
    run_baselines, run_with_cache, standard_ablation_grid, sweep_graph_tokens, tokens_from_container,
    tokens_to_container, train_gnns, BaselineConfig, PipelineConfig, Prepared, StageCache,
};
use lensgnn::lm::{GraphTokenBlock, LanguageModel, LoraAdapters, Vocabulary};
use lensgnn::sft::finetune;

#[derive(Parser, Debug)]
#[command(name = "lensgnn", version, about = "Multi-GNN ensembling through a LoRA-tuned language model")]
struct Cli {
    /// Pipeline config (TOML). Defaults apply to anything it omits.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Run directory for artifacts (overrides config and environment)
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,

    /// Master seed (overrides config)
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Graph tokens per GNN (overrides config)
    #[arg(long, global = true)]
    t: Option<usize>,

    /// Log progress to stderr
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load or generate the dataset and write its split
    Prepare,
    /// Train the GNNs against the shared classifier
    TrainGnns,
    /// Reshape GNN outputs into graph tokens
    ExtractTokens,
    /// Build the base language model and fine-tune LoRA adapters
    TrainLm,
    /// Evaluate the fine-tuned model on the test split
    Eval,
    /// Every stage in one process
    Run,
    /// Run the ablation grid
    Ablate {
        /// Grid file with [[cell]] tables; the standard eight rows otherwise
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Sweep the number of graph tokens per GNN
    SweepT {
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        values: Vec<usize>,
    },
    /// Single GNNs, MLP and classical ensemblers
    Baselines {
        /// Baseline settings (TOML)
        #[arg(long)]
        baseline_config: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.t {
        cfg.t = t;
    }
    if let Some(d) = &cli.run_dir {
        cfg.run_dir = Some(d.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value).expect("value serializes"))
}

fn require(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Checkpoint(format!("{} is missing; run `{stage}` first", path.display())))
    }
}

fn load_tokens(cfg: &PipelineConfig, dir: &Path) -> Result<Vec<Vec<GraphTokenBlock>>> {
    if cfg.gnn.kinds.is_empty() {
        return Ok(Vec::new());
    }
    let path = dir.join("tokens.ckpt");
    require(&path, "extract-tokens")?;
    let blocks = tokens_from_container(&Checkpoint::load(&path)?)?;
    if blocks.len() != cfg.gnn.kinds.len() {
        return Err(Error::Checkpoint(format!(
            "{} holds tokens for {} GNNs, config has {}",
            path.display(),
            blocks.len(),
            cfg.gnn.kinds.len()
        )));
    }
    Ok(blocks)
}

fn cmd_prepare(cfg: &PipelineConfig, dir: &Path) -> Result<Prepared> {
    let prepared = prepare(cfg)?;
    create_dir(dir)?;
    let text = toml::to_string(cfg).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
    write_file(&dir.join("config.toml"), text)?;
    write_json(
        &dir.join("split.json"),
        &serde_json::json!({
            "class_names": prepared.class_names,
            "train": prepared.split.train,
            "validation": prepared.split.validation,
            "test": prepared.split.test,
        }),
    )?;
    log::info!(
        "prepared {} items: {} train, {} validation, {} test",
        prepared.labels.len(),
        prepared.split.train.len(),
        prepared.split.validation.len(),
        prepared.split.test.len()
    );
    Ok(prepared)
}

fn cmd_train_gnns(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let prepared = prepare(cfg)?;
    create_dir(dir)?;
    match train_gnns(cfg, &prepared)? {
        Some(ckpt) => {
            ckpt.save(dir.join("alignment.ckpt"))?;
            println!("alignment {}", ckpt.digest());
        }
        None => println!("no GNNs configured"),
    }
    Ok(())
}

fn cmd_extract_tokens(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    if cfg.gnn.kinds.is_empty() {
        println!("no GNNs configured");
        return Ok(());
    }
    let prepared = prepare(cfg)?;
    let path = dir.join("alignment.ckpt");
    require(&path, "train-gnns")?;
    let ckpt = AlignmentCheckpoint::load(&path)?;
    let blocks = extract_tokens(Some(&ckpt), &prepared)?;
    let container = tokens_to_container(&blocks, &ckpt.digest());
    container.save(dir.join("tokens.ckpt"))?;
    println!("tokens {}", container.digest());
    Ok(())
}

fn cmd_train_lm(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let prepared = prepare(cfg)?;
    let blocks = load_tokens(cfg, dir)?;
    create_dir(dir)?;
    let (base, vocab, history) = build_base_lm(cfg, &prepared)?;
    if let Some(last) = history.last() {
        log::info!("base model pretrained, final loss {last:.4}");
    }
    let data = build_samples(cfg, &prepared, &vocab, &blocks)?;
    let (adapters, log) =
        finetune(&base, &vocab, &data.train, &data.validation, &prepared.class_names, &cfg.sft_config())?;
    base.save(dir.join("base_lm.ckpt"))?;
    vocab.save(dir.join("vocab"))?;
    let container = adapters.to_container(&base.digest());
    container.save(dir.join("lora.ckpt"))?;
    log.write_jsonl(dir.join("sft_log.jsonl"))?;
    println!("base_lm {}\nlora {}", base.digest(), container.digest());
    Ok(())
}

fn cmd_eval(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let prepared = prepare(cfg)?;
    let blocks = load_tokens(cfg, dir)?;
    for name in ["base_lm.ckpt", "lora.ckpt", "vocab"] {
        require(&dir.join(name), "train-lm")?;
    }
    let base = LanguageModel::load(dir.join("base_lm.ckpt"))?;
    let vocab = Vocabulary::load(dir.join("vocab"))?;
    let adapters = LoraAdapters::from_container(&Checkpoint::load(dir.join("lora.ckpt"))?)?;
    let alignment = dir.join("alignment.ckpt");
    let alignment_digest = if cfg.gnn.kinds.is_empty() || !alignment.exists() {
        None
    } else {
        Some(AlignmentCheckpoint::load(&alignment)?.digest())
    };
    let data = build_samples(cfg, &prepared, &vocab, &blocks)?;
    let ev = evaluate_stage(cfg, &prepared, &base, &vocab, &adapters, &data, alignment_digest)?;
    let mut lines = String::new();
    for ((item, label), p) in ev.test.items.iter().zip(&ev.test.labels).zip(&ev.test.predicted) {
        lines.push_str(&serde_json::json!({"item": item, "label": label, "predicted": p}).to_string());
        lines.push('\n');
    }
    write_file(&dir.join("predictions.jsonl"), lines)?;
    ev.report.save(dir.join("report.json"))?;
    ev.report.append(dir.join("reports.jsonl"))?;
    print_report(&ev.report);
    Ok(())
}

fn print_report(r: &lensgnn::eval::MetricsReport) {
    println!(
        "{}: accuracy {:.4} on {} items, {} parse failures, {:.1}s",
        r.run, r.accuracy, r.num_eval, r.parse_failures, r.wall_clock_secs
    );
    if let Some(a) = r.auc {
        println!("auc {a:.4}");
    }
    if let Some(s) = r.samples_sec {
        println!("throughput {s:.2} samples/s");
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let dir = cfg.resolve_run_dir();
    log::info!("run directory {}", dir.display());
    match &cli.command {
        Command::Prepare => cmd_prepare(&cfg, &dir).map(|_| ()),
        Command::TrainGnns => cmd_train_gnns(&cfg, &dir),
        Command::ExtractTokens => cmd_extract_tokens(&cfg, &dir),
        Command::TrainLm => cmd_train_lm(&cfg, &dir),
        Command::Eval => cmd_eval(&cfg, &dir),
        Command::Run => {
            let o = run_with_cache(&cfg, &mut StageCache::new(), Some(&dir))?;
            print_report(&o.report);
            Ok(())
        }
        Command::Ablate { grid } => {
            let grid = match grid {
                Some(p) => load_grid(p)?,
                None => standard_ablation_grid(),
            };
            for (i, c) in run_ablation(&cfg, &grid, Some(&dir))?.iter().enumerate() {
                let gnns: Vec<&str> = c.gnns.iter().map(|k| k.label()).collect();
                println!(
                    "cell {i}: gnns [{}] alignment {} text {} neighbors {} accuracy {:.4}",
                    gnns.join(","),
                    c.alignment,
                    c.with_text,
                    c.with_neighbor,
                    c.report.accuracy
                );
            }
            Ok(())
        }
        Command::SweepT { values } => {
            for r in sweep_graph_tokens(values, &cfg, Some(&dir))? {
                println!("t {:>2}: accuracy {:.4}", r.t, r.report.accuracy);
            }
            println!("table {}", dir.join("sweep_t.tsv").display());
            Ok(())
        }
        Command::Baselines { baseline_config } => {
            let bcfg = match baseline_config {
                Some(p) => {
                    let raw = std::fs::read_to_string(p).map_err(|source| Error::Io {
                        path: p.clone(),
                        source,
                    })?;
                    toml::from_str(&raw).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
                None => BaselineConfig::default(),
            };
            let (report, _) = run_baselines(&cfg, &bcfg)?;
            create_dir(&dir)?;
            write_json(&dir.join("baselines.json"), &report)?;
            for (name, acc) in &report.single_gnns {
                println!("{name}: {acc:.4}");
            }
            println!("MLP: {:.4}", report.mlp);
            for (name, acc) in report.ensembles() {
                println!("{name}: {acc:.4}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/small.toml")
    }

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("lensgnn").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_config_file() {
        let path = small_config();
        let cli = parse(&["--config", path.to_str().unwrap(), "prepare"]);
        let cfg = load_config(&cli).unwrap();
        assert_eq!((cfg.seed, cfg.t), (13, 2));

        let cli = parse(&["--config", path.to_str().unwrap(), "--seed", "4", "--t", "3", "--run-dir", "/tmp/x", "prepare"]);
        let cfg = load_config(&cli).unwrap();
        assert_eq!((cfg.seed, cfg.t), (4, 3));
        assert_eq!(cfg.resolve_run_dir(), PathBuf::from("/tmp/x"));
    }

    #[test]
    fn sweep_values_split_on_commas() {
        match parse(&["sweep-t", "--values", "1,4,16"]).command {
            Command::SweepT { values } => assert_eq!(values, vec![1, 4, 16]),
            other => panic!("parsed {other:?}"),
        }
    }

    #[test]
    fn invalid_config_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.toml");
        std::fs::write(&bad, "t = 0\n").unwrap();
        let cli = parse(&["--config", bad.to_str().unwrap(), "prepare"]);
        assert_eq!(execute(&cli).unwrap_err().exit_code(), 1);
    }

    #[test]
    fn stage_without_upstream_artifact_exits_with_data_code() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("run");
        let cli = parse(&["--config", small_config().to_str().unwrap(), "--run-dir", run.to_str().unwrap(), "extract-tokens"]);
        let err = execute(&cli).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{err}");
    }

    #[test]
    fn stages_chain_through_the_run_directory() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("run");
        let config = small_config();
        let base = ["--config", config.to_str().unwrap(), "--run-dir", run.to_str().unwrap()];
        for stage in ["prepare", "train-gnns", "extract-tokens", "train-lm", "eval"] {
            let args: Vec<&str> = base.iter().copied().chain([stage]).collect();
            execute(&parse(&args)).unwrap_or_else(|e| panic!("{stage}: {e}"));
        }
        for artifact in ["split.json", "alignment.ckpt", "tokens.ckpt", "base_lm.ckpt", "lora.ckpt", "report.json"] {
            assert!(run.join(artifact).exists(), "{artifact} missing");
        }
    }
}
