use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use l2c_core::cache::{inspect_cache, EmbeddingCache};
use l2c_core::config::RunConfig;
use l2c_core::datagen::Corpus;
use l2c_core::encoders::{TextEncoder, TextTower};
use l2c_core::error::Category;
use l2c_core::numerics::{Module, Rng};
use l2c_core::stage1::{eval_caption2caption, train_stage1};
use l2c_core::stage2::{
    build_text_cache, evaluate_all_heads, train_stage2, Stage2Model, TextFeatures,
};
use l2c_core::sweep::{sweep, SweepAxis, SweepInputs};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "l2c",
    version,
    about = "Two-stage caption-contrastive text tuning and cross-modal post-training"
)]
struct Cli {
    /// Run seed; overrides L2C_SEED and the config document.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus (train and eval splits).
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: caption-contrastive tuning of the LLM surrogate.
    TrainStage1 {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: train the vision encoder against the tuned text tower.
    TrainStage2 {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        /// Directory holding text.json and text.ckpt (a Stage-1 run directory).
        #[arg(long)]
        text_ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Precomputed embedding cache; enables offline loading.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Build or inspect an offline text-embedding cache.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
    /// Evaluate a Stage-1 or Stage-2 run directory on the eval split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Parent directory of the report run directory.
        #[arg(long)]
        report: PathBuf,
    },
    /// One-axis ablation sweep.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Corpus to use; generated from the config when absent.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Tuned text tower; trained with the config's Stage-1 settings when absent.
        #[arg(long)]
        text_ckpt: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum CacheAction {
    Build {
        #[arg(long)]
        text_ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Inspect {
        #[arg(long)]
        file: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.downcast_ref::<l2c_core::Error>().map(|c| c.category());
            let (code, name) = match category {
                Some(Category::Config) => (2, "config"),
                Some(Category::Data) => (3, "data"),
                Some(Category::Numeric) => (4, "numeric"),
                Some(Category::Io) => (1, "io"),
                Some(Category::Usage) => (1, "usage"),
                None => (1, "other"),
            };
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{name}]: {msg}");
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed_flag = cli.seed;
    match cli.command {
        Command::GenData { config, out } => gen_data(config, out, seed_flag),
        Command::TrainStage1 {
            config,
            corpus,
            out,
        } => stage1(config, corpus, out, seed_flag),
        Command::TrainStage2 {
            config,
            corpus,
            text_ckpt,
            out,
            cache,
        } => stage2(config, corpus, text_ckpt, out, cache, seed_flag),
        Command::Cache {
            action:
                CacheAction::Build {
                    text_ckpt,
                    corpus,
                    out,
                },
        } => cache_build(text_ckpt, corpus, out),
        Command::Cache {
            action: CacheAction::Inspect { file },
        } => cache_inspect(file),
        Command::Eval {
            ckpt,
            corpus,
            report,
        } => eval(ckpt, corpus, report),
        Command::Sweep {
            config,
            axis,
            values,
            out,
            corpus,
            text_ckpt,
        } => run_sweep(config, axis, values, out, corpus, text_ckpt, seed_flag),
    }
}

/// Parses, validates and seeds the config before any work starts.
fn load_config(path: Option<&Path>, seed_flag: Option<u64>) -> Result<(RunConfig, u64)> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = cfg.resolve_seed(seed_flag)?;
    Ok((cfg, seed))
}

/// Creates `<parent>/<command>-<UTC timestamp>` and echoes the resolved config into it.
fn run_dir(parent: &Path, command: &str, cfg: Option<&RunConfig>) -> Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.6fZ");
    let dir = parent.join(format!("{command}-{stamp}"));
    fs::create_dir_all(&dir)
        .map_err(l2c_core::Error::from)
        .with_context(|| format!("creating {}", dir.display()))?;
    if let Some(c) = cfg {
        fs::write(dir.join("config.json"), c.to_json()).map_err(l2c_core::Error::from)?;
    }
    Ok(dir)
}

fn finish(dir: &Path) {
    println!("{}", dir.display());
}

/// Accepts a gen-data run directory or its `corpus` subdirectory.
fn load_corpus(path: &Path) -> Result<(Corpus, Corpus)> {
    let root = if path.join("corpus").join("train").is_dir() {
        path.join("corpus")
    } else {
        path.to_path_buf()
    };
    let train = Corpus::load(&root.join("train"))?;
    let eval = Corpus::load(&root.join("eval"))?;
    Ok((train, eval))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(l2c_core::Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(l2c_core::Error::from)?;
    Ok(())
}

fn raw_encoder(cfg: &RunConfig, seed: u64) -> Result<TextEncoder> {
    let mut init = Rng::stream(seed, "init").fork("llm");
    Ok(TextEncoder::new("llm", cfg.encoder.llm.clone(), &mut init)?)
}

fn gen_data(config: Option<PathBuf>, out: PathBuf, seed_flag: Option<u64>) -> Result<()> {
    let (cfg, seed) = load_config(config.as_deref(), seed_flag)?;
    let dir = run_dir(&out, "gen-data", Some(&cfg))?;
    let (train, eval) = cfg.data.build(seed)?;
    train.save(&dir.join("corpus").join("train"))?;
    eval.save(&dir.join("corpus").join("eval"))?;
    eprintln!(
        "generated {} train and {} eval images",
        train.len(),
        eval.len()
    );
    finish(&dir);
    Ok(())
}

fn stage1(
    config: Option<PathBuf>,
    corpus: PathBuf,
    out: PathBuf,
    seed_flag: Option<u64>,
) -> Result<()> {
    let (cfg, seed) = load_config(config.as_deref(), seed_flag)?;
    let (train, eval) = load_corpus(&corpus)?;
    let dir = run_dir(&out, "train-stage1", Some(&cfg))?;
    let raw = raw_encoder(&cfg, seed)?;
    let raw_top1 = eval_caption2caption(&TextTower::new(raw.clone()), &eval)?;
    let base_checksum = raw.base_checksum();
    let t0 = Instant::now();
    let result = train_stage1(&cfg.stage1, &train, Some(&eval), raw, seed)?;
    eprintln!("stage 1 finished in {:.1}s", t0.elapsed().as_secs_f64());
    result.log.write_jsonl(&dir.join("train_log.jsonl"))?;
    result.tower.save(&dir, "text")?;
    let final_top1 = eval_caption2caption(&result.tower, &eval)?;
    write_json(
        &dir.join("report.json"),
        &json!({
            "caption2caption_top1_before": raw_top1,
            "caption2caption_top1_after": final_top1,
            "empty_mask_steps": result.empty_mask_steps,
            "base_checksum_unchanged": result.tower.encoder.base_checksum() == base_checksum,
        }),
    )?;
    eprintln!("caption2caption top-1: {raw_top1:.4} -> {final_top1:.4}");
    finish(&dir);
    Ok(())
}

fn stage2(
    config: Option<PathBuf>,
    corpus: PathBuf,
    text_ckpt: PathBuf,
    out: PathBuf,
    cache: Option<PathBuf>,
    seed_flag: Option<u64>,
) -> Result<()> {
    let (mut cfg, seed) = load_config(config.as_deref(), seed_flag)?;
    if cache.is_some() {
        cfg.stage2.offline_cache = true;
        cfg.stage2.validate()?;
    }
    let (train, eval) = load_corpus(&corpus)?;
    let tower = TextTower::load(&text_ckpt, "text")?;
    let dir = run_dir(&out, "train-stage2", Some(&cfg))?;
    let loaded;
    let features = if cfg.stage2.offline_cache {
        loaded = match &cache {
            Some(p) => EmbeddingCache::load(p)?,
            None => {
                let built = build_text_cache(&tower, &train)?;
                built.cache.save(&dir.join("cache.bin"))?;
                built.cache
            }
        };
        TextFeatures::Cached(&loaded)
    } else {
        TextFeatures::Online
    };
    let text_checksum = tower.checksum();
    let result = train_stage2(&cfg.stage2, &train, Some(&eval), &tower, features, seed)?;
    for (i, s) in result.epoch_seconds.iter().enumerate() {
        eprintln!("epoch {i}: {s:.2}s");
    }
    result.log.write_jsonl(&dir.join("train_log.jsonl"))?;
    result.model.save(&dir, "model")?;
    let text = result.text.as_ref().unwrap_or(&tower);
    text.save(&dir, "text")?;
    let heads = evaluate_all_heads(&result.model, Some(text), &eval)?;
    write_json(
        &dir.join("report.json"),
        &json!({ "heads": heads, "text_checksum_unchanged": text.checksum() == text_checksum }),
    )?;
    let mut table = String::new();
    for h in &heads {
        table.push_str(&format!("[{}]\n{}", h.head, h.report.to_table()));
    }
    fs::write(dir.join("report.txt"), &table).map_err(l2c_core::Error::from)?;
    eprint!("{table}");
    finish(&dir);
    Ok(())
}

fn cache_build(text_ckpt: PathBuf, corpus: PathBuf, out: PathBuf) -> Result<()> {
    let (train, _) = load_corpus(&corpus)?;
    let tower = TextTower::load(&text_ckpt, "text")?;
    let dir = run_dir(&out, "cache", None)?;
    let built = build_text_cache(&tower, &train)?;
    built.cache.save(&dir.join("cache.bin"))?;
    write_json(
        &dir.join("report.json"),
        &json!({ "count": built.cache.len(), "dim": built.cache.dim(), "forwards": built.forwards }),
    )?;
    eprintln!(
        "cached {} captions with {} encoder forwards",
        built.cache.len(),
        built.forwards
    );
    finish(&dir);
    Ok(())
}

fn cache_inspect(file: PathBuf) -> Result<()> {
    let header = inspect_cache(&file)?;
    let cache = EmbeddingCache::load(&file)?;
    println!(
        "{}",
        serde_json::to_string(&header).map_err(l2c_core::Error::from)?
    );
    let ids = cache.ids();
    let picks: Vec<u64> = [0, ids.len() / 2, ids.len().saturating_sub(1)]
        .into_iter()
        .filter(|&i| i < ids.len())
        .map(|i| ids[i])
        .collect();
    for id in picks {
        let v = cache.lookup(id)?;
        let norm = v
            .iter()
            .map(|x| (*x as f64) * (*x as f64))
            .sum::<f64>()
            .sqrt();
        let finite = v.iter().all(|x| x.is_finite());
        println!(
            "caption_id {id}: dim {} norm {norm:.6} finite {finite}",
            v.len()
        );
    }
    Ok(())
}

fn eval(ckpt: PathBuf, corpus: PathBuf, report: PathBuf) -> Result<()> {
    let (_, eval) = load_corpus(&corpus)?;
    let tower = TextTower::load(&ckpt, "text")?;
    let dir = run_dir(&report, "eval", None)?;
    let c2c = eval_caption2caption(&tower, &eval)?;
    let mut out = json!({ "caption2caption_top1": c2c });
    let mut table = format!("caption2caption top-1 {c2c:.4}\n");
    if ckpt.join("model.json").is_file() {
        let model = Stage2Model::load(&ckpt, "model")?;
        let heads = evaluate_all_heads(&model, Some(&tower), &eval)?;
        for h in &heads {
            table.push_str(&format!("[{}]\n{}", h.head, h.report.to_table()));
        }
        out["heads"] = serde_json::to_value(&heads).map_err(l2c_core::Error::from)?;
    }
    write_json(&dir.join("report.json"), &out)?;
    fs::write(dir.join("report.txt"), &table).map_err(l2c_core::Error::from)?;
    eprint!("{table}");
    finish(&dir);
    Ok(())
}

fn run_sweep(
    config: Option<PathBuf>,
    axis: Option<String>,
    values: Vec<String>,
    out: PathBuf,
    corpus: Option<PathBuf>,
    text_ckpt: Option<PathBuf>,
    seed_flag: Option<u64>,
) -> Result<()> {
    let (mut cfg, seed) = load_config(config.as_deref(), seed_flag)?;
    let axis_name = match axis.or_else(|| cfg.sweep.axis.clone()) {
        Some(a) => a,
        None => bail!(l2c_core::Error::Config(
            "sweep needs --axis or sweep.axis".into()
        )),
    };
    let axis: SweepAxis = axis_name.parse()?;
    if !values.is_empty() {
        cfg.sweep.values = values;
    }
    cfg.sweep.axis = Some(axis_name);
    if cfg.sweep.values.is_empty() {
        bail!(l2c_core::Error::Config(
            "sweep needs --values or sweep.values".into()
        ));
    }
    let (train, eval) = match &corpus {
        Some(p) => load_corpus(p)?,
        None => cfg.data.build(seed)?,
    };
    let dir = run_dir(&out, "sweep", Some(&cfg))?;
    let raw = raw_encoder(&cfg, seed)?;
    let text = match &text_ckpt {
        Some(p) => TextTower::load(p, "text")?,
        None if axis == SweepAxis::Stage1Method => TextTower::new(raw.clone()),
        None => {
            let s1 = l2c_core::stage1::Stage1Config {
                eval_every_epoch: false,
                ..cfg.stage1.clone()
            };
            train_stage1(&s1, &train, None, raw.clone(), seed)?.tower
        }
    };
    let inputs = SweepInputs {
        train: &train,
        eval: &eval,
        text: &text,
        raw: &raw,
        stage1: &cfg.stage1,
        stage2: &cfg.stage2,
        seed,
    };
    let report = sweep(axis, &cfg.sweep.values, &inputs)?;
    write_json(&dir.join("report.json"), &report)?;
    let table = report.to_table();
    fs::write(dir.join("report.txt"), &table).map_err(l2c_core::Error::from)?;
    eprint!("{table}");
    finish(&dir);
    Ok(())
}
