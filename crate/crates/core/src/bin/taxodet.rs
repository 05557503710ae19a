use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use taxodet::checkpoint;
use taxodet::harness::data::{read_scenes, synthesize_features, write_scenes};
use taxodet::harness::eval::ImageDetection;
use taxodet::harness::train::RunReport;
use taxodet::harness::{
    compare_modes, evaluate, generate_datasets, run_train, BenchConfig, BenchData, CategorySource, MatchingMode, World,
};
use taxodet::{Error, Result};

#[derive(Parser)]
#[command(name = "taxodet", version, about = "Multi-dataset detection with language-seeded queries")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic datasets into a directory.
    Gen {
        #[command(flatten)]
        bench: BenchArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write a checkpoint, report.json and per_class.csv.
    Train {
        #[command(flatten)]
        bench: BenchArgs,
        /// Directory written by `gen`; generated in memory when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on its evaluation scenes.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Override the number of extracted categories.
        #[arg(long)]
        topk: Option<usize>,
        /// Bypass the category extractor and query every category.
        #[arg(long)]
        all_categories: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train once per matching mode and report per-class AP differences.
    Compare {
        #[command(flatten)]
        bench: BenchArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write detections for a scene file as JSON lines.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        /// Comma-separated category names; bypasses the extractor.
        #[arg(long, value_delimiter = ',')]
        categories: Option<Vec<String>>,
        #[arg(long, default_value_t = 0.3)]
        threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct BenchArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    queries_per_class: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    mu_asl: Option<f64>,
    #[arg(long)]
    alias_fraction: Option<f64>,
    /// `group` or `standard_merged`.
    #[arg(long)]
    matching_mode: Option<MatchingMode>,
    #[arg(long)]
    no_negatives: bool,
    #[arg(long)]
    images_per_dataset: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    grad_clip: Option<f64>,
}

impl BenchArgs {
    fn apply(&self, mut cfg: BenchConfig) -> Result<BenchConfig> {
        macro_rules! set {
            ($($field:ident => $target:ident),*) => {$(
                if let Some(v) = self.$field { cfg.$target = v; }
            )*};
        }
        set!(seed => seed, topk => top_k, queries_per_class => n_per_class, epochs => epochs, lr => lr,
             mu_asl => mu_asl, alias_fraction => alias_fraction, matching_mode => matching_mode,
             images_per_dataset => images_per_dataset, batch_size => batch_size, grad_clip => grad_clip);
        if self.no_negatives {
            cfg.supervise_negatives = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_data(dir: &Path, cfg: &BenchConfig, data: &BenchData) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let world = json!({"config": cfg, "world": data.world.to_json()});
    std::fs::write(dir.join("world.json"), serde_json::to_string_pretty(&world)? + "\n")?;
    write_scenes(dir.join("train.jsonl"), &data.train)?;
    write_scenes(dir.join("eval.jsonl"), &data.eval)?;
    data.world.appearance.save(dir.join("embeddings.txt"), &data.world.label_space)?;
    Ok(())
}

fn read_data(dir: &Path) -> Result<(BenchConfig, BenchData)> {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("world.json"))?)?;
    let cfg: BenchConfig = serde_json::from_value(v["config"].clone())?;
    let world = World::from_json(v["world"].clone())?;
    let train = read_scenes(dir.join("train.jsonl"))?;
    let eval = read_scenes(dir.join("eval.jsonl"))?;
    Ok((cfg, BenchData { world, train, eval }))
}

fn checkpoint_meta(cfg: &BenchConfig, world: &World) -> serde_json::Value {
    json!({"config": cfg, "world": world.to_json()})
}

fn load_model(path: &Path) -> Result<(taxodet::model::Detector, BenchConfig, World)> {
    let (model, meta) = checkpoint::load(path)?;
    let cfg: BenchConfig = serde_json::from_value(meta["config"].clone())?;
    let world = World::from_json(meta["world"].clone())?;
    Ok((model, cfg, world))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { bench, out } => {
            let cfg = bench.apply(BenchConfig::default())?;
            write_data(&out, &cfg, &generate_datasets(&cfg)?)?;
        }
        Command::Train { bench, data, out } => {
            let (cfg, data) = match data {
                Some(dir) => {
                    let (base, data) = read_data(&dir)?;
                    (bench.apply(base)?, data)
                }
                None => {
                    let cfg = bench.apply(BenchConfig::default())?;
                    let data = generate_datasets(&cfg)?;
                    (cfg, data)
                }
            };
            let run = run_train(&cfg, &data)?;
            std::fs::create_dir_all(&out)?;
            checkpoint::save(out.join("model.ckpt"), &run.model, &checkpoint_meta(&cfg, &data.world))?;
            run.report.write(&out)?;
            eprintln!(
                "trained {} steps in {:.1}s: recall {:.3}, mAP {:.3}",
                run.report.steps, run.report.wall_clock_secs, run.report.multilabel_recall, run.report.mean_ap
            );
            if let Some(msg) = run.diverged {
                return Err(Error::Training(format!("{msg}; last good state saved")));
            }
        }
        Command::Eval { model, data, topk, all_categories, out } => {
            let (model, cfg, world) = load_model(&model)?;
            let data = match data {
                Some(dir) => read_data(&dir)?.1,
                None => generate_datasets(&cfg)?,
            };
            if data.world != world {
                return Err(Error::Config("scenes were generated for a different label space".into()));
            }
            let source = if all_categories {
                CategorySource::All
            } else {
                CategorySource::Extractor { top_k: topk.unwrap_or(cfg.top_k) }
            };
            let summary = evaluate(&model, &data, source)?;
            let report = RunReport::from_summary(&cfg, &world, &summary);
            report.write(&out)?;
            eprintln!("recall {:.3}, mAP {:.3}", report.multilabel_recall, report.mean_ap);
        }
        Command::Compare { bench, out } => {
            let cfg = bench.apply(BenchConfig::default())?;
            let c = compare_modes(&cfg)?;
            c.write(&out)?;
            eprintln!(
                "mAP group {:.3} vs standard {:.3}; aliased classes {:.3} vs {:.3}",
                c.group.mean_ap, c.standard_merged.mean_ap, c.group.aliased_mean_ap, c.standard_merged.aliased_mean_ap
            );
        }
        Command::Detect { model, scenes, categories, threshold, out } => {
            let (model, _, world) = load_model(&model)?;
            let ids = categories
                .map(|names| names.iter().map(|n| world.label_space.lookup(n)).collect::<Result<Vec<_>>>())
                .transpose()?;
            if ids.as_ref().is_some_and(|ids| ids.len() > model.config.top_k) {
                return Err(Error::Config(format!("at most {} categories may be requested", model.config.top_k)));
            }
            let mut lines = String::new();
            for scene in read_scenes(&scenes)? {
                let f = synthesize_features(&scene, &world.appearance);
                let dets = match &ids {
                    Some(ids) => model.detect_with_categories(&f, ids, threshold)?,
                    None => model.detect(&f, threshold)?,
                };
                for d in dets {
                    let rec = ImageDetection { image: scene.image, detection: d };
                    let b = rec.detection.bbox;
                    let line = json!({
                        "image": rec.image,
                        "category": world.label_space.name(rec.detection.category_id),
                        "score": rec.detection.score,
                        "box": [b.cx, b.cy, b.w, b.h],
                    });
                    lines.push_str(&line.to_string());
                    lines.push('\n');
                }
            }
            match out {
                Some(path) => std::fs::write(path, lines)?,
                None => match std::io::Write::write_all(&mut std::io::stdout().lock(), lines.as_bytes()) {
                    Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
                    other => other?,
                },
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
