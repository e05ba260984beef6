use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kgrec::data::{self, InteractionDataset, KnowledgeGraph, SyntheticSpec};
use kgrec::metrics::{self, Target};
use kgrec::training::{self, FitOptions, GradCorruption};
use kgrec::{checkpoint, Model64, Preset, TrainConfig};

#[derive(Parser)]
#[command(name = "kgrec", version, about = "Knowledge-aware long-tail recommendation")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Load interactions (and optionally a KG), split them and write train/val/test files.
    Ingest(IngestArgs),
    /// Generate a long-tail synthetic dataset with an attribute KG.
    GenSynthetic(GenArgs),
    /// Train the Tucker KG embeddings alone and save a checkpoint.
    KgPretrain(TrainArgs),
    /// Train the full model.
    Train(TrainArgs),
    /// Full-ranking evaluation of a checkpoint on the test split.
    Eval(EvalArgs),
    /// Write final item embeddings with head/tail labels as TSV.
    ExportEmbeddings(ExportArgs),
    /// Print the degree histogram and sparsity of an interaction file.
    Stats(StatsArgs),
    /// Compare analytic gradients against finite differences on a toy model.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Interaction file of `user item` lines.
    #[arg(long)]
    interactions: PathBuf,
    /// KG file of `head relation tail` lines; item ids are entity ids.
    #[arg(long)]
    kg: Option<PathBuf>,
}

#[derive(Args)]
struct ConfigArgs {
    /// Base preset.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Flat `key = value` config file applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Random seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 gives fully reproducible runs.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Split seed.
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct GenArgs {
    /// Output directory for interactions.tsv and kg.tsv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    users: usize,
    #[arg(long, default_value_t = 300)]
    items: usize,
    #[arg(long, default_value_t = 20)]
    per_user: usize,
    /// Zipf exponent of item popularity.
    #[arg(long, default_value_t = 1.2)]
    zipf: f64,
    #[arg(long, default_value_t = 4)]
    relations: usize,
    #[arg(long, default_value_t = 3)]
    triples_per_item: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory for logs and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Epochs (overrides the config).
    #[arg(long)]
    epochs: Option<usize>,
    /// Skip the KG pretraining phase.
    #[arg(long)]
    skip_kg_pretrain: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Checkpoint to evaluate; its directory's config.txt is used when --config is absent.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated cutoffs.
    #[arg(long, default_value = "10,20")]
    cutoffs: String,
    #[arg(long, default_value_t = 0.1)]
    tail_fraction: f64,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    tail_fraction: f64,
    /// Output TSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    interactions: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Fails when the largest relative error exceeds this.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Scale one tensor's analytic gradient by 1.1 before comparing.
    #[arg(long, value_name = "TENSOR")]
    corrupt: Option<String>,
}

type AnyResult<T> = Result<T, Box<dyn std::error::Error>>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> AnyResult<()> {
    match cli.verb {
        Verb::Ingest(a) => ingest(a),
        Verb::GenSynthetic(a) => gen_synthetic(a),
        Verb::KgPretrain(a) => train(a, true),
        Verb::Train(a) => train(a, false),
        Verb::Eval(a) => eval(a),
        Verb::ExportEmbeddings(a) => export(a),
        Verb::Stats(a) => stats(a),
        Verb::GradCheck(a) => grad_check(a),
    }
}

fn print_json(v: &impl serde::Serialize) -> AnyResult<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn set_threads(n: Option<usize>) -> AnyResult<()> {
    if let Some(n) = n {
        if n == 0 {
            return Err("--threads must be positive".into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn build_config(a: &ConfigArgs, fallback: Option<&Path>) -> AnyResult<TrainConfig> {
    let preset = Preset::parse(&a.preset).ok_or_else(|| format!("unknown preset {}", a.preset))?;
    let mut cfg = TrainConfig::preset(preset);
    match (&a.config, fallback) {
        (Some(p), _) => cfg.apply_file(p)?,
        (None, Some(p)) if p.exists() => cfg.apply_file(p)?,
        _ => {}
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| format!("--set expects KEY=VALUE, got {kv}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Loads interactions and KG, then splits with the config seed.
fn load_data(d: &DataArgs, seed: u64) -> AnyResult<(InteractionDataset, KnowledgeGraph)> {
    let (ds, report) = data::load_interactions(&d.interactions)?;
    if report.reindexed_users {
        eprintln!("note: user ids were reindexed densely");
    }
    let kg = match &d.kg {
        Some(p) => {
            let (kg, rep) = data::load_kg_triples(p, ds.num_items())?;
            if rep.empty {
                eprintln!("warning: knowledge graph {} is empty", p.display());
            }
            if kg.num_relations() == 0 {
                KnowledgeGraph::new(ds.num_items(), kg.num_entities(), 1, Vec::new())?
            } else {
                kg
            }
        }
        None => KnowledgeGraph::new(ds.num_items(), ds.num_items(), 1, Vec::new())?,
    };
    Ok((data::split_dataset(&ds, seed), kg))
}

fn ingest(a: IngestArgs) -> AnyResult<()> {
    let (ds, report) = data::load_interactions(&a.data.interactions)?;
    std::fs::create_dir_all(&a.out)?;
    let split = data::split_dataset(&ds, a.seed);
    data::write_splits(&split, &a.out)?;
    let kg_report = match &a.data.kg {
        Some(p) => {
            let (kg, rep) = data::load_kg_triples(p, ds.num_items())?;
            kg.write_tsv(a.out.join("kg.tsv"))?;
            Some(rep)
        }
        None => None,
    };
    print_json(&serde_json::json!({ "interactions": report, "kg": kg_report }))
}

fn gen_synthetic(a: GenArgs) -> AnyResult<()> {
    let spec = SyntheticSpec {
        num_users: a.users,
        num_items: a.items,
        interactions_per_user: a.per_user,
        zipf_exponent: a.zipf,
        kg_relations: a.relations,
        kg_triples_per_item: a.triples_per_item,
        seed: a.seed,
    };
    let (ds, kg) = data::gen_synthetic_longtail(&spec)?;
    std::fs::create_dir_all(&a.out)?;
    data::write_interactions(&ds, a.out.join("interactions.tsv"))?;
    kg.write_tsv(a.out.join("kg.tsv"))?;
    print_json(&serde_json::json!({
        "users": ds.num_users(),
        "items": ds.num_items(),
        "interactions": ds.interactions().len(),
        "kg_triples": kg.triples().len(),
    }))
}

fn train(a: TrainArgs, pretrain_only: bool) -> AnyResult<()> {
    set_threads(a.cfg.threads)?;
    let mut cfg = build_config(&a.cfg, None)?;
    if let Some(e) = a.epochs {
        if pretrain_only {
            cfg.kg_pretrain_epochs = e;
        } else {
            cfg.epochs = e;
        }
    }
    cfg.validate()?;
    let (ds, kg) = load_data(&a.data, cfg.seed)?;
    std::fs::create_dir_all(&a.out)?;
    let mut model = Model64::new(&cfg, &ds, &kg, Some(&a.out))?;
    if pretrain_only {
        let losses = training::kg_pretrain(&mut model, cfg.kg_pretrain_epochs)?;
        std::fs::write(a.out.join("config.txt"), cfg.to_text())?;
        checkpoint::save(&model, a.out.join("kg.sprk"))?;
        return print_json(&serde_json::json!({ "kg_pretrain_losses": losses }));
    }
    let opts = FitOptions {
        out_dir: a.out.clone(),
        kg_pretrain: !a.skip_kg_pretrain,
    };
    let summary = training::fit(&mut model, &ds, &opts)?;
    let zero = kgrec::contrastive::zero_projection_count();
    if zero > 0 {
        eprintln!("warning: {zero} contrastive projections had near-zero norm");
    }
    print_json(&serde_json::json!({
        "epochs": summary.epochs.len(),
        "best_epoch": summary.best_epoch,
        "best_val_recall@20": summary.best_val_recall,
        "final": summary.epochs.last(),
    }))
}

fn load_model(d: &DataArgs, c: &ConfigArgs, ckpt: &Path) -> AnyResult<(Model64, InteractionDataset)> {
    set_threads(c.threads)?;
    let sibling = ckpt.parent().map(|p| p.join("config.txt"));
    let cfg = build_config(c, sibling.as_deref())?;
    let (ds, kg) = load_data(d, cfg.seed)?;
    let model = checkpoint::load(ckpt, &cfg, &ds, &kg)?;
    Ok((model, ds))
}

fn parse_cutoffs(s: &str) -> AnyResult<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad cutoff {p:?}: {e}").into()))
        .collect()
}

fn eval(a: EvalArgs) -> AnyResult<()> {
    let cutoffs = parse_cutoffs(&a.cutoffs)?;
    let (model, ds) = load_model(&a.data, &a.cfg, &a.checkpoint)?;
    let emb = model.embeddings();
    let report = metrics::evaluate_ranking(&emb, &ds, &cutoffs, a.tail_fraction, Target::Test)?;
    if let Some(out) = &a.out {
        std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    }
    print_json(&report)
}

fn export(a: ExportArgs) -> AnyResult<()> {
    let (model, ds) = load_model(&a.data, &a.cfg, &a.checkpoint)?;
    let emb = model.embeddings();
    metrics::export_embeddings(&emb.item_final, &ds, a.tail_fraction, &a.out)?;
    Ok(())
}

fn stats(a: StatsArgs) -> AnyResult<()> {
    let (ds, _) = data::load_interactions(&a.interactions)?;
    print_json(&data::dataset_stats(&ds))
}

fn grad_check(a: GradCheckArgs) -> AnyResult<()> {
    let (model, batch) = training::toy_problem::<f64>(a.seed)?;
    let corrupt = a.corrupt.map(|tensor| GradCorruption {
        tensor,
        fraction: 0.1,
    });
    let report = training::grad_check(&model, &batch, a.seed, corrupt.as_ref())?;
    print_json(&report)?;
    if report.max_relative_error > a.tolerance {
        return Err(format!(
            "max relative error {:.3e} exceeds {:.1e}",
            report.max_relative_error, a.tolerance
        )
        .into());
    }
    Ok(())
}
