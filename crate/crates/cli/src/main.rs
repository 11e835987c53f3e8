//! `reldl`: generate data, run, train, check and export relational models.

mod workspace;

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use reldl::checks::{gradcheck_seeded, random_point, verify_layers, verify_model, CheckReport};
use reldl::datasets::{Dataset, SbmGraph, ToyImages};
use reldl::layers::{argmax_predict, build_model, ModelSpec};
use reldl::plan::Relations;
use reldl::relcore::io::write_relation;
use reldl::sqlcheck::round_trip;
use reldl::sqlgen::{Dialect, ModelScripts};
use reldl::train::{train, write_history, BatchSize, TrainConfig};
use reldl::{Error, Result};

use workspace::{builtin_dataset, builtin_spec, Workspace};

#[derive(Parser)]
#[command(name = "reldl", version, about = "Neural networks as relational queries")]
struct Cli {
    /// Directory holding model.json, data/, params/, sql/ and reports/.
    #[arg(long, global = true, default_value = ".")]
    workspace: PathBuf,
    /// Seed for generation, initialization and checks.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Built-in model (toy-cnn, gcn, full-cnn) or a spec file, instead of model.json.
    #[arg(long, global = true)]
    model: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and its model spec into the workspace.
    #[command(subcommand)]
    Generate(Generate),
    /// Evaluate the model once; print the loss and write predictions.csv.
    Forward,
    /// Train with SGD; write params/ and history.csv.
    Train(TrainArgs),
    /// Write <model>_schema.sql, <model>_data.sql and <model>_forward.sql.
    EmitSql {
        #[arg(long, default_value = "embedded-default", value_parser = parse_dialect)]
        dialect: Dialect,
    },
    /// Compare every layer kind and the built-in models with the dense oracle,
    /// and run the SQL round trip.
    Verify {
        /// Random inputs per layer kind.
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Compare gradients with central finite differences; write reports/gradcheck.json.
    Gradcheck {
        /// Random points tried before giving up on finding one away from kinks.
        #[arg(long, default_value_t = 20)]
        attempts: usize,
    },
}

#[derive(Subcommand)]
enum Generate {
    /// Images with a class-specific bright patch plus noise.
    ToyImages(ToyArgs),
    /// A stochastic-block-model graph for node classification.
    SbmGraph(SbmArgs),
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long, default_value_t = ToyImages::default().images)]
    images: usize,
    #[arg(long, default_value_t = ToyImages::default().classes)]
    classes: usize,
    #[arg(long, default_value_t = ToyImages::default().channels)]
    channels: usize,
    #[arg(long, default_value_t = ToyImages::default().extent)]
    extent: usize,
    #[arg(long, default_value_t = ToyImages::default().noise)]
    noise: f64,
}

#[derive(Args)]
struct SbmArgs {
    #[arg(long, default_value_t = SbmGraph::default().nodes)]
    nodes: usize,
    #[arg(long, default_value_t = SbmGraph::default().blocks)]
    blocks: usize,
    #[arg(long, default_value_t = SbmGraph::default().p_intra)]
    p_intra: f64,
    #[arg(long, default_value_t = SbmGraph::default().p_inter)]
    p_inter: f64,
    #[arg(long, default_value_t = SbmGraph::default().features)]
    features: usize,
    #[arg(long, default_value_t = SbmGraph::default().hidden)]
    hidden: usize,
    #[arg(long, default_value_t = SbmGraph::default().train_fraction)]
    train_fraction: f64,
    #[arg(long, default_value_t = SbmGraph::default().feature_signal)]
    feature_signal: f64,
    #[arg(long, default_value_t = SbmGraph::default().feature_noise)]
    feature_noise: f64,
    /// Leave the diagonal of the adjacency empty before normalizing.
    #[arg(long)]
    no_self_loops: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// A positive integer or `all`.
    #[arg(long)]
    batch_size: Option<BatchSize>,
    /// Stop once the epoch loss is at or below this value.
    #[arg(long)]
    loss_threshold: Option<f64>,
}

fn parse_dialect(s: &str) -> std::result::Result<Dialect, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Whether every check passed.
type Passed = bool;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("reldl: {}", e.to_string().replace('\n', " "));
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> Result<Passed> {
    let ws = Workspace::new(&cli.workspace);
    let model = cli.model.as_deref();
    match &cli.command {
        Command::Generate(g) => generate(&ws, cli.seed.unwrap_or(0), g),
        Command::Forward => forward(&ws, model, cli.seed.unwrap_or(0)),
        Command::Train(a) => train_cmd(&ws, model, cli.seed, a),
        Command::EmitSql { dialect } => emit_sql(&ws, model, cli.seed.unwrap_or(0), *dialect),
        Command::Verify { trials } => verify(&ws, model, cli.seed.unwrap_or(0), *trials),
        Command::Gradcheck { attempts } => gradcheck(&ws, model, cli.seed.unwrap_or(0), *attempts),
    }
}

fn write_json(path: PathBuf, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn status(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn generate(ws: &Workspace, seed: u64, g: &Generate) -> Result<Passed> {
    let (kind, params, mut ds, train) = match g {
        Generate::ToyImages(a) => {
            let t = ToyImages { images: a.images, classes: a.classes, channels: a.channels, extent: a.extent, noise: a.noise };
            let ds = t.generate(seed)?;
            let batch = BatchSize::Size(16.min(t.images));
            let cfg = TrainConfig { learning_rate: 0.05, max_epochs: 30, batch_size: batch, loss_threshold: None, seed };
            ("toy-images", serde_json::to_value(&t)?, ds, cfg)
        }
        Generate::SbmGraph(a) => {
            let s = SbmGraph {
                nodes: a.nodes,
                blocks: a.blocks,
                p_intra: a.p_intra,
                p_inter: a.p_inter,
                features: a.features,
                hidden: a.hidden,
                train_fraction: a.train_fraction,
                feature_signal: a.feature_signal,
                feature_noise: a.feature_noise,
                self_loops: !a.no_self_loops,
            };
            let ds = s.generate(seed)?;
            ("sbm-graph", serde_json::to_value(&s)?, ds, TrainConfig { seed, ..TrainConfig::default() })
        }
    };
    ds.spec.train = Some(train);
    fs::create_dir_all(&ws.data_dir())?;
    fs::write(ws.model_path(), ds.spec.to_json()? + "\n")?;
    for (name, rel) in &ds.relations {
        write_relation(&ws.data_dir(), name, rel)?;
    }
    write_json(ws.data_dir().join("generator.json"), &serde_json::json!({ "kind": kind, "seed": seed, "params": params }))?;
    let names: Vec<&str> = ds.relations.keys().map(String::as_str).collect();
    println!("{kind}: wrote model.json ({}) and data/ [{}]", ds.spec.model.as_str(), names.join(", "));
    Ok(true)
}

/// A built-in model with its generated data, or a spec with the workspace's data.
fn load(ws: &Workspace, model: Option<&str>, seed: u64) -> Result<(ModelSpec, Relations)> {
    if let Some(name) = model.filter(|m| builtin_spec(m).is_some()) {
        let ds = builtin_dataset(name, seed, None)?;
        return Ok((ds.spec, ds.relations));
    }
    let spec = ws.spec(model)?;
    let data = ws.data(&spec)?;
    Ok((spec, data))
}

fn forward(ws: &Workspace, model: Option<&str>, seed: u64) -> Result<Passed> {
    let (spec, data) = load(ws, model, seed)?;
    let plan = build_model(&spec)?;
    let (params, fresh) = ws.params(&plan, seed)?;
    if fresh {
        println!("no params/ directory: parameters initialized from seed {seed}");
    }
    let values = plan.evaluate(&data, params.relations())?;
    let logits = match &plan.loss {
        Some(head) => {
            println!("loss {:.6}", values[plan.output].scalar_value()?);
            let labels = &data[&head.labels];
            let preds = argmax_predict(&values[head.logits])?;
            let correct = preds.iter().filter(|(r, c)| labels.get(&[*r, *c]) == 1.0).count();
            println!("accuracy {:.4} ({correct}/{})", correct as f64 / preds.len().max(1) as f64, preds.len());
            &values[head.input]
        }
        None if plan.predicts => &values[plan.output],
        None => {
            println!("output: {} stored entries", values[plan.output].len());
            return Ok(true);
        }
    };
    let preds = argmax_predict(logits)?;
    if let (Some(sel), Some(lab)) = (data.get("test_select"), data.get("test_labels")) {
        let by_row: BTreeMap<i64, i64> = preds.iter().copied().collect();
        let hits = sel
            .entries()
            .iter()
            .filter(|(c, _)| by_row.get(&c[1]).is_some_and(|p| lab.get(&[c[0], *p]) == 1.0))
            .count();
        println!("test accuracy {:.4} ({hits}/{})", hits as f64 / sel.len().max(1) as f64, sel.len());
    }
    let mut out = String::from("row,prediction\n");
    for (r, c) in &preds {
        out.push_str(&format!("{r},{c}\n"));
    }
    fs::write(ws.predictions_path(), out)?;
    Ok(true)
}

fn train_cmd(ws: &Workspace, model: Option<&str>, seed: Option<u64>, a: &TrainArgs) -> Result<Passed> {
    let (spec, data) = load(ws, model, seed.unwrap_or(0))?;
    let mut cfg = spec.train.clone().unwrap_or_default();
    cfg.learning_rate = a.lr.unwrap_or(cfg.learning_rate);
    cfg.max_epochs = a.epochs.unwrap_or(cfg.max_epochs);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.loss_threshold = a.loss_threshold.or(cfg.loss_threshold);
    cfg.seed = seed.unwrap_or(cfg.seed);
    let result = train(&spec, &data, &cfg)?;
    result.params.save(&ws.params_dir())?;
    write_history(&ws.history_path(), &result.history)?;
    match (result.history.first(), result.history.last()) {
        (Some(first), Some(last)) => {
            let acc = last.accuracy.map_or(String::new(), |a| format!(", accuracy {a:.4}"));
            println!("{} epochs: loss {:.6} -> {:.6}{acc}", result.history.len(), first.loss, last.loss);
        }
        _ => println!("0 epochs: parameters saved unchanged"),
    }
    Ok(true)
}

fn emit_sql(ws: &Workspace, model: Option<&str>, seed: u64, dialect: Dialect) -> Result<Passed> {
    let (spec, data) = load(ws, model, seed)?;
    let plan = build_model(&spec)?;
    let (params, _) = ws.params(&plan, seed)?;
    let scripts = ModelScripts::emit(&plan, &data, params.relations(), dialect)?;
    for p in scripts.write(&ws.sql_dir(), spec.model.as_str())? {
        println!("{}", p.display());
    }
    Ok(true)
}

/// What a check command runs against: a built-in model with generated data,
/// or a spec with the workspace's data.
enum Target {
    Builtin(String),
    Workspace(ModelSpec),
}

fn targets(ws: &Workspace, model: Option<&str>, defaults: &[&str]) -> Result<Vec<Target>> {
    Ok(match model {
        Some(m) if builtin_spec(m).is_some() => vec![Target::Builtin(m.to_string())],
        Some(m) => vec![Target::Workspace(ws.spec(Some(m))?)],
        None => {
            let mut t: Vec<Target> = defaults.iter().map(|d| Target::Builtin(d.to_string())).collect();
            if ws.has_model() {
                t.push(Target::Workspace(ws.spec(None)?));
            }
            t
        }
    })
}

fn dataset(ws: &Workspace, t: &Target, seed: u64, images: Option<usize>) -> Result<(String, Dataset)> {
    Ok(match t {
        Target::Builtin(name) => (name.clone(), builtin_dataset(name, seed, images)?),
        Target::Workspace(spec) => ("workspace".into(), Dataset { spec: spec.clone(), relations: ws.data(spec)? }),
    })
}

fn verify(ws: &Workspace, model: Option<&str>, seed: u64, trials: usize) -> Result<Passed> {
    let mut reports = Vec::new();
    for r in verify_layers(seed, trials)? {
        println!("layer {}: {} (max rel err {:.2e})", r.node, status(r.pass), r.max_rel_err);
        reports.push(r);
    }
    for t in targets(ws, model, &["full-cnn", "gcn", "toy-cnn"])? {
        let (name, ds) = dataset(ws, &t, seed, None)?;
        let plan = build_model(&ds.spec)?;
        let params = random_point(&plan, seed)?;
        if plan.loss.is_some() {
            let r = verify_model(&format!("model {name}"), &ds, &params, 1e-7)?;
            println!("{}: {} (rel err {:.2e})", r.node, status(r.pass), r.max_rel_err);
            reports.push(r);
        }
        // The full-size image model takes seconds in SQLite; desk-scale models cover the SQL path.
        if name == "full-cnn" {
            continue;
        }
        for d in Dialect::ALL {
            let mut sum = CheckReport::new(&format!("sql {name} {d}"));
            for r in round_trip(&plan, &ds.relations, params.relations(), d)? {
                sum.merge(&r);
            }
            println!("{}: {} (max abs err {:.2e})", sum.node, status(sum.pass), sum.max_abs_err);
            reports.push(sum);
        }
    }
    write_json(ws.reports_dir().join("verify.json"), &reports)?;
    Ok(reports.iter().all(|r| r.pass))
}

const GRADCHECK_SAMPLES: usize = 4;

fn gradcheck(ws: &Workspace, model: Option<&str>, seed: u64, attempts: usize) -> Result<Passed> {
    let mut reports = Vec::new();
    for t in targets(ws, model, &["toy-cnn", "gcn"])? {
        // Every parameter coordinate costs two dense forward passes, and more
        // samples put a random point closer to some relu or pooling kink.
        let (name, ds) = dataset(ws, &t, seed, Some(GRADCHECK_SAMPLES))?;
        let ds = ds.head(GRADCHECK_SAMPLES)?;
        for mut r in gradcheck_seeded(&ds.spec, &ds.relations, seed, attempts)? {
            r.node = format!("{name}/{}", r.node);
            println!("{}: {} (max abs err {:.2e}, max rel err {:.2e})", r.node, status(r.pass), r.max_abs_err, r.max_rel_err);
            reports.push(r);
        }
    }
    let path = ws.reports_dir().join("gradcheck.json");
    write_json(path.clone(), &reports)?;
    println!("report: {}", path.display());
    Ok(reports.iter().all(|r| r.pass))
}
