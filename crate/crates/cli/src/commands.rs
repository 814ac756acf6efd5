use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use log::info;
use serde::de::DeserializeOwned;
use serde::Serialize;

use aqinfer::avgae::{self, AvgaeConfig, TrainedModel};
use aqinfer::eval::{self, Completer, Method, SplitSpec};
use aqinfer::geo::GeoPoint;
use aqinfer::graph::{self, PropagationOperator, StreetGraph, StreetNetwork};
use aqinfer::ingest::{self, AggregationConfig, ObservationMatrix};
use aqinfer::synth::{self, SynthConfig};
use aqinfer::Error;

use crate::manifest::{manifest_path_for, sibling, ManifestBuilder};
use crate::{AggregateArgs, BuildGraphArgs, EvaluateArgs, InferArgs, ModelArgs, Preset, SynthArgs, TrainArgs};

fn input_error(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidInput(msg.into()).into()
}

fn parse_instant(flag: &str, s: &str) -> Result<i64> {
    ingest::parse_timestamp(s).ok_or_else(|| input_error(format!("--{flag}: cannot parse {s:?} as a timestamp")))
}

pub fn aggregate(args: AggregateArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("aggregate");
    if args.tau <= 0 {
        return Err(input_error("--tau must be positive"));
    }
    let parsed = ingest::parse_measurements(&args.input)?;
    if parsed.skipped() > 0 {
        log::warn!(
            "skipped {} malformed and {} negative rows",
            parsed.malformed,
            parsed.negative
        );
    }
    let records = parsed.records;
    if records.is_empty() {
        return Err(input_error(format!("{} holds no usable records", args.input.display())));
    }
    let first = records.iter().map(|r| r.timestamp).min().unwrap_or(0);
    let last = records.iter().map(|r| r.timestamp).max().unwrap_or(0);
    let start = match &args.from {
        Some(s) => parse_instant("from", s)?,
        None => first.div_euclid(args.tau) * args.tau,
    };
    let end = match &args.to {
        Some(s) => parse_instant("to", s)?,
        None => (last.div_euclid(args.tau) + 1) * args.tau,
    };
    let config = AggregationConfig {
        slot_duration: args.tau,
        radius_m: args.radius,
        period_start: start,
        period_end: end,
    };
    config.validate()?;
    let in_period: Vec<_> = records
        .iter()
        .copied()
        .filter(|r| config.slot_of(r.timestamp).is_some())
        .collect();
    if in_period.is_empty() {
        return Err(input_error("no records fall inside the aggregation period"));
    }
    let locations = ingest::discretize_locations(&in_period, args.radius)?;
    let agg = ingest::aggregate(&in_period, &locations, &config)?;
    agg.matrix.save(&args.out)?;

    let m = &agg.matrix;
    println!(
        "N = {}  T = {}  known = {}  density = {:.4}%",
        m.n_locations(),
        m.n_slots(),
        m.known_count(),
        100.0 * m.density()
    );
    manifest
        .config(config)
        .input("measurements", &args.input)
        .output("observations", &args.out);
    manifest.write(&manifest_path_for(&args.out))
}

pub fn build_graph(args: BuildGraphArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("build-graph");
    let obs = ObservationMatrix::load(&args.obs)?;
    let network = args.network.as_deref().map(StreetNetwork::load).transpose()?;
    let g = graph::build_graph(obs.locations(), network.as_ref(), args.delta)?;
    g.save(&args.out)?;

    let stats = g.stats();
    println!(
        "nodes = {}  edges = {}  isolated = {}",
        stats.nodes, stats.edges, stats.isolated
    );
    if stats.edges > 0 {
        println!("weights in [{:.6e}, {:.6e}]", stats.min_weight, stats.max_weight);
    }
    println!("degree histogram (neighbors: nodes):");
    for (deg, count) in &stats.degree_histogram {
        println!("  {deg:>4}: {count}");
    }
    manifest
        .config(serde_json::json!({ "delta_m": args.delta, "stats": stats }))
        .input("observations", &args.obs)
        .output("graph", &args.out);
    if let Some(n) = &args.network {
        manifest.input("network", n);
    }
    manifest.write(&manifest_path_for(&args.out))
}

fn load_operator(graph_path: &Path, obs: &ObservationMatrix) -> Result<PropagationOperator> {
    let g = StreetGraph::load(graph_path)?;
    if g.n != obs.n_locations() {
        return Err(input_error(format!(
            "graph has {} nodes but the observation matrix has {} locations",
            g.n,
            obs.n_locations()
        )));
    }
    Ok(graph::normalize(&g))
}

/// Replaces the fields of `base` that the JSON object at `path` names.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, path: &Path, what: &'static str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let format = |e: serde_json::Error| Error::Format {
        what,
        detail: e.to_string(),
    };
    let patch: serde_json::Value = serde_json::from_str(&text).map_err(format)?;
    let serde_json::Value::Object(fields) = patch else {
        return Err(input_error(format!("{what} must be a JSON object")));
    };
    let mut merged = serde_json::to_value(base)?;
    for (k, v) in fields {
        merged[k] = v;
    }
    Ok(serde_json::from_value(merged).map_err(format)?)
}

fn resolve_model(args: &ModelArgs, seed: u64) -> Result<AvgaeConfig> {
    let mut c = if args.desk_scale {
        AvgaeConfig::desk_scale()
    } else {
        AvgaeConfig::default()
    };
    if let Some(path) = &args.config {
        c = overlay(&c, path, "avgae config")?;
    }
    if let Some(v) = args.latent_dim {
        c.latent_dim = v;
    }
    if let Some(v) = args.kl_weight {
        c.kl_weight = v;
    }
    if let Some(v) = args.smooth_weight {
        c.smooth_weight = v;
    }
    if let Some(v) = args.smooth_window {
        c.smooth_window = v;
    }
    if let Some(v) = args.dropout {
        c.dropout = v;
    }
    if let Some(v) = args.learning_rate {
        c.learning_rate = v;
    }
    if let Some(v) = args.epochs {
        c.epochs = v;
    }
    if let Some(v) = args.patience {
        c.patience = v;
    }
    c.seed = seed;
    Ok(c)
}

fn training_log_csv(model: &TrainedModel) -> String {
    let mut s = String::from("epoch,loss,reconstruction,kl,smoothness,val_mae\n");
    for e in &model.log.epochs {
        let val = e.val_mae.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            e.epoch, e.loss, e.reconstruction, e.kl, e.smoothness, val
        );
    }
    s
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("train");
    let obs = ObservationMatrix::load(&args.obs)?;
    let op = load_operator(&args.graph, &obs)?;
    let config = resolve_model(&args.model, args.seed)?;
    println!(
        "config: latent_dim={} layers={}+{} lr={} kl_weight={} smooth_weight={} smooth_window={} dropout={} epochs={} patience={} seed={}",
        config.latent_dim,
        config.encoder_layers,
        config.decoder_layers,
        config.learning_rate,
        config.kl_weight,
        config.smooth_weight,
        config.smooth_window,
        config.dropout,
        config.epochs,
        config.patience,
        config.seed
    );
    let model = avgae::train(&obs, &op, &config)?;
    model.save(&args.out)?;
    let log_path = sibling(&args.out, "log.csv");
    std::fs::write(&log_path, training_log_csv(&model))
        .with_context(|| format!("writing training log {}", log_path.display()))?;

    let best = model.log.epochs.iter().find(|e| e.epoch == model.log.best_epoch);
    println!(
        "epochs run = {}  best epoch = {}{}{}",
        model.log.epochs.len(),
        model.log.best_epoch,
        best.and_then(|e| e.val_mae)
            .map(|v| format!("  validation MAE = {v:.4}"))
            .unwrap_or_default(),
        if model.log.stopped_early {
            "  (stopped early)"
        } else {
            ""
        }
    );
    manifest
        .seed(args.seed)
        .config(&config)
        .input("observations", &args.obs)
        .input("graph", &args.graph)
        .output("checkpoint", &args.out)
        .output("training_log", &log_path);
    if let Some(c) = &args.model.config {
        manifest.input("config", c);
    }
    manifest.write(&manifest_path_for(&args.out))
}

/// Completed matrix written by `infer`.
#[derive(Debug, Serialize)]
struct CompletedMatrix<'a> {
    locations: &'a [GeoPoint],
    slot_times: &'a [i64],
    values: Vec<Vec<f64>>,
    /// 1 where the input held a measurement.
    observed: Vec<Vec<u8>>,
}

pub fn infer(args: InferArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("infer");
    let model = TrainedModel::load(&args.checkpoint)?;
    let obs = ObservationMatrix::load(&args.obs)?;
    let op = load_operator(&args.graph, &obs)?;
    let completed = avgae::infer(&model, &obs, &op)?;
    let t = obs.n_slots();
    let out = CompletedMatrix {
        locations: obs.locations(),
        slot_times: obs.slot_times(),
        values: completed.to_rows(),
        observed: obs
            .mask()
            .chunks(t)
            .map(|r| r.iter().map(|&m| m as u8).collect())
            .collect(),
    };
    std::fs::write(&args.out, serde_json::to_string(&out)?)
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "completed {} × {} cells ({} observed)",
        obs.n_locations(),
        t,
        obs.known_count()
    );
    manifest
        .seed(model.config.seed)
        .config(&model.config)
        .input("checkpoint", &args.checkpoint)
        .input("observations", &args.obs)
        .input("graph", &args.graph)
        .output("completed", &args.out);
    manifest.write(&manifest_path_for(&args.out))
}

fn resolve_methods(names: &[String], model: AvgaeConfig, seed: u64) -> Result<Vec<Method>> {
    if names.is_empty() {
        return Err(input_error("no methods given"));
    }
    let mut out: Vec<Method> = Vec::new();
    for raw in names {
        let name = raw.trim();
        let method = match Method::from_name(name)? {
            Method::Avgae(_) => Method::Avgae(model.clone()),
            Method::Svd(mut c) => {
                c.seed = seed;
                Method::Svd(c)
            }
            Method::Nmf(mut c) => {
                c.seed = seed;
                Method::Nmf(c)
            }
            other => other,
        };
        if out.iter().any(|m| m.label() == method.label()) {
            return Err(input_error(format!("method {name:?} listed twice")));
        }
        out.push(method);
    }
    Ok(out)
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("evaluate");
    let model = resolve_model(&args.model, args.seed)?;
    let methods = resolve_methods(&args.methods, model, args.seed)?;
    let obs = ObservationMatrix::load(&args.obs)?;
    let op = load_operator(&args.graph, &obs)?;
    let spec = SplitSpec {
        train_fraction: args.train_fraction,
        n_repeats: args.repeats,
        seed: args.seed,
    };
    let dataset = args.dataset.clone().unwrap_or_else(|| {
        args.obs
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    });
    info!("evaluating {} methods × {} repeats", methods.len(), spec.n_repeats);
    let completers: Vec<&dyn Completer> = methods.iter().map(|m| m as &dyn Completer).collect();
    let report = eval::run_benchmark(&dataset, &obs, &op, &completers, &spec)?;
    report.save(&args.out)?;
    print!("{}", report.table());
    manifest
        .seed(args.seed)
        .config(&report.config)
        .input("observations", &args.obs)
        .input("graph", &args.graph)
        .output("report", &args.out);
    if let Some(c) = &args.model.config {
        manifest.input("config", c);
    }
    manifest.write(&manifest_path_for(&args.out))
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("synth");
    let mut config = match args.preset {
        Preset::PaperScale => SynthConfig::paper_scale(args.seed),
        Preset::DeskScale => SynthConfig::desk_scale(args.seed),
    };
    if let Some(path) = &args.config {
        config = overlay(&config, path, "synth config")?;
        config.seed = args.seed;
    }
    let out = synth::generate(&config)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::Io {
        path: args.out_dir.clone(),
        source: e,
    })?;
    let trace = args.out_dir.join("trace.csv");
    let network = args.out_dir.join("network.json");
    let field = args.out_dir.join("field.json");
    ingest::write_measurements(&trace, &out.records)?;
    out.network.save(&network)?;
    out.field.save(&field)?;
    println!(
        "{} readings from {} vehicles over {} days; {} street segments; {} sources",
        out.records.len(),
        config.n_vehicles,
        config.days,
        out.network.segments.len(),
        out.field.sources.len()
    );
    manifest
        .seed(args.seed)
        .config(&config)
        .output("trace", &trace)
        .output("network", &network)
        .output("field", &field);
    if let Some(c) = &args.config {
        manifest.input("config", c);
    }
    manifest.write(&args.out_dir.join("manifest.json"))
}
