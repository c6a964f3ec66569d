//! The five pipeline commands. Every command is deterministic given
//! (config, seed) and idempotent with respect to its output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use tinytrain_core::error::{Error, Result};
use tinytrain_core::graph::{build_backbone, graph_to_json, GraphMode, ModelBundle};
use tinytrain_core::memplan::{
    analytic_extra_memory, naive_schedule, reorder, simulate_peak, MemoryProfile,
};
use tinytrain_core::search::{
    build_table, evolutionary_search, ContributionTable, ProbeConfig, SearchConfig,
};
use tinytrain_core::sparse::{ChannelMask, SelectPolicy, UpdateScheme};
use tinytrain_core::train::{
    compile_model, ratio_report, save_checkpoint, to_jsonl, train_one_epoch, CompiledModel,
    OptimizerConfig, TrainState,
};

use crate::config::{LoadedConfig, SchemeSection};
use crate::dataset;

pub struct Outcome {
    pub message: String,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

#[derive(Serialize)]
struct SchemeDoc<'a> {
    schema_version: u32,
    config_hash: &'a str,
    seed: u64,
    bias_depth_k: usize,
    weight_updates: &'a [tinytrain_core::sparse::WeightUpdate],
    classifier_trainable: bool,
    masks: &'a [ChannelMask],
    #[serde(skip_serializing_if = "Option::is_none")]
    criterion: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    analytic_bytes: Option<u64>,
}

fn write_scheme_json(
    path: &Path,
    scheme: &UpdateScheme,
    masks: &[ChannelMask],
    hash: &str,
    seed: u64,
    criterion: Option<f64>,
    analytic_bytes: Option<u64>,
) -> Result<()> {
    let doc = SchemeDoc {
        schema_version: 1,
        config_hash: hash,
        seed,
        bias_depth_k: scheme.bias_depth_k,
        weight_updates: &scheme.weight_updates,
        classifier_trainable: scheme.classifier_trainable,
        masks,
        criterion,
        analytic_bytes,
    };
    write_atomic(path, serde_json::to_string_pretty(&doc)?.as_bytes())
}

pub fn read_scheme_json(path: &Path) -> Result<UpdateScheme> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read scheme {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let section: SchemeSection = serde_json::from_value(serde_json::json!({
        "bias_depth_k": value.get("bias_depth_k").cloned().unwrap_or_default(),
        "weights": value
            .get("weight_updates")
            .cloned()
            .unwrap_or(serde_json::Value::Array(vec![])),
        "classifier_trainable": value
            .get("classifier_trainable")
            .cloned()
            .unwrap_or(serde_json::Value::Bool(true)),
    }))
    .map_err(|e| Error::Config(format!("scheme parse error: {e}")))?;
    Ok(section.to_scheme())
}

fn build_model(loaded: &LoadedConfig) -> Result<ModelBundle> {
    let cfg = loaded.config.model.backbone()?;
    let init_seed = loaded.config.model.init_seed.unwrap_or(loaded.seed);
    build_backbone(&cfg, GraphMode::Quantized, init_seed)
}

fn resolve_scheme(
    loaded: &LoadedConfig,
    scheme_path: Option<&Path>,
    layer_count: usize,
) -> Result<UpdateScheme> {
    let scheme = match scheme_path {
        Some(path) => read_scheme_json(path)?,
        None => match &loaded.config.scheme {
            Some(section) => section.to_scheme(),
            None => UpdateScheme::full_update(layer_count),
        },
    };
    scheme.validate(layer_count)?;
    Ok(scheme)
}

fn compile(loaded: &LoadedConfig, scheme_path: Option<&Path>) -> Result<CompiledModel> {
    let bundle = build_model(loaded)?;
    let scheme = resolve_scheme(loaded, scheme_path, bundle.graph.layers.len())?;
    compile_model(&bundle, &scheme, SelectPolicy::Magnitude, loaded.seed)
}

/// Build the forward graph, derive backward, apply scheme pruning/slicing,
/// and emit `graph.json` plus the resolved `scheme.json`.
pub fn cmd_compile(loaded: &LoadedConfig, out: &Path, scheme_path: Option<&Path>) -> Result<Outcome> {
    let compiled = compile(loaded, scheme_path)?;
    let violations = compiled.graph.validate();
    if !violations.is_empty() {
        return Err(Error::Graph(format!("compiled graph invalid: {violations:?}")));
    }
    write_atomic(&out.join("graph.json"), graph_to_json(&compiled.graph)?.as_bytes())?;
    write_scheme_json(
        &out.join("scheme.json"),
        &compiled.scheme,
        &compiled.masks,
        &loaded.hash,
        loaded.seed,
        None,
        None,
    )?;
    Ok(Outcome {
        message: format!(
            "compiled {} nodes, {} grad-descent ops -> {}",
            compiled.graph.nodes.len(),
            compiled.graph.grad_descent_count(),
            out.join("graph.json").display()
        ),
    })
}

#[derive(Serialize)]
struct MemorySummary<'a> {
    schema_version: u32,
    config_hash: &'a str,
    seed: u64,
    analytic_extra_bytes: u64,
    naive_peak_bytes: usize,
    naive_arena_bytes: usize,
    reordered_peak_bytes: usize,
    reordered_arena_bytes: usize,
    peak_breakdown: &'a std::collections::BTreeMap<tinytrain_core::memplan::MemCategory, usize>,
}

fn residency_csv(profile: &MemoryProfile) -> String {
    let mut csv = String::from("step,bytes,saved_activations,gradients,updated_weights,workspace\n");
    for row in &profile.curve {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            row.step, row.bytes, row.saved_activations, row.gradients, row.updated_weights, row.workspace
        );
    }
    csv
}

/// Analytic and simulated memory report: `memory.csv` (residency curve of
/// the reordered schedule) and `memory.json` (peaks and breakdown).
pub fn cmd_profile(loaded: &LoadedConfig, out: &Path, scheme_path: Option<&Path>) -> Result<Outcome> {
    let compiled = compile(loaded, scheme_path)?;
    let naive = simulate_peak(&compiled.graph, &naive_schedule(&compiled.graph))?;
    let reordered = simulate_peak(&compiled.graph, &reorder(&compiled.graph))?;
    let analytic = analytic_extra_memory(&compiled.bundle.graph, &compiled.scheme)?;

    write_atomic(&out.join("memory.csv"), residency_csv(&reordered).as_bytes())?;
    let summary = MemorySummary {
        schema_version: 1,
        config_hash: &loaded.hash,
        seed: loaded.seed,
        analytic_extra_bytes: analytic,
        naive_peak_bytes: naive.peak_bytes,
        naive_arena_bytes: naive.arena_bytes,
        reordered_peak_bytes: reordered.peak_bytes,
        reordered_arena_bytes: reordered.arena_bytes,
        peak_breakdown: &reordered.peak_breakdown,
    };
    write_atomic(
        &out.join("memory.json"),
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;
    Ok(Outcome {
        message: format!(
            "analytic {} B, simulated naive {} B -> reordered {} B",
            analytic, naive.peak_bytes, reordered.peak_bytes
        ),
    })
}

fn probe_config(loaded: &LoadedConfig) -> Result<ProbeConfig> {
    let mut optimizer = loaded.config.optimizer.to_config()?;
    optimizer.epochs = loaded.config.search.probe_epochs;
    optimizer.lr = loaded.config.search.probe_lr;
    Ok(ProbeConfig {
        optimizer,
        policy: SelectPolicy::Magnitude,
        seed: loaded.seed,
    })
}

/// Measure (or load) the contribution table, run evolutionary search under
/// the byte budget, and emit `scheme.json`, `table.json`, `history.csv`.
pub fn cmd_search(
    loaded: &LoadedConfig,
    out: &Path,
    budget_override: Option<u64>,
) -> Result<Outcome> {
    let budget = budget_override
        .or(loaded.config.search.budget_bytes)
        .ok_or_else(|| Error::Config("search needs --budget-bytes or search.budget_bytes".into()))?;
    let bundle = build_model(loaded)?;
    let dataset_section = loaded
        .config
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("search needs a [dataset] section".into()))?;
    let (train_set, val_set) =
        dataset::resolve(dataset_section, &loaded.config.model, loaded.seed)?;

    let table: ContributionTable = match &loaded.config.search.table {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read table {}: {e}", path.display())))?;
            serde_json::from_str(&text)?
        }
        None => {
            let probe = probe_config(loaded)?;
            let (table, missing) = build_table(&bundle, &train_set, &val_set, &probe)?;
            if !missing.is_empty() {
                eprintln!("warning: {} contribution probes failed: {missing:?}", missing.len());
            }
            table
        }
    };
    write_atomic(
        &out.join("table.json"),
        serde_json::to_string_pretty(&table)?.as_bytes(),
    )?;

    let cfg = SearchConfig {
        population: loaded.config.search.population,
        generations: loaded.config.search.generations,
        mutation_prob: loaded.config.search.mutation_prob,
        parents: loaded.config.search.parents,
        budget_bytes: budget,
        seed: loaded.seed,
    };
    let mem_model = |scheme: &UpdateScheme| analytic_extra_memory(&bundle.graph, scheme);
    let outcome = evolutionary_search(&table, &cfg, &mem_model)?;

    let mut history = String::from("evaluation,best_criterion\n");
    for (eval, criterion) in &outcome.history {
        let _ = writeln!(history, "{eval},{criterion}");
    }
    write_atomic(&out.join("history.csv"), history.as_bytes())?;
    write_scheme_json(
        &out.join("scheme.json"),
        &outcome.best.scheme,
        &[],
        &loaded.hash,
        loaded.seed,
        Some(outcome.best.criterion),
        Some(outcome.best.memory),
    )?;
    Ok(Outcome {
        message: format!(
            "best scheme k={} weights={} criterion={:.3} memory={}B (budget {}B)",
            outcome.best.scheme.bias_depth_k,
            outcome.best.scheme.weight_updates.len(),
            outcome.best.criterion,
            outcome.best.memory,
            budget
        ),
    })
}

/// Train under the scheme and emit a checkpoint, `metrics.jsonl` and
/// `ratios.csv` (per-epoch weight/gradient norm ratios).
pub fn cmd_train(loaded: &LoadedConfig, out: &Path, scheme_path: Option<&Path>) -> Result<Outcome> {
    let compiled = compile(loaded, scheme_path)?;
    let dataset_section = loaded
        .config
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("train needs a [dataset] section".into()))?;
    let (train_set, val_set) =
        dataset::resolve(dataset_section, &loaded.config.model, loaded.seed)?;
    let optimizer: OptimizerConfig = loaded.config.optimizer.to_config()?;
    let epochs = optimizer.epochs;
    let analytic = analytic_extra_memory(&compiled.bundle.graph, &compiled.scheme)?;
    let scheme = compiled.scheme.clone();
    let masks = compiled.masks.clone();
    let mut state = TrainState::new(compiled, optimizer, loaded.seed)?;

    let mut records = Vec::new();
    let mut ratios = String::from("epoch,layer,kind,pre_qas,post_qas\n");
    let eval_set = if val_set.is_empty() { None } else { Some(&val_set) };
    for epoch in 0..epochs {
        let record = train_one_epoch(&mut state, &train_set, eval_set, &loaded.hash, epoch)?;
        records.push(record);
        for row in ratio_report(&state, None)? {
            let layer = row.layer.map(|l| l.to_string()).unwrap_or_else(|| "classifier".into());
            let _ = writeln!(
                ratios,
                "{epoch},{layer},{:?},{},{}",
                row.kind, row.pre_qas, row.post_qas
            );
        }
    }

    std::fs::create_dir_all(out)?;
    save_checkpoint(out, &state)?;
    write_atomic(&out.join("metrics.jsonl"), to_jsonl(&records)?.as_bytes())?;
    write_atomic(&out.join("ratios.csv"), ratios.as_bytes())?;
    write_scheme_json(
        &out.join("scheme.json"),
        &scheme,
        &masks,
        &loaded.hash,
        loaded.seed,
        None,
        Some(analytic),
    )?;
    let last = records.last().expect("at least one epoch");
    Ok(Outcome {
        message: format!(
            "trained {} epochs: loss {:.4}, accuracy {:.3}, zero-delta updates {}",
            epochs, last.loss, last.accuracy, last.zero_delta_updates
        ),
    })
}

/// Aggregate run directories into plot-ready CSVs: the accuracy-vs-memory
/// frontier, merged residency curves, and merged ratio tables.
pub fn cmd_report(run_dirs: &[PathBuf], out: &Path) -> Result<Outcome> {
    let mut frontier = String::from("run,analytic_bytes,final_accuracy,final_loss,seed\n");
    let mut residency = String::from("run,step,bytes,saved_activations,gradients,updated_weights,workspace\n");
    let mut ratios = String::from("run,epoch,layer,kind,pre_qas,post_qas\n");

    for dir in run_dirs {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());

        // frontier rows need metrics plus the analytic bytes from the scheme
        let metrics_path = dir.join("metrics.jsonl");
        if metrics_path.exists() {
            let text = std::fs::read_to_string(&metrics_path)?;
            let records = tinytrain_core::train::from_jsonl(&text)?;
            if let Some(last) = records.last() {
                let analytic = read_analytic_bytes(dir)?;
                let _ = writeln!(
                    frontier,
                    "{name},{},{},{},{}",
                    analytic.map(|b| b.to_string()).unwrap_or_default(),
                    last.accuracy,
                    last.loss,
                    last.seed
                );
            }
        }

        let mem_path = dir.join("memory.csv");
        if mem_path.exists() {
            for line in std::fs::read_to_string(&mem_path)?.lines().skip(1) {
                let _ = writeln!(residency, "{name},{line}");
            }
        }
        let ratio_path = dir.join("ratios.csv");
        if ratio_path.exists() {
            for line in std::fs::read_to_string(&ratio_path)?.lines().skip(1) {
                let _ = writeln!(ratios, "{name},{line}");
            }
        }
    }

    write_atomic(&out.join("frontier.csv"), frontier.as_bytes())?;
    write_atomic(&out.join("residency.csv"), residency.as_bytes())?;
    write_atomic(&out.join("ratios.csv"), ratios.as_bytes())?;
    Ok(Outcome {
        message: format!("aggregated {} run directories into {}", run_dirs.len(), out.display()),
    })
}

fn read_analytic_bytes(dir: &Path) -> Result<Option<u64>> {
    let path = dir.join("scheme.json");
    if !path.exists() {
        return Ok(None);
    }
    let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    Ok(value.get("analytic_bytes").and_then(|v| v.as_u64()))
}
