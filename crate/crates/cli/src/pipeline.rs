//! The experiment pipeline: pretrain -> continual train -> evaluate ->
//! analyze -> persist, with stage-level resumption.

use ndarray::ArrayD;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use tandem_core::analysis::{drift_report, emit_report, faa, ff, DriftProbe, DriftReport, RunMetrics};
use tandem_core::backbone::{pretrain_supervised, LayeredBackbone};
use tandem_core::benchmark::{
    build_split_benchmark, load_pretrain_dataset, write_split_manifest, Normalization, TaskStream,
};
use tandem_core::checkpoint::{load_backbone, save_backbone, Checkpoint};
use tandem_core::config::ExperimentConfig;
use tandem_core::error::{Error, Result};
use tandem_core::rng::SeedTree;
use tandem_core::scalar::Scalar;
use tandem_core::trainer::{run_continual, RunOutcome, SiblingPair};

pub struct PipelineArgs {
    pub output_override: Option<PathBuf>,
    pub seed_filter: Option<u64>,
    pub resume: bool,
    pub dry_run: bool,
}

pub fn experiment_dir(cfg: &ExperimentConfig, args: &PipelineArgs) -> PathBuf {
    args.output_override
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.experiment.output))
        .join(&cfg.experiment.name)
}

fn seeds(cfg: &ExperimentConfig, args: &PipelineArgs) -> Vec<u64> {
    match args.seed_filter {
        Some(s) => vec![s],
        None => cfg.experiment.seeds.clone(),
    }
}

/// Dispatch on the configured dtype.
pub fn run_experiment(cfg: &ExperimentConfig, args: &PipelineArgs) -> Result<()> {
    match cfg.experiment.dtype.as_str() {
        "f64" => run_experiment_typed::<f64>(cfg, args),
        _ => run_experiment_typed::<f32>(cfg, args),
    }
}

pub fn pretrain_only(cfg: &ExperimentConfig, args: &PipelineArgs) -> Result<()> {
    match cfg.experiment.dtype.as_str() {
        "f64" => {
            for seed in seeds(cfg, args) {
                ensure_pretrained::<f64>(cfg, args, seed).map(|_| ())?;
            }
            Ok(())
        }
        _ => {
            for seed in seeds(cfg, args) {
                ensure_pretrained::<f32>(cfg, args, seed).map(|_| ())?;
            }
            Ok(())
        }
    }
}

/// Print the resolved plan without executing anything.
pub fn print_plan(cfg: &ExperimentConfig, args: &PipelineArgs) -> Result<()> {
    let dir = experiment_dir(cfg, args);
    println!("experiment   : {}", cfg.experiment.name);
    println!("method       : {}", cfg.method.name);
    println!("dataset      : {} ({} tasks)", cfg.benchmark.dataset, cfg.benchmark.num_tasks);
    println!(
        "pretraining  : {} ({} epochs)",
        cfg.benchmark.pretrain_dataset.as_deref().unwrap_or("none"),
        cfg.pretrain.eps_pretr
    );
    println!("architecture : {}", cfg.model.arch);
    println!("dtype        : {}", cfg.experiment.dtype);
    println!("buffer       : {}", cfg.method.buffer);
    println!("artifacts    : {}", dir.display());
    for seed in seeds(cfg, args) {
        println!(
            "  seed {:>3}   : pretrain cache {} -> {}",
            seed,
            cfg.pretrain_cache_key(seed),
            dir.join(format!("seed_{}", seed)).display()
        );
    }
    println!("stages       : pretrain, continual, evaluate, analyze, report");
    Ok(())
}

// ---------------------------------------------------------------------------

struct LoadedData {
    stream: TaskStream,
}

fn build_stream(cfg: &ExperimentConfig, seed: u64) -> Result<LoadedData> {
    let opts = cfg.benchmark_options();
    let dataset = cfg.dataset_id()?;
    let mut stream = build_split_benchmark(dataset, cfg.benchmark.num_tasks, seed, &opts)?;
    if let Some(pid) = cfg.pretrain_dataset_id()? {
        let resolution = cfg
            .benchmark
            .resolution
            .unwrap_or_else(|| dataset.native_resolution());
        stream.pretrain = Some(load_pretrain_dataset(pid, resolution, &opts)?);
    }
    Ok(LoadedData { stream })
}

/// Train (or fetch from cache) the pretraining checkpoint for one seed and
/// return the student initialized from it, with a fresh stream-class head.
fn ensure_pretrained<S: Scalar>(
    cfg: &ExperimentConfig,
    args: &PipelineArgs,
    seed: u64,
) -> Result<LayeredBackbone<S>> {
    let data = build_stream(cfg, seed)?;
    let stream = data.stream;
    let arch = cfg.arch()?;
    let (c, (h, w)) = (stream.train.channels(), stream.train.resolution());
    let tree = SeedTree::new(seed);
    let stream_classes = stream.train.num_classes;

    let dir = experiment_dir(cfg, args).join("pretrain");
    let ckpt_path = dir.join(format!("{}.ckpt", cfg.pretrain_cache_key(seed)));

    let pretrained: LayeredBackbone<S> = match &stream.pretrain {
        None => {
            // no pretraining phase configured: random initialization
            LayeredBackbone::build(arch, (c, h, w), stream_classes, &tree.child("init"))
        }
        Some(pre) => {
            if ckpt_path.exists() {
                load_backbone::<S>(&ckpt_path)?
            } else {
                let mut model = LayeredBackbone::<S>::build(
                    arch,
                    (c, h, w),
                    pre.num_classes,
                    &tree.child("init"),
                );
                let pcfg = cfg.pretrain_config();
                let report = pretrain_supervised(&mut model, pre, pcfg.epochs, &pcfg, &tree)?;
                model.pretrain_dataset = Some(pre.id.clone());
                save_backbone(
                    &ckpt_path,
                    &model,
                    serde_json::json!({
                        "seed": seed,
                        "probe_accuracy": report.probe_accuracy,
                        "initial_probe_loss": report.initial_probe_loss,
                        "final_probe_loss": report.final_probe_loss,
                    }),
                )?;
                model
            }
        }
    };

    // student: pretrained features, fresh classifier over the stream classes
    let mut student =
        LayeredBackbone::<S>::build(arch, (c, h, w), stream_classes, &tree.child("head"));
    let mut dict = student.state_dict();
    for (k, v) in pretrained.state_dict() {
        if !k.starts_with("classifier.") {
            dict.insert(k, v);
        }
    }
    student.load_state_dict(&dict)?;
    student.pretrain_dataset = pretrained.pretrain_dataset.clone();
    Ok(student)
}

#[derive(Serialize)]
struct SeedMetrics {
    method: String,
    buffer: usize,
    seed: u64,
    class_il_faa: f64,
    class_il_ff: Option<f64>,
    task_il_faa: f64,
    task_il_ff: Option<f64>,
    ff_convention: &'static str,
    sibling_checksum_before: String,
    sibling_checksum_after: String,
    class_il_matrix: tandem_core::analysis::AccuracyMatrix,
    task_il_matrix: tandem_core::analysis::AccuracyMatrix,
}

fn run_experiment_typed<S: Scalar>(cfg: &ExperimentConfig, args: &PipelineArgs) -> Result<()> {
    let exp_dir = experiment_dir(cfg, args);
    std::fs::create_dir_all(&exp_dir)?;
    let failed_marker = exp_dir.join("FAILED");
    let outcome = run_all_seeds::<S>(cfg, args, &exp_dir);
    match outcome {
        Ok(()) => {
            if failed_marker.exists() {
                let _ = std::fs::remove_file(&failed_marker);
            }
            Ok(())
        }
        Err(e) => {
            let _ = std::fs::write(&failed_marker, format!("{}", e));
            Err(e)
        }
    }
}

fn run_all_seeds<S: Scalar>(
    cfg: &ExperimentConfig,
    args: &PipelineArgs,
    exp_dir: &Path,
) -> Result<()> {
    // persist the resolved configuration next to the artifacts
    let resolved = toml::to_string_pretty(cfg).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(exp_dir.join("config.resolved.toml"), resolved)?;

    for seed in seeds(cfg, args) {
        let seed_dir = exp_dir.join(format!("seed_{}", seed));
        let metrics_path = seed_dir.join("metrics.json");
        if args.resume && metrics_path.exists() {
            println!("seed {}: metrics present, skipping (resume)", seed);
            continue;
        }
        std::fs::create_dir_all(&seed_dir)?;
        let started = std::time::Instant::now();

        let student = ensure_pretrained::<S>(cfg, args, seed)?;
        let data = build_stream(cfg, seed)?;
        let stream = data.stream;
        for (t, task) in stream.tasks.iter().enumerate() {
            write_split_manifest(
                &seed_dir.join(format!("split_task{}_train.txt", t)),
                &task.train_indices,
            )?;
            write_split_manifest(
                &seed_dir.join(format!("split_task{}_test.txt", t)),
                &task.test_indices,
            )?;
        }

        let tree = SeedTree::new(seed);
        let mut pair = SiblingPair::new(student, &tree);
        let trainer_cfg = cfg.trainer_config(seed)?;
        let outcome = run_continual(&stream, &mut pair, &trainer_cfg)?;

        // line-delimited step records
        {
            use std::io::Write;
            let mut f = std::io::BufWriter::new(std::fs::File::create(
                seed_dir.join("steps.jsonl"),
            )?);
            for rec in &outcome.logs {
                let line =
                    serde_json::to_string(rec).map_err(|e| Error::Serde(e.to_string()))?;
                writeln!(f, "{}", line)?;
            }
        }

        let class_ff = ff(&outcome.class_il).ok();
        let task_ff = ff(&outcome.task_il).ok();
        let metrics = SeedMetrics {
            method: cfg.method.name.clone(),
            buffer: cfg.method.buffer,
            seed,
            class_il_faa: faa(&outcome.class_il)?,
            class_il_ff: class_ff,
            task_il_faa: faa(&outcome.task_il)?,
            task_il_ff: task_ff,
            ff_convention: "peak restricted to checkpoints where the task had been trained (t >= i)",
            sibling_checksum_before: format!("{:016x}", outcome.sibling_checksum_before),
            sibling_checksum_after: format!("{:016x}", outcome.sibling_checksum_after),
            class_il_matrix: outcome.class_il.clone(),
            task_il_matrix: outcome.task_il.clone(),
        };
        std::fs::write(
            &metrics_path,
            serde_json::to_string_pretty(&metrics).map_err(|e| Error::Serde(e.to_string()))?,
        )?;
        std::fs::write(
            seed_dir.join("timing.json"),
            serde_json::json!({ "wall_seconds": started.elapsed().as_secs_f64() }).to_string(),
        )?;

        save_bundle(cfg, &seed_dir, &pair.student, &outcome, seed)?;

        if cfg.analysis.enabled {
            let drift = compute_drift::<S>(cfg, &stream, &outcome, seed)?;
            std::fs::write(
                seed_dir.join("drift.json"),
                serde_json::to_string_pretty(&drift).map_err(|e| Error::Serde(e.to_string()))?,
            )?;
        }
        println!(
            "seed {}: class-il faa {:.4}, task-il faa {:.4} ({:.1}s)",
            seed,
            metrics.class_il_faa,
            metrics.task_il_faa,
            started.elapsed().as_secs_f64()
        );
    }

    aggregate_report(cfg, args)
}

fn save_bundle<S: Scalar>(
    cfg: &ExperimentConfig,
    seed_dir: &Path,
    student: &LayeredBackbone<S>,
    outcome: &RunOutcome<S>,
    seed: u64,
) -> Result<()> {
    let meta = serde_json::json!({
        "kind": "run_bundle",
        "arch": student.arch.to_string(),
        "input_shape": [student.input_shape.0, student.input_shape.1, student.input_shape.2],
        "num_classes": student.num_classes,
        "tap_shapes": student.tap_shapes.iter().map(|&(c, h, w)| vec![c, h, w]).collect::<Vec<_>>(),
        "method": cfg.method.name,
        "seed": seed,
        "snapshots": outcome.snapshots.len(),
        "config": toml::to_string(cfg).unwrap_or_default(),
    });
    let mut ckpt = Checkpoint::<S>::new(meta);
    for (name, arr) in student.state_dict() {
        ckpt.tensors.insert(format!("model.{}", name), arr);
    }
    if let Some(gates) = &outcome.gates {
        for (name, arr) in gates.state_dict() {
            ckpt.tensors.insert(format!("gates.{}", name), arr);
        }
    }
    if let Some(margins) = &outcome.margins {
        for (l, m) in margins.layers.iter().enumerate() {
            ckpt.tensors
                .insert(format!("margins.layer{}", l), m.clone().into_dyn());
        }
    }
    for (i, snap) in outcome.snapshots.iter().enumerate() {
        for (name, arr) in snap {
            ckpt.tensors.insert(format!("snap{}.{}", i, name), arr.clone());
        }
    }
    ckpt.sections.insert("buffer".into(), outcome.buffer.to_bytes());
    ckpt.save(&seed_dir.join("checkpoint.ckpt"))
}

fn compute_drift<S: Scalar>(
    cfg: &ExperimentConfig,
    stream: &TaskStream,
    outcome: &RunOutcome<S>,
    seed: u64,
) -> Result<DriftReport> {
    let Some(pretrain) = stream.pretrain.as_ref() else {
        return Err(Error::config(
            "drift analysis needs a pretraining probe set",
        ));
    };
    let arch = cfg.arch()?;
    let (c, (h, w)) = (stream.train.channels(), stream.train.resolution());
    let tree = SeedTree::new(seed).child("drift");
    // rebuild each snapshot as a backbone over the stream classes
    let mut models: Vec<LayeredBackbone<S>> = Vec::new();
    for snap in &outcome.snapshots {
        let mut m =
            LayeredBackbone::<S>::build(arch, (c, h, w), stream.train.num_classes, &tree);
        m.load_state_dict(snap)?;
        models.push(m);
    }
    let refs: Vec<&LayeredBackbone<S>> = models.iter().collect();
    let norm = Normalization::for_dataset(pretrain);
    let take_train = cfg.analysis.knn_train.max(cfg.analysis.cka_probe);
    let probe = tandem_core::analysis::probe_subsample(
        pretrain.len(),
        take_train,
        cfg.analysis.knn_test,
        seed,
    );
    drift_report(
        &refs,
        &DriftProbe {
            dataset: pretrain,
            norm: &norm,
            train_indices: probe.0,
            test_indices: probe.1,
            k: cfg.analysis.knn_k,
            batch_size: cfg.method.eval_bs,
        },
    )
}

/// Aggregate per-seed metrics into the report table and drift plots.
pub fn aggregate_report(cfg: &ExperimentConfig, args: &PipelineArgs) -> Result<()> {
    let exp_dir = experiment_dir(cfg, args);
    let mut metrics: Vec<RunMetrics> = Vec::new();
    let mut drift: Option<DriftReport> = None;
    for seed in cfg.experiment.seeds.clone() {
        let seed_dir = exp_dir.join(format!("seed_{}", seed));
        let path = seed_dir.join("metrics.json");
        if !path.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&path)?;
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Serde(e.to_string()))?;
        for (protocol, faa_key, ff_key) in [
            ("class_il", "class_il_faa", "class_il_ff"),
            ("task_il", "task_il_faa", "task_il_ff"),
        ] {
            metrics.push(RunMetrics {
                method: v["method"].as_str().unwrap_or("?").to_string(),
                protocol: protocol.to_string(),
                buffer: v["buffer"].as_u64().unwrap_or(0) as usize,
                seed,
                faa: v[faa_key].as_f64().unwrap_or(f64::NAN),
                ff: v[ff_key].as_f64(),
            });
        }
        if drift.is_none() {
            let dpath = seed_dir.join("drift.json");
            if dpath.exists() {
                let text = std::fs::read_to_string(&dpath)?;
                drift = serde_json::from_str(&text).ok();
            }
        }
    }
    if metrics.is_empty() {
        return Err(Error::invalid(format!(
            "no seed metrics found under {}",
            exp_dir.display()
        )));
    }
    let report_dir = exp_dir.join("report");
    let drift_ref = drift.as_ref().map(|d| (cfg.method.name.as_str(), d));
    let files = emit_report(&report_dir, &metrics, drift_ref)?;
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

/// Recompute drift curves from saved run bundles.
pub fn analyze_experiment(cfg: &ExperimentConfig, args: &PipelineArgs) -> Result<()> {
    match cfg.experiment.dtype.as_str() {
        "f64" => analyze_typed::<f64>(cfg, args),
        _ => analyze_typed::<f32>(cfg, args),
    }
}

fn analyze_typed<S: Scalar>(cfg: &ExperimentConfig, args: &PipelineArgs) -> Result<()> {
    let exp_dir = experiment_dir(cfg, args);
    for seed in seeds(cfg, args) {
        let seed_dir = exp_dir.join(format!("seed_{}", seed));
        let bundle = seed_dir.join("checkpoint.ckpt");
        if !bundle.exists() {
            println!("seed {}: no checkpoint bundle, skipping", seed);
            continue;
        }
        let ckpt = Checkpoint::<S>::load(&bundle)?;
        let n_snaps = ckpt.meta["snapshots"].as_u64().unwrap_or(0) as usize;
        if n_snaps == 0 {
            return Err(Error::invalid(
                "bundle holds no snapshots; re-run with analysis.enabled = true",
            ));
        }
        let data = build_stream(cfg, seed)?;
        let stream = data.stream;
        let mut snapshots: Vec<BTreeMap<String, ArrayD<S>>> = vec![BTreeMap::new(); n_snaps];
        for (name, arr) in &ckpt.tensors {
            if let Some(rest) = name.strip_prefix("snap") {
                if let Some((idx, tensor_name)) = rest.split_once('.') {
                    if let Ok(i) = idx.parse::<usize>() {
                        snapshots[i].insert(tensor_name.to_string(), arr.clone());
                    }
                }
            }
        }
        let outcome_like = RunOutcome {
            class_il: tandem_core::analysis::AccuracyMatrix::new(1),
            task_il: tandem_core::analysis::AccuracyMatrix::new(1),
            buffer: tandem_core::buffer::ReservoirBuffer::new(0),
            gates: None,
            margins: None,
            snapshots,
            logs: Vec::new(),
            sibling_checksum_before: 0,
            sibling_checksum_after: 0,
        };
        let drift = compute_drift::<S>(cfg, &stream, &outcome_like, seed)?;
        std::fs::write(
            seed_dir.join("drift.json"),
            serde_json::to_string_pretty(&drift).map_err(|e| Error::Serde(e.to_string()))?,
        )?;
        println!("seed {}: drift recomputed over {} checkpoints", seed, n_snaps);
    }
    aggregate_report(cfg, args)
}
