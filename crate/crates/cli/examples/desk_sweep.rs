//! Sweep harness for the desk-scale grayscale benchmark: runs a set of
//! methods over several seeds against a shared pretrained initialization and
//! prints Class-IL/Task-IL FAA per method.
//!
//! cargo run -p tandem-cli --example desk_sweep -- \
//!     --methods twf,derpp,er,finetune --seeds 3 --buffer 120

use std::collections::BTreeMap;
use tandem_core::analysis::{faa, ff};
use tandem_core::backbone::{pretrain_supervised, ArchId, LayeredBackbone, PretrainConfig};
use tandem_core::benchmark::{
    build_split_benchmark, BenchmarkOptions, DatasetId, GLYPH_SIZE,
};
use tandem_core::rng::SeedTree;
use tandem_core::trainer::{run_continual, Method, SiblingPair, TrainerConfig, WeightConfig};

#[derive(Clone)]
struct SweepArgs {
    methods: Vec<String>,
    seeds: u64,
    buffer: usize,
    train_per_class: usize,
    test_per_class: usize,
    pretrain_epochs: usize,
    task_epochs: usize,
    lr: f64,
    pretrain_lr: f64,
    alpha: f64,
    beta: f64,
    lambda: f64,
    lambda_fp: f64,
    lambda_fp_repl: f64,
    ewc_lambda: f64,
    batch: usize,
    random_init: bool,
}

impl Default for SweepArgs {
    fn default() -> Self {
        SweepArgs {
            methods: vec!["twf".into(), "derpp".into(), "er".into(), "finetune".into()],
            seeds: 3,
            buffer: 120,
            train_per_class: 200,
            test_per_class: 80,
            pretrain_epochs: 20,
            task_epochs: 5,
            lr: 0.05,
            pretrain_lr: 0.1,
            alpha: 0.3,
            beta: 0.9,
            lambda: 0.03,
            lambda_fp: 3e-4,
            lambda_fp_repl: 3e-4,
            ewc_lambda: 30.0,
            batch: 32,
            random_init: false,
        }
    }
}

fn parse_args() -> SweepArgs {
    let mut args = SweepArgs::default();
    let mut it = std::env::args().skip(1);
    while let Some(flag) = it.next() {
        let mut val = || it.next().expect("flag value");
        match flag.as_str() {
            "--methods" => args.methods = val().split(',').map(str::to_string).collect(),
            "--seeds" => args.seeds = val().parse().unwrap(),
            "--buffer" => args.buffer = val().parse().unwrap(),
            "--train-per-class" => args.train_per_class = val().parse().unwrap(),
            "--test-per-class" => args.test_per_class = val().parse().unwrap(),
            "--pretrain-epochs" => args.pretrain_epochs = val().parse().unwrap(),
            "--task-epochs" => args.task_epochs = val().parse().unwrap(),
            "--lr" => args.lr = val().parse().unwrap(),
            "--pretrain-lr" => args.pretrain_lr = val().parse().unwrap(),
            "--alpha" => args.alpha = val().parse().unwrap(),
            "--beta" => args.beta = val().parse().unwrap(),
            "--lambda" => args.lambda = val().parse().unwrap(),
            "--lambda-fp" => args.lambda_fp = val().parse().unwrap(),
            "--lambda-fp-repl" => args.lambda_fp_repl = val().parse().unwrap(),
            "--ewc-lambda" => args.ewc_lambda = val().parse().unwrap(),
            "--batch" => args.batch = val().parse().unwrap(),
            "--random-init" => args.random_init = true,
            other => panic!("unknown flag {}", other),
        }
    }
    args
}

fn method_config(name: &str, args: &SweepArgs, seed: u64) -> (Method, TrainerConfig) {
    let base = TrainerConfig {
        epochs_per_task: args.task_epochs,
        batch_size: args.batch,
        replay_batch_size: args.batch,
        lr: args.lr,
        lr_decay: 0.1,
        lr_decay_steps: vec![args.task_epochs * 3 / 4],
        buffer_capacity: args.buffer,
        augment: tandem_core::benchmark::Augment {
            pad_crop: 2,
            hflip: false,
        },
        fisher_samples: 200,
        seed,
        collect_snapshots: false,
        ..Default::default()
    };
    let weights = WeightConfig {
        alpha: args.alpha,
        beta: args.beta,
        lambda: args.lambda,
        lambda_fp: args.lambda_fp,
        lambda_fp_repl: args.lambda_fp_repl,
        temperature_aux: 1.0,
        ewc_lambda: args.ewc_lambda,
    };
    match name {
        "twf" => (
            Method::Twf,
            TrainerConfig {
                method: Method::Twf,
                weights: weights.clone(),
                ..base
            },
        ),
        "twf_fponly" => (
            Method::Twf,
            TrainerConfig {
                method: Method::Twf,
                weights: WeightConfig {
                    lambda: 0.0,
                    lambda_fp_repl: 0.0,
                    ..weights
                },
                ..base
            },
        ),
        "twf_bceonly" => (
            Method::Twf,
            TrainerConfig {
                method: Method::Twf,
                weights: WeightConfig {
                    lambda: 0.0,
                    lambda_fp: 0.0,
                    ..weights
                },
                ..base
            },
        ),
        "twf_auxonly" => (
            Method::Twf,
            TrainerConfig {
                method: Method::Twf,
                weights: WeightConfig {
                    lambda_fp: 0.0,
                    lambda_fp_repl: 0.0,
                    ..weights
                },
                ..base
            },
        ),
        "twf_nofp" => (
            Method::Twf,
            TrainerConfig {
                method: Method::Twf,
                weights: WeightConfig {
                    lambda: 0.0,
                    lambda_fp: 0.0,
                    lambda_fp_repl: 0.0,
                    ..weights
                },
                ..base
            },
        ),
        "twf_nocl" => (
            Method::Twf,
            TrainerConfig {
                method: Method::Twf,
                buffer_capacity: 0,
                weights: WeightConfig {
                    alpha: 0.0,
                    beta: 0.0,
                    ..weights
                },
                ..base
            },
        ),
        "derpp" => (
            Method::Derpp,
            TrainerConfig {
                method: Method::Derpp,
                weights: weights.clone(),
                ..base
            },
        ),
        "derpp_ewc" => (
            Method::DerppEwc,
            TrainerConfig {
                method: Method::DerppEwc,
                weights: weights.clone(),
                ..base
            },
        ),
        "er" => (
            Method::Er,
            TrainerConfig {
                method: Method::Er,
                ..base
            },
        ),
        "finetune" | "head_only" => (
            Method::Finetune,
            TrainerConfig {
                method: Method::Finetune,
                buffer_capacity: 0,
                ..base
            },
        ),
        "joint" => (
            Method::Joint,
            TrainerConfig {
                method: Method::Joint,
                buffer_capacity: 0,
                ..base
            },
        ),
        "lwf" => (
            Method::Lwf,
            TrainerConfig {
                method: Method::Lwf,
                buffer_capacity: 0,
                ..base
            },
        ),
        "oewc" => (
            Method::Oewc,
            TrainerConfig {
                method: Method::Oewc,
                buffer_capacity: 0,
                weights: WeightConfig {
                    ewc_lambda: args.ewc_lambda,
                    ..weights
                },
                ..base
            },
        ),
        other => panic!("unknown method {}", other),
    }
}

fn main() {
    let args = parse_args();
    let opts = BenchmarkOptions {
        glyph_counts: (args.train_per_class, args.test_per_class),
        ..Default::default()
    };

    let mut results: BTreeMap<String, Vec<(f64, f64, f64)>> = BTreeMap::new();
    for seed in 0..args.seeds {
        let mut stream = build_split_benchmark(DatasetId::GlyphsCl, 5, seed, &opts).unwrap();
        stream.pretrain = Some(tandem_core::benchmark::synthetic_glyphs(
            tandem_core::benchmark::GlyphFamily::Source,
            tandem_core::benchmark::Split::Train,
            opts.glyph_counts,
        ));
        let tree = SeedTree::new(seed);

        // shared pretrained initialization (pretraining head covers the
        // pretraining classes; the student gets a fresh stream head)
        let t0 = std::time::Instant::now();
        let mut pre = LayeredBackbone::<f32>::build(
            ArchId::DeskCnn,
            (1, GLYPH_SIZE, GLYPH_SIZE),
            10,
            &tree.child("init"),
        );
        if !args.random_init && args.pretrain_epochs > 0 {
            let cfg = PretrainConfig {
                epochs: args.pretrain_epochs,
                lr: args.pretrain_lr,
                batch_size: 32,
                augment: tandem_core::benchmark::Augment {
                    pad_crop: 2,
                    hflip: false,
                },
                probe_size: 200,
                decay: 0.1,
                decay_steps: vec![args.pretrain_epochs * 2 / 3, args.pretrain_epochs * 5 / 6],
                ..Default::default()
            };
            let report = pretrain_supervised(
                &mut pre,
                stream.pretrain.as_ref().unwrap(),
                args.pretrain_epochs,
                &cfg,
                &tree,
            )
            .unwrap();
            eprintln!(
                "seed {}: pretrain probe acc {:.3} ({:.1}s)",
                seed,
                report.probe_accuracy,
                t0.elapsed().as_secs_f64()
            );
            // transfer quality: kNN on pretrained features over stream classes
            let norm = tandem_core::benchmark::Normalization::for_dataset(&stream.train);
            let tr: Vec<u32> = (0..stream.train.len() as u32).step_by(3).collect();
            let te: Vec<u32> = (0..stream.test.len() as u32).step_by(2).collect();
            let ftr = tandem_core::analysis::extract_features(&pre, &stream.train, &tr, &norm, 128).unwrap();
            let fte = tandem_core::analysis::extract_features(&pre, &stream.test, &te, &norm, 128).unwrap();
            let ytr: Vec<usize> = tr.iter().map(|&i| stream.train.labels[i as usize] as usize).collect();
            let yte: Vec<usize> = te.iter().map(|&i| stream.test.labels[i as usize] as usize).collect();
            let knn: Vec<String> = (0..ftr.len())
                .map(|l| {
                    let a = tandem_core::analysis::knn_probe(&ftr[l], &ytr, &fte[l], &yte, 10).unwrap();
                    format!("{:.3}", a)
                })
                .collect();
            eprintln!("seed {}: stream-class knn on pretrained taps: [{}]", seed, knn.join(", "));
        }

        for name in &args.methods {
            let (_, cfg) = method_config(name, &args, seed);
            let mut student = LayeredBackbone::<f32>::build(
                ArchId::DeskCnn,
                (1, GLYPH_SIZE, GLYPH_SIZE),
                10,
                &tree.child("head"),
            );
            let mut dict = student.state_dict();
            for (k, v) in pre.state_dict() {
                if !k.starts_with("classifier.") {
                    dict.insert(k, v);
                }
            }
            student.load_state_dict(&dict).unwrap();
            if name == "head_only" {
                // idealized anchoring limit: features frozen at the
                // pretrained initialization, only the classifier trains
                for (n, slot) in student.named_slots() {
                    if !n.starts_with("classifier.") {
                        if let tandem_core::backbone::Slot::Param(p) = slot {
                            p.set_requires_grad(false);
                        }
                    }
                }
            }
            let mut pair = SiblingPair::new(student, &tree);
            let t0 = std::time::Instant::now();
            let out = match run_continual(&stream, &mut pair, &cfg) {
                Ok(o) => o,
                Err(e) => {
                    eprintln!("seed {} {:>10}: FAILED: {}", seed, name, e);
                    continue;
                }
            };
            let class_faa = faa(&out.class_il).unwrap();
            let task_faa = faa(&out.task_il).unwrap();
            let class_ff = ff(&out.class_il).unwrap_or(f64::NAN);
            let last_mask = out.logs.last().map(|r| r.mask_on).unwrap_or(f64::NAN);
            let n_logs = out.logs.len().max(1) as f64;
            let m_ce: f64 = out.logs.iter().map(|r| r.stream_ce).sum::<f64>() / n_logs;
            let m_fp: f64 = out.logs.iter().map(|r| r.l_fp).sum::<f64>() / n_logs;
            let m_aux: f64 = out.logs.iter().map(|r| r.l_aux).sum::<f64>() / n_logs;
            let m_cl: f64 = out.logs.iter().map(|r| r.l_cl).sum::<f64>() / n_logs;
            eprintln!(
                "            terms: ce {:.3} cl {:.3} fp {:.3} aux {:.3}",
                m_ce, m_cl, m_fp, m_aux
            );
            eprintln!(
                "seed {} {:>10}: class-il {:.4} task-il {:.4} ff {:.4} mask_on {:.3} ({:.1}s)",
                seed,
                name,
                class_faa,
                task_faa,
                class_ff,
                last_mask,
                t0.elapsed().as_secs_f64()
            );
            if std::env::var("LOGIT_DIAG").is_ok() {
                // mean logits on task-0 test inputs, by class column
                let norm = tandem_core::benchmark::Normalization::for_dataset(&stream.train);
                let idx: Vec<u32> = stream.tasks[0].test_indices.clone();
                let batch = tandem_core::benchmark::make_batch::<f32>(
                    &stream.test, &idx, &norm, None, None,
                );
                let logits = pair
                    .student
                    .forward(
                        &tandem_core::tensor::Tensor::constant(batch.inputs),
                        tandem_core::nn::Mode::Eval,
                    )
                    .unwrap()
                    .array();
                let b = idx.len() as f32;
                let mut means = vec![0.0f32; 10];
                for row in logits.rows() {
                    for (c, &v) in row.iter().enumerate() {
                        means[c] += v / b;
                    }
                }
                eprintln!(
                    "            task0-input logits by class: {:?}",
                    means.iter().map(|v| (v * 10.0).round() / 10.0).collect::<Vec<_>>()
                );
            }
            results
                .entry(name.clone())
                .or_default()
                .push((class_faa, task_faa, class_ff));
        }
    }

    println!("\n=== means over {} seeds ===", args.seeds);
    println!(
        "{:>12} {:>10} {:>10} {:>10}",
        "method", "class_il", "task_il", "ff"
    );
    for (name, rows) in &results {
        let n = rows.len() as f64;
        let c: f64 = rows.iter().map(|r| r.0).sum::<f64>() / n;
        let t: f64 = rows.iter().map(|r| r.1).sum::<f64>() / n;
        let f: f64 = rows.iter().map(|r| r.2).sum::<f64>() / n;
        println!("{:>12} {:>10.4} {:>10.4} {:>10.4}", name, c, t, f);
    }
}
