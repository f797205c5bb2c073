//! Continual training loops for the sibling-distillation method and its
//! baselines, task-boundary bookkeeping, and Class-IL/Task-IL evaluation.

use crate::analysis::{argmax_restricted, AccuracyMatrix};
use crate::attention::GateSet;
use crate::backbone::{argmax_rows, LayeredBackbone};
use crate::benchmark::{make_batch, shuffled_indices, Augment, ImageDataset, Normalization, TaskStream};
use crate::buffer::{assemble_batch, ReplayBatch, ReplayItem, ReservoirBuffer, StoredMask};
use crate::error::{Error, Result};
use crate::losses::{
    aux_diversity_loss, cl_replay_loss, estimate_margins, ewc_penalty, fisher_for_backbone,
    fp_loss, total_objective, ChannelMargins, FpCurrent, FpReplay, LossWeights,
};
use crate::nn::{Mode, Sgd};
use crate::rng::SeedTree;
use crate::scalar::Scalar;
use crate::tensor::{concat0, Tensor};
use ndarray::{Array1, Array3, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Twf,
    Finetune,
    Joint,
    Er,
    Derpp,
    DerppEwc,
    Lwf,
    Oewc,
}

impl Method {
    pub fn all_names() -> &'static [&'static str] {
        &[
            "twf", "finetune", "joint", "er", "derpp", "derpp_ewc", "lwf", "oewc",
        ]
    }

    pub fn uses_buffer(&self) -> bool {
        matches!(self, Method::Twf | Method::Er | Method::Derpp | Method::DerppEwc)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Method::Twf => "twf",
            Method::Finetune => "finetune",
            Method::Joint => "joint",
            Method::Er => "er",
            Method::Derpp => "derpp",
            Method::DerppEwc => "derpp_ewc",
            Method::Lwf => "lwf",
            Method::Oewc => "oewc",
        };
        f.write_str(s)
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "twf" => Ok(Method::Twf),
            "finetune" => Ok(Method::Finetune),
            "joint" => Ok(Method::Joint),
            "er" => Ok(Method::Er),
            "derpp" => Ok(Method::Derpp),
            "derpp_ewc" => Ok(Method::DerppEwc),
            "lwf" => Ok(Method::Lwf),
            "oewc" => Ok(Method::Oewc),
            other => Err(Error::config(format!(
                "unknown method '{}'; valid: {}",
                other,
                Method::all_names().join(", ")
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginMode {
    /// Per-channel mean negative sibling response, estimated on the first
    /// task's data.
    Estimated,
    /// All-zero margins (plain ReLU floor).
    Zero,
}

/// Scalar-weight block mirroring the configured hyperparameter names.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub lambda_fp: f64,
    pub lambda_fp_repl: f64,
    pub temperature_aux: f64,
    pub ewc_lambda: f64,
}

impl Default for WeightConfig {
    fn default() -> Self {
        WeightConfig {
            alpha: 0.3,
            beta: 0.9,
            lambda: 0.1,
            lambda_fp: 5e-3,
            lambda_fp_repl: 0.1,
            temperature_aux: 1.0,
            ewc_lambda: 0.0,
        }
    }
}

impl WeightConfig {
    pub fn as_loss_weights<S: Scalar>(&self) -> LossWeights<S> {
        LossWeights {
            alpha: S::of_f64(self.alpha),
            beta: S::of_f64(self.beta),
            lambda_aux: S::of_f64(self.lambda),
            lambda_fp: S::of_f64(self.lambda_fp),
            lambda_fp_replay: S::of_f64(self.lambda_fp_repl),
            temperature_aux: S::of_f64(self.temperature_aux),
            ewc_lambda: S::of_f64(self.ewc_lambda),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub method: Method,
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub replay_batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Epoch indices (within each task) at which the rate decays.
    pub lr_decay_steps: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub weights: WeightConfig,
    pub buffer_capacity: usize,
    pub gumbel_temperature: f64,
    pub margin_mode: MarginMode,
    pub margin_refresh: bool,
    pub pretrain_rehearsal_fraction: f64,
    pub lwf_alpha: f64,
    pub lwf_tau: f64,
    pub oewc_gamma: f64,
    /// Per-sample passes used for Fisher estimation.
    pub fisher_samples: usize,
    pub augment: Augment,
    pub eval_batch_size: usize,
    /// Keep a state-dict snapshot at init and after each task (drift analysis).
    pub collect_snapshots: bool,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            method: Method::Twf,
            epochs_per_task: 5,
            batch_size: 32,
            replay_batch_size: 32,
            lr: 0.03,
            lr_decay: 1.0,
            lr_decay_steps: Vec::new(),
            momentum: 0.0,
            weight_decay: 0.0,
            weights: WeightConfig::default(),
            buffer_capacity: 500,
            gumbel_temperature: 1.0,
            margin_mode: MarginMode::Estimated,
            margin_refresh: false,
            pretrain_rehearsal_fraction: 0.0,
            lwf_alpha: 0.3,
            lwf_tau: 2.0,
            oewc_gamma: 1.0,
            fisher_samples: 256,
            augment: Augment::none(),
            eval_batch_size: 128,
            collect_snapshots: true,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_task == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.pretrain_rehearsal_fraction) {
            return Err(Error::config(
                "pretrain_rehearsal_fraction out of range [0,1]",
            ));
        }
        if self.pretrain_rehearsal_fraction > 0.0
            && !matches!(self.method, Method::Er | Method::Derpp | Method::DerppEwc)
        {
            return Err(Error::config(
                "pretraining rehearsal requires a plain rehearsal method (er, derpp, derpp_ewc)",
            ));
        }
        self.weights.as_loss_weights::<f64>().validate()?;
        if self.gumbel_temperature <= 0.0 {
            return Err(Error::config("gumbel_temperature must be positive"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// pair & outcome

/// Trainable student plus its frozen pretrained sibling.
pub struct SiblingPair<S: Scalar> {
    pub student: LayeredBackbone<S>,
    pub sibling: LayeredBackbone<S>,
}

impl<S: Scalar> SiblingPair<S> {
    /// Clone the (possibly pretrained) student into a frozen sibling.
    pub fn new(student: LayeredBackbone<S>, tree: &SeedTree) -> Self {
        let sibling = student.clone_frozen(&tree.child("sibling"));
        debug_assert_eq!(student.tap_shapes, sibling.tap_shapes);
        SiblingPair { student, sibling }
    }
}

/// One training-step record, serialized as a line-delimited log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub task: usize,
    pub epoch: usize,
    pub step: usize,
    pub total: f64,
    pub stream_ce: f64,
    pub l_cl: f64,
    pub l_fp: f64,
    pub l_aux: f64,
    pub l_reg: f64,
    /// Mean on-rate of the current batch's sampled hard masks.
    pub mask_on: f64,
}

pub struct RunOutcome<S: Scalar> {
    pub class_il: AccuracyMatrix,
    pub task_il: AccuracyMatrix,
    pub buffer: ReservoirBuffer<S>,
    pub gates: Option<GateSet<S>>,
    pub margins: Option<ChannelMargins<S>>,
    /// `[init, after task 0, after task 1, ...]` when snapshots are enabled.
    pub snapshots: Vec<BTreeMap<String, ArrayD<S>>>,
    pub logs: Vec<StepRecord>,
    pub sibling_checksum_before: u64,
    pub sibling_checksum_after: u64,
}

// ---------------------------------------------------------------------------
// evaluation

pub use crate::analysis::Protocol;

/// Accuracy per task under one protocol, over all tasks of the stream.
pub fn evaluate_protocol<S: Scalar>(
    model: &LayeredBackbone<S>,
    stream: &TaskStream,
    protocol: Protocol,
    eval_batch: usize,
) -> Result<Vec<f64>> {
    let (class_il, task_il) = evaluate_both(model, stream, stream.num_tasks - 1, eval_batch)?;
    Ok(match protocol {
        Protocol::ClassIl => class_il,
        Protocol::TaskIl => task_il,
    })
}

/// Both protocols over tasks `0..=upto`, from a single forward pass per batch.
/// Task-IL restricts the argmax to the test item's task class set.
pub fn evaluate_both<S: Scalar>(
    model: &LayeredBackbone<S>,
    stream: &TaskStream,
    upto: usize,
    eval_batch: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let norm = Normalization::for_dataset(&stream.train);
    let mut class_accs = Vec::with_capacity(upto + 1);
    let mut task_accs = Vec::with_capacity(upto + 1);
    for (t, task) in stream.tasks.iter().enumerate().take(upto + 1) {
        let classes: Vec<usize> = task.classes.iter().map(|&c| c as usize).collect();
        let mut correct_class = 0usize;
        let mut correct_task = 0usize;
        let total = task.test_indices.len();
        for chunk in task.test_indices.chunks(eval_batch) {
            let batch = make_batch::<S>(&stream.test, chunk, &norm, None, None);
            let logits = model.forward(&Tensor::constant(batch.inputs), Mode::Eval)?;
            let values = logits.array();
            let global = argmax_rows(&values);
            let restricted = argmax_restricted(&values, &classes);
            for (i, &y) in batch.labels.iter().enumerate() {
                if global[i] == y {
                    correct_class += 1;
                }
                if restricted[i] == y {
                    correct_task += 1;
                }
            }
        }
        let ca = correct_class as f64 / total.max(1) as f64;
        let ta = correct_task as f64 / total.max(1) as f64;
        assert!(
            ta >= ca,
            "protocol invariant violated on task {}: task-il {} < class-il {}",
            t,
            ta,
            ca
        );
        class_accs.push(ca);
        task_accs.push(ta);
    }
    Ok((class_accs, task_accs))
}

// ---------------------------------------------------------------------------
// pretraining rehearsal

/// Reserve part of the buffer for pretraining images: every pretraining
/// example is offered once to the reserved partition, storing the model's
/// response at fill time. Labels are kept but marked so the label-replay term
/// skips them (the classifier head covers stream classes only).
pub fn mix_pretrain_rehearsal<S: Scalar>(
    buffer: &mut ReservoirBuffer<S>,
    pretrain: &ImageDataset,
    model: &LayeredBackbone<S>,
    tree: &SeedTree,
) -> Result<()> {
    if buffer.pretrain_capacity() == 0 {
        return Ok(());
    }
    let norm = Normalization::for_dataset(pretrain);
    let mut rng = tree.rng("pretrain_reservoir");
    let indices: Vec<u32> = (0..pretrain.len() as u32).collect();
    for chunk in indices.chunks(64) {
        let batch = make_batch::<S>(pretrain, chunk, &norm, None, None);
        let logits = model
            .forward(&Tensor::constant(batch.inputs.clone()), Mode::Eval)?
            .array();
        for (i, &idx) in chunk.iter().enumerate() {
            let input = batch
                .inputs
                .index_axis(Axis(0), i)
                .to_owned()
                .into_dimensionality::<ndarray::Ix3>()
                .expect("3-d view");
            let row = logits.index_axis(Axis(0), i);
            let item = ReplayItem {
                input,
                label: pretrain.labels[idx as usize],
                logits: Array1::from_iter(row.iter().copied()),
                task: u16::MAX,
                masks: None,
                from_pretrain: true,
            };
            buffer.pretrain_add(item, &mut rng);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// the continual loop

struct MethodState<S: Scalar> {
    gates: Option<GateSet<S>>,
    margins: Option<ChannelMargins<S>>,
    /// Anchor and Fisher for quadratic penalties (derpp_ewc, oewc).
    anchor: Option<Vec<ArrayD<S>>>,
    fisher: Option<Vec<ArrayD<S>>>,
    /// Frozen previous-task model and its seen classes (lwf).
    prev_model: Option<LayeredBackbone<S>>,
    seen_classes: Vec<usize>,
}

/// Run the full continual loop: train each task in order, evaluating all seen
/// tasks after each and appending a column per protocol.
pub fn run_continual<S: Scalar>(
    stream: &TaskStream,
    pair: &mut SiblingPair<S>,
    config: &TrainerConfig,
) -> Result<RunOutcome<S>> {
    config.validate()?;
    let tree = SeedTree::new(config.seed).child("continual");
    let sibling_checksum_before = pair.sibling.checksum();
    let norm = Normalization::for_dataset(&stream.train);

    let joint = config.method == Method::Joint;
    let num_tasks = if joint { 1 } else { stream.num_tasks };
    let mut class_il = AccuracyMatrix::new(num_tasks);
    let mut task_il = AccuracyMatrix::new(num_tasks);
    let mut logs: Vec<StepRecord> = Vec::new();
    let mut snapshots = Vec::new();
    if config.collect_snapshots {
        snapshots.push(pair.student.state_dict());
    }

    let mut buffer = ReservoirBuffer::<S>::with_pretrain_fraction(
        if config.method.uses_buffer() {
            config.buffer_capacity
        } else {
            0
        },
        config.pretrain_rehearsal_fraction,
    )?;
    if buffer.pretrain_capacity() > 0 {
        let pretrain = stream.pretrain.as_ref().ok_or_else(|| {
            Error::config("pretraining rehearsal requires a pretraining dataset")
        })?;
        mix_pretrain_rehearsal(&mut buffer, pretrain, &pair.student, &tree)?;
    }

    let mut state = MethodState::<S> {
        gates: None,
        margins: None,
        anchor: None,
        fisher: None,
        prev_model: None,
        seen_classes: Vec::new(),
    };

    match config.method {
        Method::Twf => {
            state.gates = Some(GateSet::new(
                &pair.student.tap_shapes,
                S::of_f64(config.gumbel_temperature),
                &tree.child("gates"),
            ));
        }
        Method::DerppEwc => {
            // Fisher of the pretraining objective at the initialization.
            let pretrain = stream.pretrain.as_ref().ok_or_else(|| {
                Error::config("derpp_ewc requires the pretraining dataset for its Fisher anchor")
            })?;
            let pnorm = Normalization::for_dataset(pretrain);
            let mut head =
                LayeredBackbone::<S>::build(pair.student.arch, pair.student.input_shape, pretrain.num_classes, &tree.child("fisher_head"));
            // share feature weights with the student initialization
            let dict = pair.student.state_dict();
            let mut feat_only = head.state_dict();
            for (k, v) in dict.iter() {
                if !k.starts_with("classifier.") {
                    feat_only.insert(k.clone(), v.clone());
                }
            }
            head.load_state_dict(&feat_only)?;
            let indices: Vec<u32> = (0..pretrain.len() as u32).collect();
            let fisher_full =
                fisher_for_backbone(&head, pretrain, &pnorm, &indices, config.fisher_samples)?;
            // anchor covers the shared feature weights; the classifier head
            // differs between pretraining and the stream, so its Fisher is 0
            let mut fisher_by_name: BTreeMap<String, ArrayD<S>> = BTreeMap::new();
            let mut fi = 0;
            for (name, slot) in head.named_slots() {
                if let crate::backbone::Slot::Param(_) = slot {
                    fisher_by_name.insert(name, fisher_full[fi].clone());
                    fi += 1;
                }
            }
            let mut fisher = Vec::new();
            let mut anchor = Vec::new();
            for (name, slot) in pair.student.named_slots() {
                if let crate::backbone::Slot::Param(p) = slot {
                    anchor.push(p.array());
                    let f = if name.starts_with("classifier.") {
                        ArrayD::zeros(IxDyn(&p.shape()))
                    } else {
                        fisher_by_name
                            .get(&name)
                            .cloned()
                            .unwrap_or_else(|| ArrayD::zeros(IxDyn(&p.shape())))
                    };
                    fisher.push(f);
                }
            }
            state.anchor = Some(anchor);
            state.fisher = Some(fisher);
        }
        Method::Oewc => {
            state.anchor = None; // set at the first task boundary
            state.fisher = None;
        }
        _ => {}
    }

    for task_idx in 0..num_tasks {
        let task_tree = tree.child(&format!("task{}", task_idx));
        // margins for the distillation term: estimated once on the first
        // task's data (optionally refreshed per task)
        if config.method == Method::Twf
            && (state.margins.is_none() || config.margin_refresh)
        {
            let margins = match config.margin_mode {
                MarginMode::Zero => ChannelMargins::zeros(
                    &pair
                        .sibling
                        .tap_shapes
                        .iter()
                        .map(|&(c, _, _)| c)
                        .collect::<Vec<_>>(),
                ),
                MarginMode::Estimated => {
                    let idx = task_train_indices(stream, task_idx, joint);
                    estimate_margins(
                        &pair.sibling,
                        &stream.train,
                        &idx,
                        &norm,
                        config.eval_batch_size,
                    )?
                }
            };
            state.margins = Some(margins);
        }
        if let Some(gates) = state.gates.as_mut() {
            gates.ensure_task(task_idx);
        }

        train_one_task(
            stream,
            pair,
            config,
            &mut buffer,
            &mut state,
            task_idx,
            joint,
            &norm,
            &task_tree,
            &mut logs,
        )?;

        // task-boundary bookkeeping
        match config.method {
            Method::Lwf => {
                state.prev_model = Some(pair.student.clone_frozen(&task_tree.child("lwf_prev")));
                let classes = task_classes(stream, task_idx, joint);
                state.seen_classes.extend(classes);
                state.seen_classes.sort_unstable();
                state.seen_classes.dedup();
            }
            Method::Oewc => {
                let idx = task_train_indices(stream, task_idx, joint);
                let fisher_new = fisher_for_backbone(
                    &pair.student,
                    &stream.train,
                    &norm,
                    &idx,
                    config.fisher_samples,
                )?;
                let gamma = S::of_f64(config.oewc_gamma);
                state.fisher = Some(match state.fisher.take() {
                    None => fisher_new,
                    Some(old) => old
                        .into_iter()
                        .zip(fisher_new)
                        .map(|(o, n)| {
                            let mut acc = o;
                            ndarray::azip!((a in &mut acc, &b in &n) *a = *a * gamma + b);
                            acc
                        })
                        .collect(),
                });
                state.anchor = Some(pair.student.params().iter().map(|p| p.array()).collect());
            }
            _ => {}
        }

        let (ca, ta) = evaluate_both(
            &pair.student,
            stream,
            if joint { stream.num_tasks - 1 } else { task_idx },
            config.eval_batch_size,
        )?;
        if joint {
            // single-task matrix holds the overall means
            class_il.push_column(vec![mean(&ca)])?;
            task_il.push_column(vec![mean(&ta)])?;
        } else {
            class_il.push_column(ca)?;
            task_il.push_column(ta)?;
        }
        if config.collect_snapshots {
            snapshots.push(pair.student.state_dict());
        }
    }

    let sibling_checksum_after = pair.sibling.checksum();
    Ok(RunOutcome {
        class_il,
        task_il,
        buffer,
        gates: state.gates,
        margins: state.margins,
        snapshots,
        logs,
        sibling_checksum_before,
        sibling_checksum_after,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn task_train_indices(stream: &TaskStream, task_idx: usize, joint: bool) -> Vec<u32> {
    if joint {
        (0..stream.train.len() as u32).collect()
    } else {
        stream.tasks[task_idx].train_indices.clone()
    }
}

fn task_classes(stream: &TaskStream, task_idx: usize, joint: bool) -> Vec<usize> {
    if joint {
        stream
            .tasks
            .iter()
            .flat_map(|t| t.classes.iter().map(|&c| c as usize))
            .collect()
    } else {
        stream.tasks[task_idx]
            .classes
            .iter()
            .map(|&c| c as usize)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// per-task loops

#[allow(clippy::too_many_arguments)]
fn train_one_task<S: Scalar>(
    stream: &TaskStream,
    pair: &mut SiblingPair<S>,
    config: &TrainerConfig,
    buffer: &mut ReservoirBuffer<S>,
    state: &mut MethodState<S>,
    task_idx: usize,
    joint: bool,
    norm: &Normalization,
    task_tree: &SeedTree,
    logs: &mut Vec<StepRecord>,
) -> Result<()> {
    let indices = task_train_indices(stream, task_idx, joint);
    let mut params = pair.student.params();
    if let Some(gates) = state.gates.as_ref() {
        params.extend(gates.params());
    }
    let mut opt = Sgd::new(
        params,
        S::of_f64(config.lr),
        S::of_f64(config.momentum),
        S::of_f64(config.weight_decay),
    );
    let mut aug_rng = task_tree.rng("augment");
    let mut gumbel_rng = task_tree.rng("gumbel");
    let mut reservoir_rng = task_tree.rng("reservoir");
    let mut replay_rng = task_tree.rng("replay_draw");

    for epoch in 0..config.epochs_per_task {
        if config.lr_decay_steps.contains(&epoch) {
            opt.lr *= S::of_f64(config.lr_decay);
        }
        let mut shuffle_rng = task_tree.rng_indexed("shuffle", epoch as u64);
        let order = shuffled_indices(&indices, &mut shuffle_rng);
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let record = train_step(
                stream,
                pair,
                config,
                buffer,
                state,
                task_idx,
                chunk,
                norm,
                &mut aug_rng,
                &mut gumbel_rng,
                &mut reservoir_rng,
                &mut replay_rng,
                &mut opt,
            )
            .map_err(|e| {
                Error::numeric(format!(
                    "task {} epoch {} step {}: {}",
                    task_idx, epoch, step, e
                ))
            })?;
            logs.push(StepRecord {
                task: task_idx,
                epoch,
                step,
                ..record
            });
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_step<S: Scalar>(
    stream: &TaskStream,
    pair: &mut SiblingPair<S>,
    config: &TrainerConfig,
    buffer: &mut ReservoirBuffer<S>,
    state: &mut MethodState<S>,
    task_idx: usize,
    chunk: &[u32],
    norm: &Normalization,
    aug_rng: &mut rand_chacha::ChaCha12Rng,
    gumbel_rng: &mut rand_chacha::ChaCha12Rng,
    reservoir_rng: &mut rand_chacha::ChaCha12Rng,
    replay_rng: &mut rand_chacha::ChaCha12Rng,
    opt: &mut Sgd<S>,
) -> Result<StepRecord> {
    let weights = config.weights.as_loss_weights::<S>();
    let b_cur = chunk.len();
    let current = make_batch::<S>(
        &stream.train,
        chunk,
        norm,
        Some((&config.augment, aug_rng)),
        None,
    );

    // replay draw (methods with a buffer, once it holds anything)
    let replay: Option<ReplayBatch<S>> = if config.method.uses_buffer() && !buffer.is_empty() {
        let items = buffer.sample_batch(config.replay_batch_size, replay_rng);
        Some(assemble_batch(&items))
    } else {
        None
    };

    // one optimizer step consumes the concatenation of current and replay
    let x_cur = Tensor::constant(current.inputs.clone());
    let (logits_all, taps_all, sib_taps_all, b_rep) = match &replay {
        Some(r) => {
            let x_rep = Tensor::constant(r.inputs.clone());
            let x_all = concat0(&[x_cur, x_rep]);
            let (logits, taps) = pair.student.forward_with_taps(&x_all, Mode::Train)?;
            let sib_taps = if config.method == Method::Twf {
                pair.sibling.forward_with_taps(&x_all, Mode::Eval)?.1
            } else {
                Vec::new()
            };
            (logits, taps, sib_taps, r.len())
        }
        None => {
            let (logits, taps) = pair.student.forward_with_taps(&x_cur, Mode::Train)?;
            let sib_taps = if config.method == Method::Twf {
                pair.sibling.forward_with_taps(&x_cur, Mode::Eval)?.1
            } else {
                Vec::new()
            };
            (logits, taps, sib_taps, 0)
        }
    };
    let cur_rows: Vec<usize> = (0..b_cur).collect();
    let rep_rows: Vec<usize> = (b_cur..b_cur + b_rep).collect();
    let logits_cur = logits_all.select_rows(&cur_rows);
    let stream_ce = logits_cur.cross_entropy_mean(&current.labels);

    let zero = Tensor::scalar(S::zero());
    let mut l_cl = zero.clone();
    let mut l_fp = zero.clone();
    let mut l_aux = zero.clone();
    let mut l_reg = zero.clone();
    let mut fp_current_masks = None;
    let mut mask_on = 0.0f64;

    if let Some(r) = &replay {
        let logits_rep = logits_all.select_rows(&rep_rows);
        let (alpha, beta) = match config.method {
            Method::Er => (S::zero(), S::one()),
            Method::Twf | Method::Derpp | Method::DerppEwc => (weights.alpha, weights.beta),
            _ => (S::zero(), S::zero()),
        };
        // α·MSE over every replay row; β·CE only over rows with stream labels
        let stored = r.logits.clone().into_dyn();
        let mse_part = cl_replay_loss(&logits_rep, &stored, &r.labels, alpha, S::zero())?;
        let ce_rows: Vec<usize> = r
            .from_pretrain
            .iter()
            .enumerate()
            .filter(|(_, &p)| !p)
            .map(|(i, _)| i)
            .collect();
        let ce_part = if beta > S::zero() && !ce_rows.is_empty() {
            let labels: Vec<usize> = ce_rows.iter().map(|&i| r.labels[i]).collect();
            logits_rep
                .select_rows(&ce_rows)
                .cross_entropy_mean(&labels)
                .scale(beta)
        } else {
            zero.clone()
        };
        l_cl = mse_part.add(&ce_part);
    }

    if config.method == Method::Twf {
        let gates = state.gates.as_ref().expect("gates initialized");
        let margins = state.margins.as_ref().expect("margins initialized");
        let cur_student: Vec<Tensor<S>> =
            taps_all.iter().map(|t| t.select_rows(&cur_rows)).collect();
        let cur_sibling: Vec<Tensor<S>> = sib_taps_all
            .iter()
            .map(|t| t.select_rows(&cur_rows))
            .collect();
        let fp_current = FpCurrent {
            student_taps: &cur_student,
            sibling_taps: &cur_sibling,
            task: task_idx,
        };
        let rep_student: Vec<Tensor<S>>;
        let rep_sibling: Vec<Tensor<S>>;
        let fp_replay = match &replay {
            Some(r) if !r.is_empty() => {
                rep_student = taps_all.iter().map(|t| t.select_rows(&rep_rows)).collect();
                rep_sibling = sib_taps_all
                    .iter()
                    .map(|t| t.select_rows(&rep_rows))
                    .collect();
                Some(FpReplay {
                    student_taps: &rep_student,
                    sibling_taps: &rep_sibling,
                    tasks: &r.tasks,
                    stored_masks: r.masks.as_deref(),
                })
            }
            _ => None,
        };
        let fp = fp_loss(
            gates,
            &fp_current,
            fp_replay.as_ref(),
            margins,
            &weights,
            true,
            gumbel_rng,
        )?;
        l_fp = fp.loss;
        let (mut on, mut total) = (0.0f64, 0.0f64);
        for m in &fp.current_masks {
            let v = m.hard.value();
            on += v.iter().map(|x| x.as_f64()).sum::<f64>();
            total += v.len() as f64;
        }
        mask_on = if total > 0.0 { on / total } else { 0.0 };
        if b_cur >= 2 {
            let hard: Vec<Tensor<S>> = fp
                .current_masks
                .iter()
                .map(|m| m.hard.clone())
                .collect();
            l_aux = aux_diversity_loss(&hard, weights.temperature_aux, weights.lambda_aux)?;
        }
        fp_current_masks = Some(fp.current_masks);
    }

    if matches!(config.method, Method::DerppEwc | Method::Oewc) {
        if let (Some(anchor), Some(fisher)) = (state.anchor.as_ref(), state.fisher.as_ref()) {
            l_reg = ewc_penalty(
                &pair.student.params(),
                anchor,
                fisher,
                weights.ewc_lambda,
            )?;
        }
    }

    if config.method == Method::Lwf {
        if let Some(prev) = state.prev_model.as_ref() {
            if !state.seen_classes.is_empty() {
                let tau = S::of_f64(config.lwf_tau);
                let prev_logits = prev.forward(&Tensor::constant(current.inputs.clone()), Mode::Eval)?;
                let target = prev_logits
                    .select_cols(&state.seen_classes)
                    .scale(S::one() / tau)
                    .log_softmax_rows()
                    .exp()
                    .detach();
                let log_q = logits_cur
                    .select_cols(&state.seen_classes)
                    .scale(S::one() / tau)
                    .log_softmax_rows();
                let kd = target
                    .mul(&log_q)
                    .sum_axes(&[1])
                    .mean_all()
                    .neg()
                    .scale(S::of_f64(config.lwf_alpha) * tau * tau);
                l_reg = kd;
            }
        }
    }

    let total = total_objective(&stream_ce, &l_cl, &l_fp, &l_aux)?.add(&l_reg);
    let total_v = total.item().as_f64();
    if !total_v.is_finite() {
        return Err(Error::numeric(format!("loss diverged ({})", total_v)));
    }
    opt.zero_grad();
    total.backward();
    opt.step();

    // offer the current batch to the reservoir (methods with a buffer)
    if config.method.uses_buffer() && buffer.capacity() > 0 {
        let logits_vals = logits_cur.array();
        let mask_vals: Option<Vec<ArrayD<S>>> = fp_current_masks
            .as_ref()
            .map(|ms| ms.iter().map(|m| m.hard.array()).collect());
        for (i, &src) in chunk.iter().enumerate() {
            let input = current
                .inputs
                .index_axis(Axis(0), i)
                .to_owned()
                .into_dimensionality::<ndarray::Ix3>()
                .expect("3-d view");
            let masks = match &mask_vals {
                None => None,
                Some(per_layer) => {
                    let mut ms = Vec::with_capacity(per_layer.len());
                    for layer in per_layer {
                        let row = layer.index_axis(Axis(0), i);
                        let as_u8: Array3<u8> = row
                            .to_owned()
                            .into_dimensionality::<ndarray::Ix3>()
                            .expect("3-d mask")
                            .mapv(|v| if v > S::of_f64(0.5) { 1u8 } else { 0u8 });
                        ms.push(StoredMask::store(&as_u8)?);
                    }
                    Some(ms)
                }
            };
            let item = ReplayItem {
                input,
                label: stream.train.labels[src as usize],
                logits: Array1::from_iter(logits_vals.index_axis(Axis(0), i).iter().copied()),
                task: task_idx as u16,
                masks,
                from_pretrain: false,
            };
            buffer.reservoir_add(item, reservoir_rng);
        }
    }

    Ok(StepRecord {
        task: 0,
        epoch: 0,
        step: 0,
        total: total_v,
        stream_ce: stream_ce.item().as_f64(),
        l_cl: l_cl.item().as_f64(),
        l_fp: l_fp.item().as_f64(),
        l_aux: l_aux.item().as_f64(),
        l_reg: l_reg.item().as_f64(),
        mask_on,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ArchId;
    use crate::benchmark::{build_split_benchmark, BenchmarkOptions, DatasetId, GLYPH_SIZE};

    fn tiny_stream() -> TaskStream {
        let opts = BenchmarkOptions {
            glyph_counts: (16, 8),
            ..Default::default()
        };
        let mut s = build_split_benchmark(DatasetId::GlyphsCl, 5, 0, &opts).unwrap();
        s.pretrain = Some(crate::benchmark::synthetic_glyphs(
            crate::benchmark::GlyphFamily::Source,
            crate::benchmark::Split::Train,
            (16, 8),
        ));
        s
    }

    fn tiny_pair(seed: u64) -> SiblingPair<f32> {
        let tree = SeedTree::new(seed);
        let student =
            LayeredBackbone::<f32>::build(ArchId::DeskCnn, (1, GLYPH_SIZE, GLYPH_SIZE), 10, &tree);
        SiblingPair::new(student, &tree)
    }

    fn tiny_config(method: Method, seed: u64) -> TrainerConfig {
        TrainerConfig {
            method,
            epochs_per_task: 1,
            batch_size: 8,
            replay_batch_size: 8,
            lr: 0.05,
            buffer_capacity: 20,
            fisher_samples: 8,
            eval_batch_size: 32,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn twf_run_completes_with_sound_state() {
        let stream = tiny_stream();
        let mut pair = tiny_pair(0);
        let out = run_continual(&stream, &mut pair, &tiny_config(Method::Twf, 0)).unwrap();
        assert!(out.class_il.is_complete());
        assert!(out.task_il.is_complete());
        assert_eq!(out.sibling_checksum_before, out.sibling_checksum_after);
        assert_eq!(out.snapshots.len(), 6);
        assert!(!out.buffer.is_empty());
        // buffer never holds an unseen task, and every item carries masks
        for item in out.buffer.iter() {
            assert!(item.task < 5);
            let masks = item.masks.as_ref().expect("twf items store masks");
            assert_eq!(masks.len(), 3);
        }
        // gates grew one bank per task
        let gates = out.gates.expect("twf trains gates");
        assert_eq!(gates.gates[0].num_tasks(), 5);
        assert!(!out.logs.is_empty());
        assert!(out.logs.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn fixed_seed_reproduces_matrices_exactly() {
        let stream = tiny_stream();
        let mut p1 = tiny_pair(3);
        let a = run_continual(&stream, &mut p1, &tiny_config(Method::Twf, 3)).unwrap();
        let mut p2 = tiny_pair(3);
        let b = run_continual(&stream, &mut p2, &tiny_config(Method::Twf, 3)).unwrap();
        assert_eq!(a.class_il, b.class_il);
        assert_eq!(a.task_il, b.task_il);
    }

    #[test]
    fn baselines_run_and_respect_buffer_policy() {
        let stream = tiny_stream();
        for method in [Method::Finetune, Method::Lwf, Method::Oewc] {
            let mut pair = tiny_pair(1);
            let out = run_continual(&stream, &mut pair, &tiny_config(method, 1)).unwrap();
            assert!(out.buffer.is_empty(), "{} must not store items", method);
            assert!(out.class_il.is_complete());
        }
        for method in [Method::Er, Method::Derpp] {
            let mut pair = tiny_pair(1);
            let out = run_continual(&stream, &mut pair, &tiny_config(method, 1)).unwrap();
            assert!(!out.buffer.is_empty(), "{} uses the buffer", method);
            assert!(out.buffer.iter().all(|i| i.masks.is_none()));
        }
    }

    #[test]
    fn derpp_ewc_with_zero_lambda_matches_derpp() {
        let stream = tiny_stream();
        let mut cfg = tiny_config(Method::DerppEwc, 5);
        cfg.weights.ewc_lambda = 0.0;
        let mut pair = tiny_pair(5);
        let a = run_continual(&stream, &mut pair, &cfg).unwrap();
        let mut cfg2 = tiny_config(Method::Derpp, 5);
        cfg2.weights.ewc_lambda = 0.0;
        let mut pair2 = tiny_pair(5);
        let b = run_continual(&stream, &mut pair2, &cfg2).unwrap();
        assert_eq!(a.class_il, b.class_il);
    }

    #[test]
    fn joint_collapses_to_single_task() {
        let stream = tiny_stream();
        let mut pair = tiny_pair(2);
        let out = run_continual(&stream, &mut pair, &tiny_config(Method::Joint, 2)).unwrap();
        assert_eq!(out.class_il.num_tasks(), 1);
        assert!(crate::analysis::ff(&out.class_il).is_err());
    }

    #[test]
    fn gate_parameters_receive_gradients() {
        let stream = tiny_stream();
        let mut pair = tiny_pair(7);
        let mut cfg = tiny_config(Method::Twf, 7);
        cfg.epochs_per_task = 1;
        let before: Vec<_> = {
            let tree = SeedTree::new(7).child("continual").child("gates");
            let mut gates = GateSet::<f32>::new(
                &pair.student.tap_shapes,
                1.0,
                &tree,
            );
            gates.ensure_task(0);
            gates.params().iter().map(|p| p.array()).collect()
        };
        let out = run_continual(&stream, &mut pair, &cfg).unwrap();
        let gates = out.gates.unwrap();
        let after: Vec<_> = gates.gates.iter().flat_map(|g| g.task_params(0)).collect();
        // at least one task-0 gate parameter must have moved
        let mut moved = false;
        for p in &after {
            let arr = p.array();
            for b in &before {
                if b.shape() == arr.shape() && b != &arr {
                    moved = true;
                }
            }
        }
        assert!(moved, "gate parameters did not train");
    }

    #[test]
    fn pretrain_rehearsal_fraction_validation() {
        let mut cfg = tiny_config(Method::Twf, 0);
        cfg.pretrain_rehearsal_fraction = 0.5;
        assert!(cfg.validate().is_err(), "twf cannot mix pretraining rehearsal");
        let mut cfg = tiny_config(Method::Derpp, 0);
        cfg.pretrain_rehearsal_fraction = 1.5;
        assert!(cfg.validate().is_err());
        cfg.pretrain_rehearsal_fraction = 0.5;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn pretrain_rehearsal_fills_reserved_slots() {
        let stream = tiny_stream();
        let mut cfg = tiny_config(Method::Derpp, 4);
        cfg.buffer_capacity = 16;
        cfg.pretrain_rehearsal_fraction = 0.5;
        let mut pair = tiny_pair(4);
        let out = run_continual(&stream, &mut pair, &cfg).unwrap();
        let pretr = out.buffer.iter().filter(|i| i.from_pretrain).count();
        assert_eq!(pretr, 8);
        let cl = out.buffer.iter().filter(|i| !i.from_pretrain).count();
        assert!(cl <= 8);

        // fraction 1: only pretraining items ever stored
        let mut cfg = tiny_config(Method::Derpp, 4);
        cfg.buffer_capacity = 8;
        cfg.pretrain_rehearsal_fraction = 1.0;
        let mut pair = tiny_pair(4);
        let out = run_continual(&stream, &mut pair, &cfg).unwrap();
        assert!(out.buffer.iter().all(|i| i.from_pretrain));
    }
}
