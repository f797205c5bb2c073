//! Layered feature extractors with intermediate tap points, a linear
//! classifier head, supervised pretraining, and frozen-sibling cloning.
//!
//! Taps are the pre-activation outputs of each macro-stage; forward continues
//! through a ReLU. Exposing pre-activations keeps negative responses visible
//! to the margins used by the distillation objective.

use crate::benchmark::{make_batch, shuffled_indices, Augment, ImageDataset, Normalization};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Linear, Mode};
use crate::rng::SeedTree;
use crate::scalar::Scalar;
use crate::tensor::{ConvSpec, Tensor};
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha12Rng;
use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchId {
    /// Three conv blocks; the CPU-feasible architecture.
    DeskCnn,
    /// CIFAR-style ResNet-18 (3x3 stem, four residual stages).
    ResNet18,
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchId::DeskCnn => "desk_cnn",
            ArchId::ResNet18 => "resnet18",
        })
    }
}

impl FromStr for ArchId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk_cnn" => Ok(ArchId::DeskCnn),
            "resnet18" => Ok(ArchId::ResNet18),
            other => Err(Error::config(format!(
                "unknown architecture '{}'; valid: desk_cnn, resnet18",
                other
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// building blocks

/// Named handle to a stored tensor: trainable parameter or running buffer.
pub enum Slot<S: Scalar> {
    Param(Tensor<S>),
    Buffer(Rc<RefCell<ArrayD<S>>>),
}

fn collect_bn<S: Scalar>(prefix: &str, bn: &BatchNorm<S>, out: &mut Vec<(String, Slot<S>)>) {
    out.push((format!("{}.gamma", prefix), Slot::Param(bn.gamma.clone())));
    out.push((format!("{}.beta", prefix), Slot::Param(bn.beta.clone())));
    out.push((
        format!("{}.running_mean", prefix),
        Slot::Buffer(bn.running_mean.clone()),
    ));
    out.push((
        format!("{}.running_var", prefix),
        Slot::Buffer(bn.running_var.clone()),
    ));
}

fn collect_conv<S: Scalar>(prefix: &str, conv: &Conv2d<S>, out: &mut Vec<(String, Slot<S>)>) {
    out.push((format!("{}.weight", prefix), Slot::Param(conv.weight.clone())));
    if let Some(b) = &conv.bias {
        out.push((format!("{}.bias", prefix), Slot::Param(b.clone())));
    }
}

struct ConvBlock<S: Scalar> {
    conv: Conv2d<S>,
    bn: BatchNorm<S>,
}

impl<S: Scalar> ConvBlock<S> {
    fn new(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha12Rng) -> Self {
        ConvBlock {
            conv: Conv2d::new(cin, cout, 3, ConvSpec::new(stride, 1, 1), false, rng),
            bn: BatchNorm::new(cout, true),
        }
    }

    fn forward_preact(&self, x: &Tensor<S>, mode: Mode) -> Tensor<S> {
        self.bn.forward(&self.conv.forward(x), mode)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Slot<S>)>) {
        collect_conv(&format!("{}.conv", prefix), &self.conv, out);
        collect_bn(&format!("{}.bn", prefix), &self.bn, out);
    }

    fn bns(&self) -> Vec<&BatchNorm<S>> {
        vec![&self.bn]
    }
}

struct BasicBlock<S: Scalar> {
    conv1: Conv2d<S>,
    bn1: BatchNorm<S>,
    conv2: Conv2d<S>,
    bn2: BatchNorm<S>,
    down: Option<(Conv2d<S>, BatchNorm<S>)>,
}

impl<S: Scalar> BasicBlock<S> {
    fn new(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha12Rng) -> Self {
        let down = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(cin, cout, 1, ConvSpec::new(stride, 0, 1), false, rng),
                BatchNorm::new(cout, true),
            )
        });
        BasicBlock {
            conv1: Conv2d::new(cin, cout, 3, ConvSpec::new(stride, 1, 1), false, rng),
            bn1: BatchNorm::new(cout, true),
            conv2: Conv2d::new(cout, cout, 3, ConvSpec::new(1, 1, 1), false, rng),
            bn2: BatchNorm::new(cout, true),
            down,
        }
    }

    /// Residual sum before the block's final ReLU.
    fn forward_preact(&self, x: &Tensor<S>, mode: Mode) -> Tensor<S> {
        let h = self.bn1.forward(&self.conv1.forward(x), mode).relu();
        let h = self.bn2.forward(&self.conv2.forward(&h), mode);
        let skip = match &self.down {
            Some((conv, bn)) => bn.forward(&conv.forward(x), mode),
            None => x.clone(),
        };
        h.add(&skip)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Slot<S>)>) {
        collect_conv(&format!("{}.conv1", prefix), &self.conv1, out);
        collect_bn(&format!("{}.bn1", prefix), &self.bn1, out);
        collect_conv(&format!("{}.conv2", prefix), &self.conv2, out);
        collect_bn(&format!("{}.bn2", prefix), &self.bn2, out);
        if let Some((conv, bn)) = &self.down {
            collect_conv(&format!("{}.down.conv", prefix), conv, out);
            collect_bn(&format!("{}.down.bn", prefix), bn, out);
        }
    }

    fn bns(&self) -> Vec<&BatchNorm<S>> {
        let mut v = vec![&self.bn1, &self.bn2];
        if let Some((_, bn)) = &self.down {
            v.push(bn);
        }
        v
    }
}

enum Stage<S: Scalar> {
    Conv(ConvBlock<S>),
    Res(Vec<BasicBlock<S>>),
}

impl<S: Scalar> Stage<S> {
    fn forward_preact(&self, x: &Tensor<S>, mode: Mode) -> Tensor<S> {
        match self {
            Stage::Conv(block) => block.forward_preact(x, mode),
            Stage::Res(blocks) => {
                let mut h = x.clone();
                for (i, block) in blocks.iter().enumerate() {
                    let pre = block.forward_preact(&h, mode);
                    if i + 1 == blocks.len() {
                        return pre;
                    }
                    h = pre.relu();
                }
                unreachable!("empty residual stage")
            }
        }
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Slot<S>)>) {
        match self {
            Stage::Conv(block) => block.collect(prefix, out),
            Stage::Res(blocks) => {
                for (i, block) in blocks.iter().enumerate() {
                    block.collect(&format!("{}.block{}", prefix, i), out);
                }
            }
        }
    }

    fn bns(&self) -> Vec<&BatchNorm<S>> {
        match self {
            Stage::Conv(block) => block.bns(),
            Stage::Res(blocks) => blocks.iter().flat_map(|b| b.bns()).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// the backbone

/// Feature extractor with `L` tap points and a fixed single classifier head
/// over every class of the benchmark (unseen-task logits exist from the
/// start; Task-IL restriction happens at evaluation).
pub struct LayeredBackbone<S: Scalar> {
    pub arch: ArchId,
    stem: Option<(Conv2d<S>, BatchNorm<S>)>,
    stages: Vec<Stage<S>>,
    classifier: Linear<S>,
    pub input_shape: (usize, usize, usize), // (c, h, w)
    pub num_classes: usize,
    pub tap_shapes: Vec<(usize, usize, usize)>,
    frozen: bool,
    /// Identifier of the dataset the weights were pretrained on, if any.
    pub pretrain_dataset: Option<String>,
}

impl<S: Scalar> LayeredBackbone<S> {
    pub fn build(
        arch: ArchId,
        input_shape: (usize, usize, usize),
        num_classes: usize,
        tree: &SeedTree,
    ) -> Self {
        let mut rng = tree.rng("backbone_init");
        let (cin, _, _) = input_shape;
        let (stem, stages, feat_dim) = match arch {
            ArchId::DeskCnn => {
                let widths = [8usize, 24, 96];
                let strides = [1usize, 2, 2];
                let mut stages = Vec::new();
                let mut prev = cin;
                for (w, s) in widths.iter().zip(strides.iter()) {
                    stages.push(Stage::Conv(ConvBlock::new(prev, *w, *s, &mut rng)));
                    prev = *w;
                }
                (None, stages, prev)
            }
            ArchId::ResNet18 => {
                let stem = (
                    Conv2d::new(cin, 64, 3, ConvSpec::new(1, 1, 1), false, &mut rng),
                    BatchNorm::new(64, true),
                );
                let widths = [64usize, 128, 256, 512];
                let strides = [1usize, 2, 2, 2];
                let mut stages = Vec::new();
                let mut prev = 64;
                for (w, s) in widths.iter().zip(strides.iter()) {
                    let blocks = vec![
                        BasicBlock::new(prev, *w, *s, &mut rng),
                        BasicBlock::new(*w, *w, 1, &mut rng),
                    ];
                    stages.push(Stage::Res(blocks));
                    prev = *w;
                }
                (Some(stem), stages, prev)
            }
        };
        let classifier = Linear::new(feat_dim, num_classes, true, &mut rng);
        let mut model = LayeredBackbone {
            arch,
            stem,
            stages,
            classifier,
            input_shape,
            num_classes,
            tap_shapes: Vec::new(),
            frozen: false,
            pretrain_dataset: None,
        };
        model.tap_shapes = model.infer_tap_shapes();
        model
    }

    fn infer_tap_shapes(&self) -> Vec<(usize, usize, usize)> {
        let (c, h, w) = self.input_shape;
        let x = Tensor::constant(ArrayD::zeros(IxDyn(&[1, c, h, w])));
        let (_, taps) = self.forward_with_taps(&x, Mode::Eval).expect("dry forward");
        taps.iter()
            .map(|t| {
                let s = t.shape();
                (s[1], s[2], s[3])
            })
            .collect()
    }

    pub fn num_taps(&self) -> usize {
        self.stages.len()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Forward pass emitting logits and the pre-activation tap of each stage.
    pub fn forward_with_taps(
        &self,
        x: &Tensor<S>,
        mode: Mode,
    ) -> Result<(Tensor<S>, Vec<Tensor<S>>)> {
        let shape = x.shape();
        if shape.len() != 4 {
            return Err(Error::shape(format!("expected 4-d input, got {:?}", shape)));
        }
        let (c, h, w) = self.input_shape;
        if shape[1] != c || shape[2] != h || shape[3] != w {
            return Err(Error::shape(format!(
                "input {:?} does not match expected ({}, {}, {})",
                &shape[1..],
                c,
                h,
                w
            )));
        }
        let mode = if self.frozen { Mode::Eval } else { mode };
        let mut h = x.clone();
        if let Some((conv, bn)) = &self.stem {
            h = bn.forward(&conv.forward(&h), mode).relu();
        }
        let mut taps = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let pre = stage.forward_preact(&h, mode);
            taps.push(pre.clone());
            h = pre.relu();
        }
        // The head reads the pooled pre-activation of the last stage: its
        // normalization keeps the pooled features near zero mean per channel,
        // which removes the shared-offset direction from the classifier input.
        let feats = taps.last().expect("at least one stage").gap();
        let logits = self.classifier.forward(&feats);
        Ok((logits, taps))
    }

    /// Logits only.
    pub fn forward(&self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        Ok(self.forward_with_taps(x, mode)?.0)
    }

    pub fn named_slots(&self) -> Vec<(String, Slot<S>)> {
        let mut out = Vec::new();
        if let Some((conv, bn)) = &self.stem {
            collect_conv("stem.conv", conv, &mut out);
            collect_bn("stem.bn", bn, &mut out);
        }
        for (i, stage) in self.stages.iter().enumerate() {
            stage.collect(&format!("stage{}", i), &mut out);
        }
        out.push((
            "classifier.weight".to_string(),
            Slot::Param(self.classifier.weight.clone()),
        ));
        if let Some(b) = &self.classifier.bias {
            out.push(("classifier.bias".to_string(), Slot::Param(b.clone())));
        }
        out
    }

    /// Trainable parameters (empty when frozen).
    pub fn params(&self) -> Vec<Tensor<S>> {
        self.named_slots()
            .into_iter()
            .filter_map(|(_, s)| match s {
                Slot::Param(p) if p.requires_grad() => Some(p),
                _ => None,
            })
            .collect()
    }

    pub fn state_dict(&self) -> BTreeMap<String, ArrayD<S>> {
        self.named_slots()
            .into_iter()
            .map(|(name, slot)| {
                let arr = match slot {
                    Slot::Param(p) => p.array(),
                    Slot::Buffer(b) => b.borrow().clone(),
                };
                (name, arr)
            })
            .collect()
    }

    pub fn load_state_dict(&mut self, dict: &BTreeMap<String, ArrayD<S>>) -> Result<()> {
        for (name, slot) in self.named_slots() {
            let arr = dict
                .get(&name)
                .ok_or_else(|| Error::invalid(format!("checkpoint missing tensor '{}'", name)))?;
            match slot {
                Slot::Param(p) => {
                    if p.value().shape() != arr.shape() {
                        return Err(Error::shape(format!(
                            "tensor '{}' shape {:?} != checkpoint {:?}",
                            name,
                            p.value().shape(),
                            arr.shape()
                        )));
                    }
                    p.set_value(arr.clone());
                }
                Slot::Buffer(b) => {
                    if b.borrow().shape() != arr.shape() {
                        return Err(Error::shape(format!("buffer '{}' shape mismatch", name)));
                    }
                    *b.borrow_mut() = arr.clone();
                }
            }
        }
        Ok(())
    }

    fn all_bns(&self) -> Vec<&BatchNorm<S>> {
        let mut v = Vec::new();
        if let Some((_, bn)) = &self.stem {
            v.push(bn);
        }
        for stage in &self.stages {
            v.extend(stage.bns());
        }
        v
    }

    /// Deep copy with gradients disabled and normalization statistics locked.
    pub fn clone_frozen(&self, tree: &SeedTree) -> LayeredBackbone<S> {
        let mut twin = LayeredBackbone::build(self.arch, self.input_shape, self.num_classes, tree);
        twin.load_state_dict(&self.state_dict())
            .expect("identical architecture");
        twin.pretrain_dataset = self.pretrain_dataset.clone();
        twin.freeze();
        twin
    }

    fn freeze(&mut self) {
        for (_, slot) in self.named_slots() {
            if let Slot::Param(p) = slot {
                p.set_requires_grad(false);
            }
        }
        for bn in self.all_bns() {
            bn.locked.set(true);
        }
        self.frozen = true;
    }

    /// Order-stable content hash of all parameters and buffers.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, arr) in self.state_dict() {
            eat(name.as_bytes());
            for v in arr.iter() {
                eat(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }
}

// ---------------------------------------------------------------------------
// supervised pretraining

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay: f64,
    pub decay_steps: Vec<usize>,
    pub augment: Augment,
    /// Examples held out of training and used as the probe batch.
    pub probe_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 20,
            lr: 0.1,
            batch_size: 32,
            momentum: 0.0,
            weight_decay: 0.0,
            decay: 1.0,
            decay_steps: Vec::new(),
            augment: Augment::none(),
            probe_size: 256,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub initial_probe_loss: f64,
    pub final_probe_loss: f64,
    pub probe_accuracy: f64,
    pub epochs_run: usize,
}

/// Supervised pretraining on `dataset`; mutates `model` in place.
pub fn pretrain_supervised<S: Scalar>(
    model: &mut LayeredBackbone<S>,
    dataset: &ImageDataset,
    epochs: usize,
    cfg: &PretrainConfig,
    tree: &SeedTree,
) -> Result<PretrainReport> {
    if dataset.num_classes != model.num_classes {
        return Err(Error::config(format!(
            "dataset has {} classes but classifier expects {}",
            dataset.num_classes, model.num_classes
        )));
    }
    let n = dataset.len();
    let probe_size = cfg.probe_size.min(n / 4).max(1);
    // Evenly spaced hold-out so the probe covers all classes even when the
    // dataset is ordered by label.
    let stride = n / probe_size;
    let probe_idx: Vec<u32> = (0..probe_size).map(|i| (i * stride) as u32).collect();
    let probe_set: std::collections::HashSet<u32> = probe_idx.iter().copied().collect();
    let train_idx: Vec<u32> = (0..n as u32).filter(|i| !probe_set.contains(i)).collect();
    let norm = Normalization::for_dataset(dataset);

    let probe = |m: &LayeredBackbone<S>| -> Result<(f64, f64)> {
        let batch = make_batch::<S>(dataset, &probe_idx, &norm, None, None);
        let logits = m.forward(&Tensor::constant(batch.inputs), Mode::Eval)?;
        let loss = logits.cross_entropy_mean(&batch.labels).item().as_f64();
        let preds = argmax_rows(&logits.array());
        let correct = preds
            .iter()
            .zip(batch.labels.iter())
            .filter(|(p, y)| p == y)
            .count();
        Ok((loss, correct as f64 / batch.labels.len() as f64))
    };

    let (initial_probe_loss, _) = probe(model)?;
    let mut opt = crate::nn::Sgd::new(
        model.params(),
        S::of_f64(cfg.lr),
        S::of_f64(cfg.momentum),
        S::of_f64(cfg.weight_decay),
    );
    let mut aug_rng = tree.rng("pretrain_aug");
    for epoch in 0..epochs {
        if cfg.decay_steps.contains(&epoch) {
            opt.lr *= S::of_f64(cfg.decay);
        }
        let mut shuffle_rng = tree.rng_indexed("pretrain_shuffle", epoch as u64);
        let order = shuffled_indices(&train_idx, &mut shuffle_rng);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = make_batch::<S>(
                dataset,
                chunk,
                &norm,
                Some((&cfg.augment, &mut aug_rng)),
                None,
            );
            let logits = model.forward(&Tensor::constant(batch.inputs), Mode::Train)?;
            let loss = logits.cross_entropy_mean(&batch.labels);
            let lv = loss.item().as_f64();
            if !lv.is_finite() {
                return Err(Error::numeric(format!(
                    "pretraining diverged (loss {}) at epoch {} step {}",
                    lv, epoch, step
                )));
            }
            opt.zero_grad();
            loss.backward();
            opt.step();
        }
    }
    let (final_probe_loss, probe_accuracy) = probe(model)?;
    Ok(PretrainReport {
        initial_probe_loss,
        final_probe_loss,
        probe_accuracy,
        epochs_run: epochs,
    })
}

/// Row-wise argmax over a 2-d array; the first maximum wins on ties.
pub fn argmax_rows<S: Scalar>(logits: &ArrayD<S>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            let mut best_v = row[0];
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best = i;
                    best_v = v;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::{synthetic_glyphs, GlyphFamily, Split};

    fn desk_model() -> LayeredBackbone<f32> {
        LayeredBackbone::build(ArchId::DeskCnn, (1, 20, 20), 10, &SeedTree::new(0))
    }

    #[test]
    fn resnet18_tap_shapes_match_stage_arithmetic() {
        let m = LayeredBackbone::<f32>::build(ArchId::ResNet18, (3, 32, 32), 7, &SeedTree::new(0));
        assert_eq!(
            m.tap_shapes,
            vec![(64, 32, 32), (128, 16, 16), (256, 8, 8), (512, 4, 4)]
        );
        let x = Tensor::constant(ArrayD::zeros(IxDyn(&[4, 3, 32, 32])));
        let (logits, taps) = m.forward_with_taps(&x, Mode::Eval).unwrap();
        assert_eq!(logits.shape(), vec![4, 7]);
        assert_eq!(taps.len(), 4);
        assert_eq!(taps[3].shape(), vec![4, 512, 4, 4]);
    }

    #[test]
    fn desk_cnn_tap_shapes() {
        let m = desk_model();
        assert_eq!(m.tap_shapes, vec![(8, 20, 20), (24, 10, 10), (96, 5, 5)]);
    }

    #[test]
    fn zero_input_gives_finite_logits() {
        let m = desk_model();
        let x = Tensor::constant(ArrayD::zeros(IxDyn(&[2, 1, 20, 20])));
        let (logits, _) = m.forward_with_taps(&x, Mode::Eval).unwrap();
        assert!(logits.array().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn eval_mode_has_no_batch_leakage() {
        let ds = synthetic_glyphs(GlyphFamily::Stream, Split::Test, (4, 4));
        let norm = Normalization::for_dataset(&ds);
        let m = desk_model();
        let single = make_batch::<f32>(&ds, &[0], &norm, None, None);
        let many = make_batch::<f32>(&ds, &[0, 1, 2, 3], &norm, None, None);
        let l1 = m
            .forward(&Tensor::constant(single.inputs), Mode::Eval)
            .unwrap()
            .array();
        let lm = m
            .forward(&Tensor::constant(many.inputs), Mode::Eval)
            .unwrap()
            .array();
        let row0 = lm.index_axis(ndarray::Axis(0), 0).to_owned();
        let diff: f32 = (&l1.index_axis(ndarray::Axis(0), 0).to_owned() - &row0)
            .mapv(f32::abs)
            .sum();
        assert!(diff < 1e-6, "batch-dependent eval output, diff {}", diff);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let m = desk_model();
        let x = Tensor::constant(ArrayD::zeros(IxDyn(&[1, 1, 16, 16])));
        assert!(m.forward_with_taps(&x, Mode::Eval).is_err());
    }

    #[test]
    fn frozen_clone_semantics() {
        let ds = synthetic_glyphs(GlyphFamily::Source, Split::Train, (6, 4));
        let norm = Normalization::for_dataset(&ds);
        let mut m = desk_model();
        let tree = SeedTree::new(1);
        let sib = m.clone_frozen(&tree);
        // forward equality at clone time
        let batch = make_batch::<f32>(&ds, &[0, 1], &norm, None, None);
        let x = Tensor::constant(batch.inputs);
        let a = m.forward(&x, Mode::Eval).unwrap().array();
        let b = sib.forward(&x, Mode::Eval).unwrap().array();
        assert_eq!(a, b);
        let sum_before = sib.checksum();

        // train the student some steps
        let cfg = PretrainConfig {
            epochs: 2,
            lr: 0.05,
            batch_size: 16,
            probe_size: 8,
            ..Default::default()
        };
        pretrain_supervised(&mut m, &ds, 2, &cfg, &tree).unwrap();
        assert_eq!(sib.checksum(), sum_before, "sibling changed during training");

        // clone of clone equals clone
        let sib2 = sib.clone_frozen(&tree);
        assert_eq!(sib2.checksum(), sum_before);
        assert!(sib2.params().is_empty());
    }

    #[test]
    fn pretraining_reduces_probe_loss() {
        let ds = synthetic_glyphs(GlyphFamily::Source, Split::Train, (24, 4));
        let mut m = desk_model();
        let cfg = PretrainConfig {
            epochs: 3,
            lr: 0.1,
            batch_size: 16,
            probe_size: 40,
            ..Default::default()
        };
        let report = pretrain_supervised(&mut m, &ds, 3, &cfg, &SeedTree::new(2)).unwrap();
        assert!(
            report.final_probe_loss < report.initial_probe_loss,
            "probe loss did not decrease: {:?}",
            report
        );
    }

    #[test]
    fn zero_epochs_is_identity() {
        let ds = synthetic_glyphs(GlyphFamily::Source, Split::Train, (6, 4));
        let mut m = desk_model();
        let before = m.checksum();
        let cfg = PretrainConfig::default();
        pretrain_supervised(&mut m, &ds, 0, &cfg, &SeedTree::new(3)).unwrap();
        assert_eq!(m.checksum(), before);
    }

    #[test]
    fn state_dict_round_trip() {
        let m = desk_model();
        let dict = m.state_dict();
        let mut other =
            LayeredBackbone::<f32>::build(ArchId::DeskCnn, (1, 20, 20), 10, &SeedTree::new(99));
        assert_ne!(other.checksum(), m.checksum());
        other.load_state_dict(&dict).unwrap();
        assert_eq!(other.checksum(), m.checksum());
    }
}
