//! Task-conditioned gating modules producing binary propagation masks over
//! sibling activations.
//!
//! Each tap layer owns one gate. A gate runs two branches on the sibling
//! activation: a bottleneck convolutional stack emitting a spatial map
//! `(b, 1, h, w)` and a pooled three-way linear head emitting a channel map
//! `(b, c, 1, 1)`. Their broadcast sum is binarized by a two-outcome
//! Gumbel-Softmax with straight-through gradients. Batch-normalization and
//! linear weights are held in per-task banks; convolutions are shared.

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Linear, Mode};
use crate::rng::SeedTree;
use crate::scalar::Scalar;
use crate::tensor::{ConvSpec, Tensor};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeMap;

/// Soft relaxation and hard {0,1} sample of a propagation mask.
///
/// `hard` is a straight-through node: its forward value is binary, its
/// gradient flows into the soft path.
pub struct MaskPair<S: Scalar> {
    pub soft: Tensor<S>,
    pub hard: Tensor<S>,
}

/// Binary Gumbel-Softmax sampling of `1[logit + G1 - G2 > 0]`.
///
/// Training mode draws two Gumbel noises per element and relaxes with a
/// sigmoid at `temperature`; evaluation thresholds deterministically.
pub fn gumbel_binarize<S: Scalar>(
    logit_map: &Tensor<S>,
    temperature: S,
    train_mode: bool,
    rng: &mut ChaCha12Rng,
) -> Result<MaskPair<S>> {
    if temperature <= S::zero() {
        return Err(Error::invalid(format!(
            "gumbel temperature must be positive, got {}",
            temperature
        )));
    }
    let soft = if train_mode {
        let shape = logit_map.shape();
        let count: usize = shape.iter().product();
        let mut draws = Vec::with_capacity(count);
        for _ in 0..count {
            let g1 = -(-(rng.gen_range(1e-12f64..1.0)).ln()).ln();
            let g2 = -(-(rng.gen_range(1e-12f64..1.0)).ln()).ln();
            draws.push(S::of_f64(g1 - g2));
        }
        let noise = ArrayD::from_shape_vec(IxDyn(&shape), draws).expect("noise shape");
        logit_map
            .add(&Tensor::constant(noise))
            .scale(S::one() / temperature)
            .sigmoid()
    } else {
        logit_map.sigmoid()
    };
    let half = S::of_f64(0.5);
    let hard_values = soft
        .value()
        .mapv(|p| if p > half { S::one() } else { S::zero() });
    let hard = soft.straight_through(hard_values);
    Ok(MaskPair { soft, hard })
}

// ---------------------------------------------------------------------------
// per-task parameter banks

struct SpatialBank<S: Scalar> {
    bns: [BatchNorm<S>; 3],
}

impl<S: Scalar> SpatialBank<S> {
    fn new(mid: usize) -> Self {
        SpatialBank {
            bns: [
                BatchNorm::new(mid, true),
                BatchNorm::new(mid, true),
                BatchNorm::new(mid, true),
            ],
        }
    }

    fn warm_copy(&self) -> Self {
        let copy = |bn: &BatchNorm<S>| {
            let fresh = BatchNorm::new(bn.channels(), true);
            fresh.gamma.set_value(bn.gamma.array());
            fresh.beta.set_value(bn.beta.array());
            *fresh.running_mean.borrow_mut() = bn.running_mean.borrow().clone();
            *fresh.running_var.borrow_mut() = bn.running_var.borrow().clone();
            fresh
        };
        SpatialBank {
            bns: [copy(&self.bns[0]), copy(&self.bns[1]), copy(&self.bns[2])],
        }
    }
}

struct ChannelBank<S: Scalar> {
    w1: Linear<S>,
    w2: Linear<S>,
    w3: Linear<S>,
    bn1: BatchNorm<S>,
    bn2: BatchNorm<S>,
}

impl<S: Scalar> ChannelBank<S> {
    fn new(channels: usize, rng: &mut ChaCha12Rng) -> Self {
        ChannelBank {
            w1: Linear::new(channels, channels, false, rng),
            w2: Linear::new(channels, channels, false, rng),
            w3: Linear::new(channels, channels, false, rng),
            bn1: BatchNorm::new(channels, false),
            bn2: BatchNorm::new(channels, false),
        }
    }

    fn warm_copy(&self, channels: usize) -> Self {
        let mut dummy = SeedTree::new(0).rng("unused");
        let fresh = ChannelBank::new(channels, &mut dummy);
        fresh.w1.weight.set_value(self.w1.weight.array());
        fresh.w2.weight.set_value(self.w2.weight.array());
        fresh.w3.weight.set_value(self.w3.weight.array());
        for (dst, src) in [(&fresh.bn1, &self.bn1), (&fresh.bn2, &self.bn2)] {
            dst.gamma.set_value(src.gamma.array());
            dst.beta.set_value(src.beta.array());
            *dst.running_mean.borrow_mut() = src.running_mean.borrow().clone();
            *dst.running_var.borrow_mut() = src.running_var.borrow().clone();
        }
        fresh
    }
}

// ---------------------------------------------------------------------------
// the gate

/// Gate for one tap layer; holds lazily grown per-task banks.
pub struct AttentionGate<S: Scalar> {
    channels: usize,
    mid: usize,
    conv_a: Conv2d<S>,  // 1x1, c -> c/4
    conv_b1: Conv2d<S>, // 3x3 dilation 2, c/4 -> c/4
    conv_b2: Conv2d<S>,
    conv_c: Conv2d<S>, // 1x1, c/4 -> 1
    spatial_banks: Vec<SpatialBank<S>>,
    channel_banks: Vec<ChannelBank<S>>,
    pub gumbel_temperature: S,
    seeds: SeedTree,
}

impl<S: Scalar> AttentionGate<S> {
    pub fn new(channels: usize, gumbel_temperature: S, seeds: SeedTree) -> Self {
        let mid = (channels / 4).max(1);
        let mut rng = seeds.rng("gate_init");
        let conv_c = Conv2d::new(mid, 1, 1, ConvSpec::new(1, 0, 1), true, &mut rng);
        // bias the head toward propagation so early distillation sees
        // mostly-on masks rather than a cold start at 50%
        if let Some(b) = &conv_c.bias {
            b.set_value(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1]), S::of_f64(1.0)));
        }
        AttentionGate {
            channels,
            mid,
            conv_a: Conv2d::new(channels, mid, 1, ConvSpec::new(1, 0, 1), false, &mut rng),
            conv_b1: Conv2d::new(mid, mid, 3, ConvSpec::new(1, 2, 2), false, &mut rng),
            conv_b2: Conv2d::new(mid, mid, 3, ConvSpec::new(1, 2, 2), false, &mut rng),
            conv_c,
            spatial_banks: Vec::new(),
            channel_banks: Vec::new(),
            gumbel_temperature,
            seeds,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_tasks(&self) -> usize {
        self.channel_banks.len()
    }

    /// Create banks for task ids up to `task`, warm-starting each new bank
    /// from its predecessor.
    pub fn ensure_task(&mut self, task: usize) {
        while self.channel_banks.len() <= task {
            let idx = self.channel_banks.len();
            if idx == 0 {
                let mut rng = self.seeds.rng_indexed("channel_bank", 0);
                self.spatial_banks.push(SpatialBank::new(self.mid));
                self.channel_banks.push(ChannelBank::new(self.channels, &mut rng));
            } else {
                self.spatial_banks
                    .push(self.spatial_banks[idx - 1].warm_copy());
                self.channel_banks
                    .push(self.channel_banks[idx - 1].warm_copy(self.channels));
            }
        }
    }

    fn check_input(&self, h_hat: &Tensor<S>, task: usize) -> Result<()> {
        let s = h_hat.shape();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::shape(format!(
                "gate expects (b, {}, h, w), got {:?}",
                self.channels, s
            )));
        }
        if task >= self.channel_banks.len() {
            return Err(Error::invalid(format!(
                "gate has no bank for task {} (have {})",
                task,
                self.channel_banks.len()
            )));
        }
        Ok(())
    }

    /// Bottleneck conv stack -> `(b, 1, h, w)` logits.
    pub fn spatial_attention(&self, h_hat: &Tensor<S>, task: usize, mode: Mode) -> Result<Tensor<S>> {
        self.check_input(h_hat, task)?;
        let bank = &self.spatial_banks[task];
        let h = self.conv_a.forward(h_hat);
        let h = bank.bns[0].forward(&h, mode).relu();
        let h = self.conv_b1.forward(&h);
        let h = bank.bns[1].forward(&h, mode).relu();
        let h = self.conv_b2.forward(&h);
        let h = bank.bns[2].forward(&h, mode).relu();
        Ok(self.conv_c.forward(&h))
    }

    /// Pooled three-way linear head -> `(b, c, 1, 1)` logits:
    /// `tanh(BN(W1ᵀg)) · σ(BN(W2ᵀg)) + W3ᵀg` with `g = GAP(h_hat)`.
    pub fn channel_attention(&self, h_hat: &Tensor<S>, task: usize, mode: Mode) -> Result<Tensor<S>> {
        self.check_input(h_hat, task)?;
        let bank = &self.channel_banks[task];
        let g = h_hat.gap(); // (b, c)
        let gated = bank
            .bn1
            .forward(&bank.w1.forward(&g), mode)
            .tanh()
            .mul(&bank.bn2.forward(&bank.w2.forward(&g), mode).sigmoid());
        let out = gated.add(&bank.w3.forward(&g));
        let b = out.shape()[0];
        Ok(out.reshape(&[b, self.channels, 1, 1]))
    }

    /// Full mask: broadcast-sum of channel and spatial logits over
    /// `(b, c, h, w)`, then Gumbel binarization.
    pub fn attention_mask(
        &self,
        h_hat: &Tensor<S>,
        task: usize,
        train_mode: bool,
        rng: &mut ChaCha12Rng,
    ) -> Result<MaskPair<S>> {
        let mode = if train_mode { Mode::Train } else { Mode::Eval };
        let ch = self.channel_attention(h_hat, task, mode)?;
        let sp = self.spatial_attention(h_hat, task, mode)?;
        let logits = ch.add(&sp);
        gumbel_binarize(&logits, self.gumbel_temperature, train_mode, rng)
    }

    /// All trainable parameters across shared convs and every bank.
    pub fn params(&self) -> Vec<Tensor<S>> {
        let mut p = Vec::new();
        p.extend(self.conv_a.params());
        p.extend(self.conv_b1.params());
        p.extend(self.conv_b2.params());
        p.extend(self.conv_c.params());
        for bank in &self.spatial_banks {
            for bn in &bank.bns {
                p.extend(bn.params());
            }
        }
        for bank in &self.channel_banks {
            p.extend(bank.w1.params());
            p.extend(bank.w2.params());
            p.extend(bank.w3.params());
            p.extend(bank.bn1.params());
            p.extend(bank.bn2.params());
        }
        p
    }

    /// Parameters belonging to one task's banks only.
    pub fn task_params(&self, task: usize) -> Vec<Tensor<S>> {
        let mut p = Vec::new();
        if let Some(bank) = self.spatial_banks.get(task) {
            for bn in &bank.bns {
                p.extend(bn.params());
            }
        }
        if let Some(bank) = self.channel_banks.get(task) {
            p.extend(bank.w1.params());
            p.extend(bank.w2.params());
            p.extend(bank.w3.params());
            p.extend(bank.bn1.params());
            p.extend(bank.bn2.params());
        }
        p
    }

    fn named_state(&self, prefix: &str) -> BTreeMap<String, ArrayD<S>> {
        let mut out = BTreeMap::new();
        let convs = [
            ("conv_a", &self.conv_a),
            ("conv_b1", &self.conv_b1),
            ("conv_b2", &self.conv_b2),
            ("conv_c", &self.conv_c),
        ];
        for (name, conv) in convs {
            out.insert(format!("{}.{}.weight", prefix, name), conv.weight.array());
            if let Some(b) = &conv.bias {
                out.insert(format!("{}.{}.bias", prefix, name), b.array());
            }
        }
        for (t, bank) in self.spatial_banks.iter().enumerate() {
            for (i, bn) in bank.bns.iter().enumerate() {
                let p = format!("{}.task{}.sp_bn{}", prefix, t, i);
                out.insert(format!("{}.gamma", p), bn.gamma.array());
                out.insert(format!("{}.beta", p), bn.beta.array());
                out.insert(format!("{}.running_mean", p), bn.running_mean.borrow().clone());
                out.insert(format!("{}.running_var", p), bn.running_var.borrow().clone());
            }
        }
        for (t, bank) in self.channel_banks.iter().enumerate() {
            let p = format!("{}.task{}", prefix, t);
            out.insert(format!("{}.w1", p), bank.w1.weight.array());
            out.insert(format!("{}.w2", p), bank.w2.weight.array());
            out.insert(format!("{}.w3", p), bank.w3.weight.array());
            for (i, bn) in [&bank.bn1, &bank.bn2].into_iter().enumerate() {
                let q = format!("{}.ch_bn{}", p, i + 1);
                out.insert(format!("{}.gamma", q), bn.gamma.array());
                out.insert(format!("{}.beta", q), bn.beta.array());
                out.insert(format!("{}.running_mean", q), bn.running_mean.borrow().clone());
                out.insert(format!("{}.running_var", q), bn.running_var.borrow().clone());
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// per-layer gate set

/// One gate per tap layer.
pub struct GateSet<S: Scalar> {
    pub gates: Vec<AttentionGate<S>>,
}

impl<S: Scalar> GateSet<S> {
    pub fn new(tap_shapes: &[(usize, usize, usize)], gumbel_temperature: S, tree: &SeedTree) -> Self {
        let gates = tap_shapes
            .iter()
            .enumerate()
            .map(|(l, &(c, _, _))| {
                AttentionGate::new(c, gumbel_temperature, tree.child(&format!("gate{}", l)))
            })
            .collect();
        GateSet { gates }
    }

    pub fn ensure_task(&mut self, task: usize) {
        for g in &mut self.gates {
            g.ensure_task(task);
        }
    }

    pub fn num_layers(&self) -> usize {
        self.gates.len()
    }

    pub fn params(&self) -> Vec<Tensor<S>> {
        self.gates.iter().flat_map(|g| g.params()).collect()
    }

    /// Serialized state keyed by layer index and task id.
    pub fn state_dict(&self) -> BTreeMap<String, ArrayD<S>> {
        let mut out = BTreeMap::new();
        for (l, gate) in self.gates.iter().enumerate() {
            out.extend(gate.named_state(&format!("gate{}", l)));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn randn(shape: &[usize], rng: &mut ChaCha12Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| {
            let u1: f64 = rng.gen_range(1e-9..1.0);
            let u2: f64 = rng.gen::<f64>();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
    }

    fn gate64(channels: usize) -> AttentionGate<f64> {
        let mut g = AttentionGate::new(channels, 1.0, SeedTree::new(42));
        g.ensure_task(0);
        g
    }

    #[test]
    fn spatial_map_shape() {
        let g = gate64(64);
        let mut rng = SeedTree::new(0).rng("x");
        let x = Tensor::constant(randn(&[2, 64, 8, 8], &mut rng));
        let m = g.spatial_attention(&x, 0, Mode::Train).unwrap();
        assert_eq!(m.shape(), vec![2, 1, 8, 8]);
    }

    #[test]
    fn channel_map_shape() {
        let g = gate64(64);
        let mut rng = SeedTree::new(1).rng("x");
        let x = Tensor::constant(randn(&[2, 64, 8, 8], &mut rng));
        let m = g.channel_attention(&x, 0, Mode::Train).unwrap();
        assert_eq!(m.shape(), vec![2, 64, 1, 1]);
    }

    #[test]
    fn channel_mismatch_is_error() {
        let g = gate64(16);
        let x = Tensor::constant(ArrayD::<f64>::zeros(IxDyn(&[2, 8, 4, 4])));
        assert!(g.spatial_attention(&x, 0, Mode::Train).is_err());
        assert!(g.channel_attention(&x, 0, Mode::Train).is_err());
    }

    #[test]
    fn zeroed_final_conv_gives_zero_spatial_map() {
        let g = gate64(8);
        g.conv_c.weight.set_value(ArrayD::zeros(IxDyn(&[1, 2, 1, 1])));
        if let Some(b) = &g.conv_c.bias {
            b.set_value(ArrayD::zeros(IxDyn(&[1])));
        }
        let x = Tensor::constant(ArrayD::<f64>::zeros(IxDyn(&[2, 8, 6, 6])));
        let m = g.spatial_attention(&x, 0, Mode::Train).unwrap();
        assert!(m.array().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_branch_identity_reduces_channel_map_to_gap() {
        let g = gate64(4);
        let bank_shape = &[4usize, 4];
        g.channel_banks[0]
            .w1
            .weight
            .set_value(ArrayD::zeros(IxDyn(bank_shape)));
        g.channel_banks[0]
            .w2
            .weight
            .set_value(ArrayD::zeros(IxDyn(bank_shape)));
        let eye = ArrayD::from_shape_fn(IxDyn(bank_shape), |ix| {
            if ix[0] == ix[1] {
                1.0
            } else {
                0.0
            }
        });
        g.channel_banks[0].w3.weight.set_value(eye);
        let mut rng = SeedTree::new(2).rng("x");
        let x = Tensor::constant(randn(&[3, 4, 5, 5], &mut rng));
        let out = g.channel_attention(&x, 0, Mode::Train).unwrap();
        let gap = x.gap().array();
        let out2 = out.array().into_shape_with_order(IxDyn(&[3, 4])).unwrap();
        let diff = (&out2 - &gap).mapv(f64::abs).sum();
        assert!(diff < 1e-12, "diff {}", diff);
    }

    #[test]
    fn zero_input_zero_channel_map_with_biasfree_w3() {
        let g = gate64(4);
        let x = Tensor::constant(ArrayD::<f64>::zeros(IxDyn(&[2, 4, 3, 3])));
        let out = g.channel_attention(&x, 0, Mode::Eval).unwrap();
        // tanh(BN(0))·σ(BN(0)) contributes tanh(β1)·σ(β2) = 0 at β=0 init; W3ᵀ0 = 0
        assert!(out.array().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn gumbel_eval_saturation() {
        let mut rng = SeedTree::new(3).rng("g");
        let hi = Tensor::constant(ArrayD::from_elem(IxDyn(&[4]), 10.0_f64));
        let lo = Tensor::constant(ArrayD::from_elem(IxDyn(&[4]), -10.0_f64));
        let mp = gumbel_binarize(&hi, 1.0, false, &mut rng).unwrap();
        assert!(mp.hard.array().iter().all(|&v| v == 1.0));
        assert!(mp.soft.array().iter().all(|&p| (p - 0.9999546).abs() < 1e-4));
        let mp = gumbel_binarize(&lo, 1.0, false, &mut rng).unwrap();
        assert!(mp.hard.array().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gumbel_train_mean_is_half_at_zero_logit() {
        let mut rng = SeedTree::new(4).rng("g");
        let logits = Tensor::constant(ArrayD::<f64>::zeros(IxDyn(&[10_000])));
        let mp = gumbel_binarize(&logits, 1.0, true, &mut rng).unwrap();
        let mean = mp.hard.array().sum() / 10_000.0;
        assert!((mean - 0.5).abs() < 0.02, "mean {}", mean);
        assert!(mp
            .hard
            .array()
            .iter()
            .all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn gumbel_rejects_bad_temperature() {
        let mut rng = SeedTree::new(5).rng("g");
        let x = Tensor::constant(ArrayD::<f64>::zeros(IxDyn(&[2])));
        assert!(gumbel_binarize(&x, 0.0, true, &mut rng).is_err());
        assert!(gumbel_binarize(&x, -1.0, true, &mut rng).is_err());
    }

    #[test]
    fn straight_through_matches_soft_path_fd() {
        // d loss(hard)/d logit must equal finite differences of loss(soft).
        let rng0 = SeedTree::new(6).rng("noise");
        let mut vals_rng = SeedTree::new(7).rng("x");
        let logits = Tensor::leaf(randn(&[10], &mut vals_rng));
        let weights = Tensor::constant(randn(&[10], &mut vals_rng));
        let temp = 0.7;

        let loss_hard = |rng: &mut ChaCha12Rng| {
            let mp = gumbel_binarize(&logits, temp, true, rng).unwrap();
            mp.hard.mul(&weights).sum_all()
        };
        let loss_soft = |l: &Tensor<f64>, rng: &mut ChaCha12Rng| {
            let mp = gumbel_binarize(l, temp, true, rng).unwrap();
            mp.soft.mul(&weights).sum_all().item()
        };

        loss_hard(&mut rng0.clone()).backward();
        let ad = logits.grad().unwrap();

        let eps = 1e-6;
        let mut fd = ArrayD::<f64>::zeros(IxDyn(&[10]));
        for i in 0..10 {
            let orig = logits.array()[[i]];
            logits.update_value(|v| v[[i]] = orig + eps);
            let lp = loss_soft(&logits, &mut rng0.clone());
            logits.update_value(|v| v[[i]] = orig - eps);
            let lm = loss_soft(&logits, &mut rng0.clone());
            logits.update_value(|v| v[[i]] = orig);
            fd[[i]] = (lp - lm) / (2.0 * eps);
        }
        let num = (&ad - &fd).mapv(|x| x * x).sum().sqrt();
        let den = fd.mapv(|x: f64| x * x).sum().sqrt().max(1e-12);
        assert!(num / den < 1e-2, "rel err {}", num / den);
    }

    #[test]
    fn mask_broadcast_shape_and_saturation() {
        let mut g = AttentionGate::<f64>::new(8, 1.0, SeedTree::new(8));
        g.ensure_task(0);
        let mut rng = SeedTree::new(9).rng("m");
        let x = Tensor::constant(randn(&[2, 8, 6, 6], &mut rng));
        let mp = g.attention_mask(&x, 0, true, &mut rng).unwrap();
        assert_eq!(mp.soft.shape(), vec![2, 8, 6, 6]);
        assert_eq!(mp.hard.shape(), vec![2, 8, 6, 6]);
        assert!(mp.hard.array().iter().all(|&v| v == 0.0 || v == 1.0));

        // force both branches deeply negative -> hard all-zero in eval mode
        let driven = Tensor::constant(ArrayD::from_elem(IxDyn(&[2, 8, 6, 6]), -10.0_f64))
            .add(&Tensor::constant(ArrayD::from_elem(IxDyn(&[2, 1, 6, 6]), -10.0_f64)));
        let mp = gumbel_binarize(&driven, 1.0, false, &mut rng).unwrap();
        assert!(mp.hard.array().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn task_isolation_is_bitwise() {
        let mut g = AttentionGate::<f64>::new(8, 1.0, SeedTree::new(10));
        g.ensure_task(1);
        let mut rng = SeedTree::new(11).rng("x");
        let x = Tensor::constant(randn(&[2, 8, 5, 5], &mut rng));
        let before_t0_sp = g.spatial_attention(&x, 0, Mode::Eval).unwrap().array();
        let before_t0_ch = g.channel_attention(&x, 0, Mode::Eval).unwrap().array();
        // perturb every task-1 conditioned parameter
        for p in g.task_params(1) {
            p.update_value(|v| v.mapv_inplace(|x| x + 0.37));
        }
        let after_t0_sp = g.spatial_attention(&x, 0, Mode::Eval).unwrap().array();
        let after_t0_ch = g.channel_attention(&x, 0, Mode::Eval).unwrap().array();
        assert_eq!(before_t0_sp, after_t0_sp);
        assert_eq!(before_t0_ch, after_t0_ch);
        // and task 1's own output moved (non-degeneracy)
        let t1 = g.channel_attention(&x, 1, Mode::Eval).unwrap().array();
        assert_ne!(t1, before_t0_ch);
    }

    #[test]
    fn warm_start_copies_previous_bank() {
        let mut g = AttentionGate::<f64>::new(4, 1.0, SeedTree::new(12));
        g.ensure_task(0);
        for p in g.task_params(0) {
            p.update_value(|v| v.mapv_inplace(|x| x + 0.11));
        }
        g.ensure_task(1);
        let mut rng = SeedTree::new(13).rng("x");
        let x = Tensor::constant(randn(&[2, 4, 3, 3], &mut rng));
        let a = g.channel_attention(&x, 0, Mode::Eval).unwrap().array();
        let b = g.channel_attention(&x, 1, Mode::Eval).unwrap().array();
        assert_eq!(a, b);
    }
}
