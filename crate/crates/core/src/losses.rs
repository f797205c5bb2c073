//! Objective terms: margin-ReLU masked feature distillation, mask-replay
//! distillation, diversity regularization, logits replay, the quadratic
//! Fisher anchor, and the overall training objective.
//!
//! Reduction conventions, fixed so configured weights transfer across
//! implementations: sum over feature/logit dimensions, mean over the batch,
//! sum over tap layers.

use crate::attention::{GateSet, MaskPair};
use crate::backbone::LayeredBackbone;
use crate::benchmark::{make_batch, ImageDataset, Normalization};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use ndarray::{Array1, ArrayD, IxDyn};
use rand_chacha::ChaCha12Rng;

// ---------------------------------------------------------------------------
// weights

/// Scalar weights of the composite objective.
#[derive(Debug, Clone)]
pub struct LossWeights<S: Scalar> {
    /// Logits-replay weight.
    pub alpha: S,
    /// Label-replay weight.
    pub beta: S,
    /// Diversity weight.
    pub lambda_aux: S,
    /// Feature-propagation weight (masked distillation term).
    pub lambda_fp: S,
    /// Mask-replay BCE weight.
    pub lambda_fp_replay: S,
    /// Diversity temperature.
    pub temperature_aux: S,
    /// Quadratic Fisher-anchor weight.
    pub ewc_lambda: S,
}

impl<S: Scalar> LossWeights<S> {
    pub fn validate(&self) -> Result<()> {
        let named: [(&str, S); 6] = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda_aux", self.lambda_aux),
            ("lambda_fp", self.lambda_fp),
            ("lambda_fp_replay", self.lambda_fp_replay),
            ("ewc_lambda", self.ewc_lambda),
        ];
        for (name, v) in named {
            if v < S::zero() || !v.as_f64().is_finite() {
                return Err(Error::config(format!("{} must be non-negative", name)));
            }
        }
        if self.temperature_aux <= S::zero() {
            return Err(Error::config("temperature_aux must be positive"));
        }
        Ok(())
    }

    pub fn zeros() -> Self {
        LossWeights {
            alpha: S::zero(),
            beta: S::zero(),
            lambda_aux: S::zero(),
            lambda_fp: S::zero(),
            lambda_fp_replay: S::zero(),
            temperature_aux: S::one(),
            ewc_lambda: S::zero(),
        }
    }
}

// ---------------------------------------------------------------------------
// margins

/// Per-layer, per-channel non-positive margins applied to sibling taps.
#[derive(Debug, Clone)]
pub struct ChannelMargins<S: Scalar> {
    pub layers: Vec<Array1<S>>,
}

impl<S: Scalar> ChannelMargins<S> {
    pub fn new(layers: Vec<Array1<S>>) -> Result<Self> {
        for (l, m) in layers.iter().enumerate() {
            if m.iter().any(|v| !v.as_f64().is_finite() || *v > S::zero()) {
                return Err(Error::invalid(format!(
                    "margins of layer {} must be finite and non-positive",
                    l
                )));
            }
        }
        Ok(ChannelMargins { layers })
    }

    /// All-zero margins (plain ReLU floor) for the given channel counts.
    pub fn zeros(channels: &[usize]) -> Self {
        ChannelMargins {
            layers: channels.iter().map(|&c| Array1::zeros(c)).collect(),
        }
    }

    pub fn layer(&self, l: usize) -> &Array1<S> {
        &self.layers[l]
    }

    fn layer_floor(&self, l: usize) -> ArrayD<S> {
        let c = self.layers[l].len();
        self.layers[l]
            .clone()
            .into_shape_with_order(IxDyn(&[1, c, 1, 1]))
            .expect("margin reshape")
    }
}

/// Mean negative response per channel of the sibling's taps, estimated over
/// one pass of the given examples.
pub fn estimate_margins<S: Scalar>(
    sibling: &LayeredBackbone<S>,
    dataset: &ImageDataset,
    indices: &[u32],
    norm: &Normalization,
    batch_size: usize,
) -> Result<ChannelMargins<S>> {
    let l = sibling.num_taps();
    let mut neg_sum: Vec<Vec<f64>> = sibling
        .tap_shapes
        .iter()
        .map(|&(c, _, _)| vec![0.0; c])
        .collect();
    let mut neg_count: Vec<Vec<u64>> = sibling
        .tap_shapes
        .iter()
        .map(|&(c, _, _)| vec![0; c])
        .collect();
    for chunk in indices.chunks(batch_size) {
        let batch = make_batch::<S>(dataset, chunk, norm, None, None);
        let (_, taps) = sibling.forward_with_taps(&Tensor::constant(batch.inputs), Mode::Eval)?;
        for (li, tap) in taps.iter().enumerate() {
            let v = tap.value();
            let c = v.shape()[1];
            for ci in 0..c {
                for &x in v.index_axis(ndarray::Axis(1), ci).iter() {
                    let x = x.as_f64();
                    if x < 0.0 {
                        neg_sum[li][ci] += x;
                        neg_count[li][ci] += 1;
                    }
                }
            }
        }
    }
    let layers = (0..l)
        .map(|li| {
            Array1::from_iter(neg_sum[li].iter().zip(neg_count[li].iter()).map(
                |(&s, &n)| {
                    if n == 0 {
                        S::zero()
                    } else {
                        S::of_f64(s / n as f64)
                    }
                },
            ))
        })
        .collect();
    ChannelMargins::new(layers)
}

/// Elementwise `max(x, m_c)` with per-channel margins.
pub fn margin_relu<S: Scalar>(x: &Tensor<S>, margins: &Array1<S>) -> Tensor<S> {
    let c = x.shape()[1];
    debug_assert_eq!(c, margins.len(), "margin channel mismatch");
    let floor = margins
        .clone()
        .into_shape_with_order(IxDyn(&[1, c, 1, 1]))
        .expect("margin reshape");
    x.max_with(&floor)
}

// ---------------------------------------------------------------------------
// masked feature distillation

/// `mean_batch( sum_elems( mask ⊙ (h − margin_relu(ĥ)) )² )`.
pub fn masked_feature_distillation<S: Scalar>(
    h: &Tensor<S>,
    h_hat: &Tensor<S>,
    hard_mask: &Tensor<S>,
    margins: &Array1<S>,
) -> Result<Tensor<S>> {
    if h.shape() != h_hat.shape() || h.shape() != hard_mask.shape() {
        return Err(Error::shape(format!(
            "distillation inputs disagree: {:?} vs {:?} vs {:?}",
            h.shape(),
            h_hat.shape(),
            hard_mask.shape()
        )));
    }
    let target = margin_relu(h_hat, margins);
    let masked = hard_mask.mul(&h.sub(&target));
    Ok(masked.mul(&masked).sum_axes(&[1, 2, 3]).mean_all())
}

/// Per-element binary cross entropy of a soft mask probability against a
/// stored hard mask, summed over elements and averaged over the batch.
/// Probabilities are clamped away from {0, 1}.
pub fn mask_replay_bce<S: Scalar>(soft: &Tensor<S>, stored_hard: &ArrayD<S>) -> Result<Tensor<S>> {
    if soft.shape() != stored_hard.shape() {
        return Err(Error::shape(format!(
            "bce shapes disagree: {:?} vs {:?}",
            soft.shape(),
            stored_hard.shape()
        )));
    }
    let eps = S::of_f64(1e-6);
    let p = soft.clamp(eps, S::one() - eps);
    let m = Tensor::constant(stored_hard.clone());
    let ones = Tensor::constant(ArrayD::from_elem(IxDyn(&soft.shape()), S::one()));
    let per_elem = m
        .mul(&p.ln())
        .add(&ones.sub(&m).mul(&ones.sub(&p).ln()))
        .neg();
    Ok(per_elem.sum_axes(&[1, 2, 3]).mean_all())
}

// ---------------------------------------------------------------------------
// feature propagation (current + replay)

/// Taps of the current-task batch through both networks.
pub struct FpCurrent<'a, S: Scalar> {
    pub student_taps: &'a [Tensor<S>],
    pub sibling_taps: &'a [Tensor<S>],
    pub task: usize,
}

/// Taps of the replay batch plus the masks stored at insertion time,
/// restored to tap resolution (layer-major, `(b, c, h, w)`).
pub struct FpReplay<'a, S: Scalar> {
    pub student_taps: &'a [Tensor<S>],
    pub sibling_taps: &'a [Tensor<S>],
    pub tasks: &'a [usize],
    pub stored_masks: Option<&'a [ArrayD<S>]>,
}

pub struct FpOutput<S: Scalar> {
    pub loss: Tensor<S>,
    /// The masks freshly sampled for the current batch, reused by the
    /// diversity term and stored into the buffer.
    pub current_masks: Vec<MaskPair<S>>,
    /// Unweighted scalar values of the two terms, for logging.
    pub distill_value: f64,
    pub bce_value: f64,
}

/// Feature-propagation objective: attention-masked distillation over the
/// union of current and replay items, plus a BCE replaying stored masks.
/// Masks are sampled per item with that item's task conditioning.
pub fn fp_loss<S: Scalar>(
    gates: &GateSet<S>,
    current: &FpCurrent<'_, S>,
    replay: Option<&FpReplay<'_, S>>,
    margins: &ChannelMargins<S>,
    weights: &LossWeights<S>,
    train_mode: bool,
    rng: &mut ChaCha12Rng,
) -> Result<FpOutput<S>> {
    let layers = gates.num_layers();
    if current.student_taps.len() != layers || current.sibling_taps.len() != layers {
        return Err(Error::shape("tap count differs from gate count".to_string()));
    }
    let b_cur = current.student_taps[0].shape()[0];
    let b_rep = replay.map_or(0, |r| r.tasks.len());
    if let Some(r) = replay {
        if b_rep > 0 && r.stored_masks.is_none() {
            return Err(Error::invalid(
                "replay items lack stored attention masks".to_string(),
            ));
        }
    }

    let mut distill = Tensor::scalar(S::zero());
    let mut bce = Tensor::scalar(S::zero());
    let mut current_masks = Vec::with_capacity(layers);
    let union = S::from_count(b_cur + b_rep);

    for l in 0..layers {
        let gate = &gates.gates[l];
        let floor = margins.layer_floor(l);

        // current batch: one group, conditioned on the current task. The
        // sampled mask enters the distillation as a constant selector; gates
        // are shaped by the diversity and mask-replay terms, otherwise the
        // distillation trivially minimizes itself by gating everything off.
        let mask_cur = gate.attention_mask(&current.sibling_taps[l], current.task, train_mode, rng)?;
        let target = current.sibling_taps[l].max_with(&floor);
        let diff = mask_cur.hard.detach().mul(&current.student_taps[l].sub(&target));
        distill = distill.add(&diff.mul(&diff).sum_all().scale(S::one() / union));
        current_masks.push(mask_cur);

        // replay groups, one per distinct stored task id (ascending)
        if let Some(r) = replay {
            if b_rep > 0 {
                let masks_l = &r.stored_masks.expect("checked above")[l];
                let mut task_ids: Vec<usize> = r.tasks.to_vec();
                task_ids.sort_unstable();
                task_ids.dedup();
                for t in task_ids {
                    let rows: Vec<usize> = r
                        .tasks
                        .iter()
                        .enumerate()
                        .filter(|(_, &ti)| ti == t)
                        .map(|(i, _)| i)
                        .collect();
                    let sib = r.sibling_taps[l].select_rows(&rows);
                    let stu = r.student_taps[l].select_rows(&rows);
                    let mp = gate.attention_mask(&sib, t, train_mode, rng)?;
                    let target = sib.max_with(&floor);
                    let diff = mp.hard.detach().mul(&stu.sub(&target));
                    distill = distill.add(&diff.mul(&diff).sum_all().scale(S::one() / union));

                    let stored = masks_l.select(ndarray::Axis(0), &rows);
                    let group_bce = mask_replay_bce(&mp.soft, &stored.into_dyn())?;
                    // re-weight the group mean into a batch mean
                    let w = S::from_count(rows.len()) / S::from_count(b_rep);
                    bce = bce.add(&group_bce.scale(w));
                }
            }
        }
    }

    let distill_value = distill.item().as_f64();
    let bce_value = bce.item().as_f64();
    let loss = distill
        .scale(weights.lambda_fp)
        .add(&bce.scale(weights.lambda_fp_replay));
    Ok(FpOutput {
        loss,
        current_masks,
        distill_value,
        bce_value,
    })
}

// ---------------------------------------------------------------------------
// diversity

/// Contrastive diversity penalty over per-example mask signatures.
///
/// For each layer, `g_j` is the L2-normalized GAP of example `j`'s mask; the
/// loss is `-λ Σ_l Σ_j log( exp(g_jᵀg_j/T) / ((1/n) Σ_k exp(g_jᵀg_k/T)) )`.
/// Always ≤ 0; equals 0 iff all signatures in a layer coincide.
pub fn aux_diversity_loss<S: Scalar>(
    masks_per_layer: &[Tensor<S>],
    temperature: S,
    lambda_aux: S,
) -> Result<Tensor<S>> {
    if temperature <= S::zero() {
        return Err(Error::invalid("diversity temperature must be positive"));
    }
    let mut total = Tensor::scalar(S::zero());
    for mask in masks_per_layer {
        let n = mask.shape()[0];
        if n < 2 {
            return Err(Error::invalid(format!(
                "diversity loss needs a batch of ≥ 2, got {}",
                n
            )));
        }
        let g = mask.gap(); // (n, c)
        let norm = g
            .mul(&g)
            .sum_axes(&[1])
            .add_scalar(S::of_f64(1e-24))
            .sqrt();
        let gn = g.div(&norm);
        let sims = gn.matmul(&gn.transpose2d()).scale(S::one() / temperature); // (n, n)
        let eye = ArrayD::from_shape_fn(IxDyn(&[n, n]), |ix| {
            if ix[0] == ix[1] {
                S::one()
            } else {
                S::zero()
            }
        });
        let diag = sims.mul(&Tensor::constant(eye)).sum_axes(&[1]); // (n, 1)
        let denom = sims.exp().mean_axes(&[1]).ln(); // (n, 1)
        total = total.add(&diag.sub(&denom).sum_all());
    }
    Ok(total.scale(-lambda_aux))
}

// ---------------------------------------------------------------------------
// logits/labels replay

/// `α · mean_batch ‖f(x) − l‖₂² + β · mean cross-entropy(y, f(x))`.
pub fn cl_replay_loss<S: Scalar>(
    model_logits: &Tensor<S>,
    stored_logits: &ArrayD<S>,
    labels: &[usize],
    alpha: S,
    beta: S,
) -> Result<Tensor<S>> {
    if model_logits.shape() != stored_logits.shape() {
        return Err(Error::shape(format!(
            "logit dims disagree: {:?} vs {:?}",
            model_logits.shape(),
            stored_logits.shape()
        )));
    }
    let diff = model_logits.sub(&Tensor::constant(stored_logits.clone()));
    let mse = diff.mul(&diff).sum_axes(&[1]).mean_all();
    let ce = model_logits.cross_entropy_mean(labels);
    Ok(mse.scale(alpha).add(&ce.scale(beta)))
}

// ---------------------------------------------------------------------------
// Fisher information and the quadratic anchor

/// Diagonal empirical Fisher: mean of squared per-sample gradients of the
/// log-likelihood. `sample_loss(i)` must build the negative log-likelihood of
/// sample `i` as a scalar graph over `params`.
pub fn estimate_fisher_diag<S: Scalar>(
    params: &[Tensor<S>],
    num_samples: usize,
    mut sample_loss: impl FnMut(usize) -> Result<Tensor<S>>,
) -> Result<Vec<ArrayD<S>>> {
    if num_samples == 0 {
        return Err(Error::invalid("fisher estimation needs at least one sample"));
    }
    let mut acc: Vec<ArrayD<S>> = params
        .iter()
        .map(|p| ArrayD::zeros(IxDyn(&p.shape())))
        .collect();
    for i in 0..num_samples {
        for p in params {
            p.zero_grad();
        }
        let loss = sample_loss(i)?;
        loss.backward();
        for (a, p) in acc.iter_mut().zip(params.iter()) {
            if let Some(g) = p.grad() {
                ndarray::azip!((ai in a, &gi in &g) *ai += gi * gi);
            }
        }
    }
    for p in params {
        p.zero_grad();
    }
    let n = S::from_count(num_samples);
    for a in acc.iter_mut() {
        a.mapv_inplace(|v| v / n);
    }
    Ok(acc)
}

/// Fisher diagonal of a classifier under cross-entropy, over up to
/// `num_batches * batch_size` examples of `dataset` (one sample at a time).
pub fn fisher_for_backbone<S: Scalar>(
    model: &LayeredBackbone<S>,
    dataset: &ImageDataset,
    norm: &Normalization,
    indices: &[u32],
    num_samples: usize,
) -> Result<Vec<ArrayD<S>>> {
    if indices.is_empty() {
        return Err(Error::invalid("fisher estimation on empty dataset"));
    }
    let params = model.params();
    let n = num_samples.min(indices.len());
    estimate_fisher_diag(&params, n, |i| {
        let batch = make_batch::<S>(dataset, &indices[i..i + 1], norm, None, None);
        let logits = model.forward(&Tensor::constant(batch.inputs), Mode::Eval)?;
        Ok(logits.cross_entropy_mean(&batch.labels))
    })
}

/// `λ Σ_p F_p (θ_p − θᵗ_p)²` as a differentiable scalar.
pub fn ewc_penalty<S: Scalar>(
    params: &[Tensor<S>],
    anchor: &[ArrayD<S>],
    fisher: &[ArrayD<S>],
    lambda: S,
) -> Result<Tensor<S>> {
    if params.len() != anchor.len() || params.len() != fisher.len() {
        return Err(Error::shape("ewc parameter lists disagree".to_string()));
    }
    let mut total = Tensor::scalar(S::zero());
    for ((p, a), f) in params.iter().zip(anchor.iter()).zip(fisher.iter()) {
        if p.shape() != a.shape() || p.shape() != f.shape() {
            return Err(Error::shape("ewc tensor shapes disagree".to_string()));
        }
        let diff = p.sub(&Tensor::constant(a.clone()));
        total = total.add(&diff.mul(&diff).mul(&Tensor::constant(f.clone())).sum_all());
    }
    Ok(total.scale(lambda))
}

// ---------------------------------------------------------------------------
// overall objective

/// Sum of the four terms; aborts with a term-level diagnostic on NaN.
pub fn total_objective<S: Scalar>(
    stream_ce: &Tensor<S>,
    l_cl: &Tensor<S>,
    l_fp: &Tensor<S>,
    l_aux: &Tensor<S>,
) -> Result<Tensor<S>> {
    let named = [
        ("stream_ce", stream_ce),
        ("l_cl", l_cl),
        ("l_fp", l_fp),
        ("l_aux", l_aux),
    ];
    for (name, t) in named {
        if !t.item().as_f64().is_finite() {
            return Err(Error::numeric(format!(
                "objective term {} is not finite ({})",
                name,
                t.item()
            )));
        }
    }
    Ok(stream_ce.add(l_cl).add(l_fp).add(l_aux))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use ndarray::{Array1, ArrayD, IxDyn};
    use rand::Rng;

    fn randn(shape: &[usize], rng: &mut ChaCha12Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| {
            let u1: f64 = rng.gen_range(1e-9..1.0);
            let u2: f64 = rng.gen::<f64>();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
    }

    #[test]
    fn margin_relu_examples() {
        let x = Tensor::constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 1, 3]), vec![-1.0, -0.2, 0.3]).unwrap(),
        );
        let m = Array1::from_vec(vec![-0.5]);
        let y = margin_relu(&x, &m).array();
        assert_eq!(
            y,
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 1, 3]), vec![-0.5, -0.2, 0.3]).unwrap()
        );

        // m = 0 behaves like ReLU on negatives, identity on positives
        let m0 = Array1::from_vec(vec![0.0]);
        let y0 = margin_relu(&x, &m0).array();
        assert_eq!(
            y0,
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 1, 3]), vec![0.0, 0.0, 0.3]).unwrap()
        );

        // non-negative input is untouched by any m <= 0
        let pos = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 0.7_f64));
        let y = margin_relu(&pos, &m).array();
        assert!(y.iter().all(|&v| v == 0.7));
    }

    #[test]
    fn margins_must_be_non_positive() {
        assert!(ChannelMargins::new(vec![Array1::from_vec(vec![-0.1_f64, 0.0])]).is_ok());
        assert!(ChannelMargins::new(vec![Array1::from_vec(vec![0.2_f64])]).is_err());
        assert!(ChannelMargins::new(vec![Array1::from_vec(vec![f64::NAN])]).is_err());
    }

    #[test]
    fn masked_distillation_zero_cases_and_formula() {
        let mut rng = SeedTree::new(0).rng("t");
        let h_hat = Tensor::constant(randn(&[2, 3, 4, 4], &mut rng));
        let m = Array1::from_vec(vec![-0.3, -0.3, -0.3]);
        let mask = Tensor::constant(ArrayD::from_elem(IxDyn(&[2, 3, 4, 4]), 1.0_f64));

        // student equals margin-ReLU'd sibling -> exactly 0
        let h = margin_relu(&h_hat, &m).detach();
        let v = masked_feature_distillation(&h, &h_hat, &mask, &m)
            .unwrap()
            .item();
        assert_eq!(v, 0.0);

        // all-zero mask annihilates any residual
        let h2 = Tensor::constant(randn(&[2, 3, 4, 4], &mut rng));
        let zero_mask = Tensor::constant(ArrayD::zeros(IxDyn(&[2, 3, 4, 4])));
        let v = masked_feature_distillation(&h2, &h_hat, &zero_mask, &m)
            .unwrap()
            .item();
        assert_eq!(v, 0.0);

        // single-element direct formula: (1 - 2)^2 = 1
        let one = |v: f64| {
            Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), v))
        };
        let v = masked_feature_distillation(&one(1.0), &one(2.0), &one(1.0), &Array1::zeros(1))
            .unwrap()
            .item();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn mask_locality_is_exact() {
        let mut rng = SeedTree::new(1).rng("t");
        let h_hat = Tensor::constant(randn(&[2, 2, 3, 3], &mut rng));
        let m = Array1::from_vec(vec![-0.2, -0.2]);
        let mask_vals = ArrayD::from_shape_fn(IxDyn(&[2, 2, 3, 3]), |ix| {
            if (ix[2] + ix[3]) % 2 == 0 {
                1.0
            } else {
                0.0
            }
        });
        let mask = Tensor::constant(mask_vals.clone());
        let h = randn(&[2, 2, 3, 3], &mut rng);
        let base = masked_feature_distillation(&Tensor::constant(h.clone()), &h_hat, &mask, &m)
            .unwrap()
            .item();
        // perturb student only where mask == 0
        let mut h_pert = h;
        ndarray::azip!((hv in &mut h_pert, &mv in &mask_vals) if mv == 0.0 { *hv += 123.456; });
        let pert = masked_feature_distillation(&Tensor::constant(h_pert), &h_hat, &mask, &m)
            .unwrap()
            .item();
        assert_eq!(base, pert);
    }

    #[test]
    fn bce_single_unit_value() {
        let soft = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 0.999_f64));
        let stored = ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 1.0_f64);
        let v = mask_replay_bce(&soft, &stored).unwrap().item();
        assert!((v - 1.0005e-3).abs() < 1e-6, "bce {}", v);
    }

    #[test]
    fn diversity_identical_vectors_zero_and_orthogonal_value() {
        // identical signatures -> 0
        let same = Tensor::constant(ArrayD::from_elem(IxDyn(&[3, 4, 1, 1]), 1.0_f64));
        let v = aux_diversity_loss(&[same], 1.0, 0.1).unwrap().item();
        assert!(v.abs() < 1e-12, "identical case {}", v);

        // orthogonal pair: -0.1 * 2 * (1 - ln((e+1)/2)) ≈ -0.0760
        let vals = ArrayD::from_shape_vec(IxDyn(&[2, 2, 1, 1]), vec![1.0_f64, 0.0, 0.0, 1.0]).unwrap();
        let masks = Tensor::constant(vals);
        let v: f64 = aux_diversity_loss(&[masks], 1.0, 0.1).unwrap().item();
        assert!((v - (-0.075977)).abs() < 1e-4, "orthogonal case {}", v);

        // lambda = 0 -> 0
        let vals = ArrayD::from_shape_vec(IxDyn(&[2, 2, 1, 1]), vec![1.0_f64, 0.0, 0.0, 1.0]).unwrap();
        let v: f64 = aux_diversity_loss(&[Tensor::constant(vals)], 1.0, 0.0)
            .unwrap()
            .item();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn diversity_nonpositive_on_random_masks() {
        let mut rng = SeedTree::new(2).rng("t");
        for _ in 0..20 {
            let m = randn(&[5, 3, 2, 2], &mut rng).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let v = aux_diversity_loss(&[Tensor::constant(m)], 1.0, 0.25)
                .unwrap()
                .item();
            assert!(v <= 1e-12, "diversity {} > 0", v);
        }
    }

    #[test]
    fn diversity_needs_two_examples() {
        let m = Tensor::constant(ArrayD::<f64>::zeros(IxDyn(&[1, 2, 2, 2])));
        assert!(aux_diversity_loss(&[m], 1.0, 0.1).is_err());
    }

    #[test]
    fn replay_loss_examples() {
        // l = [0,0], f(x) = [1,0], y = 0, alpha 1, beta 0 -> 1.0
        let logits = Tensor::constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![1.0, 0.0]).unwrap(),
        );
        let stored = ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![0.0, 0.0]).unwrap();
        let v = cl_replay_loss(&logits, &stored, &[0], 1.0, 0.0).unwrap().item();
        assert_eq!(v, 1.0);

        // alpha = beta = 0 -> 0
        let v = cl_replay_loss(&logits, &stored, &[0], 0.0, 0.0).unwrap().item();
        assert_eq!(v, 0.0);

        // zero-residual limit with a saturated softmax
        let big = Tensor::constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![25.0, 0.0]).unwrap(),
        );
        let stored = big.array();
        let v = cl_replay_loss(&big, &stored, &[0], 1.0, 1.0).unwrap().item();
        assert!(v <= 1e-6, "saturated replay loss {}", v);

        // dim mismatch errors
        let bad = ArrayD::<f64>::zeros(IxDyn(&[1, 3]));
        assert!(cl_replay_loss(&logits, &bad, &[0], 1.0, 1.0).is_err());
    }

    #[test]
    fn fisher_entries_nonnegative_and_zero_at_stationarity() {
        let p = Tensor::leaf(ArrayD::from_elem(IxDyn(&[3]), 0.0_f64));
        let fisher = estimate_fisher_diag(&[p.clone()], 5, |_| {
            // loss = sum(p^2); gradient 2p = 0 at p = 0
            Ok(p.mul(&p).sum_all())
        })
        .unwrap();
        assert!(fisher[0].iter().all(|&v| v == 0.0));

        let q = Tensor::leaf(ArrayD::from_elem(IxDyn(&[2]), 1.5_f64));
        let fisher = estimate_fisher_diag(&[q.clone()], 3, |_| Ok(q.mul(&q).sum_all())).unwrap();
        assert!(fisher[0].iter().all(|&v| v >= 0.0));
        assert!(estimate_fisher_diag(&[q], 0, |_| unreachable!("no samples")).is_err());
    }

    #[test]
    fn fisher_matches_linear_gaussian_closed_form() {
        // y = θx + ε, ε ~ N(0, σ²); NLL_i = (y_i − θx_i)² / (2σ²).
        // At the true θ, E[(∂NLL/∂θ)²] = E[x²]/σ².
        let sigma = 0.7_f64;
        let theta_true = 1.3;
        let mut rng = SeedTree::new(3).rng("fisher");
        let n = 10_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|&x| {
                let u1: f64 = rng.gen_range(1e-9..1.0);
                let u2: f64 = rng.gen::<f64>();
                let eps = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                theta_true * x + sigma * eps
            })
            .collect();
        let theta = Tensor::leaf(ArrayD::from_elem(IxDyn(&[1]), theta_true));
        let fisher = estimate_fisher_diag(&[theta.clone()], n, |i| {
            let x = Tensor::constant(ArrayD::from_elem(IxDyn(&[1]), xs[i]));
            let y = Tensor::constant(ArrayD::from_elem(IxDyn(&[1]), ys[i]));
            let resid = y.sub(&theta.mul(&x));
            Ok(resid
                .mul(&resid)
                .scale(1.0 / (2.0 * sigma * sigma))
                .sum_all())
        })
        .unwrap();
        let expect = xs.iter().map(|&x| x * x).sum::<f64>() / n as f64 / (sigma * sigma);
        let got = fisher[0][[0]];
        assert!(
            (got - expect).abs() / expect < 0.05,
            "fisher {} vs closed form {}",
            got,
            expect
        );
    }

    #[test]
    fn ewc_penalty_examples() {
        let p = Tensor::leaf(ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0, 2.0]).unwrap());
        let anchor = vec![ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.0, 0.0]).unwrap()];
        let fisher = vec![ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.5, 1.0]).unwrap()];
        // λ Σ F (θ−θᵗ)² = 2 (0.5·1 + 1·4) = 9
        let v = ewc_penalty(&[p.clone()], &anchor, &fisher, 2.0).unwrap().item();
        assert_eq!(v, 9.0);

        // θ = θᵗ -> 0
        let same = vec![p.array()];
        let v = ewc_penalty(&[p.clone()], &same, &fisher, 2.0).unwrap().item();
        assert_eq!(v, 0.0);

        // F = 0 -> 0
        let zf = vec![ArrayD::zeros(IxDyn(&[2]))];
        let v = ewc_penalty(&[p], &anchor, &zf, 2.0).unwrap().item();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn total_objective_sums_and_rejects_nan() {
        let t = |v: f64| Tensor::<f64>::scalar(v);
        let v = total_objective(&t(1.0), &t(0.5), &t(0.25), &t(-0.05))
            .unwrap()
            .item();
        assert!((v - 1.70).abs() < 1e-12);

        let err = total_objective(&t(1.0), &t(f64::NAN), &t(0.0), &t(0.0));
        match err {
            Err(Error::Numeric(msg)) => assert!(msg.contains("l_cl")),
            other => panic!("expected numeric error, got {:?}", other.map(|t| t.item())),
        }
    }

    #[test]
    fn ewc_gradient_matches_fd() {
        let p = Tensor::leaf(ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.4_f64, -0.2, 1.0]).unwrap());
        let anchor = vec![ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.1, 0.1, 0.1]).unwrap()];
        let fisher = vec![ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.3, 0.9, 2.0]).unwrap()];
        ewc_penalty(&[p.clone()], &anchor, &fisher, 1.7)
            .unwrap()
            .backward();
        let ad = p.grad().unwrap();
        let eps = 1e-6;
        for i in 0..3 {
            let orig = p.array()[[i]];
            p.update_value(|v| v[[i]] = orig + eps);
            let lp = ewc_penalty(&[p.clone()], &anchor, &fisher, 1.7).unwrap().item();
            p.update_value(|v| v[[i]] = orig - eps);
            let lm = ewc_penalty(&[p.clone()], &anchor, &fisher, 1.7).unwrap().item();
            p.update_value(|v| v[[i]] = orig);
            let fd = (lp - lm) / (2.0 * eps);
            assert!((ad[[i]] - fd).abs() / fd.abs().max(1e-9) < 1e-5);
        }
    }
}
