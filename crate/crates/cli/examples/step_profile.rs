//! Rough phase timing of one training step at desk scale.

use std::time::Instant;
use tandem_core::attention::GateSet;
use tandem_core::backbone::{ArchId, LayeredBackbone};
use tandem_core::benchmark::GLYPH_SIZE;
use tandem_core::losses::{aux_diversity_loss, fp_loss, ChannelMargins, FpCurrent, LossWeights};
use tandem_core::nn::Mode;
use tandem_core::rng::SeedTree;
use tandem_core::tensor::Tensor;
use ndarray::{ArrayD, IxDyn};

fn main() {
    let tree = SeedTree::new(0);
    let model = LayeredBackbone::<f32>::build(ArchId::DeskCnn, (1, GLYPH_SIZE, GLYPH_SIZE), 10, &tree);
    let sibling = model.clone_frozen(&tree);
    let mut gates = GateSet::<f32>::new(&model.tap_shapes, 1.0, &tree.child("g"));
    gates.ensure_task(0);
    let margins = ChannelMargins::zeros(&[8, 24, 96]);
    let weights = LossWeights::<f32> {
        alpha: 0.3,
        beta: 0.9,
        lambda_aux: 0.03,
        lambda_fp: 3e-4,
        lambda_fp_replay: 3e-4,
        temperature_aux: 1.0,
        ewc_lambda: 0.0,
    };
    let x = Tensor::constant(ArrayD::from_shape_fn(
        IxDyn(&[64, 1, GLYPH_SIZE, GLYPH_SIZE]),
        |ix| ((ix[0] * 7 + ix[2] * 3 + ix[3]) % 13) as f32 / 13.0 - 0.5,
    ));
    let reps = 20;

    let t = Instant::now();
    for _ in 0..reps {
        let (logits, _) = model.forward_with_taps(&x, Mode::Train).unwrap();
        let loss = logits.cross_entropy_mean(&vec![0usize; 64]);
        loss.backward();
        model.params().iter().for_each(|p| p.zero_grad());
    }
    println!("student fwd+bwd      : {:>7.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let t = Instant::now();
    for _ in 0..reps {
        let _ = sibling.forward_with_taps(&x, Mode::Eval).unwrap();
    }
    println!("sibling fwd          : {:>7.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let mut grng = tree.rng("gumbel");
    let t = Instant::now();
    for _ in 0..reps {
        let (_, staps) = model.forward_with_taps(&x, Mode::Train).unwrap();
        let (_, sibtaps) = sibling.forward_with_taps(&x, Mode::Eval).unwrap();
        let cur = FpCurrent {
            student_taps: &staps,
            sibling_taps: &sibtaps,
            task: 0,
        };
        let fp = fp_loss(&gates, &cur, None, &margins, &weights, true, &mut grng).unwrap();
        let hard: Vec<_> = fp.current_masks.iter().map(|m| m.hard.clone()).collect();
        let aux = aux_diversity_loss(&hard, 1.0f32, 0.03).unwrap();
        let total = fp.loss.add(&aux);
        total.backward();
        model.params().iter().for_each(|p| p.zero_grad());
        gates.params().iter().for_each(|p| p.zero_grad());
    }
    println!("fwd+sib+fp+aux+bwd   : {:>7.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    // gates alone on constant taps
    let taps: Vec<Tensor<f32>> = model
        .tap_shapes
        .iter()
        .map(|&(c, h, w)| Tensor::constant(ArrayD::from_elem(IxDyn(&[64, c, h, w]), 0.3f32)))
        .collect();
    let t = Instant::now();
    for _ in 0..reps {
        for (l, tap) in taps.iter().enumerate() {
            let mp = gates.gates[l].attention_mask(tap, 0, true, &mut grng).unwrap();
            mp.hard.sum_all().backward();
        }
        gates.params().iter().for_each(|p| p.zero_grad());
    }
    println!("gates fwd+bwd        : {:>7.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}
