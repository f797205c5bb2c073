//! Neural-network layers and the SGD optimizer.
//!
//! Layers own their parameters as autodiff leaves; `params()` hands shared
//! references to the optimizer. Batch normalization keeps running statistics
//! behind a `RefCell` so forward passes take `&self`.

use crate::rng::SeedTree;
use crate::scalar::Scalar;
use crate::tensor::{ConvSpec, Tensor};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use std::cell::{Cell, RefCell};
use std::rc::Rc;

/// Forward mode: training uses batch statistics, evaluation running ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub fn kaiming_uniform<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha12Rng) -> ArrayD<S> {
    let bound = (6.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| S::of_f64(rng.gen_range(-bound..bound)))
}

// ---------------------------------------------------------------------------

/// Fully connected layer.
pub struct Linear<S: Scalar> {
    pub weight: Tensor<S>, // (in, out)
    pub bias: Option<Tensor<S>>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(in_dim: usize, out_dim: usize, bias: bool, rng: &mut ChaCha12Rng) -> Self {
        let weight = Tensor::leaf(kaiming_uniform(&[in_dim, out_dim], in_dim, rng));
        let bias = bias.then(|| {
            let bound = 1.0 / (in_dim as f64).sqrt();
            Tensor::leaf(ArrayD::from_shape_fn(IxDyn(&[1, out_dim]), |_| {
                S::of_f64(rng.gen_range(-bound..bound))
            }))
        });
        Linear { weight, bias }
    }

    /// `x: (b, in) -> (b, out)`
    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        let y = x.matmul(&self.weight);
        match &self.bias {
            Some(b) => y.add(b),
            None => y,
        }
    }

    pub fn params(&self) -> Vec<Tensor<S>> {
        let mut p = vec![self.weight.clone()];
        if let Some(b) = &self.bias {
            p.push(b.clone());
        }
        p
    }
}

// ---------------------------------------------------------------------------

/// 2-d convolution layer.
pub struct Conv2d<S: Scalar> {
    pub weight: Tensor<S>, // (cout, cin, kh, kw)
    pub bias: Option<Tensor<S>>,
    pub spec: ConvSpec,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = Tensor::leaf(kaiming_uniform(&[cout, cin, kernel, kernel], fan_in, rng));
        let bias = bias.then(|| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Tensor::leaf(ArrayD::from_shape_fn(IxDyn(&[cout]), |_| {
                S::of_f64(rng.gen_range(-bound..bound))
            }))
        });
        Conv2d { weight, bias, spec }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        x.conv2d(&self.weight, self.bias.as_ref(), self.spec)
    }

    pub fn params(&self) -> Vec<Tensor<S>> {
        let mut p = vec![self.weight.clone()];
        if let Some(b) = &self.bias {
            p.push(b.clone());
        }
        p
    }
}

// ---------------------------------------------------------------------------

/// Batch normalization over `(b, c, h, w)` or `(b, c)` inputs.
pub struct BatchNorm<S: Scalar> {
    pub gamma: Tensor<S>, // (1, c, 1, 1) or (1, c)
    pub beta: Tensor<S>,
    pub running_mean: Rc<RefCell<ArrayD<S>>>,
    pub running_var: Rc<RefCell<ArrayD<S>>>,
    pub momentum: S,
    pub eps: S,
    channels: usize,
    spatial: bool,
    /// When locked, forward always uses running statistics (frozen sibling).
    pub locked: Cell<bool>,
}

impl<S: Scalar> BatchNorm<S> {
    /// `spatial`: true for 4-d `(b, c, h, w)` inputs, false for `(b, c)`.
    pub fn new(channels: usize, spatial: bool) -> Self {
        let shape: Vec<usize> = if spatial {
            vec![1, channels, 1, 1]
        } else {
            vec![1, channels]
        };
        BatchNorm {
            gamma: Tensor::leaf(ArrayD::from_elem(IxDyn(&shape), S::one())),
            beta: Tensor::leaf(ArrayD::from_elem(IxDyn(&shape), S::zero())),
            running_mean: Rc::new(RefCell::new(ArrayD::zeros(IxDyn(&shape)))),
            running_var: Rc::new(RefCell::new(ArrayD::from_elem(IxDyn(&shape), S::one()))),
            momentum: S::of_f64(0.1),
            eps: S::of_f64(1e-5),
            channels,
            spatial,
            locked: Cell::new(false),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn axes(&self) -> Vec<usize> {
        if self.spatial {
            vec![0, 2, 3]
        } else {
            vec![0]
        }
    }

    pub fn forward(&self, x: &Tensor<S>, mode: Mode) -> Tensor<S> {
        let mode = if self.locked.get() { Mode::Eval } else { mode };
        match mode {
            Mode::Train => {
                let axes = self.axes();
                let (y, mu, var) = x.batchnorm_train(&self.gamma, &self.beta, &axes, self.eps);
                // Running-statistic update is value-level bookkeeping.
                let m = self.momentum;
                let one_m = S::one() - m;
                let mut rm = self.running_mean.borrow_mut();
                let mut rv = self.running_var.borrow_mut();
                ndarray::azip!((r in &mut *rm, &v in &mu) *r = *r * one_m + v * m);
                ndarray::azip!((r in &mut *rv, &v in &var) *r = *r * one_m + v * m);
                y
            }
            Mode::Eval => x.batchnorm_eval(
                &self.gamma,
                &self.beta,
                &self.running_mean.borrow(),
                &self.running_var.borrow(),
                self.eps,
            ),
        }
    }

    pub fn params(&self) -> Vec<Tensor<S>> {
        vec![self.gamma.clone(), self.beta.clone()]
    }
}

// ---------------------------------------------------------------------------

/// Plain SGD with optional momentum and weight decay.
pub struct Sgd<S: Scalar> {
    params: Vec<Tensor<S>>,
    velocity: Vec<Option<ArrayD<S>>>,
    pub lr: S,
    pub momentum: S,
    pub weight_decay: S,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(params: Vec<Tensor<S>>, lr: S, momentum: S, weight_decay: S) -> Self {
        let velocity = vec![None; params.len()];
        Sgd {
            params,
            velocity,
            lr,
            momentum,
            weight_decay,
        }
    }

    /// Replace the parameter set (e.g. after new gate banks appear); velocity
    /// is carried over positionally for the common prefix.
    pub fn extend_params(&mut self, extra: Vec<Tensor<S>>) {
        for p in extra {
            self.params.push(p);
            self.velocity.push(None);
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn step(&mut self) {
        for (i, p) in self.params.iter().enumerate() {
            let Some(mut g) = p.grad() else { continue };
            if self.weight_decay > S::zero() {
                let wd = self.weight_decay;
                let v = p.value();
                ndarray::azip!((gi in &mut g, &vi in &*v) *gi += vi * wd);
            }
            let update = if self.momentum > S::zero() {
                let vel = &mut self.velocity[i];
                match vel {
                    Some(v) => {
                        let m = self.momentum;
                        ndarray::azip!((vi in &mut *v, &gi in &g) *vi = *vi * m + gi);
                        v.clone()
                    }
                    None => {
                        *vel = Some(g.clone());
                        g
                    }
                }
            } else {
                g
            };
            let lr = self.lr;
            p.update_value(|v| {
                ndarray::azip!((vi in v, &ui in &update) *vi -= lr * ui);
            });
        }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}

/// Independent stream for initializing a named component.
pub fn init_rng(tree: &SeedTree, label: &str) -> ChaCha12Rng {
    tree.rng(label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn randn64(shape: &[usize], rng: &mut ChaCha12Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| {
            let u1: f64 = rng.gen_range(1e-9..1.0);
            let u2: f64 = rng.gen::<f64>();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let mut rng = SeedTree::new(0).rng("bn");
        let bn = BatchNorm::<f64>::new(3, true);
        let x = Tensor::constant(randn64(&[8, 3, 4, 4], &mut rng).mapv(|v| v * 3.0 + 1.0));
        let y = bn.forward(&x, Mode::Train);
        let v = y.array();
        for c in 0..3 {
            let ch = v.index_axis(ndarray::Axis(1), c);
            let mean: f64 = ch.iter().sum::<f64>() / ch.len() as f64;
            let var: f64 = ch.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / ch.len() as f64;
            assert!(mean.abs() < 1e-9, "mean {}", mean);
            assert!((var - 1.0).abs() < 1e-3, "var {}", var);
        }
    }

    #[test]
    fn batchnorm_grad_flows() {
        let mut rng = SeedTree::new(1).rng("bn");
        let bn = BatchNorm::<f64>::new(2, true);
        let x = Tensor::leaf(randn64(&[4, 2, 3, 3], &mut rng));
        let y = bn.forward(&x, Mode::Train);
        y.mul(&y).sum_all().backward();
        assert!(x.grad().is_some());
        assert!(bn.gamma.grad().is_some());
        assert!(bn.beta.grad().is_some());
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        for spatial in [true, false] {
            let mut rng = SeedTree::new(9).rng("bnfd");
            let bn = BatchNorm::<f64>::new(3, spatial);
            bn.gamma.update_value(|v| v.mapv_inplace(|_| 1.3));
            bn.beta.update_value(|v| v.mapv_inplace(|_| -0.2));
            let shape: &[usize] = if spatial { &[4, 3, 2, 2] } else { &[6, 3] };
            let x = Tensor::leaf(randn64(shape, &mut rng));
            let w = Tensor::constant(randn64(shape, &mut rng));

            for train in [true, false] {
                let mode = if train { Mode::Train } else { Mode::Eval };
                let loss = |t: &Tensor<f64>| bn.forward(t, mode).mul(&w).sum_all();
                loss(&x).backward();
                let ad_x = x.grad().unwrap();
                let ad_g = bn.gamma.grad().unwrap();
                x.zero_grad();
                bn.gamma.zero_grad();
                bn.beta.zero_grad();

                let eps = 1e-6;
                let n = x.value().len();
                let mut max_rel: f64 = 0.0;
                for i in 0..n {
                    let orig = x.value().as_slice().unwrap()[i];
                    x.update_value(|v| v.as_slice_mut().unwrap()[i] = orig + eps);
                    let lp = loss(&x).item();
                    x.update_value(|v| v.as_slice_mut().unwrap()[i] = orig - eps);
                    let lm = loss(&x).item();
                    x.update_value(|v| v.as_slice_mut().unwrap()[i] = orig);
                    let fd = (lp - lm) / (2.0 * eps);
                    let ad = ad_x.as_slice().unwrap()[i];
                    max_rel = max_rel.max((ad - fd).abs() / fd.abs().max(1e-6));
                }
                assert!(max_rel < 1e-4, "dx rel err {} (train={})", max_rel, train);

                // gamma[0]
                let orig = bn.gamma.value().as_slice().unwrap()[0];
                bn.gamma.update_value(|v| v.as_slice_mut().unwrap()[0] = orig + eps);
                let lp = loss(&x).item();
                bn.gamma.update_value(|v| v.as_slice_mut().unwrap()[0] = orig - eps);
                let lm = loss(&x).item();
                bn.gamma.update_value(|v| v.as_slice_mut().unwrap()[0] = orig);
                let fd = (lp - lm) / (2.0 * eps);
                let ad = ad_g.as_slice().unwrap()[0];
                assert!(
                    (ad - fd).abs() / fd.abs().max(1e-6) < 1e-5,
                    "dgamma {} vs {}",
                    ad,
                    fd
                );
            }
        }
    }

    #[test]
    fn locked_batchnorm_ignores_batch_stats() {
        let mut rng = SeedTree::new(2).rng("bn");
        let bn = BatchNorm::<f64>::new(2, false);
        bn.locked.set(true);
        let x = Tensor::constant(randn64(&[16, 2], &mut rng).mapv(|v| v * 10.0));
        let y = bn.forward(&x, Mode::Train);
        // running stats are identity at init, so output == x / sqrt(1 + eps)
        let expect = x.array().mapv(|v| v / (1.0_f64 + 1e-5).sqrt());
        let diff = (&y.array() - &expect).mapv(f64::abs).sum();
        assert!(diff < 1e-12, "diff {}", diff);
    }

    #[test]
    fn sgd_descends_quadratic() {
        let p = Tensor::leaf(ArrayD::from_elem(IxDyn(&[1]), 5.0_f64));
        let mut opt = Sgd::new(vec![p.clone()], 0.1, 0.0, 0.0);
        for _ in 0..100 {
            opt.zero_grad();
            let loss = p.mul(&p).sum_all();
            loss.backward();
            opt.step();
        }
        assert!(p.array()[[0]].abs() < 1e-6);
    }
}
