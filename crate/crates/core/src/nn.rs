//! Small neural-network building blocks shared by the trainable models.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::IxDyn;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::checkpoint::ParamMap;

/// Parameters placed on a tape.
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Trainable parameters become leaves; otherwise constants sharing the
    /// parameter storage.
    pub fn bind(tape: &'t Tape, params: &ParamMap, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.leaf_arc(v.clone())
                } else {
                    tape.constant_arc(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Panics on unknown names; loaders validate the parameter set up front.
    pub fn get(&self, name: &str) -> Var<'t> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn collect_grads(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(k, v)| grads.take(*v).map(|g| (k.clone(), g)))
            .collect()
    }
}

/// Adam over named tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamMap, grads: &BTreeMap<String, Tensor>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.raw_dim()));
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            let p = Arc::make_mut(p);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }
}

pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_shape_simple_fn(IxDyn(shape), || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Variance-scaled normal init over `fan_in`.
pub fn scaled_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize, gain: f64) -> Arc<Tensor> {
    Arc::new(normal_tensor(rng, shape, gain / (fan_in as f64).sqrt()))
}

pub fn zeros(shape: &[usize]) -> Arc<Tensor> {
    Arc::new(Tensor::zeros(IxDyn(shape)))
}

pub fn filled(shape: &[usize], v: f64) -> Arc<Tensor> {
    Arc::new(Tensor::from_elem(IxDyn(shape), v))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed by a training-mode normalization layer.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Batch normalization with learned scale and shift, for `N×C×H×W` or `N×C`
/// inputs. Parameters live under `{prefix}.weight`, `{prefix}.bias`,
/// `{prefix}.running_mean` and `{prefix}.running_var`.
pub fn batch_norm<'t>(
    x: Var<'t>,
    bound: &Bound<'t>,
    params: &ParamMap,
    prefix: &str,
    mode: Mode,
    eps: f64,
    stats: &mut Vec<BatchStats>,
) -> Var<'t> {
    let shape = x.shape();
    let flat = shape.len() == 2;
    let x4 = if flat { x.reshape(&[shape[0], shape[1], 1, 1]) } else { x };
    let normed = match mode {
        Mode::Train => {
            let (y, mean, var) = x4.batch_norm(eps);
            stats.push(BatchStats { prefix: prefix.to_string(), mean, var });
            y
        }
        Mode::Eval => {
            let rm = &params[&format!("{prefix}.running_mean")];
            let rv = &params[&format!("{prefix}.running_var")];
            let mul: Vec<f64> = rv.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let shift: Vec<f64> = rm.iter().copied().collect();
            x4.affine_channels_const(&mul, &shift)
        }
    };
    let y = normed
        .scale_channels(bound.get(&format!("{prefix}.weight")))
        .add_channel_bias(bound.get(&format!("{prefix}.bias")));
    if flat {
        y.reshape(&shape)
    } else {
        y
    }
}

/// Exponential running-average update of normalization statistics, using the
/// unbiased batch variance.
pub fn update_running_stats(params: &mut ParamMap, stats: &[BatchStats], momentum: f64, count: usize) {
    let unbias = if count > 1 { count as f64 / (count as f64 - 1.0) } else { 1.0 };
    for s in stats {
        let rm = Arc::make_mut(params.get_mut(&format!("{}.running_mean", s.prefix)).unwrap());
        for (r, m) in rm.iter_mut().zip(&s.mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        let rv = Arc::make_mut(params.get_mut(&format!("{}.running_var", s.prefix)).unwrap());
        for (r, v) in rv.iter_mut().zip(&s.var) {
            *r = (1.0 - momentum) * *r + momentum * v * unbias;
        }
    }
}

pub fn insert_batch_norm(params: &mut ParamMap, prefix: &str, c: usize) {
    params.insert(format!("{prefix}.weight"), filled(&[c], 1.0));
    params.insert(format!("{prefix}.bias"), zeros(&[c]));
    params.insert(format!("{prefix}.running_mean"), zeros(&[c]));
    params.insert(format!("{prefix}.running_var"), filled(&[c], 1.0));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut params = ParamMap::new();
        params.insert("x".into(), filled(&[3], 5.0));
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let tape = Tape::new();
            let b = Bound::bind(&tape, &params, true);
            let loss = b.get("x").add_scalar(-1.0).square().sum();
            let mut g = tape.gradients(loss);
            let grads = b.collect_grads(&mut g);
            opt.step(&mut params, &grads);
        }
        assert!(params["x"].iter().all(|v| (v - 1.0).abs() < 1e-3));
    }

    #[test]
    fn eval_batch_norm_uses_running_stats() {
        let mut params = ParamMap::new();
        insert_batch_norm(&mut params, "bn", 2);
        Arc::make_mut(params.get_mut("bn.running_mean").unwrap()).fill(1.0);
        Arc::make_mut(params.get_mut("bn.running_var").unwrap()).fill(4.0);
        let tape = Tape::new();
        let b = Bound::bind(&tape, &params, false);
        let x = tape.constant(Tensor::from_elem(IxDyn(&[1, 2]), 3.0));
        let y = batch_norm(x, &b, &params, "bn", Mode::Eval, 0.0, &mut Vec::new());
        assert!(y.value().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }
}
