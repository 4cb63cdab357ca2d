//! Trainable parameters and the Adam optimizer.
//!
//! A `Param` owns its f32 buffer and hands out a cached leaf tensor per
//! training step; gradients come back keyed by that leaf. Optimizer steps
//! mutate the buffer and invalidate the leaf.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{Gradients, Tensor};

struct ParamInner {
    data: Vec<f32>,
    shape: Vec<usize>,
    leaf: Option<Tensor>,
    m: Vec<f32>,
    v: Vec<f32>,
}

#[derive(Clone)]
pub struct Param(Rc<RefCell<ParamInner>>);

impl Param {
    pub fn new(data: Vec<f32>, shape: &[usize]) -> Param {
        let n = data.len();
        debug_assert_eq!(n, shape.iter().product::<usize>());
        Param(Rc::new(RefCell::new(ParamInner {
            data,
            shape: shape.to_vec(),
            leaf: None,
            m: vec![0.0; n],
            v: vec![0.0; n],
        })))
    }

    pub fn zeros(shape: &[usize]) -> Param {
        Param::new(vec![0.0; shape.iter().product()], shape)
    }

    /// Leaf tensor for the current step; stable until the next mutation.
    pub fn leaf(&self) -> Tensor {
        let mut inner = self.0.borrow_mut();
        if inner.leaf.is_none() {
            inner.leaf = Some(
                Tensor::param(inner.data.clone(), &inner.shape.clone()).expect("param leaf"),
            );
        }
        inner.leaf.clone().unwrap()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().data.len()
    }

    pub fn values(&self) -> Vec<f32> {
        self.0.borrow().data.clone()
    }

    pub fn set_values(&self, data: Vec<f32>) {
        let mut inner = self.0.borrow_mut();
        debug_assert_eq!(data.len(), inner.data.len());
        inner.data = data;
        inner.leaf = None;
    }

    fn invalidate(&self) {
        self.0.borrow_mut().leaf = None;
    }

    fn reset_moments(&self) {
        let mut inner = self.0.borrow_mut();
        inner.m.iter_mut().for_each(|x| *x = 0.0);
        inner.v.iter_mut().for_each(|x| *x = 0.0);
    }
}

/// One learning-rate group of an Adam optimizer.
pub struct ParamGroup {
    pub params: Vec<Param>,
    pub lr: f32,
}

/// Adam with optional cosine learning-rate decay over a known horizon.
pub struct Adam {
    groups: Vec<ParamGroup>,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: u64,
    decay_steps: Option<usize>,
}

impl Adam {
    pub fn new(groups: Vec<ParamGroup>) -> Adam {
        Adam {
            groups,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            decay_steps: None,
        }
    }

    pub fn with_cosine_decay(mut self, steps: usize) -> Adam {
        self.decay_steps = Some(steps.max(1));
        self
    }

    /// Scale every group's base rate (used for NaN-rollback retries).
    pub fn scale_lr(&mut self, factor: f32) {
        for g in &mut self.groups {
            g.lr *= factor;
        }
    }

    pub fn reset(&mut self) {
        self.t = 0;
        for g in &self.groups {
            for p in &g.params {
                p.reset_moments();
            }
        }
    }

    pub fn step(&mut self, grads: &Gradients) {
        self.t += 1;
        let decay = match self.decay_steps {
            Some(total) => {
                let t = (self.t.min(total as u64) - 1) as f32 / total.max(1) as f32;
                0.5 * (1.0 + (std::f32::consts::PI * t).cos())
            }
            None => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for group in &self.groups {
            let lr = group.lr * decay;
            for p in &group.params {
                let leaf = {
                    let inner = p.0.borrow();
                    match &inner.leaf {
                        Some(l) => l.clone(),
                        None => continue,
                    }
                };
                let g = match grads.get(&leaf) {
                    Some(g) => g.to_vec(),
                    None => continue,
                };
                let mut inner = p.0.borrow_mut();
                for i in 0..g.len() {
                    inner.m[i] = self.beta1 * inner.m[i] + (1.0 - self.beta1) * g[i];
                    inner.v[i] = self.beta2 * inner.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                    let mh = inner.m[i] / bc1;
                    let vh = inner.v[i] / bc2;
                    inner.data[i] -= lr * mh / (vh.sqrt() + self.eps);
                }
                inner.leaf = None;
            }
        }
    }
}

/// Deep value snapshot of a parameter set, for warm-start rollback.
pub struct Snapshot(Vec<(Param, Vec<f32>)>);

impl Snapshot {
    pub fn take(params: &[Param]) -> Snapshot {
        Snapshot(params.iter().map(|p| (p.clone(), p.values())).collect())
    }

    pub fn restore(&self) {
        for (p, data) in &self.0 {
            p.set_values(data.clone());
        }
    }
}

/// Invalidate cached leaves so the next forward starts a fresh graph.
pub fn begin_step(params: &[Param]) {
    for p in params {
        p.invalidate();
    }
}
