use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::graph::Gradients;
use crate::nn::params::ParamSet;

/// Plain gradient descent: `p <- p - lr * g` on trainable tensors only.
///
/// Every trainable tensor must have a gradient; frozen tensors are never
/// touched, whatever `grads` holds for them.
pub fn sgd_step(params: &mut ParamSet, grads: &Gradients, lr: f32) -> Result<()> {
    for e in params.iter() {
        if !e.trainable {
            continue;
        }
        match grads.param(&e.name) {
            None => return Err(Error::MissingGradient(e.name.clone())),
            Some(g) => e.tensor.same_shape(g)?,
        }
    }
    if lr == 0.0 {
        return Ok(());
    }
    for e in params.iter_mut().filter(|e| e.trainable) {
        let g = grads.param(&e.name).expect("checked above");
        for (p, &gv) in e.tensor.data_mut().iter_mut().zip(g.data()) {
            *p -= lr * gv;
        }
    }
    Ok(())
}

/// Adam with bias correction, used for the generator's ε-matching fit.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: i32,
    moments: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) -> Result<()> {
        for e in params.iter().filter(|e| e.trainable) {
            if grads.param(&e.name).is_none() {
                return Err(Error::MissingGradient(e.name.clone()));
            }
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for e in params.iter_mut().filter(|e| e.trainable) {
            let g = grads.param(&e.name).expect("checked above");
            e.tensor.same_shape(g)?;
            let n = g.len();
            let (m, v) = self
                .moments
                .entry(e.name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (((p, &gv), mv), vv) in e
                .tensor
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *p -= self.lr * (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
