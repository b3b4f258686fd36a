//! Learning-rate schedule and SGD update.

use std::f64::consts::PI;

use crate::error::{Result, UrtError};
use crate::layer::UrtParams;
use crate::train::grad::GradientSet;

/// `lr0 · ½ · (1 + cos(π · step / total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let progress = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (PI * progress).cos())
}

fn check_shapes(params: &UrtParams, grads: &GradientSet) -> Result<()> {
    let same = params.heads.len() == grads.heads.len()
        && params.heads.iter().zip(&grads.heads).all(|(p, g)| {
            p.blocks()
                .iter()
                .zip(g.blocks())
                .all(|(a, b)| a.len() == b.len())
        });
    if same {
        Ok(())
    } else {
        Err(UrtError::Shape("gradient does not match parameter shapes".into()))
    }
}

/// `θ ← θ − lr·(g + wd·θ)` for weights; biases skip the decay term.
pub fn sgd_step(
    params: &mut UrtParams,
    grads: &GradientSet,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    check_shapes(params, grads)?;
    for (p, g) in params.heads.iter_mut().zip(&grads.heads) {
        for (b, (theta, grad)) in p.blocks_mut().into_iter().zip(g.blocks()).enumerate() {
            let decay = if b % 2 == 0 { weight_decay } else { 0.0 };
            for (t, gv) in theta.iter_mut().zip(grad) {
                *t -= lr * (gv + decay * *t);
            }
        }
    }
    Ok(())
}

/// SGD with optional heavy-ball momentum. With `momentum == 0` each step is
/// exactly [`sgd_step`].
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    velocity: Option<GradientSet>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: None,
        }
    }

    pub fn step(
        &mut self,
        params: &mut UrtParams,
        grads: &GradientSet,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if self.momentum == 0.0 {
            return sgd_step(params, grads, lr, weight_decay);
        }
        check_shapes(params, grads)?;
        let velocity = self
            .velocity
            .get_or_insert_with(|| GradientSet::zeros_like(params));
        for ((p, g), v) in params
            .heads
            .iter_mut()
            .zip(&grads.heads)
            .zip(&mut velocity.heads)
        {
            for (b, ((theta, grad), vel)) in p
                .blocks_mut()
                .into_iter()
                .zip(g.blocks())
                .zip(v.blocks_mut())
                .enumerate()
            {
                let decay = if b % 2 == 0 { weight_decay } else { 0.0 };
                for ((t, gv), vv) in theta.iter_mut().zip(grad).zip(vel.iter_mut()) {
                    *vv = self.momentum * *vv + gv + decay * *t;
                    *t -= lr * *vv;
                }
            }
        }
        Ok(())
    }
}
