//! Parameter updates: plain SGD, and Adam as an opt-in alternative.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}`: expected sgd|adam"))),
        }
    }
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

fn check_rate(lr: f64) -> Result<()> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("learning rate must be positive, got {lr}")))
    }
}

fn with_grads<'a, I>(params: I) -> Result<Vec<(&'a str, &'a mut Tensor)>>
where
    I: IntoIterator<Item = (&'a str, &'a mut Tensor)>,
{
    let params: Vec<(&str, &mut Tensor)> = params.into_iter().collect();
    if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
        return Err(Error::MissingGradient(name.to_string()));
    }
    Ok(params)
}

/// `w ← w − lr·g` for every named tensor, using and then clearing each
/// tensor's gradient slot. Nothing is updated if any gradient is missing.
pub fn sgd_step<'a, I>(params: I, lr: f64) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a mut Tensor)>,
{
    check_rate(lr)?;
    for (_, t) in with_grads(params)? {
        let g = t.grad().expect("checked above").to_vec();
        t.data_mut().iter_mut().zip(&g).for_each(|(w, g)| *w -= lr * g);
        t.clear_grad();
    }
    Ok(())
}

/// Adam with bias-corrected moments. Parameters must arrive in the same
/// order on every step.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, steps: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl Adam {
    pub fn step<'a, I>(&mut self, params: I, lr: f64) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor)>,
    {
        check_rate(lr)?;
        let params = with_grads(params)?;
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || self.m.iter().zip(&params).any(|(m, (_, t))| m.len() != t.numel()) {
            return Err(Error::Config("adam: parameter set changed between steps".into()));
        }
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for ((_, t), (m, v)) in params.into_iter().zip(self.m.iter_mut().zip(&mut self.v)) {
            let g = t.grad().expect("checked above").to_vec();
            for (((w, g), m), v) in t.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
            t.clear_grad();
        }
        Ok(())
    }
}
