//! SGD with momentum, Adam and LARS behind one `step` interface.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NamedParam;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Lars,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            "lars" => Ok(OptimizerKind::Lars),
            other => Err(Error::Config(format!(
                "unknown optimizer `{other}` (expected sgd, adam or lars)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// SGD only.
    pub momentum: f64,
    /// Adam only.
    pub betas: (f64, f64),
    /// Adam only.
    pub eps: f64,
    /// LARS only.
    pub trust_coefficient: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            lr: 1e-3,
            momentum: 0.9,
            betas: (0.9, 0.999),
            eps: 1e-8,
            trust_coefficient: 1e-3,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::Config(format!("invalid {what}: {v}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate", self.lr);
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", self.momentum);
        }
        for beta in [self.betas.0, self.betas.1] {
            if !(beta > 0.0 && beta < 1.0) {
                return bad("beta", beta);
            }
        }
        if !(self.eps > 0.0) {
            return bad("eps", self.eps);
        }
        if !(self.trust_coefficient > 0.0) {
            return bad("trust coefficient", self.trust_coefficient);
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight decay", self.weight_decay);
        }
        Ok(())
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::new(OptimizerKind::Sgd)
    }
}

#[derive(Debug, Clone, Default)]
struct Slot {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Optimizer state bound to one network's parameter list (by position).
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    steps: u64,
    slots: Vec<Slot>,
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            steps: 0,
            slots: Vec::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every parameter. Gradients are validated first,
    /// so an error leaves all parameters and state untouched.
    pub fn step<T: Scalar>(&mut self, params: &mut [NamedParam<T>]) -> Result<()> {
        for p in params.iter() {
            let g = p
                .tensor
                .grad()
                .ok_or_else(|| Error::MissingGradient(p.name.clone()))?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        if self.slots.len() != params.len() {
            self.slots = params
                .iter()
                .map(|p| {
                    let n = p.tensor.numel();
                    match self.config.kind {
                        OptimizerKind::Sgd => Slot {
                            first: vec![0.0; n],
                            second: Vec::new(),
                        },
                        OptimizerKind::Adam => Slot {
                            first: vec![0.0; n],
                            second: vec![0.0; n],
                        },
                        OptimizerKind::Lars => Slot::default(),
                    }
                })
                .collect();
        }
        self.steps += 1;
        let cfg = &self.config;
        let wd = cfg.weight_decay;
        for (p, slot) in params.iter_mut().zip(&mut self.slots) {
            let (w, g) = p.tensor.data_and_grad_mut();
            let g = g.expect("checked above");
            // effective gradient with L2 weight decay
            let eff = |i: usize, w: &[T]| g[i].as_f64() + wd * w[i].as_f64();
            match cfg.kind {
                OptimizerKind::Sgd => {
                    for i in 0..w.len() {
                        let v = cfg.momentum * slot.first[i] + eff(i, w);
                        slot.first[i] = v;
                        w[i] = T::from_f64_lossy(w[i].as_f64() - cfg.lr * v);
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2) = cfg.betas;
                    let t = self.steps as i32;
                    let bc1 = 1.0 - b1.powi(t);
                    let bc2 = 1.0 - b2.powi(t);
                    for i in 0..w.len() {
                        let gi = eff(i, w);
                        let m = b1 * slot.first[i] + (1.0 - b1) * gi;
                        let v = b2 * slot.second[i] + (1.0 - b2) * gi * gi;
                        slot.first[i] = m;
                        slot.second[i] = v;
                        let update = cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
                        w[i] = T::from_f64_lossy(w[i].as_f64() - update);
                    }
                }
                OptimizerKind::Lars => {
                    let w_norm = norm(w.iter().map(|v| v.as_f64()));
                    let g_norm = norm(g.iter().map(|v| v.as_f64()));
                    let local = if w_norm > 0.0 && g_norm > 0.0 {
                        cfg.trust_coefficient * w_norm / (g_norm + wd * w_norm)
                    } else {
                        1.0
                    };
                    let scale = cfg.lr * local;
                    for i in 0..w.len() {
                        let d = eff(i, w);
                        w[i] = T::from_f64_lossy(w[i].as_f64() - scale * d);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Clears all gradients to zero.
pub fn zero_grad<T: Scalar>(params: &mut [NamedParam<T>]) {
    params.iter_mut().for_each(|p| p.tensor.zero_grad());
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn param(w: &[f64], g: &[f64]) -> Vec<NamedParam<f64>> {
        let mut t = Tensor::new(vec![w.len()], w.to_vec()).unwrap().with_grad();
        t.accumulate_grad(g);
        vec![NamedParam {
            name: "w".into(),
            tensor: t,
        }]
    }

    fn cfg(kind: OptimizerKind, lr: f64) -> OptimizerConfig {
        OptimizerConfig {
            lr,
            ..OptimizerConfig::new(kind)
        }
    }

    #[test]
    fn sgd_plain_step() {
        let mut p = param(&[1.0], &[0.5]);
        let mut opt = Optimizer::new(OptimizerConfig {
            momentum: 0.0,
            ..cfg(OptimizerKind::Sgd, 0.1)
        })
        .unwrap();
        opt.step(&mut p).unwrap();
        assert_eq!(p[0].tensor.data(), &[0.95]);
    }

    #[test]
    fn sgd_momentum_accumulates_velocity() {
        let mut p = param(&[0.0], &[1.0]);
        let mut opt = Optimizer::new(cfg(OptimizerKind::Sgd, 0.1)).unwrap();
        opt.step(&mut p).unwrap(); // v=1, w=-0.1
        opt.step(&mut p).unwrap(); // v=1.9, w=-0.29
        assert!((p[0].tensor.data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_about_lr() {
        let mut p = param(&[1.0], &[2.0]);
        let mut opt = Optimizer::new(cfg(OptimizerKind::Adam, 0.1)).unwrap();
        opt.step(&mut p).unwrap();
        assert!((p[0].tensor.data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn lars_update_norm() {
        let mut p = param(&[0.6, 0.8], &[0.8, -0.6]);
        let mut opt = Optimizer::new(cfg(OptimizerKind::Lars, 1e-3)).unwrap();
        opt.step(&mut p).unwrap();
        let d = norm(p[0].tensor.data().iter().zip([0.6, 0.8]).map(|(a, b)| a - b));
        assert!((d - 1e-6).abs() < 1e-15);
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam, OptimizerKind::Lars] {
            let mut p = param(&[0.3, -2.0], &[0.0, 0.0]);
            let mut opt = Optimizer::new(cfg(kind, 0.1)).unwrap();
            opt.step(&mut p).unwrap();
            assert_eq!(p[0].tensor.data(), &[0.3, -2.0], "{kind:?}");
        }
    }

    #[test]
    fn non_finite_gradient_aborts_step() {
        let mut p = param(&[1.0, 2.0], &[0.1, f64::NAN]);
        let mut opt = Optimizer::new(cfg(OptimizerKind::Sgd, 0.1)).unwrap();
        assert!(matches!(opt.step(&mut p), Err(Error::NonFiniteGradient(_))));
        assert_eq!(p[0].tensor.data(), &[1.0, 2.0]);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = vec![NamedParam {
            name: "w".into(),
            tensor: Tensor::<f64>::new(vec![1], vec![1.0]).unwrap().with_grad(),
        }];
        let mut opt = Optimizer::new(cfg(OptimizerKind::Adam, 0.1)).unwrap();
        assert!(matches!(opt.step(&mut p), Err(Error::MissingGradient(_))));
    }

    #[test]
    fn zero_grad_idempotent() {
        let mut p = param(&[1.0], &[3.0]);
        zero_grad(&mut p);
        assert_eq!(p[0].tensor.grad(), Some(&[0.0][..]));
        zero_grad(&mut p);
        assert_eq!(p[0].tensor.grad(), Some(&[0.0][..]));
    }

    #[test]
    fn config_validation() {
        let base = OptimizerConfig::default();
        assert!(base.validate().is_ok());
        for bad in [
            OptimizerConfig { lr: 0.0, ..base.clone() },
            OptimizerConfig { momentum: 1.0, ..base.clone() },
            OptimizerConfig { betas: (0.9, 1.0), ..base.clone() },
            OptimizerConfig { eps: 0.0, ..base.clone() },
            OptimizerConfig { trust_coefficient: 0.0, ..base.clone() },
            OptimizerConfig { weight_decay: -1.0, ..base.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
