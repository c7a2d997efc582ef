use crate::error::{Error, Result};
use crate::unet::layers::Param;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    /// SGD with momentum 0.9.
    Sgd,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "adam" => Some(Self::Adam),
            "sgd" => Some(Self::Sgd),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Adam => "adam",
            Self::Sgd => "sgd",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the base rate towards zero over all steps.
    Cosine,
}

impl LrSchedule {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "constant" => Some(Self::Constant),
            "cosine" => Some(Self::Cosine),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Constant => "constant",
            Self::Cosine => "cosine",
        }
    }

    pub fn rate(self, base: f64, step: usize, total_steps: usize) -> f64 {
        match self {
            Self::Constant => base,
            Self::Cosine => {
                let t = step as f64 / total_steps.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const MOMENTUM: f32 = 0.9;

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Applies one update from the accumulated gradients. `params` must
    /// arrive in the same order every call.
    pub fn step(&mut self, params: Vec<&mut Param>, lr: f64) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            if self.kind == OptimizerKind::Adam {
                self.second = self.first.clone();
            }
        }
        if self.first.len() != params.len() {
            return Err(Error::InvalidArgument("optimizer parameter set changed".into()));
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - BETA1.powi(t);
                let c2 = 1.0 - BETA2.powi(t);
                let step_size = (lr * c2.sqrt() / c1) as f32;
                let eps = (ADAM_EPS * c2.sqrt()) as f32;
                let (b1, b2) = (BETA1 as f32, BETA2 as f32);
                for ((p, m), v) in params.into_iter().zip(&mut self.first).zip(&mut self.second) {
                    for i in 0..p.value.len() {
                        let g = p.grad[i];
                        m[i] = b1 * m[i] + (1.0 - b1) * g;
                        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                        p.value[i] -= step_size * m[i] / (v[i].sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Sgd => {
                let lr = lr as f32;
                for (p, m) in params.into_iter().zip(&mut self.first) {
                    for i in 0..p.value.len() {
                        m[i] = MOMENTUM * m[i] + p.grad[i];
                        p.value[i] -= lr * m[i];
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_param() -> Param {
        Param {
            name: "x".into(),
            shape: vec![2],
            value: vec![3.0, -2.0],
            grad: vec![0.0; 2],
        }
    }

    #[test]
    fn both_optimizers_minimize_a_quadratic() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let mut p = quadratic_param();
            let mut opt = Optimizer::new(kind);
            let lr = if kind == OptimizerKind::Adam { 0.05 } else { 0.01 };
            for _ in 0..2000 {
                p.grad = p.value.iter().map(|v| 2.0 * v).collect();
                opt.step(vec![&mut p], lr).unwrap();
            }
            assert!(p.value.iter().all(|v| v.abs() < 1e-2), "{kind:?}: {:?}", p.value);
        }
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        let mut p = quadratic_param();
        p.grad = vec![10.0, -0.001];
        let mut opt = Optimizer::new(OptimizerKind::Adam);
        opt.step(vec![&mut p], 0.1).unwrap();
        assert!((p.value[0] - 2.9).abs() < 1e-4);
        assert!((p.value[1] + 1.9).abs() < 1e-3);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = LrSchedule::Cosine;
        assert_eq!(s.rate(1e-3, 0, 100), 1e-3);
        assert!((s.rate(1e-3, 50, 100) - 5e-4).abs() < 1e-12);
        assert!(s.rate(1e-3, 100, 100).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant.rate(0.2, 7, 10), 0.2);
    }
}
