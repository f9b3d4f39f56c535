//! Adam with bias-corrected moment estimates.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::Module;

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            moments: HashMap::new(),
        }
    }
}

impl Adam {
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of every trainable parameter holding a gradient:
    ///
    /// ```text
    /// m ← β1·m + (1−β1)·g        v ← β2·v + (1−β2)·g²
    /// θ ← θ − lr · (m/(1−β1ᵗ)) / (√(v/(1−β2ᵗ)) + ε)
    /// ```
    ///
    /// Frozen parameters are skipped. A non-finite gradient aborts before
    /// any parameter changes. Gradients are cleared afterwards.
    pub fn step(&mut self, model: &mut dyn ModuleMut, lr: f64) -> Result<usize> {
        let mut bad = None;
        model.visit(&mut |p| {
            if bad.is_none() && !p.is_frozen() {
                if let Some(g) = p.grad() {
                    if g.iter().any(|v| !v.is_finite()) {
                        bad = Some(p.name().to_string());
                    }
                }
            }
        });
        if let Some(name) = bad {
            return Err(Error::Numerical(format!("non-finite gradient for parameter {name}")));
        }

        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let moments = &mut self.moments;
        let mut updated = 0;
        let mut failure = None;
        model.visit_mut(&mut |p| {
            if p.is_frozen() || failure.is_some() {
                return;
            }
            let Some(g) = p.grad() else { return };
            let (m, v) = moments
                .entry(p.name().to_string())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let mut next = p.data().to_vec();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                next[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
            if let Err(e) = p.set_data(next) {
                failure = Some(e);
            }
            updated += 1;
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(updated),
        }
    }
}

/// Object-safe view of a [`Module`] for the optimizer.
pub trait ModuleMut {
    fn visit(&self, f: &mut dyn FnMut(&crate::nn::Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut crate::nn::Param));
}

impl<M: Module> ModuleMut for M {
    fn visit(&self, f: &mut dyn FnMut(&crate::nn::Param)) {
        self.visit_params(f)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut crate::nn::Param)) {
        self.visit_params_mut(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;
    use crate::tensor::Tensor;

    struct Two {
        free: Param,
        fixed: Param,
    }

    impl Module for Two {
        fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
            f(&self.free);
            f(&self.fixed);
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
            f(&mut self.free);
            f(&mut self.fixed);
        }
    }

    fn two() -> Two {
        Two {
            free: Param::new("free", &[1], vec![0.5], false).unwrap(),
            fixed: Param::new("fixed", &[2], vec![1.0, 2.0], true).unwrap(),
        }
    }

    #[test]
    fn first_step_with_unit_gradient_moves_by_lr() {
        let mut m = two();
        m.free.tensor().sum().unwrap().backward().unwrap();
        let mut adam = Adam::default();
        adam.step(&mut m, 1e-3).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = −lr/(1+ε)
        let want = 0.5 - 1e-3 / (1.0 + 1e-8);
        assert!((m.free.data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut m = two();
        m.free.tensor().scale(0.0).unwrap().sum().unwrap().backward().unwrap();
        let mut adam = Adam::default();
        for _ in 0..5 {
            adam.step(&mut m, 0.1).unwrap();
        }
        assert_eq!(m.free.data(), &[0.5]);
    }

    #[test]
    fn frozen_parameters_are_bit_identical() {
        let mut m = two();
        let before: Vec<u64> = m.fixed.data().iter().map(|v| v.to_bits()).collect();
        let mut adam = Adam::default();
        for _ in 0..10 {
            m.free
                .tensor()
                .mul(m.free.tensor())
                .unwrap()
                .add(&m.fixed.tensor().sum().unwrap())
                .unwrap()
                .sum()
                .unwrap()
                .backward()
                .unwrap();
            adam.step(&mut m, 0.1).unwrap();
            assert!(m.fixed.grad().is_none());
        }
        let after: Vec<u64> = m.fixed.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
        assert_ne!(m.free.data()[0], 0.5);
    }

    #[test]
    fn overflowing_gradient_names_the_parameter() {
        let mut m = two();
        m.free.set_data(vec![1e-10]).unwrap();
        let y = Tensor::new(&[1], vec![1e308]).unwrap();
        let path = m.free.tensor().mul(&y).unwrap();
        path.add(&path.scale(1.0).unwrap()).unwrap().sum().unwrap().backward().unwrap();
        assert!(m.free.grad().unwrap()[0].is_infinite());
        let err = Adam::default().step(&mut m, 0.1).unwrap_err();
        assert!(matches!(&err, Error::Numerical(msg) if msg.contains("free")), "{err}");
        assert_eq!(m.free.data(), &[1e-10]);
    }
}
