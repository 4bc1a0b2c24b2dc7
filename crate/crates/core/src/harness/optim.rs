use indexmap::IndexMap;

use crate::model::ParamTree;
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with decoupled weight decay. Moments are created lazily for every
/// parameter that is trainable and holds a gradient.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    moments: IndexMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Element> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, tree: &mut ParamTree<T>, lr: f64) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(lr / bc1);
        let inv_bc2_sqrt = T::lit(1.0 / bc2.sqrt());
        let eps = T::lit(c.eps);
        let decay = T::lit(1.0 - lr * c.weight_decay);
        for (path, t) in tree.iter_mut() {
            if !t.requires_grad() {
                continue;
            }
            let Some(g) = t.grad().map(<[T]>::to_vec) else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(path.to_string())
                .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            for (((p, gi), mi), vi) in t
                .data_mut()
                .iter_mut()
                .zip(&g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + one_b1 * *gi;
                *vi = b2 * *vi + one_b2 * *gi * *gi;
                let denom = vi.sqrt() * inv_bc2_sqrt + eps;
                *p = *p * decay - step_size * *mi / denom;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut tree = ParamTree::<f64>::new();
        let mut t = Tensor::new(vec![2], vec![1.0, -1.0])
            .unwrap()
            .with_requires_grad(true);
        t.accumulate_grad(&[0.5, -2.0]).unwrap();
        tree.insert("w", t).unwrap();
        let mut frozen = Tensor::new(vec![1], vec![3.0]).unwrap();
        frozen.set_requires_grad(false);
        tree.insert("f", frozen).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut tree, 0.1);
        let w = tree.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
        assert_eq!(tree.get("f").unwrap().data(), &[3.0]);
    }
}
