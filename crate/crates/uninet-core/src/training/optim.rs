//! AdamW: adaptive moments with decoupled weight decay.

use std::collections::HashMap;

use indexmap::IndexMap;

use crate::nets::ParamSet;
use crate::tensor::Tensor;

pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: HashMap<String, Tensor>,
    v: HashMap<String, Tensor>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// One update over every parameter with a gradient. Parameters are
    /// visited in sorted-name order; `lr_scale` multiplies the step size per
    /// name (used for the optional per-head learning-rate multiplier).
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &IndexMap<String, Tensor>,
        lr: f64,
        lr_scale: &dyn Fn(&str) -> f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut names: Vec<&String> = grads.keys().collect();
        names.sort();
        for name in names {
            let g = &grads[name.as_str()];
            let Some(p) = params.get(name) else { continue };
            let mut p = p.clone();
            let lr_eff = lr * lr_scale(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            {
                let md = m.data_mut();
                let vd = v.data_mut();
                let pd = p.data_mut();
                for i in 0..g.numel() {
                    let gi = g.data()[i];
                    md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                    vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                    let mhat = md[i] / bc1;
                    let vhat = vd[i] / bc2;
                    pd[i] -= lr_eff * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * pd[i]);
                }
            }
            params.insert(name.clone(), p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn converges_on_quadratic() {
        // minimize (x - 3)^2 elementwise
        let mut params = ParamSet::default();
        params.insert("w".into(), Tensor::zeros(&[4]));
        let mut opt = AdamW::new(0.0);
        for _ in 0..2000 {
            let w = params.get("w").unwrap();
            let grad = w.map(|x| 2.0 * (x - 3.0));
            let mut grads = IndexMap::new();
            grads.insert("w".to_string(), grad);
            opt.step(&mut params, &grads, 0.05, &|_| 1.0);
        }
        for &x in params.get("w").unwrap().data() {
            assert!((x - 3.0).abs() < 1e-3, "{x}");
        }
    }
}
