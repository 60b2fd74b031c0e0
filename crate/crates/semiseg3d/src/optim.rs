//! AdamW: adaptive moments with decoupled weight decay.

use crate::error::Result;
use crate::network::ParamSet;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    m: Option<ParamSet>,
    v: Option<ParamSet>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        AdamW {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: None,
            v: None,
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One decoupled-weight-decay update: `p -= lr*wd*p + lr*m_hat/(sqrt(v_hat)+eps)`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        params.congruent(grads)?;
        if self.m.is_none() {
            self.m = Some(params.zeros_like());
            self.v = Some(params.zeros_like());
        }
        let m = self.m.as_mut().unwrap();
        let v = self.v.as_mut().unwrap();
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let lr = self.learning_rate;
        let wd = self.weight_decay;
        for i in 0..params.len() {
            let name = params.entries()[i].name.clone();
            let g = grads.get(&name);
            let mi = m.get_mut(&name);
            for (mv, &gv) in mi.iter_mut().zip(g.iter()) {
                *mv = (self.beta1 * *mv as f64 + (1.0 - self.beta1) * gv as f64) as f32;
            }
            let vi = v.get_mut(&name);
            for (vv, &gv) in vi.iter_mut().zip(g.iter()) {
                *vv = (self.beta2 * *vv as f64 + (1.0 - self.beta2) * (gv as f64) * (gv as f64)) as f32;
            }
            let mi = m.get(&name).to_vec();
            let vi = v.get(&name).to_vec();
            let p = params.get_mut(&name);
            for k in 0..p.len() {
                let m_hat = mi[k] as f64 / bc1;
                let v_hat = vi[k] as f64 / bc2;
                let update = lr * (m_hat / (v_hat.sqrt() + self.eps) + wd * p[k] as f64);
                p[k] = (p[k] as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f32) -> ParamSet {
        let mut p = ParamSet::default();
        p.push("w", vec![1], vec![value]);
        p
    }

    #[test]
    fn descends_a_quadratic() {
        // minimize (w - 3)^2
        let mut params = single_param(0.0);
        let mut opt = AdamW::new(0.1, 0.0);
        for _ in 0..500 {
            let w = params.get("w")[0];
            let mut g = params.zeros_like();
            g.get_mut("w")[0] = 2.0 * (w - 3.0);
            opt.step(&mut params, &g).unwrap();
        }
        assert!((params.get("w")[0] - 3.0).abs() < 1e-2);
        assert_eq!(opt.steps(), 500);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut params = single_param(2.0);
        let mut opt = AdamW::new(0.01, 0.5);
        let g = params.zeros_like(); // zero gradient: only decay acts
        opt.step(&mut params, &g).unwrap();
        let expected = 2.0 * (1.0 - 0.01 * 0.5);
        assert!((params.get("w")[0] - expected).abs() < 1e-7);
    }

    #[test]
    fn updates_are_deterministic() {
        let run = || {
            let mut params = single_param(1.0);
            let mut opt = AdamW::new(0.05, 0.01);
            for i in 0..10 {
                let mut g = params.zeros_like();
                g.get_mut("w")[0] = (i as f32  * 0.3).sin();
                opt.step(&mut params, &g).unwrap();
            }
            params.get("w")[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn rejects_mismatched_structures() {
        let mut params = single_param(0.0);
        let mut other = ParamSet::default();
        other.push("different", vec![1], vec![0.0]);
        let mut opt = AdamW::new(0.1, 0.0);
        assert!(opt.step(&mut params, &other).is_err());
    }
}
