//! Ranger: Rectified Adam wrapped in Lookahead.
//!
//! The inner optimizer is RAdam. While the variance-rectification length
//! `rho_t` is at most 4 the update is plain bias-corrected momentum; after
//! that the adaptive step is scaled by the rectification term. Every `k`
//! inner steps Lookahead moves the slow weights a fraction `alpha` toward the
//! fast weights and restarts the fast weights from there.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ntf::NamedTensors;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RangerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lookahead_k: usize,
    pub lookahead_alpha: f64,
}

impl Default for RangerConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.95,
            beta2: 0.999,
            eps: 1e-5,
            lookahead_k: 6,
            lookahead_alpha: 0.5,
        }
    }
}

impl RangerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.lookahead_k >= 1
            && self.lookahead_alpha > 0.0
            && self.lookahead_alpha <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid optimizer settings: {self:?}")))
        }
    }

    fn rho_inf(&self) -> f64 {
        2.0 / (1.0 - self.beta2) - 1.0
    }

    /// Rectification length after `t` steps (t >= 1).
    pub fn rho(&self, t: u64) -> f64 {
        let b2t = self.beta2.powi(t as i32);
        self.rho_inf() - 2.0 * t as f64 * b2t / (1.0 - b2t)
    }

    /// Multiplier applied to the bias-corrected momentum at step `t`, or
    /// `None` while the un-rectified update is in force.
    pub fn rectifier(&self, t: u64) -> Option<f64> {
        let rho = self.rho(t);
        if rho <= 4.0 {
            return None;
        }
        let inf = self.rho_inf();
        Some(((rho - 4.0) * (rho - 2.0) * inf / ((inf - 4.0) * (inf - 2.0) * rho)).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ranger<T> {
    pub config: RangerConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    slow: Vec<Tensor<T>>,
}

impl<T: Scalar> Ranger<T> {
    pub fn new(params: &[Tensor<T>], config: RangerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            slow: params.to_vec(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. Nothing is modified when an error is returned.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "ranger_step",
                format!(
                    "{} params / {} grads for optimizer over {} tensors",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() || g.shape() != p.shape() {
                return Err(Error::shape(
                    "ranger_step",
                    format!(
                        "tensor {i}: param {:?}, grad {:?}, state {:?}",
                        p.shape(),
                        g.shape(),
                        self.m[i].shape()
                    ),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of tensor {i}")));
            }
        }

        self.step += 1;
        let t = self.step;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (ob1, ob2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let bias1 = 1.0 - c.beta1.powi(t as i32);
        let bias2 = 1.0 - c.beta2.powi(t as i32);
        let rect = c.rectifier(t);
        let eps = T::of(c.eps);

        for i in 0..params.len() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params[i].data_mut();
            let g = grads[i].data();
            match rect {
                None => {
                    let k = T::of(c.lr / bias1);
                    for j in 0..p.len() {
                        m[j] = b1 * m[j] + ob1 * g[j];
                        v[j] = b2 * v[j] + ob2 * g[j] * g[j];
                        p[j] -= k * m[j];
                    }
                }
                Some(r) => {
                    let k = T::of(c.lr * r / bias1);
                    let s2 = T::of(bias2.sqrt());
                    for j in 0..p.len() {
                        m[j] = b1 * m[j] + ob1 * g[j];
                        v[j] = b2 * v[j] + ob2 * g[j] * g[j];
                        p[j] -= k * m[j] * s2 / (v[j].sqrt() + eps);
                    }
                }
            }
        }

        if t.is_multiple_of(c.lookahead_k as u64) {
            let a = T::of(c.lookahead_alpha);
            for (slow, fast) in self.slow.iter_mut().zip(params.iter_mut()) {
                let s = slow.data_mut();
                let f = fast.data_mut();
                for (s, f) in s.iter_mut().zip(f.iter_mut()) {
                    *s += a * (*f - *s);
                    *f = *s;
                }
            }
        }
        Ok(())
    }

    pub fn to_named(&self) -> NamedTensors {
        let mut nt = NamedTensors::new();
        nt.insert_json(
            "state",
            &serde_json::json!({ "step": self.step, "config": self.config, "tensors": self.m.len() }),
        );
        for i in 0..self.m.len() {
            nt.insert_float(format!("m/{i}"), &self.m[i]);
            nt.insert_float(format!("v/{i}"), &self.v[i]);
            nt.insert_float(format!("slow/{i}"), &self.slow[i]);
        }
        nt
    }

    pub fn from_named(nt: &NamedTensors) -> Result<Self> {
        let state = nt.json("state")?;
        let step = state["step"]
            .as_u64()
            .ok_or_else(|| Error::format("optimizer state lacks `step`"))?;
        let config: RangerConfig = serde_json::from_value(state["config"].clone())?;
        let n = state["tensors"]
            .as_u64()
            .ok_or_else(|| Error::format("optimizer state lacks `tensors`"))? as usize;
        let load =
            |kind: &str| -> Result<Vec<Tensor<T>>> { (0..n).map(|i| nt.float(&format!("{kind}/{i}"))).collect() };
        Ok(Self {
            config,
            step,
            m: load("m")?,
            v: load("v")?,
            slow: load("slow")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent scalar re-statement of the update rule, used as the oracle.
    fn simulate(cfg: RangerConfig, x0: f64, steps: usize) -> Vec<f64> {
        let (mut x, mut m, mut v, mut slow) = (x0, 0.0, 0.0, x0);
        let rho_inf = 2.0 / (1.0 - cfg.beta2) - 1.0;
        let mut xs = Vec::new();
        for t in 1..=steps {
            let g = 2.0 * x;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mhat = m / (1.0 - cfg.beta1.powi(t as i32));
            let b2t = cfg.beta2.powi(t as i32);
            let rho = rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t);
            if rho > 4.0 {
                let r = ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt();
                let l = (1.0 - b2t).sqrt() / (v.sqrt() + cfg.eps);
                x -= cfg.lr * r * mhat * l;
            } else {
                x -= cfg.lr * mhat;
            }
            if t % cfg.lookahead_k == 0 {
                slow += cfg.lookahead_alpha * (x - slow);
                x = slow;
            }
            xs.push(x);
        }
        xs
    }

    fn run(cfg: RangerConfig, x0: f64, steps: usize) -> Vec<f64> {
        let mut p = vec![Tensor::new(vec![1], vec![x0]).unwrap()];
        let mut opt = Ranger::new(&p, cfg).unwrap();
        let mut xs = Vec::new();
        for _ in 0..steps {
            let g = vec![p[0].map(|&x| 2.0 * x)];
            opt.step(&mut p, &g).unwrap();
            xs.push(p[0].item());
        }
        xs
    }

    #[test]
    fn matches_scalar_simulation_on_quadratic_bowl() {
        let cfg = RangerConfig::default();
        let got = run(cfg, 1.0, 200);
        let want = simulate(cfg, 1.0, 200);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
        }
        assert!(got[199].abs() < 1.0);
    }

    #[test]
    fn bowl_loss_non_increasing_at_lookahead_syncs() {
        let cfg = RangerConfig::default();
        let xs = run(cfg, 1.0, 200);
        let synced: Vec<f64> = xs
            .iter()
            .enumerate()
            .filter(|(i, _)| (i + 1) % cfg.lookahead_k == 0)
            .map(|(_, x)| x * x)
            .collect();
        assert!(synced.windows(2).all(|w| w[1] <= w[0]), "{synced:?}");
    }

    #[test]
    fn degenerate_lookahead_is_plain_radam() {
        let base = RangerConfig::default();
        let trivial = RangerConfig {
            lookahead_k: 1,
            lookahead_alpha: 1.0,
            ..base
        };
        let never = RangerConfig {
            lookahead_k: 1000,
            ..base
        };
        assert_eq!(run(trivial, 0.7, 100), run(never, 0.7, 100));
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let p0 = Tensor::new(vec![3], vec![1.0f32, -2.0, 0.5]).unwrap();
        let mut p = vec![p0.clone()];
        let mut opt = Ranger::new(&p, RangerConfig::default()).unwrap();
        for _ in 0..20 {
            opt.step(&mut p, &[Tensor::zeros(vec![3])]).unwrap();
        }
        assert_eq!(p[0], p0);
        assert_eq!(opt.steps(), 20);
    }

    #[test]
    fn non_finite_gradient_rejected_without_side_effects() {
        let p0 = Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap();
        let mut p = vec![p0.clone()];
        let mut opt = Ranger::new(&p, RangerConfig::default()).unwrap();
        let bad = Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(opt.step(&mut p, &[bad]), Err(Error::NonFinite(_))));
        assert_eq!(p[0], p0);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn warmup_uses_unrectified_update() {
        let cfg = RangerConfig::default();
        assert!(cfg.rectifier(1).is_none());
        assert!(cfg.rho(1) <= 4.0);
        let first_rect = (1..100).find(|&t| cfg.rectifier(t).is_some()).unwrap();
        assert!(cfg.rho(first_rect) > 4.0 && cfg.rho(first_rect - 1) <= 4.0);
    }

    #[test]
    fn state_round_trip() {
        let mut p = vec![Tensor::new(vec![2], vec![1.0f32, 2.0]).unwrap()];
        let mut opt = Ranger::new(&p, RangerConfig::default()).unwrap();
        for _ in 0..7 {
            let g = vec![p[0].clone()];
            opt.step(&mut p, &g).unwrap();
        }
        let back = Ranger::<f32>::from_named(&opt.to_named()).unwrap();
        assert_eq!(back.steps(), 7);
        assert_eq!(back.m, opt.m);
        assert_eq!(back.slow, opt.slow);
    }
}
