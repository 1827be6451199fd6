use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices only.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with bias correction. Moments are kept per parameter tensor in the
/// order of [`ParamSet::named`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// Completed updates.
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct SavedState {
    config: AdamWConfig,
    t: u64,
}

impl AdamW {
    pub fn new<P: ParamSet>(config: AdamWConfig, params: &P) -> Self {
        let zeros: Vec<Tensor> = params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Fails without touching anything if a gradient is not
    /// finite.
    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P, lr: f64) -> Result<()> {
        let named = grads.named();
        if named.len() != self.m.len() {
            return Err(Error::Shape("gradient set does not match optimizer state".into()));
        }
        if let Some((name, _)) = named.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFinite { tensor: name.clone() });
        }
        let c = self.config;
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let inv_bc2_sqrt = (1.0 / bc2.sqrt()) as f32;
        let eps = c.eps as f32;
        for (i, p) in params.tensors_mut().into_iter().enumerate() {
            let g = named[i].1.data();
            let decay = if p.shape().len() >= 2 {
                (1.0 - lr * c.weight_decay) as f32
            } else {
                1.0
            };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                *w *= decay;
                *w -= step_size * m[j] / (v[j].sqrt() * inv_bc2_sqrt + eps);
            }
        }
        Ok(())
    }

    pub fn to_container<P: ParamSet>(&self, params: &P) -> Result<Container> {
        let state = SavedState {
            config: self.config,
            t: self.t,
        };
        let mut c = Container::new("optimizer", serde_json::to_value(state)?);
        for (i, (name, _)) in params.named().into_iter().enumerate() {
            c.insert(format!("m.{name}"), self.m[i].clone());
            c.insert(format!("v.{name}"), self.v[i].clone());
        }
        Ok(c)
    }

    pub fn from_container<P: ParamSet>(mut c: Container, params: &P) -> Result<Self> {
        if c.kind != "optimizer" {
            return Err(Error::Checkpoint(format!("expected optimizer state, got {}", c.kind)));
        }
        let state: SavedState = serde_json::from_value(c.config.clone())?;
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for (name, t) in params.named() {
            let mi = c.take(&format!("m.{name}"))?;
            let vi = c.take(&format!("v.{name}"))?;
            if mi.shape() != t.shape() || vi.shape() != t.shape() {
                return Err(Error::Shape(format!("optimizer moments for {name} have the wrong shape")));
            }
            m.push(mi);
            v.push(vi);
        }
        Ok(Self {
            config: state.config,
            t: state.t,
            m,
            v,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone)]
    struct Params {
        w: Tensor,
        b: Tensor,
    }

    impl ParamSet for Params {
        fn named(&self) -> Vec<(String, &Tensor)> {
            vec![("w".into(), &self.w), ("b".into(), &self.b)]
        }
        fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
            vec![&mut self.w, &mut self.b]
        }
    }

    fn params() -> Params {
        Params {
            w: Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap(),
            b: Tensor::new(vec![2], vec![0.25, -0.75]).unwrap(),
        }
    }

    fn grads_like(p: &Params, f: impl Fn(&str, usize, f32) -> f32) -> Params {
        let mut g = p.clone();
        for (name, t) in [("w", &mut g.w), ("b", &mut g.b)] {
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                *x = f(name, i, *x);
            }
        }
        g
    }

    #[test]
    fn zero_grads_no_decay_leave_weights() {
        let mut p = params();
        let before = p.clone();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        let g = grads_like(&p, |_, _, _| 0.0);
        for _ in 0..5 {
            opt.step(&mut p, &g, 1e-2).unwrap();
        }
        assert_eq!(p.w, before.w);
        assert_eq!(p.b, before.b);
    }

    #[test]
    fn first_step_has_size_lr() {
        let mut p = params();
        let before = p.clone();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        let g = grads_like(&p, |_, i, _| if i % 2 == 0 { 3.0 } else { -0.5 });
        opt.step(&mut p, &g, 1e-3).unwrap();
        for (a, b) in p.w.data().iter().zip(before.w.data()) {
            assert!(((a - b).abs() - 1e-3).abs() < 1e-7);
        }
    }

    #[test]
    fn decay_skips_vectors() {
        let mut p = params();
        let before = p.clone();
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.5,
                ..Default::default()
            },
            &p,
        );
        let g = grads_like(&p, |_, _, _| 0.0);
        opt.step(&mut p, &g, 0.1).unwrap();
        assert_eq!(p.b, before.b);
        for (a, b) in p.w.data().iter().zip(before.w.data()) {
            assert!((a - b * 0.95).abs() < 1e-7);
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = params();
        let before = p.clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let g = grads_like(&p, |n, i, _| if n == "b" && i == 1 { f32::NAN } else { 1.0 });
        match opt.step(&mut p, &g, 1e-3) {
            Err(Error::NonFinite { tensor }) => assert_eq!(tensor, "b"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p.w, before.w);
        assert_eq!(opt.t, 0);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(x) = Σ c_i (x_i - t_i)^2 with minimum 0 at t.
        let target = [0.3f32, -1.2, 2.0, 0.7];
        let curv = [1.0f32, 4.0, 0.5, 2.0];
        let mut p = Params {
            w: Tensor::zeros(&[2, 2]),
            b: Tensor::zeros(&[2]),
        };
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &p,
        );
        let loss = |p: &Params| -> f64 {
            p.w.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| (curv[i] * (x - target[i]).powi(2)) as f64)
                .sum()
        };
        for s in 0..500 {
            let g = grads_like(&p, |n, i, x| if n == "w" { 2.0 * curv[i] * (x - target[i]) } else { 0.0 });
            // Cosine-annealed step keeps the final iterates from oscillating.
            let lr = 0.05 * 0.5 * (1.0 + (std::f64::consts::PI * s as f64 / 500.0).cos());
            opt.step(&mut p, &g, lr).unwrap();
        }
        assert!(loss(&p) < 1e-6, "loss {}", loss(&p));
    }

    #[test]
    fn container_round_trip() {
        let mut p = params();
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let g = grads_like(&p, |_, i, _| i as f32 - 1.0);
        opt.step(&mut p, &g, 1e-2).unwrap();
        let bytes = opt.to_container(&p).unwrap().to_bytes().unwrap();
        let back = AdamW::from_container(Container::from_bytes(&bytes).unwrap(), &p).unwrap();
        assert_eq!(back, opt);
    }
}
