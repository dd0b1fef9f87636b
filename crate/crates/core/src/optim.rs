//! Adam with per-parameter learning rates, and the warmup/linear-decay schedule.

use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::Gradients;
use crate::math::{self, Real};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct AdamConfig {
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    /// Global gradient-norm clip applied before the update; `None` disables.
    pub clip_norm: Option<Real>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<Real>,
    v: Vec<Real>,
    t: u64,
}

/// Adam over a [`ParamStore`]. Moment buffers are created lazily, and a
/// parameter without a gradient in a given step is left exactly as it was.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub config: AdamConfig,
    state: Vec<Option<Moments>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: Vec::new(),
        }
    }

    /// Applies one update. `lr` returns the step size for a parameter, or
    /// `None` to keep it frozen.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        mut lr: impl FnMut(ParamId) -> Option<Real>,
    ) {
        let active: Vec<(ParamId, Real, &[Real])> = grads
            .params()
            .filter_map(|(id, g)| lr(id).map(|r| (id, r, g)))
            .collect();
        let scale = match self.config.clip_norm {
            Some(max) => {
                let sq: Real = active
                    .iter()
                    .flat_map(|(_, _, g)| g.iter())
                    .map(|x| x * x)
                    .sum();
                let norm = math::sqrt(sq);
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        for (id, rate, g) in active {
            if self.state.len() <= id.index() {
                self.state.resize_with(id.index() + 1, || None);
            }
            let n = g.len();
            let st = self.state[id.index()].get_or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - powi(beta1, st.t);
            let bc2 = 1.0 - powi(beta2, st.t);
            let p = store.get_mut(id).data_mut();
            for k in 0..n {
                let gk = g[k] * scale;
                st.m[k] = beta1 * st.m[k] + (1.0 - beta1) * gk;
                st.v[k] = beta2 * st.v[k] + (1.0 - beta2) * gk * gk;
                let mhat = st.m[k] / bc1;
                let vhat = st.v[k] / bc2;
                p[k] -= rate * mhat / (math::sqrt(vhat) + eps);
            }
        }
    }
}

fn powi(x: Real, n: u64) -> Real {
    let mut r = 1.0;
    let mut b = x;
    let mut e = n;
    while e > 0 {
        if e & 1 == 1 {
            r *= b;
        }
        b *= b;
        e >>= 1;
    }
    r
}

/// Linear warmup to `peak` over `warmup_fraction` of `total_steps`, then
/// linear decay to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmupLinear {
    pub peak: Real,
    pub total_steps: usize,
    pub warmup_fraction: Real,
}

impl WarmupLinear {
    pub fn warmup_steps(&self) -> usize {
        math::round(self.warmup_fraction * self.total_steps as Real) as usize
    }

    pub fn lr(&self, step: usize) -> Real {
        let warm = self.warmup_steps();
        if step >= self.total_steps {
            return 0.0;
        }
        if step <= warm {
            if warm == 0 {
                return self.peak;
            }
            return self.peak * step as Real / warm as Real;
        }
        let remaining = (self.total_steps - warm) as Real;
        self.peak * (self.total_steps - step) as Real / remaining
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_apex_and_end() {
        let s = WarmupLinear {
            peak: 1e-3,
            total_steps: 200,
            warmup_fraction: 0.1,
        };
        assert_eq!(s.lr(20), 1e-3);
        assert_eq!(s.lr(200), 0.0);
        assert_eq!(s.lr(0), 0.0);
        assert!(s.lr(10) < s.lr(20) && s.lr(100) < s.lr(20));
    }

    #[test]
    fn adam_minimises_quadratic_and_skips_frozen() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![3.0, -2.0])).unwrap();
        let b = store.add("b", Tensor::vector(vec![1.0])).unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..500 {
            let mut t = Tape::new();
            let av = t.param(&store, a);
            let bv = t.param(&store, b);
            let sa = t.mul(av, av).unwrap();
            let sb = t.mul(bv, bv).unwrap();
            let s1 = t.sum(sa);
            let s2 = t.sum(sb);
            let l = t.add(s1, s2).unwrap();
            let g = t.backward(l).unwrap();
            opt.step(&mut store, &g, |id| (id == a).then_some(0.05));
        }
        assert!(store.get(a).norm() < 1e-2);
        assert_eq!(store.get(b).data(), &[1.0]);
    }
}
