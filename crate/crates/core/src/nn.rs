//! Small building blocks shared by the language model, Tok, Detok and the task heads.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::math::Real;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub fn uniform(rng: &mut Rng, shape: &[usize], bound: Real) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for x in t.data_mut() {
        *x = rng.gen_range(-bound..bound);
    }
    t
}

pub fn normal(rng: &mut Rng, shape: &[usize], std: Real) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for x in t.data_mut() {
        let z: Real = StandardNormal.sample(rng);
        *x = z * std;
    }
    t
}

fn fan_in_bound(fan_in: usize) -> Real {
    1.0 / crate::math::sqrt(fan_in.max(1) as Real)
}

/// Affine map `x[n, in] -> [n, out]`. Weight stored as `[in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = store.add(
            &format!("{name}.weight"),
            uniform(rng, &[in_dim, out_dim], fan_in_bound(in_dim)),
        )?;
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[out_dim]))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn bind(store: &ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: store.require(&format!("{name}.weight"), &[in_dim, out_dim])?,
            bias: store.require(&format!("{name}.bias"), &[out_dim])?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Learned gain/bias for layer normalisation.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: Real = 1e-5;

    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(&format!("{name}.gain"), Tensor::filled(&[dim], 1.0))?,
            bias: store.add(&format!("{name}.bias"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn bind(store: &ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.require(&format!("{name}.gain"), &[dim])?,
            bias: store.require(&format!("{name}.bias"), &[dim])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, Self::EPS)
    }
}

/// One LSTM layer. Gates are laid out `[input, forget, cell, output]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmCell {
    pub input_weight: ParamId,
    pub hidden_weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let bound = fan_in_bound(hidden);
        let input_weight = store.add(
            &format!("{name}.input_weight"),
            uniform(rng, &[input_dim, 4 * hidden], bound),
        )?;
        let hidden_weight = store.add(
            &format!("{name}.hidden_weight"),
            uniform(rng, &[hidden, 4 * hidden], bound),
        )?;
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].iter_mut().for_each(|x| *x = 1.0);
        let bias = store.add(&format!("{name}.bias"), Tensor::vector(b))?;
        Ok(Self {
            input_weight,
            hidden_weight,
            bias,
            input_dim,
            hidden,
        })
    }

    pub fn bind(store: &ParamStore, name: &str, input_dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            input_weight: store.require(&format!("{name}.input_weight"), &[input_dim, 4 * hidden])?,
            hidden_weight: store.require(&format!("{name}.hidden_weight"), &[hidden, 4 * hidden])?,
            bias: store.require(&format!("{name}.bias"), &[4 * hidden])?,
            input_dim,
            hidden,
        })
    }

    pub fn param_count(input_dim: usize, hidden: usize) -> usize {
        (input_dim + hidden + 1) * 4 * hidden
    }

    pub fn ids(&self) -> [ParamId; 3] {
        [self.input_weight, self.hidden_weight, self.bias]
    }

    /// One step over a batch: `x[B, in]`, `h, c: [B, hidden]` -> `(h', c')`.
    pub fn step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        let wx = tape.param(store, self.input_weight);
        let wh = tape.param(store, self.hidden_weight);
        let b = tape.param(store, self.bias);
        let zx = tape.matmul(x, wx)?;
        let zh = tape.matmul(h, wh)?;
        let z = tape.add(zx, zh)?;
        let z = tape.add_bias(z, b)?;
        let n = self.hidden;
        let i = tape.slice_cols(z, 0, n)?;
        let f = tape.slice_cols(z, n, n)?;
        let g = tape.slice_cols(z, 2 * n, n)?;
        let o = tape.slice_cols(z, 3 * n, n)?;
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c2 = tape.add(fc, ig)?;
        let tc = tape.tanh(c2);
        let h2 = tape.mul(o, tc)?;
        Ok((h2, c2))
    }

    /// Runs the cell over a sequence of `[B, in]` inputs from zero state;
    /// returns the hidden state at every step.
    pub fn run(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &[Var],
        batch: usize,
    ) -> Result<Vec<Var>> {
        let mut h = tape.constant(Tensor::zeros(&[batch, self.hidden]));
        let mut c = tape.constant(Tensor::zeros(&[batch, self.hidden]));
        let mut out = Vec::with_capacity(inputs.len());
        for &x in inputs {
            let (h2, c2) = self.step(tape, store, x, h, c)?;
            out.push(h2);
            h = h2;
            c = c2;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_params;
    use crate::rng::substream;

    #[test]
    fn lstm_gradients_match_finite_differences() {
        let mut rng = substream(3, "init");
        let mut store = ParamStore::new();
        let cell = LstmCell::init(&mut store, "cell", 3, 4, &mut rng).unwrap();
        let x0 = normal(&mut rng, &[2, 3], 1.0);
        let x1 = normal(&mut rng, &[2, 3], 1.0);
        let r = check_params(
            &mut store,
            &cell.ids(),
            |t, s| {
                let a = t.constant(x0.clone());
                let b = t.constant(x1.clone());
                let hs = cell.run(t, s, &[a, b], 2)?;
                let sq = t.mul(hs[1], hs[1])?;
                Ok(t.sum(sq))
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
