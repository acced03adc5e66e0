//! Dense building blocks shared by every network in the crate.

use rand::Rng;

use super::params::glorot_uniform;
use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Initial slope of every PReLU.
pub const PRELU_INIT: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), glorot_uniform(rng, fan_in, fan_out))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    /// `x[n×fan_in] · W + b`.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_broadcast(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Fully connected stack with PReLU between layers and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub slopes: Vec<ParamId>,
}

impl Mlp {
    /// `widths` lists every layer's output width; the last one is the output.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        widths: &[usize],
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(widths.len());
        let mut slopes = Vec::new();
        let mut fan_in = input;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Linear::new(store, rng, &format!("{name}.{i}"), fan_in, w, true)?);
            if i + 1 < widths.len() {
                slopes.push(store.add(format!("{name}.{i}.prelu"), Tensor::scalar(PRELU_INIT))?);
            }
            fan_in = w;
        }
        Ok(Self { layers, slopes })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").fan_out
    }

    pub fn output(&self) -> &Linear {
        self.layers.last().expect("at least one layer")
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if let Some(&slope) = self.slopes.get(i) {
                let a = tape.param(slope);
                h = tape.prelu(h, a)?;
            }
        }
        Ok(h)
    }

    /// All parameter ids owned by the stack.
    pub fn params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weight);
            out.extend(l.bias);
        }
        out.extend(&self.slopes);
        out
    }
}
