//! Shallow and deep union fusion with hypernetwork-generated parameters.
//!
//! A parameter generation network maps the condition vector (channel,
//! browsing time, trigger item) to one flat vector per sample, which is split
//! into the shallow gate and the row-major deep-union matrices.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{glorot_uniform, Mlp, ParamStore, Tape, Var};

pub const GENERATOR_HIDDEN: usize = 64;
pub const DEFAULT_UNION_WIDTHS: [usize; 2] = [256, 128];

/// Shapes of the generated parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionLayout {
    pub gate_dim: usize,
    pub widths: Vec<usize>,
}

impl FusionLayout {
    pub fn new(gate_dim: usize, widths: Vec<usize>) -> Result<Self> {
        if gate_dim == 0 || widths.is_empty() || widths.contains(&0) {
            return Err(Error::Config(format!(
                "fusion layout needs a positive gate width and layer widths, got {gate_dim} / {widths:?}"
            )));
        }
        Ok(Self { gate_dim, widths })
    }

    /// `d_0 = 2 · gate_dim`, the width of `[v_sim, v_div]`.
    pub fn input_dim(&self) -> usize {
        2 * self.gate_dim
    }

    /// `(d_{l−1}, d_l)` per deep layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut prev = self.input_dim();
        self.widths
            .iter()
            .map(|&w| {
                let s = (prev, w);
                prev = w;
                s
            })
            .collect()
    }

    /// `gate_dim + Σ_l d_{l−1}·d_l`.
    pub fn total(&self) -> usize {
        self.gate_dim + self.layer_shapes().iter().map(|(a, b)| a * b).sum::<usize>()
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }
}

/// Generated parameters for one batch (one set per row).
#[derive(Clone, Debug)]
pub struct FusionParams {
    /// `[B, gate_dim]`, in (0, 1).
    pub gate: Var,
    /// `[B, d_{l−1}·d_l]` per layer, row-major `d_{l−1}×d_l` blocks.
    pub layers: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGenerator {
    pub mlp: Mlp,
    pub layout: FusionLayout,
}

impl ParamGenerator {
    /// Builds `cond_dim → hidden (PReLU) → layout.total()`. The output bias of
    /// each deep block starts as a Glorot sample so the deep union begins as an
    /// ordinary random network; the gate bias starts at 0 (gate 0.5).
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        cond_dim: usize,
        hidden: usize,
        layout: FusionLayout,
    ) -> Result<Self> {
        let mlp = Mlp::new(store, rng, "sduf.generator", cond_dim, &[hidden, layout.total()])?;
        let bias = mlp.output().bias.expect("generator output has a bias");
        let mut offset = layout.gate_dim;
        for (fan_in, fan_out) in layout.layer_shapes() {
            let init = glorot_uniform(rng, fan_in, fan_out);
            store.value_mut(bias).data_mut()[offset..offset + fan_in * fan_out].copy_from_slice(init.data());
            offset += fan_in * fan_out;
        }
        Self::from_parts(mlp, layout)
    }

    pub fn from_parts(mlp: Mlp, layout: FusionLayout) -> Result<Self> {
        if mlp.output_dim() != layout.total() {
            return Err(Error::Config(format!(
                "generator emits {} values but the fusion layout needs {}",
                mlp.output_dim(),
                layout.total()
            )));
        }
        Ok(Self { mlp, layout })
    }

    pub fn generate(&self, tape: &mut Tape<'_>, h_cond: Var) -> Result<FusionParams> {
        let flat = self.mlp.forward(tape, h_cond)?;
        let logits = tape.slice(flat, 1, 0, self.layout.gate_dim)?;
        let gate = tape.sigmoid(logits);
        let mut offset = self.layout.gate_dim;
        let mut layers = Vec::with_capacity(self.layout.widths.len());
        for (a, b) in self.layout.layer_shapes() {
            layers.push(tape.slice(flat, 1, offset, a * b)?);
            offset += a * b;
        }
        Ok(FusionParams { gate, layers })
    }
}

/// `W_s ⊗ v_div + (1 − W_s) ⊗ v_sim`.
pub fn shallow_union(tape: &mut Tape<'_>, v_sim: Var, v_div: Var, gate: Var) -> Result<Var> {
    if tape.shape(v_sim) != tape.shape(v_div) || tape.shape(gate) != tape.shape(v_sim) {
        return Err(Error::shape("shallow_union", tape.shape(v_sim), tape.shape(gate)));
    }
    let div_part = tape.mul(gate, v_div)?;
    let keep = tape.one_minus(gate);
    let sim_part = tape.mul(keep, v_sim)?;
    tape.add(div_part, sim_part)
}

/// `h_0 = [v_sim, v_div]`, `h_l = ReLU(h_{l−1} W_l)`; returns `h_L`.
pub fn deep_union(tape: &mut Tape<'_>, v_sim: Var, v_div: Var, layers: &[Var], widths: &[usize]) -> Result<Var> {
    if layers.len() != widths.len() || layers.is_empty() {
        return Err(Error::Contract(format!(
            "deep union has {} matrices for {} widths",
            layers.len(),
            widths.len()
        )));
    }
    let mut h = tape.concat(&[v_sim, v_div], 1)?;
    for (&w, &n) in layers.iter().zip(widths) {
        let z = tape.batched_vecmat(h, w, n)?;
        h = tape.relu(z);
    }
    Ok(h)
}
