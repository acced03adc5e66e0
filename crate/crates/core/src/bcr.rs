//! Bi-dimensional compression of activation scores.
//!
//! The user-interest side compresses the `T×K` score grid along the attribute
//! axis and pools whole behavior embeddings; the item-information side
//! compresses along the sequence axis and re-weights target attributes (or the
//! trigger/target crosses). Using the dual scores instead of the
//! target-activated ones turns each diversity representation into its
//! similarity counterpart.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Mlp, ParamStore, Tape, Tensor, Var};

pub const AGGREGATED_DIM: usize = 128;
pub const AGGREGATOR_HIDDEN: usize = 128;

/// All four re-expressions plus their aggregated forms.
#[derive(Clone, Copy, Debug)]
pub struct BcrOutput {
    pub v_u_div: Var,
    pub v_u_sim: Var,
    pub v_i_div: Var,
    pub v_i_sim: Var,
    pub v_sim: Var,
    pub v_div: Var,
}

/// `Σ_i mean_k(w[b,i,k]) · e_s[b,i,:]` for `w[B×T×K]`, `e_s[B×T×D]`.
fn compress_attributes(tape: &mut Tape<'_>, scores: Var, seq_emb: Var) -> Result<Var> {
    let (ws, es) = (tape.shape(scores).to_vec(), tape.shape(seq_emb).to_vec());
    if ws.len() != 3 || es.len() != 3 || ws[..2] != es[..2] {
        return Err(Error::shape("uiem", &ws, &es));
    }
    let (b, t) = (ws[0], ws[1]);
    let per_row = tape.mean(scores, 2)?;
    let per_row = tape.reshape(per_row, vec![b, t, 1])?;
    let weighted = tape.mul_broadcast(seq_emb, per_row)?;
    tape.sum(weighted, 1)
}

/// `Σ_k (inv_len · Σ_i w[b,i,k]) · vectors[k][b,:]`.
fn compress_sequence(tape: &mut Tape<'_>, scores: Var, inv_len: Var, vectors: &[Var]) -> Result<Var> {
    let ws = tape.shape(scores).to_vec();
    if ws.len() != 3 || ws[2] != vectors.len() || vectors.is_empty() {
        return Err(Error::shape("iiem", &ws, &[vectors.len()]));
    }
    let b = ws[0];
    let d = tape.shape(vectors[0])[1];
    let per_attr = tape.sum(scores, 1)?;
    let inv = tape.reshape(inv_len, vec![b, 1])?;
    let per_attr = tape.mul_broadcast(per_attr, inv)?;
    let per_attr = tape.reshape(per_attr, vec![b, vectors.len(), 1])?;
    let stacked = vectors
        .iter()
        .map(|&v| {
            if tape.shape(v) != [b, d] {
                return Err(Error::shape("iiem", tape.shape(v), &[b, d]));
            }
            tape.reshape(v, vec![b, 1, d])
        })
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.concat(&stacked, 1)?;
    let weighted = tape.mul_broadcast(stacked, per_attr)?;
    tape.sum(weighted, 1)
}

/// Diversity representation of user interests, from target-activated scores.
pub fn uiem_diversity(tape: &mut Tape<'_>, w_ta: Var, seq_emb: Var) -> Result<Var> {
    compress_attributes(tape, w_ta, seq_emb)
}

/// Similarity representation of user interests, from dual scores.
pub fn uiem_similarity(tape: &mut Tape<'_>, w_tt: Var, seq_emb: Var) -> Result<Var> {
    compress_attributes(tape, w_tt, seq_emb)
}

/// Diversity representation of item information: target attributes weighted
/// by their mean target-activated score over the valid positions.
pub fn iiem_diversity(tape: &mut Tape<'_>, w_ta: Var, inv_len: Var, target_attrs: &[Var]) -> Result<Var> {
    compress_sequence(tape, w_ta, inv_len, target_attrs)
}

/// Similarity representation of item information: the trigger/target crosses
/// weighted by mean dual scores.
pub fn iiem_similarity(tape: &mut Tape<'_>, w_tt: Var, inv_len: Var, crosses: &[Var]) -> Result<Var> {
    compress_sequence(tape, w_tt, inv_len, crosses)
}

/// `1/seq_len` per row (0 for empty sequences) as a constant `[B]` input.
pub fn inv_len_input(tape: &mut Tape<'_>, inv_len: Vec<f64>) -> Var {
    tape.constant(Tensor::vector(inv_len))
}

/// Separate MLPs producing `v_sim` and `v_div` of equal width.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregator {
    pub sim: Mlp,
    pub div: Mlp,
}

impl Aggregator {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        user_dim: usize,
        item_dim: usize,
        hidden: usize,
        out: usize,
    ) -> Result<Self> {
        Ok(Self {
            sim: Mlp::new(store, rng, "bcr.sim", user_dim + item_dim, &[hidden, out])?,
            div: Mlp::new(store, rng, "bcr.div", user_dim + item_dim, &[hidden, out])?,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.sim.output_dim()
    }

    /// `(MLP_sim([v_U_sim, v_I_sim]), MLP_div([v_U_div, v_I_div]))`.
    pub fn aggregate(
        &self,
        tape: &mut Tape<'_>,
        v_u_sim: Var,
        v_i_sim: Var,
        v_u_div: Var,
        v_i_div: Var,
    ) -> Result<(Var, Var)> {
        let sim_in = tape.concat(&[v_u_sim, v_i_sim], 1)?;
        let div_in = tape.concat(&[v_u_div, v_i_div], 1)?;
        Ok((self.sim.forward(tape, sim_in)?, self.div.forward(tape, div_in)?))
    }
}
