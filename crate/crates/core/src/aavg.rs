//! Attribute-aware activation values.
//!
//! Each attribute `k` owns one activation unit. The unit scores every behavior
//! attribute `a^s_ik` against the trigger attribute and against the target
//! attribute, and also scores the trigger/target pair itself for the auxiliary
//! per-attribute click prediction. Scores are raw unit outputs; they are not
//! normalised across positions.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Mlp, ParamId, ParamStore, Tape, Var};

pub const UNIT_HIDDEN: usize = 32;
pub const DEFAULT_ALPHA: f64 = 0.1;

/// `[first, second, first ⊙ second] → hidden (PReLU) → 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationUnit {
    pub mlp: Mlp,
    pub dim: usize,
}

impl ActivationUnit {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, rng, name, 3 * dim, &[hidden, 1])?,
            dim,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mlp.params()
    }

    /// Scores matching rows of `first[N×d]` and `second[N×d]`. Returns the
    /// `[N]` outputs and the `[N×d]` Hadamard cross.
    pub fn score(&self, tape: &mut Tape<'_>, first: Var, second: Var) -> Result<(Var, Var)> {
        let cross = tape.mul(first, second)?;
        let input = tape.concat(&[first, second, cross], 1)?;
        let out = self.mlp.forward(tape, input)?;
        let n = tape.shape(out)[0];
        Ok((tape.reshape(out, vec![n])?, cross))
    }
}

/// Score grids over the active attributes.
#[derive(Clone, Debug)]
pub struct ActivationScores {
    /// `[B, T, K]` trigger-activated scores.
    pub w_tr: Var,
    /// `[B, T, K]` target-activated scores.
    pub w_ta: Var,
    /// `[B, T, K]` dual scores `w_tr · w_ta`.
    pub w_tt: Var,
    /// `[B, K]` unit logits for the trigger/target pair.
    pub aux_logits: Var,
    /// `[B, K]` sigmoid of `aux_logits`.
    pub aux_probs: Var,
    /// Per attribute, `[B, d]` cross `a^tr_k ⊙ a^ta_k`.
    pub cross: Vec<Var>,
}

/// Lookups handed to AAVG: one entry per active attribute.
#[derive(Clone, Debug)]
pub struct AttributeInputs {
    /// `[B, T, d]`
    pub seq: Vec<Var>,
    /// `[B, d]`
    pub trigger: Vec<Var>,
    /// `[B, d]`
    pub target: Vec<Var>,
    /// `[B, T]` with 1 on valid positions.
    pub mask: Var,
}

fn expand_query(tape: &mut Tape<'_>, query: Var, t: usize) -> Result<Var> {
    let (b, d) = (tape.shape(query)[0], tape.shape(query)[1]);
    let q = tape.reshape(query, vec![b, 1, d])?;
    let q = tape.broadcast_to(q, vec![b, t, d])?;
    tape.reshape(q, vec![b * t, d])
}

/// Scores `seq[B×T×d]` against `query[B×d]` with `unit`; masked positions are 0.
pub fn activate_sequence(
    tape: &mut Tape<'_>,
    unit: &ActivationUnit,
    seq: Var,
    query: Var,
    mask: Var,
) -> Result<Var> {
    let s = tape.shape(seq).to_vec();
    if s.len() != 3 || tape.shape(query) != [s[0], s[2]] || tape.shape(mask) != [s[0], s[1]] {
        return Err(Error::shape("activate_sequence", &s, tape.shape(query)));
    }
    let (b, t, d) = (s[0], s[1], s[2]);
    let keys = tape.reshape(seq, vec![b * t, d])?;
    let queries = expand_query(tape, query, t)?;
    let (scores, _) = unit.score(tape, keys, queries)?;
    let scores = tape.reshape(scores, vec![b, t])?;
    tape.mul(scores, mask)
}

pub fn dual_scores(tape: &mut Tape<'_>, w_tr: Var, w_ta: Var) -> Result<Var> {
    tape.mul(w_tr, w_ta)
}

/// `ŷ_k = σ(unit_k([a^tr_k, a^ta_k, a^tr_k ⊙ a^ta_k]))`; returns (logit, prob, cross).
pub fn aux_prediction(
    tape: &mut Tape<'_>,
    unit: &ActivationUnit,
    trigger: Var,
    target: Var,
) -> Result<(Var, Var, Var)> {
    let (logit, cross) = unit.score(tape, trigger, target)?;
    let prob = tape.sigmoid(logit);
    Ok((logit, prob, cross))
}

/// Mean binary cross-entropy of one attribute's auxiliary predictions.
pub fn aux_loss(tape: &mut Tape<'_>, probs: Var, labels: &[f64]) -> Result<Var> {
    tape.bce(probs, labels)
}

/// Activation units for a set of attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct Aavg {
    pub units: Vec<ActivationUnit>,
}

impl Aavg {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        attribute_names: &[String],
        dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        let units = attribute_names
            .iter()
            .map(|n| ActivationUnit::new(store, rng, &format!("aavg.{n}"), dim, hidden))
            .collect::<Result<_>>()?;
        Ok(Self { units })
    }

    /// Scores every active attribute. `active[j]` is the unit index for
    /// `inputs.*[j]`.
    ///
    /// All three scorings of one attribute go through a single unit pass, so
    /// the sequence scores and the auxiliary prediction are computed by the
    /// same parameter tensors.
    pub fn forward(&self, tape: &mut Tape<'_>, inputs: &AttributeInputs, active: &[usize]) -> Result<ActivationScores> {
        let n_active = active.len();
        if inputs.seq.len() != n_active || inputs.trigger.len() != n_active || inputs.target.len() != n_active {
            return Err(Error::Contract("attribute inputs do not match the active set".into()));
        }
        let (b, t) = (tape.shape(inputs.mask)[0], tape.shape(inputs.mask)[1]);
        let mut w_tr = Vec::with_capacity(n_active);
        let mut w_ta = Vec::with_capacity(n_active);
        let mut logits = Vec::with_capacity(n_active);
        let mut cross = Vec::with_capacity(n_active);
        for (j, &k) in active.iter().enumerate() {
            let unit = &self.units[k];
            let d = unit.dim;
            let seq = tape.reshape(inputs.seq[j], vec![b * t, d])?;
            let q_tr = expand_query(tape, inputs.trigger[j], t)?;
            let q_ta = expand_query(tape, inputs.target[j], t)?;
            let first = tape.concat(&[seq, seq, inputs.trigger[j]], 0)?;
            let second = tape.concat(&[q_tr, q_ta, inputs.target[j]], 0)?;
            let (scores, crossed) = unit.score(tape, first, second)?;

            let tr = tape.slice(scores, 0, 0, b * t)?;
            let tr = tape.reshape(tr, vec![b, t])?;
            let tr = tape.mul(tr, inputs.mask)?;
            w_tr.push(tape.reshape(tr, vec![b, t, 1])?);

            let ta = tape.slice(scores, 0, b * t, b * t)?;
            let ta = tape.reshape(ta, vec![b, t])?;
            let ta = tape.mul(ta, inputs.mask)?;
            w_ta.push(tape.reshape(ta, vec![b, t, 1])?);

            let logit = tape.slice(scores, 0, 2 * b * t, b)?;
            logits.push(tape.reshape(logit, vec![b, 1])?);
            cross.push(tape.slice(crossed, 0, 2 * b * t, b)?);
        }
        let w_tr = tape.concat(&w_tr, 2)?;
        let w_ta = tape.concat(&w_ta, 2)?;
        let w_tt = dual_scores(tape, w_tr, w_ta)?;
        let aux_logits = tape.concat(&logits, 1)?;
        let aux_probs = tape.sigmoid(aux_logits);
        Ok(ActivationScores {
            w_tr,
            w_ta,
            w_tt,
            aux_logits,
            aux_probs,
            cross,
        })
    }

    /// `Σ_k Loss^aux_k` over the active attributes.
    pub fn total_aux_loss(&self, tape: &mut Tape<'_>, scores: &ActivationScores, labels: &[f64]) -> Result<Var> {
        let k = tape.shape(scores.aux_probs)[1];
        let mut total = None;
        for j in 0..k {
            let p = tape.slice(scores.aux_probs, 1, j, 1)?;
            let n = tape.shape(p)[0];
            let p = tape.reshape(p, vec![n])?;
            let l = aux_loss(tape, p, labels)?;
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        total.ok_or_else(|| Error::Contract("no active attributes".into()))
    }
}
