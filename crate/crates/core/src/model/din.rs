use rand::Rng;

use super::config::ModelConfig;
use super::dpan::embed_batch;
use super::ModelOutput;
use crate::aavg::{activate_sequence, ActivationUnit};
use crate::error::Result;
use crate::features::{Batch, EmbeddingDims, EmbeddingTables, VocabManifest};
use crate::numerics::{Mlp, ParamStore, Tape, Var};

/// DIN over whole-item embeddings, with a second attention pooling queried by
/// the trigger.
#[derive(Clone, Debug, PartialEq)]
pub struct Din {
    pub embeddings: EmbeddingTables,
    pub target_unit: ActivationUnit,
    pub trigger_unit: ActivationUnit,
    pub scorer: Mlp,
}

/// `Σ_i w_i · e_s[b,i,:]` with `w[B×T]` already masked.
fn pool(tape: &mut Tape<'_>, w: Var, seq: Var) -> Result<Var> {
    let (b, t) = (tape.shape(w)[0], tape.shape(w)[1]);
    let w = tape.reshape(w, vec![b, t, 1])?;
    let weighted = tape.mul_broadcast(seq, w)?;
    tape.sum(weighted, 1)
}

impl Din {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig, manifest: &VocabManifest) -> Result<Self> {
        let kd = manifest.num_attributes() * cfg.attr_dim;
        let embeddings = EmbeddingTables::new(
            store,
            rng,
            manifest,
            EmbeddingDims {
                attr: cfg.attr_dim,
                user: cfg.user_dim,
                context: cfg.context_dim,
            },
            cfg.embedding_init,
        )?;
        let target_unit = ActivationUnit::new(store, rng, "din.target_unit", kd, cfg.unit_hidden)?;
        let trigger_unit = ActivationUnit::new(store, rng, "din.trigger_unit", kd, cfg.unit_hidden)?;
        let mut widths = cfg.scoring_widths.clone();
        widths.push(1);
        let scorer = Mlp::new(store, rng, "score", 4 * kd + cfg.user_dim + 2 * cfg.context_dim, &widths)?;
        Ok(Self {
            embeddings,
            target_unit,
            trigger_unit,
            scorer,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, batch: &Batch) -> Result<ModelOutput> {
        let b = batch.size;
        let e = embed_batch(&self.embeddings, tape, batch, |_| true)?;
        let seq = tape.concat(&e.seq, 2)?;
        let e_tr = tape.concat(&e.trigger, 1)?;
        let e_ta = tape.concat(&e.target, 1)?;
        let w_ta = activate_sequence(tape, &self.target_unit, seq, e_ta, e.mask)?;
        let w_tr = activate_sequence(tape, &self.trigger_unit, seq, e_tr, e.mask)?;
        let pooled_ta = pool(tape, w_ta, seq)?;
        let pooled_tr = pool(tape, w_tr, seq)?;
        let x = tape.concat(&[pooled_ta, pooled_tr, e_tr, e_ta, e.user, e.context], 1)?;
        let logit = self.scorer.forward(tape, x)?;
        let logit = tape.reshape(logit, vec![b])?;
        Ok(ModelOutput {
            p_click: tape.sigmoid(logit),
            aux_probs: None,
            diagnostics: None,
        })
    }
}
