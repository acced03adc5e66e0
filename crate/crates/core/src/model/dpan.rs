use rand::Rng;

use super::config::ModelConfig;
use super::{DpanDiagnostics, ModelOutput};
use crate::aavg::{Aavg, AttributeInputs};
use crate::bcr::{self, Aggregator, BcrOutput};
use crate::error::{Error, Result};
use crate::features::{Batch, EmbeddingDims, EmbeddingTables, VocabManifest};
use crate::numerics::{Mlp, ParamStore, Tape, Tensor, Var};
use crate::sduf::{deep_union, shallow_union, FusionLayout, ParamGenerator};

/// Full network. Ablation flags change only the forward wiring; every
/// parameter exists under every flag combination.
#[derive(Clone, Debug, PartialEq)]
pub struct Dpan {
    pub embeddings: EmbeddingTables,
    pub aavg: Aavg,
    pub aggregator: Aggregator,
    pub generator: ParamGenerator,
    pub scorer: Mlp,
}

/// Shared embedding lookups for one batch.
pub(crate) struct Embedded {
    /// Per attribute, `[B, T, d]`.
    pub seq: Vec<Var>,
    /// Per attribute, `[B, d]`.
    pub trigger: Vec<Var>,
    pub target: Vec<Var>,
    /// `[B, T]`
    pub mask: Var,
    pub user: Var,
    pub context: Var,
}

pub(crate) fn embed_batch(
    tables: &EmbeddingTables,
    tape: &mut Tape<'_>,
    batch: &Batch,
    keep: impl Fn(usize) -> bool,
) -> Result<Embedded> {
    let (b, t, d) = (batch.size, batch.seq_cap, tables.dims.attr);
    let k = tables.num_attributes();
    if batch.num_attributes() != k {
        return Err(Error::Contract(format!(
            "batch has {} attributes, model expects {k}",
            batch.num_attributes()
        )));
    }
    let mut out = Embedded {
        seq: Vec::with_capacity(k),
        trigger: Vec::with_capacity(k),
        target: Vec::with_capacity(k),
        mask: tape.constant(Tensor::new(vec![b, t], batch.mask.clone())?),
        user: tables.embed_user(tape, &batch.users)?,
        context: tables.embed_context(tape, &batch.channels, &batch.times)?,
    };
    for a in 0..k {
        if keep(a) {
            out.seq.push(tables.attr(tape, a, &batch.seq[a], &[b, t])?);
            out.trigger.push(tables.attr(tape, a, &batch.trigger[a], &[b])?);
            out.target.push(tables.attr(tape, a, &batch.target[a], &[b])?);
        } else {
            out.seq.push(tape.constant(Tensor::zeros(vec![b, t, d])));
            out.trigger.push(tape.constant(Tensor::zeros(vec![b, d])));
            out.target.push(tape.constant(Tensor::zeros(vec![b, d])));
        }
    }
    Ok(out)
}

impl Dpan {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig, manifest: &VocabManifest) -> Result<Self> {
        let k = manifest.num_attributes();
        let d = cfg.attr_dim;
        let embeddings = EmbeddingTables::new(
            store,
            rng,
            manifest,
            EmbeddingDims {
                attr: d,
                user: cfg.user_dim,
                context: cfg.context_dim,
            },
            cfg.embedding_init,
        )?;
        let names: Vec<String> = manifest.attributes.iter().map(|(n, _)| n.clone()).collect();
        let aavg = Aavg::new(store, rng, &names, d, cfg.unit_hidden)?;
        let aggregator = Aggregator::new(store, rng, k * d, d, cfg.aggregator_hidden, cfg.aggregated_dim)?;
        let layout = FusionLayout::new(cfg.aggregated_dim, cfg.union_widths.clone())?;
        let cond_dim = 2 * cfg.context_dim + k * d;
        let union_out = layout.output_dim();
        let generator = ParamGenerator::new(store, rng, cond_dim, cfg.generator_hidden, layout)?;
        let score_in = cfg.aggregated_dim + union_out + 2 * k * d + cfg.user_dim + 2 * cfg.context_dim;
        let mut widths = cfg.scoring_widths.clone();
        widths.push(1);
        let scorer = Mlp::new(store, rng, "score", score_in, &widths)?;
        Ok(Self {
            embeddings,
            aavg,
            aggregator,
            generator,
            scorer,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, cfg: &ModelConfig, batch: &Batch) -> Result<ModelOutput> {
        let ab = &cfg.ablations;
        let b = batch.size;
        // the first manifest attribute is the item id
        let active: Vec<usize> = if ab.item_attr_only {
            vec![0]
        } else {
            (0..self.embeddings.num_attributes()).collect()
        };
        let e = embed_batch(&self.embeddings, tape, batch, |a| active.contains(&a))?;

        let inputs = AttributeInputs {
            seq: active.iter().map(|&a| e.seq[a]).collect(),
            trigger: active.iter().map(|&a| e.trigger[a]).collect(),
            target: active.iter().map(|&a| e.target[a]).collect(),
            mask: e.mask,
        };
        let scores = self.aavg.forward(tape, &inputs, &active)?;

        let seq_emb = tape.concat(&e.seq, 2)?;
        let inv_len = bcr::inv_len_input(tape, batch.inv_seq_len());
        let kd = tape.shape(seq_emb)[2];
        let d = self.embeddings.dims.attr;
        let v_u_div = bcr::uiem_diversity(tape, scores.w_ta, seq_emb)?;
        let v_u_sim = if ab.no_user_similarity {
            tape.constant(Tensor::zeros(vec![b, kd]))
        } else {
            bcr::uiem_similarity(tape, scores.w_tt, seq_emb)?
        };
        let v_i_div = bcr::iiem_diversity(tape, scores.w_ta, inv_len, &inputs.target)?;
        let v_i_sim = if ab.no_item_similarity {
            tape.constant(Tensor::zeros(vec![b, d]))
        } else {
            bcr::iiem_similarity(tape, scores.w_tt, inv_len, &scores.cross)?
        };
        let (v_sim, v_div) = self.aggregator.aggregate(tape, v_u_sim, v_i_sim, v_u_div, v_i_div)?;

        let e_tr = tape.concat(&e.trigger, 1)?;
        let e_ta = tape.concat(&e.target, 1)?;
        let h_cond = tape.concat(&[e.context, e_tr], 1)?;
        let fusion = self.generator.generate(tape, h_cond)?;
        let layout = &self.generator.layout;
        let v_su = if ab.no_shallow_union {
            tape.constant(Tensor::zeros(vec![b, layout.gate_dim]))
        } else {
            shallow_union(tape, v_sim, v_div, fusion.gate)?
        };
        let v_du = if ab.no_deep_union {
            tape.constant(Tensor::zeros(vec![b, layout.output_dim()]))
        } else {
            deep_union(tape, v_sim, v_div, &fusion.layers, &layout.widths)?
        };

        let x = tape.concat(&[v_su, v_du, e_tr, e_ta, e.user, e.context], 1)?;
        let logit = self.scorer.forward(tape, x)?;
        let logit = tape.reshape(logit, vec![b])?;
        let p_click = tape.sigmoid(logit);
        Ok(ModelOutput {
            p_click,
            aux_probs: Some(scores.aux_probs),
            diagnostics: Some(DpanDiagnostics {
                bcr: BcrOutput {
                    v_u_div,
                    v_u_sim,
                    v_i_div,
                    v_i_sim,
                    v_sim,
                    v_div,
                },
                v_su,
                v_du,
                gate: fusion.gate,
                h_cond,
                scores,
            }),
        })
    }
}
