//! End-to-end networks: the full model, its ablations, and the DIN baseline.

pub mod checkpoint;
mod config;
mod din;
mod dpan;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{Ablation, Ablations, Arch, ModelConfig};
pub use din::Din;
pub use dpan::Dpan;

use crate::aavg::ActivationScores;
use crate::bcr::BcrOutput;
use crate::error::{Error, Result};
use crate::features::{Batch, VocabManifest};
use crate::numerics::{ParamStore, Tape, Var};

/// Intermediate values of one full-model forward pass.
#[derive(Clone, Debug)]
pub struct DpanDiagnostics {
    pub scores: ActivationScores,
    pub bcr: BcrOutput,
    pub v_su: Var,
    pub v_du: Var,
    /// `[B, gate_dim]` generated shallow gate.
    pub gate: Var,
    pub h_cond: Var,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `[B]` click probabilities.
    pub p_click: Var,
    /// `[B, K_active]` per-attribute auxiliary predictions.
    pub aux_probs: Option<Var>,
    pub diagnostics: Option<DpanDiagnostics>,
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub total: Var,
    pub logloss: Var,
    /// `Σ_k` auxiliary losses before the α weight.
    pub aux: Option<Var>,
    pub output: ModelOutput,
}

#[derive(Clone, Debug, PartialEq)]
enum Net {
    Dpan(Dpan),
    Din(Din),
}

/// A built network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    manifest: VocabManifest,
    store: ParamStore,
    net: Net,
}

impl Model {
    /// Initializes parameters from `config.seed`.
    pub fn new(config: ModelConfig, manifest: VocabManifest) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let net = match config.arch {
            Arch::Dpan => Net::Dpan(Dpan::new(&mut store, &mut rng, &config, &manifest)?),
            Arch::Din => Net::Din(Din::new(&mut store, &mut rng, &config, &manifest)?),
        };
        Ok(Self {
            config,
            manifest,
            store,
            net,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn manifest(&self) -> &VocabManifest {
        &self.manifest
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_scalars(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn dpan(&self) -> Option<&Dpan> {
        match &self.net {
            Net::Dpan(d) => Some(d),
            Net::Din(_) => None,
        }
    }

    pub fn din(&self) -> Option<&Din> {
        match &self.net {
            Net::Din(d) => Some(d),
            Net::Dpan(_) => None,
        }
    }

    /// A tape reading this model's parameters.
    pub fn tape(&self) -> Tape<'_> {
        Tape::with_params(&self.store)
    }

    pub fn forward(&self, tape: &mut Tape<'_>, batch: &Batch) -> Result<ModelOutput> {
        match &self.net {
            Net::Dpan(d) => d.forward(tape, &self.config, batch),
            Net::Din(d) => d.forward(tape, batch),
        }
    }

    /// Mean logloss plus `α · Σ_k` auxiliary losses.
    pub fn loss(&self, tape: &mut Tape<'_>, batch: &Batch) -> Result<LossOutput> {
        if batch.size == 0 {
            return Err(Error::EmptyBatch);
        }
        let output = self.forward(tape, batch)?;
        let logloss = tape.bce(output.p_click, &batch.labels)?;
        let aux = match (&self.net, &output.diagnostics) {
            (Net::Dpan(d), Some(diag)) if !self.config.ablations.no_aux_loss => {
                Some(d.aavg.total_aux_loss(tape, &diag.scores, &batch.labels)?)
            }
            _ => None,
        };
        let total = match aux {
            Some(a) => {
                let weighted = tape.scale(a, self.config.alpha);
                tape.add(logloss, weighted)?
            }
            None => logloss,
        };
        Ok(LossOutput {
            total,
            logloss,
            aux,
            output,
        })
    }

    pub fn predict(&self, batch: &Batch) -> Result<Vec<f64>> {
        let mut tape = self.tape();
        let out = self.forward(&mut tape, batch)?;
        Ok(tape.value(out.p_click).to_vec())
    }

    /// Total loss value and one dense gradient per stored parameter.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = self.tape();
        let out = self.loss(&mut tape, batch)?;
        let value = tape.value(out.total)[0];
        let grads = tape.backward(out.total)?;
        Ok((value, grads.dense(&self.store)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureSpace, Sample};
    use crate::numerics::Tensor;

    pub(crate) fn manifest() -> VocabManifest {
        VocabManifest {
            attributes: vec![("item".into(), 12), ("brand".into(), 5), ("category".into(), 4)],
            users: 6,
            channels: 3,
            time_buckets: 4,
        }
    }

    fn tiny(arch: Arch) -> ModelConfig {
        ModelConfig {
            arch,
            seq_len: 3,
            attr_dim: 4,
            user_dim: 3,
            context_dim: 2,
            unit_hidden: 5,
            aggregator_hidden: 6,
            aggregated_dim: 4,
            union_widths: vec![8, 4],
            generator_hidden: 5,
            scoring_widths: vec![6],
            seed: 3,
            ..ModelConfig::default()
        }
    }

    fn sample(seq: Vec<Vec<usize>>, target: Vec<usize>) -> Sample {
        Sample {
            event: 1,
            day: 0,
            ts: 10,
            user: 2,
            channel: 1,
            time_bucket: 3,
            trigger: vec![4, 2, 1],
            target,
            seq,
            seq_ts: vec![],
            label: 1,
        }
    }

    fn batch(s: &[Sample], t: usize) -> Batch {
        let space = FeatureSpace::new(manifest());
        Batch::collate(&s.iter().collect::<Vec<_>>(), &space, t).unwrap()
    }

    #[test]
    fn outputs_are_probabilities_and_deterministic() {
        for arch in [Arch::Dpan, Arch::Din] {
            let m = Model::new(tiny(arch), manifest()).unwrap();
            let b = batch(&[sample(vec![vec![3, 1, 2], vec![5, 2, 1]], vec![7, 3, 2])], 3);
            let p = m.predict(&b).unwrap();
            assert!(p[0] > 0.0 && p[0] < 1.0);
            assert_eq!(p, m.predict(&b).unwrap());
        }
    }

    #[test]
    fn empty_sequence_still_scores() {
        for arch in [Arch::Dpan, Arch::Din] {
            let m = Model::new(tiny(arch), manifest()).unwrap();
            let p = m.predict(&batch(&[sample(vec![], vec![7, 3, 2])], 3)).unwrap();
            assert!(p[0].is_finite() && p[0] > 0.0 && p[0] < 1.0);
        }
    }

    #[test]
    fn baseline_is_smaller() {
        let dpan = Model::new(tiny(Arch::Dpan), manifest()).unwrap();
        let din = Model::new(tiny(Arch::Din), manifest()).unwrap();
        assert!(din.num_scalars() < dpan.num_scalars());
    }

    #[test]
    fn alpha_zero_matches_no_aux_loss() {
        let b = batch(&[sample(vec![vec![3, 1, 2]], vec![7, 3, 2])], 3);
        let mut a = tiny(Arch::Dpan);
        a.alpha = 0.0;
        let mut n = tiny(Arch::Dpan);
        n.ablations.no_aux_loss = true;
        let la = Model::new(a, manifest()).unwrap().loss_and_grads(&b).unwrap().0;
        let ln = Model::new(n, manifest()).unwrap().loss_and_grads(&b).unwrap().0;
        assert_eq!(la, ln);
    }

    #[test]
    fn half_predictions_give_one_and_a_half_ln2() {
        let manifest = VocabManifest {
            attributes: ["item", "brand", "category", "price", "title"]
                .iter()
                .map(|n| (n.to_string(), 4))
                .collect(),
            users: 2,
            channels: 3,
            time_buckets: 2,
        };
        let mut m = Model::new(tiny(Arch::Dpan), manifest).unwrap();
        let d = m.dpan().unwrap().clone();
        let mut zero = vec![d.scorer.output().weight, d.scorer.output().bias.unwrap()];
        for u in &d.aavg.units {
            zero.push(u.mlp.output().weight);
            zero.push(u.mlp.output().bias.unwrap());
        }
        for id in zero {
            let v = m.store_mut().value_mut(id);
            *v = Tensor::zeros(v.shape().to_vec());
        }
        let s = Sample {
            trigger: vec![1; 5],
            target: vec![2; 5],
            seq: vec![vec![3; 5]],
            ..sample(vec![], vec![])
        };
        let space = FeatureSpace::new(m.manifest().clone());
        let b = Batch::collate(&[&s], &space, 3).unwrap();
        let (loss, _) = m.loss_and_grads(&b).unwrap();
        assert!((loss - 1.5 * std::f64::consts::LN_2).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn padding_is_invisible() {
        let m = Model::new(tiny(Arch::Dpan), manifest()).unwrap();
        let s = sample(vec![vec![3, 1, 2], vec![5, 2, 1]], vec![7, 3, 2]);
        let short = batch(std::slice::from_ref(&s), 2);
        let long = batch(std::slice::from_ref(&s), 6);
        assert_eq!(m.predict(&short).unwrap(), m.predict(&long).unwrap());
    }
}
