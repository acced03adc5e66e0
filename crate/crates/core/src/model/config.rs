use std::fmt;
use std::str::FromStr;

use crate::aavg::{DEFAULT_ALPHA, UNIT_HIDDEN};
use crate::bcr::{AGGREGATED_DIM, AGGREGATOR_HIDDEN};
use crate::config::{join_list, KvConfig};
use crate::error::{Error, Result};
use crate::features::{DEFAULT_ATTR_DIM, DEFAULT_SEQ_LEN, DESK_EMBEDDING_INIT, EMBEDDING_INIT};
use crate::sduf::{DEFAULT_UNION_WIDTHS, GENERATOR_HIDDEN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    Dpan,
    /// Attention pooling over whole-item embeddings, queried by both the
    /// target and the trigger.
    Din,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Dpan => "dpan",
            Arch::Din => "din",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dpan" => Ok(Arch::Dpan),
            "din" => Ok(Arch::Din),
            other => Err(Error::Config(format!("unknown model `{other}` (expected dpan or din)"))),
        }
    }
}

/// Single-component removals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Ablations {
    pub no_aux_loss: bool,
    pub item_attr_only: bool,
    pub no_user_similarity: bool,
    pub no_item_similarity: bool,
    pub no_shallow_union: bool,
    pub no_deep_union: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ablation {
    NoAuxLoss,
    ItemAttrOnly,
    NoUserSimilarity,
    NoItemSimilarity,
    NoShallowUnion,
    NoDeepUnion,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::NoAuxLoss,
        Ablation::ItemAttrOnly,
        Ablation::NoUserSimilarity,
        Ablation::NoItemSimilarity,
        Ablation::NoShallowUnion,
        Ablation::NoDeepUnion,
    ];

    pub fn flag(self) -> &'static str {
        match self {
            Ablation::NoAuxLoss => "no_aux_loss",
            Ablation::ItemAttrOnly => "item_attr_only",
            Ablation::NoUserSimilarity => "no_user_similarity",
            Ablation::NoItemSimilarity => "no_item_similarity",
            Ablation::NoShallowUnion => "no_shallow_union",
            Ablation::NoDeepUnion => "no_deep_union",
        }
    }

    /// Row label used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Ablation::NoAuxLoss => "Auxiliary Loss",
            Ablation::ItemAttrOnly => "Other Attributes",
            Ablation::NoUserSimilarity => "User Similarity",
            Ablation::NoItemSimilarity => "Item Similarity",
            Ablation::NoShallowUnion => "Shallow Union",
            Ablation::NoDeepUnion => "Deep Union",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Ablation::ALL
            .into_iter()
            .find(|a| a.flag() == norm)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

impl Ablations {
    pub fn set(&mut self, a: Ablation, on: bool) {
        match a {
            Ablation::NoAuxLoss => self.no_aux_loss = on,
            Ablation::ItemAttrOnly => self.item_attr_only = on,
            Ablation::NoUserSimilarity => self.no_user_similarity = on,
            Ablation::NoItemSimilarity => self.no_item_similarity = on,
            Ablation::NoShallowUnion => self.no_shallow_union = on,
            Ablation::NoDeepUnion => self.no_deep_union = on,
        }
    }

    pub fn get(&self, a: Ablation) -> bool {
        match a {
            Ablation::NoAuxLoss => self.no_aux_loss,
            Ablation::ItemAttrOnly => self.item_attr_only,
            Ablation::NoUserSimilarity => self.no_user_similarity,
            Ablation::NoItemSimilarity => self.no_item_similarity,
            Ablation::NoShallowUnion => self.no_shallow_union,
            Ablation::NoDeepUnion => self.no_deep_union,
        }
    }

    pub fn only(a: Ablation) -> Self {
        let mut s = Self::default();
        s.set(a, true);
        s
    }

    pub fn active(&self) -> Vec<Ablation> {
        Ablation::ALL.into_iter().filter(|&a| self.get(a)).collect()
    }
}

/// Hyperparameters of either architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Truncated behavior sequence length `T`.
    pub seq_len: usize,
    pub attr_dim: usize,
    pub user_dim: usize,
    pub context_dim: usize,
    /// Embedding tables start uniform in `[-embedding_init, embedding_init]`.
    pub embedding_init: f64,
    /// Weight of the summed auxiliary losses.
    pub alpha: f64,
    pub unit_hidden: usize,
    pub aggregator_hidden: usize,
    /// Width of `v_sim`, `v_div` and the shallow gate.
    pub aggregated_dim: usize,
    pub union_widths: Vec<usize>,
    pub generator_hidden: usize,
    /// Hidden widths of the final scoring MLP (a width-1 output is appended).
    pub scoring_widths: Vec<usize>,
    pub ablations: Ablations,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Dpan,
            seq_len: DEFAULT_SEQ_LEN,
            attr_dim: DEFAULT_ATTR_DIM,
            user_dim: 16,
            context_dim: 16,
            embedding_init: EMBEDDING_INIT,
            alpha: DEFAULT_ALPHA,
            unit_hidden: UNIT_HIDDEN,
            aggregator_hidden: AGGREGATOR_HIDDEN,
            aggregated_dim: AGGREGATED_DIM,
            union_widths: DEFAULT_UNION_WIDTHS.to_vec(),
            generator_hidden: GENERATOR_HIDDEN,
            scoring_widths: vec![256, 128],
            ablations: Ablations::default(),
            seed: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "arch",
    "seq_len",
    "attr_dim",
    "user_dim",
    "context_dim",
    "embedding_init",
    "alpha",
    "unit_hidden",
    "aggregator_hidden",
    "aggregated_dim",
    "union_widths",
    "generator_hidden",
    "scoring_widths",
    "seed",
    "ablate.no_aux_loss",
    "ablate.item_attr_only",
    "ablate.no_user_similarity",
    "ablate.no_item_similarity",
    "ablate.no_shallow_union",
    "ablate.no_deep_union",
];

impl ModelConfig {
    /// Reduced widths that train in seconds on one core, with a wider
    /// embedding init so a few hundred Adagrad steps can leave the
    /// near-zero start.
    pub fn desk() -> Self {
        Self {
            seq_len: 10,
            attr_dim: 8,
            user_dim: 8,
            context_dim: 8,
            embedding_init: DESK_EMBEDDING_INIT,
            unit_hidden: 16,
            aggregator_hidden: 32,
            aggregated_dim: 16,
            union_widths: vec![32, 16],
            generator_hidden: 16,
            scoring_widths: vec![64, 32],
            ..Self::default()
        }
    }

    pub fn with_arch(mut self, arch: Arch) -> Self {
        self.arch = arch;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("seq_len", self.seq_len),
            ("attr_dim", self.attr_dim),
            ("user_dim", self.user_dim),
            ("context_dim", self.context_dim),
            ("unit_hidden", self.unit_hidden),
            ("aggregator_hidden", self.aggregator_hidden),
            ("aggregated_dim", self.aggregated_dim),
            ("generator_hidden", self.generator_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.union_widths.is_empty() || self.union_widths.contains(&0) {
            return Err(Error::Config("model.union_widths must be non-empty and positive".into()));
        }
        if self.scoring_widths.contains(&0) {
            return Err(Error::Config("model.scoring_widths must be positive".into()));
        }
        if !(self.embedding_init > 0.0 && self.embedding_init.is_finite()) {
            return Err(Error::Config(format!(
                "model.embedding_init must be positive, got {}",
                self.embedding_init
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("model.alpha must be non-negative, got {}", self.alpha)));
        }
        if self.ablations.no_shallow_union && self.ablations.no_deep_union {
            return Err(Error::Config(
                "ablating both the shallow and the deep union leaves nothing to fuse".into(),
            ));
        }
        Ok(())
    }

    /// Overrides fields from a `model.*` section (keys without the prefix).
    pub fn apply(&mut self, kv: &KvConfig) -> Result<()> {
        kv.check_known(KEYS, "model")?;
        if let Some(a) = kv.get_str("arch") {
            self.arch = a.parse()?;
        }
        macro_rules! num {
            ($field:ident) => {
                if let Some(v) = kv.get(stringify!($field))? {
                    self.$field = v;
                }
            };
        }
        num!(seq_len);
        num!(attr_dim);
        num!(user_dim);
        num!(context_dim);
        num!(embedding_init);
        num!(alpha);
        num!(unit_hidden);
        num!(aggregator_hidden);
        num!(aggregated_dim);
        num!(generator_hidden);
        num!(seed);
        if let Some(w) = kv.get_list("union_widths")? {
            self.union_widths = w;
        }
        if let Some(w) = kv.get_str("scoring_widths") {
            self.scoring_widths = if w.is_empty() {
                Vec::new()
            } else {
                kv.get_list("scoring_widths")?.unwrap_or_default()
            };
        }
        for a in Ablation::ALL {
            if let Some(on) = kv.get::<bool>(&format!("ablate.{}", a.flag()))? {
                self.ablations.set(a, on);
            }
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut c = Self::default();
        c.apply(kv)?;
        c.validate()?;
        Ok(c)
    }

    /// Every field, keys relative to `model.`.
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("arch", self.arch);
        kv.set("seq_len", self.seq_len);
        kv.set("attr_dim", self.attr_dim);
        kv.set("user_dim", self.user_dim);
        kv.set("context_dim", self.context_dim);
        kv.set("embedding_init", format!("{:?}", self.embedding_init));
        kv.set("alpha", format!("{:?}", self.alpha));
        kv.set("unit_hidden", self.unit_hidden);
        kv.set("aggregator_hidden", self.aggregator_hidden);
        kv.set("aggregated_dim", self.aggregated_dim);
        kv.set("union_widths", join_list(&self.union_widths));
        kv.set("generator_hidden", self.generator_hidden);
        kv.set("scoring_widths", join_list(&self.scoring_widths));
        kv.set("seed", self.seed);
        for a in Ablation::ALL {
            kv.set(format!("ablate.{}", a.flag()), self.ablations.get(a));
        }
        kv
    }
}
