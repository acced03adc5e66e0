//! Vocabularies, samples, mini-batch collation, and embedding tables.
//!
//! Every categorical field reserves ID 0 for padding/unknown. The embedding of
//! ID 0 is the zero vector and never receives a gradient, and sequence rows
//! past `seq_len` are rewritten to ID 0 with a false mask during collation.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{uniform, ParamId, ParamStore, Tape, Var};

pub const DEFAULT_ATTRIBUTES: [&str; 5] = ["item", "brand", "category", "price", "title"];
pub const DEFAULT_SEQ_LEN: usize = 50;
pub const DEFAULT_ATTR_DIM: usize = 16;
pub const EMBEDDING_INIT: f64 = 0.05;
pub const DESK_EMBEDDING_INIT: f64 = 0.5;

pub const CHANNEL_SRP: usize = 1;
pub const CHANNEL_GUL: usize = 2;

pub fn channel_name(id: usize) -> String {
    match id {
        CHANNEL_SRP => "SRP".into(),
        CHANNEL_GUL => "GUL".into(),
        0 => "unknown".into(),
        other => format!("channel{other}"),
    }
}

const USER_FIELD: &str = "user";
const CHANNEL_FIELD: &str = "channel";
const TIME_FIELD: &str = "time_bucket";

/// Vocabulary sizes for every categorical field. Sizes include the reserved
/// ID 0, so valid IDs are `0..size`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabManifest {
    pub attributes: Vec<(String, usize)>,
    pub users: usize,
    pub channels: usize,
    pub time_buckets: usize,
}

impl VocabManifest {
    pub fn num_attributes(&self) -> usize {
        self.attributes.len()
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|(n, _)| n == name)
    }

    /// `attribute<TAB>vocab_size` lines; item attributes first, in order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, size) in &self.attributes {
            let _ = writeln!(out, "{name}\t{size}");
        }
        let _ = writeln!(out, "{USER_FIELD}\t{}", self.users);
        let _ = writeln!(out, "{CHANNEL_FIELD}\t{}", self.channels);
        let _ = writeln!(out, "{TIME_FIELD}\t{}", self.time_buckets);
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut attributes = Vec::new();
        let (mut users, mut channels, mut times) = (None, None, None);
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            let (Some(name), Some(size), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(err(i + 1, format!("expected `name<TAB>size`, got `{line}`")));
            };
            let size: usize = size
                .trim()
                .parse()
                .map_err(|e| err(i + 1, format!("bad vocabulary size `{size}`: {e}")))?;
            if size == 0 {
                return Err(err(i + 1, format!("vocabulary `{name}` must include the padding id")));
            }
            match name {
                USER_FIELD => users = Some(size),
                CHANNEL_FIELD => channels = Some(size),
                TIME_FIELD => times = Some(size),
                _ if attributes.iter().any(|(n, _)| n == name) => {
                    return Err(err(i + 1, format!("duplicate attribute `{name}`")))
                }
                _ => attributes.push((name.to_string(), size)),
            }
        }
        let missing = |f: &str| err(0, format!("manifest lacks `{f}`"));
        if attributes.is_empty() {
            return Err(err(0, "manifest lists no item attributes".into()));
        }
        Ok(Self {
            attributes,
            users: users.ok_or_else(|| missing(USER_FIELD))?,
            channels: channels.ok_or_else(|| missing(CHANNEL_FIELD))?,
            time_buckets: times.ok_or_else(|| missing(TIME_FIELD))?,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: &Path, header: &str) -> Result<()> {
        let mut text = String::new();
        for l in header.lines() {
            let _ = writeln!(text, "# {l}");
        }
        text.push_str(&self.to_text());
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// One impression.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    /// Slate the impression belongs to.
    pub event: u64,
    pub day: u32,
    pub ts: u64,
    pub user: usize,
    pub channel: usize,
    pub time_bucket: usize,
    pub trigger: Vec<usize>,
    pub target: Vec<usize>,
    /// Valid behavior rows only, oldest first.
    pub seq: Vec<Vec<usize>>,
    #[serde(default)]
    pub seq_ts: Vec<u64>,
    pub label: u8,
}

impl Sample {
    pub fn seq_len(&self) -> usize {
        self.seq.len()
    }

    pub fn num_attributes(&self) -> usize {
        self.trigger.len()
    }
}

/// Per-attribute columns of a behavior sequence padded to `T` positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeSequences {
    /// `ids[k][i]`: attribute `k` of behavior `i`; 0 on padding.
    pub ids: Vec<Vec<usize>>,
    /// True on valid positions.
    pub mask: Vec<bool>,
}

/// Column-wise split of `seq` into `k` sequences of length `t`. Only the most
/// recent `t` rows are kept.
pub fn split_sequence(seq: &[Vec<usize>], seq_len: usize, k: usize, t: usize) -> AttributeSequences {
    let valid = seq_len.min(seq.len());
    let skip = valid.saturating_sub(t);
    let rows = &seq[skip..valid];
    let mut ids = vec![vec![0usize; t]; k];
    let mut mask = vec![false; t];
    for (i, row) in rows.iter().enumerate() {
        mask[i] = true;
        for (col, &id) in ids.iter_mut().zip(row) {
            col[i] = id;
        }
    }
    AttributeSequences { ids, mask }
}

/// Vocabulary bounds plus a counter of out-of-vocabulary IDs mapped to 0.
#[derive(Debug)]
pub struct FeatureSpace {
    pub manifest: VocabManifest,
    oov: AtomicU64,
}

impl Clone for FeatureSpace {
    fn clone(&self) -> Self {
        Self {
            manifest: self.manifest.clone(),
            oov: AtomicU64::new(self.oov_count()),
        }
    }
}

impl FeatureSpace {
    pub fn new(manifest: VocabManifest) -> Self {
        Self {
            manifest,
            oov: AtomicU64::new(0),
        }
    }

    pub fn oov_count(&self) -> u64 {
        self.oov.load(Ordering::Relaxed)
    }

    fn clamp(&self, id: usize, vocab: usize) -> usize {
        if id < vocab {
            id
        } else {
            self.oov.fetch_add(1, Ordering::Relaxed);
            0
        }
    }

    pub fn attr_id(&self, k: usize, id: usize) -> usize {
        self.clamp(id, self.manifest.attributes[k].1)
    }

    pub fn user_id(&self, id: usize) -> usize {
        self.clamp(id, self.manifest.users)
    }

    pub fn channel_id(&self, id: usize) -> usize {
        self.clamp(id, self.manifest.channels)
    }

    pub fn time_id(&self, id: usize) -> usize {
        self.clamp(id, self.manifest.time_buckets)
    }
}

/// Column-major view of a mini-batch, ready for table lookups.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub seq_cap: usize,
    pub users: Vec<usize>,
    pub channels: Vec<usize>,
    pub times: Vec<usize>,
    /// `trigger[k][b]`
    pub trigger: Vec<Vec<usize>>,
    pub target: Vec<Vec<usize>>,
    /// `seq[k][b·T + i]`
    pub seq: Vec<Vec<usize>>,
    /// `mask[b·T + i]` ∈ {0, 1}
    pub mask: Vec<f64>,
    pub seq_len: Vec<usize>,
    pub labels: Vec<f64>,
}

impl Batch {
    pub fn collate(samples: &[&Sample], space: &FeatureSpace, seq_cap: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if seq_cap == 0 {
            return Err(Error::Config("sequence length must be positive".into()));
        }
        let k = space.manifest.num_attributes();
        let b = samples.len();
        let mut batch = Batch {
            size: b,
            seq_cap,
            users: Vec::with_capacity(b),
            channels: Vec::with_capacity(b),
            times: Vec::with_capacity(b),
            trigger: vec![Vec::with_capacity(b); k],
            target: vec![Vec::with_capacity(b); k],
            seq: vec![Vec::with_capacity(b * seq_cap); k],
            mask: Vec::with_capacity(b * seq_cap),
            seq_len: Vec::with_capacity(b),
            labels: Vec::with_capacity(b),
        };
        for s in samples {
            if s.trigger.len() != k || s.target.len() != k || s.seq.iter().any(|r| r.len() != k) {
                return Err(Error::Contract(format!(
                    "sample of event {} does not have {k} attributes per item",
                    s.event
                )));
            }
            batch.users.push(space.user_id(s.user));
            batch.channels.push(space.channel_id(s.channel));
            batch.times.push(space.time_id(s.time_bucket));
            for a in 0..k {
                batch.trigger[a].push(space.attr_id(a, s.trigger[a]));
                batch.target[a].push(space.attr_id(a, s.target[a]));
            }
            let split = split_sequence(&s.seq, s.seq.len(), k, seq_cap);
            for (a, col) in split.ids.iter().enumerate() {
                batch.seq[a].extend(col.iter().map(|&id| space.attr_id(a, id)));
            }
            batch.mask.extend(split.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }));
            batch.seq_len.push(split.mask.iter().filter(|&&m| m).count());
            batch.labels.push(f64::from(s.label));
        }
        Ok(batch)
    }

    pub fn num_attributes(&self) -> usize {
        self.trigger.len()
    }

    /// `1 / seq_len` per row, 0 for empty sequences.
    pub fn inv_seq_len(&self) -> Vec<f64> {
        self.seq_len
            .iter()
            .map(|&n| if n == 0 { 0.0 } else { 1.0 / n as f64 })
            .collect()
    }
}

/// Embedding dimensions for the feature embedding layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingDims {
    pub attr: usize,
    pub user: usize,
    pub context: usize,
}

/// Tables for item attributes, the user profile, and context fields.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTables {
    pub attrs: Vec<ParamId>,
    pub user: ParamId,
    pub channel: ParamId,
    pub time: ParamId,
    pub dims: EmbeddingDims,
}

fn table<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    name: String,
    vocab: usize,
    dim: usize,
    init: f64,
) -> Result<ParamId> {
    let mut t = uniform(rng, vec![vocab, dim], init);
    t.data_mut()[..dim].iter_mut().for_each(|v| *v = 0.0);
    store.add(name, t)
}

impl EmbeddingTables {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        manifest: &VocabManifest,
        dims: EmbeddingDims,
        init: f64,
    ) -> Result<Self> {
        let attrs = manifest
            .attributes
            .iter()
            .map(|(name, vocab)| table(store, rng, format!("embed.{name}"), *vocab, dims.attr, init))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            attrs,
            user: table(store, rng, "embed.user".into(), manifest.users, dims.user, init)?,
            channel: table(store, rng, "embed.channel".into(), manifest.channels, dims.context, init)?,
            time: table(store, rng, "embed.time_bucket".into(), manifest.time_buckets, dims.context, init)?,
            dims,
        })
    }

    pub fn num_attributes(&self) -> usize {
        self.attrs.len()
    }

    /// Attribute `k` for every id, shaped `index_shape ++ [d_a]`.
    pub fn attr(&self, tape: &mut Tape<'_>, k: usize, ids: &[usize], index_shape: &[usize]) -> Result<Var> {
        let t = tape.param(self.attrs[k]);
        tape.gather(t, ids, index_shape)
    }

    /// `[a_1, …, a_K]` for one item, each shaped `[1, d_a]`.
    pub fn embed_item(&self, tape: &mut Tape<'_>, attrs: &[usize]) -> Result<Vec<Var>> {
        if attrs.len() != self.attrs.len() {
            return Err(Error::Contract(format!(
                "item has {} attributes, tables expect {}",
                attrs.len(),
                self.attrs.len()
            )));
        }
        attrs
            .iter()
            .enumerate()
            .map(|(k, &id)| self.attr(tape, k, &[id], &[1]))
            .collect()
    }

    /// `e^c = [channel, browsing time]`, shaped `[B, 2·d_c]`.
    pub fn embed_context(&self, tape: &mut Tape<'_>, channels: &[usize], times: &[usize]) -> Result<Var> {
        let (c, t) = (tape.param(self.channel), tape.param(self.time));
        let ce = tape.gather(c, channels, &[channels.len()])?;
        let te = tape.gather(t, times, &[times.len()])?;
        tape.concat(&[ce, te], 1)
    }

    pub fn embed_user(&self, tape: &mut Tape<'_>, users: &[usize]) -> Result<Var> {
        let u = tape.param(self.user);
        tape.gather(u, users, &[users.len()])
    }

    pub fn channel_embedding(&self, tape: &mut Tape<'_>, channels: &[usize]) -> Result<Var> {
        let c = tape.param(self.channel);
        tape.gather(c, channels, &[channels.len()])
    }

    pub fn time_embedding(&self, tape: &mut Tape<'_>, times: &[usize]) -> Result<Var> {
        let t = tape.param(self.time);
        tape.gather(t, times, &[times.len()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn manifest() -> VocabManifest {
        VocabManifest {
            attributes: vec![("item".into(), 10), ("brand".into(), 4)],
            users: 5,
            channels: 3,
            time_buckets: 4,
        }
    }

    fn tables() -> (ParamStore, EmbeddingTables) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = EmbeddingDims {
            attr: 3,
            user: 2,
            context: 2,
        };
        let t = EmbeddingTables::new(&mut store, &mut rng, &manifest(), dims, EMBEDDING_INIT).unwrap();
        (store, t)
    }

    #[test]
    fn manifest_text_round_trip() {
        let m = manifest();
        let parsed = VocabManifest::parse(&format!("# header\n{}", m.to_text()), Path::new("m")).unwrap();
        assert_eq!(parsed, m);
        assert!(VocabManifest::parse("item\t3\n", Path::new("m")).is_err());
        assert!(VocabManifest::parse("item 3\n", Path::new("m")).is_err());
    }

    #[test]
    fn split_sequence_examples() {
        let empty = split_sequence(&[], 0, 2, 3);
        assert_eq!(empty.mask, vec![false; 3]);
        assert_eq!(empty.ids, vec![vec![0; 3]; 2]);

        let s = split_sequence(&[vec![3, 5], vec![4, 6]], 2, 2, 2);
        assert_eq!(s.ids, vec![vec![3, 4], vec![5, 6]]);
        assert_eq!(s.mask, vec![true, true]);

        // rows past seq_len are padding whatever they store
        let p = split_sequence(&[vec![3, 5], vec![7, 7]], 1, 2, 3);
        assert_eq!(p.mask, vec![true, false, false]);
        assert_eq!(p.ids, vec![vec![3, 0, 0], vec![5, 0, 0]]);

        // truncation keeps the most recent rows
        let t = split_sequence(&[vec![1, 1], vec![2, 2], vec![3, 3]], 3, 2, 2);
        assert_eq!(t.ids[0], vec![2, 3]);
    }

    #[test]
    fn padding_and_determinism_of_item_embedding() {
        let (store, t) = tables();
        let mut tape = Tape::with_params(&store);
        let zeros = t.embed_item(&mut tape, &[0, 0]).unwrap();
        for v in zeros {
            assert!(tape.value(v).iter().all(|&x| x == 0.0));
        }
        let a = t.embed_item(&mut tape, &[7, 2]).unwrap();
        let b = t.embed_item(&mut tape, &[7, 2]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(tape.value(*x), tape.value(*y));
        }
        assert_eq!(tape.shape(a[0]), &[1, 3]);
    }

    #[test]
    fn context_and_user_embeddings() {
        let (store, t) = tables();
        let mut tape = Tape::with_params(&store);
        let c = t.embed_context(&mut tape, &[1, 1, 0], &[2, 2, 0]).unwrap();
        let v = tape.value(c).to_vec();
        assert_eq!(&v[0..4], &v[4..8]);
        assert!(v[8..12].iter().all(|&x| x == 0.0));
        let u = t.embed_user(&mut tape, &[3]).unwrap();
        assert_eq!(tape.shape(u), &[1, 2]);
    }

    #[test]
    fn oov_ids_map_to_padding_and_are_counted() {
        let space = FeatureSpace::new(manifest());
        let s = Sample {
            event: 0,
            day: 0,
            ts: 0,
            user: 99,
            channel: 1,
            time_bucket: 1,
            trigger: vec![42, 1],
            target: vec![1, 1],
            seq: vec![vec![1, 9]],
            seq_ts: vec![],
            label: 0,
        };
        let b = Batch::collate(&[&s], &space, 2).unwrap();
        assert_eq!(b.users, vec![0]);
        assert_eq!(b.trigger[0], vec![0]);
        assert_eq!(b.seq[1], vec![0, 0]);
        assert_eq!(b.mask, vec![1.0, 0.0]);
        assert_eq!(space.oov_count(), 3);
    }
}
