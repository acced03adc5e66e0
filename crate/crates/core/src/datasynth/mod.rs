//! Synthetic relevant-recommendation logs with a planted, channel-dependent
//! preference for similar (SRP) or novel (GUL) candidates.

mod io;
mod world;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, WeightedIndex};

pub use io::{load_dir, read_dataset, write_dataset, write_dir, SampleReader, DATA_FILE, VOCAB_FILE};
pub use world::{novelty, overlap, Item, LatentUser, World};

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::features::{Sample, VocabManifest, CHANNEL_GUL, CHANNEL_SRP, DEFAULT_ATTRIBUTES};
use crate::numerics::sigmoid;

#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub users: usize,
    pub items: usize,
    pub brands: usize,
    pub categories: usize,
    pub price_buckets: usize,
    pub title_tokens: usize,
    pub time_buckets: usize,
    /// Probability that an event arrives from the search result page.
    pub srp_fraction: f64,
    /// Logit boost per unit of trigger/candidate attribute overlap on SRP.
    pub beta_sim: f64,
    /// Logit boost per unit of candidate novelty against history on GUL.
    pub beta_div: f64,
    /// Logit boost for the user's favorite category (scaled by interest).
    pub interest_weight: f64,
    pub favorite_categories: usize,
    /// Behaviors seeded into each history before the first event.
    pub behaviors_per_user: usize,
    /// Most recent behaviors recorded with each impression.
    pub history_len: usize,
    /// Candidates per event.
    pub slate_size: usize,
    /// Approximate number of impressions; rounded up to whole slates.
    pub impressions: usize,
    pub days: usize,
    pub positive_rate: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    /// A small catalog: at desk scale each attribute value must recur often
    /// enough for its embedding to be learned.
    fn default() -> Self {
        Self {
            users: 2000,
            items: 500,
            brands: 20,
            categories: 10,
            price_buckets: 5,
            title_tokens: 30,
            time_buckets: 4,
            srp_fraction: 0.5,
            beta_sim: 2.0,
            beta_div: 2.0,
            interest_weight: 1.0,
            favorite_categories: 3,
            behaviors_per_user: 10,
            history_len: 50,
            slate_size: 10,
            impressions: 60_000,
            days: 6,
            positive_rate: 0.2,
            seed: 0,
        }
    }
}

macro_rules! world_fields {
    ($m:ident) => {
        $m!(users, items, brands, categories, price_buckets, title_tokens, time_buckets, srp_fraction,
            beta_sim, beta_div, interest_weight, favorite_categories, behaviors_per_user, history_len,
            slate_size, impressions, days, positive_rate, seed)
    };
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("users", self.users),
            ("items", self.items),
            ("brands", self.brands),
            ("categories", self.categories),
            ("price_buckets", self.price_buckets),
            ("title_tokens", self.title_tokens),
            ("time_buckets", self.time_buckets),
            ("favorite_categories", self.favorite_categories),
            ("history_len", self.history_len),
            ("slate_size", self.slate_size),
            ("impressions", self.impressions),
            ("days", self.days),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("world.{name} must be at least 1")));
        }
        if self.brands < self.categories || self.items < self.categories {
            return Err(Error::Config(format!(
                "every category needs a brand and an item: {} brands, {} items, {} categories",
                self.brands, self.items, self.categories
            )));
        }
        if self.slate_size >= self.items {
            return Err(Error::Config(format!(
                "slate of {} candidates does not fit a catalog of {} items besides the trigger",
                self.slate_size, self.items
            )));
        }
        if !(0.0..=1.0).contains(&self.srp_fraction) {
            return Err(Error::Config(format!("world.srp_fraction = {} is outside [0, 1]", self.srp_fraction)));
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return Err(Error::Config(format!("world.positive_rate = {} is outside (0, 1)", self.positive_rate)));
        }
        for (name, v) in [
            ("beta_sim", self.beta_sim),
            ("beta_div", self.beta_div),
            ("interest_weight", self.interest_weight),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("world.{name} must be finite")));
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, kv: &KvConfig) -> Result<()> {
        macro_rules! names {
            ($($f:ident),*) => { &[$(stringify!($f)),*] };
        }
        kv.check_known(world_fields!(names), "world")?;
        macro_rules! read {
            ($($f:ident),*) => {
                $(if let Some(v) = kv.get(stringify!($f))? { self.$f = v; })*
            };
        }
        world_fields!(read);
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        macro_rules! write {
            ($($f:ident),*) => { $(kv.set(stringify!($f), self.$f);)* };
        }
        world_fields!(write);
        kv
    }

    pub fn manifest(&self) -> VocabManifest {
        let sizes = [self.items, self.brands, self.categories, self.price_buckets, self.title_tokens];
        VocabManifest {
            attributes: DEFAULT_ATTRIBUTES
                .iter()
                .zip(sizes)
                .map(|(n, s)| (n.to_string(), s + 1))
                .collect(),
            users: self.users + 1,
            channels: 3,
            time_buckets: self.time_buckets + 1,
        }
    }

    pub fn num_events(&self) -> usize {
        self.impressions.div_ceil(self.slate_size)
    }
}

/// Generated samples plus the calibrated click-logit intercept.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: WorldConfig,
    pub manifest: VocabManifest,
    pub base_logit: f64,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// `key = value` header recording the generating config.
    pub fn header(&self) -> String {
        let mut kv = KvConfig::new();
        for key in self.config.to_kv().keys() {
            kv.set(format!("world.{key}"), self.config.to_kv().get_str(key).unwrap_or_default());
        }
        kv.set("world.base_logit", format!("{:?}", self.base_logit));
        kv.to_text()
    }
}

/// Click logit of `cand` for `user` on `channel`, relative to the intercept.
pub fn click_logit(cfg: &WorldConfig, user: &LatentUser, channel: usize, trigger: &Item, cand: &Item, history: &[Item]) -> f64 {
    let interest = user.interest[cand.category] / user.favorite();
    let mut z = cfg.interest_weight * interest;
    if channel == CHANNEL_SRP {
        z += cfg.beta_sim * overlap(trigger, cand);
    } else if channel == CHANNEL_GUL {
        z += cfg.beta_div * novelty(cand, history);
    }
    z
}

struct Simulation<'a> {
    cfg: &'a WorldConfig,
    world: &'a World,
    histories: Vec<Vec<(usize, u64)>>,
    clock: u64,
}

impl<'a> Simulation<'a> {
    fn new(cfg: &'a WorldConfig, world: &'a World, rng: &mut ChaCha8Rng) -> Self {
        let mut clock = 0;
        let histories = world
            .users
            .iter()
            .map(|u| {
                (0..cfg.behaviors_per_user)
                    .map(|_| {
                        clock += 1;
                        (world.sample_interest_item(u, rng), clock)
                    })
                    .collect()
            })
            .collect();
        Self {
            cfg,
            world,
            histories,
            clock,
        }
    }

    /// Runs until `events` slates with at least one click have been kept.
    fn run(&mut self, base: f64, events: usize, rng: &mut ChaCha8Rng, mut emit: impl FnMut(Sample)) -> Result<()> {
        let cfg = self.cfg;
        let world = self.world;
        let users = WeightedIndex::new(world.users.iter().map(|u| u.activity))
            .map_err(|e| Error::Config(format!("user activity: {e}")))?;
        let mut kept = 0usize;
        let mut attempts = 0usize;
        while kept < events {
            attempts += 1;
            if attempts > 1000 * events.max(1) {
                return Err(Error::Config(
                    "almost no slate receives a click; raise world.positive_rate".into(),
                ));
            }
            self.clock += 1;
            let ts = self.clock;
            let u = users.sample(rng);
            let user = &world.users[u];
            let channel = if rng.gen_bool(cfg.srp_fraction) { CHANNEL_SRP } else { CHANNEL_GUL };
            let time_bucket = rng.gen_range(1..=cfg.time_buckets);
            let trigger = world.sample_interest_item(user, rng);
            let slate = world.slate(trigger, cfg.slate_size, rng);

            let hist = &self.histories[u];
            let recent = &hist[hist.len().saturating_sub(cfg.history_len)..];
            let recent_items: Vec<Item> = recent.iter().map(|&(i, _)| world.items[i]).collect();
            let trig = &world.items[trigger];
            let clicks: Vec<bool> = slate
                .iter()
                .map(|&c| {
                    let z = base + click_logit(cfg, user, channel, trig, &world.items[c], &recent_items);
                    rng.gen_bool(sigmoid(z))
                })
                .collect();
            if !clicks.iter().any(|&c| c) {
                continue;
            }
            let day = (kept * cfg.days / events) as u32;
            let seq: Vec<Vec<usize>> = recent_items.iter().map(Item::attrs).collect();
            let seq_ts: Vec<u64> = recent.iter().map(|&(_, t)| t).collect();
            for (&c, &clicked) in slate.iter().zip(&clicks) {
                emit(Sample {
                    event: kept as u64,
                    day,
                    ts,
                    user: u + 1,
                    channel,
                    time_bucket,
                    trigger: trig.attrs(),
                    target: world.items[c].attrs(),
                    seq: seq.clone(),
                    seq_ts: seq_ts.clone(),
                    label: u8::from(clicked),
                });
            }
            let hist = &mut self.histories[u];
            hist.push((trigger, ts));
            hist.extend(slate.iter().zip(&clicks).filter(|(_, &k)| k).map(|(&c, _)| (c, ts)));
            if hist.len() > 2 * cfg.history_len {
                hist.drain(..hist.len() - cfg.history_len);
            }
            kept += 1;
        }
        Ok(())
    }
}

const PILOT_EVENTS: usize = 1500;
const PILOT_STREAM: u64 = 0x5eed_0f_ba5e;

/// Intercept whose kept-slate positive rate matches `cfg.positive_rate`,
/// found by bisection on a fixed pilot run.
pub fn calibrate_base(cfg: &WorldConfig, world: &World) -> Result<f64> {
    let rate = |base: f64| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ PILOT_STREAM);
        let mut sim = Simulation::new(cfg, world, &mut rng);
        let (mut pos, mut n) = (0usize, 0usize);
        sim.run(base, PILOT_EVENTS.min(cfg.num_events().max(200)), &mut rng, |s| {
            pos += usize::from(s.label);
            n += 1;
        })?;
        Ok(pos as f64 / n as f64)
    };
    let (mut lo, mut hi) = (-12.0, 6.0);
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if rate(mid)? < cfg.positive_rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

pub fn generate(cfg: &WorldConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let world = World::build(cfg, &mut rng)?;
    let base_logit = calibrate_base(cfg, &world)?;
    let mut sim = Simulation::new(cfg, &world, &mut rng);
    let mut samples = Vec::with_capacity(cfg.num_events() * cfg.slate_size);
    sim.run(base_logit, cfg.num_events(), &mut rng, |s| samples.push(s))?;
    Ok(Dataset {
        config: cfg.clone(),
        manifest: cfg.manifest(),
        base_logit,
        samples,
    })
}
