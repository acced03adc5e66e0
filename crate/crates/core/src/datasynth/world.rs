use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, LogNormal, WeightedIndex};

use super::WorldConfig;
use crate::error::{Error, Result};

/// Attribute IDs of one catalog item, all 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Item {
    pub id: usize,
    pub brand: usize,
    pub category: usize,
    pub price: usize,
    pub title: usize,
}

impl Item {
    /// `[item, brand, category, price, title]`.
    pub fn attrs(&self) -> Vec<usize> {
        vec![self.id, self.brand, self.category, self.price, self.title]
    }
}

/// Hidden preferences of a simulated user.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentUser {
    /// `interest[c]` for category `c` (index 0 unused); sums to 1.
    pub interest: Vec<f64>,
    /// Relative frequency of the user's visits.
    pub activity: f64,
}

impl LatentUser {
    pub fn favorite(&self) -> f64 {
        self.interest.iter().cloned().fold(0.0, f64::max)
    }
}

/// Catalog and user population.
#[derive(Clone, Debug)]
pub struct World {
    pub items: Vec<Item>,
    /// Item indices per category (index 0 unused).
    pub by_category: Vec<Vec<usize>>,
    pub users: Vec<LatentUser>,
}

/// Fraction of `{brand, category, price, title}` shared by two items.
pub fn overlap(a: &Item, b: &Item) -> f64 {
    let same = [a.brand == b.brand, a.category == b.category, a.price == b.price, a.title == b.title];
    same.iter().filter(|&&s| s).count() as f64 / same.len() as f64
}

/// Fraction of `{category, brand}` of `cand` absent from `history`.
pub fn novelty(cand: &Item, history: &[Item]) -> f64 {
    let new_cat = !history.iter().any(|h| h.category == cand.category);
    let new_brand = !history.iter().any(|h| h.brand == cand.brand);
    (usize::from(new_cat) + usize::from(new_brand)) as f64 / 2.0
}

impl World {
    pub fn build(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let nc = cfg.categories;
        // each brand sells in one category
        let brand_cat: Vec<usize> = (0..cfg.brands).map(|b| 1 + b % nc).collect();
        let mut brands_of = vec![Vec::new(); nc + 1];
        for (b, &c) in brand_cat.iter().enumerate() {
            brands_of[c].push(b + 1);
        }
        let tokens_per_cat = (cfg.title_tokens / nc).max(1);
        let price_center: Vec<f64> = (0..=nc).map(|_| rng.gen_range(0.0..cfg.price_buckets as f64)).collect();

        let mut items = Vec::with_capacity(cfg.items);
        let mut by_category = vec![Vec::new(); nc + 1];
        for i in 0..cfg.items {
            let category = 1 + i % nc;
            let brand = *brands_of[category].choose(rng).expect("brands >= categories");
            let jitter: f64 = rng.gen_range(-1.5..1.5);
            let price = ((price_center[category] + jitter).floor().max(0.0) as usize).min(cfg.price_buckets - 1) + 1;
            let title = if rng.gen_bool(0.7) {
                let base = (category - 1) * tokens_per_cat;
                1 + (base + rng.gen_range(0..tokens_per_cat)) % cfg.title_tokens
            } else {
                rng.gen_range(1..=cfg.title_tokens)
            };
            by_category[category].push(i);
            items.push(Item {
                id: i + 1,
                brand,
                category,
                price,
                title,
            });
        }

        let gamma = Gamma::new(1.0, 1.0).map_err(|e| Error::Config(e.to_string()))?;
        let activity = LogNormal::new(0.0, 0.5).map_err(|e| Error::Config(e.to_string()))?;
        let fav = cfg.favorite_categories.min(nc);
        let all: Vec<usize> = (1..=nc).collect();
        let users = (0..cfg.users)
            .map(|_| {
                let mut interest = vec![0.0; nc + 1];
                for &c in all.choose_multiple(rng, fav) {
                    interest[c] = gamma.sample(rng) + 1e-3;
                }
                let total: f64 = interest.iter().sum();
                interest.iter_mut().for_each(|v| *v /= total);
                LatentUser {
                    interest,
                    activity: activity.sample(rng),
                }
            })
            .collect();
        Ok(Self {
            items,
            by_category,
            users,
        })
    }

    /// Draws an item from the user's category interests.
    pub fn sample_interest_item<R: Rng>(&self, user: &LatentUser, rng: &mut R) -> usize {
        let cat = WeightedIndex::new(&user.interest).expect("interest has positive mass").sample(rng);
        *self.by_category[cat].choose(rng).expect("every category has items")
    }

    /// `size` distinct candidates for `trigger`: half from its category, the
    /// rest from the whole catalog.
    pub fn slate<R: Rng>(&self, trigger: usize, size: usize, rng: &mut R) -> Vec<usize> {
        let cat = self.items[trigger].category;
        let mut out = Vec::with_capacity(size);
        let similar: Vec<usize> = self.by_category[cat]
            .choose_multiple(rng, size / 2 + 1)
            .copied()
            .filter(|&i| i != trigger)
            .take(size / 2)
            .collect();
        out.extend(similar);
        while out.len() < size {
            let i = rng.gen_range(0..self.items.len());
            if i != trigger && !out.contains(&i) {
                out.push(i);
            }
        }
        out.shuffle(rng);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn overlap_and_novelty() {
        let a = Item {
            id: 1,
            brand: 2,
            category: 3,
            price: 4,
            title: 5,
        };
        let b = Item { id: 9, title: 7, ..a };
        assert_eq!(overlap(&a, &a), 1.0);
        assert_eq!(overlap(&a, &b), 0.75);
        assert_eq!(novelty(&a, &[]), 1.0);
        assert_eq!(novelty(&a, &[b]), 0.0);
        let c = Item { brand: 8, ..b };
        assert_eq!(novelty(&a, &[c]), 0.5);
    }

    #[test]
    fn interests_are_normalized_and_slates_distinct() {
        let cfg = WorldConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = World::build(&cfg, &mut rng).unwrap();
        for u in &w.users {
            assert!((u.interest.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let s = w.slate(5, cfg.slate_size, &mut rng);
        assert_eq!(s.len(), cfg.slate_size);
        let mut d = s.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), s.len());
        assert!(!s.contains(&5));
    }
}
