use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;
use statrs::distribution::{Binomial, DiscreteCDF};

use super::train::predict;
use crate::error::{Error, Result};
use crate::features::{channel_name, Sample, CHANNEL_GUL, CHANNEL_SRP};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChannelStats {
    pub channel: String,
    pub users: usize,
    pub mean_categories: f64,
    pub std_categories: f64,
    pub mean_brands: f64,
    pub std_brands: f64,
}

/// Sign test on users observed under both channels, comparing their mean
/// distinct categories (GUL minus SRP).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SignTest {
    pub users: usize,
    pub gul_greater: usize,
    pub srp_greater: usize,
    pub ties: usize,
    /// P(at least `gul_greater` successes) under a fair coin.
    pub p_gul_greater: f64,
    pub p_two_sided: f64,
}

impl SignTest {
    pub fn from_counts(gul_greater: usize, srp_greater: usize, ties: usize) -> Result<Self> {
        let n = gul_greater + srp_greater;
        let (upper, lower) = if n == 0 {
            (1.0, 1.0)
        } else {
            let b = Binomial::new(0.5, n as u64).map_err(|e| Error::Metric(e.to_string()))?;
            let k = gul_greater as u64;
            // P(X >= k), P(X <= k)
            let upper = if k == 0 { 1.0 } else { b.sf(k - 1) };
            (upper, b.cdf(k))
        };
        Ok(Self {
            users: n + ties,
            gul_greater,
            srp_greater,
            ties,
            p_gul_greater: upper,
            p_two_sided: (2.0 * upper.min(lower)).min(1.0),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseStudy {
    pub top_k: usize,
    /// True when `top_k` exceeded some slate and was clamped to its size.
    pub clamped: bool,
    pub channels: Vec<ChannelStats>,
    pub sign_test: SignTest,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Distinct categories and brands among each event's top-k candidates by
/// `scores`, averaged per user within each channel.
pub fn diversity_from_scores(
    samples: &[Sample],
    scores: &[f64],
    top_k: usize,
    category: usize,
    brand: usize,
) -> Result<CaseStudy> {
    if samples.len() != scores.len() {
        return Err(Error::shape("case_study", &[samples.len()], &[scores.len()]));
    }
    if top_k == 0 {
        return Err(Error::Config("top_k must be at least 1".into()));
    }
    let mut events: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        events.entry(s.event).or_default().push(i);
    }
    let mut clamped = false;
    // (user, channel) -> per-event counts
    let mut per_user: BTreeMap<(usize, usize), Vec<(f64, f64)>> = BTreeMap::new();
    for idx in events.values_mut() {
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        if top_k > idx.len() {
            clamped = true;
        }
        let top = &idx[..top_k.min(idx.len())];
        let cats: BTreeSet<usize> = top.iter().map(|&i| samples[i].target[category]).collect();
        let brands: BTreeSet<usize> = top.iter().map(|&i| samples[i].target[brand]).collect();
        let first = &samples[idx[0]];
        per_user
            .entry((first.user, first.channel))
            .or_default()
            .push((cats.len() as f64, brands.len() as f64));
    }
    let user_means: BTreeMap<(usize, usize), (f64, f64)> = per_user
        .into_iter()
        .map(|(key, v)| {
            let n = v.len() as f64;
            let c = v.iter().map(|x| x.0).sum::<f64>() / n;
            let b = v.iter().map(|x| x.1).sum::<f64>() / n;
            (key, (c, b))
        })
        .collect();
    let channel_ids: BTreeSet<usize> = user_means.keys().map(|&(_, c)| c).collect();
    let channels = channel_ids
        .iter()
        .map(|&ch| {
            let rows: Vec<(f64, f64)> = user_means
                .iter()
                .filter(|((_, c), _)| *c == ch)
                .map(|(_, &v)| v)
                .collect();
            let (mc, sc) = mean_std(&rows.iter().map(|r| r.0).collect::<Vec<_>>());
            let (mb, sb) = mean_std(&rows.iter().map(|r| r.1).collect::<Vec<_>>());
            ChannelStats {
                channel: channel_name(ch),
                users: rows.len(),
                mean_categories: mc,
                std_categories: sc,
                mean_brands: mb,
                std_brands: sb,
            }
        })
        .collect();
    let (mut gul, mut srp, mut ties) = (0, 0, 0);
    for (&(user, ch), &(c_srp, _)) in &user_means {
        if ch != CHANNEL_SRP {
            continue;
        }
        if let Some(&(c_gul, _)) = user_means.get(&(user, CHANNEL_GUL)) {
            match c_gul.partial_cmp(&c_srp) {
                Some(std::cmp::Ordering::Greater) => gul += 1,
                Some(std::cmp::Ordering::Less) => srp += 1,
                _ => ties += 1,
            }
        }
    }
    Ok(CaseStudy {
        top_k,
        clamped,
        channels,
        sign_test: SignTest::from_counts(gul, srp, ties)?,
    })
}

pub fn case_study(model: &Model, samples: &[Sample], top_k: usize, batch_size: usize) -> Result<CaseStudy> {
    let m = model.manifest();
    let find = |name: &str| {
        m.attribute_index(name)
            .ok_or_else(|| Error::Config(format!("case study needs a `{name}` attribute")))
    };
    let (category, brand) = (find("category")?, find("brand")?);
    let scores = predict(model, samples, batch_size)?;
    diversity_from_scores(samples, &scores, top_k, category, brand)
}

impl CaseStudy {
    /// `channel metric mean std` rows, tab-separated, with a header.
    pub fn plot_table(&self) -> String {
        let mut out = String::from("channel\tmetric\tmean\tstd\n");
        for c in &self.channels {
            let _ = writeln!(out, "{}\tcategories\t{:.6}\t{:.6}", c.channel, c.mean_categories, c.std_categories);
            let _ = writeln!(out, "{}\tbrands\t{:.6}\t{:.6}", c.channel, c.mean_brands, c.std_brands);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(event: u64, user: usize, channel: usize, cat: usize, brand: usize) -> Sample {
        Sample {
            event,
            day: 0,
            ts: 1,
            user,
            channel,
            time_bucket: 1,
            trigger: vec![1, 1, 1],
            target: vec![1, brand, cat],
            seq: vec![],
            seq_ts: vec![],
            label: 0,
        }
    }

    #[test]
    fn top_one_counts_exactly_one() {
        let samples = vec![s(0, 1, 1, 3, 4), s(0, 1, 1, 5, 6), s(1, 1, 2, 7, 8), s(1, 1, 2, 9, 9)];
        let cs = diversity_from_scores(&samples, &[0.1, 0.9, 0.3, 0.2], 1, 2, 1).unwrap();
        for c in &cs.channels {
            assert_eq!(c.mean_categories, 1.0);
            assert_eq!(c.mean_brands, 1.0);
        }
        assert!(!cs.clamped);
        let cs = diversity_from_scores(&samples, &[0.1, 0.9, 0.3, 0.2], 5, 2, 1).unwrap();
        assert!(cs.clamped);
        assert_eq!(cs.channels[0].mean_categories, 2.0);
    }

    #[test]
    fn sign_test_values() {
        let t = SignTest::from_counts(9, 1, 2).unwrap();
        // P(X >= 9 | n=10) = 11/1024
        assert!((t.p_gul_greater - 11.0 / 1024.0).abs() < 1e-12);
        assert!((t.p_two_sided - 22.0 / 1024.0).abs() < 1e-12);
        let even = SignTest::from_counts(5, 5, 0).unwrap();
        assert!(even.p_two_sided >= 0.99);
    }
}
