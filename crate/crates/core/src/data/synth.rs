//! Synthetic interaction logs with category-correlated features and optional
//! preference drift over time.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::dataset::write_prepared;
use super::{DataError, DatasetStats, FeatureTable, Interaction, InteractionLog, ItemMeta, Result};

const EPOCH_START: i64 = 1_500_000_000;
const DAY: i64 = 86_400;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub text_dim: usize,
    pub image_dim: usize,
    pub n_categories: usize,
    pub drift: bool,
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
    /// Every item ends up with at least this many interactions.
    pub min_item_count: usize,
    pub latent_dim: usize,
    pub span_days: i64,
    /// Inverse temperature of the item choice softmax.
    pub sharpness: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 50,
            n_items: 30,
            text_dim: 16,
            image_dim: 16,
            n_categories: 4,
            drift: false,
            seed: 0,
            min_len: 8,
            max_len: 14,
            min_item_count: 5,
            latent_dim: 8,
            span_days: 720,
            sharpness: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub log: InteractionLog,
    pub items: Vec<ItemMeta>,
    pub text: FeatureTable,
    pub image: FeatureTable,
}

impl SynthData {
    /// Writes a prepared dataset directory.
    pub fn write(&self, dir: &Path) -> Result<DatasetStats> {
        let n_categories = self.items.iter().flat_map(|m| m.categories.iter()).max().map_or(0, |&c| c + 1);
        write_prepared(&self.log, &self.items, &self.text, &self.image, dir, n_categories)
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn project(m: &[Vec<f64>], z: &[f64], noise: Vec<f64>) -> Vec<f32> {
    m.iter().zip(noise).map(|(row, e)| (dot(row, z) + e) as f32).collect()
}

struct User {
    first: Vec<f64>,
    second: Vec<f64>,
}

impl User {
    /// Preference at global time fraction `s`.
    fn preference(&self, s: f64, drift: bool) -> Vec<f64> {
        let w = if drift { s } else { 0.5 };
        self.first.iter().zip(&self.second).map(|(a, b)| (1.0 - w) * a + w * b).collect()
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    if cfg.n_items < 2 {
        return Err(DataError::Synth(format!("need at least 2 items, got {}", cfg.n_items)));
    }
    if cfg.n_users == 0 || cfg.n_categories == 0 || cfg.latent_dim == 0 {
        return Err(DataError::Synth("users, categories and latent size must be positive".into()));
    }
    if cfg.text_dim == 0 || cfg.image_dim == 0 {
        return Err(DataError::Synth("feature dimensions must be positive".into()));
    }
    if cfg.min_len < cfg.min_item_count.max(3) || cfg.max_len < cfg.min_len {
        return Err(DataError::Synth(format!(
            "sequence lengths [{}, {}] must start at max(3, min_item_count = {})",
            cfg.min_len, cfg.max_len, cfg.min_item_count
        )));
    }
    if cfg.n_users * cfg.min_len < cfg.n_items * cfg.min_item_count {
        return Err(DataError::Synth(format!(
            "{} users x {} interactions cannot cover {} items {} times each",
            cfg.n_users, cfg.min_len, cfg.n_items, cfg.min_item_count
        )));
    }
    if cfg.span_days <= 0 {
        return Err(DataError::Synth("time span must be positive".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.latent_dim;
    let c = cfg.n_categories;
    let centroids: Vec<Vec<f64>> = (0..c).map(|_| normal_vec(&mut rng, k, 1.0)).collect();

    let mut items = Vec::with_capacity(cfg.n_items);
    let mut latent = Vec::with_capacity(cfg.n_items);
    for v in 0..cfg.n_items {
        let primary = v % c;
        let mut cats = BTreeSet::from([primary]);
        let mut z = centroids[primary].clone();
        if c > 1 && rng.random::<f64>() < 0.2 {
            let other = (primary + rng.random_range(1..c)) % c;
            cats.insert(other);
            z.iter_mut().zip(&centroids[other]).for_each(|(a, b)| *a += 0.5 * b);
        }
        z.iter_mut().zip(normal_vec(&mut rng, k, 0.5)).for_each(|(a, e)| *a += e);
        items.push(cats);
        latent.push(z);
    }

    let scale = 1.0 / (k as f64).sqrt();
    let text_proj: Vec<Vec<f64>> = (0..cfg.text_dim).map(|_| normal_vec(&mut rng, k, scale)).collect();
    let image_proj: Vec<Vec<f64>> = (0..cfg.image_dim).map(|_| normal_vec(&mut rng, k, scale)).collect();
    let width = cfg.n_items.to_string().len().max(4);
    let item_token = |v: usize| format!("i{:0width$}", v + 1);
    let mut text_rows = Vec::with_capacity(cfg.n_items);
    let mut image_rows = Vec::with_capacity(cfg.n_items);
    for (v, z) in latent.iter().enumerate() {
        let tn = normal_vec(&mut rng, cfg.text_dim, 0.1);
        let inn = normal_vec(&mut rng, cfg.image_dim, 0.3);
        text_rows.push((item_token(v), project(&text_proj, z, tn)));
        image_rows.push((item_token(v), project(&image_proj, z, inn)));
    }

    // Early interests come from the lower half of the categories and late
    // interests from the upper half, so drift is visible in aggregate.
    let half = c / 2;
    let users: Vec<User> = (0..cfg.n_users)
        .map(|_| {
            let ca = rng.random_range(0..half.max(1));
            let cb = rng.random_range(half..c);
            let mut first = centroids[ca].clone();
            first.iter_mut().zip(normal_vec(&mut rng, k, 0.3)).for_each(|(a, e)| *a += e);
            let mut second = centroids[cb].clone();
            second.iter_mut().zip(normal_vec(&mut rng, k, 0.3)).for_each(|(a, e)| *a += e);
            User { first, second }
        })
        .collect();

    let span = cfg.span_days * DAY;
    let fraction = |t: i64| (t - EPOCH_START) as f64 / span as f64;
    let mut seqs: Vec<Vec<(i64, usize)>> = Vec::with_capacity(cfg.n_users);
    for user in &users {
        let n = rng.random_range(cfg.min_len..=cfg.max_len);
        let start = rng.random_range(0.0..0.7);
        let len = rng.random_range(0.3..=1.0 - start);
        let mut times: Vec<i64> =
            (0..n).map(|_| EPOCH_START + ((start + len * rng.random::<f64>()) * span as f64) as i64).collect();
        times.sort_unstable();
        for i in 1..n {
            if times[i] <= times[i - 1] {
                times[i] = times[i - 1] + 1;
            }
        }
        let mut seen = HashSet::new();
        let mut seq = Vec::with_capacity(n);
        for &t in &times {
            if seen.len() == cfg.n_items {
                seen.clear();
            }
            let pref = user.preference(fraction(t), cfg.drift);
            let logits: Vec<f64> = latent
                .iter()
                .enumerate()
                .map(|(v, z)| if seen.contains(&v) { f64::NEG_INFINITY } else { cfg.sharpness * dot(&pref, z) })
                .collect();
            let v = sample_softmax(&logits, &mut rng);
            seen.insert(v);
            seq.push((t, v));
        }
        seqs.push(seq);
    }

    rebalance(&mut seqs, &users, &latent, cfg, fraction);

    let width_u = cfg.n_users.to_string().len().max(4);
    let log = InteractionLog::from_interactions(seqs.iter().enumerate().flat_map(|(u, seq)| {
        seq.iter().map(move |&(t, v)| Interaction {
            user: format!("u{:0width_u$}", u + 1),
            item: format!("i{:0width$}", v + 1),
            timestamp: t,
        })
    }));
    let items = items
        .into_iter()
        .enumerate()
        .map(|(v, categories)| ItemMeta { item: item_token(v), categories })
        .collect();
    Ok(SynthData {
        log,
        items,
        text: FeatureTable::new(cfg.text_dim, text_rows)?,
        image: FeatureTable::new(cfg.image_dim, image_rows)?,
    })
}

fn sample_softmax(logits: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let mut r = rng.random::<f64>() * w.iter().sum::<f64>();
    for (i, &wi) in w.iter().enumerate() {
        if r < wi {
            return i;
        }
        r -= wi;
    }
    w.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

/// Moves interactions from over-used items to items below the minimum
/// count, choosing the swap the user's preference at that time favours most.
fn rebalance(
    seqs: &mut [Vec<(i64, usize)>],
    users: &[User],
    latent: &[Vec<f64>],
    cfg: &SynthConfig,
    fraction: impl Fn(i64) -> f64,
) {
    let mut counts = vec![0usize; cfg.n_items];
    for &(_, v) in seqs.iter().flatten() {
        counts[v] += 1;
    }
    while let Some(target) = (0..cfg.n_items).filter(|&v| counts[v] < cfg.min_item_count).min_by_key(|&v| counts[v]) {
        let mut best: Option<(f64, usize, usize)> = None;
        for (u, seq) in seqs.iter().enumerate() {
            if seq.iter().any(|&(_, v)| v == target) {
                continue;
            }
            for (pos, &(t, v)) in seq.iter().enumerate() {
                if counts[v] <= cfg.min_item_count {
                    continue;
                }
                let score = dot(&users[u].preference(fraction(t), cfg.drift), &latent[target]);
                if best.is_none_or(|(s, _, _)| score > s) {
                    best = Some((score, u, pos));
                }
            }
        }
        // The coverage check in `generate` guarantees a donor exists unless
        // every user already holds `target`.
        let Some((_, u, pos)) = best else { break };
        counts[seqs[u][pos].1] -= 1;
        counts[target] += 1;
        seqs[u][pos].1 = target;
    }
}

/// Chi-squared statistic of the 2 x |C| table of category counts before and
/// after the midpoint of the log's time span.
pub fn drift_statistic(log: &InteractionLog, items: &[ItemMeta]) -> f64 {
    let cats: BTreeMap<&str, &BTreeSet<usize>> = items.iter().map(|m| (m.item.as_str(), &m.categories)).collect();
    let (Some(lo), Some(hi)) = (log.timestamps().min(), log.timestamps().max()) else { return 0.0 };
    let mid = lo + (hi - lo) / 2;
    let n_cat = items.iter().flat_map(|m| m.categories.iter()).max().map_or(0, |&c| c + 1);
    let mut table = vec![[0.0f64; 2]; n_cat];
    for it in log.iter() {
        let half = usize::from(it.timestamp > mid);
        for &c in cats.get(it.item.as_str()).into_iter().flat_map(|s| s.iter()) {
            table[c][half] += 1.0;
        }
    }
    let col: [f64; 2] = [table.iter().map(|r| r[0]).sum(), table.iter().map(|r| r[1]).sum()];
    let total = col[0] + col[1];
    let mut chi2 = 0.0;
    for row in &table {
        let row_total = row[0] + row[1];
        for h in 0..2 {
            let expected = row_total * col[h] / total;
            if expected > 0.0 {
                chi2 += (row[h] - expected).powi(2) / expected;
            }
        }
    }
    chi2
}
