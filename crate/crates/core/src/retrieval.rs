//! Candidate generation around predicted advertisers: targeting filters,
//! a small hashed two-tower scorer, quota-controlled blending, and
//! diversity accounting.
//!
//! The two-tower model hashes feature tokens into a fixed bucket table per
//! tower (no vocabularies), mean-pools per side, and scores by dot
//! product. Training is plain SGD on a weighted logistic loss over
//! (positive, sampled-negative) pairs, deterministic given the seed.

use std::collections::{HashMap, HashSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{AdvertiserRecord, Event, EventKind, Prediction};
use crate::fnv1a64;
use crate::parsing::normalize_name;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RetrievalError {
    #[error("no positive events for the selected objective")]
    NoPositives,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdItem {
    pub item_id: String,
    pub advertiser_id: String,
    pub feature_tokens: Vec<String>,
}

/// What counts as a positive engagement, and with what weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingObjective {
    ImpressionsPositive,
    ClicksDurationWeighted,
    ConversionsPositive,
}

impl std::str::FromStr for TrainingObjective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "impressions" => Ok(TrainingObjective::ImpressionsPositive),
            "clicks" => Ok(TrainingObjective::ClicksDurationWeighted),
            "conversions" => Ok(TrainingObjective::ConversionsPositive),
            other => Err(format!("unknown objective: {other}")),
        }
    }
}

impl TrainingObjective {
    /// Per-event weight; zero weight means the event cannot train.
    fn weight(self, e: &Event) -> Option<f64> {
        match self {
            TrainingObjective::ImpressionsPositive => {
                (e.kind == EventKind::Impression).then_some(1.0)
            }
            TrainingObjective::ClicksDurationWeighted => (e.kind == EventKind::Click)
                .then(|| (1.0 + e.dwell_seconds.unwrap_or(0.0)).ln()),
            TrainingObjective::ConversionsPositive => e.kind.is_conversion().then_some(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoTowerModel {
    pub dim: usize,
    pub hash_buckets: usize,
    pub seed: u64,
    /// Flattened bucket-major tables, `hash_buckets * dim` each.
    pub user_table: Vec<f32>,
    pub item_table: Vec<f32>,
}

impl TwoTowerModel {
    pub fn new_zeroed(dim: usize, hash_buckets: usize, seed: u64) -> Self {
        assert!(dim >= 2 && hash_buckets >= 1);
        TwoTowerModel {
            dim,
            hash_buckets,
            seed,
            user_table: vec![0.0; hash_buckets * dim],
            item_table: vec![0.0; hash_buckets * dim],
        }
    }

    /// Both towers start from the same random table, so a user and an item
    /// with identical feature sets score as a squared norm at init.
    pub fn new_random(dim: usize, hash_buckets: usize, seed: u64) -> Self {
        let scale = 1.0 / (dim as f32).sqrt();
        let fill = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..hash_buckets * dim)
                .map(|_| rng.gen_range(-0.5f32..0.5) * scale)
                .collect::<Vec<f32>>()
        };
        TwoTowerModel { dim, hash_buckets, seed, user_table: fill(), item_table: fill() }
    }

    fn bucket(&self, token: &str) -> usize {
        ((fnv1a64(token.as_bytes()) ^ self.seed) % self.hash_buckets as u64) as usize
    }

    fn pooled(&self, table: &[f32], tokens: &[String]) -> Vec<f64> {
        let mut out = vec![0.0f64; self.dim];
        if tokens.is_empty() {
            return out;
        }
        for token in tokens {
            let offset = self.bucket(token) * self.dim;
            for (o, v) in out.iter_mut().zip(&table[offset..offset + self.dim]) {
                *o += *v as f64;
            }
        }
        for o in out.iter_mut() {
            *o /= tokens.len() as f64;
        }
        out
    }

    pub fn user_vector(&self, user_features: &[String]) -> Vec<f64> {
        self.pooled(&self.user_table, user_features)
    }

    pub fn item_vector(&self, item: &AdItem) -> Vec<f64> {
        self.pooled(&self.item_table, &item.feature_tokens)
    }
}

/// Dot product of the mean-pooled tower embeddings.
pub fn score(model: &TwoTowerModel, user_features: &[String], item: &AdItem) -> f64 {
    model
        .user_vector(user_features)
        .iter()
        .zip(model.item_vector(item))
        .map(|(u, v)| u * v)
        .sum()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One SGD step on a (user, item, label, weight) pair. Gradients spread
/// over the contributing buckets through the mean pooling.
fn sgd_step(
    model: &mut TwoTowerModel,
    user_features: &[String],
    item: &AdItem,
    positive: bool,
    weight: f64,
    lr: f64,
) -> f64 {
    let u = model.user_vector(user_features);
    let v = model.item_vector(item);
    let s: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    let y = if positive { 1.0 } else { 0.0 };
    let err = sigmoid(s) - y;
    let loss = if positive {
        weight * (1.0 + (-s).exp()).ln()
    } else {
        weight * (1.0 + s.exp()).ln()
    };
    let step = lr * weight * err;
    if user_features.is_empty() || item.feature_tokens.is_empty() {
        return loss;
    }
    let user_share = step / user_features.len() as f64;
    for token in user_features {
        let offset = model.bucket(token) * model.dim;
        for d in 0..model.dim {
            model.user_table[offset + d] -= (user_share * v[d]) as f32;
        }
    }
    let item_share = step / item.feature_tokens.len() as f64;
    for token in &item.feature_tokens {
        let offset = model.bucket(token) * model.dim;
        for d in 0..model.dim {
            model.item_table[offset + d] -= (item_share * u[d]) as f32;
        }
    }
    loss
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: TwoTowerModel,
    pub epoch_losses: Vec<f64>,
    pub positives: usize,
}

/// Trains on engagement events. A user's features are their identity
/// token; an event's positive item is picked deterministically among the
/// engaged advertiser's items (events carry no item ids). Negatives are
/// sampled uniformly from items outside the user's positive item set.
pub fn train_two_tower(
    mut model: TwoTowerModel,
    events: &[Event],
    items: &[AdItem],
    objective: TrainingObjective,
    epochs: usize,
    lr: f64,
    negatives_per_positive: usize,
    seed: u64,
) -> Result<TrainReport, RetrievalError> {
    let items_by_advertiser: HashMap<&str, Vec<usize>> = {
        let mut m: HashMap<&str, Vec<usize>> = HashMap::new();
        for (idx, item) in items.iter().enumerate() {
            m.entry(item.advertiser_id.as_str()).or_default().push(idx);
        }
        m
    };

    // (user, item index, weight) triples in a canonical order.
    let mut positives: Vec<(String, usize, f64)> = Vec::new();
    for e in events {
        let Some(weight) = objective.weight(e) else { continue };
        let Some(adv) = e.advertiser_id.as_deref() else { continue };
        let Some(candidates) = items_by_advertiser.get(adv) else { continue };
        let pick = (fnv1a64(format!("{}|{}", e.user_id, e.timestamp).as_bytes())
            % candidates.len() as u64) as usize;
        positives.push((e.user_id.clone(), candidates[pick], weight));
    }
    positives.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.total_cmp(&b.2)));
    if positives.is_empty() {
        return Err(RetrievalError::NoPositives);
    }

    let mut positive_items_of: HashMap<&str, HashSet<usize>> = HashMap::new();
    for (user, item_idx, _) in &positives {
        positive_items_of.entry(user.as_str()).or_default().insert(*item_idx);
    }

    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch as u64));
        let mut order: Vec<usize> = (0..positives.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for &p in &order {
            let (user, item_idx, weight) = &positives[p];
            let user_features = vec![format!("user:{user}")];
            loss_sum += sgd_step(&mut model, &user_features, &items[*item_idx], true, *weight, lr);
            loss_count += 1;
            let owned = &positive_items_of[user.as_str()];
            if owned.len() >= items.len() {
                continue;
            }
            let mut drawn = 0;
            let mut attempts = 0;
            while drawn < negatives_per_positive && attempts < negatives_per_positive * 20 {
                attempts += 1;
                let idx = rng.gen_range(0..items.len());
                if owned.contains(&idx) {
                    continue;
                }
                loss_sum += sgd_step(&mut model, &user_features, &items[idx], false, 1.0, lr);
                loss_count += 1;
                drawn += 1;
            }
        }
        epoch_losses.push(if loss_count == 0 { 0.0 } else { loss_sum / loss_count as f64 });
    }
    Ok(TrainReport { model, epoch_losses, positives: positives.len() })
}

/// Items of the advertisers the prediction named, in predicted-rank order;
/// item order within one advertiser follows the input catalog.
pub fn target_filter(
    prediction: &Prediction,
    catalog: &[AdvertiserRecord],
    items: &[AdItem],
) -> Vec<AdItem> {
    if !prediction.is_ok() {
        return Vec::new();
    }
    let name_to_ids: HashMap<String, Vec<&str>> = {
        let mut m: HashMap<String, Vec<&str>> = HashMap::new();
        for a in catalog {
            m.entry(normalize_name(&a.name)).or_default().push(a.advertiser_id.as_str());
        }
        m
    };
    let mut out = Vec::new();
    let mut seen_advertisers: HashSet<&str> = HashSet::new();
    for predicted in &prediction.advertisers {
        let Some(ids) = name_to_ids.get(&normalize_name(predicted)) else { continue };
        for id in ids {
            if !seen_advertisers.insert(id) {
                continue;
            }
            out.extend(items.iter().filter(|i| i.advertiser_id == *id).cloned());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DedupKey {
    Advertiser,
    Item,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendConfig {
    /// Hard cap on how many candidates the LLM channel may contribute.
    pub l0_quota: usize,
    pub dedup_key: DedupKey,
    /// Which channel id the quota applies to.
    pub llm_channel_id: String,
}

impl Default for BlendConfig {
    fn default() -> Self {
        BlendConfig { l0_quota: 50, dedup_key: DedupKey::Advertiser, llm_channel_id: "llm".into() }
    }
}

/// Interleaves channels round-robin by per-channel rank after capping the
/// LLM channel at its quota, then de-duplicates keeping the earliest
/// occurrence. Cross-channel scores are uncalibrated, so rank, not score,
/// drives the merge.
pub fn blend(channels: &[(String, Vec<AdItem>)], config: &BlendConfig) -> Vec<AdItem> {
    let capped: Vec<(&String, &[AdItem])> = channels
        .iter()
        .map(|(id, items)| {
            let limit = if *id == config.llm_channel_id { config.l0_quota } else { items.len() };
            (id, &items[..limit.min(items.len())])
        })
        .collect();
    let deepest = capped.iter().map(|(_, items)| items.len()).max().unwrap_or(0);
    let mut out: Vec<AdItem> = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for rank in 0..deepest {
        for (_, items) in &capped {
            let Some(item) = items.get(rank) else { continue };
            let key = match config.dedup_key {
                DedupKey::Advertiser => item.advertiser_id.clone(),
                DedupKey::Item => item.item_id.clone(),
            };
            if seen.insert(key) {
                out.push(item.clone());
            }
        }
    }
    out
}

/// Distinct advertisers among the top k, normalized by min(k, length).
/// An empty slate is vacuously diverse.
pub fn diversity(result: &[AdItem], k: usize) -> f64 {
    assert!(k >= 1);
    if result.is_empty() {
        return 1.0;
    }
    let top = &result[..k.min(result.len())];
    let distinct: HashSet<&str> = top.iter().map(|i| i.advertiser_id.as_str()).collect();
    distinct.len() as f64 / top.len() as f64
}
