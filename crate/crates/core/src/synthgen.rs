//! Deterministic synthetic world generator. Every user gets a planted
//! preferred advertiser; engagement and future conversions lean toward it
//! with a configurable strength, which gives downstream experiments a
//! known answer sheet (planted_truth) to measure against.
//!
//! Generation is seeded per entity (advertiser, user) rather than by
//! stream position, so worlds are reproducible and insensitive to
//! generation order.

use chrono::NaiveDate;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{
    AdvertiserRecord, ConversionPriority, Event, EventKind, Objective, UserProfile,
};
use crate::fnv1a64;
use crate::ingestion::{end_of_day_utc, write_jsonl, IngestError};
use crate::retrieval::AdItem;

const ADJECTIVES: [&str; 24] = [
    "Cedar", "Golden", "Urban", "Coastal", "Nimble", "Bright", "Copper", "Wild", "Quiet",
    "Summit", "Velvet", "Rustic", "Polar", "Ember", "Lunar", "Prairie", "Maple", "Harbor",
    "Atlas", "Crimson", "Willow", "Granite", "Breezy", "Vivid",
];

const NOUNS: [&str; 24] = [
    "Works", "Goods", "Supply", "Trading", "Collective", "Market", "Studio", "Labs",
    "Outfitters", "Provisions", "Forge", "Mercantile", "Botanicals", "Threads", "Roasters",
    "Hardware", "Kitchens", "Gardens", "Athletics", "Optics", "Paperie", "Saddlery",
    "Candleworks", "Furnishings",
];

const CATEGORIES: [&str; 12] = [
    "home decor", "fitness", "beauty", "outdoor gear", "electronics", "fashion", "garden",
    "toys", "kitchen", "travel", "automotive", "pet supplies",
];

const QUERY_SUFFIXES: [&str; 8] =
    ["ideas", "sale", "best picks", "near me", "reviews", "under 50", "premium", "gifts"];

const STATES: [&str; 8] = ["CA", "NY", "TX", "WA", "FL", "IL", "CO", "MA"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_advertisers: usize,
    pub n_items: usize,
    /// History depth before the anchor date, in days.
    pub days: i64,
    pub seed: u64,
    /// Probability that any planted-biased draw actually picks the
    /// planted advertiser. 1.0 makes the world fully deterministic per
    /// user; 0.0 removes the signal entirely.
    pub affinity_strength: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 1000,
            n_advertisers: 50,
            n_items: 200,
            days: 120,
            seed: 7,
            affinity_strength: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub user_id: String,
    pub advertiser_id: String,
    pub advertiser_name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    /// Cohort anchor: history sits at or before this day's end, planted
    /// label conversions land inside the following week.
    pub anchor_date: NaiveDate,
    pub events: Vec<Event>,
    pub catalog: Vec<AdvertiserRecord>,
    pub profiles: Vec<UserProfile>,
    pub items: Vec<AdItem>,
    pub planted_truth: Vec<PlantedTruth>,
}

/// Advertiser category is a stable function of its index.
pub fn advertiser_category(index: usize) -> &'static str {
    CATEGORIES[index % CATEGORIES.len()]
}

/// Lowercased alphanumeric form of the name, used as the web domain.
pub fn advertiser_domain(name: &str) -> String {
    name.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_lowercase()
}

fn advertiser_name(index: usize) -> String {
    let adj = ADJECTIVES[index % ADJECTIVES.len()];
    let noun = NOUNS[(index / ADJECTIVES.len()) % NOUNS.len()];
    if index < ADJECTIVES.len() * NOUNS.len() {
        format!("{adj} {noun}")
    } else {
        format!("{adj} {noun} {index}")
    }
}

fn build_catalog(config: &SynthConfig) -> Vec<AdvertiserRecord> {
    (0..config.n_advertisers)
        .map(|i| {
            let advertiser_id = format!("adv{i:04}");
            let mut rng =
                ChaCha8Rng::seed_from_u64(config.seed ^ fnv1a64(advertiser_id.as_bytes()));
            // Index 0 is pinned fully active so a planted advertiser and a
            // non-empty preset pool always exist.
            let pinned = i == 0;
            AdvertiserRecord {
                advertiser_id,
                name: advertiser_name(i),
                active_on_platform: pinned || rng.gen_bool(0.95),
                active_spend: pinned || rng.gen_bool(0.9),
                market: if pinned || rng.gen_bool(0.85) { "US".into() } else { "GB".into() },
                shopping: pinned || rng.gen_bool(0.9),
                objective: if pinned {
                    Objective::Ocpm
                } else {
                    match rng.gen_range(0..10) {
                        0..=4 => Objective::Ocpm,
                        5..=8 => Objective::Roas,
                        _ => Objective::Other,
                    }
                },
                daily_revenue: rng.gen_range(100.0..100_000.0),
            }
        })
        .collect()
}

struct UserGen<'a> {
    rng: ChaCha8Rng,
    config: &'a SynthConfig,
    catalog: &'a [AdvertiserRecord],
    active_idx: &'a [usize],
    planted: usize,
    history_start: i64,
    anchor_end: i64,
}

impl UserGen<'_> {
    fn history_ts(&mut self) -> i64 {
        self.rng.gen_range(self.history_start + 1..=self.anchor_end)
    }

    /// Planted advertiser with probability `affinity_strength`, otherwise
    /// a uniform draw from `pool`.
    fn biased_pick(&mut self, pool: &[usize]) -> usize {
        if self.rng.gen_bool(self.config.affinity_strength) {
            self.planted
        } else {
            pool[self.rng.gen_range(0..pool.len())]
        }
    }

    fn conversion(&mut self, user_id: &str, kind: EventKind, all_idx: &[usize]) -> Event {
        let adv = self.biased_pick(all_idx);
        let high = self.rng.gen_bool(0.8);
        Event {
            user_id: user_id.into(),
            timestamp: self.history_ts(),
            kind,
            advertiser_id: Some(self.catalog[adv].advertiser_id.clone()),
            query: None,
            url: None,
            category: Some(advertiser_category(adv).into()),
            brand: None,
            dwell_seconds: None,
            conversion_type: Some(if high {
                ConversionPriority::HighPriority
            } else {
                ConversionPriority::LowPriority
            }),
        }
    }
}

/// Builds the full world: catalog, profiles, item corpus, per-user event
/// history, and the planted-truth answer sheet.
pub fn generate_world(config: &SynthConfig) -> SynthWorld {
    assert!(config.n_users >= 1 && config.n_advertisers >= 1 && config.n_items >= 1);
    assert!(config.days >= 1);
    assert!(
        (0.0..=1.0).contains(&config.affinity_strength),
        "affinity_strength must be a probability"
    );

    let anchor_date = NaiveDate::from_ymd_opt(2024, 6, 1).expect("valid date");
    let anchor_end = end_of_day_utc(anchor_date);
    let history_start = anchor_end - config.days * 86_400;
    let label_end = anchor_end + 7 * 86_400;

    let catalog = build_catalog(config);
    let active_idx: Vec<usize> =
        (0..catalog.len()).filter(|&i| catalog[i].is_active()).collect();
    let all_idx: Vec<usize> = (0..catalog.len()).collect();

    let items: Vec<AdItem> = (0..config.n_items)
        .map(|i| {
            let adv = i % catalog.len();
            AdItem {
                item_id: format!("item{i:05}"),
                advertiser_id: catalog[adv].advertiser_id.clone(),
                feature_tokens: vec![
                    format!("cat:{}", advertiser_category(adv)),
                    format!("brand:{}", advertiser_domain(&catalog[adv].name)),
                    format!("adv:{}", catalog[adv].advertiser_id),
                ],
            }
        })
        .collect();

    let mut events = Vec::new();
    let mut profiles = Vec::with_capacity(config.n_users);
    let mut planted_truth = Vec::with_capacity(config.n_users);

    for u in 0..config.n_users {
        let user_id = format!("user{u:05}");
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ fnv1a64(user_id.as_bytes()));

        profiles.push(UserProfile {
            user_id: user_id.clone(),
            age: rng.gen_bool(0.9).then(|| rng.gen_range(18..=75)),
            gender: match rng.gen_range(0..10) {
                0..=4 => Some("female".into()),
                5..=8 => Some("male".into()),
                _ => None,
            },
            user_state: STATES[rng.gen_range(0..STATES.len())].into(),
        });

        let planted = active_idx[rng.gen_range(0..active_idx.len())];
        planted_truth.push(PlantedTruth {
            user_id: user_id.clone(),
            advertiser_id: catalog[planted].advertiser_id.clone(),
            advertiser_name: catalog[planted].name.clone(),
        });

        let mut gen = UserGen {
            rng,
            config,
            catalog: &catalog,
            active_idx: &active_idx,
            planted,
            history_start,
            anchor_end,
        };

        for _ in 0..gen.rng.gen_range(4..=20) {
            events.push(gen.conversion(&user_id, EventKind::MatchedConversion, &all_idx));
        }
        for _ in 0..gen.rng.gen_range(4..=20) {
            events.push(gen.conversion(&user_id, EventKind::AttributedConversion, &all_idx));
        }

        for _ in 0..gen.rng.gen_range(8..=25) {
            let adv = gen.biased_pick(&all_idx);
            let suffix = QUERY_SUFFIXES[gen.rng.gen_range(0..QUERY_SUFFIXES.len())];
            events.push(Event {
                user_id: user_id.clone(),
                timestamp: gen.history_ts(),
                kind: EventKind::OnsiteSearch,
                advertiser_id: None,
                query: Some(format!("{} {}", advertiser_category(adv), suffix)),
                url: None,
                category: Some(advertiser_category(adv).into()),
                brand: None,
                dwell_seconds: None,
                conversion_type: None,
            });
        }
        for _ in 0..gen.rng.gen_range(0..=8) {
            let adv = gen.biased_pick(&all_idx);
            let suffix = QUERY_SUFFIXES[gen.rng.gen_range(0..QUERY_SUFFIXES.len())];
            events.push(Event {
                user_id: user_id.clone(),
                timestamp: gen.history_ts(),
                kind: EventKind::OffsiteSearch,
                advertiser_id: None,
                query: Some(format!("{} {}", advertiser_category(adv), suffix)),
                url: None,
                category: None,
                brand: None,
                dwell_seconds: None,
                conversion_type: None,
            });
        }
        for _ in 0..gen.rng.gen_range(0..=10) {
            let adv = gen.biased_pick(&all_idx);
            let domain = advertiser_domain(&gen.catalog[adv].name);
            let page = gen.rng.gen_range(1..=500);
            let with_brand = gen.rng.gen_bool(0.5);
            events.push(Event {
                user_id: user_id.clone(),
                timestamp: gen.history_ts(),
                kind: EventKind::OffsiteUrl,
                advertiser_id: None,
                query: None,
                url: Some(format!("https://www.{domain}.com/p/{page}")),
                category: None,
                brand: with_brand.then(|| domain.clone()),
                dwell_seconds: None,
                conversion_type: None,
            });
        }

        for _ in 0..gen.rng.gen_range(5..=20) {
            let adv = gen.biased_pick(&all_idx);
            events.push(Event {
                user_id: user_id.clone(),
                timestamp: gen.history_ts(),
                kind: EventKind::Impression,
                advertiser_id: Some(gen.catalog[adv].advertiser_id.clone()),
                query: None,
                url: None,
                category: None,
                brand: None,
                dwell_seconds: None,
                conversion_type: None,
            });
        }
        for _ in 0..gen.rng.gen_range(2..=10) {
            let adv = gen.biased_pick(&all_idx);
            events.push(Event {
                user_id: user_id.clone(),
                timestamp: gen.history_ts(),
                kind: EventKind::Click,
                advertiser_id: Some(gen.catalog[adv].advertiser_id.clone()),
                query: None,
                url: None,
                category: None,
                brand: None,
                dwell_seconds: Some(gen.rng.gen_range(1.0..300.0)),
                conversion_type: None,
            });
        }

        // Label week: biased draws stay inside the active set so every
        // future conversion can actually qualify as a label.
        if gen.rng.gen_bool(0.88) {
            for _ in 0..gen.rng.gen_range(1..=3) {
                let adv = gen.biased_pick(gen.active_idx);
                events.push(Event {
                    user_id: user_id.clone(),
                    timestamp: gen.rng.gen_range(anchor_end + 1..=label_end),
                    kind: EventKind::Conversion,
                    advertiser_id: Some(gen.catalog[adv].advertiser_id.clone()),
                    query: None,
                    url: None,
                    category: Some(advertiser_category(adv).into()),
                    brand: None,
                    dwell_seconds: None,
                    conversion_type: Some(ConversionPriority::HighPriority),
                });
            }
        }
    }

    events.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.user_id.cmp(&b.user_id)));

    SynthWorld { anchor_date, events, catalog, profiles, items, planted_truth }
}

impl SynthWorld {
    /// Everything observable at the anchor, as the ingestion layer would
    /// assemble it.
    pub fn snapshot(&self) -> crate::ingestion::Snapshot {
        crate::ingestion::build_snapshot(
            self.events.clone(),
            self.catalog.clone(),
            self.profiles.clone(),
            self.anchor_date,
        )
    }

    /// Events past the anchor day, i.e. the label horizon.
    pub fn future_events(&self) -> Vec<Event> {
        let cutoff = end_of_day_utc(self.anchor_date);
        self.events.iter().filter(|e| e.timestamp > cutoff).cloned().collect()
    }
}

/// Writes the world as the line-delimited files the pipeline ingests.
pub fn write_world(world: &SynthWorld, dir: &std::path::Path) -> Result<(), IngestError> {
    std::fs::create_dir_all(dir)?;
    write_jsonl(&world.events, &dir.join("events.jsonl"))?;
    write_jsonl(&world.catalog, &dir.join("catalog.jsonl"))?;
    write_jsonl(&world.profiles, &dir.join("profiles.jsonl"))?;
    write_jsonl(&world.items, &dir.join("items.jsonl"))?;
    write_jsonl(&world.planted_truth, &dir.join("planted_truth.jsonl"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{build_cohort, CohortConfig};
    use crate::domain::validate_event;
    use std::collections::HashMap;

    fn small() -> SynthConfig {
        SynthConfig { n_users: 120, n_advertisers: 20, n_items: 60, ..Default::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_world(&small());
        let b = generate_world(&small());
        assert_eq!(a, b);
    }

    #[test]
    fn different_seed_changes_the_world() {
        let a = generate_world(&small());
        let b = generate_world(&SynthConfig { seed: 8, ..small() });
        assert_ne!(a.events, b.events);
    }

    #[test]
    fn every_event_validates() {
        let world = generate_world(&small());
        assert!(!world.events.is_empty());
        for e in &world.events {
            assert!(validate_event(e).is_empty(), "invalid event: {e:?}");
        }
    }

    #[test]
    fn world_counts_match_config() {
        let world = generate_world(&small());
        assert_eq!(world.catalog.len(), 20);
        assert_eq!(world.profiles.len(), 120);
        assert_eq!(world.items.len(), 60);
        assert_eq!(world.planted_truth.len(), 120);
        let names: std::collections::HashSet<&str> =
            world.catalog.iter().map(|a| a.name.as_str()).collect();
        assert_eq!(names.len(), 20, "advertiser names must be unique");
    }

    #[test]
    fn planted_advertisers_are_active() {
        let world = generate_world(&small());
        let by_id: HashMap<&str, &crate::domain::AdvertiserRecord> =
            world.catalog.iter().map(|a| (a.advertiser_id.as_str(), a)).collect();
        for t in &world.planted_truth {
            assert!(by_id[t.advertiser_id.as_str()].is_active());
        }
    }

    #[test]
    fn full_affinity_makes_labels_equal_planted() {
        let config = SynthConfig { affinity_strength: 1.0, ..small() };
        let world = generate_world(&config);
        let cohort =
            build_cohort(&world.snapshot(), &world.future_events(), &CohortConfig::v1(11));
        assert!(cohort.len() > 50, "cohort unexpectedly small: {}", cohort.len());
        let planted: HashMap<&str, &str> = world
            .planted_truth
            .iter()
            .map(|t| (t.user_id.as_str(), t.advertiser_id.as_str()))
            .collect();
        for example in &cohort {
            assert_eq!(
                example.label.advertiser_id,
                planted[example.user_id.as_str()],
                "label diverged from planted preference for {}",
                example.user_id
            );
        }
    }

    #[test]
    fn label_agreement_tracks_affinity_strength() {
        let config = SynthConfig { n_users: 400, affinity_strength: 0.9, ..Default::default() };
        let world = generate_world(&config);
        let cohort =
            build_cohort(&world.snapshot(), &world.future_events(), &CohortConfig::v1(11));
        assert!(cohort.len() > 200);
        let planted: HashMap<&str, &str> = world
            .planted_truth
            .iter()
            .map(|t| (t.user_id.as_str(), t.advertiser_id.as_str()))
            .collect();
        let agree = cohort
            .iter()
            .filter(|e| e.label.advertiser_id == planted[e.user_id.as_str()])
            .count();
        let rate = agree as f64 / cohort.len() as f64;
        assert!(rate >= 0.82, "agreement {rate} too low for affinity 0.9");
    }

    #[test]
    fn history_stays_on_or_before_anchor_end_and_labels_after() {
        let world = generate_world(&small());
        let eod = end_of_day_utc(world.anchor_date);
        for e in &world.events {
            if e.kind == EventKind::Conversion {
                assert!(e.timestamp > eod && e.timestamp <= eod + 7 * 86_400);
            } else {
                assert!(e.timestamp <= eod, "history event after anchor: {e:?}");
            }
        }
    }

    #[test]
    fn events_are_time_ordered() {
        let world = generate_world(&small());
        assert!(world.events.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    }

    #[test]
    fn offsite_urls_resolve_back_to_catalog_brands() {
        let world = generate_world(&small());
        let domains: std::collections::HashSet<String> =
            world.catalog.iter().map(|a| advertiser_domain(&a.name)).collect();
        let mut checked = 0;
        for e in &world.events {
            if let Some(url) = &e.url {
                let brand = crate::compiler::extract_brand(url).expect("parseable url");
                assert!(domains.contains(&brand), "unknown brand {brand}");
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn items_cover_catalog_with_real_tokens() {
        let world = generate_world(&small());
        let ids: std::collections::HashSet<&str> =
            world.catalog.iter().map(|a| a.advertiser_id.as_str()).collect();
        for item in &world.items {
            assert!(ids.contains(item.advertiser_id.as_str()));
            assert_eq!(item.feature_tokens.len(), 3);
        }
        let covered: std::collections::HashSet<&str> =
            world.items.iter().map(|i| i.advertiser_id.as_str()).collect();
        assert_eq!(covered.len(), world.catalog.len().min(60));
    }

    #[test]
    fn write_world_round_trips() {
        let world = generate_world(&SynthConfig {
            n_users: 10,
            n_advertisers: 5,
            n_items: 10,
            ..Default::default()
        });
        let dir = tempfile::tempdir().unwrap();
        write_world(&world, dir.path()).unwrap();
        let events: Vec<Event> =
            crate::ingestion::read_jsonl(&dir.path().join("events.jsonl")).unwrap();
        assert_eq!(events, world.events);
        let truth: Vec<PlantedTruth> =
            crate::ingestion::read_jsonl(&dir.path().join("planted_truth.jsonl")).unwrap();
        assert_eq!(truth, world.planted_truth);
    }
}
