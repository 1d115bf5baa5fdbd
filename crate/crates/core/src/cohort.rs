//! Cohort selection, label construction, and the train/eval split.
//!
//! A user enters the cohort when they were recently active (a conversion
//! inside the lookback window), pass the market filter, clear the minimum
//! sequence-length bar, and actually convert with a qualifying advertiser
//! inside the label window. The label is the first such conversion after
//! the anchor; features never see past the anchor.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::domain::{AdvertiserRecord, ConversionPriority, Event, Label};
use crate::fnv1a64;
use crate::ingestion::{end_of_day_utc, Snapshot};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortConfig {
    /// Exact match against `UserProfile.user_state`; empty admits everyone.
    pub market_filter: String,
    /// Carried configuration flag; profiles hold no consent field, so no
    /// per-user predicate is applied.
    pub require_optin: bool,
    pub conversion_lookback_days: i64,
    pub label_window_days: i64,
    /// Minimum count each conversion sequence (matched, attributed) must
    /// reach; 0 disables the filter.
    pub min_sequence_length: usize,
    pub split_fraction_train: f64,
    pub split_seed: u64,
}

impl CohortConfig {
    /// Strict launch cohort: only users with long conversion sequences.
    pub fn v0(split_seed: u64) -> Self {
        CohortConfig {
            market_filter: String::new(),
            require_optin: false,
            conversion_lookback_days: 90,
            label_window_days: 7,
            min_sequence_length: 10,
            split_fraction_train: 0.9,
            split_seed,
        }
    }

    /// Broad cohort: sequence-length filter removed.
    pub fn v1(split_seed: u64) -> Self {
        CohortConfig { min_sequence_length: 0, ..CohortConfig::v0(split_seed) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortExample {
    pub user_id: String,
    pub anchor_date: NaiveDate,
    pub label: Label,
    pub split: Split,
}

/// 64-bit avalanche (the murmur3 finalizer). Raw fnv output is biased on
/// short sequential ids and a xored-in seed only touches low bits, which
/// the f64 conversion would round away; this spreads both across the word.
fn mix64(mut x: u64) -> u64 {
    x ^= x >> 33;
    x = x.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    x ^= x >> 33;
    x = x.wrapping_mul(0xC4CE_B9FE_1A85_EC53);
    x ^= x >> 33;
    x
}

/// Deterministic, machine-independent split: hash the user id, fold in the
/// seed, threshold the normalized value.
pub fn split_user(user_id: &str, config: &CohortConfig) -> Split {
    let h = mix64(fnv1a64(user_id.as_bytes()) ^ config.split_seed);
    let unit = h as f64 / 2f64.powi(64);
    if unit < config.split_fraction_train {
        Split::Train
    } else {
        Split::Eval
    }
}

fn is_qualifying_label_conversion(e: &Event, catalog: &[AdvertiserRecord]) -> bool {
    if !e.kind.is_conversion() {
        return false;
    }
    if e.conversion_type != Some(ConversionPriority::HighPriority) {
        return false;
    }
    let Some(id) = e.advertiser_id.as_deref() else {
        return false;
    };
    catalog.iter().any(|a| a.advertiser_id == id && a.is_active())
}

/// First high-priority conversion in (anchor, anchor + window] whose
/// advertiser is active on both flags, evaluated against the anchored
/// catalog. None when nothing qualifies; the user is then dropped rather
/// than falling back to weaker conversions.
pub fn build_label(
    user_events_after_anchor: &[Event],
    catalog: &[AdvertiserRecord],
    anchor_date: NaiveDate,
    config: &CohortConfig,
) -> Option<Label> {
    let anchor_eod = end_of_day_utc(anchor_date);
    let window_end = anchor_eod + config.label_window_days * 86_400;
    user_events_after_anchor
        .iter()
        .filter(|e| e.timestamp > anchor_eod && e.timestamp <= window_end)
        .filter(|e| is_qualifying_label_conversion(e, catalog))
        .min_by(|a, b| {
            a.timestamp
                .cmp(&b.timestamp)
                .then_with(|| a.advertiser_id.cmp(&b.advertiser_id))
        })
        .map(|e| {
            let id = e.advertiser_id.clone().expect("qualifying conversion has advertiser");
            let name = catalog
                .iter()
                .find(|a| a.advertiser_id == id)
                .map(|a| a.name.clone())
                .unwrap_or_else(|| id.clone());
            Label {
                user_id: e.user_id.clone(),
                advertiser_id: id,
                advertiser_name: name,
                conversion_timestamp: e.timestamp,
            }
        })
}

/// Applies the cohort predicates and returns the eligible user ids,
/// sorted. Event order never matters; only membership does.
pub fn select_users(
    snapshot: &Snapshot,
    future_events: &[Event],
    config: &CohortConfig,
) -> Vec<String> {
    let anchor_eod = end_of_day_utc(snapshot.anchor_date);
    let lookback_start = anchor_eod - config.conversion_lookback_days * 86_400;
    let mut selected: Vec<String> = snapshot
        .profiles
        .iter()
        .filter(|p| {
            config.market_filter.is_empty() || p.user_state == config.market_filter
        })
        .filter(|p| {
            let events: Vec<&Event> =
                snapshot.events.iter().filter(|e| e.user_id == p.user_id).collect();
            let recent_conversion = events.iter().any(|e| {
                e.kind.is_conversion()
                    && e.timestamp >= lookback_start
                    && e.timestamp <= anchor_eod
            });
            if !recent_conversion {
                return false;
            }
            let matched = events
                .iter()
                .filter(|e| e.kind == crate::domain::EventKind::MatchedConversion)
                .count();
            let attributed = events
                .iter()
                .filter(|e| e.kind == crate::domain::EventKind::AttributedConversion)
                .count();
            if matched < config.min_sequence_length
                || attributed < config.min_sequence_length
            {
                return false;
            }
            let future: Vec<Event> = future_events
                .iter()
                .filter(|e| e.user_id == p.user_id && e.timestamp > anchor_eod)
                .cloned()
                .collect();
            build_label(&future, &snapshot.catalog, snapshot.anchor_date, config).is_some()
        })
        .map(|p| p.user_id.clone())
        .collect();
    selected.sort();
    selected
}

/// Full cohort materialization: selection, label, and split per user.
pub fn build_cohort(
    snapshot: &Snapshot,
    future_events: &[Event],
    config: &CohortConfig,
) -> Vec<CohortExample> {
    let anchor_eod = end_of_day_utc(snapshot.anchor_date);
    select_users(snapshot, future_events, config)
        .into_iter()
        .map(|user_id| {
            let future: Vec<Event> = future_events
                .iter()
                .filter(|e| e.user_id == user_id && e.timestamp > anchor_eod)
                .cloned()
                .collect();
            let label = build_label(&future, &snapshot.catalog, snapshot.anchor_date, config)
                .expect("selected users have labels");
            CohortExample {
                split: split_user(&user_id, config),
                user_id,
                anchor_date: snapshot.anchor_date,
                label,
            }
        })
        .collect()
}
