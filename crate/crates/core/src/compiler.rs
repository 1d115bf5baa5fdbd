//! Compiles a snapshot into the structured per-user context that fills
//! prompt templates.
//!
//! Every sequence is windowed relative to the snapshot anchor, ordered
//! most-recent-first, and capped. Derived lists (top categories, top
//! brands) use recency-weighted frequency so a burst of old activity never
//! outranks current interest.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use url::Url;

use crate::domain::{AdvertiserRecord, Event, EventKind, Objective, UserProfile};
use crate::ingestion::{end_of_day_utc, Snapshot};

#[derive(Debug, thiserror::Error)]
pub enum CompileError {
    #[error("unknown user: {0}")]
    UnknownUser(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompileConfig {
    pub onsite_search_window_days: i64,
    pub offsite_url_window_days: i64,
    pub max_items_per_sequence: usize,
    pub top_k_categories: usize,
    pub top_k_brands: usize,
    pub preset_pool_size: usize,
    pub half_life_days: f64,
    pub include_sids: bool,
    pub sid_window_items: usize,
}

impl Default for CompileConfig {
    fn default() -> Self {
        CompileConfig {
            onsite_search_window_days: 90,
            offsite_url_window_days: 14,
            max_items_per_sequence: 30,
            top_k_categories: 10,
            top_k_brands: 10,
            preset_pool_size: 20,
            half_life_days: 30.0,
            include_sids: false,
            sid_window_items: 20,
        }
    }
}

/// Structured user representation, ready for template rendering. All
/// sequences are most-recent-first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserContext {
    pub profile: UserProfile,
    /// Advertiser names from past conversions, active advertisers only.
    /// One entry per conversion event, so frequency survives.
    pub past_conversion_advertisers: Vec<String>,
    pub preset_pool: Vec<String>,
    pub attributed_conversions: Vec<String>,
    pub matched_conversions: Vec<String>,
    pub onsite_searches: Vec<String>,
    pub offsite_searches: Vec<String>,
    pub offsite_urls: Vec<String>,
    pub top_categories: Vec<String>,
    pub top_brands: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sid_sequences: Option<Vec<String>>,
}

/// (timestamp, text) pairs sorted most-recent-first with lexicographic
/// tie-break, so output is invariant under input permutation.
fn order_recent_first(mut items: Vec<(i64, String)>) -> Vec<(i64, String)> {
    items.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    items
}

/// Collapses adjacent duplicate texts, keeping the most recent instance.
fn collapse_consecutive(items: Vec<(i64, String)>) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(items.len());
    for (_, text) in items {
        if out.last().map(String::as_str) != Some(text.as_str()) {
            out.push(text);
        }
    }
    out
}

fn windowed<'a>(
    events: &'a [&'a Event],
    kind: EventKind,
    cutoff: i64,
    min_ts: Option<i64>,
) -> Vec<&'a Event> {
    events
        .iter()
        .copied()
        .filter(|e| e.kind == kind && e.timestamp <= cutoff)
        .filter(|e| min_ts.map_or(true, |m| e.timestamp >= m))
        .collect()
}

fn texts(events: &[&Event], field: fn(&Event) -> Option<&str>) -> Vec<(i64, String)> {
    events
        .iter()
        .filter_map(|e| field(e).map(|t| (e.timestamp, t.to_owned())))
        .collect()
}

fn age_days(anchor_eod: i64, ts: i64) -> f64 {
    (anchor_eod - ts) as f64 / 86_400.0
}

/// Recency-weighted frequency ranking: each occurrence contributes
/// exp(-age_days / half_life). Ties break lexicographically; at most k.
fn rank_weighted(signals: Vec<(String, f64)>, k: usize) -> Vec<(String, f64)> {
    let mut weights: HashMap<String, f64> = HashMap::new();
    for (key, w) in signals {
        *weights.entry(key).or_insert(0.0) += w;
    }
    let mut ranked: Vec<(String, f64)> = weights.into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(k);
    ranked
}

/// Ranks categories from conversion and search events by recency-weighted
/// frequency.
pub fn derive_top_categories(
    events: &[&Event],
    k: usize,
    anchor_eod: i64,
    half_life_days: f64,
) -> Vec<(String, f64)> {
    let signals = events
        .iter()
        .filter(|e| {
            matches!(
                e.kind,
                EventKind::AttributedConversion
                    | EventKind::MatchedConversion
                    | EventKind::OnsiteSearch
                    | EventKind::OffsiteSearch
            )
        })
        .filter_map(|e| {
            e.category
                .as_deref()
                .map(|c| (c.to_owned(), (-age_days(anchor_eod, e.timestamp) / half_life_days).exp()))
        })
        .collect();
    rank_weighted(signals, k)
}

/// Ranks brands from explicit brand fields plus brands extracted from
/// offsite URL hostnames. One event can contribute through both channels.
pub fn derive_top_brands(
    events: &[&Event],
    k: usize,
    anchor_eod: i64,
    half_life_days: f64,
) -> Vec<(String, f64)> {
    let mut signals = Vec::new();
    for e in events {
        let w = (-age_days(anchor_eod, e.timestamp) / half_life_days).exp();
        if let Some(brand) = e.brand.as_deref() {
            signals.push((brand.to_lowercase(), w));
        }
        if e.kind == EventKind::OffsiteUrl {
            if let Some(brand) = e.url.as_deref().and_then(extract_brand) {
                signals.push((brand, w));
            }
        }
    }
    rank_weighted(signals, k)
}

/// Two-level public suffixes the registrable-domain heuristic knows about.
/// Anything else is treated as a one-label suffix.
const TWO_LEVEL_SUFFIXES: &[(&str, &str)] = &[
    ("co", "uk"),
    ("org", "uk"),
    ("gov", "uk"),
    ("ac", "uk"),
    ("com", "au"),
    ("net", "au"),
    ("org", "au"),
    ("co", "jp"),
    ("co", "nz"),
    ("co", "in"),
    ("co", "kr"),
    ("com", "br"),
    ("com", "mx"),
    ("com", "cn"),
];

/// The registrable-domain label of a URL's hostname, lowercased:
/// "https://shop.acme.com/x" -> "acme". Subdomains (www, shop, ...) fall
/// away by construction. None for unparseable URLs or IP hosts.
pub fn extract_brand(url: &str) -> Option<String> {
    let parsed = Url::parse(url).ok()?;
    let host = parsed.host_str()?.to_lowercase();
    if host.parse::<std::net::IpAddr>().is_ok() {
        return None;
    }
    let labels: Vec<&str> = host.trim_matches('.').split('.').collect();
    match labels.as_slice() {
        [] | [""] => None,
        [single] => Some((*single).to_owned()),
        [.., a, b, c] if TWO_LEVEL_SUFFIXES.contains(&(*b, *c)) => Some((*a).to_owned()),
        [.., a, _] => Some((*a).to_owned()),
    }
}

/// Top-revenue US shopping advertisers with a conversion objective, active
/// flags on, revenue-descending with name tie-break, truncated to `size`.
pub fn build_preset_pool(catalog: &[AdvertiserRecord], size: usize) -> Vec<String> {
    let mut pool: Vec<&AdvertiserRecord> = catalog
        .iter()
        .filter(|a| {
            a.market == "US"
                && a.shopping
                && matches!(a.objective, Objective::Ocpm | Objective::Roas)
                && a.is_active()
        })
        .collect();
    pool.sort_by(|a, b| {
        b.daily_revenue
            .total_cmp(&a.daily_revenue)
            .then_with(|| a.name.cmp(&b.name))
    });
    pool.truncate(size);
    pool.iter().map(|a| a.name.clone()).collect()
}

/// Compiles one user's snapshot slice into a UserContext. Deterministic
/// and permutation-invariant; never reads past the anchor even if the
/// snapshot was built sloppily.
pub fn compile_context(
    snapshot: &Snapshot,
    user_id: &str,
    config: &CompileConfig,
) -> Result<UserContext, CompileError> {
    let profile = snapshot
        .profiles
        .iter()
        .find(|p| p.user_id == user_id)
        .cloned()
        .ok_or_else(|| CompileError::UnknownUser(user_id.to_owned()))?;

    let anchor_eod = end_of_day_utc(snapshot.anchor_date);
    let user_events: Vec<&Event> = snapshot
        .events
        .iter()
        .filter(|e| e.user_id == user_id && e.timestamp <= anchor_eod)
        .collect();

    let names: HashMap<&str, &str> = snapshot
        .catalog
        .iter()
        .map(|a| (a.advertiser_id.as_str(), a.name.as_str()))
        .collect();
    let advertiser_name = |e: &Event| -> Option<String> {
        let id = e.advertiser_id.as_deref()?;
        Some(names.get(id).copied().unwrap_or(id).to_owned())
    };

    let search_min = anchor_eod - config.onsite_search_window_days * 86_400;
    let url_min = anchor_eod - config.offsite_url_window_days * 86_400;

    let onsite = windowed(&user_events, EventKind::OnsiteSearch, anchor_eod, Some(search_min));
    let offsite = windowed(&user_events, EventKind::OffsiteSearch, anchor_eod, Some(search_min));
    let urls = windowed(&user_events, EventKind::OffsiteUrl, anchor_eod, Some(url_min));
    let attributed = windowed(&user_events, EventKind::AttributedConversion, anchor_eod, None);
    let matched = windowed(&user_events, EventKind::MatchedConversion, anchor_eod, None);

    let cap = config.max_items_per_sequence;
    let capped = |items: Vec<(i64, String)>| -> Vec<String> {
        let mut out = collapse_consecutive(order_recent_first(items));
        out.truncate(cap);
        out
    };
    let capped_with_dups = |items: Vec<(i64, String)>| -> Vec<String> {
        let mut out: Vec<String> = order_recent_first(items).into_iter().map(|(_, t)| t).collect();
        out.truncate(cap);
        out
    };

    let onsite_searches = capped(texts(&onsite, |e| e.query.as_deref()));
    let offsite_searches = capped(texts(&offsite, |e| e.query.as_deref()));
    let offsite_urls = capped(texts(&urls, |e| e.url.as_deref()));
    let attributed_conversions = capped_with_dups(
        attributed
            .iter()
            .filter_map(|e| advertiser_name(e).map(|n| (e.timestamp, n)))
            .collect(),
    );
    let matched_conversions = capped_with_dups(
        matched
            .iter()
            .filter_map(|e| advertiser_name(e).map(|n| (e.timestamp, n)))
            .collect(),
    );

    let active: HashMap<&str, bool> = snapshot
        .catalog
        .iter()
        .map(|a| (a.advertiser_id.as_str(), a.is_active()))
        .collect();
    let past_conversion_advertisers = capped_with_dups(
        user_events
            .iter()
            .filter(|e| e.kind.is_conversion())
            .filter(|e| {
                e.advertiser_id
                    .as_deref()
                    .is_some_and(|id| active.get(id).copied().unwrap_or(false))
            })
            .filter_map(|e| advertiser_name(e).map(|n| (e.timestamp, n)))
            .collect(),
    );

    let mut in_scope: Vec<&Event> = Vec::new();
    in_scope.extend(&onsite);
    in_scope.extend(&offsite);
    in_scope.extend(&urls);
    in_scope.extend(user_events.iter().copied().filter(|e| e.kind.is_conversion()));

    let top_categories =
        derive_top_categories(&in_scope, config.top_k_categories, anchor_eod, config.half_life_days)
            .into_iter()
            .map(|(c, _)| c)
            .collect();
    let top_brands =
        derive_top_brands(&in_scope, config.top_k_brands, anchor_eod, config.half_life_days)
            .into_iter()
            .map(|(b, _)| b)
            .collect();

    Ok(UserContext {
        profile,
        past_conversion_advertisers,
        preset_pool: build_preset_pool(&snapshot.catalog, config.preset_pool_size),
        attributed_conversions,
        matched_conversions,
        onsite_searches,
        offsite_searches,
        offsite_urls,
        top_categories,
        top_brands,
        sid_sequences: None,
    })
}
