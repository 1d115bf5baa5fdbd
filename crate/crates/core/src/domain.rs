//! Shared vocabulary types used across the pipeline.
//!
//! Everything here is an immutable value type. Validation never aborts;
//! `validate_event` reports every violated invariant so callers can decide
//! whether to drop, repair, or fail on a record.

use serde::{Deserialize, Serialize};

/// One timestamped user action. The atomic input record of the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub user_id: String,
    /// UTC seconds.
    pub timestamp: i64,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advertiser_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brand: Option<String>,
    /// Clicks only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dwell_seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conversion_type: Option<ConversionPriority>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    OnsiteSearch,
    OffsiteSearch,
    OffsiteUrl,
    AttributedConversion,
    MatchedConversion,
    Impression,
    Click,
    Conversion,
}

impl EventKind {
    /// Conversion-kind events carry an advertiser and a priority and are the
    /// only events eligible as labels.
    pub fn is_conversion(self) -> bool {
        matches!(
            self,
            EventKind::AttributedConversion | EventKind::MatchedConversion | EventKind::Conversion
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConversionPriority {
    HighPriority,
    LowPriority,
}

/// Catalog entry for one advertiser. Activity and objective flags define
/// label validity and preset-pool membership.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvertiserRecord {
    pub advertiser_id: String,
    pub name: String,
    pub active_on_platform: bool,
    pub active_spend: bool,
    pub market: String,
    pub shopping: bool,
    pub objective: Objective,
    pub daily_revenue: f64,
}

impl AdvertiserRecord {
    pub fn is_active(&self) -> bool {
        self.active_on_platform && self.active_spend
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Objective {
    Ocpm,
    Roas,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<String>,
    pub user_state: String,
}

/// The prediction target: the first qualifying conversion after the anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub user_id: String,
    pub advertiser_id: String,
    pub advertiser_name: String,
    /// UTC seconds.
    pub conversion_timestamp: i64,
}

/// Parsed predictor output: ranked advertiser names plus interests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub advertisers: Vec<String>,
    pub interests: Vec<String>,
    pub parse_status: ParseStatus,
    pub raw: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Ok,
    Malformed,
}

impl Prediction {
    pub fn is_ok(&self) -> bool {
        self.parse_status == ParseStatus::Ok
    }

    pub fn malformed(raw: impl Into<String>) -> Self {
        Prediction {
            advertisers: Vec::new(),
            interests: Vec::new(),
            parse_status: ParseStatus::Malformed,
            raw: raw.into(),
        }
    }
}

/// One violated `Event` invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NegativeTimestamp,
    MissingAdvertiserId,
    MissingConversionType,
    MissingDwellSeconds,
    NegativeDwellSeconds,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let msg = match self {
            Violation::NegativeTimestamp => "negative timestamp",
            Violation::MissingAdvertiserId => "missing advertiser_id",
            Violation::MissingConversionType => "missing conversion_type",
            Violation::MissingDwellSeconds => "missing dwell_seconds",
            Violation::NegativeDwellSeconds => "negative dwell_seconds",
        };
        f.write_str(msg)
    }
}

/// Checks every `Event` invariant and returns the full list of violations.
/// An empty list means the event is valid. Pure: never aborts, never mutates.
pub fn validate_event(e: &Event) -> Vec<Violation> {
    let mut violations = Vec::new();
    if e.timestamp < 0 {
        violations.push(Violation::NegativeTimestamp);
    }
    if e.kind.is_conversion() {
        if e.advertiser_id.is_none() {
            violations.push(Violation::MissingAdvertiserId);
        }
        if e.conversion_type.is_none() {
            violations.push(Violation::MissingConversionType);
        }
    }
    if e.kind == EventKind::Click {
        match e.dwell_seconds {
            None => violations.push(Violation::MissingDwellSeconds),
            Some(d) if d < 0.0 || !d.is_finite() => violations.push(Violation::NegativeDwellSeconds),
            Some(_) => {}
        }
    }
    violations
}
