//! Rank-match reward with list-length penalties.
//!
//! A completion earns reward for placing the ground-truth advertiser high
//! in its ranked list and pays a penalty for deviating from the target
//! list lengths (20 advertisers, 5 interests). The total decomposes as
//! `r_total = r_match - p_adv_len - p_interest_len`, always.

use serde::{Deserialize, Serialize};

use crate::domain::Prediction;
use crate::parsing::normalize_name;

/// Target advertiser-list length.
pub const N_STAR_ADV: usize = 20;
/// Target interest-list length.
pub const N_STAR_INTEREST: usize = 5;
/// Ranked positions eligible for any match reward.
pub const MAX_REWARDED_POSITION: usize = 20;
/// Positions at or above this earn the top-rank bonus.
pub const BONUS_CUTOFF: usize = 4;
/// Flat bonus for a match within the top `BONUS_CUTOFF`.
pub const BONUS: f64 = 2.0;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RewardError {
    #[error("position {0} out of range 1..={MAX_REWARDED_POSITION}")]
    PositionOutOfRange(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_match: f64,
    pub p_adv_len: f64,
    pub p_interest_len: f64,
    pub r_total: f64,
    /// 1-indexed rank of the label in the predicted list, when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub match_position: Option<usize>,
}

/// 1-indexed rank of the first predicted advertiser equal to `label_name`
/// under name normalization. None when absent or the prediction is
/// malformed.
pub fn match_position(prediction: &Prediction, label_name: &str) -> Option<usize> {
    if !prediction.is_ok() {
        return None;
    }
    let target = normalize_name(label_name);
    prediction
        .advertisers
        .iter()
        .position(|a| normalize_name(a) == target)
        .map(|idx| idx + 1)
}

/// Match reward at a 1-indexed rank: 0.1 x (20 - i), plus a 2.0 bonus for
/// i <= 4. No match earns 0.
pub fn r_match(position: Option<usize>) -> Result<f64, RewardError> {
    let Some(i) = position else {
        return Ok(0.0);
    };
    if i < 1 || i > MAX_REWARDED_POSITION {
        return Err(RewardError::PositionOutOfRange(i));
    }
    // Divide rather than multiply by 0.1 so the documented spot values
    // (3.9 at rank 1, 1.5 at rank 5) are exact as f64 literals.
    let base = (MAX_REWARDED_POSITION - i) as f64 / 10.0;
    let bonus = if i <= BONUS_CUTOFF { BONUS } else { 0.0 };
    Ok(base + bonus)
}

/// Length penalty: exact length is free; any deviation costs a flat 1.0
/// plus 0.1 per item of deviation, capped at 1.0.
pub fn p_len(n: usize, n_star: usize) -> f64 {
    debug_assert!(n_star >= 1);
    if n == n_star {
        return 0.0;
    }
    let deviation = n.abs_diff(n_star) as f64 / 10.0;
    deviation.min(1.0) + 1.0
}

/// Scores a prediction against the labeled advertiser. Malformed
/// predictions earn no match reward and pay both length penalties at
/// n = 0. A match beyond rank 20 is recorded but earns nothing.
pub fn total_reward(prediction: &Prediction, label_name: &str) -> RewardBreakdown {
    let position = match_position(prediction, label_name);
    let rewarded = position.filter(|&i| i <= MAX_REWARDED_POSITION);
    let r = r_match(rewarded).expect("filtered position is in range");
    let p_adv = p_len(prediction.advertisers.len(), N_STAR_ADV);
    let p_int = p_len(prediction.interests.len(), N_STAR_INTEREST);
    RewardBreakdown {
        r_match: r,
        p_adv_len: p_adv,
        p_interest_len: p_int,
        r_total: r - p_adv - p_int,
        match_position: position,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ParseStatus, Prediction};
    use proptest::prelude::*;

    fn ok_prediction(advertisers: Vec<String>, interests: Vec<String>) -> Prediction {
        Prediction {
            advertisers,
            interests,
            parse_status: ParseStatus::Ok,
            raw: String::new(),
        }
    }

    /// n_adv advertisers with the label at 1-indexed `position` (if any),
    /// n_int interests.
    fn fixture(position: Option<usize>, n_adv: usize, n_int: usize) -> Prediction {
        let advertisers = (0..n_adv)
            .map(|idx| match position {
                Some(p) if idx + 1 == p => "Label Co".to_owned(),
                _ => format!("Filler {idx}"),
            })
            .collect();
        let interests = (0..n_int).map(|i| format!("interest {i}")).collect();
        ok_prediction(advertisers, interests)
    }

    #[test]
    fn match_uses_normalized_first_occurrence() {
        let p = ok_prediction(
            vec!["acme ".into(), "Beta".into(), "ACME".into()],
            vec![],
        );
        assert_eq!(match_position(&p, "Acme"), Some(1));
        assert_eq!(match_position(&p, "Gamma"), None);
        assert_eq!(match_position(&Prediction::malformed("x"), "Acme"), None);
    }

    #[test]
    fn r_match_spot_values() {
        assert_eq!(r_match(Some(1)).unwrap(), 3.9);
        assert_eq!(r_match(Some(4)).unwrap(), 3.6);
        assert_eq!(r_match(Some(5)).unwrap(), 1.5);
        assert_eq!(r_match(Some(20)).unwrap(), 0.0);
        assert_eq!(r_match(None).unwrap(), 0.0);
        assert_eq!(r_match(Some(0)), Err(RewardError::PositionOutOfRange(0)));
        assert_eq!(r_match(Some(21)), Err(RewardError::PositionOutOfRange(21)));
    }

    #[test]
    fn p_len_spot_values() {
        assert_eq!(p_len(20, 20), 0.0);
        assert_eq!(p_len(18, 20), 1.2);
        assert_eq!(p_len(0, 20), 2.0);
        assert_eq!(p_len(5, 5), 0.0);
        assert_eq!(p_len(0, 5), 1.5);
    }

    #[test]
    fn p_len_is_discontinuous_at_target() {
        assert_eq!(p_len(20, 20), 0.0);
        assert_eq!(p_len(19, 20), 1.1);
        assert_eq!(p_len(21, 20), 1.1);
    }

    #[test]
    fn perfect_answer_scores_top() {
        let b = total_reward(&fixture(Some(1), 20, 5), "Label Co");
        assert_eq!(b.r_total, 3.9);
        assert_eq!(b.match_position, Some(1));
        assert_eq!(b.p_adv_len, 0.0);
        assert_eq!(b.p_interest_len, 0.0);
    }

    #[test]
    fn malformed_scores_fixed_penalty() {
        let b = total_reward(&Prediction::malformed("garbage"), "Label Co");
        assert_eq!(b.r_match, 0.0);
        assert_eq!(b.p_adv_len, 2.0);
        assert_eq!(b.p_interest_len, 1.5);
        assert_eq!(b.r_total, -3.5);
        assert_eq!(b.match_position, None);
    }

    #[test]
    fn no_match_with_exact_lengths_is_zero() {
        let b = total_reward(&fixture(None, 20, 5), "Label Co");
        assert_eq!(b.r_total, 0.0);
    }

    #[test]
    fn match_beyond_rank_20_earns_nothing_but_is_recorded() {
        let b = total_reward(&fixture(Some(25), 30, 5), "Label Co");
        assert_eq!(b.r_match, 0.0);
        assert_eq!(b.match_position, Some(25));
    }

    #[test]
    fn earlier_position_never_decreases_reward() {
        for i in 2..=20usize {
            let later = total_reward(&fixture(Some(i), 20, 5), "Label Co");
            let earlier = total_reward(&fixture(Some(i - 1), 20, 5), "Label Co");
            let delta = earlier.r_total - later.r_total;
            let expected = if i == 5 { 0.1 + BONUS } else { 0.1 };
            assert!(
                (delta - expected).abs() < 1e-12,
                "moving {i} -> {} changed reward by {delta}",
                i - 1
            );
        }
    }

    #[test]
    fn breakdown_identity_and_bounds_over_exhaustive_sweep() {
        let mut max_seen = f64::NEG_INFINITY;
        let mut min_seen = f64::INFINITY;
        for n_adv in 0..=40usize {
            for n_int in 0..=10usize {
                let mut positions: Vec<Option<usize>> =
                    (1..=n_adv.min(20)).map(Some).collect();
                positions.push(None);
                for pos in positions {
                    let b = total_reward(&fixture(pos, n_adv, n_int), "Label Co");
                    assert_eq!(b.r_total, b.r_match - b.p_adv_len - b.p_interest_len);
                    assert!(b.r_total >= -4.0 && b.r_total <= 3.9, "out of bounds: {b:?}");
                    max_seen = max_seen.max(b.r_total);
                    min_seen = min_seen.min(b.r_total);
                }
            }
        }
        assert_eq!(max_seen, 3.9);
        assert_eq!(min_seen, -3.5);
    }

    #[test]
    fn global_lower_bound_is_attained() {
        let b = total_reward(&fixture(None, 40, 15), "Label Co");
        assert_eq!(b.r_total, -4.0);
    }

    proptest! {
        #[test]
        fn p_len_range_is_zero_or_band(n in 0usize..200, n_star in 1usize..50) {
            let p = p_len(n, n_star);
            if n == n_star {
                prop_assert_eq!(p, 0.0);
            } else {
                prop_assert!((1.1..=2.0).contains(&p), "p_len({}, {}) = {}", n, n_star, p);
            }
        }
    }
}
