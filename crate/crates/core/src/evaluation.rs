//! Offline evaluation: recall against realized conversions, ranking
//! feature emission for the production-model probe, AUC / PR-AUC, a small
//! logistic probe, and feature-group ablations.
//!
//! Everything here is deterministic. AUC uses the rank formulation with
//! average ranks on ties; PR-AUC is average precision over a stable
//! descending sort, so equal scores keep their input order.

use std::collections::HashSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::compiler::UserContext;
use crate::domain::{Label, Prediction};
use crate::parsing::{normalize_name, parse_answer};
use crate::predictor::{predict, PredictError, PredictorSpec};
use crate::prompting::{render_prompt, PromptStage};
use crate::reward::match_position;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("empty evaluation set")]
    EmptyEvalSet,
    #[error("need both positive and negative labels")]
    SingleClass,
    #[error("no positive labels")]
    NoPositives,
    #[error("unknown feature group: {0}")]
    UnknownGroup(String),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error("prompt rendering failed: {0}")]
    Prompt(#[from] crate::prompting::PromptError),
}

/// Fraction of examples whose realized advertiser appears in the first k
/// predictions. Malformed predictions count as misses, never as errors.
pub fn recall_at_k(examples: &[(Prediction, Label)], k: usize) -> Result<f64, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::EmptyEvalSet);
    }
    let hits = examples
        .iter()
        .filter(|(pred, label)| {
            match_position(pred, &label.advertiser_name).is_some_and(|pos| pos <= k)
        })
        .count();
    Ok(hits as f64 / examples.len() as f64)
}

/// Feature vector for one (user, candidate advertiser) pair, in this
/// order: membership in the top 20, membership in the top 5, reciprocal
/// rank (0 when absent), interest/category overlap count, and whether the
/// user already converted with the candidate.
pub fn emit_ranking_features(
    prediction: &Prediction,
    candidate_name: &str,
    context: &UserContext,
) -> Vec<f64> {
    let pos = match_position(prediction, candidate_name);
    let in_top20 = pos.is_some_and(|p| p <= 20);
    let in_top5 = pos.is_some_and(|p| p <= 5);
    let reciprocal = pos.map_or(0.0, |p| 1.0 / p as f64);
    let categories: HashSet<String> =
        context.top_categories.iter().map(|c| normalize_name(c)).collect();
    let overlap = prediction
        .interests
        .iter()
        .map(|i| normalize_name(i))
        .collect::<HashSet<_>>()
        .intersection(&categories)
        .count();
    let candidate = normalize_name(candidate_name);
    let past = context
        .past_conversion_advertisers
        .iter()
        .any(|a| normalize_name(a) == candidate);
    vec![
        in_top20 as u8 as f64,
        in_top5 as u8 as f64,
        reciprocal,
        overlap as f64,
        past as u8 as f64,
    ]
}

/// Rank-based AUC (Mann-Whitney), ties resolved by average rank.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j averaged over the tie block.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Average precision over a descending stable sort of the scores.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|l| **l).count();
    if n_pos == 0 {
        return Err(EvalError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut seen_pos = 0;
    let mut ap = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if labels[idx] {
            seen_pos += 1;
            ap += seen_pos as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(ap / n_pos as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    pub auc_with: f64,
    pub pr_auc_with: f64,
    pub auc_without: f64,
    pub pr_auc_without: f64,
    pub delta_auc: f64,
    pub delta_pr_auc: f64,
    /// Learned weights, bias last.
    pub weights: Vec<f64>,
}

fn logistic_fit(features: &[Vec<f64>], labels: &[bool], epochs: usize, lr: f64) -> Vec<f64> {
    let dim = features.first().map_or(0, Vec::len);
    let mut w = vec![0.0f64; dim + 1];
    for _ in 0..epochs {
        let mut grad = vec![0.0f64; dim + 1];
        for (x, &y) in features.iter().zip(labels) {
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + w[dim];
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - (y as u8 as f64);
            for d in 0..dim {
                grad[d] += err * x[d];
            }
            grad[dim] += err;
        }
        let n = features.len() as f64;
        for d in 0..=dim {
            w[d] -= lr * grad[d] / n;
        }
    }
    w
}

fn logistic_score(w: &[f64], x: &[f64]) -> f64 {
    x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + w[w.len() - 1]
}

/// Trains a logistic probe on a seeded 70/30 split and reports held-out
/// AUC / PR-AUC both with the supplied features and for a featureless
/// (intercept-only) control, so the deltas isolate what the features add.
pub fn train_logistic_probe(
    features: &[Vec<f64>],
    labels: &[bool],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<ProbeReport, EvalError> {
    assert_eq!(features.len(), labels.len());
    if features.is_empty() {
        return Err(EvalError::EmptyEvalSet);
    }
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let cut = (order.len() * 7) / 10;
    let (train_idx, eval_idx) = order.split_at(cut.max(1).min(order.len() - 1));

    let gather = |idxs: &[usize]| -> (Vec<Vec<f64>>, Vec<bool>) {
        (
            idxs.iter().map(|&i| features[i].clone()).collect(),
            idxs.iter().map(|&i| labels[i]).collect(),
        )
    };
    let (train_x, train_y) = gather(train_idx);
    let (eval_x, eval_y) = gather(eval_idx);
    if !eval_y.contains(&true) || !eval_y.contains(&false) {
        return Err(EvalError::SingleClass);
    }

    let w = logistic_fit(&train_x, &train_y, epochs, lr);
    let scores: Vec<f64> = eval_x.iter().map(|x| logistic_score(&w, x)).collect();
    let flat: Vec<f64> = vec![0.0; eval_x.len()];

    Ok(ProbeReport {
        auc_with: auc(&scores, &eval_y)?,
        pr_auc_with: pr_auc(&scores, &eval_y)?,
        auc_without: auc(&flat, &eval_y)?,
        pr_auc_without: pr_auc(&flat, &eval_y)?,
        delta_auc: 0.0,
        delta_pr_auc: 0.0,
        weights: w,
    }
    .with_deltas())
}

impl ProbeReport {
    fn with_deltas(mut self) -> Self {
        self.delta_auc = self.auc_with - self.auc_without;
        self.delta_pr_auc = self.pr_auc_with - self.pr_auc_without;
        self
    }
}

/// Context sections that can be knocked out independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureGroup {
    PastConversionAdvertisers,
    AttributedConversions,
    MatchedConversions,
    OnsiteSearches,
    OffsiteSearches,
    OffsiteUrls,
    TopCategories,
    TopBrands,
    UserProfile,
}

impl FeatureGroup {
    pub const ALL: [FeatureGroup; 9] = [
        FeatureGroup::PastConversionAdvertisers,
        FeatureGroup::AttributedConversions,
        FeatureGroup::MatchedConversions,
        FeatureGroup::OnsiteSearches,
        FeatureGroup::OffsiteSearches,
        FeatureGroup::OffsiteUrls,
        FeatureGroup::TopCategories,
        FeatureGroup::TopBrands,
        FeatureGroup::UserProfile,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureGroup::PastConversionAdvertisers => "past_conversion_advertisers",
            FeatureGroup::AttributedConversions => "attributed_conversions",
            FeatureGroup::MatchedConversions => "matched_conversions",
            FeatureGroup::OnsiteSearches => "onsite_searches",
            FeatureGroup::OffsiteSearches => "offsite_searches",
            FeatureGroup::OffsiteUrls => "offsite_urls",
            FeatureGroup::TopCategories => "top_categories",
            FeatureGroup::TopBrands => "top_brands",
            FeatureGroup::UserProfile => "user_profile",
        }
    }
}

impl std::str::FromStr for FeatureGroup {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FeatureGroup::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| EvalError::UnknownGroup(s.to_owned()))
    }
}

/// Returns the context with one group emptied. This operates on the
/// compiled representation (what the prompt renders), so derived lists
/// like top categories survive removal of their source searches.
pub fn remove_group(context: &UserContext, group: FeatureGroup) -> UserContext {
    let mut out = context.clone();
    match group {
        FeatureGroup::PastConversionAdvertisers => out.past_conversion_advertisers.clear(),
        FeatureGroup::AttributedConversions => out.attributed_conversions.clear(),
        FeatureGroup::MatchedConversions => out.matched_conversions.clear(),
        FeatureGroup::OnsiteSearches => out.onsite_searches.clear(),
        FeatureGroup::OffsiteSearches => out.offsite_searches.clear(),
        FeatureGroup::OffsiteUrls => out.offsite_urls.clear(),
        FeatureGroup::TopCategories => out.top_categories.clear(),
        FeatureGroup::TopBrands => out.top_brands.clear(),
        FeatureGroup::UserProfile => {
            out.profile.age = None;
            out.profile.gender = None;
            out.profile.user_state = String::new();
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub group: String,
    pub recall: f64,
    pub delta_recall: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub k: usize,
    pub baseline_recall: f64,
    pub rows: Vec<AblationRow>,
    /// Groups ordered by impact, largest |delta| first. This is the
    /// reorder recommendation; it changes prompt section order only for
    /// predictors that actually read the rendered prompt, so recall is
    /// reported per removal rather than per permutation.
    pub impact_order: Vec<String>,
}

fn recall_for_contexts(
    examples: &[(UserContext, Label)],
    spec: &PredictorSpec,
    k: usize,
) -> Result<f64, EvalError> {
    let mut scored = Vec::with_capacity(examples.len());
    for (context, label) in examples {
        let prompt = render_prompt(context, PromptStage::Inference, &context.preset_pool)?;
        let completion = predict(spec, &prompt, context)?;
        scored.push((parse_answer(&completion), label.clone()));
    }
    recall_at_k(&scored, k)
}

/// Drops each group in turn, re-runs the predictor, and reports the
/// recall delta against the untouched contexts.
pub fn ablate(
    examples: &[(UserContext, Label)],
    spec: &PredictorSpec,
    groups: &[FeatureGroup],
    k: usize,
) -> Result<AblationReport, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::EmptyEvalSet);
    }
    let baseline_recall = recall_for_contexts(examples, spec, k)?;
    let mut rows = Vec::with_capacity(groups.len());
    for &group in groups {
        let ablated: Vec<(UserContext, Label)> = examples
            .iter()
            .map(|(c, l)| (remove_group(c, group), l.clone()))
            .collect();
        let recall = recall_for_contexts(&ablated, spec, k)?;
        rows.push(AblationRow {
            group: group.name().to_owned(),
            recall,
            delta_recall: recall - baseline_recall,
        });
    }
    let mut impact: Vec<&AblationRow> = rows.iter().collect();
    impact.sort_by(|a, b| {
        b.delta_recall
            .abs()
            .total_cmp(&a.delta_recall.abs())
            .then_with(|| a.group.cmp(&b.group))
    });
    let impact_order = impact.into_iter().map(|r| r.group.clone()).collect();
    Ok(AblationReport { k, baseline_recall, rows, impact_order })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequenceMode {
    Reorder,
    Delete,
    ReorderDelete,
}

impl std::str::FromStr for SequenceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reorder" => Ok(SequenceMode::Reorder),
            "delete" => Ok(SequenceMode::Delete),
            "reorder+delete" | "reorder_delete" => Ok(SequenceMode::ReorderDelete),
            other => Err(format!("unknown sequence mode: {other}")),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SequenceExperiment {
    pub mode: String,
    pub ordering: Vec<String>,
    pub deleted: Vec<String>,
    pub baseline_recall: f64,
    pub recall_after: f64,
}

/// Sequence-level follow-up to an ablation: reorder ranks groups by
/// measured impact, delete drops the groups whose removal did not hurt.
pub fn sequence_experiment(
    examples: &[(UserContext, Label)],
    spec: &PredictorSpec,
    groups: &[FeatureGroup],
    k: usize,
    mode: SequenceMode,
) -> Result<SequenceExperiment, EvalError> {
    let report = ablate(examples, spec, groups, k)?;
    let delete = mode != SequenceMode::Reorder;
    let deleted: Vec<FeatureGroup> = if delete {
        groups
            .iter()
            .copied()
            .filter(|g| {
                report
                    .rows
                    .iter()
                    .any(|r| r.group == g.name() && r.delta_recall >= 0.0)
            })
            .collect()
    } else {
        Vec::new()
    };
    let recall_after = if deleted.is_empty() {
        report.baseline_recall
    } else {
        let stripped: Vec<(UserContext, Label)> = examples
            .iter()
            .map(|(c, l)| {
                let mut ctx = c.clone();
                for &g in &deleted {
                    ctx = remove_group(&ctx, g);
                }
                (ctx, l.clone())
            })
            .collect();
        recall_for_contexts(&stripped, spec, k)?
    };
    Ok(SequenceExperiment {
        mode: match mode {
            SequenceMode::Reorder => "reorder",
            SequenceMode::Delete => "delete",
            SequenceMode::ReorderDelete => "reorder+delete",
        }
        .to_owned(),
        ordering: if mode == SequenceMode::Delete {
            groups.iter().map(|g| g.name().to_owned()).collect()
        } else {
            report.impact_order.clone()
        },
        deleted: deleted.iter().map(|g| g.name().to_owned()).collect(),
        baseline_recall: report.baseline_recall,
        recall_after,
    })
}
