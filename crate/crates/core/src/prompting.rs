//! Stage-specific prompt rendering under a token budget.
//!
//! Templates live in `templates/` and are embedded at compile time; the
//! renderer substitutes single-brace placeholders and never invents text.
//! The fixed text before the first placeholder is hashed so downstream
//! accounting can group prompts that share a cacheable prefix.

use serde::{Deserialize, Serialize};

use crate::compiler::UserContext;
use crate::fnv1a64;

const SFT_TEXT: &str = include_str!("../templates/sft_text.txt");
const SFT_SID: &str = include_str!("../templates/sft_sid.txt");
const GRPO_TEXT: &str = include_str!("../templates/grpo_text.txt");
const GRPO_SID: &str = include_str!("../templates/grpo_sid.txt");

/// Default budget in estimated tokens. Templates carry no explicit limit;
/// this is configurable headroom.
pub const DEFAULT_TOKEN_BUDGET: usize = 8192;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("stage requires sid_sequences but the context has none")]
    MissingSids,
    #[error("prompt estimate {estimate} exceeds budget {budget} even after trimming")]
    BudgetExceeded { estimate: usize, budget: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStage {
    SftText,
    SftSid,
    GrpoText,
    GrpoSid,
    /// Serving-time stage; reuses the matching training template.
    Inference,
}

impl std::str::FromStr for PromptStage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sft_text" => Ok(PromptStage::SftText),
            "sft_sid" => Ok(PromptStage::SftSid),
            "grpo_text" => Ok(PromptStage::GrpoText),
            "grpo_sid" => Ok(PromptStage::GrpoSid),
            "inference" => Ok(PromptStage::Inference),
            other => Err(format!("unknown prompt stage: {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub stage: PromptStage,
    pub token_estimate: usize,
    pub template_prefix_hash: u64,
}

/// ceil(chars / 4): a deterministic, tokenizer-agnostic length estimate.
pub fn estimate_tokens(text: &str) -> usize {
    (text.chars().count() + 3) / 4
}

fn template_for(stage: PromptStage, has_sids: bool) -> &'static str {
    match stage {
        PromptStage::SftText => SFT_TEXT,
        PromptStage::SftSid => SFT_SID,
        PromptStage::GrpoText => GRPO_TEXT,
        PromptStage::GrpoSid => GRPO_SID,
        PromptStage::Inference => {
            if has_sids {
                GRPO_SID
            } else {
                GRPO_TEXT
            }
        }
    }
}

fn needs_sids(stage: PromptStage) -> bool {
    matches!(stage, PromptStage::SftSid | PromptStage::GrpoSid)
}

/// Hash of the template text before its first placeholder. Equal for
/// every user rendered at the same stage, by construction.
pub fn template_prefix_hash(stage: PromptStage, has_sids: bool) -> u64 {
    let template = template_for(stage, has_sids);
    let prefix_len = template.find('{').unwrap_or(template.len());
    fnv1a64(template[..prefix_len].as_bytes())
}

/// (prefix hash, prefix token estimate) for every known template, so
/// cache accounting can cost a shared prefix from its hash alone.
pub fn prefix_registry() -> Vec<(u64, usize)> {
    [SFT_TEXT, SFT_SID, GRPO_TEXT, GRPO_SID]
        .iter()
        .map(|template| {
            let prefix = &template[..template.find('{').unwrap_or(template.len())];
            (fnv1a64(prefix.as_bytes()), estimate_tokens(prefix))
        })
        .collect()
}

fn fill(template: &str, key: &str, value: &str) -> String {
    template.replace(&format!("{{{key}}}"), value)
}

/// Fills the stage template from the context. The preset pool is passed
/// separately because it is shared across users; pass
/// `&context.preset_pool` when the context carries its own.
pub fn render_prompt(
    context: &UserContext,
    stage: PromptStage,
    preset_pool: &[String],
) -> Result<RenderedPrompt, PromptError> {
    let sids = context.sid_sequences.as_deref();
    if needs_sids(stage) && sids.is_none() {
        return Err(PromptError::MissingSids);
    }
    let template = template_for(stage, sids.is_some());

    let past: Vec<String> = context
        .past_conversion_advertisers
        .iter()
        .map(|name| format!("- {name}"))
        .collect();
    let age = context.profile.age.map_or_else(|| "unknown".to_owned(), |a| a.to_string());
    let gender = context.profile.gender.as_deref().unwrap_or("unknown");

    let mut text = template.to_owned();
    text = fill(&text, "preset_advertiser_pool", &preset_pool.join(", "));
    text = fill(&text, "active_advertisers_with_past_conversions", &past.join("\n"));
    text = fill(&text, "gender", gender);
    text = fill(&text, "age", &age);
    text = fill(&text, "userstate", &context.profile.user_state);
    text = fill(&text, "attributed_conversions", &context.attributed_conversions.join(", "));
    text = fill(&text, "matched_conversions", &context.matched_conversions.join(", "));
    text = fill(&text, "onsite_searches", &context.onsite_searches.join(", "));
    text = fill(&text, "offsite_searches", &context.offsite_searches.join(", "));
    text = fill(&text, "offsite_urls", &context.offsite_urls.join(", "));
    text = fill(&text, "top_categories", &context.top_categories.join(", "));
    text = fill(&text, "top_brands", &context.top_brands.join(", "));
    if let Some(sids) = sids {
        text = fill(&text, "sid_sequences", &sids.join(", "));
    }

    Ok(RenderedPrompt {
        token_estimate: estimate_tokens(&text),
        template_prefix_hash: template_prefix_hash(stage, context.sid_sequences.is_some()),
        text,
        stage,
    })
}

/// Trim order when a prompt runs over budget: least predictive lists go
/// first, conversion history last. Each list drains fully before the next
/// is touched; oldest entries (list tails) go first.
fn trim_one(context: &mut UserContext) -> bool {
    let drain_order: [&mut Vec<String>; 7] = [
        &mut context.top_categories,
        &mut context.top_brands,
        &mut context.onsite_searches,
        &mut context.offsite_searches,
        &mut context.offsite_urls,
        &mut context.matched_conversions,
        &mut context.attributed_conversions,
    ];
    for list in drain_order {
        if !list.is_empty() {
            list.pop();
            return true;
        }
    }
    if let Some(sids) = context.sid_sequences.as_mut() {
        if !sids.is_empty() {
            sids.pop();
            return true;
        }
    }
    if context.past_conversion_advertisers.len() > 1 {
        context.past_conversion_advertisers.pop();
        return true;
    }
    if context.preset_pool.len() > 1 {
        context.preset_pool.pop();
        return true;
    }
    false
}

/// Shrinks the context until its rendered prompt fits the budget. The
/// untrimmed context is returned unchanged when it already fits. Past
/// conversions and the preset pool are never cut below one entry; if the
/// minimal context still overflows, that is an error.
pub fn truncate_to_budget(
    context: &UserContext,
    stage: PromptStage,
    budget_tokens: usize,
) -> Result<UserContext, PromptError> {
    let mut current = context.clone();
    loop {
        let rendered = render_prompt(&current, stage, &current.preset_pool)?;
        if rendered.token_estimate <= budget_tokens {
            return Ok(current);
        }
        if !trim_one(&mut current) {
            return Err(PromptError::BudgetExceeded {
                estimate: rendered.token_estimate,
                budget: budget_tokens,
            });
        }
    }
}

/// Convenience composition: trim, then render the trimmed context.
pub fn render_within_budget(
    context: &UserContext,
    stage: PromptStage,
    budget_tokens: usize,
) -> Result<RenderedPrompt, PromptError> {
    let trimmed = truncate_to_budget(context, stage, budget_tokens)?;
    render_prompt(&trimmed, stage, &trimmed.preset_pool)
}

/// Emits a completed answer block in the parseable output shape. Lists
/// are pipe-separated inside brackets; `parse_answer` recovers them
/// exactly.
pub fn format_answer(advertisers: &[String], interests: &[String]) -> String {
    format!(
        "<answer>\n<advertiser_names>\n[{}]\n</advertiser_names>\n<interests>\n[{}]\n</interests>\n</answer>",
        advertisers.join("|"),
        interests.join("|")
    )
}
