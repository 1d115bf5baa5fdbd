//! Byte-level golden tests for the rendered prompt templates.
//!
//! The fixture context is hand-written and frozen so template edits show
//! up as golden diffs, not as incidental churn from generator changes.
//! Regenerate after an intentional template change with:
//!
//! ```text
//! cargo test -p adprior-core --test prompt_golden -- --ignored regenerate
//! ```

use std::fs;
use std::path::PathBuf;

use adprior_core::compiler::UserContext;
use adprior_core::domain::UserProfile;
use adprior_core::prompting::{render_prompt, PromptStage};

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn stage_file(stage: PromptStage) -> &'static str {
    match stage {
        PromptStage::SftText => "sft_text.txt",
        PromptStage::SftSid => "sft_sid.txt",
        PromptStage::GrpoText => "grpo_text.txt",
        PromptStage::GrpoSid => "grpo_sid.txt",
        PromptStage::Inference => "inference.txt",
    }
}

const STAGES: [PromptStage; 5] = [
    PromptStage::SftText,
    PromptStage::SftSid,
    PromptStage::GrpoText,
    PromptStage::GrpoSid,
    PromptStage::Inference,
];

fn fixture_context() -> UserContext {
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    UserContext {
        profile: UserProfile {
            user_id: "golden_user".into(),
            age: Some(34),
            gender: Some("female".into()),
            user_state: "CA".into(),
        },
        past_conversion_advertisers: s(&["Cedar Threads", "Juniper Supply", "Cedar Threads"]),
        preset_pool: s(&[
            "Cedar Threads",
            "Juniper Supply",
            "Harbor Goods",
            "Summit Outfitters",
            "Willow & Co",
        ]),
        attributed_conversions: s(&["Harbor Goods", "Cedar Threads"]),
        matched_conversions: s(&["Juniper Supply"]),
        onsite_searches: s(&["hiking boots waterproof", "camp stove fuel"]),
        offsite_searches: s(&["best trail running shoes 2024"]),
        offsite_urls: s(&[
            "https://www.cedarthreads.com/p/flannel-shirt",
            "https://www.harborgoods.com/p/cast-iron-skillet",
        ]),
        top_categories: s(&["outdoor gear", "apparel", "home & kitchen"]),
        top_brands: s(&["Cedar Threads", "Harbor Goods"]),
        sid_sequences: Some(s(&[
            "<sid_l0_3><sid_l1_17><sid_l2_240>",
            "<sid_l0_9><sid_l1_2><sid_l2_11>",
        ])),
    }
}

#[test]
fn rendered_prompts_match_committed_goldens() {
    let context = fixture_context();
    for stage in STAGES {
        let rendered = render_prompt(&context, stage, &context.preset_pool).unwrap();
        let path = golden_dir().join(stage_file(stage));
        let golden = fs::read_to_string(&path)
            .unwrap_or_else(|e| panic!("golden {} unreadable: {e}", path.display()));
        assert_eq!(
            rendered.text,
            golden,
            "stage {stage:?} drifted from {}; regenerate if the change is intentional",
            path.display()
        );
    }
}

/// SFT asks for the single next advertiser and no XML block; GRPO asks
/// for the full ranked list and the XML-only output rule. The quantity
/// and format lines are load-bearing for the parser downstream.
#[test]
fn text_stages_carry_the_instruction_anchor_lines() {
    let context = fixture_context();
    let sft = render_prompt(&context, PromptStage::SftText, &context.preset_pool).unwrap();
    assert!(sft.text.contains("Provide 1 advertiser."));
    assert!(!sft.text.contains("Return ONLY the following XML."));

    let grpo = render_prompt(&context, PromptStage::GrpoText, &context.preset_pool).unwrap();
    assert!(grpo.text.contains("Return ONLY the following XML."));
    assert!(grpo
        .text
        .contains("Provide up to 5 unique user interests and exactly 20 advertisers."));
}

/// Writes the golden files from the current templates. Run explicitly
/// after intentional template changes; never in CI.
#[test]
#[ignore]
fn regenerate() {
    let context = fixture_context();
    fs::create_dir_all(golden_dir()).unwrap();
    for stage in STAGES {
        let rendered = render_prompt(&context, stage, &context.preset_pool).unwrap();
        fs::write(golden_dir().join(stage_file(stage)), rendered.text).unwrap();
    }
}
