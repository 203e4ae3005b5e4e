use loca_core::agents::{
    render_augmentation_prompt, render_generic_refine_prompt, render_holistic_review_prompt, render_review_prompt,
    render_summarization_prompt, templates, ReviewKind,
};
use sha2::{Digest, Sha256};

fn digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[test]
fn templates_are_pinned() {
    let pinned = [
        (templates::AUGMENTATION, "a67a6cc8f990be5432a3cf749064c11f3ee6e2aa246b70c0c399ff246e47741b"),
        (templates::REVIEWER, "23ad69900ba49b871fcd682332329a691e1743cf6d8a173edaf2548e4738a9a2"),
        (templates::ASSUMPTION_INSTRUCTION, "dce40c0a89775b3293817227708deccfaef9167106d6846d3d91ab301b72ff12"),
        (templates::DERIVATION_INSTRUCTION, "4374e7aa4c039386bff6f3ab2bb16347f3a7bfe23df20ea7ed1514cd72df7b69"),
        (templates::SUMMARIZATION, "ad0fa568ef1606aeaa398b94ebc717dcb1f90b7bd3c6e4875fd587e52edf2f9d"),
        (templates::ISSUES_REPORT, "547febcff228f7d1486bd3fb9aff02b1478c20a67138826dd734e47de0f777d3"),
        (templates::GENERIC_REFINE, "0bd33b53ef908f87b379c369af8ddf8a7ce8f6716943cf6c99fdf631afd2594b"),
        (templates::HOLISTIC_REVIEWER, "fec2fa556961a298e6adafa3dcbd253f1cd0d77d95aec39ca4f87f941c6a6867"),
    ];
    for (i, (text, sha)) in pinned.iter().enumerate() {
        assert_eq!(digest(text), *sha, "template {i} changed");
    }
}

#[test]
fn rendered_prompts_fill_every_slot() {
    let solution = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/apple_refined.md")).unwrap();
    let slots = [
        "{question_statement}",
        "{problem_statement}",
        "{solution}",
        "{bugs_report}",
        "{instruction}",
        "{review}",
        "{feedback}",
    ];
    let prompts = [
        render_augmentation_prompt("QUESTION", "RAW", Some("BUGS")),
        render_augmentation_prompt("QUESTION", "RAW", None),
        render_review_prompt("QUESTION", &solution, ReviewKind::Assumption).unwrap(),
        render_review_prompt("QUESTION", &solution, ReviewKind::Derivation).unwrap(),
        render_holistic_review_prompt("QUESTION", "RAW"),
        render_generic_refine_prompt("QUESTION", "RAW", "FEEDBACK"),
        render_summarization_prompt("REVIEW"),
    ];
    for prompt in &prompts {
        for slot in slots {
            assert!(!prompt.contains(slot), "{slot} left in prompt");
        }
    }
    assert!(prompts[0].contains("BUGS") && prompts[0].contains("QUESTION"));
    assert!(prompts[0].contains("F_{\\text{net}}"), "literal braces survive substitution");
    assert!(prompts[5].contains("FEEDBACK"));
}
