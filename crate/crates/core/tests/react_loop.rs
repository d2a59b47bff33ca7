mod support;

use ops_core::react::{
    estimate_tokens, is_well_formed, parse_generation, parse_step, render_transcript,
    SessionLimits, StepEvent,
};
use proptest::prelude::*;
use support::drivers::compaction_run;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn parse_step_is_total(bytes in proptest::collection::vec(any::<u8>(), 0..400)) {
        let _ = parse_step(&String::from_utf8_lossy(&bytes));
    }

    #[test]
    fn parse_step_is_total_on_protocol_like_text(
        parts in proptest::collection::vec(
            prop_oneof![
                Just("Thought:".to_string()), Just("Action:".to_string()), Just("Action Input:".to_string()),
                Just("Final Answer:".to_string()), Just("Observation:".to_string()), Just("\n".to_string()),
                "[ -~]{0,12}",
            ],
            0..20,
        )
    ) {
        let text = parts.concat();
        let events = parse_generation(&text);
        prop_assert!(!events.is_empty() && events.len() <= 2);
        prop_assert_eq!(events.last().unwrap(), &parse_step(&text));
    }

    #[test]
    fn rendered_steps_parse_back(
        thought in "[a-zA-Z0-9 ,.]{1,60}",
        tool in "[a-z_]{1,12}",
        input in "[a-zA-Z0-9 |/.]{1,60}",
    ) {
        let thought = thought.trim().to_string();
        let input = input.trim().to_string();
        prop_assume!(!thought.is_empty() && !input.is_empty());
        let steps = vec![StepEvent::Thought { text: thought }, StepEvent::ToolCall { tool, input }];
        prop_assert_eq!(parse_generation(&render_transcript(&steps)), steps);
    }
}

#[test]
fn fifty_oversized_observations_stay_within_budget() {
    let budget = SessionLimits::default().effective_budget();
    assert_eq!(budget, 31129);
    let (result, prompts) = compaction_run(50, 8000);
    let transcript = result.expect("session completes");
    assert!(is_well_formed(&transcript));
    assert_eq!(
        transcript
            .iter()
            .filter(|e| matches!(e, StepEvent::Observation { .. }))
            .count(),
        50
    );
    assert_eq!(prompts.len(), 51);
    for (i, p) in prompts.iter().enumerate() {
        assert!(
            estimate_tokens(p) <= budget,
            "prompt {i}: {} tokens",
            estimate_tokens(p)
        );
    }
    // compaction really happened: the last prompt elides early pages
    assert!(prompts[50].contains("[observation elided: bulk, 8000 chars]"));
    // but the full transcript keeps them
    assert!(transcript.iter().all(|e| !matches!(e, StepEvent::Observation { text, .. } if text.starts_with("[observation elided"))));
}
