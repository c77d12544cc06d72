use super::*;
use crate::backend::{Role, ScriptedBackend, ScriptedBehavior};
use crate::protocol::validate_trace;

const Q: &str = "Q: what is 2+2?\n";

fn small(b: ScriptedBehavior) -> ScriptedBackend {
    ScriptedBackend::new(b, Role::Small).unwrap()
}

fn large(b: ScriptedBehavior) -> ScriptedBackend {
    ScriptedBackend::new(b, Role::Large).unwrap()
}

fn run(s: ScriptedBehavior, l: ScriptedBehavior, cfg: &RunConfig) -> (GenerationResult, ScriptedBackend, ScriptedBackend) {
    let mut sb = small(s);
    let mut lb = large(l);
    let r = run_cooperative(Q, &mut sb, &mut lb, cfg).unwrap();
    (r, sb, lb)
}

fn span_text(r: &GenerationResult) -> String {
    let stripped = r.trace.stripped_text(&ControlTags::default());
    r.trace
        .spans
        .iter()
        .map(|s| text::slice_chars(&stripped, s.start, s.end))
        .collect()
}

fn large_text() -> String {
    let l = "so 2+2 means two plus two, which is 4 ok".to_string();
    assert_eq!(l.len(), 40);
    l
}

#[test]
fn never_emitting_tags_is_small_only() {
    let out = "<think>easy</think> <answer>4</answer>";
    let (r, sb, lb) = run(
        ScriptedBehavior::new().on_turn(1, out),
        ScriptedBehavior::new(),
        &RunConfig::default(),
    );
    assert_eq!(r.trace.text, out);
    assert!(r.trace.spans.is_empty());
    assert!(r.handoffs.is_empty());
    assert_eq!(r.trace.large_tokens, 0);
    assert_eq!(r.termination, Termination::AnswerClosed);
    assert_eq!(lb.turn(), 0);
    assert_eq!(lb.session().text(), format!("{Q}{out}"));
    assert_eq!(sb.session().text(), format!("{Q}{out}"));
}

#[test]
fn single_span_taken_back_at_second_check() {
    let prefix = "step ".repeat(24);
    let l = large_text();
    let tail = "</bigmodel> so</think> <answer>4</answer>";
    let cfg = RunConfig {
        chunk_size: 20,
        ..RunConfig::default()
    };
    let (r, sb, lb) = run(
        ScriptedBehavior::new()
            .on_turn(1, format!("{prefix}<bigmodel>"))
            .on_context(l.as_str(), tail),
        ScriptedBehavior::new().on_turn(1, l.as_str()),
        &cfg,
    );
    let expected = format!("{prefix}<bigmodel>{l}{tail}");
    assert_eq!(r.trace.text, expected);
    assert_eq!(r.trace.spans.len(), 1);
    let span = r.trace.spans[0];
    assert_eq!((span.start, span.end), (120, 160));
    assert_eq!(span.origin, SpanOrigin::Emitted);
    assert_eq!(span.token_estimate, 40);
    assert_eq!(r.handoffs.len(), 2);
    assert_eq!(r.handoffs[0].direction, Direction::ToLarge);
    assert_eq!(r.handoffs[1].reason, HandoffReason::CloseTag);
    assert!(!r.handoffs[1].forced);
    assert_eq!(r.trace.large_tokens, 40);
    assert_eq!(r.trace.small_tokens, 130 + tail.len() as u64);
    assert_eq!(r.text_from(Source::Large), l);
    assert_eq!(span_text(&r), l);
    assert!(validate_trace(&r.trace.text, &ControlTags::default()).offload_well_formed());
    assert_eq!(sb.session().text(), format!("{Q}{expected}"));
    assert!(lb.session().text().starts_with(&format!("{Q}{prefix}<bigmodel>{l}")));
    let phases: Vec<_> = r.timing.iter().map(|t| t.phase).collect();
    assert_eq!(phases, vec![Phase::SmallDecoding, Phase::LargeDecoding, Phase::SmallDecoding]);
}

#[test]
fn budget_forces_takeback() {
    let cfg = RunConfig {
        chunk_size: 20,
        max_offload_tokens_per_span: 50,
        ..RunConfig::default()
    };
    let (r, _, _) = run(
        ScriptedBehavior::new()
            .on_turn(1, "think <bigmodel>")
            .on_context("</bigmodel>", " fine</answer>"),
        ScriptedBehavior::new().on_turn(1, "y".repeat(500)),
        &cfg,
    );
    assert_eq!(
        r.trace.text,
        format!("think <bigmodel>{}</bigmodel> fine</answer>", "y".repeat(50))
    );
    let span = r.trace.spans[0];
    assert_eq!((span.start, span.end, span.origin), (6, 56, SpanOrigin::ForcedTakeback));
    assert!(r.handoffs[1].forced);
    assert_eq!(r.handoffs[1].reason, HandoffReason::BudgetExhausted);
    let close_src: Vec<_> = r.provenance.iter().map(|p| p.source).collect();
    assert_eq!(close_src, vec![Source::Small, Source::Large, Source::Orchestrator, Source::Small]);
}

#[test]
fn open_tag_split_across_decode_calls() {
    let cfg = RunConfig {
        chunk_size: 7,
        ..RunConfig::default()
    };
    let l = large_text();
    let (r, _, _) = run(
        ScriptedBehavior::new()
            .on_turn(1, "abcd <bigmodel>")
            .on_context(l.as_str(), "</bigmodel>.</answer>")
            .chunked(3),
        ScriptedBehavior::new().on_turn(1, l.as_str()),
        &cfg,
    );
    assert_eq!(r.trace.text, format!("abcd <bigmodel>{l}</bigmodel>.</answer>"));
    assert_eq!(r.trace.spans[0].range(), (5, 45));
}

#[test]
fn text_after_open_tag_is_cut_and_rewound() {
    let l = large_text();
    let (r, sb, _) = run(
        ScriptedBehavior::new()
            .on_turn(1, "go<bigmodel>junk")
            .on_context(l.as_str(), "</bigmodel>!</answer>"),
        ScriptedBehavior::new().on_turn(1, l.as_str()),
        &RunConfig::default(),
    );
    assert_eq!(r.trace.text, format!("go<bigmodel>{l}</bigmodel>!</answer>"));
    assert_eq!(r.discarded_small_tokens, 4);
    assert_eq!(sb.session().text(), format!("{Q}{}", r.trace.text));
}

#[test]
fn large_close_and_end_of_sequence() {
    let (r, _, lb) = run(
        ScriptedBehavior::new()
            .on_turn(1, "a <bigmodel>")
            .on_context("</bigmodel>", " b</answer>"),
        ScriptedBehavior::new().on_turn(1, "inner</bigmodel>rest"),
        &RunConfig::default(),
    );
    assert_eq!(r.trace.text, "a <bigmodel>inner</bigmodel> b</answer>");
    assert_eq!(r.handoffs[1].reason, HandoffReason::LargeClosed);
    assert_eq!(r.trace.spans[0].origin, SpanOrigin::Emitted);
    assert!(!lb.session().text().contains("rest"));

    let (r, _, _) = run(
        ScriptedBehavior::new()
            .on_turn(1, "a <bigmodel>")
            .on_context("</bigmodel>", " b</answer>"),
        ScriptedBehavior::new().on_turn(1, "inner"),
        &RunConfig::default(),
    );
    assert_eq!(r.trace.text, "a <bigmodel>inner</bigmodel> b</answer>");
    assert_eq!(r.handoffs[1].reason, HandoffReason::LargeStopped);
    assert_eq!(r.trace.spans[0].origin, SpanOrigin::ForcedTakeback);
}

#[test]
fn close_tag_split_across_large_decodes() {
    let cfg = RunConfig {
        chunk_size: 8,
        ..RunConfig::default()
    };
    let (r, _, lb) = run(
        ScriptedBehavior::new()
            .on_turn(1, "a <bigmodel>")
            .on_context("</bigmodel>", " k</answer>"),
        ScriptedBehavior::new().on_turn(1, "abcdef</bigmodel>zzz"),
        &cfg,
    );
    assert_eq!(r.trace.text, "a <bigmodel>abcdef</bigmodel> k</answer>");
    assert_eq!(r.handoffs[1].reason, HandoffReason::LargeClosed);
    assert_eq!(r.text_from(Source::Large), "abcdef");
    assert_eq!(r.trace.large_tokens, 6);
    assert_eq!(lb.session().text(), format!("{Q}{}", r.trace.text));
}

#[test]
fn empty_region_is_counted_not_listed() {
    let (r, _, _) = run(
        ScriptedBehavior::new()
            .on_turn(1, "a <bigmodel>")
            .on_context("</bigmodel>", " b</answer>"),
        ScriptedBehavior::new(),
        &RunConfig::default(),
    );
    assert_eq!(r.trace.text, "a <bigmodel></bigmodel> b</answer>");
    assert!(r.trace.spans.is_empty());
    assert!(r.handoffs.is_empty());
    assert_eq!(r.empty_offloads, 1);
}

#[test]
fn degraded_probe_still_takes_back() {
    let l = large_text();
    let cfg = RunConfig {
        chunk_size: 20,
        ..RunConfig::default()
    };
    let (r, sb, _) = run(
        ScriptedBehavior::new()
            .on_turn(1, "x <bigmodel>")
            .on_context(l.as_str(), "</bigmodel> ok</answer>")
            .without_probe(),
        ScriptedBehavior::new().on_turn(1, l.as_str()),
        &cfg,
    );
    assert_eq!(r.trace.text, format!("x <bigmodel>{l}</bigmodel> ok</answer>"));
    assert_eq!(r.handoffs[1].reason, HandoffReason::CloseTag);
    assert_eq!(r.warnings.len(), 1);
    assert_eq!(sb.session().text(), format!("{Q}{}", r.trace.text));
}

#[test]
fn token_limit_closes_open_region() {
    let cfg = RunConfig {
        max_total_tokens: 30,
        ..RunConfig::default()
    };
    let (r, _, _) = run(
        ScriptedBehavior::new().on_turn(1, "ab <bigmodel>"),
        ScriptedBehavior::new().on_turn(1, "z".repeat(100)),
        &cfg,
    );
    assert_eq!(r.termination, Termination::TokenLimit);
    assert_eq!(r.trace.small_tokens + r.trace.large_tokens, 30);
    assert_eq!(r.trace.text, format!("ab <bigmodel>{}</bigmodel>", "z".repeat(17)));
    assert!(r.trace.spans[0].origin == SpanOrigin::ForcedTakeback);
}

#[test]
fn overlapped_mode_matches_sequential() {
    let l = large_text();
    let script = || {
        ScriptedBehavior::new()
            .on_turn(1, format!("{}<bigmodel>", "w ".repeat(80)))
            .on_context(l.as_str(), format!("</bigmodel>{}</answer>", " v".repeat(50)))
    };
    let mut cfg = RunConfig {
        chunk_size: 16,
        stream_buffer: 1,
        ..RunConfig::default()
    };
    let (a, _, la) = run(script(), ScriptedBehavior::new().on_turn(1, l.as_str()), &cfg);
    cfg.mode = RunMode::Overlapped;
    let (b, _, lb) = run(script(), ScriptedBehavior::new().on_turn(1, l.as_str()), &cfg);
    assert_eq!(a, b);
    assert_eq!(la.session().text(), lb.session().text());
}

#[test]
fn random_policy_follows_the_plan() {
    let cfg = RunConfig {
        max_total_tokens: 3000,
        policy: Policy::RandomOffload {
            p: 0.3,
            seed: 11,
            mean_span_tokens: 100,
        },
        ..RunConfig::default()
    };
    let (r, _, _) = run(
        ScriptedBehavior::new().on_turn(1, "s".repeat(5000)),
        ScriptedBehavior::new().on_turn(1, "L".repeat(5000)),
        &cfg,
    );
    let plan = random_offload_policy(3000, 0.3, 11, 100);
    let got: Vec<_> = r.trace.spans.iter().map(|s| s.token_estimate).collect();
    let want: Vec<_> = plan.iter().map(|s| s.token_estimate).collect();
    assert_eq!(got, want);
    assert!(r.trace.spans.iter().all(|s| s.origin == SpanOrigin::RandomPolicy));
    assert_eq!(r.trace.large_tokens, want.iter().sum::<u64>());
    assert_eq!(span_text(&r), "L".repeat(r.trace.large_tokens as usize));
    assert_eq!(r.handoffs.len(), 2 * plan.len());
}

#[test]
fn never_offload_ignores_tags() {
    let cfg = RunConfig {
        policy: Policy::NeverOffload,
        ..RunConfig::default()
    };
    let (r, _, _) = run(
        ScriptedBehavior::new().on_turn(1, "a b c</answer>"),
        ScriptedBehavior::new().on_turn(1, "never"),
        &cfg,
    );
    assert_eq!(r.trace.text, "a b c</answer>");
    assert_eq!(r.trace.large_tokens, 0);
}

#[test]
fn rejects_bad_input() {
    let mut s = small(ScriptedBehavior::new());
    let mut l = large(ScriptedBehavior::new());
    assert!(matches!(
        run_cooperative("", &mut s, &mut l, &RunConfig::default()),
        Err(RunError::Config(_))
    ));
    l.prefill(0, "used").unwrap();
    assert!(matches!(
        run_cooperative("q", &mut s, &mut l, &RunConfig::default()),
        Err(RunError::Config(_))
    ));
    let cfg = RunConfig {
        chunk_size: 0,
        ..RunConfig::default()
    };
    let mut l = large(ScriptedBehavior::new());
    assert!(matches!(run_cooperative("q", &mut s, &mut l, &cfg), Err(RunError::Config(_))));
}

#[test]
fn config_round_trips_through_toml() {
    let cfg: RunConfig = toml::from_str(
        "chunk_size = 32\nmode = \"overlapped\"\n[policy]\nkind = \"random-offload\"\np = 0.1\nseed = 4\n",
    )
    .unwrap();
    assert_eq!(cfg.chunk_size, 32);
    assert_eq!(cfg.mode, RunMode::Overlapped);
    assert_eq!(cfg.max_offload_tokens_per_span, 1024);
    let back: RunConfig = toml::from_str(&toml::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(back, cfg);
}
