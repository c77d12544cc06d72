use proptest::prelude::*;

use splitreason::backend::{Backend, DecodeRequest, FinishReason, Role, ScriptedBackend, ScriptedBehavior};
use splitreason::orchestrator::{run_cooperative, GenerationResult, Policy, RunConfig, RunMode, Source};
use splitreason::protocol::{extract_spans, validate_trace};
use splitreason::text;
use splitreason::ControlTags;

const Q: &str = "Question: compute.\n";

#[derive(Debug, Clone)]
struct Story {
    /// Small-model text before, between and after the offload regions.
    small: Vec<String>,
    large: Vec<String>,
}

impl Story {
    fn text(&self) -> String {
        let mut out = self.small[0].clone();
        for (i, l) in self.large.iter().enumerate() {
            out.push_str("<bigmodel>");
            out.push_str(l);
            out.push_str("</bigmodel>");
            out.push_str(&self.small[i + 1]);
        }
        out.push_str("</answer>");
        out
    }

    fn scripts(&self, probe: bool, stream_chunk: u32) -> (ScriptedBehavior, ScriptedBehavior) {
        let n = self.large.len();
        let mut small = ScriptedBehavior::new();
        let mut large = ScriptedBehavior::new();
        let first = if n == 0 {
            format!("{}</answer>", self.small[0])
        } else {
            format!("{}<bigmodel>", self.small[0])
        };
        small = small.on_turn(1, first);
        for (i, l) in self.large.iter().enumerate() {
            let next = if i + 1 == n {
                format!("</bigmodel>{}</answer>", self.small[i + 1])
            } else {
                format!("</bigmodel>{}<bigmodel>", self.small[i + 1])
            };
            small = small.on_context(l.as_str(), next);
            large = large.on_turn(i as u32 + 1, l.as_str());
        }
        small = small.chunked(stream_chunk);
        if !probe {
            small = small.without_probe();
        }
        (small, large.chunked(stream_chunk))
    }
}

fn words(min: usize, max: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["so", "x", "=", "12", "then", "ok", "β", "two"]), min..max)
        .prop_map(|w| w.join(" "))
}

/// Large-model text may end chunks on a partial close tag.
fn large_words(min: usize, max: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["so", "x", "</", "</big", "<", "two"]), min..max)
        .prop_map(|w| w.join(" "))
}

fn story() -> impl Strategy<Value = Story> {
    (0usize..5).prop_flat_map(|n| {
        (
            words(0, 30),
            prop::collection::vec(words(1, 20), n),
            prop::collection::vec((large_words(1, 40), 0u32..1000), n),
        )
            .prop_map(|(head, mids, larges)| {
                let mut small = vec![head];
                small.extend(mids.into_iter().map(|m| format!(" {m} ")));
                // A unique marker makes every large region a distinct trigger.
                let large = larges
                    .into_iter()
                    .enumerate()
                    .map(|(i, (w, salt))| format!("{w} #{i}.{salt}"))
                    .collect();
                Story { small, large }
            })
    })
}

fn run(story: &Story, cfg: &RunConfig, probe: bool, stream_chunk: u32) -> GenerationResult {
    let (s, l) = story.scripts(probe, stream_chunk);
    let mut small = ScriptedBackend::new(s, Role::Small).unwrap();
    let mut large = ScriptedBackend::new(l, Role::Large).unwrap();
    let r = run_cooperative(Q, &mut small, &mut large, cfg).unwrap();
    assert_eq!(small.session().text(), format!("{Q}{}", r.trace.text));
    assert_eq!(large.session().text(), format!("{Q}{}", r.trace.text));
    r
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn scripted_runs_replay_exactly(
        story in story(),
        chunk in 1u32..48,
        stream_chunk in 1u32..10,
        probe in any::<bool>(),
        overlapped in any::<bool>(),
    ) {
        let tags = ControlTags::default();
        let cfg = RunConfig {
            chunk_size: chunk,
            mode: if overlapped { RunMode::Overlapped } else { RunMode::Sequential },
            ..RunConfig::default()
        };
        let r = run(&story, &cfg, probe, stream_chunk);
        prop_assert_eq!(&r.trace.text, &story.text());
        prop_assert!(validate_trace(&r.trace.text, &tags).offload_well_formed());
        prop_assert_eq!(r.trace.spans.len(), story.large.len());
        prop_assert_eq!(r.handoffs.len(), 2 * r.trace.spans.len());

        // Spans recorded by the run are the spans the text itself declares.
        let declared: Vec<_> = extract_spans(&r.trace.text, &tags).unwrap().iter().map(|s| s.range()).collect();
        let recorded: Vec<_> = r.trace.spans.iter().map(|s| s.range()).collect();
        prop_assert_eq!(declared, recorded);

        // The large backend decoded exactly the span contents.
        let stripped = r.trace.stripped_text(&tags);
        let in_spans: String = r.trace.spans.iter().map(|s| text::slice_chars(&stripped, s.start, s.end)).collect();
        prop_assert_eq!(r.text_from(Source::Large), in_spans);
        prop_assert_eq!(r.text_from(Source::Large), story.large.concat());

        // Conservation at one character per token.
        prop_assert_eq!(r.trace.large_tokens, text::char_len(&story.large.concat()) as u64);
        prop_assert_eq!(
            r.trace.small_tokens,
            text::char_len(&r.text_from(Source::Small)) as u64 + r.discarded_small_tokens
        );

        let other = RunConfig {
            mode: if overlapped { RunMode::Sequential } else { RunMode::Overlapped },
            ..cfg.clone()
        };
        prop_assert_eq!(&run(&story, &other, probe, stream_chunk), &r);
        prop_assert_eq!(&run(&story, &cfg, probe, stream_chunk), &r);
    }

    #[test]
    fn never_offload_matches_small_alone(body in words(0, 200), chunk in 1u32..64, tagged in any::<bool>()) {
        let emission = if tagged {
            format!("{body} <bigmodel> more {body}</answer>")
        } else {
            format!("{body}</answer>")
        };
        let script = ScriptedBehavior::new().on_turn(1, emission.as_str());
        let mut small = ScriptedBackend::new(script.clone(), Role::Small).unwrap();
        let mut large = ScriptedBackend::new(ScriptedBehavior::new().on_turn(1, "never"), Role::Large).unwrap();
        let cfg = RunConfig { chunk_size: chunk, policy: Policy::NeverOffload, ..RunConfig::default() };
        let r = run_cooperative(Q, &mut small, &mut large, &cfg).unwrap();

        let mut alone = ScriptedBackend::new(script, Role::Small).unwrap();
        alone.prefill(0, Q).unwrap();
        let mut solo = String::new();
        loop {
            let c = alone.decode_stream(&DecodeRequest::greedy(chunk)).unwrap();
            solo.push_str(&c.text());
            if c.finish == FinishReason::EndOfSequence {
                break;
            }
        }
        prop_assert_eq!(&r.trace.text, &solo);
        prop_assert_eq!(r.trace.large_tokens, 0);
        prop_assert!(r.trace.spans.is_empty());
    }
}
