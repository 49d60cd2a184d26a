//! The extraction agent: few-shot prompt construction, multi-sample
//! generation and self-consistency voting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cases::{match_text, truncate_chars, CaseError, CaseKind, CaseStore, RetrievalWeights, ScoredCase};
use crate::cases::{DEFAULT_TOP_K, EXCERPT_CHARS};
use crate::json::{canonical_json, normalize_value, parse_relaxed_object};
use crate::llm::{ChatMessage, Gateway, LlmError, SamplingParams};
use crate::prompts::PromptSet;
use crate::schema::{serialize_schema, OutputSchema, TaskKind};

/// Few-shot material longer than this is cut in the prompt.
pub const EXAMPLE_CHARS: usize = 800;
pub const ELLIPSIS: &str = " [...]";

#[derive(Debug, thiserror::Error)]
pub enum ExtractionError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Cases(#[from] CaseError),
    #[error("none of the {n_total} sampled replies contained a usable JSON object")]
    NoValidCandidate { n_total: usize },
}

/// What one extraction call works on: an instruction and one chunk of text.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub instruction: &'a str,
    pub task_kind: TaskKind,
    pub text: &'a str,
}

impl Query<'_> {
    /// Text used for case retrieval, shaped like a stored case's match text.
    pub fn match_text(&self) -> String {
        match_text(self.instruction, truncate_chars(self.text, EXCERPT_CHARS))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionSettings {
    pub samples: u32,
    pub temperature: f64,
    pub max_tokens: u32,
    pub threshold: f64,
    pub few_shot_k: usize,
    pub weights: RetrievalWeights,
    /// When false, no correct cases are retrieved (zero-shot prompting).
    pub retrieval: bool,
}

impl Default for ExtractionSettings {
    fn default() -> Self {
        ExtractionSettings {
            samples: 3,
            temperature: 0.7,
            max_tokens: 2048,
            threshold: 0.6,
            few_shot_k: DEFAULT_TOP_K,
            weights: RetrievalWeights::default(),
            retrieval: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateOutput {
    pub raw_text: String,
    pub parsed: Option<Value>,
    pub canonical: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusResult {
    pub answer: Value,
    pub agreement: f64,
    pub n_valid: usize,
    pub n_total: usize,
    pub uncertain: bool,
}

#[derive(Debug, Clone)]
pub struct Extraction {
    pub consensus: ConsensusResult,
    pub examples_used: Vec<ScoredCase>,
    pub candidates: Vec<CandidateOutput>,
}

/// Cuts `text` to `max` characters, marking the cut.
pub fn clip(text: &str, max: usize) -> String {
    let cut = truncate_chars(text, max);
    if cut.len() == text.len() {
        text.to_string()
    } else {
        format!("{cut}{ELLIPSIS}")
    }
}

/// System message, then one user/assistant pair per example in the given
/// order, then the actual request.
pub fn build_prompt(
    prompts: &PromptSet,
    query: &Query<'_>,
    schema: &OutputSchema,
    examples: &[ScoredCase],
) -> Vec<ChatMessage> {
    let t = &prompts.extract;
    let mut messages = vec![ChatMessage::system(t.render("system", &[("schema", &serialize_schema(schema))]))];
    for ex in examples {
        let case = &ex.case;
        messages.push(ChatMessage::user(t.render(
            "example_user",
            &[("task", &case.task_description), ("input", &clip(&case.input_excerpt, EXAMPLE_CHARS))],
        )));
        messages.push(ChatMessage::assistant(t.render(
            "example_assistant",
            &[("reasoning", &clip(&case.annotation, EXAMPLE_CHARS)), ("answer", &case.answer_json)],
        )));
    }
    messages.push(ChatMessage::user(t.render("user", &[("task", query.instruction), ("input", query.text)])));
    messages
}

/// Normalized form used for voting and comparison.
pub fn canonical_answer(value: &Value, task_kind: TaskKind) -> (Value, String) {
    let v = normalize_value(value, task_kind.lists_are_sets());
    let c = canonical_json(&v);
    (v, c)
}

pub fn normalize_output(raw: &str, task_kind: TaskKind) -> CandidateOutput {
    match parse_relaxed_object(raw) {
        Ok(value) => {
            let (parsed, canonical) = canonical_answer(&value, task_kind);
            CandidateOutput { raw_text: raw.to_string(), parsed: Some(parsed), canonical: Some(canonical) }
        }
        Err(_) => CandidateOutput { raw_text: raw.to_string(), parsed: None, canonical: None },
    }
}

/// Majority vote over canonical forms. Ties go to the lexicographically
/// smallest canonical string. Uncertain iff agreement is strictly below the
/// threshold.
pub fn self_consistency(candidates: &[CandidateOutput], threshold: f64) -> Result<ConsensusResult, ExtractionError> {
    let mut tally: BTreeMap<&str, (usize, &Value)> = BTreeMap::new();
    for c in candidates {
        if let (Some(canonical), Some(parsed)) = (&c.canonical, &c.parsed) {
            tally.entry(canonical.as_str()).or_insert((0, parsed)).0 += 1;
        }
    }
    let n_valid: usize = tally.values().map(|(n, _)| n).sum();
    // BTreeMap iterates in ascending key order; strict `>` keeps the smallest on ties
    let mut best: Option<(usize, &Value)> = None;
    for (votes, value) in tally.values() {
        if best.is_none_or(|(b, _)| *votes > b) {
            best = Some((*votes, value));
        }
    }
    let (votes, answer) = best.ok_or(ExtractionError::NoValidCandidate { n_total: candidates.len() })?;
    let agreement = votes as f64 / n_valid as f64;
    Ok(ConsensusResult {
        answer: answer.clone(),
        agreement,
        n_valid,
        n_total: candidates.len(),
        uncertain: agreement < threshold,
    })
}

/// Retrieves examples, samples the model, and votes.
pub fn extract(
    gateway: &Gateway,
    prompts: &PromptSet,
    cases: &CaseStore,
    query: &Query<'_>,
    schema: &OutputSchema,
    settings: &ExtractionSettings,
) -> Result<Extraction, ExtractionError> {
    let examples = if settings.retrieval && settings.few_shot_k > 0 {
        let text = query.match_text();
        let embedding = gateway.embed(&text)?;
        cases.retrieve_top_k(&text, &embedding, CaseKind::Correct, query.task_kind, settings.few_shot_k, settings.weights)?
    } else {
        Vec::new()
    };
    let messages = build_prompt(prompts, query, schema, &examples);
    let params = SamplingParams {
        temperature: settings.temperature,
        max_tokens: settings.max_tokens,
        n_samples: settings.samples,
        seed: None,
    };
    let response = gateway.chat(messages, params)?;
    let candidates: Vec<CandidateOutput> =
        response.texts.iter().map(|t| normalize_output(t, query.task_kind)).collect();
    let consensus = self_consistency(&candidates, settings.threshold)?;
    Ok(Extraction { consensus, examples_used: examples, candidates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases::{NewCase, Provenance};
    use crate::llm::{LexicalEmbedder, ReplayBackend, ScriptedBackend, LEXICAL_DIM};
    use crate::schema::SchemaRepository;
    use proptest::prelude::*;
    use serde_json::json;
    use std::sync::Arc;

    fn cand(s: &str) -> CandidateOutput {
        normalize_output(s, TaskKind::Custom)
    }

    fn ner_schema() -> OutputSchema {
        SchemaRepository::bundled().get("default_ner").unwrap().schema.clone()
    }

    fn scored(desc: &str, input: &str, answer: &str) -> ScoredCase {
        let nc = NewCase {
            kind: CaseKind::Correct,
            task_kind: TaskKind::Ner,
            task_description: desc.into(),
            input: input.into(),
            schema_json: "{}".into(),
            answer_json: answer.into(),
            annotation: "Step 1: look.".into(),
            provenance: Provenance::Verified,
        };
        let e = LexicalEmbedder::default().vector(&nc.match_text());
        ScoredCase { case: nc.into_record(e), semantic: 1.0, lexical: 1.0, combined: 1.0 }
    }

    const Q: Query<'static> = Query { instruction: "Extract entities", task_kind: TaskKind::Ner, text: "Obama visited Hawaii." };

    #[test]
    fn normalize_examples() {
        assert_eq!(cand("```json\n{\"a\":1}\n```").parsed, Some(json!({"a": 1})));
        assert_eq!(cand("{'a': 1,}").parsed, Some(json!({"a": 1})));
        let none = cand("no json here");
        assert_eq!((none.parsed, none.canonical), (None, None));
    }

    #[test]
    fn normalize_uses_set_semantics_for_entity_lists() {
        let a = normalize_output(r#"{"entities":[{"mention":"b","type":"x"},{"mention":"a","type":"x"}]}"#, TaskKind::Ner);
        let b = normalize_output(r#"{"entities":[{"mention":"a","type":"x"},{"mention":"b","type":"x"}]}"#, TaskKind::Ner);
        assert_eq!(a.canonical, b.canonical);
    }

    #[test]
    fn voting_examples() {
        let a = r#"{"x":"A"}"#;
        let b = r#"{"x":"B"}"#;
        let r = self_consistency(&[cand(a), cand(a), cand(a)], 0.6).unwrap();
        assert_eq!((r.agreement, r.uncertain), (1.0, false));

        let r = self_consistency(&[cand(a), cand(a), cand(b)], 0.8).unwrap();
        assert_eq!(r.answer, json!({"x": "A"}));
        assert!((r.agreement - 2.0 / 3.0).abs() < 1e-12);
        assert!(r.uncertain);

        let r = self_consistency(&[cand(b), cand(a)], 0.6).unwrap();
        assert_eq!((r.answer.clone(), r.agreement), (json!({"x": "A"}), 0.5));

        let r = self_consistency(&[cand(a), cand(b), cand("junk"), cand(a), cand(b)], 0.5).unwrap();
        assert_eq!((r.n_valid, r.n_total, r.agreement, r.uncertain), (4, 5, 0.5, false));

        assert!(matches!(
            self_consistency(&[cand("junk")], 0.6),
            Err(ExtractionError::NoValidCandidate { n_total: 1 })
        ));
    }

    #[test]
    fn zero_example_prompt() {
        let schema = ner_schema();
        let msgs = build_prompt(&PromptSet::bundled(), &Q, &schema, &[]);
        assert_eq!(msgs.len(), 2);
        let all: String = msgs.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n");
        assert_eq!(all.matches(&serialize_schema(&schema)).count(), 1);
        assert!(msgs[1].content.contains("Obama visited Hawaii."));
    }

    #[test]
    fn examples_keep_order_and_answers_verbatim() {
        let first = scored("Extract entities", "Paris is in France.", r#"{"entities":[{"mention":"Paris","type":"location"}]}"#);
        let second = scored("Extract entities", "Apple hired Tim.", r#"{"entities":[{"mention":"Tim","type":"person"}]}"#);
        let msgs = build_prompt(&PromptSet::bundled(), &Q, &ner_schema(), &[first.clone(), second.clone()]);
        assert_eq!(msgs.len(), 6);
        let all: String = msgs.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n");
        let p1 = all.find(&first.case.answer_json).unwrap();
        let p2 = all.find(&second.case.answer_json).unwrap();
        assert!(p1 < p2);
        assert!(msgs[2].content.contains(&first.case.answer_json));
        assert!(msgs[4].content.contains(&second.case.answer_json));
    }

    #[test]
    fn long_reasoning_is_clipped() {
        let mut ex = scored("d", "short", "{}");
        ex.case.annotation = "z".repeat(EXAMPLE_CHARS + 10);
        let msgs = build_prompt(&PromptSet::bundled(), &Q, &ner_schema(), &[ex]);
        assert!(msgs[2].content.contains(&format!("{}{ELLIPSIS}", "z".repeat(EXAMPLE_CHARS))));
        assert!(!msgs[2].content.contains(&"z".repeat(EXAMPLE_CHARS + 1)));
    }

    fn scripted(replies: &'static [&'static str]) -> Gateway {
        let backend = ScriptedBackend::new(move |req| {
            Ok(replies.iter().cycle().take(req.params.n_samples as usize).map(|s| s.to_string()).collect())
        });
        Gateway::new(Arc::new(backend), Arc::new(LexicalEmbedder::default()), "m")
    }

    #[test]
    fn cold_start_extract() {
        let gw = scripted(&[r#"{"entities":[{"mention":"Obama","type":"person"}]}"#]);
        let store = CaseStore::in_memory(LEXICAL_DIM);
        let out = extract(&gw, &PromptSet::bundled(), &store, &Q, &ner_schema(), &ExtractionSettings::default()).unwrap();
        assert!(out.examples_used.is_empty());
        assert!(!out.consensus.uncertain);
        assert_eq!(out.consensus.answer, json!({"entities":[{"mention":"Obama","type":"person"}]}));
    }

    #[test]
    fn split_vote_is_uncertain() {
        let gw = scripted(&[r#"{"entities":[]}"#, r#"{"entities":[]}"#, r#"{"entities":[{"mention":"x","type":"y"}]}"#]);
        let settings = ExtractionSettings { threshold: 0.8, ..Default::default() };
        let out = extract(&gw, &PromptSet::bundled(), &CaseStore::in_memory(LEXICAL_DIM), &Q, &ner_schema(), &settings)
            .unwrap();
        assert!(out.consensus.uncertain);
    }

    #[test]
    fn missing_fixture_propagates() {
        let gw = Gateway::replay(ReplayBackend::default(), "m");
        let err = extract(&gw, &PromptSet::bundled(), &CaseStore::in_memory(LEXICAL_DIM), &Q, &ner_schema(), &Default::default());
        assert!(matches!(err, Err(ExtractionError::Llm(LlmError::FixtureMiss { .. }))));
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(keys in proptest::collection::vec("[a-z]{1,4}", 1..4), vals in proptest::collection::vec(" ?[a-zA-Z ]{0,5} ?", 1..4)) {
            let obj: serde_json::Map<String, Value> = keys.iter().zip(vals.iter()).map(|(k, v)| (k.clone(), json!([v, v]))).collect();
            let first = normalize_output(&Value::Object(obj).to_string(), TaskKind::Ner);
            let second = normalize_output(first.canonical.as_ref().unwrap(), TaskKind::Ner);
            prop_assert_eq!(first.parsed, second.parsed);
            prop_assert_eq!(first.canonical, second.canonical);
        }
    }
}
