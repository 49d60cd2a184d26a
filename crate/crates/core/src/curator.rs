//! Keeps the case repository growing: after a task finishes, the reference
//! answer is stored with generated reasoning steps, and a wrong answer is
//! stored with a generated reflection.

use serde_json::Value;

use crate::cases::{CaseError, CaseKind, CaseStore, NewCase, Provenance};
use crate::extraction::canonical_answer;
use crate::llm::{ChatMessage, Gateway, LlmError, SamplingParams};
use crate::prompts::{PromptSet, Template};
use crate::schema::TaskKind;

#[derive(Debug, thiserror::Error)]
pub enum CuratorError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Cases(#[from] CaseError),
    #[error("the model returned an empty {0}")]
    EmptyGeneration(&'static str),
    #[error("precondition violated: {0}")]
    Precondition(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutcome {
    pub task_kind: TaskKind,
    pub task_description: String,
    /// Source text; stored cases keep only an excerpt of it.
    pub input: String,
    pub schema_json: String,
    pub produced_answer: Value,
    pub reference_answer: Value,
    pub correct: bool,
}

impl TaskOutcome {
    pub fn new(
        task_kind: TaskKind,
        task_description: impl Into<String>,
        input: impl Into<String>,
        schema_json: impl Into<String>,
        produced_answer: Value,
        reference_answer: Value,
    ) -> Self {
        let correct = answers_match(&produced_answer, &reference_answer, task_kind);
        TaskOutcome {
            task_kind,
            task_description: task_description.into(),
            input: input.into(),
            schema_json: schema_json.into(),
            produced_answer,
            reference_answer,
            correct,
        }
    }

    fn reference_json(&self) -> String {
        canonical_answer(&self.reference_answer, self.task_kind).1
    }

    fn produced_json(&self) -> String {
        canonical_answer(&self.produced_answer, self.task_kind).1
    }

    fn new_case(&self, kind: CaseKind, answer_json: String, annotation: String, provenance: Provenance) -> NewCase {
        NewCase {
            kind,
            task_kind: self.task_kind,
            task_description: self.task_description.clone(),
            input: self.input.clone(),
            schema_json: self.schema_json.clone(),
            answer_json,
            annotation,
            provenance,
        }
    }
}

/// Canonical equality; entity, triple and event lists compare as sets.
pub fn answers_match(a: &Value, b: &Value, task_kind: TaskKind) -> bool {
    canonical_answer(a, task_kind).1 == canonical_answer(b, task_kind).1
}

fn generate(gateway: &Gateway, template: &Template, vars: &[(&str, &str)], what: &'static str) -> Result<String, CuratorError> {
    let messages = vec![ChatMessage::system(template.render("system", &[])), ChatMessage::user(template.render("user", vars))];
    let reply = gateway.chat(messages, SamplingParams::single(0.0, 2048))?;
    let text = reply.texts[0].trim().to_string();
    if text.is_empty() {
        return Err(CuratorError::EmptyGeneration(what));
    }
    Ok(text)
}

pub fn generate_reasoning(gateway: &Gateway, prompts: &PromptSet, outcome: &TaskOutcome) -> Result<String, CuratorError> {
    generate(
        gateway,
        &prompts.curator_reasoning,
        &[
            ("task", &outcome.task_description),
            ("schema", &outcome.schema_json),
            ("input", &outcome.input),
            ("reference", &outcome.reference_json()),
        ],
        "reasoning",
    )
}

pub fn generate_reflection(gateway: &Gateway, prompts: &PromptSet, outcome: &TaskOutcome) -> Result<String, CuratorError> {
    if outcome.correct {
        return Err(CuratorError::Precondition("reflection requested for a correct outcome"));
    }
    generate(
        gateway,
        &prompts.curator_reflection,
        &[
            ("task", &outcome.task_description),
            ("schema", &outcome.schema_json),
            ("input", &outcome.input),
            ("answer", &outcome.produced_json()),
            ("reference", &outcome.reference_json()),
        ],
        "reflection",
    )
}

/// Stores the reference answer as a correct case and, when the produced
/// answer was wrong, the produced answer as a bad case. Both writes land
/// together or not at all. Returns `(added_correct, added_bad)`.
pub fn update_repository(
    gateway: &Gateway,
    prompts: &PromptSet,
    cases: &CaseStore,
    outcome: &TaskOutcome,
) -> Result<(usize, usize), CuratorError> {
    let correct_case = outcome.new_case(CaseKind::Correct, outcome.reference_json(), String::new(), Provenance::Verified);
    let need_correct = cases.find_duplicate(&correct_case.dedup_key()).is_none();
    let bad_case = (!outcome.correct)
        .then(|| outcome.new_case(CaseKind::Bad, outcome.produced_json(), String::new(), Provenance::Verified))
        .filter(|c| cases.find_duplicate(&c.dedup_key()).is_none());

    let mut records = Vec::new();
    if need_correct {
        let mut c = correct_case;
        c.annotation = generate_reasoning(gateway, prompts, outcome)?;
        let embedding = gateway.embed(&c.match_text())?;
        records.push(c.into_record(embedding));
    }
    if let Some(mut b) = bad_case {
        b.annotation = generate_reflection(gateway, prompts, outcome)?;
        let embedding = gateway.embed(&b.match_text())?;
        records.push(b.into_record(embedding));
    }
    if records.is_empty() {
        return Ok((0, 0));
    }
    let kinds: Vec<CaseKind> = records.iter().map(|r| r.kind).collect();
    let added = cases.add_batch(records)?;
    let count = |k: CaseKind| kinds.iter().zip(&added).filter(|(kind, (_, inserted))| **kind == k && *inserted).count();
    Ok((count(CaseKind::Correct), count(CaseKind::Bad)))
}

/// Without a reference answer the final answer is kept as an unverified
/// correct case, with reasoning generated against that answer. `outcome`
/// carries the final answer as both produced and reference answer.
pub fn store_unverified(
    gateway: &Gateway,
    prompts: &PromptSet,
    cases: &CaseStore,
    outcome: &TaskOutcome,
) -> Result<usize, CuratorError> {
    let mut case = outcome.new_case(CaseKind::Correct, outcome.reference_json(), String::new(), Provenance::Unverified);
    if cases.find_duplicate(&case.dedup_key()).is_some() {
        return Ok(0);
    }
    case.annotation = generate_reasoning(gateway, prompts, outcome)?;
    let embedding = gateway.embed(&case.match_text())?;
    let (_, inserted) = cases.add_case(case.into_record(embedding))?;
    Ok(inserted as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{LexicalEmbedder, ReplayBackend, ScriptedBackend, LEXICAL_DIM};
    use crate::cases::RetrievalWeights;
    use serde_json::json;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::{Arc, Mutex};

    fn outcome(produced: Value) -> TaskOutcome {
        TaskOutcome::new(
            TaskKind::Ner,
            "Extract entities",
            "Obama visited Hawaii.",
            "{}",
            produced,
            json!({"entities": [{"mention": "Obama", "type": "person"}, {"mention": "Hawaii", "type": "location"}]}),
        )
    }

    fn recording_gateway() -> (Gateway, Arc<Mutex<Vec<String>>>, Arc<AtomicUsize>) {
        let prompts = Arc::new(Mutex::new(Vec::new()));
        let calls = Arc::new(AtomicUsize::new(0));
        let (p, c) = (prompts.clone(), calls.clone());
        let b = ScriptedBackend::new(move |req| {
            c.fetch_add(1, Ordering::SeqCst);
            let user = req.messages.last().unwrap().content.clone();
            let reply = if user.contains("Answer that was produced") { "Wrong type." } else { "Step 1: read. Answer: ok" };
            p.lock().unwrap().push(user);
            Ok(vec![reply.to_string()])
        });
        (Gateway::new(Arc::new(b), Arc::new(LexicalEmbedder::default()), "m"), prompts, calls)
    }

    #[test]
    fn set_semantics_for_correctness() {
        let swapped = json!({"entities": [{"mention": "Hawaii", "type": "location"}, {"mention": "Obama", "type": "person"}]});
        assert!(outcome(swapped).correct);
        assert!(!outcome(json!({"entities": []})).correct);
    }

    #[test]
    fn reasoning_prompt_has_reference_once() {
        let (gw, prompts, _) = recording_gateway();
        let o = outcome(json!({"entities": []}));
        let text = generate_reasoning(&gw, &PromptSet::bundled(), &o).unwrap();
        assert_eq!(text, "Step 1: read. Answer: ok");
        let p = prompts.lock().unwrap()[0].clone();
        assert_eq!(p.matches(&o.reference_json()).count(), 1);
    }

    #[test]
    fn reflection_prompt_has_both_answers() {
        let (gw, prompts, _) = recording_gateway();
        let o = outcome(json!({"entities": [{"mention": "Obama", "type": "location"}]}));
        generate_reflection(&gw, &PromptSet::bundled(), &o).unwrap();
        let p = prompts.lock().unwrap()[0].clone();
        assert!(p.contains(&o.reference_json()));
        assert!(p.contains(&o.produced_json()));
        let ok = outcome(o.reference_answer.clone());
        assert!(matches!(generate_reflection(&gw, &PromptSet::bundled(), &ok), Err(CuratorError::Precondition(_))));
    }

    #[test]
    fn update_counts_and_idempotence() {
        let (gw, _, calls) = recording_gateway();
        let store = CaseStore::in_memory(LEXICAL_DIM);
        let right = outcome(json!({"entities": [{"mention": "Obama", "type": "person"}, {"mention": "Hawaii", "type": "location"}]}));
        assert_eq!(update_repository(&gw, &PromptSet::bundled(), &store, &right).unwrap(), (1, 0));

        let wrong = outcome(json!({"entities": [{"mention": "Obama", "type": "location"}]}));
        assert_eq!(update_repository(&gw, &PromptSet::bundled(), &store, &wrong).unwrap(), (0, 1));
        let before = calls.load(Ordering::SeqCst);
        assert_eq!(update_repository(&gw, &PromptSet::bundled(), &store, &wrong).unwrap(), (0, 0));
        assert_eq!(calls.load(Ordering::SeqCst), before, "duplicates never reach the model");
        assert_eq!((store.len(CaseKind::Correct), store.len(CaseKind::Bad)), (1, 1));
    }

    #[test]
    fn wrong_outcome_adds_both_and_is_retrievable() {
        let (gw, _, _) = recording_gateway();
        let store = CaseStore::in_memory(LEXICAL_DIM);
        let wrong = outcome(json!({"entities": []}));
        assert_eq!(update_repository(&gw, &PromptSet::bundled(), &store, &wrong).unwrap(), (1, 1));
        let bad = store.cases(CaseKind::Bad);
        assert_eq!(bad[0].annotation, "Wrong type.");
        assert!(store.cases(CaseKind::Correct).iter().all(|c| c.kind == CaseKind::Correct));

        let q = crate::cases::match_text("Extract entities", "Obama visited Hawaii.");
        let e = LexicalEmbedder::default().vector(&q);
        let top = store.retrieve_top_k(&q, &e, CaseKind::Correct, TaskKind::Ner, 2, RetrievalWeights::default()).unwrap();
        assert_eq!(top[0].case.answer_json, wrong.reference_json());
    }

    #[test]
    fn gateway_failure_leaves_store_unchanged() {
        let gw = Gateway::replay(ReplayBackend::default(), "m");
        let store = CaseStore::in_memory(LEXICAL_DIM);
        let r = update_repository(&gw, &PromptSet::bundled(), &store, &outcome(json!({"entities": []})));
        assert!(matches!(r, Err(CuratorError::Llm(LlmError::FixtureMiss { .. }))));
        assert!(store.is_empty());
    }

    #[test]
    fn empty_reply_is_rejected() {
        let b = ScriptedBackend::new(|_| Ok(vec!["  ".into()]));
        let gw = Gateway::new(Arc::new(b), Arc::new(LexicalEmbedder::default()), "m");
        let r = generate_reasoning(&gw, &PromptSet::bundled(), &outcome(json!({})));
        assert!(matches!(r, Err(CuratorError::EmptyGeneration(_))));
    }

    #[test]
    fn unverified_cases_are_flagged() {
        let (gw, _, _) = recording_gateway();
        let store = CaseStore::in_memory(LEXICAL_DIM);
        let o = TaskOutcome::new(TaskKind::Ner, "d", "text", "{}", json!({"entities": []}), json!({"entities": []}));
        let n = store_unverified(&gw, &PromptSet::bundled(), &store, &o).unwrap();
        assert_eq!(n, 1);
        assert_eq!(store.cases(CaseKind::Correct)[0].provenance, Provenance::Unverified);
        assert_eq!(store.len(CaseKind::Bad), 0);
    }
}
