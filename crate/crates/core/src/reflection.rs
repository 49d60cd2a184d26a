//! The reflection agent: revisits uncertain answers using past mistakes.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cases::{CaseKind, CaseStore, RetrievalWeights, ScoredCase, DEFAULT_TOP_K};
use crate::extraction::{clip, normalize_output, ConsensusResult, ExtractionError, Query, EXAMPLE_CHARS};
use crate::json::canonical_json;
use crate::llm::{ChatMessage, Gateway, SamplingParams};
use crate::prompts::PromptSet;
use crate::schema::{serialize_schema, OutputSchema};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Accept,
    Reflect,
}

pub fn route(preliminary: &ConsensusResult) -> Route {
    if preliminary.uncertain {
        Route::Reflect
    } else {
        Route::Accept
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReflectionSettings {
    pub k: usize,
    pub weights: RetrievalWeights,
    pub max_reflections: u32,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for ReflectionSettings {
    fn default() -> Self {
        ReflectionSettings {
            k: DEFAULT_TOP_K,
            weights: RetrievalWeights::default(),
            max_reflections: 1,
            temperature: 0.0,
            max_tokens: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalResult {
    pub answer: Value,
    pub reflected: bool,
    pub preliminary_agreement: f64,
    pub bad_cases_used: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl FinalResult {
    pub fn accepted(preliminary: &ConsensusResult) -> Self {
        FinalResult {
            answer: preliminary.answer.clone(),
            reflected: false,
            preliminary_agreement: preliminary.agreement,
            bad_cases_used: Vec::new(),
            warnings: Vec::new(),
        }
    }
}

pub fn build_reflection_prompt(
    prompts: &PromptSet,
    query: &Query<'_>,
    schema: &OutputSchema,
    draft: &Value,
    bad_cases: &[ScoredCase],
) -> Vec<ChatMessage> {
    let t = &prompts.reflect;
    let system = t.render("system", &[("schema", &serialize_schema(schema))]);
    let mut user = String::new();
    if !bad_cases.is_empty() {
        user.push_str(&t.render("bad_cases_header", &[]));
        for (i, sc) in bad_cases.iter().enumerate() {
            user.push_str("\n\n");
            user.push_str(&t.render(
                "bad_case",
                &[
                    ("index", &(i + 1).to_string()),
                    ("input", &clip(&sc.case.input_excerpt, EXAMPLE_CHARS)),
                    ("answer", &sc.case.answer_json),
                    ("reflection", &clip(&sc.case.annotation, EXAMPLE_CHARS)),
                ],
            ));
        }
        user.push_str("\n\n");
    }
    user.push_str(&t.render(
        "user",
        &[("task", query.instruction), ("input", query.text), ("draft", &canonical_json(draft))],
    ));
    vec![ChatMessage::system(system), ChatMessage::user(user)]
}

/// Retrieves bad cases and asks for a corrected answer. A reply without a
/// usable JSON object keeps the previous answer and records a warning;
/// gateway errors propagate.
pub fn reflect(
    gateway: &Gateway,
    prompts: &PromptSet,
    cases: &CaseStore,
    query: &Query<'_>,
    schema: &OutputSchema,
    preliminary: &ConsensusResult,
    settings: &ReflectionSettings,
) -> Result<FinalResult, ExtractionError> {
    let mut result = FinalResult::accepted(preliminary);
    if settings.max_reflections == 0 {
        return Ok(result);
    }
    let bad_cases = if settings.k > 0 {
        let text = query.match_text();
        let embedding = gateway.embed(&text)?;
        cases.retrieve_top_k(&text, &embedding, CaseKind::Bad, query.task_kind, settings.k, settings.weights)?
    } else {
        Vec::new()
    };
    result.bad_cases_used = bad_cases.iter().map(|s| s.case.case_id.clone()).collect();
    for round in 0..settings.max_reflections {
        let messages = build_reflection_prompt(prompts, query, schema, &result.answer, &bad_cases);
        let reply = gateway.chat(messages, SamplingParams::single(settings.temperature, settings.max_tokens))?;
        match normalize_output(&reply.texts[0], query.task_kind).parsed {
            Some(answer) => {
                result.answer = answer;
                result.reflected = true;
            }
            None => {
                let warning = format!("reflection round {} returned no JSON object; keeping previous answer", round + 1);
                log::warn!("{warning}");
                result.warnings.push(warning);
                break;
            }
        }
    }
    Ok(result)
}
