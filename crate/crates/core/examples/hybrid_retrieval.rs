//! Fills an in-memory case store and ranks it against a query with the
//! blend of embedding cosine and edit-distance similarity.

use ke::cases::{CaseKind, CaseStore, NewCase, Provenance, RetrievalWeights};
use ke::llm::{Embedder, LexicalEmbedder, LEXICAL_DIM};
use ke::schema::TaskKind;

const CASES: &[(&str, &str)] = &[
    ("Extract all named entities", "Marie Curie won the Nobel Prize in Physics in 1903."),
    ("Extract all named entities", "The Danube flows through Vienna and Budapest."),
    ("Extract all named entities", "Niels Bohr proposed a model of the hydrogen atom."),
    ("Extract all named entities", "Apple released a new phone in Cupertino."),
];

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let embedder = LexicalEmbedder::default();
    let store = CaseStore::in_memory(LEXICAL_DIM);
    for (task, input) in CASES {
        let case = NewCase {
            kind: CaseKind::Correct,
            task_kind: TaskKind::Ner,
            task_description: task.to_string(),
            input: input.to_string(),
            schema_json: "{}".into(),
            answer_json: "{}".into(),
            annotation: "hand-written example".into(),
            provenance: Provenance::Verified,
        };
        let embedding = embedder.embed(&case.match_text())?;
        store.add_case(case.into_record(embedding))?;
    }

    let query = ke::cases::match_text("Extract all named entities", "Enrico Fermi won the Nobel Prize in Physics.");
    let embedding = embedder.embed(&query)?;
    for (semantic, lexical) in [(1.0, 0.0), (0.7, 0.3), (0.0, 1.0)] {
        let weights = RetrievalWeights::new(semantic, lexical)?;
        println!("weights semantic={semantic} lexical={lexical}");
        for hit in store.retrieve_top_k(&query, &embedding, CaseKind::Correct, TaskKind::Ner, 3, weights)? {
            println!("  {:.3} (cos {:.3}, lex {:.3}) {}", hit.combined, hit.semantic, hit.lexical, hit.case.input_excerpt);
        }
    }
    Ok(())
}
