//! Normalizes a handful of raw model replies and votes on them. Key order,
//! code fences and list order (for entity sets) do not split the vote.

use ke::extraction::{normalize_output, self_consistency};
use ke::reflection::{route, Route};
use ke::schema::TaskKind;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let replies = [
        r#"{"entities": [{"mention": "Ada Lovelace", "type": "person"}, {"mention": "London", "type": "location"}]}"#,
        "```json\n{\"entities\": [{\"type\": \"location\", \"mention\": \"London\"}, {\"type\": \"person\", \"mention\": \"Ada Lovelace\"}]}\n```",
        r#"{"entities": [{"mention": "Ada Lovelace", "type": "person"}]}"#,
        "I could not find any entities.",
        r#"{"entities": [{"mention": "London", "type": "location"}, {"mention": "Ada Lovelace", "type": "person"}]}"#,
    ];
    let candidates: Vec<_> = replies.iter().map(|r| normalize_output(r, TaskKind::Ner)).collect();
    for c in &candidates {
        println!("{}", c.canonical.as_deref().unwrap_or("<unparseable>"));
    }

    for threshold in [0.5, 0.6, 0.8] {
        let vote = self_consistency(&candidates, threshold)?;
        let next = match route(&vote) {
            Route::Accept => "accept",
            Route::Reflect => "reflect",
        };
        println!(
            "threshold {threshold}: agreement {:.2} ({} valid of {}) -> {next}",
            vote.agreement, vote.n_valid, vote.n_total
        );
    }
    Ok(())
}
