//! Browses the bundled schemas, adds one, and shows how lookup picks a
//! schema from a task kind plus scenario tags.

use ke::schema::{parse_schema_definition, serialize_record_pretty, SchemaRepository, TaskKind};

const RECIPE: &str = r#"{
  "id": "recipe_card",
  "task_kind": "Custom",
  "scenario_tags": ["recipe", "cooking"],
  "fields": [
    {"name": "dish", "kind": "text", "description": "Name of the dish"},
    {"name": "ingredients", "kind": "record_list", "children": [
      {"name": "item", "kind": "text"},
      {"name": "quantity", "kind": "text"}
    ]},
    {"name": "steps", "kind": "text_list"}
  ]
}"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut repo = SchemaRepository::bundled();
    for record in repo.records() {
        println!("{:<16} {:<8} {}", record.id, record.task_kind.as_str(), record.scenario_tags.join(","));
    }

    repo.insert(parse_schema_definition(RECIPE)?)?;
    let tags = ["cooking".to_string()];
    let hit = repo.lookup(TaskKind::Custom, &tags).expect("the new schema matches its own tag");
    println!("\nlookup(Custom, [cooking]) -> {}", hit.id);
    println!("{}", serialize_record_pretty(hit));

    let ner = repo.lookup(TaskKind::Ner, &[]).expect("a default NER schema is bundled");
    println!("lookup(NER, []) -> {}", ner.id);
    Ok(())
}
