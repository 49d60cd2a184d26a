//! Loads the bundled news page and book chapter, then slices them into
//! overlapping windows.
//!
//!     cargo run --example ingest_and_chunk [chunk_size] [overlap]

use ke::ingest::{chunk_text, load_document, ChunkingPolicy, DocumentFormat};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let size = args.next().map(|s| s.parse()).transpose()?.unwrap_or(800);
    let overlap = args.next().map(|s| s.parse()).transpose()?.unwrap_or(100);
    let policy = ChunkingPolicy::new(size, overlap)?;

    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");
    let inputs = [
        (format!("{dir}/news/article.html"), None),
        (format!("{dir}/book/chapter.txt"), Some(DocumentFormat::PdfText)),
    ];
    for (path, hint) in inputs {
        let doc = load_document(&path, hint)?;
        println!("{} ({}, {} bytes -> {} chars)", doc.source_id, doc.format.as_str(), doc.raw_bytes_len, doc.text.chars().count());
        for (k, v) in &doc.metadata {
            println!("  {k}: {v}");
        }
        for chunk in chunk_text(&doc.text, &policy) {
            let preview: String = chunk.text.chars().take(60).collect();
            println!("  [{}] {}..{} {:?}", chunk.index, chunk.span_start, chunk.span_end, preview.replace('\n', " "));
        }
    }
    Ok(())
}
