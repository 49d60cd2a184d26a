//! Document loading and chunking.
//!
//! Loaders turn a local path or an http(s) URL into a [`SourceDocument`]
//! holding plain text. Long text is then cut into overlapping character
//! windows by [`chunk_text`].

mod chunk;
mod html;
mod pdf;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use chunk::{chunk_text, ChunkingPolicy, TextChunk};
pub use html::html_to_text;
pub use pdf::pdf_to_text;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("resource not found: {0}")]
    NotFound(String),
    #[error("unsupported format for {0}")]
    UnsupportedFormat(String),
    #[error("extraction produced no text for {0}")]
    EmptyAfterExtraction(String),
    #[error("invalid chunking policy: {0}")]
    InvalidPolicy(String),
    #[error("failed to fetch {url}: {reason}")]
    Fetch { url: String, reason: String },
    #[error("could not read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocumentFormat {
    PlainText,
    Html,
    PdfText,
}

impl DocumentFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            DocumentFormat::PlainText => "plain_text",
            DocumentFormat::Html => "html",
            DocumentFormat::PdfText => "pdf_text",
        }
    }

    fn from_extension(ext: &str) -> Option<Self> {
        match ext.to_ascii_lowercase().as_str() {
            "txt" | "text" | "md" => Some(DocumentFormat::PlainText),
            "html" | "htm" | "xhtml" => Some(DocumentFormat::Html),
            "pdf" => Some(DocumentFormat::PdfText),
            _ => None,
        }
    }

    fn sniff(bytes: &[u8]) -> Option<Self> {
        let head = String::from_utf8_lossy(&bytes[..bytes.len().min(512)]).to_ascii_lowercase();
        let head = head.trim_start_matches('\u{feff}').trim_start();
        if head.starts_with("%pdf-") {
            Some(DocumentFormat::PdfText)
        } else if head.starts_with("<!doctype html") || head.starts_with("<html") {
            Some(DocumentFormat::Html)
        } else if std::str::from_utf8(bytes).is_ok() {
            Some(DocumentFormat::PlainText)
        } else {
            None
        }
    }
}

impl fmt::Display for DocumentFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Accepts both the command-line spellings (`text`, `html`, `pdf-text`) and
/// the serialized ones.
impl FromStr for DocumentFormat {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "text" | "plain_text" | "plain-text" | "txt" => Ok(DocumentFormat::PlainText),
            "html" => Ok(DocumentFormat::Html),
            "pdf-text" | "pdf_text" | "pdf" => Ok(DocumentFormat::PdfText),
            other => Err(IngestError::UnsupportedFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub source_id: String,
    pub format: DocumentFormat,
    pub raw_bytes_len: usize,
    pub text: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl SourceDocument {
    /// Wraps already-extracted text, e.g. an evaluation sentence.
    pub fn from_text(source_id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        SourceDocument {
            source_id: source_id.into(),
            format: DocumentFormat::PlainText,
            raw_bytes_len: text.len(),
            text,
            metadata: BTreeMap::new(),
        }
    }
}

/// Loads a document from a local path or an http(s) URL.
///
/// Format resolution: the hint wins, then the file extension, then content
/// sniffing (only for resources without an extension).
pub fn load_document(path_or_url: &str, format_hint: Option<DocumentFormat>) -> Result<SourceDocument, IngestError> {
    if path_or_url.starts_with("http://") || path_or_url.starts_with("https://") {
        return load_url(path_or_url, format_hint);
    }
    let path = Path::new(path_or_url);
    let ext = path.extension().and_then(|e| e.to_str());
    let format = match (format_hint, ext) {
        (Some(f), _) => f,
        (None, Some(ext)) => DocumentFormat::from_extension(ext)
            .ok_or_else(|| IngestError::UnsupportedFormat(path_or_url.to_string()))?,
        (None, None) => {
            let bytes = read_file(path)?;
            DocumentFormat::sniff(&bytes).ok_or_else(|| IngestError::UnsupportedFormat(path_or_url.to_string()))?
        }
    };

    let (bytes, sidecar) = match format {
        DocumentFormat::PdfText => read_pdf_source(path)?,
        _ => (read_file(path)?, false),
    };
    let mut metadata = BTreeMap::new();
    metadata.insert("origin".to_string(), path_or_url.to_string());
    if sidecar {
        metadata.insert("pdf_source".to_string(), "sidecar".to_string());
    }
    build_document(path_or_url, format, &bytes, sidecar, metadata)
}

fn load_url(url: &str, format_hint: Option<DocumentFormat>) -> Result<SourceDocument, IngestError> {
    let fetch_err = |reason: String| IngestError::Fetch { url: url.to_string(), reason };
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(30))
        .build()
        .map_err(|e| fetch_err(e.to_string()))?;
    let resp = client.get(url).send().map_err(|e| fetch_err(e.to_string()))?;
    if resp.status() == reqwest::StatusCode::NOT_FOUND {
        return Err(IngestError::NotFound(url.to_string()));
    }
    if !resp.status().is_success() {
        return Err(fetch_err(format!("HTTP {}", resp.status())));
    }
    let content_type = resp
        .headers()
        .get(reqwest::header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("")
        .to_ascii_lowercase();
    let bytes = resp.bytes().map_err(|e| fetch_err(e.to_string()))?.to_vec();

    let url_ext = url
        .split(['?', '#'])
        .next()
        .and_then(|p| p.rsplit('/').next())
        .and_then(|name| name.rsplit_once('.').map(|(_, e)| e.to_string()));
    let format = format_hint
        .or_else(|| {
            if content_type.contains("html") {
                Some(DocumentFormat::Html)
            } else if content_type.contains("pdf") {
                Some(DocumentFormat::PdfText)
            } else if content_type.starts_with("text/plain") {
                Some(DocumentFormat::PlainText)
            } else {
                None
            }
        })
        .or_else(|| url_ext.as_deref().and_then(DocumentFormat::from_extension))
        .or_else(|| DocumentFormat::sniff(&bytes))
        .ok_or_else(|| IngestError::UnsupportedFormat(url.to_string()))?;

    let mut metadata = BTreeMap::new();
    metadata.insert("origin".to_string(), url.to_string());
    let is_text = format == DocumentFormat::PdfText && !bytes.starts_with(b"%PDF");
    build_document(url, format, &bytes, is_text, metadata)
}

fn build_document(
    source_id: &str,
    format: DocumentFormat,
    bytes: &[u8],
    pdf_is_text: bool,
    mut metadata: BTreeMap<String, String>,
) -> Result<SourceDocument, IngestError> {
    let text = match format {
        DocumentFormat::PlainText => decode_text(bytes),
        DocumentFormat::Html => {
            let (text, title) = html_to_text(&decode_text(bytes));
            if let Some(title) = title {
                metadata.insert("title".to_string(), title);
            }
            text
        }
        DocumentFormat::PdfText if pdf_is_text => decode_text(bytes).replace('\u{c}', "\n"),
        DocumentFormat::PdfText => pdf_to_text(bytes),
    };
    if text.trim().is_empty() {
        return Err(IngestError::EmptyAfterExtraction(source_id.to_string()));
    }
    Ok(SourceDocument {
        source_id: source_id.to_string(),
        format,
        raw_bytes_len: bytes.len(),
        text,
        metadata,
    })
}

/// Returns the bytes to extract from and whether they are already text
/// (a sidecar or a `.txt` handed in with a pdf-text hint).
fn read_pdf_source(path: &Path) -> Result<(Vec<u8>, bool), IngestError> {
    let is_pdf = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pdf"));
    if !is_pdf {
        let bytes = read_file(path)?;
        let is_text = !bytes.starts_with(b"%PDF");
        return Ok((bytes, is_text));
    }
    for sidecar in sidecar_candidates(path) {
        if sidecar.is_file() {
            return Ok((read_file(&sidecar)?, true));
        }
    }
    Ok((read_file(path)?, false))
}

fn sidecar_candidates(pdf: &Path) -> [PathBuf; 2] {
    let mut with_txt = pdf.as_os_str().to_owned();
    with_txt.push(".txt");
    [PathBuf::from(with_txt), pdf.with_extension("txt")]
}

fn read_file(path: &Path) -> Result<Vec<u8>, IngestError> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => IngestError::NotFound(path.display().to_string()),
        _ => IngestError::Io { path: path.display().to_string(), source: e },
    })
}

fn decode_text(bytes: &[u8]) -> String {
    let text = String::from_utf8_lossy(bytes);
    text.strip_prefix('\u{feff}').unwrap_or(&text).to_string()
}
