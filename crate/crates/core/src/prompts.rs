//! Prompt templates.
//!
//! A template file is split into named sections by lines of the form
//! `[[section]]`. Placeholders are `{name}`; only names passed to
//! [`Template::render`] are substituted, so literal braces (JSON examples)
//! need no escaping. Substitution is single-pass: inserted values are never
//! rescanned.
//!
//! Template text feeds the replay digest, so editing a template invalidates
//! recorded fixtures.

use std::fs;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("template {file} is missing section [[{section}]]")]
    MissingSection { file: String, section: String },
    #[error("could not read template {file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    sections: Vec<(String, String)>,
}

impl Template {
    pub fn parse(name: &str, text: &str) -> Self {
        let mut sections: Vec<(String, String)> = Vec::new();
        let mut current: Option<(String, Vec<&str>)> = None;
        for line in text.lines() {
            let trimmed = line.trim_end();
            if let Some(section) = trimmed.strip_prefix("[[").and_then(|s| s.strip_suffix("]]")) {
                if let Some((n, body)) = current.take() {
                    sections.push((n, body.join("\n").trim_matches('\n').to_string()));
                }
                current = Some((section.trim().to_string(), Vec::new()));
            } else if let Some((_, body)) = current.as_mut() {
                body.push(line);
            }
        }
        if let Some((n, body)) = current {
            sections.push((n, body.join("\n").trim_matches('\n').to_string()));
        }
        Template { name: name.to_string(), sections }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn section(&self, section: &str) -> Option<&str> {
        self.sections.iter().find(|(n, _)| n == section).map(|(_, b)| b.as_str())
    }

    fn require(&self, sections: &[&str]) -> Result<(), PromptError> {
        for s in sections {
            if self.section(s).is_none() {
                return Err(PromptError::MissingSection { file: self.name.clone(), section: s.to_string() });
            }
        }
        Ok(())
    }

    /// Renders a section. Panics on an unknown section name; templates are
    /// checked for their required sections when a [`PromptSet`] is built.
    pub fn render(&self, section: &str, vars: &[(&str, &str)]) -> String {
        let body = self
            .section(section)
            .unwrap_or_else(|| panic!("template {} has no section {section}", self.name));
        substitute(body, vars)
    }
}

fn substitute(body: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(body.len());
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let replaced = after.find('}').and_then(|close| {
            let key = &after[..close];
            vars.iter().find(|(k, _)| *k == key).map(|(_, v)| (*v, close))
        });
        match replaced {
            Some((value, close)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

const FILES: &[(&str, &str, &[&str])] = &[
    ("extract.txt", include_str!("../prompts/extract.txt"), &["system", "example_user", "example_assistant", "user"]),
    ("reflect.txt", include_str!("../prompts/reflect.txt"), &["system", "bad_cases_header", "bad_case", "user"]),
    ("curator_reasoning.txt", include_str!("../prompts/curator_reasoning.txt"), &["system", "user"]),
    ("curator_reflection.txt", include_str!("../prompts/curator_reflection.txt"), &["system", "user"]),
    ("schema_deduce.txt", include_str!("../prompts/schema_deduce.txt"), &["system", "user", "retry"]),
    ("genre_classify.txt", include_str!("../prompts/genre_classify.txt"), &["system", "user"]),
];

/// Every template the agents use.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub extract: Template,
    pub reflect: Template,
    pub curator_reasoning: Template,
    pub curator_reflection: Template,
    pub schema_deduce: Template,
    pub genre_classify: Template,
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet::bundled()
    }
}

impl PromptSet {
    pub fn bundled() -> Self {
        Self::build(|_| Ok(None)).expect("bundled templates are complete")
    }

    /// Bundled templates, with any same-named file in `dir` taking precedence.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        Self::build(|file| {
            let path = dir.join(file);
            if !path.is_file() {
                return Ok(None);
            }
            fs::read_to_string(&path)
                .map(Some)
                .map_err(|source| PromptError::Io { file: path.display().to_string(), source })
        })
    }

    /// Writes the bundled templates into `dir` for editing.
    pub fn write_bundled(dir: &Path) -> Result<(), PromptError> {
        let io = |file: &str, source| PromptError::Io { file: file.to_string(), source };
        fs::create_dir_all(dir).map_err(|e| io(&dir.display().to_string(), e))?;
        for (file, text, _) in FILES {
            fs::write(dir.join(file), text).map_err(|e| io(file, e))?;
        }
        Ok(())
    }

    fn build(mut read: impl FnMut(&str) -> Result<Option<String>, PromptError>) -> Result<Self, PromptError> {
        let mut templates = Vec::with_capacity(FILES.len());
        for (file, bundled, required) in FILES {
            let text = read(file)?.unwrap_or_else(|| bundled.to_string());
            let t = Template::parse(file, &text);
            t.require(required)?;
            templates.push(t);
        }
        let mut it = templates.into_iter();
        let mut next = || it.next().expect("one template per file");
        Ok(PromptSet {
            extract: next(),
            reflect: next(),
            curator_reasoning: next(),
            curator_reflection: next(),
            schema_deduce: next(),
            genre_classify: next(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_substitution() {
        let t = Template::parse("t", "[[a]]\nHello {name}!\n{\"json\": {kept}}\n\n[[b]]\nbye\n");
        assert_eq!(t.render("a", &[("name", "{kept}")]), "Hello {kept}!\n{\"json\": {kept}}");
        assert_eq!(t.section("b"), Some("bye"));
        assert_eq!(t.section("c"), None);
    }

    #[test]
    fn bundled_set_is_complete() {
        let p = PromptSet::bundled();
        assert!(p.extract.section("system").unwrap().contains("{schema}"));
        assert!(p.curator_reasoning.section("user").unwrap().contains("{reference}"));
        assert!(p.curator_reflection.section("user").unwrap().contains("{answer}"));
    }

    #[test]
    fn directory_overrides_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("genre_classify.txt"), "[[system]]\nS\n[[user]]\nU {text}\n").unwrap();
        let p = PromptSet::load_dir(dir.path()).unwrap();
        assert_eq!(p.genre_classify.render("user", &[("text", "x")]), "U x");
        assert_eq!(p.extract, PromptSet::bundled().extract);

        std::fs::write(dir.path().join("reflect.txt"), "[[system]]\nonly\n").unwrap();
        assert!(matches!(PromptSet::load_dir(dir.path()), Err(PromptError::MissingSection { .. })));
    }
}
