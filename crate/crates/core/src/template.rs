//! Prompt templates with `{{name}}` placeholders.
//!
//! Built-in templates live as UTF-8 files under `templates/` in this crate and
//! are compiled in; a directory with files of the same names overrides them at
//! run time.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template `{template}` references unknown placeholder `{{{{{name}}}}}`")]
    UnknownPlaceholder { template: String, name: String },
    #[error("template `{template}` has an unterminated placeholder at byte {offset}")]
    Unterminated { template: String, offset: usize },
    #[error("reading template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A named template body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    body: String,
}

impl Template {
    pub fn new(name: impl Into<String>, body: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            body: body.into(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    /// Substitute every `{{key}}` with its value. Values are inserted verbatim;
    /// callers escape them first if the surrounding grammar needs it.
    pub fn render(&self, vars: &[(&str, &str)]) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.body.len() + 64);
        let mut rest = self.body.as_str();
        let mut consumed = 0usize;
        while let Some(start) = rest.find("{{") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            let end = after
                .find("}}")
                .ok_or_else(|| TemplateError::Unterminated {
                    template: self.name.clone(),
                    offset: consumed + start,
                })?;
            let key = after[..end].trim();
            let value = vars
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| TemplateError::UnknownPlaceholder {
                    template: self.name.clone(),
                    name: key.to_string(),
                })?;
            out.push_str(value);
            consumed += start + 2 + end + 2;
            rest = &after[end + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

/// A set of templates keyed by file name.
#[derive(Debug, Clone, Default)]
pub struct TemplateSet {
    templates: BTreeMap<String, Template>,
}

macro_rules! builtin {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../templates/", $name)))),*]
    };
}

const BUILTIN: &[(&str, &str)] = builtin!(
    "detection.txt",
    "detection_grammar.txt",
    "classification.txt",
    "classification_grammar.txt",
    "corrective.txt",
    "rewrite.txt",
    "rewrite_grammar.txt",
    "counterfactual_bias_kept_meaning_distorted.txt",
    "counterfactual_bias_removed_meaning_distorted.txt",
    "counterfactual_bias_kept_meaning_preserved.txt",
);

impl TemplateSet {
    /// The templates shipped with the crate.
    pub fn builtin() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|(name, body)| (name.to_string(), Template::new(*name, *body)))
            .collect();
        Self { templates }
    }

    /// Built-in templates, with any same-named files in `dir` taking precedence.
    pub fn with_overrides(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = Self::builtin();
        let names: Vec<String> = set.templates.keys().cloned().collect();
        for name in names {
            let path = dir.join(&name);
            if path.exists() {
                let body = fs::read_to_string(&path).map_err(|source| TemplateError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                set.templates
                    .insert(name.clone(), Template::new(name, body));
            }
        }
        Ok(set)
    }

    pub fn get(&self, name: &str) -> &Template {
        // Every lookup in the crate uses one of the BUILTIN names.
        self.templates
            .get(name)
            .unwrap_or_else(|| panic!("no template named {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }
}
