//! Normal-state prompt grammar: state descriptors over a class token `[c]`,
//! embedded into contextual templates over a state token `[s]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CLASS_TOKEN: &str = "[c]";
pub const STATE_TOKEN: &str = "[s]";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptCatalog {
    pub states: Vec<String>,
    pub templates: Vec<String>,
}

impl Default for PromptCatalog {
    fn default() -> Self {
        Self {
            states: [
                "[c]",
                "flawless [c]",
                "perfect [c]",
                "unblemished [c]",
                "[c] without flaw",
                "[c] without defect",
                "[c] without damage",
            ]
            .map(String::from)
            .to_vec(),
            templates: ["a photo of a [s].", "a photo of the [s]."].map(String::from).to_vec(),
        }
    }
}

impl PromptCatalog {
    pub fn len(&self) -> usize {
        self.states.len() * self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.states.is_empty() || self.templates.is_empty() {
            return Err(Error::invalid("prompt catalog needs at least one state and one template"));
        }
        if let Some(s) = self.states.iter().find(|s| !s.contains(CLASS_TOKEN)) {
            return Err(Error::invalid(format!("state `{s}` lacks the {CLASS_TOKEN} token")));
        }
        if let Some(t) = self.templates.iter().find(|t| !t.contains(STATE_TOKEN)) {
            return Err(Error::invalid(format!("template `{t}` lacks the {STATE_TOKEN} token")));
        }
        Ok(())
    }

    /// Parses a plain-text catalog:
    ///
    /// ```text
    /// [states]
    /// flawless [c]
    /// [templates]
    /// a photo of a [s].
    /// ```
    ///
    /// Blank lines and lines starting with `#` are ignored.
    pub fn parse_text(text: &str) -> Result<Self> {
        enum Section {
            None,
            States,
            Templates,
        }
        let mut section = Section::None;
        let mut catalog = Self {
            states: Vec::new(),
            templates: Vec::new(),
        };
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line {
                "[states]" => section = Section::States,
                "[templates]" => section = Section::Templates,
                _ => match section {
                    Section::States => catalog.states.push(line.to_string()),
                    Section::Templates => catalog.templates.push(line.to_string()),
                    Section::None => {
                        return Err(Error::invalid(format!(
                            "prompt catalog line {}: entry before any [states]/[templates] header",
                            lineno + 1
                        )))
                    }
                },
            }
        }
        catalog.validate()?;
        Ok(catalog)
    }
}

/// All `|states|·|templates|` sentences for `class_name`, states outermost.
pub fn build_prompts(class_name: &str, catalog: &PromptCatalog) -> Result<Vec<String>> {
    let class_name = class_name.trim();
    if class_name.is_empty() {
        return Err(Error::invalid("class name must be nonempty"));
    }
    catalog.validate()?;
    let mut out = Vec::with_capacity(catalog.len());
    for state in &catalog.states {
        let s = state.replace(CLASS_TOKEN, class_name);
        for template in &catalog.templates {
            out.push(template.replace(STATE_TOKEN, &s));
        }
    }
    Ok(out)
}
