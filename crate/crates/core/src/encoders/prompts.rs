use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::LabelSpace;
use crate::error::{Result, SecosError};

/// Descriptive prompts per class name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, Vec<String>>", into = "BTreeMap<String, Vec<String>>")]
pub struct PromptBank {
    prompts: BTreeMap<String, Vec<String>>,
}

impl TryFrom<BTreeMap<String, Vec<String>>> for PromptBank {
    type Error = SecosError;

    fn try_from(m: BTreeMap<String, Vec<String>>) -> Result<Self> {
        Self::new(m)
    }
}

impl From<PromptBank> for BTreeMap<String, Vec<String>> {
    fn from(b: PromptBank) -> Self {
        b.prompts
    }
}

impl PromptBank {
    pub fn new(prompts: BTreeMap<String, Vec<String>>) -> Result<Self> {
        for (class, list) in &prompts {
            if list.is_empty() {
                return Err(SecosError::Validation(format!("class `{class}` has no prompts")));
            }
            if list.iter().any(|p| p.trim().is_empty()) {
                return Err(SecosError::Validation(format!("class `{class}` has an empty prompt")));
            }
        }
        Ok(Self { prompts })
    }

    /// The plain `"a photo of a {name}."` template for every class.
    pub fn from_template(labels: &LabelSpace, templates: &[&str]) -> Result<Self> {
        let prompts = labels
            .names()
            .map(|n| (n.to_owned(), templates.iter().map(|t| t.replace("{}", n)).collect()))
            .collect();
        Self::new(prompts)
    }

    pub fn prompts(&self, class: &str) -> Option<&[String]> {
        self.prompts.get(class).map(Vec::as_slice)
    }

    pub fn check_covers(&self, labels: &LabelSpace) -> Result<()> {
        match labels.names().find(|n| !self.prompts.contains_key(*n)) {
            Some(missing) => Err(SecosError::Validation(format!("prompt bank has no entry for class `{missing}`"))),
            None => Ok(()),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
