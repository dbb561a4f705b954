use std::collections::{BTreeMap, HashSet};

use crate::error::{Error, Result};

/// Placeholder a template uses for the class phrase.
pub const SLOT: &str = "{}";

pub fn default_templates() -> Vec<String> {
    vec!["a photo of a {}.".to_string(), "a bright photo of a {}.".to_string()]
}

/// Ordered class vocabulary with prompt templates and per-class concepts.
///
/// The first `n_in` classes are the target classes in label-id order.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    class_names: Vec<String>,
    n_in: usize,
    templates: Vec<String>,
    concepts: Vec<Vec<String>>,
}

pub fn build_prompt_set(
    target_classes: &[String],
    extra_classes: &[String],
    templates: &[String],
    concepts: &BTreeMap<String, Vec<String>>,
) -> Result<PromptSet> {
    if target_classes.is_empty() {
        return Err(Error::config("prompt set needs at least one target class"));
    }
    if templates.is_empty() {
        return Err(Error::config("prompt set needs at least one template"));
    }
    for t in templates {
        if t.matches(SLOT).count() != 1 {
            return Err(Error::config(format!(
                "template {t:?} must contain exactly one {SLOT} slot"
            )));
        }
    }
    let class_names: Vec<String> = target_classes.iter().chain(extra_classes).cloned().collect();
    let mut seen = HashSet::new();
    for name in &class_names {
        if !seen.insert(name.as_str()) {
            return Err(Error::config(format!("duplicate class name {name:?} in prompt set")));
        }
    }
    for key in concepts.keys() {
        if !seen.contains(key.as_str()) {
            return Err(Error::config(format!("concepts given for unknown class {key:?}")));
        }
    }
    let concepts = class_names
        .iter()
        .map(|name| match concepts.get(name) {
            Some(list) if list.is_empty() => Err(Error::config(format!(
                "class {name:?} has an empty concept list"
            ))),
            Some(list) => Ok(list.clone()),
            None => Ok(vec![name.clone()]),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PromptSet {
        class_names,
        n_in: target_classes.len(),
        templates: templates.to_vec(),
        concepts,
    })
}

impl PromptSet {
    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn num_templates(&self) -> usize {
        self.templates.len()
    }

    pub fn concepts(&self, class: usize) -> &[String] {
        &self.concepts[class]
    }

    /// Prompt text for concept `k` of class `n` under template `p`.
    pub fn render(&self, class: usize, template: usize, concept: usize) -> String {
        self.templates[template].replacen(SLOT, &self.concepts[class][concept], 1)
    }

    /// All prompts for class `n` under template `p`, one per concept.
    pub fn prompts(&self, class: usize, template: usize) -> Vec<String> {
        (0..self.concepts[class].len())
            .map(|k| self.render(class, template, k))
            .collect()
    }
}
