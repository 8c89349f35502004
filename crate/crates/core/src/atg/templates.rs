//! Text templates with named placeholders.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::AtgError;
use crate::embedding_store::Family;

pub const CLASS: &str = "class";
pub const CLASS_1: &str = "class 1";
pub const CLASS_2: &str = "class 2";
pub const ANALOGOUS: &str = "analogous class";
pub const SYNONYM: &str = "synonym class";
pub const ONE_TO_ONE: &str = "1v1 text";
pub const ATTRIBUTE: &str = "attribute";

static PLACEHOLDER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{([a-z0-9 ]+)\}").unwrap());

/// Placeholders each family's patterns must contain, no more and no fewer.
pub fn required_placeholders(family: Family) -> &'static [&'static str] {
    match family {
        Family::ClassName => &[CLASS],
        Family::Attribute => &[CLASS, ATTRIBUTE],
        Family::AnalogousClass => &[CLASS, ANALOGOUS],
        Family::Synonym => &[SYNONYM],
        Family::OneToOne => &[ONE_TO_ONE, CLASS_1, CLASS_2],
    }
}

pub fn placeholders(pattern: &str) -> BTreeSet<String> {
    PLACEHOLDER
        .captures_iter(pattern)
        .map(|c| c[1].to_string())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: String,
    pub family: Family,
    pub pattern: String,
}

/// Values substituted into a pattern, by placeholder name.
#[derive(Debug, Clone, Default)]
pub struct Fill<'a> {
    pub class: Option<&'a str>,
    pub class_1: Option<&'a str>,
    pub class_2: Option<&'a str>,
    pub analogous: Option<&'a str>,
    pub synonym: Option<&'a str>,
    pub one_to_one: Option<&'a str>,
    pub attribute: Option<&'a str>,
}

impl<'a> Fill<'a> {
    fn get(&self, name: &str) -> Option<&'a str> {
        match name {
            CLASS => self.class,
            CLASS_1 => self.class_1,
            CLASS_2 => self.class_2,
            ANALOGOUS => self.analogous,
            SYNONYM => self.synonym,
            ONE_TO_ONE => self.one_to_one,
            ATTRIBUTE => self.attribute,
            _ => None,
        }
    }
}

impl PromptTemplate {
    pub fn new(
        template_id: impl Into<String>,
        family: Family,
        pattern: impl Into<String>,
    ) -> Result<Self, AtgError> {
        let t = Self {
            template_id: template_id.into(),
            family,
            pattern: pattern.into(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), AtgError> {
        let found = placeholders(&self.pattern);
        let want: BTreeSet<String> = required_placeholders(self.family)
            .iter()
            .map(|s| s.to_string())
            .collect();
        if found != want {
            return Err(AtgError::Template(format!(
                "template {:?} ({}) has placeholders {:?}, expected {:?}",
                self.template_id, self.family, found, want
            )));
        }
        if self.template_id.is_empty() {
            return Err(AtgError::Template("template id is empty".into()));
        }
        Ok(())
    }

    /// Substitutes every placeholder. Missing values are a template error.
    pub fn render(&self, fill: &Fill<'_>) -> Result<String, AtgError> {
        let mut missing = None;
        let out = PLACEHOLDER.replace_all(&self.pattern, |c: &regex::Captures<'_>| {
            match fill.get(&c[1]) {
                Some(v) => v.to_string(),
                None => {
                    missing.get_or_insert_with(|| c[1].to_string());
                    String::new()
                }
            }
        });
        match missing {
            Some(name) => Err(AtgError::Template(format!(
                "no value for {{{name}}} in template {:?}",
                self.template_id
            ))),
            None => Ok(out.into_owned()),
        }
    }
}

/// Templates grouped by family, in file order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub templates: Vec<PromptTemplate>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        let t = |id: &str, family, pattern: &str| PromptTemplate {
            template_id: id.into(),
            family,
            pattern: pattern.into(),
        };
        Self {
            templates: vec![
                t("cn0", Family::ClassName, "a photo of a {class}"),
                t("att0", Family::Attribute, "a photo of a {class}, which has {attribute}"),
                t("ana0", Family::AnalogousClass, "a {class} similar to {analogous class}"),
                t("syn0", Family::Synonym, "a photo of {synonym class}"),
                t(
                    "ovo0",
                    Family::OneToOne,
                    "Because of {1v1 text}, {class 1} is different from {class 2}",
                ),
            ],
        }
    }
}

impl TemplateSet {
    pub fn new(templates: Vec<PromptTemplate>) -> Result<Self, AtgError> {
        let set = Self { templates };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), AtgError> {
        let mut ids = BTreeSet::new();
        for t in &self.templates {
            t.validate()?;
            if !ids.insert(t.template_id.as_str()) {
                return Err(AtgError::Template(format!(
                    "duplicate template id {:?}",
                    t.template_id
                )));
            }
        }
        Ok(())
    }

    /// Reads `{"templates": [...]}`. Families with no templates in the file
    /// fall back to the built-in defaults.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, AtgError> {
        let text = std::fs::read_to_string(path)?;
        let mut set: TemplateSet = serde_json::from_str(&text)?;
        for d in TemplateSet::default().templates {
            if !set.templates.iter().any(|t| t.family == d.family) {
                set.templates.push(d);
            }
        }
        set.validate()?;
        Ok(set)
    }

    pub fn for_family(&self, family: Family) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.iter().filter(move |t| t.family == family)
    }

    pub fn get(&self, template_id: &str) -> Option<&PromptTemplate> {
        self.templates.iter().find(|t| t.template_id == template_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        TemplateSet::default().validate().unwrap();
    }

    #[test]
    fn placeholder_sets_must_match() {
        assert!(PromptTemplate::new("x", Family::ClassName, "a {class} photo").is_ok());
        assert!(PromptTemplate::new("x", Family::ClassName, "a photo").is_err());
        assert!(PromptTemplate::new("x", Family::Synonym, "a {class} aka {synonym class}").is_err());
        assert!(PromptTemplate::new("x", Family::OneToOne, "{1v1 text}: {class 1}").is_err());
    }

    #[test]
    fn render_analogous() {
        let t = TemplateSet::default();
        let ana = t.for_family(Family::AnalogousClass).next().unwrap();
        let text = ana
            .render(&Fill {
                class: Some("clouded leopard"),
                analogous: Some("cheetah"),
                ..Default::default()
            })
            .unwrap();
        assert_eq!(text, "a clouded leopard similar to cheetah");
        assert!(ana.render(&Fill::default()).is_err());
    }
}
