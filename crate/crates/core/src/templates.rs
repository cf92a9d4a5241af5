//! Prompt templates for induction, compilation, revision and judging.
//!
//! Each template file has an optional `#` comment header, then a `[system]`
//! and a `[user]` section. `{{name}}` placeholders are substituted at render
//! time. The shipped v1 templates are compiled in; a directory of overrides
//! (same file names) can replace any of them.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template {name}: {message}")]
    Malformed { name: String, message: String },
    #[error("template {name}: {source}")]
    Io {
        name: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub name: String,
    pub system: String,
    pub user: String,
}

impl Template {
    pub fn parse(name: &str, text: &str) -> Result<Self, TemplateError> {
        // sections[0] = system, sections[1] = user
        let mut sections: [Option<String>; 2] = [None, None];
        let mut current: Option<usize> = None;
        for line in text.lines() {
            match line.trim() {
                "[system]" => {
                    current = Some(0);
                    sections[0] = Some(String::new());
                    continue;
                }
                "[user]" => {
                    current = Some(1);
                    sections[1] = Some(String::new());
                    continue;
                }
                _ => {}
            }
            match current {
                Some(i) => {
                    let buf = sections[i].as_mut().expect("section opened");
                    buf.push_str(line);
                    buf.push('\n');
                }
                None if line.trim().is_empty() || line.starts_with('#') => {}
                None => {
                    return Err(TemplateError::Malformed {
                        name: name.to_string(),
                        message: format!("text outside a section: {line:?}"),
                    })
                }
            }
        }
        let [system, user] = sections;
        let user = user.ok_or_else(|| TemplateError::Malformed {
            name: name.to_string(),
            message: "missing [user] section".into(),
        })?;
        Ok(Self {
            name: name.to_string(),
            system: system.unwrap_or_default().trim().to_string(),
            user: user.trim().to_string(),
        })
    }

    /// Returns `(system, user)` with every `{{key}}` replaced.
    pub fn render(&self, vars: &[(&str, &str)]) -> (String, String) {
        (fill(&self.system, vars), fill(&self.user, vars))
    }
}

fn fill(text: &str, vars: &[(&str, &str)]) -> String {
    // single pass so substituted values are never re-scanned
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) => {
                let key = &after[..end];
                match vars.iter().find(|(k, _)| *k == key) {
                    Some((_, value)) => out.push_str(value),
                    None => {
                        out.push_str("{{");
                        out.push_str(key);
                        out.push_str("}}");
                    }
                }
                rest = &after[end + 2..];
            }
            None => {
                out.push_str(&rest[start..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    pub induction: Template,
    pub compiler: Template,
    pub revision: Template,
    pub judge: Template,
    pub reminder: Template,
}

const SHIPPED: [(&str, &str); 5] = [
    ("induction.v1.txt", include_str!("../templates/induction.v1.txt")),
    ("compiler.v1.txt", include_str!("../templates/compiler.v1.txt")),
    ("revision.v1.txt", include_str!("../templates/revision.v1.txt")),
    ("judge.v1.txt", include_str!("../templates/judge.v1.txt")),
    ("reminder.v1.txt", include_str!("../templates/reminder.v1.txt")),
];

impl Default for Templates {
    fn default() -> Self {
        Self::load(None).expect("shipped templates parse")
    }
}

impl Templates {
    /// Shipped templates, with any same-named file in `overrides` taking precedence.
    pub fn load(overrides: Option<&Path>) -> Result<Self, TemplateError> {
        let mut parsed = Vec::with_capacity(SHIPPED.len());
        for (name, shipped) in SHIPPED {
            let text = match overrides.map(|dir| dir.join(name)).filter(|p| p.exists()) {
                Some(path) => std::fs::read_to_string(&path).map_err(|source| TemplateError::Io {
                    name: name.to_string(),
                    source,
                })?,
                None => shipped.to_string(),
            };
            parsed.push(Template::parse(name, &text)?);
        }
        let mut it = parsed.into_iter();
        let mut next = || it.next().expect("five templates");
        Ok(Self {
            induction: next(),
            compiler: next(),
            revision: next(),
            judge: next(),
            reminder: next(),
        })
    }

    /// The format reminder appended to a user prompt when a reply did not parse.
    pub fn reminder(&self, format: &str) -> String {
        self.reminder.render(&[("format", format)]).1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_templates_parse() {
        let t = Templates::default();
        assert!(t.induction.user.contains("{{side_a}}"));
        assert!(t.compiler.user.contains("{{rules}}"));
        assert!(!t.revision.system.is_empty());
        assert!(t.reminder("IF x THEN y").contains("IF x THEN y"));
    }

    #[test]
    fn fill_is_single_pass() {
        assert_eq!(fill("a {{x}} b {{y}} {{z}}", &[("x", "{{y}}"), ("y", "2")]), "a {{y}} b 2 {{z}}");
        assert_eq!(fill("open {{ never", &[]), "open {{ never");
    }

    #[test]
    fn overrides_take_precedence() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("judge.v1.txt"), "[user]\ncustom {{input}}\n").unwrap();
        let t = Templates::load(Some(dir.path())).unwrap();
        assert_eq!(t.judge.render(&[("input", "q")]), (String::new(), "custom q".to_string()));
        assert_eq!(t.induction, Templates::default().induction);
    }

    #[test]
    fn malformed_template_rejected() {
        assert!(Template::parse("x", "stray\n[user]\nu").is_err());
        assert!(Template::parse("x", "[system]\nonly").is_err());
    }
}
