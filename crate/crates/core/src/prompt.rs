//! System and user prompts.
//!
//! Prompts come from two plain-text templates with `{{placeholder}}`
//! markers. The system template carries the assistant's role and the rule
//! that only library functions may be used; the user template carries the
//! function library and the operator's task. The library section is always
//! generated from [`dsl::FUNCTIONS`](crate::dsl::FUNCTIONS), so the prompt
//! and the validator cannot disagree about what is callable.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{FunctionSpec, FUNCTIONS};

pub const ROLE_SENTENCE: &str = "You are an assistant helping me with drones.";
pub const RESTRICTION_SENTENCE: &str = "You are only allowed to use the functions I have defined for you";

pub const DEFAULT_SYSTEM_TEMPLATE: &str = include_str!("../templates/system.txt");
pub const DEFAULT_USER_TEMPLATE: &str = include_str!("../templates/user.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("chat message content must not be empty")]
pub struct EmptyMessage;

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Result<Self, EmptyMessage> {
        let content = content.into();
        if content.trim().is_empty() {
            return Err(EmptyMessage);
        }
        Ok(ChatMessage { role, content })
    }
}

/// Optional additions to the default persona.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PersonaConfig {
    /// Extra sentence(s) following the role sentence, e.g. the operating
    /// site.
    pub context: Option<String>,
    /// Additional rules, one per line.
    pub extra_rules: Vec<String>,
}

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("reading template {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{template} template is missing {missing}")]
    Missing { template: &'static str, missing: &'static str },
}

/// Substitutes `{{name}}` markers. Unknown markers are left in place.
pub fn fill_template(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in values {
        out = out.replace(&format!("{{{{{name}}}}}"), value);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    system: String,
    user: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates { system: DEFAULT_SYSTEM_TEMPLATE.to_string(), user: DEFAULT_USER_TEMPLATE.to_string() }
    }
}

impl PromptTemplates {
    pub fn new(system: impl Into<String>, user: impl Into<String>) -> Result<Self, TemplateError> {
        let templates = PromptTemplates { system: system.into(), user: user.into() };
        templates.check()?;
        Ok(templates)
    }

    /// Loads both templates from disk, falling back to the embedded default
    /// for any path that is `None`.
    pub fn load(system: Option<&Path>, user: Option<&Path>) -> Result<Self, TemplateError> {
        let read = |path: Option<&Path>, fallback: &str| match path {
            None => Ok(fallback.to_string()),
            Some(p) => std::fs::read_to_string(p).map_err(|source| TemplateError::Io {
                path: p.display().to_string(),
                source,
            }),
        };
        PromptTemplates::new(read(system, DEFAULT_SYSTEM_TEMPLATE)?, read(user, DEFAULT_USER_TEMPLATE)?)
    }

    fn check(&self) -> Result<(), TemplateError> {
        let system_ok = self.system.contains("{{role}}") || self.system.contains(ROLE_SENTENCE);
        if !system_ok {
            return Err(TemplateError::Missing { template: "system", missing: "the role sentence or {{role}}" });
        }
        if !self.system.contains(RESTRICTION_SENTENCE) {
            return Err(TemplateError::Missing { template: "system", missing: "the restriction sentence" });
        }
        for marker in ["{{functions}}", "{{task}}"] {
            if !self.user.contains(marker) {
                return Err(TemplateError::Missing { template: "user", missing: marker });
            }
        }
        Ok(())
    }

    pub fn build_system_prompt(&self, persona: &PersonaConfig) -> String {
        let role = match persona.context.as_deref().map(str::trim) {
            Some(ctx) if !ctx.is_empty() => format!("{ROLE_SENTENCE} {ctx}"),
            _ => ROLE_SENTENCE.to_string(),
        };
        let rules = persona.extra_rules.iter().map(|r| r.trim()).filter(|r| !r.is_empty()).collect::<Vec<_>>();
        let text = fill_template(&self.system, &[("role", &role), ("rules", &rules.join("\n"))]);
        // Drop the empty line left by an empty {{rules}}.
        text.lines().filter(|l| !l.trim().is_empty()).collect::<Vec<_>>().join("\n")
    }

    pub fn render_user(&self, preamble: &str, task: &str) -> String {
        fill_template(&self.user, &[("functions", preamble), ("task", task.trim())])
            .trim_end()
            .to_string()
    }
}

/// System prompt from the embedded default template.
pub fn build_system_prompt(persona: &PersonaConfig) -> String {
    PromptTemplates::default().build_system_prompt(persona)
}

fn library_line(spec: &FunctionSpec) -> String {
    let names = spec.params.iter().map(|p| p.name).collect::<Vec<_>>().join(", ");
    let mut line = format!("{}({})", spec.name, names);
    if !spec.params.is_empty() {
        let domains =
            spec.params.iter().map(|p| format!("{}: {}", p.name, p.kind.domain())).collect::<Vec<_>>().join("; ");
        line.push_str(&format!(" [{domains}]"));
    }
    line.push_str(" - ");
    line.push_str(spec.summary);
    line
}

/// One line per function, sorted by name.
pub fn build_library_preamble(registry: &[FunctionSpec]) -> String {
    let mut sorted: Vec<&FunctionSpec> = registry.iter().collect();
    sorted.sort_by_key(|f| f.name);
    sorted.dedup_by_key(|f| f.name);
    sorted.into_iter().map(library_line).collect::<Vec<_>>().join("\n")
}

/// Everything needed to render one planning turn.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub system_text: String,
    pub library_preamble: String,
    pub task_text: String,
    history: Vec<ChatMessage>,
    templates: PromptTemplates,
}

impl PromptBundle {
    pub fn new(templates: PromptTemplates, persona: &PersonaConfig) -> Self {
        PromptBundle {
            system_text: templates.build_system_prompt(persona),
            library_preamble: build_library_preamble(FUNCTIONS),
            task_text: String::new(),
            history: Vec::new(),
            templates,
        }
    }

    pub fn with_task(mut self, task: impl Into<String>) -> Self {
        self.task_text = task.into();
        self
    }

    pub fn set_task(&mut self, task: impl Into<String>) {
        self.task_text = task.into();
    }

    pub fn history(&self) -> &[ChatMessage] {
        &self.history
    }

    /// Appends a user or assistant turn. System messages and empty content
    /// are refused.
    pub fn push_history(&mut self, message: ChatMessage) -> Result<(), EmptyMessage> {
        if message.role == Role::System || message.content.trim().is_empty() {
            return Err(EmptyMessage);
        }
        self.history.push(message);
        Ok(())
    }

    pub fn user_message_text(&self) -> String {
        self.templates.render_user(&self.library_preamble, &self.task_text)
    }
}

impl Default for PromptBundle {
    fn default() -> Self {
        PromptBundle::new(PromptTemplates::default(), &PersonaConfig::default())
    }
}

/// `[system] + history + [user: library preamble and task]`. The preamble
/// is re-sent on every turn.
pub fn render_conversation(bundle: &PromptBundle) -> Vec<ChatMessage> {
    let mut out = Vec::with_capacity(bundle.history.len() + 2);
    out.push(ChatMessage { role: Role::System, content: bundle.system_text.clone() });
    out.extend(bundle.history.iter().cloned());
    out.push(ChatMessage { role: Role::User, content: bundle.user_message_text() });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::{self, PlanErrorKind, PlanSourceError};
    use crate::motion::DroneId;

    #[test]
    fn default_system_prompt_has_role_and_restriction() {
        let text = build_system_prompt(&PersonaConfig::default());
        assert!(text.contains("assistant helping me with drones"));
        assert!(text.contains(RESTRICTION_SENTENCE));
        assert!(text.contains("exactly one fenced code block"));
        assert!(text.contains("DSL code only"));
        assert!(!text.contains("{{"));
    }

    #[test]
    fn empty_overrides_equal_default() {
        let empty = PersonaConfig { context: Some("  ".into()), extra_rules: vec![String::new()] };
        assert_eq!(build_system_prompt(&empty), build_system_prompt(&PersonaConfig::default()));
    }

    #[test]
    fn persona_context_and_rules() {
        let persona = PersonaConfig {
            context: Some("We fly indoors.".into()),
            extra_rules: vec!["Never fly higher than 200 cm.".into()],
        };
        let text = build_system_prompt(&persona);
        assert!(text.contains("helping me with drones. We fly indoors."));
        assert!(text.contains("Never fly higher than 200 cm."));
    }

    #[test]
    fn preamble_has_one_line_per_function() {
        let text = build_library_preamble(FUNCTIONS);
        assert_eq!(FUNCTIONS.len(), 7);
        assert_eq!(text.lines().count(), 7);
        let fly = text.lines().find(|l| l.starts_with("fly(")).unwrap();
        assert!(fly.contains("20") && fly.contains("500"));
        assert!(text.lines().any(|l| l.starts_with("barrier()")));
    }

    #[test]
    fn preamble_order_is_alphabetical() {
        let mut reversed = FUNCTIONS.to_vec();
        reversed.reverse();
        assert_eq!(build_library_preamble(&reversed), build_library_preamble(FUNCTIONS));
        let names: Vec<_> = build_library_preamble(FUNCTIONS)
            .lines()
            .map(|l| l.split('(').next().unwrap().to_string())
            .collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
    }

    #[test]
    fn preamble_and_validator_agree() {
        let preamble = build_library_preamble(FUNCTIONS);
        let named: Vec<&str> = preamble.lines().map(|l| l.split('(').next().unwrap()).collect();
        let roster = [DroneId::new(1).unwrap()];
        for name in &named {
            // Whatever the arity, a listed name never yields UnknownFunction.
            let result = dsl::parse_plan(&format!("takeoff(1)\n{name}(1)\nland(1)"), &roster);
            if let Err(PlanSourceError::Invalid(errs)) = result {
                assert!(!errs.iter().any(|e| matches!(e.kind, PlanErrorKind::UnknownFunction(_))), "{name}");
            }
        }
        for spec in FUNCTIONS {
            assert!(named.contains(&spec.name));
        }
    }

    #[test]
    fn conversation_shapes() {
        let bundle = PromptBundle::default().with_task("take off drone 1");
        let conv = render_conversation(&bundle);
        assert_eq!(conv.len(), 2);
        assert_eq!(conv[0].role, Role::System);
        assert!(conv[1].content.contains("Task: take off drone 1"));
        assert!(conv[1].content.contains("fly(drone, direction, distance_cm)"));

        let mut bundle = bundle;
        bundle.push_history(ChatMessage::new(Role::User, "take off drone 1").unwrap()).unwrap();
        bundle.push_history(ChatMessage::new(Role::Assistant, "```\ntakeoff(1)\n```").unwrap()).unwrap();
        bundle.set_task("now land it");
        let conv = render_conversation(&bundle);
        assert_eq!(conv.len(), 4);
        assert_eq!(conv[1].content, "take off drone 1");
        assert_eq!(conv[2].role, Role::Assistant);
        assert!(conv[3].content.ends_with("Task: now land it"));
        assert_eq!(conv.iter().filter(|m| m.role == Role::System).count(), 1);
        assert_eq!(render_conversation(&bundle), conv);
    }

    #[test]
    fn history_refuses_system_and_empty() {
        let mut bundle = PromptBundle::default();
        assert!(bundle.push_history(ChatMessage { role: Role::System, content: "x".into() }).is_err());
        assert!(ChatMessage::new(Role::User, " ").is_err());
        assert!(bundle.history().is_empty());
    }

    #[test]
    fn templates_must_keep_required_parts() {
        assert!(PromptTemplates::new("{{role}}", DEFAULT_USER_TEMPLATE).is_err());
        assert!(PromptTemplates::new(DEFAULT_SYSTEM_TEMPLATE, "Task: {{task}}").is_err());
        let custom = PromptTemplates::new(
            format!("{{{{role}}}} {RESTRICTION_SENTENCE}. Answer in a code fence."),
            "{{functions}}\n---\n{{task}}",
        )
        .unwrap();
        let bundle = PromptBundle::new(custom, &PersonaConfig::default()).with_task("land");
        let conv = render_conversation(&bundle);
        assert!(conv[0].content.starts_with(ROLE_SENTENCE));
        assert!(conv[1].content.ends_with("---\nland"));
    }

    #[test]
    fn templates_load_from_disk() {
        let dir = std::env::temp_dir().join(format!("llmfleet-tpl-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let user = dir.join("user.txt");
        std::fs::write(&user, "FUNCS:\n{{functions}}\nDO: {{task}}\n").unwrap();
        let t = PromptTemplates::load(None, Some(&user)).unwrap();
        assert!(t.render_user("a()", "b").ends_with("DO: b"));
        assert!(PromptTemplates::load(Some(&dir.join("missing.txt")), None).is_err());
        std::fs::remove_dir_all(dir).ok();
    }
}
