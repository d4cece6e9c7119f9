//! Prompt profiles and placeholder rendering.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{canonical_json, Scene, SimEvent};

/// Placeholders a template may use.
pub const PLACEHOLDERS: [&str; 5] = ["instruction", "scene_evidence", "examples", "failure_context", "goal_state"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("unknown placeholder `{{{name}}}` at byte {position}")]
    UnknownPlaceholder { name: String, position: usize },
    #[error("unterminated placeholder at byte {0}")]
    Unterminated(usize),
    #[error("cannot read prompt file {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    Prompted,
    Unprompted,
}

/// Templates for the three stages. Profiles differ only in their examples.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptProfile {
    pub kind: ProfileKind,
    pub planner: String,
    pub converter: String,
    pub evaluator: String,
    pub planner_examples: String,
    pub converter_examples: String,
}

impl PromptProfile {
    pub fn builtin(kind: ProfileKind) -> Self {
        PromptProfile {
            kind,
            planner: include_str!("../../prompts/planner.txt").to_string(),
            converter: include_str!("../../prompts/converter.txt").to_string(),
            evaluator: include_str!("../../prompts/evaluator.txt").to_string(),
            planner_examples: match kind {
                ProfileKind::Prompted => include_str!("../../prompts/examples_prompted.txt"),
                ProfileKind::Unprompted => include_str!("../../prompts/examples_unprompted.txt"),
            }
            .to_string(),
            converter_examples: include_str!("../../prompts/examples_converter.txt").to_string(),
        }
    }

    /// Loads the same file layout as the built-in profile from `dir`.
    pub fn load_dir(dir: &Path, kind: ProfileKind) -> Result<Self, PromptError> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| PromptError::Io {
                path: p.display().to_string(),
                message: e.to_string(),
            })
        };
        let examples = match kind {
            ProfileKind::Prompted => "examples_prompted.txt",
            ProfileKind::Unprompted => "examples_unprompted.txt",
        };
        let p = PromptProfile {
            kind,
            planner: read("planner.txt")?,
            converter: read("converter.txt")?,
            evaluator: read("evaluator.txt")?,
            planner_examples: read(examples)?,
            converter_examples: read("examples_converter.txt")?,
        };
        for t in [&p.planner, &p.converter, &p.evaluator] {
            render(t, &BTreeMap::new())?;
        }
        Ok(p)
    }
}

/// Substitutes `{name}` placeholders. `{{` and `}}` are literal braces.
/// Known placeholders without a value render as empty text.
pub fn render(template: &str, vars: &BTreeMap<&str, String>) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len());
    let bytes = template.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => {
                out.push('{');
                i += 2;
            }
            b'}' if bytes.get(i + 1) == Some(&b'}') => {
                out.push('}');
                i += 2;
            }
            b'{' => {
                let close = template[i..].find('}').ok_or(PromptError::Unterminated(i))?;
                let name = &template[i + 1..i + close];
                if !PLACEHOLDERS.contains(&name) {
                    return Err(PromptError::UnknownPlaceholder {
                        name: name.to_string(),
                        position: i,
                    });
                }
                if let Some(v) = vars.get(name) {
                    out.push_str(v);
                }
                i += close + 1;
            }
            _ => {
                let next = template[i..]
                    .find(['{', '}'])
                    .map_or(template.len(), |k| i + k);
                let next = if next == i { i + 1 } else { next };
                out.push_str(&template[i..next]);
                i = next;
            }
        }
    }
    Ok(out)
}

/// Scene evidence block: the canonical snapshot in a fenced JSON block.
pub fn scene_evidence(scene: &Scene) -> String {
    format!(
        "Current scene (top-down snapshot):\n```json\n{}\n```\n",
        canonical_json(scene).expect("scenes serialize")
    )
}

/// First fenced JSON block of `text`, parsed as a scene.
pub fn extract_scene(text: &str) -> Option<Scene> {
    let start = text.find("```json")? + "```json".len();
    let end = text[start..].find("```")? + start;
    serde_json::from_str(text[start..end].trim()).ok()
}

/// Context appended to the planner prompt when re-planning.
pub fn failure_context(reason: &str, recent: &[SimEvent]) -> String {
    let mut s = format!("The previous attempt failed.\nEvaluator reason: {reason}\nRecent events:\n");
    if recent.is_empty() {
        s.push_str("- none\n");
    }
    for e in recent {
        s.push_str(&format!("- {}\n", e.summary()));
    }
    s.push_str("Plan again from the current scene.\n");
    s
}

/// Value of the last line starting with `prefix`.
pub fn last_field<'a>(text: &'a str, prefix: &str) -> Option<&'a str> {
    text.lines().rev().find_map(|l| l.trim_start().strip_prefix(prefix)).map(str::trim)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_known_placeholders_and_escapes() {
        let vars = BTreeMap::from([("instruction", "stack them".to_string())]);
        assert_eq!(
            render("{{x}} {instruction}|{examples}|", &vars).unwrap(),
            "{x} stack them||"
        );
    }

    #[test]
    fn unknown_placeholder_is_an_error() {
        assert_eq!(
            render("a {nope} b", &BTreeMap::new()),
            Err(PromptError::UnknownPlaceholder {
                name: "nope".into(),
                position: 2
            })
        );
        assert_eq!(render("a {instr", &BTreeMap::new()), Err(PromptError::Unterminated(2)));
    }

    #[test]
    fn builtin_profiles_differ_only_in_examples() {
        let p = PromptProfile::builtin(ProfileKind::Prompted);
        let u = PromptProfile::builtin(ProfileKind::Unprompted);
        assert_eq!(p.planner, u.planner);
        assert_eq!(p.converter, u.converter);
        assert_eq!(p.evaluator, u.evaluator);
        assert_eq!(p.converter_examples, u.converter_examples);
        assert_ne!(p.planner_examples, u.planner_examples);
        for t in [&p.planner, &p.converter, &p.evaluator] {
            render(t, &BTreeMap::new()).unwrap();
        }
    }

    #[test]
    fn load_dir_matches_builtin() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("prompts");
        let p = PromptProfile::load_dir(&dir, ProfileKind::Unprompted).unwrap();
        assert_eq!(p, PromptProfile::builtin(ProfileKind::Unprompted));
    }

    #[test]
    fn last_field_picks_final_occurrence() {
        let t = "Instruction: example\n1. x\nInstruction:  real one \n";
        assert_eq!(last_field(t, "Instruction:"), Some("real one"));
    }
}
