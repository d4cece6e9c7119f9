//! The skill-call language emitted by the converter.
//!
//! ```text
//! call   := "vlamove" "(" "pick" "=" STRING "," "place" "=" STRING ")"
//!         | "done" "(" ")"
//! STRING := '"' [^"]+ '"'
//! ```
//!
//! Whitespace is allowed between tokens and around the call. Anything else
//! is a [`SyntaxError`] carrying the byte offset of the offending input.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "skill", rename_all = "snake_case")]
pub enum SkillCall {
    Vlamove { pick: String, place: String },
    Done,
}

impl fmt::Display for SkillCall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SkillCall::Vlamove { pick, place } => write!(f, "vlamove(pick=\"{pick}\", place=\"{place}\")"),
            SkillCall::Done => f.write_str("done()"),
        }
    }
}

/// Canonical text of a call; `parse_skill_call(&format_skill_call(c)) == Ok(c)`.
pub fn format_skill_call(call: &SkillCall) -> String {
    call.to_string()
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("syntax error at byte {position}: expected {expected}, found {found}")]
pub struct SyntaxError {
    pub position: usize,
    pub expected: String,
    pub found: String,
}

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start();
        self.pos = self.src.len() - trimmed.len();
    }

    fn found(&self) -> String {
        match self.rest().chars().next() {
            None => "end of input".into(),
            Some(c) => format!("{c:?}"),
        }
    }

    fn error(&self, expected: &str) -> SyntaxError {
        SyntaxError {
            position: self.pos,
            expected: expected.to_string(),
            found: self.found(),
        }
    }

    fn expect(&mut self, token: &str) -> Result<(), SyntaxError> {
        self.skip_ws();
        if self.rest().starts_with(token) {
            self.pos += token.len();
            Ok(())
        } else {
            Err(self.error(&format!("`{token}`")))
        }
    }

    fn ident(&mut self) -> Result<&'a str, SyntaxError> {
        self.skip_ws();
        let rest = self.rest();
        let len = rest
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(rest.len());
        if len == 0 {
            return Err(self.error("skill name"));
        }
        self.pos += len;
        Ok(&rest[..len])
    }

    fn string(&mut self) -> Result<String, SyntaxError> {
        self.skip_ws();
        if !self.rest().starts_with('"') {
            return Err(self.error("string literal"));
        }
        let open = self.pos;
        let body = &self.rest()[1..];
        let Some(end) = body.find('"') else {
            return Err(SyntaxError {
                position: open,
                expected: "closing `\"`".into(),
                found: "end of input".into(),
            });
        };
        if end == 0 {
            return Err(SyntaxError {
                position: open,
                expected: "non-empty string".into(),
                found: "\"\"".into(),
            });
        }
        let s = body[..end].to_string();
        self.pos += end + 2;
        Ok(s)
    }
}

pub fn parse_skill_call(text: &str) -> Result<SkillCall, SyntaxError> {
    let mut c = Cursor { src: text, pos: 0 };
    let start = {
        c.skip_ws();
        c.pos
    };
    let call = match c.ident()? {
        "vlamove" => {
            c.expect("(")?;
            c.expect("pick")?;
            c.expect("=")?;
            let pick = c.string()?;
            c.expect(",")?;
            c.expect("place")?;
            c.expect("=")?;
            let place = c.string()?;
            c.expect(")")?;
            SkillCall::Vlamove { pick, place }
        }
        "done" => {
            c.expect("(")?;
            c.expect(")")?;
            SkillCall::Done
        }
        other => {
            return Err(SyntaxError {
                position: start,
                expected: "`vlamove` or `done`".into(),
                found: format!("`{other}`"),
            })
        }
    };
    c.skip_ws();
    if !c.rest().is_empty() {
        return Err(c.error("end of input"));
    }
    Ok(call)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_vlamove() {
        assert_eq!(
            parse_skill_call(r#"vlamove(pick="red block", place="blue bowl")"#).unwrap(),
            SkillCall::Vlamove {
                pick: "red block".into(),
                place: "blue bowl".into()
            }
        );
    }

    #[test]
    fn unquoted_argument_is_rejected_at_its_offset() {
        let e = parse_skill_call(r#"vlamove(pick=red block, place="box")"#).unwrap_err();
        assert_eq!(e.position, 13);
        assert_eq!(e.expected, "string literal");
    }

    #[test]
    fn whitespace_is_tolerated() {
        assert_eq!(parse_skill_call("  done( )").unwrap(), SkillCall::Done);
        assert_eq!(
            parse_skill_call(" vlamove ( pick = \"a\" ,\n place=\"b\" ) \n").unwrap(),
            SkillCall::Vlamove {
                pick: "a".into(),
                place: "b".into()
            }
        );
    }

    #[test]
    fn error_cases() {
        let cases = [
            ("", 0, "skill name"),
            ("grab()", 0, "`vlamove` or `done`"),
            ("done(", 5, "`)`"),
            ("done() x", 7, "end of input"),
            (r#"vlamove(pick="", place="b")"#, 13, "non-empty string"),
            (r#"vlamove(pick="a, place="b")"#, 24, "`,`"),
            (r#"vlamove(place="a", pick="b")"#, 8, "`pick`"),
            (r#"vlamove(pick="a" place="b")"#, 17, "`,`"),
            (r#"vlamove(pick="a", place="b"#, 24, "closing `\"`"),
        ];
        for (src, pos, expected) in cases {
            let e = parse_skill_call(src).unwrap_err();
            assert_eq!((e.position, e.expected.as_str()), (pos, expected), "{src:?}: {e}");
        }
    }

    #[test]
    fn format_round_trips() {
        for c in [
            SkillCall::Done,
            SkillCall::Vlamove {
                pick: "apple".into(),
                place: "red plate".into(),
            },
        ] {
            assert_eq!(parse_skill_call(&format_skill_call(&c)).unwrap(), c);
        }
    }
}
