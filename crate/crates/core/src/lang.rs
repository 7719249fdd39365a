use std::fmt;

use serde::{Deserialize, Serialize};

/// Language identifier such as `en` or `pt_br`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Lang(String);

impl Lang {
    pub fn new(code: impl Into<String>) -> Self {
        Lang(code.into())
    }

    pub fn english() -> Self {
        Lang("en".into())
    }

    pub fn is_english(&self) -> bool {
        self.0 == "en"
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// The vocabulary token selecting this language as a target.
    pub fn code_token(&self) -> String {
        format!("__{}__", self.0)
    }
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for Lang {
    fn from(s: &str) -> Self {
        Lang(s.to_string())
    }
}

/// Translation direction `src-tgt`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Direction {
    pub src: Lang,
    pub tgt: Lang,
}

impl Direction {
    pub fn new(src: impl Into<Lang>, tgt: impl Into<Lang>) -> Self {
        Direction { src: src.into(), tgt: tgt.into() }
    }

    pub fn reversed(&self) -> Self {
        Direction { src: self.tgt.clone(), tgt: self.src.clone() }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let (a, b) = s.split_once('-')?;
        if a.is_empty() || b.is_empty() || a == b {
            return None;
        }
        Some(Direction::new(a, b))
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.src, self.tgt)
    }
}
