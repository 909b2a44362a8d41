//! Replayable schedule files: one `index choice` pair per line.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::transport::loopback::Choice;

/// Renders a schedule, with optional `#` comment lines in front.
pub fn to_text(schedule: &[Choice], header: &[String]) -> String {
    let mut s = String::new();
    for h in header {
        let _ = writeln!(s, "# {h}");
    }
    for (i, c) in schedule.iter().enumerate() {
        let _ = writeln!(s, "{i} {c}");
    }
    s
}

pub fn parse(text: &str) -> Result<Vec<Choice>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (idx, rest) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| Error::Config(format!("schedule line {}: expected `index choice`", ln + 1)))?;
        let idx: usize = idx.parse().map_err(|_| Error::Config(format!("schedule line {}: bad index `{idx}`", ln + 1)))?;
        if idx != out.len() {
            return Err(Error::Config(format!("schedule line {}: index {idx}, expected {}", ln + 1, out.len())));
        }
        out.push(rest.trim().parse()?);
    }
    Ok(out)
}

pub fn write(path: &Path, schedule: &[Choice], header: &[String]) -> Result<()> {
    std::fs::write(path, to_text(schedule, header)).map_err(|e| Error::Io(e.to_string()))
}

pub fn read(path: &Path) -> Result<Vec<Choice>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(e.to_string()))?;
    parse(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::task::TaskId;

    #[test]
    fn roundtrip() {
        let s = vec![Choice::Run(0, TaskId { node: 0, seq: 1 }), Choice::Deliver(0, 1), Choice::Run(1, TaskId { node: 0, seq: 2 })];
        let text = to_text(&s, &["fault none".into()]);
        assert_eq!(parse(&text).unwrap(), s);
    }

    #[test]
    fn rejects_gaps() {
        assert!(parse("0 deliver 0 1\n2 deliver 1 0\n").is_err());
    }
}
