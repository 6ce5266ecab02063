//! Run reports: an ordered key = value block that prints as a table and
//! writes to a `--report` path.
//!
//! Everything a report file contains is derived from the seed and the
//! inputs, so a repeated seeded run produces a byte-identical file; wall
//! clock timings go to stdout only, except in the bench report whose whole
//! point is timing.

use anyhow::Result;
use std::path::Path;

#[derive(Debug, Clone, Default)]
pub struct Report {
    lines: Vec<(String, String)>,
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.lines.push((key.into(), value.to_string()));
    }

    pub fn set_acc(&mut self, key: impl Into<String>, value: f64) {
        self.lines.push((key.into(), format!("{value:.4}")));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.lines
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.lines {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Human-readable two-column table.
    pub fn print(&self) {
        let width = self.lines.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        for (k, v) in &self.lines {
            println!("  {k:<width$}  {v}");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_is_ordered_and_stable() {
        let mut r = Report::new();
        r.set("b", 2);
        r.set("a", 1);
        assert_eq!(r.to_text(), "b = 2\na = 1\n");
        assert_eq!(r.get("a"), Some("1"));
    }
}
