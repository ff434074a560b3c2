//! Line-oriented check reports: `name: status: value: tolerance`.

use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    /// Informational line; never affects the exit code.
    Info,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Info => "INFO",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Line {
    pub name: String,
    pub status: Status,
    pub value: String,
    pub tolerance: String,
}

impl fmt::Display for Line {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}: {}: {}", self.name, self.status, self.value, self.tolerance)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub lines: Vec<Line>,
}

impl Report {
    pub fn check(&mut self, name: impl Into<String>, pass: bool, value: impl fmt::Display, tolerance: impl fmt::Display) {
        self.lines.push(Line {
            name: name.into(),
            status: if pass { Status::Pass } else { Status::Fail },
            value: value.to_string(),
            tolerance: tolerance.to_string(),
        });
    }

    pub fn info(&mut self, name: impl Into<String>, value: impl fmt::Display) {
        self.lines.push(Line {
            name: name.into(),
            status: Status::Info,
            value: value.to_string(),
            tolerance: "-".into(),
        });
    }

    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.status != Status::Fail)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.lines {
            writeln!(f, "{l}")?;
        }
        Ok(())
    }
}

/// Compact scientific notation for errors.
pub fn sci(v: f64) -> String {
    format!("{v:.3e}")
}
