use std::process::ExitCode;

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Class {
    Validation,
    Numerical,
}

/// A failed run: exit 1 for rejected input, exit 2 for numerical failure.
#[derive(Debug, Clone, Serialize)]
pub struct Failure {
    pub class: Class,
    pub kind: String,
    pub message: String,
}

pub type CliResult<T> = std::result::Result<T, Failure>;

impl Failure {
    pub fn validation(kind: &str, message: &str) -> Self {
        Failure { class: Class::Validation, kind: kind.into(), message: message.into() }
    }

    pub fn exit_code(&self) -> u8 {
        match self.class {
            Class::Validation => 1,
            Class::Numerical => 2,
        }
    }

    /// Print one JSON line to stderr and return the exit code.
    pub fn report(&self) -> ExitCode {
        let line = serde_json::json!({ "error": self });
        eprintln!("{line}");
        ExitCode::from(self.exit_code())
    }
}

/// Name of the enum variant behind an error's `Debug` output.
fn variant_name(e: &tumorcal::Error) -> String {
    let dbg = format!("{e:?}");
    dbg.split(|c: char| !c.is_alphanumeric()).next().unwrap_or("Error").to_string()
}

impl From<tumorcal::Error> for Failure {
    fn from(e: tumorcal::Error) -> Self {
        let class = if e.is_numerical() { Class::Numerical } else { Class::Validation };
        Failure { class, kind: variant_name(&e), message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::validation("Io", &e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::validation("Json", &e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::validation("Csv", &e.to_string())
    }
}
