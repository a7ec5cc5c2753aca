use std::io::ErrorKind;

use propscale::datapipe::DataError;
use propscale::harness::HarnessError;
use propscale::model::ModelError;
use propscale::simkit::SimError;

/// Failure classes, each with its own process exit code. Code 2 is left to
/// the argument parser's usage errors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Io,
    MissingFile,
    Schema,
    Divergence,
    Config,
    OracleViolation,
    Corrupt,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            Self::Io => 1,
            Self::MissingFile => 3,
            Self::Schema => 4,
            Self::Divergence => 5,
            Self::Config => 6,
            Self::OracleViolation => 7,
            Self::Corrupt => 8,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Self::Io => "io",
            Self::MissingFile => "missing_file",
            Self::Schema => "schema_mismatch",
            Self::Divergence => "divergence",
            Self::Config => "invalid_config",
            Self::OracleViolation => "oracle_violation",
            Self::Corrupt => "corrupt_data",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorClass,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ErrorClass, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ErrorClass::Config, message)
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }

    pub fn with_context(mut self, context: &str) -> Self {
        self.message = format!("{context}: {}", self.message);
        self
    }

    /// Single-line JSON object for stderr.
    pub fn to_line(&self) -> String {
        serde_json::json!({ "error": self.kind.tag(), "code": self.exit_code(), "message": self.message }).to_string()
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.kind.tag(), self.message)
    }
}

impl std::error::Error for CliError {}

fn io_kind(e: &std::io::Error) -> ErrorClass {
    if e.kind() == ErrorKind::NotFound {
        ErrorClass::MissingFile
    } else {
        ErrorClass::Io
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new(io_kind(&e), e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::new(ErrorClass::Corrupt, e.to_string())
    }
}

fn sim_kind(e: &SimError) -> ErrorClass {
    match e {
        SimError::InvalidConfig(_) | SimError::EdgeBudget { .. } => ErrorClass::Config,
        SimError::Io(io) => io_kind(io),
        _ => ErrorClass::Corrupt,
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        Self::new(sim_kind(&e), e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let kind = match &e {
            DataError::Missing { .. } => ErrorClass::MissingFile,
            DataError::Schema { .. } => ErrorClass::Schema,
            DataError::InvalidConfig(_) | DataError::TooFewItems { .. } => ErrorClass::Config,
            DataError::Io(io) => io_kind(io),
            DataError::Sim(s) => sim_kind(s),
            _ => ErrorClass::Corrupt,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let kind = match &e {
            ModelError::Config(_) => ErrorClass::Config,
            _ => ErrorClass::Corrupt,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_) | HarnessError::EmptySplit(_) => Self::config(e.to_string()),
            HarnessError::Diverged { .. } => Self::new(ErrorClass::Divergence, e.to_string()),
            HarnessError::Model(m) => m.into(),
            HarnessError::Data(d) => d.into(),
            HarnessError::Sim(s) => s.into(),
            HarnessError::Io(io) => io.into(),
            HarnessError::Json(j) => j.into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_are_distinct_and_avoid_usage() {
        let all = [
            ErrorClass::Io,
            ErrorClass::MissingFile,
            ErrorClass::Schema,
            ErrorClass::Divergence,
            ErrorClass::Config,
            ErrorClass::OracleViolation,
            ErrorClass::Corrupt,
        ];
        let mut codes: Vec<i32> = all.iter().map(|k| k.exit_code()).collect();
        codes.sort_unstable();
        codes.dedup();
        assert_eq!(codes.len(), all.len());
        assert!(!codes.contains(&0) && !codes.contains(&2));
    }

    #[test]
    fn line_is_single_json_object() {
        let e = CliError::from(DataError::Schema { found: 1, expected: 2 });
        let line = e.to_line();
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["error"], "schema_mismatch");
        assert_eq!(v["code"], 4);
    }

    #[test]
    fn divergence_maps_through_harness() {
        let e = CliError::from(HarnessError::Diverged { epoch: 3, item: 1, start: 0 });
        assert_eq!(e.kind, ErrorClass::Divergence);
    }
}
