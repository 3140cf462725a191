use std::fmt;

/// A failed command and the process exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    /// Unreadable or malformed input image, or a failed write.
    Io(String),
    /// Unparseable or invalid model configuration.
    Config(String),
    /// Cell size does not divide the map.
    Geometry(String),
    /// A numeric check exceeded its tolerance.
    Threshold(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Config(_) => 2,
            Failure::Geometry(_) => 3,
            Failure::Threshold(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Io(m) | Failure::Config(m) | Failure::Geometry(m) | Failure::Threshold(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

pub type Outcome = Result<(), Failure>;
