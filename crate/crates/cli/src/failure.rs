use std::fmt;

use interlock::Error;

/// Why a command stopped, which fixes its exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config values or input files. Exit 2.
    Config(String),
    /// Anything that went wrong after the inputs were accepted. Exit 1.
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Config(_) => 2,
        }
    }

    pub fn config(m: impl fmt::Display) -> Self {
        Failure::Config(m.to_string())
    }

    pub fn runtime(m: impl fmt::Display) -> Self {
        Failure::Runtime(m.to_string())
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;
