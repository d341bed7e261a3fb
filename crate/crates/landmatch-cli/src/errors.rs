//! Process exit-code policy: 1 for usage/config problems, 2 for missing or
//! malformed data, 3 for numeric failures.

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

/// A failed command: what to print and which code to exit with.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError { code: EXIT_USAGE, msg: msg.into() }
}

pub fn data(msg: impl Into<String>) -> CliError {
    CliError { code: EXIT_DATA, msg: msg.into() }
}

pub fn numeric(msg: impl Into<String>) -> CliError {
    CliError { code: EXIT_NUMERIC, msg: msg.into() }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<landmatch::Error> for CliError {
    fn from(e: landmatch::Error) -> Self {
        let code = match &e {
            landmatch::Error::NonFinite(_) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        CliError { code, msg: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError { code: EXIT_DATA, msg: format!("i/o error: {e}") }
    }
}
