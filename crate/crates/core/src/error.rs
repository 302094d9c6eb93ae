use std::fmt;
use std::path::PathBuf;

/// Which half of a coupled particle system a diagnostic refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Fine,
    Coarse,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Branch::Fine => f.write_str("fine"),
            Branch::Coarse => f.write_str("coarse"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("all particle weights vanished at step {step}{}", branch_suffix(.branch))]
    Degeneracy { step: usize, branch: Option<Branch> },

    #[error("{}: line {line}: {msg}", .path.display())]
    Data {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn branch_suffix(branch: &Option<Branch>) -> String {
    match branch {
        Some(b) => format!(" ({b} branch)"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
