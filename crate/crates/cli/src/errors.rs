use std::fmt;

use depsev::Error;

/// A problem with the user's input or with missing upstream artifacts, as
/// opposed to a failure while running. Maps to exit code 1.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub fn exit_code(err: &anyhow::Error) -> i32 {
    let validation = err.chain().any(|cause| {
        if cause.is::<Invalid>() || cause.is::<toml::de::Error>() {
            return true;
        }
        matches!(
            cause.downcast_ref::<Error>(),
            Some(
                Error::Schema(_)
                    | Error::Validation(_)
                    | Error::EmptyCorpus
                    | Error::Argument(_)
                    | Error::Config(_)
                    | Error::Plan(_)
                    | Error::StaleCache { .. }
            )
        )
    });
    if validation {
        EXIT_INVALID
    } else {
        EXIT_RUNTIME
    }
}
