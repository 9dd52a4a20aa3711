// SPDX-License-Identifier: MIT OR Apache-2.0

/// A problem with the command line or its inputs; exits with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// Exit status for a failed command: 2 for bad input, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<rotatelab::RotateError>() {
            return match e {
                rotatelab::RotateError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
                e if e.is_input_error() => 2,
                _ => 1,
            };
        }
    }
    1
}

/// The error chain joined by `: `, skipping causes already quoted by their parent.
pub fn render(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if out.contains(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out
}
