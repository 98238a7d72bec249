//! Library side of the `drp` command: configuration, experiment
//! orchestration and subcommands.

pub mod commands;
pub mod config;
pub mod experiment;

use drp_core::Error;

pub const EXIT_OK: i32 = 0;
/// Internal failures and failed checks.
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_UNDEFINED_METRIC: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::UndefinedMetric(_) => EXIT_UNDEFINED_METRIC,
        Error::Divergence { .. } | Error::NonFinite(_) => EXIT_DIVERGENCE,
        Error::Config(_)
        | Error::Vocabulary { .. }
        | Error::Parse { .. }
        | Error::Schema { .. }
        | Error::Checkpoint(_)
        | Error::Io { .. }
        | Error::Json(_)
        | Error::Csv(_)
        | Error::Generation(_)
        | Error::Contradiction { .. }
        | Error::Domain(_) => EXIT_INPUT,
        Error::Dimension { .. } | Error::Degenerate { .. } | Error::Determinism(_) => EXIT_FAILURE,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_contract() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_INPUT);
        assert_eq!(
            exit_code(&Error::UndefinedMetric("one class".into())),
            EXIT_UNDEFINED_METRIC
        );
        let div = Error::Divergence {
            step: 3,
            reason: "nan".into(),
        };
        assert_eq!(exit_code(&div), EXIT_DIVERGENCE);
        assert_eq!(exit_code(&Error::NonFinite("loss")), EXIT_DIVERGENCE);
    }
}
