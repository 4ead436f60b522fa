//! Command-line frontend for `atlasfuse`.
//!
//! Every command writes its outputs atomically and finishes with a
//! `run_manifest.json` in its output directory.

pub mod commands;
pub mod config;

use atlasfuse::Error;

/// Process exit status for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFiniteLoss { .. } => 3,
        Error::EmptyMask => 4,
        Error::Io(_)
        | Error::Json(_)
        | Error::Format { .. }
        | Error::InvalidParams(_)
        | Error::InvalidData(_)
        | Error::NOutOfRange { .. }
        | Error::LengthMismatch(..)
        | Error::DimensionMismatch { .. }
        | Error::SliceCountMismatch { .. }
        | Error::TooFewSlices(_)
        | Error::DegenerateTarget { .. }
        | Error::ConstantImage => 2,
        Error::AllZeroOverlap | Error::EmptyReference => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use commands::parse_counts;

    #[test]
    fn exit_codes() {
        let nonfinite = Error::NonFiniteLoss {
            level: 0,
            iteration: 3,
            trace: Vec::new(),
        };
        assert_eq!(exit_code(&nonfinite), 3);
        assert_eq!(exit_code(&Error::EmptyMask), 4);
        assert_eq!(exit_code(&Error::TooFewSlices(2)), 2);
        assert_eq!(exit_code(&Error::AllZeroOverlap), 1);
    }

    #[test]
    fn count_lists() {
        assert_eq!(parse_counts("2..5").unwrap(), vec![2, 3, 4, 5]);
        assert_eq!(parse_counts("2,4, 6").unwrap(), vec![2, 4, 6]);
        assert_eq!(parse_counts("2..=3,8").unwrap(), vec![2, 3, 8]);
        assert!(parse_counts("5..2").is_err());
        assert!(parse_counts("").is_err());
        assert!(parse_counts("x").is_err());
    }
}
