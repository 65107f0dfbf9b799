use std::fmt;

use tokenprint::detector::DetectError;
use tokenprint::evalharness::EvalError;
use tokenprint::fingerprint::FingerprintError;
use tokenprint::tensorio::TensorIoError;
use tokenprint::toylm::LmError;
use tokenprint::verifier::VerifyError;

/// Exit code 2: the inputs were missing, malformed or inconsistent.
/// Exit code 1: everything else.
#[derive(Debug)]
pub enum CliError {
    Input(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Internal(_) => 1,
        }
    }

    pub fn input(message: impl fmt::Display) -> Self {
        CliError::Input(message.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl From<TensorIoError> for CliError {
    fn from(e: TensorIoError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<DetectError> for CliError {
    fn from(e: DetectError) -> Self {
        match e {
            DetectError::NoConvergence { .. } => CliError::Internal(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<FingerprintError> for CliError {
    fn from(e: FingerprintError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<LmError> for CliError {
    fn from(e: LmError) -> Self {
        match e {
            LmError::MaskLength { .. } | LmError::NothingToScore | LmError::EmptyRows => {
                CliError::Internal(e.to_string())
            }
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<VerifyError> for CliError {
    fn from(e: VerifyError) -> Self {
        match e {
            VerifyError::Transport(_) | VerifyError::ResponseUnparsable(_) => {
                CliError::Internal(e.to_string())
            }
            VerifyError::Model(e) => e.into(),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::InvalidArgument(m) => CliError::Input(m),
            EvalError::NoSuccessfulTrials => CliError::Internal(e.to_string()),
            EvalError::Verify(e) => e.into(),
            EvalError::Model(e) => e.into(),
            EvalError::Detect(e) => e.into(),
            EvalError::Fingerprint(e) => e.into(),
            EvalError::Io(e) => e.into(),
        }
    }
}
