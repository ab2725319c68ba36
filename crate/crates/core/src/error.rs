use std::io;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure surfaced by the engine. Each variant maps to a stable wire
/// code (see [`Error::code`]) so errors survive a round trip over the framed
/// protocol and can be compared inside transaction logs.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("not found")]
    NotFound,
    #[error("already exists")]
    Exists,
    #[error("not a directory")]
    NotADirectory,
    #[error("is a directory")]
    IsADirectory,
    #[error("directory not empty")]
    DirectoryNotEmpty,
    #[error("permission denied")]
    PermissionDenied,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("range out of bounds")]
    OutOfRange,
    #[error("entry exceeds region bounds")]
    EntryOutOfBounds,
    #[error("stored value is not a list")]
    TypeMismatch,
    #[error("transaction conflict")]
    Conflict,
    #[error("transaction already closed")]
    UseAfterClose,
    #[error("stale in-use list scan id")]
    StaleScan,
    #[error("slice pointer names a different server")]
    WrongServer,
    #[error("storage server out of space")]
    OutOfSpace,
    #[error("i/o failure: {0}")]
    Io(String),
    #[error("server unavailable: {0}")]
    Unavailable(String),
    #[error("not enough live servers for placement")]
    InsufficientServers,
    #[error("unknown server")]
    UnknownServer,
    #[error("could not write all replicas")]
    ReplicaWriteFailed,
    #[error("transaction aborted: replay observed a different outcome")]
    DivergenceAbort,
    #[error("transaction aborted: retry limit reached")]
    RetryExhausted,
    #[error("corrupt data: {0}")]
    Corrupt(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("verification failed: {0}")]
    VerificationFailed(String),
}

impl Error {
    pub fn code(&self) -> u16 {
        match self {
            Error::NotFound => 1,
            Error::Exists => 2,
            Error::NotADirectory => 3,
            Error::IsADirectory => 4,
            Error::DirectoryNotEmpty => 5,
            Error::PermissionDenied => 6,
            Error::InvalidArgument(_) => 7,
            Error::OutOfRange => 8,
            Error::EntryOutOfBounds => 9,
            Error::TypeMismatch => 10,
            Error::Conflict => 11,
            Error::UseAfterClose => 12,
            Error::StaleScan => 13,
            Error::WrongServer => 14,
            Error::OutOfSpace => 15,
            Error::Io(_) => 16,
            Error::Unavailable(_) => 17,
            Error::InsufficientServers => 18,
            Error::UnknownServer => 19,
            Error::ReplicaWriteFailed => 20,
            Error::DivergenceAbort => 21,
            Error::RetryExhausted => 22,
            Error::Corrupt(_) => 23,
            Error::Protocol(_) => 24,
            Error::VerificationFailed(_) => 25,
        }
    }

    pub fn from_code(code: u16, msg: String) -> Error {
        match code {
            1 => Error::NotFound,
            2 => Error::Exists,
            3 => Error::NotADirectory,
            4 => Error::IsADirectory,
            5 => Error::DirectoryNotEmpty,
            6 => Error::PermissionDenied,
            7 => Error::InvalidArgument(msg),
            8 => Error::OutOfRange,
            9 => Error::EntryOutOfBounds,
            10 => Error::TypeMismatch,
            11 => Error::Conflict,
            12 => Error::UseAfterClose,
            13 => Error::StaleScan,
            14 => Error::WrongServer,
            15 => Error::OutOfSpace,
            16 => Error::Io(msg),
            17 => Error::Unavailable(msg),
            18 => Error::InsufficientServers,
            19 => Error::UnknownServer,
            20 => Error::ReplicaWriteFailed,
            21 => Error::DivergenceAbort,
            22 => Error::RetryExhausted,
            23 => Error::Corrupt(msg),
            25 => Error::VerificationFailed(msg),
            _ => Error::Protocol(msg),
        }
    }

    /// Errors that may succeed against another replica or after a retry.
    pub fn is_transient(&self) -> bool {
        matches!(self, Error::Unavailable(_) | Error::Io(_))
    }

    pub fn invalid(msg: impl Into<String>) -> Error {
        Error::InvalidArgument(msg.into())
    }

    pub fn corrupt(msg: impl Into<String>) -> Error {
        Error::Corrupt(msg.into())
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Clone for Error {
    fn clone(&self) -> Self {
        Error::from_code(self.code(), self.message())
    }
}

impl PartialEq for Error {
    fn eq(&self, other: &Self) -> bool {
        self.code() == other.code()
    }
}

impl Eq for Error {}

impl Error {
    fn message(&self) -> String {
        match self {
            Error::InvalidArgument(m)
            | Error::Io(m)
            | Error::Unavailable(m)
            | Error::Corrupt(m)
            | Error::Protocol(m)
            | Error::VerificationFailed(m) => m.clone(),
            _ => String::new(),
        }
    }
}
