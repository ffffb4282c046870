use std::io;
use std::path::{Path, PathBuf};

use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),

    #[error("malformed config: {0}")]
    Config(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error(transparent)]
    Core(#[from] osp_core::Error),

    #[error("{0}")]
    Other(String),
}

impl HarnessError {
    /// Maps `NotFound` to [`HarnessError::MissingFile`].
    pub fn from_io(e: io::Error, path: &Path) -> Self {
        if e.kind() == io::ErrorKind::NotFound {
            Self::MissingFile(path.to_path_buf())
        } else {
            Self::Core(e.into())
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::UnknownStrategy(_) => 3,
            Self::Config(_) => 4,
            Self::MissingFile(_) => 5,
            Self::Core(_) => 6,
            Self::Other(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::UnknownStrategy(_) => "unknown_strategy",
            Self::Config(_) => "malformed_config",
            Self::MissingFile(_) => "missing_file",
            Self::Core(_) => "data_error",
            Self::Other(_) => "error",
        }
    }

    /// One-line JSON for stderr.
    pub fn to_json(&self) -> String {
        json!({
            "error": self.kind(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        })
        .to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_are_distinct() {
        let errs = [
            HarnessError::UnknownStrategy("x".into()),
            HarnessError::Config("x".into()),
            HarnessError::MissingFile("a".into()),
            HarnessError::Core(osp_core::Error::DegenerateData),
            HarnessError::Other("x".into()),
        ];
        let mut codes: Vec<i32> = errs.iter().map(HarnessError::exit_code).collect();
        codes.sort();
        codes.dedup();
        assert_eq!(codes.len(), errs.len());
        assert!(!codes.contains(&0) && !codes.contains(&2));
    }

    #[test]
    fn json_shape() {
        let v: serde_json::Value =
            serde_json::from_str(&HarnessError::UnknownStrategy("foo".into()).to_json()).unwrap();
        assert_eq!(v["error"], "unknown_strategy");
        assert_eq!(v["exit_code"], 3);
        assert_eq!(v["message"], "unknown strategy `foo`");
    }

    #[test]
    fn not_found_maps_to_missing() {
        let e = HarnessError::from_io(io::Error::from(io::ErrorKind::NotFound), Path::new("q"));
        assert_eq!(e.exit_code(), 5);
    }
}
