//! Model-free reference predictors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Identity: the next frame is predicted to equal the input frame.
    LastFrame,
    Zero,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 2] = [BaselineKind::LastFrame, BaselineKind::Zero];

    /// Row label used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            BaselineKind::LastFrame => "Baseline t-1",
            BaselineKind::Zero => "Baseline zero",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineKind::LastFrame => "last_frame",
            BaselineKind::Zero => "zero",
        })
    }
}

impl FromStr for BaselineKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "last_frame" | "last-frame" | "t-1" => Ok(BaselineKind::LastFrame),
            "zero" => Ok(BaselineKind::Zero),
            other => Err(crate::Error::Config(format!("unknown baseline {other:?}"))),
        }
    }
}

pub fn baseline_predict(kind: BaselineKind, frame: &[f64]) -> Vec<f64> {
    match kind {
        BaselineKind::LastFrame => frame.to_vec(),
        BaselineKind::Zero => vec![0.0; frame.len()],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predictions() {
        let f = [0.5, -1.0, 2.0];
        assert_eq!(baseline_predict(BaselineKind::LastFrame, &f), f.to_vec());
        assert_eq!(baseline_predict(BaselineKind::Zero, &f), vec![0.0; 3]);
    }

    #[test]
    fn names_round_trip() {
        for k in BaselineKind::ALL {
            assert_eq!(k.to_string().parse::<BaselineKind>().unwrap(), k);
        }
        assert!("mean".parse::<BaselineKind>().is_err());
    }
}
