use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// One of the two image domains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainId {
    A,
    B,
}

impl DomainId {
    pub const ALL: [DomainId; 2] = [DomainId::A, DomainId::B];

    pub fn other(self) -> DomainId {
        match self {
            DomainId::A => DomainId::B,
            DomainId::B => DomainId::A,
        }
    }

    /// Lowercase key used in parameter names and paths.
    pub fn key(self) -> &'static str {
        match self {
            DomainId::A => "a",
            DomainId::B => "b",
        }
    }

    pub fn index(self) -> usize {
        match self {
            DomainId::A => 0,
            DomainId::B => 1,
        }
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DomainId::A => "A",
            DomainId::B => "B",
        })
    }
}

impl FromStr for DomainId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(DomainId::A),
            "b" => Ok(DomainId::B),
            _ => Err(Error::UnknownDomain(s.to_string())),
        }
    }
}

/// Translation directions in the order `A→A, A→B, B→A, B→B`.
pub const DIRECTIONS: [(DomainId, DomainId); 4] = [
    (DomainId::A, DomainId::A),
    (DomainId::A, DomainId::B),
    (DomainId::B, DomainId::A),
    (DomainId::B, DomainId::B),
];

pub fn direction_index(from: DomainId, to: DomainId) -> usize {
    from.index() * 2 + to.index()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_index() {
        assert_eq!("a".parse::<DomainId>().unwrap(), DomainId::A);
        assert_eq!("B".parse::<DomainId>().unwrap(), DomainId::B);
        assert!("c".parse::<DomainId>().is_err());
        for (i, (f, t)) in DIRECTIONS.iter().enumerate() {
            assert_eq!(direction_index(*f, *t), i);
        }
        assert_eq!(DomainId::A.other(), DomainId::B);
    }
}
