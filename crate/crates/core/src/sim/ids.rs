use std::fmt;

use serde::{Deserialize, Serialize};

/// Index of a replica identity. Spares from the diversified pool get ids past `n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ReplicaId(pub u32);

impl fmt::Display for ReplicaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Every addressable component of the range. Serialized as its display
/// name (`r0`, `manager`, ...).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ComponentId {
    Replica(ReplicaId),
    Manager,
    Plc,
    Gateway,
    Harness,
    Twin,
}

impl ComponentId {
    pub fn replica(i: u32) -> Self {
        ComponentId::Replica(ReplicaId(i))
    }

    pub fn as_replica(&self) -> Option<ReplicaId> {
        match self {
            ComponentId::Replica(r) => Some(*r),
            _ => None,
        }
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ComponentId::Replica(r) => write!(f, "{r}"),
            ComponentId::Manager => f.write_str("manager"),
            ComponentId::Plc => f.write_str("plc"),
            ComponentId::Gateway => f.write_str("gateway"),
            ComponentId::Harness => f.write_str("harness"),
            ComponentId::Twin => f.write_str("twin"),
        }
    }
}

impl std::str::FromStr for ComponentId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "manager" => ComponentId::Manager,
            "plc" => ComponentId::Plc,
            "gateway" => ComponentId::Gateway,
            "harness" => ComponentId::Harness,
            "twin" => ComponentId::Twin,
            _ => {
                let n = s
                    .strip_prefix('r')
                    .and_then(|d| d.parse().ok())
                    .ok_or_else(|| format!("unknown component `{s}`"))?;
                ComponentId::replica(n)
            }
        })
    }
}

impl From<ComponentId> for String {
    fn from(c: ComponentId) -> String {
        c.to_string()
    }
}

impl TryFrom<String> for ComponentId {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<ReplicaId> for ComponentId {
    fn from(r: ReplicaId) -> Self {
        ComponentId::Replica(r)
    }
}
