use serde::{Deserialize, Serialize};

use super::{StoreError, Topic};

/// A named publisher or subscriber. Twin-plane principals are `twin`,
/// anything prefixed `twin-`, and `console`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Principal(pub String);

impl Principal {
    pub fn new(s: &str) -> Self {
        Principal(s.to_string())
    }

    pub fn is_twin_plane(&self) -> bool {
        is_twin_plane(&self.0)
    }
}

pub fn is_twin_plane(p: &str) -> bool {
    p == "twin" || p.starts_with("twin-") || p == "console"
}

/// Exact match, `prefix*`, or `*`.
fn glob(pattern: &str, s: &str) -> bool {
    match pattern.strip_suffix('*') {
        Some(prefix) => s.starts_with(prefix),
        None => pattern == s,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grant {
    pub principal: String,
    pub topics: String,
    #[serde(default)]
    pub publish: bool,
    #[serde(default)]
    pub subscribe: bool,
}

impl Grant {
    fn new(principal: &str, topics: &str, publish: bool, subscribe: bool) -> Self {
        Grant {
            principal: principal.into(),
            topics: topics.into(),
            publish,
            subscribe,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessPolicy {
    grants: Vec<Grant>,
}

impl AccessPolicy {
    /// Rejects any grant that would let a twin-plane principal publish on
    /// an `ot.*` topic.
    pub fn new(grants: Vec<Grant>) -> Result<Self, StoreError> {
        let probes = ["twin", "twin-x", "console"];
        for g in &grants {
            if !g.publish {
                continue;
            }
            for t in Topic::ALL.into_iter().filter(|t| t.is_ot()) {
                let hits_twin = probes.iter().any(|p| glob(&g.principal, p))
                    || is_twin_plane(g.principal.trim_end_matches('*'));
                if hits_twin && glob(&g.topics, t.as_str()) {
                    return Err(StoreError::PolicyViolation(t.to_string()));
                }
            }
        }
        Ok(AccessPolicy { grants })
    }

    pub fn grants(&self) -> &[Grant] {
        &self.grants
    }

    pub fn can_publish(&self, principal: &str, topic: Topic) -> bool {
        if is_twin_plane(principal) && topic.is_ot() {
            return false;
        }
        self.grants
            .iter()
            .any(|g| g.publish && glob(&g.principal, principal) && glob(&g.topics, topic.as_str()))
    }

    pub fn can_subscribe(&self, principal: &str, topic: Topic) -> bool {
        self.grants
            .iter()
            .any(|g| g.subscribe && glob(&g.principal, principal) && glob(&g.topics, topic.as_str()))
    }

    pub fn check_publish(&self, principal: &str, topic: Topic) -> Result<(), StoreError> {
        if self.can_publish(principal, topic) {
            Ok(())
        } else {
            Err(StoreError::Unauthorized {
                principal: principal.into(),
                topic,
                op: "publish",
            })
        }
    }

    pub fn check_subscribe(&self, principal: &str, topic: Topic) -> Result<(), StoreError> {
        if self.can_subscribe(principal, topic) {
            Ok(())
        } else {
            Err(StoreError::Unauthorized {
                principal: principal.into(),
                topic,
                op: "subscribe",
            })
        }
    }
}

impl Default for AccessPolicy {
    /// Grants for the range's fixed data flows.
    fn default() -> Self {
        let g = Grant::new;
        AccessPolicy::new(vec![
            g("plc", "ot.telemetry", true, false),
            g("plc", "ot.actuation", false, true),
            g("plc", "ot.audit", true, false),
            g("r*", "ot.audit", true, false),
            g("manager", "ot.audit", true, true),
            g("manager", "ot.actuation", true, true),
            g("manager", "siem.events", true, false),
            g("manager", "twin.advisory", false, true),
            g("manager", "range.external", false, true),
            g("harness", "ot.audit", true, true),
            g("harness", "siem.events", true, true),
            g("harness", "range.external", true, true),
            g("harness", "*", false, true),
            g("twin", "twin.*", true, true),
            g("twin", "ot.telemetry", false, true),
            g("twin", "ot.audit", false, true),
            g("twin", "range.external", false, true),
            g("twin-*", "twin.results", true, true),
            g("twin-*", "ot.telemetry", false, true),
            g("twin-*", "ot.audit", false, true),
            g("console", "range.external", true, true),
            g("console", "*", false, true),
        ])
        .expect("default grants respect the twin-plane rule")
    }
}
