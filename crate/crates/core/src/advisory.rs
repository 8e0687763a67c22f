//! Twin-to-manager advisories. The twin may only recommend configuration
//! deltas or replica replacement; the manager reviews each advisory once and
//! routes approved changes through consensus.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::consensus::{check_membership, Command, ConfigDelta, ConsensusError};
use crate::sim::{dur, ReplicaId, SimTime};
use crate::store::{Broker, Topic};
use crate::twin::{Outcome, SweepParam, TwinResult, VulnerabilityMap};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AdvisoryError {
    #[error("evidence {topic}@{offset} does not resolve in the store")]
    UnresolvableEvidence { topic: Topic, offset: u64 },
    #[error("advisory {0} already decided")]
    AlreadyDecided(u64),
    #[error("advisory {0} is unknown")]
    Unknown(u64),
    #[error("advisory {0} is not approved")]
    NotApproved(u64),
    #[error("membership change rejected: {0}")]
    MembershipViolation(#[from] ConsensusError),
    #[error("no spare replica left in the pool")]
    NoSpare,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EvidenceRef {
    pub topic: Topic,
    pub offset: u64,
}

/// What the twin found.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "finding", rename_all = "snake_case")]
pub enum Claim {
    TimeoutBelowFrontier {
        #[serde(with = "dur")]
        live: SimTime,
        #[serde(with = "dur")]
        frontier: SimTime,
    },
    FalseSuspicionStorm { rate: f64 },
    FailSafeRisk,
    InconsistentStateReports { replica: ReplicaId },
}

/// What the twin proposes. Configuration and membership only: there is no
/// variant that carries a setpoint, valve position or any other plant
/// command.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "change", rename_all = "snake_case")]
pub enum Recommendation {
    Configure { delta: ConfigDelta },
    ReplaceReplica { old: ReplicaId },
    SetMembership { members: Vec<ReplicaId> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecommendationKind {
    Timeout,
    WatchdogWindow,
    OtDelay,
    ReplaceReplica,
    Membership,
}

impl Recommendation {
    pub fn kinds(&self) -> BTreeSet<RecommendationKind> {
        let mut k = BTreeSet::new();
        match self {
            Recommendation::Configure { delta } => {
                if delta.timeout.is_some() {
                    k.insert(RecommendationKind::Timeout);
                }
                if delta.watchdog_window.is_some() {
                    k.insert(RecommendationKind::WatchdogWindow);
                }
                if delta.ot_base_delay.is_some() {
                    k.insert(RecommendationKind::OtDelay);
                }
            }
            Recommendation::ReplaceReplica { .. } => {
                k.insert(RecommendationKind::ReplaceReplica);
            }
            Recommendation::SetMembership { .. } => {
                k.insert(RecommendationKind::Membership);
            }
        }
        k
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Advisory {
    pub id: u64,
    /// Run and result the advisory was derived from.
    pub source: String,
    pub claim: Claim,
    pub recommendation: Recommendation,
    pub evidence: Vec<EvidenceRef>,
    pub issued_at: SimTime,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Apply,
    Reject,
    Defer,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confirmation {
    pub approve: bool,
    pub operator: String,
    pub at: SimTime,
    #[serde(default)]
    pub rationale: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManagerDecision {
    pub advisory: u64,
    pub verdict: Verdict,
    pub rationale: String,
    pub recommendation: Recommendation,
    /// `policy` for automated review.
    pub operator: String,
    pub at: SimTime,
    #[serde(default)]
    pub confirmation: Option<Confirmation>,
}

impl ManagerDecision {
    /// Apply, or Defer confirmed by a human.
    pub fn approved(&self) -> bool {
        match self.verdict {
            Verdict::Apply => true,
            Verdict::Defer => self.confirmation.as_ref().is_some_and(|c| c.approve),
            Verdict::Reject => false,
        }
    }
}

/// Manager review policy.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    /// Timeouts in this range may be applied without a human.
    #[serde(with = "dur")]
    pub auto_timeout_min: SimTime,
    #[serde(with = "dur")]
    pub auto_timeout_max: SimTime,
    /// Below this a timeout recommendation is rejected outright.
    #[serde(with = "dur")]
    pub hard_timeout_min: SimTime,
    pub require_human: BTreeSet<RecommendationKind>,
}

impl Policy {
    /// Auto-apply timeouts within `[2, 10]` times the post-GST bound; every
    /// other kind needs confirmation.
    pub fn for_bound(post_gst_bound: SimTime) -> Self {
        Policy {
            auto_timeout_min: post_gst_bound.mul(2),
            auto_timeout_max: post_gst_bound.mul(10),
            hard_timeout_min: post_gst_bound,
            require_human: [
                RecommendationKind::WatchdogWindow,
                RecommendationKind::OtDelay,
                RecommendationKind::ReplaceReplica,
                RecommendationKind::Membership,
            ]
            .into_iter()
            .collect(),
        }
    }
}

/// Evidence must point at records that exist.
pub fn check_evidence(broker: &Broker, evidence: &[EvidenceRef]) -> Result<(), AdvisoryError> {
    for e in evidence {
        if e.offset >= broker.head(e.topic) {
            return Err(AdvisoryError::UnresolvableEvidence {
                topic: e.topic,
                offset: e.offset,
            });
        }
    }
    Ok(())
}

/// Smallest grid timeout at and above which every cell is SafeLive, plus
/// the grid step there.
pub fn safe_timeout_frontier(map: &VulnerabilityMap) -> Option<(SimTime, SimTime)> {
    let t_axis = map.axes.iter().position(|a| a.param == SweepParam::Timeout)?;
    let values = map.axes[t_axis].numbers().ok()?;
    let mut safe_from = None;
    for i in (0..values.len()).rev() {
        let all_safe = map
            .cells
            .iter()
            .filter(|c| c.coords[t_axis] == i)
            .all(|c| c.outcome == Outcome::SafeLive);
        if !all_safe {
            break;
        }
        safe_from = Some(i);
    }
    let i = safe_from?;
    let step = if i > 0 {
        values[i] - values[i - 1]
    } else if values.len() > 1 {
        values[1] - values[0]
    } else {
        0
    };
    Some((SimTime(values[i]), SimTime(step)))
}

/// Live settings the twin compares findings against.
#[derive(Clone, Debug)]
pub struct LiveSettings {
    pub timeout: SimTime,
}

/// Turn a twin result into an advisory, or `None` when the result is a
/// clean SafeLive finding. `evidence` must resolve in `broker`.
pub fn emit_advisory(
    id: u64,
    source: String,
    result: &TwinResult,
    live: &LiveSettings,
    evidence: Vec<EvidenceRef>,
    broker: &Broker,
    now: SimTime,
) -> Result<Option<Advisory>, AdvisoryError> {
    check_evidence(broker, &evidence)?;
    let found = match result {
        TwinResult::WhatIf(r) => match r.outcome {
            Outcome::FalseSuspicionStorm => {
                let timeout = r.delta.timeout.unwrap_or(live.timeout).mul(2);
                Some((
                    Claim::FalseSuspicionStorm {
                        rate: r.metrics.false_suspicion_rate(),
                    },
                    Recommendation::Configure {
                        delta: ConfigDelta {
                            timeout: Some(timeout),
                            ..ConfigDelta::default()
                        },
                    },
                ))
            }
            Outcome::FailSafeEngaged => Some((
                Claim::FailSafeRisk,
                Recommendation::Configure {
                    delta: ConfigDelta {
                        watchdog_window: Some(r.effective_watchdog_window + 2),
                        ..ConfigDelta::default()
                    },
                },
            )),
            _ => None,
        },
        TwinResult::Sweep(map) => match safe_timeout_frontier(map) {
            Some((frontier, step)) if live.timeout <= frontier => Some((
                Claim::TimeoutBelowFrontier {
                    live: live.timeout,
                    frontier,
                },
                Recommendation::Configure {
                    delta: ConfigDelta {
                        timeout: Some(frontier + step),
                        ..ConfigDelta::default()
                    },
                },
            )),
            _ => None,
        },
        TwinResult::StateLiars { replicas, .. } => replicas.first().map(|r| {
            (
                Claim::InconsistentStateReports { replica: *r },
                Recommendation::ReplaceReplica { old: *r },
            )
        }),
        TwinResult::Anomalies { .. } => None,
    };
    Ok(found.map(|(claim, recommendation)| Advisory {
        id,
        source,
        claim,
        recommendation,
        evidence,
        issued_at: now,
    }))
}

/// The manager's record of decisions, one per advisory.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AdvisoryBook {
    decisions: BTreeMap<u64, ManagerDecision>,
}

impl AdvisoryBook {
    pub fn get(&self, id: u64) -> Option<&ManagerDecision> {
        self.decisions.get(&id)
    }

    pub fn decisions(&self) -> impl Iterator<Item = &ManagerDecision> {
        self.decisions.values()
    }

    pub fn pending_confirmation(&self) -> impl Iterator<Item = &ManagerDecision> {
        self.decisions
            .values()
            .filter(|d| d.verdict == Verdict::Defer && d.confirmation.is_none())
    }

    /// Record a human confirmation for a deferred advisory.
    pub fn confirm(&mut self, id: u64, c: Confirmation) -> Result<ManagerDecision, AdvisoryError> {
        let d = self.decisions.get_mut(&id).ok_or(AdvisoryError::Unknown(id))?;
        if d.verdict != Verdict::Defer || d.confirmation.is_some() {
            return Err(AdvisoryError::AlreadyDecided(id));
        }
        d.confirmation = Some(c);
        Ok(d.clone())
    }
}

/// Decide an advisory under `policy`. Each advisory is decided once.
pub fn review(
    book: &mut AdvisoryBook,
    adv: &Advisory,
    policy: &Policy,
    now: SimTime,
) -> Result<ManagerDecision, AdvisoryError> {
    if book.decisions.contains_key(&adv.id) {
        return Err(AdvisoryError::AlreadyDecided(adv.id));
    }
    let kinds = adv.recommendation.kinds();
    let (verdict, rationale) = match &adv.recommendation {
        Recommendation::Configure { delta } if delta.timeout.is_some_and(|t| t < policy.hard_timeout_min) => (
            Verdict::Reject,
            format!("timeout below hard minimum {}", policy.hard_timeout_min),
        ),
        Recommendation::Configure { delta } if delta.watchdog_window == Some(0) => {
            (Verdict::Reject, "watchdog window must be positive".to_string())
        }
        Recommendation::Configure { delta } if kinds.is_empty() && *delta == ConfigDelta::default() => {
            (Verdict::Reject, "empty delta".to_string())
        }
        _ if kinds.iter().any(|k| policy.require_human.contains(k)) => {
            (Verdict::Defer, "requires human confirmation".to_string())
        }
        Recommendation::Configure { delta } => match delta.timeout {
            Some(t) if t < policy.auto_timeout_min || t > policy.auto_timeout_max => (
                Verdict::Defer,
                format!(
                    "timeout {t} outside auto-apply range [{}, {}]",
                    policy.auto_timeout_min, policy.auto_timeout_max
                ),
            ),
            _ => (Verdict::Apply, "within auto-apply bounds".to_string()),
        },
        _ => (Verdict::Apply, "policy allows".to_string()),
    };
    let d = ManagerDecision {
        advisory: adv.id,
        verdict,
        rationale,
        recommendation: adv.recommendation.clone(),
        operator: "policy".into(),
        at: now,
        confirmation: None,
    };
    book.decisions.insert(adv.id, d.clone());
    Ok(d)
}

/// The consensus commands that carry out an approved decision. Replacement
/// is a join of a spare as learner followed by an atomic swap, so the voting
/// membership never shrinks.
pub fn apply_decision(
    decision: &ManagerDecision,
    members: &[ReplicaId],
    spares: &mut Vec<ReplicaId>,
    f: usize,
) -> Result<Vec<Command>, AdvisoryError> {
    if !decision.approved() {
        return Err(AdvisoryError::NotApproved(decision.advisory));
    }
    let advisory = Some(decision.advisory);
    match &decision.recommendation {
        Recommendation::Configure { delta } => Ok(vec![Command::Configure {
            delta: delta.clone(),
            advisory,
        }]),
        Recommendation::ReplaceReplica { old } => {
            if !members.contains(old) {
                return Err(ConsensusError::InvalidConfig(format!("{old} is not a member")).into());
            }
            if spares.is_empty() {
                return Err(AdvisoryError::NoSpare);
            }
            let new = spares.remove(0);
            Ok(vec![
                Command::Join { replica: new },
                Command::Replace {
                    old: *old,
                    new,
                    advisory,
                },
            ])
        }
        Recommendation::SetMembership { members: target } => {
            check_membership(target, f)?;
            let removed: Vec<ReplicaId> = members.iter().filter(|m| !target.contains(m)).copied().collect();
            let added: Vec<ReplicaId> = target.iter().filter(|m| !members.contains(m)).copied().collect();
            if removed.len() != added.len() {
                return Err(ConsensusError::MembershipViolation {
                    have: target.len(),
                    need: 3 * f + 1,
                }
                .into());
            }
            Ok(removed
                .into_iter()
                .zip(added)
                .flat_map(|(old, new)| {
                    [
                        Command::Join { replica: new },
                        Command::Replace { old, new, advisory },
                    ]
                })
                .collect())
        }
    }
}
