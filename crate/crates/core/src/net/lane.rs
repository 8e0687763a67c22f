use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use super::NetError;
use crate::sim::{dur, SimTime};

/// Extra delay (on top of `base_delay`) drawn on a partially synchronous lane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DelayDistribution {
    /// Log-normal with the given median extra delay and shape.
    LogNormal {
        #[serde(with = "dur")]
        median: SimTime,
        sigma: f64,
    },
    /// Uniform extra delay in `[0, max]`.
    Uniform {
        #[serde(with = "dur")]
        max: SimTime,
    },
}

impl Default for DelayDistribution {
    fn default() -> Self {
        DelayDistribution::LogNormal {
            median: SimTime::from_micros(500),
            sigma: 0.75,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LaneKind {
    /// Bounded-jitter lane (TSN-like): delay in `[base, base + jitter_bound]`.
    Deterministic {
        #[serde(with = "dur")]
        base_delay: SimTime,
        #[serde(with = "dur")]
        jitter_bound: SimTime,
    },
    /// Partial synchrony: bounded by `post_gst_bound` from `gst` on, finite
    /// but unbounded by it before (capped at `pre_gst_cap` to keep runs finite).
    PartialSync {
        #[serde(with = "dur")]
        base_delay: SimTime,
        #[serde(default)]
        distribution: DelayDistribution,
        #[serde(with = "dur")]
        gst: SimTime,
        #[serde(with = "dur")]
        post_gst_bound: SimTime,
        #[serde(with = "dur")]
        pre_gst_cap: SimTime,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    #[serde(flatten)]
    pub kind: LaneKind,
}

const TRUNCATION_ATTEMPTS: usize = 64;

impl Lane {
    pub fn deterministic(base_delay: SimTime, jitter_bound: SimTime) -> Self {
        Lane {
            kind: LaneKind::Deterministic {
                base_delay,
                jitter_bound,
            },
        }
    }

    pub fn partial_sync(
        base_delay: SimTime,
        distribution: DelayDistribution,
        gst: SimTime,
        post_gst_bound: SimTime,
        pre_gst_cap: SimTime,
    ) -> Self {
        Lane {
            kind: LaneKind::PartialSync {
                base_delay,
                distribution,
                gst,
                post_gst_bound,
                pre_gst_cap,
            },
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        match &self.kind {
            LaneKind::Deterministic { .. } => Ok(()),
            LaneKind::PartialSync {
                base_delay,
                distribution,
                post_gst_bound,
                pre_gst_cap,
                ..
            } => {
                if post_gst_bound < base_delay {
                    return Err(NetError::InvalidLane(
                        "post_gst_bound below base_delay".into(),
                    ));
                }
                if pre_gst_cap < post_gst_bound {
                    return Err(NetError::InvalidLane(
                        "pre_gst_cap below post_gst_bound".into(),
                    ));
                }
                if let DelayDistribution::LogNormal { median, sigma } = distribution {
                    if median.0 == 0 || !(*sigma > 0.0) {
                        return Err(NetError::InvalidLane(
                            "log-normal needs positive median and sigma".into(),
                        ));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn base_delay(&self) -> SimTime {
        match &self.kind {
            LaneKind::Deterministic { base_delay, .. } => *base_delay,
            LaneKind::PartialSync { base_delay, .. } => *base_delay,
        }
    }

    /// Largest delay an honest delivery can take once the lane is stable.
    pub fn stable_bound(&self) -> SimTime {
        match &self.kind {
            LaneKind::Deterministic {
                base_delay,
                jitter_bound,
            } => *base_delay + *jitter_bound,
            LaneKind::PartialSync { post_gst_bound, .. } => *post_gst_bound,
        }
    }

    pub fn with_base_delay(&self, base: SimTime) -> Lane {
        let mut lane = self.clone();
        match &mut lane.kind {
            LaneKind::Deterministic { base_delay, .. } => *base_delay = base,
            LaneKind::PartialSync {
                base_delay,
                post_gst_bound,
                pre_gst_cap,
                ..
            } => {
                *base_delay = base;
                if *post_gst_bound < base {
                    *post_gst_bound = base;
                }
                if *pre_gst_cap < *post_gst_bound {
                    *pre_gst_cap = *post_gst_bound;
                }
            }
        }
        lane
    }

    /// Sample a delivery delay at `now`. `stretch` is an adversarial factor
    /// from an active fault; without it the lane invariants always hold.
    pub fn sample_delay<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        now: SimTime,
        stretch: Option<f64>,
    ) -> SimTime {
        match &self.kind {
            LaneKind::Deterministic {
                base_delay,
                jitter_bound,
            } => {
                let jitter = if jitter_bound.0 == 0 {
                    0
                } else {
                    rng.random_range(0..=jitter_bound.0)
                };
                let d = *base_delay + SimTime(jitter);
                match stretch {
                    Some(k) => scale(d, k),
                    None => d,
                }
            }
            LaneKind::PartialSync {
                base_delay,
                distribution,
                gst,
                post_gst_bound,
                pre_gst_cap,
            } => {
                let stable = now >= *gst;
                let headroom = post_gst_bound.0 - base_delay.0;
                let extra = if stable && stretch.is_none() {
                    let mut accepted = None;
                    for _ in 0..TRUNCATION_ATTEMPTS {
                        let x = draw_extra(distribution, rng);
                        if x <= headroom {
                            accepted = Some(x);
                            break;
                        }
                    }
                    accepted.unwrap_or_else(|| rng.random_range(0..=headroom))
                } else {
                    draw_extra(distribution, rng)
                };
                let mut d = *base_delay + SimTime(extra);
                if let Some(k) = stretch {
                    d = scale(d, k);
                }
                d.min(*pre_gst_cap).max(*base_delay)
            }
        }
    }
}

fn scale(d: SimTime, k: f64) -> SimTime {
    SimTime((d.0 as f64 * k).round().max(0.0) as u64)
}

fn draw_extra<R: Rng + ?Sized>(dist: &DelayDistribution, rng: &mut R) -> u64 {
    match dist {
        DelayDistribution::LogNormal { median, sigma } => {
            let ln = LogNormal::new((median.0 as f64).ln(), *sigma)
                .expect("validated log-normal parameters");
            let x: f64 = ln.sample(rng);
            if x.is_finite() {
                x.round().min(u64::MAX as f64 / 2.0) as u64
            } else {
                u64::MAX / 2
            }
        }
        DelayDistribution::Uniform { max } => rng.random_range(0..=max.0),
    }
}
