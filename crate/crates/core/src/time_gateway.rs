//! Canonical stamping and conversion between OT time, logical time and the
//! twin's replay clock.

use std::cmp::Ordering;
use std::fmt;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::sim::{LogicalClock, SimTime};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("event already stamped")]
    AlreadyStamped,
    #[error("time {t} precedes mapping epoch {epoch}")]
    PreEpoch { t: SimTime, epoch: SimTime },
    #[error("event has no canonical stamp")]
    UnstampedEvent,
    #[error("twin time {0} does not map to a whole microsecond")]
    NotRepresentable(TwinTime),
    #[error("scale must be a positive ratio")]
    InvalidScale,
}

/// Twin replay clock in microseconds, kept as an exact reduced fraction.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TwinTime {
    pub num: u64,
    pub den: u64,
}

impl TwinTime {
    pub const ZERO: TwinTime = TwinTime { num: 0, den: 1 };

    pub fn from_micros(us: u64) -> Self {
        TwinTime { num: us, den: 1 }
    }

    fn from_ratio(r: Ratio<u64>) -> Self {
        TwinTime {
            num: *r.numer(),
            den: *r.denom(),
        }
    }

    fn ratio(self) -> Ratio<u64> {
        Ratio::new(self.num, self.den)
    }

    pub fn as_micros_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn add_micros(self, us: u64) -> TwinTime {
        TwinTime::from_ratio(self.ratio() + Ratio::from_integer(us))
    }
}

impl Ord for TwinTime {
    fn cmp(&self, other: &Self) -> Ordering {
        self.ratio().cmp(&other.ratio())
    }
}

impl PartialOrd for TwinTime {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Debug for TwinTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TwinTime({self})")
    }
}

impl fmt::Display for TwinTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}us", self.num)
        } else {
            write!(f, "{}/{}us", self.num, self.den)
        }
    }
}

/// Affine map from OT time to twin time: `twin = scale × (real − epoch)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeMapping {
    pub epoch: SimTime,
    pub scale_num: u64,
    pub scale_den: u64,
    pub version: u64,
}

impl Default for TimeMapping {
    fn default() -> Self {
        TimeMapping {
            epoch: SimTime::ZERO,
            scale_num: 1,
            scale_den: 1,
            version: 0,
        }
    }
}

impl TimeMapping {
    pub fn new(epoch: SimTime, scale_num: u64, scale_den: u64) -> Result<Self, GatewayError> {
        if scale_num == 0 || scale_den == 0 {
            return Err(GatewayError::InvalidScale);
        }
        Ok(TimeMapping {
            epoch,
            scale_num,
            scale_den,
            version: 0,
        })
    }

    fn scale(&self) -> Ratio<u64> {
        Ratio::new(self.scale_num, self.scale_den)
    }

    /// Successor mapping for times from `epoch` on. Past stamps keep the
    /// mapping they were made under.
    pub fn rescale(&self, epoch: SimTime, scale_num: u64, scale_den: u64) -> Result<Self, GatewayError> {
        let mut m = TimeMapping::new(epoch, scale_num, scale_den)?;
        m.version = self.version + 1;
        Ok(m)
    }
}

pub fn to_twin_time(t: SimTime, m: &TimeMapping) -> Result<TwinTime, GatewayError> {
    if t < m.epoch {
        return Err(GatewayError::PreEpoch { t, epoch: m.epoch });
    }
    let dt = Ratio::from_integer(t.0 - m.epoch.0);
    Ok(TwinTime::from_ratio(dt * m.scale()))
}

pub fn from_twin_time(tt: TwinTime, m: &TimeMapping) -> Result<SimTime, GatewayError> {
    let real = tt.ratio() / m.scale();
    if !real.is_integer() {
        return Err(GatewayError::NotRepresentable(tt));
    }
    Ok(SimTime(m.epoch.0 + real.to_integer()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CanonicalTimestamp {
    pub real: SimTime,
    pub logical: u64,
    pub twin: TwinTime,
    /// Version of the mapping `twin` was computed under.
    pub mapping: u64,
}

impl CanonicalTimestamp {
    /// Canonical order: real time, then logical clock.
    pub fn order_key(&self) -> (SimTime, u64) {
        (self.real, self.logical)
    }
}

/// Anything that carries a canonical stamp slot.
pub trait Stampable {
    fn stamp(&self) -> Option<&CanonicalTimestamp>;
    fn set_stamp(&mut self, ts: CanonicalTimestamp);
}

/// Assigns canonical stamps. Logical time advances once per stamp, so the
/// stamp order agrees with the simulator's causal dispatch order.
#[derive(Clone, Debug, Default)]
pub struct TimeGateway {
    clock: LogicalClock,
    mapping: TimeMapping,
}

impl TimeGateway {
    pub fn new(mapping: TimeMapping) -> Self {
        TimeGateway {
            clock: LogicalClock::new(),
            mapping,
        }
    }

    pub fn mapping(&self) -> &TimeMapping {
        &self.mapping
    }

    pub fn logical(&self) -> u64 {
        self.clock.value()
    }

    /// Continue the logical clock past `logical`, e.g. after a restart.
    pub fn resume_after(&mut self, logical: u64) {
        if logical > self.clock.value() {
            self.clock.observe(logical);
        }
    }

    pub fn set_mapping(&mut self, m: TimeMapping) {
        self.mapping = m;
    }

    pub fn canonical_stamp<E: Stampable>(
        &mut self,
        event: &mut E,
        now: SimTime,
    ) -> Result<CanonicalTimestamp, GatewayError> {
        if event.stamp().is_some() {
            return Err(GatewayError::AlreadyStamped);
        }
        let ts = self.stamp_now(now)?;
        event.set_stamp(ts);
        Ok(ts)
    }

    /// Fresh stamp for `now` without a carrier.
    pub fn stamp_now(&mut self, now: SimTime) -> Result<CanonicalTimestamp, GatewayError> {
        let twin = to_twin_time(now, &self.mapping)?;
        Ok(CanonicalTimestamp {
            real: now,
            logical: self.clock.tick(),
            twin,
            mapping: self.mapping.version,
        })
    }
}

/// An event that crossed into the gateway at `arrival`.
#[derive(Clone, Debug, PartialEq)]
pub struct Arrival<E> {
    pub id: u64,
    pub stamp: Option<CanonicalTimestamp>,
    pub arrival: SimTime,
    pub event: E,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ordered<E> {
    pub id: u64,
    pub stamp: CanonicalTimestamp,
    /// Transport delay from stamping to gateway arrival.
    pub delay: SimTime,
    pub late: bool,
    pub event: E,
}

/// Sort stamped events into canonical order, annotating transport delay.
pub fn order_batch<E>(events: Vec<Arrival<E>>) -> Result<Vec<Ordered<E>>, GatewayError> {
    let mut out = events
        .into_iter()
        .map(|a| {
            let stamp = a.stamp.ok_or(GatewayError::UnstampedEvent)?;
            Ok(Ordered {
                id: a.id,
                stamp,
                delay: a.arrival.saturating_sub(stamp.real),
                late: false,
                event: a.event,
            })
        })
        .collect::<Result<Vec<_>, GatewayError>>()?;
    out.sort_by_key(|o| (o.stamp.real, o.stamp.logical, o.id));
    Ok(out)
}

/// Holds arrivals for a window of twin time and releases them in stamp
/// order. Anything arriving after a later-stamped event was released is
/// passed through with `late` set.
#[derive(Clone, Debug)]
pub struct ReorderBuffer<E> {
    window_us: u64,
    pending: Vec<Ordered<E>>,
    released: Option<(SimTime, u64)>,
}

impl<E> ReorderBuffer<E> {
    pub fn new(window: SimTime) -> Self {
        ReorderBuffer {
            window_us: window.0,
            pending: Vec::new(),
            released: None,
        }
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    /// Add an arrival; returns it immediately if it is a straggler.
    pub fn push(&mut self, a: Arrival<E>) -> Result<Option<Ordered<E>>, GatewayError> {
        let stamp = a.stamp.ok_or(GatewayError::UnstampedEvent)?;
        let o = Ordered {
            id: a.id,
            stamp,
            delay: a.arrival.saturating_sub(stamp.real),
            late: false,
            event: a.event,
        };
        if self.released.is_some_and(|hw| stamp.order_key() < hw) {
            return Ok(Some(Ordered { late: true, ..o }));
        }
        self.pending.push(o);
        Ok(None)
    }

    /// Release everything whose twin stamp is at least one window old at `now`.
    pub fn drain_ready(&mut self, now_twin: TwinTime) -> Vec<Ordered<E>> {
        let (mut ready, keep): (Vec<_>, Vec<_>) = std::mem::take(&mut self.pending)
            .into_iter()
            .partition(|o| o.stamp.twin.add_micros(self.window_us) <= now_twin);
        self.pending = keep;
        self.finish(&mut ready);
        ready
    }

    pub fn flush(&mut self) -> Vec<Ordered<E>> {
        let mut all = std::mem::take(&mut self.pending);
        self.finish(&mut all);
        all
    }

    fn finish(&mut self, batch: &mut [Ordered<E>]) {
        batch.sort_by_key(|o| (o.stamp.real, o.stamp.logical, o.id));
        if let Some(last) = batch.last() {
            let k = last.stamp.order_key();
            self.released = Some(self.released.map_or(k, |hw| hw.max(k)));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[derive(Default)]
    struct Ev(Option<CanonicalTimestamp>);

    impl Stampable for Ev {
        fn stamp(&self) -> Option<&CanonicalTimestamp> {
            self.0.as_ref()
        }
        fn set_stamp(&mut self, ts: CanonicalTimestamp) {
            self.0 = Some(ts);
        }
    }

    #[test]
    fn first_stamp_is_logical_one_and_restamp_fails() {
        let mut g = TimeGateway::default();
        let mut e = Ev::default();
        let ts = g.canonical_stamp(&mut e, SimTime::from_millis(3)).unwrap();
        assert_eq!(ts.logical, 1);
        assert_eq!(
            g.canonical_stamp(&mut e, SimTime::from_millis(4)),
            Err(GatewayError::AlreadyStamped)
        );
        assert_eq!(e.0, Some(ts));
    }

    #[test]
    fn mapping_arithmetic() {
        let m = TimeMapping::new(SimTime::ZERO, 2, 1).unwrap();
        assert_eq!(
            to_twin_time(SimTime::from_millis(10), &m).unwrap(),
            TwinTime::from_micros(20_000)
        );
        let m = TimeMapping::new(SimTime::from_millis(5), 1, 1).unwrap();
        assert_eq!(to_twin_time(SimTime::from_millis(5), &m).unwrap(), TwinTime::ZERO);
        assert_eq!(
            to_twin_time(SimTime::from_millis(9), &m).unwrap(),
            TwinTime::from_micros(4_000)
        );
        assert!(matches!(
            to_twin_time(SimTime::from_millis(1), &m),
            Err(GatewayError::PreEpoch { .. })
        ));
        assert_eq!(TimeMapping::new(SimTime::ZERO, 0, 1), Err(GatewayError::InvalidScale));
    }

    #[test]
    fn rescale_bumps_version() {
        let m = TimeMapping::default();
        let m2 = m.rescale(SimTime::from_secs(1), 3, 2).unwrap();
        assert_eq!(m2.version, 1);
    }

    fn stamped(real_ms: u64, logical: u64, arrival_ms: u64, id: u64) -> Arrival<()> {
        Arrival {
            id,
            stamp: Some(CanonicalTimestamp {
                real: SimTime::from_millis(real_ms),
                logical,
                twin: TwinTime::from_micros(real_ms * 1000),
                mapping: 0,
            }),
            arrival: SimTime::from_millis(arrival_ms),
            event: (),
        }
    }

    #[test]
    fn order_batch_sorts_and_annotates() {
        let out = order_batch(vec![
            stamped(5, 3, 8, 0),
            stamped(2, 1, 2, 1),
            stamped(5, 2, 5, 2),
        ])
        .unwrap();
        let ids: Vec<u64> = out.iter().map(|o| o.id).collect();
        assert_eq!(ids, vec![1, 2, 0]);
        assert_eq!(out[2].delay, SimTime::from_millis(3));
        let unstamped = Arrival { id: 9, stamp: None, arrival: SimTime::ZERO, event: () };
        assert_eq!(order_batch(vec![unstamped]), Err(GatewayError::UnstampedEvent));
    }

    #[test]
    fn reorder_buffer_holds_window_then_flags_stragglers() {
        let mut b = ReorderBuffer::new(SimTime::from_millis(10));
        assert!(b.push(stamped(7, 2, 9, 0)).unwrap().is_none());
        assert!(b.push(stamped(5, 1, 12, 1)).unwrap().is_none());
        assert!(b.drain_ready(TwinTime::from_micros(14_000)).is_empty());
        let out = b.drain_ready(TwinTime::from_micros(17_000));
        assert_eq!(out.iter().map(|o| o.id).collect::<Vec<_>>(), vec![1, 0]);
        let late = b.push(stamped(6, 3, 30, 2)).unwrap().unwrap();
        assert!(late.late);
        assert_eq!(late.delay, SimTime::from_millis(24));
    }

    proptest! {
        #[test]
        fn twin_roundtrip_is_exact(t in 0u64..1u64 << 40, epoch in 0u64..1u64 << 30, num in 1u64..1000, den in 1u64..1000) {
            let m = TimeMapping::new(SimTime(epoch), num, den).unwrap();
            let t = SimTime(epoch + t);
            let tt = to_twin_time(t, &m).unwrap();
            prop_assert_eq!(from_twin_time(tt, &m).unwrap(), t);
        }

        /// Output is sorted by (real, logical), so any causal chain with
        /// increasing logical stamps at non-decreasing real times stays ordered.
        #[test]
        fn order_batch_respects_logical(mut items in proptest::collection::vec((0u64..50, 0u64..50), 0..40)) {
            items.sort();
            items.dedup_by_key(|x| x.1);
            let arrivals: Vec<Arrival<()>> = items
                .iter()
                .enumerate()
                .rev()
                .map(|(i, (r, l))| stamped(*r, *l, r + 3, i as u64))
                .collect();
            let out = order_batch(arrivals).unwrap();
            for w in out.windows(2) {
                prop_assert!(w[0].stamp.order_key() <= w[1].stamp.order_key());
            }
        }
    }
}
