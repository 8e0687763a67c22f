use std::collections::BTreeMap;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use sha2::{Digest as _, Sha256};

use super::segment::SegmentWriter;
use super::{AccessPolicy, Body, Record, StoreError, Topic};
use crate::net::Keyring;
use crate::sim::{ComponentId, SimTime};
use crate::time_gateway::{CanonicalTimestamp, TimeGateway};

#[derive(Clone, Debug)]
pub struct BrokerConfig {
    /// Root directory for segments; `None` keeps records in memory only.
    pub dir: Option<PathBuf>,
    pub segment_bytes: u64,
    /// `fsync` every append.
    pub sync: bool,
    pub policy: AccessPolicy,
    pub key_seed: u64,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            dir: None,
            segment_bytes: 1 << 20,
            sync: false,
            policy: AccessPolicy::default(),
            key_seed: 0,
        }
    }
}

#[derive(Debug, Default)]
struct TopicLog {
    records: Vec<Arc<Record>>,
    writer: Option<SegmentWriter>,
}

pub type ListenerId = u64;
type Listener = Arc<dyn Fn(&Record) + Send + Sync>;

/// The range's broker and streaming store. Appends are serialized per
/// topic; readers clone `Arc`s of immutable records.
pub struct Broker {
    cfg: BrokerConfig,
    keys: Keyring,
    topics: BTreeMap<Topic, RwLock<TopicLog>>,
    gateway: Mutex<TimeGateway>,
    listeners: RwLock<BTreeMap<ListenerId, Listener>>,
    next_listener: Mutex<ListenerId>,
}

impl std::fmt::Debug for Broker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Broker").field("dir", &self.cfg.dir).finish()
    }
}

impl Broker {
    pub fn in_memory() -> Self {
        Self::open(BrokerConfig::default()).expect("in-memory broker cannot fail")
    }

    pub fn open_dir(dir: &Path) -> Result<Self, StoreError> {
        Self::open(BrokerConfig {
            dir: Some(dir.to_path_buf()),
            ..BrokerConfig::default()
        })
    }

    /// Open (or recover) a broker. Torn tails from a crash are truncated;
    /// every fully written record survives.
    pub fn open(cfg: BrokerConfig) -> Result<Self, StoreError> {
        let keys = Keyring::new(cfg.key_seed);
        let mut topics = BTreeMap::new();
        let mut max_logical = 0;
        for t in Topic::ALL {
            let log = match &cfg.dir {
                None => TopicLog::default(),
                Some(root) => {
                    let (writer, recs) = SegmentWriter::open(&root.join(t.as_str()), cfg.segment_bytes, cfg.sync)?;
                    for r in &recs {
                        if !keys.verify(ComponentId::Gateway, &r.signing_bytes(), &parse_tag(&r.auth)) {
                            return Err(StoreError::Corrupt {
                                path: root.join(t.as_str()),
                                reason: format!("bad authenticator at offset {}", r.offset),
                            });
                        }
                        max_logical = max_logical.max(r.stamp.logical);
                    }
                    TopicLog {
                        records: recs.into_iter().map(Arc::new).collect(),
                        writer: Some(writer),
                    }
                }
            };
            topics.insert(t, RwLock::new(log));
        }
        let mut gateway = TimeGateway::default();
        gateway.resume_after(max_logical);
        Ok(Broker {
            cfg,
            keys,
            topics,
            gateway: Mutex::new(gateway),
            listeners: RwLock::new(BTreeMap::new()),
            next_listener: Mutex::new(0),
        })
    }

    /// In-memory copy of every topic, for branching a run.
    pub fn fork(&self) -> Broker {
        let topics = Topic::ALL
            .into_iter()
            .map(|t| {
                let records = self.topics[&t].read().expect("topic lock").records.clone();
                (t, RwLock::new(TopicLog { records, writer: None }))
            })
            .collect();
        Broker {
            cfg: BrokerConfig {
                dir: None,
                ..self.cfg.clone()
            },
            keys: self.keys.clone(),
            topics,
            gateway: Mutex::new(self.gateway.lock().expect("gateway lock").clone()),
            listeners: RwLock::new(BTreeMap::new()),
            next_listener: Mutex::new(0),
        }
    }

    pub fn policy(&self) -> &AccessPolicy {
        &self.cfg.policy
    }

    pub fn dir(&self) -> Option<&Path> {
        self.cfg.dir.as_deref()
    }

    /// Stamp at `now` through the broker's own gateway and append.
    pub fn publish(&self, principal: &str, topic: Topic, body: Body, now: SimTime) -> Result<u64, StoreError> {
        self.cfg.policy.check_publish(principal, topic)?;
        body.check(topic)
            .map_err(|reason| StoreError::SchemaViolation { topic, reason })?;
        let stamp = self
            .gateway
            .lock()
            .expect("gateway lock")
            .stamp_now(now)
            .map_err(|e| StoreError::SchemaViolation {
                topic,
                reason: e.to_string(),
            })?;
        self.append(principal, topic, body, stamp, SimTime::ZERO, false)
    }

    /// Append a record stamped by an upstream gateway.
    pub fn append(
        &self,
        principal: &str,
        topic: Topic,
        body: Body,
        stamp: CanonicalTimestamp,
        delay: SimTime,
        late: bool,
    ) -> Result<u64, StoreError> {
        self.cfg.policy.check_publish(principal, topic)?;
        body.check(topic)
            .map_err(|reason| StoreError::SchemaViolation { topic, reason })?;
        let rec = {
            let mut log = self.topics[&topic].write().expect("topic lock");
            let offset = log.records.len() as u64;
            let mut rec = Record {
                topic,
                offset,
                stamp,
                producer: principal.to_string(),
                delay,
                late,
                body,
                auth: String::new(),
            };
            rec.auth = hex::encode(self.keys.sign(ComponentId::Gateway, &rec.signing_bytes()).0);
            if let Some(w) = log.writer.as_mut() {
                w.append(offset, &serde_json::to_vec(&rec)?)?;
            }
            let rec = Arc::new(rec);
            log.records.push(rec.clone());
            rec
        };
        let listeners: Vec<Listener> = self.listeners.read().expect("listener lock").values().cloned().collect();
        for l in listeners {
            l(&rec);
        }
        Ok(rec.offset)
    }

    /// Next offset to be assigned on `topic`.
    pub fn head(&self, topic: Topic) -> u64 {
        self.topics[&topic].read().expect("topic lock").records.len() as u64
    }

    pub fn heads(&self) -> BTreeMap<Topic, u64> {
        Topic::ALL.into_iter().map(|t| (t, self.head(t))).collect()
    }

    pub fn replay(&self, topic: Topic, range: Range<u64>) -> Result<Vec<Arc<Record>>, StoreError> {
        let log = self.topics[&topic].read().expect("topic lock");
        let head = log.records.len() as u64;
        if range.start > range.end || range.end > head {
            return Err(StoreError::RangeOutOfBounds {
                topic,
                start: range.start,
                end: range.end,
                head,
            });
        }
        Ok(log.records[range.start as usize..range.end as usize].to_vec())
    }

    pub fn records(&self, topic: Topic) -> Vec<Arc<Record>> {
        self.topics[&topic].read().expect("topic lock").records.clone()
    }

    pub fn get(&self, topic: Topic, offset: u64) -> Option<Arc<Record>> {
        self.topics[&topic]
            .read()
            .expect("topic lock")
            .records
            .get(offset as usize)
            .cloned()
    }

    pub fn subscribe(&self, principal: &str, topic: Topic, from: u64) -> Result<Subscription, StoreError> {
        self.cfg.policy.check_subscribe(principal, topic)?;
        let head = self.head(topic);
        if from > head {
            return Err(StoreError::OffsetBeyondHead { topic, from, head });
        }
        Ok(Subscription { topic, cursor: from })
    }

    /// Call `f` on every record appended from now on, on the appending thread.
    pub fn add_listener(&self, f: impl Fn(&Record) + Send + Sync + 'static) -> ListenerId {
        let mut next = self.next_listener.lock().expect("listener id lock");
        let id = *next;
        *next += 1;
        self.listeners.write().expect("listener lock").insert(id, Arc::new(f));
        id
    }

    pub fn remove_listener(&self, id: ListenerId) {
        self.listeners.write().expect("listener lock").remove(&id);
    }

    /// Hash over `range` of `topic`, in offset order.
    pub fn range_hash(&self, topic: Topic, range: Range<u64>) -> Result<String, StoreError> {
        let mut h = Sha256::new();
        for r in self.replay(topic, range)? {
            h.update(serde_json::to_vec(&*r)?);
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Hash of every topic's full content.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in Topic::ALL {
            h.update(t.as_str().as_bytes());
            for r in self.records(t) {
                h.update(serde_json::to_vec(&*r).expect("record encodes"));
            }
        }
        hex::encode(h.finalize())
    }
}

fn parse_tag(s: &str) -> crate::net::AuthTag {
    let mut tag = [0u8; 16];
    if let Ok(b) = hex::decode(s) {
        if b.len() == 16 {
            tag.copy_from_slice(&b);
        }
    }
    crate::net::AuthTag(tag)
}

/// A cursor over one topic: historical records first, then the live tail
/// as it grows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Subscription {
    pub topic: Topic,
    pub cursor: u64,
}

impl Subscription {
    /// Everything from the cursor to the current head.
    pub fn poll(&mut self, broker: &Broker) -> Vec<Arc<Record>> {
        let head = broker.head(self.topic);
        let out = broker
            .replay(self.topic, self.cursor..head)
            .expect("cursor never passes head");
        self.cursor = head;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{PlcMode, Telemetry};
    use crate::store::{AuditEvent, SiemEvent, Severity};
    use std::io::Write;

    fn telemetry(level: f64) -> Body {
        Body::Telemetry(Telemetry {
            level,
            valve: 0.0,
            mode: PlcMode::Normal,
            setpoint: 5.0,
            sensor_noise_applied: false,
        })
    }

    #[test]
    fn offsets_start_at_zero_and_are_contiguous() {
        let b = Broker::in_memory();
        assert_eq!(b.publish("plc", Topic::OtTelemetry, telemetry(5.0), SimTime(1)).unwrap(), 0);
        assert_eq!(b.publish("plc", Topic::OtTelemetry, telemetry(5.1), SimTime(2)).unwrap(), 1);
        assert_eq!(b.head(Topic::OtTelemetry), 2);
    }

    #[test]
    fn unauthorized_and_schema_errors() {
        let b = Broker::in_memory();
        let act = Body::Actuation(crate::plant::SupervisoryCommand {
            seq: 1,
            setpoint: 5.0,
            watchdog_window: None,
        });
        assert!(matches!(
            b.publish("twin", Topic::OtActuation, act, SimTime(0)),
            Err(StoreError::Unauthorized { .. })
        ));
        assert!(matches!(
            b.publish("plc", Topic::OtTelemetry, telemetry(f64::NAN), SimTime(0)),
            Err(StoreError::SchemaViolation { .. })
        ));
        let wrong = Body::Audit(AuditEvent::RunCompleted { at: SimTime(0) });
        assert!(matches!(
            b.publish("plc", Topic::OtTelemetry, wrong, SimTime(0)),
            Err(StoreError::SchemaViolation { .. })
        ));
        assert!(matches!(
            b.subscribe("plc", Topic::OtAudit, 0),
            Err(StoreError::Unauthorized { .. })
        ));
    }

    #[test]
    fn subscribe_replays_then_tails() {
        let b = Broker::in_memory();
        for i in 0..5 {
            b.publish("plc", Topic::OtTelemetry, telemetry(i as f64), SimTime(i)).unwrap();
        }
        let mut s1 = b.subscribe("twin", Topic::OtTelemetry, 0).unwrap();
        let mut s2 = b.subscribe("console", Topic::OtTelemetry, 0).unwrap();
        assert_eq!(s1.poll(&b).len(), 5);
        b.publish("plc", Topic::OtTelemetry, telemetry(9.0), SimTime(9)).unwrap();
        let tail = s1.poll(&b);
        assert_eq!(tail.len(), 1);
        assert_eq!(tail[0].offset, 5);
        let a: Vec<_> = b.replay(Topic::OtTelemetry, 0..6).unwrap();
        let c = s2.poll(&b);
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&c).unwrap()
        );
        assert!(matches!(
            b.subscribe("twin", Topic::OtTelemetry, 7),
            Err(StoreError::OffsetBeyondHead { .. })
        ));
    }

    #[test]
    fn replay_bounds() {
        let b = Broker::in_memory();
        assert!(b.replay(Topic::OtAudit, 0..0).unwrap().is_empty());
        assert!(matches!(b.replay(Topic::OtAudit, 0..1), Err(StoreError::RangeOutOfBounds { .. })));
    }

    #[test]
    fn listeners_see_appends() {
        let b = Broker::in_memory();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let s = seen.clone();
        let id = b.add_listener(move |r| s.lock().unwrap().push(r.offset));
        b.publish("plc", Topic::OtTelemetry, telemetry(1.0), SimTime(0)).unwrap();
        b.remove_listener(id);
        b.publish("plc", Topic::OtTelemetry, telemetry(1.0), SimTime(0)).unwrap();
        assert_eq!(*seen.lock().unwrap(), vec![0]);
    }

    #[test]
    fn restart_recovers_acknowledged_records_and_truncates_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = BrokerConfig {
            dir: Some(dir.path().to_path_buf()),
            segment_bytes: 600,
            ..BrokerConfig::default()
        };
        let mut hashes = Vec::new();
        let mut acked = 0;
        for round in 0..4 {
            let b = Broker::open(cfg.clone()).unwrap();
            assert_eq!(b.head(Topic::OtTelemetry), acked);
            if let Some(h) = hashes.last() {
                assert_eq!(&b.range_hash(Topic::OtTelemetry, 0..acked).unwrap(), h);
            }
            for i in 0..7 {
                let off = b
                    .publish("plc", Topic::OtTelemetry, telemetry(i as f64), SimTime(round * 100 + i))
                    .unwrap();
                assert_eq!(off, acked);
                acked += 1;
            }
            b.publish(
                "harness",
                Topic::SiemEvents,
                Body::Siem(SiemEvent {
                    severity: Severity::Info,
                    category: "test".into(),
                    summary: "x".into(),
                    source_topic: Topic::OtTelemetry,
                    source_offset: 0,
                }),
                SimTime(0),
            )
            .unwrap();
            hashes.push(b.range_hash(Topic::OtTelemetry, 0..acked).unwrap());
            drop(b);
            let seg_dir = dir.path().join("ot.telemetry");
            let mut segs: Vec<_> = std::fs::read_dir(&seg_dir).unwrap().map(|e| e.unwrap().path()).collect();
            segs.sort();
            let mut f = std::fs::OpenOptions::new().append(true).open(segs.last().unwrap()).unwrap();
            f.write_all(&[0x40, 0, 0, 0, 1, 2]).unwrap();
        }
        let segs = std::fs::read_dir(dir.path().join("ot.telemetry")).unwrap().count();
        assert!(segs > 1, "segments rolled");
        let b = Broker::open(cfg).unwrap();
        let recs = b.records(Topic::OtTelemetry);
        assert_eq!(recs.len() as u64, acked);
        assert!(recs.iter().enumerate().all(|(i, r)| r.offset == i as u64));
        let logical: Vec<u64> = recs.iter().map(|r| r.stamp.logical).collect();
        assert!(logical.windows(2).all(|w| w[0] < w[1]), "logical stamps resume after restart");
    }
}
