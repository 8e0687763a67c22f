use std::io::Write;
use std::ops::Range;

use serde::Serialize;

use super::{Body, Broker, Severity, StoreError, Topic};

/// One exported line. Field order is fixed by declaration order.
#[derive(Debug, Serialize)]
pub struct SiemLine<'a> {
    pub offset: u64,
    pub real_us: u64,
    pub logical: u64,
    pub producer: &'a str,
    pub severity: Severity,
    pub category: &'a str,
    pub summary: &'a str,
    pub source_topic: Topic,
    pub source_offset: u64,
}

/// Newline-delimited export of `siem.events` over `range`. Returns the
/// number of lines written.
pub fn export_siem<W: Write>(broker: &Broker, range: Range<u64>, mut out: W) -> Result<usize, StoreError> {
    let recs = broker.replay(Topic::SiemEvents, range)?;
    for r in &recs {
        let Body::Siem(e) = &r.body else {
            continue;
        };
        let line = SiemLine {
            offset: r.offset,
            real_us: r.stamp.real.0,
            logical: r.stamp.logical,
            producer: &r.producer,
            severity: e.severity,
            category: &e.category,
            summary: &e.summary,
            source_topic: e.source_topic,
            source_offset: e.source_offset,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(recs.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::SimTime;
    use crate::store::SiemEvent;

    #[test]
    fn empty_range_is_empty_and_exports_are_identical() {
        let b = Broker::in_memory();
        let mut out = Vec::new();
        assert_eq!(export_siem(&b, 0..0, &mut out).unwrap(), 0);
        assert!(out.is_empty());
        for i in 0..3 {
            b.publish(
                "harness",
                Topic::SiemEvents,
                Body::Siem(SiemEvent {
                    severity: Severity::Warning,
                    category: "false_suspicion".into(),
                    summary: format!("n{i}"),
                    source_topic: Topic::OtAudit,
                    source_offset: i,
                }),
                SimTime(i),
            )
            .unwrap();
        }
        let mut a = Vec::new();
        let mut c = Vec::new();
        export_siem(&b, 0..3, &mut a).unwrap();
        export_siem(&b, 0..3, &mut c).unwrap();
        assert_eq!(a, c);
        let first = String::from_utf8(a).unwrap().lines().next().unwrap().to_string();
        assert!(first.starts_with("{\"offset\":0,\"real_us\":0,\"logical\":1,\"producer\":\"harness\""));
        assert!(export_siem(&b, 0..9, Vec::new()).is_err());
    }
}
