//! Serde helpers writing [`SimTime`] as a human duration (`"20ms"`) and
//! reading either that or an integer count of microseconds.

use std::time::Duration;

use serde::de::{self, Visitor};
use serde::{Deserializer, Serializer};

use super::SimTime;

pub fn format(t: SimTime) -> String {
    humantime::format_duration(Duration::from_micros(t.0)).to_string()
}

pub fn parse(s: &str) -> Result<SimTime, String> {
    let s = s.trim();
    if s == "0" {
        return Ok(SimTime::ZERO);
    }
    let d = humantime::parse_duration(s).map_err(|e| format!("bad duration `{s}`: {e}"))?;
    if d.subsec_nanos() % 1_000 != 0 {
        return Err(format!("duration `{s}` is finer than a microsecond"));
    }
    u64::try_from(d.as_micros())
        .map(SimTime)
        .map_err(|_| format!("duration `{s}` out of range"))
}

pub fn serialize<S: Serializer>(t: &SimTime, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format(*t))
}

struct DurVisitor;

impl Visitor<'_> for DurVisitor {
    type Value = SimTime;

    fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
        f.write_str("a duration string like \"20ms\" or integer microseconds")
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<SimTime, E> {
        Ok(SimTime(v))
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<SimTime, E> {
        u64::try_from(v)
            .map(SimTime)
            .map_err(|_| E::custom("negative duration"))
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<SimTime, E> {
        parse(v).map_err(E::custom)
    }
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<SimTime, D::Error> {
    d.deserialize_any(DurVisitor)
}

pub mod option {
    use super::*;

    pub fn serialize<S: Serializer>(t: &Option<SimTime>, s: S) -> Result<S::Ok, S::Error> {
        match t {
            Some(t) => s.serialize_some(&super::format(*t)),
            None => s.serialize_none(),
        }
    }

    struct OptVisitor;

    impl<'de> Visitor<'de> for OptVisitor {
        type Value = Option<SimTime>;

        fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
            f.write_str("an optional duration")
        }

        fn visit_none<E: de::Error>(self) -> Result<Self::Value, E> {
            Ok(None)
        }

        fn visit_unit<E: de::Error>(self) -> Result<Self::Value, E> {
            Ok(None)
        }

        fn visit_some<D: Deserializer<'de>>(self, d: D) -> Result<Self::Value, D::Error> {
            super::deserialize(d).map(Some)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<Self::Value, E> {
            DurVisitor.visit_u64(v).map(Some)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<Self::Value, E> {
            DurVisitor.visit_i64(v).map(Some)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<Self::Value, E> {
            DurVisitor.visit_str(v).map(Some)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<SimTime>, D::Error> {
        d.deserialize_option(OptVisitor)
    }
}
