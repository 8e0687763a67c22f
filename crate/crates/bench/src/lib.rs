//! Fixtures shared by the benchmarks.

use byztwin_core::{Scenario, SimTime};

/// Four replicas and a spare on a partially synchronous lane, no faults.
pub fn scenario(duration: SimTime, seed: u64) -> Scenario {
    let mut s = Scenario::from_toml(
        r#"
schema_version = 1
name = "bench"
duration = "1s"

[topology]
f = 1
spares = 1

[topology.lanes.consensus]
kind = "partial_sync"
base_delay = "1ms"
gst = "0"
post_gst_bound = "5ms"
pre_gst_cap = "20ms"
distribution = { type = "uniform", max = "2ms" }

[topology.lanes.ot]
kind = "deterministic"
base_delay = "1ms"
jitter_bound = "200us"

[consensus]
timeout = "20ms"
"#,
    )
    .expect("bench scenario parses");
    s.duration = duration;
    s.seed = seed;
    s
}
