//! Text and JSON renderings of a benchmark result.

use std::fmt::Write as _;

use crate::runner::{BenchResult, Verdict};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Text,
    Json,
}

impl Format {
    /// JSON for `*.json` paths, text otherwise.
    pub fn for_path(path: &str) -> Self {
        if path.ends_with(".json") {
            Format::Json
        } else {
            Format::Text
        }
    }
}

pub fn emit(r: &BenchResult, format: Format) -> String {
    match format {
        Format::Json => serde_json::to_string_pretty(r).expect("result serializes"),
        Format::Text => text(r),
    }
}

fn text(r: &BenchResult) -> String {
    let mut s = String::new();
    let verdict = match r.verdict {
        Verdict::Passed => "PASSED",
        Verdict::Failed => "FAILED",
    };
    let sp = &r.spec;
    let _ = writeln!(s, "workload   {} on {} ({} clients x {} procs, seed {})", sp.kind, r.target, sp.clients, sp.procs, sp.seed);
    let _ = writeln!(s, "ops        {} ok of {} attempted, {} errors", r.ok, r.attempted, r.error_count());
    for (k, n) in &r.errors {
        let _ = writeln!(s, "  error    {k}: {n}");
    }
    let _ = writeln!(s, "elapsed    {:.3} s ({} time)", r.elapsed_us as f64 / 1e6, r.clock);
    let _ = writeln!(s, "iops       {:.1}", r.iops);
    let _ = writeln!(
        s,
        "latency    mean {:.0} us, p50 {} us, p95 {} us, p99 {} us ({} time)",
        r.mean_us, r.p50_us, r.p95_us, r.p99_us, r.clock
    );
    let _ = writeln!(s, "census     {}", r.census);
    for m in r.mismatches.iter().take(20) {
        let _ = writeln!(s, "  mismatch {m}");
    }
    for v in r.violations.iter().take(20) {
        let _ = writeln!(s, "  violation {v}");
    }
    let _ = writeln!(s, "verdict    {verdict}");
    s
}
