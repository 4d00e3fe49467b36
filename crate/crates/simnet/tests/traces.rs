use cfs_simnet::script::FaultScript;
use cfs_simnet::{cluster, run, TraceGen};

#[test]
fn random_traces_match_the_model() {
    let g = TraceGen { ops: 300, ..TraceGen::default() };
    for seed in 0..5 {
        let t0 = std::time::Instant::now();
        let r = run(&cluster::default_topology(), &FaultScript::default(), &g.generate(seed), seed);
        eprintln!("seed {seed}: {:?} {}", t0.elapsed(), r.summary());
        if !r.passed() {
            eprintln!("{}", r.report().lines().filter(|l| !l.starts_with("op ")).collect::<Vec<_>>().join("\n"));
        }
        assert!(r.passed());
    }
}
