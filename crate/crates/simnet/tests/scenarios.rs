use cfs_simnet::scenarios::{self, CrashRole};
use cfs_simnet::{cluster, random_faults, run, run_text, run_with, RunConfig, TraceGen};
use cfs_simnet::script::FaultScript;

#[test]
fn identical_inputs_give_identical_results() {
    let topo = cluster::default_topology();
    let trace = TraceGen { ops: 150, spacing_ms: 10, ..TraceGen::default() }.generate(11);
    let faults = random_faults(&topo, 11, 3_000);
    let a = run(&topo, &faults, &trace, 11);
    let b = run(&topo, &faults, &trace, 11);
    assert_eq!(a, b);
    assert_eq!(a.report(), b.report());
    assert_eq!(a.summary(), b.summary());
    let c = run(&topo, &faults, &trace, 12);
    assert_ne!(a.report(), c.report(), "a different seed should change timing");
}

#[test]
fn text_inputs_run_end_to_end() {
    let topo = "node 1 manager sim:1 1G 0\nnode 2 manager sim:2 1G 0\nnode 3 manager sim:3 1G 0\n\
                node 4 meta sim:4 8G 1\nnode 5 meta sim:5 8G 1\nnode 6 meta sim:6 8G 1\n\
                node 7 data sim:7 64G 2\nnode 8 data sim:8 64G 2\nnode 9 data sim:9 64G 2\n";
    let trace = "0 mkdir /d\n0 create /d/f\n10 write /d/f 0 5000 1\n20 append /d/f 200000 2\n30 read /d/f\n\
                 40 link /d/f /g\n50 unlink /d/f\n60 rmdir /d\n70 stat /g\n80 ls /\n";
    let r = run_text(topo, "500 drop-next 3\n", trace, 3).unwrap();
    assert!(r.passed(), "{}", r.report());
    assert_eq!(r.faults, vec![(500, "drop-next 3".to_string())]);
    assert!(r.report().contains("op ") && r.summary().contains("\"passed\":true"));
    assert!(run_text("node 1 storage x 1G 0\n", "", "", 1).is_err());
}

#[test]
fn follower_crash_mid_append_keeps_committed_prefixes() {
    let r = scenarios::append_crash(21, CrashRole::Follower, 100, 30);
    assert!(r.passed(), "{r:#?}");
    assert!(r.readonly_seen, "{r:#?}");
    assert!(r.acked > 90, "{r:#?}");
}

#[test]
fn leader_crash_mid_append_keeps_committed_prefixes() {
    let r = scenarios::append_crash(22, CrashRole::Leader, 100, 30);
    assert!(r.passed(), "{r:#?}");
    assert!(r.readonly_seen, "{r:#?}");
}

#[test]
fn manager_leader_partition_elects_a_new_leader() {
    let r = scenarios::manager_failover(5);
    assert!(r.new_leader.is_some() && r.new_leader != r.old_leader, "{r:?}");
    assert!(r.view_served, "{r:?}");
}

#[test]
fn grouped_heartbeats_are_per_node_pair() {
    let topo = cluster::default_topology();
    let grouped = scenarios::heartbeats_per_interval(&topo, 1, 3_000, 10);
    let flat = scenarios::heartbeats_per_interval(&scenarios::ungrouped(&topo), 1, 3_000, 10);
    assert!(grouped.iter().all(|n| *n == 18), "{grouped:?}");
    assert!(flat.iter().all(|n| *n == 72), "{flat:?}");
}

#[test]
fn random_faults_keep_the_invariants() {
    let topo = cluster::topology(3, 3, 6);
    let g = TraceGen { ops: 200, spacing_ms: 25, ..TraceGen::default() };
    let mut cfg = RunConfig { compare_ops: false, ..RunConfig::default() };
    for seed in 0..20 {
        cfg.sim.seed = seed;
        let r = run_with(&topo, &random_faults(&topo, seed, 8_000), &g.generate(seed), &cfg);
        assert!(r.passed(), "{}", r.report());
    }
    let _ = FaultScript::default();
}
