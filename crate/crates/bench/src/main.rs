use std::path::PathBuf;
use std::process::ExitCode;

use cfs_bench::report::{self, Format};
use cfs_bench::runner::{run_workload, Target, Verdict};
use cfs_bench::workload::{WorkloadKind, WorkloadSpec};
use cfs_core::client::{ClientConfig, MountedVolume};
use cfs_core::net::{start_node, TcpTransport};
use cfs_core::node::NodeConfig;
use cfs_core::proto::{AdminOp, NodeSpec};
use cfs_core::types::{NodeId, NodeKind, Replica};
use cfs_simnet::cluster::VolumeSpec;
use cfs_simnet::script::{parse_size, parse_topology, FaultScript, Trace};
use cfs_simnet::{run_with, RunConfig, SimConfig, TraceGen};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cfs", about = "Cluster file system node, admin and benchmark tool")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run benchmark workloads.
    Bench {
        #[command(subcommand)]
        cmd: BenchCmd,
    },
    /// Run a scripted trace on a simulated cluster.
    Cluster {
        #[command(subcommand)]
        cmd: ClusterCmd,
    },
    /// Serve a node, or manage cluster membership.
    Node {
        #[command(subcommand)]
        cmd: NodeCmd,
    },
    Volume {
        #[command(subcommand)]
        cmd: VolumeCmd,
    },
    Partition {
        #[command(subcommand)]
        cmd: PartitionCmd,
    },
}

#[derive(Subcommand)]
enum BenchCmd {
    Run(BenchArgs),
}

#[derive(Args)]
struct BenchArgs {
    /// One of DirCreation, DirStat, DirRemoval, FileCreation, FileRemoval,
    /// TreeCreation, TreeRemoval, SeqWrite, SeqRead, RandWrite, RandRead,
    /// SmallFileWrite, SmallFileRead.
    #[arg(long)]
    workload: WorkloadKind,
    #[arg(long, default_value_t = 1)]
    clients: usize,
    #[arg(long, default_value_t = 1)]
    procs: usize,
    /// Per-process file size; accepts K/M/G suffixes.
    #[arg(long, default_value = "40M", value_parser = size)]
    file_size: u64,
    #[arg(long, default_value = "8K", value_parser = size)]
    small_file_size: u64,
    /// Total measured operations across all processes.
    #[arg(long, default_value_t = 1000)]
    ops: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// `sim`, or `tcp:` plus comma-separated manager addresses
    /// (`[id@]host:port`).
    #[arg(long, default_value = "sim")]
    target: Target,
    /// Also write the report here; `.json` paths get JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Volume to use on a TCP target.
    #[arg(long, default_value = "vol")]
    volume: String,
    /// Meta partitions of the simulated volume.
    #[arg(long, default_value_t = 4)]
    meta_partitions: usize,
    /// Topology file for the simulated cluster.
    #[arg(long)]
    topology: Option<PathBuf>,
    /// Existing directory to run in; TCP runs make a fresh one when absent.
    #[arg(long)]
    root: Option<String>,
}

#[derive(Subcommand)]
enum ClusterCmd {
    Sim {
        #[arg(long)]
        topology: PathBuf,
        #[arg(long)]
        faults: PathBuf,
        /// Workload trace; a random one is generated when absent.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Ops in the generated trace.
        #[arg(long, default_value_t = 200)]
        ops: usize,
        /// Write the machine-readable summary here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Skip the per-op comparison with the reference model, so ops may
        /// fail while faults are active; final state and invariants are
        /// still checked.
        #[arg(long)]
        lenient: bool,
    },
}

#[derive(Args)]
struct Managers {
    /// Manager addresses, comma separated, each `[id@]host:port`.
    #[arg(long)]
    managers: String,
}

#[derive(Subcommand)]
enum NodeCmd {
    /// Run one node of a topology until killed.
    Serve {
        #[arg(long)]
        topology: PathBuf,
        #[arg(long)]
        id: u32,
        /// Directory for persistent state; in memory when absent.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    Add {
        #[command(flatten)]
        m: Managers,
        #[arg(long)]
        id: u32,
        /// meta or data
        #[arg(long)]
        kind: String,
        #[arg(long)]
        addr: String,
        #[arg(long, value_parser = size)]
        capacity: u64,
        #[arg(long)]
        raft_set: u32,
    },
    Decommission {
        #[command(flatten)]
        m: Managers,
        #[arg(long)]
        id: u32,
    },
    List {
        #[command(flatten)]
        m: Managers,
    },
}

#[derive(Subcommand)]
enum VolumeCmd {
    Create {
        #[command(flatten)]
        m: Managers,
        #[arg(long)]
        name: String,
        #[arg(long, default_value_t = 3)]
        replicas: usize,
        #[arg(long, default_value_t = 3)]
        meta: usize,
        #[arg(long, default_value_t = 3)]
        data: usize,
        #[arg(long, value_parser = size)]
        small_file_threshold: Option<u64>,
    },
    Info {
        #[command(flatten)]
        m: Managers,
        #[arg(long)]
        name: String,
    },
    Expand {
        #[command(flatten)]
        m: Managers,
        #[arg(long)]
        name: String,
        #[arg(long)]
        count: Option<usize>,
    },
}

#[derive(Subcommand)]
enum PartitionCmd {
    List {
        #[command(flatten)]
        m: Managers,
        #[arg(long)]
        volume: Option<String>,
    },
    Split {
        #[command(flatten)]
        m: Managers,
        #[arg(long)]
        id: u64,
    },
    Readonly {
        #[command(flatten)]
        m: Managers,
        #[arg(long)]
        id: u64,
    },
}

fn size(s: &str) -> Result<u64, String> {
    parse_size(s).ok_or_else(|| format!("bad size {s:?}"))
}

fn managers(m: &Managers) -> Result<Vec<Replica>, String> {
    match format!("tcp:{}", m.managers).parse::<Target>()? {
        Target::Tcp { managers, .. } => Ok(managers),
        Target::Sim(_) => unreachable!(),
    }
}

fn admin(m: &Managers, op: AdminOp) -> Result<(), String> {
    let managers = managers(m)?;
    let mut c = MountedVolume::admin_client(TcpTransport::new(), managers, ClientConfig::default(), rand::random());
    let reply = futures::executor::block_on(c.admin(op)).map_err(|e| e.to_string())?;
    println!("{}", serde_json::to_string_pretty(&reply).map_err(|e| e.to_string())?);
    Ok(())
}

fn read(path: &PathBuf) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn bench(a: BenchArgs) -> Result<bool, String> {
    let spec = WorkloadSpec {
        kind: a.workload,
        clients: a.clients,
        procs: a.procs,
        file_size: a.file_size,
        small_file_size: a.small_file_size,
        ops: a.ops,
        seed: a.seed,
        root: a.root.unwrap_or_default(),
    };
    let target = match a.target {
        Target::Sim(mut t) => {
            if let Some(p) = &a.topology {
                t.topology = parse_topology(&read(p)?).map_err(|e| e.to_string())?;
            }
            t.volume = VolumeSpec { meta: a.meta_partitions, ..t.volume };
            Target::Sim(t)
        }
        Target::Tcp { managers, .. } => Target::Tcp { managers, volume: a.volume },
    };
    let r = run_workload(&spec, &target).map_err(|e| e.to_string())?;
    print!("{}", report::emit(&r, Format::Text));
    if let Some(p) = &a.report {
        let fmt = Format::for_path(&p.to_string_lossy());
        std::fs::write(p, report::emit(&r, fmt)).map_err(|e| format!("{}: {e}", p.display()))?;
    }
    Ok(r.verdict == Verdict::Passed)
}

fn cluster_sim(
    topology: &PathBuf,
    faults: &PathBuf,
    trace: Option<&PathBuf>,
    seed: u64,
    ops: usize,
    report: Option<&PathBuf>,
    lenient: bool,
) -> Result<bool, String> {
    let topo = parse_topology(&read(topology)?).map_err(|e| format!("{}: {e}", topology.display()))?;
    let faults = FaultScript::parse(&read(faults)?).map_err(|e| format!("{}: {e}", faults.display()))?;
    let trace = match trace {
        Some(p) => Trace::parse(&read(p)?).map_err(|e| format!("{}: {e}", p.display()))?,
        None => TraceGen { ops, ..TraceGen::default() }.generate(seed),
    };
    let cfg = RunConfig { compare_ops: !lenient, sim: SimConfig { seed, ..SimConfig::default() }, ..RunConfig::default() };
    let res = run_with(&topo, &faults, &trace, &cfg);
    print!("{}", res.report());
    if let Some(p) = report {
        std::fs::write(p, res.summary()).map_err(|e| format!("{}: {e}", p.display()))?;
    }
    Ok(res.passed())
}

fn serve(topology: &PathBuf, id: u32, dir: Option<PathBuf>) -> Result<bool, String> {
    let topo = parse_topology(&read(topology)?).map_err(|e| e.to_string())?;
    let spec = topo.iter().find(|n| n.id == NodeId(id)).cloned().ok_or_else(|| format!("node {id} is not in the topology"))?;
    if let Some(d) = &dir {
        std::fs::create_dir_all(d).map_err(|e| format!("{}: {e}", d.display()))?;
    }
    let h = start_node(spec.clone(), topo, NodeConfig::default(), dir).map_err(|e| format!("{}: {e}", spec.addr))?;
    eprintln!("node {id} ({}) listening on {}", spec.kind.as_str(), h.addr);
    h.wait();
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::Bench { cmd: BenchCmd::Run(a) } => bench(a),
        Cmd::Cluster { cmd: ClusterCmd::Sim { topology, faults, trace, seed, ops, report, lenient } } => {
            cluster_sim(&topology, &faults, trace.as_ref(), seed, ops, report.as_ref(), lenient)
        }
        Cmd::Node { cmd } => match cmd {
            NodeCmd::Serve { topology, id, dir } => serve(&topology, id, dir),
            NodeCmd::Add { m, id, kind, addr, capacity, raft_set } => match NodeKind::parse(&kind) {
                Some(kind) => admin(&m, AdminOp::AddNode(NodeSpec { id: NodeId(id), kind, addr, capacity, raft_set })).map(|_| true),
                None => Err(format!("unknown node kind {kind:?}")),
            },
            NodeCmd::Decommission { m, id } => admin(&m, AdminOp::Decommission { node: NodeId(id) }).map(|_| true),
            NodeCmd::List { m } => admin(&m, AdminOp::ListNodes).map(|_| true),
        },
        Cmd::Volume { cmd } => match cmd {
            VolumeCmd::Create { m, name, replicas, meta, data, small_file_threshold } => {
                admin(&m, AdminOp::CreateVolume { name, replicas, meta, data, small_file_threshold }).map(|_| true)
            }
            VolumeCmd::Info { m, name } => admin(&m, AdminOp::VolumeInfo { volume: name }).map(|_| true),
            VolumeCmd::Expand { m, name, count } => admin(&m, AdminOp::ExpandVolume { volume: name, count }).map(|_| true),
        },
        Cmd::Partition { cmd } => match cmd {
            PartitionCmd::List { m, volume } => admin(&m, AdminOp::ListPartitions { volume }).map(|_| true),
            PartitionCmd::Split { m, id } => admin(&m, AdminOp::SplitPartition { partition: id }).map(|_| true),
            PartitionCmd::Readonly { m, id } => admin(&m, AdminOp::MarkReadOnly { partition: id }).map(|_| true),
        },
    };
    match r {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_valid() {
        Cli::command().debug_assert();
    }

    #[test]
    fn bench_flags_parse() {
        let cli = Cli::try_parse_from([
            "cfs", "bench", "run", "--workload", "FileCreation", "--clients", "2", "--procs", "3", "--file-size", "1M", "--ops", "50",
            "--seed", "9", "--target", "tcp:1@127.0.0.1:7001,127.0.0.1:7002", "--report", "out.json",
        ])
        .unwrap();
        let Cmd::Bench { cmd: BenchCmd::Run(a) } = cli.cmd else { panic!("wrong command") };
        assert_eq!(a.workload, WorkloadKind::FileCreation);
        assert_eq!((a.clients, a.procs, a.file_size, a.ops, a.seed), (2, 3, 1 << 20, 50, 9));
        let Target::Tcp { managers, .. } = a.target else { panic!("wrong target") };
        assert_eq!(managers[0], Replica { node: NodeId(1), addr: "127.0.0.1:7001".into() });
        assert_eq!(managers[1].addr, "127.0.0.1:7002");
    }
}
