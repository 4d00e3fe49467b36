//! A nine-node cluster on loopback sockets, driven by wall-clock time.

use std::net::TcpListener;
use std::time::{Duration, Instant};

use cfs_core::client::{ClientConfig, MountedVolume};
use cfs_core::net::{start_node_on, TcpTransport};
use cfs_core::node::NodeConfig;
use cfs_core::proto::{AdminOp, AdminReply, NodeSpec};
use cfs_core::types::{NodeId, NodeKind, Replica};
use futures::executor::block_on;

#[test]
fn loopback_cluster_round_trip() {
    let kinds = [NodeKind::Manager, NodeKind::Meta, NodeKind::Data];
    let mut listeners = Vec::new();
    let mut topo = Vec::new();
    for (i, kind) in kinds.iter().flat_map(|k| std::iter::repeat(*k).take(3)).enumerate() {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = l.local_addr().unwrap().to_string();
        topo.push(NodeSpec { id: NodeId(i as u32 + 1), kind, addr, capacity: 1 << 30, raft_set: i as u32 / 3 });
        listeners.push(l);
    }
    let handles: Vec<_> = listeners
        .into_iter()
        .zip(topo.clone())
        .map(|(l, spec)| start_node_on(l, spec, topo.clone(), NodeConfig::default(), None).unwrap())
        .collect();
    let managers: Vec<Replica> =
        topo.iter().filter(|n| n.kind == NodeKind::Manager).map(|n| Replica { node: n.id, addr: n.addr.clone() }).collect();

    let mut admin = MountedVolume::admin_client(TcpTransport::new(), managers.clone(), ClientConfig::default(), 7);
    let deadline = Instant::now() + Duration::from_secs(30);
    loop {
        let op = AdminOp::CreateVolume { name: "vol".into(), replicas: 3, meta: 2, data: 2, small_file_threshold: None };
        match block_on(admin.admin(op)) {
            Ok(AdminReply::Created(ids)) => {
                assert_eq!(ids.len(), 4);
                break;
            }
            other => {
                assert!(Instant::now() < deadline, "volume not created: {other:?}");
                std::thread::sleep(Duration::from_millis(100));
            }
        }
    }

    let mut fs = loop {
        match block_on(MountedVolume::mount(TcpTransport::new(), managers.clone(), "vol", ClientConfig::default(), 8)) {
            Ok(fs) => break fs,
            Err(e) => {
                assert!(Instant::now() < deadline, "mount failed: {e}");
                std::thread::sleep(Duration::from_millis(100));
            }
        }
    };
    let data: Vec<u8> = (0..300_000u32).map(|i| (i * 7 % 251) as u8).collect();
    block_on(async {
        fs.mkdir("/d").await.unwrap();
        fs.create_file("/d/f").await.unwrap();
        let mut h = fs.open("/d/f", true).await.unwrap();
        fs.write(&mut h, &data).await.unwrap();
        fs.close(h).await.unwrap();
        assert_eq!(fs.read_file("/d/f").await.unwrap(), data);
        let names: Vec<String> = fs.list_dir("/d").await.unwrap().into_iter().map(|(d, _)| d.name).collect();
        assert_eq!(names, vec!["f".to_string()]);
    });
    for h in handles {
        h.shutdown();
    }
}
