//! TCP runtime. A node runs one event-loop thread that owns its
//! `ServerNode`; reader threads feed it frames and per-peer sender threads
//! drain its output. Clients use a blocking transport.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::io::{self, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::client::{CallError, Transport};
use crate::node::{NodeConfig, ServerNode};
use crate::proto::{Message, NodeSpec, Request, Response};
use crate::types::{Endpoint, NodeId, Replica};
use crate::wire;

const TICK_MS: u64 = 20;
const CONNECT_TIMEOUT: Duration = Duration::from_millis(300);

type Clients = Arc<Mutex<HashMap<u64, TcpStream>>>;

/// A running node. Dropping the handle does not stop it; call `shutdown`.
pub struct NodeHandle {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    main: Option<JoinHandle<()>>,
}

impl NodeHandle {
    /// Stops the event loop and waits for it. Open connections close as
    /// their threads notice.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect_timeout(&self.addr, CONNECT_TIMEOUT);
        if let Some(h) = self.main.take() {
            let _ = h.join();
        }
    }

    pub fn wait(mut self) {
        if let Some(h) = self.main.take() {
            let _ = h.join();
        }
    }
}

/// Binds the node's own address and starts it.
pub fn start_node(spec: NodeSpec, topology: Vec<NodeSpec>, cfg: NodeConfig, dir: Option<PathBuf>) -> io::Result<NodeHandle> {
    let listener = TcpListener::bind(&spec.addr)?;
    start_node_on(listener, spec, topology, cfg, dir)
}

/// Starts a node on an already bound listener.
pub fn start_node_on(
    listener: TcpListener,
    spec: NodeSpec,
    topology: Vec<NodeSpec>,
    cfg: NodeConfig,
    dir: Option<PathBuf>,
) -> io::Result<NodeHandle> {
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel::<(Endpoint, Message)>();
    let clients: Clients = Arc::default();
    let next_client = Arc::new(AtomicU64::new(1));

    {
        let (stop, clients) = (stop.clone(), clients.clone());
        thread::spawn(move || {
            for conn in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(conn) = conn else { continue };
                let _ = conn.set_nodelay(true);
                let (tx, clients, next_client) = (tx.clone(), clients.clone(), next_client.clone());
                thread::spawn(move || read_loop(conn, tx, clients, next_client));
            }
        });
    }

    let seed = rand::thread_rng().gen();
    let stop2 = stop.clone();
    let main = thread::spawn(move || {
        let stop = stop2;
        let start = Instant::now();
        let now = || start.elapsed().as_millis() as u64;
        let me = spec.id;
        let addrs: HashMap<NodeId, String> = topology.iter().map(|n| (n.id, n.addr.clone())).collect();
        let mut node = ServerNode::new(spec, &topology, cfg, dir, now(), seed);
        let mut peers: HashMap<NodeId, Sender<Vec<u8>>> = HashMap::new();
        let mut next_tick = now() + TICK_MS;
        while !stop.load(Ordering::SeqCst) {
            let wait = next_tick.saturating_sub(now());
            let out = match rx.recv_timeout(Duration::from_millis(wait)) {
                Ok((from, msg)) => node.handle(now(), from, msg),
                Err(RecvTimeoutError::Timeout) => Vec::new(),
                Err(RecvTimeoutError::Disconnected) => break,
            };
            let mut out = out;
            if now() >= next_tick {
                out.extend(node.tick(now()));
                next_tick = now() + TICK_MS;
            }
            for env in out {
                let frame = wire::encode(&env.msg);
                match env.to {
                    Endpoint::Node(n) if n == me => {}
                    Endpoint::Node(n) => {
                        let Some(a) = addrs.get(&n) else { continue };
                        let tx = peers.entry(n).or_insert_with(|| spawn_peer(me, a.clone()));
                        let _ = tx.send(frame);
                    }
                    Endpoint::Client(c) => {
                        let mut map = clients.lock().unwrap();
                        if let Some(s) = map.get_mut(&c) {
                            if s.write_all(&frame).is_err() {
                                map.remove(&c);
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(NodeHandle { addr, stop, main: Some(main) })
}

fn read_loop(conn: TcpStream, tx: Sender<(Endpoint, Message)>, clients: Clients, next_client: Arc<AtomicU64>) {
    let mut r = io::BufReader::new(conn.try_clone().expect("clone socket"));
    let Ok(first) = wire::read_frame(&mut r) else { return };
    let (from, first) = match first {
        Message::Hello { node } => (Endpoint::Node(node), None),
        m => {
            let id = next_client.fetch_add(1, Ordering::SeqCst);
            clients.lock().unwrap().insert(id, conn);
            (Endpoint::Client(id), Some(m))
        }
    };
    if let Some(m) = first {
        if tx.send((from, m)).is_err() {
            return;
        }
    }
    while let Ok(m) = wire::read_frame(&mut r) {
        if tx.send((from, m)).is_err() {
            break;
        }
    }
    if let Endpoint::Client(id) = from {
        clients.lock().unwrap().remove(&id);
    }
}

/// One sender thread per peer: connects lazily, reconnects after errors
/// and drops frames while the peer is unreachable.
fn spawn_peer(me: NodeId, addr: String) -> Sender<Vec<u8>> {
    let (tx, rx): (Sender<Vec<u8>>, Receiver<Vec<u8>>) = mpsc::channel();
    thread::spawn(move || {
        let mut conn: Option<TcpStream> = None;
        let mut retry_at = Instant::now();
        for frame in rx {
            if conn.is_none() && Instant::now() >= retry_at {
                conn = connect(&addr).ok().and_then(|mut s| {
                    s.write_all(&wire::encode(&Message::Hello { node: me })).ok()?;
                    Some(s)
                });
                if conn.is_none() {
                    retry_at = Instant::now() + Duration::from_millis(200);
                }
            }
            if let Some(s) = &mut conn {
                if s.write_all(&frame).is_err() {
                    conn = None;
                }
            }
        }
    });
    tx
}

fn connect(addr: &str) -> io::Result<TcpStream> {
    let sa = addr.to_socket_addrs()?.next().ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, "no address"))?;
    let s = TcpStream::connect_timeout(&sa, CONNECT_TIMEOUT)?;
    s.set_nodelay(true)?;
    Ok(s)
}

/// Blocking transport over TCP. Futures it returns are already complete,
/// so any executor (e.g. `futures::executor::block_on`) can drive the
/// client.
pub struct TcpTransport {
    conns: RefCell<HashMap<String, io::BufReader<TcpStream>>>,
    next_rid: Cell<u64>,
    start: Instant,
    rng: RefCell<ChaCha8Rng>,
}

impl Default for TcpTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl TcpTransport {
    pub fn new() -> Self {
        Self {
            conns: RefCell::default(),
            next_rid: Cell::new(1),
            start: Instant::now(),
            rng: RefCell::new(ChaCha8Rng::from_entropy()),
        }
    }

    fn call_blocking(&self, to: &Replica, req: Request, timeout_ms: u64) -> Result<Response, CallError> {
        let rid = self.next_rid.get();
        self.next_rid.set(rid + 1);
        let mut conns = self.conns.borrow_mut();
        if !conns.contains_key(&to.addr) {
            let s = connect(&to.addr).map_err(|e| CallError::Unreachable(e.to_string()))?;
            conns.insert(to.addr.clone(), io::BufReader::new(s));
        }
        let r = conns.get_mut(&to.addr).unwrap();
        let res = exchange(r, rid, req, timeout_ms);
        if res.is_err() {
            conns.remove(&to.addr);
        }
        res
    }
}

fn exchange(r: &mut io::BufReader<TcpStream>, rid: u64, req: Request, timeout_ms: u64) -> Result<Response, CallError> {
    let deadline = Instant::now() + Duration::from_millis(timeout_ms.max(1));
    r.get_mut().write_all(&wire::encode(&Message::Request { rid, req })).map_err(|e| CallError::Unreachable(e.to_string()))?;
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        if left.is_zero() {
            return Err(CallError::Timeout);
        }
        r.get_ref().set_read_timeout(Some(left)).map_err(|e| CallError::Unreachable(e.to_string()))?;
        match wire::read_frame(r) {
            Ok(Message::Response { rid: got, resp }) if got == rid => return Ok(resp),
            // A late reply to an earlier call that timed out.
            Ok(_) => continue,
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => return Err(CallError::Timeout),
            Err(e) => return Err(CallError::Unreachable(e.to_string())),
        }
    }
}

impl Transport for TcpTransport {
    fn call(&self, to: &Replica, req: Request, timeout_ms: u64) -> impl std::future::Future<Output = Result<Response, CallError>> {
        std::future::ready(self.call_blocking(to, req, timeout_ms))
    }

    fn sleep(&self, ms: u64) -> impl std::future::Future<Output = ()> {
        thread::sleep(Duration::from_millis(ms));
        std::future::ready(())
    }

    fn now_ms(&self) -> u64 {
        self.start.elapsed().as_millis() as u64
    }

    fn random(&self) -> u64 {
        self.rng.borrow_mut().gen()
    }
}
