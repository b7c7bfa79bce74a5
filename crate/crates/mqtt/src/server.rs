//! Threaded TCP broker.
//!
//! One handler thread per connection. The session table and the per-client
//! write halves live behind a single mutex; deliveries are written while the
//! lock is held so every subscriber sees publishes in dispatch order.

use std::collections::HashMap;
use std::io::{self, ErrorKind, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::broker::Broker;
use crate::codec::{decode_packet, encode_packet, Packet};

const POLL_INTERVAL: Duration = Duration::from_millis(50);
const CONNECT_TIMEOUT: Duration = Duration::from_secs(10);
const WRITE_TIMEOUT: Duration = Duration::from_secs(2);

struct Writer {
    conn: u64,
    stream: TcpStream,
}

#[derive(Default)]
struct ServerState {
    broker: Broker,
    writers: HashMap<String, Writer>,
}

struct Shared {
    state: Mutex<ServerState>,
    stop: AtomicBool,
    next_conn: AtomicU64,
    epoch: Instant,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, ServerState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn now_ns(&self) -> u64 {
        self.epoch.elapsed().as_nanos() as u64
    }
}

pub struct BrokerServer {
    listener: TcpListener,
    shared: Arc<Shared>,
}

impl BrokerServer {
    pub fn bind<A: ToSocketAddrs>(addr: A) -> io::Result<BrokerServer> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        Ok(BrokerServer {
            listener,
            shared: Arc::new(Shared {
                state: Mutex::new(ServerState::default()),
                stop: AtomicBool::new(false),
                next_conn: AtomicU64::new(1),
                epoch: Instant::now(),
            }),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Returns a flag that stops [`BrokerServer::run`] when set.
    pub fn stop_flag(&self) -> ServerHandle {
        ServerHandle {
            addr: self.listener.local_addr().ok(),
            shared: self.shared.clone(),
            thread: None,
        }
    }

    /// Runs the accept loop on a background thread.
    pub fn spawn(self) -> ServerHandle {
        let mut handle = self.stop_flag();
        handle.thread = Some(thread::spawn(move || {
            if let Err(e) = self.run() {
                log::error!("broker accept loop failed: {e}");
            }
        }));
        handle
    }

    /// Accepts connections until the stop flag is raised.
    pub fn run(self) -> io::Result<()> {
        log::info!("broker listening on {}", self.listener.local_addr()?);
        while !self.shared.stop.load(Ordering::Acquire) {
            match self.listener.accept() {
                Ok((stream, peer)) => {
                    let shared = self.shared.clone();
                    thread::spawn(move || {
                        if let Err(e) = handle_connection(stream, &shared) {
                            log::debug!("connection from {peer} ended: {e}");
                        }
                    });
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(POLL_INTERVAL),
                Err(e) => return Err(e),
            }
        }
        let mut st = self.shared.lock();
        for (_, w) in st.writers.drain() {
            let _ = w.stream.shutdown(Shutdown::Both);
        }
        Ok(())
    }
}

/// Control handle for a running broker.
pub struct ServerHandle {
    addr: Option<SocketAddr>,
    shared: Arc<Shared>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> Option<SocketAddr> {
        self.addr
    }

    pub fn client_count(&self) -> usize {
        self.shared.lock().broker.client_count()
    }

    pub fn stop(&self) {
        self.shared.stop.store(true, Ordering::Release);
    }

    pub fn shutdown(mut self) {
        self.stop();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn write_packet(stream: &mut TcpStream, packet: &Packet) -> io::Result<()> {
    let bytes = encode_packet(packet).map_err(|e| io::Error::new(ErrorKind::InvalidInput, e))?;
    stream.write_all(&bytes)
}

fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut)
}

fn protocol_error(msg: impl Into<String>) -> io::Error {
    io::Error::new(ErrorKind::InvalidData, msg.into())
}

/// Reads until one whole packet is buffered. `Ok(None)` on timeout.
fn read_packet(stream: &mut TcpStream, buf: &mut Vec<u8>) -> io::Result<Option<Packet>> {
    loop {
        if let Some((packet, used)) =
            decode_packet(buf).map_err(|e| protocol_error(e.to_string()))?
        {
            buf.drain(..used);
            return Ok(Some(packet));
        }
        let mut chunk = [0u8; 4096];
        match stream.read(&mut chunk) {
            Ok(0) => return Err(io::Error::new(ErrorKind::UnexpectedEof, "peer closed")),
            Ok(n) => buf.extend_from_slice(&chunk[..n]),
            Err(e) if is_timeout(&e) => return Ok(None),
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
}

fn handle_connection(mut stream: TcpStream, shared: &Shared) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(CONNECT_TIMEOUT))?;
    stream.set_write_timeout(Some(WRITE_TIMEOUT))?;
    let mut buf = Vec::new();
    let (client_id, keepalive_s) = match read_packet(&mut stream, &mut buf)? {
        Some(Packet::Connect {
            client_id,
            keepalive_s,
        }) => (client_id, keepalive_s),
        Some(other) => return Err(protocol_error(format!("expected CONNECT, got {other:?}"))),
        None => return Err(protocol_error("no CONNECT before timeout")),
    };
    let conn = shared.next_conn.fetch_add(1, Ordering::Relaxed);
    let client_id = {
        let mut st = shared.lock();
        let now = shared.now_ns();
        let (id, connack) = st.broker.connect(&client_id, keepalive_s, now);
        write_packet(&mut stream, &connack)?;
        if let Some(old) = st.writers.insert(
            id.clone(),
            Writer {
                conn,
                stream: stream.try_clone()?,
            },
        ) {
            let _ = old.stream.shutdown(Shutdown::Both);
        }
        id
    };
    log::info!("client {client_id:?} connected (keepalive {keepalive_s}s)");
    stream.set_read_timeout(Some(POLL_INTERVAL))?;
    let result = serve_session(&mut stream, &mut buf, shared, &client_id, conn);
    let mut st = shared.lock();
    if st.writers.get(&client_id).is_some_and(|w| w.conn == conn) {
        st.writers.remove(&client_id);
        st.broker.disconnect(&client_id);
    }
    drop(st);
    let _ = stream.shutdown(Shutdown::Both);
    log::info!("client {client_id:?} disconnected");
    result
}

fn serve_session(
    stream: &mut TcpStream,
    buf: &mut Vec<u8>,
    shared: &Shared,
    client_id: &str,
    conn: u64,
) -> io::Result<()> {
    loop {
        if shared.stop.load(Ordering::Acquire) {
            return Ok(());
        }
        let packet = read_packet(stream, buf)?;
        let mut st = shared.lock();
        if !st.writers.get(client_id).is_some_and(|w| w.conn == conn) {
            return Err(protocol_error("session taken over or expired"));
        }
        let now = shared.now_ns();
        let Some(packet) = packet else {
            let expired = st.broker.expire(now);
            for id in &expired {
                if let Some(w) = st.writers.remove(id) {
                    let _ = w.stream.shutdown(Shutdown::Both);
                }
            }
            if expired.iter().any(|id| id == client_id) {
                return Err(io::Error::new(ErrorKind::TimedOut, "keepalive exceeded"));
            }
            continue;
        };
        let reply = match packet {
            Packet::Publish(publish) => {
                let dispatch = st
                    .broker
                    .dispatch(client_id, &publish, now)
                    .map_err(|e| protocol_error(e.to_string()))?;
                let mut failed = Vec::new();
                for (id, msg) in dispatch.deliveries {
                    if let Some(w) = st.writers.get_mut(&id) {
                        if let Err(e) = write_packet(&mut w.stream, &Packet::Publish(msg)) {
                            log::warn!("delivery to {id:?} failed: {e}");
                            failed.push(id);
                        }
                    }
                }
                for id in failed {
                    if let Some(w) = st.writers.remove(&id) {
                        let _ = w.stream.shutdown(Shutdown::Both);
                    }
                    st.broker.disconnect(&id);
                }
                dispatch.ack
            }
            Packet::Subscribe { packet_id, filters } => Some(
                st.broker
                    .subscribe(client_id, packet_id, &filters, now)
                    .map_err(|e| protocol_error(e.to_string()))?,
            ),
            Packet::Pingreq => Some(
                st.broker
                    .ping(client_id, now)
                    .map_err(|e| protocol_error(e.to_string()))?,
            ),
            Packet::Puback { .. } => {
                let _ = st.broker.touch(client_id, now);
                None
            }
            Packet::Disconnect => return Ok(()),
            other => return Err(protocol_error(format!("unexpected {other:?} from client"))),
        };
        if let Some(reply) = reply {
            if let Some(w) = st.writers.get_mut(client_id) {
                write_packet(&mut w.stream, &reply)?;
            }
        }
    }
}
