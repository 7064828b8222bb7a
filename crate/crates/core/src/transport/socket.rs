//! TCP byte-stream backend.
//!
//! Every endpoint opens one outbound stream to each other endpoint and
//! accepts one inbound stream from each. An outbound stream starts with the
//! sender's 2-byte wire address, followed by length-prefixed frames. One
//! reader thread per inbound stream decodes frames into the local inbox, so
//! per-pair FIFO order is the TCP stream order.

use std::collections::BTreeMap;
use std::io::{BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};

use super::envelope::{Address, Envelope, PartyId};
use super::inbox::{Inbox, MatchKey};
use super::{Backend, TransportError, TransportHandle};

const CONNECT_RETRY: Duration = Duration::from_millis(50);

#[derive(Debug, Default)]
struct InboundState {
    inbox: Inbox,
    accepted: usize,
    open_readers: usize,
    failure: Option<TransportError>,
}

#[derive(Debug)]
struct Inbound {
    expected: usize,
    state: Mutex<InboundState>,
    cv: Condvar,
}

impl Inbound {
    fn lock(&self) -> MutexGuard<'_, InboundState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn closed(&self, st: &InboundState) -> bool {
        st.accepted == self.expected && st.open_readers == 0
    }
}

/// Constructors for socket-backed [`TransportHandle`]s.
pub struct SocketEndpoint;

impl SocketEndpoint {
    /// Joins the mesh as `me`. `directory` lists the listening address of
    /// every endpoint (parties and mediator); `listener` must be bound to
    /// `me`'s entry. Outbound connections are retried until `connect_timeout`.
    pub fn join(
        me: Address,
        parties: u16,
        listener: TcpListener,
        directory: &BTreeMap<Address, SocketAddr>,
        connect_timeout: Duration,
    ) -> Result<TransportHandle, TransportError> {
        let peers: Vec<(Address, SocketAddr)> =
            directory.iter().filter(|(addr, _)| **addr != me).map(|(a, s)| (*a, *s)).collect();
        let expected_endpoints = usize::from(parties) + 1;
        if directory.len() != expected_endpoints || !directory.contains_key(&me) {
            return Err(TransportError::Address(format!(
                "directory must list {expected_endpoints} endpoints including {me}"
            )));
        }
        let inbound = Arc::new(Inbound { expected: peers.len(), state: Mutex::default(), cv: Condvar::new() });
        spawn_acceptor(listener, Arc::clone(&inbound), parties);

        let deadline = Instant::now() + connect_timeout;
        let mut outgoing = BTreeMap::new();
        for (addr, sock) in peers {
            let mut stream = connect_with_retry(sock, deadline)?;
            stream.set_nodelay(true)?;
            stream.write_all(&me.to_wire().to_be_bytes())?;
            outgoing.insert(addr, stream);
        }
        debug!("{me} connected to {} peers", outgoing.len());
        let backend = SocketBackend { me, parties, outgoing, inbound };
        Ok(TransportHandle::new(me, parties, Box::new(backend)))
    }

    /// Builds a full mesh on loopback: one handle per party plus the mediator.
    pub fn local_cluster(parties: u16) -> Result<(Vec<TransportHandle>, TransportHandle), TransportError> {
        let mut listeners = Vec::new();
        let mut directory = BTreeMap::new();
        let addrs: Vec<Address> =
            PartyId::all(parties).map(Address::Party).chain(std::iter::once(Address::Mediator)).collect();
        for &addr in &addrs {
            let listener = TcpListener::bind("127.0.0.1:0")?;
            directory.insert(addr, listener.local_addr()?);
            listeners.push((addr, listener));
        }
        let mut handles = Vec::new();
        for (addr, listener) in listeners {
            handles.push(Self::join(addr, parties, listener, &directory, Duration::from_secs(10))?);
        }
        let mediator = handles.pop().expect("mediator handle");
        Ok((handles, mediator))
    }
}

fn connect_with_retry(addr: SocketAddr, deadline: Instant) -> Result<TcpStream, TransportError> {
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() < deadline => {
                debug!("connect to {addr} failed ({e}); retrying");
                thread::sleep(CONNECT_RETRY);
            }
            Err(e) => return Err(TransportError::Io(format!("connect to {addr}: {e}"))),
        }
    }
}

fn spawn_acceptor(listener: TcpListener, inbound: Arc<Inbound>, parties: u16) {
    thread::spawn(move || {
        for _ in 0..inbound.expected {
            let stream = match listener.accept() {
                Ok((s, _)) => s,
                Err(e) => {
                    warn!("accept failed: {e}");
                    let mut st = inbound.lock();
                    st.failure = Some(e.into());
                    st.accepted = inbound.expected;
                    inbound.cv.notify_all();
                    return;
                }
            };
            {
                let mut st = inbound.lock();
                st.accepted += 1;
                st.open_readers += 1;
            }
            let inbound = Arc::clone(&inbound);
            thread::spawn(move || read_loop(stream, inbound, parties));
        }
    });
}

fn read_loop(stream: TcpStream, inbound: Arc<Inbound>, parties: u16) {
    let mut reader = BufReader::new(stream);
    let result = (|| -> Result<(), TransportError> {
        let mut hello = [0u8; 2];
        reader.read_exact(&mut hello)?;
        let peer = Address::from_wire(u16::from_be_bytes(hello));
        if let Address::Party(p) = peer {
            PartyId::new(p.index(), parties)?;
        }
        while let Some(env) = Envelope::read_from(&mut reader)? {
            if env.from != peer {
                return Err(TransportError::Malformed(format!("{peer} sent a frame claiming to be {}", env.from)));
            }
            let mut st = inbound.lock();
            st.inbox.push(env);
            inbound.cv.notify_all();
        }
        Ok(())
    })();
    let mut st = inbound.lock();
    if let Err(e) = result {
        warn!("inbound stream failed: {e}");
        st.failure.get_or_insert(e);
    }
    st.open_readers -= 1;
    inbound.cv.notify_all();
}

struct SocketBackend {
    me: Address,
    parties: u16,
    outgoing: BTreeMap<Address, TcpStream>,
    inbound: Arc<Inbound>,
}

impl SocketBackend {
    fn stream(&mut self, to: Address) -> Result<&mut TcpStream, TransportError> {
        self.outgoing.get_mut(&to).ok_or_else(|| TransportError::Address(format!("no connection to {to}")))
    }
}

impl Backend for SocketBackend {
    fn deliver(&mut self, env: Envelope) -> Result<(), TransportError> {
        let frame = env.encode()?;
        if env.is_broadcast() {
            let me = self.me;
            for p in PartyId::all(self.parties).map(Address::Party).filter(|a| *a != me) {
                self.stream(p)?.write_all(&frame)?;
            }
        } else {
            self.stream(env.to)?.write_all(&frame)?;
        }
        Ok(())
    }

    fn next_match(&mut self, key: &MatchKey, timeout: Option<Duration>) -> Result<Envelope, TransportError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let inbound = &self.inbound;
        let mut st = inbound.lock();
        loop {
            if let Some(env) = st.inbox.take(key) {
                return Ok(env);
            }
            if let Some(err) = &st.failure {
                return Err(err.clone());
            }
            if inbound.closed(&st) {
                return Err(TransportError::ChannelClosed);
            }
            st = match deadline {
                None => inbound.cv.wait(st).unwrap_or_else(|e| e.into_inner()),
                Some(deadline) => {
                    let now = Instant::now();
                    if now >= deadline {
                        return Err(TransportError::Timeout);
                    }
                    inbound.cv.wait_timeout(st, deadline - now).unwrap_or_else(|e| e.into_inner()).0
                }
            };
        }
    }
}

impl Drop for SocketBackend {
    fn drop(&mut self) {
        for stream in self.outgoing.values() {
            let _ = stream.shutdown(Shutdown::Write);
        }
    }
}
