//! Client transports: real TCP and an in-process loopback on the VM clock.

use std::collections::VecDeque;
use std::net::{Shutdown, SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::protocol::{read_frame, write_frame, Message};
use crate::server::Manager;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("connection closed")]
    Closed,
    #[error("request timed out")]
    Timeout,
    #[error("i/o: {0}")]
    Io(String),
}

/// A duplex message channel to the server.
pub trait Transport {
    /// Send a request and wait for its reply. Returns the reply and the
    /// milliseconds spent waiting.
    fn request(&mut self, msg: &Message, now_ms: u64) -> Result<(Message, u64), TransportError>;

    /// Send without waiting for a reply.
    fn send(&mut self, msg: &Message, now_ms: u64) -> Result<(), TransportError>;

    /// Server-initiated messages that have arrived by `now_ms`.
    fn poll(&mut self, now_ms: u64) -> Result<Vec<Message>, TransportError>;

    /// Drop the current connection and open a new one.
    fn reconnect(&mut self) -> Result<(), TransportError>;

    /// Wait `ms` before a retry; returns the milliseconds to charge to the
    /// caller's clock.
    fn pause(&mut self, ms: u64) -> u64;
}

fn is_push(m: &Message) -> bool {
    matches!(m, Message::Flush { .. } | Message::RaChallenge { .. } | Message::Event { .. })
}

struct Link {
    writer: TcpStream,
    replies: Receiver<Message>,
    pushes: Receiver<Message>,
    alive: Arc<AtomicBool>,
}

impl Link {
    fn open(addr: SocketAddr, timeout: Duration) -> Result<Link, TransportError> {
        let stream = TcpStream::connect_timeout(&addr, timeout).map_err(|e| TransportError::Io(e.to_string()))?;
        let _ = stream.set_nodelay(true);
        let mut reader = stream.try_clone().map_err(|e| TransportError::Io(e.to_string()))?;
        let (reply_tx, replies) = mpsc::channel();
        let (push_tx, pushes) = mpsc::channel();
        let alive = Arc::new(AtomicBool::new(true));
        let flag = Arc::clone(&alive);
        // The reader only files messages into mailboxes; the VM thread acts on them.
        thread::spawn(move || {
            while let Ok(m) = read_frame(&mut reader) {
                let tx = if is_push(&m) { &push_tx } else { &reply_tx };
                if tx.send(m).is_err() {
                    break;
                }
            }
            flag.store(false, Ordering::SeqCst);
        });
        Ok(Link { writer: stream, replies, pushes, alive })
    }
}

impl Drop for Link {
    fn drop(&mut self) {
        let _ = self.writer.shutdown(Shutdown::Both);
    }
}

pub struct TcpTransport {
    addr: SocketAddr,
    timeout: Duration,
    link: Option<Link>,
}

impl TcpTransport {
    pub fn connect(addr: impl ToSocketAddrs, timeout_ms: u64) -> Result<TcpTransport, TransportError> {
        let addr = addr
            .to_socket_addrs()
            .map_err(|e| TransportError::Io(e.to_string()))?
            .next()
            .ok_or_else(|| TransportError::Io("address resolves to nothing".into()))?;
        let timeout = Duration::from_millis(timeout_ms.max(1));
        Ok(TcpTransport { addr, timeout, link: Some(Link::open(addr, timeout)?) })
    }

    fn link(&mut self) -> Result<&mut Link, TransportError> {
        match &mut self.link {
            Some(l) if l.alive.load(Ordering::SeqCst) => Ok(l),
            _ => Err(TransportError::Closed),
        }
    }
}

impl Transport for TcpTransport {
    fn request(&mut self, msg: &Message, _now_ms: u64) -> Result<(Message, u64), TransportError> {
        let timeout = self.timeout;
        let link = self.link()?;
        while link.replies.try_recv().is_ok() {}
        let started = Instant::now();
        write_frame(&mut link.writer, msg).map_err(|_| TransportError::Closed)?;
        let reply = match link.replies.recv_timeout(timeout) {
            Ok(m) => m,
            Err(RecvTimeoutError::Timeout) => return Err(TransportError::Timeout),
            Err(RecvTimeoutError::Disconnected) => return Err(TransportError::Closed),
        };
        Ok((reply, started.elapsed().as_millis() as u64))
    }

    fn send(&mut self, msg: &Message, _now_ms: u64) -> Result<(), TransportError> {
        let link = self.link()?;
        write_frame(&mut link.writer, msg).map_err(|_| TransportError::Closed)
    }

    fn poll(&mut self, _now_ms: u64) -> Result<Vec<Message>, TransportError> {
        let Some(link) = &mut self.link else {
            return Err(TransportError::Closed);
        };
        let msgs: Vec<Message> = link.pushes.try_iter().collect();
        if msgs.is_empty() && !link.alive.load(Ordering::SeqCst) {
            return Err(TransportError::Closed);
        }
        Ok(msgs)
    }

    fn reconnect(&mut self) -> Result<(), TransportError> {
        self.link = None;
        self.link = Some(Link::open(self.addr, self.timeout)?);
        Ok(())
    }

    fn pause(&mut self, ms: u64) -> u64 {
        thread::sleep(Duration::from_millis(ms));
        ms
    }
}

/// Simulated network characteristics of a loopback link.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinkModel {
    /// One-way latency.
    pub latency_ms: u64,
    /// Payload bytes moved per millisecond; 0 means unlimited.
    pub bytes_per_ms: u64,
    /// Also sleep for the simulated delays, so wall-clock time reflects them.
    pub realtime: bool,
}

impl Default for LinkModel {
    fn default() -> Self {
        LinkModel { latency_ms: 1, bytes_per_ms: 1000, realtime: false }
    }
}

/// In-process transport. Time is the caller's virtual clock: the server
/// handles each message at its simulated arrival time, and its policy timers
/// advance only when the client polls.
pub struct LoopbackTransport {
    server: Arc<Mutex<Manager>>,
    link: LinkModel,
    bound: Option<String>,
    inbox: VecDeque<(u64, Message)>,
    connected: bool,
}

impl LoopbackTransport {
    pub fn new(server: Arc<Mutex<Manager>>, link: LinkModel) -> Self {
        LoopbackTransport { server, link, bound: None, inbox: VecDeque::new(), connected: true }
    }

    pub fn server(&self) -> &Arc<Mutex<Manager>> {
        &self.server
    }

    /// Simulate a dropped connection; calls fail until `reconnect`.
    pub fn sever(&mut self) {
        if let Some(sid) = self.bound.take() {
            self.server.lock().expect("lock").detach(&sid);
        }
        self.inbox.clear();
        self.connected = false;
    }

    fn sleep(&self, ms: u64) {
        if self.link.realtime && ms > 0 {
            thread::sleep(Duration::from_millis(ms));
        }
    }

    fn transfer_ms(&self, msg: &Message) -> u64 {
        let bytes = match msg {
            Message::BlockResp { payload, .. } => payload.len() as u64,
            _ => 0,
        };
        if self.link.bytes_per_ms == 0 {
            0
        } else {
            bytes.div_ceil(self.link.bytes_per_ms)
        }
    }
}

impl Drop for LoopbackTransport {
    fn drop(&mut self) {
        if let Some(sid) = self.bound.take() {
            if let Ok(mut m) = self.server.lock() {
                m.detach(&sid);
            }
        }
    }
}

impl Transport for LoopbackTransport {
    fn request(&mut self, msg: &Message, now_ms: u64) -> Result<(Message, u64), TransportError> {
        if !self.connected {
            return Err(TransportError::Closed);
        }
        let arrive = now_ms + self.link.latency_ms;
        let mut replies = self.server.lock().expect("lock").handle(&mut self.bound, msg.clone(), arrive).into_iter();
        let reply = replies.next().ok_or(TransportError::Timeout)?;
        let wait = 2 * self.link.latency_ms + self.transfer_ms(&reply);
        self.sleep(wait);
        for extra in replies {
            self.inbox.push_back((now_ms + wait, extra));
        }
        Ok((reply, wait))
    }

    fn send(&mut self, msg: &Message, now_ms: u64) -> Result<(), TransportError> {
        if !self.connected {
            return Err(TransportError::Closed);
        }
        let arrive = now_ms + self.link.latency_ms;
        let replies = self.server.lock().expect("lock").handle(&mut self.bound, msg.clone(), arrive);
        for r in replies {
            self.inbox.push_back((arrive + self.link.latency_ms, r));
        }
        Ok(())
    }

    fn poll(&mut self, now_ms: u64) -> Result<Vec<Message>, TransportError> {
        if !self.connected {
            return Err(TransportError::Closed);
        }
        if let Some(sid) = &self.bound {
            let pushed = self.server.lock().expect("lock").tick_session(sid, now_ms);
            for (_, m) in pushed {
                self.inbox.push_back((now_ms + self.link.latency_ms, m));
            }
        }
        let mut due = Vec::new();
        let mut later = VecDeque::new();
        for (t, m) in self.inbox.drain(..) {
            if t <= now_ms {
                due.push(m);
            } else {
                later.push_back((t, m));
            }
        }
        self.inbox = later;
        Ok(due)
    }

    fn reconnect(&mut self) -> Result<(), TransportError> {
        if let Some(sid) = self.bound.take() {
            self.server.lock().expect("lock").detach(&sid);
        }
        self.inbox.clear();
        self.connected = true;
        Ok(())
    }

    fn pause(&mut self, ms: u64) -> u64 {
        self.sleep(ms);
        ms
    }
}
