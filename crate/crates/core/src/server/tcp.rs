//! TCP front end: an acceptor, one reader thread per connection and a ticker
//! that runs policies and routes outbound messages to session connections.

use std::collections::BTreeMap;
use std::io::{self, ErrorKind};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use super::manager::Manager;
use crate::protocol::{read_frame, write_frame, Message};

/// Milliseconds since the Unix epoch; the server's clock.
pub fn wall_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

type Writer = Arc<Mutex<TcpStream>>;

#[derive(Default)]
struct Shared {
    /// Open connections by connection id.
    conns: Mutex<BTreeMap<u64, TcpStream>>,
    /// Session id → (connection id, writer).
    routes: Mutex<BTreeMap<String, (u64, Writer)>>,
    readers: Mutex<Vec<JoinHandle<()>>>,
    next_conn: AtomicU64,
    stop: AtomicBool,
}

pub struct ServerHandle {
    addr: SocketAddr,
    manager: Arc<Mutex<Manager>>,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn manager(&self) -> Arc<Mutex<Manager>> {
        Arc::clone(&self.manager)
    }

    /// Stop accepting, drop every connection and join all threads.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        for s in self.shared.conns.lock().expect("lock").values() {
            let _ = s.shutdown(Shutdown::Both);
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        let readers: Vec<_> = self.shared.readers.lock().expect("lock").drain(..).collect();
        for t in readers {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if !self.threads.is_empty() {
            self.stop();
        }
    }
}

fn send(w: &Writer, msg: &Message) -> bool {
    let mut s = w.lock().expect("lock");
    write_frame(&mut *s, msg).is_ok()
}

fn connection(stream: TcpStream, conn_id: u64, manager: Arc<Mutex<Manager>>, shared: Arc<Shared>) {
    let writer: Writer = match stream.try_clone() {
        Ok(s) => Arc::new(Mutex::new(s)),
        Err(_) => return,
    };
    let mut reader = stream;
    let mut bound: Option<String> = None;
    while !shared.stop.load(Ordering::SeqCst) {
        let msg = match read_frame(&mut reader) {
            Ok(m) => m,
            Err(_) => break,
        };
        let was_bound = bound.clone();
        let replies = manager.lock().expect("lock").handle(&mut bound, msg, wall_ms());
        if bound != was_bound {
            if let Some(sid) = &bound {
                shared.routes.lock().expect("lock").insert(sid.clone(), (conn_id, Arc::clone(&writer)));
            }
        }
        if !replies.iter().all(|m| send(&writer, m)) {
            break;
        }
    }
    if let Some(sid) = bound {
        let mut routes = shared.routes.lock().expect("lock");
        if routes.get(&sid).is_some_and(|(c, _)| *c == conn_id) {
            routes.remove(&sid);
            manager.lock().expect("lock").detach(&sid);
        }
    }
    if let Some(s) = shared.conns.lock().expect("lock").remove(&conn_id) {
        let _ = s.shutdown(Shutdown::Both);
    }
}

/// Serve `manager` on `listener` until the handle is shut down.
pub fn serve(manager: Manager, listener: TcpListener, tick_ms: u64) -> io::Result<ServerHandle> {
    let addr = listener.local_addr()?;
    listener.set_nonblocking(true)?;
    let manager = Arc::new(Mutex::new(manager));
    let shared = Arc::new(Shared::default());

    let acceptor = {
        let (manager, shared) = (Arc::clone(&manager), Arc::clone(&shared));
        thread::spawn(move || {
            while !shared.stop.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        if stream.set_nonblocking(false).is_err() {
                            continue;
                        }
                        let _ = stream.set_nodelay(true);
                        let conn_id = shared.next_conn.fetch_add(1, Ordering::SeqCst);
                        if let Ok(c) = stream.try_clone() {
                            shared.conns.lock().expect("lock").insert(conn_id, c);
                        }
                        let (m, s) = (Arc::clone(&manager), Arc::clone(&shared));
                        let h = thread::spawn(move || connection(stream, conn_id, m, s));
                        shared.readers.lock().expect("lock").push(h);
                    }
                    Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(2)),
                    Err(_) => thread::sleep(Duration::from_millis(10)),
                }
            }
        })
    };

    let ticker = {
        let (manager, shared) = (Arc::clone(&manager), Arc::clone(&shared));
        thread::spawn(move || {
            while !shared.stop.load(Ordering::SeqCst) {
                thread::sleep(Duration::from_millis(tick_ms));
                let out = manager.lock().expect("lock").tick(wall_ms());
                for (sid, msg) in out {
                    let route = shared.routes.lock().expect("lock").get(&sid).map(|(_, w)| Arc::clone(w));
                    if let Some(w) = route {
                        send(&w, &msg);
                    }
                }
            }
        })
    };

    Ok(ServerHandle { addr, manager, shared, threads: vec![acceptor, ticker] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockdb::{BlockCatalog, BlockVersion};
    use crate::server::{Policy, PolicyConfig, ServerConfig};
    use crate::vm::isa::{encode_code, ins};
    use crate::vm::MobileBlockPayload;

    #[test]
    fn serves_a_block_over_tcp() {
        let mut cat = BlockCatalog::in_memory();
        let p = MobileBlockPayload {
            block_id: 1,
            version_id: 0,
            group_id: 0,
            entry_fid: 1,
            param_count: 0,
            code: encode_code(&[ins::ret()]),
            owned_sections: vec![],
        };
        cat.put_version(BlockVersion::new(&p, 0, "syntactic", 0, 1)).unwrap();
        let cfg = ServerConfig::new("unused", PolicyConfig::new(Policy::None));
        let server = serve(Manager::in_memory(cat, &cfg), TcpListener::bind("127.0.0.1:0").unwrap(), 5).unwrap();
        let mut s = TcpStream::connect(server.addr()).unwrap();
        let sid = "00000000000000000000000000000001".to_string();
        write_frame(&mut s, &Message::Hello { app_id: "t".into(), session_id: sid.clone(), proto_version: 1 }).unwrap();
        assert_eq!(read_frame(&mut s).unwrap(), Message::HelloOk { group_id: 0, policy_epoch: 1 });
        write_frame(&mut s, &Message::BlockReq { session_id: sid, block_id: 1 }).unwrap();
        match read_frame(&mut s).unwrap() {
            Message::BlockResp { version_id, payload, .. } => {
                assert_eq!(version_id, 1);
                assert_eq!(MobileBlockPayload::unpack(&payload).unwrap().code, p.code);
            }
            other => panic!("unexpected {other:?}"),
        }
        server.shutdown();
    }
}
