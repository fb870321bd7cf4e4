//! TCP backend. One socket per worker pair carries frames both ways, which
//! preserves per-pair FIFO order.

use std::collections::HashSet;
use std::io::{BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::activity::Activity;
use super::frame::{encode_frame, read_frame, Frame, Handshake, PROTOCOL_VERSION};
use super::inbox::{FrameSink, Inbound, Inbox};
use super::{PeId, TransportError};

/// Shared state of the in-process part of a TCP group.
#[derive(Clone, Default)]
pub struct TcpFabric {
    activity: Activity,
    ids: Arc<Mutex<HashSet<PeId>>>,
}

impl TcpFabric {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_activity(activity: Activity) -> Self {
        TcpFabric {
            activity,
            ids: Arc::default(),
        }
    }

    pub fn activity(&self) -> &Activity {
        &self.activity
    }

    pub(crate) fn claim(&self, id: PeId) -> Result<(), TransportError> {
        if !self.ids.lock().unwrap().insert(id) {
            return Err(TransportError::DuplicateWorker(id));
        }
        Ok(())
    }

    pub(crate) fn release(&self, id: PeId) {
        self.ids.lock().unwrap().remove(&id);
    }
}

pub struct TcpSink {
    stream: Mutex<TcpStream>,
}

impl FrameSink for TcpSink {
    fn deliver(&self, mut frame: Frame) -> Result<(), TransportError> {
        let bytes = encode_frame(frame.tag, &frame.body);
        let mut s = self.stream.lock().unwrap();
        s.write_all(&bytes)
            .map_err(|e| TransportError::Io(e.to_string()))?;
        // The receiving reader adopts this unit of activity.
        if let Some(t) = frame.token.take() {
            t.leak();
        }
        Ok(())
    }

    fn close(&self) {
        let _ = self.stream.lock().unwrap().shutdown(Shutdown::Both);
    }
}

fn spawn_reader(stream: TcpStream, peer: PeId, inbox: Arc<Inbox>, activity: Activity) {
    thread::Builder::new()
        .name(format!("tcp-reader-{peer}"))
        .spawn(move || {
            let mut r = BufReader::new(stream);
            let reason = loop {
                match read_frame(&mut r) {
                    Ok(Some((tag, body))) => {
                        let mut frame = Frame::new(tag, body);
                        frame.token = Some(activity.adopt());
                        inbox.push(Inbound::Frame { from: peer, frame });
                    }
                    Ok(None) => break "connection closed".to_string(),
                    Err(e) => break e.to_string(),
                }
            };
            inbox.push(Inbound::Disconnected { peer, reason });
        })
        .expect("spawn tcp reader");
}

fn hello(me: PeId, digest: u64) -> Handshake {
    Handshake {
        version: PROTOCOL_VERSION,
        digest,
        worker_id: me,
    }
}

pub struct TcpListenerHandle {
    pub local_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl Drop for TcpListenerHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Binds `bind` and accepts peers in the background. Accepted peers show up
/// in `inbox` as `Connected` followed by their frames.
pub(crate) fn listen(
    bind: &str,
    me: PeId,
    digest: u64,
    inbox: Arc<Inbox>,
    activity: Activity,
) -> Result<TcpListenerHandle, TransportError> {
    let listener = TcpListener::bind(bind).map_err(|e| TransportError::Io(format!("bind {bind}: {e}")))?;
    let local_addr = listener.local_addr().map_err(|e| TransportError::Io(e.to_string()))?;
    listener
        .set_nonblocking(true)
        .map_err(|e| TransportError::Io(e.to_string()))?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop2 = stop.clone();
    let thread = thread::Builder::new()
        .name(format!("tcp-accept-{me}"))
        .spawn(move || {
            while !stop2.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let inbox = inbox.clone();
                        let activity = activity.clone();
                        thread::spawn(move || accept_one(stream, me, digest, inbox, activity));
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        thread::sleep(Duration::from_millis(2));
                    }
                    Err(_) => thread::sleep(Duration::from_millis(2)),
                }
            }
        })
        .map_err(|e| TransportError::Io(e.to_string()))?;
    Ok(TcpListenerHandle {
        local_addr,
        stop,
        thread: Some(thread),
    })
}

fn accept_one(mut stream: TcpStream, me: PeId, digest: u64, inbox: Arc<Inbox>, activity: Activity) {
    let _ = stream.set_nonblocking(false);
    let _ = stream.set_nodelay(true);
    let _ = stream.set_read_timeout(Some(Duration::from_secs(10)));
    let Ok(theirs) = Handshake::read_from(&mut stream) else {
        return;
    };
    // Always answer so the connecting side can report both digests.
    if hello(me, digest).write_to(&mut stream).is_err() {
        return;
    }
    if theirs.digest != digest || theirs.worker_id == me {
        let _ = stream.shutdown(Shutdown::Both);
        return;
    }
    let _ = stream.set_read_timeout(None);
    let Ok(write_half) = stream.try_clone() else {
        return;
    };
    let peer = theirs.worker_id;
    inbox.push(Inbound::Connected {
        peer,
        sink: Arc::new(TcpSink {
            stream: Mutex::new(write_half),
        }),
    });
    spawn_reader(stream, peer, inbox, activity);
}

/// Connects to `addr`, retrying until `timeout`, and runs the handshake.
pub(crate) fn connect(
    addr: &str,
    me: PeId,
    digest: u64,
    timeout: Duration,
    inbox: Arc<Inbox>,
    activity: Activity,
) -> Result<(PeId, Arc<TcpSink>), TransportError> {
    let unreachable = |reason: String| TransportError::Unreachable {
        peer: addr.to_string(),
        reason,
    };
    let deadline = Instant::now() + timeout;
    let target: SocketAddr = addr
        .to_socket_addrs()
        .map_err(|e| unreachable(e.to_string()))?
        .next()
        .ok_or_else(|| unreachable("address did not resolve".into()))?;
    let mut stream = loop {
        let left = deadline.saturating_duration_since(Instant::now());
        if left.is_zero() {
            return Err(unreachable("timed out".into()));
        }
        match TcpStream::connect_timeout(&target, left.min(Duration::from_millis(500))) {
            Ok(s) => break s,
            Err(e) => {
                if Instant::now() >= deadline {
                    return Err(unreachable(e.to_string()));
                }
                thread::sleep(Duration::from_millis(20).min(left));
            }
        }
    };
    let _ = stream.set_nodelay(true);
    let left = deadline
        .saturating_duration_since(Instant::now())
        .max(Duration::from_millis(100));
    let _ = stream.set_read_timeout(Some(left));
    hello(me, digest)
        .write_to(&mut stream)
        .map_err(|e| unreachable(e.to_string()))?;
    let theirs = Handshake::read_from(&mut stream).map_err(|e| unreachable(e.to_string()))?;
    if theirs.digest != digest {
        return Err(TransportError::LayoutMismatch {
            local: digest,
            remote: theirs.digest,
        });
    }
    if theirs.worker_id == me {
        return Err(TransportError::DuplicateWorker(me));
    }
    let _ = stream.set_read_timeout(None);
    let write_half = stream.try_clone().map_err(|e| TransportError::Io(e.to_string()))?;
    spawn_reader(stream, theirs.worker_id, inbox, activity);
    Ok((
        theirs.worker_id,
        Arc::new(TcpSink {
            stream: Mutex::new(write_half),
        }),
    ))
}
