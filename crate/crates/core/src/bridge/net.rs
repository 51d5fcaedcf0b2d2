//! Byte-stream transports, the pipelined remote provider and the serving
//! loop.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
#[cfg(unix)]
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use super::frame::{encode_frame, Frame, FrameReader, FrameType, Inbound};
use super::message::{decode_request, decode_response, encode_request, encode_response, EvalRequest};
use crate::error::{Error, Result};
use crate::flowcore::{PatchLatent, VectorFieldProvider};
use crate::priors::ConditionEmbedding;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// `tcp://host:port` (or bare `host:port`) or `unix:/path/to/socket`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Tcp(String),
    Unix(PathBuf),
}

impl FromStr for Endpoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(p) = s.strip_prefix("unix:") {
            if p.is_empty() {
                return Err(Error::Config("empty unix socket path".into()));
            }
            return Ok(Endpoint::Unix(PathBuf::from(p)));
        }
        let addr = s.strip_prefix("tcp://").unwrap_or(s);
        if addr.is_empty() || !addr.contains(':') {
            return Err(Error::Config(format!("endpoint '{s}' is not host:port or unix:/path")));
        }
        Ok(Endpoint::Tcp(addr.to_string()))
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Tcp(a) => write!(f, "tcp://{a}"),
            Endpoint::Unix(p) => write!(f, "unix:{}", p.display()),
        }
    }
}

enum Stream {
    Tcp(TcpStream),
    #[cfg(unix)]
    Unix(UnixStream),
}

impl Stream {
    fn connect(endpoint: &Endpoint) -> io::Result<Stream> {
        match endpoint {
            Endpoint::Tcp(a) => {
                let s = TcpStream::connect(a)?;
                s.set_nodelay(true)?;
                Ok(Stream::Tcp(s))
            }
            #[cfg(unix)]
            Endpoint::Unix(p) => Ok(Stream::Unix(UnixStream::connect(p)?)),
            #[cfg(not(unix))]
            Endpoint::Unix(_) => Err(io::Error::new(io::ErrorKind::Unsupported, "unix sockets")),
        }
    }

    fn try_clone(&self) -> io::Result<Stream> {
        match self {
            Stream::Tcp(s) => Ok(Stream::Tcp(s.try_clone()?)),
            #[cfg(unix)]
            Stream::Unix(s) => Ok(Stream::Unix(s.try_clone()?)),
        }
    }

    fn shutdown(&self) {
        let _ = match self {
            Stream::Tcp(s) => s.shutdown(Shutdown::Both),
            #[cfg(unix)]
            Stream::Unix(s) => s.shutdown(Shutdown::Both),
        };
    }
}

impl Read for Stream {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        match self {
            Stream::Tcp(s) => s.read(buf),
            #[cfg(unix)]
            Stream::Unix(s) => s.read(buf),
        }
    }
}

impl Write for Stream {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        match self {
            Stream::Tcp(s) => s.write(buf),
            #[cfg(unix)]
            Stream::Unix(s) => s.write(buf),
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        match self {
            Stream::Tcp(s) => s.flush(),
            #[cfg(unix)]
            Stream::Unix(s) => s.flush(),
        }
    }
}

type Reply = std::result::Result<Frame, String>;

struct Pending {
    closed: Option<String>,
    waiting: HashMap<u64, mpsc::Sender<Reply>>,
}

struct Shared {
    writer: Mutex<Stream>,
    pending: Mutex<Pending>,
    next_id: AtomicU64,
}

impl Shared {
    fn fail_all(&self, reason: String) {
        let mut p = self.pending.lock().unwrap_or_else(|e| e.into_inner());
        if p.closed.is_none() {
            p.closed = Some(reason.clone());
        }
        for (_, tx) in p.waiting.drain() {
            let _ = tx.send(Err(reason.clone()));
        }
    }
}

/// Client side of the bridge. Many workers may call `evaluate` at once;
/// requests are pipelined on one connection and matched by request id.
pub struct RemoteProvider {
    shared: Arc<Shared>,
    timeout: Duration,
    reader: Option<JoinHandle<()>>,
    endpoint: Endpoint,
}

impl RemoteProvider {
    pub fn connect(endpoint: &Endpoint) -> Result<Self> {
        let stream = Stream::connect(endpoint)
            .map_err(|e| Error::Provider(format!("cannot connect to {endpoint}: {e}")))?;
        let read_half = stream.try_clone()?;
        let shared = Arc::new(Shared {
            writer: Mutex::new(stream),
            pending: Mutex::new(Pending {
                closed: None,
                waiting: HashMap::new(),
            }),
            next_id: AtomicU64::new(1),
        });
        let reader_shared = shared.clone();
        let reader = std::thread::Builder::new()
            .name("xfp1-client-reader".into())
            .spawn(move || client_reader(read_half, reader_shared))?;
        Ok(RemoteProvider {
            shared,
            timeout: DEFAULT_TIMEOUT,
            reader: Some(reader),
            endpoint: endpoint.clone(),
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    fn round_trip(&self, request: &EvalRequest) -> Result<PatchLatent> {
        let id = self.shared.next_id.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = mpsc::channel();
        {
            let mut p = self.shared.pending.lock().unwrap_or_else(|e| e.into_inner());
            if let Some(reason) = &p.closed {
                return Err(Error::Provider(format!("request {id}: connection closed ({reason})")));
            }
            p.waiting.insert(id, tx);
        }
        let bytes = encode_frame(&Frame {
            kind: FrameType::Request,
            request_id: id,
            payload: encode_request(request),
        });
        let sent = {
            let mut w = self.shared.writer.lock().unwrap_or_else(|e| e.into_inner());
            w.write_all(&bytes).and_then(|_| w.flush())
        };
        if let Err(e) = sent {
            self.forget(id);
            return Err(Error::Provider(format!("request {id}: send failed: {e}")));
        }
        let reply = match rx.recv_timeout(self.timeout) {
            Ok(r) => r,
            Err(_) => {
                self.forget(id);
                return Err(Error::Provider(format!(
                    "request {id}: no response within {:?}",
                    self.timeout
                )));
            }
        };
        let frame = reply.map_err(|reason| Error::Provider(format!("request {id}: {reason}")))?;
        match frame.kind {
            FrameType::Response => {
                let v = decode_response(&frame.payload)?;
                if !v.same_layout(&request.latent) {
                    return Err(Error::Protocol(format!(
                        "request {id}: response layout differs from the request"
                    )));
                }
                Ok(v)
            }
            FrameType::Error => Err(Error::Provider(format!(
                "request {id}: remote error: {}",
                String::from_utf8_lossy(&frame.payload)
            ))),
            FrameType::Request => Err(Error::Protocol(format!("request {id}: server sent a request frame"))),
        }
    }

    fn forget(&self, id: u64) {
        let mut p = self.shared.pending.lock().unwrap_or_else(|e| e.into_inner());
        p.waiting.remove(&id);
    }
}

impl VectorFieldProvider for RemoteProvider {
    fn evaluate(&self, latent: &PatchLatent, condition: &ConditionEmbedding, t: f32) -> Result<PatchLatent> {
        self.round_trip(&EvalRequest {
            t,
            latent: latent.clone(),
            condition: condition.as_bytes().to_vec(),
        })
    }
}

impl Drop for RemoteProvider {
    fn drop(&mut self) {
        self.shared
            .writer
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .shutdown();
        if let Some(h) = self.reader.take() {
            let _ = h.join();
        }
    }
}

fn client_reader(mut stream: Stream, shared: Arc<Shared>) {
    let mut reader = FrameReader::new();
    let mut buf = vec![0u8; 64 * 1024];
    let reason = loop {
        let n = match stream.read(&mut buf) {
            Ok(0) => break "server closed the connection".to_string(),
            Ok(n) => n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => break format!("read failed: {e}"),
        };
        reader.push(&buf[..n]);
        let mut fatal = None;
        while let Some(event) = reader.next_event() {
            match event {
                Inbound::Frame(frame) => {
                    let tx = {
                        let mut p = shared.pending.lock().unwrap_or_else(|e| e.into_inner());
                        p.waiting.remove(&frame.request_id)
                    };
                    match tx {
                        Some(tx) => {
                            let _ = tx.send(Ok(frame));
                        }
                        None => log::warn!("dropping reply for unknown request {}", frame.request_id),
                    }
                }
                Inbound::Malformed { message, .. } => {
                    fatal = Some(format!("protocol violation from server: {message}"));
                    break;
                }
            }
        }
        if let Some(reason) = fatal {
            stream.shutdown();
            break reason;
        }
    };
    shared.fail_all(reason);
}

enum Listener {
    Tcp(TcpListener),
    #[cfg(unix)]
    Unix(UnixListener, PathBuf),
}

impl Listener {
    fn bind(endpoint: &Endpoint) -> Result<(Listener, Endpoint)> {
        match endpoint {
            Endpoint::Tcp(a) => {
                let l = TcpListener::bind(a)
                    .map_err(|e| Error::Provider(format!("cannot bind {endpoint}: {e}")))?;
                let local = Endpoint::Tcp(l.local_addr()?.to_string());
                Ok((Listener::Tcp(l), local))
            }
            #[cfg(unix)]
            Endpoint::Unix(p) => {
                let l = UnixListener::bind(p)
                    .map_err(|e| Error::Provider(format!("cannot bind {endpoint}: {e}")))?;
                Ok((Listener::Unix(l, p.clone()), endpoint.clone()))
            }
            #[cfg(not(unix))]
            Endpoint::Unix(_) => Err(Error::Provider("unix sockets are unsupported here".into())),
        }
    }

    fn accept(&self) -> io::Result<Stream> {
        match self {
            Listener::Tcp(l) => {
                let (s, _) = l.accept()?;
                s.set_nodelay(true)?;
                Ok(Stream::Tcp(s))
            }
            #[cfg(unix)]
            Listener::Unix(l, _) => Ok(Stream::Unix(l.accept()?.0)),
        }
    }
}

impl Drop for Listener {
    fn drop(&mut self) {
        #[cfg(unix)]
        if let Listener::Unix(_, p) = self {
            let _ = std::fs::remove_file(p);
        }
    }
}

/// Evaluates one inbound frame, producing the reply frame.
pub fn handle_frame(provider: &dyn VectorFieldProvider, frame: &Frame) -> Frame {
    if frame.kind != FrameType::Request {
        return Frame::error(frame.request_id, format!("expected a request frame, got {:?}", frame.kind));
    }
    let result = decode_request(&frame.payload).and_then(|req| {
        let cond = ConditionEmbedding::from_bytes(req.condition.clone());
        let v = provider.evaluate(&req.latent, &cond, req.t)?;
        if !v.same_layout(&req.latent) {
            return Err(Error::Protocol("provider changed the latent layout".into()));
        }
        Ok(v)
    });
    match result {
        Ok(v) => Frame {
            kind: FrameType::Response,
            request_id: frame.request_id,
            payload: encode_response(&v),
        },
        Err(e) => Frame::error(frame.request_id, e),
    }
}

fn serve_connection(stream: Stream, provider: Arc<dyn VectorFieldProvider>) {
    let writer = match stream.try_clone() {
        Ok(w) => Arc::new(Mutex::new(w)),
        Err(e) => {
            log::warn!("cannot clone connection: {e}");
            return;
        }
    };
    let send = |writer: &Mutex<Stream>, frame: &Frame| {
        let bytes = encode_frame(frame);
        let mut w = writer.lock().unwrap_or_else(|e| e.into_inner());
        if let Err(e) = w.write_all(&bytes).and_then(|_| w.flush()) {
            log::debug!("reply {} not delivered: {e}", frame.request_id);
        }
    };
    let mut stream = stream;
    let mut reader = FrameReader::new();
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        let n = match stream.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(_) => break,
        };
        reader.push(&buf[..n]);
        while let Some(event) = reader.next_event() {
            match event {
                Inbound::Frame(frame) => {
                    let provider = provider.clone();
                    let writer = writer.clone();
                    let spawned = std::thread::Builder::new()
                        .name("xfp1-request".into())
                        .spawn(move || send(&writer, &handle_frame(provider.as_ref(), &frame)));
                    if let Err(e) = spawned {
                        log::warn!("cannot spawn request thread: {e}");
                    }
                }
                Inbound::Malformed { request_id, message } => {
                    send(&writer, &Frame::error(request_id, message));
                }
            }
        }
    }
}

struct ServerState {
    stop: AtomicBool,
    connections: Mutex<Vec<Stream>>,
}

/// A running server; dropping or calling [`ServerHandle::shutdown`] stops
/// accepting and closes every open connection.
pub struct ServerHandle {
    endpoint: Endpoint,
    state: Arc<ServerState>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if self.state.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        // wake the accept loop
        let _ = Stream::connect(&self.endpoint);
        for c in self.state.connections.lock().unwrap_or_else(|e| e.into_inner()).drain(..) {
            c.shutdown();
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Binds `endpoint` and serves `provider` on a background thread. Binding
/// to port 0 picks a free port; see [`ServerHandle::endpoint`].
pub fn spawn_server(provider: Arc<dyn VectorFieldProvider>, endpoint: &Endpoint) -> Result<ServerHandle> {
    let (listener, local) = Listener::bind(endpoint)?;
    let state = Arc::new(ServerState {
        stop: AtomicBool::new(false),
        connections: Mutex::new(Vec::new()),
    });
    let loop_state = state.clone();
    let thread = std::thread::Builder::new()
        .name("xfp1-accept".into())
        .spawn(move || accept_loop(listener, provider, loop_state))?;
    Ok(ServerHandle {
        endpoint: local,
        state,
        thread: Some(thread),
    })
}

fn accept_loop(listener: Listener, provider: Arc<dyn VectorFieldProvider>, state: Arc<ServerState>) {
    loop {
        let stream = match listener.accept() {
            Ok(s) => s,
            Err(e) => {
                if state.stop.load(Ordering::SeqCst) {
                    return;
                }
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        if state.stop.load(Ordering::SeqCst) {
            return;
        }
        if let Ok(c) = stream.try_clone() {
            state.connections.lock().unwrap_or_else(|e| e.into_inner()).push(c);
        }
        let provider = provider.clone();
        let spawned = std::thread::Builder::new()
            .name("xfp1-connection".into())
            .spawn(move || serve_connection(stream, provider));
        if let Err(e) = spawned {
            log::warn!("cannot spawn connection thread: {e}");
        }
    }
}

/// Serves `provider` on `endpoint` until the process exits.
pub fn serve_provider(provider: Arc<dyn VectorFieldProvider>, endpoint: &Endpoint) -> Result<()> {
    let handle = spawn_server(provider, endpoint)?;
    log::info!("serving on {}", handle.endpoint());
    loop {
        std::thread::park();
    }
}
