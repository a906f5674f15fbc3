//! The long-running service: a TCP listener speaking the framed protocol,
//! per-session ingestion lanes, and topic-based publish/subscribe fan-out.
//!
//! Each connection gets a reader thread. Data frames are processed under
//! the owning session's lock (so per-session ordering holds while sessions
//! stay independent), raw frames are re-published to `ecg/<session>/raw`,
//! and every prediction is appended to the NDJSON log and published to
//! `ecg/<session>/rhythm`. Malformed frames close only the offending
//! connection after an error message; semantic rejections (out-of-order,
//! rate mismatch) are reported without closing.

use std::collections::HashMap;
use std::io::Write;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use super::wire::{self, WireMessage, parse_message, raw_topic, read_frame, rhythm_topic};
use super::{StreamConfig, StreamError, StreamSession, TelemetryFrame};
use crate::nn::ModelParams;

/// Service configuration.
#[derive(Debug, Clone)]
pub struct ServeConfig {
    /// Listen address; port 0 picks an ephemeral port.
    pub addr: SocketAddr,
    pub stream: StreamConfig,
    /// Append-only NDJSON prediction log.
    pub prediction_log: Option<PathBuf>,
    /// Sessions idle longer than this are closed with an incomplete-group
    /// notice.
    pub session_expiry: Duration,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            addr: "0.0.0.0:7200".parse().expect("static address"),
            stream: StreamConfig::default(),
            prediction_log: None,
            session_expiry: Duration::from_secs(120),
        }
    }
}

type Subscribers = Arc<Mutex<HashMap<String, Vec<Arc<Mutex<TcpStream>>>>>>;

struct SessionEntry {
    session: StreamSession,
    last_activity: Instant,
}

struct Shared {
    params: ModelParams,
    config: ServeConfig,
    subscribers: Subscribers,
    sessions: Mutex<HashMap<String, Arc<Mutex<SessionEntry>>>>,
    log_file: Option<Mutex<std::fs::File>>,
    shutdown: AtomicBool,
}

impl Shared {
    fn publish(&self, topic: &str, msg: &WireMessage) {
        let frame = msg.to_frame();
        let subs = {
            let map = self.subscribers.lock().expect("subscriber registry");
            match map.get(topic) {
                Some(v) => v.clone(),
                None => return,
            }
        };
        let mut dead = Vec::new();
        for (i, sub) in subs.iter().enumerate() {
            let mut stream = sub.lock().expect("subscriber stream");
            if stream.write_all(&frame).and_then(|_| stream.flush()).is_err() {
                dead.push(i);
            }
        }
        if !dead.is_empty() {
            let mut map = self.subscribers.lock().expect("subscriber registry");
            if let Some(v) = map.get_mut(topic) {
                for &i in dead.iter().rev() {
                    if i < v.len() {
                        v.remove(i);
                    }
                }
            }
        }
    }

    fn log_prediction(&self, json: &str) {
        if let Some(file) = &self.log_file {
            let mut f = file.lock().expect("prediction log");
            if let Err(e) = writeln!(f, "{json}") {
                log::error!("prediction log write failed: {e}");
            }
        }
    }
}

/// Handle to a running server; dropping it does not stop the service, call
/// [`ServerHandle::stop`].
pub struct ServerHandle {
    pub local_addr: SocketAddr,
    shared: Arc<Shared>,
    accept_thread: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    /// Signals shutdown and unblocks the acceptor.
    pub fn stop(mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        // Unblock accept() with a dummy connection.
        let _ = TcpStream::connect(self.local_addr);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }

    /// Blocks until the accept loop exits (effectively forever).
    pub fn wait(mut self) {
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

/// Binds the listener and spawns the accept loop plus the session sweeper.
pub fn serve(config: ServeConfig, params: ModelParams) -> Result<ServerHandle, StreamError> {
    let listener = TcpListener::bind(config.addr)?;
    let local_addr = listener.local_addr()?;
    log::info!("listening on {local_addr}");

    let log_file = match &config.prediction_log {
        Some(path) => Some(Mutex::new(
            std::fs::OpenOptions::new().create(true).append(true).open(path)?,
        )),
        None => None,
    };

    let shared = Arc::new(Shared {
        params,
        config,
        subscribers: Arc::new(Mutex::new(HashMap::new())),
        sessions: Mutex::new(HashMap::new()),
        log_file,
        shutdown: AtomicBool::new(false),
    });

    let sweeper_shared = shared.clone();
    std::thread::spawn(move || sweeper(sweeper_shared));

    let accept_shared = shared.clone();
    let accept_thread = std::thread::spawn(move || {
        for conn in listener.incoming() {
            if accept_shared.shutdown.load(Ordering::SeqCst) {
                break;
            }
            match conn {
                Ok(stream) => {
                    let shared = accept_shared.clone();
                    std::thread::spawn(move || handle_connection(shared, stream));
                }
                Err(e) => log::warn!("accept failed: {e}"),
            }
        }
    });

    Ok(ServerHandle { local_addr, shared, accept_thread: Some(accept_thread) })
}

/// Closes idle sessions, flushing an incomplete-group notice instead of
/// classifying short input.
fn sweeper(shared: Arc<Shared>) {
    let period = shared.config.session_expiry.min(Duration::from_secs(5)) / 2;
    loop {
        if shared.shutdown.load(Ordering::SeqCst) {
            return;
        }
        std::thread::sleep(period.max(Duration::from_millis(50)));
        let mut expired = Vec::new();
        {
            let mut sessions = shared.sessions.lock().expect("session registry");
            sessions.retain(|id, entry| {
                let (keep, buffered) = match entry.lock() {
                    Ok(e) => (
                        e.last_activity.elapsed() < shared.config.session_expiry,
                        e.session.unclassified_raw_len() as u64,
                    ),
                    Err(_) => (false, 0),
                };
                if !keep {
                    expired.push((id.clone(), buffered));
                }
                keep
            });
        }
        for (id, buffered) in expired {
            log::info!("session {id} expired with {buffered} unclassified samples buffered");
            let notice = WireMessage::Incomplete { session: id.clone(), buffered_samples: buffered };
            shared.publish(&rhythm_topic(&id), &notice);
        }
    }
}

fn handle_connection(shared: Arc<Shared>, stream: TcpStream) {
    let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_else(|_| "?".into());
    let reader = stream.try_clone();
    let writer = Arc::new(Mutex::new(stream));
    let mut reader = match reader {
        Ok(r) => r,
        Err(e) => {
            log::warn!("{peer}: cannot clone stream: {e}");
            return;
        }
    };

    loop {
        let payload = match read_frame(&mut reader) {
            Ok(Some(p)) => p,
            Ok(None) => break,
            Err(e) => {
                send_error(&writer, 400, &format!("bad frame: {e}"));
                break;
            }
        };
        let msg = match parse_message(&payload) {
            Ok(m) => m,
            Err(e) => {
                send_error(&writer, 400, &format!("{e}"));
                break;
            }
        };
        match msg {
            WireMessage::Subscribe { topic } => {
                let mut map = shared.subscribers.lock().expect("subscriber registry");
                map.entry(topic).or_default().push(writer.clone());
            }
            WireMessage::Data { .. } => {
                let frame = match TelemetryFrame::try_from(msg.clone()) {
                    Ok(f) => f,
                    Err(e) => {
                        send_error(&writer, 400, &format!("{e}"));
                        break;
                    }
                };
                match process_frame(&shared, &frame) {
                    Ok(predictions) => {
                        shared.publish(&raw_topic(&frame.session), &msg);
                        for p in predictions {
                            let msg = wire::prediction_message(&p);
                            shared.log_prediction(&msg.to_json());
                            shared.publish(&rhythm_topic(&p.session), &msg);
                        }
                    }
                    Err(
                        e @ (StreamError::OutOfOrder { .. }
                        | StreamError::RateMismatch { .. }
                        | StreamError::BadFrame(_)),
                    ) => {
                        // Semantic rejection: report it, keep the connection.
                        send_error(&writer, 409, &format!("{e}"));
                    }
                    Err(e) => {
                        log::error!("{peer}: processing failed: {e}");
                        send_error(&writer, 500, &format!("{e}"));
                        break;
                    }
                }
            }
            other => {
                send_error(&writer, 400, &format!("unexpected message {other:?}"));
                break;
            }
        }
    }
}

fn process_frame(
    shared: &Arc<Shared>,
    frame: &TelemetryFrame,
) -> Result<Vec<super::RhythmPrediction>, StreamError> {
    let entry = {
        let mut sessions = shared.sessions.lock().expect("session registry");
        match sessions.get(&frame.session) {
            Some(e) => e.clone(),
            None => {
                let session = StreamSession::new(&frame.session, frame.fs, &shared.config.stream)?;
                let entry = Arc::new(Mutex::new(SessionEntry {
                    session,
                    last_activity: Instant::now(),
                }));
                sessions.insert(frame.session.clone(), entry.clone());
                entry
            }
        }
    };
    let mut entry = entry.lock().expect("session lane");
    entry.last_activity = Instant::now();
    entry.session.ingest(frame)?;
    entry.session.maybe_classify(&shared.params)
}

fn send_error(writer: &Arc<Mutex<TcpStream>>, code: u32, message: &str) {
    let msg = WireMessage::Error { code, message: message.to_string() };
    let mut stream = writer.lock().expect("connection writer");
    let _ = stream.write_all(&msg.to_frame());
    let _ = stream.flush();
}
