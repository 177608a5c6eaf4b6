//! TCP transport: one session per connection. A reader thread queues
//! decoded messages; the session loop owns all state, drains the queue
//! before each tick and writes replies and frames.

use std::io;
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, TryRecvError};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use super::protocol::{decode_message, encode_message, read_frame, write_frame, ClientMessage, ServerMessage};
use super::{Session, SessionConfig};
use crate::shared_control::Planner;

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    /// Session template; connection `n` (from 0) uses seed `session.seed + n`.
    pub session: SessionConfig,
    pub record_dir: Option<PathBuf>,
    /// Sleep to hold the frame rate. Off, ticks run back to back.
    pub realtime: bool,
    /// Stop accepting after this many connections.
    pub max_sessions: Option<usize>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self { session: SessionConfig::default(), record_dir: None, realtime: true, max_sessions: None }
    }
}

enum Inbound {
    Message(ClientMessage),
    Malformed(String),
    Closed,
}

fn send(stream: &mut TcpStream, msg: &ServerMessage) -> io::Result<()> {
    write_frame(stream, &encode_message(msg))
}

fn reader(mut stream: TcpStream, tx: mpsc::Sender<Inbound>) {
    loop {
        let item = match read_frame(&mut stream) {
            Ok(Some(body)) => match decode_message::<ClientMessage>(&body) {
                Ok(m) => Inbound::Message(m),
                Err(e) => Inbound::Malformed(e),
            },
            Ok(None) => Inbound::Closed,
            Err(e) => {
                log::debug!("read failed: {e}");
                Inbound::Closed
            }
        };
        let closed = matches!(item, Inbound::Closed);
        if tx.send(item).is_err() || closed {
            return;
        }
    }
}

/// Drains queued messages; `false` once the client is gone.
fn drain(session: &mut Session, rx: &Receiver<Inbound>, out: &mut TcpStream) -> io::Result<bool> {
    loop {
        match rx.try_recv() {
            Ok(Inbound::Message(m)) => {
                let reply = match session.handle(&m) {
                    Ok(()) => ServerMessage::Ack { of: m.kind().into() },
                    Err(message) => ServerMessage::Error { message },
                };
                send(out, &reply)?;
            }
            Ok(Inbound::Malformed(message)) => send(out, &ServerMessage::Error { message })?,
            Ok(Inbound::Closed) | Err(TryRecvError::Disconnected) => return Ok(false),
            Err(TryRecvError::Empty) => return Ok(true),
        }
    }
}

pub fn run_session(stream: TcpStream, id: u64, model: Arc<dyn Planner + Send + Sync>, cfg: &ServerConfig, seed: u64) -> io::Result<()> {
    let mut out = stream.try_clone()?;
    let session_cfg = SessionConfig { seed, ..cfg.session.clone() };
    let mut session = match Session::new(id, session_cfg, model) {
        Ok(s) => s,
        Err(e) => return send(&mut out, &ServerMessage::Error { message: e.to_string() }),
    };
    send(
        &mut out,
        &ServerMessage::Hello {
            session: id,
            frame_rate: session.config.frame_rate,
            camera: session.config.camera,
            t_star: session.config.t_star,
        },
    )?;
    let (tx, rx) = mpsc::channel();
    let read_half = stream.try_clone()?;
    thread::spawn(move || reader(read_half, tx));
    let period = Duration::from_secs_f64(1.0 / session.config.frame_rate);
    let start = Instant::now();
    let mut alive = true;
    while alive && !session.finished() {
        alive = drain(&mut session, &rx, &mut out)?;
        if !alive || session.finished() {
            break;
        }
        let b = session.tick();
        if b.frame % session.config.broadcast_every == 0 && send(&mut out, &ServerMessage::Frame(Box::new(b))).is_err() {
            break;
        }
        if cfg.realtime {
            let due = start + period * session.frame() as u32;
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                thread::sleep(wait);
            }
        }
    }
    let summary = match &cfg.record_dir {
        Some(dir) => match session.persist(dir) {
            Ok(s) => s,
            Err(e) => {
                let _ = send(&mut out, &ServerMessage::Error { message: format!("persist failed: {e}") });
                session.summary(None)
            }
        },
        None => session.summary(None),
    };
    log::info!("session {id} ended after {} frames, HO {:.1}%", summary.frames, summary.metrics.ho);
    let _ = send(&mut out, &ServerMessage::Summary(summary));
    let _ = out.shutdown(std::net::Shutdown::Both);
    Ok(())
}

/// Accepts connections until `max_sessions` is reached, then waits for the
/// open sessions to end.
pub fn serve(listener: TcpListener, model: Arc<dyn Planner + Send + Sync>, cfg: ServerConfig) -> io::Result<()> {
    let ids = AtomicU64::new(1);
    let mut handles = Vec::new();
    for (n, stream) in listener.incoming().enumerate() {
        let stream = stream?;
        let id = ids.fetch_add(1, Ordering::Relaxed);
        let seed = cfg.session.seed + n as u64;
        let (model, cfg2) = (model.clone(), cfg.clone());
        handles.push(thread::spawn(move || {
            if let Err(e) = run_session(stream, id, model, &cfg2, seed) {
                log::warn!("session {id}: {e}");
            }
        }));
        if cfg.max_sessions.is_some_and(|m| n + 1 >= m) {
            break;
        }
    }
    for h in handles {
        let _ = h.join();
    }
    Ok(())
}
