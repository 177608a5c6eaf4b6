//! Wire protocol, version 1.
//!
//! Each message is a 4-byte big-endian length followed by that many bytes
//! of UTF-8 JSON. All messages carry `"version": 1` and a snake_case `"type"`.
//!
//! Client to server:
//!
//! | type                | fields                                   |
//! |---------------------|------------------------------------------|
//! | `set_texting`       | `phrase`: lexicon phrase                  |
//! | `set_drafting`      | `points`: `[[u, v], ...]` in `[0, 1]²`     |
//! | `set_arrowing`      | `v` (m/s, signed), `theta` (rad, ego)     |
//! | `clear_instruction` |                                          |
//! | `manual_takeover`   | `v`, `omega`: the human action this tick  |
//! | `resume`            |                                          |
//! | `configure`         | optional `t_star`, `front_payload`, `broadcast_every` |
//! | `stop`              | ends the session and persists it         |
//!
//! Server to client: `hello` on connect, `ack` or `error` per client
//! message, `frame` per broadcast tick and `summary` when the session ends.
//! Image coordinates are normalized, `u` to the right and `v` down.

use std::io::{self, Read, Write};

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::geometry::CameraModel;
use crate::instruction::Instruction;
use crate::shared_control::{JudgmentOutcome, SharedControlMetrics};
use crate::world::{Controller, Mask, SemanticImage};

pub const PROTOCOL_VERSION: u32 = 1;
/// Largest accepted message body.
pub const MAX_MESSAGE: usize = 16 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    SetTexting { phrase: String },
    SetDrafting { points: Vec<[f64; 2]> },
    SetArrowing { v: f64, theta: f64 },
    ClearInstruction,
    ManualTakeover { v: f64, omega: f64 },
    Resume,
    Configure {
        #[serde(default)]
        t_star: Option<f64>,
        #[serde(default)]
        front_payload: Option<FrontPayloadKind>,
        #[serde(default)]
        broadcast_every: Option<usize>,
    },
    Stop,
}

impl ClientMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            ClientMessage::SetTexting { .. } => "set_texting",
            ClientMessage::SetDrafting { .. } => "set_drafting",
            ClientMessage::SetArrowing { .. } => "set_arrowing",
            ClientMessage::ClearInstruction => "clear_instruction",
            ClientMessage::ManualTakeover { .. } => "manual_takeover",
            ClientMessage::Resume => "resume",
            ClientMessage::Configure { .. } => "configure",
            ClientMessage::Stop => "stop",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrontPayloadKind {
    /// Base64 of one label byte per pixel (0 sky, 1 free, 2 obstacle, 3 off-sidewalk).
    Raster,
    /// Projected sidewalk edges and obstacle outlines only.
    Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrontView {
    Raster { width: usize, height: usize, labels: String },
    Vector { edges: Vec<Vec<[f64; 2]>>, obstacles: Vec<Vec<[f64; 2]>> },
}

pub fn encode_labels(view: &SemanticImage) -> FrontView {
    let bytes: Vec<u8> = view.labels.iter().map(|p| *p as u8).collect();
    FrontView::Raster {
        width: view.width,
        height: view.height,
        labels: base64::engine::general_purpose::STANDARD.encode(bytes),
    }
}

/// Run lengths of a mask in row-major order, starting with an unset run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRuns {
    pub width: usize,
    pub height: usize,
    pub runs: Vec<u32>,
}

impl MaskRuns {
    pub fn encode(m: &Mask) -> Self {
        let mut runs = Vec::new();
        let mut cur = false;
        let mut n = 0u32;
        for &b in &m.bits {
            if b != cur {
                runs.push(n);
                cur = b;
                n = 0;
            }
            n += 1;
        }
        runs.push(n);
        Self { width: m.width, height: m.height, runs }
    }

    pub fn decode(&self) -> Result<Mask, String> {
        let mut m = Mask::new(self.width, self.height);
        let mut i = 0usize;
        for (k, &r) in self.runs.iter().enumerate() {
            let end = i + r as usize;
            if end > m.bits.len() {
                return Err("runs overflow the mask".into());
            }
            m.bits[i..end].fill(k % 2 == 1);
            i = end;
        }
        if i != m.bits.len() {
            return Err(format!("runs cover {i} of {} pixels", m.bits.len()));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionMode {
    Autopilot,
    Takeover,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeOverlay {
    /// Visible projected waypoints, normalized.
    pub points: Vec<[f64; 2]>,
    pub confidence: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameBroadcast {
    pub session: u64,
    pub frame: usize,
    pub timestamp: f64,
    pub mode: SessionMode,
    pub controller: Controller,
    pub front_view: FrontView,
    pub instruction: Option<Instruction>,
    /// The active instruction as drawn on the view.
    pub instruction_overlay: Option<MaskRuns>,
    pub modes: Vec<ModeOverlay>,
    /// Left and right edges of the robot footprint along the selected mode.
    pub footprint_edges: [Vec<[f64; 2]>; 2],
    pub judgment: Option<JudgmentOutcome>,
    pub takeover_requested: bool,
    pub metrics: SharedControlMetrics,
    pub events: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session: u64,
    pub frames: usize,
    pub episode_path: Option<String>,
    /// Mean measured takeover length (s).
    pub takeover_duration: f64,
    pub metrics: SharedControlMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello { session: u64, frame_rate: f64, camera: CameraModel, t_star: f64 },
    Ack { of: String },
    Error { message: String },
    Frame(Box<FrameBroadcast>),
    Summary(SessionSummary),
}

#[derive(Debug, Serialize, Deserialize)]
struct Envelope<T> {
    version: u32,
    #[serde(flatten)]
    body: T,
}

pub fn encode_message<T: Serialize>(msg: &T) -> Vec<u8> {
    serde_json::to_vec(&Envelope { version: PROTOCOL_VERSION, body: msg }).expect("message serializes")
}

/// Parses one message body, checking the version first so that a newer
/// client gets a version error rather than a field error.
pub fn decode_message<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<T, String> {
    let raw: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| format!("invalid json: {e}"))?;
    let mut obj = match raw {
        serde_json::Value::Object(o) => o,
        _ => return Err("message is not an object".into()),
    };
    match obj.remove("version").and_then(|v| v.as_u64()) {
        Some(v) if v == PROTOCOL_VERSION as u64 => {}
        Some(v) => return Err(format!("unsupported protocol version {v}")),
        None => return Err("missing protocol version".into()),
    }
    serde_json::from_value(serde_json::Value::Object(obj)).map_err(|e| e.to_string())
}

pub fn write_frame(w: &mut impl Write, body: &[u8]) -> io::Result<()> {
    let n = u32::try_from(body.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "message too large"))?;
    w.write_all(&n.to_be_bytes())?;
    w.write_all(body)?;
    w.flush()
}

/// `Ok(None)` on a clean end of stream before a length prefix.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_MESSAGE {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("message of {n} bytes")));
    }
    let mut body = vec![0u8; n];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}
