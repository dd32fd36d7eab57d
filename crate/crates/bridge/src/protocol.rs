//! Wire messages and framing.
//!
//! A frame is a 4-byte big-endian payload length followed by one JSON
//! object tagged by `"type"`.

use std::io::{self, Read, Write};

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use shelfbot_core::worldmodel::{GraspKind, Rot3};
use thiserror::Error;

pub const PROTOCOL_VERSION: &str = "v1";
pub const MAX_FRAME_LEN: usize = 1 << 20;
const HEADER_LEN: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspModeRequest {
    pub kind: GraspKind,
    /// Right effector position in the left effector frame; omitted to
    /// capture it at engagement.
    pub offset: Option<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandMessage {
    pub sequence: u64,
    pub timestamp: f64,
    pub left_position: [f64; 3],
    pub right_position: [f64; 3],
    /// Row-major rotation matrices.
    pub left_orientation: [f64; 9],
    pub right_orientation: [f64; 9],
    pub left_pad: [f64; 2],
    pub right_pad_x: f64,
    pub left_gripper: bool,
    pub right_gripper: bool,
    pub grasp_mode: Option<GraspModeRequest>,
}

impl CommandMessage {
    /// Check finiteness and rotation validity. The error names the field.
    pub fn validate(&self) -> Result<(), FieldError> {
        let finite = |field: &'static str, values: &[f64]| {
            if values.iter().all(|v| v.is_finite()) {
                Ok(())
            } else {
                Err(FieldError::new(field, "non-finite value"))
            }
        };
        finite("timestamp", &[self.timestamp])?;
        finite("left_position", &self.left_position)?;
        finite("right_position", &self.right_position)?;
        finite("left_pad", &self.left_pad)?;
        finite("right_pad_x", &[self.right_pad_x])?;
        for (field, rows) in [
            ("left_orientation", &self.left_orientation),
            ("right_orientation", &self.right_orientation),
        ] {
            Rot3::from_row_slice(rows).map_err(|e| FieldError::new(field, e.to_string()))?;
        }
        if let Some(GraspModeRequest { offset: Some(o), .. }) = &self.grasp_mode {
            finite("grasp_mode.offset", o)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalWeight {
    pub object_id: String,
    pub left: f64,
    pub right: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub converged: bool,
    pub outer_iterations: u32,
    pub inner_iterations: u32,
    pub cost: f64,
    pub max_violation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateMessage {
    pub tick: u64,
    pub time: f64,
    pub left_position: [f64; 3],
    pub right_position: [f64; 3],
    pub left_orientation: [f64; 9],
    pub right_orientation: [f64; 9],
    pub left_joints: [f64; 6],
    pub right_joints: [f64; 6],
    /// Planar base pose `[x, y, yaw]`.
    pub base_pose: [f64; 3],
    pub goal_weights: Vec<GoalWeight>,
    pub grasp_mode: GraspKind,
    pub attached: Vec<String>,
    /// Operator commands are frozen (no session, or session went quiet).
    pub hold: bool,
    pub solver: SolverStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Hello {
        protocol: String,
        client: Option<String>,
    },
    Welcome {
        protocol: String,
    },
    Reject {
        reason: String,
    },
    Command(CommandMessage),
    State(StateMessage),
    Error {
        field: Option<String>,
        message: String,
    },
    /// `dropped` state frames were discarded before the next one.
    Gap {
        dropped: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("{field}: {message}")]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(usize),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub message: Message,
    /// Dotted paths of fields that were present but not understood.
    pub unknown_fields: Vec<String>,
}

pub fn encode(message: &Message) -> Vec<u8> {
    let body = serde_json::to_vec(message).expect("messages always serialize");
    let mut frame = Vec::with_capacity(HEADER_LEN + body.len());
    frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
    frame.extend_from_slice(&body);
    frame
}

/// Decode one frame from the front of `bytes`, returning the message and
/// the number of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(Decoded, usize), DecodeError> {
    if bytes.len() < HEADER_LEN {
        return Err(DecodeError::Truncated {
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    let len = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if len > MAX_FRAME_LEN {
        return Err(DecodeError::TooLarge(len));
    }
    let end = HEADER_LEN + len;
    if bytes.len() < end {
        return Err(DecodeError::Truncated {
            needed: end,
            available: bytes.len(),
        });
    }
    Ok((decode_body(&bytes[HEADER_LEN..end])?, end))
}

pub fn decode_body(body: &[u8]) -> Result<Decoded, DecodeError> {
    let raw: Value = serde_json::from_slice(body).map_err(|e| DecodeError::Malformed(e.to_string()))?;
    let message: Message = serde_json::from_value(raw.clone()).map_err(|e| DecodeError::Malformed(e.to_string()))?;
    let known = serde_json::to_value(&message).expect("messages always serialize");
    let mut unknown_fields = Vec::new();
    collect_unknown(&raw, &known, "", &mut unknown_fields);
    for field in &unknown_fields {
        warn!(target: "bridge", "ignoring unknown field `{field}`");
    }
    Ok(Decoded {
        message,
        unknown_fields,
    })
}

fn collect_unknown(raw: &Value, known: &Value, prefix: &str, out: &mut Vec<String>) {
    match (raw, known) {
        (Value::Object(r), Value::Object(k)) => {
            for (key, value) in r {
                let path = if prefix.is_empty() {
                    key.clone()
                } else {
                    format!("{prefix}.{key}")
                };
                match k.get(key) {
                    Some(kv) => collect_unknown(value, kv, &path, out),
                    None => out.push(path),
                }
            }
        }
        (Value::Array(r), Value::Array(k)) => {
            for (i, (rv, kv)) in r.iter().zip(k).enumerate() {
                collect_unknown(rv, kv, &format!("{prefix}[{i}]"), out);
            }
        }
        _ => {}
    }
}

pub fn write_frame<W: Write>(writer: &mut W, message: &Message) -> io::Result<()> {
    writer.write_all(&encode(message))?;
    writer.flush()
}

/// Read one frame. `Ok(None)` on a clean end of stream between frames.
pub fn read_frame<R: Read>(reader: &mut R) -> Result<Option<Decoded>, DecodeError> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match reader.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => {
                return Err(DecodeError::Truncated {
                    needed: HEADER_LEN,
                    available: filled,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME_LEN {
        return Err(DecodeError::TooLarge(len));
    }
    let mut body = vec![0u8; len];
    let mut got = 0;
    while got < len {
        match reader.read(&mut body[got..]) {
            Ok(0) => {
                return Err(DecodeError::Truncated {
                    needed: HEADER_LEN + len,
                    available: HEADER_LEN + got,
                })
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    decode_body(&body).map(Some)
}
