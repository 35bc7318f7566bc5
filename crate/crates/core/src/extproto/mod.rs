//! Newline-delimited JSON protocol for out-of-process model servers.
//!
//! Every request is one line `{"id":N,"op":...,<op fields>}` and is answered
//! by exactly one line carrying the same `id` and a `status` of `ok` or
//! `error`. Rasters travel as [`RasterPayload`]s: base64 of little-endian,
//! row-major bytes.
//!
//! ```text
//! -> {"id":1,"op":"init","protocol_version":1,"model_role":"all"}
//! <- {"id":1,"status":"ok","protocol_version":1}
//! -> {"id":2,"op":"classify","patch":{...},"center":{"x":40.0,"y":61.5}}
//! <- {"id":2,"status":"ok","class":"spine_end","spine_end_kind":"S1"}
//! -> {"id":3,"op":"shutdown"}
//! <- {"id":3,"status":"ok"}
//! ```

mod adapter;
mod server;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anatomy::SpineEnd;
use crate::backends::{BackendError, DetectionCandidate, LogitMask, PatchClass};
use crate::geometry::{BinaryMask, GrayImage, Offset, Patch, Point2};

pub use adapter::{AdapterConfig, ExternalBackend, ANNOTATIONS_PLACEHOLDER};
pub use server::{handle_line, serve, Handler};

pub const PROTOCOL_VERSION: u32 = 1;
/// Default cap on one encoded line.
pub const DEFAULT_MAX_LINE_BYTES: usize = 64 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum ProtoError {
    #[error("payload of {size} bytes exceeds the {cap}-byte cap")]
    PayloadTooLarge { size: usize, cap: usize },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("no response within {0:?}")]
    Timeout(std::time::Duration),
    #[error("backend process exited: {0}")]
    ChildExited(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("backend reported an error: {0}")]
    Remote(String),
    #[error("cannot start backend `{command}`: {source}")]
    Spawn {
        command: String,
        source: std::io::Error,
    },
    #[error("i/o error talking to backend: {0}")]
    Io(#[from] std::io::Error),
}

impl From<ProtoError> for BackendError {
    fn from(e: ProtoError) -> Self {
        BackendError::new(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    F32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 => 4,
        }
    }
}

/// A raster on the wire. `encoding` holds the base64 data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RasterPayload {
    pub width: usize,
    pub height: usize,
    pub dtype: Dtype,
    pub encoding: String,
    pub offset: [i64; 2],
}

fn expect_len(what: &str, got: usize, w: usize, h: usize) -> Result<(), ProtoError> {
    if got != w * h {
        return Err(ProtoError::Schema(format!(
            "{what}: {got} values for a {w}x{h} raster"
        )));
    }
    Ok(())
}

impl RasterPayload {
    pub fn from_u8(width: usize, height: usize, offset: Offset, data: &[u8]) -> Result<Self, ProtoError> {
        expect_len("u8 raster", data.len(), width, height)?;
        Ok(Self {
            width,
            height,
            dtype: Dtype::U8,
            encoding: B64.encode(data),
            offset: [offset.x, offset.y],
        })
    }

    pub fn from_f32(width: usize, height: usize, offset: Offset, data: &[f32]) -> Result<Self, ProtoError> {
        expect_len("f32 raster", data.len(), width, height)?;
        let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        Ok(Self {
            width,
            height,
            dtype: Dtype::F32,
            encoding: B64.encode(bytes),
            offset: [offset.x, offset.y],
        })
    }

    pub fn offset(&self) -> Offset {
        Offset::new(self.offset[0], self.offset[1])
    }

    /// Decoded bytes, checked against `width·height·dtype size`.
    pub fn bytes(&self) -> Result<Vec<u8>, ProtoError> {
        let bytes = B64
            .decode(&self.encoding)
            .map_err(|e| ProtoError::Schema(format!("bad base64: {e}")))?;
        let need = self
            .width
            .checked_mul(self.height)
            .and_then(|n| n.checked_mul(self.dtype.size()))
            .ok_or_else(|| ProtoError::Schema("raster dimensions overflow".into()))?;
        if bytes.len() != need {
            return Err(ProtoError::Schema(format!(
                "raster decodes to {} bytes, expected {need}",
                bytes.len()
            )));
        }
        Ok(bytes)
    }

    pub fn to_u8(&self) -> Result<Vec<u8>, ProtoError> {
        if self.dtype != Dtype::U8 {
            return Err(ProtoError::Schema("expected a u8 raster".into()));
        }
        self.bytes()
    }

    pub fn to_f32(&self) -> Result<Vec<f32>, ProtoError> {
        if self.dtype != Dtype::F32 {
            return Err(ProtoError::Schema("expected an f32 raster".into()));
        }
        Ok(self
            .bytes()?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn from_image(img: &GrayImage, offset: Offset) -> Self {
        Self::from_u8(img.width, img.height, offset, &img.data).expect("image is sized")
    }

    pub fn to_image(&self) -> Result<GrayImage, ProtoError> {
        Ok(GrayImage::from_raw(self.width, self.height, self.to_u8()?).expect("length checked"))
    }

    pub fn from_patch(patch: &Patch) -> Self {
        Self::from_image(&patch.image, patch.offset)
    }

    pub fn to_patch(&self) -> Result<Patch, ProtoError> {
        Ok(Patch {
            image: self.to_image()?,
            offset: self.offset(),
        })
    }

    /// Mask as 0/1 bytes at the mask's own offset.
    pub fn from_mask(mask: &BinaryMask) -> Self {
        let data: Vec<u8> = mask.bits().iter().map(|&b| b as u8).collect();
        Self::from_u8(mask.width(), mask.height(), mask.offset(), &data).expect("mask is sized")
    }

    /// Nonzero bytes are foreground.
    pub fn to_mask(&self) -> Result<BinaryMask, ProtoError> {
        let bits = self.to_u8()?.into_iter().map(|b| b != 0).collect();
        Ok(BinaryMask::from_bits(self.width, self.height, self.offset(), bits).expect("length checked"))
    }

    pub fn from_logits(l: &LogitMask) -> Self {
        Self::from_f32(l.width, l.height, l.offset, &l.values).expect("logits are sized")
    }

    pub fn to_logits(&self) -> Result<LogitMask, ProtoError> {
        Ok(LogitMask {
            width: self.width,
            height: self.height,
            offset: self.offset(),
            values: self.to_f32()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    #[serde(flatten)]
    pub body: RequestBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum RequestBody {
    Init { protocol_version: u32, model_role: String },
    Detect { image: RasterPayload },
    /// `prompt` is in patch coordinates.
    Segment { patch: RasterPayload, prompt: Point2 },
    /// `center` is in image coordinates.
    Classify { patch: RasterPayload, center: Point2 },
    Shutdown,
}

impl RequestBody {
    pub fn op(&self) -> &'static str {
        match self {
            RequestBody::Init { .. } => "init",
            RequestBody::Detect { .. } => "detect",
            RequestBody::Segment { .. } => "segment",
            RequestBody::Classify { .. } => "classify",
            RequestBody::Shutdown => "shutdown",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireClass {
    Background,
    Regular,
    SpineEnd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireCandidate {
    pub mask: RasterPayload,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: u64,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_msg: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol_version: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<WireCandidate>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<RasterPayload>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<WireClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spine_end_kind: Option<SpineEnd>,
}

impl Response {
    pub fn ok(id: u64) -> Self {
        Self {
            id,
            status: Status::Ok,
            error_msg: None,
            protocol_version: None,
            candidates: None,
            logits: None,
            class: None,
            spine_end_kind: None,
        }
    }

    pub fn error(id: u64, msg: impl Into<String>) -> Self {
        Self {
            status: Status::Error,
            error_msg: Some(msg.into()),
            ..Self::ok(id)
        }
    }

    pub fn with_class(mut self, class: PatchClass) -> Self {
        let (c, kind) = match class {
            PatchClass::Background => (WireClass::Background, None),
            PatchClass::Regular => (WireClass::Regular, None),
            PatchClass::SpineEnd(e) => (WireClass::SpineEnd, Some(e)),
        };
        self.class = Some(c);
        self.spine_end_kind = kind;
        self
    }

    pub fn with_candidates(mut self, candidates: &[DetectionCandidate]) -> Self {
        self.candidates = Some(
            candidates
                .iter()
                .map(|c| WireCandidate {
                    mask: RasterPayload::from_mask(&c.mask),
                    confidence: c.confidence,
                })
                .collect(),
        );
        self
    }

    /// The patch class carried by a classify response.
    pub fn patch_class(&self) -> Result<PatchClass, ProtoError> {
        match (self.class, self.spine_end_kind) {
            (Some(WireClass::Background), None) => Ok(PatchClass::Background),
            (Some(WireClass::Regular), None) => Ok(PatchClass::Regular),
            (Some(WireClass::SpineEnd), Some(e)) => Ok(PatchClass::SpineEnd(e)),
            (None, _) => Err(ProtoError::Schema("classify response without class".into())),
            _ => Err(ProtoError::Schema(
                "spine_end_kind must be present exactly when class is spine_end".into(),
            )),
        }
    }

    pub fn detection_candidates(&self) -> Result<Vec<DetectionCandidate>, ProtoError> {
        let wire = self
            .candidates
            .as_ref()
            .ok_or_else(|| ProtoError::Schema("detect response without candidates".into()))?;
        wire.iter()
            .map(|c| {
                if !(0.0..=1.0).contains(&c.confidence) {
                    return Err(ProtoError::Schema(format!("confidence {} outside [0,1]", c.confidence)));
                }
                let mask = c.mask.to_mask()?.cropped();
                if mask.is_empty() {
                    return Err(ProtoError::Schema("empty candidate mask".into()));
                }
                Ok(DetectionCandidate {
                    mask,
                    confidence: c.confidence,
                })
            })
            .collect()
    }
}

fn encode_line<T: Serialize>(msg: &T, cap: usize) -> Result<Vec<u8>, ProtoError> {
    let mut line = serde_json::to_vec(msg).map_err(|e| ProtoError::Schema(e.to_string()))?;
    if line.len() + 1 > cap {
        return Err(ProtoError::PayloadTooLarge {
            size: line.len() + 1,
            cap,
        });
    }
    line.push(b'\n');
    Ok(line)
}

/// One request as a newline-terminated line.
pub fn encode_request(req: &Request, cap: usize) -> Result<Vec<u8>, ProtoError> {
    encode_line(req, cap)
}

pub fn encode_response(resp: &Response, cap: usize) -> Result<Vec<u8>, ProtoError> {
    encode_line(resp, cap)
}

pub fn decode_request(line: &str) -> Result<Request, ProtoError> {
    serde_json::from_str(line.trim_end()).map_err(|e| ProtoError::ProtocolViolation(format!("malformed request: {e}")))
}

pub fn decode_response(line: &str) -> Result<Response, ProtoError> {
    serde_json::from_str(line.trim_end())
        .map_err(|e| ProtoError::ProtocolViolation(format!("malformed response: {e}")))
}
