//! Server side of the protocol: answers requests from any in-process backend.

use std::io::{BufRead, Write};

use super::{
    encode_response, Request, RequestBody, Response, DEFAULT_MAX_LINE_BYTES, PROTOCOL_VERSION,
};
use crate::backends::{Classifier, Detector, Segmenter};

/// Anything that can answer detect, segment and classify.
pub trait Handler: Detector + Segmenter + Classifier {}

impl<T: Detector + Segmenter + Classifier> Handler for T {}

/// Answers one request line. Returns the response and whether the
/// connection should close afterwards.
///
/// Malformed lines and unknown ops get an error response; they never end the
/// session. The id is echoed whenever it can be read, else 0.
pub fn handle_line<H: Handler + ?Sized>(line: &str, handler: &H) -> (Response, bool) {
    let value: serde_json::Value = match serde_json::from_str(line.trim_end()) {
        Ok(v) => v,
        Err(e) => return (Response::error(0, format!("malformed request: {e}")), false),
    };
    let id = value.get("id").and_then(|v| v.as_u64()).unwrap_or(0);
    let req: Request = match serde_json::from_value(value.clone()) {
        Ok(r) => r,
        Err(e) => {
            let op = value.get("op").and_then(|v| v.as_str()).unwrap_or("<missing>");
            return (Response::error(id, format!("bad request for op {op}: {e}")), false);
        }
    };
    let resp = match req.body {
        RequestBody::Init {
            protocol_version, ..
        } if protocol_version != PROTOCOL_VERSION => Response::error(
            id,
            format!("unsupported protocol version {protocol_version}, server speaks {PROTOCOL_VERSION}"),
        ),
        RequestBody::Init { .. } => Response {
            protocol_version: Some(PROTOCOL_VERSION),
            ..Response::ok(id)
        },
        RequestBody::Shutdown => return (Response::ok(id), true),
        RequestBody::Detect { image } => match image.to_image() {
            Err(e) => Response::error(id, e.to_string()),
            Ok(img) => match handler.detect(&img) {
                Ok(c) => Response::ok(id).with_candidates(&c),
                Err(e) => Response::error(id, e.to_string()),
            },
        },
        RequestBody::Segment { patch, prompt } => match patch.to_patch() {
            Err(e) => Response::error(id, e.to_string()),
            Ok(p) => match handler.segment(&p, prompt) {
                Ok(l) => Response {
                    logits: Some(super::RasterPayload::from_logits(&l)),
                    ..Response::ok(id)
                },
                Err(e) => Response::error(id, e.to_string()),
            },
        },
        RequestBody::Classify { patch, center } => match patch.to_patch() {
            Err(e) => Response::error(id, e.to_string()),
            Ok(p) => match handler.classify(&p, center) {
                Ok(c) => Response::ok(id).with_class(c),
                Err(e) => Response::error(id, e.to_string()),
            },
        },
    };
    (resp, false)
}

/// Serves requests from `reader` until shutdown or end of input.
pub fn serve<R, W, H>(mut reader: R, mut writer: W, handler: &H) -> std::io::Result<()>
where
    R: BufRead,
    W: Write,
    H: Handler + ?Sized,
{
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        if line.trim().is_empty() {
            continue;
        }
        let (resp, stop) = handle_line(&line, handler);
        let bytes = encode_response(&resp, DEFAULT_MAX_LINE_BYTES).unwrap_or_else(|e| {
            encode_response(&Response::error(resp.id, e.to_string()), DEFAULT_MAX_LINE_BYTES)
                .expect("error response is small")
        });
        writer.write_all(&bytes)?;
        writer.flush()?;
        if stop {
            return Ok(());
        }
    }
}
