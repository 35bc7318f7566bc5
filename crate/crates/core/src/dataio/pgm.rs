//! Binary 8-bit PGM (`P5`) reading and writing.

use thiserror::Error;

use crate::geometry::GrayImage;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PgmError {
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt PGM file: {0}")]
    CorruptFile(String),
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Option<&[u8]> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        (self.pos > start).then(|| &self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &str) -> Result<usize, PgmError> {
        let tok = self
            .token()
            .ok_or_else(|| PgmError::CorruptFile(format!("missing {what}")))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PgmError::CorruptFile(format!("bad {what}")))
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, PgmError> {
    let mut h = Header { bytes, pos: 0 };
    match h.token() {
        Some(b"P5") => {}
        Some(magic) if magic.len() == 2 && magic[0] == b'P' => {
            return Err(PgmError::UnsupportedFormat(format!(
                "magic {}, only binary P5 is supported",
                String::from_utf8_lossy(magic)
            )))
        }
        _ => return Err(PgmError::UnsupportedFormat("not a PGM file".into())),
    }
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(PgmError::UnsupportedFormat(format!("maxval {maxval}, only 8-bit is supported")));
    }
    // exactly one whitespace byte separates the header from the raster
    if h.pos >= bytes.len() || !bytes[h.pos].is_ascii_whitespace() {
        return Err(PgmError::CorruptFile("missing raster".into()));
    }
    let data = &bytes[h.pos + 1..];
    let need = width * height;
    if data.len() < need {
        return Err(PgmError::CorruptFile(format!(
            "raster truncated: {} of {need} bytes",
            data.len()
        )));
    }
    Ok(GrayImage::from_raw(width, height, data[..need].to_vec()).expect("sized"))
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}
