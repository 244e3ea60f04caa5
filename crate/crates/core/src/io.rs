//! File formats: the RIMG binary range image, JSON-lines box records, and
//! PPM renders.
//!
//! RIMG layout, all little-endian: the magic `RIMG`, then `u32` version,
//! height, width and channel count, then `height` beam inclinations as
//! `f64`, then the channel planes (`height·width` `f64` each) in
//! [`Channel`] order.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::OrientedBox;
use crate::postproc::Proposal;
use crate::rimg::{BeamTable, Channel, RangeImage};

pub const RIMG_MAGIC: &[u8; 4] = b"RIMG";
pub const RIMG_VERSION: u32 = 1;

/// Tolerance used when checking a decoded image's channel consistency.
const LOAD_TOL: f64 = 1e-9;

pub fn encode_rimg(img: &RangeImage<f64>) -> Vec<u8> {
    let (h, w) = (img.height(), img.width());
    let mut out = Vec::with_capacity(20 + 8 * (h + Channel::COUNT * h * w));
    out.extend_from_slice(RIMG_MAGIC);
    for v in [RIMG_VERSION, h as u32, w as u32, Channel::COUNT as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in img.beams().inclinations().iter().chain(img.planes()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_rimg<W: Write>(mut w: W, img: &RangeImage<f64>) -> Result<()> {
    w.write_all(&encode_rimg(img))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos as u64,
                msg: format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n * 8, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn error(&self, at: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: at as u64,
            msg: msg.into(),
        }
    }
}

pub fn decode_rimg(bytes: &[u8]) -> Result<RangeImage<f64>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4, "magic")? != RIMG_MAGIC {
        return Err(c.error(0, "bad magic, expected RIMG"));
    }
    let version = c.u32("version")?;
    if version != RIMG_VERSION {
        return Err(c.error(4, format!("unsupported version {version}")));
    }
    let h = c.u32("height")? as usize;
    let w = c.u32("width")? as usize;
    if h == 0 || w == 0 {
        return Err(c.error(8, format!("empty image {h}x{w}")));
    }
    let channels = c.u32("channel count")? as usize;
    if channels != Channel::COUNT {
        return Err(c.error(16, format!("expected {} channels, found {channels}", Channel::COUNT)));
    }
    let beams_at = c.pos;
    let beams = BeamTable::new(c.f64s(h, "beam table")?).map_err(|e| c.error(beams_at, e.to_string()))?;
    let n = h
        .checked_mul(w)
        .and_then(|hw| hw.checked_mul(channels))
        .ok_or_else(|| c.error(8, "image dimensions overflow"))?;
    let planes_at = c.pos;
    let planes = c.f64s(n, "channel planes")?;
    if c.pos != bytes.len() {
        return Err(c.error(c.pos, format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    RangeImage::from_planes(beams, w, planes, LOAD_TOL).map_err(|e| c.error(planes_at, e.to_string()))
}

pub fn read_rimg(path: &std::path::Path) -> Result<RangeImage<f64>> {
    decode_rimg(&std::fs::read(path)?)
}

/// One line of a box or detection file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxRecord {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
    pub class: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl BoxRecord {
    pub fn new(b: &OrientedBox<f64>, class: &str, score: Option<f64>) -> Self {
        Self {
            cx: b.cx,
            cy: b.cy,
            cz: b.cz,
            l: b.length,
            w: b.width,
            h: b.height,
            yaw: b.yaw,
            class: class.to_string(),
            score,
        }
    }

    pub fn to_box(&self) -> Result<OrientedBox<f64>> {
        OrientedBox::new([self.cx, self.cy, self.cz], [self.l, self.w, self.h], self.yaw)
    }

    pub fn to_proposal(&self) -> Result<Proposal<f64>> {
        let score = self
            .score
            .ok_or_else(|| Error::contract("detection record has no score"))?;
        if !score.is_finite() {
            return Err(Error::contract("detection score must be finite"));
        }
        Ok(Proposal {
            bbox: self.to_box()?,
            score,
        })
    }
}

pub fn write_records<W: Write>(mut w: W, records: &[BoxRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Byte offset of a JSON error's line/column position in `text`.
pub fn json_error_offset(text: &str, e: &serde_json::Error) -> u64 {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(e.line().saturating_sub(1))
        .map(str::len)
        .sum();
    (line_start + e.column().saturating_sub(1)).min(text.len()) as u64
}

/// Parses a whole JSON document, reporting failures with a byte offset.
pub fn parse_json<D: serde::de::DeserializeOwned>(text: &str) -> Result<D> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        offset: json_error_offset(text, &e),
        msg: e.to_string(),
    })
}

/// Parses JSON-lines records; blank lines are skipped. Errors carry the byte
/// offset of the offending character.
pub fn parse_records(text: &str) -> Result<Vec<BoxRecord>> {
    let mut out = Vec::new();
    let mut start = 0usize;
    for line in text.split_inclusive('\n') {
        let body = line.trim_end_matches(['\n', '\r']);
        if !body.trim().is_empty() {
            let rec: BoxRecord = serde_json::from_str(body).map_err(|e| Error::Parse {
                offset: start as u64 + json_error_offset(body, &e),
                msg: e.to_string(),
            })?;
            if let Err(e) = rec.to_box() {
                return Err(Error::Parse {
                    offset: start as u64,
                    msg: e.to_string(),
                });
            }
            out.push(rec);
        }
        start += line.len();
    }
    Ok(out)
}

pub fn read_records(path: &std::path::Path) -> Result<Vec<BoxRecord>> {
    let bytes = std::fs::read(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Parse {
        offset: e.valid_up_to() as u64,
        msg: "invalid UTF-8".into(),
    })?;
    parse_records(text)
}

/// Binary PPM of the range channel: non-empty pixels are min–max normalized
/// to gray levels 55..=255 so the nearest returns are brightest and empty
/// pixels stay black. Pixels flagged in `mask` are tinted red.
pub fn render_ppm(img: &RangeImage<f64>, mask: Option<&[bool]>) -> Result<Vec<u8>> {
    let (h, w) = (img.height(), img.width());
    if let Some(m) = mask {
        if m.len() != h * w {
            return Err(Error::shape("render mask", &[m.len()], &[h * w]));
        }
    }
    let ranges = img.plane(Channel::Range);
    let (lo, hi) = ranges
        .iter()
        .filter(|&&r| r > 0.0)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| (lo.min(r), hi.max(r)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for (k, &r) in ranges.iter().enumerate() {
        let g = if r > 0.0 {
            (255.0 - 200.0 * (r - lo) / span).round() as u8
        } else {
            0
        };
        let px = match mask {
            Some(m) if m[k] => [255, g / 3, g / 3],
            _ => [g, g, g],
        };
        out.extend_from_slice(&px);
    }
    Ok(out)
}
