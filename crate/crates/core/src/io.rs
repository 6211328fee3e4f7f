//! On-disk formats.
//!
//! A volume file is one line of JSON header terminated by `\n`, followed
//! directly by the raw little-endian voxel payload:
//!
//! ```text
//! {"shape":[z,y,x],"spacing_mm":[z,y,x],"dtype":"u8","order":"row-major z-major"}\n<payload>
//! ```
//!
//! A box file is a JSON document
//! `{"scan_id", "spacing_mm", "boxes": [{"box": [z1,y1,x1,z2,y2,x2], "label", "score"?}]}`
//! or an array of such documents. Coordinates are voxel units; numbers are
//! written in shortest round-trip decimal form.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::annotation::LabelMap;
use crate::geometry::{Box3, Spacing, VolumeMeta};
use crate::metrics::{GroundTruth, ScanDetections, ScanGroundTruth};
use crate::nms::Detection;

pub const VOLUME_ORDER: &str = "row-major z-major";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: byte {offset}: bad header: {reason}")]
    HeaderMismatch {
        path: PathBuf,
        offset: usize,
        reason: String,
    },
    #[error("{path}: byte {offset}: payload has {got} bytes, header requires {expected}")]
    TruncatedPayload {
        path: PathBuf,
        offset: usize,
        expected: usize,
        got: usize,
    },
    #[error("{path}: byte {offset}: unsupported dtype '{dtype}' (expected u8 or u16)")]
    UnsupportedDtype {
        path: PathBuf,
        offset: usize,
        dtype: String,
    },
    #[error("{path}: voxel {index}: value {value} does not fit in {dtype}")]
    ValueOutOfRange {
        path: PathBuf,
        index: usize,
        value: u16,
        dtype: Dtype,
    },
    #[error("{path}: line {line}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: {location}: missing field '{field}'")]
    MissingField {
        path: PathBuf,
        location: String,
        field: String,
    },
    #[error("{path}: {location}: {reason}")]
    MalformedBox {
        path: PathBuf,
        location: String,
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    U16,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::U16 => 2,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "u8" => Some(Dtype::U8),
            "u16" => Some(Dtype::U16),
            _ => None,
        }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Dtype::U8 => "u8",
            Dtype::U16 => "u16",
        })
    }
}

/// A label map together with its storage type.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub map: LabelMap,
    pub dtype: Dtype,
}

#[derive(Serialize)]
struct VolumeHeader<'a> {
    shape: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: Dtype,
    order: &'a str,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn encode_volume(volume: &Volume, path: &Path) -> Result<Vec<u8>, FormatError> {
    let meta = volume.map.meta();
    let header = VolumeHeader {
        shape: meta.shape(),
        spacing_mm: meta.spacing().mm(),
        dtype: volume.dtype,
        order: VOLUME_ORDER,
    };
    let mut bytes = serde_json::to_vec(&header).expect("header serializes");
    bytes.push(b'\n');
    let data = volume.map.data();
    bytes.reserve(data.len() * volume.dtype.size());
    for (index, &v) in data.iter().enumerate() {
        match volume.dtype {
            Dtype::U8 => {
                let b = u8::try_from(v).map_err(|_| FormatError::ValueOutOfRange {
                    path: path.to_path_buf(),
                    index,
                    value: v,
                    dtype: Dtype::U8,
                })?;
                bytes.push(b);
            }
            Dtype::U16 => bytes.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(bytes)
}

fn header_err(path: &Path, offset: usize, reason: impl Into<String>) -> FormatError {
    FormatError::HeaderMismatch {
        path: path.to_path_buf(),
        offset,
        reason: reason.into(),
    }
}

fn header_field<'a>(obj: &'a Map<String, Value>, field: &str, path: &Path) -> Result<&'a Value, FormatError> {
    obj.get(field)
        .ok_or_else(|| header_err(path, 0, format!("missing field '{field}'")))
}

fn triple<T>(v: &Value, field: &str, path: &Path, get: impl Fn(&Value) -> Option<T>) -> Result<[T; 3], FormatError> {
    let bad = || header_err(path, 0, format!("'{field}' must be an array of 3 numbers"));
    let arr = v.as_array().filter(|a| a.len() == 3).ok_or_else(bad)?;
    let a = get(&arr[0]).ok_or_else(bad)?;
    let b = get(&arr[1]).ok_or_else(bad)?;
    let c = get(&arr[2]).ok_or_else(bad)?;
    Ok([a, b, c])
}

/// Parses a volume file image; `path` is only used in error messages.
pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<Volume, FormatError> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| header_err(path, bytes.len(), "no newline terminating the header"))?;
    let header: Value = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| header_err(path, e.column().saturating_sub(1), e.to_string()))?;
    let obj = header
        .as_object()
        .ok_or_else(|| header_err(path, 0, "header is not a JSON object"))?;

    let shape = triple(header_field(obj, "shape", path)?, "shape", path, |v| {
        v.as_u64().map(|n| n as usize)
    })?;
    let spacing = triple(header_field(obj, "spacing_mm", path)?, "spacing_mm", path, Value::as_f64)?;
    let dtype_str = header_field(obj, "dtype", path)?
        .as_str()
        .ok_or_else(|| header_err(path, 0, "'dtype' must be a string"))?;
    let dtype = Dtype::parse(dtype_str).ok_or_else(|| FormatError::UnsupportedDtype {
        path: path.to_path_buf(),
        offset: find_offset(&bytes[..newline], dtype_str),
        dtype: dtype_str.to_string(),
    })?;
    let order = header_field(obj, "order", path)?.as_str().unwrap_or_default();
    if order != VOLUME_ORDER {
        return Err(header_err(
            path,
            find_offset(&bytes[..newline], "order"),
            format!("order must be '{VOLUME_ORDER}', got '{order}'"),
        ));
    }
    let meta = VolumeMeta::new(shape, spacing).map_err(|e| header_err(path, 0, e.to_string()))?;

    let start = newline + 1;
    let payload = &bytes[start..];
    let expected = meta.voxel_count() * dtype.size();
    if payload.len() < expected {
        return Err(FormatError::TruncatedPayload {
            path: path.to_path_buf(),
            offset: bytes.len(),
            expected,
            got: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(header_err(
            path,
            start + expected,
            format!("{} trailing bytes after the payload", payload.len() - expected),
        ));
    }
    let data: Vec<u16> = match dtype {
        Dtype::U8 => payload.iter().map(|&b| b as u16).collect(),
        Dtype::U16 => payload
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect(),
    };
    let map = LabelMap::new(meta, data).expect("payload length checked");
    Ok(Volume { map, dtype })
}

fn find_offset(haystack: &[u8], needle: &str) -> usize {
    haystack
        .windows(needle.len().max(1))
        .position(|w| w == needle.as_bytes())
        .unwrap_or(0)
}

pub fn read_volume(path: &Path) -> Result<Volume, FormatError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_volume(&bytes, path)
}

pub fn write_volume(volume: &Volume, path: &Path) -> Result<(), FormatError> {
    let bytes = encode_volume(volume, path)?;
    fs::write(path, bytes).map_err(io_err(path))
}

/// One entry of a box file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxRecord {
    pub bbox: Box3,
    pub label: i64,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxDocument {
    pub scan_id: String,
    pub spacing: Spacing,
    pub boxes: Vec<BoxRecord>,
}

#[derive(Serialize)]
struct RecordOut {
    #[serde(rename = "box")]
    bbox: [f64; 6],
    label: i64,
    #[serde(skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

#[derive(Serialize)]
struct DocumentOut<'a> {
    scan_id: &'a str,
    spacing_mm: [f64; 3],
    boxes: Vec<RecordOut>,
}

impl BoxDocument {
    pub fn new(scan_id: impl Into<String>, spacing: Spacing) -> Self {
        Self {
            scan_id: scan_id.into(),
            spacing,
            boxes: Vec::new(),
        }
    }

    fn to_out(&self) -> DocumentOut<'_> {
        DocumentOut {
            scan_id: &self.scan_id,
            spacing_mm: self.spacing.mm(),
            boxes: self
                .boxes
                .iter()
                .map(|r| RecordOut {
                    bbox: r.bbox.corners(),
                    label: r.label,
                    score: r.score,
                })
                .collect(),
        }
    }

    pub fn from_detections(scan_id: impl Into<String>, spacing: Spacing, dets: &[Detection]) -> Self {
        Self {
            scan_id: scan_id.into(),
            spacing,
            boxes: dets
                .iter()
                .map(|d| BoxRecord {
                    bbox: d.bbox,
                    label: d.label,
                    score: Some(d.score()),
                })
                .collect(),
        }
    }

    pub fn from_boxes(scan_id: impl Into<String>, spacing: Spacing, boxes: &[Box3], label: i64) -> Self {
        Self {
            scan_id: scan_id.into(),
            spacing,
            boxes: boxes
                .iter()
                .map(|&bbox| BoxRecord {
                    bbox,
                    label,
                    score: None,
                })
                .collect(),
        }
    }

    /// Detections of this document; every record needs a score in `[0, 1]`.
    pub fn detections(&self, path: &Path) -> Result<ScanDetections, FormatError> {
        let detections = self
            .boxes
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let location = format!("scan '{}' box {i}", self.scan_id);
                let score = r.score.ok_or_else(|| FormatError::MissingField {
                    path: path.to_path_buf(),
                    location: location.clone(),
                    field: "score".into(),
                })?;
                Detection::new(r.bbox, score, r.label).map_err(|e| FormatError::MalformedBox {
                    path: path.to_path_buf(),
                    location,
                    reason: e.to_string(),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(ScanDetections {
            scan_id: self.scan_id.clone(),
            detections,
        })
    }

    /// Ground truth of this document; scores, if present, are ignored.
    pub fn ground_truth(&self) -> ScanGroundTruth {
        ScanGroundTruth {
            scan_id: self.scan_id.clone(),
            spacing: self.spacing,
            boxes: self
                .boxes
                .iter()
                .map(|r| GroundTruth::new(r.bbox, r.label))
                .collect(),
        }
    }
}

fn parse_err(path: &Path, e: serde_json::Error) -> FormatError {
    FormatError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

struct Ctx<'a> {
    path: &'a Path,
}

impl Ctx<'_> {
    fn missing(&self, location: &str, field: &str) -> FormatError {
        FormatError::MissingField {
            path: self.path.to_path_buf(),
            location: location.to_string(),
            field: field.to_string(),
        }
    }

    fn malformed(&self, location: &str, reason: impl Into<String>) -> FormatError {
        FormatError::MalformedBox {
            path: self.path.to_path_buf(),
            location: location.to_string(),
            reason: reason.into(),
        }
    }

    fn field<'v>(&self, obj: &'v Map<String, Value>, location: &str, field: &str) -> Result<&'v Value, FormatError> {
        match obj.get(field) {
            Some(Value::Null) | None => Err(self.missing(location, field)),
            Some(v) => Ok(v),
        }
    }

    fn numbers<const N: usize>(&self, v: &Value, location: &str, field: &str) -> Result<[f64; N], FormatError> {
        let bad = || self.malformed(location, format!("'{field}' must be an array of {N} numbers"));
        let arr = v.as_array().filter(|a| a.len() == N).ok_or_else(bad)?;
        let mut out = [0.0; N];
        for (o, x) in out.iter_mut().zip(arr) {
            *o = x.as_f64().ok_or_else(bad)?;
        }
        Ok(out)
    }

    fn document(&self, v: &Value, location: &str) -> Result<BoxDocument, FormatError> {
        let obj = v
            .as_object()
            .ok_or_else(|| self.malformed(location, "expected a JSON object"))?;
        let scan_id = self
            .field(obj, location, "scan_id")?
            .as_str()
            .ok_or_else(|| self.malformed(location, "'scan_id' must be a string"))?
            .to_string();
        let location = format!("{location} (scan '{scan_id}')");
        let spacing = self.numbers::<3>(self.field(obj, &location, "spacing_mm")?, &location, "spacing_mm")?;
        let spacing = Spacing::new(spacing).map_err(|e| self.malformed(&location, e.to_string()))?;
        let boxes = self
            .field(obj, &location, "boxes")?
            .as_array()
            .ok_or_else(|| self.malformed(&location, "'boxes' must be an array"))?;
        let boxes = boxes
            .iter()
            .enumerate()
            .map(|(i, b)| self.record(b, &format!("{location} box {i}")))
            .collect::<Result<_, _>>()?;
        Ok(BoxDocument { scan_id, spacing, boxes })
    }

    fn record(&self, v: &Value, location: &str) -> Result<BoxRecord, FormatError> {
        let obj = v
            .as_object()
            .ok_or_else(|| self.malformed(location, "expected a JSON object"))?;
        let corners = self.numbers::<6>(self.field(obj, location, "box")?, location, "box")?;
        let bbox = Box3::from_corners(corners).map_err(|e| self.malformed(location, e.to_string()))?;
        let label = self
            .field(obj, location, "label")?
            .as_i64()
            .ok_or_else(|| self.malformed(location, "'label' must be an integer"))?;
        let score = match obj.get("score") {
            None | Some(Value::Null) => None,
            Some(s) => Some(
                s.as_f64()
                    .ok_or_else(|| self.malformed(location, "'score' must be a number"))?,
            ),
        };
        Ok(BoxRecord { bbox, label, score })
    }
}

/// Parses a box file image holding one document or an array of documents.
pub fn decode_boxes(text: &str, path: &Path) -> Result<Vec<BoxDocument>, FormatError> {
    let value: Value = serde_json::from_str(text).map_err(|e| parse_err(path, e))?;
    let ctx = Ctx { path };
    match &value {
        Value::Array(docs) => docs
            .iter()
            .enumerate()
            .map(|(i, d)| ctx.document(d, &format!("document {i}")))
            .collect(),
        other => Ok(vec![ctx.document(other, "document 0")?]),
    }
}

/// Pretty-printed JSON; a single document is written bare, several as an
/// array.
pub fn encode_boxes(docs: &[BoxDocument]) -> String {
    let mut text = if docs.len() == 1 {
        serde_json::to_string_pretty(&docs[0].to_out())
    } else {
        serde_json::to_string_pretty(&docs.iter().map(BoxDocument::to_out).collect::<Vec<_>>())
    }
    .expect("box documents serialize");
    text.push('\n');
    text
}

pub fn read_boxes(path: &Path) -> Result<Vec<BoxDocument>, FormatError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    decode_boxes(&text, path)
}

pub fn write_boxes(docs: &[BoxDocument], path: &Path) -> Result<(), FormatError> {
    fs::write(path, encode_boxes(docs)).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("t.vol")
    }

    fn zeros() -> Volume {
        Volume {
            map: LabelMap::zeros(VolumeMeta::new([2, 2, 2], [5.0, 0.5, 0.5]).unwrap()),
            dtype: Dtype::U8,
        }
    }

    #[test]
    fn zero_volume_reads_back() {
        let bytes = encode_volume(&zeros(), p()).unwrap();
        let v = decode_volume(&bytes, p()).unwrap();
        assert!(v.map.data().iter().all(|&x| x == 0));
        assert_eq!(v, zeros());
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = encode_volume(&zeros(), p()).unwrap();
        bytes.pop();
        match decode_volume(&bytes, p()).unwrap_err() {
            FormatError::TruncatedPayload { expected, got, offset, .. } => {
                assert_eq!((expected, got), (8, 7));
                assert_eq!(offset, bytes.len());
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn header_errors() {
        let bad_dtype = b"{\"shape\":[1,1,1],\"spacing_mm\":[1,1,1],\"dtype\":\"f32\",\"order\":\"row-major z-major\"}\n\0";
        assert!(matches!(
            decode_volume(bad_dtype, p()),
            Err(FormatError::UnsupportedDtype { offset: 47, .. })
        ));
        let bad_order = b"{\"shape\":[1,1,1],\"spacing_mm\":[1,1,1],\"dtype\":\"u8\",\"order\":\"x-major\"}\n\0";
        assert!(matches!(decode_volume(bad_order, p()), Err(FormatError::HeaderMismatch { .. })));
        let mut long = encode_volume(&zeros(), p()).unwrap();
        long.push(0);
        assert!(matches!(decode_volume(&long, p()), Err(FormatError::HeaderMismatch { .. })));
        assert!(decode_volume(b"{}", p()).is_err());
        let err = decode_volume(bad_dtype, Path::new("scan7.vol")).unwrap_err();
        assert!(err.to_string().starts_with("scan7.vol: byte 47"));
    }

    #[test]
    fn u16_round_trip_and_u8_overflow() {
        let meta = VolumeMeta::new([1, 2, 3], [1.0; 3]).unwrap();
        let map = LabelMap::new(meta, vec![0, 1, 255, 256, 65535, 7]).unwrap();
        let v = Volume { map, dtype: Dtype::U16 };
        let bytes = encode_volume(&v, p()).unwrap();
        assert_eq!(decode_volume(&bytes, p()).unwrap(), v);
        let u8v = Volume { dtype: Dtype::U8, ..v };
        assert!(matches!(
            encode_volume(&u8v, p()),
            Err(FormatError::ValueOutOfRange { index: 3, .. })
        ));
    }

    #[test]
    fn empty_box_file() {
        let doc = BoxDocument::new("s", Spacing::isotropic());
        let text = encode_boxes(std::slice::from_ref(&doc));
        assert_eq!(decode_boxes(&text, p()).unwrap(), vec![doc]);
    }

    #[test]
    fn malformed_and_missing() {
        let flat = r#"{"scan_id":"a","spacing_mm":[1,1,1],"boxes":[{"box":[1,0,0,1,2,2],"label":1}]}"#;
        let e = decode_boxes(flat, p()).unwrap_err();
        assert!(matches!(e, FormatError::MalformedBox { .. }), "{e}");
        assert!(e.to_string().contains("box 0"));
        let no_label = r#"{"scan_id":"a","spacing_mm":[1,1,1],"boxes":[{"box":[0,0,0,1,2,2]}]}"#;
        assert!(matches!(
            decode_boxes(no_label, p()),
            Err(FormatError::MissingField { ref field, .. }) if field == "label"
        ));
        let no_boxes = r#"[{"scan_id":"a","spacing_mm":[1,1,1]}]"#;
        assert!(matches!(decode_boxes(no_boxes, p()), Err(FormatError::MissingField { .. })));
        assert!(matches!(decode_boxes("{", p()), Err(FormatError::Parse { .. })));
    }

    #[test]
    fn detections_need_scores() {
        let doc = BoxDocument::from_boxes("a", Spacing::isotropic(), &[Box3::from_corners([0., 0., 0., 1., 1., 1.]).unwrap()], 1);
        assert!(matches!(doc.detections(p()), Err(FormatError::MissingField { .. })));
        assert_eq!(doc.ground_truth().boxes.len(), 1);
    }

    #[test]
    fn awkward_floats_round_trip() {
        let b = Box3::from_corners([0.1, 1.0 / 3.0, -2.5e-300, 0.30000000000000004, 1e17, 7.0]).unwrap();
        let d = Detection::new(b, 0.123456789012345678, -4).unwrap();
        let docs = vec![
            BoxDocument::from_detections("x", Spacing::new([2.5, 0.4, 0.4]).unwrap(), &[d]),
            BoxDocument::new("y", Spacing::isotropic()),
        ];
        let text = encode_boxes(&docs);
        assert_eq!(decode_boxes(&text, p()).unwrap(), docs);
        assert_eq!(encode_boxes(&docs), text);
    }
}
