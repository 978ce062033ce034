//! Tensor files in the npy layout (version 1.0, little-endian, C order) and
//! the JSON run manifest binding layers to weight and calibration files.
//!
//! Only the three element types the engine needs are supported: `<f4` for
//! weights and activations, `<i4` for integer codes and `|u1` for masks.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{ErqError, Result, TensorError};
use crate::quant::Family;

pub(crate) const MAGIC: &[u8; 6] = b"\x93NUMPY";
const PREAMBLE_LEN: usize = 10;
const HEADER_ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Float32,
    Int32,
    Uint8,
}

impl DType {
    fn descr(self) -> &'static str {
        match self {
            DType::Float32 => "<f4",
            DType::Int32 => "<i4",
            DType::Uint8 => "|u1",
        }
    }

    fn from_descr(descr: &str) -> Option<Self> {
        match descr {
            "<f4" => Some(DType::Float32),
            "<i4" => Some(DType::Int32),
            "|u1" | "<u1" => Some(DType::Uint8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::Float32 | DType::Int32 => 4,
            DType::Uint8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Float32(Vec<f32>),
    Int32(Vec<i32>),
    Uint8(Vec<u8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::Float32(v) => v.len(),
            TensorData::Int32(v) => v.len(),
            TensorData::Uint8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::Float32(_) => DType::Float32,
            TensorData::Int32(_) => DType::Int32,
            TensorData::Uint8(_) => DType::Uint8,
        }
    }
}

/// A dense row-major tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    shape: Vec<usize>,
    data: TensorData,
}

impl TensorFile {
    pub fn new(shape: Vec<usize>, data: TensorData) -> std::result::Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                shape,
                expected,
                found: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    /// Stores a matrix as a 2-D float32 tensor, rounding each entry to f32.
    pub fn from_matrix_f32(m: &DMatrix<f64>) -> Self {
        let data = row_major(m).map(|v| v as f32).collect();
        Self {
            shape: vec![m.nrows(), m.ncols()],
            data: TensorData::Float32(data),
        }
    }

    pub fn from_codes(rows: usize, cols: usize, codes: Vec<i32>) -> std::result::Result<Self, TensorError> {
        Self::new(vec![rows, cols], TensorData::Int32(codes))
    }

    /// Widens a 2-D float32 tensor into an f64 matrix.
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        let [rows, cols] = self.shape[..] else {
            return Err(ErqError::validation(format!(
                "expected a 2-D tensor, got shape {:?}",
                self.shape
            )));
        };
        match &self.data {
            TensorData::Float32(v) => Ok(DMatrix::from_row_iterator(
                rows,
                cols,
                v.iter().map(|&x| f64::from(x)),
            )),
            other => Err(ErqError::validation(format!(
                "expected float32 tensor, got {:?}",
                other.dtype()
            ))),
        }
    }
}

pub(crate) fn row_major(m: &DMatrix<f64>) -> impl Iterator<Item = f64> + '_ {
    (0..m.nrows()).flat_map(move |i| (0..m.ncols()).map(move |j| m[(i, j)]))
}

fn header_dict(dtype: DType, shape: &[usize]) -> String {
    let mut dims = String::new();
    for (i, d) in shape.iter().enumerate() {
        if i > 0 {
            dims.push_str(", ");
        }
        let _ = write!(dims, "{d}");
    }
    if shape.len() == 1 {
        dims.push(',');
    }
    format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': ({}), }}",
        dtype.descr(),
        dims
    )
}

/// Serializes a tensor to npy bytes. Output depends only on the tensor.
pub fn encode(t: &TensorFile) -> Vec<u8> {
    let mut dict = header_dict(t.dtype(), &t.shape);
    let unpadded = PREAMBLE_LEN + dict.len() + 1;
    let padded = unpadded.div_ceil(HEADER_ALIGN) * HEADER_ALIGN;
    dict.extend(std::iter::repeat_n(' ', padded - unpadded));
    dict.push('\n');

    let mut out = Vec::with_capacity(padded + t.data.len() * t.dtype().size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    match &t.data {
        TensorData::Float32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::Int32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::Uint8(v) => out.extend_from_slice(v),
    }
    out
}

/// Parses npy bytes produced by [`encode`] or by any npy v1.0 writer using a
/// supported dtype in C order.
pub fn decode(bytes: &[u8]) -> std::result::Result<TensorFile, TensorError> {
    let malformed = |offset: usize, reason: &str| TensorError::MalformedHeader {
        offset,
        reason: reason.to_string(),
    };
    if bytes.len() < PREAMBLE_LEN {
        return Err(malformed(bytes.len(), "file shorter than npy preamble"));
    }
    if &bytes[..6] != MAGIC {
        return Err(malformed(0, "missing npy magic string"));
    }
    if bytes[6..8] != [1, 0] {
        return Err(malformed(6, "only npy version 1.0 is supported"));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let data_start = PREAMBLE_LEN + header_len;
    if bytes.len() < data_start {
        return Err(malformed(bytes.len(), "header extends past end of file"));
    }
    let header = std::str::from_utf8(&bytes[PREAMBLE_LEN..data_start])
        .map_err(|e| malformed(PREAMBLE_LEN + e.valid_up_to(), "header is not valid UTF-8"))?;
    let dict = HeaderParser::new(header, PREAMBLE_LEN).parse()?;

    let dtype = DType::from_descr(&dict.descr).ok_or_else(|| TensorError::UnsupportedDtype {
        descr: dict.descr.clone(),
        offset: PREAMBLE_LEN + dict.descr_offset,
    })?;
    if dict.fortran_order {
        return Err(malformed(
            PREAMBLE_LEN + dict.fortran_offset,
            "fortran_order=True is not supported",
        ));
    }

    let count: usize = dict.shape.iter().product();
    let expected = count * dtype.size();
    let payload = &bytes[data_start..];
    if payload.len() < expected {
        return Err(TensorError::TruncatedPayload {
            offset: data_start + payload.len(),
            expected,
            found: payload.len(),
        });
    }
    let payload = &payload[..expected];
    let data = match dtype {
        DType::Float32 => TensorData::Float32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        DType::Int32 => TensorData::Int32(
            payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        DType::Uint8 => TensorData::Uint8(payload.to_vec()),
    };
    TensorFile::new(dict.shape, data)
}

pub fn read_tensor(path: impl AsRef<Path>) -> std::result::Result<TensorFile, TensorError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &TensorFile) -> std::result::Result<(), TensorError> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct HeaderDict {
    descr: String,
    descr_offset: usize,
    fortran_order: bool,
    fortran_offset: usize,
    shape: Vec<usize>,
}

/// Minimal parser for the python-literal dict in an npy header.
struct HeaderParser<'a> {
    src: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> HeaderParser<'a> {
    fn new(src: &'a str, base: usize) -> Self {
        Self {
            src: src.as_bytes(),
            pos: 0,
            base,
        }
    }

    fn err(&self, reason: impl Into<String>) -> TensorError {
        TensorError::MalformedHeader {
            offset: self.base + self.pos,
            reason: reason.into(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> std::result::Result<(), TensorError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(format!("expected '{}'", c as char)))
        }
    }

    fn string(&mut self) -> std::result::Result<String, TensorError> {
        let quote = match self.peek() {
            Some(q @ (b'\'' | b'"')) => q,
            _ => return Err(self.err("expected quoted string")),
        };
        self.pos += 1;
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos] != quote {
            self.pos += 1;
        }
        if self.pos >= self.src.len() {
            return Err(self.err("unterminated string"));
        }
        let s = String::from_utf8_lossy(&self.src[start..self.pos]).into_owned();
        self.pos += 1;
        Ok(s)
    }

    fn boolean(&mut self) -> std::result::Result<bool, TensorError> {
        self.skip_ws();
        let rest = &self.src[self.pos..];
        if rest.starts_with(b"True") {
            self.pos += 4;
            Ok(true)
        } else if rest.starts_with(b"False") {
            self.pos += 5;
            Ok(false)
        } else {
            Err(self.err("expected True or False"))
        }
    }

    fn shape(&mut self) -> std::result::Result<Vec<usize>, TensorError> {
        self.expect(b'(')?;
        let mut dims = Vec::new();
        loop {
            match self.peek() {
                Some(b')') => {
                    self.pos += 1;
                    return Ok(dims);
                }
                Some(c) if c.is_ascii_digit() => {
                    let start = self.pos;
                    while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                        self.pos += 1;
                    }
                    let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("");
                    let d = text.parse().map_err(|_| self.err("dimension out of range"))?;
                    dims.push(d);
                    match self.peek() {
                        Some(b',') => self.pos += 1,
                        Some(b')') => {}
                        _ => return Err(self.err("expected ',' or ')' in shape")),
                    }
                }
                _ => return Err(self.err("expected dimension in shape")),
            }
        }
    }

    fn parse(mut self) -> std::result::Result<HeaderDict, TensorError> {
        self.expect(b'{')?;
        let mut descr = None;
        let mut fortran = None;
        let mut shape = None;
        loop {
            if self.peek() == Some(b'}') {
                break;
            }
            let key = self.string()?;
            self.expect(b':')?;
            self.skip_ws();
            let at = self.pos;
            match key.as_str() {
                "descr" => descr = Some((self.string()?, at)),
                "fortran_order" => fortran = Some((self.boolean()?, at)),
                "shape" => shape = Some(self.shape()?),
                other => return Err(self.err(format!("unexpected key '{other}'"))),
            }
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b'}') => {}
                _ => return Err(self.err("expected ',' or '}'")),
            }
        }
        let (descr, descr_offset) = descr.ok_or_else(|| self.err("missing 'descr'"))?;
        let (fortran_order, fortran_offset) =
            fortran.ok_or_else(|| self.err("missing 'fortran_order'"))?;
        let shape = shape.ok_or_else(|| self.err("missing 'shape'"))?;
        Ok(HeaderDict {
            descr,
            descr_offset,
            fortran_order,
            fortran_offset,
            shape,
        })
    }
}

/// One layer of a quantization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerManifestEntry {
    pub layer_id: String,
    pub weight_path: PathBuf,
    pub calib_path: PathBuf,
    pub act_quant: Family,
    pub bits_w: u32,
    pub bits_a: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub layers: Vec<LayerManifestEntry>,
}

pub const MAX_BITS: u32 = 16;

/// A manifest entry whose tensors have been loaded and cross-checked.
#[derive(Debug, Clone)]
pub struct LoadedLayer {
    pub entry: LayerManifestEntry,
    pub weight: DMatrix<f64>,
    pub calib: DMatrix<f64>,
}

/// Reads a manifest and resolves relative tensor paths against its directory.
/// Entries are returned in file order with their shapes validated.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<LayerManifestEntry>> {
    Ok(load_layers(path)?.into_iter().map(|l| l.entry).collect())
}

pub fn load_layers(path: impl AsRef<Path>) -> Result<Vec<LoadedLayer>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| ErqError::io(format!("reading manifest {}", path.display()), e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| ErqError::validation(format!("manifest {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    manifest
        .layers
        .into_iter()
        .map(|mut entry| {
            if entry.weight_path.is_relative() {
                entry.weight_path = base.join(&entry.weight_path);
            }
            if entry.calib_path.is_relative() {
                entry.calib_path = base.join(&entry.calib_path);
            }
            load_layer(entry)
        })
        .collect()
}

pub fn load_layer(entry: LayerManifestEntry) -> Result<LoadedLayer> {
    let weight = read_tensor(&entry.weight_path)?;
    let calib = read_tensor(&entry.calib_path)?;
    validate_entry(&entry, weight.shape(), calib.shape())?;
    let weight = weight.to_matrix()?;
    let calib = calib.to_matrix()?;
    check_activation_domain(&entry, &calib)?;
    Ok(LoadedLayer {
        entry,
        weight,
        calib,
    })
}

/// Shape and bit-width checks that do not need tensor contents.
pub fn validate_entry(
    entry: &LayerManifestEntry,
    weight_shape: &[usize],
    calib_shape: &[usize],
) -> Result<()> {
    let id = &entry.layer_id;
    for (name, bits) in [("bits_w", entry.bits_w), ("bits_a", entry.bits_a)] {
        if !(2..=MAX_BITS).contains(&bits) {
            return Err(ErqError::validation(format!(
                "layer {id}: {name}={bits} outside [2, {MAX_BITS}]"
            )));
        }
    }
    let [_, w_in] = weight_shape[..] else {
        return Err(ErqError::validation(format!(
            "layer {id}: weight must be 2-D, got {weight_shape:?}"
        )));
    };
    let [_, a_in] = calib_shape[..] else {
        return Err(ErqError::validation(format!(
            "layer {id}: calibration batch must be 2-D, got {calib_shape:?}"
        )));
    };
    if w_in != a_in {
        return Err(ErqError::validation(format!(
            "layer {id}: D_in mismatch, weight has {w_in} columns but calibration rows have {a_in}"
        )));
    }
    Ok(())
}

pub fn check_activation_domain(entry: &LayerManifestEntry, calib: &DMatrix<f64>) -> Result<()> {
    if let Some(bad) = calib.iter().find(|v| !v.is_finite()) {
        return Err(ErqError::validation(format!(
            "layer {}: non-finite calibration value {bad}",
            entry.layer_id
        )));
    }
    if entry.act_quant == Family::LogSqrt2 {
        if let Some(neg) = calib.iter().find(|&&v| v < 0.0) {
            return Err(ErqError::validation(format!(
                "layer {}: log_sqrt2 activation quantizer needs non-negative inputs, found {neg}",
                entry.layer_id
            )));
        }
    }
    Ok(())
}
