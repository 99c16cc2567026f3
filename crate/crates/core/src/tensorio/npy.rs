use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

const MAGIC: &[u8; 6] = b"\x93NUMPY";
/// Magic, two version bytes and the u16 header length.
const PREAMBLE_LEN: usize = 10;
const HEADER_ALIGN: usize = 64;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("malformed NPY header: {0}")]
    MalformedHeader(String),
    #[error("unsupported dtype {0:?}, only little-endian float32 ('<f4') is accepted")]
    DtypeUnsupported(String),
    #[error("payload holds {found} bytes but shape requires {expected}")]
    TruncatedPayload { expected: u64, found: u64 },
    #[error("shape {found:?} does not fit: expected {expected}")]
    Shape { expected: String, found: Vec<usize> },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// A row-major float32 array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let n = element_count(&shape).ok_or_else(|| TensorError::Shape {
            expected: "element count fitting in usize".into(),
            found: shape.clone(),
        })?;
        if n != data.len() {
            return Err(TensorError::Shape {
                expected: format!("{} elements", data.len()),
                found: shape,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor, TensorError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_tensor(&bytes)
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<(), TensorError> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(tensor)).map_err(|source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Serializes a tensor into NPY v1.0 bytes.
pub fn encode_tensor(tensor: &Tensor) -> Vec<u8> {
    let shape = match tensor.shape.as_slice() {
        [] => "()".to_string(),
        [d] => format!("({d},)"),
        dims => format!(
            "({})",
            dims.iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {shape}, }}");
    // Pad with spaces so the payload starts on a 64-byte boundary; the header
    // always ends with a newline.
    let unpadded = PREAMBLE_LEN + header.len() + 1;
    let padding = (HEADER_ALIGN - unpadded % HEADER_ALIGN) % HEADER_ALIGN;
    header.extend(std::iter::repeat_n(' ', padding));
    header.push('\n');

    let mut out = Vec::with_capacity(PREAMBLE_LEN + header.len() + 4 * tensor.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in &tensor.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses NPY v1.0 bytes holding a little-endian float32 C-order array.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor, TensorError> {
    if bytes.len() < PREAMBLE_LEN || &bytes[..6] != MAGIC {
        return Err(TensorError::MalformedHeader(
            "missing \\x93NUMPY magic".into(),
        ));
    }
    if bytes[6..8] != [1, 0] {
        return Err(TensorError::MalformedHeader(format!(
            "unsupported version {}.{}",
            bytes[6], bytes[7]
        )));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let payload_start = PREAMBLE_LEN + header_len;
    if bytes.len() < payload_start {
        return Err(TensorError::MalformedHeader(
            "header length exceeds file size".into(),
        ));
    }
    let header = std::str::from_utf8(&bytes[PREAMBLE_LEN..payload_start])
        .map_err(|_| TensorError::MalformedHeader("header is not valid ASCII".into()))?;
    let dict = HeaderDict::parse(header)?;

    if dict.descr != "<f4" {
        return Err(TensorError::DtypeUnsupported(dict.descr));
    }
    if dict.fortran_order {
        return Err(TensorError::MalformedHeader(
            "fortran_order arrays are not supported".into(),
        ));
    }

    let payload = &bytes[payload_start..];
    let expected = element_count(&dict.shape)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| TensorError::MalformedHeader("shape overflows".into()))?;
    if payload.len() != expected {
        return Err(TensorError::TruncatedPayload {
            expected: expected as u64,
            found: payload.len() as u64,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor {
        shape: dict.shape,
        data,
    })
}

#[derive(Debug)]
struct HeaderDict {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

impl HeaderDict {
    /// Parses the Python dict literal numpy writes, e.g.
    /// `{'descr': '<f4', 'fortran_order': False, 'shape': (2, 3), }`.
    fn parse(text: &str) -> Result<Self, TensorError> {
        let mut p = Parser {
            s: text.trim_end().as_bytes(),
            pos: 0,
        };
        let (mut descr, mut fortran, mut shape) = (None, None, None);
        p.expect(b'{')?;
        loop {
            p.skip_ws();
            if p.eat(b'}') {
                break;
            }
            let key = p.string()?;
            p.skip_ws();
            p.expect(b':')?;
            p.skip_ws();
            match key.as_str() {
                "descr" => descr = Some(p.string()?),
                "fortran_order" => fortran = Some(p.boolean()?),
                "shape" => shape = Some(p.tuple()?),
                other => return Err(malformed(format!("unexpected key '{other}'"))),
            }
            p.skip_ws();
            if !p.eat(b',') {
                p.skip_ws();
                p.expect(b'}')?;
                break;
            }
        }
        p.skip_ws();
        if p.pos != p.s.len() {
            return Err(malformed("trailing characters after header dict"));
        }
        Ok(Self {
            descr: descr.ok_or_else(|| malformed("missing 'descr'"))?,
            fortran_order: fortran.ok_or_else(|| malformed("missing 'fortran_order'"))?,
            shape: shape.ok_or_else(|| malformed("missing 'shape'"))?,
        })
    }
}

fn malformed(msg: impl Into<String>) -> TensorError {
    TensorError::MalformedHeader(msg.into())
}

struct Parser<'a> {
    s: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<u8> {
        self.s.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(b' ' | b'\t' | b'\n' | b'\r')) {
            self.pos += 1;
        }
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<(), TensorError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(malformed(format!(
                "expected '{}' at offset {}",
                c as char, self.pos
            )))
        }
    }

    fn string(&mut self) -> Result<String, TensorError> {
        let quote = match self.peek() {
            Some(q @ (b'\'' | b'"')) => q,
            _ => return Err(malformed(format!("expected string at offset {}", self.pos))),
        };
        self.pos += 1;
        let start = self.pos;
        while self.peek().is_some_and(|c| c != quote) {
            self.pos += 1;
        }
        let value = std::str::from_utf8(&self.s[start..self.pos])
            .map_err(|_| malformed("non-UTF-8 string"))?
            .to_string();
        self.expect(quote)?;
        Ok(value)
    }

    fn boolean(&mut self) -> Result<bool, TensorError> {
        let rest = &self.s[self.pos..];
        if rest.starts_with(b"True") {
            self.pos += 4;
            Ok(true)
        } else if rest.starts_with(b"False") {
            self.pos += 5;
            Ok(false)
        } else {
            Err(malformed("expected True or False"))
        }
    }

    fn tuple(&mut self) -> Result<Vec<usize>, TensorError> {
        self.expect(b'(')?;
        let mut dims = Vec::new();
        loop {
            self.skip_ws();
            if self.eat(b')') {
                return Ok(dims);
            }
            let start = self.pos;
            while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                self.pos += 1;
            }
            let digits = std::str::from_utf8(&self.s[start..self.pos]).unwrap_or_default();
            let dim = digits
                .parse()
                .map_err(|_| malformed(format!("bad shape entry at offset {start}")))?;
            dims.push(dim);
            self.skip_ws();
            if !self.eat(b',') {
                self.skip_ws();
                self.expect(b')')?;
                return Ok(dims);
            }
        }
    }
}
