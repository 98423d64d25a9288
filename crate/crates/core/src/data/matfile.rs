//! Minimal reader for MATLAB level-5 MAT-files (the format the UCI
//! character-trajectories archive ships in).
//!
//! Handles compressed and uncompressed elements, numeric, char, cell and
//! struct arrays. Sparse, object and function-handle classes are reported as
//! [`MatValue::Unsupported`]. HDF5-based v7.3 files are rejected.

use std::io::Read;

use flate2::read::ZlibDecoder;

use crate::error::{Error, Result};

const MI_INT8: u32 = 1;
const MI_UINT8: u32 = 2;
const MI_INT16: u32 = 3;
const MI_UINT16: u32 = 4;
const MI_INT32: u32 = 5;
const MI_UINT32: u32 = 6;
const MI_SINGLE: u32 = 7;
const MI_DOUBLE: u32 = 9;
const MI_INT64: u32 = 12;
const MI_UINT64: u32 = 13;
const MI_MATRIX: u32 = 14;
const MI_COMPRESSED: u32 = 15;
const MI_UTF8: u32 = 16;
const MI_UTF16: u32 = 17;
const MI_UTF32: u32 = 18;

const MX_CELL: u8 = 1;
const MX_STRUCT: u8 = 2;
const MX_CHAR: u8 = 4;
const MX_DOUBLE: u8 = 6;
const MX_UINT64: u8 = 15;

/// A real numeric array, column-major, widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatArray {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl MatArray {
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Element at `(row, col)` of a 2-D array.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row + self.dims[0] * col]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MatValue {
    Numeric(MatArray),
    Char(String),
    Cell {
        dims: Vec<usize>,
        items: Vec<MatValue>,
    },
    /// Field values are stored per struct element, in column-major element order.
    Struct {
        dims: Vec<usize>,
        fields: Vec<(String, Vec<MatValue>)>,
    },
    Empty,
    Unsupported(u8),
}

impl MatValue {
    pub fn as_numeric(&self) -> Option<&MatArray> {
        match self {
            MatValue::Numeric(a) => Some(a),
            _ => None,
        }
    }

    /// First element's value of `field` in a struct array.
    pub fn field(&self, name: &str) -> Option<&MatValue> {
        match self {
            MatValue::Struct { fields, .. } => fields.iter().find(|(n, _)| n == name).and_then(|(_, v)| v.first()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatFile {
    pub variables: Vec<(String, MatValue)>,
}

impl MatFile {
    pub fn get(&self, name: &str) -> Option<&MatValue> {
        self.variables.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 128 {
            return Err(bad("file shorter than the 128-byte header"));
        }
        if bytes.starts_with(b"\x89HDF") || bytes[512.min(bytes.len() - 4)..].starts_with(b"\x89HDF") {
            return Err(bad("HDF5-based (v7.3) MAT-files are not supported"));
        }
        let little = match &bytes[126..128] {
            b"IM" => true,
            b"MI" => false,
            _ => return Err(bad("missing endian indicator; not a level-5 MAT-file")),
        };
        let mut reader = Reader {
            buf: bytes,
            pos: 128,
            little,
        };
        let mut variables = Vec::new();
        while reader.remaining() >= 8 {
            if let Some(var) = reader.top_level_element()? {
                variables.push(var);
            }
        }
        Ok(MatFile { variables })
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Conversion(format!("invalid MAT-file: {}", msg.into()))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    little: bool,
}

struct Tag {
    kind: u32,
    size: usize,
    /// Data lives inside the 8-byte tag.
    small: bool,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len().saturating_sub(self.pos)
    }

    fn u32_at(&self, at: usize) -> Result<u32> {
        let b: [u8; 4] = self
            .buf
            .get(at..at + 4)
            .ok_or_else(|| bad("truncated element"))?
            .try_into()
            .expect("four bytes");
        Ok(if self.little {
            u32::from_le_bytes(b)
        } else {
            u32::from_be_bytes(b)
        })
    }

    fn tag(&mut self) -> Result<Tag> {
        let first = self.u32_at(self.pos)?;
        let tag = if first >> 16 != 0 {
            self.pos += 4;
            Tag {
                kind: first & 0xffff,
                size: (first >> 16) as usize,
                small: true,
            }
        } else {
            let size = self.u32_at(self.pos + 4)? as usize;
            self.pos += 8;
            Tag {
                kind: first,
                size,
                small: false,
            }
        };
        if self.pos + tag.size > self.buf.len() {
            return Err(bad(format!("element of {} bytes overruns the file", tag.size)));
        }
        Ok(tag)
    }

    /// Returns the element payload and advances past it and its padding.
    fn payload(&mut self, tag: &Tag) -> &'a [u8] {
        let data = &self.buf[self.pos..self.pos + tag.size];
        let padded = if tag.small { 4 } else { tag.size.div_ceil(8) * 8 };
        self.pos = (self.pos + padded).min(self.buf.len());
        data
    }

    fn top_level_element(&mut self) -> Result<Option<(String, MatValue)>> {
        let tag = self.tag()?;
        match tag.kind {
            MI_COMPRESSED => {
                let data = &self.buf[self.pos..self.pos + tag.size];
                self.pos += tag.size;
                let mut inflated = Vec::new();
                ZlibDecoder::new(data)
                    .read_to_end(&mut inflated)
                    .map_err(|e| bad(format!("corrupt compressed element: {e}")))?;
                let mut inner = Reader {
                    buf: &inflated,
                    pos: 0,
                    little: self.little,
                };
                let inner_tag = inner.tag()?;
                if inner_tag.kind != MI_MATRIX {
                    return Ok(None);
                }
                let payload = inner.payload(&inner_tag);
                let (name, value) = parse_matrix(payload, self.little)?;
                Ok(Some((name, value)))
            }
            MI_MATRIX => {
                let payload = self.payload(&tag);
                let (name, value) = parse_matrix(payload, self.little)?;
                Ok(Some((name, value)))
            }
            _ => {
                self.payload(&tag);
                Ok(None)
            }
        }
    }

    fn numeric(&mut self) -> Result<Vec<f64>> {
        let tag = self.tag()?;
        let kind = tag.kind;
        let bytes = self.payload(&tag);
        decode_numeric(kind, bytes, self.little)
    }
}

fn decode_numeric(kind: u32, bytes: &[u8], little: bool) -> Result<Vec<f64>> {
    macro_rules! decode {
        ($t:ty, $n:expr) => {
            bytes
                .chunks_exact($n)
                .map(|c| {
                    let arr: [u8; $n] = c.try_into().expect("chunk width");
                    (if little {
                        <$t>::from_le_bytes(arr)
                    } else {
                        <$t>::from_be_bytes(arr)
                    }) as f64
                })
                .collect()
        };
    }
    Ok(match kind {
        MI_INT8 => bytes.iter().map(|&b| b as i8 as f64).collect(),
        MI_UINT8 | MI_UTF8 => bytes.iter().map(|&b| b as f64).collect(),
        MI_INT16 => decode!(i16, 2),
        MI_UINT16 | MI_UTF16 => decode!(u16, 2),
        MI_INT32 => decode!(i32, 4),
        MI_UINT32 | MI_UTF32 => decode!(u32, 4),
        MI_SINGLE => decode!(f32, 4),
        MI_DOUBLE => decode!(f64, 8),
        MI_INT64 => decode!(i64, 8),
        MI_UINT64 => decode!(u64, 8),
        other => return Err(bad(format!("unexpected data type {other} in numeric subelement"))),
    })
}

/// Parses the payload of a miMATRIX element into its name and value.
fn parse_matrix(payload: &[u8], little: bool) -> Result<(String, MatValue)> {
    if payload.is_empty() {
        return Ok((String::new(), MatValue::Empty));
    }
    let mut r = Reader {
        buf: payload,
        pos: 0,
        little,
    };
    let flags = r.numeric()?;
    let flag_word = *flags.first().ok_or_else(|| bad("missing array flags"))? as u32;
    let class = (flag_word & 0xff) as u8;
    let complex = flag_word & 0x0800 != 0;
    let dims: Vec<usize> = r.numeric()?.into_iter().map(|d| d as usize).collect();
    let name_tag = r.tag()?;
    let name = String::from_utf8_lossy(r.payload(&name_tag)).into_owned();
    let numel: usize = dims.iter().product();

    let value = match class {
        MX_DOUBLE..=MX_UINT64 => {
            let data = r.numeric()?;
            if complex {
                r.numeric()?;
            }
            if data.len() != numel {
                return Err(bad(format!(
                    "array {name:?} has {} values for dims {dims:?}",
                    data.len()
                )));
            }
            MatValue::Numeric(MatArray { dims, data })
        }
        MX_CHAR => {
            let codes = r.numeric()?;
            MatValue::Char(codes.into_iter().filter_map(|c| char::from_u32(c as u32)).collect())
        }
        MX_CELL => {
            let mut items = Vec::with_capacity(numel);
            for _ in 0..numel {
                let tag = r.tag()?;
                if tag.kind != MI_MATRIX {
                    return Err(bad("cell element is not a matrix"));
                }
                let (_, v) = parse_matrix(r.payload(&tag), little)?;
                items.push(v);
            }
            MatValue::Cell { dims, items }
        }
        MX_STRUCT => {
            let len_field = r.numeric()?;
            let name_len = *len_field.first().ok_or_else(|| bad("missing field name length"))? as usize;
            let names_tag = r.tag()?;
            let names_bytes = r.payload(&names_tag);
            let names: Vec<String> = if name_len == 0 {
                Vec::new()
            } else {
                names_bytes
                    .chunks(name_len)
                    .map(|c| {
                        let end = c.iter().position(|&b| b == 0).unwrap_or(c.len());
                        String::from_utf8_lossy(&c[..end]).into_owned()
                    })
                    .filter(|n| !n.is_empty())
                    .collect()
            };
            let mut fields: Vec<(String, Vec<MatValue>)> = names.into_iter().map(|n| (n, Vec::new())).collect();
            for _ in 0..numel {
                for field in fields.iter_mut() {
                    let tag = r.tag()?;
                    if tag.kind != MI_MATRIX {
                        return Err(bad("struct field is not a matrix"));
                    }
                    let (_, v) = parse_matrix(r.payload(&tag), little)?;
                    field.1.push(v);
                }
            }
            MatValue::Struct { dims, fields }
        }
        other => MatValue::Unsupported(other),
    };
    Ok((name, value))
}
