//! Reading and writing the subset of the npy format used by the toolkit.
//!
//! Only little-endian `f4`/`f8` arrays of rank 1 or 2 stored in C order are
//! supported. Everything is promoted to `f64` on read; writes are always
//! `<f8` so that a save/load round trip is bit-exact.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub(crate) const MAGIC: [u8; 6] = *b"\x93NUMPY";

const ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Dtype {
    F4,
    F8,
}

impl Dtype {
    fn parse(descr: &str) -> Result<Self> {
        match descr {
            "<f4" => Ok(Dtype::F4),
            "<f8" => Ok(Dtype::F8),
            other => Err(Error::UnsupportedDtype(other.to_string())),
        }
    }

    fn item_size(self) -> usize {
        match self {
            Dtype::F4 => 4,
            Dtype::F8 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Header {
    pub dtype: Dtype,
    pub fortran_order: bool,
    pub shape: Vec<usize>,
}

/// A decoded array: shape plus row-major values promoted to f64.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct RawArray {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub(crate) fn read<R: Read>(reader: &mut R) -> Result<RawArray> {
    let header = read_header(reader)?;
    if header.fortran_order {
        return Err(Error::FortranOrder);
    }
    if header.shape.is_empty() || header.shape.len() > 2 {
        return Err(Error::NpyFormat(format!(
            "expected a 1-d or 2-d array, found shape {:?}",
            header.shape
        )));
    }
    let count = header
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::NpyFormat("shape overflows usize".into()))?;
    let n_bytes = count
        .checked_mul(header.dtype.item_size())
        .ok_or_else(|| Error::NpyFormat("data size overflows usize".into()))?;

    let mut payload = Vec::with_capacity(n_bytes);
    reader
        .read_to_end(&mut payload)
        .map_err(|e| Error::NpyFormat(format!("reading payload: {e}")))?;
    if payload.len() != n_bytes {
        return Err(Error::NpyFormat(format!(
            "payload has {} bytes, shape {:?} requires {}",
            payload.len(),
            header.shape,
            n_bytes
        )));
    }

    let values = match header.dtype {
        Dtype::F4 => payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect(),
        Dtype::F8 => payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
            .collect(),
    };
    Ok(RawArray {
        shape: header.shape,
        values,
    })
}

pub(crate) fn write<W: Write>(
    writer: &mut W,
    shape: &[usize],
    values: &[f64],
) -> std::io::Result<()> {
    let shape_str = match shape {
        [n] => format!("({n},)"),
        dims => format!(
            "({})",
            dims.iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut dict = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': {shape_str}, }}");
    // magic + version + u16 length, then the dict padded with spaces and a newline
    let unpadded = MAGIC.len() + 2 + 2 + dict.len() + 1;
    let pad = (ALIGN - unpadded % ALIGN) % ALIGN;
    dict.push_str(&" ".repeat(pad));
    dict.push('\n');

    writer.write_all(&MAGIC)?;
    writer.write_all(&[1, 0])?;
    writer.write_all(&(dict.len() as u16).to_le_bytes())?;
    writer.write_all(dict.as_bytes())?;
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    writer.write_all(&buf)
}

fn read_header<R: Read>(reader: &mut R) -> Result<Header> {
    let mut magic = [0u8; 6];
    reader
        .read_exact(&mut magic)
        .map_err(|_| Error::NpyFormat("file too short for magic string".into()))?;
    if magic != MAGIC {
        return Err(Error::NpyFormat("missing \\x93NUMPY magic string".into()));
    }
    let mut version = [0u8; 2];
    reader
        .read_exact(&mut version)
        .map_err(|_| Error::NpyFormat("truncated version".into()))?;
    let header_len = match version {
        [1, 0] => {
            let mut len = [0u8; 2];
            reader
                .read_exact(&mut len)
                .map_err(|_| Error::NpyFormat("truncated header length".into()))?;
            u16::from_le_bytes(len) as usize
        }
        [major, minor] => {
            return Err(Error::NpyFormat(format!(
                "unsupported npy version {major}.{minor}"
            )))
        }
    };
    let mut raw = vec![0u8; header_len];
    reader
        .read_exact(&mut raw)
        .map_err(|_| Error::NpyFormat("truncated header".into()))?;
    let text = std::str::from_utf8(&raw)
        .map_err(|_| Error::NpyFormat("header is not valid text".into()))?;
    parse_header_dict(text)
}

/// Parses the python-literal dict stored in an npy header.
fn parse_header_dict(text: &str) -> Result<Header> {
    let body = text
        .trim()
        .strip_prefix('{')
        .and_then(|s| s.strip_suffix('}'))
        .ok_or_else(|| Error::NpyFormat(format!("header is not a dict: {text:?}")))?;

    let mut descr = None;
    let mut fortran_order = None;
    let mut shape = None;

    let mut rest = body.trim_start();
    while !rest.is_empty() {
        let (key, after_key) = take_quoted(rest)?;
        let after_colon = after_key
            .trim_start()
            .strip_prefix(':')
            .ok_or_else(|| Error::NpyFormat(format!("expected ':' after key '{key}'")))?
            .trim_start();
        let after_value = match key {
            "descr" => {
                let (value, tail) = take_quoted(after_colon)?;
                descr = Some(value.to_string());
                tail
            }
            "fortran_order" => {
                if let Some(tail) = after_colon.strip_prefix("False") {
                    fortran_order = Some(false);
                    tail
                } else if let Some(tail) = after_colon.strip_prefix("True") {
                    fortran_order = Some(true);
                    tail
                } else {
                    return Err(Error::NpyFormat(
                        "fortran_order must be True or False".into(),
                    ));
                }
            }
            "shape" => {
                let (dims, tail) = take_tuple(after_colon)?;
                shape = Some(dims);
                tail
            }
            other => return Err(Error::NpyFormat(format!("unexpected header key '{other}'"))),
        };
        let tail = after_value.trim_start();
        rest = tail.strip_prefix(',').unwrap_or(tail).trim_start();
        if !tail.starts_with(',') && !rest.is_empty() {
            return Err(Error::NpyFormat(
                "expected ',' between header entries".into(),
            ));
        }
    }

    let descr = descr.ok_or_else(|| Error::NpyFormat("header lacks 'descr'".into()))?;
    Ok(Header {
        dtype: Dtype::parse(&descr)?,
        fortran_order: fortran_order
            .ok_or_else(|| Error::NpyFormat("header lacks 'fortran_order'".into()))?,
        shape: shape.ok_or_else(|| Error::NpyFormat("header lacks 'shape'".into()))?,
    })
}

fn take_quoted(s: &str) -> Result<(&str, &str)> {
    let quote = s
        .chars()
        .next()
        .filter(|c| *c == '\'' || *c == '"')
        .ok_or_else(|| Error::NpyFormat(format!("expected quoted string at {s:?}")))?;
    let inner = &s[1..];
    let end = inner
        .find(quote)
        .ok_or_else(|| Error::NpyFormat("unterminated string in header".into()))?;
    Ok((&inner[..end], &inner[end + 1..]))
}

fn take_tuple(s: &str) -> Result<(Vec<usize>, &str)> {
    let inner = s
        .strip_prefix('(')
        .ok_or_else(|| Error::NpyFormat("shape must be a tuple".into()))?;
    let end = inner
        .find(')')
        .ok_or_else(|| Error::NpyFormat("unterminated shape tuple".into()))?;
    let dims = inner[..end]
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| Error::NpyFormat(format!("bad shape dimension {t:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((dims, &inner[end + 1..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header_bytes(dict: &str) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&[1, 0]);
        out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
        out.extend_from_slice(dict.as_bytes());
        out
    }

    #[test]
    fn parses_numpy_style_header() {
        let h =
            parse_header_dict("{'descr': '<f4', 'fortran_order': False, 'shape': (3, 7), }   \n")
                .unwrap();
        assert_eq!(h.dtype, Dtype::F4);
        assert!(!h.fortran_order);
        assert_eq!(h.shape, vec![3, 7]);

        let h =
            parse_header_dict("{'descr': '<f8', 'fortran_order': False, 'shape': (5,), }").unwrap();
        assert_eq!(h.shape, vec![5]);
    }

    #[test]
    fn header_is_aligned() {
        let mut buf = Vec::new();
        write(&mut buf, &[3, 5], &[0.0; 15]).unwrap();
        let header_len = u16::from_le_bytes([buf[8], buf[9]]) as usize;
        assert_eq!((10 + header_len) % ALIGN, 0);
        assert_eq!(buf[10 + header_len - 1], b'\n');
        assert_eq!(buf.len(), 10 + header_len + 15 * 8);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut bytes = header_bytes("{'descr': '<i8', 'fortran_order': False, 'shape': (1,), }");
        bytes.extend_from_slice(&[0; 8]);
        assert!(matches!(
            read(&mut bytes.as_slice()),
            Err(Error::UnsupportedDtype(_))
        ));

        let mut bytes = header_bytes("{'descr': '<f8', 'fortran_order': True, 'shape': (1,), }");
        bytes.extend_from_slice(&[0; 8]);
        assert!(matches!(
            read(&mut bytes.as_slice()),
            Err(Error::FortranOrder)
        ));

        let mut bytes = header_bytes("{'descr': '<f8', 'fortran_order': False, 'shape': (2,), }");
        bytes.extend_from_slice(&[0; 8]);
        assert!(matches!(
            read(&mut bytes.as_slice()),
            Err(Error::NpyFormat(_))
        ));

        let mut bytes =
            header_bytes("{'descr': '<f8', 'fortran_order': False, 'shape': (1, 1, 1), }");
        bytes.extend_from_slice(&[0; 8]);
        assert!(matches!(
            read(&mut bytes.as_slice()),
            Err(Error::NpyFormat(_))
        ));

        let bytes = b"NOTNPY....".to_vec();
        assert!(matches!(
            read(&mut bytes.as_slice()),
            Err(Error::NpyFormat(_))
        ));

        let mut bytes = header_bytes("{'descr': '>f8', 'fortran_order': False, 'shape': (1,), }");
        bytes.extend_from_slice(&[0; 8]);
        assert!(matches!(
            read(&mut bytes.as_slice()),
            Err(Error::UnsupportedDtype(_))
        ));
    }

    #[test]
    fn reads_f4_payload() {
        let mut bytes = header_bytes("{'descr': '<f4', 'fortran_order': False, 'shape': (2, 2), }");
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let arr = read(&mut bytes.as_slice()).unwrap();
        assert_eq!(arr.shape, vec![2, 2]);
        assert_eq!(arr.values, vec![1.0, 2.0, 3.0, 4.0]);
    }
}
