//! Self-describing entry-method argument encoding: each value is a type byte
//! followed by its little-endian representation.

use thiserror::Error;

const T_I64: u8 = 1;
const T_U64: u8 = 2;
const T_F64: u8 = 3;
const T_BYTES: u8 = 4;
const T_STR: u8 = 5;
const T_BOOL: u8 = 6;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ArgError {
    #[error("argument {index}: expected {expected}, found {found}")]
    TypeMismatch {
        index: usize,
        expected: &'static str,
        found: &'static str,
    },
    #[error("argument {index}: missing")]
    Missing { index: usize },
    #[error("argument {index}: truncated encoding")]
    Truncated { index: usize },
    #[error("argument {index}: unknown type byte {byte}")]
    UnknownType { index: usize, byte: u8 },
    #[error("argument {index}: string is not valid UTF-8")]
    Utf8 { index: usize },
}

fn type_name(byte: u8) -> &'static str {
    match byte {
        T_I64 => "i64",
        T_U64 => "u64",
        T_F64 => "f64",
        T_BYTES => "bytes",
        T_STR => "str",
        T_BOOL => "bool",
        _ => "unknown",
    }
}

/// Builder for an encoded argument list.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Args {
    buf: Vec<u8>,
}

impl Args {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn i64(mut self, v: i64) -> Self {
        self.buf.push(T_I64);
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(mut self, v: u64) -> Self {
        self.buf.push(T_U64);
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(mut self, v: f64) -> Self {
        self.buf.push(T_F64);
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn bool(mut self, v: bool) -> Self {
        self.buf.push(T_BOOL);
        self.buf.push(v as u8);
        self
    }

    pub fn bytes(mut self, v: &[u8]) -> Self {
        self.buf.push(T_BYTES);
        self.buf.extend_from_slice(&(v.len() as u64).to_le_bytes());
        self.buf.extend_from_slice(v);
        self
    }

    pub fn str(mut self, v: &str) -> Self {
        self.buf.push(T_STR);
        self.buf.extend_from_slice(&(v.len() as u64).to_le_bytes());
        self.buf.extend_from_slice(v.as_bytes());
        self
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

impl From<Args> for Vec<u8> {
    fn from(a: Args) -> Vec<u8> {
        a.buf
    }
}

/// Sequential decoder over an encoded argument list.
#[derive(Debug, Clone)]
pub struct ArgReader<'a> {
    buf: &'a [u8],
    pos: usize,
    index: usize,
}

impl<'a> ArgReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ArgReader { buf, pos: 0, index: 0 }
    }

    pub fn is_done(&self) -> bool {
        self.pos >= self.buf.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ArgError> {
        if self.buf.len() - self.pos < n {
            return Err(ArgError::Truncated { index: self.index });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn expect(&mut self, ty: u8) -> Result<(), ArgError> {
        let Some(&byte) = self.buf.get(self.pos) else {
            return Err(ArgError::Missing { index: self.index });
        };
        if type_name(byte) == "unknown" {
            return Err(ArgError::UnknownType {
                index: self.index,
                byte,
            });
        }
        if byte != ty {
            return Err(ArgError::TypeMismatch {
                index: self.index,
                expected: type_name(ty),
                found: type_name(byte),
            });
        }
        self.pos += 1;
        Ok(())
    }

    fn word(&mut self, ty: u8) -> Result<[u8; 8], ArgError> {
        self.expect(ty)?;
        let w = self.take(8)?.try_into().unwrap();
        self.index += 1;
        Ok(w)
    }

    pub fn i64(&mut self) -> Result<i64, ArgError> {
        self.word(T_I64).map(i64::from_le_bytes)
    }

    pub fn u64(&mut self) -> Result<u64, ArgError> {
        self.word(T_U64).map(u64::from_le_bytes)
    }

    pub fn f64(&mut self) -> Result<f64, ArgError> {
        self.word(T_F64).map(f64::from_le_bytes)
    }

    pub fn bool(&mut self) -> Result<bool, ArgError> {
        self.expect(T_BOOL)?;
        let b = self.take(1)?[0] != 0;
        self.index += 1;
        Ok(b)
    }

    fn blob(&mut self, ty: u8) -> Result<&'a [u8], ArgError> {
        self.expect(ty)?;
        let len = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        let len = usize::try_from(len).map_err(|_| ArgError::Truncated { index: self.index })?;
        let s = self.take(len)?;
        self.index += 1;
        Ok(s)
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], ArgError> {
        self.blob(T_BYTES)
    }

    pub fn str(&mut self) -> Result<&'a str, ArgError> {
        let index = self.index;
        let b = self.blob(T_STR)?;
        std::str::from_utf8(b).map_err(|_| ArgError::Utf8 { index })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn int_and_double_round_trip() {
        let a = Args::new().i64(7).f64(2.5).into_bytes();
        let mut r = ArgReader::new(&a);
        assert_eq!(r.i64().unwrap(), 7);
        assert_eq!(r.f64().unwrap(), 2.5);
        assert!(r.is_done());
        assert_eq!(r.i64(), Err(ArgError::Missing { index: 2 }));
    }

    #[test]
    fn encoding_is_type_byte_then_le() {
        let a = Args::new().i64(-2).into_bytes();
        assert_eq!(a, [1, 0xFE, 0xFF, 0xFF, 0xFF, 0xFF, 0xFF, 0xFF, 0xFF]);
    }

    #[test]
    fn mismatch_names_types() {
        let a = Args::new().f64(1.0).into_bytes();
        let err = ArgReader::new(&a).i64().unwrap_err();
        assert_eq!(
            err,
            ArgError::TypeMismatch {
                index: 0,
                expected: "i64",
                found: "f64"
            }
        );
    }

    #[test]
    fn blobs_and_truncation() {
        let a = Args::new().bytes(&[1, 2, 3]).str("hi").bool(true).into_bytes();
        let mut r = ArgReader::new(&a);
        assert_eq!(r.bytes().unwrap(), &[1, 2, 3]);
        assert_eq!(r.str().unwrap(), "hi");
        assert!(r.bool().unwrap());
        let cut = &a[..5];
        assert_eq!(ArgReader::new(cut).bytes(), Err(ArgError::Truncated { index: 0 }));
    }
}
