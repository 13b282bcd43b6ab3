//! Length-prefixed binary framing shared by signing targets and storage formats.
//!
//! Every field is written as a 4-byte big-endian length followed by the raw
//! bytes, so concatenations are unambiguous.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at offset {offset}: {kind}")]
pub struct ParseError {
    pub offset: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("unexpected end of input")]
    Truncated,
    #[error("unsupported format version {0:#04x}")]
    UnsupportedVersion(u8),
    #[error("bad magic")]
    BadMagic,
    #[error("trailing bytes after record")]
    TrailingBytes,
    #[error("invalid field: {0}")]
    InvalidField(String),
}

#[derive(Debug, Default, Clone)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn raw(&mut self, bytes: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(bytes);
        self
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn bytes(&mut self, field: &[u8]) -> &mut Self {
        let len = u32::try_from(field.len()).expect("field shorter than 4 GiB");
        self.u32(len);
        self.buf.extend_from_slice(field);
        self
    }

    pub fn str(&mut self, field: &str) -> &mut Self {
        self.bytes(field.as_bytes())
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    input: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        Reader { input, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn error(&self, kind: ParseErrorKind) -> ParseError {
        ParseError { offset: self.pos, kind }
    }

    pub fn invalid(&self, what: impl Into<String>) -> ParseError {
        self.error(ParseErrorKind::InvalidField(what.into()))
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], ParseError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.input.len());
        match end {
            Some(end) => {
                let out = &self.input[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(self.error(ParseErrorKind::Truncated)),
        }
    }

    pub fn u8(&mut self) -> Result<u8, ParseError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, ParseError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes(b.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, ParseError> {
        let b = self.take(8)?;
        Ok(u64::from_be_bytes(b.try_into().unwrap()))
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], ParseError> {
        let start = self.pos;
        let len = self.u32()? as usize;
        self.take(len).map_err(|mut e| {
            e.offset = start;
            e
        })
    }

    pub fn string(&mut self) -> Result<String, ParseError> {
        let start = self.pos;
        let raw = self.bytes()?;
        String::from_utf8(raw.to_vec()).map_err(|_| ParseError {
            offset: start,
            kind: ParseErrorKind::InvalidField("non-UTF-8 string".into()),
        })
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.input.len()
    }

    pub fn finish(self) -> Result<(), ParseError> {
        if self.is_empty() {
            Ok(())
        } else {
            Err(self.error(ParseErrorKind::TrailingBytes))
        }
    }
}
