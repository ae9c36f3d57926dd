//! Little-endian byte helpers shared by the binary file formats.

use crate::error::Error;

pub(crate) type MakeErr = fn(u64, String) -> Error;

pub(crate) fn corrupt_index(offset: u64, reason: String) -> Error {
    Error::CorruptIndex { offset, reason }
}

pub(crate) fn corrupt_file(offset: u64, reason: String) -> Error {
    Error::CorruptFile { offset, reason }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    make_err: MakeErr,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], make_err: MakeErr) -> Self {
        Self { buf, pos: 0, make_err }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn err(&self, offset: usize, reason: impl Into<String>) -> Error {
        (self.make_err)(offset as u64, reason.into())
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], Error> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(self.pos, format!("truncated while reading {what}"))),
        }
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<(), Error> {
        let at = self.pos;
        if self.take(4, "magic")? != expected {
            return Err(self.err(at, "bad magic"));
        }
        Ok(())
    }

    pub fn u8(&mut self, what: &str) -> Result<u8, Error> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32(&mut self, what: &str) -> Result<u32, Error> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64, Error> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64, Error> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    /// `n` finite f32 values.
    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>, Error> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| self.err(self.pos, format!("{what} length overflows")))?;
        let start = self.pos;
        let raw = self.take(bytes, what)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(self.err(start + 4 * i, format!("non-finite value in {what}")));
        }
        Ok(values)
    }

    pub fn u64s(&mut self, n: usize, what: &str) -> Result<Vec<u64>, Error> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| self.err(self.pos, format!("{what} length overflows")))?;
        Ok(self
            .take(bytes, what)?
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn finish(&self) -> Result<(), Error> {
        if self.pos != self.buf.len() {
            return Err(self.err(self.pos, "trailing bytes"));
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, vs: &[f32]) {
    out.reserve(vs.len() * 4);
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn read_back_and_truncation_offset() {
        let mut buf = b"ABCD".to_vec();
        put_u32(&mut buf, 7);
        put_u64(&mut buf, 9);
        put_f32s(&mut buf, &[1.5, -2.0]);
        let mut r = Reader::new(&buf, corrupt_file);
        r.magic(b"ABCD").unwrap();
        assert_eq!(r.u32("a").unwrap(), 7);
        assert_eq!(r.u64("b").unwrap(), 9);
        assert_eq!(r.f32s(2, "c").unwrap(), vec![1.5, -2.0]);
        r.finish().unwrap();
        let mut short = Reader::new(&buf[..10], corrupt_file);
        short.magic(b"ABCD").unwrap();
        short.u32("a").unwrap();
        assert!(matches!(short.u64("b"), Err(Error::CorruptFile { offset: 8, .. })));
    }
}
