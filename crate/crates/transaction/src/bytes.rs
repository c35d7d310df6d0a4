//! Little-endian cursor over a byte slice that reports offsets on failure.

use crate::error::AppError;

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, pos: 0, what }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn error(&self, msg: impl std::fmt::Display) -> AppError {
        AppError::Data(format!("{} at byte {}: {msg}", self.what, self.pos))
    }

    pub fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8], AppError> {
        if self.remaining() < n {
            return Err(self.error(format!(
                "truncated {field}: expected {n} bytes, only {} remain",
                self.remaining()
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u16(&mut self, field: &str) -> Result<u16, AppError> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, field: &str) -> Result<u32, AppError> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, field: &str) -> Result<u64, AppError> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize, field: &str) -> Result<Vec<f32>, AppError> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| self.error(format!("{field}: element count {n} overflows")))?;
        let raw = self.take(bytes, field)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn string_u16(&mut self, field: &str) -> Result<String, AppError> {
        let len = self.u16(field)? as usize;
        let start = self.pos;
        let raw = self.take(len, field)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| AppError::Data(format!("{} at byte {start}: {field} is not valid UTF-8", self.what)))
    }

    pub fn finish(&self) -> Result<(), AppError> {
        if self.remaining() != 0 {
            return Err(self.error(format!("{} unexpected trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

pub fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn put_f32s(out: &mut Vec<u8>, vs: &[f32]) {
    out.reserve(vs.len() * 4);
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn put_string_u16(out: &mut Vec<u8>, s: &str, field: &str) -> Result<(), AppError> {
    let len = u16::try_from(s.len())
        .map_err(|_| AppError::Data(format!("{field} `{s}` is longer than {} bytes", u16::MAX)))?;
    put_u16(out, len);
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn u32_field(v: usize, field: &str) -> Result<u32, AppError> {
    u32::try_from(v).map_err(|_| AppError::Data(format!("{field} = {v} does not fit in 32 bits")))
}
