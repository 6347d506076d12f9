//! Little-endian byte encoding shared by the dataset, checkpoint and ensemble
//! formats. Readers report the byte offset of every failure.

use crate::error::{Error, Result};
use crate::excitation::IntervalBox;

#[derive(Default)]
pub(crate) struct Writer(pub Vec<u8>);

impl Writer {
    pub fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    pub fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn f64s(&mut self, v: &[f64]) {
        self.0.reserve(v.len() * 8);
        for x in v {
            self.f64(*x);
        }
    }
    pub fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    pub fn opt_box(&mut self, b: Option<&IntervalBox>) {
        match b {
            None => self.u32(0),
            Some(b) => {
                self.u32(b.dim() as u32);
                self.f64s(&b.lo);
                self.f64s(&b.hi);
            }
        }
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pub pos: u64,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let start = self.pos as usize;
        let end = start
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(
                    self.pos,
                    format!("truncated: need {n} bytes, {} left", self.bytes.len() - start),
                )
            })?;
        self.pos = end as u64;
        Ok(&self.bytes[start..end])
    }

    pub fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != want {
            return Err(Error::format(0, format!("bad magic {got:?}")));
        }
        Ok(())
    }

    pub fn version(&mut self, want: u32) -> Result<()> {
        let at = self.pos;
        let v = self.u32()?;
        if v != want {
            return Err(Error::format(at, format!("unsupported version {v}")));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::format(self.pos, "length overflow"))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(at, "name is not UTF-8"))
    }
    pub fn opt_box(&mut self) -> Result<Option<IntervalBox>> {
        let at = self.pos;
        let n = self.u32()? as usize;
        if n == 0 {
            return Ok(None);
        }
        let lo = self.f64s(n)?;
        let hi = self.f64s(n)?;
        IntervalBox::new(lo, hi)
            .map(Some)
            .map_err(|e| Error::format(at, format!("invalid box: {e}")))
    }
}
