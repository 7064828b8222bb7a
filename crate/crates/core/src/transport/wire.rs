//! Payload codec. Naturals are a 4-byte big-endian length followed by the
//! big-endian magnitude; zero has an empty magnitude.

use crate::numtheory::Natural;

use super::TransportError;

#[derive(Debug, Default)]
pub struct PayloadWriter {
    buf: Vec<u8>,
}

impl PayloadWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(mut self, v: u8) -> Self {
        self.buf.push(v);
        self
    }

    pub fn u16(mut self, v: u16) -> Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u32(mut self, v: u32) -> Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(mut self, v: u64) -> Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn natural(mut self, v: &Natural) -> Self {
        let bytes = if v.bits() == 0 { Vec::new() } else { v.to_bytes_be() };
        self.buf.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
        self.buf.extend_from_slice(&bytes);
        self
    }

    pub fn naturals(mut self, vs: &[Natural]) -> Self {
        self = self.u32(vs.len() as u32);
        for v in vs {
            self = self.natural(v);
        }
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct PayloadReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> PayloadReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        PayloadReader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], TransportError> {
        if self.buf.len() - self.pos < n {
            return Err(TransportError::Malformed(format!(
                "payload truncated: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, TransportError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, TransportError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, TransportError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, TransportError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn natural(&mut self) -> Result<Natural, TransportError> {
        let len = self.u32()? as usize;
        Ok(Natural::from_bytes_be(self.take(len)?))
    }

    pub fn naturals(&mut self) -> Result<Vec<Natural>, TransportError> {
        let count = self.u32()? as usize;
        if count > self.buf.len() {
            return Err(TransportError::Malformed(format!("implausible vector length {count}")));
        }
        (0..count).map(|_| self.natural()).collect()
    }

    /// Fails if unread bytes remain.
    pub fn finish(self) -> Result<(), TransportError> {
        if self.pos != self.buf.len() {
            return Err(TransportError::Malformed(format!(
                "{} trailing payload bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn natural_encoding_is_length_prefixed_big_endian() {
        let bytes = PayloadWriter::new().natural(&Natural::from(0x0102u32)).finish();
        assert_eq!(bytes, vec![0, 0, 0, 2, 1, 2]);
        let zero = PayloadWriter::new().natural(&Natural::from(0u8)).finish();
        assert_eq!(zero, vec![0, 0, 0, 0]);
    }

    #[test]
    fn truncation_and_trailing_bytes_are_errors() {
        let mut r = PayloadReader::new(&[0, 0, 0, 5, 1]);
        assert!(r.natural().is_err());
        let mut r = PayloadReader::new(&[7, 8]);
        assert_eq!(r.u8().unwrap(), 7);
        assert!(r.finish().is_err());
    }

    proptest! {
        #[test]
        fn mixed_payload_roundtrip(a in any::<u32>(), digits in proptest::collection::vec(any::<u32>(), 0..8), b in any::<u64>()) {
            let n = Natural::new(digits);
            let bytes = PayloadWriter::new().u32(a).natural(&n).u64(b).finish();
            let mut r = PayloadReader::new(&bytes);
            prop_assert_eq!(r.u32().unwrap(), a);
            prop_assert_eq!(r.natural().unwrap(), n);
            prop_assert_eq!(r.u64().unwrap(), b);
            prop_assert!(r.finish().is_ok());
        }
    }
}
