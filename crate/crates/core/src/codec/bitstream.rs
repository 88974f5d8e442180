use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"CDRW1";
pub const VERSION: u8 = 1;
/// Bytes before the payload.
pub const HEADER_LEN: usize = 5 + 1 + 8 + 2 + 2 + 1 + 1 + 1 + 4 + 4;

/// One compressed image: header plus range-coded latent symbols.
#[derive(Clone, Debug, PartialEq)]
pub struct Bitstream {
    pub version: u8,
    pub model_hash: [u8; 8],
    pub height: u16,
    pub width: u16,
    pub channels: u8,
    pub t_total: u8,
    pub t_stored: u8,
    pub lambda: f32,
    pub payload: Vec<u8>,
}

pub fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.push(self.version);
        out.extend_from_slice(&self.model_hash);
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.push(self.channels);
        out.push(self.t_total);
        out.push(self.t_stored);
        out.extend_from_slice(&self.lambda.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < HEADER_LEN {
            return Err(Error::CorruptStream(format!(
                "{} bytes is shorter than the {HEADER_LEN}-byte header",
                buf.len()
            )));
        }
        if &buf[..5] != MAGIC {
            return Err(Error::CorruptStream("bad magic".into()));
        }
        let version = buf[5];
        if version != VERSION {
            return Err(Error::CorruptStream(format!(
                "unsupported version {version}"
            )));
        }
        let u16_at = |i: usize| u16::from_le_bytes([buf[i], buf[i + 1]]);
        let mut model_hash = [0u8; 8];
        model_hash.copy_from_slice(&buf[6..14]);
        let lambda = f32::from_le_bytes(buf[21..25].try_into().expect("4 bytes"));
        let len = u32::from_le_bytes(buf[25..29].try_into().expect("4 bytes")) as usize;
        let payload = &buf[HEADER_LEN..];
        if payload.len() != len {
            return Err(Error::CorruptStream(format!(
                "header declares {len} payload bytes, found {}",
                payload.len()
            )));
        }
        let bs = Bitstream {
            version,
            model_hash,
            height: u16_at(14),
            width: u16_at(16),
            channels: buf[18],
            t_total: buf[19],
            t_stored: buf[20],
            lambda,
            payload: payload.to_vec(),
        };
        if bs.t_stored > bs.t_total {
            return Err(Error::CorruptStream(format!(
                "{} stored steps exceed {} total",
                bs.t_stored, bs.t_total
            )));
        }
        if !(0.0..=1.0).contains(&bs.lambda) {
            return Err(Error::CorruptStream(format!(
                "temperature {} outside [0, 1]",
                bs.lambda
            )));
        }
        Ok(bs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Bitstream {
        Bitstream {
            version: VERSION,
            model_hash: [1, 2, 3, 4, 5, 6, 7, 8],
            height: 28,
            width: 28,
            channels: 1,
            t_total: 8,
            t_stored: 3,
            lambda: 0.5,
            payload: vec![9, 8, 7],
        }
    }

    #[test]
    fn layout_is_little_endian() {
        let b = sample().to_bytes();
        assert_eq!(&b[..6], b"CDRW1\x01");
        assert_eq!(&b[14..16], &[28, 0]);
        assert_eq!(&b[19..21], &[8, 3]);
        assert_eq!(&b[21..25], &0.5f32.to_le_bytes());
        assert_eq!(&b[25..29], &[3, 0, 0, 0]);
        assert_eq!(b.len(), HEADER_LEN + 3);
        assert_eq!(Bitstream::from_bytes(&b).unwrap(), sample());
    }

    #[test]
    fn damaged_headers_are_rejected() {
        let b = sample().to_bytes();
        assert!(Bitstream::from_bytes(&b[..b.len() - 1]).is_err());
        assert!(Bitstream::from_bytes(&b[..10]).is_err());
        let mut m = b.clone();
        m[0] = b'X';
        assert!(Bitstream::from_bytes(&m).is_err());
        let mut t = b.clone();
        t[20] = 9;
        assert!(Bitstream::from_bytes(&t).is_err());
    }
}
