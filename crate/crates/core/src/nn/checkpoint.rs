//! Parameter checkpoint file.
//!
//! ```text
//! "CDRWPARM"                      8 bytes
//! version                         u16
//! flags                           u8   (bit 0: optimizer state present)
//! config length, config text      u32, UTF-8 `key = value` lines
//! optimizer step                  u64  (only when bit 0 is set)
//! repeated until end of file:
//!   name length, name             u16, UTF-8
//!   rank, dims                    u8, u32 * rank
//!   values                        f32 * product(dims)
//! ```
//!
//! All integers and floats are little-endian. Adam moments are stored as
//! ordinary entries named `adam.m/<param>` and `adam.v/<param>`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::params::storage_shape;
use crate::nn::{ParamStore, Real, Tensor4};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CDRWPARM";
pub const CHECKPOINT_VERSION: u16 = 1;
const FLAG_OPTIMIZER: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub config_text: String,
    pub optimizer_step: Option<u64>,
    pub entries: Vec<CheckpointEntry>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "checkpoint truncated reading {what}: need {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(if self.optimizer_step.is_some() {
            FLAG_OPTIMIZER
        } else {
            0
        });
        out.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        if let Some(step) = self.optimizer_step {
            out.extend_from_slice(&step.to_le_bytes());
        }
        for e in &self.entries {
            let count: usize = e.dims.iter().product();
            if count != e.data.len()
                || e.name.len() > u16::MAX as usize
                || e.dims.len() > u8::MAX as usize
            {
                return Err(Error::Format(format!(
                    "entry `{}` is inconsistent with its dims {:?}",
                    e.name, e.dims
                )));
            }
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dims.len() as u8);
            for &d in &e.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let flags = r.u8("flags")?;
        let clen = r.u32("config length")? as usize;
        let config_text = std::str::from_utf8(r.take(clen, "config text")?)
            .map_err(|e| Error::Format(format!("config text is not UTF-8: {e}")))?
            .to_string();
        let optimizer_step = if flags & FLAG_OPTIMIZER != 0 {
            Some(r.u64("optimizer step")?)
        } else {
            None
        };
        let mut entries = Vec::new();
        while !r.done() {
            let nlen = r.u16("entry name length")? as usize;
            let name = std::str::from_utf8(r.take(nlen, "entry name")?)
                .map_err(|e| Error::Format(format!("entry name is not UTF-8: {e}")))?
                .to_string();
            let rank = r.u8("rank")? as usize;
            let dims = (0..rank)
                .map(|_| r.u32("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count: usize = dims.iter().product();
            let raw = r.take(count * 4, "entry values")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push(CheckpointEntry { name, dims, data });
        }
        Ok(Checkpoint {
            config_text,
            optimizer_step,
            entries,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn entry(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

fn entry_of<R: Real>(name: String, dims: &[usize], t: &Tensor4<R>) -> CheckpointEntry {
    CheckpointEntry {
        name,
        dims: dims.to_vec(),
        data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
    }
}

fn tensor_of<R: Real>(e: &CheckpointEntry) -> Result<Tensor4<R>> {
    let shape = storage_shape(&e.dims)?;
    Tensor4::new(shape, e.data.iter().map(|&v| R::of(v as f64)).collect())
}

impl<R: Real> ParamStore<R> {
    /// Parameters (and, when `with_optimizer`, Adam moments) as checkpoint
    /// entries.
    pub fn to_entries(&self, with_optimizer: bool) -> Vec<CheckpointEntry> {
        let mut out: Vec<_> = self
            .ids()
            .map(|id| entry_of(self.name(id).to_string(), self.dims(id), self.value(id)))
            .collect();
        if with_optimizer {
            for id in self.ids() {
                let (m, v) = self.moments(id);
                out.push(entry_of(
                    format!("adam.m/{}", self.name(id)),
                    self.dims(id),
                    m,
                ));
                out.push(entry_of(
                    format!("adam.v/{}", self.name(id)),
                    self.dims(id),
                    v,
                ));
            }
        }
        out
    }

    /// Overwrites every parameter from `ckpt`; parameters missing from the
    /// checkpoint are an error. Moments are restored when present.
    pub fn load_from(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for id in self.ids().collect::<Vec<_>>() {
            let name = self.name(id).to_string();
            let e = ckpt
                .entry(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter `{name}`")))?;
            if e.dims != self.dims(id) {
                return Err(Error::Format(format!(
                    "parameter `{name}` has dims {:?} in checkpoint, model expects {:?}",
                    e.dims,
                    self.dims(id)
                )));
            }
            *self.value_mut(id) = tensor_of(e)?;
            if let (Some(m), Some(v)) = (
                ckpt.entry(&format!("adam.m/{name}")),
                ckpt.entry(&format!("adam.v/{name}")),
            ) {
                self.set_moments(id, tensor_of(m)?, tensor_of(v)?)?;
            }
        }
        if let Some(step) = ckpt.optimizer_step {
            self.set_step(step);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Shape4;

    fn sample() -> Checkpoint {
        Checkpoint {
            config_text: "layers = 1\n".into(),
            optimizer_step: Some(42),
            entries: vec![
                CheckpointEntry {
                    name: "a".into(),
                    dims: vec![2],
                    data: vec![1.5, -2.0],
                },
                CheckpointEntry {
                    name: "b.w".into(),
                    dims: vec![1, 1, 1, 3],
                    data: vec![0.0, 1.0, 2.0],
                },
            ],
        }
    }

    #[test]
    fn layout_is_byte_exact() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"CDRWPARM");
        assert_eq!(&bytes[8..10], &1u16.to_le_bytes());
        assert_eq!(bytes[10], 1);
        assert_eq!(&bytes[11..15], &11u32.to_le_bytes());
        assert_eq!(&bytes[15..26], b"layers = 1\n");
        assert_eq!(&bytes[26..34], &42u64.to_le_bytes());
        // first entry: name len, name, rank, dim, two floats
        assert_eq!(&bytes[34..36], &1u16.to_le_bytes());
        assert_eq!(bytes[36], b'a');
        assert_eq!(bytes[37], 1);
        assert_eq!(&bytes[38..42], &2u32.to_le_bytes());
        assert_eq!(&bytes[42..46], &1.5f32.to_le_bytes());
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), sample());
    }

    #[test]
    fn truncation_is_a_format_error() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [3, 12, 30, bytes.len() - 1] {
            assert!(
                matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn store_round_trip_with_moments() {
        let mut s = ParamStore::<f64>::new();
        s.add(
            "w",
            &[1, 2, 1, 1],
            Tensor4::from_vec(Shape4::new(1, 2, 1, 1), vec![0.25, -1.0]),
        )
        .unwrap();
        s.set_moments(
            crate::nn::ParamId(0),
            Tensor4::full(Shape4::new(1, 2, 1, 1), 0.5),
            Tensor4::full(Shape4::new(1, 2, 1, 1), 0.125),
        )
        .unwrap();
        s.set_step(9);
        let ck = Checkpoint {
            config_text: String::new(),
            optimizer_step: Some(s.step()),
            entries: s.to_entries(true),
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let mut fresh = ParamStore::<f64>::new();
        fresh
            .add("w", &[1, 2, 1, 1], Tensor4::zeros(Shape4::new(1, 2, 1, 1)))
            .unwrap();
        fresh.load_from(&back).unwrap();
        assert_eq!(fresh, s);
    }
}
