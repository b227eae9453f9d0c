//! Frame sequences of latent channels, plus their binary stream format.
//!
//! A [`LatentSequence`] is a `C x T` sequence stored frame-major: frame `t`
//! is the contiguous slice of its `C` channel values. Primes, emitted
//! rollouts, and oracle fixtures all travel through the same file format:
//!
//! ```text
//! magic  "BFLS"          4 bytes
//! version u32 LE         currently 1
//! channels u32 LE
//! frames  u32 LE
//! data    frames * channels f32 LE, frame-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LATENT_MAGIC: [u8; 4] = *b"BFLS";
pub const LATENT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    channels: usize,
    data: Vec<f32>,
}

impl LatentSequence {
    pub fn new(channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::dim("latent sequence needs at least one channel"));
        }
        if data.len() % channels != 0 {
            return Err(Error::dim(format!(
                "latent data length {} not divisible by {} channels",
                data.len(),
                channels
            )));
        }
        Ok(LatentSequence { channels, data })
    }

    pub fn zeros(channels: usize, frames: usize) -> Self {
        LatentSequence {
            channels,
            data: vec![0.0; channels * frames],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.data.len() / self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.channels..(t + 1) * self.channels]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        &mut self.data[t * self.channels..(t + 1) * self.channels]
    }

    /// Copy of frames `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames() {
            return Err(Error::dim(format!(
                "slice [{start}, {}) out of range for {} frames",
                start + len,
                self.frames()
            )));
        }
        Ok(LatentSequence {
            channels: self.channels,
            data: self.data[start * self.channels..(start + len) * self.channels].to_vec(),
        })
    }

    /// Last `n` frames (zero-padded on the left when shorter than `n`).
    pub fn tail_padded(&self, n: usize) -> Self {
        let mut out = LatentSequence::zeros(self.channels, n);
        let have = self.frames().min(n);
        let src_start = self.frames() - have;
        let dst_start = n - have;
        out.data[dst_start * self.channels..]
            .copy_from_slice(&self.data[src_start * self.channels..]);
        out
    }

    pub fn append(&mut self, other: &LatentSequence) -> Result<()> {
        if other.channels != self.channels {
            return Err(Error::dim(format!(
                "append channel mismatch: {} vs {}",
                self.channels, other.channels
            )));
        }
        self.data.extend_from_slice(&other.data);
        Ok(())
    }

    /// `[T, C]` tensor view of the data (copy).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.frames(), self.channels], self.data.clone())
            .expect("shape derived from the sequence itself")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let sh = t.shape();
        if sh.len() != 2 {
            return Err(Error::dim(format!(
                "latent tensor must be [frames, channels], got {sh:?}"
            )));
        }
        LatentSequence::new(sh[1], t.data().to_vec())
    }

    // ── Stream file format ──────────────────────────────────────────

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&LATENT_MAGIC)?;
        w.write_all(&LATENT_VERSION.to_le_bytes())?;
        w.write_all(&(self.channels as u32).to_le_bytes())?;
        w.write_all(&(self.frames() as u32).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact_at(r, &mut magic, 0)?;
        if magic != LATENT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic {:02x?}, expected {:02x?}", magic, LATENT_MAGIC),
            });
        }
        let version = read_u32_at(r, 4)?;
        if version != LATENT_VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let channels = read_u32_at(r, 8)? as usize;
        let frames = read_u32_at(r, 12)? as usize;
        if channels == 0 {
            return Err(Error::Format {
                offset: 8,
                message: "zero channels".into(),
            });
        }
        let want = channels * frames;
        let mut data = vec![0.0f32; want];
        let mut buf = [0u8; 4];
        for (i, slot) in data.iter_mut().enumerate() {
            let offset = 16 + 4 * i as u64;
            read_exact_at(r, &mut buf, offset).map_err(|_| Error::Format {
                offset,
                message: format!(
                    "truncated data: expected {} bytes of samples, file ends at byte {}",
                    4 * want,
                    offset
                ),
            })?;
            *slot = f32::from_le_bytes(buf);
        }
        LatentSequence::new(channels, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        LatentSequence::read_from(&mut f)
    }
}

fn read_exact_at(r: &mut impl Read, buf: &mut [u8], offset: u64) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Format {
        offset,
        message: format!("unexpected end of file reading {} bytes", buf.len()),
    })
}

fn read_u32_at(r: &mut impl Read, offset: u64) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact_at(r, &mut buf, offset)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        let seq = LatentSequence::new(3, (0..12).map(|i| i as f32 * 0.5 - 2.0).collect()).unwrap();
        let mut buf = Vec::new();
        seq.write_to(&mut buf).unwrap();
        let back = LatentSequence::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(seq, back);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let seq = LatentSequence::new(2, vec![1.0; 8]).unwrap();
        let mut buf = Vec::new();
        seq.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 5);
        let err = LatentSequence::read_from(&mut buf.as_slice()).unwrap_err();
        match err {
            Error::Format { offset, message } => {
                assert!(offset >= 16);
                assert!(message.contains("truncated") || message.contains("end of file"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let mut buf = vec![0u8; 16];
        buf[0..4].copy_from_slice(b"NOPE");
        let err = LatentSequence::read_from(&mut buf.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
    }

    #[test]
    fn tail_padding_keeps_recent_frames() {
        let seq = LatentSequence::new(1, vec![1.0, 2.0, 3.0]).unwrap();
        let tail = seq.tail_padded(5);
        assert_eq!(tail.data(), &[0.0, 0.0, 1.0, 2.0, 3.0]);
        let tail2 = seq.tail_padded(2);
        assert_eq!(tail2.data(), &[2.0, 3.0]);
    }
}
