use std::path::Path;

use super::config::ModelConfig;
use super::scalar::Scalar;
use super::unet::SiameseUnet;
use crate::error::{Error, Result};

const NETWORK_MAGIC: &[u8; 8] = b"RXUNET\0\0";
/// Format version written by [`save_network`].
pub const NETWORK_FORMAT_VERSION: u32 = 1;

/// Little-endian binary writer for checkpoint files.
#[derive(Debug, Default)]
pub(crate) struct BlobWriter {
    pub bytes: Vec<u8>,
}

impl BlobWriter {
    pub fn raw(&mut self, b: &[u8]) {
        self.bytes.extend_from_slice(b);
    }
    pub fn u8(&mut self, v: u8) {
        self.bytes.push(v);
    }
    pub fn u32(&mut self, v: u32) {
        self.raw(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.raw(&v.to_le_bytes());
    }
    pub fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.raw(b);
    }
    pub fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }
    /// Writes `T::WIDTH` followed by the length-prefixed values.
    pub fn values<T: Scalar>(&mut self, v: &[T]) {
        self.u8(T::WIDTH);
        self.u64(v.len() as u64);
        for x in v {
            x.to_le_bytes_vec(&mut self.bytes);
        }
    }
}

/// Reader counterpart of [`BlobWriter`]; running past the end is reported as
/// a truncated checkpoint.
#[derive(Debug)]
pub(crate) struct BlobReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> BlobReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn raw(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.raw(1)?[0])
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.raw(4)?.try_into().expect("4 bytes")))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.raw(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} overflows")))
    }
    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.raw(n)
    }
    pub fn str(&mut self) -> Result<&'a str> {
        std::str::from_utf8(self.bytes()?).map_err(|e| Error::Checkpoint(format!("invalid utf-8: {e}")))
    }
    /// Reads values written by [`BlobWriter::values`], converting the stored
    /// precision to `T`.
    pub fn values<T: Scalar>(&mut self, expect_len: usize) -> Result<Vec<T>> {
        let width = self.u8()?;
        let n = self.len()?;
        if n != expect_len {
            return Err(Error::Checkpoint(format!("tensor has {n} values, expected {expect_len}")));
        }
        let raw = self.raw(n.checked_mul(width as usize).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        match width {
            4 => Ok(raw
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().expect("4")) as f64))
                .collect()),
            8 => Ok(raw
                .chunks_exact(8)
                .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().expect("8"))))
                .collect()),
            w => Err(Error::Checkpoint(format!("unsupported element width {w}"))),
        }
    }
    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub(crate) fn check_header(r: &mut BlobReader<'_>, magic: &[u8; 8], version: u32) -> Result<()> {
    if r.raw(8)? != magic {
        return Err(Error::Checkpoint("not a checkpoint of the expected kind (bad magic)".into()));
    }
    let found = r.u32()?;
    if found != version {
        return Err(Error::UnsupportedVersion {
            found,
            expected: version,
        });
    }
    Ok(())
}

/// Serializes configuration, parameters and running statistics.
pub fn encode_network<T: Scalar>(net: &SiameseUnet<T>) -> Vec<u8> {
    let mut w = BlobWriter::default();
    w.raw(NETWORK_MAGIC);
    w.u32(NETWORK_FORMAT_VERSION);
    w.str(&serde_json::to_string(net.config()).expect("config serializes"));
    let params = net.params();
    let buffers = net.buffers();
    w.u64((params.len() + buffers.len()) as u64);
    for p in params {
        w.str(&p.name);
        w.values(&p.value);
    }
    for b in buffers {
        w.str(&b.name);
        w.values(&b.value);
    }
    w.bytes
}

/// Inverse of [`encode_network`].
pub fn decode_network<T: Scalar>(bytes: &[u8]) -> Result<SiameseUnet<T>> {
    let mut r = BlobReader::new(bytes);
    let net = read_network(&mut r)?;
    r.finish()?;
    Ok(net)
}

pub(crate) fn read_network<T: Scalar>(r: &mut BlobReader<'_>) -> Result<SiameseUnet<T>> {
    check_header(r, NETWORK_MAGIC, NETWORK_FORMAT_VERSION)?;
    let config: ModelConfig = serde_json::from_str(r.str()?)
        .map_err(|e| Error::Checkpoint(format!("configuration record: {e}")))?;
    let mut net = SiameseUnet::new(config, 0)?;
    let count = r.u64()? as usize;
    let expected = net.params().len() + net.buffers().len();
    if count != expected {
        return Err(Error::Checkpoint(format!("{count} tensors stored, network has {expected}")));
    }
    let fill = |name: &str, value: &mut Vec<T>, r: &mut BlobReader<'_>| -> Result<()> {
        let stored = r.str()?;
        if stored != name {
            return Err(Error::Checkpoint(format!("expected tensor `{name}`, found `{stored}`")));
        }
        *value = r.values(value.len())?;
        Ok(())
    };
    for p in net.params_mut() {
        fill(&p.name, &mut p.value, r)?;
    }
    for b in net.buffers_mut() {
        fill(&b.name, &mut b.value, r)?;
    }
    Ok(net)
}

pub fn save_network<T: Scalar>(net: &SiameseUnet<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_network(net)).map_err(|e| Error::at_path(path, e))
}

pub fn load_network<T: Scalar>(path: &Path) -> Result<SiameseUnet<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::at_path(path, e))?;
    decode_network(&bytes)
}
