//! `SGV1` record files.
//!
//! ```text
//! "SGV1" | u32 version (=1) | u32 count
//! per example: u32 id_len | id (UTF-8) | u32 T | u32 dv | u32 da
//!              | u16 label_count | u16 × label_count
//!              | T·dv f32 visual | T·da f32 audio
//! ```
//!
//! All integers and floats are little-endian. A JSON manifest sidecar holds
//! per-example SHA-256 checksums and the generating spec and taxonomy.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DatasetSpec, VideoExample};
use crate::codec::hex;
use crate::error::{Error, Result};
use crate::heads::Taxonomy;
use crate::tensor::Tensor;

pub const RECORD_MAGIC: &[u8; 4] = b"SGV1";
pub const RECORD_VERSION: u32 = 1;

fn encode_example(e: &VideoExample, out: &mut Vec<u8>) -> Result<()> {
    let id = e.id.as_bytes();
    let (t, dv, da) = (e.visual.rows(), e.visual.cols(), e.audio.cols());
    if e.audio.rows() != t {
        return Err(Error::dim("write_records", e.visual.shape(), e.audio.shape()));
    }
    let u32_of =
        |n: usize, what: &str| u32::try_from(n).map_err(|_| Error::Argument(format!("{what} {n} does not fit in u32")));
    out.extend_from_slice(&u32_of(id.len(), "id length")?.to_le_bytes());
    out.extend_from_slice(id);
    out.extend_from_slice(&u32_of(t, "frame count")?.to_le_bytes());
    out.extend_from_slice(&u32_of(dv, "visual width")?.to_le_bytes());
    out.extend_from_slice(&u32_of(da, "audio width")?.to_le_bytes());
    let labels =
        u16::try_from(e.fine_labels.len()).map_err(|_| Error::Argument("too many labels for one record".into()))?;
    out.extend_from_slice(&labels.to_le_bytes());
    for &l in &e.fine_labels {
        let l = u16::try_from(l).map_err(|_| Error::Argument(format!("label {l} does not fit in u16")))?;
        out.extend_from_slice(&l.to_le_bytes());
    }
    for &x in e.visual.data().iter().chain(e.audio.data()) {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(())
}

/// SHA-256 of the example's encoded record bytes.
pub fn example_checksum(e: &VideoExample) -> Result<String> {
    let mut buf = Vec::new();
    encode_example(e, &mut buf)?;
    Ok(hex(&Sha256::digest(&buf)))
}

/// Writes an `SGV1` file and returns the per-example checksums.
pub fn write_records(path: impl AsRef<Path>, examples: &[VideoExample]) -> Result<Vec<String>> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let count = u32::try_from(examples.len()).map_err(|_| Error::Argument("too many examples".into()))?;
    let mut header = Vec::with_capacity(12);
    header.extend_from_slice(RECORD_MAGIC);
    header.extend_from_slice(&RECORD_VERSION.to_le_bytes());
    header.extend_from_slice(&count.to_le_bytes());
    w.write_all(&header).map_err(|e| Error::io(path, e))?;
    let mut sums = Vec::with_capacity(examples.len());
    let mut buf = Vec::new();
    for e in examples {
        buf.clear();
        encode_example(e, &mut buf)?;
        sums.push(hex(&Sha256::digest(&buf)));
        w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(sums)
}

/// Streaming `SGV1` reader. Errors carry the byte offset at which the
/// malformed field starts.
pub struct RecordReader<R> {
    inner: R,
    offset: u64,
    remaining: u32,
    failed: bool,
}

impl<R: Read> RecordReader<R> {
    pub fn new(inner: R) -> Result<Self> {
        let mut reader = RecordReader {
            inner,
            offset: 0,
            remaining: 0,
            failed: false,
        };
        let magic: [u8; 4] = reader.bytes_array("magic")?;
        if &magic != RECORD_MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}, expected SGV1")));
        }
        let version = reader.u32("version")?;
        if version != RECORD_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        reader.remaining = reader.u32("example count")?;
        Ok(reader)
    }

    /// Examples still to be read according to the header.
    pub fn remaining(&self) -> u32 {
        self.remaining
    }

    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let start = self.offset;
        let mut got = 0;
        while got < buf.len() {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) => {
                    return Err(Error::format(
                        start,
                        format!("truncated {what}: needed {} bytes, found {got}", buf.len()),
                    ))
                }
                Ok(n) => got += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(Error::format(start, format!("read failed in {what}: {e}"))),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn bytes_array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.fill(&mut b, what)?;
        Ok(b)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes_array(what)?))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes_array(what)?))
    }

    fn f32_block(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let mut raw = vec![0u8; n * 4];
        self.fill(&mut raw, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    fn example(&mut self) -> Result<VideoExample> {
        let id_len = self.u32("id length")? as usize;
        let id_at = self.offset;
        let mut id = vec![0u8; id_len];
        self.fill(&mut id, "id")?;
        let id = String::from_utf8(id).map_err(|_| Error::format(id_at, "id is not UTF-8"))?;
        let t = self.u32("frame count")? as usize;
        let dv = self.u32("visual width")? as usize;
        let da = self.u32("audio width")? as usize;
        let n_labels = self.u16("label count")?;
        let mut labels = std::collections::BTreeSet::new();
        for _ in 0..n_labels {
            let at = self.offset;
            let l = self.u16("label")? as usize;
            if !labels.insert(l) {
                return Err(Error::format(at, format!("duplicate label {l}")));
            }
        }
        let visual = self.f32_block(t * dv, "visual features")?;
        let audio = self.f32_block(t * da, "audio features")?;
        Ok(VideoExample {
            id,
            visual: Tensor::new(vec![t, dv], visual)?,
            audio: Tensor::new(vec![t, da], audio)?,
            fine_labels: labels,
        })
    }
}

impl<R: Read> Iterator for RecordReader<R> {
    type Item = Result<VideoExample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        if self.remaining == 0 {
            let mut probe = [0u8; 1];
            return match self.inner.read(&mut probe) {
                Ok(0) => None,
                _ => {
                    self.failed = true;
                    Some(Err(Error::format(self.offset, "trailing bytes after last record")))
                }
            };
        }
        self.remaining -= 1;
        let res = self.example();
        self.failed = res.is_err();
        Some(res)
    }
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<VideoExample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    RecordReader::new(BufReader::new(file))?.collect()
}

/// JSON sidecar describing an `SGV1` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub count: usize,
    pub checksums: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_index: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<DatasetSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taxonomy: Option<Taxonomy>,
}

impl Manifest {
    pub fn new(checksums: Vec<String>) -> Self {
        Manifest {
            format: "SGV1".into(),
            count: checksums.len(),
            checksums,
            first_index: None,
            spec: None,
            taxonomy: None,
        }
    }
}

/// `data.sgv` → `data.sgv.manifest.json`.
pub fn manifest_path(records: impl AsRef<Path>) -> PathBuf {
    let mut s = records.as_ref().as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &Manifest) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(manifest)?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
