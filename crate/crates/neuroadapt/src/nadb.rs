//! NADB dataset files plus their JSON manifests.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "NADB"
//! 4       4     version (u32 LE, 1)
//! 8       8     record count (u64 LE)
//! 16      4     channels C (u32 LE)
//! 20      4     samples T (u32 LE)
//! 24      4     dtype tag (u32 LE, 0 = f32)
//! 28      ...   records, each C·T little-endian f32, channel-major
//! ```

use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use neuroadapt_core::shiftbench::{Dataset, DatasetManifest};

use crate::error::{HarnessError, Result};
use crate::fsutil::{read_json, write_atomic, write_json};

pub const NADB_MAGIC: [u8; 4] = *b"NADB";
pub const NADB_VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;
pub const HEADER_LEN: u64 = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NadbHeader {
    pub version: u32,
    pub records: u64,
    pub channels: u32,
    pub samples: u32,
    pub dtype: u32,
}

impl NadbHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN as usize] {
        let mut out = [0u8; HEADER_LEN as usize];
        out[..4].copy_from_slice(&NADB_MAGIC);
        out[4..8].copy_from_slice(&self.version.to_le_bytes());
        out[8..16].copy_from_slice(&self.records.to_le_bytes());
        out[16..20].copy_from_slice(&self.channels.to_le_bytes());
        out[20..24].copy_from_slice(&self.samples.to_le_bytes());
        out[24..28].copy_from_slice(&self.dtype.to_le_bytes());
        out
    }

    pub fn parse(bytes: &[u8; HEADER_LEN as usize]) -> std::result::Result<Self, String> {
        if bytes[..4] != NADB_MAGIC {
            return Err(format!("bad magic {:?}, expected \"NADB\"", &bytes[..4]));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let header = Self {
            version: u32_at(4),
            records: u64::from_le_bytes(bytes[8..16].try_into().unwrap()),
            channels: u32_at(16),
            samples: u32_at(20),
            dtype: u32_at(24),
        };
        if header.version != NADB_VERSION {
            return Err(format!("unsupported version {}", header.version));
        }
        if header.dtype != DTYPE_F32 {
            return Err(format!("unsupported dtype tag {}", header.dtype));
        }
        Ok(header)
    }

    pub fn record_bytes(&self) -> u64 {
        4 * u64::from(self.channels) * u64::from(self.samples)
    }

    pub fn file_len(&self) -> u64 {
        HEADER_LEN + self.records * self.record_bytes()
    }
}

pub fn encode_nadb(dataset: &Dataset) -> Vec<u8> {
    let m = &dataset.manifest;
    let header = NadbHeader {
        version: NADB_VERSION,
        records: m.records.len() as u64,
        channels: m.channels as u32,
        samples: m.samples as u32,
        dtype: DTYPE_F32,
    };
    let mut out = Vec::with_capacity(header.file_len() as usize);
    out.extend_from_slice(&header.to_bytes());
    for v in &dataset.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Write `<dir>/<stem>.nadb` and `<dir>/<stem>.json`; returns the manifest
/// path. The manifest's `data_file` is rewritten to the sibling file name.
pub fn write_dataset(dir: &Path, stem: &str, dataset: &Dataset) -> Result<PathBuf> {
    dataset.manifest.validate()?;
    let mut manifest = dataset.manifest.clone();
    manifest.data_file = format!("{stem}.nadb");
    write_atomic(&dir.join(&manifest.data_file), &encode_nadb(dataset))?;
    let path = dir.join(format!("{stem}.json"));
    write_json(&path, &manifest)?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let manifest: DatasetManifest = read_json(path)?;
    manifest.validate()?;
    Ok(manifest)
}

/// Random-access reader over one NADB file. The header and file length are
/// checked once at open; records are read on demand.
#[derive(Debug)]
pub struct NadbReader {
    path: PathBuf,
    header: NadbHeader,
    file: Mutex<File>,
}

impl NadbReader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
        let actual = file.metadata().map_err(|e| HarnessError::io(path, e))?.len();
        if actual < HEADER_LEN {
            return Err(HarnessError::format(
                path,
                format!("truncated header: expected at least {HEADER_LEN} bytes, found {actual}"),
            ));
        }
        let mut raw = [0u8; HEADER_LEN as usize];
        file.read_exact(&mut raw).map_err(|e| HarnessError::io(path, e))?;
        let header = NadbHeader::parse(&raw).map_err(|r| HarnessError::format(path, r))?;
        let expected = header.file_len();
        if actual != expected {
            return Err(HarnessError::format(
                path,
                format!(
                    "{} data: expected {expected} bytes for {} records of {}x{}, found {actual}",
                    if actual < expected { "truncated" } else { "oversized" },
                    header.records,
                    header.channels,
                    header.samples
                ),
            ));
        }
        Ok(Self {
            path: path.to_path_buf(),
            header,
            file: Mutex::new(file),
        })
    }

    pub fn header(&self) -> NadbHeader {
        self.header
    }

    pub fn len(&self) -> usize {
        self.header.records as usize
    }

    pub fn is_empty(&self) -> bool {
        self.header.records == 0
    }

    pub fn record(&self, i: usize) -> Result<Vec<f32>> {
        if i as u64 >= self.header.records {
            return Err(HarnessError::format(
                &self.path,
                format!("record {i} out of range for {} records", self.header.records),
            ));
        }
        let n = self.header.record_bytes();
        let mut buf = vec![0u8; n as usize];
        {
            let mut f = self.file.lock().unwrap_or_else(|p| p.into_inner());
            f.seek(SeekFrom::Start(HEADER_LEN + i as u64 * n))
                .and_then(|_| f.read_exact(&mut buf))
                .map_err(|e| HarnessError::io(&self.path, e))?;
        }
        Ok(decode_f32(&buf))
    }

    pub fn read_all(&self) -> Result<Vec<f32>> {
        let mut buf = Vec::with_capacity((self.header.file_len() - HEADER_LEN) as usize);
        {
            let mut f = self.file.lock().unwrap_or_else(|p| p.into_inner());
            f.seek(SeekFrom::Start(HEADER_LEN))
                .and_then(|_| f.read_to_end(&mut buf))
                .map_err(|e| HarnessError::io(&self.path, e))?;
        }
        Ok(decode_f32(&buf))
    }
}

fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// Open a manifest and its data file, checking they describe the same shape.
pub fn read_dataset(manifest_path: &Path) -> Result<(DatasetManifest, NadbReader)> {
    let manifest = read_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let reader = NadbReader::open(&dir.join(&manifest.data_file))?;
    let h = reader.header();
    if h.records != manifest.records.len() as u64 {
        return Err(HarnessError::format(
            manifest_path,
            format!(
                "manifest lists {} records but the data file holds {}",
                manifest.records.len(),
                h.records
            ),
        ));
    }
    if (h.channels as usize, h.samples as usize) != (manifest.channels, manifest.samples) {
        return Err(HarnessError::format(
            manifest_path,
            format!(
                "manifest window shape {}x{} does not match data file {}x{}",
                manifest.channels, manifest.samples, h.channels, h.samples
            ),
        ));
    }
    Ok((manifest, reader))
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let (manifest, reader) = read_dataset(manifest_path)?;
    Ok(Dataset::new(manifest, reader.read_all()?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_round_trip() {
        let h = NadbHeader {
            version: 1,
            records: 3,
            channels: 2,
            samples: 5,
            dtype: 0,
        };
        assert_eq!(NadbHeader::parse(&h.to_bytes()).unwrap(), h);
        assert_eq!(h.file_len(), 28 + 3 * 40);
        let mut bad = h.to_bytes();
        bad[0] = b'X';
        assert!(NadbHeader::parse(&bad).unwrap_err().contains("magic"));
    }
}
