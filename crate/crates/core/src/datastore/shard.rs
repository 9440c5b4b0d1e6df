use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::DataError;
use crate::eventgen::{Current, EventTruth, Flavor, Grid, PixelMapPair};
use crate::InteractionClass;

pub const SHARD_MAGIC: &[u8; 8] = b"NUPXSHRD";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: u64 = 32;
const RECORD_HEAD_LEN: usize = 48;

pub fn record_size(crop_size: usize) -> usize {
    RECORD_HEAD_LEN + 2 * crop_size * crop_size
}

fn encode_head(pair: &PixelMapPair) -> [u8; RECORD_HEAD_LEN] {
    let mut b = [0u8; RECORD_HEAD_LEN];
    b[0..8].copy_from_slice(&pair.event_id.to_le_bytes());
    let t = &pair.truth;
    b[8] = match t.flavor {
        Flavor::NuE => 0,
        Flavor::NuMu => 1,
    };
    b[9] = match t.current {
        Current::CC => 0,
        Current::NC => 1,
    };
    b[10] = t.interaction_class.index() as u8;
    b[16..24].copy_from_slice(&t.energy_gev.to_le_bytes());
    for (i, v) in t.vertex.iter().enumerate() {
        b[24 + 8 * i..32 + 8 * i].copy_from_slice(&v.to_le_bytes());
    }
    b
}

fn f64_at(b: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

fn decode_head(b: &[u8], path: &Path) -> Result<(u64, EventTruth), DataError> {
    let event_id = u64::from_le_bytes(b[0..8].try_into().unwrap());
    let flavor = match b[8] {
        0 => Flavor::NuE,
        1 => Flavor::NuMu,
        x => return Err(DataError::format(path, format!("event {event_id}: bad flavor byte {x}"))),
    };
    let current = match b[9] {
        0 => Current::CC,
        1 => Current::NC,
        x => return Err(DataError::format(path, format!("event {event_id}: bad current byte {x}"))),
    };
    let class = InteractionClass::from_index(b[10] as usize)
        .ok_or_else(|| DataError::format(path, format!("event {event_id}: bad class byte {}", b[10])))?;
    let truth = EventTruth {
        flavor,
        current,
        energy_gev: f64_at(b, 16),
        vertex: [f64_at(b, 24), f64_at(b, 32), f64_at(b, 40)],
        interaction_class: class,
    };
    if !truth.is_consistent() {
        return Err(DataError::format(path, format!("event {event_id}: inconsistent truth record")));
    }
    Ok((event_id, truth))
}

/// Writes one shard. The file is created under a temporary name and renamed
/// into place by [`ShardWriter::finish`].
pub struct ShardWriter {
    path: PathBuf,
    tmp_path: PathBuf,
    out: BufWriter<File>,
    hasher: Sha256,
    crop_size: usize,
    count: u64,
}

impl ShardWriter {
    pub fn create(path: &Path, crop_size: usize) -> Result<Self, DataError> {
        let tmp_path = path.with_extension("bin.partial");
        let file = File::create(&tmp_path).map_err(|e| DataError::io(&tmp_path, e))?;
        let mut w = Self {
            path: path.to_path_buf(),
            tmp_path,
            out: BufWriter::with_capacity(1 << 20, file),
            hasher: Sha256::new(),
            crop_size,
            count: 0,
        };
        // Placeholder header; the record count is patched in `finish`.
        w.out.write_all(&[0u8; HEADER_LEN as usize]).map_err(|e| DataError::io(&w.tmp_path, e))?;
        Ok(w)
    }

    pub fn push(&mut self, pair: &PixelMapPair) -> Result<(), DataError> {
        for g in pair.views() {
            if g.size != self.crop_size || g.data.len() != g.size * g.size {
                return Err(DataError::format(
                    &self.path,
                    format!("event {} has a {}-pixel view, shard expects {}", pair.event_id, g.size, self.crop_size),
                ));
            }
        }
        let head = encode_head(pair);
        for chunk in [&head[..], &pair.view_xz.data, &pair.view_yz.data] {
            self.out.write_all(chunk).map_err(|e| DataError::io(&self.tmp_path, e))?;
            self.hasher.update(chunk);
        }
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Finalizes the header and renames the shard into place. Returns the
    /// record count and the hex SHA-256 of the record payload.
    pub fn finish(self) -> Result<(u64, String), DataError> {
        let Self { path, tmp_path, out, hasher, crop_size, count } = self;
        let mut file = out.into_inner().map_err(|e| DataError::io(&tmp_path, e.into_error()))?;
        let mut header = [0u8; HEADER_LEN as usize];
        header[0..8].copy_from_slice(SHARD_MAGIC);
        header[8..12].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
        header[12..16].copy_from_slice(&(crop_size as u32).to_le_bytes());
        header[16..24].copy_from_slice(&count.to_le_bytes());
        let io = |e| DataError::io(&tmp_path, e);
        file.seek(SeekFrom::Start(0)).map_err(io)?;
        file.write_all(&header).map_err(io)?;
        file.sync_all().map_err(io)?;
        drop(file);
        std::fs::rename(&tmp_path, &path).map_err(|e| DataError::io(&path, e))?;
        Ok((count, super::hex(&hasher.finalize())))
    }

    /// Removes the partial file.
    pub fn abort(self) {
        let _ = std::fs::remove_file(&self.tmp_path);
    }
}

/// Random-access reader over one shard.
pub struct ShardReader {
    path: PathBuf,
    file: BufReader<File>,
    pub crop_size: usize,
    pub record_count: u64,
}

impl ShardReader {
    pub fn open(path: &Path) -> Result<Self, DataError> {
        let file = File::open(path).map_err(|e| DataError::io(path, e))?;
        let mut file = BufReader::with_capacity(1 << 20, file);
        let mut header = [0u8; HEADER_LEN as usize];
        file.read_exact(&mut header).map_err(|e| DataError::io(path, e))?;
        if &header[0..8] != SHARD_MAGIC {
            return Err(DataError::format(path, "bad magic"));
        }
        let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(DataError::format(path, format!("unsupported format version {version}")));
        }
        let crop_size = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        let record_count = u64::from_le_bytes(header[16..24].try_into().unwrap());
        let expected = HEADER_LEN + record_count * record_size(crop_size) as u64;
        let actual = file.get_ref().metadata().map_err(|e| DataError::io(path, e))?.len();
        if actual != expected {
            return Err(DataError::format(path, format!("file is {actual} bytes, header implies {expected}")));
        }
        Ok(Self { path: path.to_path_buf(), file, crop_size, record_count })
    }

    fn seek_record(&mut self, index: u64) -> Result<(), DataError> {
        if index >= self.record_count {
            return Err(DataError::format(&self.path, format!("record {index} out of range")));
        }
        let at = HEADER_LEN + index * record_size(self.crop_size) as u64;
        self.file.seek(SeekFrom::Start(at)).map_err(|e| DataError::io(&self.path, e))?;
        Ok(())
    }

    pub fn read(&mut self, index: u64) -> Result<PixelMapPair, DataError> {
        self.seek_record(index)?;
        self.read_next()
    }

    /// Truth of record `index` without reading its pixel data.
    pub fn read_truth(&mut self, index: u64) -> Result<(u64, EventTruth), DataError> {
        self.seek_record(index)?;
        let mut head = [0u8; RECORD_HEAD_LEN];
        self.file.read_exact(&mut head).map_err(|e| DataError::io(&self.path, e))?;
        decode_head(&head, &self.path)
    }

    fn read_next(&mut self) -> Result<PixelMapPair, DataError> {
        let mut head = [0u8; RECORD_HEAD_LEN];
        self.file.read_exact(&mut head).map_err(|e| DataError::io(&self.path, e))?;
        let (event_id, truth) = decode_head(&head, &self.path)?;
        let n = self.crop_size * self.crop_size;
        let mut xz = vec![0u8; n];
        let mut yz = vec![0u8; n];
        self.file.read_exact(&mut xz).map_err(|e| DataError::io(&self.path, e))?;
        self.file.read_exact(&mut yz).map_err(|e| DataError::io(&self.path, e))?;
        Ok(PixelMapPair {
            event_id,
            truth,
            view_xz: Grid { size: self.crop_size, data: xz },
            view_yz: Grid { size: self.crop_size, data: yz },
        })
    }
}

/// Reads every record of a shard in order.
pub fn read_shard(path: &Path) -> Result<Vec<PixelMapPair>, DataError> {
    let mut r = ShardReader::open(path)?;
    if r.record_count > 0 {
        r.seek_record(0)?;
    }
    (0..r.record_count).map(|_| r.read_next()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eventgen::{generate_range, CompositionSpec, DetectorGeometry, GeneratorConfig};

    #[test]
    fn shard_round_trip_is_bit_exact() {
        let cfg = GeneratorConfig {
            geometry: DetectorGeometry { crop_size: 32, ..Default::default() },
            composition: CompositionSpec::default(),
            base_seed: 4,
        };
        let events = generate_range(&cfg, 0, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        let mut w = ShardWriter::create(&path, 32).unwrap();
        for e in &events {
            w.push(e).unwrap();
        }
        let (count, _) = w.finish().unwrap();
        assert_eq!(count, 9);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 32 + 9 * record_size(32) as u64);
        let back = read_shard(&path).unwrap();
        assert_eq!(back, events);
        let mut r = ShardReader::open(&path).unwrap();
        assert_eq!(r.read(4).unwrap(), events[4]);
        assert_eq!(r.read_truth(7).unwrap(), (7, events[7].truth));
    }

    #[test]
    fn rejects_truncated_and_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"not a shard at all, definitely not").unwrap();
        assert!(matches!(ShardReader::open(&path), Err(DataError::Format { .. })));
    }
}
