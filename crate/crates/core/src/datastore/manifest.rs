use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::shard::{ShardReader, ShardWriter, FORMAT_VERSION};
use super::DataError;
use crate::eventgen::{DetectorGeometry, EventGenError, EventTruth, PixelMapPair};
use crate::InteractionClass;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub n_events: u64,
    /// Shard file names relative to the dataset directory, in record order.
    pub shard_paths: Vec<String>,
    pub shard_counts: Vec<u64>,
    pub shard_sha256: Vec<String>,
    /// Events per interaction class, keyed by class tag.
    pub composition_counts: BTreeMap<InteractionClass, u64>,
    pub geometry: DetectorGeometry,
    pub base_seed: u64,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<(), String> {
        let by_class: u64 = self.composition_counts.values().sum();
        let by_shard: u64 = self.shard_counts.iter().sum();
        if by_class != self.n_events {
            return Err(format!("composition counts sum to {by_class}, n_events is {}", self.n_events));
        }
        if by_shard != self.n_events {
            return Err(format!("shard counts sum to {by_shard}, n_events is {}", self.n_events));
        }
        if self.shard_paths.len() != self.shard_counts.len() || self.shard_paths.len() != self.shard_sha256.len() {
            return Err("shard lists have different lengths".into());
        }
        Ok(())
    }
}

fn shard_name(i: usize) -> String {
    format!("shard-{i:05}.bin")
}

/// Writes `events` into `out_dir` as shards of `shard_size` records and then
/// commits the manifest.
///
/// On any failure every shard written by this call is removed and no
/// manifest is created, so the directory never looks like a complete dataset.
pub fn write_dataset<I>(
    events: I,
    shard_size: usize,
    out_dir: &Path,
    geometry: &DetectorGeometry,
    base_seed: u64,
) -> Result<DatasetManifest, DataError>
where
    I: IntoIterator<Item = Result<PixelMapPair, EventGenError>>,
{
    if shard_size == 0 {
        return Err(DataError::Config("shard_size must be positive".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| DataError::io(out_dir, e))?;
    let mut written: Vec<PathBuf> = Vec::new();
    let result = write_shards(events, shard_size, out_dir, geometry, base_seed, &mut written);
    if result.is_err() {
        for p in &written {
            let _ = std::fs::remove_file(p);
        }
    }
    result
}

fn write_shards<I>(
    events: I,
    shard_size: usize,
    out_dir: &Path,
    geometry: &DetectorGeometry,
    base_seed: u64,
    written: &mut Vec<PathBuf>,
) -> Result<DatasetManifest, DataError>
where
    I: IntoIterator<Item = Result<PixelMapPair, EventGenError>>,
{
    let mut manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        n_events: 0,
        shard_paths: Vec::new(),
        shard_counts: Vec::new(),
        shard_sha256: Vec::new(),
        composition_counts: InteractionClass::ALL.iter().map(|&c| (c, 0)).collect(),
        geometry: geometry.clone(),
        base_seed,
    };
    let mut current: Option<ShardWriter> = None;
    let close = |w: ShardWriter, manifest: &mut DatasetManifest| -> Result<(), DataError> {
        let (count, sha) = w.finish()?;
        manifest.shard_counts.push(count);
        manifest.shard_sha256.push(sha);
        Ok(())
    };
    for event in events {
        let event = match event {
            Ok(e) => e,
            Err(e) => {
                if let Some(w) = current.take() {
                    w.abort();
                }
                return Err(e.into());
            }
        };
        if current.is_none() {
            let name = shard_name(manifest.shard_paths.len());
            let path = out_dir.join(&name);
            current = Some(ShardWriter::create(&path, geometry.crop_size)?);
            written.push(path);
            manifest.shard_paths.push(name);
        }
        let w = current.as_mut().unwrap();
        if let Err(e) = w.push(&event) {
            current.take().unwrap().abort();
            return Err(e);
        }
        *manifest.composition_counts.entry(event.truth.interaction_class).or_default() += 1;
        manifest.n_events += 1;
        if w.count() as usize == shard_size {
            close(current.take().unwrap(), &mut manifest)?;
        }
    }
    if let Some(w) = current.take() {
        close(w, &mut manifest)?;
    }
    let tmp = out_dir.join(format!("{MANIFEST_FILE}.partial"));
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&tmp, body).map_err(|e| DataError::io(&tmp, e))?;
    let final_path = out_dir.join(MANIFEST_FILE);
    std::fs::rename(&tmp, &final_path).map_err(|e| DataError::io(&final_path, e))?;
    Ok(manifest)
}

/// A committed dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    starts: Vec<u64>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self, DataError> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| DataError::format(&path, e.to_string()))?;
        manifest.validate().map_err(|r| DataError::format(&path, r))?;
        let mut starts = Vec::with_capacity(manifest.shard_counts.len());
        let mut acc = 0;
        for c in &manifest.shard_counts {
            starts.push(acc);
            acc += c;
        }
        Ok(Self { dir: dir.to_path_buf(), manifest, starts })
    }

    pub fn len(&self) -> u64 {
        self.manifest.n_events
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.n_events == 0
    }

    fn locate(&self, position: u64) -> Result<(usize, u64), DataError> {
        if position >= self.len() {
            return Err(DataError::Config(format!("record {position} out of range ({} events)", self.len())));
        }
        let shard = self.starts.partition_point(|&s| s <= position) - 1;
        Ok((shard, position - self.starts[shard]))
    }

    fn reader(&self, shard: usize) -> Result<ShardReader, DataError> {
        ShardReader::open(&self.dir.join(&self.manifest.shard_paths[shard]))
    }

    /// Reads records by stream position (equal to event id for generated sets).
    pub fn read_many(&self, positions: &[u64]) -> Result<Vec<PixelMapPair>, DataError> {
        let mut readers: BTreeMap<usize, ShardReader> = BTreeMap::new();
        positions
            .iter()
            .map(|&p| {
                let (shard, idx) = self.locate(p)?;
                let r = match readers.entry(shard) {
                    std::collections::btree_map::Entry::Occupied(o) => o.into_mut(),
                    std::collections::btree_map::Entry::Vacant(v) => v.insert(self.reader(shard)?),
                };
                r.read(idx)
            })
            .collect()
    }

    pub fn read_all(&self) -> Result<Vec<PixelMapPair>, DataError> {
        let mut out = Vec::with_capacity(self.len() as usize);
        for name in &self.manifest.shard_paths {
            out.extend(super::read_shard(&self.dir.join(name))?);
        }
        Ok(out)
    }

    /// `(event_id, truth)` for every record, without pixel data.
    pub fn truths(&self) -> Result<Vec<(u64, EventTruth)>, DataError> {
        let mut out = Vec::with_capacity(self.len() as usize);
        for shard in 0..self.manifest.shard_paths.len() {
            let mut r = self.reader(shard)?;
            for i in 0..r.record_count {
                out.push(r.read_truth(i)?);
            }
        }
        Ok(out)
    }

    /// Hex SHA-256 of the manifest, identifying the dataset's exact contents.
    pub fn manifest_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let body = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        super::hex(&Sha256::digest(&body))
    }

    /// Recomputes per-shard payload hashes and compares against the manifest.
    pub fn verify(&self) -> Result<(), DataError> {
        use sha2::{Digest, Sha256};
        for (name, want) in self.manifest.shard_paths.iter().zip(&self.manifest.shard_sha256) {
            let path = self.dir.join(name);
            let bytes = std::fs::read(&path).map_err(|e| DataError::io(&path, e))?;
            let got = super::hex(&Sha256::digest(&bytes[32..]));
            if &got != want {
                return Err(DataError::format(&path, "payload checksum mismatch"));
            }
        }
        Ok(())
    }
}

/// A subset of a dataset read lazily, one record at a time.
#[derive(Debug, Clone)]
pub struct Subset {
    pub dataset: Dataset,
    pub positions: Vec<u64>,
}

impl Subset {
    /// Selects records by event id.
    pub fn by_ids(dataset: Dataset, ids: &[u64]) -> Result<Self, DataError> {
        let index: BTreeMap<u64, u64> =
            dataset.truths()?.iter().enumerate().map(|(pos, (id, _))| (*id, pos as u64)).collect();
        let positions = ids
            .iter()
            .map(|id| {
                index.get(id).copied().ok_or_else(|| {
                    DataError::format(&dataset.dir, format!("event {id} is not in the dataset"))
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { dataset, positions })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn get(&self, index: usize) -> Result<PixelMapPair, DataError> {
        let pos = *self
            .positions
            .get(index)
            .ok_or_else(|| DataError::Config(format!("subset index {index} out of range ({})", self.len())))?;
        let (shard, idx) = self.dataset.locate(pos)?;
        self.dataset.reader(shard)?.read(idx)
    }

    pub fn read_all(&self) -> Result<Vec<PixelMapPair>, DataError> {
        self.dataset.read_many(&self.positions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eventgen::{generate_dataset, CompositionSpec, GeneratorConfig};

    fn config() -> GeneratorConfig {
        GeneratorConfig {
            geometry: DetectorGeometry { crop_size: 16, ..Default::default() },
            composition: CompositionSpec::default(),
            base_seed: 12,
        }
    }

    #[test]
    fn hundred_events_make_four_shards() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config();
        let m = write_dataset(generate_dataset(cfg.clone(), 100).unwrap(), 32, dir.path(), &cfg.geometry, 12).unwrap();
        assert_eq!(m.shard_counts, vec![32, 32, 32, 4]);
        assert_eq!(m.shard_paths.len(), 4);
        m.validate().unwrap();

        let ds = Dataset::open(dir.path()).unwrap();
        ds.verify().unwrap();
        let events = ds.read_all().unwrap();
        let original: Vec<_> = generate_dataset(cfg, 100).unwrap().map(|e| e.unwrap()).collect();
        assert_eq!(events, original);

        let mut census: BTreeMap<InteractionClass, u64> = BTreeMap::new();
        for e in &events {
            *census.entry(e.truth.interaction_class).or_default() += 1;
        }
        for c in InteractionClass::ALL {
            assert_eq!(census.get(&c).copied().unwrap_or(0), m.composition_counts[&c]);
        }
        assert_eq!(ds.read_many(&[33, 99, 0]).unwrap(), vec![original[33].clone(), original[99].clone(), original[0].clone()]);
        assert_eq!(ds.truths().unwrap()[50], (50, original[50].truth));
    }

    #[test]
    fn subset_reads_by_event_id() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config();
        write_dataset(generate_dataset(cfg.clone(), 40).unwrap(), 16, dir.path(), &cfg.geometry, 12).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let all = ds.read_all().unwrap();
        let sub = Subset::by_ids(ds.clone(), &[17, 3, 39]).unwrap();
        assert_eq!(sub.len(), 3);
        assert_eq!(sub.get(0).unwrap(), all[17]);
        assert_eq!(sub.read_all().unwrap(), vec![all[17].clone(), all[3].clone(), all[39].clone()]);
        assert!(sub.get(3).is_err());
        assert!(matches!(Subset::by_ids(ds, &[40]), Err(DataError::Format { .. })));
    }

    #[test]
    fn failure_leaves_no_manifest_or_shards() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config();
        let mut events: Vec<Result<PixelMapPair, EventGenError>> =
            generate_dataset(cfg.clone(), 40).unwrap().collect();
        events.push(Err(EventGenError::InvalidInput("boom".into())));
        assert!(write_dataset(events, 16, dir.path(), &cfg.geometry, 12).is_err());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn zero_shard_size_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config();
        assert!(write_dataset(generate_dataset(cfg.clone(), 3).unwrap(), 0, dir.path(), &cfg.geometry, 0).is_err());
    }
}
