//! Pre-extracted feature storage: a CSV manifest describing per-sample
//! records plus a flat little-endian f32 blob holding the vectors.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MANIFEST_HEADER: &str = "sample_id,identity,language,modality,dim,offset";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Face,
    Voice,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Face => "face",
            Modality::Voice => "voice",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "face" => Some(Modality::Face),
            "voice" => Some(Modality::Voice),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub sample_id: String,
    pub identity: String,
    pub language: String,
    pub modality: Modality,
    pub dim: usize,
    /// Offset into the blob in elements, not bytes.
    pub offset: usize,
}

#[derive(Debug, Clone)]
pub struct FeatureStore {
    records: Vec<SampleRecord>,
    blob: Vec<f32>,
    by_id: HashMap<String, usize>,
}

impl FeatureStore {
    pub fn new(records: Vec<SampleRecord>, blob: Vec<f32>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(records.len());
        let mut spans: Vec<(usize, usize, usize)> = Vec::with_capacity(records.len());
        for (idx, rec) in records.iter().enumerate() {
            if by_id.insert(rec.sample_id.clone(), idx).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate sample_id `{}`",
                    rec.sample_id
                )));
            }
            let end = rec.offset.checked_add(rec.dim).ok_or_else(|| {
                Error::InvalidArgument(format!("offset overflow in `{}`", rec.sample_id))
            })?;
            if end > blob.len() {
                return Err(Error::InvalidArgument(format!(
                    "record `{}` spans [{}, {end}) beyond blob of {} elements",
                    rec.sample_id,
                    rec.offset,
                    blob.len()
                )));
            }
            spans.push((rec.offset, end, idx));
        }
        spans.sort_unstable();
        for pair in spans.windows(2) {
            if pair[0].1 > pair[1].0 {
                return Err(Error::InvalidArgument(format!(
                    "records `{}` and `{}` overlap in the blob",
                    records[pair[0].2].sample_id, records[pair[1].2].sample_id
                )));
            }
        }
        Ok(FeatureStore {
            records,
            blob,
            by_id,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn blob(&self) -> &[f32] {
        &self.blob
    }

    pub fn record(&self, sample_id: &str) -> Result<&SampleRecord> {
        self.by_id
            .get(sample_id)
            .map(|&i| &self.records[i])
            .ok_or_else(|| Error::MissingSample(sample_id.to_string()))
    }

    /// Raw f32 feature vector of one sample.
    pub fn feature(&self, sample_id: &str) -> Result<&[f32]> {
        let rec = self.record(sample_id)?;
        Ok(&self.blob[rec.offset..rec.offset + rec.dim])
    }

    /// Feature vector widened to the computation scalar.
    pub fn feature_as<S: Scalar>(&self, sample_id: &str) -> Result<Vec<S>> {
        Ok(self
            .feature(sample_id)?
            .iter()
            .map(|&v| S::from_f64(v as f64))
            .collect())
    }

    /// Distinct identities in sorted order; the position defines the
    /// class label used during training.
    pub fn identities(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .records
            .iter()
            .map(|r| r.identity.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        ids.sort();
        ids
    }

    pub fn languages(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<String> =
            self.records.iter().map(|r| r.language.clone()).collect();
        set.into_iter().collect()
    }

    /// Restricts the store to an identity subset, rebasing blob offsets.
    pub fn subset_by_identity(&self, keep: &dyn Fn(&str) -> bool) -> Result<FeatureStore> {
        let mut records = Vec::new();
        let mut blob = Vec::new();
        for rec in &self.records {
            if keep(&rec.identity) {
                let mut r = rec.clone();
                r.offset = blob.len();
                blob.extend_from_slice(&self.blob[rec.offset..rec.offset + rec.dim]);
                records.push(r);
            }
        }
        FeatureStore::new(records, blob)
    }
}

/// Parses a manifest + blob pair from disk. Blob values stay f32; they are
/// widened at access time.
pub fn load_store(manifest_path: &Path, blob_path: &Path) -> Result<FeatureStore> {
    let manifest_name = manifest_path.display().to_string();
    let text = fs::read_to_string(manifest_path)?;
    let mut lines = text.lines().enumerate();

    let malformed = |line: usize, msg: String| Error::Malformed {
        path: manifest_name.clone(),
        line,
        msg,
    };

    match lines.next() {
        Some((_, header)) if header == MANIFEST_HEADER => {}
        Some((_, header)) => {
            return Err(malformed(
                1,
                format!("expected header `{MANIFEST_HEADER}`, got `{header}`"),
            ))
        }
        None => return Err(malformed(1, "empty manifest".into())),
    }

    let mut records = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(malformed(
                line_no,
                format!("expected 6 fields, got {}", fields.len()),
            ));
        }
        let modality = Modality::parse(fields[3])
            .ok_or_else(|| malformed(line_no, format!("unknown modality `{}`", fields[3])))?;
        let dim: usize = fields[4]
            .parse()
            .map_err(|_| malformed(line_no, format!("bad dim `{}`", fields[4])))?;
        let offset: usize = fields[5]
            .parse()
            .map_err(|_| malformed(line_no, format!("bad offset `{}`", fields[5])))?;
        records.push(SampleRecord {
            sample_id: fields[0].to_string(),
            identity: fields[1].to_string(),
            language: fields[2].to_string(),
            modality,
            dim,
            offset,
        });
    }

    let bytes = fs::read(blob_path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::InvalidArgument(format!(
            "blob {} has {} bytes, not a multiple of 4",
            blob_path.display(),
            bytes.len()
        )));
    }
    let blob: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    FeatureStore::new(records, blob)
}

/// Writes the exact external format; `load_store . save_store` is the
/// identity on both files.
pub fn save_store(store: &FeatureStore, manifest_path: &Path, blob_path: &Path) -> Result<()> {
    let mut manifest = String::with_capacity(64 * (store.len() + 1));
    manifest.push_str(MANIFEST_HEADER);
    manifest.push('\n');
    for rec in store.records() {
        manifest.push_str(&format!(
            "{},{},{},{},{},{}\n",
            rec.sample_id, rec.identity, rec.language, rec.modality, rec.dim, rec.offset
        ));
    }
    fs::write(manifest_path, manifest)?;

    let mut bytes = Vec::with_capacity(store.blob().len() * 4);
    for v in store.blob() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(blob_path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, identity: &str, dim: usize, offset: usize) -> SampleRecord {
        SampleRecord {
            sample_id: id.to_string(),
            identity: identity.to_string(),
            language: "L1".to_string(),
            modality: Modality::Face,
            dim,
            offset,
        }
    }

    #[test]
    fn empty_store_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let store = FeatureStore::new(vec![], vec![]).unwrap();
        let m = dir.path().join("m.csv");
        let b = dir.path().join("b.bin");
        save_store(&store, &m, &b).unwrap();
        let loaded = load_store(&m, &b).unwrap();
        assert!(loaded.is_empty());
        assert_eq!(fs::read_to_string(&m).unwrap(), format!("{MANIFEST_HEADER}\n"));
        assert!(fs::read(&b).unwrap().is_empty());
    }

    #[test]
    fn single_sample_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let store =
            FeatureStore::new(vec![rec("s0", "id0", 4, 0)], vec![0.25, -1.5, 3.75, 0.1]).unwrap();
        let m1 = dir.path().join("m1.csv");
        let b1 = dir.path().join("b1.bin");
        save_store(&store, &m1, &b1).unwrap();
        let loaded = load_store(&m1, &b1).unwrap();
        let m2 = dir.path().join("m2.csv");
        let b2 = dir.path().join("b2.bin");
        save_store(&loaded, &m2, &b2).unwrap();
        assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());
        assert_eq!(fs::read(&b1).unwrap(), fs::read(&b2).unwrap());
        assert_eq!(loaded.feature("s0").unwrap(), &[0.25, -1.5, 3.75, 0.1]);
    }

    #[test]
    fn out_of_bounds_record_names_the_sample() {
        let err = FeatureStore::new(vec![rec("s9", "id0", 4, 1)], vec![0.0; 4]).unwrap_err();
        assert!(err.to_string().contains("s9"), "{err}");
    }

    #[test]
    fn overlapping_records_are_rejected() {
        let err = FeatureStore::new(
            vec![rec("a", "id0", 3, 0), rec("b", "id1", 3, 2)],
            vec![0.0; 6],
        )
        .unwrap_err();
        assert!(err.to_string().contains("overlap"), "{err}");
    }

    #[test]
    fn duplicate_sample_ids_are_rejected() {
        let err = FeatureStore::new(
            vec![rec("a", "id0", 2, 0), rec("a", "id1", 2, 2)],
            vec![0.0; 4],
        )
        .unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.csv");
        let b = dir.path().join("b.bin");
        fs::write(&m, format!("{MANIFEST_HEADER}\nonly,three,fields\n")).unwrap();
        fs::write(&b, []).unwrap();
        let err = load_store(&m, &b).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    #[test]
    fn bad_modality_and_bad_numbers_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.csv");
        let b = dir.path().join("b.bin");
        fs::write(&m, format!("{MANIFEST_HEADER}\ns0,id0,L1,smell,4,0\n")).unwrap();
        fs::write(&b, [0u8; 16]).unwrap();
        assert!(load_store(&m, &b).unwrap_err().to_string().contains("smell"));

        fs::write(&m, format!("{MANIFEST_HEADER}\ns0,id0,L1,face,x,0\n")).unwrap();
        assert!(load_store(&m, &b).unwrap_err().to_string().contains("bad dim"));
    }

    #[test]
    fn subset_rebases_offsets() {
        let store = FeatureStore::new(
            vec![rec("a", "id0", 2, 0), rec("b", "id1", 2, 2)],
            vec![1.0, 2.0, 3.0, 4.0],
        )
        .unwrap();
        let sub = store.subset_by_identity(&|id| id == "id1").unwrap();
        assert_eq!(sub.len(), 1);
        assert_eq!(sub.feature("b").unwrap(), &[3.0, 4.0]);
        assert_eq!(sub.record("b").unwrap().offset, 0);
    }

    #[test]
    fn identities_are_sorted_and_unique() {
        let store = FeatureStore::new(
            vec![rec("a", "idB", 1, 0), rec("b", "idA", 1, 1), rec("c", "idB", 1, 2)],
            vec![0.0; 3],
        )
        .unwrap();
        assert_eq!(store.identities(), vec!["idA", "idB"]);
    }
}
