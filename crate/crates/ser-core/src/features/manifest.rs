//! Dataset manifest: CSV with columns `path,label,speaker,utterance_id`.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SerError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    pub speaker: String,
    pub utterance_id: String,
}

/// Parse a manifest file. Rows with unparseable labels or labels outside
/// `[0, num_classes)` are collected into one error report listing every bad
/// row.
pub fn read_manifest(path: &Path, num_classes: usize) -> Result<Vec<ManifestEntry>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| SerError::Data(format!("cannot open manifest {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));

    let mut entries = Vec::new();
    let mut row_errors = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2; // 1-based, after the header
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                row_errors.push(format!("row {row}: {e}"));
                continue;
            }
        };
        if record.len() < 4 {
            row_errors.push(format!("row {row}: expected 4 columns, got {}", record.len()));
            continue;
        }
        let label: usize = match record[1].parse() {
            Ok(l) => l,
            Err(_) => {
                row_errors.push(format!("row {row}: unknown label `{}`", &record[1]));
                continue;
            }
        };
        if label >= num_classes {
            row_errors.push(format!(
                "row {row}: label {label} outside [0, {num_classes})"
            ));
            continue;
        }
        let rel = PathBuf::from(&record[0]);
        let path = if rel.is_absolute() { rel } else { base.join(rel) };
        entries.push(ManifestEntry {
            path,
            label,
            speaker: record[2].to_string(),
            utterance_id: record[3].to_string(),
        });
    }
    if !row_errors.is_empty() {
        return Err(SerError::Data(format!(
            "manifest {} has {} bad rows:\n{}",
            path.display(),
            row_errors.len(),
            row_errors.join("\n")
        )));
    }
    if entries.is_empty() {
        return Err(SerError::Data(format!(
            "manifest {} contains no usable rows",
            path.display()
        )));
    }
    Ok(entries)
}

/// Write entries back out as a manifest CSV. Paths are absolutized so the
/// manifest stays valid wherever it is written.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| SerError::Data(format!("cannot write manifest {}: {e}", path.display())))?;
    w.write_record(["path", "label", "speaker", "utterance_id"])
        .map_err(|e| SerError::Data(e.to_string()))?;
    for e in entries {
        let abs = if e.path.is_absolute() {
            e.path.clone()
        } else {
            std::path::absolute(&e.path)?
        };
        w.write_record([
            abs.to_string_lossy().as_ref(),
            &e.label.to_string(),
            &e.speaker,
            &e.utterance_id,
        ])
        .map_err(|e| SerError::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| SerError::Data(e.to_string()))?;
    Ok(())
}

/// Seeded random 80/20 split at utterance level. Entries are first put into
/// a stable order (by utterance id) so the split depends only on the seed
/// and the id set; segments of one utterance can never straddle the split.
pub fn split_80_20(entries: &[ManifestEntry], seed: u64) -> (Vec<ManifestEntry>, Vec<ManifestEntry>) {
    let mut sorted: Vec<ManifestEntry> = entries.to_vec();
    sorted.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let n_train = sorted.len() * 4 / 5;
    let test = sorted.split_off(n_train);
    (sorted, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("ser_manifest_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(format!("m_{}.csv", std::process::id()));
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        path
    }

    #[test]
    fn parses_and_resolves_relative_paths() {
        let path = write_tmp("path,label,speaker,utterance_id\na/b.wav,2,spk1,utt1\n");
        let entries = read_manifest(&path, 4).unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].label, 2);
        assert!(entries[0].path.ends_with("a/b.wav"));
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn reports_every_bad_row() {
        let path = write_tmp(
            "path,label,speaker,utterance_id\nx.wav,bad,s,u1\ny.wav,9,s,u2\nz.wav,1,s,u3\n",
        );
        let err = read_manifest(&path, 4).unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");
        assert!(err.contains("row 3"), "{err}");
        assert!(err.contains("2 bad rows"), "{err}");
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let entries: Vec<ManifestEntry> = (0..10)
            .map(|i| ManifestEntry {
                path: PathBuf::from(format!("{i}.wav")),
                label: i % 4,
                speaker: "s".into(),
                utterance_id: format!("utt{i:02}"),
            })
            .collect();
        let (tr1, te1) = split_80_20(&entries, 7);
        let (tr2, te2) = split_80_20(&entries, 7);
        assert_eq!(tr1, tr2);
        assert_eq!(te1, te2);
        assert_eq!(tr1.len(), 8);
        assert_eq!(te1.len(), 2);
        let (tr3, _) = split_80_20(&entries, 8);
        assert_ne!(tr1, tr3, "different seed should reshuffle");
        for e in &te1 {
            assert!(!tr1.contains(e));
        }
    }
}
