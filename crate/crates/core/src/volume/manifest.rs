use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub volume: PathBuf,
    pub mask: PathBuf,
    pub patient_id: String,
    pub location_tag: String,
    pub sequence_tag: String,
    pub split: Split,
}

/// Absolute directory holding a manifest file.
fn manifest_dir(path: &Path) -> Option<PathBuf> {
    let dir = path.parent()?;
    let dir = if dir.as_os_str().is_empty() { Path::new(".") } else { dir };
    Some(dir.canonicalize().unwrap_or_else(|_| dir.to_path_buf()))
}

/// The on-disk manifest is a plain JSON list of entries.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        // Relative paths resolve against the manifest's directory.
        if let Some(dir) = manifest_dir(path) {
            for e in &mut m.entries {
                if e.volume.is_relative() {
                    e.volume = dir.join(&e.volume);
                }
                if e.mask.is_relative() {
                    e.mask = dir.join(&e.mask);
                }
            }
        }
        Ok(m)
    }

    /// Paths under the manifest's directory are stored relative to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = self.clone();
        if let Some(dir) = manifest_dir(path) {
            let rel = |p: &Path| {
                let abs = if p.is_relative() { std::env::current_dir().map(|c| c.join(p)).unwrap_or(p.to_path_buf()) } else { p.to_path_buf() };
                abs.strip_prefix(&dir).map(Path::to_path_buf).unwrap_or(abs)
            };
            for e in &mut out.entries {
                e.volume = rel(&e.volume);
                e.mask = rel(&e.mask);
            }
        }
        let text = serde_json::to_string_pretty(&out)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Entries of `split`, optionally restricted to one sequence tag.
    pub fn select(&self, split: Split, sequence: Option<&str>) -> Vec<ManifestEntry> {
        self.split(split)
            .filter(|e| sequence.map_or(true, |s| e.sequence_tag == s))
            .cloned()
            .collect()
    }

    /// Checks that no patient appears in more than one split.
    pub fn check_patient_partition(&self) -> Result<()> {
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for e in &self.entries {
            if let Some(prev) = seen.insert(&e.patient_id, e.split) {
                if prev != e.split {
                    return Err(Error::Invalid(format!(
                        "patient {} appears in {:?} and {:?}",
                        e.patient_id, prev, e.split
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Self {
        SplitRatios { train, val, test }
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

/// Patient counts per split by largest remainder, with every nonempty ratio
/// receiving at least one patient.
fn allocate(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    let nonempty = ratios.iter().filter(|&&r| r > 0.0).count();
    if n < nonempty {
        return Err(Error::Invalid(format!(
            "{n} patients cannot fill {nonempty} nonempty splits"
        )));
    }
    let exact = ratios.map(|r| r * n as f64);
    let mut counts = exact.map(|x| x.floor() as usize);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut remaining = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            counts[i] += 1;
            remaining -= 1;
        }
    }
    for i in 0..3 {
        if ratios[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| counts[j]).unwrap();
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    Ok(counts)
}

/// Reassigns splits by patient so that no patient spans two splits.
pub fn split_dataset(
    manifest: &DatasetManifest,
    ratios: SplitRatios,
    seed: u64,
) -> Result<DatasetManifest> {
    let r = ratios.as_array();
    if r.iter().any(|&x| !(x >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::Invalid(format!("split ratios must be >= 0 and sum to 1, got {r:?}")));
    }
    let patients: BTreeSet<&str> = manifest.entries.iter().map(|e| e.patient_id.as_str()).collect();
    let mut patients: Vec<&str> = patients.into_iter().collect();
    let counts = allocate(patients.len(), r)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);
    let mut assignment: BTreeMap<&str, Split> = BTreeMap::new();
    let mut it = patients.into_iter();
    for (split, &count) in Split::ALL.iter().zip(counts.iter()) {
        for p in it.by_ref().take(count) {
            assignment.insert(p, *split);
        }
    }
    let entries = manifest
        .entries
        .iter()
        .map(|e| ManifestEntry {
            split: assignment[e.patient_id.as_str()],
            ..e.clone()
        })
        .collect();
    Ok(DatasetManifest { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(patients: usize, per_patient: usize) -> DatasetManifest {
        let mut entries = Vec::new();
        for p in 0..patients {
            for v in 0..per_patient {
                entries.push(ManifestEntry {
                    volume: format!("p{p}_v{v}").into(),
                    mask: format!("p{p}_v{v}_mask").into(),
                    patient_id: format!("p{p}"),
                    location_tag: "knee".into(),
                    sequence_tag: "t1".into(),
                    split: Split::Train,
                });
            }
        }
        DatasetManifest { entries }
    }

    fn patient_counts(m: &DatasetManifest) -> [usize; 3] {
        Split::ALL.map(|s| {
            m.split(s)
                .map(|e| e.patient_id.clone())
                .collect::<BTreeSet<_>>()
                .len()
        })
    }

    #[test]
    fn ten_patients_eight_one_one() {
        let out = split_dataset(&manifest(10, 1), SplitRatios::new(0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!(patient_counts(&out), [8, 1, 1]);
    }

    #[test]
    fn multi_volume_patient_stays_together() {
        let out = split_dataset(&manifest(7, 3), SplitRatios::new(0.6, 0.2, 0.2), 9).unwrap();
        out.check_patient_partition().unwrap();
        for p in 0..7 {
            let splits: BTreeSet<_> = out
                .entries
                .iter()
                .filter(|e| e.patient_id == format!("p{p}"))
                .map(|e| e.split)
                .collect();
            assert_eq!(splits.len(), 1);
        }
    }

    #[test]
    fn same_seed_same_assignment() {
        let m = manifest(20, 2);
        let r = SplitRatios::new(0.7, 0.15, 0.15);
        assert_eq!(split_dataset(&m, r, 1).unwrap(), split_dataset(&m, r, 1).unwrap());
    }

    #[test]
    fn too_few_patients_is_an_error() {
        assert!(split_dataset(&manifest(2, 1), SplitRatios::new(0.5, 0.25, 0.25), 0).is_err());
        assert!(split_dataset(&manifest(5, 1), SplitRatios::new(0.5, 0.2, 0.2), 0).is_err());
    }

    #[test]
    fn acceptance_sized_split() {
        let out =
            split_dataset(&manifest(46, 2), SplitRatios::new(30.0 / 46.0, 8.0 / 46.0, 8.0 / 46.0), 7)
                .unwrap();
        assert_eq!(patient_counts(&out), [30, 8, 8]);
    }

    proptest::proptest! {
        #[test]
        fn partition_holds_for_any_split(patients in 3usize..40, per in 1usize..4, seed in 0u64..1000,
                                         a in 0.2f64..0.8) {
            let rest = 1.0 - a;
            let out = split_dataset(&manifest(patients, per), SplitRatios::new(a, rest / 2.0, rest / 2.0), seed).unwrap();
            proptest::prop_assert!(out.check_patient_partition().is_ok());
            proptest::prop_assert_eq!(patient_counts(&out).iter().sum::<usize>(), patients);
        }
    }

    #[test]
    fn save_stores_paths_relative_to_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().canonicalize().unwrap();
        let m = DatasetManifest {
            entries: vec![ManifestEntry {
                volume: root.join("a_t1.json"),
                mask: root.join("a_mask.json"),
                patient_id: "a".into(),
                location_tag: "knee".into(),
                sequence_tag: "t1".into(),
                split: Split::Train,
            }],
        };
        let p = root.join("manifest.json");
        m.save(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"a_t1.json\""), "{text}");
        assert_eq!(DatasetManifest::load(&p).unwrap(), m);
        m.save(&p).unwrap();
        DatasetManifest::load(&p).unwrap().save(&p).unwrap();
        assert_eq!(DatasetManifest::load(&p).unwrap(), m);
    }
}
