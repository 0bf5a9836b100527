use std::fs;
use std::path::Path;

use super::{generate_phantom, save_mask, save_volume, DatasetManifest, ManifestEntry, PhantomConfig, Split};
use crate::error::{Error, Result};

/// Seed of the `index`-th phantom in a dataset generated with `seed`.
pub fn phantom_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

/// Writes `count` phantoms, their masks and contrast-inverted twins under
/// `out`, plus `manifest.json` listing both sequences. Every entry starts in
/// the training split; the twin shares its phantom's patient id and mask.
pub fn generate_dataset(out: &Path, count: usize, seed: u64, cfg: &PhantomConfig) -> Result<DatasetManifest> {
    if count == 0 {
        return Err(Error::Invalid("phantom count must be positive".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut entries = Vec::with_capacity(2 * count);
    for i in 0..count {
        let p = generate_phantom(phantom_seed(seed, i), cfg)?;
        let stem = format!("phantom_{i:03}");
        let mask = format!("{stem}_mask.json");
        save_volume(&p.volume, out.join(format!("{stem}_t1.json")))?;
        save_volume(&p.twin, out.join(format!("{stem}_t2sim.json")))?;
        save_mask(&p.mask, &p.volume, out.join(&mask))?;
        for (v, file) in [(&p.volume, "t1"), (&p.twin, "t2sim")] {
            entries.push(ManifestEntry {
                volume: out.join(format!("{stem}_{file}.json")),
                mask: out.join(&mask),
                patient_id: v.patient_id.clone(),
                location_tag: v.location_tag.clone(),
                sequence_tag: v.sequence_tag.clone(),
                split: Split::Train,
            });
        }
    }
    let m = DatasetManifest { entries };
    m.save(out.join("manifest.json"))?;
    DatasetManifest::load(out.join("manifest.json"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{load_mask, load_volume};

    #[test]
    fn writes_pairs_twins_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PhantomConfig {
            shape: [8, 24, 24],
            size_range_mm: (3.0, 4.0),
            length_range_mm: (6.0, 8.0),
            margin_mm: 1.0,
            min_objects: 1,
            max_objects: 2,
            ..PhantomConfig::default()
        };
        let m = generate_dataset(dir.path(), 3, 7, &cfg).unwrap();
        assert_eq!(m.entries.len(), 6);
        assert_eq!(m.select(Split::Train, Some("t1")).len(), 3);
        for e in &m.entries {
            let v = load_volume(&e.volume).unwrap();
            let (mask, _) = load_mask(&e.mask).unwrap();
            mask.check_pair(&v).unwrap();
        }
        m.check_patient_partition().unwrap();
    }
}
