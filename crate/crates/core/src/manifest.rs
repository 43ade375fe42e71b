//! Dataset manifests and per-epoch slice pairing.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::volume::{extract_slice, load_volume, normalize, SliceImage, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    TestNormal,
    TestAnomalySource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub test_normal: f64,
    pub test_anomaly_source: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.6,
            test_normal: 0.1,
            test_anomaly_source: 0.3,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.test_normal, self.test_anomaly_source];
        if all.iter().any(|f| !(0.0..=1.0).contains(f)) || (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split fractions must be in [0,1] and sum to 1, got {all:?}"
            )));
        }
        Ok(())
    }

    /// Assigns a split to each of `n` items. Test counts are rounded, the
    /// training split takes the remainder; membership is a seeded shuffle.
    pub fn assign(&self, n: usize, rng: &mut SeededRng) -> Result<Vec<Split>> {
        self.validate()?;
        let n_normal = (self.test_normal * n as f64).round() as usize;
        let n_anomaly = ((self.test_anomaly_source * n as f64).round() as usize).min(n - n_normal.min(n));
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let mut splits = vec![Split::Train; n];
        for (rank, &item) in order.iter().enumerate() {
            if rank < n_normal {
                splits[item] = Split::TestNormal;
            } else if rank < n_normal + n_anomaly {
                splits[item] = Split::TestAnomalySource;
            }
        }
        Ok(splits)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Payload path, relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(default)]
    pub fractions: SplitFractions,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    root: PathBuf,
}

impl DatasetManifest {
    pub fn new(fractions: SplitFractions, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self {
            fractions,
            entries,
            root: PathBuf::new(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.fractions.validate()?;
        let mut ids: Vec<&str> = self.entries.iter().map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidData(format!(
                "volume id {:?} listed more than once",
                w[0]
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Loads and min-max normalizes every volume in `split`, in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<Volume>> {
        self.split(split)
            .map(|e| {
                let v = load_volume(&self.resolve(e))?;
                Ok(normalize(&v)?.with_id(e.id.clone()))
            })
            .collect()
    }
}

/// Slice `slice` of volume `a` paired with slice `slice` of volume `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SlicePairIndex {
    pub a: usize,
    pub b: usize,
    pub slice: usize,
}

/// Shuffles `n` volumes into disjoint pairs. With an odd count the leftover
/// volume is paired with a randomly chosen other volume.
pub fn pair_volumes(n: usize, rng: &mut SeededRng) -> Result<Vec<(usize, usize)>> {
    if n < 2 {
        return Err(Error::InvalidData(format!(
            "pairing needs at least two volumes, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut pairs: Vec<(usize, usize)> = order.chunks_exact(2).map(|c| (c[0], c[1])).collect();
    if n % 2 == 1 {
        let last = order[n - 1];
        let partner = order[rng.below(n - 1)];
        pairs.push((last, partner));
    }
    Ok(pairs)
}

/// Slice pairs for one epoch, in shuffled order. Within a pair both slices
/// share the same axis-0 index.
pub fn pair_indices(volumes: &[Volume], epoch_seed: u64) -> Result<Vec<SlicePairIndex>> {
    if let Some(first) = volumes.first() {
        if let Some(v) = volumes.iter().find(|v| v.shape() != first.shape()) {
            return Err(Error::ShapeMismatch(format!(
                "volume {} has shape {:?}, expected {:?}",
                v.id(),
                v.shape(),
                first.shape()
            )));
        }
    }
    let mut rng = SeededRng::new(epoch_seed);
    let pairs = pair_volumes(volumes.len(), &mut rng)?;
    let depth = volumes[0].shape()[0];
    let mut out: Vec<SlicePairIndex> = pairs
        .iter()
        .flat_map(|&(a, b)| (0..depth).map(move |slice| SlicePairIndex { a, b, slice }))
        .collect();
    rng.shuffle(&mut out);
    Ok(out)
}

pub fn materialize_pair(volumes: &[Volume], idx: SlicePairIndex) -> Result<(SliceImage, SliceImage)> {
    Ok((
        extract_slice(&volumes[idx.a], 0, idx.slice)?,
        extract_slice(&volumes[idx.b], 0, idx.slice)?,
    ))
}

pub fn pair_slices(volumes: &[Volume], epoch_seed: u64) -> Result<Vec<(SliceImage, SliceImage)>> {
    pair_indices(volumes, epoch_seed)?
        .into_iter()
        .map(|idx| materialize_pair(volumes, idx))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn ramp_volumes(n: usize, depth: usize) -> Vec<Volume> {
        (0..n)
            .map(|v| {
                let vox = (0..depth * 8 * 8).map(|x| (x + 1000 * v) as f32).collect();
                Volume::new(format!("v{v}"), [depth, 8, 8], vox).unwrap()
            })
            .collect()
    }

    #[test]
    fn two_volumes_give_matching_slices() {
        let vols = ramp_volumes(2, 4);
        let pairs = pair_slices(&vols, 11).unwrap();
        assert_eq!(pairs.len(), 4);
        for (a, b) in &pairs {
            assert_eq!(a.source.index, b.source.index);
            assert_ne!(a.source.volume_id, b.source.volume_id);
        }
        let mut ks: Vec<usize> = pairs.iter().map(|p| p.0.source.index).collect();
        ks.sort_unstable();
        assert_eq!(ks, vec![0, 1, 2, 3]);
    }

    #[test]
    fn pairing_is_deterministic_and_seed_dependent() {
        let vols = ramp_volumes(10, 3);
        assert_eq!(pair_indices(&vols, 5).unwrap(), pair_indices(&vols, 5).unwrap());
        assert_ne!(pair_indices(&vols, 5).unwrap(), pair_indices(&vols, 6).unwrap());
    }

    #[test]
    fn never_self_paired_including_odd_counts() {
        for n in 2..12 {
            for seed in 0..20 {
                let pairs = pair_volumes(n, &mut SeededRng::new(seed)).unwrap();
                assert!(pairs.iter().all(|(a, b)| a != b));
                let covered: HashSet<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
                assert_eq!(covered.len(), n);
            }
        }
    }

    #[test]
    fn fewer_than_two_volumes_is_an_error() {
        assert!(pair_indices(&ramp_volumes(1, 4), 0).is_err());
        assert!(pair_indices(&[], 0).is_err());
    }

    /// Fraction of volume pairings that were already seen in an earlier epoch,
    /// for 100 volumes over 50 epochs, against the uniform perfect-matching
    /// expectation. The spread comes from an independent simulation with its
    /// own xorshift generator and textbook Fisher-Yates.
    #[test]
    fn repeated_pairings_match_uniform_expectation() {
        fn repeats(mut matching: impl FnMut(u64) -> Vec<(usize, usize)>) -> usize {
            let mut seen = HashSet::new();
            let mut rep = 0;
            for e in 0..50u64 {
                for (a, b) in matching(e) {
                    if !seen.insert((a.min(b), a.max(b))) {
                        rep += 1;
                    }
                }
            }
            rep
        }
        let n = 100usize;
        // P(a given pair co-occurs in a uniform perfect matching) = 1/(n-1).
        let p = 1.0 / (n as f64 - 1.0);
        let expected: f64 = (0..50).map(|e| 50.0 * (1.0 - (1.0 - p).powi(e))).sum();

        let mut state = 0x1234_5678_9abc_def1u64;
        let mut xorshift = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        let sims: Vec<f64> = (0..300)
            .map(|_| {
                repeats(|_| {
                    let mut order: Vec<usize> = (0..n).collect();
                    for i in (1..n).rev() {
                        let j = (xorshift() % (i as u64 + 1)) as usize;
                        order.swap(i, j);
                    }
                    order.chunks(2).map(|c| (c[0], c[1])).collect()
                }) as f64
            })
            .collect();
        let mean = sims.iter().sum::<f64>() / sims.len() as f64;
        let var = sims.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (sims.len() - 1) as f64;
        let sigma = var.sqrt();
        assert!((mean - expected).abs() < 3.0 * sigma / (sims.len() as f64).sqrt() + 1.0);

        let ours = repeats(|e| pair_volumes(n, &mut SeededRng::new(1000 + e)).unwrap()) as f64;
        assert!(
            (ours - expected).abs() <= 3.0 * sigma,
            "repeats {ours}, expected {expected:.1} +- {sigma:.2}"
        );
    }

    #[test]
    fn default_split_is_60_10_30() {
        let splits = SplitFractions::default()
            .assign(100, &mut SeededRng::new(1))
            .unwrap();
        let count = |s| splits.iter().filter(|&&x| x == s).count();
        assert_eq!(count(Split::Train), 60);
        assert_eq!(count(Split::TestNormal), 10);
        assert_eq!(count(Split::TestAnomalySource), 30);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let e = ManifestEntry {
            id: "a".into(),
            path: "a.raw".into(),
            split: Split::Train,
        };
        let mut e2 = e.clone();
        e2.split = Split::TestNormal;
        assert!(DatasetManifest::new(SplitFractions::default(), vec![e, e2]).is_err());
    }

    #[test]
    fn manifest_round_trip_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let vols = ramp_volumes(2, 8);
        let mut entries = Vec::new();
        for (i, v) in vols.iter().enumerate() {
            let rel = PathBuf::from(format!("{}.raw", v.id()));
            crate::volume::save_volume(v, &dir.path().join(&rel)).unwrap();
            entries.push(ManifestEntry {
                id: v.id().into(),
                path: rel,
                split: if i == 0 { Split::Train } else { Split::TestNormal },
            });
        }
        let m = DatasetManifest::new(SplitFractions::default(), entries).unwrap();
        let mpath = dir.path().join("manifest.json");
        m.save(&mpath).unwrap();
        let back = DatasetManifest::load(&mpath).unwrap();
        assert_eq!(back.entries, m.entries);
        let train = back.load_split(Split::Train).unwrap();
        assert_eq!(train.len(), 1);
        let (lo, hi) = train[0].min_max();
        assert_eq!((lo, hi), (0.0, 1.0));
    }
}
