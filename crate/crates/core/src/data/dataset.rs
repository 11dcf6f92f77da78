use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mvol::{load_labels, load_volume, write_atomic};
use super::volume::{central_slices, normalize_01, NormRecord, Volume};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::tensor::{Dims, Tensor4};

/// One manifest row. Paths are relative to the manifest's directory unless
/// absolute.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub lf_path: PathBuf,
    pub hf_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let entries: Vec<ManifestEntry> = serde_json::from_slice(&fs::read(path)?)?;
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return contract_err(format!(
                    "duplicate subject id {} in {}",
                    e.id,
                    path.display()
                ));
            }
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(&self.entries)?;
        s.push('\n');
        write_atomic(path, s.as_bytes())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }

    pub fn load_subject(&self, entry: &ManifestEntry) -> Result<SubjectVolume> {
        let lf = load_volume(&self.resolve(&entry.lf_path))?;
        let hf = load_volume(&self.resolve(&entry.hf_path))?;
        if lf.dims() != hf.dims() {
            return shape_err(format!(
                "subject {}: LF dims {:?} differ from HF dims {:?}",
                entry.id,
                lf.dims(),
                hf.dims()
            ));
        }
        let labels = match &entry.labels_path {
            Some(p) => {
                let l = load_labels(&self.resolve(p))?;
                if l.dims() != hf.dims() {
                    return shape_err(format!(
                        "subject {}: label dims {:?} differ from {:?}",
                        entry.id,
                        l.dims(),
                        hf.dims()
                    ));
                }
                Some(l)
            }
            None => None,
        };
        Ok(SubjectVolume {
            id: entry.id.clone(),
            lf,
            hf,
            labels,
        })
    }

    pub fn load_subjects(&self, ids: &[String]) -> Result<Vec<SubjectVolume>> {
        ids.iter()
            .map(|id| {
                let e = self
                    .entry(id)
                    .ok_or_else(|| Error::Contract(format!("subject {id} not in manifest")))?;
                self.load_subject(e)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectVolume {
    pub id: String,
    pub lf: Volume<f32>,
    pub hf: Volume<f32>,
    pub labels: Option<Volume<u16>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded shuffle of `ids`, then the first `train`, next `val`, next `test`.
pub fn split_subjects(
    ids: &[String],
    counts: (usize, usize, usize),
    seed: u64,
) -> Result<SplitSpec> {
    let (a, b, c) = counts;
    if a + b + c > ids.len() {
        return contract_err(format!(
            "split {a}/{b}/{c} needs {} subjects, have {}",
            a + b + c,
            ids.len()
        ));
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(SplitSpec {
        train: order[..a].to_vec(),
        val: order[a..a + b].to_vec(),
        test: order[a + b..a + b + c].to_vec(),
    })
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Extends an `h x w` image to `ph x pw` by reflecting at the bottom and
/// right edges.
pub fn pad_reflect(img: &[f32], h: usize, w: usize, ph: usize, pw: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(ph * pw);
    for r in 0..ph {
        let row = &img[reflect(r, h) * w..][..w];
        out.extend((0..pw).map(|c| row[reflect(c, w)]));
    }
    out
}

pub fn crop(img: &[f32], pw: usize, h: usize, w: usize) -> Vec<f32> {
    (0..h)
        .flat_map(|r| img[r * pw..r * pw + w].iter().copied())
        .collect()
}

pub fn padded_size(n: usize, multiple: usize) -> usize {
    n.div_ceil(multiple) * multiple
}

/// Paired, normalized, padded 2-D training slices.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSet {
    /// Padded dims.
    pub h: usize,
    pub w: usize,
    pub orig_h: usize,
    pub orig_w: usize,
    pub lf: Vec<Vec<f32>>,
    pub hf: Vec<Vec<f32>>,
}

/// One mini-batch as `(n, 1, h, w)` tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub lf: Tensor4<f32>,
    pub hf: Tensor4<f32>,
    pub indices: Vec<usize>,
}

impl SliceSet {
    /// Pads unpadded `h x w` slice pairs to a multiple of `multiple`.
    pub fn from_pairs(
        h: usize,
        w: usize,
        lf: Vec<Vec<f32>>,
        hf: Vec<Vec<f32>>,
        multiple: usize,
    ) -> Result<Self> {
        if lf.len() != hf.len() {
            return shape_err(format!("{} LF slices but {} HF slices", lf.len(), hf.len()));
        }
        if lf.iter().chain(&hf).any(|s| s.len() != h * w) {
            return shape_err(format!("slices must hold {h}x{w} values"));
        }
        let (ph, pw) = (padded_size(h, multiple), padded_size(w, multiple));
        let pad = |v: Vec<Vec<f32>>| -> Vec<Vec<f32>> {
            if (ph, pw) == (h, w) {
                v
            } else {
                v.iter().map(|s| pad_reflect(s, h, w, ph, pw)).collect()
            }
        };
        Ok(Self {
            h: ph,
            w: pw,
            orig_h: h,
            orig_w: w,
            lf: pad(lf),
            hf: pad(hf),
        })
    }

    /// Normalizes each subject volume to `[0, 1]` and collects its slices,
    /// optionally only the `keep` central ones.
    pub fn from_subjects(
        subjects: &[SubjectVolume],
        keep: Option<usize>,
        multiple: usize,
    ) -> Result<Self> {
        let Some(first) = subjects.first() else {
            return contract_err("no subjects to build slices from");
        };
        let (h, w) = first.hf.slice_dims();
        let (mut lf, mut hf) = (Vec::new(), Vec::new());
        for s in subjects {
            if s.hf.slice_dims() != (h, w) {
                return shape_err(format!(
                    "subject {} has {:?} slices, expected {h}x{w}",
                    s.id,
                    s.hf.slice_dims()
                ));
            }
            let (a, b) = match keep {
                Some(k) => central_slices(s.hf.slices(), k)?,
                None => (0, s.hf.slices() - 1),
            };
            let (nl, _) = normalize_01(&s.lf);
            let (nh, _) = normalize_01(&s.hf);
            for i in a..=b {
                lf.push(nl.slice(i).to_vec());
                hf.push(nh.slice(i).to_vec());
            }
        }
        Self::from_pairs(h, w, lf, hf, multiple)
    }

    pub fn len(&self) -> usize {
        self.lf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lf.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let dims = Dims::new(indices.len(), 1, self.h, self.w);
        let gather = |src: &[Vec<f32>]| -> Vec<f32> {
            indices
                .iter()
                .flat_map(|&i| src[i].iter().copied())
                .collect()
        };
        Ok(Batch {
            lf: Tensor4::from_vec(dims, gather(&self.lf))?,
            hf: Tensor4::from_vec(dims, gather(&self.hf))?,
            indices: indices.to_vec(),
        })
    }

    /// Crops a padded slice back to the original dims.
    pub fn crop(&self, padded: &[f32]) -> Vec<f32> {
        crop(padded, self.w, self.orig_h, self.orig_w)
    }
}

/// Index groups of at most `batch_size`, seeded-shuffled when `seed` is
/// given. The final batch may be short.
pub fn batch_order(len: usize, batch_size: usize, seed: Option<u64>) -> Result<Vec<Vec<usize>>> {
    if len == 0 {
        return contract_err("cannot batch an empty split");
    }
    if batch_size == 0 {
        return contract_err("batch size must be at least 1");
    }
    let mut idx: Vec<usize> = (0..len).collect();
    if let Some(s) = seed {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
    }
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn make_batches(set: &SliceSet, batch_size: usize, seed: Option<u64>) -> Result<Vec<Batch>> {
    batch_order(set.len(), batch_size, seed)?
        .iter()
        .map(|ix| set.batch(ix))
        .collect()
}

/// Normalization records of a subject's LF and HF volumes.
pub fn subject_records(s: &SubjectVolume) -> (NormRecord, NormRecord) {
    (normalize_01(&s.lf).1, normalize_01(&s.hf).1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:02}")).collect()
    }

    #[test]
    fn split_sizes_22_6_11() {
        let s = split_subjects(&ids(39), (22, 6, 11), 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (22, 6, 11));
        assert_eq!(s, split_subjects(&ids(39), (22, 6, 11), 0).unwrap());
        assert!(split_subjects(&ids(5), (3, 2, 1), 0).is_err());
    }

    #[test]
    fn batches_of_ten_by_four() {
        let b = batch_order(10, 4, None).unwrap();
        let sizes: Vec<_> = b.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert!(batch_order(0, 4, None).is_err());
    }

    #[test]
    fn epoch_seeds_permute_same_multiset() {
        let a: Vec<usize> = batch_order(30, 8, Some(1)).unwrap().concat();
        let b: Vec<usize> = batch_order(30, 8, Some(2)).unwrap().concat();
        assert_ne!(a, b);
        let (mut sa, mut sb) = (a.clone(), b.clone());
        sa.sort();
        sb.sort();
        assert_eq!(sa, sb);
        assert_eq!(sa, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn reflect_pad_values() {
        let img = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let p = pad_reflect(&img, 2, 3, 4, 5);
        assert_eq!(&p[..5], &[1.0, 2.0, 3.0, 2.0, 1.0]);
        assert_eq!(&p[5..10], &[4.0, 5.0, 6.0, 5.0, 4.0]);
        assert_eq!(&p[10..15], &[1.0, 2.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn slice_set_batches_carry_pairs() {
        let lf = vec![vec![0.1f32; 36], vec![0.2; 36]];
        let hf = vec![vec![0.3f32; 36], vec![0.4; 36]];
        let s = SliceSet::from_pairs(6, 6, lf, hf, 8).unwrap();
        assert_eq!((s.h, s.w), (8, 8));
        let b = s.batch(&[1, 0]).unwrap();
        assert_eq!(b.lf.dims(), Dims::new(2, 1, 8, 8));
        assert_eq!(b.lf.sample(0)[0], 0.2);
        assert_eq!(b.hf.sample(1)[63], 0.3);
    }

    #[test]
    fn manifest_round_trip_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            root: dir.path().to_path_buf(),
            entries: vec![ManifestEntry {
                id: "a".into(),
                lf_path: "a_lf.mvol".into(),
                hf_path: "a_hf.mvol".into(),
                labels_path: None,
            }],
        };
        let p = dir.path().join("manifest.json");
        m.save(&p).unwrap();
        let back = Manifest::load(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(
            back.resolve(Path::new("a_lf.mvol")),
            dir.path().join("a_lf.mvol")
        );
        fs::write(&p, r#"[{"id":"a","lf_path":"x","hf_path":"y","extra":1}]"#).unwrap();
        assert!(Manifest::load(&p).is_err());
    }

    proptest! {
        #[test]
        fn pad_then_crop_is_identity(h in 1usize..20, w in 1usize..20, m in prop::sample::select(vec![1usize, 2, 4, 8])) {
            let img: Vec<f32> = (0..h * w).map(|i| i as f32).collect();
            let (ph, pw) = (padded_size(h, m), padded_size(w, m));
            let p = pad_reflect(&img, h, w, ph, pw);
            prop_assert_eq!(p.len(), ph * pw);
            prop_assert_eq!(crop(&p, pw, h, w), img);
        }

        #[test]
        fn splits_partition(n in 3usize..60, seed in any::<u64>(), fa in 0.0f64..1.0, fb in 0.0f64..1.0) {
            let a = (n as f64 * fa * 0.5) as usize;
            let b = ((n - a) as f64 * fb * 0.5) as usize;
            let c = n - a - b;
            let s = split_subjects(&ids(n), (a, b, c), seed).unwrap();
            let mut all: Vec<String> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
            all.sort();
            prop_assert_eq!(all, ids(n));
        }
    }
}
