//! Datasets, disjoint class splits and two-stage episodic sampling.
//!
//! An episode is drawn in two stages: `N` classes uniformly without
//! replacement from the split, then `K + U` samples uniformly without
//! replacement from each chosen class. The first `K` samples of a class go to
//! the support set and the remaining `U` to the query set. Class slots follow
//! the order in which classes were drawn.

mod augment;
mod ingest;
mod manifest;
mod synth;

use std::collections::{BTreeMap, BTreeSet};

use fsfg_autograd::Tensor;
use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Rng, STREAM_SPLIT};

pub use augment::{augment, AugmentConfig, AugmentMode};
pub use ingest::load_image_folder;
pub use manifest::DatasetManifest;
pub use synth::{generate_synthetic_dataset, SyntheticSpec};

/// Immutable collection of labeled `C×H×W` images with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    image_shape: [usize; 3],
    pixels: Vec<f64>,
    labels: Vec<u32>,
    class_index: BTreeMap<u32, Vec<usize>>,
    generator: Option<SyntheticSpec>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, image_shape: [usize; 3], pixels: Vec<f64>, labels: Vec<u32>) -> Result<Self> {
        let per = image_shape.iter().product::<usize>();
        if per == 0 {
            return Err(Error::Config(format!("degenerate image shape {image_shape:?}")));
        }
        if pixels.len() != per * labels.len() {
            return Err(Error::Config(format!(
                "{} pixel values for {} images of shape {:?}",
                pixels.len(),
                labels.len(),
                image_shape
            )));
        }
        if let Some(bad) = pixels.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config(format!(
                "pixel {} of image {} is {} (outside [0, 1])",
                bad % per,
                bad / per,
                pixels[bad]
            )));
        }
        let mut class_index: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            class_index.entry(l).or_default().push(i);
        }
        Ok(Self {
            name: name.into(),
            image_shape,
            pixels,
            labels,
            class_index,
            generator: None,
        })
    }

    pub(crate) fn with_generator(mut self, spec: SyntheticSpec) -> Self {
        self.generator = Some(spec);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn classes(&self) -> BTreeSet<u32> {
        self.class_index.keys().copied().collect()
    }

    pub fn class_samples(&self, class: u32) -> &[usize] {
        self.class_index.get(&class).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn generator(&self) -> Option<&SyntheticSpec> {
        self.generator.as_ref()
    }

    /// Errors unless every class holds at least `per_class` samples.
    pub fn check_capacity(&self, per_class: usize) -> Result<()> {
        for (c, idx) in &self.class_index {
            if idx.len() < per_class {
                return Err(Error::Sampling(format!(
                    "class {c} has {} samples, episodes need {per_class}",
                    idx.len()
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 over shape, labels and the exact bit patterns of every pixel.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for d in self.image_shape {
            h.update((d as u64).to_le_bytes());
        }
        for l in &self.labels {
            h.update(l.to_le_bytes());
        }
        for p in &self.pixels {
            h.update(p.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Pairwise-disjoint train/validation/test class sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub train: BTreeSet<u32>,
    pub val: BTreeSet<u32>,
    pub test: BTreeSet<u32>,
}

impl ClassSplit {
    pub fn is_disjoint(&self) -> bool {
        self.train.is_disjoint(&self.val) && self.train.is_disjoint(&self.test) && self.val.is_disjoint(&self.test)
    }
}

/// Deterministic random partition of `all` into sets of the requested sizes.
pub fn split_classes(all: &BTreeSet<u32>, counts: (usize, usize, usize), seed: u64) -> Result<ClassSplit> {
    let (n_train, n_val, n_test) = counts;
    let need = n_train + n_val + n_test;
    if need > all.len() {
        return Err(Error::Config(format!(
            "split needs {need} classes ({n_train}/{n_val}/{n_test}) but only {} exist",
            all.len()
        )));
    }
    let ids: Vec<u32> = all.iter().copied().collect();
    let mut rng = stream_rng(seed, STREAM_SPLIT, 0);
    let order = index::sample(&mut rng, ids.len(), need).into_vec();
    let pick = |r: std::ops::Range<usize>| order[r].iter().map(|&i| ids[i]).collect::<BTreeSet<_>>();
    Ok(ClassSplit {
        train: pick(0..n_train),
        val: pick(n_train..n_train + n_val),
        test: pick(n_train + n_val..need),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeItem {
    /// Index into the dataset.
    pub sample: usize,
    /// Class slot in `0..N`.
    pub slot: usize,
}

/// One N-way K-shot task. Support items are grouped by slot (K each, slot
/// order), queries likewise (U each).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
    /// Dataset class id of every slot.
    pub classes: Vec<u32>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }

    /// Every sample index, support first.
    pub fn sample_indices(&self) -> Vec<usize> {
        self.support.iter().chain(&self.query).map(|i| i.sample).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|i| i.slot).collect()
    }

    pub fn support_slots(&self) -> Vec<usize> {
        self.support.iter().map(|i| i.slot).collect()
    }
}

/// Draws one episode: classes first, then samples within each class.
pub fn sample_episode(
    dataset: &Dataset,
    classes: &BTreeSet<u32>,
    n_way: usize,
    k_shot: usize,
    queries: usize,
    rng: &mut Rng,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 || queries == 0 {
        return Err(Error::Sampling(format!(
            "episode shape must be positive, got N={n_way} K={k_shot} U={queries}"
        )));
    }
    if classes.len() < n_way {
        return Err(Error::Sampling(format!(
            "{n_way}-way episode requested from {} classes",
            classes.len()
        )));
    }
    let pool: Vec<u32> = classes.iter().copied().collect();
    let chosen: Vec<u32> = index::sample(rng, pool.len(), n_way).into_iter().map(|i| pool[i]).collect();

    let per = k_shot + queries;
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * queries);
    for (slot, &class) in chosen.iter().enumerate() {
        let members = dataset.class_samples(class);
        if members.len() < per {
            return Err(Error::Sampling(format!(
                "class {class} has {} samples, episode needs {per}",
                members.len()
            )));
        }
        let picks = index::sample(rng, members.len(), per).into_vec();
        for (j, &p) in picks.iter().enumerate() {
            let item = EpisodeItem {
                sample: members[p],
                slot,
            };
            if j < k_shot {
                support.push(item);
            } else {
                query.push(item);
            }
        }
    }
    Ok(Episode {
        support,
        query,
        classes: chosen,
    })
}

/// Image tensors of an episode, ready for a forward pass.
#[derive(Debug, Clone)]
pub struct EpisodeBatch {
    /// `[N·K, C, H, W]`
    pub support: Tensor,
    pub support_slots: Vec<usize>,
    /// `[N·U, C, H, W]`
    pub query: Tensor,
    pub query_labels: Vec<usize>,
    pub n_way: usize,
}

impl EpisodeBatch {
    /// Gathers (and augments) the episode's images. Randomness is consumed in
    /// support-then-query order.
    pub fn materialize(
        episode: &Episode,
        dataset: &Dataset,
        augment_cfg: &AugmentConfig,
        mode: AugmentMode,
        rng: &mut Rng,
    ) -> Self {
        let [c, h, w] = dataset.image_shape();
        let gather = |items: &[EpisodeItem], rng: &mut Rng| {
            let mut data = Vec::with_capacity(items.len() * c * h * w);
            for it in items {
                data.extend(augment(dataset.image(it.sample), [c, h, w], augment_cfg, mode, rng));
            }
            Tensor::new(&[items.len(), c, h, w], data)
        };
        let support = gather(&episode.support, rng);
        let query = gather(&episode.query, rng);
        Self {
            support,
            support_slots: episode.support_slots(),
            query,
            query_labels: episode.query_labels(),
            n_way: episode.n_way(),
        }
    }

    /// Relabels class slots through `perm` (slot `s` becomes `perm[s]`).
    pub fn permute_slots(&self, perm: &[usize]) -> Self {
        let mut out = self.clone();
        out.support_slots.iter_mut().for_each(|s| *s = perm[*s]);
        out.query_labels.iter_mut().for_each(|s| *s = perm[*s]);
        out
    }
}

/// Uniform draw in `[lo, hi]`; returns `lo` when the range is empty.
pub(crate) fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn toy(classes: u32, per_class: usize) -> Dataset {
        let n = classes as usize * per_class;
        let labels = (0..n).map(|i| (i / per_class) as u32).collect();
        let pixels = (0..n * 4).map(|i| (i % 7) as f64 / 7.0).collect();
        Dataset::new("toy", [1, 2, 2], pixels, labels).unwrap()
    }

    #[test]
    fn cub_sized_split() {
        let all: BTreeSet<u32> = (1..=200).collect();
        let s = split_classes(&all, (130, 20, 50), 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (130, 20, 50));
        assert!(s.is_disjoint());
    }

    #[test]
    fn exhaustive_three_way_partition() {
        let all: BTreeSet<u32> = (0..3).collect();
        let s = split_classes(&all, (1, 1, 1), 11).unwrap();
        let union: BTreeSet<u32> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        assert_eq!(union, all);
        assert!(s.is_disjoint());
    }

    #[test]
    fn split_seed_behaviour() {
        let all: BTreeSet<u32> = (0..10).collect();
        let a = split_classes(&all, (6, 2, 2), 1).unwrap();
        let b = split_classes(&all, (6, 2, 2), 1).unwrap();
        assert_eq!(a, b);
        let differs = (2..20).any(|s| split_classes(&all, (6, 2, 2), s).unwrap() != a);
        assert!(differs);
    }

    #[test]
    fn split_rejects_too_many() {
        let all: BTreeSet<u32> = (0..5).collect();
        assert!(matches!(split_classes(&all, (3, 2, 1), 0), Err(Error::Config(_))));
    }

    #[test]
    fn forced_single_episode() {
        let ds = toy(1, 2);
        let classes = ds.classes();
        let ep = sample_episode(&ds, &classes, 1, 1, 1, &mut stream_rng(0, 0, 0)).unwrap();
        assert_eq!(ep.support.len(), 1);
        assert_eq!(ep.query.len(), 1);
        assert_ne!(ep.support[0].sample, ep.query[0].sample);
    }

    #[test]
    fn five_way_one_shot_fifteen_queries() {
        let ds = toy(8, 20);
        let ep = sample_episode(&ds, &ds.classes(), 5, 1, 15, &mut stream_rng(3, 0, 0)).unwrap();
        assert_eq!(ep.support.len(), 5);
        assert_eq!(ep.query.len(), 75);
        for slot in 0..5 {
            assert_eq!(ep.query.iter().filter(|q| q.slot == slot).count(), 15);
            let class = ep.classes[slot];
            assert!(ep.support.iter().chain(&ep.query).filter(|i| i.slot == slot).all(|i| ds.label(i.sample) == class));
        }
    }

    #[test]
    fn sampling_errors() {
        let ds = toy(3, 4);
        let mut rng = stream_rng(0, 0, 0);
        assert!(matches!(sample_episode(&ds, &ds.classes(), 4, 1, 1, &mut rng), Err(Error::Sampling(_))));
        assert!(matches!(sample_episode(&ds, &ds.classes(), 2, 2, 3, &mut rng), Err(Error::Sampling(_))));
        assert!(ds.check_capacity(5).is_err());
        assert!(ds.check_capacity(4).is_ok());
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(Dataset::new("bad", [1, 1, 1], vec![1.5], vec![0]).is_err());
        assert!(Dataset::new("bad", [1, 1, 2], vec![0.5], vec![0]).is_err());
    }
}
