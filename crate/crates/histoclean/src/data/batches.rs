//! Unpaired batch streams.
//!
//! Per epoch, domain-A and domain-B records are shuffled independently; the
//! epoch length is `⌈max(|A|,|B|)/batch_size⌉` steps and whichever domain
//! runs out first cycles with a reshuffle, so every sample participates in
//! every epoch. All randomness (shuffles, per-sample augmentation draws) is
//! derived from `(seed, epoch, position)`, which makes the batch sequence
//! identical no matter how production is pipelined.

use std::collections::HashMap;
use std::path::PathBuf;

use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::derive_seed;

use super::{augment, load_tile, AugmentConfig, Batch, DataError, Domain, Manifest, Split, TileRecord};

struct DomainCycler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl DomainCycler {
    fn new(len: usize, seed: u64) -> Self {
        let mut cycler = DomainCycler {
            order: (0..len).collect(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        cycler.order.shuffle(&mut cycler.rng);
        cycler
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let idx = self.order[self.pos];
        self.pos += 1;
        idx
    }
}

/// Streaming iterator over one epoch of unpaired batches.
pub struct BatchStream<'m> {
    a_records: Vec<&'m TileRecord>,
    b_records: Vec<&'m TileRecord>,
    by_id: HashMap<&'m str, &'m TileRecord>,
    cycler_a: DomainCycler,
    cycler_b: DomainCycler,
    cfg: AugmentConfig,
    aug_seed_a: u64,
    aug_seed_b: u64,
    batch_size: usize,
    steps: usize,
    step: usize,
    drawn_a: u64,
    drawn_b: u64,
    with_clean_targets: bool,
    cache: HashMap<PathBuf, Array3<f32>>,
}

const CACHE_CAP: usize = 4096;

impl<'m> BatchStream<'m> {
    /// Ground-truth clean tiles (synthetic corpus) are loaded alongside
    /// each domain-A sample, augmented with the same draw so the pair stays
    /// pixel-aligned.
    pub fn with_clean_targets(mut self, yes: bool) -> Self {
        self.with_clean_targets = yes;
        self
    }

    /// Number of batches this epoch will yield.
    pub fn steps(&self) -> usize {
        self.steps
    }

    fn tile(&mut self, path: &PathBuf) -> Result<Array3<f32>, DataError> {
        if let Some(hit) = self.cache.get(path) {
            return Ok(hit.clone());
        }
        let tile = load_tile(path)?;
        if self.cache.len() < CACHE_CAP {
            self.cache.insert(path.clone(), tile.clone());
        }
        Ok(tile)
    }

    fn next_batch(&mut self) -> Result<Batch, DataError> {
        let bs = self.batch_size;
        let mut images_a: Option<Array4<f32>> = None;
        let mut images_b: Option<Array4<f32>> = None;
        let mut targets: Option<Array4<f32>> = None;
        let mut labels = Vec::with_capacity(bs);
        let mut all_labelled = true;
        for slot in 0..bs {
            let rec = self.a_records[self.cycler_a.next()];
            let sample_seed = derive_seed(self.aug_seed_a, "sample", self.drawn_a);
            self.drawn_a += 1;
            let tile = self.tile(&rec.image_path.clone())?;
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
            let img = augment(&tile, &self.cfg, &mut rng)?;
            let out = images_a.get_or_insert_with(|| {
                Array4::zeros((bs, 3, self.cfg.out_size, self.cfg.out_size))
            });
            out.index_axis_mut(ndarray::Axis(0), slot).assign(&img);
            match rec.label {
                Some(l) => labels.push(l),
                None => all_labelled = false,
            }
            if self.with_clean_targets {
                if let Some(pair) = rec
                    .paired_clean_id
                    .as_deref()
                    .and_then(|id| self.by_id.get(id).copied())
                {
                    let clean = self.tile(&pair.image_path.clone())?;
                    // Same seed → same flips and crop as the artifact tile.
                    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
                    let img = augment(&clean, &self.cfg, &mut rng)?;
                    let t = targets.get_or_insert_with(|| {
                        Array4::zeros((bs, 3, self.cfg.out_size, self.cfg.out_size))
                    });
                    t.index_axis_mut(ndarray::Axis(0), slot).assign(&img);
                }
            }
        }
        for slot in 0..bs {
            let rec = self.b_records[self.cycler_b.next()];
            let sample_seed = derive_seed(self.aug_seed_b, "sample", self.drawn_b);
            self.drawn_b += 1;
            let tile = self.tile(&rec.image_path.clone())?;
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
            let img = augment(&tile, &self.cfg, &mut rng)?;
            let out = images_b.get_or_insert_with(|| {
                Array4::zeros((bs, 3, self.cfg.out_size, self.cfg.out_size))
            });
            out.index_axis_mut(ndarray::Axis(0), slot).assign(&img);
        }
        Ok(Batch {
            images_a: images_a.unwrap(),
            labels_a: all_labelled.then_some(labels),
            images_b: images_b.unwrap(),
            clean_targets_a: targets,
        })
    }
}

impl<'m> Iterator for BatchStream<'m> {
    type Item = Result<Batch, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.step == self.steps {
            return None;
        }
        self.step += 1;
        Some(self.next_batch())
    }
}

/// Builds the batch stream for one epoch of `split`. Deterministic in
/// `(seed, epoch)`.
pub fn make_batches<'m>(
    manifest: &'m Manifest,
    split: Split,
    batch_size: usize,
    cfg: &AugmentConfig,
    seed: u64,
    epoch: u64,
) -> Result<BatchStream<'m>, DataError> {
    assert!(batch_size > 0, "batch_size must be positive");
    let a_records = manifest.records_in(Domain::Artifact, split);
    let b_records = manifest.records_in(Domain::Clean, split);
    if a_records.is_empty() {
        return Err(DataError::EmptyDomain(Domain::Artifact));
    }
    if b_records.is_empty() {
        return Err(DataError::EmptyDomain(Domain::Clean));
    }
    let steps = a_records.len().max(b_records.len()).div_ceil(batch_size);
    let by_id = manifest.records.iter().map(|r| (r.id.as_str(), r)).collect();
    Ok(BatchStream {
        cycler_a: DomainCycler::new(a_records.len(), derive_seed(seed, "shuffle-a", epoch)),
        cycler_b: DomainCycler::new(b_records.len(), derive_seed(seed, "shuffle-b", epoch)),
        aug_seed_a: derive_seed(seed, "aug-a", epoch),
        aug_seed_b: derive_seed(seed, "aug-b", epoch),
        a_records,
        b_records,
        by_id,
        cfg: *cfg,
        batch_size,
        steps,
        step: 0,
        drawn_a: 0,
        drawn_b: 0,
        with_clean_targets: false,
        cache: HashMap::new(),
    })
}
