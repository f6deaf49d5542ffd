//! N-way K-shot support/query splits.
//!
//! All randomness comes from [`EpisodeRng`], ChaCha8 seeded through
//! `SeedableRng::seed_from_u64`, which is specified bit-for-bit and does not
//! depend on platform or pointer width. Classes are visited in ascending id;
//! within a class the candidate annotation ids are sorted ascending and the
//! first `k` positions of a partial Fisher–Yates shuffle are taken.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::DatasetIndex;

pub type EpisodeRng = ChaCha8Rng;

pub fn episode_rng(seed: u64) -> EpisodeRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    /// Class id → the K chosen annotation ids, ascending.
    pub support: BTreeMap<u64, Vec<u64>>,
    /// Images that own no support instance.
    pub query_image_ids: BTreeSet<u64>,
    pub seed: u64,
}

impl Episode {
    /// Images owning at least one support annotation.
    pub fn support_image_ids(&self, ds: &DatasetIndex) -> BTreeSet<u64> {
        let chosen: BTreeSet<u64> = self.support.values().flatten().copied().collect();
        ds.annotations()
            .iter()
            .filter(|a| chosen.contains(&a.annotation_id))
            .map(|a| a.image_id)
            .collect()
    }
}

/// Samples one episode over every category of `ds`.
pub fn sample_episode(ds: &DatasetIndex, k: usize, seed: u64) -> Result<Episode> {
    if k == 0 {
        return Err(Error::param("k", "must be positive"));
    }
    let mut by_class: BTreeMap<u64, Vec<u64>> =
        ds.categories().keys().map(|&c| (c, Vec::new())).collect();
    let mut owner = BTreeMap::new();
    for a in ds.annotations() {
        by_class
            .entry(a.category_id)
            .or_default()
            .push(a.annotation_id);
        owner.insert(a.annotation_id, a.image_id);
    }

    let mut rng = episode_rng(seed);
    let mut support = BTreeMap::new();
    let mut used_images = BTreeSet::new();
    for (class_id, mut ids) in by_class {
        if ids.len() < k {
            return Err(Error::InfeasibleEpisode {
                class_id,
                available: ids.len(),
                k,
            });
        }
        ids.sort_unstable();
        let (chosen, _) = ids.partial_shuffle(&mut rng, k);
        let mut chosen = chosen.to_vec();
        chosen.sort_unstable();
        for id in &chosen {
            used_images.insert(owner[id]);
        }
        support.insert(class_id, chosen);
    }

    let query_image_ids = ds
        .images()
        .keys()
        .copied()
        .filter(|id| !used_images.contains(id))
        .collect();
    Ok(Episode {
        n_way: support.len(),
        k_shot: k,
        support,
        query_image_ids,
        seed,
    })
}
