//! Identity-balanced triplet batches and camera-balanced classification
//! batches.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// `n_p` persons x `n_k` samples from a single camera.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletBatch {
    pub camera: usize,
    /// Dataset sample indices, person-major.
    pub samples: Vec<usize>,
    /// Class index of each entry in `samples`.
    pub classes: Vec<usize>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Samples of each class; precomputed once per dataset.
#[derive(Debug, Clone)]
pub struct SampleTable {
    pub by_class: Vec<Vec<usize>>,
    pub by_camera: Vec<Vec<usize>>,
}

impl SampleTable {
    pub fn new(ds: &Dataset) -> Self {
        let mut by_camera = vec![Vec::new(); ds.n_cameras()];
        for (i, s) in ds.samples().iter().enumerate() {
            by_camera[s.camera].push(i);
        }
        Self {
            by_class: ds.samples_by_class(),
            by_camera,
        }
    }

    /// Classes of `camera` that own at least one sample.
    pub fn persons_in(&self, ds: &Dataset, camera: usize) -> Vec<usize> {
        ds.index()
            .block(camera)
            .filter(|&c| !self.by_class[c].is_empty())
            .collect()
    }
}

/// Draws `n_p` persons of `camera` without replacement (all of them, then
/// uniform fill with replacement, when the camera has fewer) and `n_k`
/// samples of each (with replacement when the person has fewer).
pub fn pk_sampler(ds: &Dataset, table: &SampleTable, camera: usize, n_p: usize, n_k: usize, rng: &mut impl Rng) -> Result<TripletBatch> {
    let persons = table.persons_in(ds, camera);
    if persons.len() < 2 {
        return Err(Error::Contract(format!(
            "camera {camera} has {} person(s) with samples, triplets need 2",
            persons.len()
        )));
    }
    let chosen: Vec<usize> = if persons.len() >= n_p {
        persons.choose_multiple(rng, n_p).copied().collect()
    } else {
        let mut all = persons.clone();
        all.extend((persons.len()..n_p).map(|_| *persons.choose(rng).expect("nonempty")));
        all
    };
    let mut samples = Vec::with_capacity(n_p * n_k);
    let mut classes = Vec::with_capacity(n_p * n_k);
    for class in chosen {
        let pool = &table.by_class[class];
        if pool.len() >= n_k {
            samples.extend(pool.choose_multiple(rng, n_k).copied());
        } else {
            samples.extend((0..n_k).map(|_| *pool.choose(rng).expect("nonempty")));
        }
        classes.extend(std::iter::repeat_n(class, n_k));
    }
    Ok(TripletBatch {
        camera,
        samples,
        classes,
    })
}

/// `per_camera` uniformly random samples from every camera (without
/// replacement when the camera has enough).
pub fn classification_sampler(table: &SampleTable, per_camera: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(per_camera * table.by_camera.len());
    for (cam, pool) in table.by_camera.iter().enumerate() {
        if pool.is_empty() {
            return Err(Error::Contract(format!("camera {cam} has no samples")));
        }
        if pool.len() >= per_camera {
            out.extend(pool.choose_multiple(rng, per_camera).copied());
        } else {
            out.extend((0..per_camera).map(|_| *pool.choose(rng).expect("nonempty")));
        }
    }
    Ok(out)
}
