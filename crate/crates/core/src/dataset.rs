//! Multi-camera datasets with intra-camera labels.
//!
//! Every sample carries the camera it was captured by and a person label that
//! is only meaningful inside that camera. The hidden `truth` identity exists
//! for evaluation and must never reach the trainer's decision logic.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATASET_MAGIC: &str = "pcsl-dataset";
pub const DATASET_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub camera: usize,
    pub local_id: usize,
    pub truth: Option<usize>,
}

/// Maps `(camera, local person)` pairs onto contiguous global class indices.
///
/// Camera `i` owns the block `[offset_i, offset_i + C_i)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonIndex {
    per_camera: Vec<usize>,
    offsets: Vec<usize>,
}

impl PersonIndex {
    pub fn new(per_camera: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(per_camera.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for &c in &per_camera {
            acc += c;
            offsets.push(acc);
        }
        Self {
            per_camera,
            offsets,
        }
    }

    pub fn n_cameras(&self) -> usize {
        self.per_camera.len()
    }

    /// Total number of classes `C = C_1 + ... + C_n`.
    pub fn num_classes(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn per_camera(&self) -> &[usize] {
        &self.per_camera
    }

    pub fn block(&self, camera: usize) -> Range<usize> {
        self.offsets[camera]..self.offsets[camera + 1]
    }

    pub fn class_of(&self, camera: usize, local_id: usize) -> Option<usize> {
        if camera < self.per_camera.len() && local_id < self.per_camera[camera] {
            Some(self.offsets[camera] + local_id)
        } else {
            None
        }
    }

    /// Inverse of [`PersonIndex::class_of`].
    pub fn person_of(&self, class: usize) -> Option<(usize, usize)> {
        if class >= self.num_classes() {
            return None;
        }
        // offsets is sorted; the owning camera is the last offset <= class
        // among non-empty blocks.
        let camera = self.offsets.partition_point(|&o| o <= class) - 1;
        Some((camera, class - self.offsets[camera]))
    }

    pub fn camera_of(&self, class: usize) -> Option<usize> {
        self.person_of(class).map(|(c, _)| c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// An immutable, validated collection of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    index: PersonIndex,
    d_in: usize,
    split: Split,
}

impl Dataset {
    /// Validates the sample set against the index and the declared input
    /// dimension.
    pub fn new(samples: Vec<Sample>, index: PersonIndex, d_in: usize, split: Split) -> Result<Self> {
        let mut truth_of: Vec<Option<Option<usize>>> = vec![None; index.num_classes()];
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != d_in {
                return Err(Error::Contract(format!(
                    "sample {i} has {} features, dataset declares d_in={d_in}",
                    s.features.len()
                )));
            }
            let class = index.class_of(s.camera, s.local_id).ok_or_else(|| {
                Error::Contract(format!(
                    "sample {i}: (camera {}, local {}) is not in the person index",
                    s.camera, s.local_id
                ))
            })?;
            match truth_of[class] {
                None => truth_of[class] = Some(s.truth),
                Some(t) if t != s.truth => {
                    return Err(Error::Contract(format!(
                        "sample {i}: truth {:?} disagrees with {:?} for class {class}",
                        s.truth, t
                    )))
                }
                _ => {}
            }
        }
        Ok(Self {
            samples,
            index,
            d_in,
            split,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn index(&self) -> &PersonIndex {
        &self.index
    }

    pub fn n_cameras(&self) -> usize {
        self.index.n_cameras()
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_of_sample(&self, i: usize) -> usize {
        let s = &self.samples[i];
        self.index
            .class_of(s.camera, s.local_id)
            .expect("validated at construction")
    }

    /// Sample indices grouped by class, in dataset order.
    pub fn samples_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.index.num_classes()];
        for i in 0..self.samples.len() {
            out[self.class_of_sample(i)].push(i);
        }
        out
    }

    /// Hidden identity of each class, if any sample of it carries one.
    pub fn class_truth(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.index.num_classes()];
        for (i, s) in self.samples.iter().enumerate() {
            if s.truth.is_some() {
                out[self.class_of_sample(i)] = s.truth;
            }
        }
        out
    }

    pub fn has_truth(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.truth.is_some())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(file)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{DATASET_MAGIC} {DATASET_VERSION}").unwrap();
        writeln!(out, "split {}", self.split.as_str()).unwrap();
        writeln!(out, "d_in {}", self.d_in).unwrap();
        writeln!(out, "n_cameras {}", self.n_cameras()).unwrap();
        out.push_str("persons");
        for c in self.index.per_camera() {
            write!(out, " {c}").unwrap();
        }
        out.push('\n');
        writeln!(out, "samples {}", self.samples.len()).unwrap();
        for s in &self.samples {
            write!(out, "{} {} ", s.camera, s.local_id).unwrap();
            match s.truth {
                Some(t) => write!(out, "{t}").unwrap(),
                None => out.push('-'),
            }
            for v in &s.features {
                // Debug formatting is the shortest representation that
                // parses back to the same bits.
                write!(out, " {v:?}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn read_from(reader: impl Read) -> Result<Self> {
        let mut lines = BufReader::new(reader).lines().enumerate();
        let mut next_line = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((i, line)) => Ok((i + 1, line?)),
                None => Err(Error::Parse {
                    line: 0,
                    msg: format!("unexpected end of file, expected {what}"),
                }),
            }
        };

        let (ln, header) = next_line("header")?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(DATASET_MAGIC) {
            return Err(Error::Parse {
                line: ln,
                msg: format!("missing `{DATASET_MAGIC}` header"),
            });
        }
        let version = parts.next().unwrap_or("");
        if version != DATASET_VERSION {
            return Err(Error::Version {
                kind: "dataset",
                found: version.to_string(),
                expected: DATASET_VERSION.to_string(),
            });
        }

        let (ln, line) = next_line("split")?;
        let split: Split = keyed(&line, "split", ln)?
            .parse()
            .map_err(|msg| Error::Parse { line: ln, msg })?;
        let (ln, line) = next_line("d_in")?;
        let d_in: usize = parse_num(keyed(&line, "d_in", ln)?, ln, "d_in")?;
        let (ln, line) = next_line("n_cameras")?;
        let n_cameras: usize = parse_num(keyed(&line, "n_cameras", ln)?, ln, "n_cameras")?;
        let (ln, line) = next_line("persons")?;
        let per_camera = keyed(&line, "persons", ln)?
            .split_whitespace()
            .map(|t| parse_num::<usize>(t, ln, "person count"))
            .collect::<Result<Vec<_>>>()?;
        if per_camera.len() != n_cameras {
            return Err(Error::Parse {
                line: ln,
                msg: format!("{} person counts for {n_cameras} cameras", per_camera.len()),
            });
        }
        let (ln, line) = next_line("samples")?;
        let n_samples: usize = parse_num(keyed(&line, "samples", ln)?, ln, "samples")?;

        let mut samples = Vec::with_capacity(n_samples);
        for k in 0..n_samples {
            let (ln, line) = next_line(&format!("sample record {k} of {n_samples}"))
                .map_err(|_| Error::Parse {
                    line: 0,
                    msg: format!("truncated file: expected {n_samples} sample records, found {k}"),
                })?;
            let ctx = |msg: String| Error::Parse {
                line: ln,
                msg: format!("sample record {k}: {msg}"),
            };
            let tokens: Vec<&str> = line.split_whitespace().collect();
            if tokens.len() != 3 + d_in {
                return Err(ctx(format!("expected {} fields, found {}", 3 + d_in, tokens.len())));
            }
            let camera = tokens[0]
                .parse()
                .map_err(|_| ctx(format!("bad camera `{}`", tokens[0])))?;
            let local_id = tokens[1]
                .parse()
                .map_err(|_| ctx(format!("bad local id `{}`", tokens[1])))?;
            let truth = match tokens[2] {
                "-" => None,
                t => Some(t.parse().map_err(|_| ctx(format!("bad truth `{t}`")))?),
            };
            let features = tokens[3..]
                .iter()
                .map(|t| t.parse::<f64>().map_err(|_| ctx(format!("bad feature `{t}`"))))
                .collect::<Result<Vec<_>>>()?;
            samples.push(Sample {
                features,
                camera,
                local_id,
                truth,
            });
        }
        if let Some((i, extra)) = lines.find(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty())) {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("trailing content after {n_samples} records: {:?}", extra.ok()),
            });
        }
        Dataset::new(samples, PersonIndex::new(per_camera), d_in, split)
    }
}

fn keyed<'a>(line: &'a str, key: &str, ln: usize) -> Result<&'a str> {
    line.strip_prefix(key)
        .filter(|rest| rest.is_empty() || rest.starts_with(' '))
        .map(str::trim)
        .ok_or_else(|| Error::Parse {
            line: ln,
            msg: format!("expected `{key}` record, found `{line}`"),
        })
}

fn parse_num<T: std::str::FromStr>(s: &str, ln: usize, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Parse {
        line: ln,
        msg: format!("bad {what} `{s}`"),
    })
}

/// Parameters of the synthetic multi-camera corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    /// Training identities `G`.
    pub n_identities: usize,
    /// Held-out identities used for query/gallery.
    pub n_test_identities: usize,
    pub n_cameras: usize,
    pub d_latent: usize,
    pub d_in: usize,
    pub images_per_person: usize,
    pub camera_appearance_prob: f64,
    pub camera_transform_scale: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_identities: 200,
            n_test_identities: 100,
            n_cameras: 4,
            d_latent: 8,
            d_in: 32,
            images_per_person: 4,
            camera_appearance_prob: 1.0,
            camera_transform_scale: 0.5,
            noise_sigma: 0.3,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_cameras < 2 {
            return Err(Error::Config(format!(
                "n_cameras={} but cross-camera learning needs at least 2",
                self.n_cameras
            )));
        }
        if self.images_per_person < 2 {
            return Err(Error::Config(format!(
                "images_per_person={} leaves no positive pairs",
                self.images_per_person
            )));
        }
        if !(0.0..=1.0).contains(&self.camera_appearance_prob) {
            return Err(Error::Config(format!(
                "camera_appearance_prob={} outside [0, 1]",
                self.camera_appearance_prob
            )));
        }
        if !(self.camera_transform_scale >= 0.0 && self.camera_transform_scale.is_finite()) {
            return Err(Error::Config("camera_transform_scale must be finite and >= 0".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be finite and >= 0".into()));
        }
        if self.d_latent == 0 || self.d_in == 0 {
            return Err(Error::Config("d_latent and d_in must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSplits {
    pub train: Dataset,
    pub query: Dataset,
    pub gallery: Dataset,
}

struct CameraTransform {
    // d_in x d_latent, row-major
    matrix: Vec<f64>,
    offset: Vec<f64>,
}

/// Generates train/query/gallery splits with hidden cross-camera identities.
///
/// Each camera applies `x = A_j z + b_j + noise` where `A_j = M + s E_j` and
/// `b_j = s f_j` share the base projection `M`; `s` is the transform scale.
/// Test identities are disjoint from training identities and each appears
/// under at least two cameras.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SyntheticSplits> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (d_in, d_lat, n_cam) = (spec.d_in, spec.d_latent, spec.n_cameras);
    let proj_std = 1.0 / (d_lat as f64).sqrt();

    let base: Vec<f64> = (0..d_in * d_lat).map(|_| proj_std * gauss(&mut rng)).collect();
    let cameras: Vec<CameraTransform> = (0..n_cam)
        .map(|_| {
            let matrix = base
                .iter()
                .map(|&m| m + spec.camera_transform_scale * proj_std * gauss(&mut rng))
                .collect();
            let offset = (0..d_in)
                .map(|_| spec.camera_transform_scale * gauss(&mut rng))
                .collect();
            CameraTransform { matrix, offset }
        })
        .collect();

    let total = spec.n_identities + spec.n_test_identities;
    let latents: Vec<Vec<f64>> = (0..total)
        .map(|_| (0..d_lat).map(|_| gauss(&mut rng)).collect())
        .collect();
    let appearances: Vec<Vec<usize>> = (0..total)
        .map(|g| {
            let min_cams = if g < spec.n_identities { 1 } else { 2 };
            draw_cameras(&mut rng, n_cam, spec.camera_appearance_prob, min_cams)
        })
        .collect();

    let emit = |g: usize, cam: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let t = &cameras[cam];
        (0..d_in)
            .map(|r| {
                let row = &t.matrix[r * d_lat..(r + 1) * d_lat];
                let clean: f64 = row.iter().zip(&latents[g]).map(|(a, z)| a * z).sum::<f64>() + t.offset[r];
                clean + spec.noise_sigma * gauss(rng)
            })
            .collect()
    };

    // Local ids are a random permutation of the identities present in each
    // camera, so class order carries no information about identity order.
    let assign_local = |ids: &[usize], rng: &mut ChaCha8Rng| -> (Vec<usize>, Vec<Vec<Option<usize>>>) {
        let mut per_camera = vec![0usize; n_cam];
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_cam];
        for &g in ids {
            for &c in &appearances[g] {
                members[c].push(g);
            }
        }
        let mut local = vec![vec![None; n_cam]; total];
        for (c, m) in members.iter_mut().enumerate() {
            m.shuffle(rng);
            per_camera[c] = m.len();
            for (l, &g) in m.iter().enumerate() {
                local[g][c] = Some(l);
            }
        }
        (per_camera, local)
    };

    let train_ids: Vec<usize> = (0..spec.n_identities).collect();
    let (train_counts, train_local) = assign_local(&train_ids, &mut rng);
    let mut train = Vec::new();
    for &g in &train_ids {
        for &c in &appearances[g] {
            for _ in 0..spec.images_per_person {
                train.push(Sample {
                    features: emit(g, c, &mut rng),
                    camera: c,
                    local_id: train_local[g][c].unwrap(),
                    truth: Some(g),
                });
            }
        }
    }

    let test_ids: Vec<usize> = (spec.n_identities..total).collect();
    let (test_counts, test_local) = assign_local(&test_ids, &mut rng);
    let (mut query, mut gallery) = (Vec::new(), Vec::new());
    for &g in &test_ids {
        for &c in &appearances[g] {
            for k in 0..spec.images_per_person {
                let s = Sample {
                    features: emit(g, c, &mut rng),
                    camera: c,
                    local_id: test_local[g][c].unwrap(),
                    truth: Some(g),
                };
                if k == 0 {
                    query.push(s);
                } else {
                    gallery.push(s);
                }
            }
        }
    }

    Ok(SyntheticSplits {
        train: Dataset::new(train, PersonIndex::new(train_counts), d_in, Split::Train)?,
        query: Dataset::new(query, PersonIndex::new(test_counts.clone()), d_in, Split::Query)?,
        gallery: Dataset::new(gallery, PersonIndex::new(test_counts), d_in, Split::Gallery)?,
    })
}

fn gauss(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Each camera independently with probability `p`; cameras are then added
/// uniformly at random until at least `min_cams` are present.
fn draw_cameras(rng: &mut impl Rng, n_cam: usize, p: f64, min_cams: usize) -> Vec<usize> {
    let mut present: Vec<bool> = (0..n_cam).map(|_| rng.random_bool(p)).collect();
    while present.iter().filter(|&&b| b).count() < min_cams {
        let missing: Vec<usize> = (0..n_cam).filter(|&c| !present[c]).collect();
        present[missing[rng.random_range(0..missing.len())]] = true;
    }
    (0..n_cam).filter(|&c| present[c]).collect()
}

/// Writes `contents` to `path` via a sibling temporary file and a rename.
pub fn write_atomic(path: impl AsRef<Path>, contents: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Contract(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}
