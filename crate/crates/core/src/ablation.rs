//! Paired-seed ablation runs over one configuration axis at a time.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, RetrievalResult};
use crate::losses::{Mining, PositiveSampling, Weighting};
use crate::trainer::{train, InterMode, TrainConfig, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    InterMode,
    MiningMode,
    MaskSameCamera,
    PositiveSampling,
    WeightingMode,
    LambdaSweep,
    KSweep,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 7] = [
        AblationAxis::InterMode,
        AblationAxis::MiningMode,
        AblationAxis::MaskSameCamera,
        AblationAxis::PositiveSampling,
        AblationAxis::WeightingMode,
        AblationAxis::LambdaSweep,
        AblationAxis::KSweep,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::InterMode => "inter_mode",
            AblationAxis::MiningMode => "mining_mode",
            AblationAxis::MaskSameCamera => "mask_same_camera",
            AblationAxis::PositiveSampling => "positive_sampling",
            AblationAxis::WeightingMode => "weighting_mode",
            AblationAxis::LambdaSweep => "lambda_sweep",
            AblationAxis::KSweep => "k_sweep",
        }
    }

    /// The settings compared on this axis, derived from `base`.
    ///
    /// Mining is compared with the inter-camera term off, so the hard row is
    /// the intra-only baseline. Masking, positive sampling and weighting are
    /// compared under the triplet objective.
    pub fn settings(self, base: &TrainConfig) -> Vec<Setting> {
        let with = |label: &str, f: &dyn Fn(&mut TrainConfig)| {
            let mut config = base.clone();
            f(&mut config);
            Setting {
                label: label.to_string(),
                config,
            }
        };
        let disc = |c: &mut TrainConfig| c.inter_mode = InterMode::Discrimination;
        match self {
            AblationAxis::InterMode => vec![
                with("intra-only", &|c| c.lambda = 0.0),
                with("C", &|c| c.inter_mode = InterMode::Classification),
                with("D", &disc),
            ],
            AblationAxis::MiningMode => vec![
                with("hard", &|c| {
                    c.lambda = 0.0;
                    c.mining = Mining::Hard;
                }),
                with("random", &|c| {
                    c.lambda = 0.0;
                    c.mining = Mining::Random;
                }),
            ],
            AblationAxis::MaskSameCamera => vec![
                with("masked", &|c| {
                    disc(c);
                    c.mask_same_camera = true;
                }),
                with("unmasked", &|c| {
                    disc(c);
                    c.mask_same_camera = false;
                }),
            ],
            AblationAxis::PositiveSampling => vec![
                with("random", &|c| {
                    disc(c);
                    c.positive_sampling = PositiveSampling::Random;
                }),
                with("nearest", &|c| {
                    disc(c);
                    c.positive_sampling = PositiveSampling::Nearest;
                }),
            ],
            AblationAxis::WeightingMode => vec![
                with("AW", &|c| {
                    disc(c);
                    c.weighting = Weighting::Aw;
                }),
                with("W", &|c| {
                    disc(c);
                    c.weighting = Weighting::W;
                }),
            ],
            AblationAxis::LambdaSweep => [0.0, 0.25, 0.5, 1.0, 2.0, 4.0]
                .iter()
                .map(|&l| with(&format!("lambda={l}"), &|c| c.lambda = l))
                .collect(),
            AblationAxis::KSweep => [1usize, 2, 4, 6, 10, 15]
                .iter()
                .map(|&k| with(&format!("k={k}"), &|c| c.k = k))
                .collect(),
        }
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Setting {
    pub label: String,
    pub config: TrainConfig,
}

/// Outcome of one training run evaluated on the held-out splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub result: RetrievalResult,
    pub log: TrainLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub config: TrainConfig,
    pub seeds: Vec<u64>,
    pub map: Vec<f64>,
    pub rank1: Vec<f64>,
    pub median_map: f64,
    pub median_rank1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned columns: label, median mAP, median Rank-1, then per-seed mAP.
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(7);
        let mut out = format!("# axis: {}\n", self.axis.as_str());
        let _ = write!(out, "{:<width$} {:>8} {:>8}", "setting", "mAP", "Rank-1");
        if let Some(first) = self.rows.first() {
            for s in &first.seeds {
                let _ = write!(out, " {:>8}", format!("s{s}"));
            }
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<width$} {:>8.4} {:>8.4}", r.label, r.median_map, r.median_rank1);
            for m in &r.map {
                let _ = write!(out, " {m:>8.4}");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub table: AblationTable,
    /// `(setting label, seed, log)` for every run in the table.
    pub logs: Vec<(String, u64, TrainLog)>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Trains and evaluates configurations on fixed splits, remembering results
/// so settings shared between axes are trained once.
pub struct AblationRunner<'a> {
    train: &'a Dataset,
    query: &'a Dataset,
    gallery: &'a Dataset,
    cache: Mutex<HashMap<String, Arc<RunOutput>>>,
}

impl<'a> AblationRunner<'a> {
    pub fn new(train: &'a Dataset, query: &'a Dataset, gallery: &'a Dataset) -> Self {
        Self {
            train,
            query,
            gallery,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn key(config: &TrainConfig) -> String {
        serde_json::to_string(config).expect("config serializes")
    }

    fn train_one(&self, config: &TrainConfig) -> Result<RunOutput> {
        let out = train(self.train, config, Some((self.query, self.gallery)), &mut ())?;
        let result = evaluate(&out.model, self.query, self.gallery)?;
        Ok(RunOutput { result, log: out.log })
    }

    /// Runs every configuration not yet cached, in parallel.
    pub fn run_all(&self, configs: &[TrainConfig]) -> Result<Vec<Arc<RunOutput>>> {
        let mut pending: Vec<&TrainConfig> = Vec::new();
        {
            let cache = self.cache.lock().expect("cache lock");
            for c in configs {
                let k = Self::key(c);
                if !cache.contains_key(&k) && !pending.iter().any(|p| Self::key(p) == k) {
                    pending.push(c);
                }
            }
        }
        let fresh: Vec<(String, RunOutput)> = pending
            .par_iter()
            .map(|c| Ok((Self::key(c), self.train_one(c)?)))
            .collect::<Result<_>>()?;
        let mut cache = self.cache.lock().expect("cache lock");
        for (k, out) in fresh {
            cache.insert(k, Arc::new(out));
        }
        Ok(configs.iter().map(|c| Arc::clone(&cache[&Self::key(c)])).collect())
    }

    pub fn run(&self, config: &TrainConfig) -> Result<Arc<RunOutput>> {
        Ok(self.run_all(std::slice::from_ref(config))?.remove(0))
    }

    /// Trains every setting of `axis` once per seed and tabulates medians.
    pub fn run_axis(&self, base: &TrainConfig, axis: AblationAxis, seeds: &[u64]) -> Result<AblationReport> {
        if seeds.is_empty() {
            return Err(Error::Config("ablation needs at least one seed".into()));
        }
        let settings = axis.settings(base);
        let configs: Vec<TrainConfig> = settings
            .iter()
            .flat_map(|s| {
                seeds.iter().map(|&seed| TrainConfig {
                    seed,
                    ..s.config.clone()
                })
            })
            .collect();
        for c in &configs {
            c.validate()?;
        }
        let outs = self.run_all(&configs)?;
        let mut rows = Vec::new();
        let mut logs = Vec::new();
        for (s, chunk) in settings.iter().zip(outs.chunks(seeds.len())) {
            let map: Vec<f64> = chunk.iter().map(|o| o.result.map).collect();
            let rank1: Vec<f64> = chunk.iter().map(|o| o.result.rank1()).collect();
            for (&seed, o) in seeds.iter().zip(chunk) {
                logs.push((s.label.clone(), seed, o.log.clone()));
            }
            rows.push(AblationRow {
                label: s.label.clone(),
                config: s.config.clone(),
                seeds: seeds.to_vec(),
                median_map: median(&map),
                median_rank1: median(&rank1),
                map,
                rank1,
            });
        }
        Ok(AblationReport {
            table: AblationTable { axis, rows },
            logs,
        })
    }
}

/// Convenience wrapper: a fresh [`AblationRunner`] over one axis.
pub fn run_ablation(
    train: &Dataset,
    query: &Dataset,
    gallery: &Dataset,
    base: &TrainConfig,
    axis: AblationAxis,
    seeds: &[u64],
) -> Result<AblationReport> {
    AblationRunner::new(train, query, gallery).run_axis(base, axis, seeds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SynthSpec};

    #[test]
    fn axis_names_round_trip() {
        for a in AblationAxis::ALL {
            assert_eq!(a.as_str().parse::<AblationAxis>().unwrap(), a);
        }
        assert!("depth".parse::<AblationAxis>().is_err());
    }

    #[test]
    fn settings_differ_only_in_their_variable() {
        let base = TrainConfig::default();
        let m = AblationAxis::MiningMode.settings(&base);
        assert_eq!(m.len(), 2);
        let mut a = m[0].config.clone();
        a.mining = m[1].config.mining;
        assert_eq!(a, m[1].config);

        let i = AblationAxis::InterMode.settings(&base);
        assert_eq!(i.iter().map(|s| s.label.as_str()).collect::<Vec<_>>(), ["intra-only", "C", "D"]);
        assert_eq!(i[0].config.lambda, 0.0);

        for axis in [AblationAxis::WeightingMode, AblationAxis::PositiveSampling] {
            assert!(axis.settings(&base).iter().all(|s| s.config.inter_mode == InterMode::Discrimination));
        }
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn baseline_row_equals_direct_train_call() {
        let s = generate_synthetic(&SynthSpec {
            n_identities: 20,
            n_test_identities: 10,
            n_cameras: 2,
            d_latent: 3,
            d_in: 6,
            camera_appearance_prob: 0.6,
            seed: 3,
            ..SynthSpec::default()
        })
        .unwrap();
        let base = TrainConfig {
            n_p: 4,
            n_k: 2,
            epochs: 4,
            warmup_epochs: 2,
            hidden_dim: 6,
            embed_dim: 3,
            k: 2,
            decay_epoch: 3,
            ..TrainConfig::default()
        };
        let report = run_ablation(&s.train, &s.query, &s.gallery, &base, AblationAxis::InterMode, &[5]).unwrap();
        assert_eq!(report.table.rows.len(), 3);
        assert_eq!(report.logs.len(), 3);
        let direct_cfg = TrainConfig {
            lambda: 0.0,
            seed: 5,
            ..base
        };
        let direct = train(&s.train, &direct_cfg, None, &mut ()).unwrap();
        let r = evaluate(&direct.model, &s.query, &s.gallery).unwrap();
        assert_eq!(report.table.row("intra-only").unwrap().map, vec![r.map]);
        assert!(report.table.to_text().contains("intra-only"));
    }
}
