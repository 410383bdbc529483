//! The alternating training loop: intra-camera warmup, then joint intra +
//! inter-camera optimization with a fresh affinity matrix every epoch.

pub mod config;
pub mod log;
pub mod sampler;

use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::affinity::{affinity_quality_map, build_affinity, soft_label_rows, AffinityMatrix, SoftLabelRow};
use crate::buffer::PersonBuffer;
use crate::checkpoint::Checkpoint;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::losses::{
    mined_triplet_loss, select_hardest_negative, select_positives, softmax_probs, weighted_cross_entropy,
    weighted_triplet_loss,
};
use crate::model::{ClassifierHead, EmbeddingModel, Gradients, HeadGrads, ModelGrads, Sgd};

pub use config::{InterMode, TrainConfig};
pub use log::{EpochRecord, Phase, TrainLog, TRAINLOG_COLUMNS, TRAINLOG_SCHEMA_VERSION};
pub use sampler::{classification_sampler, pk_sampler, SampleTable, TripletBatch};

// Independent random streams so that switching one consumer on or off never
// shifts the draws seen by another.
const STREAM_INIT: u64 = 0;
const STREAM_INTRA: u64 = 1;
const STREAM_CLASSIFICATION: u64 = 2;
const STREAM_POSITIVES: u64 = 3;
const STREAM_MINING: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// State visible to observers at the end of each epoch.
pub struct EpochState<'a> {
    pub record: &'a EpochRecord,
    pub model: &'a EmbeddingModel,
    pub head: &'a ClassifierHead,
    pub optimizer: &'a Sgd,
    pub buffer: &'a PersonBuffer,
}

impl EpochState<'_> {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            epoch: self.record.epoch,
            model: self.model.clone(),
            head: self.head.clone(),
            optimizer: self.optimizer.clone(),
            buffer: Some(self.buffer.clone()),
        }
    }
}

pub trait TrainObserver {
    fn epoch_end(&mut self, state: &EpochState<'_>) -> Result<()>;
}

impl TrainObserver for () {
    fn epoch_end(&mut self, _: &EpochState<'_>) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EmbeddingModel,
    pub head: ClassifierHead,
    pub optimizer: Sgd,
    pub buffer: PersonBuffer,
    pub log: TrainLog,
    pub last_affinity: Option<AffinityMatrix>,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            epoch: self.log.last().map_or(0, |r| r.epoch),
            model: self.model.clone(),
            head: self.head.clone(),
            optimizer: self.optimizer.clone(),
            buffer: Some(self.buffer.clone()),
        }
    }
}

fn gather(ds: &Dataset, idx: &[usize]) -> Array2<f64> {
    let mut x = Array2::zeros((idx.len(), ds.d_in()));
    for (mut row, &i) in x.rows_mut().into_iter().zip(idx) {
        row.assign(&ndarray::ArrayView1::from(&ds.samples()[i].features));
    }
    x
}

#[derive(Default)]
struct EpochTotals {
    intra: f64,
    inter: f64,
    total: f64,
    active: usize,
    skipped_anchors: usize,
    floored: usize,
}

struct Soft {
    rows: Vec<SoftLabelRow>,
}

/// Per-iteration inter-camera term: summed embedding gradients for the PK
/// batch, plus any extra model/head gradients it produced.
struct InterTerm {
    loss: f64,
    batch_grad: Array2<f64>,
    model: Option<ModelGrads>,
    head: Option<HeadGrads>,
    skipped: usize,
    floored: usize,
}

struct Loop<'a> {
    ds: &'a Dataset,
    cfg: &'a TrainConfig,
    table: SampleTable,
    cameras: Vec<usize>,
    per_camera: usize,
    model: EmbeddingModel,
    head: ClassifierHead,
    opt: Sgd,
    buffer: PersonBuffer,
    rng_intra: ChaCha8Rng,
    rng_cls: ChaCha8Rng,
    rng_pos: ChaCha8Rng,
    rng_mining: ChaCha8Rng,
    iteration: usize,
}

impl Loop<'_> {
    fn discrimination(&mut self, batch: &TripletBatch, emb: &Array2<f64>, soft: &Soft) -> Result<InterTerm> {
        let n = batch.len();
        let cfg = self.cfg;
        let mut batch_grad = Array2::zeros(emb.raw_dim());
        let mut skipped = 0;
        let mut picked = Vec::with_capacity(n);
        for a in 0..n {
            let row = &soft.rows[batch.classes[a]];
            if row.degenerate {
                skipped += 1;
                continue;
            }
            let Some(neg) = select_hardest_negative(emb.row(a), emb.view(), &batch.classes, batch.classes[a]) else {
                skipped += 1;
                continue;
            };
            let pos = select_positives(
                row,
                &self.table.by_class,
                cfg.n_k,
                cfg.weighting,
                cfg.positive_sampling,
                &mut self.rng_pos,
            )?;
            picked.push((a, neg, pos));
        }
        if picked.is_empty() {
            return Ok(InterTerm {
                loss: 0.0,
                batch_grad,
                model: None,
                head: None,
                skipped,
                floored: 0,
            });
        }
        let pos_samples: Vec<usize> = picked.iter().flat_map(|(_, _, p)| p.iter().map(|q| q.sample)).collect();
        let pos_cache = self.model.forward_cached(gather(self.ds, &pos_samples).view())?;
        let mut pos_grad = Array2::zeros(pos_cache.output.raw_dim());
        let scale = 1.0 / n as f64;
        let mut loss = 0.0;
        let mut offset = 0;
        for (a, neg, pos) in &picked {
            let views: Vec<_> = pos
                .iter()
                .enumerate()
                .map(|(j, p)| (pos_cache.output.row(offset + j), p.weight))
                .collect();
            let v = weighted_triplet_loss(emb.row(*a), &views, emb.row(*neg), cfg.margin)?;
            loss += v.loss;
            if v.active {
                let mut ga = batch_grad.row_mut(*a);
                ga.scaled_add(scale, &v.grad_anchor);
                let mut gn = batch_grad.row_mut(*neg);
                gn.scaled_add(scale, &v.grad_negative);
                for (j, g) in v.grad_positives.iter().enumerate() {
                    pos_grad.row_mut(offset + j).scaled_add(scale, g);
                }
            }
            offset += pos.len();
        }
        let model = self.model.backward(&pos_cache, pos_grad.view(), false)?;
        Ok(InterTerm {
            loss: loss * scale,
            batch_grad,
            model: Some(model),
            head: None,
            skipped,
            floored: 0,
        })
    }

    fn classification(&mut self, soft: &Soft, batch_shape: (usize, usize)) -> Result<InterTerm> {
        let idx = classification_sampler(&self.table, self.per_camera, &mut self.rng_cls)?;
        let cache = self.model.forward_cached(gather(self.ds, &idx).view())?;
        let scores = self.head.scores(cache.output.view())?;
        let b = idx.len();
        let scale = 1.0 / b as f64;
        let mut grad_scores = Array2::zeros(scores.raw_dim());
        let (mut loss, mut skipped, mut floored) = (0.0, 0, 0);
        for (i, &s) in idx.iter().enumerate() {
            let row = &soft.rows[self.ds.class_of_sample(s)];
            if row.degenerate {
                skipped += 1;
                continue;
            }
            let probs = softmax_probs(scores.row(i));
            let ce = weighted_cross_entropy(probs.view(), row)?;
            loss += ce.loss;
            floored += ce.floored;
            grad_scores.row_mut(i).scaled_add(scale, &ce.grad_scores);
        }
        let (head, grad_emb) = self.head.backward(cache.output.view(), grad_scores.view())?;
        let model = self.model.backward(&cache, grad_emb.view(), false)?;
        Ok(InterTerm {
            loss: loss * scale,
            batch_grad: Array2::zeros(batch_shape),
            model: Some(model),
            head: Some(head),
            skipped,
            floored,
        })
    }

    fn iterate(&mut self, epoch: usize, soft: Option<&Soft>, totals: &mut EpochTotals) -> Result<()> {
        let cfg = self.cfg;
        let camera = self.cameras[self.iteration % self.cameras.len()];
        let batch = pk_sampler(self.ds, &self.table, camera, cfg.n_p, cfg.n_k, &mut self.rng_intra)?;
        let cache = self.model.forward_cached(gather(self.ds, &batch.samples).view())?;
        let emb = &cache.output;
        let n = batch.len() as f64;
        let intra = mined_triplet_loss(emb.view(), &batch.classes, cfg.margin, cfg.mining, &mut self.rng_mining)?;
        let intra_loss = intra.loss / n;
        let mut upstream = intra.grad / n;

        let mut inter_loss = 0.0;
        let mut extra_model: Vec<ModelGrads> = Vec::new();
        let mut head_grads = None;
        if let Some(soft) = soft.filter(|_| cfg.lambda > 0.0) {
            let mut terms = Vec::new();
            if cfg.inter_mode.uses_triplet() {
                terms.push(self.discrimination(&batch, emb, soft)?);
            }
            if cfg.inter_mode.uses_classification() {
                terms.push(self.classification(soft, emb.dim())?);
            }
            for t in terms {
                inter_loss += t.loss;
                upstream.scaled_add(cfg.lambda, &t.batch_grad);
                if let Some(mut g) = t.model {
                    g.scale(cfg.lambda);
                    extra_model.push(g);
                }
                if let Some(mut h) = t.head {
                    h.weight *= cfg.lambda;
                    h.bias *= cfg.lambda;
                    head_grads = Some(h);
                }
                totals.skipped_anchors += t.skipped;
                totals.floored += t.floored;
            }
        }

        let total = intra_loss + cfg.lambda * inter_loss;
        if !total.is_finite() {
            return Err(Error::Diverged {
                epoch,
                iteration: self.iteration,
                msg: format!("loss is {total}"),
            });
        }
        let mut grads = self.model.backward(&cache, upstream.view(), false)?;
        for g in &extra_model {
            grads.accumulate(g);
        }
        self.opt
            .step(
                &mut self.model,
                &mut self.head,
                Gradients {
                    model: &grads,
                    head: head_grads.as_ref(),
                },
                epoch,
            )
            .map_err(|e| Error::Diverged {
                epoch,
                iteration: self.iteration,
                msg: e.to_string(),
            })?;

        // Buffer update from this iteration's embeddings, one call per person.
        let mut order: Vec<usize> = Vec::new();
        for &c in &batch.classes {
            if !order.contains(&c) {
                order.push(c);
            }
        }
        for c in order {
            let rows: Vec<usize> = (0..batch.len()).filter(|&i| batch.classes[i] == c).collect();
            self.buffer.update_person(c, emb.select(Axis(0), &rows).view())?;
        }
        self.buffer.tick();

        totals.intra += intra_loss;
        totals.inter += inter_loss;
        totals.total += total;
        totals.active += intra.active;
        totals.skipped_anchors += intra.skipped;
        self.iteration += 1;
        Ok(())
    }
}

/// Trains the embedding model on `dataset` under `config`.
///
/// `validation` is an optional `(query, gallery)` pair scored every
/// `eval_every` epochs and at the final epoch.
pub fn train(
    dataset: &Dataset,
    config: &TrainConfig,
    validation: Option<(&Dataset, &Dataset)>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let per_camera = config.images_per_camera(dataset.n_cameras())?;
    let table = SampleTable::new(dataset);
    let mut log = TrainLog::default();
    let mut cameras = Vec::new();
    for cam in 0..dataset.n_cameras() {
        if table.persons_in(dataset, cam).len() >= 2 {
            cameras.push(cam);
        } else {
            log.excluded_cameras.push(cam);
        }
    }
    if cameras.is_empty() {
        return Err(Error::Contract("no camera has the 2 persons needed for triplets".into()));
    }
    let class_truth = dataset.class_truth();
    let has_truth = dataset.has_truth();

    let mut rng_init = stream(config.seed, STREAM_INIT);
    let model = EmbeddingModel::new(dataset.d_in(), config.hidden_dim, config.embed_dim, &mut rng_init);
    let head = ClassifierHead::new(dataset.index().num_classes(), config.embed_dim, &mut rng_init);
    let mut lp = Loop {
        ds: dataset,
        cfg: config,
        table,
        cameras,
        per_camera,
        model,
        head,
        opt: Sgd::new(config.optimizer()),
        buffer: PersonBuffer::new(dataset.index().num_classes(), config.embed_dim),
        rng_intra: stream(config.seed, STREAM_INTRA),
        rng_cls: stream(config.seed, STREAM_CLASSIFICATION),
        rng_pos: stream(config.seed, STREAM_POSITIVES),
        rng_mining: stream(config.seed, STREAM_MINING),
        iteration: 0,
    };
    let iters = dataset.len().div_ceil(config.n_p * config.n_k);
    let mut last_affinity = None;

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let joint = epoch > config.warmup_epochs;
        let mut record = EpochRecord {
            epoch,
            phase: if joint { Phase::Joint } else { Phase::Warmup },
            lr_body: config.optimizer().learning_rates(epoch).0,
            intra_loss: 0.0,
            inter_loss: 0.0,
            total_loss: 0.0,
            active_triplets: 0,
            affinity_built: false,
            affinity_quality: None,
            sigma_sq: None,
            degenerate_rows: 0,
            skipped_anchors: 0,
            own_class_zero_weight: 0,
            floored_log_probs: 0,
            val_map: None,
            val_rank1: None,
            wall_time_ms: 0.0,
        };

        let soft = if joint {
            let built = build_affinity(&lp.buffer, dataset.index(), config.k, config.mask_same_camera)?;
            let a = built.matrix;
            log.affinity_builds += 1;
            record.affinity_built = true;
            record.sigma_sq = Some(a.sigma_sq);
            if has_truth {
                record.affinity_quality = affinity_quality_map(&a, dataset.index(), &class_truth).ok();
            }
            let rows = soft_label_rows(&a);
            record.degenerate_rows = rows.iter().filter(|r| r.degenerate).count();
            record.own_class_zero_weight = rows.iter().filter(|r| !r.degenerate && r.weight(r.class) == 0.0).count();
            last_affinity = Some(a);
            Some(Soft { rows })
        } else {
            None
        };

        let mut totals = EpochTotals::default();
        for _ in 0..iters {
            lp.iterate(epoch, soft.as_ref(), &mut totals)?;
        }
        let it = iters as f64;
        record.intra_loss = totals.intra / it;
        record.inter_loss = totals.inter / it;
        record.total_loss = totals.total / it;
        record.active_triplets = totals.active;
        record.skipped_anchors = totals.skipped_anchors;
        record.floored_log_probs = totals.floored;

        let due = epoch == config.epochs || (config.eval_every > 0 && epoch % config.eval_every == 0);
        if let (true, Some((q, g))) = (due, validation) {
            let r = evaluate(&lp.model, q, g)?;
            record.val_map = Some(r.map);
            record.val_rank1 = Some(r.rank1());
        }
        record.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
        observer.epoch_end(&EpochState {
            record: &record,
            model: &lp.model,
            head: &lp.head,
            optimizer: &lp.opt,
            buffer: &lp.buffer,
        })?;
        log.records.push(record);
    }

    Ok(TrainOutcome {
        model: lp.model,
        head: lp.head,
        optimizer: lp.opt,
        buffer: lp.buffer,
        log,
        last_affinity,
    })
}
