//! Single-query retrieval evaluation: mAP and CMC.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::EmbeddingModel;

/// Ranks at which CMC accuracy is reported.
pub const CMC_RANKS: [usize; 4] = [1, 5, 10, 20];

/// Average precision of a ranked list given per-position relevance.
/// `None` when nothing is relevant.
pub fn average_precision(relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub map: f64,
    /// Accuracy at each rank of [`CMC_RANKS`], in that order.
    pub cmc: Vec<f64>,
    pub n_queries: usize,
    pub n_skipped: usize,
}

impl RetrievalResult {
    pub fn rank1(&self) -> f64 {
        self.cmc[0]
    }

    pub fn rank(&self, k: usize) -> Option<f64> {
        CMC_RANKS.iter().position(|&r| r == k).map(|i| self.cmc[i])
    }

    /// Aligned two-line text table.
    pub fn to_text(&self) -> String {
        let mut head = format!("{:>8}", "mAP");
        let mut vals = format!("{:>8.4}", self.map);
        for (k, v) in CMC_RANKS.iter().zip(&self.cmc) {
            head.push_str(&format!(" {:>8}", format!("Rank-{k}")));
            vals.push_str(&format!(" {v:>8.4}"));
        }
        format!("{head} {:>8} {:>8}\n{vals} {:>8} {:>8}\n", "queries", "skipped", self.n_queries, self.n_skipped)
    }
}

/// Camera and identity of one retrieval item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ItemMeta {
    pub camera: usize,
    pub identity: usize,
}

fn metas(ds: &Dataset) -> Result<Vec<ItemMeta>> {
    ds.samples()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.truth
                .map(|identity| ItemMeta {
                    camera: s.camera,
                    identity,
                })
                .ok_or_else(|| Error::Contract(format!("{} sample {i} has no truth identity", ds.split().as_str())))
        })
        .collect()
}

fn inputs(ds: &Dataset) -> Array2<f64> {
    let mut x = Array2::zeros((ds.len(), ds.d_in()));
    for (mut row, s) in x.rows_mut().into_iter().zip(ds.samples()) {
        row.assign(&ndarray::ArrayView1::from(&s.features));
    }
    x
}

/// Embeds both splits with `model` and scores retrieval.
pub fn evaluate(model: &EmbeddingModel, query: &Dataset, gallery: &Dataset) -> Result<RetrievalResult> {
    if query.d_in() != gallery.d_in() {
        return Err(Error::Dimension {
            what: "gallery input",
            expected: query.d_in(),
            got: gallery.d_in(),
        });
    }
    let q = model.forward_batch(inputs(query).view())?;
    let g = model.forward_batch(inputs(gallery).view())?;
    evaluate_embeddings(q.view(), &metas(query)?, g.view(), &metas(gallery)?)
}

/// Ranks the gallery by ascending Euclidean distance for each query, drops
/// gallery items sharing both identity and camera with the query, and
/// accumulates AP and CMC. Distance ties keep gallery order.
pub fn evaluate_embeddings(
    query: ArrayView2<f64>,
    query_meta: &[ItemMeta],
    gallery: ArrayView2<f64>,
    gallery_meta: &[ItemMeta],
) -> Result<RetrievalResult> {
    if query.nrows() != query_meta.len() || gallery.nrows() != gallery_meta.len() {
        return Err(Error::Contract("embedding rows and metadata lengths differ".into()));
    }
    if query.ncols() != gallery.ncols() {
        return Err(Error::Dimension {
            what: "gallery embedding",
            expected: query.ncols(),
            got: gallery.ncols(),
        });
    }
    let mut ap_sum = 0.0;
    let mut hits = [0usize; CMC_RANKS.len()];
    let (mut evaluated, mut skipped) = (0usize, 0usize);
    for (qi, qm) in query_meta.iter().enumerate() {
        let qv = query.row(qi);
        let mut ranked: Vec<(usize, f64)> = gallery_meta
            .iter()
            .enumerate()
            .filter(|(_, gm)| !(gm.identity == qm.identity && gm.camera == qm.camera))
            .map(|(gi, _)| {
                let d: f64 = qv.iter().zip(gallery.row(gi)).map(|(a, b)| (a - b) * (a - b)).sum();
                (gi, d)
            })
            .collect();
        ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let relevance: Vec<bool> = ranked.iter().map(|&(gi, _)| gallery_meta[gi].identity == qm.identity).collect();
        let Some(ap) = average_precision(&relevance) else {
            skipped += 1;
            continue;
        };
        evaluated += 1;
        ap_sum += ap;
        let first = relevance.iter().position(|&r| r).expect("has a match");
        for (h, &k) in hits.iter_mut().zip(&CMC_RANKS) {
            if first < k {
                *h += 1;
            }
        }
    }
    if evaluated == 0 {
        return Err(Error::AllQueriesSkipped(skipped));
    }
    Ok(RetrievalResult {
        map: ap_sum / evaluated as f64,
        cmc: hits.iter().map(|&h| h as f64 / evaluated as f64).collect(),
        n_queries: evaluated,
        n_skipped: skipped,
    })
}
