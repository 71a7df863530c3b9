//! Retrieval protocol: clip splitting, video embeddings, Euclidean ranking,
//! CMC and mAP.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Remainder;
use crate::error::{Error, Result};

/// Frame indices of consecutive length-`t` clips covering `n` frames.
///
/// A short final remainder is padded by repeating its last frame, or
/// dropped (unless it is the only clip).
pub fn split_clips(n: usize, t: usize, remainder: Remainder) -> Vec<Vec<usize>> {
    assert!(n > 0 && t > 0, "split_clips needs frames and a positive clip length");
    let mut clips = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + t).min(n);
        if end - start < t && remainder == Remainder::Drop && !clips.is_empty() {
            break;
        }
        let mut clip: Vec<usize> = (start..end).collect();
        clip.resize(t, end - 1);
        clips.push(clip);
        start += t;
    }
    clips
}

/// Mean of the clip embeddings of one video.
pub fn video_embedding(clips: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = clips.first().ok_or_else(|| Error::Data("video has no clips".into()))?;
    let mut sum = vec![0.0; first.len()];
    for c in clips {
        if c.len() != sum.len() {
            return Err(Error::Data(format!("clip embeddings of length {} and {}", sum.len(), c.len())));
        }
        sum.iter_mut().zip(c).for_each(|(s, v)| *s += v);
    }
    let n = clips.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

/// `d[i][j] = ‖q_i − g_j‖₂`.
pub fn distance_matrix(queries: &[Vec<f64>], gallery: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let dim = queries.first().or(gallery.first()).map_or(0, Vec::len);
    if let Some(bad) = queries.iter().chain(gallery).find(|v| v.len() != dim) {
        return Err(Error::Data(format!("embedding of length {} among length-{dim} embeddings", bad.len())));
    }
    Ok(queries
        .iter()
        .map(|q| {
            gallery
                .iter()
                .map(|g| q.iter().zip(g).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                .collect()
        })
        .collect())
}

/// Identity and camera of a query or gallery item.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub identity: usize,
    pub camera: usize,
}

/// Gallery positions of query `qi` after removing same-identity
/// same-camera items, sorted by distance then gallery index; returns the
/// ranked relevance flags.
fn ranked_relevance(dist: &[f64], query: Label, gallery: &[Label]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..gallery.len())
        .filter(|&j| !(gallery[j].identity == query.identity && gallery[j].camera == query.camera))
        .collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    order.into_iter().map(|j| gallery[j].identity == query.identity).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `(rank, CMC value)` pairs in the requested order.
    pub cmc: Vec<(usize, f64)>,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub queries: usize,
    /// Queries without any valid gallery match; left out of every metric.
    pub excluded: Vec<usize>,
}

impl Metrics {
    pub fn rank(&self, r: usize) -> Option<f64> {
        self.cmc.iter().find(|&&(k, _)| k == r).map(|&(_, v)| v)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,value\n");
        for (r, v) in &self.cmc {
            let _ = writeln!(s, "{r},{v}");
        }
        let _ = writeln!(s, "mAP,{}", self.map);
        s
    }

    pub fn to_json(&self) -> String {
        let mut obj = serde_json::Map::new();
        for (r, v) in &self.cmc {
            obj.insert(format!("rank{r}"), (*v).into());
        }
        obj.insert("mAP".into(), self.map.into());
        obj.insert("queries".into(), self.queries.into());
        obj.insert("excluded".into(), self.excluded.clone().into());
        serde_json::to_string_pretty(&obj).expect("metrics serialise")
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, text) in [("metrics.csv", self.to_csv()), ("metrics.json", self.to_json())] {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// CMC at each rank in `ranks` and mAP over the queries that have at least
/// one valid match.
pub fn evaluate(dist: &[Vec<f64>], queries: &[Label], gallery: &[Label], ranks: &[usize]) -> Result<Metrics> {
    if dist.len() != queries.len() || dist.iter().any(|row| row.len() != gallery.len()) {
        return Err(Error::Data(format!(
            "distance matrix does not match {} queries x {} gallery items",
            queries.len(),
            gallery.len()
        )));
    }
    let mut hits = vec![0usize; ranks.len()];
    let mut ap_sum = 0.0;
    let mut excluded = Vec::new();
    let mut valid = 0usize;
    for (qi, (row, &q)) in dist.iter().zip(queries).enumerate() {
        let rel = ranked_relevance(row, q, gallery);
        let Some(first) = rel.iter().position(|&r| r) else {
            excluded.push(qi);
            continue;
        };
        valid += 1;
        for (h, &r) in hits.iter_mut().zip(ranks) {
            if first < r {
                *h += 1;
            }
        }
        ap_sum += average_precision(&rel);
    }
    let denom = valid.max(1) as f64;
    Ok(Metrics {
        cmc: ranks.iter().zip(&hits).map(|(&r, &h)| (r, h as f64 / denom)).collect(),
        map: ap_sum / denom,
        queries: valid,
        excluded,
    })
}

/// `(1/R) Σ_k precision@(rank of k-th relevant item)`.
fn average_precision(rel: &[bool]) -> f64 {
    let mut found = 0usize;
    let mut sum = 0.0;
    for (i, &r) in rel.iter().enumerate() {
        if r {
            found += 1;
            sum += found as f64 / (i + 1) as f64;
        }
    }
    if found == 0 {
        0.0
    } else {
        sum / found as f64
    }
}

pub fn cmc(dist: &[Vec<f64>], queries: &[Label], gallery: &[Label], ranks: &[usize]) -> Result<Vec<f64>> {
    Ok(evaluate(dist, queries, gallery, ranks)?.cmc.into_iter().map(|(_, v)| v).collect())
}

pub fn mean_ap(dist: &[Vec<f64>], queries: &[Label], gallery: &[Label]) -> Result<f64> {
    Ok(evaluate(dist, queries, gallery, &[1])?.map)
}
