//! Reference features: frame quality scoring, reference-frame selection and
//! head/body/leg pooling on the reference frame.

use rand::Rng;
use rapa_tensor::nn::{BatchNorm, Ctx, Linear};
use rapa_tensor::{Graph, ParamStore, PoolMode, Real, Roi, Var};

use crate::dataset::Keypoints;
use crate::error::{Error, Result};

/// Scores every frame of a clip: `q_t = σ(BN(linear(l_t)))`, with the batch
/// norm taken over the frames of the clip.
#[derive(Clone, Debug)]
pub struct QualityBlock {
    linear: Linear,
    norm: BatchNorm,
}

impl QualityBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        QualityBlock {
            linear: Linear::new_unbiased(store, &format!("{name}.linear"), channels, 1, 1.0, rng),
            norm: BatchNorm::new(store, &format!("{name}.bn"), 1, false),
        }
    }

    /// Returns `(logits, q)`, both `(T)`, for descriptors `(T, C)`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, descriptors: Var) -> Result<(Var, Var)> {
        let t = ctx.g.shape(descriptors)[0];
        let z = self.linear.forward(ctx, descriptors)?;
        let z = self.norm.forward(ctx, z)?;
        let logits = ctx.g.reshape(z, &[t])?;
        let q = ctx.g.sigmoid(logits);
        Ok((logits, q))
    }
}

/// Index of the highest score; the earliest frame wins ties.
pub fn select_reference<T: Real>(q: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// Head, body and leg regions in map coordinates.
///
/// Image rows `[head_top, neck)`, `[neck, hip)` and `[hip, ankle]` become
/// map rows with each top edge rounded down. A part ends where the next one
/// starts, and the leg ends at the rounded-up bottom of the ankle row, so
/// the parts tile one contiguous band. Parts are at least one row tall:
/// a collapsed part grows downward, pushing later parts, and the leg grows
/// upward when it hits the bottom of the map. All regions span the full map
/// width.
pub fn part_rois(kp: &Keypoints, scale_rows: f64, map_h: usize, map_w: usize) -> Result<[Roi; 3]> {
    if !(kp.head_top < kp.neck && kp.neck < kp.hip && kp.hip < kp.ankle) {
        return Err(Error::Data(format!("keypoint rows {:?} are not strictly increasing", kp.rows())));
    }
    if map_h < 3 || map_w == 0 {
        return Err(Error::Data(format!("a {map_h}x{map_w} map cannot hold three parts")));
    }
    let down = |r: usize| ((r as f64 / scale_rows).floor() as usize).min(map_h);
    let up = |r: usize| ((r as f64 / scale_rows).ceil() as usize).min(map_h);
    let mut edges = [down(kp.head_top), down(kp.neck), down(kp.hip), up(kp.ankle + 1)];
    for i in 1..4 {
        edges[i] = edges[i].max(edges[i - 1] + 1);
    }
    if edges[3] > map_h {
        edges[3] = map_h;
        for i in (0..3).rev() {
            edges[i] = edges[i].min(edges[i + 1] - 1);
        }
    }
    Ok(band_rois(edges, map_w))
}

/// Equal thirds of the map height, for references without keypoints.
pub fn hard_rois(map_h: usize, map_w: usize) -> Result<[Roi; 3]> {
    if map_h < 3 || map_w == 0 {
        return Err(Error::Data(format!("a {map_h}x{map_w} map cannot hold three parts")));
    }
    Ok(band_rois([0, map_h / 3, 2 * map_h / 3, map_h], map_w))
}

fn band_rois(edges: [usize; 4], map_w: usize) -> [Roi; 3] {
    std::array::from_fn(|p| Roi {
        top: edges[p],
        bottom: edges[p + 1],
        left: 0,
        right: map_w,
    })
}

/// Reference frame index, regions and the six pooled reference vectors.
#[derive(Clone, Debug)]
pub struct ReferenceSet {
    pub k: usize,
    pub rois: [Roi; 3],
    /// Max-pooled `r_p^m`, each `(C)`.
    pub max: [Var; 3],
    /// Average-pooled `r_p^a`, each `(C)`.
    pub avg: [Var; 3],
}

/// Pools the regions of frame `k` of `maps` `(T, C, H, W)`.
pub fn reference_features<T: Real>(g: &mut Graph<T>, maps: Var, k: usize, rois: [Roi; 3]) -> Result<ReferenceSet> {
    let frames = g.shape(maps)[0];
    if k >= frames {
        return Err(Error::Data(format!("reference frame {k} outside a {frames}-frame clip")));
    }
    let fk = g.select(maps, k)?;
    let mut max = Vec::with_capacity(3);
    let mut avg = Vec::with_capacity(3);
    for roi in rois {
        max.push(g.roi_pool(fk, roi, PoolMode::Max)?);
        avg.push(g.roi_pool(fk, roi, PoolMode::Avg)?);
    }
    Ok(ReferenceSet {
        k,
        rois,
        max: max.try_into().expect("three parts"),
        avg: avg.try_into().expect("three parts"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(rois: &[Roi; 3]) -> Vec<(usize, usize)> {
        rois.iter().map(|r| (r.top, r.bottom)).collect()
    }

    #[test]
    fn example_partition() {
        let kp = Keypoints::new(0, 64, 160, 255, 256).unwrap();
        let rois = part_rois(&kp, 8.0, 32, 16).unwrap();
        assert_eq!(rows(&rois), [(0, 8), (8, 20), (20, 32)]);
        assert!(rois.iter().all(|r| r.left == 0 && r.right == 16));
    }

    #[test]
    fn collapsed_parts_keep_one_row() {
        let kp = Keypoints::new(0, 1, 2, 5, 256).unwrap();
        assert_eq!(rows(&part_rois(&kp, 8.0, 32, 16).unwrap()), [(0, 1), (1, 2), (2, 3)]);
        let kp = Keypoints::new(250, 252, 253, 255, 256).unwrap();
        assert_eq!(rows(&part_rois(&kp, 8.0, 32, 16).unwrap()), [(29, 30), (30, 31), (31, 32)]);
    }

    #[test]
    fn selection_ties_take_first() {
        assert_eq!(select_reference(&[0.2, 0.9, 0.5, 0.9]), 1);
        assert_eq!(select_reference(&[0.7]), 0);
        assert_eq!(select_reference(&[0.1, 0.2, 0.3]), 2);
    }

    #[test]
    fn thirds() {
        assert_eq!(rows(&hard_rois(32, 16).unwrap()), [(0, 10), (10, 21), (21, 32)]);
        assert!(hard_rois(2, 4).is_err());
    }
}
