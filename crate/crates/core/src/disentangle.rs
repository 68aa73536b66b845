//! Element-wise Pearson similarity (EleSim) against the empty-scene reference,
//! soft background masks, and the background/foreground feature split.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_extractor::{FeatureExtractor, FeaturePyramid};
use crate::tensor::{Shape, Tape, Tensor, Var};

pub const DEFAULT_GAMMA: f32 = 10.0;
pub const DEFAULT_S0: f32 = 0.5;
pub const DEFAULT_THRESHOLD: f32 = 0.5;
pub const MAX_NEGATIVES: usize = 64;

/// Sigmoid gain, center and binarization threshold of the mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskParams {
    pub gamma: f32,
    pub s0: f32,
    pub threshold: f32,
}

impl Default for MaskParams {
    fn default() -> Self {
        MaskParams {
            gamma: DEFAULT_GAMMA,
            s0: DEFAULT_S0,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl MaskParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::Parameter(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        if !self.s0.is_finite() || !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Parameter(format!(
                "s0 must be finite and the threshold in [0, 1], got {} and {}",
                self.s0, self.threshold
            )));
        }
        Ok(())
    }
}

/// Per-location Pearson scores of one stage, shape (B,1,H,W).
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap {
    pub stage: String,
    pub scores: Tensor,
}

/// Soft background masks per stage, each (B,1,H,W) in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub masks: Vec<(String, Tensor)>,
    pub params: MaskParams,
}

impl MaskSet {
    pub fn get(&self, stage: &str) -> Option<&Tensor> {
        self.masks.iter().find(|(n, _)| n == stage).map(|(_, t)| t)
    }

    /// 1 where the location is background (M > t), else 0.
    pub fn binarized(&self, stage: &str) -> Option<Tensor> {
        self.get(stage).map(|m| binarize(m, self.params.threshold))
    }
}

pub fn binarize(mask: &Tensor, threshold: f32) -> Tensor {
    mask.map(|m| if m > threshold { 1.0 } else { 0.0 })
}

/// Pearson correlation across channels at every location. Each vector is
/// centered by its own channel mean. The reference is always detached.
pub fn elesim_on_tape(tape: &Tape, feat: Var, reference: Var) -> Result<Var> {
    let (fs, rs) = (tape.shape(feat), tape.shape(reference));
    if fs != rs {
        let axis = ["batch", "channel", "height", "width"]
            .into_iter()
            .zip(fs.0.iter().zip(rs.0.iter()))
            .find(|(_, (a, b))| a != b)
            .map(|(n, _)| n)
            .unwrap_or("shape");
        return Err(Error::dim("elesim", axis, fs, rs));
    }
    if fs.c() < 2 {
        return Err(Error::dim("elesim", "channel", ">= 2", fs.c()));
    }
    let reference = tape.detach(reference);
    let centered = |x: Var| -> Result<Var> {
        let mu = tape.channel_mean(x)?;
        tape.sub(x, mu)
    };
    let a = centered(feat)?;
    let b = centered(reference)?;
    let num = tape.channel_sum(tape.mul(a, b)?)?;
    let va = tape.channel_sum(tape.square(a))?;
    let vb = tape.channel_sum(tape.square(b))?;
    let den = tape.sqrt(tape.mul(va, vb)?);
    tape.div(num, den)
}

pub fn elesim(feat: &Tensor, reference: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let f = tape.constant(feat.clone());
    let r = tape.constant(reference.clone());
    let p = elesim_on_tape(&tape, f, r)?;
    Ok(tape.value(p))
}

/// M = sigmoid(γ (P − s0)); high similarity to the reference means background.
pub fn to_mask_on_tape(tape: &Tape, scores: Var, gamma: f32, s0: f32) -> Result<Var> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::Parameter(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    Ok(tape.sigmoid(tape.scale(tape.add_scalar(scores, -s0), gamma)))
}

pub fn to_mask(scores: &Tensor, gamma: f32, s0: f32) -> Result<Tensor> {
    let tape = Tape::new();
    let p = tape.constant(scores.clone());
    let m = to_mask_on_tape(&tape, p, gamma, s0)?;
    Ok(tape.value(m))
}

/// Splits features into (background, foreground) = (M ⊙ ζ, (1 − M) ⊙ ζ).
///
/// The foreground is formed as ζ − M⊙ζ and the background then recovered as
/// ζ − ζ^f. For |M⊙ζ| ≤ |ζ| the second subtraction is exact (Fast2Sum), so the
/// two parts add back to ζ bit for bit.
pub fn split_on_tape(tape: &Tape, feat: Var, mask: Var) -> Result<(Var, Var)> {
    let (fs, ms) = (tape.shape(feat), tape.shape(mask));
    if ms.c() != 1 && ms.c() != fs.c() {
        return Err(Error::dim(
            "split",
            "channel",
            format!("1 or {}", fs.c()),
            ms.c(),
        ));
    }
    let scaled = tape.mul(feat, mask)?;
    if tape.shape(scaled) != fs {
        return Err(Error::dim("split", "mask", fs, ms));
    }
    let fg = tape.sub(feat, scaled)?;
    let bg = tape.sub(feat, fg)?;
    Ok((bg, fg))
}

pub fn split(feat: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let f = tape.constant(feat.clone());
    let m = tape.constant(mask.clone());
    let (bg, fg) = split_on_tape(&tape, f, m)?;
    Ok((tape.value(bg), tape.value(fg)))
}

/// Hard-negative count for a stage of the given extent: min(64, ⌈HW/4⌉).
pub fn default_negatives(h: usize, w: usize) -> usize {
    MAX_NEGATIVES.min((h * w).div_ceil(4))
}

/// For each batch item, the `k` row-major location indices with the highest
/// foreground probability 1 − M. Ties keep row-major order.
pub fn hard_negative_select(mask: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    let s = mask.shape();
    if s.c() != 1 {
        return Err(Error::dim("hard_negative_select", "channel", 1, s.c()));
    }
    if k == 0 {
        return Err(Error::Parameter(
            "hard-negative count must be positive".into(),
        ));
    }
    if k > s.plane() {
        return Err(Error::Parameter(format!(
            "hard-negative count {k} exceeds the {} locations of the map",
            s.plane()
        )));
    }
    Ok((0..s.n())
        .map(|b| {
            let plane = mask.plane(b, 0);
            let mut idx: Vec<usize> = (0..plane.len()).collect();
            // Stable sort on ascending M is descending 1 − M with row-major ties.
            idx.sort_by(|&i, &j| plane[i].total_cmp(&plane[j]));
            idx.truncate(k);
            idx
        })
        .collect())
}

/// EleSim scores and masks of `image` against a cached reference pyramid.
pub fn disentangle(
    extractor: &FeatureExtractor,
    image: &Tensor,
    reference: &FeaturePyramid,
    stages: &[String],
    params: MaskParams,
) -> Result<(Vec<SimilarityMap>, MaskSet)> {
    params.validate()?;
    let pyr = extractor.extract(image)?;
    let mut sims = Vec::new();
    let mut masks = Vec::new();
    for stage in stages {
        let missing = || Error::Config(format!("pyramid has no stage {stage:?}"));
        let f = pyr.get(stage).ok_or_else(missing)?;
        let r = reference.get(stage).ok_or_else(missing)?;
        let r = broadcast_batch(r, f.shape().n())?;
        let scores = elesim(f, &r)?;
        masks.push((stage.clone(), to_mask(&scores, params.gamma, params.s0)?));
        sims.push(SimilarityMap {
            stage: stage.clone(),
            scores,
        });
    }
    Ok((sims, MaskSet { masks, params }))
}

/// Repeats a single-item tensor `n` times along the batch axis.
pub fn broadcast_batch(t: &Tensor, n: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.n() == n {
        return Ok(t.clone());
    }
    if s.n() != 1 {
        return Err(Error::dim(
            "broadcast_batch",
            "batch",
            format!("1 or {n}"),
            s.n(),
        ));
    }
    let mut data = Vec::with_capacity(n * t.len());
    for _ in 0..n {
        data.extend_from_slice(t.data());
    }
    Tensor::new(Shape::new(n, s.c(), s.h(), s.w()), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::{random_tensor, GradCheck};
    use proptest::prelude::*;

    fn vector(v: &[f32]) -> Tensor {
        Tensor::new(Shape::new(1, v.len(), 1, 1), v.to_vec()).unwrap()
    }

    #[test]
    fn self_similarity_is_one() {
        let f = random_tensor(Shape::new(2, 16, 5, 5), 1, -2.0, 2.0, 0.0);
        let p = elesim(&f, &f).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn anti_and_affine_correlation() {
        let v = [1.0, 2.0, 3.0, 4.0];
        let flipped: Vec<f32> = v.iter().map(|x| -(x - 2.5) + 2.5).collect();
        let p = elesim(&vector(&v), &vector(&flipped)).unwrap();
        assert!((p.item() + 1.0).abs() < 1e-6);
        let p = elesim(&vector(&v), &vector(&[2.0, 4.0, 6.0, 8.0])).unwrap();
        assert!((p.item() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let a = Tensor::zeros(Shape::new(1, 4, 3, 3));
        let b = Tensor::zeros(Shape::new(1, 4, 3, 2));
        assert!(matches!(
            elesim(&a, &b),
            Err(Error::Dimension { axis: "width", .. })
        ));
        let c = Tensor::zeros(Shape::new(1, 1, 3, 3));
        assert!(matches!(
            elesim(&c, &c),
            Err(Error::Dimension {
                axis: "channel",
                ..
            })
        ));
    }

    #[test]
    fn mask_closed_forms() {
        let p = Tensor::new(Shape::new(1, 1, 1, 2), vec![0.5, 1.0]).unwrap();
        let m = to_mask(&p, 10.0, 0.5).unwrap();
        assert_eq!(m.data()[0], 0.5);
        assert!((m.data()[1] - 0.993_307_2).abs() < 1e-6);
        assert!(to_mask(&p, 0.0, 0.5).is_err());
    }

    #[test]
    fn mask_is_monotone() {
        let grid = Tensor::from_fn(Shape::new(1, 1, 1, 401), |[_, _, _, x]| {
            -1.0 + x as f32 / 200.0
        });
        let m = to_mask(&grid, DEFAULT_GAMMA, DEFAULT_S0).unwrap();
        assert!(m.data().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn split_special_masks() {
        let f = random_tensor(Shape::new(1, 3, 4, 4), 2, -1.0, 1.0, 0.0);
        let (bg, fg) = split(&f, &Tensor::ones(Shape::new(1, 1, 4, 4))).unwrap();
        assert_eq!(bg, f);
        assert!(fg.data().iter().all(|&v| v == 0.0));
        let (bg, fg) = split(&f, &Tensor::full(Shape::new(1, 1, 4, 4), 0.5)).unwrap();
        assert_eq!(bg, fg);
        assert_eq!(bg, f.map(|v| v / 2.0));
    }

    #[test]
    fn split_rejects_bad_mask() {
        let f = Tensor::zeros(Shape::new(1, 3, 4, 4));
        assert!(split(&f, &Tensor::zeros(Shape::new(1, 2, 4, 4))).is_err());
        assert!(split(&f, &Tensor::zeros(Shape::new(1, 1, 4, 8))).is_err());
    }

    #[test]
    fn hard_negatives() {
        let m = Tensor::full(Shape::new(1, 1, 3, 3), 0.7);
        assert_eq!(
            hard_negative_select(&m, 9).unwrap(),
            vec![(0..9).collect::<Vec<_>>()]
        );
        assert_eq!(hard_negative_select(&m, 3).unwrap(), vec![vec![0, 1, 2]]);
        assert!(matches!(
            hard_negative_select(&m, 0),
            Err(Error::Parameter(_))
        ));
        assert!(hard_negative_select(&m, 10).is_err());

        // A foreground blob in rows 2..4, cols 3..6 of an 8x8 map.
        let blob = Tensor::from_fn(Shape::new(1, 1, 8, 8), |[_, _, y, x]| {
            if (2..4).contains(&y) && (3..6).contains(&x) {
                0.05 + 0.01 * x as f32
            } else {
                0.9
            }
        });
        let sel = hard_negative_select(&blob, 6).unwrap();
        let mut got = sel[0].clone();
        got.sort();
        assert_eq!(got, vec![19, 20, 21, 27, 28, 29]);
        assert_eq!(sel, hard_negative_select(&blob, 6).unwrap());
    }

    #[test]
    fn negative_count_rule() {
        assert_eq!(default_negatives(8, 8), 16);
        assert_eq!(default_negatives(16, 16), 64);
        assert_eq!(default_negatives(3, 3), 3);
    }

    #[test]
    fn elesim_gradient() {
        let f = random_tensor(Shape::new(2, 4, 3, 3), 3, -1.0, 1.0, 0.0);
        let r = random_tensor(Shape::new(2, 4, 3, 3), 4, -1.0, 1.0, 0.0);
        let err = GradCheck::default()
            .coordinates(&[f], |t, v| {
                let r = t.constant(r.clone());
                let p = elesim_on_tape(t, v[0], r)?;
                let m = to_mask_on_tape(t, p, 2.0, 0.0)?;
                let (bg, fg) = split_on_tape(t, v[0], m)?;
                t.add(t.square(bg), fg)
            })
            .unwrap();
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn reference_never_receives_gradient() {
        let t = Tape::new();
        let f = t.param(random_tensor(Shape::new(1, 4, 2, 2), 5, -1.0, 1.0, 0.0));
        let r = t.param(random_tensor(Shape::new(1, 4, 2, 2), 6, -1.0, 1.0, 0.0));
        let p = elesim_on_tape(&t, f, r).unwrap();
        let g = t.backward(t.sum(p).unwrap()).unwrap();
        assert!(g.get(r).is_none());
        assert!(g.get(f).is_some());
    }

    fn pearson_f64(a: &[f32], b: &[f32]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().map(|&x| x as f64).sum::<f64>() / n;
        let mb = b.iter().map(|&x| x as f64).sum::<f64>() / n;
        let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
        for (&x, &y) in a.iter().zip(b) {
            let (dx, dy) = (x as f64 - ma, y as f64 - mb);
            num += dx * dy;
            va += dx * dx;
            vb += dy * dy;
        }
        num / (va * vb).sqrt()
    }

    proptest! {
        #[test]
        fn split_reconstructs_exactly(seed in any::<u64>()) {
            let f = random_tensor(Shape::new(1, 5, 6, 6), seed, -3.0, 3.0, 0.0);
            let m = random_tensor(Shape::new(1, 1, 6, 6), seed ^ 1, 0.0, 1.0, 0.0);
            let (bg, fg) = split(&f, &m).unwrap();
            for ((&b, &g), &z) in bg.data().iter().zip(fg.data()).zip(f.data()) {
                prop_assert_eq!(b + g, z);
            }
        }

        #[test]
        fn elesim_properties(seed in any::<u64>(), a in 0.1f32..10.0, shift in -5.0f32..5.0) {
            let v = random_tensor(Shape::new(1, 8, 4, 4), seed, -1.0, 1.0, 0.0);
            let w = random_tensor(Shape::new(1, 8, 4, 4), seed ^ 9, -1.0, 1.0, 0.0);
            let p = elesim(&v, &w).unwrap();
            let q = elesim(&w, &v).unwrap();
            prop_assert!(p.max_abs_diff(&q) < 1e-6);
            prop_assert!(p.data().iter().all(|x| x.abs() <= 1.0 + 1e-5));
            let moved = elesim(&v.map(|x| a * x + shift), &w).unwrap();
            prop_assert!(moved.max_abs_diff(&p) < 1e-5);
            for i in 0..16 {
                let col = |t: &Tensor| (0..8).map(|c| t.data()[c * 16 + i]).collect::<Vec<_>>();
                let want = pearson_f64(&col(&v), &col(&w));
                prop_assert!((p.data()[i] as f64 - want).abs() < 1e-6);
            }
        }
    }
}
