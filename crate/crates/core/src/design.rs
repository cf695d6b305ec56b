//! Block designs, the task indicator, and design-matrix rows for the
//! supported signal models.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DesignError {
    #[error("blocks must be ordered, non-overlapping and have end > start (block {0})")]
    BadBlocks(usize),
    #[error("design must contain at least one block of each type")]
    MissingBlockType,
    #[error("task indicator undefined at t = {0} s")]
    UndefinedIndicator(f64),
    #[error("b-spline model needs df >= 4, got {0}")]
    BadDegreesOfFreedom(usize),
    #[error("total duration {total} s ends before the last block ({last_end} s)")]
    BadDuration { total: f64, last_end: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockType {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Block {
    #[serde(rename = "type")]
    pub kind: BlockType,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockDesign {
    blocks: Vec<Block>,
    total_duration: f64,
}

#[derive(Deserialize)]
struct BlockDesignRecord {
    blocks: Vec<Block>,
    #[serde(default)]
    total_duration: Option<f64>,
}

impl<'de> Deserialize<'de> for BlockDesign {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rec = BlockDesignRecord::deserialize(d)?;
        BlockDesign::new(rec.blocks, rec.total_duration).map_err(serde::de::Error::custom)
    }
}

impl BlockDesign {
    /// `total_duration` defaults to the end of the last block.
    pub fn new(blocks: Vec<Block>, total_duration: Option<f64>) -> Result<Self, DesignError> {
        let mut prev_end = 0.0f64;
        for (k, b) in blocks.iter().enumerate() {
            if !(b.start.is_finite() && b.end.is_finite()) || b.end <= b.start || b.start < prev_end || b.start < 0.0 {
                return Err(DesignError::BadBlocks(k));
            }
            prev_end = b.end;
        }
        let has = |t| blocks.iter().any(|b| b.kind == t);
        if !has(BlockType::A) || !has(BlockType::B) {
            return Err(DesignError::MissingBlockType);
        }
        let total = total_duration.unwrap_or(prev_end);
        if !(total >= prev_end) {
            return Err(DesignError::BadDuration {
                total,
                last_end: prev_end,
            });
        }
        Ok(Self {
            blocks,
            total_duration: total,
        })
    }

    /// Back-to-back blocks of equal length in the given order.
    pub fn from_sequence(kinds: &[BlockType], block_duration: f64, gap: f64) -> Result<Self, DesignError> {
        let mut t = 0.0;
        let mut blocks = Vec::with_capacity(kinds.len());
        for &kind in kinds {
            blocks.push(Block {
                kind,
                start: t,
                end: t + block_duration,
            });
            t += block_duration + gap;
        }
        Self::new(blocks, None)
    }

    /// `n_each` blocks of each type in a seeded pseudo-random order.
    pub fn pseudo_random(n_each: usize, block_duration: f64, gap: f64, seed: u64) -> Result<Self, DesignError> {
        let mut kinds: Vec<BlockType> = std::iter::repeat_n(BlockType::A, n_each)
            .chain(std::iter::repeat_n(BlockType::B, n_each))
            .collect();
        kinds.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self::from_sequence(&kinds, block_duration, gap)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn total_duration(&self) -> f64 {
        self.total_duration
    }

    pub fn count(&self, kind: BlockType) -> usize {
        self.blocks.iter().filter(|b| b.kind == kind).count()
    }

    /// Index of the block containing `t` (blocks are half-open `[start, end)`).
    pub fn block_at(&self, t: f64) -> Option<usize> {
        let k = self.blocks.partition_point(|b| b.start <= t);
        if k == 0 {
            return None;
        }
        let b = &self.blocks[k - 1];
        (t < b.end).then_some(k - 1)
    }
}

/// `Some(true)` inside an A block, `Some(false)` inside a B block, `None` elsewhere.
pub fn indicator(design: &BlockDesign, t: f64) -> Option<bool> {
    design
        .block_at(t)
        .map(|k| design.blocks[k].kind == BlockType::A)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSpec {
    /// One mean per block; the task effect is the A-mean minus B-mean contrast.
    Nested,
    /// `[1, 𝟙_t, t]`.
    TaskLinearTime,
    /// `[1, 𝟙_t, B₁(t), …, B_df(t)]` with a cubic b-spline drift.
    TaskBspline { df: usize },
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), DesignError> {
        match self {
            ModelSpec::TaskBspline { df } if *df < 4 => Err(DesignError::BadDegreesOfFreedom(*df)),
            _ => Ok(()),
        }
    }

    pub fn n_coefficients(&self, design: &BlockDesign) -> usize {
        match self {
            ModelSpec::Nested => design.blocks.len(),
            ModelSpec::TaskLinearTime => 3,
            ModelSpec::TaskBspline { df } => 2 + df,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignRow {
    pub values: Vec<f64>,
    /// Coefficient holding the task effect, when a single one does.
    pub beta_index: Option<usize>,
}

pub fn design_row(model: &ModelSpec, design: &BlockDesign, t: f64) -> Result<DesignRow, DesignError> {
    model.validate()?;
    let block = design.block_at(t).ok_or(DesignError::UndefinedIndicator(t))?;
    let task = if design.blocks[block].kind == BlockType::A { 1.0 } else { 0.0 };
    Ok(match model {
        ModelSpec::Nested => {
            let mut values = vec![0.0; design.blocks.len()];
            values[block] = 1.0;
            DesignRow {
                values,
                beta_index: None,
            }
        }
        ModelSpec::TaskLinearTime => DesignRow {
            values: vec![1.0, task, t],
            beta_index: Some(1),
        },
        ModelSpec::TaskBspline { df } => {
            let basis = bspline_basis(*df, design.total_duration, t);
            let mut values = Vec::with_capacity(2 + df);
            values.push(1.0);
            values.push(task);
            values.extend_from_slice(&basis[1..]);
            DesignRow {
                values,
                beta_index: Some(1),
            }
        }
    })
}

/// `c` with `c·θ̂ = β̂`.
pub fn task_contrast(model: &ModelSpec, design: &BlockDesign) -> Vec<f64> {
    let mut c = vec![0.0; model.n_coefficients(design)];
    match model {
        ModelSpec::Nested => {
            let na = design.count(BlockType::A) as f64;
            let nb = design.count(BlockType::B) as f64;
            for (k, b) in design.blocks.iter().enumerate() {
                c[k] = match b.kind {
                    BlockType::A => 1.0 / na,
                    BlockType::B => -1.0 / nb,
                };
            }
        }
        _ => c[1] = 1.0,
    }
    c
}

/// `a` with `a·θ̂ = α̂`: the intercept, or the mean of the B-block means for
/// the nested model.
pub fn baseline_contrast(model: &ModelSpec, design: &BlockDesign) -> Vec<f64> {
    let mut a = vec![0.0; model.n_coefficients(design)];
    match model {
        ModelSpec::Nested => {
            let nb = design.count(BlockType::B) as f64;
            for (k, b) in design.blocks.iter().enumerate() {
                if b.kind == BlockType::B {
                    a[k] = 1.0 / nb;
                }
            }
        }
        _ => a[0] = 1.0,
    }
    a
}

/// All `df + 1` clamped cubic b-spline basis functions on `[0, duration]` with
/// `df − 3` equally spaced interior knots, evaluated at `t`. They sum to one on
/// the knot range; the model drops the first to stay full rank next to the
/// intercept.
pub fn bspline_basis(df: usize, duration: f64, t: f64) -> Vec<f64> {
    const DEGREE: usize = 3;
    let n_basis = df + 1;
    let interior = df - DEGREE;
    let mut knots = Vec::with_capacity(n_basis + DEGREE + 1);
    knots.extend(std::iter::repeat_n(0.0, DEGREE + 1));
    for k in 1..=interior {
        knots.push(duration * k as f64 / (interior + 1) as f64);
    }
    knots.extend(std::iter::repeat_n(duration, DEGREE + 1));

    let t = t.clamp(0.0, duration);
    // Knot span with knots[span] <= t < knots[span + 1]; the right end belongs to the last span.
    let span = if t >= duration {
        n_basis - 1
    } else {
        knots.partition_point(|&k| k <= t) - 1
    };

    // Cox–de Boor on the DEGREE + 1 non-zero functions of this span.
    let mut n = [0.0f64; DEGREE + 1];
    n[0] = 1.0;
    let mut left = [0.0f64; DEGREE + 1];
    let mut right = [0.0f64; DEGREE + 1];
    for j in 1..=DEGREE {
        left[j] = t - knots[span + 1 - j];
        right[j] = knots[span + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom == 0.0 { 0.0 } else { n[r] / denom };
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    let mut out = vec![0.0; n_basis];
    for (r, v) in n.iter().enumerate() {
        out[span - DEGREE + r] = *v;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn alternating() -> BlockDesign {
        let kinds: Vec<BlockType> = (0..16).map(|k| if k % 2 == 0 { BlockType::A } else { BlockType::B }).collect();
        BlockDesign::from_sequence(&kinds, 15.0, 0.0).unwrap()
    }

    #[test]
    fn indicator_examples() {
        let d = alternating();
        assert_eq!(indicator(&d, 7.5), Some(true));
        assert_eq!(indicator(&d, 15.0), Some(false));
        assert_eq!(indicator(&d, 29.9), Some(false));
        assert_eq!(indicator(&d, 240.0), None);
        let gapped = BlockDesign::from_sequence(&[BlockType::A, BlockType::B], 15.0, 5.0).unwrap();
        assert_eq!(indicator(&gapped, 17.0), None);
        assert_eq!(indicator(&gapped, 21.0), Some(false));
    }

    #[test]
    fn rejects_bad_designs() {
        let b = |kind, start, end| Block { kind, start, end };
        assert!(BlockDesign::new(vec![b(BlockType::A, 0.0, 10.0), b(BlockType::B, 5.0, 20.0)], None).is_err());
        assert!(BlockDesign::new(vec![b(BlockType::A, 0.0, 10.0)], None).is_err());
        assert!(BlockDesign::new(vec![b(BlockType::A, 0.0, 0.0), b(BlockType::B, 1.0, 2.0)], None).is_err());
    }

    #[test]
    fn sidecar_json_round_trip() {
        let json = r#"{"blocks": [{"type":"A","start":0,"end":15}, {"type":"B","start":15,"end":30}]}"#;
        let d: BlockDesign = serde_json::from_str(json).unwrap();
        assert_eq!(d.total_duration(), 30.0);
        let back: BlockDesign = serde_json::from_str(&serde_json::to_string(&d).unwrap()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn pseudo_random_is_balanced_and_seeded() {
        let d = BlockDesign::pseudo_random(8, 15.0, 0.0, 3).unwrap();
        assert_eq!(d.count(BlockType::A), 8);
        assert_eq!(d.count(BlockType::B), 8);
        assert_eq!(d.total_duration(), 240.0);
        assert_eq!(d, BlockDesign::pseudo_random(8, 15.0, 0.0, 3).unwrap());
    }

    #[test]
    fn row_examples() {
        let d = alternating();
        let r = design_row(&ModelSpec::TaskLinearTime, &d, 15.0).unwrap();
        assert_eq!(r.values, vec![1.0, 0.0, 15.0]);
        let kinds: Vec<BlockType> = (0..16).map(|k| if k % 2 == 0 { BlockType::B } else { BlockType::A }).collect();
        let d2 = BlockDesign::from_sequence(&kinds, 15.0, 0.0).unwrap();
        assert_eq!(design_row(&ModelSpec::TaskLinearTime, &d2, 0.0).unwrap().values, vec![1.0, 0.0, 0.0]);

        for b in d.blocks() {
            let row = design_row(&ModelSpec::Nested, &d, 0.5 * (b.start + b.end)).unwrap();
            assert_eq!(row.values.len(), 16);
            assert_eq!(row.values.iter().filter(|v| **v != 0.0).count(), 1);
        }
        assert!(matches!(
            design_row(&ModelSpec::Nested, &d, 300.0),
            Err(DesignError::UndefinedIndicator(_))
        ));
        assert!(design_row(&ModelSpec::TaskBspline { df: 3 }, &d, 1.0).is_err());
    }

    #[test]
    fn contrast_examples() {
        let d = alternating();
        assert_eq!(task_contrast(&ModelSpec::TaskLinearTime, &d), vec![0.0, 1.0, 0.0]);
        let c = task_contrast(&ModelSpec::Nested, &d);
        assert!(c.iter().all(|v| (v.abs() - 0.125).abs() < 1e-15));
        assert!(c.iter().sum::<f64>().abs() < 1e-15);
        let c = task_contrast(&ModelSpec::TaskBspline { df: 12 }, &d);
        assert_eq!(c.len(), 14);
        assert_eq!(c.iter().position(|v| *v == 1.0), Some(1));
        assert_eq!(c.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn nested_contrast_reproduces_direct_mean_difference() {
        let d = BlockDesign::pseudo_random(8, 15.0, 0.0, 5).unwrap();
        let block_means: Vec<f64> = (0..16).map(|k| 100.0 + (k as f64 * 1.7).sin() * 4.0).collect();
        let c = task_contrast(&ModelSpec::Nested, &d);
        let via_contrast: f64 = c.iter().zip(&block_means).map(|(a, b)| a * b).sum();
        let mean_of = |t| {
            let v: Vec<f64> = d.blocks().iter().zip(&block_means).filter(|(b, _)| b.kind == t).map(|(_, m)| *m).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!((via_contrast - (mean_of(BlockType::A) - mean_of(BlockType::B))).abs() < 1e-12);
    }

    /// Reference Cox–de Boor recursion, written directly from the definition.
    fn naive_basis(i: usize, p: usize, knots: &[f64], t: f64) -> f64 {
        if p == 0 {
            let last = knots[knots.len() - 1];
            return if (knots[i] <= t && t < knots[i + 1]) || (t == last && knots[i] < t && knots[i + 1] == last) {
                1.0
            } else {
                0.0
            };
        }
        let mut v = 0.0;
        let d1 = knots[i + p] - knots[i];
        if d1 > 0.0 {
            v += (t - knots[i]) / d1 * naive_basis(i, p - 1, knots, t);
        }
        let d2 = knots[i + p + 1] - knots[i + 1];
        if d2 > 0.0 {
            v += (knots[i + p + 1] - t) / d2 * naive_basis(i + 1, p - 1, knots, t);
        }
        v
    }

    #[test]
    fn bspline_matches_naive_recursion() {
        let (df, dur) = (12usize, 240.0);
        let interior = df - 3;
        let mut knots = vec![0.0; 4];
        knots.extend((1..=interior).map(|k| dur * k as f64 / (interior + 1) as f64));
        knots.extend([dur; 4]);
        for step in 0..=480 {
            let t = step as f64 * 0.5;
            let fast = bspline_basis(df, dur, t);
            for (i, v) in fast.iter().enumerate() {
                assert!((v - naive_basis(i, 3, &knots, t)).abs() < 1e-12, "t={t} i={i}");
            }
        }
    }

    #[test]
    fn models_have_full_column_rank() {
        let d = BlockDesign::pseudo_random(8, 15.0, 0.0, 9).unwrap();
        for model in [ModelSpec::Nested, ModelSpec::TaskLinearTime, ModelSpec::TaskBspline { df: 12 }] {
            let times: Vec<f64> = (0..166).map(|c| c as f64 * 1.45).filter(|t| *t < 240.0).collect();
            let p = model.n_coefficients(&d);
            let mut x = DMatrix::zeros(times.len(), p);
            for (r, t) in times.iter().enumerate() {
                let row = design_row(&model, &d, *t).unwrap();
                for (c, v) in row.values.iter().enumerate() {
                    x[(r, c)] = *v;
                }
            }
            let sv = x.singular_values();
            let smax = sv.max();
            assert!(sv.iter().all(|s| *s > 1e-10 * smax), "{model:?}");
        }
    }

    proptest! {
        #[test]
        fn bspline_partition_of_unity(t in 0.0f64..=240.0, df in 4usize..20) {
            let b = bspline_basis(df, 240.0, t);
            prop_assert_eq!(b.len(), df + 1);
            prop_assert!(b.iter().all(|v| *v >= 0.0));
            prop_assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
