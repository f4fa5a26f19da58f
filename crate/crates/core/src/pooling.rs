//! Reduction of a [`LayerTensor`] to fixed-length sentence vectors.
//!
//! Three reductions are supported: the mean over all frames, a single frame
//! at a fixed relative position, and single frames sampled at time offsets
//! around the onset of the critical word.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::AlignmentSpan;
use crate::store::{frame_index_for_time, LayerTensor, Rational};
use crate::{Error, Result};

/// Relative frame positions probed by the single-token conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelativePosition {
    Start,
    Quarter,
    Half,
    ThreeQuarters,
    End,
}

impl RelativePosition {
    pub const ALL: [RelativePosition; 5] = [
        RelativePosition::Start,
        RelativePosition::Quarter,
        RelativePosition::Half,
        RelativePosition::ThreeQuarters,
        RelativePosition::End,
    ];

    pub fn fraction(self) -> f64 {
        match self {
            RelativePosition::Start => 0.0,
            RelativePosition::Quarter => 0.25,
            RelativePosition::Half => 0.5,
            RelativePosition::ThreeQuarters => 0.75,
            RelativePosition::End => 1.0,
        }
    }

    pub fn from_fraction(p: f64) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|pos| pos.fraction() == p)
            .ok_or_else(|| Error::Argument(format!("relative position {p} is not one of 0, 0.25, 0.5, 0.75, 1")))
    }

    /// `round_half_up(p * (frames - 1))`.
    pub fn frame_index(self, frames: usize) -> usize {
        assert!(frames >= 1, "frame count must be positive");
        (self.fraction() * (frames - 1) as f64 + 0.5).floor() as usize
    }
}

impl fmt::Display for RelativePosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.fraction())
    }
}

/// What a sentence vector was built from. Also the condition key of every
/// result row; labels are `mean`, `pos:<p>`, `t:<offset_ms>` and
/// `ctrl:randemb`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    Mean,
    Position(RelativePosition),
    Temporal(i32),
    /// Matched random embeddings standing in for mean-pooled vectors.
    RandomEmbedding,
}

impl Condition {
    pub fn is_temporal(self) -> bool {
        matches!(self, Condition::Temporal(_))
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Mean => f.write_str("mean"),
            Condition::Position(p) => write!(f, "pos:{p}"),
            Condition::Temporal(ms) => write!(f, "t:{ms}"),
            Condition::RandomEmbedding => f.write_str("ctrl:randemb"),
        }
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Argument(format!("unknown condition `{s}`"));
        if s == "mean" {
            Ok(Condition::Mean)
        } else if s == "ctrl:randemb" {
            Ok(Condition::RandomEmbedding)
        } else if let Some(p) = s.strip_prefix("pos:") {
            Ok(Condition::Position(RelativePosition::from_fraction(p.parse().map_err(|_| bad())?)?))
        } else if let Some(t) = s.strip_prefix("t:") {
            Ok(Condition::Temporal(t.parse().map_err(|_| bad())?))
        } else {
            Err(bad())
        }
    }
}

impl Serialize for Condition {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Condition {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledVector {
    pub utterance_id: String,
    pub layer: usize,
    pub condition: Condition,
    pub vector: Vec<f64>,
}

/// Offsets in ms relative to the critical-word onset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<i32>", into = "Vec<i32>")]
pub struct TemporalGrid {
    offsets_ms: Vec<i32>,
}

pub const TEMPORAL_WINDOW_MS: i32 = 1000;

impl TemporalGrid {
    /// Accepts a sorted, duplicate-free, zero-containing grid that is
    /// symmetric about zero and lies within +-1000 ms.
    pub fn new(offsets_ms: Vec<i32>) -> Result<Self> {
        if !offsets_ms.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Argument("temporal offsets must be strictly increasing".into()));
        }
        if !offsets_ms.contains(&0) {
            return Err(Error::Argument("temporal grid must contain 0".into()));
        }
        if offsets_ms.iter().any(|o| o.abs() > TEMPORAL_WINDOW_MS) {
            return Err(Error::Argument(format!("temporal offsets must lie within +-{TEMPORAL_WINDOW_MS} ms")));
        }
        if offsets_ms.iter().zip(offsets_ms.iter().rev()).any(|(a, b)| *a != -*b) {
            return Err(Error::Argument("temporal grid must be symmetric about 0".into()));
        }
        Ok(Self { offsets_ms })
    }

    pub fn offsets(&self) -> &[i32] {
        &self.offsets_ms
    }

    pub fn len(&self) -> usize {
        self.offsets_ms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets_ms.is_empty()
    }

    pub fn conditions(&self) -> impl Iterator<Item = Condition> + '_ {
        self.offsets_ms.iter().map(|&o| Condition::Temporal(o))
    }
}

impl Default for TemporalGrid {
    /// Steps of 200 ms at the edges, narrowing to 50 ms next to the onset.
    fn default() -> Self {
        let half = [50, 100, 200, 300, 400, 500, 600, 800, 1000];
        let mut offsets: Vec<i32> = half.iter().rev().map(|o| -o).collect();
        offsets.push(0);
        offsets.extend(half);
        Self::new(offsets).expect("default grid is valid")
    }
}

impl TryFrom<Vec<i32>> for TemporalGrid {
    type Error = Error;

    fn try_from(v: Vec<i32>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TemporalGrid> for Vec<i32> {
    fn from(g: TemporalGrid) -> Self {
        g.offsets_ms
    }
}

fn pooled(t: &LayerTensor, condition: Condition, vector: Vec<f64>) -> PooledVector {
    PooledVector {
        utterance_id: t.utterance_id.clone(),
        layer: t.layer,
        condition,
        vector,
    }
}

fn row_f64(t: &LayerTensor, idx: usize) -> Vec<f64> {
    t.row(idx).iter().map(|&v| f64::from(v)).collect()
}

/// Mean over frames, accumulated in f64 in frame order.
pub fn mean_pool(t: &LayerTensor) -> PooledVector {
    let mut acc = vec![0.0f64; t.dim()];
    for row in t.rows() {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += f64::from(v);
        }
    }
    let n = t.frames() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    pooled(t, Condition::Mean, acc)
}

/// The frame at relative position `p`, which must be one of 0, 0.25, 0.5,
/// 0.75 or 1.
pub fn positional_token(t: &LayerTensor, p: f64) -> Result<PooledVector> {
    let pos = RelativePosition::from_fraction(p)?;
    Ok(position_token(t, pos))
}

pub fn position_token(t: &LayerTensor, pos: RelativePosition) -> PooledVector {
    pooled(t, Condition::Position(pos), row_f64(t, pos.frame_index(t.frames())))
}

/// One frame per grid offset, taken at `onset + offset`. Offsets that clamp
/// to the same frame still yield separate entries.
pub fn temporal_samples(
    t: &LayerTensor,
    alignment: Option<&AlignmentSpan>,
    grid: &TemporalGrid,
    frame_rate: Rational,
) -> Result<Vec<PooledVector>> {
    let span = alignment.ok_or_else(|| Error::AlignmentMissing(t.utterance_id.clone()))?;
    Ok(grid
        .offsets()
        .iter()
        .map(|&offset| {
            let at = span.onset_ms as i64 + i64::from(offset);
            let idx = frame_index_for_time(at, frame_rate, t.frames());
            pooled(t, Condition::Temporal(offset), row_f64(t, idx))
        })
        .collect())
}

/// Applies a single condition.
pub fn pool(
    t: &LayerTensor,
    condition: Condition,
    alignment: Option<&AlignmentSpan>,
    frame_rate: Rational,
) -> Result<PooledVector> {
    match condition {
        Condition::Mean => Ok(mean_pool(t)),
        Condition::Position(pos) => Ok(position_token(t, pos)),
        Condition::Temporal(offset) => {
            let span = alignment.ok_or_else(|| Error::AlignmentMissing(t.utterance_id.clone()))?;
            let at = span.onset_ms as i64 + i64::from(offset);
            let idx = frame_index_for_time(at, frame_rate, t.frames());
            Ok(pooled(t, condition, row_f64(t, idx)))
        }
        Condition::RandomEmbedding => Err(Error::Argument(
            "random-embedding control vectors are generated, not pooled".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(rows: &[Vec<f32>]) -> LayerTensor {
        LayerTensor::from_rows("u", 0, rows).unwrap()
    }

    fn ramp(frames: usize) -> LayerTensor {
        let rows: Vec<Vec<f32>> = (0..frames).map(|t| vec![t as f32]).collect();
        tensor(&rows)
    }

    #[test]
    fn mean_examples() {
        assert_eq!(mean_pool(&tensor(&[vec![1.0, 2.0], vec![3.0, 4.0]])).vector, vec![2.0, 3.0]);
        assert_eq!(mean_pool(&tensor(&[vec![0.25, -7.0]])).vector, vec![0.25, -7.0]);
        assert_eq!(
            mean_pool(&tensor(&[vec![3.0, 4.0], vec![1.0, 2.0]])).vector,
            mean_pool(&tensor(&[vec![1.0, 2.0], vec![3.0, 4.0]])).vector
        );
    }

    #[test]
    fn positional_examples() {
        let t = ramp(5);
        assert_eq!(positional_token(&t, 0.0).unwrap().vector, vec![0.0]);
        assert_eq!(positional_token(&t, 1.0).unwrap().vector, vec![4.0]);
        assert_eq!(positional_token(&t, 0.5).unwrap().vector, vec![2.0]);
        assert!(matches!(positional_token(&t, 0.3), Err(Error::Argument(_))));
    }

    #[test]
    fn half_up_rounding() {
        // T=4: 0.5*3 = 1.5 -> 2; 0.25*3 = 0.75 -> 1; 0.75*3 = 2.25 -> 2
        assert_eq!(RelativePosition::Half.frame_index(4), 2);
        assert_eq!(RelativePosition::Quarter.frame_index(4), 1);
        assert_eq!(RelativePosition::ThreeQuarters.frame_index(4), 2);
        // T=3: 0.25*2 = 0.5 -> 1
        assert_eq!(RelativePosition::Quarter.frame_index(3), 1);
    }

    #[test]
    fn temporal_examples() {
        let t = ramp(200);
        let rate = Rational::integer(50);
        let span = AlignmentSpan { onset_ms: 2000, offset_ms: 2400 };
        let grid = TemporalGrid::new(vec![0]).unwrap();
        let v = temporal_samples(&t, Some(&span), &grid, rate).unwrap();
        assert_eq!(v[0].vector, vec![100.0]);

        let early = AlignmentSpan { onset_ms: 100, offset_ms: 300 };
        let grid = TemporalGrid::new(vec![-1000, 0, 1000]).unwrap();
        let v = temporal_samples(&t, Some(&early), &grid, rate).unwrap();
        assert_eq!(v[0].vector, vec![0.0]);
        assert_eq!(v[0].condition, Condition::Temporal(-1000));

        let v = temporal_samples(&t, Some(&span), &TemporalGrid::default(), rate).unwrap();
        assert_eq!(v.len(), 19);

        assert!(matches!(
            temporal_samples(&t, None, &TemporalGrid::default(), rate),
            Err(Error::AlignmentMissing(_))
        ));
    }

    #[test]
    fn clamped_offsets_keep_distinct_labels() {
        let t = ramp(3);
        let span = AlignmentSpan { onset_ms: 0, offset_ms: 10 };
        let grid = TemporalGrid::new(vec![-100, -50, 0, 50, 100]).unwrap();
        let v = temporal_samples(&t, Some(&span), &grid, Rational::integer(50)).unwrap();
        assert_eq!(v[0].vector, v[1].vector);
        assert_ne!(v[0].condition, v[1].condition);
    }

    #[test]
    fn grid_validation() {
        assert!(TemporalGrid::new(vec![-50, 50]).is_err());
        assert!(TemporalGrid::new(vec![-100, 0, 50]).is_err());
        assert!(TemporalGrid::new(vec![-1200, 0, 1200]).is_err());
        assert!(TemporalGrid::new(vec![0, -10, 10]).is_err());
        let g = TemporalGrid::default();
        assert_eq!(g.offsets().first(), Some(&-1000));
        assert_eq!(g.offsets()[9], 0);
    }

    #[test]
    fn condition_labels_round_trip() {
        let all = [
            Condition::Mean,
            Condition::Position(RelativePosition::Start),
            Condition::Position(RelativePosition::ThreeQuarters),
            Condition::Position(RelativePosition::End),
            Condition::Temporal(-500),
            Condition::RandomEmbedding,
        ];
        let labels: Vec<String> = all.iter().map(ToString::to_string).collect();
        assert_eq!(labels, ["mean", "pos:0", "pos:0.75", "pos:1", "t:-500", "ctrl:randemb"]);
        for (c, l) in all.iter().zip(&labels) {
            assert_eq!(&l.parse::<Condition>().unwrap(), c);
        }
        assert!("pos:0.3".parse::<Condition>().is_err());
        assert!(Condition::Temporal(-1000) < Condition::Temporal(-50));
    }

    #[test]
    fn single_frame_all_reductions_coincide() {
        let t = tensor(&[vec![1.5, -2.0, 0.125]]);
        let m = mean_pool(&t).vector;
        for p in RelativePosition::ALL {
            assert_eq!(position_token(&t, p).vector, m);
        }
    }
}
