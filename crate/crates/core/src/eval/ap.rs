//! Matching detections to ground truth and average precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::PointL0;
use crate::voting::Detection;

/// Intersection over union of two axis-aligned `side x side` boxes.
pub fn box_iou(a: PointL0, b: PointL0, side: f64) -> f64 {
    let dx = f64::from(a.x - b.x).abs();
    let dy = f64::from(a.y - b.y).abs();
    let inter = (side - dx).max(0.0) * (side - dy).max(0.0);
    inter / (2.0 * side * side - inter)
}

/// Matches `det` to the unmatched ground truth of highest IoU, provided the
/// IoU reaches 0.5. Ties go to the lowest index. Marks the match.
pub fn match_iou(det: PointL0, gts: &[PointL0], matched: &mut [bool], side: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &g) in gts.iter().enumerate() {
        if matched[i] {
            continue;
        }
        let iou = box_iou(det, g, side);
        if iou >= 0.5 && best.is_none_or(|(_, b)| iou > b) {
            best = Some((i, iou));
        }
    }
    let (i, _) = best?;
    matched[i] = true;
    Some(i)
}

/// Matches `det` to the nearest unmatched ground truth within `gamma` pixels.
pub fn match_keypoint(det: PointL0, gts: &[PointL0], matched: &mut [bool], gamma: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &g) in gts.iter().enumerate() {
        if matched[i] {
            continue;
        }
        let d = det.dist(&g);
        if d <= gamma && best.is_none_or(|(_, b)| d < b) {
            best = Some((i, d));
        }
    }
    let (i, _) = best?;
    matched[i] = true;
    Some(i)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Matcher {
    /// Boxes of the given side overlapping by at least half.
    Iou { side: f64 },
    /// Keypoints within the given pixel distance.
    Keypoint { gamma: f64 },
}

impl Matcher {
    fn validate(&self) -> Result<()> {
        let v = match *self {
            Matcher::Iou { side } => side,
            Matcher::Keypoint { gamma } => gamma,
        };
        if !(v > 0.0) {
            return Err(Error::Argument(format!("matcher size must be positive, got {v}")));
        }
        Ok(())
    }

    pub fn assign(&self, det: PointL0, gts: &[PointL0], matched: &mut [bool]) -> Option<usize> {
        match *self {
            Matcher::Iou { side } => match_iou(det, gts, matched, side),
            Matcher::Keypoint { gamma } => match_keypoint(det, gts, matched, gamma),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub score: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision and recall at every distinct score cut, strongest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub ap: f64,
}

/// All-points average precision of scored hits. Each cut keeps every
/// detection scoring at least the cut value. The precision envelope is
/// averaged over the recall levels `k / n_gt`.
pub fn average_precision(scored: &[(f64, bool)], n_gt: usize) -> Result<PrCurve> {
    if n_gt == 0 {
        return Err(Error::UndefinedAp);
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));
    let mut points = Vec::new();
    let mut cuts: Vec<(usize, usize)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &j) in order.iter().enumerate() {
        if scored[j].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        let last = i + 1 == order.len() || scored[order[i + 1]].0 != scored[j].0;
        if last {
            cuts.push((tp, fp));
            points.push(PrPoint {
                score: scored[j].0,
                precision: tp as f64 / (tp + fp) as f64,
                recall: tp as f64 / n_gt as f64,
            });
        }
    }
    // envelope[k] = best precision among cuts reaching at least k true positives
    let mut envelope = vec![0.0f64; n_gt + 1];
    for &(tp, fp) in &cuts {
        let p = tp as f64 / (tp + fp) as f64;
        let k = tp.min(n_gt);
        if p > envelope[k] {
            envelope[k] = p;
        }
    }
    for k in (0..n_gt).rev() {
        if envelope[k + 1] > envelope[k] {
            envelope[k] = envelope[k + 1];
        }
    }
    let sum: f64 = envelope[1..].iter().sum();
    Ok(PrCurve {
        points,
        ap: sum / n_gt as f64,
    })
}

/// Matches detections of one part over several images and computes AP.
/// Detections are processed strongest first over all images; ties keep
/// image order, then list order.
pub fn evaluate_detections(images: &[(Vec<Detection>, Vec<PointL0>)], matcher: Matcher) -> Result<PrCurve> {
    matcher.validate()?;
    let n_gt: usize = images.iter().map(|(_, g)| g.len()).sum();
    let mut all: Vec<(usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, (d, _))| (0..d.len()).map(move |j| (i, j)))
        .collect();
    all.sort_by(|&(ia, ja), &(ib, jb)| {
        images[ib].0[jb].score.total_cmp(&images[ia].0[ja].score).then((ia, ja).cmp(&(ib, jb)))
    });
    let mut matched: Vec<Vec<bool>> = images.iter().map(|(_, g)| vec![false; g.len()]).collect();
    let scored: Vec<(f64, bool)> = all
        .into_iter()
        .map(|(i, j)| {
            let d = &images[i].0[j];
            let hit = matcher.assign(d.center, &images[i].1, &mut matched[i]).is_some();
            (d.score, hit)
        })
        .collect();
    average_precision(&scored, n_gt)
}
