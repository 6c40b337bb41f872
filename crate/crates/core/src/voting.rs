//! Compositional voting: concepts near a hypothesised part location cast
//! spatially weighted log-likelihood votes, negative votes are switched off,
//! and the summed scores are reduced to detections by non-maximum suppression.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concepts::{ConceptBank, DistanceField};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::lattice::{LatticeSpec, Offset, PointL0};
use crate::likelihood::{EvidenceModel, VoterSet};
use crate::spatial::SpatialModel;

pub const DEFAULT_BETA: f64 = 0.7;
pub const DEFAULT_NMS_RADIUS_PX: f64 = 50.0;
/// Geometric scale set, closed under reciprocals.
pub const DEFAULT_SCALES: [f64; 5] = [0.6, 0.8, 1.0, 1.25, 5.0 / 3.0];

/// A concept's vote at one cell. `Absent` stands for minus infinity: no
/// source reached the cell, or the spatial frequency there is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Vote {
    Absent,
    Value(f64),
}

impl Vote {
    /// `max(0, vote)`.
    pub fn clamped(self) -> f64 {
        match self {
            Vote::Absent => 0.0,
            Vote::Value(v) => v.max(0.0),
        }
    }

    pub fn max(self, other: Vote) -> Vote {
        match (self, other) {
            (Vote::Absent, o) | (o, Vote::Absent) => o,
            (Vote::Value(a), Vote::Value(b)) => Vote::Value(if b > a { b } else { a }),
        }
    }

    pub fn is_positive(self) -> bool {
        matches!(self, Vote::Value(v) if v > 0.0)
    }
}

/// Every trained model needed for detection.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub bank: ConceptBank,
    pub spatial: SpatialModel,
    pub evidence: EvidenceModel,
    pub voters: VoterSet,
}

impl Models {
    pub fn validate(&self) -> Result<()> {
        let k = self.bank.len();
        let s = self.voters.num_parts();
        if self.spatial.num_concepts != k || self.evidence.num_concepts != k {
            return Err(Error::Config(format!(
                "models disagree on the number of concepts: bank {k}, spatial {}, evidence {}",
                self.spatial.num_concepts, self.evidence.num_concepts
            )));
        }
        if self.spatial.num_parts != s || self.evidence.num_parts != s {
            return Err(Error::Config(format!(
                "models disagree on the number of parts: voters {s}, spatial {}, evidence {}",
                self.spatial.num_parts, self.evidence.num_parts
            )));
        }
        for (p, vs) in self.voters.voters.iter().enumerate() {
            if let Some(&v) = vs.iter().find(|&&v| v >= k) {
                return Err(Error::Config(format!("part {p} lists unknown concept {v}")));
            }
        }
        Ok(())
    }

    pub fn num_parts(&self) -> usize {
        self.voters.num_parts()
    }

    /// Precomputes the per-bin evidence terms and per-offset spatial terms.
    pub fn plan(&self, beta: f64) -> Result<VotingPlan> {
        self.validate()?;
        check_beta(beta)?;
        let u = self.spatial.uniform();
        let parts = (0..self.num_parts())
            .map(|s| {
                self.voters
                    .of(s)
                    .iter()
                    .map(|&v| {
                        let e = self.evidence.entry(v, s);
                        Voter {
                            concept: v,
                            evidence: e.lambda.iter().map(|l| (1.0 - beta) * l).collect(),
                            bins: e.bins(),
                            cutoff_bin: e.cutoff_bin,
                            offsets: self
                                .spatial
                                .support(v, s)
                                .into_iter()
                                .map(|(o, fr)| (o, beta * (fr / u).ln()))
                                .collect(),
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(VotingPlan {
            beta,
            num_concepts: self.bank.len(),
            parts,
        })
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Argument(format!("beta must lie in [0, 1], got {beta}")));
    }
    Ok(())
}

/// One (concept, part) voter with its terms precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct Voter {
    pub concept: usize,
    /// `(1 - β) Λ` per distance bin.
    pub evidence: Vec<f64>,
    pub bins: usize,
    pub cutoff_bin: usize,
    /// Support offsets with `β ln(Fr / U)`.
    pub offsets: Vec<(Offset, f64)>,
}

impl Voter {
    fn bin(&self, r: f64) -> usize {
        crate::likelihood::bin_index(r, self.bins)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VotingPlan {
    pub beta: f64,
    pub num_concepts: usize,
    /// Voters per part, in selection order.
    pub parts: Vec<Vec<Voter>>,
}

/// One vote cast by a source cell for a target cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    pub source: usize,
    pub target: usize,
    pub value: f64,
}

/// All votes cast by `voter`. A source at cell `p` with distance `r_p`
/// inside the cutoff votes for every `p - Δ` with `Δ` in the support, since
/// the concept sits at offset `Δ` from the part.
pub fn contributions(spec: &LatticeSpec, dist: &[f64], voter: &Voter) -> Vec<Contribution> {
    let mut out = Vec::new();
    for (source, &r) in dist.iter().enumerate() {
        let b = voter.bin(r);
        if b > voter.cutoff_bin {
            continue;
        }
        let p = spec.cell(source);
        let ev = voter.evidence[b];
        for &(off, sp) in &voter.offsets {
            let t = p.shifted(off.neg());
            if spec.contains_l4(t) {
                out.push(Contribution {
                    source,
                    target: spec.index(t),
                    value: ev + sp,
                });
            }
        }
    }
    out
}

/// The vote of one concept at every cell: the strongest contribution it received.
pub fn vote_map(spec: &LatticeSpec, dist: &[f64], voter: &Voter) -> Vec<Vote> {
    let mut votes = vec![Vote::Absent; spec.num_cells()];
    for c in contributions(spec, dist, voter) {
        votes[c.target] = votes[c.target].max(Vote::Value(c.value));
    }
    votes
}

/// `Σ_v max(0, Vote_v)` per cell, summed in voter order, together with the
/// mask of switched-off (nonpositive or absent) votes per voter.
pub fn score_map(votes: &[Vec<Vote>]) -> (Vec<f64>, Vec<Vec<bool>>) {
    let n = votes.first().map_or(0, Vec::len);
    let mut score = vec![0.0; n];
    for vs in votes {
        for (s, v) in score.iter_mut().zip(vs) {
            *s += v.clamped();
        }
    }
    let off = votes
        .iter()
        .map(|vs| vs.iter().map(|v| !v.is_positive()).collect())
        .collect();
    (score, off)
}

/// Votes of every voter of one part on one map.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteField {
    pub part: usize,
    pub concepts: Vec<usize>,
    pub votes: Vec<Vec<Vote>>,
    pub scores: Vec<f64>,
    pub switched_off: Vec<Vec<bool>>,
}

pub fn vote_field(spec: &LatticeSpec, field: &DistanceField, plan: &VotingPlan, part: usize) -> Result<VoteField> {
    let voters = plan
        .parts
        .get(part)
        .ok_or_else(|| Error::Config(format!("no voters for part {part}")))?;
    if field.num_concepts() != plan.num_concepts || field.num_cells() != spec.num_cells() {
        return Err(Error::Argument("distance field does not match the plan or the map".into()));
    }
    let votes: Vec<Vec<Vote>> = voters
        .par_iter()
        .map(|v| vote_map(spec, field.concept(v.concept), v))
        .collect();
    let (scores, switched_off) = score_map(&votes);
    Ok(VoteField {
        part,
        concepts: voters.iter().map(|v| v.concept).collect(),
        votes,
        scores,
        switched_off,
    })
}

/// A part hypothesis. `center` is in the coordinates of the unscaled image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub part: usize,
    pub center: PointL0,
    pub scale_tag: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectParams {
    pub beta: f64,
    pub nms_radius_px: f64,
    pub score_threshold: f64,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            nms_radius_px: DEFAULT_NMS_RADIUS_PX,
            score_threshold: 0.0,
        }
    }
}

/// Position of a cell in the unscaled image.
pub fn original_center(spec: &LatticeSpec, cell: usize, scale_tag: f64) -> PointL0 {
    let p = spec.map_up(spec.cell(cell)).expect("cell index in range");
    PointL0::new(
        (f64::from(p.x) / scale_tag).round() as i32,
        (f64::from(p.y) / scale_tag).round() as i32,
    )
}

fn detection_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then((a.center.x, a.center.y).cmp(&(b.center.x, b.center.y)))
        .then(a.scale_tag.total_cmp(&b.scale_tag))
}

/// Greedy suppression of detections of the same part within `radius_px`.
/// Highest score first; ties go to the lexicographically smaller center,
/// then to the smaller scale.
pub fn nms_detections(mut dets: Vec<Detection>, radius_px: f64) -> Result<Vec<Detection>> {
    if !(radius_px > 0.0) {
        return Err(Error::Argument(format!("suppression radius must be positive, got {radius_px}")));
    }
    dets.sort_by(detection_order);
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if !kept.iter().any(|k| k.part == d.part && k.center.dist(&d.center) <= radius_px) {
            kept.push(d);
        }
    }
    Ok(kept)
}

/// Non-maximum suppression on a score grid: cells scoring above
/// `threshold`, strongest first, each suppressing others within `radius_px`.
pub fn nms(spec: &LatticeSpec, scores: &[f64], part: usize, scale_tag: f64, radius_px: f64, threshold: f64) -> Result<Vec<Detection>> {
    let cands = scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > threshold)
        .map(|(i, &score)| Detection {
            part,
            center: original_center(spec, i, scale_tag),
            scale_tag,
            score,
        })
        .collect();
    nms_detections(cands, radius_px)
}

/// Votes, scores and suppresses every part on one map.
pub fn detect(map: &FeatureMap, models: &Models, plan: &VotingPlan, params: &DetectParams) -> Result<Vec<Detection>> {
    let field = DistanceField::compute(map, &models.bank)?;
    detect_with_field(map, &field, plan, params)
}

pub fn detect_with_field(map: &FeatureMap, field: &DistanceField, plan: &VotingPlan, params: &DetectParams) -> Result<Vec<Detection>> {
    check_beta(params.beta)?;
    let spec = map.spec();
    let tag = f64::from(map.scale_tag());
    let per_part: Vec<Vec<Detection>> = (0..plan.parts.len())
        .into_par_iter()
        .map(|s| {
            let vf = vote_field(spec, field, plan, s)?;
            nms(spec, &vf.scores, s, tag, params.nms_radius_px, params.score_threshold)
        })
        .collect::<Result<_>>()?;
    Ok(per_part.into_iter().flatten().collect())
}

/// Detects on each map of a scale pyramid, then suppresses across scales.
pub fn multi_scale_detect(maps: &[FeatureMap], models: &Models, plan: &VotingPlan, params: &DetectParams) -> Result<Vec<Detection>> {
    if maps.is_empty() {
        return Err(Error::Argument("no scales to search".into()));
    }
    let per_scale = maps
        .iter()
        .map(|m| detect(m, models, plan, params))
        .collect::<Result<Vec<_>>>()?;
    pool_scales(per_scale, params.nms_radius_px)
}

/// Pools detections from several scales and keeps the strongest per location.
pub fn pool_scales(per_scale: Vec<Vec<Detection>>, radius_px: f64) -> Result<Vec<Detection>> {
    let mut out = nms_detections(per_scale.into_iter().flatten().collect(), radius_px)?;
    out.sort_by(|a, b| a.part.cmp(&b.part).then(detection_order(a, b)));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub part: String,
    pub x: i32,
    pub y: i32,
    pub scale: f64,
    pub score: f64,
}

/// Writes one JSON object per line.
pub fn write_detections_jsonl<W: Write>(mut w: W, image_id: &str, dets: &[Detection], part_names: &[String]) -> std::io::Result<()> {
    for d in dets {
        let rec = DetectionRecord {
            image_id: image_id.to_string(),
            part: part_names.get(d.part).cloned().unwrap_or_else(|| d.part.to_string()),
            x: d.center.x,
            y: d.center.y,
            scale: d.scale_tag,
            score: d.score,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_detections_jsonl(path: impl AsRef<Path>) -> Result<Vec<DetectionRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec4() -> LatticeSpec {
        LatticeSpec::from_l4(4, 4, 16, 8).unwrap()
    }

    fn voter(lambda: Vec<f64>, offsets: Vec<(Offset, f64)>, beta: f64, u: f64, cutoff_bin: usize) -> Voter {
        Voter {
            concept: 0,
            bins: lambda.len(),
            evidence: lambda.iter().map(|l| (1.0 - beta) * l).collect(),
            cutoff_bin,
            offsets: offsets.into_iter().map(|(o, fr)| (o, beta * (fr / u).ln())).collect(),
        }
    }

    #[test]
    fn vote_clamp_algebra() {
        let votes = vec![
            vec![Vote::Value(0.5)],
            vec![Vote::Value(-0.2)],
            vec![Vote::Value(0.1)],
        ];
        let (s, off) = score_map(&votes);
        assert!((s[0] - 0.6).abs() < 1e-15);
        assert_eq!(off, vec![vec![false], vec![true], vec![false]]);
        let neg = vec![vec![Vote::Value(-1.0)], vec![Vote::Absent]];
        assert_eq!(score_map(&neg).0, vec![0.0]);
        let mut lowered = votes.clone();
        lowered[1][0] = Vote::Absent;
        assert_eq!(score_map(&lowered).0[0].to_bits(), s[0].to_bits());
    }

    #[test]
    fn uniform_frequency_gives_pure_evidence() {
        let u = 1.0 / 9.0;
        let beta = 0.7;
        let v = voter(vec![2.0, -1.0], vec![(Offset::ZERO, u)], beta, u, 1);
        let dist = vec![0.1; 16];
        let votes = vote_map(&spec4(), &dist, &v);
        for vote in votes {
            assert_eq!(vote, Vote::Value((1.0 - beta) * 2.0));
        }
    }

    #[test]
    fn sources_beyond_cutoff_do_not_vote() {
        let v = voter(vec![2.0, 5.0], vec![(Offset::ZERO, 0.5)], 0.7, 0.1, 0);
        let mut dist = vec![0.1; 16];
        dist[5] = 1.5;
        let votes = vote_map(&spec4(), &dist, &v);
        assert_eq!(votes[5], Vote::Absent);
        assert!(matches!(votes[4], Vote::Value(_)));
    }

    #[test]
    fn part_sits_opposite_to_the_concept_offset() {
        // the concept fires one cell right of the part: a source at (2,1) votes for (1,1)
        let spec = spec4();
        let v = voter(vec![1.0, 1.0], vec![(Offset::new(1, 0), 1.0)], 0.5, 0.5, 1);
        let mut dist = vec![1.9; 16];
        dist[spec.index(crate::lattice::PointL4::new(2, 1))] = 0.0;
        let v = Voter { cutoff_bin: 0, ..v };
        let votes = vote_map(&spec, &dist, &v);
        let hot: Vec<usize> = (0..16).filter(|&i| votes[i] != Vote::Absent).collect();
        assert_eq!(hot, vec![spec.index(crate::lattice::PointL4::new(1, 1))]);
    }

    #[test]
    fn matches_direct_formula_oracle() {
        use crate::seed;
        use rand::Rng;
        let spec = spec4();
        let beta = 0.7;
        let u = 1.0 / 25.0;
        for s in 0..50 {
            let mut rng = seed::rng(s);
            let lambda: Vec<f64> = (0..10).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut offs = Vec::new();
            for dx in -2..=2 {
                for dy in -2..=2 {
                    if rng.random::<f64>() < 0.3 {
                        offs.push((Offset::new(dx, dy), rng.random_range(0.01..0.4)));
                    }
                }
            }
            let cutoff = rng.random_range(0..10);
            let voters: Vec<Voter> = (0..2)
                .map(|c| Voter {
                    concept: c,
                    ..voter(lambda.iter().map(|l| l * (c as f64 + 1.0)).collect(), offs.clone(), beta, u, cutoff)
                })
                .collect();
            let dists: Vec<Vec<f64>> = (0..2).map(|_| (0..16).map(|_| rng.random_range(0.0..2.0)).collect()).collect();
            let votes: Vec<Vec<Vote>> = voters.iter().zip(&dists).map(|(v, d)| vote_map(&spec, d, v)).collect();
            let (score, _) = score_map(&votes);
            // per-target oracle: scan all sources and offsets directly
            for t in 0..16 {
                let tc = spec.cell(t);
                let mut total = 0.0;
                for (c, d) in dists.iter().enumerate() {
                    let mut best = f64::NEG_INFINITY;
                    for (p, &r) in d.iter().enumerate() {
                        let bin = ((r / 0.2).floor() as usize).min(9);
                        if bin > cutoff {
                            continue;
                        }
                        let pc = spec.cell(p);
                        for &(o, fr) in &offs {
                            if pc.x - o.dx == tc.x && pc.y - o.dy == tc.y {
                                let lam = lambda[bin] * (c as f64 + 1.0);
                                best = best.max((1.0 - beta) * lam + beta * (fr / u).ln());
                            }
                        }
                    }
                    let want = if best == f64::NEG_INFINITY { Vote::Absent } else { Vote::Value(best) };
                    match (votes[c][t], want) {
                        (Vote::Absent, Vote::Absent) => {}
                        (Vote::Value(a), Vote::Value(b)) => assert!((a - b).abs() < 1e-9),
                        other => panic!("{other:?}"),
                    }
                    total += best.max(0.0);
                }
                assert!((score[t] - total).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn nms_single_and_twin_peaks() {
        let spec = LatticeSpec::from_l4(10, 10, 16, 8).unwrap();
        let mut scores = vec![0.0; 100];
        scores[spec.index(crate::lattice::PointL4::new(3, 3))] = 2.0;
        scores[spec.index(crate::lattice::PointL4::new(3, 4))] = 1.0;
        let d = nms(&spec, &scores, 0, 1.0, 50.0, 0.0).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].center, PointL0::new(56, 56));
        scores[spec.index(crate::lattice::PointL4::new(8, 8))] = 2.0;
        let d = nms(&spec, &scores, 0, 1.0, 50.0, 0.0).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].center, PointL0::new(56, 56));
        assert!(nms(&spec, &scores, 0, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn nms_matches_greedy_oracle() {
        use crate::seed;
        use rand::Rng;
        let spec = LatticeSpec::from_l4(8, 8, 16, 8).unwrap();
        for s in 0..200 {
            let mut rng = seed::rng(s);
            let scores: Vec<f64> = (0..64).map(|_| f64::from(rng.random_range(0..6u8))).collect();
            let radius = rng.random_range(10.0..60.0);
            let got = nms(&spec, &scores, 0, 1.0, radius, 0.5).unwrap();
            // oracle: repeatedly take the best remaining cell, erase its disk
            let mut alive: Vec<bool> = scores.iter().map(|&x| x > 0.5).collect();
            let mut want = Vec::new();
            loop {
                let mut best: Option<usize> = None;
                for i in 0..64 {
                    if !alive[i] {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some(b) => {
                            let (ci, cb) = (spec.map_up(spec.cell(i)).unwrap(), spec.map_up(spec.cell(b)).unwrap());
                            scores[i] > scores[b] || (scores[i] == scores[b] && (ci.x, ci.y) < (cb.x, cb.y))
                        }
                    };
                    if better {
                        best = Some(i);
                    }
                }
                let Some(b) = best else { break };
                let cb = spec.map_up(spec.cell(b)).unwrap();
                want.push(cb);
                for i in 0..64 {
                    if spec.map_up(spec.cell(i)).unwrap().dist(&cb) <= radius {
                        alive[i] = false;
                    }
                }
            }
            let centers: Vec<PointL0> = got.iter().map(|d| d.center).collect();
            assert_eq!(centers, want);
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let dets = vec![Detection {
            part: 1,
            center: PointL0::new(10, 20),
            scale_tag: 1.25,
            score: 3.5,
        }];
        let mut buf = Vec::new();
        write_detections_jsonl(&mut buf, "img", &dets, &["a".into(), "b".into()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "{\"image_id\":\"img\",\"part\":\"b\",\"x\":10,\"y\":20,\"scale\":1.25,\"score\":3.5}\n");
    }
}
