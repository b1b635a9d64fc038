//! Diarization error rate, VAD/OSD precision and recall, and speaker-count
//! confusion.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::assignment::max_weight_matching;
use crate::error::Result;
use crate::rttm::SegmentList;

/// Per-speaker sorted, disjoint intervals. Touching and overlapping
/// segments of one speaker are merged.
fn merged_intervals(list: &SegmentList) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut by_speaker: Vec<(String, Vec<(f64, f64)>)> = list.speakers().into_iter().map(|s| (s, Vec::new())).collect();
    for seg in &list.segments {
        if seg.duration <= 0.0 {
            continue;
        }
        let slot = by_speaker.iter_mut().find(|(s, _)| *s == seg.speaker).expect("speaker listed");
        slot.1.push((seg.onset, seg.end()));
    }
    for (_, iv) in &mut by_speaker {
        iv.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut out: Vec<(f64, f64)> = Vec::with_capacity(iv.len());
        for &(s, e) in iv.iter() {
            match out.last_mut() {
                Some(last) if s <= last.1 => last.1 = last.1.max(e),
                _ => out.push((s, e)),
            }
        }
        *iv = out;
    }
    by_speaker.retain(|(_, iv)| !iv.is_empty());
    by_speaker
}

fn covers(intervals: &[(f64, f64)], t: f64) -> bool {
    let i = intervals.partition_point(|&(s, _)| s <= t);
    i > 0 && t < intervals[i - 1].1
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerReport {
    pub der: f64,
    pub miss: f64,
    pub fa: f64,
    pub confusion: f64,
    pub total_ref_speech_s: f64,
    pub miss_s: f64,
    pub fa_s: f64,
    pub confusion_s: f64,
    /// Hypothesis speaker → reference speaker, for pairs that overlap.
    pub mapping: Vec<(String, String)>,
    /// Set when there was no scored reference speech; rates are then zero.
    pub empty_reference: bool,
}

impl DerReport {
    fn from_seconds(miss_s: f64, fa_s: f64, confusion_s: f64, total: f64, mapping: Vec<(String, String)>) -> Self {
        let empty_reference = total <= 0.0;
        let rate = |x: f64| if empty_reference { 0.0 } else { x / total };
        Self {
            der: rate(miss_s) + rate(fa_s) + rate(confusion_s),
            miss: rate(miss_s),
            fa: rate(fa_s),
            confusion: rate(confusion_s),
            total_ref_speech_s: total,
            miss_s,
            fa_s,
            confusion_s,
            mapping,
            empty_reference,
        }
    }

    /// Corpus-level rates: error times summed over recordings, divided by
    /// the summed reference time.
    pub fn aggregate(reports: &[DerReport]) -> DerReport {
        let sum = |f: fn(&DerReport) -> f64| reports.iter().map(f).sum::<f64>();
        Self::from_seconds(
            sum(|r| r.miss_s),
            sum(|r| r.fa_s),
            sum(|r| r.confusion_s),
            sum(|r| r.total_ref_speech_s),
            Vec::new(),
        )
    }
}

/// Continuous-time DER. The timeline is cut at every reference and
/// hypothesis boundary and at every collar edge; regions within `collar_s`
/// of a reference boundary are not scored. Speakers are mapped one-to-one
/// to maximise total overlap in the scored regions.
pub fn der(reference: &SegmentList, hypothesis: &SegmentList, collar_s: f64) -> Result<DerReport> {
    let refs = merged_intervals(reference);
    let hyps = merged_intervals(hypothesis);

    let mut excluded: Vec<(f64, f64)> = Vec::new();
    if collar_s > 0.0 {
        for (_, iv) in &refs {
            for &(s, e) in iv {
                excluded.push((s - collar_s, s + collar_s));
                excluded.push((e - collar_s, e + collar_s));
            }
        }
        excluded.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::new();
        for (s, e) in excluded {
            match merged.last_mut() {
                Some(last) if s <= last.1 => last.1 = last.1.max(e),
                _ => merged.push((s, e)),
            }
        }
        excluded = merged;
    }

    let mut cuts: Vec<f64> = refs
        .iter()
        .chain(&hyps)
        .flat_map(|(_, iv)| iv.iter().flat_map(|&(s, e)| [s, e]))
        .chain(excluded.iter().flat_map(|&(s, e)| [s, e]))
        .collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    // (duration, active reference speakers, active hypothesis speakers)
    let mut atoms: Vec<(f64, Vec<usize>, Vec<usize>)> = Vec::new();
    let mut overlap = vec![vec![0.0; refs.len()]; hyps.len()];
    for w in cuts.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let mid = 0.5 * (t0 + t1);
        if t1 <= t0 || covers(&excluded, mid) {
            continue;
        }
        let r: Vec<usize> = (0..refs.len()).filter(|&i| covers(&refs[i].1, mid)).collect();
        let h: Vec<usize> = (0..hyps.len()).filter(|&i| covers(&hyps[i].1, mid)).collect();
        if r.is_empty() && h.is_empty() {
            continue;
        }
        for &hi in &h {
            for &ri in &r {
                overlap[hi][ri] += t1 - t0;
            }
        }
        atoms.push((t1 - t0, r, h));
    }

    let mut map = vec![None; hyps.len()];
    let mut mapping = Vec::new();
    for (hi, ri) in max_weight_matching(&overlap, refs.len())? {
        if overlap[hi][ri] > 0.0 {
            map[hi] = Some(ri);
            mapping.push((hyps[hi].0.clone(), refs[ri].0.clone()));
        }
    }

    let (mut miss, mut fa, mut conf, mut total) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (dur, r, h) in &atoms {
        let correct = h.iter().filter(|&&hi| map[hi].is_some_and(|ri| r.contains(&ri))).count();
        let (nr, nh) = (r.len(), h.len());
        total.push(dur * nr as f64);
        miss.push(dur * nr.saturating_sub(nh) as f64);
        fa.push(dur * nh.saturating_sub(nr) as f64);
        conf.push(dur * (nr.min(nh) - correct) as f64);
    }
    let sum = |v: &mut Vec<f64>| crate::losses::canonical_sum(v);
    let report = DerReport::from_seconds(sum(&mut miss), sum(&mut fa), sum(&mut conf), sum(&mut total), mapping);
    if report.empty_reference {
        log::warn!("{}: no scored reference speech, DER reported as 0", reference.recording_id);
    }
    Ok(report)
}

/// Scores every reference recording; a recording missing from the
/// hypotheses is scored against an empty hypothesis.
pub fn score_all(
    reference: &BTreeMap<String, SegmentList>,
    hypothesis: &BTreeMap<String, SegmentList>,
    collar_s: f64,
) -> Result<Vec<(String, DerReport)>> {
    for id in hypothesis.keys().filter(|id| !reference.contains_key(*id)) {
        log::warn!("{id}: hypothesis has no reference, skipped");
    }
    reference
        .iter()
        .map(|(id, r)| {
            let empty = SegmentList::new(id.clone());
            let h = hypothesis.get(id).unwrap_or_else(|| {
                log::warn!("{id}: no hypothesis, scoring as silence");
                &empty
            });
            Ok((id.clone(), der(r, h, collar_s)?))
        })
        .collect()
}

/// `recording,der,miss,fa,confusion,ref_speech_s` rows plus an `ALL` row.
pub fn der_csv(rows: &[(String, DerReport)]) -> String {
    let mut out = String::from("recording,der,miss,fa,confusion,ref_speech_s\n");
    let all = DerReport::aggregate(&rows.iter().map(|(_, r)| r.clone()).collect::<Vec<_>>());
    for (id, r) in rows.iter().map(|(id, r)| (id.as_str(), r)).chain([("ALL", &all)]) {
        writeln!(
            out,
            "{id},{:.6},{:.6},{:.6},{:.6},{:.3}",
            r.der, r.miss, r.fa, r.confusion, r.total_ref_speech_s
        )
        .expect("writing to a String");
    }
    out
}

/// Precision and recall of one frame-level detection task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    /// The hypothesis had no positive frames; precision is reported as 1.
    pub no_predicted: bool,
    /// The reference had no positive frames; recall is reported as 1.
    pub no_reference: bool,
}

impl PrecisionRecall {
    fn from_counts(tp: usize, predicted: usize, actual: usize) -> Self {
        Self {
            precision: if predicted == 0 { 1.0 } else { tp as f64 / predicted as f64 },
            recall: if actual == 0 { 1.0 } else { tp as f64 / actual as f64 },
            no_predicted: predicted == 0,
            no_reference: actual == 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VadOsd {
    pub vad: PrecisionRecall,
    pub osd: PrecisionRecall,
}

/// Frame-level voice activity (≥ 1 speaker) and overlap (≥ 2 speakers)
/// detection scores.
pub fn vad_osd_pr(reference: &SegmentList, hypothesis: &SegmentList, frame_s: f64) -> VadOsd {
    let end = reference
        .segments
        .iter()
        .chain(&hypothesis.segments)
        .map(|s| s.end())
        .fold(0.0, f64::max);
    let frames = (end / frame_s).ceil() as usize + 1;
    let counts = |list: &SegmentList| -> Vec<usize> {
        list.to_activity(&list.speakers(), frame_s, frames)
            .iter()
            .map(|row| row.iter().filter(|&&b| b).count())
            .collect()
    };
    let (r, h) = (counts(reference), counts(hypothesis));
    let pr = |k: usize| {
        let (mut tp, mut pred, mut act) = (0, 0, 0);
        for (&a, &b) in r.iter().zip(&h) {
            tp += (a >= k && b >= k) as usize;
            pred += (b >= k) as usize;
            act += (a >= k) as usize;
        }
        PrecisionRecall::from_counts(tp, pred, act)
    };
    VadOsd { vad: pr(1), osd: pr(2) }
}

/// Counts of (reference speaker count, predicted speaker count) pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CountConfusion {
    matrix: Vec<Vec<usize>>,
}

impl CountConfusion {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, reference: usize, predicted: usize) {
        let n = self.matrix.len().max(reference + 1).max(predicted + 1);
        if n > self.matrix.len() {
            for row in &mut self.matrix {
                row.resize(n, 0);
            }
            self.matrix.resize(n, vec![0; n]);
        }
        self.matrix[reference][predicted] += 1;
    }

    pub fn get(&self, reference: usize, predicted: usize) -> usize {
        self.matrix.get(reference).and_then(|r| r.get(predicted)).copied().unwrap_or(0)
    }

    /// Largest count seen on either axis.
    pub fn size(&self) -> usize {
        self.matrix.len().saturating_sub(1)
    }

    pub fn row_sum(&self, reference: usize) -> usize {
        self.matrix.get(reference).map_or(0, |r| r.iter().sum())
    }

    pub fn total(&self) -> usize {
        self.matrix.iter().flatten().sum()
    }

    /// Fraction of recordings whose count was predicted exactly.
    pub fn accuracy(&self) -> f64 {
        let diag: usize = (0..self.matrix.len()).map(|i| self.matrix[i][i]).sum();
        if self.total() == 0 {
            0.0
        } else {
            diag as f64 / self.total() as f64
        }
    }

    /// Reference counts whose most frequent prediction is the correct count.
    pub fn diagonal_dominant_rows(&self) -> Vec<usize> {
        (0..self.matrix.len())
            .filter(|&i| self.row_sum(i) > 0 && self.matrix[i].iter().all(|&c| c <= self.matrix[i][i]))
            .collect()
    }

    /// Grid with one row per reference count that occurred and one column
    /// per predicted count from 0 to the largest seen.
    pub fn to_csv(&self) -> String {
        let n = self.matrix.len();
        let mut out = String::from("reference");
        for p in 0..n {
            write!(out, ",{p}").expect("writing to a String");
        }
        out.push('\n');
        for r in (0..n).filter(|&r| self.row_sum(r) > 0) {
            out.push_str(&r.to_string());
            for p in 0..n {
                write!(out, ",{}", self.matrix[r][p]).expect("writing to a String");
            }
            out.push('\n');
        }
        out
    }
}
