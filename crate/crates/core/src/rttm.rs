//! Speaker segments and the RTTM exchange format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub speaker: String,
    pub onset: f64,
    pub duration: f64,
}

impl Segment {
    pub fn end(&self) -> f64 {
        self.onset + self.duration
    }
}

/// All segments of one recording.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SegmentList {
    pub recording_id: String,
    pub segments: Vec<Segment>,
}

impl SegmentList {
    pub fn new(recording_id: impl Into<String>) -> Self {
        Self {
            recording_id: recording_id.into(),
            segments: Vec::new(),
        }
    }

    /// Speaker names in order of first appearance.
    pub fn speakers(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.segments {
            if !out.contains(&s.speaker) {
                out.push(s.speaker.clone());
            }
        }
        out
    }

    /// Rasterises onto a frame grid: frame `k` covers `[k·p, (k+1)·p)` and is
    /// active when a segment covers it, with boundaries rounded to the
    /// nearest frame edge. Columns follow `speakers`.
    pub fn to_activity(&self, speakers: &[String], frame_s: f64, frames: usize) -> Vec<Vec<bool>> {
        let mut grid = vec![vec![false; speakers.len()]; frames];
        for seg in &self.segments {
            let Some(col) = speakers.iter().position(|s| *s == seg.speaker) else {
                continue;
            };
            let start = (seg.onset / frame_s).round().max(0.0) as usize;
            let end = ((seg.end() / frame_s).round().max(0.0) as usize).min(frames);
            for row in grid.iter_mut().take(end).skip(start) {
                row[col] = true;
            }
        }
        grid
    }

    /// Inverse of `to_activity`: maximal runs of active frames per column.
    pub fn from_activity(recording_id: &str, speakers: &[String], activity: &[Vec<bool>], frame_s: f64) -> Self {
        let mut list = Self::new(recording_id);
        for (col, name) in speakers.iter().enumerate() {
            let mut start = None;
            for t in 0..=activity.len() {
                let on = t < activity.len() && activity[t][col];
                match (on, start) {
                    (true, None) => start = Some(t),
                    (false, Some(s)) => {
                        list.segments.push(Segment {
                            speaker: name.clone(),
                            onset: s as f64 * frame_s,
                            duration: (t - s) as f64 * frame_s,
                        });
                        start = None;
                    }
                    _ => {}
                }
            }
        }
        list
    }
}

/// One `SPEAKER` line per segment.
pub fn format_rttm(list: &SegmentList) -> String {
    let mut out = String::new();
    for s in &list.segments {
        writeln!(
            out,
            "SPEAKER {} 1 {:.3} {:.3} <NA> <NA> {} <NA> <NA>",
            list.recording_id, s.onset, s.duration, s.speaker
        )
        .expect("writing to a String");
    }
    out
}

pub fn write_rttm(path: &Path, lists: &[&SegmentList]) -> Result<()> {
    let text: String = lists.iter().map(|l| format_rttm(l)).collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses RTTM text into per-recording segment lists. Lines that are not
/// `SPEAKER` records are ignored; segments are kept as written.
pub fn parse_rttm_str(text: &str, source: &str) -> Result<BTreeMap<String, SegmentList>> {
    let mut out: BTreeMap<String, SegmentList> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.first() != Some(&"SPEAKER") {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            msg,
        };
        if fields.len() < 9 {
            return Err(err(format!("expected at least 9 fields, found {}", fields.len())));
        }
        let number = |k: usize, what: &str| -> Result<f64> {
            fields[k]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0)
                .ok_or_else(|| err(format!("bad {what} {:?}", fields[k])))
        };
        let onset = number(3, "onset")?;
        let duration = number(4, "duration")?;
        out.entry(fields[1].to_string())
            .or_insert_with(|| SegmentList::new(fields[1]))
            .segments
            .push(Segment {
                speaker: fields[7].to_string(),
                onset,
                duration,
            });
    }
    Ok(out)
}

pub fn parse_rttm(path: &Path) -> Result<BTreeMap<String, SegmentList>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_rttm_str(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_line_round_trip() {
        let line = "SPEAKER rec1 1 1.250 3.500 <NA> <NA> spkA <NA> <NA>\n";
        let parsed = parse_rttm_str(line, "t").unwrap();
        assert_eq!(format_rttm(&parsed["rec1"]), line);
    }

    #[test]
    fn keeps_adjacent_segments_and_ignores_other_lines() {
        let text = "SPKR-INFO x\nSPEAKER r 1 0.0 1.0 <NA> <NA> a <NA> <NA>\n  SPEAKER   r 1 1.0 1.0 <NA> <NA> a <NA> <NA>  \n";
        let parsed = parse_rttm_str(text, "t").unwrap();
        assert_eq!(parsed["r"].segments.len(), 2);
    }

    #[test]
    fn errors_name_the_line() {
        let text = "SPEAKER r 1 0.0 1.0 <NA> <NA> a <NA> <NA>\nSPEAKER r 1 0.0 1.0 <NA> <NA> a\n";
        assert!(matches!(parse_rttm_str(text, "t"), Err(Error::Parse { line: 2, .. })));
        let bad = "SPEAKER r 1 zero 1.0 <NA> <NA> a <NA> <NA>\n";
        assert!(matches!(parse_rttm_str(bad, "t"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn activity_round_trip() {
        let spk = vec!["a".to_string(), "b".to_string()];
        let act = vec![
            vec![false, true],
            vec![true, true],
            vec![true, false],
            vec![false, false],
            vec![true, false],
        ];
        let list = SegmentList::from_activity("r", &spk, &act, 0.1);
        assert_eq!(list.segments.len(), 3);
        assert_eq!(list.to_activity(&spk, 0.1, 5), act);
    }
}
