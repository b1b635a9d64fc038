//! From posteriors to diarization segments.

use std::path::Path;

use crate::error::{config_err, Result};
use crate::frame_encoder::{read_features, stack_features, BASE_PERIOD_S};
use crate::model::{DiaPer, Prediction};
use crate::numerics::Tensor;
use crate::params::ModelParams;
use crate::rttm::{write_rttm, SegmentList};

/// Binary activity of the attractors judged to exist.
#[derive(Debug, Clone, PartialEq)]
pub struct Activity {
    /// Original attractor index of each kept column.
    pub attractors: Vec<usize>,
    /// `T × S'`
    pub grid: Vec<Vec<bool>>,
}

impl Activity {
    pub fn speaker_names(&self) -> Vec<String> {
        self.attractors.iter().map(|a| format!("spk{a}")).collect()
    }

    pub fn num_speakers(&self) -> usize {
        self.attractors.len()
    }
}

/// Keeps attractors with existence `≥ exist_thresh` and marks frames with
/// posterior `≥ act_thresh` active.
pub fn posteriors_to_activity(posteriors: &Tensor, existence: &[f64], act_thresh: f64, exist_thresh: f64) -> Result<Activity> {
    let (t, a) = posteriors.dims2()?;
    if existence.len() != a {
        return Err(config_err!("{} existence values for {a} attractors", existence.len()));
    }
    let attractors: Vec<usize> = (0..a).filter(|&j| existence[j] >= exist_thresh).collect();
    let grid = (0..t)
        .map(|k| attractors.iter().map(|&j| posteriors.get(k, j) >= act_thresh).collect())
        .collect();
    Ok(Activity { attractors, grid })
}

/// Binary median over a centred window of odd length, shrunk symmetrically
/// near the ends so it always covers an odd number of frames.
pub fn median_filter(column: &[bool], window: usize) -> Result<Vec<bool>> {
    if window % 2 == 0 {
        return Err(config_err!("median filter window must be odd, got {window}"));
    }
    let n = column.len();
    let half = window / 2;
    // prefix[i] = number of active frames before i
    let mut prefix = vec![0usize; n + 1];
    for (i, &b) in column.iter().enumerate() {
        prefix[i + 1] = prefix[i] + b as usize;
    }
    Ok((0..n)
        .map(|t| {
            let h = half.min(t).min(n - 1 - t);
            let ones = prefix[t + h + 1] - prefix[t - h];
            2 * ones > 2 * h + 1
        })
        .collect())
}

pub fn median_filter_activity(activity: &Activity, window: usize) -> Result<Activity> {
    let t = activity.grid.len();
    let mut grid = vec![vec![false; activity.num_speakers()]; t];
    for j in 0..activity.num_speakers() {
        let col: Vec<bool> = activity.grid.iter().map(|r| r[j]).collect();
        for (row, v) in grid.iter_mut().zip(median_filter(&col, window)?) {
            row[j] = v;
        }
    }
    Ok(Activity {
        attractors: activity.attractors.clone(),
        grid,
    })
}

pub fn activity_to_segments(activity: &Activity, recording_id: &str, frame_period_s: f64) -> SegmentList {
    SegmentList::from_activity(recording_id, &activity.speaker_names(), &activity.grid, frame_period_s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferOptions {
    pub subsample: usize,
    pub act_thresh: f64,
    pub exist_thresh: f64,
    /// Median-filter window; `None` disables filtering (used when scoring
    /// without a collar).
    pub median_window: Option<usize>,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            subsample: 10,
            act_thresh: 0.5,
            exist_thresh: 0.5,
            median_window: Some(11),
        }
    }
}

impl InferOptions {
    /// Filtering follows the scoring collar: on with a collar, off without.
    pub fn for_collar(collar_s: f64) -> Self {
        Self {
            median_window: (collar_s > 0.0).then_some(11),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diarization {
    pub segments: SegmentList,
    pub activity: Activity,
    pub prediction: Option<Prediction>,
}

/// Full-sequence inference on base-rate features of one recording.
pub fn diarize(model: &DiaPer, params: &ModelParams, base: &Tensor, recording_id: &str, opts: &InferOptions) -> Result<Diarization> {
    if base.rows() == 0 {
        log::warn!("{recording_id}: no frames, emitting no segments");
        return Ok(Diarization {
            segments: SegmentList::new(recording_id),
            activity: Activity {
                attractors: Vec::new(),
                grid: Vec::new(),
            },
            prediction: None,
        });
    }
    let x = stack_features(base, opts.subsample)?;
    let pred = model.predict(params, &x)?;
    let mut activity = posteriors_to_activity(&pred.posteriors, &pred.existence, opts.act_thresh, opts.exist_thresh)?;
    if let Some(w) = opts.median_window {
        activity = median_filter_activity(&activity, w)?;
    }
    let period = opts.subsample as f64 * BASE_PERIOD_S;
    Ok(Diarization {
        segments: activity_to_segments(&activity, recording_id, period),
        activity,
        prediction: Some(pred),
    })
}

/// Reads a feature file, diarizes it and writes the RTTM to `out`.
pub fn infer_file(
    model: &DiaPer,
    params: &ModelParams,
    features: &Path,
    recording_id: &str,
    out: &Path,
    opts: &InferOptions,
) -> Result<SegmentList> {
    let base = read_features(features)?;
    let result = diarize(model, params, &base, recording_id, opts)?;
    write_rttm(out, &[&result.segments])?;
    Ok(result.segments)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn existence_filter_and_tie_rule() {
        let post = Tensor::from_rows(&[[0.5, 0.9, 0.4], [0.49, 0.1, 0.6]]).unwrap();
        let act = posteriors_to_activity(&post, &[0.9, 0.4, 0.6], 0.5, 0.5).unwrap();
        assert_eq!(act.attractors, vec![0, 2]);
        assert_eq!(act.speaker_names(), vec!["spk0", "spk2"]);
        assert_eq!(act.grid, vec![vec![true, false], vec![false, true]]);
        let none = posteriors_to_activity(&post, &[0.1, 0.2, 0.3], 0.5, 0.5).unwrap();
        assert_eq!(none.num_speakers(), 0);
    }

    #[test]
    fn median_basics() {
        assert_eq!(median_filter(&[true; 7], 11).unwrap(), vec![true; 7]);
        let mut spike = vec![false; 21];
        spike[10] = true;
        assert_eq!(median_filter(&spike, 11).unwrap(), vec![false; 21]);
        assert!(median_filter(&spike, 10).is_err());
    }

    #[test]
    fn long_runs_are_fixed_points() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let mut col = Vec::new();
            let mut on = rng.random_bool(0.5);
            while col.len() < 200 {
                col.extend(std::iter::repeat_n(on, rng.random_range(6..30)));
                on = !on;
            }
            assert_eq!(median_filter(&col, 11).unwrap(), col);
        }
    }

    #[test]
    fn never_activates_far_from_input() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let col: Vec<bool> = (0..100).map(|_| rng.random_bool(0.3)).collect();
            let out = median_filter(&col, 11).unwrap();
            for (t, &v) in out.iter().enumerate() {
                if v {
                    let lo = t.saturating_sub(5);
                    assert!(col[lo..(t + 6).min(100)].iter().any(|&b| b));
                }
            }
        }
    }

    #[test]
    fn segments_from_activity() {
        let act = Activity {
            attractors: vec![3],
            grid: vec![vec![false], vec![true], vec![true], vec![false]],
        };
        let segs = activity_to_segments(&act, "r", 0.1);
        assert_eq!(segs.segments.len(), 1);
        assert_eq!(segs.segments[0].speaker, "spk3");
        assert!((segs.segments[0].onset - 0.1).abs() < 1e-12);
        assert!((segs.segments[0].duration - 0.2).abs() < 1e-12);
    }
}
