//! Simulated conversations: turn-taking reference labels and synthetic
//! speaker-signature features standing in for filterbank outputs.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

use crate::error::{config_err, Error, Result};
use crate::frame_encoder::{read_features, stack_features, write_features, BASE_DIM, BASE_PERIOD_S};
use crate::numerics::Tensor;
use crate::rttm::{parse_rttm, write_rttm, SegmentList};

#[derive(Debug, Clone, PartialEq)]
pub struct ScConfig {
    pub min_speakers: usize,
    pub max_speakers: usize,
    pub duration_s: f64,
    pub pause_mean_s: f64,
    pub overlap_prob: f64,
    pub turn_mean_s: f64,
    pub feature_dim: usize,
    pub signature_scale: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for ScConfig {
    fn default() -> Self {
        Self {
            min_speakers: 2,
            max_speakers: 2,
            duration_s: 60.0,
            pause_mean_s: 1.0,
            overlap_prob: 0.2,
            turn_mean_s: 3.0,
            feature_dim: BASE_DIM,
            signature_scale: 1.0,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl ScConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_speakers == 0 || self.min_speakers > self.max_speakers {
            return Err(config_err!(
                "speaker range {}..={} is empty or starts at zero",
                self.min_speakers,
                self.max_speakers
            ));
        }
        for (name, v) in [
            ("duration", self.duration_s),
            ("pause mean", self.pause_mean_s),
            ("turn mean", self.turn_mean_s),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.overlap_prob) {
            return Err(config_err!("overlap probability {} outside [0, 1]", self.overlap_prob));
        }
        if self.feature_dim == 0 || self.noise_std < 0.0 {
            return Err(config_err!("feature dimension must be positive and noise non-negative"));
        }
        Ok(())
    }

    fn frames(&self) -> usize {
        ((self.duration_s / BASE_PERIOD_S).round() as usize).max(1)
    }
}

/// Binary activity of `S` speakers on the base frame grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceLabels {
    /// `T × S`
    pub activities: Tensor,
    pub speaker_ids: Vec<String>,
}

impl ReferenceLabels {
    pub fn num_speakers(&self) -> usize {
        self.speaker_ids.len()
    }

    pub fn num_frames(&self) -> usize {
        self.activities.rows()
    }

    pub fn to_bool(&self) -> Vec<Vec<bool>> {
        let s = self.num_speakers();
        (0..self.num_frames())
            .map(|t| (0..s).map(|j| self.activities.get(t, j) > 0.5).collect())
            .collect()
    }

    pub fn from_bool(grid: &[Vec<bool>], speaker_ids: Vec<String>) -> Result<Self> {
        let s = speaker_ids.len();
        let data = grid
            .iter()
            .flat_map(|row| row.iter().map(|&b| if b { 1.0 } else { 0.0 }))
            .collect();
        Ok(Self {
            activities: Tensor::new(vec![grid.len(), s], data)?,
            speaker_ids,
        })
    }

    pub fn to_segments(&self, recording_id: &str, frame_s: f64) -> SegmentList {
        SegmentList::from_activity(recording_id, &self.speaker_ids, &self.to_bool(), frame_s)
    }

    /// Labels at every `subsample`-th frame, matching `stack_features`.
    pub fn subsample(&self, subsample: usize) -> Result<Self> {
        let rows: Vec<usize> = (0..self.num_frames()).step_by(subsample.max(1)).collect();
        Ok(Self {
            activities: self.activities.select_rows(&rows)?,
            speaker_ids: self.speaker_ids.clone(),
        })
    }

    /// Frames `start..start + len`, padded with silence past the end.
    /// Speakers absent from the window are dropped.
    pub fn crop(&self, start: usize, len: usize) -> Result<Self> {
        let s = self.num_speakers();
        let mut grid = vec![vec![false; s]; len];
        let full = self.to_bool();
        for (k, row) in grid.iter_mut().enumerate() {
            if let Some(src) = full.get(start + k) {
                row.copy_from_slice(src);
            }
        }
        let keep: Vec<usize> = (0..s).filter(|&j| grid.iter().any(|r| r[j])).collect();
        let grid: Vec<Vec<bool>> = grid.iter().map(|r| keep.iter().map(|&j| r[j]).collect()).collect();
        Self::from_bool(&grid, keep.iter().map(|&j| self.speaker_ids[j].clone()).collect())
    }

    /// Fraction of speech frames with two or more active speakers.
    pub fn overlap_fraction(&self) -> f64 {
        let counts: Vec<usize> = self.to_bool().iter().map(|r| r.iter().filter(|&&b| b).count()).collect();
        let speech = counts.iter().filter(|&&c| c > 0).count();
        let overlap = counts.iter().filter(|&&c| c > 1).count();
        if speech == 0 {
            0.0
        } else {
            overlap as f64 / speech as f64
        }
    }
}

fn frames_of(seconds: f64) -> usize {
    (seconds / BASE_PERIOD_S).round() as usize
}

fn try_labels<R: Rng + ?Sized>(cfg: &ScConfig, speakers: usize, rng: &mut R) -> Option<Vec<Vec<bool>>> {
    let total = cfg.frames();
    let turn = Exp::new(1.0 / cfg.turn_mean_s).expect("positive rate");
    let pause = Exp::new(1.0 / cfg.pause_mean_s).expect("positive rate");
    let mut grid = vec![vec![false; speakers]; total];
    let mut order: Vec<usize> = (0..speakers).collect();
    order.shuffle(rng);
    let mut last: Option<(usize, usize)> = None;
    let mut frontier: usize = 0;
    let mut k = 0;
    loop {
        let spk = match (order.get(k), last) {
            (Some(&s), _) => s,
            (None, Some((prev, _))) if speakers > 1 => {
                let s = rng.random_range(0..speakers - 1);
                if s >= prev {
                    s + 1
                } else {
                    s
                }
            }
            _ => 0,
        };
        let start = match last {
            None => frames_of(pause.sample(rng)),
            Some((_, prev_start)) if speakers > 1 && rng.random::<f64>() < cfg.overlap_prob => {
                let back = frames_of(pause.sample(rng)).max(1);
                frontier.saturating_sub(back).max(prev_start + 1)
            }
            Some(_) => frontier + frames_of(pause.sample(rng)),
        };
        if start >= total {
            break;
        }
        let end = (start + frames_of(turn.sample(rng)).max(1)).min(total);
        for row in &mut grid[start..end] {
            row[spk] = true;
        }
        frontier = frontier.max(end);
        last = Some((spk, start));
        k += 1;
    }
    let every_speaker_active = (0..speakers).all(|j| grid.iter().any(|r| r[j]));
    every_speaker_active.then_some(grid)
}

/// Alternating speaker turns with exponential turn and pause lengths; with
/// probability `overlap_prob` a turn starts before the previous one ends.
/// The first turns visit every speaker once, in random order.
pub fn generate_labels<R: Rng + ?Sized>(cfg: &ScConfig, rng: &mut R) -> Result<ReferenceLabels> {
    cfg.validate()?;
    let speakers = rng.random_range(cfg.min_speakers..=cfg.max_speakers);
    for _ in 0..100 {
        if let Some(grid) = try_labels(cfg, speakers, rng) {
            let ids = (0..speakers).map(|j| format!("spk{j}")).collect();
            return ReferenceLabels::from_bool(&grid, ids);
        }
    }
    Err(config_err!(
        "could not fit {speakers} speakers into {} s; lengthen the recording or shorten turns",
        cfg.duration_s
    ))
}

/// `S × F` unit-norm vectors with pairwise `|cos| < 0.5`, by rejection.
pub fn sample_signatures<R: Rng + ?Sized>(speakers: usize, dim: usize, rng: &mut R) -> Result<Tensor> {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut sigs: Vec<Vec<f64>> = Vec::with_capacity(speakers);
    let mut attempts = 0;
    while sigs.len() < speakers {
        attempts += 1;
        if attempts > 10_000 {
            return Err(config_err!(
                "cannot draw {speakers} signatures of dimension {dim} with |cos| < 0.5"
            ));
        }
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        let ok = sigs
            .iter()
            .all(|s| s.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>().abs() < 0.5);
        if ok {
            sigs.push(v);
        }
    }
    Tensor::new(vec![speakers, dim], sigs.concat())
}

/// `scale · Σ active signatures + N(0, noise_std²)` per frame, stored at
/// `f32` precision so feature files round-trip exactly.
pub fn synth_features<R: Rng + ?Sized>(
    labels: &ReferenceLabels,
    signatures: &Tensor,
    cfg: &ScConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let (t, s) = labels.activities.dims2()?;
    let (s2, f) = signatures.dims2()?;
    if s != s2 {
        return Err(config_err!("{s} speakers but {s2} signatures"));
    }
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| config_err!("noise: {e}"))?;
    let mut out = vec![0.0; t * f];
    for (k, row) in out.chunks_mut(f).enumerate() {
        for j in 0..s {
            if labels.activities.get(k, j) > 0.5 {
                row.iter_mut()
                    .zip(signatures.row(j))
                    .for_each(|(x, v)| *x += cfg.signature_scale * v);
            }
        }
        for x in row.iter_mut() {
            let noisy = if cfg.noise_std > 0.0 { *x + noise.sample(rng) } else { *x };
            *x = noisy as f32 as f64;
        }
    }
    Tensor::new(vec![t, f], out)
}

/// A simulated recording on the base (10 ms) frame grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SimRecording {
    pub id: String,
    /// `T0 × F` base-rate features.
    pub features: Tensor,
    pub labels: ReferenceLabels,
    pub signatures: Tensor,
}

impl SimRecording {
    /// Stacked model inputs and matching labels at `subsample`.
    pub fn model_input(&self, subsample: usize) -> Result<(Tensor, ReferenceLabels)> {
        Ok((stack_features(&self.features, subsample)?, self.labels.subsample(subsample)?))
    }
}

/// One recording generated from `cfg` with its own `seed`.
pub fn simulate_recording(cfg: &ScConfig, id: &str, seed: u64) -> Result<SimRecording> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = generate_labels(cfg, &mut rng)?;
    let signatures = sample_signatures(labels.num_speakers(), cfg.feature_dim, &mut rng)?;
    let features = synth_features(&labels, &signatures, cfg, &mut rng)?;
    Ok(SimRecording {
        id: id.to_string(),
        features,
        labels,
        signatures,
    })
}

/// Per-recording seed derived from a set seed and the recording index.
pub fn recording_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64)
        .rotate_left(17)
        ^ 0xD1B5_4A32_D192_ED03
}

pub fn simulate_set(cfg: &ScConfig, prefix: &str, count: usize) -> Result<Vec<SimRecording>> {
    (0..count)
        .map(|i| simulate_recording(cfg, &format!("{prefix}{i:04}"), recording_seed(cfg.seed, i)))
        .collect()
}

/// The speaker-counting set: `per_count` recordings for every speaker count
/// from 1 to `max_speakers`.
pub fn counting_set(base: &ScConfig, max_speakers: usize, per_count: usize) -> Result<Vec<SimRecording>> {
    let mut out = Vec::with_capacity(max_speakers * per_count);
    for s in 1..=max_speakers {
        let cfg = ScConfig {
            min_speakers: s,
            max_speakers: s,
            ..base.clone()
        };
        for i in 0..per_count {
            let idx = (s - 1) * per_count + i;
            out.push(simulate_recording(&cfg, &format!("count{s:02}_{i:02}"), recording_seed(base.seed, idx))?);
        }
    }
    Ok(out)
}

/// A recording as read back from disk: base features and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub id: String,
    pub features: Tensor,
    pub labels: ReferenceLabels,
}

impl From<&SimRecording> for DatasetEntry {
    fn from(r: &SimRecording) -> Self {
        Self {
            id: r.id.clone(),
            features: r.features.clone(),
            labels: r.labels.clone(),
        }
    }
}

pub const MANIFEST: &str = "manifest.tsv";

/// Writes `<id>.dpft` and `<id>.rttm` per recording plus `manifest.tsv`
/// (`id`, feature path, RTTM path; paths relative to `dir`).
pub fn write_dataset(dir: &Path, recordings: &[DatasetEntry]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for r in recordings {
        let feat = format!("{}.dpft", r.id);
        let rttm = format!("{}.rttm", r.id);
        write_features(&dir.join(&feat), &r.features)?;
        write_rttm(&dir.join(&rttm), &[&r.labels.to_segments(&r.id, BASE_PERIOD_S)])?;
        manifest.push_str(&format!("{}\t{feat}\t{rttm}\n", r.id));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads every recording listed in a manifest. Relative paths are resolved
/// against the manifest's directory.
pub fn read_dataset(manifest: &Path) -> Result<Vec<DatasetEntry>> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, feat, rttm] = fields[..] else {
            return Err(Error::Parse {
                path: manifest.display().to_string(),
                line: i + 1,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        };
        let features = read_features(&base.join(feat))?;
        let segments = parse_rttm(&base.join(rttm))?
            .remove(id)
            .unwrap_or_else(|| SegmentList::new(id));
        let speakers = segments.speakers();
        let grid = segments.to_activity(&speakers, BASE_PERIOD_S, features.rows());
        out.push(DatasetEntry {
            id: id.to_string(),
            features,
            labels: ReferenceLabels::from_bool(&grid, speakers)?,
        });
    }
    if out.is_empty() {
        log::warn!("{}: manifest lists no recordings", manifest.display());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn no_overlap_without_overlap_probability() {
        let cfg = ScConfig {
            min_speakers: 4,
            max_speakers: 4,
            overlap_prob: 0.0,
            ..ScConfig::default()
        };
        for seed in 0..20 {
            let l = generate_labels(&cfg, &mut rng(seed)).unwrap();
            assert!(l.to_bool().iter().all(|r| r.iter().filter(|&&b| b).count() <= 1));
        }
    }

    #[test]
    fn fixed_speaker_count_and_every_speaker_speaks() {
        let cfg = ScConfig {
            min_speakers: 3,
            max_speakers: 3,
            ..ScConfig::default()
        };
        let l = generate_labels(&cfg, &mut rng(1)).unwrap();
        assert_eq!(l.num_speakers(), 3);
        for j in 0..3 {
            assert!((0..l.num_frames()).any(|t| l.activities.get(t, j) == 1.0));
        }
        assert_eq!(l, generate_labels(&cfg, &mut rng(1)).unwrap());
    }

    #[test]
    fn impossible_fit_is_a_config_error() {
        let cfg = ScConfig {
            min_speakers: 10,
            max_speakers: 10,
            duration_s: 0.05,
            ..ScConfig::default()
        };
        assert!(matches!(generate_labels(&cfg, &mut rng(0)), Err(Error::Config(_))));
    }

    #[test]
    fn noiseless_single_speaker_frame_is_the_scaled_signature() {
        let cfg = ScConfig {
            noise_std: 0.0,
            signature_scale: 2.0,
            ..ScConfig::default()
        };
        let labels = ReferenceLabels::from_bool(&[vec![true, false], vec![false, false]], vec!["a".into(), "b".into()]).unwrap();
        let sigs = sample_signatures(2, 5, &mut rng(3)).unwrap();
        let x = synth_features(&labels, &sigs, &cfg, &mut rng(4)).unwrap();
        for k in 0..5 {
            assert_eq!(x.get(0, k), (2.0 * sigs.get(0, k)) as f32 as f64);
            assert_eq!(x.get(1, k), 0.0);
        }
    }

    #[test]
    fn signatures_are_unit_and_spread() {
        let s = sample_signatures(10, BASE_DIM, &mut rng(5)).unwrap();
        for i in 0..10 {
            let n: f64 = s.row(i).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
            for j in 0..i {
                let c: f64 = s.row(i).iter().zip(s.row(j)).map(|(a, b)| a * b).sum();
                assert!(c.abs() < 0.5);
            }
        }
    }

    #[test]
    fn crop_pads_with_silence_and_drops_absent_speakers() {
        let l = ReferenceLabels::from_bool(
            &[vec![true, false], vec![true, false], vec![false, true]],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let c = l.crop(0, 2).unwrap();
        assert_eq!(c.speaker_ids, vec!["a".to_string()]);
        let c = l.crop(2, 3).unwrap();
        assert_eq!(c.num_frames(), 3);
        assert_eq!(c.speaker_ids, vec!["b".to_string()]);
        assert_eq!(c.activities.data(), &[1.0, 0.0, 0.0]);
    }
}
