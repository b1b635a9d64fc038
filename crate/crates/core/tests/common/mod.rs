//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use diaper_core::model::ForwardOutput;
use diaper_core::{total_loss, AttentionNorm, DiaPer, Fwd, LossFlags, ModelConfig, ModelParams, Segment, SegmentList, Tape, Tensor};
use rand::Rng;

/// Frame-discretised DER: frames of `step_s` judged at their centres, the
/// speaker mapping found by trying every one-to-one pairing.
pub fn brute_der(reference: &SegmentList, hypothesis: &SegmentList, collar_s: f64, step_s: f64) -> f64 {
    let refs = reference.speakers();
    let hyps = hypothesis.speakers();
    let end = reference
        .segments
        .iter()
        .chain(&hypothesis.segments)
        .map(Segment::end)
        .fold(0.0, f64::max);
    let frames = (end / step_s).ceil() as usize + 1;
    let active = |list: &SegmentList, spk: &str, t: f64| {
        list.segments
            .iter()
            .any(|s| s.speaker == spk && s.onset <= t && t < s.end())
    };
    let boundaries: Vec<f64> = reference.segments.iter().flat_map(|s| [s.onset, s.end()]).collect();

    let mut scored = Vec::new();
    for k in 0..frames {
        let t = (k as f64 + 0.5) * step_s;
        if boundaries.iter().any(|b| (t - b).abs() < collar_s) {
            continue;
        }
        let r: Vec<bool> = refs.iter().map(|s| active(reference, s, t)).collect();
        let h: Vec<bool> = hyps.iter().map(|s| active(hypothesis, s, t)).collect();
        scored.push((r, h));
    }
    let ref_total: usize = scored.iter().map(|(r, _)| r.iter().filter(|&&a| a).count()).sum();
    if ref_total == 0 {
        return 0.0;
    }

    let mut best = f64::INFINITY;
    for mapping in injective_maps(hyps.len(), refs.len()) {
        let mut err = 0usize;
        for (r, h) in &scored {
            let nr = r.iter().filter(|&&a| a).count();
            let nh = h.iter().filter(|&&a| a).count();
            let correct = mapping
                .iter()
                .enumerate()
                .filter(|&(hi, m)| matches!(m, Some(ri) if h[hi] && r[*ri]))
                .count();
            err += nr.max(nh) - correct;
        }
        best = best.min(err as f64 / ref_total as f64);
    }
    best
}

/// Every partial injective map from `n` items into `m` slots.
pub fn injective_maps(n: usize, m: usize) -> Vec<Vec<Option<usize>>> {
    fn go(i: usize, n: usize, used: &mut Vec<bool>, cur: &mut Vec<Option<usize>>, out: &mut Vec<Vec<Option<usize>>>) {
        if i == n {
            out.push(cur.clone());
            return;
        }
        cur.push(None);
        go(i + 1, n, used, cur, out);
        cur.pop();
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                cur.push(Some(j));
                go(i + 1, n, used, cur, out);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(0, n, &mut vec![false; m], &mut Vec::new(), &mut out);
    out
}

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn bce(y: f64, p: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Minimum over all attractor permutations of the normalised BCE, each
/// candidate's per-pair costs summed in ascending order.
pub fn exhaustive_pit(y: &Tensor, yhat: &Tensor, normalize_by_speakers: bool) -> f64 {
    let (t, s) = (y.rows(), y.cols());
    let a = yhat.cols();
    let pair = |i: usize, j: usize| -> f64 {
        (0..t)
            .map(|k| bce(if i < s { y.get(k, i) } else { 0.0 }, yhat.get(k, j)))
            .sum()
    };
    let norm = if normalize_by_speakers {
        (t * s.max(1)) as f64
    } else {
        (t * a) as f64
    };
    permutations(a)
        .iter()
        .map(|perm| {
            let mut terms: Vec<f64> = perm.iter().enumerate().map(|(i, &j)| pair(i, j)).collect();
            terms.sort_by(f64::total_cmp);
            terms.iter().sum::<f64>() / norm
        })
        .fold(f64::INFINITY, f64::min)
}

/// Disjoint segments for `speakers` speakers within `[0, span)`.
pub fn random_segments<R: Rng>(
    rng: &mut R,
    id: &str,
    prefix: &str,
    speakers: usize,
    span: f64,
    durations: std::ops::Range<f64>,
) -> SegmentList {
    let mut list = SegmentList::new(id);
    for s in 0..speakers {
        let mut t = rng.random_range(0.0..1.5);
        while t < span {
            let dur = rng.random_range(durations.clone());
            if t + dur > span {
                break;
            }
            list.segments.push(Segment {
                speaker: format!("{prefix}{s}"),
                onset: t,
                duration: dur,
            });
            t += dur + rng.random_range(0.1..1.5);
        }
    }
    list
}

pub fn random_labels<R: Rng>(rng: &mut R, t: usize, s: usize) -> Tensor {
    let data = (0..t * s).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
    Tensor::new(vec![t, s], data).unwrap()
}

pub fn random_probs<R: Rng>(rng: &mut R, t: usize, a: usize) -> Tensor {
    let data = (0..t * a).map(|_| rng.random_range(0.001..0.999)).collect();
    Tensor::new(vec![t, a], data).unwrap()
}

/// The tiny configuration used for gradient and invariance checks.
pub fn tiny_config(feature_dim: usize, seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.feature_dim = feature_dim;
    cfg.encoder.model_dim = 8;
    cfg.encoder.num_heads = 2;
    cfg.encoder.num_layers = 2;
    cfg.encoder.ff_dim = 16;
    cfg.decoder.num_heads = 2;
    cfg.decoder.num_blocks = 2;
    cfg.decoder.num_latents = 4;
    cfg.decoder.num_attractors = 3;
    cfg.decoder.self_ff_dim = 48;
    cfg.dropout = 0.0;
    cfg.seed = seed;
    cfg
}

pub fn tiny_model(norm: AttentionNorm, conditioning: bool, seed: u64) -> DiaPer {
    let mut cfg = tiny_config(5, seed);
    cfg.decoder.attention_norm = norm;
    cfg.encoder.conditioning = conditioning;
    DiaPer::new(cfg).unwrap()
}

/// The small model trained in the learning-sanity checks.
pub fn learning_config() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.encoder.model_dim = 32;
    cfg.encoder.num_layers = 2;
    cfg.encoder.num_heads = 4;
    cfg.encoder.ff_dim = 128;
    cfg.decoder.num_blocks = 2;
    cfg.decoder.num_latents = 16;
    cfg.decoder.num_attractors = 10;
    cfg.decoder.num_heads = 4;
    cfg.decoder.self_ff_dim = 192;
    cfg.dropout = 0.0;
    cfg.seed = 3;
    cfg
}

pub fn permute_rows(x: &Tensor, perm: &[usize]) -> Tensor {
    x.select_rows(perm).unwrap()
}

/// Every value a loss computation reports, for comparisons.
pub fn loss_values(out: &ForwardOutput<'_>, y: &Tensor, flags: LossFlags) -> [f64; 6] {
    let b = total_loss(y, out, flags).unwrap();
    [
        b.total.value().item(),
        b.diar_final,
        b.diar_intermediate,
        b.exist_final,
        b.exist_intermediate,
        b.entropy,
    ]
}

pub fn shuffled<R: Rng>(rng: &mut R, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Largest deviation of `encode(P X)` from `P encode(X)` over all layers.
pub fn encoder_equivariance_error(model: &DiaPer, params: &ModelParams, x: &Tensor, perm: &[usize]) -> f64 {
    let run = |x: &Tensor| -> Vec<Tensor> {
        let tape = Tape::inference();
        let vars = params.bind(&tape);
        let f = Fwd::eval(&tape, &vars);
        let emb = model.encoder().encode(&f, &tape.constant(x), model.decoder()).unwrap();
        emb.per_layer.iter().map(|e| e.value().clone()).collect()
    };
    let plain = run(x);
    let permuted = run(&permute_rows(x, perm));
    plain
        .iter()
        .zip(&permuted)
        .map(|(a, b)| permute_rows(a, perm).max_abs_diff(b))
        .fold(0.0, f64::max)
}

/// Largest change in attractors and existence when the embeddings are
/// reordered in time.
pub fn decoder_invariance_error(model: &DiaPer, params: &ModelParams, e: &Tensor, perm: &[usize]) -> f64 {
    let run = |e: &Tensor| -> (Tensor, Tensor) {
        let tape = Tape::inference();
        let vars = params.bind(&tape);
        let f = Fwd::eval(&tape, &vars);
        let set = model.decoder().decode(&f, &tape.constant(e)).unwrap();
        (set.attractors.value().clone(), set.existence.value().clone())
    };
    let (a0, p0) = run(e);
    let (a1, p1) = run(&permute_rows(e, perm));
    a0.max_abs_diff(&a1).max(p0.max_abs_diff(&p1))
}

/// Largest change in any loss term when the reference columns are permuted.
pub fn loss_permutation_error(model: &DiaPer, params: &ModelParams, x: &Tensor, y: &Tensor, perm: &[usize], flags: LossFlags) -> f64 {
    let tape = Tape::new();
    let vars = params.bind(&tape);
    let f = Fwd::eval(&tape, &vars);
    let out = model.forward(&f, &tape.constant(x)).unwrap();
    let a = loss_values(&out, y, flags);
    let b = loss_values(&out, &y.select_cols(perm).unwrap(), flags);
    a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

/// Change in DER when the hypothesis speakers are renamed by `perm`.
pub fn der_relabel_error(reference: &SegmentList, hypothesis: &SegmentList, collar: f64, perm: &[usize]) -> f64 {
    let names = hypothesis.speakers();
    let mut renamed = hypothesis.clone();
    for s in &mut renamed.segments {
        let i = names.iter().position(|n| *n == s.speaker).unwrap();
        s.speaker = format!("relabelled{}", perm[i]);
    }
    let a = diaper_core::der(reference, hypothesis, collar).unwrap().der;
    let b = diaper_core::der(reference, &renamed, collar).unwrap().der;
    (a - b).abs()
}

/// Loss on a fixed input under `flags`, in evaluation mode.
pub fn fixed_loss(model: &DiaPer, params: &ModelParams, x: &Tensor, y: &Tensor, flags: LossFlags) -> f64 {
    let tape = Tape::new();
    let vars = params.bind(&tape);
    let f = Fwd::eval(&tape, &vars);
    let out = model.forward(&f, &tape.constant(x)).unwrap();
    total_loss(y, &out, flags).unwrap().total.value().item()
}

pub fn random_features<R: Rng>(rng: &mut R, t: usize, f: usize) -> Tensor {
    Tensor::randn(vec![t, f], 1.0, rng)
}

pub fn seg(speaker: &str, onset: f64, end: f64) -> Segment {
    Segment {
        speaker: speaker.into(),
        onset,
        duration: end - onset,
    }
}

pub fn random_reference<R: Rng>(rng: &mut R, span: f64, speakers: usize, durations: std::ops::Range<f64>) -> SegmentList {
    loop {
        let r = random_segments(rng, "r", "ref", speakers, span, durations.clone());
        if !r.segments.is_empty() {
            return r;
        }
    }
}

/// Independent random reference and hypothesis with collars up to 0.5 s:
/// dense boundaries and little scored speech.
pub fn random_instance<R: Rng>(rng: &mut R) -> (SegmentList, SegmentList, f64) {
    let span = rng.random_range(4.0..10.0);
    let nr = rng.random_range(1..=3);
    let nh = rng.random_range(0..=3);
    let reference = random_reference(rng, span, nr, 0.2..2.0);
    let hypothesis = random_segments(rng, "r", "hyp", nh, span, 0.2..2.0);
    let collar = match rng.random_range(0..3) {
        0 => 0.0,
        1 => 0.25,
        _ => rng.random_range(0.0..0.5),
    };
    (reference, hypothesis, collar)
}

/// A system-like hypothesis: the reference with jittered boundaries, some
/// segments relabelled or dropped and some false alarms added.
pub fn realistic_instance<R: Rng>(rng: &mut R) -> (SegmentList, SegmentList, f64) {
    let span = rng.random_range(20.0..40.0);
    let nr = rng.random_range(1..=3);
    let reference = random_reference(rng, span, nr, 1.0..3.0);
    let names = ["a", "b", "c"];
    let mut hypothesis = SegmentList::new("r");
    for s in &reference.segments {
        if rng.random_bool(0.1) {
            continue;
        }
        let spk: usize = s.speaker[3..].parse().unwrap();
        let label = if rng.random_bool(0.15) { names[(spk + 1) % 3] } else { names[spk] };
        let onset = (s.onset + rng.random_range(-0.3..0.3)).max(0.0);
        let end = (s.end() + rng.random_range(-0.3..0.3)).max(onset + 0.05);
        hypothesis.segments.push(seg(label, onset, end));
    }
    for _ in 0..rng.random_range(0..3) {
        let onset = rng.random_range(0.0..span - 1.0);
        hypothesis.segments.push(seg(names[rng.random_range(0..3)], onset, onset + rng.random_range(0.1..1.0)));
    }
    let collar = match rng.random_range(0..3) {
        0 => 0.0,
        1 => 0.25,
        _ => rng.random_range(0.0..0.25),
    };
    (reference, hypothesis, collar)
}
