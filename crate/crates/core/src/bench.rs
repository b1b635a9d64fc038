//! Wall-clock comparison of the Perceiver and LSTM attractor decoders over
//! recording length, on identical frame embeddings.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::eda::{EdaConfig, EdaDecoder};
use crate::error::{config_err, Result};
use crate::nn::Fwd;
use crate::numerics::{Tape, Tensor};
use crate::params::{Layout, ModelParams};
use crate::perceiver::{DecoderConfig, PerceiverDecoder};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub model_dim: usize,
    pub decoder: DecoderConfig,
    pub eda: EdaConfig,
    /// Model frames per minute of audio.
    pub frames_per_minute: usize,
    /// Minimum timed runs per length; the fastest is reported.
    pub repeats: usize,
    /// Short lengths are repeated until each decoder has run for at least
    /// this long in total.
    pub min_total_ms: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            model_dim: 128,
            decoder: DecoderConfig::default(),
            eda: EdaConfig {
                // decode every slot so both decoders emit the same number
                existence_threshold: 0.0,
                ..EdaConfig::default()
            },
            frames_per_minute: 600,
            repeats: 3,
            min_total_ms: 2000.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderTiming {
    pub minutes: f64,
    pub frames: usize,
    pub perceiver_ms: f64,
    pub eda_ms: f64,
}

impl DecoderTiming {
    pub fn ratio(&self) -> f64 {
        self.perceiver_ms / self.eda_ms
    }
}

fn elapsed_ms(f: &mut impl FnMut() -> Result<()>) -> Result<f64> {
    let start = Instant::now();
    f()?;
    Ok(start.elapsed().as_secs_f64() * 1e3)
}

/// Fastest times of `a` and `b`, run alternately so both see the same
/// machine state.
fn fastest_pair(
    repeats: usize,
    min_total_ms: f64,
    mut a: impl FnMut() -> Result<()>,
    mut b: impl FnMut() -> Result<()>,
) -> Result<(f64, f64)> {
    let (mut best_a, mut best_b) = (f64::INFINITY, f64::INFINITY);
    let (mut total_a, mut total_b) = (0.0, 0.0);
    let mut runs = 0;
    while runs < repeats.max(1) || total_a < min_total_ms || total_b < min_total_ms {
        let ta = elapsed_ms(&mut a)?;
        let tb = elapsed_ms(&mut b)?;
        best_a = best_a.min(ta);
        best_b = best_b.min(tb);
        total_a += ta;
        total_b += tb;
        runs += 1;
    }
    Ok((best_a, best_b))
}

/// Times both decoders on random embeddings of each length in `minutes`.
pub fn bench_decoders(minutes: &[f64], cfg: &BenchConfig) -> Result<Vec<DecoderTiming>> {
    let d = cfg.model_dim;
    let mut p_layout = Layout::default();
    let perceiver = PerceiverDecoder::new(&mut p_layout, &cfg.decoder, d)?;
    let p_params = ModelParams::init(&p_layout, cfg.seed);
    let mut e_layout = Layout::default();
    let eda = EdaDecoder::new(&mut e_layout, cfg.eda.clone(), d)?;
    let e_params = eda.init_params(&e_layout, cfg.seed);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(minutes.len());
    for &m in minutes {
        if !(m > 0.0 && m.is_finite()) {
            return Err(config_err!("recording length {m} minutes must be positive"));
        }
        let frames = ((m * cfg.frames_per_minute as f64).round() as usize).max(1);
        let e = Tensor::randn(vec![frames, d], 1.0, &mut rng);
        let (perceiver_ms, eda_ms) = fastest_pair(
            cfg.repeats,
            cfg.min_total_ms,
            || {
                let tape = Tape::inference();
                let vars = p_params.bind(&tape);
                let f = Fwd::eval(&tape, &vars);
                perceiver.decode(&f, &tape.constant(&e)).map(|_| ())
            },
            || eda.decode(&e_params, &e, cfg.seed).map(|_| ()),
        )?;
        log::info!("{m} min ({frames} frames): perceiver {perceiver_ms:.1} ms, eda {eda_ms:.1} ms");
        out.push(DecoderTiming {
            minutes: m,
            frames,
            perceiver_ms,
            eda_ms,
        });
    }
    Ok(out)
}

/// `T,perceiver_ms,eda_ms` rows.
pub fn timings_csv(rows: &[DecoderTiming]) -> String {
    let mut out = String::from("T,perceiver_ms,eda_ms\n");
    for r in rows {
        writeln!(out, "{},{:.3},{:.3}", r.frames, r.perceiver_ms, r.eda_ms).expect("writing to a String");
    }
    out
}
