//! The assembled diarization model: configuration, forward pass, parameter
//! counting and checkpoints.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{config_err, Error, Result};
use crate::frame_encoder::{EncoderConfig, FrameEncoder};
use crate::kv::{render, KvMap};
use crate::nn::Fwd;
use crate::numerics::{Tape, Tensor, Var, PROB_EPS};
use crate::params::{Layout, ModelParams};
use crate::perceiver::{DecoderConfig, PerceiverDecoder};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub feature_dim: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            feature_dim: 345,
            dropout: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn model_dim(&self) -> usize {
        self.encoder.model_dim
    }

    pub fn to_kv_pairs(&self) -> Vec<(&'static str, String)> {
        let (e, d) = (&self.encoder, &self.decoder);
        vec![
            ("feature_dim", self.feature_dim.to_string()),
            ("model_dim", e.model_dim.to_string()),
            ("num_layers", e.num_layers.to_string()),
            ("num_heads", e.num_heads.to_string()),
            ("ff_dim", e.ff_dim.to_string()),
            ("conditioning", e.conditioning.to_string()),
            ("num_blocks", d.num_blocks.to_string()),
            ("num_latents", d.num_latents.to_string()),
            ("num_attractors", d.num_attractors.to_string()),
            ("decoder_heads", d.num_heads.to_string()),
            ("self_ff_dim", d.self_ff_dim.to_string()),
            ("attention_norm", d.attention_norm.to_string()),
            ("initial_residual", d.initial_residual.to_string()),
            ("dropout", self.dropout.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn to_kv(&self) -> String {
        render(&self.to_kv_pairs())
    }

    /// Applies every model key present in `kv` on top of `self`.
    pub fn update_from(&mut self, kv: &mut KvMap) -> Result<()> {
        let (e, d) = (&mut self.encoder, &mut self.decoder);
        kv.update("feature_dim", &mut self.feature_dim)?;
        kv.update("model_dim", &mut e.model_dim)?;
        kv.update("num_layers", &mut e.num_layers)?;
        kv.update("num_heads", &mut e.num_heads)?;
        kv.update("ff_dim", &mut e.ff_dim)?;
        kv.update("conditioning", &mut e.conditioning)?;
        kv.update("num_blocks", &mut d.num_blocks)?;
        kv.update("num_latents", &mut d.num_latents)?;
        kv.update("num_attractors", &mut d.num_attractors)?;
        kv.update("decoder_heads", &mut d.num_heads)?;
        kv.update("self_ff_dim", &mut d.self_ff_dim)?;
        kv.update("attention_norm", &mut d.attention_norm)?;
        kv.update("initial_residual", &mut d.initial_residual)?;
        kv.update("dropout", &mut self.dropout)?;
        kv.update("seed", &mut self.seed)?;
        Ok(())
    }

    pub fn from_kv_text(text: &str, source: &str) -> Result<Self> {
        let mut kv = KvMap::parse(text, source)?;
        let mut cfg = Self::default();
        cfg.update_from(&mut kv)?;
        kv.finish()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.model_dim() == 0 {
            return Err(config_err!("feature and model dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Everything the losses need from one forward pass.
pub struct ForwardOutput<'t> {
    /// `T × A`
    pub posteriors: Var<'t>,
    /// `A × 1`
    pub existence: Var<'t>,
    /// Each encoder layer but the last, against the final attractors.
    pub per_layer_posteriors: Vec<Var<'t>>,
    /// Each decoder block but the last: final embeddings against that
    /// block's attractors, with that block's existence.
    pub per_block: Vec<(Var<'t>, Var<'t>)>,
    pub attractors: Var<'t>,
    /// Latent-combination weights, `A × N_lat`.
    pub combine: Var<'t>,
}

/// Plain-value result of an evaluation-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub posteriors: Tensor,
    pub existence: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DiaPer {
    config: ModelConfig,
    layout: Layout,
    encoder: FrameEncoder,
    decoder: PerceiverDecoder,
}

impl DiaPer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = Layout::default();
        let encoder = FrameEncoder::new(&mut layout, &config.encoder, config.feature_dim)?;
        let decoder = PerceiverDecoder::new(&mut layout, &config.decoder, config.model_dim())?;
        Ok(Self {
            config,
            layout,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn encoder(&self) -> &FrameEncoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &PerceiverDecoder {
        &self.decoder
    }

    /// Fresh parameters drawn from the configured seed.
    pub fn init_params(&self) -> ModelParams {
        ModelParams::init(&self.layout, self.config.seed)
    }

    pub fn forward<'t>(&self, f: &Fwd<'t, '_>, x: &Var<'t>) -> Result<ForwardOutput<'t>> {
        let emb = self.encoder.encode(f, x, &self.decoder)?;
        let e = emb.last();
        let set = self.decoder.decode(f, e)?;
        let activity = |e: &Var<'t>, a: &Var<'t>| -> Result<Var<'t>> {
            Ok(e.matmul_t(a)?.sigmoid().clamp(PROB_EPS, 1.0 - PROB_EPS))
        };
        let posteriors = activity(e, &set.attractors)?;
        let layers = emb.per_layer.len();
        let per_layer_posteriors = emb.per_layer[..layers - 1]
            .iter()
            .map(|el| activity(el, &set.attractors))
            .collect::<Result<_>>()?;
        let blocks = set.per_block.len();
        let per_block = set.per_block[..blocks - 1]
            .iter()
            .map(|(a, p)| Ok((activity(e, a)?, p.clamp(PROB_EPS, 1.0 - PROB_EPS))))
            .collect::<Result<_>>()?;
        Ok(ForwardOutput {
            posteriors,
            existence: set.existence.clamp(PROB_EPS, 1.0 - PROB_EPS),
            per_layer_posteriors,
            per_block,
            attractors: set.attractors,
            combine: self.decoder.combine_weights(f),
        })
    }

    /// Evaluation-mode forward pass without recording a graph.
    pub fn predict(&self, params: &ModelParams, features: &Tensor) -> Result<Prediction> {
        let tape = Tape::inference();
        let vars = params.bind(&tape);
        let f = Fwd::eval(&tape, &vars);
        let out = self.forward(&f, &tape.constant(features))?;
        Ok(Prediction {
            posteriors: out.posteriors.value().clone(),
            existence: out.existence.value().data().to_vec(),
        })
    }
}

/// Learnable scalar counts for a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCount {
    pub total: usize,
    pub breakdown: Vec<(String, usize)>,
}

pub fn count_params(config: &ModelConfig) -> Result<ParamCount> {
    let model = DiaPer::new(config.clone())?;
    Ok(ParamCount {
        total: model.layout().num_scalars(),
        breakdown: model.layout().breakdown(2),
    })
}

const CKPT_MAGIC: &[u8; 4] = b"DPCK";
const CKPT_VERSION: u8 = 1;

/// A configuration together with its parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
}

/// Writes `DPCK`: magic, version byte, `u32`-length-prefixed config text,
/// `u32` parameter count, then per parameter its `u32`-prefixed name,
/// `u32` rank, `u64` dimensions and `f64` values, all little-endian.
pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &ModelParams) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let cfg = config.to_kv();
    w.write_all(CKPT_MAGIC).map_err(io)?;
    w.write_all(&[CKPT_VERSION]).map_err(io)?;
    w.write_all(&(cfg.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(cfg.as_bytes()).map_err(io)?;
    w.write_all(&(params.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&(t.rank() as u32).to_le_bytes()).map_err(io)?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("{}: truncated checkpoint", self.path.display())));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format(format!("{}: invalid UTF-8", self.path.display())))
    }
}

/// Reads a checkpoint and checks its parameters against the layout implied
/// by its own configuration.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != CKPT_MAGIC {
        return Err(Error::Format(format!("{}: not a checkpoint", path.display())));
    }
    let version = r.take(1)?[0];
    if version != CKPT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let config = ModelConfig::from_kv_text(&r.string()?, &path.display().to_string())?;
    let count = r.u32()?;
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Format(format!("{name}: shape overflow")))?;
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        pairs.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{}: trailing bytes", path.display())));
    }
    let params = ModelParams::from_pairs(pairs)?;
    params.check_layout(DiaPer::new(config.clone())?.layout())?;
    Ok(Checkpoint { config, params })
}

/// Loads a checkpoint whose architecture must equal `expected`'s.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    check_same_architecture(&ckpt.config, expected)
        .map_err(|e| config_err!("{}: {e}", path.display()))?;
    Ok(ckpt)
}

/// Architecture keys must agree; seed and dropout may differ.
fn check_same_architecture(a: &ModelConfig, b: &ModelConfig) -> Result<()> {
    let strip = |c: &ModelConfig| ModelConfig {
        seed: 0,
        dropout: 0.0,
        ..c.clone()
    };
    if strip(a) == strip(b) {
        return Ok(());
    }
    let diffs: Vec<String> = a
        .to_kv_pairs()
        .into_iter()
        .zip(b.to_kv_pairs())
        .filter(|((k, x), (_, y))| x != y && *k != "seed" && *k != "dropout")
        .map(|((k, x), (_, y))| format!("{k} {x} vs {y}"))
        .collect();
    Err(config_err!("configuration mismatch: {}", diffs.join(", ")))
}

/// Element-wise mean of the parameters in `paths`.
pub fn average_checkpoints<P: AsRef<Path>>(paths: &[P]) -> Result<Checkpoint> {
    let (first, rest) = paths
        .split_first()
        .ok_or_else(|| Error::Usage("no checkpoints to average".into()))?;
    let mut acc = load_checkpoint(first.as_ref())?;
    for p in rest {
        let next = load_checkpoint_for(p.as_ref(), &acc.config)?;
        for (a, b) in acc.params.tensors_mut().iter_mut().zip(next.params.tensors()) {
            a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
        }
    }
    let k = paths.len() as f64;
    for t in acc.params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v /= k);
    }
    Ok(acc)
}
