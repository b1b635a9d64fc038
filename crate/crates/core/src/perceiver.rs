//! Perceiver attractor decoder: learnable latents refined by cross-attention
//! to the frame embeddings, combined linearly into a fixed set of attractors.

use crate::error::{config_err, Result};
use crate::nn::{Attention, AttentionNorm, Fwd, LayerNorm, Linear, TransformerLayer};
use crate::numerics::{Tensor, Var};
use crate::params::{Layout, ParamId};

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub num_blocks: usize,
    pub num_latents: usize,
    pub num_attractors: usize,
    pub num_heads: usize,
    pub self_ff_dim: usize,
    pub attention_norm: AttentionNorm,
    /// Wrap the initial cross-attention in a residual connection and layer
    /// norm, like the cross-attention inside each block.
    pub initial_residual: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_blocks: 3,
            num_latents: 128,
            num_attractors: 10,
            num_heads: 4,
            self_ff_dim: 768,
            attention_norm: AttentionNorm::Latents,
            initial_residual: true,
        }
    }
}

/// Attractors and their existence probabilities.
pub struct AttractorSet<'t> {
    /// `A × D`
    pub attractors: Var<'t>,
    /// `A × 1`
    pub existence: Var<'t>,
    /// Attractors and existence obtained from the latents after each block;
    /// the last entry equals the final output.
    pub per_block: Vec<(Var<'t>, Var<'t>)>,
    /// Transformed latents after the last block, `N_lat × D`.
    pub latents: Var<'t>,
}

#[derive(Debug, Clone)]
struct Block {
    cross: Attention,
    cross_ln: LayerNorm,
    layers: [TransformerLayer; 2],
}

#[derive(Debug, Clone)]
pub struct PerceiverDecoder {
    latents: ParamId,
    initial: Attention,
    initial_ln: Option<LayerNorm>,
    blocks: Vec<Block>,
    combine: ParamId,
    exist: Linear,
    norm: AttentionNorm,
}

impl PerceiverDecoder {
    pub(crate) fn new(layout: &mut Layout, cfg: &DecoderConfig, dim: usize) -> Result<Self> {
        if cfg.num_blocks == 0 || cfg.num_attractors == 0 || cfg.num_latents == 0 {
            return Err(config_err!(
                "the decoder needs at least one block, latent and attractor"
            ));
        }
        if cfg.num_latents < cfg.num_attractors {
            log::warn!(
                "{} latents for {} attractors; fewer latents than attractors",
                cfg.num_latents,
                cfg.num_attractors
            );
        }
        let latents = layout.add(
            "decoder.latents".into(),
            vec![cfg.num_latents, dim],
            crate::params::Init::Normal {
                std: 1.0 / (dim as f64).sqrt(),
            },
        );
        let initial = Attention::new(layout, "decoder.initial.attn", dim, cfg.num_heads)?;
        let initial_ln = cfg
            .initial_residual
            .then(|| LayerNorm::new(layout, "decoder.initial.ln", dim));
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for b in 0..cfg.num_blocks {
            let name = format!("decoder.block{b}");
            let layer = |layout: &mut Layout, i: usize| {
                TransformerLayer::new(layout, &format!("{name}.self{i}"), dim, cfg.num_heads, cfg.self_ff_dim)
            };
            blocks.push(Block {
                cross: Attention::new(layout, &format!("{name}.cross"), dim, cfg.num_heads)?,
                cross_ln: LayerNorm::new(layout, &format!("{name}.cross_ln"), dim),
                layers: [layer(layout, 0)?, layer(layout, 1)?],
            });
        }
        let combine = layout.add(
            "decoder.combine".into(),
            vec![cfg.num_attractors, cfg.num_latents],
            crate::params::Init::Normal {
                std: 1.0 / (cfg.num_latents as f64).sqrt(),
            },
        );
        let exist = Linear::new(layout, "decoder.exist", dim, 1, true);
        Ok(Self {
            latents,
            initial,
            initial_ln,
            blocks,
            combine,
            exist,
            norm: cfg.attention_norm,
        })
    }

    /// The latent-combination matrix `W` (`A × N_lat`) bound on `f`'s tape.
    pub fn combine_weights<'t>(&self, f: &Fwd<'t, '_>) -> Var<'t> {
        f.p(self.combine).clone()
    }

    pub fn decode<'t>(&self, f: &Fwd<'t, '_>, e: &Var<'t>) -> Result<AttractorSet<'t>> {
        self.decode_inner(f, e, None)
    }

    /// Also returns the normalised weights of every cross-attention head
    /// (`N_lat × T`), initial attention first.
    pub fn decode_with_weights<'t>(&self, f: &Fwd<'t, '_>, e: &Var<'t>) -> Result<(AttractorSet<'t>, Vec<Tensor>)> {
        let mut weights = Vec::new();
        let set = self.decode_inner(f, e, Some(&mut weights))?;
        Ok((set, weights))
    }

    fn cross<'t>(
        &self,
        attn: &Attention,
        f: &Fwd<'t, '_>,
        x: &Var<'t>,
        e: &Var<'t>,
        keep: &mut Option<&mut Vec<Tensor>>,
    ) -> Result<Var<'t>> {
        match keep {
            Some(keep) => {
                let (out, w) = attn.forward_with_weights(f, x, e, self.norm)?;
                keep.extend(w);
                Ok(out)
            }
            None => attn.forward(f, x, e, self.norm),
        }
    }

    fn decode_inner<'t>(
        &self,
        f: &Fwd<'t, '_>,
        e: &Var<'t>,
        mut keep: Option<&mut Vec<Tensor>>,
    ) -> Result<AttractorSet<'t>> {
        if e.dims2()?.0 == 0 {
            return Err(config_err!("cannot decode attractors from zero frames"));
        }
        let latents = f.p(self.latents);
        let attended = f.dropout(self.cross(&self.initial, f, latents, e, &mut keep)?)?;
        let mut x = match &self.initial_ln {
            Some(ln) => ln.forward(f, &latents.add(&attended)?)?,
            None => attended,
        };
        let w = f.p(self.combine);
        let mut per_block = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let ca = f.dropout(self.cross(&block.cross, f, &x, e, &mut keep)?)?;
            x = block.cross_ln.forward(f, &x.add(&ca)?)?;
            for layer in &block.layers {
                x = layer.forward(f, &x)?;
            }
            let attractors = w.matmul(&x)?;
            let existence = self.exist.forward(f, &attractors)?.sigmoid();
            per_block.push((attractors, existence));
        }
        let (attractors, existence) = per_block.last().cloned().expect("at least one block");
        Ok(AttractorSet {
            attractors,
            existence,
            per_block,
            latents: x,
        })
    }
}

/// `Σ_a mean_n (softmax(w_a) ⊙ log softmax(w_a))` over the rows of `W`.
pub fn entropy_loss<'t>(w: &Var<'t>) -> Result<Var<'t>> {
    let (_, n) = w.dims2()?;
    let p = w.softmax(1)?;
    let logp = w.log_softmax(1)?;
    Ok(p.mul(&logp)?.sum().scale(1.0 / n as f64))
}
