//! Joint space-time attention encoder, lightweight decoder with a shared
//! learnable mask token, a clip classifier and a bidirectional GRU.

mod gru;
pub mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::VideoClip;
use crate::error::{config_err, contract_err, Result};
use crate::masking::{plan_mask, MaskConfig, MaskPlan};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::tokenizer::{patchify, positional_table, Geometry, PatchEmbed, PatchSize, PosMode, TokenGrid};

pub use gru::{BiGru, GruCell};
pub use layers::{Attention, Block, LayerNorm, Linear, Mlp};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub geometry: Geometry,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub pos_mode: PosMode,
    /// Learnable encoder positional table, initialized from the fixed one.
    pub pos_learnable: bool,
    pub patch_bias: bool,
}

impl ModelConfig {
    /// Desk-scale default: 16×64×64 clips, 2×8×8 tubelets, 512 tokens.
    pub fn tiny() -> Self {
        Self {
            geometry: Geometry {
                frames: 16,
                height: 64,
                width: 64,
                patch: PatchSize::new(2, 8, 8),
            },
            dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            decoder_dim: 32,
            decoder_depth: 1,
            decoder_heads: 4,
            pos_mode: PosMode::SeparableFixed,
            pos_learnable: false,
            patch_bias: true,
        }
    }

    /// ViT-B geometry: 16×224×224 clips, 2×16×16 tubelets, 1568 tokens.
    pub fn vit_b() -> Self {
        Self {
            geometry: Geometry {
                frames: 16,
                height: 224,
                width: 224,
                patch: PatchSize::new(2, 16, 16),
            },
            dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            decoder_dim: 384,
            decoder_depth: 4,
            decoder_heads: 6,
            pos_mode: PosMode::SeparableFixed,
            pos_learnable: false,
            patch_bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return config_err(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.decoder_heads == 0 || !self.decoder_dim.is_multiple_of(self.decoder_heads) {
            return config_err(format!(
                "decoder dim {} is not divisible by {} heads",
                self.decoder_dim, self.decoder_heads
            ));
        }
        if self.decoder_depth == 0 {
            return config_err("decoder needs at least one block");
        }
        if !self.dim.is_multiple_of(4) || !self.decoder_dim.is_multiple_of(4) {
            return config_err("embedding dims must be multiples of 4 for sin-cos positions");
        }
        if self.mlp_ratio == 0 {
            return config_err("mlp ratio must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum PosSource {
    Fixed(Tensor),
    Learned(ParamId),
}

/// Patch embedding, positions, transformer blocks and final norm.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub geometry: Geometry,
    pub patch_embed: PatchEmbed,
    pos: PosSource,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let g = cfg.geometry;
        let patch_embed = PatchEmbed::new(store, "patch_embed", g.patch_dim(), cfg.dim, cfg.patch_bias, rng);
        let table = positional_table(&g.layout(), cfg.dim, cfg.pos_mode)?;
        let pos = if cfg.pos_learnable {
            PosSource::Learned(store.insert("encoder.pos_embed", table))
        } else {
            PosSource::Fixed(table)
        };
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(store, &format!("encoder.blocks.{i}"), cfg.dim, cfg.heads, cfg.mlp_ratio, rng))
            .collect();
        let norm = LayerNorm::new(store, "encoder.norm", cfg.dim);
        Ok(Self {
            geometry: g,
            patch_embed,
            pos,
            blocks,
            norm,
        })
    }

    /// Pre-positional token embeddings `[N, dim]`.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, clip: &VideoClip) -> Result<Var> {
        let patches = tape.constant(patchify(clip, &self.geometry)?);
        self.patch_embed.forward(tape, store, patches)
    }

    pub fn add_positions(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let pos = match &self.pos {
            PosSource::Fixed(t) => tape.constant(t.clone()),
            PosSource::Learned(id) => tape.param(store, *id),
        };
        tape.add(x, pos)
    }

    /// Runs the transformer over exactly the given (position-tagged) tokens.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, tokens: Var) -> Result<Var> {
        if tape.shape(tokens).first().copied().unwrap_or(0) == 0 {
            return contract_err("encoder needs at least one visible token");
        }
        let mut x = tokens;
        for block in &self.blocks {
            x = block.forward(tape, store, x)?;
        }
        self.norm.forward(tape, store, x)
    }

    /// All tokens, no masking: `[N, dim]` latents.
    pub fn encode_all(&self, tape: &mut Tape, store: &ParamStore, clip: &VideoClip) -> Result<Var> {
        let x = self.embed(tape, store, clip)?;
        let x = self.add_positions(tape, store, x)?;
        self.encode(tape, store, x)
    }

    /// Mean-pooled clip feature `[dim]`.
    pub fn pooled(&self, tape: &mut Tape, store: &ParamStore, clip: &VideoClip) -> Result<Var> {
        let z = self.encode_all(tape, store, clip)?;
        tape.mean_rows(z)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub embed: Linear,
    pub mask_token: ParamId,
    pos: Tensor,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let g = cfg.geometry;
        let embed = Linear::new(store, "decoder.embed", cfg.dim, cfg.decoder_dim, true, rng);
        let mask_token = store.insert("decoder.mask_token", Tensor::normal(&[cfg.decoder_dim], 0.02, rng));
        let pos = positional_table(&g.layout(), cfg.decoder_dim, cfg.pos_mode)?;
        let blocks = (0..cfg.decoder_depth)
            .map(|i| {
                Block::new(
                    store,
                    &format!("decoder.blocks.{i}"),
                    cfg.decoder_dim,
                    cfg.decoder_heads,
                    cfg.mlp_ratio,
                    rng,
                )
            })
            .collect();
        let norm = LayerNorm::new(store, "decoder.norm", cfg.decoder_dim);
        let head = Linear::new(store, "decoder.head", cfg.decoder_dim, g.patch_dim(), true, rng);
        Ok(Self {
            embed,
            mask_token,
            pos,
            blocks,
            norm,
            head,
        })
    }

    /// Full decoder input `[N, decoder_dim]` before the blocks: projected
    /// latents at visible slots, the mask token at masked slots, plus positions.
    pub fn assemble(&self, tape: &mut Tape, store: &ParamStore, latents: Var, plan: &MaskPlan) -> Result<Var> {
        let rows = tape.shape(latents).first().copied().unwrap_or(0);
        if rows != plan.visible.len() {
            return contract_err(format!(
                "decoder got {rows} latents for a plan with {} visible tokens",
                plan.visible.len()
            ));
        }
        if plan.n != self.pos.shape()[0] {
            return contract_err(format!("plan has {} tokens, decoder expects {}", plan.n, self.pos.shape()[0]));
        }
        plan.validate()?;
        let y = self.embed.forward(tape, store, latents)?;
        let mut full = tape.scatter_rows(y, &plan.visible, plan.n)?;
        if !plan.masked.is_empty() {
            let token = tape.param(store, self.mask_token);
            let dd = tape.shape(token)[0];
            let token = tape.reshape(token, &[1, dd])?;
            let tokens = tape.gather_rows(token, &vec![0; plan.masked.len()])?;
            let placed = tape.scatter_rows(tokens, &plan.masked, plan.n)?;
            full = tape.add(full, placed)?;
        }
        let pos = tape.constant(self.pos.clone());
        tape.add(full, pos)
    }

    /// Reconstructs every token: `[N, patch_dim]`.
    pub fn decode(&self, tape: &mut Tape, store: &ParamStore, latents: Var, plan: &MaskPlan) -> Result<Var> {
        let mut x = self.assemble(tape, store, latents, plan)?;
        for block in &self.blocks {
            x = block.forward(tape, store, x)?;
        }
        let x = self.norm.forward(tape, store, x)?;
        self.head.forward(tape, store, x)
    }
}

/// Vars produced by one masked-autoencoder forward pass.
#[derive(Debug)]
pub struct MaeOutput {
    /// `[N, patch_dim]` reconstruction.
    pub prediction: Var,
    pub plan: MaskPlan,
}

/// Masked autoencoder: encoder over visible tokens plus decoder.
#[derive(Clone, Debug)]
pub struct MaeModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl MaeModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &config, &mut rng)?;
        let decoder = Decoder::new(&mut params, &config, &mut rng)?;
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
        })
    }

    pub fn load_encoder(&mut self, source: &ParamStore) -> Result<()> {
        copy_encoder(&mut self.params, source)
    }

    /// Pre-positional token grid, evaluated outside any tape.
    pub fn token_grid(&self, clip: &VideoClip) -> Result<TokenGrid> {
        self.encoder.patch_embed.embed(&self.params, clip, &self.config.geometry)
    }

    /// Embeds, plans the mask from the current embeddings (no gradient
    /// flows through planning), encodes the visible tokens and decodes all.
    pub fn forward(&self, tape: &mut Tape, clip: &VideoClip, mask: &MaskConfig, mask_seed: u64) -> Result<MaeOutput> {
        let store = &self.params;
        let x = self.encoder.embed(tape, store, clip)?;
        let grid = TokenGrid::new(tape.value(x).clone(), self.config.geometry.layout())?;
        let plan = plan_mask(mask, &grid, mask_seed)?;
        self.forward_with_plan(tape, x, plan)
    }

    /// Like [`MaeModel::forward`] with a fixed plan.
    pub fn forward_planned(&self, tape: &mut Tape, clip: &VideoClip, plan: MaskPlan) -> Result<MaeOutput> {
        let x = self.encoder.embed(tape, &self.params, clip)?;
        self.forward_with_plan(tape, x, plan)
    }

    fn forward_with_plan(&self, tape: &mut Tape, embedded: Var, plan: MaskPlan) -> Result<MaeOutput> {
        let store = &self.params;
        let x = self.encoder.add_positions(tape, store, embedded)?;
        let visible = tape.gather_rows(x, &plan.visible)?;
        let latents = self.encoder.encode(tape, store, visible)?;
        let prediction = self.decoder.decode(tape, store, latents, &plan)?;
        Ok(MaeOutput { prediction, plan })
    }
}

/// Encoder plus mean-pool and linear head over `classes` logits.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub config: ModelConfig,
    pub classes: usize,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub head: Linear,
}

impl Classifier {
    pub fn new(config: ModelConfig, classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if classes < 2 {
            return config_err(format!("a classifier needs at least 2 classes, got {classes}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &config, &mut rng)?;
        let head = Linear::new(&mut params, "head", config.dim, classes, true, &mut rng);
        Ok(Self {
            config,
            classes,
            params,
            encoder,
            head,
        })
    }

    /// Copies every encoder tensor (`patch_embed.*`, `encoder.*`) from `source`.
    pub fn load_encoder(&mut self, source: &ParamStore) -> Result<()> {
        copy_encoder(&mut self.params, source)
    }

    /// `[1, classes]` logits for one clip.
    pub fn logits(&self, tape: &mut Tape, clip: &VideoClip) -> Result<Var> {
        let pooled = self.encoder.pooled(tape, &self.params, clip)?;
        let d = tape.shape(pooled)[0];
        let pooled = tape.reshape(pooled, &[1, d])?;
        self.head.forward(tape, &self.params, pooled)
    }

    pub fn predict(&self, clip: &VideoClip) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let l = self.logits(&mut tape, clip)?;
        Ok(tape.value(l).values().to_vec())
    }

    /// Mean-pooled encoder latent of one clip.
    pub fn features(&self, clip: &VideoClip) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let f = self.encoder.pooled(&mut tape, &self.params, clip)?;
        Ok(tape.value(f).values().to_vec())
    }

    /// Per-clip features `[clips, dim]` for a whole video, in clip order.
    pub fn extract_features(&self, clips: &[VideoClip]) -> Result<Tensor> {
        if clips.is_empty() {
            return contract_err("cannot extract features from an empty video");
        }
        let mut values = Vec::with_capacity(clips.len() * self.config.dim);
        for clip in clips {
            values.extend(self.features(clip)?);
        }
        Tensor::new(vec![clips.len(), self.config.dim], values)
    }
}

fn copy_encoder(dest: &mut ParamStore, source: &ParamStore) -> Result<()> {
    let names: Vec<String> = dest
        .iter()
        .map(|(_, n, _)| n.to_string())
        .filter(|n| is_encoder_param(n))
        .collect();
    for name in names {
        let id = source
            .id(&name)
            .ok_or_else(|| crate::Error::Checkpoint(format!("source is missing tensor `{name}`")))?;
        dest.assign(&name, source.get(id))?;
    }
    Ok(())
}

pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("patch_embed.") || name.starts_with("encoder.")
}

/// Layer index for layer-wise lr decay: embeddings are 0, encoder block `i`
/// is `i + 1`, and everything after the blocks (final norm, head) is `depth + 1`.
pub fn layer_id(name: &str, depth: usize) -> usize {
    if name.starts_with("patch_embed.") || name == "encoder.pos_embed" {
        0
    } else if let Some(rest) = name.strip_prefix("encoder.blocks.") {
        rest.split('.')
            .next()
            .and_then(|i| i.parse::<usize>().ok())
            .map_or(depth + 1, |i| i + 1)
    } else {
        depth + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::tiny().validate().unwrap();
        ModelConfig::vit_b().validate().unwrap();
        assert_eq!(ModelConfig::vit_b().geometry.n_tokens(), 1568);
        assert_eq!(ModelConfig::tiny().geometry.n_tokens(), 512);
    }

    #[test]
    fn bad_head_split_rejected() {
        let cfg = ModelConfig {
            heads: 3,
            ..ModelConfig::tiny()
        };
        assert!(matches!(cfg.validate(), Err(crate::Error::Config(_))));
        let cfg = ModelConfig {
            decoder_depth: 0,
            ..ModelConfig::tiny()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn layer_ids() {
        assert_eq!(layer_id("patch_embed.weight", 2), 0);
        assert_eq!(layer_id("encoder.blocks.0.attn.query.weight", 2), 1);
        assert_eq!(layer_id("encoder.blocks.1.norm1.gamma", 2), 2);
        assert_eq!(layer_id("encoder.norm.gamma", 2), 3);
        assert_eq!(layer_id("head.weight", 2), 3);
    }
}
