//! wasm-bindgen bindings for the static demo page in `www/`.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use vidmae::data::{gen_clip, ClipSpec, MotionClass, VideoClip};
use vidmae::evaluation::{mask_overlap_diagnostic, token_motion_support};
use vidmae::masking::{plan_mask, score_tokens, MaskConfig, MaskPlan, ScoreField};
use vidmae::model::{MaeModel, ModelConfig};
use vidmae::tokenizer::{Geometry, TokenGrid};

fn js_err(e: vidmae::Error) -> JsError {
    JsError::new(&format!("{}: {e}", e.kind()))
}

#[derive(Serialize)]
struct PlanSummary {
    strategy: String,
    ratio: f64,
    tokens: usize,
    visible: usize,
    masked: usize,
    motion_tokens: usize,
    visible_motion: usize,
    overlap: f64,
    motion_fraction: f64,
}

/// One synthetic clip, its motion scores and the current mask plan.
#[wasm_bindgen]
pub struct Demo {
    clip: VideoClip,
    geometry: Geometry,
    grid: TokenGrid,
    scores: ScoreField,
    support: Vec<bool>,
    plan: Option<MaskPlan>,
}

#[wasm_bindgen]
impl Demo {
    /// `motion` is one of left, right, up, down, static.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, motion: &str, objects: usize) -> Result<Demo, JsError> {
        let config = ModelConfig::tiny();
        let geometry = config.geometry;
        let spec = ClipSpec {
            motion: motion.parse::<MotionClass>().map_err(js_err)?,
            n_objects: objects.max(1),
            ..ClipSpec::default()
        };
        let clip = gen_clip(seed, &spec).map_err(js_err)?;
        let model = MaeModel::new(config, seed).map_err(js_err)?;
        let grid = model.token_grid(&clip).map_err(js_err)?;
        let scores = score_tokens(&grid).map_err(js_err)?;
        let support = token_motion_support(&clip, &geometry).map_err(js_err)?;
        Ok(Demo {
            clip,
            geometry,
            grid,
            scores,
            support,
            plan: None,
        })
    }

    pub fn frames(&self) -> usize {
        self.clip.frames
    }

    pub fn width(&self) -> usize {
        self.clip.width
    }

    pub fn height(&self) -> usize {
        self.clip.height
    }

    /// RGBA bytes of frame `t`.
    pub fn frame_rgba(&self, t: usize) -> Vec<u8> {
        self.shade(t, |_| 1.0, |_| None)
    }

    /// Samples a plan and returns its summary as JSON.
    pub fn plan(&mut self, strategy: &str, ratio: f64, seed: u64) -> Result<String, JsError> {
        let cfg = MaskConfig {
            strategy: strategy.parse().map_err(js_err)?,
            ratio,
            ..MaskConfig::default()
        };
        let plan = plan_mask(&cfg, &self.grid, seed).map_err(js_err)?;
        let stats = mask_overlap_diagnostic(&plan, &self.clip, &self.geometry).map_err(js_err)?;
        let summary = PlanSummary {
            strategy: plan.strategy.as_str().to_string(),
            ratio,
            tokens: plan.n,
            visible: plan.visible.len(),
            masked: plan.masked.len(),
            motion_tokens: stats.motion_tokens,
            visible_motion: stats.visible_motion,
            overlap: stats.overlap,
            motion_fraction: stats.motion_fraction,
        };
        self.plan = Some(plan);
        serde_json::to_string(&summary).map_err(|e| JsError::new(&e.to_string()))
    }

    /// Frame `t` with masked tokens dimmed and visible motion tokens tinted green.
    pub fn overlay_rgba(&self, t: usize) -> Vec<u8> {
        let masked = self.plan.as_ref().map(|p| p.mask_indicator());
        self.shade(
            t,
            |k| match &masked {
                Some(m) if m[k] => 0.2,
                _ => 1.0,
            },
            |k| match &masked {
                Some(m) if !m[k] && self.support[k] => Some([40, 220, 90]),
                _ => None,
            },
        )
    }

    /// Motion score heatmap over the token slice containing frame `t`.
    pub fn score_rgba(&self, t: usize) -> Vec<u8> {
        let max = self.scores.scores.iter().cloned().fold(0.0, f64::max).max(1e-12);
        let slice = t / self.geometry.patch.t;
        let mut out = vec![0u8; self.clip.width * self.clip.height * 4];
        for y in 0..self.clip.height {
            for x in 0..self.clip.width {
                let s = self.scores.at(slice, y / self.geometry.patch.h, x / self.geometry.patch.w) / max;
                let i = 4 * (y * self.clip.width + x);
                out[i] = (255.0 * s) as u8;
                out[i + 1] = (255.0 * s * s) as u8;
                out[i + 2] = (255.0 * (1.0 - s) * 0.6) as u8;
                out[i + 3] = 255;
            }
        }
        out
    }
}

impl Demo {
    fn token_of(&self, t: usize, y: usize, x: usize) -> usize {
        let p = self.geometry.patch;
        self.geometry.layout().flat_index(t / p.t, y / p.h, x / p.w)
    }

    fn shade(&self, t: usize, gain: impl Fn(usize) -> f64, tint: impl Fn(usize) -> Option<[u8; 3]>) -> Vec<u8> {
        let t = t.min(self.clip.frames - 1);
        let (w, h) = (self.clip.width, self.clip.height);
        let mut out = vec![0u8; w * h * 4];
        for y in 0..h {
            for x in 0..w {
                let k = self.token_of(t, y, x);
                let g = gain(k);
                let i = 4 * (y * w + x);
                for ch in 0..3 {
                    out[i + ch] = (255.0 * g * self.clip.at(t, ch, y, x)).round() as u8;
                }
                if let Some(c) = tint(k) {
                    for ch in 0..3 {
                        out[i + ch] = ((u16::from(out[i + ch]) + u16::from(c[ch])) / 2) as u8;
                    }
                }
                out[i + 3] = 255;
            }
        }
        out
    }
}
