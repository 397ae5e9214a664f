//! Tubelet tokenization, sinusoidal positional tables and per-patch
//! reconstruction targets.
//!
//! Tokens are enumerated t-major, then row, then column:
//! `k = (t * nh + r) * nw + c`. Within a tubelet, pixels are flattened as
//! `(dt, dy, dx, channel)`. Checkpoints and mask plans depend on both orders.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{VideoClip, CHANNELS};
use crate::error::{config_err, dim_err, Result};
use crate::tensor::kernels::gemm_nn;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Tag stored in checkpoints to pin the token enumeration order.
pub const TOKEN_ORDER: &str = "t-major";

pub const TARGET_NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchSize {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl PatchSize {
    pub const fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }
}

/// Token grid extents `nt × nh × nw`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenLayout {
    pub nt: usize,
    pub nh: usize,
    pub nw: usize,
}

impl TokenLayout {
    pub fn new(nt: usize, nh: usize, nw: usize) -> Self {
        Self { nt, nh, nw }
    }

    pub fn len(&self) -> usize {
        self.nt * self.nh * self.nw
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spatial(&self) -> usize {
        self.nh * self.nw
    }

    #[inline]
    pub fn flat_index(&self, t: usize, r: usize, c: usize) -> usize {
        (t * self.nh + r) * self.nw + c
    }

    #[inline]
    pub fn coords(&self, k: usize) -> (usize, usize, usize) {
        let c = k % self.nw;
        let r = (k / self.nw) % self.nh;
        let t = k / (self.nw * self.nh);
        (t, r, c)
    }
}

/// Clip extents together with the tubelet size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch: PatchSize,
}

impl Geometry {
    pub fn new(frames: usize, height: usize, width: usize, patch: PatchSize) -> Result<Self> {
        let g = Self {
            frames,
            height,
            width,
            patch,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch;
        if p.t == 0 || p.h == 0 || p.w == 0 {
            return config_err("patch extents must be positive");
        }
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return config_err("clip extents must be positive");
        }
        if !self.frames.is_multiple_of(p.t) || !self.height.is_multiple_of(p.h) || !self.width.is_multiple_of(p.w) {
            return config_err(format!(
                "clip {}x{}x{} is not divisible by patch {}x{}x{}",
                self.frames, self.height, self.width, p.t, p.h, p.w
            ));
        }
        Ok(())
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout::new(
            self.frames / self.patch.t,
            self.height / self.patch.h,
            self.width / self.patch.w,
        )
    }

    pub fn n_tokens(&self) -> usize {
        self.layout().len()
    }

    /// Values per flattened tubelet.
    pub fn patch_dim(&self) -> usize {
        self.patch.t * self.patch.h * self.patch.w * CHANNELS
    }

    pub fn check_clip(&self, clip: &VideoClip) -> Result<()> {
        if clip.frames != self.frames || clip.height != self.height || clip.width != self.width {
            return dim_err(format!(
                "clip {}x{}x{} does not match geometry {}x{}x{}",
                clip.frames, clip.height, clip.width, self.frames, self.height, self.width
            ));
        }
        Ok(())
    }
}

/// `(T/pt)·(H/ph)·(W/pw)`, or a config error when extents don't divide.
pub fn token_count(t: usize, h: usize, w: usize, pt: usize, ph: usize, pw: usize) -> Result<usize> {
    Ok(Geometry::new(t, h, w, PatchSize::new(pt, ph, pw))?.n_tokens())
}

/// Flattens every tubelet: `[N, pt·ph·pw·3]`.
pub fn patchify(clip: &VideoClip, geom: &Geometry) -> Result<Tensor> {
    geom.check_clip(clip)?;
    let layout = geom.layout();
    let p = geom.patch;
    let pd = geom.patch_dim();
    let mut out = Vec::with_capacity(layout.len() * pd);
    for k in 0..layout.len() {
        let (t, r, c) = layout.coords(k);
        for dt in 0..p.t {
            for dy in 0..p.h {
                for dx in 0..p.w {
                    for ch in 0..CHANNELS {
                        out.push(clip.at(t * p.t + dt, ch, r * p.h + dy, c * p.w + dx));
                    }
                }
            }
        }
    }
    Tensor::new(vec![layout.len(), pd], out)
}

/// Token embeddings with their grid layout.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    /// `[N, dim]`
    pub tokens: Tensor,
    pub layout: TokenLayout,
}

impl TokenGrid {
    pub fn new(tokens: Tensor, layout: TokenLayout) -> Result<Self> {
        if tokens.rank() != 2 || tokens.shape()[0] != layout.len() {
            return dim_err(format!(
                "token matrix {:?} does not fit layout with {} tokens",
                tokens.shape(),
                layout.len()
            ));
        }
        Ok(Self { tokens, layout })
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn token(&self, k: usize) -> &[f64] {
        self.tokens.row(k)
    }
}

/// Tubelet linear embedding (a 3-D convolution whose stride equals its kernel).
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl PatchEmbed {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        patch_dim: usize,
        dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.insert(
            format!("{prefix}.weight"),
            Tensor::trunc_normal(&[patch_dim, dim], 0.02, rng),
        );
        let bias = bias.then(|| store.insert(format!("{prefix}.bias"), Tensor::zeros(&[dim])));
        Self { weight, bias }
    }

    /// `patches [N, patch_dim] -> [N, dim]` on the tape.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, patches: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let x = tape.matmul(patches, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add(x, b)
            }
            None => Ok(x),
        }
    }

    pub fn embed(&self, store: &ParamStore, clip: &VideoClip, geom: &Geometry) -> Result<TokenGrid> {
        patch_embed(clip, geom, store.get(self.weight), self.bias.map(|b| store.get(b)))
    }
}

/// Embeds every tubelet of `clip` with `weight [patch_dim, d]` and optional `bias [d]`.
pub fn patch_embed(
    clip: &VideoClip,
    geom: &Geometry,
    weight: &Tensor,
    bias: Option<&Tensor>,
) -> Result<TokenGrid> {
    let patches = patchify(clip, geom)?;
    let pd = geom.patch_dim();
    if weight.rank() != 2 || weight.shape()[0] != pd {
        return dim_err(format!("embedding weight {:?} needs {pd} rows", weight.shape()));
    }
    let d = weight.shape()[1];
    let n = patches.shape()[0];
    let mut out = vec![0.0; n * d];
    gemm_nn(patches.values(), weight.values(), &mut out, n, pd, d);
    if let Some(b) = bias {
        if b.shape() != [d] {
            return dim_err(format!("embedding bias {:?} vs dim {d}", b.shape()));
        }
        for row in out.chunks_mut(d) {
            row.iter_mut().zip(b.values()).for_each(|(o, v)| *o += v);
        }
    }
    TokenGrid::new(Tensor::new(vec![n, d], out)?, geom.layout())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosMode {
    /// 2-D sin-cos over `(r, c)` plus 1-D sin-cos over `t`.
    SeparableFixed,
    /// 1-D sin-cos over the flat token index.
    JointFixed,
}

impl std::str::FromStr for PosMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separable_fixed" | "separable" => Ok(Self::SeparableFixed),
            "joint_fixed" | "joint" => Ok(Self::JointFixed),
            other => config_err(format!("unknown positional mode `{other}`")),
        }
    }
}

impl std::fmt::Display for PosMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PosMode::SeparableFixed => "separable_fixed",
            PosMode::JointFixed => "joint_fixed",
        })
    }
}

/// Interleaved `[sin(p·w0), cos(p·w0), sin(p·w1), ...]` with `w_i = 10000^(-2i/dim)`.
pub fn sincos_1d(position: f64, dim: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), dim);
    for i in 0..dim / 2 {
        let omega = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        out[2 * i] = (position * omega).sin();
        out[2 * i + 1] = (position * omega).cos();
    }
}

/// Spatial part: row code in the first half, column code in the second.
pub fn spatial_sincos(r: usize, c: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    sincos_1d(r as f64, half, &mut out[..half]);
    sincos_1d(c as f64, half, &mut out[half..]);
    out
}

pub fn temporal_sincos(t: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    sincos_1d(t as f64, dim, &mut out);
    out
}

/// Fixed positional table `[N, dim]`, one row per token in t-major order.
pub fn positional_table(layout: &TokenLayout, dim: usize, mode: PosMode) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return config_err(format!("positional embedding dim {dim} must be a positive multiple of 4"));
    }
    let mut out = Vec::with_capacity(layout.len() * dim);
    for k in 0..layout.len() {
        match mode {
            PosMode::SeparableFixed => {
                let (t, r, c) = layout.coords(k);
                let s = spatial_sincos(r, c, dim);
                let tt = temporal_sincos(t, dim);
                out.extend(s.iter().zip(&tt).map(|(a, b)| a + b));
            }
            PosMode::JointFixed => out.extend(temporal_sincos(k, dim)),
        }
    }
    Tensor::new(vec![layout.len(), dim], out)
}

/// Adds the fixed positional table to every token.
pub fn positional_embedding(grid: &TokenGrid, mode: PosMode) -> Result<TokenGrid> {
    let table = positional_table(&grid.layout, grid.dim(), mode)?;
    let values = grid
        .tokens
        .values()
        .iter()
        .zip(table.values())
        .map(|(a, b)| a + b)
        .collect();
    TokenGrid::new(Tensor::new(grid.tokens.shape().to_vec(), values)?, grid.layout)
}

/// Reconstruction targets for every token.
#[derive(Clone, Debug)]
pub struct PatchTargets {
    /// `[N, patch_dim]` raw pixels.
    pub raw: Tensor,
    /// Per-patch standardized pixels, when normalization was requested.
    pub normalized: Option<Tensor>,
    pub means: Vec<f64>,
    pub vars: Vec<f64>,
}

impl PatchTargets {
    /// The tensor the loss should compare against.
    pub fn target(&self) -> &Tensor {
        self.normalized.as_ref().unwrap_or(&self.raw)
    }
}

/// Standardizes a single patch with population variance: `(x - mean) / sqrt(var + eps)`.
pub fn normalize_patch(patch: &[f64]) -> (Vec<f64>, f64, f64) {
    let n = patch.len() as f64;
    let mean = patch.iter().sum::<f64>() / n;
    let var = patch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = (var + TARGET_NORM_EPS).sqrt();
    (patch.iter().map(|v| (v - mean) / denom).collect(), mean, var)
}

pub fn reconstruction_targets(clip: &VideoClip, geom: &Geometry, normalize: bool) -> Result<PatchTargets> {
    let raw = patchify(clip, geom)?;
    let pd = geom.patch_dim();
    let n = raw.shape()[0];
    let mut means = Vec::with_capacity(n);
    let mut vars = Vec::with_capacity(n);
    let mut norm = Vec::with_capacity(if normalize { n * pd } else { 0 });
    for k in 0..n {
        let (z, m, v) = normalize_patch(raw.row(k));
        means.push(m);
        vars.push(v);
        if normalize {
            norm.extend(z);
        }
    }
    let normalized = if normalize {
        Some(Tensor::new(vec![n, pd], norm)?)
    } else {
        None
    };
    Ok(PatchTargets {
        raw,
        normalized,
        means,
        vars,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_moving_clip, MotionClass};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn token_counts() {
        assert_eq!(token_count(16, 224, 224, 2, 16, 16).unwrap(), 1568);
        assert_eq!(token_count(2, 16, 16, 2, 16, 16).unwrap(), 1);
        assert_eq!(token_count(16, 64, 64, 2, 8, 8).unwrap(), 512);
        assert!(matches!(token_count(15, 64, 64, 2, 8, 8), Err(crate::Error::Config(_))));
    }

    #[test]
    fn zero_clip_zero_bias_gives_zero_tokens() {
        let geom = Geometry::new(4, 16, 16, PatchSize::new(2, 8, 8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = Tensor::trunc_normal(&[geom.patch_dim(), 8], 0.02, &mut rng);
        let grid = patch_embed(&VideoClip::zeros(4, 16, 16), &geom, &w, Some(&Tensor::zeros(&[8]))).unwrap();
        assert!(grid.tokens.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tubelet_locality() {
        let geom = Geometry::new(4, 16, 16, PatchSize::new(2, 8, 8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::trunc_normal(&[geom.patch_dim(), 8], 0.02, &mut rng);
        let a = gen_moving_clip(4, 4, 16, 16, 0, MotionClass::Static).unwrap();
        let mut b = a.clone();
        // pixel inside tubelet (t=1, r=0, c=1): frame 3, row 5, col 12
        let i = b.index(3, 1, 5, 12);
        b.values[i] = 1.0 - b.values[i];
        let ga = patch_embed(&a, &geom, &w, None).unwrap();
        let gb = patch_embed(&b, &geom, &w, None).unwrap();
        let changed = geom.layout().flat_index(1, 0, 1);
        for k in 0..geom.n_tokens() {
            assert_eq!(ga.token(k) != gb.token(k), k == changed, "token {k}");
        }
    }

    #[test]
    fn separable_embedding_differs_only_in_time() {
        let layout = TokenLayout::new(3, 2, 2);
        let d = 16;
        let table = positional_table(&layout, d, PosMode::SeparableFixed).unwrap();
        let a = table.row(layout.flat_index(0, 1, 1));
        let b = table.row(layout.flat_index(2, 1, 1));
        let ta = temporal_sincos(0, d);
        let tb = temporal_sincos(2, d);
        for j in 0..d {
            assert!(((a[j] - ta[j]) - (b[j] - tb[j])).abs() < 1e-15);
        }
    }

    #[test]
    fn sincos_at_origin_alternates() {
        let s = spatial_sincos(0, 0, 8);
        assert_eq!(s, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn positional_dim_must_be_multiple_of_four() {
        let layout = TokenLayout::new(1, 1, 1);
        assert!(positional_table(&layout, 6, PosMode::SeparableFixed).is_err());
        assert!(positional_table(&layout, 7, PosMode::JointFixed).is_err());
    }

    #[test]
    fn normalized_patch_worked_example() {
        let (z, mean, var) = normalize_patch(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(mean, 2.5);
        assert_eq!(var, 1.25);
        let want = [-1.3416, -0.4472, 0.4472, 1.3416];
        for (a, b) in z.iter().zip(want) {
            assert!((a - b).abs() < 1e-4);
        }
        let (z, _, _) = normalize_patch(&[0.3; 12]);
        assert!(z.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn raw_targets_equal_patchify() {
        let geom = Geometry::new(4, 16, 16, PatchSize::new(2, 8, 8)).unwrap();
        let clip = gen_moving_clip(8, 4, 16, 16, 1, MotionClass::Static).unwrap();
        let t = reconstruction_targets(&clip, &geom, false).unwrap();
        assert!(t.normalized.is_none());
        assert_eq!(t.target(), &patchify(&clip, &geom).unwrap());
    }
}
