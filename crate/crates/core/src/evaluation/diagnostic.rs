use serde::{Deserialize, Serialize};

use crate::data::VideoClip;
use crate::error::{contract_err, Error, Result};
use crate::masking::MaskPlan;
use crate::tokenizer::Geometry;

/// Tokens whose tubelet contains at least one motion-mask pixel.
pub fn token_motion_support(clip: &VideoClip, geom: &Geometry) -> Result<Vec<bool>> {
    if clip.motion_mask.is_none() {
        return Err(Error::Unavailable("clip carries no motion mask".into()));
    }
    geom.check_clip(clip)?;
    let layout = geom.layout();
    let p = geom.patch;
    Ok((0..layout.len())
        .map(|k| {
            let (t, r, c) = layout.coords(k);
            (0..p.t).any(|dt| {
                (0..p.h).any(|dy| {
                    (0..p.w).any(|dx| clip.mask_at(t * p.t + dt, r * p.h + dy, c * p.w + dx) == Some(true))
                })
            })
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapStats {
    /// Fraction of visible tokens that intersect motion.
    pub overlap: f64,
    /// Fraction of all tokens that intersect motion (the chance baseline).
    pub motion_fraction: f64,
    pub visible: usize,
    pub visible_motion: usize,
    pub motion_tokens: usize,
    pub n: usize,
}

pub fn mask_overlap_diagnostic(plan: &MaskPlan, clip: &VideoClip, geom: &Geometry) -> Result<OverlapStats> {
    let support = token_motion_support(clip, geom)?;
    if plan.n != support.len() {
        return contract_err(format!("plan covers {} tokens, clip has {}", plan.n, support.len()));
    }
    let motion_tokens = support.iter().filter(|&&m| m).count();
    let visible_motion = plan.visible.iter().filter(|&&k| support[k]).count();
    let visible = plan.visible.len();
    Ok(OverlapStats {
        overlap: if visible == 0 { 0.0 } else { visible_motion as f64 / visible as f64 },
        motion_fraction: motion_tokens as f64 / plan.n as f64,
        visible,
        visible_motion,
        motion_tokens,
        n: plan.n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_clip, ClipSpec, MotionClass};
    use crate::masking::mask_random;

    #[test]
    fn static_clip_support_is_fixed() {
        let spec = ClipSpec {
            motion: MotionClass::Static,
            ..ClipSpec::default()
        };
        let clip = gen_clip(1, &spec).unwrap();
        let geom = Geometry::new(16, 64, 64, spec.patch).unwrap();
        let support = token_motion_support(&clip, &geom).unwrap();
        let s = geom.layout().spatial();
        assert!(support[..s].iter().any(|&m| m));
        for k in 0..support.len() {
            assert_eq!(support[k], support[k % s]);
        }
        let plan = mask_random(512, 0.9, 0).unwrap();
        let stats = mask_overlap_diagnostic(&plan, &clip, &geom).unwrap();
        assert_eq!(stats.motion_tokens, support.iter().filter(|&&m| m).count());
    }

    #[test]
    fn missing_mask_is_unavailable() {
        let clip = VideoClip::zeros(16, 64, 64);
        let geom = Geometry::new(16, 64, 64, ClipSpec::default().patch).unwrap();
        let plan = mask_random(512, 0.9, 0).unwrap();
        let err = mask_overlap_diagnostic(&plan, &clip, &geom).unwrap_err();
        assert_eq!(err.kind(), "unavailable");
    }
}
