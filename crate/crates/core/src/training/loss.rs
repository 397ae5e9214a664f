use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, dim_err, Error, Result};
use crate::masking::MaskPlan;
use crate::tensor::{Tape, Tensor, Var};

/// Floor inside the square root of the norm-form loss.
pub const NORM_FORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean of squared differences over masked patches.
    #[default]
    Mse,
    /// Mean absolute difference over masked patches.
    L1,
    /// Mean over masked tokens of the per-token L2 distance.
    L2Norm,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::L1 => "l1",
            LossKind::L2Norm => "l2_norm",
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "l1" => Ok(LossKind::L1),
            "l2_norm" => Ok(LossKind::L2Norm),
            other => config_err(format!("unknown loss `{other}` (expected mse, l1, l2_norm)")),
        }
    }
}

/// Reconstruction loss over the masked tokens of `plan` only.
///
/// `prediction` is `[N, patch_dim]` on the tape; `targets` holds the (already
/// normalized, if requested) per-patch targets of the same shape.
pub fn masked_loss(tape: &mut Tape, prediction: Var, targets: &Tensor, plan: &MaskPlan, kind: LossKind) -> Result<Var> {
    if tape.shape(prediction) != targets.shape() {
        return dim_err(format!(
            "prediction {:?} vs targets {:?}",
            tape.shape(prediction),
            targets.shape()
        ));
    }
    if targets.shape()[0] != plan.n {
        return dim_err(format!("targets have {} rows, plan covers {}", targets.shape()[0], plan.n));
    }
    plan.validate()?;
    if plan.masked.is_empty() {
        return contract_err("masked loss needs at least one masked token");
    }
    let d = targets.shape()[1];
    let mut picked = Vec::with_capacity(plan.masked.len() * d);
    for &k in &plan.masked {
        picked.extend_from_slice(targets.row(k));
    }
    let target = tape.constant(Tensor::new(vec![plan.masked.len(), d], picked)?);
    let pred = tape.gather_rows(prediction, &plan.masked)?;
    match kind {
        LossKind::Mse => tape.mse(pred, target),
        LossKind::L1 => {
            let diff = tape.sub(pred, target)?;
            let diff = tape.abs(diff)?;
            tape.mean(diff)
        }
        LossKind::L2Norm => {
            let diff = tape.sub(pred, target)?;
            let sq = tape.mul(diff, diff)?;
            let per_token = tape.sum_last(sq)?;
            let eps = tape.constant(Tensor::filled(&[plan.masked.len()], NORM_FORM_EPS));
            let per_token = tape.add(per_token, eps)?;
            let norms = tape.sqrt(per_token)?;
            tape.mean(norms)
        }
    }
}
