//! Heteroscedastic Gaussian negative log-likelihood with a gradient
//! preserving log-variance clamp.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::network::HeteroPrediction;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClampSpec {
    pub a: f64,
    pub b: f64,
    pub eps: f64,
}

impl Default for ClampSpec {
    fn default() -> Self {
        Self {
            a: -15.0,
            b: 15.0,
            eps: 1e-8,
        }
    }
}

impl ClampSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.a < self.b) || !(self.eps > 0.0) {
            bail!(Argument, "invalid clamp spec {self:?}");
        }
        Ok(())
    }

    #[inline]
    pub fn clip<T: Real>(&self, ell: T) -> T {
        ell.max(T::of(self.a)).min(T::of(self.b))
    }

    /// Backward multiplier: 1 strictly inside `(a, b)`, `1 − tanh²(ℓ)` at or
    /// beyond the bounds, evaluated as `sech²(ℓ)` to avoid cancellation.
    #[inline]
    pub fn multiplier<T: Real>(&self, ell: T) -> T {
        if ell > T::of(self.a) && ell < T::of(self.b) {
            T::one()
        } else {
            let c = ell.cosh();
            T::one() / (c * c)
        }
    }
}

/// Forward pass of the clamp: a hard clip.
pub fn clamp_grad<T: Real>(ell: &Tensor<T>, spec: &ClampSpec) -> Tensor<T> {
    ell.map(|v| spec.clip(v))
}

pub fn clamp_grad_backward<T: Real>(ell: &Tensor<T>, spec: &ClampSpec, dy: &Tensor<T>) -> Result<Tensor<T>> {
    ell.zip_map(dy, |v, g| spec.multiplier(v) * g)
}

/// Loss value and its gradients with respect to the predicted mean and raw log-variance.
#[derive(Clone, Debug)]
pub struct NllOutput<T> {
    pub loss: f64,
    pub dmean: Tensor<T>,
    pub dlog_var: Tensor<T>,
}

fn check_shapes<T: Real>(target: &Tensor<T>, pred: &HeteroPrediction<T>, weights: Option<&Tensor<T>>) -> Result<()> {
    target.expect_same_dims(&pred.mean)?;
    target.expect_same_dims(&pred.log_var)?;
    if let Some(w) = weights {
        target.expect_same_dims(w)?;
    }
    Ok(())
}

/// `mean((x − μ)² / (exp(ℓ̂) + ε) + ℓ̂)` over every element, `ℓ̂` the clamped log-variance.
pub fn hetero_nll<T: Real>(target: &Tensor<T>, pred: &HeteroPrediction<T>, spec: &ClampSpec) -> Result<f64> {
    Ok(hetero_nll_with_grad(target, pred, spec, None)?.loss)
}

/// As [`hetero_nll`], also returning gradients. With `weights`, the mean is
/// a weighted mean (used for the masked-region-only ablation).
pub fn hetero_nll_with_grad<T: Real>(
    target: &Tensor<T>,
    pred: &HeteroPrediction<T>,
    spec: &ClampSpec,
    weights: Option<&Tensor<T>>,
) -> Result<NllOutput<T>> {
    check_shapes(target, pred, weights)?;
    let (c, h, w) = target.chw()?;
    let hw = h * w;
    let total: f64 = match weights {
        Some(wt) => wt.data().iter().map(|v| v.to_f64().unwrap_or(0.0)).sum(),
        None => target.numel() as f64,
    };
    if total <= 0.0 {
        bail!(Argument, "loss weights sum to zero");
    }
    let norm = T::of(1.0 / total);
    let eps = T::of(spec.eps);
    let mut dmean = Tensor::zeros(target.dims());
    let mut dlog_var = Tensor::zeros(target.dims());
    let mut loss = 0.0f64;
    for ch in 0..c {
        let mut channel_sum = 0.0f64;
        for p in 0..hw {
            let i = ch * hw + p;
            let wt = weights.map_or(T::one(), |wt| wt.data()[i]);
            if wt == T::zero() {
                continue;
            }
            let x = target.data()[i];
            let mu = pred.mean.data()[i];
            let raw = pred.log_var.data()[i];
            let ell = spec.clip(raw);
            let var = ell.exp() + eps;
            let r = x - mu;
            let term = r * r / var + ell;
            channel_sum += (wt * term).to_f64().unwrap_or(f64::NAN);
            let s = wt * norm;
            dmean.data_mut()[i] = s * T::of(-2.0) * r / var;
            // d/dℓ̂ [r²/(e^ℓ̂+ε) + ℓ̂] = 1 − r²e^ℓ̂/(e^ℓ̂+ε)²
            let dl = T::one() - r * r * ell.exp() / (var * var);
            dlog_var.data_mut()[i] = s * dl * spec.multiplier(raw);
        }
        if !channel_sum.is_finite() {
            bail!(Numeric, "non-finite loss in target channel {ch}");
        }
        loss += channel_sum;
    }
    Ok(NllOutput {
        loss: loss / total,
        dmean,
        dlog_var,
    })
}
