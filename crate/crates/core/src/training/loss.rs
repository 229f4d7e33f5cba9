use crate::error::{Error, Result};
use crate::imaging::Raster;
use crate::metrics::ssim_value_and_grad;

fn check(rendered: &Raster, target: &Raster, attn: &Raster) -> Result<()> {
    rendered.check_same_shape(target, "loss")?;
    rendered.check_same_dims(attn, "loss attention")?;
    if attn.channels() != 1 {
        return Err(Error::DimensionMismatch(format!(
            "attention map must have one channel, got {}",
            attn.channels()
        )));
    }
    Ok(())
}

/// `(1 / (W H C)) Σ A(x, y) |target - rendered|`.
pub fn weighted_l1(rendered: &Raster, target: &Raster, attn: &Raster) -> Result<f64> {
    check(rendered, target, attn)?;
    let ch = rendered.channels();
    let n = rendered.data().len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (p, &a) in attn.data().iter().enumerate() {
        for c in 0..ch {
            let i = p * ch + c;
            total += a * (target.data()[i] - rendered.data()[i]).abs();
        }
    }
    Ok(total / n as f64)
}

/// `(1 - λ) weighted_l1 + λ (1 - SSIM)` and its gradient with respect to
/// the rendered image.
pub fn combined_loss(
    rendered: &Raster,
    target: &Raster,
    attn: &Raster,
    ssim_weight: f64,
) -> Result<(f64, Raster)> {
    check(rendered, target, attn)?;
    if !(0.0..=1.0).contains(&ssim_weight) {
        return Err(Error::InvalidArgument(format!(
            "ssim weight must lie in [0, 1], got {ssim_weight}"
        )));
    }
    let l1 = weighted_l1(rendered, target, attn)?;
    let ch = rendered.channels();
    let n = rendered.data().len() as f64;
    let mut grad = Raster::zeros(rendered.width(), rendered.height(), ch);
    let l1_scale = (1.0 - ssim_weight) / n;
    for (p, &a) in attn.data().iter().enumerate() {
        for c in 0..ch {
            let i = p * ch + c;
            let d = rendered.data()[i] - target.data()[i];
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            grad.data_mut()[i] = l1_scale * a * sign;
        }
    }
    if ssim_weight == 0.0 {
        return Ok((l1, grad));
    }
    let (s, sg) = ssim_value_and_grad(rendered, target);
    for (g, d) in grad.data_mut().iter_mut().zip(sg.data()) {
        *g -= ssim_weight * d;
    }
    Ok(((1.0 - ssim_weight) * l1 + ssim_weight * (1.0 - s), grad))
}
