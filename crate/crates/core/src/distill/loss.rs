//! Tempered softmax and the distillation objective
//!
//! ```text
//! L = α · CE(y, σ(z_s, 1)) + (1 − α) · s · CE(σ(z_t, τ), σ(z_s, τ))
//! ```
//!
//! with `CE(p, q) = −Σ_k p_k log q_k`, `σ(z, τ) = softmax(z / τ)` and
//! `s = τ²` when scaling is enabled (otherwise 1). The loss is averaged
//! over pixels whose label is not an ignore class.

use crate::error::{Error, Result};

/// Class-planar logits: value `(n, k, p)` lives at `data[(n * classes + k) * pixels + p]`.
#[derive(Clone, Copy, Debug)]
pub struct LogitBatch<'a> {
    pub data: &'a [f64],
    pub batch: usize,
    pub classes: usize,
    pub pixels: usize,
}

impl<'a> LogitBatch<'a> {
    pub fn new(data: &'a [f64], batch: usize, classes: usize, pixels: usize) -> Result<Self> {
        if data.len() != batch * classes * pixels {
            return Err(Error::Shape(format!(
                "{} logits for batch {batch} x {classes} classes x {pixels} pixels",
                data.len()
            )));
        }
        if classes == 0 {
            return Err(Error::Shape("logits need at least one class".into()));
        }
        Ok(Self {
            data,
            batch,
            classes,
            pixels,
        })
    }

    #[inline]
    fn at(&self, n: usize, k: usize, p: usize) -> f64 {
        self.data[(n * self.classes + k) * self.pixels + p]
    }

    fn same_shape(&self, other: &LogitBatch<'_>) -> bool {
        (self.batch, self.classes, self.pixels) == (other.batch, other.classes, other.pixels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KdParams {
    pub alpha: f64,
    pub tau: f64,
    pub scale_by_tau_squared: bool,
}

impl KdParams {
    pub fn hard_only() -> Self {
        Self {
            alpha: 1.0,
            tau: 1.0,
            scale_by_tau_squared: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha {} outside (0, 1]",
                self.alpha
            )));
        }
        if !(self.tau >= 1.0) || !self.tau.is_finite() {
            return Err(Error::InvalidArgument(format!("tau {} must be >= 1", self.tau)));
        }
        Ok(())
    }

    fn distill_scale(&self) -> f64 {
        if self.scale_by_tau_squared {
            self.tau * self.tau
        } else {
            1.0
        }
    }
}

/// Loss value with its two components, each a mean over counted pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KdTerms {
    pub total: f64,
    /// `CE(y, σ(z_s, 1))`
    pub hard: f64,
    /// `s · CE(σ(z_t, τ), σ(z_s, τ))`; zero when no teacher term is used.
    pub distill: f64,
    pub counted_pixels: usize,
}

/// `softmax(z / tau)` with max subtraction.
pub fn tempered_softmax(z: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("logits must be finite".into()));
    }
    let mut out = vec![0.0; z.len()];
    softmax_into(z.iter().copied(), tau, &mut out);
    Ok(out)
}

fn softmax_into(z: impl Iterator<Item = f64> + Clone, tau: f64, out: &mut [f64]) {
    let m = z.clone().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(z) {
        *o = ((v - m) / tau).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

fn check_inputs(
    student: &LogitBatch<'_>,
    teacher: Option<&LogitBatch<'_>>,
    labels: &[u8],
    params: &KdParams,
) -> Result<()> {
    params.validate()?;
    if labels.len() != student.batch * student.pixels {
        return Err(Error::Shape(format!(
            "{} labels for {} pixels",
            labels.len(),
            student.batch * student.pixels
        )));
    }
    match teacher {
        Some(t) if !t.same_shape(student) => Err(Error::Shape(format!(
            "teacher logits {}x{}x{} differ from student {}x{}x{}",
            t.batch, t.classes, t.pixels, student.batch, student.classes, student.pixels
        ))),
        None if params.alpha < 1.0 => Err(Error::InvalidArgument(
            "alpha < 1 requires teacher logits".into(),
        )),
        _ => Ok(()),
    }
}

fn kd_impl(
    student: &LogitBatch<'_>,
    teacher: Option<&LogitBatch<'_>>,
    labels: &[u8],
    params: &KdParams,
    ignore: &[u8],
    mut grad: Option<&mut [f64]>,
) -> Result<KdTerms> {
    check_inputs(student, teacher, labels, params)?;
    let k = student.classes;
    let counted = labels.iter().filter(|l| !ignore.contains(l)).count();
    if counted == 0 {
        return Err(Error::InvalidArgument("every pixel is ignored".into()));
    }
    let teacher = if params.alpha == 1.0 { None } else { teacher };
    let inv_n = 1.0 / counted as f64;
    let scale = params.distill_scale();
    let tau = params.tau;
    let mut q1 = vec![0.0; k];
    let mut qt = vec![0.0; k];
    let mut pt = vec![0.0; k];
    let mut hard_sum = 0.0;
    let mut distill_sum = 0.0;
    if let Some(g) = grad.as_deref_mut() {
        g.iter_mut().for_each(|v| *v = 0.0);
    }
    for n in 0..student.batch {
        for p in 0..student.pixels {
            let y = labels[n * student.pixels + p];
            if ignore.contains(&y) {
                continue;
            }
            let y = y as usize;
            if y >= k {
                return Err(Error::InvalidArgument(format!(
                    "label {y} out of range for {k} classes"
                )));
            }
            let zs = (0..k).map(|c| student.at(n, c, p));
            softmax_into(zs.clone(), 1.0, &mut q1);
            let m = zs.clone().fold(f64::NEG_INFINITY, f64::max);
            let lse = zs.clone().map(|v| (v - m).exp()).sum::<f64>().ln();
            hard_sum += -(student.at(n, y, p) - m - lse);
            if let Some(t) = teacher {
                let zt = (0..k).map(|c| t.at(n, c, p));
                softmax_into(zt, tau, &mut pt);
                softmax_into(zs.clone(), tau, &mut qt);
                let lse_t = zs.clone().map(|v| ((v - m) / tau).exp()).sum::<f64>().ln();
                let ce: f64 = (0..k)
                    .filter(|&c| pt[c] > 0.0)
                    .map(|c| -pt[c] * ((student.at(n, c, p) - m) / tau - lse_t))
                    .sum();
                distill_sum += scale * ce;
            }
            if let Some(g) = grad.as_deref_mut() {
                for c in 0..k {
                    let onehot = if c == y { 1.0 } else { 0.0 };
                    let mut d = params.alpha * (q1[c] - onehot);
                    if teacher.is_some() {
                        d += (1.0 - params.alpha) * scale * (qt[c] - pt[c]) / tau;
                    }
                    g[(n * k + c) * student.pixels + p] = d * inv_n;
                }
            }
        }
    }
    let hard = hard_sum * inv_n;
    let distill = distill_sum * inv_n;
    let total = if teacher.is_some() {
        params.alpha * hard + (1.0 - params.alpha) * distill
    } else {
        hard
    };
    Ok(KdTerms {
        total,
        hard,
        distill,
        counted_pixels: counted,
    })
}

/// Mean distillation loss over non-ignored pixels.
///
/// `teacher` may be `None` only when `alpha == 1`; with `alpha == 1` the
/// teacher logits are never read.
pub fn kd_loss(
    student: &LogitBatch<'_>,
    teacher: Option<&LogitBatch<'_>>,
    labels: &[u8],
    params: &KdParams,
    ignore: &[u8],
) -> Result<KdTerms> {
    kd_impl(student, teacher, labels, params, ignore, None)
}

/// [`kd_loss`] plus its gradient with respect to the student logits, in
/// the student's layout.
pub fn kd_loss_with_grad(
    student: &LogitBatch<'_>,
    teacher: Option<&LogitBatch<'_>>,
    labels: &[u8],
    params: &KdParams,
    ignore: &[u8],
) -> Result<(KdTerms, Vec<f64>)> {
    let mut grad = vec![0.0; student.data.len()];
    let terms = kd_impl(student, teacher, labels, params, ignore, Some(&mut grad))?;
    Ok((terms, grad))
}
