//! Kinematic, contrastive and divergence objectives with analytic
//! gradients with respect to the predicted frames.
//!
//! Every kinematic term reads only the valid span, so padded frames never
//! influence a value or receive gradient.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::MotionSequence;
use crate::scalar::Scalar;

pub const EPS: f64 = 1e-8;

/// Term weights, stream weights and constants of the stage-1 objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub mpjpe: f64,
    pub vel: f64,
    pub acc: f64,
    pub foot: f64,
    pub text: f64,
    pub harm: f64,
    pub dec: f64,
    pub pres: f64,
    pub gamma: f64,
    pub tau: f64,
    pub eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mpjpe: 1.0,
            vel: 1.0,
            acc: 0.5,
            foot: 0.5,
            text: 0.1,
            harm: 1.0,
            dec: 0.5,
            pres: 0.1,
            gamma: 0.5,
            tau: 0.07,
            eps: EPS,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda_mpjpe", self.mpjpe),
            ("lambda_vel", self.vel),
            ("lambda_acc", self.acc),
            ("lambda_foot", self.foot),
            ("lambda_text", self.text),
            ("w_harm", self.harm),
            ("w_dec", self.dec),
            ("w_pres", self.pres),
        ];
        for (name, v) in named {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite nonnegative number, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} not in [0, 1]", self.gamma)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Unweighted term values, averaged over the batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TermValues {
    pub mpjpe: f64,
    pub vel: f64,
    pub acc: f64,
    pub foot: f64,
    pub text: f64,
}

fn check_pair<S: Scalar>(pred: &MotionSequence<S>, tgt: &MotionSequence<S>) -> Result<()> {
    pred.check_same_shape(tgt)?;
    if pred.layout() != tgt.layout() {
        return Err(Error::InvalidMotion("layouts differ".into()));
    }
    Ok(())
}

/// Masked mean of per-frame joint-position error norms, with its gradient.
pub fn mpjpe_grad<S: Scalar>(pred: &MotionSequence<S>, tgt: &MotionSequence<S>, eps: f64) -> Result<(S, Array2<S>)> {
    check_pair(pred, tgt)?;
    let n = pred.valid_len();
    let jp = pred.layout().joint_positions();
    let denom = S::lit(n as f64 + eps);
    let mut grad = Array2::zeros(pred.frames().dim());
    let mut total = S::zero();
    for t in 0..n {
        let d = &pred.frames().slice(s![t, jp.clone()]) - &tgt.frames().slice(s![t, jp.clone()]);
        let norm = d.iter().map(|x| *x * *x).sum::<S>().sqrt();
        total += norm;
        if norm > S::zero() {
            grad.slice_mut(s![t, jp.clone()]).assign(&(d / (norm * denom)));
        }
    }
    Ok((total / denom, grad))
}

pub fn mpjpe<S: Scalar>(pred: &MotionSequence<S>, tgt: &MotionSequence<S>, eps: f64) -> Result<S> {
    Ok(mpjpe_grad(pred, tgt, eps)?.0)
}

/// Finite differences of order `order` over the valid span: rows are
/// residuals `D(pred) - D(tgt)`.
fn residual<S: Scalar>(pred: &MotionSequence<S>, tgt: &MotionSequence<S>, order: usize) -> Array2<S> {
    let n = pred.valid_len();
    let diff = pred.valid_frames().to_owned() - tgt.valid_frames();
    let mut r = diff;
    for _ in 0..order {
        let m = r.nrows();
        r = &r.slice(s![1..m, ..]) - &r.slice(s![..m - 1, ..]);
    }
    debug_assert_eq!(r.nrows(), n - order);
    r
}

/// Adjoint of [`residual`]: maps a gradient on residual rows back to frames.
fn residual_adjoint<S: Scalar>(g: Array2<S>, order: usize, frames: (usize, usize)) -> Array2<S> {
    let mut g = g;
    for _ in 0..order {
        let m = g.nrows();
        let mut up = Array2::zeros((m + 1, g.ncols()));
        up.slice_mut(s![1.., ..]).assign(&g);
        let mut lower = up.slice_mut(s![..m, ..]);
        lower -= &g;
        g = up;
    }
    let mut out = Array2::zeros(frames);
    out.slice_mut(s![..g.nrows(), ..]).assign(&g);
    out
}

/// Log-frequency weights `ln(1 + 9 k / (K - 1))` for `K` bins.
pub fn spectral_weights(bins: usize) -> Vec<f64> {
    if bins <= 1 {
        return vec![0.0; bins];
    }
    (0..bins)
        .map(|k| (1.0 + 9.0 * k as f64 / (bins - 1) as f64).ln())
        .collect()
}

/// Mean over bins and channels of `|rFFT(r)| * w(nu)` along time, with its
/// gradient. `r` is `L x C`; there are `K = L/2 + 1` bins and a single bin
/// gives zero.
pub fn spectral_emphasis<S: Scalar>(r: &ArrayView2<'_, S>) -> (S, Array2<S>) {
    let (l, c) = r.dim();
    let mut grad = Array2::zeros((l, c));
    let k = l / 2 + 1;
    if l == 0 || k <= 1 {
        return (S::zero(), grad);
    }
    let w = spectral_weights(k);
    let mut planner = FftPlanner::<S>::new();
    let fft = planner.plan_fft_forward(l);
    let mut buf: Vec<Complex<S>> = Vec::with_capacity(l * c);
    for ch in 0..c {
        buf.extend(r.column(ch).iter().map(|&x| Complex::new(x, S::zero())));
    }
    fft.process(&mut buf);
    let norm = S::lit(1.0 / (k * c) as f64);
    let mut value = S::zero();
    let mut y = vec![Complex::new(S::zero(), S::zero()); l * c];
    for ch in 0..c {
        for (b, &wb) in w.iter().enumerate() {
            let x = buf[ch * l + b];
            let mag = x.norm();
            let wb = S::lit(wb);
            value += wb * mag;
            if mag > S::zero() {
                y[ch * l + b] = x.conj() * (wb * norm / mag);
            }
        }
    }
    fft.process(&mut y);
    for ch in 0..c {
        for t in 0..l {
            grad[[t, ch]] = y[ch * l + t].re;
        }
    }
    (value * norm, grad)
}

fn difference_loss<S: Scalar>(
    pred: &MotionSequence<S>,
    tgt: &MotionSequence<S>,
    order: usize,
    eps: f64,
) -> (S, Array2<S>) {
    let r = residual(pred, tgt, order);
    let denom = S::lit(r.nrows() as f64 + eps);
    let mut g = Array2::zeros(r.dim());
    let mut total = S::zero();
    for (row, mut grow) in r.rows().into_iter().zip(g.rows_mut()) {
        let norm = row.iter().map(|x| *x * *x).sum::<S>().sqrt();
        total += norm;
        if norm > S::zero() {
            grow.assign(&(&row / (norm * denom)));
        }
    }
    let (spec, gspec) = spectral_emphasis(&r.view());
    g += &gspec;
    (total / denom + spec, residual_adjoint(g, order, pred.frames().dim()))
}

/// Masked mean velocity-residual norm plus its spectral emphasis.
pub fn vel_loss_grad<S: Scalar>(pred: &MotionSequence<S>, tgt: &MotionSequence<S>, eps: f64) -> Result<(S, Array2<S>)> {
    check_pair(pred, tgt)?;
    if pred.valid_len() < 2 {
        return Err(Error::VelocityDegenerate(pred.valid_len()));
    }
    Ok(difference_loss(pred, tgt, 1, eps))
}

pub fn vel_loss<S: Scalar>(pred: &MotionSequence<S>, tgt: &MotionSequence<S>, eps: f64) -> Result<S> {
    Ok(vel_loss_grad(pred, tgt, eps)?.0)
}

/// Masked mean acceleration-residual norm plus its spectral emphasis.
pub fn acc_loss_grad<S: Scalar>(pred: &MotionSequence<S>, tgt: &MotionSequence<S>, eps: f64) -> Result<(S, Array2<S>)> {
    check_pair(pred, tgt)?;
    if pred.valid_len() < 3 {
        return Err(Error::AccelerationDegenerate(pred.valid_len()));
    }
    Ok(difference_loss(pred, tgt, 2, eps))
}

pub fn acc_loss<S: Scalar>(pred: &MotionSequence<S>, tgt: &MotionSequence<S>, eps: f64) -> Result<S> {
    Ok(acc_loss_grad(pred, tgt, eps)?.0)
}

/// Masked mean over frame steps of the mean absolute velocity across the
/// foot joints' position channels.
pub fn foot_loss_grad<S: Scalar>(pred: &MotionSequence<S>, eps: f64) -> Result<(S, Array2<S>)> {
    let channels = pred.layout().foot_channels();
    if channels.is_empty() {
        return Err(Error::FootConfig);
    }
    let n = pred.valid_len();
    if n < 2 {
        return Err(Error::VelocityDegenerate(n));
    }
    let x = pred.frames();
    let denom = S::lit((n - 1) as f64 + eps);
    let per = S::lit(1.0 / channels.len() as f64);
    let mut grad = Array2::zeros(x.dim());
    let mut total = S::zero();
    for t in 1..n {
        let mut step = S::zero();
        for &c in &channels {
            let d = x[[t, c]] - x[[t - 1, c]];
            step += d.abs();
            let g = d.signum() * per / denom;
            if d != S::zero() {
                grad[[t, c]] += g;
                grad[[t - 1, c]] -= g;
            }
        }
        total += step * per;
    }
    Ok((total / denom, grad))
}

pub fn foot_loss<S: Scalar>(pred: &MotionSequence<S>, eps: f64) -> Result<S> {
    Ok(foot_loss_grad(pred, eps)?.0)
}

/// Symmetric contrastive cross-entropy with diagonal targets, with
/// gradients for both feature batches.
pub fn text_motion_loss_grad<S: Scalar>(
    e_t: &Array2<S>,
    e_m: &Array2<S>,
    tau: f64,
) -> Result<(S, Array2<S>, Array2<S>)> {
    let b = e_t.nrows();
    if e_m.dim() != e_t.dim() {
        return Err(Error::Feature(format!("text {:?} vs motion {:?}", e_t.dim(), e_m.dim())));
    }
    if b < 2 {
        return Err(Error::ContrastiveDegenerate(b));
    }
    let inv_tau = S::lit(1.0 / tau);
    let logits = e_t.dot(&e_m.t()) * inv_tau;
    let softmax_rows = |m: &Array2<S>| -> (S, Array2<S>) {
        let mut p = m.clone();
        let mut ce = S::zero();
        for (i, mut row) in p.rows_mut().into_iter().enumerate() {
            let mx = row.fold(S::neg_infinity(), |a, &v| a.max(v));
            row.mapv_inplace(|v| (v - mx).exp());
            let z = row.sum();
            row /= z;
            ce += z.ln() + mx - m[[i, i]];
        }
        (ce / S::lit(b as f64), p)
    };
    let (ce1, p1) = softmax_rows(&logits);
    let (ce2, p2) = softmax_rows(&logits.t().to_owned());
    let eye = Array2::<S>::eye(b);
    let half_b = S::lit(0.5 / b as f64);
    let dlogits = ((&p1 - &eye) + (&p2 - &eye).t()) * half_b;
    let g_t = dlogits.dot(e_m) * inv_tau;
    let g_m = dlogits.t().dot(e_t) * inv_tau;
    Ok(((ce1 + ce2) * S::lit(0.5), g_t, g_m))
}

pub fn text_motion_loss<S: Scalar>(e_t: &Array2<S>, e_m: &Array2<S>, tau: f64) -> Result<S> {
    Ok(text_motion_loss_grad(e_t, e_m, tau)?.0)
}

/// Value and gradients of the negative preservation divergence with
/// respect to the current-model features.
#[derive(Debug, Clone, PartialEq)]
pub struct PresDivergence<S> {
    pub value: S,
    pub grad_cur: Array1<S>,
    pub grad_cur_dec: Array1<S>,
}

pub fn pres_divergence_grad<S: Scalar>(
    z_cur: &Array1<S>,
    z_base: &Array1<S>,
    z_cur_dec: &Array1<S>,
    z_base_dec: &Array1<S>,
    gamma: f64,
) -> Result<PresDivergence<S>> {
    let d = z_cur.len();
    if [z_base.len(), z_cur_dec.len(), z_base_dec.len()].iter().any(|&l| l != d) {
        return Err(Error::Feature("pooled feature dimensions differ".into()));
    }
    let g = S::lit(gamma);
    let g1 = S::one() - g;
    let a = z_cur - z_base;
    let b = z_cur_dec - z_base_dec;
    let value = -(g * a.dot(&a)) - g1 * b.dot(&b);
    let two = S::lit(2.0);
    Ok(PresDivergence {
        value,
        grad_cur: a * (-two * g),
        grad_cur_dec: b * (-two * g1),
    })
}

pub fn pres_divergence<S: Scalar>(
    z_cur: &Array1<S>,
    z_base: &Array1<S>,
    z_cur_dec: &Array1<S>,
    z_base_dec: &Array1<S>,
    gamma: f64,
) -> Result<S> {
    Ok(pres_divergence_grad(z_cur, z_base, z_cur_dec, z_base_dec, gamma)?.value)
}

/// Masked temporal mean of all channels.
pub fn pool<S: Scalar>(x: &MotionSequence<S>, eps: f64) -> Array1<S> {
    x.valid_frames().sum_axis(Axis(0)) / S::lit(x.valid_len() as f64 + eps)
}

/// Gradient of [`pool`] with respect to the frames.
pub fn pool_backward<S: Scalar>(x: &MotionSequence<S>, dz: &Array1<S>, eps: f64) -> Array2<S> {
    let mut g = Array2::zeros(x.frames().dim());
    let scaled = dz / S::lit(x.valid_len() as f64 + eps);
    for mut row in g.rows_mut().into_iter().take(x.valid_len()) {
        row.assign(&scaled);
    }
    g
}

/// Weighted objective over a batch with per-item frame gradients.
#[derive(Debug, Clone)]
pub struct BatchLoss<S> {
    pub value: S,
    pub terms: TermValues,
    pub grads: Vec<Array2<S>>,
    /// Gradient on the motion features when a text term was included.
    pub grad_e_m: Option<Array2<S>>,
}

fn kinematic_batch<S: Scalar>(
    preds: &[MotionSequence<S>],
    tgts: &[MotionSequence<S>],
    w: &LossWeights,
    with_foot: bool,
) -> Result<BatchLoss<S>> {
    if preds.len() != tgts.len() || preds.is_empty() {
        return Err(Error::InvalidMotion("prediction and target batches must be equal and non-empty".into()));
    }
    let inv_b = 1.0 / preds.len() as f64;
    let mut terms = TermValues::default();
    let mut value = S::zero();
    let mut grads = Vec::with_capacity(preds.len());
    for (p, t) in preds.iter().zip(tgts) {
        let mut g = Array2::zeros(p.frames().dim());
        let mut add = |lambda: f64, (v, gv): (S, Array2<S>), slot: &mut f64| {
            *slot += v.as_f64() * inv_b;
            if lambda != 0.0 {
                let c = S::lit(lambda * inv_b);
                value += v * c;
                Zip::from(&mut g).and(&gv).for_each(|a, &b| *a += b * c);
            }
        };
        if w.mpjpe != 0.0 {
            add(w.mpjpe, mpjpe_grad(p, t, w.eps)?, &mut terms.mpjpe);
        }
        if w.vel != 0.0 {
            add(w.vel, vel_loss_grad(p, t, w.eps)?, &mut terms.vel);
        }
        if w.acc != 0.0 {
            add(w.acc, acc_loss_grad(p, t, w.eps)?, &mut terms.acc);
        }
        if with_foot && w.foot != 0.0 {
            add(w.foot, foot_loss_grad(p, w.eps)?, &mut terms.foot);
        }
        grads.push(g);
    }
    Ok(BatchLoss {
        value,
        terms,
        grads,
        grad_e_m: None,
    })
}

/// Batch-mean harmful loss. `features` carries `(e_t, e_m)` for the text
/// term; it is required when that weight is nonzero.
pub fn harm_loss_batch<S: Scalar>(
    preds: &[MotionSequence<S>],
    tgts: &[MotionSequence<S>],
    features: Option<(&Array2<S>, &Array2<S>)>,
    w: &LossWeights,
) -> Result<BatchLoss<S>> {
    let mut out = kinematic_batch(preds, tgts, w, true)?;
    if w.text != 0.0 {
        let (e_t, e_m) =
            features.ok_or_else(|| Error::Feature("text term weighted but no features given".into()))?;
        let (v, _, g_m) = text_motion_loss_grad(e_t, e_m, w.tau)?;
        out.terms.text = v.as_f64();
        out.value += v * S::lit(w.text);
        out.grad_e_m = Some(g_m * S::lit(w.text));
    }
    Ok(out)
}

/// Harmful loss for one prediction, with the text term over the given
/// feature batches.
pub fn harm_loss<S: Scalar>(
    pred: &MotionSequence<S>,
    tgt: &MotionSequence<S>,
    e_t: &Array2<S>,
    e_m: &Array2<S>,
    w: &LossWeights,
) -> Result<S> {
    Ok(harm_loss_batch(
        std::slice::from_ref(pred),
        std::slice::from_ref(tgt),
        Some((e_t, e_m)),
        w,
    )?
    .value)
}

/// Batch-mean decoupling loss: position, velocity and acceleration terms
/// against the decoupled targets.
pub fn dec_loss_batch<S: Scalar>(
    preds_mix: &[MotionSequence<S>],
    tgts_dec: &[MotionSequence<S>],
    w: &LossWeights,
) -> Result<BatchLoss<S>> {
    kinematic_batch(preds_mix, tgts_dec, w, false)
}

pub fn dec_loss<S: Scalar>(pred_mix: &MotionSequence<S>, tgt_dec: &MotionSequence<S>, w: &LossWeights) -> Result<S> {
    Ok(dec_loss_batch(std::slice::from_ref(pred_mix), std::slice::from_ref(tgt_dec), w)?.value)
}
