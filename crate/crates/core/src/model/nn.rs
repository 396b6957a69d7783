//! Dense primitives with hand-written backward passes.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::lora::LoraAdapter;
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;

/// What a linear layer remembers about its adapter path.
#[derive(Debug, Clone)]
pub(crate) struct LoraTape<S> {
    /// Adapter input after dropout (or the raw input when no dropout).
    input: Option<Array2<S>>,
    /// Dropout keep mask scaled by `1 / (1 - p)`.
    keep: Option<Array2<S>>,
    /// `input * A^T`
    hidden: Array2<S>,
}

/// Adapter binding for one linear call.
#[derive(Clone, Copy)]
pub(crate) struct LoraUse<'a, S> {
    pub adapter: &'a LoraAdapter<S>,
    pub multiplier: S,
}

/// `y = x W^T + b` plus the optional adapter path.
pub(crate) fn linear<S: Scalar>(
    x: &ArrayView2<'_, S>,
    w: &Array2<S>,
    b: &Array2<S>,
    lora: Option<LoraUse<'_, S>>,
    dropout: Option<&mut ChaCha8Rng>,
) -> (Array2<S>, Option<LoraTape<S>>) {
    let mut y = Array2::zeros((x.nrows(), w.nrows()));
    general_mat_mul(S::one(), x, &w.t(), S::zero(), &mut y);
    y += &b.row(0);
    let tape = lora.map(|l| {
        let p = l.adapter.dropout;
        let (input, keep) = match dropout {
            Some(rng) if p > S::zero() => {
                let pf = p.as_f64();
                let inv = S::one() / (S::one() - p);
                let keep = Array2::from_shape_simple_fn(x.dim(), || {
                    if rng.random::<f64>() < pf {
                        S::zero()
                    } else {
                        inv
                    }
                });
                let u = &keep * x;
                (Some(u), Some(keep))
            }
            _ => (None, None),
        };
        let src = input.as_ref().map_or_else(|| x.view(), |u| u.view());
        let hidden = src.dot(&l.adapter.a.t());
        let s = l.adapter.scale() * l.multiplier;
        general_mat_mul(s, &hidden, &l.adapter.b.t(), S::one(), &mut y);
        LoraTape { input, keep, hidden }
    });
    (y, tape)
}

/// Gradient sinks for a linear layer.
pub(crate) struct LinearGrads<'a, S> {
    pub w: Option<(&'a mut Array2<S>, &'a mut Array2<S>)>,
    pub lora: Option<(&'a mut Array2<S>, &'a mut Array2<S>)>,
}

/// Accumulates parameter gradients and returns `dL/dx` when requested.
pub(crate) fn linear_backward<S: Scalar>(
    x: &ArrayView2<'_, S>,
    w: &Array2<S>,
    dy: &Array2<S>,
    lora: Option<(LoraUse<'_, S>, &LoraTape<S>)>,
    grads: LinearGrads<'_, S>,
    need_dx: bool,
) -> Option<Array2<S>> {
    if let Some((gw, gb)) = grads.w {
        general_mat_mul(S::one(), &dy.t(), x, S::one(), gw);
        let mut gb_row = gb.row_mut(0);
        gb_row += &dy.sum_axis(Axis(0));
    }
    let mut dx = need_dx.then(|| dy.dot(w));
    if let Some((l, tape)) = lora {
        let s = l.adapter.scale() * l.multiplier;
        let mut dv = dy.dot(&l.adapter.b);
        dv *= s;
        if let Some((ga, gb)) = grads.lora {
            general_mat_mul(s, &dy.t(), &tape.hidden, S::one(), gb);
            let src = tape.input.as_ref().map_or_else(|| x.view(), |u| u.view());
            general_mat_mul(S::one(), &dv.t(), &src, S::one(), ga);
        }
        if let Some(dx) = dx.as_mut() {
            let mut du = dv.dot(&l.adapter.a);
            if let Some(keep) = &tape.keep {
                du *= keep;
            }
            *dx += &du;
        }
    }
    dx
}

#[derive(Debug, Clone)]
pub(crate) struct LnTape<S> {
    xhat: Array2<S>,
    rstd: Array1<S>,
}

pub(crate) fn layer_norm<S: Scalar>(x: &Array2<S>, g: &Array2<S>, b: &Array2<S>) -> (Array2<S>, LnTape<S>) {
    let d = S::lit(x.ncols() as f64);
    let eps = S::lit(LN_EPS);
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| *v * *v).sum::<S>() / d;
        *r = S::one() / (var + eps).sqrt();
        let rv = *r;
        row.mapv_inplace(|v| v * rv);
    }
    let mut y = &xhat * &g.row(0);
    y += &b.row(0);
    (y, LnTape { xhat, rstd })
}

pub(crate) fn layer_norm_backward<S: Scalar>(
    dy: &Array2<S>,
    g: &Array2<S>,
    tape: &LnTape<S>,
    grads: Option<(&mut Array2<S>, &mut Array2<S>)>,
) -> Array2<S> {
    if let Some((gg, gb)) = grads {
        let mut gg_row = gg.row_mut(0);
        gg_row += &(dy * &tape.xhat).sum_axis(Axis(0));
        let mut gb_row = gb.row_mut(0);
        gb_row += &dy.sum_axis(Axis(0));
    }
    let d = S::lit(dy.ncols() as f64);
    let mut dx = dy * &g.row(0);
    for ((mut row, xh), r) in dx.rows_mut().into_iter().zip(tape.xhat.rows()).zip(tape.rstd.iter()) {
        let mean_d = row.sum() / d;
        let mean_dx = Zip::from(&row).and(&xh).fold(S::zero(), |acc, &a, &b| acc + a * b) / d;
        Zip::from(&mut row).and(&xh).for_each(|v, &h| *v = (*v - mean_d - h * mean_dx) * *r);
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub(crate) fn gelu<S: Scalar>(u: &Array2<S>) -> Array2<S> {
    let (c, k, h) = (S::lit(GELU_C), S::lit(GELU_K), S::lit(0.5));
    u.mapv(|x| h * x * (S::one() + (c * (x + k * x * x * x)).tanh()))
}

pub(crate) fn gelu_backward<S: Scalar>(u: &Array2<S>, dg: &Array2<S>) -> Array2<S> {
    let (c, k, h, three) = (S::lit(GELU_C), S::lit(GELU_K), S::lit(0.5), S::lit(3.0));
    let mut out = dg.clone();
    Zip::from(&mut out).and(u).for_each(|d, &x| {
        let th = (c * (x + k * x * x * x)).tanh();
        let deriv = h * (S::one() + th) + h * x * (S::one() - th * th) * c * (S::one() + three * k * x * x);
        *d *= deriv;
    });
    out
}

/// Single-head scaled dot-product attention over the first `n_keys` keys.
/// Returns probabilities `(Tq x n_keys)` and writes context into `ctx`.
pub(crate) fn attention<S: Scalar>(
    q: &ArrayView2<'_, S>,
    k: &ArrayView2<'_, S>,
    v: &ArrayView2<'_, S>,
    ctx: &mut ArrayViewMut2<'_, S>,
) -> Array2<S> {
    let scale = S::one() / S::lit(q.ncols() as f64).sqrt();
    let mut p = Array2::zeros((q.nrows(), k.nrows()));
    general_mat_mul(scale, q, &k.t(), S::zero(), &mut p);
    for mut row in p.rows_mut() {
        let m = row.fold(S::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - m).exp());
        let z = row.sum();
        row.mapv_inplace(|x| x / z);
    }
    general_mat_mul(S::one(), &p, v, S::zero(), ctx);
    p
}

/// Backward of [`attention`]; accumulates into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<S: Scalar>(
    q: &ArrayView2<'_, S>,
    k: &ArrayView2<'_, S>,
    v: &ArrayView2<'_, S>,
    p: &Array2<S>,
    dctx: &ArrayView2<'_, S>,
    dq: &mut ArrayViewMut2<'_, S>,
    dk: &mut ArrayViewMut2<'_, S>,
    dv: &mut ArrayViewMut2<'_, S>,
) {
    let scale = S::one() / S::lit(q.ncols() as f64).sqrt();
    general_mat_mul(S::one(), &p.t(), dctx, S::one(), dv);
    let mut ds = dctx.dot(&v.t());
    Zip::from(ds.rows_mut()).and(p.rows()).for_each(|mut drow, prow| {
        let dot = Zip::from(&drow).and(&prow).fold(S::zero(), |acc, &a, &b| acc + a * b);
        Zip::from(&mut drow).and(&prow).for_each(|d, &pp| *d = pp * (*d - dot));
    });
    general_mat_mul(scale, &ds, k, S::one(), dq);
    general_mat_mul(scale, &ds.t(), q, S::one(), dk);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use ndarray::{array, s};

    fn num_grad(f: &mut dyn FnMut(&Array2<f64>) -> f64, x: &Array2<f64>) -> Array2<f64> {
        let h = 1e-5;
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            g.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())), "{x} vs {y}");
        }
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = seed::rng(1);
        let x: Array2<f64> = crate::model::randn(&mut rng, 3, 5, 1.0);
        let g: Array2<f64> = crate::model::randn(&mut rng, 1, 5, 1.0);
        let b: Array2<f64> = crate::model::randn(&mut rng, 1, 5, 1.0);
        let w: Array2<f64> = crate::model::randn(&mut rng, 3, 5, 1.0);
        let (_, tape) = layer_norm(&x, &g, &b);
        let dx = layer_norm_backward(&w, &g, &tape, None);
        let num = num_grad(&mut |x| (&layer_norm(x, &g, &b).0 * &w).sum(), &x);
        close(&dx, &num, 1e-7);
    }

    #[test]
    fn gelu_gradient() {
        let u = array![[-2.0, -0.3, 0.0, 0.7, 3.0]];
        let w = array![[1.0, 2.0, -1.0, 0.5, 0.25]];
        let d = gelu_backward(&u, &w);
        let num = num_grad(&mut |u| (&gelu(u) * &w).sum(), &u);
        close(&d, &num, 1e-8);
    }

    #[test]
    fn attention_gradient() {
        let mut rng = seed::rng(2);
        let q: Array2<f64> = crate::model::randn(&mut rng, 4, 3, 1.0);
        let k: Array2<f64> = crate::model::randn(&mut rng, 5, 3, 1.0);
        let v: Array2<f64> = crate::model::randn(&mut rng, 5, 3, 1.0);
        let w: Array2<f64> = crate::model::randn(&mut rng, 4, 3, 1.0);
        let run = |q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>| {
            let mut ctx = Array2::zeros((4, 3));
            attention(&q.view(), &k.view(), &v.view(), &mut ctx.view_mut());
            (&ctx * &w).sum()
        };
        let mut ctx = Array2::zeros((4, 3));
        let p = attention(&q.view(), &k.view(), &v.view(), &mut ctx.view_mut());
        let (mut dq, mut dk, mut dv) = (Array2::zeros((4, 3)), Array2::zeros((5, 3)), Array2::zeros((5, 3)));
        attention_backward(
            &q.view(),
            &k.view(),
            &v.view(),
            &p,
            &w.view(),
            &mut dq.view_mut(),
            &mut dk.view_mut(),
            &mut dv.view_mut(),
        );
        close(&dq, &num_grad(&mut |q| run(q, &k, &v), &q), 1e-7);
        close(&dk, &num_grad(&mut |k| run(&q, k, &v), &k), 1e-7);
        close(&dv, &num_grad(&mut |v| run(&q, &k, v), &v), 1e-7);
        // Rows of p are distributions over the keys.
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let _ = ctx.slice(s![.., 0]);
    }

    #[test]
    fn linear_with_adapter_gradients() {
        let mut rng = seed::rng(3);
        let x: Array2<f64> = crate::model::randn(&mut rng, 4, 3, 1.0);
        let w: Array2<f64> = crate::model::randn(&mut rng, 2, 3, 1.0);
        let b: Array2<f64> = crate::model::randn(&mut rng, 1, 2, 1.0);
        let up: Array2<f64> = crate::model::randn(&mut rng, 4, 2, 1.0);
        let adapter = LoraAdapter {
            site: "s".into(),
            a: crate::model::randn(&mut rng, 2, 3, 1.0),
            b: crate::model::randn(&mut rng, 2, 2, 1.0),
            alpha: 4.0,
            dropout: 0.0,
        };
        let lu = LoraUse {
            adapter: &adapter,
            multiplier: -0.5,
        };
        let (_, tape) = linear(&x.view(), &w, &b, Some(lu), None);
        let (mut gw, mut gb) = (Array2::zeros((2, 3)), Array2::zeros((1, 2)));
        let (mut ga, mut gbb) = (Array2::zeros((2, 3)), Array2::zeros((2, 2)));
        let dx = linear_backward(
            &x.view(),
            &w,
            &up,
            Some((lu, tape.as_ref().unwrap())),
            LinearGrads {
                w: Some((&mut gw, &mut gb)),
                lora: Some((&mut ga, &mut gbb)),
            },
            true,
        )
        .unwrap();
        let f = |x: &Array2<f64>, w: &Array2<f64>, a: &LoraAdapter<f64>| {
            let lu = LoraUse {
                adapter: a,
                multiplier: -0.5,
            };
            (&linear(&x.view(), w, &b, Some(lu), None).0 * &up).sum()
        };
        close(&dx, &num_grad(&mut |x| f(x, &w, &adapter), &x), 1e-7);
        close(&gw, &num_grad(&mut |w| f(&x, w, &adapter), &w), 1e-7);
        close(
            &ga,
            &num_grad(
                &mut |a| {
                    let mut ad = adapter.clone();
                    ad.a = a.clone();
                    f(&x, &w, &ad)
                },
                &adapter.a,
            ),
            1e-7,
        );
        close(
            &gbb,
            &num_grad(
                &mut |bb| {
                    let mut ad = adapter.clone();
                    ad.b = bb.clone();
                    f(&x, &w, &ad)
                },
                &adapter.b,
            ),
            1e-7,
        );
        assert_eq!(gb, up.sum_axis(Axis(0)).insert_axis(Axis(0)));
    }
}
