//! Batched forward pass with a recorded tape, and its backward pass.

use ndarray::{s, Array2, Axis};
use rand_chacha::ChaCha8Rng;

use super::nn::{
    attention, attention_backward, gelu, gelu_backward, layer_norm, layer_norm_backward, linear, linear_backward,
    LinearGrads, LnTape, LoraTape, LoraUse,
};
use super::{DenoiserParams, ParamStore, TextCondition};
use crate::error::{Error, Result};
use crate::lora::LoraSet;
use crate::motion::MotionSequence;
use crate::scalar::Scalar;

/// One denoising query.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a, S> {
    pub x_t: &'a MotionSequence<S>,
    pub t: usize,
    pub cond: &'a TextCondition<S>,
}

/// A parameter set, optionally with adapters, viewed as a denoising function.
#[derive(Debug, Clone, Copy)]
pub struct Denoiser<'a, S> {
    params: &'a DenoiserParams<S>,
    lora: Option<&'a LoraSet<S>>,
}

#[derive(Debug, Clone, Copy)]
struct Meta {
    t: usize,
    np: usize,
    n: usize,
    row0: usize,
    text0: usize,
    ntext: usize,
}

#[derive(Debug)]
struct LayerTape<S> {
    ln1: LnTape<S>,
    a1: Array2<S>,
    qkv: Array2<S>,
    sa_probs: Vec<Array2<S>>,
    ctx: Array2<S>,
    sa_lora: Option<LoraTape<S>>,
    ln2: LnTape<S>,
    a2: Array2<S>,
    q2: Array2<S>,
    kv2: Array2<S>,
    ca_probs: Vec<Array2<S>>,
    ctx2: Array2<S>,
    ln3: LnTape<S>,
    a3: Array2<S>,
    u: Array2<S>,
    g: Array2<S>,
    fin_lora: Option<LoraTape<S>>,
    fout_lora: Option<LoraTape<S>>,
}

/// Activations recorded by [`Denoiser::forward_tape`].
#[derive(Debug)]
pub struct Tape<S> {
    meta: Vec<Meta>,
    frames: usize,
    pre_rows: Vec<usize>,
    noisy_rows: Vec<usize>,
    pre_in: Array2<S>,
    noisy_in: Array2<S>,
    text: Array2<S>,
    token_ids: Vec<Vec<usize>>,
    layers: Vec<LayerTape<S>>,
    lnf: LnTape<S>,
    hf: Array2<S>,
}

/// Gradient accumulators. `params` mirrors the backbone, `lora` holds
/// `(dA, dB)` per adapter.
#[derive(Debug, Clone)]
pub struct ModelGrads<S> {
    pub params: Option<ParamStore<S>>,
    pub lora: Option<Vec<(Array2<S>, Array2<S>)>>,
}

impl<S: Scalar> ModelGrads<S> {
    pub fn new(params: &DenoiserParams<S>, lora: Option<&LoraSet<S>>, backbone: bool, adapters: bool) -> Self {
        Self {
            params: backbone.then(|| params.store().zeros_like()),
            lora: lora.filter(|_| adapters).map(|set| {
                set.adapters()
                    .iter()
                    .map(|a| (Array2::zeros(a.a.dim()), Array2::zeros(a.b.dim())))
                    .collect()
            }),
        }
    }

    pub fn sq_norm(&self) -> S {
        let mut total = self.params.as_ref().map_or(S::zero(), ParamStore::sq_norm);
        if let Some(l) = &self.lora {
            for (a, b) in l {
                total += a.iter().chain(b.iter()).map(|x| *x * *x).sum::<S>();
            }
        }
        total
    }

    pub fn scale(&mut self, c: S) {
        if let Some(p) = &mut self.params {
            for v in p.values_mut() {
                *v *= c;
            }
        }
        if let Some(l) = &mut self.lora {
            for (a, b) in l {
                *a *= c;
                *b *= c;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.sq_norm().is_finite()
    }
}

fn sinks<S>(g: &mut Option<ParamStore<S>>, ids: (usize, usize)) -> Option<(&mut Array2<S>, &mut Array2<S>)> {
    g.as_mut().map(|st| st.pair_mut(ids.0, ids.1))
}

fn lora_sinks<S>(
    g: &mut Option<Vec<(Array2<S>, Array2<S>)>>,
    pos: Option<usize>,
) -> Option<(&mut Array2<S>, &mut Array2<S>)> {
    match (g.as_mut(), pos) {
        (Some(v), Some(i)) => {
            let (a, b) = &mut v[i];
            Some((a, b))
        }
        _ => None,
    }
}

impl<'a, S: Scalar> Denoiser<'a, S> {
    pub fn new(params: &'a DenoiserParams<S>, lora: Option<&'a LoraSet<S>>) -> Self {
        Self { params, lora }
    }

    pub fn params(&self) -> &'a DenoiserParams<S> {
        self.params
    }

    pub fn lora(&self) -> Option<&'a LoraSet<S>> {
        self.lora
    }

    fn lora_use(&self, site: &str) -> Option<(LoraUse<'a, S>, usize)> {
        let set = self.lora?;
        let pos = set.position(site)?;
        Some((
            LoraUse {
                adapter: &set.adapters()[pos],
                multiplier: set.multiplier(),
            },
            pos,
        ))
    }

    /// Clean-motion prediction for one query.
    pub fn forward(&self, x_t: &MotionSequence<S>, t: usize, cond: &TextCondition<S>) -> Result<MotionSequence<S>> {
        let mut out = self.forward_batch(&[Sample { x_t, t, cond }])?;
        Ok(out.pop().expect("one output per sample"))
    }

    pub fn forward_batch(&self, items: &[Sample<'_, S>]) -> Result<Vec<MotionSequence<S>>> {
        Ok(self.forward_tape(items, None)?.0)
    }

    fn validate(&self, items: &[Sample<'_, S>]) -> Result<usize> {
        let cfg = self.params.config();
        let first = items
            .first()
            .ok_or_else(|| Error::ModelContract("empty batch".into()))?;
        let frames = first.x_t.len();
        if frames > cfg.max_frames {
            return Err(Error::ModelContract(format!(
                "{frames} frames exceed the model's {}",
                cfg.max_frames
            )));
        }
        let f = cfg.channels();
        for it in items {
            if it.x_t.len() != frames {
                return Err(Error::ModelContract("batch items differ in length".into()));
            }
            if it.x_t.channels() != f || it.x_t.layout().joints() != cfg.joints {
                return Err(Error::ModelContract(format!(
                    "motion has {} channels, model expects {f}",
                    it.x_t.channels()
                )));
            }
            if it.t >= cfg.diffusion_steps {
                return Err(Error::ModelContract(format!(
                    "step {} outside schedule of {}",
                    it.t, cfg.diffusion_steps
                )));
            }
            if it.cond.tokens.ncols() != cfg.d_model || it.cond.tokens.nrows() == 0 {
                return Err(Error::ModelContract("text tokens must be non-empty rows of width d_model".into()));
            }
            if it.cond.token_ids.len() != it.cond.tokens.nrows() {
                return Err(Error::ModelContract("token ids do not match token rows".into()));
            }
            if it.cond.prefix.ncols() != f || it.cond.prefix_len() > it.x_t.valid_len() {
                return Err(Error::ModelContract(format!(
                    "prefix of {} frames does not fit {} valid frames",
                    it.cond.prefix_len(),
                    it.x_t.valid_len()
                )));
            }
        }
        Ok(frames)
    }

    /// Forward pass recording everything the backward pass needs. A dropout
    /// generator switches adapter dropout on.
    pub fn forward_tape(
        &self,
        items: &[Sample<'_, S>],
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(Vec<MotionSequence<S>>, Tape<S>)> {
        let frames = self.validate(items)?;
        let p = self.params;
        let cfg = p.config();
        let st = p.store();
        let ids = p.site_ids();
        let d = cfg.d_model;
        let f = cfg.channels();
        let heads = cfg.heads;
        let dh = d / heads;

        let mut meta = Vec::with_capacity(items.len());
        let mut text0 = 0;
        for (b, it) in items.iter().enumerate() {
            let ntext = it.cond.tokens.nrows();
            meta.push(Meta {
                t: it.t,
                np: it.cond.prefix_len(),
                n: it.x_t.valid_len(),
                row0: b * frames,
                text0,
                ntext,
            });
            text0 += ntext;
        }
        let rows = items.len() * frames;

        let n_pre: usize = meta.iter().map(|m| m.np).sum();
        let mut pre_in = Array2::zeros((n_pre, f));
        let mut noisy_in = Array2::zeros((rows - n_pre, f));
        let mut pre_rows = Vec::with_capacity(n_pre);
        let mut noisy_rows = Vec::with_capacity(rows - n_pre);
        for (it, m) in items.iter().zip(&meta) {
            for i in 0..frames {
                if i < m.np {
                    pre_in.row_mut(pre_rows.len()).assign(&it.cond.prefix.row(i));
                    pre_rows.push(m.row0 + i);
                } else {
                    noisy_in.row_mut(noisy_rows.len()).assign(&it.x_t.frames().row(i));
                    noisy_rows.push(m.row0 + i);
                }
            }
        }
        let (e_pre, _) = linear(&pre_in.view(), st.by_id(ids.prefix_in.0), st.by_id(ids.prefix_in.1), None, None);
        let (e_noisy, _) = linear(&noisy_in.view(), st.by_id(ids.motion_in.0), st.by_id(ids.motion_in.1), None, None);
        let mut h = Array2::zeros((rows, d));
        for (k, &r) in pre_rows.iter().enumerate() {
            h.row_mut(r).assign(&e_pre.row(k));
        }
        for (k, &r) in noisy_rows.iter().enumerate() {
            h.row_mut(r).assign(&e_noisy.row(k));
        }
        let pos = st.by_id(ids.pos_embed);
        let time = st.by_id(ids.time_embed);
        for m in &meta {
            let mut block = h.slice_mut(s![m.row0..m.row0 + frames, ..]);
            block += &pos.slice(s![..frames, ..]);
            block += &time.row(m.t);
        }

        let mut text = Array2::zeros((text0, d));
        for (it, m) in items.iter().zip(&meta) {
            text.slice_mut(s![m.text0..m.text0 + m.ntext, ..]).assign(&it.cond.tokens);
        }

        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let li = p.layer_ids(l);
            let w = |id: usize| st.by_id(id);

            let (a1, ln1) = layer_norm(&h, w(li.ln1.0), w(li.ln1.1));
            let (qkv, _) = linear(&a1.view(), w(li.qkv.0), w(li.qkv.1), None, None);
            let mut ctx = Array2::zeros((rows, d));
            let mut sa_probs = Vec::with_capacity(items.len() * heads);
            for m in &meta {
                let (r0, r1, n) = (m.row0, m.row0 + frames, m.row0 + m.n);
                for hd in 0..heads {
                    let c = hd * dh;
                    let q = qkv.slice(s![r0..r1, c..c + dh]);
                    let k = qkv.slice(s![r0..n, d + c..d + c + dh]);
                    let v = qkv.slice(s![r0..n, 2 * d + c..2 * d + c + dh]);
                    let mut out = ctx.slice_mut(s![r0..r1, c..c + dh]);
                    sa_probs.push(attention(&q, &k, &v, &mut out));
                }
            }
            let sa_site = format!("layers.{l}.self_attn.out");
            let sa_use = self.lora_use(&sa_site).map(|x| x.0);
            let (sa, sa_lora) = linear(
                &ctx.view(),
                w(li.sa_out.0),
                w(li.sa_out.1),
                sa_use,
                dropout.as_deref_mut(),
            );
            h += &sa;

            let (a2, ln2) = layer_norm(&h, w(li.ln2.0), w(li.ln2.1));
            let (q2, _) = linear(&a2.view(), w(li.cq.0), w(li.cq.1), None, None);
            let (kv2, _) = linear(&text.view(), w(li.ckv.0), w(li.ckv.1), None, None);
            let mut ctx2 = Array2::zeros((rows, d));
            let mut ca_probs = Vec::with_capacity(items.len() * heads);
            for m in &meta {
                let (r0, r1) = (m.row0, m.row0 + frames);
                let (k0, k1) = (m.text0, m.text0 + m.ntext);
                for hd in 0..heads {
                    let c = hd * dh;
                    let q = q2.slice(s![r0..r1, c..c + dh]);
                    let k = kv2.slice(s![k0..k1, c..c + dh]);
                    let v = kv2.slice(s![k0..k1, d + c..d + c + dh]);
                    let mut out = ctx2.slice_mut(s![r0..r1, c..c + dh]);
                    ca_probs.push(attention(&q, &k, &v, &mut out));
                }
            }
            let (ca, _) = linear(&ctx2.view(), w(li.ca_out.0), w(li.ca_out.1), None, None);
            h += &ca;

            let (a3, ln3) = layer_norm(&h, w(li.ln3.0), w(li.ln3.1));
            let fin_use = self.lora_use(&format!("layers.{l}.ffn.in")).map(|x| x.0);
            let (u, fin_lora) = linear(&a3.view(), w(li.ffn_in.0), w(li.ffn_in.1), fin_use, dropout.as_deref_mut());
            let g = gelu(&u);
            let fout_use = self.lora_use(&format!("layers.{l}.ffn.out")).map(|x| x.0);
            let (ff, fout_lora) = linear(&g.view(), w(li.ffn_out.0), w(li.ffn_out.1), fout_use, dropout.as_deref_mut());
            h += &ff;

            layers.push(LayerTape {
                ln1,
                a1,
                qkv,
                sa_probs,
                ctx,
                sa_lora,
                ln2,
                a2,
                q2,
                kv2,
                ca_probs,
                ctx2,
                ln3,
                a3,
                u,
                g,
                fin_lora,
                fout_lora,
            });
        }

        let (hf, lnf) = layer_norm(&h, st.by_id(ids.ln_f.0), st.by_id(ids.ln_f.1));
        let (y, _) = linear(&hf.view(), st.by_id(ids.head.0), st.by_id(ids.head.1), None, None);

        let layout = p.layout();
        let outputs = items
            .iter()
            .zip(&meta)
            .map(|(it, m)| {
                let mut out = Array2::zeros((frames, f));
                out.slice_mut(s![..m.np, ..]).assign(&it.cond.prefix);
                out.slice_mut(s![m.np..m.n, ..])
                    .assign(&y.slice(s![m.row0 + m.np..m.row0 + m.n, ..]));
                MotionSequence::from_raw(out, m.n, layout.clone())
            })
            .collect();

        let tape = Tape {
            meta,
            frames,
            pre_rows,
            noisy_rows,
            pre_in,
            noisy_in,
            text,
            token_ids: items.iter().map(|it| it.cond.token_ids.clone()).collect(),
            layers,
            lnf,
            hf,
        };
        Ok((outputs, tape))
    }

    /// Accumulates `dL/dθ` into `grads` given `dL/d(output)` per item.
    /// Gradients on prefix and padded output frames are ignored.
    pub fn backward(&self, tape: &Tape<S>, d_out: &[Array2<S>], grads: &mut ModelGrads<S>) -> Result<()> {
        let p = self.params;
        let cfg = p.config();
        let st = p.store();
        let ids = p.site_ids();
        let d = cfg.d_model;
        let f = cfg.channels();
        let heads = cfg.heads;
        let dh = d / heads;
        let frames = tape.frames;
        if d_out.len() != tape.meta.len() {
            return Err(Error::ModelContract("one output gradient per item required".into()));
        }
        let rows = tape.meta.len() * frames;
        let mut dy = Array2::zeros((rows, f));
        for (g, m) in d_out.iter().zip(&tape.meta) {
            if g.dim() != (frames, f) {
                return Err(Error::ModelContract("output gradient shape mismatch".into()));
            }
            dy.slice_mut(s![m.row0 + m.np..m.row0 + m.n, ..])
                .assign(&g.slice(s![m.np..m.n, ..]));
        }
        let text_grads = grads.params.is_some();

        let dhf = linear_backward(
            &tape.hf.view(),
            st.by_id(ids.head.0),
            &dy,
            None,
            LinearGrads {
                w: sinks(&mut grads.params, ids.head),
                lora: None,
            },
            true,
        )
        .expect("dx requested");
        let mut dh_acc = layer_norm_backward(&dhf, st.by_id(ids.ln_f.0), &tape.lnf, sinks(&mut grads.params, ids.ln_f));
        let mut dtext = Array2::<S>::zeros(tape.text.dim());

        for (l, lt) in tape.layers.iter().enumerate().rev() {
            let li = p.layer_ids(l);
            let w = |id: usize| st.by_id(id);

            // Feed-forward block.
            let fout = self.lora_use(&format!("layers.{l}.ffn.out"));
            let dg = linear_backward(
                &lt.g.view(),
                w(li.ffn_out.0),
                &dh_acc,
                fout.map(|(u, _)| (u, lt.fout_lora.as_ref().expect("tape has adapter"))),
                LinearGrads {
                    w: sinks(&mut grads.params, li.ffn_out),
                    lora: lora_sinks(&mut grads.lora, fout.map(|x| x.1)),
                },
                true,
            )
            .expect("dx requested");
            let du = gelu_backward(&lt.u, &dg);
            let fin = self.lora_use(&format!("layers.{l}.ffn.in"));
            let da3 = linear_backward(
                &lt.a3.view(),
                w(li.ffn_in.0),
                &du,
                fin.map(|(u, _)| (u, lt.fin_lora.as_ref().expect("tape has adapter"))),
                LinearGrads {
                    w: sinks(&mut grads.params, li.ffn_in),
                    lora: lora_sinks(&mut grads.lora, fin.map(|x| x.1)),
                },
                true,
            )
            .expect("dx requested");
            dh_acc += &layer_norm_backward(&da3, w(li.ln3.0), &lt.ln3, sinks(&mut grads.params, li.ln3));

            // Cross-attention block.
            let dctx2 = linear_backward(
                &lt.ctx2.view(),
                w(li.ca_out.0),
                &dh_acc,
                None,
                LinearGrads {
                    w: sinks(&mut grads.params, li.ca_out),
                    lora: None,
                },
                true,
            )
            .expect("dx requested");
            let mut dq2 = Array2::zeros((rows, d));
            let mut dkv2 = Array2::zeros(lt.kv2.dim());
            let mut probs = lt.ca_probs.iter();
            for m in &tape.meta {
                let (r0, r1) = (m.row0, m.row0 + frames);
                let (k0, k1) = (m.text0, m.text0 + m.ntext);
                for hd in 0..heads {
                    let c = hd * dh;
                    let pr = probs.next().expect("one probability block per head");
                    let (mut dk_all, mut dv_all) = dkv2.multi_slice_mut((
                        s![k0..k1, c..c + dh],
                        s![k0..k1, d + c..d + c + dh],
                    ));
                    attention_backward(
                        &lt.q2.slice(s![r0..r1, c..c + dh]),
                        &lt.kv2.slice(s![k0..k1, c..c + dh]),
                        &lt.kv2.slice(s![k0..k1, d + c..d + c + dh]),
                        pr,
                        &dctx2.slice(s![r0..r1, c..c + dh]),
                        &mut dq2.slice_mut(s![r0..r1, c..c + dh]),
                        &mut dk_all,
                        &mut dv_all,
                    );
                }
            }
            let da2 = linear_backward(
                &lt.a2.view(),
                w(li.cq.0),
                &dq2,
                None,
                LinearGrads {
                    w: sinks(&mut grads.params, li.cq),
                    lora: None,
                },
                true,
            )
            .expect("dx requested");
            if let Some(dt) = linear_backward(
                &tape.text.view(),
                w(li.ckv.0),
                &dkv2,
                None,
                LinearGrads {
                    w: sinks(&mut grads.params, li.ckv),
                    lora: None,
                },
                text_grads,
            ) {
                dtext += &dt;
            }
            dh_acc += &layer_norm_backward(&da2, w(li.ln2.0), &lt.ln2, sinks(&mut grads.params, li.ln2));

            // Self-attention block.
            let sa = self.lora_use(&format!("layers.{l}.self_attn.out"));
            let dctx = linear_backward(
                &lt.ctx.view(),
                w(li.sa_out.0),
                &dh_acc,
                sa.map(|(u, _)| (u, lt.sa_lora.as_ref().expect("tape has adapter"))),
                LinearGrads {
                    w: sinks(&mut grads.params, li.sa_out),
                    lora: lora_sinks(&mut grads.lora, sa.map(|x| x.1)),
                },
                true,
            )
            .expect("dx requested");
            let mut dqkv = Array2::zeros((rows, 3 * d));
            let mut probs = lt.sa_probs.iter();
            for m in &tape.meta {
                let (r0, r1, n) = (m.row0, m.row0 + frames, m.row0 + m.n);
                for hd in 0..heads {
                    let c = hd * dh;
                    let pr = probs.next().expect("one probability block per head");
                    let (mut dq, mut dk, mut dv) = dqkv.multi_slice_mut((
                        s![r0..r1, c..c + dh],
                        s![r0..n, d + c..d + c + dh],
                        s![r0..n, 2 * d + c..2 * d + c + dh],
                    ));
                    attention_backward(
                        &lt.qkv.slice(s![r0..r1, c..c + dh]),
                        &lt.qkv.slice(s![r0..n, d + c..d + c + dh]),
                        &lt.qkv.slice(s![r0..n, 2 * d + c..2 * d + c + dh]),
                        pr,
                        &dctx.slice(s![r0..r1, c..c + dh]),
                        &mut dq,
                        &mut dk,
                        &mut dv,
                    );
                }
            }
            let da1 = linear_backward(
                &lt.a1.view(),
                w(li.qkv.0),
                &dqkv,
                None,
                LinearGrads {
                    w: sinks(&mut grads.params, li.qkv),
                    lora: None,
                },
                true,
            )
            .expect("dx requested");
            dh_acc += &layer_norm_backward(&da1, w(li.ln1.0), &lt.ln1, sinks(&mut grads.params, li.ln1));
        }

        let Some(gp) = grads.params.as_mut() else {
            return Ok(());
        };
        {
            let gpos = gp.by_id_mut(ids.pos_embed);
            for m in &tape.meta {
                let mut block = gpos.slice_mut(s![..frames, ..]);
                block += &dh_acc.slice(s![m.row0..m.row0 + frames, ..]);
            }
        }
        {
            let gtime = gp.by_id_mut(ids.time_embed);
            for m in &tape.meta {
                let mut row = gtime.row_mut(m.t);
                row += &dh_acc.slice(s![m.row0..m.row0 + frames, ..]).sum_axis(Axis(0));
            }
        }
        let gather = |rows_: &[usize]| {
            let mut out = Array2::zeros((rows_.len(), d));
            for (k, &r) in rows_.iter().enumerate() {
                out.row_mut(k).assign(&dh_acc.row(r));
            }
            out
        };
        let de_pre = gather(&tape.pre_rows);
        let de_noisy = gather(&tape.noisy_rows);
        linear_backward(
            &tape.pre_in.view(),
            st.by_id(ids.prefix_in.0),
            &de_pre,
            None,
            LinearGrads {
                w: Some(gp.pair_mut(ids.prefix_in.0, ids.prefix_in.1)),
                lora: None,
            },
            false,
        );
        linear_backward(
            &tape.noisy_in.view(),
            st.by_id(ids.motion_in.0),
            &de_noisy,
            None,
            LinearGrads {
                w: Some(gp.pair_mut(ids.motion_in.0, ids.motion_in.1)),
                lora: None,
            },
            false,
        );

        // Text tokens: projection, then the embedding table.
        let table = st.by_id(ids.tok_embed);
        let w_tp = st.by_id(ids.text_proj.0);
        for (m, tok) in tape.meta.iter().zip(&tape.token_ids) {
            let dt = dtext.slice(s![m.text0..m.text0 + m.ntext, ..]).to_owned();
            let mut emb = Array2::zeros((tok.len(), cfg.token_dim));
            for (k, &id) in tok.iter().enumerate() {
                emb.row_mut(k).assign(&table.row(id));
            }
            linear_backward(
                &emb.view(),
                w_tp,
                &dt,
                None,
                LinearGrads {
                    w: Some(gp.pair_mut(ids.text_proj.0, ids.text_proj.1)),
                    lora: None,
                },
                false,
            );
            let demb = dt.dot(w_tp);
            let gtab = gp.by_id_mut(ids.tok_embed);
            for (k, &id) in tok.iter().enumerate() {
                let mut row = gtab.row_mut(id);
                row += &demb.row(k);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{attach_adapters, LoraConfig};
    use crate::model::{randn, ModelConfig};
    use crate::seed;

    struct Fixture {
        params: DenoiserParams<f64>,
        xs: Vec<MotionSequence<f64>>,
        conds: Vec<TextCondition<f64>>,
        ts: Vec<usize>,
        weights: Vec<Array2<f64>>,
    }

    fn fixture() -> Fixture {
        let mut cfg = ModelConfig::tiny();
        cfg.layers = 2;
        let params = DenoiserParams::<f64>::init(cfg.clone(), 5).unwrap();
        let layout = params.layout();
        let f = layout.channels();
        let mut rng = seed::rng(9);
        let mut xs = Vec::new();
        let mut conds = Vec::new();
        let mut weights = Vec::new();
        for (valid, np, cap) in [(8, 3, "a man kicks"), (6, 2, "someone waves slowly with the hand")] {
            let frames: Array2<f64> = randn(&mut rng, 8, f, 1.0);
            let x = MotionSequence::new(frames, valid, layout.clone()).unwrap();
            let c = params.condition(cap, &x, np).unwrap();
            weights.push(randn(&mut rng, 8, f, 1.0));
            xs.push(x);
            conds.push(c);
        }
        Fixture {
            params,
            xs,
            conds,
            ts: vec![1, 3],
            weights,
        }
    }

    fn objective(den: &Denoiser<'_, f64>, fx: &Fixture) -> f64 {
        let items: Vec<_> = fx
            .xs
            .iter()
            .zip(&fx.conds)
            .zip(&fx.ts)
            .map(|((x, c), &t)| Sample { x_t: x, t, cond: c })
            .collect();
        let outs = den.forward_batch(&items).unwrap();
        outs.iter()
            .zip(&fx.weights)
            .map(|(o, w)| (o.frames() * w).sum())
            .sum()
    }

    fn conds_for(params: &DenoiserParams<f64>, fx: &Fixture) -> Vec<TextCondition<f64>> {
        fx.conds
            .iter()
            .map(|c| {
                let mut c2 = c.clone();
                c2.tokens = params.embed_ids(&c.token_ids).unwrap();
                c2
            })
            .collect()
    }

    #[test]
    fn backbone_gradients_match_finite_differences() {
        let fx = fixture();
        let den = Denoiser::new(&fx.params, None);
        let items: Vec<_> = fx
            .xs
            .iter()
            .zip(&fx.conds)
            .zip(&fx.ts)
            .map(|((x, c), &t)| Sample { x_t: x, t, cond: c })
            .collect();
        let (_, tape) = den.forward_tape(&items, None).unwrap();
        let mut grads = ModelGrads::new(&fx.params, None, true, false);
        den.backward(&tape, &fx.weights, &mut grads).unwrap();
        let g = grads.params.unwrap();
        let h = 1e-5;
        let mut rng = seed::rng(1);
        for (name, value) in fx.params.store().iter() {
            for _ in 0..4 {
                let idx = rand::Rng::random_range(&mut rng, 0..value.len());
                let eval = |delta: f64| {
                    let mut p = fx.params.clone();
                    p.store_mut().get_mut(name).unwrap().as_slice_mut().unwrap()[idx] += delta;
                    let mut fx2 = fixture();
                    fx2.conds = conds_for(&p, &fx);
                    objective(&Denoiser::new(&p, None), &fx2)
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let ana = g.get(name).unwrap().as_slice().unwrap()[idx];
                assert!(
                    (num - ana).abs() <= 1e-6 * (1.0 + num.abs()),
                    "{name}[{idx}]: numeric {num} analytic {ana}"
                );
            }
        }
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        let fx = fixture();
        let mut lora = attach_adapters(&fx.params, &LoraConfig { rank: 2, alpha: 3.0, dropout: 0.0 }, 4).unwrap();
        let mut rng = seed::rng(2);
        for a in lora.adapters_mut() {
            a.b = randn(&mut rng, a.b.nrows(), a.b.ncols(), 0.3);
        }
        let lora = lora.scaled(-0.7);
        let den = Denoiser::new(&fx.params, Some(&lora));
        let items: Vec<_> = fx
            .xs
            .iter()
            .zip(&fx.conds)
            .zip(&fx.ts)
            .map(|((x, c), &t)| Sample { x_t: x, t, cond: c })
            .collect();
        let (_, tape) = den.forward_tape(&items, None).unwrap();
        let mut grads = ModelGrads::new(&fx.params, Some(&lora), false, true);
        den.backward(&tape, &fx.weights, &mut grads).unwrap();
        let g = grads.lora.unwrap();
        let h = 1e-5;
        for (k, adapter) in lora.adapters().iter().enumerate() {
            for which in 0..2 {
                let len = if which == 0 { adapter.a.len() } else { adapter.b.len() };
                for idx in [0, len / 2, len - 1] {
                    let eval = |delta: f64| {
                        let mut l2 = lora.clone();
                        let ad = &mut l2.adapters_mut()[k];
                        let arr = if which == 0 { &mut ad.a } else { &mut ad.b };
                        arr.as_slice_mut().unwrap()[idx] += delta;
                        objective(&Denoiser::new(&fx.params, Some(&l2)), &fx)
                    };
                    let num = (eval(h) - eval(-h)) / (2.0 * h);
                    let ana = if which == 0 { &g[k].0 } else { &g[k].1 }.as_slice().unwrap()[idx];
                    assert!(
                        (num - ana).abs() <= 1e-6 * (1.0 + num.abs()),
                        "{} {which}[{idx}]: numeric {num} analytic {ana}",
                        adapter.site
                    );
                }
            }
        }
    }

    #[test]
    fn padded_frames_do_not_leak_and_prefix_is_copied() {
        let fx = fixture();
        let den = Denoiser::new(&fx.params, None);
        let x = &fx.xs[1];
        let c = &fx.conds[1];
        let base = den.forward(x, 2, c).unwrap();
        let mut frames = x.frames().clone();
        for t in x.valid_len()..x.len() {
            frames.row_mut(t).fill(1e3);
        }
        let perturbed = MotionSequence::new(frames, x.valid_len(), x.layout().clone()).unwrap();
        let out = den.forward(&perturbed, 2, c).unwrap();
        assert_eq!(out.valid_frames(), base.valid_frames());
        assert_eq!(out.mask(), x.mask());
        assert_eq!(out.frames().slice(s![..2, ..]), c.prefix);
        // Changing a frame after the prefix never moves the prefix rows.
        let mut frames = x.frames().clone();
        frames.row_mut(4).fill(-3.0);
        let moved = den.forward(&x.with_frames(frames).unwrap(), 2, c).unwrap();
        assert_eq!(moved.frames().slice(s![..2, ..]), base.frames().slice(s![..2, ..]));
        assert_ne!(moved.frames().row(3), base.frames().row(3));
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let fx = fixture();
        let den = Denoiser::new(&fx.params, None);
        assert!(matches!(den.forward(&fx.xs[0], 99, &fx.conds[0]), Err(Error::ModelContract(_))));
        let mut c = fx.conds[0].clone();
        c.prefix = Array2::zeros((9, fx.xs[0].channels()));
        assert!(den.forward(&fx.xs[0], 0, &c).is_err());
    }
}
