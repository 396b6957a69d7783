//! Acceptance suite. Prints one `criterion N: PASS|FAIL` line per criterion
//! and exits nonzero if any fails. Pass criterion numbers as arguments to run
//! a subset, e.g. `cargo test --test acceptance -- 1 2 6`.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::{s, Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use unlearn_core::eval::{diversity, fid, paired_distance, r_precision, GaussianStats};
use unlearn_core::lora::{attach_adapters, extract_task_vector, negate, LoraSet, NegationPolicy, TaskVector, ALPHA_SWEEP};
use unlearn_core::losses::{self, LossWeights, EPS};
use unlearn_core::model::{
    sample, DiffusionSchedule, Denoiser, DenoiserParams, ModelConfig, SampleRequest, GEN_LEN, PREFIX_LEN,
};
use unlearn_core::motion::{synth_corpus, Family, MotionSequence, PoseLayout};
use unlearn_core::pipeline::{generate, mean_reconstruction, train_base, BaseConfig, Generator};
use unlearn_core::safety::{classify, partition, Classifier, LemmaList};
use unlearn_core::seed;
use unlearn_core::unlearn::{absorb, negate_and_sample, Stage1Config};
use unlearn_core::{CorpusEntry, ToxicityLevel};

const T: usize = 8;
const J: usize = 4;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

fn layout() -> PoseLayout {
    PoseLayout::new(J).unwrap()
}

fn motion(frames: Array2<f64>, valid: usize) -> MotionSequence<f64> {
    MotionSequence::new(frames, valid, layout()).unwrap()
}

/// Prediction/target pair with `5..=8` valid frames out of 8.
fn pair(rng: &mut ChaCha8Rng) -> (MotionSequence<f64>, MotionSequence<f64>) {
    let f = layout().channels();
    let n = rng.random_range(5..=T);
    (motion(randn(rng, T, f), n), motion(randn(rng, T, f), n))
}

/// Foot channels of a 4-joint skeleton: root translation stands in for joint 0.
fn foot_channels() -> Vec<usize> {
    let mut c = vec![1, 3, 2];
    c.extend(4..13);
    c
}

/// Motion whose foot channels move by at least 0.1 per frame, away from the
/// kink of the absolute value.
fn foot_motion(rng: &mut ChaCha8Rng) -> MotionSequence<f64> {
    let (mut x, _) = pair(rng);
    let n = x.valid_len();
    let frames = x.frames_mut();
    for c in foot_channels() {
        for t in 1..T {
            let step = 0.1 + rng.random::<f64>();
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            frames[[t, c]] = frames[[t - 1, c]] + sign * step;
        }
    }
    motion(frames.clone(), n)
}

/// Smallest DFT bin magnitude of the order-`order` residual over the valid span.
fn min_bin(p: &MotionSequence<f64>, q: &MotionSequence<f64>, order: usize) -> f64 {
    let n = p.valid_len();
    let mut r = (p.frames() - q.frames()).slice(s![..n, ..]).to_owned();
    for _ in 0..order {
        let m = r.nrows();
        r = &r.slice(s![1.., ..]) - &r.slice(s![..m - 1, ..]);
    }
    let (l, c) = r.dim();
    let mut least = f64::INFINITY;
    for ch in 0..c {
        for k in 0..l / 2 + 1 {
            let (mut re, mut im) = (0.0, 0.0);
            for t in 0..l {
                let ang = 2.0 * PI * (k * t) as f64 / l as f64;
                re += r[[t, ch]] * ang.cos();
                im -= r[[t, ch]] * ang.sin();
            }
            least = least.min((re * re + im * im).sqrt());
        }
    }
    least
}

/// Pair whose velocity and acceleration spectra have no bin within 0.05 of
/// zero, where the magnitude is not differentiable.
fn smooth_pair(rng: &mut ChaCha8Rng) -> (MotionSequence<f64>, MotionSequence<f64>) {
    loop {
        let (p, q) = pair(rng);
        if min_bin(&p, &q, 1) >= 0.05 && min_bin(&p, &q, 2) >= 0.05 {
            return (p, q);
        }
    }
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    max_abs(&diff) / max_abs(numeric).max(1e-12)
}

/// Central differences of `f` over every entry of `x`.
fn numeric_grad(x: &Array2<f64>, h: f64, mut f: impl FnMut(&Array2<f64>) -> f64) -> Vec<f64> {
    let mut work = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            let v = work[[i, j]];
            work[[i, j]] = v + h;
            let up = f(&work);
            work[[i, j]] = v - h;
            let down = f(&work);
            work[[i, j]] = v;
            out.push((up - down) / (2.0 * h));
        }
    }
    out
}

fn frames_of(x: &MotionSequence<f64>, frames: &Array2<f64>) -> MotionSequence<f64> {
    x.with_frames(frames.clone()).unwrap()
}

fn criterion_1() -> Outcome {
    const H: f64 = 1e-3;
    let started = Instant::now();
    let mut rng = seed::rng(101);
    let mut worst = [0.0f64; 6];
    for _ in 0..100 {
        let (p, q) = smooth_pair(&mut rng);
        let checks: [(usize, &dyn Fn(&MotionSequence<f64>) -> (f64, Array2<f64>)); 3] = [
            (0, &|x| losses::mpjpe_grad(x, &q, EPS).unwrap()),
            (1, &|x| losses::vel_loss_grad(x, &q, EPS).unwrap()),
            (2, &|x| losses::acc_loss_grad(x, &q, EPS).unwrap()),
        ];
        for (slot, f) in checks {
            let (_, g) = f(&p);
            let num = numeric_grad(p.frames(), H, |fr| f(&frames_of(&p, fr)).0);
            worst[slot] = worst[slot].max(rel_err(g.as_slice().unwrap(), &num));
        }

        let foot = foot_motion(&mut rng);
        let (_, g) = losses::foot_loss_grad(&foot, EPS).unwrap();
        let num = numeric_grad(foot.frames(), H, |fr| losses::foot_loss(&frames_of(&foot, fr), EPS).unwrap());
        worst[3] = worst[3].max(rel_err(g.as_slice().unwrap(), &num));

        let b = rng.random_range(2..=8);
        let (et, em) = (randn(&mut rng, b, 16) * 0.3, randn(&mut rng, b, 16) * 0.3);
        let (_, gt, gm) = losses::text_motion_loss_grad(&et, &em, 0.07).unwrap();
        let mut num = numeric_grad(&et, H, |e| losses::text_motion_loss(e, &em, 0.07).unwrap());
        num.extend(numeric_grad(&em, H, |e| losses::text_motion_loss(&et, e, 0.07).unwrap()));
        let mut ana: Vec<f64> = gt.iter().copied().collect();
        ana.extend(gm.iter());
        worst[4] = worst[4].max(rel_err(&ana, &num));

        let d = layout().channels();
        let z: Vec<Array1<f64>> = (0..4).map(|_| randn(&mut rng, 1, d).row(0).to_owned()).collect();
        let gamma: f64 = rng.random();
        let pd = losses::pres_divergence_grad(&z[0], &z[1], &z[2], &z[3], gamma).unwrap();
        let as_row = |v: &Array1<f64>| v.clone().insert_axis(ndarray::Axis(0));
        let mut num = numeric_grad(&as_row(&z[0]), H, |c| {
            losses::pres_divergence(&c.row(0).to_owned(), &z[1], &z[2], &z[3], gamma).unwrap()
        });
        num.extend(numeric_grad(&as_row(&z[2]), H, |c| {
            losses::pres_divergence(&z[0], &z[1], &c.row(0).to_owned(), &z[3], gamma).unwrap()
        }));
        let mut ana = pd.grad_cur.to_vec();
        ana.extend(pd.grad_cur_dec.iter());
        worst[5] = worst[5].max(rel_err(&ana, &num));
    }
    let elapsed = started.elapsed();
    let names = ["mpjpe", "vel", "acc", "foot", "text", "pres"];
    let detail = names
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(
        worst.iter().all(|w| *w <= 1e-4) && elapsed <= Duration::from_secs(120),
        format!("max relative error {detail}; {:.1}s", elapsed.as_secs_f64()),
    )
}

/// Direct DFT magnitude sum: mean over `K = L/2 + 1` bins and all channels of
/// `|X_k| * ln(1 + 9k/(K-1))`.
fn dft_emphasis(r: &Array2<f64>) -> f64 {
    let (l, c) = r.dim();
    let k_bins = l / 2 + 1;
    if k_bins <= 1 {
        return 0.0;
    }
    let mut total = 0.0;
    for ch in 0..c {
        for k in 0..k_bins {
            let (mut re, mut im) = (0.0, 0.0);
            for t in 0..l {
                let ang = 2.0 * PI * (k * t) as f64 / l as f64;
                re += r[[t, ch]] * ang.cos();
                im -= r[[t, ch]] * ang.sin();
            }
            let w = (1.0 + 9.0 * k as f64 / (k_bins - 1) as f64).ln();
            total += w * (re * re + im * im).sqrt();
        }
    }
    total / (k_bins * c) as f64
}

fn naive_mpjpe(p: &MotionSequence<f64>, q: &MotionSequence<f64>) -> f64 {
    let n = p.valid_len();
    let mut total = 0.0;
    for t in 0..n {
        let mut sq = 0.0;
        for c in 4..4 + 3 * (J - 1) {
            let d = p.frames()[[t, c]] - q.frames()[[t, c]];
            sq += d * d;
        }
        total += sq.sqrt();
    }
    total / (n as f64 + EPS)
}

fn naive_difference(p: &MotionSequence<f64>, q: &MotionSequence<f64>, order: usize) -> f64 {
    let n = p.valid_len();
    let f = p.channels();
    let mut r = vec![vec![0.0; f]; n];
    for t in 0..n {
        for c in 0..f {
            r[t][c] = p.frames()[[t, c]] - q.frames()[[t, c]];
        }
    }
    for _ in 0..order {
        let mut next = Vec::new();
        for t in 1..r.len() {
            next.push((0..f).map(|c| r[t][c] - r[t - 1][c]).collect::<Vec<_>>());
        }
        r = next;
    }
    let mut norms = 0.0;
    for row in &r {
        norms += row.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    let mat = Array2::from_shape_fn((r.len(), f), |(t, c)| r[t][c]);
    norms / (r.len() as f64 + EPS) + dft_emphasis(&mat)
}

fn naive_foot(p: &MotionSequence<f64>) -> f64 {
    let n = p.valid_len();
    let ch = foot_channels();
    let mut total = 0.0;
    for t in 1..n {
        let mut step = 0.0;
        for &c in &ch {
            step += (p.frames()[[t, c]] - p.frames()[[t - 1, c]]).abs();
        }
        total += step / ch.len() as f64;
    }
    total / ((n - 1) as f64 + EPS)
}

fn criterion_2() -> Outcome {
    let mut rng = seed::rng(202);
    let mut worst = [0.0f64; 5];
    for _ in 0..100 {
        let (p, q) = pair(&mut rng);
        let errs = [
            (losses::mpjpe(&p, &q, EPS).unwrap() - naive_mpjpe(&p, &q)).abs(),
            (losses::vel_loss(&p, &q, EPS).unwrap() - naive_difference(&p, &q, 1)).abs(),
            (losses::acc_loss(&p, &q, EPS).unwrap() - naive_difference(&p, &q, 2)).abs(),
            (losses::foot_loss(&p, EPS).unwrap() - naive_foot(&p)).abs(),
        ];
        for (w, e) in worst.iter_mut().zip(errs) {
            *w = w.max(e);
        }
        let l = rng.random_range(1..=T);
        let r = randn(&mut rng, l, 7);
        let (spec, _) = losses::spectral_emphasis(&r.view());
        worst[4] = worst[4].max((spec - dft_emphasis(&r)).abs());
    }
    let names = ["mpjpe", "vel", "acc", "foot", "spectral"];
    let detail = names
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(worst.iter().all(|w| *w <= 1e-6), format!("max abs error {detail}"))
}

fn perturb_padding(x: &MotionSequence<f64>, rng: &mut ChaCha8Rng) -> MotionSequence<f64> {
    let mut frames = x.frames().clone();
    let n = x.valid_len();
    let rows = frames.nrows();
    frames.slice_mut(s![n.., ..]).assign(&(randn(rng, rows - n, x.channels()) * 50.0));
    x.with_frames(frames).unwrap()
}

fn bits(a: &Array2<f64>) -> Vec<u64> {
    a.iter().map(|v| v.to_bits()).collect()
}

fn criterion_3() -> Outcome {
    let mut rng = seed::rng(303);
    let params = DenoiserParams::<f64>::init(ModelConfig::tiny(), 3).unwrap();
    let den = Denoiser::new(&params, None);
    let w = LossWeights::default();
    let mut broken = Vec::new();
    for i in 0..50 {
        let (p, q) = pair(&mut rng);
        let (p2, q2) = (perturb_padding(&p, &mut rng), perturb_padding(&q, &mut rng));
        type Term = fn(&MotionSequence<f64>, &MotionSequence<f64>) -> (f64, Array2<f64>);
        let terms: [(&str, Term); 4] = [
            ("mpjpe", |a, b| losses::mpjpe_grad(a, b, EPS).unwrap()),
            ("vel", |a, b| losses::vel_loss_grad(a, b, EPS).unwrap()),
            ("acc", |a, b| losses::acc_loss_grad(a, b, EPS).unwrap()),
            ("foot", |a, _| losses::foot_loss_grad(a, EPS).unwrap()),
        ];
        for (name, term) in terms {
            let (v1, g1) = term(&p, &q);
            let (v2, g2) = term(&p2, &q2);
            if v1.to_bits() != v2.to_bits() || bits(&g1) != bits(&g2) {
                broken.push(format!("{name}#{i}"));
            }
        }
        if bits(&losses::pool(&p, w.eps).insert_axis(ndarray::Axis(0)))
            != bits(&losses::pool(&p2, w.eps).insert_axis(ndarray::Axis(0)))
        {
            broken.push(format!("pool#{i}"));
        }

        let frames = params.config().max_frames;
        let n = rng.random_range(4..frames);
        let np = rng.random_range(1..=3);
        let x = MotionSequence::new(randn(&mut rng, frames, params.layout().channels()), n, params.layout()).unwrap();
        let x2 = x.with_frames({
            let mut f = x.frames().clone();
            f.slice_mut(s![n.., ..]).assign(&(randn(&mut rng, frames - n, x.channels()) * 50.0));
            f
        })
        .unwrap();
        let cond = params.condition("a person kicks then walks", &x, np).unwrap();
        let t = rng.random_range(0..params.config().diffusion_steps);
        let y1 = den.forward(&x, t, &cond).unwrap();
        let y2 = den.forward(&x2, t, &cond).unwrap();
        if bits(&y1.valid_frames().to_owned()) != bits(&y2.valid_frames().to_owned()) {
            broken.push(format!("forward#{i}"));
        }
    }
    outcome(
        broken.is_empty(),
        if broken.is_empty() {
            "50 fixtures, losses, gradients, pooling and forward bit-identical".to_string()
        } else {
            format!("changed: {}", broken.join(" "))
        },
    )
}

fn random_adapters<S: unlearn_core::Scalar>(params: &DenoiserParams<S>, seed_: u64, scale: f64) -> LoraSet<S> {
    let mut set = attach_adapters(params, &Default::default(), seed_).unwrap();
    let mut rng = seed::child_rng(seed_, "acceptance.b");
    for a in set.adapters_mut() {
        a.b = a.b.mapv(|_| S::lit(rng.sample::<f64, _>(StandardNormal) * scale));
    }
    set
}

fn criterion_4() -> Outcome {
    let corpus = synth_corpus::<f32>(4, 5).unwrap();
    let params = DenoiserParams::<f32>::init(ModelConfig::toy(), 4).unwrap();
    let tv = extract_task_vector(&random_adapters(&params, 4, 0.2));
    let schedule = DiffusionSchedule::cosine(params.config().diffusion_steps).unwrap();
    let base = Denoiser::new(&params, None);
    let rules = Classifier::Rules(LemmaList::default_list());
    let zeroed = negate(&params, &tv, 0.0).unwrap();
    let policies = [
        NegationPolicy::Static { alpha: 0.0 },
        NegationPolicy::Gated {
            alpha_safe: 0.0,
            alpha_unsafe: 0.0,
        },
    ];
    let mut mismatches = 0;
    for (i, e) in corpus.iter().take(20).enumerate() {
        let cond = params.condition(&e.caption, &e.motion, PREFIX_LEN).unwrap();
        let req = SampleRequest {
            cond: &cond,
            gen_len: GEN_LEN,
            seed: seed::derive_indexed(4, "acceptance.prompt", i as u64),
        };
        let level = classify(&e.caption, &rules).unwrap().level;
        let reference = sample(&base, &schedule, &req).unwrap();
        let mut outs = vec![sample(&Denoiser::new(&zeroed, None), &schedule, &req).unwrap()];
        for p in &policies {
            outs.push(negate_and_sample(&params, &tv, p, &schedule, &req, level).unwrap());
        }
        let rb: Vec<u32> = reference.frames().iter().map(|v| v.to_bits()).collect();
        for o in outs {
            if o.frames().iter().map(|v| v.to_bits()).collect::<Vec<_>>() != rb {
                mismatches += 1;
            }
        }
    }
    outcome(
        mismatches == 0 && zeroed == params,
        format!("20 prompts x 3 routes, {mismatches} mismatches"),
    )
}

fn criterion_5() -> Outcome {
    let params = DenoiserParams::<f64>::init(ModelConfig::toy(), 5).unwrap();
    let adapters = random_adapters(&params, 5, 0.3);
    let tv: TaskVector<f64> = extract_task_vector(&adapters);
    let mut rng = seed::rng(505);
    let layout = params.layout();
    let frames = params.config().max_frames;
    let mut worst: f64 = 0.0;
    for alpha in [0.05, 1.0, 2.0] {
        let merged = negate(&params, &tv, alpha).unwrap();
        let with_merge = Denoiser::new(&merged, None);
        let scaled = adapters.scaled(-alpha);
        let with_adapters = Denoiser::new(&params, Some(&scaled));
        for _ in 0..5 {
            let n = rng.random_range(PREFIX_LEN + 1..=frames);
            let x = MotionSequence::new(randn(&mut rng, frames, layout.channels()), n, layout.clone()).unwrap();
            let cond = params.condition("a man punches someone with his right fist", &x, PREFIX_LEN).unwrap();
            let t = rng.random_range(0..params.config().diffusion_steps);
            let a = with_merge.forward(&x, t, &cond).unwrap();
            let b = with_adapters.forward(&x, t, &cond).unwrap();
            worst = worst.max((a.frames() - b.frames()).iter().fold(0.0, |m, v| m.max(v.abs())));
        }
    }
    outcome(worst <= 1e-5, format!("max abs difference {worst:.2e}"))
}

fn criterion_6() -> Outcome {
    let mut rng = seed::rng(606);
    let feats = randn(&mut rng, 200, 6);
    let other = randn(&mut rng, 150, 6) * 1.5 + 0.3;
    let a = GaussianStats::fit(&feats).unwrap();
    let b = GaussianStats::fit(&other).unwrap();
    let self_fid = fid(&a, &a).unwrap();
    let asym = (fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs();

    let eye2 = vec![1.0, 0.0, 0.0, 1.0];
    let shift = fid(
        &GaussianStats::new(vec![0.0, 0.0], eye2.clone()).unwrap(),
        &GaussianStats::new(vec![2.0, 0.0], eye2.clone()).unwrap(),
    )
    .unwrap();
    let scale = fid(
        &GaussianStats::new(vec![0.0, 0.0], vec![4.0, 0.0, 0.0, 4.0]).unwrap(),
        &GaussianStats::new(vec![0.0, 0.0], eye2).unwrap(),
    )
    .unwrap();

    let text = randn(&mut rng, 64, 8);
    let oracle = r_precision(&text, &text, 1, 6).unwrap();
    let queries = 1000;
    let chance = r_precision(&randn(&mut rng, queries, 8), &randn(&mut rng, queries, 8), 1, 6).unwrap();
    let p = 1.0 / 32.0;
    let half = 1.96 * (p * (1.0 - p) / queries as f64).sqrt();
    let dup = paired_distance(&feats, &feats).unwrap();
    let div = diversity(&feats, 100, 6).unwrap();

    let pass = self_fid <= 1e-6
        && asym <= 1e-6
        && (shift - 4.0).abs() <= 1e-6
        && (scale - 2.0).abs() <= 1e-6
        && oracle == 1.0
        && (chance - p).abs() <= half
        && dup == 0.0
        && div > 0.0;
    outcome(
        pass,
        format!(
            "fid(a,a) {self_fid:.1e}, asymmetry {asym:.1e}, shift {shift:.9}, scale {scale:.9}, \
             oracle R@1 {oracle}, chance R@1 {chance:.4} in [{:.4}, {:.4}], duplicated halves {dup}",
            p - half,
            p + half
        ),
    )
}

/// Reconstruction errors for one trained pipeline.
struct SeedRun {
    seed: u64,
    base_unsafe: f64,
    base_safe: f64,
    gated_unsafe: f64,
    gated_safe: f64,
    sweep_unsafe: Vec<f64>,
    sweep_safe: Vec<f64>,
    no_dec_unsafe: f64,
    ablations: Vec<(&'static str, TaskVector<f32>)>,
    seconds: f64,
}

fn recon(
    base: &DenoiserParams<f32>,
    gen: Generator<'_, f32>,
    entries: &[&CorpusEntry<f32>],
    rules: &Classifier,
    seed_: u64,
) -> f64 {
    let out = generate(base, gen, entries, rules, PREFIX_LEN, seed::derive(seed_, "acceptance.eval")).unwrap();
    mean_reconstruction(&out, entries, PREFIX_LEN).unwrap()
}

fn negated<'a>(delta: &'a TaskVector<f32>, policy: &'a NegationPolicy) -> Generator<'a, f32> {
    Generator::Negated { delta, policy }
}

fn run_seed(seed_: u64, full_ablation: bool) -> SeedRun {
    let started = Instant::now();
    let corpus = synth_corpus::<f32>(seed_, 32).unwrap();
    let (base, _) = train_base(
        &corpus,
        &BaseConfig {
            seed: seed_,
            ..Default::default()
        },
    )
    .unwrap();
    let cfg = Stage1Config {
        seed: seed_,
        ..Default::default()
    };
    let tv = absorb(&base, &corpus, &cfg).unwrap().task_vector;
    let rules = Classifier::Rules(LemmaList::default_list());
    let unsafe_e: Vec<_> = corpus.iter().filter(|e| e.level.is_harmful()).collect();
    let safe_e: Vec<_> = corpus.iter().filter(|e| e.level == ToxicityLevel::Safe).collect();
    let gated = NegationPolicy::Gated {
        alpha_safe: 0.05,
        alpha_unsafe: 2.0,
    };
    let base_unsafe = recon(&base, Generator::Base, &unsafe_e, &rules, seed_);
    let base_safe = recon(&base, Generator::Base, &safe_e, &rules, seed_);
    let gated_unsafe = recon(&base, negated(&tv, &gated), &unsafe_e, &rules, seed_);
    let gated_safe = recon(&base, negated(&tv, &gated), &safe_e, &rules, seed_);
    let mut sweep_unsafe = Vec::new();
    let mut sweep_safe = Vec::new();
    for alpha in ALPHA_SWEEP {
        let p = NegationPolicy::Static { alpha };
        sweep_unsafe.push(recon(&base, negated(&tv, &p), &unsafe_e, &rules, seed_));
        sweep_safe.push(recon(&base, negated(&tv, &p), &safe_e, &rules, seed_));
    }
    let seconds = started.elapsed().as_secs_f64();

    let variant = |f: fn(&mut LossWeights)| {
        let mut c = cfg.clone();
        f(&mut c.weights);
        absorb(&base, &corpus, &c).unwrap().task_vector
    };
    let no_dec = variant(|w| w.dec = 0.0);
    let no_dec_unsafe = recon(&base, negated(&no_dec, &gated), &unsafe_e, &rules, seed_);
    let mut ablations = vec![("w_dec=0", no_dec)];
    if full_ablation {
        ablations.push(("w_harm=0", variant(|w| w.harm = 0.0)));
        ablations.push(("w_pres=0", variant(|w| w.pres = 0.0)));
    }
    SeedRun {
        seed: seed_,
        base_unsafe,
        base_safe,
        gated_unsafe,
        gated_safe,
        sweep_unsafe,
        sweep_safe,
        no_dec_unsafe,
        ablations,
        seconds,
    }
}

fn criterion_7(runs: &[SeedRun]) -> Outcome {
    let mut held = 0;
    let mut parts = Vec::new();
    for r in runs {
        let (u, s) = (r.gated_unsafe / r.base_unsafe, r.gated_safe / r.base_safe);
        let ok = u >= 2.0 && s <= 1.2;
        held += usize::from(ok);
        parts.push(format!("seed {} unsafe {u:.2}x safe {s:.2}x", r.seed));
    }
    let total: f64 = runs.iter().map(|r| r.seconds).sum();
    outcome(
        held >= 2 && total <= 900.0,
        format!("{}; {held}/3 seeds hold; pipeline {total:.0}s", parts.join(", ")),
    )
}

/// Moving average over a window of three.
fn windowed(v: &[f64]) -> Vec<f64> {
    v.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect()
}

fn criterion_8(runs: &[SeedRun]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for r in runs {
        let trend = windowed(&r.sweep_unsafe);
        let monotone = trend.windows(2).all(|w| w[1] >= w[0]);
        let n = r.sweep_safe.len();
        let safe_grows = r.sweep_safe[n - 1] / r.base_safe > r.sweep_safe[0] / r.base_safe;
        ok &= monotone && safe_grows;
        let curve = r.sweep_unsafe.iter().map(|v| format!("{:.3}", v / r.base_unsafe)).collect::<Vec<_>>().join(" ");
        parts.push(format!(
            "seed {}: unsafe [{curve}] trend {} safe {:.3}x->{:.3}x",
            r.seed,
            if monotone { "up" } else { "not monotone" },
            r.sweep_safe[0] / r.base_safe,
            r.sweep_safe[n - 1] / r.base_safe
        ));
    }
    outcome(ok, parts.join("; "))
}

fn criterion_9(runs: &[SeedRun]) -> Outcome {
    let full = runs.iter().find(|r| r.ablations.len() == 3).expect("one run carries every ablation");
    let mut distinct = true;
    let mut dists = Vec::new();
    for i in 0..3 {
        for j in i + 1..3 {
            let d = full.ablations[i].1.distance(&full.ablations[j].1);
            distinct &= d > 0.0;
            dists.push(format!("{}/{} {d:.3}", full.ablations[i].0, full.ablations[j].0));
        }
    }
    let mut weaker = 0;
    let mut parts = Vec::new();
    for r in runs {
        let (with, without) = (r.gated_unsafe / r.base_unsafe, r.no_dec_unsafe / r.base_unsafe);
        weaker += usize::from(without < with);
        parts.push(format!("seed {} {with:.2}x vs {without:.2}x", r.seed));
    }
    outcome(
        distinct && weaker >= 2,
        format!(
            "distances {}; unsafe forgetting default vs w_dec=0: {}; weaker on {weaker}/3",
            dists.join(", "),
            parts.join(", ")
        ),
    )
}

fn criterion_10() -> Outcome {
    let corpus = synth_corpus::<f32>(10, 32).unwrap();
    let lemmas = LemmaList::default_list();
    let rules = Classifier::Rules(lemmas.clone());
    let (forget, retain) = partition(&corpus, &lemmas);
    let family = |e: &CorpusEntry<f32>| Family::from_id(&e.id).unwrap();
    let mut disagree = 0;
    disagree += forget.iter().filter(|e| !family(e).is_unsafe()).count();
    disagree += retain.iter().filter(|e| family(e).is_unsafe()).count();
    disagree += corpus
        .iter()
        .filter(|e| classify(&e.caption, &rules).unwrap().level != family(e).level())
        .count();

    let fixtures: [(&str, &[&str]); 6] = [
        ("a man throws a punch", &["throw a punch"]),
        ("someone beats up a dummy", &["beat up"]),
        ("the boxer knocks out his rival", &["knock out"]),
        ("a figure holds a knife", &["hold a knife"]),
        ("a man threw a punch and kicks the bag", &["throw a punch", "kick"]),
        ("a woman beats the drum", &["beat"]),
    ];
    let mut wrong = Vec::new();
    for (caption, want) in fixtures {
        let got: Vec<String> = classify(caption, &rules).unwrap().evidence.into_iter().map(|e| e.term).collect();
        if got != want {
            wrong.push(format!("{caption:?} -> {got:?}"));
        }
    }
    outcome(
        disagree == 0 && wrong.is_empty(),
        format!(
            "{} entries, {} forget, {} retain, {disagree} disagreements; phrase fixtures {}",
            corpus.len(),
            forget.len(),
            retain.len(),
            if wrong.is_empty() { "ok".to_string() } else { wrong.join("; ") }
        ),
    )
}

fn main() -> ExitCode {
    let picked: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| picked.is_empty() || picked.contains(&n);
    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let cheap: [(u32, fn() -> Outcome); 7] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (10, criterion_10),
    ];
    for (n, f) in cheap {
        if wanted(n) {
            let o = f();
            println!("criterion {n}: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            results.push((n, o));
        }
    }
    if [7, 8, 9].into_iter().any(wanted) {
        let runs: Vec<SeedRun> = (0..3).map(|s| run_seed(s, s == 0)).collect();
        let heavy: [(u32, fn(&[SeedRun]) -> Outcome); 3] = [(7, criterion_7), (8, criterion_8), (9, criterion_9)];
        for (n, f) in heavy {
            if wanted(n) {
                let o = f(&runs);
                println!("criterion {n}: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
                results.push((n, o));
            }
        }
    }
    let failed: Vec<u32> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    println!(
        "acceptance: {} passed, {} failed",
        results.len() - failed.len(),
        failed.len()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
