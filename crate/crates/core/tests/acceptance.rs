//! Acceptance suite: one PASS/FAIL line per criterion.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use pcflow::cli::synthetic_dataset;
use pcflow::compute::{Graph, Mode, ParamSet, Tensor};
use pcflow::encoder::{Encoder, EncoderConfig};
use pcflow::flow::{
    integrate, integrate_with_trace, layer_norm, log_prob_conditional, BiasMode, Direction, FieldContext, LinearField, NetField, OdeNet, Solver,
    LN_EPS,
};
use pcflow::geometry::{synth_shape, PointCloud, ShapeKind};
use pcflow::metrics::{cov, emd, evaluate, jsd, one_nna, DistanceKind, EvalOptions, VoxelGrid};
use pcflow::model::{Model, ModelConfig};
use pcflow::objective::{check_gradients, save_checkpoint, train, ShapeDraw, TrainConfig};
use pcflow::sampler::{sample_shapes, GenRequest};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal_tensor(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn tiny_model(d_z: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            width: 8,
            d_k: 4,
            widen: vec![12],
            head: 8,
            d_z,
            attention: true,
            residual_blocks: true,
        },
        decoder_hidden: vec![8, 8],
        prior_hidden: vec![8],
        bias: BiasMode::Adaptive,
    }
}

// ---- 1 ----

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let model = Model::new(tiny_model(4), 11).unwrap();
    let clouds: Vec<PointCloud> = [ShapeKind::Sphere, ShapeKind::Torus]
        .into_iter()
        .enumerate()
        .map(|(i, k)| synth_shape(k, 8, 0.05, i as u64).unwrap())
        .collect();
    let mut r = rng(12);
    let draws: Vec<ShapeDraw> = clouds.iter().map(|c| ShapeDraw::sample(&mut r, 4, c.len(), None)).collect();
    let rep = check_gradients(&model, &clouds, &draws, &Solver::new(8), 1e-5, 1e-3, false).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    let total = model.params.scalar_count();
    ensure(
        rep.passed() && secs < 60.0 && rep.excluded_at_kink.is_empty() && rep.checked == total,
        format!(
            "max rel err {:.2e} at {} over {}/{} scalars, {} at kinks, {:.1} s",
            rep.max_rel_err,
            rep.worst_param.as_deref().unwrap_or("-"),
            rep.checked,
            total,
            rep.excluded_at_kink.len(),
            secs
        ),
    )
}

// ---- 2 ----

fn change_of_variables() -> Outcome {
    let mut r = rng(21);
    let solver = Solver::new(64);
    let mut worst: f64 = 0.0;
    for trial in 0..50 {
        let d = 2 + trial % 4;
        let mut a = normal_tensor(&mut r, d, d);
        // the max row sum bounds the spectral radius
        let norm = (0..d).map(|i| a.row_slice(i).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
        let s = r.random_range(0.1..1.0) / norm;
        a.data_mut().iter_mut().for_each(|v| *v *= s);
        let tr: f64 = (0..d).map(|i| a.at(i, i)).sum();
        let field = LinearField::new(&a).unwrap();
        let x = normal_tensor(&mut r, 4, d);
        let st = integrate_with_trace(&field, &x, &solver, Direction::Forward).unwrap();
        for &v in st.delta_logp.data() {
            worst = worst.max((v - tr).abs());
        }
    }
    // identity flow: zero decoder field
    let net = OdeNet::decoder(3, vec![8, 8], BiasMode::Adaptive);
    let mut p = ParamSet::new();
    net.init_params(&mut p, &mut r).unwrap();
    p.scale(0.0);
    let x = normal_tensor(&mut r, 50, 3);
    let z = normal_tensor(&mut r, 1, 3);
    let lp = log_prob_conditional(&x, &z, &net, &p, &solver).unwrap();
    let mut id_err: f64 = 0.0;
    for (i, v) in lp.iter().enumerate() {
        let sq: f64 = x.row_slice(i).iter().map(|c| c * c).sum();
        let closed = -1.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * sq;
        id_err = id_err.max((v - closed).abs());
    }
    ensure(
        worst < 1e-5 && id_err < 1e-9,
        format!("max |delta_logp - tr(A)| {worst:.2e} over 50 trials; identity flow err {id_err:.2e}"),
    )
}

// ---- 3 ----

fn invertibility() -> Outcome {
    let mut r = rng(31);
    let net = OdeNet::decoder(32, vec![64, 64, 64], BiasMode::Adaptive);
    let mut p = ParamSet::new();
    net.init_params(&mut p, &mut r).unwrap();
    let z = normal_tensor(&mut r, 1, 32);
    let field = NetField::new(&net, &p, FieldContext::Fixed(&z));
    let x = normal_tensor(&mut r, 1000, 3);
    let solver = Solver::new(64);
    let y = integrate(&field, &x, &solver, Direction::Forward).unwrap();
    let back = integrate(&field, &y, &solver, Direction::Inverse).unwrap();
    let err = back.max_abs_diff(&x);
    let moved = y.max_abs_diff(&x);
    ensure(err < 1e-3, format!("max round-trip error {err:.2e} over 1000 points (flow moves points by up to {moved:.2})"))
}

// ---- 4 ----

fn adaptive_bias_semantics() -> Outcome {
    let mut r = rng(41);
    let net = OdeNet::decoder(8, vec![16, 16], BiasMode::Adaptive);
    let mut p = ParamSet::new();
    net.init_params(&mut p, &mut r).unwrap();
    for l in 0..net.n_layers() {
        p.get_mut(&net.name(l, "gamma")).unwrap().data_mut()[0] = 0.0;
    }
    let y = normal_tensor(&mut r, 20, 3);
    let eval = |z: &Tensor, t: f64| {
        let mut g = Graph::new(Mode::Eval);
        let yv = g.constant(y.clone());
        let zv = g.constant(z.clone());
        let (f, _) = net.eval(&mut g, &p, yv, t, Some(zv), None).unwrap();
        g.value(f).clone()
    };
    let mut zdiff: f64 = 0.0;
    for _ in 0..10 {
        let a = normal_tensor(&mut r, 1, 8);
        let b = normal_tensor(&mut r, 1, 8);
        zdiff = zdiff.max(eval(&a, 0.3).max_abs_diff(&eval(&b, 0.3)));
    }
    let (mut mean_err, mut var_err): (f64, f64) = (0.0, 0.0);
    for trial in 0..200 {
        let n = 4 + trial % 30;
        let scale = r.random_range(0.5..20.0);
        let shift = r.random_range(-10.0..10.0);
        let c: Vec<f64> = (0..n).map(|_| shift + scale * r.sample::<f64, _>(StandardNormal)).collect();
        let v = layer_norm(&c, LN_EPS);
        let m = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
        mean_err = mean_err.max(m.abs());
        var_err = var_err.max((var - 1.0).abs());
    }
    ensure(
        zdiff < 1e-12 && mean_err < 1e-9 && var_err < 1e-4,
        format!("gamma=0 z-dependence {zdiff:.1e}; layer norm |mean| {mean_err:.1e}, |var-1| {var_err:.1e}"),
    )
}

// ---- 5 ----

fn brute_force_emd(a: &PointCloud, b: &PointCloud) -> f64 {
    fn rec(i: usize, used: &mut Vec<bool>, acc: f64, a: &PointCloud, b: &PointCloud, best: &mut f64) {
        let n = a.len();
        if i == n {
            *best = best.min(acc);
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                let p = a.points()[i];
                let q = b.points()[j];
                let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
                rec(i + 1, used, acc + d, a, b, best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(0, &mut vec![false; a.len()], 0.0, a, b, &mut best);
    best / a.len() as f64
}

fn random_cloud(r: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new((0..n).map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect()).unwrap()
}

fn metric_oracles() -> Outcome {
    let mut r = rng(51);
    let started = Instant::now();
    let mut emd_err: f64 = 0.0;
    for trial in 0..100 {
        let n = 1 + trial % 6;
        let a = random_cloud(&mut r, n);
        let b = random_cloud(&mut r, n);
        emd_err = emd_err.max((emd(&a, &b).unwrap() - brute_force_emd(&a, &b)).abs());
    }
    let emd_secs = started.elapsed().as_secs_f64();
    let set: Vec<PointCloud> = (0..10).map(|_| random_cloud(&mut r, 32)).collect();
    let nna = one_nna(&set, &set.clone(), DistanceKind::Cd).unwrap();
    let far_a = vec![PointCloud::new(vec![[-2.0, -2.0, -2.0]]).unwrap()];
    let far_b = vec![PointCloud::new(vec![[2.0, 2.0, 2.0]]).unwrap()];
    let j = jsd(&far_a, &far_b, &VoxelGrid::default()).unwrap().value;
    let rep = evaluate(&set, &set, &EvalOptions::default()).unwrap();
    let self_ok = rep.mmd_cd == 0.0
        && rep.mmd_emd == Some(0.0)
        && rep.cov_cd == 100.0
        && rep.cov_emd == Some(100.0)
        && rep.nna_cd == Some(50.0)
        && rep.nna_emd == Some(50.0)
        && rep.jsd == 0.0;
    ensure(
        emd_err < 1e-9 && emd_secs < 10.0 && nna == 50.0 && (j - std::f64::consts::LN_2).abs() < 1e-9 && self_ok,
        format!(
            "EMD vs brute force {emd_err:.1e} ({emd_secs:.2} s); duplicate 1-NNA {nna}%; disjoint JSD {j:.10}; self-eval mmd {} cov {} nna {:?} jsd {}",
            rep.mmd_cd, rep.cov_cd, rep.nna_cd, rep.jsd
        ),
    )
}

// ---- 6 ----

fn encoder_invariances() -> Outcome {
    let enc = Encoder::new(EncoderConfig::default());
    let mut params = ParamSet::new();
    let mut buffers = ParamSet::new();
    let mut r = rng(61);
    enc.init_params(&mut params, &mut r).unwrap();
    enc.init_buffers(&mut buffers).unwrap();
    let cloud = synth_shape(ShapeKind::Torus, 256, 0.02, 5).unwrap();
    let base = enc.encode(&cloud, &params, &buffers, Mode::Train).unwrap();
    let base_eval = enc.encode(&cloud, &params, &buffers, Mode::Eval).unwrap();
    let mut inv: f64 = 0.0;
    let mut perms = Vec::new();
    for _ in 0..100 {
        let mut perm: Vec<usize> = (0..cloud.len()).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let q = enc.encode(&cloud.permuted(&perm), &params, &buffers, Mode::Train).unwrap();
        for (a, b) in base.mu.iter().chain(&base.logvar).zip(q.mu.iter().chain(&q.logvar)) {
            inv = inv.max((a - b).abs());
        }
        perms.push(perm);
    }
    let q = enc.encode(&cloud.permuted(&perms[0]), &params, &buffers, Mode::Eval).unwrap();
    for (a, b) in base_eval.mu.iter().zip(&q.mu) {
        inv = inv.max((a - b).abs());
    }

    let feats = normal_tensor(&mut r, 64, 128);
    let attend = |f: &Tensor| {
        let mut g = Graph::new(Mode::Eval);
        let fv = g.constant(f.clone());
        let (out, w) = enc.self_attention(&mut g, &params, fv).unwrap();
        (g.value(out).clone(), g.value(w).clone())
    };
    let (out, w) = attend(&feats);
    let mut row_err: f64 = 0.0;
    for i in 0..w.rows() {
        row_err = row_err.max((w.row_slice(i).iter().sum::<f64>() - 1.0).abs());
    }
    let mut eqv: f64 = 0.0;
    for perm in perms.iter().take(10) {
        let perm: Vec<usize> = perm.iter().copied().filter(|&i| i < 64).collect();
        let pf = Tensor::matrix(64, 128, perm.iter().flat_map(|&i| feats.row_slice(i).to_vec()).collect()).unwrap();
        let (po, _) = attend(&pf);
        for (k, &i) in perm.iter().enumerate() {
            for (a, b) in po.row_slice(k).iter().zip(out.row_slice(i)) {
                eqv = eqv.max((a - b).abs());
            }
        }
    }
    ensure(
        inv < 1e-6 && row_err < 1e-7 && eqv < 1e-7,
        format!("encode invariance {inv:.1e} (100 permutations); attention row sums {row_err:.1e}; equivariance {eqv:.1e}"),
    )
}

// ---- 7 and 8 ----

const DESK_PER_FAMILY: usize = 100;
const DESK_POINTS: usize = 256;
const DESK_HELD_OUT: usize = 50;
const DESK_EPOCHS: usize = 30;
const DESK_JITTER: f64 = 0.05;
const DESK_STEPS: usize = 8;

fn desk_model(bias: BiasMode) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            width: 32,
            d_k: 16,
            widen: vec![64, 128],
            head: 64,
            d_z: 32,
            attention: true,
            residual_blocks: true,
        },
        decoder_hidden: vec![64, 64],
        prior_hidden: vec![64, 64],
        bias,
    }
}

fn desk_train(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: DESK_EPOCHS,
        batch: 2,
        lr: 1e-3,
        steps: DESK_STEPS,
        seed,
        recon_points: Some(64),
        ..TrainConfig::default()
    }
}

struct Desk {
    train: Vec<PointCloud>,
    held_out: Vec<PointCloud>,
}

fn desk_data() -> Desk {
    let ds = synthetic_dataset(DESK_PER_FAMILY, DESK_POINTS, DESK_JITTER, 0).unwrap();
    let stats = ds.norm.expect("standardized");
    let mut held_out = Vec::new();
    for kind in ShapeKind::ALL {
        for i in 0..DESK_HELD_OUT {
            let raw = synth_shape(kind, DESK_POINTS, DESK_JITTER, 7_000_000 + 1000 * kind as u64 + i as u64).unwrap();
            held_out.push(stats.apply(&raw));
        }
    }
    Desk {
        train: ds.clouds,
        held_out,
    }
}

struct DeskRun {
    losses: Vec<f64>,
    train_secs: f64,
    nna: f64,
    cov: f64,
    untrained_nna: f64,
}

fn generated(model: &Model, n: usize) -> Vec<PointCloud> {
    sample_shapes(&GenRequest::new(n, DESK_POINTS, 9_999, DESK_STEPS), model).unwrap()
}

fn desk_run(desk: &Desk, bias: BiasMode, seed: u64) -> DeskRun {
    let mut model = Model::new(desk_model(bias), seed).unwrap();
    let n = desk.held_out.len();
    let untrained = generated(&model, n);
    let untrained_nna = one_nna(&untrained, &desk.held_out, DistanceKind::Cd).unwrap();
    let started = Instant::now();
    let logs = train(&mut model, &desk.train, &desk_train(seed), 0).unwrap();
    let train_secs = started.elapsed().as_secs_f64();
    let gen = generated(&model, n);
    DeskRun {
        losses: logs.iter().map(|l| -l.parts.total).collect(),
        train_secs,
        nna: one_nna(&gen, &desk.held_out, DistanceKind::Cd).unwrap(),
        cov: cov(&gen, &desk.held_out, DistanceKind::Cd).unwrap(),
        untrained_nna,
    }
}

fn smoothed(v: &[f64], window: usize) -> Vec<f64> {
    v.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

fn end_to_end(run: &DeskRun) -> Outcome {
    let s = smoothed(&run.losses, 5);
    let monotone = s.windows(2).all(|w| w[1] <= w[0]);
    ensure(
        run.train_secs <= 1800.0 && monotone && run.nna <= 85.0 && run.nna < run.untrained_nna && run.cov >= 40.0,
        format!(
            "1-NNA(CD) {:.2}% (untrained {:.2}%), COV(CD) {:.2}%, smoothed loss {:.1} -> {:.1} {}, {:.0} s training",
            run.nna,
            run.untrained_nna,
            run.cov,
            s[0],
            s[s.len() - 1],
            if monotone { "non-increasing" } else { "NOT monotone" },
            run.train_secs
        ),
    )
}

fn ablation(adaptive: &[f64], plain: &[f64]) -> Outcome {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let list = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(", ");
    let (a, p) = (mean(adaptive), mean(plain));
    ensure(
        a <= p + 2.0,
        format!("mean 1-NNA(CD) adaptive {a:.2}% [{}] vs plain {p:.2}% [{}]", list(adaptive), list(plain)),
    )
}

// ---- 9 ----

fn determinism() -> Outcome {
    let run = |dir: &std::path::Path| {
        let data: Vec<PointCloud> = synthetic_dataset(4, 32, 0.02, 3).unwrap().clouds;
        let mut m = Model::new(tiny_model(6), 5).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch: 4,
            steps: 4,
            seed: 5,
            recon_points: Some(12),
            ..TrainConfig::default()
        };
        train(&mut m, &data, &cfg, 0).unwrap();
        let path = dir.join("m.ckpt");
        save_checkpoint(&m, 2, &path).unwrap();
        let gen = sample_shapes(&GenRequest::new(6, 32, 1, 4), &m).unwrap();
        let report = evaluate(&gen, &data[..6], &EvalOptions::default()).unwrap().to_json();
        let bits: Vec<u64> = m.params.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect();
        (std::fs::read(path).unwrap(), bits, report)
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ca, pa, ra) = run(a.path());
    let (cb, pb, rb) = run(b.path());
    ensure(
        ca == cb && pa == pb && ra == rb,
        format!(
            "checkpoint bytes equal: {}, f64 parameters bitwise equal: {}, reports equal: {}",
            ca == cb,
            pa == pb,
            ra == rb
        ),
    )
}

fn report(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let started = Instant::now();
    let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = started.elapsed().as_secs_f64();
    let (tag, detail) = match &out {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {id} {tag}: {name}: {detail} [{secs:.1} s]");
    out.is_ok()
}

fn main() {
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |i: usize| filter.is_empty() || filter.contains(&i);
    let mut ok = true;
    if want(1) {
        ok &= report(1, "gradient correctness", gradient_correctness);
    }
    if want(2) {
        ok &= report(2, "change of variables", change_of_variables);
    }
    if want(3) {
        ok &= report(3, "invertibility", invertibility);
    }
    if want(4) {
        ok &= report(4, "adaptive bias semantics", adaptive_bias_semantics);
    }
    if want(5) {
        ok &= report(5, "metric oracles", metric_oracles);
    }
    if want(6) {
        ok &= report(6, "encoder invariances", encoder_invariances);
    }
    if want(7) || want(8) {
        let desk = desk_data();
        let seeds = if want(8) { vec![0, 1, 2] } else { vec![0] };
        let mut adaptive = Vec::new();
        let mut first = None;
        for &s in &seeds {
            let run = desk_run(&desk, BiasMode::Adaptive, s);
            println!("  desk run adaptive seed {s}: 1-NNA {:.2}% COV {:.2}% ({:.0} s)", run.nna, run.cov, run.train_secs);
            adaptive.push(run.nna);
            first.get_or_insert(run);
        }
        if want(7) {
            let run = first.take().expect("seed 0 run");
            ok &= report(7, "desk-scale end to end", || end_to_end(&run));
        }
        if want(8) {
            let mut plain = Vec::new();
            for &s in &seeds {
                let run = desk_run(&desk, BiasMode::Plain, s);
                println!("  desk run plain seed {s}: 1-NNA {:.2}% COV {:.2}% ({:.0} s)", run.nna, run.cov, run.train_secs);
                plain.push(run.nna);
            }
            ok &= report(8, "ablation direction", || ablation(&adaptive, &plain));
        }
    }
    if want(9) {
        ok &= report(9, "determinism", determinism);
    }
    if !ok {
        std::process::exit(1);
    }
}
