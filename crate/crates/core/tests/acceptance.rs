//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line and then
//! asserts it.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdgcount_core::data::io::LabeledImage;
use sdgcount_core::data::{generate_density_map, generate_pcm_gt, DensityMap, Image, PointAnnotation};
use sdgcount_core::eval::{counting_metrics, evaluate, ScaledModel};
use sdgcount_core::losses::{
    attention_consistency_loss, density_loss, pc_loss, total_loss, LossParts, LossWeights,
};
use sdgcount_core::model::{
    compute_cem, images_to_tensor, memory_reconstruct, AttentionScores, CountingModel, FeatureMap, MemoryBank,
    ModelConfig, Switches,
};
use sdgcount_core::synthbench::{generate_domain_pair, DomainTransform, SceneSpec};
use sdgcount_core::tensor::Tensor;
use sdgcount_core::train::{overfit_probe, train, train_until, Sink, TrainState};
use sdgcount_core::{data::PatchClassMap, RunConfig};

fn report(id: u32, name: &str, ok: bool, detail: &str, elapsed: Duration) {
    println!(
        "criterion {id:>2} [{}] {name}: {detail} ({:.1}s)",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    assert!(ok, "criterion {id} failed: {detail}");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn c01_count_preservation() {
    let t = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for i in 0..200 {
        let n = r.random_range(0..=50);
        let pts = (0..n).map(|_| [r.random_range(0.0..256.0), r.random_range(0.0..256.0)]).collect();
        let ann = PointAnnotation::new(format!("s{i}"), pts);
        let d = generate_density_map(&ann, 256, 256, 4.0, true).unwrap();
        let err = (d.sum() - n as f64).abs() / (n as f64).max(1.0);
        worst = worst.max(err);
    }
    let el = t.elapsed();
    report(
        1,
        "count preservation",
        worst <= 1e-4 && el < Duration::from_secs(30),
        &format!("worst relative error {worst:.2e} over 200 maps"),
        el,
    );
}

#[test]
fn c02_pcm_oracle() {
    let t = Instant::now();
    let mut r = rng(2);
    let mut mismatches = 0;
    for i in 0..100 {
        let p = if i % 2 == 0 { 8 } else { 16 };
        let (h, w) = (p * r.random_range(1..6), p * r.random_range(1..6));
        // sparse non-negative maps with some exactly-empty patches
        let values: Vec<f64> = (0..h * w)
            .map(|_| if r.random_bool(0.02) { r.random_range(0.0..1.0) } else { 0.0 })
            .collect();
        let d = DensityMap {
            height: h,
            width: w,
            values,
            scale: 1.0,
        };
        let got = generate_pcm_gt(&d, p).unwrap();
        for i in 0..h / p {
            for j in 0..w / p {
                let mut s = 0.0;
                for y in i * p..(i + 1) * p {
                    for x in j * p..(j + 1) * p {
                        s += d.get(y, x);
                    }
                }
                let expect = if s > 1e-12 { 1.0 } else { 0.0 };
                if got.get(i, j) != expect {
                    mismatches += 1;
                }
            }
        }
    }
    let el = t.elapsed();
    report(
        2,
        "patch-map oracle",
        mismatches == 0 && el < Duration::from_secs(10),
        &format!("{mismatches} mismatching patches over 100 maps"),
        el,
    );
}

#[test]
fn c03_memory_simplex_and_hull() {
    let t = Instant::now();
    let mut r = rng(3);
    let (mut worst_sum, mut worst_hull) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (c, m) = (r.random_range(1..9), r.random_range(1..17));
        let (h, w) = (r.random_range(1..5), r.random_range(1..5));
        let f = FeatureMap::from_tensor(&Tensor::randn(&[1, c, h, w], 3.0, &mut r), 0, 8);
        let bank = MemoryBank::random(m, c, &mut r);
        let (a, rec) = memory_reconstruct(&f, &bank).unwrap();
        for p in 0..a.positions {
            worst_sum = worst_sum.max((a.row(p).iter().sum::<f64>() - 1.0).abs());
            assert!(a.row(p).iter().all(|&v| v >= 0.0));
        }
        for k in 0..c {
            let lo = (0..m).map(|i| bank.row(i)[k]).fold(f64::INFINITY, f64::min);
            let hi = (0..m).map(|i| bank.row(i)[k]).fold(f64::NEG_INFINITY, f64::max);
            for &v in rec.channel(k) {
                worst_hull = worst_hull.max(lo - v).max(v - hi);
            }
        }
    }
    let el = t.elapsed();
    report(
        3,
        "attention simplex / convex hull",
        worst_sum <= 1e-5 && worst_hull <= 1e-6 && el < Duration::from_secs(30),
        &format!("max |row sum − 1| {worst_sum:.1e}, max hull excursion {worst_hull:.1e}"),
        el,
    );
}

#[test]
fn c04_content_error_mask_properties() {
    let t = Instant::now();
    let mut r = rng(4);
    let alphas = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, f64::INFINITY];
    let mut problems = Vec::new();
    for trial in 0..50 {
        let c = r.random_range(1..6);
        let f = FeatureMap::from_tensor(&Tensor::randn(&[1, c, 4, 5], 1.0, &mut r), 0, 8);
        let g = FeatureMap::from_tensor(&Tensor::randn(&[1, c, 4, 5], 1.0, &mut r), 0, 8);
        let mut last = f64::INFINITY;
        for &a in &alphas {
            let m = compute_cem(&f, &g, a).unwrap();
            if m != compute_cem(&g, &f, a).unwrap() {
                problems.push(format!("trial {trial}: asymmetric at α={a}"));
            }
            if m.pde() > last {
                problems.push(format!("trial {trial}: PDE increased at α={a}"));
            }
            last = m.pde();
        }
        if last != 0.0 {
            problems.push(format!("trial {trial}: PDE(∞) = {last}"));
        }
        // per-channel affine change of either argument must not alter the
        // normalized discrepancy by more than 1e-4
        let scale: Vec<f64> = (0..c).map(|_| r.random_range(0.2..5.0)).collect();
        let shift: Vec<f64> = (0..c).map(|_| r.random_range(-3.0..3.0)).collect();
        let hw = 20;
        let mut fa = f.clone();
        fa.values.iter_mut().enumerate().for_each(|(i, v)| *v = scale[i / hw] * *v + shift[i / hw]);
        for &a in &[0.3, 0.5, 0.9] {
            let base = compute_cem(&f, &g, a).unwrap();
            let moved = compute_cem(&fa, &g, a).unwrap();
            let loose = compute_cem(&f, &g, a + 1e-4).unwrap();
            let tight = compute_cem(&f, &g, a - 1e-4).unwrap();
            for i in 0..base.values.len() {
                let v = moved.values[i];
                if v != base.values[i] && !(tight.values[i] <= v && v <= loose.values[i]) {
                    problems.push(format!("trial {trial}: affine change moved element {i} at α={a}"));
                }
            }
            let moved_aug = compute_cem(&g, &fa, a).unwrap();
            if moved_aug != moved {
                problems.push(format!("trial {trial}: affine change on second argument differs"));
            }
        }
    }
    let el = t.elapsed();
    report(
        4,
        "content error mask properties",
        problems.is_empty(),
        &if problems.is_empty() {
            "symmetric, PDE monotone over the α grid, PDE(∞)=0, affine invariant (50 trials)".to_string()
        } else {
            problems.join("; ")
        },
        el,
    );
}

/// Loss selector for the gradient check.
#[derive(Clone, Copy, Debug)]
enum Term {
    Density,
    Patch,
    Consistency,
    Total,
}

fn micro_loss(
    model: &CountingModel,
    x_ori: &Tensor,
    x_aug: &Tensor,
    targets: &sdgcount_core::losses::PairTargets,
    term: Term,
    want: &[usize],
) -> (f64, Vec<Tensor>) {
    let mut fwd = model.forward_train(x_ori, x_aug, &mut rng(99)).unwrap();
    let n = fwd.n;
    let g = &mut fwd.graph;
    let dens_gt = Tensor::concat_batch(&[&targets.density, &targets.density]);
    let pcm_gt = Tensor::concat_batch(&[&targets.pcm, &targets.pcm]);
    let d0 = g.density_loss(fwd.density, dens_gt.clone(), 0, n);
    let d1 = g.density_loss(fwd.density, dens_gt, n, 2 * n);
    let p = fwd.pcm.unwrap();
    let c0 = g.bce(p, pcm_gt.clone(), 0, n);
    let c1 = g.bce(p, pcm_gt, n, 2 * n);
    let con = g.attn_consistency(fwd.attn.unwrap());
    let w = LossWeights::default();
    let terms = match term {
        Term::Density => vec![(d0, 1.0), (d1, 1.0)],
        Term::Patch => vec![(c0, 1.0), (c1, 1.0)],
        Term::Consistency => vec![(con, 1.0)],
        Term::Total => vec![
            (d0, 1.0),
            (d1, 1.0),
            (c0, w.lambda_cls),
            (c1, w.lambda_cls),
            (con, w.lambda_con),
        ],
    };
    let root = g.weighted_sum(terms);
    let value = g.scalar(root);
    let grads = g.backward(root);
    let out = want
        .iter()
        .map(|idx| {
            let var = fwd.bindings.iter().find(|(i, _)| i == idx).unwrap().1;
            grads.get(var).cloned().unwrap_or_else(|| Tensor::zeros(model.params().value(*idx).shape()))
        })
        .collect();
    (value, out)
}

#[test]
fn c05_gradient_check() {
    let t = Instant::now();
    let mut cfg = ModelConfig::tiny();
    cfg.memory_count = 2;
    cfg.memory_dim = 4;
    let mut model = CountingModel::new(&cfg, 5).unwrap();
    // PC head biased positive so every patch passes the binarization and the
    // mask stays fixed under small perturbations
    let pc_bias = model.params().index_of("pc_head.out.bias").unwrap();
    model.params_mut().value_mut(pc_bias).data_mut().fill(3.0);
    let dens_bias = model.params().index_of("density_head.bias").unwrap();
    model.params_mut().value_mut(dens_bias).data_mut().fill(0.5);

    let mut r = rng(50);
    let img = |seed: u64| {
        let mut i = Image::new(32, 32);
        let mut rr = rng(seed);
        i.data.iter_mut().for_each(|v| *v = rr.random::<f64>());
        i
    };
    let (a, b) = (img(1), img(2));
    let x_ori = images_to_tensor(&[&a]).unwrap();
    let x_aug = images_to_tensor(&[&b]).unwrap();
    let targets = sdgcount_core::losses::PairTargets {
        density: Tensor::from_vec(&[1, 1, 4, 4], (0..16).map(|_| r.random_range(0.0..2.0)).collect()),
        pcm: Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]),
    };
    let names = ["memory", "density_head.weight", "density_head.bias", "pc_head.out.weight", "pc_head.out.bias"];
    let idx: Vec<usize> = names.iter().map(|n| model.params().index_of(n).unwrap()).collect();
    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let mut checked = 0;
    for term in [Term::Density, Term::Patch, Term::Consistency, Term::Total] {
        let (_, analytic) = micro_loss(&model, &x_ori, &x_aug, &targets, term, &idx);
        for (k, &pi) in idx.iter().enumerate() {
            let len = model.params().value(pi).len();
            let coords: Vec<usize> = if len <= 8 { (0..len).collect() } else { (0..8).map(|j| j * len / 8).collect() };
            for &ci in &coords {
                let orig = model.params().value(pi).data()[ci];
                model.params_mut().value_mut(pi).data_mut()[ci] = orig + h;
                let (lp, _) = micro_loss(&model, &x_ori, &x_aug, &targets, term, &[]);
                model.params_mut().value_mut(pi).data_mut()[ci] = orig - h;
                let (lm, _) = micro_loss(&model, &x_ori, &x_aug, &targets, term, &[]);
                model.params_mut().value_mut(pi).data_mut()[ci] = orig;
                let numeric = (lp - lm) / (2.0 * h);
                let an = analytic[k].data()[ci];
                let rel = (an - numeric).abs() / an.abs().max(numeric.abs()).max(1e-8);
                checked += 1;
                if rel > worst {
                    worst = rel;
                    worst_at = format!("{term:?} / {}[{ci}]: analytic {an:.6e}, numeric {numeric:.6e}", names[k]);
                }
            }
        }
    }
    let el = t.elapsed();
    report(
        5,
        "gradient check",
        worst < 1e-3 && el < Duration::from_secs(120),
        &format!("max relative error {worst:.2e} over {checked} coordinates (worst: {worst_at})"),
        el,
    );
}

#[test]
fn c06_loss_identities() {
    let t = Instant::now();
    let mut r = rng(6);
    let d = DensityMap {
        height: 4,
        width: 4,
        values: (0..16).map(|_| r.random()).collect(),
        scale: 1000.0,
    };
    let den = density_loss(&d, &d).unwrap();
    let gt = PatchClassMap::new(2, 2, 16, vec![1.0, 0.0, 1.0, 1.0]);
    let pc = pc_loss(&gt, &gt).unwrap();
    let a = AttentionScores {
        positions: 3,
        memory: 2,
        values: vec![0.3, 0.7, 0.5, 0.5, 1.0, 0.0],
    };
    let acl = attention_consistency_loss(&a, &a).unwrap();
    let unit = LossParts {
        den_ori: 1.0,
        den_aug: 1.0,
        cls_ori: 1.0,
        cls_aug: 1.0,
        con: 1.0,
    };
    let total = total_loss(&unit, &LossWeights::default()).unwrap().total;
    let mut rmse_ok = true;
    for _ in 0..1000 {
        let n = r.random_range(1..20);
        let g: Vec<f64> = (0..n).map(|_| r.random_range(0.0..500.0)).collect();
        let p: Vec<f64> = (0..n).map(|_| r.random_range(0.0..500.0)).collect();
        let (mae, mse) = counting_metrics(&g, &p).unwrap();
        rmse_ok &= mse >= mae;
    }
    let ok = den == 0.0 && pc <= 1e-6 && acl == 0.0 && total == 32.0 && rmse_ok;
    report(
        6,
        "loss identities",
        ok,
        &format!("density {den}, bce {pc:.2e}, acl {acl}, total(unit) {total}, RMSE ≥ MAE on 1000 draws: {rmse_ok}"),
        t.elapsed(),
    );
}

/// Two 64×64 synthetic scenes cropped to 32×32 training images.
fn probe_samples() -> Vec<LabeledImage> {
    let spec = SceneSpec {
        height: 32,
        width: 32,
        count_range: (6, 12),
        ..SceneSpec::default()
    };
    generate_domain_pair(&spec, 2, 1, 4.0, &mut rng(7)).unwrap().source
}

fn probe_run() -> RunConfig {
    let mut run = RunConfig::default();
    run.model = ModelConfig::tiny();
    run.augment.crop_size = 32;
    run.train.max_lr = 1e-1;
    run
}

#[test]
fn c07_overfit_probe() {
    let t = Instant::now();
    let samples = probe_samples();
    let mean = samples.iter().map(LabeledImage::count).sum::<f64>() / samples.len() as f64;
    let run = probe_run();
    let base = CountingModel::new(&run.model, run.train.seed).unwrap();
    let mut a = base.clone();
    let mae = overfit_probe(&mut a, &samples, 500, &run).unwrap();
    let mut b = base;
    let mae2 = overfit_probe(&mut b, &samples, 500, &run).unwrap();
    let el = t.elapsed();
    let ok = mae < 0.05 * mean && mae == mae2 && a.params() == b.params() && el < Duration::from_secs(600);
    report(
        7,
        "overfit probe",
        ok,
        &format!(
            "train MAE {mae:.4} vs 5% of mean count {:.4}; rerun MAE {mae2:.4} (bit-identical: {})",
            0.05 * mean,
            a.params() == b.params()
        ),
        el,
    );
}

fn shift_run(switches: Switches, seed: u64) -> RunConfig {
    let mut run = RunConfig::default();
    run.model = ModelConfig::tiny();
    run.model.switches = switches;
    run.augment.crop_size = 64;
    run.train.epochs = 30;
    run.train.batch_size = 8;
    run.train.seed = seed;
    run.train.max_lr = 5e-2;
    run
}

#[test]
fn c08_synthetic_domain_shift_trend() {
    let t = Instant::now();
    let spec = SceneSpec {
        height: 96,
        width: 96,
        count_range: (10, 40),
        transform: DomainTransform::Haze,
        strength: 0.8,
        ..SceneSpec::default()
    };
    let pair = generate_domain_pair(&spec, 64, 32, 4.0, &mut rng(8)).unwrap();
    let mut full = Vec::new();
    let mut base = Vec::new();
    for seed in [2023, 2024, 2025] {
        for (sw, out) in [(Switches::ALL, &mut full), (Switches::NONE, &mut base)] {
            let run = shift_run(sw, seed);
            let mut model = CountingModel::new(&run.model, seed).unwrap();
            train(&mut model, &pair.source, &run, &mut Sink::memory()).unwrap();
            let rep = evaluate(
                &ScaledModel {
                    model: &model,
                    density_scale: run.train.density_scale,
                },
                &pair.target,
            )
            .unwrap();
            out.push(rep.mae);
        }
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let (mf, mb) = (median(&mut full), median(&mut base));
    let el = t.elapsed();
    report(
        8,
        "synthetic domain-shift trend",
        mf <= mb && el < Duration::from_secs(45 * 60),
        &format!("median target MAE full {mf:.3} vs baseline {mb:.3} (full {full:.3?}, baseline {base:.3?})"),
        el,
    );
}

#[test]
fn c09_config_fidelity() {
    let t = Instant::now();
    let golden = include_str!("golden/default_config.toml");
    let d = RunConfig::default();
    let text = d.to_toml_string();
    let expected = [
        ("memory_count", "1024"),
        ("memory_dim", "256"),
        ("alpha", "0.5"),
        ("lambda_cls", "10.0"),
        ("lambda_con", "10.0"),
        ("crop_size", "320"),
        ("max_lr", "0.001"),
        ("epochs", "300"),
        ("batch_size", "16"),
        ("density_scale", "1000.0"),
        ("patch_size", "16"),
        ("seed", "2023"),
    ];
    let missing: Vec<_> = expected
        .iter()
        .filter(|(k, v)| !golden.lines().any(|l| l == format!("{k} = {v}")))
        .collect();
    let ok = text == golden && missing.is_empty();
    report(
        9,
        "config fidelity",
        ok,
        &format!(
            "defaults byte-identical to golden: {}; constants missing from golden: {missing:?}",
            text == golden
        ),
        t.elapsed(),
    );
}

#[test]
fn c10_determinism() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec {
        count_range: (3, 10),
        ..SceneSpec::default()
    };
    let pair = generate_domain_pair(&spec, 4, 3, 4.0, &mut rng(10)).unwrap();
    let mut run = RunConfig::default();
    run.model = ModelConfig::tiny();
    run.augment.crop_size = 32;
    run.train.epochs = 3;
    run.train.batch_size = 2;
    run.train.checkpoint_every = 1;

    let model = CountingModel::new(&run.model, run.train.seed).unwrap();
    let mut whole = TrainState::new(model.clone(), run.train.weight_decay);
    let h_whole = train_until(&mut whole, &pair.source, &run, &mut Sink::memory(), 3).unwrap();
    let ck = dir.path().join("ck");
    let mut part = TrainState::new(model, run.train.weight_decay);
    train_until(&mut part, &pair.source, &run, &mut Sink::directory(&ck).unwrap(), 2).unwrap();
    let (mut resumed, info) = TrainState::load(&ck.join("epoch_0002.ckpt")).unwrap();
    let h_rest = train_until(&mut resumed, &pair.source, &info.run, &mut Sink::memory(), 3).unwrap();
    let tail: Vec<f64> = h_whole.steps.iter().filter(|s| s.epoch == 2).map(|s| s.loss).collect();
    let rest: Vec<f64> = h_rest.steps.iter().map(|s| s.loss).collect();
    let loss_gap = tail.iter().zip(&rest).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let resume_ok = tail.len() == rest.len() && !rest.is_empty() && loss_gap <= 1e-6;

    let (loaded, _) = sdgcount_core::train::load_model(&ck.join("epoch_0002.ckpt")).unwrap();
    let write = |sub: &str| {
        let out = dir.path().join(sub);
        evaluate(
            &ScaledModel {
                model: &loaded,
                density_scale: run.train.density_scale,
            },
            &pair.target,
        )
        .unwrap()
        .write(&out, true)
        .unwrap();
        (
            std::fs::read(out.join("report.json")).unwrap(),
            std::fs::read(out.join("counts.csv")).unwrap(),
        )
    };
    let (a, b) = (write("eval1"), write("eval2"));
    let eval_ok = a == b;
    report(
        10,
        "determinism",
        resume_ok && eval_ok,
        &format!("eval reports byte-identical: {eval_ok}; resumed epoch-3 loss gap {loss_gap:.1e} over {} steps", rest.len()),
        t.elapsed(),
    );
}
