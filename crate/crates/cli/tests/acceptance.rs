//! End-to-end acceptance checks, one pass/fail line per criterion.
//!
//! Runs every criterion by default. `ACCEPTANCE_ONLY=1,2,5` restricts the
//! run to a subset. The phantom experiment (criteria 6 and 7) trains twelve
//! desk-scale models and takes a few CPU hours.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::Rng;

use plgdf::backbone::{ema_update, BackboneConfig, Network, Param, ParamSet, TeacherStudentState};
use plgdf::data::{Dataset, DatasetManifest};
use plgdf::inference::{aggregate_windows, predict_volume, SlidingWindowSpec};
use plgdf::metrics::{mask_brute_force, mask_dice_jaccard, mask_surface_distances};
use plgdf::plgdf::{
    consis_frozen, consis_loss, consis_surrogate, rampup_weight, semi_loss, semi_loss_grad,
    sharp_loss, sharp_loss_grad, sharpen, sup_loss, sup_loss_grad, total_loss_frozen,
    ConsisOptions, LossInputs, LossReport, LossSettings, LossToggles, ProbMap, RampupSchedule,
};
use plgdf::rng::seeded;
use plgdf::trainer::{learning_rate, sgd_step, Trainer};
use plgdf::volume::{voxel_count, Volume};
use plgdf::TrainConfig;
use plgdf_cli::{cmd_synth, cmd_train, SynthArgs, TrainArgs};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn c1_loss_oracles() -> Outcome {
    let p = ProbMap::from_rows(&[vec![0.2, 0.8]]).unwrap();
    let s = sharpen(&p, 0.1).unwrap().get(1, 0);
    let r = rampup_weight(&RampupSchedule::new(0.1, 0, 1000));
    let one = |p: f64| ProbMap::from_rows(&[vec![p, 1.0 - p]]).unwrap();
    let c = consis_loss(&[&one(0.6), &one(0.8)], ConsisOptions::default()).unwrap();
    let t = LossReport::new(1.0, 0.5, 0.2, 0.3, 0.1, 1.0).l_total;
    let cases = [("sharpen", s, 0.9999990), ("ramp-up", r, 6.7379e-4), ("consis", c, 0.16558), ("total", t, 1.55)];
    let worst = cases.iter().map(|&(_, v, o)| rel(v, o)).fold(0.0, f64::max);
    for (name, v, o) in cases {
        check(rel(v, o) <= 1e-4, || format!("{name}: {v} vs {o}"))?;
    }
    Ok(format!("4 worked examples, max rel err {worst:.2e}"))
}

fn random_probs(rng: &mut impl Rng, classes: usize, voxels: usize) -> ProbMap {
    let mut data = vec![0.0; classes * voxels];
    for i in 0..voxels {
        let raw: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.1..1.0)).collect();
        let z: f64 = raw.iter().sum();
        for c in 0..classes {
            data[c * voxels + i] = raw[c] / z;
        }
    }
    ProbMap::new(classes, voxels, data).unwrap()
}

/// Relative L2 error between an analytic gradient and central differences
/// of `f` over every entry of `maps[which]`.
fn fd_error(maps: &[ProbMap], which: usize, grad: &ProbMap, f: &dyn Fn(&[ProbMap]) -> f64) -> f64 {
    let h = 1e-6;
    let (mut num_sq, mut diff_sq) = (0.0, 0.0);
    for k in 0..maps[which].data().len() {
        let mut plus = maps.to_vec();
        plus[which].data_mut()[k] += h;
        let mut minus = maps.to_vec();
        minus[which].data_mut()[k] -= h;
        let num = (f(&plus) - f(&minus)) / (2.0 * h);
        let ana = grad.data()[k];
        num_sq += num * num;
        diff_sq += (num - ana).powi(2);
    }
    diff_sq.sqrt() / num_sq.sqrt().max(1e-12)
}

fn c2_gradients() -> Outcome {
    let mut rng = seeded(2024);
    let (classes, n) = (2, 8); // one 2x2x2 patch
    let eps = 1e-5;
    let gt: Vec<u8> = (0..n).map(|i| (i % 3 == 0) as u8).collect();
    let pseudo: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut record = |name: &'static str, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };
    for _ in 0..5 {
        let lab = random_probs(&mut rng, classes, n);
        let u = random_probs(&mut rng, classes, n);
        let m = random_probs(&mut rng, classes, n);
        let soft = sharpen(&random_probs(&mut rng, classes, n), 0.1).unwrap();

        let g = sup_loss_grad(&lab, &gt, eps).unwrap();
        record("l_sup", fd_error(&[lab.clone()], 0, &g, &|p| sup_loss(&p[0], &gt, eps).unwrap()));

        let (gu, gm) = semi_loss_grad(&u, &m, &pseudo, eps).unwrap();
        let f = |p: &[ProbMap]| semi_loss(&p[0], &p[1], &pseudo, eps).unwrap();
        let pair = [u.clone(), m.clone()];
        record("l_semi", fd_error(&pair, 0, &gu, &f).max(fd_error(&pair, 1, &gm, &f)));

        let g = sharp_loss_grad(&u, &soft).unwrap();
        record("l_sharp", fd_error(&[u.clone()], 0, &g, &|p| sharp_loss(&p[0], &soft).unwrap()));

        // rectification weights and the log scale-average are constants
        let scales: Vec<ProbMap> = (0..3).map(|_| random_probs(&mut rng, classes, n)).collect();
        let refs: Vec<&ProbMap> = scales.iter().collect();
        let frozen = consis_frozen(&refs).unwrap();
        let opts = ConsisOptions::default();
        let (_, grads) = consis_surrogate(&refs, &frozen, opts).unwrap();
        let f = |p: &[ProbMap]| consis_surrogate(&p.iter().collect::<Vec<_>>(), &frozen, opts).unwrap().0;
        for (s, g) in grads.iter().enumerate() {
            record("l_consis", fd_error(&scales, s, g, &f));
        }

        // total with every term on: labeled, 3 unlabeled heads, 3 mixed heads
        let uh: Vec<ProbMap> = (0..3).map(|_| random_probs(&mut rng, classes, n)).collect();
        let mh: Vec<ProbMap> = (0..3).map(|_| random_probs(&mut rng, classes, n)).collect();
        let cat: Vec<ProbMap> = uh.iter().zip(&mh).map(|(a, b)| ProbMap::concat(&[a, b]).unwrap()).collect();
        let frozen = consis_frozen(&cat.iter().collect::<Vec<_>>()).unwrap();
        let soft = sharpen(&uh[0], 0.1).unwrap();
        let settings = LossSettings {
            toggles: LossToggles::ALL,
            dice_eps: eps,
            consis: opts,
            lambda: 0.37,
            semi_weight: 1.0,
        };
        let eval = |all: &[ProbMap]| {
            let inputs = LossInputs {
                labeled: &all[0],
                gt: &gt,
                unlabeled: &all[1..4],
                mixed: &all[4..7],
                pseudo: Some(&pseudo),
                soft: Some(&soft),
            };
            total_loss_frozen(&inputs, &settings, Some(&frozen)).unwrap()
        };
        let mut all = vec![lab.clone()];
        all.extend(uh.iter().cloned());
        all.extend(mh.iter().cloned());
        let (_, grads) = eval(&all);
        let f = |p: &[ProbMap]| eval(p).0.l_total;
        record("l_total", fd_error(&all, 0, &grads.labeled, &f));
        for k in 0..3 {
            record("l_total", fd_error(&all, 1 + k, &grads.unlabeled[k], &f));
            record("l_total", fd_error(&all, 4 + k, &grads.mixed[k], &f));
        }
    }
    for (name, e) in &worst {
        check(*e < 1e-3, || format!("{name}: relative error {e:.3e}"))?;
    }
    let summary: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    Ok(summary.join(", "))
}

fn c3_ema() -> Outcome {
    let scalar = |v: f32| ParamSet {
        params: vec![Param {
            name: "w".into(),
            shape: vec![1],
            data: vec![v],
        }],
    };
    let net = Network::new(BackboneConfig::default()).unwrap();
    let student = net.init_params::<f32>(1);
    let teacher0 = net.init_params::<f32>(2);
    for alpha in [0.0, 0.99, 1.0] {
        let oracle = |t: f32, s: f32| (alpha as f32) * t + ((1.0 - alpha) as f32) * s;
        let mut t = scalar(0.75);
        ema_update(&mut t, &scalar(-1.5), alpha).unwrap();
        check(t.params[0].data[0].to_bits() == oracle(0.75, -1.5).to_bits(), || {
            format!("scalar mismatch at alpha {alpha}")
        })?;

        let mut ts = TeacherStudentState::new(student.clone(), alpha).unwrap();
        ts.teacher = teacher0.clone();
        ts.ema_update().unwrap();
        for (tp, (t0, s)) in ts.teacher.params.iter().zip(teacher0.params.iter().zip(&student.params)) {
            for ((&got, &a), &b) in tp.data.iter().zip(&t0.data).zip(&s.data) {
                check(got.to_bits() == oracle(a, b).to_bits(), || {
                    format!("{} mismatch at alpha {alpha}: {got} vs {}", tp.name, oracle(a, b))
                })?;
            }
        }
        if alpha == 0.0 {
            check(ts.teacher == student, || "alpha 0 must copy the student".into())?;
        }
        if alpha == 1.0 {
            check(ts.teacher == teacher0, || "alpha 1 must keep the teacher".into())?;
        }
    }
    Ok(format!("bit-exact over {} parameters at alpha 0, 0.99, 1", student.len()))
}

fn random_mask(rng: &mut impl Rng, dims: [usize; 3]) -> Vec<bool> {
    let c: Vec<f64> = dims.iter().map(|&d| rng.gen_range(0.0..d as f64)).collect();
    let r: Vec<f64> = dims.iter().map(|&d| rng.gen_range(0.5..(d as f64 / 2.0 + 1.0))).collect();
    let noise = rng.gen_range(0.0..0.15);
    let mut m = vec![false; voxel_count(dims)];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let q = [x, y, z].iter().enumerate().map(|(a, &v)| ((v as f64 - c[a]) / r[a]).powi(2)).sum::<f64>();
                m[x + dims[0] * (y + dims[1] * z)] = (q <= 1.0) != rng.gen_bool(noise);
            }
        }
    }
    m
}

fn c4_metrics() -> Outcome {
    let mut rng = seeded(44);
    let (mut worst_sd, mut worst_j, mut defined) = (0.0f64, 0.0f64, 0);
    for pair in 0..200 {
        let dims = [rng.gen_range(1..=12), rng.gen_range(1..=12), rng.gen_range(1..=12)];
        let spacing = [rng.gen_range(0.3..2.5), rng.gen_range(0.3..2.5), rng.gen_range(0.3..2.5)];
        let (a, b) = (random_mask(&mut rng, dims), random_mask(&mut rng, dims));
        let fast = mask_surface_distances(&a, &b, dims, spacing);
        let slow = mask_brute_force(&a, &b, dims, spacing);
        match (fast, slow) {
            (Some(f), Some(s)) => {
                defined += 1;
                worst_sd = worst_sd.max((f.hd95 - s.hd95).abs()).max((f.asd - s.asd).abs());
                check((f.hd95 - s.hd95).abs() <= 1e-9 && (f.asd - s.asd).abs() <= 1e-9, || {
                    format!("pair {pair} {dims:?}: {f:?} vs {s:?}")
                })?;
                let doubled = spacing.map(|s| 2.0 * s);
                let d = mask_surface_distances(&a, &b, dims, doubled).unwrap();
                check(d.hd95 == 2.0 * f.hd95 && d.asd == 2.0 * f.asd, || {
                    format!("pair {pair}: spacing scaling {d:?} vs 2 x {f:?}")
                })?;
            }
            (None, None) => {}
            (f, s) => return Err(format!("pair {pair}: definedness differs {f:?} vs {s:?}")),
        }
        if let (Some(dice), Some(jac)) = mask_dice_jaccard(&a, &b) {
            let e = (jac - dice / (2.0 - dice)).abs();
            worst_j = worst_j.max(e);
            check(e <= 1e-9, || format!("pair {pair}: J {jac} D {dice}"))?;
        }
    }
    check(defined >= 150, || format!("only {defined} pairs had two surfaces"))?;
    Ok(format!(
        "200 pairs ({defined} with surfaces), max distance err {worst_sd:.1e}, max identity err {worst_j:.1e}"
    ))
}

fn c5_sliding_window() -> Outcome {
    let mut rng = seeded(55);
    let constant = [0.3f32, 0.7];
    for spec_no in 0..20 {
        let dims = [rng.gen_range(1..=20), rng.gen_range(1..=20), rng.gen_range(1..=20)];
        let patch = [rng.gen_range(1..=12), rng.gen_range(1..=12), rng.gen_range(1..=12)];
        let stride = patch.map(|p| rng.gen_range(1..=p));
        let spec = SlidingWindowSpec {
            patch_shape: patch,
            stride,
        };
        let n = voxel_count(dims);
        let v = Volume::image(dims, [1.0; 3], (0..n).map(|_| rng.gen()).collect()).unwrap();
        let (probs, counts) = aggregate_windows(&v, &spec, 2, |w| {
            let np = w.voxels();
            let data = constant.iter().flat_map(|&c| std::iter::repeat(c).take(np)).collect();
            Volume::probability(w.dims(), w.spacing(), 2, data)
        })
        .map_err(|e| e.to_string())?;
        check(counts.iter().all(|&c| c >= 1), || format!("spec {spec_no}: uncovered voxel for {dims:?} {spec:?}"))?;
        for c in 0..2 {
            check(probs.channel(c).iter().all(|&p| p == constant[c]), || {
                format!("spec {spec_no}: constant model not reproduced")
            })?;
        }
    }
    let net = Network::new(BackboneConfig {
        base_filters: 2,
        depth: 2,
        head_count: 3,
        block_convs: 1,
        ..BackboneConfig::default()
    })
    .unwrap();
    let params = net.init_params::<f32>(5);
    let v = Volume::image([8, 8, 8], [1.0; 3], (0..512).map(|_| rng.gen()).collect()).unwrap();
    let spec = SlidingWindowSpec {
        patch_shape: [8, 8, 8],
        stride: [4, 4, 4],
    };
    let (probs, _) = predict_volume(&net, &params, &v, &spec, 2).map_err(|e| e.to_string())?;
    check(probs == net.forward_top(&params, &v).unwrap(), || "single tile differs from forward_top".into())?;
    Ok("20 random specs covered, constant model exact, single tile exact".into())
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn variant(base: &TrainConfig, seed: u64, semi: bool, mix: bool, consis: bool, sharp: bool) -> TrainConfig {
    TrainConfig {
        seed,
        enable_semi: semi,
        enable_mix: mix,
        enable_consis: consis,
        enable_sharp: sharp,
        ..base.clone()
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

struct Experiment {
    dice: BTreeMap<&'static str, Vec<f64>>,
}

fn phantom_experiment(root: &Path) -> Result<Experiment, String> {
    let data = root.join("phantoms");
    cmd_synth(&SynthArgs {
        out: data.clone(),
        n: 40,
        shape: 64,
        classes: 2,
        sigma: 0.1,
        labeled: Some(4),
        val: 10,
        seed: 2024,
        force: false,
    })
    .map_err(|e| e.to_string())?;
    let manifest = DatasetManifest::load(&data.join("manifest.toml")).map_err(|e| e.to_string())?;
    let base = TrainConfig::preset("desk").unwrap();
    let dataset = Dataset::load(&manifest, &base).map_err(|e| e.to_string())?;
    let variants: [(&'static str, bool, bool, bool, bool); 4] = [
        ("supervised", false, false, false, false),
        ("full", true, true, true, true),
        ("semi", true, false, false, false),
        ("semi+mix", true, true, false, false),
    ];
    let mut dice: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    for &seed in &SEEDS {
        for &(name, semi, mix, consis, sharp) in &variants {
            let cfg = variant(&base, seed, semi, mix, consis, sharp);
            let started = Instant::now();
            let dir = root.join(format!("{name}-{seed}"));
            let outcome = Trainer::new(dataset.clone(), cfg)
                .and_then(|mut t| t.run(&dir, None))
                .map_err(|e| e.to_string())?;
            let d = outcome.best_val_dice.unwrap_or(0.0);
            progress(&format!(
                "  phantom run {name:<10} seed {seed}: best val dice {d:.4} at step {:?} ({:.0}s)",
                outcome.best_step,
                started.elapsed().as_secs_f64()
            ));
            dice.entry(name).or_default().push(d);
            let _ = fs::remove_dir_all(&dir);
        }
    }
    Ok(Experiment { dice })
}

fn c6_semi_gain(exp: &Experiment) -> Outcome {
    let full = median(&mut exp.dice["full"].clone());
    let sup = median(&mut exp.dice["supervised"].clone());
    let detail = format!(
        "median Dice full {full:.4} vs supervised {sup:.4} (gap {:+.4}; per seed full {:?}, supervised {:?})",
        full - sup,
        exp.dice["full"],
        exp.dice["supervised"]
    );
    if full - sup >= 0.02 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c7_mix_direction(exp: &Experiment) -> Outcome {
    let semi = median(&mut exp.dice["semi"].clone());
    let mixed = median(&mut exp.dice["semi+mix"].clone());
    let detail = format!(
        "median Dice semi+mix {mixed:.4} vs semi {semi:.4} (per seed {:?} vs {:?})",
        exp.dice["semi+mix"], exp.dice["semi"]
    );
    if mixed >= semi {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c8_determinism(root: &Path) -> Outcome {
    let data = root.join("det-data");
    cmd_synth(&SynthArgs {
        out: data.clone(),
        n: 6,
        shape: 24,
        classes: 3,
        sigma: 0.1,
        labeled: Some(2),
        val: 2,
        seed: 8,
        force: false,
    })
    .map_err(|e| e.to_string())?;
    let args = |out: &str| TrainArgs {
        config: "desk".into(),
        sets: vec![
            "t_max=30".into(),
            "validation_interval=10".into(),
            "patch_shape=[16,16,16]".into(),
            "val_stride=[8,8,8]".into(),
        ],
        seed: Some(8),
        manifest: data.join("manifest.toml"),
        out: root.join(out),
        resume: None,
    };
    cmd_train(&args("det-a")).map_err(|e| e.to_string())?;
    cmd_train(&args("det-b")).map_err(|e| e.to_string())?;
    for f in ["train_log.jsonl", "best.ckpt", "last.ckpt"] {
        let a = fs::read(root.join("det-a").join(f)).map_err(|e| e.to_string())?;
        let b = fs::read(root.join("det-b").join(f)).map_err(|e| e.to_string())?;
        check(a == b, || format!("{f} differs between identical runs"))?;
    }
    Ok("30-step full runs: identical logs, best and last checkpoints".into())
}

fn c9_supervised_equivalence(root: &Path) -> Outcome {
    let data = root.join("sup-data");
    cmd_synth(&SynthArgs {
        out: data.clone(),
        n: 6,
        shape: 24,
        classes: 2,
        sigma: 0.1,
        labeled: Some(3),
        val: 1,
        seed: 9,
        force: false,
    })
    .map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        seed: 9,
        patch_shape: [16, 16, 16],
        lr_schedule: plgdf::LrSchedule::Poly,
        t_max: 100,
        enable_semi: false,
        enable_mix: false,
        enable_consis: false,
        enable_sharp: false,
        ..TrainConfig::preset("desk").unwrap()
    };
    let manifest = DatasetManifest::load(&data.join("manifest.toml")).map_err(|e| e.to_string())?;
    let dataset = Dataset::load(&manifest, &cfg).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(dataset.clone(), cfg.clone()).map_err(|e| e.to_string())?;

    // plain supervised loop from the same initialization
    let net = Network::new(cfg.backbone(2)).unwrap();
    let mut params = trainer.state().ts.student.clone();
    let mut momentum = params.zeros_like();
    for t in 0..10u64 {
        trainer.step().map_err(|e| e.to_string())?;
        let batch = dataset.assemble_batch(&cfg, cfg.seed, t).map_err(|e| e.to_string())?;
        let caches: Vec<_> = batch
            .labeled_images
            .iter()
            .map(|v| {
                let f = plgdf::backbone::Feature {
                    channels: 1,
                    dims: v.dims(),
                    data: v.values().to_vec(),
                };
                net.forward(&params, &f, 1).unwrap()
            })
            .collect();
        let maps: Vec<ProbMap> = caches
            .iter()
            .map(|c| {
                let p = c.probs(0);
                ProbMap::new(2, p.voxels(), p.data.iter().map(|&x| x as f64).collect()).unwrap()
            })
            .collect();
        let probs = ProbMap::concat(&maps.iter().collect::<Vec<_>>()).unwrap();
        let gt: Vec<u8> = batch.labels.iter().flat_map(|l| l.labels()).collect();
        let g = sup_loss_grad(&probs, &gt, cfg.dice_eps).unwrap();
        let parts = g.split(&maps.iter().map(ProbMap::voxels).collect::<Vec<_>>()).unwrap();
        let mut grads = params.zeros_like();
        for (cache, part) in caches.iter().zip(&parts) {
            let head = plgdf::backbone::Feature {
                channels: 2,
                dims: cache.probs(0).dims,
                data: part.data().iter().map(|&x| x as f32).collect(),
            };
            net.backward(&params, cache, vec![Some(head)], &mut grads).unwrap();
        }
        let lr = learning_rate(cfg.lr, cfg.lr_schedule, t, cfg.t_max);
        sgd_step(&mut params, &grads, &mut momentum, lr, cfg.momentum, cfg.weight_decay).unwrap();
    }
    let max_diff = params
        .iter_values()
        .zip(trainer.state().ts.student.iter_values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    check(max_diff == 0.0, || format!("max abs parameter difference {max_diff:e} after 10 steps"))?;
    Ok("max abs parameter difference 0 after 10 steps".into())
}

fn progress(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().map_or(true, |o| o.contains(&n));
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path();

    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut run = |n: u32, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if wanted(n) {
            let started = Instant::now();
            let r = guarded(f);
            let status = if r.is_ok() { "PASS" } else { "FAIL" };
            let detail = match &r {
                Ok(d) | Err(d) => d,
            };
            println!(
                "criterion {n} {name}: {status} [{:.1}s] {detail}",
                started.elapsed().as_secs_f64()
            );
            results.push((n, name, r));
        }
    };
    run(1, "loss oracles", &mut c1_loss_oracles);
    run(2, "gradient checks", &mut c2_gradients);
    run(3, "EMA exactness", &mut c3_ema);
    run(4, "metrics equivalence", &mut c4_metrics);
    run(5, "sliding window", &mut c5_sliding_window);
    run(8, "determinism", &mut || c8_determinism(root));
    run(9, "supervised equivalence", &mut || c9_supervised_equivalence(root));
    if wanted(6) || wanted(7) {
        let started = Instant::now();
        match catch_unwind(AssertUnwindSafe(|| phantom_experiment(root))) {
            Ok(Ok(exp)) => {
                progress(&format!("phantom experiment took {:.0}s", started.elapsed().as_secs_f64()));
                run(6, "semi-supervised gain", &mut || c6_semi_gain(&exp));
                run(7, "mix ablation direction", &mut || c7_mix_direction(&exp));
            }
            failure => {
                let msg = match failure {
                    Ok(Err(e)) => e,
                    _ => "experiment panicked".to_string(),
                };
                run(6, "semi-supervised gain", &mut || Err(format!("experiment failed: {msg}")));
                run(7, "mix ablation direction", &mut || Err(format!("experiment failed: {msg}")));
            }
        }
    }
    results.sort_by_key(|r| r.0);
    let failed: Vec<u32> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!("acceptance: {} run, {} failed {:?}", results.len(), failed.len(), failed);
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
