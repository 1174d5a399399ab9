//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! per criterion and exits nonzero if any fails.
//!
//! `cargo test --release --test acceptance` runs all of them; pass criterion
//! numbers (`-- 2 7`) to run a subset.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use dadkit::cli::RunConfig;
use dadkit::distill::{
    check_partner_merge, detector_polarity_recall, distill_train, local_maxima, DistillConfig, KeypointFunction,
    MergeOrder, MergeVerdict,
};
use dadkit::eval::{auc, corner_epe, ransac_homography, repeatability, Correspondence};
use dadkit::geometry::PointTransfer;
use dadkit::model::{init_params, predict, run_gradcheck, train_loop, ArchConfig, DetectorParams, GradCheckConfig};
use dadkit::prob::{gaussian_blur, softmax_2d};
use dadkit::sampler::{kde_balance, sample_keypoints, SampleMode, SamplerConfig};
use dadkit::synth::{
    expected_strategy_reward, generate_pair, GtKeypoints, PairSample, PairTransfer, Polarity, SceneConfig, Shape,
    Strategy, SynthMode,
};
use dadkit::Grid;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// 1: gradient suite.
fn gradients() -> Outcome {
    let report = run_gradcheck(&GradCheckConfig::default()).map_err(e2s)?;
    let detail = format!(
        "max rel err {:.2e} over {} probes ({} skipped at ReLU kinks), per loss {:?}",
        report.max_rel_error(),
        report.parameters_checked,
        report.skipped_at_kinks,
        report.per_loss
    );
    ensure(report.max_rel_error() < 1e-3, || detail.clone())?;
    ensure(report.skipped_at_kinks * 10 < report.parameters_checked, || format!("too many skipped probes: {detail}"))?;
    Ok(detail)
}

// 2: toy expected-reward table.
fn strategy_rewards() -> Outcome {
    let cfg = SceneConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = vec![];
    for (s, lo, hi) in [
        (Strategy::LightOnly, 10.0, 10.0),
        (Strategy::DarkOnly, 10.0, 10.0),
        (Strategy::Mixed, 4.9, 5.1),
    ] {
        let r = expected_strategy_reward(s, &cfg, 10, 100_000, &mut rng).map_err(e2s)?;
        ensure(r >= lo && r <= hi, || format!("{s:?}: {r}"))?;
        out.push(format!("{s:?}={r:.4}"));
    }
    Ok(out.join(" "))
}

static TRAINED: Mutex<BTreeMap<u64, DetectorParams<f64>>> = Mutex::new(BTreeMap::new());

/// Trains with the command-line toy defaults, as `dadkit train --seed SEED`.
fn train_toy(seed: u64) -> Result<(DetectorParams<f64>, f64), String> {
    let cfg = RunConfig::parse(&format!("seed={seed}")).map_err(e2s)?;
    let train = cfg.train_config().map_err(e2s)?;
    let scene = cfg.scene_config().map_err(e2s)?;
    let init = init_params(&cfg.arch().map_err(e2s)?).map_err(e2s)?;
    let log = train_loop(init, &mut |i| generate_pair(SynthMode::Toy, &scene, seed, i as u64), &train).map_err(e2s)?;
    TRAINED.lock().unwrap().insert(seed, log.params.clone());
    let reward = log.recent_pair_reward(200);
    Ok((log.params, reward))
}

/// Fraction of top-10 keypoints on held-out toy images that sit on the
/// majority polarity; keypoints on no dot count against it.
fn single_polarity_fraction(params: &DetectorParams<f64>) -> Result<(f64, Polarity), String> {
    let cfg = SceneConfig::toy();
    let sampler = SamplerConfig { k: 10, ..SamplerConfig::default() };
    let mut counts = [0usize; 3];
    for i in 0..100 {
        let s: PairSample<f64> = generate_pair(SynthMode::Toy, &cfg, 999_999, i).map_err(e2s)?;
        let scores = predict(params, &s.image_a).map_err(e2s)?;
        let kps = sample_keypoints(scores.logits(), &sampler, SampleMode::Inference).map_err(e2s)?;
        for k in kps.iter() {
            let hit = s
                .gt_a
                .points
                .iter()
                .zip(&s.gt_a.polarity)
                .find(|((x, y), _)| (x - k.x).abs().max((y - k.y).abs()) <= 1.5)
                .map(|(_, p)| *p);
            counts[match hit {
                Some(Polarity::Light) => 0,
                Some(Polarity::Dark) => 1,
                None => 2,
            }] += 1;
        }
    }
    let total = counts.iter().sum::<usize>().max(1) as f64;
    let pol = if counts[0] >= counts[1] { Polarity::Light } else { Polarity::Dark };
    Ok((counts[0].max(counts[1]) as f64 / total, pol))
}

// 3: emergence of a single polarity.
fn emergence() -> Outcome {
    let mut out = vec![];
    for seed in [1, 2, 3] {
        let t = Instant::now();
        let (params, reward) = train_toy(seed)?;
        let (frac, pol) = single_polarity_fraction(&params)?;
        let elapsed = t.elapsed();
        let line = format!("seed {seed}: reward {reward:.2}, {:.0}% {pol}, {:.0}s", 100.0 * frac, elapsed.as_secs_f64());
        ensure(reward >= 9.0 && frac >= 0.9 && elapsed < Duration::from_secs(600), || line.clone())?;
        out.push(line);
    }
    Ok(out.join("; "))
}

fn distill_scenes() -> SceneConfig {
    SceneConfig {
        shape_palette: vec![Shape::Dot, Shape::Blob, Shape::Cross],
        ..SceneConfig::scenes()
    }
}

// 4: distillation of a light and a dark teacher.
fn distillation() -> Outcome {
    let cached = TRAINED.lock().unwrap().get(&1).cloned();
    let teacher = match cached {
        Some(p) => p,
        None => train_toy(1)?.0,
    };
    let scene = distill_scenes();
    let structures = scene.num_light + scene.num_dark;
    let held: Vec<(Grid<f64>, GtKeypoints<f64>)> = (0..50)
        .map(|i| generate_pair::<f64>(SynthMode::Scenes, &scene, 777, i).map(|s| (s.image_a, s.gt_a)))
        .collect::<Result<_, _>>()
        .map_err(e2s)?;
    let radius = 2.0;
    let teacher_budget = SamplerConfig { k: structures, ..SamplerConfig::default() };
    let recall = |p: &DetectorParams<f64>, s: &SamplerConfig| detector_polarity_recall(p, &held, s, radius).map_err(e2s);
    let (tl, td) = recall(&teacher, &teacher_budget)?;
    let (light, dark) = if tl >= td {
        let d = teacher.negate_input();
        (teacher, d)
    } else {
        (teacher.negate_input(), teacher)
    };
    let rl = recall(&light, &teacher_budget)?;
    let rd = recall(&dark, &teacher_budget)?;
    let teachers = format!("light teacher {rl:.2?}, dark teacher {rd:.2?}");
    ensure(rl.0 >= 0.8 && rl.1 <= 0.2 && rd.1 >= 0.8 && rd.0 <= 0.2, || teachers.clone())?;
    let student = init_params(&ArchConfig { seed: 5, ..ArchConfig::default() }).map_err(e2s)?;
    let cfg = DistillConfig { steps: 1500, order: MergeOrder::Max, ..DistillConfig::default() };
    let (student, _) = distill_train(
        &light,
        &dark,
        student,
        &mut |i| generate_pair::<f64>(SynthMode::Scenes, &scene, 555, i as u64).map(|s| s.image_a),
        &cfg,
    )
    .map_err(e2s)?;
    // The student replaces both teachers, so it gets their combined budget.
    let student_budget = SamplerConfig { k: 2 * structures, ..SamplerConfig::default() };
    let rs = recall(&student, &student_budget)?;
    let line = format!("{teachers}, student {rs:.2?}");
    ensure(rs.0 >= 0.8 && rs.1 >= 0.8, || line.clone())?;
    Ok(line)
}

fn random_bump(rng: &mut ChaCha8Rng) -> KeypointFunction {
    KeypointFunction::bump(
        (48, 48),
        (rng.gen_range(8.0..40.0), rng.gen_range(8.0..40.0)),
        rng.gen_range(5.0..12.0),
        rng.gen_range(0.2..1.0),
        rng.gen_range(0.5..1.0),
        rng.gen_range(0.0..std::f64::consts::PI),
    )
    .expect("valid bump")
}

// 5: maxima of the pointwise maximum.
fn max_theorem() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut partners, mut drawn, mut violations) = (0, 0, 0);
    while partners < 1000 {
        drawn += 1;
        let (f, g) = (random_bump(&mut rng), random_bump(&mut rng));
        let c = check_partner_merge(&f, &g).map_err(e2s)?;
        if c.verdict != MergeVerdict::Partners {
            continue;
        }
        partners += 1;
        let union: std::collections::BTreeSet<_> = [f.mode(), g.mode()].into_iter().collect();
        if c.merged_maxima != union {
            violations += 1;
        }
    }
    let mut extra = 0;
    for _ in 0..1000 {
        let (w, h) = (rng.gen_range(16..40), rng.gen_range(16..40));
        let sigma = rng.gen_range(1.0..3.0);
        let mut smooth = || gaussian_blur(&Grid::from_fn(w, h, |_, _| rng.gen::<f64>()), sigma);
        let (f, g) = (smooth().map_err(e2s)?, smooth().map_err(e2s)?);
        let merged = Grid::from_fn(w, h, |x, y| f.get(x, y).max(*g.get(x, y)));
        let union: std::collections::BTreeSet<_> = local_maxima(&f).union(&local_maxima(&g)).copied().collect();
        if !local_maxima(&merged).is_subset(&union) {
            extra += 1;
        }
    }
    let line = format!("{violations} partner violations in 1000 ({drawn} drawn), {extra} smooth pairs with extra maxima in 1000");
    ensure(violations == 0 && extra == 0, || line.clone())?;
    Ok(line)
}

fn balanced_scores(logits: &Grid<f64>, cfg: &SamplerConfig) -> Grid<f64> {
    let p = softmax_2d(logits).unwrap();
    let side = p.width().min(p.height()) as f64;
    kde_balance(&p, cfg.kde_sigma_frac * side).unwrap()
}

// 6: sampler properties.
fn sampler_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut checked = 0;
    for _ in 0..500 {
        let (w, h) = (rng.gen_range(12..48), rng.gen_range(12..48));
        let window = [3, 5, 7][rng.gen_range(0..3)];
        let cfg = SamplerConfig { k: rng.gen_range(1..40), nms_window: window, ..SamplerConfig::default() };
        let logits = Grid::from_fn(w, h, |_, _| rng.gen_range(-3.0..3.0));
        let kps = sample_keypoints(&logits, &cfg, SampleMode::Train).map_err(e2s)?;
        let q = balanced_scores(&logits, &cfg);
        let r = (window / 2) as i64;
        let strict_max = |x: usize, y: usize| {
            let v = *q.get(x, y);
            (-r..=r).all(|dy| {
                (-r..=r).all(|dx| {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    (dx == 0 && dy == 0)
                        || nx < 0
                        || ny < 0
                        || nx >= w as i64
                        || ny >= h as i64
                        || *q.get(nx as usize, ny as usize) < v
                })
            })
        };
        let selected: Vec<(usize, usize)> = kps.iter().map(|k| k.pixel()).collect();
        for &(x, y) in &selected {
            ensure(strict_max(x, y), || format!("({x},{y}) is not a strict {window}x{window} maximum"))?;
        }
        let all_maxima: Vec<(usize, usize)> =
            (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).filter(|&(x, y)| strict_max(x, y)).collect();
        ensure(selected.len() == cfg.k.min(all_maxima.len()), || "wrong number of keypoints".into())?;
        for &s in &selected {
            for &m in &all_maxima {
                if !selected.contains(&m) {
                    ensure(q.get(s.0, s.1) >= q.get(m.0, m.1), || format!("{m:?} outranks selected {s:?}"))?;
                    checked += 1;
                }
            }
        }
    }
    // A dense cluster of 25 peaks and one slightly weaker isolated peak.
    let logits = Grid::from_fn(64, 64, |x, y| {
        let dense = (8..18).contains(&x) && (8..18).contains(&y) && x % 2 == 0 && y % 2 == 0;
        if dense {
            5.0
        } else if (x, y) == (48, 48) {
            4.6
        } else {
            0.0
        }
    });
    let in_dense = |k: &dadkit::sampler::Keypoint<f64>| k.x < 20.0 && k.y < 20.0;
    let in_sparse = |k: &dadkit::sampler::Keypoint<f64>| (k.x - 48.0).abs() <= 1.0 && (k.y - 48.0).abs() <= 1.0;
    let cover = |use_kde: bool| {
        let cfg = SamplerConfig { k: 3, use_kde, ..SamplerConfig::default() };
        let kps = sample_keypoints(&logits, &cfg, SampleMode::Train).unwrap();
        (kps.iter().any(in_dense), kps.iter().any(in_sparse))
    };
    let (on, off) = (cover(true), cover(false));
    ensure(on == (true, true) && off == (true, false), || format!("kde on {on:?}, off {off:?}"))?;
    Ok(format!("500 maps, {checked} priority comparisons, two-cluster coverage on={on:?} off={off:?}"))
}

// 7: evaluation harness self-check.
fn harness_self_check() -> Outcome {
    let cfg = SceneConfig { rotation_aug: dadkit::synth::RotationAug::Random, ..SceneConfig::scenes() };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut errors = vec![];
    let mut min_rep = f64::INFINITY;
    for i in 0..200 {
        let s: PairSample<f64> = generate_pair(SynthMode::Scenes, &cfg, 70, i).map_err(e2s)?;
        let PairTransfer::Homography(h) = &s.transfer else { return Err("expected a homography pair".into()) };
        let corr: Vec<Correspondence> =
            s.gt_a.points.iter().filter_map(|&p| h.forward(p).map(|q| (p, q))).collect();
        let (est, _) = ransac_homography(&corr, 1.0, 200, &mut rng).map_err(e2s)?;
        errors.push(corner_epe(&est, h, s.image_a.shape()));
        let rep = repeatability(&s.gt_a.to_keypoint_set(), &s.gt_b.to_keypoint_set(), h, 1.0).map_err(e2s)?;
        min_rep = min_rep.min(rep.value);
    }
    let a = auc(&errors, 3.0).map_err(e2s)?;
    let line = format!("corner-error AUC@3px {a:.4}, minimum repeatability {min_rep}");
    ensure(a >= 0.99 && min_rep == 1.0, || line.clone())?;
    Ok(line)
}

// 8: subpixel refinement.
fn subpixel() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut coarse, mut fine) = (0.0, 0.0);
    for _ in 0..500 {
        let (cx, cy) = (rng.gen_range(10.0..22.0), rng.gen_range(10.0..22.0));
        let s = rng.gen_range(0.8..1.6);
        let logits = Grid::from_fn(32, 32, |x, y| {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            -d2 / (2.0 * s * s)
        });
        for (refine, acc) in [(false, &mut coarse), (true, &mut fine)] {
            let cfg = SamplerConfig { k: 1, subpixel: refine, ..SamplerConfig::default() };
            let kp = sample_keypoints(&logits, &cfg, SampleMode::Inference).map_err(e2s)?.keypoints[0];
            *acc += (kp.x - cx).hypot(kp.y - cy) / 500.0;
        }
    }
    let reduction = 1.0 - fine / coarse;
    let line = format!("mean error {coarse:.4} -> {fine:.4} px ({:.0}% reduction)", 100.0 * reduction);
    ensure(reduction >= 0.3, || line.clone())?;
    Ok(line)
}

fn hash_dir(dir: &Path) -> BTreeMap<String, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let digest = Sha256::digest(std::fs::read(&p).unwrap());
                let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), hex);
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn dadkit(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dadkit")).args(args).output().map_err(e2s)?;
    ensure(out.status.success(), || {
        format!("`dadkit {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
    })
}

/// Runs the whole command pipeline under `root` and hashes every artifact.
fn pipeline(root: &Path) -> Result<BTreeMap<String, BTreeMap<String, String>>, String> {
    let p = |s: &str| root.join(s).display().to_string();
    let steps: Vec<(&str, Vec<String>)> = vec![
        ("synth-toy", vec!["synth".into(), "--mode".into(), "toy".into(), "--num-pairs".into(), "20".into(), "--seed".into(), "7".into(), "--out".into(), p("toy")]),
        ("synth-scenes", vec!["synth".into(), "--mode".into(), "scenes".into(), "--num-pairs".into(), "6".into(), "--negation-aug".into(), "rgb".into(), "--seed".into(), "3".into(), "--threads".into(), "2".into(), "--out".into(), p("scenes")]),
        ("train", vec!["train".into(), "--data".into(), p("toy"), "--set".into(), "steps=40".into(), "--seed".into(), "1".into(), "--out".into(), p("train")]),
        ("distill", vec!["distill".into(), "--light".into(), p("train/weights.dadw"), "--mode".into(), "scenes".into(), "--data".into(), p("scenes"), "--set".into(), "steps=12".into(), "--out".into(), p("distill")]),
        ("detect", vec!["detect".into(), "--weights".into(), p("distill/student.dadw"), "--data".into(), p("scenes"), "--mode".into(), "inference".into(), "--topk".into(), "512".into(), "--dump-scores".into(), "--overlay".into(), "--out".into(), p("detect")]),
        ("eval", vec!["eval".into(), "--data".into(), p("scenes"), "--keypoints".into(), p("detect"), "--set".into(), "mode=scenes".into(), "--out".into(), p("eval")]),
        ("eval-gt", vec!["eval".into(), "--data".into(), p("scenes"), "--keypoints".into(), "gt".into(), "--out".into(), p("eval_gt")]),
        ("gradcheck", vec!["gradcheck".into(), "--instances".into(), "2".into(), "--out".into(), p("gradcheck")]),
    ];
    let mut hashes = BTreeMap::new();
    for (name, args) in steps {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        dadkit(&args)?;
        let out = Path::new(args[args.len() - 1]);
        hashes.insert(name.to_string(), hash_dir(out));
    }
    Ok(hashes)
}

// 9: determinism of every command.
fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().map_err(e2s)?, tempfile::tempdir().map_err(e2s)?);
    let (ha, hb) = (pipeline(a.path())?, pipeline(b.path())?);
    let mut files = 0;
    for (cmd, files_a) in &ha {
        let files_b = &hb[cmd];
        ensure(files_a == files_b, || format!("`{cmd}` artifacts differ between runs"))?;
        ensure(!files_a.is_empty(), || format!("`{cmd}` wrote nothing"))?;
        files += files_a.len();
    }
    let detect_ok = ha["detect"]
        .keys()
        .filter(|k| k.ends_with(".csv"))
        .all(|k| {
            let text = std::fs::read_to_string(a.path().join("detect").join(k)).unwrap();
            text.lines().count() - 1 <= 512
        });
    ensure(detect_ok, || "more than 512 keypoints in a detection file".into())?;
    let metrics = std::fs::read_to_string(a.path().join("eval_gt/metrics.txt")).map_err(e2s)?;
    ensure(metrics.contains("repeatability=1.000000"), || format!("ground-truth eval: {metrics}"))?;
    Ok(format!("{} commands, {files} artifacts byte-identical across reruns", ha.len()))
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, u64, fn() -> Outcome); 9] = [
        (1, "gradient suite", 120, gradients),
        (2, "toy expected-reward table", 30, strategy_rewards),
        (3, "emergence of a single polarity", 1800, emergence),
        (4, "distillation recovers both polarities", 900, distillation),
        (5, "maxima of the pointwise maximum", 60, max_theorem),
        (6, "sampler properties", 60, sampler_properties),
        (7, "evaluation harness self-check", 120, harness_self_check),
        (8, "subpixel refinement", 60, subpixel),
        (9, "command determinism", 600, determinism),
    ];
    let mut failed = 0;
    for (n, name, limit, f) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        let result = result.and_then(|d| {
            if secs < limit as f64 {
                Ok(d)
            } else {
                Err(format!("{d}; took {secs:.0}s, limit {limit}s"))
            }
        });
        match result {
            Ok(d) => println!("criterion {n} PASS  {name} ({secs:.1}s): {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n} FAIL  {name} ({secs:.1}s): {d}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
