//! Acceptance gate: one PASS/FAIL line per criterion.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use fpi_core::metrics::{auroc, average_precision, dice_ceiling};
use fpi_core::nn::{check_gradients, init_model, load_checkpoint, Head, ModelConfig, ModelParams, ParamKind, Tensor};
use fpi_core::rng::SeededRng;
use fpi_core::synth::{alpha_class, interpolate, sample_alpha, sample_patch_spec, AlphaMode, Label, NUM_CLASSES};
use fpi_core::testbench::{
    apply_anomaly, apply_reflection, apply_sink_source, apply_uniform_shift, deformation_source_point, sample_sphere,
    Anomaly, SphereAnomalySpec, TestbenchConfig,
};
use fpi_core::volume::{SliceImage, SliceSource, Volume};

const PHANTOM_SEED: &str = "42";
const TESTSET_SEED: &str = "44";
const TRAIN_SEED: &str = "46";

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn fpi(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_fpi"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("fpi {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

// ---------------------------------------------------------------- criterion 1

fn slice(d: usize, pixels: Vec<f32>) -> SliceImage {
    let source = SliceSource {
        volume_id: "s".into(),
        axis: 0,
        index: 0,
    };
    SliceImage::new(d, d, pixels, source).unwrap()
}

fn fpi_algebra() -> Verdict {
    let mut rng = SeededRng::new(1001);
    let mut violations = Vec::new();
    let instances = 10_000;
    for n in 0..instances {
        let mode = AlphaMode::ALL[n % 4];
        let d = 16 + rng.below(49);
        // Coarse levels so that A == B happens inside most patches.
        let mut px = || (0..d * d).map(|_| rng.below(8) as f32 / 7.0).collect::<Vec<_>>();
        let (a, b) = (px(), px());
        let (sa, sb) = (slice(d, a.clone()), slice(d, b.clone()));
        let patch = sample_patch_spec(&mut rng, d).unwrap();
        let alpha = sample_alpha(&mut rng, mode);
        let pb = patch.bounds;

        let x = interpolate(&sa, &sb, &patch, alpha, mode).unwrap();
        let labels = x.label.alpha_values();
        let zero = interpolate(&sa, &sb, &patch, 0.0, AlphaMode::Continuous).unwrap();
        let one = interpolate(&sa, &sb, &patch, 1.0, AlphaMode::Continuous).unwrap();
        if zero.input.pixels != a || zero.label.alpha_values().iter().any(|&l| l != 0.0) {
            violations.push(format!("instance {n}: alpha = 0 is not the identity"));
        }
        for p in 0..d * d {
            let inside = pb.contains(p / d, p % d);
            let swapped = if inside { b[p] } else { a[p] };
            if one.input.pixels[p] != swapped {
                violations.push(format!("instance {n}: alpha = 1 pixel {p} is not swapped"));
            }
            let v = x.input.pixels[p];
            if !(a[p].min(b[p]) <= v && v <= a[p].max(b[p])) {
                violations.push(format!("instance {n}: pixel {p} outside the convex bound"));
            }
            if !inside && (v != a[p] || labels[p] != 0.0) {
                violations.push(format!("instance {n}: pixel {p} changed outside the patch"));
            }
            let want = if !inside || a[p] == b[p] {
                0.0
            } else if mode == AlphaMode::ContinuousRoundUp && alpha > 0.0 {
                1.0
            } else {
                alpha as f32
            };
            if labels[p] != want {
                violations.push(format!("instance {n}: label {} at pixel {p}, expected {want}", labels[p]));
            }
        }
        if let Label::Classes(c) = &x.label {
            let k = alpha_class(alpha).unwrap();
            if c.iter().any(|&v| v != 0 && v != k) {
                violations.push(format!("instance {n}: stray class index"));
            }
        }
        if violations.len() > 10 {
            break;
        }
    }
    verdict(
        violations.is_empty(),
        if violations.is_empty() {
            format!("{instances} instances, all invariants exact")
        } else {
            violations.join("; ")
        },
    )
}

// ---------------------------------------------------------------- criterion 2

fn ramp(shape: [usize; 3]) -> Volume {
    let d = shape[2] as f64;
    let n: usize = shape.iter().product();
    Volume::new("ramp", shape, (0..n).map(|x| ((x % shape[2]) as f64 / d) as f32).collect()).unwrap()
}

fn generator_suite() -> Verdict {
    let mut rng = SeededRng::new(2002);
    let cfg = TestbenchConfig::default();
    let mut violations = Vec::new();
    let mut worst_ramp = 0.0f64;
    let cases = 1000;
    for n in 0..cases {
        let shape = [24 + rng.below(17), 24 + rng.below(17), 24 + rng.below(17)];
        let len: usize = shape.iter().product();
        let v = Volume::new("v", shape, (0..len).map(|_| rng.unit() as f32).collect()).unwrap();
        let mut spec = sample_sphere(&mut rng.child(n as u64), shape, &cfg).unwrap();
        let case = apply_anomaly(&v, &spec).unwrap();
        for (x, (&after, &before)) in case.volume.voxels().iter().zip(v.voxels()).enumerate() {
            let (k, j, i) = (x / (shape[1] * shape[2]), (x / shape[2]) % shape[1], x % shape[2]);
            if !spec.contains(k, j, i) && after != before {
                violations.push(format!("case {n}: voxel {x} outside the sphere changed"));
                break;
            }
        }
        let d = shape[2] as f64;
        match spec.anomaly {
            Anomaly::UniformShift { offset } => {
                if offset.iter().any(|o| !(0.02 * d..=0.05 * d).contains(&o.abs())) {
                    violations.push(format!("case {n}: shift {offset:?} outside [0.02d, 0.05d]"));
                }
            }
            Anomaly::Reflection { axis } => {
                let twice = apply_reflection(&case.volume, &spec).unwrap();
                for p in spec.voxels(shape) {
                    let mut q = p;
                    q[axis] = shape[axis] - 1 - p[axis];
                    if spec.contains(q[0], q[1], q[2]) && twice.volume.get(p[0], p[1], p[2]) != v.get(p[0], p[1], p[2]) {
                        violations.push(format!("case {n}: reflection is not an involution at {p:?}"));
                        break;
                    }
                }
            }
            _ => {}
        }

        // Boundary identity at s = 1 for a sphere with integer center and radius.
        let c = spec.center.map(|x| x.round());
        let r = spec.radius().round().max(1.0);
        for anomaly in [Anomaly::Sink, Anomaly::Source] {
            let grid = SphereAnomalySpec {
                center: c,
                diameter: 2.0 * r,
                anomaly,
            };
            let axis = n % 3;
            let mut p = c.map(|x| x as usize);
            p[axis] += r as usize;
            let q = deformation_source_point(&grid, p).unwrap();
            if q != p.map(|x| x as f64) {
                violations.push(format!("case {n}: boundary voxel {p:?} moves to {q:?}"));
            }
        }

        // Ramp oracles along the width axis.
        let field = ramp(shape);
        let last = d - 1.0;
        let offset = [0, 1, 2].map(|_| rng.uniform(0.02 * d, 0.05 * d) * if rng.coin() { 1.0 } else { -1.0 });
        spec.anomaly = Anomaly::UniformShift { offset };
        let shifted = apply_uniform_shift(&field, &spec).unwrap();
        for p in spec.voxels(shape) {
            let want = (p[2] as f64 + offset[2]).round().clamp(0.0, last) / d;
            worst_ramp = worst_ramp.max((shifted.volume.get(p[0], p[1], p[2]) as f64 - want).abs());
        }
        for anomaly in [Anomaly::Sink, Anomaly::Source] {
            spec.anomaly = anomaly;
            let deformed = apply_sink_source(&field, &spec).unwrap();
            for p in spec.voxels(shape) {
                let di = p[2] as f64 - spec.center[2];
                let s2: f64 = (0..3).map(|a| (p[a] as f64 - spec.center[a]).powi(2)).sum::<f64>() / spec.radius().powi(2);
                let x = match anomaly {
                    Anomaly::Source => spec.center[2] + s2 * di,
                    _ => p[2] as f64 + (1.0 - s2) * di,
                };
                let want = x.clamp(0.0, last) / d;
                worst_ramp = worst_ramp.max((deformed.volume.get(p[0], p[1], p[2]) as f64 - want).abs());
            }
        }
        if violations.len() > 10 {
            break;
        }
    }
    if worst_ramp >= 1e-6 {
        violations.push(format!("ramp oracle error {worst_ramp:.3e}"));
    }
    let ok = violations.is_empty();
    verdict(
        ok,
        if ok {
            format!("{cases} cases; worst ramp-oracle error {worst_ramp:.2e}")
        } else {
            violations.join("; ")
        },
    )
}

// ---------------------------------------------------------------- criterion 3

fn gradient_check() -> Verdict {
    let mut worst = 0.0f64;
    let mut worst_group = String::new();
    let mut groups = 0;
    for (seed, head) in [(31, Head::Sigmoid), (32, Head::Softmax)] {
        let config = ModelConfig {
            input_size: 8,
            in_channels: 1,
            head,
            width_factor: 1,
            stage_widths: vec![1, 1],
            blocks_per_stage: vec![1, 1],
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        };
        let mut rng = SeededRng::new(seed);
        let mut params: ModelParams<f64> = init_model(&config, &mut rng).unwrap();
        for t in &mut params.tensors {
            if matches!(t.kind, ParamKind::BnScale | ParamKind::BnOffset | ParamKind::Bias) {
                t.data.iter_mut().for_each(|v| *v += rng.uniform(-0.3, 0.3));
            }
        }
        let images = Tensor::from_vec(2, 1, 8, 8, (0..128).map(|_| rng.unit()).collect());
        let label = match head {
            Head::Sigmoid => Label::Soft((0..128).map(|_| rng.unit() as f32).collect()),
            Head::Softmax => Label::Classes((0..128).map(|_| rng.below(NUM_CLASSES) as u8).collect()),
        };
        let report = check_gradients(&params, &images, &label, 1e-3).unwrap();
        for g in &report.groups {
            groups += 1;
            if g.relative_error > worst {
                worst = g.relative_error;
                worst_group = format!("{} ({})", g.name, head.name());
            }
        }
    }
    verdict(
        worst < 1e-4,
        format!("{groups} parameter groups, max relative error {worst:.2e} at {worst_group}"),
    )
}

// ---------------------------------------------------------------- criterion 4

fn brute_force(scores: &[f64], labels: &[bool]) -> (f64, f64, f64) {
    let p = labels.iter().filter(|&&l| l).count() as f64;
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut ap, mut prev_recall, mut dice) = (0.0, 0.0, 0.0f64);
    for t in thresholds {
        let (mut tp, mut fp) = (0.0, 0.0);
        for (s, &l) in scores.iter().zip(labels) {
            if *s >= t {
                if l {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        ap += (tp / p - prev_recall) * tp / (tp + fp);
        prev_recall = tp / p;
        dice = dice.max(2.0 * tp / (tp + fp + p));
    }
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (sp, &lp) in scores.iter().zip(labels) {
        for (sn, &ln) in scores.iter().zip(labels) {
            if lp && !ln {
                pairs += 1.0;
                wins += if sp > sn {
                    1.0
                } else if sp == sn {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (ap, wins / pairs, dice)
}

fn metric_oracles() -> Verdict {
    let mut rng = SeededRng::new(4004);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = 2 + rng.below(199);
        let levels = 1 + rng.below(30);
        let scores: Vec<f64> = (0..n).map(|_| rng.below(levels) as f64 / levels as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.coin()).collect();
        let pos = rng.below(n);
        labels[pos] = true;
        labels[(pos + 1 + rng.below(n - 1)) % n] = false;
        let (ap, auc, dice) = brute_force(&scores, &labels);
        worst = worst
            .max((average_precision(&scores, &labels).unwrap() - ap).abs())
            .max((auroc(&scores, &labels).unwrap() - auc).abs())
            .max((dice_ceiling(&scores, &labels).unwrap().dice - dice).abs());
    }
    let example = auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
    verdict(
        worst <= 1e-9 && example == 0.75,
        format!("1000 instances, max deviation {worst:.1e}; worked AUROC example = {example}"),
    )
}

// ---------------------------------------------------------------- criteria 5-8

/// Shared phantom benchmark: corpus, test set and one trained model per mode.
struct Bench {
    root: PathBuf,
    manifest: PathBuf,
    testset: PathBuf,
    setup: Duration,
}

impl Bench {
    fn new(root: &Path) -> Result<Self, String> {
        let clock = Instant::now();
        let data = root.join("phantoms");
        fpi(&["phantom", "--count", "100", "--shape", "64", "--seed", PHANTOM_SEED, "--out", s(&data)])?;
        let manifest = data.join("manifest.json");
        let testset = root.join("testset");
        fpi(&["make-testset", "--manifest", s(&manifest), "--seed", TESTSET_SEED, "--out", s(&testset)])?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            testset,
            setup: clock.elapsed(),
        })
    }

    fn run_dir(&self, mode: AlphaMode) -> PathBuf {
        self.root.join(format!("run_{mode}"))
    }

    fn train(&self, mode: AlphaMode) -> Result<(), String> {
        let out = self.run_dir(mode);
        let m = mode.to_string();
        fpi(&["train", "--manifest", s(&self.manifest), "--out", s(&out), "--mode", &m, "--seed", TRAIN_SEED])
    }

    /// Scores the test set with a checkpoint and returns the parsed report.
    fn evaluate(&self, checkpoint: &Path, name: &str) -> Result<serde_json::Value, String> {
        let scores = self.root.join(format!("scores_{name}"));
        let report = self.root.join(format!("report_{name}"));
        fpi(&["score", "--checkpoint", s(checkpoint), "--volumes", s(&self.testset), "--out", s(&scores)])?;
        fpi(&["evaluate", "--testset", s(&self.testset), "--scores", s(&scores), "--out", s(&report)])?;
        let text = fs::read_to_string(report.join("report.json")).map_err(|e| e.to_string())?;
        serde_json::from_str(&text).map_err(|e| e.to_string())
    }

    fn model_report(&self, mode: AlphaMode) -> Result<serde_json::Value, String> {
        self.train(mode)?;
        self.evaluate(&self.run_dir(mode).join("model.ckpt"), &mode.to_string())
    }
}

fn get(report: &serde_json::Value, a: &str, b: &str) -> f64 {
    report[a][b].as_f64().unwrap_or(f64::NAN)
}

fn end_to_end(bench: &Bench, continuous: &serde_json::Value, elapsed: Duration) -> Verdict {
    let pix_auroc = get(continuous, "pixel", "auroc");
    let subj_ap = get(continuous, "subject", "ap");
    let prevalence = get(continuous, "subject", "prevalence");
    let minutes = elapsed.as_secs_f64() / 60.0;
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    verdict(
        pix_auroc >= 0.80 && subj_ap >= prevalence + 0.15 && minutes <= 60.0,
        format!(
            "pixel AUROC {pix_auroc:.4} (>= 0.80), subject AP {subj_ap:.4} (>= {:.4}), \
             wall time {minutes:.1} min on {cores} core(s) incl. {:.0} s data setup",
            prevalence + 0.15,
            bench.setup.as_secs_f64()
        ),
    )
}

fn ablation(aps: &[(AlphaMode, f64)]) -> Verdict {
    let ap = |m: AlphaMode| aps.iter().find(|(x, _)| *x == m).map_or(f64::NAN, |x| x.1);
    let good = [AlphaMode::Continuous, AlphaMode::Discrete];
    let weak = [AlphaMode::Binary, AlphaMode::ContinuousRoundUp];
    let pass = good.iter().all(|&g| weak.iter().all(|&w| ap(g) > ap(w)));
    let detail = aps
        .iter()
        .map(|(m, v)| format!("{m} {v:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(pass, format!("overall pixel AP: {detail}"))
}

/// Every file under `dir` with its bytes; wall-clock fields are dropped from
/// training logs.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let mut bytes = fs::read(&p).unwrap();
            if p.extension().is_some_and(|x| x == "jsonl") {
                let lines: Vec<String> = String::from_utf8(bytes)
                    .unwrap()
                    .lines()
                    .map(|l| {
                        let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                        v.as_object_mut().unwrap().remove("wall_time_s");
                        v.to_string()
                    })
                    .collect();
                bytes = lines.join("\n").into_bytes();
            }
            files.push((p.strip_prefix(dir).unwrap().to_path_buf(), bytes));
        }
    }
    files.sort();
    files
}

fn determinism(bench: &Bench) -> Result<Verdict, String> {
    let root = bench.root.join("determinism");
    let mut checked = Vec::new();
    let mut differing = Vec::new();
    let mut compare = |name: &str, run: &dyn Fn(&Path) -> Result<(), String>| -> Result<(), String> {
        let out = root.join(name);
        run(&out)?;
        let ta = tree(&out);
        fs::remove_dir_all(&out).map_err(|e| e.to_string())?;
        run(&out)?;
        let tb = tree(&out);
        if ta.is_empty() || ta != tb {
            differing.push(name.to_string());
        }
        checked.push(format!("{name} ({} files)", ta.len()));
        Ok(())
    };
    let m = s(&bench.manifest).to_string();
    compare("phantom", &|out| {
        fpi(&["phantom", "--count", "100", "--shape", "64", "--seed", PHANTOM_SEED, "--out", s(out)])
    })?;
    compare("synth", &|out| {
        fpi(&["synth", "--manifest", &m, "--mode", "continuous", "--seed", "3", "--count", "200", "--out", s(out)])
    })?;
    compare("make-testset", &|out| {
        fpi(&["make-testset", "--manifest", &m, "--seed", TESTSET_SEED, "--out", s(out)])
    })?;
    compare("train", &|out| {
        fpi(&[
            "--threads", "1", "train", "--manifest", &m, "--out", s(out), "--mode", "discrete", "--seed", "5",
            "--epochs", "2", "--max-batches", "4",
        ])
    })?;
    Ok(verdict(
        differing.is_empty(),
        if differing.is_empty() {
            format!("identical reruns: {}", checked.join(", "))
        } else {
            format!("outputs differ for {}", differing.join(", "))
        },
    ))
}

fn swa_contract(bench: &Bench, discrete_ap: f64) -> Result<Verdict, String> {
    let run = bench.run_dir(AlphaMode::Discrete);
    fpi(&["swa", "--config", s(&run.join("run_config.json")), "--checkpoint", s(&run.join("model.ckpt"))])?;
    let mut snaps: Vec<PathBuf> = fs::read_dir(run.join("swa_snapshots"))
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().path())
        .collect();
    snaps.sort();
    let loaded: Vec<ModelParams<f32>> = snaps.iter().map(|p| load_checkpoint(p).unwrap()).collect();
    let mean = load_checkpoint(&run.join("swa_mean.ckpt")).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (ti, t) in mean.tensors.iter().enumerate() {
        for (e, &v) in t.data.iter().enumerate() {
            let naive = loaded.iter().map(|s| s.tensors[ti].data[e] as f64).sum::<f64>() / loaded.len() as f64;
            // Relative above unit magnitude: the checkpoint stores f32.
            worst = worst.max((v as f64 - naive).abs() / naive.abs().max(1.0));
        }
    }
    let report = bench.evaluate(&run.join("swa.ckpt"), "discrete_swa")?;
    let swa_ap = get(&report, "pixel", "ap");
    Ok(verdict(
        loaded.len() == 10 && worst <= 1e-7 && (swa_ap - discrete_ap).abs() <= 0.1,
        format!(
            "{} snapshots, mean deviation {worst:.1e}, pixel AP {swa_ap:.4} vs {discrete_ap:.4} before averaging",
            loaded.len()
        ),
    ))
}

// ---------------------------------------------------------------- driver

fn record(results: &mut Vec<bool>, n: usize, title: &str, limit: Option<Duration>, f: impl FnOnce() -> Verdict) {
    let clock = Instant::now();
    let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    });
    let t = clock.elapsed();
    let in_time = limit.is_none_or(|l| t <= l);
    let pass = v.pass && in_time;
    let budget = limit.map_or(String::new(), |l| format!(" / {} s", l.as_secs()));
    println!(
        "criterion {n} {} {title}: {} [{:.1} s{budget}]",
        if pass { "PASS" } else { "FAIL" },
        v.detail,
        t.as_secs_f64()
    );
    results.push(pass);
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut results = Vec::new();
    record(&mut results, 1, "interpolation algebra", Some(Duration::from_secs(60)), fpi_algebra);
    record(&mut results, 2, "anomaly generators", Some(Duration::from_secs(120)), generator_suite);
    record(&mut results, 3, "gradient check", Some(Duration::from_secs(300)), gradient_check);
    record(&mut results, 4, "metric oracles", None, metric_oracles);

    let dir = tempfile::tempdir().unwrap();
    let clock = Instant::now();
    let bench = Bench::new(dir.path());
    let reports: Vec<(AlphaMode, Result<serde_json::Value, String>)> = match &bench {
        Ok(b) => {
            let mut r = vec![(AlphaMode::Continuous, b.model_report(AlphaMode::Continuous))];
            let continuous_time = clock.elapsed();
            record(&mut results, 5, "desk-scale end to end", None, || match &r[0].1 {
                Ok(rep) => end_to_end(b, rep, continuous_time),
                Err(e) => verdict(false, e.clone()),
            });
            for mode in [AlphaMode::Discrete, AlphaMode::Binary, AlphaMode::ContinuousRoundUp] {
                r.push((mode, b.model_report(mode)));
            }
            r
        }
        Err(e) => {
            record(&mut results, 5, "desk-scale end to end", None, || verdict(false, e.clone()));
            Vec::new()
        }
    };
    let aps: Vec<(AlphaMode, f64)> = reports
        .iter()
        .map(|(m, r)| (*m, r.as_ref().map_or(f64::NAN, |r| get(r, "pixel", "ap"))))
        .collect();
    record(&mut results, 6, "interpolation-factor ablation", None, || {
        if aps.len() == 4 {
            ablation(&aps)
        } else {
            verdict(false, "models unavailable")
        }
    });
    record(&mut results, 7, "determinism", None, || match &bench {
        Ok(b) => determinism(b).unwrap_or_else(|e| verdict(false, e)),
        Err(e) => verdict(false, e.clone()),
    });
    record(&mut results, 8, "weight averaging", None, || match &bench {
        Ok(b) => {
            let ap = aps.iter().find(|(m, _)| *m == AlphaMode::Discrete).map_or(f64::NAN, |x| x.1);
            swa_contract(b, ap).unwrap_or_else(|e| verdict(false, e))
        }
        Err(e) => verdict(false, e.clone()),
    });

    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
