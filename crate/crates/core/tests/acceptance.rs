//! Acceptance criteria, one pass/fail line each. Runs without the libtest
//! harness so the lines always reach stdout; exits nonzero on any failure.

use std::time::Instant;

use flattenet::complexity::{self, baselines, Backbone};
use flattenet::gradcheck::{self, DEFAULT_EPS, DEFAULT_TOL};
use flattenet::head::equivalence::{check_config, GRAD_TOL, LOSS_TOL};
use flattenet::head::{shipped, DwsgConvSpec, FlattenConfig, FlatteningModule, TargetKind};
use flattenet::io;
use flattenet::layers::conv::conv2d;
use flattenet::layers::ConvSpec;
use flattenet::shuffle::{self, Rearrangement};
use flattenet::toylab::{protocol, reference_options, train_depth, DEPTH_RUNS};
use flattenet::{ParamStore, Tensor};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn head_params_oracle(cfg: &FlattenConfig) -> usize {
    let mut store = ParamStore::<f32>::new(0);
    FlatteningModule::new(&mut store, cfg).expect("head builds");
    store.total_numel()
}

fn parameter_counts() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    let mut row = |label: &str, analytic: u64, oracle: usize, reference_m: f64| {
        let m = analytic as f64 / 1e6;
        let pass = analytic == oracle as u64 && (m - reference_m).abs() <= 0.01 + 1e-9;
        ok &= pass;
        lines.push(format!("{label} {analytic} (oracle {oracle}, ref {reference_m}M)"));
    };
    for (name, reference) in [("table1", 0.23), ("table2_expand8", 0.71), ("table7", 1.40)] {
        let cfg = shipped::load(name).unwrap();
        let analytic = complexity::count_params(&complexity::head_descriptor(&cfg, 8)).unwrap();
        row(name, analytic, head_params_oracle(&cfg), reference);
    }
    for (desc, reference) in [(baselines::regular_pointwise(8), 4.19), (baselines::naive_conv3x3(8), 75.50)] {
        let analytic = complexity::count_params(&desc).unwrap();
        let oracle = complexity::instantiate(&desc).unwrap().total_numel();
        row(&desc.name, analytic, oracle, reference);
    }
    check(ok, lines.join("; "))
}

fn backbone_totals() -> Outcome {
    let cfg = shipped::load("table1").unwrap();
    let r = complexity::describe(&cfg, Some(Backbone::Resnet50), (256, 256)).map_err(|e| e.to_string())?;
    let oracle = complexity::instantiate(&Backbone::Resnet50.descriptor(256).unwrap()).unwrap().total_numel() + head_params_oracle(&cfg);
    let params_ok = (r.params_m() / 23.77 - 1.0).abs() <= 0.01 && oracle as u64 == r.total_params;
    let gmac_ok = (r.gmacs() / 4.99 - 1.0).abs() <= 0.10;
    check(
        params_ok && gmac_ok,
        format!("ResNet-50 + head: {:.3}M params (ref 23.77M ±1%), {:.3} GMAC at 256×256 (ref 4.99 ±10%)", r.params_m(), r.gmacs()),
    )
}

fn equivalence() -> Outcome {
    let mut worst = (0.0f64, 0.0f64);
    let mut failed = Vec::new();
    let mut n = 0;
    for cfg in shipped::all() {
        for kind in [TargetKind::Continuous, TargetKind::Discrete] {
            let r = check_config(&cfg, kind, 17).map_err(|e| format!("{}: {e}", cfg.name))?;
            worst.0 = worst.0.max(r.loss_diff);
            worst.1 = worst.1.max(r.grad_diff);
            n += 1;
            if !(r.passed && r.loss_diff <= LOSS_TOL && r.grad_diff <= GRAD_TOL) {
                failed.push(format!("{}/{kind:?}", cfg.name));
            }
        }
    }
    check(
        failed.is_empty(),
        format!("{n} config×target checks, max |Δloss| {:.1e}, max |Δgrad| {:.1e}{}", worst.0, worst.1, fail_suffix(&failed)),
    )
}

fn fail_suffix(failed: &[String]) -> String {
    if failed.is_empty() {
        String::new()
    } else {
        format!(", failed: {}", failed.join(", "))
    }
}

fn bits(t: &Tensor<f64>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn bijections() -> Outcome {
    let mut cases = 0;
    let mut failed = Vec::new();
    for n in 1..=2 {
        for r in 1..=3 {
            for c in 1..=3 {
                for h in 1..=3 {
                    for w in 1..=3 {
                        let x = Tensor::<f64>::uniform((n, c * r * r, h, w), 1.0, cases as u64);
                        let y = shuffle::pixel_shuffle(&x, r).unwrap();
                        if bits(&shuffle::pixel_unshuffle(&y, r).unwrap()) != bits(&x) {
                            failed.push(format!("ps r={r} c={c} h={h} w={w}"));
                        }
                        cases += 1;
                    }
                }
            }
        }
    }
    for c in 1..=12 {
        for g in (1..=c).filter(|g| c % g == 0) {
            let x = Tensor::<f64>::uniform((2, c, 2, 1), 1.0, cases as u64);
            let y = shuffle::channel_shuffle(&x, g).unwrap();
            if bits(&shuffle::channel_shuffle(&y, c / g).unwrap()) != bits(&x) {
                failed.push(format!("cs c={c} g={g}"));
            }
            cases += 1;
        }
    }
    let r = Rearrangement::standard(8, 32).unwrap();
    let x = Tensor::<f64>::uniform((2, 2048, 8, 8), 1.0, 99);
    let y = r.apply(&x).unwrap();
    let round = bits(&r.inverse(&y).unwrap()) == bits(&x) && y.dims() == (2, 32, 64, 64).into();
    if !round {
        failed.push("table1 R⁻¹∘R".into());
    }
    check(
        failed.is_empty(),
        format!("{cases} shuffle round-trips + R⁻¹∘R on 2048×8×8 → 32×64×64{}", fail_suffix(&failed)),
    )
}

fn gradients() -> Outcome {
    let reports = gradcheck::run_all(DEFAULT_EPS, DEFAULT_TOL).map_err(|e| e.to_string())?;
    let worst = reports.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).unwrap();
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed).map(|r| r.name.clone()).collect();
    check(
        failed.is_empty(),
        format!(
            "{} ops × 3 shapes, worst rel-err {:.2e} ({}), tol {DEFAULT_TOL:e}{}",
            gradcheck::OPS.len(),
            worst.max_rel_err,
            worst.name,
            fail_suffix(&failed)
        ),
    )
}

/// Reachability measured by pushing one-hot channels through the real
/// pointwise convs with all-ones weights.
fn measured_dense(spec: &DwsgConvSpec) -> bool {
    let c = spec.c_in;
    let mut eye = vec![0.0f32; c * c];
    for i in 0..c {
        eye[i * c + i] = 1.0;
    }
    let x = Tensor::from_vec((c, c, 1, 1), eye).unwrap();
    let ones = |s: ConvSpec| Tensor::<f32>::ones(s.weight_dims());
    let (p1, p2) = (spec.first_pointwise(), spec.second_pointwise());
    let y = conv2d(&x, &ones(p1), None, &p1).unwrap();
    let y = shuffle::channel_shuffle(&y, spec.g2).unwrap();
    let y = conv2d(&y, &ones(p2), None, &p2).unwrap();
    y.data().iter().all(|&v| v > 0.0)
}

fn density() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for (name, expect) in [("table1", true), ("table7", true), ("table1 g2=1", false)] {
        let mut cfg = shipped::load(name.split(' ').next().unwrap()).unwrap();
        if !expect {
            cfg.layers[0].g2 = 1;
        }
        for (i, spec) in cfg.layer_specs().iter().enumerate() {
            let m = shuffle::connectivity_matrix(spec.g1, spec.g2, spec.g3, spec.c_in).unwrap();
            let measured = measured_dense(spec);
            let pass = m.is_dense() == expect && measured == expect;
            ok &= pass;
            lines.push(format!("{name}[{i}] {} ({}/{} ones)", if m.is_dense() { "dense" } else { "sparse" }, m.count_ones(), m.rows() * m.cols()));
        }
    }
    check(ok, lines.join("; "))
}

fn trainability_and_determinism() -> (Outcome, Outcome) {
    let opts = reference_options();
    let mut lines = Vec::new();
    let mut ok = true;
    let mut first = None;
    for run in DEPTH_RUNS {
        let t0 = Instant::now();
        let (model, out) = match train_depth::<f32>(run, 1, &opts, |_| {}) {
            Ok(v) => v,
            Err(e) => return (Err(format!("depth {}: {e}", run.depth)), Err("not run".into())),
        };
        let bound = if run.depth == 5 { 0.25 } else { 0.5 };
        let mut pass = out.loss_ratio < bound;
        if run.depth == 5 {
            pass &= out.pckh > 0.9;
        }
        ok &= pass;
        lines.push(format!(
            "depth {} ({}, {}px): loss ratio {:.3} (< {bound}), PCKh@0.5 {:.2}, {:.0}s",
            run.depth,
            run.head,
            run.image_size,
            out.loss_ratio,
            out.pckh,
            t0.elapsed().as_secs_f64()
        ));
        if first.is_none() {
            first = Some((model, out));
        }
    }
    let train = check(ok, lines.join("; "));

    let (model, out) = first.unwrap();
    let again = train_depth::<f32>(protocol::DEPTH_RUNS[0], 1, &opts, |_| {});
    let determinism = again.map_err(|e| e.to_string()).and_then(|(model2, out2)| {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        io::save_checkpoint(&model, &a, Some(&out.history)).map_err(|e| e.to_string())?;
        io::save_checkpoint(&model2, &b, Some(&out2.history)).map_err(|e| e.to_string())?;
        let read = |p: &std::path::Path, f: &str| std::fs::read(p.join(f)).unwrap();
        let hist = out.history.to_jsonl() == out2.history.to_jsonl();
        let params = read(&a, io::PARAMS_FILE) == read(&b, io::PARAMS_FILE);
        let manifest = read(&a, io::MANIFEST_FILE) == read(&b, io::MANIFEST_FILE);
        check(
            hist && params && manifest,
            format!(
                "depth-5 run repeated: history {}, params.flt1 {} ({} bytes), manifest {}",
                same(hist),
                same(params),
                read(&a, io::PARAMS_FILE).len(),
                same(manifest)
            ),
        )
    });
    (train, determinism)
}

fn same(b: bool) -> &'static str {
    if b {
        "identical"
    } else {
        "DIFFERS"
    }
}

fn report(n: usize, title: &str, outcome: &Outcome, secs: f64) -> bool {
    let (tag, detail) = match outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("[{tag}] {n}. {title} ({secs:.1}s): {detail}");
    outcome.is_ok()
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut all = true;
    let timed = |f: fn() -> Outcome| {
        let t = Instant::now();
        let o = f();
        (o, t.elapsed().as_secs_f64())
    };
    let criteria: [(&str, fn() -> Outcome); 6] = [
        ("parameter counts", parameter_counts),
        ("backbone totals", backbone_totals),
        ("equivalence", equivalence),
        ("bijections", bijections),
        ("gradient suite", gradients),
        ("density", density),
    ];
    for (i, (title, f)) in criteria.into_iter().enumerate() {
        let (o, s) = timed(f);
        all &= report(i + 1, title, &o, s);
    }
    let t = Instant::now();
    let (train, det) = trainability_and_determinism();
    let s = t.elapsed().as_secs_f64();
    all &= report(7, "trainability", &train, s);
    all &= report(8, "determinism", &det, s);
    if !all {
        std::process::exit(1);
    }
}
