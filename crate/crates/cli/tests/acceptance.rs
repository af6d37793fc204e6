//! Acceptance suite: eight numbered criteria, each a separate test that
//! prints a single `criterion N (...): PASS` line on success. The checks are
//! implemented independently of the binary's built-in `check` suites; the
//! ablation and benchmark criteria drive the installed binary itself.

use std::path::Path;
use std::time::{Duration, Instant};

use lambdaunet_core::autodiff::{backward, finite_diff_check, Tape};
use lambdaunet_core::lambda::{
    forward_fast, forward_fast_vars, forward_naive, global_lambda, normalize_keys, project_qkv,
    LambdaPlusConfig, LambdaPlusWeights, LambdaVars, Variant,
};
use lambdaunet_core::rng;
use lambdaunet_core::synth::{self, GenParams, Split};
use lambdaunet_core::tensor::DenseTensor;
use lambdaunet_core::train::{fit, TrainConfig};
use lambdaunet_core::unet::{forward_unet, load_model, save_model, UNetConfig, UNetModel};
use rand::Rng;

fn budget(name: &str, elapsed: Duration, limit: Duration) {
    assert!(
        elapsed <= limit,
        "{name} took {elapsed:?}, over the {limit:?} budget"
    );
}

// ---------------------------------------------------------------------------
// 1. oracle equivalence, >= 200 randomized configurations
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_oracle_equivalence() {
    let started = Instant::now();
    let mut r = rng::rng(0, "acceptance-oracle");
    let variants = [Variant::TwoD, Variant::ThreeD, Variant::TwoPointFiveD];
    let ts = [1usize, 2, 4, 8];
    let hws = [1usize, 3, 5, 8, 16];
    let rs = [1usize, 3];
    let tks = [1usize, 3, 5];
    let trials = 200;
    let mut worst: f64 = 0.0;
    let mut seen = [0usize; 3];
    for trial in 0..trials {
        let cfg = LambdaPlusConfig {
            c: r.gen_range(1..=4),
            k: r.gen_range(1..=4),
            v: r.gen_range(1..=4),
            u: r.gen_range(1..=2),
            r: rs[r.gen_range(0..rs.len())],
            t_k: tks[r.gen_range(0..tks.len())],
            variant: variants[trial % variants.len()],
        };
        seen[trial % variants.len()] += 1;
        let t = ts[r.gen_range(0..ts.len())];
        let h = hws[r.gen_range(0..hws.len())];
        let w = hws[r.gen_range(0..hws.len())];
        let weights =
            LambdaPlusWeights::init(&cfg, rng::derive_idx(1, "acc-oracle-w", trial as u64))
                .unwrap();
        let x = DenseTensor::from_fn(&[r.gen_range(1..=2), t, h, w, cfg.c], |_| {
            r.gen_range(-1.0..1.0)
        });
        let fast = forward_fast(&x, &weights, &cfg).unwrap();
        let naive = forward_naive(&x, &weights, &cfg).unwrap();
        worst = worst.max(fast.max_abs_diff(&naive));
    }
    assert!(seen.iter().all(|&n| n > 0));
    assert!(
        worst <= 1e-10,
        "max |fast - naive| = {worst:.3e} over {trials} trials"
    );
    budget("criterion 1", started.elapsed(), Duration::from_secs(120));
    println!("criterion 1 (oracle equivalence, {trials} trials, max dev {worst:.3e}): PASS");
}

// ---------------------------------------------------------------------------
// 2. gradient correctness against finite differences
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_gradient_correctness() {
    let started = Instant::now();
    let mut worst: f64 = 0.0;

    // full lambda layer, the variant with every parameter tensor in play
    let cfg = LambdaPlusConfig {
        c: 3,
        k: 2,
        v: 2,
        u: 1,
        r: 3,
        t_k: 3,
        variant: Variant::TwoPointFiveD,
    };
    let weights = LambdaPlusWeights::init(&cfg, 11).unwrap();
    let mut r = rng::rng(12, "acc-grad-x");
    let x = DenseTensor::from_fn(&[1, 4, 5, 5, 3], |_| r.gen_range(-1.0..1.0));
    let leaves = vec![
        weights.w_q.clone(),
        weights.w_k.clone(),
        weights.w_v.clone(),
        weights.e.clone(),
        weights.f.clone().unwrap(),
    ];
    let run = |ls: &[DenseTensor]| -> lambdaunet_core::error::Result<(f64, Vec<DenseTensor>)> {
        let tape = Tape::new();
        let lv = LambdaVars {
            w_q: tape.leaf(ls[0].clone(), true),
            w_k: tape.leaf(ls[1].clone(), true),
            w_v: tape.leaf(ls[2].clone(), true),
            e: tape.leaf(ls[3].clone(), true),
            f: Some(tape.leaf(ls[4].clone(), true)),
        };
        let y = forward_fast_vars(tape.constant(x.clone()), &lv, &cfg)?;
        let loss = y.mul(y)?.sum_all();
        let grads = backward(loss)?;
        let vars = [lv.w_q, lv.w_k, lv.w_v, lv.e, lv.f.unwrap()];
        Ok((
            loss.value().item()?,
            vars.iter().map(|v| grads.get(*v).unwrap().clone()).collect(),
        ))
    };
    let (_, analytic) = run(&leaves).unwrap();
    let mut f = |ls: &[DenseTensor]| run(ls).map(|(v, _)| v);
    let err = finite_diff_check(&mut f, &leaves, &analytic, 1e-5, 20, 13).unwrap();
    worst = worst.max(err);

    // levels=2 network end to end through the segmentation loss
    let ucfg = UNetConfig {
        levels: 2,
        base_channels: 2,
        k: 2,
        ..UNetConfig::default()
    };
    let model = UNetModel::build(ucfg, 14).unwrap();
    let x = DenseTensor::from_fn(&[1, 2, 4, 4, 2], |_| r.gen_range(0.0..1.0));
    let labels = DenseTensor::from_fn(&[1, 2, 4, 4], |_| {
        if r.gen_range(0.0..1.0f64) > 0.5 {
            1.0
        } else {
            0.0
        }
    });
    let tape = Tape::new();
    let vars = model.vars(&tape, true);
    let logits = forward_unet(tape.constant(x.clone()), &vars).unwrap();
    let loss = logits.bce_with_logits(&labels).unwrap();
    let grads = backward(loss).unwrap();
    let leaves: Vec<DenseTensor> = model.params().iter().map(|(_, t)| t.clone()).collect();
    let analytic: Vec<DenseTensor> = vars
        .entries()
        .iter()
        .map(|(_, v)| grads.get(*v).unwrap().clone())
        .collect();
    let mut f = |work: &[DenseTensor]| -> lambdaunet_core::error::Result<f64> {
        let mut m = model.clone();
        for (slot, t) in m.params_mut().iter_mut().zip(work) {
            slot.1 = t.clone();
        }
        let z = m.forward(&x)?;
        let mut acc = 0.0;
        for (zi, yi) in z.data().iter().zip(labels.data()) {
            acc += zi.max(0.0) - zi * yi + (-zi.abs()).exp().ln_1p();
        }
        Ok(acc / z.numel() as f64)
    };
    let err = finite_diff_check(&mut f, &leaves, &analytic, 1e-5, 20, 15).unwrap();
    worst = worst.max(err);

    assert!(worst <= 1e-4, "max relative error {worst:.3e}");
    budget("criterion 2", started.elapsed(), Duration::from_secs(120));
    println!("criterion 2 (gradient correctness, max rel err {worst:.3e}): PASS");
}

// ---------------------------------------------------------------------------
// 3. receptive-field properties, bit-exact
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_receptive_field() {
    let cfg = LambdaPlusConfig {
        c: 3,
        k: 2,
        v: 2,
        u: 1,
        r: 3,
        t_k: 3,
        variant: Variant::TwoPointFiveD,
    };
    let weights = LambdaPlusWeights::init(&cfg, 21).unwrap();
    let mut r = rng::rng(22, "acc-field");
    let x = DenseTensor::from_fn(&[1, 4, 6, 6, 3], |_| r.gen_range(-1.0..1.0));

    // (a) global lambda: one (k, v) matrix per slice, shared by every pixel
    let (_, keys, vals) = project_qkv(&x, &weights, &cfg).unwrap();
    let kbar = normalize_keys(&keys).unwrap();
    let lam_g = global_lambda(&kbar, &vals).unwrap();
    assert_eq!(lam_g.shape(), &[1, 4, cfg.k, cfg.v]);

    // (b) perturbation invariance at the probe pixel (t=2, h=3, w=3)
    let base = forward_fast(&x, &weights, &cfg).unwrap();
    let probe = [0usize, 2, 3, 3];
    let checks: &[(usize, usize, usize, bool)] = &[
        (1, 1, 1, true),  // t-1, off-pixel: invisible to the inter-slice term
        (3, 5, 5, true),  // t+1, off-pixel
        (0, 3, 3, true),  // |dt| = 2, same pixel: outside the T_k=3 window
        (1, 3, 3, false), // t-1, same pixel: inside the window
        (2, 3, 4, false), // same slice: inside the global context
    ];
    for &(t, h, w, expect_same) in checks {
        let mut xp = x.clone();
        let old = xp.at(&[0, t, h, w, 1]);
        xp.set(&[0, t, h, w, 1], old + 0.5);
        let out = forward_fast(&xp, &weights, &cfg).unwrap();
        let same = (0..cfg.v).all(|vi| {
            base.at(&[probe[0], probe[1], probe[2], probe[3], vi]).to_bits()
                == out.at(&[probe[0], probe[1], probe[2], probe[3], vi]).to_bits()
        });
        assert_eq!(
            same, expect_same,
            "perturbation at (t={t}, h={h}, w={w}) violated the receptive field"
        );
    }

    // (c) a 2d-variant network commutes with slice permutation
    let ucfg = UNetConfig {
        levels: 2,
        base_channels: 4,
        k: 3,
        variant: Variant::TwoD,
        ..UNetConfig::default()
    };
    let model = UNetModel::build(ucfg, 23).unwrap();
    let xin = DenseTensor::from_fn(&[1, 4, 8, 8, 2], |_| r.gen_range(0.0..1.0));
    let y = model.forward(&xin).unwrap();
    let perm = [3usize, 2, 1, 0];
    let xp = DenseTensor::from_fn(xin.shape(), |idx| {
        xin.at(&[idx[0], perm[idx[1]], idx[2], idx[3], idx[4]])
    });
    let yp = model.forward(&xp).unwrap();
    for ti in 0..4 {
        for hy in 0..8 {
            for wx in 0..8 {
                assert_eq!(
                    y.at(&[0, perm[ti], hy, wx]).to_bits(),
                    yp.at(&[0, ti, hy, wx]).to_bits(),
                    "2d network output moved under slice permutation"
                );
            }
        }
    }
    println!("criterion 3 (receptive-field properties, bit-exact): PASS");
}

// ---------------------------------------------------------------------------
// 4. overfit sanity on one synthetic case
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_overfit_single_case() {
    let started = Instant::now();
    let params = GenParams::default();
    let case = synth::generate_case(&params, 4, "overfit").unwrap();
    let cases = vec![case];
    let ucfg = UNetConfig::default();
    let model = UNetModel::build(ucfg, 0).unwrap();
    let tcfg = TrainConfig {
        epochs: 200,
        warmup_epochs: 200,
        lr: 2e-3,
        batch_segments: 1,
        segment_slices: 8,
        pos_weight: 8.0,
        seed: 0,
        stop_at_val_dsc: Some(0.95),
        ..TrainConfig::default()
    };
    // validation set == training set: the criterion is training DSC
    let result = fit(model, &cases, &cases, &tcfg).unwrap();
    let epochs_run = result.history.len();
    assert!(
        result.best_val_dsc >= 0.95,
        "training DSC {:.4} after {epochs_run} epochs",
        result.best_val_dsc
    );
    budget("criterion 4", started.elapsed(), Duration::from_secs(600));
    println!(
        "criterion 4 (overfit sanity, DSC {:.4} after {epochs_run} epochs): PASS",
        result.best_val_dsc
    );
}

// ---------------------------------------------------------------------------
// 5. directional experiment: 2.5d >= 2d and 3d on the fixed dataset
// ---------------------------------------------------------------------------

fn mean_test_dsc(
    dir: &Path,
    manifest: &synth::DatasetManifest,
    variant: Variant,
    seeds: &[u64],
) -> f64 {
    let train_cases = synth::load_split(dir, manifest, Split::Train).unwrap();
    let val_cases = synth::load_split(dir, manifest, Split::Val).unwrap();
    let test_cases = synth::load_split(dir, manifest, Split::Test).unwrap();
    let ucfg = UNetConfig {
        variant,
        ..UNetConfig::default()
    };
    let mut total = 0.0;
    for &seed in seeds {
        let tcfg = TrainConfig {
            epochs: 12,
            warmup_epochs: 4,
            lr: 1e-3,
            batch_segments: 2,
            pos_weight: 2.0,
            seed,
            ..TrainConfig::default()
        };
        let model = UNetModel::build(ucfg, seed).unwrap();
        let result = fit(model, &train_cases, &val_cases, &tcfg).unwrap();
        let dsc = lambdaunet_core::train::eval_dsc(&result.model, &test_cases).unwrap();
        println!(
            "  {} seed {seed}: test DSC {dsc:.4}",
            match variant {
                Variant::TwoD => "2d  ",
                Variant::ThreeD => "3d  ",
                Variant::TwoPointFiveD => "2.5d",
            }
        );
        total += dsc;
    }
    total / seeds.len() as f64
}

#[test]
fn criterion_5_directional_experiment() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let params = GenParams::default(); // jitter 4 is the default
    assert_eq!(params.jitter, 4.0);
    let manifest =
        synth::generate_dataset(dir.path(), 100, &params, (0.6, 0.2, 0.2), 0).unwrap();
    let seeds = [0u64, 1, 2];
    let d25 = mean_test_dsc(dir.path(), &manifest, Variant::TwoPointFiveD, &seeds);
    let d2 = mean_test_dsc(dir.path(), &manifest, Variant::TwoD, &seeds);
    let d3 = mean_test_dsc(dir.path(), &manifest, Variant::ThreeD, &seeds);
    assert!(
        d25 >= d2 && d25 >= d3,
        "mean test DSC: 2.5d {d25:.4}, 2d {d2:.4}, 3d {d3:.4}"
    );
    budget("criterion 5", started.elapsed(), Duration::from_secs(7200));
    println!(
        "criterion 5 (directional: 2.5d {d25:.4} >= 2d {d2:.4} and 3d {d3:.4}): PASS"
    );
}

// ---------------------------------------------------------------------------
// 6. ablation harness structure
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_ablation_harness() {
    let dir = tempfile::tempdir().unwrap();
    let params = GenParams {
        t: 8,
        h: 16,
        w: 16,
        radius: (2.0, 4.0),
        ..GenParams::default()
    };
    synth::generate_dataset(dir.path(), 10, &params, (0.6, 0.2, 0.2), 3).unwrap();
    let json = dir.path().join("ablate.json");
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_lambdaunet"))
        .args([
            "ablate",
            "--data",
            dir.path().to_str().unwrap(),
            "--tk",
            "3,5,7",
            "--epochs",
            "2",
            "--warmup",
            "1",
            "--batch-segments",
            "2",
            "--levels",
            "2",
            "--base-channels",
            "4",
            "--out",
            json.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("reference"), "missing reference footnote");
    let rows: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(rows.len(), 3, "expected one row per kernel size");
    for (row, tk) in rows.iter().zip([3u64, 5, 7]) {
        assert_eq!(row["t_k"].as_u64().unwrap(), tk);
        for key in ["dsc", "recall", "precision", "f1"] {
            let v = row[key].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&v), "{key} = {v} out of range");
        }
    }
    println!("criterion 6 (ablation harness, 3 rows, metrics in [0,1]): PASS");
}

// ---------------------------------------------------------------------------
// 7. performance: fast path >= 5x over the reference at 64x64
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_fast_path_speedup() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("bench.json");
    // cmd_bench verifies output equivalence before timing and fails with a
    // numeric error unless the 64x64 speedup is >= 5x
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_lambdaunet"))
        .args([
            "bench",
            "--shapes",
            "1x8x64x64x16",
            "--reps",
            "3",
            "--k",
            "8",
            "--v",
            "16",
            "--u",
            "1",
            "--out",
            json.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let rows: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let speedup = rows[0]["speedup"].as_f64().unwrap();
    assert!(speedup >= 5.0, "speedup {speedup:.2} < 5");
    println!("criterion 7 (fast path {speedup:.2}x over reference at 64x64): PASS");
}

// ---------------------------------------------------------------------------
// 8. format round-trips, bit-exact on 50 cases and 50 models
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_format_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng::rng(8, "acc-roundtrip");
    for i in 0..50u64 {
        let params = GenParams {
            t: r.gen_range(2..=6),
            h: 8 * r.gen_range(1..=3usize),
            w: 8 * r.gen_range(1..=3usize),
            radius: (2.0, 4.0),
            slice_extent: (1, 2),
            jitter: r.gen_range(0.0..4.0),
            ..GenParams::default()
        };
        let case = synth::generate_case(&params, i, &format!("rt_{i:02}")).unwrap();
        let path = dir.path().join(format!("rt_{i:02}.v25d"));
        synth::save_case(&case, &path).unwrap();
        let loaded = synth::load_case(&path).unwrap();
        assert_eq!(loaded, case, "case {i} round-trip not bit-exact");
        let second = dir.path().join(format!("rt_{i:02}_b.v25d"));
        synth::save_case(&loaded, &second).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&second).unwrap(),
            "case {i} bytes unstable"
        );
    }
    let variants = [Variant::TwoD, Variant::ThreeD, Variant::TwoPointFiveD];
    for i in 0..50u64 {
        let ucfg = UNetConfig {
            levels: r.gen_range(2..=3),
            base_channels: 2 * r.gen_range(1..=3usize),
            k: r.gen_range(2..=8),
            u: r.gen_range(1..=2),
            t_k: 2 * r.gen_range(0..=2usize) + 1,
            variant: variants[r.gen_range(0..variants.len())],
            ..UNetConfig::default()
        };
        let model = UNetModel::build(ucfg, i).unwrap();
        let path = dir.path().join(format!("m_{i:02}.ckpt"));
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        for ((na, ta), (nb, tb)) in model.params().iter().zip(loaded.params()) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb, "model {i} tensor {na} not bit-exact");
        }
        let second = dir.path().join(format!("m_{i:02}_b.ckpt"));
        save_model(&loaded, &second).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&second).unwrap(),
            "model {i} bytes unstable"
        );
    }
    println!("criterion 8 (V25D1 and checkpoint round-trips, 50 + 50, bit-exact): PASS");
}
