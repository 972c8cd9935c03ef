//! End-to-end acceptance checks, one line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,4,7` restricts the run to the listed criteria.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssl_seg_core::experiment::{run_ablation, run_loss_comparison, ExperimentSetup};
use ssl_seg_core::inference::{
    predict_volume, predict_volume_with_stats, tile_positions, Accumulation, InferenceConfig, Preprocess, Weighting,
};
use ssl_seg_core::io::save_labels;
use ssl_seg_core::losses::{
    gradient_of, nrd_loss, tce_loss, value_of, ClassSet, LossConfig, LossId, LossInput, LossKind,
    NrdMode,
};
use ssl_seg_core::metrics::{dsc, evaluate_dataset, nsd_with, SurfaceDistance};
use ssl_seg_core::nn::checkpoint::save_checkpoint;
use ssl_seg_core::nn::spec::{conv_layer_counts, regular_conv_params, separable_conv_params};
use ssl_seg_core::nn::ConvMode;
use ssl_seg_core::phantom::{generate_case, PhantomConfig};
use ssl_seg_core::ssl::{lr_schedule, make_cutmix_mask, mix, train, TrainConfig, TrainData};
use ssl_seg_core::{build_network, count_parameters, LabelVolume, NetworkSpec, ProbField, Volume};

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Interior probabilities: entries drawn in `[0.05, 0.95]`, renormalized.
fn random_mu(rng: &mut ChaCha8Rng, c: usize, shape: [usize; 3]) -> (ProbField<f64>, Vec<u8>) {
    let v: usize = shape.iter().product();
    let mut data = vec![0.0; c * v];
    for n in 0..v {
        let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..0.95)).collect();
        let total: f64 = raw.iter().sum();
        for k in 0..c {
            data[k * v + n] = raw[k] / total;
        }
    }
    let target = (0..v).map(|_| rng.random_range(0..c as u8)).collect();
    (ProbField { num_classes: c, shape, data }, target)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let fields: Vec<_> = (0..20).map(|_| random_mu(&mut rng, 3, [4, 4, 4])).collect();
    let variants = [
        ("dice_ce", LossId::DiceCe, 1.5),
        ("nrd_g1.5", LossId::Nrd, 1.5),
        ("nrd_g2", LossId::Nrd, 2.0),
        ("tce", LossId::Tce, 1.5),
        ("rs", LossId::Rs, 1.5),
    ];
    let mut report = Vec::new();
    let mut worst_all = 0.0f64;
    for (name, id, gamma) in variants {
        let cfg = LossConfig { gamma, ..Default::default() };
        let mut worst = 0.0f64;
        for (mu, target) in &fields {
            let analytic = gradient_of(id, &LossInput::new(mu, target, &cfg).map_err(err)?);
            let mut probe = mu.clone();
            for i in 0..mu.data.len() {
                probe.data[i] = mu.data[i] + h;
                let plus = value_of(id, &LossInput::new(&probe, target, &cfg).map_err(err)?).map_err(err)?;
                probe.data[i] = mu.data[i] - h;
                let minus = value_of(id, &LossInput::new(&probe, target, &cfg).map_err(err)?).map_err(err)?;
                probe.data[i] = mu.data[i];
                let numeric = (plus - minus) / (2.0 * h);
                let scale = analytic[i].abs().max(numeric.abs()).max(1e-12);
                worst = worst.max((analytic[i] - numeric).abs() / scale);
            }
        }
        report.push(format!("{name} {worst:.1e}"));
        worst_all = worst_all.max(worst);
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("{}; {secs:.1}s", report.join(", "));
    check(worst_all < 1e-4, format!("max relative error >= 1e-4: {detail}"))?;
    check(secs < 60.0, format!("too slow: {detail}"))?;
    Ok(detail)
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let c = 2 + i % 4;
        let (mu, target) = random_mu(&mut rng, c, [4, 3, 5]);
        let v = target.len();
        let cfg = LossConfig { gamma: 2.0, epsilon: 1e-3, nrd_mode: NrdMode::PerClass, ..Default::default() };
        let eps = cfg.epsilon;
        let mut oracle = 0.0;
        for k in 1..c {
            let (mut mm, mut uu, mut mu_u) = (0.0, 0.0, 0.0);
            for n in 0..v {
                let m = mu.data[k * v + n];
                let u = if target[n] as usize == k { 1.0 } else { 0.0 };
                mm += m * m;
                uu += u * u;
                mu_u += m * u;
            }
            let s = mm + uu;
            let soft_dice = 2.0 * mu_u / (s + eps);
            oracle += (1.0 - soft_dice) - eps / (s + eps);
        }
        oracle /= (c - 1) as f64;
        let got = nrd_loss(&LossInput::new(&mu, &target, &cfg).map_err(err)?).map_err(err)?;
        worst = worst.max((got - oracle).abs());

        // one joint ratio over every class
        let gcfg = LossConfig { nrd_mode: NrdMode::Global, class_set: ClassSet::AllClasses, ..cfg };
        let (mut s, mut p) = (0.0, 0.0);
        for k in 0..c {
            for n in 0..v {
                let m = mu.data[k * v + n];
                let u = if target[n] as usize == k { 1.0 } else { 0.0 };
                s += m * m + u * u;
                p += m * u;
            }
        }
        let oracle = (1.0 - 2.0 * p / (s + eps)) - eps / (s + eps);
        let got = nrd_loss(&LossInput::new(&mu, &target, &gcfg).map_err(err)?).map_err(err)?;
        worst = worst.max((got - oracle).abs());
    }
    check(worst < 1e-9, format!("identity violated by {worst:.2e}"))?;
    Ok(format!("max deviation {worst:.1e} over 100 fields"))
}

fn criterion_3() -> Outcome {
    let cfg = LossConfig::default();
    let mut worst_margin = f64::INFINITY;
    for i in 0..1000 {
        let x = 0.5 + 0.5 * i as f64 / 999.0;
        let mu = ProbField { num_classes: 2, shape: [1, 1, 1], data: vec![1.0 - x, x] };
        let taylor = tce_loss(&LossInput::new(&mu, &[1], &cfg).map_err(err)?).map_err(err)?;
        let gap = -x.ln() - taylor;
        let bound = (1.0 - x).powi(3) / (3.0 * x);
        check(gap >= 0.0 && gap <= bound, format!("x = {x}: gap {gap:e} outside [0, {bound:e}]"))?;
        if bound > 0.0 {
            worst_margin = worst_margin.min(bound - gap);
        }
    }
    Ok(format!("1000 grid points, bound slack >= {worst_margin:.1e}"))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut fractions = Vec::with_capacity(1000);
    for _ in 0..1000 {
        let m = make_cutmix_mask([32, 32, 32], (0.25, 0.75), &mut rng).map_err(err)?;
        let ones = m.values().iter().filter(|&&b| b).count();
        fractions.push(ones as f64 / 32768.0);
    }
    let (lo, hi) = fractions.iter().fold((1.0f64, 0.0f64), |(l, h), &f| (l.min(f), h.max(f)));
    let mean = fractions.iter().sum::<f64>() / 1000.0;
    check(lo >= 0.20 && hi <= 0.80, format!("fraction range [{lo:.3}, {hi:.3}]"))?;
    check((mean - 0.5).abs() <= 0.05, format!("mean fraction {mean:.3}"))?;

    let shape = [8, 8, 8];
    for _ in 0..50 {
        let a: Vec<f32> = (0..512).map(|_| rng.random()).collect();
        let b: Vec<f32> = (0..512).map(|_| rng.random()).collect();
        let m = make_cutmix_mask(shape, (0.25, 0.75), &mut rng).map_err(err)?;
        check(mix(&a, &a, &m).map_err(err)? == a, "mix(a, a, m) != a")?;
        let ab = mix(&a, &b, &m).map_err(err)?;
        let ba = mix(&b, &a, &m).map_err(err)?;
        let bb = m.bbox();
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    let i = (z * 8 + y) * 8 + x;
                    let p = [z as i64, y as i64, x as i64];
                    let inside = (0..3).all(|k| p[k] >= bb.origin[k] && p[k] < bb.origin[k] + bb.size[k] as i64);
                    let want = if inside { a[i] } else { b[i] };
                    check(ab[i] == want, format!("voxel {p:?} not taken from the expected field"))?;
                    check(ab[i] + ba[i] == a[i] + b[i], "complementarity fails")?;
                }
            }
        }
    }
    Ok(format!("fractions in [{lo:.3}, {hi:.3}], mean {mean:.3}; 50 reconstructions exact"))
}

fn criterion_5() -> Outcome {
    let spec = NetworkSpec { base_channels: 4, max_channels: 16, ..NetworkSpec::toy(4) };
    let net = build_network(&spec, 5).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let base = InferenceConfig {
        patch_size: [16, 16, 16],
        overlap: 0.0,
        weighting: Weighting::Uniform,
        ..Default::default()
    };
    for case in 0..10u64 {
        let shape = std::array::from_fn(|_| 16 * rng.random_range(1..=3usize));
        let cfg = PhantomConfig { min_voxels_per_class: 10, ..PhantomConfig::new(case, shape, 4, 0.3) };
        let (img, _) = generate_case(&cfg, case).map_err(err)?;
        let full = predict_volume(&net, &img, &InferenceConfig { accumulation: Accumulation::FullProb, ..base.clone() })
            .map_err(err)?;
        let (labels, stats) =
            predict_volume_with_stats(&net, &img, &InferenceConfig { accumulation: Accumulation::LabelOnly, ..base.clone() })
                .map_err(err)?;
        check(full == labels, format!("fusion modes disagree on case {case} of shape {shape:?}"))?;
        check(stats.tiles > 0, "no tiles")?;
    }

    for _ in 0..20 {
        let shape: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..=40));
        let patch: [usize; 3] = std::array::from_fn(|a| rng.random_range(1..=shape[a]));
        let overlap = rng.random_range(0.0..0.9);
        let mut covered = vec![0u32; shape.iter().product()];
        for t in tile_positions(shape, patch, overlap) {
            for z in 0..t.size[0] {
                for y in 0..t.size[1] {
                    for x in 0..t.size[2] {
                        let p = [t.origin[0] as usize + z, t.origin[1] as usize + y, t.origin[2] as usize + x];
                        check(p.iter().zip(&shape).all(|(a, b)| a < b), format!("tile {t:?} leaves {shape:?}"))?;
                        covered[(p[0] * shape[1] + p[1]) * shape[2] + p[2]] += 1;
                    }
                }
            }
        }
        check(
            covered.iter().all(|&c| c > 0),
            format!("shape {shape:?}, patch {patch:?}, overlap {overlap:.2} leaves voxels uncovered"),
        )?;
    }
    Ok("10 phantoms voxel-identical across fusion modes; 20 tilings cover every voxel".into())
}

fn criterion_6() -> Outcome {
    let k3 = 27;
    let sep = k3 * 32 + 32 + 32 * 32 + 32;
    let reg = k3 * 32 * 32 + 32;
    check(sep == 1952 && reg == 27680, "closed-form example")?;
    check(
        separable_conv_params(32, 32, 3, true) == sep && regular_conv_params(32, 32, 3, true) == reg,
        "single 32->32 layer counts differ from 1952 / 27680",
    )?;
    let spec = |mode| NetworkSpec {
        conv_mode: mode,
        ..NetworkSpec::toy(4)
    };
    let seps = conv_layer_counts(&spec(ConvMode::Separable)).map_err(err)?;
    let regs = conv_layer_counts(&spec(ConvMode::Regular)).map_err(err)?;
    check(seps.len() == regs.len(), "layer lists differ")?;
    let (mut wide, mut worst) = (0, 0.0f64);
    for ((name, cin, cout, s), (rname, _, _, r)) in seps.iter().zip(&regs) {
        check(name == rname, format!("{name} vs {rname}"))?;
        // k³ convolutions feed a norm and carry no bias; 1x1x1 layers do
        let spatial = name.ends_with(".conv1") || name.ends_with(".conv2");
        // a depthwise pass over one input channel is degenerate, so the stem stays regular
        let stem = name == "enc0.conv1";
        let (want_s, want_r) = if stem {
            (k3 * cin * cout, k3 * cin * cout)
        } else if spatial {
            (k3 * cin + cin * cout, k3 * cin * cout)
        } else {
            (cin * cout + cout, cin * cout + cout)
        };
        check(
            (*s, *r) == (want_s, want_r),
            format!("{name}: counts ({s}, {r}), closed form ({want_s}, {want_r})"),
        )?;
        if spatial && *cin >= 32 && *cout >= 32 {
            wide += 1;
            let ratio = *s as f64 / *r as f64;
            worst = worst.max(ratio);
            check(ratio < 0.25, format!("{name}: {s} / {r} = {ratio:.3}"))?;
        }
    }
    check(wide > 0, "no convolution with 32+ channels")?;
    let total_s = count_parameters(&spec(ConvMode::Separable)).map_err(err)?;
    let total_r = count_parameters(&spec(ConvMode::Regular)).map_err(err)?;
    check(total_s < total_r, "separable network is not smaller")?;
    Ok(format!(
        "{} layers match closed forms; {wide} wide k³ layers, worst ratio {worst:.3}; totals {total_s} vs {total_r}",
        seps.len()
    ))
}

fn criterion_7() -> Outcome {
    let expect = [(0, 0.01), (199, 0.01), (200, 0.005), (399, 0.005), (400, 0.0025), (450, 0.0025)];
    let defaults = TrainConfig::default();
    for (epoch, want) in expect {
        let got = lr_schedule(epoch, 0.01, 200);
        check(got == want, format!("epoch {epoch}: {got} != {want}"))?;
        check(defaults.lr(epoch) == want, format!("default config, epoch {epoch}: {}", defaults.lr(epoch)))?;
    }
    Ok("epochs 0, 199, 200, 399, 400, 450 exact".into())
}

fn criterion_8() -> Outcome {
    let setup = ExperimentSetup::desk_scale();
    let start = Instant::now();
    let report = run_ablation(&setup, &[1, 2, 3], |r| eprintln!("    {r}")).map_err(err)?;
    let elapsed = start.elapsed();
    eprint!("{}", report.to_csv());
    let (sup, ssl) = report.median_pair().ok_or("no runs")?;
    let gain = ssl.mean_dsc - sup.mean_dsc;
    let detail = format!(
        "median seed {}: supervised {:.4}, ssl {:.4}, gain {gain:+.4}; {:.1} min",
        ssl.seed,
        sup.mean_dsc,
        ssl.mean_dsc,
        elapsed.as_secs_f64() / 60.0
    );
    check(gain >= 0.01, format!("gain below 0.01: {detail}"))?;
    check(sup.mean_dsc >= 0.70 && ssl.mean_dsc >= 0.70, format!("DSC below 0.70: {detail}"))?;
    check(elapsed <= Duration::from_secs(3600), format!("over 60 minutes: {detail}"))?;
    Ok(detail)
}

fn criterion_9() -> Outcome {
    let mut setup = ExperimentSetup::desk_scale();
    setup.train.total_epochs = 6;
    setup.train.iterations_per_epoch = 20;
    setup.train.lr_halving_period = 2;
    setup.train.pseudo_warmup_epochs = 2;
    setup.train.pseudo_refresh_epochs = 2;
    let (runs, csv) = run_loss_comparison(&setup, 1, &[LossKind::DiceCe, LossKind::Rs]).map_err(err)?;
    let lines: Vec<&str> = csv.lines().collect();
    check(lines.len() == 3, format!("expected header + 2 rows, got {}", lines.len()))?;
    let cols = lines[0].split(',').count();
    check(lines[0].starts_with("loss,seed,mean_dsc"), format!("header {}", lines[0]))?;
    check(lines[1].starts_with("dice_ce,") && lines[2].starts_with("rs,"), "row labels")?;
    for row in &lines[1..] {
        let cells: Vec<&str> = row.split(',').collect();
        check(cells.len() == cols, format!("ragged row {row}"))?;
        for c in &cells[2..] {
            let v: f64 = c.parse().map_err(|_| format!("non-numeric cell {c:?} in {row}"))?;
            check(v.is_finite(), format!("non-finite cell in {row}"))?;
        }
    }
    Ok(format!("dice_ce {:.4}, rs {:.4} (reduced schedule)", runs[0].mean_dsc, runs[1].mean_dsc))
}

fn cube(shape: [usize; 3], lo: [usize; 3], side: usize) -> LabelVolume {
    let mut labels = vec![0u8; shape.iter().product()];
    for z in lo[0]..lo[0] + side {
        for y in lo[1]..lo[1] + side {
            for x in lo[2]..lo[2] + side {
                labels[(z * shape[1] + y) * shape[2] + x] = 1;
            }
        }
    }
    LabelVolume::new(shape, [1.0; 3], 2, labels).unwrap()
}

/// Mask voxels with a six-neighbour outside the mask or the volume.
fn brute_boundary(l: &LabelVolume) -> Vec<[i64; 3]> {
    let s = l.shape();
    let at = |p: [i64; 3]| {
        if (0..3).any(|a| p[a] < 0 || p[a] >= s[a] as i64) {
            false
        } else {
            l.labels()[(p[0] as usize * s[1] + p[1] as usize) * s[2] + p[2] as usize] == 1
        }
    };
    let mut out = Vec::new();
    for z in 0..s[0] as i64 {
        for y in 0..s[1] as i64 {
            for x in 0..s[2] as i64 {
                let p = [z, y, x];
                if !at(p) {
                    continue;
                }
                let edge = (0..3).any(|a| {
                    [-1i64, 1].iter().any(|d| {
                        let mut q = p;
                        q[a] += d;
                        !at(q)
                    })
                });
                if edge {
                    out.push(p);
                }
            }
        }
    }
    out
}

fn brute_nsd(a: &LabelVolume, b: &LabelVolume, tol: f64) -> f64 {
    let (ba, bb) = (brute_boundary(a), brute_boundary(b));
    let within = |from: &[[i64; 3]], to: &[[i64; 3]]| {
        from.iter()
            .filter(|p| {
                to.iter().any(|q| {
                    let d2: i64 = (0..3).map(|k| (p[k] - q[k]).pow(2)).sum();
                    (d2 as f64).sqrt() <= tol
                })
            })
            .count()
    };
    (within(&ba, &bb) + within(&bb, &ba)) as f64 / (ba.len() + bb.len()) as f64
}

fn criterion_10() -> Outcome {
    let shape = [4, 4, 4];
    let mut p = vec![0u8; 64];
    let mut g = vec![0u8; 64];
    p[..4].fill(1);
    g[2..6].fill(1);
    let pv = LabelVolume::new(shape, [1.0; 3], 2, p).map_err(err)?;
    let gv = LabelVolume::new(shape, [1.0; 3], 2, g).map_err(err)?;
    let d = dsc(&pv, &gv, 1).map_err(err)?;
    check(d == 0.5, format!("|P|=|G|=4, overlap 2 gives {d}"))?;
    check(dsc(&pv, &pv, 1).map_err(err)? == 1.0, "identity DSC")?;
    let empty = LabelVolume::new(shape, [1.0; 3], 2, vec![0; 64]).map_err(err)?;
    check(dsc(&empty, &empty, 1).map_err(err)? == 1.0, "both-empty DSC")?;
    check(dsc(&pv, &empty, 1).map_err(err)? == 0.0, "one-empty DSC")?;
    let far = cube(shape, [2, 2, 2], 2);
    let near = cube(shape, [0, 0, 0], 2);
    check(dsc(&near, &far, 1).map_err(err)? == 0.0, "disjoint DSC")?;

    let a = cube([12, 12, 12], [2, 2, 2], 8);
    let b = cube([12, 12, 12], [3, 2, 2], 8);
    let mut nsd_notes = Vec::new();
    for (tol, expect_one) in [(1.0, true), (0.0, false)] {
        let oracle = brute_nsd(&a, &b, tol);
        for mode in [SurfaceDistance::BruteForce, SurfaceDistance::DistanceTransform] {
            let got = nsd_with(&a, &b, 1, tol, mode).map_err(err)?;
            check((got - oracle).abs() < 1e-12, format!("nsd {mode:?} tol {tol}: {got} vs oracle {oracle}"))?;
        }
        check((oracle == 1.0) == expect_one && oracle <= 1.0, format!("oracle nsd {oracle} at tol {tol}"))?;
        nsd_notes.push(format!("tol {tol}: {oracle:.4}"));
    }
    check(nsd_with(&a, &a, 1, 0.0, SurfaceDistance::BruteForce).map_err(err)? == 1.0, "identity NSD")?;

    // two cases scoring 1.0 and 0.5 average to 0.75
    let dir = tempfile::tempdir().map_err(err)?;
    let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
    save_labels(&pv, &pred.join("c1")).map_err(err)?;
    save_labels(&pv, &gt.join("c1")).map_err(err)?;
    save_labels(&pv, &pred.join("c2")).map_err(err)?;
    save_labels(&gv, &gt.join("c2")).map_err(err)?;
    let report = evaluate_dataset(&pred, &gt, None, None).map_err(err)?;
    check(report.mean_dsc() == 0.75, format!("aggregate {}", report.mean_dsc()))?;
    check(report.to_csv().lines().any(|l| l.starts_with("mean,0.750000")), "mean row")?;
    Ok(format!("DSC examples exact; shifted-cube NSD {}", nsd_notes.join(", ")))
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_11() -> Outcome {
    std::env::set_var(ssl_seg_core::DETERMINISTIC_ENV, "1");
    ssl_seg_core::configure_threads();
    let phantom = PhantomConfig { min_voxels_per_class: 20, ..PhantomConfig::new(11, [24, 24, 24], 4, 0.4) };
    let case = |s| generate_case(&phantom, s).unwrap();
    let data = TrainData {
        num_classes: 4,
        labeled: vec![case(1), case(2)],
        unlabeled: (3..6).map(|s| case(s).0).collect(),
        test: Vec::new(),
        preprocess: Preprocess::default(),
    };
    let cfg = TrainConfig {
        network: NetworkSpec { base_channels: 4, max_channels: 16, ..NetworkSpec::toy(4) },
        patch_size: [8, 8, 8],
        total_epochs: 3,
        iterations_per_epoch: 4,
        pseudo_warmup_epochs: 1,
        pseudo_refresh_epochs: 1,
        checkpoint_every: 1,
        seed: 17,
        ..TrainConfig::default()
    };
    let tests: Vec<(Volume, LabelVolume)> = (20..23).map(case).collect();
    let icfg = InferenceConfig { patch_size: [16, 16, 16], ..Default::default() };

    let run = |root: &Path| -> Result<Vec<Vec<(String, Vec<u8>)>>, String> {
        let (tr, pred, gt) = (root.join("train"), root.join("pred"), root.join("gt"));
        let out = train(&data, &cfg, Some(&tr)).map_err(err)?;
        save_checkpoint(&out.dual.net_a, &tr.join("model")).map_err(err)?;
        for (i, (img, lab)) in tests.iter().enumerate() {
            let p = predict_volume(&out.dual.net_a, img, &icfg).map_err(err)?;
            save_labels(&p, &pred.join(format!("t{i}"))).map_err(err)?;
            save_labels(lab, &gt.join(format!("t{i}"))).map_err(err)?;
        }
        let report = evaluate_dataset(&pred, &gt, None, Some(1.0)).map_err(err)?;
        fs::write(root.join("evaluation.csv"), report.to_csv()).map_err(err)?;
        Ok(vec![tree_bytes(&tr), tree_bytes(&pred), vec![("csv".into(), fs::read(root.join("evaluation.csv")).unwrap())]])
    };
    let (a, b) = (tempfile::tempdir().map_err(err)?, tempfile::tempdir().map_err(err)?);
    let (ra, rb) = (run(a.path())?, run(b.path())?);
    for (name, (x, y)) in ["train", "infer", "evaluate"].iter().zip(ra.iter().zip(&rb)) {
        check(x == y, format!("{name} outputs differ between runs"))?;
    }
    let files: usize = ra.iter().map(Vec::len).sum();
    let names: BTreeSet<_> = ra[0].iter().map(|(n, _)| n.split('/').next().unwrap_or("").to_string()).collect();
    Ok(format!("{files} files byte-identical across two runs ({names:?} under train/)"))
}

fn main() -> ExitCode {
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Outcome); 11] = [
        (1, "loss gradient checks", criterion_1),
        (2, "nrd soft-dice identity", criterion_2),
        (3, "tce taylor bound", criterion_3),
        (4, "cutmix identities", criterion_4),
        (5, "fusion oracle and tile coverage", criterion_5),
        (6, "parameter reduction", criterion_6),
        (7, "lr schedule", criterion_7),
        (8, "desk-scale ssl ablation", criterion_8),
        (9, "loss comparison harness", criterion_9),
        (10, "metric correctness", criterion_10),
        (11, "determinism", criterion_11),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
