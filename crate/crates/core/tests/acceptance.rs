//! One PASS/FAIL line per acceptance criterion. Runs as a plain binary so the
//! lines always reach the test log; exits non-zero if any criterion fails.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use common::*;
use hftrans::cli;
use hftrans::data::{
    crop_to, generate_phantom, pad_to_multiple, read_sample, write_sample, PhantomConfig,
    ANISOTROPIC_SPACING,
};
use hftrans::harness::run::{
    ABLATION_FILE, ABLATION_HEADER, CHECKPOINT_FILE, LOSS_FILE, METRICS_FILE, METRICS_ROWS_FILE,
};
use hftrans::harness::{gradient_suite, prepare_dataset, train, RunConfig};
use hftrans::metrics::{
    argmax_labels, cross_entropy_loss, dice_score, hd95, mean_class_dice, volume_similarity,
    BinaryMask, LabelVolume,
};
use hftrans::model::{
    encode_checkpoint, model_forward, msa, predict, read_checkpoint, transformer_encoder,
    write_checkpoint, FusionMode, ModelConfig, ModelParams,
};
use hftrans::tensor::{Graph, Tensor};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [FusionMode; 4] = [
    FusionMode::Early,
    FusionMode::Middle,
    FusionMode::Hybrid,
    FusionMode::HybridStar,
];

fn gradient_suite_passes() -> Result<String> {
    let start = Instant::now();
    let entries = gradient_suite(20, 0)?;
    let elapsed = start.elapsed();
    let failed: Vec<&str> = entries
        .iter()
        .filter(|e| !e.report.passed())
        .map(|e| e.name)
        .collect();
    ensure!(failed.is_empty(), "failing: {failed:?}");
    ensure!(entries.iter().all(|e| e.instances == 20), "instance count");
    for must in [
        "dice_loss",
        "cross_entropy_loss",
        "conv3d",
        "conv_transpose3d",
    ] {
        ensure!(entries.iter().any(|e| e.name == must), "{must} not covered");
    }
    let primitive_tol = entries
        .iter()
        .filter(|e| !e.name.ends_with("loss"))
        .all(|e| e.tolerance == 1e-4);
    let loss_tol = entries
        .iter()
        .filter(|e| e.name.ends_with("loss"))
        .all(|e| e.tolerance == 1e-3);
    ensure!(
        primitive_tol && loss_tol,
        "tolerances differ from 1e-4 / 1e-3"
    );
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    let probes: usize = entries.iter().map(|e| e.report.checked).sum();
    let worst = entries
        .iter()
        .map(|e| e.report.worst_rel_error)
        .fold(0.0, f64::max);
    Ok(format!(
        "{} cases x 20 instances, {probes} probes, worst rel err {worst:.1e}, {:.1}s",
        entries.len(),
        elapsed.as_secs_f64()
    ))
}

fn oracles_agree() -> Result<String> {
    let mut worst: f64 = 0.0;
    for (seed, stride, pad, k) in [(1, 1, 1, 3), (2, 2, 1, 3), (3, 1, 0, 2), (4, 2, 2, 5)] {
        let x = random(&[3, 6, 5, 7], seed);
        let w = random(&[2, 3, k, k, k], seed + 10);
        let b = random(&[2], seed + 20);
        let mut g = Graph::<f64>::new();
        let (xv, wv, bv) = (
            g.constant(x.clone()),
            g.constant(w.clone()),
            g.constant(b.clone()),
        );
        let y = g.conv3d(xv, wv, bv, stride, pad)?;
        let e = conv3d_oracle(&x, &w, b.data(), stride, pad);
        ensure!(g.shape(y) == e.shape(), "conv3d shape");
        worst = worst.max(g.value(y).max_abs_diff(&e));
    }
    for (seed, k, stride) in [(5, 2, 2), (6, 4, 2), (7, 3, 1)] {
        let x = random(&[3, 3, 2, 4], seed);
        let w = random(&[3, 2, k, k, k], seed + 10);
        let b = random(&[2], seed + 20);
        let mut g = Graph::<f64>::new();
        let (xv, wv, bv) = (
            g.constant(x.clone()),
            g.constant(w.clone()),
            g.constant(b.clone()),
        );
        let y = g.conv_transpose3d(xv, wv, bv, stride)?;
        let e = conv_transpose3d_oracle(&x, &w, b.data(), stride);
        ensure!(g.shape(y) == e.shape(), "conv_transpose3d shape");
        worst = worst.max(g.value(y).max_abs_diff(&e));
    }
    ensure!(worst < 1e-6, "conv max diff {worst:e}");

    let c = 4;
    let eye = Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
    let mut named = IndexMap::new();
    for n in ["q", "k", "v", "o"] {
        named.insert(format!("a.{n}.w"), eye.clone());
        named.insert(format!("a.{n}.b"), Tensor::zeros(&[c]));
    }
    let params = ModelParams::from_tensors(named);
    let z = random(&[2, c], 30);
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let zv = g.constant(z.clone());
    let y = msa(&mut g, zv, &p, "a", 1)?;
    let row = |i: usize| &z.data()[i * c..(i + 1) * c];
    let score = |i: usize, j: usize| {
        row(i).iter().zip(row(j)).map(|(a, b)| a * b).sum::<f64>() / (c as f64).sqrt()
    };
    let mut attn_worst: f64 = 0.0;
    for i in 0..2 {
        let a0 = 1.0 / (1.0 + (score(i, 1) - score(i, 0)).exp());
        for j in 0..c {
            let e = a0 * row(0)[j] + (1.0 - a0) * row(1)[j];
            attn_worst = attn_worst.max((g.value(y).at(&[i, j]) - e).abs());
        }
    }
    ensure!(attn_worst < 1e-6, "attention diff {attn_worst:e}");

    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let trials = 30;
    for t in 0..trials {
        let ext = [
            rng.gen_range(1..=16),
            rng.gen_range(1..=16),
            rng.gen_range(1..=16),
        ];
        let spacing = if t % 3 == 0 {
            ANISOTROPIC_SPACING.map(f64::from)
        } else {
            [1.0; 3]
        };
        let density = rng.gen_range(0.01..0.3);
        let n: usize = ext.iter().product();
        let a = BinaryMask::new(ext, (0..n).map(|_| rng.gen_bool(density)).collect())?;
        let b = BinaryMask::new(ext, (0..n).map(|_| rng.gen_bool(density)).collect())?;
        let (got, want) = (hd95(&a, &b, spacing)?, hd95_oracle(&a, &b, spacing));
        ensure!(got == want, "hd95 {got} vs oracle {want} on {ext:?}");
    }
    Ok(format!(
        "conv max diff {worst:.1e}, attention {attn_worst:.1e}, hd95 exact on {trials} mask pairs"
    ))
}

fn shapes_and_fusion() -> Result<String> {
    let mut checked = 0;
    for n in [2, 3, 4] {
        for ext in [16, 32] {
            for mode in MODES {
                let cfg = ModelConfig {
                    fusion: mode.clone(),
                    ..tiny_config(n, ext)
                };
                let params = ModelParams::<f32>::init(&cfg)?;
                let mut g = Graph::new();
                let p = params.bind(&mut g);
                let x = g.constant(random(&[n, ext, ext, ext], checked).cast());
                let out = model_forward(&mut g, x, &cfg, &p)?;
                let encoders = match mode {
                    FusionMode::Early => 1,
                    FusionMode::Middle => n,
                    _ => n + 1,
                };
                let grid = (ext / 16).pow(3);
                ensure!(
                    out.encoders == encoders,
                    "{mode} N={n}: {} encoders",
                    out.encoders
                );
                ensure!(
                    g.shape(out.tokens) == [encoders * grid, cfg.embed_dim],
                    "{mode} N={n} {ext}: tokens"
                );
                ensure!(
                    g.shape(out.probs) == [cfg.num_classes, ext, ext, ext],
                    "{mode} N={n} {ext}: output"
                );
                let v = ext * ext * ext;
                let probs = g.value(out.probs).data();
                let worst = (0..v)
                    .map(|i| {
                        ((0..cfg.num_classes)
                            .map(|c| probs[c * v + i] as f64)
                            .sum::<f64>()
                            - 1.0)
                            .abs()
                    })
                    .fold(0.0, f64::max);
                ensure!(
                    worst <= 1e-5,
                    "{mode} N={n} {ext}: probability sum off by {worst:e}"
                );
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} configurations"))
}

fn residual_identity() -> Result<String> {
    let cfg = ModelConfig {
        modalities: 2,
        ..Default::default()
    };
    let mut params = ModelParams::<f32>::init(&cfg)?;
    zero_residual_branches(&mut params, cfg.layers);
    let z = random(&[24, cfg.embed_dim], 5).cast::<f32>();
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let zv = g.constant(z.clone());
    let y = transformer_encoder(&mut g, zv, &p, &cfg)?;
    ensure!(g.value(y) == &z, "output differs from input");
    Ok(format!(
        "{} layers, {} tokens, bit-identical",
        cfg.layers, 24
    ))
}

fn mean_dice(params: &ModelParams<f32>, cfg: &ModelConfig, run: &RunConfig) -> Result<Vec<f64>> {
    prepare_dataset(run)?
        .iter()
        .map(|p| {
            let probs = predict(params, cfg, &p.sample.modalities)?;
            let pred = argmax_labels(&probs, p.sample.spacing())?;
            Ok(mean_class_dice(&pred, &p.sample.labels, cfg.num_classes)?)
        })
        .collect()
}

fn overfit() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let run = RunConfig::from_text(&format!(
        "modalities = 2\nfusion = hybrid\nextents = 32\nsamples = 4\nsteps = 500\nlearning_rate = 1e-3\nfolds = 1\nout_dir = {}\n",
        dir.path().display()
    ))?;
    let start = Instant::now();
    let out = train(&run, |_, _| {})?;
    let (cfg, params) = read_checkpoint(&out.checkpoint)?;
    let trained = mean_dice(&params, &cfg, &run)?;
    let elapsed = start.elapsed();
    let untrained = mean_dice(&ModelParams::init(&cfg)?, &cfg, &run)?;

    let losses = &out.losses;
    ensure!(losses.iter().all(|l| l.is_finite()), "non-finite loss");
    let tenth = losses.len() / 10;
    let head = losses[..tenth].iter().sum::<f64>() / tenth as f64;
    let tail = losses[losses.len() - tenth..].iter().sum::<f64>() / tenth as f64;
    let dice = trained.iter().sum::<f64>() / trained.len() as f64;
    let before = untrained.iter().sum::<f64>() / untrained.len() as f64;
    let detail = format!(
        "mean foreground dice {dice:.4} (untrained {before:.4}), loss {head:.4} -> {tail:.4}, {:.0}s",
        elapsed.as_secs_f64()
    );
    ensure!(tail < head, "loss did not fall: {detail}");
    ensure!(dice >= 0.90, "dice below 0.90: {detail}");
    ensure!(
        elapsed <= Duration::from_secs(15 * 60),
        "too slow: {detail}"
    );
    Ok(detail)
}

fn metric_units() -> Result<String> {
    let line = |on: &[usize]| BinaryMask::new([1, 1, 4], (0..4).map(|i| on.contains(&i)).collect());
    ensure!(
        dice_score(&line(&[0, 1])?, &line(&[0, 1])?)? == 1.0,
        "dice identical"
    );
    ensure!(
        dice_score(&line(&[0])?, &line(&[2])?)? == 0.0,
        "dice disjoint"
    );
    ensure!(
        dice_score(&line(&[0, 1])?, &line(&[1, 2])?)? == 0.5,
        "dice half overlap"
    );
    ensure!(
        hd95(&line(&[1, 2])?, &line(&[1, 2])?, [1.0; 3])? == 0.0,
        "hd95 identical"
    );
    ensure!(
        hd95(&line(&[0])?, &line(&[2])?, [1.0; 3])? == 2.0,
        "hd95 offset"
    );

    let cube = |k: usize| BinaryMask::new([10, 10, 1], (0..100).map(|i| i < k).collect());
    let vs = volume_similarity(&cube(80)?, &cube(100)?)?;
    ensure!((vs - 0.8889).abs() < 1e-4, "vs {vs}");

    let labels = LabelVolume::new([2, 2, 2], [1.0; 3], vec![0, 1, 2, 3, 3, 2, 1, 0])?;
    let mut g = Graph::<f64>::new();
    let p = g.constant(Tensor::full(&[4, 2, 2, 2], 0.25));
    let ce = cross_entropy_loss(&mut g, p, &labels)?;
    let ce = g.value(ce).item();
    ensure!((ce - 4f64.ln()).abs() < 1e-6, "ce {ce}");
    Ok(format!("vs(80,100) = {vs:.4}, ce(uniform 4) = {ce:.6}"))
}

fn cli_ok(args: &[&str]) -> Result<String> {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = cli::run(
        std::iter::once("hftrans").chain(args.iter().copied()),
        &mut out,
        &mut err,
    );
    if code != 0 {
        bail!(
            "`{}` exited {code}: {}",
            args.join(" "),
            String::from_utf8_lossy(&err)
        );
    }
    Ok(String::from_utf8(out)?)
}

const TINY_RUN: &str = "\
base_width = 2
encoder_channels = 2
embed_dim = 4
layers = 1
heads = 2
mlp_ratio = 2
extents = 16
";

fn ablation_table() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let cfg = dir.path().join("ablate.cfg");
    std::fs::write(
        &cfg,
        format!("{TINY_RUN}modalities = 4\nsamples = 4\nfolds = 2\nsteps = 4\nseed = 11\nmodes = early;middle;hybrid;hybrid_star\n"),
    )?;
    let out_dir = dir.path().join("out");
    let stdout = cli_ok(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ])?;
    let csv = std::fs::read_to_string(out_dir.join(ABLATION_FILE))?;
    let mut lines = csv.lines();
    ensure!(lines.next() == Some(ABLATION_HEADER), "header");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let modes: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    ensure!(
        modes == ["early", "middle", "hybrid", "hybrid_star"],
        "modes {modes:?}"
    );
    let split: Vec<&str> = rows.iter().map(|r| r[8]).collect();
    let schedule: Vec<&str> = rows.iter().map(|r| r[9]).collect();
    ensure!(
        split.iter().all(|h| *h == split[0]),
        "split hashes differ: {split:?}"
    );
    ensure!(
        schedule.iter().all(|h| *h == schedule[0]),
        "schedule hashes differ: {schedule:?}"
    );
    let params: Vec<usize> = rows
        .iter()
        .map(|r| r[2].parse())
        .collect::<Result<_, _>>()?;
    ensure!(
        params[0] < params[1] && params[1] < params[2],
        "parameters {params:?}"
    );
    for r in &rows {
        let dice: f64 = r[4].parse()?;
        ensure!((0.0..=1.0).contains(&dice), "dice {dice}");
    }
    let ordering = stdout
        .lines()
        .find(|l| l.starts_with("dice ordering"))
        .context("no ordering line")?;
    Ok(format!("parameters {params:?}; {ordering} (reported only)"))
}

fn train_and_eval(cfg: &Path, out: &Path) -> Result<()> {
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    cli_ok(&["train", "--config", c, "--out", o])?;
    cli_ok(&["eval", "--config", c, "--out", o])?;
    Ok(())
}

fn determinism() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        format!("{TINY_RUN}modalities = 2\nsamples = 2\nsteps = 6\nseed = 5\n"),
    )?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train_and_eval(&cfg, &a)?;
    train_and_eval(&cfg, &b)?;
    let files = [CHECKPOINT_FILE, LOSS_FILE, METRICS_FILE, METRICS_ROWS_FILE];
    let mut bytes = 0;
    for f in files {
        let (x, y) = (std::fs::read(a.join(f))?, std::fs::read(b.join(f))?);
        ensure!(x == y, "{f} differs");
        bytes += x.len();
    }
    Ok(format!("{} files, {bytes} bytes identical", files.len()))
}

fn round_trips() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let s = generate_phantom(&PhantomConfig {
        spacing: ANISOTROPIC_SPACING,
        ..Default::default()
    })?;
    let (ip, lp) = (dir.path().join("v.int.hftv"), dir.path().join("v.lab.hftv"));
    write_sample(&s, &ip, &lp)?;
    let back = read_sample(&ip, &lp)?;
    ensure!(back == s, "volume differs");
    ensure!(
        back.modalities
            .data()
            .iter()
            .zip(s.modalities.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()),
        "volume bits differ"
    );

    let cfg = ModelConfig {
        modalities: 3,
        fusion: FusionMode::HybridStar,
        ..Default::default()
    };
    let params = ModelParams::<f32>::init(&cfg)?;
    let cp = dir.path().join("m.hftc");
    write_checkpoint(&cp, &cfg, &params)?;
    let (cfg2, params2) = read_checkpoint(&cp)?;
    ensure!(cfg2 == cfg, "config differs");
    ensure!(
        std::fs::read(&cp)? == encode_checkpoint(&cfg2, &params2),
        "checkpoint bytes differ"
    );

    let odd = crop_to(&s, [30, 17, 25])?;
    let (padded, orig) = pad_to_multiple(&odd, 16)?;
    ensure!(
        padded.extents() == [32, 32, 32],
        "padded to {:?}",
        padded.extents()
    );
    ensure!(
        crop_to(&padded, orig)? == odd,
        "pad then crop changed the sample"
    );
    Ok("volume, checkpoint and pad/crop exact".into())
}

type Criterion = (&'static str, fn() -> Result<String>);

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient suite", gradient_suite_passes),
        ("oracle equivalence", oracles_agree),
        ("shape and fusion invariants", shapes_and_fusion),
        ("residual identity", residual_identity),
        ("overfit capability", overfit),
        ("metric unit values", metric_units),
        ("ablation harness", ablation_table),
        ("determinism", determinism),
        ("round trips", round_trips),
    ];
    // `cargo test --test acceptance -- 2 5` runs only criteria 2 and 5.
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        ran += 1;
        let outcome =
            std::panic::catch_unwind(check).unwrap_or_else(|_| Err(anyhow::anyhow!("panicked")));
        match outcome {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(e) => {
                failed += 1;
                println!("FAIL {} {name}: {e:#}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
