//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits nonzero if any failed.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sata_core::attention::{mhsa_forward, AttentionConfig, AttentionProbe, MhsaParams, SataLayer};
use sata_core::data::{make_synthetic, Dataset, Split};
use sata_core::experiment::{
    attention_report, grid_search_on, train_on, train_step, Cell, DatasetKind, RunConfig,
};
use sata_core::optim::AdamW;
use sata_core::sata::{
    trivial_mask, twist, verify_lemma1, SataConfig, SuppressionScale, TwistOptions,
};
use sata_core::tensor::{finite_diff_check, Tape, Tensor, Var};
use sata_core::vit::{
    load_checkpoint, predict_logits, save_checkpoint, vit_forward, ModelState, ViTConfig,
};

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_secs: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_secs, || {
        format!("took {:.1}s, limit {limit_secs}s", elapsed.as_secs_f64())
    })
}

fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|x| x / total).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

fn images(rng: &mut ChaCha8Rng, b: usize, size: usize) -> Tensor {
    random_tensor(rng, &[b, 3, size, size], 1.0)
}

fn vit(
    image: usize,
    patch: usize,
    d: usize,
    heads: usize,
    depth: usize,
    classes: usize,
) -> ViTConfig {
    ViTConfig {
        image_size: image,
        patch_size: patch,
        channels: 3,
        embed_dim: d,
        depth,
        mlp_ratio: 2.0,
        num_classes: classes,
        attention: AttentionConfig::new(heads, d / heads),
        sata: None,
        layer_norm_eps: 1e-6,
    }
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut masked_rows, mut worst_slack) = (0usize, f64::INFINITY);
    for case in 0..10_000 {
        let len = rng.random_range(2..=256);
        let spread = rng.random_range(0.1..12.0);
        let logits: Vec<f64> = (0..len)
            .map(|_| rng.random_range(-spread..spread))
            .collect();
        let a = Tensor::matrix(1, len, softmax_row(&logits)).unwrap();
        let t = rng.random_range(0.0..=0.9);
        let s = rng.random_range(0.0..=2.0);
        let mask = trivial_mask(&a, &SataConfig::relative(t, SuppressionScale::Fixed(s)))
            .map_err(|e| e.to_string())?;
        let report = verify_lemma1(&a, &mask, s).map_err(|e| e.to_string())?;
        let row = &report.rows[0];
        // Independent recomputation of the bound.
        let out = twist(&a, &mask, s, &TwistOptions::default()).map_err(|e| e.to_string())?;
        let max = a.row(0).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let after: f64 = out
            .row(0)
            .iter()
            .zip(mask.row(0))
            .filter(|(_, m)| **m)
            .map(|(x, _)| x)
            .sum();
        ensure(after <= s * max + 1e-12 && report.pass, || {
            format!("case {case}: trivial mass {after} > {s}·{max}")
        })?;
        if s <= 1.0 {
            for (k, (x, y)) in a.row(0).iter().zip(out.row(0)).enumerate() {
                ensure(*y <= x + 1e-15, || {
                    format!("case {case}: weight {k} grew {x} → {y}")
                })?;
            }
            ensure(row.elementwise_nonincrease == Some(true), || {
                format!("case {case}: elementwise flag")
            })?;
        }
        masked_rows += usize::from(!mask.is_empty());
        worst_slack = worst_slack.min(s * max - after);
    }
    within(started.elapsed(), 10.0)?;
    Ok(format!(
        "10000 rows ({masked_rows} with trivial weights), min slack {worst_slack:.2e}, {:.2}s",
        started.elapsed().as_secs_f64()
    ))
}

fn criterion_2() -> Outcome {
    let row = [0.40, 0.30, 0.20, 0.06, 0.04];
    let expected = [0.40, 0.30, 0.20, 0.036, 0.016];
    let a = Tensor::from_rows(&[row]).unwrap();
    let mask = trivial_mask(
        &a,
        &SataConfig::relative(0.25, SuppressionScale::Fixed(1.0)),
    )
    .unwrap();
    let out = twist(&a, &mask, 1.0, &TwistOptions::default()).unwrap();
    // Brute force: trivial set by direct comparison, then s·x²/Σ.
    let threshold = 0.25 * 0.40;
    let total: f64 = row.iter().filter(|&&x| x <= threshold).sum();
    let brute: Vec<f64> = row
        .iter()
        .map(|&x| {
            if x <= threshold {
                x * x / (total + 1e-12)
            } else {
                x
            }
        })
        .collect();
    for k in 0..5 {
        ensure((out.data()[k] - expected[k]).abs() <= 1e-12, || {
            format!("entry {k}: {}", out.data()[k])
        })?;
        ensure((out.data()[k] - brute[k]).abs() <= 1e-12, || {
            format!("brute force entry {k}: {}", brute[k])
        })?;
    }
    Ok(format!("{:?}", out.data()))
}

fn mhsa_loss(
    cfg: AttentionConfig,
    sata: SataConfig,
    w: Tensor,
) -> impl Fn(&mut Tape, &[Var]) -> sata_core::Result<Var> + Sync {
    move |tape, v| {
        let params = MhsaParams {
            qkv_weight: v[1],
            proj_weight: v[2],
            proj_bias: v[3],
            log_temperature: None,
        };
        let out = mhsa_forward(
            tape,
            v[0],
            &params,
            &cfg,
            Some(SataLayer {
                cfg: &sata,
                scale: v[4],
            }),
        )?;
        let wv = tape.constant(w.clone());
        let weighted = tape.mul(out, wv)?;
        Ok(tape.sum(weighted))
    }
}

fn criterion_3() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for (n, dh) in [(6, 4), (5, 4), (4, 3), (6, 2), (3, 1), (2, 4)] {
        let cfg = AttentionConfig::new(2, dh);
        let d = cfg.embed_dim();
        let sata = SataConfig::relative(0.5, SuppressionScale::Learnable { init: 0.5 });
        let inputs = vec![
            random_tensor(&mut rng, &[n, d], 1.0),
            random_tensor(&mut rng, &[d, 3 * d], 1.0),
            random_tensor(&mut rng, &[d, d], 1.0),
            random_tensor(&mut rng, &[d], 0.5),
            Tensor::scalar(rng.random_range(0.2..1.5)),
        ];
        let w = random_tensor(&mut rng, &[n, d], 1.0);
        let report =
            finite_diff_check(mhsa_loss(cfg, sata, w), &inputs, 1e-5).map_err(|e| e.to_string())?;
        ensure(report.pass, || format!("MHSA N={n} D={d}: {report:?}"))?;
        worst = worst.max(report.max_rel_err);
        cases += 1;
    }

    // Tiny ViT: depth 2, D = 16, 2 heads, 8×8 images in 4×4 patches.
    let mut cfg = vit(8, 4, 16, 2, 2, 4);
    cfg.sata = Some(SataConfig::relative(
        0.4,
        SuppressionScale::Learnable { init: 0.5 },
    ));
    let mut state = ModelState::init(&cfg, 31).unwrap();
    for (i, b) in state.blocks.iter_mut().enumerate() {
        b.attn
            .qkv_weight
            .data_mut()
            .iter_mut()
            .for_each(|x| *x *= 4.0);
        b.sata_scale = Some(Tensor::scalar(0.3 + 0.4 * i as f64));
    }
    state
        .pos_embed
        .data_mut()
        .iter_mut()
        .for_each(|x| *x *= 20.0);
    let batch = images(&mut rng, 2, 8);
    let labels = [0usize, 3];
    let mut probe = AttentionProbe::default();
    let mut tape = Tape::new();
    let params = state.register(&mut tape, false);
    vit_forward(&mut tape, &batch, &params, &cfg, Some(&mut probe)).unwrap();
    for layer in 0..cfg.depth {
        let masked: usize = probe
            .records
            .iter()
            .filter(|r| r.layer == layer)
            .map(|r| r.mask.as_ref().map_or(0, |m| m.count()))
            .sum();
        ensure(masked > 0, || {
            format!("tiny ViT layer {layer} suppresses nothing")
        })?;
    }
    let inputs: Vec<Tensor> = state.named().into_iter().map(|(_, t)| t.clone()).collect();
    let f = |tape: &mut Tape, v: &[Var]| {
        let params = state.from_flat(v)?;
        let logits = vit_forward(tape, &batch, &params, &cfg, None)?;
        tape.cross_entropy(logits, &labels)
    };
    let report = finite_diff_check(f, &inputs, 1e-5).map_err(|e| e.to_string())?;
    ensure(report.pass, || format!("tiny ViT: {report:?}"))?;
    worst = worst.max(report.max_rel_err);
    within(started.elapsed(), 60.0)?;
    Ok(format!(
        "{cases} MHSA instances + tiny ViT ({} scalars, s = {:?}), max rel err {worst:.2e}, {:.1}s",
        report.checked,
        state.sata_scales(),
        started.elapsed().as_secs_f64()
    ))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut max_diff: f64 = 0.0;
    let mut bitwise = true;
    for trial in 0..5 {
        let mut on = vit(16, 4, 16, 4, 3, 10);
        on.sata = Some(SataConfig::relative(
            0.0,
            SuppressionScale::Learnable { init: 0.5 },
        ));
        let mut off = on.clone();
        off.sata = None;
        let state = ModelState::init(&on, trial).unwrap();
        let mut plain = state.clone();
        plain.blocks.iter_mut().for_each(|b| b.sata_scale = None);
        let batch = images(&mut rng, 4, 16);
        let x = predict_logits(&state, &on, &batch).unwrap();
        let y = predict_logits(&plain, &off, &batch).unwrap();
        max_diff = max_diff.max(x.max_abs_diff(&y));
        bitwise &= x
            .data()
            .iter()
            .zip(y.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
    }
    ensure(max_diff <= 1e-15, || format!("max diff {max_diff:e}"))?;
    Ok(format!(
        "5 random batches, max |Δlogit| {max_diff:e}, bitwise identical: {bitwise}"
    ))
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut zeroed = 0;
    for _ in 0..200 {
        let rows = rng.random_range(1..6);
        let cols = rng.random_range(2..40);
        let mut data = Vec::new();
        for _ in 0..rows {
            let logits: Vec<f64> = (0..cols).map(|_| rng.random_range(-4.0..4.0)).collect();
            data.extend(softmax_row(&logits));
        }
        let a = Tensor::matrix(rows, cols, data).unwrap();
        let mask = trivial_mask(
            &a,
            &SataConfig::relative(0.075, SuppressionScale::Fixed(0.0)),
        )
        .unwrap();
        let out = twist(&a, &mask, 0.0, &TwistOptions::default()).unwrap();
        for (k, (x, y)) in a.data().iter().zip(out.data()).enumerate() {
            if mask.bits()[k] {
                ensure(*y == 0.0, || format!("masked entry {k} is {y}"))?;
                zeroed += 1;
            } else {
                ensure(x.to_bits() == y.to_bits(), || {
                    format!("kept entry {k} changed")
                })?;
            }
        }
    }
    // Wired through a model with the deletion configuration (s = 0, t = 0.075).
    let mut cfg = vit(16, 4, 16, 2, 2, 10);
    cfg.sata = Some(SataConfig::relative(0.075, SuppressionScale::Fixed(0.0)));
    let state = ModelState::init(&cfg, 5).unwrap();
    let mut probe = AttentionProbe::default();
    let mut tape = Tape::new();
    let params = state.register(&mut tape, false);
    vit_forward(
        &mut tape,
        &images(&mut rng, 2, 16),
        &params,
        &cfg,
        Some(&mut probe),
    )
    .unwrap();
    let mut model_zeroed = 0;
    for rec in &probe.records {
        let mask = rec.mask.as_ref().ok_or("probe lost the mask")?;
        for (k, (x, y)) in rec.before.data().iter().zip(rec.after.data()).enumerate() {
            if mask.bits()[k] {
                ensure(*y == 0.0, || "model kept a masked weight".to_string())?;
                model_zeroed += 1;
            } else {
                ensure(x == y, || "model changed an unmasked weight".to_string())?;
            }
        }
    }
    Ok(format!(
        "{zeroed} masked entries zeroed in 200 matrices, {model_zeroed} inside the model"
    ))
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let dh = 16usize;
    let mut min_gain = f64::INFINITY;
    for i in 0..1000 {
        let len = rng.random_range(2..64);
        let logits: Vec<f64> = (0..len).map(|_| rng.random_range(-4.0..4.0)).collect();
        let lo = logits.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < 1e-9 {
            continue;
        }
        let ratio = |mult: f64| {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::matrix(1, len, logits.clone()).unwrap());
            let a = tape.softmax_rows(x, mult / (dh as f64).sqrt()).unwrap();
            let v = tape.value(a).data();
            v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                / v.iter().copied().fold(f64::INFINITY, f64::min)
        };
        let (r1, r2) = (ratio(1.0), ratio(2.0));
        ensure(r2 > r1, || {
            format!("row {i}: ratio {r2} at τ'=2 vs {r1} at τ'=1")
        })?;
        min_gain = min_gain.min(r2 / r1);
    }
    Ok(format!(
        "1000 rows, smallest max/min ratio gain {min_gain:.4}"
    ))
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut cfg = vit(16, 4, 32, 4, 3, 10);
    cfg.attention.lsa_diagonal_mask = true;
    cfg.attention.lsa_learnable_temperature = true;
    cfg.sata = Some(SataConfig::default());
    let state = ModelState::init(&cfg, 7).unwrap();
    let mut probe = AttentionProbe::default();
    let mut tape = Tape::new();
    let params = state.register(&mut tape, false);
    vit_forward(
        &mut tape,
        &images(&mut rng, 3, 16),
        &params,
        &cfg,
        Some(&mut probe),
    )
    .unwrap();
    let mut worst: f64 = 0.0;
    for rec in &probe.records {
        for r in 0..rec.before.rows() {
            worst = worst.max(rec.before.at(r, r));
        }
    }
    ensure(worst < 1e-8, || format!("diagonal weight {worst:e}"))?;
    Ok(format!(
        "{} head matrices, max diagonal weight {worst:e}",
        probe.records.len()
    ))
}

fn criterion_8() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.data.kind = DatasetKind::Synthetic;
    cfg.embed_dim = 16;
    cfg.num_heads = 2;
    cfg.depth = 3;
    cfg.t = 0.5;
    let data = make_synthetic(32, 2, 16, 8).unwrap();
    let (batch, labels) = data.batch(&(0..32).collect::<Vec<_>>()).unwrap();
    let run = |lr2: f64| -> Result<(ModelState, ModelState), String> {
        let mut cfg = cfg.clone();
        cfg.lr2 = Some(lr2);
        let model = cfg.model_config(3, 16, 2).map_err(|e| e.to_string())?;
        let init = ModelState::init(&model, 0).map_err(|e| e.to_string())?;
        let mut state = init.clone();
        let mut opt = AdamW::new(&state, cfg.optimizer(), false).map_err(|e| e.to_string())?;
        for _ in 0..5 {
            train_step(&mut state, &model, &mut opt, &batch, &labels).map_err(|e| e.to_string())?;
        }
        Ok((init, state))
    };
    let (init, frozen) = run(0.0)?;
    ensure(frozen.sata_scales().iter().all(|&s| s == 0.5), || {
        format!("s moved: {:?}", frozen.sata_scales())
    })?;
    ensure(init.sata_scales().len() == 3, || {
        "expected 3 learnable scales".into()
    })?;
    let moved = init
        .named()
        .iter()
        .zip(frozen.named())
        .filter(|((_, a), (_, b))| *a != *b)
        .count();
    ensure(moved > 0, || "no model weight moved".into())?;
    let (_, trained) = run(1e-3)?;
    let s = trained.sata_scales();
    ensure(s.iter().any(|&v| v != 0.5), || {
        format!("s did not move: {s:?}")
    })?;
    Ok(format!(
        "lr2=0: s stays 0.5, {moved} weight tensors moved; lr2=1e-3: s = {s:.5?}"
    ))
}

fn smoke_config(sata: bool) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.kind = DatasetKind::Synthetic;
    cfg.data.synthetic_image_size = 16;
    cfg.embed_dim = 32;
    cfg.depth = 2;
    cfg.num_heads = 2;
    cfg.batch_size = 32;
    cfg.epochs = 20;
    cfg.augment = false;
    cfg.sata = sata;
    cfg.seed = 9;
    cfg
}

fn synthetic_pair() -> (Dataset, Dataset) {
    let cfg = smoke_config(true);
    sata_core::experiment::load_data(&cfg).unwrap()
}

fn criterion_9(checkpoint_dir: &std::path::Path) -> Outcome {
    let started = Instant::now();
    let (train, val) = synthetic_pair();
    let mut lines = Vec::new();
    for sata in [true, false] {
        let mut cfg = smoke_config(sata);
        if sata {
            cfg.out_dir = Some(checkpoint_dir.to_path_buf());
        }
        let a = train_on(&cfg, &train, &val).map_err(|e| e.to_string())?;
        cfg.out_dir = None;
        let b = train_on(&cfg, &train, &val).map_err(|e| e.to_string())?;
        ensure(a.step_losses == b.step_losses && a.state == b.state, || {
            format!("sata={sata}: identically seeded runs differ")
        })?;
        let reached = a
            .epochs
            .iter()
            .find(|e| e.train_acc >= 0.95)
            .map(|e| e.epoch);
        let epoch = reached.ok_or_else(|| {
            format!(
                "sata={sata}: best train acc {:?}",
                a.epochs.iter().map(|e| e.train_acc).fold(0.0, f64::max)
            )
        })?;
        lines.push(format!(
            "sata {}: ≥95% train acc at epoch {epoch}, final val {:.3}",
            if sata { "on" } else { "off" },
            a.final_val_acc().unwrap_or(0.0)
        ));
    }
    within(started.elapsed(), 300.0)?;
    Ok(format!(
        "{}; deterministic; {:.1}s",
        lines.join(", "),
        started.elapsed().as_secs_f64()
    ))
}

fn criterion_10() -> Outcome {
    let mut cfg = smoke_config(true);
    cfg.embed_dim = 8;
    cfg.depth = 1;
    cfg.epochs = 1;
    cfg.data.synthetic_image_size = 8;
    let train = make_synthetic(64, 2, 8, 1).unwrap();
    let val = make_synthetic(32, 2, 8, 2).unwrap().with_split(Split::Test);
    let s_values = [1.0, 0.75, 0.5, 0.25, 0.1, 0.0];
    let t_values = [0.1, 0.05, 0.025, 0.01, 0.0];
    let grid =
        grid_search_on(&cfg, &s_values, &t_values, &train, &val).map_err(|e| e.to_string())?;
    ensure(
        grid.cells.len() == 5 && grid.cells.iter().all(|r| r.len() == 6),
        || "grid shape".into(),
    )?;
    let csv = grid.to_csv().map_err(|e| e.to_string())?;
    let lines: Vec<&str> = csv.lines().collect();
    ensure(lines.len() == 7, || format!("{} CSV lines", lines.len()))?;
    ensure(lines[0] == "t\\s,1,0.75,0.5,0.25,0.1,0", || {
        format!("header {}", lines[0])
    })?;
    for (line, t) in lines[1..6].iter().zip(t_values) {
        let fields: Vec<&str> = line.split(',').collect();
        ensure(fields.len() == 7 && fields[0] == t.to_string(), || {
            format!("row {line}")
        })?;
    }
    ensure(
        lines[6].starts_with("baseline,") && lines[6].split(',').count() == 7,
        || format!("baseline {}", lines[6]),
    )?;

    // The t = 0 row against an independent suppression-off run.
    let mut off = cfg.clone();
    off.sata = false;
    let base = train_on(&off, &train, &val).map_err(|e| e.to_string())?;
    let base_acc = base.final_val_acc().unwrap();
    let base_loss = *base.step_losses.last().unwrap();
    for cell in &grid.cells[4] {
        let Cell::Done {
            val_acc,
            final_loss,
        } = cell
        else {
            return Err(format!("t=0 cell failed: {cell:?}"));
        };
        ensure(
            val_acc.to_bits() == base_acc.to_bits() && final_loss.to_bits() == base_loss.to_bits(),
            || format!("t=0 cell {val_acc}/{final_loss} vs baseline {base_acc}/{base_loss}"),
        )?;
    }
    ensure(grid.baseline.val_acc() == Some(base_acc), || {
        "baseline row".into()
    })?;
    Ok(format!(
        "5×6 grid + baseline row, t=0 row bit-identical to baseline (acc {base_acc})"
    ))
}

fn criterion_11(trained: &std::path::Path) -> Outcome {
    let (_, val) = synthetic_pair();
    let mut checked = 0usize;
    let mut worst_hist: f64 = 0.0;
    let mut paths = vec![trained.to_path_buf()];
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    // A fresh 65-token model with learnable scales, too.
    let mut fresh = vit(32, 4, 16, 2, 2, 10);
    fresh.sata = Some(SataConfig::default());
    let fresh_path = dir.path().join("fresh.json");
    save_checkpoint(&fresh_path, &fresh, &ModelState::init(&fresh, 2).unwrap())
        .map_err(|e| e.to_string())?;
    paths.push(fresh_path);
    for path in &paths {
        let (model, state) = load_checkpoint(path).map_err(|e| e.to_string())?;
        let batch = if model.image_size == 32 {
            images(&mut ChaCha8Rng::seed_from_u64(11), 2, 32)
        } else {
            val.batch(&[0, 1, 2]).map_err(|e| e.to_string())?.0
        };
        let report =
            attention_report(&state, &model, &batch, 0.01, 0.005).map_err(|e| e.to_string())?;
        for table in &report.tables {
            ensure(
                table.rows.len() == batch.shape()[0] * model.num_tokens(),
                || "row count".into(),
            )?;
            for row in &table.rows {
                let diff = (row.trivial_mass - row.hist_trivial_mass).abs();
                worst_hist = worst_hist.max(diff);
                ensure(diff <= 1e-9, || format!("histogram mismatch {diff:e}"))?;
                ensure(
                    row.suppressed_trivial_mass <= row.s.abs() * row.max_weight + 1e-12,
                    || {
                        format!(
                            "row {} of layer {} head {} exceeds the bound",
                            row.row, table.layer, table.head
                        )
                    },
                )?;
                ensure(row.lemma_ok, || "lemma flag".into())?;
                checked += 1;
            }
        }
    }
    Ok(format!(
        "{checked} rows over 2 checkpoints, max |trivial − histogram| {worst_hist:e}"
    ))
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temp dir");
    let checkpoint = dir.path().join(sata_core::experiment::CHECKPOINT_FILE);
    let criteria: Vec<Criterion> = vec![
        ("Lemma bound fuzz", Box::new(criterion_1)),
        ("worked example oracle", Box::new(criterion_2)),
        ("gradient correctness", Box::new(criterion_3)),
        ("null-suppression identity", Box::new(criterion_4)),
        ("deletion ablation wiring", Box::new(criterion_5)),
        ("temperature property", Box::new(criterion_6)),
        ("diagonal masking", Box::new(criterion_7)),
        ("dual learning-rate isolation", Box::new(criterion_8)),
        (
            "desk-scale smoke test",
            Box::new(|| criterion_9(dir.path())),
        ),
        ("grid harness shape", Box::new(criterion_10)),
        (
            "attention report consistency",
            Box::new(|| criterion_11(&checkpoint)),
        ),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run))
            .unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS criterion {}: {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {}: {name}: {why}", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
