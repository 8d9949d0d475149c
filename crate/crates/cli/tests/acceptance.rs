//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p metagait-cli --test acceptance`.
//! Criteria 5 and 6 train real models and take tens of minutes on one core.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use metagait::data::{synthesize, Condition, GenConfig, Split};
use metagait::eval::{evaluate, mean_average_precision, rank1_cross_view, Meta};
use metagait::gradcheck::{run_suite, SuiteConfig, TOLERANCE};
use metagait::model::{load_checkpoint, save_checkpoint, total_loss, MetaGait, ModelConfig, Trainer};
use metagait::mta::{AttentionDim, CalibrationMode, MtaBlock, MtaSpec};
use metagait::mtp::{pool_temporal, MtpHead, PoolMethod, Weighting, GEM_EPS, GEM_P_MAX, GEM_P_MIN};
use metagait::params::{Binding, ParamStore};
use metagait::{Tensor, Trace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

const BIN: &str = env!("CARGO_BIN_EXE_metagait");

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

// ---------------------------------------------------------------- 1

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let results = match run_suite(&ModelConfig::tiny(), &SuiteConfig::default()) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("suite errored: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let worst = results
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("suite is non-empty");
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !(r.max_rel_error < TOLERANCE))
        .map(|r| r.name.as_str())
        .collect();
    let blocks = ["mhn", "mta/spatial", "mta/channel", "mta/temporal", "mtp", "model"];
    let missing: Vec<&str> = blocks
        .iter()
        .copied()
        .filter(|b| !results.iter().any(|r| r.name == *b))
        .collect();
    outcome(
        failed.is_empty() && missing.is_empty() && secs < 120.0,
        format!(
            "{} checks, worst {} at {:.2e}, failed {failed:?}, missing {missing:?}, {secs:.1}s",
            results.len(),
            worst.name,
            worst.max_rel_error
        ),
    )
}

// ---------------------------------------------------------------- 2

fn pooled(x: &Tensor, method: PoolMethod, p: f64) -> Tensor {
    let mut tr = Trace::new();
    let xv = tr.constant(x.clone());
    let pv = tr.constant(Tensor::scalar(p));
    let y = pool_temporal(&mut tr, xv, method, Some(pv)).unwrap();
    tr.value(y).clone()
}

fn analytic_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut gem1 = 0.0f64;
    let mut order_violations = 0;
    for _ in 0..50 {
        let x = Tensor::uniform(vec![3, 7, 2, 3], 0.01, 4.0, &mut rng).unwrap();
        let mean = pooled(&x, PoolMethod::Mean, 1.0);
        gem1 = gem1.max(pooled(&x, PoolMethod::Gem, 1.0).max_abs_diff(&mean));
        let max = pooled(&x, PoolMethod::Max, 1.0);
        let p = rng.gen_range(1.0..20.0);
        let gem = pooled(&x, PoolMethod::Gem, p);
        for i in 0..mean.numel() {
            let (a, g, b) = (mean.data()[i], gem.data()[i], max.data()[i]);
            if !(a <= g + 1e-12 && g <= b + 1e-12) {
                order_violations += 1;
            }
        }
    }

    // Zeroing every hypernetwork output layer makes every generated weight 0.
    let cfg = ModelConfig::tiny();
    let (model, mut store) = MetaGait::new(cfg.clone()).unwrap();
    let names: Vec<String> = store.names().filter(|n| n.ends_with("/meta2")).cloned().collect();
    for n in &names {
        let shape = store.get(n).unwrap().shape().to_vec();
        store.set(n, Tensor::zeros(shape).unwrap()).unwrap();
    }
    let [h, w] = cfg.resolution;
    let clip = Tensor::uniform(vec![1, cfg.frames, h, w], 0.0, 1.0, &mut rng).unwrap();
    let mut tr = Trace::new();
    let mut bind = Binding::new(&store);
    let x = tr.constant(clip);
    let fwd = model.forward_clip(&mut tr, &mut bind, x).unwrap();
    let att_half = !fwd.attentions.is_empty()
        && fwd
            .attentions
            .iter()
            .all(|r| tr.value(r.attention).data().iter().all(|&a| a == 0.5));
    let beta_half = fwd
        .beta
        .map_or(false, |b| tr.value(b).data().iter().all(|&v| v == 0.5));
    outcome(
        gem1 <= 1e-12 && order_violations == 0 && att_half && beta_half,
        format!(
            "|GeM(1) - mean| {gem1:.1e}, ordering violations {order_violations}, \
             {} attention maps all 0.5: {att_half}, beta all 0.5: {beta_half}",
            fwd.attentions.len()
        ),
    )
}

// ---------------------------------------------------------------- 3

/// Hand assembly of `σ(g_L·f_global + Σ_l g_l·f_l) ⊗ X` from the streams,
/// compared with the block output.
fn mta_gap(dim: AttentionDim, seed: u64) -> f64 {
    let shape = [4, 6, 8, 6];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = MtaSpec {
        dim,
        ratio: 2,
        kernels: vec![1, 3, 5],
        mode: CalibrationMode::Meta,
        gate: true,
        global_pool: 2,
    };
    let mut store = ParamStore::new();
    let block = MtaBlock::new(&mut store, "blk", spec, shape, &mut rng).unwrap();
    let x = Tensor::uniform(shape.to_vec(), -2.0, 2.0, &mut rng).unwrap();
    let mut tr = Trace::new();
    let mut bind = Binding::new(&store);
    let xv = tr.constant(x.clone());
    let o = block.forward(&mut tr, &mut bind, xv).unwrap();
    let g = tr.value(o.gate.unwrap());
    let fg = tr.value(o.global);
    let fl: Vec<&Tensor> = o.locals.iter().map(|&v| tr.value(v)).collect();
    let e = fg.shape()[1];
    let l = fl.len();
    let att = |r: usize, i: usize| {
        let mut z = g.at(&[r, l]) * fg.at(&[r, i]);
        for (k, f) in fl.iter().enumerate() {
            z += g.at(&[r, k]) * f.at(&[r, i]);
        }
        sigmoid(z)
    };
    let out = tr.value(o.out);
    let [c, t, h, w] = shape;
    let mut gap = 0.0f64;
    for ci in 0..c {
        for ti in 0..t {
            for hi in 0..h {
                for wi in 0..w {
                    let a = match dim {
                        AttentionDim::Channel => att(ti, ci),
                        AttentionDim::Temporal => att(0, ti),
                        AttentionDim::Spatial => att(ti, hi * w + wi),
                    };
                    let want = a * x.at(&[ci, ti, hi, wi]);
                    gap = gap.max((out.at(&[ci, ti, hi, wi]) - want).abs());
                }
            }
        }
    }
    assert_eq!(e, match dim {
        AttentionDim::Channel => c,
        AttentionDim::Temporal => t,
        AttentionDim::Spatial => h * w,
    });
    gap
}

/// `Σ_k β_k · pool_k(X)` with every pool computed by plain loops.
fn mtp_gap(seed: u64) -> f64 {
    let (c, t, h, w) = (4, 5, 3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let head = MtpHead::new(&mut store, "mtp", &PoolMethod::ALL, Weighting::Meta, c, t, &mut rng).unwrap();
    let p = rng.gen_range(1.0..6.0);
    store.set("mtp/gem_p", Tensor::scalar(p)).unwrap();
    let x = Tensor::uniform(vec![c, t, h, w], 0.0, 2.0, &mut rng).unwrap();
    let mut tr = Trace::new();
    let mut bind = Binding::new(&store);
    let xv = tr.constant(x.clone());
    let o = head.forward(&mut tr, &mut bind, xv).unwrap();
    let beta = tr.value(o.beta.unwrap()).data().to_vec();
    let out = tr.value(o.out);
    let mut gap = 0.0f64;
    for ci in 0..c {
        for hi in 0..h {
            for wi in 0..w {
                let col: Vec<f64> = (0..t).map(|ti| x.at(&[ci, ti, hi, wi])).collect();
                let mean = col.iter().sum::<f64>() / t as f64;
                let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let gem = (col.iter().map(|v| v.max(GEM_EPS).powf(p)).sum::<f64>() / t as f64).powf(1.0 / p);
                let want = beta[0] * mean + beta[1] * max + beta[2] * gem;
                gap = gap.max((out.at(&[ci, 0, hi, wi]) - want).abs());
            }
        }
    }
    gap
}

fn compositional_oracles() -> Outcome {
    let dims = [AttentionDim::Spatial, AttentionDim::Channel, AttentionDim::Temporal];
    let mta = (0..100u64).map(|s| mta_gap(dims[s as usize % 3], 1000 + s)).fold(0.0, f64::max);
    let mtp = (0..100u64).map(|s| mtp_gap(2000 + s)).fold(0.0, f64::max);
    outcome(
        mta <= 1e-12 && mtp <= 1e-12,
        format!("100 inputs each: attention block gap {mta:.1e}, pooling head gap {mtp:.1e}"),
    )
}

// ---------------------------------------------------------------- 4

fn protocol_oracle() -> Outcome {
    let views = [0u32, 36, 72, 108];
    let mut mismatches = 0;
    let mut same_view_seen = 0;
    let mut counted = 0;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gallery: Vec<Meta> = (0..30)
            .map(|_| Meta {
                id: rng.gen_range(0..8),
                view: views[rng.gen_range(0..4)],
            })
            .collect();
        let probes: Vec<Meta> = (0..20)
            .map(|_| Meta {
                id: rng.gen_range(0..8),
                view: views[rng.gen_range(0..4)],
            })
            .collect();
        // Coarse distances make ties common.
        let dist: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..30).map(|_| f64::from(rng.gen_range(0..12u8))).collect())
            .collect();
        let mut observe = |p: usize, g: usize| {
            counted += 1;
            if probes[p].view == gallery[g].view {
                same_view_seen += 1;
            }
        };
        let r1 = rank1_cross_view(&dist, &gallery, &probes, &mut observe).unwrap();
        let ap = mean_average_precision(&dist, &gallery, &probes, &mut observe).unwrap();

        // Brute force: sort candidate indices by (distance, index) explicitly.
        let mut hits = std::collections::BTreeMap::<u32, (usize, usize)>::new();
        let mut excluded = 0;
        let mut aps = Vec::new();
        for (p, probe) in probes.iter().enumerate() {
            let mut cands: Vec<(f64, usize)> = (0..30)
                .filter(|&g| gallery[g].view != probe.view)
                .map(|g| (dist[p][g], g))
                .collect();
            cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            match cands.first() {
                Some(&(_, g)) => {
                    let e = hits.entry(probe.view).or_default();
                    e.0 += usize::from(gallery[g].id == probe.id);
                    e.1 += 1;
                }
                None => excluded += 1,
            }
            let mut found = 0;
            let mut precisions = Vec::new();
            for (rank, &(_, g)) in cands.iter().enumerate() {
                if gallery[g].id == probe.id {
                    found += 1;
                    precisions.push(found as f64 / (rank + 1) as f64);
                }
            }
            if !precisions.is_empty() {
                aps.push(precisions.iter().sum::<f64>() / precisions.len() as f64);
            }
        }
        let map = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
        if r1.per_view != hits || r1.excluded != excluded || ap.map != map || ap.counted != aps.len() {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0 && same_view_seen == 0 && counted > 0,
        format!("200 instances of 20x30: {mismatches} mismatches, {same_view_seen} same-view comparisons among {counted}"),
    )
}

// ---------------------------------------------------------------- 5

/// Model used by the learning and ablation runs.
fn learning_model() -> serde_json::Value {
    json!({
        "stage_channels": [4, 8, 8],
        "frames": 30,
        "resolution": [32, 24],
        "bins": 4,
        "embed_dim": 16,
        "learning_rate": 1e-3,
        "seed": 0
    })
}

fn learning_data() -> serde_json::Value {
    json!({
        "n_ids": 24,
        "train_ids": 16,
        "views": [0, 36, 72, 108, 144, 180],
        "conditions": {"nm": 2, "bg": 1},
        "frames": 40,
        "resolution": [32, 24],
        "seed": 0
    })
}

fn run_cli(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(BIN).args(args).output().expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn write_config(dir: &Path, name: &str, v: &serde_json::Value) -> String {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

fn learning_signal(dir: &Path) -> Outcome {
    let cfg = json!({
        "model": learning_model(),
        "data": {"synthetic": learning_data()},
        "output_dir": dir.join("learn"),
        "train": {"steps": 2000, "batch_p": 8, "batch_k": 2, "checkpoint_every": 1000, "seed": 1},
        "eval": {"gallery_seqs": 1}
    });
    let path = write_config(dir, "learn.json", &cfg);
    let start = Instant::now();
    let (code, _, err) = run_cli(&["train", "--config", &path]);
    if code != 0 {
        return outcome(false, format!("train exited {code}: {err}"));
    }
    let (code, out, err) = run_cli(&["eval", "--config", &path]);
    let secs = start.elapsed().as_secs_f64();
    if code != 0 {
        return outcome(false, format!("eval exited {code}: {err}"));
    }
    let summary = std::fs::read_to_string(dir.join("learn/eval_summary.csv")).unwrap();
    let ranks: Vec<f64> = summary
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    let mean = ranks.iter().sum::<f64>() / ranks.len() as f64;
    let chance = 100.0 / 8.0;
    outcome(
        mean >= 60.0 && mean >= 5.0 * chance && secs < 1800.0,
        format!(
            "mean rank-1 {mean:.2}% ({}), chance {chance}%, {secs:.0}s",
            out.trim().replace('\n', "; ")
        ),
    )
}

// ---------------------------------------------------------------- 6

const ABLATION_STEPS: usize = 500;

fn ablation_rank1(model: ModelConfig, seed: u64) -> f64 {
    let gen: GenConfig = serde_json::from_value(learning_data()).unwrap();
    let index = synthesize(&gen).unwrap();
    let cfg = ModelConfig {
        num_classes: index.ids(Split::Train).len(),
        seed,
        ..model
    };
    let (m, store) = MetaGait::new(cfg).unwrap();
    let mut t = Trainer::new(m, store);
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    t.fit(&index, 8, 2, ABLATION_STEPS, &mut rng, |_, _| Ok(())).unwrap();
    let r = evaluate(&t.model, &t.store, &index, 1).unwrap();
    let conds = [Condition::Nm, Condition::Bg];
    conds.iter().filter_map(|&c| r.mean_rank1(c)).sum::<f64>() / conds.len() as f64
}

fn ablation_direction() -> Outcome {
    let full: ModelConfig = serde_json::from_value(learning_model()).unwrap();
    let variants = [
        ("full", full.clone()),
        (
            "mta-off",
            ModelConfig {
                mta_dims: vec![],
                ..full.clone()
            },
        ),
        (
            "max-pool-only",
            ModelConfig {
                pooling: vec![PoolMethod::Max],
                pool_weighting: Weighting::None,
                ..full.clone()
            },
        ),
        (
            "static",
            ModelConfig {
                mta_mode: CalibrationMode::Static,
                pool_weighting: Weighting::Static,
                ..full.clone()
            },
        ),
    ];
    let start = Instant::now();
    let mut means = Vec::new();
    let mut per_seed = Vec::new();
    for (name, cfg) in &variants {
        let r: Vec<f64> = (0..3).map(|s| ablation_rank1(cfg.clone(), s)).collect();
        let m = r.iter().sum::<f64>() / 3.0;
        println!("  {name:<14} seeds {:?} mean {m:.2}%", r.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>());
        means.push((name, m));
        per_seed.push(r);
    }
    let full_mean = means[0].1;
    let mut ties = Vec::new();
    for (k, r) in per_seed.iter().enumerate().skip(1) {
        let wins = (0..3).filter(|&s| per_seed[0][s] > r[s]).count();
        let tied = (0..3).filter(|&s| per_seed[0][s] == r[s]).count();
        ties.push(format!("{}: full ahead on {wins}/3 seeds, tied on {tied}", means[k].0));
    }
    let ok = means[1..].iter().all(|(_, m)| full_mean >= *m);
    outcome(
        ok,
        format!(
            "{ABLATION_STEPS} steps x 3 seeds, means {:?}; {}; {:.0}s",
            means.iter().map(|(n, m)| format!("{n} {m:.2}")).collect::<Vec<_>>(),
            ties.join(", "),
            start.elapsed().as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 7

fn tiny_run_config(dir: &Path, steps: usize) -> serde_json::Value {
    let tiny = ModelConfig::tiny();
    json!({
        "model": tiny,
        "data": {"synthetic": {
            "n_ids": 6, "train_ids": 4, "views": [0, 90, 180],
            "conditions": {"nm": 2, "bg": 1}, "frames": 6,
            "resolution": tiny.resolution, "seed": 3
        }},
        "output_dir": dir,
        "train": {"steps": steps, "batch_p": 2, "batch_k": 2, "checkpoint_every": 0, "seed": 5}
    })
}

fn robustness(dir: &Path) -> Outcome {
    // Injected NaN through a resumed checkpoint.
    let base = dir.join("nan");
    let path = write_config(dir, "nan.json", &tiny_run_config(&base, 1));
    let (code, _, err) = run_cli(&["train", "--config", &path]);
    if code != 0 {
        return outcome(false, format!("seed run exited {code}: {err}"));
    }
    let mut ck = load_checkpoint(&base.join("final.ckpt")).unwrap();
    ck.store.get_mut("stage1/conv").unwrap().data_mut()[0] = f64::NAN;
    let poisoned = base.join("poisoned.ckpt");
    save_checkpoint(&poisoned, &ck).unwrap();
    let mut cfg = tiny_run_config(&dir.join("nan2"), 3);
    cfg["train"]["init_checkpoint"] = json!(poisoned);
    let path = write_config(dir, "nan2.json", &cfg);
    let (nan_code, _, nan_err) = run_cli(&["train", "--config", &path]);

    // Single-identity batches: rejected by the loss and by the config.
    let mut tr = Trace::new();
    let emb = tr.constant(Tensor::ones(vec![2, 4, 3]).unwrap());
    let cls = tr.constant(Tensor::zeros(vec![2, 3, 3]).unwrap());
    let loss_rejects = total_loss(&mut tr, emb, cls, &[0, 0, 0, 0], 0.2).is_err();
    let mut cfg = tiny_run_config(&dir.join("single"), 3);
    cfg["train"]["batch_p"] = json!(1);
    let path = write_config(dir, "single.json", &cfg);
    let (single_code, _, _) = run_cli(&["train", "--config", &path]);

    // Exponent clamp under 10k arbitrary updates.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let head = MtpHead::new(&mut store, "mtp", &PoolMethod::ALL, Weighting::Meta, 2, 4, &mut rng).unwrap();
    let x = Tensor::uniform(vec![2, 4, 3, 2], 0.0, 3.0, &mut rng).unwrap();
    let mut bad = 0;
    for i in 0..10_000 {
        let p = store.get("mtp/gem_p").unwrap().item();
        let step = match i % 500 {
            0 => f64::NAN,
            250 => f64::INFINITY,
            _ => rng.gen_range(-1.0..1.0) * 10f64.powf(rng.gen_range(-3.0..3.0)),
        };
        store.set("mtp/gem_p", Tensor::scalar(p + step)).unwrap();
        head.clamp_p(&mut store).unwrap();
        let p = store.get("mtp/gem_p").unwrap().item();
        let mut tr = Trace::new();
        let mut bind = Binding::new(&store);
        let xv = tr.constant(x.clone());
        let out = head.forward(&mut tr, &mut bind, xv).unwrap();
        if !(GEM_P_MIN..=GEM_P_MAX).contains(&p) || !tr.value(out.out).is_finite() {
            bad += 1;
        }
    }
    outcome(
        nan_code == 3 && loss_rejects && single_code == 2 && bad == 0,
        format!(
            "NaN run exit {nan_code} ({}), single-id loss rejected {loss_rejects}, \
             P=1 config exit {single_code}, clamp failures {bad}/10000",
            nan_err.trim()
        ),
    )
}

// ---------------------------------------------------------------- 8

fn determinism(dir: &Path) -> Outcome {
    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        let path = write_config(dir, &format!("det_{run}.json"), &tiny_run_config(&dir.join(run), 40));
        let (code, _, err) = run_cli(&["train", "--config", &path]);
        if code != 0 {
            return outcome(false, format!("run {run} exited {code}: {err}"));
        }
        csvs.push(std::fs::read(dir.join(run).join("metrics.csv")).unwrap());
    }
    let rows = String::from_utf8_lossy(&csvs[0]).lines().count() - 1;
    outcome(
        csvs[0] == csvs[1] && rows == 40,
        format!("{rows} rows, byte-identical: {}", csvs[0] == csvs[1]),
    )
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let only: Option<Vec<usize>> = std::env::var("METAGAIT_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let criteria: [(&str, &dyn Fn() -> Outcome); 8] = [
        ("gradient suite", &gradient_suite),
        ("analytic identities", &analytic_identities),
        ("compositional oracles", &compositional_oracles),
        ("protocol oracle", &protocol_oracle),
        ("learning signal", &|| learning_signal(dir.path())),
        ("ablation direction", &ablation_direction),
        ("degeneracy and robustness", &|| robustness(dir.path())),
        ("determinism", &|| determinism(dir.path())),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().map_or(false, |o| !o.contains(&n)) {
            continue;
        }
        let o = run();
        let verdict = if o.passed { "PASS" } else { "FAIL" };
        println!("criterion {n} [{verdict}] {name}: {}", o.detail);
        failed += usize::from(!o.passed);
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
