use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use metagait::data::{export_dataset, synthesize, Condition, Split};
use metagait::eval::{evaluate, EvalReport};
use metagait::gradcheck::{run_suite, SuiteResult};
use metagait::model::{load_checkpoint, save_checkpoint, Checkpoint, MetaGait, StepLoss, Trainer};
use metagait::mtp::PoolMethod;
use metagait::params::Binding;
use metagait::{Tensor, Trace};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, FINAL_CHECKPOINT};
use crate::error::{CliError, CliResult};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const EVAL_PER_VIEW_FILE: &str = "eval_per_view.csv";
pub const EVAL_SUMMARY_FILE: &str = "eval_summary.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

/// One metrics row; `{}` prints the shortest string that round-trips, so
/// identical runs give identical bytes.
fn metrics_row(step: usize, l: &StepLoss) -> String {
    format!("{step},{},{},{}\n", l.triplet, l.cross_entropy, l.total)
}

fn load_trainer(path: &Path) -> CliResult<Trainer> {
    Ok(load_checkpoint(path)?.into_trainer()?)
}

/// Trains from scratch or from `train.init_checkpoint` and returns the path
/// of the final checkpoint.
pub fn train(cfg: &RunConfig) -> CliResult<PathBuf> {
    let index = cfg.dataset()?;
    let model_cfg = cfg.model_for(&index);
    let mut trainer = match &cfg.train.init_checkpoint {
        Some(path) => {
            let t = load_trainer(path)?;
            if *t.model.config() != model_cfg {
                return Err(CliError::Core(metagait::Error::Checkpoint(format!(
                    "{} was saved with a different model config",
                    path.display()
                ))));
            }
            t
        }
        None => {
            let (model, store) = MetaGait::new(model_cfg)?;
            Trainer::new(model, store)
        }
    };

    let out = &cfg.output_dir;
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    create_dir(&ckpt_dir)?;
    let metrics_path = out.join(METRICS_FILE);
    let file = File::create(&metrics_path).map_err(|e| CliError::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    let io = |e| CliError::io(&metrics_path, e);
    metrics.write_all(b"step,l_tri,l_ce,l_total\n").map_err(io)?;

    let t = &cfg.train;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let mut failure = None;
    let result = trainer.fit(&index, t.batch_p, t.batch_k, t.steps, &mut rng, |tr, loss| {
        let step = tr.step;
        let res = metrics
            .write_all(metrics_row(step, loss).as_bytes())
            .and_then(|_| metrics.flush())
            .map_err(|e| CliError::io(&metrics_path, e));
        let res = res.and_then(|_| {
            if t.checkpoint_every > 0 && step % t.checkpoint_every == 0 {
                let path = ckpt_dir.join(format!("step_{step:06}.ckpt"));
                save_checkpoint(&path, &Checkpoint::from_trainer(tr))?;
            }
            Ok(())
        });
        if step % 100 == 0 {
            log::info!("step {step}: l_tri {:.4} l_ce {:.4}", loss.triplet, loss.cross_entropy);
        }
        res.map_err(|e| {
            let msg = e.to_string();
            failure = Some(e);
            metagait::Error::InvalidArgument(msg)
        })
    });
    if let Some(e) = failure {
        return Err(e);
    }
    result?;
    metrics.flush().map_err(|e| CliError::io(&metrics_path, e))?;

    let final_path = out.join(FINAL_CHECKPOINT);
    save_checkpoint(&final_path, &Checkpoint::from_trainer(&trainer))?;
    log::info!("wrote {}", final_path.display());
    Ok(final_path)
}

/// Evaluates a checkpoint on the test split and writes both report CSVs.
pub fn eval(cfg: &RunConfig) -> CliResult<EvalReport> {
    let index = cfg.dataset()?;
    let path = cfg.eval.checkpoint.clone().unwrap_or_else(|| cfg.default_checkpoint());
    let t = load_trainer(&path)?;
    let want = cfg.model_for(&index);
    if *t.model.config() != want {
        return Err(CliError::Core(metagait::Error::Checkpoint(format!(
            "{} does not match the configured model",
            path.display()
        ))));
    }
    let report = evaluate(&t.model, &t.store, &index, cfg.eval.gallery_seqs)?;
    create_dir(&cfg.output_dir)?;
    write_file(&cfg.output_dir.join(EVAL_PER_VIEW_FILE), &report.per_view_csv())?;
    write_file(&cfg.output_dir.join(EVAL_SUMMARY_FILE), &report.summary_csv())?;
    Ok(report)
}

/// Runs the finite-difference suite; fails if any entry is over tolerance.
pub fn gradcheck(cfg: &RunConfig) -> CliResult<Vec<SuiteResult>> {
    let results = run_suite(&cfg.model, &cfg.gradcheck)?;
    let mut csv = String::from("name,max_rel_error,probes,narrowed,passed\n");
    for r in &results {
        let _ = writeln!(csv, "{},{:e},{},{},{}", r.name, r.max_rel_error, r.probes, r.narrowed, r.passed());
    }
    create_dir(&cfg.output_dir)?;
    write_file(&cfg.output_dir.join(GRADCHECK_FILE), &csv)?;
    Ok(results)
}

/// Generates the configured synthetic dataset into `out`.
pub fn synth(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let gen = cfg
        .data
        .synthetic
        .as_ref()
        .ok_or_else(|| CliError::Config("synth needs data.synthetic".into()))?;
    let index = synthesize(gen)?;
    create_dir(out)?;
    export_dataset(&index, out)?;
    Ok(())
}

fn method_name(m: PoolMethod) -> &'static str {
    match m {
        PoolMethod::Mean => "mean",
        PoolMethod::Max => "max",
        PoolMethod::Gem => "gem",
    }
}

fn matrix_csv(header: &str, t: &Tensor) -> String {
    let s = t.shape();
    let cols = *s.last().unwrap_or(&1);
    let mut out = format!("row,{header},value\n");
    for (i, v) in t.data().iter().enumerate() {
        let _ = writeln!(out, "{},{},{}", i / cols, i % cols, v);
    }
    out
}

/// Writes the attention coefficients, gates and β of one test sequence;
/// returns the files written.
pub fn dump_attention(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let index = cfg.dataset()?;
    let d = &cfg.dump;
    let seq = index
        .sequences_in(Split::Test)
        .find(|s| {
            d.id.map_or(true, |v| v == s.id)
                && d.condition.map_or(true, |v| v == s.condition)
                && d.seq.map_or(true, |v| v == s.seq)
                && d.view.map_or(true, |v| v == s.view)
        })
        .ok_or_else(|| CliError::Config("no test sequence matches the dump selection".into()))?;
    log::info!(
        "dumping id {} {}-{:02} view {}",
        seq.id,
        seq.condition,
        seq.seq,
        seq.view
    );
    let path = d.checkpoint.clone().unwrap_or_else(|| cfg.default_checkpoint());
    let t = load_trainer(&path)?;
    let frames = t.model.config().frames;
    let clip = seq.clip(&seq.clip_indices(0, frames))?;

    let mut tr = Trace::new();
    let mut bind = Binding::new(&t.store);
    let x = tr.constant(clip);
    let fwd = t.model.forward_clip(&mut tr, &mut bind, x)?;

    let out = &cfg.output_dir;
    create_dir(out)?;
    let mut written = Vec::new();
    for rec in &fwd.attentions {
        let name = format!("attention_stage{}_{}.csv", rec.stage, rec.dim.name());
        let p = out.join(name);
        write_file(&p, &matrix_csv("index", tr.value(rec.attention)))?;
        written.push(p);
        if let Some(g) = rec.gate {
            let p = out.join(format!("gate_stage{}_{}.csv", rec.stage, rec.dim.name()));
            write_file(&p, &matrix_csv("stream", tr.value(g)))?;
            written.push(p);
        }
    }
    if let Some(b) = fwd.beta {
        let mut csv = String::from("method,value\n");
        for m in PoolMethod::ALL {
            let _ = writeln!(csv, "{},{}", method_name(m), tr.value(b).data()[m.index()]);
        }
        let p = out.join("beta.csv");
        write_file(&p, &csv)?;
        written.push(p);
    }
    Ok(written)
}

/// Mean rank-1 lines printed by `eval`.
pub fn eval_lines(report: &EvalReport) -> Vec<String> {
    [Condition::Nm, Condition::Bg, Condition::Cl]
        .into_iter()
        .filter_map(|c| report.mean_rank1(c).map(|r| format!("{c}: mean rank-1 {r:.2}%")))
        .collect()
}
