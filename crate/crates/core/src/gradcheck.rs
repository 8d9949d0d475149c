//! Finite-difference suite over every op and every composite block.
//!
//! Composite blocks are checked at well-conditioned points: non-negative
//! inputs and non-negative backbone and hypernetwork weights keep the leaky
//! units on their unit-slope side and the attention logits away from
//! saturation, so true gradients stay above the finite-difference noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{grad_check_sampled, GradCheckReport, Trace, Var};
use crate::data::Batch;
use crate::error::Result;
use crate::mhn::{compute_statistics, generate_parameters, TargetShape};
use crate::model::{MetaGait, ModelConfig, FC_NAME};
use crate::mta::{AttentionDim, CalibrationMode, MtaBlock, MtaSpec};
use crate::mtp::{MtpHead, PoolMethod, Weighting};
use crate::params::{Binding, ParamStore};
use crate::tensor::Tensor;

/// Max relative error a check may reach and still pass.
pub const TOLERANCE: f64 = 1e-4;

/// Input extents `(C, T, H, W)` of the attention block checks.
pub const MTA_SHAPE: [usize; 4] = [4, 6, 8, 6];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    /// Step for ops and blocks.
    pub eps: f64,
    /// Step for the full model, whose loss sums many more terms.
    pub model_eps: f64,
    /// Probed entries per parameter tensor of the blocks and the model.
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            model_eps: 1e-3,
            max_entries: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub max_rel_error: f64,
    pub probes: usize,
    pub narrowed: usize,
}

impl SuiteResult {
    fn new(name: impl Into<String>, r: &GradCheckReport) -> Self {
        Self {
            name: name.into(),
            max_rel_error: r.max_rel_error,
            probes: r.probes,
            narrowed: r.narrowed,
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

type Program = fn(&mut Trace, &[Var]) -> Result<Var>;

fn op_programs() -> Vec<(&'static str, Vec<Vec<usize>>, Program)> {
    vec![
        ("conv1d", vec![vec![2, 3, 7], vec![2, 2, 5]], |tr, p| tr.conv(p[0], p[1], 1)),
        ("conv2d", vec![vec![2, 2, 4, 5], vec![3, 2, 3, 3]], |tr, p| tr.conv(p[0], p[1], 2)),
        ("batched_linear", vec![vec![2, 3, 4], vec![2, 5, 4]], |tr, p| tr.batched_linear(p[0], p[1])),
        ("linear", vec![vec![3, 4], vec![5, 4]], |tr, p| tr.linear(p[0], p[1])),
        ("dense", vec![vec![4], vec![3, 4]], |tr, p| tr.dense(p[0], p[1])),
        ("leaky_relu", vec![vec![3, 4]], |tr, p| Ok(tr.leaky_relu(p[0]))),
        ("sigmoid", vec![vec![3, 4]], |tr, p| Ok(tr.sigmoid(p[0]))),
        ("mean", vec![vec![2, 3, 4]], |tr, p| tr.mean(p[0], &[0, 2])),
        ("max", vec![vec![2, 3, 4]], |tr, p| tr.max(p[0], &[1, 2])),
        ("sum", vec![vec![2, 3]], |tr, p| tr.sum_all(p[0])),
        ("add", vec![vec![3, 1, 4], vec![1, 2, 4]], |tr, p| tr.add(p[0], p[1])),
        ("mul", vec![vec![3, 2, 1], vec![3, 1, 4]], |tr, p| tr.mul(p[0], p[1])),
        ("scale", vec![vec![2, 3]], |tr, p| Ok(tr.scale(p[0], -1.5))),
        ("reshape", vec![vec![2, 6]], |tr, p| tr.reshape(p[0], vec![3, 4])),
        ("permute", vec![vec![2, 3, 4]], |tr, p| tr.permute(p[0], &[1, 2, 0])),
        ("slice", vec![vec![2, 5, 3]], |tr, p| tr.slice(p[0], 1, 1, 3)),
        ("triplet", vec![vec![2, 6, 3]], |tr, p| tr.triplet_loss(p[0], &[0, 0, 1, 1, 2, 2], 0.5)),
        ("cross_entropy", vec![vec![2, 4, 3]], |tr, p| tr.cross_entropy(p[0], &[0, 2, 1, 2])),
    ]
}

/// Scalarizes `y` against fixed weights so no gradient cancels.
fn project(tr: &mut Trace, y: Var, w: &Tensor) -> Result<Var> {
    let w = tr.constant(w.clone());
    let p = tr.mul(y, w)?;
    tr.sum_all(p)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    Tensor::uniform(shape.to_vec(), lo, hi, rng)
}

/// Re-draws conv kernels from `U(0, 3 / fan_in)`, which lifts activations
/// by about 1.5 per conv, and hypernetwork weights from `U(0, b)` with `b`
/// their current max magnitude.
fn condition(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
    let names: Vec<String> = store.names().cloned().collect();
    for n in names {
        let t = store.get(&n).expect("listed");
        let bound = if n.ends_with("/conv") {
            3.0 * t.shape()[0] as f64 / t.numel() as f64
        } else if n.ends_with("/meta1") || n.ends_with("/meta2") {
            t.data().iter().fold(1e-3f64, |m, v| m.max(v.abs()))
        } else {
            continue;
        };
        let u = uniform(t.shape(), 0.0, bound, rng)?;
        store.set(&n, u)?;
    }
    Ok(())
}

/// Checks every op on random inputs in `[-2, 2]`, probing every entry.
pub fn check_ops(eps: f64, rng: &mut ChaCha8Rng) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    for (name, shapes, prog) in op_programs() {
        let params = shapes
            .iter()
            .map(|s| uniform(s, -2.0, 2.0, rng))
            .collect::<Result<Vec<_>>>()?;
        let mut probe = Trace::new();
        let vars: Vec<Var> = params.iter().map(|p| probe.constant(p.clone())).collect();
        let y = prog(&mut probe, &vars)?;
        let w = uniform(probe.shape(y), -1.0, 1.0, rng)?;
        let r = grad_check_sampled(
            |tr, p| {
                let y = prog(tr, p)?;
                project(tr, y, &w)
            },
            &params,
            eps,
            usize::MAX,
        )?;
        out.push(SuiteResult::new(format!("op/{name}"), &r));
    }

    let x = uniform(&[2, 4, 3], 0.1, 2.0, rng)?;
    let w = uniform(&[2, 1, 3], -1.0, 1.0, rng)?;
    let r = grad_check_sampled(
        |tr, p| {
            let y = tr.gem(p[0], p[1], 1, 1e-6)?;
            project(tr, y, &w)
        },
        &[x, Tensor::scalar(2.7)],
        eps,
        usize::MAX,
    )?;
    out.push(SuiteResult::new("op/gem", &r));
    Ok(out)
}

/// Statistics, generation and a sigmoid-activated downstream use of the
/// generated weights.
pub fn check_mhn(eps: f64, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let params = vec![
        uniform(&[3, 2, 2, 2], -2.0, 2.0, rng)?,
        uniform(&[3, 3], -1.0, 1.0, rng)?,
        uniform(&[6, 3], -1.0, 1.0, rng)?,
        uniform(&[3], -2.0, 2.0, rng)?,
    ];
    let target = TargetShape::single(vec![2, 3]);
    grad_check_sampled(
        |tr, p| {
            let m = compute_statistics(tr, p[0])?;
            let g = generate_parameters(tr, p[1], p[2], m, &target)?;
            let y = tr.dense(p[3], g.views[0])?;
            let y = tr.sigmoid(y);
            tr.sum_all(y)
        },
        &params,
        eps,
        usize::MAX,
    )
}

/// Program over `[extra.., every store tensor]` in store order.
fn with_store<'a, F>(
    store: &'a ParamStore,
    extra: usize,
    body: F,
) -> impl Fn(&mut Trace, &[Var]) -> Result<Var> + 'a
where
    F: Fn(&mut Trace, &mut Binding<'a>, &[Var]) -> Result<Var> + 'a,
{
    let names: Vec<String> = store.names().cloned().collect();
    move |tr: &mut Trace, p: &[Var]| {
        let mut bind = Binding::preset(store, names.iter().cloned().zip(p[extra..].iter().copied()));
        body(tr, &mut bind, &p[..extra])
    }
}

fn store_values(store: &ParamStore) -> Vec<Tensor> {
    store.iter().map(|(_, t)| t.clone()).collect()
}

/// One meta-calibrated attention block with gate and kernels `{1, 3, 5}`
/// on a `MTA_SHAPE` input, with respect to the input and every weight.
pub fn check_mta(
    dim: AttentionDim,
    eps: f64,
    max_entries: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let spec = MtaSpec {
        dim,
        ratio: 2,
        kernels: vec![1, 3, 5],
        mode: CalibrationMode::Meta,
        gate: true,
        global_pool: 2,
    };
    let block = MtaBlock::new(&mut store, "mta", spec, MTA_SHAPE, rng)?;
    condition(&mut store, rng)?;
    let x = uniform(&MTA_SHAPE, 0.0, 2.0, rng)?;
    let w = uniform(&MTA_SHAPE, -2.0, 2.0, rng)?;
    let mut values = vec![x];
    values.extend(store_values(&store));
    let program = with_store(&store, 1, |tr, bind, x| {
        let y = block.forward(tr, bind, x[0])?.out;
        project(tr, y, &w)
    });
    grad_check_sampled(program, &values, eps, max_entries)
}

/// Meta-weighted temporal pooling over mean, max and GeM, including the
/// GeM exponent.
pub fn check_mtp(eps: f64, max_entries: usize, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let head = MtpHead::new(&mut store, "mtp", &PoolMethod::ALL, Weighting::Meta, 4, 5, rng)?;
    condition(&mut store, rng)?;
    store.set("mtp/gem_p", Tensor::scalar(2.5))?;
    let x = uniform(&[4, 5, 3, 2], 0.2, 2.0, rng)?;
    let w = uniform(&[4, 1, 3, 2], -1.0, 1.0, rng)?;
    let mut values = vec![x];
    values.extend(store_values(&store));
    let program = with_store(&store, 1, |tr, bind, x| {
        let y = head.forward(tr, bind, x[0])?.out;
        project(tr, y, &w)
    });
    grad_check_sampled(program, &values, eps, max_entries)
}

/// Total loss of `config` (with two classes) on a batch of two identities
/// with two random clips each, with respect to every model parameter.
pub fn check_model(
    config: &ModelConfig,
    eps: f64,
    max_entries: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport> {
    let (model, mut store) = MetaGait::new(ModelConfig {
        num_classes: 2,
        ..config.clone()
    })?;
    condition(&mut store, rng)?;
    let fc = store.get(FC_NAME).expect("registered").shape().to_vec();
    store.set(FC_NAME, uniform(&fc, -4.0, 4.0, rng)?)?;
    let shape = model.clip_shape();
    let clips = (0..4)
        .map(|_| uniform(&shape, 0.0, 1.0, rng))
        .collect::<Result<Vec<_>>>()?;
    let batch = Batch {
        clips,
        labels: vec![0, 0, 1, 1],
    };
    let values = store_values(&store);
    let program = with_store(&store, 0, |tr, bind, _| Ok(model.batch_loss(tr, bind, &batch)?.total));
    grad_check_sampled(program, &values, eps, max_entries)
}

/// Runs every check and returns one entry per op or block.
pub fn run_suite(model: &ModelConfig, cfg: &SuiteConfig) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = check_ops(cfg.eps, &mut rng)?;
    out.push(SuiteResult::new("mhn", &check_mhn(cfg.eps, &mut rng)?));
    for dim in [AttentionDim::Spatial, AttentionDim::Channel, AttentionDim::Temporal] {
        let r = check_mta(dim, cfg.eps, cfg.max_entries, &mut rng)?;
        out.push(SuiteResult::new(format!("mta/{}", dim.name()), &r));
    }
    out.push(SuiteResult::new("mtp", &check_mtp(cfg.eps, cfg.max_entries, &mut rng)?));
    let r = check_model(model, cfg.model_eps, cfg.max_entries, &mut rng)?;
    out.push(SuiteResult::new("model", &r));
    for r in &out {
        log::info!(
            "gradcheck {}: {:.3e} over {} probes ({} narrowed)",
            r.name,
            r.max_rel_error,
            r.probes,
            r.narrowed
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_the_tiny_config() {
        let results = run_suite(&ModelConfig::tiny(), &SuiteConfig::default()).unwrap();
        assert_eq!(results.len(), 19 + 1 + 3 + 1 + 1);
        for r in &results {
            assert!(r.passed(), "{r:?}");
            assert!(r.probes > 0);
        }
    }

    #[test]
    fn same_seed_same_report() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            check_mtp(1e-5, 2, &mut rng).unwrap().max_rel_error
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
