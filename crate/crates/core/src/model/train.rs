use std::collections::BTreeMap;

use crate::autograd::{Trace, Var};
use rand::Rng;

use crate::data::{sample_batch, Batch, DatasetIndex};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamStore};
use crate::par;
use crate::tensor::Tensor;

use super::{total_loss, MetaGait, CLASSIFIER_NAME};

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    /// Zero moments for every parameter in `store`.
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: BTreeMap<String, Vec<f64>> = store
            .iter()
            .map(|(n, t)| (n.clone(), vec![0.0; t.numel()]))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update; parameters without a gradient are left alone.
    pub fn update(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name}")))?;
            let m = self
                .m
                .get_mut(name)
                .ok_or_else(|| Error::invalid(format!("no optimiser state for {name}")))?;
            let v = self.v.get_mut(name).expect("m and v share keys");
            if g.len() != p.numel() {
                return Err(Error::shape(format!("gradient size mismatch for {name}")));
            }
            for (((pi, mi), vi), &gi) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *pi -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Loss values of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub triplet: f64,
    pub cross_entropy: f64,
    pub total: f64,
}

/// Model, parameters and optimiser state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: MetaGait,
    pub store: ParamStore,
    pub adam: Adam,
    /// Completed steps.
    pub step: usize,
}

struct ClipTape {
    trace: Trace,
    vars: BTreeMap<String, Var>,
    embedding: Var,
}

impl Trainer {
    pub fn new(model: MetaGait, store: ParamStore) -> Self {
        let adam = Adam::new(&store, model.config().learning_rate);
        Self {
            model,
            store,
            adam,
            step: 0,
        }
    }

    /// Loss and parameter gradients for `batch` without updating anything.
    ///
    /// Each clip is recorded on its own trace so clips run in parallel; the
    /// loss is recorded on a small trace over the stacked embeddings and
    /// its embedding gradients seed each clip's backward pass. Per-clip
    /// gradients are summed in batch order.
    pub fn gradients(&self, batch: &Batch) -> Result<(StepLoss, BTreeMap<String, Vec<f64>>)> {
        let cfg = self.model.config();
        let n = batch.len();
        if n == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if let Some(&l) = batch.labels.iter().find(|&&l| l >= cfg.num_classes) {
            return Err(Error::invalid(format!(
                "label {l} out of range for {} classes",
                cfg.num_classes
            )));
        }
        let tapes: Vec<ClipTape> = par::map_range(n, |i| {
            let mut trace = Trace::new();
            let mut bind = Binding::new(&self.store);
            let x = trace.constant(batch.clips[i].clone());
            let out = self.model.forward_clip(&mut trace, &mut bind, x)?;
            let vars = bind.vars().clone();
            Ok(ClipTape {
                trace,
                vars,
                embedding: out.embedding,
            })
        })
        .into_iter()
        .collect::<Result<_>>()?;

        let (bins, e) = (cfg.bins, cfg.embed_dim);
        let mut stacked = vec![0.0; bins * n * e];
        for (i, tape) in tapes.iter().enumerate() {
            let v = tape.trace.value(tape.embedding).data();
            for b in 0..bins {
                stacked[(b * n + i) * e..(b * n + i + 1) * e].copy_from_slice(&v[b * e..(b + 1) * e]);
            }
        }
        let mut tr = Trace::new();
        let emb = tr.leaf(Tensor::new(vec![bins, n, e], stacked)?);
        let cls_t = self
            .store
            .get(CLASSIFIER_NAME)
            .ok_or_else(|| Error::invalid("missing classifier"))?;
        let cls = tr.leaf(cls_t.clone());
        let loss = total_loss(&mut tr, emb, cls, &batch.labels, cfg.margin)?;
        let values = StepLoss {
            triplet: tr.value(loss.triplet).item(),
            cross_entropy: tr.value(loss.cross_entropy).item(),
            total: tr.value(loss.total).item(),
        };
        if !values.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step + 1,
                l_tri: values.triplet,
                l_ce: values.cross_entropy,
            });
        }
        let g = tr.backward(loss.total)?;
        let demb = g.data(emb).map(|d| d.to_vec()).unwrap_or_else(|| vec![0.0; bins * n * e]);

        let per_clip: Vec<BTreeMap<String, Vec<f64>>> = par::map_range(n, |i| {
            let tape = &tapes[i];
            let mut seed = vec![0.0; bins * e];
            for b in 0..bins {
                seed[b * e..(b + 1) * e].copy_from_slice(&demb[(b * n + i) * e..(b * n + i + 1) * e]);
            }
            let seed = Tensor::new(vec![bins, 1, e], seed)?;
            let grads = tape.trace.backward_from(tape.embedding, &seed)?;
            let mut out = BTreeMap::new();
            for (name, &v) in &tape.vars {
                if let Some(d) = grads.data(v) {
                    out.insert(name.clone(), d.to_vec());
                }
            }
            Ok(out)
        })
        .into_iter()
        .collect::<Result<_>>()?;

        let mut total: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for clip in per_clip {
            for (name, d) in clip {
                match total.get_mut(&name) {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                    None => {
                        total.insert(name, d);
                    }
                }
            }
        }
        if let Some(d) = g.data(cls) {
            total.insert(CLASSIFIER_NAME.to_string(), d.to_vec());
        }
        Ok((values, total))
    }

    /// Runs `steps` updates on P×K batches of the training split drawn with
    /// `rng`, calling `on_step(self, loss)` after each.
    pub fn fit<R, F>(
        &mut self,
        index: &DatasetIndex,
        p: usize,
        k: usize,
        steps: usize,
        rng: &mut R,
        mut on_step: F,
    ) -> Result<()>
    where
        R: Rng + ?Sized,
        F: FnMut(&Trainer, &StepLoss) -> Result<()>,
    {
        let t = self.model.config().frames;
        for _ in 0..steps {
            let batch = sample_batch(index, p, k, t, rng)?;
            let loss = self.train_step(&batch)?;
            on_step(self, &loss)?;
        }
        Ok(())
    }

    /// One forward/backward/update cycle.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepLoss> {
        let (loss, grads) = self.gradients(batch)?;
        self.adam.update(&mut self.store, &grads)?;
        self.model.mtp().clamp_p(&mut self.store)?;
        self.step += 1;
        Ok(loss)
    }
}
