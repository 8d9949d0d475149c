//! Hypernetwork that generates calibration weights from input statistics.
//!
//! For an input `X (C, T, H, W)` the statistics `m (C)` are the mean over
//! `T, H, W`. A two-layer bias-free MLP with leaky ReLU after both layers
//! maps `m` to `N` values, which are split and reshaped into the weight
//! blocks of a downstream calibration network. The MLP weights are the
//! trainable part; the generated weights are different for every sample.

use rand::Rng;

use crate::autograd::{Trace, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamStore};
use crate::tensor::numel;

/// Pooled statistics `m (C)` of `x (C, T, H, W)`.
pub fn compute_statistics(tr: &mut Trace, x: Var) -> Result<Var> {
    let shape = tr.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(format!("expected (C,T,H,W), got {shape:?}")));
    }
    let m = tr.mean(x, &[1, 2, 3])?;
    tr.reshape(m, vec![shape[0]])
}

/// Shapes of the weight blocks a generator produces, in flat order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetShape(pub Vec<Vec<usize>>);

impl TargetShape {
    pub fn single(shape: Vec<usize>) -> Self {
        Self(vec![shape])
    }

    /// Total number of generated values `N`.
    pub fn numel(&self) -> usize {
        self.0.iter().map(|s| numel(s)).sum()
    }
}

/// Generated weights: the flat output and one reshaped view per block.
#[derive(Clone, Debug)]
pub struct GeneratedParams {
    pub flat: Var,
    pub views: Vec<Var>,
}

/// Meta-knowledge weights `meta1 (C x C)` and `meta2 (N x C)`.
#[derive(Clone, Debug)]
pub struct MetaHyperNet {
    prefix: String,
    channels: usize,
    target: TargetShape,
}

impl MetaHyperNet {
    /// Registers `{prefix}/meta1` and `{prefix}/meta2` in `store`.
    ///
    /// `meta1` is drawn from `U(±1/√C)` and `meta2` from `U(±0.1/√C)` so the
    /// initial generated weights are small.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        target: TargetShape,
        rng: &mut R,
    ) -> Result<Self> {
        if channels == 0 || target.0.is_empty() {
            return Err(Error::invalid("hypernetwork needs C >= 1 and a non-empty target"));
        }
        let bound = 1.0 / (channels as f64).sqrt();
        store.insert_uniform(format!("{prefix}/meta1"), vec![channels, channels], bound, rng)?;
        store.insert_uniform(
            format!("{prefix}/meta2"),
            vec![target.numel(), channels],
            0.1 * bound,
            rng,
        )?;
        Ok(Self {
            prefix: prefix.to_string(),
            channels,
            target,
        })
    }

    pub fn target(&self) -> &TargetShape {
        &self.target
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn meta1_name(&self) -> String {
        format!("{}/meta1", self.prefix)
    }

    pub fn meta2_name(&self) -> String {
        format!("{}/meta2", self.prefix)
    }

    /// `flat = δ(meta2 · δ(meta1 · m))`, split into the target blocks.
    pub fn generate(&self, tr: &mut Trace, bind: &mut Binding<'_>, m: Var) -> Result<GeneratedParams> {
        let w1 = bind.get(tr, &self.meta1_name())?;
        let w2 = bind.get(tr, &self.meta2_name())?;
        generate_parameters(tr, w1, w2, m, &self.target)
    }
}

/// Functional form of [`MetaHyperNet::generate`] on explicit weight vars.
pub fn generate_parameters(
    tr: &mut Trace,
    meta1: Var,
    meta2: Var,
    m: Var,
    target: &TargetShape,
) -> Result<GeneratedParams> {
    let n = target.numel();
    if tr.shape(meta2)[0] != n {
        return Err(Error::shape(format!(
            "meta2 produces {} values but the target needs {n}",
            tr.shape(meta2)[0]
        )));
    }
    let h = tr.dense(m, meta1)?;
    let h = tr.leaky_relu(h);
    let flat = tr.dense(h, meta2)?;
    let flat = tr.leaky_relu(flat);
    let mut views = Vec::with_capacity(target.0.len());
    let mut offset = 0;
    for shape in &target.0 {
        let len = numel(shape);
        let v = if target.0.len() == 1 {
            flat
        } else {
            tr.slice(flat, 0, offset, len)?
        };
        views.push(tr.reshape(v, shape.clone())?);
        offset += len;
    }
    Ok(GeneratedParams { flat, views })
}

/// Where a calibration network's weights come from.
#[derive(Clone, Debug)]
pub enum Calibration {
    /// Generated per sample by a hypernetwork.
    Meta(MetaHyperNet),
    /// Plain trainable tensors, one per block, named `{prefix}/w{i}`.
    Static { prefix: String, target: TargetShape },
}

impl Calibration {
    pub fn meta<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        target: TargetShape,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self::Meta(MetaHyperNet::init(store, prefix, channels, target, rng)?))
    }

    /// Registers static blocks drawn from `U(±1/√fan_in)`, where fan-in is
    /// the product of every extent but the first.
    pub fn fixed<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        target: TargetShape,
        rng: &mut R,
    ) -> Result<Self> {
        for (i, shape) in target.0.iter().enumerate() {
            let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
            let bound = 1.0 / (fan_in as f64).sqrt();
            store.insert_uniform(format!("{prefix}/w{i}"), shape.clone(), bound, rng)?;
        }
        Ok(Self::Static {
            prefix: prefix.to_string(),
            target,
        })
    }

    pub fn target(&self) -> &TargetShape {
        match self {
            Calibration::Meta(n) => n.target(),
            Calibration::Static { target, .. } => target,
        }
    }

    /// Weight blocks for one sample. `m` is only used in meta mode.
    pub fn weights(&self, tr: &mut Trace, bind: &mut Binding<'_>, m: Option<Var>) -> Result<Vec<Var>> {
        match self {
            Calibration::Meta(net) => {
                let m = m.ok_or_else(|| Error::invalid("meta calibration needs statistics"))?;
                Ok(net.generate(tr, bind, m)?.views)
            }
            Calibration::Static { prefix, target } => (0..target.0.len())
                .map(|i| bind.get(tr, &format!("{prefix}/w{i}")))
                .collect(),
        }
    }

    /// Parameter names of static blocks, in block order.
    pub fn static_names(&self) -> Vec<String> {
        match self {
            Calibration::Meta(_) => Vec::new(),
            Calibration::Static { prefix, target } => {
                (0..target.0.len()).map(|i| format!("{prefix}/w{i}")).collect()
            }
        }
    }
}
