//! Triple attention with omni-scale calibration.
//!
//! One block code path serves the spatial, channel and temporal dimensions.
//! Only [`dimension_select`] differs: it turns `X (C, T, H, W)` into a stack
//! of statistics rows `(B, E)` for the calibrated axis and knows how to
//! broadcast the resulting attention back onto `X`.
//!
//! | dim      | rows `B` | extent `E` | local conv            |
//! |----------|----------|------------|-----------------------|
//! | channel  | `T`      | `C`        | 1-D over channels     |
//! | temporal | `1`      | `T`        | 1-D over time         |
//! | spatial  | `T`      | `H·W`      | 2-D over `H × W`      |
//!
//! The attention is `σ(g[L]·f_global + Σ_l g[l]·f_local[l])`, where the
//! gate `g` and every calibration weight may be generated per sample.
//!
//! The spatial global stream and gate read the channel-mean map average
//! pooled by `global_pool` in both spatial directions, so their weight
//! count does not grow with the square of the input resolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Trace, Var};
use crate::error::{Error, Result};
use crate::mhn::{compute_statistics, Calibration, TargetShape};
use crate::params::{Binding, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionDim {
    Spatial,
    Channel,
    Temporal,
}

impl AttentionDim {
    pub fn name(self) -> &'static str {
        match self {
            AttentionDim::Spatial => "spatial",
            AttentionDim::Channel => "channel",
            AttentionDim::Temporal => "temporal",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationMode {
    #[default]
    Meta,
    Static,
}

/// Construction parameters of one block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MtaSpec {
    pub dim: AttentionDim,
    pub ratio: usize,
    pub kernels: Vec<usize>,
    pub mode: CalibrationMode,
    pub gate: bool,
    /// Spatial-view pooling factor for the global stream and gate; ignored
    /// by the other dims.
    pub global_pool: usize,
}

/// Statistics rows for one dimension plus what is needed to undo the view.
#[derive(Clone, Debug)]
pub struct CalibrationView {
    pub dim: AttentionDim,
    /// `(B, E)` per-row statistics fed to the local streams.
    pub stats: Var,
    /// `(B, E_g)` input of the global stream and gate.
    pub global_input: Var,
    x_shape: [usize; 4],
    pool: usize,
}

/// Sizes of the view a block calibrates, without touching a trace.
fn view_extents(dim: AttentionDim, shape: [usize; 4], pool: usize) -> (usize, usize, usize) {
    let [c, t, h, w] = shape;
    match dim {
        AttentionDim::Channel => (t, c, c),
        AttentionDim::Temporal => (1, t, t),
        AttentionDim::Spatial => (t, h * w, (h / pool) * (w / pool)),
    }
}

/// Builds the calibration view of `x (C, T, H, W)` for `dim`.
pub fn dimension_select(tr: &mut Trace, x: Var, dim: AttentionDim, pool: usize) -> Result<CalibrationView> {
    let s = tr.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::shape(format!("attention expects (C,T,H,W), got {s:?}")));
    }
    let [c, t, h, w] = [s[0], s[1], s[2], s[3]];
    let (stats, global_input) = match dim {
        AttentionDim::Channel => {
            let m = tr.mean(x, &[2, 3])?;
            let m = tr.reshape(m, vec![c, t])?;
            let rows = tr.permute(m, &[1, 0])?;
            (rows, rows)
        }
        AttentionDim::Temporal => {
            let m = tr.mean(x, &[0, 2, 3])?;
            let rows = tr.reshape(m, vec![1, t])?;
            (rows, rows)
        }
        AttentionDim::Spatial => {
            if pool == 0 || h % pool != 0 || w % pool != 0 {
                return Err(Error::shape(format!(
                    "spatial pooling factor {pool} must divide {h}x{w}"
                )));
            }
            let m = tr.mean(x, &[0])?;
            let rows = tr.reshape(m, vec![t, h * w])?;
            let g = if pool == 1 {
                rows
            } else {
                let blocks = tr.reshape(m, vec![t, h / pool, pool, w / pool, pool])?;
                let pooled = tr.mean(blocks, &[2, 4])?;
                tr.reshape(pooled, vec![t, (h / pool) * (w / pool)])?
            };
            (rows, g)
        }
    };
    Ok(CalibrationView {
        dim,
        stats,
        global_input,
        x_shape: [c, t, h, w],
        pool,
    })
}

impl CalibrationView {
    pub fn rows(&self) -> usize {
        view_extents(self.dim, self.x_shape, self.pool).0
    }

    /// Maps a `(B, E_g)` global-stream output onto `(B, E)`.
    pub fn expand_global(&self, tr: &mut Trace, f: Var) -> Result<Var> {
        if self.dim != AttentionDim::Spatial || self.pool == 1 {
            return Ok(f);
        }
        let [_, t, h, w] = self.x_shape;
        let p = self.pool;
        let f = tr.reshape(f, vec![t, h / p, 1, w / p, 1])?;
        let ones = tr.constant(Tensor::ones(vec![t, h / p, p, w / p, p])?);
        let up = tr.mul(f, ones)?;
        tr.reshape(up, vec![t, h * w])
    }

    /// Reshapes `(B, E)` attention so it broadcasts against `X`.
    pub fn inverse(&self, tr: &mut Trace, att: Var) -> Result<Var> {
        let [c, t, h, w] = self.x_shape;
        match self.dim {
            AttentionDim::Channel => {
                let a = tr.permute(att, &[1, 0])?;
                tr.reshape(a, vec![c, t, 1, 1])
            }
            AttentionDim::Temporal => tr.reshape(att, vec![1, t, 1, 1]),
            AttentionDim::Spatial => tr.reshape(att, vec![1, t, h, w]),
        }
    }

    /// Same-extent convolution of every statistics row.
    pub fn local_stream(&self, tr: &mut Trace, kernel: Var) -> Result<Var> {
        let stats_shape = tr.shape(self.stats).to_vec();
        let [_, t, h, w] = self.x_shape;
        let y = match self.dim {
            AttentionDim::Spatial => {
                let s = tr.reshape(self.stats, vec![1, t, h, w])?;
                tr.conv(s, kernel, 2)?
            }
            _ => {
                let s = tr.reshape(self.stats, vec![1, stats_shape[0], stats_shape[1]])?;
                tr.conv(s, kernel, 1)?
            }
        };
        tr.reshape(y, stats_shape)
    }
}

/// Bottleneck stream `W2 · δ(W1 · s)` applied to every row of `s (B, E)`.
pub fn global_stream(tr: &mut Trace, s: Var, w1: Var, w2: Var) -> Result<Var> {
    let h = tr.linear(s, w1)?;
    let h = tr.leaky_relu(h);
    tr.linear(h, w2)
}

/// Row-wise conv of `s (B, E)` with a `(1, 1, k)` kernel.
pub fn local_stream(tr: &mut Trace, s: Var, kernel: Var) -> Result<Var> {
    let shape = tr.shape(s).to_vec();
    let x = tr.reshape(s, vec![1, shape[0], shape[1]])?;
    let y = tr.conv(x, kernel, 1)?;
    tr.reshape(y, shape)
}

/// Soft gate `σ(W · s)` giving one weight per stream and row, `(B, L+1)`.
pub fn aggregation_gate(tr: &mut Trace, s: Var, w: Var) -> Result<Var> {
    let z = tr.linear(s, w)?;
    Ok(tr.sigmoid(z))
}

/// Vars produced by one block forward.
#[derive(Clone, Debug)]
pub struct MtaOutput {
    pub out: Var,
    /// `(B, E)` attention coefficients in the calibration view.
    pub attention: Var,
    /// `(B, L+1)` gate weights; the last column weights the global stream.
    pub gate: Option<Var>,
    pub view: CalibrationView,
    pub global: Var,
    pub locals: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct MtaBlock {
    spec: MtaSpec,
    input_shape: [usize; 4],
    global: Calibration,
    locals: Vec<Calibration>,
    gate: Option<Calibration>,
}

impl MtaBlock {
    /// Registers the block's weights under `prefix` for inputs of
    /// `input_shape = (C, T, H, W)`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        spec: MtaSpec,
        input_shape: [usize; 4],
        rng: &mut R,
    ) -> Result<Self> {
        if spec.kernels.is_empty() {
            return Err(Error::Config("attention needs at least one local kernel".into()));
        }
        if let Some(k) = spec.kernels.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::Config(format!("local kernel sizes must be odd, got {k}")));
        }
        let pool = if spec.dim == AttentionDim::Spatial {
            spec.global_pool
        } else {
            1
        };
        if spec.dim == AttentionDim::Spatial
            && (pool == 0 || input_shape[2] % pool != 0 || input_shape[3] % pool != 0)
        {
            return Err(Error::Config(format!(
                "spatial pooling factor {pool} must divide {}x{}",
                input_shape[2], input_shape[3]
            )));
        }
        let (_, _, eg) = view_extents(spec.dim, input_shape, pool);
        if spec.ratio == 0 || eg % spec.ratio != 0 {
            return Err(Error::Config(format!(
                "reduction ratio {} must divide the calibrated extent {eg} ({})",
                spec.ratio,
                spec.dim.name()
            )));
        }
        let c = input_shape[0];
        let make = |store: &mut ParamStore, name: &str, target: TargetShape, rng: &mut R| {
            let p = format!("{prefix}/{name}");
            match spec.mode {
                CalibrationMode::Meta => Calibration::meta(store, &p, c, target, rng),
                CalibrationMode::Static => Calibration::fixed(store, &p, target, rng),
            }
        };
        let hidden = eg / spec.ratio;
        let global = make(store, "global", TargetShape(vec![vec![hidden, eg], vec![eg, hidden]]), rng)?;
        let mut locals = Vec::with_capacity(spec.kernels.len());
        for &k in &spec.kernels {
            let shape = match spec.dim {
                AttentionDim::Spatial => vec![1, 1, k, k],
                _ => vec![1, 1, k],
            };
            locals.push(make(store, &format!("local_k{k}"), TargetShape::single(shape), rng)?);
        }
        let gate = if spec.gate {
            let l1 = spec.kernels.len() + 1;
            Some(make(store, "gate", TargetShape::single(vec![l1, eg]), rng)?)
        } else {
            None
        };
        Ok(Self {
            spec: MtaSpec {
                global_pool: pool,
                ..spec
            },
            input_shape,
            global,
            locals,
            gate,
        })
    }

    pub fn spec(&self) -> &MtaSpec {
        &self.spec
    }

    pub fn dim(&self) -> AttentionDim {
        self.spec.dim
    }

    pub fn input_shape(&self) -> [usize; 4] {
        self.input_shape
    }

    /// Calibrations in the order global, locals, gate.
    pub fn calibrations(&self) -> impl Iterator<Item = &Calibration> {
        std::iter::once(&self.global)
            .chain(self.locals.iter())
            .chain(self.gate.iter())
    }

    /// `σ(g[L]·f_global + Σ_l g[l]·f_local[l]) ⊗ X`.
    pub fn forward(&self, tr: &mut Trace, bind: &mut Binding<'_>, x: Var) -> Result<MtaOutput> {
        let xs = tr.shape(x);
        if xs != self.input_shape {
            return Err(Error::shape(format!(
                "block built for {:?}, got {xs:?}",
                self.input_shape
            )));
        }
        let m = match self.spec.mode {
            CalibrationMode::Meta => Some(compute_statistics(tr, x)?),
            CalibrationMode::Static => None,
        };
        let view = dimension_select(tr, x, self.spec.dim, self.spec.global_pool)?;

        let gw = self.global.weights(tr, bind, m)?;
        let fg = global_stream(tr, view.global_input, gw[0], gw[1])?;
        let fg = view.expand_global(tr, fg)?;

        let mut locals = Vec::with_capacity(self.locals.len());
        for cal in &self.locals {
            let k = cal.weights(tr, bind, m)?;
            locals.push(view.local_stream(tr, k[0])?);
        }

        let n = locals.len();
        let gate = match &self.gate {
            Some(cal) => {
                let w = cal.weights(tr, bind, m)?;
                Some(aggregation_gate(tr, view.global_input, w[0])?)
            }
            None => None,
        };

        let mut z = match gate {
            Some(g) => {
                let gl = tr.slice(g, 1, n, 1)?;
                tr.mul(gl, fg)?
            }
            None => fg,
        };
        for (l, &f) in locals.iter().enumerate() {
            let term = match gate {
                Some(g) => {
                    let gl = tr.slice(g, 1, l, 1)?;
                    tr.mul(gl, f)?
                }
                None => f,
            };
            z = tr.add(z, term)?;
        }
        let attention = tr.sigmoid(z);
        let a = view.inverse(tr, attention)?;
        let out = tr.mul(x, a)?;
        Ok(MtaOutput {
            out,
            attention,
            gate,
            view,
            global: fg,
            locals,
        })
    }
}
