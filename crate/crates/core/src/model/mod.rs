//! Full recognition network: conv backbone with attention after each
//! stage, temporal pooling, horizontal parts, separate embeddings and
//! per-part classifiers.

mod checkpoint;
mod config;
mod heads;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use heads::{horizontal_pool, separate_fc, total_loss, LossVars};
pub use train::{Adam, StepLoss, Trainer};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ReduceKind, Trace, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::mta::{AttentionDim, MtaBlock, MtaSpec};
use crate::mtp::MtpHead;
use crate::params::{Binding, ParamStore};
use crate::par;
use crate::tensor::Tensor;

pub const FC_NAME: &str = "fc";
pub const CLASSIFIER_NAME: &str = "classifier";

#[derive(Clone, Debug)]
struct Stage {
    conv: String,
    blocks: Vec<MtaBlock>,
    downsample: bool,
}

/// Attention coefficients of one block for one clip.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    /// 1-based stage.
    pub stage: usize,
    pub dim: AttentionDim,
    /// `(B, E)` attention in the block's calibration view.
    pub attention: Var,
    pub gate: Option<Var>,
}

/// Vars produced by one clip forward.
#[derive(Clone, Debug)]
pub struct ClipForward {
    /// `(bins, 1, E)` part embeddings.
    pub embedding: Var,
    pub attentions: Vec<AttentionRecord>,
    /// `(3)` temporal pooling weights, when enabled.
    pub beta: Option<Var>,
}

/// Network structure; trainable values live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct MetaGait {
    config: ModelConfig,
    stages: Vec<Stage>,
    mtp: MtpHead,
}

impl MetaGait {
    /// Builds the network and a freshly initialised parameter store,
    /// deterministically from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let mut stages = Vec::with_capacity(3);
        let mut cin = 1;
        for s in 0..3 {
            let cout = config.stage_channels[s];
            let conv = format!("stage{}/conv", s + 1);
            let fan_in = (cin * 9) as f64;
            store.insert_uniform(conv.clone(), vec![cout, cin, 3, 3], (6.0 / fan_in).sqrt(), &mut rng)?;
            let [h, w] = config.stage_resolution(s);
            let shape = [cout, config.frames, h, w];
            let mut blocks = Vec::new();
            if config.has_attention(s) {
                for &dim in &config.mta_dims {
                    let spec = MtaSpec {
                        dim,
                        ratio: config.ratio,
                        kernels: config.kernels.clone(),
                        mode: config.mta_mode,
                        gate: config.gate,
                        global_pool: 1 << (2 - s),
                    };
                    let prefix = format!("stage{}/{}", s + 1, dim.name());
                    blocks.push(MtaBlock::new(&mut store, &prefix, spec, shape, &mut rng)?);
                }
            }
            stages.push(Stage {
                conv,
                blocks,
                downsample: s < 2,
            });
            cin = cout;
        }
        let c3 = config.stage_channels[2];
        let mtp = MtpHead::new(
            &mut store,
            "mtp",
            &config.pooling,
            config.pool_weighting,
            c3,
            config.frames,
            &mut rng,
        )?;
        let (bins, e) = (config.bins, config.embed_dim);
        store.insert_uniform(FC_NAME, vec![bins, e, c3], (6.0 / c3 as f64).sqrt(), &mut rng)?;
        store.insert_uniform(
            CLASSIFIER_NAME,
            vec![bins, config.num_classes, e],
            1.0 / (e as f64).sqrt(),
            &mut rng,
        )?;
        Ok((
            Self {
                config,
                stages,
                mtp,
            },
            store,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mtp(&self) -> &MtpHead {
        &self.mtp
    }

    /// Attention blocks in forward order, with their 1-based stage.
    pub fn blocks(&self) -> impl Iterator<Item = (usize, &MtaBlock)> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(s, st)| st.blocks.iter().map(move |b| (s + 1, b)))
    }

    /// Expected clip shape `(1, T, H, W)`.
    pub fn clip_shape(&self) -> [usize; 4] {
        let [h, w] = self.config.resolution;
        [1, self.config.frames, h, w]
    }

    /// Length of the flattened per-clip embedding used for retrieval.
    pub fn embedding_len(&self) -> usize {
        self.config.bins * self.config.embed_dim
    }

    /// Conv stages with attention; `(1, T, H, W)` to `(C₃, T, H/4, W/4)`.
    pub fn backbone(
        &self,
        tr: &mut Trace,
        bind: &mut Binding<'_>,
        clip: Var,
        records: &mut Vec<AttentionRecord>,
    ) -> Result<Var> {
        if tr.shape(clip) != self.clip_shape() {
            return Err(Error::shape(format!(
                "clip must be {:?}, got {:?}",
                self.clip_shape(),
                tr.shape(clip)
            )));
        }
        let mut x = clip;
        for (s, stage) in self.stages.iter().enumerate() {
            let k = bind.get(tr, &stage.conv)?;
            x = tr.conv(x, k, 2)?;
            x = tr.leaky_relu(x);
            for block in &stage.blocks {
                let o = block.forward(tr, bind, x)?;
                records.push(AttentionRecord {
                    stage: s + 1,
                    dim: block.dim(),
                    attention: o.attention,
                    gate: o.gate,
                });
                x = o.out;
            }
            if stage.downsample {
                x = max_pool2(tr, x)?;
            }
        }
        Ok(x)
    }

    /// Runs one clip through the whole network up to the part embeddings.
    pub fn forward_clip(&self, tr: &mut Trace, bind: &mut Binding<'_>, clip: Var) -> Result<ClipForward> {
        let mut attentions = Vec::new();
        let f = self.backbone(tr, bind, clip, &mut attentions)?;
        let pooled = self.mtp.forward(tr, bind, f)?;
        let parts = horizontal_pool(tr, pooled.out, self.config.bins)?;
        let fc = bind.get(tr, FC_NAME)?;
        let embedding = separate_fc(tr, parts, fc)?;
        Ok(ClipForward {
            embedding,
            attentions,
            beta: pooled.beta,
        })
    }

    /// Flattened `bins · E` embedding of one clip.
    pub fn embed(&self, store: &ParamStore, clip: &Tensor) -> Result<Vec<f64>> {
        let mut tr = Trace::new();
        let mut bind = Binding::new(store);
        let x = tr.constant(clip.clone());
        let out = self.forward_clip(&mut tr, &mut bind, x)?;
        Ok(tr.value(out.embedding).data().to_vec())
    }

    /// Embeds many clips, fanning out across threads when enabled.
    pub fn embed_all(&self, store: &ParamStore, clips: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        par::map_range(clips.len(), |i| self.embed(store, &clips[i]))
            .into_iter()
            .collect()
    }

    /// Whole-batch loss recorded on a single trace.
    pub fn batch_loss(&self, tr: &mut Trace, bind: &mut Binding<'_>, batch: &Batch) -> Result<LossVars> {
        let mut embs = Vec::with_capacity(batch.len());
        for clip in &batch.clips {
            let x = tr.constant(clip.clone());
            embs.push(self.forward_clip(tr, bind, x)?.embedding);
        }
        let stacked = concat_batch(tr, &embs)?;
        let cls = bind.get(tr, CLASSIFIER_NAME)?;
        total_loss(tr, stacked, cls, &batch.labels, self.config.margin)
    }
}

/// 2x2 spatial max pooling of `(C, T, H, W)`.
pub fn max_pool2(tr: &mut Trace, x: Var) -> Result<Var> {
    let s = tr.shape(x).to_vec();
    let (c, t, h, w) = (s[0], s[1], s[2], s[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("cannot halve {h}x{w}")));
    }
    let blocks = tr.reshape(x, vec![c, t, h / 2, 2, w / 2, 2])?;
    let m = tr.reduce(blocks, ReduceKind::Max, &[3, 5])?;
    tr.reshape(m, vec![c, t, h / 2, w / 2])
}

/// Joins `(bins, 1, E)` embeddings along the batch axis by summing
/// one-hot placements; used only where a single trace holds the batch.
fn concat_batch(tr: &mut Trace, embs: &[Var]) -> Result<Var> {
    let n = embs.len();
    let mut acc: Option<Var> = None;
    for (i, &e) in embs.iter().enumerate() {
        let mut onehot = vec![0.0; n];
        onehot[i] = 1.0;
        let sel = tr.constant(Tensor::new(vec![1, n, 1], onehot)?);
        let placed = tr.mul(e, sel)?;
        acc = Some(match acc {
            Some(a) => tr.add(a, placed)?,
            None => placed,
        });
    }
    acc.ok_or_else(|| Error::invalid("empty batch"))
}

#[cfg(test)]
mod tests;
