use std::fs;
use std::path::{Path, PathBuf};

use metagait::data::{load_dataset, synthesize, Condition, DatasetIndex, GenConfig, Split};
use metagait::gradcheck::SuiteConfig;
use metagait::model::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// One JSON document configuring every command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    pub data: DataConfig,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub gradcheck: SuiteConfig,
    #[serde(default)]
    pub dump: DumpConfig,
}

/// Either a directory of silhouette frames or a generator config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub synthetic: Option<GenConfig>,
    /// Identities in the training split when reading `root`; defaults to
    /// two thirds.
    pub train_ids: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Identities per batch.
    pub batch_p: usize,
    /// Sequences per identity.
    pub batch_k: usize,
    /// Save a checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Resume parameters and optimizer state from this checkpoint.
    pub init_checkpoint: Option<PathBuf>,
    /// Seed of batch sampling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_p: 8,
            batch_k: 2,
            checkpoint_every: 500,
            init_checkpoint: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Defaults to `final.ckpt` in the output directory.
    pub checkpoint: Option<PathBuf>,
    /// NM sequences per identity and view enrolled in the gallery.
    pub gallery_seqs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            gallery_seqs: 1,
        }
    }
}

/// Which sequence `dump-attention` runs; unset fields match anything and
/// the first test sequence that matches is used.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DumpConfig {
    /// Defaults to `final.ckpt` in the output directory.
    pub checkpoint: Option<PathBuf>,
    pub id: Option<usize>,
    pub condition: Option<Condition>,
    pub seq: Option<usize>,
    pub view: Option<u32>,
}

impl RunConfig {
    /// Reads and validates a config file.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        match (&self.data.root, &self.data.synthetic) {
            (Some(_), Some(_)) => {
                return Err(CliError::Config("data needs either root or synthetic, not both".into()))
            }
            (None, None) => return Err(CliError::Config("data needs root or synthetic".into())),
            (None, Some(g)) => {
                g.validate()?;
                if g.resolution != self.model.resolution {
                    return Err(CliError::Config(format!(
                        "generator resolution {:?} differs from model resolution {:?}",
                        g.resolution, self.model.resolution
                    )));
                }
                if self.data.train_ids.is_some() {
                    return Err(CliError::Config(
                        "set train_ids inside data.synthetic for generated data".into(),
                    ));
                }
            }
            (Some(_), None) => {}
        }
        let t = &self.train;
        if t.batch_p < 2 || t.batch_k < 2 {
            return Err(CliError::Config(
                "batch_p and batch_k must be at least 2 so every batch has triplets".into(),
            ));
        }
        if self.eval.gallery_seqs == 0 {
            return Err(CliError::Config("gallery_seqs must be positive".into()));
        }
        let g = &self.gradcheck;
        if !(g.eps > 0.0 && g.model_eps > 0.0) || g.max_entries == 0 {
            return Err(CliError::Config("gradcheck steps and max_entries must be positive".into()));
        }
        Ok(())
    }

    /// Loads or generates the dataset.
    pub fn dataset(&self) -> CliResult<DatasetIndex> {
        let index = match (&self.data.root, &self.data.synthetic) {
            (Some(root), _) => {
                let ids = self.data.train_ids.unwrap_or_else(|| count_ids(root) * 2 / 3);
                load_dataset(root, self.model.resolution, ids)?
            }
            (None, Some(g)) => synthesize(g)?,
            (None, None) => unreachable!("validated"),
        };
        if index.ids(Split::Train).len() < 2 {
            return Err(CliError::Config("training split needs at least two identities".into()));
        }
        Ok(index)
    }

    /// Model config with `num_classes` set to the training identities.
    pub fn model_for(&self, index: &DatasetIndex) -> ModelConfig {
        let n = index.ids(Split::Train).len();
        if n != self.model.num_classes {
            log::info!("num_classes set to {n}, the number of training identities");
        }
        ModelConfig {
            num_classes: n,
            ..self.model.clone()
        }
    }

    pub fn default_checkpoint(&self) -> PathBuf {
        self.output_dir.join(FINAL_CHECKPOINT)
    }
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";

fn count_ids(root: &Path) -> usize {
    fs::read_dir(root)
        .map(|it| {
            it.filter_map(|e| e.ok())
                .filter(|e| e.path().is_dir() && e.file_name().to_string_lossy().parse::<usize>().is_ok())
                .count()
        })
        .unwrap_or(0)
}
