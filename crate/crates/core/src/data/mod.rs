//! Silhouette sequences, dataset indexes and P×K batch sampling.

mod io;
mod synth;

pub use io::{export_dataset, load_dataset};
pub use synth::{synthesize, GenConfig};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Walking condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Nm,
    Bg,
    Cl,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Condition::Nm => "nm",
            Condition::Bg => "bg",
            Condition::Cl => "cl",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nm" => Ok(Condition::Nm),
            "bg" => Ok(Condition::Bg),
            "cl" => Ok(Condition::Cl),
            other => Err(Error::Data(format!("unknown condition {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One walk of one identity under one condition from one view.
#[derive(Clone, Debug, PartialEq)]
pub struct SilhouetteSequence {
    pub id: usize,
    pub condition: Condition,
    /// 1-based sequence number within the condition.
    pub seq: usize,
    /// View angle in degrees.
    pub view: u32,
    pub height: usize,
    pub width: usize,
    /// Row-major binary frames, each `height * width` values in `{0, 1}`.
    pub frames: Vec<Vec<u8>>,
}

impl SilhouetteSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frame indices of a `t`-frame clip starting at `start`, wrapping
    /// around the end of the sequence.
    pub fn clip_indices(&self, start: usize, t: usize) -> Vec<usize> {
        let n = self.frames.len();
        (0..t).map(|j| (start + j) % n).collect()
    }

    /// `(1, t, H, W)` clip built from the given frame indices.
    pub fn clip(&self, indices: &[usize]) -> Result<Tensor> {
        let hw = self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * hw);
        for &i in indices {
            let f = self
                .frames
                .get(i)
                .ok_or_else(|| Error::invalid(format!("frame {i} out of range")))?;
            data.extend(f.iter().map(|&v| f64::from(v)));
        }
        Tensor::new(vec![1, indices.len(), self.height, self.width], data)
    }
}

/// All sequences of a dataset plus the subject-disjoint split.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub resolution: [usize; 2],
    pub sequences: Vec<SilhouetteSequence>,
    splits: BTreeMap<usize, Split>,
}

impl DatasetIndex {
    /// Puts the first `train_ids` identities (in ascending id order) in the
    /// training split and the rest in the test split.
    pub fn new(resolution: [usize; 2], mut sequences: Vec<SilhouetteSequence>, train_ids: usize) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Data("no sequences found".into()));
        }
        sequences.sort_by(|a, b| {
            (a.id, a.condition, a.seq, a.view).cmp(&(b.id, b.condition, b.seq, b.view))
        });
        let mut splits = BTreeMap::new();
        for s in &sequences {
            if s.height != resolution[0] || s.width != resolution[1] {
                return Err(Error::Data(format!("sequence of id {} has wrong resolution", s.id)));
            }
            let n = splits.len();
            splits
                .entry(s.id)
                .or_insert(if n < train_ids { Split::Train } else { Split::Test });
        }
        Ok(Self {
            resolution,
            sequences,
            splits,
        })
    }

    pub fn split_of(&self, id: usize) -> Option<Split> {
        self.splits.get(&id).copied()
    }

    /// Identities in `split`, ascending.
    pub fn ids(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .filter(|(_, &s)| s == split)
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn sequences_in(&self, split: Split) -> impl Iterator<Item = &SilhouetteSequence> {
        self.sequences
            .iter()
            .filter(move |s| self.splits.get(&s.id) == Some(&split))
    }

    pub fn sequences_of(&self, id: usize) -> impl Iterator<Item = &SilhouetteSequence> {
        self.sequences.iter().filter(move |s| s.id == id)
    }

    /// Distinct views present, ascending.
    pub fn views(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.sequences.iter().map(|s| s.view).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Class index of every training identity.
    pub fn class_map(&self) -> BTreeMap<usize, usize> {
        self.ids(Split::Train)
            .into_iter()
            .enumerate()
            .map(|(c, id)| (id, c))
            .collect()
    }
}

/// `P·K` clips with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `(1, T, H, W)` clips.
    pub clips: Vec<Tensor>,
    /// Class index of each clip.
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

/// Draws `p` training identities without replacement and `k` sequences of
/// each, cropped or looped to `t` frames.
pub fn sample_batch<R: Rng + ?Sized>(
    index: &DatasetIndex,
    p: usize,
    k: usize,
    t: usize,
    rng: &mut R,
) -> Result<Batch> {
    let ids = index.ids(Split::Train);
    if p == 0 || k == 0 || t == 0 {
        return Err(Error::invalid("P, K and T must be positive"));
    }
    if ids.len() < p {
        return Err(Error::invalid(format!(
            "need {p} training identities, found {}",
            ids.len()
        )));
    }
    let classes = index.class_map();
    let mut clips = Vec::with_capacity(p * k);
    let mut labels = Vec::with_capacity(p * k);
    for i in sample(rng, ids.len(), p).into_iter() {
        let id = ids[i];
        let seqs: Vec<&SilhouetteSequence> = index.sequences_of(id).collect();
        let picks: Vec<usize> = if seqs.len() >= k {
            sample(rng, seqs.len(), k).into_vec()
        } else {
            (0..k).map(|_| rng.gen_range(0..seqs.len())).collect()
        };
        for j in picks {
            let s = seqs[j];
            let start = if s.len() > t { rng.gen_range(0..=s.len() - t) } else { 0 };
            clips.push(s.clip(&s.clip_indices(start, t))?);
            labels.push(classes[&id]);
        }
    }
    Ok(Batch { clips, labels })
}
