//! Cross-view gallery/probe recognition metrics.
//!
//! Every comparison between a probe and a gallery entry recorded from the
//! same view is skipped, for rank-1 and mAP alike.

mod report;

pub use report::{evaluate, CondSummary, EvalReport, ViewRow};

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Identity and view of one gallery or probe entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Meta {
    pub id: usize,
    pub view: u32,
}

/// Euclidean distance between every row of `a` and every row of `b`.
pub fn embed_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let dim = a.first().or(b.first()).map(Vec::len).unwrap_or(0);
    if a.iter().chain(b).any(|v| v.len() != dim) {
        return Err(Error::invalid("embeddings must all have the same length"));
    }
    Ok(a
        .iter()
        .map(|x| {
            b.iter()
                .map(|y| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
                .collect()
        })
        .collect())
}

/// Per-view rank-1 counts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Rank1 {
    /// view → (hits, counted probes)
    pub per_view: BTreeMap<u32, (usize, usize)>,
    /// Probes with no gallery entry from another view.
    pub excluded: usize,
}

impl Rank1 {
    /// Rank-1 accuracy in percent at `view`.
    pub fn accuracy(&self, view: u32) -> Option<f64> {
        self.per_view
            .get(&view)
            .filter(|(_, n)| *n > 0)
            .map(|&(h, n)| 100.0 * h as f64 / n as f64)
    }

    pub fn hits(&self) -> usize {
        self.per_view.values().map(|v| v.0).sum()
    }

    pub fn counted(&self) -> usize {
        self.per_view.values().map(|v| v.1).sum()
    }
}

fn check_dims(dist: &[Vec<f64>], gallery: &[Meta], probes: &[Meta]) -> Result<()> {
    if dist.len() != probes.len() || dist.iter().any(|r| r.len() != gallery.len()) {
        return Err(Error::shape("distance matrix must be probes x gallery"));
    }
    Ok(())
}

/// Nearest cross-view gallery entry of each probe; ties go to the lowest
/// gallery index. `observe(probe, gallery)` sees every counted comparison.
pub fn rank1_cross_view(
    dist: &[Vec<f64>],
    gallery: &[Meta],
    probes: &[Meta],
    observe: &mut dyn FnMut(usize, usize),
) -> Result<Rank1> {
    check_dims(dist, gallery, probes)?;
    let mut out = Rank1::default();
    for (p, probe) in probes.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for (g, cand) in gallery.iter().enumerate() {
            if cand.view == probe.view {
                continue;
            }
            observe(p, g);
            let d = dist[p][g];
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, g));
            }
        }
        match best {
            Some((_, g)) => {
                let e = out.per_view.entry(probe.view).or_insert((0, 0));
                e.0 += usize::from(gallery[g].id == probe.id);
                e.1 += 1;
            }
            None => out.excluded += 1,
        }
    }
    Ok(out)
}

/// Cross-view candidates of `probe` ordered by distance, then index.
fn ranked(row: &[f64], gallery: &[Meta], probe: Meta, observe: &mut dyn FnMut(usize)) -> Vec<usize> {
    let mut c: Vec<usize> = (0..gallery.len()).filter(|&g| gallery[g].view != probe.view).collect();
    for &g in &c {
        observe(g);
    }
    c.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    c
}

/// Average precision of one ranked list; `None` without relevant items.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0;
    let mut sum = 0.0;
    for (i, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// mAP summary.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MeanAp {
    /// Mean AP in `[0, 1]` over counted probes.
    pub map: f64,
    pub counted: usize,
    /// Probes without any relevant cross-view candidate.
    pub excluded: usize,
    /// Per-probe AP, `None` for excluded probes.
    pub per_probe: Vec<Option<f64>>,
}

/// Mean average precision with the same cross-view exclusion as rank-1.
pub fn mean_average_precision(
    dist: &[Vec<f64>],
    gallery: &[Meta],
    probes: &[Meta],
    observe: &mut dyn FnMut(usize, usize),
) -> Result<MeanAp> {
    check_dims(dist, gallery, probes)?;
    let mut per_probe = Vec::with_capacity(probes.len());
    for (p, &probe) in probes.iter().enumerate() {
        let order = ranked(&dist[p], gallery, probe, &mut |g| observe(p, g));
        let rel: Vec<bool> = order.iter().map(|&g| gallery[g].id == probe.id).collect();
        per_probe.push(average_precision(&rel));
    }
    let aps: Vec<f64> = per_probe.iter().flatten().copied().collect();
    Ok(MeanAp {
        map: if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 },
        counted: aps.len(),
        excluded: probes.len() - aps.len(),
        per_probe,
    })
}
