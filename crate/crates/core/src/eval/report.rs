use std::fmt::Write as _;

use super::{embed_distance, mean_average_precision, rank1_cross_view, Meta};
use crate::data::{Condition, DatasetIndex, Split};
use crate::error::{Error, Result};
use crate::model::MetaGait;
use crate::params::ParamStore;

/// Rank-1 at one probe view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewRow {
    pub condition: Condition,
    pub view: u32,
    /// Percent.
    pub rank1: f64,
    pub probes: usize,
}

/// Per-condition summary.
#[derive(Clone, Debug, PartialEq)]
pub struct CondSummary {
    pub condition: Condition,
    /// Mean over probe views of per-view rank-1, percent.
    pub mean_rank1: f64,
    /// Percent.
    pub map: f64,
    pub probes: usize,
    /// Probes dropped for lack of cross-view candidates.
    pub excluded: usize,
    pub gallery: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ViewRow>,
    pub summary: Vec<CondSummary>,
}

impl EvalReport {
    /// `condition,view,rank1`, one row per probe condition and view.
    pub fn per_view_csv(&self) -> String {
        let mut s = String::from("condition,view,rank1\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.4}", r.condition, r.view, r.rank1);
        }
        s
    }

    /// `condition,mean_rank1,map`.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("condition,mean_rank1,map\n");
        for r in &self.summary {
            let _ = writeln!(s, "{},{:.4},{:.4}", r.condition, r.mean_rank1, r.map);
        }
        s
    }

    pub fn mean_rank1(&self, condition: Condition) -> Option<f64> {
        self.summary
            .iter()
            .find(|c| c.condition == condition)
            .map(|c| c.mean_rank1)
    }
}

/// Runs the cross-view protocol on the test split: the first
/// `gallery_seqs` NM sequences of every identity and view form the
/// gallery, every other test sequence is a probe. Each sequence is
/// represented by its first `T` frames, looped if shorter.
pub fn evaluate(
    model: &MetaGait,
    store: &ParamStore,
    index: &DatasetIndex,
    gallery_seqs: usize,
) -> Result<EvalReport> {
    let t = model.config().frames;
    let test: Vec<_> = index.sequences_in(Split::Test).collect();
    if test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let clips = test
        .iter()
        .map(|s| s.clip(&s.clip_indices(0, t)))
        .collect::<Result<Vec<_>>>()?;
    let embs = model.embed_all(store, &clips)?;

    let is_gallery = |i: usize| test[i].condition == Condition::Nm && test[i].seq <= gallery_seqs;
    let g_idx: Vec<usize> = (0..test.len()).filter(|&i| is_gallery(i)).collect();
    if g_idx.is_empty() {
        return Err(Error::Data("no gallery sequences in the test split".into()));
    }
    let g_meta: Vec<Meta> = g_idx.iter().map(|&i| meta(test[i])).collect();
    let g_emb: Vec<Vec<f64>> = g_idx.iter().map(|&i| embs[i].clone()).collect();

    let mut conditions: Vec<Condition> = test.iter().map(|s| s.condition).collect();
    conditions.sort();
    conditions.dedup();
    let mut report = EvalReport::default();
    for cond in conditions {
        let p_idx: Vec<usize> = (0..test.len())
            .filter(|&i| test[i].condition == cond && !is_gallery(i))
            .collect();
        if p_idx.is_empty() {
            continue;
        }
        let p_meta: Vec<Meta> = p_idx.iter().map(|&i| meta(test[i])).collect();
        let p_emb: Vec<Vec<f64>> = p_idx.iter().map(|&i| embs[i].clone()).collect();
        let dist = embed_distance(&p_emb, &g_emb)?;
        let r1 = rank1_cross_view(&dist, &g_meta, &p_meta, &mut |_, _| {})?;
        let ap = mean_average_precision(&dist, &g_meta, &p_meta, &mut |_, _| {})?;
        let mut accs = Vec::new();
        for (&view, &(_, n)) in &r1.per_view {
            let acc = r1.accuracy(view).unwrap_or(0.0);
            accs.push(acc);
            report.rows.push(ViewRow {
                condition: cond,
                view,
                rank1: acc,
                probes: n,
            });
        }
        report.summary.push(CondSummary {
            condition: cond,
            mean_rank1: if accs.is_empty() { 0.0 } else { accs.iter().sum::<f64>() / accs.len() as f64 },
            map: 100.0 * ap.map,
            probes: r1.counted(),
            excluded: r1.excluded,
            gallery: g_meta.len(),
        });
    }
    Ok(report)
}

fn meta(s: &crate::data::SilhouetteSequence) -> Meta {
    Meta { id: s.id, view: s.view }
}
