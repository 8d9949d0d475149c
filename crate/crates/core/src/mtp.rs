//! Temporal pooling that fuses mean, max and GeM aggregation.
//!
//! `f_omni = β₀·Mean_T(f) + β₁·Max_T(f) + β₂·GeM_T(f)` with
//! `β = σ(W_t · GAP_{C,H,W}(f))`. `W_t (3, T)` is generated per sample by a
//! hypernetwork, or is a plain trainable tensor in static mode.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ReduceKind, Trace, Var};
use crate::error::{Error, Result};
use crate::mhn::{compute_statistics, Calibration, TargetShape};
use crate::params::{Binding, ParamStore};
use crate::tensor::Tensor;

/// Clamp floor applied before the GeM power.
pub const GEM_EPS: f64 = 1e-6;
pub const GEM_P_INIT: f64 = 3.0;
pub const GEM_P_MIN: f64 = 1.0;
pub const GEM_P_MAX: f64 = 128.0;

/// Temporal aggregation methods, in β order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMethod {
    Mean,
    Max,
    Gem,
}

impl PoolMethod {
    pub const ALL: [PoolMethod; 3] = [PoolMethod::Mean, PoolMethod::Max, PoolMethod::Gem];

    /// Row of `β` weighting this method.
    pub fn index(self) -> usize {
        match self {
            PoolMethod::Mean => 0,
            PoolMethod::Max => 1,
            PoolMethod::Gem => 2,
        }
    }
}

/// How the per-method weights are produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    #[default]
    Meta,
    Static,
    /// Every enabled method is weighted by 1.
    None,
}

/// Reduces `x (C, T, H, W)` over `T`, giving `(C, 1, H, W)`.
pub fn pool_temporal(tr: &mut Trace, x: Var, method: PoolMethod, p: Option<Var>) -> Result<Var> {
    if tr.shape(x).len() != 4 {
        return Err(Error::shape(format!(
            "temporal pooling expects (C,T,H,W), got {:?}",
            tr.shape(x)
        )));
    }
    match method {
        PoolMethod::Mean => tr.reduce(x, ReduceKind::Mean, &[1]),
        PoolMethod::Max => tr.reduce(x, ReduceKind::Max, &[1]),
        PoolMethod::Gem => {
            let p = p.ok_or_else(|| Error::invalid("gem pooling needs an exponent"))?;
            tr.gem(x, p, 1, GEM_EPS)
        }
    }
}

/// `σ(W_t · GAP_{C,H,W}(f))` for `w_t (3, T)`, giving `(3)`.
pub fn compute_beta(tr: &mut Trace, w_t: Var, f: Var) -> Result<Var> {
    let s = tr.shape(f).to_vec();
    if s.len() != 4 {
        return Err(Error::shape(format!("expected (C,T,H,W), got {s:?}")));
    }
    if tr.shape(w_t) != [3, s[1]] {
        return Err(Error::shape(format!(
            "temporal weights {:?} do not match T = {}",
            tr.shape(w_t),
            s[1]
        )));
    }
    let g = tr.mean(f, &[0, 2, 3])?;
    let g = tr.reshape(g, vec![s[1]])?;
    let z = tr.dense(g, w_t)?;
    Ok(tr.sigmoid(z))
}

/// Vars produced by one pooling forward.
#[derive(Clone, Debug)]
pub struct MtpOutput {
    /// `(C, 1, H, W)` fused representation.
    pub out: Var,
    /// `(3)` method weights; absent when weighting is [`Weighting::None`].
    pub beta: Option<Var>,
    /// Per-method pooled maps, in enabled order.
    pub pooled: Vec<(PoolMethod, Var)>,
}

#[derive(Clone, Debug)]
pub struct MtpHead {
    prefix: String,
    methods: Vec<PoolMethod>,
    weighting: Weighting,
    frames: usize,
    calibration: Option<Calibration>,
}

impl MtpHead {
    /// Registers the head's weights for inputs with `channels` channels and
    /// `frames` frames. `methods` is deduplicated and put in β order.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        methods: &[PoolMethod],
        weighting: Weighting,
        channels: usize,
        frames: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut methods = methods.to_vec();
        methods.sort();
        methods.dedup();
        if methods.is_empty() {
            return Err(Error::Config("temporal pooling needs at least one method".into()));
        }
        if frames == 0 {
            return Err(Error::Config("clip length must be positive".into()));
        }
        let target = TargetShape::single(vec![3, frames]);
        let wt_prefix = format!("{prefix}/wt");
        let calibration = match weighting {
            Weighting::Meta => Some(Calibration::meta(store, &wt_prefix, channels, target, rng)?),
            Weighting::Static => Some(Calibration::fixed(store, &wt_prefix, target, rng)?),
            Weighting::None => None,
        };
        if methods.contains(&PoolMethod::Gem) {
            store.insert(format!("{prefix}/gem_p"), Tensor::scalar(GEM_P_INIT))?;
        }
        Ok(Self {
            prefix: prefix.to_string(),
            methods,
            weighting,
            frames,
            calibration,
        })
    }

    pub fn methods(&self) -> &[PoolMethod] {
        &self.methods
    }

    pub fn weighting(&self) -> Weighting {
        self.weighting
    }

    pub fn calibration(&self) -> Option<&Calibration> {
        self.calibration.as_ref()
    }

    /// Name of the GeM exponent, if GeM is enabled.
    pub fn p_name(&self) -> Option<String> {
        self.methods
            .contains(&PoolMethod::Gem)
            .then(|| format!("{}/gem_p", self.prefix))
    }

    /// Clamps the stored exponent into `[1, 128]`.
    pub fn clamp_p(&self, store: &mut ParamStore) -> Result<()> {
        if let Some(name) = self.p_name() {
            let p = store
                .get(&name)
                .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?
                .item();
            let clamped = if p.is_nan() { GEM_P_INIT } else { p.clamp(GEM_P_MIN, GEM_P_MAX) };
            store.set(&name, Tensor::scalar(clamped))?;
        }
        Ok(())
    }

    /// Only `β` for `f (C, T, H, W)`.
    pub fn beta(&self, tr: &mut Trace, bind: &mut Binding<'_>, f: Var) -> Result<Option<Var>> {
        self.check(tr, f)?;
        let Some(cal) = &self.calibration else {
            return Ok(None);
        };
        let m = match cal {
            Calibration::Meta(_) => Some(compute_statistics(tr, f)?),
            Calibration::Static { .. } => None,
        };
        let w = cal.weights(tr, bind, m)?;
        Ok(Some(compute_beta(tr, w[0], f)?))
    }

    fn check(&self, tr: &Trace, f: Var) -> Result<()> {
        let s = tr.shape(f);
        if s.len() != 4 || s[1] != self.frames {
            return Err(Error::shape(format!(
                "pooling head built for T = {}, got {s:?}",
                self.frames
            )));
        }
        Ok(())
    }

    /// `Σ_k β_k · pool_k(f)` over the enabled methods.
    pub fn forward(&self, tr: &mut Trace, bind: &mut Binding<'_>, f: Var) -> Result<MtpOutput> {
        let beta = self.beta(tr, bind, f)?;
        let p = match self.p_name() {
            Some(name) => Some(bind.get(tr, &name)?),
            None => None,
        };
        let mut pooled = Vec::with_capacity(self.methods.len());
        let mut out: Option<Var> = None;
        for &method in &self.methods {
            let y = pool_temporal(tr, f, method, p)?;
            pooled.push((method, y));
            let term = match beta {
                Some(b) => {
                    let bk = tr.slice(b, 0, method.index(), 1)?;
                    let bk = tr.reshape(bk, vec![1, 1, 1, 1])?;
                    tr.mul(bk, y)?
                }
                None => y,
            };
            out = Some(match out {
                Some(acc) => tr.add(acc, term)?,
                None => term,
            });
        }
        Ok(MtpOutput {
            out: out.expect("at least one method"),
            beta,
            pooled,
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autograd::{grad_check_sampled, kernels::sigmoid};

    fn pooled(x: Tensor, method: PoolMethod, p: f64) -> Tensor {
        let mut tr = Trace::new();
        let xv = tr.constant(x);
        let pv = tr.constant(Tensor::scalar(p));
        let y = pool_temporal(&mut tr, xv, method, Some(pv)).unwrap();
        tr.value(y).clone()
    }

    fn positive(shape: [usize; 4], seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape.to_vec(), lo, hi, &mut rng).unwrap()
    }

    #[test]
    fn gem_hand_example() {
        let x = Tensor::new(vec![1, 2, 1, 1], vec![1.0, 2.0]).unwrap();
        let y = pooled(x, PoolMethod::Gem, 2.0).item();
        assert!((y - 2.5f64.sqrt()).abs() < 1e-12);
        assert!((y - 1.5811).abs() < 1e-4);
    }

    #[test]
    fn constant_clip_collapses_every_method() {
        let x = Tensor::full(vec![2, 5, 3, 2], 0.8).unwrap();
        for m in PoolMethod::ALL {
            for v in pooled(x.clone(), m, 3.0).data() {
                assert!((v - 0.8).abs() < 1e-12, "{m:?}");
            }
        }
    }

    #[test]
    fn gem_with_unit_exponent_is_mean() {
        let x = positive([3, 7, 2, 2], 1, 0.1, 3.0);
        let g = pooled(x.clone(), PoolMethod::Gem, 1.0);
        let m = pooled(x, PoolMethod::Mean, 1.0);
        assert!(g.max_abs_diff(&m) < 1e-12);
    }

    #[test]
    fn power_mean_ordering() {
        for seed in 0..20 {
            let x = positive([3, 6, 2, 3], seed, 0.01, 5.0);
            let mean = pooled(x.clone(), PoolMethod::Mean, 1.0);
            let max = pooled(x.clone(), PoolMethod::Max, 1.0);
            let p = 1.0 + seed as f64 * 0.7;
            let gem = pooled(x, PoolMethod::Gem, p);
            for i in 0..mean.numel() {
                let (a, g, b) = (mean.data()[i], gem.data()[i], max.data()[i]);
                assert!(a <= g + 1e-12 && g <= b + 1e-12, "{a} {g} {b}");
            }
        }
    }

    #[test]
    fn large_exponent_approaches_max() {
        let x = positive([4, 10, 3, 3], 2, 0.5, 2.0);
        let gem = pooled(x.clone(), PoolMethod::Gem, 64.0);
        let max = pooled(x, PoolMethod::Max, 1.0);
        for (g, m) in gem.data().iter().zip(max.data()) {
            assert!((g - m).abs() / m < 0.05);
        }
    }

    #[test]
    fn gem_rejects_small_exponent() {
        let mut tr = Trace::new();
        let x = tr.constant(Tensor::ones(vec![1, 2, 1, 1]).unwrap());
        let p = tr.constant(Tensor::scalar(0.5));
        assert!(pool_temporal(&mut tr, x, PoolMethod::Gem, Some(p)).is_err());
    }

    #[test]
    fn beta_hand_example() {
        let mut tr = Trace::new();
        let w = tr.constant(Tensor::new(vec![3, 2], vec![1., 0., 0., 1., 1., 1.]).unwrap());
        // GAP over C, H, W gives [1, -1]
        let f = tr.constant(Tensor::new(vec![2, 2, 1, 1], vec![1.5, -0.5, 0.5, -1.5]).unwrap());
        let b = compute_beta(&mut tr, w, f).unwrap();
        let v = tr.value(b).data();
        assert_eq!(v, &[sigmoid(1.0), sigmoid(-1.0), 0.5]);
        assert!((v[0] - 0.7311).abs() < 1e-4 && (v[1] - 0.2689).abs() < 1e-4);

        let bad = tr.constant(Tensor::zeros(vec![3, 3]).unwrap());
        assert!(compute_beta(&mut tr, bad, f).is_err());
    }

    fn head(methods: &[PoolMethod], weighting: Weighting, seed: u64) -> (ParamStore, MtpHead) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = MtpHead::new(&mut store, "mtp", methods, weighting, 4, 5, &mut rng).unwrap();
        (store, h)
    }

    #[test]
    fn zero_generated_weights_give_half_beta() {
        let (mut store, h) = head(&PoolMethod::ALL, Weighting::Meta, 3);
        store.set("mtp/wt/meta2", Tensor::zeros(vec![15, 4]).unwrap()).unwrap();
        let mut tr = Trace::new();
        let mut bind = Binding::new(&store);
        let f = tr.constant(positive([4, 5, 2, 2], 4, -1.0, 1.0));
        let o = h.forward(&mut tr, &mut bind, f).unwrap();
        assert_eq!(tr.value(o.beta.unwrap()).data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn rejects_wrong_clip_length() {
        let (store, h) = head(&PoolMethod::ALL, Weighting::Meta, 3);
        let mut tr = Trace::new();
        let mut bind = Binding::new(&store);
        let f = tr.constant(Tensor::ones(vec![4, 6, 2, 2]).unwrap());
        assert!(h.forward(&mut tr, &mut bind, f).is_err());
    }

    #[test]
    fn constant_and_zero_inputs() {
        let (store, h) = head(&PoolMethod::ALL, Weighting::Meta, 5);
        let mut tr = Trace::new();
        let mut bind = Binding::new(&store);
        let f = tr.constant(Tensor::full(vec![4, 5, 2, 2], 1.7).unwrap());
        let o = h.forward(&mut tr, &mut bind, f).unwrap();
        let s: f64 = tr.value(o.beta.unwrap()).data().iter().sum();
        for v in tr.value(o.out).data() {
            assert!((v - s * 1.7).abs() < 1e-12);
        }
        let z = tr.constant(Tensor::zeros(vec![4, 5, 2, 2]).unwrap());
        let o = h.forward(&mut tr, &mut bind, z).unwrap();
        let s: f64 = tr.value(o.beta.unwrap()).data().iter().sum();
        for v in tr.value(o.out).data() {
            assert!(v.abs() <= GEM_EPS * s + 1e-18);
        }
    }

    #[test]
    fn forward_matches_hand_composition_and_bound() {
        let (store, h) = head(&PoolMethod::ALL, Weighting::Meta, 6);
        let x = positive([4, 5, 3, 2], 7, 0.1, 2.0);
        let mut tr = Trace::new();
        let mut bind = Binding::new(&store);
        let f = tr.constant(x.clone());
        let o = h.forward(&mut tr, &mut bind, f).unwrap();
        let b = tr.value(o.beta.unwrap()).data().to_vec();
        let p = store.get("mtp/gem_p").unwrap().item();
        let mean = pooled(x.clone(), PoolMethod::Mean, p);
        let max = pooled(x.clone(), PoolMethod::Max, p);
        let gem = pooled(x, PoolMethod::Gem, p);
        for i in 0..mean.numel() {
            let want = b[0] * mean.data()[i] + b[1] * max.data()[i] + b[2] * gem.data()[i];
            let got = tr.value(o.out).data()[i];
            assert!((got - want).abs() < 1e-12);
            assert!(got <= (b[0] + b[1] + b[2]) * max.data()[i] + 1e-12);
        }
    }

    #[test]
    fn disabled_method_drops_only_its_term() {
        let x = positive([4, 5, 2, 2], 8, 0.1, 2.0);
        let run = |methods: &[PoolMethod]| {
            let (store, h) = head(methods, Weighting::Meta, 9);
            let mut tr = Trace::new();
            let mut bind = Binding::new(&store);
            let f = tr.constant(x.clone());
            let o = h.forward(&mut tr, &mut bind, f).unwrap();
            let b = tr.value(o.beta.unwrap()).data().to_vec();
            (tr.value(o.out).clone(), b)
        };
        let (full, b) = run(&PoolMethod::ALL);
        let (no_max, b2) = run(&[PoolMethod::Gem, PoolMethod::Mean]);
        assert_eq!(b, b2);
        let max = pooled(x, PoolMethod::Max, 1.0);
        for i in 0..full.numel() {
            let want = full.data()[i] - b[1] * max.data()[i];
            assert!((no_max.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn unweighted_max_only_is_plain_max() {
        let x = positive([4, 5, 2, 2], 10, -1.0, 1.0);
        let (store, h) = head(&[PoolMethod::Max], Weighting::None, 11);
        assert!(store.is_empty());
        let mut tr = Trace::new();
        let mut bind = Binding::new(&store);
        let f = tr.constant(x.clone());
        let o = h.forward(&mut tr, &mut bind, f).unwrap();
        assert!(o.beta.is_none());
        assert_eq!(tr.value(o.out), &pooled(x, PoolMethod::Max, 1.0));
    }

    #[test]
    fn clamp_keeps_exponent_in_range() {
        let (mut store, h) = head(&PoolMethod::ALL, Weighting::Static, 12);
        for (v, want) in [(0.2, 1.0), (500.0, 128.0), (4.0, 4.0)] {
            store.set("mtp/gem_p", Tensor::scalar(v)).unwrap();
            h.clamp_p(&mut store).unwrap();
            assert_eq!(store.get("mtp/gem_p").unwrap().item(), want);
        }
    }

    #[test]
    fn forward_passes_grad_check_including_exponent() {
        for weighting in [Weighting::Meta, Weighting::Static] {
            let (store, h) = head(&PoolMethod::ALL, weighting, 13);
            let names: Vec<String> = store.names().cloned().collect();
            let mut rng = ChaCha8Rng::seed_from_u64(14);
            let mut inputs = vec![positive([4, 5, 3, 2], 15, 0.2, 2.0)];
            for n in &names {
                let t = store.get(n).unwrap();
                inputs.push(if n.ends_with("gem_p") {
                    Tensor::scalar(2.5)
                } else {
                    Tensor::uniform(t.shape().to_vec(), -1.0, 1.0, &mut rng).unwrap()
                });
            }
            let proj = positive([4, 1, 3, 2], 16, -1.0, 1.0);
            let report = grad_check_sampled(
                |tr, p| {
                    let mut bind =
                        Binding::preset(&store, names.iter().cloned().zip(p[1..].iter().copied()));
                    let o = h.forward(tr, &mut bind, p[0])?;
                    let w = tr.constant(proj.clone());
                    let y = tr.mul(o.out, w)?;
                    tr.sum_all(y)
                },
                &inputs,
                1e-6,
                40,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{weighting:?}: {report:?}");
        }
    }
}
