//! Central finite-difference verification of analytic gradients.

use rand::Rng;

use super::graph::{Fault, Graph, NodeId};
use super::params::{ParamId, ParamStore, RngState};
use crate::error::{Error, Result};

/// Below this magnitude both gradients are treated as zero and compared
/// absolutely.
const ABS_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub samples: usize,
    pub seed: u64,
    pub fault: Fault,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { eps: 1e-4, samples: 64, seed: 0, fault: Fault::None }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub param: String,
    pub index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

impl ProbeResult {
    pub fn abs_error(&self) -> f64 {
        (self.analytic - self.numeric).abs()
    }

    pub fn rel_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale < ABS_FLOOR {
            self.abs_error()
        } else {
            self.abs_error() / scale
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub probes: Vec<ProbeResult>,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ProbeResult> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_error().total_cmp(&b.rel_error()))
    }
}

/// Compares the reverse-mode gradient of `loss_fn` to
/// `(L(θ+eps) − L(θ−eps)) / (2·eps)` on randomly chosen scalars.
///
/// Every tensor is probed at least once; the remaining probes are spread
/// uniformly over all scalars. `loss_fn` must be deterministic.
pub fn finite_difference_check<F>(
    store: &mut ParamStore,
    loss_fn: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<NodeId>,
{
    if !(cfg.eps > 0.0 && cfg.eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {}", cfg.eps)));
    }
    let grads = {
        let mut g = Graph::new(store).with_fault(cfg.fault);
        let loss = loss_fn(&mut g)?;
        g.backward(loss)?
    };

    let mut rng = RngState::new(cfg.seed);
    let ids: Vec<ParamId> = store.ids().collect();
    let total = store.scalar_count();
    let mut picks: Vec<(ParamId, usize)> = Vec::new();
    for &id in &ids {
        let n = store.value(id).len();
        picks.push((id, rng.inner().random_range(0..n)));
    }
    while picks.len() < cfg.samples.max(ids.len()) {
        let mut flat = rng.inner().random_range(0..total);
        for &id in &ids {
            let n = store.value(id).len();
            if flat < n {
                picks.push((id, flat));
                break;
            }
            flat -= n;
        }
    }

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        Ok(g.scalar(loss))
    };

    let mut probes = Vec::with_capacity(picks.len());
    for (id, flat) in picks {
        let cols = store.value(id).ncols();
        let index = (flat / cols, flat % cols);
        let orig = store.value(id)[index];
        store.value_mut(id)[index] = orig + cfg.eps;
        let plus = eval(store);
        store.value_mut(id)[index] = orig - cfg.eps;
        let minus = eval(store);
        store.value_mut(id)[index] = orig;
        let numeric = (plus? - minus?) / (2.0 * cfg.eps);
        probes.push(ProbeResult {
            param: store.get(id).name.clone(),
            index,
            analytic: grads.get(id)[index],
            numeric,
        });
    }
    let max_rel_error = probes.iter().map(ProbeResult::rel_error).fold(0.0, f64::max);
    let max_abs_error = probes.iter().map(ProbeResult::abs_error).fold(0.0, f64::max);
    Ok(GradCheckReport { probes, max_rel_error, max_abs_error })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Mat;

    #[test]
    fn zero_step_is_rejected() {
        let mut store = ParamStore::new();
        let p = store.add("p", Mat::ones((1, 1)));
        let cfg = GradCheckConfig { eps: 0.0, ..Default::default() };
        let r = finite_difference_check(&mut store, |g| {
            let n = g.param(p);
            Ok(g.sum(n))
        }, &cfg);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn elementwise_ops_pass_the_check() {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(1);
        let a = store.add_uniform("a", 3, 4, 2, &mut rng);
        let b = store.add_uniform("b", 4, 2, 2, &mut rng);
        let row = store.add_uniform("row", 1, 2, 2, &mut rng);
        let unused = store.add_uniform("unused", 2, 2, 2, &mut rng);
        let _ = unused;
        let report = finite_difference_check(&mut store, |g| {
            let an = g.param(a);
            let bn = g.param(b);
            let rn = g.param(row);
            let m = g.matmul(an, bn);
            let m = g.add_row(m, rn);
            let s = g.sigmoid(m);
            let t = g.tanh(m);
            let p = g.mul(s, t);
            let q = g.one_minus(p);
            let sq = g.mul(q, q);
            let rs = g.sum_rows(sq);
            let rs = g.add_scalar(rs, 1e-3);
            let r = g.sqrt(rs);
            let cols = g.slice_cols(an, 1, 2);
            let c = g.cosine_distance_rows(cols, m);
            let both = g.add(r, c);
            let gathered = g.gather_rows(both, vec![2, 0, 2]);
            let xent = g.softmax_cross_entropy(an, vec![Some(1), None, Some(3)])?;
            let l1 = g.mean(gathered);
            let l2 = g.sum(xent);
            Ok(g.add(l1, l2))
        }, &GradCheckConfig { samples: 30, ..Default::default() }).unwrap();
        assert!(report.max_rel_error < 1e-6, "{:?}", report.worst());
        assert!(report.probes.iter().any(|p| p.param == "unused"));
    }

    #[test]
    fn unfold_blend_and_relu_pass_the_check() {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(2);
        let x = store.add_uniform("x", 9, 3, 1, &mut rng);
        let old = store.add_uniform("old", 3, 6, 1, &mut rng);
        let report = finite_difference_check(&mut store, |g| {
            let xn = g.param(x);
            let u = g.unfold(xn, 2, 3)?;
            let o = g.param(old);
            let b = g.blend_rows(u, o, vec![true, false, true]);
            let sh = g.add_scalar(b, 0.05);
            let r = g.relu(sh);
            let top = g.slice_rows(r, 1, 2);
            let sc = g.scale(top, 3.0);
            let d = g.sub(sc, top);
            Ok(g.sum(d))
        }, &GradCheckConfig::default()).unwrap();
        assert!(report.max_rel_error < 1e-6, "{:?}", report.worst());
    }
}
