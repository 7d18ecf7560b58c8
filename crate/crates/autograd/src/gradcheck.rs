//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Error)]
pub enum GradcheckError {
    #[error("loss is not finite ({0})")]
    NonFiniteLoss(f64),
    #[error("selector matched no parameters")]
    EmptySelection,
}

/// Which parameters to sample coordinates from.
#[derive(Clone, Debug)]
pub enum ParamSelector {
    All,
    Prefixes(Vec<String>),
    Names(Vec<String>),
}

impl ParamSelector {
    pub fn prefixes<S: AsRef<str>>(p: &[S]) -> Self {
        Self::Prefixes(p.iter().map(|s| s.as_ref().to_string()).collect())
    }

    fn matches(&self, name: &str) -> bool {
        match self {
            ParamSelector::All => true,
            ParamSelector::Prefixes(p) => p.iter().any(|x| name.starts_with(x.as_str())),
            ParamSelector::Names(n) => n.iter().any(|x| x == name),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub coords: usize,
    pub seed: u64,
    /// Denominator floor for the relative error, so that coordinates with a
    /// vanishing gradient are judged on absolute agreement.
    pub abs_floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-3,
            coords: 20,
            seed: 0,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub frozen: bool,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub loss: f64,
    pub checks: Vec<CoordCheck>,
    /// Largest relative error over non-frozen coordinates.
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn eval(store: &ParamStore, loss_fn: &impl Fn(&ParamStore, &mut Graph) -> Var) -> f64 {
    let mut g = Graph::new();
    let l = loss_fn(store, &mut g);
    g.value(l).item()
}

/// Compares the analytic gradient of `loss_fn` with central differences on
/// `cfg.coords` coordinates drawn uniformly (with replacement) from the
/// scalars of the selected parameters. `loss_fn` must be deterministic.
///
/// Frozen parameters are reported with a zero analytic gradient and are
/// excluded from the pass/fail statistic.
pub fn gradcheck(
    store: &mut ParamStore,
    selector: &ParamSelector,
    cfg: &GradcheckConfig,
    loss_fn: impl Fn(&ParamStore, &mut Graph) -> Var,
) -> Result<GradcheckReport, GradcheckError> {
    let mut graph = Graph::new();
    let loss_var = loss_fn(store, &mut graph);
    let loss = graph.value(loss_var).item();
    if !loss.is_finite() {
        return Err(GradcheckError::NonFiniteLoss(loss));
    }
    graph.backward(loss_var);
    let grads = graph.param_grads(store);
    drop(graph);

    let pool: Vec<(ParamId, usize)> = store
        .iter()
        .filter(|(_, name, _)| selector.matches(name))
        .map(|(id, _, t)| (id, t.len()))
        .filter(|(_, n)| *n > 0)
        .collect();
    if pool.is_empty() {
        return Err(GradcheckError::EmptySelection);
    }
    let total: usize = pool.iter().map(|(_, n)| n).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checks = Vec::with_capacity(cfg.coords);
    let mut max_rel: f64 = 0.0;
    for _ in 0..cfg.coords {
        // Uniform over scalars, not over tensors.
        let mut pick = rng.random_range(0..total);
        let &(id, _) = pool
            .iter()
            .find(|(_, n)| {
                if pick < *n {
                    true
                } else {
                    pick -= n;
                    false
                }
            })
            .expect("pick is below the pooled scalar count");
        let index = pick;
        let frozen = store.is_frozen(id);
        let analytic = grads.get(id).map(|g| g.data[index]).unwrap_or(0.0);

        let orig = store.get(id).data[index];
        store.get_mut(id).data[index] = orig + cfg.step;
        let plus = eval(store, &loss_fn);
        store.get_mut(id).data[index] = orig - cfg.step;
        let minus = eval(store, &loss_fn);
        store.get_mut(id).data[index] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(GradcheckError::NonFiniteLoss(if plus.is_finite() { minus } else { plus }));
        }
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let denom = analytic.abs().max(numeric.abs()).max(cfg.abs_floor);
        let rel_err = (analytic - numeric).abs() / denom;
        if !frozen {
            max_rel = max_rel.max(rel_err);
        }
        checks.push(CoordCheck {
            param: store.name(id).to_string(),
            index,
            frozen,
            analytic,
            numeric,
            rel_err,
        });
    }
    Ok(GradcheckReport {
        loss,
        checks,
        max_rel_err: max_rel,
        tolerance: cfg.tolerance,
    })
}
