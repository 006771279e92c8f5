//! Central finite-difference gradient checks.

use rand::seq::index::sample;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::rng::rng_for;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest per-tensor relative error.
    pub worst: f64,
    pub worst_param: String,
    pub entries_checked: usize,
}

/// Denominator floor for tensors whose true gradient is (numerically) zero.
pub const REL_FLOOR: f64 = 1e-6;

/// Compares analytic gradients of the scalar `loss` with central
/// differences of step `h` for every trainable parameter.
///
/// Per tensor the error is `‖a − n‖ / max(‖a‖, ‖n‖, REL_FLOOR)` over the
/// checked entries; at most `max_entries` entries per tensor are sampled.
pub fn check_gradients<F>(
    store: &ParamStore,
    loss: F,
    h: f64,
    max_entries: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let v = loss(&mut g, s)?;
        if g.value(v).numel() != 1 {
            return Err(Error::Shape {
                op: "gradcheck",
                left: g.shape(v).to_vec(),
                right: vec![],
            });
        }
        Ok(g.scalar_value(v))
    };
    let mut g = Graph::new();
    let root = loss(&mut g, store)?;
    g.backward(root)?;
    let analytic = g.param_grads();

    let mut rng = rng_for(seed, "gradcheck");
    let mut work = store.clone();
    let mut report = GradCheckReport {
        worst: 0.0,
        worst_param: String::new(),
        entries_checked: 0,
    };
    for name in store.trainable_names() {
        let n = store.tensor(&name)?.numel();
        let zeros = vec![0.0; n];
        let a = analytic.get(&name).unwrap_or(&zeros);
        let idx: Vec<usize> = if n <= max_entries {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, max_entries).into_vec();
            v.sort_unstable();
            v
        };
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for &i in &idx {
            let orig = store.tensor(&name)?.data[i];
            let p = work.get_mut(&name).expect("cloned store");
            p.tensor.data[i] = orig + h;
            let up = eval(&work)?;
            work.get_mut(&name).unwrap().tensor.data[i] = orig - h;
            let down = eval(&work)?;
            work.get_mut(&name).unwrap().tensor.data[i] = orig;
            let num = (up - down) / (2.0 * h);
            diff += (a[i] - num).powi(2);
            na += a[i] * a[i];
            nn += num * num;
        }
        let rel = diff.sqrt() / na.sqrt().max(nn.sqrt()).max(REL_FLOOR);
        report.entries_checked += idx.len();
        if report.worst_param.is_empty() || rel > report.worst {
            report.worst = rel;
            report.worst_param = name.clone();
        }
    }
    Ok(report)
}
