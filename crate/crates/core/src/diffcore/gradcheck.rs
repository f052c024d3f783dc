//! Finite-difference verification of tape gradients.

use super::store::ParamStore;
use super::tape::{NodeId, Tape};

/// Worst single-parameter disagreement found by [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckWorst {
    pub block: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Outcome of a gradient check over every parameter in the store.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error. The denominator for parameter `i` is
    /// `max(|a_i|, |n_i|, 1e-3 * g_max)` where `g_max` is the largest gradient
    /// magnitude seen, so finite-difference roundoff on near-zero gradients is
    /// judged against the model's gradient scale rather than against zero.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst: Option<GradCheckWorst>,
    pub checked: usize,
}

/// Compares the tape gradient of `build`'s scalar loss against central finite
/// differences with step `h`, for every parameter in `store`. The closure must
/// rebuild the same expression each call; parameter values are restored
/// bitwise afterwards.
pub fn grad_check<F>(store: &mut ParamStore, h: f64, build: F) -> GradCheckReport
where
    F: Fn(&mut Tape, &ParamStore) -> NodeId,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, store);
    store.zero_grads();
    tape.backward(store, loss)
        .expect("grad_check: loss is non-finite");
    let analytic = store.grads().to_vec();

    let n = store.len();
    let mut numeric = vec![0.0; n];
    for i in 0..n {
        let old = store.values()[i];
        store.values_mut()[i] = old + h;
        let up = eval(&build, store);
        store.values_mut()[i] = old - h;
        let down = eval(&build, store);
        store.values_mut()[i] = old;
        numeric[i] = (up - down) / (2.0 * h);
    }

    let g_max = analytic
        .iter()
        .chain(numeric.iter())
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * g_max).max(1e-12);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        checked: n,
    };
    for i in 0..n {
        let (a, f) = (analytic[i], numeric[i]);
        let abs = (a - f).abs();
        let rel = abs / a.abs().max(f.abs()).max(floor);
        report.max_abs_err = report.max_abs_err.max(abs);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            let block = store.block_of_index(i).to_string();
            let start = store
                .block_id(&block)
                .map(|id| store.block_range(id).start)
                .unwrap_or(0);
            report.worst = Some(GradCheckWorst {
                block,
                index: i - start,
                analytic: a,
                numeric: f,
            });
        }
    }
    report
}

fn eval<F>(build: &F, store: &ParamStore) -> f64
where
    F: Fn(&mut Tape, &ParamStore) -> NodeId,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, store);
    tape.scalar(loss)
}
