//! Reverse-mode differentiation over dense matrices.

mod tape;
mod tensor;

pub use tape::{gelu_value, vec_mat, Block, ParamSet, Segment, Tape, Var};
pub use tensor::{axpy, dot, matmul_into, Mat, Real};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One sampled coordinate of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSample {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub samples: Vec<GradSample>,
}

/// Denominator floor for relative errors: coordinates whose true gradient is
/// below this magnitude are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERROR_FLOOR)
}

/// Compare analytic gradients against central differences.
///
/// At least `min_samples` coordinates are drawn, spread over every parameter
/// tensor (each tensor contributes at least one coordinate, more in proportion
/// to the budget). `loss` must build a scalar on the provided tape.
pub fn grad_check<F>(params: &ParamSet<f64>, loss: F, epsilon: f64, min_samples: usize, seed: u64) -> GradCheckReport
where
    F: Fn(&mut Tape<'_, f64>) -> Var,
{
    let analytic = {
        let mut tape = Tape::new(params);
        let l = loss(&mut tape);
        tape.backward(l)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nt = params.tensors.len();
    let per_tensor = min_samples.div_ceil(nt.max(1)).max(1);
    let mut coords = Vec::new();
    let mut spare = Vec::new();
    for (p, t) in params.tensors.iter().enumerate() {
        let mut idx: Vec<usize> = (0..t.len()).collect();
        idx.shuffle(&mut rng);
        let rest = idx.split_off(per_tensor.min(idx.len()));
        coords.extend(idx.into_iter().map(|i| (p, i)));
        spare.extend(rest.into_iter().map(|i| (p, i)));
    }
    // small tensors cannot fill their share; top up from the larger ones
    spare.shuffle(&mut rng);
    let missing = min_samples.saturating_sub(coords.len());
    coords.extend(spare.into_iter().take(missing));

    let eval = |ps: &ParamSet<f64>| {
        let mut tape = Tape::new(ps);
        let l = loss(&mut tape);
        tape.scalar(l)
    };
    let mut work = params.clone();
    let mut samples = Vec::with_capacity(coords.len());
    let mut max_rel: f64 = 0.0;
    for (p, i) in coords {
        let orig = work.tensors[p].data[i];
        work.tensors[p].data[i] = orig + epsilon;
        let up = eval(&work);
        work.tensors[p].data[i] = orig - epsilon;
        let down = eval(&work);
        work.tensors[p].data[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let a = analytic[p].data[i];
        let rel = rel_error(a, numeric);
        max_rel = max_rel.max(rel);
        samples.push(GradSample {
            param: p,
            index: i,
            analytic: a,
            numeric,
            rel_error: rel,
        });
    }
    GradCheckReport {
        max_rel_error: max_rel,
        samples,
    }
}
