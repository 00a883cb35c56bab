//! Central finite-difference checks for graphs built on [`crate::autodiff`].
//!
//! The numerical side re-evaluates the forward closure from scratch for each
//! perturbed entry and never touches the reverse pass, so it stays an
//! independent oracle for every backward rule.

use rand::Rng;

use crate::autodiff::{Graph, Mat, Var};

/// Step used by the acceptance gradient suite.
pub const FD_STEP: f64 = 1e-5;

/// Uniform matrix with entries in `[-scale, scale)`.
pub fn random_mat<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_shape_simple_fn((rows, cols), || rng.gen_range(-scale..scale))
}

/// Norm-wise relative error `‖a − n‖ / max(‖a‖ + ‖n‖, tiny)`.
pub fn relative_error(analytic: &Mat, numeric: &Mat) -> f64 {
    let diff = (analytic - numeric).mapv(|v| v * v).sum().sqrt();
    let scale = analytic.mapv(|v| v * v).sum().sqrt() + numeric.mapv(|v| v * v).sum().sqrt();
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

/// Numerical gradient of `f` with respect to `inputs[which]`.
pub fn numeric_grad<F>(inputs: &[Mat], which: usize, step: f64, f: &F) -> Mat
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |inputs: &[Mat]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|m| g.leaf(m.clone())).collect();
        let out = f(&mut g, &vars);
        g.scalar(out)
    };
    let mut work = inputs.to_vec();
    let mut grad = Mat::zeros(inputs[which].dim());
    for idx in 0..grad.len() {
        let (r, c) = (idx / grad.ncols(), idx % grad.ncols());
        let orig = work[which][[r, c]];
        work[which][[r, c]] = orig + step;
        let plus = eval(&work);
        work[which][[r, c]] = orig - step;
        let minus = eval(&work);
        work[which][[r, c]] = orig;
        grad[[r, c]] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Analytic gradients of `f` with respect to every input.
pub fn analytic_grads<F>(inputs: &[Mat], f: &F) -> Vec<Mat>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.leaf(m.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    vars.iter()
        .zip(inputs)
        .map(|(v, m)| grads.wrt(*v).cloned().unwrap_or_else(|| Mat::zeros(m.dim())))
        .collect()
}

/// Worst relative error over all inputs.
pub fn max_relative_error<F>(inputs: &[Mat], step: f64, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let analytic = analytic_grads(inputs, &f);
    analytic
        .iter()
        .enumerate()
        .map(|(i, a)| relative_error(a, &numeric_grad(inputs, i, step, &f)))
        .fold(0.0, f64::max)
}

/// Panics when any input's gradient disagrees with central differences by
/// more than `tol` in relative error.
pub fn check_leaf_grads<F>(inputs: &[Mat], tol: f64, f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let analytic = analytic_grads(inputs, &f);
    for (i, a) in analytic.iter().enumerate() {
        let n = numeric_grad(inputs, i, FD_STEP, &f);
        let err = relative_error(a, &n);
        assert!(
            err < tol,
            "input {i}: relative error {err:e} exceeds {tol:e}\nanalytic {a:?}\nnumeric {n:?}"
        );
    }
}

/// Which entries [`sampled_relative_error`] perturbs.
#[derive(Clone, Copy, Debug)]
pub enum Entry {
    Input(usize, usize, usize),
    Param(crate::autodiff::ParamId, usize, usize),
}

/// Relative error between analytic and central-difference gradients over a
/// sample of `samples` entries per input and per parameter tensor. `f` sees
/// the parameters and the inputs as leaves.
pub fn sampled_relative_error<R, F>(
    rng: &mut R,
    params: &crate::autodiff::ParamStore,
    inputs: &[Mat],
    samples: usize,
    step: f64,
    f: F,
) -> f64
where
    R: Rng,
    F: Fn(&mut Graph, &crate::autodiff::ParamStore, &[Var]) -> Var,
{
    use crate::autodiff::GradBuffer;

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.leaf(m.clone())).collect();
    let out = f(&mut g, params, &vars);
    let grads = g.backward(out);
    let mut buf = GradBuffer::zeros_like(params);
    buf.accumulate(&grads);

    let mut entries = Vec::new();
    for (i, m) in inputs.iter().enumerate() {
        for _ in 0..samples.min(m.len()) {
            entries.push(Entry::Input(i, rng.gen_range(0..m.nrows()), rng.gen_range(0..m.ncols())));
        }
    }
    for id in params.ids() {
        let m = params.get(id);
        for _ in 0..samples.min(m.len()) {
            entries.push(Entry::Param(id, rng.gen_range(0..m.nrows()), rng.gen_range(0..m.ncols())));
        }
    }

    let eval = |ps: &crate::autodiff::ParamStore, inputs: &[Mat]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|m| g.leaf(m.clone())).collect();
        let out = f(&mut g, ps, &vars);
        g.scalar(out)
    };
    let mut analytic = Vec::with_capacity(entries.len());
    let mut numeric = Vec::with_capacity(entries.len());
    let mut ps = params.clone();
    let mut work = inputs.to_vec();
    for e in entries {
        let (a, n) = match e {
            Entry::Input(i, r, c) => {
                let a = grads.wrt(vars[i]).map_or(0.0, |m| m[[r, c]]);
                let orig = work[i][[r, c]];
                work[i][[r, c]] = orig + step;
                let plus = eval(&ps, &work);
                work[i][[r, c]] = orig - step;
                let minus = eval(&ps, &work);
                work[i][[r, c]] = orig;
                (a, (plus - minus) / (2.0 * step))
            }
            Entry::Param(id, r, c) => {
                let a = buf.get(id)[[r, c]];
                let orig = ps.get(id)[[r, c]];
                ps.get_mut(id)[[r, c]] = orig + step;
                let plus = eval(&ps, inputs);
                ps.get_mut(id)[[r, c]] = orig - step;
                let minus = eval(&ps, inputs);
                ps.get_mut(id)[[r, c]] = orig;
                (a, (plus - minus) / (2.0 * step))
            }
        };
        analytic.push(a);
        numeric.push(n);
    }
    let n = analytic.len();
    relative_error(
        &Mat::from_shape_vec((n, 1), analytic).expect("length"),
        &Mat::from_shape_vec((n, 1), numeric).expect("length"),
    )
}
