//! Central finite-difference gradient checks at f64, with one Richardson
//! refinement (steps h and h/2) so small gradients are not swamped by
//! truncation error.

use bootifol_core::tensor::{Graph, Module, Param, Tensor, Var};
use bootifol_core::Result;

pub const STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-3;
/// Entries whose analytic derivative is smaller than this are not scored.
pub const SMALL: f64 = 1e-6;
/// Elements checked per tensor; larger tensors are strided.
pub const PER_TENSOR: usize = 24;
/// Absolute disagreement between step widths that marks a kink.
const KINK_ABS: f64 = 1e-6;

/// Outcome of one checked function.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    /// Entries with a ReLU/hinge kink inside the step. The two step widths
    /// disagree there, so they are counted rather than scored; at most a
    /// quarter of the entries may be kinks.
    pub kinks: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel <= REL_TOL && self.kinks * 4 <= self.checked + self.kinks
    }
}

/// Model without parameters, for plain operations.
pub struct NoParams;

impl Module<f64> for NoParams {
    fn visit(&self, _: &mut dyn FnMut(&Param<f64>)) {}
    fn visit_mut(&mut self, _: &mut dyn FnMut(&mut Param<f64>)) {}
}

pub type Forward<'a, M> = dyn FnMut(&mut Graph<f64>, &mut M, &[Var]) -> Result<Var> + 'a;

fn eval<M: Module<f64>>(model: &mut M, inputs: &[Tensor<f64>], f: &mut Forward<M>) -> f64 {
    let mut g = Graph::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, model, &vars).expect("forward");
    assert_eq!(g.value(out).numel(), 1, "checked functions must be scalar");
    g.item(out)
}

const OFFSETS: [f64; 4] = [1.0, -1.0, 0.5, -0.5];

fn picks(n: usize) -> Vec<usize> {
    if n <= PER_TENSOR {
        (0..n).collect()
    } else {
        (0..PER_TENSOR).map(|i| i * n / PER_TENSOR + (i * 7) % (n / PER_TENSOR).max(1)).collect()
    }
}

fn with_param<M: Module<f64>>(model: &mut M, index: usize, f: &mut dyn FnMut(&mut Param<f64>)) {
    let mut i = 0;
    model.visit_mut(&mut |p| {
        if i == index {
            f(p);
        }
        i += 1;
    });
}

struct Tally {
    out: GradCheck,
    /// Unperturbed value, shared by every entry.
    base: f64,
}

impl Tally {
    /// `f` holds values at `x + h, x - h, x + h/2, x - h/2`.
    fn score(&mut self, label: String, analytic: f64, f: [f64; 4]) {
        let wide = (f[0] - f[1]) / (2.0 * STEP);
        let narrow = (f[2] - f[3]) / STEP;
        // A kink inside the step makes the two widths disagree far beyond
        // the O(h^2) truncation of a smooth function.
        let spread = (wide - narrow).abs();
        // A kink at the point itself biases both widths alike, but makes the
        // second difference grow like 1/h instead of staying flat.
        let curve = |a: f64, b: f64, h: f64| (a + b - 2.0 * self.base) / (h * h);
        let bend = (curve(f[2], f[3], STEP / 2.0) - curve(f[0], f[1], STEP)).abs() * STEP / 2.0;
        let scale = 1e-3 * wide.abs().max(narrow.abs());
        if (spread > scale && spread > KINK_ABS) || (bend > scale && bend > KINK_ABS) {
            self.out.kinks += 1;
            return;
        }
        let numeric = (4.0 * narrow - wide) / 3.0;
        if analytic.abs() < SMALL && numeric.abs() < 10.0 * SMALL {
            return;
        }
        self.out.checked += 1;
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        if rel > self.out.max_rel {
            self.out.max_rel = rel;
            self.out.worst = format!("{label}: analytic {analytic:.6e} numeric {numeric:.6e}");
        }
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences, over the inputs and every trainable parameter of `model`.
pub fn check<M: Module<f64>>(name: &str, model: &mut M, inputs: &[Tensor<f64>], f: &mut Forward<M>) -> GradCheck {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, model, &vars).expect("forward");
    g.backward(out).expect("backward");
    let input_grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let mut param_grads: Vec<Option<Vec<f64>>> = Vec::new();
    model.visit(&mut |p| {
        param_grads.push(if p.trainable {
            Some(g.param_grad(p).unwrap_or_else(|| vec![0.0; p.value.numel()]))
        } else {
            None
        })
    });
    drop(g);

    let base = eval(model, inputs, f);
    let mut tally = Tally {
        base,
        out: GradCheck {
            name: name.to_string(),
            checked: 0,
            kinks: 0,
            max_rel: 0.0,
            worst: String::new(),
        },
    };
    for (k, grads) in input_grads.iter().enumerate() {
        for e in picks(grads.len()) {
            let mut shifted = inputs.to_vec();
            let x0 = shifted[k].data()[e];
            let values = OFFSETS.map(|d| {
                shifted[k].data_mut()[e] = x0 + d * STEP;
                eval(model, &shifted, f)
            });
            tally.score(format!("input {k}[{e}]"), grads[e], values);
        }
    }
    for (k, grads) in param_grads.iter().enumerate() {
        let Some(grads) = grads else { continue };
        for e in picks(grads.len()) {
            let (mut x0, mut pname) = (0.0, String::new());
            with_param(model, k, &mut |p| {
                x0 = p.data()[e];
                pname = p.name.clone();
            });
            let values = OFFSETS.map(|d| {
                with_param(model, k, &mut |p| p.data_mut()[e] = x0 + d * STEP);
                eval(model, inputs, f)
            });
            with_param(model, k, &mut |p| p.data_mut()[e] = x0);
            tally.score(format!("{pname}[{e}]"), grads[e], values);
        }
    }
    tally.out
}
