use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayViewMut1, Axis};
use rand::Rng;

use super::{join, sigmoid, uniform, NamedView, NamedViewMut, Parameters};

/// Single-layer LSTM over packed variable-length sequences.
///
/// Sequences are stored back to back in one `(tokens × input)` matrix with
/// boundaries in `offsets`. At step `t` only sequences longer than `t` are
/// updated; shorter ones carry their state unchanged, so the final state of
/// every sequence is the hidden state at its own last valid step. Gate order
/// in the fused weights is input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    /// `input × 4·hidden`
    pub w_input: Array2<f32>,
    /// `hidden × 4·hidden`
    pub w_hidden: Array2<f32>,
    pub bias: Array1<f32>,
}

struct Step {
    active: Vec<usize>,
    tokens: Vec<usize>,
    gates: Array2<f32>,
    c_prev: Array2<f32>,
    h_prev: Array2<f32>,
    tanh_c: Array2<f32>,
}

pub struct LstmCache {
    input: Array2<f32>,
    steps: Vec<Step>,
}

fn lengths(offsets: &[usize]) -> Vec<usize> {
    offsets.windows(2).map(|w| w[1] - w[0]).collect()
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, input: usize, hidden: usize) -> Self {
        let bound = 1.0 / (hidden as f32).sqrt();
        Self {
            w_input: uniform(rng, (input, 4 * hidden), bound),
            w_hidden: uniform(rng, (hidden, 4 * hidden), bound),
            bias: uniform(rng, 4 * hidden, bound),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hidden.nrows()
    }

    /// Final hidden state of every sequence, `(sequences × hidden)`.
    pub fn infer(&self, x: &Array2<f32>, offsets: &[usize]) -> Array2<f32> {
        self.run(x, offsets, false).0
    }

    pub fn forward(&self, x: &Array2<f32>, offsets: &[usize]) -> (Array2<f32>, LstmCache) {
        let (h, steps) = self.run(x, offsets, true);
        (
            h,
            LstmCache {
                input: x.clone(),
                steps,
            },
        )
    }

    fn run(&self, x: &Array2<f32>, offsets: &[usize], keep: bool) -> (Array2<f32>, Vec<Step>) {
        let hs = self.hidden_size();
        let lens = lengths(offsets);
        let batch = lens.len();
        let max_len = lens.iter().copied().max().unwrap_or(0);
        let mut pre = x.dot(&self.w_input);
        pre += &self.bias;
        let mut h = Array2::<f32>::zeros((batch, hs));
        let mut c = Array2::<f32>::zeros((batch, hs));
        let mut steps = Vec::new();
        for t in 0..max_len {
            let active: Vec<usize> = (0..batch).filter(|&b| lens[b] > t).collect();
            let tokens: Vec<usize> = active.iter().map(|&b| offsets[b] + t).collect();
            let h_prev = h.select(Axis(0), &active);
            let c_prev = c.select(Axis(0), &active);
            let mut gates = pre.select(Axis(0), &tokens);
            general_mat_mul(1.0, &h_prev, &self.w_hidden, 1.0, &mut gates);
            let mut tanh_c = Array2::zeros((active.len(), hs));
            for (r, &b) in active.iter().enumerate() {
                let mut g = gates.row_mut(r);
                activate(&mut g, hs);
                let g = g.view();
                let mut c_row = c.row_mut(b);
                let mut h_row = h.row_mut(b);
                for j in 0..hs {
                    let cj = g[hs + j] * c_prev[[r, j]] + g[j] * g[2 * hs + j];
                    let tc = cj.tanh();
                    c_row[j] = cj;
                    h_row[j] = g[3 * hs + j] * tc;
                    tanh_c[[r, j]] = tc;
                }
            }
            if keep {
                steps.push(Step {
                    active,
                    tokens,
                    gates,
                    c_prev,
                    h_prev,
                    tanh_c,
                });
            }
        }
        (h, steps)
    }

    /// Backpropagates `d_final` (gradient w.r.t. each sequence's final hidden
    /// state) through time. Returns the gradient w.r.t. the packed input.
    pub fn backward(&self, cache: &LstmCache, d_final: &Array2<f32>, grad: &mut Lstm) -> Array2<f32> {
        let hs = self.hidden_size();
        let tokens_total = cache.input.nrows();
        let mut dh_state = d_final.clone();
        let mut dc_state = Array2::<f32>::zeros(d_final.raw_dim());
        let mut d_pre = Array2::<f32>::zeros((tokens_total, 4 * hs));
        for step in cache.steps.iter().rev() {
            let n = step.active.len();
            let mut d_gates = Array2::<f32>::zeros((n, 4 * hs));
            let mut dc_prev = Array2::<f32>::zeros((n, hs));
            for (r, &b) in step.active.iter().enumerate() {
                let g = step.gates.row(r);
                let dh = dh_state.row(b);
                let dc = dc_state.row(b);
                let mut da = d_gates.row_mut(r);
                for j in 0..hs {
                    let (i, f, cg, o) = (g[j], g[hs + j], g[2 * hs + j], g[3 * hs + j]);
                    let tc = step.tanh_c[[r, j]];
                    let d_o = dh[j] * tc;
                    let dct = dc[j] + dh[j] * o * (1.0 - tc * tc);
                    da[j] = dct * cg * i * (1.0 - i);
                    da[hs + j] = dct * step.c_prev[[r, j]] * f * (1.0 - f);
                    da[2 * hs + j] = dct * i * (1.0 - cg * cg);
                    da[3 * hs + j] = d_o * o * (1.0 - o);
                    dc_prev[[r, j]] = dct * f;
                }
            }
            general_mat_mul(1.0, &step.h_prev.t(), &d_gates, 1.0, &mut grad.w_hidden);
            let dh_prev = d_gates.dot(&self.w_hidden.t());
            for (r, (&b, &tok)) in step.active.iter().zip(&step.tokens).enumerate() {
                dh_state.row_mut(b).assign(&dh_prev.row(r));
                dc_state.row_mut(b).assign(&dc_prev.row(r));
                d_pre.row_mut(tok).assign(&d_gates.row(r));
            }
        }
        general_mat_mul(1.0, &cache.input.t(), &d_pre, 1.0, &mut grad.w_input);
        grad.bias += &d_pre.sum_axis(Axis(0));
        d_pre.dot(&self.w_input.t())
    }
}

fn activate(g: &mut ArrayViewMut1<f32>, hs: usize) {
    g.slice_mut(s![..2 * hs]).mapv_inplace(sigmoid);
    g.slice_mut(s![2 * hs..3 * hs]).mapv_inplace(f32::tanh);
    g.slice_mut(s![3 * hs..]).mapv_inplace(sigmoid);
}


impl Parameters for Lstm {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        out.push((join(prefix, "w_input"), self.w_input.view().into_dyn()));
        out.push((join(prefix, "w_hidden"), self.w_hidden.view().into_dyn()));
        out.push((join(prefix, "bias"), self.bias.view().into_dyn()));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        out.push((join(prefix, "w_input"), self.w_input.view_mut().into_dyn()));
        out.push((join(prefix, "w_hidden"), self.w_hidden.view_mut().into_dyn()));
        out.push((join(prefix, "bias"), self.bias.view_mut().into_dyn()));
    }
}
