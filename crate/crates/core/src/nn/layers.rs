//! Parameterized building blocks recorded onto a [`Graph`].

use super::graph::{Graph, NodeId};
use super::params::{Mat, ParamId, ParamStore, RngState};
use crate::error::{Error, Result};

/// Affine map `x·W + b` with `W: in×out` and `b: 1×out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, prefix: &str, input: usize, output: usize, rng: &mut RngState) -> Self {
        let weight = store.add_uniform(&format!("{prefix}.weight"), input, output, input, rng);
        let bias = store.add_uniform(&format!("{prefix}.bias"), 1, output, input, rng);
        Linear { weight, bias, input, output }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let xw = g.matmul(x, w);
        g.add_row(xw, b)
    }
}

/// 1-D convolution over time without padding. The kernel is stored
/// flattened as `(kernel·in_channels)×out_channels`, matching the layout
/// produced by [`Graph::unfold`].
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut RngState,
    ) -> Self {
        let fan_in = kernel * in_channels;
        let weight = store.add_uniform(&format!("{prefix}.weight"), fan_in, out_channels, fan_in, rng);
        let bias = store.add_uniform(&format!("{prefix}.bias"), 1, out_channels, fan_in, rng);
        Conv1d { weight, bias, in_channels, out_channels, kernel, stride }
    }

    /// Output length for an input of `frames` rows.
    pub fn output_len(&self, frames: usize) -> Result<usize> {
        if frames < self.kernel {
            return Err(Error::FrontEndTooShort { frames, kernel: self.kernel });
        }
        Ok((frames - self.kernel) / self.stride + 1)
    }

    /// `x: T×C_in → T'×C_out`, differentiable in `x` as well.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let c = g.value(x).ncols();
        if c != self.in_channels {
            return Err(Error::Shape(format!("conv expects {} channels, got {c}", self.in_channels)));
        }
        let windows = g.unfold(x, self.kernel, self.stride)?;
        Ok(self.apply_windows(g, windows))
    }

    /// Applies the kernel to pre-extracted windows (`N×(kernel·C_in)`).
    pub fn apply_windows(&self, g: &mut Graph, windows: NodeId) -> NodeId {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(windows, w);
        g.add_row(y, b)
    }
}

/// Gated recurrent unit with gate blocks packed as `[reset | update | candidate]`:
///
/// ```text
/// r = σ(x·W_r + b_ir + h·U_r + b_hr)
/// z = σ(x·W_z + b_iz + h·U_z + b_hz)
/// n = tanh(x·W_n + b_in + r ⊙ (h·U_n + b_hn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut RngState) -> Self {
        let w_ih = store.add_uniform(&format!("{prefix}.w_ih"), input, 3 * hidden, input, rng);
        let w_hh = store.add_uniform(&format!("{prefix}.w_hh"), hidden, 3 * hidden, hidden, rng);
        let b_ih = store.add_uniform(&format!("{prefix}.b_ih"), 1, 3 * hidden, input, rng);
        let b_hh = store.add_uniform(&format!("{prefix}.b_hh"), 1, 3 * hidden, hidden, rng);
        GruCell { w_ih, w_hh, b_ih, b_hh, input, hidden }
    }

    pub fn param_count(input: usize, hidden: usize) -> usize {
        3 * hidden * (input + hidden + 2)
    }

    pub fn step(&self, g: &mut Graph, x: NodeId, h_prev: NodeId) -> NodeId {
        let hs = self.hidden;
        let w_ih = g.param(self.w_ih);
        let w_hh = g.param(self.w_hh);
        let b_ih = g.param(self.b_ih);
        let b_hh = g.param(self.b_hh);
        let gi = g.matmul(x, w_ih);
        let gi = g.add_row(gi, b_ih);
        let gh = g.matmul(h_prev, w_hh);
        let gh = g.add_row(gh, b_hh);

        let i_rz = g.slice_cols(gi, 0, 2 * hs);
        let h_rz = g.slice_cols(gh, 0, 2 * hs);
        let rz = g.add(i_rz, h_rz);
        let rz = g.sigmoid(rz);
        let r = g.slice_cols(rz, 0, hs);
        let z = g.slice_cols(rz, hs, hs);

        let i_n = g.slice_cols(gi, 2 * hs, hs);
        let h_n = g.slice_cols(gh, 2 * hs, hs);
        let gated = g.mul(r, h_n);
        let n = g.add(i_n, gated);
        let n = g.tanh(n);

        let keep = g.mul(z, h_prev);
        let one_minus_z = g.one_minus(z);
        let fresh = g.mul(one_minus_z, n);
        g.add(fresh, keep)
    }
}

/// Stacked unidirectional GRU with inverted dropout between layers.
#[derive(Debug, Clone)]
pub struct GruStack {
    pub layers: Vec<GruCell>,
    pub dropout: f64,
}

impl GruStack {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        dropout: f64,
        rng: &mut RngState,
    ) -> Self {
        let cells = (0..layers)
            .map(|l| {
                let inp = if l == 0 { input } else { hidden };
                GruCell::new(store, &format!("{prefix}.l{l}"), inp, hidden, rng)
            })
            .collect();
        GruStack { layers: cells, dropout }
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].hidden
    }

    /// Runs every layer over `steps` (each `B×C`) from zero initial state
    /// and returns the top layer's last valid hidden state per row.
    ///
    /// `active[t][b]` says whether row `b` still has input at step `t`;
    /// inactive rows carry their previous state forward unchanged. Dropout
    /// is applied to inter-layer activations only when `dropout_rng` is
    /// given (training mode).
    pub fn run(
        &self,
        g: &mut Graph,
        steps: &[NodeId],
        active: &[Vec<bool>],
        mut dropout_rng: Option<&mut RngState>,
    ) -> Result<NodeId> {
        if steps.is_empty() {
            return Err(Error::InvalidArgument("recurrent input has no steps".into()));
        }
        let batch = g.value(steps[0]).nrows();
        let mut inputs: Vec<NodeId> = steps.to_vec();
        let mut last = None;
        for (l, cell) in self.layers.iter().enumerate() {
            let mut h = g.input(Mat::zeros((batch, cell.hidden)));
            let mut outputs = Vec::with_capacity(inputs.len());
            for (t, &x) in inputs.iter().enumerate() {
                let next = cell.step(g, x, h);
                h = if active[t].iter().all(|&a| a) {
                    next
                } else {
                    g.blend_rows(next, h, active[t].clone())
                };
                outputs.push(h);
            }
            last = Some(h);
            let is_top = l + 1 == self.layers.len();
            if !is_top {
                if let (Some(rng), true) = (dropout_rng.as_deref_mut(), self.dropout > 0.0) {
                    outputs = outputs
                        .into_iter()
                        .map(|o| dropout(g, o, self.dropout, rng))
                        .collect();
                }
            }
            inputs = outputs;
        }
        Ok(last.expect("at least one layer"))
    }
}

/// Inverted dropout: zero with probability `p`, scale survivors by `1/(1-p)`.
pub fn dropout(g: &mut Graph, x: NodeId, p: f64, rng: &mut RngState) -> NodeId {
    let keep = 1.0 / (1.0 - p);
    let mask = Mat::from_shape_fn(g.value(x).dim(), |_| {
        if rng.uniform(0.0, 1.0) < p {
            0.0
        } else {
            keep
        }
    });
    let m = g.input(mask);
    g.mul(x, m)
}
