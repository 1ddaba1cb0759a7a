//! GRU and conditional GRU cells plus sequence runners.
//!
//! With hidden size `d`, input size `e` and conditioning size `z`:
//!
//! ```text
//! [m; r] = σ(W_h·h + W_x·x [+ W_z·z])
//! ĥ      = tanh(W·x + U·(r ⊙ h) [+ U_z·z])
//! h'     = (1 − m) ⊙ h + m ⊙ ĥ
//! ```
//!
//! Weights are stored `out x in` and applied to row vectors as `x·Wᵀ`.
//! There are no bias terms.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Graph, NodeId, Tensor};

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, range: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-range..=range))
}

fn expect_shape(t: &Tensor, shape: (usize, usize), what: &str) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::ShapeInconsistency(format!(
            "{what} is {:?}, expected {:?}",
            t.shape(),
            shape
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    /// `2d x d`, stacked update/reset rows.
    pub w_h: Tensor,
    /// `2d x e`
    pub w_x: Tensor,
    /// `d x e`
    pub w: Tensor,
    /// `d x d`
    pub u: Tensor,
}

impl GruParams {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        GruParams {
            w_h: Tensor::zeros(2 * hidden, hidden),
            w_x: Tensor::zeros(2 * hidden, input),
            w: Tensor::zeros(hidden, input),
            u: Tensor::zeros(hidden, hidden),
        }
    }

    /// Every entry drawn from `U[-range, range]`.
    pub fn uniform(hidden: usize, input: usize, range: f64, rng: &mut impl Rng) -> Self {
        GruParams {
            w_h: uniform(rng, 2 * hidden, hidden, range),
            w_x: uniform(rng, 2 * hidden, input, range),
            w: uniform(rng, hidden, input, range),
            u: uniform(rng, hidden, hidden, range),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.u.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, e) = (self.hidden_dim(), self.input_dim());
        expect_shape(&self.w_h, (2 * d, d), "W_h")?;
        expect_shape(&self.w_x, (2 * d, e), "W_x")?;
        expect_shape(&self.w, (d, e), "W")?;
        expect_shape(&self.u, (d, d), "U")
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w_h, &self.w_x, &self.w, &self.u]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w_h, &mut self.w_x, &mut self.w, &mut self.u]
    }

    pub fn bind(&self, g: &mut Graph) -> GruNodes {
        GruNodes {
            w_h: g.leaf(self.w_h.clone()),
            w_x: g.leaf(self.w_x.clone()),
            w: g.leaf(self.w.clone()),
            u: g.leaf(self.u.clone()),
        }
    }

    /// One forward step outside any graph.
    pub fn step(&self, h_prev: &Tensor, x: &Tensor) -> Result<Tensor> {
        plain_step(self, h_prev, x, None)
    }

    /// Folds [`GruParams::step`] over the rows of `xs`, starting from `h0`
    /// (zero when `None`).
    pub fn run_sequence(&self, xs: &Tensor, h0: Option<&Tensor>) -> Result<HiddenSequence> {
        if xs.rows() == 0 {
            return Err(Error::Empty("run_sequence"));
        }
        let mut h = h0
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(1, self.hidden_dim()));
        let mut rows = Vec::with_capacity(xs.rows());
        for t in 0..xs.rows() {
            h = self.step(&h, &xs.row_tensor(t))?;
            rows.push(h.clone());
        }
        let refs: Vec<&Tensor> = rows.iter().collect();
        Ok(HiddenSequence {
            states: Tensor::stack_rows(&refs)?,
            last: h,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CondGruParams {
    pub gru: GruParams,
    /// `2d x z`
    pub w_z: Tensor,
    /// `d x z`
    pub u_z: Tensor,
}

impl CondGruParams {
    pub fn zeros(hidden: usize, input: usize, cond: usize) -> Self {
        CondGruParams {
            gru: GruParams::zeros(hidden, input),
            w_z: Tensor::zeros(2 * hidden, cond),
            u_z: Tensor::zeros(hidden, cond),
        }
    }

    pub fn uniform(
        hidden: usize,
        input: usize,
        cond: usize,
        range: f64,
        rng: &mut impl Rng,
    ) -> Self {
        CondGruParams {
            gru: GruParams::uniform(hidden, input, range, rng),
            w_z: uniform(rng, 2 * hidden, cond, range),
            u_z: uniform(rng, hidden, cond, range),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.gru.hidden_dim()
    }

    pub fn cond_dim(&self) -> usize {
        self.u_z.cols()
    }

    pub fn validate(&self) -> Result<()> {
        self.gru.validate()?;
        let (d, z) = (self.hidden_dim(), self.cond_dim());
        expect_shape(&self.w_z, (2 * d, z), "W_z")?;
        expect_shape(&self.u_z, (d, z), "U_z")
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        let [a, b, c, d] = self.gru.tensors();
        [a, b, c, d, &self.w_z, &self.u_z]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        let [a, b, c, d] = self.gru.tensors_mut();
        [a, b, c, d, &mut self.w_z, &mut self.u_z]
    }

    pub fn bind(&self, g: &mut Graph) -> CondGruNodes {
        CondGruNodes {
            gru: self.gru.bind(g),
            w_z: g.leaf(self.w_z.clone()),
            u_z: g.leaf(self.u_z.clone()),
        }
    }

    pub fn step(&self, h_prev: &Tensor, x: &Tensor, z: &Tensor) -> Result<Tensor> {
        let proj = self.project(z)?;
        plain_step(&self.gru, h_prev, x, Some(&proj))
    }

    /// Precomputes `(z·W_zᵀ, z·U_zᵀ)`, which stay fixed across a sequence.
    pub fn project(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((z.matmul_t(&self.w_z)?, z.matmul_t(&self.u_z)?))
    }

    /// Step with a projection from [`CondGruParams::project`].
    pub fn step_projected(
        &self,
        h_prev: &Tensor,
        x: &Tensor,
        proj: &(Tensor, Tensor),
    ) -> Result<Tensor> {
        plain_step(&self.gru, h_prev, x, Some(proj))
    }
}

fn plain_step(
    p: &GruParams,
    h_prev: &Tensor,
    x: &Tensor,
    cond: Option<&(Tensor, Tensor)>,
) -> Result<Tensor> {
    let d = p.hidden_dim();
    let mut gates = h_prev.matmul_t(&p.w_h)?.add(&x.matmul_t(&p.w_x)?)?;
    if let Some((gz, _)) = cond {
        gates = gates.add(gz)?;
    }
    let gates = gates.map(sigmoid);
    let m = gates.slice_cols(0, d);
    let r = gates.slice_cols(d, d);
    let mut cand = x
        .matmul_t(&p.w)?
        .add(&r.hadamard(h_prev)?.matmul_t(&p.u)?)?;
    if let Some((_, cz)) = cond {
        cand = cand.add(cz)?;
    }
    let cand = cand.map(f64::tanh);
    let keep = m.map(|v| 1.0 - v).hadamard(h_prev)?;
    keep.add(&m.hadamard(&cand)?)
}

/// Graph handles for a bound [`GruParams`].
#[derive(Clone, Copy, Debug)]
pub struct GruNodes {
    pub w_h: NodeId,
    pub w_x: NodeId,
    pub w: NodeId,
    pub u: NodeId,
}

impl GruNodes {
    pub fn ids(&self) -> [NodeId; 4] {
        [self.w_h, self.w_x, self.w, self.u]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CondGruNodes {
    pub gru: GruNodes,
    pub w_z: NodeId,
    pub u_z: NodeId,
}

impl CondGruNodes {
    pub fn ids(&self) -> [NodeId; 6] {
        let [a, b, c, d] = self.gru.ids();
        [a, b, c, d, self.w_z, self.u_z]
    }
}

/// Conditioning terms shared by every step of a conditional sequence.
#[derive(Clone, Copy, Debug)]
pub struct CondProjection {
    gate: NodeId,
    cand: NodeId,
}

/// Recorded per-step states of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenSequence {
    /// `N x d`, one row per step.
    pub states: Tensor,
    /// Sentence-level final state. For a unidirectional run this is the last
    /// row of `states`; for a bidirectional run it is the concatenation of
    /// each direction's last state.
    pub last: Tensor,
}

fn step_inner(
    g: &mut Graph,
    p: &GruNodes,
    h_prev: NodeId,
    x: NodeId,
    cond: Option<CondProjection>,
) -> Result<NodeId> {
    let d = g.value(p.u).rows();
    let gh = g.matmul_t(h_prev, p.w_h)?;
    let gx = g.matmul_t(x, p.w_x)?;
    let mut pre = g.add(gh, gx)?;
    if let Some(c) = cond {
        pre = g.add(pre, c.gate)?;
    }
    let gates = g.sigmoid(pre);
    let m = g.slice_cols(gates, 0, d)?;
    let r = g.slice_cols(gates, d, d)?;
    let cx = g.matmul_t(x, p.w)?;
    let rh = g.hadamard(r, h_prev)?;
    let ch = g.matmul_t(rh, p.u)?;
    let mut cand = g.add(cx, ch)?;
    if let Some(c) = cond {
        cand = g.add(cand, c.cand)?;
    }
    let cand = g.tanh(cand);
    let keep_gate = g.one_minus(m);
    let keep = g.hadamard(keep_gate, h_prev)?;
    let new = g.hadamard(m, cand)?;
    g.add(keep, new)
}

pub fn gru_step(g: &mut Graph, p: &GruNodes, h_prev: NodeId, x: NodeId) -> Result<NodeId> {
    step_inner(g, p, h_prev, x, None)
}

/// Projects `z` once so a whole sequence can reuse it.
pub fn cond_projection(g: &mut Graph, p: &CondGruNodes, z: NodeId) -> Result<CondProjection> {
    Ok(CondProjection {
        gate: g.matmul_t(z, p.w_z)?,
        cand: g.matmul_t(z, p.u_z)?,
    })
}

pub fn cond_gru_step(
    g: &mut Graph,
    p: &CondGruNodes,
    h_prev: NodeId,
    x: NodeId,
    z: NodeId,
) -> Result<NodeId> {
    let proj = cond_projection(g, p, z)?;
    step_inner(g, &p.gru, h_prev, x, Some(proj))
}

pub fn cond_gru_step_projected(
    g: &mut Graph,
    p: &CondGruNodes,
    h_prev: NodeId,
    x: NodeId,
    proj: CondProjection,
) -> Result<NodeId> {
    step_inner(g, &p.gru, h_prev, x, Some(proj))
}

/// Runs the cell over `xs` (each `1 x e`) and returns every state.
/// `h0` defaults to zero.
pub fn run_sequence(
    g: &mut Graph,
    p: &GruNodes,
    xs: &[NodeId],
    h0: Option<NodeId>,
) -> Result<Vec<NodeId>> {
    if xs.is_empty() {
        return Err(Error::Empty("run_sequence"));
    }
    let mut h = match h0 {
        Some(h) => h,
        None => {
            let d = g.value(p.u).rows();
            g.leaf(Tensor::zeros(1, d))
        }
    };
    let mut states = Vec::with_capacity(xs.len());
    for &x in xs {
        h = gru_step(g, p, h, x)?;
        states.push(h);
    }
    Ok(states)
}

/// States of a bidirectional run. `states[t]` is `[fwd_t ; bwd_{N+1-t}]`.
#[derive(Clone, Debug)]
pub struct BiStates {
    pub states: Vec<NodeId>,
    pub last: NodeId,
}

/// Forward cell reads `x¹..x^N`, backward cell reads `x^N..x¹`.
pub fn run_bidirectional(
    g: &mut Graph,
    fwd: &GruNodes,
    bwd: &GruNodes,
    xs: &[NodeId],
) -> Result<BiStates> {
    let (ef, eb) = (g.value(fwd.w).cols(), g.value(bwd.w).cols());
    if ef != eb {
        return Err(Error::ShapeMismatch {
            op: "run_bidirectional",
            left: g.value(fwd.w).shape(),
            right: g.value(bwd.w).shape(),
        });
    }
    let f = run_sequence(g, fwd, xs, None)?;
    let rev: Vec<NodeId> = xs.iter().rev().copied().collect();
    let b = run_sequence(g, bwd, &rev, None)?;
    let n = xs.len();
    let mut states = Vec::with_capacity(n);
    for t in 0..n {
        states.push(g.concat_cols(f[t], b[n - 1 - t])?);
    }
    let last = g.concat_cols(f[n - 1], b[n - 1])?;
    Ok(BiStates { states, last })
}

/// Graph-free bidirectional run, for inference.
pub fn run_bidirectional_values(
    fwd: &GruParams,
    bwd: &GruParams,
    xs: &Tensor,
) -> Result<HiddenSequence> {
    if fwd.input_dim() != bwd.input_dim() {
        return Err(Error::ShapeMismatch {
            op: "run_bidirectional",
            left: fwd.w.shape(),
            right: bwd.w.shape(),
        });
    }
    let f = fwd.run_sequence(xs, None)?;
    let n = xs.rows();
    let rev_rows: Vec<Tensor> = (0..n).rev().map(|t| xs.row_tensor(t)).collect();
    let rev_refs: Vec<&Tensor> = rev_rows.iter().collect();
    let b = bwd.run_sequence(&Tensor::stack_rows(&rev_refs)?, None)?;
    let mut rows = Vec::with_capacity(n);
    for t in 0..n {
        rows.push(
            f.states
                .row_tensor(t)
                .concat_cols(&b.states.row_tensor(n - 1 - t))?,
        );
    }
    let refs: Vec<&Tensor> = rows.iter().collect();
    Ok(HiddenSequence {
        states: Tensor::stack_rows(&refs)?,
        last: f.last.concat_cols(&b.last)?,
    })
}
