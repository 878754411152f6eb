//! Unfolded mean-field and loopy belief propagation layers.
//!
//! Each step is a pure kernel over flat buffers (`M×2` beliefs, `E×4`
//! pairwise tables, `D×2` directed messages with `D = 2E`). The same kernels
//! back the plain API and the tape ops, whose backward rules are the
//! hand-derived vector-Jacobian products of those kernels.

use std::sync::Arc;

use crate::autodiff::{CustomOp, Tape, Var};
use crate::crf::{Beliefs, GridGraph, PotentialTable};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Schedule {
    /// Every node reads the previous step's beliefs.
    #[default]
    Parallel,
    /// Nodes update in index order and read the latest neighbor values.
    Sequential,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferenceConfig {
    pub steps: usize,
    pub schedule: Schedule,
    /// LBP only: `m ← (1-λ)·update + λ·previous`.
    pub damping: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            steps: 3,
            schedule: Schedule::Parallel,
            damping: 0.0,
        }
    }
}

impl InferenceConfig {
    pub fn with_steps(steps: usize) -> Self {
        InferenceConfig {
            steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.damping) {
            return Err(Error::Config(format!("damping {} not in [0, 1)", self.damping)));
        }
        Ok(())
    }
}

/// Directed messages `m_{i→j}(z_j)`, row `d` per [`GridGraph::directed_edge`].
#[derive(Clone, Debug, PartialEq)]
pub struct Messages {
    pub values: Vec<[f64; 2]>,
    pub step: usize,
}

#[derive(Clone, Debug)]
pub struct MeanFieldOutput {
    pub beliefs: Beliefs,
    /// `b^(0) ..= b^(T)`.
    pub trajectory: Vec<Beliefs>,
}

#[derive(Clone, Debug)]
pub struct LbpOutput {
    pub beliefs: Beliefs,
    pub messages: Messages,
}

const NORM_TOL: f64 = 1e-12;

fn flatten<const N: usize>(rows: &[[f64; N]]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

fn unflatten2(v: &[f64]) -> Vec<[f64; 2]> {
    v.chunks(2).map(|c| [c[0], c[1]]).collect()
}

fn check_inputs(g: &GridGraph, unary: &[[f64; 2]], pair_len: usize) -> Result<()> {
    if unary.len() != g.num_nodes() || pair_len != g.num_edges() {
        return Err(Error::shape(
            "inference inputs",
            &[unary.len(), pair_len],
            &[g.num_nodes(), g.num_edges()],
        ));
    }
    if !unary.iter().flatten().all(|v| v.is_finite() && *v > 0.0) {
        return Err(Error::Config("unary potentials must be strictly positive".into()));
    }
    Ok(())
}

fn debug_check_normalized(buf: &[f64]) {
    if cfg!(debug_assertions) {
        for c in buf.chunks(2) {
            assert!((c[0] + c[1] - 1.0).abs() <= NORM_TOL, "row {c:?} not normalized");
        }
    }
}

#[inline]
fn directed_in(from: usize, to: usize, e: usize) -> usize {
    if from < to {
        2 * e
    } else {
        2 * e + 1
    }
}

/// Normalizes `[ln a_0, ln a_1]` into probabilities.
#[inline]
fn normalize_log2(l0: f64, l1: f64) -> [f64; 2] {
    let mx = l0.max(l1);
    let (a0, a1) = ((l0 - mx).exp(), (l1 - mx).exp());
    let s = a0 + a1;
    [a0 / s, a1 / s]
}

// ---------------------------------------------------------------- mean field

/// `s_i(z_i) = Σ_{j∈N_i} Σ_{z_j} b_j(z_j) ln ψ_ij(z_i, z_j)`.
#[inline]
fn mf_field(g: &GridGraph, i: usize, log_pair: &[f64], b: &[f64]) -> [f64; 2] {
    let mut s = [0.0; 2];
    for &(j, e) in g.incident(i) {
        let t: &[f64; 4] = log_pair[4 * e..4 * e + 4].try_into().unwrap();
        for (zi, si) in s.iter_mut().enumerate() {
            for zj in 0..2 {
                *si += b[2 * j + zj] * PotentialTable::oriented(t, i, j, zi, zj);
            }
        }
    }
    s
}

#[inline]
fn mf_node_value(g: &GridGraph, i: usize, unary: &[f64], log_pair: &[f64], b: &[f64]) -> [f64; 2] {
    let s = mf_field(g, i, log_pair, b);
    normalize_log2(unary[2 * i].ln() + s[0], unary[2 * i + 1].ln() + s[1])
}

fn mf_parallel_forward(g: &GridGraph, unary: &[f64], log_pair: &[f64], prev: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; prev.len()];
    for i in 0..g.num_nodes() {
        let v = mf_node_value(g, i, unary, log_pair, prev);
        out[2 * i] = v[0];
        out[2 * i + 1] = v[1];
    }
    debug_check_normalized(&out);
    out
}

fn mf_node_forward(g: &GridGraph, node: usize, unary: &[f64], log_pair: &[f64], cur: &[f64]) -> Vec<f64> {
    let mut out = cur.to_vec();
    let v = mf_node_value(g, node, unary, log_pair, cur);
    out[2 * node] = v[0];
    out[2 * node + 1] = v[1];
    debug_check_normalized(&out[2 * node..2 * node + 2]);
    out
}

/// Backward of one node's update `b_i = normalize(u_i ⊙ exp(s_i(b_src)))`.
#[allow(clippy::too_many_arguments)]
fn mf_node_backward(
    g: &GridGraph,
    i: usize,
    unary: &[f64],
    log_pair: &[f64],
    src: &[f64],
    b_i: [f64; 2],
    g_b: [f64; 2],
    gu: &mut [f64],
    gl: &mut [f64],
    gsrc: &mut [f64],
) {
    let dot = g_b[0] * b_i[0] + g_b[1] * b_i[1];
    let g_s = [b_i[0] * (g_b[0] - dot), b_i[1] * (g_b[1] - dot)];
    for z in 0..2 {
        gu[2 * i + z] += g_s[z] / unary[2 * i + z];
    }
    for &(j, e) in g.incident(i) {
        for (zi, &gs) in g_s.iter().enumerate() {
            for zj in 0..2 {
                let idx = if i < j { zi * 2 + zj } else { zj * 2 + zi };
                gl[4 * e + idx] += gs * src[2 * j + zj];
                gsrc[2 * j + zj] += gs * log_pair[4 * e + idx];
            }
        }
    }
}

struct MfParallelOp {
    graph: Arc<GridGraph>,
}

impl CustomOp for MfParallelOp {
    fn name(&self) -> &'static str {
        "mean_field_step"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (u, l, prev) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let (mut gu, mut gl, mut gp) = (vec![0.0; u.len()], vec![0.0; l.len()], vec![0.0; prev.len()]);
        let b = output.data();
        let g = grad.data();
        for i in 0..self.graph.num_nodes() {
            mf_node_backward(
                &self.graph,
                i,
                u,
                l,
                prev,
                [b[2 * i], b[2 * i + 1]],
                [g[2 * i], g[2 * i + 1]],
                &mut gu,
                &mut gl,
                &mut gp,
            );
        }
        vec![
            Tensor::from_parts(inputs[0].shape().to_vec(), gu),
            Tensor::from_parts(inputs[1].shape().to_vec(), gl),
            Tensor::from_parts(inputs[2].shape().to_vec(), gp),
        ]
    }
}

struct MfNodeOp {
    graph: Arc<GridGraph>,
    node: usize,
}

impl CustomOp for MfNodeOp {
    fn name(&self) -> &'static str {
        "mean_field_node_update"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (u, l, cur) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let i = self.node;
        let mut gu = vec![0.0; u.len()];
        let mut gl = vec![0.0; l.len()];
        // untouched rows pass straight through; row i of the input is overwritten
        let mut gc = grad.data().to_vec();
        gc[2 * i] = 0.0;
        gc[2 * i + 1] = 0.0;
        let b = output.data();
        let g = grad.data();
        mf_node_backward(
            &self.graph,
            i,
            u,
            l,
            cur,
            [b[2 * i], b[2 * i + 1]],
            [g[2 * i], g[2 * i + 1]],
            &mut gu,
            &mut gl,
            &mut gc,
        );
        vec![
            Tensor::from_parts(inputs[0].shape().to_vec(), gu),
            Tensor::from_parts(inputs[1].shape().to_vec(), gl),
            Tensor::from_parts(inputs[2].shape().to_vec(), gc),
        ]
    }
}

fn mf_sweep(g: &GridGraph, schedule: Schedule, unary: &[f64], log_pair: &[f64], prev: &[f64]) -> Vec<f64> {
    match schedule {
        Schedule::Parallel => mf_parallel_forward(g, unary, log_pair, prev),
        Schedule::Sequential => {
            let mut cur = prev.to_vec();
            for i in 0..g.num_nodes() {
                let v = mf_node_value(g, i, unary, log_pair, &cur);
                cur[2 * i] = v[0];
                cur[2 * i + 1] = v[1];
            }
            debug_check_normalized(&cur);
            cur
        }
    }
}

/// Mean-field inference from `b^(0) = ψ_i` for `cfg.steps` sweeps.
pub fn mean_field_infer(
    g: &GridGraph,
    unary: &[[f64; 2]],
    log_pairwise: &[[f64; 4]],
    cfg: &InferenceConfig,
) -> Result<MeanFieldOutput> {
    cfg.validate()?;
    check_inputs(g, unary, log_pairwise.len())?;
    let u = flatten(unary);
    let l = flatten(log_pairwise);
    let mut cur = u.clone();
    let mut trajectory = vec![Beliefs(unary.to_vec())];
    for _ in 0..cfg.steps {
        cur = mf_sweep(g, cfg.schedule, &u, &l, &cur);
        trajectory.push(Beliefs(unflatten2(&cur)));
    }
    Ok(MeanFieldOutput {
        beliefs: trajectory.last().unwrap().clone(),
        trajectory,
    })
}

/// Mean-field inference on the tape. Returns the trajectory `b^(0) ..= b^(T)`;
/// `b^(0)` is `unary` itself.
pub fn mean_field_on_tape(
    tape: &mut Tape<'_>,
    g: &Arc<GridGraph>,
    unary: Var,
    log_pairwise: Var,
    cfg: &InferenceConfig,
) -> Result<Vec<Var>> {
    cfg.validate()?;
    let (m, e) = (g.num_nodes(), g.num_edges());
    if tape.shape(unary) != [m, 2] || tape.shape(log_pairwise) != [e, 4] {
        return Err(Error::shape("mean_field", tape.shape(unary), tape.shape(log_pairwise)));
    }
    let mut traj = vec![unary];
    let mut cur = unary;
    for _ in 0..cfg.steps {
        cur = match cfg.schedule {
            Schedule::Parallel => {
                let out = mf_parallel_forward(
                    g,
                    tape.value(unary).data(),
                    tape.value(log_pairwise).data(),
                    tape.value(cur).data(),
                );
                let t = Tensor::from_parts(vec![m, 2], out);
                tape.custom(
                    vec![unary, log_pairwise, cur],
                    t,
                    Box::new(MfParallelOp { graph: g.clone() }),
                )
            }
            Schedule::Sequential => {
                for node in 0..m {
                    let out = mf_node_forward(
                        g,
                        node,
                        tape.value(unary).data(),
                        tape.value(log_pairwise).data(),
                        tape.value(cur).data(),
                    );
                    let t = Tensor::from_parts(vec![m, 2], out);
                    cur = tape.custom(
                        vec![unary, log_pairwise, cur],
                        t,
                        Box::new(MfNodeOp {
                            graph: g.clone(),
                            node,
                        }),
                    );
                }
                cur
            }
        };
        traj.push(cur);
    }
    Ok(traj)
}

// ------------------------------------------------------------ loopy BP

/// `Π_{k∈N_i, k≠skip} m_{k→i}(z)` for both `z`.
#[inline]
fn incoming_product(g: &GridGraph, i: usize, msgs: &[f64], skip: Option<usize>) -> [f64; 2] {
    let mut p = [1.0, 1.0];
    for &(k, e) in g.incident(i) {
        if Some(k) == skip {
            continue;
        }
        let d = directed_in(k, i, e);
        p[0] *= msgs[2 * d];
        p[1] *= msgs[2 * d + 1];
    }
    p
}

/// Unnormalized message `r(z_j) = Σ_{z_i} ψ(z_i, z_j) P(z_i)` and `P`.
#[inline]
fn lbp_raw_message(g: &GridGraph, d: usize, unary: &[f64], pair: &[f64], msgs: &[f64]) -> ([f64; 2], [f64; 2]) {
    let (i, j) = g.directed_edge(d);
    let e = d / 2;
    let t: &[f64; 4] = pair[4 * e..4 * e + 4].try_into().unwrap();
    let prod = incoming_product(g, i, msgs, Some(j));
    let p = [unary[2 * i] * prod[0], unary[2 * i + 1] * prod[1]];
    let mut r = [0.0; 2];
    for (zj, rj) in r.iter_mut().enumerate() {
        for (zi, pi) in p.iter().enumerate() {
            *rj += PotentialTable::oriented(t, i, j, zi, zj) * pi;
        }
    }
    (r, p)
}

fn lbp_step_forward(g: &GridGraph, unary: &[f64], pair: &[f64], msgs: &[f64], damping: f64) -> Vec<f64> {
    let mut out = vec![0.0; msgs.len()];
    for d in 0..g.num_directed() {
        let (r, _) = lbp_raw_message(g, d, unary, pair, msgs);
        let s = r[0] + r[1];
        for z in 0..2 {
            out[2 * d + z] = (1.0 - damping) * (r[z] / s) + damping * msgs[2 * d + z];
        }
    }
    debug_check_normalized(&out);
    out
}

fn lbp_beliefs_forward(g: &GridGraph, unary: &[f64], msgs: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; unary.len()];
    for i in 0..g.num_nodes() {
        let prod = incoming_product(g, i, msgs, None);
        let a = [unary[2 * i] * prod[0], unary[2 * i + 1] * prod[1]];
        let s = a[0] + a[1];
        out[2 * i] = a[0] / s;
        out[2 * i + 1] = a[1] / s;
    }
    debug_check_normalized(&out);
    out
}

struct LbpStepOp {
    graph: Arc<GridGraph>,
    damping: f64,
}

impl CustomOp for LbpStepOp {
    fn name(&self) -> &'static str {
        "lbp_message_step"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let g = &*self.graph;
        let (u, pair, msgs) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let (mut gu, mut gpair, mut gm) = (vec![0.0; u.len()], vec![0.0; pair.len()], vec![0.0; msgs.len()]);
        let lam = self.damping;
        for d in 0..g.num_directed() {
            let go = [grad.data()[2 * d], grad.data()[2 * d + 1]];
            gm[2 * d] += lam * go[0];
            gm[2 * d + 1] += lam * go[1];
            let (i, j) = g.directed_edge(d);
            let e = d / 2;
            let (r, p) = lbp_raw_message(g, d, u, pair, msgs);
            let s = r[0] + r[1];
            let norm = [r[0] / s, r[1] / s];
            let gn = [(1.0 - lam) * go[0], (1.0 - lam) * go[1]];
            let dot = gn[0] * norm[0] + gn[1] * norm[1];
            let gr = [(gn[0] - dot) / s, (gn[1] - dot) / s];
            let t: &[f64; 4] = pair[4 * e..4 * e + 4].try_into().unwrap();
            let mut gp = [0.0; 2];
            for zi in 0..2 {
                for (zj, &grj) in gr.iter().enumerate() {
                    let idx = if i < j { zi * 2 + zj } else { zj * 2 + zi };
                    gpair[4 * e + idx] += grj * p[zi];
                    gp[zi] += grj * t[idx];
                }
            }
            let prod = incoming_product(g, i, msgs, Some(j));
            for z in 0..2 {
                gu[2 * i + z] += gp[z] * prod[z];
            }
            for &(k, ek) in g.incident(i) {
                if k == j {
                    continue;
                }
                // product over the other incoming messages, excluding j and k
                let mut rest = [u[2 * i], u[2 * i + 1]];
                for &(k2, e2) in g.incident(i) {
                    if k2 == j || k2 == k {
                        continue;
                    }
                    let d2 = directed_in(k2, i, e2);
                    rest[0] *= msgs[2 * d2];
                    rest[1] *= msgs[2 * d2 + 1];
                }
                let dk = directed_in(k, i, ek);
                for z in 0..2 {
                    gm[2 * dk + z] += gp[z] * rest[z];
                }
            }
        }
        vec![
            Tensor::from_parts(inputs[0].shape().to_vec(), gu),
            Tensor::from_parts(inputs[1].shape().to_vec(), gpair),
            Tensor::from_parts(inputs[2].shape().to_vec(), gm),
        ]
    }
}

struct LbpBeliefOp {
    graph: Arc<GridGraph>,
}

impl CustomOp for LbpBeliefOp {
    fn name(&self) -> &'static str {
        "lbp_beliefs"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let g = &*self.graph;
        let (u, msgs) = (inputs[0].data(), inputs[1].data());
        let (mut gu, mut gm) = (vec![0.0; u.len()], vec![0.0; msgs.len()]);
        let b = output.data();
        for i in 0..g.num_nodes() {
            let prod = incoming_product(g, i, msgs, None);
            let s = u[2 * i] * prod[0] + u[2 * i + 1] * prod[1];
            let gb = [grad.data()[2 * i], grad.data()[2 * i + 1]];
            let dot = gb[0] * b[2 * i] + gb[1] * b[2 * i + 1];
            let ga = [(gb[0] - dot) / s, (gb[1] - dot) / s];
            for z in 0..2 {
                gu[2 * i + z] += ga[z] * prod[z];
            }
            for &(k, ek) in g.incident(i) {
                let rest = incoming_product(g, i, msgs, Some(k));
                let dk = directed_in(k, i, ek);
                for z in 0..2 {
                    gm[2 * dk + z] += ga[z] * u[2 * i + z] * rest[z];
                }
            }
        }
        vec![
            Tensor::from_parts(inputs[0].shape().to_vec(), gu),
            Tensor::from_parts(inputs[1].shape().to_vec(), gm),
        ]
    }
}

/// Loopy BP with synchronous updates from uniform messages.
pub fn lbp_infer(g: &GridGraph, potentials: &PotentialTable, cfg: &InferenceConfig) -> Result<LbpOutput> {
    cfg.validate()?;
    check_inputs(g, &potentials.unary, potentials.pairwise.len())?;
    potentials.check(g)?;
    let u = flatten(&potentials.unary);
    let pair = flatten(&potentials.pairwise);
    let mut msgs = vec![0.5; 2 * g.num_directed()];
    for _ in 0..cfg.steps {
        msgs = lbp_step_forward(g, &u, &pair, &msgs, cfg.damping);
    }
    let b = lbp_beliefs_forward(g, &u, &msgs);
    Ok(LbpOutput {
        beliefs: Beliefs(unflatten2(&b)),
        messages: Messages {
            values: unflatten2(&msgs),
            step: cfg.steps,
        },
    })
}

/// Loopy BP on the tape; returns the final `M×2` beliefs.
pub fn lbp_on_tape(
    tape: &mut Tape<'_>,
    g: &Arc<GridGraph>,
    unary: Var,
    pairwise: Var,
    cfg: &InferenceConfig,
) -> Result<Var> {
    cfg.validate()?;
    let (m, e) = (g.num_nodes(), g.num_edges());
    if tape.shape(unary) != [m, 2] || tape.shape(pairwise) != [e, 4] {
        return Err(Error::shape("lbp", tape.shape(unary), tape.shape(pairwise)));
    }
    let mut msgs = tape.constant(Tensor::full(&[g.num_directed(), 2], 0.5));
    for _ in 0..cfg.steps {
        let out = lbp_step_forward(
            g,
            tape.value(unary).data(),
            tape.value(pairwise).data(),
            tape.value(msgs).data(),
            cfg.damping,
        );
        let t = Tensor::from_parts(vec![g.num_directed(), 2], out);
        msgs = tape.custom(
            vec![unary, pairwise, msgs],
            t,
            Box::new(LbpStepOp {
                graph: g.clone(),
                damping: cfg.damping,
            }),
        );
    }
    let b = lbp_beliefs_forward(g, tape.value(unary).data(), tape.value(msgs).data());
    let t = Tensor::from_parts(vec![m, 2], b);
    Ok(tape.custom(vec![unary, msgs], t, Box::new(LbpBeliefOp { graph: g.clone() })))
}

/// `p(z_i = 1)` per node.
pub fn beliefs_to_attention(b: &Beliefs) -> Vec<f64> {
    b.attention()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crf::{build_grid, exact_marginals};

    #[test]
    fn mf_zero_steps_is_unary() {
        let g = build_grid(2, 2).unwrap();
        let unary = vec![[0.1, 0.9], [0.6, 0.4], [0.5, 0.5], [0.25, 0.75]];
        let lp = vec![[0.3, -0.1, 0.2, 0.5]; 4];
        let out = mean_field_infer(&g, &unary, &lp, &InferenceConfig::with_steps(0)).unwrap();
        assert_eq!(out.beliefs.0, unary);
        assert_eq!(out.trajectory.len(), 1);
    }

    #[test]
    fn mf_chain_hand_value() {
        let g = build_grid(1, 2).unwrap();
        let unary = vec![[0.1, 0.9], [0.5, 0.5]];
        let lp = vec![[0.3, -0.3, -0.3, 0.3]];
        let out = mean_field_infer(&g, &unary, &lp, &InferenceConfig::with_steps(1)).unwrap();
        // node 1: s(1) = 0.9*0.3 + 0.1*(-0.3) = 0.24, s(0) = -0.24
        let expect = 1.0 / (1.0 + (-0.48f64).exp());
        assert!((out.beliefs.0[1][1] - expect).abs() < 1e-15);
        assert!((expect - 0.6177).abs() < 1e-4);
    }

    #[test]
    fn lbp_zero_steps_is_normalized_unary() {
        let g = build_grid(3, 3).unwrap();
        let unary: Vec<[f64; 2]> = (0..9).map(|i| [0.2 + 0.05 * i as f64, 0.7]).collect();
        let p = PotentialTable::new(unary.clone(), vec![[1.5, 0.5, 0.8, 2.0]; 12]);
        let out = lbp_infer(&g, &p, &InferenceConfig::with_steps(0)).unwrap();
        for (b, u) in out.beliefs.0.iter().zip(&unary) {
            assert!((b[1] - u[1] / (u[0] + u[1])).abs() < 1e-15);
        }
    }

    #[test]
    fn lbp_exact_on_short_chain() {
        let g = build_grid(1, 4).unwrap();
        let unary = vec![[0.3, 0.7], [0.8, 0.2], [0.45, 0.55], [0.1, 0.9]];
        let pair = vec![[2.0, 0.5, 0.7, 1.3], [0.4, 1.9, 1.1, 0.6], [1.4, 0.9, 0.3, 2.2]];
        let p = PotentialTable::new(unary, pair);
        let out = lbp_infer(&g, &p, &InferenceConfig::with_steps(4)).unwrap();
        let (exact, _) = exact_marginals(&g, &p).unwrap();
        assert!(out.beliefs.max_abs_diff(&exact) < 1e-10);
        assert_eq!(out.messages.values.len(), 6);
    }

    #[test]
    fn rejects_bad_config() {
        let g = build_grid(1, 2).unwrap();
        let p = PotentialTable::uniform_pairwise(&g, &[0.5, 0.5], 1.0);
        let cfg = InferenceConfig {
            damping: 1.0,
            ..InferenceConfig::default()
        };
        assert!(lbp_infer(&g, &p, &cfg).is_err());
        assert!(mean_field_infer(&g, &[[0.5, 0.5]], &[], &InferenceConfig::default()).is_err());
    }
}
