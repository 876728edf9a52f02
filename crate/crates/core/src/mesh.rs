//! Memory-buffer state highways: a `B`-slot buffer written and read through
//! per-step softmax routers, replacing the fixed additive supplement of the
//! baseline recurrences.
//!
//! Step `t = -1` is the transitional cycle that turns the prelude output into
//! `h(0)`; steps `0..K` wrap the looped core. Every step owns its own write
//! and read router.

use crate::error::{shape_err, Error, Result};
use crate::numerics::{ops, Graph, Rng, Scalar, Tensor, Var};
use crate::plan::LayerPlan;

/// Buffer length used when none is configured: one slot per major state
/// (`n_loop + 1`) plus two scratch slots.
pub fn default_buffer_len(n_loop: usize) -> usize {
    n_loop + 3
}

/// Extra parameters introduced by the routers of a plan.
pub fn router_param_count(plan: &LayerPlan, d_model: usize, slots: usize, with_bias: bool) -> usize {
    let steps = plan.n_loop + 1;
    let weights = steps * d_model * slots * 2;
    if with_bias {
        weights + steps * slots * 2
    } else {
        weights
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshBuffer<T> {
    slots: Vec<Tensor<T>>,
}

impl<T: Scalar> MeshBuffer<T> {
    /// Slot 0 holds the embeddings, every other slot starts at zero.
    pub fn init(h_emb: &Tensor<T>, slots: usize) -> Result<Self> {
        if slots < 2 {
            return Err(Error::Config(format!("buffer needs at least 2 slots, got {slots}")));
        }
        h_emb.dims2()?;
        let mut v = Vec::with_capacity(slots);
        v.push(h_emb.clone());
        v.extend((1..slots).map(|_| Tensor::zeros(h_emb.shape())));
        Ok(Self { slots: v })
    }

    pub fn from_slots(slots: Vec<Tensor<T>>) -> Result<Self> {
        let first = slots
            .first()
            .ok_or_else(|| Error::Config("empty buffer".into()))?;
        if slots.iter().any(|s| s.shape() != first.shape()) {
            return Err(shape_err!("buffer slots differ in shape"));
        }
        Ok(Self { slots })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slot(&self, b: usize) -> &Tensor<T> {
        &self.slots[b]
    }

    pub fn slots(&self) -> &[Tensor<T>] {
        &self.slots
    }

    /// Frobenius norm of the buffer viewed as one tensor.
    pub fn frobenius(&self) -> f64 {
        self.slots
            .iter()
            .map(|s| ops::frobenius(s).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn check_weights(&self, h: &Tensor<T>, w: &Tensor<T>) -> Result<()> {
        let (l, _) = h.dims2()?;
        let (wl, wb) = w.dims2()?;
        if h.shape() != self.slots[0].shape() || wl != l || wb != self.slots.len() {
            return Err(shape_err!(
                "buffer {:?} x {} slots, state {:?}, weights {:?}",
                self.slots[0].shape(),
                self.slots.len(),
                h.shape(),
                w.shape()
            ));
        }
        Ok(())
    }
}

/// `m_b ← m_b + h_m ⊙ w_write[:, b]` for every slot.
pub fn mesh_write<T: Scalar>(
    buf: &MeshBuffer<T>,
    h_m: &Tensor<T>,
    w_write: &Tensor<T>,
) -> Result<MeshBuffer<T>> {
    buf.check_weights(h_m, w_write)?;
    let slots = buf
        .slots
        .iter()
        .enumerate()
        .map(|(b, m)| m.add(&ops::col_scale(h_m, w_write, b)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(MeshBuffer { slots })
}

/// `Σ_b m_b ⊙ w_read[:, b]`.
pub fn mesh_read<T: Scalar>(buf: &MeshBuffer<T>, w_read: &Tensor<T>) -> Result<Tensor<T>> {
    buf.check_weights(&buf.slots[0], w_read)?;
    let mut out = Tensor::zeros(buf.slots[0].shape());
    for (b, m) in buf.slots.iter().enumerate() {
        out.add_assign(&ops::col_scale(m, w_read, b)?)?;
    }
    Ok(out)
}

/// A biased linear map `D → B` followed by a per-token softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Router<T> {
    /// `D×B`.
    pub weight: Tensor<T>,
    /// `[B]`.
    pub bias: Tensor<T>,
}

impl<T: Scalar> Router<T> {
    pub fn zeros(d_model: usize, slots: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[d_model, slots]),
            bias: Tensor::zeros(&[slots]),
        }
    }

    /// Input-independent router whose output is (numerically) one-hot on
    /// `slot`.
    pub fn pinned(d_model: usize, slots: usize, slot: usize, logit: f64) -> Self {
        let mut r = Self::zeros(d_model, slots);
        r.bias.data_mut()[slot] = T::from_f64(logit);
        r
    }

    pub fn slots(&self) -> usize {
        self.bias.len()
    }
}

/// Routing weights `L×B` for `h`.
pub fn route<T: Scalar>(router: &Router<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
    let logits = ops::add_bias_rows(&ops::matmul(h, &router.weight)?, &router.bias)?;
    ops::softmax_rows(&logits)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterPair<T> {
    pub write: Router<T>,
    pub read: Router<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingWeights<T> {
    pub write: Tensor<T>,
    pub read: Tensor<T>,
}

impl<T: Scalar> RouterPair<T> {
    pub fn route(&self, h: &Tensor<T>) -> Result<RoutingWeights<T>> {
        Ok(RoutingWeights {
            write: route(&self.write, h)?,
            read: route(&self.read, h)?,
        })
    }
}

/// Routers for steps `t = -1, 0, …, K-1`, stored in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterSet<T> {
    steps: Vec<RouterPair<T>>,
}

pub const ROUTER_INIT_STD: f64 = 0.02;

impl<T: Scalar> RouterSet<T> {
    pub fn new(steps: Vec<RouterPair<T>>) -> Result<Self> {
        if steps.len() < 2 {
            return Err(Error::Config(
                "a router set needs the transitional step and at least one loop step".into(),
            ));
        }
        Ok(Self { steps })
    }

    pub fn zeros(d_model: usize, slots: usize, n_loop: usize) -> Self {
        let steps = (0..=n_loop)
            .map(|_| RouterPair {
                write: Router::zeros(d_model, slots),
                read: Router::zeros(d_model, slots),
            })
            .collect();
        Self { steps }
    }

    /// Weights `N(0, 0.02²)`, zero bias.
    pub fn random(rng: &mut Rng, d_model: usize, slots: usize, n_loop: usize) -> Self {
        let mut set = Self::zeros(d_model, slots, n_loop);
        for pair in &mut set.steps {
            pair.write.weight = rng.normal_tensor(&[d_model, slots], ROUTER_INIT_STD);
            pair.read.weight = rng.normal_tensor(&[d_model, slots], ROUTER_INIT_STD);
        }
        set
    }

    pub fn n_loop(&self) -> usize {
        self.steps.len() - 1
    }

    pub fn slots(&self) -> usize {
        self.steps[0].write.slots()
    }

    /// Routers of step `t ∈ {-1, 0, …, K-1}`.
    pub fn step(&self, t: isize) -> &RouterPair<T> {
        &self.steps[(t + 1) as usize]
    }

    pub fn step_mut(&mut self, t: isize) -> &mut RouterPair<T> {
        &mut self.steps[(t + 1) as usize]
    }

    pub fn iter(&self) -> impl Iterator<Item = (isize, &RouterPair<T>)> {
        self.steps.iter().enumerate().map(|(i, p)| (i as isize - 1, p))
    }

    pub fn param_count(&self) -> usize {
        self.steps
            .iter()
            .map(|p| p.write.weight.len() + p.write.bias.len() + p.read.weight.len() + p.read.bias.len())
            .sum()
    }
}

/// Everything recorded by [`mesh_run`].
#[derive(Debug, Clone)]
pub struct MeshRun<T> {
    pub h_emb: Tensor<T>,
    /// `h(0) … h(K)`.
    pub states: Vec<Tensor<T>>,
    /// Written values: the prelude output followed by `core(h(t))` for
    /// `t = 0..K`.
    pub written: Vec<Tensor<T>>,
    /// Routing weights per step, transitional step first.
    pub routing: Vec<RoutingWeights<T>>,
    /// Buffer after initialization and after every write.
    pub buffers: Vec<MeshBuffer<T>>,
}

impl<T: Scalar> MeshRun<T> {
    pub fn n_loop(&self) -> usize {
        self.states.len() - 1
    }

    pub fn final_state(&self) -> &Tensor<T> {
        self.states.last().expect("non-empty run")
    }
}

/// Compute-write-read recurrence on plain tensors.
///
/// The transitional step routes on the prelude output; loop step `t` routes
/// on `h(t)` and writes `f_core(t, h(t))`. `h(K)` is the read after the last
/// loop step.
pub fn mesh_run<T: Scalar>(
    h_emb: &Tensor<T>,
    mut f_pre: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
    mut f_core: impl FnMut(usize, &Tensor<T>) -> Result<Tensor<T>>,
    k: usize,
    routers: &RouterSet<T>,
    slots: usize,
) -> Result<MeshRun<T>> {
    if routers.n_loop() != k {
        return Err(Error::Config(format!(
            "{} loop routers for {k} loops",
            routers.n_loop()
        )));
    }
    if routers.slots() != slots {
        return Err(Error::Config(format!(
            "routers emit {} slots but the buffer has {slots}",
            routers.slots()
        )));
    }
    let mut buf = MeshBuffer::init(h_emb, slots)?;
    let mut run = MeshRun {
        h_emb: h_emb.clone(),
        states: Vec::with_capacity(k + 1),
        written: Vec::with_capacity(k + 1),
        routing: Vec::with_capacity(k + 1),
        buffers: vec![buf.clone()],
    };

    let h_pre = f_pre(h_emb)?;
    let w = routers.step(-1).route(&h_pre)?;
    buf = mesh_write(&buf, &h_pre, &w.write)?;
    let mut h = mesh_read(&buf, &w.read)?;
    run.written.push(h_pre);
    run.routing.push(w);
    run.buffers.push(buf.clone());
    run.states.push(h.clone());

    for t in 0..k {
        let h_m = f_core(t, &h)?;
        let w = routers.step(t as isize).route(&h)?;
        buf = mesh_write(&buf, &h_m, &w.write)?;
        h = mesh_read(&buf, &w.read)?;
        run.written.push(h_m);
        run.routing.push(w);
        run.buffers.push(buf.clone());
        run.states.push(h.clone());
    }
    Ok(run)
}

/// One compute-write-read step split into its retrieved history and gated
/// core output.
#[derive(Debug, Clone)]
pub struct UnrolledStep<T> {
    /// `Σ_b m_b ⊙ w_read[:, b]` on the buffer before the write.
    pub historical: Tensor<T>,
    /// `Σ_b w_write[:, b] ⊙ w_read[:, b]`, one value per token (`L×1`).
    pub gating: Tensor<T>,
    /// `historical + gating ⊙ h_m`.
    pub reconstruction: Tensor<T>,
}

pub fn unroll_step<T: Scalar>(
    buf_before: &MeshBuffer<T>,
    h_m: &Tensor<T>,
    w_write: &Tensor<T>,
    w_read: &Tensor<T>,
) -> Result<UnrolledStep<T>> {
    buf_before.check_weights(h_m, w_write)?;
    buf_before.check_weights(h_m, w_read)?;
    let historical = mesh_read(buf_before, w_read)?;
    let (l, b) = w_write.dims2()?;
    let mut gating = vec![T::ZERO; l];
    for (i, gi) in gating.iter_mut().enumerate() {
        for s in 0..b {
            *gi += w_write.at(i, s) * w_read.at(i, s);
        }
    }
    let gating = Tensor::new(&[l, 1], gating)?;
    let reconstruction = historical.add(&ops::col_scale(h_m, &gating, 0)?)?;
    Ok(UnrolledStep {
        historical,
        gating,
        reconstruction,
    })
}

/// Effective per-token coefficients expressing one state as a combination of
/// the embeddings and every value written so far.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionCoeffs {
    /// Index `s` of the reconstructed state `h(s)`.
    pub state: usize,
    /// Coefficient of `h_emb`, one per token.
    pub emb: Vec<f64>,
    /// Coefficients of the written values in write order (prelude output
    /// first). The last entry weights the most recent computation.
    pub written: Vec<Vec<f64>>,
}

impl ExpansionCoeffs {
    pub fn current(&self) -> &[f64] {
        self.written.last().expect("at least one written value")
    }

    pub fn history(&self) -> &[Vec<f64>] {
        &self.written[..self.written.len() - 1]
    }

    pub fn reconstruct<T: Scalar>(&self, run: &MeshRun<T>) -> Result<Tensor<T>> {
        let (l, d) = run.h_emb.dims2()?;
        if self.written.len() > run.written.len() {
            return Err(Error::State("run is missing written values".into()));
        }
        let mut out = vec![0.0f64; l * d];
        let sources = std::iter::once((&self.emb, &run.h_emb))
            .chain(self.written.iter().zip(&run.written));
        for (coef, src) in sources {
            for i in 0..l {
                let c = coef[i];
                for (o, v) in out[i * d..(i + 1) * d].iter_mut().zip(src.row(i)) {
                    *o += c * v.to_f64();
                }
            }
        }
        Tensor::from_f64(&[l, d], &out)
    }
}

/// Expansion coefficients of `h(0) … h(K)`, obtained by propagating each
/// slot's composition through the recorded writes and reads.
pub fn full_unroll<T: Scalar>(run: &MeshRun<T>) -> Result<Vec<ExpansionCoeffs>> {
    let steps = run.routing.len();
    if steps == 0 || run.written.len() != steps || run.states.len() != steps {
        return Err(Error::State(format!(
            "run record has {} routing steps, {} written values and {} states",
            steps,
            run.written.len(),
            run.states.len()
        )));
    }
    let (l, b) = run.routing[0].write.dims2()?;
    // comp[slot][source][token]; source 0 is h_emb, source s+1 the s-th write.
    let mut comp = vec![vec![vec![0.0f64; l]; steps + 1]; b];
    comp[0][0] = vec![1.0; l];
    let mut out = Vec::with_capacity(steps);
    for (s, w) in run.routing.iter().enumerate() {
        if w.write.dims2()? != (l, b) || w.read.dims2()? != (l, b) {
            return Err(Error::State(format!("routing shape changes at step {s}")));
        }
        for (slot, c) in comp.iter_mut().enumerate() {
            for i in 0..l {
                c[s + 1][i] += w.write.at(i, slot).to_f64();
            }
        }
        let mut coeffs = vec![vec![0.0f64; l]; s + 2];
        for (slot, c) in comp.iter().enumerate() {
            for (src, coef) in coeffs.iter_mut().enumerate() {
                for i in 0..l {
                    coef[i] += w.read.at(i, slot).to_f64() * c[src][i];
                }
            }
        }
        let emb = coeffs.remove(0);
        out.push(ExpansionCoeffs {
            state: s,
            emb,
            written: coeffs,
        });
    }
    Ok(out)
}

/// Heuristic recurrences a router set can be pinned to imitate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PinTarget {
    Base,
    Residual,
    Anchor,
    AnchorStar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PinGeometry {
    pub d_model: usize,
    pub n_loop: usize,
    pub slots: usize,
}

/// Logit margin of pinned routers; `exp(-50)` vanishes next to 1 in both f32
/// and f64.
pub const PIN_LOGIT: f64 = 50.0;

/// Input-independent, saturated routers under which [`mesh_run`] reproduces a
/// fixed recurrence.
///
/// Every write adds the full written value to one slot and reads are convex,
/// so a slot can only accumulate. Residual accumulates everything in one
/// slot, base gives every step a fresh slot. Anchor and anchor* need a slot
/// holding the anchor plus only the latest core output, which accumulation
/// can provide for a single loop step only.
pub fn pin_simulation<T: Scalar>(target: PinTarget, geo: PinGeometry) -> Result<RouterSet<T>> {
    let PinGeometry {
        d_model,
        n_loop,
        slots,
    } = geo;
    if n_loop == 0 || slots < 2 {
        return Err(Error::Config(format!(
            "pinning needs at least one loop and two slots, got {n_loop} loops and {slots} slots"
        )));
    }
    let pair = |write: usize, read: usize| RouterPair {
        write: Router::pinned(d_model, slots, write, PIN_LOGIT),
        read: Router::pinned(d_model, slots, read, PIN_LOGIT),
    };
    // h(0) is the prelude output parked in slot 1.
    let mut steps = vec![pair(1, 1)];
    match target {
        PinTarget::Residual => steps.extend((0..n_loop).map(|_| pair(1, 1))),
        PinTarget::Base => {
            if slots < n_loop + 2 {
                return Err(Error::Config(format!(
                    "base pinning needs {} slots for {n_loop} loops, got {slots}",
                    n_loop + 2
                )));
            }
            steps.extend((0..n_loop).map(|t| pair(t + 2, t + 2)));
        }
        PinTarget::Anchor | PinTarget::AnchorStar => {
            if n_loop > 1 {
                return Err(Error::Config(format!(
                    "{target:?} cannot be reproduced for {n_loop} loops: row-stochastic writes only accumulate, \
                     so no slot can hold the anchor together with just the latest core output"
                )));
            }
            let slot = if target == PinTarget::Anchor { 1 } else { 0 };
            steps.push(pair(slot, slot));
        }
    }
    RouterSet::new(steps)
}

/// Graph-side router parameters for one step.
#[derive(Debug, Clone, Copy)]
pub struct RouterVars {
    pub write_weight: Var,
    pub write_bias: Var,
    pub read_weight: Var,
    pub read_bias: Var,
}

/// States of a differentiable mesh run.
#[derive(Debug, Clone)]
pub struct MeshGraphRun {
    /// `h(0) … h(K)`.
    pub states: Vec<Var>,
    /// `(h(t), core(h(t)))` per loop step.
    pub core_io: Vec<(Var, Var)>,
}

fn graph_route<T: Scalar>(g: &mut Graph<T>, h: Var, w: Var, b: Var) -> Result<Var> {
    let logits = g.linear(h, w, b)?;
    g.softmax_rows(logits)
}

fn graph_cycle<T: Scalar>(
    g: &mut Graph<T>,
    buf: &mut [Option<Var>],
    h_m: Var,
    route_on: Var,
    r: &RouterVars,
) -> Result<Var> {
    let w_write = graph_route(g, route_on, r.write_weight, r.write_bias)?;
    let w_read = graph_route(g, route_on, r.read_weight, r.read_bias)?;
    for (b, slot) in buf.iter_mut().enumerate() {
        let add = g.col_scale(h_m, w_write, b)?;
        *slot = Some(match *slot {
            Some(m) => g.add(m, add)?,
            None => add,
        });
    }
    let mut acc: Option<Var> = None;
    for (b, slot) in buf.iter().enumerate() {
        let Some(m) = *slot else { continue };
        let part = g.col_scale(m, w_read, b)?;
        acc = Some(match acc {
            Some(a) => g.add(a, part)?,
            None => part,
        });
    }
    Ok(acc.expect("buffer is non-empty"))
}

/// Differentiable compute-write-read recurrence. `h_pre` is the prelude
/// output; `routers[0]` is the transitional step.
pub fn mesh_run_graph<T: Scalar>(
    g: &mut Graph<T>,
    h_emb: Var,
    h_pre: Var,
    routers: &[RouterVars],
    slots: usize,
    core: &mut dyn FnMut(&mut Graph<T>, usize, Var) -> Result<Var>,
) -> Result<MeshGraphRun> {
    if routers.len() < 2 {
        return Err(Error::Config("mesh needs at least one loop step".into()));
    }
    if slots < 2 {
        return Err(Error::Config(format!("buffer needs at least 2 slots, got {slots}")));
    }
    let k = routers.len() - 1;
    // Zero slots are tracked as `None`; adding to an exact zero is a copy.
    let mut buf: Vec<Option<Var>> = vec![None; slots];
    buf[0] = Some(h_emb);
    let mut run = MeshGraphRun {
        states: Vec::with_capacity(k + 1),
        core_io: Vec::with_capacity(k),
    };
    let mut h = graph_cycle(g, &mut buf, h_pre, h_pre, &routers[0])?;
    run.states.push(h);
    for (t, r) in routers[1..].iter().enumerate() {
        let h_m = core(g, t, h)?;
        run.core_io.push((h, h_m));
        h = graph_cycle(g, &mut buf, h_m, h, r)?;
        run.states.push(h);
    }
    Ok(run)
}
