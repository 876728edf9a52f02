//! Fixed and learnable state-passing rules for the looped core.
//!
//! Each rule produces `h(t+1) = core(h(t)) + supplement`, where the
//! supplement is zero, `h(t)`, `h(0)` or the raw embeddings, or a learned
//! linear combination of those terms.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Var};
use crate::plan::LayerPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Base,
    Residual,
    Anchor,
    AnchorStar,
    StaticComb,
    DynamicComb,
    Mesh,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 7] = [
        SchemeKind::Base,
        SchemeKind::Residual,
        SchemeKind::Anchor,
        SchemeKind::AnchorStar,
        SchemeKind::StaticComb,
        SchemeKind::DynamicComb,
        SchemeKind::Mesh,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SchemeKind::Base => "base",
            SchemeKind::Residual => "residual",
            SchemeKind::Anchor => "anchor",
            SchemeKind::AnchorStar => "anchor_star",
            SchemeKind::StaticComb => "static_comb",
            SchemeKind::DynamicComb => "dynamic_comb",
            SchemeKind::Mesh => "mesh",
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchemeKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown scheme '{s}' (expected one of base, residual, anchor, anchor_star, static_comb, dynamic_comb, mesh)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SchemeSpec {
    pub kind: SchemeKind,
    /// Buffer length `B`; only meaningful for [`SchemeKind::Mesh`].
    pub mesh_slots: Option<usize>,
    pub share_core: bool,
}

impl SchemeSpec {
    pub fn new(kind: SchemeKind) -> Self {
        Self {
            kind,
            mesh_slots: None,
            share_core: true,
        }
    }

    pub fn mesh(slots: usize) -> Self {
        Self {
            kind: SchemeKind::Mesh,
            mesh_slots: Some(slots),
            share_core: true,
        }
    }

    /// Mesh with one independent core stack per loop step.
    pub fn vanilla_mesh(slots: usize) -> Self {
        Self {
            share_core: false,
            ..Self::mesh(slots)
        }
    }

    pub fn slots(&self, plan: &LayerPlan) -> usize {
        self.mesh_slots
            .unwrap_or_else(|| crate::mesh::default_buffer_len(plan.n_loop))
    }

    pub fn validate(&self, plan: &LayerPlan) -> Result<()> {
        if !plan.recursive && self.kind != SchemeKind::Base {
            return Err(Error::Config(format!(
                "a non-recursive plan '{plan}' only supports the base scheme"
            )));
        }
        if self.kind == SchemeKind::Mesh {
            let b = self.slots(plan);
            if b < plan.n_loop + 1 {
                return Err(Error::Config(format!(
                    "mesh buffer of {b} slots is below the floor of {} for {} loops",
                    plan.n_loop + 1,
                    plan.n_loop
                )));
            }
        } else if self.mesh_slots.is_some() {
            return Err(Error::Config(format!(
                "buffer length given for non-mesh scheme {}",
                self.kind
            )));
        }
        if !self.share_core && plan.recursive && self.kind != SchemeKind::Mesh {
            return Err(Error::Config(
                "untied cores are only supported together with the mesh scheme".into(),
            ));
        }
        Ok(())
    }
}

/// Learnable coefficient source for the combination schemes.
#[derive(Debug, Clone, Copy)]
pub enum CombParams {
    /// Three free scalars, shape `[3]`.
    Static { alpha: Var },
    /// A `D×3` head with bias `[3]` applied to the running (causal) mean of
    /// `h(t)`, giving one coefficient triple per token.
    Dynamic { weight: Var, bias: Var },
}

impl CombParams {
    /// `[3]` for static coefficients, `L×3` for dynamic ones.
    pub fn coefficients<T: Scalar>(&self, g: &mut Graph<T>, h_t: Var) -> Result<Var> {
        match *self {
            CombParams::Static { alpha } => Ok(alpha),
            CombParams::Dynamic { weight, bias } => {
                let pooled = g.prefix_mean_rows(h_t)?;
                g.linear(pooled, weight, bias)
            }
        }
    }
}

/// How `h(t+1)` is formed from the core output.
#[derive(Debug, Clone, Copy)]
pub enum StepRule {
    Base,
    Residual,
    Anchor,
    AnchorStar,
    Comb(CombParams),
}

impl StepRule {
    pub fn fixed(kind: SchemeKind) -> Result<Self> {
        match kind {
            SchemeKind::Base => Ok(StepRule::Base),
            SchemeKind::Residual => Ok(StepRule::Residual),
            SchemeKind::Anchor => Ok(StepRule::Anchor),
            SchemeKind::AnchorStar => Ok(StepRule::AnchorStar),
            other => Err(Error::Config(format!("{other} is not a fixed additive rule"))),
        }
    }
}

/// `Σ_i coeffs[i] · terms[i]`, where `coeffs` is either `[3]` or holds one
/// row of three coefficients per token.
pub fn combine<T: Scalar>(g: &mut Graph<T>, coeffs: Var, terms: [Var; 3]) -> Result<Var> {
    let per_token = g.value(coeffs).shape().len() == 2;
    let mut acc: Option<Var> = None;
    for (i, &term) in terms.iter().enumerate() {
        let scaled = if per_token {
            g.col_scale(term, coeffs, i)?
        } else {
            g.elem_scale(term, coeffs, i)?
        };
        acc = Some(match acc {
            Some(a) => g.add(a, scaled)?,
            None => scaled,
        });
    }
    Ok(acc.expect("three terms"))
}

/// One fixed-rule iteration. Returns `(core output, h(t+1))`.
pub fn loop_step<T: Scalar>(
    g: &mut Graph<T>,
    kind: SchemeKind,
    h_t: Var,
    h_0: Var,
    h_emb: Var,
    core: &mut dyn FnMut(&mut Graph<T>, Var) -> Result<Var>,
) -> Result<(Var, Var)> {
    let out = core(g, h_t)?;
    let next = match kind {
        SchemeKind::Base => out,
        SchemeKind::Residual => g.add(out, h_t)?,
        SchemeKind::Anchor => g.add(out, h_0)?,
        SchemeKind::AnchorStar => g.add(out, h_emb)?,
        other => {
            return Err(Error::Config(format!(
                "loop_step does not handle {other}"
            )))
        }
    };
    Ok((out, next))
}

/// One learnable-combination iteration:
/// `h(t+1) = α₁·core(h(t)) + α₂·h(0) + α₃·h_emb`.
pub fn comb_step<T: Scalar>(
    g: &mut Graph<T>,
    params: &CombParams,
    h_t: Var,
    h_0: Var,
    h_emb: Var,
    core: &mut dyn FnMut(&mut Graph<T>, Var) -> Result<Var>,
) -> Result<(Var, Var)> {
    let alpha = params.coefficients(g, h_t)?;
    let out = core(g, h_t)?;
    let next = combine(g, alpha, [out, h_0, h_emb])?;
    Ok((out, next))
}

/// States produced by [`run_loop`].
#[derive(Debug, Clone)]
pub struct LoopRun {
    /// `h(1) … h(K)`.
    pub states: Vec<Var>,
    /// `(h(t), core(h(t)))` for every iteration.
    pub core_io: Vec<(Var, Var)>,
}

impl LoopRun {
    pub fn last(&self) -> Var {
        *self.states.last().expect("at least one iteration")
    }
}

/// Iterates `rule` for `k` steps starting from `h(0)`. The core closure gets
/// the iteration index so untied cores can pick their own weights.
pub fn run_loop<T: Scalar>(
    g: &mut Graph<T>,
    rule: &StepRule,
    h_0: Var,
    h_emb: Var,
    k: usize,
    core: &mut dyn FnMut(&mut Graph<T>, usize, Var) -> Result<Var>,
) -> Result<LoopRun> {
    if k == 0 {
        return Err(Error::Config("loop count must be at least 1".into()));
    }
    let mut run = LoopRun {
        states: Vec::with_capacity(k),
        core_io: Vec::with_capacity(k),
    };
    let mut h = h_0;
    for t in 0..k {
        let mut step_core = |g: &mut Graph<T>, x: Var| core(g, t, x);
        let (out, next) = match rule {
            StepRule::Comb(params) => comb_step(g, params, h, h_0, h_emb, &mut step_core)?,
            StepRule::Base => loop_step(g, SchemeKind::Base, h, h_0, h_emb, &mut step_core)?,
            StepRule::Residual => {
                loop_step(g, SchemeKind::Residual, h, h_0, h_emb, &mut step_core)?
            }
            StepRule::Anchor => loop_step(g, SchemeKind::Anchor, h, h_0, h_emb, &mut step_core)?,
            StepRule::AnchorStar => {
                loop_step(g, SchemeKind::AnchorStar, h, h_0, h_emb, &mut step_core)?
            }
        };
        run.core_io.push((h, out));
        run.states.push(next);
        h = next;
    }
    Ok(run)
}
