//! Prelude / looped core / coda transformer with pre-LN blocks, rotary
//! causal attention, GELU MLPs and an output head tied to the embeddings.

mod checkpoint;
mod config;
mod params;

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, Checkpoint, Manifest, ParamEntry};
pub use config::ModelConfig;
pub use params::ParamStore;

use crate::error::{Error, Result};
use crate::mesh::{self, RouterVars};
use crate::numerics::{Graph, Rng, Scalar, Tensor, Var};
use crate::recurrence::{self, CombParams, SchemeKind, StepRule};

/// Standard deviation for every weight matrix the depth-aware rule does not
/// cover.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackRole {
    Prelude,
    Core,
    Coda,
}

/// Parameter indices of one transformer layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerIdx {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub struct BlockStack {
    pub role: StackRole,
    pub name: String,
    pub layers: Vec<LayerIdx>,
}

#[derive(Debug, Clone, Copy)]
pub struct RouterIdx {
    pub write_weight: usize,
    pub write_bias: usize,
    pub read_weight: usize,
    pub read_bias: usize,
}

#[derive(Debug, Clone, Copy)]
pub enum CombIdx {
    Static { alpha: usize },
    Dynamic { weight: usize, bias: usize },
}

/// Where each component's parameters live in the [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Layout {
    pub embed: usize,
    pub prelude: BlockStack,
    /// One stack when the core is shared, otherwise one per loop step.
    pub cores: Vec<BlockStack>,
    pub coda: BlockStack,
    pub final_gain: usize,
    pub final_bias: usize,
    /// Transitional step first.
    pub routers: Vec<RouterIdx>,
    pub comb: Option<CombIdx>,
}

/// Stage names in capture order: `h_emb`, `h0 … hK`, `h_out`.
pub fn stage_names(n_loop: usize) -> Vec<String> {
    let mut v = vec!["h_emb".to_string()];
    v.extend((0..=n_loop).map(|t| format!("h{t}")));
    v.push("h_out".into());
    v
}

/// Name of the effort block for loop application `t` (0-based).
pub fn core_block_name(t: usize) -> String {
    format!("core{}", t + 1)
}

/// Hidden states captured during one forward pass.
#[derive(Debug, Clone)]
pub struct StateTrace<T> {
    pub stages: Vec<(String, Tensor<T>)>,
    /// `(block name, input, output)` for each whole-stack application.
    pub blocks: Vec<(String, Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> StateTrace<T> {
    pub fn stage(&self, name: &str) -> Option<&Tensor<T>> {
        self.stages.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn block(&self, name: &str) -> Option<(&Tensor<T>, &Tensor<T>)> {
        self.blocks
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, a, b)| (a, b))
    }
}

/// Graph handles recorded while building a forward pass.
#[derive(Debug, Clone, Default)]
pub struct TraceVars {
    pub stages: Vec<(String, Var)>,
    pub blocks: Vec<(String, Var, Var)>,
}

impl TraceVars {
    pub fn materialize<T: Scalar>(&self, g: &Graph<T>) -> StateTrace<T> {
        StateTrace {
            stages: self
                .stages
                .iter()
                .map(|(n, v)| (n.clone(), g.value(*v).clone()))
                .collect(),
            blocks: self
                .blocks
                .iter()
                .map(|(n, a, b)| (n.clone(), g.value(*a).clone(), g.value(*b).clone()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub logits: Tensor<T>,
    pub trace: StateTrace<T>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    pub layout: Layout,
}

fn push_layer<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    prefix: &str,
    cfg: &ModelConfig,
) -> LayerIdx {
    let d = cfg.d_model;
    let f = cfg.d_ff;
    let out_std = cfg.out_proj_std();
    let mut w = |store: &mut ParamStore<T>, name: &str, shape: &[usize], std: f64| {
        store.push(format!("{prefix}.{name}"), rng.normal_tensor(shape, std))
    };
    let ln1_gain = store.push(format!("{prefix}.ln1.gain"), Tensor::full(&[d], T::ONE));
    let ln1_bias = store.push(format!("{prefix}.ln1.bias"), Tensor::zeros(&[d]));
    let wq = w(store, "attn.wq", &[d, d], INIT_STD);
    let bq = store.push(format!("{prefix}.attn.bq"), Tensor::zeros(&[d]));
    let wk = w(store, "attn.wk", &[d, d], INIT_STD);
    let bk = store.push(format!("{prefix}.attn.bk"), Tensor::zeros(&[d]));
    let wv = w(store, "attn.wv", &[d, d], INIT_STD);
    let bv = store.push(format!("{prefix}.attn.bv"), Tensor::zeros(&[d]));
    let wo = w(store, "attn.wo", &[d, d], out_std);
    let bo = store.push(format!("{prefix}.attn.bo"), Tensor::zeros(&[d]));
    let ln2_gain = store.push(format!("{prefix}.ln2.gain"), Tensor::full(&[d], T::ONE));
    let ln2_bias = store.push(format!("{prefix}.ln2.bias"), Tensor::zeros(&[d]));
    let w1 = w(store, "mlp.w1", &[d, f], INIT_STD);
    let b1 = store.push(format!("{prefix}.mlp.b1"), Tensor::zeros(&[f]));
    let w2 = w(store, "mlp.w2", &[f, d], out_std);
    let b2 = store.push(format!("{prefix}.mlp.b2"), Tensor::zeros(&[d]));
    LayerIdx {
        ln1_gain,
        ln1_bias,
        wq,
        bq,
        wk,
        bk,
        wv,
        bv,
        wo,
        bo,
        ln2_gain,
        ln2_bias,
        w1,
        b1,
        w2,
        b2,
    }
}

fn push_stack<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    role: StackRole,
    name: &str,
    layers: usize,
    cfg: &ModelConfig,
) -> BlockStack {
    BlockStack {
        role,
        name: name.to_string(),
        layers: (0..layers)
            .map(|i| push_layer(store, rng, &format!("{name}.{i}"), cfg))
            .collect(),
    }
}

/// Name of router parameter `part` (`w` or `b`) for step `t`.
pub fn router_param_name(t: isize, write: bool, part: &str) -> String {
    format!(
        "mesh.router.{t}.{}.{part}",
        if write { "write" } else { "read" }
    )
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters drawn from `cfg.seed`.
    pub fn init(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        if T::DTYPE != cfg.dtype {
            return Err(Error::Config(format!(
                "config asks for {} but the model is instantiated as {}",
                cfg.dtype,
                T::DTYPE
            )));
        }
        let mut rng = Rng::new(cfg.seed);
        let mut store = ParamStore::default();
        let d = cfg.d_model;
        let embed = store.push("embed.weight", rng.normal_tensor(&[cfg.vocab, d], INIT_STD));
        let plan = cfg.plan;
        let prelude = push_stack(&mut store, &mut rng, StackRole::Prelude, "prelude", plan.l_pre, &cfg);
        let cores = if cfg.core_copies() == 1 {
            vec![push_stack(&mut store, &mut rng, StackRole::Core, "core", plan.l_core, &cfg)]
        } else {
            (0..cfg.core_copies())
                .map(|c| {
                    push_stack(
                        &mut store,
                        &mut rng,
                        StackRole::Core,
                        &format!("core{c}"),
                        plan.l_core,
                        &cfg,
                    )
                })
                .collect()
        };
        let coda = push_stack(&mut store, &mut rng, StackRole::Coda, "coda", plan.l_coda, &cfg);
        let final_gain = store.push("final_ln.gain", Tensor::full(&[d], T::ONE));
        let final_bias = store.push("final_ln.bias", Tensor::zeros(&[d]));

        let mut routers = Vec::new();
        if cfg.scheme.kind == SchemeKind::Mesh {
            let b = cfg.mesh_slots();
            for t in -1..plan.n_loop as isize {
                let mut idx = [0usize; 4];
                for (k, (write, part)) in [(true, "w"), (true, "b"), (false, "w"), (false, "b")]
                    .into_iter()
                    .enumerate()
                {
                    let t_init = if part == "w" {
                        rng.normal_tensor(&[d, b], mesh::ROUTER_INIT_STD)
                    } else {
                        Tensor::zeros(&[b])
                    };
                    idx[k] = store.push(router_param_name(t, write, part), t_init);
                }
                routers.push(RouterIdx {
                    write_weight: idx[0],
                    write_bias: idx[1],
                    read_weight: idx[2],
                    read_bias: idx[3],
                });
            }
        }

        let unit_start = Tensor::from_f64(&[3], &[1.0, 0.0, 0.0])?;
        let comb = match cfg.scheme.kind {
            SchemeKind::StaticComb => Some(CombIdx::Static {
                alpha: store.push("comb.alpha", unit_start),
            }),
            SchemeKind::DynamicComb => Some(CombIdx::Dynamic {
                weight: store.push("comb.head.w", rng.normal_tensor(&[d, 3], INIT_STD)),
                bias: store.push("comb.head.b", unit_start),
            }),
            _ => None,
        };

        Ok(Self {
            cfg,
            params: store,
            layout: Layout {
                embed,
                prelude,
                cores,
                coda,
                final_gain,
                final_bias,
                routers,
                comb,
            },
        })
    }

    /// Rebuilds a model around existing parameters, checking that names and
    /// shapes match the configuration.
    pub fn from_params(cfg: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut fresh = Model::<T>::init(ModelConfig {
            dtype: T::DTYPE,
            ..cfg.clone()
        })?;
        if fresh.params.names() != params.names() {
            return Err(Error::Config(
                "parameter names do not match the model configuration".into(),
            ));
        }
        for ((name, a), b) in fresh.params.iter().zip(params.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        fresh.params = params;
        fresh.cfg = ModelConfig {
            dtype: T::DTYPE,
            ..cfg
        };
        Ok(fresh)
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Total router parameters actually held by the model.
    pub fn router_param_count(&self) -> usize {
        self.params.count_prefix("mesh.router.")
    }

    /// Overwrites the mesh routers with `set`, e.g. one from
    /// [`mesh::pin_simulation`].
    pub fn install_routers(&mut self, set: &mesh::RouterSet<T>) -> Result<()> {
        if self.cfg.scheme.kind != SchemeKind::Mesh {
            return Err(Error::Config(format!("scheme {} has no routers", self.cfg.scheme.kind)));
        }
        let slots = self.cfg.scheme.slots(&self.cfg.plan);
        if set.n_loop() != self.cfg.plan.n_loop || set.slots() != slots {
            return Err(Error::Config(format!(
                "router set for {} loops and {} slots, model has {} loops and {slots} slots",
                set.n_loop(),
                set.slots(),
                self.cfg.plan.n_loop
            )));
        }
        for (t, pair) in set.iter() {
            for (write, r) in [(true, &pair.write), (false, &pair.read)] {
                for (part, src) in [("w", &r.weight), ("b", &r.bias)] {
                    let name = router_param_name(t, write, part);
                    let dst = self
                        .params
                        .get_mut(&name)
                        .ok_or_else(|| Error::Config(format!("model has no parameter {name}")))?;
                    if dst.shape() != src.shape() {
                        return Err(Error::Shape(format!(
                            "{name}: {:?} vs {:?}",
                            dst.shape(),
                            src.shape()
                        )));
                    }
                    *dst = src.clone();
                }
            }
        }
        Ok(())
    }

    /// Scaled embeddings `√d · E[tokens]`.
    pub fn embed(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let table = g.constant(self.params.tensors()[self.layout.embed].clone());
        let h = self.embed_graph(&mut g, table, tokens)?;
        Ok(g.value(h).clone())
    }

    fn embed_graph(&self, g: &mut Graph<T>, table: Var, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Data("empty token sequence".into()));
        }
        if tokens.len() > self.cfg.max_seq {
            return Err(Error::Data(format!(
                "sequence of {} tokens exceeds max_seq {}",
                tokens.len(),
                self.cfg.max_seq
            )));
        }
        let e = g.embedding(table, tokens)?;
        Ok(g.scale(e, T::from_f64((self.cfg.d_model as f64).sqrt())))
    }

    fn layer(&self, g: &mut Graph<T>, p: &[Var], idx: &LayerIdx, h: Var) -> Result<Var> {
        let heads = self.cfg.n_heads;
        let a = g.layer_norm(h, p[idx.ln1_gain], p[idx.ln1_bias])?;
        let q = g.linear(a, p[idx.wq], p[idx.bq])?;
        let k = g.linear(a, p[idx.wk], p[idx.bk])?;
        let v = g.linear(a, p[idx.wv], p[idx.bv])?;
        let q = g.rope(q, heads)?;
        let k = g.rope(k, heads)?;
        let o = g.causal_attention(q, k, v, heads)?;
        let o = g.linear(o, p[idx.wo], p[idx.bo])?;
        let h = g.add(h, o)?;
        let m = g.layer_norm(h, p[idx.ln2_gain], p[idx.ln2_bias])?;
        let u = g.linear(m, p[idx.w1], p[idx.b1])?;
        let u = g.gelu(u);
        let u = g.linear(u, p[idx.w2], p[idx.b2])?;
        g.add(h, u)
    }

    /// Sequential pre-LN blocks of `stack` applied to `h`.
    pub fn apply_stack(&self, g: &mut Graph<T>, p: &[Var], stack: &BlockStack, h: Var) -> Result<Var> {
        let mut h = h;
        for idx in &stack.layers {
            h = self.layer(g, p, idx, h)?;
            if !g.value(h).is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite activation in stack {}",
                    stack.name
                )));
            }
        }
        Ok(h)
    }

    fn core_stack(&self, t: usize) -> &BlockStack {
        if self.layout.cores.len() == 1 {
            &self.layout.cores[0]
        } else {
            &self.layout.cores[t]
        }
    }

    /// Builds the full forward pass on `g` given bound parameters `p`.
    /// Returns the logits and the captured states.
    pub fn build(&self, g: &mut Graph<T>, p: &[Var], tokens: &[usize]) -> Result<(Var, TraceVars)> {
        let mut trace = TraceVars::default();
        let h_emb = self.embed_graph(g, p[self.layout.embed], tokens)?;
        trace.stages.push(("h_emb".into(), h_emb));
        let plan = self.cfg.plan;
        let k = plan.n_loop;

        let h_pre = self.apply_stack(g, p, &self.layout.prelude, h_emb)?;
        if !self.layout.prelude.layers.is_empty() {
            trace.blocks.push(("pre".into(), h_emb, h_pre));
        }

        let mut core = |g: &mut Graph<T>, t: usize, h: Var| self.apply_stack(g, p, self.core_stack(t), h);
        let (states, core_io) = match self.cfg.scheme.kind {
            SchemeKind::Mesh => {
                let routers: Vec<RouterVars> = self
                    .layout
                    .routers
                    .iter()
                    .map(|r| RouterVars {
                        write_weight: p[r.write_weight],
                        write_bias: p[r.write_bias],
                        read_weight: p[r.read_weight],
                        read_bias: p[r.read_bias],
                    })
                    .collect();
                let run = mesh::mesh_run_graph(g, h_emb, h_pre, &routers, self.cfg.mesh_slots(), &mut core)?;
                (run.states, run.core_io)
            }
            kind => {
                let rule = match (kind, self.layout.comb) {
                    (SchemeKind::StaticComb, Some(CombIdx::Static { alpha })) => {
                        StepRule::Comb(CombParams::Static { alpha: p[alpha] })
                    }
                    (SchemeKind::DynamicComb, Some(CombIdx::Dynamic { weight, bias })) => {
                        StepRule::Comb(CombParams::Dynamic {
                            weight: p[weight],
                            bias: p[bias],
                        })
                    }
                    (kind, _) => StepRule::fixed(kind)?,
                };
                let run = recurrence::run_loop(g, &rule, h_pre, h_emb, k, &mut core)?;
                let mut states = vec![h_pre];
                states.extend(run.states);
                (states, run.core_io)
            }
        };
        for (t, &s) in states.iter().enumerate() {
            trace.stages.push((format!("h{t}"), s));
        }
        for (t, &(i, o)) in core_io.iter().enumerate() {
            trace.blocks.push((core_block_name(t), i, o));
        }

        let h_k = *states.last().expect("loop produced states");
        let h_out = self.apply_stack(g, p, &self.layout.coda, h_k)?;
        if !self.layout.coda.layers.is_empty() {
            trace.blocks.push(("coda".into(), h_k, h_out));
        }
        trace.stages.push(("h_out".into(), h_out));

        let normed = g.layer_norm(h_out, p[self.layout.final_gain], p[self.layout.final_bias])?;
        let logits = g.matmul_nt(normed, p[self.layout.embed])?;
        Ok((logits, trace))
    }

    /// Inference forward pass with state capture.
    pub fn forward(&self, tokens: &[usize]) -> Result<ForwardOutput<T>> {
        let mut g = Graph::inference();
        let p = self.params.bind_constant(&mut g);
        let (logits, trace) = self.build(&mut g, &p, tokens)?;
        Ok(ForwardOutput {
            logits: g.value(logits).clone(),
            trace: trace.materialize(&g),
        })
    }

    /// Mean next-token cross-entropy without gradients.
    pub fn loss(&self, tokens: &[usize], targets: &[usize]) -> Result<f64> {
        let mut g = Graph::inference();
        let p = self.params.bind_constant(&mut g);
        let (logits, _) = self.build(&mut g, &p, tokens)?;
        let loss = g.cross_entropy(logits, targets)?;
        Ok(g.value(loss).data()[0].to_f64())
    }

    /// Loss, per-parameter gradients (in store order) and logits.
    pub fn loss_and_grads(
        &self,
        tokens: &[usize],
        targets: &[usize],
    ) -> Result<(f64, Vec<Tensor<T>>, Tensor<T>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let (logits, _) = self.build(&mut g, &p, tokens)?;
        let loss = g.cross_entropy(logits, targets)?;
        let mut grads = g.backward(loss)?;
        let grads = p
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((g.value(loss).data()[0].to_f64(), grads, g.value(logits).clone()))
    }

    /// Whether weight decay applies to parameter `i`: matrices decay,
    /// vectors (biases, norm gains, combination coefficients) do not.
    pub fn decays(&self, i: usize) -> bool {
        self.params.tensors()[i].shape().len() >= 2
    }
}
