//! Named parameters, the layers shared by every network in the crate, the
//! Adam optimizer, and the finite-difference gradient checker.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};

use crate::error::{CoreError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{seeded_rng, splitmix, Tensor};

/// Ordered table of named parameter tensors. Iteration order is the name
/// order, which keeps optimizer updates and checkpoints deterministic.
#[derive(Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        assert!(
            self.params.insert(name.to_string(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn set(&mut self, name: &str, value: Tensor) {
        let slot = self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(slot.shape(), value.shape(), "shape change for {name}");
        *slot = value;
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total element count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }
}

/// Initialization recipes for [`ParamInit::tensor`].
#[derive(Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Glorot-uniform over the given fan-in/fan-out.
    Xavier { fan_in: usize, fan_out: usize },
    Normal(f64),
}

/// Creates parameters with per-name rng streams, so initialization does not
/// depend on registration order.
pub struct ParamInit<'a> {
    store: &'a mut ParamStore,
    seed: u64,
}

impl<'a> ParamInit<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> ParamInit<'a> {
        ParamInit { store, seed }
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> &mut Self {
        let mut rng = seeded_rng(self.seed, &[name_tag(name)]);
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::Xavier { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::rand_uniform(shape, -bound, bound, &mut rng)
            }
            Init::Normal(std) => Tensor::randn(shape, &mut rng).map(|v| v * std),
        };
        self.store.insert(name, value);
        self
    }
}

fn name_tag(name: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in name.as_bytes() {
        h = splitmix(h ^ b as u64);
    }
    h
}

/// Binds parameters from a store into a graph, memoizing leaf vars so each
/// parameter appears once per graph and gradients accumulate in one slot.
pub struct Ctx<'g> {
    pub graph: &'g Graph,
    store: &'g ParamStore,
    bound: RefCell<BTreeMap<String, Var<'g>>>,
}

impl<'g> Ctx<'g> {
    pub fn new(graph: &'g Graph, store: &'g ParamStore) -> Ctx<'g> {
        Ctx {
            graph,
            store,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn param(&self, name: &str) -> Var<'g> {
        if let Some(&v) = self.bound.borrow().get(name) {
            return v;
        }
        let var = self.graph.leaf(self.store.get(name).clone());
        self.bound.borrow_mut().insert(name.to_string(), var);
        var
    }

    pub fn constant(&self, t: Tensor) -> Var<'g> {
        self.graph.constant(t)
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Gradients of every bound parameter after a backward pass.
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .map(|(name, &var)| (name.clone(), self.graph.grad(var)))
            .collect()
    }
}

// ---- layers ----

#[derive(Clone)]
pub struct Linear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(p: &mut ParamInit, name: &str, d_in: usize, d_out: usize, bias: bool) -> Linear {
        p.tensor(
            &format!("{name}.w"),
            &[d_in, d_out],
            Init::Xavier {
                fan_in: d_in,
                fan_out: d_out,
            },
        );
        if bias {
            p.tensor(&format!("{name}.b"), &[d_out], Init::Zeros);
        }
        Linear {
            name: name.to_string(),
            d_in,
            d_out,
            bias,
        }
    }

    /// Zero-initialized variant for gates and output heads.
    pub fn new_zeros(p: &mut ParamInit, name: &str, d_in: usize, d_out: usize, bias: bool) -> Linear {
        p.tensor(&format!("{name}.w"), &[d_in, d_out], Init::Zeros);
        if bias {
            p.tensor(&format!("{name}.b"), &[d_out], Init::Zeros);
        }
        Linear {
            name: name.to_string(),
            d_in,
            d_out,
            bias,
        }
    }

    /// Applies to the last axis of `x`, preserving leading axes.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let shape = x.shape();
        let d_in = *shape.last().expect("linear input rank 0");
        assert_eq!(d_in, self.d_in, "{}: input width {d_in}", self.name);
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let w = ctx.param(&format!("{}.w", self.name));
        let mut y = x.reshape(&[rows, self.d_in]).matmul(w);
        if self.bias {
            let b = ctx.param(&format!("{}.b", self.name));
            y = y.add(b);
        }
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        out_shape.push(self.d_out);
        y.reshape(&out_shape)
    }
}

#[derive(Clone)]
pub struct RmsNorm {
    pub name: String,
    pub dim: usize,
    pub eps: f64,
}

impl RmsNorm {
    pub fn new(p: &mut ParamInit, name: &str, dim: usize, eps: f64) -> RmsNorm {
        p.tensor(&format!("{name}.gain"), &[dim], Init::Ones);
        RmsNorm {
            name: name.to_string(),
            dim,
            eps,
        }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let gain = ctx.param(&format!("{}.gain", self.name));
        rms_norm(x, gain, self.eps).expect("rms_norm on empty tensor")
    }
}

/// Divide each last-axis vector by the root of its mean square (plus eps),
/// then apply the per-feature gain.
pub fn rms_norm<'g>(x: Var<'g>, gain: Var<'g>, eps: f64) -> Result<Var<'g>> {
    let shape = x.shape();
    let last = *shape.last().ok_or_else(|| {
        CoreError::invalid("rms_norm", "rank-0 input")
    })?;
    if last == 0 || shape.iter().product::<usize>() == 0 {
        return Err(CoreError::invalid("rms_norm", "empty tensor"));
    }
    if eps <= 0.0 {
        return Err(CoreError::invalid("rms_norm", format!("eps {eps} must be > 0")));
    }
    let axis = shape.len() - 1;
    let mean_sq = x.square().sum_axes(&[axis], true).affine(1.0 / last as f64, eps);
    let normed = x.div(mean_sq.sqrt());
    Ok(normed.mul(gain))
}

/// softmax(q kᵀ / sqrt(dh)) v over the last two axes; any leading axes are
/// treated as batch (heads). Returns the attended values.
pub fn scaled_dot_attention<'g>(q: Var<'g>, k: Var<'g>, v: Var<'g>) -> Result<Var<'g>> {
    Ok(scaled_dot_attention_with_probs(q, k, v)?.0)
}

/// Same as [`scaled_dot_attention`] but also returns the attention
/// probabilities `[.., Tq, Tk]` for recording.
pub fn scaled_dot_attention_with_probs<'g>(
    q: Var<'g>,
    k: Var<'g>,
    v: Var<'g>,
) -> Result<(Var<'g>, Var<'g>)> {
    let qs = q.shape();
    let ks = k.shape();
    let vs = v.shape();
    let rank = qs.len();
    if rank < 2 || ks.len() != rank || vs.len() != rank {
        return Err(CoreError::shape(
            "attention",
            format!("ranks q{qs:?} k{ks:?} v{vs:?}"),
        ));
    }
    let dh = qs[rank - 1];
    let tk = ks[rank - 2];
    if tk == 0 {
        return Err(CoreError::invalid("attention", "empty key/value sequence"));
    }
    if ks[rank - 1] != dh || vs[rank - 2] != tk || qs[..rank - 2] != ks[..rank - 2] {
        return Err(CoreError::shape(
            "attention",
            format!("q{qs:?} k{ks:?} v{vs:?}"),
        ));
    }
    let mut perm: Vec<usize> = (0..rank).collect();
    perm.swap(rank - 2, rank - 1);
    let logits = q.bmm(k.permute(&perm)).affine(1.0 / (dh as f64).sqrt(), 0.0);
    let probs = logits.softmax_last();
    Ok((probs.bmm(v), probs))
}

/// Post-projection shift/scale hooks for queries and keys/values, used by
/// the cross-modality modulation. `scale` is additive on top of 1.
#[derive(Clone, Copy, Default)]
pub struct QkvMods<'g> {
    pub q_shift: Option<Var<'g>>,
    pub q_scale: Option<Var<'g>>,
    pub kv_shift: Option<Var<'g>>,
    pub kv_scale: Option<Var<'g>>,
}

fn modulate<'g>(x: Var<'g>, scale: Option<Var<'g>>, shift: Option<Var<'g>>) -> Var<'g> {
    let mut y = x;
    if let Some(s) = scale {
        y = y.mul(s.affine(1.0, 1.0));
    }
    if let Some(s) = shift {
        y = y.add(s);
    }
    y
}

/// Multi-head attention over per-sample token sequences `[T, d]`.
///
/// One struct serves the plain connector blocks, the in-stream self
/// attention (with a rotary table), the text cross-attention, and the
/// audio-visual cross-attention (rotary plus timestep modulation).
#[derive(Clone)]
pub struct MultiHead {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d_attn: usize,
}

impl MultiHead {
    pub fn new(
        p: &mut ParamInit,
        name: &str,
        d_q_in: usize,
        d_kv_in: usize,
        d_attn: usize,
        d_out: usize,
        heads: usize,
    ) -> MultiHead {
        assert!(heads > 0 && d_attn % heads == 0, "{name}: bad head split");
        MultiHead {
            wq: Linear::new(p, &format!("{name}.wq"), d_q_in, d_attn, false),
            wk: Linear::new(p, &format!("{name}.wk"), d_kv_in, d_attn, false),
            wv: Linear::new(p, &format!("{name}.wv"), d_kv_in, d_attn, false),
            wo: Linear::new(p, &format!("{name}.wo"), d_attn, d_out, false),
            heads,
            d_attn,
        }
    }

    /// Returns the attended output `[Tq, d_out]` and the attention
    /// probabilities `[heads, Tq, Tk]`.
    pub fn forward<'g>(
        &self,
        ctx: &Ctx<'g>,
        q_in: Var<'g>,
        kv_in: Var<'g>,
        rope_q: Option<&crate::graph::RotationTable>,
        rope_k: Option<&crate::graph::RotationTable>,
        mods: QkvMods<'g>,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let tq = q_in.shape()[0];
        let tk = kv_in.shape()[0];
        let dh = self.d_attn / self.heads;
        let split = |x: Var<'g>, t: usize| x.reshape(&[t, self.heads, dh]).permute(&[1, 0, 2]);

        let q = modulate(self.wq.forward(ctx, q_in), mods.q_scale, mods.q_shift);
        let k = modulate(self.wk.forward(ctx, kv_in), mods.kv_scale, mods.kv_shift);
        let v = modulate(self.wv.forward(ctx, kv_in), mods.kv_scale, mods.kv_shift);

        let mut qh = split(q, tq);
        let mut kh = split(k, tk);
        if let Some(table) = rope_q {
            qh = qh.rope(table);
        }
        if let Some(table) = rope_k {
            kh = kh.rope(table);
        }
        let vh = split(v, tk);
        let (out, probs) = scaled_dot_attention_with_probs(qh, kh, vh)?;
        let merged = out.permute(&[1, 0, 2]).reshape(&[tq, self.d_attn]);
        Ok((self.wo.forward(ctx, merged), probs))
    }
}

/// Sinusoidal featurization of a diffusion time in [0, 1] followed by a
/// learned two-layer map. 32 geometric frequencies, base 10000.
#[derive(Clone)]
pub struct TimestepEmbed {
    fc1: Linear,
    fc2: Linear,
    pub d_out: usize,
}

pub const TIMESTEP_FREQS: usize = 32;

impl TimestepEmbed {
    pub fn new(p: &mut ParamInit, name: &str, d_out: usize) -> TimestepEmbed {
        let fc1 = Linear::new(p, &format!("{name}.fc1"), 2 * TIMESTEP_FREQS, d_out, true);
        let fc2 = Linear::new(p, &format!("{name}.fc2"), d_out, d_out, true);
        TimestepEmbed { fc1, fc2, d_out }
    }

    pub fn features(t: f64) -> Tensor {
        let mut data = Vec::with_capacity(2 * TIMESTEP_FREQS);
        for i in 0..TIMESTEP_FREQS {
            let freq = 10000f64.powf(-(i as f64) / (TIMESTEP_FREQS as f64 - 1.0));
            data.push((t * freq).sin());
            data.push((t * freq).cos());
        }
        Tensor::from_vec(&[1, 2 * TIMESTEP_FREQS], data)
    }

    /// Embedding vector `[1, d_out]`; rejects t outside [0, 1].
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, t: f64) -> Result<Var<'g>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(CoreError::invalid(
                "timestep_embed",
                format!("t {t} outside [0, 1]"),
            ));
        }
        let feats = ctx.constant(Self::features(t));
        Ok(self.fc2.forward(ctx, self.fc1.forward(ctx, feats).silu()))
    }
}

// ---- optimizer ----

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    frozen: BTreeSet<String>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    /// Exclude every parameter with this exact name from future updates.
    pub fn freeze(&mut self, name: &str) {
        self.frozen.insert(name.to_string());
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn apply(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, grad) in grads {
            if self.frozen.contains(name) {
                continue;
            }
            let param = store.get(name).clone();
            let n = param.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let mut out = param.to_vec();
            for (((slot, g), mi), vi) in out.iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *slot -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            store.set(name, Tensor::from_vec(param.shape(), out));
        }
    }

    /// Moment tensors for checkpointing, keyed by parameter name.
    pub fn state(&self) -> (usize, Vec<(String, Tensor, Tensor)>, Vec<String>) {
        let mut entries = Vec::new();
        for (name, m) in &self.m {
            let v = &self.v[name];
            entries.push((
                name.clone(),
                Tensor::from_vec(&[m.len()], m.clone()),
                Tensor::from_vec(&[v.len()], v.clone()),
            ));
        }
        (self.step, entries, self.frozen.iter().cloned().collect())
    }

    pub fn restore(&mut self, step: usize, entries: Vec<(String, Tensor, Tensor)>, frozen: Vec<String>) {
        self.step = step;
        self.m.clear();
        self.v.clear();
        for (name, m, v) in entries {
            self.m.insert(name.clone(), m.to_vec());
            self.v.insert(name, v.to_vec());
        }
        self.frozen = frozen.into_iter().collect();
    }
}

// ---- gradient checking ----

/// Max over coordinates of |autodiff - central difference| / (|autodiff| + 1e-8)
/// for a scalar function of one tensor. `h` must lie in [1e-6, 1e-3].
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Var<'g>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(CoreError::invalid(
            "grad_check",
            format!("step {h} outside [1e-6, 1e-3]"),
        ));
    }
    let graph = Graph::new();
    let leaf = graph.leaf(x.clone());
    let out = f(&graph, leaf);
    assert_eq!(out.value().numel(), 1, "grad_check target must be scalar");
    out.value().validate("grad_check function value")?;
    graph.backward(out)?;
    let auto = graph.grad(leaf);

    let eval = |data: Vec<f64>| -> Result<f64> {
        let g = Graph::new();
        let v = g.leaf(Tensor::from_vec(x.shape(), data));
        let y = f(&g, v).value();
        y.validate("grad_check probe value")?;
        Ok(y.data()[0])
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.to_vec();
        plus[i] += h;
        let mut minus = x.to_vec();
        minus[i] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let ad = auto.data()[i];
        let rel = (ad - fd).abs() / (ad.abs() + 1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Gradient check over sampled coordinates of named parameters: the loss
/// closure sees a full store, central differences perturb one coordinate of
/// one parameter at a time.
pub fn grad_check_params<F>(
    loss: F,
    store: &ParamStore,
    coords: &[(String, usize)],
    h: f64,
) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<(f64, BTreeMap<String, Tensor>)>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(CoreError::invalid(
            "grad_check_params",
            format!("step {h} outside [1e-6, 1e-3]"),
        ));
    }
    let (_, grads) = loss(store)?;
    let mut worst = 0.0f64;
    for (name, idx) in coords {
        let base = store.get(name).clone();
        let perturbed = |delta: f64| -> Result<f64> {
            let mut data = base.to_vec();
            data[*idx] += delta;
            let mut s = store.clone();
            s.set(name, Tensor::from_vec(base.shape(), data));
            Ok(loss(&s)?.0)
        };
        let fd = (perturbed(h)? - perturbed(-h)?) / (2.0 * h);
        let ad = grads
            .get(name)
            .map(|g| g.data()[*idx])
            .unwrap_or(0.0);
        let rel = (ad - fd).abs() / (ad.abs() + 1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
