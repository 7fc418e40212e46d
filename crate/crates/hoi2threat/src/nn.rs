//! Shared neural-net plumbing: named parameter store, seeded initialization,
//! common layers over the autodiff tape, and AdamW.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted module path. A
//! [`Session`] binds parameters onto one tape per optimization step; each
//! parameter becomes a single leaf no matter how often it is used, so batch
//! losses accumulate gradients on it naturally.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Tensor, Var};

/// Named parameter tensors, ordered by name (BTreeMap) so every iteration is
/// deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        assert!(self.map.insert(name.to_string(), t).is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.map.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Per-parameter RNG: a function of the master seed and the parameter name,
/// so initialization does not depend on registration order.
pub fn param_rng(master_seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(master_seed ^ fnv1a(name)))
}

/// Register a weight matrix [fan_in, fan_out] with Xavier-uniform init plus a
/// zero bias [fan_out] under `prefix.w` / `prefix.b`.
pub fn init_linear(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, seed: u64) {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let name = format!("{prefix}.w");
    let mut rng = param_rng(seed, &name);
    let data: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
    store.insert(&name, Tensor::new(&[fan_in, fan_out], data));
    store.insert(&format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

/// Register layer-norm gain/bias under `prefix.g` / `prefix.b`.
pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(&format!("{prefix}.g"), Tensor::ones(&[dim]));
    store.insert(&format!("{prefix}.b"), Tensor::zeros(&[dim]));
}

/// Register an embedding table [rows, dim], N(0, 0.02)-style uniform init.
pub fn init_embedding(store: &mut ParamStore, name: &str, rows: usize, dim: usize, seed: u64) {
    let mut rng = param_rng(seed, name);
    let data: Vec<f64> = (0..rows * dim).map(|_| rng.gen_range(-0.05..0.05)).collect();
    store.insert(name, Tensor::new(&[rows, dim], data));
}

/// Register conv weight [c_out, c_in*k*k] (He-uniform) and bias under
/// `prefix.w` / `prefix.b`.
pub fn init_conv(store: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize, k: usize, seed: u64) {
    let fan_in = c_in * k * k;
    let a = (6.0 / fan_in as f64).sqrt();
    let name = format!("{prefix}.w");
    let mut rng = param_rng(seed, &name);
    let data: Vec<f64> = (0..c_out * fan_in).map(|_| rng.gen_range(-a..a)).collect();
    store.insert(&name, Tensor::new(&[c_out, fan_in], data));
    store.insert(&format!("{prefix}.b"), Tensor::zeros(&[c_out]));
}

/// Binds parameters from a store onto one tape, one leaf per name.
pub struct Session<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    bound: RefCell<BTreeMap<String, Var<'t>>>,
}

impl<'t, 's> Session<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Session<'t, 's> {
        Session { tape, store, bound: RefCell::new(BTreeMap::new()) }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Parameter leaf for `name`; repeated calls return the same node.
    pub fn p(&self, name: &str) -> Var<'t> {
        if let Some(v) = self.bound.borrow().get(name) {
            return *v;
        }
        let v = self.tape.leaf(self.store.get(name).clone());
        self.bound.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// Gradients of every bound parameter, keyed by name.
    pub fn collect_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound.borrow().iter().map(|(k, v)| (k.clone(), grads.wrt(*v))).collect()
    }
}

/// x [n,in] -> x.w + b under `prefix`.
pub fn linear<'t>(s: &Session<'t, '_>, prefix: &str, x: Var<'t>) -> Var<'t> {
    x.matmul(&s.p(&format!("{prefix}.w"))).add_bias(&s.p(&format!("{prefix}.b")))
}

/// Two-layer ReLU network under `prefix.l1` / `prefix.l2`.
pub fn mlp2<'t>(s: &Session<'t, '_>, prefix: &str, x: Var<'t>) -> Var<'t> {
    linear(s, &format!("{prefix}.l2"), linear(s, &format!("{prefix}.l1"), x).relu())
}

pub fn layer_norm<'t>(s: &Session<'t, '_>, prefix: &str, x: Var<'t>) -> Var<'t> {
    x.layer_norm(&s.p(&format!("{prefix}.g")), &s.p(&format!("{prefix}.b")), 1e-5)
}

/// Registers the parameter set used by [`mha`].
pub fn init_mha(store: &mut ParamStore, prefix: &str, dim: usize, seed: u64) {
    for proj in ["wq", "wk", "wv", "wo"] {
        init_linear(store, &format!("{prefix}.{proj}"), dim, dim, seed);
    }
}

/// Multi-head attention. Returns the output [tq, d] and the head-averaged
/// attention matrix [tq, tk] (rows sum to 1). `mask` is additive, applied to
/// every head before softmax.
pub fn mha<'t>(
    s: &Session<'t, '_>,
    prefix: &str,
    q_in: Var<'t>,
    kv_in: Var<'t>,
    heads: usize,
    mask: Option<&Tensor>,
) -> (Var<'t>, Tensor) {
    let d = q_in.shape()[1];
    assert_eq!(d % heads, 0, "model dim {d} not divisible by {heads} heads");
    let dh = d / heads;
    let q = linear(s, &format!("{prefix}.wq"), q_in);
    let k = linear(s, &format!("{prefix}.wk"), kv_in);
    let v = linear(s, &format!("{prefix}.wv"), kv_in);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctxs = Vec::with_capacity(heads);
    let mut attn_sum: Option<Tensor> = None;
    for h in 0..heads {
        let qh = q.slice_cols(h * dh, dh);
        let kh = k.slice_cols(h * dh, dh);
        let vh = v.slice_cols(h * dh, dh);
        let mut scores = qh.matmul(&kh.t()).scale(scale);
        if let Some(m) = mask {
            scores = scores.add(&s.tape().constant(m.clone()));
        }
        let attn = scores.softmax_rows();
        match &mut attn_sum {
            Some(t) => t.add_assign(&attn.value()),
            slot => *slot = Some(attn.value()),
        }
        ctxs.push(attn.matmul(&vh));
    }
    let ctx = crate::autodiff::concat_cols(&ctxs);
    let out = linear(s, &format!("{prefix}.wo"), ctx);
    let mut avg = attn_sum.expect("at least one head");
    for v in avg.data_mut() {
        *v /= heads as f64;
    }
    (out, avg)
}

/// Additive causal mask: position t may attend to positions <= t.
pub fn causal_mask(t: usize) -> Tensor {
    let mut m = Tensor::zeros(&[t, t]);
    for r in 0..t {
        for c in r + 1..t {
            m.set2(r, c, -1e30);
        }
    }
    m
}

/// Fixed 2-D sinusoidal position table for a g x g grid, row-major token
/// order, dimension d (first half encodes y, second half x).
pub fn sinusoid_2d(grid: usize, d: usize) -> Tensor {
    assert_eq!(d % 4, 0, "2-D sinusoid needs dim divisible by 4, got {d}");
    let half = d / 2;
    let mut out = Tensor::zeros(&[grid * grid, d]);
    for y in 0..grid {
        for x in 0..grid {
            let t = y * grid + x;
            for i in 0..half / 2 {
                let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
                out.set2(t, 2 * i, (y as f64 * freq).sin());
                out.set2(t, 2 * i + 1, (y as f64 * freq).cos());
                out.set2(t, half + 2 * i, (x as f64 * freq).sin());
                out.set2(t, half + 2 * i + 1, (x as f64 * freq).cos());
            }
        }
    }
    out
}

/// Fixed 1-D sinusoidal position table [len, d].
pub fn sinusoid_1d(len: usize, d: usize) -> Tensor {
    assert_eq!(d % 2, 0, "1-D sinusoid needs even dim, got {d}");
    let mut out = Tensor::zeros(&[len, d]);
    for t in 0..len {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            out.set2(t, 2 * i, (t as f64 * freq).sin());
            out.set2(t, 2 * i + 1, (t as f64 * freq).cos());
        }
    }
    out
}

/// Global L2 norm over a set of gradients.
pub fn global_grad_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt()
}

/// AdamW with decoupled weight decay and global-norm gradient clipping.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    step: usize,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> AdamW {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip_norm: 1.0,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Apply one update. `trainable` filters parameters by name; frozen
    /// parameters are left bit-identical. Clipping happens over the trainable
    /// subset before the update.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        trainable: impl Fn(&str) -> bool,
    ) {
        self.step += 1;
        let mut norm_sq = 0.0;
        for (name, g) in grads {
            if trainable(name) {
                norm_sq += g.data().iter().map(|v| v * v).sum::<f64>();
            }
        }
        let norm = norm_sq.sqrt();
        let clip = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            if !trainable(name) {
                continue;
            }
            let p = store.get_mut(name);
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for i in 0..p.numel() {
                let gi = g.data()[i] * clip;
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let pv = p.data()[i];
                p.data_mut()[i] = pv - self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * pv);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;

    #[test]
    fn param_init_is_order_independent() {
        let mut a = ParamStore::new();
        init_linear(&mut a, "x", 4, 3, 7);
        init_linear(&mut a, "y", 4, 3, 7);
        let mut b = ParamStore::new();
        init_linear(&mut b, "y", 4, 3, 7);
        init_linear(&mut b, "x", 4, 3, 7);
        assert_eq!(a.get("x.w"), b.get("x.w"));
        assert_eq!(a.get("y.w"), b.get("y.w"));
        assert_ne!(a.get("x.w"), a.get("y.w"), "different names get different init");
    }

    #[test]
    fn session_binds_each_parameter_once() {
        let mut store = ParamStore::new();
        init_linear(&mut store, "lin", 3, 3, 0);
        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        let x1 = tape.leaf(Tensor::ones(&[2, 3]));
        let x2 = tape.leaf(Tensor::ones(&[2, 3]));
        // Same weights used twice: gradient should accumulate on one leaf.
        let y = linear(&s, "lin", x1).add(&linear(&s, "lin", x2)).sum();
        let grads = tape.backward(y);
        let named = s.collect_grads(&grads);
        assert_eq!(named.len(), 2);
        let bias_grad = &named["lin.b"];
        assert_eq!(bias_grad.data(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn mha_rows_sum_to_one_and_backprops() {
        let mut store = ParamStore::new();
        init_mha(&mut store, "attn", 8, 1);
        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        let q = tape.leaf(Tensor::new(&[3, 8], (0..24).map(|i| (i as f64 * 0.13).sin()).collect()));
        let kv = tape.leaf(Tensor::new(&[5, 8], (0..40).map(|i| (i as f64 * 0.07).cos()).collect()));
        let (out, attn) = mha(&s, "attn", q, kv, 2, None);
        assert_eq!(out.shape(), vec![3, 8]);
        for r in 0..3 {
            let sum: f64 = (0..5).map(|c| attn.at2(r, c)).sum();
            assert!((sum - 1.0).abs() < 1e-9, "attention row {r} sums to {sum}");
        }
        let grads = tape.backward(out.mul(&out).mean());
        let named = s.collect_grads(&grads);
        assert!(named["attn.wq.w"].data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn mha_matches_finite_differences() {
        let mut store = ParamStore::new();
        init_mha(&mut store, "a", 4, 3);
        let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
        let tensors: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
        let r = check_gradients(
            |tape, vs| {
                let mut st = ParamStore::new();
                for (n, v) in names.iter().zip(vs) {
                    st.insert(n, v.value());
                }
                // Bind the leaf vars directly via a session-free forward: emulate
                // by constructing a store on the fly is not differentiable, so
                // instead express attention inline from the vs.
                let _ = st;
                let q_in = tape.constant(Tensor::new(&[2, 4], vec![0.3, -0.1, 0.5, 0.2, 0.0, 0.7, -0.4, 0.1]));
                let kv = tape.constant(Tensor::new(&[3, 4], (0..12).map(|i| (i as f64 * 0.21).sin()).collect()));
                // order of names: a.wk.b, a.wk.w, a.wo.b, a.wo.w, a.wq.b, a.wq.w, a.wv.b, a.wv.w
                let k = kv.matmul(&vs[1]).add_bias(&vs[0]);
                let o_b = vs[2];
                let o_w = vs[3];
                let q = q_in.matmul(&vs[5]).add_bias(&vs[4]);
                let v = kv.matmul(&vs[7]).add_bias(&vs[6]);
                let dh = 2;
                let mut ctxs = Vec::new();
                for h in 0..2 {
                    let qh = q.slice_cols(h * dh, dh);
                    let kh = k.slice_cols(h * dh, dh);
                    let vh = v.slice_cols(h * dh, dh);
                    let attn = qh.matmul(&kh.t()).scale(1.0 / (dh as f64).sqrt()).softmax_rows();
                    ctxs.push(attn.matmul(&vh));
                }
                let ctx = crate::autodiff::concat_cols(&ctxs);
                ctx.matmul(&o_w).add_bias(&o_b).mul(&ctx.matmul(&o_w).add_bias(&o_b)).mean()
            },
            &tensors,
            1e-5,
        );
        assert!(r.max_rel_error < 1e-6, "rel error {:?}", r);
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::new(&[2], vec![3.0, -2.0]));
        let mut opt = AdamW::new(0.1, 0.0);
        for _ in 0..400 {
            let tape = Tape::new();
            let s = Session::new(&tape, &store);
            let x = s.p("x");
            let loss = x.mul(&x).sum();
            let grads = tape.backward(loss);
            let named = s.collect_grads(&grads);
            opt.step(&mut store, &named, |_| true);
        }
        for v in store.get("x").data() {
            assert!(v.abs() < 1e-3, "did not converge: {v}");
        }
    }

    #[test]
    fn adamw_freezes_filtered_parameters() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::scalar(1.0));
        store.insert("b", Tensor::scalar(1.0));
        let before = store.get("b").clone();
        let mut opt = AdamW::new(0.1, 0.01);
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::scalar(0.5));
        grads.insert("b".to_string(), Tensor::scalar(0.5));
        opt.step(&mut store, &grads, |n| n == "a");
        assert_eq!(store.get("b"), &before, "frozen parameter changed");
        assert_ne!(store.get("a"), &Tensor::scalar(1.0));
    }

    #[test]
    fn grad_clip_equals_prescaled_gradient() {
        // Feeding g with clip_norm=1 must match feeding g/||g|| with clipping
        // effectively disabled.
        let grads_raw = Tensor::new(&[2], vec![300.0, 400.0]);
        let scaled = Tensor::new(&[2], vec![0.6, 0.8]);

        let mut store_a = ParamStore::new();
        store_a.insert("x", Tensor::new(&[2], vec![1.0, -1.0]));
        let mut opt_a = AdamW::new(0.05, 0.01);
        let mut g_a = BTreeMap::new();
        g_a.insert("x".to_string(), grads_raw);
        opt_a.step(&mut store_a, &g_a, |_| true);

        let mut store_b = ParamStore::new();
        store_b.insert("x", Tensor::new(&[2], vec![1.0, -1.0]));
        let mut opt_b = AdamW::new(0.05, 0.01);
        opt_b.clip_norm = f64::INFINITY;
        let mut g_b = BTreeMap::new();
        g_b.insert("x".to_string(), scaled);
        opt_b.step(&mut store_b, &g_b, |_| true);

        assert_eq!(store_a.get("x"), store_b.get("x"));
    }

    #[test]
    fn sinusoid_2d_origin_row() {
        let pe = sinusoid_2d(4, 8);
        // token 0 is grid position (0,0): all sin entries 0, cos entries 1.
        for i in 0..2 {
            assert_eq!(pe.at2(0, 2 * i), 0.0);
            assert_eq!(pe.at2(0, 2 * i + 1), 1.0);
        }
        // distinct tokens get distinct encodings
        assert_ne!(
            (0..8).map(|c| pe.at2(1, c)).collect::<Vec<_>>(),
            (0..8).map(|c| pe.at2(4, c)).collect::<Vec<_>>()
        );
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let m = causal_mask(3);
        assert_eq!(m.at2(0, 0), 0.0);
        assert!(m.at2(0, 2) < -1e29);
        assert_eq!(m.at2(2, 1), 0.0);
    }
}
