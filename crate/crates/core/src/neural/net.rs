//! Token-attention Q-network with a safe-set query and dueling head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::params::{ParamId, Params};
use super::tensor::{positional_encoding, NodeId, Tape, Tensor};
use crate::env::{token, token_width, Observation};
use crate::scenario::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    Mlp,
    SelfAttnOnly,
    NoNoisy,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::Mlp, Variant::SelfAttnOnly, Variant::NoNoisy];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Mlp => "mlp",
            Variant::SelfAttnOnly => "self-attn-only",
            Variant::NoNoisy => "no-noisy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Dueling,
    Plain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub head: HeadKind,
    pub noisy: bool,
    pub sigma0: f64,
    pub cross_attention: bool,
    pub variant: Variant,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            layers: 2,
            head: HeadKind::Dueling,
            noisy: true,
            sigma0: 0.1,
            cross_attention: true,
            variant: Variant::Full,
        }
    }
}

impl NetworkConfig {
    /// Apply an architecture variant on top of the current sizes.
    pub fn with_variant(mut self, v: Variant) -> Self {
        self.variant = v;
        self.noisy = v != Variant::NoNoisy;
        self.cross_attention = matches!(v, Variant::Full | Variant::NoNoisy);
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if self.sigma0 < 0.0 {
            return Err("noisy sigma must be non-negative".into());
        }
        Ok(())
    }

    /// Stable text form used for checkpoint compatibility hashes.
    pub fn describe(&self) -> String {
        format!(
            "d{}-h{}-l{}-{:?}-noisy{}-s{}-x{}-{}",
            self.d_model,
            self.heads,
            self.layers,
            self.head,
            self.noisy,
            self.sigma0,
            self.cross_attention,
            self.variant.name()
        )
    }
}

/// Input dimensions derived from a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputSpec {
    pub feat_width: usize,
    pub task_cats: usize,
    pub subtask_cats: usize,
    pub n_actions: usize,
}

impl InputSpec {
    pub fn for_scenario(s: &Scenario) -> Self {
        Self {
            feat_width: token_width(s),
            task_cats: s.tasks.len() + 1,
            subtask_cats: s.subtasks.len() + 1,
            n_actions: s.tasks.len() + 1,
        }
    }
}

#[derive(Debug, Clone)]
struct Dense {
    w: ParamId,
    b: ParamId,
    sigma: Option<(ParamId, ParamId)>,
    noise_slot: usize,
    d_in: usize,
    d_out: usize,
}

#[derive(Debug, Clone)]
struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct Attention {
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
}

#[derive(Debug, Clone)]
struct Block {
    attn: Attention,
    ln1: LayerNorm,
    ff1: Dense,
    ff2: Dense,
    ln2: LayerNorm,
}

#[derive(Debug, Clone)]
struct Layout {
    feat: Dense,
    kind_emb: ParamId,
    task_emb: ParamId,
    sub_emb: ParamId,
    action_emb: ParamId,
    safe_emb: ParamId,
    blocks: Vec<Block>,
    mlp: Option<(Dense, Dense)>,
    cross: Option<(Attention, LayerNorm)>,
    pool_ln: Option<LayerNorm>,
    adv1: Dense,
    adv2: Dense,
    val1: Option<Dense>,
    val2: Option<Dense>,
}

/// Factorized noise of one noisy layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNoise {
    pub eps_w: Vec<f64>,
    pub eps_b: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: NetworkConfig,
    pub spec: InputSpec,
    pub params: Params,
    layout: Layout,
    noisy_dims: Vec<(usize, usize)>,
    /// Current noise per noisy layer; `None` is frozen-zero mode.
    noise: Option<Vec<LayerNoise>>,
}

struct Builder<'a, R: Rng> {
    params: &'a mut Params,
    rng: &'a mut R,
    noisy_dims: Vec<(usize, usize)>,
    sigma0: f64,
}

impl<R: Rng> Builder<'_, R> {
    fn dense(&mut self, name: &str, d_in: usize, d_out: usize, noisy: bool) -> Dense {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = self.params.add_uniform(&format!("{name}.w"), d_in, d_out, bound, self.rng);
        let b = self.params.add_uniform(&format!("{name}.b"), 1, d_out, bound, self.rng);
        let (sigma, noise_slot) = if noisy {
            let s = self.sigma0 / (d_in as f64).sqrt();
            let sw = self.params.add_const(&format!("{name}.sigma_w"), d_in, d_out, s);
            let sb = self.params.add_const(&format!("{name}.sigma_b"), 1, d_out, s);
            self.noisy_dims.push((d_in, d_out));
            (Some((sw, sb)), self.noisy_dims.len() - 1)
        } else {
            (None, usize::MAX)
        };
        Dense { w, b, sigma, noise_slot, d_in, d_out }
    }

    fn ln(&mut self, name: &str, d: usize) -> LayerNorm {
        LayerNorm {
            gain: self.params.add_const(&format!("{name}.gain"), 1, d, 1.0),
            bias: self.params.add_const(&format!("{name}.bias"), 1, d, 0.0),
        }
    }

    fn table(&mut self, name: &str, rows: usize, d: usize) -> ParamId {
        self.params.add_uniform(name, rows, d, 0.1, self.rng)
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.dense(&format!("{name}.q"), d, d, false),
            k: self.dense(&format!("{name}.k"), d, d, false),
            v: self.dense(&format!("{name}.v"), d, d, false),
            o: self.dense(&format!("{name}.o"), d, d, false),
        }
    }
}

fn scaled_noise<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            x.signum() * x.abs().sqrt()
        })
        .collect()
}

impl Network {
    pub fn new(cfg: NetworkConfig, spec: InputSpec, seed: u64) -> Self {
        cfg.validate().expect("valid network config");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let d = cfg.d_model;
        let mut b = Builder { params: &mut params, rng: &mut rng, noisy_dims: Vec::new(), sigma0: cfg.sigma0 };
        let feat = b.dense("embed.feat", spec.feat_width, d, false);
        let kind_emb = b.table("embed.kind", token::KINDS, d);
        let task_emb = b.table("embed.task", spec.task_cats, d);
        let sub_emb = b.table("embed.subtask", spec.subtask_cats, d);
        let action_emb = b.table("query.action", spec.n_actions, d);
        let safe_emb = b.table("query.safe", 2, d);
        let (blocks, mlp) = if cfg.variant == Variant::Mlp {
            let m1 = b.dense("mlp.1", d, 2 * d, false);
            let m2 = b.dense("mlp.2", 2 * d, d, false);
            (Vec::new(), Some((m1, m2)))
        } else {
            let blocks = (0..cfg.layers)
                .map(|i| Block {
                    attn: b.attention(&format!("block{i}.attn"), d),
                    ln1: b.ln(&format!("block{i}.ln1"), d),
                    ff1: b.dense(&format!("block{i}.ff1"), d, 2 * d, false),
                    ff2: b.dense(&format!("block{i}.ff2"), 2 * d, d, false),
                    ln2: b.ln(&format!("block{i}.ln2"), d),
                })
                .collect();
            (blocks, None)
        };
        let cross = cfg.cross_attention.then(|| (b.attention("cross", d), b.ln("cross.ln", d)));
        let pool_ln = (!cfg.cross_attention).then(|| b.ln("pool.ln", d));
        let adv1 = b.dense("adv.1", d, d, cfg.noisy);
        let adv2 = b.dense("adv.2", d, 1, cfg.noisy);
        let (val1, val2) = if cfg.head == HeadKind::Dueling {
            (Some(b.dense("val.1", d, d, cfg.noisy)), Some(b.dense("val.2", d, 1, cfg.noisy)))
        } else {
            (None, None)
        };
        let noisy_dims = b.noisy_dims;
        Self {
            cfg,
            spec,
            params,
            layout: Layout {
                feat,
                kind_emb,
                task_emb,
                sub_emb,
                action_emb,
                safe_emb,
                blocks,
                mlp,
                cross,
                pool_ln,
                adv1,
                adv2,
                val1,
                val2,
            },
            noisy_dims,
            noise: None,
        }
    }

    pub fn for_scenario(s: &Scenario, cfg: NetworkConfig, seed: u64) -> Self {
        Self::new(cfg, InputSpec::for_scenario(s), seed)
    }

    /// Draw fresh factorized noise for every noisy layer.
    pub fn sample_noise<R: Rng>(&mut self, rng: &mut R) {
        if self.noisy_dims.is_empty() {
            return;
        }
        let noise = self
            .noisy_dims
            .iter()
            .map(|&(i, o)| {
                let fi = scaled_noise(rng, i);
                let fo = scaled_noise(rng, o);
                let mut eps_w = Vec::with_capacity(i * o);
                for a in &fi {
                    eps_w.extend(fo.iter().map(|b| a * b));
                }
                LayerNoise { eps_w, eps_b: fo }
            })
            .collect();
        self.noise = Some(noise);
    }

    /// Frozen-zero mode: noisy layers reduce to their mean parameters.
    pub fn freeze_noise(&mut self) {
        self.noise = None;
    }

    pub fn noise(&self) -> Option<&[LayerNoise]> {
        self.noise.as_deref()
    }

    pub fn set_noise(&mut self, noise: Option<Vec<LayerNoise>>) {
        self.noise = noise;
    }

    pub fn n_noisy_layers(&self) -> usize {
        self.noisy_dims.len()
    }

    fn dense(&self, t: &mut Tape, l: &Dense, x: NodeId) -> NodeId {
        let (mut w, mut b) = (t.param(l.w), t.param(l.b));
        if let (Some((sw, sb)), Some(noise)) = (l.sigma, self.noise.as_ref()) {
            let n = &noise[l.noise_slot];
            debug_assert_eq!(n.eps_w.len(), l.d_in * l.d_out);
            let sw = t.param(sw);
            let nw = t.mul_const(sw, n.eps_w.clone());
            w = t.add(w, nw);
            let sb = t.param(sb);
            let nb = t.mul_const(sb, n.eps_b.clone());
            b = t.add(b, nb);
        }
        let y = t.matmul(x, w);
        t.add_row(y, b)
    }

    fn layer_norm(&self, t: &mut Tape, l: &LayerNorm, x: NodeId) -> NodeId {
        let n = t.normalize_rows(x);
        let g = t.param(l.gain);
        let y = t.mul_row(n, g);
        let b = t.param(l.bias);
        t.add_row(y, b)
    }

    fn attention(&self, t: &mut Tape, a: &Attention, xq: NodeId, xkv: NodeId) -> NodeId {
        let d = self.cfg.d_model;
        let dk = d / self.cfg.heads;
        let q = self.dense(t, &a.q, xq);
        let k = self.dense(t, &a.k, xkv);
        let v = self.dense(t, &a.v, xkv);
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = t.slice_cols(q, h * dk, dk);
            let kh = t.slice_cols(k, h * dk, dk);
            let vh = t.slice_cols(v, h * dk, dk);
            let s = t.matmul_bt(qh, kh);
            let s = t.scale(s, scale);
            let p = t.softmax_rows(s);
            outs.push(t.matmul(p, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { t.concat_cols(&outs) };
        self.dense(t, &a.o, cat)
    }

    fn ffn(&self, t: &mut Tape, l1: &Dense, l2: &Dense, x: NodeId) -> NodeId {
        let h = self.dense(t, l1, x);
        let h = t.relu(h);
        self.dense(t, l2, h)
    }

    /// Record the forward pass and return the `n_actions×1` Q node.
    pub fn forward_tape(&self, t: &mut Tape, obs: &Observation, mask: &[bool]) -> NodeId {
        assert_eq!(mask.len(), self.spec.n_actions, "mask length does not match the action count");
        let l = &self.layout;
        let n = obs.tokens.len();
        let d = self.cfg.d_model;
        let fw = self.spec.feat_width;
        let mut feats = Vec::with_capacity(n * fw);
        let mut pe = Vec::with_capacity(n * d);
        for (pos, tok) in obs.tokens.iter().enumerate() {
            assert_eq!(tok.feats.len(), fw, "token width does not match the network");
            feats.extend_from_slice(&tok.feats);
            pe.extend((0..d).map(|i| positional_encoding(pos, i, d)));
        }
        let feats = t.constant(Tensor::from_vec(n, fw, feats));
        let mut x = self.dense(t, &l.feat, feats);
        let kinds: Vec<usize> = obs.tokens.iter().map(|k| k.kind).collect();
        let tasks: Vec<usize> = obs.tokens.iter().map(|k| k.task).collect();
        let subs: Vec<usize> = obs.tokens.iter().map(|k| k.subtask).collect();
        for (table, idx) in [(l.kind_emb, kinds), (l.task_emb, tasks), (l.sub_emb, subs)] {
            let tb = t.param(table);
            let e = t.gather(tb, &idx);
            x = t.add(x, e);
        }
        let pe = t.constant(Tensor::from_vec(n, d, pe));
        x = t.add(x, pe);

        for b in &l.blocks {
            let a = self.attention(t, &b.attn, x, x);
            let r = t.add(x, a);
            let h = self.layer_norm(t, &b.ln1, r);
            let f = self.ffn(t, &b.ff1, &b.ff2, h);
            let r = t.add(h, f);
            x = self.layer_norm(t, &b.ln2, r);
        }
        if let Some((m1, m2)) = &l.mlp {
            let f = self.ffn(t, m1, m2, x);
            x = t.add(x, f);
        }

        let a_n = self.spec.n_actions;
        let ae = t.param(l.action_emb);
        let actions: Vec<usize> = (0..a_n).collect();
        let q = t.gather(ae, &actions);
        let se = t.param(l.safe_emb);
        let bits: Vec<usize> = mask.iter().map(|&m| m as usize).collect();
        let s = t.gather(se, &bits);
        let q = t.add(q, s);
        let pooled = t.mean_rows(x);
        let h = match &l.cross {
            Some((att, ln)) => {
                let c = self.attention(t, att, q, x);
                let r = t.add(q, c);
                self.layer_norm(t, ln, r)
            }
            None => {
                let p = t.broadcast_rows(pooled, a_n);
                let r = t.add(q, p);
                self.layer_norm(t, l.pool_ln.as_ref().expect("pooling norm without cross attention"), r)
            }
        };
        let adv = self.ffn(t, &l.adv1, &l.adv2, h);
        match (&l.val1, &l.val2) {
            (Some(v1), Some(v2)) => {
                let v = self.ffn(t, v1, v2, pooled);
                let c = t.center(adv);
                t.add_scalar(c, v)
            }
            _ => adv,
        }
    }

    /// Q-values for every action. The mask enters only as the query; it
    /// does not hide any output.
    pub fn forward_q(&self, obs: &Observation, mask: &[bool]) -> Vec<f64> {
        let mut t = Tape::new(&self.params);
        let out = self.forward_tape(&mut t, obs, mask);
        t.value(out).data.clone()
    }

    /// Add the gradient of a loss with `dloss/dQ = seed` into `grads`.
    pub fn backward(&self, obs: &Observation, mask: &[bool], seed: impl FnOnce(&[f64]) -> Vec<f64>, grads: &mut Params) -> Vec<f64> {
        let mut t = Tape::new(&self.params);
        let out = self.forward_tape(&mut t, obs, mask);
        let q = t.value(out).data.clone();
        t.backward(out, seed(&q), grads);
        q
    }
}

/// Scalar loss of the Q-vector with its gradient.
pub type LossFn<'a> = &'a dyn Fn(&[f64]) -> (f64, Vec<f64>);

/// Largest relative error between reverse-mode and central-difference
/// gradients over `samples` randomly chosen scalar parameters.
///
/// Noise must be frozen. Entries where both gradients are below `1e-7`
/// count as exact.
pub fn grad_check(net: &Network, obs: &Observation, mask: &[bool], loss: LossFn, h: f64, samples: usize, seed: u64) -> f64 {
    assert!(net.noise().is_none(), "grad_check needs frozen-zero noise");
    let mut grads = net.params.zeros_like();
    net.backward(obs, mask, |q| loss(q).1, &mut grads);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    let n_tensors = net.params.len();
    for _ in 0..samples {
        let ti = rng.gen_range(0..n_tensors);
        let len = net.params.get(ti).data.len();
        let j = rng.gen_range(0..len);
        let orig = net.params.get(ti).data[j];
        probe.params.get_mut(ti).data[j] = orig + h;
        let lp = loss(&probe.forward_q(obs, mask)).0;
        probe.params.get_mut(ti).data[j] = orig - h;
        let lm = loss(&probe.forward_q(obs, mask)).0;
        probe.params.get_mut(ti).data[j] = orig;
        let numeric = (lp - lm) / (2.0 * h);
        let analytic = grads.get(ti).data[j];
        let scale = analytic.abs().max(numeric.abs());
        if scale > 1e-7 {
            worst = worst.max((analytic - numeric).abs() / scale);
        }
    }
    worst
}
