use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId, PROB_FLOOR};
use super::params::{ParamId, ParamStore};
use super::tensor::{softmax_rows, Tensor};
use crate::boxes::{BoxSpec, BoxType, DEFAULT_MAX_BOXES, DEFAULT_MAX_BOX_LEN};
use crate::corpus::DEFAULT_MAX_LEN;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub n_enc: usize,
    pub n_dec: usize,
    pub heads: usize,
    /// Hidden width of the feed-forward blocks.
    pub d_ff: usize,
    pub d_r: usize,
    pub max_len: usize,
    pub max_box_len: usize,
    pub max_boxes: usize,
    /// Weights start uniform in `(-init_scale, init_scale)`.
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            n_enc: 2,
            n_dec: 2,
            heads: 4,
            d_ff: 128,
            d_r: 32,
            max_len: DEFAULT_MAX_LEN,
            max_box_len: DEFAULT_MAX_BOX_LEN,
            max_boxes: DEFAULT_MAX_BOXES,
            init_scale: 0.08,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("d_r", self.d_r),
            ("max_len", self.max_len),
            ("max_box_len", self.max_box_len),
            ("max_boxes", self.max_boxes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.d ({}) must be divisible by model.heads ({})",
                self.d, self.heads
            )));
        }
        if self.max_box_len > self.max_len || self.max_boxes > self.max_len {
            return Err(Error::Config(
                "max_box_len and max_boxes cannot exceed max_len".into(),
            ));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config("model.init_scale must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Attn {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Debug, Clone)]
struct Ffn {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct EncLayer {
    ln1: Norm,
    attn: Attn,
    ln2: Norm,
    ffn: Ffn,
}

#[derive(Debug, Clone)]
struct DecLayer {
    ln1: Norm,
    self_attn: Attn,
    ln2: Norm,
    cross: Attn,
    ln3: Norm,
    ffn: Ffn,
}

#[derive(Debug, Clone)]
struct Layout {
    region_w: ParamId,
    region_b: ParamId,
    enc: Vec<EncLayer>,
    enc_ln: Norm,

    tok_emb: ParamId,
    type_emb: ParamId,
    within_emb: ParamId,
    global_emb: ParamId,

    bound_len_emb: ParamId,
    bound_step_emb: ParamId,
    bound_bos: ParamId,
    bound_layer: DecLayer,
    bound_ln: Norm,
    type_head_w: ParamId,
    type_head_b: ParamId,
    len_head_w: ParamId,
    len_head_b: ParamId,

    dec: Vec<DecLayer>,
    dec_ln: Norm,
    out_w: ParamId,
    out_b: ParamId,
}

struct Builder {
    store: ParamStore,
    rng: ChaCha8Rng,
    scale: f64,
}

impl Builder {
    fn uniform(&mut self, name: String, r: usize, c: usize) -> ParamId {
        let s = self.scale;
        let data = (0..r * c)
            .map(|_| if s > 0.0 { self.rng.gen_range(-s..s) } else { 0.0 })
            .collect();
        self.store.add(name, Tensor::from_vec(r, c, data))
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            g: self.store.add(format!("{name}.g"), Tensor::filled(1, d, 1.0)),
            b: self.store.add(format!("{name}.b"), Tensor::zeros(1, d)),
        }
    }

    fn attn(&mut self, name: &str, d: usize) -> Attn {
        Attn {
            wq: self.uniform(format!("{name}.wq"), d, d),
            bq: self.uniform(format!("{name}.bq"), 1, d),
            wk: self.uniform(format!("{name}.wk"), d, d),
            bk: self.uniform(format!("{name}.bk"), 1, d),
            wv: self.uniform(format!("{name}.wv"), d, d),
            bv: self.uniform(format!("{name}.bv"), 1, d),
            wo: self.uniform(format!("{name}.wo"), d, d),
            bo: self.uniform(format!("{name}.bo"), 1, d),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, d_ff: usize) -> Ffn {
        Ffn {
            w1: self.uniform(format!("{name}.w1"), d, d_ff),
            b1: self.uniform(format!("{name}.b1"), 1, d_ff),
            w2: self.uniform(format!("{name}.w2"), d_ff, d),
            b2: self.uniform(format!("{name}.b2"), 1, d),
        }
    }

    fn dec_layer(&mut self, name: &str, d: usize, d_ff: usize) -> DecLayer {
        DecLayer {
            ln1: self.norm(&format!("{name}.ln1"), d),
            self_attn: self.attn(&format!("{name}.self"), d),
            ln2: self.norm(&format!("{name}.ln2"), d),
            cross: self.attn(&format!("{name}.cross"), d),
            ln3: self.norm(&format!("{name}.ln3"), d),
            ffn: self.ffn(&format!("{name}.ffn"), d, d_ff),
        }
    }
}

/// Encoded region memory, one row per input region.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualContext {
    pub memory: Tensor,
}

impl VisualContext {
    pub fn regions(&self) -> usize {
        self.memory.rows()
    }
}

/// Two independent distributions from one bounding step.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundingDist {
    /// Over [`BoxType::ALL`], EOB included.
    pub types: Vec<f64>,
    /// `lengths[i]` is the probability of length `i + 1`.
    pub lengths: Vec<f64>,
}

/// Structural tag of one filling position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub ty: BoxType,
    pub box_index: usize,
    /// Position inside the box.
    pub within: usize,
    /// Position in the caption.
    pub global: usize,
}

/// Which canvas positions a position may attend to.
#[derive(Debug, Clone, PartialEq)]
pub enum Visibility {
    /// Every position sees every other one.
    All,
    /// A position sees all positions in its own box and earlier boxes.
    BoxCausal,
    /// A position sees itself and earlier positions.
    Causal,
    /// Row-major `len x len`; `true` means visible.
    Custom(Vec<bool>),
}

/// Decoder input for one filling pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    pub inputs: Vec<usize>,
    pub slots: Vec<Slot>,
    pub visibility: Visibility,
}

impl Canvas {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Row-major visibility matrix; `None` when everything is visible.
    pub fn mask(&self) -> Option<Vec<bool>> {
        let n = self.len();
        match &self.visibility {
            Visibility::All => None,
            Visibility::BoxCausal => Some(
                (0..n * n)
                    .map(|i| self.slots[i % n].box_index <= self.slots[i / n].box_index)
                    .collect(),
            ),
            Visibility::Causal => Some((0..n * n).map(|i| i % n <= i / n).collect()),
            Visibility::Custom(m) => Some(m.clone()),
        }
    }
}

/// Region encoder, bounding head and the shared filling decoder.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    vocab_size: usize,
    params: ParamStore,
    layout: Layout,
}

impl Model {
    pub fn new(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Model> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(Error::Config("vocabulary is empty".into()));
        }
        let c = &config;
        let mut b = Builder {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            scale: c.init_scale,
        };
        let (d, ff) = (c.d, c.d_ff);
        let region_w = b.uniform("enc.in.w".into(), c.d_r, d);
        let region_b = b.uniform("enc.in.b".into(), 1, d);
        let enc = (0..c.n_enc)
            .map(|i| EncLayer {
                ln1: b.norm(&format!("enc.{i}.ln1"), d),
                attn: b.attn(&format!("enc.{i}.attn"), d),
                ln2: b.norm(&format!("enc.{i}.ln2"), d),
                ffn: b.ffn(&format!("enc.{i}.ffn"), d, ff),
            })
            .collect();
        let enc_ln = b.norm("enc.ln", d);
        let tok_emb = b.uniform("emb.token".into(), vocab_size, d);
        let type_emb = b.uniform("emb.box_type".into(), BoxType::COUNT, d);
        let within_emb = b.uniform("emb.within".into(), c.max_box_len, d);
        let global_emb = b.uniform("emb.global".into(), c.max_len, d);
        let bound_len_emb = b.uniform("bound.emb.len".into(), c.max_box_len, d);
        let bound_step_emb = b.uniform("bound.emb.step".into(), c.max_boxes + 1, d);
        let bound_bos = b.uniform("bound.emb.bos".into(), 1, d);
        let bound_layer = b.dec_layer("bound.layer", d, ff);
        let bound_ln = b.norm("bound.ln", d);
        let type_head_w = b.uniform("bound.type_head.w".into(), d, BoxType::COUNT);
        let type_head_b = b.uniform("bound.type_head.b".into(), 1, BoxType::COUNT);
        let len_head_w = b.uniform("bound.len_head.w".into(), d, c.max_box_len);
        let len_head_b = b.uniform("bound.len_head.b".into(), 1, c.max_box_len);
        let dec = (0..c.n_dec)
            .map(|i| b.dec_layer(&format!("fill.{i}"), d, ff))
            .collect();
        let dec_ln = b.norm("fill.ln", d);
        let out_w = b.uniform("fill.out.w".into(), d, vocab_size);
        let out_b = b.uniform("fill.out.b".into(), 1, vocab_size);
        let layout = Layout {
            region_w,
            region_b,
            enc,
            enc_ln,
            tok_emb,
            type_emb,
            within_emb,
            global_emb,
            bound_len_emb,
            bound_step_emb,
            bound_bos,
            bound_layer,
            bound_ln,
            type_head_w,
            type_head_b,
            len_head_w,
            len_head_b,
            dec,
            dec_ln,
            out_w,
            out_b,
        };
        Ok(Model {
            config,
            vocab_size,
            params: b.store,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Parameter blocks of the bounding classifiers.
    pub fn head_params(&self) -> [ParamId; 4] {
        let l = &self.layout;
        [l.type_head_w, l.type_head_b, l.len_head_w, l.len_head_b]
    }

    /// Parameter blocks private to the filling decoder stack.
    pub fn filling_params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for layer in &self.layout.dec {
            ids.extend(layer_ids(layer));
        }
        ids.extend([self.layout.dec_ln.g, self.layout.dec_ln.b, self.layout.out_w, self.layout.out_b]);
        ids
    }

    // ---- graph builders ----

    fn attention(
        &self,
        g: &mut Graph<'_>,
        xq: NodeId,
        xkv: NodeId,
        a: &Attn,
        mask: Option<&Rc<Vec<bool>>>,
    ) -> NodeId {
        let heads = self.config.heads;
        let dh = self.config.d / heads;
        let q = g.linear(xq, a.wq, a.bq);
        let k = g.linear(xkv, a.wk, a.bk);
        let v = g.linear(xkv, a.wv, a.bv);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh),
                    g.slice_cols(k, h * dh, dh),
                    g.slice_cols(v, h * dh, dh),
                )
            };
            let s = g.matmul_nt(qh, kh);
            let s = g.scale(s, scale);
            let p = g.softmax(s, mask);
            outs.push(g.matmul(p, vh));
        }
        let cat = if heads == 1 { outs[0] } else { g.concat_cols(outs) };
        g.linear(cat, a.wo, a.bo)
    }

    fn ffn(&self, g: &mut Graph<'_>, x: NodeId, f: &Ffn) -> NodeId {
        let h = g.linear(x, f.w1, f.b1);
        let h = g.gelu(h);
        g.linear(h, f.w2, f.b2)
    }

    fn dec_layer(
        &self,
        g: &mut Graph<'_>,
        x: NodeId,
        ctx: NodeId,
        l: &DecLayer,
        mask: Option<&Rc<Vec<bool>>>,
    ) -> NodeId {
        let n = g.layer_norm(x, l.ln1.g, l.ln1.b);
        let a = self.attention(g, n, n, &l.self_attn, mask);
        let x = g.add(x, a);
        let n = g.layer_norm(x, l.ln2.g, l.ln2.b);
        let c = self.attention(g, n, ctx, &l.cross, None);
        let x = g.add(x, c);
        let n = g.layer_norm(x, l.ln3.g, l.ln3.b);
        let f = self.ffn(g, n, &l.ffn);
        g.add(x, f)
    }

    /// Region encoder: input projection then self-attention blocks, with no
    /// positional signal of any kind.
    pub fn encode(&self, g: &mut Graph<'_>, regions: &[Vec<f64>]) -> Result<NodeId> {
        if regions.is_empty() {
            return Err(Error::Model("cannot encode zero regions".into()));
        }
        if let Some(r) = regions.iter().find(|r| r.len() != self.config.d_r) {
            return Err(Error::Model(format!(
                "region dimension {} does not match model d_r {}",
                r.len(),
                self.config.d_r
            )));
        }
        let x = g.input(Tensor::from_rows(regions));
        let mut h = g.linear(x, self.layout.region_w, self.layout.region_b);
        for l in &self.layout.enc {
            let n = g.layer_norm(h, l.ln1.g, l.ln1.b);
            let a = self.attention(g, n, n, &l.attn, None);
            h = g.add(h, a);
            let n = g.layer_norm(h, l.ln2.g, l.ln2.b);
            let f = self.ffn(g, n, &l.ffn);
            h = g.add(h, f);
        }
        Ok(g.layer_norm(h, self.layout.enc_ln.g, self.layout.enc_ln.b))
    }

    /// Teacher-forced bounding logits. Row `t` predicts box `t + 1` from the
    /// BOS box and `history[..t]`; the last row follows the whole history.
    pub fn bounding_logits(
        &self,
        g: &mut Graph<'_>,
        ctx: NodeId,
        history: &[BoxSpec],
    ) -> Result<(NodeId, NodeId)> {
        let c = &self.config;
        if history.len() > c.max_boxes {
            return Err(Error::Model(format!(
                "bounding history of {} boxes exceeds max_boxes {}",
                history.len(),
                c.max_boxes
            )));
        }
        for b in history {
            if b.ty == BoxType::Eob || b.len == 0 || b.len > c.max_box_len {
                return Err(Error::Model(format!("invalid history box {b}")));
            }
        }
        let l = &self.layout;
        let bos = g.param(l.bound_bos);
        let x = if history.is_empty() {
            bos
        } else {
            let t = g.gather(l.type_emb, history.iter().map(|b| b.ty.index()).collect());
            let n = g.gather(l.bound_len_emb, history.iter().map(|b| b.len - 1).collect());
            let boxes = g.add(t, n);
            g.concat_rows(vec![bos, boxes])
        };
        let steps = g.gather(l.bound_step_emb, (0..=history.len()).collect());
        let x = g.add(x, steps);
        let n = history.len() + 1;
        let mask = Rc::new((0..n * n).map(|i| i % n <= i / n).collect::<Vec<bool>>());
        let h = self.dec_layer(g, x, ctx, &l.bound_layer, Some(&mask));
        let h = g.layer_norm(h, l.bound_ln.g, l.bound_ln.b);
        let types = g.linear(h, l.type_head_w, l.type_head_b);
        let lens = g.linear(h, l.len_head_w, l.len_head_b);
        Ok((types, lens))
    }

    fn check_canvas(&self, canvas: &Canvas) -> Result<()> {
        let c = &self.config;
        if canvas.inputs.len() != canvas.slots.len() {
            return Err(Error::LengthMismatch {
                expected: canvas.inputs.len(),
                actual: canvas.slots.len(),
            });
        }
        if canvas.is_empty() {
            return Err(Error::Model("empty filling canvas".into()));
        }
        if let Visibility::Custom(m) = &canvas.visibility {
            if m.len() != canvas.len() * canvas.len() {
                return Err(Error::LengthMismatch {
                    expected: canvas.len() * canvas.len(),
                    actual: m.len(),
                });
            }
        }
        if let Some(&t) = canvas.inputs.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Model(format!("token id {t} outside vocabulary")));
        }
        for s in &canvas.slots {
            if s.within >= c.max_box_len || s.global >= c.max_len || s.ty == BoxType::Eob {
                return Err(Error::Model(format!("slot {s:?} outside model limits")));
            }
        }
        Ok(())
    }

    /// Filling decoder logits for the positions listed in `rows` (all
    /// positions when `None`).
    pub fn fill_logits(
        &self,
        g: &mut Graph<'_>,
        ctx: NodeId,
        canvas: &Canvas,
        rows: Option<Vec<usize>>,
    ) -> Result<NodeId> {
        self.check_canvas(canvas)?;
        let l = &self.layout;
        let tok = g.gather(l.tok_emb, canvas.inputs.clone());
        let ty = g.gather(l.type_emb, canvas.slots.iter().map(|s| s.ty.index()).collect());
        let within = g.gather(l.within_emb, canvas.slots.iter().map(|s| s.within).collect());
        let global = g.gather(l.global_emb, canvas.slots.iter().map(|s| s.global).collect());
        let x = g.add(tok, ty);
        let x = g.add(x, within);
        let mut x = g.add(x, global);
        let mask = canvas.mask().map(Rc::new);
        for layer in &l.dec {
            x = self.dec_layer(g, x, ctx, layer, mask.as_ref());
        }
        let mut h = g.layer_norm(x, l.dec_ln.g, l.dec_ln.b);
        if let Some(rows) = rows {
            h = g.select_rows(h, rows);
        }
        Ok(g.linear(h, l.out_w, l.out_b))
    }

    // ---- inference wrappers ----

    pub fn encode_regions(&self, regions: &[Vec<f64>]) -> Result<VisualContext> {
        let mut g = Graph::new(&self.params);
        let out = self.encode(&mut g, regions)?;
        Ok(VisualContext {
            memory: g.value(out).clone(),
        })
    }

    /// Distributions for the next box after `history`.
    pub fn bounding_step(&self, ctx: &VisualContext, history: &[BoxSpec]) -> Result<BoundingDist> {
        if history.len() >= self.config.max_boxes {
            return Err(Error::Model("bounding history is full".into()));
        }
        let mut g = Graph::new(&self.params);
        let c = g.input(ctx.memory.clone());
        let (t, l) = self.bounding_logits(&mut g, c, history)?;
        let last = history.len();
        Ok(BoundingDist {
            types: floored_probs(g.value(t)).row(last).to_vec(),
            lengths: floored_probs(g.value(l)).row(last).to_vec(),
        })
    }

    /// Per-position vocabulary distributions for a canvas.
    pub fn fill_forward(&self, ctx: &VisualContext, canvas: &Canvas) -> Result<Vec<Vec<f64>>> {
        self.fill_forward_rows(ctx, canvas, None)
    }

    pub fn fill_forward_rows(
        &self,
        ctx: &VisualContext,
        canvas: &Canvas,
        rows: Option<Vec<usize>>,
    ) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new(&self.params);
        let c = g.input(ctx.memory.clone());
        let logits = self.fill_logits(&mut g, c, canvas, rows)?;
        Ok(floored_probs(g.value(logits)).to_rows())
    }
}

fn layer_ids(l: &DecLayer) -> Vec<ParamId> {
    let a = |a: &Attn| [a.wq, a.bq, a.wk, a.bk, a.wv, a.bv, a.wo, a.bo];
    let mut v = vec![l.ln1.g, l.ln1.b, l.ln2.g, l.ln2.b, l.ln3.g, l.ln3.b];
    v.extend(a(&l.self_attn));
    v.extend(a(&l.cross));
    v.extend([l.ffn.w1, l.ffn.b1, l.ffn.w2, l.ffn.b2]);
    v
}

/// Softmax with every probability floored at [`PROB_FLOOR`].
pub fn floored_probs(logits: &Tensor) -> Tensor {
    let mut p = softmax_rows(logits, None);
    for v in p.data_mut() {
        *v = v.max(PROB_FLOOR);
    }
    p
}
