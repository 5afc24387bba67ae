use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{GatherIndex, Tape, Var};
use crate::error::{Error, Result};
use crate::focal_bias::{self, SuppressionValue, WindowSchedule};
use crate::model::config::{ViTPConfig, IN_CHANNELS};
use crate::model::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
struct BlockIds {
    norm1_g: ParamId,
    norm1_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    bias: Option<ParamId>,
    norm2_g: ParamId,
    norm2_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct ModelIds {
    patch_w: ParamId,
    patch_b: ParamId,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<BlockIds>,
    norm_g: ParamId,
    norm_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

/// Plain ViT backbone (class token, absolute position embedding, pre-norm
/// blocks) with an optional focal bias on every attention head.
#[derive(Clone, Debug, PartialEq)]
pub struct ViTPModel<T: Scalar = f32> {
    cfg: ViTPConfig,
    schedule: WindowSchedule,
    params: ParamStore<T>,
    ids: ModelIds,
    bias_index: Option<GatherIndex>,
}

/// Per-call switches for [`ViTPModel::forward`].
#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Keep post-softmax attention maps.
    pub capture_attention: bool,
    /// Training mode: dropout and stochastic depth draw from this stream.
    pub rng: Option<&'a mut ChaCha8Rng>,
}

/// `[layer][head]` attention maps of shape `[batch, N_t, N_t]`.
pub type AttentionMaps<T> = Vec<Vec<Tensor<T>>>;

pub struct ForwardPass<T: Scalar> {
    pub logits: Var,
    /// Tape handles of every parameter, in store order.
    pub params: Vec<Var>,
    /// Present when captured.
    pub attention: Option<AttentionMaps<T>>,
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl<T: Scalar> ViTPModel<T> {
    /// Fresh model. Random draws happen in a fixed order that does not
    /// depend on the bias settings, so two configs that differ only in
    /// their focal bias share every other initial weight.
    pub fn new(cfg: &ViTPConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid()?;
        let schedule = cfg.schedule()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.embed_dim;
        let hidden = cfg.mlp_hidden();
        let n = cfg.tokens();

        let normal = |shape: Vec<usize>, rng: &mut ChaCha8Rng| {
            Tensor::<T>::from_fn(shape, |_| T::cast(trunc_normal(rng, INIT_STD)))
        };
        let ones = |len: usize| Tensor::<T>::full(vec![len], T::one());
        let zeros = |len: usize| Tensor::<T>::zeros(vec![len]);
        use ParamKind::*;

        let patch_w = store.push(
            "patch_embed.weight",
            Weight,
            true,
            normal(vec![cfg.patch_dim(), d], &mut rng),
        );
        let patch_b = store.push("patch_embed.bias", NoDecay, true, zeros(d));
        let cls = store.push("cls_token", NoDecay, true, zeros(d));
        let pos = store.push("pos_embed", NoDecay, true, normal(vec![n, d], &mut rng));

        let v = SuppressionValue::new(cfg.suppression)?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let p = |s: &str| format!("blocks.{l}.{s}");
            let norm1_g = store.push(p("norm1.weight"), NoDecay, true, ones(d));
            let norm1_b = store.push(p("norm1.bias"), NoDecay, true, zeros(d));
            let qkv_w = store.push(p("attn.qkv.weight"), Weight, true, normal(vec![d, 3 * d], &mut rng));
            let qkv_b = store.push(p("attn.qkv.bias"), NoDecay, true, zeros(3 * d));
            let proj_w = store.push(p("attn.proj.weight"), Weight, true, normal(vec![d, d], &mut rng));
            let proj_b = store.push(p("attn.proj.bias"), NoDecay, true, zeros(d));
            let bias = cfg.bias_mode.kind().map(|kind| {
                let table = focal_bias::init_bias_table::<T>(kind, schedule.layer(l), grid, v);
                store.push(p("attn.focal_bias"), FocalBias, cfg.learnable_bias, table)
            });
            let norm2_g = store.push(p("norm2.weight"), NoDecay, true, ones(d));
            let norm2_b = store.push(p("norm2.bias"), NoDecay, true, zeros(d));
            let fc1_w = store.push(p("mlp.fc1.weight"), Weight, true, normal(vec![d, hidden], &mut rng));
            let fc1_b = store.push(p("mlp.fc1.bias"), NoDecay, true, zeros(hidden));
            let fc2_w = store.push(p("mlp.fc2.weight"), Weight, true, normal(vec![hidden, d], &mut rng));
            let fc2_b = store.push(p("mlp.fc2.bias"), NoDecay, true, zeros(d));
            blocks.push(BlockIds {
                norm1_g,
                norm1_b,
                qkv_w,
                qkv_b,
                proj_w,
                proj_b,
                bias,
                norm2_g,
                norm2_b,
                fc1_w,
                fc1_b,
                fc2_w,
                fc2_b,
            });
        }
        let norm_g = store.push("norm.weight", NoDecay, true, ones(d));
        let norm_b = store.push("norm.bias", NoDecay, true, zeros(d));
        let head_w = store.push("head.weight", Weight, true, normal(vec![d, cfg.num_classes], &mut rng));
        let head_b = store.push("head.bias", NoDecay, true, zeros(cfg.num_classes));

        let bias_index = cfg
            .bias_mode
            .kind()
            .map(|kind| focal_bias::gather_index(kind, grid, true));
        Ok(ViTPModel {
            cfg: cfg.clone(),
            schedule,
            params: store,
            ids: ModelIds {
                patch_w,
                patch_b,
                cls,
                pos,
                blocks,
                norm_g,
                norm_b,
                head_w,
                head_b,
            },
            bias_index,
        })
    }

    pub fn config(&self) -> &ViTPConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &WindowSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Same model in another float type.
    pub fn cast<U: Scalar>(&self) -> ViTPModel<U> {
        ViTPModel {
            cfg: self.cfg.clone(),
            schedule: self.schedule.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
            bias_index: self.bias_index.clone(),
        }
    }

    /// Stored focal-bias parameters of one layer, `[heads, entries]`.
    pub fn focal_bias(&self, layer: usize) -> Option<&Tensor<T>> {
        self.ids.blocks[layer].bias.map(|id| &self.params.get(id).tensor)
    }

    /// Materialized `[heads, N_t, N_t]` bias of one layer.
    pub fn materialized_bias(&self, layer: usize) -> Option<Tensor<T>> {
        let table = self.focal_bias(layer)?;
        let index = self.bias_index.as_ref()?;
        let n = self.cfg.tokens();
        let heads = self.cfg.heads;
        let cols = table.shape()[1];
        let mut data = Vec::with_capacity(heads * n * n);
        for h in 0..heads {
            let row = &table.data()[h * cols..(h + 1) * cols];
            data.extend(index.iter().map(|ix| ix.map_or(T::zero(), |i| row[i as usize])));
        }
        Some(Tensor::new(vec![heads, n, n], data).expect("bias shape"))
    }

    /// Non-overlapping patches flattened in `(channel, y, x)` order:
    /// `[b·m², 3·p·p]`.
    pub fn patchify(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let (s, p) = (self.cfg.image_px, self.cfg.patch_px);
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != IN_CHANNELS || shape[2] != s || shape[3] != s {
            return Err(Error::Config(format!(
                "images of shape {shape:?} do not match [batch, {IN_CHANNELS}, {s}, {s}]"
            )));
        }
        let b = shape[0];
        let m = s / p;
        let pd = self.cfg.patch_dim();
        let src = images.data();
        let mut out = Vec::with_capacity(b * m * m * pd);
        for bi in 0..b {
            for pr in 0..m {
                for pc in 0..m {
                    for c in 0..IN_CHANNELS {
                        for y in 0..p {
                            let row = ((bi * IN_CHANNELS + c) * s + pr * p + y) * s + pc * p;
                            out.extend_from_slice(&src[row..row + p]);
                        }
                    }
                }
            }
        }
        Tensor::new(vec![b * m * m, pd], out)
    }

    /// Patch projection: `[b, m², D]`.
    pub fn patch_embed(&self, tape: &mut Tape<T>, images: &Tensor<T>, params: &[Var]) -> Result<Var> {
        let b = images.shape().first().copied().unwrap_or(0);
        let patches = tape.constant(self.patchify(images)?);
        let x = tape.matmul(patches, params[self.ids.patch_w.0])?;
        let x = tape.add_broadcast(x, params[self.ids.patch_b.0])?;
        tape.reshape(x, &[b, self.cfg.spatial_tokens(), self.cfg.embed_dim])
    }

    fn linear(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = tape.matmul(x, w)?;
        tape.add_broadcast(y, b)
    }

    fn dropout(&self, tape: &mut Tape<T>, x: Var, p: f64, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var> {
        let Some(rng) = rng.as_deref_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::cast(1.0 / (1.0 - p));
        let mask: Arc<[T]> = (0..tape.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        tape.mul_const(x, mask)
    }

    /// Per-sample residual-branch drop for `x: [b, N, D]`.
    fn drop_path(&self, tape: &mut Tape<T>, x: Var, p: f64, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var> {
        let Some(rng) = rng.as_deref_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let shape = tape.shape(x).to_vec();
        let per_sample: usize = shape[1..].iter().product();
        let keep = T::cast(1.0 / (1.0 - p));
        let mut mask = Vec::with_capacity(shape[0] * per_sample);
        for _ in 0..shape[0] {
            let f = if rng.random::<f64>() < p { T::zero() } else { keep };
            mask.extend(std::iter::repeat_n(f, per_sample));
        }
        tape.mul_const(x, Arc::from(mask))
    }

    /// Multi-head attention with an additive bias,
    /// `softmax(QKᵀ/√d_k + B)·V`, on `x: [b, N, D]`.
    ///
    /// `bias` is `[heads, N, N]` on the tape. Returns the output and, if
    /// requested, the `[b, heads, N, N]` attention weights.
    pub fn attention_with_bias(
        tape: &mut Tape<T>,
        x: Var,
        heads: usize,
        weights: AttentionWeights,
        bias: Option<Var>,
        capture: bool,
    ) -> Result<(Var, Option<Tensor<T>>)> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || !shape[2].is_multiple_of(heads) {
            return Err(Error::Shape(format!("attention input {shape:?} with {heads} heads")));
        }
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let dh = d / heads;
        if let Some(bias) = bias {
            if tape.shape(bias) != [heads, n, n] {
                return Err(Error::Config(format!(
                    "attention bias {:?} does not match [{heads}, {n}, {n}]",
                    tape.shape(bias)
                )));
            }
        }
        let flat = tape.reshape(x, &[b * n, d])?;
        let qkv = Self::linear(tape, flat, weights.qkv_w, weights.qkv_b)?;
        let qkv = tape.reshape(qkv, &[b, n, 3, heads, dh])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?; // [3, b, H, N, dh]
        let mut qkv_parts = [qkv; 3];
        for (i, part) in qkv_parts.iter_mut().enumerate() {
            let sel = tape.select(qkv, 0, i)?;
            *part = tape.reshape(sel, &[b * heads, n, dh])?;
        }
        let [q, k, v] = qkv_parts;
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, T::cast(1.0 / (dh as f64).sqrt()));
        let mut scores = tape.reshape(scores, &[b, heads, n, n])?;
        if let Some(bias) = bias {
            scores = tape.add_broadcast(scores, bias)?;
        }
        let attn = tape.softmax_rows(scores);
        let captured = capture.then(|| tape.value(attn).clone().with_requires_grad(false));
        let attn = tape.reshape(attn, &[b * heads, n, n])?;
        let out = tape.bmm(attn, v, false)?; // [bH, N, dh]
        let out = tape.reshape(out, &[b, heads, n, dh])?;
        let out = tape.permute(out, &[0, 2, 1, 3])?;
        let out = tape.reshape(out, &[b * n, d])?;
        let out = Self::linear(tape, out, weights.proj_w, weights.proj_b)?;
        Ok((tape.reshape(out, &[b, n, d])?, captured))
    }

    /// Registers every parameter on the tape (trainable ones with
    /// gradients) and runs the network on `[b, 3, s, s]` images.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        images: &Tensor<T>,
        mut opts: ForwardOptions<'_>,
    ) -> Result<ForwardPass<T>> {
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone().with_requires_grad(p.trainable)))
            .collect();
        let cfg = &self.cfg;
        let (d, n, heads) = (cfg.embed_dim, cfg.tokens(), cfg.heads);
        let b = images.shape().first().copied().unwrap_or(0);
        let pv = |id: ParamId| params[id.0];

        let tokens = self.patch_embed(tape, images, &params)?;
        let cls = tape.reshape(pv(self.ids.cls), &[1, d])?;
        let cls = tape.tile_leading(cls, b); // [b, 1, D]
        let mut x = tape.concat(&[cls, tokens], 1)?;
        x = tape.add_broadcast(x, pv(self.ids.pos))?;

        let mut maps = opts.capture_attention.then(Vec::new);
        for (l, ids) in self.ids.blocks.iter().enumerate() {
            let rate = if cfg.depth > 1 {
                cfg.drop_path * l as f64 / (cfg.depth - 1) as f64
            } else {
                cfg.drop_path
            };
            let bias = match (ids.bias, &self.bias_index) {
                (Some(id), Some(index)) => {
                    let g = tape.gather_cols(pv(id), index.clone())?;
                    Some(tape.reshape(g, &[heads, n, n])?)
                }
                _ => None,
            };
            let h = tape.layer_norm(x, pv(ids.norm1_g), pv(ids.norm1_b), cfg.ln_eps)?;
            let weights = AttentionWeights {
                qkv_w: pv(ids.qkv_w),
                qkv_b: pv(ids.qkv_b),
                proj_w: pv(ids.proj_w),
                proj_b: pv(ids.proj_b),
            };
            let (a, captured) = Self::attention_with_bias(tape, h, heads, weights, bias, maps.is_some())?;
            if let (Some(maps), Some(attn)) = (maps.as_mut(), captured) {
                maps.push(split_heads(&attn));
            }
            let a = self.dropout(tape, a, cfg.dropout, &mut opts.rng)?;
            let a = self.drop_path(tape, a, rate, &mut opts.rng)?;
            x = tape.add(x, a)?;

            let h = tape.layer_norm(x, pv(ids.norm2_g), pv(ids.norm2_b), cfg.ln_eps)?;
            let h = tape.reshape(h, &[b * n, d])?;
            let h = Self::linear(tape, h, pv(ids.fc1_w), pv(ids.fc1_b))?;
            let h = tape.gelu(h, cfg.gelu);
            let h = self.dropout(tape, h, cfg.dropout, &mut opts.rng)?;
            let h = Self::linear(tape, h, pv(ids.fc2_w), pv(ids.fc2_b))?;
            let h = self.dropout(tape, h, cfg.dropout, &mut opts.rng)?;
            let h = tape.reshape(h, &[b, n, d])?;
            let h = self.drop_path(tape, h, rate, &mut opts.rng)?;
            x = tape.add(x, h)?;
        }

        let cls_out = tape.select(x, 1, 0)?; // [b, D]
        let cls_out = tape.layer_norm(cls_out, pv(self.ids.norm_g), pv(self.ids.norm_b), cfg.ln_eps)?;
        let logits = Self::linear(tape, cls_out, pv(self.ids.head_w), pv(self.ids.head_b))?;
        Ok(ForwardPass {
            logits,
            params,
            attention: maps,
        })
    }

    /// Inference logits `[b, num_classes]`.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, images, ForwardOptions::default())?;
        Ok(tape.value(out.logits).clone().with_requires_grad(false))
    }

    /// Inference logits plus `[layer][head]` attention maps.
    pub fn logits_and_attention(&self, images: &Tensor<T>) -> Result<(Tensor<T>, AttentionMaps<T>)> {
        let mut tape = Tape::new();
        let out = self.forward(
            &mut tape,
            images,
            ForwardOptions {
                capture_attention: true,
                rng: None,
            },
        )?;
        let logits = tape.value(out.logits).clone().with_requires_grad(false);
        Ok((logits, out.attention.unwrap_or_default()))
    }

    /// Mean cross-entropy and the gradient of every trainable parameter
    /// (`None` for fixed ones), in store order.
    pub fn loss_and_grads(
        &self,
        images: &Tensor<T>,
        labels: &[usize],
        smoothing: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(T, Vec<Option<Vec<T>>>)> {
        let mut tape = Tape::new();
        let out = self.forward(
            &mut tape,
            images,
            ForwardOptions {
                capture_attention: false,
                rng,
            },
        )?;
        let loss = tape.cross_entropy_mean(out.logits, labels, smoothing)?;
        let value = tape.value(loss).data()[0];
        tape.backward(loss)?;
        let grads = out
            .params
            .iter()
            .zip(self.params.iter())
            .map(|(&v, p)| if p.trainable { tape.take_grad(v) } else { None })
            .collect();
        Ok((value, grads))
    }

    /// Mean cross-entropy without gradients.
    pub fn loss(&self, images: &Tensor<T>, labels: &[usize], smoothing: f64) -> Result<T> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, images, ForwardOptions::default())?;
        let loss = tape.cross_entropy_mean(out.logits, labels, smoothing)?;
        Ok(tape.value(loss).data()[0])
    }
}

/// Tape handles of one attention layer's projections.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub qkv_w: Var,
    pub qkv_b: Var,
    pub proj_w: Var,
    pub proj_b: Var,
}

/// `[b, H, N, N]` → per head `[b, N, N]`.
fn split_heads<T: Scalar>(attn: &Tensor<T>) -> Vec<Tensor<T>> {
    let s = attn.shape();
    let (b, h, n) = (s[0], s[1], s[2]);
    (0..h)
        .map(|head| {
            let mut data = Vec::with_capacity(b * n * n);
            for bi in 0..b {
                let start = (bi * h + head) * n * n;
                data.extend_from_slice(&attn.data()[start..start + n * n]);
            }
            Tensor::new(vec![b, n, n], data).expect("head map shape")
        })
        .collect()
}
