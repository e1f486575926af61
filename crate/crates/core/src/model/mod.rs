//! Promptable segmentation network.
//!
//! A frozen micro-ViT encodes the image into a token grid. Point prompts
//! become sinusoidal position features plus a learned foreground embedding.
//! A two-layer cross-attention decoder turns a learned mask token into one
//! logit per patch, which is upsampled 2x to the loss resolution.
//!
//! Tensor names follow the checkpoint layout: `patch_embed.*`, `pos_embed`,
//! `block{i}.*`, `neck.*`, `prompt.*` and `decoder.*`. Adapter tensors live
//! under `block{i}.attn_adapter.*` / `block{i}.mlp_adapter.*`; text
//! projections used by the prompt and decoder sites live under
//! `prompt.text_proj.*` / `decoder.text_proj.*`.

mod checkpoint;
mod config;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{
    load_checkpoint, read_manifest_header, save_checkpoint, Checkpoint, TensorEntry, CHECKPOINT_MANIFEST,
};
pub use config::*;

use crate::adapters::{is_trainable, ParallelAdapter, TextAdapter, TextProjection};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{uniform_init, Bindings, ParamId, ParamStore};
use crate::scenes::Point;
use crate::tensor::{c, Real, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Linear {
            w: store.add(format!("{prefix}.w"), uniform_init(rng, fan_in, fan_out))?,
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))?,
        })
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w))?;
        tape.add_row(y, p.var(self.b))
    }
}

#[derive(Clone, Debug)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

impl Norm {
    fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<Self> {
        Ok(Norm {
            g: store.add(format!("{prefix}.g"), Tensor::full(&[d], T::one()))?,
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[d]))?,
        })
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.g), p.var(self.b), LN_EPS)
    }
}

/// Multi-head attention with separate input projections for q, k and v.
#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        inner: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Attention {
            q: Linear::register(store, &format!("{prefix}.q"), d, inner, rng)?,
            k: Linear::register(store, &format!("{prefix}.k"), d, inner, rng)?,
            v: Linear::register(store, &format!("{prefix}.v"), d, inner, rng)?,
            o: Linear::register(store, &format!("{prefix}.o"), inner, d, rng)?,
            heads,
        })
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, q: Var, k: Var, v: Var) -> Result<Var> {
        let q = self.q.forward(tape, p, q)?;
        let k = self.k.forward(tape, p, k)?;
        let v = self.v.forward(tape, p, v)?;
        let q = tape.split_heads(q, self.heads)?;
        let k = tape.split_heads(k, self.heads)?;
        let v = tape.split_heads(v, self.heads)?;
        let a = tape.attention(q, k, v)?;
        let a = tape.merge_heads(a)?;
        self.o.forward(tape, p, a)
    }
}

#[derive(Clone, Debug)]
enum BlockAdapter {
    Plain(ParallelAdapter),
    Text(TextAdapter),
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    ln1: Norm,
    attn: Attention,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
    attn_adapter: Option<BlockAdapter>,
    mlp_adapter: Option<BlockAdapter>,
}

impl EncoderBlock {
    /// `y = x + MHSA(LN1 x) + A_attn(x)`, `z = y + MLP(LN2 y) + A_mlp(y[, t])`.
    fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var, t: Option<Var>) -> Result<Var> {
        let h = self.ln1.forward(tape, p, x)?;
        let a = self.attn.forward(tape, p, h, h, h)?;
        let y = residual(tape, p, x, a, self.attn_adapter.as_ref(), t)?;
        let h = self.ln2.forward(tape, p, y)?;
        let h = self.fc1.forward(tape, p, h)?;
        let h = tape.gelu(h);
        let m = self.fc2.forward(tape, p, h)?;
        residual(tape, p, y, m, self.mlp_adapter.as_ref(), t)
    }
}

/// Residual update `x + f` with an optional adapter branch reading `x`.
fn residual<T: Real>(
    tape: &mut Tape<T>,
    p: &Bindings,
    x: Var,
    f: Var,
    adapter: Option<&BlockAdapter>,
    t: Option<Var>,
) -> Result<Var> {
    match adapter {
        None => tape.add(x, f),
        Some(BlockAdapter::Plain(a)) => {
            let xa = a.forward(tape, p, x)?;
            tape.add(xa, f)
        }
        Some(BlockAdapter::Text(a)) => {
            let s = tape.add(x, f)?;
            let b = match t {
                Some(t) => a.forward(tape, p, x, t)?,
                None => a.bottleneck_of(tape, p, x)?,
            };
            tape.add(s, b)
        }
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    attn: Attention,
    norm: Norm,
}

#[derive(Clone, Debug)]
struct Layout {
    patch_embed: Linear,
    pos_embed: ParamId,
    blocks: Vec<EncoderBlock>,
    neck: Linear,
    neck_norm: Norm,
    fg_embed: ParamId,
    prompt_text: Option<TextProjection>,
    mask_token: ParamId,
    token_to_image: DecoderLayer,
    image_to_token: DecoderLayer,
    decoder_text: Option<TextProjection>,
}

/// Network weights plus the wiring selected by a [`VariantSpec`].
#[derive(Clone, Debug)]
pub struct Model<T> {
    cfg: ModelConfig,
    variant: VariantSpec,
    store: ParamStore<T>,
    layout: Layout,
}

/// Fixed sinusoidal features of a point in `[0, 1]²`: `dim/4` geometric
/// frequencies, laid out as `[sin x | cos x | sin y | cos y]`.
pub fn sinusoid_features(u: f64, v: f64, dim: usize, max_freq: f64) -> Vec<f64> {
    let n = dim / 4;
    let freq = |k: usize| {
        if n == 1 {
            1.0
        } else {
            max_freq.powf(k as f64 / (n - 1) as f64)
        }
    };
    let mut out = Vec::with_capacity(dim);
    for coord in [u, v] {
        out.extend((0..n).map(|k| (2.0 * PI * freq(k) * coord).sin()));
        out.extend((0..n).map(|k| (2.0 * PI * freq(k) * coord).cos()));
    }
    out
}

/// Nearest-neighbour resampling of a square binary mask to `size × size`.
pub fn resample_nearest(mask: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let &[h, w] = mask.shape() else {
        return Err(Error::invalid(format!("mask must be 2-D, got {:?}", mask.shape())));
    };
    if h != w || size == 0 || h % size != 0 {
        return Err(Error::invalid(format!(
            "cannot resample a {h}x{w} mask to {size}x{size}"
        )));
    }
    let s = h / size;
    Ok(Tensor::from_fn(&[size, size], |k| {
        let (i, j) = (k / size, k % size);
        mask.data()[(i * s + s / 2) * w + j * s + s / 2]
    }))
}

impl<T: Real> Model<T> {
    /// Fresh weights. Backbone tensors are drawn from one random stream and
    /// adapter tensors from another, so two variants built with the same seed
    /// share an identical backbone.
    pub fn new(cfg: &ModelConfig, variant: VariantSpec, seed: u64) -> Result<Self> {
        cfg.validate()?;
        variant.validate()?;
        let mut rb = ChaCha8Rng::seed_from_u64(seed);
        let mut ra = ChaCha8Rng::seed_from_u64(seed);
        ra.set_stream(1);
        let mut s = ParamStore::new();
        let (d, dd) = (cfg.embed_dim, cfg.decoder_dim);

        let patch_embed = Linear::register(&mut s, "patch_embed", cfg.patch_dim(), d, &mut rb)?;
        let pos = Tensor::from_fn(&[cfg.tokens(), d], |_| c(rb.gen_range(-0.1..0.1)));
        let pos_embed = s.add("pos_embed", pos)?;

        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let pre = format!("block{i}");
            let ln1 = Norm::register(&mut s, &format!("{pre}.ln1"), d)?;
            let attn = Attention::register(&mut s, &format!("{pre}.attn"), d, d, cfg.heads, &mut rb)?;
            let ln2 = Norm::register(&mut s, &format!("{pre}.ln2"), d)?;
            let fc1 = Linear::register(&mut s, &format!("{pre}.mlp.fc1"), d, d * cfg.mlp_ratio, &mut rb)?;
            let fc2 = Linear::register(&mut s, &format!("{pre}.mlp.fc2"), d * cfg.mlp_ratio, d, &mut rb)?;
            let (mut attn_adapter, mut mlp_adapter) = (None, None);
            if variant.adapters_enabled {
                let text_here = variant.injection_site == InjectionSite::ImageEncoder;
                let make = |s: &mut ParamStore<T>, name: &str, text: bool, ra: &mut ChaCha8Rng| {
                    let prefix = format!("{pre}.{name}");
                    Ok::<_, Error>(if text {
                        BlockAdapter::Text(TextAdapter::register(s, &prefix, d, cfg.text_dim, cfg.bottleneck, ra)?)
                    } else {
                        BlockAdapter::Plain(ParallelAdapter::register(s, &prefix, d, cfg.bottleneck, ra)?)
                    })
                };
                let attn_text = text_here && variant.text_placement == TextPlacement::MlpAndMhsa;
                attn_adapter = Some(make(&mut s, "attn_adapter", attn_text, &mut ra)?);
                mlp_adapter = Some(make(&mut s, "mlp_adapter", text_here, &mut ra)?);
            }
            blocks.push(EncoderBlock {
                ln1,
                attn,
                ln2,
                fc1,
                fc2,
                attn_adapter,
                mlp_adapter,
            });
        }

        let neck = Linear::register(&mut s, "neck.proj", d, dd, &mut rb)?;
        let neck_norm = Norm::register(&mut s, "neck.ln", dd)?;
        let fg = Tensor::from_fn(&[dd], |_| c(rb.gen_range(-1.0..1.0)));
        let fg_embed = s.add("prompt.fg_embed", fg)?;
        let prompt_text = match variant.injection_site {
            InjectionSite::PromptEncoder => Some(TextProjection::register(
                &mut s,
                "prompt.text_proj",
                cfg.text_dim,
                dd,
                &mut ra,
            )?),
            _ => None,
        };

        let tok = Tensor::from_fn(&[1, dd], |_| c(rb.gen_range(-1.0..1.0)));
        let mask_token = s.add("decoder.mask_token", tok)?;
        let (ai, ah) = (cfg.decoder_attn_dim, cfg.decoder_heads);
        let token_to_image = DecoderLayer {
            attn: Attention::register(&mut s, "decoder.token_to_image", dd, ai, ah, &mut rb)?,
            norm: Norm::register(&mut s, "decoder.norm1", dd)?,
        };
        let image_to_token = DecoderLayer {
            attn: Attention::register(&mut s, "decoder.image_to_token", dd, ai, ah, &mut rb)?,
            norm: Norm::register(&mut s, "decoder.norm2", dd)?,
        };
        let decoder_text = match variant.injection_site {
            InjectionSite::MaskDecoder => Some(TextProjection::register(
                &mut s,
                "decoder.text_proj",
                cfg.text_dim,
                dd,
                &mut ra,
            )?),
            _ => None,
        };

        Ok(Model {
            cfg: cfg.clone(),
            variant,
            store: s,
            layout: Layout {
                patch_embed,
                pos_embed,
                blocks,
                neck,
                neck_norm,
                fg_embed,
                prompt_text,
                mask_token,
                token_to_image,
                image_to_token,
                decoder_text,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn variant(&self) -> VariantSpec {
        self.variant
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        is_trainable(name, &self.variant)
    }

    /// Trainable parameter ids in store order.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|&id| self.is_trainable(self.store.name(id)))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            variant: self.variant,
            store: self.store.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Copy every same-named, same-shaped tensor from `src`. Returns the
    /// number of tensors copied.
    pub fn transplant(&mut self, src: &ParamStore<T>) -> usize {
        let mut n = 0;
        for (name, t) in src.iter() {
            if let Some(dst) = self.store.by_name_mut(name) {
                if dst.shape() == t.shape() {
                    *dst = t.clone();
                    n += 1;
                }
            }
        }
        n
    }

    /// All parameters on `tape`, trainable ones with gradients.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bindings {
        let v = self.variant;
        self.store.bind(tape, |n| is_trainable(n, &v))
    }

    /// All parameters as constants.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bindings {
        self.store.bind(tape, |_| false)
    }

    /// Bindings where trainable tensors are the given handles, in
    /// [`Model::trainable_ids`] order, and everything else is constant.
    pub fn bind_with(&self, tape: &mut Tape<T>, trainable: &[Var]) -> Result<Bindings> {
        let mut it = trainable.iter();
        let mut vars = Vec::with_capacity(self.store.len());
        for (name, t) in self.store.iter() {
            if self.is_trainable(name) {
                let v = it.next().ok_or_else(|| Error::invalid("too few trainable handles"))?;
                vars.push(*v);
            } else {
                vars.push(tape.constant(t.clone()));
            }
        }
        if it.next().is_some() {
            return Err(Error::invalid("too many trainable handles"));
        }
        Ok(Bindings::from_vars(vars))
    }

    /// Put a text embedding on the tape, checking it against the variant's
    /// injection site.
    pub fn text_input(&self, tape: &mut Tape<T>, t: Option<&[f32]>) -> Result<Option<Var>> {
        match (self.variant.uses_text(), t) {
            (true, None) => Err(Error::invalid(format!(
                "variant {} needs a class embedding",
                self.variant
            ))),
            (false, Some(_)) => Err(Error::invalid(format!(
                "variant {} takes no class embedding",
                self.variant
            ))),
            (_, None) => Ok(None),
            (_, Some(t)) => {
                if t.len() != self.cfg.text_dim {
                    return Err(Error::invalid(format!(
                        "class embedding has {} values, model expects {}",
                        t.len(),
                        self.cfg.text_dim
                    )));
                }
                let data = t.iter().map(|&v| c(v as f64)).collect();
                Ok(Some(tape.constant(Tensor::new(&[t.len()], data)?)))
            }
        }
    }

    fn site_text(&self, site: InjectionSite, t: Option<Var>, what: &str) -> Result<Option<Var>> {
        let wanted = self.variant.injection_site == site;
        match (wanted, t) {
            (true, None) => Err(Error::invalid(format!(
                "{what}: variant {} needs text here",
                self.variant
            ))),
            (false, Some(_)) => Err(Error::invalid(format!(
                "{what}: variant {} injects text elsewhere",
                self.variant
            ))),
            (_, t) => Ok(t),
        }
    }

    /// Image `[S, S, C]` to token features `[tokens, embed_dim]`.
    pub fn encode_image(&self, tape: &mut Tape<T>, p: &Bindings, image: &Tensor<f32>, t: Option<Var>) -> Result<Var> {
        let t = self.site_text(InjectionSite::ImageEncoder, t, "encode_image")?;
        self.encode_image_unchecked(tape, p, image, t)
    }

    /// Without `t`, text adapters run as plain bottlenecks.
    fn encode_image_unchecked(
        &self,
        tape: &mut Tape<T>,
        p: &Bindings,
        image: &Tensor<f32>,
        t: Option<Var>,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let (s, ps, ch, g) = (cfg.image_size, cfg.patch_size, cfg.channels, cfg.grid());
        if image.shape() != [s, s, ch] {
            return Err(Error::invalid(format!(
                "image shape {:?} does not match config [{s}, {s}, {ch}]",
                image.shape()
            )));
        }
        let src = image.data();
        let patches = Tensor::from_fn(&[g * g, cfg.patch_dim()], |k| {
            let (tok, col) = (k / cfg.patch_dim(), k % cfg.patch_dim());
            let (ti, tj) = (tok / g, tok % g);
            let (dy, rest) = (col / (ps * ch), col % (ps * ch));
            let (dx, cc) = (rest / ch, rest % ch);
            let (y, x) = (ti * ps + dy, tj * ps + dx);
            c(src[(y * s + x) * ch + cc] as f64)
        });
        let l = &self.layout;
        let x = tape.constant(patches);
        let x = l.patch_embed.forward(tape, p, x)?;
        let mut x = tape.add(x, p.var(l.pos_embed))?;
        for b in &l.blocks {
            x = b.forward(tape, p, x, t)?;
        }
        Ok(x)
    }

    fn max_freq(&self) -> f64 {
        self.cfg.grid() as f64
    }

    /// Sparse prompt tokens `[K, decoder_dim]`.
    pub fn encode_prompts(&self, tape: &mut Tape<T>, p: &Bindings, points: &[Point], t: Option<Var>) -> Result<Var> {
        let t = self.site_text(InjectionSite::PromptEncoder, t, "encode_prompts")?;
        let (s, dd) = (self.cfg.image_size, self.cfg.decoder_dim);
        if points.is_empty() {
            return Err(Error::invalid("at least one point prompt is required"));
        }
        let mut data = Vec::with_capacity(points.len() * dd);
        for pt in points {
            if pt.x >= s || pt.y >= s {
                return Err(Error::invalid(format!(
                    "point ({}, {}) outside the {s}x{s} image",
                    pt.x, pt.y
                )));
            }
            let u = (pt.x as f64 + 0.5) / s as f64;
            let v = (pt.y as f64 + 0.5) / s as f64;
            data.extend(sinusoid_features(u, v, dd, self.max_freq()).into_iter().map(c::<T>));
        }
        let pe = tape.constant(Tensor::new(&[points.len(), dd], data)?);
        let mut tokens = tape.add_row(pe, p.var(self.layout.fg_embed))?;
        if let (Some(proj), Some(t)) = (&self.layout.prompt_text, t) {
            let tt = proj.forward(tape, p, t)?;
            tokens = tape.add_row(tokens, tt)?;
        }
        Ok(tokens)
    }

    /// Dense positional features of the token grid, `[tokens, decoder_dim]`.
    pub fn image_pe(&self) -> Tensor<T> {
        let (g, dd) = (self.cfg.grid(), self.cfg.decoder_dim);
        let mut data = Vec::with_capacity(g * g * dd);
        for i in 0..g {
            for j in 0..g {
                let u = (j as f64 + 0.5) / g as f64;
                let v = (i as f64 + 0.5) / g as f64;
                data.extend(sinusoid_features(u, v, dd, self.max_freq()).into_iter().map(c::<T>));
            }
        }
        Tensor::new(&[g * g, dd], data).unwrap()
    }

    /// Mask logits `[2g, 2g]` from encoder tokens and prompt tokens.
    pub fn decode_mask(
        &self,
        tape: &mut Tape<T>,
        p: &Bindings,
        image_tokens: Var,
        prompt_tokens: Var,
        t: Option<Var>,
    ) -> Result<Var> {
        let t = self.site_text(InjectionSite::MaskDecoder, t, "decode_mask")?;
        let (g, dd) = (self.cfg.grid(), self.cfg.decoder_dim);
        let l = &self.layout;
        if tape.shape(prompt_tokens).len() != 2 || tape.value(prompt_tokens).cols() != dd {
            return Err(Error::invalid(format!(
                "prompt tokens {:?} do not have width {dd}",
                tape.shape(prompt_tokens)
            )));
        }
        let img = l.neck.forward(tape, p, image_tokens)?;
        let img = l.neck_norm.forward(tape, p, img)?;

        let mut tokens = tape.concat_rows(p.var(l.mask_token), prompt_tokens)?;
        if let (Some(proj), Some(t)) = (&l.decoder_text, t) {
            let tt = proj.forward(tape, p, t)?;
            tokens = tape.add_row(tokens, tt)?;
        }
        let pe = tape.constant(self.image_pe());
        let img_pe = tape.add(img, pe)?;

        let a = l.token_to_image.attn.forward(tape, p, tokens, img_pe, img)?;
        let tokens = tape.add(tokens, a)?;
        let tokens = l.token_to_image.norm.forward(tape, p, tokens)?;

        let a = l.image_to_token.attn.forward(tape, p, img_pe, tokens, tokens)?;
        let img = tape.add(img, a)?;
        let img = l.image_to_token.norm.forward(tape, p, img)?;

        let mask = tape.slice_rows(tokens, 0, 1)?;
        let mask = tape.transpose(mask)?;
        let logits = tape.matmul(img, mask)?;
        let logits = tape.scale(logits, 1.0 / (dd as f64).sqrt());
        let logits = tape.reshape(logits, &[g, g])?;
        tape.upsample2x(logits)
    }

    /// Logits for one sample, routing `t` to the variant's injection site.
    pub fn logits(
        &self,
        tape: &mut Tape<T>,
        p: &Bindings,
        image: &Tensor<f32>,
        points: &[Point],
        t: Option<Var>,
    ) -> Result<Var> {
        let site = self.variant.injection_site;
        let at = |s: InjectionSite| if site == s { t } else { None };
        let img = self.encode_image(tape, p, image, at(InjectionSite::ImageEncoder))?;
        let prm = self.encode_prompts(tape, p, points, at(InjectionSite::PromptEncoder))?;
        self.decode_mask(tape, p, img, prm, at(InjectionSite::MaskDecoder))
    }

    /// `(logits, mean BCE)` against a full-resolution binary mask.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &Bindings,
        image: &Tensor<f32>,
        points: &[Point],
        gt: &Tensor<f32>,
        t: Option<&[f32]>,
    ) -> Result<(Var, Var)> {
        let t = self.text_input(tape, t)?;
        let logits = self.logits(tape, p, image, points, t)?;
        let target = resample_nearest(gt, self.cfg.mask_size())?.cast::<T>();
        let loss = tape.bce_with_logits(logits, &target)?;
        Ok((logits, loss))
    }

    /// Logits without gradient bookkeeping.
    pub fn predict(&self, image: &Tensor<f32>, points: &[Point], t: Option<&[f32]>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let t = self.text_input(&mut tape, t)?;
        let logits = self.logits(&mut tape, &p, image, points, t)?;
        Ok(tape.value(logits).clone())
    }

    /// Logits with every encoder text adapter reduced to `W_2·GELU(W_1·x)`,
    /// the text-free counterpart of an image-encoder text variant.
    pub fn predict_text_free(&self, image: &Tensor<f32>, points: &[Point]) -> Result<Tensor<T>> {
        if !self.variant.uses_text() || self.variant.injection_site != InjectionSite::ImageEncoder {
            return Err(Error::invalid(format!(
                "variant {} has no encoder text adapters",
                self.variant
            )));
        }
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let img = self.encode_image_unchecked(&mut tape, &p, image, None)?;
        let prm = self.encode_prompts(&mut tape, &p, points, None)?;
        let logits = self.decode_mask(&mut tape, &p, img, prm, None)?;
        Ok(tape.value(logits).clone())
    }

    /// Loss and gradients for every trainable tensor, in
    /// [`Model::trainable_ids`] order.
    pub fn loss_and_grads(
        &self,
        image: &Tensor<f32>,
        points: &[Point],
        gt: &Tensor<f32>,
        t: Option<&[f32]>,
    ) -> Result<(T, Vec<Tensor<T>>)> {
        self.loss_and_grads_for(&self.trainable_ids(), image, points, gt, t)
    }

    /// Loss and gradients for the tensors in `ids`, which need not follow
    /// the variant's partition.
    pub fn loss_and_grads_for(
        &self,
        ids: &[ParamId],
        image: &Tensor<f32>,
        points: &[Point],
        gt: &Tensor<f32>,
        t: Option<&[f32]>,
    ) -> Result<(T, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let names: std::collections::HashSet<&str> = ids.iter().map(|&id| self.store.name(id)).collect();
        let p = self.store.bind(&mut tape, |n| names.contains(n));
        let (_, loss) = self.forward(&mut tape, &p, image, points, gt, t)?;
        let mut g = tape.backward(loss)?;
        let grads = ids
            .iter()
            .map(|&id| g.take(p.var(id)).expect("bound with a gradient"))
            .collect();
        Ok((tape.value(loss).data()[0], grads))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{grad_check, GradCheckConfig};

    pub(crate) fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            bottleneck: 4,
            text_dim: 8,
            decoder_dim: 16,
            decoder_attn_dim: 8,
            decoder_heads: 2,
            ..Default::default()
        }
    }

    fn rand_image(cfg: &ModelConfig, seed: u64) -> Tensor<f32> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let s = cfg.image_size;
        Tensor::from_fn(&[s, s, cfg.channels], |_| r.gen_range(0.0..1.0))
    }

    fn rand_text(n: usize, seed: u64) -> Vec<f32> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    fn points() -> Vec<Point> {
        vec![Point { x: 3, y: 5 }, Point { x: 10, y: 2 }, Point { x: 7, y: 12 }]
    }

    fn perturb_up(m: &mut Model<f64>, seed: u64) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        for id in m.trainable_ids() {
            let name = m.store().name(id).to_string();
            if name.ends_with(".w_up") || name.ends_with(".w_2") {
                for v in m.store_mut().get_mut(id).data_mut() {
                    *v = r.gen_range(-0.5..0.5);
                }
            }
        }
    }

    fn t_for(m: &Model<f64>) -> Option<Vec<f32>> {
        m.variant().uses_text().then(|| rand_text(m.config().text_dim, 4))
    }

    #[test]
    fn default_output_is_16x16() {
        let cfg = ModelConfig::default();
        let m = Model::<f32>::new(&cfg, VariantSpec::parallel_text(), 0).unwrap();
        let img = rand_image(&cfg, 1);
        let t = rand_text(cfg.text_dim, 2);
        let pts: Vec<Point> = (0..5).map(|i| Point { x: 10 + i, y: 20 }).collect();
        let out = m.predict(&img, &pts, Some(&t)).unwrap();
        assert_eq!(out.shape(), &[16, 16]);
    }

    #[test]
    fn shape_sweep() {
        for (size, patch) in [(16, 4), (32, 4), (32, 8), (64, 8), (64, 16), (32, 16)] {
            let cfg = ModelConfig {
                image_size: size,
                patch_size: patch,
                ..tiny_cfg()
            };
            let m = Model::<f32>::new(&cfg, VariantSpec::parallel(), 0).unwrap();
            let out = m.predict(&rand_image(&cfg, 1), &[Point { x: 1, y: 1 }], None).unwrap();
            let g = size / patch;
            assert_eq!(out.shape(), &[2 * g, 2 * g], "{size}/{patch}");
        }
    }

    #[test]
    fn identity_at_init_against_plain_backbone() {
        let cfg = tiny_cfg();
        let plain = Model::<f64>::new(&cfg, VariantSpec::decoder_only(), 3).unwrap();
        let img = rand_image(&cfg, 1);
        let base = plain.predict(&img, &points(), None).unwrap();
        for v in [
            VariantSpec::parallel(),
            VariantSpec::parallel_text(),
            VariantSpec::text_mlp_mhsa(),
        ] {
            let m = Model::<f64>::new(&cfg, v, 3).unwrap();
            let t = t_for(&m);
            let out = m.predict(&img, &points(), t.as_deref()).unwrap();
            assert!(out.max_abs_diff(&base) <= 1e-10, "{v}");
        }
        let none = Model::<f64>::new(&cfg, VariantSpec::none(), 3).unwrap();
        assert_eq!(none.predict(&img, &points(), None).unwrap(), base);
    }

    #[test]
    fn text_routing_is_checked() {
        let cfg = tiny_cfg();
        let img = rand_image(&cfg, 1);
        let t = rand_text(cfg.text_dim, 2);
        let plain = Model::<f32>::new(&cfg, VariantSpec::parallel(), 0).unwrap();
        assert!(plain.predict(&img, &points(), Some(&t)).is_err());
        let text = Model::<f32>::new(&cfg, VariantSpec::parallel_text(), 0).unwrap();
        assert!(text.predict(&img, &points(), None).is_err());
        assert!(text.predict(&img, &points(), Some(&t[1..])).is_err());

        let mut tape = Tape::new();
        let p = text.bind_frozen(&mut tape);
        let tv = text.text_input(&mut tape, Some(&t)).unwrap();
        assert!(text.encode_prompts(&mut tape, &p, &points(), tv).is_err());
    }

    #[test]
    fn prompts_out_of_bounds_and_duplicates() {
        let cfg = tiny_cfg();
        let m = Model::<f64>::new(&cfg, VariantSpec::parallel(), 0).unwrap();
        let mut tape = Tape::new();
        let p = m.bind_frozen(&mut tape);
        assert!(m.encode_prompts(&mut tape, &p, &[Point { x: 16, y: 0 }], None).is_err());
        assert!(m.encode_prompts(&mut tape, &p, &[], None).is_err());
        let pt = Point { x: 4, y: 9 };
        let k = m.encode_prompts(&mut tape, &p, &[pt, pt], None).unwrap();
        let v = tape.value(k);
        assert_eq!(v.shape(), &[2, 16]);
        assert_eq!(v.data()[..16], v.data()[16..]);
    }

    #[test]
    fn prompt_permutation_leaves_logits_unchanged() {
        let cfg = tiny_cfg();
        let m = Model::<f64>::new(&cfg, VariantSpec::parallel(), 5).unwrap();
        let img = rand_image(&cfg, 1);
        let mut pts = points();
        let a = m.predict(&img, &pts, None).unwrap();
        pts.reverse();
        let b = m.predict(&img, &pts, None).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn zero_text_at_prompt_and_decoder_sites() {
        let cfg = tiny_cfg();
        let img = rand_image(&cfg, 1);
        let base = Model::<f64>::new(&cfg, VariantSpec::parallel(), 2).unwrap();
        let want = base.predict(&img, &points(), None).unwrap();
        let zero = vec![0.0f32; cfg.text_dim];
        for v in [VariantSpec::inject_prompt(), VariantSpec::inject_decoder()] {
            let m = Model::<f64>::new(&cfg, v, 2).unwrap();
            let got = m.predict(&img, &points(), Some(&zero)).unwrap();
            assert_eq!(got, want, "{v}");
        }
    }

    #[test]
    fn zero_projection_removes_text_dependence() {
        let cfg = tiny_cfg();
        let img = rand_image(&cfg, 1);
        for v in [
            VariantSpec::parallel_text(),
            VariantSpec::text_mlp_mhsa(),
            VariantSpec::inject_prompt(),
            VariantSpec::inject_decoder(),
        ] {
            let mut m = Model::<f64>::new(&cfg, v, 2).unwrap();
            perturb_up(&mut m, 8);
            let with = |m: &Model<f64>, seed| m.predict(&img, &points(), Some(&rand_text(8, seed))).unwrap();
            assert_ne!(with(&m, 10), with(&m, 11), "{v}: text should matter");
            for id in m.trainable_ids() {
                if m.store().name(id).ends_with(".w_t") {
                    m.store_mut().get_mut(id).data_mut().fill(0.0);
                }
            }
            let first = with(&m, 10);
            for seed in 11..20 {
                assert_eq!(with(&m, seed), first, "{v}");
            }
        }
    }

    #[test]
    fn oracle_logits_and_zero_logits_loss() {
        let cfg = tiny_cfg();
        let gt = Tensor::from_fn(&[16, 16], |k| if (k / 16) < 8 { 1.0f32 } else { 0.0 });
        let target = resample_nearest(&gt, cfg.mask_size()).unwrap().cast::<f64>();
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[8, 8]));
        let l = tape.bce_with_logits(z, &target).unwrap();
        assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let perfect = Tensor::from_fn(&[8, 8], |k| if target.data()[k] > 0.5 { 20.0 } else { -20.0 });
        let z = tape.constant(perfect);
        let l = tape.bce_with_logits(z, &target).unwrap();
        assert!(tape.value(l).data()[0] < 1e-6);
    }

    #[test]
    fn nearest_resampling_keeps_labels_binary() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let m = Tensor::from_fn(&[64, 64], |_| if r.gen_bool(0.3) { 1.0f32 } else { 0.0 });
        let s = resample_nearest(&m, 16).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                assert_eq!(s.at2(i, j), m.at2(4 * i + 2, 4 * j + 2));
            }
        }
        assert!(resample_nearest(&m, 7).is_err());
    }

    #[test]
    fn frozen_tensors_get_no_gradient_and_adapters_do() {
        let cfg = tiny_cfg();
        let mut m = Model::<f64>::new(&cfg, VariantSpec::parallel_text(), 1).unwrap();
        perturb_up(&mut m, 2);
        let img = rand_image(&cfg, 3);
        let gt = Tensor::from_fn(&[16, 16], |k| ((k % 16) < 6) as u8 as f32);
        let t = rand_text(8, 1);
        let mut tape = Tape::new();
        let p = m.bind(&mut tape);
        let (_, loss) = m.forward(&mut tape, &p, &img, &points(), &gt, Some(&t)).unwrap();
        let g = tape.backward(loss).unwrap();
        for id in m.store().ids() {
            let name = m.store().name(id);
            let grad = g.get(p.var(id));
            if m.is_trainable(name) {
                assert!(grad.unwrap().data().iter().any(|&v| v != 0.0), "{name}");
            } else {
                assert!(grad.is_none(), "{name}");
            }
        }
    }

    #[test]
    fn end_to_end_gradcheck() {
        let cfg = tiny_cfg();
        let img = rand_image(&cfg, 3);
        let gt = Tensor::from_fn(&[16, 16], |k| ((k / 16 + k % 16) % 5 < 2) as u8 as f32);
        for v in [
            VariantSpec::parallel_text(),
            VariantSpec::inject_decoder(),
            VariantSpec::text_mlp_mhsa(),
        ] {
            let mut m = Model::<f64>::new(&cfg, v, 1).unwrap();
            perturb_up(&mut m, 2);
            let t = rand_text(8, 1);
            let params: Vec<(String, Tensor<f64>)> = m
                .trainable_ids()
                .into_iter()
                .map(|id| (m.store().name(id).to_string(), m.store().get(id).clone()))
                .collect();
            let cfgc = GradCheckConfig {
                coords_per_tensor: 6,
                ..Default::default()
            };
            let report = grad_check(&params, &cfgc, |tape, vars| {
                let p = m.bind_with(tape, vars)?;
                Ok(m.forward(tape, &p, &img, &points(), &gt, Some(&t))?.1)
            })
            .unwrap();
            assert!(report.worst <= 1e-4, "{v}: {}", report.worst);
        }
    }

    #[test]
    fn null_text_equals_text_free_forward() {
        let cfg = tiny_cfg();
        let img = rand_image(&cfg, 4);
        for v in [VariantSpec::parallel_text(), VariantSpec::text_mlp_mhsa()] {
            let mut m = Model::<f64>::new(&cfg, v, 6).unwrap();
            perturb_up(&mut m, 9);
            let free = m.predict_text_free(&img, &points()).unwrap();
            let zero = m.predict(&img, &points(), Some(&vec![0.0; cfg.text_dim])).unwrap();
            assert_eq!(zero, free, "{v}");
            assert_ne!(m.predict(&img, &points(), Some(&rand_text(8, 1))).unwrap(), free);
        }
        let m = Model::<f64>::new(&cfg, VariantSpec::inject_decoder(), 0).unwrap();
        assert!(m.predict_text_free(&img, &points()).is_err());
    }

    #[test]
    fn logits_finite_over_100_seeds() {
        let cfg = ModelConfig::default();
        for seed in 0..100 {
            let m = Model::<f32>::new(&cfg, VariantSpec::parallel(), seed).unwrap();
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let img = Tensor::from_fn(&[64, 64, 3], |_| r.gen_range(0.0..1.0));
            let pts: Vec<Point> = (0..5)
                .map(|_| Point {
                    x: r.gen_range(0..64),
                    y: r.gen_range(0..64),
                })
                .collect();
            let out = m.predict(&img, &pts, None).unwrap();
            assert_eq!(out.shape(), &[16, 16]);
            assert!(out.is_finite(), "seed {seed}");
        }
    }
}
