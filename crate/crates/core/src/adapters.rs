//! Parallel adapters and the text-conditioned adapter.
//!
//! A [`ParallelAdapter`] computes `x + W_up·GELU(W_down·x)` row-wise. A
//! [`TextAdapter`] first projects a class embedding `t` to the token width,
//! `t̃ = GELU(t·W_t)`, adds it to every token and runs a bottleneck:
//! `W_2·GELU(W_1·(x + t̃))`. The text adapter carries no residual term of its
//! own; the encoder block supplies it.
//!
//! Up-projections (`w_up`, `w_2`) start at zero, so a freshly inserted
//! adapter leaves the host network's output bit-for-bit unchanged.

use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::VariantSpec;
use crate::params::{fingerprint, uniform_init, Bindings, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::textbank::TextBank;

fn check_width<T: Real>(tape: &Tape<T>, x: Var, d: usize, what: &str) -> Result<()> {
    if tape.value(x).cols() != d {
        return Err(Error::invalid(format!(
            "{what}: input width {} does not match adapter width {d}",
            tape.value(x).cols()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ParallelAdapter {
    pub w_down: ParamId,
    pub w_up: ParamId,
    pub dim: usize,
    pub bottleneck: usize,
}

impl ParallelAdapter {
    /// Registers `{prefix}.w_down` and `{prefix}.w_up`.
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        bottleneck: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if bottleneck == 0 || bottleneck >= dim {
            return Err(Error::config(format!(
                "adapter bottleneck {bottleneck} must be in 1..{dim}"
            )));
        }
        let w_down = store.add(format!("{prefix}.w_down"), uniform_init(rng, dim, bottleneck))?;
        let w_up = store.add(format!("{prefix}.w_up"), Tensor::zeros(&[bottleneck, dim]))?;
        Ok(ParallelAdapter {
            w_down,
            w_up,
            dim,
            bottleneck,
        })
    }

    /// The branch alone: `W_up·GELU(W_down·x)`.
    pub fn branch<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        check_width(tape, x, self.dim, "parallel adapter")?;
        let h = tape.matmul(x, p.var(self.w_down))?;
        let h = tape.gelu(h);
        tape.matmul(h, p.var(self.w_up))
    }

    /// `x + W_up·GELU(W_down·x)`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        let b = self.branch(tape, p, x)?;
        tape.add(x, b)
    }
}

/// `t̃ = GELU(t·W_t)`, mapping a `[d_t]` embedding to a `[1, d]` row.
#[derive(Clone, Debug)]
pub struct TextProjection {
    pub w_t: ParamId,
    pub text_dim: usize,
    pub dim: usize,
}

impl TextProjection {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        text_dim: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w_t = store.add(format!("{prefix}.w_t"), uniform_init(rng, text_dim, dim))?;
        Ok(TextProjection { w_t, text_dim, dim })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, t: Var) -> Result<Var> {
        if tape.value(t).len() != self.text_dim {
            return Err(Error::invalid(format!(
                "text embedding has {} values, projection expects {}",
                tape.value(t).len(),
                self.text_dim
            )));
        }
        let row = tape.reshape(t, &[1, self.text_dim])?;
        let proj = tape.matmul(row, p.var(self.w_t))?;
        Ok(tape.gelu(proj))
    }
}

#[derive(Clone, Debug)]
pub struct TextAdapter {
    pub proj: TextProjection,
    pub w_1: ParamId,
    pub w_2: ParamId,
    pub bottleneck: usize,
}

impl TextAdapter {
    /// Registers `{prefix}.w_t`, `{prefix}.w_1` and `{prefix}.w_2`.
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        text_dim: usize,
        bottleneck: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if bottleneck == 0 || bottleneck >= dim {
            return Err(Error::config(format!(
                "adapter bottleneck {bottleneck} must be in 1..{dim}"
            )));
        }
        let proj = TextProjection::register(store, prefix, text_dim, dim, rng)?;
        let w_1 = store.add(format!("{prefix}.w_1"), uniform_init(rng, dim, bottleneck))?;
        let w_2 = store.add(format!("{prefix}.w_2"), Tensor::zeros(&[bottleneck, dim]))?;
        Ok(TextAdapter {
            proj,
            w_1,
            w_2,
            bottleneck,
        })
    }

    pub fn dim(&self) -> usize {
        self.proj.dim
    }

    pub fn project_text<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, t: Var) -> Result<Var> {
        self.proj.forward(tape, p, t)
    }

    /// `W_2·GELU(W_1·(x + t̃))` for every row of `x`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var, t: Var) -> Result<Var> {
        check_width(tape, x, self.dim(), "text adapter")?;
        let tt = self.project_text(tape, p, t)?;
        let xp = tape.add_row(x, tt)?;
        self.bottleneck_of(tape, p, xp)
    }

    /// The bottleneck without text: `W_2·GELU(W_1·x)`.
    pub fn bottleneck_of<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        let h = tape.matmul(x, p.var(self.w_1))?;
        let h = tape.gelu(h);
        tape.matmul(h, p.var(self.w_2))
    }
}

/// Name of the frozen text-bank tensor inside a partition.
pub const TEXTBANK_TENSOR: &str = "textbank.embeddings";

/// Whether a parameter is updated under `variant`: adapter tensors (any
/// `*_adapter` or `text_proj` path segment) always, `decoder.*` tensors when
/// the decoder is trainable, nothing else.
pub fn is_trainable(name: &str, variant: &VariantSpec) -> bool {
    let adapter_kind = name
        .split('.')
        .any(|seg| seg.ends_with("_adapter") || seg == "text_proj");
    if adapter_kind {
        return true;
    }
    variant.decoder_trainable && name.starts_with("decoder.")
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamPartition {
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
    pub trainable_count: usize,
    pub frozen_count: usize,
    pub fingerprint: String,
}

impl ParamPartition {
    pub fn total(&self) -> usize {
        self.trainable_count + self.frozen_count
    }

    pub fn trainable_fraction(&self) -> f64 {
        self.trainable_count as f64 / self.total() as f64
    }
}

/// Content hash of every frozen model tensor plus the text bank.
pub fn frozen_fingerprint<T: Real>(store: &ParamStore<T>, bank: Option<&TextBank>, variant: &VariantSpec) -> String {
    let model = fingerprint(store.iter().filter(|(n, _)| !is_trainable(n, variant)));
    match bank {
        None => model,
        Some(b) => {
            let bank = fingerprint([(TEXTBANK_TENSOR, b.embeddings())].into_iter());
            let mut h = Sha256::new();
            h.update(model.as_bytes());
            h.update(bank.as_bytes());
            hex::encode(h.finalize())
        }
    }
}

/// Split model tensors (and the text bank, always frozen) into trainable
/// and frozen sets.
pub fn partition<T: Real>(
    store: &ParamStore<T>,
    bank: Option<&TextBank>,
    variant: &VariantSpec,
) -> Result<ParamPartition> {
    let mut p = ParamPartition {
        trainable: Vec::new(),
        frozen: Vec::new(),
        trainable_count: 0,
        frozen_count: 0,
        fingerprint: frozen_fingerprint(store, bank, variant),
    };
    for (name, t) in store.iter() {
        if name.is_empty() {
            return Err(Error::invalid("unnamed tensor in model"));
        }
        if is_trainable(name, variant) {
            p.trainable.push(name.to_string());
            p.trainable_count += t.len();
        } else {
            p.frozen.push(name.to_string());
            p.frozen_count += t.len();
        }
    }
    if let Some(b) = bank {
        p.frozen.push(TEXTBANK_TENSOR.to_string());
        p.frozen_count += b.embeddings().len();
    }
    Ok(p)
}
