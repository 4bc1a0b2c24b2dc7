use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Init, MlpKind, ModelConfig, NormKind};
use super::params::{Bindings, ParamTree};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Decoder-only transformer with a linear visual connector.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamTree<T>,
}

/// Tape handles produced by one forward pass.
#[derive(Debug)]
pub struct Forward {
    /// `[batch, seq, vocab]`, `seq` counting the visual prefix.
    pub logits: Var,
    /// Post-residual output of each block, `[batch, seq, d_model]`.
    pub layer_outputs: Vec<Var>,
    pub bindings: Bindings,
}

/// Inputs of a batched forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Inputs<'a, T> {
    /// Row-major `[batch, text_len]` token ids.
    pub tokens: &'a [usize],
    pub batch: usize,
    /// `[batch, n_visual_tokens, d_visual]` stub features.
    pub visual: Option<&'a Tensor<T>>,
}

impl<'a, T> Inputs<'a, T> {
    pub fn text(tokens: &'a [usize], batch: usize) -> Self {
        Inputs {
            tokens,
            batch,
            visual: None,
        }
    }

    pub fn with_visual(tokens: &'a [usize], batch: usize, visual: &'a Tensor<T>) -> Self {
        Inputs {
            tokens,
            batch,
            visual: Some(visual),
        }
    }
}

struct Ctx<'m, T> {
    model: &'m Model<T>,
    bindings: Bindings,
}

impl<T: Element> Ctx<'_, T> {
    fn param(&mut self, tape: &mut Tape<T>, path: &str) -> Result<Var> {
        if let Some(&v) = self.bindings.get(path) {
            return Ok(v);
        }
        let v = tape.leaf(self.model.params.get(path)?);
        self.bindings.insert(path.to_string(), v);
        Ok(v)
    }

    /// `x Wᵀ`, plus `s · (x Aᵀ) Bᵀ` when `path` carries LoRA adapters.
    fn linear(&mut self, tape: &mut Tape<T>, x: Var, path: &str) -> Result<Var> {
        let w = self.param(tape, path)?;
        let y = tape.matmul_t(x, w)?;
        let Some(scaling) = self.model.params.adapter_scaling(path) else {
            return Ok(y);
        };
        let a = self.param(tape, &format!("{path}.lora_A"))?;
        let b = self.param(tape, &format!("{path}.lora_B"))?;
        let h = tape.matmul_t(x, a)?;
        let mut z = tape.matmul_t(h, b)?;
        if scaling != 1.0 {
            z = tape.scale(z, scaling)?;
        }
        tape.add(y, z)
    }

    fn norm(&mut self, tape: &mut Tape<T>, x: Var, prefix: &str) -> Result<Var> {
        let cfg = &self.model.config;
        let eps = cfg.norm_eps;
        let kind = cfg.norm_kind;
        let gain = self.param(tape, &format!("{prefix}.weight"))?;
        match kind {
            NormKind::Standard => {
                let bias = self.param(tape, &format!("{prefix}.bias"))?;
                tape.layer_norm(x, gain, bias, eps)
            }
            NormKind::Rms => tape.rms_norm(x, gain, eps),
        }
    }

    fn attention(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        block: &str,
        batch: usize,
        seq: usize,
    ) -> Result<Var> {
        let (h, dh) = (self.model.config.n_heads, self.model.config.head_dim());
        let mut heads = |tape: &mut Tape<T>, name: &str| -> Result<Var> {
            let p = self.linear(tape, x, &format!("{block}.attn.{name}.weight"))?;
            let p = tape.reshape(p, vec![batch, seq, h, dh])?;
            tape.transpose(p, vec![0, 2, 1, 3])
        };
        let q = heads(tape, "q_proj")?;
        let k = heads(tape, "k_proj")?;
        let v = heads(tape, "v_proj")?;
        let scores = tape.matmul_t(q, k)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let probs = tape.softmax(scores, true)?;
        let ctx = tape.matmul(probs, v)?;
        let ctx = tape.transpose(ctx, vec![0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, vec![batch, seq, h * dh])?;
        self.linear(tape, ctx, &format!("{block}.attn.o_proj.weight"))
    }

    fn mlp(&mut self, tape: &mut Tape<T>, x: Var, block: &str) -> Result<Var> {
        let up = self.linear(tape, x, &format!("{block}.mlp.fc1.weight"))?;
        let hidden = match self.model.config.mlp_kind {
            MlpKind::Plain => tape.silu(up)?,
            MlpKind::Gated => {
                let gate = self.linear(tape, x, &format!("{block}.mlp.gate.weight"))?;
                let gate = tape.silu(gate)?;
                tape.mul(gate, up)?
            }
        };
        self.linear(tape, hidden, &format!("{block}.mlp.fc2.weight"))
    }

    fn block(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        i: usize,
        batch: usize,
        seq: usize,
    ) -> Result<Var> {
        let block = format!("blocks.{i}");
        let h = self.norm(tape, x, &format!("{block}.input_norm"))?;
        let h = self.attention(tape, h, &block, batch, seq)?;
        let x = tape.add(x, h)?;
        let h = self.norm(tape, x, &format!("{block}.post_norm"))?;
        let h = self.mlp(tape, h, &block)?;
        tape.add(x, h)
    }
}

impl<T: Element> Model<T> {
    /// Builds and initializes every parameter; all start trainable.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamTree::new();
        for spec in config.inventory() {
            let t = match spec.init {
                Init::Normal(std) => Tensor::randn(spec.shape, std, &mut rng),
                Init::Ones => Tensor::full(spec.shape, T::one()),
                Init::Zeros => Tensor::zeros(spec.shape),
            };
            params.insert(spec.path, t.with_requires_grad(true))?;
        }
        Ok(Model { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamTree<T>) -> Result<Self> {
        config.validate()?;
        for spec in config.inventory() {
            let t = params.get(&spec.path)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::InvalidConfig(format!(
                    "`{}` has shape {:?}, expected {:?}",
                    spec.path,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(Model { config, params })
    }

    fn text_len(&self, inputs: &Inputs<'_, T>) -> Result<usize> {
        let cfg = &self.config;
        if inputs.batch == 0 || !inputs.tokens.len().is_multiple_of(inputs.batch) {
            return Err(Error::LengthMismatch {
                expected: inputs.batch,
                actual: inputs.tokens.len(),
            });
        }
        if let Some(&id) = inputs.tokens.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
        Ok(inputs.tokens.len() / inputs.batch)
    }

    /// Projects stub features through the connector: `[batch, n_visual, d_model]`.
    fn connector(
        &self,
        tape: &mut Tape<T>,
        ctx: &mut Ctx<'_, T>,
        visual: &Tensor<T>,
        batch: usize,
    ) -> Result<Var> {
        let cfg = &self.config;
        let want = [batch, cfg.n_visual_tokens, cfg.d_visual];
        if visual.shape() != want {
            return Err(Error::ShapeMismatch {
                kind: crate::autograd::OpKind::MatMul,
                shapes: vec![visual.shape().to_vec(), want.to_vec()],
                detail: "visual features must be [batch, n_visual_tokens, d_visual]".into(),
            });
        }
        let feats = tape.constant(visual.shape().to_vec(), visual.data().to_vec())?;
        let proj = ctx.linear(tape, feats, "connector.weight")?;
        let bias = ctx.param(tape, "connector.bias")?;
        tape.add(proj, bias)
    }

    /// Records the full forward pass on `tape`.
    pub fn forward(&self, tape: &mut Tape<T>, inputs: Inputs<'_, T>) -> Result<Forward> {
        let mut ctx = Ctx {
            model: self,
            bindings: Bindings::new(),
        };
        let prefix = match inputs.visual {
            Some(v) => Some(self.connector(tape, &mut ctx, v, inputs.batch)?),
            None => None,
        };
        self.forward_from(tape, ctx, inputs, prefix)
    }

    /// Forward pass with explicit `[batch, p, d_model]` prefix embeddings in
    /// place of the connector output.
    pub fn forward_with_prefix(
        &self,
        tape: &mut Tape<T>,
        tokens: &[usize],
        batch: usize,
        prefix: &Tensor<T>,
    ) -> Result<Forward> {
        let ctx = Ctx {
            model: self,
            bindings: Bindings::new(),
        };
        let p = tape.leaf(prefix);
        self.forward_from(tape, ctx, Inputs::text(tokens, batch), Some(p))
    }

    fn forward_from(
        &self,
        tape: &mut Tape<T>,
        mut ctx: Ctx<'_, T>,
        inputs: Inputs<'_, T>,
        prefix: Option<Var>,
    ) -> Result<Forward> {
        let cfg = &self.config;
        let batch = inputs.batch;
        let text_len = self.text_len(&inputs)?;
        let n_prefix = prefix.map_or(0, |p| tape.shape(p)[1]);
        let seq = n_prefix + text_len;
        if seq > cfg.max_seq {
            return Err(Error::SequenceTooLong {
                len: seq,
                max_seq: cfg.max_seq,
            });
        }
        if seq == 0 {
            return Err(Error::Empty("input sequence"));
        }

        let table = ctx.param(tape, "embed.weight")?;
        let mut x = tape.embed(table, inputs.tokens.to_vec(), vec![batch, text_len])?;
        if let Some(p) = prefix {
            x = tape.concat(&[p, x], 1)?;
        }
        if cfg.learned_positions {
            let pos = ctx.param(tape, "pos.weight")?;
            let pos = tape.embed(pos, (0..seq).collect(), vec![seq])?;
            x = tape.add(x, pos)?;
        }

        let mut layer_outputs = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            x = ctx.block(tape, x, i, batch, seq)?;
            layer_outputs.push(x);
        }

        let h = ctx.norm(tape, x, "final_norm")?;
        let logits = if cfg.tie_embeddings {
            let table = ctx.param(tape, "embed.weight")?;
            tape.matmul_t(h, table)?
        } else {
            ctx.linear(tape, h, "head.weight")?
        };
        Ok(Forward {
            logits,
            layer_outputs,
            bindings: ctx.bindings,
        })
    }

    /// Detached `[batch, seq, vocab]` logits.
    pub fn logits(&self, inputs: Inputs<'_, T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, inputs)?;
        Ok(tape.tensor(out.logits))
    }

    /// Post-residual output of every block, detached from any tape.
    pub fn capture_layer_outputs(&self, inputs: Inputs<'_, T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, inputs)?;
        Ok(out.layer_outputs.iter().map(|&v| tape.tensor(v)).collect())
    }

    /// Runs blocks `from..` on given hidden states `[batch, seq, d_model]`,
    /// returning their post-residual outputs.
    pub fn run_blocks_from(&self, hidden: &Tensor<T>, from: usize) -> Result<Vec<Tensor<T>>> {
        let shape = hidden.shape();
        if shape.len() != 3 || shape[2] != self.config.d_model {
            return Err(Error::InvalidConfig(format!(
                "hidden states must be [batch, seq, d_model], got {shape:?}"
            )));
        }
        let (batch, seq) = (shape[0], shape[1]);
        let mut tape = Tape::new();
        let mut ctx = Ctx {
            model: self,
            bindings: Bindings::new(),
        };
        let mut x = tape.constant(shape.to_vec(), hidden.data().to_vec())?;
        let mut outs = Vec::new();
        for i in from..self.config.n_layers {
            x = ctx.block(&mut tape, x, i, batch, seq)?;
            outs.push(tape.tensor(x));
        }
        Ok(outs)
    }
}
