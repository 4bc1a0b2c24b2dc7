use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Mean-centered LayerNorm with gain and bias.
    Standard,
    /// Gain-only RMS normalization.
    Rms,
}

impl NormKind {
    pub fn params_per_norm(self, d: usize) -> usize {
        match self {
            NormKind::Standard => 2 * d,
            NormKind::Rms => d,
        }
    }
}

impl std::str::FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" | "layernorm" => Ok(NormKind::Standard),
            "rms" | "rmsnorm" => Ok(NormKind::Rms),
            other => Err(Error::InvalidConfig(format!("unknown norm kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MlpKind {
    /// `fc2(silu(fc1 x))`.
    Plain,
    /// `fc2(silu(gate x) ⊙ fc1 x)`, LLaMA style.
    Gated,
}

impl MlpKind {
    pub fn matrices(self) -> usize {
        match self {
            MlpKind::Plain => 2,
            MlpKind::Gated => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal(f64),
    Ones,
    Zeros,
}

/// Shape and initializer of one named parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn new(path: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        ParamSpec {
            path: path.into(),
            shape,
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub const PROJ_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub norm_kind: NormKind,
    #[serde(default = "default_mlp")]
    pub mlp_kind: MlpKind,
    pub n_visual_tokens: usize,
    pub d_visual: usize,
    pub tie_embeddings: bool,
    #[serde(default = "default_true")]
    pub learned_positions: bool,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
}

fn default_mlp() -> MlpKind {
    MlpKind::Plain
}

fn default_true() -> bool {
    true
}

fn default_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    /// The default desk-scale architecture.
    pub fn toy() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size: 256,
            max_seq: 64,
            norm_kind: NormKind::Standard,
            mlp_kind: MlpKind::Plain,
            n_visual_tokens: 4,
            d_visual: 64,
            tie_embeddings: false,
            learned_positions: true,
            norm_eps: 1e-5,
        }
    }

    /// A smaller architecture that trains in seconds; used by the
    /// strategy-comparison experiment and the test suites.
    pub fn mini() -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 48,
            n_heads: 4,
            d_ff: 96,
            vocab_size: 64,
            max_seq: 32,
            ..Self::toy()
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "mini" => Ok(Self::mini()),
            other => Err(Error::InvalidConfig(format!(
                "unknown model preset `{other}`"
            ))),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
            ("n_visual_tokens", self.n_visual_tokens),
            ("d_visual", self.d_visual),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_visual_tokens > self.max_seq {
            return Err(Error::InvalidConfig(format!(
                "n_visual_tokens {} exceeds max_seq {}",
                self.n_visual_tokens, self.max_seq
            )));
        }
        if !(self.norm_eps >= 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::InvalidConfig(
                "norm_eps must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    fn norm_specs(&self, prefix: &str, out: &mut Vec<ParamSpec>) {
        let d = self.d_model;
        out.push(ParamSpec::new(
            format!("{prefix}.weight"),
            vec![d],
            Init::Ones,
        ));
        if self.norm_kind == NormKind::Standard {
            out.push(ParamSpec::new(
                format!("{prefix}.bias"),
                vec![d],
                Init::Zeros,
            ));
        }
    }

    /// Every parameter of the model in build order.
    pub fn inventory(&self) -> Vec<ParamSpec> {
        let (d, ff) = (self.d_model, self.d_ff);
        let proj = Init::Normal(PROJ_STD);
        let mut out = vec![ParamSpec::new(
            "embed.weight",
            vec![self.vocab_size, d],
            proj,
        )];
        if self.learned_positions {
            out.push(ParamSpec::new("pos.weight", vec![self.max_seq, d], proj));
        }
        out.push(ParamSpec::new(
            "connector.weight",
            vec![d, self.d_visual],
            proj,
        ));
        out.push(ParamSpec::new("connector.bias", vec![d], Init::Zeros));
        for i in 0..self.n_layers {
            let b = format!("blocks.{i}");
            self.norm_specs(&format!("{b}.input_norm"), &mut out);
            for p in ["q_proj", "k_proj", "v_proj", "o_proj"] {
                out.push(ParamSpec::new(
                    format!("{b}.attn.{p}.weight"),
                    vec![d, d],
                    proj,
                ));
            }
            self.norm_specs(&format!("{b}.post_norm"), &mut out);
            out.push(ParamSpec::new(
                format!("{b}.mlp.fc1.weight"),
                vec![ff, d],
                proj,
            ));
            if self.mlp_kind == MlpKind::Gated {
                out.push(ParamSpec::new(
                    format!("{b}.mlp.gate.weight"),
                    vec![ff, d],
                    proj,
                ));
            }
            out.push(ParamSpec::new(
                format!("{b}.mlp.fc2.weight"),
                vec![d, ff],
                proj,
            ));
        }
        self.norm_specs("final_norm", &mut out);
        if !self.tie_embeddings {
            out.push(ParamSpec::new(
                "head.weight",
                vec![self.vocab_size, d],
                proj,
            ));
        }
        out
    }

    /// Closed-form parameter count.
    pub fn closed_form_param_count(&self) -> usize {
        let (d, ff, v) = (self.d_model, self.d_ff, self.vocab_size);
        let embed = v * d;
        let head = if self.tie_embeddings { 0 } else { v * d };
        let pos = if self.learned_positions {
            self.max_seq * d
        } else {
            0
        };
        let connector = d * self.d_visual + d;
        let norm = self.norm_kind.params_per_norm(d);
        let per_block = 4 * d * d + self.mlp_kind.matrices() * d * ff + 2 * norm;
        embed + head + pos + connector + self.n_layers * per_block + norm
    }
}
