//! Tiny byte-level causal language model in which every projection is a
//! [`MoleLinear`]. Only the token embedding, the expert adapters, and the
//! routers train; the base weights are frozen at initialization.

mod transformer;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use transformer::DecodeState;

use crate::error::{Error, Result};
use crate::mole::checkpoint::{CheckpointReader, CheckpointWriter};
use crate::mole::{MoleDims, MoleGradients, MoleLinear};
use crate::numerics::{axpy, seeded_rng, Tensor2D};

pub type Token = u32;

pub const BOS: Token = 256;
pub const EOS: Token = 257;
pub const PAD: Token = 258;
pub const SEP: Token = 259;
/// Bytes plus the four special tokens.
pub const BYTE_VOCAB: usize = 260;

/// Byte-level encoding; never fails on valid UTF-8.
pub fn tokenize(text: &str) -> Vec<Token> {
    text.bytes().map(Token::from).collect()
}

/// Inverse of [`tokenize`]. Special tokens are dropped; bytes that do not
/// form valid UTF-8 (possible in model output) are replaced lossily.
pub fn detokenize(tokens: &[Token]) -> Result<String> {
    let mut bytes = Vec::with_capacity(tokens.len());
    for &t in tokens {
        match t {
            0..=255 => bytes.push(t as u8),
            256..=259 => {}
            _ => return Err(Error::Range(format!("token {t} >= vocabulary size {BYTE_VOCAB}"))),
        }
    }
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

/// `[BOS] prompt [SEP]`: the generation prefix for a prompt.
pub fn encode_prompt(prompt: &str) -> Vec<Token> {
    let mut t = Vec::with_capacity(prompt.len() + 2);
    t.push(BOS);
    t.extend(prompt.bytes().map(Token::from));
    t.push(SEP);
    t
}

/// `[BOS] prompt [SEP] answer [EOS]` with a mask scoring exactly the answer
/// bytes and the closing EOS.
pub fn encode_example(prompt: &str, answer: &str) -> (Vec<Token>, Vec<bool>) {
    let mut tokens = encode_prompt(prompt);
    let boundary = tokens.len();
    tokens.extend(answer.bytes().map(Token::from));
    tokens.push(EOS);
    let mask = (0..tokens.len()).map(|i| i >= boundary).collect();
    (tokens, mask)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    pub num_experts: usize,
    pub rank: usize,
    pub alpha: f64,
    /// MLP hidden width as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    /// Std of the Gaussian used for embeddings and frozen base weights.
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: BYTE_VOCAB,
            embed_dim: 64,
            num_layers: 2,
            num_heads: 2,
            max_seq_len: 512,
            num_experts: 3,
            rank: 8,
            alpha: 16.0,
            mlp_ratio: 4,
            init_std: 0.1,
            seed: 0,
        }
    }
}

/// The six projections of a block, in checkpoint / parameter order.
pub const PROJECTIONS: [&str; 6] = ["q", "k", "v", "o", "up", "down"];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::validation(format!("ModelConfig.{field}"), msg));
        if self.vocab_size < BYTE_VOCAB {
            return bad("vocab_size", format!("{} < {BYTE_VOCAB}", self.vocab_size));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(
                "embed_dim",
                format!("{} not divisible by num_heads {}", self.embed_dim, self.num_heads),
            );
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad("num_heads", format!("head dim {} must be even for rotary positions", self.head_dim()));
        }
        if self.rank == 0 || self.rank > self.embed_dim {
            return bad("rank", format!("{} not in 1..={}", self.rank, self.embed_dim));
        }
        if self.num_layers == 0 || self.num_experts == 0 || self.max_seq_len == 0 || self.mlp_ratio == 0 {
            return bad("num_layers", "layers, experts, max_seq_len and mlp_ratio must be positive".into());
        }
        if [self.alpha, self.init_std].iter().any(|v| v.is_nan() || *v <= 0.0) {
            return bad("alpha", "alpha and init_std must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// `(out, in)` of each projection in [`PROJECTIONS`] order.
    pub fn projection_shapes(&self) -> [(usize, usize); 6] {
        let (d, h) = (self.embed_dim, self.mlp_dim());
        [(d, d), (d, d), (d, d), (d, d), (h, d), (d, h)]
    }

    /// Closed-form trainable parameter count.
    pub fn expected_trainable(&self) -> usize {
        let (t, r) = (self.num_experts, self.rank);
        let per_layer: usize = self
            .projection_shapes()
            .iter()
            .map(|&(m, n)| t * (m * r + r * n) + t * n)
            .sum();
        self.vocab_size * self.embed_dim + self.num_layers * per_layer
    }

    /// Closed-form frozen parameter count.
    pub fn expected_frozen(&self) -> usize {
        self.num_layers * self.projection_shapes().iter().map(|&(m, n)| m * n).sum::<usize>()
    }
}

/// One transformer block's projections.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub q: MoleLinear,
    pub k: MoleLinear,
    pub v: MoleLinear,
    pub o: MoleLinear,
    pub up: MoleLinear,
    pub down: MoleLinear,
}

impl Block {
    pub fn projections(&self) -> [&MoleLinear; 6] {
        [&self.q, &self.k, &self.v, &self.o, &self.up, &self.down]
    }

    fn projections_mut(&mut self) -> [&mut MoleLinear; 6] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o, &mut self.up, &mut self.down]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyLM {
    config: ModelConfig,
    tok_emb: Tensor2D,
    blocks: Vec<Block>,
    rope: transformer::Rope,
}

/// Gradients for every trainable parameter of a [`TinyLM`].
#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub tok_emb: Tensor2D,
    /// One entry per projection, blocks in order, [`PROJECTIONS`] order
    /// within a block.
    pub layers: Vec<MoleGradients<()>>,
}

impl ModelGrads {
    pub fn zeros_like(model: &TinyLM) -> Self {
        Self {
            tok_emb: Tensor2D::zeros(model.tok_emb.rows(), model.tok_emb.cols()),
            layers: model.mole_layers().into_iter().map(MoleGradients::zeros_like).collect(),
        }
    }

    /// Same order as [`TinyLM::trainable_params_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = vec![self.tok_emb.data()];
        for l in &self.layers {
            out.extend(l.param_slices());
        }
        out
    }

    pub fn accumulate(&mut self, other: &ModelGrads, weight: f64) {
        axpy(weight, other.tok_emb.data(), self.tok_emb.data_mut());
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            for (d, s) in dst.d_a.iter_mut().zip(&src.d_a) {
                axpy(weight, s.data(), d.data_mut());
            }
            for (d, s) in dst.d_b.iter_mut().zip(&src.d_b) {
                axpy(weight, s.data(), d.data_mut());
            }
            axpy(weight, src.d_wg.data(), dst.d_wg.data_mut());
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

impl TinyLM {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(config.seed);
        let tok_emb = Tensor2D::random_normal(config.vocab_size, config.embed_dim, config.init_std, &mut rng);
        let mut blocks = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            let mut make = |(m, n): (usize, usize)| {
                let w0 = Tensor2D::random_normal(m, n, config.init_std, &mut rng);
                MoleLinear::new(w0, config.num_experts, config.rank, config.alpha, &mut rng)
            };
            let shapes = config.projection_shapes();
            blocks.push(Block {
                q: make(shapes[0])?,
                k: make(shapes[1])?,
                v: make(shapes[2])?,
                o: make(shapes[3])?,
                up: make(shapes[4])?,
                down: make(shapes[5])?,
            });
        }
        let rope = transformer::Rope::new(config.max_seq_len, config.head_dim());
        Ok(Self {
            config,
            tok_emb,
            blocks,
            rope,
        })
    }

    /// Assemble from explicit parts, checking every shape against `config`.
    pub fn from_parts(config: ModelConfig, tok_emb: Tensor2D, layers: Vec<MoleLinear>) -> Result<Self> {
        config.validate()?;
        if tok_emb.rows() != config.vocab_size || tok_emb.cols() != config.embed_dim {
            return Err(Error::ConfigMismatch(format!(
                "embedding is {} but config wants {}x{}",
                tok_emb.shape(),
                config.vocab_size,
                config.embed_dim
            )));
        }
        if layers.len() != 6 * config.num_layers {
            return Err(Error::ConfigMismatch(format!(
                "{} projections for {} layers",
                layers.len(),
                config.num_layers
            )));
        }
        let shapes = config.projection_shapes();
        for (i, layer) in layers.iter().enumerate() {
            let (m, n) = shapes[i % 6];
            let want = MoleDims {
                out_dim: m,
                in_dim: n,
                rank: config.rank,
                alpha: config.alpha,
                num_experts: config.num_experts,
            };
            if layer.dims() != want {
                return Err(Error::ConfigMismatch(format!(
                    "block {} projection {}: {:?} but config wants {:?}",
                    i / 6,
                    PROJECTIONS[i % 6],
                    layer.dims(),
                    want
                )));
            }
        }
        let mut it = layers.into_iter();
        let mut blocks = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            let mut next = || it.next().expect("length checked above");
            blocks.push(Block {
                q: next(),
                k: next(),
                v: next(),
                o: next(),
                up: next(),
                down: next(),
            });
        }
        let rope = transformer::Rope::new(config.max_seq_len, config.head_dim());
        Ok(Self {
            config,
            tok_emb,
            blocks,
            rope,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn token_embedding(&self) -> &Tensor2D {
        &self.tok_emb
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn mole_layers(&self) -> Vec<&MoleLinear> {
        self.blocks.iter().flat_map(|b| b.projections()).collect()
    }

    /// Every trainable parameter: embedding first, then each projection's
    /// `(A₁, B₁, …, W_g)`.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.tok_emb.data_mut()];
        for b in &mut self.blocks {
            for l in b.projections_mut() {
                out.extend(l.params_mut());
            }
        }
        out
    }

    pub fn trainable_params(&self) -> Vec<&[f64]> {
        let mut out = vec![self.tok_emb.data()];
        for l in self.mole_layers() {
            out.extend(l.params());
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_params().iter().map(|s| s.len()).sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.mole_layers().iter().map(|l| l.base().data().len()).sum()
    }

    /// Copies of every frozen base weight, for before/after comparison.
    pub fn base_snapshot(&self) -> Vec<Vec<u64>> {
        self.mole_layers()
            .iter()
            .map(|l| l.base().data().iter().map(|v| v.to_bits()).collect())
            .collect()
    }

    /// The same model with each projection reduced to its first expert.
    pub fn single_expert_variant(&self) -> Result<Self> {
        let layers = self
            .mole_layers()
            .into_iter()
            .map(|l| l.single_expert(0))
            .collect::<Result<Vec<_>>>()?;
        let config = ModelConfig {
            num_experts: 1,
            ..self.config.clone()
        };
        Self::from_parts(config, self.tok_emb.clone(), layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({ "kind": "tiny-lm", "config": self.config }).to_string();
        let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut w = CheckpointWriter::new(BufWriter::new(file), &header)?;
        w.write_tensor(&self.tok_emb)?;
        let layers = self.mole_layers();
        w.write_u64(layers.len() as u64)?;
        for l in layers {
            w.write_layer(l)?;
        }
        w.finish()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let mut r = CheckpointReader::new(BufReader::new(file))?;
        #[derive(Deserialize)]
        struct Header {
            kind: String,
            config: ModelConfig,
        }
        let header: Header = serde_json::from_str(r.header())
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if header.kind != "tiny-lm" {
            return Err(Error::Format(format!("expected a tiny-lm checkpoint, got {}", header.kind)));
        }
        let tok_emb = r.read_tensor()?;
        let n = r.read_u64()?;
        if n != 6 * header.config.num_layers as u64 {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint holds {n} projections, config declares {} layers",
                header.config.num_layers
            )));
        }
        let layers = (0..n).map(|_| r.read_layer()).collect::<Result<Vec<_>>>()?;
        r.expect_end()?;
        Self::from_parts(header.config, tok_emb, layers)
    }

    /// SHA-256 over every parameter (frozen and trainable), hex encoded.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for s in self.trainable_params() {
            for v in s {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        for l in self.mole_layers() {
            for v in l.base().data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
