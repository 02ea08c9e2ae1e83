//! The ViT-style encoder used as the conversion source, and its exact
//! forward pass.
//!
//! A model is an ordered list of [`LayerSpec`]s that read and write named
//! values, plus a table of f32 weights. The layer list is derived from the
//! [`ModelConfig`], so archives only carry the config and the weights.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, matmul, Nonlinearity, Scalar, Tensor};

/// Name of the value holding the (patch) tokens fed to the embedding.
pub const INPUT_VALUE: &str = "patches";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub patch_size: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_blocks: usize,
    /// Embedding width `C`.
    pub dim: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    /// Token count including the CLS token.
    pub num_tokens: usize,
    pub num_classes: usize,
    /// Width of each input patch token before embedding.
    pub in_dim: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch: Option<PatchSpec>,
}

fn default_ln_eps() -> f64 {
    1e-6
}

impl ModelConfig {
    /// The 2-block desk-scale configuration used throughout the test suites.
    pub fn toy() -> Self {
        ModelConfig {
            num_blocks: 2,
            dim: 32,
            heads: 4,
            mlp_dim: 64,
            num_tokens: 17,
            num_classes: 10,
            in_dim: 48,
            ln_eps: 1e-6,
            patch: Some(PatchSpec {
                patch_size: 4,
                height: 16,
                width: 16,
                channels: 3,
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_blocks", self.num_blocks),
            ("dim", self.dim),
            ("heads", self.heads),
            ("mlp_dim", self.mlp_dim),
            ("num_classes", self.num_classes),
            ("in_dim", self.in_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Validation(format!("config.{name} must be >= 1")));
            }
        }
        if self.num_tokens < 2 {
            return Err(Error::Validation(
                "config.num_tokens must count the CLS token plus at least one patch".into(),
            ));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Validation(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if !(self.ln_eps.is_finite() && self.ln_eps > 0.0) {
            return Err(Error::Validation("config.ln_eps must be positive".into()));
        }
        if let Some(p) = &self.patch {
            if p.patch_size == 0 || p.height % p.patch_size != 0 || p.width % p.patch_size != 0 {
                return Err(Error::Validation(format!(
                    "image {}x{} is not tiled by patch {}",
                    p.height, p.width, p.patch_size
                )));
            }
            let patches = (p.height / p.patch_size) * (p.width / p.patch_size);
            if patches + 1 != self.num_tokens || p.patch_size * p.patch_size * p.channels != self.in_dim {
                return Err(Error::Validation(
                    "patch geometry disagrees with num_tokens/in_dim".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Patch tokens per sample (CLS excluded).
    pub fn num_patches(&self) -> usize {
        self.num_tokens - 1
    }

    /// Every weight tensor the graph needs, in archive order.
    pub fn expected_tensors(&self) -> Vec<(String, Vec<usize>)> {
        let (c, ch, n) = (self.dim, self.mlp_dim, self.num_tokens);
        let mut out = vec![
            ("embed.weight".to_string(), vec![self.in_dim, c]),
            ("embed.bias".to_string(), vec![c]),
            ("cls".to_string(), vec![c]),
            ("pos".to_string(), vec![n, c]),
        ];
        for i in 0..self.num_blocks {
            let p = format!("blocks.{i}");
            out.extend([
                (format!("{p}.ln1.gamma"), vec![c]),
                (format!("{p}.ln1.beta"), vec![c]),
                (format!("{p}.qkv.weight"), vec![c, 3 * c]),
                (format!("{p}.qkv.bias"), vec![3 * c]),
                (format!("{p}.out.weight"), vec![c, c]),
                (format!("{p}.out.bias"), vec![c]),
                (format!("{p}.ln2.gamma"), vec![c]),
                (format!("{p}.ln2.beta"), vec![c]),
                (format!("{p}.mlp1.weight"), vec![c, ch]),
                (format!("{p}.mlp1.bias"), vec![ch]),
                (format!("{p}.mlp2.weight"), vec![ch, c]),
                (format!("{p}.mlp2.bias"), vec![c]),
            ]);
        }
        out.push(("head.weight".to_string(), vec![c, self.num_classes]));
        out.push(("head.bias".to_string(), vec![self.num_classes]));
        out
    }
}

/// Which half of self-attention a matrix product computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnProduct {
    /// Per head `q_h · k_hᵀ`; operands `[N×C]`, result `[heads×N×N]`.
    Scores,
    /// Per head `s_h · v_h`; operands `[heads×N×N]` and `[N×C]`, result `[N×C]`.
    Context,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    /// Linear patch embedding followed by prepending the CLS token.
    EmbedLinear {
        input: String,
        output: String,
        weight: String,
        bias: String,
        cls: String,
    },
    PosAdd {
        input: String,
        output: String,
        pos: String,
    },
    LayerNorm {
        input: String,
        output: String,
        gamma: String,
        beta: String,
    },
    /// `x·W + b`; the result is split column-wise into equal `outputs`.
    Linear {
        input: String,
        outputs: Vec<String>,
        weight: String,
        bias: String,
    },
    MatMul {
        a: String,
        b: String,
        output: String,
        product: AttnProduct,
    },
    Softmax {
        input: String,
        output: String,
        scale: f64,
    },
    Gelu {
        input: String,
        output: String,
    },
    ResidualAdd {
        a: String,
        b: String,
        output: String,
    },
    /// CLS-row extraction and the classification linear layer.
    ClsHead {
        input: String,
        output: String,
        weight: String,
        bias: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    /// Calibration sites: the input of a linear layer, or `[a, b]` for a
    /// matrix product. Empty for every other layer.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sites: Vec<String>,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn inputs(&self) -> Vec<&str> {
        match &self.kind {
            LayerKind::EmbedLinear { input, .. }
            | LayerKind::PosAdd { input, .. }
            | LayerKind::LayerNorm { input, .. }
            | LayerKind::Linear { input, .. }
            | LayerKind::Softmax { input, .. }
            | LayerKind::Gelu { input, .. }
            | LayerKind::ClsHead { input, .. } => vec![input],
            LayerKind::MatMul { a, b, .. } | LayerKind::ResidualAdd { a, b, .. } => vec![a, b],
        }
    }

    pub fn outputs(&self) -> Vec<&str> {
        match &self.kind {
            LayerKind::Linear { outputs, .. } => outputs.iter().map(String::as_str).collect(),
            LayerKind::EmbedLinear { output, .. }
            | LayerKind::PosAdd { output, .. }
            | LayerKind::LayerNorm { output, .. }
            | LayerKind::MatMul { output, .. }
            | LayerKind::Softmax { output, .. }
            | LayerKind::Gelu { output, .. }
            | LayerKind::ResidualAdd { output, .. }
            | LayerKind::ClsHead { output, .. } => vec![output],
        }
    }
}

/// Builds the canonical layer sequence for a config.
pub fn build_layers(cfg: &ModelConfig) -> Vec<LayerSpec> {
    let layer = |name: &str, sites: Vec<String>, kind: LayerKind| LayerSpec {
        name: name.to_string(),
        sites,
        kind,
    };
    let s = |v: &str| v.to_string();
    let mut layers = vec![
        layer(
            "embed",
            vec![s("embed.in")],
            LayerKind::EmbedLinear {
                input: s(INPUT_VALUE),
                output: s("embedded"),
                weight: s("embed.weight"),
                bias: s("embed.bias"),
                cls: s("cls"),
            },
        ),
        layer(
            "pos",
            vec![],
            LayerKind::PosAdd {
                input: s("embedded"),
                output: s("x0"),
                pos: s("pos"),
            },
        ),
    ];
    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
    for i in 0..cfg.num_blocks {
        let b = format!("b{i}");
        let w = format!("blocks.{i}");
        let v = |suffix: &str| format!("{b}.{suffix}");
        let x_in = format!("x{i}");
        let x_out = format!("x{}", i + 1);
        layers.extend([
            layer(
                &v("ln1"),
                vec![],
                LayerKind::LayerNorm {
                    input: x_in.clone(),
                    output: v("h1"),
                    gamma: format!("{w}.ln1.gamma"),
                    beta: format!("{w}.ln1.beta"),
                },
            ),
            layer(
                &v("qkv"),
                vec![v("qkv.in")],
                LayerKind::Linear {
                    input: v("h1"),
                    outputs: vec![v("q"), v("k"), v("v")],
                    weight: format!("{w}.qkv.weight"),
                    bias: format!("{w}.qkv.bias"),
                },
            ),
            layer(
                &v("qk"),
                vec![v("qk.a"), v("qk.b")],
                LayerKind::MatMul {
                    a: v("q"),
                    b: v("k"),
                    output: v("scores"),
                    product: AttnProduct::Scores,
                },
            ),
            layer(
                &v("softmax"),
                vec![],
                LayerKind::Softmax {
                    input: v("scores"),
                    output: v("attn"),
                    scale,
                },
            ),
            layer(
                &v("sv"),
                vec![v("sv.a"), v("sv.b")],
                LayerKind::MatMul {
                    a: v("attn"),
                    b: v("v"),
                    output: v("ctx"),
                    product: AttnProduct::Context,
                },
            ),
            layer(
                &v("out"),
                vec![v("out.in")],
                LayerKind::Linear {
                    input: v("ctx"),
                    outputs: vec![v("proj")],
                    weight: format!("{w}.out.weight"),
                    bias: format!("{w}.out.bias"),
                },
            ),
            layer(
                &v("res1"),
                vec![],
                LayerKind::ResidualAdd {
                    a: x_in.clone(),
                    b: v("proj"),
                    output: v("r1"),
                },
            ),
            layer(
                &v("ln2"),
                vec![],
                LayerKind::LayerNorm {
                    input: v("r1"),
                    output: v("h2"),
                    gamma: format!("{w}.ln2.gamma"),
                    beta: format!("{w}.ln2.beta"),
                },
            ),
            layer(
                &v("mlp1"),
                vec![v("mlp1.in")],
                LayerKind::Linear {
                    input: v("h2"),
                    outputs: vec![v("m1")],
                    weight: format!("{w}.mlp1.weight"),
                    bias: format!("{w}.mlp1.bias"),
                },
            ),
            layer(
                &v("gelu"),
                vec![],
                LayerKind::Gelu {
                    input: v("m1"),
                    output: v("g"),
                },
            ),
            layer(
                &v("mlp2"),
                vec![v("mlp2.in")],
                LayerKind::Linear {
                    input: v("g"),
                    outputs: vec![v("m2")],
                    weight: format!("{w}.mlp2.weight"),
                    bias: format!("{w}.mlp2.bias"),
                },
            ),
            layer(
                &v("res2"),
                vec![],
                LayerKind::ResidualAdd {
                    a: v("r1"),
                    b: v("m2"),
                    output: x_out,
                },
            ),
        ]);
    }
    layers.push(layer(
        "head",
        vec![],
        LayerKind::ClsHead {
            input: format!("x{}", cfg.num_blocks),
            output: s("logits"),
            weight: s("head.weight"),
            bias: s("head.bias"),
        },
    ));
    layers
}

/// A validated encoder: config, derived layer list and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub config: ModelConfig,
    pub layers: Vec<LayerSpec>,
    weights: BTreeMap<String, Tensor<f32>>,
}

impl ModelGraph {
    /// Assembles a graph, checking every tensor against the config.
    pub fn new(config: ModelConfig, weights: BTreeMap<String, Tensor<f32>>) -> Result<Self> {
        config.validate()?;
        let expected = config.expected_tensors();
        for (name, shape) in &expected {
            match weights.get(name) {
                None => return Err(Error::Validation(format!("missing tensor '{name}'"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Validation(format!(
                        "tensor '{name}' has shape {:?}, config expects {shape:?}",
                        t.shape()
                    )))
                }
                Some(t) => t.check_finite(name)?,
            }
        }
        if weights.len() != expected.len() {
            let extra: Vec<_> = weights
                .keys()
                .filter(|k| !expected.iter().any(|(n, _)| n == *k))
                .cloned()
                .collect();
            return Err(Error::Validation(format!("unexpected tensors {extra:?}")));
        }
        let layers = build_layers(&config);
        Ok(Self {
            config,
            layers,
            weights,
        })
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.weights
    }

    pub fn weight(&self, name: &str) -> Result<&Tensor<f32>> {
        self.weights
            .get(name)
            .ok_or_else(|| Error::Validation(format!("missing tensor '{name}'")))
    }

    pub fn weight_as<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        Ok(self.weight(name)?.cast())
    }

    /// All calibration sites in graph order.
    pub fn calibration_sites(&self) -> Vec<String> {
        self.layers.iter().flat_map(|l| l.sites.iter().cloned()).collect()
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// The layer that writes `value`, if any.
    pub fn producer_of(&self, value: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.outputs().contains(&value))
    }

    /// Input shape `ann_forward` expects: patch tokens, CLS excluded.
    pub fn input_shape(&self) -> [usize; 2] {
        [self.config.num_patches(), self.config.in_dim]
    }

    /// Random encoder with a fixed seed. Weights are drawn so that activations
    /// stay O(1) through the residual stream.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = BTreeMap::new();
        for (name, shape) in config.expected_tensors() {
            let std = if name.ends_with(".weight") {
                1.0 / (shape[0] as f64).sqrt()
            } else if name.ends_with(".gamma") {
                0.1
            } else if name == "cls" {
                0.5
            } else if name == "pos" {
                0.2
            } else {
                0.05
            };
            let mean = if name.ends_with(".gamma") { 1.0 } else { 0.0 };
            let dist = Normal::new(mean, std).expect("valid normal");
            let t = Tensor::from_fn(&shape, |_| dist.sample(&mut rng) as f32);
            weights.insert(name, t);
        }
        Self::new(config, weights)
    }
}

/// Splits `[N×C]` into per-head column blocks, or `[heads×N×N]` into heads.
pub(crate) fn head_slice<T: Scalar>(x: &Tensor<T>, head: usize, heads: usize) -> Result<Tensor<T>> {
    match x.shape() {
        [_, c] => {
            let d = c / heads;
            x.slice_cols(head * d, d)
        }
        [h, r, c] if *h == heads => {
            let stride = r * c;
            Tensor::from_raw(vec![*r, *c], x.data()[head * stride..(head + 1) * stride].to_vec())
        }
        other => Err(Error::Dimension(format!(
            "cannot split shape {other:?} into {heads} heads"
        ))),
    }
}

/// Dense attention product, per head.
pub fn attention_product<T: Scalar>(
    product: AttnProduct,
    a: &Tensor<T>,
    b: &Tensor<T>,
    heads: usize,
) -> Result<Tensor<T>> {
    match product {
        AttnProduct::Scores => {
            let (n, _) = a.dims2()?;
            let mut data = Vec::with_capacity(heads * n * n);
            for h in 0..heads {
                let qh = head_slice(a, h, heads)?;
                let kh = head_slice(b, h, heads)?.transpose2()?;
                data.extend_from_slice(matmul(&qh, &kh)?.data());
            }
            Tensor::from_raw(vec![heads, n, n], data)
        }
        AttnProduct::Context => {
            let (n, c) = b.dims2()?;
            let d = c / heads;
            let mut out = Tensor::zeros(&[n, c]);
            for h in 0..heads {
                let sh = head_slice(a, h, heads)?;
                let vh = head_slice(b, h, heads)?;
                let ctx = matmul(&sh, &vh)?;
                for i in 0..n {
                    out.data_mut()[i * c + h * d..i * c + (h + 1) * d].copy_from_slice(ctx.row(i));
                }
            }
            Ok(out)
        }
    }
}

/// `x·W + b` for `x: [rows×in]`, `W: [in×out]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut y = matmul(x, w)?;
    y.add_row_bias(b)?;
    Ok(y)
}

/// Splits the columns of `y` into `parts` equal blocks.
pub(crate) fn split_cols<T: Scalar>(y: Tensor<T>, parts: usize) -> Result<Vec<Tensor<T>>> {
    if parts == 1 {
        return Ok(vec![y]);
    }
    let (_, c) = y.dims2()?;
    let w = c / parts;
    (0..parts).map(|p| y.slice_cols(p * w, w)).collect()
}

/// Prepends the CLS row to `[N−1 × C]` embeddings.
pub(crate) fn prepend_row<T: Scalar>(row: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = x.dims2()?;
    if row.len() != c {
        return Err(Error::Dimension(format!("CLS width {} vs {c}", row.len())));
    }
    let mut data = Vec::with_capacity((r + 1) * c);
    data.extend_from_slice(row.data());
    data.extend_from_slice(x.data());
    Tensor::from_raw(vec![r + 1, c], data)
}

/// Output of [`ann_forward`].
#[derive(Debug, Clone)]
pub struct AnnOutput<T: Scalar> {
    pub logits: Tensor<T>,
    /// Calibration site → tapped tensor (only when taps were requested).
    pub activations: BTreeMap<String, Tensor<T>>,
}

/// Exact forward pass. `tokens` holds the patch tokens `[N−1 × in_dim]`.
pub fn ann_forward<T: Scalar>(model: &ModelGraph, tokens: &Tensor<T>, taps: bool) -> Result<AnnOutput<T>> {
    if tokens.shape() != model.input_shape() {
        return Err(Error::Dimension(format!(
            "input tokens {:?}, model expects {:?}",
            tokens.shape(),
            model.input_shape()
        )));
    }
    tokens.check_finite("input tokens")?;
    let heads = model.config.heads;
    let eps = T::lit(model.config.ln_eps);
    let mut env: HashMap<&str, Tensor<T>> = HashMap::new();
    env.insert(INPUT_VALUE, tokens.clone());
    let mut activations = BTreeMap::new();
    let get = |env: &HashMap<&str, Tensor<T>>, k: &str| -> Result<Tensor<T>> {
        env.get(k)
            .cloned()
            .ok_or_else(|| Error::Validation(format!("value '{k}' used before definition")))
    };

    for layer in &model.layers {
        if taps {
            for (site, value) in layer.sites.iter().zip(layer.inputs()) {
                activations.insert(site.clone(), get(&env, value)?);
            }
        }
        match &layer.kind {
            LayerKind::EmbedLinear {
                input,
                output,
                weight,
                bias,
                cls,
            } => {
                let x = get(&env, input)?;
                let y = linear(&x, &model.weight_as(weight)?, &model.weight_as(bias)?)?;
                env.insert(output, prepend_row(&model.weight_as(cls)?, &y)?);
            }
            LayerKind::PosAdd { input, output, pos } => {
                let x = get(&env, input)?;
                env.insert(output, x.add(&model.weight_as(pos)?)?);
            }
            LayerKind::LayerNorm {
                input,
                output,
                gamma,
                beta,
            } => {
                let x = get(&env, input)?;
                let y = tensor::layernorm(&x, &model.weight_as(gamma)?, &model.weight_as(beta)?, eps)?;
                env.insert(output, y);
            }
            LayerKind::Linear {
                input,
                outputs,
                weight,
                bias,
            } => {
                let x = get(&env, input)?;
                let y = linear(&x, &model.weight_as(weight)?, &model.weight_as(bias)?)?;
                for (name, part) in outputs.iter().zip(split_cols(y, outputs.len())?) {
                    env.insert(name, part);
                }
            }
            LayerKind::MatMul { a, b, output, product } => {
                let y = attention_product(*product, &get(&env, a)?, &get(&env, b)?, heads)?;
                env.insert(output, y);
            }
            LayerKind::Softmax { input, output, scale } => {
                let x = get(&env, input)?;
                let y = tensor::apply_nonlinearity(&Nonlinearity::Softmax { scale: T::lit(*scale) }, &x)?;
                env.insert(output, y);
            }
            LayerKind::Gelu { input, output } => {
                let x = get(&env, input)?;
                env.insert(output, tensor::apply_nonlinearity(&Nonlinearity::Gelu, &x)?);
            }
            LayerKind::ResidualAdd { a, b, output } => {
                let y = get(&env, a)?.add(&get(&env, b)?)?;
                env.insert(output, y);
            }
            LayerKind::ClsHead {
                input,
                output,
                weight,
                bias,
            } => {
                let x = get(&env, input)?;
                let cls = Tensor::from_raw(vec![1, x.last_dim()], x.row(0).to_vec())?;
                let y = linear(&cls, &model.weight_as(weight)?, &model.weight_as(bias)?)?;
                env.insert(output, y.reshape(vec![model.config.num_classes])?);
            }
        }
    }
    let logits = env
        .remove("logits")
        .ok_or_else(|| Error::Validation("graph produced no logits".into()))?;
    Ok(AnnOutput { logits, activations })
}

/// Splits an `[H×W×ch]` image into row-major flattened patches.
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch_size: usize) -> Result<Tensor<T>> {
    let [h, w, ch] = match image.shape() {
        [h, w, c] => [*h, *w, *c],
        other => return Err(Error::Dimension(format!("expected HxWxC image, got {other:?}"))),
    };
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Dimension(format!(
            "image {h}x{w} not divisible by patch size {patch_size}"
        )));
    }
    let (ph, pw) = (h / patch_size, w / patch_size);
    let plen = patch_size * patch_size * ch;
    let mut out = Vec::with_capacity(ph * pw * plen);
    for py in 0..ph {
        for px in 0..pw {
            for dy in 0..patch_size {
                let y = py * patch_size + dy;
                let start = (y * w + px * patch_size) * ch;
                out.extend_from_slice(&image.data()[start..start + patch_size * ch]);
            }
        }
    }
    Tensor::from_raw(vec![ph * pw, plen], out)
}
