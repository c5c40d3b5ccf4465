//! Dense-block CNN with cell-type fusion and two classification heads.
//!
//! Structure, in forward order: a strided stem conv and max pool, a stack of
//! dense blocks joined by transition layers, global average pooling, a
//! fully-connected fusion layer that concatenates the cell-type one-hot onto
//! the pooled features, and two weight matrices over the embedding: a plain
//! softmax head (with bias, initialized 0) and a cosine head whose rows are
//! L2-normalized against the L2-normalized embedding.
//!
//! Inside a dense block, layer `l` consumes the channel-concatenation of the
//! block input and every previous layer's output. Each dense layer is
//! ReLU -> 1x1 conv (bottleneck) -> ReLU -> 3x3 conv; there is no batch norm.
//! Spatial dims and concatenated channel counts shrink only at transitions.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::ops::COSINE_CLAMP;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Magic string opening a checkpoint file.
pub const CHECKPOINT_MAGIC: &str = "PLAB1";

const STEM_KERNEL: usize = 7;
const STEM_STRIDE: usize = 2;
const STEM_PAD: usize = 3;

/// Which classification head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Softmax,
    Arc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub input_size: usize,
    pub growth_rate: usize,
    pub block_layers: Vec<usize>,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub num_cell_types: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults; only the class count varies per dataset.
    pub fn with_defaults(num_classes: usize) -> Self {
        ModelConfig {
            in_channels: 6,
            input_size: 64,
            growth_rate: 8,
            block_layers: vec![2, 2, 2],
            embedding_dim: 32,
            num_classes,
            num_cell_types: 4,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels < 1 {
            return Err(Error::InvalidConfig("in_channels must be >= 1".into()));
        }
        if self.block_layers.is_empty() || self.block_layers.iter().any(|&l| l < 1) {
            return Err(Error::InvalidConfig("block_layers must be non-empty, all >= 1".into()));
        }
        if self.embedding_dim < 2 {
            return Err(Error::InvalidConfig("embedding_dim must be >= 2".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be >= 2".into()));
        }
        if self.growth_rate < 1 {
            return Err(Error::InvalidConfig("growth_rate must be >= 1".into()));
        }
        if self.num_cell_types != 4 {
            return Err(Error::InvalidConfig(format!(
                "num_cell_types must be 4 (the cell panel), got {}",
                self.num_cell_types
            )));
        }
        self.shape_trace()?;
        Ok(())
    }

    fn stem_channels(&self) -> usize {
        2 * self.growth_rate
    }

    fn bottleneck_channels(&self) -> usize {
        2 * self.growth_rate
    }

    /// Channel count entering each block and after its dense layers.
    fn block_channels(&self) -> Vec<(usize, usize)> {
        let mut ch = self.stem_channels();
        let mut out = Vec::new();
        for (b, &layers) in self.block_layers.iter().enumerate() {
            let exit = ch + layers * self.growth_rate;
            out.push((ch, exit));
            ch = if b + 1 < self.block_layers.len() { exit / 2 } else { exit };
        }
        out
    }

    /// Channels of the pooled feature vector feeding the fusion layer.
    pub fn feature_dim(&self) -> usize {
        self.block_channels().last().expect("at least one block").1
    }

    /// Stage-by-stage output shapes, as a pure function of the config.
    pub fn shape_trace(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let mut out = Vec::new();
        let half = |len: usize, k: usize, s: usize, p: usize, what: &str| -> Result<usize> {
            crate::ops::conv_out_len(len, k, s, p).filter(|&l| l >= 1).ok_or_else(|| {
                Error::InvalidConfig(format!("input_size too small: {what} output would be empty"))
            })
        };
        let mut size = half(self.input_size, STEM_KERNEL, STEM_STRIDE, STEM_PAD, "stem conv")?;
        out.push(("stem.conv".into(), vec![self.stem_channels(), size, size]));
        size = half(size, 2, 2, 0, "stem pool")?;
        out.push(("stem.pool".into(), vec![self.stem_channels(), size, size]));
        for (b, ((entry, exit), &layers)) in
            self.block_channels().iter().zip(&self.block_layers).enumerate()
        {
            let mut ch = *entry;
            for l in 0..layers {
                ch += self.growth_rate;
                out.push((format!("block{}.layer{}", b + 1, l + 1), vec![ch, size, size]));
            }
            debug_assert_eq!(ch, *exit);
            if b + 1 < self.block_layers.len() {
                out.push((format!("transition{}.conv", b + 1), vec![exit / 2, size, size]));
                size = half(size, 2, 2, 0, "transition pool")?;
                out.push((format!("transition{}.pool", b + 1), vec![exit / 2, size, size]));
            }
        }
        out.push(("gap".into(), vec![self.feature_dim()]));
        out.push(("embedding".into(), vec![self.embedding_dim]));
        Ok(out)
    }

    /// Shapes of every parameter, in declaration (= checkpoint) order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        out.push((
            "stem.conv.weight".into(),
            vec![self.stem_channels(), self.in_channels, STEM_KERNEL, STEM_KERNEL],
        ));
        for (b, ((entry, exit), &layers)) in
            self.block_channels().iter().zip(&self.block_layers).enumerate()
        {
            let mut ch = *entry;
            for l in 0..layers {
                out.push((
                    format!("block{}.layer{}.conv1.weight", b + 1, l + 1),
                    vec![self.bottleneck_channels(), ch, 1, 1],
                ));
                out.push((
                    format!("block{}.layer{}.conv2.weight", b + 1, l + 1),
                    vec![self.growth_rate, self.bottleneck_channels(), 3, 3],
                ));
                ch += self.growth_rate;
            }
            if b + 1 < self.block_layers.len() {
                out.push((
                    format!("transition{}.conv.weight", b + 1),
                    vec![exit / 2, *exit, 1, 1],
                ));
            }
        }
        let fusion_in = self.feature_dim() + self.num_cell_types;
        out.push(("fusion.weight".into(), vec![self.embedding_dim, fusion_in]));
        out.push(("fusion.bias".into(), vec![self.embedding_dim]));
        out.push(("head.softmax.weight".into(), vec![self.num_classes, self.embedding_dim]));
        out.push(("head.softmax.bias".into(), vec![self.num_classes]));
        out.push(("head.arc.weight".into(), vec![self.num_classes, self.embedding_dim]));
        out
    }

    /// Total trainable parameter count.
    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Names of every 1x1 convolution layer in declaration order.
    pub fn conv1x1_layers(&self) -> Vec<String> {
        self.param_shapes()
            .into_iter()
            .filter(|(name, shape)| {
                shape.len() == 4 && shape[2] == 1 && shape[3] == 1 && name.ends_with(".weight")
            })
            .map(|(name, _)| name.trim_end_matches(".weight").to_string())
            .collect()
    }

    /// Activation the Grad-CAM export defaults to: the 3x3 conv output of the
    /// last layer of the last dense block.
    pub fn default_cam_layer(&self) -> String {
        let b = self.block_layers.len();
        let l = self.block_layers[b - 1];
        format!("block{b}.layer{l}.conv2")
    }
}

#[derive(Debug, Clone)]
struct Param<S: Scalar> {
    name: String,
    tensor: Tensor<S>,
}

/// The network: configuration plus named parameters in declaration order.
///
/// Immutable during inference; training mutates weights through
/// [`Model::apply_gradients`] and is single-writer.
#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    config: ModelConfig,
    params: Vec<Param<S>>,
}

/// Leaf node ids for every parameter inside one graph, aligned with the
/// model's declaration order.
#[derive(Debug, Clone)]
pub struct ParamBinding {
    ids: Vec<NodeId>,
}

impl ParamBinding {
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

/// Named activations recorded during one traced forward pass.
#[derive(Debug, Clone, Default)]
pub struct ActivationTrace {
    entries: Vec<(String, NodeId)>,
}

impl ActivationTrace {
    fn push(&mut self, name: impl Into<String>, id: NodeId) {
        self.entries.push((name.into(), id));
    }

    pub fn get(&self, name: &str) -> Option<NodeId> {
        self.entries.iter().find(|(n, _)| n == name).map(|&(_, id)| id)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }
}

/// Build a model with weights initialized from the config seed.
pub fn build_model<S: Scalar>(config: ModelConfig) -> Result<Model<S>> {
    Model::build(config)
}

impl<S: Scalar> Model<S> {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();
        for (name, shape) in config.param_shapes() {
            let tensor = if name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else {
                // uniform in +-1/sqrt(fan_in); fan_in = product of all dims
                // but the output-channel one
                let fan_in: usize = shape[1..].iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt();
                let numel = shape.iter().product();
                let data: Vec<S> = (0..numel)
                    .map(|_| S::from_f64_lossy(rng.random_range(-bound..bound)))
                    .collect();
                Tensor::from_vec(shape, data)?
            };
            params.push(Param { name, tensor: tensor.with_grad() });
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    /// Register every parameter as a leaf in `g`. All samples forwarded
    /// through the same binding share these nodes, so batch gradients
    /// accumulate on them.
    pub fn bind(&self, g: &mut Graph<S>) -> ParamBinding {
        let ids = self.params.iter().map(|p| g.leaf(p.tensor.clone())).collect();
        ParamBinding { ids }
    }

    fn bound(&self, binding: &ParamBinding, name: &str) -> NodeId {
        let idx = self
            .params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        binding.ids[idx]
    }

    fn check_image(&self, image: &Tensor<S>) -> Result<()> {
        let c = self.config.in_channels;
        let s = self.config.input_size;
        if image.shape() != [c, s, s] {
            return Err(Error::ShapeMismatch {
                op: "forward_embedding",
                detail: format!("expected image ({c},{s},{s}), got {:?}", image.shape()),
            });
        }
        Ok(())
    }

    fn check_onehot(&self, onehot: &[S]) -> Result<()> {
        if onehot.len() != self.config.num_cell_types {
            return Err(Error::MalformedOneHot(format!(
                "length {} != {}",
                onehot.len(),
                self.config.num_cell_types
            )));
        }
        let ones = onehot.iter().filter(|&&v| v == S::one()).count();
        let zeros = onehot.iter().filter(|&&v| v == S::zero()).count();
        if ones != 1 || ones + zeros != onehot.len() {
            return Err(Error::MalformedOneHot(format!(
                "expected exactly one 1 and rest 0, got {:?}",
                onehot.iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>()
            )));
        }
        Ok(())
    }

    /// Forward one sample to its embedding, recording named activations.
    pub fn forward_traced(
        &self,
        g: &mut Graph<S>,
        binding: &ParamBinding,
        image: &Tensor<S>,
        onehot: &[S],
    ) -> Result<(NodeId, ActivationTrace)> {
        self.check_image(image)?;
        self.check_onehot(onehot)?;
        let mut trace = ActivationTrace::default();
        let x = g.leaf(image.clone());

        let stem_w = self.bound(binding, "stem.conv.weight");
        let mut cur = g.conv2d(x, stem_w, STEM_STRIDE, STEM_PAD)?;
        trace.push("stem.conv", cur);
        cur = g.maxpool2d(cur, 2, 2)?;
        trace.push("stem.pool", cur);

        let blocks = self.config.block_layers.len();
        for (b, &layers) in self.config.block_layers.iter().enumerate() {
            for l in 0..layers {
                let prefix = format!("block{}.layer{}", b + 1, l + 1);
                let w1 = self.bound(binding, &format!("{prefix}.conv1.weight"));
                let w2 = self.bound(binding, &format!("{prefix}.conv2.weight"));
                let a = g.relu(cur)?;
                let bottleneck = g.conv2d(a, w1, 1, 0)?;
                trace.push(format!("{prefix}.conv1"), bottleneck);
                let a2 = g.relu(bottleneck)?;
                let fresh = g.conv2d(a2, w2, 1, 1)?;
                trace.push(format!("{prefix}.conv2"), fresh);
                cur = g.concat(&[cur, fresh], 0)?;
                trace.push(format!("{prefix}.concat"), cur);
            }
            if b + 1 < blocks {
                let tw = self.bound(binding, &format!("transition{}.conv.weight", b + 1));
                let a = g.relu(cur)?;
                cur = g.conv2d(a, tw, 1, 0)?;
                trace.push(format!("transition{}.conv", b + 1), cur);
                cur = g.avgpool2d(cur, 2, 2)?;
                trace.push(format!("transition{}.pool", b + 1), cur);
            }
        }

        let feat = g.relu(cur)?;
        trace.push("features", feat);
        let pooled = g.adaptive_avgpool(feat)?;
        trace.push("gap", pooled);

        let onehot_node = g.leaf(Tensor::from_vec(vec![onehot.len()], onehot.to_vec())?);
        let combined = g.concat(&[pooled, onehot_node], 0)?;
        let fw = self.bound(binding, "fusion.weight");
        let fb = self.bound(binding, "fusion.bias");
        let lin = g.matmul(fw, combined)?;
        let embedding = g.add(lin, fb)?;
        trace.push("embedding", embedding);
        Ok((embedding, trace))
    }

    /// Forward a batch of samples to per-sample embedding nodes.
    pub fn forward_embedding(
        &self,
        g: &mut Graph<S>,
        binding: &ParamBinding,
        images: &[Tensor<S>],
        onehots: &[Vec<S>],
    ) -> Result<Vec<NodeId>> {
        if images.len() != onehots.len() {
            return Err(Error::ShapeMismatch {
                op: "forward_embedding",
                detail: format!("{} images vs {} one-hots", images.len(), onehots.len()),
            });
        }
        images
            .iter()
            .zip(onehots)
            .map(|(img, oh)| Ok(self.forward_traced(g, binding, img, oh)?.0))
            .collect()
    }

    /// Head outputs for a batch of embeddings, stacked to `batch x K`:
    /// softmax logits `W_soft*x + b`, and cosines between the row-normalized
    /// arc head and the L2-normalized embedding, clamped to `+-(1 - 1e-9)`.
    pub fn logits(
        &self,
        g: &mut Graph<S>,
        binding: &ParamBinding,
        embeddings: &[NodeId],
    ) -> Result<(NodeId, NodeId)> {
        if embeddings.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let k = self.config.num_classes;
        let w_soft = self.bound(binding, "head.softmax.weight");
        let b_soft = self.bound(binding, "head.softmax.bias");
        let w_arc = self.bound(binding, "head.arc.weight");
        let w_arc_unit = g.l2norm(w_arc, S::one())?;
        let clamp = S::from_f64_lossy(COSINE_CLAMP);

        let mut logit_rows = Vec::with_capacity(embeddings.len());
        let mut cosine_rows = Vec::with_capacity(embeddings.len());
        for &emb in embeddings {
            let lin = g.matmul(w_soft, emb)?;
            logit_rows.push(g.add(lin, b_soft)?);
            let unit = g.l2norm(emb, S::one()).map_err(|e| match e {
                Error::DegenerateVector => Error::DegenerateEmbedding,
                other => other,
            })?;
            let cos = g.matmul(w_arc_unit, unit)?;
            cosine_rows.push(g.clamp_abs(cos, clamp)?);
        }
        let batch = embeddings.len();
        let logits_flat = g.concat(&logit_rows, 0)?;
        let logits = g.reshape(logits_flat, vec![batch, k])?;
        let cosines_flat = g.concat(&cosine_rows, 0)?;
        let cosines = g.reshape(cosines_flat, vec![batch, k])?;
        Ok((logits, cosines))
    }

    /// SGD step: `w -= lr * grad` for every parameter whose leaf received a
    /// gradient in `g`.
    pub fn apply_gradients(&mut self, g: &Graph<S>, binding: &ParamBinding, lr: S) -> Result<()> {
        for (param, &id) in self.params.iter_mut().zip(&binding.ids) {
            if let Some(grad) = g.grad(id) {
                let grad = grad.to_vec();
                param.tensor.update(|i, w| w - lr * grad[i])?;
            }
        }
        Ok(())
    }

    /// Serialize: magic line, config as key=value lines, a blank line, then
    /// little-endian 64-bit float weights in declaration order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        writeln!(buf, "{CHECKPOINT_MAGIC}")?;
        let c = &self.config;
        writeln!(buf, "in_channels={}", c.in_channels)?;
        writeln!(buf, "input_size={}", c.input_size)?;
        writeln!(buf, "growth_rate={}", c.growth_rate)?;
        let layers: Vec<String> = c.block_layers.iter().map(|l| l.to_string()).collect();
        writeln!(buf, "block_layers={}", layers.join(","))?;
        writeln!(buf, "embedding_dim={}", c.embedding_dim)?;
        writeln!(buf, "num_classes={}", c.num_classes)?;
        writeln!(buf, "num_cell_types={}", c.num_cell_types)?;
        writeln!(buf, "seed={}", c.seed)?;
        writeln!(buf)?;
        for p in &self.params {
            for &v in p.tensor.data() {
                buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let header_end = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| Error::Parse("checkpoint: no blank line after header".into()))?;
        let header = std::str::from_utf8(&bytes[..header_end])
            .map_err(|_| Error::Parse("checkpoint: header is not UTF-8".into()))?;
        let mut lines = header.lines();
        let magic = lines.next().unwrap_or_default();
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Parse(format!(
                "checkpoint: bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
            )));
        }
        let mut kv = std::collections::BTreeMap::new();
        for line in lines {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("checkpoint: bad header line {line:?}")))?;
            kv.insert(key.to_string(), value.to_string());
        }
        let get = |key: &str| -> Result<String> {
            kv.get(key).cloned().ok_or_else(|| Error::Parse(format!("checkpoint: missing {key}")))
        };
        let parse_usize = |key: &str| -> Result<usize> {
            get(key)?.parse().map_err(|_| Error::Parse(format!("checkpoint: bad value for {key}")))
        };
        let block_layers = get("block_layers")?
            .split(',')
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Parse("checkpoint: bad block_layers".into()))?;
        let config = ModelConfig {
            in_channels: parse_usize("in_channels")?,
            input_size: parse_usize("input_size")?,
            growth_rate: parse_usize("growth_rate")?,
            block_layers,
            embedding_dim: parse_usize("embedding_dim")?,
            num_classes: parse_usize("num_classes")?,
            num_cell_types: parse_usize("num_cell_types")?,
            seed: get("seed")?
                .parse()
                .map_err(|_| Error::Parse("checkpoint: bad seed".into()))?,
        };
        let mut model = Model::build(config)?;
        let payload = &bytes[header_end + 2..];
        let expected = model.param_count() * 8;
        if payload.len() != expected {
            return Err(Error::Parse(format!(
                "checkpoint: expected {expected} weight bytes, found {}",
                payload.len()
            )));
        }
        let mut offset = 0;
        for p in &mut model.params {
            let n = p.tensor.numel();
            let data: Vec<S> = payload[offset..offset + 8 * n]
                .chunks_exact(8)
                .map(|c| S::from_f64_lossy(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            p.tensor.set_data(data)?;
            offset += 8 * n;
        }
        Ok(model)
    }
}
