//! Builders for the registry architectures, named like their hub checkpoints
//! so pretrained tensors load by key.

use profagent_nn::{
    BatchNorm2d, ClassToken, Conv2d, Dense, LayerNorm, Linear, MultiHeadAttention, Network, NetworkBuilder, NodeId,
    Op, PositionEmbedding, Result, Scalar,
};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct VitConfig {
    /// Top-level module prefix (`vit` or `deit`).
    pub prefix: String,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp: usize,
    pub num_labels: usize,
    pub layer_norm_eps: f64,
}

impl VitConfig {
    pub fn base_patch16_224() -> Self {
        Self {
            prefix: "vit".into(),
            image_size: 224,
            patch_size: 16,
            channels: 3,
            hidden: 768,
            layers: 12,
            heads: 12,
            mlp: 3072,
            num_labels: 1000,
            layer_norm_eps: 1e-12,
        }
    }
}

pub fn vit<T: Scalar, R: Rng + ?Sized>(cfg: &VitConfig, rng: &mut R) -> Result<Network<T>> {
    let p = &cfg.prefix;
    let grid = cfg.image_size / cfg.patch_size;
    let tokens = grid * grid + 1;
    let mut b = NetworkBuilder::<T>::new(vec![cfg.channels, cfg.image_size, cfg.image_size]);
    let patch = b.push(
        format!("{p}.embeddings.patch_embeddings.projection"),
        Op::Conv2d(Conv2d::new(
            rng,
            cfg.channels,
            cfg.hidden,
            (cfg.patch_size, cfg.patch_size),
            (cfg.patch_size, cfg.patch_size),
            (0, 0),
            1,
            true,
        )),
        &[b.input()],
    );
    let seq = b.push(format!("{p}.embeddings.patch_embeddings.flatten"), Op::PatchTokens, &[patch]);
    let cls = b.push(
        format!("{p}.embeddings.cls_token"),
        Op::ClassToken(ClassToken { token: small(rng, &[cfg.hidden]) }),
        &[seq],
    );
    let mut x = b.push(
        format!("{p}.embeddings.position_embeddings"),
        Op::PositionEmbedding(PositionEmbedding { table: small(rng, &[tokens, cfg.hidden]) }),
        &[cls],
    );
    for i in 0..cfg.layers {
        x = vit_block(&mut b, rng, cfg, &format!("{p}.encoder.layer.{i}"), x);
    }
    let ln = b.push(
        format!("{p}.layernorm"),
        Op::LayerNorm(LayerNorm::new(rng, cfg.hidden, cfg.layer_norm_eps)),
        &[x],
    );
    let pooled = b.push(format!("{p}.pooler"), Op::SelectToken(0), &[ln]);
    b.push(
        "classifier",
        Op::Linear(Dense::Float(Linear::new(rng, cfg.hidden, cfg.num_labels, true))),
        &[pooled],
    );
    b.build()
}

fn small<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> ndarray::ArrayD<T> {
    let n: usize = shape.iter().product();
    let v: Vec<T> = (0..n).map(|_| T::of(rng.random_range(-0.02..0.02))).collect();
    ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(shape), v).expect("shape")
}

fn vit_block<T: Scalar, R: Rng + ?Sized>(
    b: &mut NetworkBuilder<T>,
    rng: &mut R,
    cfg: &VitConfig,
    base: &str,
    x: NodeId,
) -> NodeId {
    let ln1 = b.push(
        format!("{base}.layernorm_before"),
        Op::LayerNorm(LayerNorm::new(rng, cfg.hidden, cfg.layer_norm_eps)),
        &[x],
    );
    let names = [
        format!("{base}.attention.attention.query"),
        format!("{base}.attention.attention.key"),
        format!("{base}.attention.attention.value"),
        format!("{base}.attention.output.dense"),
    ];
    let head_dim = cfg.hidden / cfg.heads;
    let attn = b.push(
        format!("{base}.attention"),
        Op::Attention(MultiHeadAttention::new(rng, names, cfg.hidden, cfg.heads, head_dim)),
        &[ln1],
    );
    let res1 = b.push(format!("{base}.attention_residual"), Op::Add, &[attn, x]);
    let ln2 = b.push(
        format!("{base}.layernorm_after"),
        Op::LayerNorm(LayerNorm::new(rng, cfg.hidden, cfg.layer_norm_eps)),
        &[res1],
    );
    let fc1 = b.push(
        format!("{base}.intermediate.dense"),
        Op::Linear(Dense::Float(Linear::new(rng, cfg.hidden, cfg.mlp, true))),
        &[ln2],
    );
    let act = b.push(format!("{base}.intermediate.intermediate_act_fn"), Op::Gelu, &[fc1]);
    let fc2 = b.push(
        format!("{base}.output.dense"),
        Op::Linear(Dense::Float(Linear::new(rng, cfg.mlp, cfg.hidden, true))),
        &[act],
    );
    b.push(format!("{base}.output_residual"), Op::Add, &[fc2, res1])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResNetConfig {
    pub image_size: usize,
    pub embedding: usize,
    pub hidden_sizes: Vec<usize>,
    pub depths: Vec<usize>,
    pub num_labels: usize,
}

impl ResNetConfig {
    pub fn resnet101() -> Self {
        Self {
            image_size: 224,
            embedding: 64,
            hidden_sizes: vec![256, 512, 1024, 2048],
            depths: vec![3, 4, 23, 3],
            num_labels: 1000,
        }
    }

    pub fn resnet50() -> Self {
        Self { depths: vec![3, 4, 6, 3], ..Self::resnet101() }
    }
}

fn conv_bn<T: Scalar, R: Rng + ?Sized>(
    b: &mut NetworkBuilder<T>,
    rng: &mut R,
    base: &str,
    input: NodeId,
    (cin, cout): (usize, usize),
    kernel: usize,
    stride: usize,
    relu: bool,
) -> NodeId {
    let c = b.push(
        format!("{base}.convolution"),
        Op::Conv2d(Conv2d::new(rng, cin, cout, (kernel, kernel), (stride, stride), (kernel / 2, kernel / 2), 1, false)),
        &[input],
    );
    let n = b.push(format!("{base}.normalization"), Op::BatchNorm2d(BatchNorm2d::new(rng, cout)), &[c]);
    if relu {
        b.push(format!("{base}.activation"), Op::Relu, &[n])
    } else {
        n
    }
}

/// Bottleneck ResNet with hub-style names (`resnet.encoder.stages.{s}.layers.{l}.layer.{j}`).
pub fn resnet<T: Scalar, R: Rng + ?Sized>(cfg: &ResNetConfig, rng: &mut R) -> Result<Network<T>> {
    let mut b = NetworkBuilder::<T>::new(vec![3, cfg.image_size, cfg.image_size]);
    let input = b.input();
    let stem = conv_bn(&mut b, rng, "resnet.embedder.embedder", input, (3, cfg.embedding), 7, 2, true);
    let mut x = b.push(
        "resnet.embedder.pooler",
        Op::MaxPool2d { kernel: 3, stride: 2, padding: 1 },
        &[stem],
    );
    let mut cin = cfg.embedding;
    for (s, (&out, &depth)) in cfg.hidden_sizes.iter().zip(&cfg.depths).enumerate() {
        for l in 0..depth {
            let stride = if l == 0 && s > 0 { 2 } else { 1 };
            let base = format!("resnet.encoder.stages.{s}.layers.{l}");
            let mid = out / 4;
            let shortcut = if cin != out || stride != 1 {
                conv_bn(&mut b, rng, &format!("{base}.shortcut"), x, (cin, out), 1, stride, false)
            } else {
                x
            };
            let h = conv_bn(&mut b, rng, &format!("{base}.layer.0"), x, (cin, mid), 1, 1, true);
            let h = conv_bn(&mut b, rng, &format!("{base}.layer.1"), h, (mid, mid), 3, stride, true);
            let h = conv_bn(&mut b, rng, &format!("{base}.layer.2"), h, (mid, out), 1, 1, false);
            let sum = b.push(format!("{base}.residual"), Op::Add, &[h, shortcut]);
            x = b.push(format!("{base}.activation"), Op::Relu, &[sum]);
            cin = out;
        }
    }
    let pooled = b.push("resnet.pooler", Op::GlobalAvgPool, &[x]);
    b.push(
        "classifier.1",
        Op::Linear(Dense::Float(Linear::new(rng, cin, cfg.num_labels, true))),
        &[pooled],
    );
    b.build()
}
