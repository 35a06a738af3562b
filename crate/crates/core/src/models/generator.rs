use autodiff::{Bindings, Expr, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::classifier::Activation;
use crate::error::{Error, Result};

/// One decoder block. Every dense and conv block carries a bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GenBlock {
    Dense {
        inputs: usize,
        outputs: usize,
        activation: Activation,
    },
    /// Reinterprets a flat vector as `channels x height x width`.
    Reshape { channels: usize, height: usize, width: usize },
    /// Nearest 2x upsampling followed by a 3x3, pad 1 convolution.
    UpConv {
        in_channels: usize,
        out_channels: usize,
        height: usize,
        width: usize,
        activation: Activation,
    },
}

impl GenBlock {
    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            GenBlock::Dense { inputs, outputs, .. } => vec![vec![outputs, inputs], vec![outputs]],
            GenBlock::Reshape { .. } => vec![],
            GenBlock::UpConv { in_channels, out_channels, .. } => {
                vec![vec![out_channels, in_channels, 3, 3], vec![out_channels]]
            }
        }
    }

    fn input_len(&self) -> usize {
        match *self {
            GenBlock::Dense { inputs, .. } => inputs,
            GenBlock::Reshape { channels, height, width } => channels * height * width,
            GenBlock::UpConv { in_channels, height, width, .. } => in_channels * height * width,
        }
    }

    fn output_len(&self) -> usize {
        match *self {
            GenBlock::Dense { outputs, .. } => outputs,
            GenBlock::Reshape { channels, height, width } => channels * height * width,
            GenBlock::UpConv { out_channels, height, width, .. } => out_channels * height * width * 4,
        }
    }

    fn fans(&self) -> (usize, usize) {
        match *self {
            GenBlock::Dense { inputs, outputs, .. } => (inputs, outputs),
            GenBlock::Reshape { .. } => (1, 1),
            GenBlock::UpConv { in_channels, out_channels, .. } => (in_channels * 9, out_channels * 9),
        }
    }
}

/// A decoder `G_w: R^k -> [0, 1]^m` with a sigmoid output.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorModel {
    latent_dim: usize,
    blocks: Vec<GenBlock>,
    params: Vec<Tensor>,
}

impl GeneratorModel {
    pub fn from_params(latent_dim: usize, blocks: Vec<GenBlock>, params: Vec<Tensor>) -> Result<Self> {
        if blocks.is_empty() || latent_dim == 0 {
            return Err(Error::Shape("generator needs a latent dimension and blocks".into()));
        }
        let mut width = latent_dim;
        for b in &blocks {
            if b.input_len() != width {
                return Err(Error::Shape(format!("block {b:?} does not accept {width} inputs")));
            }
            width = b.output_len();
        }
        if latent_dim > width {
            return Err(Error::Shape(format!("latent dim {latent_dim} exceeds output dim {width}")));
        }
        let shapes: Vec<Vec<usize>> = blocks.iter().flat_map(GenBlock::param_shapes).collect();
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|(s, p)| p.shape() != s.as_slice()) {
            return Err(Error::Shape(format!(
                "generator parameters {:?} do not match {shapes:?}",
                params.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>()
            )));
        }
        Ok(Self { latent_dim, blocks, params })
    }

    /// Seeded Glorot-uniform weights, zero biases.
    pub fn init(latent_dim: usize, blocks: Vec<GenBlock>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for b in &blocks {
            let (fi, fo) = b.fans();
            let a = (6.0 / (fi + fo) as f64).sqrt();
            for (i, shape) in b.param_shapes().into_iter().enumerate() {
                let n: usize = shape.iter().product();
                let data = if i == 0 { (0..n).map(|_| rng.random_range(-a..a)).collect() } else { vec![0.0; n] };
                params.push(Tensor::new(shape, data)?);
            }
        }
        Self::from_params(latent_dim, blocks, params)
    }

    /// `k=16 -> dense 64 -> 4x4x4 -> upconv 8x8x8 -> upconv 16x16x1`.
    pub fn dec16(seed: u64) -> Self {
        Self::init(16, Self::dec16_blocks(), seed).expect("valid preset")
    }

    pub fn dec16_blocks() -> Vec<GenBlock> {
        vec![
            GenBlock::Dense { inputs: 16, outputs: 64, activation: Activation::Elu },
            GenBlock::Reshape { channels: 4, height: 4, width: 4 },
            GenBlock::UpConv { in_channels: 4, out_channels: 8, height: 4, width: 4, activation: Activation::Elu },
            GenBlock::UpConv { in_channels: 8, out_channels: 1, height: 8, width: 8, activation: Activation::None },
        ]
    }

    /// A single dense layer with `G(z_star) = x_star` exactly, so `x_star`
    /// lies in the generator's range. `x_star` entries must be in `(0, 1)`.
    pub fn containing(z_star: &Tensor, x_star: &Tensor, seed: u64) -> Result<Self> {
        let (k, m) = (z_star.numel(), x_star.numel());
        if x_star.data().iter().any(|&v| v <= 0.0 || v >= 1.0) {
            return Err(Error::Shape("target must lie strictly inside (0, 1)".into()));
        }
        let block = GenBlock::Dense { inputs: k, outputs: m, activation: Activation::None };
        let base = Self::init(k, vec![block.clone()], seed)?;
        let w = base.params[0].clone();
        let wz = autodiff::kernels::matmul(&w, &z_star.reshape(&[k, 1])?, false, false);
        let bias: Vec<f64> = x_star
            .data()
            .iter()
            .zip(wz.data())
            .map(|(&x, &v)| (x / (1.0 - x)).ln() - v)
            .collect();
        Self::from_params(k, vec![block], vec![w, Tensor::vector(bias)?])
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn output_dim(&self) -> usize {
        self.blocks.last().expect("nonempty").output_len()
    }

    pub fn blocks(&self) -> &[GenBlock] {
        &self.blocks
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn with_params(&self, params: Vec<Tensor>) -> Result<Self> {
        Self::from_params(self.latent_dim, self.blocks.clone(), params)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Adds `G_w(z)` for `z: [B, k]` to the graph; returns `[B, m]`.
    pub fn build_forward(&self, g: &mut Graph, z: Expr, params: &[Expr]) -> Result<Expr> {
        let b = match g.shape(z) {
            [b, k] if *k == self.latent_dim => *b,
            s => return Err(Error::Shape(format!("latent {s:?}, expected [B, {}]", self.latent_dim))),
        };
        let mut h = z;
        let mut pi = 0;
        for block in &self.blocks {
            h = match *block {
                GenBlock::Dense { inputs, outputs, activation } => {
                    let flat = g.reshape(h, &[b, inputs])?;
                    let y = g.matmul_t(flat, params[pi], false, true)?;
                    let e = g.expand(params[pi + 1], b, outputs, 1, &[b, outputs])?;
                    pi += 2;
                    let y = g.add(y, e)?;
                    activation.build(g, y)?
                }
                GenBlock::Reshape { channels, height, width } => g.reshape(h, &[b, channels, height, width])?,
                GenBlock::UpConv { in_channels, out_channels, height, width, activation } => {
                    let img = g.reshape(h, &[b, in_channels, height, width])?;
                    let up = g.upsample2x(img)?;
                    let y = g.conv2d(up, params[pi], 1, 1)?;
                    let shape = g.shape(y).to_vec();
                    let e = g.expand(params[pi + 1], b, out_channels, 4 * height * width, &shape)?;
                    pi += 2;
                    let y = g.add(y, e)?;
                    activation.build(g, y)?
                }
            };
        }
        let flat = g.reshape(h, &[b, self.output_dim()])?;
        Ok(g.sigmoid(flat)?)
    }

    /// Decodes `[k]` or `[B, k]` latent codes into `[m]` or `[B, m]` images.
    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        let k = self.latent_dim;
        let (batched, b) = match z.shape() {
            [n] if *n == k => (false, 1),
            [b, n] if *n == k => (true, *b),
            s => return Err(Error::Shape(format!("latent {s:?}, expected [{k}] or [B, {k}]"))),
        };
        let mut g = Graph::new();
        let zl = g.leaf("z", &[b, k]);
        let pl: Vec<Expr> = self.params.iter().enumerate().map(|(i, p)| g.leaf(format!("w{i}"), p.shape())).collect();
        let out = self.build_forward(&mut g, zl, &pl)?;
        let zt = z.reshape(&[b, k])?;
        let mut bind = Bindings::new();
        bind.bind(zl, &zt).bind_all(&pl, &self.params);
        let x = g.eval(out, &bind)?;
        Ok(if batched { x } else { x.reshape(&[self.output_dim()])? })
    }
}
