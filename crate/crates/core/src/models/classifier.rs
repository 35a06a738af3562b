use autodiff::{Expr, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Elu,
    None,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
            Activation::Elu => {
                if v > 0.0 {
                    v
                } else {
                    v.exp_m1()
                }
            }
            Activation::None => v,
        }
    }

    pub(crate) fn build(self, g: &mut Graph, x: Expr) -> Result<Expr> {
        Ok(match self {
            Activation::Sigmoid => g.sigmoid(x)?,
            Activation::Elu => g.elu(x)?,
            Activation::None => x,
        })
    }
}

/// Geometry of one layer. Convolutions use NCHW layout and square kernels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        bias: bool,
        activation: Activation,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        in_height: usize,
        in_width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        activation: Activation,
    },
}

impl LayerSpec {
    pub fn dense(inputs: usize, outputs: usize, activation: Activation) -> Self {
        LayerSpec::Dense { inputs, outputs, bias: true, activation }
    }

    pub fn activation(&self) -> Activation {
        match self {
            LayerSpec::Dense { activation, .. } | LayerSpec::Conv { activation, .. } => *activation,
        }
    }

    pub fn has_bias(&self) -> bool {
        match self {
            LayerSpec::Dense { bias, .. } | LayerSpec::Conv { bias, .. } => *bias,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerSpec::Dense { inputs, outputs, .. } => vec![outputs, inputs],
            LayerSpec::Conv { in_channels, out_channels, kernel, .. } => {
                vec![out_channels, in_channels, kernel, kernel]
            }
        }
    }

    pub fn bias_len(&self) -> usize {
        match *self {
            LayerSpec::Dense { outputs, .. } => outputs,
            LayerSpec::Conv { out_channels, .. } => out_channels,
        }
    }

    /// Output spatial size, or `None` if the geometry is invalid.
    fn out_hw(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Dense { .. } => Some((1, 1)),
            LayerSpec::Conv { in_height, in_width, kernel, stride, pad, .. } => {
                let geom = autodiff::kernels::ConvGeom { stride, pad };
                Some((geom.out_len(in_height, kernel)?, geom.out_len(in_width, kernel)?))
            }
        }
    }

    /// `(channels, positions per channel)` of the layer output.
    pub fn output_layout(&self) -> (usize, usize) {
        let (h, w) = self.out_hw().unwrap_or((0, 0));
        (self.bias_len(), h * w)
    }

    pub fn input_len(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv { in_channels, in_height, in_width, .. } => in_channels * in_height * in_width,
        }
    }

    pub fn output_len(&self) -> usize {
        let (c, s) = self.output_layout();
        c * s
    }

    fn fans(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Dense { inputs, outputs, .. } => (inputs, outputs),
            LayerSpec::Conv { in_channels, out_channels, kernel, .. } => {
                (in_channels * kernel * kernel, out_channels * kernel * kernel)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LayerSpec::Dense { inputs, outputs, .. } => inputs > 0 && outputs > 0,
            LayerSpec::Conv { in_channels, out_channels, kernel, stride, in_height, in_width, .. } => {
                in_channels > 0
                    && out_channels > 0
                    && kernel > 0
                    && (1..=2).contains(&stride)
                    && in_height > 0
                    && in_width > 0
                    && self.out_hw().is_some()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!("invalid layer geometry {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// Expressions produced by building the forward pass into a graph.
#[derive(Clone, Debug)]
pub struct ForwardExprs {
    /// `[B, L]`.
    pub logits: Expr,
    /// Post-activation output of every hidden layer, as `[B, C*S]` where
    /// the layout is channel-major (`S` positions per channel).
    pub hidden: Vec<(Expr, usize, usize)>,
}

/// A layered classifier `f_θ`: dense or convolutional layers with C1
/// activations and a final biased logit layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    layers: Vec<Layer>,
}

impl ClassifierModel {
    /// Builds a model with seeded Glorot-uniform weights and zero biases.
    pub fn init(specs: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for s in &specs {
            let (fi, fo) = s.fans();
            let a = (6.0 / (fi + fo) as f64).sqrt();
            let shape = s.weight_shape();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
            params.push(Tensor::new(shape, data)?);
            if s.has_bias() {
                params.push(Tensor::zeros(&[s.bias_len()]));
            }
        }
        Self::from_params(specs, params)
    }

    /// Assembles a model from layer specs and a flat parameter list ordered
    /// weight, bias per layer.
    pub fn from_params(specs: Vec<LayerSpec>, params: Vec<Tensor>) -> Result<Self> {
        let Some(last) = specs.last() else {
            return Err(Error::Shape("classifier needs at least one layer".into()));
        };
        if last.activation() != Activation::None || !last.has_bias() {
            return Err(Error::Shape("final layer must be biased logits without activation".into()));
        }
        if !matches!(last, LayerSpec::Dense { .. }) {
            return Err(Error::Shape("final layer must be dense".into()));
        }
        for s in &specs {
            s.validate()?;
        }
        for w in specs.windows(2) {
            if w[0].output_len() != w[1].input_len() {
                return Err(Error::Shape(format!(
                    "layer output {} does not feed next layer input {}",
                    w[0].output_len(),
                    w[1].input_len()
                )));
            }
        }
        let mut it = params.into_iter();
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let weight = it.next().ok_or_else(|| Error::Shape("too few parameters".into()))?;
            if weight.shape() != spec.weight_shape().as_slice() {
                return Err(Error::Shape(format!(
                    "weight {:?}, expected {:?}",
                    weight.shape(),
                    spec.weight_shape()
                )));
            }
            let bias = if spec.has_bias() {
                let b = it.next().ok_or_else(|| Error::Shape("too few parameters".into()))?;
                if b.shape() != [spec.bias_len()] {
                    return Err(Error::Shape(format!("bias {:?}, expected [{}]", b.shape(), spec.bias_len())));
                }
                Some(b)
            } else {
                None
            };
            layers.push(Layer { spec, weight, bias });
        }
        if it.next().is_some() {
            return Err(Error::Shape("too many parameters".into()));
        }
        Ok(Self { layers })
    }

    /// `256 -> 128 -> 64 -> 10`, sigmoid hidden units.
    pub fn mlp3(seed: u64) -> Self {
        Self::dense_stack(&[256, 128, 64, 10], Activation::Sigmoid, seed).expect("valid preset")
    }

    /// 16x16x1 input, three 3x3 ELU convolutions and a dense logit layer.
    pub fn cnn4(seed: u64) -> Self {
        let conv = |ci, co, h, stride| LayerSpec::Conv {
            in_channels: ci,
            out_channels: co,
            in_height: h,
            in_width: h,
            kernel: 3,
            stride,
            pad: 1,
            bias: true,
            activation: Activation::Elu,
        };
        let specs = vec![
            conv(1, 4, 16, 1),
            conv(4, 8, 16, 2),
            conv(8, 8, 8, 2),
            LayerSpec::dense(128, 10, Activation::None),
        ];
        Self::init(specs, seed).expect("valid preset")
    }

    /// Fully connected stack with the given widths, all layers biased.
    pub fn dense_stack(widths: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Shape("need at least input and output widths".into()));
        }
        let n = widths.len() - 1;
        let specs = (0..n)
            .map(|i| {
                let act = if i + 1 == n { Activation::None } else { activation };
                LayerSpec::dense(widths[i], widths[i + 1], act)
            })
            .collect();
        Self::init(specs, seed)
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "mlp3" => Ok(Self::mlp3(seed)),
            "cnn4" => Ok(Self::cnn4(seed)),
            other => Err(Error::Config(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.input_len()
    }

    pub fn label_count(&self) -> usize {
        self.layers.last().expect("nonempty").spec.output_len()
    }

    /// Number of hidden layers whose outputs are instrumented for BN stats.
    pub fn hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            if let Some(b) = &l.bias {
                out.push(b);
            }
        }
        out
    }

    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.params().into_iter().cloned().collect()
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params().iter().map(|p| p.shape().to_vec()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Same architecture, new parameters.
    pub fn with_params(&self, params: Vec<Tensor>) -> Result<Self> {
        Self::from_params(self.specs(), params)
    }

    /// Index of the final layer's bias in the parameter list.
    pub fn final_bias_index(&self) -> usize {
        self.params().len() - 1
    }

    /// Short content hash of architecture and parameter bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.specs()).expect("serializable specs"));
        for p in self.params() {
            for v in p.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    /// Adds the forward pass for a `[B, m]` input to `g`, with one leaf
    /// (or expression) per parameter.
    pub fn build_forward(&self, g: &mut Graph, x: Expr, params: &[Expr]) -> Result<ForwardExprs> {
        let (out, hidden) = self.build_layers(g, x, params, self.layers.len())?;
        let b = g.shape(out)[0];
        let logits = g.reshape(out, &[b, self.label_count()])?;
        Ok(ForwardExprs { logits, hidden })
    }

    /// Output of the first `depth` layers as `[B, n]` (`depth = 0` is the
    /// input itself).
    pub fn build_prefix(&self, g: &mut Graph, x: Expr, params: &[Expr], depth: usize) -> Result<Expr> {
        if depth > self.layers.len() {
            return Err(Error::Shape(format!("depth {depth} exceeds {} layers", self.layers.len())));
        }
        Ok(self.build_layers(g, x, params, depth)?.0)
    }

    fn build_layers(
        &self,
        g: &mut Graph,
        x: Expr,
        params: &[Expr],
        depth: usize,
    ) -> Result<(Expr, Vec<(Expr, usize, usize)>)> {
        let b = match g.shape(x) {
            [b, m] if *m == self.input_dim() => *b,
            s => return Err(Error::Shape(format!("input {s:?}, expected [B, {}]", self.input_dim()))),
        };
        let mut h = x;
        let mut hidden = Vec::new();
        let mut pi = 0;
        for (li, layer) in self.layers.iter().enumerate().take(depth) {
            let w = params[pi];
            pi += 1;
            let pre = match layer.spec {
                LayerSpec::Dense { inputs, .. } => {
                    let flat = g.reshape(h, &[b, inputs])?;
                    g.matmul_t(flat, w, false, true)?
                }
                LayerSpec::Conv { in_channels, in_height, in_width, stride, pad, .. } => {
                    let img = g.reshape(h, &[b, in_channels, in_height, in_width])?;
                    g.conv2d(img, w, stride, pad)?
                }
            };
            let (c, s) = layer.spec.output_layout();
            let pre = if layer.bias.is_some() {
                let bias = params[pi];
                pi += 1;
                let shape = g.shape(pre).to_vec();
                let e = g.expand(bias, b, c, s, &shape)?;
                g.add(pre, e)?
            } else {
                pre
            };
            let act = layer.spec.activation().build(g, pre)?;
            h = g.reshape(act, &[b, c * s])?;
            if li + 1 < self.layers.len() {
                hidden.push((h, c, s));
            }
        }
        Ok((h, hidden))
    }

    /// Forward pass of a `[m]` or `[B, m]` input. Returns logits of shape
    /// `[L]` or `[B, L]` respectively.
    pub fn classify(&self, x: &Tensor) -> Result<Tensor> {
        let (batched, b) = match x.shape() {
            [m] if *m == self.input_dim() => (false, 1),
            [b, m] if *m == self.input_dim() => (true, *b),
            s => return Err(Error::Shape(format!("input {s:?}, expected [{}] or [B, {0}]", self.input_dim()))),
        };
        let acts = self.activations(x.data(), b)?;
        let logits = acts.into_iter().last().expect("nonempty");
        let shape = if batched { vec![b, self.label_count()] } else { vec![self.label_count()] };
        Ok(Tensor::new(shape, logits)?)
    }

    /// Post-activation outputs of every layer for a flat `[B*m]` batch.
    pub(crate) fn activations(&self, x: &[f64], b: usize) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let xl = g.leaf("x", &[b, self.input_dim()]);
        let params: Vec<Expr> = self
            .params()
            .iter()
            .enumerate()
            .map(|(i, p)| g.leaf(format!("p{i}"), p.shape()))
            .collect();
        let fwd = self.build_forward(&mut g, xl, &params)?;
        let xt = Tensor::new(vec![b, self.input_dim()], x.to_vec())?;
        let mut bind = autodiff::Bindings::new();
        bind.bind(xl, &xt);
        for (l, p) in params.iter().zip(self.params()) {
            bind.bind(*l, p);
        }
        let mut roots: Vec<Expr> = fwd.hidden.iter().map(|h| h.0).collect();
        roots.push(fwd.logits);
        Ok(g.eval_many(&roots, &bind)?.into_iter().map(Tensor::into_data).collect())
    }
}
