//! Model assembly: layer specs, presets, parameter initialization, and the
//! forward pass for both head kinds (softmax and GP-robustmax).
//!
//! A model is described by a serializable `ModelSpec` and realized as a
//! `Model` holding plain parameter tensors. Each forward/backward pass binds
//! the parameters onto a fresh graph (`bind`), which keeps training,
//! evaluation, and input-gradient attacks on the exact same code path.

use crate::error::{Error, Result};
use crate::gp::{init_gp_head, GpHead, GpVars, KernelKind};
use crate::graph::{Graph, Var};
use crate::linalg::Padding;
use crate::robustmax::{argmax_probs, predictive_probs, BetaParam, BetaVar};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const DEFAULT_QUAD_POINTS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { kh: usize, kw: usize, channels: usize, padding: Padding },
    Maxpool { padding: Padding },
    Fc { units: usize },
    Relu,
    Dropout { rate: f64 },
    Flatten,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataShape {
    Image { h: usize, w: usize, c: usize },
    Vector { dim: usize },
}

impl DataShape {
    pub fn numel(&self) -> usize {
        match *self {
            DataShape::Image { h, w, c } => h * w * c,
            DataShape::Vector { dim } => dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BetaSpec {
    Fixed { value: f64 },
    Learnable { init: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadSpec {
    Softmax {
        classes: usize,
    },
    GpRobustmax {
        classes: usize,
        kernel: KernelKind,
        inducing: usize,
        beta: BetaSpec,
        #[serde(default = "default_quad_points")]
        quad_points: usize,
    },
}

fn default_quad_points() -> usize {
    DEFAULT_QUAD_POINTS
}

impl HeadSpec {
    pub fn classes(&self) -> usize {
        match *self {
            HeadSpec::Softmax { classes } => classes,
            HeadSpec::GpRobustmax { classes, .. } => classes,
        }
    }
}

/// Weight initialization scheme; which one applies is part of the spec so
/// checkpoints rebuild identically.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// N(0, 0.1²) truncated at ±2σ, biases 0.1.
    TruncNormal,
    /// U(−√(6/fan_in), √(6/fan_in)), biases 0.
    FanInUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input: DataShape,
    pub extractor: Vec<LayerSpec>,
    /// Hidden dimension D: when present, the extractor output passes through
    /// one more FC layer down to D units before the head. Models whose head
    /// is a GP keep that layer linear when built from scratch; models that
    /// began life with a softmax head keep the ReLU they were trained with
    /// (see `relu_after_d`).
    pub d: Option<usize>,
    #[serde(default)]
    pub relu_after_d: bool,
    pub head: HeadSpec,
    pub init: InitScheme,
}

impl ModelSpec {
    /// The full runtime layer sequence: extractor plus the FC-to-D stage.
    pub fn runtime_layers(&self) -> Vec<LayerSpec> {
        let mut out = self.extractor.clone();
        if let Some(d) = self.d {
            out.push(LayerSpec::Fc { units: d });
            if self.relu_after_d {
                out.push(LayerSpec::Relu);
            }
        }
        out
    }

    /// Shape after each runtime layer (index 0 = the input itself).
    pub fn shape_trace(&self) -> Result<Vec<DataShape>> {
        let mut shapes = vec![self.input];
        let mut cur = self.input;
        for (i, l) in self.runtime_layers().iter().enumerate() {
            cur = infer_shape(cur, l)
                .map_err(|e| Error::shape("model", format!("layer {}: {}", i, e)))?;
            shapes.push(cur);
        }
        if !matches!(cur, DataShape::Vector { .. }) {
            return Err(Error::shape("model", "head needs flattened features; add a flatten layer"));
        }
        Ok(shapes)
    }

    pub fn feature_dim(&self) -> Result<usize> {
        match *self.shape_trace()?.last().unwrap() {
            DataShape::Vector { dim } => Ok(dim),
            DataShape::Image { .. } => unreachable!("shape_trace enforces vector output"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let HeadSpec::GpRobustmax { classes, inducing, beta, quad_points, .. } = &self.head {
            if *classes < 2 {
                return Err(Error::InvalidArg("model: GP head needs at least 2 classes".into()));
            }
            if *inducing == 0 {
                return Err(Error::InvalidArg("model: GP head needs at least 1 inducing point".into()));
            }
            if self.d.is_none() {
                return Err(Error::InvalidArg(
                    "model: a GP head requires the hidden dimension d to be set".into(),
                ));
            }
            match *beta {
                BetaSpec::Fixed { value } | BetaSpec::Learnable { init: value } => {
                    if !(value > 0.0 && value < 0.5) {
                        return Err(Error::InvalidArg(format!(
                            "model: beta must lie in (0, 0.5), got {}",
                            value
                        )));
                    }
                }
            }
            if *quad_points == 0 {
                return Err(Error::InvalidArg("model: quadrature needs at least one node".into()));
            }
        }
        for l in &self.extractor {
            if let LayerSpec::Dropout { rate } = l {
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::InvalidArg(format!("model: dropout rate {} outside [0,1)", rate)));
                }
            }
        }
        self.shape_trace()?;
        Ok(())
    }
}

fn infer_shape(cur: DataShape, l: &LayerSpec) -> std::result::Result<DataShape, String> {
    match (cur, l) {
        (DataShape::Image { h, w, c: _ }, LayerSpec::Conv { kh, kw, channels, padding }) => {
            match padding {
                Padding::Same => Ok(DataShape::Image { h, w, c: *channels }),
                Padding::Valid => {
                    if h < *kh || w < *kw {
                        return Err(format!("conv kernel {}x{} larger than input {}x{}", kh, kw, h, w));
                    }
                    Ok(DataShape::Image { h: h - kh + 1, w: w - kw + 1, c: *channels })
                }
            }
        }
        (DataShape::Image { h, w, c }, LayerSpec::Maxpool { padding }) => match padding {
            Padding::Same => Ok(DataShape::Image { h: h.div_ceil(2), w: w.div_ceil(2), c }),
            Padding::Valid => Ok(DataShape::Image { h: h / 2, w: w / 2, c }),
        },
        (DataShape::Image { h, w, c }, LayerSpec::Flatten) => Ok(DataShape::Vector { dim: h * w * c }),
        (DataShape::Image { .. }, LayerSpec::Relu | LayerSpec::Dropout { .. }) => Ok(cur),
        (DataShape::Image { .. }, LayerSpec::Fc { .. }) => {
            Err("fc layer needs vector input; add a flatten layer first".into())
        }
        (DataShape::Vector { .. }, LayerSpec::Fc { units }) => Ok(DataShape::Vector { dim: *units }),
        (DataShape::Vector { .. }, LayerSpec::Relu | LayerSpec::Dropout { .. }) => Ok(cur),
        (DataShape::Vector { .. }, LayerSpec::Conv { .. } | LayerSpec::Maxpool { .. }) => {
            Err("convolution layers need image input".into())
        }
        (DataShape::Vector { .. }, LayerSpec::Flatten) => Err("flatten needs image input".into()),
    }
}

/// Named presets. MNIST-shaped models come in a shallow flavor
/// (5×5 convolutions, SAME padding, FC 1024) and a deeper flavor
/// (stacked 3×3 convolutions, VALID padding, FC 200 with dropout);
/// suffix -a/-b/-c selects the head arrangement: -a softmax straight off the
/// extractor, -b softmax over a D-unit bottleneck, -c GP-robustmax over the
/// same bottleneck. Halfmoon presets are small MLPs on 2-d input.
pub fn preset(name: &str) -> Result<ModelSpec> {
    let same = Padding::Same;
    let valid = Padding::Valid;
    let mnist = DataShape::Image { h: 28, w: 28, c: 1 };

    let shallow = vec![
        LayerSpec::Conv { kh: 5, kw: 5, channels: 32, padding: same },
        LayerSpec::Relu,
        LayerSpec::Maxpool { padding: same },
        LayerSpec::Conv { kh: 5, kw: 5, channels: 64, padding: same },
        LayerSpec::Relu,
        LayerSpec::Maxpool { padding: same },
        LayerSpec::Flatten,
        LayerSpec::Fc { units: 1024 },
        LayerSpec::Relu,
    ];
    let deep = vec![
        LayerSpec::Conv { kh: 3, kw: 3, channels: 32, padding: valid },
        LayerSpec::Relu,
        LayerSpec::Conv { kh: 3, kw: 3, channels: 32, padding: valid },
        LayerSpec::Relu,
        LayerSpec::Maxpool { padding: valid },
        LayerSpec::Conv { kh: 3, kw: 3, channels: 64, padding: valid },
        LayerSpec::Relu,
        LayerSpec::Conv { kh: 3, kw: 3, channels: 64, padding: valid },
        LayerSpec::Relu,
        LayerSpec::Maxpool { padding: valid },
        LayerSpec::Flatten,
        LayerSpec::Fc { units: 200 },
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: 0.5 },
    ];
    let halfmoon_extractor = vec![LayerSpec::Fc { units: 75 }, LayerSpec::Relu];

    let gp_head = |kernel: KernelKind, inducing: usize, classes: usize| HeadSpec::GpRobustmax {
        classes,
        kernel,
        inducing,
        beta: BetaSpec::Fixed { value: 1e-3 },
        quad_points: DEFAULT_QUAD_POINTS,
    };

    let spec = match name {
        "sc-a" => ModelSpec {
            name: name.into(),
            input: mnist,
            extractor: shallow,
            d: None,
            relu_after_d: false,
            head: HeadSpec::Softmax { classes: 10 },
            init: InitScheme::TruncNormal,
        },
        "sc-b" => ModelSpec {
            name: name.into(),
            input: mnist,
            extractor: shallow,
            d: Some(100),
            relu_after_d: true,
            head: HeadSpec::Softmax { classes: 10 },
            init: InitScheme::TruncNormal,
        },
        "sc-c" | "sc-c-lin" => ModelSpec {
            name: name.into(),
            input: mnist,
            extractor: shallow,
            d: Some(100),
            relu_after_d: false,
            head: gp_head(
                if name == "sc-c" { KernelKind::Rbf } else { KernelKind::Linear },
                100,
                10,
            ),
            init: InitScheme::TruncNormal,
        },
        "dc-b" => ModelSpec {
            name: name.into(),
            input: mnist,
            extractor: deep,
            d: Some(50),
            relu_after_d: true,
            head: HeadSpec::Softmax { classes: 10 },
            init: InitScheme::FanInUniform,
        },
        "dc-c" | "dc-c-lin" => ModelSpec {
            name: name.into(),
            input: mnist,
            extractor: deep,
            d: Some(50),
            relu_after_d: false,
            head: gp_head(
                if name == "dc-c" { KernelKind::Rbf } else { KernelKind::Linear },
                100,
                10,
            ),
            init: InitScheme::FanInUniform,
        },
        "halfmoon-nn" => ModelSpec {
            name: name.into(),
            input: DataShape::Vector { dim: 2 },
            extractor: halfmoon_extractor,
            d: Some(10),
            relu_after_d: true,
            head: HeadSpec::Softmax { classes: 2 },
            init: InitScheme::TruncNormal,
        },
        "halfmoon-gpdnn-rbf" | "halfmoon-gpdnn-lin" => ModelSpec {
            name: name.into(),
            input: DataShape::Vector { dim: 2 },
            extractor: halfmoon_extractor,
            d: Some(10),
            relu_after_d: false,
            head: gp_head(
                if name == "halfmoon-gpdnn-rbf" { KernelKind::Rbf } else { KernelKind::Linear },
                20,
                2,
            ),
            init: InitScheme::TruncNormal,
        },
        other => {
            return Err(Error::InvalidArg(format!(
                "unknown preset '{}'; known: sc-a sc-b sc-c sc-c-lin dc-b dc-c dc-c-lin \
                 halfmoon-nn halfmoon-gpdnn-rbf halfmoon-gpdnn-lin",
                other
            )))
        }
    };
    Ok(spec)
}

/// Runtime parameterized layer.
#[derive(Debug, Clone)]
pub enum Layer {
    Conv { w: Tensor, b: Tensor, padding: Padding },
    Maxpool { padding: Padding },
    Fc { w: Tensor, b: Tensor },
    Relu,
    Dropout { rate: f64 },
    Flatten,
}

#[derive(Debug, Clone)]
pub enum Head {
    Softmax { w: Tensor, b: Tensor },
    Gp { gp: GpHead, beta: BetaParam, quad_points: usize, initialized: bool },
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<Layer>,
    pub head: Head,
}

fn trunc_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    let dist = Normal::new(0.0, std).expect("valid normal");
    loop {
        let v = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

fn init_weight<R: Rng>(scheme: InitScheme, shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data: Vec<f64> = match scheme {
        InitScheme::TruncNormal => (0..n).map(|_| trunc_normal(rng, 0.1)).collect(),
        InitScheme::FanInUniform => {
            let a = (6.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-a..a)).collect()
        }
    };
    Tensor::new(shape, data).expect("init shape")
}

fn init_bias(scheme: InitScheme, units: usize) -> Tensor {
    let v = match scheme {
        InitScheme::TruncNormal => 0.1,
        InitScheme::FanInUniform => 0.0,
    };
    Tensor::full(&[units], v)
}

impl Model {
    /// Build a model with freshly initialized parameters. A GP head starts
    /// uninitialized: its inducing points and lengthscale are placeholders
    /// until `install_gp_head` supplies data-dependent values (the training
    /// loop does this automatically on first use).
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model> {
        use rand::SeedableRng;
        spec.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let shapes = spec.shape_trace()?;
        let mut layers = Vec::new();
        for (i, l) in spec.runtime_layers().iter().enumerate() {
            let in_shape = shapes[i];
            layers.push(match l {
                LayerSpec::Conv { kh, kw, channels, padding } => {
                    let cin = match in_shape {
                        DataShape::Image { c, .. } => c,
                        DataShape::Vector { .. } => unreachable!("validated"),
                    };
                    let fan_in = kh * kw * cin;
                    Layer::Conv {
                        w: init_weight(spec.init, &[*kh, *kw, cin, *channels], fan_in, &mut rng),
                        b: init_bias(spec.init, *channels),
                        padding: *padding,
                    }
                }
                LayerSpec::Maxpool { padding } => Layer::Maxpool { padding: *padding },
                LayerSpec::Fc { units } => {
                    let din = match in_shape {
                        DataShape::Vector { dim } => dim,
                        DataShape::Image { .. } => unreachable!("validated"),
                    };
                    Layer::Fc {
                        w: init_weight(spec.init, &[din, *units], din, &mut rng),
                        b: init_bias(spec.init, *units),
                    }
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Dropout { rate } => Layer::Dropout { rate: *rate },
                LayerSpec::Flatten => Layer::Flatten,
            });
        }

        let feat_dim = spec.feature_dim()?;
        let head = match &spec.head {
            HeadSpec::Softmax { classes } => Head::Softmax {
                w: init_weight(spec.init, &[feat_dim, *classes], feat_dim, &mut rng),
                b: init_bias(spec.init, *classes),
            },
            HeadSpec::GpRobustmax { classes, kernel, inducing, beta, quad_points } => {
                // placeholder state, replaced by install_gp_head before training
                let mut z = Tensor::zeros(&[*inducing, feat_dim]);
                for v in z.data_mut() {
                    *v = trunc_normal(&mut rng, 0.1);
                }
                let gp = GpHead {
                    kind: *kernel,
                    classes: *classes,
                    z,
                    vmean: Tensor::zeros(&[*inducing, *classes]),
                    l_strict: (0..*classes).map(|_| Tensor::zeros(&[*inducing, *inducing])).collect(),
                    l_logdiag: (0..*classes).map(|_| Tensor::zeros(&[*inducing])).collect(),
                    log_sf2: Tensor::scalar(0.0),
                    log_len: match kernel {
                        KernelKind::Rbf => Some(Tensor::scalar(0.0)),
                        KernelKind::Linear => None,
                    },
                    log_noise: Tensor::scalar(1e-3f64.ln()),
                };
                let beta = match beta {
                    BetaSpec::Fixed { value } => BetaParam::fixed(*value)?,
                    BetaSpec::Learnable { init } => BetaParam::learnable(*init)?,
                };
                Head::Gp { gp, beta, quad_points: *quad_points, initialized: false }
            }
        };
        Ok(Model { spec: spec.clone(), layers, head })
    }

    pub fn classes(&self) -> usize {
        self.spec.head.classes()
    }

    pub fn is_gp(&self) -> bool {
        matches!(self.head, Head::Gp { .. })
    }

    pub fn gp_needs_init(&self) -> bool {
        matches!(self.head, Head::Gp { initialized: false, .. })
    }

    /// Number of inducing points of a GP head, if the model has one.
    pub fn gp_inducing(&self) -> Option<usize> {
        match &self.head {
            Head::Gp { gp, .. } => Some(gp.num_inducing()),
            Head::Softmax { .. } => None,
        }
    }

    /// Replace the placeholder GP state with one initialized from a sample of
    /// extractor features (inducing points = distinct sample rows, median
    /// lengthscale).
    pub fn install_gp_head<R: Rng>(&mut self, feature_sample: &Tensor, rng: &mut R) -> Result<()> {
        match &mut self.head {
            Head::Gp { gp, initialized, .. } => {
                let fresh = init_gp_head(gp.kind, gp.classes, gp.num_inducing(), feature_sample, rng)?;
                *gp = fresh;
                *initialized = true;
                Ok(())
            }
            Head::Softmax { .. } => {
                Err(Error::InvalidArg("install_gp_head: model has a softmax head".into()))
            }
        }
    }

    /// Swap a softmax head for a GP-robustmax head initialized from features,
    /// keeping every extractor parameter (bootstrap procedure). The feature
    /// map the new head sees is exactly the one the old head consumed.
    pub fn switch_to_gp_head<R: Rng>(
        &mut self,
        kernel: KernelKind,
        inducing: usize,
        beta: BetaSpec,
        quad_points: usize,
        feature_sample: &Tensor,
        rng: &mut R,
    ) -> Result<()> {
        if self.is_gp() {
            return Err(Error::InvalidArg("switch_to_gp_head: head is already a GP".into()));
        }
        if self.spec.d.is_none() {
            return Err(Error::InvalidArg(
                "switch_to_gp_head: model has no hidden-D bottleneck to place a GP on".into(),
            ));
        }
        let classes = self.classes();
        let gp = init_gp_head(kernel, classes, inducing, feature_sample, rng)?;
        let beta_param = match beta {
            BetaSpec::Fixed { value } => BetaParam::fixed(value)?,
            BetaSpec::Learnable { init } => BetaParam::learnable(init)?,
        };
        self.head = Head::Gp { gp, beta: beta_param, quad_points, initialized: true };
        self.spec.head = HeadSpec::GpRobustmax { classes, kernel, inducing, beta, quad_points };
        self.spec.name = format!("{}+gp", self.spec.name);
        Ok(())
    }

    /// Canonical (name, tensor) list of all trainable parameters.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Conv { w, b, .. } | Layer::Fc { w, b } => {
                    out.push((format!("layer.{}.w", i), w));
                    out.push((format!("layer.{}.b", i), b));
                }
                _ => {}
            }
        }
        match &self.head {
            Head::Softmax { w, b } => {
                out.push(("head.w".into(), w));
                out.push(("head.b".into(), b));
            }
            Head::Gp { gp, beta, .. } => {
                out.extend(gp.named_params());
                if let BetaParam::Learnable { logit } = beta {
                    out.push(("gp.beta_logit".into(), logit));
                }
            }
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            match l {
                Layer::Conv { w, b, .. } | Layer::Fc { w, b } => {
                    out.push((format!("layer.{}.w", i), w));
                    out.push((format!("layer.{}.b", i), b));
                }
                _ => {}
            }
        }
        match &mut self.head {
            Head::Softmax { w, b } => {
                out.push(("head.w".into(), w));
                out.push(("head.b".into(), b));
            }
            Head::Gp { gp, beta, .. } => {
                out.extend(gp.named_params_mut());
                if let BetaParam::Learnable { logit } = beta {
                    out.push(("gp.beta_logit".into(), logit));
                }
            }
        }
        out
    }

    /// Bind parameters onto a graph. `trainable` controls whether parameters
    /// become vars (gradients retained) or constants.
    pub fn bind(&self, g: &Graph, trainable: bool) -> Result<BoundModel> {
        let lift = |t: &Tensor| if trainable { g.var(t.clone()) } else { g.constant(t.clone()) };
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut param_vars = Vec::new();
        for l in &self.layers {
            layers.push(match l {
                Layer::Conv { w, b, padding } => {
                    let (wv, bv) = (lift(w)?, lift(b)?);
                    param_vars.push(wv.clone());
                    param_vars.push(bv.clone());
                    BoundLayer::Conv { w: wv, b: bv, padding: *padding }
                }
                Layer::Fc { w, b } => {
                    let (wv, bv) = (lift(w)?, lift(b)?);
                    param_vars.push(wv.clone());
                    param_vars.push(bv.clone());
                    BoundLayer::Fc { w: wv, b: bv }
                }
                Layer::Maxpool { padding } => BoundLayer::Maxpool { padding: *padding },
                Layer::Relu => BoundLayer::Relu,
                Layer::Dropout { rate } => BoundLayer::Dropout { rate: *rate },
                Layer::Flatten => BoundLayer::Flatten,
            });
        }
        let head = match &self.head {
            Head::Softmax { w, b } => {
                let (wv, bv) = (lift(w)?, lift(b)?);
                param_vars.push(wv.clone());
                param_vars.push(bv.clone());
                BoundHead::Softmax { w: wv, b: bv }
            }
            Head::Gp { gp, beta, quad_points, initialized } => {
                let vars = gp.bind(g, trainable)?;
                param_vars.extend(vars.var_list());
                let beta_v = beta.bind(g, trainable)?;
                if let Some(v) = beta_v.logit_var() {
                    param_vars.push(v);
                }
                BoundHead::Gp { vars, beta: beta_v, quad_points: *quad_points, initialized: *initialized }
            }
        };
        Ok(BoundModel { input: self.spec.input, layers, head, param_vars })
    }

    /// Eval-mode class log-probabilities for a flat input batch [B, in_dim].
    pub fn predict_log_probs(&self, x: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let bound = self.bind(&g, false)?;
        let xv = g.constant(x.clone())?;
        let feats = bound.features(&g, &xv, None)?;
        Ok(bound.log_probs(&g, &feats)?.value())
    }

    /// Eval-mode extractor features (everything below the head) for a flat
    /// input batch, processed in chunks to bound graph size.
    pub fn extract_features(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.shape()[0];
        let dim = self.spec.feature_dim()?;
        let mut out = Vec::with_capacity(n * dim);
        let chunk = 256;
        let in_dim = x.shape()[1];
        for start in (0..n).step_by(chunk) {
            let stop = (start + chunk).min(n);
            let part = Tensor::new(&[stop - start, in_dim], x.data()[start * in_dim..stop * in_dim].to_vec())?;
            let g = Graph::new();
            let bound = self.bind(&g, false)?;
            let xv = g.constant(part)?;
            let feats = bound.features(&g, &xv, None)?;
            out.extend_from_slice(feats.value().data());
        }
        Tensor::new(&[n, dim], out)
    }
}

/// Graph-bound model for one forward/backward pass.
pub struct BoundModel {
    input: DataShape,
    layers: Vec<BoundLayer>,
    head: BoundHead,
    /// all bound parameter vars, canonical order (matches `named_params`)
    pub param_vars: Vec<Var>,
}

enum BoundLayer {
    Conv { w: Var, b: Var, padding: Padding },
    Maxpool { padding: Padding },
    Fc { w: Var, b: Var },
    Relu,
    Dropout { rate: f64 },
    Flatten,
}

pub enum BoundHead {
    Softmax { w: Var, b: Var },
    Gp { vars: GpVars, beta: BetaVar, quad_points: usize, initialized: bool },
}

impl BoundModel {
    /// Run the feature path on a flat [B, in_dim] input. Passing an rng turns
    /// training mode on: dropout layers sample masks from it; without an rng
    /// they are identity (evaluation and attacks are deterministic).
    pub fn features(&self, _g: &Graph, x: &Var, mut rng: Option<&mut ChaCha20Rng>) -> Result<Var> {
        let shape = x.shape();
        if shape.len() != 2 {
            return Err(Error::shape("model", "input must be [batch, in_dim]"));
        }
        let (b, in_dim) = (shape[0], shape[1]);
        if in_dim != self.input.numel() {
            return Err(Error::shape(
                "model",
                format!("input dim {} but model expects {}", in_dim, self.input.numel()),
            ));
        }
        let mut cur = match self.input {
            DataShape::Image { h, w, c } => x.reshape(&[b, h, w, c])?,
            DataShape::Vector { .. } => x.clone(),
        };
        for l in &self.layers {
            cur = match l {
                BoundLayer::Conv { w, b, padding } => cur.conv2d(w, b, *padding)?,
                BoundLayer::Maxpool { padding } => cur.maxpool2d(*padding)?,
                BoundLayer::Fc { w, b } => cur.matmul(w)?.add(b)?,
                BoundLayer::Relu => cur.relu()?,
                BoundLayer::Dropout { rate } => match rng.as_deref_mut() {
                    Some(r) if *rate > 0.0 => cur.dropout(*rate, r)?,
                    _ => cur,
                },
                BoundLayer::Flatten => {
                    let s = cur.shape();
                    let rest: usize = s[1..].iter().product();
                    cur.reshape(&[b, rest])?
                }
            };
        }
        Ok(cur)
    }

    /// Class log-probabilities from features. Softmax heads produce
    /// stabilized log-softmax of the final linear layer; GP heads produce
    /// the log of the robustmax predictive probabilities, which is bounded
    /// below by log(β/(C−1)).
    pub fn log_probs(&self, g: &Graph, feats: &Var) -> Result<Var> {
        match &self.head {
            BoundHead::Softmax { w, b } => feats.matmul(w)?.add(b)?.log_softmax(),
            BoundHead::Gp { vars, beta, quad_points, initialized } => {
                self.check_gp_ready(*initialized)?;
                let (mu, var) = vars.marginals(g, feats)?;
                let p = argmax_probs(&mu, &var, *quad_points)?;
                predictive_probs(g, &p, beta)?.log()
            }
        }
    }

    fn check_gp_ready(&self, initialized: bool) -> Result<()> {
        if !initialized {
            return Err(Error::InvalidArg(
                "model: GP head not yet initialized from data; train first or load a checkpoint".into(),
            ));
        }
        Ok(())
    }

    /// The GP head's latent marginals at `feats` (error for softmax heads).
    pub fn gp_marginals(&self, g: &Graph, feats: &Var) -> Result<(Var, Var)> {
        match &self.head {
            BoundHead::Gp { vars, initialized, .. } => {
                self.check_gp_ready(*initialized)?;
                vars.marginals(g, feats)
            }
            BoundHead::Softmax { .. } => {
                Err(Error::InvalidArg("gp_marginals: model has a softmax head".into()))
            }
        }
    }

    pub fn head(&self) -> &BoundHead {
        &self.head
    }
}
