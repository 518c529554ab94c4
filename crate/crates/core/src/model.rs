//! Small and medium custom CNN classifiers with DecorreLayer insertion and the
//! dual ROI/control-region forward pass.
//!
//! Weight layers are numbered in order: convolutions first, then the fully
//! connected layers. An insertion point `i` places a DecorreLayer directly in
//! front of weight layer `i`, after the preceding activation and pooling. The
//! layer in front of the first fully connected layer sees the unflattened
//! feature maps, so it filters per channel. Point 0 is never allowed.

use serde::{Deserialize, Serialize};

use crate::decorre::{CorrelationRecord, DecorreConfig, DecorreLayer};
use crate::error::{Error, Result};
use crate::ops::{self, Padding};
use crate::rng::Rng;
use crate::tensor::{LayerParams, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArchName {
    SmallCustom,
    MediumCustom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub channels: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub name: ArchName,
    pub conv_blocks: Vec<ConvBlock>,
    /// Widths of the fully connected stack; the last entry is the single logit.
    pub fc_widths: Vec<usize>,
    /// `[channels, height, width]`.
    pub input_shape: [usize; 3],
    pub insertion_points: Vec<usize>,
    pub decorre_cfg: DecorreConfig,
    #[serde(default)]
    pub padding: Padding,
}

impl ArchitectureSpec {
    /// Two conv/ReLU/max-pool blocks (6, 16 channels, 5x5) and three fully
    /// connected layers (120, 84, 1) on 32x32 inputs.
    pub fn small_custom() -> Self {
        let mut spec = Self {
            name: ArchName::SmallCustom,
            conv_blocks: vec![
                ConvBlock { channels: 6, kernel: 5 },
                ConvBlock {
                    channels: 16,
                    kernel: 5,
                },
            ],
            fc_widths: vec![120, 84, 1],
            input_shape: [1, 32, 32],
            insertion_points: Vec::new(),
            decorre_cfg: DecorreConfig::default(),
            padding: Padding::Valid,
        };
        spec.insertion_points = spec.default_insertion_points();
        spec
    }

    /// Three conv/ReLU/max-pool blocks (32, 64, 128 channels, 3x3) and four
    /// fully connected layers (256, 128, 64, 1) on 32x32 inputs.
    pub fn medium_custom() -> Self {
        let mut spec = Self {
            name: ArchName::MediumCustom,
            conv_blocks: vec![
                ConvBlock {
                    channels: 32,
                    kernel: 3,
                },
                ConvBlock {
                    channels: 64,
                    kernel: 3,
                },
                ConvBlock {
                    channels: 128,
                    kernel: 3,
                },
            ],
            fc_widths: vec![256, 128, 64, 1],
            input_shape: [1, 32, 32],
            insertion_points: Vec::new(),
            decorre_cfg: DecorreConfig::default(),
            padding: Padding::Valid,
        };
        spec.insertion_points = spec.default_insertion_points();
        spec
    }

    pub fn by_name(name: ArchName) -> Self {
        match name {
            ArchName::SmallCustom => Self::small_custom(),
            ArchName::MediumCustom => Self::medium_custom(),
        }
    }

    pub fn num_weight_layers(&self) -> usize {
        self.conv_blocks.len() + self.fc_widths.len()
    }

    /// In front of every convolution and fully connected layer except the first.
    pub fn default_insertion_points(&self) -> Vec<usize> {
        (1..self.num_weight_layers()).collect()
    }

    /// Same architecture without any DecorreLayer.
    pub fn plain(&self) -> Self {
        Self {
            insertion_points: Vec::new(),
            ..self.clone()
        }
    }

    /// Feature shape `[C, H, W]` after the convolutional blocks.
    pub fn conv_output_shape(&self) -> Result<[usize; 3]> {
        let [mut c, mut h, mut w] = self.input_shape;
        for (i, block) in self.conv_blocks.iter().enumerate() {
            let g = ops::ConvGeometry::new(
                [c, h, w],
                &[block.channels, c, block.kernel, block.kernel],
                1,
                self.padding,
            )
            .map_err(|e| Error::InvalidConfig(format!("conv block {i}: {e}")))?;
            if g.out_h < 2 || g.out_w < 2 {
                return Err(Error::InvalidConfig(format!(
                    "conv block {i} leaves {}x{} maps, too small for 2x2 pooling",
                    g.out_h, g.out_w
                )));
            }
            c = block.channels;
            h = g.out_h / 2;
            w = g.out_w / 2;
        }
        Ok([c, h, w])
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.contains(&0) {
            return Err(Error::InvalidConfig("input shape has a zero extent".into()));
        }
        if self.conv_blocks.is_empty() {
            return Err(Error::InvalidConfig("at least one conv block is required".into()));
        }
        if self.fc_widths.is_empty() || *self.fc_widths.last().unwrap() != 1 {
            return Err(Error::InvalidConfig(
                "fully connected stack must end in a single logit".into(),
            ));
        }
        if self.conv_blocks.iter().any(|b| b.channels == 0 || b.kernel == 0) || self.fc_widths.contains(&0) {
            return Err(Error::InvalidConfig("zero-sized layer".into()));
        }
        self.conv_output_shape()?;
        let mut seen = std::collections::BTreeSet::new();
        for &p in &self.insertion_points {
            if p == 0 {
                return Err(Error::InvalidConfig(
                    "a DecorreLayer cannot precede the first convolution".into(),
                ));
            }
            if p >= self.num_weight_layers() {
                return Err(Error::InvalidConfig(format!(
                    "insertion point {p} beyond the {} weight layers",
                    self.num_weight_layers()
                )));
            }
            if !seen.insert(p) {
                return Err(Error::InvalidConfig(format!("duplicate insertion point {p}")));
            }
        }
        if !self.insertion_points.is_empty() {
            self.decorre_cfg.validate()?;
        }
        Ok(())
    }
}

/// Paired ROI and control-region batches with binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DualBatch {
    pub roi: Tensor,
    pub cr: Tensor,
    pub labels: Tensor,
}

impl DualBatch {
    pub fn new(roi: Tensor, cr: Tensor, labels: Tensor) -> Result<Self> {
        if roi.shape() != cr.shape() {
            return Err(Error::ShapeMismatch(format!(
                "ROI batch {:?} vs control-region batch {:?}",
                roi.shape(),
                cr.shape()
            )));
        }
        if labels.len() != roi.dim(0) {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for a batch of {}",
                labels.len(),
                roi.dim(0)
            )));
        }
        if labels.data().iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::InvalidConfig("labels must be 0 or 1".into()));
        }
        Ok(Self { roi, cr, labels })
    }

    pub fn len(&self) -> usize {
        self.roi.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
struct ConvCache {
    cols: Vec<f32>,
    geometry: ops::ConvGeometry,
    batch: usize,
}

#[derive(Debug, Clone)]
enum Stage {
    Conv {
        index: usize,
        params: LayerParams,
        cache: Option<ConvCache>,
    },
    Relu {
        input: Option<Tensor>,
    },
    Pool {
        cache: Option<(Vec<usize>, Vec<usize>)>,
    },
    Flatten {
        input_shape: Option<Vec<usize>>,
    },
    Linear {
        index: usize,
        params: LayerParams,
        input: Option<Tensor>,
    },
    Decorre(DecorreLayer),
}

const POOL: usize = 2;

impl Stage {
    fn infer(&self, x: &Tensor, padding: Padding) -> Result<Tensor> {
        match self {
            Stage::Conv { params, .. } => ops::conv2d(x, params, 1, padding),
            Stage::Relu { .. } => Ok(ops::relu(x)),
            Stage::Pool { .. } => ops::maxpool2d(x, POOL, POOL).map(|(y, _)| y),
            Stage::Flatten { .. } => flatten(x),
            Stage::Linear { params, .. } => ops::linear(x, params),
            Stage::Decorre(_) => Ok(x.clone()),
        }
    }

    fn forward_train(&mut self, x: Tensor, padding: Padding) -> Result<Tensor> {
        match self {
            Stage::Conv { params, cache, .. } => {
                let (y, cols, geometry) = ops::conv2d_lowered(&x, params, 1, padding)?;
                *cache = Some(ConvCache {
                    cols,
                    geometry,
                    batch: x.dim(0),
                });
                Ok(y)
            }
            Stage::Relu { input } => {
                let y = ops::relu(&x);
                *input = Some(x);
                Ok(y)
            }
            Stage::Pool { cache } => {
                let (y, arg) = ops::maxpool2d(&x, POOL, POOL)?;
                *cache = Some((x.shape().to_vec(), arg));
                Ok(y)
            }
            Stage::Flatten { input_shape } => {
                *input_shape = Some(x.shape().to_vec());
                flatten(&x)
            }
            Stage::Linear { params, input, .. } => {
                let y = ops::linear(&x, params)?;
                *input = Some(x);
                Ok(y)
            }
            Stage::Decorre(_) => Ok(x),
        }
    }

    /// Accumulates parameter gradients and returns the input gradient
    /// (`None` below the first convolution, where nothing needs it).
    fn backward(&mut self, grad: &Tensor, first: bool) -> Result<Option<Tensor>> {
        let missing = || Error::BackwardBeforeForward;
        match self {
            Stage::Conv { params, cache, .. } => {
                let c = cache.take().ok_or_else(missing)?;
                let grads = ops::conv2d_backward_lowered(&c.cols, &c.geometry, c.batch, params, grad, !first)?;
                accumulate(&mut params.weights, &grads.weights);
                accumulate(&mut params.bias, &grads.bias);
                Ok(grads.input)
            }
            Stage::Relu { input } => {
                let x = input.take().ok_or_else(missing)?;
                ops::relu_backward(&x, grad).map(Some)
            }
            Stage::Pool { cache } => {
                let (shape, arg) = cache.take().ok_or_else(missing)?;
                ops::maxpool2d_backward(&shape, &arg, grad).map(Some)
            }
            Stage::Flatten { input_shape } => {
                let shape = input_shape.take().ok_or_else(missing)?;
                grad.clone().reshape(&shape).map(Some)
            }
            Stage::Linear { params, input, .. } => {
                let x = input.take().ok_or_else(missing)?;
                let grads = ops::linear_backward(&x, params, grad)?;
                accumulate(&mut params.weights, &grads.weights);
                accumulate(&mut params.bias, &grads.bias);
                Ok(Some(grads.input))
            }
            Stage::Decorre(layer) => Ok(Some(layer.backward(grad))),
        }
    }
}

fn flatten(x: &Tensor) -> Result<Tensor> {
    let b = x.dim(0);
    x.clone().reshape(&[b, x.len() / b])
}

fn accumulate(param: &mut Tensor, grad: &Tensor) {
    for (g, &d) in param.grad_mut().iter_mut().zip(grad.data()) {
        *g += d;
    }
}

/// A CNN classifier with optional DecorreLayers and a single parameter store
/// shared by the ROI and control-region streams.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ArchitectureSpec,
    stages: Vec<Stage>,
    filtering: bool,
    capture: bool,
    has_cache: bool,
}

/// Builds the layer stack with `±sqrt(1 / fan_in)` uniform initialization.
/// Parameters are drawn in layer order, so a spec and its [`ArchitectureSpec::plain`]
/// variant get identical weights from identical seeds.
pub fn build_model(spec: &ArchitectureSpec, rng: &mut Rng) -> Result<Model> {
    spec.validate()?;
    let mut stages = Vec::new();
    let mut in_c = spec.input_shape[0];
    let mut index = 0;
    let insert = |stages: &mut Vec<Stage>, index: usize| {
        if spec.insertion_points.contains(&index) {
            stages.push(Stage::Decorre(DecorreLayer::new(index, spec.decorre_cfg)));
        }
    };
    for block in &spec.conv_blocks {
        insert(&mut stages, index);
        stages.push(Stage::Conv {
            index,
            params: LayerParams::init_conv(block.channels, in_c, block.kernel, rng),
            cache: None,
        });
        stages.push(Stage::Relu { input: None });
        stages.push(Stage::Pool { cache: None });
        in_c = block.channels;
        index += 1;
    }
    let [c, h, w] = spec.conv_output_shape()?;
    let mut in_f = c * h * w;
    for (j, &width) in spec.fc_widths.iter().enumerate() {
        insert(&mut stages, index);
        if j == 0 {
            stages.push(Stage::Flatten { input_shape: None });
        }
        stages.push(Stage::Linear {
            index,
            params: LayerParams::init_linear(width, in_f, rng),
            input: None,
        });
        if j + 1 < spec.fc_widths.len() {
            stages.push(Stage::Relu { input: None });
        }
        in_f = width;
        index += 1;
    }
    Ok(Model {
        spec: spec.clone(),
        stages,
        filtering: true,
        capture: true,
        has_cache: false,
    })
}

impl Model {
    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn num_decorre_layers(&self) -> usize {
        self.stages.iter().filter(|s| matches!(s, Stage::Decorre(_))).count()
    }

    /// Ids (target weight-layer indices) of the DecorreLayers, in order.
    pub fn decorre_layer_ids(&self) -> Vec<usize> {
        self.stages
            .iter()
            .filter_map(|s| match s {
                Stage::Decorre(l) => Some(l.layer_id),
                _ => None,
            })
            .collect()
    }

    /// When `false`, DecorreLayers still record correlations in training but
    /// leave the ROI features untouched.
    pub fn set_filtering(&mut self, filtering: bool) {
        self.filtering = filtering;
    }

    pub fn filtering(&self) -> bool {
        self.filtering
    }

    /// When `false` and filtering is off, training passes skip the
    /// control-region stream entirely.
    pub fn set_capture(&mut self, capture: bool) {
        self.capture = capture;
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.num_params()).sum()
    }

    /// Parameters with stable names (`conv{i}` / `fc{j}`), in layer order.
    pub fn params(&self) -> Vec<(String, &LayerParams)> {
        let n_conv = self.spec.conv_blocks.len();
        self.stages
            .iter()
            .filter_map(|s| match s {
                Stage::Conv { index, params, .. } => Some((format!("conv{index}"), params)),
                Stage::Linear { index, params, .. } => Some((format!("fc{}", index - n_conv), params)),
                _ => None,
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut LayerParams> {
        self.stages
            .iter_mut()
            .filter_map(|s| match s {
                Stage::Conv { params, .. } | Stage::Linear { params, .. } => Some(params),
                _ => None,
            })
            .collect()
    }

    /// Copies every parameter from `other`, which must share the weight layout.
    pub fn load_params_from(&mut self, other: &Model) -> Result<()> {
        let src: Vec<LayerParams> = other.params().into_iter().map(|(_, p)| p.clone()).collect();
        let dst = self.params_mut();
        if src.len() != dst.len() {
            return Err(Error::ShapeMismatch("models have different layer counts".into()));
        }
        for (d, s) in dst.into_iter().zip(src) {
            if d.weights.shape() != s.weights.shape() || d.bias.shape() != s.bias.shape() {
                return Err(Error::ShapeMismatch("models have different layer shapes".into()));
            }
            *d = s;
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.ndim() != 4 || x.shape()[1..] != self.spec.input_shape {
            return Err(Error::ShapeMismatch(format!(
                "model expects [B, {}, {}, {}] inputs, got {:?}",
                self.spec.input_shape[0],
                self.spec.input_shape[1],
                self.spec.input_shape[2],
                x.shape()
            )));
        }
        Ok(())
    }

    /// Inference on one stream: DecorreLayers are inactive and no control
    /// region is needed. Returns one logit per sample.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for stage in &self.stages {
            h = stage.infer(&h, self.spec.padding)?;
        }
        let b = h.dim(0);
        h.reshape(&[b])
    }

    /// Dual-stream forward pass. In training mode the ROI activations are
    /// cached for [`Model::backward_dual`], the control-region stream runs
    /// through the same layers without caching, and every DecorreLayer emits
    /// a [`CorrelationRecord`]. With `training == false` this is [`Model::infer`]
    /// on the ROI stream.
    pub fn forward_dual(
        &mut self,
        batch: &DualBatch,
        training: bool,
        rng: &mut Rng,
    ) -> Result<(Tensor, Vec<CorrelationRecord>)> {
        if !training {
            return Ok((self.infer(&batch.roi)?, Vec::new()));
        }
        self.check_input(&batch.roi)?;
        if batch.roi.shape() != batch.cr.shape() {
            return Err(Error::ShapeMismatch(format!(
                "ROI batch {:?} vs control-region batch {:?}",
                batch.roi.shape(),
                batch.cr.shape()
            )));
        }
        let last_decorre = self.stages.iter().rposition(|s| matches!(s, Stage::Decorre(_)));
        let needs_cr = last_decorre.is_some() && (self.filtering || self.capture);
        let padding = self.spec.padding;
        let filtering = self.filtering;
        let mut roi = batch.roi.clone();
        let mut cr = needs_cr.then(|| batch.cr.clone());
        let mut records = Vec::new();
        self.has_cache = false;
        for (i, stage) in self.stages.iter_mut().enumerate() {
            if let Stage::Decorre(layer) = stage {
                if let Some(c) = cr.as_ref() {
                    let out = layer.forward_dual(&roi, c, rng, filtering)?;
                    records.push(out.record);
                    roi = out.roi;
                    if let Some(filtered) = out.cr {
                        cr = Some(filtered);
                    }
                }
            } else {
                if let Some(c) = cr.as_ref() {
                    if Some(i) < last_decorre {
                        cr = Some(stage.infer(c, padding)?);
                    } else {
                        cr = None;
                    }
                }
                roi = stage.forward_train(roi, padding)?;
            }
        }
        self.has_cache = true;
        let b = roi.dim(0);
        Ok((roi.reshape(&[b])?, records))
    }

    /// Backpropagates `loss_grad` (one value per logit) through the ROI path,
    /// treating every DecorreLayer as the identity. Gradients accumulate into
    /// the parameters' gradient slots.
    pub fn backward_dual(&mut self, loss_grad: &Tensor) -> Result<()> {
        if !self.has_cache {
            return Err(Error::BackwardBeforeForward);
        }
        self.has_cache = false;
        let b = loss_grad.dim(0);
        let mut grad = loss_grad.clone().reshape(&[b, 1])?;
        let first_conv = self
            .stages
            .iter()
            .position(|s| matches!(s, Stage::Conv { .. }))
            .expect("at least one conv");
        for (i, stage) in self.stages.iter_mut().enumerate().rev() {
            match stage.backward(&grad, i == first_conv)? {
                Some(g) => grad = g,
                None => break,
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}
