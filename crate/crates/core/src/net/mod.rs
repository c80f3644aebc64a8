//! Minimal trainable layer stack: convolutions routed through the lowered
//! (pattern-thinned) GEMM path, max pooling, ReLU, fully connected layers and a
//! softmax cross-entropy head.

mod checkpoint;
mod sgd;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use sgd::{sgd_step, ExtraGrad, LrSchedule, SgdConfig, SgdState};
pub use train::{evaluate, train_epoch, EpochStats};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lowering::{col2im_batch, im2col_batch, pack_filters, ConvGeometry, SparsityPatternSet};
use crate::sparsity::apply_pattern;
use crate::tensor::{gemm, Matrix, MatView, Tensor4};

/// Batch of map stacks. Map `s` of example `n` is the contiguous plane at
/// `(s * batch + n) * width * height`; inside a plane the layout matches
/// [`crate::tensor::Tensor3`].
#[derive(Debug, Clone, PartialEq)]
pub struct MapBatch {
    maps: usize,
    batch: usize,
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl MapBatch {
    pub fn from_vec(
        maps: usize,
        batch: usize,
        width: usize,
        height: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if data.len() != maps * batch * width * height {
            return Err(Error::dim(format!(
                "batch {}x{}x{}x{} needs {} values, got {}",
                maps,
                batch,
                width,
                height,
                maps * batch * width * height,
                data.len()
            )));
        }
        Ok(MapBatch {
            maps,
            batch,
            width,
            height,
            data,
        })
    }

    pub fn maps(&self) -> usize {
        self.maps
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// One row per example, features ordered `(s, x, y)`.
    pub fn flatten(&self) -> Matrix {
        let plane = self.width * self.height;
        let feat = self.maps * plane;
        let mut out = vec![0.0; self.batch * feat];
        for s in 0..self.maps {
            for n in 0..self.batch {
                let src = &self.data[(s * self.batch + n) * plane..][..plane];
                out[n * feat + s * plane..][..plane].copy_from_slice(src);
            }
        }
        Matrix::from_vec(self.batch, feat, out).expect("flatten shape")
    }

    fn unflatten(m: &Matrix, maps: usize, width: usize, height: usize) -> MapBatch {
        let plane = width * height;
        let batch = m.rows();
        let mut data = vec![0.0; maps * batch * plane];
        for s in 0..maps {
            for n in 0..batch {
                data[(s * batch + n) * plane..][..plane]
                    .copy_from_slice(&m.row(n)[s * plane..][..plane]);
            }
        }
        MapBatch {
            maps,
            batch,
            width,
            height,
            data,
        }
    }
}

/// Per-example activation shape between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Maps { maps: usize, width: usize, height: usize },
    Flat(usize),
}

impl Shape {
    pub fn size(&self) -> usize {
        match *self {
            Shape::Maps { maps, width, height } => maps * width * height,
            Shape::Flat(n) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub geometry: ConvGeometry,
    pub kernel: Tensor4,
    pub bias: Vec<f32>,
    pub pattern: SparsityPatternSet,
}

impl ConvLayer {
    /// Replace the pattern and zero the kernel groups it drops.
    pub fn set_pattern(&mut self, pattern: SparsityPatternSet) -> Result<()> {
        if pattern.d() != self.geometry.d || pattern.in_maps() != self.geometry.in_maps {
            return Err(Error::dim(format!(
                "pattern d={} S={} does not fit conv layer d={} S={}",
                pattern.d(),
                pattern.in_maps(),
                self.geometry.d,
                self.geometry.in_maps
            )));
        }
        apply_pattern(&mut self.kernel, &pattern);
        self.pattern = pattern;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolLayer {
    pub window: usize,
    pub stride: usize,
    pub maps: usize,
    pub in_w: usize,
    pub in_h: usize,
}

impl PoolLayer {
    pub fn out_w(&self) -> usize {
        (self.in_w - self.window) / self.stride + 1
    }

    pub fn out_h(&self) -> usize {
        (self.in_h - self.window) / self.stride + 1
    }
}

/// `y = W x + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer {
    pub weights: Matrix,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    MaxPool(PoolLayer),
    Relu,
    FullyConnected(FcLayer),
    SoftmaxXent,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::MaxPool(_) => "maxpool",
            Layer::Relu => "relu",
            Layer::FullyConnected(_) => "fc",
            Layer::SoftmaxXent => "softmax_xent",
        }
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        match (self, input) {
            (Layer::Conv(c), Shape::Maps { maps, width, height }) => {
                let g = &c.geometry;
                if (maps, width, height) != (g.in_maps, g.in_w, g.in_h) {
                    return Err(Error::dim(format!(
                        "conv expects {}x{}x{} input, got {}x{}x{}",
                        g.in_maps, g.in_w, g.in_h, maps, width, height
                    )));
                }
                if c.kernel.d() != g.d
                    || c.kernel.in_maps() != g.in_maps
                    || c.kernel.out_maps() != g.out_maps
                    || c.bias.len() != g.out_maps
                    || c.pattern.d() != g.d
                    || c.pattern.in_maps() != g.in_maps
                {
                    return Err(Error::dim("conv parameters do not match geometry"));
                }
                Ok(Shape::Maps {
                    maps: g.out_maps,
                    width: g.out_w(),
                    height: g.out_h(),
                })
            }
            (Layer::MaxPool(p), Shape::Maps { maps, width, height }) => {
                if (maps, width, height) != (p.maps, p.in_w, p.in_h)
                    || p.window == 0
                    || p.stride == 0
                    || p.window > width
                    || p.window > height
                {
                    return Err(Error::dim(format!(
                        "pool {}x{} window over {}x{}x{} does not fit {}x{}x{} input",
                        p.window, p.window, p.maps, p.in_w, p.in_h, maps, width, height
                    )));
                }
                Ok(Shape::Maps {
                    maps,
                    width: p.out_w(),
                    height: p.out_h(),
                })
            }
            (Layer::Relu, s) => Ok(s),
            (Layer::FullyConnected(f), s) => {
                if f.weights.cols() != s.size() || f.bias.len() != f.weights.rows() {
                    return Err(Error::dim(format!(
                        "fc {}x{} cannot take {} inputs",
                        f.weights.rows(),
                        f.weights.cols(),
                        s.size()
                    )));
                }
                Ok(Shape::Flat(f.weights.rows()))
            }
            (Layer::SoftmaxXent, Shape::Flat(n)) => Ok(Shape::Flat(n)),
            (layer, s) => Err(Error::dim(format!(
                "{} layer cannot follow {:?}",
                layer.kind(),
                s
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input: Shape,
    layers: Vec<Layer>,
    rng_seed: u64,
}

impl Network {
    /// Validates that adjacent layer shapes chain and that a softmax head, if
    /// present, is last.
    pub fn new(input: Shape, layers: Vec<Layer>, rng_seed: u64) -> Result<Self> {
        let mut shape = input;
        for (idx, layer) in layers.iter().enumerate() {
            if matches!(layer, Layer::SoftmaxXent) && idx + 1 != layers.len() {
                return Err(Error::dim("softmax_xent must be the final layer"));
            }
            if let Layer::Conv(c) = layer {
                check_masked_zero(c).map_err(|e| Error::dim(format!("layer {idx}: {e}")))?;
            }
            shape = layer
                .output_shape(shape)
                .map_err(|e| Error::dim(format!("layer {idx}: {e}")))?;
        }
        Ok(Network {
            input,
            layers,
            rng_seed,
        })
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn conv_indices(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| matches!(self.layers[i], Layer::Conv(_)))
            .collect()
    }

    pub fn conv(&self, idx: usize) -> Option<&ConvLayer> {
        match self.layers.get(idx) {
            Some(Layer::Conv(c)) => Some(c),
            _ => None,
        }
    }

    pub fn conv_mut(&mut self, idx: usize) -> Option<&mut ConvLayer> {
        match self.layers.get_mut(idx) {
            Some(Layer::Conv(c)) => Some(c),
            _ => None,
        }
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn set_pattern(&mut self, idx: usize, pattern: SparsityPatternSet) -> Result<()> {
        self.conv_mut(idx)
            .ok_or_else(|| Error::input(format!("layer {idx} is not a convolution")))?
            .set_pattern(pattern)
    }

    /// Number of trainable scalars, biases included.
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => c.kernel.data().len() + c.bias.len(),
                Layer::FullyConnected(f) => f.weights.data().len() + f.bias.len(),
                _ => 0,
            })
            .sum()
    }

    fn check_batch(&self, batch: &MapBatch) -> Result<()> {
        let ok = match self.input {
            Shape::Maps { maps, width, height } => {
                (batch.maps, batch.width, batch.height) == (maps, width, height)
            }
            Shape::Flat(n) => batch.maps * batch.width * batch.height == n,
        };
        if !ok {
            return Err(Error::dim(format!(
                "batch of {}x{}x{} maps does not match network input {:?}",
                batch.maps, batch.width, batch.height, self.input
            )));
        }
        Ok(())
    }

    /// Logits (the input of the softmax head, or the last layer's output
    /// flattened) together with everything backprop needs.
    pub fn forward(&self, batch: &MapBatch) -> Result<(Matrix, ForwardCache)> {
        self.run(batch, true)
    }

    /// Forward pass without keeping activations.
    pub fn predict(&self, batch: &MapBatch) -> Result<Matrix> {
        self.run(batch, false).map(|(logits, _)| logits)
    }

    /// Shape entering each layer.
    fn layer_inputs(&self) -> Vec<Shape> {
        let mut shape = self.input;
        self.layers
            .iter()
            .map(|l| {
                let here = shape;
                shape = l.output_shape(shape).expect("validated at construction");
                here
            })
            .collect()
    }

    fn run(&self, batch: &MapBatch, keep: bool) -> Result<(Matrix, ForwardCache)> {
        self.check_batch(batch)?;
        let n = batch.batch;
        let mut act = Activation::Maps(batch.clone());
        let mut entries = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, cache) = match layer {
                Layer::Conv(c) => conv_forward(c, act.into_maps()?, keep),
                Layer::MaxPool(p) => pool_forward(p, act.into_maps()?, keep),
                Layer::Relu => relu_forward(act, keep),
                Layer::FullyConnected(f) => fc_forward(f, act, keep),
                Layer::SoftmaxXent => {
                    let logits = act.into_flat();
                    let probs = softmax(&logits);
                    let cache = keep.then(|| LayerCache::Softmax {
                        probs: probs.clone(),
                    });
                    (Activation::Flat(logits), cache)
                }
            };
            act = next;
            entries.push(cache);
        }
        Ok((
            act.into_flat(),
            ForwardCache {
                batch: n,
                entries,
                complete: keep,
                signature: self.layer_inputs(),
            },
        ))
    }

    /// Gradients of the mean cross-entropy loss for the cached batch.
    pub fn backward(&self, cache: &ForwardCache, labels: &[u8]) -> Result<Gradients> {
        if !cache.complete
            || cache.entries.len() != self.layers.len()
            || cache.signature != self.layer_inputs()
        {
            return Err(Error::State("backward needs a full forward cache of this network".into()));
        }
        if !matches!(self.layers.last(), Some(Layer::SoftmaxXent)) {
            return Err(Error::State("backward needs a softmax_xent head".into()));
        }
        if labels.len() != cache.batch {
            return Err(Error::dim(format!(
                "{} labels for a batch of {}",
                labels.len(),
                cache.batch
            )));
        }
        let mut grads: Vec<Option<ParamGrad>> = vec![None; self.layers.len()];
        let mut loss = 0.0;
        let mut upstream: Option<Activation> = None;
        for idx in (0..self.layers.len()).rev() {
            let entry = cache.entries[idx]
                .as_ref()
                .ok_or_else(|| Error::State(format!("missing cache for layer {idx}")))?;
            let need_input = idx > 0;
            let next = match (&self.layers[idx], entry) {
                (Layer::SoftmaxXent, LayerCache::Softmax { probs }) => {
                    let (l, d) = softmax_xent_backward(probs, labels)?;
                    loss = l;
                    Some(Activation::Flat(d))
                }
                (Layer::FullyConnected(f), LayerCache::Fc { input, maps_shape }) => {
                    let dy = take_upstream(&mut upstream)?.into_flat();
                    let (g, dx) = fc_backward(f, input, &dy, need_input);
                    grads[idx] = Some(g);
                    dx.map(|dx| match maps_shape {
                        Some((m, w, h)) => Activation::Maps(MapBatch::unflatten(&dx, *m, *w, *h)),
                        None => Activation::Flat(dx),
                    })
                }
                (Layer::Relu, LayerCache::Relu { mask }) => {
                    let mut dy = take_upstream(&mut upstream)?;
                    for (v, &on) in dy.data_mut().iter_mut().zip(mask) {
                        if !on {
                            *v = 0.0;
                        }
                    }
                    Some(dy)
                }
                (Layer::MaxPool(p), LayerCache::Pool { argmax }) => {
                    let dy = take_upstream(&mut upstream)?.into_maps()?;
                    Some(Activation::Maps(pool_backward(p, argmax, &dy)))
                }
                (Layer::Conv(c), LayerCache::Conv { patches, filter }) => {
                    let dy = take_upstream(&mut upstream)?.into_maps()?;
                    let (g, dx) = conv_backward(c, patches, filter, &dy, need_input);
                    grads[idx] = Some(g);
                    dx.map(Activation::Maps)
                }
                _ => return Err(Error::State(format!("cache for layer {idx} has the wrong kind"))),
            };
            upstream = next;
        }
        Ok(Gradients {
            layers: grads,
            loss,
        })
    }

    /// Mean cross-entropy of a batch (no caching).
    pub fn loss(&self, batch: &MapBatch, labels: &[u8]) -> Result<f64> {
        let logits = self.predict(batch)?;
        let probs = softmax(&logits);
        Ok(softmax_xent_backward(&probs, labels)?.0)
    }

    /// Mutable (weights, bias) of a parametric layer.
    pub(crate) fn params_mut(&mut self, idx: usize) -> Option<(&mut [f32], &mut [f32])> {
        match &mut self.layers[idx] {
            Layer::Conv(c) => Some((c.kernel.data_mut(), c.bias.as_mut_slice())),
            Layer::FullyConnected(f) => Some((f.weights.data_mut(), f.bias.as_mut_slice())),
            _ => None,
        }
    }

    pub(crate) fn param_sizes(&self, idx: usize) -> Option<(usize, usize)> {
        match &self.layers[idx] {
            Layer::Conv(c) => Some((c.kernel.data().len(), c.bias.len())),
            Layer::FullyConnected(f) => Some((f.weights.data().len(), f.bias.len())),
            _ => None,
        }
    }
}

fn check_masked_zero(c: &ConvLayer) -> Result<()> {
    let per_t = c.kernel.group_stride();
    if c.pattern.masks().len() != per_t {
        return Err(Error::dim("pattern size does not match kernel"));
    }
    for row in c.kernel.data().chunks(per_t) {
        if row.iter().zip(c.pattern.masks()).any(|(&v, &live)| !live && v != 0.0) {
            return Err(Error::input("kernel has non-zero entries at masked positions"));
        }
    }
    Ok(())
}

fn take_upstream(up: &mut Option<Activation>) -> Result<Activation> {
    up.take()
        .ok_or_else(|| Error::State("no upstream gradient".into()))
}

enum Activation {
    Maps(MapBatch),
    Flat(Matrix),
}

impl Activation {
    fn into_maps(self) -> Result<MapBatch> {
        match self {
            Activation::Maps(m) => Ok(m),
            Activation::Flat(_) => Err(Error::dim("spatial layer after a flat activation")),
        }
    }

    fn into_flat(self) -> Matrix {
        match self {
            Activation::Maps(m) => m.flatten(),
            Activation::Flat(m) => m,
        }
    }

    fn data_mut(&mut self) -> &mut [f32] {
        match self {
            Activation::Maps(m) => &mut m.data,
            Activation::Flat(m) => m.data_mut(),
        }
    }
}

#[derive(Debug, Clone)]
enum LayerCache {
    Conv { patches: Matrix, filter: Matrix },
    Pool { argmax: Vec<u32> },
    Relu { mask: Vec<bool> },
    Fc { input: Matrix, maps_shape: Option<(usize, usize, usize)> },
    Softmax { probs: Matrix },
}

/// Activations recorded by [`Network::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    entries: Vec<Option<LayerCache>>,
    complete: bool,
    signature: Vec<Shape>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Flat gradient buffers matching a layer's weights and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Aligned with the network's layers; `None` for parameter-free layers.
    pub layers: Vec<Option<ParamGrad>>,
    /// Mean cross-entropy of the batch.
    pub loss: f64,
}

fn conv_forward(c: &ConvLayer, input: MapBatch, keep: bool) -> (Activation, Option<LayerCache>) {
    let g = &c.geometry;
    let n = input.batch;
    let keys = c.pattern.keys();
    let patches = im2col_batch(&input.data, n, g, &keys);
    let filter = pack_filters(&c.kernel, &c.pattern).expect("validated").inner;
    let cols = n * g.out_plane();
    let mut out = vec![0.0; g.out_maps * cols];
    for (t, row) in out.chunks_mut(cols).enumerate() {
        row.fill(c.bias[t]);
    }
    gemm(filter.view(), patches.view(), 1.0, &mut out);
    let act = MapBatch {
        maps: g.out_maps,
        batch: n,
        width: g.out_w(),
        height: g.out_h(),
        data: out,
    };
    let cache = keep.then_some(LayerCache::Conv { patches, filter });
    (Activation::Maps(act), cache)
}

fn conv_backward(
    c: &ConvLayer,
    patches: &Matrix,
    filter: &Matrix,
    dy: &MapBatch,
    need_input: bool,
) -> (ParamGrad, Option<MapBatch>) {
    let g = &c.geometry;
    let keys = c.pattern.keys();
    let cols = dy.batch * g.out_plane();
    let dy_view = MatView::new(&dy.data, g.out_maps, cols);

    let mut dfilter = vec![0.0; g.out_maps * keys.len()];
    gemm(dy_view, patches.view().t(), 0.0, &mut dfilter);
    let mut weight = vec![0.0; c.kernel.data().len()];
    for t in 0..g.out_maps {
        for (r, key) in keys.iter().enumerate() {
            weight[c.kernel.index(key.i, key.j, key.s, t)] = dfilter[t * keys.len() + r];
        }
    }
    let bias = dy
        .data
        .chunks(cols)
        .map(|row| row.iter().map(|&v| v as f64).sum::<f64>() as f32)
        .collect();

    let dx = need_input.then(|| {
        let mut dp = Matrix::zeros(keys.len(), cols);
        gemm(filter.view().t(), dy_view, 0.0, dp.data_mut());
        MapBatch {
            maps: g.in_maps,
            batch: dy.batch,
            width: g.in_w,
            height: g.in_h,
            data: col2im_batch(&dp, dy.batch, g, &keys),
        }
    });
    (ParamGrad { weight, bias }, dx)
}

fn pool_forward(p: &PoolLayer, input: MapBatch, keep: bool) -> (Activation, Option<LayerCache>) {
    let (ow, oh) = (p.out_w(), p.out_h());
    let in_plane = p.in_w * p.in_h;
    let planes = input.maps * input.batch;
    let mut out = vec![0.0; planes * ow * oh];
    let mut argmax = vec![0u32; out.len()];
    for pl in 0..planes {
        let src = &input.data[pl * in_plane..(pl + 1) * in_plane];
        for x in 0..ow {
            for y in 0..oh {
                let mut best = f32::NEG_INFINITY;
                let mut at = 0;
                for dx in 0..p.window {
                    for dy in 0..p.window {
                        let idx = (x * p.stride + dx) * p.in_h + y * p.stride + dy;
                        if src[idx] > best {
                            best = src[idx];
                            at = idx;
                        }
                    }
                }
                let o = (pl * ow + x) * oh + y;
                out[o] = best;
                argmax[o] = at as u32;
            }
        }
    }
    let act = MapBatch {
        maps: input.maps,
        batch: input.batch,
        width: ow,
        height: oh,
        data: out,
    };
    (Activation::Maps(act), keep.then_some(LayerCache::Pool { argmax }))
}

fn pool_backward(p: &PoolLayer, argmax: &[u32], dy: &MapBatch) -> MapBatch {
    let out_plane = p.out_w() * p.out_h();
    let in_plane = p.in_w * p.in_h;
    let planes = dy.maps * dy.batch;
    let mut dx = vec![0.0; planes * in_plane];
    for pl in 0..planes {
        for o in 0..out_plane {
            let k = pl * out_plane + o;
            dx[pl * in_plane + argmax[k] as usize] += dy.data[k];
        }
    }
    MapBatch {
        maps: dy.maps,
        batch: dy.batch,
        width: p.in_w,
        height: p.in_h,
        data: dx,
    }
}

fn relu_forward(mut act: Activation, keep: bool) -> (Activation, Option<LayerCache>) {
    let data = act.data_mut();
    let mask = if keep {
        data.iter().map(|&v| v > 0.0).collect()
    } else {
        Vec::new()
    };
    for v in data.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    (act, keep.then_some(LayerCache::Relu { mask }))
}

fn fc_forward(f: &FcLayer, act: Activation, keep: bool) -> (Activation, Option<LayerCache>) {
    let maps_shape = match &act {
        Activation::Maps(m) => Some((m.maps, m.width, m.height)),
        Activation::Flat(_) => None,
    };
    let x = act.into_flat();
    let out_dim = f.weights.rows();
    let mut y = Matrix::zeros(x.rows(), out_dim);
    for row in y.data_mut().chunks_mut(out_dim) {
        row.copy_from_slice(&f.bias);
    }
    gemm(x.view(), f.weights.view().t(), 1.0, y.data_mut());
    let cache = keep.then_some(LayerCache::Fc {
        input: x,
        maps_shape,
    });
    (Activation::Flat(y), cache)
}

fn fc_backward(f: &FcLayer, x: &Matrix, dy: &Matrix, need_input: bool) -> (ParamGrad, Option<Matrix>) {
    let mut weight = vec![0.0; f.weights.data().len()];
    gemm(dy.view().t(), x.view(), 0.0, &mut weight);
    let mut bias = vec![0.0f64; f.bias.len()];
    for row in dy.data().chunks(dy.cols()) {
        for (b, &v) in bias.iter_mut().zip(row) {
            *b += v as f64;
        }
    }
    let dx = need_input.then(|| {
        let mut dx = Matrix::zeros(x.rows(), x.cols());
        gemm(dy.view(), f.weights.view(), 0.0, dx.data_mut());
        dx
    });
    (
        ParamGrad {
            weight,
            bias: bias.into_iter().map(|v| v as f32).collect(),
        },
        dx,
    )
}

pub(crate) fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    let cols = logits.cols();
    if cols == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v as f64;
        }
        for v in row.iter_mut() {
            *v = (*v as f64 / sum) as f32;
        }
    }
    out
}

/// Mean cross-entropy and its gradient with respect to the logits.
fn softmax_xent_backward(probs: &Matrix, labels: &[u8]) -> Result<(f64, Matrix)> {
    let (n, k) = probs.shape();
    if labels.len() != n {
        return Err(Error::dim(format!("{} labels for {} rows", labels.len(), n)));
    }
    let mut grad = probs.clone();
    let mut loss = 0.0f64;
    let inv = 1.0 / n as f32;
    for (r, &label) in labels.iter().enumerate() {
        let label = label as usize;
        if label >= k {
            return Err(Error::input(format!("label {label} outside {k} classes")));
        }
        let row = &mut grad.data_mut()[r * k..(r + 1) * k];
        loss -= (row[label].max(1e-30) as f64).ln();
        row[label] -= 1.0;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Ok((loss / n as f64, grad))
}

/// Assembles a [`Network`] layer by layer, tracking shapes and drawing Xavier
/// initial weights, `U(±sqrt(6 / (fan_in + fan_out)))`, from a seeded stream.
pub struct NetworkBuilder {
    input: Shape,
    shape: Shape,
    layers: Vec<Layer>,
    seed: u64,
    rng: ChaCha8Rng,
}

impl NetworkBuilder {
    pub fn new(input: Shape, seed: u64) -> Self {
        NetworkBuilder {
            input,
            shape: input,
            layers: Vec::new(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn xavier(&mut self, len: usize, fan_in: usize, fan_out: usize) -> Vec<f32> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
        (0..len).map(|_| self.rng.gen_range(-bound..=bound)).collect()
    }

    pub fn conv(mut self, out_maps: usize, d: usize, pad: usize, stride: usize) -> Result<Self> {
        let Shape::Maps { maps, width, height } = self.shape else {
            return Err(Error::dim("conv needs a spatial input"));
        };
        let geometry = ConvGeometry::new(d, maps, out_maps, pad, stride, width, height)?;
        let kernel = Tensor4::from_vec(
            d,
            maps,
            out_maps,
            self.xavier(d * d * maps * out_maps, maps * d * d, out_maps * d * d),
        )?;
        self.push(Layer::Conv(ConvLayer {
            geometry,
            kernel,
            bias: vec![0.0; out_maps],
            pattern: SparsityPatternSet::full(d, maps),
        }))
    }

    pub fn maxpool(self, window: usize, stride: usize) -> Result<Self> {
        let Shape::Maps { maps, width, height } = self.shape else {
            return Err(Error::dim("maxpool needs a spatial input"));
        };
        if stride == 0 || window == 0 || window > width || window > height {
            return Err(Error::dim(format!("pool window {window} does not fit {width}x{height}")));
        }
        if !(width - window).is_multiple_of(stride) || !(height - window).is_multiple_of(stride) {
            return Err(Error::dim(format!(
                "pool {window}/{stride} does not tile {width}x{height}"
            )));
        }
        self.push(Layer::MaxPool(PoolLayer {
            window,
            stride,
            maps,
            in_w: width,
            in_h: height,
        }))
    }

    pub fn relu(self) -> Result<Self> {
        self.push(Layer::Relu)
    }

    pub fn fc(mut self, out: usize) -> Result<Self> {
        let inp = self.shape.size();
        let weights = Matrix::from_vec(out, inp, self.xavier(out * inp, inp, out))?;
        self.push(Layer::FullyConnected(FcLayer {
            weights,
            bias: vec![0.0; out],
        }))
    }

    pub fn softmax_xent(self) -> Result<Self> {
        self.push(Layer::SoftmaxXent)
    }

    fn push(mut self, layer: Layer) -> Result<Self> {
        self.shape = layer.output_shape(self.shape)?;
        self.layers.push(layer);
        Ok(self)
    }

    pub fn build(self) -> Result<Network> {
        Network::new(self.input, self.layers, self.seed)
    }
}

/// conv(20, 5×5) → maxpool(2,2) → conv(50, 5×5) → maxpool(2,2) → fc(500) →
/// relu → fc(10) → softmax, on 28×28 single-map input.
pub fn build_lenet(seed: u64) -> Network {
    NetworkBuilder::new(
        Shape::Maps {
            maps: 1,
            width: 28,
            height: 28,
        },
        seed,
    )
    .conv(20, 5, 0, 1)
    .and_then(|b| b.maxpool(2, 2))
    .and_then(|b| b.conv(50, 5, 0, 1))
    .and_then(|b| b.maxpool(2, 2))
    .and_then(|b| b.fc(500))
    .and_then(|b| b.relu())
    .and_then(|b| b.fc(10))
    .and_then(|b| b.softmax_xent())
    .and_then(|b| b.build())
    .expect("LeNet shapes are consistent")
}

#[cfg(test)]
mod tests;
