//! Constrained directional Sobel layers and relative-threshold binarization.
//!
//! A Sobel layer runs four direction-constrained filter banks (horizontal,
//! vertical, and the two diagonals) over its input and sums the four feature
//! maps. Each bank's 3x3 kernels are box-constrained by position: some cells
//! must stay in `[0,1]`, some are pinned to exactly `0`, and some stay in
//! `[-1,0]`. Constraints are enforced by projection (clamping) after every
//! optimizer step.
//!
//! After the last Sobel layer, activations are rectified (absolute value) and
//! binarized per channel at `t * max(channel)`. The hard threshold has zero
//! derivative almost everywhere, so training uses a straight-through
//! estimator: the upstream gradient passes wherever the input is nonzero.
//!
//! Sobel convolutions use no padding: on a constant image the positive and
//! negative coefficients of a feasible classic kernel cancel exactly at every
//! valid position, which keeps featureless inputs featureless.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::conv_output_hw;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Supported kernel size. Larger odd sizes are reserved but unimplemented.
pub const KERNEL_SIZE: usize = 3;

/// Channels whose maximum activation falls below this are treated as
/// featureless and binarize to all zeros.
pub const DEGENERATE_CHANNEL_EPS: f64 = 1e-12;

/// Magnitude of the uniform init noise added to the classic coefficients.
pub const INIT_NOISE: f64 = 0.05;

/// Edge orientation of a constrained kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Horizontal,
    Vertical,
    PositiveDiagonal,
    NegativeDiagonal,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Horizontal,
        Direction::Vertical,
        Direction::PositiveDiagonal,
        Direction::NegativeDiagonal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Horizontal => "horizontal",
            Direction::Vertical => "vertical",
            Direction::PositiveDiagonal => "positive_diagonal",
            Direction::NegativeDiagonal => "negative_diagonal",
        }
    }
}

/// Constraint class of one kernel cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    /// Cell constrained to `[0, 1]`.
    Pos,
    /// Cell pinned to exactly `0`.
    Zero,
    /// Cell constrained to `[-1, 0]`.
    Neg,
}

impl Sign {
    pub fn interval(self) -> (f64, f64) {
        match self {
            Sign::Pos => (0.0, 1.0),
            Sign::Zero => (0.0, 0.0),
            Sign::Neg => (-1.0, 0.0),
        }
    }
}

/// The sign/zero layout of a 3x3 directional kernel. The three masks are
/// disjoint and cover the grid by construction (every cell has exactly one
/// [`Sign`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DirectionPattern {
    kind: Direction,
    cells: [Sign; 9],
}

impl DirectionPattern {
    pub fn of(kind: Direction) -> Self {
        use Sign::{Neg, Pos, Zero};
        let cells = match kind {
            // top row positive, middle row zero, bottom row negative
            Direction::Horizontal => [
                Pos, Pos, Pos, //
                Zero, Zero, Zero, //
                Neg, Neg, Neg,
            ],
            // left column positive, middle column zero, right column negative
            Direction::Vertical => [
                Pos, Zero, Neg, //
                Pos, Zero, Neg, //
                Pos, Zero, Neg,
            ],
            // positive above the anti-diagonal, zero on it, negative below
            Direction::PositiveDiagonal => [
                Pos, Pos, Zero, //
                Pos, Zero, Neg, //
                Zero, Neg, Neg,
            ],
            // zero on the main diagonal, positive above, negative below
            Direction::NegativeDiagonal => [
                Zero, Pos, Pos, //
                Neg, Zero, Pos, //
                Neg, Neg, Zero,
            ],
        };
        Self { kind, cells }
    }

    pub fn kind(&self) -> Direction {
        self.kind
    }

    pub fn cells(&self) -> &[Sign; 9] {
        &self.cells
    }

    pub fn pos_mask(&self) -> [bool; 9] {
        self.mask(Sign::Pos)
    }

    pub fn zero_mask(&self) -> [bool; 9] {
        self.mask(Sign::Zero)
    }

    pub fn neg_mask(&self) -> [bool; 9] {
        self.mask(Sign::Neg)
    }

    fn mask(&self, sign: Sign) -> [bool; 9] {
        let mut m = [false; 9];
        for (mv, &c) in m.iter_mut().zip(&self.cells) {
            *mv = c == sign;
        }
        m
    }

    /// Classic Sobel coefficients for this direction, scaled by 1/2 so they
    /// sit inside the feasible box.
    pub fn classic(&self) -> [f64; 9] {
        match self.kind {
            Direction::Horizontal => [
                0.5, 1.0, 0.5, //
                0.0, 0.0, 0.0, //
                -0.5, -1.0, -0.5,
            ],
            Direction::Vertical => [
                0.5, 0.0, -0.5, //
                1.0, 0.0, -1.0, //
                0.5, 0.0, -0.5,
            ],
            Direction::PositiveDiagonal => [
                1.0, 0.5, 0.0, //
                0.5, 0.0, -0.5, //
                0.0, -0.5, -1.0,
            ],
            Direction::NegativeDiagonal => [
                0.0, 0.5, 1.0, //
                -0.5, 0.0, 0.5, //
                -1.0, -0.5, 0.0,
            ],
        }
    }
}

/// A bank of `F` direction-constrained 3x3 filters over `C` input channels.
/// Weights have shape `[F, C, 3, 3]`; the constraint pattern applies
/// identically across filters and input channels.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionalKernel<S = f64> {
    pattern: DirectionPattern,
    weights: Tensor<S>,
}

impl<S: Scalar> DirectionalKernel<S> {
    /// Classic coefficients plus seeded uniform noise on the non-zero cells,
    /// projected feasible. Same seed, same kernel.
    pub fn init(kind: Direction, filters: usize, in_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with_rng(kind, filters, in_channels, &mut rng)
    }

    pub fn init_with_rng(
        kind: Direction,
        filters: usize,
        in_channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let pattern = DirectionPattern::of(kind);
        let classic = pattern.classic();
        let cells = *pattern.cells();
        let mut weights = Tensor::zeros(vec![filters, in_channels, KERNEL_SIZE, KERNEL_SIZE]);
        for chunk in weights.data_mut().chunks_mut(9) {
            for (i, w) in chunk.iter_mut().enumerate() {
                let noise = if cells[i] == Sign::Zero {
                    0.0
                } else {
                    rng.gen_range(-INIT_NOISE..INIT_NOISE)
                };
                *w = S::from_f64_lossy(classic[i] + noise);
            }
        }
        let mut kernel = Self { pattern, weights };
        kernel.project();
        kernel
    }

    /// Weights taken exactly from the scaled classic Sobel coefficients.
    pub fn classic(kind: Direction, filters: usize, in_channels: usize) -> Self {
        let pattern = DirectionPattern::of(kind);
        let classic = pattern.classic();
        let weights = Tensor::from_fn(vec![filters, in_channels, KERNEL_SIZE, KERNEL_SIZE], |i| {
            S::from_f64_lossy(classic[i % 9])
        });
        Self { pattern, weights }
    }

    /// Wraps existing weights (checkpoint loading); shape is validated, the
    /// values are not, so follow with [`project`](Self::project) if needed.
    pub fn from_weights(kind: Direction, weights: Tensor<S>) -> Result<Self> {
        let (_, _, kh, kw) = weights.dims4()?;
        if kh != KERNEL_SIZE || kw != KERNEL_SIZE {
            return Err(Error::Config(format!(
                "directional kernels are {KERNEL_SIZE}x{KERNEL_SIZE}, got {kh}x{kw}"
            )));
        }
        Ok(Self {
            pattern: DirectionPattern::of(kind),
            weights,
        })
    }

    pub fn pattern(&self) -> &DirectionPattern {
        &self.pattern
    }

    pub fn weights(&self) -> &Tensor<S> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor<S> {
        &mut self.weights
    }

    pub fn filters(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Clamps every cell into its constraint interval. Idempotent.
    pub fn project(&mut self) {
        let cells = *self.pattern.cells();
        for chunk in self.weights.data_mut().chunks_mut(9) {
            for (w, &cell) in chunk.iter_mut().zip(&cells) {
                let (lo, hi) = cell.interval();
                *w = (*w).max(S::from_f64_lossy(lo)).min(S::from_f64_lossy(hi));
            }
        }
    }

    /// True when every cell already satisfies its constraint exactly.
    pub fn is_feasible(&self) -> bool {
        let cells = *self.pattern.cells();
        self.weights.data().chunks(9).all(|chunk| {
            chunk.iter().zip(&cells).all(|(&w, &cell)| match cell {
                Sign::Zero => w == S::zero(),
                sign => {
                    let (lo, hi) = sign.interval();
                    w >= S::from_f64_lossy(lo) && w <= S::from_f64_lossy(hi)
                }
            })
        })
    }
}

/// Per-channel relative-threshold binarization.
///
/// Accepts `[N,P,Q]` or a batched `[B,N,P,Q]`; each channel is compared
/// against `t * max(channel)` and mapped to `{0, 1}`. Channels whose maximum
/// is below [`DEGENERATE_CHANNEL_EPS`] output all zeros.
pub fn threshold_forward<S: Scalar>(x: &Tensor<S>, t: f64) -> Result<Tensor<S>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!(
            "threshold proportion t must be in [0,1], got {t}"
        )));
    }
    let shape = x.shape();
    if shape.len() != 3 && shape.len() != 4 {
        return Err(Error::Shape(format!(
            "threshold expects [N,P,Q] or [B,N,P,Q], got {shape:?}"
        )));
    }
    let plane: usize = shape[shape.len() - 2] * shape[shape.len() - 1];
    let mut out = Tensor::zeros(shape.to_vec());
    if plane == 0 {
        return Ok(out);
    }
    let eps = S::from_f64_lossy(DEGENERATE_CHANNEL_EPS);
    let tv = S::from_f64_lossy(t);
    for (xc, oc) in x.data().chunks(plane).zip(out.data_mut().chunks_mut(plane)) {
        let max = xc.iter().copied().fold(xc[0], S::max);
        if max < eps {
            continue; // degenerate channel stays zero
        }
        let cut = tv * max;
        for (o, &v) in oc.iter_mut().zip(xc) {
            if v >= cut {
                *o = S::one();
            }
        }
    }
    Ok(out)
}

/// Straight-through estimator for the threshold layer: the upstream gradient
/// passes wherever `|x| > 0` and is zero elsewhere.
pub fn threshold_backward_ste<S: Scalar>(upstream: &Tensor<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    if upstream.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "STE shape mismatch: {:?} vs {:?}",
            upstream.shape(),
            x.shape()
        )));
    }
    let mut out = upstream.clone();
    for (g, &v) in out.data_mut().iter_mut().zip(x.data()) {
        if v == S::zero() {
            *g = S::zero();
        }
    }
    Ok(out)
}

/// One Sobel layer: four parallel directional banks (summed) followed by max
/// pooling. All four banks share `F`, `C`, and the kernel size.
#[derive(Debug, Clone)]
pub struct SobelLayer<S = f64> {
    kernels: [DirectionalKernel<S>; 4],
    stride: usize,
    pool_window: usize,
    pool_stride: usize,
}

impl<S: Scalar> SobelLayer<S> {
    pub fn new(
        kernels: [DirectionalKernel<S>; 4],
        stride: usize,
        pool_window: usize,
        pool_stride: usize,
    ) -> Result<Self> {
        if stride == 0 || pool_window == 0 || pool_stride == 0 {
            return Err(Error::Config(
                "sobel stride and pooling must be positive".into(),
            ));
        }
        let f = kernels[0].filters();
        let c = kernels[0].in_channels();
        if kernels
            .iter()
            .any(|k| k.filters() != f || k.in_channels() != c)
        {
            return Err(Error::Config(
                "the four directional kernels must share F and C".into(),
            ));
        }
        for (k, kind) in kernels.iter().zip(Direction::ALL) {
            if k.pattern().kind() != kind {
                return Err(Error::Config(
                    "kernels must be ordered horizontal, vertical, positive diagonal, negative diagonal"
                        .into(),
                ));
            }
        }
        Ok(Self {
            kernels,
            stride,
            pool_window,
            pool_stride,
        })
    }

    pub fn kernels(&self) -> &[DirectionalKernel<S>; 4] {
        &self.kernels
    }

    pub fn kernels_mut(&mut self) -> &mut [DirectionalKernel<S>; 4] {
        &mut self.kernels
    }

    pub fn filters(&self) -> usize {
        self.kernels[0].filters()
    }

    pub fn in_channels(&self) -> usize {
        self.kernels[0].in_channels()
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn pool(&self) -> (usize, usize) {
        (self.pool_window, self.pool_stride)
    }

    /// Spatial output size for an `h` by `w` input (conv then pool).
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ch, cw) = conv_output_hw(h, w, KERNEL_SIZE, self.stride, 0)?;
        if self.pool_window > ch || self.pool_window > cw {
            return Err(Error::Shape(format!(
                "pool window {} exceeds sobel output {ch}x{cw}",
                self.pool_window
            )));
        }
        Ok((
            (ch - self.pool_window) / self.pool_stride + 1,
            (cw - self.pool_window) / self.pool_stride + 1,
        ))
    }

    /// Records the layer on the tape: sum of the four directional convs,
    /// then max pooling. `kernel_vars` are the bound kernel leaves.
    pub fn forward_on(&self, tape: &mut Tape<S>, kernel_vars: &[Var; 4], x: Var) -> Result<Var> {
        let mut sum = tape.conv2d(x, kernel_vars[0], self.stride, 0)?;
        for &kv in &kernel_vars[1..] {
            let conv = tape.conv2d(x, kv, self.stride, 0)?;
            sum = tape.add(sum, conv)?;
        }
        tape.maxpool2d(sum, self.pool_window, self.pool_stride)
    }
}

/// Hyperparameters of the binary feature module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbfmConfig {
    /// Number of stacked Sobel layers (`l`).
    pub layers: usize,
    /// Threshold proportion coefficient (`t`) in `[0, 1]`.
    pub threshold: f64,
    /// Filters per direction per layer (`F`).
    pub channels_per_direction: usize,
    /// Kernel size; only 3 is implemented.
    pub kernel_size: usize,
    /// Per-layer `(pool_window, pool_stride)`.
    pub pooling: Vec<(usize, usize)>,
    /// Conv stride of every Sobel layer.
    pub stride: usize,
    /// When set, kernels keep their initialization and receive no updates.
    pub frozen: bool,
}

impl SbfmConfig {
    /// Config with `l` layers and threshold `t`, default pooling of 2/2 per
    /// layer and 8 filters per direction.
    pub fn new(layers: usize, threshold: f64) -> Self {
        Self {
            layers,
            threshold,
            channels_per_direction: 8,
            kernel_size: KERNEL_SIZE,
            pooling: vec![(2, 2); layers],
            stride: 1,
            frozen: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("sbfm needs at least one Sobel layer".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "threshold proportion must be in [0,1], got {}",
                self.threshold
            )));
        }
        if self.channels_per_direction == 0 {
            return Err(Error::Config(
                "channels_per_direction must be positive".into(),
            ));
        }
        if self.kernel_size != KERNEL_SIZE {
            return Err(Error::Config(format!(
                "kernel size {} unsupported; only {KERNEL_SIZE} is implemented",
                self.kernel_size
            )));
        }
        if self.pooling.len() != self.layers {
            return Err(Error::Config(format!(
                "pooling schedule has {} entries for {} layers",
                self.pooling.len(),
                self.layers
            )));
        }
        if self.stride == 0 || self.pooling.iter().any(|&(w, s)| w == 0 || s == 0) {
            return Err(Error::Config(
                "strides and pool sizes must be positive".into(),
            ));
        }
        Ok(())
    }
}

impl Default for SbfmConfig {
    fn default() -> Self {
        // l = 3, t = 0.8: the reference CIFAR-10 configuration.
        Self::new(3, 0.8)
    }
}

/// The built pipeline: `l` Sobel layers, then rectify + threshold + flatten.
#[derive(Debug, Clone)]
pub struct Sbfm<S = f64> {
    layers: Vec<SobelLayer<S>>,
    threshold: f64,
    frozen: bool,
}

/// Builds the pipeline. Layer `k`'s input channel count equals layer
/// `k-1`'s filter count; the first layer consumes `in_channels`.
pub fn build_sbfm<S: Scalar>(cfg: &SbfmConfig, in_channels: usize, seed: u64) -> Result<Sbfm<S>> {
    cfg.validate()?;
    if in_channels == 0 {
        return Err(Error::Config(
            "sbfm input channel count must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(cfg.layers);
    let mut c = in_channels;
    for &(pw, ps) in &cfg.pooling {
        let kernels = Direction::ALL.map(|kind| {
            DirectionalKernel::init_with_rng(kind, cfg.channels_per_direction, c, &mut rng)
        });
        layers.push(SobelLayer::new(kernels, cfg.stride, pw, ps)?);
        c = cfg.channels_per_direction;
    }
    Ok(Sbfm {
        layers,
        threshold: cfg.threshold,
        frozen: cfg.frozen,
    })
}

impl<S: Scalar> Sbfm<S> {
    pub fn layers(&self) -> &[SobelLayer<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [SobelLayer<S>] {
        &mut self.layers
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    /// Length of the flattened binary feature vector for an `h` by `w` input.
    pub fn feature_len(&self, mut h: usize, mut w: usize) -> Result<usize> {
        for layer in &self.layers {
            (h, w) = layer.output_hw(h, w)?;
        }
        Ok(self.layers.last().map_or(0, |l| l.filters()) * h * w)
    }

    /// Records the full pipeline; returns the flattened binary features and
    /// the bound kernel leaves (in layer-major, direction-minor order).
    pub fn forward_on(
        &self,
        tape: &mut Tape<S>,
        x: Var,
        trainable: bool,
    ) -> Result<(Var, Vec<[Var; 4]>)> {
        let trainable = trainable && !self.frozen;
        let mut kernel_vars = Vec::with_capacity(self.layers.len());
        let mut cur = x;
        for layer in &self.layers {
            let vars: [Var; 4] = layer
                .kernels()
                .each_ref()
                .map(|k| tape.leaf(k.weights().clone(), trainable));
            cur = layer.forward_on(tape, &vars, cur)?;
            kernel_vars.push(vars);
        }
        let rectified = tape.abs(cur);
        let binary = tape.channel_threshold(rectified, self.threshold)?;
        let flat = tape.flatten(binary)?;
        Ok((flat, kernel_vars))
    }

    /// Projects every kernel back into its constraint set.
    pub fn project_all(&mut self) {
        for layer in &mut self.layers {
            for k in layer.kernels_mut() {
                k.project();
            }
        }
    }

    pub fn all_feasible(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.kernels().iter().all(|k| k.is_feasible()))
    }
}
