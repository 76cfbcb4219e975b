//! Pixel embedding layers: fuse backbone features X2..X5 into a D-channel
//! map at 1/8 of the input resolution.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// Downsampling factor of each backbone scale, X2 through X5.
pub const SCALE_FACTORS: [usize; 4] = [4, 8, 16, 32];
/// Resolution of the pixel embedding relative to the input.
pub const EMBED_STRIDE: usize = 8;

const SCALE_NAMES: [&str; 4] = ["x2", "x3", "x4", "x5"];

/// Backbone feature maps of one image, each `C × H/s × W/s`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleFeatures {
    scales: [Tensor; 4],
    height: usize,
    width: usize,
}

impl MultiScaleFeatures {
    pub fn new(scales: [Tensor; 4], height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || height % 32 != 0 || width % 32 != 0 {
            return Err(Error::InvalidArgument(format!(
                "input dims {height}x{width} must be positive multiples of 32"
            )));
        }
        let channels = scales[0].dims()[0];
        for (t, f) in scales.iter().zip(SCALE_FACTORS) {
            let want = [channels, height / f, width / f];
            if t.dims() != want {
                return Err(Error::shape("multi-scale features", &want, t.dims()));
            }
        }
        Ok(Self {
            scales,
            height,
            width,
        })
    }

    pub fn scales(&self) -> &[Tensor; 4] {
        &self.scales
    }

    pub fn channels(&self) -> usize {
        self.scales[0].dims()[0]
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Spatial dims of the pixel embedding, `(H/8, W/8)`.
    pub fn embed_dims(&self) -> (usize, usize) {
        (self.height / EMBED_STRIDE, self.width / EMBED_STRIDE)
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            scales: self.scales.clone().map(|t| t.map(|v| alpha * v)),
            height: self.height,
            width: self.width,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingMode {
    /// One conv per scale, summed, then refined.
    MultiScale,
    /// A single conv on X3 replaces the fused map.
    SingleScale,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingConfig {
    pub dim: usize,
    /// Two extra D→D refine convs.
    pub enhanced: bool,
    pub mode: EmbeddingMode,
    /// ReLU after every conv except the last; off only for linearity tests.
    pub activations: bool,
}

impl EmbeddingConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            enhanced: false,
            mode: EmbeddingMode::MultiScale,
            activations: true,
        }
    }

    fn refine_count(&self) -> usize {
        match self.mode {
            EmbeddingMode::MultiScale if self.enhanced => 3,
            EmbeddingMode::MultiScale => 1,
            EmbeddingMode::SingleScale => 0,
        }
    }

    fn branch_names(&self) -> &'static [&'static str] {
        match self.mode {
            EmbeddingMode::MultiScale => &SCALE_NAMES,
            EmbeddingMode::SingleScale => &SCALE_NAMES[1..2],
        }
    }

    /// Parameter names under `prefix`, e.g. `pe.x2.w`, `pe.refine0.b`.
    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut names = Vec::new();
        let stages = self
            .branch_names()
            .iter()
            .map(|s| s.to_string())
            .chain((0..self.refine_count()).map(|i| format!("refine{i}")));
        for stage in stages {
            names.push(format!("{prefix}.{stage}.w"));
            names.push(format!("{prefix}.{stage}.b"));
        }
        names
    }

    /// He-normal kernels (near-zero gain for the final conv) and zero biases.
    pub fn init_params(
        &self,
        params: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        rng: &mut impl Rng,
    ) {
        let d = self.dim;
        let refines = self.refine_count();
        let last_branch_is_output = refines == 0;
        for name in self.branch_names() {
            let gain = if last_branch_is_output {
                OUTPUT_GAIN
            } else {
                2.0
            };
            params.insert(
                format!("{prefix}.{name}.w"),
                conv_kernel(d, in_channels, gain, rng),
            );
            params.insert(format!("{prefix}.{name}.b"), Tensor::zeros(&[d]));
        }
        for i in 0..refines {
            let gain = if i + 1 == refines { OUTPUT_GAIN } else { 2.0 };
            params.insert(
                format!("{prefix}.refine{i}.w"),
                conv_kernel(d, d, gain, rng),
            );
            params.insert(format!("{prefix}.refine{i}.b"), Tensor::zeros(&[d]));
        }
    }
}

fn conv_kernel(cout: usize, cin: usize, gain: f64, rng: &mut impl Rng) -> Tensor {
    let std = (gain / (cin * 9) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..cout * cin * 9).map(|_| normal.sample(rng)).collect();
    Tensor::new(&[cout, cin, 3, 3], data).expect("kernel dims")
}

/// Variance gain of the conv producing the embedding. Kept tiny so that
/// sum-pooled instance features start near zero and the affinity logistic
/// starts unsaturated.
const OUTPUT_GAIN: f64 = 1e-4;

/// How a branch is brought to 1/8 resolution after its conv.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    AvgPool2,
    Identity,
    Upsample(usize),
}

impl Resample {
    fn for_stride(stride: usize) -> Self {
        match stride {
            4 => Resample::AvgPool2,
            8 => Resample::Identity,
            s => Resample::Upsample(s / EMBED_STRIDE),
        }
    }

    fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Resample::AvgPool2 => g.avg_pool2(x),
            Resample::Identity => Ok(x),
            Resample::Upsample(f) => g.upsample_bilinear(x, f),
        }
    }
}

/// Recorded pixel embedding for one image.
#[derive(Clone, Debug)]
pub struct PixelEmbedding {
    /// `D × H' × W'`.
    pub map: Var,
    /// Per-branch conv outputs at 1/8 resolution, before summation.
    pub branches: Vec<Var>,
    pub dim: usize,
    pub height: usize,
    pub width: usize,
}

fn conv(g: &mut Graph, params: &ParamStore, prefix: &str, stage: &str, x: Var) -> Result<Var> {
    let w = g.param(params, &format!("{prefix}.{stage}.w"))?;
    let b = g.param(params, &format!("{prefix}.{stage}.b"))?;
    g.conv2d(x, w, b)
}

/// Fuses `inputs` (one per branch, each with its resampling rule) into a
/// pixel embedding: conv per branch, resample, sum, refine.
pub fn fuse_branches(
    g: &mut Graph,
    params: &ParamStore,
    prefix: &str,
    cfg: &EmbeddingConfig,
    inputs: &[(Var, Resample)],
) -> Result<PixelEmbedding> {
    params.require(cfg.param_names(prefix).iter().map(String::as_str))?;
    let names = cfg.branch_names();
    if inputs.len() != names.len() {
        return Err(Error::InvalidArgument(format!(
            "expected {} feature branches, got {}",
            names.len(),
            inputs.len()
        )));
    }
    let refines = cfg.refine_count();
    let mut branches = Vec::with_capacity(inputs.len());
    for (&(x, resample), name) in inputs.iter().zip(names) {
        let mut y = conv(g, params, prefix, name, x)?;
        if cfg.activations && refines > 0 {
            y = g.relu(y);
        }
        branches.push(resample.apply(g, y)?);
    }
    let mut map = branches[0];
    for &b in &branches[1..] {
        map = g.add(map, b)?;
    }
    for i in 0..refines {
        map = conv(g, params, prefix, &format!("refine{i}"), map)?;
        if cfg.activations && i + 1 < refines {
            map = g.relu(map);
        }
    }
    let dims = g.dims(map).to_vec();
    Ok(PixelEmbedding {
        map,
        branches,
        dim: dims[0],
        height: dims[1],
        width: dims[2],
    })
}

/// Pixel embedding of backbone features (scales recorded as constants).
pub fn build_pixel_embedding(
    g: &mut Graph,
    feats: &MultiScaleFeatures,
    params: &ParamStore,
    prefix: &str,
    cfg: &EmbeddingConfig,
) -> Result<PixelEmbedding> {
    let inputs: Vec<(Var, Resample)> = match cfg.mode {
        EmbeddingMode::MultiScale => feats
            .scales()
            .iter()
            .zip(SCALE_FACTORS)
            .map(|(t, s)| (g.constant(t.clone()), Resample::for_stride(s)))
            .collect(),
        EmbeddingMode::SingleScale => {
            vec![(g.constant(feats.scales()[1].clone()), Resample::Identity)]
        }
    };
    fuse_branches(g, params, prefix, cfg, &inputs)
}
