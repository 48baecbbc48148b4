//! The 3D-aware path: per-view 2D features from the noisy views, a spatial
//! feature volume over the unit cube shared by all views, per-view frustum
//! resampling and the depth-wise attention that feeds it back into the UNet.
//!
//! Layouts: the spatial volume is `[C_vol, V, V, V]` indexed like
//! [`cube_vertices`]; a frustum volume is `[P·D, C_vol]` with `P = H′·W′`
//! pixels in row-major order and the `D` depth planes fastest.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::denoiser::{ModelError, Result};
use crate::geometry::{cube_index_coords, cube_vertices, depth_range, frustum_points, SphericalPose, ViewRing};
use crate::params::{self, Bound, ParamStore};
use crate::tensor::{Real, Rng, SamplePlan, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VolumeConfig {
    /// Number of target views whose features are concatenated.
    pub views: usize,
    /// Vertices per side of the spatial grid (`V`).
    pub vertices: usize,
    /// Depth planes per frustum (`D`).
    pub depth_planes: usize,
    /// Channels of the per-view 2D feature maps.
    pub feature_channels: usize,
    /// Channels of the spatial and frustum volumes; also the attention width.
    pub volume_channels: usize,
}

impl Default for VolumeConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl VolumeConfig {
    pub fn desk() -> Self {
        Self {
            views: 8,
            vertices: 16,
            depth_planes: 24,
            feature_channels: 8,
            volume_channels: 16,
        }
    }

    /// Full-size grid and depth sampling.
    pub fn full_scale() -> Self {
        Self {
            views: 16,
            vertices: 32,
            depth_planes: 48,
            ..Self::desk()
        }
    }
}

/// Everything about the view ring that the volume path needs and that does
/// not change between denoising steps: sample plans and the canonical view
/// order.
#[derive(Debug)]
pub struct ViewGeometry {
    poses: Vec<SphericalPose>,
    image_size: usize,
    vertices: usize,
    depth: usize,
    order: Vec<usize>,
    vertex_plans: Vec<Arc<SamplePlan>>,
    /// `[level][view]`.
    frustum_plans: Vec<Vec<Arc<SamplePlan>>>,
}

impl ViewGeometry {
    /// Plans for `levels` resolutions, halving from `image_size`.
    pub fn new(ring: &ViewRing, image_size: usize, levels: usize, vertices: usize, depth: usize) -> Result<Self> {
        if ring.is_empty() {
            return Err(ModelError::Config("view ring has no targets".into()));
        }
        for cam in &ring.targets {
            let k = &cam.intrinsics;
            if k.width != image_size || k.height != image_size {
                return Err(ModelError::Config(format!(
                    "camera intrinsics are {}×{}, model expects {image_size}×{image_size}",
                    k.width, k.height
                )));
            }
        }
        let cube = cube_vertices(vertices)?;
        let vertex_plans = ring
            .targets
            .iter()
            .map(|cam| {
                let pts: Vec<[f64; 2]> = cube
                    .iter()
                    .map(|p| {
                        let proj = cam.project(p);
                        if proj.behind_camera() {
                            [-2.0, -2.0]
                        } else {
                            [proj.v - 0.5, proj.u - 0.5]
                        }
                    })
                    .collect();
                Arc::new(SamplePlan::bilinear(image_size, image_size, &pts))
            })
            .collect();
        let frustum_plans = (0..levels)
            .map(|level| {
                let size = image_size >> level;
                ring.targets
                    .iter()
                    .map(|cam| {
                        let (near, far) = depth_range(cam.pose.radius);
                        let pts: Vec<[f64; 3]> = frustum_points(cam, size, size, depth, near, far)?
                            .iter()
                            .map(|p| cube_index_coords(p, vertices))
                            .collect();
                        Ok(Arc::new(SamplePlan::trilinear([vertices; 3], &pts)))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            poses: ring.targets.iter().map(|c| c.pose).collect(),
            image_size,
            vertices,
            depth,
            order: ring.canonical_order(),
            vertex_plans,
            frustum_plans,
        })
    }

    /// Whether this geometry was built for the same target cameras.
    pub fn matches(&self, ring: &ViewRing) -> bool {
        self.poses.len() == ring.len() && self.poses.iter().zip(&ring.targets).all(|(p, c)| *p == c.pose)
    }

    pub fn views(&self) -> usize {
        self.poses.len()
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn vertices(&self) -> usize {
        self.vertices
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn levels(&self) -> usize {
        self.frustum_plans.len()
    }

    /// View indices in the order their features are concatenated.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn vertex_plan(&self, view: usize) -> &Arc<SamplePlan> {
        &self.vertex_plans[view]
    }

    pub fn frustum_plan(&self, level: usize, view: usize) -> &Arc<SamplePlan> {
        &self.frustum_plans[level][view]
    }
}

pub fn init_extractor(store: &mut ParamStore, cfg: &VolumeConfig, image_channels: usize, time_dim: usize, rng: &mut Rng) {
    let c = cfg.feature_channels;
    store.conv("extract.conv1", image_channels, c, &[3, 3], rng);
    store.linear("extract.temb", time_dim, c, rng);
    store.conv("extract.conv2", c, c, &[3, 3], rng);
}

pub fn init_volume_cnn(store: &mut ParamStore, cfg: &VolumeConfig, rng: &mut Rng) {
    let (c_in, c) = (cfg.views * cfg.feature_channels, cfg.volume_channels);
    store.conv("volume.conv1", c_in, c, &[1, 1, 1], rng);
    store.group_norm("volume.norm1", c);
    store.conv("volume.conv2", c, c, &[3, 3, 3], rng);
    store.group_norm("volume.norm2", c);
    store.conv("volume.conv3", c, c, &[3, 3, 3], rng);
}

/// Query/key/value projections (He init) and a zero output projection.
pub fn init_depth_attention(store: &mut ParamStore, name: &str, unet_channels: usize, volume_channels: usize, rng: &mut Rng) {
    let a = volume_channels;
    store.he_normal(format!("{name}.q"), &[unet_channels, a], unet_channels, rng);
    store.he_normal(format!("{name}.k"), &[volume_channels, a], volume_channels, rng);
    store.he_normal(format!("{name}.v"), &[volume_channels, a], volume_channels, rng);
    store.zeros(format!("{name}.o"), &[a, unet_channels]);
}

/// Zero-initialized pointwise conv from `D·C_vol` to `unet_channels`.
pub fn init_flatten_depth(store: &mut ParamStore, name: &str, unet_channels: usize, cfg: &VolumeConfig) {
    store.conv_zero(name, cfg.depth_planes * cfg.volume_channels, unet_channels, &[1, 1]);
}

/// Shared two-layer conv encoder applied to each noisy view `[C, H, W]`, with
/// the timestep embedding `[1, time_dim]` added channel-wise after the first
/// layer.
pub fn extract_view_features(tape: &mut Tape, p: &Bound, views: &[Var], t_emb: Var) -> Result<Vec<Var>> {
    let temb = params::linear(tape, p, "extract.temb", t_emb)?;
    let mut out = Vec::with_capacity(views.len());
    for &x in views {
        let h = params::conv(tape, p, "extract.conv1", x)?;
        let h = tape.add_channel(h, temb)?;
        let h = tape.silu(h)?;
        out.push(params::conv(tape, p, "extract.conv2", h)?);
    }
    Ok(out)
}

/// Bilinear samples `[V³, C_2d]` of each view's features at the projections
/// of the cube vertices; zero where a vertex falls outside the image.
pub fn sample_vertex_features(tape: &mut Tape, features: &[Var], geo: &ViewGeometry) -> Result<Vec<Var>> {
    if features.len() != geo.views() {
        return Err(ModelError::Shape(format!(
            "{} feature maps for {} views",
            features.len(),
            geo.views()
        )));
    }
    features
        .iter()
        .enumerate()
        .map(|(n, &f)| Ok(tape.grid_sample(f, geo.vertex_plan(n))?))
        .collect()
}

/// Concatenate per-view vertex samples in `order` into `[N·C_2d, V, V, V]`.
pub fn concat_vertex_samples(tape: &mut Tape, samples: &[Var], order: &[usize], vertices: usize) -> Result<Var> {
    let parts: Vec<Var> = order.iter().map(|&i| samples[i]).collect();
    let cat = tape.concat(&parts, 1)?;
    let channels = tape.shape(cat)[1];
    let t = tape.transpose(cat)?;
    Ok(tape.reshape(t, &[channels, vertices, vertices, vertices])?)
}

/// Volume features before the 3D CNN, concatenated in the listed view order.
pub fn pre_cnn_volume(tape: &mut Tape, features: &[Var], geo: &ViewGeometry) -> Result<Var> {
    let samples = sample_vertex_features(tape, features, geo)?;
    let order: Vec<usize> = (0..samples.len()).collect();
    concat_vertex_samples(tape, &samples, &order, geo.vertices())
}

/// Spatial feature volume shared by every view within one denoising step.
#[derive(Clone, Copy, Debug)]
pub struct SpatialVolume {
    /// `[C_vol, V, V, V]`.
    pub features: Var,
    pub vertices: usize,
}

/// Project the vertices into every view, concatenate the sampled features in
/// canonical view order and run the 3D CNN.
pub fn build_spatial_volume(tape: &mut Tape, p: &Bound, features: &[Var], geo: &ViewGeometry, groups: usize) -> Result<SpatialVolume> {
    let samples = sample_vertex_features(tape, features, geo)?;
    let raw = concat_vertex_samples(tape, &samples, geo.order(), geo.vertices())?;
    let h = params::conv(tape, p, "volume.conv1", raw)?;
    let h = params::norm_act(tape, p, "volume.norm1", h, groups)?;
    let h = params::conv(tape, p, "volume.conv2", h)?;
    let h = params::norm_act(tape, p, "volume.norm2", h, groups)?;
    let features = params::conv(tape, p, "volume.conv3", h)?;
    Ok(SpatialVolume {
        features,
        vertices: geo.vertices(),
    })
}

/// Pixel-aligned resampling of the spatial volume along one view's rays.
#[derive(Clone, Copy, Debug)]
pub struct FrustumVolume {
    /// `[H′·W′·D, C_vol]`.
    pub features: Var,
    pub height: usize,
    pub width: usize,
    pub depth: usize,
}

pub fn gather_frustum(tape: &mut Tape, volume: &SpatialVolume, geo: &ViewGeometry, level: usize, view: usize) -> Result<FrustumVolume> {
    if level >= geo.levels() {
        return Err(ModelError::Config(format!("no frustum plans for level {level}")));
    }
    let features = tape.grid_sample(volume.features, geo.frustum_plan(level, view))?;
    let size = geo.image_size() >> level;
    Ok(FrustumVolume {
        features,
        height: size,
        width: size,
        depth: geo.depth(),
    })
}

/// Sinusoidal encoding `[D, C]` of the depth-plane index.
pub fn depth_encoding(depth: usize, channels: usize) -> Tensor {
    let mut data = vec![0.0; depth * channels];
    for d in 0..depth {
        for i in 0..channels {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / channels as f64);
            let a = d as f64 * freq;
            data[d * channels + i] = if i % 2 == 0 { a.sin() } else { a.cos() } as Real;
        }
    }
    Tensor::new(&[depth, channels], data).expect("positive extents")
}

fn check_spatial(tape: &Tape, unet: Var, frustum: &FrustumVolume) -> Result<(usize, usize)> {
    let s = tape.shape(unet);
    if s.len() != 3 || s[1] != frustum.height || s[2] != frustum.width {
        return Err(ModelError::Shape(format!(
            "UNet features {s:?} do not match a {}×{} frustum",
            frustum.height, frustum.width
        )));
    }
    Ok((s[0], frustum.height * frustum.width))
}

/// Residual and per-pixel attention weights `[P, 1, D]` of one depth-wise
/// attention layer.
#[derive(Clone, Copy, Debug)]
pub struct DepthAttention {
    pub residual: Var,
    pub weights: Var,
}

/// Each pixel's UNet feature attends over the `D` frustum entries on its own
/// ray. Single head of width `C_vol`; the result is projected back to the
/// UNet width and returned as an additive residual `[C_u, H′, W′]`.
pub fn depth_attention(tape: &mut Tape, p: &Bound, name: &str, unet: Var, frustum: &FrustumVolume) -> Result<DepthAttention> {
    let (c_u, pixels) = check_spatial(tape, unet, frustum)?;
    let d = frustum.depth;
    let wq = p.get(&format!("{name}.q"))?;
    let wk = p.get(&format!("{name}.k"))?;
    let wv = p.get(&format!("{name}.v"))?;
    let wo = p.get(&format!("{name}.o"))?;
    let width = tape.shape(wq)[1];
    let c_vol = tape.shape(frustum.features)[1];

    let flat = tape.reshape(unet, &[c_u, pixels])?;
    let flat = tape.transpose(flat)?;
    let q = tape.matmul(flat, wq)?;
    let q = tape.reshape(q, &[pixels, 1, width])?;

    let pe = depth_encoding(d, c_vol);
    let mut tiled = Vec::with_capacity(pixels * d * c_vol);
    for _ in 0..pixels {
        tiled.extend_from_slice(pe.data());
    }
    let pe = tape.constant(Tensor::new(&[pixels * d, c_vol], tiled)?);
    let kv = tape.add(frustum.features, pe)?;
    let k = tape.matmul(kv, wk)?;
    let k = tape.reshape(k, &[pixels, d, width])?;
    let v = tape.matmul(kv, wv)?;
    let v = tape.reshape(v, &[pixels, d, width])?;

    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (width as Real).sqrt())?;
    let weights = tape.softmax(scores, 2)?;
    let attended = tape.bmm(weights, v, false)?;
    let attended = tape.reshape(attended, &[pixels, width])?;
    let out = tape.matmul(attended, wo)?;
    let out = tape.transpose(out)?;
    let residual = tape.reshape(out, &[c_u, frustum.height, frustum.width])?;
    Ok(DepthAttention { residual, weights })
}

/// Ablation: fold depth into channels and map the frustum to the UNet width
/// with a pointwise 2D conv, returned as a residual.
pub fn flatten_depth_variant(tape: &mut Tape, p: &Bound, name: &str, unet: Var, frustum: &FrustumVolume) -> Result<Var> {
    let (_, pixels) = check_spatial(tape, unet, frustum)?;
    let c_vol = tape.shape(frustum.features)[1];
    let folded = tape.reshape(frustum.features, &[pixels, frustum.depth * c_vol])?;
    let folded = tape.transpose(folded)?;
    let folded = tape.reshape(folded, &[frustum.depth * c_vol, frustum.height, frustum.width])?;
    Ok(params::conv(tape, p, name, folded)?)
}
