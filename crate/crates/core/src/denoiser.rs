//! The shared UNet noise predictor. One parameter set serves every target
//! view; each view's pass is conditioned on the input image, the timestep,
//! its viewpoint difference and frustum features from the shared volume.

use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, ViewDelta, ViewRing};
use crate::params::{self, Bound, ParamStore};
use crate::scheduler::{Conditioning, NoisePredictor, SchedulerError};
use crate::tensor::{Real, Rng, Tape, Tensor, TensorError, Var};
use crate::volume::{self, FrustumVolume, ViewGeometry, VolumeConfig};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("timestep {t} outside 1..={max}")]
    Timestep { t: usize, max: usize },
    #[error("parameter set does not match the configuration: {0}")]
    Params(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Which frustum path feeds the UNet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Depth-wise attention over the frustum volume.
    Attention,
    /// Depth folded into channels and mapped by a 2D conv.
    FlattenDepth,
    /// No volume path; views are denoised independently.
    None,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Attention, Ablation::FlattenDepth, Ablation::None];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Attention => "attention",
            Ablation::FlattenDepth => "flatten-depth",
            Ablation::None => "none",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown ablation {s:?}; expected attention, flatten-depth or none"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Height and width of every view.
    pub image_size: usize,
    pub channels: usize,
    pub base_width: usize,
    /// Width multiplier per resolution level; level `l` runs at `size / 2^l`.
    pub channel_mults: Vec<usize>,
    pub res_blocks: usize,
    /// Levels at which the frustum path is added (encoder and decoder side).
    pub attention_levels: Vec<usize>,
    pub time_dim: usize,
    pub norm_groups: usize,
    /// Number of diffusion steps `T`; bounds the accepted timesteps.
    pub timesteps: usize,
    pub ablation: Ablation,
    pub volume: VolumeConfig,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DenoiserConfig {
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            base_width: 32,
            channel_mults: vec![1, 2, 2],
            res_blocks: 2,
            attention_levels: vec![0, 1, 2],
            time_dim: 128,
            norm_groups: 8,
            timesteps: 100,
            ablation: Ablation::Attention,
            volume: VolumeConfig::desk(),
        }
    }

    /// Small enough for finite-difference checks of the whole graph.
    pub fn tiny() -> Self {
        Self {
            image_size: 16,
            channels: 3,
            base_width: 4,
            channel_mults: vec![1, 2],
            res_blocks: 1,
            attention_levels: vec![0, 1],
            time_dim: 8,
            norm_groups: 2,
            timesteps: 100,
            ablation: Ablation::Attention,
            volume: VolumeConfig {
                views: 2,
                vertices: 4,
                depth_planes: 4,
                feature_channels: 2,
                volume_channels: 4,
            },
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_width * self.channel_mults[level]
    }

    pub fn uses_volume(&self) -> bool {
        self.ablation != Ablation::None
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        let levels = self.levels();
        if levels == 0 {
            return bad("at least one resolution level is required".into());
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(1 << (levels - 1)) {
            return bad(format!("image size {} is not divisible by 2^{}", self.image_size, levels - 1));
        }
        if self.channels == 0 || self.res_blocks == 0 || self.base_width == 0 || self.timesteps == 0 {
            return bad("channels, base width, res blocks and timesteps must be positive".into());
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return bad(format!("time_dim {} must be even", self.time_dim));
        }
        if self.norm_groups == 0 {
            return bad("norm_groups must be positive".into());
        }
        for l in 0..levels {
            let c = self.level_channels(l);
            if c == 0 || !c.is_multiple_of(self.norm_groups) {
                return bad(format!("level {l} width {c} is not divisible by {} groups", self.norm_groups));
            }
        }
        let mut seen = vec![false; levels];
        for &l in &self.attention_levels {
            if l >= levels || seen[l] {
                return bad(format!("attention levels {:?} must be distinct levels below {levels}", self.attention_levels));
            }
            seen[l] = true;
        }
        if self.uses_volume() {
            let v = &self.volume;
            if v.views == 0 || v.vertices < 2 || v.depth_planes < 2 || v.feature_channels == 0 {
                return bad(format!("invalid volume settings {v:?}"));
            }
            if v.volume_channels == 0 || !v.volume_channels.is_multiple_of(self.norm_groups) {
                return bad(format!(
                    "volume channels {} are not divisible by {} groups",
                    v.volume_channels, self.norm_groups
                ));
            }
        }
        Ok(())
    }
}

fn res_name(side: &str, level: usize, block: usize) -> String {
    format!("unet.{side}{level}.res{block}")
}

fn path_name(side: &str, level: usize, ablation: Ablation) -> String {
    match ablation {
        Ablation::FlattenDepth => format!("unet.{side}{level}.flat"),
        _ => format!("unet.{side}{level}.attn"),
    }
}

fn init_res_block(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, time_dim: usize, rng: &mut Rng) {
    store.group_norm(&format!("{name}.norm1"), c_in);
    store.conv(&format!("{name}.conv1"), c_in, c_out, &[3, 3], rng);
    store.linear(&format!("{name}.emb"), time_dim, c_out, rng);
    store.group_norm(&format!("{name}.norm2"), c_out);
    store.conv(&format!("{name}.conv2"), c_out, c_out, &[3, 3], rng);
    if c_in != c_out {
        store.conv(&format!("{name}.skip"), c_in, c_out, &[1, 1], rng);
    }
}

/// Fresh parameters: He-normal convs and dense layers, zero output
/// projections on every frustum path and a zero final conv.
pub fn init_params(cfg: &DenoiserConfig, rng: &mut Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let mut s = ParamStore::new();
    let td = cfg.time_dim;
    s.linear("time.mlp1", td, td, rng);
    s.linear("time.mlp2", td, td, rng);
    s.linear("dv.mlp1", 3, td, rng);
    s.linear("dv.mlp2", td, td, rng);
    if cfg.uses_volume() {
        volume::init_extractor(&mut s, &cfg.volume, cfg.channels, td, rng);
        volume::init_volume_cnn(&mut s, &cfg.volume, rng);
    }
    let path = |s: &mut ParamStore, side: &str, level: usize, c: usize, rng: &mut Rng| {
        if !cfg.attention_levels.contains(&level) {
            return;
        }
        let name = path_name(side, level, cfg.ablation);
        match cfg.ablation {
            Ablation::Attention => volume::init_depth_attention(s, &name, c, cfg.volume.volume_channels, rng),
            Ablation::FlattenDepth => volume::init_flatten_depth(s, &name, c, &cfg.volume),
            Ablation::None => {}
        }
    };

    s.conv("unet.conv_in", 2 * cfg.channels, cfg.level_channels(0), &[3, 3], rng);
    let mut c = cfg.level_channels(0);
    for l in 0..cfg.levels() {
        let cl = cfg.level_channels(l);
        for b in 0..cfg.res_blocks {
            init_res_block(&mut s, &res_name("down", l, b), c, cl, td, rng);
            c = cl;
        }
        path(&mut s, "down", l, cl, rng);
    }
    init_res_block(&mut s, "unet.mid.res0", c, c, td, rng);
    for l in (0..cfg.levels()).rev() {
        let cl = cfg.level_channels(l);
        for b in 0..cfg.res_blocks {
            let c_in = if b == 0 { c + cl } else { cl };
            init_res_block(&mut s, &res_name("up", l, b), c_in, cl, td, rng);
        }
        c = cl;
        path(&mut s, "up", l, cl, rng);
    }
    s.group_norm("unet.out_norm", c);
    s.conv_zero("unet.conv_out", c, cfg.channels, &[3, 3]);
    Ok(s)
}

/// Sinusoidal features of `t` at log-spaced frequencies, `[1, dim]`.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        data[i] = (t * freq).sin() as Real;
        data[half + i] = (t * freq).cos() as Real;
    }
    Tensor::new(&[1, dim], data).expect("positive extents")
}

/// Timestep embedding `[1, time_dim]`: sinusoidal features and a two-layer MLP.
pub fn time_embed(tape: &mut Tape, p: &Bound, cfg: &DenoiserConfig, t: usize) -> Result<Var> {
    if t == 0 || t > cfg.timesteps {
        return Err(ModelError::Timestep { t, max: cfg.timesteps });
    }
    let x = tape.constant(sinusoidal_embedding(t as f64, cfg.time_dim));
    let h = params::linear(tape, p, "time.mlp1", x)?;
    let h = tape.silu(h)?;
    Ok(params::linear(tape, p, "time.mlp2", h)?)
}

/// Viewpoint-difference embedding `[1, time_dim]` from
/// `(Δelevation, sin Δazimuth, cos Δazimuth)`.
pub fn dv_embed(tape: &mut Tape, p: &Bound, delta: &ViewDelta) -> Result<Var> {
    let a = delta.as_array();
    let x = tape.constant(Tensor::new(&[1, 3], a.iter().map(|&v| v as Real).collect())?);
    dv_embed_var(tape, p, x)
}

/// [`dv_embed`] on an arbitrary `[1, 3]` input variable.
pub fn dv_embed_var(tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
    let h = params::linear(tape, p, "dv.mlp1", x)?;
    let h = tape.silu(h)?;
    Ok(params::linear(tape, p, "dv.mlp2", h)?)
}

fn res_block(tape: &mut Tape, p: &Bound, name: &str, x: Var, cond: Var, groups: usize) -> Result<Var> {
    let h = params::norm_act(tape, p, &format!("{name}.norm1"), x, groups)?;
    let h = params::conv(tape, p, &format!("{name}.conv1"), h)?;
    let e = params::linear(tape, p, &format!("{name}.emb"), cond)?;
    let h = tape.add_channel(h, e)?;
    let h = params::norm_act(tape, p, &format!("{name}.norm2"), h, groups)?;
    let h = params::conv(tape, p, &format!("{name}.conv2"), h)?;
    let skip_name = format!("{name}.skip");
    let skip = if p.get(&format!("{skip_name}.w")).is_ok() {
        params::conv(tape, p, &skip_name, x)?
    } else {
        x
    };
    Ok(tape.add(h, skip)?)
}

fn frustum_residual(
    tape: &mut Tape,
    p: &Bound,
    cfg: &DenoiserConfig,
    side: &str,
    level: usize,
    h: Var,
    frustums: &[Option<FrustumVolume>],
) -> Result<Var> {
    let Some(fr) = frustums.get(level).copied().flatten() else {
        return Ok(h);
    };
    let name = path_name(side, level, cfg.ablation);
    let r = match cfg.ablation {
        Ablation::Attention => volume::depth_attention(tape, p, &name, h, &fr)?.residual,
        Ablation::FlattenDepth => volume::flatten_depth_variant(tape, p, &name, h, &fr)?,
        Ablation::None => return Ok(h),
    };
    Ok(tape.add(h, r)?)
}

/// One view's UNet pass on `[x_t; y]`. `cond` is `t_emb + dv_emb` and
/// `frustums[level]` the frustum volume used at that level, if any.
pub fn predict_view(
    tape: &mut Tape,
    p: &Bound,
    cfg: &DenoiserConfig,
    x: Var,
    y: Var,
    cond: Var,
    frustums: &[Option<FrustumVolume>],
) -> Result<Var> {
    let expect = [cfg.channels, cfg.image_size, cfg.image_size];
    for (what, v) in [("noisy view", x), ("input view", y)] {
        if tape.shape(v) != expect {
            return Err(ModelError::Shape(format!("{what} is {:?}, expected {expect:?}", tape.shape(v))));
        }
    }
    let g = cfg.norm_groups;
    let cond = tape.silu(cond)?;
    let xy = tape.concat(&[x, y], 0)?;
    let mut h = params::conv(tape, p, "unet.conv_in", xy)?;
    let mut skips = Vec::with_capacity(cfg.levels());
    for l in 0..cfg.levels() {
        for b in 0..cfg.res_blocks {
            h = res_block(tape, p, &res_name("down", l, b), h, cond, g)?;
        }
        h = frustum_residual(tape, p, cfg, "down", l, h, frustums)?;
        skips.push(h);
        if l + 1 < cfg.levels() {
            h = tape.avg_pool2(h)?;
        }
    }
    h = res_block(tape, p, "unet.mid.res0", h, cond, g)?;
    for l in (0..cfg.levels()).rev() {
        if l + 1 < cfg.levels() {
            h = tape.upsample2(h)?;
        }
        h = tape.concat(&[h, skips[l]], 0)?;
        for b in 0..cfg.res_blocks {
            h = res_block(tape, p, &res_name("up", l, b), h, cond, g)?;
        }
        h = frustum_residual(tape, p, cfg, "up", l, h, frustums)?;
    }
    let h = params::norm_act(tape, p, "unet.out_norm", h, g)?;
    Ok(params::conv(tape, p, "unet.conv_out", h)?)
}

/// Noise predictions for the views listed in `targets`, all conditioned on
/// the full joint state `views` (one `[C, H, W]` variable per ring slot). The
/// spatial volume is built once and shared by every target.
#[allow(clippy::too_many_arguments)]
pub fn synchronized_predict(
    tape: &mut Tape,
    p: &Bound,
    cfg: &DenoiserConfig,
    views: &[Var],
    y: Var,
    t: usize,
    ring: &ViewRing,
    geo: Option<&ViewGeometry>,
    targets: &[usize],
) -> Result<Vec<Var>> {
    if views.len() != ring.len() {
        return Err(ModelError::Shape(format!("{} views for a ring of {}", views.len(), ring.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&n| n >= views.len()) {
        return Err(ModelError::Shape(format!("target view {bad} out of {}", views.len())));
    }
    let t_emb = time_embed(tape, p, cfg, t)?;
    let volume = if cfg.uses_volume() {
        if views.len() != cfg.volume.views {
            return Err(ModelError::Config(format!(
                "model expects {} views, got {}",
                cfg.volume.views,
                views.len()
            )));
        }
        let geo = geo.ok_or_else(|| ModelError::Config("volume path needs view geometry".into()))?;
        if !geo.matches(ring) {
            return Err(ModelError::Config("view geometry was built for a different ring".into()));
        }
        let features = volume::extract_view_features(tape, p, views, t_emb)?;
        Some((volume::build_spatial_volume(tape, p, &features, geo, cfg.norm_groups)?, geo))
    } else {
        None
    };
    let deltas = ring.deltas();
    let mut out = Vec::with_capacity(targets.len());
    for &n in targets {
        let mut frustums = vec![None; cfg.levels()];
        if let Some((vol, geo)) = &volume {
            for &l in &cfg.attention_levels {
                frustums[l] = Some(volume::gather_frustum(tape, vol, geo, l, n)?);
            }
        }
        let dv = dv_embed(tape, p, &deltas[n])?;
        let cond = tape.add(t_emb, dv)?;
        out.push(predict_view(tape, p, cfg, views[n], y, cond, &frustums)?);
    }
    Ok(out)
}

/// A configuration together with its parameters; implements
/// [`NoisePredictor`] over joint `[N, C, H, W]` states.
#[derive(Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: ParamStore,
    geometry: Mutex<Option<Arc<ViewGeometry>>>,
}

impl Clone for Denoiser {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            geometry: Mutex::new(self.geometry.lock().unwrap().clone()),
        }
    }
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        let params = init_params(&config, rng)?;
        Ok(Self {
            config,
            params,
            geometry: Mutex::new(None),
        })
    }

    /// Wrap existing parameters after checking names and shapes against the
    /// configuration.
    pub fn from_params(config: DenoiserConfig, params: ParamStore) -> Result<Self> {
        let template = init_params(&config, &mut Rng::new(0))?;
        let expected: Vec<(&str, &[usize])> = template.iter().map(|(k, v)| (k, v.shape())).collect();
        let got: Vec<(&str, &[usize])> = params.iter().map(|(k, v)| (k, v.shape())).collect();
        if expected != got {
            let missing = template.names().find(|n| params.get(n).is_none());
            let extra = params.names().find(|n| template.get(n).is_none());
            return Err(ModelError::Params(match (missing, extra) {
                (Some(m), _) => format!("missing {m}"),
                (None, Some(e)) => format!("unexpected {e}"),
                _ => "tensor shapes differ".into(),
            }));
        }
        Ok(Self {
            config,
            params,
            geometry: Mutex::new(None),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    /// Sample plans for `ring`, cached across calls with the same cameras.
    pub fn geometry(&self, ring: &ViewRing) -> Result<Option<Arc<ViewGeometry>>> {
        if !self.config.uses_volume() {
            return Ok(None);
        }
        let mut slot = self.geometry.lock().unwrap();
        if let Some(g) = slot.as_ref().filter(|g| g.matches(ring)) {
            return Ok(Some(g.clone()));
        }
        let c = &self.config;
        let g = Arc::new(ViewGeometry::new(
            ring,
            c.image_size,
            c.levels(),
            c.volume.vertices,
            c.volume.depth_planes,
        )?);
        *slot = Some(g.clone());
        Ok(Some(g))
    }

    /// ε̂ for every view of `x_t` (`[N, C, H, W]`), without gradients.
    pub fn predict_all(&self, x_t: &Tensor, y: &Tensor, t: usize, ring: &ViewRing) -> Result<Tensor> {
        let s = x_t.shape();
        if s.len() != 4 {
            return Err(ModelError::Shape(format!("joint state must be [N, C, H, W], got {s:?}")));
        }
        let geo = self.geometry(ring)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let views: Vec<Var> = (0..s[0]).map(|n| tape.constant(x_t.index_axis0(n))).collect();
        let yv = tape.constant(y.clone());
        let targets: Vec<usize> = (0..s[0]).collect();
        let out = synchronized_predict(&mut tape, &p, &self.config, &views, yv, t, ring, geo.as_deref(), &targets)?;
        let parts: Vec<Tensor> = out.iter().map(|&v| tape.value(v).clone()).collect();
        Ok(Tensor::stack(&parts)?)
    }
}

impl NoisePredictor for Denoiser {
    fn predict(&self, x_t: &Tensor, t: usize, cond: &Conditioning<'_>) -> Result<Tensor, SchedulerError> {
        let missing = || SchedulerError::Predictor(Box::new(ModelError::Config("denoiser needs an input view and a ring".into())));
        let y = cond.input.ok_or_else(missing)?;
        let ring = cond.ring.ok_or_else(missing)?;
        self.predict_all(x_t, y, t, ring).map_err(|e| SchedulerError::Predictor(Box::new(e)))
    }
}
