//! Procedural voxel objects, a DDA ray-marching renderer and the multiview
//! dataset file.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Camera, GeometryError, RingSpec, SphericalPose};
use crate::tensor::{Real, Rng, Tensor};

pub const DATASET_MAGIC: &[u8; 8] = b"SYNCDS01";
pub const DATASET_VERSION: u32 = 1;
const HEADER_BYTES: usize = 8 + 4 * 5 + 8 * 3;

/// Direction towards the light.
pub const LIGHT_DIR: [f64; 3] = [0.4, -0.3, 0.866];

/// Input-view elevation range in degrees.
pub const INPUT_ELEVATION_DEG: (f64, f64) = (-10.0, 40.0);

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    Version(u32),
    #[error("dataset file is truncated or has trailing bytes: expected {expected} bytes, found {found}")]
    Length { expected: usize, found: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// Occupancy and per-voxel albedo over a `G³` grid filling `[−0.5, 0.5]³`.
/// Voxel `(i, j, k)` spans `x ∈ [−0.5 + i/G, −0.5 + (i+1)/G]` and likewise
/// for `y`/`j` and `z`/`k`; storage is `k`-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelObject {
    grid: usize,
    occupancy: Vec<bool>,
    albedo: Vec<[f32; 3]>,
}

impl VoxelObject {
    pub fn new(grid: usize, occupancy: Vec<bool>, albedo: Vec<[f32; 3]>) -> Result<Self> {
        let n = grid * grid * grid;
        if grid == 0 || occupancy.len() != n || albedo.len() != n {
            return Err(DataError::Invalid(format!("grid {grid} needs {n} voxels")));
        }
        if !occupancy.iter().any(|&o| o) {
            return Err(DataError::Invalid("object has no occupied voxel".into()));
        }
        if albedo.iter().flatten().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(DataError::Invalid("albedo outside [0, 1]".into()));
        }
        Ok(Self { grid, occupancy, albedo })
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.grid + j) * self.grid + k
    }

    pub fn occupied(&self, i: usize, j: usize, k: usize) -> bool {
        self.occupancy[self.index(i, j, k)]
    }

    pub fn albedo(&self, i: usize, j: usize, k: usize) -> [f32; 3] {
        self.albedo[self.index(i, j, k)]
    }

    pub fn occupancy_fraction(&self) -> f64 {
        self.occupancy.iter().filter(|&&o| o).count() as f64 / self.occupancy.len() as f64
    }

    pub fn voxel_size(&self) -> f64 {
        1.0 / self.grid as f64
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Point3<f64> {
        let c = |a: usize| -0.5 + (a as f64 + 0.5) / self.grid as f64;
        Point3::new(c(i), c(j), c(k))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectParams {
    pub grid: usize,
    pub max_primitives: usize,
    /// Range of box half-extents, per axis.
    pub box_half: (f64, f64),
    pub sphere_radius: (f64, f64),
    /// Primitive centers are drawn from `[−c, c]³`.
    pub center_range: f64,
    pub albedo: (f64, f64),
}

impl Default for ObjectParams {
    fn default() -> Self {
        Self {
            grid: 12,
            max_primitives: 4,
            box_half: (0.15, 0.28),
            sphere_radius: (0.16, 0.3),
            center_range: 0.22,
            albedo: (0.1, 0.95),
        }
    }
}

/// Union of 1 to `max_primitives` random boxes and spheres, each with its own
/// flat albedo; later primitives paint over earlier ones. Redrawn until at
/// least one voxel is occupied.
pub fn random_object(rng: &mut Rng, params: &ObjectParams) -> VoxelObject {
    let g = params.grid;
    loop {
        let mut occupancy = vec![false; g * g * g];
        let mut albedo = vec![[0.0f32; 3]; g * g * g];
        let count = 1 + rng.below(params.max_primitives.max(1));
        for _ in 0..count {
            let is_box = rng.uniform() < 0.5;
            let center: [f64; 3] = std::array::from_fn(|_| rng.uniform_range(-params.center_range, params.center_range));
            let half: [f64; 3] = if is_box {
                std::array::from_fn(|_| rng.uniform_range(params.box_half.0, params.box_half.1))
            } else {
                [rng.uniform_range(params.sphere_radius.0, params.sphere_radius.1); 3]
            };
            let color: [f32; 3] = std::array::from_fn(|_| rng.uniform_range(params.albedo.0, params.albedo.1) as f32);
            for i in 0..g {
                for j in 0..g {
                    for k in 0..g {
                        let c = |a: usize| -0.5 + (a as f64 + 0.5) / g as f64;
                        let d = [c(i) - center[0], c(j) - center[1], c(k) - center[2]];
                        let inside = if is_box {
                            d.iter().zip(&half).all(|(x, h)| x.abs() <= *h)
                        } else {
                            d.iter().map(|x| x * x).sum::<f64>() <= half[0] * half[0]
                        };
                        if inside {
                            let idx = (i * g + j) * g + k;
                            occupancy[idx] = true;
                            albedo[idx] = color;
                        }
                    }
                }
            }
        }
        if occupancy.iter().any(|&o| o) {
            return VoxelObject { grid: g, occupancy, albedo };
        }
    }
}

/// One rendered view: `[3, H, W]` colors in `[0, 1]`, optical-axis depth
/// (`+∞` on a miss) and the hit mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Render {
    pub size: usize,
    pub image: Vec<f32>,
    pub depth: Vec<f32>,
    pub mask: Vec<u8>,
}

/// First voxel hit along a ray: distance, voxel index and entering-face normal.
fn march(obj: &VoxelObject, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<(f64, [usize; 3], Vector3<f64>)> {
    let g = obj.grid as f64;
    let (mut t_near, mut t_far) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut entry_axis = 0;
    for a in 0..3 {
        if dir[a].abs() < 1e-300 {
            if origin[a].abs() > 0.5 {
                return None;
            }
            continue;
        }
        let (t0, t1) = ((-0.5 - origin[a]) / dir[a], (0.5 - origin[a]) / dir[a]);
        let (lo, hi) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
        if lo > t_near {
            t_near = lo;
            entry_axis = a;
        }
        t_far = t_far.min(hi);
    }
    if t_near > t_far || t_far < 0.0 {
        return None;
    }
    let t_start = t_near.max(0.0);
    let p = origin + dir * t_start;
    let mut cell = [0i64; 3];
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        cell[a] = (((p[a] + 0.5) * g).floor() as i64).clamp(0, obj.grid as i64 - 1);
        if dir[a] > 0.0 {
            step[a] = 1;
            let boundary = -0.5 + (cell[a] + 1) as f64 / g;
            t_max[a] = (boundary - origin[a]) / dir[a];
            t_delta[a] = 1.0 / (g * dir[a]);
        } else if dir[a] < 0.0 {
            step[a] = -1;
            let boundary = -0.5 + cell[a] as f64 / g;
            t_max[a] = (boundary - origin[a]) / dir[a];
            t_delta[a] = -1.0 / (g * dir[a]);
        }
    }
    let mut normal = Vector3::zeros();
    normal[entry_axis] = -dir[entry_axis].signum();
    let mut t = t_start;
    loop {
        let idx = [cell[0] as usize, cell[1] as usize, cell[2] as usize];
        if obj.occupied(idx[0], idx[1], idx[2]) {
            return Some((t, idx, normal));
        }
        let a = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        t = t_max[a];
        cell[a] += step[a];
        if cell[a] < 0 || cell[a] >= obj.grid as i64 {
            return None;
        }
        t_max[a] += t_delta[a];
        normal = Vector3::zeros();
        normal[a] = -(step[a] as f64);
    }
}

/// Shade a hit: `albedo · (0.7 + 0.3 · max(0, n̂ · l̂))`.
pub fn shade(albedo: [f32; 3], normal: &Vector3<f64>) -> [f32; 3] {
    let l = Vector3::from(LIGHT_DIR).normalize();
    let k = 0.7 + 0.3 * normal.dot(&l).max(0.0);
    albedo.map(|a| (a as f64 * k) as f32)
}

/// Render a square view whose size is given by the camera intrinsics.
pub fn render(obj: &VoxelObject, camera: &Camera) -> Result<Render> {
    let center = camera.center();
    if center.coords.iter().all(|c| c.abs() <= 0.5) {
        return Err(GeometryError::InsideVolume(camera.pose.radius).into());
    }
    let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
    if w != h {
        return Err(DataError::Invalid(format!("renders are square, got {w}×{h}")));
    }
    let mut image = vec![1.0f32; 3 * w * h];
    let mut depth = vec![f32::INFINITY; w * h];
    let mut mask = vec![0u8; w * h];
    for r in 0..h {
        for c in 0..w {
            let dir = camera.ray_direction(c as f64 + 0.5, r as f64 + 0.5);
            if let Some((t, idx, n)) = march(obj, &center, &dir) {
                let hit = center + dir * t;
                let px = r * w + c;
                depth[px] = camera.project(&hit).depth as f32;
                mask[px] = 1;
                let col = shade(obj.albedo(idx[0], idx[1], idx[2]), &n);
                for ch in 0..3 {
                    image[ch * w * h + px] = col[ch];
                }
            }
        }
    }
    Ok(Render { size: w, image, depth, mask })
}

/// One object seen from the input camera and every ring camera.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Input camera elevation in radians (azimuth is 0).
    pub input_elevation: f64,
    pub input: Vec<f32>,
    pub targets: Vec<Vec<f32>>,
    pub depths: Vec<Vec<f32>>,
    pub masks: Vec<Vec<u8>>,
}

impl Sample {
    /// Target views as a joint `[N, 3, H, W]` state in `[−1, 1]`.
    pub fn targets_tensor(&self, size: usize) -> Tensor {
        let data = self.targets.iter().flatten().map(|&v| 2.0 * v as Real - 1.0).collect();
        Tensor::new(&[self.targets.len(), 3, size, size], data).expect("sample layout")
    }

    /// Input view as `[3, H, W]` in `[−1, 1]`.
    pub fn input_tensor(&self, size: usize) -> Tensor {
        let data = self.input.iter().map(|&v| 2.0 * v as Real - 1.0).collect();
        Tensor::new(&[3, size, size], data).expect("sample layout")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub count: usize,
    pub ring: RingSpec,
    pub grid: usize,
    pub seed: u64,
}

impl DatasetHeader {
    fn sample_bytes(&self) -> usize {
        let (n, hw) = (self.ring.views, self.ring.image_size * self.ring.image_size);
        8 + 4 * 3 * hw * (n + 1) + 4 * hw * n + hw * n
    }

    /// Exact size of the file this header describes.
    pub fn file_bytes(&self) -> usize {
        HEADER_BYTES + self.count * self.sample_bytes()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<Sample>,
}

/// Render `count` objects. Object `i` draws from its own stream of `seed`,
/// so the result does not depend on scheduling.
pub fn make_dataset(count: usize, seed: u64, ring: &RingSpec, params: &ObjectParams) -> Result<Dataset> {
    if count == 0 {
        return Err(DataError::Invalid("dataset needs at least one object".into()));
    }
    let base = ring.build(0.0)?;
    let samples = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = Rng::with_stream(seed, i as u64);
            let obj = random_object(&mut rng, params);
            let (lo, hi) = INPUT_ELEVATION_DEG;
            let elevation = rng.uniform_range(lo, hi).to_radians();
            let input_cam = Camera::new(
                SphericalPose::new(0.0, elevation, ring.radius)?,
                base.input.intrinsics,
            );
            let input = render(&obj, &input_cam)?.image;
            let (mut targets, mut depths, mut masks) = (Vec::new(), Vec::new(), Vec::new());
            for cam in &base.targets {
                let r = render(&obj, cam)?;
                targets.push(r.image);
                depths.push(r.depth);
                masks.push(r.mask);
            }
            Ok(Sample {
                input_elevation: elevation,
                input,
                targets,
                depths,
                masks,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        header: DatasetHeader {
            version: DATASET_VERSION,
            count,
            ring: *ring,
            grid: params.grid,
            seed,
        },
        samples,
    })
}

fn put_u32(w: &mut impl Write, v: usize) -> io::Result<()> {
    let v = u32::try_from(v).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "value exceeds u32"))?;
    w.write_all(&v.to_le_bytes())
}

fn put_f32s(w: &mut impl Write, vs: &[f32]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(vs.len() * 4);
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

impl Dataset {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let h = &self.header;
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&h.version.to_le_bytes())?;
        put_u32(w, h.count)?;
        put_u32(w, h.ring.views)?;
        put_u32(w, h.ring.image_size)?;
        put_u32(w, h.grid)?;
        w.write_all(&h.ring.elevation_deg.to_le_bytes())?;
        w.write_all(&h.ring.radius.to_le_bytes())?;
        w.write_all(&h.seed.to_le_bytes())?;
        for s in &self.samples {
            w.write_all(&s.input_elevation.to_le_bytes())?;
            put_f32s(w, &s.input)?;
            for t in &s.targets {
                put_f32s(w, t)?;
            }
            for d in &s.depths {
                put_f32s(w, d)?;
            }
            for m in &s.masks {
                w.write_all(m)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(DataError::Length {
                expected: HEADER_BYTES,
                found: bytes.len(),
            });
        }
        if &bytes[..8] != DATASET_MAGIC {
            return Err(DataError::BadMagic);
        }
        let mut pos = 8;
        let mut take = |n: usize| {
            let s = &bytes[pos..pos + n];
            pos += n;
            s
        };
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
        let f64_at = |s: &[u8]| f64::from_le_bytes(s.try_into().unwrap());
        let version = u32_at(take(4));
        if version != DATASET_VERSION {
            return Err(DataError::Version(version));
        }
        let count = u32_at(take(4)) as usize;
        let views = u32_at(take(4)) as usize;
        let image_size = u32_at(take(4)) as usize;
        let grid = u32_at(take(4)) as usize;
        let elevation_deg = f64_at(take(8));
        let radius = f64_at(take(8));
        let seed = u64::from_le_bytes(take(8).try_into().unwrap());
        let header = DatasetHeader {
            version,
            count,
            ring: RingSpec {
                views,
                elevation_deg,
                radius,
                image_size,
            },
            grid,
            seed,
        };
        let expected = header.file_bytes();
        if bytes.len() != expected {
            return Err(DataError::Length {
                expected,
                found: bytes.len(),
            });
        }
        let hw = image_size * image_size;
        let f32s = |s: &[u8]| -> Vec<f32> { s.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect() };
        let mut samples = Vec::with_capacity(count);
        let mut pos = HEADER_BYTES;
        let mut take = |n: usize| {
            let s = &bytes[pos..pos + n];
            pos += n;
            s
        };
        for _ in 0..count {
            let input_elevation = f64_at(take(8));
            let input = f32s(take(12 * hw));
            let targets = (0..views).map(|_| f32s(take(12 * hw))).collect();
            let depths = (0..views).map(|_| f32s(take(4 * hw))).collect();
            let masks = (0..views).map(|_| take(hw).to_vec()).collect();
            samples.push(Sample {
                input_elevation,
                input,
                targets,
                depths,
                masks,
            });
        }
        Ok(Self { header, samples })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
