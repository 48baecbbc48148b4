//! Training loop: per-object noise-prediction loss on one randomly chosen
//! view, batch averaging, global-norm clipping, Adam with a linearly annealed
//! learning rate, CSV logging and checkpoints that resume bit-exactly.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::{synchronized_predict, Denoiser, DenoiserConfig, ModelError};
use crate::geometry::{GeometryError, RingSpec};
use crate::params::ParamStore;
use crate::scheduler::{draw_training_example, NoiseSchedule, ScheduleSpec, SchedulerError};
use crate::synthdata::{DataError, Dataset, Sample};
use crate::tensor::{Real, Rng, RngState, Tape, Tensor, TensorError, Var};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SYNCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;
const EPOCH_STREAM: u64 = 1 << 32;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("non-finite value at step {step}, object {object}: {detail}")]
    NonFinite { step: usize, object: usize, detail: String },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match the requested configuration: {0}")]
    Mismatch(String),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Objects per step.
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 4,
            lr_start: 5e-4,
            lr_end: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            seed: 0,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("steps and batch size must be positive".into()));
        }
        if !(self.lr_start >= self.lr_end && self.lr_end > 0.0) {
            return Err(TrainError::Config(format!(
                "need lr_start ≥ lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 || self.clip_norm <= 0.0 {
            return Err(TrainError::Config("invalid optimizer constants".into()));
        }
        Ok(())
    }

    /// Linear anneal from `lr_start` at step 0 to `lr_end` at the last step.
    pub fn lr(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.lr_start;
        }
        let f = step.min(self.steps - 1) as f64 / (self.steps - 1) as f64;
        self.lr_start + (self.lr_end - self.lr_start) * f
    }
}

/// Adam moments, keyed like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || {
            let mut s = ParamStore::new();
            for (k, t) in params.iter() {
                s.insert(k, Tensor::zeros(t.shape()));
            }
            s
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("gradient for every parameter");
            let m = self.m.get_mut(name).expect("moment for every parameter");
            let v = self.v.get_mut(name).expect("moment for every parameter");
            let (pd, gd) = (p.data_mut(), g.data());
            for (((pi, &gi), mi), vi) in pd.iter_mut().zip(gd).zip(m.data_mut()).zip(v.data_mut()) {
                let gi = gi as f64;
                let mn = b1 * *mi as f64 + (1.0 - b1) * gi;
                let vn = b2 * *vi as f64 + (1.0 - b2) * gi * gi;
                *mi = mn as Real;
                *vi = vn as Real;
                let step = lr * (mn / c1) / ((vn / c2).sqrt() + cfg.eps);
                *pi = (*pi as f64 - step) as Real;
            }
        }
    }
}

/// Scale `grads` in place so that their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|(_, g)| g.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as Real;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Training loss of one object on `tape`, returned as a scalar variable.
pub fn object_loss(
    model: &Denoiser,
    tape: &mut Tape,
    p: &crate::params::Bound,
    sample: &Sample,
    ring: &RingSpec,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Var> {
    let views = ring.build(sample.input_elevation)?;
    let geo = model.geometry(&views)?;
    let x0 = sample.targets_tensor(ring.image_size);
    let draw = draw_training_example(&x0, sched, rng)?;
    let vars: Vec<Var> = (0..views.len()).map(|n| tape.constant(draw.x_t.index_axis0(n))).collect();
    let y = tape.constant(sample.input_tensor(ring.image_size));
    let out = synchronized_predict(tape, p, model.config(), &vars, y, draw.t, &views, geo.as_deref(), &[draw.view])?;
    let target = tape.constant(draw.eps.index_axis0(draw.view));
    Ok(tape.mse(out[0], target).map_err(ModelError::from)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// One optimization step on `batch`: mean loss over objects, backward,
/// clipping and an Adam update at `lr`.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Denoiser,
    opt: &mut Adam,
    batch: &[&Sample],
    ring: &RingSpec,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut Rng,
    step: usize,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    let mut grads = ParamStore::new();
    for (k, t) in model.params().iter() {
        grads.insert(k, Tensor::zeros(t.shape()));
    }
    let scale = 1.0 / batch.len() as Real;
    let mut total = 0.0;
    let non_finite = |object: usize, detail: String| TrainError::NonFinite { step, object, detail };
    for (i, sample) in batch.iter().enumerate() {
        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape, true);
        let loss = match object_loss(model, &mut tape, &p, sample, ring, sched, rng) {
            Err(TrainError::Model(ModelError::Tensor(TensorError::NonFinite(op)))) => {
                return Err(non_finite(i, format!("forward pass produced a non-finite value in {op}")))
            }
            other => other?,
        };
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(non_finite(i, format!("loss is {value}")));
        }
        total += value;
        let names: Vec<(String, Var)> = p.iter().map(|(k, v)| (k.to_string(), v)).collect();
        let mut g = tape.backward(loss).map_err(|e| non_finite(i, e.to_string()))?;
        for (name, var) in names {
            if let Some(gv) = g.take(var) {
                grads.get_mut(&name).expect("same names").axpy(scale, &gv).map_err(ModelError::from)?;
            }
        }
    }
    let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
    if !grad_norm.is_finite() {
        return Err(non_finite(0, format!("gradient norm is {grad_norm}")));
    }
    opt.update(model.params_mut(), &grads, lr, cfg);
    Ok(StepStats {
        loss: total / batch.len() as f64,
        grad_norm,
        lr,
    })
}

/// Object indices used at `step`: consecutive slices of per-epoch seeded
/// permutations.
pub fn batch_indices(cfg: &TrainConfig, count: usize, step: usize) -> Vec<usize> {
    let mut cache: Option<(usize, Vec<usize>)> = None;
    (0..cfg.batch_size)
        .map(|b| {
            let i = step * cfg.batch_size + b;
            let (epoch, pos) = (i / count, i % count);
            if cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..count).collect();
                Rng::with_stream(cfg.seed, EPOCH_STREAM + epoch as u64).shuffle(&mut perm);
                cache = Some((epoch, perm));
            }
            cache.as_ref().unwrap().1[pos]
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: DenoiserConfig,
    pub schedule: ScheduleSpec,
    pub ring: RingSpec,
    pub train: TrainConfig,
    /// Number of completed steps.
    pub step: usize,
    pub rng: RngState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore,
    pub adam: Adam,
}

fn write_store(w: &mut impl Write, store: &ParamStore) -> io::Result<()> {
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 8);
        for &v in t.data() {
            buf.extend_from_slice(&(v as f64).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| TrainError::Corrupt("file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn store(&mut self) -> Result<ParamStore> {
        let count = self.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = self.u32()? as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| TrainError::Corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = self.u32()? as usize;
            let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = self
                .take(n.checked_mul(8).ok_or_else(|| TrainError::Corrupt("tensor too large".into()))?)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Real)
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| TrainError::Corrupt(format!("tensor {name}: {e}")))?;
            if store.get(&name).is_some() {
                return Err(TrainError::Corrupt(format!("duplicate tensor {name}")));
            }
            store.insert(name, t);
        }
        Ok(store)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header).map_err(|e| TrainError::Corrupt(e.to_string()))?;
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        write_store(&mut out, &self.params)?;
        out.extend_from_slice(&self.adam.step.to_le_bytes());
        write_store(&mut out, &self.adam.m)?;
        write_store(&mut out, &self.adam.v)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(8).map_err(|_| TrainError::BadMagic)? != CHECKPOINT_MAGIC {
            return Err(TrainError::BadMagic);
        }
        let version = c.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Version(version));
        }
        let len = c.u32()? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(c.take(len)?).map_err(|e| TrainError::Corrupt(format!("header: {e}")))?;
        let params = c.store()?;
        let step = u64::from_le_bytes(c.take(8)?.try_into().unwrap());
        let m = c.store()?;
        let v = c.store()?;
        if c.pos != bytes.len() {
            return Err(TrainError::Corrupt("trailing bytes".into()));
        }
        let names = |s: &ParamStore| s.names().map(String::from).collect::<Vec<_>>();
        if names(&params) != names(&m) || names(&params) != names(&v) {
            return Err(TrainError::Corrupt("optimizer moments do not match the parameters".into()));
        }
        Ok(Self {
            header,
            params,
            adam: Adam { step, m, v },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Load and, if `expected` is given, require the stored model
    /// configuration to equal it.
    pub fn load(path: &Path, expected: Option<&DenoiserConfig>) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        let ck = Self::from_bytes(&bytes)?;
        if let Some(cfg) = expected {
            if *cfg != ck.header.model {
                let what = if cfg.ablation != ck.header.model.ablation {
                    format!("checkpoint ablation is {}, requested {}", ck.header.model.ablation, cfg.ablation)
                } else {
                    "model settings differ".to_string()
                };
                return Err(TrainError::Mismatch(what));
            }
        }
        Ok(ck)
    }

    pub fn denoiser(&self) -> Result<Denoiser> {
        Ok(Denoiser::from_params(self.header.model.clone(), self.params.clone())?)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(self.header.schedule.build()?)
    }
}

/// Where a run writes its outputs.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.bin")
    }

    pub fn step_checkpoint(&self, step: usize) -> PathBuf {
        self.dir.join(format!("checkpoint_{step:06}.bin"))
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }
}

pub const LOG_HEADER: &str = "step,loss,lr,grad_norm";

/// Everything needed to start or continue a run.
pub struct Trainer {
    pub model: Denoiser,
    pub opt: Adam,
    pub rng: Rng,
    pub step: usize,
    pub config: TrainConfig,
    pub schedule: ScheduleSpec,
    pub ring: RingSpec,
}

impl Trainer {
    pub fn new(model_cfg: DenoiserConfig, config: TrainConfig, schedule: ScheduleSpec, ring: RingSpec) -> Result<Self> {
        config.validate()?;
        if model_cfg.timesteps != schedule.steps {
            return Err(TrainError::Config(format!(
                "model accepts {} timesteps, schedule has {}",
                model_cfg.timesteps, schedule.steps
            )));
        }
        if model_cfg.image_size != ring.image_size {
            return Err(TrainError::Config("model and ring image sizes differ".into()));
        }
        let model = Denoiser::new(model_cfg, &mut Rng::with_stream(config.seed, 0))?;
        let opt = Adam::new(model.params());
        Ok(Self {
            model,
            opt,
            rng: Rng::with_stream(config.seed, 1),
            step: 0,
            config,
            schedule,
            ring,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.header.train.validate()?;
        Ok(Self {
            model: ck.denoiser()?,
            opt: ck.adam,
            rng: Rng::from_state(ck.header.rng),
            step: ck.header.step,
            config: ck.header.train,
            schedule: ck.header.schedule,
            ring: ck.header.ring,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                model: self.model.config().clone(),
                schedule: self.schedule,
                ring: self.ring,
                train: self.config.clone(),
                step: self.step,
                rng: self.rng.state(),
            },
            params: self.model.params().clone(),
            adam: self.opt.clone(),
        }
    }

    /// Run one step on the dataset's next batch.
    pub fn step(&mut self, data: &Dataset, sched: &NoiseSchedule) -> Result<StepStats> {
        let idx = batch_indices(&self.config, data.len(), self.step);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &data.samples[i]).collect();
        let lr = self.config.lr(self.step);
        let stats = train_step(
            &mut self.model,
            &mut self.opt,
            &batch,
            &self.ring,
            sched,
            &self.config,
            lr,
            &mut self.rng,
            self.step,
        )?;
        self.step += 1;
        Ok(stats)
    }

    /// Train until `config.steps`, appending to the CSV log in `paths` and
    /// writing checkpoints every `checkpoint_every` steps and at the end.
    pub fn run(&mut self, data: &Dataset, paths: &RunPaths, mut on_step: impl FnMut(usize, &StepStats)) -> Result<Checkpoint> {
        if data.header.ring != self.ring {
            return Err(TrainError::Config(format!(
                "dataset ring {:?} does not match the configured ring {:?}",
                data.header.ring, self.ring
            )));
        }
        if data.is_empty() {
            return Err(TrainError::Config("dataset is empty".into()));
        }
        fs::create_dir_all(&paths.dir)?;
        let sched = self.schedule.build()?;
        let mut log = open_log(&paths.log(), self.step)?;
        while self.step < self.config.steps {
            let step = self.step;
            let stats = self.step(data, &sched)?;
            writeln!(log, "{step},{:e},{:e},{:e}", stats.loss, stats.lr, stats.grad_norm)?;
            on_step(step, &stats);
            let done = self.step;
            if self.config.checkpoint_every > 0 && done.is_multiple_of(self.config.checkpoint_every) && done < self.config.steps {
                log.flush()?;
                let ck = self.checkpoint();
                ck.save(&paths.checkpoint())?;
                ck.save(&paths.step_checkpoint(done))?;
            }
        }
        log.flush()?;
        let ck = self.checkpoint();
        ck.save(&paths.checkpoint())?;
        Ok(ck)
    }
}

/// Open the log for appending after dropping rows at or beyond `from_step`.
fn open_log(path: &Path, from_step: usize) -> Result<BufWriter<File>> {
    let mut kept = vec![LOG_HEADER.to_string()];
    if from_step > 0 && path.exists() {
        for line in BufReader::new(File::open(path)?).lines().skip(1) {
            let line = line?;
            match line.split(',').next().and_then(|s| s.parse::<usize>().ok()) {
                Some(s) if s < from_step => kept.push(line),
                _ => {}
            }
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    for l in kept {
        writeln!(w, "{l}")?;
    }
    Ok(w)
}

/// Losses from a training log, indexed by step.
pub fn read_log(path: &Path) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines().skip(1) {
        let line = line?;
        let mut cols = line.split(',');
        let step = cols.next().and_then(|s| s.parse().ok());
        let loss = cols.next().and_then(|s| s.parse().ok());
        match (step, loss) {
            (Some(s), Some(l)) => out.push((s, l)),
            _ => return Err(TrainError::Corrupt(format!("bad log row {line:?}"))),
        }
    }
    Ok(out)
}

/// Mean loss over steps in `[from, to)`.
pub fn window_mean(log: &[(usize, f64)], from: usize, to: usize) -> Option<f64> {
    let vals: Vec<f64> = log.iter().filter(|(s, _)| (from..to).contains(s)).map(|&(_, l)| l).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::Ablation;
    use crate::synthdata::{make_dataset, ObjectParams};

    fn tiny_ring() -> RingSpec {
        RingSpec {
            views: 2,
            elevation_deg: 30.0,
            radius: 1.5,
            image_size: 16,
        }
    }

    fn tiny_trainer(steps: usize) -> Trainer {
        let cfg = TrainConfig {
            steps,
            batch_size: 2,
            checkpoint_every: 0,
            seed: 3,
            ..TrainConfig::default()
        };
        Trainer::new(DenoiserConfig::tiny(), cfg, ScheduleSpec::DESK, tiny_ring()).unwrap()
    }

    fn tiny_data(count: usize) -> Dataset {
        make_dataset(count, 9, &tiny_ring(), &ObjectParams::default()).unwrap()
    }

    #[test]
    fn lr_schedule_and_validation() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr(0), 5e-4);
        assert!((cfg.lr(4999) - 1e-5).abs() < 1e-18);
        assert!(cfg.lr(2500) < cfg.lr(2499));
        let bad = TrainConfig {
            lr_start: 1e-5,
            lr_end: 1e-4,
            ..cfg.clone()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { lr_end: 0.0, ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = ParamStore::new();
        g.insert("a", Tensor::from_slice(&[3.0, 4.0]));
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g.get("a").unwrap().data(), &[3.0, 4.0]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        let d = g.get("a").unwrap().data();
        assert!((d[0] - 0.6).abs() < 1e-12 && (d[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let cfg = TrainConfig {
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut seen: Vec<usize> = (0..4).flat_map(|s| batch_indices(&cfg, 16, s)).collect();
        seen.sort();
        assert_eq!(seen, (0..16).collect::<Vec<_>>());
        assert_ne!(batch_indices(&cfg, 16, 0), batch_indices(&cfg, 16, 4));
        assert_eq!(batch_indices(&cfg, 16, 5), batch_indices(&cfg, 16, 5));
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut tr = tiny_trainer(10);
        let data = tiny_data(2);
        let sched = tr.schedule.build().unwrap();
        let before = tr.model.params().clone();
        let batch: Vec<&Sample> = data.samples.iter().collect();
        let cfg = tr.config.clone();
        train_step(&mut tr.model, &mut tr.opt, &batch, &tr.ring, &sched, &cfg, 0.0, &mut tr.rng, 0).unwrap();
        assert_eq!(tr.model.params(), &before);
    }

    #[test]
    fn fixed_batch_overfits() {
        let mut tr = tiny_trainer(200);
        let data = tiny_data(2);
        let sched = tr.schedule.build().unwrap();
        let batch: Vec<&Sample> = data.samples.iter().collect();
        let cfg = tr.config.clone();
        let mut losses = Vec::new();
        for step in 0..200 {
            // Same noise draw every step: only the parameters change.
            let mut rng = Rng::new(77);
            let s = train_step(&mut tr.model, &mut tr.opt, &batch, &tr.ring, &sched, &cfg, 1e-3, &mut rng, step).unwrap();
            losses.push(s.loss);
        }
        assert!(losses[199] < losses[0], "{} vs {}", losses[199], losses[0]);
        assert!(losses[199] < 0.5 * losses[0], "{} vs {}", losses[199], losses[0]);
    }

    #[test]
    fn checkpoint_round_trip_and_guards() {
        let mut tr = tiny_trainer(3);
        let data = tiny_data(3);
        let sched = tr.schedule.build().unwrap();
        tr.step(&data, &sched).unwrap();
        let ck = tr.checkpoint();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let mut bad = bytes.clone();
        bad[1] = b'x';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(TrainError::BadMagic)));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(TrainError::Corrupt(_))));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(TrainError::Version(2))));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        ck.save(&path).unwrap();
        let mut other = DenoiserConfig::tiny();
        other.ablation = Ablation::FlattenDepth;
        assert!(matches!(Checkpoint::load(&path, Some(&other)), Err(TrainError::Mismatch(_))));
        assert!(Checkpoint::load(&path, Some(&DenoiserConfig::tiny())).is_ok());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = tiny_data(3);
        let dir = tempfile::tempdir().unwrap();
        let full = RunPaths {
            dir: dir.path().join("full"),
        };
        let mut a = tiny_trainer(4);
        let ck_a = a.run(&data, &full, |_, _| {}).unwrap();

        let part = RunPaths {
            dir: dir.path().join("part"),
        };
        let mut b = tiny_trainer(4);
        b.config.checkpoint_every = 2;
        // Stop after two steps by running a shortened copy of the config.
        let sched = b.schedule.build().unwrap();
        fs::create_dir_all(&part.dir).unwrap();
        let mut log = open_log(&part.log(), 0).unwrap();
        for _ in 0..2 {
            let s = b.step;
            let st = b.step(&data, &sched).unwrap();
            writeln!(log, "{s},{:e},{:e},{:e}", st.loss, st.lr, st.grad_norm).unwrap();
        }
        drop(log);
        b.checkpoint().save(&part.checkpoint()).unwrap();
        let mut resumed = Trainer::from_checkpoint(Checkpoint::load(&part.checkpoint(), None).unwrap()).unwrap();
        resumed.config.checkpoint_every = 0;
        let ck_b = resumed.run(&data, &part, |_, _| {}).unwrap();
        assert_eq!(ck_a.params, ck_b.params);
        assert_eq!(ck_a.adam, ck_b.adam);
        assert_eq!(ck_a.header.rng, ck_b.header.rng);
        assert_eq!(fs::read(full.log()).unwrap(), fs::read(part.log()).unwrap());
    }
}
