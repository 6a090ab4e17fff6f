//! Adam optimization, synthetic data and the training loop.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig, SegPair};
use crate::network::{predict_field, Model, ModelConfig};
use crate::params::{ParamStore, Scope};
use crate::tensor::{Graph, Real, Tensor};
use crate::volume::{
    read_checkpoint, read_field, read_mask, read_volume, sidecar_paths, write_checkpoint, write_field, write_mask,
    write_volume, DisplacementField, Dims, LabelMask, Spacing, Volume,
};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment buffers plus the step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: Vec<Vec<Real>>,
    pub v: Vec<Vec<Real>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Invalid(format!(
            "adam: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.numel() {
            return Err(Error::Invalid(format!(
                "adam: param {i} has shape {:?} but gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let (b1, b2) = (ADAM_BETA1 as Real, ADAM_BETA2 as Real);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi as f64 / c1;
            let vhat = *vi as f64 / c2;
            *w -= (lr * mhat / (vhat.sqrt() + ADAM_EPS)) as Real;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_iterations: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub model: ModelConfig,
    /// 0 disables periodic checkpoints
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            max_iterations: 1000,
            seed: 0,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            checkpoint_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be >= 1".into()));
        }
        self.loss.validate()?;
        self.model.validate()
    }
}

/// Generator settings for the synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub dims: Dims,
    pub spacing: Spacing,
    pub n_subjects: usize,
    /// number of labeled ellipsoids
    pub n_labels: usize,
    /// semi-axis range in voxels
    pub radius_range: [f64; 2],
    /// bound on the displacement magnitude per axis, in voxels
    pub amplitude: f64,
    /// bound on the Frobenius norm of the displacement gradient
    pub max_gradient: f64,
    /// sinusoid terms per displacement component
    pub n_waves: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            dims: [64; 3],
            spacing: [1.0; 3],
            n_subjects: 4,
            n_labels: 3,
            radius_range: [7.0, 11.0],
            amplitude: 6.0,
            max_gradient: 0.7,
            n_waves: 3,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0 || d % 32 != 0) {
            return Err(Error::Config(format!("dims must be positive multiples of 32, got {:?}", self.dims)));
        }
        if self.n_labels == 0 || self.n_labels > 255 {
            return Err(Error::Config("n_labels must be in 1..=255".into()));
        }
        let [lo, hi] = self.radius_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config(format!("bad radius range {:?}", self.radius_range)));
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(Error::Config("amplitude must be >= 0".into()));
        }
        if !(self.max_gradient >= 0.0 && self.max_gradient < 1.0) {
            return Err(Error::Config("max_gradient must be in [0, 1)".into()));
        }
        if self.n_waves == 0 {
            return Err(Error::Config("n_waves must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub image: Volume,
    pub mask: LabelMask,
    /// deformation applied to the template: subject(p) = template(p + u(p))
    pub field: DisplacementField,
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    intensity: f64,
}

struct Template {
    blobs: Vec<Ellipsoid>,
    /// background wave: (amplitude, wave vector, phase)
    background: Vec<(f64, [f64; 3], f64)>,
}

const EDGE_WIDTH: f64 = 0.08;

impl Template {
    fn random(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Self {
        let n = spec.dims.map(|d| d as f64);
        let k = spec.n_labels;
        let blobs = (0..k)
            .map(|i| {
                let radii = [0; 3].map(|_| rng.random_range(spec.radius_range[0]..=spec.radius_range[1]));
                // centers on a ring around the middle so structures overlap little
                let angle = std::f64::consts::TAU * (i as f64 + rng.random_range(-0.15..0.15)) / k as f64;
                let ring = 0.22 * n[0].min(n[1]);
                let center = [
                    n[0] / 2.0 + ring * angle.cos(),
                    n[1] / 2.0 + ring * angle.sin(),
                    n[2] / 2.0 + rng.random_range(-0.1..0.1) * n[2],
                ];
                Ellipsoid {
                    center,
                    radii,
                    intensity: 0.45 + 0.5 * (i + 1) as f64 / k as f64,
                }
            })
            .collect();
        let background = (0..3)
            .map(|_| {
                let kv = [0; 3].map(|_| rng.random_range(-2.0..2.0) * std::f64::consts::TAU);
                (0.05, [kv[0] / n[0], kv[1] / n[1], kv[2] / n[2]], rng.random_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        Template { blobs, background }
    }

    /// Normalized ellipsoid radius; < 1 inside.
    fn radius(e: &Ellipsoid, p: [f64; 3]) -> f64 {
        (0..3).map(|a| ((p[a] - e.center[a]) / e.radii[a]).powi(2)).sum::<f64>().sqrt()
    }

    fn intensity(&self, p: [f64; 3]) -> f64 {
        let mut v = 0.2
            + self
                .background
                .iter()
                .map(|(a, k, ph)| a * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + ph).sin())
                .sum::<f64>();
        for e in &self.blobs {
            let w = 1.0 / (1.0 + ((Self::radius(e, p) - 1.0) / EDGE_WIDTH).exp());
            v = v * (1.0 - w) + e.intensity * w;
        }
        v
    }

    /// Label of the last ellipsoid containing `p`, 0 for background.
    fn label(&self, p: [f64; 3]) -> u8 {
        self.blobs
            .iter()
            .enumerate()
            .filter(|(_, e)| Self::radius(e, p) < 1.0)
            .map(|(i, _)| i as u8 + 1)
            .last()
            .unwrap_or(0)
    }
}

/// Smooth random field: per component a sum of low-frequency sinusoids.
struct WaveField {
    /// per component: (amplitude, wave vector (rad/voxel), phase)
    waves: [Vec<(f64, [f64; 3], f64)>; 3],
}

impl WaveField {
    fn random(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Self {
        let n = spec.dims.map(|d| d as f64);
        let mut waves: [Vec<(f64, [f64; 3], f64)>; 3] = Default::default();
        for comp in waves.iter_mut() {
            for _ in 0..spec.n_waves {
                let k = [0; 3].map(|_| rng.random_range(0..=1) as f64);
                let k = if k == [0.0; 3] { [1.0, 0.0, 0.0] } else { k };
                let kv = [0, 1, 2].map(|a| k[a] * std::f64::consts::TAU / n[a]);
                comp.push((rng.random_range(0.3..1.0), kv, rng.random_range(0.0..std::f64::consts::TAU)));
            }
        }
        // scale to respect both the amplitude and the gradient bound
        let amp = waves.iter().map(|c| c.iter().map(|w| w.0).sum::<f64>()).fold(0.0, f64::max);
        let grad = waves
            .iter()
            .map(|c| c.iter().map(|w| w.0 * w.1.iter().map(|k| k * k).sum::<f64>().sqrt()).sum::<f64>().powi(2))
            .sum::<f64>()
            .sqrt();
        let s = (spec.amplitude / amp).min(spec.max_gradient / grad);
        for comp in waves.iter_mut() {
            for w in comp.iter_mut() {
                w.0 *= s;
            }
        }
        WaveField { waves }
    }

    fn at(&self, p: [f64; 3]) -> [f64; 3] {
        self.waves
            .each_ref()
            .map(|c| c.iter().map(|(a, k, ph)| a * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + ph).sin()).sum())
    }
}

/// Deterministic dataset: one random template, each subject warped by its own
/// smooth field. Subject `i` depends only on `seed` and `i`, so a larger
/// `n_subjects` extends a smaller dataset without changing its members.
pub fn gen_synthetic(spec: &SynthSpec, seed: u64) -> Result<Vec<Subject>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = Template::random(spec, &mut rng);
    (0..spec.n_subjects)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let wave = WaveField::random(spec, &mut rng);
            let field = DisplacementField::from_fn(spec.dims, spec.spacing, |x, y, z| {
                wave.at([x as f64, y as f64, z as f64]).map(|v| v as f32)
            })?;
            let warped = |x: usize, y: usize, z: usize| {
                let p = [x as f64, y as f64, z as f64];
                let u = wave.at(p);
                [p[0] + u[0], p[1] + u[1], p[2] + u[2]]
            };
            Ok(Subject {
                image: Volume::from_fn(spec.dims, spec.spacing, |x, y, z| template.intensity(warped(x, y, z)) as f32)?,
                mask: LabelMask::from_fn(spec.dims, spec.spacing, |x, y, z| template.label(warped(x, y, z)))?,
                field,
            })
        })
        .collect()
}

fn subject_base(dir: &Path, i: usize, part: &str) -> PathBuf {
    dir.join(format!("subject_{i:03}_{part}"))
}

/// Writes `subject_NNN_{image,mask,field}` volumes into `dir`.
pub fn save_dataset(dir: impl AsRef<Path>, subjects: &[Subject]) -> Result<()> {
    let dir = dir.as_ref();
    for (i, s) in subjects.iter().enumerate() {
        write_volume(&s.image, subject_base(dir, i, "image"))?;
        write_mask(&s.mask, subject_base(dir, i, "mask"))?;
        write_field(&s.field, subject_base(dir, i, "field"))?;
    }
    Ok(())
}

/// Reads consecutive subjects from `dir` until the next image is missing. A missing
/// mask reads as all background and a missing field as zero.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Subject>> {
    let dir = dir.as_ref();
    let exists = |base: &Path| sidecar_paths(base).0.exists();
    let mut out = Vec::new();
    for i in 0.. {
        let image_path = subject_base(dir, i, "image");
        if !exists(&image_path) {
            break;
        }
        let image = read_volume(&image_path)?;
        let mask_path = subject_base(dir, i, "mask");
        let mask = if exists(&mask_path) {
            read_mask(&mask_path)?
        } else {
            LabelMask::new(image.dims(), image.spacing(), vec![0; image.data().len()])?
        };
        let field_path = subject_base(dir, i, "field");
        let field = if exists(&field_path) {
            read_field(&field_path)?
        } else {
            DisplacementField::zeros(image.dims(), image.spacing())?
        };
        if mask.dims() != image.dims() || field.dims() != image.dims() {
            return Err(Error::Dims(format!("subject {i}: image, mask and field grids differ")));
        }
        out.push(Subject { image, mask, field });
    }
    if out.is_empty() {
        return Err(Error::Invalid(format!("{}: no subject_000_image volume", dir.display())));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub total: f64,
    pub sim: f64,
    pub smooth: f64,
    pub seg: Option<f64>,
}

pub fn write_loss_csv(path: impl AsRef<Path>, trace: &[LossRecord]) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["iteration", "total", "sim", "smooth", "seg"]).map_err(csv_err)?;
    for r in trace {
        let seg = r.seg.map(|s| s.to_string()).unwrap_or_default();
        w.write_record([r.iteration.to_string(), r.total.to_string(), r.sim.to_string(), r.smooth.to_string(), seg])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Saves parameters with the model config (and optional extras) in the manifest.
pub fn save_model(path: impl AsRef<Path>, model: &Model, extra: serde_json::Value) -> Result<()> {
    let meta = serde_json::json!({ "model": model.config, "extra": extra });
    write_checkpoint(path, &model.params.to_entries(), meta)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let (entries, meta) = read_checkpoint(path)?;
    let config: ModelConfig = serde_json::from_value(meta.get("model").cloned().unwrap_or_default())
        .map_err(|e| Error::Format(format!("{}: model config: {e}", path.display())))?;
    Model::with_params(config, ParamStore::from_entries(entries)?)
}

pub struct TrainOutcome {
    pub model: Model,
    pub trace: Vec<LossRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Ordered pairs `(moving, fixed)`, each visited once per shuffled cycle.
pub struct PairSampler {
    pairs: Vec<(usize, usize)>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl PairSampler {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        if n < 2 {
            return Err(Error::Invalid(format!("training needs at least 2 subjects, got {n}")));
        }
        let pairs: Vec<_> = (0..n).flat_map(|m| (0..n).filter(move |&f| f != m).map(move |f| (m, f))).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x5eed);
        let order = (0..pairs.len()).collect();
        Ok(PairSampler {
            pairs,
            order,
            cursor: usize::MAX,
            rng,
        })
    }
}

impl Iterator for PairSampler {
    type Item = (usize, usize);

    fn next(&mut self) -> Option<(usize, usize)> {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        Some(self.pairs[self.order[self.cursor - 1]])
    }
}

pub fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("ckpt_{iteration:06}.json"))
}

/// Runs Adam on random ordered pairs. With `out_dir`, writes periodic checkpoints,
/// a final `final.json` checkpoint and `loss.csv`.
pub fn train(
    cfg: &TrainConfig,
    data: &[Subject],
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut sampler = PairSampler::new(data.len(), cfg.seed)?;
    let images: Vec<Tensor> = data.iter().map(|s| s.image.normalized().to_tensor()).collect();
    for t in &images {
        cfg.model.check_input(t.shape())?;
    }
    let mut labels: Vec<u8> = data.iter().flat_map(|s| s.mask.foreground_labels()).collect();
    labels.sort_unstable();
    labels.dedup();
    let one_hot: Vec<Tensor> = if cfg.loss.use_seg {
        data.iter().map(|s| s.mask.one_hot(&labels)).collect()
    } else {
        Vec::new()
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let mut adam = AdamState::new(model.params.tensors());
    let mut trace = Vec::with_capacity(cfg.max_iterations);
    let mut checkpoints = Vec::new();
    let save = |model: &Model, path: PathBuf, iteration: usize, trace: &[LossRecord]| -> Result<PathBuf> {
        save_model(&path, model, serde_json::json!({ "iteration": iteration, "train": cfg }))?;
        if let Some(dir) = path.parent() {
            write_loss_csv(dir.join("loss.csv"), trace)?;
        }
        Ok(path)
    };

    for iteration in 1..=cfg.max_iterations {
        let (mi, fi) = sampler.next().expect("sampler is endless");
        let g = Graph::new();
        let record;
        let grads = {
            let scope = Scope::new(&g, &model.params, true);
            let moving = g.constant(images[mi].clone());
            let fixed = g.constant(images[fi].clone());
            let field = predict_field(&cfg.model, &scope, moving, fixed)?;
            let masks = cfg.loss.use_seg.then(|| SegPair {
                fixed: g.constant(one_hot[fi].clone()),
                moving: g.constant(one_hot[mi].clone()),
            });
            let terms = total_loss(&g, fixed, moving, field, masks, &cfg.loss)?;
            let scalar = |v| g.value(v).item() as f64;
            record = LossRecord {
                iteration,
                total: scalar(terms.total),
                sim: scalar(terms.sim),
                smooth: scalar(terms.smooth),
                seg: terms.seg.map(scalar),
            };
            if !record.total.is_finite() {
                return Err(Error::Diverged {
                    iteration,
                    value: record.total,
                });
            }
            g.backward(terms.total)?;
            scope.grads()
        };
        drop(g);
        adam_step(model.params.tensors_mut(), &grads, &mut adam, cfg.learning_rate)?;
        trace.push(record);
        progress(&record);
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && iteration % cfg.checkpoint_every == 0 {
                checkpoints.push(save(&model, checkpoint_path(dir, iteration), iteration, &trace)?);
            }
        }
    }
    if let Some(dir) = out_dir {
        checkpoints.push(save(&model, dir.join("final.json"), cfg.max_iterations, &trace)?);
    }
    Ok(TrainOutcome {
        model,
        trace,
        checkpoints,
    })
}

/// Mean of each run of `window` consecutive values.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    values.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}
