//! L1 loss, Adam, bicubic degradation, the procedural face dataset and the
//! training loop.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{stack, ImageBuffer};
use crate::nn::{GradMap, ParameterStore};
use crate::tensor::kernels::ResamplePlan;
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::wfen::WfenModel;

/// Mean absolute difference; the subgradient at `pred == target` is 0.
pub fn l1_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let a = g.abs(d)?;
    g.mean(a)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 2e-4, beta1: 0.9, beta2: 0.99, eps: 1e-8 }
    }
}

/// Moment estimates for every parameter of one store, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParameterStore<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        AdamState { config, m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One bias-corrected Adam update of every parameter in `store`.
///
/// Fails before touching anything if a parameter has no gradient or a
/// gradient of the wrong shape.
pub fn adam_step<T: Real>(store: &mut ParameterStore<T>, grads: &GradMap<T>, state: &mut AdamState<T>) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::arg("adam_step", format!("state covers {} of {} parameters", state.m.len(), store.len())));
    }
    let mut ordered = Vec::with_capacity(store.len());
    for (_, name, p) in store.iter() {
        let g = grads.get(name).ok_or_else(|| Error::MissingGradient(name.to_string()))?;
        if g.shape() != p.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("gradient of `{name}` has shape {:?}, parameter {:?}", g.shape(), p.shape()),
            ));
        }
        ordered.push(g);
    }
    state.t += 1;
    let c = state.config;
    let bc1 = 1.0 - Float::powi(c.beta1, state.t as i32);
    let bc2 = 1.0 - Float::powi(c.beta2, state.t as i32);
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let (ob1, ob2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
    let (lr, eps) = (T::of(c.lr), T::of(c.eps));
    let (ibc1, ibc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    for (i, (id, g)) in ids.into_iter().zip(ordered.into_iter().cloned().collect::<Vec<_>>()).enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let p = store.tensor_mut(id).data_mut();
        for (k, &gk) in g.data().iter().enumerate() {
            m[k] = b1 * m[k] + ob1 * gk;
            v[k] = b2 * v[k] + ob2 * gk * gk;
            let mh = m[k] * ibc1;
            let vh = v[k] * ibc2;
            p[k] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Bicubic resampling (a = −0.5, pixel-center aligned, edge clamped, no antialiasing).
pub fn bicubic_resize<T: Real>(img: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = img.dims4("bicubic_resize")?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::shape("bicubic_resize", "extents must be at least 1"));
    }
    let plan = ResamplePlan::bicubic(h, w, out_h, out_w);
    Tensor::new(&[b, c, out_h, out_w], plan.forward(img.data(), b * c))
}

/// Degrades `hr` by `factor` and bicubically pre-upsamples it back:
/// returns `(lr_up, hr)`.
pub fn make_pair<T: Real>(hr: &Tensor<T>, factor: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let [_, _, h, w] = hr.dims4("make_pair")?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape("make_pair", format!("{h}×{w} is not divisible by {factor}")));
    }
    let lr = bicubic_resize(hr, h / factor, w / factor)?;
    Ok((bicubic_resize(&lr, h, w)?, hr.clone()))
}

fn mix_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ index.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
}

impl Ellipse {
    /// Squared normalized radius of `(x, y)`; < 1 inside.
    fn r2(&self, x: f64, y: f64) -> f64 {
        let (s, c) = Float::sin_cos(self.angle);
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        u * u + v * v
    }
}

/// Soft inside-indicator: 1 well inside, 0 outside, smooth across the rim.
fn soft_inside(r2: f64, softness: f64) -> f64 {
    let t = ((1.0 - r2) / softness).clamp(-30.0, 30.0);
    1.0 / (1.0 + Float::exp(-t))
}

/// Deterministic procedural face-like image of `size`×`size` pixels.
///
/// A smooth radial background and a bright elliptical "face" supply low
/// frequencies; oriented sinusoidal patches supply texture; two dark blobs
/// stand in for the eyes.
pub fn synth_sample(seed: u64, index: u64, size: usize) -> Result<ImageBuffer> {
    if size == 0 || !size.is_multiple_of(8) {
        return Err(Error::arg("synth_sample", format!("size {size} is not a positive multiple of 8")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, index));
    let s = size as f64;
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);

    let bg: [f64; 3] = [u(0.1, 0.6), u(0.1, 0.6), u(0.1, 0.6)];
    let bg_amp = u(0.1, 0.3);
    let (bgx, bgy) = (u(0.0, s), u(0.0, s));
    let skin: [f64; 3] = [u(0.55, 0.9), u(0.4, 0.75), u(0.3, 0.65)];
    let face = Ellipse { cx: s * u(0.42, 0.58), cy: s * u(0.42, 0.58), rx: s * u(0.25, 0.36), ry: s * u(0.32, 0.44), angle: u(-0.3, 0.3) };
    let eye_dy = face.ry * u(0.15, 0.3);
    let eye_dx = face.rx * u(0.3, 0.45);
    let eye_r = s * u(0.04, 0.07);
    let eyes = [-1.0, 1.0].map(|side| Ellipse {
        cx: face.cx + side * eye_dx,
        cy: face.cy - eye_dy,
        rx: eye_r * 1.4,
        ry: eye_r,
        angle: face.angle,
    });
    let eye_dark = u(0.05, 0.2);
    let patches: Vec<(Ellipse, f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let e = Ellipse { cx: u(0.0, s), cy: u(0.0, s), rx: s * u(0.12, 0.3), ry: s * u(0.12, 0.3), angle: u(0.0, PI) };
            // orientation, spatial frequency (cycles/pixel), phase, amplitude
            (e, u(0.0, PI), u(0.12, 0.4), u(0.0, 2.0 * PI), u(0.08, 0.2))
        })
        .collect();

    let mut data = alloc::vec![0.0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let d2 = ((px - bgx).powi(2) + (py - bgy).powi(2)) / (s * s);
            let fw = soft_inside(face.r2(px, py), 0.08);
            let mut texture = 0.0;
            for (e, theta, freq, phase, amp) in &patches {
                let (st, ct) = Float::sin_cos(*theta);
                let w = soft_inside(e.r2(px, py), 0.15);
                texture += w * amp * Float::sin(2.0 * PI * freq * (ct * px + st * py) + phase);
            }
            let ew = eyes.iter().map(|e| soft_inside(e.r2(px, py), 0.2)).fold(0.0, f64::max);
            for c in 0..3 {
                let back = bg[c] + bg_amp * (1.0 - d2.min(1.0));
                let shade = 1.0 - 0.25 * face.r2(px, py).min(1.0);
                let mut v = back * (1.0 - fw) + skin[c] * shade * fw + texture;
                v = v * (1.0 - ew) + eye_dark * ew;
                data[(c * size + y) * size + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    ImageBuffer::new(size, size, data, format!("synthetic:{seed}:{index}"))
}

/// Indexed collection of high-resolution training images.
pub trait SampleSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn sample(&self, index: usize) -> Result<ImageBuffer>;
}

/// [`synth_sample`] images `0..count`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFaces {
    pub seed: u64,
    pub count: usize,
    pub size: usize,
}

impl SampleSource for SyntheticFaces {
    fn len(&self) -> usize {
        self.count
    }

    fn sample(&self, index: usize) -> Result<ImageBuffer> {
        synth_sample(self.seed, index as u64, self.size)
    }
}

impl SampleSource for [ImageBuffer] {
    fn len(&self) -> usize {
        <[ImageBuffer]>::len(self)
    }

    fn sample(&self, index: usize) -> Result<ImageBuffer> {
        self.get(index).cloned().ok_or_else(|| Error::arg("sample", format!("index {index} out of range")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DataSourceKind {
    #[default]
    Synthetic,
    /// PPM files from a directory (see the companion crate).
    Directory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSourceKind,
    /// Synthetic images to generate.
    pub count: usize,
    /// Edge of the square high-resolution training images.
    pub size: usize,
    /// Image directory for the `directory` source.
    pub dir: Option<String>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { source: DataSourceKind::Synthetic, count: 16, size: 32, dir: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Constant learning rate.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Coefficient of the L1 loss.
    pub loss_weight: f64,
    pub sr_factor: usize,
    pub log_every: usize,
    pub dataset: DatasetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            steps: 1000,
            batch_size: 4,
            seed: 0,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            loss_weight: 1.0,
            sr_factor: 8,
            log_every: 10,
            dataset: DatasetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }

    /// Lists every violated constraint.
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.batch_size == 0 {
            v.push("train.batch_size must be positive".to_string());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            v.push("train.lr must be finite and non-negative".to_string());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                v.push(format!("train.{name} must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            v.push("train.adam_eps must be positive".to_string());
        }
        if !self.loss_weight.is_finite() {
            v.push("train.loss_weight must be finite".to_string());
        }
        if self.sr_factor == 0 {
            v.push("train.sr_factor must be positive".to_string());
        }
        let size = self.dataset.size;
        if size == 0 || !size.is_multiple_of(8) {
            v.push(format!("train.dataset.size {size} must be a positive multiple of 8"));
        } else if self.sr_factor > 0 && !size.is_multiple_of(self.sr_factor) {
            v.push(format!("train.dataset.size {size} is not divisible by sr_factor {}", self.sr_factor));
        }
        match self.dataset.source {
            DataSourceKind::Synthetic if self.dataset.count == 0 => {
                v.push("train.dataset.count must be positive".to_string())
            }
            DataSourceKind::Directory if self.dataset.dir.is_none() => {
                v.push("train.dataset.dir is required for the directory source".to_string())
            }
            _ => {}
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

/// Epoch-shuffled index stream: every index appears once per epoch.
#[derive(Clone, Debug)]
pub struct BatchSchedule {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSchedule {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut s = BatchSchedule { order: (0..len).collect(), cursor: 0, rng: ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xba7c)) };
        s.order.shuffle(&mut s.rng);
        s
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

/// FNV-1a over the bit patterns of a tensor's values.
pub fn content_hash(t: &Tensor<f32>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in t.data() {
        for byte in v.to_bits().to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based step number.
    pub step: usize,
    /// Loss of the batch before this step's update.
    pub loss: f32,
    pub batch_hash: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f32> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn batch_hashes(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.batch_hash).collect()
    }

    /// `step <n> loss <value>` for the first step, every `every`-th step and the last one.
    pub fn to_text(&self, every: usize) -> String {
        let every = every.max(1);
        let last = self.records.len();
        let mut out = String::new();
        for r in &self.records {
            if r.step == 1 || r.step % every == 0 || r.step == last {
                out.push_str(&format!("step {} loss {}\n", r.step, r.loss));
            }
        }
        out
    }
}

/// Summary of the parameters used when training aborts on a non-finite loss.
pub fn parameter_summary(store: &ParameterStore<f32>) -> String {
    let mut worst: Option<(&str, f32)> = None;
    let mut bad = Vec::new();
    for (_, name, t) in store.iter() {
        if !t.is_finite() {
            bad.push(name);
            continue;
        }
        let m = t.max_abs();
        if worst.is_none_or(|(_, w)| m > w) {
            worst = Some((name, m));
        }
    }
    let mut s = format!("{} non-finite parameter tensors", bad.len());
    if let Some(first) = bad.first() {
        s.push_str(&format!(" (first `{first}`)"));
    }
    if let Some((name, m)) = worst {
        s.push_str(&format!("; largest |value| {m:e} in `{name}`"));
    }
    s
}

/// Training pairs built once per dataset index.
struct PairCache<'a, S: ?Sized> {
    source: &'a S,
    factor: usize,
    pairs: BTreeMap<usize, (ImageBuffer, ImageBuffer)>,
}

impl<S: SampleSource + ?Sized> PairCache<'_, S> {
    fn get(&mut self, index: usize) -> Result<&(ImageBuffer, ImageBuffer)> {
        if !self.pairs.contains_key(&index) {
            let hr = self.source.sample(index)?;
            let (lr_up, _) = make_pair(&hr.to_tensor::<f32>(), self.factor)?;
            let lr_img = ImageBuffer::from_tensor(&lr_up, hr.source.clone())?;
            self.pairs.insert(index, (lr_img, hr));
        }
        Ok(&self.pairs[&index])
    }
}

/// `(lr_up, hr)` batch tensors for the given dataset indices.
pub fn assemble_batch<S: SampleSource + ?Sized>(source: &S, indices: &[usize], factor: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut cache = PairCache { source, factor, pairs: BTreeMap::new() };
    batch_from_cache(&mut cache, indices)
}

fn batch_from_cache<S: SampleSource + ?Sized>(cache: &mut PairCache<'_, S>, indices: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    for &i in indices {
        cache.get(i)?;
    }
    let lr: Vec<&ImageBuffer> = indices.iter().map(|i| &cache.pairs[i].0).collect();
    let hr: Vec<&ImageBuffer> = indices.iter().map(|i| &cache.pairs[i].1).collect();
    Ok((stack(&lr)?, stack(&hr)?))
}

/// Weighted L1 loss of the model on one batch, without gradients.
pub fn evaluate_loss(model: &WfenModel, store: &ParameterStore<f32>, lr_up: &Tensor<f32>, hr: &Tensor<f32>, weight: f64) -> Result<f32> {
    let mut g = Graph::new();
    let p = store.bind(&mut g)?;
    let x = g.input(lr_up.clone())?;
    let y = g.input(hr.clone())?;
    let pred = model.forward(&mut g, &p, x)?;
    let l = l1_loss(&mut g, pred, y)?;
    let l = g.scale(l, weight as f32)?;
    Ok(g.value(l)?.data()[0])
}

/// Runs `cfg.steps` optimizer steps, calling `observer` after each one.
///
/// Every step draws a batch from `source`, degrades it with [`make_pair`],
/// and applies one Adam update of the weighted L1 loss. The run is a pure
/// function of `(cfg, source, initial store)`.
pub fn train_loop<S: SampleSource + ?Sized>(
    model: &WfenModel,
    store: &mut ParameterStore<f32>,
    cfg: &TrainConfig,
    source: &S,
    mut observer: impl FnMut(&StepRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Config(alloc::vec!["dataset is empty".to_string()]));
    }
    let mut schedule = BatchSchedule::new(source.len(), cfg.seed);
    let mut cache = PairCache { source, factor: cfg.sr_factor, pairs: BTreeMap::new() };
    let mut adam = AdamState::new(store, cfg.adam());
    let mut report = TrainReport { records: Vec::with_capacity(cfg.steps) };
    let weight = cfg.loss_weight as f32;
    for step in 1..=cfg.steps {
        let indices = schedule.next_batch(cfg.batch_size);
        let (lr_up, hr) = batch_from_cache(&mut cache, &indices)?;
        let batch_hash = content_hash(&hr) ^ content_hash(&lr_up).rotate_left(1);

        let abort = |detail: String| Error::NonFiniteLoss { step, detail };
        let mut g = Graph::new();
        let p = store.bind(&mut g)?;
        let forward = (|| {
            let x = g.input(lr_up)?;
            let y = g.input(hr)?;
            let pred = model.forward(&mut g, &p, x)?;
            let l = l1_loss(&mut g, pred, y)?;
            g.scale(l, weight)
        })();
        let loss_var = match forward {
            Ok(v) => v,
            Err(Error::NonFinite { op }) => {
                return Err(abort(format!("non-finite value in {op}; {}", parameter_summary(store))))
            }
            Err(e) => return Err(e),
        };
        let loss = g.value(loss_var)?.data()[0];
        if !loss.is_finite() {
            return Err(abort(parameter_summary(store)));
        }
        let mut grads = match g.backward(loss_var) {
            Ok(gr) => gr,
            Err(Error::NonFinite { op }) => {
                return Err(abort(format!("non-finite gradient in {op}; {}", parameter_summary(store))))
            }
            Err(e) => return Err(e),
        };
        let named = p.named_grads(store, &mut grads);
        adam_step(store, &named, &mut adam)?;
        let record = StepRecord { step, loss, batch_hash };
        observer(&record);
        report.records.push(record);
    }
    Ok(report)
}
