//! Two-stage training and closed-loop inference.
//!
//! Stage 1 trains the IDN alone on the reconstruction objective. Stage 2
//! freezes it and trains TFGA and IGM on the full objective, alternating the
//! downstream task per batch. Inference runs the loop
//! initial dehazing → task feedback → feature modulation → result update,
//! reusing the encoder activations of the hazy input across iterations.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::downstream::{
    feedback_channels, metric_names, task_metric, TaskAdapter, TaskFeedback, TaskKind, TaskOutput, TaskRegistry,
    TaskTarget, ToyAdapter,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::haze::{self, DepthMap, HazeRanges};
use crate::idn::{EncoderCache, Idn, IdnConfig, ModulationBundle};
use crate::igm::{Igm, IgmModulator, InstructionEmbedding, TextEncoder, DEFAULT_TEXT_DIM};
use crate::losses::{self, LossBreakdown, LossWeights, PerceptualExtractor};
use crate::metrics;
use crate::optim::{cosine_lr, Adam};
use crate::param::{ParamId, ParamStore};
use crate::rng::SeedTree;
use crate::scene::{self, BoxAnn};
use crate::tensor::Tensor;
use crate::tfga::Tfga;

/// One training or evaluation pair with its downstream annotations.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub clear: Tensor,
    pub hazy: Tensor,
    pub depth: DepthMap,
    pub boxes: Vec<BoxAnn>,
}

impl Sample {
    pub fn new(id: impl Into<String>, clear: Tensor, hazy: Tensor, depth: DepthMap, boxes: Vec<BoxAnn>) -> Result<Self> {
        Idn::check_input(&clear)?;
        clear.ensure_shape("sample hazy", hazy.shape())?;
        let (_, h, w) = clear.chw();
        if depth.height() != h || depth.width() != w {
            return Err(Error::Input(format!(
                "depth map is {}x{}, image is {h}x{w}",
                depth.height(),
                depth.width()
            )));
        }
        clear.ensure_finite("clear image")?;
        hazy.ensure_finite("hazy image")?;
        Ok(Self {
            id: id.into(),
            clear,
            hazy,
            depth,
            boxes,
        })
    }

    pub fn target(&self, kind: TaskKind) -> TaskTarget {
        TaskTarget::for_scene(kind, &self.clear, &self.depth, &self.boxes)
    }

    /// Mirror image along the horizontal axis, annotations included.
    pub fn flipped(&self) -> Sample {
        let (_, _, w) = self.clear.chw();
        let boxes = self
            .boxes
            .iter()
            .map(|b| BoxAnn {
                x: w as f64 - b.x - b.w,
                ..*b
            })
            .collect();
        let d = self.depth.to_tensor();
        let depth = DepthMap::new(self.depth.height(), w, flip_w(&d).into_data()).expect("flip preserves validity");
        Sample {
            id: self.id.clone(),
            clear: flip_w(&self.clear),
            hazy: flip_w(&self.hazy),
            depth,
            boxes,
        }
    }
}

fn flip_w(t: &Tensor) -> Tensor {
    let (c, h, w) = t.chw();
    let d = t.data();
    Tensor::from_fn(&[c, h, w], |i| {
        let x = i % w;
        d[i - x + (w - 1 - x)]
    })
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Procedural scenes with sampled haze. Sample `i` depends only on the seed
/// and `i`.
pub fn synth_dataset(n: usize, size: usize, ranges: &HazeRanges, seeds: &SeedTree, prefix: &str) -> Result<Dataset> {
    ranges.validate()?;
    let samples = (0..n)
        .map(|i| {
            let mut rng = seeds.child("sample", i as u64).stream("scene");
            let s = scene::generate(size, &mut rng);
            let params = ranges.sample(&mut rng);
            let hazy = haze::synthesize_haze(&s.clear, &s.depth, &params)?;
            Sample::new(format!("{prefix}{i:04}"), s.clear, hazy, s.depth, s.boxes)
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { samples })
}

/// Architecture hyperparameters shared by every stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub idn: IdnConfig,
    pub text_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            idn: IdnConfig::default(),
            text_dim: DEFAULT_TEXT_DIM,
        }
    }
}

/// Switches off one closed-loop branch for ablation studies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    pub no_igm: bool,
    pub no_tfga: bool,
}

/// IDN, TFGA and IGM in one parameter store (`idn.*`, `tfga.*`, `igm.*`).
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub idn: Idn,
    pub tfga: Tfga,
    pub igm: Igm,
}

impl Model {
    pub fn new(config: ModelConfig, seeds: &SeedTree) -> Result<Self> {
        config.idn.validate()?;
        if config.text_dim == 0 {
            return Err(Error::Config("text embedding dimension must be positive".into()));
        }
        let mut store = ParamStore::new();
        let idn = Idn::new(&mut store, &mut seeds.stream("init.idn"), config.idn);
        let feedback: Vec<_> = TaskKind::ALL.iter().map(|&k| (k, feedback_channels(k))).collect();
        let [_, c2, c3] = config.idn.channels;
        let tfga = Tfga::new(&mut store, &mut seeds.stream("init.tfga"), c3, &feedback);
        let igm = Igm::new(&mut store, &mut seeds.stream("init.igm"), config.text_dim, c3, c2);
        Ok(Self {
            config,
            store,
            idn,
            tfga,
            igm,
        })
    }

    /// Trainable flags for stage 1 (IDN only) or stage 2 (adapters only).
    pub fn set_stage(&mut self, stage: u8, ablation: Ablation) {
        self.store.freeze_all();
        match stage {
            1 => self.store.set_trainable("idn.", true),
            _ => {
                if !ablation.no_tfga {
                    self.store.set_trainable("tfga.", true);
                }
                if !ablation.no_igm {
                    self.store.set_trainable("igm.", true);
                }
            }
        }
    }

    /// Open-loop output `J'`.
    pub fn open_loop(&self, hazy: &Tensor) -> Result<Tensor> {
        self.idn.dehaze(&self.store, hazy)
    }

    /// Builds the modulated decoder pass on `g` for one loop iteration and
    /// returns `J'_w`.
    pub fn modulated_graph(
        &self,
        g: &mut Graph,
        cache: &EncoderCache,
        current: &Tensor,
        feedback: &TaskFeedback,
        instruction: &InstructionEmbedding,
        ablation: Ablation,
    ) -> Result<Var> {
        if instruction.dim() != self.config.text_dim {
            return Err(Error::Config(format!(
                "instruction embedding has dim {}, model expects {}",
                instruction.dim(),
                self.config.text_dim
            )));
        }
        let feats = cache.attach(g);
        let injection = if ablation.no_tfga {
            None
        } else {
            let cur = g.constant(current.clone());
            Some(self.tfga.run(g, &self.store, cur, feedback, feats.deepest())?.injection)
        };
        let instr = g.constant(instruction.to_tensor());
        let modulator = IgmModulator {
            igm: &self.igm,
            store: &self.store,
            instruction: instr,
        };
        let bundle = ModulationBundle {
            injection,
            sites: if ablation.no_igm { None } else { Some(&modulator) },
        };
        self.idn.check_bundle(g, &feats, &bundle)?;
        Ok(self.idn.decode(g, &self.store, &feats, Some(&bundle)))
    }
}

/// Optimisation settings for one training stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub adam_betas: (f64, f64),
    pub batch: usize,
    pub seed: u64,
    pub loss: LossWeights,
    /// Random horizontal flips.
    pub augment: bool,
    pub ablation: Ablation,
}

impl TrainConfig {
    fn base(epochs: usize) -> Self {
        Self {
            epochs,
            lr: 1e-4,
            adam_betas: (0.9, 0.999),
            batch: 4,
            seed: 0,
            loss: LossWeights::default(),
            augment: true,
            ablation: Ablation::default(),
        }
    }

    pub fn stage1() -> Self {
        Self::base(300)
    }

    pub fn stage2() -> Self {
        Self::base(100)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!("Adam momenta must lie in [0, 1), got ({b1}, {b2})")));
        }
        self.loss.validate()
    }
}

/// Mean losses over one epoch of one split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: &'static str,
    pub l1: f64,
    pub ratio: f64,
    pub mcr: f64,
    pub down: f64,
    pub total: f64,
    /// Fraction of samples with `ℓ_w < ℓ_p < ℓ_h` (stage 2 only).
    pub ordering_fraction: Option<f64>,
}

impl EpochLog {
    fn from_breakdowns(epoch: usize, split: &'static str, items: &[LossBreakdown], ordering: bool) -> Self {
        let mut sum = LossBreakdown::default();
        items.iter().for_each(|b| sum.accumulate(b));
        let m = sum.scaled(1.0 / items.len().max(1) as f64);
        let ordered = items.iter().filter(|b| b.ordered()).count() as f64 / items.len().max(1) as f64;
        Self {
            epoch,
            split,
            l1: m.l1,
            ratio: m.ratio,
            mcr: m.mcr,
            down: m.down,
            total: m.total,
            ordering_fraction: ordering.then_some(ordered),
        }
    }
}

/// Sums per-sample parameter gradients into `acc`.
fn accumulate_grads(acc: &mut Vec<(ParamId, Tensor)>, grads: Vec<(ParamId, Tensor)>) {
    for (id, t) in grads {
        match acc.binary_search_by_key(&id.index(), |(i, _)| i.index()) {
            Ok(pos) => acc[pos].1.add_assign(&t),
            Err(pos) => acc.insert(pos, (id, t)),
        }
    }
}

fn batches(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

fn check_loss(v: f64, stage: u8, epoch: usize, id: &str, b: &LossBreakdown) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "stage {stage}, epoch {epoch}, sample {id}: loss {v} (l1 {}, ratio {}, mcr {}, down {})",
            b.l1, b.ratio, b.mcr, b.down
        )))
    }
}

/// Trains the IDN on `l1(J', J) + λ·ratio`, evaluated on the output before
/// its final clamp. Parameters outside `idn.*` are
/// untouched. `on_epoch` sees each epoch's log as soon as it is complete.
pub fn train_stage1(
    model: &mut Model,
    data: &Dataset,
    extractor: &PerceptualExtractor,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("stage-1 training set"));
    }
    model.set_stage(1, Ablation::default());
    let seeds = SeedTree::new(cfg.seed);
    let mut adam = Adam::new(cfg.adam_betas.0, cfg.adam_betas.1);
    let per_epoch = batches(data.len(), cfg.batch);
    let total_steps = cfg.epochs * per_epoch;
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = seeds.child("stage1.epoch", epoch as u64).stream("order");
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut items = Vec::with_capacity(data.len());
        for chunk in order.chunks(cfg.batch) {
            let mut acc = Vec::new();
            for &i in chunk {
                let flip = cfg.augment && rng.gen_bool(0.5);
                let flipped;
                let s = if flip {
                    flipped = data.samples[i].flipped();
                    &flipped
                } else {
                    &data.samples[i]
                };
                let mut g = Graph::new();
                let x = g.constant(s.hazy.clone());
                let clear = g.constant(s.clear.clone());
                let feats = model.idn.encode(&mut g, &model.store, x);
                let y = model.idn.decode_raw(&mut g, &model.store, &feats, None);
                let (loss, l1, ratio) = losses::reconstruction_var(&mut g, extractor, cfg.loss.lambda, clear, y, x);
                let v = g.value(loss).item();
                let b = LossBreakdown {
                    l1: g.value(l1).item(),
                    ratio: ratio.map_or(0.0, |r| g.value(r).item()),
                    dehaze: v,
                    total: v,
                    ..Default::default()
                };
                check_loss(v, 1, epoch, &s.id, &b)?;
                items.push(b);
                accumulate_grads(&mut acc, g.backward(loss).params(&g));
            }
            let k = 1.0 / chunk.len() as f64;
            acc.iter_mut().for_each(|(_, t)| t.scale_assign(k));
            adam.step(&mut model.store, &acc, cosine_lr(cfg.lr, step, total_steps));
            step += 1;
        }
        let log = EpochLog::from_breakdowns(epoch + 1, "train", &items, false);
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Settings for pretraining a toy task head on clear images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TaskTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 3e-3,
            batch: 4,
            seed: 0,
        }
    }
}

/// Trains one task head on the clear images of `data`, then freezes it.
/// Returns the mean training loss of every epoch.
pub fn pretrain_task(adapter: &mut ToyAdapter, data: &Dataset, cfg: &TaskTrainConfig) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Empty("task pretraining set"));
    }
    if cfg.epochs == 0 || cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config(format!("invalid task training settings {cfg:?}")));
    }
    let kind = adapter.kind();
    adapter.store.set_trainable("", true);
    let seeds = SeedTree::new(cfg.seed).child(kind.name(), 0);
    let targets: Vec<TaskTarget> = data.samples.iter().map(|s| s.target(kind)).collect();
    let mut adam = Adam::new(0.9, 0.999);
    let total_steps = cfg.epochs * batches(data.len(), cfg.batch);
    let mut step = 0;
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = seeds.child("epoch", epoch as u64).stream("order");
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let mut acc = Vec::new();
            for &i in chunk {
                let mut g = Graph::new();
                let x = g.constant(data.samples[i].clear.clone());
                let out = adapter.forward(&mut g, x).output;
                let loss = adapter.loss_var(&mut g, out, &targets[i])?;
                let v = g.value(loss).item();
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "{} head, epoch {epoch}, sample {}: loss {v}",
                        kind.name(),
                        data.samples[i].id
                    )));
                }
                sum += v;
                accumulate_grads(&mut acc, g.backward(loss).params(&g));
            }
            let k = 1.0 / chunk.len() as f64;
            acc.iter_mut().for_each(|(_, t)| t.scale_assign(k));
            adam.step(&mut adapter.store, &acc, cosine_lr(cfg.lr, step, total_steps));
            step += 1;
        }
        curve.push(sum / data.len() as f64);
    }
    adapter.freeze();
    Ok(curve)
}

/// One freshly initialised head per task kind, as [`pretrain_registry`]
/// starts from. Loading saved head weights into it restores a registry.
pub fn initial_registry(seed: u64) -> TaskRegistry {
    let seeds = SeedTree::new(seed);
    TaskRegistry::new(
        TaskKind::ALL
            .iter()
            .map(|&kind| ToyAdapter::new(kind, &mut seeds.stream(&format!("init.task.{}", kind.name()))))
            .collect(),
    )
}

/// Builds one head per task kind and pretrains each.
pub fn pretrain_registry(data: &Dataset, cfg: &TaskTrainConfig) -> Result<TaskRegistry> {
    let mut registry = initial_registry(cfg.seed);
    for a in registry.adapters_mut() {
        pretrain_task(a, data, cfg)?;
    }
    Ok(registry)
}

/// Everything stage 2 needs about one sample that does not depend on the
/// trainable modules.
struct Prepared {
    sample: Sample,
    cache: EncoderCache,
    initial: Tensor,
    l_p: f64,
    l_h: f64,
    /// Per registry adapter, in registry order.
    feedback: Vec<TaskFeedback>,
    targets: Vec<TaskTarget>,
}

fn prepare(model: &Model, registry: &TaskRegistry, sample: Sample) -> Result<Prepared> {
    let cache = model.idn.encode_cached(&model.store, &sample.hazy)?;
    let initial = model.open_loop(&sample.hazy)?;
    let l_p = losses::l1_loss(&initial, &sample.clear)?;
    let l_h = losses::l1_loss(&sample.hazy, &sample.clear)?;
    let feedback = registry.adapters().iter().map(|a| a.feedback(&initial)).collect();
    let targets = registry.adapters().iter().map(|a| sample.target(a.kind())).collect();
    Ok(Prepared {
        sample,
        cache,
        initial,
        l_p,
        l_h,
        feedback,
        targets,
    })
}

/// Forward pass of the full objective for one prepared sample and task.
fn stage2_graph(
    g: &mut Graph,
    model: &Model,
    p: &Prepared,
    adapter: &ToyAdapter,
    task_index: usize,
    instruction: &InstructionEmbedding,
    extractor: &PerceptualExtractor,
    cfg: &TrainConfig,
) -> Result<(Var, LossBreakdown)> {
    let w = cfg.loss;
    let jw = model.modulated_graph(g, &p.cache, &p.initial, &p.feedback[task_index], instruction, cfg.ablation)?;
    let clear = g.constant(p.sample.clear.clone());
    let hazy = g.constant(p.sample.hazy.clone());
    let (dehaze, l1, ratio) = losses::reconstruction_var(g, extractor, w.lambda, clear, jw, hazy);
    let mcr = losses::mcr_var(g, l1, p.l_p, p.l_h, w.beta1, w.beta2);
    let out = adapter.forward(g, jw).output;
    let down = adapter.loss_var(g, out, &p.targets[task_index])?;
    let s = g.add(dehaze, mcr);
    let d = g.scale(down, w.gamma);
    let total = g.add(s, d);
    let b = LossBreakdown {
        l1: g.value(l1).item(),
        ratio: ratio.map_or(0.0, |r| g.value(r).item()),
        dehaze: g.value(dehaze).item(),
        mcr: g.value(mcr).item(),
        down: g.value(down).item(),
        total: g.value(total).item(),
        l_w: g.value(l1).item(),
        l_p: p.l_p,
        l_h: p.l_h,
    };
    Ok((total, b))
}

/// Trains TFGA and IGM with the IDN and task heads frozen. Batch `b` uses
/// adapter `b mod n` with an instruction drawn from that task's phrasings.
/// When `val` is given, a held-out line is logged after every epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_stage2(
    model: &mut Model,
    data: &Dataset,
    registry: &TaskRegistry,
    encoder: &dyn TextEncoder,
    extractor: &PerceptualExtractor,
    cfg: &TrainConfig,
    val: Option<&Dataset>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("stage-2 training set"));
    }
    if registry.is_empty() {
        return Err(Error::Empty("task registry"));
    }
    let embeddings: Vec<Vec<InstructionEmbedding>> = registry
        .adapters()
        .iter()
        .map(|a| a.kind().instructions().iter().map(|t| encoder.encode(t)).collect())
        .collect::<Result<_>>()?;
    model.set_stage(2, cfg.ablation);

    let mut prepared: Vec<[Option<Prepared>; 2]> = Vec::with_capacity(data.len());
    for s in &data.samples {
        let flipped = if cfg.augment {
            Some(prepare(model, registry, s.flipped())?)
        } else {
            None
        };
        prepared.push([Some(prepare(model, registry, s.clone())?), flipped]);
    }

    let seeds = SeedTree::new(cfg.seed);
    let mut adam = Adam::new(cfg.adam_betas.0, cfg.adam_betas.1);
    let per_epoch = batches(data.len(), cfg.batch);
    let total_steps = cfg.epochs * per_epoch;
    let n_tasks = registry.adapters().len();
    let mut logs = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = seeds.child("stage2.epoch", epoch as u64).stream("order");
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut items = Vec::with_capacity(data.len());
        for chunk in order.chunks(cfg.batch) {
            let t = step % n_tasks;
            let adapter = &registry.adapters()[t];
            let phr = &embeddings[t];
            let mut acc = Vec::new();
            for &i in chunk {
                let flip = cfg.augment && rng.gen_bool(0.5);
                let instruction = &phr[rng.gen_range(0..phr.len())];
                let p = prepared[i][usize::from(flip)].as_ref().expect("prepared orientation");
                let mut g = Graph::new();
                let (loss, b) = stage2_graph(&mut g, model, p, adapter, t, instruction, extractor, cfg)?;
                check_loss(g.value(loss).item(), 2, epoch, &p.sample.id, &b)?;
                items.push(b);
                accumulate_grads(&mut acc, g.backward(loss).params(&g));
            }
            let k = 1.0 / chunk.len() as f64;
            acc.iter_mut().for_each(|(_, t)| t.scale_assign(k));
            adam.step(&mut model.store, &acc, cosine_lr(cfg.lr, step, total_steps));
            step += 1;
        }
        let log = EpochLog::from_breakdowns(epoch + 1, "train", &items, true);
        on_epoch(&log);
        logs.push(log);
        if let Some(v) = val {
            let b = held_out_breakdowns(model, v, registry, encoder, extractor, &cfg.loss, cfg.ablation)?;
            let log = EpochLog::from_breakdowns(epoch + 1, "val", &b, true);
            on_epoch(&log);
            logs.push(log);
        }
    }
    Ok(logs)
}

/// Per-(sample, task) loss breakdowns of one closed-loop iteration, using each
/// task's first phrasing as the instruction. Order: sample-major, registry
/// order within a sample.
pub fn held_out_breakdowns(
    model: &Model,
    data: &Dataset,
    registry: &TaskRegistry,
    encoder: &dyn TextEncoder,
    extractor: &PerceptualExtractor,
    weights: &LossWeights,
    ablation: Ablation,
) -> Result<Vec<LossBreakdown>> {
    weights.validate()?;
    let cfg = TrainConfig {
        loss: *weights,
        ablation,
        ..TrainConfig::stage2()
    };
    let instr: Vec<InstructionEmbedding> = registry
        .adapters()
        .iter()
        .map(|a| encoder.encode(a.kind().instructions()[0]))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(data.len() * registry.adapters().len());
    for s in &data.samples {
        let p = prepare(model, registry, s.clone())?;
        for (t, adapter) in registry.adapters().iter().enumerate() {
            let mut g = Graph::new();
            let (_, b) = stage2_graph(&mut g, model, &p, adapter, t, &instr[t], extractor, &cfg)?;
            out.push(b);
        }
    }
    Ok(out)
}

/// Picks the downstream task named by an instruction.
pub fn route_instruction<'r>(registry: &'r TaskRegistry, text: &str) -> Result<&'r ToyAdapter> {
    registry.route(text)
}

/// Ground truth used to score loop iterations.
#[derive(Clone, Copy, Debug)]
pub struct Reference<'a> {
    pub clear: &'a Tensor,
    pub target: &'a TaskTarget,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoopStep {
    pub iteration: usize,
    /// Mean absolute change from the previous image.
    pub change: f64,
    pub task_loss: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopTrace {
    pub task: TaskKind,
    pub instruction: String,
    pub steps: Vec<LoopStep>,
}

#[derive(Clone, Debug)]
pub struct LoopResult {
    /// `J'`
    pub initial: Tensor,
    /// `J'_w` after the last iteration.
    pub image: Tensor,
    pub output: TaskOutput,
    pub trace: LoopTrace,
}

/// Closed-loop inference. Each of `k_max` iterations feeds the current image
/// to the routed task, builds the modulation from its feedback and the
/// instruction, and re-decodes the cached encoder features.
#[allow(clippy::too_many_arguments)]
pub fn closed_loop_infer(
    model: &Model,
    hazy: &Tensor,
    instruction: &str,
    registry: &TaskRegistry,
    encoder: &dyn TextEncoder,
    k_max: usize,
    ablation: Ablation,
    reference: Option<Reference>,
) -> Result<LoopResult> {
    if k_max == 0 {
        return Err(Error::Config("loop.k_max must be >= 1".into()));
    }
    let adapter = route_instruction(registry, instruction)?;
    let f_t = encoder.encode(instruction)?;
    let cache = model.idn.encode_cached(&model.store, hazy)?;
    let initial = model.open_loop(hazy)?;
    let mut current = initial.clone();
    let mut steps = Vec::with_capacity(k_max);
    for iteration in 1..=k_max {
        let feedback = adapter.feedback(&current);
        let mut g = Graph::new();
        let jw = model.modulated_graph(&mut g, &cache, &current, &feedback, &f_t, ablation)?;
        let next = g.value(jw).clone();
        next.ensure_finite("modulated output")?;
        let change = next.data().iter().zip(current.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / next.len() as f64;
        let (task_loss, psnr, ssim) = match reference {
            Some(r) => {
                let out = adapter.run(&next);
                (
                    Some(adapter.loss(&out, r.target)?),
                    Some(metrics::psnr(&next, r.clear)?),
                    metrics::ssim(&next, r.clear).ok(),
                )
            }
            None => (None, None, None),
        };
        steps.push(LoopStep {
            iteration,
            change,
            task_loss,
            psnr,
            ssim,
        });
        current = next;
    }
    let output = adapter.run(&current);
    Ok(LoopResult {
        initial,
        image: current,
        output,
        trace: LoopTrace {
            task: adapter.kind(),
            instruction: String::from(instruction),
            steps,
        },
    })
}

/// Per-image evaluation table; `aggregate` holds column means.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl EvalReport {
    pub fn aggregate(&self) -> Vec<f64> {
        let n = self.rows.len().max(1) as f64;
        (0..self.columns.len())
            .map(|c| self.rows.iter().map(|(_, v)| v[c]).sum::<f64>() / n)
            .collect()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.columns.iter().position(|n| n == name)?;
        Some(self.rows.iter().map(|(_, v)| v[c]).collect())
    }

    pub fn mean(&self, name: &str) -> Option<f64> {
        let c = self.column(name)?;
        Some(c.iter().sum::<f64>() / c.len().max(1) as f64)
    }
}

/// How [`evaluate`] runs the closed loop, if at all.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClosedLoopEval {
    pub k_max: usize,
    pub ablation: Ablation,
}

fn task_columns(prefix: &str, kind: TaskKind, cols: &mut Vec<String>) {
    cols.push(format!("{prefix}{}_loss", kind.name()));
    for m in metric_names(kind) {
        cols.push(format!("{prefix}{}_{m}", kind.name()));
    }
}

fn task_values(adapter: &ToyAdapter, image: &Tensor, target: &TaskTarget, row: &mut Vec<f64>) -> Result<()> {
    let out = adapter.run(image);
    row.push(adapter.loss(&out, target)?);
    let rep = task_metric(&out, target)?;
    for m in metric_names(adapter.kind()) {
        row.push(rep.get(m).unwrap_or(f64::NAN));
    }
    Ok(())
}

/// Quality and task metrics of the open-loop output for every sample, plus
/// per-task closed-loop columns when `closed` is given. Closed-loop rows use
/// each task's first phrasing as the instruction.
pub fn evaluate(
    model: &Model,
    data: &Dataset,
    registry: &TaskRegistry,
    encoder: &dyn TextEncoder,
    extractor: &PerceptualExtractor,
    closed: Option<ClosedLoopEval>,
) -> Result<EvalReport> {
    let mut columns: Vec<String> = ["psnr", "ssim", "perceptual"].iter().map(|s| String::from(*s)).collect();
    for a in registry.adapters() {
        task_columns("", a.kind(), &mut columns);
    }
    if closed.is_some() {
        for a in registry.adapters() {
            let k = a.kind().name();
            for q in ["psnr", "ssim", "perceptual"] {
                columns.push(format!("closed_{k}_{q}"));
            }
            task_columns("closed_", a.kind(), &mut columns);
        }
    }
    let mut rows = Vec::with_capacity(data.len());
    for s in &data.samples {
        let initial = model.open_loop(&s.hazy)?;
        let mut row = vec![
            metrics::psnr(&initial, &s.clear)?,
            metrics::ssim(&initial, &s.clear)?,
            metrics::perceptual_distance(&initial, &s.clear, extractor)?,
        ];
        let targets: Vec<TaskTarget> = registry.adapters().iter().map(|a| s.target(a.kind())).collect();
        for (a, t) in registry.adapters().iter().zip(&targets) {
            task_values(a, &initial, t, &mut row)?;
        }
        if let Some(c) = closed {
            for (a, t) in registry.adapters().iter().zip(&targets) {
                let r = closed_loop_infer(model, &s.hazy, a.kind().instructions()[0], registry, encoder, c.k_max, c.ablation, None)?;
                row.push(metrics::psnr(&r.image, &s.clear)?);
                row.push(metrics::ssim(&r.image, &s.clear)?);
                row.push(metrics::perceptual_distance(&r.image, &s.clear, extractor)?);
                task_values(a, &r.image, t, &mut row)?;
            }
        }
        rows.push((s.id.clone(), row));
    }
    Ok(EvalReport { columns, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model() -> Model {
        let cfg = ModelConfig {
            idn: IdnConfig {
                channels: [4, 8, 8],
                ..IdnConfig::default()
            },
            text_dim: 8,
        };
        Model::new(cfg, &SeedTree::new(1)).unwrap()
    }

    #[test]
    fn flip_is_an_involution() {
        let d = synth_dataset(1, 16, &HazeRanges::default(), &SeedTree::new(3), "s").unwrap();
        let s = &d.samples[0];
        let ff = s.flipped().flipped();
        assert_eq!(ff.clear, s.clear);
        assert_eq!(ff.depth, s.depth);
        for (a, b) in ff.boxes.iter().zip(&s.boxes) {
            assert!((a.x - b.x).abs() < 1e-12);
        }
    }

    #[test]
    fn synth_is_seed_deterministic() {
        let a = synth_dataset(3, 16, &HazeRanges::default(), &SeedTree::new(9), "s").unwrap();
        let b = synth_dataset(3, 16, &HazeRanges::default(), &SeedTree::new(9), "s").unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.hazy, y.hazy);
        }
    }

    #[test]
    fn stage_flags() {
        let mut m = small_model();
        m.set_stage(2, Ablation::default());
        for id in m.store.ids() {
            assert_eq!(m.store.is_trainable(id), !m.store.name(id).starts_with("idn."));
        }
        m.set_stage(2, Ablation { no_igm: true, no_tfga: false });
        for id in m.store.ids() {
            assert_eq!(m.store.is_trainable(id), m.store.name(id).starts_with("tfga."));
        }
    }

    #[test]
    fn k_max_zero_rejected() {
        let m = small_model();
        let reg = TaskRegistry::new(vec![]);
        let enc = crate::igm::HashTextEncoder::new(8, &mut SeedTree::new(0).stream("t"));
        let x = Tensor::full(&[3, 8, 8], 0.5);
        assert!(matches!(
            closed_loop_infer(&m, &x, "segment", &reg, &enc, 0, Ablation::default(), None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::stage1();
        assert_eq!(c.epochs, 300);
        assert_eq!(TrainConfig::stage2().epochs, 100);
        assert!(c.validate().is_ok());
        c.loss.beta1 = 0.5;
        assert!(c.validate().is_err());
        let c = TrainConfig { epochs: 0, ..TrainConfig::stage1() };
        assert!(c.validate().is_err());
    }
}
