//! Downstream tasks: the adapter interface, three small convolutional
//! stand-ins (segmentation, depth, detection) and the task metrics.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Unary, Var};
use crate::haze::DepthMap;
use crate::layers::Conv2d;
use crate::param::{Init, ParamStore};
use crate::scene::{self, BoxAnn};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Seg,
    Depth,
    Det,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Seg, TaskKind::Depth, TaskKind::Det];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Seg => "seg",
            TaskKind::Depth => "depth",
            TaskKind::Det => "det",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Instruction keywords routed to this task.
    pub fn keywords(self) -> &'static [&'static str] {
        match self {
            TaskKind::Seg => &["segment", "segmentation"],
            TaskKind::Depth => &["depth"],
            TaskKind::Det => &["detect", "detection"],
        }
    }

    /// Example instructions, used to sample stage-2 training prompts.
    pub fn instructions(self) -> &'static [&'static str] {
        match self {
            TaskKind::Seg => &["segment the scene", "please perform semantic segmentation of this photo"],
            TaskKind::Depth => &["estimate depth", "predict the depth of every pixel"],
            TaskKind::Det => &["detect the bright objects", "run object detection on the image"],
        }
    }
}

/// What a task hands back to the feedback adapter.
pub type FeedbackKind = TaskKind;

/// Segmentation and depth feed back their output maps; detection feeds back
/// the last backbone feature map.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskFeedback {
    SegLogits(Tensor),
    Depth(Tensor),
    DetFeatures(Tensor),
}

impl TaskFeedback {
    pub fn kind(&self) -> FeedbackKind {
        match self {
            TaskFeedback::SegLogits(_) => TaskKind::Seg,
            TaskFeedback::Depth(_) => TaskKind::Depth,
            TaskFeedback::DetFeatures(_) => TaskKind::Det,
        }
    }

    pub fn tensor(&self) -> &Tensor {
        match self {
            TaskFeedback::SegLogits(t) | TaskFeedback::Depth(t) | TaskFeedback::DetFeatures(t) => t,
        }
    }
}

/// Raw task prediction `ỹ'`.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskOutput {
    /// `(2, H, W)` class logits.
    SegLogits(Tensor),
    /// `(1, H, W)` positive depth.
    Depth(Tensor),
    /// `(5, H/2, W/2)`: objectness logit and `(dx, dy, w, h)` in image-size units.
    Det(Tensor),
}

impl TaskOutput {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskOutput::SegLogits(_) => TaskKind::Seg,
            TaskOutput::Depth(_) => TaskKind::Depth,
            TaskOutput::Det(_) => TaskKind::Det,
        }
    }

    pub fn tensor(&self) -> &Tensor {
        match self {
            TaskOutput::SegLogits(t) | TaskOutput::Depth(t) | TaskOutput::Det(t) => t,
        }
    }
}

/// Dense detection targets on the stride-2 grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DetTarget {
    pub objectness: Vec<f64>,
    /// `(4, H/2, W/2)` regression targets, meaningful at positive cells only.
    pub offsets: Tensor,
    pub boxes: Vec<BoxAnn>,
    pub image_size: (usize, usize),
}

/// Ground truth `ỹ_gt`.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskTarget {
    Seg(Vec<usize>),
    Depth(DepthMap),
    Det(DetTarget),
}

impl TaskTarget {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskTarget::Seg(_) => TaskKind::Seg,
            TaskTarget::Depth(_) => TaskKind::Depth,
            TaskTarget::Det(_) => TaskKind::Det,
        }
    }

    pub fn for_scene(kind: TaskKind, clear: &Tensor, depth: &DepthMap, boxes: &[BoxAnn]) -> Self {
        match kind {
            TaskKind::Seg => TaskTarget::Seg(scene::seg_labels(clear)),
            TaskKind::Depth => TaskTarget::Depth(depth.clone()),
            TaskKind::Det => {
                let (_, h, w) = clear.chw();
                TaskTarget::Det(det_target(boxes, h, w))
            }
        }
    }
}

pub const DET_STRIDE: usize = 2;

/// A cell is positive when its centre falls inside a box; it regresses that
/// box's centre offset and size, normalised by the image width/height.
pub fn det_target(boxes: &[BoxAnn], h: usize, w: usize) -> DetTarget {
    let (gh, gw) = (h / DET_STRIDE, w / DET_STRIDE);
    let mut objectness = vec![0.0; gh * gw];
    let mut offsets = Tensor::zeros(&[4, gh, gw]);
    let n = gh * gw;
    for cy in 0..gh {
        for cx in 0..gw {
            let (px, py) = cell_center(cx, cy);
            if let Some(b) = boxes.iter().find(|b| b.contains(px, py)) {
                let i = cy * gw + cx;
                objectness[i] = 1.0;
                let (bx, by) = b.center();
                let o = offsets.data_mut();
                o[i] = (bx - px) / w as f64;
                o[n + i] = (by - py) / h as f64;
                o[2 * n + i] = b.w / w as f64;
                o[3 * n + i] = b.h / h as f64;
            }
        }
    }
    DetTarget {
        objectness,
        offsets,
        boxes: boxes.to_vec(),
        image_size: (h, w),
    }
}

fn cell_center(cx: usize, cy: usize) -> (f64, f64) {
    (
        (cx as f64 + 0.5) * DET_STRIDE as f64,
        (cy as f64 + 0.5) * DET_STRIDE as f64,
    )
}

/// Detection with a confidence score, `(x, y, w, h, score)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
}

impl ScoredBox {
    pub fn as_box(&self) -> BoxAnn {
        BoxAnn {
            x: self.x,
            y: self.y,
            w: self.w,
            h: self.h,
        }
    }
}

/// Named metric values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub entries: Vec<(&'static str, f64)>,
}

impl MetricReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }

    fn push(&mut self, name: &'static str, v: f64) {
        self.entries.push((name, v));
    }
}

/// Metric column names reported per task, in order.
pub fn metric_names(kind: TaskKind) -> &'static [&'static str] {
    match kind {
        TaskKind::Seg => &["miou"],
        TaskKind::Depth => &["absrel", "sqrel", "rmse", "rmselog", "delta1", "delta2", "delta3"],
        TaskKind::Det => &["ap50", "ap"],
    }
}

/// Graph outputs of one task network.
#[derive(Clone, Copy, Debug)]
pub struct TaskVars {
    pub output: Var,
    pub feedback: Var,
}

/// A downstream task model viewed through the closed loop.
pub trait TaskAdapter {
    fn kind(&self) -> TaskKind;

    fn name(&self) -> &str {
        self.kind().name()
    }

    /// Builds the network on `g`. Gradients flow to `image`; the task's own
    /// parameters follow their store's trainable flags.
    fn forward(&self, g: &mut Graph, image: Var) -> TaskVars;

    /// Differentiable task loss `ℓ_task(ỹ_gt, ỹ')` of a graph output.
    fn loss_var(&self, g: &mut Graph, output: Var, target: &TaskTarget) -> Result<Var>;

    fn run(&self, image: &Tensor) -> TaskOutput {
        let (out, _) = self.run_with_feedback(image);
        out
    }

    fn feedback(&self, image: &Tensor) -> TaskFeedback {
        let (_, fb) = self.run_with_feedback(image);
        fb
    }

    fn run_with_feedback(&self, image: &Tensor) -> (TaskOutput, TaskFeedback) {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let v = self.forward(&mut g, x);
        wrap_outputs(self.kind(), g.value(v.output).clone(), g.value(v.feedback).clone())
    }

    fn loss(&self, pred: &TaskOutput, target: &TaskTarget) -> Result<f64> {
        if pred.kind() != self.kind() || target.kind() != self.kind() {
            return Err(Error::Adapter(format!(
                "{} adapter given {:?} prediction and {:?} target",
                self.name(),
                pred.kind(),
                target.kind()
            )));
        }
        let mut g = Graph::new();
        let p = g.constant(pred.tensor().clone());
        let l = self.loss_var(&mut g, p, target)?;
        Ok(g.value(l).item())
    }

    fn metric(&self, pred: &TaskOutput, target: &TaskTarget) -> Result<MetricReport> {
        task_metric(pred, target)
    }
}

fn wrap_outputs(kind: TaskKind, out: Tensor, fb: Tensor) -> (TaskOutput, TaskFeedback) {
    match kind {
        TaskKind::Seg => (TaskOutput::SegLogits(out), TaskFeedback::SegLogits(fb)),
        TaskKind::Depth => (TaskOutput::Depth(out), TaskFeedback::Depth(fb)),
        TaskKind::Det => (TaskOutput::Det(out), TaskFeedback::DetFeatures(fb)),
    }
}

/// Feedback payload channel counts of the toy adapters.
pub fn feedback_channels(kind: TaskKind) -> usize {
    match kind {
        TaskKind::Seg => 2,
        TaskKind::Depth => 1,
        TaskKind::Det => ToyAdapter::WIDTH,
    }
}

pub const MIN_DEPTH: f64 = 0.1;

/// Three-layer convolutional head. Segmentation and depth keep full
/// resolution; detection downsamples once and predicts on the stride-2 grid.
#[derive(Clone, Debug)]
pub struct ToyAdapter {
    kind: TaskKind,
    pub store: ParamStore,
    convs: [Conv2d; 3],
}

impl ToyAdapter {
    pub const WIDTH: usize = 16;

    pub fn new(kind: TaskKind, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        let prefix = format!("task.{}", kind.name());
        let mut init = Init::new(&mut store, rng, &prefix);
        let w = Self::WIDTH;
        let convs = match kind {
            TaskKind::Seg => [
                Conv2d::new(&mut init, "conv1", 3, w, 3, 1),
                Conv2d::new(&mut init, "conv2", w, w, 3, 1),
                Conv2d::new(&mut init, "conv3", w, 2, 3, 1),
            ],
            TaskKind::Depth => [
                Conv2d::new(&mut init, "conv1", 3, w, 3, 1),
                Conv2d::new(&mut init, "conv2", w, w, 3, 1),
                Conv2d::new(&mut init, "conv3", w, 1, 3, 1),
            ],
            TaskKind::Det => [
                Conv2d::new(&mut init, "conv1", 3, w, 3, DET_STRIDE),
                Conv2d::new(&mut init, "conv2", w, w, 3, 1),
                Conv2d::new(&mut init, "conv3", w, 5, 1, 1),
            ],
        };
        Self { kind, store, convs }
    }

    pub fn freeze(&mut self) {
        self.store.freeze_all();
    }
}

impl TaskAdapter for ToyAdapter {
    fn kind(&self) -> TaskKind {
        self.kind
    }

    fn forward(&self, g: &mut Graph, image: Var) -> TaskVars {
        let ps = &self.store;
        let h = self.convs[0].forward(g, ps, image);
        let h = g.gelu(h);
        let h = self.convs[1].forward(g, ps, h);
        let h = g.gelu(h);
        let z = self.convs[2].forward(g, ps, h);
        match self.kind {
            TaskKind::Seg => TaskVars { output: z, feedback: z },
            TaskKind::Depth => {
                let d = g.unary(z, Unary::Softplus);
                let d = g.add_const(d, MIN_DEPTH);
                TaskVars { output: d, feedback: d }
            }
            TaskKind::Det => TaskVars { output: z, feedback: h },
        }
    }

    fn loss_var(&self, g: &mut Graph, output: Var, target: &TaskTarget) -> Result<Var> {
        task_loss_var(g, self.kind, output, target)
    }
}

/// Differentiable task losses: per-pixel cross-entropy (seg), l1 on depth,
/// objectness BCE plus l1 on offsets at positive cells (det).
pub fn task_loss_var(g: &mut Graph, kind: TaskKind, output: Var, target: &TaskTarget) -> Result<Var> {
    if target.kind() != kind {
        return Err(Error::Adapter(format!("{kind:?} loss given a {:?} target", target.kind())));
    }
    match target {
        TaskTarget::Seg(labels) => {
            let (k, h, w) = g.value(output).chw();
            if k != 2 || labels.len() != h * w {
                return Err(shape_err("seg loss", g.shape(output), &[2, labels.len()]));
            }
            Ok(g.cross_entropy(output, labels))
        }
        TaskTarget::Depth(depth) => {
            let t = depth.to_tensor();
            if g.shape(output) != t.shape() {
                return Err(shape_err("depth loss", g.shape(output), t.shape()));
            }
            let t = g.constant(t);
            let d = g.sub(output, t);
            let d = g.abs(d);
            Ok(g.mean(d))
        }
        TaskTarget::Det(det) => {
            let s = g.shape(output).to_vec();
            let (gh, gw) = (det.image_size.0 / DET_STRIDE, det.image_size.1 / DET_STRIDE);
            if s != [5, gh, gw] {
                return Err(shape_err("det loss", &s, &[5, gh, gw]));
            }
            let logits = g.slice_channels(output, 0, 1);
            let y = g.constant(Tensor::from_vec(&[1, gh, gw], det.objectness.clone()).unwrap());
            // BCE with logits: softplus(z) − z·y
            let sp = g.unary(logits, Unary::Softplus);
            let zy = g.mul(logits, y);
            let bce = g.sub(sp, zy);
            let bce = g.mean(bce);
            let npos = det.objectness.iter().filter(|&&o| o > 0.5).count();
            if npos == 0 {
                return Ok(bce);
            }
            let off = g.slice_channels(output, 1, 4);
            let tgt = g.constant(det.offsets.clone());
            let mask = Tensor::from_fn(&[4, gh, gw], |i| det.objectness[i % (gh * gw)]);
            let mask = g.constant(mask);
            let d = g.sub(off, tgt);
            let d = g.abs(d);
            let d = g.mul(d, mask);
            let s = g.sum(d);
            let reg = g.scale(s, 1.0 / (4 * npos) as f64);
            Ok(g.add(bce, reg))
        }
    }
}

/// Converts a dense detection map into scored boxes with greedy NMS.
pub fn decode_detections(out: &Tensor, image_size: (usize, usize), score_threshold: f64) -> Vec<ScoredBox> {
    let (_, gh, gw) = out.chw();
    let (h, w) = (image_size.0 as f64, image_size.1 as f64);
    let n = gh * gw;
    let d = out.data();
    let mut cands = Vec::new();
    for cy in 0..gh {
        for cx in 0..gw {
            let i = cy * gw + cx;
            let score = crate::graph::sigmoid(d[i]);
            if score < score_threshold {
                continue;
            }
            let (px, py) = cell_center(cx, cy);
            let bw = d[3 * n + i] * w;
            let bh = d[4 * n + i] * h;
            if !(bw > 0.0 && bh > 0.0) {
                continue;
            }
            let bx = px + d[n + i] * w - 0.5 * bw;
            let by = py + d[2 * n + i] * h - 0.5 * bh;
            cands.push(ScoredBox {
                x: bx,
                y: by,
                w: bw,
                h: bh,
                score,
            });
        }
    }
    cands.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<ScoredBox> = Vec::new();
    for c in cands {
        if keep.iter().all(|k| iou(&k.as_box(), &c.as_box()) < 0.5) {
            keep.push(c);
        }
    }
    keep
}

pub fn iou(a: &BoxAnn, b: &BoxAnn) -> f64 {
    let ix = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let iy = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Mean over classes of intersection over union; classes absent from both
/// prediction and ground truth are skipped.
pub fn miou(pred: &[usize], gt: &[usize], num_classes: usize) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Empty("miou"));
    }
    if pred.len() != gt.len() {
        return Err(shape_err("miou", &[pred.len()], &[gt.len()]));
    }
    if let Some(&l) = pred.iter().chain(gt).find(|&&l| l >= num_classes) {
        return Err(Error::Input(format!("label {l} outside [0, {num_classes})")));
    }
    let mut inter = vec![0usize; num_classes];
    let mut union = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(gt) {
        if p == t {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[t] += 1;
        }
    }
    let (sum, n) = inter
        .iter()
        .zip(&union)
        .filter(|(_, &u)| u > 0)
        .fold((0.0, 0usize), |(s, n), (&i, &u)| (s + i as f64 / u as f64, n + 1));
    Ok(sum / n as f64)
}

/// Standard monocular depth errors and threshold accuracies.
pub fn depth_metrics(pred: &[f64], gt: &[f64]) -> Result<MetricReport> {
    if pred.is_empty() {
        return Err(Error::Empty("depth_metrics"));
    }
    if pred.len() != gt.len() {
        return Err(shape_err("depth_metrics", &[pred.len()], &[gt.len()]));
    }
    if pred.iter().chain(gt).any(|&d| !(d > 0.0 && d.is_finite())) {
        return Err(Error::Input("depth metrics need strictly positive finite depths".into()));
    }
    let n = pred.len() as f64;
    let (mut absrel, mut sqrel, mut se, mut sle) = (0.0, 0.0, 0.0, 0.0);
    let mut delta = [0usize; 3];
    for (&p, &t) in pred.iter().zip(gt) {
        let e = p - t;
        absrel += e.abs() / t;
        sqrel += e * e / t;
        se += e * e;
        let le = libm::log(p) - libm::log(t);
        sle += le * le;
        let r = (p / t).max(t / p);
        for (k, d) in delta.iter_mut().enumerate() {
            if r < libm::pow(1.25, (k + 1) as f64) {
                *d += 1;
            }
        }
    }
    let mut rep = MetricReport::default();
    rep.push("absrel", absrel / n);
    rep.push("sqrel", sqrel / n);
    rep.push("rmse", libm::sqrt(se / n));
    rep.push("rmselog", libm::sqrt(sle / n));
    rep.push("delta1", delta[0] as f64 / n);
    rep.push("delta2", delta[1] as f64 / n);
    rep.push("delta3", delta[2] as f64 / n);
    Ok(rep)
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// 11-point interpolated average precision of one class at one IoU threshold.
pub fn average_precision(pred: &[ScoredBox], gt: &[BoxAnn], threshold: f64) -> f64 {
    if gt.is_empty() {
        return if pred.is_empty() { 1.0 } else { 0.0 };
    }
    let mut order: Vec<&ScoredBox> = pred.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut matched = vec![false; gt.len()];
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(order.len());
    for (i, p) in order.iter().enumerate() {
        let best = gt
            .iter()
            .enumerate()
            .filter(|(j, _)| !matched[*j])
            .map(|(j, g)| (j, iou(&p.as_box(), g)))
            .max_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((j, v)) = best {
            if v >= threshold {
                matched[j] = true;
                tp += 1;
            }
        }
        curve.push((tp as f64 / gt.len() as f64, tp as f64 / (i + 1) as f64));
    }
    (0..=10)
        .map(|k| {
            let r = k as f64 / 10.0;
            curve
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|(_, prec)| *prec)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

/// AP at IoU 0.5 (`ap50`) and the mean over `thresholds` (`ap`).
pub fn simple_ap(pred: &[ScoredBox], gt: &[BoxAnn], thresholds: &[f64]) -> Result<MetricReport> {
    let bad = |x: f64, y: f64, w: f64, h: f64| !(x.is_finite() && y.is_finite() && w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite());
    if pred.iter().any(|b| bad(b.x, b.y, b.w, b.h) || !b.score.is_finite()) || gt.iter().any(|b| bad(b.x, b.y, b.w, b.h)) {
        return Err(Error::Input("malformed box: coordinates must be finite and sizes positive".into()));
    }
    if thresholds.is_empty() {
        return Err(Error::Empty("simple_ap thresholds"));
    }
    let mut rep = MetricReport::default();
    rep.push("ap50", average_precision(pred, gt, 0.5));
    let mean = thresholds.iter().map(|&t| average_precision(pred, gt, t)).sum::<f64>() / thresholds.len() as f64;
    rep.push("ap", mean);
    Ok(rep)
}

pub fn argmax_labels(logits: &Tensor) -> Vec<usize> {
    let (k, h, w) = logits.chw();
    let hw = h * w;
    let d = logits.data();
    (0..hw)
        .map(|p| (0..k).max_by(|&a, &b| d[a * hw + p].total_cmp(&d[b * hw + p])).unwrap())
        .collect()
}

/// Evaluation metrics of a task prediction against its target.
pub fn task_metric(pred: &TaskOutput, target: &TaskTarget) -> Result<MetricReport> {
    match (pred, target) {
        (TaskOutput::SegLogits(l), TaskTarget::Seg(gt)) => {
            let mut rep = MetricReport::default();
            rep.push("miou", miou(&argmax_labels(l), gt, 2)?);
            Ok(rep)
        }
        (TaskOutput::Depth(d), TaskTarget::Depth(gt)) => depth_metrics(d.data(), gt.values()),
        (TaskOutput::Det(o), TaskTarget::Det(t)) => {
            let boxes = decode_detections(o, t.image_size, 0.5);
            simple_ap(&boxes, &t.boxes, &coco_thresholds())
        }
        _ => Err(Error::Adapter(format!(
            "prediction {:?} does not match target {:?}",
            pred.kind(),
            target.kind()
        ))),
    }
}

/// Named collection of adapters; routing scans in insertion order.
pub struct TaskRegistry {
    adapters: Vec<ToyAdapter>,
}

impl TaskRegistry {
    pub fn new(adapters: Vec<ToyAdapter>) -> Self {
        Self { adapters }
    }

    pub fn get(&self, kind: TaskKind) -> Option<&ToyAdapter> {
        self.adapters.iter().find(|a| a.kind() == kind)
    }

    pub fn by_name(&self, name: &str) -> Option<&ToyAdapter> {
        self.adapters.iter().find(|a| a.name() == name)
    }

    pub fn adapters(&self) -> &[ToyAdapter] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [ToyAdapter] {
        &mut self.adapters
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.adapters.iter().map(|a| String::from(a.name())).collect()
    }

    /// First registered task with a keyword occurring as a word of `text`
    /// (case-insensitive).
    pub fn route(&self, text: &str) -> Result<&ToyAdapter> {
        if text.trim().is_empty() {
            return Err(Error::Input("instruction text is empty".into()));
        }
        let words: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| w.chars().flat_map(char::to_lowercase).collect())
            .collect();
        self.adapters
            .iter()
            .find(|a| a.kind().keywords().iter().any(|k| words.iter().any(|w| w == k)))
            .ok_or_else(|| Error::Routing {
                instruction: String::from(text),
                known: self.names(),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn miou_cases() {
        assert_eq!(miou(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap(), 1.0);
        let m = miou(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert!((m - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(miou(&[1, 1, 0, 0], &[0, 0, 1, 1], 2).unwrap(), 0.0);
        assert!(matches!(miou(&[], &[], 2), Err(Error::Empty(_))));
        assert!(miou(&[2], &[0], 2).is_err());
    }

    #[test]
    fn depth_cases() {
        let r = depth_metrics(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        for k in ["absrel", "sqrel", "rmse", "rmselog"] {
            assert_eq!(r.get(k), Some(0.0));
        }
        for k in ["delta1", "delta2", "delta3"] {
            assert_eq!(r.get(k), Some(1.0));
        }
        let r = depth_metrics(&[1.1, 1.8], &[1.0, 2.0]).unwrap();
        assert!((r.get("absrel").unwrap() - 0.1).abs() < 1e-12);
        assert!((r.get("rmse").unwrap() - libm::sqrt(0.025)).abs() < 1e-12);
        assert!(depth_metrics(&[0.0], &[1.0]).is_err());
    }

    #[test]
    fn delta_is_symmetric() {
        let a = [0.5, 1.0, 2.0, 3.0];
        let b = [0.7, 1.5, 1.9, 1.0];
        let ab = depth_metrics(&a, &b).unwrap();
        let ba = depth_metrics(&b, &a).unwrap();
        for k in ["delta1", "delta2", "delta3"] {
            assert_eq!(ab.get(k), ba.get(k));
        }
    }

    #[test]
    fn ap_cases() {
        let gt = [BoxAnn {
            x: 2.0,
            y: 2.0,
            w: 4.0,
            h: 4.0,
        }];
        let exact = ScoredBox {
            x: 2.0,
            y: 2.0,
            w: 4.0,
            h: 4.0,
            score: 0.9,
        };
        let far = ScoredBox {
            x: 20.0,
            y: 20.0,
            w: 4.0,
            h: 4.0,
            score: 0.8,
        };
        let t = coco_thresholds();
        assert_eq!(simple_ap(&[exact], &gt, &t).unwrap().get("ap"), Some(1.0));
        assert_eq!(simple_ap(&[], &gt, &t).unwrap().get("ap50"), Some(0.0));
        assert_eq!(simple_ap(&[exact, far], &gt, &t).unwrap().get("ap50"), Some(1.0));
        let bad = ScoredBox { w: -1.0, ..exact };
        assert!(simple_ap(&[bad], &gt, &t).is_err());
    }

    #[test]
    fn det_targets_round_trip_through_decoder() {
        let boxes = [BoxAnn {
            x: 4.0,
            y: 6.0,
            w: 6.0,
            h: 6.0,
        }];
        let t = det_target(&boxes, 16, 16);
        let (_, gh, gw) = t.offsets.chw();
        let mut out = Tensor::zeros(&[5, gh, gw]);
        let n = gh * gw;
        for i in 0..n {
            out.data_mut()[i] = if t.objectness[i] > 0.5 { 10.0 } else { -10.0 };
            for c in 0..4 {
                out.data_mut()[(c + 1) * n + i] = t.offsets.data()[c * n + i];
            }
        }
        let dets = decode_detections(&out, (16, 16), 0.5);
        assert_eq!(dets.len(), 1);
        assert!(iou(&dets[0].as_box(), &boxes[0]) > 0.999);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln2() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 4, 4]));
        let l = task_loss_var(&mut g, TaskKind::Seg, z, &TaskTarget::Seg(vec![1; 16])).unwrap();
        assert!((g.value(l).item() - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn loss_rejects_task_mismatch() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 4, 4]));
        let t = TaskTarget::Depth(DepthMap::constant(4, 4, 1.0).unwrap());
        assert!(matches!(task_loss_var(&mut g, TaskKind::Seg, z, &t), Err(Error::Adapter(_))));
    }
}
