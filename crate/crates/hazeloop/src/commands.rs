//! The four subcommands. Each prints the resolved configuration first and
//! writes its artefacts under `data.out_dir`.

use std::io::Write;
use std::path::{Path, PathBuf};

use hazeloop_core::downstream::{TaskAdapter, TaskRegistry};
use hazeloop_core::igm::{HashTextEncoder, TextEncoder};
use hazeloop_core::losses::PerceptualExtractor;
use hazeloop_core::pipeline::{
    self, closed_loop_infer, evaluate, initial_registry, synth_dataset, train_stage1, train_stage2, Ablation,
    ClosedLoopEval, Dataset, EvalReport, Model,
};
use hazeloop_core::rng::SeedTree;

use crate::ckpt::{self, write_bytes};
use crate::config::{Config, PerceptualKind, TextKind};
use crate::error::{Error, Result};
use crate::freeze::idn_hash;
use crate::{image_io, manifest, report};

pub const IDN_CKPT: &str = "idn.ckpt";
pub const TASKS_CKPT: &str = "tasks.ckpt";
pub const STAGE2_CKPT: &str = "stage2.ckpt";
pub const REPORT_CSV: &str = "report.csv";

pub fn stage_log(stage: u8) -> String {
    format!("stage{stage}.log")
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn announce(cfg: &Config, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "# resolved config").map_err(io_err)?;
    write!(out, "{cfg}").map_err(io_err)
}

fn seeds(cfg: &Config) -> SeedTree {
    SeedTree::new(cfg.seed)
}

/// The procedural set `synth` writes and training falls back to.
fn procedural(cfg: &Config, split: &str) -> Result<Dataset> {
    Ok(synth_dataset(cfg.count, cfg.size, &cfg.haze, &seeds(cfg).child(split, 0), split)?)
}

pub fn train_data(cfg: &Config) -> Result<Dataset> {
    match &cfg.manifest {
        Some(m) => manifest::load_dataset(m, &cfg.haze, &seeds(cfg).child("manifest.train", 0)),
        None => procedural(cfg, "train"),
    }
}

/// `data.eval_manifest`, else the training manifest, else a procedural
/// set disjoint from the training one.
pub fn eval_data(cfg: &Config) -> Result<Dataset> {
    match cfg.eval_manifest.as_ref().or(cfg.manifest.as_ref()) {
        Some(m) => manifest::load_dataset(m, &cfg.haze, &seeds(cfg).child("manifest.eval", 0)),
        None => procedural(cfg, "eval"),
    }
}

pub fn extractor(cfg: &Config) -> Result<PerceptualExtractor> {
    match (cfg.perceptual, &cfg.perceptual_file) {
        (PerceptualKind::File, Some(p)) => ckpt::read_extractor(p),
        (PerceptualKind::File, None) => Err(Error::Config("perceptual.kind = file needs perceptual.file".into())),
        (PerceptualKind::Toy, _) => Ok(PerceptualExtractor::toy(&mut seeds(cfg).stream("extractor"))),
    }
}

pub fn text_encoder(cfg: &Config) -> Result<Box<dyn TextEncoder>> {
    let dim = cfg.model().text_dim;
    let enc: Box<dyn TextEncoder> = match (cfg.text, &cfg.text_file) {
        (TextKind::File, Some(p)) => Box::new(ckpt::read_embeddings(p)?),
        (TextKind::File, None) => return Err(Error::Config("text.kind = file needs text.file".into())),
        (TextKind::Hash, _) => Box::new(HashTextEncoder::new(dim, &mut seeds(cfg).stream("text"))),
    };
    if enc.dim() != dim {
        return Err(Error::Config(format!("text encoder dim {} does not match model text dim {dim}", enc.dim())));
    }
    Ok(enc)
}

fn out_path(cfg: &Config, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn save_registry(path: &Path, reg: &TaskRegistry) -> Result<()> {
    ckpt::write_checkpoint(path, reg.adapters().iter().flat_map(|a| a.store.iter()))
}

pub fn load_registry(cfg: &Config) -> Result<TaskRegistry> {
    let path = out_path(cfg, TASKS_CKPT);
    let entries = ckpt::read_checkpoint(&path)?;
    let mut reg = initial_registry(cfg.seed);
    for a in reg.adapters_mut() {
        let prefix = format!("task.{}.", a.kind().name());
        a.store
            .load(entries.iter().filter(|(n, _)| n.starts_with(&prefix)).map(|(n, t)| (n.as_str(), t)))
            .map_err(|e| Error::format(&path, e.to_string()))?;
        a.freeze();
    }
    Ok(reg)
}

/// The model with its stage-1 weights, plus the stage-2 weights when present.
/// Returns whether stage-2 weights were found.
pub fn load_model(cfg: &Config) -> Result<(Model, bool)> {
    let mut model = load_model_stage1(cfg)?;
    let s2 = out_path(cfg, STAGE2_CKPT);
    let has_stage2 = s2.exists();
    if has_stage2 {
        ckpt::load_store(&s2, &mut model.store)?;
    }
    Ok((model, has_stage2))
}

fn write_log(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = String::from(report::LOG_HEADER);
    text.push('\n');
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    write_bytes(path, text.as_bytes())
}

pub fn cmd_synth(cfg: &Config, out: &mut dyn Write) -> Result<PathBuf> {
    announce(cfg, out)?;
    cfg.validate()?;
    let data = procedural(cfg, "train")?;
    let path = manifest::write_dataset(&cfg.out_dir, &data)?;
    writeln!(out, "wrote {} samples; manifest {}", data.len(), path.display()).map_err(io_err)?;
    Ok(path)
}

pub fn cmd_train(cfg: &Config, out: &mut dyn Write) -> Result<PathBuf> {
    announce(cfg, out)?;
    cfg.validate()?;
    let train_cfg = cfg.train()?;
    let data = train_data(cfg)?;
    let ex = extractor(cfg)?;
    let mut lines = Vec::new();
    let mut emit = |l: &pipeline::EpochLog, out: &mut dyn Write| {
        let line = report::log_line(l);
        let _ = writeln!(out, "{line}");
        lines.push(line);
    };
    let ckpt_path = match cfg.stage {
        1 => {
            let mut model = Model::new(cfg.model(), &seeds(cfg))?;
            writeln!(out, "{}", report::LOG_HEADER).map_err(io_err)?;
            train_stage1(&mut model, &data, &ex, &train_cfg, |l| emit(l, out))?;
            let path = out_path(cfg, IDN_CKPT);
            ckpt::save_store(&path, &model.store, &["idn."])?;
            let reg = pipeline::pretrain_registry(&data, &cfg.tasks())?;
            save_registry(&out_path(cfg, TASKS_CKPT), &reg)?;
            path
        }
        _ => {
            let mut model = load_model_stage1(cfg)?;
            let reg = load_registry(cfg)?;
            let enc = text_encoder(cfg)?;
            let val = eval_data(cfg)?;
            let before = idn_hash(&model.store);
            writeln!(out, "idn hash before: {before}\n{}", report::LOG_HEADER).map_err(io_err)?;
            train_stage2(&mut model, &data, &reg, enc.as_ref(), &ex, &train_cfg, Some(&val), |l| emit(l, out))?;
            let after = idn_hash(&model.store);
            writeln!(out, "idn hash after: {after}").map_err(io_err)?;
            if before != after {
                return Err(Error::Config("stage 2 modified the frozen network".into()));
            }
            let path = out_path(cfg, STAGE2_CKPT);
            ckpt::save_store(&path, &model.store, &["idn.", "tfga.", "igm."])?;
            path
        }
    };
    write_log(&out_path(cfg, &stage_log(cfg.stage)), &lines)?;
    writeln!(out, "wrote {}", ckpt_path.display()).map_err(io_err)?;
    Ok(ckpt_path)
}

/// Stage-1 weights only; stage 2 always starts from fresh modulation heads.
fn load_model_stage1(cfg: &Config) -> Result<Model> {
    let mut model = Model::new(cfg.model(), &seeds(cfg))?;
    ckpt::load_store(&out_path(cfg, IDN_CKPT), &mut model.store)?;
    Ok(model)
}

/// Dehazes one image. Writes the result to `output` and the loop trace to
/// `output` with a `.trace.csv` suffix. Without stage-2 weights the
/// open-loop result is written and a warning printed.
pub fn cmd_infer(
    cfg: &Config,
    image: &Path,
    instruction: &str,
    output: &Path,
    out: &mut dyn Write,
    warn: &mut dyn Write,
) -> Result<PathBuf> {
    announce(cfg, out)?;
    cfg.validate()?;
    let hazy = image_io::read_image(image)?;
    let (model, has_stage2) = load_model(cfg)?;
    let reg = load_registry(cfg)?;
    let adapter = pipeline::route_instruction(&reg, instruction)?;
    writeln!(out, "route: {} <- {instruction:?}", adapter.name()).map_err(io_err)?;
    let trace_path = PathBuf::from(format!("{}.trace.csv", output.display()));
    if has_stage2 {
        let enc = text_encoder(cfg)?;
        let r = closed_loop_infer(&model, &hazy, instruction, &reg, enc.as_ref(), cfg.k_max, Ablation::default(), None)?;
        image_io::write_image(output, &r.image)?;
        let trace = report::trace_csv(&r.trace);
        write!(out, "{trace}").map_err(io_err)?;
        write_bytes(&trace_path, trace.as_bytes())?;
    } else {
        writeln!(warn, "warning: no {STAGE2_CKPT} in {}; writing the open-loop result", cfg.out_dir.display())
            .map_err(io_err)?;
        let j = model.open_loop(&hazy)?;
        image_io::write_image(output, &j)?;
        let trace = format!("# instruction: {instruction}\n# open loop: {}\n{}\n", adapter.name(), report::TRACE_HEADER);
        write_bytes(&trace_path, trace.as_bytes())?;
    }
    writeln!(out, "wrote {}", output.display()).map_err(io_err)?;
    Ok(output.to_path_buf())
}

/// Scores the evaluation set; closed-loop columns appear when stage-2
/// weights exist.
pub fn cmd_eval(cfg: &Config, out: &mut dyn Write) -> Result<(PathBuf, EvalReport)> {
    announce(cfg, out)?;
    cfg.validate()?;
    let (model, has_stage2) = load_model(cfg)?;
    let reg = load_registry(cfg)?;
    let enc = text_encoder(cfg)?;
    let ex = extractor(cfg)?;
    let data = eval_data(cfg)?;
    let closed = has_stage2.then_some(ClosedLoopEval {
        k_max: cfg.k_max,
        ablation: Ablation::default(),
    });
    let rep = evaluate(&model, &data, &reg, enc.as_ref(), &ex, closed)?;
    let path = out_path(cfg, REPORT_CSV);
    write_bytes(&path, report::report_csv(&rep).as_bytes())?;
    for (c, m) in rep.columns.iter().zip(rep.aggregate()) {
        writeln!(out, "{c} = {m}").map_err(io_err)?;
    }
    writeln!(out, "wrote {}", path.display()).map_err(io_err)?;
    Ok((path, rep))
}
