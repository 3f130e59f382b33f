//! Flat `key = value` run configuration.

use std::fmt;
use std::path::{Path, PathBuf};

use hazeloop_core::haze::HazeRanges;
use hazeloop_core::idn::IdnConfig;
use hazeloop_core::losses::LossWeights;
use hazeloop_core::pipeline::{ModelConfig, TaskTrainConfig, TrainConfig};

use crate::ckpt::read_bytes;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PerceptualKind {
    Toy,
    File,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextKind {
    Hash,
    File,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    /// Training manifest; procedural data is generated when absent.
    pub manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    /// Destination of `synth` output, checkpoints, logs and reports.
    pub out_dir: PathBuf,
    pub count: usize,
    pub size: usize,
    pub haze: HazeRanges,
    pub channels: [usize; 3],
    pub stage: u8,
    /// `None` picks the stage default.
    pub epochs: Option<usize>,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub augment: bool,
    pub loss: LossWeights,
    pub perceptual: PerceptualKind,
    pub perceptual_file: Option<PathBuf>,
    pub text: TextKind,
    pub text_file: Option<PathBuf>,
    pub k_max: usize,
    pub task_epochs: usize,
    pub task_lr: f64,
}

impl Default for Config {
    fn default() -> Self {
        let tasks = TaskTrainConfig::default();
        let train = TrainConfig::stage1();
        Self {
            manifest: None,
            eval_manifest: None,
            out_dir: PathBuf::from("out"),
            count: 200,
            size: 32,
            haze: HazeRanges::default(),
            channels: IdnConfig::default().channels,
            stage: 1,
            epochs: None,
            lr: train.lr,
            batch: train.batch,
            seed: 0,
            augment: train.augment,
            loss: LossWeights::default(),
            perceptual: PerceptualKind::Toy,
            perceptual_file: None,
            text: TextKind::Hash,
            text_file: None,
            k_max: 1,
            task_epochs: tasks.epochs,
            task_lr: tasks.lr,
        }
    }
}

/// Every accepted key, in the order the resolved config is printed.
pub const KEYS: &[&str] = &[
    "data.manifest",
    "data.eval_manifest",
    "data.out_dir",
    "data.count",
    "data.size",
    "haze.beta_min",
    "haze.beta_max",
    "haze.A_min",
    "haze.A_max",
    "model.channels",
    "train.stage",
    "train.epochs",
    "train.lr",
    "train.batch",
    "train.seed",
    "train.augment",
    "loss.lambda",
    "loss.beta1",
    "loss.beta2",
    "loss.gamma",
    "perceptual.kind",
    "perceptual.file",
    "text.kind",
    "text.file",
    "loop.k_max",
    "tasks.epochs",
    "tasks.lr",
];

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("{key} = {v:?}: {e}")))
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl Config {
    /// Sets one key. Relative paths are taken as given.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "data.manifest" => self.manifest = opt_path(v),
            "data.eval_manifest" => self.eval_manifest = opt_path(v),
            "data.out_dir" => self.out_dir = PathBuf::from(v),
            "data.count" => self.count = parse(key, v)?,
            "data.size" => self.size = parse(key, v)?,
            "haze.beta_min" => self.haze.beta_min = parse(key, v)?,
            "haze.beta_max" => self.haze.beta_max = parse(key, v)?,
            "haze.A_min" => self.haze.a_min = parse(key, v)?,
            "haze.A_max" => self.haze.a_max = parse(key, v)?,
            "model.channels" => {
                let c: Vec<usize> = v.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?;
                self.channels = c
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key} = {v:?}: expected three comma-separated widths")))?;
            }
            "train.stage" => self.stage = parse(key, v)?,
            "train.epochs" => self.epochs = if v == "auto" { None } else { Some(parse(key, v)?) },
            "train.lr" => self.lr = parse(key, v)?,
            "train.batch" => self.batch = parse(key, v)?,
            "train.seed" => self.seed = parse(key, v)?,
            "train.augment" => self.augment = parse(key, v)?,
            "loss.lambda" => self.loss.lambda = parse(key, v)?,
            "loss.beta1" => self.loss.beta1 = parse(key, v)?,
            "loss.beta2" => self.loss.beta2 = parse(key, v)?,
            "loss.gamma" => self.loss.gamma = parse(key, v)?,
            "perceptual.kind" => {
                self.perceptual = match v {
                    "toy" => PerceptualKind::Toy,
                    "file" => PerceptualKind::File,
                    _ => return Err(Error::Config(format!("{key} must be toy or file, got {v:?}"))),
                }
            }
            "perceptual.file" => self.perceptual_file = opt_path(v),
            "text.kind" => {
                self.text = match v {
                    "hash" | "toy" => TextKind::Hash,
                    "file" => TextKind::File,
                    _ => return Err(Error::Config(format!("{key} must be hash or file, got {v:?}"))),
                }
            }
            "text.file" => self.text_file = opt_path(v),
            "loop.k_max" => self.k_max = parse(key, v)?,
            "tasks.epochs" => self.task_epochs = parse(key, v)?,
            "tasks.lr" => self.task_lr = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults. Blank lines and `#`
    /// comments are ignored; repeated keys keep the last value.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut c = Config::default();
        c.apply_lines(text)?;
        Ok(c)
    }

    fn apply_lines(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Loads a config file; relative data paths resolve against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = String::from_utf8(read_bytes(path)?).map_err(|_| Error::format(path, "config is not UTF-8"))?;
        let mut c = Config::parse_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut c.manifest, &mut c.eval_manifest, &mut c.perceptual_file, &mut c.text_file]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        if text.lines().any(|l| l.split('#').next().unwrap_or("").trim_start().starts_with("data.out_dir")) {
            fix(&mut c.out_dir);
        }
        Ok(c)
    }

    /// Applies `key=value` overrides, e.g. from the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.haze.validate()?;
        self.model().idn.validate()?;
        self.train()?.validate()?;
        if !(1..=2).contains(&self.stage) {
            return Err(Error::Config(format!("train.stage must be 1 or 2, got {}", self.stage)));
        }
        if self.k_max == 0 {
            return Err(Error::Config("loop.k_max must be >= 1".into()));
        }
        if self.count == 0 {
            return Err(Error::Config("data.count must be >= 1".into()));
        }
        if self.size < 16 || self.size % 4 != 0 {
            return Err(Error::Config(format!("data.size must be a multiple of 4 and >= 16, got {}", self.size)));
        }
        if self.task_epochs == 0 || !(self.task_lr > 0.0) {
            return Err(Error::Config("tasks.epochs and tasks.lr must be positive".into()));
        }
        if self.perceptual == PerceptualKind::File && self.perceptual_file.is_none() {
            return Err(Error::Config("perceptual.kind = file needs perceptual.file".into()));
        }
        if self.text == TextKind::File && self.text_file.is_none() {
            return Err(Error::Config("text.kind = file needs text.file".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            idn: IdnConfig {
                channels: self.channels,
                ..IdnConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(if self.stage == 2 {
            TrainConfig::stage2().epochs
        } else {
            TrainConfig::stage1().epochs
        })
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let base = if self.stage == 2 { TrainConfig::stage2() } else { TrainConfig::stage1() };
        Ok(TrainConfig {
            epochs: self.epochs(),
            lr: self.lr,
            batch: self.batch,
            seed: self.seed,
            loss: self.loss,
            augment: self.augment,
            ..base
        })
    }

    pub fn tasks(&self) -> TaskTrainConfig {
        TaskTrainConfig {
            epochs: self.task_epochs,
            lr: self.task_lr,
            batch: self.batch,
            seed: self.seed,
        }
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "data.manifest" => show_path(&self.manifest),
            "data.eval_manifest" => show_path(&self.eval_manifest),
            "data.out_dir" => self.out_dir.display().to_string(),
            "data.count" => self.count.to_string(),
            "data.size" => self.size.to_string(),
            "haze.beta_min" => self.haze.beta_min.to_string(),
            "haze.beta_max" => self.haze.beta_max.to_string(),
            "haze.A_min" => self.haze.a_min.to_string(),
            "haze.A_max" => self.haze.a_max.to_string(),
            "model.channels" => format!("{},{},{}", self.channels[0], self.channels[1], self.channels[2]),
            "train.stage" => self.stage.to_string(),
            "train.epochs" => self.epochs().to_string(),
            "train.lr" => self.lr.to_string(),
            "train.batch" => self.batch.to_string(),
            "train.seed" => self.seed.to_string(),
            "train.augment" => self.augment.to_string(),
            "loss.lambda" => self.loss.lambda.to_string(),
            "loss.beta1" => self.loss.beta1.to_string(),
            "loss.beta2" => self.loss.beta2.to_string(),
            "loss.gamma" => self.loss.gamma.to_string(),
            "perceptual.kind" => match self.perceptual {
                PerceptualKind::Toy => "toy".into(),
                PerceptualKind::File => "file".into(),
            },
            "perceptual.file" => show_path(&self.perceptual_file),
            "text.kind" => match self.text {
                TextKind::Hash => "hash".into(),
                TextKind::File => "file".into(),
            },
            "text.file" => show_path(&self.text_file),
            "loop.k_max" => self.k_max.to_string(),
            "tasks.epochs" => self.task_epochs.to_string(),
            "tasks.lr" => self.task_lr.to_string(),
            _ => unreachable!("KEYS and value_of disagree on {key}"),
        }
    }
}

/// Resolved configuration, one `key = value` line per key; parses back to
/// an equal config.
impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for k in KEYS {
            writeln!(f, "{k} = {}", self.value_of(k))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = Config::parse_str("# comment\nloss.lambda = 1\ntrain.stage=2\n\n").unwrap();
        assert_eq!(c.loss.lambda, 1.0);
        assert_eq!(c.loss.beta1, 0.1);
        assert_eq!(c.loss.beta2, 0.3);
        assert_eq!(c.loss.gamma, 0.01);
        assert_eq!(c.epochs(), 100);
        assert_eq!(Config::default().epochs(), 300);
        assert_eq!(c.k_max, 1);
    }

    #[test]
    fn unknown_and_malformed_keys_rejected() {
        assert!(matches!(Config::parse_str("loss.delta = 1"), Err(Error::Config(_))));
        assert!(matches!(Config::parse_str("loss.lambda"), Err(Error::Config(_))));
        assert!(matches!(Config::parse_str("train.lr = fast"), Err(Error::Config(_))));
        assert!(matches!(Config::parse_str("model.channels = 8,16"), Err(Error::Config(_))));
    }

    #[test]
    fn margin_order_checked() {
        let c = Config::parse_str("loss.beta1 = 0.3\nloss.beta2 = 0.3").unwrap();
        assert!(c.validate().is_err());
        for v in ["0", "0.01", "0.1", "1"] {
            let c = Config::parse_str(&format!("loss.lambda = {v}\nloss.gamma = {v}")).unwrap();
            c.validate().unwrap();
        }
    }

    #[test]
    fn display_round_trips() {
        let mut c = Config::default();
        c.apply_overrides(&["data.manifest=m.tsv", "model.channels=8,16,32", "train.epochs=3"]).unwrap();
        let back = Config::parse_str(&c.to_string()).unwrap();
        assert_eq!(back, c);
    }
}
