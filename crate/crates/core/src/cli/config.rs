use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::distill::TrainConfig;
use crate::error::{Error, Result};
use crate::fixed_point::UnrollMode;
use crate::model::{GetConfig, ImageDims, ModelConfig, VitConfig};
use crate::teacher::{MixtureSpec, NoiseSchedule};

/// Where the teacher mixture comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum TeacherSource {
    /// A mixture text file.
    File(PathBuf),
    /// `components` template means on `image` with shared `std`; `classes`
    /// groups them into labels (0 leaves them unlabelled).
    Templates {
        image: ImageDims,
        components: usize,
        std: f64,
        classes: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSection {
    pub source: TeacherSource,
    pub schedule: NoiseSchedule,
}

impl TeacherSection {
    pub fn spec(&self) -> Result<MixtureSpec> {
        match &self.source {
            TeacherSource::File(p) => MixtureSpec::from_text(&std::fs::read_to_string(p)?),
            TeacherSource::Templates {
                image,
                components,
                std,
                classes,
            } => {
                let spec = MixtureSpec::templates(*image, *components, *std)?;
                if *classes > 0 {
                    spec.with_grouped_labels(*classes)
                } else {
                    Ok(spec)
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub projections: usize,
    pub seed: u64,
    /// Samples per class for class accuracy.
    pub n_per_class: usize,
    pub class_accuracy: bool,
    pub throughput: bool,
    pub throughput_batch: usize,
    pub throughput_trials: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            projections: crate::eval::DEFAULT_PROJECTIONS,
            seed: 0,
            n_per_class: 250,
            class_accuracy: true,
            throughput: true,
            throughput_batch: 64,
            throughput_trials: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathsSection {
    pub dataset: Option<PathBuf>,
    pub heldout: Option<PathBuf>,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

/// Parsed run configuration. Relative paths are resolved against the
/// directory of the config file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub teacher: TeacherSection,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

const SECTIONS: [&str; 5] = ["teacher", "model", "training", "eval", "paths"];

const KEYS: [(&str, &[&str]); 5] = [
    (
        "teacher",
        &[
            "mixture",
            "image",
            "components",
            "std",
            "classes",
            "sigma_min",
            "sigma_max",
            "rho",
            "steps",
        ],
    ),
    (
        "model",
        &[
            "kind",
            "preset",
            "image",
            "patch",
            "width",
            "injection_depth",
            "equilibrium_depth",
            "depth",
            "expansion",
            "heads",
            "classes",
            "iterations",
        ],
    ),
    (
        "training",
        &[
            "lr",
            "beta1",
            "beta2",
            "eps",
            "weight_decay",
            "batch_size",
            "iterations",
            "ema_momentum",
            "data_seed",
            "init_seed",
            "k",
            "memory",
            "checkpoint_every",
            "log_every",
        ],
    ),
    (
        "eval",
        &[
            "projections",
            "seed",
            "n_per_class",
            "class_accuracy",
            "throughput",
            "throughput_batch",
            "throughput_trials",
        ],
    ),
    ("paths", &["dataset", "heldout", "checkpoints", "reports"]),
];

type Table = BTreeMap<String, BTreeMap<String, (usize, String)>>;

fn parse_table(text: &str) -> Result<Table> {
    let mut table: Table = SECTIONS
        .iter()
        .map(|s| (s.to_string(), BTreeMap::new()))
        .collect();
    let mut section: Option<String> = None;
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            if !SECTIONS.contains(&name) {
                return Err(Error::Config(format!(
                    "line {line_no}: unknown section [{name}]"
                )));
            }
            section = Some(name.to_string());
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {line_no}: expected `key = value`"
            )));
        };
        let Some(sec) = &section else {
            return Err(Error::Config(format!(
                "line {line_no}: key outside any section"
            )));
        };
        let key = key.trim();
        let allowed = KEYS
            .iter()
            .find(|(s, _)| s == sec)
            .map_or(&[][..], |(_, k)| k);
        if !allowed.contains(&key) {
            return Err(Error::Config(format!(
                "line {line_no}: unknown key `{key}` in [{sec}]"
            )));
        }
        let entries = table.get_mut(sec).expect("known section");
        if entries
            .insert(key.to_string(), (line_no, value.trim().to_string()))
            .is_some()
        {
            return Err(Error::Config(format!(
                "line {line_no}: duplicate key `{key}` in [{sec}]"
            )));
        }
    }
    Ok(table)
}

struct Section<'a> {
    name: &'a str,
    entries: &'a BTreeMap<String, (usize, String)>,
}

impl Section<'_> {
    fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    fn get<V: FromStr>(&self, key: &str) -> Result<Option<V>>
    where
        V::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|e| {
                Error::Config(format!("line {line}: [{}] {key} = {v}: {e}", self.name))
            }),
        }
    }

    fn or<V: FromStr>(&self, key: &str, default: V) -> Result<V>
    where
        V::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn image(&self, key: &str) -> Result<Option<ImageDims>> {
        let Some((line, v)) = self.entries.get(key) else {
            return Ok(None);
        };
        let parts: Vec<&str> = v.split('x').map(str::trim).collect();
        let nums: Option<Vec<usize>> = parts.iter().map(|p| p.parse().ok()).collect();
        match nums.as_deref() {
            Some(&[h, w, c]) => Ok(Some(ImageDims::new(h, w, c))),
            _ => Err(Error::Config(format!(
                "line {line}: [{}] {key} must look like 8x8x1",
                self.name
            ))),
        }
    }

    fn path(&self, key: &str, base: &Path) -> Option<PathBuf> {
        self.raw(key).map(|p| base.join(p))
    }
}

fn model_from(s: &Section) -> Result<ModelConfig> {
    let kind = s.raw("kind").unwrap_or("get");
    let preset = s.raw("preset");
    let bad_preset = |p: &str| Error::Config(format!("unknown {kind} preset `{p}`"));
    let mut cfg = match kind {
        "get" => {
            let mut c = match preset.unwrap_or("micro") {
                "micro" => GetConfig::micro(),
                "tiny" => GetConfig::tiny(),
                "mini" => GetConfig::mini(),
                "small" => GetConfig::small(),
                "base" => GetConfig::base(),
                "base_plus" => GetConfig::base_plus(),
                p => return Err(bad_preset(p)),
            };
            if s.raw("depth").is_some() {
                return Err(Error::Config(
                    "`depth` applies to ViT; GET uses injection_depth/equilibrium_depth".into(),
                ));
            }
            c.injection_depth = s.or("injection_depth", c.injection_depth)?;
            c.equilibrium_depth = s.or("equilibrium_depth", c.equilibrium_depth)?;
            c.expansion = s.or("expansion", c.expansion)?;
            c.iterations = s.or("iterations", c.iterations)?;
            ModelConfig::Get(c)
        }
        "vit" => {
            let mut c = match preset.unwrap_or("base") {
                "base" => VitConfig::base(),
                "large" => VitConfig::large(),
                p => return Err(bad_preset(p)),
            };
            for k in [
                "injection_depth",
                "equilibrium_depth",
                "expansion",
                "iterations",
            ] {
                if s.raw(k).is_some() {
                    return Err(Error::Config(format!("`{k}` does not apply to ViT")));
                }
            }
            c.depth = s.or("depth", c.depth)?;
            ModelConfig::Vit(c)
        }
        k => {
            return Err(Error::Config(format!(
                "unknown model kind `{k}` (get or vit)"
            )))
        }
    };
    let width_given = s.raw("width").is_some();
    match &mut cfg {
        ModelConfig::Get(c) => {
            c.image = s.image("image")?.unwrap_or(c.image);
            c.patch = s.or("patch", c.patch)?;
            c.width = s.or("width", c.width)?;
            c.heads = s.or(
                "heads",
                if width_given {
                    crate::model::default_heads(c.width)
                } else {
                    c.heads
                },
            )?;
            c.n_classes = s.or("classes", c.n_classes)?;
        }
        ModelConfig::Vit(c) => {
            c.image = s.image("image")?.unwrap_or(c.image);
            c.patch = s.or("patch", c.patch)?;
            c.width = s.or("width", c.width)?;
            c.heads = s.or(
                "heads",
                if width_given {
                    crate::model::default_heads(c.width)
                } else {
                    c.heads
                },
            )?;
            c.n_classes = s.or("classes", c.n_classes)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn bool_value(s: &Section, key: &str, default: bool) -> Result<bool> {
    match s.raw(key) {
        None => Ok(default),
        Some("true" | "yes" | "1") => Ok(true),
        Some("false" | "no" | "0") => Ok(false),
        Some(v) => Err(Error::Config(format!(
            "[{}] {key} = {v}: expected true or false",
            s.name
        ))),
    }
}

impl RunConfig {
    /// Parses config text; `base` anchors relative paths.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let table = parse_table(text)?;
        let sec = |name: &'static str| Section {
            name,
            entries: &table[name],
        };

        let t = sec("teacher");
        let d = NoiseSchedule::default();
        let schedule = NoiseSchedule {
            sigma_min: t.or("sigma_min", d.sigma_min)?,
            sigma_max: t.or("sigma_max", d.sigma_max)?,
            rho: t.or("rho", d.rho)?,
            n_steps: t.or("steps", d.n_steps)?,
        };
        schedule.validate()?;
        let template_keys = ["image", "components", "std", "classes"];
        let source = match t.path("mixture", base) {
            Some(p) => {
                if let Some(k) = template_keys.iter().find(|k| t.raw(k).is_some()) {
                    return Err(Error::Config(format!(
                        "[teacher] {k} cannot be combined with a mixture file"
                    )));
                }
                TeacherSource::File(p)
            }
            None => TeacherSource::Templates {
                image: t.image("image")?.unwrap_or(ImageDims::new(8, 8, 1)),
                components: t.or("components", 8)?,
                std: t.or("std", 0.1)?,
                classes: t.or("classes", 0)?,
            },
        };
        let teacher = TeacherSection { source, schedule };

        let model = model_from(&sec("model"))?;

        let r = sec("training");
        let dt = TrainConfig::default();
        let memory = match r.raw("memory").unwrap_or("plain") {
            "plain" => UnrollMode::Plain,
            "checkpointed" => UnrollMode::Checkpointed,
            m => {
                return Err(Error::Config(format!(
                    "[training] memory = {m}: expected plain or checkpointed"
                )))
            }
        };
        let training = TrainConfig {
            optimizer: crate::distill::AdamWConfig {
                lr: r.or("lr", dt.optimizer.lr)?,
                beta1: r.or("beta1", dt.optimizer.beta1)?,
                beta2: r.or("beta2", dt.optimizer.beta2)?,
                eps: r.or("eps", dt.optimizer.eps)?,
                weight_decay: r.or("weight_decay", dt.optimizer.weight_decay)?,
            },
            batch_size: r.or("batch_size", dt.batch_size)?,
            iterations: r.or("iterations", dt.iterations)?,
            ema_momentum: r.or("ema_momentum", dt.ema_momentum)?,
            data_seed: r.or("data_seed", dt.data_seed)?,
            init_seed: r.or("init_seed", dt.init_seed)?,
            k: r.get("k")?,
            unroll: memory,
            checkpoint_every: r.or("checkpoint_every", dt.checkpoint_every)?,
            log_every: r.or("log_every", dt.log_every)?,
        };
        training.validate()?;

        let e = sec("eval");
        let de = EvalSection::default();
        let eval = EvalSection {
            projections: e.or("projections", de.projections)?,
            seed: e.or("seed", de.seed)?,
            n_per_class: e.or("n_per_class", de.n_per_class)?,
            class_accuracy: bool_value(&e, "class_accuracy", de.class_accuracy)?,
            throughput: bool_value(&e, "throughput", de.throughput)?,
            throughput_batch: e.or("throughput_batch", de.throughput_batch)?,
            throughput_trials: e.or("throughput_trials", de.throughput_trials)?,
        };
        if eval.projections == 0
            || eval.n_per_class == 0
            || eval.throughput_batch == 0
            || eval.throughput_trials < 3
        {
            return Err(Error::Config(
                "[eval] counts must be positive and throughput_trials at least 3".into(),
            ));
        }

        let p = sec("paths");
        let paths = PathsSection {
            dataset: p.path("dataset", base),
            heldout: p.path("heldout", base),
            checkpoints: p
                .path("checkpoints", base)
                .unwrap_or_else(|| base.join("checkpoints")),
            reports: p
                .path("reports", base)
                .unwrap_or_else(|| base.join("reports")),
        };
        Ok(RunConfig {
            teacher,
            model,
            training,
            eval,
            paths,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path
            .parent()
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        Self::parse(&text, &base)
    }

    /// Every setting with its resolved value, in config syntax.
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[teacher]");
        match &self.teacher.source {
            TeacherSource::File(p) => {
                let _ = writeln!(s, "mixture = {}", p.display());
            }
            TeacherSource::Templates {
                image,
                components,
                std,
                classes,
            } => {
                let _ = writeln!(
                    s,
                    "image = {}x{}x{}",
                    image.height, image.width, image.channels
                );
                let _ = writeln!(s, "components = {components}");
                let _ = writeln!(s, "std = {std}");
                let _ = writeln!(s, "classes = {classes}");
            }
        }
        let sc = &self.teacher.schedule;
        let _ = writeln!(
            s,
            "sigma_min = {}\nsigma_max = {}\nrho = {}\nsteps = {}",
            sc.sigma_min, sc.sigma_max, sc.rho, sc.n_steps
        );

        let _ = writeln!(s, "\n[model]");
        s.push_str(&self.model.describe());
        if let ModelConfig::Get(c) = &self.model {
            let _ = writeln!(s, "iterations = {}", c.iterations);
        }

        let t = &self.training;
        let o = &t.optimizer;
        let _ = writeln!(s, "\n[training]");
        let _ = writeln!(
            s,
            "lr = {}\nbeta1 = {}\nbeta2 = {}\neps = {}\nweight_decay = {}",
            o.lr, o.beta1, o.beta2, o.eps, o.weight_decay
        );
        let _ = writeln!(
            s,
            "batch_size = {}\niterations = {}\nema_momentum = {}",
            t.batch_size, t.iterations, t.ema_momentum
        );
        let _ = writeln!(
            s,
            "data_seed = {}\ninit_seed = {}",
            t.data_seed, t.init_seed
        );
        if let Some(k) = t.k {
            let _ = writeln!(s, "k = {k}");
        }
        let memory = match t.unroll {
            UnrollMode::Plain => "plain",
            UnrollMode::Checkpointed => "checkpointed",
        };
        let _ = writeln!(
            s,
            "memory = {memory}\ncheckpoint_every = {}\nlog_every = {}",
            t.checkpoint_every, t.log_every
        );

        let e = &self.eval;
        let _ = writeln!(s, "\n[eval]");
        let _ = writeln!(
            s,
            "projections = {}\nseed = {}\nn_per_class = {}",
            e.projections, e.seed, e.n_per_class
        );
        let _ = writeln!(
            s,
            "class_accuracy = {}\nthroughput = {}",
            e.class_accuracy, e.throughput
        );
        let _ = writeln!(
            s,
            "throughput_batch = {}\nthroughput_trials = {}",
            e.throughput_batch, e.throughput_trials
        );

        let p = &self.paths;
        let _ = writeln!(s, "\n[paths]");
        if let Some(d) = &p.dataset {
            let _ = writeln!(s, "dataset = {}", d.display());
        }
        if let Some(d) = &p.heldout {
            let _ = writeln!(s, "heldout = {}", d.display());
        }
        let _ = writeln!(
            s,
            "checkpoints = {}\nreports = {}",
            p.checkpoints.display(),
            p.reports.display()
        );
        s
    }
}
