//! Flat `key=value` experiment configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::buffer::BufferPolicy;
use crate::error::{Error, Result};
use crate::net::HeadKind;
use crate::objectives::LossConfig;
use crate::stream::{Ordering, SizeDecay, StreamConfig};
use crate::uncertainty::CandidateOrder;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EvalMode {
    #[serde(rename = "class-il")]
    ClassIl,
    #[serde(rename = "task-il")]
    TaskIl,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::ClassIl => "class-il",
            EvalMode::TaskIl => "task-il",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "class-il" | "classil" => Ok(EvalMode::ClassIl),
            "task-il" | "taskil" => Ok(EvalMode::TaskIl),
            other => Err(Error::param(format!("unknown eval mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Isotropic Gaussian clusters, one per class.
    Gaussian {
        dim: usize,
        separation: f64,
        pool_per_class: usize,
    },
    /// A `label,f0,...` file.
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub stream: StreamConfig,
    pub data: DataSource,
    pub test_per_class: usize,
    pub hidden: Vec<usize>,
    pub head: HeadKind,
    pub dropout_rate: f64,
    pub mc_passes: usize,
    pub loss: LossConfig,
    pub buffer_capacity: usize,
    pub buffer_policy: BufferPolicy,
    pub candidate_order: CandidateOrder,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_modes: Vec<EvalMode>,
    pub seed: u64,
    pub threads: usize,
}

pub const REQUIRED_KEYS: [&str; 18] = [
    "n_tasks",
    "classes_per_task",
    "base_count",
    "ordering",
    "buffer_capacity",
    "buffer_policy",
    "candidate_order",
    "mc_passes",
    "dropout_rate",
    "tau1",
    "tau2",
    "scale_s",
    "alpha_kd",
    "beta_proto",
    "epochs",
    "batch_size",
    "lr",
    "seed",
];

const OPTIONAL_KEYS: [&str; 12] = [
    "imbalance_ratio",
    "alpha_stream",
    "name",
    "head",
    "hidden",
    "dim",
    "separation",
    "pool_per_class",
    "test_per_class",
    "data_path",
    "eval_modes",
    "threads",
];

impl Default for ExperimentConfig {
    /// The desk-scale setting: 10 Gaussian classes in 5 ordered tasks,
    /// `C = 500`, `IR = 0.01`, a 200-slot buffer and a 2x64 MLP.
    fn default() -> Self {
        Self {
            name: "pbr".into(),
            stream: StreamConfig {
                n_tasks: 5,
                classes_per_task: 2,
                base_count: 500,
                decay: SizeDecay::ImbalanceRatio(0.01),
                ordering: Ordering::Ordered,
                seed: 0,
            },
            data: DataSource::Gaussian {
                dim: 16,
                separation: 3.0,
                pool_per_class: 400,
            },
            test_per_class: 100,
            hidden: vec![64, 64],
            head: HeadKind::Cosine,
            dropout_rate: 0.2,
            mc_passes: 10,
            loss: LossConfig::default(),
            buffer_capacity: 200,
            buffer_policy: BufferPolicy::Uncertainty,
            candidate_order: CandidateOrder::MaxMi,
            epochs: 20,
            batch_size: 32,
            lr: 0.03,
            eval_modes: vec![EvalMode::ClassIl, EvalMode::TaskIl],
            seed: 0,
            threads: 1,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::param(format!("`{key}`: cannot parse `{v}`")))
}

/// Parses `key=value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("expected key=value, got `{line}`"),
        })?;
        let k = k.trim().to_string();
        if map.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("duplicate key `{k}`"),
            });
        }
    }
    Ok(map)
}

impl ExperimentConfig {
    pub fn from_kv_text(text: &str) -> Result<Self> {
        Self::from_map(&parse_kv(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv_text(&std::fs::read_to_string(path)?)
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        for k in REQUIRED_KEYS {
            if !map.contains_key(k) {
                return Err(Error::param(format!("missing required key `{k}`")));
            }
        }
        if let Some(k) = map
            .keys()
            .find(|k| !REQUIRED_KEYS.contains(&k.as_str()) && !OPTIONAL_KEYS.contains(&k.as_str()))
        {
            return Err(Error::param(format!("unknown key `{k}`")));
        }
        let mut cfg = Self::default();
        cfg.apply(map)?;
        Ok(cfg)
    }

    /// Overrides fields from `map`; used for both parsing and sweep grids.
    pub fn apply(&mut self, map: &BTreeMap<String, String>) -> Result<()> {
        let decay_keys = usize::from(map.contains_key("imbalance_ratio"))
            + usize::from(map.contains_key("alpha_stream"));
        if decay_keys > 1 {
            return Err(Error::param(
                "give exactly one of `imbalance_ratio` and `alpha_stream`",
            ));
        }
        let mut gaussian = match &self.data {
            DataSource::Gaussian {
                dim,
                separation,
                pool_per_class,
            } => (*dim, *separation, *pool_per_class),
            DataSource::File(_) => (16, 3.0, 400),
        };
        let mut gaussian_touched = false;
        for (k, v) in map {
            let v = v.as_str();
            match k.as_str() {
                "n_tasks" => self.stream.n_tasks = parse_num(k, v)?,
                "classes_per_task" => self.stream.classes_per_task = parse_num(k, v)?,
                "base_count" => self.stream.base_count = parse_num(k, v)?,
                "imbalance_ratio" => {
                    self.stream.decay = SizeDecay::ImbalanceRatio(parse_num(k, v)?)
                }
                "alpha_stream" => self.stream.decay = SizeDecay::Alpha(parse_num(k, v)?),
                "ordering" => {
                    self.stream.ordering = match v {
                        "ordered" => Ordering::Ordered,
                        "shuffled" => Ordering::Shuffled,
                        _ => return Err(Error::param(format!("unknown ordering `{v}`"))),
                    }
                }
                "buffer_capacity" => self.buffer_capacity = parse_num(k, v)?,
                "buffer_policy" => {
                    self.buffer_policy = match v {
                        "none" => BufferPolicy::None,
                        "vanilla" | "random" => BufferPolicy::Vanilla,
                        "uncertainty" => BufferPolicy::Uncertainty,
                        _ => return Err(Error::param(format!("unknown buffer_policy `{v}`"))),
                    }
                }
                "candidate_order" => {
                    self.candidate_order = match v {
                        "max_mi" => CandidateOrder::MaxMi,
                        "min_mi" => CandidateOrder::MinMi,
                        _ => return Err(Error::param(format!("unknown candidate_order `{v}`"))),
                    }
                }
                "mc_passes" => self.mc_passes = parse_num(k, v)?,
                "dropout_rate" => self.dropout_rate = parse_num(k, v)?,
                "tau1" => self.loss.tau1 = parse_num(k, v)?,
                "tau2" => self.loss.tau2 = parse_num(k, v)?,
                "scale_s" => self.loss.scale = parse_num(k, v)?,
                "alpha_kd" => self.loss.alpha_kd = parse_num(k, v)?,
                "beta_proto" => self.loss.beta_proto = parse_num(k, v)?,
                "epochs" => self.epochs = parse_num(k, v)?,
                "batch_size" => self.batch_size = parse_num(k, v)?,
                "lr" => self.lr = parse_num(k, v)?,
                "seed" => self.seed = parse_num(k, v)?,
                "name" => self.name = v.to_string(),
                "head" => {
                    self.head = match v {
                        "linear" => HeadKind::Linear,
                        "cosine" => HeadKind::Cosine,
                        _ => return Err(Error::param(format!("unknown head `{v}`"))),
                    }
                }
                "hidden" => {
                    self.hidden = v
                        .split(',')
                        .map(|w| parse_num(k, w.trim()))
                        .collect::<Result<_>>()?
                }
                "dim" => {
                    gaussian.0 = parse_num(k, v)?;
                    gaussian_touched = true;
                }
                "separation" => {
                    gaussian.1 = parse_num(k, v)?;
                    gaussian_touched = true;
                }
                "pool_per_class" => {
                    gaussian.2 = parse_num(k, v)?;
                    gaussian_touched = true;
                }
                "test_per_class" => self.test_per_class = parse_num(k, v)?,
                "data_path" => self.data = DataSource::File(PathBuf::from(v)),
                "eval_modes" => {
                    let mut modes = v
                        .split(',')
                        .map(|m| EvalMode::parse(m.trim()))
                        .collect::<Result<Vec<_>>>()?;
                    modes.sort();
                    modes.dedup();
                    self.eval_modes = modes;
                }
                "threads" => self.threads = parse_num(k, v)?,
                other => return Err(Error::param(format!("unknown key `{other}`"))),
            }
        }
        if gaussian_touched || !map.contains_key("data_path") {
            if let DataSource::Gaussian { .. } = self.data {
                self.data = DataSource::Gaussian {
                    dim: gaussian.0,
                    separation: gaussian.1,
                    pool_per_class: gaussian.2,
                };
            } else if gaussian_touched {
                return Err(Error::param(
                    "`dim`, `separation` and `pool_per_class` apply to synthetic data only",
                ));
            }
        }
        self.stream.seed = self.seed;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        self.loss.validate()?;
        if self.epochs == 0 {
            return Err(Error::param("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::param("lr must be positive"));
        }
        if self.mc_passes == 0 {
            return Err(Error::param("mc_passes must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::param("dropout_rate must lie in [0, 1)"));
        }
        if self.eval_modes.is_empty() {
            return Err(Error::param("need at least one eval mode"));
        }
        if self.test_per_class == 0 {
            return Err(Error::param("test_per_class must be at least 1"));
        }
        if self.threads == 0 {
            return Err(Error::param("threads must be at least 1"));
        }
        Ok(())
    }

    /// Renders the configuration back into `key=value` form.
    pub fn to_kv_text(&self) -> String {
        let mut lines = vec![
            format!("name={}", self.name),
            format!("n_tasks={}", self.stream.n_tasks),
            format!("classes_per_task={}", self.stream.classes_per_task),
            format!("base_count={}", self.stream.base_count),
            match self.stream.decay {
                SizeDecay::ImbalanceRatio(r) => format!("imbalance_ratio={r}"),
                SizeDecay::Alpha(a) => format!("alpha_stream={a}"),
            },
            format!(
                "ordering={}",
                match self.stream.ordering {
                    Ordering::Ordered => "ordered",
                    Ordering::Shuffled => "shuffled",
                }
            ),
        ];
        match &self.data {
            DataSource::Gaussian {
                dim,
                separation,
                pool_per_class,
            } => {
                lines.push(format!("dim={dim}"));
                lines.push(format!("separation={separation}"));
                lines.push(format!("pool_per_class={pool_per_class}"));
            }
            DataSource::File(p) => lines.push(format!("data_path={}", p.display())),
        }
        let hidden: Vec<String> = self.hidden.iter().map(usize::to_string).collect();
        let modes: Vec<&str> = self.eval_modes.iter().map(|m| m.as_str()).collect();
        lines.extend([
            format!("test_per_class={}", self.test_per_class),
            format!("hidden={}", hidden.join(",")),
            format!(
                "head={}",
                match self.head {
                    HeadKind::Linear => "linear",
                    HeadKind::Cosine => "cosine",
                }
            ),
            format!("buffer_capacity={}", self.buffer_capacity),
            format!(
                "buffer_policy={}",
                match self.buffer_policy {
                    BufferPolicy::None => "none",
                    BufferPolicy::Vanilla => "vanilla",
                    BufferPolicy::Uncertainty => "uncertainty",
                }
            ),
            format!(
                "candidate_order={}",
                match self.candidate_order {
                    CandidateOrder::MaxMi => "max_mi",
                    CandidateOrder::MinMi => "min_mi",
                }
            ),
            format!("mc_passes={}", self.mc_passes),
            format!("dropout_rate={}", self.dropout_rate),
            format!("tau1={}", self.loss.tau1),
            format!("tau2={}", self.loss.tau2),
            format!("scale_s={}", self.loss.scale),
            format!("alpha_kd={}", self.loss.alpha_kd),
            format!("beta_proto={}", self.loss.beta_proto),
            format!("epochs={}", self.epochs),
            format!("batch_size={}", self.batch_size),
            format!("lr={}", self.lr),
            format!("eval_modes={}", modes.join(",")),
            format!("seed={}", self.seed),
            format!("threads={}", self.threads),
        ]);
        lines.join("\n") + "\n"
    }
}

/// A sweep grid: `key = v1 | v2 | ...` per line; runs cover the Cartesian
/// product in file order (last key varies fastest).
pub fn parse_grid(text: &str) -> Result<Vec<(String, Vec<String>)>> {
    let mut out: Vec<(String, Vec<String>)> = Vec::new();
    for (k, v) in parse_kv_ordered(text)? {
        let values: Vec<String> = v.split('|').map(|s| s.trim().to_string()).collect();
        if values.iter().any(String::is_empty) {
            return Err(Error::param(format!("empty value in grid key `{k}`")));
        }
        out.push((k, values));
    }
    Ok(out)
}

fn parse_kv_ordered(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("expected key=values, got `{line}`"),
        })?;
        if out.iter().any(|(existing, _)| existing == k.trim()) {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("duplicate key `{}`", k.trim()),
            });
        }
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Expands a grid into override maps.
pub fn expand_grid(grid: &[(String, Vec<String>)]) -> Vec<BTreeMap<String, String>> {
    let mut combos = vec![BTreeMap::new()];
    for (k, values) in grid {
        combos = combos
            .into_iter()
            .flat_map(|base| {
                values.iter().map(move |v| {
                    let mut m = base.clone();
                    m.insert(k.clone(), v.clone());
                    m
                })
            })
            .collect();
    }
    combos
}
