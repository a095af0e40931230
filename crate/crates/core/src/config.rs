//! Run configuration: a line-based `key = value` format with dotted section
//! keys and `#` comments.
//!
//! Every key, its default and meaning is listed in `configs/reference.conf`
//! at the repository root. `show` prints the fully resolved configuration in
//! the same format, so `load(show(c)) == c`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::augment::AugmentPolicy;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{Phase, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Windows evaluated by `eval-ppl` and `eval-extrapolate`.
    pub windows: Vec<usize>,
    pub stride: usize,
    /// Scales swept by `eval-scales`.
    pub scales: Vec<f64>,
    pub kv_cases: usize,
    pub kv_pairs: usize,
    pub kv_window: usize,
    pub max_new_tokens: usize,
    /// Layers exported by `dump-attn`; empty means the last layer.
    pub layers: Vec<usize>,
    /// Which generated case `dump-attn` exports.
    pub case_index: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            windows: vec![128, 256, 512, 1024],
            stride: 32,
            scales: vec![1.0, 2.0, 4.0, 8.0, 10.0, 12.0, 16.0],
            kv_cases: 50,
            kv_pairs: 3,
            kv_window: 512,
            max_new_tokens: 40,
            layers: Vec::new(),
            case_index: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathsConfig {
    pub corpus: Option<PathBuf>,
    pub eval_corpus: Option<PathBuf>,
    /// Checkpoint read by `extend` and the evaluation commands.
    pub checkpoint: PathBuf,
    /// Retrieval cases written by `gen-kv`; read by `eval-kv`/`dump-attn` when present.
    pub kv_cases: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            eval_corpus: None,
            checkpoint: PathBuf::from("runs/pretrain.ckpt"),
            kv_cases: None,
            output_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// `train.learning_rate = auto`: pick the phase default at run time.
    pub auto_learning_rate: bool,
    pub policy: AugmentPolicy,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            auto_learning_rate: true,
            policy: AugmentPolicy::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        };
        c.sync();
        c
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("`{key}` expects a number, got `{value}`"))
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("`{key}` expects true or false, got `{value}`")),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<Vec<T>, String> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_num(key, v.trim())).collect()
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Copies the fields the policy shares with the model and trainer.
    fn sync(&mut self) {
        self.policy.base_window = self.model.base_window;
        self.policy.trained_window = self.train.trained_window;
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key {
            "model.vocab_size" => self.model.vocab_size = parse_num(key, v)?,
            "model.d_model" => self.model.d_model = parse_num(key, v)?,
            "model.n_layers" => self.model.n_layers = parse_num(key, v)?,
            "model.n_heads" => self.model.n_heads = parse_num(key, v)?,
            "model.head_dim" => self.model.head_dim = parse_num(key, v)?,
            "model.ffn_mult" => self.model.ffn_mult = parse_num(key, v)?,
            "model.base_window" => self.model.base_window = parse_num(key, v)?,
            "model.rope_base" => self.model.rope_base = parse_num(key, v)?,
            "model.max_seq_len" => self.model.max_seq_len = parse_num(key, v)?,

            "train.steps" => self.train.steps = parse_num(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, v)?,
            "train.learning_rate" => {
                if v == "auto" {
                    self.auto_learning_rate = true;
                } else {
                    self.train.learning_rate = parse_num(key, v)?;
                    self.auto_learning_rate = false;
                }
            }
            "train.beta1" => self.train.beta1 = parse_num(key, v)?,
            "train.beta2" => self.train.beta2 = parse_num(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse_num(key, v)?,
            "train.epsilon" => self.train.epsilon = parse_num(key, v)?,
            "train.clip_norm" => self.train.clip_norm = parse_num(key, v)?,
            "train.seed" => self.train.seed = parse_num(key, v)?,
            "train.trained_window" => self.train.trained_window = parse_num(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse_num(key, v)?,
            "train.log_every" => self.train.log_every = parse_num(key, v)?,
            "train.log_wall_clock" => self.train.log_wall_clock = parse_bool(key, v)?,

            "policy.g_max" => self.policy.g_max = parse_num(key, v)?,
            "policy.scale_distribution" => {
                self.policy.scale_distribution = v.parse().map_err(|e: Error| e.to_string())?
            }
            "policy.fixed_scale" => self.policy.fixed_scale = parse_num(key, v)?,
            "policy.offset_distribution" => {
                self.policy.offset_distribution = v.parse().map_err(|e: Error| e.to_string())?
            }
            "policy.sink_count" => self.policy.sink_count = parse_num(key, v)?,
            "policy.per_sample" => self.policy.per_sample = parse_bool(key, v)?,

            "eval.windows" => self.eval.windows = parse_list(key, v)?,
            "eval.stride" => self.eval.stride = parse_num(key, v)?,
            "eval.scales" => self.eval.scales = parse_list(key, v)?,
            "eval.kv_cases" => self.eval.kv_cases = parse_num(key, v)?,
            "eval.kv_pairs" => self.eval.kv_pairs = parse_num(key, v)?,
            "eval.kv_window" => self.eval.kv_window = parse_num(key, v)?,
            "eval.max_new_tokens" => self.eval.max_new_tokens = parse_num(key, v)?,
            "eval.layers" => self.eval.layers = parse_list(key, v)?,
            "eval.case_index" => self.eval.case_index = parse_num(key, v)?,

            "paths.corpus" => self.paths.corpus = parse_path(v),
            "paths.eval_corpus" => self.paths.eval_corpus = parse_path(v),
            "paths.checkpoint" => self.paths.checkpoint = PathBuf::from(v),
            "paths.kv_cases" => self.paths.kv_cases = parse_path(v),
            "paths.output_dir" => self.paths.output_dir = PathBuf::from(v),
            _ => return Err(format!("unknown key `{key}`")),
        }
        self.sync();
        Ok(())
    }

    /// Parses configuration text on top of the defaults and validates it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected `key = value`, got `{line}`"),
                });
            };
            cfg.set(key.trim(), value)
                .map_err(|msg| Error::Parse { line: i + 1, msg })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.policy.validate()?;
        self.train.validate(usize::MAX)?;
        let Some(&min_window) = self.eval.windows.iter().min() else {
            return Err(Error::Config("eval.windows must list at least one window".into()));
        };
        if self.eval.stride == 0 || self.eval.stride > min_window {
            return Err(Error::Constraint {
                first: "eval.stride",
                second: "eval.windows",
                msg: format!("stride {} must lie in 1..={min_window}", self.eval.stride),
            });
        }
        let max_window = self
            .eval
            .windows
            .iter()
            .chain([&self.eval.kv_window])
            .max()
            .copied()
            .unwrap_or(0);
        if max_window > self.model.max_seq_len {
            return Err(Error::Constraint {
                first: "eval.windows",
                second: "model.max_seq_len",
                msg: format!("window {max_window} exceeds buffer {}", self.model.max_seq_len),
            });
        }
        if let Some(&g) = self.eval.scales.iter().find(|&&g| !(g.is_finite() && g >= 1.0)) {
            return Err(Error::Config(format!("eval.scales entries must be >= 1, got {g}")));
        }
        if let Some(&l) = self.eval.layers.iter().find(|&&l| l >= self.model.n_layers) {
            return Err(Error::Constraint {
                first: "eval.layers",
                second: "model.n_layers",
                msg: format!("layer {l} does not exist"),
            });
        }
        Ok(())
    }

    /// Training settings for `phase` with the learning rate resolved.
    pub fn train_config(&self, phase: Phase) -> TrainConfig {
        let mut t = self.train.clone();
        t.phase = phase;
        if self.auto_learning_rate {
            t.learning_rate = TrainConfig::default_learning_rate(phase);
        }
        t
    }

    pub fn dump_layers(&self) -> Vec<usize> {
        if self.eval.layers.is_empty() {
            vec![self.model.n_layers - 1]
        } else {
            self.eval.layers.clone()
        }
    }

    /// The fully resolved configuration in loadable form.
    pub fn show(&self) -> String {
        let (m, t, p, e, d) = (&self.model, &self.train, &self.policy, &self.eval, &self.paths);
        let lr = if self.auto_learning_rate {
            "auto".to_string()
        } else {
            t.learning_rate.to_string()
        };
        let sections: [(&str, Vec<(&str, String)>); 5] = [
            (
                "model",
                vec![
                    ("vocab_size", m.vocab_size.to_string()),
                    ("d_model", m.d_model.to_string()),
                    ("n_layers", m.n_layers.to_string()),
                    ("n_heads", m.n_heads.to_string()),
                    ("head_dim", m.head_dim.to_string()),
                    ("ffn_mult", m.ffn_mult.to_string()),
                    ("base_window", m.base_window.to_string()),
                    ("rope_base", m.rope_base.to_string()),
                    ("max_seq_len", m.max_seq_len.to_string()),
                ],
            ),
            (
                "train",
                vec![
                    ("steps", t.steps.to_string()),
                    ("batch_size", t.batch_size.to_string()),
                    ("learning_rate", lr),
                    ("beta1", t.beta1.to_string()),
                    ("beta2", t.beta2.to_string()),
                    ("weight_decay", t.weight_decay.to_string()),
                    ("epsilon", t.epsilon.to_string()),
                    ("clip_norm", t.clip_norm.to_string()),
                    ("seed", t.seed.to_string()),
                    ("trained_window", t.trained_window.to_string()),
                    ("checkpoint_every", t.checkpoint_every.to_string()),
                    ("log_every", t.log_every.to_string()),
                    ("log_wall_clock", t.log_wall_clock.to_string()),
                ],
            ),
            (
                "policy",
                vec![
                    ("g_max", p.g_max.to_string()),
                    ("scale_distribution", p.scale_distribution.to_string()),
                    ("fixed_scale", p.fixed_scale.to_string()),
                    ("offset_distribution", p.offset_distribution.to_string()),
                    ("sink_count", p.sink_count.to_string()),
                    ("per_sample", p.per_sample.to_string()),
                ],
            ),
            (
                "eval",
                vec![
                    ("windows", join(&e.windows)),
                    ("stride", e.stride.to_string()),
                    ("scales", join(&e.scales)),
                    ("kv_cases", e.kv_cases.to_string()),
                    ("kv_pairs", e.kv_pairs.to_string()),
                    ("kv_window", e.kv_window.to_string()),
                    ("max_new_tokens", e.max_new_tokens.to_string()),
                    ("layers", join(&e.layers)),
                    ("case_index", e.case_index.to_string()),
                ],
            ),
            (
                "paths",
                vec![
                    ("corpus", show_path(&d.corpus)),
                    ("eval_corpus", show_path(&d.eval_corpus)),
                    ("checkpoint", d.checkpoint.display().to_string()),
                    ("kv_cases", show_path(&d.kv_cases)),
                    ("output_dir", d.output_dir.display().to_string()),
                ],
            ),
        ];
        let mut out = String::new();
        for (i, (section, entries)) in sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            for (k, v) in entries {
                let _ = writeln!(out, "{section}.{k} = {v}");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::ScaleDistribution;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.model.d_model, 128);
        assert_eq!(c.policy.g_max, 20);
        assert_eq!(c.eval.stride, 32);
    }

    #[test]
    fn assignments_comments_and_lists() {
        let c = RunConfig::parse(
            "# extension run\npolicy.g_max = 8   # trained scales\n\npolicy.scale_distribution = fixed\npolicy.fixed_scale = 2\neval.windows = 128, 512\ntrain.learning_rate = 1e-5\n",
        )
        .unwrap();
        assert_eq!(c.policy.g_max, 8);
        assert_eq!(c.policy.scale_distribution, ScaleDistribution::Fixed);
        assert_eq!(c.eval.windows, vec![128, 512]);
        assert!(!c.auto_learning_rate);
        assert_eq!(c.train_config(Phase::Extend).learning_rate, 1e-5);
        assert_eq!(RunConfig::default().train_config(Phase::Extend).learning_rate, 1e-4);
    }

    #[test]
    fn errors_carry_line_numbers_and_field_names() {
        let e = RunConfig::parse("model.d_model = 64\nmodel.colour = red\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        let e = RunConfig::parse("\n\nno equals sign").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }));
        let e =
            RunConfig::parse("train.trained_window = 256\nmodel.base_window = 128\npolicy.g_max = 1\n").unwrap_err();
        let msg = e.to_string();
        assert!(
            msg.contains("train.trained_window") && msg.contains("policy.g_max"),
            "{msg}"
        );
        let e = RunConfig::parse("eval.stride = 500").unwrap_err();
        assert!(e.to_string().contains("eval.stride"));
        assert!(RunConfig::parse("model.d_model = 100").is_err());
    }

    #[test]
    fn show_round_trips() {
        let c = RunConfig::parse("policy.g_max = 8\nmodel.rope_base = 500000.5\ntrain.learning_rate = 0.0003\npaths.corpus = data/x.txt\neval.layers = 0, 3").unwrap();
        let shown = c.show();
        let again = RunConfig::parse(&shown).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.show(), shown);
        let d = RunConfig::default();
        assert_eq!(RunConfig::parse(&d.show()).unwrap(), d);
    }
}
