//! Plain-text run configuration: `key = value` lines, `#` comments.
//! Unknown keys are errors so typos never pass silently.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::detect_head::{DetectorConfig, TrainConfig};
use crate::diffusion::{SampleOptions, Schedule};
use crate::error::{Error, Result};
use crate::evalkit::DEFAULT_CONF;
use crate::mambasar::{LayerKind, MambaSarConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: DetectorConfig,
    pub train: TrainConfig,
    /// Proposal count at inference.
    pub proposals: usize,
    /// Number of DDIM steps at inference.
    pub sample_steps: usize,
    pub renewal_thresh: f64,
    pub nms_iou: f64,
    pub conf: f64,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SampleOptions::default();
        Self {
            model: DetectorConfig::default(),
            train: TrainConfig::default(),
            proposals: s.proposals,
            sample_steps: 1,
            renewal_thresh: s.renewal_thresh,
            nms_iou: s.nms_iou,
            conf: DEFAULT_CONF,
            train_data: None,
            test_data: None,
        }
    }
}

fn parse_layers(v: &str) -> std::result::Result<Vec<LayerKind>, String> {
    v.split(',')
        .map(|s| match s.trim() {
            "mamba" => Ok(LayerKind::Mamba),
            "attn" | "attention" => Ok(LayerKind::AgentAttention),
            other => Err(format!("unknown layer kind `{other}` (use mamba or attn)")),
        })
        .collect()
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("`{v}`: {e}"))
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "train_data", "test_data", "classes", "T", "schedule_s", "N", "N_train", "steps", "renewal_thresh",
        "nms_iou", "conf", "mambasar", "layers", "allow_ablation_layout", "agent_n", "heads", "ssm_state",
        "mlp_ratio", "fpn_width", "roi_grid", "time_dim", "hidden", "lr", "weight_decay", "train_steps", "lambda",
        "seed",
    ];

    fn mixer_mut(&mut self) -> &mut MambaSarConfig {
        self.model.mambasar.get_or_insert_with(MambaSarConfig::default)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "train_data" => self.train_data = Some(PathBuf::from(v)),
            "test_data" => self.test_data = Some(PathBuf::from(v)),
            "classes" => self.model.classes = num(v)?,
            "T" => self.model.diffusion_steps = num(v)?,
            "schedule_s" => self.model.schedule_s = num(v)?,
            "N" => self.proposals = num(v)?,
            "N_train" => self.train.n_train = num(v)?,
            "steps" => self.sample_steps = num(v)?,
            "renewal_thresh" => self.renewal_thresh = num(v)?,
            "nms_iou" => self.nms_iou = num(v)?,
            "conf" => self.conf = num(v)?,
            "mambasar" => {
                let on = parse_bool(v)?;
                match (on, self.model.mambasar.is_some()) {
                    (true, false) => self.model.mambasar = Some(MambaSarConfig::default()),
                    (false, _) => self.model.mambasar = None,
                    _ => {}
                }
            }
            "layers" => self.mixer_mut().layers = parse_layers(v)?,
            "allow_ablation_layout" => self.mixer_mut().allow_ablation_layout = parse_bool(v)?,
            "agent_n" => self.mixer_mut().agents = num(v)?,
            "heads" => self.mixer_mut().heads = num(v)?,
            "ssm_state" => self.mixer_mut().ssm_state = num(v)?,
            "mlp_ratio" => self.mixer_mut().mlp_ratio = num(v)?,
            "fpn_width" => self.model.fpn_width = num(v)?,
            "roi_grid" => self.model.roi_grid = num(v)?,
            "time_dim" => self.model.time_dim = num(v)?,
            "hidden" => self.model.hidden = num(v)?,
            "lr" => self.train.lr = num(v)?,
            "weight_decay" => self.train.weight_decay = num(v)?,
            "train_steps" => self.train.steps = num(v)?,
            "lambda" => self.train.lambda = num(v)?,
            "seed" => self.train.seed = num(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses config text; `origin` names the source in errors. Later
    /// lines override earlier ones, and `mambasar = false` must come after
    /// any MambaSAR keys to take effect.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(origin, i + 1, format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            cfg.set(k, v).map_err(|msg| Error::parse(origin, i + 1, format!("{k}: {msg}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=crate::synthdata::CLASS_NAMES.len()).contains(&self.model.classes) {
            return Err(Error::config(format!("classes = {} outside 1..=3", self.model.classes)));
        }
        if let Some(m) = &self.model.mambasar {
            m.validate()?;
        }
        self.model.head().validate()?;
        let sched = Schedule::cosine(self.model.diffusion_steps, self.model.schedule_s)?;
        self.sample_options(&sched)?.validate(&sched)?;
        if !(0.0..=1.0).contains(&self.conf) {
            return Err(Error::config(format!("conf = {} outside [0,1]", self.conf)));
        }
        Ok(())
    }

    pub fn sample_options(&self, sched: &Schedule) -> Result<SampleOptions> {
        Ok(SampleOptions {
            proposals: self.proposals,
            steps: sched.sampling_steps(self.sample_steps)?,
            renewal_thresh: self.renewal_thresh,
            nms_iou: self.nms_iou,
        })
    }

    pub fn require_train_data(&self) -> Result<&Path> {
        Self::existing_dir("train_data", self.train_data.as_deref())
    }

    pub fn require_test_data(&self) -> Result<&Path> {
        Self::existing_dir("test_data", self.test_data.as_deref())
    }

    fn existing_dir<'a>(key: &str, p: Option<&'a Path>) -> Result<&'a Path> {
        let p = p.ok_or_else(|| Error::config(format!("missing key `{key}`")))?;
        if !p.is_dir() {
            return Err(Error::config(format!("`{key}` directory {} does not exist", p.display())));
        }
        Ok(p)
    }

    /// Serialises every key; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        if let Some(p) = &self.train_data {
            kv("train_data", p.display().to_string());
        }
        if let Some(p) = &self.test_data {
            kv("test_data", p.display().to_string());
        }
        let m = &self.model;
        kv("classes", m.classes.to_string());
        kv("T", m.diffusion_steps.to_string());
        kv("schedule_s", m.schedule_s.to_string());
        kv("N", self.proposals.to_string());
        kv("N_train", self.train.n_train.to_string());
        kv("steps", self.sample_steps.to_string());
        kv("renewal_thresh", self.renewal_thresh.to_string());
        kv("nms_iou", self.nms_iou.to_string());
        kv("conf", self.conf.to_string());
        if let Some(x) = &m.mambasar {
            let layers: Vec<String> = x.layers.iter().map(|l| l.to_string()).collect();
            kv("layers", layers.join(","));
            kv("allow_ablation_layout", x.allow_ablation_layout.to_string());
            kv("agent_n", x.agents.to_string());
            kv("heads", x.heads.to_string());
            kv("ssm_state", x.ssm_state.to_string());
            kv("mlp_ratio", x.mlp_ratio.to_string());
        }
        kv("mambasar", m.mambasar.is_some().to_string());
        kv("fpn_width", m.fpn_width.to_string());
        kv("roi_grid", m.roi_grid.to_string());
        kv("time_dim", m.time_dim.to_string());
        kv("hidden", m.hidden.to_string());
        kv("lr", self.train.lr.to_string());
        kv("weight_decay", self.train.weight_decay.to_string());
        kv("train_steps", self.train.steps.to_string());
        kv("lambda", self.train.lambda.to_string());
        kv("seed", self.train.seed.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, Path::new("c.cfg"))
    }

    #[test]
    fn defaults_and_overrides() {
        let c = parse("# comment\nlr = 1e-3  # trailing\nN = 32\nmambasar = false\n").unwrap();
        assert_eq!(c.train.lr, 1e-3);
        assert_eq!(c.proposals, 32);
        assert!(c.model.mambasar.is_none());
        assert_eq!(parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_and_bad_value_name_the_line() {
        let err = parse("lr = 1\nlearning_rate = 2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(err.to_string().contains("learning_rate"));
        assert!(matches!(parse("N = many\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse("just words\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn layout_guard_applies_to_config_files() {
        let swapped = "layers = attn,attn,attn,mamba,mamba,mamba\n";
        assert!(matches!(parse(swapped), Err(Error::Config(_))));
        assert!(parse(&format!("{swapped}allow_ablation_layout = true\n")).is_ok());
        assert!(parse("layers = mamba,conv\n").is_err());
    }

    #[test]
    fn text_round_trip() {
        let c = parse("train_data = /tmp/a\nlr = 0.001\nlayers = mamba,mamba,mamba,mamba,mamba,mamba\nallow_ablation_layout = true\nsteps = 3\n").unwrap();
        assert_eq!(parse(&c.to_text()).unwrap(), c);
        let plain = parse("mambasar = false\n").unwrap();
        assert_eq!(parse(&plain.to_text()).unwrap(), plain);
    }

    #[test]
    fn missing_data_key_is_named() {
        let err = RunConfig::default().require_train_data().unwrap_err();
        assert!(err.to_string().contains("train_data"));
        assert!(err.is_validation());
    }
}
