//! Sectioned `key = value` run configuration files.
//!
//! ```text
//! [model]
//! preset = tiny
//! seed = 0
//!
//! [adapter.essa]
//! kind = lora
//! rank = 4
//!
//! [essa]
//! epochs = 40
//! from = pretrained.ckpt
//!
//! [data]
//! essa = data/synth_train_target.esds
//!
//! [eval]
//! k = 20
//! ```
//!
//! `#` and `;` start comments. Unknown sections and keys are rejected with the
//! offending line number, and every path is resolved against the directory of
//! the config file.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::Metric;
use crate::peft::{AdapterSpec, LoraTarget, PromptMode};
use crate::pipeline::{SaMode, Stage, StageConfig};
use crate::vit::ViTConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub k: usize,
    pub tau: f64,
    pub metric: Metric,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { k: 20, tau: 0.07, metric: Metric::Accuracy }
    }
}

/// Dataset files per role.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataPaths {
    pub essa: Option<PathBuf>,
    pub sa: Option<PathBuf>,
    pub ttt: Option<PathBuf>,
    /// k-NN gallery.
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub vit: ViTConfig,
    pub seed: u64,
    pub essa: StageConfig,
    pub sa: StageConfig,
    pub ttt: StageConfig,
    /// Starting checkpoint per stage; `None` means a freshly initialised backbone.
    pub essa_from: Option<PathBuf>,
    pub sa_from: Option<PathBuf>,
    pub ttt_from: Option<PathBuf>,
    pub data: DataPaths,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::Essa => &self.essa,
            Stage::Sa => &self.sa,
            Stage::Ttt => &self.ttt,
        }
    }

    pub fn stage_from(&self, stage: Stage) -> Option<&Path> {
        match stage {
            Stage::Essa => self.essa_from.as_deref(),
            Stage::Sa => self.sa_from.as_deref(),
            Stage::Ttt => self.ttt_from.as_deref(),
        }
        .map(|p| p as &Path)
    }

    pub fn stage_data(&self, stage: Stage) -> Option<&Path> {
        match stage {
            Stage::Essa => self.data.essa.as_deref(),
            Stage::Sa => self.data.sa.as_deref(),
            Stage::Ttt => self.data.ttt.as_deref(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    /// Parses config text; relative paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut b = Builder::new(base);
        let mut section: Option<String> = None;
        let mut seen = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| line_err(line_no, format!("malformed section header `{line}`")))?
                    .trim()
                    .to_string();
                if !SECTIONS.contains(&name.as_str()) {
                    return Err(line_err(line_no, format!("unknown section [{name}]")));
                }
                section = Some(name);
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| line_err(line_no, format!("expected `key = value`, found `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let sec = section
                .as_deref()
                .ok_or_else(|| line_err(line_no, format!("key `{key}` appears before any section")))?;
            if !seen.insert((sec.to_string(), key.to_string())) {
                return Err(line_err(line_no, format!("duplicate key `{key}` in [{sec}]")));
            }
            b.set(sec, key, value, line_no).map_err(|msg| line_err(line_no, msg))?;
        }
        b.finish()
    }
}

const SECTIONS: &[&str] = &["model", "adapter.essa", "adapter.sa", "adapter.ttt", "essa", "sa", "ttt", "data", "eval"];

fn strip_comment(line: &str) -> &str {
    let cut = line.find(['#', ';']).unwrap_or(line.len());
    &line[..cut]
}

fn line_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Config(format!("line {line}: {}", msg.into()))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("`{key}` has invalid value `{value}`"))
}

fn flag(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("`{key}` must be true or false, got `{value}`")),
    }
}

/// Raw adapter keys; resolved once the whole file is read.
#[derive(Default)]
struct AdapterKeys {
    first_line: Option<usize>,
    kind: Option<(usize, String)>,
    rank: Option<usize>,
    alpha: Option<f64>,
    targets: Option<Vec<LoraTarget>>,
    prompts: Option<usize>,
    mode: Option<PromptMode>,
    fraction: Option<f64>,
    seed: Option<u64>,
}

impl AdapterKeys {
    fn set(&mut self, key: &str, value: &str, line: usize) -> std::result::Result<(), String> {
        self.first_line.get_or_insert(line);
        match key {
            "kind" => self.kind = Some((line, value.to_string())),
            "rank" => self.rank = Some(num(key, value)?),
            "alpha" => self.alpha = Some(num(key, value)?),
            "targets" => {
                self.targets = Some(
                    value
                        .split(',')
                        .map(|t| LoraTarget::parse(t.trim()))
                        .collect::<Result<Vec<_>>>()
                        .map_err(|e| e.to_string())?,
                )
            }
            "prompts" => self.prompts = Some(num(key, value)?),
            "mode" => self.mode = Some(PromptMode::parse(value).map_err(|e| e.to_string())?),
            "fraction" => self.fraction = Some(num(key, value)?),
            "seed" => self.seed = Some(num(key, value)?),
            _ => return Err(format!("unknown adapter key `{key}`")),
        }
        Ok(())
    }

    fn resolve(&self, section: &str, default_seed: u64) -> Result<Option<AdapterSpec>> {
        let Some((line, kind)) = &self.kind else {
            return match self.first_line {
                Some(l) => Err(line_err(l, format!("[{section}] adapter keys given without `kind`"))),
                None => Ok(None),
            };
        };
        let ctx = |msg: String| line_err(*line, format!("[{section}] {msg}"));
        let unused = |names: &[(&str, bool)]| -> Result<()> {
            match names.iter().find(|(_, set)| *set) {
                Some((n, _)) => Err(ctx(format!("key `{n}` does not apply to kind `{kind}`"))),
                None => Ok(()),
            }
        };
        let lora_keys = [("rank", self.rank.is_some()), ("alpha", self.alpha.is_some()), ("targets", self.targets.is_some())];
        let vpt_keys = [("prompts", self.prompts.is_some()), ("mode", self.mode.is_some())];
        let apla_keys = [("fraction", self.fraction.is_some()), ("seed", self.seed.is_some())];
        let spec = match kind.as_str() {
            "full" | "bitfit" => {
                unused(&lora_keys)?;
                unused(&vpt_keys)?;
                unused(&apla_keys)?;
                if kind == "full" {
                    AdapterSpec::Full
                } else {
                    AdapterSpec::BitFit
                }
            }
            "lora" => {
                unused(&vpt_keys)?;
                unused(&apla_keys)?;
                let AdapterSpec::Lora { rank, alpha, targets } = AdapterSpec::lora_default() else { unreachable!() };
                AdapterSpec::Lora {
                    rank: self.rank.unwrap_or(rank),
                    alpha: self.alpha.unwrap_or(alpha),
                    targets: self.targets.clone().unwrap_or(targets),
                }
            }
            "vpt" => {
                unused(&lora_keys)?;
                unused(&apla_keys)?;
                let AdapterSpec::Vpt { prompts, mode } = AdapterSpec::vpt_default() else { unreachable!() };
                AdapterSpec::Vpt { prompts: self.prompts.unwrap_or(prompts), mode: self.mode.unwrap_or(mode) }
            }
            "apla" => {
                unused(&lora_keys)?;
                unused(&vpt_keys)?;
                let AdapterSpec::Apla { fraction, .. } = AdapterSpec::apla_default(0) else { unreachable!() };
                AdapterSpec::Apla { fraction: self.fraction.unwrap_or(fraction), seed: self.seed.unwrap_or(default_seed) }
            }
            other => return Err(ctx(format!("unknown adapter kind `{other}` (full, lora, vpt, bitfit, apla)"))),
        };
        spec.validate().map_err(|e| ctx(e.to_string()))?;
        Ok(Some(spec))
    }
}

struct Builder {
    base: PathBuf,
    preset: Option<String>,
    seed: u64,
    adapters: [AdapterKeys; 3],
    stages: [StageConfig; 3],
    stage_seed: [Option<u64>; 3],
    warmup_set: [bool; 3],
    from: [Option<PathBuf>; 3],
    data: DataPaths,
    eval: EvalConfig,
}

fn stage_index(name: &str) -> usize {
    match name {
        "essa" => 0,
        "sa" => 1,
        _ => 2,
    }
}

impl Builder {
    fn new(base: &Path) -> Self {
        Builder {
            base: base.to_path_buf(),
            preset: None,
            seed: 0,
            adapters: Default::default(),
            stages: [
                StageConfig::essa(AdapterSpec::Full),
                StageConfig::sa(AdapterSpec::Full, SaMode::Full),
                StageConfig::ttt(AdapterSpec::BitFit),
            ],
            stage_seed: [None; 3],
            warmup_set: [false; 3],
            from: Default::default(),
            data: DataPaths::default(),
            eval: EvalConfig::default(),
        }
    }

    fn path(&self, value: &str) -> PathBuf {
        let p = PathBuf::from(value);
        if p.is_absolute() {
            p
        } else {
            self.base.join(p)
        }
    }

    fn set(&mut self, section: &str, key: &str, value: &str, line: usize) -> std::result::Result<(), String> {
        match section {
            "model" => match key {
                "preset" => self.preset = Some(value.to_string()),
                "seed" => self.seed = num(key, value)?,
                _ => return Err(format!("unknown key `{key}` in [model]")),
            },
            "data" => {
                let p = Some(self.path(value));
                match key {
                    "essa" => self.data.essa = p,
                    "sa" => self.data.sa = p,
                    "ttt" => self.data.ttt = p,
                    "train" => self.data.train = p,
                    "test" => self.data.test = p,
                    _ => return Err(format!("unknown key `{key}` in [data]")),
                }
            }
            "eval" => match key {
                "k" => self.eval.k = num(key, value)?,
                "tau" => self.eval.tau = num(key, value)?,
                "metric" => self.eval.metric = Metric::parse(value).map_err(|e| e.to_string())?,
                _ => return Err(format!("unknown key `{key}` in [eval]")),
            },
            s if s.starts_with("adapter.") => {
                let i = stage_index(&s["adapter.".len()..]);
                self.adapters[i].set(key, value, line)?;
            }
            s => {
                let i = stage_index(s);
                if key == "from" {
                    self.from[i] = Some(self.path(value));
                    return Ok(());
                }
                if key == "seed" {
                    self.stage_seed[i] = Some(num(key, value)?);
                    return Ok(());
                }
                self.warmup_set[i] |= key == "warmup_epochs";
                set_stage_key(&mut self.stages[i], s, key, value)?;
            }
        }
        Ok(())
    }

    fn finish(mut self) -> Result<RunConfig> {
        let preset = self.preset.clone().unwrap_or_else(|| "tiny".into());
        let vit = ViTConfig::preset(&preset)?;
        for i in 0..3 {
            let name = ["adapter.essa", "adapter.sa", "adapter.ttt"][i];
            let seed = self.stage_seed[i].unwrap_or(self.seed);
            self.stages[i].seed = seed;
            if !self.warmup_set[i] {
                self.stages[i].warmup_epochs = self.stages[i].epochs / 10;
            }
            if let Some(spec) = self.adapters[i].resolve(name, seed)? {
                self.stages[i].adapter = spec;
            }
            self.stages[i].validate().map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("[{}] {m}", self.stages[i].stage.as_str())),
                other => other,
            })?;
        }
        let [essa, sa, ttt] = self.stages;
        let [essa_from, sa_from, ttt_from] = self.from;
        Ok(RunConfig {
            preset,
            vit,
            seed: self.seed,
            essa,
            sa,
            ttt,
            essa_from,
            sa_from,
            ttt_from,
            data: self.data,
            eval: self.eval,
        })
    }
}

fn set_stage_key(c: &mut StageConfig, section: &str, key: &str, value: &str) -> std::result::Result<(), String> {
    match key {
        "epochs" => c.epochs = num(key, value)?,
        "batch_size" => c.batch_size = num(key, value)?,
        "base_lr" => c.base_lr = num(key, value)?,
        "warmup_epochs" => c.warmup_epochs = num(key, value)?,
        "weight_decay" => c.optimizer.weight_decay = num(key, value)?,
        "beta1" => c.optimizer.beta1 = num(key, value)?,
        "beta2" => c.optimizer.beta2 = num(key, value)?,
        "eps" => c.optimizer.eps = num(key, value)?,
        "tau_student" => c.ssl.tau_student = num(key, value)?,
        "tau_teacher" => c.ssl.tau_teacher = num(key, value)?,
        "teacher_momentum" => c.ssl.teacher_momentum = num(key, value)?,
        "center_momentum" => c.ssl.center_momentum = num(key, value)?,
        "crop" => c.aug.crop = flag(key, value)?,
        "flip" => c.aug.flip = flag(key, value)?,
        "jitter" => c.aug.jitter = flag(key, value)?,
        "noise" => c.aug.noise = flag(key, value)?,
        "min_crop_scale" => c.aug.min_crop_scale = num(key, value)?,
        "jitter_strength" => c.aug.jitter_strength = num(key, value)?,
        "noise_std" => c.aug.noise_std = num(key, value)?,
        "mode" if section == "sa" => {
            c.sa_mode = match value {
                "full" => SaMode::Full,
                "peft" => SaMode::Peft,
                _ => return Err(format!("`mode` must be full or peft, got `{value}`")),
            }
        }
        _ => return Err(format!("unknown key `{key}` in [{section}]")),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, Path::new("/runs"))
    }

    #[test]
    fn full_config_parses() {
        let c = parse(
            "[model]\npreset = tiny\nseed = 7\n\n[adapter.essa]\nkind = lora\nrank = 2\ntargets = q, v\n\n\
             [essa]\nepochs = 5\nwarmup_epochs = 1\ntau_teacher = 0.01 # sharper\nfrom = pre.ckpt\n\n\
             [sa]\nmode = peft\n\n[data]\nessa = data/t.esds\ntest = /abs/test.esds\n\n[eval]\nk = 5\nmetric = kappa\n",
        )
        .unwrap();
        assert_eq!(c.vit, ViTConfig::tiny());
        assert_eq!(c.essa.adapter, AdapterSpec::Lora { rank: 2, alpha: 8.0, targets: vec![LoraTarget::Q, LoraTarget::V] });
        assert_eq!(c.essa.epochs, 5);
        assert_eq!(c.essa.seed, 7);
        assert_eq!(c.essa.ssl.tau_teacher, 0.01);
        assert_eq!(c.sa.sa_mode, SaMode::Peft);
        assert_eq!(c.essa_from.as_deref(), Some(Path::new("/runs/pre.ckpt")));
        assert_eq!(c.data.essa.as_deref(), Some(Path::new("/runs/data/t.esds")));
        assert_eq!(c.data.test.as_deref(), Some(Path::new("/abs/test.esds")));
        assert_eq!(c.eval.k, 5);
        assert_eq!(c.eval.metric, Metric::Kappa);
    }

    #[test]
    fn apla_seed_defaults_to_the_stage_seed() {
        let c = parse("[model]\nseed = 3\n[adapter.sa]\nkind = apla\n[sa]\nseed = 9\nmode = peft\n").unwrap();
        assert_eq!(c.sa.adapter, AdapterSpec::Apla { fraction: 0.1, seed: 9 });
    }

    #[test]
    fn diagnostics_carry_line_numbers() {
        let err = parse("[model]\npreset = tiny\n\n[essa]\nepoch = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("line 5"), "{err}");
        assert!(parse("[modle]\n").unwrap_err().to_string().contains("line 1"));
        assert!(parse("seed = 1\n").unwrap_err().to_string().contains("before any section"));
        assert!(parse("[model]\nseed = x\n").unwrap_err().to_string().contains("line 2"));
        assert!(parse("[model]\nseed = 1\nseed = 2\n").unwrap_err().to_string().contains("duplicate"));
        assert!(parse("[model]\npreset = huge\n").is_err());
        assert!(parse("[adapter.essa]\nkind = bitfit\nrank = 2\n").unwrap_err().to_string().contains("line 2"));
        assert!(parse("[essa]\nmode = peft\n").is_err());
        assert!(parse("[adapter.sa]\n\nrank = 2\n").unwrap_err().to_string().contains("line 3"));
        assert!(parse("[essa]\nepochs = 2\nwarmup_epochs = 2\n").unwrap_err().to_string().contains("[essa]"));
        let c = parse("[essa]\nepochs = 3\n[sa]\nepochs = 40\n").unwrap();
        assert_eq!((c.essa.warmup_epochs, c.sa.warmup_epochs, c.ttt.warmup_epochs), (0, 4, 1));
    }
}
