//! Run configuration: a flat `section.key = value` text file.
//!
//! Lines are trimmed; blank lines and lines starting with `#` are skipped.
//! Every key has a default, unknown keys are rejected, and
//! [`RunConfig::to_text`] writes every key so that parsing it back yields an
//! identical config.

use std::fmt::Display;
use std::str::FromStr;

use crate::denoiser::{DenoiserConfig, PretrainConfig};
use crate::error::{Error, Result};
use crate::rl::RLConfig;
use crate::rng::derive_seed;
use crate::samplers::SamplerConfig;
use crate::tasks::{task_vocab, TaskKind, TaskSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSection {
    pub spec: TaskSpec,
    /// RL prompt pool size.
    pub train_size: usize,
    /// Held-out instances for evaluation during and after training.
    pub eval_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserSection {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub schedule: String,
    pub schedule_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub grad_clip: f64,
    pub eval_every: usize,
    pub corpus_size: usize,
    pub heldout_size: usize,
    /// Share of corpus completions that are verified answers.
    pub correct_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub n: usize,
    pub gammas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: TaskSection,
    pub denoiser: DenoiserSection,
    pub pretrain: PretrainSection,
    pub sampler: SamplerConfig,
    /// `rl.seed` is not a key; it is derived from the root seed.
    pub rl: RLConfig,
    /// Iterations between RL checkpoints (0 = final only).
    pub rl_checkpoint_every: usize,
    pub eval: EvalSection,
    pub seed: u64,
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = TaskSpec::new(TaskKind::MiniCountdown);
        let completion = spec.completion_len();
        let mut rl = RLConfig::new(task_vocab().size);
        rl.seed = 0;
        rl.batch_prompts = 16;
        rl.group_size = 8;
        rl.lr = 1e-3;
        rl.steps = 200;
        Self {
            task: TaskSection { spec, train_size: 2000, eval_size: 200 },
            denoiser: DenoiserSection {
                embed_dim: 64,
                num_layers: 2,
                num_heads: 4,
                ffn_dim: 256,
                schedule: "linear".into(),
                schedule_steps: completion,
            },
            pretrain: PretrainSection {
                steps: 1500,
                batch_size: 32,
                lr: 3e-3,
                warmup: 50,
                grad_clip: 1.0,
                eval_every: 100,
                corpus_size: 4000,
                heldout_size: 200,
                correct_fraction: 0.4,
            },
            sampler: SamplerConfig { max_len: completion, block_size: completion, ..SamplerConfig::default() },
            rl,
            rl_checkpoint_every: 0,
            eval: EvalSection { n: 200, gammas: vec![0.01, 0.1, 0.3, 0.6, 1.0, 2.0] },
            seed: 0,
            output_dir: "runs".into(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| Error::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

fn fmt_list(xs: &[f64]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn parse_gammas(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|s| parse::<f64>(key, s.trim())).collect()
}

impl RunConfig {
    /// All keys in file order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let t = &self.task;
        let d = &self.denoiser;
        let p = &self.pretrain;
        let r = &self.rl;
        let mut v: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("output_dir".into(), self.output_dir.clone()),
            ("task.name".into(), t.spec.kind.to_string()),
            ("task.operand_max".into(), t.spec.operand_max.to_string()),
            ("task.target_max".into(), t.spec.target_max.to_string()),
            ("task.sort_len".into(), t.spec.sort_len.to_string()),
            ("task.modulus_max".into(), t.spec.modulus_max.to_string()),
            ("task.train_seed".into(), t.spec.train_seed.to_string()),
            ("task.eval_seed".into(), t.spec.eval_seed.to_string()),
            ("task.train_size".into(), t.train_size.to_string()),
            ("task.eval_size".into(), t.eval_size.to_string()),
            ("denoiser.embed_dim".into(), d.embed_dim.to_string()),
            ("denoiser.num_layers".into(), d.num_layers.to_string()),
            ("denoiser.num_heads".into(), d.num_heads.to_string()),
            ("denoiser.ffn_dim".into(), d.ffn_dim.to_string()),
            ("denoiser.schedule".into(), d.schedule.clone()),
            ("denoiser.schedule_steps".into(), d.schedule_steps.to_string()),
            ("pretrain.steps".into(), p.steps.to_string()),
            ("pretrain.batch_size".into(), p.batch_size.to_string()),
            ("pretrain.lr".into(), p.lr.to_string()),
            ("pretrain.warmup".into(), p.warmup.to_string()),
            ("pretrain.grad_clip".into(), p.grad_clip.to_string()),
            ("pretrain.eval_every".into(), p.eval_every.to_string()),
            ("pretrain.corpus_size".into(), p.corpus_size.to_string()),
            ("pretrain.heldout_size".into(), p.heldout_size.to_string()),
            ("pretrain.correct_fraction".into(), p.correct_fraction.to_string()),
        ];
        v.extend(self.sampler.to_pairs().into_iter().map(|(k, val)| (format!("sampler.{k}"), val)));
        v.extend([
            ("rl.variant".into(), r.variant.to_string()),
            ("rl.group_size".into(), r.group_size.to_string()),
            ("rl.batch_prompts".into(), r.batch_prompts.to_string()),
            ("rl.clip_eps".into(), r.clip_eps.to_string()),
            ("rl.is_cap".into(), r.is_cap.to_string()),
            ("rl.sigma_explore".into(), r.sigma_explore.to_string()),
            ("rl.gamma_max".into(), r.gamma_max.to_string()),
            ("rl.gamma_init".into(), r.gamma_init.to_string()),
            ("rl.lr".into(), r.lr.to_string()),
            ("rl.grad_clip".into(), r.grad_clip.to_string()),
            ("rl.steps".into(), r.steps.to_string()),
            ("rl.adv_eps".into(), r.adv_eps.to_string()),
            ("rl.eval_every".into(), r.eval_every.to_string()),
            ("rl.checkpoint_every".into(), self.rl_checkpoint_every.to_string()),
            ("eval.n".into(), self.eval.n.to_string()),
            ("eval.gammas".into(), fmt_list(&self.eval.gammas)),
        ]);
        v
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Apply one assignment; unknown keys are an error naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.task;
        let d = &mut self.denoiser;
        let p = &mut self.pretrain;
        let r = &mut self.rl;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "output_dir" => self.output_dir = value.to_string(),
            "task.name" => t.spec.kind = value.parse()?,
            "task.operand_max" => t.spec.operand_max = parse(key, value)?,
            "task.target_max" => t.spec.target_max = parse(key, value)?,
            "task.sort_len" => t.spec.sort_len = parse(key, value)?,
            "task.modulus_max" => t.spec.modulus_max = parse(key, value)?,
            "task.train_seed" => t.spec.train_seed = parse(key, value)?,
            "task.eval_seed" => t.spec.eval_seed = parse(key, value)?,
            "task.train_size" => t.train_size = parse(key, value)?,
            "task.eval_size" => t.eval_size = parse(key, value)?,
            "denoiser.embed_dim" => d.embed_dim = parse(key, value)?,
            "denoiser.num_layers" => d.num_layers = parse(key, value)?,
            "denoiser.num_heads" => d.num_heads = parse(key, value)?,
            "denoiser.ffn_dim" => d.ffn_dim = parse(key, value)?,
            "denoiser.schedule" => d.schedule = value.to_string(),
            "denoiser.schedule_steps" => d.schedule_steps = parse(key, value)?,
            "pretrain.steps" => p.steps = parse(key, value)?,
            "pretrain.batch_size" => p.batch_size = parse(key, value)?,
            "pretrain.lr" => p.lr = parse(key, value)?,
            "pretrain.warmup" => p.warmup = parse(key, value)?,
            "pretrain.grad_clip" => p.grad_clip = parse(key, value)?,
            "pretrain.eval_every" => p.eval_every = parse(key, value)?,
            "pretrain.corpus_size" => p.corpus_size = parse(key, value)?,
            "pretrain.heldout_size" => p.heldout_size = parse(key, value)?,
            "pretrain.correct_fraction" => p.correct_fraction = parse(key, value)?,
            "rl.variant" => r.variant = value.parse()?,
            "rl.group_size" => r.group_size = parse(key, value)?,
            "rl.batch_prompts" => r.batch_prompts = parse(key, value)?,
            "rl.clip_eps" => r.clip_eps = parse(key, value)?,
            "rl.is_cap" => r.is_cap = parse(key, value)?,
            "rl.sigma_explore" => r.sigma_explore = parse(key, value)?,
            "rl.gamma_max" => r.gamma_max = parse(key, value)?,
            "rl.gamma_init" => r.gamma_init = parse(key, value)?,
            "rl.lr" => r.lr = parse(key, value)?,
            "rl.grad_clip" => r.grad_clip = parse(key, value)?,
            "rl.steps" => r.steps = parse(key, value)?,
            "rl.adv_eps" => r.adv_eps = parse(key, value)?,
            "rl.eval_every" => r.eval_every = parse(key, value)?,
            "rl.checkpoint_every" => self.rl_checkpoint_every = parse(key, value)?,
            "eval.n" => self.eval.n = parse(key, value)?,
            "eval.gammas" => self.eval.gammas = parse_gammas(key, value)?,
            _ => match key.strip_prefix("sampler.") {
                Some(k) => self.sampler.set(k, value)?,
                None => return Err(Error::Config(format!("unknown key `{key}`"))),
            },
        }
        Ok(())
    }

    /// Parse a config file over the defaults, then validate.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.rl_config().validate()?;
        self.denoiser_config().validate()?;
        if self.task.train_size == 0 || self.task.eval_size == 0 || self.eval.n == 0 {
            return Err(Error::Config("task.train_size, task.eval_size and eval.n must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.pretrain.correct_fraction) {
            return Err(Error::Config("pretrain.correct_fraction must lie in [0,1]".into()));
        }
        if self.pretrain.corpus_size == 0 || self.pretrain.batch_size == 0 {
            return Err(Error::Config("pretrain.corpus_size and pretrain.batch_size must be positive".into()));
        }
        let need = self.task.spec.completion_len();
        if self.sampler.max_len < need {
            return Err(Error::Config(format!("sampler.max_len {} shorter than the task's answers ({need})", self.sampler.max_len)));
        }
        Ok(())
    }

    /// Model input length: longest prompt plus the completion.
    pub fn model_max_len(&self) -> usize {
        self.task.spec.max_prompt_len() + self.sampler.max_len
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            embed_dim: self.denoiser.embed_dim,
            num_layers: self.denoiser.num_layers,
            num_heads: self.denoiser.num_heads,
            ffn_dim: self.denoiser.ffn_dim,
            ..DenoiserConfig::new(task_vocab(), self.model_max_len(), derive_seed(self.seed, "init", 0))
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            steps: p.steps,
            batch_size: p.batch_size,
            lr: p.lr,
            warmup: p.warmup,
            grad_clip: p.grad_clip,
            seed: derive_seed(self.seed, "pretrain", 0),
            eval_every: p.eval_every,
        }
    }

    pub fn rl_config(&self) -> RLConfig {
        RLConfig { seed: derive_seed(self.seed, "rl", 0), ..self.rl.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rl::Variant;

    #[test]
    fn round_trip_is_lossless() {
        let mut cfg = RunConfig::default();
        cfg.rl.variant = Variant::Joint;
        cfg.sampler.strategy = crate::samplers::Strategy::Eb;
        cfg.sampler.gamma = 0.123456789012345;
        cfg.eval.gammas = vec![0.01, 1.0 / 3.0];
        cfg.pretrain.lr = 1e-3 / 7.0;
        cfg.output_dir = "out dir/x".into();
        let text = cfg.to_text();
        assert_eq!(RunConfig::from_text(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_text(&text).unwrap().to_text(), text);
    }

    #[test]
    fn unknown_keys_are_named() {
        for key in ["rl.bogus", "sampler.bogus", "nothing"] {
            let err = RunConfig::from_text(&format!("{key} = 1\n")).unwrap_err();
            assert!(err.to_string().contains(key), "{err}");
        }
        assert!(RunConfig::from_text("seed = x").unwrap_err().to_string().contains("seed"));
        assert!(RunConfig::from_text("just text").is_err());
    }

    #[test]
    fn comments_and_defaults() {
        let cfg = RunConfig::from_text("# comment\n\nseed = 7\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.pretrain, RunConfig::default().pretrain);
        assert_eq!(cfg.model_max_len(), 16);
        assert_ne!(cfg.rl_config().seed, RunConfig::default().rl_config().seed);
    }
}
