//! Run configuration and its `key = value` text form.
//!
//! ```text
//! # comments and blank lines are ignored
//! arm = full-rag
//! steps = 2000
//! grpo.learning_rate = 0.1
//! policy.embed_dim = 16
//! data.n_train = 400
//! ```

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::dataset::SyntheticSpec;
use super::HarnessError;
use crate::grpo::GrpoConfig;
use crate::policy::PolicyConfig;

/// Prompt variant. Only the prompt builder differs between arms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    NoRag,
    Static,
    FullRag,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::NoRag, Arm::Static, Arm::FullRag];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::NoRag => "no-rag",
            Arm::Static => "static",
            Arm::FullRag => "full-rag",
        }
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arm {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "no-rag" => Ok(Arm::NoRag),
            "static" => Ok(Arm::Static),
            "full-rag" => Ok(Arm::FullRag),
            other => Err(HarnessError::Config(format!("unknown arm {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Seeds the dataset, the policy initialization, sampling and batching.
    pub seed: u64,
    pub arm: Arm,
    /// Neighbors summarized in the retrieval prompt.
    pub k: usize,
    /// Chance that a sibling variant of a training query stays visible to
    /// that query's retrieval.
    pub sibling_keep: f64,
    pub steps: usize,
    /// Held-out evaluation cadence during training; 0 disables it.
    pub eval_every: usize,
    pub grpo: GrpoConfig,
    pub policy: PolicyConfig,
    pub data: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            arm: Arm::FullRag,
            k: 10,
            sibling_keep: 0.15,
            steps: 2000,
            eval_every: 500,
            grpo: GrpoConfig {
                learning_rate: 0.1,
                max_grad_norm: Some(1.0),
                ..GrpoConfig::default()
            },
            policy: PolicyConfig::default(),
            data: SyntheticSpec::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, HarnessError> {
    value
        .parse()
        .map_err(|_| HarnessError::Config(format!("bad value {value:?} for {key}")))
}

fn parse_range(key: &str, value: &str) -> Result<(f64, f64), HarnessError> {
    let (lo, hi) = value
        .split_once(',')
        .ok_or_else(|| HarnessError::Config(format!("{key} expects `lo,hi`")))?;
    Ok((parse(key, lo.trim())?, parse(key, hi.trim())?))
}

impl RunConfig {
    /// Parses a config file; keys not mentioned keep their defaults.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), HarnessError> {
        let (g, p, d) = (&mut self.grpo, &mut self.policy, &mut self.data);
        match key {
            "seed" => self.seed = parse(key, v)?,
            "arm" => self.arm = v.parse()?,
            "k" => self.k = parse(key, v)?,
            "sibling_keep" => self.sibling_keep = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,

            "grpo.group_size" => g.group_size = parse(key, v)?,
            "grpo.epsilon" => g.epsilon = parse(key, v)?,
            "grpo.beta" => g.beta = parse(key, v)?,
            "grpo.learning_rate" => g.learning_rate = parse(key, v)?,
            "grpo.sigma_floor" => g.sigma_floor = parse(key, v)?,
            "grpo.steps_per_old_refresh" => g.steps_per_old_refresh = parse(key, v)?,
            "grpo.temperature" => g.temperature = parse(key, v)?,
            "grpo.batch_size" => g.batch_size = parse(key, v)?,
            "grpo.max_grad_norm" => {
                g.max_grad_norm = if v == "none" { None } else { Some(parse(key, v)?) }
            }

            "policy.embed_dim" => p.embed_dim = parse(key, v)?,
            "policy.layers" => p.layers = parse(key, v)?,
            "policy.heads" => p.heads = parse(key, v)?,
            "policy.hidden_dim" => p.hidden_dim = parse(key, v)?,
            "policy.token_dim" => p.token_dim = parse(key, v)?,
            "policy.lora_rank" => p.lora_rank = parse(key, v)?,
            "policy.lora_alpha" => p.lora_alpha = parse(key, v)?,
            "policy.max_len" => p.max_len = parse(key, v)?,
            "policy.prior_strength" => p.prior_strength = parse(key, v)?,
            "policy.word_repeat_penalty" => p.word_repeat_penalty = parse(key, v)?,
            "policy.edge_gain" => p.edge_gain = parse(key, v)?,
            "policy.number_scale" => p.number_scale = parse(key, v)?,
            "policy.recurrence_gain" => p.recurrence_gain = parse(key, v)?,
            "policy.position_scale" => p.position_scale = parse(key, v)?,

            "data.image_size" => {
                let s: usize = parse(key, v)?;
                d.width = s;
                d.height = s;
            }
            "data.patch_size" => d.patch_size = parse(key, v)?,
            "data.n_train" => d.n_train = parse(key, v)?,
            "data.n_test" => d.n_test = parse(key, v)?,
            "data.scenes" => d.scenes = parse(key, v)?,
            "data.fake_fraction" => d.fake_fraction = parse(key, v)?,
            "data.artifact" => d.artifact = v.parse().map_err(HarnessError::Config)?,
            "data.box_min" => d.box_min = parse(key, v)?,
            "data.box_max" => d.box_max = parse(key, v)?,
            "data.amplitude" => d.amplitude = parse_range(key, v)?,
            "data.ramp_span" => d.ramp_span = parse_range(key, v)?,
            "data.subtle_probability" => d.subtle_probability = parse(key, v)?,
            "data.subtle_scale" => d.subtle_scale = parse(key, v)?,
            "data.noise_std" => d.noise_std = parse(key, v)?,
            other => return Err(HarnessError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Copies the run seed into the sub-configs and keeps image geometry in
    /// sync. Called by every entry point before use.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.data.seed = self.seed;
        c.grpo.seed = self.seed.wrapping_add(1);
        c.policy.image_size = c.data.width;
        c.policy.patch_size = c.data.patch_size;
        c
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let c = self.resolved();
        c.data.validate()?;
        if c.data.width != c.data.height {
            return Err(HarnessError::Config("images must be square".into()));
        }
        c.policy.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        c.grpo.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if c.k == 0 || c.k > crate::policy::MAX_PROMPT_NUMBER || c.k >= c.data.n_train {
            return Err(HarnessError::Config(format!(
                "k = {} must lie in 1..=min({}, n_train - 1)",
                c.k,
                crate::policy::MAX_PROMPT_NUMBER
            )));
        }
        Ok(())
    }

    /// Text form accepted by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let (g, p, d) = (&self.grpo, &self.policy, &self.data);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("seed", self.seed.to_string());
        kv("arm", self.arm.to_string());
        kv("k", self.k.to_string());
        kv("sibling_keep", self.sibling_keep.to_string());
        kv("steps", self.steps.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("grpo.group_size", g.group_size.to_string());
        kv("grpo.epsilon", g.epsilon.to_string());
        kv("grpo.beta", g.beta.to_string());
        kv("grpo.learning_rate", g.learning_rate.to_string());
        kv("grpo.sigma_floor", g.sigma_floor.to_string());
        kv("grpo.steps_per_old_refresh", g.steps_per_old_refresh.to_string());
        kv("grpo.temperature", g.temperature.to_string());
        kv("grpo.batch_size", g.batch_size.to_string());
        kv("grpo.max_grad_norm", g.max_grad_norm.map_or("none".into(), |c| c.to_string()));
        kv("policy.embed_dim", p.embed_dim.to_string());
        kv("policy.layers", p.layers.to_string());
        kv("policy.heads", p.heads.to_string());
        kv("policy.hidden_dim", p.hidden_dim.to_string());
        kv("policy.token_dim", p.token_dim.to_string());
        kv("policy.lora_rank", p.lora_rank.to_string());
        kv("policy.lora_alpha", p.lora_alpha.to_string());
        kv("policy.max_len", p.max_len.to_string());
        kv("policy.prior_strength", p.prior_strength.to_string());
        kv("policy.word_repeat_penalty", p.word_repeat_penalty.to_string());
        kv("policy.edge_gain", p.edge_gain.to_string());
        kv("policy.number_scale", p.number_scale.to_string());
        kv("policy.recurrence_gain", p.recurrence_gain.to_string());
        kv("policy.position_scale", p.position_scale.to_string());
        kv("data.image_size", d.width.to_string());
        kv("data.patch_size", d.patch_size.to_string());
        kv("data.n_train", d.n_train.to_string());
        kv("data.n_test", d.n_test.to_string());
        kv("data.scenes", d.scenes.to_string());
        kv("data.fake_fraction", d.fake_fraction.to_string());
        let mix = serde_json::to_value(d.artifact).unwrap();
        kv("data.artifact", mix.as_str().unwrap().to_string());
        kv("data.box_min", d.box_min.to_string());
        kv("data.box_max", d.box_max.to_string());
        kv("data.amplitude", format!("{},{}", d.amplitude.0, d.amplitude.1));
        kv("data.ramp_span", format!("{},{}", d.ramp_span.0, d.ramp_span.1));
        kv("data.subtle_probability", d.subtle_probability.to_string());
        kv("data.subtle_scale", d.subtle_scale.to_string());
        kv("data.noise_std", d.noise_std.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut c = RunConfig::default();
        c.arm = Arm::Static;
        c.grpo.max_grad_norm = None;
        c.data.amplitude = (0.05, 0.25);
        c.policy.lora_alpha = 2.5;
        c.sibling_keep = 0.25;
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = RunConfig::parse("# demo\nsteps = 10 # short\n\narm = no-rag\n").unwrap();
        assert_eq!(c.steps, 10);
        assert_eq!(c.arm, Arm::NoRag);
        assert_eq!(c.k, RunConfig::default().k);
    }

    #[test]
    fn errors_are_config_errors() {
        for text in [
            "steps 10",
            "nope = 1",
            "steps = ten",
            "arm = hybrid",
            "grpo.group_size = 1",
            "data.box_max = 64",
            "k = 0",
            "data.amplitude = 0.3",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(HarnessError::Config(_))), "{text}");
        }
    }

    #[test]
    fn resolved_threads_seed() {
        let c = RunConfig { seed: 9, ..RunConfig::default() }.resolved();
        assert_eq!((c.data.seed, c.grpo.seed), (9, 10));
    }
}
