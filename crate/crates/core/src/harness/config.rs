//! Run configuration and its plain-text `key = value` form.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::exits::{ExitPlacement, ExitVariant, MissingState};
use crate::harness::tokenize::VOCAB_SIZE;
use crate::mamba::MambaConfig;
use crate::model::BackboneKind;
use crate::training::{OracleConfig, TrainConfig};
use crate::transformer::TransformerConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub backbone: BackboneKind,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub d_state: usize,
    pub n_groups: usize,
    pub d_conv: usize,
    pub exit_variant: ExitVariant,
    /// Empty selects the default placement for `n_blocks`.
    pub placements: Vec<usize>,
    pub thetas: Vec<f64>,
    /// Empty selects every policy valid for the backbone.
    pub policies: Vec<MissingState>,
    /// Empty selects `0..=n_blocks-2`.
    pub prune_levels: Vec<usize>,
    pub k: usize,
    pub seed: u64,
    pub corpus: Option<PathBuf>,
    pub synth_bytes: usize,
    pub out_dir: PathBuf,
    pub held_out: f64,
    pub backbone_steps: usize,
    pub backbone_batch: usize,
    pub backbone_seq_len: usize,
    pub backbone_lr: f64,
    pub exit_windows: usize,
    pub exit_seq_len: usize,
    pub exit_steps: usize,
    pub exit_batch: usize,
    pub exit_lr: f64,
    pub eval_windows: usize,
    pub eval_len: usize,
    pub eval_prefill: usize,
    pub gen_prompts: usize,
    pub prompt_len: usize,
    pub gen_tokens: usize,
    /// `None` applies the default penalty rule.
    pub penalty: Option<f64>,
    pub include_prefill: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Transformer,
            d_model: 64,
            n_blocks: 8,
            n_heads: 4,
            max_seq_len: 128,
            d_state: 16,
            n_groups: 1,
            d_conv: 4,
            exit_variant: ExitVariant::Calm,
            placements: Vec::new(),
            thetas: vec![0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99],
            policies: Vec::new(),
            prune_levels: Vec::new(),
            k: 1,
            seed: 0,
            corpus: None,
            synth_bytes: 120_000,
            out_dir: PathBuf::from("out"),
            held_out: 0.1,
            backbone_steps: 1500,
            backbone_batch: 8,
            backbone_seq_len: 64,
            backbone_lr: 3e-3,
            exit_windows: 256,
            exit_seq_len: 64,
            exit_steps: 400,
            exit_batch: 8,
            exit_lr: 3e-4,
            eval_windows: 16,
            eval_len: 64,
            eval_prefill: 8,
            gen_prompts: 20,
            prompt_len: 16,
            gen_tokens: 48,
            penalty: None,
            include_prefill: false,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{v}` for `{key}`"))),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "backbone" => self.backbone = v.parse()?,
            "d_model" => self.d_model = parse_num(key, v)?,
            "n_blocks" => self.n_blocks = parse_num(key, v)?,
            "n_heads" => self.n_heads = parse_num(key, v)?,
            "max_seq_len" => self.max_seq_len = parse_num(key, v)?,
            "d_state" => self.d_state = parse_num(key, v)?,
            "n_groups" => self.n_groups = parse_num(key, v)?,
            "d_conv" => self.d_conv = parse_num(key, v)?,
            "exit_variant" => self.exit_variant = v.parse()?,
            "placements" => self.placements = parse_list(key, v)?,
            "thetas" => self.thetas = parse_list(key, v)?,
            "policies" => self.policies = parse_list(key, v)?,
            "prune_levels" => self.prune_levels = parse_list(key, v)?,
            "k" => self.k = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "corpus" => self.corpus = (!v.is_empty()).then(|| PathBuf::from(v)),
            "synth_bytes" => self.synth_bytes = parse_num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "held_out" => self.held_out = parse_num(key, v)?,
            "backbone_steps" => self.backbone_steps = parse_num(key, v)?,
            "backbone_batch" => self.backbone_batch = parse_num(key, v)?,
            "backbone_seq_len" => self.backbone_seq_len = parse_num(key, v)?,
            "backbone_lr" => self.backbone_lr = parse_num(key, v)?,
            "exit_windows" => self.exit_windows = parse_num(key, v)?,
            "exit_seq_len" => self.exit_seq_len = parse_num(key, v)?,
            "exit_steps" => self.exit_steps = parse_num(key, v)?,
            "exit_batch" => self.exit_batch = parse_num(key, v)?,
            "exit_lr" => self.exit_lr = parse_num(key, v)?,
            "eval_windows" => self.eval_windows = parse_num(key, v)?,
            "eval_len" => self.eval_len = parse_num(key, v)?,
            "eval_prefill" => self.eval_prefill = parse_num(key, v)?,
            "gen_prompts" => self.gen_prompts = parse_num(key, v)?,
            "prompt_len" => self.prompt_len = parse_num(key, v)?,
            "gen_tokens" => self.gen_tokens = parse_num(key, v)?,
            "penalty" => {
                self.penalty = match v {
                    "auto" | "" => None,
                    _ => Some(parse_num(key, v)?),
                }
            }
            "include_prefill" => self.include_prefill = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every field as `key = value` lines, readable by [`RunConfig::parse`].
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("backbone", self.backbone.to_string());
        put("d_model", self.d_model.to_string());
        put("n_blocks", self.n_blocks.to_string());
        put("n_heads", self.n_heads.to_string());
        put("max_seq_len", self.max_seq_len.to_string());
        put("d_state", self.d_state.to_string());
        put("n_groups", self.n_groups.to_string());
        put("d_conv", self.d_conv.to_string());
        put("exit_variant", self.exit_variant.to_string());
        put("placements", join(&self.placements));
        put("thetas", join(&self.thetas));
        put("policies", join(&self.policies));
        put("prune_levels", join(&self.prune_levels));
        put("k", self.k.to_string());
        put("seed", self.seed.to_string());
        put(
            "corpus",
            self.corpus.as_ref().map_or(String::new(), |p| p.display().to_string()),
        );
        put("synth_bytes", self.synth_bytes.to_string());
        put("out_dir", self.out_dir.display().to_string());
        put("held_out", self.held_out.to_string());
        put("backbone_steps", self.backbone_steps.to_string());
        put("backbone_batch", self.backbone_batch.to_string());
        put("backbone_seq_len", self.backbone_seq_len.to_string());
        put("backbone_lr", self.backbone_lr.to_string());
        put("exit_windows", self.exit_windows.to_string());
        put("exit_seq_len", self.exit_seq_len.to_string());
        put("exit_steps", self.exit_steps.to_string());
        put("exit_batch", self.exit_batch.to_string());
        put("exit_lr", self.exit_lr.to_string());
        put("eval_windows", self.eval_windows.to_string());
        put("eval_len", self.eval_len.to_string());
        put("eval_prefill", self.eval_prefill.to_string());
        put("gen_prompts", self.gen_prompts.to_string());
        put("prompt_len", self.prompt_len.to_string());
        put("gen_tokens", self.gen_tokens.to_string());
        put("penalty", self.penalty.map_or("auto".into(), |p| p.to_string()));
        put("include_prefill", self.include_prefill.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.thetas.is_empty() {
            return Err(Error::Config("threshold grid is empty".into()));
        }
        if self.thetas.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
            return Err(Error::Config("thresholds must be finite and nonnegative".into()));
        }
        if self.thetas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("threshold grid must be strictly increasing".into()));
        }
        for p in &self.policies {
            p.check_backbone(self.backbone)?;
        }
        if let Some(&p) = self.prune_levels.iter().find(|&&p| p + 2 > self.n_blocks) {
            return Err(Error::Config(format!("prune level {p} leaves no room for the final block")));
        }
        if self.k == 0 || self.k > VOCAB_SIZE {
            return Err(Error::Config(format!("k must be in 1..={VOCAB_SIZE}")));
        }
        if !(0.0..1.0).contains(&self.held_out) {
            return Err(Error::Config("held_out must be in [0, 1)".into()));
        }
        if self.penalty.is_some_and(|p| !(p >= 1.0)) {
            return Err(Error::Config("penalty must be ≥ 1".into()));
        }
        if self.eval_prefill == 0 || self.eval_prefill + 1 >= self.eval_len {
            return Err(Error::Config("eval_prefill must leave tokens to score".into()));
        }
        if self.prompt_len == 0 || self.gen_tokens == 0 {
            return Err(Error::Config("prompt_len and gen_tokens must be at least 1".into()));
        }
        if self.backbone == BackboneKind::Transformer
            && (self.eval_len > self.max_seq_len || self.prompt_len + self.gen_tokens > self.max_seq_len)
        {
            return Err(Error::Config("evaluation sequences exceed max_seq_len".into()));
        }
        match self.backbone {
            BackboneKind::Transformer => self.transformer_config().map(|_| ())?,
            BackboneKind::Mamba => self.mamba_config().map(|_| ())?,
        }
        self.placement()?;
        Ok(())
    }

    pub fn transformer_config(&self) -> Result<TransformerConfig> {
        TransformerConfig::new(self.n_blocks, self.d_model, self.n_heads, VOCAB_SIZE, self.max_seq_len)
    }

    pub fn mamba_config(&self) -> Result<MambaConfig> {
        MambaConfig::new(self.n_blocks, self.d_model, self.d_state, self.d_conv, self.n_groups, VOCAB_SIZE)
    }

    pub fn placement(&self) -> Result<ExitPlacement> {
        if self.placements.is_empty() {
            ExitPlacement::default_for(self.n_blocks)
        } else {
            ExitPlacement::new(self.placements.clone(), self.n_blocks)
        }
    }

    pub fn policies_for(&self, kind: BackboneKind) -> Vec<MissingState> {
        if self.policies.is_empty() {
            MissingState::for_backbone(kind).to_vec()
        } else {
            self.policies
                .iter()
                .copied()
                .filter(|p| p.check_backbone(kind).is_ok())
                .collect()
        }
    }

    pub fn prune_levels(&self) -> Vec<usize> {
        if self.prune_levels.is_empty() {
            (0..=self.n_blocks.saturating_sub(2)).collect()
        } else {
            self.prune_levels.clone()
        }
    }

    pub fn backbone_train(&self) -> TrainConfig {
        TrainConfig {
            steps: self.backbone_steps,
            batch: self.backbone_batch,
            seq_len: self.backbone_seq_len,
            lr: self.backbone_lr,
            clip: 1.0,
            seed: self.seed,
        }
    }

    pub fn oracle(&self) -> OracleConfig {
        OracleConfig {
            k: self.k,
            windows: self.exit_windows,
            seq_len: self.exit_seq_len,
            batch: self.exit_batch,
            steps: self.exit_steps,
            lr: self.exit_lr,
            seed: self.seed.wrapping_add(1),
        }
    }
}
