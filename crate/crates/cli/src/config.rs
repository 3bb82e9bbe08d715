//! Effective run configuration: defaults, then the config file, then
//! `DFENET_*` environment variables, then command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dfenet::data::{SplitRatios, DEFAULT_TARGET_SIZE};
use dfenet::kv::{self, KvMap};
use dfenet::loss::LossConfig;
use dfenet::model::ModelConfig;
use dfenet::train::TrainConfig;

pub const ENV_PREFIX: &str = "DFENET_";

const MODEL_KEYS: [&str; 6] = ["variant", "channels", "context_depth", "se_ratio", "ppd_width", "seed"];

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub data: Option<PathBuf>,
    /// In-plane size every slice is resized to.
    pub target_size: usize,
    pub k: usize,
    pub split_seed: u64,
    pub ratios: SplitRatios,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { data: None, target_size: DEFAULT_TARGET_SIZE, k: 5, split_seed: 0, ratios: SplitRatios::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CliConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    /// Whether any model key was given explicitly rather than defaulted.
    pub model_explicit: bool,
}

impl CliConfig {
    /// Layers `file` text, environment pairs and flag overrides, in that
    /// order, and rejects unknown keys from any source.
    pub fn resolve(
        file: Option<&str>,
        env: impl IntoIterator<Item = (String, String)>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let mut map = match file {
            Some(text) => kv::parse(text)?,
            None => KvMap::new(),
        };
        for (k, v) in env {
            if let Some(key) = k.strip_prefix(ENV_PREFIX) {
                map.insert(key.to_ascii_lowercase(), v);
            }
        }
        for (k, v) in overrides {
            map.insert(k.clone(), v.clone());
        }
        let model_explicit = MODEL_KEYS.iter().any(|k| map.contains_key(*k));
        let model = ModelConfig::take_from_kv(&mut map)?;
        let train = TrainConfig::take_from_kv(&mut map)?;
        let loss = LossConfig::take_from_kv(&mut map)?;
        let data = take_data(&mut map)?;
        kv::reject_unknown(&map)?;
        Ok(Self { model, train, loss, data, model_explicit })
    }

    /// Reads `path` (if any) and the process environment.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = path
            .map(|p| std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display())))
            .transpose()?;
        let cfg = Self::resolve(text.as_deref(), std::env::vars(), overrides);
        match path {
            Some(p) => cfg.with_context(|| format!("config {}", p.display())),
            None => cfg,
        }
    }

    pub fn to_text(&self) -> String {
        let mut pairs = self.model.to_kv();
        pairs.extend(self.train.to_kv());
        pairs.extend(self.loss.to_kv());
        if let Some(d) = &self.data.data {
            pairs.push(("data".into(), d.display().to_string()));
        }
        let r = self.data.ratios;
        pairs.extend([
            ("target_size".into(), self.data.target_size.to_string()),
            ("k".into(), self.data.k.to_string()),
            ("split_seed".into(), self.data.split_seed.to_string()),
            ("split_ratios".into(), format!("{},{},{}", r.train, r.val, r.test)),
        ]);
        kv::format(&pairs)
    }

    pub fn data_dir(&self) -> Result<&Path> {
        self.data.data.as_deref().context("no dataset given (use --data or `data = <dir>` in the config)")
    }
}

fn take_data(map: &mut KvMap) -> Result<DataConfig> {
    let mut d = DataConfig::default();
    if let Some(v) = map.remove("data") {
        d.data = Some(PathBuf::from(v));
    }
    if let Some(v) = kv::take(map, "target_size")? {
        d.target_size = v;
    }
    if let Some(v) = kv::take(map, "k")? {
        d.k = v;
    }
    if let Some(v) = kv::take(map, "split_seed")? {
        d.split_seed = v;
    }
    if let Some(v) = map.remove("split_ratios") {
        let parts = kv::parse_usize_list(&v)?;
        let [train, val, test] = parts[..] else {
            anyhow::bail!("`split_ratios = {v}`: expected three integers train,val,test");
        };
        d.ratios = SplitRatios { train, val, test };
    }
    anyhow::ensure!(d.target_size > 0, "target_size must be positive");
    anyhow::ensure!(d.k > 0, "k must be at least 1");
    Ok(d)
}

/// Splits `key=value` flag arguments.
pub fn parse_assignments(items: &[String]) -> Result<Vec<(String, String)>> {
    items
        .iter()
        .map(|s| {
            let (k, v) = s.split_once('=').with_context(|| format!("`--set {s}`: expected KEY=VALUE"))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use dfenet::model::Variant;

    fn none() -> Vec<(String, String)> {
        Vec::new()
    }

    #[test]
    fn layers_apply_in_order() {
        let file = "variant = unet2d\nlr0 = 0.01\nk = 3\n";
        let env = vec![("DFENET_LR0".to_string(), "0.02".to_string()), ("PATH".into(), "/bin".into())];
        let flags = vec![("k".to_string(), "4".to_string())];
        let c = CliConfig::resolve(Some(file), env, &flags).unwrap();
        assert_eq!(c.model.variant, Variant::Unet2d);
        assert_eq!(c.train.lr0, 0.02);
        assert_eq!(c.data.k, 4);
        assert!(c.model_explicit);
        assert!(!CliConfig::resolve(None, none(), &[]).unwrap().model_explicit);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = CliConfig::resolve(Some("learning_rate = 0.1"), none(), &[]).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        let env = vec![("DFENET_BOGUS".to_string(), "1".to_string())];
        assert!(CliConfig::resolve(None, env, &[]).is_err());
    }

    #[test]
    fn echoed_text_reloads_identically() {
        let flags = vec![
            ("data".to_string(), "/tmp/x".to_string()),
            ("loss_reduction".into(), "sum".into()),
            ("channels".into(), "8,16,32".into()),
            ("split_ratios".into(), "6,2,2".into()),
        ];
        let c = CliConfig::resolve(None, none(), &flags).unwrap();
        let back = CliConfig::resolve(Some(&c.to_text()), none(), &[]).unwrap();
        assert_eq!(back.model, c.model);
        assert_eq!(back.train, c.train);
        assert_eq!(back.loss, c.loss);
        assert_eq!(back.data, c.data);
    }

    #[test]
    fn assignments_need_an_equals_sign() {
        assert_eq!(parse_assignments(&["a = 1".into()]).unwrap(), vec![("a".into(), "1".into())]);
        assert!(parse_assignments(&["a".into()]).is_err());
    }
}
