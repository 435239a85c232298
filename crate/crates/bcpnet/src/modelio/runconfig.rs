//! Text run configuration: UTF-8 `key = value` lines with `#` comments.
//!
//! Missing keys take the documented defaults; unknown keys are rejected so a
//! typo cannot silently fall back to a default. `parse(print(cfg)) == cfg`
//! for every valid configuration.

use crate::error::{Error, Result};
use crate::graph::{ModelConfig, StageSpec};
use crate::nnops::PoolKind;
use crate::train::TrainConfig;

/// Everything a CLI run needs: the model wiring and the training recipe.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse_stage(value: &str) -> Result<StageSpec> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if !matches!(parts.len(), 4 | 5) {
        return Err(Error::Config(format!(
            "stage spec '{value}' must be 'channels,blocks,stride,expansion[,expansion_rest]'"
        )));
    }
    let num = |s: &str| -> Result<usize> {
        s.parse().map_err(|_| Error::Config(format!("invalid number '{s}' in stage spec")))
    };
    let expansion_first = num(parts[3])?;
    Ok(StageSpec {
        channels: num(parts[0])?,
        blocks: num(parts[1])?,
        stride: num(parts[2])?,
        expansion_first,
        expansion_rest: if parts.len() == 5 { num(parts[4])? } else { expansion_first },
    })
}

fn print_stage(s: &StageSpec) -> String {
    if s.expansion_first == s.expansion_rest {
        format!("{},{},{},{}", s.channels, s.blocks, s.stride, s.expansion_first)
    } else {
        format!("{},{},{},{},{}", s.channels, s.blocks, s.stride, s.expansion_first, s.expansion_rest)
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
            let bad_num =
                |k: &str, v: &str| Error::Config(format!("invalid value '{v}' for key '{k}'"));
            match key {
                "num_classes" => {
                    cfg.model.num_classes = value.parse().map_err(|_| bad_num(key, value))?
                }
                "fusion_width" => {
                    cfg.model.fusion_width = value.parse().map_err(|_| bad_num(key, value))?
                }
                "use_bcp" => {
                    cfg.model.ablation.use_bcp = match value {
                        "true" => true,
                        "false" => false,
                        _ => return Err(bad_num(key, value)),
                    }
                }
                "context_pool_kind" => {
                    cfg.model.ablation.context_pool_kind = match value {
                        "max" => PoolKind::Max,
                        "avg" => PoolKind::Avg,
                        _ => return Err(bad_num(key, value)),
                    }
                }
                "context_pool_k" => {
                    cfg.model.ablation.context_pool_k =
                        value.parse().map_err(|_| bad_num(key, value))?
                }
                "backbone_stem" => {
                    cfg.model.schedule.stem_channels =
                        value.parse().map_err(|_| bad_num(key, value))?
                }
                "backbone_stage1" | "backbone_stage2" | "backbone_stage3" | "backbone_stage4"
                | "backbone_stage5" => {
                    let idx = key.as_bytes()[key.len() - 1] - b'1';
                    cfg.model.schedule.stages[idx as usize] = parse_stage(value)?;
                }
                "init_lr" => cfg.train.init_lr = value.parse().map_err(|_| bad_num(key, value))?,
                "power" => cfg.train.power = value.parse().map_err(|_| bad_num(key, value))?,
                "momentum" => {
                    cfg.train.momentum = value.parse().map_err(|_| bad_num(key, value))?
                }
                "weight_decay" => {
                    cfg.train.weight_decay = value.parse().map_err(|_| bad_num(key, value))?
                }
                "total_iter" => {
                    cfg.train.total_iter = value.parse().map_err(|_| bad_num(key, value))?
                }
                "batch" => cfg.train.batch = value.parse().map_err(|_| bad_num(key, value))?,
                "crop_h" => cfg.train.crop.0 = value.parse().map_err(|_| bad_num(key, value))?,
                "crop_w" => cfg.train.crop.1 = value.parse().map_err(|_| bad_num(key, value))?,
                "scale_min" => {
                    cfg.train.scale_range.0 = value.parse().map_err(|_| bad_num(key, value))?
                }
                "scale_max" => {
                    cfg.train.scale_range.1 = value.parse().map_err(|_| bad_num(key, value))?
                }
                "flip_prob" => {
                    cfg.train.flip_prob = value.parse().map_err(|_| bad_num(key, value))?
                }
                "seed" => cfg.train.seed = value.parse().map_err(|_| bad_num(key, value))?,
                _ => return Err(Error::Config(format!("unknown key '{key}'"))),
            }
        }
        Ok(cfg)
    }

    pub fn print(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut out = String::from("# model\n");
        out.push_str(&format!("num_classes = {}\n", m.num_classes));
        out.push_str(&format!("fusion_width = {}\n", m.fusion_width));
        out.push_str(&format!("use_bcp = {}\n", m.ablation.use_bcp));
        out.push_str(&format!(
            "context_pool_kind = {}\n",
            match m.ablation.context_pool_kind {
                PoolKind::Max => "max",
                PoolKind::Avg => "avg",
            }
        ));
        out.push_str(&format!("context_pool_k = {}\n", m.ablation.context_pool_k));
        out.push_str(&format!("backbone_stem = {}\n", m.schedule.stem_channels));
        for (i, stage) in m.schedule.stages.iter().enumerate() {
            out.push_str(&format!("backbone_stage{} = {}\n", i + 1, print_stage(stage)));
        }
        out.push_str("\n# training\n");
        out.push_str(&format!("init_lr = {}\n", t.init_lr));
        out.push_str(&format!("power = {}\n", t.power));
        out.push_str(&format!("momentum = {}\n", t.momentum));
        out.push_str(&format!("weight_decay = {}\n", t.weight_decay));
        out.push_str(&format!("total_iter = {}\n", t.total_iter));
        out.push_str(&format!("batch = {}\n", t.batch));
        out.push_str(&format!("crop_h = {}\n", t.crop.0));
        out.push_str(&format!("crop_w = {}\n", t.crop.1));
        out.push_str(&format!("scale_min = {}\n", t.scale_range.0));
        out.push_str(&format!("scale_max = {}\n", t.scale_range.1));
        out.push_str(&format!("flip_prob = {}\n", t.flip_prob));
        out.push_str(&format!("seed = {}\n", t.seed));
        out
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<RunConfig> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_from_empty_text() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.model.num_classes, 19);
        assert_eq!(cfg.model.fusion_width, 96);
    }

    #[test]
    fn comments_and_blank_lines_skipped() {
        let cfg = RunConfig::parse("# hello\n\nnum_classes = 5\n  # another\n").unwrap();
        assert_eq!(cfg.model.num_classes, 5);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(RunConfig::parse("numclasses = 5"), Err(Error::Config(_))));
    }

    #[test]
    fn duplicate_key_rejected() {
        assert!(matches!(
            RunConfig::parse("seed = 1\nseed = 2"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn stage_specs_round_trip() {
        let text = "backbone_stage5 = 116,3,2,3,6\nbackbone_stage1 = 8,1,1,1\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.model.schedule.stages[4].expansion_first, 3);
        assert_eq!(cfg.model.schedule.stages[4].expansion_rest, 6);
        let reparsed = RunConfig::parse(&cfg.print()).unwrap();
        assert_eq!(reparsed, cfg);
    }

    #[test]
    fn print_parse_default_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.print()).unwrap(), cfg);
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(
            classes in 1usize..40,
            width in 8usize..160,
            lr in 1e-4f64..1.0,
            seed in 0u64..u64::MAX,
            use_bcp in any::<bool>(),
            total in 1usize..5000,
        ) {
            let mut cfg = RunConfig::default();
            cfg.model.num_classes = classes;
            cfg.model.fusion_width = width;
            cfg.model.ablation.use_bcp = use_bcp;
            cfg.train.init_lr = lr;
            cfg.train.seed = seed;
            cfg.train.total_iter = total;
            prop_assert_eq!(RunConfig::parse(&cfg.print()).unwrap(), cfg);
        }
    }
}
