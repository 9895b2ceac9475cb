use super::{CFConfig, ReplayConfig};
use crate::error::{Error, Result};

/// A named continued-pretraining configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub aliases: &'static [&'static str],
    pub description: &'static str,
    /// Stage the preset continues from: `none`, `base` or `bio`.
    pub parent_stage: &'static str,
    pub cf: CFConfig,
}

fn replay(n: usize) -> Option<ReplayConfig> {
    Some(ReplayConfig { frequency: n, corpus: None })
}

pub fn presets() -> Vec<Preset> {
    vec![
        Preset {
            name: "base",
            aliases: &[],
            description: "general-domain pretraining from scratch",
            parent_stage: "none",
            cf: CFConfig::default(),
        },
        Preset {
            name: "bio",
            aliases: &[],
            description: "large translated-domain adaptation of base",
            parent_stage: "base",
            cf: CFConfig::default(),
        },
        Preset {
            name: "med",
            aliases: &[],
            description: "small native-domain adaptation of bio, no mitigation",
            parent_stage: "bio",
            cf: CFConfig::default(),
        },
        Preset {
            name: "RF",
            aliases: &[],
            description: "freeze the 6 input-side layers",
            parent_stage: "bio",
            cf: CFConfig { freeze_layers: Some(6), ..Default::default() },
        },
        Preset {
            name: "R0",
            aliases: &[],
            description: "LLRD 0.9, replay every 100 steps",
            parent_stage: "bio",
            cf: CFConfig { llrd_decay: Some(0.9), replay: replay(100), ..Default::default() },
        },
        Preset {
            name: "R3",
            aliases: &[],
            description: "LLRD 0.9, mixout 0.9, warmup 0.02",
            parent_stage: "bio",
            cf: CFConfig { llrd_decay: Some(0.9), mixout_p: Some(0.9), warmup_fraction: Some(0.02), ..Default::default() },
        },
        Preset {
            name: "R3+",
            aliases: &["R3⁺"],
            description: "LLRD 0.95, mixout 0.9, warmup 0.02",
            parent_stage: "bio",
            cf: CFConfig { llrd_decay: Some(0.95), mixout_p: Some(0.9), warmup_fraction: Some(0.02), ..Default::default() },
        },
        Preset {
            name: "R12+",
            aliases: &["R12⁺"],
            description: "LLRD 0.95, replay every 50 steps",
            parent_stage: "bio",
            cf: CFConfig { llrd_decay: Some(0.95), replay: replay(50), ..Default::default() },
        },
        Preset {
            name: "OR",
            aliases: &[],
            description: "LLRD 0.9, mixout 0.9, warmup 0.02, continuing from base",
            parent_stage: "base",
            cf: CFConfig { llrd_decay: Some(0.9), mixout_p: Some(0.9), warmup_fraction: Some(0.02), ..Default::default() },
        },
    ]
}

/// Look up a preset by name or alias; unknown names list the choices.
pub fn preset(name: &str) -> Result<Preset> {
    let all = presets();
    if let Some(p) = all.iter().find(|p| p.name == name || p.aliases.contains(&name)) {
        return Ok(p.clone());
    }
    let names: Vec<&str> = all.iter().map(|p| p.name).collect();
    Err(Error::config(format!("unknown preset {name:?}; available: {}", names.join(", "))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_settings() {
        let r12 = preset("R12⁺").unwrap().cf;
        assert_eq!(r12.llrd_decay, Some(0.95));
        assert_eq!(r12.replay_frequency(), Some(50));
        assert_eq!(preset("R0").unwrap().cf.replay_frequency(), Some(100));
        assert_eq!(preset("RF").unwrap().cf.freeze_layers, Some(6));
        let r3 = preset("R3").unwrap().cf;
        assert_eq!((r3.llrd_decay, r3.mixout_p, r3.warmup_fraction), (Some(0.9), Some(0.9), Some(0.02)));
        assert_eq!(preset("R3+").unwrap().cf.llrd_decay, Some(0.95));
        for p in presets() {
            assert!(!p.cf.is_unvalidated(), "{}", p.name);
        }
    }

    #[test]
    fn unknown_preset_lists_names() {
        let e = preset("R99").unwrap_err().to_string();
        assert!(e.contains("R12+") && e.contains("OR"));
    }
}
