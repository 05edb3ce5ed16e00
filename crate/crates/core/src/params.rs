//! Closed-form trainable-parameter counts and the benchmark presets.

use serde::{Deserialize, Serialize};

use crate::prompt::PromptLayout;

/// Shape of a full experiment, enough to count every trainable scalar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub classes: usize,
    pub context_len: usize,
    pub domain_len: usize,
    pub dim: usize,
    pub sources: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub autoencoders: usize,
}

impl ModelShape {
    pub fn layout(&self) -> PromptLayout {
        PromptLayout {
            classes: self.classes,
            context_len: self.context_len,
            domain_len: self.domain_len,
            dim: self.dim,
        }
    }

    /// `K·M1·d_c + 2·M2·d_c`.
    pub fn pair(&self) -> usize {
        self.classes * self.context_len * self.dim + 2 * self.domain_len * self.dim
    }

    pub fn stage1(&self) -> usize {
        self.sources * self.pair()
    }

    /// One autoencoder: `d_I·d_c + d_I + h·d_I + h + d_c·h + d_c`.
    pub fn autoencoder(&self) -> usize {
        let (d, l, h) = (self.dim, self.latent_dim, self.hidden);
        l * d + l + h * l + h + d * h + d
    }

    pub fn stage2(&self) -> usize {
        self.autoencoders * self.autoencoder()
    }

    /// Stage one plus stage two.
    pub fn total(&self) -> usize {
        self.stage1() + self.stage2()
    }

    /// `K·M1·d_I + M2·d_I`.
    pub fn lst(&self) -> usize {
        (self.classes * self.context_len + self.domain_len) * self.latent_dim
    }

    pub fn report(&self) -> ParamReport {
        ParamReport {
            pair: self.pair(),
            stage1: self.stage1(),
            autoencoder: self.autoencoder(),
            stage2: self.stage2(),
            total: self.total(),
            lst: self.lst(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub pair: usize,
    pub stage1: usize,
    pub autoencoder: usize,
    pub stage2: usize,
    pub total: usize,
    pub lst: usize,
}

/// A named benchmark configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub shape: ModelShape,
}

const fn preset(name: &'static str, classes: usize, sources: usize, latent_dim: usize) -> Preset {
    Preset {
        name,
        shape: ModelShape {
            classes,
            context_len: 16,
            domain_len: 16,
            dim: 512,
            sources,
            latent_dim,
            hidden: 384,
            autoencoders: 2,
        },
    }
}

pub const IMAGECLEF: Preset = preset("imageclef", 12, 2, 100);
pub const OFFICE_HOME: Preset = preset("office-home", 65, 3, 150);
pub const DOMAINNET: Preset = preset("domainnet", 345, 5, 250);

pub const PRESETS: [Preset; 3] = [IMAGECLEF, OFFICE_HOME, DOMAINNET];

pub fn preset_by_name(name: &str) -> Option<Preset> {
    let norm = name.to_ascii_lowercase().replace(['_', ' '], "-");
    PRESETS.iter().copied().find(|p| p.name == norm || p.name.replace('-', "") == norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn office_home_counts() {
        let r = OFFICE_HOME.shape.report();
        assert_eq!(r.pair, 548_864);
        assert_eq!(r.autoencoder, 332_054);
        assert_eq!(r.stage2, 664_108);
        assert_eq!(r.total, 2_310_700);
        assert_eq!(r.lst, 158_400);
    }

    #[test]
    fn other_presets() {
        assert_eq!(IMAGECLEF.shape.total(), 803_784);
        assert_eq!(IMAGECLEF.shape.lst(), 20_800);
        assert_eq!(DOMAINNET.shape.total(), 15_056_628);
        assert_eq!(DOMAINNET.shape.lst(), 1_384_000);
    }

    #[test]
    fn lookup_by_name() {
        assert_eq!(preset_by_name("Office_Home").unwrap().name, "office-home");
        assert_eq!(preset_by_name("officehome").unwrap().name, "office-home");
        assert!(preset_by_name("mnist").is_none());
    }
}
