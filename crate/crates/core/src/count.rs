//! Analytic parameter counts, computed from the configuration alone.

use crate::cnn::{Mrfp, Stem};
use crate::config::CoMerConfig;
use crate::cti::CtiBlock;
use crate::nn::Conv2d;
use crate::vit::VitBranch;

/// Parameter-name prefixes of each module in [`crate::model::CoMer`].
pub const PREFIXES: [(&str, &str); 7] = [
    ("vit", "vit."),
    ("stem", "stem."),
    ("mrfp", "mrfp."),
    ("cti_to_vit", "cti_v."),
    ("cti_to_cnn", "cti_c."),
    ("quarter", "quarter."),
    ("head", "head."),
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub vit: usize,
    pub stem: usize,
    pub mrfp: usize,
    pub cti_to_vit: usize,
    pub cti_to_cnn: usize,
    pub quarter: usize,
    pub head: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.vit + self.overhead() + self.head
    }

    /// Everything the two-branch model adds on top of the plain ViT,
    /// excluding the task head.
    pub fn overhead(&self) -> usize {
        self.stem + self.mrfp + self.cti_to_vit + self.cti_to_cnn + self.quarter
    }

    pub fn entries(&self) -> [(&'static str, usize); 7] {
        [
            ("vit", self.vit),
            ("stem", self.stem),
            ("mrfp", self.mrfp),
            ("cti_to_vit", self.cti_to_vit),
            ("cti_to_cnn", self.cti_to_cnn),
            ("quarter", self.quarter),
            ("head", self.head),
        ]
    }

    pub(crate) fn from_fn(mut f: impl FnMut(&str) -> usize) -> Self {
        let [vit, stem, mrfp, cti_to_vit, cti_to_cnn, quarter, head] = PREFIXES.map(|(_, p)| f(p));
        ParamBreakdown {
            vit,
            stem,
            mrfp,
            cti_to_vit,
            cti_to_cnn,
            quarter,
            head,
        }
    }
}

pub fn plain_vit(cfg: &CoMerConfig) -> usize {
    VitBranch::param_count(&cfg.vit)
}

pub fn analytic(cfg: &CoMerConfig) -> ParamBreakdown {
    let d = cfg.dim();
    let n = cfg.stages;
    let t = &cfg.toggles;
    let on = |b: bool| usize::from(b);
    ParamBreakdown {
        vit: plain_vit(cfg),
        stem: Stem::param_count(cfg.stem_width, d),
        mrfp: on(t.mrfp) * n * Mrfp::param_count(d, &cfg.mrfp),
        cti_to_vit: on(t.cti_to_vit) * n * (CtiBlock::param_count(d, &cfg.cti) + 1),
        cti_to_cnn: on(t.cti_to_cnn) * n * CtiBlock::param_count(d, &cfg.cti),
        quarter: on(cfg.quarter_level) * (d * d * 4 + d),
        head: 3 * Conv2d::param_count(d, cfg.num_classes, 1, 1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Toggles, Variant};

    #[test]
    fn ladder_is_increasing() {
        let mut cfg = CoMerConfig::toy();
        let mut last = 0;
        for (_, t) in Toggles::ladder() {
            cfg.toggles = t;
            let total = analytic(&cfg).total();
            assert!(total > last);
            last = total;
        }
    }

    #[test]
    fn all_off_is_vit_stem_head() {
        let mut cfg = CoMerConfig::variant(Variant::Tiny);
        cfg.toggles = Toggles::ALL_OFF;
        let b = analytic(&cfg);
        assert_eq!(b.total(), b.vit + b.stem + b.head);
    }
}
