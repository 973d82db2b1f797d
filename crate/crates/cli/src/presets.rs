//! Built-in experiment specs.

use std::path::Path;

use crate::spec::{parse_spec_str, ExperimentSpec, SpecError};

pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    pub source: &'static str,
}

pub const PRESETS: &[Preset] = &[
    Preset {
        name: "conjugate-d2-ng",
        description: "2-d conjugate regression, Cholesky natural gradient, constant 0.05",
        source: include_str!("../presets/conjugate-d2-ng.toml"),
    },
    Preset {
        name: "conjugate-d2-natural",
        description: "2-d conjugate regression, natural-parameter update, constant 0.05",
        source: include_str!("../presets/conjugate-d2-natural.toml"),
    },
    Preset {
        name: "conjugate-d2-adam",
        description: "2-d conjugate regression, reparameterized Euclidean gradient with Adam 0.01",
        source: include_str!("../presets/conjugate-d2-adam.toml"),
    },
    Preset {
        name: "bimodal-k2",
        description: "1-d bimodal target fitted with a 2-component mixture",
        source: include_str!("../presets/bimodal-k2.toml"),
    },
    Preset {
        name: "logistic-ng",
        description: "3-d Bayesian logistic regression on 200 simulated points",
        source: include_str!("../presets/logistic-ng.toml"),
    },
];

pub fn find(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}

impl Preset {
    pub fn spec(&self) -> Result<ExperimentSpec, SpecError> {
        parse_spec_str(self.source, Path::new("."))
    }
}
