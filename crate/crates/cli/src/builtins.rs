//! Named scenarios shipped with the binary.

use crate::config::{
    CfsStage, Expectation, ExpansionStage, FragmentationStage, GridSpec, JetSpec, LagrangianSpec, MeasureSpec, MixingStage,
    NuSpec, ProfileSpec, ScenarioConfig, Stage,
};

pub struct Builtin {
    pub name: &'static str,
    pub description: &'static str,
    build: fn() -> ScenarioConfig,
}

impl Builtin {
    pub fn config(&self) -> ScenarioConfig {
        (self.build)()
    }
}

/// Sorted by name.
pub const BUILTINS: &[Builtin] = &[
    Builtin {
        name: "cfs-two-point",
        description: "Two unitarily equivalent points of a causal fermion system (f = 2, n = 1): ν, weak EL residual for \
                      scalar tests, causal action and its unitary invariance",
        build: cfs_two_point,
    },
    Builtin {
        name: "example52-fragmentation",
        description: "Plane example fragmented into two subsystems at λ = 0.1 (f = 1, w = 1/√2): ℓ̃ profile CSV, \
                      perturbed Laplacian on the lin-F sector against diag(2λ⁴, 24λ²), well-posedness fit",
        build: example52_fragmentation,
    },
    Builtin {
        name: "expansion-quartic-1d",
        description: "Order-2 expansion in a confined 1-D quartic model started from a shifted Dirac measure; \
                      weak EL residual slope",
        build: expansion_quartic_1d,
    },
    Builtin {
        name: "mixing-L2",
        description: "Minimum of the mixing functional over U(2), 50 restarts",
        build: mixing_l2,
    },
];

pub fn find(name: &str) -> Option<&'static Builtin> {
    BUILTINS.iter().find(|b| b.name == name)
}

fn with(stages: Vec<Stage>, expectations: Vec<Expectation>) -> ScenarioConfig {
    ScenarioConfig { stages, expectations, ..ScenarioConfig::empty() }
}

fn cfs_two_point() -> ScenarioConfig {
    with(
        vec![Stage::Cfs(CfsStage {
            name: None,
            hilbert_dim: 2,
            spin_dim: 1,
            trace: 1.0,
            kappa: 0.0,
            generator_scale: 0.1,
        })],
        vec![Expectation::at_most("cfs.weak_el_residual", 1e-6), Expectation::at_most("cfs.invariance_defect", 1e-9)],
    )
}

const PROFILE_LAMBDA: f64 = 0.1;

fn example52_fragmentation() -> ScenarioConfig {
    let lambda = PROFILE_LAMBDA;
    with(
        vec![Stage::Fragmentation(FragmentationStage {
            name: None,
            first_weight: 1.0,
            spread: std::f64::consts::FRAC_1_SQRT_2,
            regularized: false,
            lambda,
            profile: Some(ProfileSpec { anchor: None, axis: 0, lo: -2.0 * lambda, hi: 2.0 * lambda, samples: 401 }),
            lambda_grid: Some(GridSpec { hi: 1e-1, lo: 1e-3, count: 9 }),
        })],
        vec![
            Expectation::equals_rel("fragmentation.laplacian_00", 2.0 * lambda.powi(4), 1e-8),
            Expectation::equals("fragmentation.laplacian_01", 0.0, 1e-14),
            Expectation::equals("fragmentation.laplacian_10", 0.0, 1e-14),
            Expectation::equals_rel("fragmentation.laplacian_11", 24.0 * lambda * lambda, 1e-8),
            Expectation::at_most("fragmentation.profile_min_offset", 1e-3),
            Expectation::equals("fragmentation.definiteness_order", 4.0, 0.2),
            Expectation::equals("fragmentation.well_posed", 1.0, 0.0),
        ],
    )
}

fn expansion_quartic_1d() -> ScenarioConfig {
    let order = 2;
    with(
        vec![Stage::Expansion(ExpansionStage {
            name: None,
            measure: MeasureSpec { points: vec![vec![0.0]], weights: vec![1.0] },
            lagrangian: LagrangianSpec {
                name: "quartic_pair".into(),
                params: [("quadratic".to_string(), 1.0), ("offset".to_string(), 1.0)].into(),
            },
            nu: NuSpec::default(),
            test_space: Default::default(),
            convention: Default::default(),
            order,
            gauge_seeds: Vec::new(),
            shift: Some(JetSpec { scalars: vec![0.5], vectors: vec![vec![0.7]] }),
            lambda_grid: GridSpec::default(),
        })],
        vec![
            Expectation::at_most("expansion.base_residual", 1e-12),
            Expectation::at_least("expansion.slope", order as f64 + 0.8),
        ],
    )
}

fn mixing_l2() -> ScenarioConfig {
    with(
        vec![Stage::Mixing(MixingStage { name: None, subsystems: 2, restarts: 50 })],
        vec![Expectation::equals("mixing.min_value", 2.0, 1e-6)],
    )
}
