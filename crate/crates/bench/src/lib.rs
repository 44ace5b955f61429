//! Fixtures shared by the benchmarks.

use ccl_core::ccl::{summarize, CrossFeatureSummary};
use ccl_core::partition::make_blobs;
use ccl_core::{
    Activation, Dataset, ExperimentConfig, FeatureBatch, Method, Mlp, ModelSpec, ParamVector,
};

/// 16 inputs, hidden [64, 32], 10 classes.
pub fn desk_model() -> Mlp {
    Mlp::new(ModelSpec::new(16, vec![64, 32], 10, Activation::Tanh).unwrap()).unwrap()
}

pub fn batch(size: usize) -> Dataset {
    let d = make_blobs(10, size.div_ceil(10), 16, 0.25, 1);
    d.subset(&(0..size).collect::<Vec<_>>())
}

/// Local parameters, two neighbors' parameters and the summaries they sent.
pub fn agent_inputs(
    model: &Mlp,
    b: &Dataset,
) -> (ParamVector, Vec<ParamVector>, Vec<CrossFeatureSummary>) {
    let x = model.init_params(0);
    let peers: Vec<ParamVector> = (1..3).map(|s| model.init_params(s)).collect();
    let received = peers
        .iter()
        .map(|_| {
            let z = model.features(&x, b.features()).unwrap();
            summarize(
                &FeatureBatch {
                    z,
                    labels: b.labels().to_vec(),
                },
                model.num_classes(),
            )
            .unwrap()
        })
        .collect();
    (x, peers, received)
}

pub fn one_epoch(method: Method) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.method = method;
    c.epochs = 1;
    c.alpha = 0.1;
    c
}
