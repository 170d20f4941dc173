//! Fixtures shared by the benchmarks: a default-friction collocation batch
//! and freshly initialized networks over the default training box.

use liqhjb::collocation::sample_uniform;
use liqhjb::hjb::PreparedBatch;
use liqhjb::{Head, IterationConfig, ModelParams, TrainingBox, TwoLayerNet, Utility};

pub fn batch(n_interior: usize, n_terminal: usize) -> PreparedBatch {
    let raw = sample_uniform(&TrainingBox::default(), n_interior, n_terminal, 7).expect("default box is valid");
    PreparedBatch::from_batch(&ModelParams::default(), &Utility::default(), &raw).expect("default parameters are valid")
}

pub fn net(head: Head, seed: u64) -> TwoLayerNet {
    let hidden = IterationConfig::default().hidden;
    TwoLayerNet::init(hidden, head, TrainingBox::default().input_scaling(), seed).expect("default width is valid")
}
