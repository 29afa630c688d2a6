//! Shared setup for the criterion benches.

use faultclip_core::dataset::make_synthetic_set;
use faultclip_core::{load_model, LabeledSample, Model};

pub const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/lenet-fixture.ftc");

/// The fixture model and `n` synthetic samples drawn for it.
pub fn fixture(n: usize) -> (Model, Vec<LabeledSample>) {
    let model = load_model(FIXTURE).expect("fixture model");
    let shape = [model.input_shape[0], model.input_shape[1], model.input_shape[2]];
    let samples = make_synthetic_set(7, n, shape, model.num_classes).expect("synthetic set");
    (model, samples)
}
