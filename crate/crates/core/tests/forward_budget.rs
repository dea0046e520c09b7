//! Single-sample inference time on the 64×64 / 90-view desk geometry.

use std::time::{Duration, Instant};

use marnet_core::geometry::FanBeamGeometry;
use marnet_core::nn::{ParamStore, Pipeline, PipelineConfig, SinogramMode};
use marnet_core::physics::{make_dataset, metal_library, SimulationConfig};

const BUDGET: Duration = Duration::from_millis(200);

#[test]
fn forward_pass_fits_the_budget_and_is_deterministic() {
    let geom = FanBeamGeometry::desk().with_views(90);
    let data = make_dataset::<f32>(1, &geom, &SimulationConfig::default(), &metal_library(), 3).unwrap();
    let mut store = ParamStore::new();
    let p = Pipeline::new(PipelineConfig::new(16, SinogramMode::Completion), &geom, &mut store).unwrap();
    let input = p.prepare(&[&data[0]]).unwrap();
    let first = p.infer(&store, &input).unwrap();
    let mut best = Duration::MAX;
    for _ in 0..3 {
        let t = Instant::now();
        let out = p.infer(&store, &input).unwrap();
        best = best.min(t.elapsed());
        assert_eq!(out, first);
    }
    assert!(best < BUDGET, "forward pass took {best:?}");
}
