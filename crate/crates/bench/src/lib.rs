//! Shared fixtures for the benchmark harness.

use std::sync::Arc;

use tumorcal::inversion::MisfitContext;
use tumorcal::phantom::{draw_truth_fields, make_brain_phantom, synthesize_observations, Phantom, PhantomSpec};
use tumorcal::prior::{PriorPair, RegionHyper};
use tumorcal::{ParameterFields, SolverConfig};

/// The default phantom with its prior, a truth draw and a training context on days 1–4.
pub struct Fixture {
    pub phantom: Phantom,
    pub prior: Arc<PriorPair>,
    pub truth: ParameterFields,
    pub ctx: MisfitContext,
}

pub fn fixture() -> Fixture {
    let spec = PhantomSpec::default();
    let phantom = make_brain_phantom(&spec).expect("default phantom");
    let prior = Arc::new(PriorPair::assemble(&phantom.labels, &RegionHyper::default()).expect("prior"));
    let truth = draw_truth_fields(&prior, 11);
    let solver = SolverConfig::default();
    let obs = synthesize_observations(&phantom.grid, &truth, &phantom.u0, &spec.days, spec.noise_variance, spec.seed, true, &solver)
        .expect("observations");
    let ctx = MisfitContext::new(&phantom.grid, phantom.u0.clone(), spec.days[0], obs.select(&[0, 1, 2, 3]), spec.noise_variance, solver)
        .expect("context");
    Fixture { phantom, prior, truth, ctx }
}
