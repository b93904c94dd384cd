use std::sync::Arc;

use tumorcal::baselines::{paint_pcp, pcp_log_posterior, PcpParams, PcpPrior};
use tumorcal::formats::{read_labels, read_scalar_field, write_labels, write_scalar_field};
use tumorcal::forward::solve_forward;
use tumorcal::inversion::{
    compute_map, exact_posterior_variance, laplace_posterior, misfit_cost_grad, predict, GhepConfig, MisfitContext,
    NewtonConfig,
};
use tumorcal::phantom::{draw_truth_fields, make_brain_phantom, synthesize_observations, Phantom, PhantomSpec};
use tumorcal::prior::{exact_marginal_variance, GaussianPrior, PriorPair, RegionHyper};
use tumorcal::{ParameterFields, SolverConfig};

fn small_spec() -> PhantomSpec {
    PhantomSpec { nx: 21, ny: 31, h: 0.5, tumor_center: [4.25, 6.25], ..PhantomSpec::default() }
}

struct Setup {
    phantom: Phantom,
    prior: Arc<PriorPair>,
    truth: ParameterFields,
    ctx: MisfitContext,
}

fn setup() -> Setup {
    let spec = small_spec();
    let phantom = make_brain_phantom(&spec).unwrap();
    let prior = Arc::new(PriorPair::assemble(&phantom.labels, &RegionHyper::default()).unwrap());
    let truth = draw_truth_fields(&prior, 11);
    let solver = SolverConfig::default();
    let obs = synthesize_observations(&phantom.grid, &truth, &phantom.u0, &spec.days, spec.noise_variance, spec.seed, true, &solver)
        .unwrap();
    let ctx = MisfitContext::new(&phantom.grid, phantom.u0.clone(), 0.0, obs.select(&[0, 1, 2, 3]), spec.noise_variance, solver)
        .unwrap();
    Setup { phantom, prior, truth, ctx }
}

#[test]
fn time_stepping_converges_at_first_order() {
    let s = setup();
    let grid = &s.phantom.grid;
    let at = |dt: f64| {
        let cfg = SolverConfig { dt, ..SolverConfig::default() };
        solve_forward(grid, &s.truth, &s.phantom.u0, &[0.0, 2.0], &cfg).unwrap().state_at_day(1).active()
    };
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let (u1, u2, u3) = (at(0.1), at(0.05), at(0.025));
    let ratio = dist(&u1, &u2) / dist(&u2, &u3);
    assert!((1.7..2.3).contains(&ratio), "successive-difference ratio {ratio}");
}

#[test]
fn map_lowers_the_cost_and_shrinks_variance() {
    let s = setup();
    let (map, report) = compute_map(&s.ctx, s.prior.as_ref(), &NewtonConfig::default(), None).unwrap();
    assert!(report.converged, "{}", report.reason);
    let cost = |theta: &[f64]| {
        let (m, _) = misfit_cost_grad(&s.ctx, &ParameterFields::from_vec(&s.phantom.grid, theta)).unwrap();
        m + s.prior.cost(theta)
    };
    assert!(cost(&map) < cost(s.prior.mean()));
    assert!(cost(&map) < cost(&s.truth.to_vec()));

    let lrp = laplace_posterior(&s.ctx, s.prior.clone(), map, &GhepConfig::default()).unwrap();
    assert!(lrp.orthonormality_residual() < 1e-8);
    let (pd, pg) = exact_posterior_variance(&lrp);
    let (qd, qg) = (exact_marginal_variance(&s.prior.log_d), exact_marginal_variance(&s.prior.log_g));
    for &c in s.phantom.grid.active_cells() {
        assert!(pd.get(c) <= qd.get(c) * (1.0 + 1e-12) && pg.get(c) <= qg.get(c) * (1.0 + 1e-12));
    }
}

#[test]
fn forecasts_are_reproducible_per_seed() {
    let s = setup();
    let (map, _) = compute_map(&s.ctx, s.prior.as_ref(), &NewtonConfig::default(), None).unwrap();
    let lrp = laplace_posterior(&s.ctx, s.prior.clone(), map, &GhepConfig::default()).unwrap();
    let a = predict(&lrp, &s.ctx, &[5.0], 4, 0.5, 100).unwrap();
    let b = predict(&lrp, &s.ctx, &[5.0], 2, 0.5, 102).unwrap();
    assert_eq!(a.seeds, vec![100, 101, 102, 103]);
    // sample i depends only on its own seed
    let bits = |f: &[tumorcal::ScalarField]| f.iter().flat_map(|x| x.values().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&a.samples[2]), bits(&b.samples[0]));
    assert_eq!(bits(&a.samples[3]), bits(&b.samples[1]));
    assert!(predict(&lrp, &s.ctx, &[4.0], 1, 0.5, 0).is_err(), "horizon inside the training window");
}

#[test]
fn region_painting_agrees_with_the_field_misfit() {
    let s = setup();
    let hyper = RegionHyper::default();
    let prior = PcpPrior::from_hyper(&hyper);
    let p = PcpParams { log_d_gm: -0.8, log_d_wm: -0.4, log_g_gm: -0.7, log_g_wm: -0.9 };
    let fields = paint_pcp(&s.phantom.labels, &p);
    let (misfit, _) = misfit_cost_grad(&s.ctx, &fields).unwrap();
    let lp = pcp_log_posterior(&s.ctx, &s.phantom.labels, &prior, &p).unwrap();
    assert_eq!(lp, -misfit + prior.log_density(&p));
}

#[test]
fn field_files_round_trip_bitwise() {
    let s = setup();
    let dir = std::env::temp_dir().join(format!("tumorcal-roundtrip-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let grid = &s.phantom.grid;
    write_scalar_field(&s.truth.log_d, dir.join("log_d.txt")).unwrap();
    write_labels(&s.phantom.labels, dir.join("labels.txt")).unwrap();
    let back = read_scalar_field(dir.join("log_d.txt"), grid).unwrap();
    assert!(back.values().iter().zip(s.truth.log_d.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(read_labels(dir.join("labels.txt"), grid).unwrap().labels(), s.phantom.labels.labels());
    std::fs::remove_dir_all(dir).unwrap();
}
