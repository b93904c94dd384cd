use std::path::{Path, PathBuf};
use std::sync::Arc;

use tumorcal::baselines::{calibrate_pcp, paint_pcp, shp_hyper, Chain, PcpParams};
use tumorcal::formats::{
    read_grid, read_labels, read_raw_field, read_raw_labels, read_scalar_field, write_int_labels, write_labels, write_mask,
    write_raw_field, write_scalar_field, RawArray,
};
use tumorcal::forward::solve_forward;
use tumorcal::hypersearch::{evaluate_subject, grid_search, CalibrationSettings, SearchSpace, Subject};
use tumorcal::inversion::{
    compute_map, exact_posterior_variance, laplace_posterior, pointwise_posterior_variance, predict, Eigenpairs,
    LowRankPosterior, MisfitContext,
};
use tumorcal::metrics::{boundary_margin, compare, ensemble_stats, extract_boundary, kde, KdeCurve, MetricsReport};
use tumorcal::phantom::{draw_truth_fields, make_brain_phantom, noiseless_observations, synthesize_observations};
use tumorcal::prior::{exact_marginal_variance, PriorPair};
use tumorcal::registration::{segment_brain, Image, LabelImage};
use tumorcal::{Grid, Method, ParameterFields, PipelineConfig, ScalarField};

use crate::bundle::{day_tag, eigenvector_files, DataBundle, ObservationIndex, PosteriorInfo, LABELS, MASK, OBSERVATIONS, POSTERIOR, U0};
use crate::config::{load, read_json};
use crate::failure::{CliResult, Failure};
use crate::output::Staging;
use crate::{Cli, Command, MethodArg};

pub fn run(cli: &Cli) -> CliResult<()> {
    let config_path = cli.config.as_ref().map(|p| cli.run_dir.join(p));
    let mut cfg = load(config_path.as_deref())?;
    if let Command::Calibrate { method: Some(m), .. } = &cli.command {
        cfg.method = match m {
            MethodArg::Bayes => Method::Bayes,
            MethodArg::Shp => Method::Shp,
            MethodArg::Pcp => Method::Pcp,
        };
    }
    let name = cli.command.name();
    let out = match &cli.command {
        Command::Phantom { out }
        | Command::Segment { out, .. }
        | Command::SamplePrior { out, .. }
        | Command::Forward { out, .. }
        | Command::Calibrate { out, .. }
        | Command::Predict { out, .. }
        | Command::Metrics { out, .. }
        | Command::Gridsearch { out, .. } => out.out.clone().unwrap_or_else(|| PathBuf::from(name)),
    };
    let threads = rayon::current_num_threads();
    let mut st = Staging::new(&cli.run_dir, &out, name, threads, serde_json::to_value(&cfg)?)?;
    if let Some(p) = &cli.config {
        st.input(p)?;
    }
    match &cli.command {
        Command::Phantom { .. } => phantom(&mut st, &cfg)?,
        Command::Segment { subject, atlas, atlas_labels, mask, .. } => segment(&mut st, &cfg, subject, atlas, atlas_labels, mask)?,
        Command::SamplePrior { mask, labels, .. } => sample_prior(&mut st, &cfg, mask, labels)?,
        Command::Forward { mask, log_d, log_g, u0, days, .. } => forward(&mut st, &cfg, mask, log_d, log_g, u0, days)?,
        Command::Calibrate { data, labels, .. } => calibrate(&mut st, &cfg, data, labels.as_deref())?,
        Command::Predict { posterior, horizon, samples, .. } => {
            predict_cmd(&mut st, &cfg, posterior, horizon.as_deref(), *samples)?
        }
        Command::Metrics { mask, model, data, ensemble, day, .. } => {
            metrics_cmd(&mut st, &cfg, mask, model, data, ensemble.as_deref(), *day)?
        }
        Command::Gridsearch { subjects, space, .. } => gridsearch(&mut st, &cfg, subjects, space.as_deref())?,
    }
    st.commit()?;
    Ok(())
}

fn write_fields(st: &Staging, prefix: &str, theta: &ParameterFields) -> CliResult<()> {
    write_scalar_field(&theta.log_d, st.path(&format!("{prefix}_log_d.txt"))?)?;
    write_scalar_field(&theta.log_g, st.path(&format!("{prefix}_log_g.txt"))?)?;
    Ok(())
}

fn image_raw(img: &Image, h: f64) -> RawArray<f64> {
    RawArray { nx: img.width(), ny: img.height(), hx: h, hy: h, values: img.values().to_vec() }
}

fn phantom(st: &mut Staging, cfg: &PipelineConfig) -> CliResult<()> {
    let spec = &cfg.phantom;
    let p = make_brain_phantom(spec)?;
    let prior = PriorPair::assemble(&p.labels, &cfg.hyper)?;
    let truth = draw_truth_fields(&prior, cfg.truth_seed);
    let obs = synthesize_observations(&p.grid, &truth, &p.u0, &spec.days, spec.noise_variance, spec.seed, spec.clamp, &cfg.solver)?;
    let clean = noiseless_observations(&p.grid, &truth, &p.u0, &spec.days, &cfg.solver)?;

    write_mask(&p.grid, p.grid.mask(), st.path(MASK)?)?;
    write_labels(&p.labels, st.path(LABELS)?)?;
    write_scalar_field(&p.u0, st.path(U0)?)?;
    write_fields(st, "truth", &truth)?;
    let mut files = Vec::new();
    let mut clean_files = Vec::new();
    for (i, &d) in obs.days.iter().enumerate() {
        let f = format!("obs_day_{}.txt", day_tag(d));
        let c = format!("clean_day_{}.txt", day_tag(d));
        write_scalar_field(&obs.fields[i], st.path(&f)?)?;
        write_scalar_field(&clean.fields[i], st.path(&c)?)?;
        files.push(f);
        clean_files.push(c);
    }
    st.write_json(
        OBSERVATIONS,
        &ObservationIndex {
            start_day: spec.days[0],
            days: obs.days.clone(),
            files,
            noise_variance: spec.noise_variance,
            clean_files,
        },
    )?;

    let fine_h = spec.h / spec.atlas_upsample as f64;
    write_raw_field(&image_raw(&p.subject_image, spec.h), st.path("subject_image.txt")?)?;
    write_raw_field(&image_raw(&p.atlas_image, fine_h), st.path("atlas_image.txt")?)?;
    let al = &p.atlas_labels;
    write_int_labels(al.width, al.height, fine_h, fine_h, &al.labels, st.path("atlas_labels.txt")?)?;
    let td = &p.true_displacement;
    for (name, v) in [("true_disp_x.txt", &td.dx), ("true_disp_y.txt", &td.dy)] {
        let raw = RawArray { nx: td.width, ny: td.height, hx: spec.h, hy: spec.h, values: v.clone() };
        write_raw_field(&raw, st.path(name)?)?;
    }
    st.seed("truth", cfg.truth_seed);
    st.seed("noise", spec.seed);
    Ok(())
}

fn read_image(path: &Path) -> CliResult<(Image, f64)> {
    let raw = read_raw_field(path)?;
    Ok((Image::new(raw.nx, raw.ny, raw.values)?, raw.hx))
}

fn segment(
    st: &mut Staging,
    cfg: &PipelineConfig,
    subject: &Path,
    atlas: &Path,
    atlas_labels: &Path,
    mask: &Path,
) -> CliResult<()> {
    let grid = Arc::new(read_grid(st.input(mask)?)?);
    let (subject, _) = read_image(&st.input(subject)?)?;
    let (atlas, _) = read_image(&st.input(atlas)?)?;
    let raw = read_raw_labels(st.input(atlas_labels)?)?;
    let atlas_labels = LabelImage::new(raw.nx, raw.ny, raw.values)?;
    let (labels, disp) = segment_brain(&subject, &atlas, &atlas_labels, &grid, &cfg.demons, cfg.phantom.band_halfwidth)?;
    write_labels(&labels, st.path(LABELS)?)?;
    for (name, v) in [("disp_x.txt", &disp.dx), ("disp_y.txt", &disp.dy)] {
        let raw = RawArray { nx: disp.width, ny: disp.height, hx: grid.hx(), hy: grid.hy(), values: v.clone() };
        write_raw_field(&raw, st.path(name)?)?;
    }
    use tumorcal::Region;
    st.write_json(
        "report.json",
        &serde_json::json!({
            "gm_cells": labels.count(Region::Gm),
            "wm_cells": labels.count(Region::Wm),
            "interface_cells": labels.count(Region::Interface),
            "max_displacement_px": disp.sup_norm(),
        }),
    )?;
    Ok(())
}

fn sample_prior(st: &mut Staging, cfg: &PipelineConfig, mask: &Path, labels: &Path) -> CliResult<()> {
    let grid = Arc::new(read_grid(st.input(mask)?)?);
    let labels = read_labels(st.input(labels)?, &grid)?;
    let prior = PriorPair::assemble(&labels, &cfg.hyper)?;
    let sc = &cfg.prior_sampling;
    for i in 0..sc.samples {
        let s = prior.sample(sc.seed.wrapping_add(i as u64));
        write_fields(st, &format!("samples/sample_{i:03}"), &s)?;
    }
    write_fields(st, "mean", &prior.mean_fields())?;
    write_scalar_field(&exact_marginal_variance(&prior.log_d), st.path("variance_log_d.txt")?)?;
    write_scalar_field(&exact_marginal_variance(&prior.log_g), st.path("variance_log_g.txt")?)?;
    st.seed("prior_samples", sc.seed);
    Ok(())
}

fn forward(
    st: &mut Staging,
    cfg: &PipelineConfig,
    mask: &Path,
    log_d: &Path,
    log_g: &Path,
    u0: &Path,
    days: &[f64],
) -> CliResult<()> {
    let grid = Arc::new(read_grid(st.input(mask)?)?);
    let theta = ParameterFields::new(read_scalar_field(st.input(log_d)?, &grid)?, read_scalar_field(st.input(log_g)?, &grid)?)?;
    let u0 = read_scalar_field(st.input(u0)?, &grid)?;
    let traj = solve_forward(&grid, &theta, &u0, days, &cfg.solver)?;
    let mut files = Vec::new();
    for (i, s) in traj.states_at_days().iter().enumerate() {
        let f = format!("state_day_{}.txt", day_tag(days[i]));
        write_scalar_field(s, st.path(&f)?)?;
        files.push(f);
    }
    st.write_json("trajectory.json", &serde_json::json!({ "days": days, "files": files, "steps": traj.n_steps() }))?;
    Ok(())
}

fn rel_labels(data: &Path, labels: Option<&Path>) -> PathBuf {
    labels.map(Path::to_path_buf).unwrap_or_else(|| data.join(LABELS))
}

fn calibrate(st: &mut Staging, cfg: &PipelineConfig, data: &Path, labels: Option<&Path>) -> CliResult<()> {
    let bundle = DataBundle::load(st, data, labels)?;
    let train = bundle.training_indices(cfg.training_days.as_deref())?;
    let training = bundle.observations.select(&train);
    let ctx = MisfitContext::new(&bundle.grid, bundle.u0.clone(), bundle.start_day, training.clone(), cfg.noise_variance, cfg.solver)?;
    let mut info = PosteriorInfo {
        method: cfg.method,
        data: data.to_path_buf(),
        labels: rel_labels(data, labels),
        hyper: cfg.hyper,
        noise_variance: cfg.noise_variance,
        training_days: training.days.clone(),
        rank: 0,
        burn_in: None,
    };
    match cfg.method {
        Method::Bayes | Method::Shp => {
            if cfg.method == Method::Shp {
                info.hyper = shp_hyper(&cfg.hyper);
            }
            // both methods share this path; only the prior hyperparameters differ
            st.note("code_path", "compute_map -> laplace_posterior");
            let prior = Arc::new(PriorPair::assemble(&bundle.labels, &info.hyper)?);
            let (map, report) = compute_map(&ctx, prior.as_ref(), &cfg.newton, None)?;
            st.write_json("convergence.json", &report)?;
            let lrp = laplace_posterior(&ctx, prior.clone(), map, &cfg.ghep)?;
            info.rank = lrp.rank();
            write_fields(st, "map", &lrp.map_fields())?;
            write_fields(st, "prior_mean", &prior.mean_fields())?;
            st.write_json("eigenvalues.json", &lrp.eigenvalues())?;
            for (i, v) in lrp.eigenvectors().iter().enumerate() {
                let f = ParameterFields::from_vec(&bundle.grid, v);
                let (fd, fg) = eigenvector_files(i);
                write_scalar_field(&f.log_d, st.path(&fd)?)?;
                write_scalar_field(&f.log_g, st.path(&fg)?)?;
            }
            let (vd, vg) = if cfg.variance_samples == 0 {
                exact_posterior_variance(&lrp)
            } else {
                st.seed("variance", cfg.prediction.seed);
                pointwise_posterior_variance(&lrp, cfg.variance_samples, cfg.prediction.seed)
            };
            write_scalar_field(&vd, st.path("variance_log_d.txt")?)?;
            write_scalar_field(&vg, st.path("variance_log_g.txt")?)?;
            write_scalar_field(&exact_marginal_variance(&prior.log_d), st.path("prior_variance_log_d.txt")?)?;
            write_scalar_field(&exact_marginal_variance(&prior.log_g), st.path("prior_variance_log_g.txt")?)?;
            st.seed("ghep", cfg.ghep.seed);
        }
        Method::Pcp => {
            st.note("code_path", "calibrate_pcp");
            let chain = calibrate_pcp(&ctx, &bundle.labels, &cfg.hyper, &cfg.pcp)?;
            info.burn_in = Some(cfg.pcp.burn_in);
            write_chain(st, &chain)?;
            let (mean, var) = chain.moments(cfg.pcp.burn_in);
            let pm = PcpParams::from_slice(&mean)?;
            write_fields(st, "mean", &paint_pcp(&bundle.labels, &pm))?;
            st.write_json(
                "summary.json",
                &serde_json::json!({
                    "names": PcpParams::NAMES,
                    "mean": mean,
                    "variance": var,
                    "samples": chain.len(),
                    "burn_in": cfg.pcp.burn_in,
                    "acceptance": chain.stats,
                    "adapted_first_stage_rate": chain.stats.adapted_rate(),
                    "overall_rate": chain.stats.overall_rate(),
                    "adaptation": chain.adaptation,
                }),
            )?;
            st.seed("pcp", cfg.pcp.seed);
        }
    }
    st.write_json(POSTERIOR, &info)?;
    Ok(())
}

fn write_chain(st: &Staging, chain: &Chain) -> CliResult<()> {
    let mut w = csv::Writer::from_path(st.path("chain.csv")?)?;
    let mut header = vec!["iteration"];
    header.extend(PcpParams::NAMES);
    header.push("log_posterior");
    w.write_record(&header)?;
    for (i, (s, lp)) in chain.samples.iter().zip(&chain.log_posterior).enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(s.iter().map(|v| format!("{v:.17e}")));
        row.push(format!("{lp:.17e}"));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn read_chain(path: &Path) -> CliResult<Vec<PcpParams>> {
    let mut r = csv::Reader::from_path(path)?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            let v: Vec<f64> = (1..5)
                .map(|k| rec.get(k).and_then(|s| s.parse().ok()).ok_or_else(|| Failure::validation("InvalidChain", "malformed chain row")))
                .collect::<CliResult<_>>()?;
            Ok(PcpParams::from_slice(&v)?)
        })
        .collect()
}

struct Forecast {
    days: Vec<f64>,
    map: Vec<ScalarField>,
    samples: Vec<Vec<ScalarField>>,
    seeds: Vec<u64>,
}

fn predict_cmd(
    st: &mut Staging,
    cfg: &PipelineConfig,
    posterior: &Path,
    horizon: Option<&[f64]>,
    samples: Option<usize>,
) -> CliResult<()> {
    let info: PosteriorInfo = read_json(&st.input(&posterior.join(POSTERIOR))?)?;
    let bundle = DataBundle::load(st, &info.data, Some(&info.labels))?;
    let grid = bundle.grid.clone();
    let train = bundle.training_indices(Some(&info.training_days))?;
    let ctx = MisfitContext::new(
        &grid,
        bundle.u0.clone(),
        bundle.start_day,
        bundle.observations.select(&train),
        info.noise_variance,
        cfg.solver,
    )?;
    let last = info.training_days.last().copied().unwrap_or(bundle.start_day);
    let days: Vec<f64> = match horizon {
        Some(h) => h.to_vec(),
        None => bundle.observations.days.iter().copied().filter(|&d| d > last).collect(),
    };
    if days.is_empty() {
        return Err(Failure::validation("EmptyHorizon", "no forecast days: pass --horizon or hold out an observation day"));
    }
    let n = samples.unwrap_or(cfg.prediction.samples);
    let seed = cfg.prediction.seed;
    st.seed("prediction", seed);
    let fc = match info.method {
        Method::Bayes | Method::Shp => {
            let prior = Arc::new(PriorPair::assemble(&bundle.labels, &info.hyper)?);
            let read = |st: &mut Staging, d: &str, g: &str| -> CliResult<Vec<f64>> {
                Ok(ParameterFields::new(
                    read_scalar_field(st.input(&posterior.join(d))?, &grid)?,
                    read_scalar_field(st.input(&posterior.join(g))?, &grid)?,
                )?
                .to_vec())
            };
            let map = read(st, "map_log_d.txt", "map_log_g.txt")?;
            let values: Vec<f64> = read_json(&st.input(&posterior.join("eigenvalues.json"))?)?;
            let vectors = (0..values.len())
                .map(|i| {
                    let (fd, fg) = eigenvector_files(i);
                    read(st, &fd, &fg)
                })
                .collect::<CliResult<Vec<_>>>()?;
            let lrp = LowRankPosterior::new(prior, map, Eigenpairs { values, vectors })?;
            let e = predict(&lrp, &ctx, &days, n, cfg.metrics.cutoff, seed)?;
            Forecast { days: e.days, map: e.map, samples: e.samples, seeds: e.seeds }
        }
        Method::Pcp => {
            let chain = read_chain(&st.input(&posterior.join("chain.csv"))?)?;
            pcp_forecast(&ctx, &bundle, &chain, info.burn_in.unwrap_or(0.0), &days, n)?
        }
    };
    for (k, &d) in fc.days.iter().enumerate() {
        write_scalar_field(&fc.map[k], st.path(&format!("map_day_{}.txt", day_tag(d)))?)?;
        for (s, traj) in fc.samples.iter().enumerate() {
            write_scalar_field(&traj[k], st.path(&format!("samples/sample_{s:03}_day_{}.txt", day_tag(d)))?)?;
        }
    }
    st.write_json(
        "ensemble.json",
        &serde_json::json!({ "method": info.method, "days": fc.days, "seeds": fc.seeds, "samples": fc.samples.len(), "cutoff": cfg.metrics.cutoff }),
    )?;

    // score every forecast day that has an observation
    let mut reports = serde_json::Map::new();
    for (k, &d) in fc.days.iter().enumerate() {
        let Some(data) = bundle.observations.field_at(d) else { continue };
        let day_samples: Vec<ScalarField> = fc.samples.iter().map(|t| t[k].clone()).collect();
        let mut entry = serde_json::Map::new();
        entry.insert("data".into(), serde_json::to_value(score(cfg, &fc.map[k], data, &day_samples)?)?);
        if let Some(truth) = bundle.clean.as_ref().and_then(|c| c.field_at(d)) {
            entry.insert("truth".into(), serde_json::to_value(score(cfg, &fc.map[k], truth, &day_samples)?)?);
        }
        reports.insert(day_tag(d), entry.into());
    }
    st.write_json("metrics.json", &reports)?;
    Ok(())
}

/// Forecast from evenly spaced post-burn-in chain states; the MAP slot holds the chain mean.
fn pcp_forecast(
    ctx: &MisfitContext,
    bundle: &DataBundle,
    chain: &[PcpParams],
    burn_in: f64,
    days: &[f64],
    n: usize,
) -> CliResult<Forecast> {
    let skip = (burn_in * chain.len() as f64).floor() as usize;
    let kept = &chain[skip.min(chain.len())..];
    if kept.is_empty() {
        return Err(Failure::validation("EmptyChain", "no chain states after burn-in"));
    }
    let mut full = vec![ctx.start_day()];
    full.extend(days);
    let run = |p: &PcpParams| -> CliResult<Vec<ScalarField>> {
        let traj = solve_forward(ctx.grid(), &paint_pcp(&bundle.labels, p), ctx.u0(), &full, ctx.solver())?;
        Ok(traj.states_at_days()[1..].to_vec())
    };
    let mut mean = [0.0; 4];
    for p in kept {
        for (m, v) in mean.iter_mut().zip(p.to_array()) {
            *m += v / kept.len() as f64;
        }
    }
    let map = run(&PcpParams::from_slice(&mean)?)?;
    let idx: Vec<u64> = (0..n).map(|i| (i * kept.len() / n.max(1)) as u64).collect();
    use rayon::prelude::*;
    let samples = idx.par_iter().map(|&i| run(&kept[i as usize])).collect::<CliResult<Vec<_>>>()?;
    Ok(Forecast { days: days.to_vec(), map, samples, seeds: idx.iter().map(|i| i + skip as u64).collect() })
}

fn score(cfg: &PipelineConfig, model: &ScalarField, data: &ScalarField, samples: &[ScalarField]) -> CliResult<MetricsReport> {
    let mut report = compare(model, data, &cfg.metrics)?;
    if !samples.is_empty() {
        report.ensemble = Some(ensemble_stats(samples, data, &cfg.metrics)?);
        let reference = extract_boundary(data, cfg.metrics.data_dice_cutoff);
        if !reference.is_empty() {
            let bounds: Vec<_> = samples.iter().map(|s| extract_boundary(s, cfg.metrics.cutoff)).collect();
            report.boundary_margin_mm = Some(boundary_margin(&bounds, &reference)?);
        }
    }
    Ok(report)
}

fn write_kde(st: &Staging, name: &str, curve: &KdeCurve) -> CliResult<()> {
    let mut w = csv::Writer::from_path(st.path(name)?)?;
    w.write_record(["x", "density"])?;
    for (x, d) in curve.x.iter().zip(&curve.density) {
        w.write_record([format!("{x:.17e}"), format!("{d:.17e}")])?;
    }
    w.flush()?;
    Ok(())
}

fn metrics_cmd(
    st: &mut Staging,
    cfg: &PipelineConfig,
    mask: &Path,
    model: &Path,
    data: &Path,
    ensemble: Option<&Path>,
    day: Option<f64>,
) -> CliResult<()> {
    let grid: Arc<Grid> = Arc::new(read_grid(st.input(mask)?)?);
    let model = read_scalar_field(st.input(model)?, &grid)?;
    let data = read_scalar_field(st.input(data)?, &grid)?;
    let mut samples = Vec::new();
    if let Some(dir) = ensemble {
        let meta: serde_json::Value = read_json(&st.input(&dir.join("ensemble.json"))?)?;
        let day = match day.or_else(|| meta["days"].get(0).and_then(|v| v.as_f64())) {
            Some(d) => d,
            None => return Err(Failure::validation("MissingDay", "ensemble has no forecast days")),
        };
        let n = meta["samples"].as_u64().unwrap_or(0) as usize;
        for s in 0..n {
            let rel = dir.join(format!("samples/sample_{s:03}_day_{}.txt", day_tag(day)));
            samples.push(read_scalar_field(st.input(&rel)?, &grid)?);
        }
    }
    let report = score(cfg, &model, &data, &samples)?;
    st.write_json("report.json", &report)?;
    if samples.len() >= 2 {
        let per: Vec<MetricsReport> = samples.iter().map(|s| compare(s, &data, &cfg.metrics)).collect::<Result<_, _>>()?;
        for (name, values) in [
            ("kde_dice.csv", per.iter().map(|r| r.dice).collect::<Vec<_>>()),
            ("kde_nta.csv", per.iter().map(|r| r.nta_model).collect::<Vec<_>>()),
        ] {
            match kde(&values, None) {
                Ok(curve) => write_kde(st, name, &curve)?,
                Err(tumorcal::Error::DegenerateData(msg)) => st.note(&format!("{name} skipped"), msg),
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(())
}

fn gridsearch(st: &mut Staging, cfg: &PipelineConfig, subjects: &[PathBuf], space: Option<&Path>) -> CliResult<()> {
    let space: SearchSpace = match space {
        Some(p) => read_json(&st.input(p)?)?,
        None => cfg.search.clone(),
    };
    space.validate()?;
    let mut bundles = Vec::new();
    for dir in subjects {
        let b = DataBundle::load(st, dir, None)?;
        let train = b.training_indices(cfg.training_days.as_deref())?;
        let last = *b.observations.days.last().expect("bundle has observation days");
        if train.contains(&(b.observations.len() - 1)) {
            return Err(Failure::validation("NoHeldOutDay", &format!("{}: the last observation day must be held out", dir.display())));
        }
        bundles.push(Subject {
            labels: b.labels.clone(),
            u0: b.u0.clone(),
            start_day: b.start_day,
            training: b.observations.select(&train),
            test_day: last,
            test: b.observations.fields.last().expect("bundle has observation fields").clone(),
        });
    }
    let settings = CalibrationSettings { solver: cfg.solver, newton: cfg.newton, metrics: cfg.metrics };
    let result = grid_search(&space, bundles.len(), |pt, s| evaluate_subject(&bundles[s], &cfg.hyper, pt, &settings))?;
    st.write_json("result.json", &result)?;
    let mut w = csv::Writer::from_path(st.path("table.csv")?)?;
    w.write_record(["rho_gm", "k", "sigma_noise", "dice", "nta_error", "valid", "on_front", "chosen"])?;
    for (i, c) in result.cells.iter().enumerate() {
        let (d, e) = c.score.map(|s| (s.dice.to_string(), s.nta_error.to_string())).unwrap_or_default();
        w.write_record([
            c.point.rho_gm.to_string(),
            c.point.k.to_string(),
            c.point.sigma_noise.to_string(),
            d,
            e,
            c.is_valid().to_string(),
            c.on_front.to_string(),
            (i == result.chosen_index).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
