//! Subcommand pipelines. Each one resolves all of its inputs before creating
//! the output directory, so a rejected config leaves nothing behind.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use vesde::error_analysis::{
    compute_e_disc, compute_e_init, full_error_report, iteration_complexity, optimal_rho, table2_quantities,
    ReportRequest, ScheduleFamily,
};
use vesde::gaussian_oracle::{iterate_law, kl_breakdown, GaussianData};
use vesde::numeric::logspace;
use vesde::sampler::{sample, AnalyticScore, Moments, NetScore, SamplerConfig, ScoreFn};
use vesde::schedules::{GridKind, TimeGrid, VarianceSchedule};
use vesde::score_net::ScoreNet;
use vesde::training::{
    bell_shape_probe, decay_ratio_trace, default_lr, make_batch, train_with_halving, StopReason,
};

use crate::config::{LoadedConfig, SampleFormat, ScoreSource};
use crate::output::{num, CsvOut};
use crate::CliError;

/// Seed offset separating the network initialization from the data batch.
const NET_SEED_OFFSET: u64 = 1;

pub struct RunContext<'a> {
    pub loaded: &'a LoadedConfig,
    pub seed: u64,
    pub out: &'a Path,
}

impl RunContext<'_> {
    fn csv(&self, file: &str, columns: &[&str]) -> Result<CsvOut, CliError> {
        CsvOut::create(&self.out.join(file), &self.loaded.hash, self.seed, columns)
    }

    fn prepare_out(&self) -> Result<(), CliError> {
        fs::create_dir_all(self.out)?;
        Ok(())
    }
}

fn gaussian_data<'a>(source: &'a vesde::training::DataSource, what: &str) -> Result<&'a GaussianData, CliError> {
    source
        .as_gaussian()
        .ok_or_else(|| CliError::Config(format!("{what} needs data.source = \"gaussian\"")))
}

pub fn train(ctx: &RunContext) -> Result<StopReason, CliError> {
    let cfg = &ctx.loaded.config;
    let net_cfg = cfg.require(&cfg.net, "net")?;
    let train_cfg = cfg.require(&cfg.train, "train")?;
    let schedule = cfg.variance_schedule()?;
    let grid = cfg.grid_for(cfg.schedule.steps)?;
    let source = cfg.data_source(ctx.loaded)?;
    let batch = make_batch(&source, cfg.data.n, &grid, &schedule, ctx.seed)?;
    let weighting = cfg.weighting(&grid, &schedule)?;
    let net = ScoreNet::init(cfg.data.d, net_cfg.m, net_cfg.depth, ctx.seed.wrapping_add(NET_SEED_OFFSET))?;
    let lr = train_cfg
        .lr
        .unwrap_or_else(|| default_lr(cfg.data.n, net_cfg.m, &weighting, &grid, &schedule));
    if net_cfg.depth == 0 {
        return Err(CliError::Config("training needs net.L >= 1".into()));
    }

    let outcome = train_with_halving(
        &net,
        lr,
        &batch,
        &weighting,
        &grid,
        &schedule,
        train_cfg.max_steps,
        train_cfg.eps_train,
        train_cfg.max_halvings,
    )?;
    ctx.prepare_out()?;
    let state = &outcome.state;
    state.net.save(&ctx.out.join("checkpoint.bin"))?;

    let mut losses = ctx.csv("loss_trace.csv", &["step", "loss"])?;
    for &(k, l) in &state.loss_trace {
        losses.row([k.to_string(), num(l)])?;
    }
    losses.finish()?;

    let mut decay = ctx.csv("decay_ratio.csv", &["step", "loss", "ratio", "j_star", "rate_factor"])?;
    if state.loss_trace.len() >= 2 {
        let trace = decay_ratio_trace(state)?;
        for k in 0..trace.steps.len() {
            decay.row([
                trace.steps[k].to_string(),
                num(trace.losses[k]),
                num(trace.ratios[k]),
                trace.j_star[k].to_string(),
                num(trace.rate_factor[k]),
            ])?;
        }
    }
    decay.finish()?;

    let initial = state.initial_loss().unwrap_or(f64::NAN);
    let last = state.last_loss().unwrap_or(f64::NAN);
    println!(
        "{}: {} steps, lr {:e} after {} halvings, loss {:e} -> {:e}",
        outcome.reason.name(),
        state.step,
        state.lr,
        outcome.halvings,
        initial,
        last
    );
    Ok(outcome.reason)
}

pub fn sample_cmd(ctx: &RunContext) -> Result<(), CliError> {
    let cfg = &ctx.loaded.config;
    let sample_cfg = cfg.require(&cfg.sample, "sample")?;
    let schedule = cfg.variance_schedule()?;
    let grid = cfg.grid_for(cfg.schedule.steps)?;
    let source = cfg.data_source(ctx.loaded)?;
    let d = cfg.data.d;

    let (score, reference): (Box<dyn ScoreFn>, _) = match sample_cfg.score {
        ScoreSource::Oracle => {
            let data = gaussian_data(&source, "sample.score = \"oracle\"")?.clone();
            let law = iterate_law(&data, &grid, &schedule)?;
            (Box::new(AnalyticScore { data, schedule }), Some(law))
        }
        ScoreSource::Checkpoint => {
            let path = ctx.loaded.resolve(sample_cfg.checkpoint.as_deref().expect("validated"));
            let net = ScoreNet::load(&path)?;
            if net.data_dim() != d {
                return Err(vesde::Error::DimensionMismatch {
                    expected: d,
                    actual: net.data_dim(),
                    context: "checkpoint data dimension vs data.d",
                }
                .into());
            }
            (Box::new(NetScore { net, schedule }), None)
        }
    };

    let config = SamplerConfig {
        grid,
        schedule,
        trajectories: sample_cfg.trajectories,
        seed: ctx.seed,
    };
    let samples = sample(&config, score.as_ref())?;
    ctx.prepare_out()?;

    match sample_cfg.format {
        SampleFormat::Csv => {
            let columns: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
            let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
            let mut w = ctx.csv("samples.csv", &cols)?;
            for row in samples.rows() {
                w.row(row.iter().map(|&v| num(v)))?;
            }
            w.finish()?;
        }
        SampleFormat::Binary => {
            let mut w = BufWriter::new(fs::File::create(ctx.out.join("samples.bin"))?);
            for v in samples.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
            w.flush()?;
        }
    }

    let mut columns = vec!["coordinate", "mean", "var", "mean_se"];
    if reference.is_some() {
        columns.extend(["ref_mean", "ref_var"]);
    }
    let mut w = ctx.csv("moments.csv", &columns)?;
    if let Some(m) = Moments::from_samples(&samples) {
        for k in 0..d {
            let mut row = vec![(k + 1).to_string(), num(m.mean[k]), num(m.var[k]), num(m.mean_se[k])];
            if let Some(law) = &reference {
                row.push(num(law.terminal_mean()[k]));
                row.push(num(law.terminal_cov()));
            }
            w.row(row)?;
        }
    }
    w.finish()?;
    println!("{} trajectories of dimension {d}", samples.nrows());
    Ok(())
}

pub fn oracle(ctx: &RunContext) -> Result<(), CliError> {
    let cfg = &ctx.loaded.config;
    let oracle_cfg = cfg.require(&cfg.oracle, "oracle")?;
    let schedule = cfg.variance_schedule()?;
    let source = cfg.data_source(ctx.loaded)?;
    let data = gaussian_data(&source, "oracle")?;
    let eps_train = cfg.train.as_ref().map_or(0.0, |t| t.eps_train);
    if !eps_train.is_finite() {
        return Err(CliError::Config("oracle reports need a finite train.eps_train".into()));
    }

    struct Row {
        grid: TimeGrid,
        e_sigma: f64,
        kl: f64,
        crosscheck: f64,
        e_init: f64,
        e_disc: f64,
    }
    let mut rows = Vec::with_capacity(oracle_cfg.steps.len());
    let mut reports = Vec::with_capacity(oracle_cfg.steps.len());
    for &n in &oracle_cfg.steps {
        let grid = cfg.grid_for(n)?;
        let kl = kl_breakdown(data, &grid, &schedule)?;
        let e_init = compute_e_init(data.second_moment(), schedule.sigma_bar(grid.horizon()))?;
        let e_disc = compute_e_disc(&grid, &schedule, data.second_moment(), data.dim())?;
        let weighting = cfg.weighting(&grid, &schedule)?;
        reports.push(full_error_report(&ReportRequest {
            grid: &grid,
            schedule: &schedule,
            m2_sq: data.second_moment(),
            d: data.dim(),
            weighting: Some(&weighting),
            eps_train,
            oracle: Some(data),
            e_score: None,
            corollary_a: cfg.grid_kind().rho(),
        })?);
        rows.push(Row {
            grid,
            e_sigma: kl.e_sigma,
            kl: kl.kl,
            crosscheck: kl.crosscheck,
            e_init: e_init.value,
            e_disc: e_disc.total,
        });
    }

    ctx.prepare_out()?;
    let mut w = ctx.csv(
        "oracle.csv",
        &[
            "N",
            "variance",
            "grid",
            "rho",
            "sigma_min",
            "sigma_max",
            "E_sigma",
            "exact_kl",
            "kl_crosscheck",
            "E_I",
            "E_D",
        ],
    )?;
    for r in &rows {
        w.row([
            r.grid.steps().to_string(),
            schedule.kind.name().to_string(),
            r.grid.kind().name().to_string(),
            r.grid.kind().rho().map(|v| v.to_string()).unwrap_or_default(),
            num(schedule.sigma_bar_min),
            num(schedule.sigma_bar_max),
            num(r.e_sigma),
            num(r.kl),
            num(r.crosscheck),
            num(r.e_init),
            num(r.e_disc),
        ])?;
    }
    w.finish()?;

    let columns: Vec<&str> = reports
        .first()
        .map(|r| r.fields().into_iter().map(|(k, _)| k).collect())
        .unwrap_or_else(|| vec!["N"]);
    let mut w = ctx.csv("report.csv", &columns)?;
    let mut text = BufWriter::new(fs::File::create(ctx.out.join("report.txt"))?);
    for r in &reports {
        w.row(r.fields().into_iter().map(|(_, v)| v))?;
        writeln!(text, "{r}")?;
    }
    w.finish()?;
    text.flush()?;
    println!("{} oracle rows", rows.len());
    Ok(())
}

pub fn compare(ctx: &RunContext) -> Result<(), CliError> {
    let cfg = &ctx.loaded.config;
    let compare_cfg = cfg.require(&cfg.compare, "compare")?;
    let source = cfg.data_source(ctx.loaded)?;
    let data = gaussian_data(&source, "compare-schedules")?;
    let (smin, smax, rho) = (cfg.schedule.sigma_min, cfg.schedule.sigma_max, cfg.schedule.rho);
    let edm = VarianceSchedule::edm(smin, smax)?;
    let song = VarianceSchedule::song(smin, smax)?;
    let (m2, d) = (data.second_moment(), data.dim());
    let complexity_poly = iteration_complexity(ScheduleFamily::Polynomial, m2, d, rho, smin, smax)?;
    let complexity_exp = iteration_complexity(ScheduleFamily::Exponential, m2, d, rho, smin, smax)?;

    let winner = |poly: f64, exp: f64| {
        if poly < exp {
            "poly"
        } else if exp < poly {
            "exp"
        } else {
            "tie"
        }
    };
    let mut rows = Vec::new();
    for &n in &compare_cfg.steps {
        let poly_grid = TimeGrid::build(&edm, GridKind::Polynomial { rho }, n)?;
        let exp_grid = TimeGrid::build(&song, GridKind::Exponential, n)?;
        let kl_poly = kl_breakdown(data, &poly_grid, &edm)?.kl;
        let kl_exp = kl_breakdown(data, &exp_grid, &song)?.kl;
        let t2 = table2_quantities(n, rho, smin, smax)?;
        // A single step has no interior grid point to compare.
        let (sampling, score) = if n == 1 {
            ("none", "none")
        } else {
            (winner(kl_poly, kl_exp), winner(t2.poly_factor, t2.exp_factor))
        };
        rows.push(vec![
            n.to_string(),
            num(kl_poly),
            num(kl_exp),
            num(t2.poly_factor),
            num(t2.exp_factor),
            num(complexity_poly),
            num(complexity_exp),
            sampling.to_string(),
            score.to_string(),
        ]);
    }
    let sweep: Vec<(f64, f64)> = compare_cfg
        .rho_sweep
        .iter()
        .map(|&r| Ok((r, iteration_complexity(ScheduleFamily::Polynomial, m2, d, r, smin, smax)?)))
        .collect::<Result<_, vesde::Error>>()?;

    ctx.prepare_out()?;
    let mut w = ctx.csv(
        "compare.csv",
        &[
            "N",
            "exact_kl_poly",
            "exact_kl_exp",
            "score_factor_poly",
            "score_factor_exp",
            "complexity_poly",
            "complexity_exp",
            "sampling_dominant_winner",
            "score_dominant_winner",
        ],
    )?;
    for r in rows {
        w.row(r)?;
    }
    w.finish()?;

    let star = optimal_rho(smin, smax);
    let mut w = ctx.csv("rho_sweep.csv", &["rho", "complexity_poly", "optimal_rho"])?;
    for &(r, c) in &sweep {
        w.row([num(r), num(c), num(star)])?;
    }
    w.finish()?;
    if let Some(&(best, _)) = sweep.iter().min_by(|a, b| a.1.total_cmp(&b.1)) {
        println!("sweep minimizer rho = {best}, optimal rho* = {star:.6}");
    }
    Ok(())
}

pub fn probe(ctx: &RunContext) -> Result<(), CliError> {
    let cfg = &ctx.loaded.config;
    let probe_cfg = cfg.probe.clone().unwrap_or(crate::config::ProbeBlock {
        sigma_grid: None,
        checkpoint: None,
    });
    let schedule = cfg.variance_schedule()?;
    let grid = cfg.grid_for(cfg.schedule.steps)?;
    let net = match &probe_cfg.checkpoint {
        Some(p) => ScoreNet::load(&ctx.loaded.resolve(p))?,
        None => {
            let n = cfg.require(&cfg.net, "net")?;
            ScoreNet::init(cfg.data.d, n.m, n.depth, ctx.seed.wrapping_add(NET_SEED_OFFSET))?
        }
    };
    if net.data_dim() != cfg.data.d {
        return Err(vesde::Error::DimensionMismatch {
            expected: cfg.data.d,
            actual: net.data_dim(),
            context: "checkpoint data dimension vs data.d",
        }
        .into());
    }
    let sigma_grid = probe_cfg
        .sigma_grid
        .unwrap_or_else(|| logspace(1e-4, cfg.schedule.sigma_max.max(1e-3), 25));
    let source = cfg.data_source(ctx.loaded)?;
    let batch = make_batch(&source, 1, &grid, &schedule, ctx.seed)?;
    let x = batch.samples().row(0).to_vec();
    let xi = batch.noise(0, 0).to_vec();
    let values = bell_shape_probe(&net, &x, &xi, &sigma_grid)?;

    ctx.prepare_out()?;
    let mut w = ctx.csv("probe.csv", &["sigma_bar", "residual_norm"])?;
    for (s, v) in &values {
        w.row([num(*s), num(*v)])?;
    }
    w.finish()?;
    let xi_norm = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
    println!("{} probe points, |xi| = {xi_norm:e}", values.len());
    Ok(())
}
