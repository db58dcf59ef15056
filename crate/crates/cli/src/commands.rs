use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rainmap_core::forecast::{forecast_functional_grid, unit_square_grid, Functional, GridRequest};
use rainmap_core::io::{
    self, config_hash, export_dataset, export_grid, load_dataset, read_chain, read_layout,
    read_targets, write_chain_file, ArchiveHeader, CovariateTransform, Dataset, LoadOptions,
    Standardize, StationRecord, SCHEMA_VERSION,
};
use rainmap_core::model::DEFAULT_TRIALS;
use rainmap_core::sampler::geweke::{geweke_test, GewekeConfig};
use rainmap_core::sampler::{
    advance_chain, AnyState, ChainDiagnostics, ChainRun, ModelKind, SamplerConfig, ScanProgress,
    Step2Conditionals,
};
use rainmap_core::simstudy::{
    generate_replicate, read_truth_grid, run_study, station_layouts, write_kl_summary,
    write_model_aggregates, write_truth_grid, Scenario, ScenarioKind, StudySummary,
};
use rainmap_core::SpatialPoint;
use serde::{Deserialize, Serialize};

use crate::args::{
    Cli, Command, DiagnoseArgs, DiagnosticTest, FitArgs, ForecastArgs, IngestArgs, Mutation,
    SimulateArgs, StudyArgs,
};
use crate::config::RunConfig;
use crate::CliError;

/// First simulated calendar year.
const FIRST_YEAR: i32 = 2001;

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::usage(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Simulate(a) => simulate(&a, &cfg),
        Command::Fit(a) => fit(&a, &cfg),
        Command::Forecast(a) => forecast(&a, &cfg),
        Command::Study(a) => study(&a, &cfg),
        Command::Diagnose(a) => diagnose(&a),
    })
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::data(format!("cannot create {}: {e}", path.display())))
}

fn layout_for(
    path: Option<&Path>,
    requested: Option<usize>,
    scenario: &mut Scenario,
) -> Result<Vec<SpatialPoint>, CliError> {
    match path {
        None => Ok(station_layouts(scenario.n_stations)),
        Some(p) => {
            let layout = read_layout(p)?;
            if let Some(m) = requested.filter(|&m| m != layout.len()) {
                return Err(CliError::usage(format!(
                    "--stations {m} disagrees with the {} stations in {}",
                    layout.len(),
                    p.display()
                )));
            }
            scenario.n_stations = layout.len();
            Ok(layout)
        }
    }
}

pub fn simulate(a: &SimulateArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let mut sc = cfg.scenario.clone();
    if let Some(k) = a.scenario {
        sc.kind = k.into();
    }
    if let Some(m) = a.stations {
        sc.n_stations = m;
    }
    if let Some(t) = a.years {
        sc.n_years = t;
    }
    if let Some(n) = a.events_per_cell {
        sc.events_per_cell = n;
    }
    if let Some(r) = a.grid_res {
        sc.grid_resolution = r;
    }
    let layout = layout_for(a.layout.as_deref(), a.stations, &mut sc)?;
    sc.validate()?;
    let data = generate_replicate(&sc, &layout, a.seed)?;
    let dataset = Dataset {
        stations: layout
            .iter()
            .enumerate()
            .map(|(i, p)| StationRecord {
                id: format!("S{:03}", i + 1),
                covariates: p.coords().to_vec(),
            })
            .collect(),
        covariate_names: vec!["x".into(), "y".into()],
        years: (0..sc.n_years as i32).map(|j| FIRST_YEAR + j).collect(),
        transform: CovariateTransform::identity(2),
        data,
    };
    export_dataset(&dataset, &a.out)?;

    let truth_path = a.out.join("truth_grid.csv");
    write_truth_grid(
        sc.kind,
        &unit_square_grid(sc.grid_resolution),
        create(&truth_path)?,
    )?;

    // Settings that reload the files exactly: every simulated magnitude is
    // wet, and the coordinates already live on [-1, 1].
    let reload = RunConfig {
        ingest: LoadOptions {
            wet_threshold_mm: 0.0,
            year_range: None,
            n_trials: DEFAULT_TRIALS,
            standardize: Standardize::None,
        },
        scenario: sc.clone(),
        ..RunConfig::default()
    };
    let mut w = create(&a.out.join("rainmap.toml"))?;
    writeln!(
        w,
        "# rainmap simulate --scenario {} --stations {} --seed {}",
        sc.kind, sc.n_stations, a.seed
    )?;
    writeln!(
        w,
        "# Pass this file as --config when fitting the simulated data."
    )?;
    write!(w, "{}", reload.to_toml())?;
    w.flush()?;

    println!(
        "simulated {} scenario: M = {}, T = {}, {} events per station-year",
        sc.kind, sc.n_stations, sc.n_years, sc.events_per_cell
    );
    println!(
        "wrote stations.csv, daily.csv, truth_grid.csv, rainmap.toml in {}",
        a.out.display()
    );
    Ok(())
}

fn load_options(a: &IngestArgs, cfg: &RunConfig) -> LoadOptions {
    let mut o = cfg.ingest.clone();
    if let Some(t) = a.wet_threshold {
        o.wet_threshold_mm = t;
    }
    if a.year_range.is_some() {
        o.year_range = a.year_range;
    }
    if let Some(n) = a.n_trials {
        o.n_trials = n;
    }
    if let Some(s) = a.standardize {
        o.standardize = s.into();
    }
    o
}

/// Saved sampler state of an unfinished or finished `fit`.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config_hash: String,
    pub run: ChainRun,
}

pub fn checkpoint_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".checkpoint.json");
    out.with_file_name(name)
}

fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), CliError> {
    let tmp = path.with_extension("json.tmp");
    let mut w = create(&tmp)?;
    serde_json::to_writer(&mut w, ck).map_err(|e| CliError::data(e.to_string()))?;
    w.flush()?;
    drop(w);
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let text = fs::read_to_string(path).map_err(|e| {
        CliError::usage(format!(
            "--resume: cannot read checkpoint {}: {e}",
            path.display()
        ))
    })?;
    let ck: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| CliError::data(format!("checkpoint {}: {e}", path.display())))?;
    if ck.schema_version != SCHEMA_VERSION {
        return Err(CliError::data(format!(
            "checkpoint {} has schema version {}",
            path.display(),
            ck.schema_version
        )));
    }
    Ok(ck)
}

#[derive(Default)]
struct TraceSummary {
    rows: Vec<ScanProgress>,
}

pub fn fit(a: &FitArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let mut sampler = cfg.sampler.clone();
    if let Some(n) = a.iters {
        sampler.n_iterations = n;
    }
    if let Some(n) = a.burnin {
        sampler.burn_in = n;
    }
    if let Some(n) = a.thin {
        sampler.thin = n;
    }
    if let Some(s) = a.seed {
        sampler.seed = s;
    }
    if let Some(i) = a.init {
        sampler.init = i.into();
    }
    if let Some(l) = a.local_updates {
        sampler.local_updates = l;
    }
    sampler.validate()?;
    let opts = load_options(&a.ingest, cfg);
    let ds = load_dataset(
        &a.ingest.data.join("stations.csv"),
        &a.ingest.data.join("daily.csv"),
        &opts,
    )?;
    let data = &ds.data;
    let model: ModelKind = a.model.into();
    let hash = config_hash(model, &sampler, data);
    let ck_path = checkpoint_path(&a.out);

    let mut run = if a.resume {
        let ck = read_checkpoint(&ck_path)?;
        if ck.config_hash != hash {
            return Err(CliError::usage(format!(
                "--resume refused: {} was written for a different model, configuration or dataset \
                 (hash {}, current {hash})",
                ck_path.display(),
                ck.config_hash
            )));
        }
        log::info!("resuming from scan {}", ck.run.state.iteration());
        ck.run
    } else {
        ChainRun {
            draws: Vec::new(),
            state: AnyState::initial(model, data, &sampler)?,
            diagnostics: ChainDiagnostics::default(),
        }
    };

    let mut trace = TraceSummary::default();
    let n = sampler.n_iterations;
    let step = (n / 10).max(1);
    loop {
        let at = run.state.iteration();
        let stop = match a.checkpoint_every {
            0 => n,
            k => ((at / k + 1) * k).min(n),
        };
        run = advance_chain(data, &sampler, run, stop, &mut |p: &ScanProgress| {
            if p.iteration % step == 0 {
                log::info!(
                    "scan {}/{n}: magnitude log-likelihood {:.3}",
                    p.iteration,
                    p.loglik_magnitudes
                );
            }
            trace.rows.push(p.clone());
        })?;
        write_checkpoint(
            &ck_path,
            &Checkpoint {
                schema_version: SCHEMA_VERSION,
                config_hash: hash.clone(),
                run: run.clone(),
            },
        )?;
        if run.state.iteration() >= n {
            break;
        }
    }

    let header = ArchiveHeader::new(model, &sampler, data, ds.transform.clone());
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_chain_file(&a.out, &header, &run.draws)?;
    if let Some(path) = &a.trace {
        write_trace(path, &trace.rows)?;
    }
    report_fit(
        model,
        data,
        &sampler,
        &run.diagnostics,
        &trace.rows,
        run.draws.len(),
    );
    println!("chain archive: {}", a.out.display());
    Ok(())
}

fn write_trace(path: &Path, rows: &[ScanProgress]) -> Result<(), CliError> {
    let mut w = create(path)?;
    writeln!(w, "{}", io::schema_comment())?;
    writeln!(
        w,
        "iteration,loglik_counts,loglik_magnitudes,shrinks_total,shrinks_max"
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.16e},{},{}",
            r.iteration,
            r.loglik_counts
                .map(|v| format!("{v:.16e}"))
                .unwrap_or_default(),
            r.loglik_magnitudes,
            r.shrinks.iter().sum::<usize>(),
            r.shrinks.iter().max().copied().unwrap_or(0)
        )?;
    }
    w.flush()?;
    Ok(())
}

fn report_fit(
    model: ModelKind,
    data: &rainmap_core::model::ObservedData,
    config: &SamplerConfig,
    diag: &ChainDiagnostics,
    rows: &[ScanProgress],
    stored: usize,
) {
    println!(
        "{model} model: M = {}, T = {}, p = {}, {} scans, {stored} stored draws",
        data.n_stations(),
        data.n_years(),
        data.dim(),
        diag.n_scans
    );
    println!(
        "slice updates: {}, mean shrinks {:.2}, max shrinks {} (limit {})",
        diag.n_slice_updates,
        diag.mean_shrinks(),
        diag.max_shrinks_seen,
        config.max_shrinks
    );
    if diag.n_cell_updates > 0 {
        println!(
            "per-cell slice updates: {}, mean shrinks {:.2}, max shrinks {}",
            diag.n_cell_updates,
            diag.total_cell_shrinks as f64 / diag.n_cell_updates as f64,
            diag.max_cell_shrinks_seen
        );
    }
    if diag.repeated_coordinates == 0 {
        println!("rejection-free: no slice-updated coordinate repeated its previous value");
    } else {
        println!(
            "warning: {} slice-updated coordinates repeated their previous value",
            diag.repeated_coordinates
        );
    }
    let kept: Vec<f64> = rows
        .iter()
        .filter(|r| r.iteration > config.burn_in)
        .map(|r| r.loglik_magnitudes)
        .collect();
    if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
        println!(
            "magnitude log-likelihood: scan {} {:.3}, scan {} {:.3}",
            first.iteration, first.loglik_magnitudes, last.iteration, last.loglik_magnitudes
        );
    }
    if !kept.is_empty() {
        let mean = kept.iter().sum::<f64>() / kept.len() as f64;
        let lo = kept.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = kept.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        println!(
            "after burn-in: mean {mean:.3}, range [{lo:.3}, {hi:.3}] over {} scans",
            kept.len()
        );
    }
}

pub fn forecast(a: &ForecastArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let archive = read_chain(&a.chain)?;
    let h = &archive.header;
    let functional: Functional = a.functional.into();
    let t = &a.targets;
    let to_standard =
        |raw: &[f64]| -> Result<SpatialPoint, CliError> { Ok(h.transform.apply(raw)?) };

    let (grid, truth) = if let Some(path) = &t.truth {
        if h.dim != 2 {
            return Err(CliError::usage(
                "--truth needs a chain fitted on two covariates",
            ));
        }
        let (pts, truth) = read_truth_grid(path)?;
        let grid = pts
            .iter()
            .map(|p| to_standard(p.coords()))
            .collect::<Result<Vec<_>, _>>()?;
        (grid, Some(truth))
    } else if let Some(path) = &t.targets_csv {
        let (_, rows) = read_targets(path)?;
        if let Some(r) = rows.iter().find(|r| r.len() != h.dim) {
            return Err(CliError::data(format!(
                "{}: target has {} covariates, the chain has {}",
                path.display(),
                r.len(),
                h.dim
            )));
        }
        let grid = rows
            .iter()
            .map(|r| to_standard(r))
            .collect::<Result<Vec<_>, _>>()?;
        (grid, None)
    } else {
        if h.dim != 2 {
            return Err(CliError::usage(format!(
                "the chain has {} covariates; give --targets-csv instead of a grid",
                h.dim
            )));
        }
        let res = t.grid_res.unwrap_or(cfg.forecast.grid_resolution);
        if res == 0 {
            return Err(CliError::usage("--grid-res must be at least 1"));
        }
        (unit_square_grid(res), None)
    };
    if functional == Functional::KlVsTruth && truth.is_none() {
        return Err(CliError::usage(
            "kl-vs-truth needs --truth <truth_grid.csv>",
        ));
    }
    let seed = a.seed.unwrap_or(cfg.forecast.seed);
    let out = forecast_functional_grid(
        &archive.draws,
        &GridRequest {
            grid: &grid,
            points: &h.points,
            functional,
            n_trials: h.n_trials,
            seed,
            truth: truth.as_deref(),
        },
    )?;
    export_grid(&out, Some(&h.transform), create(&a.out)?)?;
    println!(
        "{functional}: {} targets from {} draws, {} conditional variances clamped",
        out.len(),
        out.n_draws,
        out.clamped_variances
    );
    println!("grid: {}", a.out.display());
    Ok(())
}

/// Whether the study's aggregate KL values order the way the models should:
/// the semi-parametric model strictly better on the nonlinear surfaces, the
/// parametric model no worse than 25% above it on the linear ones.
pub fn ordering_holds(kind: ScenarioKind, semi: f64, para: f64) -> bool {
    match kind {
        ScenarioKind::Nonlinear => semi < para,
        ScenarioKind::Linear => para <= 1.25 * semi,
    }
}

pub fn study(a: &StudyArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let mut sc = cfg.scenario.clone();
    if let Some(k) = a.scenario {
        sc.kind = k.into();
    }
    if let Some(m) = a.stations {
        sc.n_stations = m;
    }
    if let Some(r) = a.replicates {
        sc.replicates = r;
    }
    if let Some(g) = a.grid_res {
        sc.grid_resolution = g;
    }
    let mut sampler = cfg.sampler.clone();
    if let Some(n) = a.iters {
        sampler.n_iterations = n;
    }
    if let Some(n) = a.burnin {
        sampler.burn_in = n;
    }
    sampler.validate()?;
    let layout = layout_for(a.layout.as_deref(), a.stations, &mut sc)?;
    sc.validate()?;
    let seed = a.seed.unwrap_or(cfg.study.seed);
    let models = [ModelKind::SemiParametric, ModelKind::Parametric];
    let summary = run_study(&sc, &models, &sampler, &layout, seed)?;

    fs::create_dir_all(&a.out)?;
    write_kl_summary(&summary, create(&a.out.join("kl_summary.csv"))?)?;
    write_model_aggregates(&summary, create(&a.out.join("model_aggregates.csv"))?)?;
    write_truth_grid(
        sc.kind,
        &unit_square_grid(sc.grid_resolution),
        create(&a.out.join("truth_grid.csv"))?,
    )?;
    let effective = RunConfig {
        sampler,
        scenario: sc.clone(),
        study: crate::config::StudyConfig { seed },
        ..cfg.clone()
    };
    let mut w = create(&a.out.join("run_config.toml"))?;
    writeln!(w, "# effective configuration of this study")?;
    write!(w, "{}", effective.to_toml())?;
    w.flush()?;
    report_study(&sc, &summary);
    println!("outputs: {}", a.out.display());
    Ok(())
}

fn report_study(sc: &Scenario, summary: &StudySummary) {
    println!(
        "{} scenario, M = {}, {} replicates, {g}x{g} grid",
        sc.kind,
        sc.n_stations,
        sc.replicates,
        g = sc.grid_resolution
    );
    for s in &summary.surfaces {
        println!(
            "  {:<15} grid-mean KL {:.6e}",
            s.model.name(),
            s.grid_mean()
        );
    }
    let get = |m| summary.surface(m).map(|s| s.grid_mean());
    if let (Some(semi), Some(para)) = (get(ModelKind::SemiParametric), get(ModelKind::Parametric)) {
        let verdict = if ordering_holds(sc.kind, semi, para) {
            "holds"
        } else {
            "does not hold"
        };
        match sc.kind {
            ScenarioKind::Nonlinear => println!("ordering semiparametric < parametric: {verdict}"),
            ScenarioKind::Linear => {
                println!("ordering parametric <= 1.25 x semiparametric: {verdict}")
            }
        }
    }
}

pub fn diagnose(a: &DiagnoseArgs) -> Result<(), CliError> {
    match a.test {
        DiagnosticTest::Geweke => {}
    }
    let config = GewekeConfig {
        model: a.model.into(),
        n_draws: a.draws,
        seed: a.seed,
        step2: match a.mutation {
            Mutation::None => Step2Conditionals::Exact,
            Mutation::PrintedStep2 => Step2Conditionals::Printed,
        },
        local_updates: a.local_updates,
        ..GewekeConfig::default()
    };
    let report = geweke_test(&config)?;
    println!(
        "joint-distribution test: {} model, M = {}, T = {}, p = {}, {} draws per simulator",
        config.model, config.n_stations, config.n_years, config.dim, config.n_draws
    );
    println!(
        "{:<28} {:>14} {:>14} {:>8}",
        "function", "marginal", "successive", "z"
    );
    for s in &report.stats {
        println!(
            "{:<28} {:>14.6} {:>14.6} {:>8.3}",
            s.name, s.mc_mean, s.sc_mean, s.z
        );
    }
    println!(
        "{} test functions, max |z| = {:.3}, threshold {}",
        report.stats.len(),
        report.max_abs_z(),
        report.threshold
    );
    if report.passed() {
        println!("PASS");
        Ok(())
    } else {
        println!("FAIL");
        Err(CliError::diagnostic(format!(
            "max |z| = {:.3} is not below {}",
            report.max_abs_z(),
            report.threshold
        )))
    }
}
