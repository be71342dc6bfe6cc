use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use icpoint::analysis::{
    export_report, kde2d, kl_pipeline, ol_interval_stats, phase_points, rmse_summary, ConditionKey,
    DensityGrid, ExportBundle, FitRecord, OlStats,
};
use icpoint::icore::IcParams;
use icpoint::ident::{
    build_bank, cost_2ol, derive_kinematics, fit_2ol, fit_slice_multistart, load_recording,
    slice_cost, slice_data, slice_recording, split_slices, ColumnMap, Fit2ol, GpsOptions,
    MultiStart, ParamSet, Recording, SliceData, Units, SG_ORDER, SG_WINDOW,
};
use icpoint::io::{
    create_dir, read_text, read_trajectory_csv, write_text, write_trajectory_csv, Manifest,
};
use icpoint::plant::PlantSpec;
use icpoint::sim::{
    derive_seeds, make_target, run_ensemble, simulate_2ol_from, simulate_bank_from, ModelBank,
    Start, TargetSignal, TaskCondition, Trajectory,
};

use crate::config::{
    config_hash, Condition, EvaluateConfig, ExportConfig, FitConfig, Input, SimulateConfig,
};
use crate::CliError;

/// Starting point of the 2ol fit, `(ω, ζ)`.
const INIT_2OL: (f64, f64) = (10.0, 0.7);

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn manifest<C: Serialize>(command: &str, seed: u64, cfg: &C) -> Result<Manifest, CliError> {
    let value = serde_json::to_value(cfg).map_err(icpoint::Error::from)?;
    let mut m = Manifest::new(command);
    m.seed = Some(seed);
    m.config_hash = Some(config_hash(&value));
    m.config = value;
    Ok(m)
}

fn relative(paths: &[PathBuf], dir: &Path) -> Vec<String> {
    paths
        .iter()
        .map(|p| p.strip_prefix(dir).unwrap_or(p).display().to_string())
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(icpoint::Error::from)?;
    write_text(path, &text)?;
    Ok(())
}

/// Resolves a data path against the data directory. A directory (or a
/// missing path with a data directory set) selects `<participant>.csv`.
pub fn resolve_data(
    path: Option<&Path>,
    data_dir: Option<&Path>,
    participant: Option<&str>,
) -> Result<PathBuf, CliError> {
    let base = match (path, data_dir) {
        (Some(p), Some(d)) if p.is_relative() && !p.exists() => d.join(p),
        (Some(p), _) => p.to_path_buf(),
        (None, Some(d)) => d.to_path_buf(),
        (None, None) => return Err(usage("no data given; pass --data or set ICPOINT_DATA")),
    };
    if base.is_dir() {
        let who = participant.ok_or_else(|| {
            usage(format!(
                "{} is a directory; pass --participant",
                base.display()
            ))
        })?;
        return Ok(base.join(format!("{who}.csv")));
    }
    Ok(base)
}

fn load_input(path: &Path, input: &Input) -> Result<Recording, CliError> {
    let map = ColumnMap {
        time: input.col_time.clone(),
        target: input.col_target.clone(),
        pos: input.col_pos.clone(),
        vel: input.col_vel.clone(),
    };
    let units: Units = input
        .units
        .parse()
        .map_err(|e: icpoint::Error| usage(e.to_string()))?;
    let rec = load_recording(path, &map, units)?;
    let smoothing = input.smooth.then_some((SG_WINDOW, SG_ORDER));
    Ok(derive_kinematics(&rec, smoothing)?)
}

/// Condition label of a recording; the distance falls back to the target range.
fn condition_key(rec: &Recording, cond: &Condition) -> Result<ConditionKey, CliError> {
    let (lo, hi) = rec
        .target
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
            (a.min(x), b.max(x))
        });
    let distance_mm = cond.distance.unwrap_or(((hi - lo) * 1e4).round() / 10.0);
    let id_nominal = match cond.width {
        Some(w) => TaskCondition::new(distance_mm, w, 0)?.id_nominal,
        None => 0,
    };
    Ok(ConditionKey {
        participant: cond
            .participant
            .clone()
            .unwrap_or_else(|| rec.participant.clone()),
        id_nominal,
        distance_mm,
    })
}

#[derive(Serialize)]
struct EvalSlice {
    slice_id: usize,
    ic_cost: f64,
    ol2_cost: f64,
}

#[derive(Serialize)]
struct Evaluation {
    slices: Vec<EvalSlice>,
    ic_mean: f64,
    ol2_mean: f64,
}

pub fn fit(cfg: &FitConfig, data_dir: Option<&Path>) -> Result<(), CliError> {
    let set: ParamSet = cfg
        .set
        .parse()
        .map_err(|e: icpoint::Error| usage(e.to_string()))?;
    if cfg.starts == 0 || cfg.max_evals == 0 {
        return Err(usage("--starts and --max-evals must be positive"));
    }
    let path = resolve_data(
        cfg.data.as_deref(),
        data_dir,
        cfg.condition.participant.as_deref(),
    )?;
    let rec = load_input(&path, &cfg.input)?;
    let key = condition_key(&rec, &cfg.condition)?;
    let slices = slice_recording(&rec)?;
    let (eval_slices, opt_slices) = split_slices(&slices);
    let load = |s: &[icpoint::ident::Slice]| {
        s.iter()
            .map(|s| slice_data(&rec, s))
            .collect::<Result<Vec<SliceData>, _>>()
    };
    let (eval_data, opt_data) = (load(&eval_slices)?, load(&opt_slices)?);

    let spec = PlantSpec::default();
    let init = match set {
        ParamSet::Full => IcParams::default(),
        ParamSet::Reduced => IcParams::reduced_default(),
    };
    let opts = GpsOptions {
        max_evals: cfg.max_evals,
        ..Default::default()
    };
    let seeds = derive_seeds(cfg.seed, opt_data.len());
    let fits = opt_data
        .par_iter()
        .zip(seeds)
        .map(|(sd, seed)| {
            let ms = MultiStart {
                starts: cfg.starts,
                seed,
                polish_rounds: cfg.polish_rounds,
            };
            fit_slice_multistart(sd, &spec, &init, set, &opts, &ms)
        })
        .collect::<Result<Vec<_>, _>>()?;

    create_dir(&cfg.out)?;
    let trace_dir = cfg.out.join("traces");
    create_dir(&trace_dir)?;
    let mut written = Vec::new();
    for f in &fits {
        let p = trace_dir.join(format!("trace_slice_{:03}.csv", f.slice_id));
        f.write_trace_csv(&p)?;
        written.push(p);
    }
    let records: Vec<FitRecord> = fits
        .iter()
        .map(|f| FitRecord {
            participant: key.participant.clone(),
            id_nominal: key.id_nominal,
            distance_mm: key.distance_mm,
            fit: f.clone(),
        })
        .collect();
    let p = cfg.out.join("fits.json");
    write_json(&p, &records)?;
    written.push(p);

    let bank = build_bank(&fits, rec.dt, spec.nms_time_constant)?;
    let p = cfg.out.join("bank.json");
    write_text(&p, &bank.to_json()?)?;
    written.push(p);

    let ol2: Fit2ol = fit_2ol(&opt_data, INIT_2OL, &opts)?;
    let p = cfg.out.join("fit_2ol.json");
    write_json(&p, &ol2)?;
    written.push(p);

    let best = &bank.entries[0].params;
    let rows: Vec<EvalSlice> = eval_data
        .par_iter()
        .map(|sd| EvalSlice {
            slice_id: sd.slice_id,
            ic_cost: slice_cost(sd, &spec, best),
            ol2_cost: cost_2ol(std::slice::from_ref(sd), ol2.omega, ol2.zeta),
        })
        .collect();
    let mean =
        |f: fn(&EvalSlice) -> f64| rows.iter().map(f).sum::<f64>() / rows.len().max(1) as f64;
    let evaluation = Evaluation {
        ic_mean: mean(|r| r.ic_cost),
        ol2_mean: mean(|r| r.ol2_cost),
        slices: rows,
    };
    let p = cfg.out.join("evaluation.json");
    write_json(&p, &evaluation)?;
    written.push(p);

    let mut m = manifest("fit", cfg.seed, cfg)?;
    m.files = relative(&written, &cfg.out);
    m.write(&cfg.out)?;

    println!(
        "{:>5}  {:>12}  {:>6}  {:>9}  {:>7}",
        "slice", "cost", "evals", "q", "p"
    );
    for f in &fits {
        println!(
            "{:>5}  {:>12.6e}  {:>6}  {:>9.5}  {:>7.4}",
            f.slice_id, f.cost, f.trace.evaluations, f.params.q, f.params.p
        );
    }
    println!(
        "2ol: omega = {:.4}, zeta = {:.4}, cost = {:.6e}; held-out mean cost IC {:.6e}, 2ol {:.6e}",
        ol2.omega, ol2.zeta, ol2.cost, evaluation.ic_mean, evaluation.ol2_mean
    );
    if bank.short {
        eprintln!(
            "warning: bank holds {} controllers, fewer than the nominal 20",
            bank.len()
        );
    }
    Ok(())
}

/// Target schedule, sample count and start of a simulation.
struct Schedule {
    target: TargetSignal,
    dt: f64,
    n_steps: usize,
    start: Start,
}

fn schedule(
    cfg: &SimulateConfig,
    data_dir: Option<&Path>,
    bank_dt: Option<f64>,
) -> Result<Schedule, CliError> {
    let synthetic = cfg.distance.is_some() || cfg.changes.is_some() || cfg.period.is_some();
    if cfg.data.is_some() && synthetic {
        return Err(usage(
            "--data cannot be combined with --distance/--changes/--period",
        ));
    }
    if let Some(d) = &cfg.data {
        let rec = load_input(&resolve_data(Some(d), data_dir, None)?, &cfg.input)?;
        if let Some(bdt) = bank_dt {
            if (bdt - rec.dt).abs() > 1e-9 * bdt {
                return Err(usage(format!(
                    "bank was designed for dt = {bdt}, recording has dt = {}",
                    rec.dt
                )));
            }
        }
        return Ok(Schedule {
            target: rec.target_signal(0, rec.len())?,
            dt: rec.dt,
            n_steps: rec.len(),
            start: Start::At(rec.y[0]),
        });
    }
    let (Some(distance), Some(changes), Some(period)) = (cfg.distance, cfg.changes, cfg.period)
    else {
        return Err(usage(
            "give either --data or all of --distance, --changes and --period",
        ));
    };
    if !(period > 0.0 && cfg.lead > 0.0) {
        return Err(usage("--period and --lead must be positive"));
    }
    let dt = bank_dt.unwrap_or(icpoint::sim::DEFAULT_DT);
    let cond = TaskCondition {
        distance_mm: distance,
        width_mm: f64::NAN,
        id_nominal: 0,
        trial_count: changes,
    };
    let target = make_target(
        &cond,
        (0..changes).map(|i| cfg.lead + i as f64 * period).collect(),
    )?;
    Ok(Schedule {
        target,
        dt,
        n_steps: ((cfg.lead + changes as f64 * period) / dt).round() as usize,
        start: Start::AtTarget,
    })
}

pub fn simulate(cfg: &SimulateConfig, data_dir: Option<&Path>) -> Result<(), CliError> {
    let baseline = match cfg.baseline.as_deref() {
        None => None,
        Some("2ol") => match (cfg.omega, cfg.zeta) {
            (Some(w), Some(z)) => Some((w, z)),
            _ => return Err(usage("--baseline 2ol needs --omega and --zeta")),
        },
        Some(other) => {
            return Err(usage(format!(
                "unknown baseline {other:?}; only 2ol is supported"
            )))
        }
    };
    let bank = match &cfg.bank {
        Some(p) => Some(ModelBank::from_json(&read_text(p)?)?),
        None if baseline.is_some() => None,
        None => return Err(usage("simulate needs --bank (or --baseline 2ol)")),
    };
    if bank.is_some() && cfg.runs == 0 {
        return Err(usage("--runs must be positive"));
    }
    let sched = schedule(cfg, data_dir, bank.as_ref().map(|b| b.dt))?;
    let spec = PlantSpec {
        nms_time_constant: bank
            .as_ref()
            .map_or(icpoint::plant::DEFAULT_NMS_TC, |b| b.nms_time_constant),
        motor_noise: cfg.motor_noise,
        sensor_noise: cfg.sensor_noise,
        ..Default::default()
    };
    create_dir(&cfg.out)?;
    let mut written = Vec::new();
    if let Some(bank) = &bank {
        let runs: Vec<Trajectory> = if matches!(sched.start, Start::AtTarget) {
            run_ensemble(
                bank,
                &spec,
                &sched.target,
                sched.n_steps as f64 * sched.dt,
                cfg.runs,
                cfg.seed,
            )?
        } else {
            derive_seeds(cfg.seed, cfg.runs)
                .into_par_iter()
                .map(|s| {
                    simulate_bank_from(bank, &spec, &sched.target, sched.n_steps, sched.start, s)
                })
                .collect::<Result<_, _>>()?
        };
        let width = cfg.runs.saturating_sub(1).to_string().len().max(3);
        for (i, t) in runs.iter().enumerate() {
            let p = cfg.out.join(format!("run_{i:0width$}.csv"));
            write_trajectory_csv(&p, t)?;
            written.push(p);
        }
        println!("wrote {} runs to {}", runs.len(), cfg.out.display());
    }
    if let Some((omega, zeta)) = baseline {
        let t = simulate_2ol_from(
            omega,
            zeta,
            &sched.target,
            sched.dt,
            sched.n_steps,
            sched.start,
        )?;
        let p = cfg.out.join("baseline_2ol.csv");
        write_trajectory_csv(&p, &t)?;
        written.push(p);
        println!("wrote 2ol baseline (omega = {omega}, zeta = {zeta})");
    }
    let mut m = manifest("simulate", cfg.seed, cfg)?;
    m.files = relative(&written, &cfg.out);
    m.write(&cfg.out)?;
    Ok(())
}

/// Reads a trajectory CSV, falling back to the recording format.
fn read_any(path: &Path, input: &Input) -> Result<Trajectory, CliError> {
    match read_trajectory_csv(path) {
        Ok(t) => Ok(t),
        Err(_) => {
            let rec = load_input(path, input)?;
            Ok(rec.trajectory(0, rec.len())?)
        }
    }
}

fn sim_files(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| icpoint::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "csv")
                && p.file_name()
                    .is_some_and(|n| n.to_string_lossy().starts_with("run_"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(icpoint::Error::Ingest {
            path: path.display().to_string(),
            row: None,
            msg: "no run_*.csv files".into(),
        }
        .into());
    }
    Ok(files)
}

fn truncated(t: &Trajectory, n: usize) -> Trajectory {
    if t.len() == n {
        t.clone()
    } else {
        t.window(0, n)
    }
}

#[derive(Serialize)]
struct RunMetrics {
    run: String,
    rmse_pos: f64,
    rmse_vel: f64,
    events: usize,
}

#[derive(Serialize)]
struct Metrics {
    samples_compared: usize,
    runs: Vec<RunMetrics>,
    baseline: Option<RunMetrics>,
    open_loop: Option<OlStats>,
}

pub fn evaluate(cfg: &EvaluateConfig, data_dir: Option<&Path>) -> Result<(), CliError> {
    if cfg.export_params && cfg.fits.is_none() {
        return Err(usage("--export-params needs --fits"));
    }
    let fits: Vec<FitRecord> = match &cfg.fits {
        Some(p) if cfg.export_params => {
            serde_json::from_str(&read_text(p)?).map_err(icpoint::Error::from)?
        }
        _ => Vec::new(),
    };
    let mut m = manifest("evaluate", cfg.seed, cfg)?;
    let Some(sims_path) = &cfg.sims else {
        if cfg.data.is_some() || cfg.baseline.is_some() {
            return Err(usage("evaluate needs --sims together with --data"));
        }
        let bundle = ExportBundle {
            fits: &fits,
            nms_time_constant: cfg.nms_time_constant,
            ..Default::default()
        };
        export_report(&bundle, &cfg.out, m)?;
        return Ok(());
    };
    let data_path = resolve_data(
        cfg.data.as_deref(),
        data_dir,
        cfg.condition.participant.as_deref(),
    )?;
    let rec = load_input(&data_path, &cfg.input)?;
    let key = condition_key(&rec, &cfg.condition)?;
    let data = rec.trajectory(0, rec.len())?;
    let files = sim_files(sims_path)?;
    let sims: Vec<Trajectory> = files
        .iter()
        .map(|p| read_any(p, &cfg.input))
        .collect::<Result<_, _>>()?;
    let baseline = cfg
        .baseline
        .as_deref()
        .map(|p| read_any(p, &cfg.input))
        .transpose()?;

    let n = sims
        .iter()
        .chain(baseline.iter())
        .map(Trajectory::len)
        .fold(data.len(), usize::min);
    let data_n = truncated(&data, n);
    let metric = |name: String, t: &Trajectory| -> Result<RunMetrics, CliError> {
        let (rmse_pos, rmse_vel) = rmse_summary(&truncated(t, n), &data_n)?;
        Ok(RunMetrics {
            run: name,
            rmse_pos,
            rmse_vel,
            events: t.events.len(),
        })
    };
    let runs = files
        .iter()
        .zip(&sims)
        .map(|(p, t)| {
            metric(
                p.file_name()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned(),
                t,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let base_metrics = baseline
        .as_ref()
        .map(|b| metric("baseline".into(), b))
        .transpose()?;
    let refs: Vec<&Trajectory> = sims.iter().collect();
    let open_loop = if sims.iter().any(|t| t.events.len() > 1) {
        Some(ol_interval_stats(&refs, cfg.ol_bin)?)
    } else {
        None
    };
    let metrics = Metrics {
        samples_compared: n,
        runs,
        baseline: base_metrics,
        open_loop,
    };
    create_dir(&cfg.out)?;
    let mut extra = Vec::new();
    let p = cfg.out.join("metrics.json");
    write_json(&p, &metrics)?;
    extra.push(p);

    let data_kde = kde2d(&phase_points(&[&data]), None, cfg.bins, None)?;
    let grid = Some((data_kde.pos, data_kde.vel));
    let sim_kde: DensityGrid = kde2d(&phase_points(&refs), grid, cfg.bins, None)?;
    for (name, g) in [("kde_data.json", &data_kde), ("kde_sim.json", &sim_kde)] {
        let p = cfg.out.join(name);
        write_json(&p, g)?;
        extra.push(p);
    }
    if let Some(b) = &baseline {
        let p = cfg.out.join("kde_baseline.json");
        write_json(&p, &kde2d(&phase_points(&[b]), grid, cfg.bins, None)?)?;
        extra.push(p);
    }

    let report = kl_pipeline(&sims, &[&data], baseline.as_ref(), &key)?;
    println!(
        "{} ID{} D{}: IC KL mean = {:.4}{}; position RMSE mean = {:.6e} m",
        key.participant,
        key.id_nominal,
        key.distance_mm,
        report.ic_kl_mean,
        report
            .baseline_kl
            .map(|b| format!(", baseline KL = {b:.4}"))
            .unwrap_or_default(),
        metrics.runs.iter().map(|r| r.rmse_pos).sum::<f64>() / metrics.runs.len() as f64,
    );
    for flag in &report.flags {
        eprintln!("note: {flag}");
    }
    let reports = [report];
    let bundle = ExportBundle {
        fits: &fits,
        trajectories: &[],
        reports: &reports,
        nms_time_constant: cfg.nms_time_constant,
    };
    // The export writes the manifest; list the metric files in it as well.
    m.files = relative(&extra, &cfg.out);
    let written = export_report(&bundle, &cfg.out, m.clone())?;
    let mut all = extra;
    all.extend(
        written
            .into_iter()
            .filter(|p| !p.ends_with(icpoint::io::MANIFEST_FILE)),
    );
    m.files = relative(&all, &cfg.out);
    m.write(&cfg.out)?;
    Ok(())
}

pub fn export_params(cfg: &ExportConfig) -> Result<(), CliError> {
    if cfg.fits.is_empty() {
        return Err(usage("export-params needs --fits"));
    }
    let mut fits = Vec::new();
    for p in &cfg.fits {
        let mut f: Vec<FitRecord> =
            serde_json::from_str(&read_text(p)?).map_err(icpoint::Error::from)?;
        fits.append(&mut f);
    }
    let bundle = ExportBundle {
        fits: &fits,
        nms_time_constant: cfg.nms_time_constant,
        ..Default::default()
    };
    export_report(&bundle, &cfg.out, manifest("export-params", cfg.seed, cfg)?)?;
    println!(
        "wrote {} parameter rows to {}",
        fits.len(),
        cfg.out.join("parameter_matrix.csv").display()
    );
    Ok(())
}
