use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use gridloc::experiment::{bucket_label, bucket_medians, sweep_k, sweep_noise, ErrorStats, NoiseSweepConfig};
use gridloc::geo::{horizontal_distance, GeoPosition, PropagationModel};
use gridloc::grid::{build_grid, load_grid, save_grid, GridSpec, TrainingGrid};
use gridloc::knn::{localize_batch, BatchOutcome, LocationEstimate};
use gridloc::log::{ingest, write_log, Ingested, LogFormat, MessageRecord};
use gridloc::mlat::{gdop_map, mlat_solve, MlatSolution};
use gridloc::sim::{
    add_noise, arrivals_for, clustered_deployment, coverage_monte_carlo, derive_seed, distort_clocks, generate_attacker_track,
    generate_flight, generate_scenario, message_loss, random_deployment, randomize_clocks, stream_rng, AttackerSpec, Region,
    STREAM_EMITTERS, STREAM_LOSS, STREAM_NOISE, STREAM_SENSORS,
};
use gridloc::sync::{fit_windowed, ClockObservation, ClockTable, TimeAnchor};
use gridloc::tdoa::{measured_fingerprint, Reception, Sensor, SensorId, SensorSet, TdoaFingerprint};
use gridloc::verify::{locate_origin, track_deviations, verify_track, TrackVerdict};

use crate::config::{Config, DeploymentKind, LogFormatChoice};
use crate::manifest::{file_digest, Outputs, RunManifest, MANIFEST_FILE};
use crate::output::{csv_bytes, json_bytes, num, opt};
use crate::{CliError, Command, MethodChoice};

/// Stream for the per-sensor clock errors of `simulate`.
const STREAM_CLOCKS: u64 = 5;

struct Ctx<'a> {
    cfg: &'a Config,
    out: Outputs,
    inputs: BTreeMap<PathBuf, String>,
    grid_digests: BTreeMap<String, String>,
    clock_models: Vec<gridloc::sync::ClockModel>,
}

impl Ctx<'_> {
    fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let digest = file_digest(path)?;
        self.inputs.insert(path.to_path_buf(), digest);
        Ok(())
    }

    fn load_grid(&mut self, path: &Path) -> Result<TrainingGrid, CliError> {
        self.input(path)?;
        self.grid_digests.insert(path.display().to_string(), self.inputs[path].clone());
        Ok(load_grid(path)?)
    }

    fn ingest(&mut self, path: &Path) -> Result<Ingested, CliError> {
        self.input(path)?;
        Ok(ingest(path)?)
    }

    fn clocks(&mut self, path: Option<&Path>) -> Result<ClockTable, CliError> {
        let Some(path) = path else { return Ok(ClockTable::new()) };
        self.input(path)?;
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let table: ClockTable = serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        self.clock_models = table.models().cloned().collect();
        Ok(table)
    }
}

fn absolute(p: &Path) -> Result<PathBuf, CliError> {
    fs::canonicalize(p).map_err(|e| CliError::io(p, e))
}

fn absolute_opt(p: &Option<PathBuf>) -> Result<Option<PathBuf>, CliError> {
    p.as_deref().map(absolute).transpose()
}

/// The command with every input path made absolute, so a manifest can be
/// replayed from any working directory.
fn canonical(cmd: &Command) -> Result<Command, CliError> {
    Ok(match cmd {
        Command::SyncClocks { log, sensors } => Command::SyncClocks { log: absolute(log)?, sensors: absolute_opt(sensors)? },
        Command::Localize { log, clocks, method } => Command::Localize { log: absolute(log)?, clocks: absolute_opt(clocks)?, method: *method },
        Command::Verify { log, clocks, ground_grid } => {
            Command::Verify { log: absolute(log)?, clocks: absolute_opt(clocks)?, ground_grid: absolute_opt(ground_grid)? }
        }
        other => other.clone(),
    })
}

/// Runs `cmd` into `out_dir` and writes its manifest. Returns the manifest
/// and a short human summary.
pub fn execute(cmd: &Command, grid: Option<&Path>, cfg: &Config, out_dir: &Path) -> Result<(RunManifest, String), CliError> {
    let command = canonical(cmd)?;
    let grid = grid.map(absolute).transpose()?;
    let mut ctx = Ctx { cfg, out: Outputs::create(out_dir)?, inputs: BTreeMap::new(), grid_digests: BTreeMap::new(), clock_models: Vec::new() };
    let need_grid = || grid.as_deref().ok_or_else(|| CliError::Input("this command needs --grid".into()));
    let summary = match &command {
        Command::TrainGrid => train_grid(&mut ctx)?,
        Command::Simulate => simulate(&mut ctx)?,
        Command::SyncClocks { log, sensors } => sync_clocks(&mut ctx, log, sensors.as_deref())?,
        Command::Localize { log, clocks, method } => localize(&mut ctx, need_grid()?, log, clocks.as_deref(), *method)?,
        Command::SweepK => sweep_k_cmd(&mut ctx)?,
        Command::SweepNoise => sweep_noise_cmd(&mut ctx)?,
        Command::GdopMap { geojson } => gdop_map_cmd(&mut ctx, grid.as_deref(), *geojson)?,
        Command::Coverage => coverage(&mut ctx)?,
        Command::Verify { log, clocks, ground_grid } => verify(&mut ctx, need_grid()?, log, clocks.as_deref(), ground_grid.as_deref())?,
        Command::Replay { .. } => return Err(CliError::Input("replay cannot be nested".into())),
    };
    let manifest = RunManifest {
        tool: "gridloc".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command,
        grid,
        config: cfg.clone(),
        seed: cfg.seed,
        inputs: ctx.inputs,
        outputs: ctx.out.files.clone(),
        grid_digests: ctx.grid_digests,
        clock_models: ctx.clock_models,
    };
    fs::write(out_dir.join(MANIFEST_FILE), manifest.to_json()).map_err(|e| CliError::io(out_dir, e))?;
    Ok((manifest, summary))
}

/// Re-runs the command recorded in `manifest_path` into `out_dir` and checks
/// that every output digest matches.
pub fn replay(manifest_path: &Path, out_dir: &Path) -> Result<String, CliError> {
    let m = RunManifest::load(manifest_path)?;
    if m.version != env!("CARGO_PKG_VERSION") {
        return Err(CliError::Manifest(format!("written by version {}, this is {}", m.version, env!("CARGO_PKG_VERSION"))));
    }
    for (path, digest) in &m.inputs {
        if &file_digest(path)? != digest {
            return Err(CliError::InputChanged(path.clone()));
        }
    }
    m.config.validate()?;
    let (again, _) = execute(&m.command, m.grid.as_deref(), &m.config, out_dir)?;
    let mut differ: Vec<String> = m.outputs.iter().filter(|(name, d)| again.outputs.get(*name) != Some(*d)).map(|(name, _)| name.clone()).collect();
    differ.extend(again.outputs.keys().filter(|k| !m.outputs.contains_key(*k)).cloned());
    if !differ.is_empty() {
        return Err(CliError::ReplayMismatch(differ));
    }
    Ok(format!("replay reproduced {} outputs in {}", m.outputs.len(), out_dir.display()))
}

fn deployment(cfg: &Config) -> Result<SensorSet, CliError> {
    match &cfg.sensors {
        Some(list) => SensorSet::new(list.clone()).map_err(|e| CliError::Config(e.to_string())),
        None => {
            let s = &cfg.scenario;
            Ok(random_deployment(&s.region(), s.sensor_count, s.sensor_alt_range_m, &mut stream_rng(cfg.seed, STREAM_SENSORS))?)
        }
    }
}

fn grid_spec(cfg: &Config, altitude_m: f64) -> GridSpec {
    cfg.scenario.region().grid_spec(altitude_m, cfg.grid.square_side_m)
}

fn train_grid(ctx: &mut Ctx) -> Result<String, CliError> {
    let sensors = deployment(ctx.cfg)?;
    let grid = build_grid(&grid_spec(ctx.cfg, ctx.cfg.grid.altitude_m), &sensors, &PropagationModel::default())?;
    let path = ctx.out.path("grid.bin");
    let sha = save_grid(&grid, &path)?;
    ctx.out.record("grid.bin")?;
    ctx.out.record("grid.bin.json")?;
    ctx.grid_digests.insert("grid.bin".into(), sha);
    ctx.out.write("sensors.json", &json_bytes(sensors.sensors()))?;
    let (rows, cols) = grid.dims();
    Ok(format!("trained {} subset tables over {rows}x{cols} cells", grid.tables().len()))
}

fn flight_hex(base: u32, i: usize) -> String {
    format!("{:06x}", (base + i as u32) & 0xff_ffff)
}

fn simulate(ctx: &mut Ctx) -> Result<String, CliError> {
    let cfg = ctx.cfg;
    let sim = &cfg.simulate;
    let region = cfg.scenario.region();
    let mut sensors = deployment(cfg)?;
    if sim.max_clock_offset_s > 0.0 || sim.max_clock_drift_sps > 0.0 {
        let noisy = randomize_clocks(&sensors, sim.max_clock_offset_s, sim.max_clock_drift_sps, &mut stream_rng(cfg.seed, STREAM_CLOCKS));
        // The reference sensor keeps a perfect clock.
        let reference = reference_id(cfg, &sensors)?;
        let fixed: Vec<Sensor> = noisy
            .iter()
            .map(|s| if s.id == reference { Sensor { clock_offset_s: 0.0, clock_drift_sps: 0.0, ..s.clone() } } else { s.clone() })
            .collect();
        sensors = SensorSet::new(fixed).expect("ids unchanged");
    }
    let model = PropagationModel::default();
    let n = sim.messages_per_flight;
    let mut records = Vec::new();
    let mut tracks = Vec::new();
    let emit = |id: &str, claims: &[GeoPosition], truths: &[GeoPosition], times: &[f64], seed: u64, records: &mut Vec<MessageRecord>| {
        let mut noise = stream_rng(seed, STREAM_NOISE);
        let keep = message_loss(claims.len(), sim.loss_probability, &mut stream_rng(seed, STREAM_LOSS));
        for (j, ((claim, truth), t)) in claims.iter().zip(truths).zip(times).enumerate() {
            let rx = arrivals_for(truth, *t, &sensors, &model, cfg.scenario.los_range_m);
            let rx = distort_clocks(&add_noise(&rx, cfg.scenario.noise_std_s, &mut noise), &sensors);
            if !keep[j] || rx.is_empty() {
                continue;
            }
            records.push(MessageRecord {
                flight_id: id.to_string(),
                msg_id: j as u64,
                claim: Some(*claim),
                receptions: rx,
                truth: Some(*truth),
                emit_time_s: Some(*t),
            });
        }
    };
    for i in 0..sim.flights {
        let seed = derive_seed(cfg.seed, i as u64);
        let id = flight_hex(0x40_0000, i);
        let f = generate_flight(&id, &region, n, cfg.scenario.emitter_alt_range_m, i as f64 * 30.0, &mut stream_rng(seed, STREAM_EMITTERS));
        emit(&id, &f.positions, &f.positions, &f.times_s, seed, &mut records);
        tracks.push(vec![id, "legitimate".into(), String::new(), String::new()]);
    }
    for i in 0..sim.attackers {
        let seed = derive_seed(cfg.seed, (1 << 32) + i as u64);
        let id = flight_hex(0xa0_0000, i);
        let victim = generate_flight(&id, &region, n, cfg.scenario.emitter_alt_range_m, i as f64 * 30.0, &mut stream_rng(seed, STREAM_EMITTERS));
        let spec = AttackerSpec { message_count: n, ..AttackerSpec::new(sim.attacker_kind, seed) };
        let track = generate_attacker_track(&spec, &victim.positions, &region)?;
        emit(&id, &track.claims, &track.truths, &victim.times_s, seed, &mut records);
        let kind = serde_json::to_value(sim.attacker_kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        tracks.push(vec![id, "attacker".into(), kind, opt(track.divergence_deg)]);
    }
    let (name, format) = match sim.format {
        LogFormatChoice::Csv => ("log.csv", LogFormat::Csv),
        LogFormatChoice::Jsonl => ("log.jsonl", LogFormat::Jsonl),
    };
    let mut buf = Vec::new();
    write_log(&mut buf, format, &records).map_err(|e| CliError::io(&ctx.out.path(name), e))?;
    ctx.out.write(name, &buf)?;
    ctx.out.write("sensors.json", &json_bytes(sensors.sensors()))?;
    ctx.out.write("tracks.csv", &csv_bytes(&["flight_id", "role", "attacker_kind", "divergence_deg"], tracks))?;
    Ok(format!("simulated {} messages from {} tracks", records.len(), sim.flights + sim.attackers))
}

fn reference_id(cfg: &Config, sensors: &SensorSet) -> Result<SensorId, CliError> {
    match &cfg.sync.reference_sensor {
        Some(id) => {
            let id = SensorId::new(id.as_str()).map_err(|e| CliError::Config(e.to_string()))?;
            sensors.get(&id).map(|s| s.id.clone()).ok_or_else(|| CliError::Config(format!("reference sensor {id} is not deployed")))
        }
        None => Ok(sensors.sensors()[0].id.clone()),
    }
}

fn read_sensors(ctx: &mut Ctx, path: Option<&Path>) -> Result<SensorSet, CliError> {
    let Some(path) = path else { return deployment(ctx.cfg) };
    ctx.input(path)?;
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct IngestSummary {
    records: usize,
    malformed: usize,
    /// First few rejected lines, for diagnosis.
    examples: Vec<String>,
}

fn ingest_summary(log: &Ingested) -> IngestSummary {
    IngestSummary {
        records: log.records.len(),
        malformed: log.malformed.len(),
        examples: log.malformed.iter().take(10).map(|e| format!("line {}: {}", e.line, e.error)).collect(),
    }
}

fn sync_clocks(ctx: &mut Ctx, log_path: &Path, sensors_path: Option<&Path>) -> Result<String, CliError> {
    let sensors = read_sensors(ctx, sensors_path)?;
    let log = ctx.ingest(log_path)?;
    let reference = reference_id(ctx.cfg, &sensors)?;
    let ref_pos = sensors.get(&reference).expect("reference is deployed").position;
    let mut obs: BTreeMap<SensorId, Vec<ClockObservation>> = BTreeMap::new();
    let trusted = |id: &str| ctx.cfg.sync.calibration_flights.as_ref().is_none_or(|l| l.iter().any(|f| f == id));
    for r in log.records.iter().filter(|r| trusted(&r.flight_id)) {
        let (Some(claim), Some(anchor)) = (r.claim, r.receptions.iter().find(|x| x.sensor == reference)) else { continue };
        for rx in r.receptions.iter().filter(|x| x.sensor != reference && sensors.get(&x.sensor).is_some()) {
            obs.entry(rx.sensor.clone()).or_default().push(ClockObservation {
                claimed_position: claim,
                raw_timestamp_s: rx.timestamp_s,
                anchor: TimeAnchor::Reference { position: ref_pos, timestamp_s: anchor.timestamp_s },
            });
        }
    }
    let others: Vec<Sensor> = sensors.iter().filter(|s| s.id != reference).cloned().collect();
    let table = fit_windowed(&others, &obs, ctx.cfg.sync.window_s, &PropagationModel::default())?;
    ctx.clock_models = table.models().cloned().collect();
    ctx.out.write("clocks.json", &json_bytes(&table))?;
    let summary = json!({ "reference_sensor": reference, "models": table.len(), "ingest": ingest_summary(&log) });
    ctx.out.write("sync_summary.json", &json_bytes(&summary))?;
    Ok(format!("fitted {} clock models against {reference}", table.len()))
}

fn fingerprints(records: &[MessageRecord], clocks: &ClockTable) -> Vec<Vec<Reception>> {
    records.iter().map(|r| clocks.correct_all(&r.receptions)).collect()
}

#[derive(Serialize)]
struct MethodStats {
    located: usize,
    failed: usize,
    vs_claim: Option<ErrorStats>,
    vs_truth: Option<ErrorStats>,
}

fn method_stats(records: &[MessageRecord], est: &[Option<GeoPosition>]) -> MethodStats {
    let errs = |pick: fn(&MessageRecord) -> Option<GeoPosition>| {
        let v: Vec<f64> = records.iter().zip(est).filter_map(|(r, e)| Some(horizontal_distance(&(*e)?, &pick(r)?))).collect();
        ErrorStats::from_errors(&v)
    };
    let located = est.iter().flatten().count();
    MethodStats { located, failed: est.len() - located, vs_claim: errs(|r| r.claim), vs_truth: errs(|r| r.truth) }
}

fn localize(ctx: &mut Ctx, grid_path: &Path, log_path: &Path, clocks: Option<&Path>, method: MethodChoice) -> Result<String, CliError> {
    let grid = ctx.load_grid(grid_path)?;
    let log = ctx.ingest(log_path)?;
    let clocks = ctx.clocks(clocks)?;
    let rx = fingerprints(&log.records, &clocks);
    let knn: Vec<BatchOutcome> =
        if method == MethodChoice::Mlat { Vec::new() } else { localize_batch(&rx, &grid, &ctx.cfg.knn) };
    let mlat: Vec<Option<MlatSolution>> = if method == MethodChoice::Knn {
        Vec::new()
    } else {
        use rayon::prelude::*;
        rx.par_iter()
            .map(|m| measured_fingerprint(m).ok().and_then(|fp| mlat_solve(&fp, grid.sensors(), grid.spec().altitude_m).ok()))
            .collect()
    };
    let header = [
        "flight_id",
        "msg_id",
        "method",
        "status",
        "lat_deg",
        "lon_deg",
        "alt_m",
        "subset",
        "neighbor_spread_m",
        "gdop",
        "error_vs_claim_m",
        "error_vs_truth_m",
    ];
    let mut rows = Vec::new();
    let err_to = |p: &GeoPosition, q: Option<GeoPosition>| opt(q.map(|q| horizontal_distance(p, &q)));
    for (i, r) in log.records.iter().enumerate() {
        if let Some(o) = knn.get(i) {
            let (status, e): (&str, Option<&LocationEstimate>) = match o {
                BatchOutcome::Located(e) => ("located", Some(e)),
                BatchOutcome::Unlocatable { .. } => ("unlocatable", None),
                BatchOutcome::Failed(_) => ("failed", None),
            };
            rows.push(match e {
                Some(e) => vec![
                    r.flight_id.clone(),
                    r.msg_id.to_string(),
                    "knn".into(),
                    status.into(),
                    num(e.position.latitude_deg),
                    num(e.position.longitude_deg),
                    num(e.position.altitude_m),
                    e.subset_key.to_string(),
                    num(e.neighbor_spread_m),
                    String::new(),
                    err_to(&e.position, r.claim),
                    err_to(&e.position, r.truth),
                ],
                None => row_without_position(r, "knn", status),
            });
        }
        if let Some(s) = mlat.get(i) {
            rows.push(match s {
                Some(s) => vec![
                    r.flight_id.clone(),
                    r.msg_id.to_string(),
                    "mlat".into(),
                    "located".into(),
                    num(s.position.latitude_deg),
                    num(s.position.longitude_deg),
                    num(s.position.altitude_m),
                    grid.sensors().key().to_string(),
                    String::new(),
                    num(s.gdop),
                    err_to(&s.position, r.claim),
                    err_to(&s.position, r.truth),
                ],
                None => row_without_position(r, "mlat", "failed"),
            });
        }
    }
    ctx.out.write("estimates.csv", &csv_bytes(&header, rows))?;
    let mut stats = BTreeMap::new();
    if !knn.is_empty() {
        let est: Vec<Option<GeoPosition>> = knn.iter().map(|o| o.estimate().map(|e| e.position)).collect();
        stats.insert("knn", method_stats(&log.records, &est));
    }
    if !mlat.is_empty() {
        let est: Vec<Option<GeoPosition>> = mlat.iter().map(|s| s.as_ref().map(|s| s.position)).collect();
        stats.insert("mlat", method_stats(&log.records, &est));
    }
    ctx.out.write("stats.json", &json_bytes(&json!({ "ingest": ingest_summary(&log), "methods": stats })))?;
    Ok(format!("localized {} messages ({} malformed lines skipped)", log.records.len(), log.malformed.len()))
}

fn row_without_position(r: &MessageRecord, method: &str, status: &str) -> Vec<String> {
    let mut row = vec![r.flight_id.clone(), r.msg_id.to_string(), method.into(), status.into()];
    row.resize(12, String::new());
    row
}

fn stats_cells(s: Option<&ErrorStats>) -> Vec<String> {
    match s {
        Some(s) => vec![s.count.to_string(), num(s.mean), num(s.median), num(s.p90), num(s.max)],
        None => vec!["0".into(), String::new(), String::new(), String::new(), String::new()],
    }
}

fn sweep_k_cmd(ctx: &mut Ctx) -> Result<String, CliError> {
    let cfg = ctx.cfg;
    let spec = gridloc::sim::ScenarioSpec { rng_seed: cfg.seed, ..cfg.scenario };
    let scenario = generate_scenario(&spec)?;
    let truths: Vec<GeoPosition> = scenario.emissions.iter().map(|e| e.position).collect();
    let rx = scenario.noisy_arrivals();
    let mut rows = Vec::new();
    for &side in &cfg.sweep.square_sides_m {
        let grid = build_grid(&spec.region().grid_spec(cfg.grid.altitude_m, side), &scenario.sensors, &PropagationModel::default())?;
        for (k, s) in sweep_k(&grid, &truths, &rx, &cfg.sweep.ks, &cfg.knn) {
            let mut row = vec![num(side), k.to_string()];
            row.extend(stats_cells(s.as_ref()));
            rows.push(row);
        }
    }
    let n = rows.len();
    ctx.out.write("sweep_k.csv", &csv_bytes(&["square_side_m", "k", "count", "mean_m", "median_m", "p90_m", "max_m"], rows))?;
    Ok(format!("{n} (side, k) combinations"))
}

fn sweep_noise_cmd(ctx: &mut Ctx) -> Result<String, CliError> {
    let cfg = ctx.cfg;
    let sweep = NoiseSweepConfig {
        scenario: cfg.scenario,
        noise_levels_s: cfg.sweep.noise_levels_s.clone(),
        deployments: cfg.sweep.deployments,
        square_side_m: cfg.grid.square_side_m,
        grid_altitude_m: cfg.grid.altitude_m,
        knn: cfg.knn,
        seed: cfg.seed,
    };
    let res = sweep_noise(&sweep)?;
    let mut rows = Vec::new();
    let mut buckets = Vec::new();
    for lvl in &res {
        for (method, errs) in [
            ("knn", lvl.trials.iter().filter_map(|t| t.knn_error_m).collect::<Vec<f64>>()),
            ("mlat", lvl.trials.iter().filter_map(|t| t.mlat_error_m).collect()),
        ] {
            let mut row = vec![num(lvl.noise_std_s), method.into(), lvl.trials.len().to_string()];
            row.extend(stats_cells(ErrorStats::from_errors(&errs).as_ref()));
            rows.push(row);
        }
        for (i, (k, m, n)) in bucket_medians(&lvl.trials, |t| t.gdop).into_iter().enumerate() {
            buckets.push(vec![num(lvl.noise_std_s), bucket_label(i), n.to_string(), opt(k), opt(m)]);
        }
    }
    ctx.out.write(
        "sweep_noise.csv",
        &csv_bytes(&["noise_std_s", "method", "messages", "located", "mean_m", "median_m", "p90_m", "max_m"], rows),
    )?;
    ctx.out.write("gdop_buckets.csv", &csv_bytes(&["noise_std_s", "gdop_bucket", "messages", "knn_median_m", "mlat_median_m"], buckets))?;
    Ok(format!("{} noise levels over {} deployments", res.len(), cfg.sweep.deployments))
}

fn gdop_map_cmd(ctx: &mut Ctx, grid_path: Option<&Path>, geojson: bool) -> Result<String, CliError> {
    let (spec, sensors) = match grid_path {
        Some(p) => {
            let g = ctx.load_grid(p)?;
            (*g.spec(), g.sensors().clone())
        }
        None => (grid_spec(ctx.cfg, ctx.cfg.grid.altitude_m), deployment(ctx.cfg)?),
    };
    spec.validate()?;
    let map = gdop_map(&spec, &sensors);
    let rows = map.iter().map(|(c, g)| vec![num(c.latitude_deg), num(c.longitude_deg), num(*g)]);
    ctx.out.write("gdop_map.csv", &csv_bytes(&["lat", "lon", "gdop"], rows))?;
    if geojson {
        let (dlat, dlon) = spec.steps_deg();
        let features: Vec<serde_json::Value> = map
            .iter()
            .map(|(c, g)| {
                let (la, lo) = (c.latitude_deg, c.longitude_deg);
                let ring = [
                    [lo - dlon / 2.0, la - dlat / 2.0],
                    [lo + dlon / 2.0, la - dlat / 2.0],
                    [lo + dlon / 2.0, la + dlat / 2.0],
                    [lo - dlon / 2.0, la + dlat / 2.0],
                    [lo - dlon / 2.0, la - dlat / 2.0],
                ];
                json!({
                    "type": "Feature",
                    "geometry": { "type": "Polygon", "coordinates": [ring] },
                    "properties": { "gdop": g.is_finite().then_some(*g) },
                })
            })
            .collect();
        ctx.out.write("gdop_map.geojson", &json_bytes(&json!({ "type": "FeatureCollection", "features": features })))?;
    }
    let usable = map.iter().filter(|(_, g)| *g < 10.0).count();
    Ok(format!("{} cells, {usable} with GDOP below 10", map.len()))
}

fn coverage(ctx: &mut Ctx) -> Result<String, CliError> {
    let cfg = ctx.cfg;
    let cov = &cfg.coverage;
    let region = cfg.scenario.region();
    let mut rng = stream_rng(cfg.seed, STREAM_SENSORS);
    let sensors = match (&cfg.sensors, cov.deployment) {
        (Some(_), _) => deployment(cfg)?,
        (None, DeploymentKind::Random) => random_deployment(&region, cov.sensor_count, cfg.scenario.sensor_alt_range_m, &mut rng)?,
        (None, DeploymentKind::Clustered) => {
            clustered_deployment(&region, cov.sensor_count, cov.cluster_radius_km * 1000.0, cfg.scenario.sensor_alt_range_m, &mut rng)?
        }
    };
    let extent = cov.extent_km * 1000.0;
    let spec = Region::new(cfg.scenario.center, extent, extent).grid_spec(cfg.grid.altitude_m, extent);
    let table = coverage_monte_carlo(&sensors, &spec, cov.gdop_threshold, cfg.scenario.los_range_m, cov.samples, cfg.seed);
    let rows = table.rows.iter().map(|r| vec![r.min_receivers.to_string(), num(r.area_fraction), num(r.message_fraction)]);
    ctx.out.write("coverage.csv", &csv_bytes(&["min_receivers", "area_fraction", "message_fraction"], rows))?;
    let ratio = table.knn_to_mlat_area_ratio();
    ctx.out.write("coverage.json", &json_bytes(&json!({ "table": table, "knn_to_mlat_area_ratio": ratio.is_finite().then_some(ratio) })))?;
    ctx.out.write("sensors.json", &json_bytes(sensors.sensors()))?;
    Ok(format!("k-NN/MLAT usable area ratio {}", num(ratio)))
}

#[derive(Serialize)]
struct FlightSummary {
    verdict: TrackVerdict,
    messages: usize,
    origin_plane: Option<gridloc::verify::Plane>,
}

fn verify(ctx: &mut Ctx, grid_path: &Path, log_path: &Path, clocks: Option<&Path>, ground_path: Option<&Path>) -> Result<String, CliError> {
    let grid = ctx.load_grid(grid_path)?;
    let log = ctx.ingest(log_path)?;
    let clocks = ctx.clocks(clocks)?;
    let cfg = ctx.cfg;
    let policy = cfg.verify.policy;
    let mut flights: BTreeMap<&str, Vec<&MessageRecord>> = BTreeMap::new();
    for r in &log.records {
        flights.entry(r.flight_id.as_str()).or_default().push(r);
    }
    for msgs in flights.values_mut() {
        msgs.sort_by_key(|r| r.msg_id);
    }
    // Trained lazily: only flagged tracks need the ground plane.
    let mut ground: Option<TrainingGrid> = None;
    let mut rows = Vec::new();
    let mut features = Vec::new();
    let mut summaries = Vec::new();
    for (id, msgs) in &flights {
        let owned: Vec<MessageRecord> = msgs.iter().map(|r| (*r).clone()).collect();
        let rx = fingerprints(&owned, &clocks);
        let est: Vec<Option<LocationEstimate>> = localize_batch(&rx, &grid, &cfg.knn).iter().map(|o| o.estimate().cloned()).collect();
        let claims: Vec<Option<GeoPosition>> = owned.iter().map(|r| r.claim).collect();
        let devs: Vec<Option<f64>> = claims
            .iter()
            .zip(&est)
            .map(|(c, e)| match (c, e) {
                (Some(c), Some(_)) => track_deviations(std::slice::from_ref(c), std::slice::from_ref(e))[0],
                _ => None,
            })
            .collect();
        let (mut verdict, vrows) = verify_track(id, &devs, &policy);
        for v in vrows {
            rows.push(vec![v.flight_id, owned[v.msg_index].msg_id.to_string(), num(v.deviation_m), v.counter.to_string(), v.state.as_str().into()]);
        }
        let mut origin_plane = None;
        if verdict.is_flagged() && cfg.verify.locate_origin {
            if ground.is_none() {
                ground = Some(match ground_path {
                    Some(p) => ctx.load_grid(p)?,
                    None => {
                        let spec = GridSpec { altitude_m: cfg.grid.ground_altitude_m, ..*grid.spec() };
                        build_grid(&spec, grid.sensors(), grid.model())?
                    }
                });
            }
            let fps: Vec<TdoaFingerprint> = rx.iter().filter_map(|m| measured_fingerprint(m).ok()).collect();
            if let Ok(o) = locate_origin(&fps, &grid, ground.as_ref().expect("trained above"), &cfg.knn) {
                features.push(json!({
                    "type": "Feature",
                    "geometry": { "type": "Point", "coordinates": [o.summary.position.longitude_deg, o.summary.position.latitude_deg] },
                    "properties": {
                        "flight_id": id,
                        "plane": o.plane,
                        "flagged_at_message": verdict.flagged_at_message,
                        "cruise_fit_s": o.cruise_fit_s,
                        "ground_fit_s": o.ground_fit_s,
                    },
                }));
                origin_plane = Some(o.plane);
                verdict.attacker_origin_estimate = Some(o.summary);
            }
        }
        summaries.push(FlightSummary { verdict, messages: owned.len(), origin_plane });
    }
    ctx.out.write("verdicts.csv", &csv_bytes(&["flight_id", "msg_id", "deviation_m", "counter", "state"], rows))?;
    ctx.out.write("origins.geojson", &json_bytes(&json!({ "type": "FeatureCollection", "features": features })))?;
    let flagged = summaries.iter().filter(|s| s.verdict.is_flagged()).count();
    ctx.out.write("verify_summary.json", &json_bytes(&json!({ "policy": policy, "ingest": ingest_summary(&log), "flights": summaries })))?;
    Ok(format!("{flagged} of {} flights flagged", flights.len()))
}
