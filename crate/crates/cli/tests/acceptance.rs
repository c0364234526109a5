//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gridloc::experiment::{bucket_label, bucket_medians, run_trials, spearman, sweep_k, sweep_noise, ErrorStats, MessageTrial, NoiseSweepConfig};
use gridloc::geo::{horizontal_distance, GeoPosition, PropagationModel};
use gridloc::grid::{build_grid, TrainingGrid};
use gridloc::knn::{localize_batch, KnnConfig, SearchStrategy};
use gridloc::mlat::{gdop, mlat_solve};
use gridloc::sim::{
    add_noise, arrivals_for, clustered_deployment, coverage_monte_carlo, derive_seed, distort_clocks, generate_attacker_track,
    generate_flight, generate_scenario, randomize_clocks, stream_rng, AttackerKind, AttackerSpec, Region, ScenarioSpec,
    DEFAULT_LOS_RANGE_M, STREAM_EMITTERS, STREAM_NOISE,
};
use gridloc::sync::{fit_clock, ClockObservation, ClockTable, TimeAnchor};
use gridloc::tdoa::{expected_fingerprint, fingerprint_distance, measured_fingerprint, subset_count, Reception, SensorSet, TdoaFingerprint};
use gridloc::verify::{calibrate_policy, locate_origin, track_deviations, verify_track, VerifyPolicy, GROUND_GRID_ALTITUDE_M};

const GRID_ALT_M: f64 = 10_500.0;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, id: &str, pass: bool, detail: String) {
        if !pass {
            self.failed += 1;
        }
        println!("[{}] {id}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn knn5() -> KnnConfig {
    KnnConfig { k: 5, min_receivers: 2, search: SearchStrategy::Pruned }
}

fn deployment(seed: u64) -> (ScenarioSpec, SensorSet) {
    let spec = ScenarioSpec { rng_seed: seed, signal_count: 1, ..ScenarioSpec::default() };
    let s = generate_scenario(&spec).expect("default scenario is valid");
    (spec, s.sensors)
}

fn train(spec: &ScenarioSpec, sensors: &SensorSet, alt: f64, side: f64) -> TrainingGrid {
    build_grid(&spec.region().grid_spec(alt, side), sensors, &PropagationModel::default()).expect("grid fits")
}

fn receive(p: &GeoPosition, t: f64, sensors: &SensorSet, noise: f64, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Reception> {
    add_noise(&arrivals_for(p, t, sensors, &PropagationModel::default(), DEFAULT_LOS_RANGE_M), noise, rng)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn c1_mlat_exact(r: &mut Report) {
    let model = PropagationModel::default();
    let (mut accepted, mut worst, mut i) = (0usize, 0.0f64, 0u64);
    let mut failures = 0usize;
    while accepted < 1000 {
        let spec = ScenarioSpec { rng_seed: derive_seed(101, i), signal_count: 1, ..ScenarioSpec::default() };
        i += 1;
        let s = generate_scenario(&spec).unwrap();
        let e = &s.emissions[0];
        if !gdop(&e.position, &s.sensors).is_ok_and(|g| g < 10.0) {
            continue;
        }
        accepted += 1;
        let fp = expected_fingerprint(&e.position, &s.sensors, &model);
        match mlat_solve(&fp, &s.sensors, GRID_ALT_M) {
            Ok(sol) => worst = worst.max(horizontal_distance(&sol.position, &e.position)),
            Err(_) => failures += 1,
        }
    }
    r.line("1 noiseless MLAT exactness", failures == 0 && worst <= 1.0, format!("{accepted} scenarios, max error {worst:.3e} m, {failures} solver failures (need <= 1 m)"));
}

fn c2_quantization(r: &mut Report) {
    let (spec, sensors) = deployment(202);
    let grid = train(&spec, &sensors, GRID_ALT_M, 150.0);
    let bound = grid.spec().max_half_diagonal_m();
    let region = spec.region();
    let mut rng = stream_rng(202, STREAM_EMITTERS);
    let truths: Vec<GeoPosition> = (0..2000)
        .map(|_| {
            let (e, n) = region.sample(&mut rng);
            region.at(e, n, GRID_ALT_M)
        })
        .filter(|p| grid.spec().contains(p))
        .collect();
    let rx: Vec<Vec<Reception>> = truths.iter().map(|p| receive(p, 0.0, &sensors, 0.0, &mut rng)).collect();
    let cfg1 = KnnConfig { k: 1, ..knn5() };
    let trials = run_trials(&grid, &truths, &rx, &cfg1, false);
    let errs: Vec<f64> = trials.iter().filter_map(|t| t.knn_error_m).collect();
    let within = errs.iter().filter(|&&e| e <= bound).count();
    let worst = errs.iter().copied().fold(0.0, f64::max);
    r.line(
        "2a k=1 noiseless quantization bound",
        within == truths.len(),
        format!("{within}/{} within half diagonal {bound:.1} m (max {worst:.1} m)", truths.len()),
    );
    // Not a criterion: independent brute-force nearest-fingerprint oracle on a sample.
    let model = PropagationModel::default();
    let agree = truths
        .iter()
        .zip(&trials)
        .take(50)
        .filter(|(p, t)| {
            let fp = expected_fingerprint(p, &sensors, &model);
            let best = grid
                .centers()
                .iter()
                .map(|c| fingerprint_distance(&fp, &expected_fingerprint(c, &sensors, &model)).unwrap())
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            t.knn_error_m.is_some_and(|e| (e - horizontal_distance(&grid.centers()[best.0], p)).abs() < 1e-6)
        })
        .count();
    println!("[INFO] 2a k=1 matches brute-force nearest fingerprint for {agree}/50 sampled points");

    let s = generate_scenario(&ScenarioSpec { rng_seed: 202, signal_count: 2000, ..ScenarioSpec::default() }).unwrap();
    let truths: Vec<GeoPosition> = s.emissions.iter().map(|e| e.position).collect();
    let mut nrng = stream_rng(202, STREAM_NOISE);
    let rx: Vec<Vec<Reception>> = s.emissions.iter().map(|e| add_noise(&e.arrivals, 1e-7, &mut nrng)).collect();
    let res = sweep_k(&grid, &truths, &rx, &[1, 5], &knn5());
    let m1 = res[0].1.as_ref().unwrap().mean;
    let m5 = res[1].1.as_ref().unwrap().mean;
    r.line("2b k=5 beats k=1 under 1e-7 s noise", m5 <= m1, format!("mean error k=1 {m1:.1} m, k=5 {m5:.1} m"));
}

fn c3_refinement(r: &mut Report) {
    let s = generate_scenario(&ScenarioSpec { rng_seed: 303, signal_count: 10_000, ..ScenarioSpec::default() }).unwrap();
    let mut nrng = stream_rng(303, STREAM_NOISE);
    let rx: Vec<Vec<Reception>> = s.emissions.iter().map(|e| add_noise(&e.arrivals, 5e-8, &mut nrng)).collect();
    let cfg = KnnConfig { search: SearchStrategy::Linear, ..knn5() };
    let mut rows = Vec::new();
    for side in [600.0, 300.0, 150.0] {
        let t = Instant::now();
        let grid = train(&s.spec, &s.sensors, GRID_ALT_M, side);
        let out = localize_batch(&rx, &grid, &cfg);
        let secs = t.elapsed().as_secs_f64();
        let errs: Vec<f64> = out
            .iter()
            .zip(&s.emissions)
            .filter_map(|(o, e)| o.estimate().map(|est| horizontal_distance(&est.position, &e.position)))
            .collect();
        rows.push((side, mean(&errs), secs));
    }
    let decreasing = rows.windows(2).all(|w| w[1].1 < w[0].1);
    let ratios: Vec<f64> = rows.windows(2).map(|w| w[1].2 / w[0].2).collect();
    let scaling = ratios.iter().all(|q| (2.0..=6.0).contains(q));
    let sane = rows.iter().all(|row| (30.0..=500.0).contains(&row.1));
    let detail = rows.iter().map(|(s, m, t)| format!("{s} m: mean {m:.1} m in {t:.2} s")).collect::<Vec<_>>().join("; ");
    r.line("3a mean error strictly decreases with refinement", decreasing, detail.clone());
    r.line("3b compute time ~4x per halving (+-50%)", scaling, format!("time ratios {ratios:.2?}"));
    r.line("3c k-NN means within [30, 500] m", sane, detail);
}

fn c4_c5_noise(r: &mut Report) {
    let cfg = NoiseSweepConfig {
        scenario: ScenarioSpec { signal_count: 100, ..ScenarioSpec::default() },
        noise_levels_s: NoiseSweepConfig::half_decades(),
        deployments: 100,
        square_side_m: 150.0,
        grid_altitude_m: GRID_ALT_M,
        knn: knn5(),
        seed: 404,
    };
    let res = sweep_noise(&cfg).expect("sweep runs");
    let medians: Vec<(f64, f64, f64)> = res
        .iter()
        .map(|lvl| {
            let k: Vec<f64> = lvl.trials.iter().filter_map(|t| t.knn_error_m).collect();
            let m: Vec<f64> = lvl.trials.iter().filter_map(|t| t.mlat_error_m).collect();
            (lvl.noise_std_s, ErrorStats::from_errors(&k).unwrap().median, ErrorStats::from_errors(&m).unwrap().median)
        })
        .collect();
    // First level at which k-NN beats MLAT; it must stay ahead from there on.
    let first_knn = medians.iter().position(|&(_, k, m)| k < m);
    let stays_ahead = first_knn.is_some_and(|i| medians[i..].iter().all(|&(_, k, m)| k < m));
    let ahead_from_1e7 = medians.iter().filter(|row| row.0 >= 1e-7 * (1.0 - 1e-9)).all(|&(_, k, m)| k < m);
    let mlat_ahead_at_start = medians[0].2 < medians[0].1;
    let crossover = first_knn.map(|i| medians[i].0);
    // Expected crossover near 10^-7.5 s; allow one half-decade either side.
    let in_band = crossover.is_some_and(|c| c <= 1e-7 * (1.0 + 1e-9) && c >= 10f64.powf(-8.0) * (1.0 - 1e-9));
    let detail = medians.iter().map(|(n, k, m)| format!("{n:.2e}: knn {k:.1} mlat {m:.1}")).collect::<Vec<_>>().join("; ");
    r.line(
        "4 noise crossover at <= 1e-7 s, k-NN better from 1e-7 s",
        mlat_ahead_at_start && stays_ahead && ahead_from_1e7 && in_band,
        format!("crossover at {} s; {detail}", crossover.map_or("none".into(), |c| format!("{c:.2e}"))),
    );

    let lvl = res.iter().find(|l| (l.noise_std_s / 1e-7 - 1.0).abs() < 1e-9).expect("1e-7 level present");
    let describe = |b: &[(Option<f64>, Option<f64>, usize)]| {
        b.iter()
            .enumerate()
            .map(|(i, (k, m, n))| format!("{} n={n} knn {} mlat {}", bucket_label(i), fmt_opt(*k), fmt_opt(*m)))
            .collect::<Vec<_>>()
            .join("; ")
    };
    let buckets = bucket_medians(&lvl.trials, |t| t.gdop);
    let mlat: Vec<Option<f64>> = buckets.iter().map(|b| b.1).collect();
    let mlat_increasing = mlat.iter().all(Option::is_some) && mlat.windows(2).all(|w| w[1] > w[0]);
    let knn: Vec<f64> = buckets.iter().filter_map(|b| b.0).collect();
    let kmax = knn.iter().copied().fold(0.0, f64::max);
    let kmin = knn.iter().copied().fold(f64::INFINITY, f64::min);
    let knn_flat = knn.len() == buckets.len() && kmax < 2.0 * kmin;
    r.line("5a MLAT bucket medians strictly increase with GDOP", mlat_increasing, describe(&buckets));
    r.line("5b k-NN bucket medians within 2x", knn_flat, format!("max/min {:.2}", kmax / kmin));
    // Not a criterion: the same split using the three-dimensional dilution.
    let b3 = bucket_medians(&lvl.trials, |t| t.gdop_3d);
    println!("[INFO] 5 with 3-D GDOP buckets: {}", describe(&b3));
    let rho = |dilution: fn(&MessageTrial) -> f64, error: fn(&MessageTrial) -> Option<f64>| {
        let (g, e): (Vec<f64>, Vec<f64>) =
            lvl.trials.iter().filter_map(|t| Some((dilution(t), error(t)?))).filter(|(g, _)| g.is_finite()).unzip();
        spearman(&g, &e).map_or("-".into(), |v| format!("{v:.2}"))
    };
    println!(
        "[INFO] 5 Spearman error vs GDOP at 1e-7 s: 2-D knn {} mlat {}; 3-D knn {} mlat {}",
        rho(|t| t.gdop, |t| t.knn_error_m),
        rho(|t| t.gdop, |t| t.mlat_error_m),
        rho(|t| t.gdop_3d, |t| t.knn_error_m),
        rho(|t| t.gdop_3d, |t| t.mlat_error_m),
    );
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.1}"))
}

fn c6_coverage(r: &mut Report) {
    let center = GeoPosition { latitude_deg: 50.0, longitude_deg: 8.0, altitude_m: 0.0 };
    let region = Region::new(center, 200_000.0, 200_000.0);
    let sensors = clustered_deployment(&region, 8, 60_000.0, (0.0, 1000.0), &mut stream_rng(606, 0)).unwrap();
    // Box comfortably larger than the union of line-of-sight circles.
    let spec = Region::new(center, 1_000_000.0, 1_000_000.0).grid_spec(GRID_ALT_M, 10_000.0);
    let ratios: Vec<f64> =
        (0..3).map(|seed| coverage_monte_carlo(&sensors, &spec, 10.0, DEFAULT_LOS_RANGE_M, 100_000, 6060 + seed).knn_to_mlat_area_ratio()).collect();
    let m = mean(&ratios);
    let stable = ratios.iter().all(|q| (q / m - 1.0).abs() <= 0.05);
    r.line("6 coverage ratio >= 2.0, stable +-5% over seeds", ratios.iter().all(|&q| q >= 2.0) && stable, format!("ratios {ratios:.3?}"));
}

struct VerifyWorld {
    sensors: SensorSet,
    region: Region,
    cruise: TrainingGrid,
    ground: TrainingGrid,
}

const VERIFY_NOISE_S: f64 = 5e-8;
const CRUISE_ALT_M: (f64, f64) = (10_000.0, 11_000.0);

fn legit_deviations(w: &VerifyWorld, seed: u64, n: usize, alt: (f64, f64)) -> Vec<Vec<Option<f64>>> {
    (0..n as u64)
        .map(|i| {
            let mut rng = stream_rng(derive_seed(seed, i), STREAM_EMITTERS);
            let f = generate_flight("legit", &w.region, 200, alt, 0.0, &mut rng);
            let mut nrng = stream_rng(derive_seed(seed, i), STREAM_NOISE);
            let rx: Vec<Vec<Reception>> = f.positions.iter().zip(&f.times_s).map(|(p, t)| receive(p, *t, &w.sensors, VERIFY_NOISE_S, &mut nrng)).collect();
            let est: Vec<_> = localize_batch(&rx, &w.cruise, &knn5()).iter().map(|o| o.estimate().cloned()).collect();
            track_deviations(&f.positions, &est)
        })
        .collect()
}

fn c7_verification(r: &mut Report) {
    let (spec, sensors) = deployment(707);
    let region = spec.region();
    let w = VerifyWorld {
        cruise: train(&spec, &sensors, GRID_ALT_M, 150.0),
        ground: train(&spec, &sensors, GROUND_GRID_ALTITUDE_M, 150.0),
        sensors,
        region,
    };
    let legit = |alt: (f64, f64)| {
        let calib = calibrate_policy(&legit_deviations(&w, 7000, 100, alt), &[500.0, 750.0], 0.0, 200).expect("feasible");
        let windows: Vec<String> = calib.candidates.iter().map(|(t, win)| format!("{t} m -> {win:?}")).collect();
        let fits = calib.candidates.iter().all(|&(t, win)| {
            let preset = if t == 500.0 { VerifyPolicy::STRICT } else { VerifyPolicy::FAST };
            win.is_some_and(|win| win <= preset.window_len)
        });
        let test = legit_deviations(&w, 7100, 100, alt);
        let fps: Vec<usize> = [VerifyPolicy::STRICT, VerifyPolicy::FAST]
            .iter()
            .map(|p| test.iter().filter(|d| verify_track("legit", d, p).0.is_flagged()).count())
            .collect();
        (fits && fps == [0, 0], format!("calibrated minimal windows [{}]; false positives 500 m/15: {}, 750 m/9: {}", windows.join(", "), fps[0], fps[1]))
    };
    let (pass, detail) = legit(CRUISE_ALT_M);
    r.line("7a zero false positives on 100 legit tracks", pass, detail);
    // Not a criterion: the same flights flown exactly on the grid plane.
    println!("[INFO] 7a with legit flights at grid altitude: {}", legit((GRID_ALT_M, GRID_ALT_M)).1);

    let mut exact = [0usize; 2];
    let mut knn_origin = Vec::new();
    let mut mlat_origin = Vec::new();
    let mut diverging_flag_at = Vec::new();
    for i in 0..1000u64 {
        let seed = derive_seed(7200, i);
        let victim = generate_flight("victim", &w.region, 200, CRUISE_ALT_M, 0.0, &mut stream_rng(seed, STREAM_EMITTERS));
        for kind in [AttackerKind::GroundMobile, AttackerKind::DivergingAircraft] {
            let track = generate_attacker_track(&AttackerSpec::new(kind, seed), &victim.positions, &w.region).unwrap();
            let mut nrng = stream_rng(seed, STREAM_NOISE + 16);
            let rx: Vec<Vec<Reception>> =
                track.truths.iter().zip(&victim.times_s).map(|(p, t)| receive(p, *t, &w.sensors, VERIFY_NOISE_S, &mut nrng)).collect();
            let est: Vec<_> = localize_batch(&rx, &w.cruise, &knn5()).iter().map(|o| o.estimate().cloned()).collect();
            let devs = track_deviations(&track.claims, &est);
            match kind {
                AttackerKind::GroundMobile => {
                    for (slot, p) in [VerifyPolicy::STRICT, VerifyPolicy::FAST].iter().enumerate() {
                        if verify_track("attack", &devs, p).0.flagged_at_message == Some(p.window_len) {
                            exact[slot] += 1;
                        }
                    }
                    let truth = centroid(&track.truths);
                    let fps: Vec<TdoaFingerprint> = rx.iter().filter_map(|m| measured_fingerprint(m).ok()).collect();
                    if let Ok(o) = locate_origin(&fps, &w.cruise, &w.ground, &knn5()) {
                        knn_origin.push(horizontal_distance(&o.summary.position, &truth));
                    }
                    let fixes: Vec<GeoPosition> = fps.iter().filter_map(|fp| mlat_solve(fp, &w.sensors, GROUND_GRID_ALTITUDE_M).ok()).map(|s| s.position).collect();
                    if !fixes.is_empty() {
                        mlat_origin.push(horizontal_distance(&centroid(&fixes), &truth));
                    }
                }
                AttackerKind::DivergingAircraft => {
                    let v = verify_track("attack", &devs, &VerifyPolicy::STRICT).0;
                    diverging_flag_at.push(v.flagged_at_message.map_or(f64::INFINITY, |m| m as f64));
                }
            }
        }
    }
    r.line(
        "7b GroundMobile flagged at exactly window_len",
        exact == [1000, 1000],
        format!("500 m/15: {}/1000, 750 m/9: {}/1000", exact[0], exact[1]),
    );
    diverging_flag_at.sort_by(f64::total_cmp);
    // Unflagged attacks sort last as infinity.
    let n = diverging_flag_at.len();
    let med = (diverging_flag_at[n / 2] + diverging_flag_at[(n - 1) / 2]) / 2.0;
    let unflagged = diverging_flag_at.iter().filter(|v| v.is_infinite()).count();
    r.line("7c DivergingAircraft median flag < 40 messages", med < 40.0, format!("median {med:.1} messages, {unflagged} never flagged"));
    let km = mean(&knn_origin) / 1000.0;
    let mm = mean(&mlat_origin) / 1000.0;
    r.line(
        "7d GroundMobile origin <= 5 km and >= 5x better than MLAT",
        knn_origin.len() == 1000 && km <= 5.0 && mm >= 5.0 * km,
        format!("k-NN mean {km:.3} km over {} attacks, MLAT mean {mm:.3} km over {}", knn_origin.len(), mlat_origin.len()),
    );
}

fn centroid(ps: &[GeoPosition]) -> GeoPosition {
    let n = ps.len() as f64;
    GeoPosition {
        latitude_deg: ps.iter().map(|p| p.latitude_deg).sum::<f64>() / n,
        longitude_deg: ps.iter().map(|p| p.longitude_deg).sum::<f64>() / n,
        altitude_m: ps.iter().map(|p| p.altitude_m).sum::<f64>() / n,
    }
}

fn c8_sync(r: &mut Report) {
    let model = PropagationModel::default();
    for (label, noise, limit) in [("noiseless", 0.0, 1e-9), ("50 ns noise", 5e-8, 1e-7)] {
        let s = generate_scenario(&ScenarioSpec { rng_seed: 808, signal_count: 1000, ..ScenarioSpec::default() }).unwrap();
        let mut clocks = randomize_clocks(&s.sensors, 1e-3, 1e-6, &mut stream_rng(808, 5));
        // The first sensor is the trusted time reference.
        let reference = clocks.sensors()[0].clone();
        clocks = SensorSet::new(
            clocks
                .iter()
                .map(|x| if x.id == reference.id { gridloc::tdoa::Sensor { clock_offset_s: 0.0, clock_drift_sps: 0.0, ..x.clone() } } else { x.clone() })
                .collect(),
        )
        .unwrap();
        let mut nrng = stream_rng(808, STREAM_NOISE);
        let raw: Vec<Vec<Reception>> = s.emissions.iter().map(|e| add_noise(&distort_clocks(&e.arrivals, &clocks), noise, &mut nrng)).collect();
        // First half calibrates, second half is corrected and scored.
        let (cal, test) = s.emissions.split_at(500);
        let mut table = ClockTable::new();
        for sensor in clocks.iter().filter(|x| x.id != reference.id) {
            let obs: Vec<ClockObservation> = cal
                .iter()
                .zip(&raw)
                .filter_map(|(e, rx)| {
                    let own = rx.iter().find(|x| x.sensor == sensor.id)?;
                    let rf = rx.iter().find(|x| x.sensor == reference.id)?;
                    Some(ClockObservation {
                        claimed_position: e.position,
                        raw_timestamp_s: own.timestamp_s,
                        anchor: TimeAnchor::Reference { position: reference.position, timestamp_s: rf.timestamp_s },
                    })
                })
                .collect();
            table.insert(fit_clock(sensor, &obs).expect("fit succeeds"));
        }
        let mut sq = Vec::new();
        for (e, rx) in test.iter().zip(&raw[500..]) {
            let fp = measured_fingerprint(&table.correct_all(rx)).unwrap();
            let truth = expected_fingerprint(&e.position, &s.sensors, &model);
            sq.extend(fp.tdoas_s.iter().zip(&truth.tdoas_s).map(|(a, b)| (a - b) * (a - b)));
        }
        let rms = mean(&sq).sqrt();
        r.line(&format!("8 sync recovery ({label})"), rms <= limit, format!("fingerprint RMS {rms:.3e} s (limit {limit:.0e} s)"));
    }
}

fn c9_structure(r: &mut Report) {
    let (spec, sensors) = deployment(909);
    let grid = train(&spec, &sensors, GRID_ALT_M, 5_000.0);
    let brute = |n: usize| (0u32..1 << n).filter(|m| m.count_ones() >= 2).count();
    let formula_ok = (2..=8).all(|n| subset_count(n) == brute(n));
    r.line("9 subset tables: 26 for 5 sensors, formula matches enumeration", grid.tables().len() == 26 && formula_ok, format!("{} tables", grid.tables().len()));
}

fn c10_determinism(r: &mut Report) {
    let tmp = tempfile::tempdir().expect("temp dir");
    let dir = tmp.path();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example.toml");
    let cfg = cfg.to_str().expect("utf-8 path");
    let run = |args: &[&str]| {
        let out = std::process::Command::new(env!("CARGO_BIN_EXE_gridloc")).current_dir(dir).args(args).output().expect("binary runs");
        out.status.success().then_some(()).ok_or_else(|| format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    };
    let commands: [(&str, Vec<&str>); 9] = [
        ("train-grid", vec!["train-grid"]),
        ("simulate", vec!["simulate"]),
        ("sync-clocks", vec!["sync-clocks", "--log", "simulate/log.csv", "--sensors", "simulate/sensors.json"]),
        ("localize", vec!["--grid", "train-grid/grid.bin", "localize", "--log", "simulate/log.csv", "--clocks", "sync-clocks/clocks.json"]),
        ("sweep-k", vec!["sweep-k"]),
        ("sweep-noise", vec!["sweep-noise"]),
        ("gdop-map", vec!["gdop-map", "--geojson"]),
        ("coverage", vec!["coverage"]),
        ("verify", vec!["--grid", "train-grid/grid.bin", "verify", "--log", "simulate/log.csv", "--clocks", "sync-clocks/clocks.json"]),
    ];
    let mut failures = Vec::new();
    let mut compared = 0;
    for (name, args) in &commands {
        let mut full = vec!["--config", cfg, "--out-dir", name];
        full.extend(args);
        let replayed = format!("{name}-replay");
        let result = run(&full).and_then(|()| run(&["--out-dir", &replayed, "replay", "--manifest", &format!("{name}/manifest.json")]));
        if let Err(e) = result {
            failures.push(e);
            continue;
        }
        let mut files: Vec<PathBuf> = fs::read_dir(dir.join(name)).expect("output dir").map(|e| e.expect("entry").path()).filter(|p| p.is_file()).collect();
        files.sort();
        for f in files {
            let twin = dir.join(&replayed).join(f.file_name().expect("file name"));
            compared += 1;
            if fs::read(&f).ok() != fs::read(&twin).ok() {
                failures.push(format!("{name}/{} differs", f.file_name().expect("file name").to_string_lossy()));
            }
        }
    }
    r.line(
        "10 determinism",
        failures.is_empty() && compared > commands.len(),
        format!("{} commands replayed, {compared} files compared byte for byte, {} mismatches {:?}", commands.len(), failures.len(), failures),
    );
}

fn main() {
    let mut r = Report { failed: 0 };
    let started = Instant::now();
    c1_mlat_exact(&mut r);
    c2_quantization(&mut r);
    c3_refinement(&mut r);
    c4_c5_noise(&mut r);
    c6_coverage(&mut r);
    c7_verification(&mut r);
    c8_sync(&mut r);
    c9_structure(&mut r);
    c10_determinism(&mut r);
    println!("acceptance finished in {:.1} s, {} failing", started.elapsed().as_secs_f64(), r.failed);
    if r.failed > 0 {
        std::process::exit(1);
    }
}
