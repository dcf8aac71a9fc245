//! `lisense` command-line front end.
//!
//! Every command writes its artifacts under an output prefix and finishes
//! with a `<prefix>_manifest.json` that records the arguments, the master
//! seed and a SHA-256 per artifact. `replay` re-executes a manifest and
//! checks the checksums.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::active::{detect_active, DropMeasure, DropReference, DropRule, DEFAULT_DROP_RATIO, DEFAULT_MIN_DISTANCE};
use crate::channel::simulate;
use crate::error::{Result, SenseError};
use crate::evaluation::{
    ecdf, filter_for, radio_map, summarize, ActiveExperiment, HumanLayout, PassiveExperiment, Placement, Summary,
    TrialReport, DEFAULT_GATE,
};
use crate::passive::{
    calibrate_mask, detect_passive, synthesize_template, Connectivity, MaskingMap, PassiveParams,
};
use crate::pgm::GrayImage;
use crate::radiomap::{map_to_image, RadioMap};
use crate::scene::{validate_config, ScenarioConfig};
use crate::seed::{derive_seed, sha256_hex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Parser)]
#[command(name = "lisense", version, about = "Radio sensing with a ceiling-mounted large intelligent surface")]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a scenario file and print its canonical form.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Received signal at every element.
    Simulate {
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Matched-filter radio map as CSV and PGM.
    Map {
        #[command(flatten)]
        scene: SceneArgs,
        #[command(flatten)]
        filter: FilterArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Active transmitters from a radio-map CSV.
    DetectActive {
        #[arg(long)]
        map: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MIN_DISTANCE)]
        ka: usize,
        #[arg(long, default_value_t = DEFAULT_DROP_RATIO)]
        drop: f64,
        #[arg(long, value_enum, default_value_t = DropRef::Previous)]
        drop_reference: DropRef,
        #[arg(long, value_enum, default_value_t = DropMeasureArg::Energy)]
        drop_measure: DropMeasureArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Empty-room masking map from random single-transmitter snapshots.
    CalibrateMask {
        #[command(flatten)]
        scene: SceneArgs,
        #[command(flatten)]
        filter: FilterArgs,
        #[command(flatten)]
        passive: PassiveArgs,
        /// Number of calibration transmissions.
        #[arg(long, default_value_t = 10)]
        transmissions: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Passive humans, one snapshot per emitter of the scenario (or random
    /// emitters when the scenario lists none).
    DetectPassive {
        #[command(flatten)]
        scene: SceneArgs,
        #[command(flatten)]
        filter: FilterArgs,
        #[command(flatten)]
        passive: PassiveArgs,
        #[arg(long)]
        mask: PathBuf,
        /// Random transmissions used when the scenario has no emitters.
        #[arg(long, default_value_t = 10)]
        transmissions: usize,
        /// Also write every intermediate binary map.
        #[arg(long)]
        dump_stages: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte-Carlo positioning and counting of active users.
    EvalActive {
        #[command(flatten)]
        eval: EvalArgs,
        #[command(flatten)]
        filter: FilterArgs,
        #[arg(long, default_value_t = 3)]
        users: usize,
        #[arg(long, default_value_t = DEFAULT_MIN_DISTANCE)]
        ka: usize,
        #[arg(long, default_value_t = DEFAULT_DROP_RATIO)]
        drop: f64,
        /// Minimum user separation (m).
        #[arg(long, default_value_t = 1.0)]
        separation: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte-Carlo passive detection with random humans.
    EvalPassive {
        #[command(flatten)]
        eval: EvalArgs,
        #[command(flatten)]
        filter: FilterArgs,
        #[command(flatten)]
        passive: PassiveArgs,
        #[arg(long, default_value_t = 4)]
        humans: usize,
        #[arg(long, default_value_t = 10)]
        calibration: usize,
        #[arg(long, default_value_t = 10)]
        transmissions: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two humans at each listed separation (m).
    EvalSeparation {
        #[command(flatten)]
        eval: EvalArgs,
        #[command(flatten)]
        filter: FilterArgs,
        #[command(flatten)]
        passive: PassiveArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75,1.0")]
        separations: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        calibration: usize,
        #[arg(long, default_value_t = 20)]
        transmissions: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run the command recorded in a manifest and verify its checksums.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DropRef {
    Previous,
    First,
}

impl From<DropRef> for DropReference {
    fn from(r: DropRef) -> Self {
        match r {
            DropRef::Previous => DropReference::PreviousPeak,
            DropRef::First => DropReference::FirstPeak,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DropMeasureArg {
    Energy,
    Magnitude,
}

impl From<DropMeasureArg> for DropMeasure {
    fn from(m: DropMeasureArg) -> Self {
        match m {
            DropMeasureArg::Energy => DropMeasure::Energy,
            DropMeasureArg::Magnitude => DropMeasure::Magnitude,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConnectivityArg {
    Four,
    Eight,
}

#[derive(Debug, Clone, Args)]
pub struct SceneArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    /// Overrides the scenario's noise seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub snr_db: Option<f64>,
    /// Samples averaged per element (S).
    #[arg(long)]
    pub avg: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct FilterArgs {
    /// Matched-filter design depth d (m); defaults to ceiling minus 1.8 m.
    #[arg(long)]
    pub depth: Option<f64>,
    /// Kernel side in elements.
    #[arg(long)]
    pub kernel: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct PassiveArgs {
    #[arg(long, default_value_t = 2)]
    pub kc: usize,
    #[arg(long, default_value_t = 0.5)]
    pub th: f64,
    #[arg(long, default_value_t = 3)]
    pub min_area: usize,
    #[arg(long, value_enum, default_value_t = ConnectivityArg::Eight)]
    pub connectivity: ConnectivityArg,
    #[arg(long, default_value_t = 0.6)]
    pub ncc: f64,
    #[arg(long, default_value_t = 1)]
    pub erase_margin: usize,
}

impl PassiveArgs {
    fn params(&self) -> PassiveParams {
        let mut p = PassiveParams {
            kc: self.kc,
            th: self.th,
            min_area: self.min_area,
            connectivity: match self.connectivity {
                ConnectivityArg::Four => Connectivity::Four,
                ConnectivityArg::Eight => Connectivity::Eight,
            },
            ..PassiveParams::default()
        };
        p.matching.ncc_threshold = self.ncc;
        p.matching.erase_margin = self.erase_margin;
        p
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Base scene; defaults to the desk-scale preset.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, default_value_t = 0.0)]
    pub snr_db: f64,
    #[arg(long)]
    pub avg: Option<usize>,
    /// Association radius (m).
    #[arg(long, default_value_t = DEFAULT_GATE)]
    pub gate: f64,
}

/// Record of one invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, as given.
    pub args: Vec<String>,
    pub parameters: BTreeMap<String, String>,
    pub inputs: Vec<String>,
    pub seed: Option<u64>,
    /// Output path -> SHA-256.
    pub outputs: BTreeMap<String, String>,
}

/// Collects artifacts in memory; nothing touches disk until `finish`.
struct Run {
    manifest: RunManifest,
    files: Vec<(PathBuf, Vec<u8>)>,
    manifest_path: PathBuf,
}

impl Run {
    fn new(command: &str, args: &[String], prefix: &Path) -> Self {
        Self {
            manifest: RunManifest {
                command: command.to_owned(),
                args: args.to_vec(),
                parameters: BTreeMap::new(),
                inputs: Vec::new(),
                seed: None,
                outputs: BTreeMap::new(),
            },
            files: Vec::new(),
            manifest_path: with_suffix(prefix, "_manifest.json"),
        }
    }

    fn param(&mut self, key: &str, value: impl ToString) {
        self.manifest.parameters.insert(key.to_owned(), value.to_string());
    }

    fn input(&mut self, path: &Path) {
        self.manifest.inputs.push(path.display().to_string());
    }

    fn output(&mut self, path: PathBuf, bytes: Vec<u8>) {
        self.manifest
            .outputs
            .insert(path.display().to_string(), sha256_hex(&bytes));
        self.files.push((path, bytes));
    }

    fn finish(self) -> Result<RunManifest> {
        for (path, bytes) in &self.files {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(path, bytes)?;
        }
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| SenseError::Io(e.to_string()))?;
        std::fs::write(&self.manifest_path, text + "\n")?;
        Ok(self.manifest)
    }
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

fn pgm_bytes(img: &GrayImage) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    img.write_pgm(&mut buf)?;
    Ok(buf)
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let e = |e: csv::Error| SenseError::Io(e.to_string());
    w.write_record(header).map_err(e)?;
    for r in rows {
        w.write_record(&r).map_err(e)?;
    }
    w.into_inner().map_err(|e| SenseError::Io(e.to_string()))
}

fn load_scene(args: &SceneArgs) -> Result<ScenarioConfig> {
    let mut cfg = ScenarioConfig::load(&args.scenario)?;
    if let Some(s) = args.seed {
        cfg.rng_seed = s;
    }
    if let Some(g) = args.snr_db {
        cfg.snr_db = g;
    }
    if let Some(s) = args.avg {
        cfg.averaging_count = s;
    }
    check(&cfg)?;
    Ok(cfg)
}

fn check(cfg: &ScenarioConfig) -> Result<()> {
    let v = validate_config(cfg);
    if v.is_empty() {
        Ok(())
    } else {
        Err(SenseError::InvalidScenario(v.iter().map(|x| x.to_string()).collect()))
    }
}

fn scene_params(run: &mut Run, cfg: &ScenarioConfig) {
    run.param("snr_db", cfg.snr_db);
    run.param("averaging_count", cfg.averaging_count);
    run.param("noiseless", cfg.noiseless);
    run.manifest.seed = Some(cfg.rng_seed);
}

fn depth_of(cfg: &ScenarioConfig, f: &FilterArgs) -> f64 {
    f.depth.unwrap_or_else(|| cfg.default_design_depth())
}

/// Hash of the static part of a scene: room, array and scatterers.
pub fn static_scene_hash(cfg: &ScenarioConfig) -> Result<String> {
    let stat = ScenarioConfig {
        snr_db: 0.0,
        averaging_count: 1,
        rng_seed: 0,
        noiseless: false,
        emitters: Vec::new(),
        humans: Vec::new(),
        ..cfg.clone()
    };
    Ok(sha256_hex(stat.to_toml_string()?.as_bytes()))
}

fn map_csv_bytes(map: &RadioMap) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    map.write_csv(&mut buf)?;
    Ok(buf)
}

fn fmt_opt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

fn report_rows(reports: &[TrialReport], tag: Option<f64>) -> Vec<Vec<String>> {
    reports
        .iter()
        .map(|r| {
            let errs = r.errors();
            let mean = if errs.is_empty() {
                f64::NAN
            } else {
                errs.iter().sum::<f64>() / errs.len() as f64
            };
            let mut row = Vec::new();
            if let Some(t) = tag {
                row.push(t.to_string());
            }
            row.extend([
                r.trial.to_string(),
                r.seed.to_string(),
                r.truth_count.to_string(),
                r.detected_count.to_string(),
                r.matches.pairs.len().to_string(),
                r.detection_rate().to_string(),
                fmt_opt(mean),
            ]);
            row
        })
        .collect()
}

const TRIAL_HEADER: [&str; 7] = [
    "trial",
    "seed",
    "truth_count",
    "detected_count",
    "matched",
    "detection_rate",
    "mean_error_m",
];

const SUMMARY_HEADER: [&str; 8] = [
    "trials",
    "mean_detection_rate",
    "mean_detections",
    "mean_reported",
    "count_accuracy",
    "mean_error_m",
    "min_error_m",
    "max_error_m",
];

fn summary_row(s: &Summary) -> Vec<String> {
    vec![
        s.trials.to_string(),
        s.mean_detection_rate.to_string(),
        s.mean_detections.to_string(),
        s.mean_reported.to_string(),
        s.count_accuracy.to_string(),
        fmt_opt(s.mean_error),
        fmt_opt(s.min_error),
        fmt_opt(s.max_error),
    ]
}

fn ecdf_bytes(reports: &[TrialReport]) -> Result<Vec<u8>> {
    let errors: Vec<f64> = reports.iter().flat_map(|r| r.errors()).collect();
    csv_bytes(
        &["error_m", "fraction"],
        ecdf(&errors).into_iter().map(|(e, f)| vec![e.to_string(), f.to_string()]),
    )
}

fn eval_base(args: &EvalArgs, clear_scatterers: bool) -> Result<ScenarioConfig> {
    let mut base = match &args.scenario {
        Some(p) => ScenarioConfig::load(p)?,
        None => {
            let mut d = ScenarioConfig::desk_scale();
            if clear_scatterers {
                d.scatterers.clear();
            }
            d
        }
    };
    base.emitters.clear();
    base.humans.clear();
    base.snr_db = args.snr_db;
    if let Some(s) = args.avg {
        base.averaging_count = s;
    }
    check(&base)?;
    Ok(base)
}

fn eval_params(run: &mut Run, args: &EvalArgs, base: &ScenarioConfig) {
    if let Some(p) = &args.scenario {
        run.input(p);
    }
    run.manifest.seed = Some(args.seed);
    run.param("trials", args.trials);
    run.param("snr_db", args.snr_db);
    run.param("averaging_count", base.averaging_count);
    run.param("gate", args.gate);
}

fn passive_params(run: &mut Run, p: &PassiveParams) {
    run.param("kc", p.kc);
    run.param("th", p.th);
    run.param("min_area", p.min_area);
    run.param("connectivity", format!("{:?}", p.connectivity));
    run.param("ncc", p.matching.ncc_threshold);
    run.param("erase_margin", p.matching.erase_margin);
}

fn passive_experiment(
    base: ScenarioConfig,
    layout: HumanLayout,
    args: &EvalArgs,
    filter: &FilterArgs,
    params: PassiveParams,
    calibration: usize,
    transmissions: usize,
) -> PassiveExperiment {
    let mut exp = PassiveExperiment::new(base, layout);
    exp.snr_db = args.snr_db;
    exp.averaging_count = exp.base.averaging_count;
    if args.avg.is_none() && args.scenario.is_none() {
        exp.averaging_count = 100;
    }
    exp.calibration_transmissions = calibration;
    exp.detection_transmissions = transmissions;
    exp.params = params;
    exp.gate = args.gate;
    exp.depth = depth_of(&exp.base, filter);
    exp.kernel_size = filter.kernel;
    exp
}

fn execute(cmd: &Command, argv: &[String]) -> Result<Option<RunManifest>> {
    match cmd {
        Command::Validate { scenario } => {
            let cfg = ScenarioConfig::load(scenario)?;
            check(&cfg)?;
            print!("{}", cfg.to_toml_string()?);
            Ok(None)
        }
        Command::Simulate { scene, out } => {
            let cfg = load_scene(scene)?;
            let mut run = Run::new("simulate", argv, out);
            run.input(&scene.scenario);
            scene_params(&mut run, &cfg);
            let grid = simulate(&cfg)?;
            let mut buf = Vec::new();
            grid.write_csv(&mut buf)?;
            run.output(with_suffix(out, "_signal.csv"), buf);
            run.finish().map(Some)
        }
        Command::Map { scene, filter, out } => {
            let cfg = load_scene(scene)?;
            let mut run = Run::new("map", argv, out);
            run.input(&scene.scenario);
            scene_params(&mut run, &cfg);
            let depth = depth_of(&cfg, filter);
            run.param("depth", depth);
            let f = filter_for(&cfg, depth, filter.kernel)?;
            run.param("kernel", f.kernel().size());
            let map = radio_map(&cfg, &f)?;
            run.output(with_suffix(out, "_map.csv"), map_csv_bytes(&map)?);
            run.output(with_suffix(out, "_map.pgm"), pgm_bytes(&map_to_image(&map))?);
            run.finish().map(Some)
        }
        Command::DetectActive {
            map,
            ka,
            drop,
            drop_reference,
            drop_measure,
            out,
        } => {
            let radio = RadioMap::read_csv(std::fs::File::open(map)?)?;
            let mut run = Run::new("detect-active", argv, out);
            run.input(map);
            run.param("ka", ka);
            run.param("drop", drop);
            run.param("drop_reference", format!("{drop_reference:?}"));
            run.param("drop_measure", format!("{drop_measure:?}"));
            let rule = DropRule {
                ratio: *drop,
                reference: (*drop_reference).into(),
                measure: (*drop_measure).into(),
            };
            let res = detect_active(&radio, *ka, rule)?;
            let rows = res.detections.iter().map(|d| {
                vec![
                    d.pixel.0.to_string(),
                    d.pixel.1.to_string(),
                    d.world.0.to_string(),
                    d.world.1.to_string(),
                    format!("{:e}", d.magnitude),
                ]
            });
            run.output(
                with_suffix(out, "_detections.csv"),
                csv_bytes(&["pixel_x", "pixel_y", "x_m", "y_m", "magnitude"], rows)?,
            );
            run.finish().map(Some)
        }
        Command::CalibrateMask {
            scene,
            filter,
            passive,
            transmissions,
            out,
        } => {
            let cfg = load_scene(scene)?;
            let mut run = Run::new("calibrate-mask", argv, out);
            run.input(&scene.scenario);
            scene_params(&mut run, &cfg);
            let params = passive.params();
            passive_params(&mut run, &params);
            run.param("transmissions", transmissions);
            let depth = depth_of(&cfg, filter);
            run.param("depth", depth);
            let f = filter_for(&cfg, depth, filter.kernel)?;
            let template = synthesize_template(&cfg, &f, depth)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, "calibration-placement", 0));
            let emitters = Placement::default().emitters(&cfg, &[], *transmissions, 0.0, 20.0, &mut rng)?;
            let maps = emitters
                .into_iter()
                .enumerate()
                .map(|(k, e)| {
                    let snap = ScenarioConfig {
                        rng_seed: derive_seed(cfg.rng_seed, "calibration-noise", k as u64),
                        emitters: vec![e],
                        humans: Vec::new(),
                        ..cfg.clone()
                    };
                    radio_map(&snap, &f)
                })
                .collect::<Result<Vec<_>>>()?;
            let mask = calibrate_mask(&maps, std::slice::from_ref(&template), &params)?;
            let hash = static_scene_hash(&cfg)?;
            let mask_path = with_suffix(out, "_mask.pgm");
            let meta = crate::passive::MaskMetadata {
                source_count: mask.source_count,
                width: mask.bits.width(),
                height: mask.bits.height(),
                scenario_hash: hash,
            };
            let meta_text = serde_json::to_string_pretty(&meta).map_err(|e| SenseError::Io(e.to_string()))? + "\n";
            run.output(crate::passive::sidecar_path(&mask_path), meta_text.into_bytes());
            run.output(mask_path, pgm_bytes(&mask.bits.to_image())?);
            run.finish().map(Some)
        }
        Command::DetectPassive {
            scene,
            filter,
            passive,
            mask,
            transmissions,
            dump_stages,
            out,
        } => {
            let cfg = load_scene(scene)?;
            let mut run = Run::new("detect-passive", argv, out);
            run.input(&scene.scenario);
            run.input(mask);
            scene_params(&mut run, &cfg);
            let params = passive.params();
            passive_params(&mut run, &params);
            let (mask_map, meta) = MaskingMap::load(mask)?;
            if meta.scenario_hash != static_scene_hash(&cfg)? {
                eprintln!("warning: mask was calibrated for a different static scene");
            }
            let depth = depth_of(&cfg, filter);
            run.param("depth", depth);
            let f = filter_for(&cfg, depth, filter.kernel)?;
            let template = synthesize_template(&cfg, &f, depth)?;
            let keep_out: Vec<(f64, f64)> = cfg.humans.iter().map(|h| (h.center[0], h.center[1])).collect();
            let emitters = if cfg.emitters.is_empty() {
                run.param("transmissions", transmissions);
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, "detection-placement", 0));
                Placement::default().emitters(&cfg, &keep_out, *transmissions, 0.0, 20.0, &mut rng)?
            } else {
                cfg.emitters.clone()
            };
            let maps = emitters
                .into_iter()
                .enumerate()
                .map(|(k, e)| {
                    let snap = ScenarioConfig {
                        rng_seed: derive_seed(cfg.rng_seed, "detection-noise", k as u64),
                        emitters: vec![e],
                        ..cfg.clone()
                    };
                    radio_map(&snap, &f)
                })
                .collect::<Result<Vec<_>>>()?;
            let found = detect_passive(&maps, Some(&mask_map), std::slice::from_ref(&template), &params)?;
            let rows = found.components.components.iter().map(|c| {
                vec![
                    c.label.to_string(),
                    c.centroid.0.to_string(),
                    c.centroid.1.to_string(),
                    c.world.0.to_string(),
                    c.world.1.to_string(),
                    c.area.to_string(),
                ]
            });
            run.output(
                with_suffix(out, "_detections.csv"),
                csv_bytes(&["label", "pixel_x", "pixel_y", "x_m", "y_m", "area"], rows)?,
            );
            if *dump_stages {
                let s = &found.stages;
                if let Some(first) = maps.first() {
                    run.output(with_suffix(out, "_stage_map.pgm"), pgm_bytes(&map_to_image(first))?);
                }
                for (name, b) in [
                    ("combined", &s.combined),
                    ("negative", &s.negative),
                    ("subtracted", &s.subtracted),
                    ("despeckled", &s.despeckled),
                ] {
                    run.output(with_suffix(out, &format!("_stage_{name}.pgm")), pgm_bytes(&b.to_image())?);
                }
            }
            run.finish().map(Some)
        }
        Command::EvalActive {
            eval,
            filter,
            users,
            ka,
            drop,
            separation,
            out,
        } => {
            let base = eval_base(eval, true)?;
            let mut run = Run::new("eval-active", argv, out);
            eval_params(&mut run, eval, &base);
            let mut exp = ActiveExperiment::new(base, *users, eval.snr_db);
            exp.averaging_count = exp.base.averaging_count;
            exp.min_distance = *ka;
            exp.drop_rule = DropRule::with_ratio(*drop);
            exp.min_separation = *separation;
            exp.gate = eval.gate;
            exp.depth = depth_of(&exp.base, filter);
            exp.kernel_size = filter.kernel;
            run.param("users", users);
            run.param("ka", ka);
            run.param("drop", drop);
            run.param("separation", separation);
            run.param("depth", exp.depth);
            let reports = exp.run(eval.seed, eval.trials)?;
            run.output(with_suffix(out, "_trials.csv"), csv_bytes(&TRIAL_HEADER, report_rows(&reports, None))?);
            run.output(
                with_suffix(out, "_summary.csv"),
                csv_bytes(&SUMMARY_HEADER, [summary_row(&summarize(&reports))])?,
            );
            run.output(with_suffix(out, "_ecdf.csv"), ecdf_bytes(&reports)?);
            run.finish().map(Some)
        }
        Command::EvalPassive {
            eval,
            filter,
            passive,
            humans,
            calibration,
            transmissions,
            out,
        } => {
            let base = eval_base(eval, false)?;
            let mut run = Run::new("eval-passive", argv, out);
            eval_params(&mut run, eval, &base);
            let params = passive.params();
            passive_params(&mut run, &params);
            run.param("humans", humans);
            run.param("calibration", calibration);
            run.param("transmissions", transmissions);
            let layout = HumanLayout::Random {
                count: *humans,
                min_separation: 0.5,
            };
            let exp = passive_experiment(base, layout, eval, filter, params, *calibration, *transmissions);
            run.param("depth", exp.depth);
            run.param("averaging_count", exp.averaging_count);
            let reports = exp.run(eval.seed, eval.trials)?;
            run.output(with_suffix(out, "_trials.csv"), csv_bytes(&TRIAL_HEADER, report_rows(&reports, None))?);
            run.output(
                with_suffix(out, "_summary.csv"),
                csv_bytes(&SUMMARY_HEADER, [summary_row(&summarize(&reports))])?,
            );
            run.output(with_suffix(out, "_ecdf.csv"), ecdf_bytes(&reports)?);
            run.finish().map(Some)
        }
        Command::EvalSeparation {
            eval,
            filter,
            passive,
            separations,
            calibration,
            transmissions,
            out,
        } => {
            let base = eval_base(eval, false)?;
            let mut run = Run::new("eval-separation", argv, out);
            eval_params(&mut run, eval, &base);
            let params = passive.params();
            passive_params(&mut run, &params);
            run.param(
                "separations",
                separations.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
            );
            run.param("calibration", calibration);
            run.param("transmissions", transmissions);
            let envelope = separations.iter().cloned().fold(0.0, f64::max);
            let mut trial_rows = Vec::new();
            let mut summary_rows = Vec::new();
            for &sep in separations {
                let exp = passive_experiment(
                    base.clone(),
                    HumanLayout::Pair {
                        separation: sep,
                        envelope,
                    },
                    eval,
                    filter,
                    params,
                    *calibration,
                    *transmissions,
                );
                // common seeds across separations
                let reports = exp.run(eval.seed, eval.trials)?;
                trial_rows.extend(report_rows(&reports, Some(sep)));
                let mut row = vec![sep.to_string()];
                row.extend(summary_row(&summarize(&reports)));
                summary_rows.push(row);
            }
            let mut th = vec!["separation_m"];
            th.extend(TRIAL_HEADER);
            let mut sh = vec!["separation_m"];
            sh.extend(SUMMARY_HEADER);
            run.output(with_suffix(out, "_trials.csv"), csv_bytes(&th, trial_rows)?);
            run.output(with_suffix(out, "_summary.csv"), csv_bytes(&sh, summary_rows)?);
            run.finish().map(Some)
        }
        Command::Replay { manifest } => {
            let text = std::fs::read_to_string(manifest)?;
            let recorded: RunManifest = serde_json::from_str(&text).map_err(|e| SenseError::Parse(e.to_string()))?;
            let cli = parse(recorded.args.iter().cloned())?;
            if matches!(cli.command, Command::Replay { .. }) {
                return Err(SenseError::domain("a manifest cannot replay another replay"));
            }
            let fresh = run_cli(&cli, &recorded.args)?
                .ok_or_else(|| SenseError::domain("recorded command produced no manifest"))?;
            if fresh.outputs != recorded.outputs {
                let bad: Vec<String> = recorded
                    .outputs
                    .iter()
                    .filter(|(k, v)| fresh.outputs.get(*k) != Some(v))
                    .map(|(k, _)| format!("checksum mismatch: {k}"))
                    .collect();
                return Err(SenseError::InvalidScenario(bad));
            }
            println!("replay ok: {} outputs verified", fresh.outputs.len());
            Ok(None)
        }
    }
}

fn parse<I: IntoIterator<Item = String>>(args: I) -> Result<Cli> {
    Cli::try_parse_from(std::iter::once("lisense".to_owned()).chain(args)).map_err(|e| SenseError::Parse(e.to_string()))
}

fn run_cli(cli: &Cli, argv: &[String]) -> Result<Option<RunManifest>> {
    match cli.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| SenseError::domain(e.to_string()))?
            .install(|| execute(&cli.command, argv)),
        None => execute(&cli.command, argv),
    }
}

fn run_main(cli: &Cli, argv: Vec<String>) -> i32 {
    match run_cli(cli, &argv) {
        Ok(_) => 0,
        Err(SenseError::InvalidScenario(v)) => {
            for line in v {
                eprintln!("{line}");
            }
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Entry point taking the argument list without the program name; the list
/// is what gets recorded in manifests.
pub fn main_with(args: Vec<String>) -> i32 {
    match Cli::try_parse_from(std::iter::once("lisense".to_owned()).chain(args.iter().cloned())) {
        Ok(cli) => run_main(&cli, args),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                2
            } else {
                0
            }
        }
    }
}
