//! Detection matching, error statistics and the Monte-Carlo harness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::f64::consts::PI;

use crate::active::{detect_active, DropRule, DEFAULT_MIN_DISTANCE};
use crate::channel::simulate;
use crate::error::{Result, SenseError};
use crate::passive::{calibrate_mask, detect_passive, synthesize_template, PassiveParams, TransmitterTemplate};
use crate::radiomap::{kernel_for, MatchedFilter, RadioMap};
use crate::scene::{Emitter, Human, ScenarioConfig, DEFAULT_EMITTER_HEIGHT};
use crate::seed::derive_seed;

/// Default association radius (m) for counting a detection as a hit.
pub const DEFAULT_GATE: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    pub truth: usize,
    pub detection: usize,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    pub pairs: Vec<MatchPair>,
    pub misses: Vec<usize>,
    pub false_alarms: Vec<usize>,
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Greedy association: repeatedly pairs the globally closest remaining
/// (truth, detection) within `gate`; ties go to the lower truth index, then
/// the lower detection index.
pub fn match_detections(truth: &[(f64, f64)], detected: &[(f64, f64)], gate: f64) -> Result<MatchResult> {
    if !(gate > 0.0) {
        return Err(SenseError::domain("gate must be > 0"));
    }
    let mut candidates: Vec<MatchPair> = Vec::new();
    for (t, &tp) in truth.iter().enumerate() {
        for (d, &dp) in detected.iter().enumerate() {
            let error = dist(tp, dp);
            if error <= gate {
                candidates.push(MatchPair {
                    truth: t,
                    detection: d,
                    error,
                });
            }
        }
    }
    candidates.sort_by(|a, b| {
        a.error
            .total_cmp(&b.error)
            .then(a.truth.cmp(&b.truth))
            .then(a.detection.cmp(&b.detection))
    });
    let mut truth_used = vec![false; truth.len()];
    let mut det_used = vec![false; detected.len()];
    let mut pairs = Vec::new();
    for c in candidates {
        if !truth_used[c.truth] && !det_used[c.detection] {
            truth_used[c.truth] = true;
            det_used[c.detection] = true;
            pairs.push(c);
        }
    }
    pairs.sort_by_key(|p| p.truth);
    Ok(MatchResult {
        pairs,
        misses: (0..truth.len()).filter(|&i| !truth_used[i]).collect(),
        false_alarms: (0..detected.len()).filter(|&i| !det_used[i]).collect(),
    })
}

/// Empirical CDF as `(value, fraction <= value)` steps over distinct values.
pub fn ecdf(errors: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == v => last.1 = frac,
            _ => out.push((v, frac)),
        }
    }
    out
}

/// Smallest value whose cumulative fraction reaches `p`.
pub fn ecdf_quantile(errors: &[f64], p: f64) -> Option<f64> {
    ecdf(errors)
        .into_iter()
        .find(|&(_, f)| f >= p - 1e-12)
        .map(|(v, _)| v)
}

/// Outcome of one Monte-Carlo trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialReport {
    pub trial: usize,
    pub seed: u64,
    pub truth_count: usize,
    /// Number of detections the pipeline reported.
    pub detected_count: usize,
    pub matches: MatchResult,
}

impl TrialReport {
    pub fn new(trial: usize, seed: u64, truth: &[(f64, f64)], detected: &[(f64, f64)], gate: f64) -> Result<Self> {
        Ok(Self {
            trial,
            seed,
            truth_count: truth.len(),
            detected_count: detected.len(),
            matches: match_detections(truth, detected, gate)?,
        })
    }

    /// Matched fraction of the ground truth; 1 when there is nothing to find.
    pub fn detection_rate(&self) -> f64 {
        if self.truth_count == 0 {
            1.0
        } else {
            self.matches.pairs.len() as f64 / self.truth_count as f64
        }
    }

    pub fn errors(&self) -> Vec<f64> {
        self.matches.pairs.iter().map(|p| p.error).collect()
    }
}

/// Runs `trials` independent trials. Trial `i` receives
/// `derive_seed(master_seed, "trial", i)`; reports come back in trial order
/// whatever the thread count.
pub fn run_monte_carlo<F>(master_seed: u64, trials: usize, trial: F) -> Result<Vec<TrialReport>>
where
    F: Fn(usize, u64) -> Result<TrialReport> + Sync,
{
    if trials < 1 {
        return Err(SenseError::domain("at least one trial is required"));
    }
    (0..trials)
        .into_par_iter()
        .map(|i| trial(i, derive_seed(master_seed, "trial", i as u64)))
        .collect()
}

/// Aggregate statistics over trial reports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub trials: usize,
    pub mean_detection_rate: f64,
    /// Mean number of matched targets per trial.
    pub mean_detections: f64,
    pub mean_reported: f64,
    /// Fraction of trials whose reported count equals the truth count.
    pub count_accuracy: f64,
    pub mean_error: f64,
    pub min_error: f64,
    pub max_error: f64,
}

pub fn summarize(reports: &[TrialReport]) -> Summary {
    let n = reports.len().max(1) as f64;
    let errors: Vec<f64> = reports.iter().flat_map(|r| r.errors()).collect();
    let mean_error = if errors.is_empty() {
        f64::NAN
    } else {
        errors.iter().sum::<f64>() / errors.len() as f64
    };
    Summary {
        trials: reports.len(),
        mean_detection_rate: reports.iter().map(|r| r.detection_rate()).sum::<f64>() / n,
        mean_detections: reports.iter().map(|r| r.matches.pairs.len() as f64).sum::<f64>() / n,
        mean_reported: reports.iter().map(|r| r.detected_count as f64).sum::<f64>() / n,
        count_accuracy: reports.iter().filter(|r| r.detected_count == r.truth_count).count() as f64 / n,
        mean_error,
        min_error: errors.iter().cloned().fold(f64::NAN, f64::min),
        max_error: errors.iter().cloned().fold(f64::NAN, f64::max),
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 100_000;

/// Random placement inside the array footprint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    /// Keep-out band along the footprint edges for emitters (m).
    pub edge_margin: f64,
    /// Keep-out band for humans (m). Near the border the filter kernel hangs
    /// off the array and weak echoes lose most of their gain.
    pub human_edge_margin: f64,
    /// Minimum distance from a scatterer's rim (m).
    pub scatterer_clearance: f64,
    /// Minimum distance between an emitter and a human center (m).
    pub human_clearance: f64,
    /// Emitter heights are drawn uniformly from this range.
    pub emitter_height: (f64, f64),
}

impl Default for Placement {
    fn default() -> Self {
        Self {
            edge_margin: 0.5,
            human_edge_margin: 1.0,
            scatterer_clearance: 0.3,
            human_clearance: 0.4,
            emitter_height: (DEFAULT_EMITTER_HEIGHT, DEFAULT_EMITTER_HEIGHT),
        }
    }
}

impl Placement {
    fn bounds(&self, cfg: &ScenarioConfig, margin: f64) -> Result<((f64, f64), (f64, f64))> {
        let (sx, sy) = cfg.lis.footprint();
        let [ox, oy] = cfg.lis.origin;
        let x = (ox.max(0.0) + margin, (ox + sx).min(cfg.room.length_x) - margin);
        let y = (oy.max(0.0) + margin, (oy + sy).min(cfg.room.length_y) - margin);
        if x.0 >= x.1 || y.0 >= y.1 {
            return Err(SenseError::domain("placement region is empty"));
        }
        Ok((x, y))
    }

    fn clear_of_scatterers(&self, cfg: &ScenarioConfig, p: (f64, f64)) -> bool {
        cfg.scatterers
            .iter()
            .all(|s| dist(p, (s.center[0], s.center[1])) >= s.radius + self.scatterer_clearance)
    }

    fn sample_point(&self, cfg: &ScenarioConfig, margin: f64, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
        let ((x0, x1), (y0, y1)) = self.bounds(cfg, margin)?;
        Ok((rng.gen_range(x0..=x1), rng.gen_range(y0..=y1)))
    }

    /// `n` emitters with uniform random symbol phases, pairwise at least
    /// `min_separation` apart, clear of scatterers and at least
    /// `human_clearance` from every `keep_out` point.
    pub fn emitters(
        &self,
        cfg: &ScenarioConfig,
        keep_out: &[(f64, f64)],
        n: usize,
        min_separation: f64,
        tx_power: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Emitter>> {
        let mut out: Vec<Emitter> = Vec::with_capacity(n);
        let mut attempts = 0;
        while out.len() < n {
            attempts += 1;
            if attempts > MAX_PLACEMENT_ATTEMPTS {
                return Err(SenseError::domain("could not place emitters under the constraints"));
            }
            let p = self.sample_point(cfg, self.edge_margin, rng)?;
            let (z0, z1) = self.emitter_height;
            let z = if z1 > z0 { rng.gen_range(z0..z1) } else { z0 };
            let phase = rng.gen_range(0.0..2.0 * PI);
            let ok = self.clear_of_scatterers(cfg, p)
                && keep_out.iter().all(|&k| dist(p, k) >= self.human_clearance)
                && out
                    .iter()
                    .all(|e| dist(p, (e.position[0], e.position[1])) >= min_separation);
            if ok {
                out.push(Emitter {
                    position: [p.0, p.1, z],
                    tx_power,
                    symbol_phase: phase,
                });
            }
        }
        Ok(out)
    }

    /// `n` average-size humans clear of scatterers, centers pairwise at least
    /// `min_separation` apart.
    pub fn humans(&self, cfg: &ScenarioConfig, n: usize, min_separation: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Human>> {
        let mut out: Vec<Human> = Vec::with_capacity(n);
        let mut attempts = 0;
        while out.len() < n {
            attempts += 1;
            if attempts > MAX_PLACEMENT_ATTEMPTS {
                return Err(SenseError::domain("could not place humans under the constraints"));
            }
            let p = self.sample_point(cfg, self.human_edge_margin, rng)?;
            let ok = self.clear_of_scatterers(cfg, p)
                && out
                    .iter()
                    .all(|h| dist(p, (h.center[0], h.center[1])) >= min_separation);
            if ok {
                out.push(Human::average([p.0, p.1]));
            }
        }
        Ok(out)
    }

    /// Two humans `separation` apart along a random direction. The midpoint
    /// and direction are drawn so that a pair `envelope` apart would also be
    /// valid, which keeps the draw identical for every separation up to
    /// `envelope`. Also returns keep-out points covering the envelope segment.
    pub fn human_pair(
        &self,
        cfg: &ScenarioConfig,
        separation: f64,
        envelope: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<Human>, Vec<(f64, f64)>)> {
        if !(separation >= 0.0 && envelope >= separation) {
            return Err(SenseError::domain("pair envelope must be >= separation >= 0"));
        }
        let ((x0, x1), (y0, y1)) = self.bounds(cfg, self.human_edge_margin)?;
        let inside = |p: (f64, f64)| p.0 >= x0 && p.0 <= x1 && p.1 >= y0 && p.1 <= y1;
        let steps = ((envelope / 0.05).ceil() as usize).max(1);
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let mid = self.sample_point(cfg, self.human_edge_margin, rng)?;
            let angle = rng.gen_range(0.0..PI);
            let (ux, uy) = (angle.cos(), angle.sin());
            let along = |t: f64| (mid.0 + t * ux, mid.1 + t * uy);
            let segment: Vec<(f64, f64)> = (0..=steps)
                .map(|i| along(envelope * (i as f64 / steps as f64 - 0.5)))
                .collect();
            if segment.iter().all(|&p| inside(p) && self.clear_of_scatterers(cfg, p)) {
                let a = along(-0.5 * separation);
                let b = along(0.5 * separation);
                return Ok((vec![Human::average([a.0, a.1]), Human::average([b.0, b.1])], segment));
            }
        }
        Err(SenseError::domain("could not place the human pair"))
    }
}

/// Matched filter for a scenario's array and design depth.
pub fn filter_for(cfg: &ScenarioConfig, depth: f64, kernel_size: Option<usize>) -> Result<MatchedFilter> {
    let kernel = kernel_for(&cfg.lis, depth, kernel_size)?;
    MatchedFilter::new(&kernel, cfg.lis.elements_x, cfg.lis.elements_y)
}

/// Simulates `cfg` and forms its radio map on the scenario lattice.
pub fn radio_map(cfg: &ScenarioConfig, filter: &MatchedFilter) -> Result<RadioMap> {
    let received = simulate(cfg)?;
    Ok(filter.apply(&received)?.with_lis(cfg.lis))
}

/// Simultaneous multi-user transmission, detected with the peak/drop rule.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveExperiment {
    /// Room, array and static objects; emitters and humans are replaced.
    pub base: ScenarioConfig,
    pub users: usize,
    pub snr_db: f64,
    pub averaging_count: usize,
    pub min_separation: f64,
    pub placement: Placement,
    pub tx_power: f64,
    pub min_distance: usize,
    pub drop_rule: DropRule,
    pub depth: f64,
    pub kernel_size: Option<usize>,
    pub gate: f64,
}

impl ActiveExperiment {
    pub fn new(base: ScenarioConfig, users: usize, snr_db: f64) -> Self {
        let depth = base.default_design_depth();
        Self {
            base,
            users,
            snr_db,
            averaging_count: 1,
            min_separation: 1.0,
            placement: Placement::default(),
            tx_power: 20.0,
            min_distance: DEFAULT_MIN_DISTANCE,
            drop_rule: DropRule::default(),
            depth,
            kernel_size: None,
            gate: DEFAULT_GATE,
        }
    }

    /// Scenario realized by trial `seed`.
    pub fn scenario(&self, seed: u64) -> Result<ScenarioConfig> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "placement", 0));
        let emitters = self
            .placement
            .emitters(&self.base, &[], self.users, self.min_separation, self.tx_power, &mut rng)?;
        Ok(ScenarioConfig {
            snr_db: self.snr_db,
            averaging_count: self.averaging_count,
            rng_seed: derive_seed(seed, "noise", 0),
            noiseless: false,
            emitters,
            humans: Vec::new(),
            ..self.base.clone()
        })
    }

    pub fn run_trial(&self, filter: &MatchedFilter, trial: usize, seed: u64) -> Result<TrialReport> {
        let cfg = self.scenario(seed)?;
        let map = radio_map(&cfg, filter)?;
        let result = detect_active(&map, self.min_distance, self.drop_rule)?;
        let truth: Vec<(f64, f64)> = cfg.emitters.iter().map(|e| (e.position[0], e.position[1])).collect();
        let detected: Vec<(f64, f64)> = result.detections.iter().map(|d| d.world).collect();
        TrialReport::new(trial, seed, &truth, &detected, self.gate)
    }

    pub fn run(&self, master_seed: u64, trials: usize) -> Result<Vec<TrialReport>> {
        let filter = filter_for(&self.base, self.depth, self.kernel_size)?;
        run_monte_carlo(master_seed, trials, |i, s| self.run_trial(&filter, i, s))
    }
}

/// How humans are laid out in a passive trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HumanLayout {
    /// `count` humans at random, centers at least `min_separation` apart.
    Random { count: usize, min_separation: f64 },
    /// Two humans `separation` apart. Draws are shared by all separations up
    /// to `envelope`, so a sweep compares like with like.
    Pair { separation: f64, envelope: f64 },
}

/// Empty-room calibration followed by passive detection with sequential
/// single-transmitter snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct PassiveExperiment {
    /// Room, array and static scatterers.
    pub base: ScenarioConfig,
    pub layout: HumanLayout,
    pub calibration_transmissions: usize,
    pub detection_transmissions: usize,
    pub snr_db: f64,
    pub averaging_count: usize,
    pub placement: Placement,
    pub tx_power: f64,
    pub params: PassiveParams,
    pub depth: f64,
    pub kernel_size: Option<usize>,
    pub gate: f64,
}

impl PassiveExperiment {
    pub fn new(base: ScenarioConfig, layout: HumanLayout) -> Self {
        let depth = base.default_design_depth();
        Self {
            base,
            layout,
            calibration_transmissions: 10,
            detection_transmissions: 10,
            snr_db: 0.0,
            averaging_count: 100,
            placement: Placement::default(),
            tx_power: 20.0,
            params: PassiveParams::default(),
            depth,
            kernel_size: None,
            gate: DEFAULT_GATE,
        }
    }

    /// Matched filter and transmitter template shared by all trials.
    pub fn prepare(&self) -> Result<(MatchedFilter, TransmitterTemplate)> {
        let filter = filter_for(&self.base, self.depth, self.kernel_size)?;
        let template = synthesize_template(&self.base, &filter, self.depth)?;
        Ok((filter, template))
    }

    /// Humans, calibration snapshots and detection snapshots for trial `seed`.
    pub fn scenarios(&self, seed: u64) -> Result<(Vec<Human>, Vec<ScenarioConfig>, Vec<ScenarioConfig>)> {
        let rng = |purpose: &str| ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose, 0));
        let (humans, keep_out) = match self.layout {
            HumanLayout::Random { count, min_separation } => {
                let h = self
                    .placement
                    .humans(&self.base, count, min_separation, &mut rng("humans"))?;
                let k = h.iter().map(|h| (h.center[0], h.center[1])).collect();
                (h, k)
            }
            HumanLayout::Pair { separation, envelope } => {
                self.placement
                    .human_pair(&self.base, separation, envelope, &mut rng("humans"))?
            }
        };
        let snapshot = |emitter: Emitter, humans: Vec<Human>, purpose: &str, k: usize| ScenarioConfig {
            snr_db: self.snr_db,
            averaging_count: self.averaging_count,
            rng_seed: derive_seed(seed, purpose, k as u64),
            noiseless: false,
            emitters: vec![emitter],
            humans,
            ..self.base.clone()
        };
        let cal_emitters = self.placement.emitters(
            &self.base,
            &[],
            self.calibration_transmissions,
            0.0,
            self.tx_power,
            &mut rng("calibration-emitters"),
        )?;
        let det_emitters = self.placement.emitters(
            &self.base,
            &keep_out,
            self.detection_transmissions,
            0.0,
            self.tx_power,
            &mut rng("detection-emitters"),
        )?;
        let calibration = cal_emitters
            .into_iter()
            .enumerate()
            .map(|(k, e)| snapshot(e, Vec::new(), "calibration-noise", k))
            .collect();
        let detection = det_emitters
            .into_iter()
            .enumerate()
            .map(|(k, e)| snapshot(e, humans.clone(), "detection-noise", k))
            .collect();
        Ok((humans, calibration, detection))
    }

    pub fn run_trial(
        &self,
        filter: &MatchedFilter,
        template: &TransmitterTemplate,
        trial: usize,
        seed: u64,
    ) -> Result<TrialReport> {
        let (humans, calibration, detection) = self.scenarios(seed)?;
        let cal_maps = calibration
            .iter()
            .map(|c| radio_map(c, filter))
            .collect::<Result<Vec<_>>>()?;
        let templates = std::slice::from_ref(template);
        let mask = calibrate_mask(&cal_maps, templates, &self.params)?;
        let det_maps = detection
            .iter()
            .map(|c| radio_map(c, filter))
            .collect::<Result<Vec<_>>>()?;
        let found = detect_passive(&det_maps, Some(&mask), templates, &self.params)?;
        let truth: Vec<(f64, f64)> = humans.iter().map(|h| (h.center[0], h.center[1])).collect();
        let detected: Vec<(f64, f64)> = found.components.components.iter().map(|c| c.world).collect();
        TrialReport::new(trial, seed, &truth, &detected, self.gate)
    }

    pub fn run(&self, master_seed: u64, trials: usize) -> Result<Vec<TrialReport>> {
        let (filter, template) = self.prepare()?;
        run_monte_carlo(master_seed, trials, |i, s| self.run_trial(&filter, &template, i, s))
    }
}
