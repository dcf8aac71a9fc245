//! Active-transmitter extraction: maximum filtering followed by a
//! descending energy-drop stopping rule.

use rayon::prelude::*;

use crate::error::{Result, SenseError};
use crate::radiomap::RadioMap;
use crate::scene::{pixel_to_world, LisArrayConfig};

/// Default window half-width `K_a` in pixels.
pub const DEFAULT_MIN_DISTANCE: usize = 5;

/// Default energy drop that ends the transmitter list.
pub const DEFAULT_DROP_RATIO: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    /// (col, row)
    pub pixel: (usize, usize),
    pub magnitude: f64,
}

/// Local maxima sorted by descending magnitude; ties in (row, col) order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PeakList {
    pub entries: Vec<Peak>,
}

impl PeakList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// First `k` entries.
    pub fn top(&self, k: usize) -> PeakList {
        PeakList {
            entries: self.entries.iter().take(k).copied().collect(),
        }
    }
}

/// Sliding-window maximum over a `(2k+1) x (2k+1)` window clipped at the
/// borders, computed separably.
fn window_max(map: &RadioMap, k: usize) -> Vec<f64> {
    let (w, h) = map.dims();
    let mags = map.magnitudes();
    let mut horiz = vec![0.0; w * h];
    horiz.par_chunks_mut(w).enumerate().for_each(|(r, line)| {
        let src = &mags[r * w..(r + 1) * w];
        for (c, out) in line.iter_mut().enumerate() {
            let lo = c.saturating_sub(k);
            let hi = (c + k).min(w - 1);
            *out = src[lo..=hi].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        }
    });
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(r, line)| {
        let lo = r.saturating_sub(k);
        let hi = (r + k).min(h - 1);
        for (c, v) in line.iter_mut().enumerate() {
            *v = (lo..=hi).map(|rr| horiz[rr * w + c]).fold(f64::NEG_INFINITY, f64::max);
        }
    });
    out
}

fn chebyshev(a: (usize, usize), b: (usize, usize)) -> usize {
    a.0.abs_diff(b.0).max(a.1.abs_diff(b.1))
}

/// Pixels that equal the maximum of the window centered on them, strongest
/// first. A candidate within `min_distance` (Chebyshev) of an already
/// accepted, stronger peak is dropped, so plateaus yield one peak. Zero
/// pixels never count as peaks.
pub fn local_maxima(map: &RadioMap, min_distance: usize) -> PeakList {
    if map.magnitudes().is_empty() {
        return PeakList::default();
    }
    let k = min_distance.max(1);
    let wmax = window_max(map, k);
    let w = map.width();
    let mut candidates: Vec<Peak> = map
        .magnitudes()
        .iter()
        .zip(&wmax)
        .enumerate()
        .filter(|(_, (&m, &mx))| m > 0.0 && m == mx)
        .map(|(i, (&m, _))| Peak {
            pixel: (i % w, i / w),
            magnitude: m,
        })
        .collect();
    candidates.sort_by(|a, b| {
        b.magnitude
            .total_cmp(&a.magnitude)
            .then((a.pixel.1, a.pixel.0).cmp(&(b.pixel.1, b.pixel.0)))
    });
    let mut accepted: Vec<Peak> = Vec::new();
    for c in candidates {
        if accepted.iter().all(|p| chebyshev(p.pixel, c.pixel) > k) {
            accepted.push(c);
        }
    }
    PeakList { entries: accepted }
}

/// What the next peak is compared against when walking the sorted list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DropReference {
    /// The previously accepted peak.
    #[default]
    PreviousPeak,
    /// The strongest peak.
    FirstPeak,
}

/// Quantity compared between consecutive peaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DropMeasure {
    /// Squared magnitude of the filter output.
    #[default]
    Energy,
    Magnitude,
}

impl DropMeasure {
    fn of(self, magnitude: f64) -> f64 {
        match self {
            DropMeasure::Energy => magnitude * magnitude,
            DropMeasure::Magnitude => magnitude,
        }
    }
}

/// Stopping rule for the descending peak walk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropRule {
    pub ratio: f64,
    pub reference: DropReference,
    pub measure: DropMeasure,
}

impl Default for DropRule {
    fn default() -> Self {
        Self {
            ratio: DEFAULT_DROP_RATIO,
            reference: DropReference::PreviousPeak,
            measure: DropMeasure::Energy,
        }
    }
}

impl DropRule {
    pub fn with_ratio(ratio: f64) -> Self {
        Self {
            ratio,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveDetection {
    pub pixel: (usize, usize),
    pub world: (f64, f64),
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActiveDetectionResult {
    pub detections: Vec<ActiveDetection>,
}

impl ActiveDetectionResult {
    /// Inferred number of active transmitters.
    pub fn count(&self) -> usize {
        self.detections.len()
    }
}

/// Accepts peaks in order while each keeps at least `(1 - ratio)` of its
/// reference (in the rule's measure); the first larger drop ends the list.
pub fn count_and_select(peaks: &PeakList, rule: DropRule, lis: &LisArrayConfig) -> Result<ActiveDetectionResult> {
    if peaks.is_empty() {
        return Err(SenseError::domain("no peaks to select from"));
    }
    if !(0.0..=1.0).contains(&rule.ratio) {
        return Err(SenseError::domain("drop ratio must lie in [0, 1]"));
    }
    let keep = 1.0 - rule.ratio;
    let m = |p: &Peak| rule.measure.of(p.magnitude);
    let first = m(&peaks.entries[0]);
    let mut n = 1;
    for pair in peaks.entries.windows(2) {
        let base = match rule.reference {
            DropReference::PreviousPeak => m(&pair[0]),
            DropReference::FirstPeak => first,
        };
        if m(&pair[1]) < keep * base {
            break;
        }
        n += 1;
    }
    let detections = peaks.entries[..n]
        .iter()
        .map(|p| {
            Ok(ActiveDetection {
                pixel: p.pixel,
                world: pixel_to_world(p.pixel, lis)?,
                magnitude: p.magnitude,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ActiveDetectionResult { detections })
}

/// `local_maxima` followed by `count_and_select` on the map's own lattice.
pub fn detect_active(map: &RadioMap, min_distance: usize, rule: DropRule) -> Result<ActiveDetectionResult> {
    let peaks = local_maxima(map, min_distance);
    count_and_select(&peaks, rule, map.lis())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::ScenarioConfig;

    fn lattice(w: usize, h: usize) -> LisArrayConfig {
        LisArrayConfig {
            elements_x: w,
            elements_y: h,
            ..ScenarioConfig::desk_scale().lis
        }
    }

    fn map_from(w: usize, h: usize, vals: Vec<f64>) -> RadioMap {
        RadioMap::from_magnitudes(w, h, vals, lattice(w, h)).unwrap()
    }

    fn list(mags: &[f64]) -> PeakList {
        PeakList {
            entries: mags
                .iter()
                .enumerate()
                .map(|(i, &m)| Peak {
                    pixel: (i * 10, 0),
                    magnitude: m,
                })
                .collect(),
        }
    }

    #[test]
    fn single_pixel_peak() {
        let mut v = vec![0.0; 100];
        v[34] = 2.0;
        let peaks = local_maxima(&map_from(10, 10, v), 2);
        assert_eq!(peaks.entries, vec![Peak { pixel: (4, 3), magnitude: 2.0 }]);
    }

    #[test]
    fn plateau_gives_one_peak() {
        let mut v = vec![0.0; 64];
        v[9] = 1.0;
        v[10] = 1.0;
        let peaks = local_maxima(&map_from(8, 8, v), 1);
        assert_eq!(peaks.len(), 1);
        assert_eq!(peaks.entries[0].pixel, (1, 1));
    }

    #[test]
    fn drop_rule_stops_after_three() {
        let lis = lattice(64, 1);
        let mags = [1.0, 0.95, 0.92, 0.05];
        for measure in [DropMeasure::Energy, DropMeasure::Magnitude] {
            let rule = DropRule {
                measure,
                ..DropRule::default()
            };
            assert_eq!(count_and_select(&list(&mags), rule, &lis).unwrap().count(), 3);
        }
    }

    #[test]
    fn energy_measure_is_stricter_than_magnitude() {
        // 0.2 keeps 20% of the magnitude but only 4% of the energy
        let lis = lattice(64, 1);
        let mags = [1.0, 0.2];
        let mag = DropRule {
            measure: DropMeasure::Magnitude,
            ..DropRule::default()
        };
        assert_eq!(count_and_select(&list(&mags), mag, &lis).unwrap().count(), 2);
        assert_eq!(count_and_select(&list(&mags), DropRule::default(), &lis).unwrap().count(), 1);
    }

    #[test]
    fn previous_and_first_references_differ() {
        // every step keeps >= 10% of its predecessor, but 0.05 < 0.1 * 1.0
        let lis = lattice(64, 1);
        let mags = [1.0, 0.25, 0.2, 0.05, 0.02];
        let prev_rule = DropRule {
            measure: DropMeasure::Magnitude,
            ..DropRule::default()
        };
        let first_rule = DropRule {
            reference: DropReference::FirstPeak,
            ..prev_rule
        };
        let prev = count_and_select(&list(&mags), prev_rule, &lis).unwrap();
        let first = count_and_select(&list(&mags), first_rule, &lis).unwrap();
        assert_eq!(prev.count(), 5);
        assert_eq!(first.count(), 3);
    }

    #[test]
    fn single_peak_is_one_detection() {
        let lis = lattice(64, 1);
        assert_eq!(
            count_and_select(&list(&[0.3]), DropRule::default(), &lis)
                .unwrap()
                .count(),
            1
        );
    }

    #[test]
    fn empty_peak_list_is_error() {
        let lis = lattice(4, 4);
        assert!(count_and_select(&PeakList::default(), DropRule::default(), &lis).is_err());
    }

    #[test]
    fn world_coordinates_follow_lattice() {
        let lis = lattice(64, 1);
        let r = count_and_select(&list(&[1.0, 0.9]), DropRule::default(), &lis).unwrap();
        let d = r.detections[1];
        assert_eq!(d.world, pixel_to_world((10, 0), &lis).unwrap());
    }

    #[test]
    fn zero_map_has_no_peaks() {
        assert!(local_maxima(&map_from(5, 5, vec![0.0; 25]), 1).is_empty());
    }
}
