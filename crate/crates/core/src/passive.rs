//! Passive human detection from binarized radio maps.
//!
//! Calibration (empty room): every transmission's map is binarized with 1-D
//! k-means, the transmitter's own blob is cut out by template matching, and
//! the results are OR-ed into a masking map whose white pixels are the static
//! scatterers. Detection: the same per-map processing over new transmissions,
//! OR-combined and inverted so that everything reflective is black; OR-ing
//! with the mask whitens the static part, leaving human echoes black. A
//! windowed despeckle and connected-component labeling turn those into
//! positions.

use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::active::{count_and_select, local_maxima, DropRule, PeakList};
use crate::channel::{element_signal, superpose, NoiseSpec};
use crate::error::{Result, SenseError};
use crate::pgm::GrayImage;
use crate::radiomap::{MatchedFilter, RadioMap};
use crate::scene::{subpixel_to_world, Emitter, LisArrayConfig, ScenarioConfig};

/// How a [`BinaryMap`]'s white pixels should be read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Polarity {
    /// White (1) marks high matched-filter energy.
    WhiteIsHighEnergy,
    /// Inverted: reflective regions are black (0).
    Negative,
}

/// 0/1 map on the array lattice; 1 is white.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMap {
    width: usize,
    height: usize,
    bits: Vec<u8>,
    polarity: Polarity,
}

impl BinaryMap {
    pub fn filled(width: usize, height: usize, value: u8, polarity: Polarity) -> Self {
        Self {
            width,
            height,
            bits: vec![(value != 0) as u8; width * height],
            polarity,
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<u8>, polarity: Polarity) -> Result<Self> {
        if bits.len() != width * height {
            return Err(SenseError::domain("bit buffer does not match map size"));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(SenseError::domain("binary map values must be 0 or 1"));
        }
        Ok(Self {
            width,
            height,
            bits,
            polarity,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn polarity(&self) -> Polarity {
        self.polarity
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> u8 {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, value: u8) {
        self.bits[row * self.width + col] = (value != 0) as u8;
    }

    pub fn white_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn black_count(&self) -> usize {
        self.bits.len() - self.white_count()
    }

    /// Flips every pixel and the polarity tag.
    pub fn negate(&self) -> BinaryMap {
        BinaryMap {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| 1 - b).collect(),
            polarity: match self.polarity {
                Polarity::WhiteIsHighEnergy => Polarity::Negative,
                Polarity::Negative => Polarity::WhiteIsHighEnergy,
            },
        }
    }

    fn check_dims(&self, other: &BinaryMap) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(SenseError::DimensionMismatch {
                expected: self.dims(),
                actual: other.dims(),
            });
        }
        Ok(())
    }

    /// Elementwise OR, keeping this map's polarity.
    pub fn or(&self, other: &BinaryMap) -> Result<BinaryMap> {
        self.check_dims(other)?;
        Ok(BinaryMap {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| a | b).collect(),
            polarity: self.polarity,
        })
    }

    /// White renders 255, black 0.
    pub fn to_image(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self.bits.iter().map(|&b| b * 255).collect(),
        }
    }

    /// Pixels at or above 128 read as white.
    pub fn from_image(img: &GrayImage, polarity: Polarity) -> BinaryMap {
        BinaryMap {
            width: img.width,
            height: img.height,
            bits: img.pixels.iter().map(|&p| (p >= 128) as u8).collect(),
            polarity,
        }
    }
}

/// Result of 1-D two-means clustering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoMeans {
    pub low_centroid: f64,
    pub high_centroid: f64,
    /// Values strictly above this belong to the high cluster.
    pub threshold: f64,
    pub iterations: usize,
}

const KMEANS_MAX_ITERATIONS: usize = 100;

/// Lloyd iterations with k = 2 on scalar values, initialized at the minimum
/// and maximum. A value joins the high cluster iff it is strictly closer to
/// the high centroid. Values are sorted once so each assignment step is a
/// binary search against prefix sums.
pub fn two_means(values: &[f64]) -> Result<TwoMeans> {
    let mut sorted: Vec<f64> = values.to_vec();
    if sorted.iter().any(|v| !v.is_finite()) {
        return Err(SenseError::domain("k-means input must be finite"));
    }
    sorted.sort_by(f64::total_cmp);
    let (min, max) = match (sorted.first(), sorted.last()) {
        (Some(&a), Some(&b)) if a < b => (a, b),
        _ => return Err(SenseError::domain("map needs at least two distinct values to binarize")),
    };
    let mut prefix = Vec::with_capacity(sorted.len() + 1);
    prefix.push(0.0);
    for v in &sorted {
        prefix.push(prefix.last().unwrap() + v);
    }
    let n = sorted.len();
    let (mut lo, mut hi) = (min, max);
    // number of values in the low cluster
    let mut split = usize::MAX;
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITERATIONS {
        iterations += 1;
        let mid = 0.5 * (lo + hi);
        let new_split = sorted.partition_point(|&v| v <= mid);
        if new_split == split {
            break;
        }
        split = new_split;
        // both clusters stay non-empty: min <= mid < max
        lo = prefix[split] / split as f64;
        hi = (prefix[n] - prefix[split]) / (n - split) as f64;
    }
    Ok(TwoMeans {
        low_centroid: lo,
        high_centroid: hi,
        threshold: 0.5 * (lo + hi),
        iterations,
    })
}

/// Two-cluster binarization of the map magnitudes; the higher-energy
/// cluster becomes white.
pub fn binarize_kmeans(map: &RadioMap) -> Result<BinaryMap> {
    let km = two_means(map.magnitudes())?;
    let bits = map.magnitudes().iter().map(|&m| (m > km.threshold) as u8).collect();
    BinaryMap::from_bits(map.width(), map.height(), bits, Polarity::WhiteIsHighEnergy)
}

/// Binarized point-source blob expected around a transmitter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransmitterTemplate {
    pub bits: BinaryMap,
    /// Pixel of the template that sits on the transmitter.
    pub focus: (usize, usize),
}

/// Background border kept around the cropped transmitter blob. Without it a
/// blob larger than the template fills the window and the correlation is
/// undefined.
pub const TEMPLATE_PAD: usize = 2;

/// Builds the transmitter template from a noiseless single-emitter map: the
/// emitter sits below the array center at `depth`, the map is binarized and
/// the white blob holding the peak is cropped to its bounding box plus a
/// [`TEMPLATE_PAD`] background border.
pub fn synthesize_template(
    scenario: &ScenarioConfig,
    filter: &MatchedFilter,
    depth: f64,
) -> Result<TransmitterTemplate> {
    let lis = scenario.lis;
    let (span_x, span_y) = lis.footprint();
    let z = scenario.room.height - depth;
    let probe = ScenarioConfig {
        noiseless: true,
        emitters: vec![Emitter::new(
            [lis.origin[0] + span_x / 2.0, lis.origin[1] + span_y / 2.0, z],
            20.0,
        )],
        scatterers: Vec::new(),
        humans: Vec::new(),
        ..scenario.clone()
    };
    let field = superpose(&probe)?;
    let signal = element_signal(&field, &NoiseSpec::noiseless(), lis.wavelength())?;
    let map = filter.apply(&signal)?.with_lis(lis);
    let peak = map.argmax();
    let bin = binarize_kmeans(&map)?;
    // label the white blob: labeling works on black pixels
    let comps = label_components(&bin.negate(), Connectivity::Eight, &lis);
    let label = comps.label_at(peak.0, peak.1);
    let comp = comps
        .components
        .iter()
        .find(|c| c.label == label)
        .ok_or_else(|| SenseError::domain("template peak is not on a white blob"))?;
    let (c0, r0, c1, r1) = comp.bbox;
    let pad = TEMPLATE_PAD;
    let (w, h) = (c1 - c0 + 1 + 2 * pad, r1 - r0 + 1 + 2 * pad);
    let mut bits = BinaryMap::filled(w, h, 0, Polarity::WhiteIsHighEnergy);
    for r in r0..=r1 {
        for c in c0..=c1 {
            if comps.label_at(c, r) == label {
                bits.set(c - c0 + pad, r - r0 + pad, 1);
            }
        }
    }
    Ok(TransmitterTemplate {
        bits,
        focus: (peak.0 - c0 + pad, peak.1 - r0 + pad),
    })
}

/// Template-matching settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchParams {
    /// Minimum normalized cross-correlation for a match.
    pub ncc_threshold: f64,
    /// Search half-width around a seeded peak, in pixels.
    pub search_radius: usize,
    /// Extra pixels erased around the matched box.
    pub erase_margin: usize,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            ncc_threshold: 0.6,
            search_radius: 3,
            erase_margin: 1,
        }
    }
}

/// Outcome of one template search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemplateMatch {
    /// Map pixel under the template focus.
    pub focus_pixel: (usize, usize),
    pub template_index: usize,
    pub score: f64,
    pub removed: bool,
}

/// Zero-mean normalized cross-correlation of `tpl` with the map, the focus
/// placed on `at`. Only the overlapping part is compared; flat windows score 0.
fn ncc_at(bin: &BinaryMap, tpl: &TransmitterTemplate, at: (usize, usize)) -> f64 {
    let (tw, th) = tpl.bits.dims();
    let ox = at.0 as isize - tpl.focus.0 as isize;
    let oy = at.1 as isize - tpl.focus.1 as isize;
    let (mut n, mut st, mut si, mut stt, mut sii, mut sti) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for ty in 0..th {
        let y = oy + ty as isize;
        if y < 0 || y >= bin.height() as isize {
            continue;
        }
        for tx in 0..tw {
            let x = ox + tx as isize;
            if x < 0 || x >= bin.width() as isize {
                continue;
            }
            let t = tpl.bits.get(tx, ty) as f64;
            let i = bin.get(x as usize, y as usize) as f64;
            n += 1.0;
            st += t;
            si += i;
            stt += t * t;
            sii += i * i;
            sti += t * i;
        }
    }
    if n == 0.0 {
        return 0.0;
    }
    let cov = sti - st * si / n;
    let vt = stt - st * st / n;
    let vi = sii - si * si / n;
    if vt <= 0.0 || vi <= 0.0 {
        return 0.0;
    }
    cov / (vt * vi).sqrt()
}

fn erase_box(out: &mut BinaryMap, tpl: &TransmitterTemplate, at: (usize, usize), margin: usize) {
    let (tw, th) = tpl.bits.dims();
    let x0 = at.0 as isize - tpl.focus.0 as isize - margin as isize;
    let y0 = at.1 as isize - tpl.focus.1 as isize - margin as isize;
    let x1 = x0 + (tw + 2 * margin) as isize;
    let y1 = y0 + (th + 2 * margin) as isize;
    for y in y0.max(0)..y1.min(out.height() as isize) {
        for x in x0.max(0)..x1.min(out.width() as isize) {
            out.set(x as usize, y as usize, 0);
        }
    }
}

/// Finds each transmitter's blob by template matching and blacks out the
/// matched box. With `known_peaks` the search runs within
/// `params.search_radius` of every peak, trying all templates; without, each
/// template is searched over the whole map once. Matches scoring below
/// `params.ncc_threshold` leave the map untouched.
pub fn remove_active_pattern(
    bin: &BinaryMap,
    templates: &[TransmitterTemplate],
    known_peaks: Option<&PeakList>,
    params: &MatchParams,
) -> Result<(BinaryMap, Vec<TemplateMatch>)> {
    if templates.is_empty() {
        return Err(SenseError::domain("at least one template is required"));
    }
    let (w, h) = bin.dims();
    let mut searches: Vec<(Vec<usize>, Vec<(usize, usize)>)> = Vec::new();
    match known_peaks {
        Some(peaks) => {
            let r = params.search_radius;
            for p in &peaks.entries {
                let (pc, pr) = p.pixel;
                let mut cands = Vec::new();
                for y in pr.saturating_sub(r)..=(pr + r).min(h - 1) {
                    for x in pc.saturating_sub(r)..=(pc + r).min(w - 1) {
                        cands.push((x, y));
                    }
                }
                searches.push(((0..templates.len()).collect(), cands));
            }
        }
        None => {
            let all: Vec<(usize, usize)> = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).collect();
            for t in 0..templates.len() {
                searches.push((vec![t], all.clone()));
            }
        }
    }

    let mut out = bin.clone();
    let mut report = Vec::with_capacity(searches.len());
    for (tpls, cands) in searches {
        let mut best: Option<TemplateMatch> = None;
        for &t in &tpls {
            for &at in &cands {
                let score = ncc_at(bin, &templates[t], at);
                if best.is_none_or(|b| score > b.score) {
                    best = Some(TemplateMatch {
                        focus_pixel: at,
                        template_index: t,
                        score,
                        removed: false,
                    });
                }
            }
        }
        if let Some(mut m) = best {
            if m.score >= params.ncc_threshold {
                erase_box(&mut out, &templates[m.template_index], m.focus_pixel, params.erase_margin);
                m.removed = true;
            }
            report.push(m);
        }
    }
    Ok((out, report))
}

/// Calibrated map of the static scene: white = scatterer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskingMap {
    pub bits: BinaryMap,
    /// Number of transmissions OR-ed together.
    pub source_count: usize,
}

/// Elementwise OR of active-pattern-free binary maps.
pub fn build_masking_map(maps: &[BinaryMap]) -> Result<MaskingMap> {
    let first = maps
        .first()
        .ok_or_else(|| SenseError::domain("masking map needs at least one binary map"))?;
    let mut acc = first.clone();
    for m in &maps[1..] {
        acc = acc.or(m)?;
    }
    Ok(MaskingMap {
        bits: acc,
        source_count: maps.len(),
    })
}

/// Sidecar metadata stored next to a mask image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskMetadata {
    pub source_count: usize,
    pub width: usize,
    pub height: usize,
    /// Hash of the static part of the calibration scene.
    pub scenario_hash: String,
}

impl MaskingMap {
    /// Writes `<path>` as PGM and `<path>.json` as metadata.
    pub fn save(&self, path: &Path, scenario_hash: &str) -> Result<()> {
        self.bits.to_image().save(path)?;
        let meta = MaskMetadata {
            source_count: self.source_count,
            width: self.bits.width(),
            height: self.bits.height(),
            scenario_hash: scenario_hash.to_owned(),
        };
        let mut f = std::fs::File::create(sidecar_path(path))?;
        let text = serde_json::to_string_pretty(&meta).map_err(|e| SenseError::Io(e.to_string()))?;
        f.write_all(text.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(MaskingMap, MaskMetadata)> {
        let img = GrayImage::load(path)?;
        let text = std::fs::read_to_string(sidecar_path(path))?;
        let meta: MaskMetadata = serde_json::from_str(&text).map_err(|e| SenseError::Parse(e.to_string()))?;
        if (meta.width, meta.height) != (img.width, img.height) {
            return Err(SenseError::DimensionMismatch {
                expected: (meta.width, meta.height),
                actual: (img.width, img.height),
            });
        }
        Ok((
            MaskingMap {
                bits: BinaryMap::from_image(&img, Polarity::WhiteIsHighEnergy),
                source_count: meta.source_count,
            },
            meta,
        ))
    }
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// OR of a negative map with the mask: static pixels turn white, human
/// echoes stay black.
pub fn subtract_static(negative: &BinaryMap, mask: &MaskingMap) -> Result<BinaryMap> {
    negative.or(&mask.bits)
}

/// Tiles the map with disjoint `kc x kc` windows (clipped at the right and
/// bottom edges) and whitens every window whose black fraction is below `th`.
pub fn despeckle(bin: &BinaryMap, kc: usize, th: f64) -> Result<BinaryMap> {
    if kc < 1 || !(0.0..=1.0).contains(&th) {
        return Err(SenseError::domain("despeckle needs kc >= 1 and 0 <= th <= 1"));
    }
    let (w, h) = bin.dims();
    let mut out = bin.clone();
    for y0 in (0..h).step_by(kc) {
        for x0 in (0..w).step_by(kc) {
            let (x1, y1) = ((x0 + kc).min(w), (y0 + kc).min(h));
            let total = (x1 - x0) * (y1 - y0);
            let black = (y0..y1)
                .flat_map(|y| (x0..x1).map(move |x| (x, y)))
                .filter(|&(x, y)| bin.get(x, y) == 0)
                .count();
            if (black as f64) < th * total as f64 {
                for y in y0..y1 {
                    for x in x0..x1 {
                        out.set(x, y, 1);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

/// One connected black region.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub label: u32,
    /// Mean (col, row) of member pixels.
    pub centroid: (f64, f64),
    pub world: (f64, f64),
    pub area: usize,
    /// (min_col, min_row, max_col, max_row)
    pub bbox: (usize, usize, usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledComponents {
    pub width: usize,
    pub height: usize,
    /// 0 = background, otherwise 1..=component_count.
    pub labels: Vec<u32>,
    pub components: Vec<Component>,
}

impl LabeledComponents {
    pub fn component_count(&self) -> usize {
        self.components.len()
    }

    pub fn label_at(&self, col: usize, row: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    /// Drops components smaller than `min_area` and renumbers the rest in
    /// their original order.
    pub fn filter_min_area(&self, min_area: usize) -> LabeledComponents {
        let mut remap = vec![0u32; self.components.len() + 1];
        let mut kept = Vec::new();
        for c in &self.components {
            if c.area >= min_area {
                let label = kept.len() as u32 + 1;
                remap[c.label as usize] = label;
                kept.push(Component { label, ..c.clone() });
            }
        }
        LabeledComponents {
            width: self.width,
            height: self.height,
            labels: self.labels.iter().map(|&l| remap[l as usize]).collect(),
            components: kept,
        }
    }
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller index becomes root
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Connected components of the black pixels. Labels follow the row-major
/// order in which each component is first touched.
pub fn label_components(bin: &BinaryMap, connectivity: Connectivity, lis: &LisArrayConfig) -> LabeledComponents {
    let (w, h) = bin.dims();
    let mut ds = DisjointSet::new(w * h);
    let black = |x: usize, y: usize| bin.get(x, y) == 0;
    for y in 0..h {
        for x in 0..w {
            if !black(x, y) {
                continue;
            }
            let i = y * w + x;
            if x > 0 && black(x - 1, y) {
                ds.union(i, i - 1);
            }
            if y > 0 {
                if black(x, y - 1) {
                    ds.union(i, i - w);
                }
                if connectivity == Connectivity::Eight {
                    if x > 0 && black(x - 1, y - 1) {
                        ds.union(i, i - w - 1);
                    }
                    if x + 1 < w && black(x + 1, y - 1) {
                        ds.union(i, i - w + 1);
                    }
                }
            }
        }
    }

    let mut root_label = vec![0u32; w * h];
    let mut labels = vec![0u32; w * h];
    // (sum_x, sum_y, area, bbox)
    let mut stats: Vec<(f64, f64, usize, (usize, usize, usize, usize))> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !black(x, y) {
                continue;
            }
            let root = ds.find(y * w + x);
            if root_label[root] == 0 {
                stats.push((0.0, 0.0, 0, (x, y, x, y)));
                root_label[root] = stats.len() as u32;
            }
            let label = root_label[root];
            labels[y * w + x] = label;
            let s = &mut stats[label as usize - 1];
            s.0 += x as f64;
            s.1 += y as f64;
            s.2 += 1;
            s.3 = (s.3 .0.min(x), s.3 .1.min(y), s.3 .2.max(x), s.3 .3.max(y));
        }
    }
    let components = stats
        .into_iter()
        .enumerate()
        .map(|(i, (sx, sy, area, bbox))| {
            let centroid = (sx / area as f64, sy / area as f64);
            Component {
                label: i as u32 + 1,
                centroid,
                world: subpixel_to_world(centroid, lis),
                area,
                bbox,
            }
        })
        .collect();
    LabeledComponents {
        width: w,
        height: h,
        labels,
        components,
    }
}

/// Knobs of the passive pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassiveParams {
    /// Despeckle window side `K_c`.
    pub kc: usize,
    /// Despeckle black-fraction threshold `T_h`.
    pub th: f64,
    /// Components smaller than this (pixels) are discarded.
    pub min_area: usize,
    pub connectivity: Connectivity,
    pub matching: MatchParams,
    /// Peak window half-width `K_a` used to seed template matching.
    pub min_distance: usize,
    /// Transmitters per map when known; `None` infers it with the drop rule.
    pub transmitters_per_map: Option<usize>,
    pub drop_rule: DropRule,
}

impl Default for PassiveParams {
    fn default() -> Self {
        Self {
            kc: 2,
            th: 0.5,
            min_area: 3,
            connectivity: Connectivity::Eight,
            matching: MatchParams::default(),
            min_distance: crate::active::DEFAULT_MIN_DISTANCE,
            transmitters_per_map: Some(1),
            drop_rule: DropRule::default(),
        }
    }
}

/// Binarizes one map and removes its transmitter blobs.
pub fn clean_binary_map(
    map: &RadioMap,
    templates: &[TransmitterTemplate],
    params: &PassiveParams,
) -> Result<BinaryMap> {
    let bin = binarize_kmeans(map)?;
    let peaks = local_maxima(map, params.min_distance);
    let seeds = match params.transmitters_per_map {
        Some(k) => peaks.top(k),
        None if peaks.is_empty() => peaks,
        None => {
            let sel = count_and_select(&peaks, params.drop_rule, map.lis())?;
            peaks.top(sel.count())
        }
    };
    let (out, _) = remove_active_pattern(&bin, templates, Some(&seeds), &params.matching)?;
    Ok(out)
}

/// Offline scan: one cleaned binary map per empty-room transmission, OR-ed.
pub fn calibrate_mask(
    maps: &[RadioMap],
    templates: &[TransmitterTemplate],
    params: &PassiveParams,
) -> Result<MaskingMap> {
    let cleaned = maps
        .iter()
        .map(|m| clean_binary_map(m, templates, params))
        .collect::<Result<Vec<_>>>()?;
    build_masking_map(&cleaned)
}

/// Intermediate products of [`detect_passive`].
#[derive(Debug, Clone, PartialEq)]
pub struct PassiveStages {
    /// OR of cleaned binary maps (white = reflective).
    pub combined: BinaryMap,
    /// Inverted combination (reflective = black).
    pub negative: BinaryMap,
    /// Negative OR mask.
    pub subtracted: BinaryMap,
    pub despeckled: BinaryMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassiveDetection {
    pub components: LabeledComponents,
    pub stages: PassiveStages,
}

/// binarize -> remove transmitters -> combine -> negate -> OR mask ->
/// despeckle -> label -> area filter.
pub fn detect_passive(
    maps: &[RadioMap],
    mask: Option<&MaskingMap>,
    templates: &[TransmitterTemplate],
    params: &PassiveParams,
) -> Result<PassiveDetection> {
    let mask = mask.ok_or_else(|| SenseError::domain("passive detection requires a calibrated masking map"))?;
    let first = maps
        .first()
        .ok_or_else(|| SenseError::domain("passive detection needs at least one map"))?;
    let lis = *first.lis();
    let combined = build_masking_map(
        &maps
            .iter()
            .map(|m| clean_binary_map(m, templates, params))
            .collect::<Result<Vec<_>>>()?,
    )?
    .bits;
    let negative = combined.negate();
    let subtracted = subtract_static(&negative, mask)?;
    let despeckled = despeckle(&subtracted, params.kc, params.th)?;
    let components = label_components(&despeckled, params.connectivity, &lis).filter_min_area(params.min_area);
    Ok(PassiveDetection {
        components,
        stages: PassiveStages {
            combined,
            negative,
            subtracted,
            despeckled,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::ScenarioConfig;

    fn lis(w: usize, h: usize) -> LisArrayConfig {
        LisArrayConfig {
            elements_x: w,
            elements_y: h,
            ..ScenarioConfig::desk_scale().lis
        }
    }

    fn parse(rows: &[&str], polarity: Polarity) -> BinaryMap {
        let h = rows.len();
        let w = rows[0].len();
        let bits = rows
            .iter()
            .flat_map(|r| r.bytes().map(|b| (b == b'#') as u8))
            .collect();
        BinaryMap::from_bits(w, h, bits, polarity).unwrap()
    }

    fn map_from(w: usize, h: usize, vals: Vec<f64>) -> RadioMap {
        RadioMap::from_magnitudes(w, h, vals, lis(w, h)).unwrap()
    }

    #[test]
    fn kmeans_two_values_split_exactly() {
        let vals = vec![0.0, 10.0, 0.0, 10.0, 10.0, 0.0];
        let b = binarize_kmeans(&map_from(3, 2, vals)).unwrap();
        assert_eq!(b.bits(), &[0, 1, 0, 1, 1, 0]);
        assert_eq!(b.polarity(), Polarity::WhiteIsHighEnergy);
    }

    #[test]
    fn kmeans_constant_map_is_error() {
        assert!(binarize_kmeans(&map_from(2, 2, vec![3.0; 4])).is_err());
    }

    #[test]
    fn kmeans_converges_to_fixpoint() {
        let vals: Vec<f64> = (0..50).map(|i| if i < 40 { i as f64 * 0.01 } else { 5.0 + i as f64 * 0.01 }).collect();
        let km = two_means(&vals).unwrap();
        assert!(km.iterations < KMEANS_MAX_ITERATIONS);
        assert!(km.threshold > 0.39 && km.threshold < 5.4);
    }

    #[test]
    fn exact_template_instance_is_removed() {
        let tpl = TransmitterTemplate {
            bits: parse(&[".#.", "###", ".#."], Polarity::WhiteIsHighEnergy),
            focus: (1, 1),
        };
        let map = parse(
            &["........", "....#...", "...###..", "....#...", "........"],
            Polarity::WhiteIsHighEnergy,
        );
        let params = MatchParams {
            erase_margin: 0,
            ..MatchParams::default()
        };
        let (out, report) = remove_active_pattern(&map, std::slice::from_ref(&tpl), None, &params).unwrap();
        assert_eq!(out.white_count(), 0);
        assert_eq!(report[0].focus_pixel, (4, 2));
        assert!((report[0].score - 1.0).abs() < 1e-12);

        let seeds = PeakList {
            entries: vec![crate::active::Peak {
                pixel: (5, 3),
                magnitude: 1.0,
            }],
        };
        let (out, _) = remove_active_pattern(&map, &[tpl], Some(&seeds), &params).unwrap();
        assert_eq!(out.white_count(), 0);
    }

    #[test]
    fn absent_template_leaves_map_alone() {
        let tpl = TransmitterTemplate {
            bits: parse(&[".#.", "###", ".#."], Polarity::WhiteIsHighEnergy),
            focus: (1, 1),
        };
        let map = parse(&["#.......", "........", "......##", "......##"], Polarity::WhiteIsHighEnergy);
        let (out, report) = remove_active_pattern(&map, &[tpl], None, &MatchParams::default()).unwrap();
        assert_eq!(out, map);
        assert!(!report[0].removed);
        assert!(report[0].score < 0.6);
    }

    #[test]
    fn no_templates_is_error() {
        let map = BinaryMap::filled(4, 4, 0, Polarity::WhiteIsHighEnergy);
        assert!(remove_active_pattern(&map, &[], None, &MatchParams::default()).is_err());
    }

    #[test]
    fn masking_single_and_disjoint_union() {
        let a = parse(&["#...", "....", "...."], Polarity::WhiteIsHighEnergy);
        let b = parse(&["....", "....", "..##"], Polarity::WhiteIsHighEnergy);
        assert_eq!(build_masking_map(std::slice::from_ref(&a)).unwrap().bits, a);
        let m = build_masking_map(&[a, b]).unwrap();
        assert_eq!(m.bits, parse(&["#...", "....", "..##"], Polarity::WhiteIsHighEnergy));
        assert_eq!(m.source_count, 2);
    }

    #[test]
    fn masking_dimension_mismatch() {
        let a = BinaryMap::filled(4, 4, 0, Polarity::WhiteIsHighEnergy);
        let b = BinaryMap::filled(4, 5, 0, Polarity::WhiteIsHighEnergy);
        assert!(matches!(
            build_masking_map(&[a, b]),
            Err(SenseError::DimensionMismatch { .. })
        ));
        assert!(build_masking_map(&[]).is_err());
    }

    #[test]
    fn subtract_static_cases() {
        let mask = MaskingMap {
            bits: parse(&["##..", "##.."], Polarity::WhiteIsHighEnergy),
            source_count: 1,
        };
        let white = BinaryMap::filled(4, 2, 1, Polarity::Negative);
        assert_eq!(subtract_static(&white, &mask).unwrap(), white);
        let exact = parse(&["..##", "..##"], Polarity::Negative);
        assert_eq!(subtract_static(&exact, &mask).unwrap().black_count(), 0);
        let with_human = parse(&"..#. ..##".split(' ').collect::<Vec<_>>(), Polarity::Negative);
        let out = subtract_static(&with_human, &mask).unwrap();
        assert_eq!(out.black_count(), 1);
        assert_eq!(out.get(3, 0), 0);
    }

    #[test]
    fn despeckle_isolated_pixel_and_block() {
        let speck = parse(&["####", "#.##", "####", "####"], Polarity::Negative);
        assert_eq!(despeckle(&speck, 2, 0.5).unwrap().black_count(), 0);

        let block = BinaryMap::filled(4, 4, 0, Polarity::Negative);
        assert_eq!(despeckle(&block, 2, 0.5).unwrap(), block);

        let white = BinaryMap::filled(5, 3, 1, Polarity::Negative);
        assert_eq!(despeckle(&white, 2, 0.5).unwrap(), white);
    }

    #[test]
    fn despeckle_clips_edge_tiles() {
        // 3x3 with K_c = 2: the corner tile (2, 2) is a single pixel, 1/1 black
        let m = parse(&["###", "###", "##."], Polarity::Negative);
        assert_eq!(despeckle(&m, 2, 0.5).unwrap(), m);
    }

    #[test]
    fn label_empty_and_diagonal() {
        let l = lis(3, 3);
        let white = BinaryMap::filled(3, 3, 1, Polarity::Negative);
        assert_eq!(label_components(&white, Connectivity::Eight, &l).component_count(), 0);

        let diag = parse(&[".##", "#.#", "###"], Polarity::Negative);
        assert_eq!(label_components(&diag, Connectivity::Eight, &l).component_count(), 1);
        assert_eq!(label_components(&diag, Connectivity::Four, &l).component_count(), 2);
    }

    #[test]
    fn labels_follow_first_touch_order() {
        let l = lis(5, 3);
        let m = parse(&["###..", ".####", "..###"], Polarity::Negative);
        // black pixels: (3,0),(4,0) then (0,1) then (0,2),(1,2)
        let lc = label_components(&m, Connectivity::Four, &l);
        assert_eq!(lc.component_count(), 2);
        assert_eq!(lc.label_at(3, 0), 1);
        assert_eq!(lc.label_at(0, 1), 2);
        let c = &lc.components[1];
        assert_eq!(c.area, 3);
        assert_eq!(c.bbox, (0, 1, 1, 2));
        assert!((c.centroid.0 - 1.0 / 3.0).abs() < 1e-12);
        assert!((c.centroid.1 - 5.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn area_filter_renumbers() {
        let l = lis(6, 2);
        let m = parse(&[".#..##", "##..##"], Polarity::Negative);
        let lc = label_components(&m, Connectivity::Four, &l);
        assert_eq!(lc.component_count(), 2);
        let f = lc.filter_min_area(4);
        assert_eq!(f.component_count(), 1);
        assert_eq!(f.label_at(2, 0), 1);
        assert_eq!(f.label_at(0, 0), 0);
    }

    #[test]
    fn missing_mask_is_error() {
        let map = map_from(4, 4, (0..16).map(|v| v as f64).collect());
        let tpl = TransmitterTemplate {
            bits: BinaryMap::filled(1, 1, 1, Polarity::WhiteIsHighEnergy),
            focus: (0, 0),
        };
        assert!(detect_passive(&[map], None, &[tpl], &PassiveParams::default()).is_err());
    }

    #[test]
    fn polarity_algebra() {
        let m = parse(&["#..#", ".##."], Polarity::WhiteIsHighEnergy);
        assert_eq!(m.negate().negate(), m);
        assert_eq!(m.negate().polarity(), Polarity::Negative);
        let black_mask = MaskingMap {
            bits: BinaryMap::filled(4, 2, 1, Polarity::WhiteIsHighEnergy),
            source_count: 1,
        };
        assert_eq!(subtract_static(&m.negate(), &black_mask).unwrap().black_count(), 0);
    }

    #[test]
    fn mask_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.pgm");
        let mask = MaskingMap {
            bits: parse(&["#..#", ".##."], Polarity::WhiteIsHighEnergy),
            source_count: 10,
        };
        mask.save(&path, "abc").unwrap();
        let (back, meta) = MaskingMap::load(&path).unwrap();
        assert_eq!(back, mask);
        assert_eq!(meta.scenario_hash, "abc");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_map(w: usize, h: usize) -> impl Strategy<Value = BinaryMap> {
            proptest::collection::vec(0u8..2, w * h)
                .prop_map(move |bits| BinaryMap::from_bits(w, h, bits, Polarity::Negative).unwrap())
        }

        proptest! {
            #[test]
            fn despeckle_is_idempotent(m in arb_map(9, 7), kc in 1usize..4, th in 0.0f64..1.0) {
                let once = despeckle(&m, kc, th).unwrap();
                prop_assert_eq!(despeckle(&once, kc, th).unwrap(), once);
            }

            #[test]
            fn adding_a_transmission_never_shrinks_mask(maps in proptest::collection::vec(arb_map(6, 5), 1..6), extra in arb_map(6, 5)) {
                let base = build_masking_map(&maps).unwrap();
                let mut more = maps.clone();
                more.push(extra);
                let grown = build_masking_map(&more).unwrap();
                for (a, b) in base.bits.bits().iter().zip(grown.bits.bits()) {
                    prop_assert!(b >= a);
                }
            }
        }
    }
}
