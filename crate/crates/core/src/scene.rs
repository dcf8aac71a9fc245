//! Scene geometry and configuration.
//!
//! World coordinates are in meters with the origin at a floor corner of the
//! room; the surface hangs on the ceiling plane `z = room.height` and element
//! `(col, row)` sits at `origin + (col, row) * spacing`.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Result, SenseError};

/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Default amplitude reflection coefficient for metallic scatterers.
pub const DEFAULT_SCATTERER_REFLECTION: f64 = 0.7;

/// Default amplitude reflection coefficient for human bodies.
pub const DEFAULT_HUMAN_REFLECTION: f64 = 0.35;

/// Default transmitter height above the floor (m).
pub const DEFAULT_EMITTER_HEIGHT: f64 = 1.8;

/// Slack used when comparing the array footprint against the room.
const FOOTPRINT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomGeometry {
    pub length_x: f64,
    pub length_y: f64,
    pub height: f64,
}

/// Lattice description of the ceiling-mounted surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LisArrayConfig {
    pub elements_x: usize,
    pub elements_y: usize,
    /// Inter-element spacing, also the pixel pitch of every map.
    pub spacing: f64,
    pub carrier_frequency: f64,
    /// World (x, y) of element (0, 0).
    pub origin: [f64; 2],
}

impl LisArrayConfig {
    /// Array with `elements_x * elements_y` elements at half-wavelength
    /// spacing, centered in `room`.
    pub fn centered_half_wavelength(
        room: &RoomGeometry,
        elements_x: usize,
        elements_y: usize,
        carrier_frequency: f64,
    ) -> Self {
        let spacing = SPEED_OF_LIGHT / carrier_frequency / 2.0;
        Self::centered(room, elements_x, elements_y, spacing, carrier_frequency)
    }

    pub fn centered(
        room: &RoomGeometry,
        elements_x: usize,
        elements_y: usize,
        spacing: f64,
        carrier_frequency: f64,
    ) -> Self {
        let span_x = elements_x.saturating_sub(1) as f64 * spacing;
        let span_y = elements_y.saturating_sub(1) as f64 * spacing;
        Self {
            elements_x,
            elements_y,
            spacing,
            carrier_frequency,
            origin: [(room.length_x - span_x) / 2.0, (room.length_y - span_y) / 2.0],
        }
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_frequency
    }

    pub fn element_count(&self) -> usize {
        self.elements_x * self.elements_y
    }

    /// Physical extent `((M1 - 1) * spacing, (M2 - 1) * spacing)`.
    pub fn footprint(&self) -> (f64, f64) {
        (
            self.elements_x.saturating_sub(1) as f64 * self.spacing,
            self.elements_y.saturating_sub(1) as f64 * self.spacing,
        )
    }

    /// 3-D position of an element on the ceiling plane at `ceiling_z`.
    pub fn element_position(&self, col: usize, row: usize, ceiling_z: f64) -> [f64; 3] {
        [
            self.origin[0] + col as f64 * self.spacing,
            self.origin[1] + row as f64 * self.spacing,
            ceiling_z,
        ]
    }
}

/// An active transmitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Emitter {
    pub position: [f64; 3],
    /// Transmit power in dBm.
    pub tx_power: f64,
    /// Phase of the transmitted symbol for the current snapshot (radians).
    #[serde(default)]
    pub symbol_phase: f64,
}

impl Emitter {
    pub fn new(position: [f64; 3], tx_power: f64) -> Self {
        Self {
            position,
            tx_power,
            symbol_phase: 0.0,
        }
    }

    /// Square root of the transmit power in watts.
    pub fn amplitude(&self) -> f64 {
        10f64.powf((self.tx_power - 30.0) / 20.0)
    }
}

/// A static metallic cylinder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scatterer {
    pub center: [f64; 2],
    pub radius: f64,
    pub height: f64,
    #[serde(default = "default_scatterer_reflection")]
    pub reflection_coeff: f64,
}

impl Scatterer {
    pub fn new(center: [f64; 2], radius: f64, height: f64) -> Self {
        Self {
            center,
            radius,
            height,
            reflection_coeff: DEFAULT_SCATTERER_REFLECTION,
        }
    }
}

/// A passive human body, modeled as an upright box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Human {
    pub center: [f64; 2],
    pub extent_x: f64,
    pub extent_y: f64,
    pub height: f64,
    #[serde(default = "default_human_reflection")]
    pub reflection_coeff: f64,
}

impl Human {
    /// Average adult body box: 0.3 x 0.5 x 1.7 m.
    pub fn average(center: [f64; 2]) -> Self {
        Self {
            center,
            extent_x: 0.3,
            extent_y: 0.5,
            height: 1.7,
            reflection_coeff: DEFAULT_HUMAN_REFLECTION,
        }
    }
}

fn default_scatterer_reflection() -> f64 {
    DEFAULT_SCATTERER_REFLECTION
}

fn default_human_reflection() -> f64 {
    DEFAULT_HUMAN_REFLECTION
}

fn default_averaging() -> usize {
    1
}

/// Full description of one simulated snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Average SNR in dB at the surface output.
    pub snr_db: f64,
    /// Number of noisy samples averaged per coherence interval.
    #[serde(default = "default_averaging")]
    pub averaging_count: usize,
    #[serde(default)]
    pub rng_seed: u64,
    /// Skip noise injection entirely.
    #[serde(default)]
    pub noiseless: bool,
    pub room: RoomGeometry,
    pub lis: LisArrayConfig,
    #[serde(default)]
    pub emitters: Vec<Emitter>,
    #[serde(default)]
    pub scatterers: Vec<Scatterer>,
    #[serde(default)]
    pub humans: Vec<Human>,
}

impl ScenarioConfig {
    /// Full-scale scene: 10.34 x 10.34 x 8 m room, 259 x 259 elements at
    /// 3.5 GHz, three metallic cylinders and one 20 dBm user at 1.8 m.
    ///
    /// 259 elements at half-wavelength would span 11.05 m, so the spacing is
    /// shrunk until the array exactly covers the room.
    pub fn full_scale() -> Self {
        let room = RoomGeometry {
            length_x: 10.34,
            length_y: 10.34,
            height: 8.0,
        };
        let spacing = room.length_x / 258.0;
        let lis = LisArrayConfig::centered(&room, 259, 259, spacing, 3.5e9);
        Self {
            snr_db: 0.0,
            averaging_count: 1,
            rng_seed: 0,
            noiseless: false,
            room,
            lis,
            emitters: vec![Emitter::new([5.0, 5.5, DEFAULT_EMITTER_HEIGHT], 20.0)],
            scatterers: vec![
                Scatterer::new([2.5, 2.5], 0.5, 2.0),
                Scatterer::new([7.5, 3.0], 0.5, 2.0),
                Scatterer::new([4.0, 7.8], 0.5, 2.0),
            ],
            humans: Vec::new(),
        }
    }

    /// Desk-scale scene with a 129 x 129 half-wavelength array at 3.5 GHz in a
    /// 5.6 x 5.6 x 5 m room. Matched depth is 3.2 m.
    pub fn desk_scale() -> Self {
        let room = RoomGeometry {
            length_x: 5.6,
            length_y: 5.6,
            height: 5.0,
        };
        let lis = LisArrayConfig::centered_half_wavelength(&room, 129, 129, 3.5e9);
        Self {
            snr_db: 0.0,
            averaging_count: 1,
            rng_seed: 0,
            noiseless: false,
            room,
            lis,
            emitters: vec![Emitter::new([2.8, 3.0, DEFAULT_EMITTER_HEIGHT], 20.0)],
            scatterers: vec![
                Scatterer::new([1.4, 1.5], 0.5, 2.0),
                Scatterer::new([4.2, 1.9], 0.5, 2.0),
                Scatterer::new([2.3, 4.3], 0.5, 2.0),
            ],
            humans: Vec::new(),
        }
    }

    /// Default matched-filter design depth: ceiling height minus the nominal
    /// transmitter height.
    pub fn default_design_depth(&self) -> f64 {
        self.room.height - DEFAULT_EMITTER_HEIGHT
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| SenseError::Parse(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| SenseError::Parse(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }
}

/// One failed invariant of a [`ScenarioConfig`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl Violation {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn positive_finite(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

fn inside_room(room: &RoomGeometry, x: f64, y: f64, half_x: f64, half_y: f64) -> bool {
    x - half_x >= 0.0 && x + half_x <= room.length_x && y - half_y >= 0.0 && y + half_y <= room.length_y
}

/// Checks every scene invariant. Violations come back in a fixed order:
/// scalars, room, array, emitters, scatterers, humans.
pub fn validate_config(cfg: &ScenarioConfig) -> Vec<Violation> {
    let mut out = Vec::new();

    if !cfg.snr_db.is_finite() {
        out.push(Violation::new("snr_db", "must be finite"));
    }
    if cfg.averaging_count < 1 {
        out.push(Violation::new("averaging_count", "S must be >= 1"));
    }

    let room = &cfg.room;
    let room_ok = positive_finite(room.length_x) && positive_finite(room.length_y) && positive_finite(room.height);
    if !room_ok {
        out.push(Violation::new("room", "all dimensions must be > 0"));
    }

    let lis = &cfg.lis;
    if lis.elements_x < 1 || lis.elements_y < 1 {
        out.push(Violation::new("lis", "element counts must be >= 1"));
    }
    if !positive_finite(lis.spacing) {
        out.push(Violation::new("lis.spacing", "must be > 0"));
    }
    if !positive_finite(lis.carrier_frequency) {
        out.push(Violation::new("lis.carrier_frequency", "must be > 0"));
    }
    if room_ok && positive_finite(lis.spacing) {
        let (span_x, span_y) = lis.footprint();
        let [ox, oy] = lis.origin;
        if ox < -FOOTPRINT_TOLERANCE || ox + span_x > room.length_x + FOOTPRINT_TOLERANCE {
            out.push(Violation::new(
                "lis",
                format!(
                    "footprint along x ({:.4} m from x = {:.4}) exceeds room length {:.4} m",
                    span_x, ox, room.length_x
                ),
            ));
        }
        if oy < -FOOTPRINT_TOLERANCE || oy + span_y > room.length_y + FOOTPRINT_TOLERANCE {
            out.push(Violation::new(
                "lis",
                format!(
                    "footprint along y ({:.4} m from y = {:.4}) exceeds room length {:.4} m",
                    span_y, oy, room.length_y
                ),
            ));
        }
    }

    for (i, e) in cfg.emitters.iter().enumerate() {
        let field = format!("emitters[{i}]");
        let [x, y, z] = e.position;
        if !(x.is_finite() && y.is_finite() && z.is_finite()) || !e.tx_power.is_finite() || !e.symbol_phase.is_finite() {
            out.push(Violation::new(&field, "non-finite value"));
            continue;
        }
        if !inside_room(room, x, y, 0.0, 0.0) {
            out.push(Violation::new(&field, "emitter outside room footprint"));
        }
        if z >= room.height {
            out.push(Violation::new(&field, "emitter on LIS plane"));
        } else if z <= 0.0 {
            out.push(Violation::new(&field, "emitter at or below floor"));
        }
    }

    for (i, s) in cfg.scatterers.iter().enumerate() {
        let field = format!("scatterers[{i}]");
        if !positive_finite(s.radius) || !positive_finite(s.height) {
            out.push(Violation::new(&field, "radius and height must be > 0"));
        } else if !inside_room(room, s.center[0], s.center[1], s.radius, s.radius) {
            out.push(Violation::new(&field, "footprint outside room"));
        }
        if s.height >= room.height {
            out.push(Violation::new(&field, "reaches the LIS plane"));
        }
        if !(s.reflection_coeff > 0.0 && s.reflection_coeff <= 1.0) {
            out.push(Violation::new(&field, "reflection_coeff must lie in (0, 1]"));
        }
    }

    for (i, h) in cfg.humans.iter().enumerate() {
        let field = format!("humans[{i}]");
        if !positive_finite(h.extent_x) || !positive_finite(h.extent_y) || !positive_finite(h.height) {
            out.push(Violation::new(&field, "extents and height must be > 0"));
        } else if !inside_room(room, h.center[0], h.center[1], h.extent_x / 2.0, h.extent_y / 2.0) {
            out.push(Violation::new(&field, "footprint outside room"));
        }
        if h.height >= room.height {
            out.push(Violation::new(&field, "reaches the LIS plane"));
        }
        if !(h.reflection_coeff > 0.0 && h.reflection_coeff <= 1.0) {
            out.push(Violation::new(&field, "reflection_coeff must lie in (0, 1]"));
        } else if h.reflection_coeff >= DEFAULT_SCATTERER_REFLECTION {
            out.push(Violation::new(
                &field,
                format!("reflection_coeff must be below the scatterer default {DEFAULT_SCATTERER_REFLECTION}"),
            ));
        }
    }

    out
}

/// Maps a lattice pixel to world (x, y): `origin + pixel * spacing`.
pub fn pixel_to_world(pixel: (usize, usize), lis: &LisArrayConfig) -> Result<(f64, f64)> {
    let (col, row) = pixel;
    if col >= lis.elements_x || row >= lis.elements_y {
        return Err(SenseError::domain(format!(
            "pixel ({col}, {row}) outside {}x{} lattice",
            lis.elements_x, lis.elements_y
        )));
    }
    Ok(subpixel_to_world((col as f64, row as f64), lis))
}

/// Same affine map for fractional pixel coordinates such as blob centroids.
pub fn subpixel_to_world(pixel: (f64, f64), lis: &LisArrayConfig) -> (f64, f64) {
    (
        lis.origin[0] + pixel.0 * lis.spacing,
        lis.origin[1] + pixel.1 * lis.spacing,
    )
}

/// Nearest lattice pixel to a world point, clamped to the lattice.
pub fn world_to_pixel(world: (f64, f64), lis: &LisArrayConfig) -> (usize, usize) {
    let clamp = |v: f64, n: usize| -> usize {
        let r = v.round();
        if r <= 0.0 {
            0
        } else {
            (r as usize).min(n - 1)
        }
    };
    (
        clamp((world.0 - lis.origin[0]) / lis.spacing, lis.elements_x),
        clamp((world.1 - lis.origin[1]) / lis.spacing, lis.elements_y),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lis_at_origin() -> LisArrayConfig {
        LisArrayConfig {
            elements_x: 259,
            elements_y: 259,
            spacing: SPEED_OF_LIGHT / 3.5e9 / 2.0,
            carrier_frequency: 3.5e9,
            origin: [0.0, 0.0],
        }
    }

    #[test]
    fn origin_pixel_maps_to_origin() {
        assert_eq!(pixel_to_world((0, 0), &lis_at_origin()).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn pixel_ten_ten_at_half_wavelength() {
        let half_lambda = 299_792_458.0 / 3.5e9 / 2.0;
        let (x, y) = pixel_to_world((10, 10), &lis_at_origin()).unwrap();
        assert!((x - 10.0 * half_lambda).abs() < 1e-15);
        assert!((y - 0.4283).abs() < 1e-4);
    }

    #[test]
    fn out_of_range_pixel_is_rejected() {
        assert!(pixel_to_world((259, 0), &lis_at_origin()).is_err());
        assert!(pixel_to_world((0, 259), &lis_at_origin()).is_err());
    }

    #[test]
    fn half_wavelength_259_array_does_not_fit_paper_room() {
        let mut cfg = ScenarioConfig::full_scale();
        cfg.lis = LisArrayConfig {
            origin: [0.0, 0.0],
            ..lis_at_origin()
        };
        // (259 - 1) * lambda / 2 = 11.05 m > 10.34 m
        let (span_x, _) = cfg.lis.footprint();
        assert!((span_x - 11.0495).abs() < 1e-3);
        let v = validate_config(&cfg);
        assert_eq!(v.len(), 2);
        assert!(v[0].message.contains("along x"));
    }

    #[test]
    fn presets_are_valid() {
        assert!(validate_config(&ScenarioConfig::full_scale()).is_empty());
        assert!(validate_config(&ScenarioConfig::desk_scale()).is_empty());
    }

    #[test]
    fn emitter_on_lis_plane() {
        let mut cfg = ScenarioConfig::desk_scale();
        cfg.emitters[0].position[2] = cfg.room.height;
        let v = validate_config(&cfg);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].message, "emitter on LIS plane");
    }

    #[test]
    fn zero_averaging_count() {
        let mut cfg = ScenarioConfig::desk_scale();
        cfg.averaging_count = 0;
        let v = validate_config(&cfg);
        assert_eq!(v, vec![Violation::new("averaging_count", "S must be >= 1")]);
    }

    #[test]
    fn violations_are_ordered() {
        let mut cfg = ScenarioConfig::desk_scale();
        cfg.averaging_count = 0;
        cfg.snr_db = f64::NAN;
        cfg.humans.push(Human {
            reflection_coeff: 0.9,
            ..Human::average([1.0, 1.0])
        });
        let fields: Vec<_> = validate_config(&cfg).into_iter().map(|v| v.field).collect();
        assert_eq!(fields, ["snr_db", "averaging_count", "humans[0]"]);
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = ScenarioConfig::desk_scale();
        cfg.humans.push(Human::average([3.0, 3.5]));
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ScenarioConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn amplitude_of_20_dbm() {
        let e = Emitter::new([0.0, 0.0, 1.0], 20.0);
        assert!((e.amplitude() - 0.1f64.sqrt()).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn world_round_trip_within_half_pitch(col in 0usize..259, row in 0usize..259,
                                                   dx in -0.49f64..0.49, dy in -0.49f64..0.49) {
                let lis = ScenarioConfig::full_scale().lis;
                let (x, y) = pixel_to_world((col, row), &lis).unwrap();
                let jittered = (x + dx * lis.spacing, y + dy * lis.spacing);
                let back = world_to_pixel(jittered, &lis);
                prop_assert_eq!(back, (col, row));
                let (bx, by) = pixel_to_world(back, &lis).unwrap();
                prop_assert!((bx - jittered.0).abs() <= lis.spacing / 2.0 + 1e-12);
                prop_assert!((by - jittered.1).abs() <= lis.spacing / 2.0 + 1e-12);
            }
        }
    }
}
