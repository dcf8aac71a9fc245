//! Narrowband received-signal synthesis at every surface element.
//!
//! Each emitter contributes a spherical line-of-sight wave plus one
//! re-radiated wave per scatterer or human, treated as a point virtual source
//! at the top face of the object. The resulting electric field is converted to
//! an antenna output and corrupted by circular complex Gaussian noise whose
//! variance is set from the requested average SNR.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use std::f64::consts::PI;

use crate::error::{Result, SenseError};
use crate::grid::ComplexGrid;
use crate::scene::{validate_config, Emitter, Human, ScenarioConfig, Scatterer};

/// Free-space impedance (ohm).
pub const FREE_SPACE_IMPEDANCE: f64 = 120.0 * PI;

/// Antenna impedance; identical for every element.
pub const ANTENNA_IMPEDANCE: f64 = 1.0;

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// `e^{-j 2 pi d / lambda}`
#[inline]
fn propagation_phase(d: f64, wavelength: f64) -> Complex64 {
    Complex64::from_polar(1.0, -2.0 * PI * d / wavelength)
}

#[inline]
fn transmit_symbol(emitter: &Emitter) -> Complex64 {
    Complex64::from_polar(emitter.amplitude(), emitter.symbol_phase)
}

/// Anything that re-radiates an impinging wave as a point virtual source.
pub trait Reflector: Sync {
    /// World position of the equivalent point source.
    fn reradiation_point(&self) -> [f64; 3];
    fn reflection_coeff(&self) -> f64;
}

impl Reflector for Scatterer {
    fn reradiation_point(&self) -> [f64; 3] {
        [self.center[0], self.center[1], self.height]
    }

    fn reflection_coeff(&self) -> f64 {
        self.reflection_coeff
    }
}

impl Reflector for Human {
    fn reradiation_point(&self) -> [f64; 3] {
        [self.center[0], self.center[1], self.height]
    }

    fn reflection_coeff(&self) -> f64 {
        self.reflection_coeff
    }
}

/// Line-of-sight field `(a / d) e^{-j 2 pi d / lambda}` at `element_pos`,
/// where `a` is the emitter's complex symbol amplitude.
pub fn los_field(emitter: &Emitter, element_pos: [f64; 3], wavelength: f64) -> Result<Complex64> {
    let d = distance(emitter.position, element_pos);
    if d == 0.0 {
        return Err(SenseError::domain("emitter coincides with the element"));
    }
    Ok(transmit_symbol(emitter) * propagation_phase(d, wavelength) / d)
}

/// Single-bounce field via `obj`: amplitude `a * rho / (d1 * d2)`, phase
/// `-2 pi (d1 + d2) / lambda`.
pub fn virtual_source_field(
    emitter: &Emitter,
    obj: &dyn Reflector,
    element_pos: [f64; 3],
    wavelength: f64,
) -> Result<Complex64> {
    let p = obj.reradiation_point();
    let d1 = distance(emitter.position, p);
    let d2 = distance(p, element_pos);
    if d1 == 0.0 || d2 == 0.0 {
        return Err(SenseError::domain("virtual source coincides with emitter or element"));
    }
    let rho = obj.reflection_coeff();
    Ok(transmit_symbol(emitter) * rho * propagation_phase(d1 + d2, wavelength) / (d1 * d2))
}

/// Optional propagation extras.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ChannelOptions {
    /// Amplitude coefficient of first-order image sources behind the four
    /// side walls. `None` disables wall echoes.
    pub wall_reflection: Option<f64>,
}

fn wall_images(emitter: &Emitter, cfg: &ScenarioConfig, coeff: f64) -> [(Emitter, f64); 4] {
    let [x, y, z] = emitter.position;
    let lx = cfg.room.length_x;
    let ly = cfg.room.length_y;
    let image = |p: [f64; 3]| (Emitter { position: p, ..*emitter }, coeff);
    [
        image([-x, y, z]),
        image([2.0 * lx - x, y, z]),
        image([x, -y, z]),
        image([x, 2.0 * ly - y, z]),
    ]
}

/// Noiseless field over all elements, summed over emitters and paths.
pub fn superpose(cfg: &ScenarioConfig) -> Result<ComplexGrid> {
    superpose_with(cfg, &ChannelOptions::default())
}

pub fn superpose_with(cfg: &ScenarioConfig, opts: &ChannelOptions) -> Result<ComplexGrid> {
    let violations = validate_config(cfg);
    if !violations.is_empty() {
        return Err(SenseError::InvalidScenario(violations.iter().map(|v| v.to_string()).collect()));
    }
    let lis = cfg.lis;
    let wavelength = lis.wavelength();
    let ceiling = cfg.room.height;
    let reflectors: Vec<&dyn Reflector> = cfg
        .scatterers
        .iter()
        .map(|s| s as &dyn Reflector)
        .chain(cfg.humans.iter().map(|h| h as &dyn Reflector))
        .collect();
    let images: Vec<(Emitter, f64)> = match opts.wall_reflection {
        Some(c) => cfg.emitters.iter().flat_map(|e| wall_images(e, cfg, c)).collect(),
        None => Vec::new(),
    };

    let element_field = |col: usize, row: usize| -> Result<Complex64> {
        let pos = lis.element_position(col, row, ceiling);
        let mut acc = Complex64::new(0.0, 0.0);
        for e in &cfg.emitters {
            acc += los_field(e, pos, wavelength)?;
            for obj in &reflectors {
                acc += virtual_source_field(e, *obj, pos, wavelength)?;
            }
        }
        for (img, coeff) in &images {
            acc += *coeff * los_field(img, pos, wavelength)?;
        }
        Ok(acc)
    };

    let width = lis.elements_x;
    let mut data = vec![Complex64::new(0.0, 0.0); lis.element_count()];
    data.par_chunks_mut(width)
        .enumerate()
        .try_for_each(|(row, line)| -> Result<()> {
            for (col, v) in line.iter_mut().enumerate() {
                *v = element_field(col, row)?;
            }
            Ok(())
        })?;
    ComplexGrid::from_vec(width, lis.elements_y, data)
}

/// Noise configuration for one snapshot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// Average SNR in dB; `+inf` disables noise.
    pub snr_db: f64,
    pub averaging_count: usize,
    pub rng_seed: u64,
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        Self {
            snr_db: f64::INFINITY,
            averaging_count: 1,
            rng_seed: 0,
        }
    }

    pub fn from_scenario(cfg: &ScenarioConfig) -> Self {
        Self {
            snr_db: if cfg.noiseless { f64::INFINITY } else { cfg.snr_db },
            averaging_count: cfg.averaging_count,
            rng_seed: cfg.rng_seed,
        }
    }
}

/// Field-to-voltage factor `sqrt(lambda^2 Z_i / (4 pi Z_0))`.
pub fn antenna_gain(wavelength: f64) -> f64 {
    (wavelength * wavelength * ANTENNA_IMPEDANCE / (4.0 * PI * FREE_SPACE_IMPEDANCE)).sqrt()
}

/// Average SNR (linear) of a field under per-element noise variance `sigma2`.
pub fn average_snr(field: &ComplexGrid, noise_variance: f64, wavelength: f64) -> f64 {
    let m = field.len() as f64;
    wavelength * wavelength * field.energy() / (4.0 * PI * FREE_SPACE_IMPEDANCE * m * noise_variance)
}

/// Noise variance that yields `snr_db` for this field.
pub fn calibrate_noise_variance(field: &ComplexGrid, snr_db: f64, wavelength: f64) -> Result<f64> {
    let energy = field.energy();
    if energy == 0.0 || field.is_empty() {
        return Err(SenseError::domain("SNR is undefined for an all-zero field"));
    }
    if !snr_db.is_finite() {
        return Err(SenseError::domain("SNR must be finite to calibrate noise"));
    }
    let gamma = 10f64.powf(snr_db / 10.0);
    let m = field.len() as f64;
    Ok(wavelength * wavelength * energy / (4.0 * PI * FREE_SPACE_IMPEDANCE * m * gamma))
}

/// Antenna output `gain * field + n`, with `n` the mean of
/// `averaging_count` independent circular Gaussian draws.
pub fn element_signal(field: &ComplexGrid, noise: &NoiseSpec, wavelength: f64) -> Result<ComplexGrid> {
    if noise.averaging_count < 1 {
        return Err(SenseError::domain("averaging count must be >= 1"));
    }
    let mut out = field.clone();
    out.scale(Complex64::new(antenna_gain(wavelength), 0.0));
    if noise.snr_db == f64::INFINITY {
        return Ok(out);
    }
    let sigma2 = calibrate_noise_variance(field, noise.snr_db, wavelength)?;
    let noise_grid = averaged_noise(field.len(), sigma2, noise.averaging_count, noise.rng_seed);
    for (v, n) in out.as_mut_slice().iter_mut().zip(noise_grid) {
        *v += n;
    }
    Ok(out)
}

/// Mean of `draws` i.i.d. CN(0, sigma2) vectors of length `len`.
pub(crate) fn averaged_noise(len: usize, sigma2: f64, draws: usize, seed: u64) -> Vec<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = (sigma2 / 2.0).sqrt();
    let mut acc = vec![Complex64::new(0.0, 0.0); len];
    for _ in 0..draws {
        for v in acc.iter_mut() {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            v.re += re;
            v.im += im;
        }
    }
    let k = std / draws as f64;
    for v in acc.iter_mut() {
        *v *= k;
    }
    acc
}

/// Noiseless field followed by noise injection as configured in `cfg`.
pub fn simulate(cfg: &ScenarioConfig) -> Result<ComplexGrid> {
    simulate_with(cfg, &ChannelOptions::default())
}

pub fn simulate_with(cfg: &ScenarioConfig, opts: &ChannelOptions) -> Result<ComplexGrid> {
    let field = superpose_with(cfg, opts)?;
    element_signal(&field, &NoiseSpec::from_scenario(cfg), cfg.lis.wavelength())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{LisArrayConfig, RoomGeometry};

    const F: f64 = 3.5e9;

    fn lambda() -> f64 {
        crate::scene::SPEED_OF_LIGHT / F
    }

    fn unit_emitter(pos: [f64; 3]) -> Emitter {
        // 30 dBm = 1 W, unit amplitude
        Emitter::new(pos, 30.0)
    }

    fn line_scene() -> ScenarioConfig {
        let room = RoomGeometry {
            length_x: 2.0,
            length_y: 2.0,
            height: 3.0,
        };
        ScenarioConfig {
            snr_db: 0.0,
            averaging_count: 1,
            rng_seed: 1,
            noiseless: true,
            room,
            lis: LisArrayConfig {
                elements_x: 3,
                elements_y: 1,
                spacing: 0.5,
                carrier_frequency: F,
                origin: [0.5, 1.0],
            },
            emitters: vec![],
            scatterers: vec![],
            humans: vec![],
        }
    }

    #[test]
    fn los_below_element_at_fig3_depth() {
        let e = unit_emitter([0.0, 0.0, 0.0]);
        let v = los_field(&e, [0.0, 0.0, 6.2], lambda()).unwrap();
        assert!((v.norm() - 1.0 / 6.2).abs() < 1e-15);
        let expected_phase = (-2.0 * PI * 6.2 / lambda()).rem_euclid(2.0 * PI);
        let got = v.arg().rem_euclid(2.0 * PI);
        assert!((got - expected_phase).abs() < 1e-9, "{got} vs {expected_phase}");
    }

    #[test]
    fn los_symmetry_and_inverse_distance() {
        let e = unit_emitter([1.0, 1.0, 0.0]);
        let a = los_field(&e, [1.3, 1.0, 2.0], lambda()).unwrap();
        let b = los_field(&e, [0.7, 1.0, 2.0], lambda()).unwrap();
        assert_eq!(a, b);
        let near = los_field(&e, [1.0, 1.0, 2.0], lambda()).unwrap();
        let far = los_field(&e, [1.0, 1.0, 4.0], lambda()).unwrap();
        assert!((near.norm() / far.norm() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn los_zero_distance_is_domain_error() {
        let e = unit_emitter([1.0, 1.0, 1.0]);
        assert!(matches!(los_field(&e, [1.0, 1.0, 1.0], lambda()), Err(SenseError::Domain(_))));
    }

    #[test]
    fn virtual_source_zero_reflection_is_zero() {
        let e = unit_emitter([0.5, 0.5, 1.8]);
        let s = Scatterer {
            reflection_coeff: 0.0,
            ..Scatterer::new([1.0, 1.0], 0.2, 1.0)
        };
        assert_eq!(
            virtual_source_field(&e, &s, [0.0, 0.0, 3.0], lambda()).unwrap(),
            Complex64::new(0.0, 0.0)
        );
    }

    #[test]
    fn virtual_source_symmetric_elements() {
        let e = unit_emitter([1.0, 0.2, 1.8]);
        let s = Scatterer::new([1.0, 1.0], 0.2, 1.0);
        let a = virtual_source_field(&e, &s, [0.6, 1.0, 3.0], lambda()).unwrap();
        let b = virtual_source_field(&e, &s, [1.4, 1.0, 3.0], lambda()).unwrap();
        assert!((a.norm() - b.norm()).abs() < 1e-15);
    }

    #[test]
    fn virtual_source_matches_geometric_oracle_on_line_array() {
        let cfg = {
            let mut c = line_scene();
            c.emitters.push(unit_emitter([0.3, 0.4, 1.8]));
            c.scatterers.push(Scatterer::new([1.2, 1.1], 0.2, 2.0));
            c
        };
        let e = cfg.emitters[0];
        let s = cfg.scatterers[0];
        // brute-force geometry: element positions written out by hand
        let elements: [[f64; 3]; 3] = [[0.5, 1.0, 3.0], [1.0, 1.0, 3.0], [1.5, 1.0, 3.0]];
        let top: [f64; 3] = [1.2, 1.1, 2.0];
        let d1 = ((0.3f64 - 1.2).powi(2) + (0.4f64 - 1.1).powi(2) + (1.8f64 - 2.0).powi(2)).sqrt();
        for el in elements {
            let d2 = ((el[0] - top[0]).powi(2) + (el[1] - top[1]).powi(2) + (el[2] - top[2]).powi(2)).sqrt();
            let v = virtual_source_field(&e, &s, el, lambda()).unwrap();
            let expected = Complex64::from_polar(0.7 / (d1 * d2), -2.0 * PI * (d1 + d2) / lambda());
            assert!((v - expected).norm() < 1e-14);
        }
        let grid = superpose(&cfg).unwrap();
        for (col, el) in elements.iter().enumerate() {
            let direct = los_field(&e, *el, lambda()).unwrap() + virtual_source_field(&e, &s, *el, lambda()).unwrap();
            assert_eq!(grid.get(col, 0), direct);
        }
    }

    #[test]
    fn no_emitters_gives_zero_field() {
        let cfg = ScenarioConfig {
            emitters: vec![],
            ..ScenarioConfig::desk_scale()
        };
        let g = superpose(&cfg).unwrap();
        assert!(g.as_slice().iter().all(|c| *c == Complex64::new(0.0, 0.0)));
    }

    #[test]
    fn superposition_is_linear_in_emitters() {
        let mut cfg = ScenarioConfig::desk_scale();
        cfg.lis.elements_x = 17;
        cfg.lis.elements_y = 11;
        let a = Emitter::new([1.5, 2.0, 1.8], 20.0);
        let b = Emitter {
            symbol_phase: 1.1,
            ..Emitter::new([3.7, 4.1, 2.1], 17.0)
        };
        cfg.emitters = vec![a, b];
        let both = superpose(&cfg).unwrap();
        cfg.emitters = vec![a];
        let only_a = superpose(&cfg).unwrap();
        cfg.emitters = vec![b];
        let only_b = superpose(&cfg).unwrap();
        let sum = only_a.add(&only_b).unwrap();
        for (x, y) in both.as_slice().iter().zip(sum.as_slice()) {
            assert!((x - y).norm() <= 1e-15 * x.norm().max(1e-30) * 10.0);
        }
    }

    #[test]
    fn invalid_scenario_is_rejected() {
        let mut cfg = ScenarioConfig::desk_scale();
        cfg.averaging_count = 0;
        assert!(matches!(superpose(&cfg), Err(SenseError::InvalidScenario(_))));
    }

    #[test]
    fn wall_echoes_add_energy() {
        let mut cfg = ScenarioConfig::desk_scale();
        cfg.lis.elements_x = 9;
        cfg.lis.elements_y = 9;
        let plain = superpose(&cfg).unwrap();
        let walls = superpose_with(
            &cfg,
            &ChannelOptions {
                wall_reflection: Some(0.3),
            },
        )
        .unwrap();
        assert_ne!(plain, walls);
    }

    #[test]
    fn noiseless_output_is_scaled_field() {
        let cfg = ScenarioConfig::desk_scale();
        let field = superpose(&ScenarioConfig {
            lis: LisArrayConfig {
                elements_x: 8,
                elements_y: 8,
                ..cfg.lis
            },
            ..cfg.clone()
        })
        .unwrap();
        let y = element_signal(&field, &NoiseSpec::noiseless(), lambda()).unwrap();
        let g = antenna_gain(lambda());
        for (a, b) in y.as_slice().iter().zip(field.as_slice()) {
            assert_eq!(*a, b * g);
        }
    }

    #[test]
    fn calibration_at_zero_db() {
        let field = ComplexGrid::from_fn(4, 3, |c, r| Complex64::new(c as f64 + 1.0, r as f64));
        let sigma2 = calibrate_noise_variance(&field, 0.0, lambda()).unwrap();
        let expected = lambda().powi(2) * field.energy() / (4.0 * PI * FREE_SPACE_IMPEDANCE * 12.0);
        assert!((sigma2 - expected).abs() <= 1e-15 * expected);
    }

    #[test]
    fn calibration_is_linear_in_energy() {
        let field = ComplexGrid::from_fn(4, 3, |c, r| Complex64::new(c as f64 + 1.0, r as f64));
        let mut doubled = field.clone();
        doubled.scale(Complex64::new(2f64.sqrt(), 0.0));
        let a = calibrate_noise_variance(&field, 7.0, lambda()).unwrap();
        let b = calibrate_noise_variance(&doubled, 7.0, lambda()).unwrap();
        assert!((b / a - 2.0).abs() < 1e-12);
    }

    #[test]
    fn calibration_rejects_zero_field() {
        let field = ComplexGrid::zeros(4, 4);
        assert!(calibrate_noise_variance(&field, 0.0, lambda()).is_err());
        assert!(element_signal(
            &field,
            &NoiseSpec {
                snr_db: 0.0,
                averaging_count: 1,
                rng_seed: 0
            },
            lambda()
        )
        .is_err());
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let field = ComplexGrid::from_fn(16, 16, |c, r| Complex64::new((c * r) as f64, 1.0));
        let spec = NoiseSpec {
            snr_db: 3.0,
            averaging_count: 4,
            rng_seed: 99,
        };
        assert_eq!(
            element_signal(&field, &spec, lambda()).unwrap(),
            element_signal(&field, &spec, lambda()).unwrap()
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn calibration_round_trip(snr_db in -20.0f64..40.0, scale in 1e-6f64..1e3, seed in 0u64..1000) {
                use rand::Rng;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let field = ComplexGrid::from_fn(7, 5, |_, _| Complex64::new(rng.gen::<f64>() * scale, rng.gen::<f64>() * scale));
                let sigma2 = calibrate_noise_variance(&field, snr_db, lambda()).unwrap();
                let gamma = average_snr(&field, sigma2, lambda());
                let want = 10f64.powf(snr_db / 10.0);
                prop_assert!(((gamma - want) / want).abs() < 1e-12);
            }

            #[test]
            fn element_order_has_no_hidden_state(col in 0usize..12, row in 0usize..9) {
                let mut cfg = ScenarioConfig::desk_scale();
                cfg.lis.elements_x = 12;
                cfg.lis.elements_y = 9;
                let grid = superpose(&cfg).unwrap();
                let pos = cfg.lis.element_position(col, row, cfg.room.height);
                let e = &cfg.emitters[0];
                let mut direct = los_field(e, pos, lambda()).unwrap();
                for s in &cfg.scatterers {
                    direct += virtual_source_field(e, s, pos, lambda()).unwrap();
                }
                prop_assert_eq!(grid.get(col, row), direct);
            }
        }
    }
}
