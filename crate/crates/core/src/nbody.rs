//! Gravitational digit-motion simulator.
//!
//! Point bodies attract pairwise with the softened kernel
//! `a_i = -sum_{j!=i} G m_j (x_i - x_j) / (|x_i - x_j| + d_soft)^r`,
//! integrate with kick-drift-kick leapfrog, and bounce elastically off the
//! frame walls. Total energy (kinetic plus pairwise potential, zeroed at
//! `d_ref`) is recorded per trajectory state and serves as the ground truth
//! for the energy-conservation constraint downstream.

use rand::Rng;
use std::path::Path;

use crate::data_store::{
    DatasetManifest, DatasetWriter, SequenceSample, TrajectoryMeta,
};
use crate::error::{Error, Result};
use crate::rand_util;
use crate::tensor::TensorF32;

#[derive(Debug, Clone)]
pub struct SimConfig {
    /// Gravitational constant.
    pub g: f64,
    /// Power exponent of the softened attraction kernel.
    pub r: f64,
    /// Softening distance, keeps the kernel finite at zero separation.
    pub d_soft: f64,
    /// Time advanced by one `step` call (one rendered frame).
    pub dt: f64,
    /// Leapfrog sub-iterations per step.
    pub substeps: usize,
    /// Body count.
    pub n: usize,
    /// Frame height and width in pixels.
    pub height: usize,
    pub width: usize,
    /// Separation at which the pair potential is defined to be zero.
    pub d_ref: f64,
    /// Reflection walls are inset by this margin so sprites stay in frame.
    pub margin: f64,
    /// Initial speed range for dataset generation, pixels per step.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Initial mass range for dataset generation.
    pub mass_min: f64,
    pub mass_max: f64,
}

impl SimConfig {
    pub fn for_frame(height: usize, width: usize) -> Self {
        SimConfig {
            g: 2.0,
            r: 2.0,
            d_soft: 1.0,
            dt: 1.0,
            substeps: 10,
            n: 3,
            height,
            width,
            d_ref: ((height * height + width * width) as f64).sqrt(),
            margin: 14.0,
            speed_min: 0.6,
            speed_max: 1.8,
            mass_min: 1.0,
            mass_max: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_soft > 0.0) {
            return Err(Error::contract("d_soft must be > 0"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::contract("dt must be > 0"));
        }
        if self.r < 1.0 {
            return Err(Error::contract("r must be >= 1"));
        }
        if self.n < 2 {
            return Err(Error::contract("n must be >= 2"));
        }
        if self.substeps == 0 {
            return Err(Error::contract("substeps must be >= 1"));
        }
        let hi_row = self.height as f64 - 1.0 - self.margin;
        let hi_col = self.width as f64 - 1.0 - self.margin;
        if hi_row <= self.margin || hi_col <= self.margin {
            return Err(Error::contract("margin leaves no room for motion"));
        }
        Ok(())
    }
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig::for_frame(64, 64)
    }
}

/// Positions and velocities are `[row, col]` pairs in pixel units; masses are
/// strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyState {
    pub positions: Vec<[f64; 2]>,
    pub velocities: Vec<[f64; 2]>,
    pub masses: Vec<f64>,
}

impl BodyState {
    pub fn new(positions: Vec<[f64; 2]>, velocities: Vec<[f64; 2]>, masses: Vec<f64>) -> Result<Self> {
        if positions.len() != velocities.len() || positions.len() != masses.len() {
            return Err(Error::contract("positions/velocities/masses lengths differ"));
        }
        if masses.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::contract("masses must be strictly positive"));
        }
        Ok(BodyState { positions, velocities, masses })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    /// One state per rendered frame, recorded after each full step.
    pub states: Vec<BodyState>,
    /// Total energy of each recorded state.
    pub energies: Vec<f64>,
    /// Wall reflections encountered while integrating.
    pub reflections: usize,
}

/// Per-body accelerations under the softened pairwise attraction. Total for
/// every input: at zero separation the numerator vanishes, so coincident
/// bodies contribute nothing.
pub fn accelerations(state: &BodyState, cfg: &SimConfig) -> Vec<[f64; 2]> {
    let n = state.len();
    let mut acc = vec![[0.0f64; 2]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let dy = state.positions[i][0] - state.positions[j][0];
            let dx = state.positions[i][1] - state.positions[j][1];
            let d = (dy * dy + dx * dx).sqrt();
            let denom = (d + cfg.d_soft).powf(cfg.r);
            let k = -cfg.g * state.masses[j] / denom;
            acc[i][0] += k * dy;
            acc[i][1] += k * dx;
        }
    }
    acc
}

/// Antiderivative of the pairwise radial attraction, zeroed at `d_ref`:
/// `phi(d) = \int_{d_ref}^{d} s/(s+d_soft)^r ds`. Closed form for r = 2,
/// adaptive Simpson quadrature otherwise.
fn pair_potential_shape(d: f64, cfg: &SimConfig) -> f64 {
    if (cfg.r - 2.0).abs() < 1e-12 {
        let f = |x: f64| (x + cfg.d_soft).ln() + cfg.d_soft / (x + cfg.d_soft);
        f(d) - f(cfg.d_ref)
    } else {
        adaptive_simpson(
            &|s: f64| s / (s + cfg.d_soft).powf(cfg.r),
            cfg.d_ref,
            d,
            1e-10,
            40,
        )
    }
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: usize) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b))
    }
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        whole: f64,
        tol: f64,
        depth: usize,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let left = simpson(f, a, m);
        let right = simpson(f, m, b);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            left + right + (left + right - whole) / 15.0
        } else {
            recurse(f, a, m, left, tol / 2.0, depth - 1)
                + recurse(f, m, b, right, tol / 2.0, depth - 1)
        }
    }
    recurse(f, a, b, simpson(f, a, b), tol, depth)
}

/// Total energy: kinetic plus pairwise potential with `U(d_ref) = 0`.
pub fn total_energy(state: &BodyState, cfg: &SimConfig) -> f64 {
    let mut e = 0.0;
    for i in 0..state.len() {
        let v = state.velocities[i];
        e += 0.5 * state.masses[i] * (v[0] * v[0] + v[1] * v[1]);
    }
    for i in 0..state.len() {
        for j in (i + 1)..state.len() {
            let dy = state.positions[i][0] - state.positions[j][0];
            let dx = state.positions[i][1] - state.positions[j][1];
            let d = (dy * dy + dx * dx).sqrt();
            e += cfg.g * state.masses[i] * state.masses[j] * pair_potential_shape(d, cfg);
        }
    }
    e
}

fn reflect_axis(p: &mut f64, v: &mut f64, lo: f64, hi: f64) -> usize {
    let mut hits = 0;
    // Fold until inside; multiple crossings in one drift are possible for
    // fast bodies.
    for _ in 0..64 {
        if *p < lo {
            *p = 2.0 * lo - *p;
            *v = -*v;
            hits += 1;
        } else if *p > hi {
            *p = 2.0 * hi - *p;
            *v = -*v;
            hits += 1;
        } else {
            return hits;
        }
    }
    *p = p.clamp(lo, hi);
    hits
}

/// Advances one frame interval (`dt`) via `substeps` kick-drift-kick
/// leapfrog sub-iterations. Wall crossings mirror the position about the
/// wall and negate the normal velocity, preserving speed.
pub fn step(state: &BodyState, cfg: &SimConfig) -> (BodyState, usize) {
    let h = cfg.dt / cfg.substeps as f64;
    let lo_row = cfg.margin;
    let hi_row = cfg.height as f64 - 1.0 - cfg.margin;
    let lo_col = cfg.margin;
    let hi_col = cfg.width as f64 - 1.0 - cfg.margin;
    let mut s = state.clone();
    let mut reflections = 0;
    let mut acc = accelerations(&s, cfg);
    for _ in 0..cfg.substeps {
        for i in 0..s.len() {
            s.velocities[i][0] += 0.5 * h * acc[i][0];
            s.velocities[i][1] += 0.5 * h * acc[i][1];
            s.positions[i][0] += h * s.velocities[i][0];
            s.positions[i][1] += h * s.velocities[i][1];
            reflections += reflect_axis(&mut s.positions[i][0], &mut s.velocities[i][0], lo_row, hi_row);
            reflections += reflect_axis(&mut s.positions[i][1], &mut s.velocities[i][1], lo_col, hi_col);
        }
        acc = accelerations(&s, cfg);
        for i in 0..s.len() {
            s.velocities[i][0] += 0.5 * h * acc[i][0];
            s.velocities[i][1] += 0.5 * h * acc[i][1];
        }
    }
    (s, reflections)
}

/// Deterministic trajectory of `l` post-step states with per-state energies.
pub fn rollout(initial: &BodyState, cfg: &SimConfig, l: usize) -> Result<Trajectory> {
    if l == 0 {
        return Err(Error::contract("rollout length must be >= 1"));
    }
    cfg.validate()?;
    let mut states = Vec::with_capacity(l);
    let mut energies = Vec::with_capacity(l);
    let mut reflections = 0;
    let mut current = initial.clone();
    for _ in 0..l {
        let (next, hits) = step(&current, cfg);
        reflections += hits;
        energies.push(total_energy(&next, cfg));
        states.push(next.clone());
        current = next;
    }
    Ok(Trajectory { states, energies, reflections })
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

fn bilinear_sample(data: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    if y <= -1.0 || x <= -1.0 || y >= h as f64 || x >= w as f64 {
        return 0.0;
    }
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = (y - y0) as f32;
    let fx = (x - x0) as f32;
    let tap = |yy: i64, xx: i64| -> f32 {
        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
            0.0
        } else {
            data[yy as usize * w + xx as usize]
        }
    };
    let y0 = y0 as i64;
    let x0 = x0 as i64;
    (1.0 - fy) * (1.0 - fx) * tap(y0, x0)
        + (1.0 - fy) * fx * tap(y0, x0 + 1)
        + fy * (1.0 - fx) * tap(y0 + 1, x0)
        + fy * fx * tap(y0 + 1, x0 + 1)
}

/// Composites one sprite per body, centered at the body position with
/// bilinear sub-pixel placement and per-pixel max blending. Output is
/// `[L, H, W, 1]` with values in [0, 1].
pub fn render(traj: &Trajectory, sprites: &[TensorF32], cfg: &SimConfig) -> Result<TensorF32> {
    let h = cfg.height;
    let w = cfg.width;
    let n = traj.states.first().map(BodyState::len).unwrap_or(0);
    if sprites.len() != n {
        return Err(Error::contract(format!(
            "expected {n} sprites, got {}",
            sprites.len()
        )));
    }
    for s in sprites {
        if s.shape().len() != 2 {
            return Err(Error::contract("sprites must be 2-D"));
        }
        if s.shape()[0] > h || s.shape()[1] > w {
            return Err(Error::contract(format!(
                "sprite {:?} larger than frame {h}x{w}",
                s.shape()
            )));
        }
    }
    let l = traj.states.len();
    let mut frames = vec![0.0f32; l * h * w];
    for (li, state) in traj.states.iter().enumerate() {
        let frame = &mut frames[li * h * w..(li + 1) * h * w];
        for (bi, sprite) in sprites.iter().enumerate() {
            let sh = sprite.shape()[0];
            let sw = sprite.shape()[1];
            let top = state.positions[bi][0] - (sh as f64 - 1.0) / 2.0;
            let left = state.positions[bi][1] - (sw as f64 - 1.0) / 2.0;
            let r0 = top.floor().max(0.0) as usize;
            let c0 = left.floor().max(0.0) as usize;
            let r1 = (top + sh as f64).ceil().min(h as f64) as usize;
            let c1 = (left + sw as f64).ceil().min(w as f64) as usize;
            for row in r0..r1 {
                for col in c0..c1 {
                    let v = bilinear_sample(
                        sprite.data(),
                        sh,
                        sw,
                        row as f64 - top,
                        col as f64 - left,
                    );
                    let px = &mut frame[row * w + col];
                    if v > *px {
                        *px = v;
                    }
                }
            }
        }
    }
    Ok(TensorF32::from_parts(vec![l, h, w, 1], frames).map(|v| v.clamp(0.0, 1.0)))
}

/// Bilinear resize of a 2-D sprite.
pub fn resize_sprite(sprite: &TensorF32, size: usize) -> Result<TensorF32> {
    if sprite.shape().len() != 2 {
        return Err(Error::contract("sprite must be 2-D"));
    }
    let (sh, sw) = (sprite.shape()[0], sprite.shape()[1]);
    if sh == size && sw == size {
        return Ok(sprite.clone());
    }
    let mut out = vec![0.0f32; size * size];
    for r in 0..size {
        for c in 0..size {
            let y = (r as f64 + 0.5) * sh as f64 / size as f64 - 0.5;
            let x = (c as f64 + 0.5) * sw as f64 / size as f64 - 0.5;
            out[r * size + c] = bilinear_sample(sprite.data(), sh, sw, y, x);
        }
    }
    Ok(TensorF32::from_parts(vec![size, size], out))
}

/// Separable Gaussian blur with zero padding, used to anti-alias the
/// builtin glyphs into soft-edged strokes like scanned digits.
fn gaussian_blur(sprite: &TensorF32, sigma: f64, radius: usize) -> TensorF32 {
    let (h, w) = (sprite.shape()[0], sprite.shape()[1]);
    let kernel: Vec<f64> = (-(radius as i64)..=radius as i64)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / ksum).collect();
    let mut rows = vec![0.0f64; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let cc = c as i64 + ki as i64 - radius as i64;
                if (0..w as i64).contains(&cc) {
                    acc += k * sprite.data()[r * w + cc as usize] as f64;
                }
            }
            rows[r * w + c] = acc;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let rr = r as i64 + ki as i64 - radius as i64;
                if (0..h as i64).contains(&rr) {
                    acc += k * rows[rr as usize * w + c];
                }
            }
            out[r * w + c] = acc as f32;
        }
    }
    TensorF32::from_parts(vec![h, w], out)
}

/// Fallback digit glyphs (5x7 bitmap font scaled up and anti-aliased) for
/// runs without an MNIST IDX file.
pub fn builtin_digit_sprites(size: usize) -> Vec<TensorF32> {
    const FONT: [[u8; 7]; 10] = [
        [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
        [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
        [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
        [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
        [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
        [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
        [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
        [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
        [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
    ];
    FONT.iter()
        .map(|rows| {
            let mut cell = vec![0.0f32; 7 * 7];
            for (r, bits) in rows.iter().enumerate() {
                for c in 0..5 {
                    if bits >> (4 - c) & 1 == 1 {
                        // center the 5-wide glyph in a 7x7 cell
                        cell[r * 7 + c + 1] = 1.0;
                    }
                }
            }
            let glyph = TensorF32::from_parts(vec![7, 7], cell);
            let scaled = resize_sprite(&glyph, size).expect("glyph resize");
            gaussian_blur(&scaled, 1.8 * size as f64 / 28.0, (size / 7).max(2))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub count: usize,
    pub l_in: usize,
    pub l_out: usize,
    pub seed: u64,
    pub split: String,
    /// Sprites are resized to this many pixels square before compositing.
    pub sprite_size: usize,
    /// Minimum initial pairwise separation, pixels.
    pub min_separation: f64,
}

impl GenConfig {
    pub fn new(count: usize, l_in: usize, l_out: usize, seed: u64, split: &str) -> Self {
        GenConfig {
            count,
            l_in,
            l_out,
            seed,
            split: split.to_string(),
            sprite_size: 28,
            min_separation: 8.0,
        }
    }
}

pub fn trajectory_to_meta(traj: &Trajectory) -> TrajectoryMeta {
    let l = traj.states.len();
    let n = traj.states.first().map(BodyState::len).unwrap_or(0);
    let mut positions = Vec::with_capacity(l * n * 2);
    let mut velocities = Vec::with_capacity(l * n * 2);
    for state in &traj.states {
        for i in 0..n {
            positions.push(state.positions[i][0] as f32);
            positions.push(state.positions[i][1] as f32);
            velocities.push(state.velocities[i][0] as f32);
            velocities.push(state.velocities[i][1] as f32);
        }
    }
    let masses = traj.states[0].masses.iter().map(|&m| m as f32).collect();
    let energies = traj.energies.iter().map(|&e| e as f32).collect();
    TrajectoryMeta {
        positions: TensorF32::from_parts(vec![l, n, 2], positions),
        velocities: TensorF32::from_parts(vec![l, n, 2], velocities),
        masses: TensorF32::from_parts(vec![n], masses),
        energies: TensorF32::from_parts(vec![l], energies),
    }
}

/// Samples an initial body configuration: uniform positions inside the walls
/// with a minimum separation, uniform speed in the configured range with a
/// uniform direction, uniform masses.
pub fn sample_initial_state<R: Rng>(cfg: &SimConfig, min_sep: f64, rng: &mut R) -> BodyState {
    let lo_row = cfg.margin;
    let hi_row = cfg.height as f64 - 1.0 - cfg.margin;
    let lo_col = cfg.margin;
    let hi_col = cfg.width as f64 - 1.0 - cfg.margin;
    let mut positions: Vec<[f64; 2]> = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let mut pos = [0.0; 2];
        for attempt in 0..100 {
            pos = [
                rng.gen_range(lo_row..=hi_row),
                rng.gen_range(lo_col..=hi_col),
            ];
            let ok = positions.iter().all(|p| {
                let dy = p[0] - pos[0];
                let dx = p[1] - pos[1];
                (dy * dy + dx * dx).sqrt() >= min_sep
            });
            if ok || attempt == 99 {
                break;
            }
        }
        positions.push(pos);
    }
    let velocities = (0..cfg.n)
        .map(|_| {
            let speed = rng.gen_range(cfg.speed_min..=cfg.speed_max);
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            [speed * angle.sin(), speed * angle.cos()]
        })
        .collect();
    let masses = (0..cfg.n)
        .map(|_| rng.gen_range(cfg.mass_min..=cfg.mass_max))
        .collect();
    BodyState { positions, velocities, masses }
}

/// Generates `count` sequences: i.i.d. initial states rolled out
/// `l_in + l_out` steps, rendered with sprites drawn from the pool, split
/// into (context, target), and persisted with the simulator trajectory as
/// ground-truth meta.
pub fn generate_dataset(
    sim: &SimConfig,
    gen: &GenConfig,
    sprite_pool: &[TensorF32],
    data_path: &Path,
) -> Result<DatasetManifest> {
    if gen.count == 0 {
        return Err(Error::contract("count must be >= 1"));
    }
    if sprite_pool.is_empty() {
        return Err(Error::contract("sprite pool is empty"));
    }
    sim.validate()?;
    let sprites_resized: Vec<TensorF32> = sprite_pool
        .iter()
        .map(|s| resize_sprite(s, gen.sprite_size))
        .collect::<Result<_>>()?;
    let l_total = gen.l_in + gen.l_out;
    let mut writer = DatasetWriter::create(data_path)?;
    for index in 0..gen.count {
        let mut rng = rand_util::rng_from_seed(rand_util::derive_seed(gen.seed, index as u64));
        let initial = sample_initial_state(sim, gen.min_separation, &mut rng);
        let traj = rollout(&initial, sim, l_total)?;
        let sprites: Vec<TensorF32> = (0..sim.n)
            .map(|_| sprites_resized[rng.gen_range(0..sprites_resized.len())].clone())
            .collect();
        let frames = render(&traj, &sprites, sim)?;
        let (h, w) = (sim.height, sim.width);
        let frame_len = h * w;
        let context = TensorF32::from_parts(
            vec![gen.l_in, h, w, 1],
            frames.data()[..gen.l_in * frame_len].to_vec(),
        );
        let target = TensorF32::from_parts(
            vec![gen.l_out, h, w, 1],
            frames.data()[gen.l_in * frame_len..].to_vec(),
        );
        let sample = SequenceSample::new(context, target, Some(trajectory_to_meta(&traj)))?;
        writer.add(&sample)?;
    }
    writer.finish(gen.seed, &gen.split)
}
