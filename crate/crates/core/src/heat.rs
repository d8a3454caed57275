//! Location-dependent heat diffusion: region maps, the explicit five-point
//! update, and trajectory datasets of `(state_t, state_t+1)` pairs.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tensor, TAPS};

/// Diffusivities of the three region types in the benchmark.
pub const BENCHMARK_DIFFUSIVITIES: [f32; 3] = [0.25, 0.025, 0.0025];

/// Largest diffusivity for which the explicit update stays stable.
pub const MAX_DIFFUSIVITY: f32 = 0.25;

/// Maximum number of region types (ids are stored as bytes on disk).
pub const MAX_TYPES: usize = 16;

/// The true 3x3 update kernel for diffusivity `alpha`:
/// `[[0, a, 0], [a, 1 - 4a, a], [0, a, 0]]`.
pub fn stencil(alpha: f32) -> [f32; TAPS] {
    [
        0.0,
        alpha,
        0.0,
        alpha,
        1.0 - 4.0 * alpha,
        alpha,
        0.0,
        alpha,
        0.0,
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionMap {
    height: usize,
    width: usize,
    grid: Vec<u8>,
    diffusivities: Vec<f32>,
    seed: u64,
}

impl RegionMap {
    pub fn new(
        height: usize,
        width: usize,
        grid: Vec<u8>,
        diffusivities: Vec<f32>,
        seed: u64,
    ) -> Result<Self> {
        if grid.len() != height * width {
            return Err(Error::shape(
                "RegionMap::new",
                format!("grid has {} cells for {height}x{width}", grid.len()),
            ));
        }
        if diffusivities.is_empty() || diffusivities.len() > MAX_TYPES {
            return Err(Error::invalid(format!(
                "need 1..={MAX_TYPES} region types, got {}",
                diffusivities.len()
            )));
        }
        if let Some(a) = diffusivities
            .iter()
            .find(|&&a| !(a > 0.0 && a <= MAX_DIFFUSIVITY))
        {
            return Err(Error::invalid(format!(
                "diffusivity {a} outside (0, {MAX_DIFFUSIVITY}]"
            )));
        }
        if let Some(t) = grid.iter().find(|&&t| t as usize >= diffusivities.len()) {
            return Err(Error::invalid(format!(
                "region id {t} but only {} types",
                diffusivities.len()
            )));
        }
        Ok(RegionMap {
            height,
            width,
            grid,
            diffusivities,
            seed,
        })
    }

    /// Single-type map.
    pub fn uniform(height: usize, width: usize, alpha: f32) -> Result<Self> {
        Self::new(height, width, vec![0; height * width], vec![alpha], 0)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn grid(&self) -> &[u8] {
        &self.grid
    }

    pub fn diffusivities(&self) -> &[f32] {
        &self.diffusivities
    }

    pub fn num_types(&self) -> usize {
        self.diffusivities.len()
    }

    /// Seed the map was generated from (0 for hand-built or loaded maps).
    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    pub fn region(&self, i: usize, j: usize) -> usize {
        self.grid[i * self.width + j] as usize
    }

    #[inline]
    pub fn alpha(&self, i: usize, j: usize) -> f32 {
        self.diffusivities[self.region(i, j)]
    }

    pub fn region_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_types()];
        for &t in &self.grid {
            sizes[t as usize] += 1;
        }
        sizes
    }

    /// Number of 4-connected components of each region type.
    pub fn component_counts(&self) -> Vec<usize> {
        let mut seen = vec![false; self.grid.len()];
        let mut counts = vec![0; self.num_types()];
        let mut stack = Vec::new();
        for start in 0..self.grid.len() {
            if seen[start] {
                continue;
            }
            let t = self.grid[start];
            counts[t as usize] += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(cell) = stack.pop() {
                for next in neighbors(cell, self.height, self.width) {
                    if !seen[next] && self.grid[next] == t {
                        seen[next] = true;
                        stack.push(next);
                    }
                }
            }
        }
        counts
    }
}

fn neighbors(cell: usize, height: usize, width: usize) -> impl Iterator<Item = usize> {
    let (i, j) = (cell / width, cell % width);
    let up = (i > 0).then(|| cell - width);
    let down = (i + 1 < height).then(|| cell + width);
    let left = (j > 0).then(|| cell - 1);
    let right = (j + 1 < width).then(|| cell + 1);
    [up, down, left, right].into_iter().flatten()
}

/// Grows `diffusivities.len()` connected regions over an `height x width` grid.
///
/// One seed cell per type is placed uniformly at random. Growth then repeatedly
/// picks a uniformly random (assigned cell, unassigned 4-neighbour) pair and
/// copies the type across it, so each region grows in proportion to the length
/// of its open boundary.
pub fn generate_region_map(
    height: usize,
    width: usize,
    diffusivities: &[f32],
    rng: &mut Rng,
) -> Result<RegionMap> {
    if height < 8 || width < 8 {
        return Err(Error::invalid(format!(
            "region map must be at least 8x8, got {height}x{width}"
        )));
    }
    let num_types = diffusivities.len();
    if num_types == 0 || num_types > MAX_TYPES {
        return Err(Error::invalid(format!(
            "need 1..={MAX_TYPES} region types, got {num_types}"
        )));
    }
    let cells = height * width;
    if num_types > cells {
        return Err(Error::invalid("more region types than cells"));
    }

    const UNSET: u8 = u8::MAX;
    let mut grid = vec![UNSET; cells];
    let mut frontier: Vec<(usize, usize)> = Vec::new();
    let assign = |cell: usize, t: u8, grid: &mut Vec<u8>, frontier: &mut Vec<(usize, usize)>| {
        grid[cell] = t;
        for next in neighbors(cell, height, width) {
            if grid[next] == UNSET {
                frontier.push((cell, next));
            }
        }
    };

    for (t, cell) in rng.distinct(cells, num_types).into_iter().enumerate() {
        assign(cell, t as u8, &mut grid, &mut frontier);
    }
    let mut remaining = cells - num_types;
    while remaining > 0 {
        let pick = rng.below(frontier.len());
        let (from, to) = frontier.swap_remove(pick);
        if grid[to] != UNSET {
            continue;
        }
        let t = grid[from];
        assign(to, t, &mut grid, &mut frontier);
        remaining -= 1;
    }

    RegionMap::new(height, width, grid, diffusivities.to_vec(), rng.seed())
}

/// One explicit diffusion step with zero (absorbing) boundaries:
/// `s + a(i,j) * (N + S + E + W - 4s)`.
///
/// Accepts a batch `[N, 1, H, W]`. The update is evaluated in `f64` and
/// rounded once, so stored targets carry no cancellation error.
pub fn diffusion_step(state: &Tensor, map: &RegionMap) -> Result<Tensor> {
    let [n_batch, channels, height, width] = state.shape();
    if channels != 1 || height != map.height || width != map.width {
        return Err(Error::shape(
            "diffusion_step",
            format!(
                "state {:?} vs region map {}x{}",
                state.shape(),
                map.height,
                map.width
            ),
        ));
    }
    let mut out = Tensor::zeros(state.shape());
    for n in 0..n_batch {
        step_plane(state.plane(n, 0), out.plane_mut(n, 0), map);
    }
    Ok(out)
}

fn step_plane(s: &[f32], out: &mut [f32], map: &RegionMap) {
    let (h, w) = (map.height, map.width);
    let at = |i: usize, j: usize| s[i * w + j] as f64;
    for i in 0..h {
        for j in 0..w {
            let centre = at(i, j);
            let mut around = 0.0f64;
            if i > 0 {
                around += at(i - 1, j);
            }
            if i + 1 < h {
                around += at(i + 1, j);
            }
            if j > 0 {
                around += at(i, j - 1);
            }
            if j + 1 < w {
                around += at(i, j + 1);
            }
            let alpha = map.alpha(i, j) as f64;
            out[i * w + j] = (centre + alpha * (around - 4.0 * centre)) as f32;
        }
    }
}

/// How initial states are seeded with heat.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropConfig {
    pub count: usize,
    pub magnitude: f32,
}

impl Default for DropConfig {
    fn default() -> Self {
        DropConfig {
            count: 10,
            magnitude: 1.0,
        }
    }
}

/// Pair-index ranges of the three splits. Splits always fall on trajectory
/// boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Splits {
    pub train_start: usize,
    pub val_start: usize,
    pub test_start: usize,
    pub total: usize,
}

impl Splits {
    pub fn train(&self) -> core::ops::Range<usize> {
        self.train_start..self.val_start
    }

    pub fn val(&self) -> core::ops::Range<usize> {
        self.val_start..self.test_start
    }

    pub fn test(&self) -> core::ops::Range<usize> {
        self.test_start..self.total
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_start <= self.val_start
            && self.val_start <= self.test_start
            && self.test_start <= self.total
        {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "split offsets out of order: {self:?}"
            )))
        }
    }

    /// 80/10/10 over initial states; val and test get at least one state
    /// each once there are three or more.
    pub fn by_trajectory(n_states: usize, steps_per_state: usize) -> Self {
        let (val, test) = if n_states >= 3 {
            ((n_states / 10).max(1), (n_states / 10).max(1))
        } else {
            (0, 0)
        };
        let train = n_states - val - test;
        Splits {
            train_start: 0,
            val_start: train * steps_per_state,
            test_start: (train + val) * steps_per_state,
            total: n_states * steps_per_state,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Input/target pairs over a fixed region map, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatDataset {
    region_map: RegionMap,
    inputs: Vec<f32>,
    targets: Vec<f32>,
    splits: Splits,
}

impl HeatDataset {
    pub fn new(
        region_map: RegionMap,
        inputs: Vec<f32>,
        targets: Vec<f32>,
        splits: Splits,
    ) -> Result<Self> {
        let plane = region_map.height * region_map.width;
        if inputs.len() != targets.len() || inputs.len() != splits.total * plane {
            return Err(Error::shape(
                "HeatDataset::new",
                format!(
                    "{} input and {} target values for {} pairs of {plane} cells",
                    inputs.len(),
                    targets.len(),
                    splits.total
                ),
            ));
        }
        splits.validate()?;
        Ok(HeatDataset {
            region_map,
            inputs,
            targets,
            splits,
        })
    }

    pub fn region_map(&self) -> &RegionMap {
        &self.region_map
    }

    pub fn splits(&self) -> Splits {
        self.splits
    }

    pub fn len(&self) -> usize {
        self.splits.total
    }

    pub fn is_empty(&self) -> bool {
        self.splits.total == 0
    }

    pub fn height(&self) -> usize {
        self.region_map.height
    }

    pub fn width(&self) -> usize {
        self.region_map.width
    }

    fn plane(&self) -> usize {
        self.region_map.height * self.region_map.width
    }

    pub fn inputs(&self) -> &[f32] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f32] {
        &self.targets
    }

    pub fn pair(&self, k: usize) -> (&[f32], &[f32]) {
        let p = self.plane();
        (
            &self.inputs[k * p..(k + 1) * p],
            &self.targets[k * p..(k + 1) * p],
        )
    }

    pub fn split_range(&self, split: Split) -> core::ops::Range<usize> {
        match split {
            Split::Train => self.splits.train(),
            Split::Val => self.splits.val(),
            Split::Test => self.splits.test(),
        }
    }

    /// Gathers pairs into `[n, 1, H, W]` input and target batches.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let p = self.plane();
        let mut x = Vec::with_capacity(indices.len() * p);
        let mut y = Vec::with_capacity(indices.len() * p);
        for &k in indices {
            let (a, b) = self.pair(k);
            x.extend_from_slice(a);
            y.extend_from_slice(b);
        }
        let shape = [
            indices.len(),
            1,
            self.region_map.height,
            self.region_map.width,
        ];
        (
            Tensor::from_vec(shape, x).expect("batch shape"),
            Tensor::from_vec(shape, y).expect("batch shape"),
        )
    }
}

/// Evolves `n_states` random drop patterns for `n_steps` steps each.
///
/// Pairs are stored trajectory by trajectory; pair `k` of a trajectory is
/// `(state_k, state_k+1)`.
pub fn generate_dataset(
    map: &RegionMap,
    n_states: usize,
    n_steps: usize,
    drops: DropConfig,
    rng: &mut Rng,
) -> Result<HeatDataset> {
    if n_states == 0 || n_steps == 0 {
        return Err(Error::invalid(
            "need at least one initial state and one timestep",
        ));
    }
    let plane = map.height * map.width;
    if drops.count == 0 || drops.count > plane {
        return Err(Error::invalid(format!(
            "{} drops on {plane} cells",
            drops.count
        )));
    }
    if !(drops.magnitude.is_finite() && drops.magnitude > 0.0) {
        return Err(Error::invalid(format!(
            "drop magnitude {}",
            drops.magnitude
        )));
    }

    let pairs = n_states * n_steps;
    let mut inputs = Vec::with_capacity(pairs * plane);
    let mut targets = Vec::with_capacity(pairs * plane);
    let mut state = vec![0.0f32; plane];
    let mut next = vec![0.0f32; plane];
    for _ in 0..n_states {
        state.iter_mut().for_each(|v| *v = 0.0);
        for cell in rng.distinct(plane, drops.count) {
            state[cell] = drops.magnitude;
        }
        for _ in 0..n_steps {
            step_plane(&state, &mut next, map);
            inputs.extend_from_slice(&state);
            targets.extend_from_slice(&next);
            core::mem::swap(&mut state, &mut next);
        }
    }
    HeatDataset::new(
        map.clone(),
        inputs,
        targets,
        Splits::by_trajectory(n_states, n_steps),
    )
}

/// Named dataset sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// 32x32, 200 initial states x 50 steps.
    Reduced,
    /// 64x64, 1000 initial states x 100 steps.
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PresetParams {
    pub height: usize,
    pub width: usize,
    pub n_states: usize,
    pub n_steps: usize,
    pub drops: DropConfig,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Reduced => "reduced",
            Preset::Paper => "paper",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "reduced" => Some(Preset::Reduced),
            "paper" => Some(Preset::Paper),
            _ => None,
        }
    }

    pub fn params(self) -> PresetParams {
        let (size, n_states, n_steps) = match self {
            Preset::Reduced => (32, 200, 50),
            Preset::Paper => (64, 1000, 100),
        };
        PresetParams {
            height: size,
            width: size,
            n_states,
            n_steps,
            drops: DropConfig::default(),
        }
    }

    /// Region map and dataset for this preset. The map and the trajectories
    /// draw from separate sub-streams of `seed`.
    pub fn generate(self, seed: u64) -> Result<HeatDataset> {
        let p = self.params();
        let base = Rng::new(seed);
        let map = generate_region_map(
            p.height,
            p.width,
            &BENCHMARK_DIFFUSIVITIES,
            &mut base.fork(0),
        )?;
        generate_dataset(&map, p.n_states, p.n_steps, p.drops, &mut base.fork(1))
    }
}
