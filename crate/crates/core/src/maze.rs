//! Continuous maze world: generation, point-mass dynamics, collision and
//! context encoding.
//!
//! Cells are addressed `(row, col)`. Cell `(r, c)` covers the closed world
//! square `[c·s, (c+1)·s] × [r·s, (r+1)·s]` where `s` is the cell size, so
//! `x` grows with the column and `y` with the row.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Vec2;

/// Distance kept between the agent and a wall face after a collision.
pub const SKIN: f64 = 1e-3;

/// Default resolution of the bird's-eye context grid.
pub const DEFAULT_CONTEXT_SIZE: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum MazeError {
    #[error("invalid maze dimensions {width}x{height}: both must be at least 3")]
    InvalidDimension { width: usize, height: usize },
    #[error("wall density {0} outside [0, 0.5)")]
    InvalidDensity(f64),
    #[error("invalid action ({0}, {1}): components must be finite")]
    InvalidAction(f64, f64),
    #[error("invalid maze description: {0}")]
    Invalid(String),
    #[error("malformed maze json: {0}")]
    Json(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn manhattan(self, other: Cell) -> usize {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col)
    }
}

/// Rectangular occupancy grid with continuous bounds.
///
/// Invariants (checked by every constructor): boundary cells are walls, the
/// start-corner cell `(1, 1)` is free, and all free cells form one
/// 4-connected component.
#[derive(Debug, Clone, PartialEq)]
pub struct Maze {
    width: usize,
    height: usize,
    cell_size: f64,
    walls: Vec<bool>,
    seed: u64,
}

impl Maze {
    /// Generates a maze with interior walls placed at roughly `wall_density`,
    /// then repaired to connectivity by knocking out walls in row-major order.
    pub fn generate(seed: u64, width: usize, height: usize, wall_density: f64) -> Result<Maze, MazeError> {
        if width < 3 || height < 3 {
            return Err(MazeError::InvalidDimension { width, height });
        }
        if !(0.0..0.5).contains(&wall_density) {
            return Err(MazeError::InvalidDensity(wall_density));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut walls = vec![false; width * height];
        for row in 0..height {
            for col in 0..width {
                let boundary = row == 0 || col == 0 || row == height - 1 || col == width - 1;
                walls[row * width + col] = boundary || rng.random::<f64>() < wall_density;
            }
        }
        let start = Cell::new(1, 1);
        let far = Cell::new(height - 2, width - 2);
        walls[start.row * width + start.col] = false;
        walls[far.row * width + far.col] = false;

        let mut maze = Maze { width, height, cell_size: 1.0, walls, seed };
        maze.repair_connectivity(start);
        Ok(maze)
    }

    /// Builds a maze from an explicit wall grid (`walls[row * width + col]`),
    /// validating every invariant.
    pub fn from_walls(
        width: usize,
        height: usize,
        cell_size: f64,
        seed: u64,
        walls: Vec<bool>,
    ) -> Result<Maze, MazeError> {
        if width < 3 || height < 3 {
            return Err(MazeError::InvalidDimension { width, height });
        }
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(MazeError::Invalid(format!("cell_size {cell_size} must be finite and positive")));
        }
        if walls.len() != width * height {
            return Err(MazeError::Invalid(format!("expected {} cells, got {}", width * height, walls.len())));
        }
        let maze = Maze { width, height, cell_size, walls, seed };
        for row in 0..height {
            for col in 0..width {
                let boundary = row == 0 || col == 0 || row == height - 1 || col == width - 1;
                if boundary && !maze.is_wall(Cell::new(row, col)) {
                    return Err(MazeError::Invalid(format!("boundary cell ({row}, {col}) is free")));
                }
            }
        }
        if maze.is_wall(Cell::new(1, 1)) {
            return Err(MazeError::Invalid("start corner cell (1, 1) is a wall".into()));
        }
        if !maze.is_connected() {
            return Err(MazeError::Invalid("free cells are not 4-connected".into()));
        }
        Ok(maze)
    }

    fn repair_connectivity(&mut self, start: Cell) {
        loop {
            let reached = self.flood_fill(start);
            let unreached_free = |c: Cell| !self.is_wall(c) && !reached[self.index(c)];
            if !self.free_cells().into_iter().any(unreached_free) {
                return;
            }
            let interior_walls = (1..self.height - 1)
                .flat_map(|r| (1..self.width - 1).map(move |c| Cell::new(r, c)))
                .filter(|&c| self.is_wall(c));
            let mut bridge = None;
            let mut grow = None;
            for cell in interior_walls {
                let ns = self.neighbors(cell);
                let touches_reached = ns.iter().any(|&n| reached[self.index(n)]);
                if !touches_reached {
                    continue;
                }
                if ns.iter().any(|&n| unreached_free(n)) {
                    bridge = Some(cell);
                    break;
                }
                grow.get_or_insert(cell);
            }
            let cell = bridge.or(grow).expect("an unreached free cell implies a removable interior wall");
            let idx = self.index(cell);
            self.walls[idx] = false;
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn world_width(&self) -> f64 {
        self.width as f64 * self.cell_size
    }

    pub fn world_height(&self) -> f64 {
        self.height as f64 * self.cell_size
    }

    fn index(&self, cell: Cell) -> usize {
        cell.row * self.width + cell.col
    }

    pub fn is_wall(&self, cell: Cell) -> bool {
        self.walls[self.index(cell)]
    }

    pub fn is_free(&self, cell: Cell) -> bool {
        !self.is_wall(cell)
    }

    /// Row-major wall grid.
    pub fn walls(&self) -> &[bool] {
        &self.walls
    }

    pub fn in_bounds(&self, p: Vec2) -> bool {
        p.is_finite() && p.x >= 0.0 && p.y >= 0.0 && p.x <= self.world_width() && p.y <= self.world_height()
    }

    /// Cell containing `p` (half-open on the upper side, clamped at the far
    /// boundary); `None` outside the maze.
    pub fn cell_of(&self, p: Vec2) -> Option<Cell> {
        if !self.in_bounds(p) {
            return None;
        }
        let col = ((p.x / self.cell_size) as usize).min(self.width - 1);
        let row = ((p.y / self.cell_size) as usize).min(self.height - 1);
        Some(Cell::new(row, col))
    }

    pub fn cell_center(&self, cell: Cell) -> Vec2 {
        Vec2::new((cell.col as f64 + 0.5) * self.cell_size, (cell.row as f64 + 0.5) * self.cell_size)
    }

    /// True when `p` lies strictly inside some wall cell.
    pub fn in_wall_interior(&self, p: Vec2) -> bool {
        match self.cell_of(p) {
            None => true,
            Some(cell) => {
                if !self.is_wall(cell) {
                    return false;
                }
                let lo = Vec2::new(cell.col as f64 * self.cell_size, cell.row as f64 * self.cell_size);
                p.x > lo.x && p.x < lo.x + self.cell_size && p.y > lo.y && p.y < lo.y + self.cell_size
            }
        }
    }

    /// 4-neighbors in the fixed order up, right, down, left.
    pub fn neighbors(&self, cell: Cell) -> Vec<Cell> {
        let mut out = Vec::with_capacity(4);
        if cell.row > 0 {
            out.push(Cell::new(cell.row - 1, cell.col));
        }
        if cell.col + 1 < self.width {
            out.push(Cell::new(cell.row, cell.col + 1));
        }
        if cell.row + 1 < self.height {
            out.push(Cell::new(cell.row + 1, cell.col));
        }
        if cell.col > 0 {
            out.push(Cell::new(cell.row, cell.col - 1));
        }
        out
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| Cell::new(r, c)))
            .filter(|&c| self.is_free(c))
            .collect()
    }

    /// Free cells of the lowest-coordinate quadrant (the start corner).
    pub fn start_region(&self) -> Vec<Cell> {
        let max_row = ((self.height - 1) / 2).max(1);
        let max_col = ((self.width - 1) / 2).max(1);
        self.free_cells().into_iter().filter(|c| c.row <= max_row && c.col <= max_col).collect()
    }

    /// Reachability mask of free cells from `from` (row-major).
    pub fn flood_fill(&self, from: Cell) -> Vec<bool> {
        let mut seen = vec![false; self.walls.len()];
        if self.is_wall(from) {
            return seen;
        }
        let mut queue = VecDeque::from([from]);
        seen[self.index(from)] = true;
        while let Some(cell) = queue.pop_front() {
            for n in self.neighbors(cell) {
                let i = self.index(n);
                if !seen[i] && !self.walls[i] {
                    seen[i] = true;
                    queue.push_back(n);
                }
            }
        }
        seen
    }

    pub fn is_connected(&self) -> bool {
        let free = self.free_cells();
        let Some(&first) = free.first() else {
            return false;
        };
        let seen = self.flood_fill(first);
        free.iter().all(|&c| seen[self.index(c)])
    }

    pub fn to_file(&self) -> MazeFile {
        MazeFile {
            width: self.width,
            height: self.height,
            cell_size: self.cell_size,
            seed: self.seed,
            walls: (0..self.height)
                .map(|r| (0..self.width).map(|c| if self.is_wall(Cell::new(r, c)) { '1' } else { '0' }).collect())
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("maze serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Maze, MazeError> {
        let file: MazeFile = serde_json::from_str(text).map_err(|e| MazeError::Json(e.to_string()))?;
        Maze::try_from(file)
    }
}

/// On-disk maze layout: rows are strings of `'0'` (free) / `'1'` (wall).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MazeFile {
    pub width: usize,
    pub height: usize,
    pub cell_size: f64,
    pub seed: u64,
    pub walls: Vec<String>,
}

impl TryFrom<MazeFile> for Maze {
    type Error = MazeError;

    fn try_from(file: MazeFile) -> Result<Maze, MazeError> {
        if file.walls.len() != file.height {
            return Err(MazeError::Invalid(format!("height {} but {} wall rows", file.height, file.walls.len())));
        }
        let mut walls = Vec::with_capacity(file.width.saturating_mul(file.height).min(1 << 20));
        for (r, row) in file.walls.iter().enumerate() {
            if row.len() != file.width {
                return Err(MazeError::Invalid(format!("row {r} has length {}, expected {}", row.len(), file.width)));
            }
            for ch in row.chars() {
                match ch {
                    '0' => walls.push(false),
                    '1' => walls.push(true),
                    other => return Err(MazeError::Invalid(format!("unexpected character {other:?} in row {r}"))),
                }
            }
        }
        Maze::from_walls(file.width, file.height, file.cell_size, file.seed, walls)
    }
}

impl Serialize for Maze {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_file().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Maze {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Maze, D::Error> {
        let file = MazeFile::deserialize(d)?;
        Maze::try_from(file).map_err(serde::de::Error::custom)
    }
}

/// Continuous agent state: position is the goal-comparable part, velocity the rest.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentState {
    pub position: Vec2,
    pub velocity: Vec2,
}

impl AgentState {
    pub fn at_rest(position: Vec2) -> Self {
        Self { position, velocity: Vec2::ZERO }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub position: Vec2,
    pub epsilon: f64,
}

/// Closed-ball success test.
pub fn is_success(state: &AgentState, goal: &Goal) -> bool {
    state.position.distance(goal.position) <= goal.epsilon
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicsParams {
    pub dt: f64,
    pub v_max: f64,
    pub a_max: f64,
}

impl Default for DynamicsParams {
    fn default() -> Self {
        Self { dt: 0.1, v_max: 1.0, a_max: 1.0 }
    }
}

/// Start and goal of a fresh episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStart {
    pub state: AgentState,
    pub goal: Goal,
    /// No free cell met the goal-distance floor; the farthest free cell was used.
    pub degenerate: bool,
}

/// Samples a start in the start-corner quadrant and a distant goal.
pub fn reset_episode(maze: &Maze, seed: u64, epsilon: f64) -> EpisodeStart {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let region = maze.start_region();
    let start = region[rng.random_range(0..region.len())];
    let (goal_cell, degenerate) = sample_goal_cell(maze, start, &mut rng);
    EpisodeStart {
        state: AgentState::at_rest(maze.cell_center(start)),
        goal: Goal { position: maze.cell_center(goal_cell), epsilon },
        degenerate,
    }
}

/// Goal cell at Manhattan distance at least `(width + height) / 2` from
/// `start`; falls back to the farthest free cell (first in row-major order).
pub fn sample_goal_cell(maze: &Maze, start: Cell, rng: &mut impl Rng) -> (Cell, bool) {
    let floor = (maze.width() + maze.height()) / 2;
    let free = maze.free_cells();
    let far: Vec<Cell> = free.iter().copied().filter(|&c| c != start && c.manhattan(start) >= floor).collect();
    if !far.is_empty() {
        return (far[rng.random_range(0..far.len())], false);
    }
    let farthest =
        free.iter().copied().fold(start, |best, c| if c.manhattan(start) > best.manhattan(start) { c } else { best });
    (farthest, true)
}

/// Where a straight motion first touches a wall.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WallHit {
    /// Segment parameter in `[0, 1]` of the first contact.
    pub t: f64,
    /// Contact through a face normal to the x axis.
    pub blocks_x: bool,
    /// Contact through a face normal to the y axis.
    pub blocks_y: bool,
}

/// First contact of the closed segment `p0 → p1` with any wall cell's closed
/// extent. Every wall cell overlapping the segment's bounding box is tested
/// exactly with the slab method.
pub fn first_wall_hit(maze: &Maze, p0: Vec2, p1: Vec2) -> Option<WallHit> {
    let s = maze.cell_size();
    let span = |a: f64, b: f64, n: usize| {
        let lo = (a.min(b) / s).ceil() as i64 - 1;
        let hi = (a.max(b) / s).floor() as i64;
        (lo.max(0) as usize, hi.clamp(0, n as i64 - 1) as usize)
    };
    let (c0, c1) = span(p0.x, p1.x, maze.width());
    let (r0, r1) = span(p0.y, p1.y, maze.height());
    let d = p1 - p0;
    let mut best: Option<WallHit> = None;
    for row in r0..=r1 {
        for col in c0..=c1 {
            let cell = Cell::new(row, col);
            if !maze.is_wall(cell) {
                continue;
            }
            let lo = Vec2::new(col as f64 * s, row as f64 * s);
            let Some(hit) = segment_box_entry(p0, d, lo, Vec2::new(lo.x + s, lo.y + s)) else {
                continue;
            };
            best = match best {
                Some(b) if b.t < hit.t => Some(b),
                Some(b) if b.t == hit.t => {
                    Some(WallHit { t: b.t, blocks_x: b.blocks_x || hit.blocks_x, blocks_y: b.blocks_y || hit.blocks_y })
                }
                _ => Some(hit),
            };
        }
    }
    best
}

fn segment_box_entry(p0: Vec2, d: Vec2, lo: Vec2, hi: Vec2) -> Option<WallHit> {
    // (entry, exit) parameters per axis; None when the axis is unconstrained.
    let axis = |p: f64, d: f64, lo: f64, hi: f64| -> Result<Option<(f64, f64)>, ()> {
        if d == 0.0 {
            if p < lo || p > hi {
                Err(())
            } else {
                Ok(None)
            }
        } else {
            let a = (lo - p) / d;
            let b = (hi - p) / d;
            Ok(Some((a.min(b), a.max(b))))
        }
    };
    let ax = axis(p0.x, d.x, lo.x, hi.x).ok()?;
    let ay = axis(p0.y, d.y, lo.y, hi.y).ok()?;
    let enter = f64::max(ax.map_or(f64::NEG_INFINITY, |a| a.0), ay.map_or(f64::NEG_INFINITY, |a| a.0));
    let exit = f64::min(ax.map_or(f64::INFINITY, |a| a.1), ay.map_or(f64::INFINITY, |a| a.1));
    if enter > exit || exit < 0.0 || enter > 1.0 {
        return None;
    }
    let t = enter.max(0.0);
    Some(WallHit { t, blocks_x: ax.is_some_and(|a| a.0 == enter), blocks_y: ay.is_some_and(|a| a.0 == enter) })
}

/// True iff the closed segment touches a wall. Out-of-bounds endpoints count as blocked.
pub fn segment_blocked(maze: &Maze, p0: Vec2, p1: Vec2) -> bool {
    if !maze.in_bounds(p0) || !maze.in_bounds(p1) {
        return true;
    }
    first_wall_hit(maze, p0, p1).is_some()
}

/// Semi-implicit Euler step without obstacles.
pub fn integrate_free(state: &AgentState, action: Vec2, params: &DynamicsParams) -> Result<AgentState, MazeError> {
    if !action.is_finite() {
        return Err(MazeError::InvalidAction(action.x, action.y));
    }
    let action = action.clamp_components(params.a_max);
    let velocity = (state.velocity + action * params.dt).clamp_components(params.v_max);
    Ok(AgentState { position: state.position + velocity * params.dt, velocity })
}

/// One dynamics step with stop-at-contact collision handling: on contact the
/// agent halts `SKIN` short of the wall and the normal velocity is zeroed.
pub fn step_dynamics(
    maze: &Maze,
    state: &AgentState,
    action: Vec2,
    params: &DynamicsParams,
) -> Result<AgentState, MazeError> {
    let free = integrate_free(state, action, params)?;
    let p0 = state.position;
    let Some(hit) = first_wall_hit(maze, p0, free.position) else {
        return Ok(free);
    };
    let d = free.position - p0;
    let len = d.norm();
    let t = if len > 0.0 { (hit.t - SKIN / len).max(0.0) } else { 0.0 };
    let mut velocity = free.velocity;
    if hit.blocks_x {
        velocity.x = 0.0;
    }
    if hit.blocks_y {
        velocity.y = 0.0;
    }
    Ok(AgentState { position: p0 + d * t, velocity })
}

/// Bird's-eye context: max-pooled wall occupancy plus one-hot agent and goal cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextGrid {
    pub g: usize,
    pub occupancy: Vec<u8>,
    /// Flattened index of the agent's context cell.
    pub agent: usize,
    /// Flattened index of the goal's context cell.
    pub goal: usize,
}

impl ContextGrid {
    pub fn agent_channel(&self) -> Vec<f64> {
        one_hot(self.g * self.g, self.agent)
    }

    pub fn goal_channel(&self) -> Vec<f64> {
        one_hot(self.g * self.g, self.goal)
    }

    /// Appends occupancy, agent and goal channels (3·G² values).
    pub fn write_features(&self, out: &mut Vec<f64>) {
        let n = self.g * self.g;
        out.extend(self.occupancy.iter().map(|&o| o as f64));
        let base = out.len();
        out.resize(base + 2 * n, 0.0);
        out[base + self.agent] = 1.0;
        out[base + n + self.goal] = 1.0;
    }
}

fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// Downsampled wall occupancy at `g × g`. A context cell is occupied when any
/// maze cell overlapping it with positive area is a wall.
pub fn occupancy_grid(maze: &Maze, g: usize) -> Vec<u8> {
    let range = |j: usize, n: usize| (j * n / g, ((j + 1) * n).div_ceil(g));
    let mut occ = vec![0u8; g * g];
    for i in 0..g {
        let (r0, r1) = range(i, maze.height());
        for j in 0..g {
            let (c0, c1) = range(j, maze.width());
            let wall = (r0..r1).any(|r| (c0..c1).any(|c| maze.is_wall(Cell::new(r, c))));
            occ[i * g + j] = wall as u8;
        }
    }
    occ
}

/// Context-grid index of the cell containing `p`.
pub fn context_index(maze: &Maze, p: Vec2, g: usize) -> usize {
    let fx = (p.x / maze.world_width()).clamp(0.0, 1.0);
    let fy = (p.y / maze.world_height()).clamp(0.0, 1.0);
    let j = ((fx * g as f64) as usize).min(g - 1);
    let i = ((fy * g as f64) as usize).min(g - 1);
    i * g + j
}

pub fn encode_context(maze: &Maze, state: &AgentState, goal: &Goal, g: usize) -> ContextGrid {
    ContextGrid {
        g,
        occupancy: occupancy_grid(maze, g),
        agent: context_index(maze, state.position, g),
        goal: context_index(maze, goal.position, g),
    }
}
