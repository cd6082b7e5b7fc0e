//! Scripted demonstrator: breadth-first shortest path over free cells, then a
//! subgoal a few cells ahead that stays within the subgoal radius and in
//! straight-line view of the agent.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geom::Vec2;
use crate::maze::{segment_blocked, AgentState, Cell, Goal, Maze};

#[derive(Debug, Error, PartialEq)]
pub enum ExpertError {
    #[error("no path from {from:?} to {to:?}")]
    NoPath { from: Cell, to: Cell },
    #[error("position ({0}, {1}) is not inside a free cell")]
    NotFree(f64, f64),
    #[error("demonstrator unavailable: {0}")]
    Unavailable(String),
}

/// Ordered 4-neighbor path of free cells, agent cell first, goal cell last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedPath {
    pub cells: Vec<Cell>,
}

impl PlannedPath {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

fn free_cell(maze: &Maze, p: Vec2) -> Result<Cell, ExpertError> {
    maze.cell_of(p).filter(|&c| maze.is_free(c)).ok_or(ExpertError::NotFree(p.x, p.y))
}

/// BFS over free cells; ties resolved by the neighbor order up, right, down, left.
pub fn plan_shortest_path(maze: &Maze, from_pos: Vec2, to_pos: Vec2) -> Result<PlannedPath, ExpertError> {
    let from = free_cell(maze, from_pos)?;
    let to = free_cell(maze, to_pos)?;
    plan_cells(maze, from, to)
}

pub fn plan_cells(maze: &Maze, from: Cell, to: Cell) -> Result<PlannedPath, ExpertError> {
    let w = maze.width();
    let mut parent: Vec<Option<Cell>> = vec![None; w * maze.height()];
    let mut seen = vec![false; w * maze.height()];
    let idx = |c: Cell| c.row * w + c.col;
    seen[idx(from)] = true;
    let mut queue = VecDeque::from([from]);
    while let Some(cell) = queue.pop_front() {
        if cell == to {
            break;
        }
        for n in maze.neighbors(cell) {
            if maze.is_free(n) && !seen[idx(n)] {
                seen[idx(n)] = true;
                parent[idx(n)] = Some(cell);
                queue.push_back(n);
            }
        }
    }
    if !seen[idx(to)] {
        return Err(ExpertError::NoPath { from, to });
    }
    let mut cells = vec![to];
    let mut cur = to;
    while let Some(p) = parent[idx(cur)] {
        cells.push(p);
        cur = p;
    }
    cells.reverse();
    Ok(PlannedPath { cells })
}

/// Subgoal for the agent: the path cell `min(lookahead, len − 1)` steps ahead
/// (the goal itself when that is the goal cell), pulled back to within
/// `radius` of the agent, backing off one cell at a time until the straight
/// segment from the agent is wall-free.
pub fn expert_subgoal(
    maze: &Maze,
    state: &AgentState,
    goal: &Goal,
    lookahead: usize,
    radius: f64,
) -> Result<Vec2, ExpertError> {
    let path = plan_shortest_path(maze, state.position, goal.position)?;
    let here = state.position;
    let last = path.len() - 1;
    let target = |k: usize| {
        let raw = if k == last { goal.position } else { maze.cell_center(path.cells[k]) };
        here + (raw - here).clamp_norm(radius)
    };
    for k in (1..=lookahead.max(1).min(last)).rev() {
        let candidate = target(k);
        if !segment_blocked(maze, here, candidate) {
            return Ok(candidate);
        }
    }
    // Own cell: the goal when already there, otherwise the cell center.
    let home = target(0);
    if !segment_blocked(maze, here, home) {
        return Ok(home);
    }
    Ok(here)
}

/// A source of subgoal demonstrations. Returns a world-space subgoal.
pub trait Expert {
    fn demonstrate(&mut self, maze: &Maze, state: &AgentState, goal: &Goal) -> Result<Vec2, ExpertError>;
}

/// Deterministic shortest-path demonstrator with optional Gaussian label noise.
#[derive(Debug, Clone)]
pub struct OracleExpert {
    pub lookahead: usize,
    pub radius: f64,
    label_noise: Option<(Normal<f64>, ChaCha8Rng)>,
}

impl OracleExpert {
    pub fn new(lookahead: usize, radius: f64) -> Self {
        Self { lookahead, radius, label_noise: None }
    }

    /// Adds `N(0, sigma²)` noise per coordinate; `sigma <= 0` disables it.
    pub fn with_label_noise(mut self, sigma: f64, seed: u64) -> Self {
        self.label_noise =
            Normal::new(0.0, sigma).ok().filter(|_| sigma > 0.0).map(|n| (n, ChaCha8Rng::seed_from_u64(seed)));
        self
    }
}

impl Expert for OracleExpert {
    fn demonstrate(&mut self, maze: &Maze, state: &AgentState, goal: &Goal) -> Result<Vec2, ExpertError> {
        let subgoal = expert_subgoal(maze, state, goal, self.lookahead, self.radius)?;
        Ok(match &mut self.label_noise {
            Some((dist, rng)) => {
                let noisy = subgoal + Vec2::new(dist.sample(rng), dist.sample(rng));
                state.position + (noisy - state.position).clamp_norm(self.radius)
            }
            None => subgoal,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::collections::BinaryHeap;

    fn corridor() -> Maze {
        // 7 wide, 3 tall: a single free row of five cells.
        Maze::from_walls(7, 3, 1.0, 0, (0..21).map(|i| !(8..=12).contains(&i)).collect()).unwrap()
    }

    /// Independent Dijkstra with unit weights.
    fn dijkstra_len(maze: &Maze, from: Cell, to: Cell) -> Option<usize> {
        let mut dist = vec![usize::MAX; maze.width() * maze.height()];
        let idx = |c: Cell| c.row * maze.width() + c.col;
        let mut heap = BinaryHeap::new();
        dist[idx(from)] = 0;
        heap.push(std::cmp::Reverse((0usize, from)));
        while let Some(std::cmp::Reverse((d, c))) = heap.pop() {
            if d > dist[idx(c)] {
                continue;
            }
            let (r, k) = (c.row as isize, c.col as isize);
            for (dr, dc) in [(0, 1), (1, 0), (0, -1), (-1, 0)] {
                let n = Cell::new((r + dr) as usize, (k + dc) as usize);
                if maze.is_free(n) && d + 1 < dist[idx(n)] {
                    dist[idx(n)] = d + 1;
                    heap.push(std::cmp::Reverse((d + 1, n)));
                }
            }
        }
        (dist[idx(to)] != usize::MAX).then(|| dist[idx(to)] + 1)
    }

    #[test]
    fn same_cell_path_has_length_one() {
        let m = corridor();
        let p = plan_shortest_path(&m, Vec2::new(1.2, 1.5), Vec2::new(1.8, 1.4)).unwrap();
        assert_eq!(p.cells, vec![Cell::new(1, 1)]);
    }

    #[test]
    fn corridor_path_is_the_corridor() {
        let m = corridor();
        let p = plan_shortest_path(&m, Vec2::new(1.5, 1.5), Vec2::new(5.5, 1.5)).unwrap();
        assert_eq!(p.cells, (1..=5).map(|c| Cell::new(1, c)).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_positions_in_walls() {
        let m = corridor();
        assert!(matches!(
            plan_shortest_path(&m, Vec2::new(0.5, 0.5), Vec2::new(2.5, 1.5)),
            Err(ExpertError::NotFree(..))
        ));
    }

    #[test]
    fn bfs_matches_dijkstra_on_random_mazes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for seed in 0..100 {
            let m = Maze::generate(seed, 10, 10, 0.35).unwrap();
            let free = m.free_cells();
            let a = free[rng.random_range(0..free.len())];
            let b = free[rng.random_range(0..free.len())];
            let p = plan_cells(&m, a, b).unwrap();
            assert_eq!(Some(p.len()), dijkstra_len(&m, a, b));
            assert!(p.cells.windows(2).all(|w| w[0].manhattan(w[1]) == 1));
            assert!(p.cells.iter().all(|&c| m.is_free(c)));
            assert_eq!((p.cells[0], *p.cells.last().unwrap()), (a, b));
        }
    }

    #[test]
    fn planner_is_optimal_exhaustively_on_small_mazes() {
        for seed in 0..100 {
            let m = Maze::generate(seed, 8, 8, 0.3).unwrap();
            let free = m.free_cells();
            let from = free[0];
            for &to in &free {
                assert_eq!(Some(plan_cells(&m, from, to).unwrap().len()), dijkstra_len(&m, from, to));
            }
        }
    }

    #[test]
    fn subgoal_in_goal_cell_is_goal() {
        let m = corridor();
        let goal = Goal { position: Vec2::new(3.5, 1.5), epsilon: 0.5 };
        let s = AgentState::at_rest(Vec2::new(3.2, 1.3));
        assert_eq!(expert_subgoal(&m, &s, &goal, 3, 2.0).unwrap(), goal.position);
    }

    #[test]
    fn corridor_subgoal_is_clamped_to_radius() {
        let m = corridor();
        let goal = Goal { position: Vec2::new(5.5, 1.5), epsilon: 0.5 };
        let s = AgentState::at_rest(Vec2::new(1.5, 1.5));
        let sg = expert_subgoal(&m, &s, &goal, 3, 2.0).unwrap();
        assert!((sg.x - 3.5).abs() < 1e-12 && (sg.y - 1.5).abs() < 1e-12);
    }

    #[test]
    fn subgoals_stay_in_radius_and_view() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for i in 0..1000u64 {
            let m = Maze::generate(i % 50, 10, 10, 0.3).unwrap();
            let free = m.free_cells();
            let c = free[rng.random_range(0..free.len())];
            let g = free[rng.random_range(0..free.len())];
            let lo = Vec2::new(c.col as f64 + 0.01, c.row as f64 + 0.01);
            let pos = lo + Vec2::new(rng.random_range(0.0..0.98), rng.random_range(0.0..0.98));
            let s = AgentState::at_rest(pos);
            let goal = Goal { position: m.cell_center(g), epsilon: 0.5 };
            let sg = expert_subgoal(&m, &s, &goal, 3, 2.0).unwrap();
            assert!(sg.distance(pos) <= 2.0 + 1e-12);
            assert!(!segment_blocked(&m, pos, sg), "maze {} from {pos:?} to {sg:?}", i % 50);
        }
    }

    #[test]
    fn greedy_following_reaches_goal_within_path_length() {
        // Perfect executor: the agent teleports to each demonstrated subgoal.
        for seed in 0..40 {
            let m = Maze::generate(seed, 6, 6, 0.3).unwrap();
            let start = crate::maze::reset_episode(&m, seed, 0.5);
            let path_len = plan_shortest_path(&m, start.state.position, start.goal.position).unwrap().len();
            let mut s = start.state;
            let mut attempts = 0;
            while !crate::maze::is_success(&s, &start.goal) {
                s.position = expert_subgoal(&m, &s, &start.goal, 3, 2.0).unwrap();
                attempts += 1;
                assert!(attempts <= path_len, "seed {seed}");
            }
        }
    }

    #[test]
    fn label_noise_keeps_radius() {
        let m = Maze::generate(3, 10, 10, 0.2).unwrap();
        let start = crate::maze::reset_episode(&m, 3, 0.5);
        let mut e = OracleExpert::new(3, 2.0).with_label_noise(0.5, 1);
        let clean = expert_subgoal(&m, &start.state, &start.goal, 3, 2.0).unwrap();
        let noisy = e.demonstrate(&m, &start.state, &start.goal).unwrap();
        assert_ne!(clean, noisy);
        assert!(noisy.distance(start.state.position) <= 2.0 + 1e-12);
        let mut plain = OracleExpert::new(3, 2.0);
        assert_eq!(plain.demonstrate(&m, &start.state, &start.goal).unwrap(), clean);
    }
}
