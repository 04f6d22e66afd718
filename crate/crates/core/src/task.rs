//! Search tasks and the episode dynamics around them.
//!
//! A task is a grid of `rows × cols` cells with one feature vector and one
//! hidden binary label per cell. Cells are indexed row-major from the top-left.
//! A [`SearchState`] is advanced with [`step`], which reveals one label, and
//! never mutates in place.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VasError};

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    id: String,
    rows: usize,
    cols: usize,
    feature_dim: usize,
    /// `n_cells × feature_dim`, cell-major.
    features: Vec<f64>,
    labels: Vec<u8>,
}

impl Task {
    pub fn new(
        id: impl Into<String>,
        (rows, cols): (usize, usize),
        feature_dim: usize,
        features: Vec<f64>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let n = rows * cols;
        if n == 0 {
            return Err(VasError::InvalidTask("grid has no cells".into()));
        }
        if feature_dim == 0 {
            return Err(VasError::InvalidTask(
                "feature dimension must be at least 1".into(),
            ));
        }
        if features.len() != n * feature_dim {
            return Err(VasError::InvalidTask(format!(
                "expected {n}x{feature_dim} features, got {} values",
                features.len()
            )));
        }
        if let Some(pos) = features.iter().position(|x| !x.is_finite()) {
            return Err(VasError::InvalidTask(format!(
                "non-finite feature at cell {}, channel {}",
                pos / feature_dim,
                pos % feature_dim
            )));
        }
        if labels.len() != n {
            return Err(VasError::InvalidTask(format!(
                "expected {n} labels, got {}",
                labels.len()
            )));
        }
        if let Some(pos) = labels.iter().position(|&y| y > 1) {
            return Err(VasError::InvalidTask(format!(
                "label at cell {pos} is not 0 or 1"
            )));
        }
        Ok(Self {
            id: id.into(),
            rows,
            cols,
            feature_dim,
            features,
            labels,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn n_cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn cell_features(&self, cell: usize) -> &[f64] {
        &self.features[cell * self.feature_dim..(cell + 1) * self.feature_dim]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn total_targets(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }

    /// Same task with the features replaced (e.g. by an augmented copy).
    pub fn with_features(&self, features: Vec<f64>) -> Result<Self> {
        Task::new(
            self.id.clone(),
            self.grid_shape(),
            self.feature_dim,
            features,
            self.labels.clone(),
        )
    }

    /// The cell each site of a `side × side` latent map falls in.
    ///
    /// Site `(u, v)` covers cell `(⌊u·rows/side⌋, ⌊v·cols/side⌋)`, i.e. the
    /// grid is resampled by nearest neighbour onto the map.
    pub fn site_cells(&self, side: usize) -> Result<Vec<usize>> {
        if side < self.rows.max(self.cols) {
            return Err(VasError::Config(format!(
                "latent side {side} is smaller than the {}x{} grid; some cells would have no sites",
                self.rows, self.cols
            )));
        }
        let mut cells = Vec::with_capacity(side * side);
        for u in 0..side {
            for v in 0..side {
                cells.push((u * self.rows / side) * self.cols + v * self.cols / side);
            }
        }
        Ok(cells)
    }

    /// Channel-major `feature_dim × side × side` map built from the per-cell features.
    pub fn latent_map(&self, side: usize) -> Result<Vec<f64>> {
        let cells = self.site_cells(side)?;
        let sites = side * side;
        let mut map = vec![0.0; self.feature_dim * sites];
        for (p, &cell) in cells.iter().enumerate() {
            for (c, &x) in self.cell_features(cell).iter().enumerate() {
                map[c * sites + p] = x;
            }
        }
        Ok(map)
    }
}

/// Query outcomes so far plus the remaining budget.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SearchState {
    observations: Vec<i8>,
    remaining_budget: usize,
    queried: Vec<usize>,
}

impl SearchState {
    pub fn observations(&self) -> &[i8] {
        &self.observations
    }

    /// Observations as reals, the form the policy network consumes.
    pub fn observation_values(&self) -> Vec<f64> {
        self.observations.iter().map(|&o| o as f64).collect()
    }

    pub fn remaining_budget(&self) -> usize {
        self.remaining_budget
    }

    pub fn queried(&self) -> &[usize] {
        &self.queried
    }

    /// The episode's initial budget `K`.
    pub fn initial_budget(&self) -> usize {
        self.queried.len() + self.remaining_budget
    }

    pub fn n_cells(&self) -> usize {
        self.observations.len()
    }

    pub fn is_unqueried(&self, cell: usize) -> bool {
        self.observations[cell] == 0
    }

    pub fn unqueried_count(&self) -> usize {
        self.observations.len() - self.queried.len()
    }

    pub fn unqueried(&self) -> impl Iterator<Item = usize> + '_ {
        self.observations
            .iter()
            .enumerate()
            .filter(|(_, &o)| o == 0)
            .map(|(j, _)| j)
    }

    /// Records `outcome` (±1) for `cell`. Used by [`step`] and by outcome interventions.
    pub fn with_outcome(&self, cell: usize, outcome: i8) -> Result<Self> {
        if cell >= self.observations.len() {
            return Err(VasError::InvalidCell {
                cell,
                n_cells: self.observations.len(),
            });
        }
        if self.remaining_budget == 0 {
            return Err(VasError::BudgetExhausted);
        }
        if self.observations[cell] != 0 {
            return Err(VasError::RequeriedCell(cell));
        }
        debug_assert!(outcome == 1 || outcome == -1);
        let mut next = self.clone();
        next.observations[cell] = outcome;
        next.remaining_budget -= 1;
        next.queried.push(cell);
        Ok(next)
    }

    /// Builds a state directly; checks every invariant.
    pub fn from_parts(
        observations: Vec<i8>,
        remaining_budget: usize,
        queried: Vec<usize>,
    ) -> Result<Self> {
        let n = observations.len();
        let mut seen = vec![false; n];
        for &j in &queried {
            if j >= n {
                return Err(VasError::InvalidCell {
                    cell: j,
                    n_cells: n,
                });
            }
            if seen[j] {
                return Err(VasError::RequeriedCell(j));
            }
            seen[j] = true;
        }
        for (j, &o) in observations.iter().enumerate() {
            if !(-1..=1).contains(&o) || (o != 0) != seen[j] {
                return Err(VasError::Contract(format!(
                    "observation {o} at cell {j} disagrees with the query list"
                )));
            }
        }
        Ok(Self {
            observations,
            remaining_budget,
            queried,
        })
    }
}

/// Fresh state: nothing observed, `k` queries available.
pub fn initial_state(task: &Task, k: usize) -> Result<SearchState> {
    if k == 0 || k > task.n_cells() {
        return Err(VasError::InvalidBudget {
            k,
            n_cells: task.n_cells(),
        });
    }
    Ok(SearchState {
        observations: vec![0; task.n_cells()],
        remaining_budget: k,
        queried: Vec::with_capacity(k),
    })
}

/// +1 when the cell holds a target, -1 otherwise.
pub fn reward(task: &Task, cell: usize) -> Result<i8> {
    match task.labels().get(cell) {
        Some(1) => Ok(1),
        Some(_) => Ok(-1),
        None => Err(VasError::InvalidCell {
            cell,
            n_cells: task.n_cells(),
        }),
    }
}

/// Queries `cell`: the observation becomes the reward and the budget drops by one.
pub fn step(state: &SearchState, task: &Task, cell: usize) -> Result<(SearchState, i8)> {
    if state.n_cells() != task.n_cells() {
        return Err(VasError::Contract(
            "state and task have different cell counts".into(),
        ));
    }
    let r = reward(task, cell)?;
    Ok((state.with_outcome(cell, r)?, r))
}

/// Number of targets found, i.e. the count of +1 rewards.
pub fn episode_utility(rewards: &[i8]) -> usize {
    rewards.iter().filter(|&&r| r == 1).count()
}

/// Effective success rate: `discovered / min(total_targets, k)`.
///
/// Tasks without targets have nothing to find and score 1.0; aggregates skip them.
pub fn esr(discovered: usize, total_targets: usize, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(VasError::InvalidBudget {
            k,
            n_cells: total_targets,
        });
    }
    let reachable = total_targets.min(k);
    if discovered > reachable {
        return Err(VasError::InconsistentCount(format!(
            "{discovered} targets discovered but at most {reachable} are reachable \
             ({total_targets} targets, budget {k})"
        )));
    }
    if reachable == 0 {
        return Ok(1.0);
    }
    Ok(discovered as f64 / reachable as f64)
}

/// How many queries an episode gets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum BudgetSpec {
    Fixed { k: usize },
    UniformRandom { k_min: usize, k_max: usize },
}

impl Default for BudgetSpec {
    fn default() -> Self {
        BudgetSpec::UniformRandom {
            k_min: 12,
            k_max: 18,
        }
    }
}

impl BudgetSpec {
    /// Checks that every budget this spec can produce lies in `1..=n_cells`.
    pub fn validate(&self, n_cells: usize) -> Result<()> {
        let (lo, hi) = match *self {
            BudgetSpec::Fixed { k } => (k, k),
            BudgetSpec::UniformRandom { k_min, k_max } => (k_min, k_max),
        };
        if lo == 0 || lo > hi || hi > n_cells {
            return Err(VasError::InvalidBudget {
                k: if lo == 0 { lo } else { hi },
                n_cells,
            });
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match *self {
            BudgetSpec::Fixed { k } => k,
            BudgetSpec::UniformRandom { k_min, k_max } => rng.random_range(k_min..=k_max),
        }
    }
}

pub fn sample_budget<R: Rng + ?Sized>(spec: &BudgetSpec, rng: &mut R) -> usize {
    spec.sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn task(labels: &[u8]) -> Task {
        Task::new(
            "t",
            (1, labels.len()),
            1,
            vec![0.0; labels.len()],
            labels.to_vec(),
        )
        .unwrap()
    }

    #[test]
    fn initial_state_is_blank() {
        let s = initial_state(&task(&[0, 1, 0, 0]), 2).unwrap();
        assert_eq!(s.observations(), &[0, 0, 0, 0]);
        assert_eq!(s.remaining_budget(), 2);
        assert!(s.queried().is_empty());
        let s = initial_state(&task(&[1]), 1).unwrap();
        assert_eq!(s.observations(), &[0]);
        assert_eq!(s.remaining_budget(), 1);
    }

    #[test]
    fn budget_beyond_grid_rejected() {
        let err = initial_state(&task(&[0, 1, 0, 0]), 5).unwrap_err();
        assert!(matches!(err, VasError::InvalidBudget { k: 5, n_cells: 4 }));
        assert!(initial_state(&task(&[0, 1]), 0).is_err());
    }

    #[test]
    fn reward_follows_label() {
        let t = task(&[0, 0, 0, 1]);
        assert_eq!(reward(&t, 3).unwrap(), 1);
        assert_eq!(reward(&t, 0).unwrap(), -1);
        assert!(matches!(reward(&t, 4), Err(VasError::InvalidCell { .. })));
    }

    #[test]
    fn step_reveals_one_cell() {
        let t = task(&[0, 1, 0]);
        let s = initial_state(&t, 2).unwrap();
        let (s, r) = step(&s, &t, 1).unwrap();
        assert_eq!(r, 1);
        assert_eq!(s.observations(), &[0, 1, 0]);
        assert_eq!(s.remaining_budget(), 1);
        assert_eq!(s.queried(), &[1]);
    }

    #[test]
    fn requery_and_exhaustion_are_errors() {
        let t = task(&[0, 0, 0]);
        let s = SearchState::from_parts(vec![0, -1, 0], 1, vec![1]).unwrap();
        assert!(matches!(step(&s, &t, 1), Err(VasError::RequeriedCell(1))));
        let t2 = task(&[0, 0]);
        let s = SearchState::from_parts(vec![0, 0], 0, vec![]).unwrap();
        assert!(matches!(step(&s, &t2, 0), Err(VasError::BudgetExhausted)));
    }

    #[test]
    fn utility_counts_hits() {
        assert_eq!(episode_utility(&[1, -1, 1]), 2);
        assert_eq!(episode_utility(&[]), 0);
        assert_eq!(episode_utility(&[-1, -1, -1]), 0);
    }

    #[test]
    fn esr_examples() {
        assert!((esr(8, 10, 12).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(esr(5, 5, 15).unwrap(), 1.0);
        assert_eq!(esr(0, 7, 12).unwrap(), 0.0);
        assert_eq!(esr(0, 0, 12).unwrap(), 1.0);
        assert!(matches!(esr(6, 5, 15), Err(VasError::InconsistentCount(_))));
    }

    #[test]
    fn budget_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(sample_budget(&BudgetSpec::Fixed { k: 15 }, &mut rng), 15);
        let spec = BudgetSpec::UniformRandom {
            k_min: 12,
            k_max: 18,
        };
        let draws: Vec<usize> = (0..100_000)
            .map(|_| sample_budget(&spec, &mut rng))
            .collect();
        assert!(draws.iter().all(|k| (12..=18).contains(k)));
        let mean = draws.iter().sum::<usize>() as f64 / draws.len() as f64;
        assert!((mean - 15.0).abs() < 0.1, "mean {mean}");
        assert!(spec.validate(36).is_ok());
        assert!(spec.validate(17).is_err());
        assert!(BudgetSpec::Fixed { k: 0 }.validate(4).is_err());
    }

    #[test]
    fn latent_map_resamples_cells() {
        // 2x3 grid, 1 channel whose value is the cell index
        let t = Task::new("r", (2, 3), 1, (0..6).map(f64::from).collect(), vec![0; 6]).unwrap();
        let cells = t.site_cells(3).unwrap();
        assert_eq!(cells, vec![0, 1, 2, 0, 1, 2, 3, 4, 5]);
        assert_eq!(
            t.latent_map(3).unwrap(),
            vec![0., 1., 2., 0., 1., 2., 3., 4., 5.]
        );
        assert!(t.site_cells(2).is_err());
        // every cell is covered for any side at least as large as the grid
        for side in 3..12 {
            let mut covered = [false; 6];
            t.site_cells(side)
                .unwrap()
                .iter()
                .for_each(|&c| covered[c] = true);
            assert!(covered.iter().all(|&c| c));
        }
    }

    #[test]
    fn task_validation() {
        assert!(Task::new("x", (2, 2), 1, vec![0.0; 3], vec![0; 4]).is_err());
        assert!(Task::new("x", (2, 2), 1, vec![0.0; 4], vec![0, 1, 2, 0]).is_err());
        assert!(Task::new("x", (2, 2), 1, vec![0.0, f64::NAN, 0.0, 0.0], vec![0; 4]).is_err());
        assert!(Task::new("x", (0, 2), 1, vec![], vec![]).is_err());
    }
}
