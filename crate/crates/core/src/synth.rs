//! Synthetic search tasks with spatially clustered targets.
//!
//! Class feature means are derived from `class_seed` alone, so datasets drawn
//! with different `seed`s share the same target appearance. Changing
//! `class_seed` changes what targets look like, which is how target-class
//! shift is emulated.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Provenance, Split, TaskDataset};
use crate::error::{Result, VasError};
use crate::task::Task;

/// Confusers sit this many noise standard deviations away from the positive mean.
pub const CONFUSER_OFFSET: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub rows: usize,
    pub cols: usize,
    pub feature_dim: usize,
    /// 0 draws every label independently with probability `target_rate`.
    pub n_clusters: usize,
    /// Standard deviation, in cells, of the offsets used to grow a cluster.
    pub cluster_spread: f64,
    pub target_rate: f64,
    /// Distance between the class means in units of `noise_std`.
    pub signal_strength: f64,
    pub noise_std: f64,
    /// Fraction of negative cells whose features imitate a target.
    pub confuser_rate: f64,
    pub seed: u64,
    pub class_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            rows: 6,
            cols: 6,
            feature_dim: 16,
            n_clusters: 2,
            cluster_spread: 1.0,
            target_rate: 0.2,
            signal_strength: 6.0,
            noise_std: 1.0,
            confuser_rate: 0.0,
            seed: 0,
            class_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn n_cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Number of positives per task in clustered mode.
    fn cluster_targets(&self) -> usize {
        (self.target_rate * self.n_cells() as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(VasError::GenerationConfig(msg));
        if self.rows == 0 || self.cols == 0 {
            return bad(format!("grid {}x{} has no cells", self.rows, self.cols));
        }
        if self.rows > u16::MAX as usize || self.cols > u16::MAX as usize {
            return bad("grid dimensions must fit in u16".into());
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be at least 1".into());
        }
        if !(self.target_rate > 0.0 && self.target_rate < 1.0) {
            return bad(format!(
                "target_rate {} is outside (0, 1)",
                self.target_rate
            ));
        }
        if !(self.cluster_spread.is_finite() && self.cluster_spread > 0.0) {
            return bad(format!(
                "cluster_spread {} must be positive",
                self.cluster_spread
            ));
        }
        if !(self.signal_strength.is_finite() && self.signal_strength >= 0.0) {
            return bad(format!(
                "signal_strength {} must be non-negative",
                self.signal_strength
            ));
        }
        if !(self.noise_std.is_finite() && self.noise_std > 0.0) {
            return bad(format!("noise_std {} must be positive", self.noise_std));
        }
        if !(0.0..1.0).contains(&self.confuser_rate) {
            return bad(format!(
                "confuser_rate {} is outside [0, 1)",
                self.confuser_rate
            ));
        }
        if self.n_clusters > 0 {
            let m = self.cluster_targets();
            if m < 1 {
                return bad(format!(
                    "target_rate {} leaves no positive cell on a {}-cell grid but {} clusters were requested",
                    self.target_rate,
                    self.n_cells(),
                    self.n_clusters
                ));
            }
            if m < self.n_clusters {
                return bad(format!(
                    "{m} positives cannot form {} clusters",
                    self.n_clusters
                ));
            }
        }
        Ok(())
    }

    /// Stable fingerprint of the configuration.
    pub fn hash(&self, n_tasks: usize) -> String {
        let json = serde_json::to_string(&(self, n_tasks)).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..8])
    }
}

/// Unit direction separating the classes and a unit direction orthogonal to
/// it along which confusers are displaced.
fn class_directions(class_seed: u64, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(class_seed ^ 0x5641_535f_434c_4153);
    let mut gauss =
        |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let normalise = |v: &mut Vec<f64>| {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
    };
    let mut u = gauss(d);
    normalise(&mut u);
    if d == 1 {
        let v = vec![-u[0]];
        return (u, v);
    }
    let mut v = gauss(d);
    let proj: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(&u).for_each(|(x, a)| *x -= proj * a);
    normalise(&mut v);
    (u, v)
}

/// Mean feature vectors `(positive, negative, confuser)` for a config.
pub fn class_means(config: &SynthConfig) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (u, v) = class_directions(config.class_seed, config.feature_dim);
    let half = 0.5 * config.signal_strength * config.noise_std;
    let pos: Vec<f64> = u.iter().map(|x| half * x).collect();
    let neg: Vec<f64> = u.iter().map(|x| -half * x).collect();
    let conf = pos
        .iter()
        .zip(&v)
        .map(|(p, d)| p + CONFUSER_OFFSET * config.noise_std * d)
        .collect();
    (pos, neg, conf)
}

fn rounded_gaussian<R: Rng>(rng: &mut R, std: f64) -> i64 {
    let z: f64 = StandardNormal.sample(rng);
    (z * std).round() as i64
}

const NEIGHBOURS: [(i64, i64); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Grows each cluster from a uniformly placed seed cell: every new member is
/// an existing member of the same cluster displaced by a rounded Gaussian
/// offset (a random neighbour if the offset rounds to zero), clipped to the grid.
fn clustered_labels<R: Rng>(config: &SynthConfig, rng: &mut R) -> Result<Vec<u8>> {
    let (rows, cols) = (config.rows as i64, config.cols as i64);
    let n = config.n_cells();
    let target = config.cluster_targets();
    let mut labels = vec![0u8; n];
    let mut placed = 0;
    let mut members: Vec<Vec<(i64, i64)>> = Vec::with_capacity(config.n_clusters);
    for _ in 0..config.n_clusters {
        let cell = rng.random_range(0..n);
        let rc = ((cell / config.cols) as i64, (cell % config.cols) as i64);
        if labels[cell] == 0 {
            labels[cell] = 1;
            placed += 1;
        }
        members.push(vec![rc]);
    }
    let max_attempts = 10_000 * target.max(1);
    let mut attempts = 0;
    let mut cluster = 0;
    while placed < target {
        attempts += 1;
        if attempts > max_attempts {
            return Err(VasError::GenerationConfig(format!(
                "could not place {target} clustered positives on a {}x{} grid",
                config.rows, config.cols
            )));
        }
        let &(r, c) = members[cluster]
            .choose(rng)
            .expect("cluster has a seed cell");
        let (mut dr, mut dc) = (
            rounded_gaussian(rng, config.cluster_spread),
            rounded_gaussian(rng, config.cluster_spread),
        );
        if dr == 0 && dc == 0 {
            (dr, dc) = *NEIGHBOURS.choose(rng).expect("non-empty");
        }
        let rc = ((r + dr).clamp(0, rows - 1), (c + dc).clamp(0, cols - 1));
        let cell = (rc.0 * cols + rc.1) as usize;
        if labels[cell] == 0 {
            labels[cell] = 1;
            placed += 1;
            members[cluster].push(rc);
            cluster = (cluster + 1) % config.n_clusters;
        }
    }
    Ok(labels)
}

fn sample_task<R: Rng>(
    config: &SynthConfig,
    id: String,
    means: &(Vec<f64>, Vec<f64>, Vec<f64>),
    rng: &mut R,
) -> Result<Task> {
    let n = config.n_cells();
    let labels = if config.n_clusters == 0 {
        (0..n)
            .map(|_| u8::from(rng.random_bool(config.target_rate)))
            .collect()
    } else {
        clustered_labels(config, rng)?
    };
    let d = config.feature_dim;
    let mut features = Vec::with_capacity(n * d);
    for &y in &labels {
        let mean = if y == 1 {
            &means.0
        } else if config.confuser_rate > 0.0 && rng.random_bool(config.confuser_rate) {
            &means.2
        } else {
            &means.1
        };
        for &m in mean {
            let z: f64 = StandardNormal.sample(rng);
            // stored at f32 precision so the file format round-trips exactly
            features.push((m + config.noise_std * z) as f32 as f64);
        }
    }
    Task::new(id, (config.rows, config.cols), d, features, labels)
}

/// Draws `n_tasks` tasks. A pure function of `(config, n_tasks, split)`.
pub fn generate_split(config: &SynthConfig, n_tasks: usize, split: Split) -> Result<TaskDataset> {
    config.validate()?;
    if n_tasks == 0 {
        return Err(VasError::GenerationConfig(
            "n_tasks must be at least 1".into(),
        ));
    }
    let means = class_means(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let tasks = (0..n_tasks)
        .map(|i| sample_task(config, format!("task-{i:05}"), &means, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    TaskDataset::new(tasks, split, Provenance::Synthetic, config.hash(n_tasks))
}

pub fn generate(config: &SynthConfig, n_tasks: usize) -> Result<TaskDataset> {
    generate_split(config, n_tasks, Split::Train)
}

/// The config with its seed replaced by the one derived for `split`, so that
/// train and test tasks never coincide.
pub fn for_split(config: &SynthConfig, split: Split) -> SynthConfig {
    let offset = match split {
        Split::Train => 1,
        Split::Test => 2,
    };
    SynthConfig {
        seed: config.seed.wrapping_mul(2).wrapping_add(offset),
        ..config.clone()
    }
}

/// Train and test sets drawn from independent seeds derived from `config.seed`.
pub fn generate_train_test(
    config: &SynthConfig,
    n_train: usize,
    n_test: usize,
) -> Result<(TaskDataset, TaskDataset)> {
    Ok((
        generate_split(&for_split(config, Split::Train), n_train, Split::Train)?,
        generate_split(&for_split(config, Split::Test), n_test, Split::Test)?,
    ))
}

/// Default train share, following the 67% / 33% split used for the real imagery.
pub const TRAIN_FRACTION: f64 = 0.67;

#[cfg(test)]
mod tests {
    use super::*;

    fn chebyshev(a: usize, b: usize, cols: usize) -> usize {
        let (ra, ca) = (a / cols, a % cols);
        let (rb, cb) = (b / cols, b % cols);
        ra.abs_diff(rb).max(ca.abs_diff(cb))
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig {
            confuser_rate: 0.2,
            seed: 42,
            ..SynthConfig::default()
        };
        let a = generate(&cfg, 5).unwrap();
        let b = generate(&cfg, 5).unwrap();
        assert_eq!(a, b);
        let c = generate(&SynthConfig { seed: 43, ..cfg }, 5).unwrap();
        assert_ne!(a.tasks, c.tasks);
    }

    #[test]
    fn tight_single_cluster_is_connected() {
        // 6x6 grid, 5 positives, negligible spread: each new member must touch
        // an earlier one (8-neighbourhood), so the cluster is connected.
        for seed in 0..100 {
            let cfg = SynthConfig {
                n_clusters: 1,
                cluster_spread: 1e-6,
                target_rate: 5.0 / 36.0,
                seed,
                ..SynthConfig::default()
            };
            let task = &generate(&cfg, 1).unwrap().tasks[0];
            let pos: Vec<usize> = (0..36).filter(|&j| task.labels()[j] == 1).collect();
            assert_eq!(pos.len(), 5);
            // connectivity by flood fill over Chebyshev-1 steps
            let mut reached = vec![pos[0]];
            let mut frontier = vec![pos[0]];
            while let Some(j) = frontier.pop() {
                for &k in &pos {
                    if !reached.contains(&k) && chebyshev(j, k, 6) <= 1 {
                        reached.push(k);
                        frontier.push(k);
                    }
                }
            }
            assert_eq!(reached.len(), 5, "seed {seed}: {pos:?}");
        }
    }

    #[test]
    fn target_fraction_near_rate() {
        for n_clusters in [0, 1, 3] {
            let cfg = SynthConfig {
                n_clusters,
                target_rate: 0.15,
                ..SynthConfig::default()
            };
            let ds = generate(&cfg, 200).unwrap();
            let frac =
                ds.tasks.iter().map(|t| t.total_targets()).sum::<usize>() as f64 / (200.0 * 36.0);
            assert!((frac - 0.15).abs() < 0.075, "clusters={n_clusters}: {frac}");
        }
    }

    #[test]
    fn class_means_are_separated_by_signal() {
        let cfg = SynthConfig {
            signal_strength: 4.0,
            noise_std: 0.5,
            ..SynthConfig::default()
        };
        let (pos, neg, conf) = class_means(&cfg);
        let dist = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        assert!((dist(&pos, &neg) - 2.0).abs() < 1e-12);
        assert!((dist(&pos, &conf) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn impossible_configs_rejected() {
        let tiny = SynthConfig {
            rows: 2,
            cols: 2,
            n_clusters: 1,
            target_rate: 0.1,
            ..SynthConfig::default()
        };
        assert!(matches!(
            generate(&tiny, 1),
            Err(VasError::GenerationConfig(_))
        ));
        let bad_rate = SynthConfig {
            target_rate: 1.0,
            ..SynthConfig::default()
        };
        assert!(generate(&bad_rate, 1).is_err());
        assert!(generate(&SynthConfig::default(), 0).is_err());
    }

    #[test]
    fn features_are_f32_exact() {
        let ds = generate(&SynthConfig::default(), 2).unwrap();
        for t in &ds.tasks {
            assert!(t.features().iter().all(|&x| (x as f32) as f64 == x));
        }
    }
}
