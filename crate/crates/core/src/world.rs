//! Scene sampling and the trajectory bank.
//!
//! Demonstration candidates are generated directly in end-effector task
//! space: a shortest path (linear positions, slerped rotations) plus smooth
//! half-sine bumps that vanish at both endpoints.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, Unit, UnitQuaternion, Vector3};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{self, Rng};
use crate::state::{pack_unchecked, Rotation, StateVector, Vec3, TRAJECTORY_LEN};
use crate::types::{Bounds, DomainError, EnvironmentConfig, Trajectory, WORKSPACE};

/// Rejections allowed before [`sample_config`] gives up.
pub const MAX_REJECTIONS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorldError {
    #[error("scene generation failed after {0} rejections")]
    Generation(usize),
    #[error("endpoint {0:?} outside workspace")]
    OutsideWorkspace(Vec3),
    #[error("bank counts must be >= 1 (configs {configs}, pairs {pairs})")]
    EmptyBank { configs: usize, pairs: usize },
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Geometry of the desk scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub workspace: Bounds,
    pub table_z_range: (f64, f64),
    /// Table top extent in xy; z entries unused.
    pub table_top: Bounds,
    pub human_x_range: (f64, f64),
    pub human_y_range: (f64, f64),
    pub human_z_range: (f64, f64),
    /// Minimum xy distance between laptop and human.
    pub laptop_human_gap: f64,
    /// Laptop margin from the table edge.
    pub laptop_margin: f64,
    /// End-effector endpoints keep at least this height above the table.
    pub endpoint_clearance: f64,
    /// Minimum start-goal separation.
    pub min_endpoint_distance: f64,
    /// Maximum tilt of endpoint rotations away from upright (radians).
    pub max_tilt: f64,
}

impl Default for SceneLayout {
    fn default() -> Self {
        SceneLayout {
            workspace: WORKSPACE,
            table_z_range: (0.5, 0.8),
            table_top: Bounds {
                min: [-0.6, -0.6, 0.0],
                max: [0.6, 0.3, 0.0],
            },
            human_x_range: (-0.6, 0.6),
            human_y_range: (0.45, 0.75),
            human_z_range: (0.9, 1.1),
            laptop_human_gap: 0.3,
            laptop_margin: 0.1,
            endpoint_clearance: 0.05,
            min_endpoint_distance: 0.4,
            max_tilt: 0.3,
        }
    }
}

impl SceneLayout {
    /// Box the end effector may occupy in `config`: the workspace, floored at the table top.
    pub fn eef_bounds(&self, config: &EnvironmentConfig) -> Bounds {
        let mut b = config.bounds;
        b.min[2] = b.min[2].max(config.table_z);
        b
    }
}

/// Smooth perturbation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationSpec {
    /// Number of half-sine bumps `B`.
    pub bumps: usize,
    /// Per-bump amplitude upper bound (m).
    pub amplitude: f64,
    /// Peak rotational noise (rad).
    pub rotation_noise: f64,
    /// Bump widths are drawn from `[min_width, 1]` as a fraction of the path.
    pub min_width: f64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        PerturbationSpec {
            bumps: 3,
            amplitude: 0.25,
            rotation_noise: 0.2,
            min_width: 0.4,
        }
    }
}

fn uniform(rng: &mut Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.random_range(range.0..range.1)
    }
}

fn xy_dist(a: &Vec3, b: &Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Samples table height, laptop on the table and a standing human beside it.
pub fn sample_config(layout: &SceneLayout, rng: &mut Rng) -> Result<EnvironmentConfig, WorldError> {
    for _ in 0..MAX_REJECTIONS {
        let table_z = uniform(rng, layout.table_z_range);
        let m = layout.laptop_margin;
        let laptop = [
            uniform(rng, (layout.table_top.min[0] + m, layout.table_top.max[0] - m)),
            uniform(rng, (layout.table_top.min[1] + m, layout.table_top.max[1] - m)),
            table_z,
        ];
        let human = [
            uniform(rng, layout.human_x_range),
            uniform(rng, layout.human_y_range),
            uniform(rng, layout.human_z_range),
        ];
        let config = EnvironmentConfig {
            human,
            laptop,
            table_z,
            bounds: layout.workspace,
        };
        if xy_dist(&laptop, &human) >= layout.laptop_human_gap && config.validate().is_ok() {
            return Ok(config);
        }
    }
    Err(WorldError::Generation(MAX_REJECTIONS))
}

pub(crate) fn to_matrix(r: &Rotation) -> Matrix3<f64> {
    Matrix3::new(
        r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
    )
}

pub(crate) fn from_matrix(m: &Matrix3<f64>) -> Rotation {
    [
        [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
        [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
        [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
    ]
}

/// Rotation whose local x-axis points along world +z.
pub fn upright() -> Rotation3<f64> {
    Rotation3::from_matrix_unchecked(Matrix3::new(
        0.0, 0.0, -1.0, //
        0.0, 1.0, 0.0, //
        1.0, 0.0, 0.0,
    ))
}

fn random_unit(rng: &mut Rng) -> Unit<Vector3<f64>> {
    loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        if let Some(u) = Unit::try_new(v, 1e-9) {
            return u;
        }
    }
}

/// Samples an end-effector pose above the table with a small tilt from upright.
pub fn sample_endpoint(layout: &SceneLayout, config: &EnvironmentConfig, rng: &mut Rng) -> StateVector {
    let b = config.bounds;
    let z_lo = (config.table_z + layout.endpoint_clearance).min(b.max[2]);
    let pos = [
        uniform(rng, (b.min[0], b.max[0])),
        uniform(rng, (b.min[1], b.max[1])),
        uniform(rng, (z_lo, b.max[2])),
    ];
    let yaw = Rotation3::from_axis_angle(&Vector3::z_axis(), uniform(rng, (-PI, PI)));
    let heading = uniform(rng, (-PI, PI));
    let tilt_axis = Unit::new_normalize(Vector3::new(heading.cos(), heading.sin(), 0.0));
    let tilt = Rotation3::from_axis_angle(&tilt_axis, uniform(rng, (0.0, layout.max_tilt)));
    let rot = tilt * yaw * upright();
    pack_unchecked(
        pos,
        from_matrix(rot.matrix()),
        config.human,
        config.laptop,
        config.table_z,
    )
}

fn lerp(a: &Vec3, b: &Vec3, t: f64) -> Vec3 {
    [
        (1.0 - t) * a[0] + t * b[0],
        (1.0 - t) * a[1] + t * b[1],
        (1.0 - t) * a[2] + t * b[2],
    ]
}

fn quat(r: &Rotation) -> UnitQuaternion<f64> {
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(to_matrix(r)))
}

/// Straight-line positions and slerped rotations over 21 waypoints.
pub fn shortest_path(
    config: &EnvironmentConfig,
    start: &StateVector,
    goal: &StateVector,
) -> Result<Trajectory, WorldError> {
    for p in [start.eef_pos(), goal.eef_pos()] {
        if !config.bounds.contains(&p) {
            return Err(WorldError::OutsideWorkspace(p));
        }
    }
    let (mut start, mut goal) = (*start, *goal);
    config.stamp(&mut start);
    config.stamp(&mut goal);
    if start == goal {
        return Ok(Trajectory::new(vec![start; TRAJECTORY_LEN], *config)?);
    }
    let (p0, p1) = (start.eef_pos(), goal.eef_pos());
    let (q0, q1) = (quat(&start.eef_rot()), quat(&goal.eef_rot()));
    let last = (TRAJECTORY_LEN - 1) as f64;
    let mut states = Vec::with_capacity(TRAJECTORY_LEN);
    states.push(start);
    for k in 1..TRAJECTORY_LEN - 1 {
        let t = k as f64 / last;
        let q = q0.try_slerp(&q1, t, 1e-12).unwrap_or_else(|| q0.nlerp(&q1, t));
        let rot = q.to_rotation_matrix();
        states.push(pack_unchecked(
            lerp(&p0, &p1, t),
            from_matrix(rot.matrix()),
            config.human,
            config.laptop,
            config.table_z,
        ));
    }
    states.push(goal);
    Ok(Trajectory::new(states, *config)?)
}

/// One endpoint-vanishing half-sine bump.
#[derive(Debug, Clone, Copy)]
struct Bump {
    center: f64,
    width: f64,
    amplitude: f64,
    direction: Vector3<f64>,
}

impl Bump {
    fn offset(&self, t: f64) -> Vector3<f64> {
        let lo = self.center - 0.5 * self.width;
        let u = (t - lo) / self.width;
        if u <= 0.0 || u >= 1.0 {
            Vector3::zeros()
        } else {
            self.direction * (self.amplitude * (PI * u).sin())
        }
    }
}

/// Adds smooth positional bumps and an endpoint-vanishing rotation wobble.
///
/// Endpoints are copied from `reference` and positions are clamped to the
/// end-effector box of the reference's scene.
pub fn perturb_trajectory(
    reference: &Trajectory,
    spec: &PerturbationSpec,
    layout: &SceneLayout,
    rng: &mut Rng,
) -> Trajectory {
    let bumps: Vec<Bump> = (0..spec.bumps)
        .map(|_| {
            let width = uniform(rng, (spec.min_width.clamp(0.0, 1.0), 1.0));
            let center = uniform(rng, (0.5 * width, 1.0 - 0.5 * width));
            let amplitude = uniform(rng, (0.0, spec.amplitude.max(0.0)));
            let direction = random_unit(rng).into_inner();
            Bump {
                center,
                width,
                amplitude,
                direction,
            }
        })
        .collect();
    let axis = random_unit(rng);
    let angle = uniform(rng, (-spec.rotation_noise, spec.rotation_noise));

    if bumps.iter().all(|b| b.amplitude == 0.0) && angle == 0.0 {
        return reference.clone();
    }

    let config = *reference.config();
    let bounds = layout.eef_bounds(&config);
    let last = (TRAJECTORY_LEN - 1) as f64;
    let mut states = reference.states().to_vec();
    for (k, state) in states.iter_mut().enumerate().take(TRAJECTORY_LEN - 1).skip(1) {
        let t = k as f64 / last;
        let offset: Vector3<f64> = bumps.iter().map(|b| b.offset(t)).sum();
        let p = state.eef_pos();
        let pos = bounds.clamp([p[0] + offset.x, p[1] + offset.y, p[2] + offset.z]);
        let mut rot = state.eef_rot();
        if angle != 0.0 {
            let wobble = Rotation3::from_axis_angle(&axis, angle * (PI * t).sin());
            let mut r = wobble * Rotation3::from_matrix_unchecked(to_matrix(&rot));
            r.renormalize();
            rot = from_matrix(r.matrix());
        }
        *state = pack_unchecked(pos, rot, config.human, config.laptop, config.table_z);
    }
    Trajectory::new(states, config).expect("object dims preserved")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn tag(self) -> u64 {
        match self {
            Split::Train => seed::tag("train"),
            Split::Test => seed::tag("test"),
        }
    }
}

/// Trajectories sharing one start-goal pair; index 0 is the shortest path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairGroup {
    pub pair_id: usize,
    pub trajectories: Vec<Trajectory>,
}

impl PairGroup {
    pub fn reference(&self) -> &Trajectory {
        &self.trajectories[0]
    }

    pub fn perturbed(&self) -> &[Trajectory] {
        &self.trajectories[1..]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigGroup {
    pub config_id: usize,
    pub config: EnvironmentConfig,
    pub pairs: Vec<PairGroup>,
}

/// All generated trajectories for one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBank {
    pub split: Split,
    pub seed: u64,
    pub groups: Vec<ConfigGroup>,
}

/// Identifies a trajectory inside a bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TrajectoryId {
    pub config_id: usize,
    pub pair_id: usize,
    pub index: usize,
}

impl TrajectoryBank {
    pub fn pair(&self, config_id: usize, pair_id: usize) -> Option<&PairGroup> {
        self.groups.get(config_id)?.pairs.get(pair_id)
    }

    pub fn get(&self, id: TrajectoryId) -> Option<&Trajectory> {
        self.pair(id.config_id, id.pair_id)?.trajectories.get(id.index)
    }

    pub fn pair_groups(&self) -> impl Iterator<Item = (usize, &PairGroup)> {
        self.groups
            .iter()
            .flat_map(|g| g.pairs.iter().map(move |p| (g.config_id, p)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (TrajectoryId, &Trajectory)> {
        self.pair_groups().flat_map(|(config_id, p)| {
            p.trajectories.iter().enumerate().map(move |(index, t)| {
                (
                    TrajectoryId {
                        config_id,
                        pair_id: p.pair_id,
                        index,
                    },
                    t,
                )
            })
        })
    }

    pub fn len(&self) -> usize {
        self.pair_groups().map(|(_, p)| p.trajectories.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Generates `n_configs × n_pairs × (1 + n_perturbed)` trajectories.
///
/// Config `i` draws from its own stream `derive_seed(seed, [split, i])`, so
/// the bank is a pure function of counts, specs and seed.
pub fn build_bank(
    n_configs: usize,
    n_pairs: usize,
    n_perturbed: usize,
    spec: &PerturbationSpec,
    layout: &SceneLayout,
    seed: u64,
    split: Split,
) -> Result<TrajectoryBank, WorldError> {
    if n_configs == 0 || n_pairs == 0 {
        return Err(WorldError::EmptyBank {
            configs: n_configs,
            pairs: n_pairs,
        });
    }
    let mut groups = Vec::with_capacity(n_configs);
    for config_id in 0..n_configs {
        let mut rng = seed::rng_for(seed, &[split.tag(), config_id as u64]);
        let config = sample_config(layout, &mut rng)?;
        let mut pairs = Vec::with_capacity(n_pairs);
        for pair_id in 0..n_pairs {
            let (start, goal) = sample_endpoints(layout, &config, &mut rng)?;
            let reference = shortest_path(&config, &start, &goal)?;
            let mut trajectories = Vec::with_capacity(1 + n_perturbed);
            for _ in 0..n_perturbed {
                trajectories.push(perturb_trajectory(&reference, spec, layout, &mut rng));
            }
            trajectories.insert(0, reference);
            pairs.push(PairGroup { pair_id, trajectories });
        }
        groups.push(ConfigGroup {
            config_id,
            config,
            pairs,
        });
    }
    Ok(TrajectoryBank { split, seed, groups })
}

fn sample_endpoints(
    layout: &SceneLayout,
    config: &EnvironmentConfig,
    rng: &mut Rng,
) -> Result<(StateVector, StateVector), WorldError> {
    for _ in 0..MAX_REJECTIONS {
        let start = sample_endpoint(layout, config, rng);
        let goal = sample_endpoint(layout, config, rng);
        let (a, b) = (start.eef_pos(), goal.eef_pos());
        let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
        if d >= layout.min_endpoint_distance {
            return Ok((start, goal));
        }
    }
    Err(WorldError::Generation(MAX_REJECTIONS))
}
