//! Moving-dot gridworld trajectories: generation, the `STPR1` file format,
//! and uniform window sampling.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

pub const MAGIC: &[u8; 5] = b"STPR1";
pub const HEADER_LEN: usize = 5 + 6 * 4 + 8 + 4;
pub const NUM_ACTIONS: usize = 5;
pub const ENV_MOVING_DOT: u32 = 1;

/// Actions of the moving-dot world.
pub const NOOP: u8 = 0;
pub const UP: u8 = 1;
pub const DOWN: u8 = 2;
pub const LEFT: u8 = 3;
pub const RIGHT: u8 = 4;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EnvConfig {
    /// Grid side length; observations are `1×size×size`.
    pub size: usize,
    /// Goal cell as `(row, col)`.
    pub goal: (usize, usize),
    /// Probability of a uniformly random action.
    pub epsilon: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { size: 16, goal: (8, 8), epsilon: 0.3 }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 4 || self.size > 255 {
            return Err(Error::Config(format!("grid size must be in [4, 255], got {}", self.size)));
        }
        if self.goal.0 >= self.size || self.goal.1 >= self.size {
            return Err(Error::Config(format!("goal {:?} lies outside a {} grid", self.goal, self.size)));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon must be in [0, 1], got {}", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub num_trajectories: u32,
    pub trajectory_length: u32,
    pub channels: u32,
    pub height: u32,
    pub width: u32,
    pub num_actions: u32,
    pub seed: u64,
    pub env: u32,
}

impl DatasetHeader {
    pub fn frame_len(&self) -> usize {
        (self.channels * self.height * self.width) as usize
    }

    pub fn num_states(&self) -> usize {
        self.num_trajectories as usize * self.trajectory_length as usize
    }

    pub fn payload_len(&self) -> u64 {
        let states = self.num_states() as u64;
        states * self.frame_len() as u64 + 2 * states
    }

    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        for v in [
            self.num_trajectories,
            self.trajectory_length,
            self.channels,
            self.height,
            self.width,
            self.num_actions,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.env.to_le_bytes());
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::BadMagic { expected: "STPR1" });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::TruncatedPayload { expected: HEADER_LEN as u64, actual: bytes.len() as u64 });
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap());
        let seed = u64::from_le_bytes(bytes[29..37].try_into().unwrap());
        let env = u32::from_le_bytes(bytes[37..41].try_into().unwrap());
        let header = Self {
            num_trajectories: u32_at(0),
            trajectory_length: u32_at(1),
            channels: u32_at(2),
            height: u32_at(3),
            width: u32_at(4),
            num_actions: u32_at(5),
            seed,
            env,
        };
        let dims = [header.num_trajectories, header.trajectory_length, header.channels, header.height, header.width];
        if dims.contains(&0) || header.num_actions == 0 || header.num_actions > 256 {
            return Err(Error::HeaderMismatch(format!("degenerate header {header:?}")));
        }
        Ok(header)
    }
}

/// A dataset held in its stored form: `u8` pixels, actions and rewards,
/// each laid out `[trajectory, time, ...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    observations: Vec<u8>,
    actions: Vec<u8>,
    rewards: Vec<u8>,
}

impl Dataset {
    pub fn num_trajectories(&self) -> usize {
        self.header.num_trajectories as usize
    }

    pub fn trajectory_length(&self) -> usize {
        self.header.trajectory_length as usize
    }

    pub fn num_actions(&self) -> usize {
        self.header.num_actions as usize
    }

    /// `[C, H, W]` of one observation.
    pub fn frame_shape(&self) -> [usize; 3] {
        [self.header.channels as usize, self.header.height as usize, self.header.width as usize]
    }

    pub fn observations(&self) -> &[u8] {
        &self.observations
    }

    pub fn actions(&self) -> &[u8] {
        &self.actions
    }

    pub fn rewards(&self) -> &[u8] {
        &self.rewards
    }

    fn state_index(&self, trajectory: usize, t: usize) -> usize {
        trajectory * self.trajectory_length() + t
    }

    pub fn frame(&self, trajectory: usize, t: usize) -> &[u8] {
        let f = self.header.frame_len();
        let i = self.state_index(trajectory, t);
        &self.observations[i * f..(i + 1) * f]
    }

    pub fn action(&self, trajectory: usize, t: usize) -> usize {
        self.actions[self.state_index(trajectory, t)] as usize
    }

    pub fn reward(&self, trajectory: usize, t: usize) -> u8 {
        self.rewards[self.state_index(trajectory, t)]
    }

    /// Observations of the given `(trajectory, t)` states as `[len, C, H, W]`
    /// with pixels in `[0, 1]`.
    pub fn states(&self, picks: &[(usize, usize)]) -> Tensor {
        let [c, h, w] = self.frame_shape();
        let mut data = Vec::with_capacity(picks.len() * c * h * w);
        for &(tr, t) in picks {
            data.extend(self.frame(tr, t).iter().map(|&p| p as f64 / 255.0));
        }
        Tensor::new(vec![picks.len(), c, h, w], data).expect("frame count matches shape")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.header.payload_len() as usize);
        self.header.encode(&mut out);
        out.extend_from_slice(&self.observations);
        out.extend_from_slice(&self.actions);
        out.extend_from_slice(&self.rewards);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = DatasetHeader::decode(bytes)?;
        let expected = header.payload_len();
        let actual = (bytes.len() - HEADER_LEN) as u64;
        if actual < expected {
            return Err(Error::TruncatedPayload { expected, actual });
        }
        if actual > expected {
            return Err(Error::HeaderMismatch(format!(
                "header describes {expected} payload bytes but the file holds {actual}"
            )));
        }
        let payload = &bytes[HEADER_LEN..];
        let obs_len = header.num_states() * header.frame_len();
        let states = header.num_states();
        let observations = payload[..obs_len].to_vec();
        let actions = payload[obs_len..obs_len + states].to_vec();
        let rewards = payload[obs_len + states..].to_vec();
        if let Some(a) = actions.iter().find(|&&a| a as u32 >= header.num_actions) {
            return Err(Error::HeaderMismatch(format!("action {a} out of range for {} actions", header.num_actions)));
        }
        if let Some(r) = rewards.iter().find(|&&r| r > 1) {
            return Err(Error::HeaderMismatch(format!("reward byte {r} is not binary")));
        }
        Ok(Self { header, observations, actions, rewards })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Draws `n` windows of length `t`: a uniform trajectory, then a
    /// uniform start in `[0, len - t]`.
    pub fn sample_windows(&self, n: usize, t: usize, rng: &mut impl Rng) -> Result<Vec<(usize, usize)>> {
        if n == 0 || t == 0 {
            return Err(Error::invalid("sample_batch", "N and T must be positive"));
        }
        if t > self.trajectory_length() {
            return Err(Error::invalid(
                "sample_batch",
                format!("window length {t} exceeds trajectory length {}", self.trajectory_length()),
            ));
        }
        let max_start = self.trajectory_length() - t;
        Ok((0..n)
            .map(|_| {
                let tr = rng.random_range(0..self.num_trajectories());
                let start = rng.random_range(0..=max_start);
                (tr, start)
            })
            .collect())
    }

    pub fn sample_batch(&self, n: usize, t: usize, rng: &mut impl Rng) -> Result<TrajectoryBatch> {
        let windows = self.sample_windows(n, t, rng)?;
        Ok(self.batch_from_windows(&windows, t))
    }

    pub fn batch_from_windows(&self, windows: &[(usize, usize)], t: usize) -> TrajectoryBatch {
        let picks: Vec<(usize, usize)> =
            windows.iter().flat_map(|&(tr, s)| (s..s + t).map(move |i| (tr, i))).collect();
        let [c, h, w] = self.frame_shape();
        let observations = self.states(&picks).reshape(&[windows.len(), t, c, h, w]).expect("same element count");
        TrajectoryBatch {
            observations,
            actions: picks.iter().map(|&(tr, i)| self.action(tr, i)).collect(),
            rewards: picks.iter().map(|&(tr, i)| self.reward(tr, i)).collect(),
            windows: windows.to_vec(),
            num_actions: self.num_actions(),
        }
    }
}

/// `N` windows of `T` consecutive states.
#[derive(Clone, Debug)]
pub struct TrajectoryBatch {
    /// `[N, T, C, H, W]`, pixels in `[0, 1]`.
    pub observations: Tensor,
    /// `[N·T]`, row-major over `(n, t)`.
    pub actions: Vec<usize>,
    pub rewards: Vec<u8>,
    /// `(trajectory, start)` of each window.
    pub windows: Vec<(usize, usize)>,
    pub num_actions: usize,
}

impl TrajectoryBatch {
    pub fn n(&self) -> usize {
        self.observations.shape()[0]
    }

    pub fn t(&self) -> usize {
        self.observations.shape()[1]
    }
}

fn reflect(p: i64, n: usize) -> usize {
    if p < 0 {
        (-p) as usize
    } else if p >= n as i64 {
        (2 * (n as i64 - 1) - p) as usize
    } else {
        p as usize
    }
}

/// Applies an action under reflecting walls.
pub fn step(pos: (usize, usize), action: u8, size: usize) -> (usize, usize) {
    let (dy, dx) = match action {
        UP => (-1, 0),
        DOWN => (1, 0),
        LEFT => (0, -1),
        RIGHT => (0, 1),
        _ => (0, 0),
    };
    (reflect(pos.0 as i64 + dy, size), reflect(pos.1 as i64 + dx, size))
}

/// Greedy move toward the goal: vertical first when the row gap is at
/// least the column gap; no-op on the goal.
pub fn greedy_action(pos: (usize, usize), goal: (usize, usize)) -> u8 {
    let dr = goal.0 as i64 - pos.0 as i64;
    let dc = goal.1 as i64 - pos.1 as i64;
    if dr == 0 && dc == 0 {
        NOOP
    } else if dr.abs() >= dc.abs() {
        if dr < 0 {
            UP
        } else {
            DOWN
        }
    } else if dc < 0 {
        LEFT
    } else {
        RIGHT
    }
}

fn random_off_goal(rng: &mut impl Rng, env: &EnvConfig) -> (usize, usize) {
    let cells = env.size * env.size;
    let goal = env.goal.0 * env.size + env.goal.1;
    let mut i = rng.random_range(0..cells - 1);
    if i >= goal {
        i += 1;
    }
    (i / env.size, i % env.size)
}

/// Simulates one trajectory, returning `(positions, actions, rewards)`.
pub fn simulate(env: &EnvConfig, rng: &mut impl Rng, len: usize) -> (Vec<(usize, usize)>, Vec<u8>, Vec<u8>) {
    let mut pos = random_off_goal(rng, env);
    let mut positions = Vec::with_capacity(len);
    let mut actions = Vec::with_capacity(len);
    let mut rewards = Vec::with_capacity(len);
    for _ in 0..len {
        positions.push(pos);
        let on_goal = pos == env.goal;
        rewards.push(u8::from(on_goal));
        let u: f64 = rng.random();
        let action = if u < env.epsilon {
            rng.random_range(0..NUM_ACTIONS as u8)
        } else {
            greedy_action(pos, env.goal)
        };
        actions.push(action);
        pos = if on_goal { random_off_goal(rng, env) } else { step(pos, action, env.size) };
    }
    (positions, actions, rewards)
}

/// Generates `num_trajectories` trajectories; trajectory `i` uses its own
/// generator seeded with `seed ^ i`.
pub fn generate(env: &EnvConfig, seed: u64, num_trajectories: usize, trajectory_length: usize) -> Result<Dataset> {
    env.validate()?;
    if trajectory_length < 2 {
        return Err(Error::Config(format!("trajectory length must be at least 2, got {trajectory_length}")));
    }
    if num_trajectories == 0 {
        return Err(Error::Config("at least one trajectory is required".into()));
    }
    let frame = env.size * env.size;
    let states = num_trajectories * trajectory_length;
    let mut observations = vec![0u8; states * frame];
    let mut actions = Vec::with_capacity(states);
    let mut rewards = Vec::with_capacity(states);
    for i in 0..num_trajectories {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i as u64);
        let (positions, a, r) = simulate(env, &mut rng, trajectory_length);
        for (t, (y, x)) in positions.into_iter().enumerate() {
            observations[(i * trajectory_length + t) * frame + y * env.size + x] = 255;
        }
        actions.extend(a);
        rewards.extend(r);
    }
    let header = DatasetHeader {
        num_trajectories: num_trajectories as u32,
        trajectory_length: trajectory_length as u32,
        channels: 1,
        height: env.size as u32,
        width: env.size as u32,
        num_actions: NUM_ACTIONS as u32,
        seed,
        env: ENV_MOVING_DOT,
    };
    Ok(Dataset { header, observations, actions, rewards })
}

/// Generates and writes a dataset file.
pub fn generate_dataset(
    env: &EnvConfig,
    seed: u64,
    num_trajectories: usize,
    trajectory_length: usize,
    path: &Path,
) -> Result<Dataset> {
    let data = generate(env, seed, num_trajectories, trajectory_length)?;
    data.save(path)?;
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflecting_walls() {
        assert_eq!(step((0, 3), UP, 8), (1, 3));
        assert_eq!(step((7, 3), DOWN, 8), (6, 3));
        assert_eq!(step((2, 0), LEFT, 8), (2, 1));
        assert_eq!(step((2, 7), RIGHT, 8), (2, 6));
        assert_eq!(step((2, 2), NOOP, 8), (2, 2));
    }

    #[test]
    fn greedy_prefers_larger_gap() {
        assert_eq!(greedy_action((0, 0), (3, 1)), DOWN);
        assert_eq!(greedy_action((0, 0), (1, 3)), RIGHT);
        assert_eq!(greedy_action((5, 5), (5, 2)), LEFT);
        assert_eq!(greedy_action((5, 5), (2, 5)), UP);
        assert_eq!(greedy_action((2, 2), (2, 2)), NOOP);
    }

    #[test]
    fn header_is_fixed_width() {
        let d = generate(&EnvConfig { size: 4, ..EnvConfig { goal: (1, 1), ..Default::default() } }, 3, 2, 3).unwrap();
        let bytes = d.to_bytes();
        assert_eq!(bytes.len(), HEADER_LEN + 2 * 3 * 16 + 2 * 6);
        assert_eq!(&bytes[..5], b"STPR1");
    }
}
