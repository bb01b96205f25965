//! Snippet replay with hindsight reward vectors, and the uniform task scheduler.
//!
//! Episodes are cut into contiguous, non-overlapping snippets of at most `L`
//! steps. Each snippet carries the state that follows its last step so the
//! critic can bootstrap, or `None` when the episode terminated there.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("step {step}: reward vector has {got} entries, expected {expected}")]
    RewardLength { step: usize, got: usize, expected: usize },
    #[error("step {step}: behavior log-probability is missing or not finite")]
    BehaviorLogProb { step: usize },
    #[error("step {step}: state or action width does not match the buffer")]
    Width { step: usize },
    #[error("replay is empty")]
    Empty,
    #[error("episode has no steps")]
    EmptyEpisode,
    #[error("spill file: {0}")]
    Spill(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    /// Reward of every task for this transition.
    pub rewards: Vec<f64>,
    /// Log-density of `action` under the behavior policy (acting task).
    pub behavior_log_prob: f64,
    pub executed_task: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub steps: Vec<TrajectoryStep>,
    /// Observation after the last step.
    pub final_state: Vec<f64>,
    /// True when the episode ended in an environment termination rather
    /// than a time limit.
    pub terminal: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snippet {
    pub steps: Vec<TrajectoryStep>,
    /// State after the last step; `None` bootstraps with value 0.
    pub bootstrap: Option<Vec<f64>>,
}

impl Snippet {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Cuts an episode into snippets of at most `length` steps.
pub fn slice_episode(episode: &Episode, length: usize) -> Vec<Snippet> {
    let length = length.max(1);
    let n = episode.steps.len();
    let mut out = Vec::with_capacity(n.div_ceil(length));
    let mut start = 0;
    while start < n {
        let end = (start + length).min(n);
        let bootstrap = if end < n {
            Some(episode.steps[end].state.clone())
        } else if episode.terminal {
            None
        } else {
            Some(episode.final_state.clone())
        };
        out.push(Snippet { steps: episode.steps[start..end].to_vec(), bootstrap });
        start = end;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayLayout {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub num_tasks: usize,
    pub snippet_length: usize,
}

/// FIFO ring of immutable snippets.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    layout: ReplayLayout,
    capacity: usize,
    snippets: VecDeque<Arc<Snippet>>,
    appended_episodes: u64,
    appended_snippets: u64,
}

impl ReplayBuffer {
    /// `capacity` counts snippets.
    pub fn new(layout: ReplayLayout, capacity: usize) -> Self {
        Self {
            layout,
            capacity: capacity.max(1),
            snippets: VecDeque::new(),
            appended_episodes: 0,
            appended_snippets: 0,
        }
    }

    /// Capacity in snippets for a budget counted in transitions.
    pub fn with_transition_capacity(layout: ReplayLayout, transitions: usize) -> Self {
        let snippets = transitions.div_ceil(layout.snippet_length.max(1));
        Self::new(layout, snippets)
    }

    pub fn layout(&self) -> ReplayLayout {
        self.layout
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.snippets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snippets.is_empty()
    }

    pub fn appended_episodes(&self) -> u64 {
        self.appended_episodes
    }

    pub fn appended_snippets(&self) -> u64 {
        self.appended_snippets
    }

    pub fn validate(&self, episode: &Episode) -> Result<(), ReplayError> {
        if episode.steps.is_empty() {
            return Err(ReplayError::EmptyEpisode);
        }
        let l = &self.layout;
        for (step, s) in episode.steps.iter().enumerate() {
            if s.rewards.len() != l.num_tasks {
                return Err(ReplayError::RewardLength { step, got: s.rewards.len(), expected: l.num_tasks });
            }
            if !s.behavior_log_prob.is_finite() {
                return Err(ReplayError::BehaviorLogProb { step });
            }
            if s.state.len() != l.obs_dim || s.action.len() != l.action_dim {
                return Err(ReplayError::Width { step });
            }
        }
        if episode.final_state.len() != l.obs_dim {
            return Err(ReplayError::Width { step: episode.steps.len() });
        }
        Ok(())
    }

    /// Validates, slices and enqueues an episode. Returns the number of
    /// snippets added. A bad step rejects the whole episode.
    pub fn append_episode(&mut self, episode: &Episode) -> Result<usize, ReplayError> {
        self.validate(episode)?;
        let snippets = slice_episode(episode, self.layout.snippet_length);
        let added = snippets.len();
        for s in snippets {
            self.push(Arc::new(s));
        }
        self.appended_episodes += 1;
        Ok(added)
    }

    fn push(&mut self, s: Arc<Snippet>) {
        if self.snippets.len() == self.capacity {
            self.snippets.pop_front();
        }
        self.snippets.push_back(s);
        self.appended_snippets += 1;
    }

    /// Uniform draws with replacement.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<Arc<Snippet>>, ReplayError> {
        if self.snippets.is_empty() {
            return Err(ReplayError::Empty);
        }
        let n = self.snippets.len();
        Ok((0..batch).map(|_| Arc::clone(&self.snippets[rng.gen_range(0..n)])).collect())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<Snippet>> {
        self.snippets.iter()
    }

    /// Writes every stored snippet to a spill stream.
    pub fn spill<W: Write>(&self, out: &mut W) -> Result<(), ReplayError> {
        write_spill(out, self.layout, self.snippets.iter().map(|s| s.as_ref()))
    }

    /// Appends every snippet of a spill stream, checking the layout.
    pub fn restore<R: Read>(&mut self, input: &mut R) -> Result<usize, ReplayError> {
        let (layout, snippets) = read_spill(input)?;
        if layout != self.layout {
            return Err(ReplayError::Spill(format!("layout {layout:?} does not match buffer {:?}", self.layout)));
        }
        let n = snippets.len();
        for s in snippets {
            self.push(Arc::new(s));
        }
        Ok(n)
    }
}

const SPILL_MAGIC: &[u8; 8] = b"RHPOREPL";

// Spill stream: magic, u64 header length, JSON layout, then one record per
// snippet: u64 byte length followed by the little-endian body.
pub fn write_spill<'a, W: Write>(
    out: &mut W,
    layout: ReplayLayout,
    snippets: impl Iterator<Item = &'a Snippet>,
) -> Result<(), ReplayError> {
    let header = serde_json::to_vec(&layout).map_err(|e| ReplayError::Spill(e.to_string()))?;
    out.write_all(SPILL_MAGIC)?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    for s in snippets {
        let body = encode_snippet(s);
        out.write_all(&(body.len() as u64).to_le_bytes())?;
        out.write_all(&body)?;
    }
    Ok(())
}

pub fn read_spill<R: Read>(input: &mut R) -> Result<(ReplayLayout, Vec<Snippet>), ReplayError> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != SPILL_MAGIC {
        return Err(ReplayError::Spill("bad magic".into()));
    }
    let header_len = read_u64(input)? as usize;
    let mut header = vec![0u8; header_len];
    input.read_exact(&mut header)?;
    let layout: ReplayLayout = serde_json::from_slice(&header).map_err(|e| ReplayError::Spill(e.to_string()))?;
    let mut snippets = Vec::new();
    loop {
        let mut len = [0u8; 8];
        match input.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let mut body = vec![0u8; u64::from_le_bytes(len) as usize];
        input.read_exact(&mut body)?;
        snippets.push(decode_snippet(&body, layout)?);
    }
    Ok((layout, snippets))
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64, ReplayError> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn put_f64s(buf: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn encode_snippet(s: &Snippet) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&(s.steps.len() as u64).to_le_bytes());
    buf.push(s.bootstrap.is_some() as u8);
    for step in &s.steps {
        put_f64s(&mut buf, &step.state);
        put_f64s(&mut buf, &step.action);
        put_f64s(&mut buf, &step.rewards);
        buf.extend_from_slice(&step.behavior_log_prob.to_le_bytes());
        buf.extend_from_slice(&(step.executed_task as u64).to_le_bytes());
    }
    if let Some(b) = &s.bootstrap {
        put_f64s(&mut buf, b);
    }
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], ReplayError> {
        let end = self.pos + n;
        let out = self.buf.get(self.pos..end).ok_or_else(|| ReplayError::Spill("truncated record".into()))?;
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64, ReplayError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, ReplayError> {
        let raw = self.take(8 * n)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

fn decode_snippet(buf: &[u8], l: ReplayLayout) -> Result<Snippet, ReplayError> {
    let mut c = Cursor { buf, pos: 0 };
    let n = c.u64()? as usize;
    let has_bootstrap = c.take(1)?[0] == 1;
    let mut steps = Vec::with_capacity(n);
    for _ in 0..n {
        let state = c.f64s(l.obs_dim)?;
        let action = c.f64s(l.action_dim)?;
        let rewards = c.f64s(l.num_tasks)?;
        let behavior_log_prob = f64::from_bits(c.u64()?);
        let executed_task = c.u64()? as usize;
        steps.push(TrajectoryStep { state, action, rewards, behavior_log_prob, executed_task });
    }
    let bootstrap = if has_bootstrap { Some(c.f64s(l.obs_dim)?) } else { None };
    if c.pos != buf.len() {
        return Err(ReplayError::Spill("trailing bytes in record".into()));
    }
    Ok(Snippet { steps, bootstrap })
}

/// Uniform random task scheduling with a fixed switching period.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scheduler {
    pub period: usize,
    pub num_tasks: usize,
    current: usize,
}

impl Scheduler {
    pub fn new(period: usize, num_tasks: usize) -> Self {
        Self { period: period.max(1), num_tasks: num_tasks.max(1), current: 0 }
    }

    pub fn current(&self) -> usize {
        self.current
    }

    /// Task for episode step `t`: a fresh uniform draw when `t` is a
    /// multiple of the period, the current task otherwise.
    pub fn next_task<R: Rng + ?Sized>(&mut self, t: usize, rng: &mut R) -> usize {
        if t % self.period == 0 {
            self.current = rng.gen_range(0..self.num_tasks);
        }
        self.current
    }
}
