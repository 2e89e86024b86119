//! Trajectories, sub-trajectory windows, per-task and effective datasets, and
//! their JSON-lines files.
//!
//! A file starts with one header record. Every following line holds one
//! trajectory (or one sub-trajectory of an effective dataset) as a list of
//! `{t, center, features, action, reward}` records plus the state reached
//! after the last action. Features are flat arrays with the declared shape.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::gridsim::{Action, CellIndex, GridSpec, StateTensor};

pub const DATASET_FORMAT: &str = "moda-dataset/1";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("format version {found:?} in {path}, expected {DATASET_FORMAT:?}")]
    Version { path: String, found: String },
    #[error("malformed record at {path}:{line}: {msg}")]
    Malformed {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("truncated file {path}: {msg}")]
    Truncated { path: String, msg: String },
    #[error("shape mismatch at {path}:{line}: {msg}")]
    Shape {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("inconsistent trajectory: {0}")]
    Inconsistent(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: StateTensor,
    pub action: Action,
    pub next_state: StateTensor,
    pub reward: f64,
    pub task_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: usize,
    pub transitions: Vec<Transition>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }

    /// Non-empty, time-consistent, and chained (`next_state` of step k is the
    /// `state` of step k + 1).
    pub fn validate(&self) -> Result<(), DatasetError> {
        validate_chain(&self.transitions)
    }
}

fn validate_chain(transitions: &[Transition]) -> Result<(), DatasetError> {
    if transitions.is_empty() {
        return Err(DatasetError::Inconsistent("empty trajectory".into()));
    }
    for (k, tr) in transitions.iter().enumerate() {
        let expected_t = if tr.action == Action::Terminate {
            tr.state.t
        } else {
            tr.state.t + 1
        };
        if tr.next_state.t != expected_t {
            return Err(DatasetError::Inconsistent(format!(
                "transition {k}: time slot {} -> {} under {:?}",
                tr.state.t, tr.next_state.t, tr.action
            )));
        }
        if !tr.reward.is_finite() {
            return Err(DatasetError::Inconsistent(format!(
                "transition {k}: non-finite reward"
            )));
        }
        if let Some(next) = transitions.get(k + 1) {
            if next.state != tr.next_state {
                return Err(DatasetError::Inconsistent(format!(
                    "transition {k}: next state does not match the following state"
                )));
            }
        }
    }
    Ok(())
}

/// `w` consecutive transitions of one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubTrajectory {
    pub transitions: Vec<Transition>,
    pub task_id: usize,
    pub trajectory_id: usize,
    /// Index of the first transition within the source trajectory.
    pub start: usize,
}

impl SubTrajectory {
    pub fn window(&self) -> usize {
        self.transitions.len()
    }

    pub fn first_state(&self) -> &StateTensor {
        &self.transitions[0].state
    }

    /// `(source task, source trajectory, start index)`.
    pub fn provenance(&self) -> (usize, usize, usize) {
        (self.task_id, self.trajectory_id, self.start)
    }
}

/// Non-overlapping windows of `w` transitions from index 0; the trailing
/// remainder shorter than `w` is dropped.
pub fn partition(trajectory: &Trajectory, trajectory_id: usize, w: usize) -> Vec<SubTrajectory> {
    assert!(w >= 1, "window must be at least 1");
    trajectory
        .transitions
        .chunks_exact(w)
        .enumerate()
        .map(|(k, chunk)| SubTrajectory {
            transitions: chunk.to_vec(),
            task_id: trajectory.task_id,
            trajectory_id,
            start: k * w,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskDataset {
    pub grid: GridSpec,
    /// `tasks[i]` holds every trajectory of task `i`.
    pub tasks: Vec<Vec<Trajectory>>,
}

impl MultiTaskDataset {
    pub fn new(grid: GridSpec, tasks: Vec<Vec<Trajectory>>) -> Result<Self, DatasetError> {
        let ds = Self { grid, tasks };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        for (i, trajs) in self.tasks.iter().enumerate() {
            for (k, tr) in trajs.iter().enumerate() {
                if tr.task_id != i {
                    return Err(DatasetError::Invalid(format!(
                        "trajectory {k} of task {i} is labelled task {}",
                        tr.task_id
                    )));
                }
                tr.validate()?;
            }
        }
        Ok(())
    }

    /// All windows of task `i`, trajectory by trajectory.
    pub fn windows(&self, task: usize, w: usize) -> Vec<SubTrajectory> {
        self.tasks[task]
            .iter()
            .enumerate()
            .flat_map(|(k, tr)| partition(tr, k, w))
            .collect()
    }

    pub fn transition_count(&self, task: usize) -> usize {
        self.tasks[task].iter().map(Trajectory::len).sum()
    }

    pub fn resolve(
        &self,
        task: usize,
        trajectory: usize,
        start: usize,
        w: usize,
    ) -> Option<&[Transition]> {
        self.tasks
            .get(task)?
            .get(trajectory)?
            .transitions
            .get(start..start + w)
    }
}

/// `D_i` plus sub-trajectories shared in from other tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveDataset {
    pub target: usize,
    pub window: usize,
    pub own: Vec<SubTrajectory>,
    /// Each entry carries its provenance triple.
    pub shared: Vec<SubTrajectory>,
}

impl EffectiveDataset {
    /// Own windows first, then shared ones, each in stored order.
    pub fn flatten(&self) -> Vec<Transition> {
        self.own
            .iter()
            .chain(&self.shared)
            .flat_map(|x| x.transitions.iter().cloned())
            .collect()
    }

    pub fn shared_transition_count(&self) -> usize {
        self.shared.iter().map(SubTrajectory::window).sum()
    }

    pub fn own_transition_count(&self) -> usize {
        self.own.iter().map(SubTrajectory::window).sum()
    }

    /// Checks every shared window resolves to the same transitions in `source`,
    /// up to reward relabelling when `rewards_may_differ`.
    pub fn verify_provenance(
        &self,
        source: &MultiTaskDataset,
        rewards_may_differ: bool,
    ) -> Result<(), DatasetError> {
        for x in &self.shared {
            let (task, traj, start) = x.provenance();
            let original = source
                .resolve(task, traj, start, x.window())
                .ok_or_else(|| {
                    DatasetError::Invalid(format!(
                        "provenance ({task}, {traj}, {start}) does not resolve"
                    ))
                })?;
            let same = original.iter().zip(&x.transitions).all(|(a, b)| {
                a.state == b.state
                    && a.action == b.action
                    && a.next_state == b.next_state
                    && (rewards_may_differ || a.reward == b.reward)
            });
            if !same {
                return Err(DatasetError::Invalid(format!(
                    "shared window ({task}, {traj}, {start}) differs from its source"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: String,
    kind: String,
    grid: GridSpec,
    n_tasks: usize,
    feature_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    window: Option<usize>,
    records: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct StateRecord {
    t: usize,
    center: CellIndex,
    shape: [usize; 3],
    features: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StepRecord {
    t: usize,
    center: CellIndex,
    features: Vec<f64>,
    action: usize,
    reward: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryRecord {
    task_id: usize,
    trajectory_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    role: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    start: Option<usize>,
    /// Feature tensor shape `[n, l, l]` shared by every state on the line.
    shape: [usize; 3],
    transitions: Vec<StepRecord>,
    final_state: StateRecord,
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn shape_of(grid: &GridSpec) -> [usize; 3] {
    [grid.features, grid.patch, grid.patch]
}

fn encode(transitions: &[Transition], grid: &GridSpec) -> (Vec<StepRecord>, StateRecord) {
    let steps = transitions
        .iter()
        .map(|tr| StepRecord {
            t: tr.state.t,
            center: tr.state.center,
            features: tr.state.features.clone(),
            action: tr.action.index(),
            reward: tr.reward,
        })
        .collect();
    let last = &transitions.last().expect("non-empty").next_state;
    let final_state = StateRecord {
        t: last.t,
        center: last.center,
        shape: shape_of(grid),
        features: last.features.clone(),
    };
    (steps, final_state)
}

fn decode(
    record: TrajectoryRecord,
    grid: &GridSpec,
    path: &Path,
    line: usize,
) -> Result<Vec<Transition>, DatasetError> {
    let shape = shape_of(grid);
    let shape_err = |msg: String| DatasetError::Shape {
        path: path.display().to_string(),
        line,
        msg,
    };
    if record.shape != shape || record.final_state.shape != shape {
        return Err(shape_err(format!(
            "declared shape {:?}, grid needs {shape:?}",
            record.shape
        )));
    }
    let len = grid.state_len();
    if record.transitions.is_empty() {
        return Err(DatasetError::Inconsistent(format!(
            "{}:{line}: empty trajectory",
            path.display()
        )));
    }
    let mut states: Vec<StateTensor> = Vec::with_capacity(record.transitions.len() + 1);
    let mut actions = Vec::with_capacity(record.transitions.len());
    let mut rewards = Vec::with_capacity(record.transitions.len());
    for step in record.transitions {
        if step.features.len() != len {
            return Err(shape_err(format!(
                "{} feature values, expected {len}",
                step.features.len()
            )));
        }
        let action = Action::from_index(step.action).ok_or_else(|| DatasetError::Malformed {
            path: path.display().to_string(),
            line,
            msg: format!("action index {}", step.action),
        })?;
        states.push(StateTensor {
            features: step.features,
            t: step.t,
            center: step.center,
        });
        actions.push(action);
        rewards.push(step.reward);
    }
    if record.final_state.features.len() != len {
        return Err(shape_err("final state has the wrong feature count".into()));
    }
    states.push(StateTensor {
        features: record.final_state.features,
        t: record.final_state.t,
        center: record.final_state.center,
    });
    let transitions: Vec<Transition> = (0..actions.len())
        .map(|k| Transition {
            state: states[k].clone(),
            action: actions[k],
            next_state: states[k + 1].clone(),
            reward: rewards[k],
            task_id: record.task_id,
        })
        .collect();
    validate_chain(&transitions)
        .map_err(|e| DatasetError::Inconsistent(format!("{}:{line}: {e}", path.display())))?;
    Ok(transitions)
}

fn write_json_line<T: Serialize>(
    out: &mut impl Write,
    value: &T,
    path: &Path,
) -> Result<(), DatasetError> {
    serde_json::to_writer(&mut *out, value).map_err(|e| io_err(path, e.into()))?;
    out.write_all(b"\n").map_err(|e| io_err(path, e))
}

fn write_lines(
    path: &Path,
    header: &Header,
    records: impl Iterator<Item = TrajectoryRecord>,
) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    write_json_line(&mut out, header, path)?;
    for r in records {
        write_json_line(&mut out, &r, path)?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

fn read_lines(
    path: &Path,
    kind: &str,
) -> Result<(Header, Vec<(usize, TrajectoryRecord)>), DatasetError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| DatasetError::Truncated {
            path: path.display().to_string(),
            msg: "missing header".into(),
        })?
        .map_err(|e| io_err(path, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&first).map_err(|e| DatasetError::Malformed {
            path: path.display().to_string(),
            line: 1,
            msg: e.to_string(),
        })?;
    let found = raw
        .get("format_version")
        .and_then(|v| v.as_str())
        .unwrap_or("")
        .to_string();
    if found != DATASET_FORMAT {
        return Err(DatasetError::Version {
            path: path.display().to_string(),
            found,
        });
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| DatasetError::Malformed {
        path: path.display().to_string(),
        line: 1,
        msg: e.to_string(),
    })?;
    if header.kind != kind {
        return Err(DatasetError::Invalid(format!(
            "{} holds a {:?} file, expected {kind:?}",
            path.display(),
            header.kind
        )));
    }
    header
        .grid
        .validate()
        .map_err(|e| DatasetError::Invalid(e.to_string()))?;
    let mut records = Vec::new();
    for (k, line) in lines.enumerate() {
        let line_no = k + 2;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord = serde_json::from_str(&line).map_err(|e| {
            if e.is_eof() {
                DatasetError::Truncated {
                    path: path.display().to_string(),
                    msg: format!("line {line_no} ends early"),
                }
            } else {
                DatasetError::Malformed {
                    path: path.display().to_string(),
                    line: line_no,
                    msg: e.to_string(),
                }
            }
        })?;
        records.push((line_no, rec));
    }
    if records.len() != header.records {
        return Err(DatasetError::Truncated {
            path: path.display().to_string(),
            msg: format!(
                "header declares {} records, found {}",
                header.records,
                records.len()
            ),
        });
    }
    Ok((header, records))
}

pub fn save_dataset(ds: &MultiTaskDataset, path: &Path) -> Result<(), DatasetError> {
    let header = Header {
        format_version: DATASET_FORMAT.into(),
        kind: "dataset".into(),
        grid: ds.grid.clone(),
        n_tasks: ds.n_tasks(),
        feature_names: ds.grid.feature_names[..ds.grid.features].to_vec(),
        target: None,
        window: None,
        records: ds.tasks.iter().map(Vec::len).sum(),
    };
    let records = ds.tasks.iter().flat_map(|trajs| {
        trajs.iter().enumerate().map(|(k, tr)| {
            let (transitions, final_state) = encode(&tr.transitions, &ds.grid);
            TrajectoryRecord {
                task_id: tr.task_id,
                trajectory_id: k,
                role: None,
                start: None,
                shape: shape_of(&ds.grid),
                transitions,
                final_state,
            }
        })
    });
    write_lines(path, &header, records)
}

pub fn load_dataset(path: &Path) -> Result<MultiTaskDataset, DatasetError> {
    let (header, records) = read_lines(path, "dataset")?;
    let mut tasks: Vec<Vec<Trajectory>> = vec![Vec::new(); header.n_tasks];
    for (line, rec) in records {
        let task = rec.task_id;
        if task >= header.n_tasks {
            return Err(DatasetError::Malformed {
                path: path.display().to_string(),
                line,
                msg: format!("task {task} but header declares {} tasks", header.n_tasks),
            });
        }
        if rec.trajectory_id != tasks[task].len() {
            return Err(DatasetError::Malformed {
                path: path.display().to_string(),
                line,
                msg: format!("trajectory id {} out of order", rec.trajectory_id),
            });
        }
        let transitions = decode(rec, &header.grid, path, line)?;
        tasks[task].push(Trajectory {
            task_id: task,
            transitions,
        });
    }
    MultiTaskDataset::new(header.grid, tasks)
}

pub fn save_effective(
    eff: &EffectiveDataset,
    grid: &GridSpec,
    n_tasks: usize,
    path: &Path,
) -> Result<(), DatasetError> {
    let header = Header {
        format_version: DATASET_FORMAT.into(),
        kind: "effective".into(),
        grid: grid.clone(),
        n_tasks,
        feature_names: grid.feature_names[..grid.features].to_vec(),
        target: Some(eff.target),
        window: Some(eff.window),
        records: eff.own.len() + eff.shared.len(),
    };
    let own = eff.own.iter().map(|x| ("own", x));
    let shared = eff.shared.iter().map(|x| ("shared", x));
    let records = own.chain(shared).map(|(role, x)| {
        let (transitions, final_state) = encode(&x.transitions, grid);
        TrajectoryRecord {
            task_id: x.task_id,
            trajectory_id: x.trajectory_id,
            role: Some(role.into()),
            start: Some(x.start),
            shape: shape_of(grid),
            transitions,
            final_state,
        }
    });
    write_lines(path, &header, records)
}

/// Loads an effective dataset with the grid it was built on.
pub fn load_effective(path: &Path) -> Result<(EffectiveDataset, GridSpec), DatasetError> {
    let (header, records) = read_lines(path, "effective")?;
    let missing = |what: &str| DatasetError::Malformed {
        path: path.display().to_string(),
        line: 1,
        msg: format!("effective header lacks {what}"),
    };
    let target = header.target.ok_or_else(|| missing("target"))?;
    let window = header.window.ok_or_else(|| missing("window"))?;
    let mut eff = EffectiveDataset {
        target,
        window,
        own: Vec::new(),
        shared: Vec::new(),
    };
    for (line, rec) in records {
        let role = rec.role.clone().unwrap_or_default();
        let start = rec.start.ok_or_else(|| DatasetError::Malformed {
            path: path.display().to_string(),
            line,
            msg: "sub-trajectory without a start index".into(),
        })?;
        let (task_id, trajectory_id) = (rec.task_id, rec.trajectory_id);
        let transitions = decode(rec, &header.grid, path, line)?;
        if transitions.len() != window {
            return Err(DatasetError::Shape {
                path: path.display().to_string(),
                line,
                msg: format!(
                    "window of {} transitions, expected {window}",
                    transitions.len()
                ),
            });
        }
        let x = SubTrajectory {
            transitions,
            task_id,
            trajectory_id,
            start,
        };
        match role.as_str() {
            "own" => eff.own.push(x),
            "shared" => eff.shared.push(x),
            other => {
                return Err(DatasetError::Malformed {
                    path: path.display().to_string(),
                    line,
                    msg: format!("unknown role {other:?}"),
                })
            }
        }
    }
    Ok((eff, header.grid))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_trajectory(len: usize) -> Trajectory {
        let state = |t: usize| StateTensor {
            features: vec![t as f64; 1],
            t,
            center: CellIndex::new(1, 1),
        };
        Trajectory {
            task_id: 0,
            transitions: (0..len)
                .map(|t| Transition {
                    state: state(t),
                    action: Action::Stay,
                    next_state: state(t + 1),
                    reward: t as f64,
                    task_id: 0,
                })
                .collect(),
        }
    }

    #[test]
    fn partition_drops_the_remainder() {
        let tr = toy_trajectory(10);
        let subs = partition(&tr, 0, 3);
        assert_eq!(subs.len(), 3);
        assert_eq!(
            subs.iter().map(|s| s.start).collect::<Vec<_>>(),
            vec![0, 3, 6]
        );
        assert_eq!(subs[2].transitions.last().unwrap().state.t, 8);
        assert_eq!(partition(&tr, 0, 1).len(), 10);
        assert!(partition(&toy_trajectory(2), 0, 3).is_empty());
    }

    #[test]
    fn broken_chain_is_rejected() {
        let mut tr = toy_trajectory(3);
        tr.transitions[1].state.features[0] = 9.0;
        assert!(matches!(tr.validate(), Err(DatasetError::Inconsistent(_))));
        let mut tr = toy_trajectory(3);
        tr.transitions[2].next_state.t = 7;
        assert!(tr.validate().is_err());
        assert!(Trajectory {
            task_id: 0,
            transitions: vec![]
        }
        .validate()
        .is_err());
    }

    #[test]
    fn flatten_counts_windows() {
        let tr = toy_trajectory(50);
        let subs = partition(&tr, 0, 5);
        let eff = EffectiveDataset {
            target: 0,
            window: 5,
            own: subs[..4].to_vec(),
            shared: subs[4..].to_vec(),
        };
        assert_eq!(eff.flatten().len(), 50);
    }
}
