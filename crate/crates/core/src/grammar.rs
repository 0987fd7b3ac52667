//! Partially ordered task templates and a sampler for valid action orders.

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A flexible-order task: action instances constrained only by a precedence
/// relation, so several linear orders are valid executions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskGrammar {
    /// Action class names.
    pub actions: Vec<String>,
    /// Class index of every action instance.
    pub instances: Vec<usize>,
    /// `(before, after)` pairs over instance indices.
    pub precedence: Vec<(usize, usize)>,
    /// Inclusive `(min_frames, max_frames)` per action class.
    pub duration_range: Vec<(usize, usize)>,
    /// Instance sets whose mutual order is free.
    #[serde(default)]
    pub interleavable_groups: Vec<Vec<usize>>,
}

/// One emitted action: its class and how many frames it lasts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimedAction {
    pub class: usize,
    pub frames: usize,
}

impl TaskGrammar {
    pub fn num_classes(&self) -> usize {
        self.actions.len()
    }

    /// Instance count per class.
    pub fn repetitions(&self) -> Vec<usize> {
        let mut reps = vec![0; self.actions.len()];
        for &c in &self.instances {
            if c < reps.len() {
                reps[c] += 1;
            }
        }
        reps
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.instances.len();
        if self.actions.is_empty() || n == 0 {
            return Err(Error::Grammar("grammar has no actions".into()));
        }
        if self.duration_range.len() != self.actions.len() {
            return Err(Error::Grammar(format!(
                "{} duration ranges for {} actions",
                self.duration_range.len(),
                self.actions.len()
            )));
        }
        for (c, &(lo, hi)) in self.duration_range.iter().enumerate() {
            if lo == 0 || lo > hi {
                return Err(Error::Grammar(format!(
                    "action '{}' has duration range ({lo}, {hi})",
                    self.actions[c]
                )));
            }
        }
        if let Some(&c) = self.instances.iter().find(|&&c| c >= self.actions.len()) {
            return Err(Error::Grammar(format!("instance of unknown class {c}")));
        }
        for &(a, b) in &self.precedence {
            if a >= n || b >= n || a == b {
                return Err(Error::Grammar(format!("bad precedence pair ({a}, {b})")));
            }
        }
        self.topological_order()?;

        let reach = self.reachability();
        for group in &self.interleavable_groups {
            for &a in group {
                if a >= n {
                    return Err(Error::Grammar(format!("group member {a} is not an instance")));
                }
                for &b in group {
                    if a != b && reach[a][b] {
                        return Err(Error::Grammar(format!(
                            "instances {a} and {b} share an interleavable group but {a} must precede {b}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn successors(&self) -> Vec<Vec<usize>> {
        let mut succ = vec![Vec::new(); self.instances.len()];
        for &(a, b) in &self.precedence {
            succ[a].push(b);
        }
        succ
    }

    /// Kahn's algorithm; fails on a cycle.
    fn topological_order(&self) -> Result<Vec<usize>> {
        let n = self.instances.len();
        let succ = self.successors();
        let mut indeg = vec![0usize; n];
        for &(_, b) in &self.precedence {
            indeg[b] += 1;
        }
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = queue.pop_front() {
            order.push(i);
            for &j in &succ[i] {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    queue.push_back(j);
                }
            }
        }
        if order.len() != n {
            return Err(Error::Grammar("precedence relation has a cycle".into()));
        }
        Ok(order)
    }

    /// `reach[a][b]`: `a` must come before `b` (transitively).
    fn reachability(&self) -> Vec<Vec<bool>> {
        let n = self.instances.len();
        let succ = self.successors();
        let mut reach = vec![vec![false; n]; n];
        for (start, row) in reach.iter_mut().enumerate() {
            let mut stack = succ[start].clone();
            while let Some(j) = stack.pop() {
                if !row[j] {
                    row[j] = true;
                    stack.extend_from_slice(&succ[j]);
                }
            }
        }
        reach
    }

    /// Samples an execution by repeatedly choosing uniformly among the
    /// instances whose predecessors have all been emitted.
    ///
    /// Returns the instance order and the timed actions.
    pub fn sample_instances<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(Vec<usize>, Vec<TimedAction>)> {
        self.validate()?;
        let n = self.instances.len();
        let succ = self.successors();
        let mut indeg = vec![0usize; n];
        for &(_, b) in &self.precedence {
            indeg[b] += 1;
        }
        let mut enabled: BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        let mut timed = Vec::with_capacity(n);
        while !enabled.is_empty() {
            let pick = rng.random_range(0..enabled.len());
            let inst = *enabled.iter().nth(pick).expect("index within set");
            enabled.remove(&inst);
            let class = self.instances[inst];
            let (lo, hi) = self.duration_range[class];
            timed.push(TimedAction {
                class,
                frames: rng.random_range(lo..=hi),
            });
            order.push(inst);
            for &j in &succ[inst] {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    enabled.insert(j);
                }
            }
        }
        Ok((order, timed))
    }

    /// Samples `(class, duration)` pairs for one execution of the task.
    pub fn generate_action_order<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<TimedAction>> {
        Ok(self.sample_instances(rng)?.1)
    }

    /// Checks an instance order against every precedence pair.
    pub fn satisfies(&self, order: &[usize]) -> bool {
        let mut pos = vec![usize::MAX; self.instances.len()];
        for (p, &i) in order.iter().enumerate() {
            if i >= pos.len() || pos[i] != usize::MAX {
                return false;
            }
            pos[i] = p;
        }
        pos.iter().all(|&p| p != usize::MAX) && self.precedence.iter().all(|&(a, b)| pos[a] < pos[b])
    }

    /// Reads a grammar from a TOML or JSON file (by extension).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let grammar: TaskGrammar = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        grammar.validate()?;
        Ok(grammar)
    }

    /// Furniture-assembly template: four legs are picked, attached and spun
    /// in (at most two in flight), the table is flipped, then each leg is
    /// spun out and detached.
    pub fn ikea_default() -> Self {
        let mut actions = vec!["pick_leg".to_string()];
        actions.extend((1..=4).map(|x| format!("attach_leg_{x}")));
        actions.extend((1..=4).map(|x| format!("detach_leg_{x}")));
        actions.extend(["flip_table", "spin_in", "spin_out"].map(String::from));
        const PICK: usize = 0;
        const ATTACH: usize = 1;
        const DETACH: usize = 5;
        const FLIP: usize = 9;
        const SPIN_IN: usize = 10;
        const SPIN_OUT: usize = 11;

        let mut instances = Vec::new();
        let mut push = |class: usize| {
            instances.push(class);
            instances.len() - 1
        };
        let pick: Vec<usize> = (0..4).map(|_| push(PICK)).collect();
        let attach: Vec<usize> = (0..4).map(|k| push(ATTACH + k)).collect();
        let spin_in: Vec<usize> = (0..4).map(|_| push(SPIN_IN)).collect();
        let flip = push(FLIP);
        let spin_out: Vec<usize> = (0..4).map(|_| push(SPIN_OUT)).collect();
        let detach: Vec<usize> = (0..4).map(|k| push(DETACH + k)).collect();

        let mut precedence = Vec::new();
        for k in 0..4 {
            precedence.push((pick[k], attach[k]));
            precedence.push((attach[k], spin_in[k]));
            precedence.push((spin_in[k], flip));
            precedence.push((flip, spin_out[k]));
            precedence.push((spin_out[k], detach[k]));
        }
        for k in 0..2 {
            precedence.push((spin_in[k], pick[k + 2]));
            precedence.push((detach[k], spin_out[k + 2]));
        }

        let mut duration_range = vec![(0, 0); actions.len()];
        duration_range[PICK] = (8, 16);
        for k in 0..4 {
            duration_range[ATTACH + k] = (15, 30);
            duration_range[DETACH + k] = (15, 30);
        }
        duration_range[FLIP] = (20, 35);
        duration_range[SPIN_IN] = (40, 90);
        duration_range[SPIN_OUT] = (40, 90);

        Self {
            actions,
            instances,
            precedence,
            duration_range,
            interleavable_groups: vec![
                vec![pick[0], pick[1]],
                vec![pick[2], pick[3]],
                vec![spin_out[0], spin_out[1]],
                vec![spin_out[2], spin_out[3]],
            ],
        }
    }
}
