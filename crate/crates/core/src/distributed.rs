//! Branch-and-bound with LP relaxations farmed out to untrusted workers.
//!
//! Workers run on their own threads and talk to the auctioneer only through
//! serialized task and response messages. Every response is checked with the
//! duality verifier; anything rejected, late or inconsistent is re-solved
//! locally or handed to another worker, and the offending worker is excluded
//! for the rest of the run.

use std::collections::BTreeMap;
use std::str::FromStr;
use std::sync::mpsc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auction::{agent_blocks, decode_allocation, decode_blocks, Allocation, AuctionError, AuctionInstance};
use crate::lp::{solve_lp, solve_lp_truncated, LpError, LpProblem, LpSolution, LpStatus, Sense, Verdict, Verifier};
use crate::milp::{solve_milp_with, MilpConfig, MilpError, MilpProblem, MilpSolution, MilpStatus, RelaxationEvaluator};
use crate::privacy::{seal_bids, unseal_allocation};
use crate::resource::{build_blocks_milp, AgentBlock, XNorm};

pub const MESSAGE_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistributedError {
    #[error("invalid distributed run: {0}")]
    InvalidInput(String),
    #[error("task {task_id}: every worker was rejected and local solving is disabled")]
    Deadlock { task_id: u64 },
    #[error(transparent)]
    Milp(#[from] MilpError),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Auction(#[from] AuctionError),
}

/// Relaxation in message form: `opt cᵀx` s.t. `A x = b`, `G x ≤ h`, `x ≥ 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMessage {
    pub version: u32,
    pub id: u64,
    pub c: Vec<f64>,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    #[serde(rename = "G")]
    pub g: Vec<Vec<f64>>,
    pub h: Vec<f64>,
    pub sense: Sense,
}

/// Worker answer. An infeasibility claim has empty `x`, no objective and a
/// Farkas ray in `y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseMessage {
    pub version: u32,
    pub id: u64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub objective: Option<f64>,
}

impl TaskMessage {
    /// Folds variable bounds into rows. Every variable must be nonnegative.
    pub fn from_lp(id: u64, lp: &LpProblem) -> Result<TaskMessage, DistributedError> {
        let n = lp.num_vars();
        let mut a = lp.eq_matrix.clone();
        let mut b = lp.eq_rhs.clone();
        let mut g = lp.ineq_matrix.clone();
        let mut h = lp.ineq_rhs.clone();
        for j in 0..n {
            if !lp.nonneg[j] && lp.lower(j) < 0.0 {
                return Err(DistributedError::InvalidInput(format!("variable {j} may be negative")));
            }
            let (lo, hi) = (lp.lower(j), lp.upper(j));
            let unit = |v: f64| {
                let mut row = vec![0.0; n];
                row[j] = v;
                row
            };
            if lo == hi {
                a.push(unit(1.0));
                b.push(lo);
                continue;
            }
            if hi.is_finite() {
                g.push(unit(1.0));
                h.push(hi);
            }
            if lo > 0.0 {
                g.push(unit(-1.0));
                h.push(-lo);
            }
        }
        Ok(TaskMessage {
            version: MESSAGE_VERSION,
            id,
            c: lp.objective.clone(),
            a,
            b,
            g,
            h,
            sense: lp.sense,
        })
    }

    pub fn to_lp(&self) -> LpProblem {
        let mut lp = LpProblem::new(self.sense, self.c.clone());
        for (row, &rhs) in self.a.iter().zip(&self.b) {
            lp.add_eq(row.clone(), rhs);
        }
        for (row, &rhs) in self.g.iter().zip(&self.h) {
            lp.add_ineq(row.clone(), rhs);
        }
        lp
    }
}

impl ResponseMessage {
    pub fn from_solution(id: u64, sol: &LpSolution) -> ResponseMessage {
        match sol.status {
            LpStatus::Optimal => ResponseMessage {
                version: MESSAGE_VERSION,
                id,
                x: sol.primal.clone(),
                y: sol.dual.clone(),
                objective: Some(sol.objective),
            },
            _ => ResponseMessage {
                version: MESSAGE_VERSION,
                id,
                x: Vec::new(),
                y: sol.dual.clone(),
                objective: None,
            },
        }
    }

    pub fn to_solution(&self) -> LpSolution {
        match self.objective {
            Some(obj) => LpSolution {
                status: LpStatus::Optimal,
                primal: self.x.clone(),
                dual: self.y.clone(),
                objective: obj,
                basis: Vec::new(),
                iterations: 0,
            },
            None => LpSolution {
                status: LpStatus::Infeasible,
                primal: Vec::new(),
                dual: self.y.clone(),
                objective: f64::NAN,
                basis: Vec::new(),
                iterations: 0,
            },
        }
    }
}

/// Solves a task the way an honest worker does.
pub fn solve_task(task: &TaskMessage) -> Result<LpSolution, LpError> {
    solve_lp(&task.to_lp())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Behavior {
    Honest,
    /// Adds 10 to the reported objective.
    Inflate,
    /// Reports a point violating the constraints.
    Infeasible,
    /// Reports the vertex one simplex pivot short of optimal with the optimal dual.
    SuboptimalVertex,
    /// Negates the dual.
    SignFlip,
    /// Never answers.
    Silent,
}

impl FromStr for Behavior {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "honest" => Behavior::Honest,
            "inflate" => Behavior::Inflate,
            "infeasible" => Behavior::Infeasible,
            "suboptimal-vertex" | "suboptimal" => Behavior::SuboptimalVertex,
            "sign-flip" | "signflip" => Behavior::SignFlip,
            "silent" | "timeout" => Behavior::Silent,
            other => return Err(format!("unknown worker behavior {other:?}")),
        })
    }
}

impl Behavior {
    /// What this worker sends back for `task`, or `None` for no answer.
    pub fn respond(self, task: &TaskMessage) -> Option<ResponseMessage> {
        let lp = task.to_lp();
        let honest = solve_lp(&lp).ok()?;
        let mut r = ResponseMessage::from_solution(task.id, &honest);
        match self {
            Behavior::Honest => {}
            Behavior::Silent => return None,
            Behavior::Inflate => {
                r.objective = Some(r.objective.unwrap_or(0.0) + 10.0);
                if r.x.is_empty() {
                    r.x = vec![0.0; lp.num_vars()];
                    r.y = vec![0.0; lp.num_rows()];
                }
            }
            Behavior::Infeasible => {
                let x: Vec<f64> = if r.x.is_empty() {
                    vec![0.0; lp.num_vars()]
                } else {
                    r.x.clone()
                };
                let x: Vec<f64> = x.iter().map(|v| v + 1.0).collect();
                r.objective = Some(lp.evaluate(&x));
                r.x = x;
                if r.y.len() != lp.num_rows() {
                    r.y = vec![0.0; lp.num_rows()];
                }
            }
            Behavior::SuboptimalVertex => {
                if honest.status == LpStatus::Optimal {
                    if let Ok((_, full)) = solve_lp_truncated(&lp, usize::MAX) {
                        if full > 0 {
                            if let Ok((short, _)) = solve_lp_truncated(&lp, full - 1) {
                                r.objective = Some(lp.evaluate(&short.primal));
                                r.x = short.primal;
                            }
                        }
                    }
                }
            }
            Behavior::SignFlip => {
                r.y.iter_mut().for_each(|v| *v = -*v);
            }
        }
        Some(r)
    }
}

/// Parses `name:id[,name:id…]` into per-worker behaviors; unnamed workers are honest.
pub fn parse_adversaries(spec: &str, workers: usize) -> Result<Vec<Behavior>, String> {
    let mut out = vec![Behavior::Honest; workers];
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, id) = part
            .split_once(':')
            .ok_or_else(|| format!("adversary {part:?} must look like name:worker"))?;
        let id: usize = id.parse().map_err(|_| format!("bad worker id in {part:?}"))?;
        if id >= workers {
            return Err(format!("worker {id} does not exist ({workers} workers)"));
        }
        out[id] = name.parse()?;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OnReject {
    #[default]
    ResolveLocally,
    Reassign,
}

#[derive(Clone, Debug)]
pub struct DistributedConfig {
    pub on_reject: OnReject,
    /// Workers asked to solve each task.
    pub redundancy: usize,
    /// How long to wait for answers to a dispatch round.
    pub deadline: Duration,
    pub milp: MilpConfig,
}

impl Default for DistributedConfig {
    fn default() -> Self {
        DistributedConfig {
            on_reject: OnReject::ResolveLocally,
            redundancy: 1,
            deadline: Duration::from_millis(250),
            milp: MilpConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Resolution {
    Accepted { worker: usize },
    ResolvedLocally,
    Reassigned { worker: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub worker: usize,
    /// `accepted`, `timeout`, `disagreement` or a rejection label.
    pub verdict: String,
    pub detail: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: u64,
    pub responses: Vec<ResponseRecord>,
    pub resolution: Resolution,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditLog {
    pub tasks: Vec<TaskRecord>,
    pub flagged: Vec<usize>,
    /// Basis factorizations performed by the verifier.
    pub factorizations: usize,
    /// Optimality claims that reached the factorization step.
    pub optimality_checks: usize,
    pub verifications: usize,
    pub local_solves: usize,
}

impl AuditLog {
    pub fn rejections(&self, worker: usize) -> usize {
        self.tasks
            .iter()
            .flat_map(|t| &t.responses)
            .filter(|r| r.worker == worker && r.verdict != "accepted")
            .count()
    }
}

struct Pool {
    senders: Vec<mpsc::Sender<String>>,
    inbox: mpsc::Receiver<(usize, String)>,
}

struct Dispatcher {
    pool: Pool,
    config: DistributedConfig,
    flagged: Vec<bool>,
    next_worker: usize,
    next_task: u64,
    verifier: Verifier,
    log: AuditLog,
    fatal: Option<DistributedError>,
}

fn agree(a: &LpSolution, b: &LpSolution) -> bool {
    match (a.status, b.status) {
        (LpStatus::Optimal, LpStatus::Optimal) => {
            (a.objective - b.objective).abs() <= 1e-6 * (1.0 + a.objective.abs().max(b.objective.abs()))
        }
        (s, t) => s == t,
    }
}

impl Dispatcher {
    /// Up to `k` unflagged workers in round-robin order, skipping `tried`.
    fn pick(&mut self, k: usize, tried: &[usize]) -> Vec<usize> {
        let n = self.flagged.len();
        let mut out = Vec::new();
        for step in 0..n {
            if out.len() == k {
                break;
            }
            let w = (self.next_worker + step) % n;
            if !self.flagged[w] && !tried.contains(&w) {
                out.push(w);
            }
        }
        if let Some(&last) = out.last() {
            self.next_worker = (last + 1) % n;
        }
        out
    }

    fn flag(&mut self, w: usize) {
        if !self.flagged[w] {
            self.flagged[w] = true;
            self.log.flagged.push(w);
        }
    }

    /// Sends each task to its workers and waits for answers until the deadline.
    fn exchange(&mut self, sends: &[(usize, TaskMessage)]) -> BTreeMap<(u64, usize), ResponseMessage> {
        let mut expected = BTreeMap::new();
        for (w, task) in sends {
            let text = serde_json::to_string(task).expect("task serializes");
            if self.pool.senders[*w].send(text).is_ok() {
                expected.insert((task.id, *w), ());
            }
        }
        let mut got = BTreeMap::new();
        let until = Instant::now() + self.config.deadline;
        while got.len() < expected.len() {
            let now = Instant::now();
            if now >= until {
                break;
            }
            match self.pool.inbox.recv_timeout(until - now) {
                Ok((w, text)) => {
                    if let Ok(r) = serde_json::from_str::<ResponseMessage>(&text) {
                        if expected.contains_key(&(r.id, w)) && r.version == MESSAGE_VERSION {
                            got.insert((r.id, w), r);
                        }
                    }
                }
                Err(_) => break,
            }
        }
        got
    }

    fn check(&mut self, lp: &LpProblem, claimed: &LpSolution) -> Verdict {
        let before = self.verifier.factorizations;
        let v = self.verifier.verify(lp, claimed);
        if claimed.status == LpStatus::Optimal && self.verifier.factorizations > before {
            self.log.optimality_checks += 1;
        }
        self.log.factorizations = self.verifier.factorizations;
        self.log.verifications = self.verifier.verified;
        v
    }

    fn solve_locally(&mut self, lp: &LpProblem) -> Result<LpSolution, LpError> {
        self.log.local_solves += 1;
        solve_lp(lp)
    }

    fn run_batch(&mut self, batch: &[LpProblem]) -> Vec<Result<LpSolution, LpError>> {
        let mut tasks = Vec::with_capacity(batch.len());
        for lp in batch {
            match TaskMessage::from_lp(self.next_task, lp) {
                Ok(t) => tasks.push(t),
                Err(e) => {
                    self.fatal = Some(e);
                    return batch
                        .iter()
                        .map(|_| Err(LpError::InvalidInput("dispatch aborted".into())))
                        .collect();
                }
            }
            self.next_task += 1;
        }
        let k = self.config.redundancy.max(1);
        let assignment: Vec<Vec<usize>> = tasks.iter().map(|_| self.pick(k, &[])).collect();
        let sends: Vec<(usize, TaskMessage)> = tasks
            .iter()
            .zip(&assignment)
            .flat_map(|(t, ws)| ws.iter().map(move |&w| (w, t.clone())))
            .collect();
        let mut answers = self.exchange(&sends);

        let mut out = Vec::with_capacity(tasks.len());
        for (task, workers) in tasks.iter().zip(assignment) {
            let res = self.resolve(task, workers, &mut answers);
            out.push(res);
        }
        out
    }

    fn resolve(
        &mut self,
        task: &TaskMessage,
        mut workers: Vec<usize>,
        answers: &mut BTreeMap<(u64, usize), ResponseMessage>,
    ) -> Result<LpSolution, LpError> {
        let lp = task.to_lp();
        let mut record = TaskRecord {
            task_id: task.id,
            responses: Vec::new(),
            resolution: Resolution::ResolvedLocally,
        };
        let mut tried: Vec<usize> = Vec::new();
        let mut reassigned = false;
        loop {
            let mut accepted: Vec<(usize, LpSolution)> = Vec::new();
            for &w in &workers {
                tried.push(w);
                let Some(resp) = answers.remove(&(task.id, w)) else {
                    record.responses.push(ResponseRecord {
                        worker: w,
                        verdict: "timeout".into(),
                        detail: None,
                    });
                    self.flag(w);
                    continue;
                };
                let claimed = resp.to_solution();
                match self.check(&lp, &claimed) {
                    Verdict::Accepted => accepted.push((w, claimed)),
                    Verdict::Rejected(reason) => {
                        record.responses.push(ResponseRecord {
                            worker: w,
                            verdict: reason.label().into(),
                            detail: Some(format!("{reason:?}")),
                        });
                        self.flag(w);
                    }
                }
            }

            if accepted.len() > 1 && !accepted.windows(2).all(|p| agree(&p[0].1, &p[1].1)) {
                let local = self.solve_locally(&lp);
                for (w, sol) in &accepted {
                    let ok = local.as_ref().map(|l| agree(l, sol)).unwrap_or(false);
                    record.responses.push(ResponseRecord {
                        worker: *w,
                        verdict: if ok { "accepted".into() } else { "disagreement".into() },
                        detail: None,
                    });
                    if !ok {
                        self.flag(*w);
                    }
                }
                record.resolution = Resolution::ResolvedLocally;
                self.log.tasks.push(record);
                return local;
            }
            if let Some((w, sol)) = accepted.first().cloned() {
                for (aw, _) in &accepted {
                    record.responses.push(ResponseRecord {
                        worker: *aw,
                        verdict: "accepted".into(),
                        detail: None,
                    });
                }
                record.resolution = if reassigned {
                    Resolution::Reassigned { worker: w }
                } else {
                    Resolution::Accepted { worker: w }
                };
                self.log.tasks.push(record);
                return Ok(sol);
            }

            match self.config.on_reject {
                OnReject::ResolveLocally => {
                    record.resolution = Resolution::ResolvedLocally;
                    self.log.tasks.push(record);
                    return self.solve_locally(&lp);
                }
                OnReject::Reassign => {
                    let k = self.config.redundancy.max(1);
                    workers = self.pick(k, &tried);
                    if workers.is_empty() {
                        self.log.tasks.push(record);
                        self.fatal = Some(DistributedError::Deadlock { task_id: task.id });
                        return Err(LpError::InvalidInput("dispatch aborted".into()));
                    }
                    reassigned = true;
                    let sends: Vec<(usize, TaskMessage)> = workers.iter().map(|&w| (w, task.clone())).collect();
                    let more = self.exchange(&sends);
                    answers.extend(more);
                }
            }
        }
    }
}

impl RelaxationEvaluator for Dispatcher {
    fn evaluate(&mut self, batch: &[LpProblem]) -> Vec<Result<LpSolution, LpError>> {
        if self.fatal.is_some() {
            return batch
                .iter()
                .map(|_| Err(LpError::InvalidInput("dispatch aborted".into())))
                .collect();
        }
        self.run_batch(batch)
    }
}

fn spawn_pool(behaviors: &[Behavior]) -> (Pool, Vec<std::thread::JoinHandle<()>>) {
    let (reply, inbox) = mpsc::channel::<(usize, String)>();
    let mut senders = Vec::new();
    let mut handles = Vec::new();
    for (id, &behavior) in behaviors.iter().enumerate() {
        let (tx, rx) = mpsc::channel::<String>();
        let reply = reply.clone();
        handles.push(std::thread::spawn(move || {
            for text in rx {
                let Ok(task) = serde_json::from_str::<TaskMessage>(&text) else {
                    continue;
                };
                if let Some(r) = behavior.respond(&task) {
                    let out = serde_json::to_string(&r).expect("response serializes");
                    if reply.send((id, out)).is_err() {
                        break;
                    }
                }
            }
        }));
        senders.push(tx);
    }
    (Pool { senders, inbox }, handles)
}

/// Branch-and-bound where every relaxation goes through the worker pool.
pub fn run_distributed(
    problem: &MilpProblem,
    workers: &[Behavior],
    config: &DistributedConfig,
) -> Result<(MilpSolution, AuditLog), DistributedError> {
    if workers.is_empty() {
        return Err(DistributedError::InvalidInput("at least one worker is needed".into()));
    }
    if config.redundancy == 0 {
        return Err(DistributedError::InvalidInput("redundancy must be at least 1".into()));
    }
    let (pool, handles) = spawn_pool(workers);
    let mut dispatcher = Dispatcher {
        pool,
        config: config.clone(),
        flagged: vec![false; workers.len()],
        next_worker: 0,
        next_task: 0,
        verifier: Verifier::default(),
        log: AuditLog::default(),
        fatal: None,
    };
    let result = solve_milp_with(problem, &config.milp, &mut dispatcher);
    let Dispatcher { pool, fatal, log, .. } = dispatcher;
    drop(pool);
    for h in handles {
        let _ = h.join();
    }
    if let Some(e) = fatal {
        return Err(e);
    }
    Ok((result?, log))
}

/// Winner determination through the worker pool. With `encrypt_seed` the
/// workers only ever see sealed bids.
pub fn solve_wdp_distributed(
    instance: &AuctionInstance,
    workers: &[Behavior],
    config: &DistributedConfig,
    encrypt_seed: Option<u64>,
) -> Result<(Allocation, AuditLog), DistributedError> {
    let sealed = match encrypt_seed {
        Some(seed) => Some(seal_bids(instance, seed)?),
        None => None,
    };
    let blocks: Vec<AgentBlock> = match &sealed {
        Some(s) => s.iter().map(|(b, _)| b.block(XNorm::PerResource)).collect(),
        None => agent_blocks(instance, XNorm::PerResource)?,
    };
    let (problem, layout) =
        build_blocks_milp(&blocks, &instance.kappa, Some(&instance.supply())).map_err(AuctionError::from)?;
    let (sol, log) = run_distributed(&problem, workers, config)?;
    if sol.status == MilpStatus::Infeasible {
        return Err(AuctionError::Infeasible.into());
    }
    let mut alloc = decode_blocks(&blocks, &layout, sol);
    if let Some(s) = &sealed {
        alloc = unseal_allocation(s, alloc);
    }
    Ok((decode_allocation(instance, alloc)?, log))
}

/// Centralized run that solves the same task-form relaxations locally, so its
/// search tree matches a run where every worker is honest.
pub fn solve_centralized(problem: &MilpProblem, config: &MilpConfig) -> Result<MilpSolution, DistributedError> {
    let mut eval = |lp: &LpProblem| -> Result<LpSolution, LpError> {
        let task = TaskMessage::from_lp(0, lp).map_err(|e| LpError::InvalidInput(e.to_string()))?;
        solve_task(&task)
    };
    Ok(solve_milp_with(problem, config, &mut eval)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lp() -> LpProblem {
        let mut lp = LpProblem::new(Sense::Maximize, vec![3.0, 2.0]);
        lp.add_ineq(vec![1.0, 1.0], 4.0);
        lp.add_ineq(vec![1.0, 3.0], 6.0);
        lp.bounds[0] = Some((0.0, 3.0));
        lp
    }

    #[test]
    fn task_message_folds_bounds() {
        let t = TaskMessage::from_lp(7, &lp()).unwrap();
        assert_eq!(t.g.len(), 3);
        assert_eq!(t.h[2], 3.0);
        let text = serde_json::to_string(&t).unwrap();
        assert!(text.starts_with("{\"version\":1,\"id\":7,\"c\":"));
        let back: TaskMessage = serde_json::from_str(&text).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn adversaries_are_rejected_for_the_right_reason() {
        let task = TaskMessage::from_lp(0, &lp()).unwrap();
        let canon = task.to_lp();
        let expect = [
            (Behavior::Honest, None),
            (Behavior::Inflate, Some("gap")),
            (Behavior::Infeasible, Some("primal-infeasible")),
            (Behavior::SuboptimalVertex, Some("complementary-slackness")),
            (Behavior::SignFlip, Some("dual-infeasible")),
        ];
        for (b, label) in expect {
            let r = b.respond(&task).unwrap();
            let v = crate::lp::verify_solution(&canon, &r.to_solution());
            match (v, label) {
                (Verdict::Accepted, None) => {}
                (Verdict::Rejected(reason), Some(l)) => assert_eq!(reason.label(), l, "{b:?}"),
                (v, l) => panic!("{b:?}: {v:?} expected {l:?}"),
            }
        }
        assert!(Behavior::Silent.respond(&task).is_none());
    }

    #[test]
    fn adversary_spec() {
        let b = parse_adversaries("inflate:1, silent:3", 4).unwrap();
        assert_eq!(
            b,
            vec![Behavior::Honest, Behavior::Inflate, Behavior::Honest, Behavior::Silent]
        );
        assert!(parse_adversaries("inflate:4", 4).is_err());
    }
}
