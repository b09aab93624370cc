//! Distiller lanes: where predict and train run relative to the decode loop.
//!
//! Both lanes call the same [`predict_rows`] and [`train_rows`], in the same
//! order, on the same data, so their numeric results are bit-identical. The
//! async lane is a worker thread fed by a FIFO of commands; FIFO order makes
//! every train command finish before the next predict starts.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU8, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::{Duration, Instant};

use super::ring::RingBuffer;
use super::EngineError;
use crate::distiller::{DistillerBank, DistillerError, TrainReport};
use crate::numerics::Matrix;

/// One decode row parked in the ring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Row {
    pub ring: usize,
    pub step: usize,
    pub seq: usize,
    /// Distiller serving this row.
    pub slot: usize,
}

/// Result of one update of one distiller.
#[derive(Debug, Clone)]
pub(crate) struct TrainOutcome {
    /// `(step, seq)` of every row in the batch.
    pub rows: Vec<(usize, usize)>,
    pub report: Result<TrainReport, String>,
    pub start_ns: u64,
    pub end_ns: u64,
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct PredictTiming {
    pub start_ns: u64,
    pub end_ns: u64,
    pub fallback: bool,
}

fn nanos(clock: Instant) -> u64 {
    clock.elapsed().as_nanos() as u64
}

fn by_slot(rows: &[Row]) -> BTreeMap<usize, Vec<Row>> {
    let mut groups: BTreeMap<usize, Vec<Row>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.slot).or_default().push(*r);
    }
    groups
}

fn gather(ring: &RingBuffer, rows: &[Row], hl: bool) -> Matrix {
    let d = ring.width();
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        ring.with_slot(r.ring, |s| {
            data.extend_from_slice(if hl { &s.hl } else { &s.h1 })
        });
    }
    Matrix::from_vec(rows.len(), d, data).expect("ring rows have the ring width")
}

/// Predicts `ĥ` for every row and stores it in the row's slot.
pub(crate) fn predict_rows(
    bank: &DistillerBank,
    ring: &RingBuffer,
    rows: &[Row],
) -> Result<(), DistillerError> {
    for (slot, group) in by_slot(rows) {
        let state = bank
            .get(slot)
            .ok_or_else(|| DistillerError::Config(format!("no distiller in slot {slot}")))?;
        let pred = state.predict(&gather(ring, &group, false))?;
        for (i, r) in group.iter().enumerate() {
            ring.set_pred(r.ring, pred.row(i));
        }
    }
    Ok(())
}

/// One update per distiller on the rows routed to it, then releases the rows.
pub(crate) fn train_rows(
    bank: &mut DistillerBank,
    ring: &RingBuffer,
    rows: &[Row],
    clock: Instant,
) -> Vec<TrainOutcome> {
    let mut out = Vec::new();
    for (slot, group) in by_slot(rows) {
        let start_ns = nanos(clock);
        let h1 = gather(ring, &group, false);
        let hl = gather(ring, &group, true);
        let report = match bank.get_mut(slot) {
            Some(state) => state.train_step(&h1, &hl).map_err(|e| e.to_string()),
            None => Err(format!("no distiller in slot {slot}")),
        };
        for r in &group {
            ring.release(r.ring);
        }
        out.push(TrainOutcome {
            rows: group.iter().map(|r| (r.step, r.seq)).collect(),
            report,
            start_ns,
            end_ns: nanos(clock),
        });
    }
    out
}

pub(crate) trait Lane {
    fn predict(&mut self, step: usize, rows: Vec<Row>) -> Result<(), EngineError>;
    /// Blocks until the predictions of `step` are in the ring.
    fn rendezvous(&mut self, step: usize) -> Result<PredictTiming, EngineError>;
    fn train(&mut self, rows: Vec<Row>) -> Result<(), EngineError>;
    /// Waits for outstanding work and returns every train outcome in order.
    fn finish(&mut self) -> Result<Vec<TrainOutcome>, EngineError>;
    fn fallbacks(&self) -> u64 {
        0
    }
}

/// Runs distiller work inline on the decode thread.
pub(crate) struct SyncLane<'a> {
    pub bank: &'a mut DistillerBank,
    pub ring: &'a RingBuffer,
    pub clock: Instant,
    pub pending: Option<(usize, PredictTiming)>,
    pub outcomes: Vec<TrainOutcome>,
}

impl Lane for SyncLane<'_> {
    fn predict(&mut self, step: usize, rows: Vec<Row>) -> Result<(), EngineError> {
        let start_ns = nanos(self.clock);
        predict_rows(self.bank, self.ring, &rows)?;
        self.pending = Some((
            step,
            PredictTiming {
                start_ns,
                end_ns: nanos(self.clock),
                fallback: false,
            },
        ));
        Ok(())
    }

    fn rendezvous(&mut self, step: usize) -> Result<PredictTiming, EngineError> {
        match self.pending.take() {
            Some((s, t)) if s == step => Ok(t),
            _ => Err(EngineError::Lane(format!(
                "no prediction submitted for step {step}"
            ))),
        }
    }

    fn train(&mut self, rows: Vec<Row>) -> Result<(), EngineError> {
        let o = train_rows(self.bank, self.ring, &rows, self.clock);
        self.outcomes.extend(o);
        Ok(())
    }

    fn finish(&mut self) -> Result<Vec<TrainOutcome>, EngineError> {
        Ok(std::mem::take(&mut self.outcomes))
    }
}

const PENDING: u8 = 0;
const RUNNING: u8 = 1;
const CLAIMED: u8 = 2;

enum Command {
    Predict {
        step: usize,
        rows: Vec<Row>,
        state: Arc<AtomicU8>,
    },
    Train {
        rows: Vec<Row>,
    },
    Stop,
}

enum Message {
    Predicted {
        step: usize,
        timing: PredictTiming,
        error: Option<String>,
    },
    Trained(Vec<TrainOutcome>),
}

/// State shared between the decode thread and the worker.
pub(crate) struct LaneShared {
    pub bank: RwLock<DistillerBank>,
    trains_done: Mutex<u64>,
    trains_cv: Condvar,
}

impl LaneShared {
    pub fn new(bank: DistillerBank) -> Self {
        Self {
            bank: RwLock::new(bank),
            trains_done: Mutex::new(0),
            trains_cv: Condvar::new(),
        }
    }

    pub fn into_bank(self) -> DistillerBank {
        self.bank.into_inner().unwrap_or_else(|e| e.into_inner())
    }
}

/// Test hook: stall the worker before predicting `step`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LaneDelay {
    pub step: usize,
    pub delay: Duration,
}

/// Worker loop: executes commands strictly in arrival order.
fn worker(
    shared: &LaneShared,
    ring: &RingBuffer,
    commands: Receiver<Command>,
    results: Sender<Message>,
    clock: Instant,
    delay: Option<LaneDelay>,
) {
    while let Ok(cmd) = commands.recv() {
        match cmd {
            Command::Predict { step, rows, state } => {
                if let Some(d) = delay.filter(|d| d.step == step) {
                    std::thread::sleep(d.delay);
                }
                if state
                    .compare_exchange(PENDING, RUNNING, Ordering::AcqRel, Ordering::Acquire)
                    .is_err()
                {
                    // the decode thread took this request over
                    continue;
                }
                let start_ns = nanos(clock);
                let bank = shared.bank.read().unwrap_or_else(|e| e.into_inner());
                let error = predict_rows(&bank, ring, &rows)
                    .err()
                    .map(|e| e.to_string());
                drop(bank);
                let timing = PredictTiming {
                    start_ns,
                    end_ns: nanos(clock),
                    fallback: false,
                };
                if results
                    .send(Message::Predicted {
                        step,
                        timing,
                        error,
                    })
                    .is_err()
                {
                    return;
                }
            }
            Command::Train { rows } => {
                let mut bank = shared.bank.write().unwrap_or_else(|e| e.into_inner());
                let outcomes = train_rows(&mut bank, ring, &rows, clock);
                drop(bank);
                *shared.trains_done.lock().unwrap_or_else(|e| e.into_inner()) += 1;
                shared.trains_cv.notify_all();
                if results.send(Message::Trained(outcomes)).is_err() {
                    return;
                }
            }
            Command::Stop => return,
        }
    }
}

/// Decode-thread handle of the worker lane.
pub(crate) struct AsyncLane<'a> {
    shared: &'a LaneShared,
    ring: &'a RingBuffer,
    commands: Sender<Command>,
    results: Receiver<Message>,
    clock: Instant,
    timeout: Duration,
    request: Option<(usize, Arc<AtomicU8>, Vec<Row>)>,
    trains_submitted: u64,
    outcomes: Vec<TrainOutcome>,
    fallbacks: u64,
    stopped: bool,
}

/// Channels connecting an [`AsyncLane`] with its [`worker`].
pub(crate) struct WorkerEnds {
    commands: Receiver<Command>,
    results: Sender<Message>,
}

impl WorkerEnds {
    pub fn run(
        self,
        shared: &LaneShared,
        ring: &RingBuffer,
        clock: Instant,
        delay: Option<LaneDelay>,
    ) {
        worker(shared, ring, self.commands, self.results, clock, delay)
    }
}

impl<'a> AsyncLane<'a> {
    pub fn new(
        shared: &'a LaneShared,
        ring: &'a RingBuffer,
        clock: Instant,
        timeout: Duration,
    ) -> (Self, WorkerEnds) {
        let (ctx, crx) = mpsc::channel();
        let (rtx, rrx) = mpsc::channel();
        (
            Self {
                shared,
                ring,
                commands: ctx,
                results: rrx,
                clock,
                timeout,
                request: None,
                trains_submitted: 0,
                outcomes: Vec::new(),
                fallbacks: 0,
                stopped: false,
            },
            WorkerEnds {
                commands: crx,
                results: rtx,
            },
        )
    }

    fn send(&self, cmd: Command) -> Result<(), EngineError> {
        self.commands
            .send(cmd)
            .map_err(|_| EngineError::Lane("distiller lane stopped".into()))
    }

    fn absorb(&mut self, msg: Message, step: usize) -> Option<Result<PredictTiming, EngineError>> {
        match msg {
            Message::Trained(o) => {
                self.outcomes.extend(o);
                None
            }
            Message::Predicted {
                step: s,
                timing,
                error,
            } if s == step => Some(match error {
                Some(e) => Err(EngineError::Lane(e)),
                None => Ok(timing),
            }),
            Message::Predicted { .. } => None,
        }
    }

    /// Predicts inline after every submitted update has landed.
    fn take_over(&mut self, rows: &[Row]) -> Result<PredictTiming, EngineError> {
        let mut done = self
            .shared
            .trains_done
            .lock()
            .unwrap_or_else(|e| e.into_inner());
        while *done < self.trains_submitted {
            done = self
                .shared
                .trains_cv
                .wait(done)
                .unwrap_or_else(|e| e.into_inner());
        }
        drop(done);
        let start_ns = nanos(self.clock);
        let bank = self.shared.bank.read().unwrap_or_else(|e| e.into_inner());
        predict_rows(&bank, self.ring, rows)?;
        self.fallbacks += 1;
        Ok(PredictTiming {
            start_ns,
            end_ns: nanos(self.clock),
            fallback: true,
        })
    }
}

impl Lane for AsyncLane<'_> {
    fn predict(&mut self, step: usize, rows: Vec<Row>) -> Result<(), EngineError> {
        let state = Arc::new(AtomicU8::new(PENDING));
        self.request = Some((step, Arc::clone(&state), rows.clone()));
        self.send(Command::Predict { step, rows, state })
    }

    fn rendezvous(&mut self, step: usize) -> Result<PredictTiming, EngineError> {
        let (s, state, rows) = self
            .request
            .take()
            .ok_or_else(|| EngineError::Lane(format!("no prediction submitted for step {step}")))?;
        if s != step {
            return Err(EngineError::Lane(format!(
                "rendezvous for step {step}, pending {s}"
            )));
        }
        let deadline = Instant::now() + self.timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.results.recv_timeout(left) {
                Ok(msg) => {
                    if let Some(r) = self.absorb(msg, step) {
                        return r;
                    }
                }
                Err(RecvTimeoutError::Timeout) => break,
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(EngineError::Lane("distiller lane exited".into()));
                }
            }
        }
        if state
            .compare_exchange(PENDING, CLAIMED, Ordering::AcqRel, Ordering::Acquire)
            .is_ok()
        {
            return self.take_over(&rows);
        }
        // the worker already started; its answer is on the way
        loop {
            let msg = self
                .results
                .recv()
                .map_err(|_| EngineError::Lane("distiller lane exited".into()))?;
            if let Some(r) = self.absorb(msg, step) {
                return r;
            }
        }
    }

    fn train(&mut self, rows: Vec<Row>) -> Result<(), EngineError> {
        self.trains_submitted += 1;
        self.send(Command::Train { rows })
    }

    fn finish(&mut self) -> Result<Vec<TrainOutcome>, EngineError> {
        if !self.stopped {
            self.stopped = true;
            self.send(Command::Stop)?;
            while let Ok(msg) = self.results.recv() {
                self.absorb(msg, usize::MAX);
            }
        }
        Ok(std::mem::take(&mut self.outcomes))
    }

    fn fallbacks(&self) -> u64 {
        self.fallbacks
    }
}
