use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::protocol::{CommandMessage, Message, StateMessage};

#[derive(Debug, Default)]
struct Slot {
    latest: Option<CommandMessage>,
    last_sequence: Option<u64>,
    last_activity: Option<Instant>,
    session_active: bool,
}

/// Latest-wins command slot shared between the network reader and the tick
/// loop. A command older than the newest accepted one is refused.
#[derive(Debug, Default)]
pub struct CommandMailbox {
    slot: Mutex<Slot>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OutOfSequence {
    pub received: u64,
    pub last: u64,
}

impl CommandMailbox {
    pub fn new() -> Self {
        Self::default()
    }

    /// Start a new session: sequence numbering restarts.
    pub fn begin_session(&self, now: Instant) {
        let mut s = self.slot.lock().unwrap();
        *s = Slot {
            session_active: true,
            last_activity: Some(now),
            ..Slot::default()
        };
    }

    pub fn end_session(&self) {
        let mut s = self.slot.lock().unwrap();
        s.session_active = false;
        s.latest = None;
    }

    /// Any inbound frame counts as activity for the staleness timer.
    pub fn touch(&self, now: Instant) {
        self.slot.lock().unwrap().last_activity = Some(now);
    }

    pub fn deposit(&self, command: CommandMessage, now: Instant) -> Result<(), OutOfSequence> {
        let mut s = self.slot.lock().unwrap();
        s.last_activity = Some(now);
        if let Some(last) = s.last_sequence {
            if command.sequence <= last {
                return Err(OutOfSequence {
                    received: command.sequence,
                    last,
                });
            }
        }
        s.last_sequence = Some(command.sequence);
        s.latest = Some(command);
        Ok(())
    }

    /// Newest command not yet taken.
    pub fn take(&self) -> Option<CommandMessage> {
        self.slot.lock().unwrap().latest.take()
    }

    pub fn session_active(&self) -> bool {
        self.slot.lock().unwrap().session_active
    }

    /// True when there is no session, or the session has been silent for at
    /// least `timeout`.
    pub fn is_stale(&self, now: Instant, timeout: Duration) -> bool {
        let s = self.slot.lock().unwrap();
        match (s.session_active, s.last_activity) {
            (true, Some(t)) => now.saturating_duration_since(t) >= timeout,
            _ => true,
        }
    }
}

#[derive(Debug, Default)]
struct Queue {
    items: VecDeque<StateMessage>,
    dropped: u64,
    closed: bool,
}

/// Bounded state buffer for one consumer. Publishing never blocks; when
/// full the oldest frame is discarded and a gap marker is emitted before
/// the next frame handed out.
#[derive(Debug)]
pub struct StateOutbox {
    queue: Mutex<Queue>,
    ready: Condvar,
    capacity: usize,
}

impl StateOutbox {
    pub fn new(capacity: usize) -> Self {
        Self {
            queue: Mutex::new(Queue::default()),
            ready: Condvar::new(),
            capacity: capacity.max(1),
        }
    }

    pub fn publish(&self, state: StateMessage) {
        let mut q = self.queue.lock().unwrap();
        if q.closed {
            return;
        }
        if q.items.len() == self.capacity {
            q.items.pop_front();
            q.dropped += 1;
        }
        q.items.push_back(state);
        self.ready.notify_one();
    }

    fn pop(q: &mut Queue) -> Option<Message> {
        if q.dropped > 0 {
            let dropped = std::mem::take(&mut q.dropped);
            return Some(Message::Gap { dropped });
        }
        q.items.pop_front().map(Message::State)
    }

    pub fn try_next(&self) -> Option<Message> {
        Self::pop(&mut self.queue.lock().unwrap())
    }

    /// Wait up to `timeout` for the next frame. `None` on timeout or close.
    pub fn next_timeout(&self, timeout: Duration) -> Option<Message> {
        let q = self.queue.lock().unwrap();
        let (mut q, _) = self
            .ready
            .wait_timeout_while(q, timeout, |q| !q.closed && q.items.is_empty() && q.dropped == 0)
            .unwrap();
        Self::pop(&mut q)
    }

    pub fn close(&self) {
        self.queue.lock().unwrap().closed = true;
        self.ready.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.queue.lock().unwrap().closed
    }

    pub fn len(&self) -> usize {
        self.queue.lock().unwrap().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::SolverStats;
    use shelfbot_core::worldmodel::GraspKind;

    fn command(sequence: u64) -> CommandMessage {
        CommandMessage {
            sequence,
            timestamp: sequence as f64,
            left_position: [0.0; 3],
            right_position: [0.0; 3],
            left_orientation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            right_orientation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            left_pad: [0.0; 2],
            right_pad_x: 0.0,
            left_gripper: false,
            right_gripper: false,
            grasp_mode: None,
        }
    }

    fn state(tick: u64) -> StateMessage {
        StateMessage {
            tick,
            time: tick as f64 * 0.1,
            left_position: [0.0; 3],
            right_position: [0.0; 3],
            left_orientation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            right_orientation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            left_joints: [0.0; 6],
            right_joints: [0.0; 6],
            base_pose: [0.0; 3],
            goal_weights: vec![],
            grasp_mode: GraspKind::Independent,
            attached: vec![],
            hold: false,
            solver: SolverStats {
                converged: true,
                outer_iterations: 1,
                inner_iterations: 1,
                cost: 0.0,
                max_violation: 0.0,
            },
        }
    }

    #[test]
    fn latest_wins_and_old_sequences_refused() {
        let m = CommandMailbox::new();
        let now = Instant::now();
        m.begin_session(now);
        m.deposit(command(1), now).unwrap();
        m.deposit(command(3), now).unwrap();
        assert_eq!(m.deposit(command(2), now), Err(OutOfSequence { received: 2, last: 3 }));
        assert_eq!(m.deposit(command(3), now), Err(OutOfSequence { received: 3, last: 3 }));
        assert_eq!(m.take().unwrap().sequence, 3);
        assert!(m.take().is_none());
    }

    #[test]
    fn staleness() {
        let m = CommandMailbox::new();
        let t0 = Instant::now();
        assert!(m.is_stale(t0, Duration::from_secs(2)));
        m.begin_session(t0);
        assert!(!m.is_stale(t0 + Duration::from_millis(1999), Duration::from_secs(2)));
        assert!(m.is_stale(t0 + Duration::from_secs(2), Duration::from_secs(2)));
        m.touch(t0 + Duration::from_secs(2));
        assert!(!m.is_stale(t0 + Duration::from_secs(3), Duration::from_secs(2)));
        m.end_session();
        assert!(m.is_stale(t0 + Duration::from_secs(3), Duration::from_secs(2)));
    }

    #[test]
    fn overflow_drops_oldest_with_gap() {
        let out = StateOutbox::new(3);
        for t in 0..5 {
            out.publish(state(t));
        }
        assert_eq!(out.try_next(), Some(Message::Gap { dropped: 2 }));
        let ticks: Vec<u64> = std::iter::from_fn(|| out.try_next())
            .map(|m| match m {
                Message::State(s) => s.tick,
                other => panic!("{other:?}"),
            })
            .collect();
        assert_eq!(ticks, vec![2, 3, 4]);
    }

    #[test]
    fn closed_outbox_wakes_waiter() {
        let out = std::sync::Arc::new(StateOutbox::new(2));
        let o = out.clone();
        let h = std::thread::spawn(move || o.next_timeout(Duration::from_secs(10)));
        std::thread::sleep(Duration::from_millis(20));
        out.close();
        assert_eq!(h.join().unwrap(), None);
    }
}
