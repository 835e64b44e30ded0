#![allow(dead_code)]

use softdr::progress::{CounterEvent, PerfCounter};

/// The counter event OS-backend tests should use: retired instructions when
/// the machine has them, else the task-clock proxy. `None` when neither works.
pub fn os_event() -> Option<CounterEvent> {
    [CounterEvent::Instructions, CounterEvent::TaskClock]
        .into_iter()
        .find(|&e| PerfCounter::probe(e).is_ok())
}

pub fn instructions_available() -> bool {
    PerfCounter::probe(CounterEvent::Instructions).is_ok()
}

/// Scheduler state letter of `pid` from /proc (`T` when stopped).
pub fn proc_state(pid: libc::pid_t) -> Option<char> {
    let stat = std::fs::read_to_string(format!("/proc/{pid}/stat")).ok()?;
    // The command name is parenthesised and may contain spaces.
    stat.rsplit_once(')')?.1.trim_start().chars().next()
}
