//! Minimal `perf_event_open(2)` binding for counting one event of another
//! process.

use std::fmt;
use std::fs::File;
use std::io::{self, Read};
use std::os::fd::FromRawFd;
use std::str::FromStr;

use crate::error::{Error, Result};

const PERF_TYPE_HARDWARE: u32 = 0;
const PERF_TYPE_SOFTWARE: u32 = 1;
const PERF_COUNT_HW_INSTRUCTIONS: u64 = 1;
const PERF_COUNT_SW_TASK_CLOCK: u64 = 1;
const PERF_FLAG_FD_CLOEXEC: libc::c_ulong = 1 << 3;

const FLAG_EXCLUDE_KERNEL: u64 = 1 << 5;
const FLAG_EXCLUDE_HV: u64 = 1 << 6;

/// `struct perf_event_attr` truncated to `PERF_ATTR_SIZE_VER0`; the kernel
/// zero-extends older layouts. The flag bit positions assume a
/// little-endian bitfield layout.
#[repr(C)]
#[derive(Default)]
struct PerfEventAttr {
    kind: u32,
    size: u32,
    config: u64,
    sample_period: u64,
    sample_type: u64,
    read_format: u64,
    flags: u64,
    wakeup_events: u32,
    bp_type: u32,
    config1: u64,
}

const _: () = assert!(std::mem::size_of::<PerfEventAttr>() == 64);

/// The event a [`PerfCounter`] counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum CounterEvent {
    /// User-mode retired instructions (`instructions:u`).
    #[default]
    Instructions,
    /// CPU time in nanoseconds spent by the task. Not an instruction count:
    /// a proxy for hosts that expose no hardware PMU, such as most VMs and
    /// containers. Thresholds are then in nanoseconds of CPU time.
    TaskClock,
}

impl CounterEvent {
    pub fn name(self) -> &'static str {
        match self {
            CounterEvent::Instructions => "instructions:u",
            CounterEvent::TaskClock => "task-clock",
        }
    }

    fn attr(self) -> PerfEventAttr {
        let (kind, config) = match self {
            CounterEvent::Instructions => (PERF_TYPE_HARDWARE, PERF_COUNT_HW_INSTRUCTIONS),
            CounterEvent::TaskClock => (PERF_TYPE_SOFTWARE, PERF_COUNT_SW_TASK_CLOCK),
        };
        PerfEventAttr {
            kind,
            size: std::mem::size_of::<PerfEventAttr>() as u32,
            config,
            flags: FLAG_EXCLUDE_KERNEL | FLAG_EXCLUDE_HV,
            ..PerfEventAttr::default()
        }
    }
}

impl fmt::Display for CounterEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CounterEvent {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "instructions" | "instructions:u" => Ok(CounterEvent::Instructions),
            "task-clock" => Ok(CounterEvent::TaskClock),
            _ => Err(format!("unknown counter event {s:?}")),
        }
    }
}

/// An enabled counter attached to one process (or to the caller with pid 0).
#[derive(Debug)]
pub struct PerfCounter {
    file: File,
    event: CounterEvent,
}

impl PerfCounter {
    pub fn attach(pid: libc::pid_t, event: CounterEvent) -> Result<Self> {
        let mut attr = event.attr();
        // SAFETY: attr is a valid, fully initialised perf_event_attr prefix
        // whose size field matches its length.
        let fd = unsafe {
            libc::syscall(
                libc::SYS_perf_event_open,
                &mut attr as *mut PerfEventAttr,
                pid,
                -1 as libc::c_int,
                -1 as libc::c_int,
                PERF_FLAG_FD_CLOEXEC,
            )
        };
        if fd < 0 {
            return Err(unavailable(event, io::Error::last_os_error()));
        }
        // SAFETY: fd was just returned by the kernel and is owned by nobody else.
        let file = unsafe { File::from_raw_fd(fd as libc::c_int) };
        Ok(PerfCounter { file, event })
    }

    /// Checks whether `event` can be counted at all on this host.
    pub fn probe(event: CounterEvent) -> Result<()> {
        PerfCounter::attach(0, event)?.read()?;
        Ok(())
    }

    pub fn event(&self) -> CounterEvent {
        self.event
    }

    pub fn read(&self) -> io::Result<u64> {
        let mut buf = [0u8; 8];
        (&self.file).read_exact(&mut buf)?;
        Ok(u64::from_ne_bytes(buf))
    }
}

fn unavailable(event: CounterEvent, err: io::Error) -> Error {
    let remediation = match err.raw_os_error() {
        Some(libc::EACCES) | Some(libc::EPERM) => {
            "counter access denied: lower kernel.perf_event_paranoid \
             (e.g. `sysctl -w kernel.perf_event_paranoid=2`), grant CAP_PERFMON, \
             or allow perf_event_open in the container's seccomp profile"
        }
        Some(libc::ENOENT) | Some(libc::ENODEV) | Some(libc::EOPNOTSUPP) => {
            "this CPU/kernel exposes no such event (common inside VMs without a virtual PMU); \
             run on hardware with a PMU or use the task-clock proxy (`--backend os:task-clock`)"
        }
        Some(libc::ENOSYS) => "the kernel was built without perf events (CONFIG_PERF_EVENTS)",
        _ => "check that perf events are enabled and the target process still exists",
    };
    Error::CounterUnavailable {
        reason: format!("perf_event_open({}) failed: {err}", event.name()),
        remediation: remediation.to_string(),
    }
}
