//! OS backend: replicas are forked child processes, progress comes from perf
//! counters and suspension from `SIGSTOP`/`SIGCONT`.
//!
//! Exited children are observed with `waitid(WNOWAIT)` and stay zombies until
//! [`ProcessSource::release`], so a pid held by this source can never be
//! recycled for an unrelated process while signals may still be sent to it.

use std::collections::HashMap;
use std::io;
use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use log::{debug, warn};

use crate::error::{Error, Result};
use crate::verdict::{FailureCause, Role};

use super::{CounterEvent, ExitStatus, PerfCounter, ProgressSource, ReplicaHandle};

/// Exit code of a child whose body panicked.
pub(crate) const PANIC_EXIT_CODE: i32 = 101;

#[derive(Debug)]
struct ProcReplica {
    pid: libc::pid_t,
    counter: PerfCounter,
    stopped: bool,
    exit: Option<ExitStatus>,
}

#[derive(Debug)]
pub struct ProcessSource {
    event: CounterEvent,
    epoch: Instant,
    replicas: HashMap<ReplicaHandle, ProcReplica>,
}

impl ProcessSource {
    pub fn new(event: CounterEvent) -> Self {
        ProcessSource {
            event,
            epoch: Instant::now(),
            replicas: HashMap::new(),
        }
    }

    pub fn event(&self) -> CounterEvent {
        self.event
    }

    /// Forks a child that stops itself before running `body`, pins it if
    /// asked, attaches a counter and, unless `start_suspended`, lets it run.
    ///
    /// `prepare` runs in the child before it stops; neither closure may rely
    /// on other threads of the parent. The child's exit code is the value
    /// returned by `body`, or [`PANIC_EXIT_CODE`] if it panics.
    pub fn spawn<P, B>(
        &mut self,
        role: Role,
        core: Option<usize>,
        start_suspended: bool,
        prepare: P,
        body: B,
    ) -> Result<ReplicaHandle>
    where
        P: FnOnce(),
        B: FnOnce() -> i32,
    {
        let pid = fork_stopped(prepare, body)?;
        let attach = || -> Result<PerfCounter> {
            if let Some(core) = core {
                set_affinity(pid, core).map_err(|e| Error::PinningFailure {
                    what: role.as_str(),
                    core,
                    reason: e.to_string(),
                })?;
            }
            PerfCounter::attach(pid, self.event)
        };
        let counter = match attach() {
            Ok(c) => c,
            Err(e) => {
                kill_and_reap(pid);
                return Err(e);
            }
        };
        let handle = ReplicaHandle::new(role);
        debug!("spawned {role} replica pid {pid} ({})", self.event);
        self.replicas.insert(
            handle,
            ProcReplica {
                pid,
                counter,
                stopped: true,
                exit: None,
            },
        );
        if !start_suspended {
            self.resume(handle)?;
        }
        Ok(handle)
    }

    pub fn pid(&self, replica: ReplicaHandle) -> Option<libc::pid_t> {
        self.replicas.get(&replica).map(|r| r.pid)
    }

    /// Kills the replica if it is still alive, reaps it and detaches its
    /// counter. The handle is stale afterwards. Releasing an unknown handle
    /// is a no-op.
    pub fn release(&mut self, replica: ReplicaHandle) {
        if let Some(r) = self.replicas.remove(&replica) {
            kill_and_reap(r.pid);
        }
    }

    pub fn release_all(&mut self) {
        for (_, r) in self.replicas.drain() {
            kill_and_reap(r.pid);
        }
    }

    fn get(&mut self, replica: ReplicaHandle) -> Result<&mut ProcReplica> {
        self.replicas
            .get_mut(&replica)
            .ok_or(Error::StaleHandle(replica.id))
    }

    fn signal(&mut self, replica: ReplicaHandle, sig: libc::c_int) -> Result<()> {
        let r = self.get(replica)?;
        if r.exit.is_some() {
            return Ok(());
        }
        // SAFETY: r.pid is our unreaped child, so it cannot name another process.
        if unsafe { libc::kill(r.pid, sig) } != 0 {
            return Err(io::Error::last_os_error().into());
        }
        Ok(())
    }
}

impl ProgressSource for ProcessSource {
    fn backend_name(&self) -> String {
        format!("os:{}", self.event.name())
    }

    fn read_count(&mut self, replica: ReplicaHandle) -> Result<u64> {
        Ok(self.get(replica)?.counter.read()?)
    }

    /// A no-op once the replica has exited.
    fn suspend(&mut self, replica: ReplicaHandle) -> Result<()> {
        if self.get(replica)?.stopped {
            return Ok(());
        }
        self.signal(replica, libc::SIGSTOP)?;
        self.get(replica)?.stopped = true;
        Ok(())
    }

    fn resume(&mut self, replica: ReplicaHandle) -> Result<()> {
        if !self.get(replica)?.stopped {
            return Ok(());
        }
        self.signal(replica, libc::SIGCONT)?;
        self.get(replica)?.stopped = false;
        Ok(())
    }

    fn kill(&mut self, replica: ReplicaHandle) -> Result<()> {
        self.signal(replica, libc::SIGKILL)
    }

    fn is_terminated(&mut self, replica: ReplicaHandle) -> Result<Option<ExitStatus>> {
        let r = self.get(replica)?;
        if r.exit.is_none() {
            r.exit = peek_exit(r.pid)?;
        }
        Ok(r.exit)
    }

    fn now_ns(&self) -> u64 {
        self.epoch.elapsed().as_nanos() as u64
    }

    fn wait(&mut self, period: Duration) {
        std::thread::sleep(period);
    }
}

impl Drop for ProcessSource {
    fn drop(&mut self) {
        self.release_all();
    }
}

/// Pins the calling thread to `core`.
pub fn pin_current_thread(core: usize) -> io::Result<()> {
    set_affinity(0, core)
}

fn set_affinity(pid: libc::pid_t, core: usize) -> io::Result<()> {
    if core >= libc::CPU_SETSIZE as usize {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "core index out of range"));
    }
    // SAFETY: cpu_set_t is plain data; CPU_SET stays within CPU_SETSIZE.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(core, &mut set);
        if libc::sched_setaffinity(pid, std::mem::size_of::<libc::cpu_set_t>(), &set) != 0 {
            return Err(io::Error::last_os_error());
        }
    }
    Ok(())
}

fn fork_stopped<P, B>(prepare: P, body: B) -> Result<libc::pid_t>
where
    P: FnOnce(),
    B: FnOnce() -> i32,
{
    // SAFETY: the child only runs the caller's closures and then _exit()s,
    // never returning into the parent's stack frames.
    let pid = unsafe { libc::fork() };
    if pid < 0 {
        return Err(Error::SpawnFailure(io::Error::last_os_error().to_string()));
    }
    if pid == 0 {
        prepare();
        // SAFETY: raise and _exit are async-signal-safe.
        unsafe { libc::raise(libc::SIGSTOP) };
        let code = panic::catch_unwind(AssertUnwindSafe(body)).unwrap_or(PANIC_EXIT_CODE);
        unsafe { libc::_exit(code) };
    }
    let mut status = 0;
    loop {
        // SAFETY: pid is our child.
        let rc = unsafe { libc::waitpid(pid, &mut status, libc::WUNTRACED) };
        if rc == pid {
            break;
        }
        let err = io::Error::last_os_error();
        if err.kind() != io::ErrorKind::Interrupted {
            return Err(Error::SpawnFailure(format!("waiting for replica to stop: {err}")));
        }
    }
    if !libc::WIFSTOPPED(status) {
        return Err(Error::SpawnFailure(format!(
            "replica exited before reaching its start barrier (status {status:#x})"
        )));
    }
    Ok(pid)
}

fn peek_exit(pid: libc::pid_t) -> Result<Option<ExitStatus>> {
    // SAFETY: siginfo_t is plain data and pid is our child.
    let mut info: libc::siginfo_t = unsafe { std::mem::zeroed() };
    let rc = unsafe {
        libc::waitid(
            libc::P_PID,
            pid as libc::id_t,
            &mut info,
            libc::WEXITED | libc::WNOHANG | libc::WNOWAIT,
        )
    };
    if rc != 0 {
        return Err(io::Error::last_os_error().into());
    }
    // SAFETY: waitid filled info (or left it zeroed, which reads as pid 0).
    let (child, status) = unsafe { (info.si_pid(), info.si_status()) };
    if child == 0 {
        return Ok(None);
    }
    Ok(Some(match info.si_code {
        libc::CLD_EXITED if status == 0 => ExitStatus::Success,
        libc::CLD_EXITED => ExitStatus::Failure(FailureCause::NonZeroExit { code: status }),
        _ => ExitStatus::Failure(FailureCause::Crash { signal: status }),
    }))
}

fn kill_and_reap(pid: libc::pid_t) {
    // SAFETY: pid is an unreaped child of ours.
    unsafe {
        libc::kill(pid, libc::SIGKILL);
        let mut status = 0;
        while libc::waitpid(pid, &mut status, 0) < 0 {
            let err = io::Error::last_os_error();
            if err.kind() != io::ErrorKind::Interrupted {
                warn!("failed to reap replica pid {pid}: {err}");
                break;
            }
        }
    }
}
