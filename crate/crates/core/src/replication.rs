//! Creation of the two redundant replicas and retrieval of their outputs.
//!
//! With the process backend each replica gets one anonymous shared mapping
//! holding private copies of every input followed by its zero-initialised
//! output regions. The mapping is created and filled by the controlling
//! process before the fork, and the sibling replica's mapping is unmapped in
//! each child, so a replica can only ever see its own data.

use std::io;
use std::panic::{self, AssertUnwindSafe};
use std::sync::mpsc;
use std::thread::JoinHandle;
use std::time::Duration;

use log::warn;

use crate::config::{validate_config, MonitorConfig};
use crate::error::{Error, Result};
use crate::payload::PayloadSpec;
use crate::progress::{
    CounterEvent, ExitStatus, ProcessSource, ProgressSource, ReplicaHandle, Scenario, ScriptedSource,
};
use crate::verdict::{FailureCause, Role};

pub type WrapperResult = std::result::Result<(), Box<dyn std::error::Error + Send + Sync>>;

/// A computation adapted to the replication contract: it reads the ordered
/// input buffers and writes the ordered output buffers.
///
/// Implementations must be deterministic, single-threaded, touch no other
/// memory, and must not spawn processes. Any `Fn` with the matching
/// signature qualifies.
pub trait WrappedComputation {
    fn run(&self, inputs: &[&[u8]], outputs: &mut [&mut [u8]]) -> WrapperResult;
}

impl<F> WrappedComputation for F
where
    F: Fn(&[&[u8]], &mut [&mut [u8]]) -> WrapperResult,
{
    fn run(&self, inputs: &[&[u8]], outputs: &mut [&mut [u8]]) -> WrapperResult {
        self(inputs, outputs)
    }
}

/// Exit code of a replica whose wrapper returned an error.
pub const WRAPPER_ERROR_EXIT_CODE: i32 = 1;

/// Where replicas run and how their progress is observed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Backend {
    /// Forked processes observed through the given perf event.
    Process(CounterEvent),
    /// The wrapper runs in-process on private copies; progress and
    /// termination follow the scenario in virtual time.
    Scripted(Scenario),
}

impl Default for Backend {
    fn default() -> Self {
        Backend::Process(CounterEvent::Instructions)
    }
}

impl Backend {
    pub fn name(&self) -> String {
        match self {
            Backend::Process(event) => format!("os:{}", event.name()),
            Backend::Scripted(_) => "scripted".to_string(),
        }
    }
}

/// An anonymous `MAP_SHARED` mapping, zero-filled by the kernel.
#[derive(Debug)]
struct SharedRegion {
    ptr: *mut u8,
    len: usize,
}

// SAFETY: the region is plain memory owned by this value; the children that
// share it are separate processes, not threads.
unsafe impl Send for SharedRegion {}

impl SharedRegion {
    fn new(len: usize) -> io::Result<Self> {
        if len == 0 {
            return Ok(SharedRegion {
                ptr: std::ptr::NonNull::dangling().as_ptr(),
                len: 0,
            });
        }
        // SAFETY: anonymous mapping with no address hint.
        let ptr = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                len,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_SHARED | libc::MAP_ANONYMOUS,
                -1,
                0,
            )
        };
        if ptr == libc::MAP_FAILED {
            return Err(io::Error::last_os_error());
        }
        Ok(SharedRegion {
            ptr: ptr.cast(),
            len,
        })
    }

    fn bytes(&self) -> &[u8] {
        // SAFETY: ptr is valid for len bytes while self lives.
        unsafe { std::slice::from_raw_parts(self.ptr, self.len) }
    }

    fn bytes_mut(&mut self) -> &mut [u8] {
        // SAFETY: as above, and &mut self gives exclusive access in this process.
        unsafe { std::slice::from_raw_parts_mut(self.ptr, self.len) }
    }

    /// Unmaps the region in a forked child without running destructors.
    fn unmap_in_child(&self) {
        if self.len > 0 {
            // SAFETY: only called in a child about to stop; the parent's copy
            // of the mapping is unaffected.
            unsafe { libc::munmap(self.ptr.cast(), self.len) };
        }
    }
}

impl Drop for SharedRegion {
    fn drop(&mut self) {
        if self.len > 0 {
            // SAFETY: ptr/len came from a successful mmap.
            unsafe { libc::munmap(self.ptr.cast(), self.len) };
        }
    }
}

/// Byte ranges of inputs and outputs inside one replica region.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    inputs: Vec<(usize, usize)>,
    outputs: Vec<(usize, usize)>,
    total: usize,
}

impl Layout {
    fn new(input_sizes: &[usize], output_sizes: &[usize]) -> Self {
        let mut offset = 0;
        let mut place = |sizes: &[usize]| {
            sizes
                .iter()
                .map(|&len| {
                    let range = (offset, len);
                    offset += len;
                    range
                })
                .collect::<Vec<_>>()
        };
        let inputs = place(input_sizes);
        let outputs = place(output_sizes);
        Layout {
            inputs,
            outputs,
            total: offset,
        }
    }
}

fn run_wrapper<C: WrappedComputation + ?Sized>(
    computation: &C,
    inputs: &[&[u8]],
    outputs: &mut [&mut [u8]],
) -> i32 {
    match panic::catch_unwind(AssertUnwindSafe(|| computation.run(inputs, outputs))) {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            warn!("wrapper failed: {e}");
            WRAPPER_ERROR_EXIT_CODE
        }
        Err(_) => crate::progress::PANIC_EXIT_CODE,
    }
}

/// Runs `computation` once in the calling process on fresh copies, the way a
/// replica would. Used as the unprotected reference execution.
pub fn run_direct<C: WrappedComputation + ?Sized>(computation: &C, payload: &PayloadSpec) -> Result<Vec<Vec<u8>>> {
    let inputs: Vec<&[u8]> = payload.inputs.iter().map(Vec::as_slice).collect();
    let mut outputs: Vec<Vec<u8>> = payload.output_sizes.iter().map(|&n| vec![0; n]).collect();
    let mut views: Vec<&mut [u8]> = outputs.iter_mut().map(Vec::as_mut_slice).collect();
    match run_wrapper(computation, &inputs, &mut views) {
        0 => Ok(outputs),
        code => Err(Error::ReplicaFailure {
            role: Role::Head,
            cause: FailureCause::NonZeroExit { code },
        }),
    }
}

#[derive(Debug)]
enum Replicas {
    Process {
        source: ProcessSource,
        regions: [SharedRegion; 2],
    },
    Scripted {
        source: ScriptedSource,
        outputs: [Vec<Vec<u8>>; 2],
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct PendingFlip {
    pub role: Role,
    pub output_index: usize,
    pub byte_offset: usize,
    pub bit_index: u8,
}

#[derive(Debug)]
struct Freezer {
    cancel: mpsc::Sender<()>,
    thread: JoinHandle<()>,
}

/// Two live replicas of one computation plus their private data.
#[derive(Debug)]
pub struct ReplicaSession {
    head: ReplicaHandle,
    trail: ReplicaHandle,
    layout: Layout,
    output_sizes: Vec<usize>,
    replicas: Replicas,
    flips: Vec<PendingFlip>,
    crash_triggers: Vec<(Role, u64)>,
    freezers: Vec<Freezer>,
    released: bool,
}

fn slot(role: Role) -> usize {
    match role {
        Role::Head => 0,
        Role::Trail => 1,
    }
}

/// Creates the head and trail replicas of `computation`.
///
/// The head starts running immediately; the trail is created stopped and has
/// retired no wrapper instruction when this returns.
pub fn spawn_replicas<C: WrappedComputation + ?Sized>(
    computation: &C,
    payload: &PayloadSpec,
    config: &MonitorConfig,
    backend: &Backend,
) -> Result<ReplicaSession> {
    let mut session = spawn_stopped(computation, payload, config, backend)?;
    session.start()?;
    Ok(session)
}

/// Like [`spawn_replicas`] but the head waits for [`ReplicaSession::start`],
/// so faults can be injected before either replica retires anything.
pub(crate) fn spawn_stopped<C: WrappedComputation + ?Sized>(
    computation: &C,
    payload: &PayloadSpec,
    config: &MonitorConfig,
    backend: &Backend,
) -> Result<ReplicaSession> {
    let errors = validate_config(config);
    if !errors.is_empty() {
        return Err(Error::InvalidConfig(errors));
    }
    let layout = Layout::new(&payload.input_sizes(), &payload.output_sizes);
    let (head, trail, replicas) = match backend {
        Backend::Process(event) => spawn_processes(computation, payload, &layout, config, *event)?,
        Backend::Scripted(scenario) => spawn_scripted(computation, payload, scenario),
    };
    Ok(ReplicaSession {
        head,
        trail,
        layout,
        output_sizes: payload.output_sizes.clone(),
        replicas,
        flips: Vec::new(),
        crash_triggers: Vec::new(),
        freezers: Vec::new(),
        released: false,
    })
}

fn spawn_processes<C: WrappedComputation + ?Sized>(
    computation: &C,
    payload: &PayloadSpec,
    layout: &Layout,
    config: &MonitorConfig,
    event: CounterEvent,
) -> Result<(ReplicaHandle, ReplicaHandle, Replicas)> {
    let mut regions = [
        SharedRegion::new(layout.total).map_err(|e| Error::SpawnFailure(format!("mmap: {e}")))?,
        SharedRegion::new(layout.total).map_err(|e| Error::SpawnFailure(format!("mmap: {e}")))?,
    ];
    for region in &mut regions {
        let bytes = region.bytes_mut();
        for (input, &(offset, len)) in payload.inputs.iter().zip(&layout.inputs) {
            bytes[offset..offset + len].copy_from_slice(input);
        }
    }
    let mut source = ProcessSource::new(event);
    let spawn = |role: Role, core: Option<usize>, source: &mut ProcessSource| {
        let own = &regions[slot(role)];
        let other = &regions[1 - slot(role)];
        let base = own.ptr;
        source.spawn(
            role,
            core,
            true,
            || other.unmap_in_child(),
            || {
                // SAFETY: every range lies inside this replica's own region,
                // inputs and outputs never overlap, and nothing else in this
                // process touches the region.
                let inputs: Vec<&[u8]> = layout
                    .inputs
                    .iter()
                    .map(|&(off, len)| unsafe { std::slice::from_raw_parts(base.add(off), len) })
                    .collect();
                let mut outputs: Vec<&mut [u8]> = layout
                    .outputs
                    .iter()
                    .map(|&(off, len)| unsafe { std::slice::from_raw_parts_mut(base.add(off), len) })
                    .collect();
                run_wrapper(computation, &inputs, &mut outputs)
            },
        )
    };
    let head = spawn(Role::Head, config.head_core, &mut source)?;
    let trail = spawn(Role::Trail, config.trail_core, &mut source)?;
    Ok((head, trail, Replicas::Process { source, regions }))
}

fn spawn_scripted<C: WrappedComputation + ?Sized>(
    computation: &C,
    payload: &PayloadSpec,
    scenario: &Scenario,
) -> (ReplicaHandle, ReplicaHandle, Replicas) {
    let mut scenario = scenario.clone();
    let execute = || {
        let inputs_copy: Vec<Vec<u8>> = payload.inputs.clone();
        let inputs: Vec<&[u8]> = inputs_copy.iter().map(Vec::as_slice).collect();
        let mut outputs: Vec<Vec<u8>> = payload.output_sizes.iter().map(|&n| vec![0; n]).collect();
        let mut views: Vec<&mut [u8]> = outputs.iter_mut().map(Vec::as_mut_slice).collect();
        let code = run_wrapper(computation, &inputs, &mut views);
        (code, outputs)
    };
    let (head_code, head_out) = execute();
    let (trail_code, trail_out) = execute();
    for (replica, code) in [(&mut scenario.head, head_code), (&mut scenario.trail, trail_code)] {
        if code != 0 {
            replica.exit_status = ExitStatus::Failure(FailureCause::NonZeroExit { code });
        }
    }
    let (source, head, trail) = scenario.to_source();
    (
        head,
        trail,
        Replicas::Scripted {
            source,
            outputs: [head_out, trail_out],
        },
    )
}

impl ReplicaSession {
    pub fn head(&self) -> ReplicaHandle {
        self.head
    }

    pub fn trail(&self) -> ReplicaHandle {
        self.trail
    }

    pub fn handle(&self, role: Role) -> ReplicaHandle {
        match role {
            Role::Head => self.head,
            Role::Trail => self.trail,
        }
    }

    pub fn output_sizes(&self) -> &[usize] {
        &self.output_sizes
    }

    pub fn is_released(&self) -> bool {
        self.released
    }

    pub fn backend_name(&self) -> String {
        self.source().backend_name()
    }

    pub fn source(&self) -> &dyn ProgressSource {
        match &self.replicas {
            Replicas::Process { source, .. } => source,
            Replicas::Scripted { source, .. } => source,
        }
    }

    pub fn source_mut(&mut self) -> &mut dyn ProgressSource {
        match &mut self.replicas {
            Replicas::Process { source, .. } => source,
            Replicas::Scripted { source, .. } => source,
        }
    }

    /// OS process id of a replica, for the process backend.
    pub fn pid(&self, role: Role) -> Option<libc::pid_t> {
        match &self.replicas {
            Replicas::Process { source, .. } => source.pid(self.handle(role)),
            Replicas::Scripted { .. } => None,
        }
    }

    /// Current contents of a replica's input copies, for inspection.
    pub fn input_view(&self, role: Role) -> Vec<Vec<u8>> {
        match &self.replicas {
            Replicas::Process { regions, .. } => {
                let bytes = regions[slot(role)].bytes();
                self.layout
                    .inputs
                    .iter()
                    .map(|&(off, len)| bytes[off..off + len].to_vec())
                    .collect()
            }
            // the scripted backend ran the wrapper on throwaway copies
            Replicas::Scripted { .. } => Vec::new(),
        }
    }

    pub(crate) fn schedule_flip(&mut self, flip: PendingFlip) {
        self.flips.push(flip);
    }

    pub(crate) fn add_crash_trigger(&mut self, role: Role, after_instructions: u64) {
        self.crash_triggers.push((role, after_instructions));
    }

    pub(crate) fn take_crash_triggers(&mut self) -> Vec<(Role, u64)> {
        std::mem::take(&mut self.crash_triggers)
    }

    /// Stops `role` after `start_after` for `duration`, outside the
    /// monitor's control. On the process backend a frozen trail is continued
    /// at the end of the window even if the monitor suspended it meanwhile.
    pub(crate) fn freeze(&mut self, role: Role, start_after: Duration, duration: Duration) -> Result<()> {
        let handle = self.handle(role);
        match &mut self.replicas {
            Replicas::Scripted { source, .. } => {
                let from = if start_after.is_zero() {
                    source.tick()
                } else {
                    source.tick() + source.ticks_for(start_after)
                };
                let ticks = source.ticks_for(duration);
                source.freeze(handle, from, ticks)
            }
            Replicas::Process { source, .. } => {
                let pid = source.pid(handle).ok_or(Error::StaleHandle(handle.id))?;
                let (cancel, rx) = mpsc::channel::<()>();
                let thread = std::thread::spawn(move || {
                    if !start_after.is_zero() && rx.recv_timeout(start_after).is_ok() {
                        return;
                    }
                    // SAFETY: the pid stays an unreaped child of this process
                    // until the session joins this thread on release.
                    unsafe { libc::kill(pid, libc::SIGSTOP) };
                    let _ = rx.recv_timeout(duration);
                    unsafe { libc::kill(pid, libc::SIGCONT) };
                });
                self.freezers.push(Freezer { cancel, thread });
                Ok(())
            }
        }
    }

    /// Lets the head run. The scripted backend has nothing to start: its
    /// clock only moves when the monitor waits.
    pub(crate) fn start(&mut self) -> Result<()> {
        let head = self.head;
        match &mut self.replicas {
            Replicas::Process { source, .. } => source.resume(head),
            Replicas::Scripted { .. } => Ok(()),
        }
    }

    /// Kills a replica immediately (fail-stop).
    pub fn kill(&mut self, role: Role) -> Result<()> {
        let handle = self.handle(role);
        self.source_mut().kill(handle)
    }

    /// Copies out the outputs of a replica that exited successfully.
    pub fn collect_outputs(&mut self, role: Role) -> Result<Vec<Vec<u8>>> {
        if self.released {
            return Err(Error::StaleHandle(self.handle(role).id));
        }
        let handle = self.handle(role);
        match self.source_mut().is_terminated(handle)? {
            None => return Err(Error::Incomplete(role)),
            Some(ExitStatus::Failure(cause)) => return Err(Error::ReplicaFailure { role, cause }),
            Some(ExitStatus::Success) => {}
        }
        let flips: Vec<PendingFlip> = self.flips.iter().copied().filter(|f| f.role == role).collect();
        self.flips.retain(|f| f.role != role);
        let mut outputs: Vec<Vec<u8>> = match &self.replicas {
            Replicas::Process { regions, .. } => {
                let bytes = regions[slot(role)].bytes();
                self.layout
                    .outputs
                    .iter()
                    .map(|&(off, len)| bytes[off..off + len].to_vec())
                    .collect()
            }
            Replicas::Scripted { outputs, .. } => outputs[slot(role)].clone(),
        };
        for flip in flips {
            outputs[flip.output_index][flip.byte_offset] ^= 1 << flip.bit_index;
        }
        Ok(outputs)
    }

    /// Kills and reaps both replicas and drops their private regions.
    /// Idempotent; cleanup problems are only logged.
    pub fn release(&mut self) {
        if self.released {
            return;
        }
        self.released = true;
        for f in self.freezers.drain(..) {
            let _ = f.cancel.send(());
            if f.thread.join().is_err() {
                warn!("freeze injector thread panicked");
            }
        }
        if let Replicas::Process { source, .. } = &mut self.replicas {
            source.release_all();
        }
    }
}

impl Drop for ReplicaSession {
    fn drop(&mut self) {
        self.release();
    }
}

/// Free-function form of [`ReplicaSession::collect_outputs`].
pub fn collect_outputs(session: &mut ReplicaSession, role: Role) -> Result<Vec<Vec<u8>>> {
    session.collect_outputs(role)
}

/// Free-function form of [`ReplicaSession::release`].
pub fn release_session(session: &mut ReplicaSession) {
    session.release();
}
