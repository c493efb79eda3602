//! Execution backends: spawn-per-input, persistent agent over a framed
//! channel, and the in-process sandbox for desk-scale targets.

use std::io::{Read, Write};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use super::proto::{read_frame, write_frame, AgentFrame};
use crate::pe::PeImage;
use crate::rewrite::{FB_OFF_BITMAP, FB_OFF_MAP_SIZE, FEEDBACK_MAGIC, FEEDBACK_SECTION};
use crate::sandbox::{self, load_image, ExitStatus, SandboxState};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrashInfo {
    pub exception_code: u32,
    pub fault_address: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RunStatus {
    Ok,
    Crash(CrashInfo),
    Hang,
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("backend down: {0}")]
    BackendDown(String),
}

pub struct RunOutcome {
    pub status: RunStatus,
    pub bitmap: Vec<u8>,
    pub exec_time: Duration,
}

pub trait Backend {
    fn map_size_log2(&self) -> u32;
    fn run_case(&mut self, input: &[u8]) -> Result<RunOutcome, BackendError>;
}

/// Windows-style status codes reported for sandbox faults.
fn fault_code(kind: sandbox::FaultKind) -> u32 {
    match kind {
        sandbox::FaultKind::Unmapped
        | sandbox::FaultKind::NotWritable
        | sandbox::FaultKind::NotExecutable => 0xC000_0005,
        sandbox::FaultKind::UnsupportedInsn => 0xC000_001D,
        sandbox::FaultKind::Breakpoint => 0x8000_0003,
    }
}

/// Runs instrumented fixtures inside the sandbox. The fixture designates
/// its input buffer with a `.fuzzin` section (u32 length + bytes); coverage
/// is read back from the in-image feedback section.
pub struct SandboxBackend {
    template: SandboxState,
    work: SandboxState,
    input_va: u64,
    input_cap: usize,
    spot1_va: u64,
    map_size: usize,
    map_size_log2: u32,
    fuel: u64,
}

impl SandboxBackend {
    pub fn new(img: &PeImage, fuel: u64) -> Result<SandboxBackend, BackendError> {
        let input = img
            .section_by_name(".fuzzin")
            .ok_or_else(|| BackendError::BackendDown("fixture has no .fuzzin section".into()))?;
        let spot1 = img
            .section_by_name(FEEDBACK_SECTION)
            .ok_or_else(|| BackendError::BackendDown("target is not instrumented".into()))?;
        let header = img
            .read_rva(spot1.virtual_address as u64, FB_OFF_BITMAP)
            .map_err(|e| BackendError::BackendDown(e.to_string()))?;
        if &header[..8] != FEEDBACK_MAGIC {
            return Err(BackendError::BackendDown("feedback section magic mismatch".into()));
        }
        let map_size =
            u32::from_le_bytes(header[FB_OFF_MAP_SIZE..FB_OFF_MAP_SIZE + 4].try_into().unwrap());
        if !map_size.is_power_of_two() {
            return Err(BackendError::BackendDown("bad map size".into()));
        }
        let template = load_image(img, img.opt.image_base, 1)
            .map_err(|e| BackendError::BackendDown(e.to_string()))?;
        Ok(SandboxBackend {
            input_va: template.load_base + input.virtual_address as u64,
            input_cap: input.virtual_size.max(input.raw_size) as usize - 4,
            spot1_va: template.load_base + spot1.virtual_address as u64,
            map_size: map_size as usize,
            map_size_log2: map_size.trailing_zeros(),
            fuel,
            work: template.clone(),
            template,
        })
    }
}

impl Backend for SandboxBackend {
    fn map_size_log2(&self) -> u32 {
        self.map_size_log2
    }

    fn run_case(&mut self, input: &[u8]) -> Result<RunOutcome, BackendError> {
        self.work.reset_from(&self.template);
        let st = &mut self.work;
        let data = &input[..input.len().min(self.input_cap)];
        let mut buf = (data.len() as u32).to_le_bytes().to_vec();
        buf.extend_from_slice(data);
        st.write_region(self.input_va, &buf);
        st.run(self.fuel);
        let status = match st.exit {
            ExitStatus::Returned => RunStatus::Ok,
            ExitStatus::FuelExhausted => RunStatus::Hang,
            ExitStatus::Fault { kind, addr, .. } => RunStatus::Crash(CrashInfo {
                exception_code: fault_code(kind),
                fault_address: addr,
            }),
            ExitStatus::Running => RunStatus::Hang,
        };
        let bitmap = st
            .read_region(self.spot1_va + FB_OFF_BITMAP as u64, self.map_size)
            .ok_or_else(|| BackendError::BackendDown("feedback section unmapped".into()))?;
        // deterministic synthetic time: one instruction ~ one microsecond
        let exec_time = Duration::from_micros(st.fuel_used);
        Ok(RunOutcome { status, bitmap, exec_time })
    }
}

/// Spawn-per-input backend. The input lands in a file (argv `@@` expands to
/// its path), `SPOT_SHM` points the target at the coverage object — a file
/// with the feedback-section layout that is re-created before every run and
/// read back afterwards.
pub struct SpawnBackend {
    pub program: String,
    pub args: Vec<String>,
    pub input_path: PathBuf,
    pub shm_path: PathBuf,
    pub timeout: Duration,
    map_size_log2: u32,
}

impl SpawnBackend {
    pub fn new(
        program: String,
        args: Vec<String>,
        workdir: &std::path::Path,
        map_size_log2: u32,
        timeout: Duration,
    ) -> SpawnBackend {
        SpawnBackend {
            program,
            args,
            input_path: workdir.join("cur_input"),
            shm_path: workdir.join("coverage.shm"),
            timeout,
            map_size_log2,
        }
    }
}

impl Backend for SpawnBackend {
    fn map_size_log2(&self) -> u32 {
        self.map_size_log2
    }

    fn run_case(&mut self, input: &[u8]) -> Result<RunOutcome, BackendError> {
        let map_size = 1usize << self.map_size_log2;
        std::fs::write(&self.input_path, input)
            .map_err(|e| BackendError::BackendDown(format!("write input: {e}")))?;
        let mut shm = crate::rewrite::feedback_header(map_size as u32, 0, 0).to_vec();
        shm.resize(FB_OFF_BITMAP + map_size, 0);
        std::fs::write(&self.shm_path, &shm)
            .map_err(|e| BackendError::BackendDown(format!("write shm: {e}")))?;

        let started = Instant::now();
        let args: Vec<String> = self
            .args
            .iter()
            .map(|a| a.replace("@@", &self.input_path.display().to_string()))
            .collect();
        let mut child = std::process::Command::new(&self.program)
            .args(&args)
            .env("SPOT_SHM", &self.shm_path)
            .stdin(std::process::Stdio::null())
            .stdout(std::process::Stdio::null())
            .stderr(std::process::Stdio::null())
            .spawn()
            .map_err(|e| BackendError::BackendDown(format!("spawn {}: {e}", self.program)))?;

        let status = loop {
            match child.try_wait() {
                Ok(Some(st)) => break Some(st),
                Ok(None) => {
                    if started.elapsed() > self.timeout {
                        let _ = child.kill();
                        let _ = child.wait();
                        break None;
                    }
                    std::thread::sleep(Duration::from_millis(1));
                }
                Err(e) => return Err(BackendError::BackendDown(format!("wait: {e}"))),
            }
        };
        let exec_time = started.elapsed();
        let run_status = match status {
            None => RunStatus::Hang,
            Some(st) if st.success() => RunStatus::Ok,
            Some(st) => {
                let code = st.code().unwrap_or(-1);
                RunStatus::Crash(CrashInfo { exception_code: code as u32, fault_address: 0 })
            }
        };
        let blob = std::fs::read(&self.shm_path)
            .map_err(|e| BackendError::BackendDown(format!("read shm: {e}")))?;
        let bitmap = blob
            .get(FB_OFF_BITMAP..FB_OFF_BITMAP + map_size)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0; map_size]);
        Ok(RunOutcome { status: run_status, bitmap, exec_time })
    }
}

/// A byte-stream channel with an optional receive deadline.
pub trait Channel: Read + Write {
    fn set_read_timeout(&mut self, timeout: Option<Duration>) -> std::io::Result<()> {
        let _ = timeout;
        Ok(())
    }
}

#[cfg(unix)]
impl Channel for std::os::unix::net::UnixStream {
    fn set_read_timeout(&mut self, timeout: Option<Duration>) -> std::io::Result<()> {
        std::os::unix::net::UnixStream::set_read_timeout(self, timeout)
    }
}

/// Persistent-target backend over the framed agent protocol. One exec in
/// flight; a missing reply within the timeout counts as a hang and resets
/// the request/response cycle.
pub struct AgentBackend<C: Channel> {
    chan: C,
    pub timeout: Duration,
    map_size_log2: u32,
    shm_path: Option<PathBuf>,
    pub protocol_errors: u64,
}

impl<C: Channel> AgentBackend<C> {
    pub fn connect(
        mut chan: C,
        timeout: Duration,
        map_size_log2: u32,
        shm_path: Option<PathBuf>,
    ) -> Result<AgentBackend<C>, BackendError> {
        chan.set_read_timeout(Some(timeout))
            .map_err(|e| BackendError::BackendDown(e.to_string()))?;
        match read_frame(&mut chan) {
            Ok(AgentFrame::Hello { .. }) => {}
            Ok(other) => {
                return Err(BackendError::BackendDown(format!("expected HELLO, got {other:?}")))
            }
            Err(e) => return Err(BackendError::BackendDown(format!("handshake: {e}"))),
        }
        Ok(AgentBackend { chan, timeout, map_size_log2, shm_path, protocol_errors: 0 })
    }

    pub fn shutdown(&mut self) {
        let _ = write_frame(&mut self.chan, &AgentFrame::Shutdown);
    }
}

impl<C: Channel> Backend for AgentBackend<C> {
    fn map_size_log2(&self) -> u32 {
        self.map_size_log2
    }

    fn run_case(&mut self, input: &[u8]) -> Result<RunOutcome, BackendError> {
        let map_size = 1usize << self.map_size_log2;
        if let Some(p) = &self.shm_path {
            let mut shm = crate::rewrite::feedback_header(map_size as u32, 0, 0).to_vec();
            shm.resize(FB_OFF_BITMAP + map_size, 0);
            std::fs::write(p, &shm).map_err(|e| BackendError::BackendDown(e.to_string()))?;
        }
        let started = Instant::now();
        write_frame(&mut self.chan, &AgentFrame::ExecBegin { input: input.to_vec() })
            .map_err(|e| BackendError::BackendDown(format!("send: {e}")))?;
        let status = loop {
            match read_frame(&mut self.chan) {
                Ok(AgentFrame::Heartbeat) => continue,
                Ok(AgentFrame::ExecEnd { status: 0 }) => break RunStatus::Ok,
                Ok(AgentFrame::ExecEnd { status }) => {
                    break RunStatus::Crash(CrashInfo {
                        exception_code: status,
                        fault_address: 0,
                    })
                }
                Ok(AgentFrame::Crash { exception_code, fault_address, .. }) => {
                    break RunStatus::Crash(CrashInfo { exception_code, fault_address })
                }
                Ok(other) => {
                    self.protocol_errors += 1;
                    return Err(BackendError::BackendDown(format!("protocol desync: {other:?}")));
                }
                Err(e)
                    if e.kind() == std::io::ErrorKind::WouldBlock
                        || e.kind() == std::io::ErrorKind::TimedOut =>
                {
                    // reset the cycle: swallow any stale late reply
                    let _ = self.chan.set_read_timeout(Some(Duration::from_millis(1)));
                    while read_frame(&mut self.chan).is_ok() {}
                    let _ = self.chan.set_read_timeout(Some(self.timeout));
                    break RunStatus::Hang;
                }
                Err(e) => return Err(BackendError::BackendDown(format!("recv: {e}"))),
            }
        };
        let exec_time = started.elapsed();
        let bitmap = match &self.shm_path {
            Some(p) => std::fs::read(p)
                .ok()
                .and_then(|b| b.get(FB_OFF_BITMAP..FB_OFF_BITMAP + map_size).map(|s| s.to_vec()))
                .unwrap_or_else(|| vec![0; map_size]),
            None => vec![0; map_size],
        };
        Ok(RunOutcome { status, bitmap, exec_time })
    }
}
