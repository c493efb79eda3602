//! The framed fuzzer<->agent byte-stream protocol and a scripted mock
//! agent. Frames are `"SPOT"  type:u8  length:u32le  payload`; the channel
//! is strictly request-response with one exec in flight, heartbeats allowed
//! only between execs.

use std::io::{self, Read, Write};

pub const FRAME_MAGIC: [u8; 4] = *b"SPOT";
pub const PROTOCOL_VERSION: u32 = 1;

pub const TYPE_HELLO: u8 = 0x01;
pub const TYPE_EXEC_BEGIN: u8 = 0x02;
pub const TYPE_EXEC_END: u8 = 0x03;
pub const TYPE_CRASH: u8 = 0x04;
pub const TYPE_HEARTBEAT: u8 = 0x05;
pub const TYPE_SHUTDOWN: u8 = 0x06;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AgentFrame {
    Hello { version: u32 },
    ExecBegin { input: Vec<u8> },
    ExecEnd { status: u32 },
    Crash { exception_code: u32, fault_address: u64, module: String },
    Heartbeat,
    Shutdown,
}

#[derive(Debug, PartialEq, Eq, thiserror::Error)]
pub enum ProtoError {
    #[error("bad frame magic")]
    BadMagic,
    #[error("truncated frame")]
    Truncated,
    #[error("unknown frame type {0:#x}")]
    UnknownType(u8),
    #[error("malformed payload for type {0:#x}")]
    BadPayload(u8),
}

impl AgentFrame {
    fn type_byte(&self) -> u8 {
        match self {
            AgentFrame::Hello { .. } => TYPE_HELLO,
            AgentFrame::ExecBegin { .. } => TYPE_EXEC_BEGIN,
            AgentFrame::ExecEnd { .. } => TYPE_EXEC_END,
            AgentFrame::Crash { .. } => TYPE_CRASH,
            AgentFrame::Heartbeat => TYPE_HEARTBEAT,
            AgentFrame::Shutdown => TYPE_SHUTDOWN,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload: Vec<u8> = match self {
            AgentFrame::Hello { version } => version.to_le_bytes().to_vec(),
            AgentFrame::ExecBegin { input } => input.clone(),
            AgentFrame::ExecEnd { status } => status.to_le_bytes().to_vec(),
            AgentFrame::Crash { exception_code, fault_address, module } => {
                let name = module.as_bytes();
                let mut p = Vec::with_capacity(16 + name.len());
                p.extend_from_slice(&exception_code.to_le_bytes());
                p.extend_from_slice(&fault_address.to_le_bytes());
                p.extend_from_slice(&(name.len() as u32).to_le_bytes());
                p.extend_from_slice(name);
                p
            }
            AgentFrame::Heartbeat | AgentFrame::Shutdown => Vec::new(),
        };
        let mut out = Vec::with_capacity(9 + payload.len());
        out.extend_from_slice(&FRAME_MAGIC);
        out.push(self.type_byte());
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    /// Decode one frame from the head of `bytes`; returns the frame and the
    /// bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(AgentFrame, usize), ProtoError> {
        if bytes.len() < 9 {
            return Err(ProtoError::Truncated);
        }
        if bytes[..4] != FRAME_MAGIC {
            return Err(ProtoError::BadMagic);
        }
        let ty = bytes[4];
        let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let payload = bytes.get(9..9 + len).ok_or(ProtoError::Truncated)?;
        let frame = match ty {
            TYPE_HELLO => AgentFrame::Hello {
                version: u32::from_le_bytes(
                    payload.get(..4).ok_or(ProtoError::BadPayload(ty))?.try_into().unwrap(),
                ),
            },
            TYPE_EXEC_BEGIN => AgentFrame::ExecBegin { input: payload.to_vec() },
            TYPE_EXEC_END => AgentFrame::ExecEnd {
                status: u32::from_le_bytes(
                    payload.get(..4).ok_or(ProtoError::BadPayload(ty))?.try_into().unwrap(),
                ),
            },
            TYPE_CRASH => {
                if payload.len() < 16 {
                    return Err(ProtoError::BadPayload(ty));
                }
                let exception_code = u32::from_le_bytes(payload[0..4].try_into().unwrap());
                let fault_address = u64::from_le_bytes(payload[4..12].try_into().unwrap());
                let name_len = u32::from_le_bytes(payload[12..16].try_into().unwrap()) as usize;
                let name =
                    payload.get(16..16 + name_len).ok_or(ProtoError::BadPayload(ty))?;
                AgentFrame::Crash {
                    exception_code,
                    fault_address,
                    module: String::from_utf8_lossy(name).into_owned(),
                }
            }
            TYPE_HEARTBEAT => AgentFrame::Heartbeat,
            TYPE_SHUTDOWN => AgentFrame::Shutdown,
            other => return Err(ProtoError::UnknownType(other)),
        };
        Ok((frame, 9 + len))
    }
}

pub fn write_frame(w: &mut impl Write, frame: &AgentFrame) -> io::Result<()> {
    w.write_all(&frame.encode())?;
    w.flush()
}

/// Blocking framed read; protocol violations surface as InvalidData.
pub fn read_frame(r: &mut impl Read) -> io::Result<AgentFrame> {
    let mut head = [0u8; 9];
    r.read_exact(&mut head)?;
    if head[..4] != FRAME_MAGIC {
        return Err(io::Error::new(io::ErrorKind::InvalidData, ProtoError::BadMagic.to_string()));
    }
    let len = u32::from_le_bytes(head[5..9].try_into().unwrap()) as usize;
    let mut buf = vec![0u8; 9 + len];
    buf[..9].copy_from_slice(&head);
    r.read_exact(&mut buf[9..])?;
    AgentFrame::decode(&buf)
        .map(|(f, _)| f)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))
}

/// Behavior script for the bundled mock agent.
#[derive(Clone, Debug)]
pub struct MockAgentScript {
    /// Inputs starting with this prefix report a crash.
    pub crash_prefix: Option<Vec<u8>>,
    pub crash_code: u32,
    pub crash_address: u64,
    /// Send a heartbeat before every Nth exec reply (0 = never).
    pub heartbeat_every: u64,
}

impl Default for MockAgentScript {
    fn default() -> Self {
        MockAgentScript {
            crash_prefix: None,
            crash_code: 0xC000_0005,
            crash_address: 0xDEAD_0000,
            heartbeat_every: 0,
        }
    }
}

/// Serve the agent side of a channel until Shutdown or EOF. Sends HELLO
/// first, then answers each EXEC_BEGIN with EXEC_END or CRASH.
pub fn run_mock_agent<C: Read + Write>(mut chan: C, script: MockAgentScript) -> io::Result<u64> {
    write_frame(&mut chan, &AgentFrame::Hello { version: PROTOCOL_VERSION })?;
    let mut execs = 0u64;
    loop {
        let frame = match read_frame(&mut chan) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(execs),
            Err(e) => return Err(e),
        };
        match frame {
            AgentFrame::ExecBegin { input } => {
                execs += 1;
                if script.heartbeat_every != 0 && execs % script.heartbeat_every == 0 {
                    write_frame(&mut chan, &AgentFrame::Heartbeat)?;
                }
                let crashed = script
                    .crash_prefix
                    .as_ref()
                    .map(|p| input.starts_with(p))
                    .unwrap_or(false);
                if crashed {
                    write_frame(
                        &mut chan,
                        &AgentFrame::Crash {
                            exception_code: script.crash_code,
                            fault_address: script.crash_address,
                            module: "target.dll".into(),
                        },
                    )?;
                } else {
                    write_frame(&mut chan, &AgentFrame::ExecEnd { status: 0 })?;
                }
            }
            AgentFrame::Heartbeat => {}
            AgentFrame::Shutdown => return Ok(execs),
            other => {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("unexpected frame from fuzzer: {other:?}"),
                ))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exec_end_wire_bytes() {
        let bytes = AgentFrame::ExecEnd { status: 0 }.encode();
        assert_eq!(
            bytes,
            vec![0x53, 0x50, 0x4F, 0x54, 0x03, 0x04, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00]
        );
    }

    #[test]
    fn decode_rejects_bad_magic() {
        let mut bytes = AgentFrame::Heartbeat.encode();
        bytes[0] = b'X';
        assert_eq!(AgentFrame::decode(&bytes), Err(ProtoError::BadMagic));
    }

    #[test]
    fn decode_rejects_unknown_type() {
        let mut bytes = AgentFrame::Heartbeat.encode();
        bytes[4] = 0x7F;
        assert_eq!(AgentFrame::decode(&bytes), Err(ProtoError::UnknownType(0x7F)));
    }

    #[test]
    fn decode_rejects_short_payload() {
        let mut bytes = AgentFrame::ExecEnd { status: 1 }.encode();
        bytes.truncate(11);
        assert_eq!(AgentFrame::decode(&bytes), Err(ProtoError::Truncated));
    }

    #[test]
    fn crash_frame_round_trip() {
        let f = AgentFrame::Crash {
            exception_code: 0xC0000005,
            fault_address: 0x7FFE_1234,
            module: "parser.dll".into(),
        };
        let (back, used) = AgentFrame::decode(&f.encode()).unwrap();
        assert_eq!(back, f);
        assert_eq!(used, f.encode().len());
    }
}
