//! Length-prefixed frames over TCP with a one-byte acknowledgement.
//!
//! Each frame is a little-endian `u32` byte count followed by one serialized
//! payload. The receiver answers every frame with a single byte: `0` when the
//! payload decoded cleanly, otherwise the [`WireError::code`] that rejected
//! it. A connection carries one frame at a time.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::time::Duration;

use crate::error::{Error, Result, WireError};
use crate::kv::{deserialize, KvPayload};

pub const ACK_OK: u8 = 0;
pub const DEFAULT_ADDR: &str = "127.0.0.1:7878";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
/// Frames above this size are refused before any allocation.
pub const MAX_FRAME: u32 = 1 << 30;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcpConfig {
    pub addr: String,
    pub timeout: Duration,
}

impl Default for TcpConfig {
    fn default() -> Self {
        TcpConfig {
            addr: DEFAULT_ADDR.to_string(),
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

impl TcpConfig {
    /// Defaults overridden by `KVCOMM_ADDR` and `KVCOMM_TIMEOUT_MS`.
    pub fn from_env() -> Result<Self> {
        let mut cfg = TcpConfig::default();
        if let Ok(addr) = std::env::var("KVCOMM_ADDR") {
            cfg.addr = addr;
        }
        if let Ok(ms) = std::env::var("KVCOMM_TIMEOUT_MS") {
            let ms: u64 = ms
                .parse()
                .map_err(|_| Error::Config(format!("KVCOMM_TIMEOUT_MS={ms:?} is not an integer")))?;
            cfg.timeout = Duration::from_millis(ms);
        }
        Ok(cfg)
    }
}

fn io_err(e: io::Error) -> Error {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => Error::Transport("timed out".into()),
        _ => Error::Transport(e.to_string()),
    }
}

fn configure(stream: &TcpStream, timeout: Duration) -> Result<()> {
    stream.set_read_timeout(Some(timeout)).map_err(io_err)?;
    stream.set_write_timeout(Some(timeout)).map_err(io_err)?;
    stream.set_nodelay(true).map_err(io_err)?;
    Ok(())
}

pub fn write_frame(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    let len = u32::try_from(bytes.len())
        .ok()
        .filter(|&n| n <= MAX_FRAME)
        .ok_or_else(|| Error::Transport(format!("frame of {} bytes is too large", bytes.len())))?;
    w.write_all(&len.to_le_bytes()).map_err(io_err)?;
    w.write_all(bytes).map_err(io_err)?;
    w.flush().map_err(io_err)
}

/// Outcome of reading one frame.
#[derive(Debug)]
pub enum Frame {
    Data(Vec<u8>),
    /// The peer closed the connection cleanly between frames.
    Closed,
    /// The stream ended inside a frame.
    Truncated { needed: usize, available: usize },
}

pub fn read_frame(r: &mut impl Read) -> Result<Frame> {
    let mut len = [0u8; 4];
    let got = read_up_to(r, &mut len)?;
    if got == 0 {
        return Ok(Frame::Closed);
    }
    if got < 4 {
        return Ok(Frame::Truncated {
            needed: 4,
            available: got,
        });
    }
    let len = u32::from_le_bytes(len);
    if len > MAX_FRAME {
        return Err(Error::Transport(format!("peer announced a {len}-byte frame")));
    }
    let mut buf = vec![0u8; len as usize];
    let got = read_up_to(r, &mut buf)?;
    if got < buf.len() {
        return Ok(Frame::Truncated {
            needed: buf.len(),
            available: got,
        });
    }
    Ok(Frame::Data(buf))
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(io_err(e)),
        }
    }
    Ok(filled)
}

/// Sending side of one connection.
pub struct TcpSender {
    stream: TcpStream,
}

impl TcpSender {
    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self> {
        let addrs: Vec<SocketAddr> = addr.to_socket_addrs().map_err(io_err)?.collect();
        let mut last = None;
        for a in addrs {
            match TcpStream::connect_timeout(&a, timeout) {
                Ok(stream) => {
                    configure(&stream, timeout)?;
                    return Ok(TcpSender { stream });
                }
                Err(e) => last = Some(e),
            }
        }
        Err(last.map(io_err).unwrap_or_else(|| Error::Transport("address resolved to nothing".into())))
    }

    /// Send one serialized payload and wait for its acknowledgement.
    pub fn send(&mut self, bytes: &[u8]) -> Result<()> {
        write_frame(&mut self.stream, bytes)?;
        self.await_ack()
    }

    /// Write raw bytes without framing; test hook for malformed frames.
    pub fn send_raw(&mut self, bytes: &[u8]) -> Result<()> {
        self.stream.write_all(bytes).map_err(io_err)?;
        self.stream.flush().map_err(io_err)
    }

    /// Stop writing, leaving the read half open for a final ack.
    pub fn finish_writes(&mut self) -> Result<()> {
        self.stream.shutdown(std::net::Shutdown::Write).map_err(io_err)
    }

    pub fn await_ack(&mut self) -> Result<()> {
        let mut ack = [0u8; 1];
        self.stream.read_exact(&mut ack).map_err(io_err)?;
        match ack[0] {
            ACK_OK => Ok(()),
            code => Err(Error::Nack(code)),
        }
    }
}

pub struct TcpReceiver {
    listener: TcpListener,
    timeout: Duration,
}

impl TcpReceiver {
    pub fn bind(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self> {
        let listener = TcpListener::bind(addr).map_err(io_err)?;
        Ok(TcpReceiver { listener, timeout })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        self.listener.local_addr().map_err(io_err)
    }

    pub fn accept(&self) -> Result<Connection> {
        let (stream, _) = self.listener.accept().map_err(io_err)?;
        configure(&stream, self.timeout)?;
        Ok(Connection { stream })
    }
}

/// Receiving side of one accepted connection.
pub struct Connection {
    stream: TcpStream,
}

impl Connection {
    /// Read, decode and acknowledge the next payload. `Ok(None)` means the
    /// peer closed the connection between frames. Decoding failures are
    /// nacked before being returned.
    pub fn recv(&mut self) -> Result<Option<KvPayload>> {
        let outcome = match read_frame(&mut self.stream)? {
            Frame::Closed => return Ok(None),
            Frame::Truncated { needed, available } => Err(WireError::Truncated { needed, available }),
            Frame::Data(bytes) => deserialize(&bytes),
        };
        let ack = match &outcome {
            Ok(_) => ACK_OK,
            Err(e) => e.code(),
        };
        // The peer may already be gone after a truncated frame.
        let sent = self.stream.write_all(&[ack]).and_then(|_| self.stream.flush());
        match outcome {
            Ok(p) => {
                sent.map_err(io_err)?;
                Ok(Some(p))
            }
            Err(e) => Err(e.into()),
        }
    }
}
