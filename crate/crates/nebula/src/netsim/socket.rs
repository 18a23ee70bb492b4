//! Real TCP transport speaking the same length-prefixed frame stream as the
//! simulated link.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::time::{Duration, Instant};

use crate::netsim::{NetError, RawLink};

/// Frames larger than this are treated as stream corruption.
const MAX_FRAME_BYTES: u32 = 1 << 28;

/// One side of a TCP connection carrying length-prefixed frames.
pub struct TcpLink {
    stream: TcpStream,
    started: Instant,
}

impl TcpLink {
    /// Connects to a listening peer.
    pub fn connect(addr: &str) -> Result<Self, NetError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self { stream, started: Instant::now() })
    }

    /// Binds `addr` and returns the listener plus its resolved address
    /// (useful with port 0).
    pub fn bind(addr: &str) -> Result<(TcpListener, SocketAddr), NetError> {
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        Ok((listener, local))
    }

    /// Accepts one connection from `listener`.
    pub fn accept(listener: &TcpListener) -> Result<Self, NetError> {
        let (stream, _) = listener.accept()?;
        stream.set_nodelay(true)?;
        Ok(Self { stream, started: Instant::now() })
    }
}

impl RawLink for TcpLink {
    fn send_bytes(
        &mut self,
        bytes: &[u8],
        _charged_bytes: u64,
        _method_id: u8,
        _elements: u64,
    ) -> Result<(), NetError> {
        let len = u32::try_from(bytes.len())
            .map_err(|_| NetError::Protocol("frame exceeds u32 length prefix".into()))?;
        if len > MAX_FRAME_BYTES {
            return Err(NetError::Protocol(format!("frame of {len} bytes exceeds the cap")));
        }
        self.stream.write_all(&len.to_le_bytes())?;
        self.stream.write_all(bytes)?;
        self.stream.flush()?;
        Ok(())
    }

    fn recv_bytes(&mut self, timeout_s: f64) -> Result<Vec<u8>, NetError> {
        let timeout = if timeout_s <= 0.0 {
            Duration::from_micros(1)
        } else {
            Duration::from_secs_f64(timeout_s)
        };
        self.stream.set_read_timeout(Some(timeout))?;
        let mut len_buf = [0u8; 4];
        read_exact_mapped(&mut self.stream, &mut len_buf, timeout_s)?;
        let len = u32::from_le_bytes(len_buf);
        if len > MAX_FRAME_BYTES {
            return Err(NetError::Corrupt(format!(
                "length prefix {len} exceeds the frame cap"
            )));
        }
        let mut body = vec![0u8; len as usize];
        read_exact_mapped(&mut self.stream, &mut body, timeout_s)?;
        Ok(body)
    }

    fn now(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    fn advance(&mut self, _dt_s: f64) {
        // Real transports run on the wall clock; compute time passes on its
        // own.
    }
}

fn read_exact_mapped(stream: &mut TcpStream, buf: &mut [u8], timeout_s: f64) -> Result<(), NetError> {
    stream.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut => {
            NetError::Timeout { waited_s: timeout_s }
        }
        std::io::ErrorKind::UnexpectedEof => {
            NetError::Disconnected("stream closed mid-frame".into())
        }
        _ => NetError::Io(e),
    })
}
