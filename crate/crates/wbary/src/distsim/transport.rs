//! Message transports: in-process channels and newline-delimited JSON over
//! TCP. Both move [`ProtocolMessage`] values; the in-process transport
//! passes structs directly (no serialization), TCP goes through the wire
//! encoding.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use crate::error::{Error, Result};

use super::protocol::ProtocolMessage;

pub trait Transport: Send {
    fn send(&mut self, msg: &ProtocolMessage) -> Result<()>;
    fn recv(&mut self, timeout: Duration) -> Result<ProtocolMessage>;
}

/// Channel-backed transport for single-process runs and tests.
pub struct InProcessTransport {
    tx: Sender<ProtocolMessage>,
    rx: Receiver<ProtocolMessage>,
}

/// A connected pair: (coordinator side, agent side).
pub fn in_process_pair() -> (InProcessTransport, InProcessTransport) {
    let (tx_a, rx_b) = channel();
    let (tx_b, rx_a) = channel();
    (InProcessTransport { tx: tx_a, rx: rx_a }, InProcessTransport { tx: tx_b, rx: rx_b })
}

impl Transport for InProcessTransport {
    fn send(&mut self, msg: &ProtocolMessage) -> Result<()> {
        self.tx
            .send(msg.clone())
            .map_err(|_| Error::protocol("peer disconnected (send)"))
    }

    fn recv(&mut self, timeout: Duration) -> Result<ProtocolMessage> {
        self.rx.recv_timeout(timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => Error::protocol("timeout waiting for peer"),
            RecvTimeoutError::Disconnected => Error::protocol("peer disconnected (recv)"),
        })
    }
}

/// Newline-delimited JSON over a TCP stream.
pub struct TcpTransport {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl TcpTransport {
    pub fn new(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        let writer = stream.try_clone()?;
        Ok(TcpTransport { reader: BufReader::new(stream), writer })
    }

    pub fn connect(addr: &str) -> Result<Self> {
        let stream = TcpStream::connect(addr)
            .map_err(|e| Error::protocol(format!("connect {addr}: {e}")))?;
        TcpTransport::new(stream)
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, msg: &ProtocolMessage) -> Result<()> {
        let line = msg.encode()?;
        self.writer.write_all(line.as_bytes())?;
        self.writer.flush()?;
        Ok(())
    }

    fn recv(&mut self, timeout: Duration) -> Result<ProtocolMessage> {
        self.reader.get_ref().set_read_timeout(Some(timeout))?;
        let mut line = String::new();
        let read = self
            .reader
            .read_line(&mut line)
            .map_err(|e| Error::protocol(format!("read: {e}")))?;
        if read == 0 {
            return Err(Error::protocol("peer closed the connection"));
        }
        ProtocolMessage::decode(&line)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::TcpListener;

    #[test]
    fn in_process_round_trip() {
        let (mut a, mut b) = in_process_pair();
        a.send(&ProtocolMessage::Shutdown).unwrap();
        let got = b.recv(Duration::from_secs(1)).unwrap();
        assert_eq!(got, ProtocolMessage::Shutdown);
    }

    #[test]
    fn in_process_timeout() {
        let (mut a, _b) = in_process_pair();
        assert!(a.recv(Duration::from_millis(20)).is_err());
    }

    #[test]
    fn tcp_round_trip() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut t = TcpTransport::new(stream).unwrap();
            let msg = t.recv(Duration::from_secs(2)).unwrap();
            t.send(&msg).unwrap();
        });
        let mut client = TcpTransport::connect(&addr.to_string()).unwrap();
        client.send(&ProtocolMessage::Shutdown).unwrap();
        let echoed = client.recv(Duration::from_secs(2)).unwrap();
        assert_eq!(echoed, ProtocolMessage::Shutdown);
        handle.join().unwrap();
    }
}
