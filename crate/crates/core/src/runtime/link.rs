//! Frame transports: in-process channels and TCP streams.

use std::io::{ErrorKind, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};
use std::time::Duration;

use crate::error::{Error, Result};
use crate::runtime::wire::read_frame;

pub trait FrameSink: Send {
    fn send_frame(&mut self, frame: &[u8]) -> Result<()>;
    /// Closes the connection so that a peer blocked in a read wakes up.
    fn close(&mut self) {}
}

pub trait FrameSource: Send {
    /// Blocks until a complete frame arrives.
    fn recv_frame(&mut self) -> Result<Vec<u8>>;
}

pub struct Connection {
    pub sink: Box<dyn FrameSink>,
    pub source: Box<dyn FrameSource>,
}

impl FrameSink for Sender<Vec<u8>> {
    fn send_frame(&mut self, frame: &[u8]) -> Result<()> {
        self.send(frame.to_vec()).map_err(|_| Error::ChannelClosed)
    }
}

impl FrameSource for Receiver<Vec<u8>> {
    fn recv_frame(&mut self) -> Result<Vec<u8>> {
        self.recv().map_err(|_| Error::ChannelClosed)
    }
}

impl FrameSink for TcpStream {
    fn send_frame(&mut self, frame: &[u8]) -> Result<()> {
        self.write_all(frame)?;
        self.flush()?;
        Ok(())
    }

    fn close(&mut self) {
        let _ = self.shutdown(Shutdown::Both);
    }
}

impl FrameSource for TcpStream {
    fn recv_frame(&mut self) -> Result<Vec<u8>> {
        read_frame(self).map_err(|e| match e {
            Error::Io(io) if io.kind() == ErrorKind::UnexpectedEof => Error::ChannelClosed,
            other => other,
        })
    }
}

/// Master-side source of new worker connections.
pub trait Acceptor {
    /// Returns immediately with `None` when nobody is waiting.
    fn try_accept(&mut self) -> Result<Option<Connection>>;
}

/// In-process hub; workers reach it through [`ChannelConnector`]s.
pub struct ChannelHub {
    incoming: Receiver<Connection>,
}

#[derive(Clone)]
pub struct ChannelConnector {
    outgoing: Sender<Connection>,
}

pub fn channel_hub() -> (ChannelHub, ChannelConnector) {
    let (tx, rx) = mpsc::channel();
    (
        ChannelHub { incoming: rx },
        ChannelConnector { outgoing: tx },
    )
}

impl ChannelConnector {
    /// Worker end of a fresh duplex channel pair.
    pub fn connect(&self) -> Result<Connection> {
        let (to_master, from_worker) = mpsc::channel::<Vec<u8>>();
        let (to_worker, from_master) = mpsc::channel::<Vec<u8>>();
        self.outgoing
            .send(Connection {
                sink: Box::new(to_worker),
                source: Box::new(from_worker),
            })
            .map_err(|_| Error::ChannelClosed)?;
        Ok(Connection {
            sink: Box::new(to_master),
            source: Box::new(from_master),
        })
    }
}

impl Acceptor for ChannelHub {
    fn try_accept(&mut self) -> Result<Option<Connection>> {
        match self.incoming.try_recv() {
            Ok(c) => Ok(Some(c)),
            Err(TryRecvError::Empty) => Ok(None),
            Err(TryRecvError::Disconnected) => Ok(None),
        }
    }
}

pub struct TcpAcceptor {
    listener: TcpListener,
}

impl TcpAcceptor {
    pub fn bind(addr: impl ToSocketAddrs) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        Ok(Self { listener })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }
}

impl Acceptor for TcpAcceptor {
    fn try_accept(&mut self) -> Result<Option<Connection>> {
        match self.listener.accept() {
            Ok((stream, _)) => Ok(Some(tcp_connection(stream)?)),
            Err(e) if e.kind() == ErrorKind::WouldBlock => Ok(None),
            Err(e) => Err(e.into()),
        }
    }
}

fn tcp_connection(stream: TcpStream) -> Result<Connection> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let writer = stream.try_clone()?;
    Ok(Connection {
        sink: Box::new(writer),
        source: Box::new(stream),
    })
}

/// Connects with exponential backoff starting at `base_delay`.
pub fn connect_with_retry(addr: &str, attempts: u32, base_delay: Duration) -> Result<Connection> {
    let attempts = attempts.max(1);
    let mut last = String::new();
    for i in 0..attempts {
        match TcpStream::connect(addr) {
            Ok(s) => return tcp_connection(s),
            Err(e) => {
                log::warn!(
                    "connect to {addr} failed (attempt {}/{attempts}): {e}",
                    i + 1
                );
                last = e.to_string();
            }
        }
        if i + 1 < attempts {
            std::thread::sleep(base_delay * 2u32.pow(i));
        }
    }
    Err(Error::ConnectionFailed {
        attempts,
        reason: last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_pair_is_duplex() {
        let (mut hub, conn) = channel_hub();
        assert!(hub.try_accept().unwrap().is_none());
        let mut worker = conn.connect().unwrap();
        let mut master = hub.try_accept().unwrap().unwrap();
        worker.sink.send_frame(b"up").unwrap();
        master.sink.send_frame(b"down").unwrap();
        assert_eq!(master.source.recv_frame().unwrap(), b"up");
        assert_eq!(worker.source.recv_frame().unwrap(), b"down");
        drop(master);
        assert!(matches!(
            worker.source.recv_frame(),
            Err(Error::ChannelClosed)
        ));
    }

    #[test]
    fn refused_connection_reports_attempts() {
        let port = TcpListener::bind("127.0.0.1:0")
            .unwrap()
            .local_addr()
            .unwrap()
            .port();
        let r = connect_with_retry(&format!("127.0.0.1:{port}"), 3, Duration::from_millis(1));
        assert!(matches!(
            r,
            Err(Error::ConnectionFailed { attempts: 3, .. })
        ));
    }
}
