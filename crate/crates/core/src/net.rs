//! Thread-per-connection TCP server for frame-oriented services.

use std::io::{self, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use log::{debug, warn};
use parking_lot::Mutex;

use crate::wire::{read_frame, ErrorCode, Frame, ReadError, WireError};

/// A request/response service. Each connection owns one `Session`.
pub trait Service: Send + Sync + 'static {
    type Session: Default + Send;

    fn handle(&self, session: &mut Self::Session, frame: Frame) -> Frame;

    fn disconnected(&self, _session: &mut Self::Session) {}
}

type Connections = Arc<Mutex<Vec<(TcpStream, JoinHandle<()>)>>>;

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
    conns: Connections,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        // Unblock accept().
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        let conns = std::mem::take(&mut *self.conns.lock());
        for (stream, _) in &conns {
            let _ = stream.shutdown(Shutdown::Both);
        }
        for (_, h) in conns {
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_now();
    }
}

pub fn serve<S: Service>(addr: impl ToSocketAddrs, service: Arc<S>) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let conns: Connections = Arc::default();
    let accept = {
        let stop = stop.clone();
        let conns = conns.clone();
        thread::Builder::new()
            .name(format!("accept-{addr}"))
            .spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let stream = match stream {
                        Ok(s) => s,
                        Err(e) => {
                            warn!("accept on {addr}: {e}");
                            continue;
                        }
                    };
                    let _ = stream.set_nodelay(true);
                    let Ok(handle) = stream.try_clone() else {
                        continue;
                    };
                    let service = service.clone();
                    let worker = thread::spawn(move || connection(stream, &*service));
                    let mut conns = conns.lock();
                    conns.retain(|(_, h)| !h.is_finished());
                    conns.push((handle, worker));
                }
            })?
    };
    Ok(ServerHandle {
        addr,
        stop,
        accept: Some(accept),
        conns,
    })
}

fn connection<S: Service>(stream: TcpStream, service: &S) {
    let peer = stream.peer_addr().ok();
    let Ok(write_half) = stream.try_clone() else {
        return;
    };
    let Ok(closer) = stream.try_clone() else {
        return;
    };
    let mut reader = BufReader::new(stream);
    let mut writer = BufWriter::new(write_half);
    let mut session = S::Session::default();
    loop {
        let reply = match read_frame(&mut reader) {
            Ok(frame) => service.handle(&mut session, frame),
            Err(ReadError::Closed) => break,
            Err(ReadError::TooLarge(len)) => {
                // The stream cannot be resynchronised after an oversized header.
                let e = WireError::new(ErrorCode::FrameTooLarge, format!("payload of {len} bytes"));
                let _ = Frame::error(&e).write_to(&mut writer);
                let _ = writer.flush();
                break;
            }
            Err(ReadError::Io(e)) => {
                debug!("connection {peer:?}: {e}");
                break;
            }
        };
        if reply.write_to(&mut writer).is_err() {
            break;
        }
        if reader.buffer().is_empty() && writer.flush().is_err() {
            break;
        }
    }
    let _ = writer.flush();
    // The accept loop holds another handle, so dropping ours does not close.
    let _ = closer.shutdown(Shutdown::Both);
    service.disconnected(&mut session);
}
