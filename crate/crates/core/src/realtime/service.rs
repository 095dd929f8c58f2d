//! WebSocket front end: one decode thread, one thread per operator client.

use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use tungstenite::{Message, WebSocket};

use super::session::{ClientMessage, RunStats, ServerMessage, Session};
use super::source::SampleSource;
use super::RealtimeError;

#[derive(Debug, Default)]
struct Shared {
    clients: Vec<Sender<String>>,
    hello: Option<String>,
    state: Option<String>,
    done: bool,
}

/// A running service. Dropping it without [`ServiceHandle::join`] leaves
/// the threads running until the source ends.
#[derive(Debug)]
pub struct ServiceHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    session: Option<JoinHandle<Result<RunStats, RealtimeError>>>,
    acceptor: Option<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(&self) {
        self.stop.store(true, Ordering::Relaxed);
    }

    pub fn is_finished(&self) -> bool {
        self.session.as_ref().is_none_or(|t| t.is_finished())
    }

    /// Waits for the session to end and returns its statistics.
    pub fn join(mut self) -> Result<RunStats, RealtimeError> {
        let r = self
            .session
            .take()
            .expect("joined once")
            .join()
            .map_err(|_| RealtimeError::Invalid("session thread panicked".into()))?;
        self.stop();
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
        r
    }
}

fn client_loop(stream: TcpStream, shared: Arc<Mutex<Shared>>, control: Sender<ClientMessage>, stop: Arc<AtomicBool>) {
    if stream.set_nonblocking(false).is_err() {
        return;
    }
    let Ok(mut ws): Result<WebSocket<TcpStream>, _> = tungstenite::accept(stream) else {
        return;
    };
    if ws.get_ref().set_read_timeout(Some(Duration::from_millis(10))).is_err() {
        return;
    }
    let (tx, rx) = mpsc::channel::<String>();
    {
        let mut g = shared.lock().expect("service lock");
        for m in g.hello.iter().chain(g.state.iter()) {
            let _ = tx.send(m.clone());
        }
        g.clients.push(tx);
    }
    loop {
        let mut ended = false;
        for text in rx.try_iter() {
            ended |= text.contains("\"type\":\"end\"");
            if ws.send(Message::text(text)).is_err() {
                return;
            }
        }
        if ended || stop.load(Ordering::Relaxed) {
            let _ = ws.close(None);
            let _ = ws.flush();
            return;
        }
        match ws.read() {
            Ok(Message::Text(t)) => {
                let reply = match serde_json::from_str::<ClientMessage>(&t) {
                    Ok(msg) => control.send(msg).err().map(|_| "session has ended".to_string()),
                    Err(e) => Some(format!("bad message: {e}")),
                };
                if let Some(message) = reply {
                    let err = serde_json::to_string(&ServerMessage::Error { message }).expect("serializable");
                    if ws.send(Message::text(err)).is_err() {
                        return;
                    }
                }
            }
            Ok(Message::Close(_)) => return,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(_) => return,
        }
    }
}

/// Serves `session` on `listener`, streaming frames from `source`. Every
/// server message is broadcast to all connected clients as JSON text;
/// clients send [`ClientMessage`]s.
pub fn serve(
    listener: TcpListener,
    mut session: Session,
    source: Box<dyn SampleSource>,
) -> Result<ServiceHandle, RealtimeError> {
    let addr = listener.local_addr()?;
    listener.set_nonblocking(true)?;
    let stop = Arc::new(AtomicBool::new(false));
    let shared = Arc::new(Mutex::new(Shared::default()));
    let (ctrl_tx, ctrl_rx) = mpsc::channel::<ClientMessage>();

    let session_thread = {
        let (shared, stop) = (shared.clone(), stop.clone());
        std::thread::spawn(move || {
            let mut emit = |m: &ServerMessage| {
                let text = serde_json::to_string(m).expect("serializable");
                let mut g = shared.lock().expect("service lock");
                match m {
                    ServerMessage::Hello { .. } => g.hello = Some(text.clone()),
                    ServerMessage::State(_) => g.state = Some(text.clone()),
                    _ => {}
                }
                g.clients.retain(|c| c.send(text.clone()).is_ok());
            };
            let r = session.run(source, &ctrl_rx, &stop, &mut emit);
            shared.lock().expect("service lock").done = true;
            r
        })
    };

    let acceptor = {
        let (shared, stop) = (shared.clone(), stop.clone());
        std::thread::spawn(move || {
            let mut clients = Vec::new();
            loop {
                if stop.load(Ordering::Relaxed) {
                    break;
                }
                let done = shared.lock().expect("service lock").done;
                match listener.accept() {
                    Ok((stream, _)) if !done => {
                        let (shared, ctrl, stop) = (shared.clone(), ctrl_tx.clone(), stop.clone());
                        clients.push(std::thread::spawn(move || client_loop(stream, shared, ctrl, stop)));
                    }
                    Ok(_) => {}
                    Err(e) if e.kind() == ErrorKind::WouldBlock => {
                        if done && clients.iter().all(|c: &JoinHandle<()>| c.is_finished()) {
                            break;
                        }
                        std::thread::sleep(Duration::from_millis(10));
                    }
                    Err(_) => break,
                }
            }
            for c in clients {
                let _ = c.join();
            }
        })
    };

    Ok(ServiceHandle { addr, stop, session: Some(session_thread), acceptor: Some(acceptor) })
}
