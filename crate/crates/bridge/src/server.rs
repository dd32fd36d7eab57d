use std::io;
use std::net::{Ipv4Addr, Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use crate::mailbox::{CommandMailbox, StateOutbox};
use crate::protocol::{read_frame, write_frame, DecodeError, Message, StateMessage, PROTOCOL_VERSION};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BridgeConfig {
    /// Silence after which operator commands are held.
    pub stale_after: Duration,
    /// State frames buffered per session before the oldest is dropped.
    pub outbound_capacity: usize,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            stale_after: Duration::from_secs(2),
            outbound_capacity: 64,
        }
    }
}

#[derive(Default)]
struct Broadcast {
    snapshot: Option<StateMessage>,
    session: Option<Arc<StateOutbox>>,
}

/// The simulator's side of the bridge: take commands, publish state.
/// Neither call waits on the network.
#[derive(Clone)]
pub struct BridgeHandle {
    mailbox: Arc<CommandMailbox>,
    broadcast: Arc<Mutex<Broadcast>>,
    config: BridgeConfig,
}

impl BridgeHandle {
    fn new(config: BridgeConfig) -> Self {
        Self {
            mailbox: Arc::new(CommandMailbox::new()),
            broadcast: Arc::new(Mutex::new(Broadcast::default())),
            config,
        }
    }

    pub fn mailbox(&self) -> &CommandMailbox {
        &self.mailbox
    }

    pub fn publish(&self, state: StateMessage) {
        let mut b = self.broadcast.lock().unwrap();
        if let Some(out) = &b.session {
            out.publish(state.clone());
        }
        b.snapshot = Some(state);
    }

    /// Commands should be held: no session, or it has gone quiet.
    pub fn is_stale(&self, now: Instant) -> bool {
        self.mailbox.is_stale(now, self.config.stale_after)
    }

    pub fn session_active(&self) -> bool {
        self.mailbox.session_active()
    }
}

pub struct BridgeServer {
    handle: BridgeHandle,
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    active: Arc<Mutex<Option<TcpStream>>>,
    accept: Option<JoinHandle<()>>,
}

impl BridgeServer {
    pub fn handle(&self) -> BridgeHandle {
        self.handle.clone()
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for BridgeServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(s) = self.active.lock().unwrap().take() {
            let _ = s.shutdown(Shutdown::Both);
        }
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

/// Listen on localhost `port` (0 picks a free one) and serve one operator
/// session at a time.
pub fn serve(port: u16, config: BridgeConfig) -> io::Result<BridgeServer> {
    let listener = TcpListener::bind((Ipv4Addr::LOCALHOST, port))?;
    let addr = listener.local_addr()?;
    let handle = BridgeHandle::new(config);
    let shutdown = Arc::new(AtomicBool::new(false));
    let active: Arc<Mutex<Option<TcpStream>>> = Arc::new(Mutex::new(None));
    let busy = Arc::new(AtomicBool::new(false));

    let accept = {
        let handle = handle.clone();
        let shutdown = shutdown.clone();
        let active = active.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                if shutdown.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(mut stream) = stream else { continue };
                let _ = stream.set_nodelay(true);
                if busy.swap(true, Ordering::SeqCst) {
                    let _ = write_frame(
                        &mut stream,
                        &Message::Reject {
                            reason: "another operator session is active".into(),
                        },
                    );
                    continue;
                }
                if let Ok(s) = stream.try_clone() {
                    *active.lock().unwrap() = Some(s);
                }
                let handle = handle.clone();
                let busy = busy.clone();
                let active = active.clone();
                thread::spawn(move || {
                    if let Err(e) = run_session(stream, &handle) {
                        debug!(target: "bridge", "session ended: {e}");
                    }
                    active.lock().unwrap().take();
                    busy.store(false, Ordering::SeqCst);
                });
            }
        })
    };
    info!(target: "bridge", "listening on {addr}");
    Ok(BridgeServer {
        handle,
        addr,
        shutdown,
        active,
        accept: Some(accept),
    })
}

fn send(stream: &Mutex<TcpStream>, message: &Message) -> io::Result<()> {
    write_frame(&mut *stream.lock().unwrap(), message)
}

fn run_session(stream: TcpStream, handle: &BridgeHandle) -> Result<(), DecodeError> {
    let mut reader = stream.try_clone()?;
    let writer = Arc::new(Mutex::new(stream));

    match read_frame(&mut reader)? {
        Some(d) => match d.message {
            Message::Hello { protocol, .. } if protocol == PROTOCOL_VERSION => {}
            Message::Hello { protocol, .. } => {
                send(
                    &writer,
                    &Message::Reject {
                        reason: format!("protocol {protocol} not supported, expected {PROTOCOL_VERSION}"),
                    },
                )?;
                return Ok(());
            }
            _ => {
                send(
                    &writer,
                    &Message::Reject {
                        reason: "expected hello".into(),
                    },
                )?;
                return Ok(());
            }
        },
        None => return Ok(()),
    }

    let outbox = Arc::new(StateOutbox::new(handle.config.outbound_capacity));
    {
        let mut b = handle.broadcast.lock().unwrap();
        send(
            &writer,
            &Message::Welcome {
                protocol: PROTOCOL_VERSION.into(),
            },
        )?;
        if let Some(s) = &b.snapshot {
            send(&writer, &Message::State(s.clone()))?;
        }
        b.session = Some(outbox.clone());
        handle.mailbox.begin_session(Instant::now());
    }

    let pump = {
        let outbox = outbox.clone();
        let writer = writer.clone();
        thread::spawn(move || {
            while !outbox.is_closed() {
                if let Some(m) = outbox.next_timeout(Duration::from_millis(100)) {
                    if send(&writer, &m).is_err() {
                        outbox.close();
                    }
                }
            }
        })
    };

    let result = read_loop(&mut reader, &writer, handle);

    handle.mailbox.end_session();
    handle.broadcast.lock().unwrap().session = None;
    outbox.close();
    let _ = pump.join();
    result
}

fn read_loop(reader: &mut TcpStream, writer: &Mutex<TcpStream>, handle: &BridgeHandle) -> Result<(), DecodeError> {
    loop {
        let decoded = match read_frame(reader) {
            Ok(Some(d)) => d,
            Ok(None) => return Ok(()),
            Err(DecodeError::Malformed(message)) => {
                handle.mailbox.touch(Instant::now());
                send(writer, &Message::Error { field: None, message })?;
                continue;
            }
            Err(e) => return Err(e),
        };
        let now = Instant::now();
        handle.mailbox.touch(now);
        let reply = match decoded.message {
            Message::Command(c) => match c.validate() {
                Err(e) => Some(Message::Error {
                    field: Some(e.field),
                    message: e.message,
                }),
                Ok(()) => handle.mailbox.deposit(c, now).err().map(|e| Message::Error {
                    field: Some("sequence".into()),
                    message: format!("sequence {} is not after {}", e.received, e.last),
                }),
            },
            other => {
                warn!(target: "bridge", "unexpected message from client: {other:?}");
                Some(Message::Error {
                    field: Some("type".into()),
                    message: "only command messages are accepted after the handshake".into(),
                })
            }
        };
        if let Some(r) = reply {
            send(writer, &r)?;
        }
    }
}
