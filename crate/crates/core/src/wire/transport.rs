use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam::channel::{self, Receiver, Sender};
use parking_lot::Mutex;
use thiserror::Error;

use super::{decode, encode, Body, Envelope, ErrorBody, MessageType, WireError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Get,
    Post,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Get => "GET",
            Method::Post => "POST",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("peer disconnected")]
    Disconnected,
    #[error("network error: {0}")]
    Network(String),
}

/// Server side of an endpoint set. Takes raw request bytes and returns an
/// encoded response envelope.
pub trait Service: Send + Sync {
    fn handle(&self, method: Method, path: &str, body: &[u8]) -> Vec<u8>;
}

impl<S: Service + ?Sized> Service for Arc<S> {
    fn handle(&self, method: Method, path: &str, body: &[u8]) -> Vec<u8> {
        (**self).handle(method, path, body)
    }
}

/// Client side: one request, one response.
pub trait Transport: Send + Sync {
    fn round_trip(&self, method: Method, path: &str, body: &[u8]) -> Result<Vec<u8>, TransportError>;
}

impl<T: Transport + ?Sized> Transport for Arc<T> {
    fn round_trip(&self, method: Method, path: &str, body: &[u8]) -> Result<Vec<u8>, TransportError> {
        (**self).round_trip(method, path, body)
    }
}

impl<T: Transport + ?Sized> Transport for &T {
    fn round_trip(&self, method: Method, path: &str, body: &[u8]) -> Result<Vec<u8>, TransportError> {
        (**self).round_trip(method, path, body)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Request,
    Response,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapturedMessage {
    /// Label of the remote party, e.g. `"idp"` or `"sp:cinema"`.
    pub peer: String,
    pub direction: Direction,
    pub method: Method,
    pub path: String,
    pub bytes: Vec<u8>,
}

impl CapturedMessage {
    pub fn contains(&self, needle: &[u8]) -> bool {
        !needle.is_empty() && self.bytes.windows(needle.len()).any(|w| w == needle)
    }
}

/// Append-only transcript shared by every transport it is attached to.
#[derive(Debug, Clone, Default)]
pub struct Capture(Arc<Mutex<Vec<CapturedMessage>>>);

impl Capture {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, message: CapturedMessage) {
        self.0.lock().push(message);
    }

    pub fn messages(&self) -> Vec<CapturedMessage> {
        self.0.lock().clone()
    }

    pub fn len(&self) -> usize {
        self.0.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.0.lock().clear();
    }
}

#[derive(Debug, Clone)]
pub(crate) struct CaptureHook {
    capture: Capture,
    peer: String,
}

impl CaptureHook {
    pub(crate) fn new(capture: Capture, peer: impl Into<String>) -> Self {
        CaptureHook { capture, peer: peer.into() }
    }

    pub(crate) fn record(&self, direction: Direction, method: Method, path: &str, bytes: &[u8]) {
        self.capture.record(CapturedMessage {
            peer: self.peer.clone(),
            direction,
            method,
            path: path.to_string(),
            bytes: bytes.to_vec(),
        });
    }
}

#[derive(Debug, Clone)]
pub struct LoopbackOptions {
    pub latency: Duration,
    pub capture: Option<(Capture, String)>,
    /// Server threads; more than one allows concurrent in-flight requests.
    pub workers: usize,
}

impl Default for LoopbackOptions {
    fn default() -> Self {
        LoopbackOptions { latency: Duration::ZERO, capture: None, workers: 4 }
    }
}

impl LoopbackOptions {
    pub fn capture(mut self, capture: &Capture, peer: impl Into<String>) -> Self {
        self.capture = Some((capture.clone(), peer.into()));
        self
    }

    pub fn latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    pub fn workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }
}

struct Delivery {
    method: Method,
    path: String,
    body: Vec<u8>,
    reply: Sender<Vec<u8>>,
}

/// In-process client half of a loopback pair.
#[derive(Clone)]
pub struct LoopbackClient {
    tx: Sender<Delivery>,
    latency: Duration,
    hook: Option<CaptureHook>,
}

/// In-process server half; hand it a [`Service`] with [`LoopbackServer::serve`].
pub struct LoopbackServer {
    rx: Receiver<Delivery>,
    workers: usize,
}

/// Creates a connected client/server pair.
pub fn loopback(options: LoopbackOptions) -> (LoopbackClient, LoopbackServer) {
    let (tx, rx) = channel::unbounded();
    let hook = options.capture.map(|(c, peer)| CaptureHook::new(c, peer));
    (
        LoopbackClient { tx, latency: options.latency, hook },
        LoopbackServer { rx, workers: options.workers.max(1) },
    )
}

impl LoopbackServer {
    /// Starts worker threads. They exit once every client handle is dropped.
    pub fn serve<S: Service + ?Sized + 'static>(self, service: Arc<S>) -> Vec<JoinHandle<()>> {
        (0..self.workers)
            .map(|_| {
                let rx = self.rx.clone();
                let service = service.clone();
                thread::spawn(move || {
                    for d in rx.iter() {
                        let out = service.handle(d.method, &d.path, &d.body);
                        let _ = d.reply.send(out);
                    }
                })
            })
            .collect()
    }

    /// Receives one raw request without a service attached.
    pub fn recv(&self) -> Option<(Method, String, Vec<u8>, impl FnOnce(Vec<u8>))> {
        let d = self.rx.recv().ok()?;
        let reply = d.reply;
        Some((d.method, d.path, d.body, move |bytes: Vec<u8>| {
            let _ = reply.send(bytes);
        }))
    }
}

impl Transport for LoopbackClient {
    fn round_trip(&self, method: Method, path: &str, body: &[u8]) -> Result<Vec<u8>, TransportError> {
        if let Some(h) = &self.hook {
            h.record(Direction::Request, method, path, body);
        }
        if !self.latency.is_zero() {
            thread::sleep(self.latency);
        }
        let (reply, response) = channel::bounded(1);
        self.tx
            .send(Delivery { method, path: path.to_string(), body: body.to_vec(), reply })
            .map_err(|_| TransportError::Disconnected)?;
        let out = response.recv().map_err(|_| TransportError::Disconnected)?;
        if let Some(h) = &self.hook {
            h.record(Direction::Response, method, path, &out);
        }
        Ok(out)
    }
}

#[derive(Debug, Error)]
pub enum CallError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("undecodable response: {0}")]
    Wire(#[from] WireError),
    #[error("remote error {0}")]
    Remote(ErrorBody),
    #[error("expected a {expected} response, got {got}")]
    UnexpectedType { expected: MessageType, got: MessageType },
}

/// Sends `body` (or nothing, for GET) and decodes the reply. A successful
/// reply must be of type `expected`; error envelopes of any type surface as
/// [`CallError::Remote`].
pub fn call(
    transport: &dyn Transport,
    method: Method,
    path: &str,
    body: Option<Body>,
    expected: MessageType,
) -> Result<Body, CallError> {
    let bytes = body.map(|b| encode(&Envelope::Message(b))).unwrap_or_default();
    let reply = decode(&transport.round_trip(method, path, &bytes)?)?;
    if let Envelope::Error { error, .. } = reply {
        return Err(CallError::Remote(error));
    }
    if reply.message_type() != expected {
        return Err(CallError::UnexpectedType { expected, got: reply.message_type() });
    }
    reply.into_result().map_err(CallError::Remote)
}
