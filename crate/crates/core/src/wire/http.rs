//! HTTP mode: an axum server wrapping a [`Service`] and a blocking client.

use std::io;
use std::net::{SocketAddr, TcpListener};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, Method as HttpMethod, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::Router;
use tokio::sync::oneshot;

use super::transport::{CaptureHook, Direction};
use super::{Capture, Method, Service, Transport, TransportError, CONTENT_TYPE, MAX_MESSAGE_BYTES};

type SharedService = Arc<dyn Service>;

async fn dispatch(State(service): State<SharedService>, method: HttpMethod, uri: Uri, body: Bytes) -> Response {
    let method = match method {
        HttpMethod::GET => Method::Get,
        HttpMethod::POST => Method::Post,
        _ => return StatusCode::METHOD_NOT_ALLOWED.into_response(),
    };
    let path = uri.path().to_string();
    let out = tokio::task::spawn_blocking(move || service.handle(method, &path, &body)).await;
    match out {
        Ok(bytes) => ([(header::CONTENT_TYPE, CONTENT_TYPE)], bytes).into_response(),
        Err(_) => StatusCode::INTERNAL_SERVER_ERROR.into_response(),
    }
}

fn router(service: SharedService) -> Router {
    Router::new()
        .fallback(dispatch)
        // Oversized bodies still reach the decoder so they get a proper error envelope.
        .layer(DefaultBodyLimit::max(4 * MAX_MESSAGE_BYTES))
        .with_state(service)
}

/// A running HTTP server on its own runtime thread. Dropping it shuts it down.
pub struct HttpServer {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl HttpServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and starts serving.
    pub fn spawn(service: Arc<dyn Service>, addr: SocketAddr) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
        let (tx, rx) = oneshot::channel::<()>();
        let thread = thread::spawn(move || {
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).expect("listener converts");
                let _ = axum::serve(listener, router(service))
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
            });
        });
        Ok(HttpServer { addr, shutdown: Some(tx), thread: Some(thread) })
    }

    /// Serves on the current thread until the process exits.
    pub fn run_forever(service: Arc<dyn Service>, addr: SocketAddr) -> io::Result<()> {
        let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
        runtime.block_on(async move {
            let listener = tokio::net::TcpListener::bind(addr).await?;
            log::info!("listening on {}", listener.local_addr()?);
            axum::serve(listener, router(service)).await
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for HttpServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Blocking HTTP client for one base URL.
#[derive(Clone)]
pub struct HttpClient {
    base_url: String,
    client: reqwest::blocking::Client,
    hook: Option<CaptureHook>,
}

impl HttpClient {
    pub fn new(base_url: impl Into<String>) -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| TransportError::Network(e.to_string()))?;
        Ok(HttpClient { base_url: base_url.into().trim_end_matches('/').to_string(), client, hook: None })
    }

    pub fn with_capture(mut self, capture: &Capture, peer: impl Into<String>) -> Self {
        self.hook = Some(CaptureHook::new(capture.clone(), peer));
        self
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }
}

impl Transport for HttpClient {
    fn round_trip(&self, method: Method, path: &str, body: &[u8]) -> Result<Vec<u8>, TransportError> {
        if let Some(h) = &self.hook {
            h.record(Direction::Request, method, path, body);
        }
        let url = format!("{}{}", self.base_url, path);
        let request = match method {
            Method::Get => self.client.get(url),
            Method::Post => self.client.post(url).header(header::CONTENT_TYPE.as_str(), CONTENT_TYPE).body(body.to_vec()),
        };
        let response = request.send().map_err(|e| TransportError::Network(e.to_string()))?;
        let out = response.bytes().map_err(|e| TransportError::Network(e.to_string()))?.to_vec();
        if let Some(h) = &self.hook {
            h.record(Direction::Response, method, path, &out);
        }
        Ok(out)
    }
}
