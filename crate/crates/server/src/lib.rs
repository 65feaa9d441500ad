//! HTTP gateway for an [`exact_core::Instance`].
//!
//! [`app`] builds the router; [`bind`] opens the instance described by a
//! [`Config`] and binds its listener; [`spawn`] runs a server on a
//! background thread, which is what the integration tests use.

pub mod api;
pub mod auth;
pub mod config;
pub mod dto;
pub mod error;
pub mod page;
pub mod peer;

use std::collections::HashSet;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::routing::get;
use axum::Router;
use exact_core::{ImageSetId, Instance};
use tokio::net::TcpListener;

pub use config::{Config, ConfigError, Overrides};

/// Imports currently running, keyed by peer and local set.
#[derive(Default)]
pub struct ImportLocks(Mutex<HashSet<(String, ImageSetId)>>);

pub struct ImportGuard<'a> {
    locks: &'a ImportLocks,
    key: (String, ImageSetId),
}

impl ImportLocks {
    pub fn begin(&self, peer: &str, set: ImageSetId) -> Option<ImportGuard<'_>> {
        let key = (peer.to_string(), set);
        self.0
            .lock()
            .expect("import lock")
            .insert(key.clone())
            .then_some(ImportGuard { locks: self, key })
    }
}

impl Drop for ImportGuard<'_> {
    fn drop(&mut self) {
        self.locks.0.lock().expect("import lock").remove(&self.key);
    }
}

#[derive(Clone)]
pub struct AppState {
    pub inst: Arc<Instance>,
    pub peers: peer::PeerClient,
    /// Public URL prefix used in pagination links.
    pub base_url: String,
    pub imports: Arc<ImportLocks>,
}

impl AppState {
    pub fn new(inst: Arc<Instance>) -> Self {
        let base_url = inst.base_url().to_string();
        AppState {
            inst,
            peers: peer::PeerClient::new(),
            base_url,
            imports: Arc::default(),
        }
    }
}

async fn healthz() -> &'static str {
    "ok"
}

pub fn app(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .nest("/api/v1", api::routes())
        .fallback(api::fallback)
        .with_state(state)
}

#[derive(Debug, thiserror::Error)]
pub enum StartError {
    #[error("cannot bind {0}: {1}")]
    Bind(SocketAddr, std::io::Error),
    #[error("cannot open storage: {0}")]
    Storage(#[from] exact_core::Error),
}

/// Binds the listener and opens the instance. Without a configured base
/// URL, the instance advertises the bound address.
pub async fn bind(config: &Config) -> Result<(TcpListener, Arc<Instance>), StartError> {
    let listener = TcpListener::bind(config.bind)
        .await
        .map_err(|e| StartError::Bind(config.bind, e))?;
    let addr = listener.local_addr().map_err(|e| StartError::Bind(config.bind, e))?;
    let base = config.base_url.clone().unwrap_or_else(|| format!("http://{addr}"));
    let inst = Instance::open(config.instance_config(&base))?;
    Ok((listener, Arc::new(inst)))
}

/// A server running on its own thread; stopped on drop.
pub struct RunningServer {
    pub addr: SocketAddr,
    pub base_url: String,
    pub inst: Arc<Instance>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl RunningServer {
    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

pub fn spawn(config: Config) -> Result<RunningServer, StartError> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .expect("tokio runtime");
    let (listener, inst) = rt.block_on(bind(&config))?;
    let addr = listener.local_addr().expect("bound address");
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let app = app(AppState::new(inst.clone()));
    let thread = std::thread::spawn(move || {
        rt.block_on(async move {
            axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
                .expect("server");
        })
    });
    Ok(RunningServer {
        addr,
        base_url: inst.base_url().to_string(),
        inst,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
