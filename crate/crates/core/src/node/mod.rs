//! The site node ("grid-box"): catalog, blob store and the federated
//! services built on them, served over the wire protocol.

mod client;
mod config;
mod results;
mod service;

use std::net::TcpListener;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use thiserror::Error;

pub use client::{add_user, ClientError, NodeClient};
pub use config::{NodeConfig, ENV_PREFIX};
pub use results::{local_result, project, LocalQueryError};
pub use service::{AddReceipt, ExecReceipt, Node, QueryOutcome};

pub use crate::vo::SessionToken;
use crate::wire::{self, Accountant, ServerHandle};

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("registry: {0}")]
    Registry(String),
    #[error(transparent)]
    Catalog(#[from] crate::model::CatalogError),
    #[error(transparent)]
    Blob(#[from] crate::imagestore::BlobError),
    #[error(transparent)]
    Anonymize(#[from] crate::imagestore::AnonymizeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A running node. Dropping the handle stops it.
pub struct NodeHandle {
    node: Arc<Node>,
    server: ServerHandle,
    stop: Arc<AtomicBool>,
    maintenance: Option<JoinHandle<()>>,
}

impl NodeHandle {
    pub fn addr(&self) -> String {
        self.node.address().to_string()
    }

    pub fn node(&self) -> &Arc<Node> {
        &self.node
    }

    /// Stop serving at once, severing open connections mid-request. Used to
    /// simulate a site going down.
    pub fn kill(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.server.shutdown();
        if let Some(h) = self.maintenance.take() {
            let _ = h.join();
        }
    }
}

impl Drop for NodeHandle {
    fn drop(&mut self) {
        self.kill();
    }
}

/// Bind, open local state, register with the VO and start serving.
pub fn start_node(cfg: NodeConfig, accountant: Arc<Accountant>) -> Result<NodeHandle, NodeError> {
    let listener = TcpListener::bind(&cfg.listen)?;
    let address = match &cfg.advertise {
        Some(a) => a.clone(),
        None => listener.local_addr()?.to_string(),
    };
    let refresh = cfg.membership_refresh;
    let node = Arc::new(Node::open(cfg, address, accountant.clone())?);
    node.register()?;
    let server = wire::serve(listener, node.clone(), accountant)?;
    let stop = Arc::new(AtomicBool::new(false));
    let maintenance = {
        let (node, stop) = (node.clone(), stop.clone());
        std::thread::Builder::new()
            .name(format!("maint-{}", node.site()))
            .spawn(move || {
                let mut last = Instant::now();
                while !stop.load(Ordering::SeqCst) {
                    std::thread::sleep(Duration::from_millis(50));
                    if last.elapsed() < refresh {
                        continue;
                    }
                    last = Instant::now();
                    if let Err(e) = node.refresh_membership() {
                        log::debug!("{}: membership refresh failed: {e}", node.site());
                    }
                    if node.pending_gossip() > 0 {
                        node.flush_pending_gossip();
                    }
                }
            })?
    };
    Ok(NodeHandle {
        node,
        server,
        stop,
        maintenance: Some(maintenance),
    })
}
