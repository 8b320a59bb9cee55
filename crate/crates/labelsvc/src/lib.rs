//! Label service: neighbour grids, patch imagery with source context, and
//! the expert label store.
//!
//! An artifact directory holds everything the service reads:
//!
//! ```text
//! manifest.tsv  sources.tsv  patches/     patch extraction output
//! checkpoint.depc                         trained model
//! index.temb  index.ids  index.meta.tsv   embedding index with clusters
//! classes.tsv                             optional class registry
//! labels.jsonl                            label store, created on demand
//! ui/                                     optional static bundle
//! ```

pub mod api;
pub mod labels;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use terrain_core::dcml::CHECKPOINT_FILE;
use terrain_core::nnet::DepModel;
use terrain_core::patchex::{self, Manifest, PatchRecord, SourceEntry, MANIFEST_FILE, PATCH_DIR, SOURCES_FILE};
use terrain_core::retrieval::{self, EmbeddingIndex, SiteDrive};
use terrain_core::store::{self, EmbeddingStore};
use terrain_core::taxonomy::ClassRegistry;

pub use labels::{LabelRecord, LabelStore};

pub const INDEX_FILE: &str = "index.temb";
pub const LABELS_FILE: &str = "labels.jsonl";
pub const REGISTRY_FILE: &str = "classes.tsv";
pub const UI_DIR: &str = "ui";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("missing artifact {}", .0.display())]
    Missing(PathBuf),
    #[error("{}: {reason}", path.display())]
    Artifact { path: PathBuf, reason: String },
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error(transparent)]
    Labels(#[from] labels::LabelError),
    #[error("server: {0}")]
    Server(std::io::Error),
}

/// Artifact paths resolved from a directory, with optional overrides.
#[derive(Clone, Debug)]
pub struct ServeConfig {
    pub dir: PathBuf,
    pub labels: Option<PathBuf>,
    pub ui: Option<PathBuf>,
    pub addr: SocketAddr,
}

impl ServeConfig {
    pub fn new(dir: impl Into<PathBuf>, addr: SocketAddr) -> Self {
        Self { dir: dir.into(), labels: None, ui: None, addr }
    }

    pub fn labels_path(&self) -> PathBuf {
        self.labels.clone().unwrap_or_else(|| self.dir.join(LABELS_FILE))
    }

    pub fn ui_dir(&self) -> PathBuf {
        self.ui.clone().unwrap_or_else(|| self.dir.join(UI_DIR))
    }
}

/// Loaded, immutable artifacts plus the label store.
pub struct App {
    pub dataset_dir: PathBuf,
    pub manifest: Manifest,
    by_id: HashMap<String, usize>,
    sources: HashMap<String, SourceEntry>,
    pub index: EmbeddingIndex,
    /// Index positions of every cluster, in index order.
    pub clusters: BTreeMap<usize, Vec<usize>>,
    cluster_of: Vec<Option<usize>>,
    pub registry: ClassRegistry,
    pub labels: LabelStore,
    pub ui_dir: Option<PathBuf>,
}

fn require(path: PathBuf) -> Result<PathBuf, ServeError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(ServeError::Missing(path))
    }
}

fn artifact(path: &Path) -> impl FnOnce(String) -> ServeError + '_ {
    move |reason| ServeError::Artifact { path: path.to_path_buf(), reason }
}

impl App {
    pub fn load(config: &ServeConfig) -> Result<Self, ServeError> {
        let dir = &config.dir;
        let manifest_path = require(dir.join(MANIFEST_FILE))?;
        let sources_path = require(dir.join(SOURCES_FILE))?;
        require(dir.join(PATCH_DIR))?;
        let checkpoint_path = require(dir.join(CHECKPOINT_FILE))?;
        let index_path = require(dir.join(INDEX_FILE))?;
        require(store::ids_path(&index_path))?;
        let meta_path = require(retrieval::meta_path(&index_path))?;

        let manifest = Manifest::read(&manifest_path).map_err(|e| artifact(&manifest_path)(e.to_string()))?;
        let by_id: HashMap<String, usize> =
            manifest.records.iter().enumerate().map(|(i, r)| (r.patch_id.clone(), i)).collect();
        let sources = patchex::read_sources(&sources_path)
            .map_err(|e| artifact(&sources_path)(e.to_string()))?
            .into_iter()
            .map(|s| (s.image_id.clone(), s))
            .collect();
        let model = DepModel::<f32>::load(&checkpoint_path).map_err(|e| artifact(&checkpoint_path)(e.to_string()))?;

        let embeddings = EmbeddingStore::read(&index_path).map_err(|e| artifact(&index_path)(e.to_string()))?;
        if embeddings.dim() != model.config().embed_dim {
            return Err(artifact(&index_path)(format!(
                "embedding dimension {} does not match the checkpoint's {}",
                embeddings.dim(),
                model.config().embed_dim
            )));
        }
        let mut locations = Vec::with_capacity(embeddings.len());
        for id in embeddings.ids() {
            let r = by_id
                .get(id)
                .map(|&i| &manifest.records[i])
                .ok_or_else(|| artifact(&index_path)(format!("patch {id} is not in the manifest")))?;
            locations.push(SiteDrive { site: r.site, drive: r.drive });
        }
        let index = EmbeddingIndex::new(embeddings.ids().to_vec(), embeddings.dim(), embeddings.data().to_vec(), locations)
            .map_err(|e| artifact(&index_path)(e.to_string()))?;

        let meta = retrieval::read_meta(&meta_path).map_err(|e| artifact(&meta_path)(e.to_string()))?;
        if meta.len() != index.len() || meta.iter().zip(index.ids()).any(|(m, id)| &m.patch_id != id) {
            return Err(artifact(&meta_path)("rows are not aligned with the index".into()));
        }
        let cluster_of: Vec<Option<usize>> = meta.iter().map(|m| m.cluster).collect();
        let mut clusters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, c) in cluster_of.iter().enumerate() {
            if let Some(c) = c {
                clusters.entry(*c).or_default().push(i);
            }
        }

        let registry_path = dir.join(REGISTRY_FILE);
        let registry = if registry_path.exists() {
            let text = std::fs::read_to_string(&registry_path).map_err(|e| artifact(&registry_path)(e.to_string()))?;
            ClassRegistry::parse(&text).map_err(|e| artifact(&registry_path)(e.to_string()))?
        } else {
            ClassRegistry::builtin()
        };
        let labels = LabelStore::open(&config.labels_path())?;
        let ui_dir = Some(config.ui_dir()).filter(|p| p.is_dir());
        Ok(Self {
            dataset_dir: dir.clone(),
            manifest,
            by_id,
            sources,
            index,
            clusters,
            cluster_of,
            registry,
            labels,
            ui_dir,
        })
    }

    pub fn record(&self, patch_id: &str) -> Option<&PatchRecord> {
        self.by_id.get(patch_id).map(|&i| &self.manifest.records[i])
    }

    pub fn source(&self, image_id: &str) -> Option<&SourceEntry> {
        self.sources.get(image_id)
    }

    pub fn cluster_of(&self, patch_id: &str) -> Option<usize> {
        self.index.position(patch_id).and_then(|i| self.cluster_of[i])
    }
}

/// Serves `app` on an already bound listener until the task is dropped.
pub async fn run(listener: tokio::net::TcpListener, app: Arc<App>) -> Result<(), ServeError> {
    axum::serve(listener, api::router(app)).await.map_err(ServeError::Server)
}

/// Loads the artifacts, binds and serves.
pub async fn serve(config: ServeConfig) -> Result<(), ServeError> {
    let app = Arc::new(App::load(&config)?);
    let listener = tokio::net::TcpListener::bind(config.addr)
        .await
        .map_err(|source| ServeError::Bind { addr: config.addr, source })?;
    let addr = listener.local_addr().map_err(ServeError::Server)?;
    log::info!("serving {} patches from {} on http://{addr}", app.index.len(), config.dir.display());
    run(listener, app).await
}
