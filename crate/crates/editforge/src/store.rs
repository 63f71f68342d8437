//! Content-addressed artifact store: a flat directory of files named by
//! the SHA-256 of their bytes, plus an extension. Writes are
//! write-once; putting identical bytes twice is a no-op.

use std::io;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::model::ImageRef;

#[derive(Debug, Clone)]
pub struct ArtifactStore {
    root: PathBuf,
}

impl ArtifactStore {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<ArtifactStore> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(ArtifactStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Store `bytes` under their content hash; returns (path, hex hash).
    pub fn put(&self, bytes: &[u8], ext: &str) -> io::Result<(PathBuf, String)> {
        let hash = hex::encode(Sha256::digest(bytes));
        let path = self.root.join(format!("{hash}.{ext}"));
        if !path.exists() {
            // write via temp file + rename so concurrent writers of the
            // same content never observe a partial file
            let tmp = self.root.join(format!(".{hash}.{ext}.tmp-{}", std::process::id()));
            std::fs::write(&tmp, bytes)?;
            std::fs::rename(&tmp, &path)?;
        }
        Ok((path, hash))
    }

    /// Store image bytes and build an [`ImageRef`] with decoded
    /// dimensions.
    pub fn put_image(&self, bytes: &[u8], ext: &str) -> Result<ImageRef, crate::imaging::ImagingError> {
        let img = crate::imaging::GrayImage::decode(bytes)?;
        let (path, hash) = self
            .put(bytes, ext)
            .map_err(|e| crate::imaging::ImagingError::Invalid(e.to_string()))?;
        Ok(ImageRef {
            uri: path.to_string_lossy().to_string(),
            width: img.width as u32,
            height: img.height as u32,
            content_hash: hash,
        })
    }

    /// Read any local file by path; image refs produced by this store
    /// carry absolute paths.
    pub fn read_uri(&self, uri: &str) -> io::Result<Vec<u8>> {
        std::fs::read(uri)
    }
}
